import itertools
import math

import numpy as np
import pytest

from conftest import make_set, params_from
from ruledenoise.errors import EmptyEvaluationError
from ruledenoise.metrics import EvalResult, _top_k, evaluate, ndcg_at_k, rank_items, recall_at_k
from ruledenoise.model import init_params


def test_top_k_basic():
    assert _top_k(np.array([0.1, 0.9, 0.5]), set(), 2) == [1, 2]


def test_top_k_exhaustion_and_ties():
    assert _top_k(np.array([0.3, 0.2, 0.9]), {0, 2}, 5) == [1]
    assert _top_k(np.zeros(6), set(), 4) == [0, 1, 2, 3]


def test_rank_items_rejects_bad_k():
    with pytest.raises(ValueError):
        rank_items(init_params(1, 3, 2, 0), 0, set(), 0)


def test_recall_values():
    assert recall_at_k([1, 9, 8], {1, 2}, 3) == 0.5
    assert recall_at_k([2, 1], {1, 2}, 2) == 1.0
    assert recall_at_k([5, 6], {1, 2}, 2) == 0.0


def test_ndcg_values():
    assert ndcg_at_k([4, 0, 1], {4}, 3) == 1.0
    assert ndcg_at_k([0, 1, 4], {4}, 3) == pytest.approx(0.5)
    assert ndcg_at_k([7, 3, 1], {3, 7}, 3) == pytest.approx(1.0)


def test_perfect_single_user():
    p = params_from([[1.0]], [[0.1], [0.9], [0.5]])
    res = evaluate(p, make_set([(0, 1)], 1, 3), make_set([], 1, 3), ks=(1, 2, 3))
    assert all(res.recall[k] == 1.0 and res.ndcg[k] == 1.0 for k in (1, 2, 3))


def test_no_heldout_users():
    p = init_params(2, 3, 2, 0)
    with pytest.raises(EmptyEvaluationError):
        evaluate(p, make_set([], 2, 3), make_set([(0, 0)], 2, 3))


def brute_force(scores, heldout, train, ks):
    """Rank every permutation-free way: sort by (-score, index) with plain Python."""
    out_r, out_n = {k: [] for k in ks}, {k: [] for k in ks}
    for u, rel in enumerate(heldout):
        if not rel:
            continue
        cand = [i for i in range(len(scores[u])) if i not in train[u]]
        ranked = sorted(cand, key=lambda i: (-scores[u][i], i))
        for k in ks:
            top = ranked[:k]
            hits = [r for r, i in enumerate(top) if i in rel]
            out_r[k].append(len(hits) / len(rel))
            dcg = sum(1 / math.log2(r + 2) for r in hits)
            idcg = sum(1 / math.log2(r + 2) for r in range(min(k, len(rel))))
            out_n[k].append(dcg / idcg)
    return {k: sum(v) / len(v) for k, v in out_r.items()}, {k: sum(v) / len(v) for k, v in out_n.items()}


def random_micro(rng):
    nu, ni = int(rng.integers(1, 6)), int(rng.integers(2, 11))
    # coarse integer scores force plenty of ties
    p = params_from(rng.integers(-2, 3, size=(nu, 2)), rng.integers(-2, 3, size=(ni, 2)))
    train, held = [], []
    for u in range(nu):
        for i in range(ni):
            r = rng.random()
            if r < 0.25:
                train.append((u, i))
            elif r < 0.45:
                held.append((u, i))
    if not held:
        held.append((0, int(ni - 1)))
        train = [t for t in train if t != (0, ni - 1)]
    return p, make_set(held, nu, ni), make_set(train, nu, ni)


def test_matches_brute_force():
    rng = np.random.default_rng(77)
    for _ in range(20):
        p, held, train = random_micro(rng)
        ks = (1, 3, 5, 10)
        res = evaluate(p, held, train, ks)
        rec, nd = brute_force(p.score_matrix(), held.user_items(), train.user_items(), ks)
        assert res.recall == rec and res.ndcg == nd


def test_monotone_transform_invariance():
    rng = np.random.default_rng(3)
    p, held, train = random_micro(rng)
    q = p.copy()
    q.output_weights = q.output_weights * 3.0
    assert evaluate(p, held, train).to_json() == evaluate(q, held, train).to_json()


def test_monotone_in_k():
    rng = np.random.default_rng(8)
    for _ in range(10):
        p, held, train = random_micro(rng)
        res = evaluate(p, held, train, ks=range(1, 11))
        rs = [res.recall[k] for k in res.ks]
        assert all(a <= b + 1e-12 for a, b in zip(rs, rs[1:]))


def test_eval_result_json_roundtrip():
    r = EvalResult((10, 20), {10: 0.25, 20: 0.5}, {10: 0.1, 20: 0.2}, 7)
    back = EvalResult.from_json(r.to_json())
    assert back == r
    assert "Recall@20=0.50000" in r.describe()


def test_deterministic():
    rng = np.random.default_rng(1)
    p, held, train = random_micro(rng)
    assert evaluate(p, held, train) == evaluate(p, held, train)


def test_item_space_mismatch():
    with pytest.raises(ValueError):
        evaluate(init_params(2, 4, 2, 0), make_set([(0, 0)], 2, 3), make_set([], 2, 3))


def test_exhaustive_tie_orders():
    # all score vectors over 4 items with values in {0, 1}: ranking follows (-score, index)
    for scores in itertools.product([0.0, 1.0], repeat=4):
        expect = sorted(range(4), key=lambda i: (-scores[i], i))
        assert _top_k(np.array(scores), set(), 4) == expect
