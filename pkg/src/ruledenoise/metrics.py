"""Full-catalog top-K ranking with Recall@K and NDCG@K."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .dataset import InteractionSet
from .errors import EmptyEvaluationError
from .model import GmfParams

DEFAULT_KS = (10, 20)


@dataclass
class EvalResult:
    ks: tuple[int, ...]
    recall: dict[int, float]
    ndcg: dict[int, float]
    num_users: int

    def to_json(self) -> dict:
        out = {}
        for k in self.ks:
            out[f"recall@{k}"] = self.recall[k]
            out[f"ndcg@{k}"] = self.ndcg[k]
        out["users"] = self.num_users
        return out

    @classmethod
    def from_json(cls, obj: dict) -> "EvalResult":
        ks = tuple(sorted(int(key.split("@")[1]) for key in obj if key.startswith("recall@")))
        return cls(
            ks,
            {k: float(obj[f"recall@{k}"]) for k in ks},
            {k: float(obj[f"ndcg@{k}"]) for k in ks},
            int(obj["users"]),
        )

    def describe(self) -> str:
        return ", ".join(
            f"Recall@{k}={self.recall[k]:.5f}, NDCG@{k}={self.ndcg[k]:.5f}" for k in self.ks
        )


def _top_k(scores: np.ndarray, exclude, k: int) -> list[int]:
    scores = np.array(scores, dtype=float)
    if exclude:
        scores[list(exclude)] = -np.inf
    # stable sort keeps smaller item index first among equal scores
    order = np.argsort(-scores, kind="stable")
    n_candidates = len(scores) - len(set(exclude or ()))
    return order[: min(k, n_candidates)].tolist()


def rank_items(params: GmfParams, u: int, exclude, k: int) -> list[int]:
    if k < 1:
        raise ValueError("k must be >= 1")
    scores = (params.user_embeddings[u] * params.output_weights) @ params.item_embeddings.T
    return _top_k(scores, exclude, k)


def recall_at_k(ranked, relevant, k: int) -> float:
    relevant = set(relevant)
    if not relevant:
        raise ValueError("relevant set is empty")
    return len(set(ranked[:k]) & relevant) / len(relevant)


def ndcg_at_k(ranked, relevant, k: int) -> float:
    relevant = set(relevant)
    if not relevant:
        raise ValueError("relevant set is empty")
    dcg = sum(1.0 / math.log2(r + 2) for r, item in enumerate(ranked[:k]) if item in relevant)
    idcg = sum(1.0 / math.log2(r + 2) for r in range(min(k, len(relevant))))
    return dcg / idcg


def evaluate(params: GmfParams, heldout: InteractionSet, train: InteractionSet, ks=DEFAULT_KS) -> EvalResult:
    """Mean Recall/NDCG over users with at least one held-out item."""
    ks = tuple(sorted(set(int(k) for k in ks)))
    if not ks or ks[0] < 1:
        raise ValueError("Ks must be positive")
    if heldout.num_items != params.num_items or train.num_items != params.num_items:
        raise ValueError("held-out, train and parameters must share the item space")
    relevant = heldout.user_items()
    seen = train.user_items()
    users = [u for u in range(heldout.num_users) if relevant[u]]
    if not users:
        raise EmptyEvaluationError("no user has held-out items")
    scores = params.score_matrix()
    recall = {k: 0.0 for k in ks}
    ndcg = {k: 0.0 for k in ks}
    for u in users:
        ranked = _top_k(scores[u], seen[u], ks[-1])
        for k in ks:
            recall[k] += recall_at_k(ranked, relevant[u], k)
            ndcg[k] += ndcg_at_k(ranked, relevant[u], k)
    n = len(users)
    return EvalResult(ks, {k: recall[k] / n for k in ks}, {k: ndcg[k] / n for k in ks}, n)
