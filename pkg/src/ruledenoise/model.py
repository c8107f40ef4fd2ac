"""GMF scoring, BPR / LossEraser objectives, analytic gradients and Adam."""
from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import NumericError

FORMAT_VERSION = 1


@dataclass
class GmfParams:
    user_embeddings: np.ndarray
    item_embeddings: np.ndarray
    output_weights: np.ndarray
    seed: int | None = None

    @property
    def dim(self) -> int:
        return self.output_weights.shape[0]

    @property
    def num_users(self) -> int:
        return self.user_embeddings.shape[0]

    @property
    def num_items(self) -> int:
        return self.item_embeddings.shape[0]

    def copy(self) -> "GmfParams":
        return GmfParams(
            self.user_embeddings.copy(), self.item_embeddings.copy(),
            self.output_weights.copy(), self.seed,
        )

    def arrays(self) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        return self.user_embeddings, self.item_embeddings, self.output_weights

    def score_matrix(self) -> np.ndarray:
        """All user-item scores, shape (num_users, num_items)."""
        return (self.user_embeddings * self.output_weights) @ self.item_embeddings.T

    def __eq__(self, other):
        if not isinstance(other, GmfParams):
            return NotImplemented
        return all(np.array_equal(a, b) for a, b in zip(self.arrays(), other.arrays()))


def xavier_bound(dim: int) -> float:
    return float(np.sqrt(6.0 / (dim + dim)))


def init_params(num_users: int, num_items: int, dim: int, seed: int) -> GmfParams:
    """Xavier-uniform embeddings (fan_in = fan_out = dim), all-ones head."""
    if dim < 1:
        raise ValueError("dim must be >= 1")
    rng = np.random.default_rng(seed)
    b = xavier_bound(dim)
    return GmfParams(
        rng.uniform(-b, b, size=(num_users, dim)),
        rng.uniform(-b, b, size=(num_items, dim)),
        np.ones(dim),
        seed,
    )


def _check_index(n: int, idx, what: str):
    idx = np.asarray(idx)
    if idx.size and (idx.min() < 0 or idx.max() >= n):
        raise IndexError(f"{what} index out of range")


def score(params: GmfParams, u, i):
    """sum_k h_k * z_u[k] * z_i[k]; vectorised over index arrays."""
    _check_index(params.num_users, u, "user")
    _check_index(params.num_items, i, "item")
    out = np.sum(params.output_weights * params.user_embeddings[u] * params.item_embeddings[i], axis=-1)
    return float(out) if np.ndim(out) == 0 else out


def log_sigmoid(x):
    # log sigma(x) = -log1p(exp(-|x|)) + min(x, 0), finite for any |x|
    x = np.asarray(x, dtype=float)
    out = -np.log1p(np.exp(-np.abs(x))) + np.minimum(x, 0.0)
    return float(out) if out.ndim == 0 else out


def sigmoid(x):
    x = np.asarray(x, dtype=float)
    e = np.exp(-np.abs(x))
    out = np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e))
    return float(out) if out.ndim == 0 else out


def bpr_loss(params: GmfParams, u, i, j):
    """-log sigma(f(u,i) - f(u,j))."""
    return -log_sigmoid(score(params, u, i) - score(params, u, j))


def _check_unit(name, value):
    v = np.asarray(value)
    if not np.all((v >= 0.0) & (v <= 1.0)):
        raise ValueError(f"{name} must lie in [0, 1], got {value}")


def eraser_term(params: GmfParams, u, i, n, alpha_t, w):
    """-log sigma(f(u,i) - alpha_t * w * f(u,n)) for a noisy positive n."""
    _check_unit("alpha_t", alpha_t)
    _check_unit("w", w)
    return -log_sigmoid(score(params, u, i) - alpha_t * np.asarray(w) * score(params, u, n))


@dataclass
class Gradient:
    """Dense gradient with the same layout as :class:`GmfParams`."""

    user: np.ndarray
    item: np.ndarray
    head: np.ndarray

    @classmethod
    def zeros_like(cls, params: GmfParams) -> "Gradient":
        return cls(
            np.zeros_like(params.user_embeddings),
            np.zeros_like(params.item_embeddings),
            np.zeros_like(params.output_weights),
        )

    def arrays(self):
        return self.user, self.item, self.head


def _accumulate_pairwise(params, grad, u, a, b, coef, weight):
    """Add weight * d/dθ[-log σ(f(u,a) - coef·f(u,b))] into ``grad``.

    Returns the per-row loss values. ``coef`` and ``weight`` broadcast over
    rows.
    """
    zu = params.user_embeddings[u]
    za = params.item_embeddings[a]
    zb = params.item_embeddings[b]
    h = params.output_weights
    coef = np.broadcast_to(np.asarray(coef, dtype=float), u.shape)[:, None]
    diff = za - coef * zb
    delta = np.sum(h * zu * diff, axis=1)
    # d(-log σ(Δ))/dΔ = -σ(-Δ)
    g = (-sigmoid(-delta) * weight)[:, None]
    np.add.at(grad.user, u, g * h * diff)
    np.add.at(grad.item, a, g * h * zu)
    np.add.at(grad.item, b, -g * coef * h * zu)
    grad.head += np.sum(g * zu * diff, axis=0)
    return -log_sigmoid(delta)


def batch_objective(params, clean, eraser=None, alpha=0.0, alpha_t=1.0):
    """Mean BPR over ``clean`` plus ``alpha`` times mean eraser loss, with gradient.

    ``clean`` is a tuple of index arrays (u, i, j); ``eraser`` is
    (u, i, n, w) or None. Returns (loss, Gradient).
    """
    grad = Gradient.zeros_like(params)
    u, i, j = (np.asarray(x, dtype=np.int64) for x in clean)
    loss = 0.0
    if len(u):
        loss += float(np.mean(_accumulate_pairwise(params, grad, u, i, j, 1.0, 1.0 / len(u))))
    if eraser is not None and alpha != 0.0:
        eu, ei, en, w = eraser
        eu, ei, en = (np.asarray(x, dtype=np.int64) for x in (eu, ei, en))
        if len(eu):
            w = np.asarray(w, dtype=float)
            _check_unit("alpha_t", alpha_t)
            _check_unit("w", w)
            vals = _accumulate_pairwise(params, grad, eu, ei, en, alpha_t * w, alpha / len(eu))
            loss += alpha * float(np.mean(vals))
    return loss, grad


def grad_combined(params, clean_triple, eraser_triple=None, alpha=0.0, alpha_t=1.0, w=1.0) -> Gradient:
    """Gradient of L_rec + alpha * L_eraser for one clean and one eraser triple."""
    u, i, j = clean_triple
    clean = (np.array([u]), np.array([i]), np.array([j]))
    eraser = None
    if eraser_triple is not None:
        eu, ei, en = eraser_triple
        eraser = (np.array([eu]), np.array([ei]), np.array([en]), np.array([w]))
    return batch_objective(params, clean, eraser, alpha, alpha_t)[1]


def combined_loss(params, clean_triple, eraser_triple=None, alpha=0.0, alpha_t=1.0, w=1.0) -> float:
    u, i, j = clean_triple
    total = bpr_loss(params, u, i, j)
    if eraser_triple is not None:
        eu, ei, en = eraser_triple
        total += alpha * eraser_term(params, eu, ei, en, alpha_t, w)
    return float(total)


@dataclass
class AdamState:
    m: tuple
    v: tuple
    step: int = 0
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def for_params(cls, params: GmfParams, lr: float = 1e-3) -> "AdamState":
        return cls(
            tuple(np.zeros_like(a) for a in params.arrays()),
            tuple(np.zeros_like(a) for a in params.arrays()),
            0, lr,
        )

    def copy(self) -> "AdamState":
        return AdamState(
            tuple(a.copy() for a in self.m), tuple(a.copy() for a in self.v),
            self.step, self.lr, self.beta1, self.beta2, self.eps,
        )


def adam_step(params: GmfParams, state: AdamState, grad: Gradient) -> tuple[GmfParams, AdamState]:
    """One bias-corrected Adam update. Returns new objects; inputs are untouched."""
    arrays = grad.arrays()
    for p, g in zip(params.arrays(), arrays):
        if p.shape != g.shape:
            raise ValueError(f"gradient shape {g.shape} does not match parameter shape {p.shape}")
        if not np.all(np.isfinite(g)):
            raise NumericError("non-finite gradient")
    t = state.step + 1
    b1, b2 = state.beta1, state.beta2
    new_m, new_v, new_p = [], [], []
    for p, g, m, v in zip(params.arrays(), arrays, state.m, state.v):
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        m_hat = m / (1 - b1**t)
        v_hat = v / (1 - b2**t)
        new_p.append(p - state.lr * m_hat / (np.sqrt(v_hat) + state.eps))
        new_m.append(m)
        new_v.append(v)
    return (
        GmfParams(*new_p, seed=params.seed),
        AdamState(tuple(new_m), tuple(new_v), t, state.lr, b1, b2, state.eps),
    )


def save_params(params: GmfParams, path) -> None:
    """Write an ``.npz`` dump; the ``header`` entry holds dims, seed and format version."""
    header = {
        "format_version": FORMAT_VERSION,
        "num_users": params.num_users,
        "num_items": params.num_items,
        "dim": params.dim,
        "seed": params.seed,
    }
    with open(path, "wb") as fh:
        np.savez(
            fh,
            header=np.array(json.dumps(header, sort_keys=True)),
            user_embeddings=params.user_embeddings,
            item_embeddings=params.item_embeddings,
            output_weights=params.output_weights,
        )


def load_params(path) -> GmfParams:
    with np.load(Path(path)) as data:
        header = json.loads(str(data["header"]))
        if header.get("format_version") != FORMAT_VERSION:
            raise ValueError(f"unsupported parameter format {header.get('format_version')}")
        params = GmfParams(
            data["user_embeddings"].copy(), data["item_embeddings"].copy(),
            data["output_weights"].copy(), header.get("seed"),
        )
    if (params.num_users, params.num_items, params.dim) != (
        header["num_users"], header["num_items"], header["dim"]
    ):
        raise ValueError("parameter header does not match array shapes")
    return params
