"""BPR training, per-interaction loss traces and LossEraser unlearning cycles."""
from __future__ import annotations

import io
import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field

import numpy as np

from .dataset import InteractionSet
from .errors import DatasetError
from .model import AdamState, GmfParams, adam_step, batch_objective, init_params, log_sigmoid

log = logging.getLogger(__name__)

# stream tags mixed into seeds so independent draws never share a generator
_EVAL_NEG_STREAM = 7919
_ERASER_STREAM = 1


@dataclass
class TrainConfig:
    epochs: int = 100
    batch_size: int = 512
    learning_rate: float = 1e-3
    alpha: float = 0.01
    negatives_per_positive: int = 1
    seed: int = 0
    trace_every: int = 1
    dim: int = 64

    def __post_init__(self):
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.alpha < 0:
            raise ValueError("alpha must be >= 0")
        if self.negatives_per_positive < 1:
            raise ValueError("negatives_per_positive must be >= 1")
        if self.trace_every < 1:
            raise ValueError("trace_every must be >= 1")
        if self.alpha and not 0.01 <= self.alpha <= 0.1:
            log.warning("alpha=%g lies outside the recommended [0.01, 0.1] range", self.alpha)


@dataclass
class EpochReport:
    epoch: int
    mean_loss: float
    wall_time: float
    phase: str = "bpr"


@dataclass
class LossTrace:
    """Recorded BPR losses: ``values[k, e]`` is interaction k at ``epochs[e]``."""

    users: np.ndarray
    items: np.ndarray
    epochs: list[int] = field(default_factory=list)
    values: np.ndarray | None = None

    def __post_init__(self):
        if self.values is None:
            self.values = np.zeros((len(self.users), 0))

    def __len__(self):
        return len(self.users)

    @property
    def num_records(self) -> int:
        return len(self.epochs)

    def append(self, epoch: int, column: np.ndarray) -> None:
        if self.epochs and epoch <= self.epochs[-1]:
            raise ValueError("trace epochs must be strictly increasing")
        column = np.asarray(column, dtype=float)
        if column.shape != (len(self.users),):
            raise ValueError("trace column has the wrong length")
        self.epochs.append(int(epoch))
        self.values = np.column_stack([self.values, column])

    def latest(self) -> np.ndarray:
        if not self.epochs:
            raise ValueError("trace is empty")
        return self.values[:, -1].copy()

    def row(self, k: int) -> np.ndarray:
        return self.values[k].copy()

    def index_of(self) -> dict[tuple[int, int], int]:
        return {p: k for k, p in enumerate(zip(self.users.tolist(), self.items.tolist()))}

    def copy(self) -> "LossTrace":
        return LossTrace(self.users.copy(), self.items.copy(), list(self.epochs), self.values.copy())

    def __eq__(self, other):
        if not isinstance(other, LossTrace):
            return NotImplemented
        return (
            np.array_equal(self.users, other.users)
            and np.array_equal(self.items, other.items)
            and self.epochs == other.epochs
            and np.array_equal(self.values, other.values)
        )

    def save(self, path) -> None:
        """Columnar dump: one row per (interaction index, epoch, loss)."""
        n, e = self.values.shape
        with open(path, "wb") as fh:
            np.savez(
                fh,
                interaction=np.repeat(np.arange(n), e),
                epoch=np.tile(np.asarray(self.epochs, dtype=np.int64), n),
                loss=self.values.reshape(-1),
                users=self.users,
                items=self.items,
            )

    @classmethod
    def load(cls, path) -> "LossTrace":
        with open(path, "rb") as fh:
            data = np.load(io.BytesIO(fh.read()))
        users, items = data["users"], data["items"]
        n = len(users)
        epochs = sorted(set(data["epoch"].tolist()))
        values = np.zeros((n, len(epochs)))
        col = {ep: c for c, ep in enumerate(epochs)}
        values[data["interaction"], [col[e] for e in data["epoch"].tolist()]] = data["loss"]
        return cls(users, items, epochs, values)


def alpha_schedule(t: int, total: int) -> float:
    """Progressive reversal factor t / T for eraser epoch t in 1..T."""
    if not 1 <= t <= total:
        raise ValueError(f"epoch {t} outside 1..{total}")
    return t / total


class _NegativeSampler:
    def __init__(self, observed: InteractionSet):
        self.num_items = observed.num_items
        self.keys = np.unique(observed.pair_keys())
        counts = np.bincount(observed.users, minlength=observed.num_users)
        full = np.flatnonzero(counts >= observed.num_items)
        if len(full):
            raise DatasetError(f"users {full.tolist()[:5]} have no unobserved items to sample")

    def observed(self, users, items) -> np.ndarray:
        keys = users * self.num_items + items
        pos = np.searchsorted(self.keys, keys)
        pos = np.minimum(pos, len(self.keys) - 1)
        return self.keys[pos] == keys

    def sample(self, users: np.ndarray, rng: np.random.Generator) -> np.ndarray:
        out = rng.integers(0, self.num_items, size=len(users))
        bad = self.observed(users, out)
        while bad.any():
            out[bad] = rng.integers(0, self.num_items, size=int(bad.sum()))
            bad[bad] = self.observed(users[bad], out[bad])
        return out


def eval_negatives(data: InteractionSet, seed: int) -> np.ndarray:
    """One fixed unobserved item per interaction, used for every recorded loss."""
    rng = np.random.default_rng([seed, _EVAL_NEG_STREAM])
    return _NegativeSampler(data).sample(data.users, rng)


def _losses(params: GmfParams, users, items, negatives) -> np.ndarray:
    zu = params.user_embeddings[users] * params.output_weights
    delta = np.sum(zu * (params.item_embeddings[items] - params.item_embeddings[negatives]), axis=1)
    return -log_sigmoid(delta)


def record_losses(params: GmfParams, data: InteractionSet, seed: int) -> np.ndarray:
    return _losses(params, data.users, data.items, eval_negatives(data, seed))


class TrainingSession:
    """Owns parameters, optimizer state and the loss trace of one run.

    ``reference`` is the full (pre-filter) interaction set: traces are
    always recorded over it, and negatives are never drawn from it.
    """

    def __init__(self, params: GmfParams, reference: InteractionSet, cfg: TrainConfig,
                 adam: AdamState | None = None):
        self.params = params
        self.reference = reference
        self.cfg = cfg
        self.adam = adam or AdamState.for_params(params, cfg.learning_rate)
        self.epoch = 0
        self.trace = LossTrace(reference.users.copy(), reference.items.copy())
        self._eval_neg = eval_negatives(reference, cfg.seed)
        self._sampler = _NegativeSampler(reference)
        self.reports: list[EpochReport] = []

    @classmethod
    def fresh(cls, train: InteractionSet, cfg: TrainConfig) -> "TrainingSession":
        return cls(init_params(train.num_users, train.num_items, cfg.dim, cfg.seed), train, cfg)

    def record(self) -> np.ndarray:
        values = _losses(self.params, self.reference.users, self.reference.items, self._eval_neg)
        self.trace.append(self.epoch, values)
        return values

    def _should_record(self, t: int, total: int) -> bool:
        return t % self.cfg.trace_every == 0 or t == total

    def _eraser_pairs(self, clean_items, noisy, rng):
        eu, ei, en, ew = [], [], [], []
        for u, n, w in noisy:
            pool = clean_items[u]
            if not pool:
                pool = sorted(self._ref_items[u] - {n}) or [n]
                log.debug("user %d has no clean positives; eraser anchor drawn from all positives", u)
            eu.append(u)
            ei.append(pool[rng.integers(len(pool))])
            en.append(n)
            ew.append(w)
        return (np.array(eu, dtype=np.int64), np.array(ei, dtype=np.int64),
                np.array(en, dtype=np.int64), np.array(ew, dtype=float))

    def _run_epochs(self, clean: InteractionSet, epochs: int, noisy=(), alpha=0.0, phase="bpr", on_epoch=None):
        cfg = self.cfg
        if len(clean) == 0:
            raise DatasetError("no clean interactions to train on")
        noisy = list(noisy)
        clean_items = None
        if noisy:
            clean_items = [[] for _ in range(clean.num_users)]
            for u, i in zip(clean.users.tolist(), clean.items.tolist()):
                clean_items[u].append(i)
            self._ref_items = self.reference.user_items()
        reports = []
        for t in range(1, epochs + 1):
            start = time.perf_counter()
            self.epoch += 1
            rng = np.random.default_rng([cfg.seed, self.epoch])
            pos = np.repeat(np.arange(len(clean)), cfg.negatives_per_positive)
            pos = pos[rng.permutation(len(pos))]
            users, items = clean.users[pos], clean.items[pos]
            negs = self._sampler.sample(users, rng)
            n_batches = math.ceil(len(pos) / cfg.batch_size)
            eraser_chunks = [None] * n_batches
            alpha_t = alpha_schedule(t, epochs)
            if noisy and alpha:
                erng = np.random.default_rng([cfg.seed, self.epoch, _ERASER_STREAM])
                eu, ei, en, ew = self._eraser_pairs(clean_items, noisy, erng)
                order = erng.permutation(len(eu))
                eraser_chunks = [
                    (eu[c], ei[c], en[c], ew[c]) for c in np.array_split(order, n_batches)
                ]
            total = 0.0
            for b in range(n_batches):
                sl = slice(b * cfg.batch_size, (b + 1) * cfg.batch_size)
                loss, grad = batch_objective(
                    self.params, (users[sl], items[sl], negs[sl]), eraser_chunks[b], alpha, alpha_t,
                )
                self.params, self.adam = adam_step(self.params, self.adam, grad)
                total += loss
            if self._should_record(t, epochs):
                self.record()
            reports.append(EpochReport(self.epoch, total / n_batches, time.perf_counter() - start, phase))
            if on_epoch is not None:
                on_epoch(self, reports[-1])  # outside the timed region
        self.reports.extend(reports)
        return reports

    def fit_bpr(self, train: InteractionSet | None = None, epochs: int | None = None, on_epoch=None):
        return self._run_epochs(train if train is not None else self.reference,
                                epochs or self.cfg.epochs, on_epoch=on_epoch)

    def fit_eraser(self, clean: InteractionSet, noisy, epochs: int, alpha: float | None = None,
                   on_epoch=None):
        alpha = self.cfg.alpha if alpha is None else alpha
        return self._run_epochs(clean, epochs, noisy, alpha, phase="eraser", on_epoch=on_epoch)


def train_bpr(params: GmfParams, train: InteractionSet, cfg: TrainConfig):
    """Full BPR training. Returns (params, trace, epoch reports)."""
    if len(train) == 0:
        raise DatasetError("training set is empty")
    session = TrainingSession(params, train, cfg)
    reports = session.fit_bpr()
    return session.params, session.trace, reports


def split_clean(reference: InteractionSet, noisy_pairs) -> InteractionSet:
    """Reference set minus the flagged pairs."""
    flagged = {(int(u), int(n)) for u, n, *_ in noisy_pairs}
    mask = np.array([p not in flagged for p in reference.pairs()], dtype=bool)
    return reference.subset(mask)


def train_loss_eraser(params: GmfParams, clean: InteractionSet, noisy, cfg: TrainConfig,
                      reference: InteractionSet | None = None, adam: AdamState | None = None):
    """LossEraser continuation from already trained ``params``.

    ``noisy`` holds (user, item, weight) triples; ``reference`` defaults to
    clean plus noisy pairs and is the set the returned trace covers.
    """
    noisy = [(int(u), int(n), float(w)) for u, n, w in noisy]
    if reference is None:
        reference = clean.with_pairs(
            np.concatenate([clean.users, np.array([u for u, _, _ in noisy], dtype=np.int64)]),
            np.concatenate([clean.items, np.array([n for _, n, _ in noisy], dtype=np.int64)]),
        )
    session = TrainingSession(params, reference, cfg, adam)
    reports = session.fit_eraser(clean, noisy, cfg.epochs)
    return session.params, session.trace, reports


def nearest_rank_threshold(values, percentile: float) -> float:
    """Value at rank ceil(p N) of the ascending sort."""
    values = np.asarray(values, dtype=float)
    if values.size == 0:
        raise ValueError("percentile of an empty vector")
    if not 0.0 < percentile < 1.0:
        raise ValueError(f"percentile must lie in (0, 1), got {percentile}")
    # guard against p*N landing a hair above an integer (e.g. 0.07 * 100)
    rank = max(1, math.ceil(percentile * values.size - 1e-9))
    return float(np.sort(values)[rank - 1])


def static_percentile_filter(trace_values, percentile: float) -> set[int]:
    """Indices whose value lies strictly above the nearest-rank percentile."""
    values = np.asarray(trace_values, dtype=float)
    tau = nearest_rank_threshold(values, percentile)
    return set(np.flatnonzero(values > tau).tolist())


def write_epoch_log(reports, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for r in reports:
            fh.write(json.dumps(asdict(r)) + "\n")
