"""Interaction data: ingestion, dense subsets, splitting, noise injection."""
from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import CapacityError, DatasetError, DatasetParseError, EmptyDatasetError

log = logging.getLogger(__name__)


@dataclass
class InteractionSet:
    """Observed (user, item) positives over a dense id space.

    Splits and noisy variants of one dataset share ``user_ids``/``item_ids``
    so their dense indices are directly comparable.
    """

    users: np.ndarray
    items: np.ndarray
    user_ids: list[str]
    item_ids: list[str]
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.users = np.asarray(self.users, dtype=np.int64)
        self.items = np.asarray(self.items, dtype=np.int64)
        if self.users.shape != self.items.shape:
            raise DatasetError("users and items must have the same length")
        if len(self.users):
            if self.users.min() < 0 or self.users.max() >= len(self.user_ids):
                raise DatasetError("user index out of range")
            if self.items.min() < 0 or self.items.max() >= len(self.item_ids):
                raise DatasetError("item index out of range")

    @property
    def num_users(self) -> int:
        return len(self.user_ids)

    @property
    def num_items(self) -> int:
        return len(self.item_ids)

    def __len__(self) -> int:
        return len(self.users)

    def pairs(self) -> list[tuple[int, int]]:
        return list(zip(self.users.tolist(), self.items.tolist()))

    def pair_keys(self) -> np.ndarray:
        """Flat ``user * num_items + item`` keys, one per interaction."""
        return self.users * self.num_items + self.items

    def user_items(self) -> list[set[int]]:
        out: list[set[int]] = [set() for _ in range(self.num_users)]
        for u, i in zip(self.users.tolist(), self.items.tolist()):
            out[u].add(i)
        return out

    def subset(self, mask_or_index, **meta) -> "InteractionSet":
        return InteractionSet(
            self.users[mask_or_index],
            self.items[mask_or_index],
            self.user_ids,
            self.item_ids,
            {**self.meta, **meta},
        )

    def with_pairs(self, users, items, **meta) -> "InteractionSet":
        return InteractionSet(users, items, self.user_ids, self.item_ids, {**self.meta, **meta})

    def same_space(self, other: "InteractionSet") -> bool:
        return self.user_ids == other.user_ids and self.item_ids == other.item_ids

    def __eq__(self, other):
        if not isinstance(other, InteractionSet):
            return NotImplemented
        return (
            np.array_equal(self.users, other.users)
            and np.array_equal(self.items, other.items)
            and self.user_ids == other.user_ids
            and self.item_ids == other.item_ids
        )


@dataclass
class NoiseLedger:
    users: np.ndarray
    items: np.ndarray
    rate: float
    seed: int

    def pairs(self) -> set[tuple[int, int]]:
        return set(zip(self.users.tolist(), self.items.tolist()))

    def __len__(self):
        return len(self.users)

    def to_json(self) -> dict:
        return {
            "rate": self.rate,
            "seed": self.seed,
            "injected": [[u, i] for u, i in zip(self.users.tolist(), self.items.tolist())],
        }

    @classmethod
    def from_json(cls, obj: dict) -> "NoiseLedger":
        pairs = np.asarray(obj["injected"], dtype=np.int64).reshape(-1, 2)
        return cls(pairs[:, 0], pairs[:, 1], float(obj["rate"]), int(obj["seed"]))


def load_interactions(path) -> InteractionSet:
    """Read a ``user<TAB>item`` file. Dense ids follow first appearance."""
    path = Path(path)
    user_index: dict[str, int] = {}
    item_index: dict[str, int] = {}
    seen: set[tuple[int, int]] = set()
    users, items = [], []
    duplicates = 0
    with path.open(encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.rstrip("\r\n")
            if not line.strip():
                continue
            parts = line.split("\t")
            if len(parts) != 2 or not parts[0].strip() or not parts[1].strip():
                raise DatasetParseError(path, lineno, f"expected '<user>\\t<item>', got {line!r}")
            u_ext, i_ext = parts[0].strip(), parts[1].strip()
            u = user_index.setdefault(u_ext, len(user_index))
            i = item_index.setdefault(i_ext, len(item_index))
            if (u, i) in seen:
                duplicates += 1
                continue
            seen.add((u, i))
            users.append(u)
            items.append(i)
    if not users:
        raise EmptyDatasetError(f"{path}: no interactions")
    if duplicates:
        log.info("%s: dropped %d duplicate interactions", path, duplicates)
    return InteractionSet(
        np.array(users), np.array(items), list(user_index), list(item_index),
        {"source": str(path), "duplicates": duplicates},
    )


def _reindex(users: np.ndarray, items: np.ndarray, user_ids, item_ids, meta) -> InteractionSet:
    # dense ids in first-appearance order of the kept interactions
    u_keep = list(dict.fromkeys(users.tolist()))
    i_keep = list(dict.fromkeys(items.tolist()))
    u_map = {old: new for new, old in enumerate(u_keep)}
    i_map = {old: new for new, old in enumerate(i_keep)}
    return InteractionSet(
        np.array([u_map[u] for u in users.tolist()], dtype=np.int64),
        np.array([i_map[i] for i in items.tolist()], dtype=np.int64),
        [user_ids[u] for u in u_keep],
        [item_ids[i] for i in i_keep],
        meta,
    )


def densify_top_users(data: InteractionSet, n: int) -> InteractionSet:
    """Keep the ``n`` most active users (ties to the smaller dense id)."""
    if n <= 0:
        raise DatasetError("n must be positive")
    if n > data.num_users:
        raise DatasetError(f"n={n} exceeds the number of users ({data.num_users})")
    counts = np.bincount(data.users, minlength=data.num_users)
    order = np.lexsort((np.arange(data.num_users), -counts))
    keep = np.zeros(data.num_users, dtype=bool)
    keep[order[:n]] = True
    mask = keep[data.users]
    return _reindex(
        data.users[mask], data.items[mask], data.user_ids, data.item_ids,
        {**data.meta, "top_users": n},
    )


def split(data: InteractionSet, seed: int) -> tuple[InteractionSet, InteractionSet, InteractionSet]:
    """Per-user 7:1:2 split.

    Each user's interactions are shuffled with a seeded generator, then the
    first ``floor(0.2 k)`` go to test, the next ``floor(0.1 k)`` to
    validation and the remainder to train. Parts keep the input order.
    """
    counts = np.bincount(data.users, minlength=data.num_users)
    if len(data) and (counts == 0).any():
        log.debug("%d users without interactions are ignored by split", int((counts == 0).sum()))
    rng = np.random.default_rng(seed)
    part = np.zeros(len(data), dtype=np.int8)  # 0 train, 1 valid, 2 test
    by_user: list[list[int]] = [[] for _ in range(data.num_users)]
    for idx, u in enumerate(data.users.tolist()):
        by_user[u].append(idx)
    for rows in by_user:
        k = len(rows)
        if k == 0:
            continue
        perm = rng.permutation(k)
        n_test = math.floor(0.2 * k)
        n_valid = math.floor(0.1 * k)
        rows = np.asarray(rows)[perm]
        part[rows[:n_test]] = 2
        part[rows[n_test:n_test + n_valid]] = 1
    meta = {"split_seed": seed}
    return (
        data.subset(part == 0, part="train", **meta),
        data.subset(part == 1, part="valid", **meta),
        data.subset(part == 2, part="test", **meta),
    )


def inject_noise(
    train: InteractionSet, rate: float, seed: int, exclude: InteractionSet | None = None
) -> tuple[InteractionSet, NoiseLedger]:
    """Add ``round(rate * |train|)`` uniformly drawn unobserved pairs as positives.

    ``exclude`` optionally names further pairs (e.g. held-out positives) that
    must not be drawn.
    """
    if not 0.0 <= rate <= 1.0:
        raise DatasetError(f"rate must lie in [0, 1], got {rate}")
    n_noise = int(math.floor(rate * len(train) + 0.5))
    observed = set(train.pair_keys().tolist())
    if exclude is not None:
        if not exclude.same_space(train):
            raise DatasetError("exclude set uses a different id space")
        observed.update(exclude.pair_keys().tolist())
    total = train.num_users * train.num_items
    if n_noise > total - len(observed):
        raise CapacityError(
            f"cannot inject {n_noise} pairs: only {total - len(observed)} unobserved pairs exist"
        )
    rng = np.random.default_rng(seed)
    if n_noise:
        candidates = np.setdiff1d(np.arange(total, dtype=np.int64), np.fromiter(observed, np.int64))
        chosen = rng.choice(candidates, size=n_noise, replace=False)
    else:
        chosen = np.zeros(0, dtype=np.int64)
    nu, ni = chosen // train.num_items, chosen % train.num_items
    ledger = NoiseLedger(nu, ni, float(rate), int(seed))
    noisy = train.with_pairs(
        np.concatenate([train.users, nu]), np.concatenate([train.items, ni]),
        noise_rate=rate, noise_seed=seed,
    )
    return noisy, ledger


def sample_interactions(data: InteractionSet, n: int, seed) -> list[tuple[int, int]]:
    """Draw ``min(n, |data|)`` distinct interactions uniformly, seeded."""
    if n < 1:
        raise DatasetError("n must be at least 1")
    rng = np.random.default_rng(seed)
    idx = rng.permutation(len(data))[: min(n, len(data))]
    return list(zip(data.users[idx].tolist(), data.items[idx].tolist()))


def save_interactions(data: InteractionSet, path) -> None:
    """Write the TSV of external ids plus a ``.json`` sidecar with id maps."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", encoding="utf-8") as fh:
        for u, i in zip(data.users.tolist(), data.items.tolist()):
            fh.write(f"{data.user_ids[u]}\t{data.item_ids[i]}\n")
    sidecar = {"user_ids": data.user_ids, "item_ids": data.item_ids, "meta": data.meta}
    path.with_suffix(path.suffix + ".json").write_text(json.dumps(sidecar, indent=1, sort_keys=True))


def load_saved(path) -> InteractionSet:
    """Load a set written by :func:`save_interactions`, keeping its id space."""
    path = Path(path)
    sidecar_path = path.with_suffix(path.suffix + ".json")
    if not sidecar_path.exists():
        return load_interactions(path)
    sidecar = json.loads(sidecar_path.read_text())
    u_map = {u: k for k, u in enumerate(sidecar["user_ids"])}
    i_map = {i: k for k, i in enumerate(sidecar["item_ids"])}
    users, items = [], []
    with path.open(encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.rstrip("\r\n")
            if not line.strip():
                continue
            parts = line.split("\t")
            if len(parts) != 2 or parts[0] not in u_map or parts[1] not in i_map:
                raise DatasetParseError(path, lineno, f"unknown or malformed pair {line!r}")
            users.append(u_map[parts[0]])
            items.append(i_map[parts[1]])
    return InteractionSet(
        np.array(users, dtype=np.int64), np.array(items, dtype=np.int64),
        sidecar["user_ids"], sidecar["item_ids"], sidecar.get("meta", {}),
    )


def block_fixture(
    num_users: int = 50,
    num_items: int = 200,
    num_blocks: int = 5,
    per_user: int = 20,
    off_block: float = 0.0,
    seed: int = 0,
) -> InteractionSet:
    """Synthetic data with planted community structure.

    Users and items are split into ``num_blocks`` equal groups; each user
    draws ``per_user`` items, a fraction ``off_block`` of them from outside
    its own group.
    """
    rng = np.random.default_rng(seed)
    user_block = np.arange(num_users) % num_blocks
    item_block = np.arange(num_items) % num_blocks
    users, items = [], []
    for u in range(num_users):
        own = np.flatnonzero(item_block == user_block[u])
        other = np.flatnonzero(item_block != user_block[u])
        n_off = int(round(off_block * per_user))
        picks = np.concatenate([
            rng.choice(own, size=min(per_user - n_off, len(own)), replace=False),
            rng.choice(other, size=n_off, replace=False),
        ])
        users.extend([u] * len(picks))
        items.extend(picks.tolist())
    return InteractionSet(
        np.array(users), np.array(items),
        [f"u{u}" for u in range(num_users)], [f"i{i}" for i in range(num_items)],
        {"source": "block_fixture", "seed": seed},
    )
