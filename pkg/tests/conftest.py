from pathlib import Path

import numpy as np
import pytest

from ruledenoise.agent import SplitData
from ruledenoise.dataset import InteractionSet, block_fixture, inject_noise, split
from ruledenoise.model import GmfParams
from ruledenoise.prompts import format_planning
from ruledenoise.memory import ActionKind

DATA = Path(__file__).parent / "data"
BUNDLED = Path(__file__).parent.parent / "src" / "ruledenoise" / "data"


def make_set(pairs, num_users=None, num_items=None) -> InteractionSet:
    pairs = list(pairs)
    users = np.array([u for u, _ in pairs], dtype=np.int64)
    items = np.array([i for _, i in pairs], dtype=np.int64)
    nu = num_users if num_users is not None else (int(users.max()) + 1 if len(pairs) else 1)
    ni = num_items if num_items is not None else (int(items.max()) + 1 if len(pairs) else 1)
    return InteractionSet(users, items, [f"u{k}" for k in range(nu)], [f"i{k}" for k in range(ni)])


def make_split(num_users=20, num_items=80, blocks=4, per_user=14, rate=0.2, seed=0) -> SplitData:
    full = block_fixture(num_users, num_items, blocks, per_user, 0.0, seed=seed)
    train, valid, test = split(full, seed)
    held = train.with_pairs(np.concatenate([valid.users, test.users]),
                            np.concatenate([valid.items, test.items]))
    noisy, ledger = inject_noise(train, rate, seed, exclude=held)
    return SplitData(noisy, valid, test, ledger)


def plan(*letters, reason="scripted step"):
    return [format_planning(ActionKind.from_letter(x), reason) for x in letters]


def params_from(user, item, head=None) -> GmfParams:
    user = np.asarray(user, dtype=float)
    item = np.asarray(item, dtype=float)
    head = np.ones(user.shape[1]) if head is None else np.asarray(head, dtype=float)
    return GmfParams(user, item, head, 0)


@pytest.fixture
def small_split():
    return make_split()


@pytest.fixture
def appendix_text():
    return (DATA / "appendix_rules.txt").read_text(encoding="utf-8")


def pytest_terminal_summary(terminalreporter):
    lines = []
    for key in ("passed", "failed"):
        for rep in terminalreporter.stats.get(key, []):
            if rep.when == "call":
                lines += [v for k, v in getattr(rep, "user_properties", []) if k == "acceptance"]
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(lines, key=lambda s: int(s.split("criterion ")[1].split(":")[0])):
            terminalreporter.write_line(line)
