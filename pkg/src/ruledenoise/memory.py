"""Confidence, rule and action memories with JSON-lines persistence."""
from __future__ import annotations

import enum
import json
from dataclasses import dataclass, field
from pathlib import Path

from .errors import MemoryLoadError
from .metrics import EvalResult
from .rules import RuleTree, initial_rule_tree, merge, parse_rule_text, serialize

NOISY_BELOW = 1.0


class ActionKind(enum.Enum):
    INITIALIZATION = "Initialization"
    CONFIDENCE_REFLECTION = "Confidence Reflection"
    RULE_REFLECTION = "Rule Reflection"
    LOSS_ERASER_TRAINING = "LossEraser Training"
    MODEL_EVALUATION = "Model Evaluation"

    @property
    def letter(self) -> str | None:
        return _LETTERS.get(self)

    @classmethod
    def from_letter(cls, letter: str) -> "ActionKind":
        try:
            return _FROM_LETTER[letter.strip().lower()]
        except KeyError:
            raise ValueError(f"unknown action letter {letter!r}") from None


_LETTERS = {
    ActionKind.CONFIDENCE_REFLECTION: "a",
    ActionKind.RULE_REFLECTION: "b",
    ActionKind.LOSS_ERASER_TRAINING: "c",
    ActionKind.MODEL_EVALUATION: "d",
}
_FROM_LETTER = {v: k for k, v in _LETTERS.items()}


@dataclass
class ConfidenceEntry:
    user: int
    item: int
    score: float
    reason: str
    revised_at: int = 0

    def __post_init__(self):
        check_score(self.score)

    def render(self) -> str:
        return (f"The noise confidence level for the interaction between user {self.user} and "
                f"item {self.item} is evaluated as {self.score:.4g}. The reason is {self.reason}")


def check_score(score) -> float:
    score = float(score)
    if not 0.0 <= score <= 2.0:
        raise ValueError(f"confidence score must lie in [0, 2], got {score}")
    return score


@dataclass
class ActionRecord:
    index: int
    kind: ActionKind
    reason: str
    eval_outcome: EvalResult | None = None

    def render(self) -> str:
        text = (f"The {_ordinal(self.index)} action is chosen as {self.kind.value}, "
                f"and the reason is {self.reason}")
        if self.eval_outcome is not None:
            text += f" Evaluation outcome on the validation set: {self.eval_outcome.describe()}."
        return text

    def to_json(self) -> dict:
        return {
            "index": self.index,
            "kind": self.kind.value,
            "reason": self.reason,
            "eval_outcome": self.eval_outcome.to_json() if self.eval_outcome else None,
        }

    @classmethod
    def from_json(cls, obj: dict) -> "ActionRecord":
        ev = obj.get("eval_outcome")
        return cls(int(obj["index"]), ActionKind(obj["kind"]), str(obj["reason"]),
                   EvalResult.from_json(ev) if ev else None)


def _ordinal(n: int) -> str:
    suffix = "th" if 10 <= n % 100 <= 20 else {1: "st", 2: "nd", 3: "rd"}.get(n % 10, "th")
    return f"{n}{suffix}"


class ConfidenceMemory:
    def __init__(self):
        self._entries: dict[tuple[int, int], ConfidenceEntry] = {}

    def __len__(self):
        return len(self._entries)

    def __iter__(self):
        return iter(self._entries.values())

    def __contains__(self, key):
        return key in self._entries

    def __eq__(self, other):
        if not isinstance(other, ConfidenceMemory):
            return NotImplemented
        return list(self._entries.items()) == list(other._entries.items())

    def get(self, user: int, item: int) -> ConfidenceEntry:
        return self._entries[(user, item)]

    def keys(self):
        return list(self._entries)

    def set(self, entry: ConfidenceEntry) -> "ConfidenceMemory":
        check_score(entry.score)
        self._entries[(entry.user, entry.item)] = entry
        return self

    def normalized(self) -> dict[tuple[int, int], float]:
        """Min-max scale every stored score to [0, 1]; 0.5 everywhere when flat."""
        if not self._entries:
            raise ValueError("confidence memory is empty")
        scores = [e.score for e in self._entries.values()]
        lo, hi = min(scores), max(scores)
        if hi == lo:
            return {k: 0.5 for k in self._entries}
        return {k: (e.score - lo) / (hi - lo) for k, e in self._entries.items()}

    def noisy_set(self) -> list[tuple[int, int, float]]:
        """Pairs scored below 1 with reversal weight w = 1 - c."""
        if not self._entries:
            return []
        c = self.normalized()
        return [
            (u, i, min(1.0, max(0.0, 1.0 - c[(u, i)])))
            for (u, i), e in self._entries.items() if e.score < NOISY_BELOW
        ]


class ActionMemory:
    def __init__(self):
        self.records: list[ActionRecord] = []

    def __len__(self):
        return len(self.records)

    def __iter__(self):
        return iter(self.records)

    def __eq__(self, other):
        if not isinstance(other, ActionMemory):
            return NotImplemented
        return self.records == other.records

    def append(self, kind: ActionKind, reason: str) -> ActionRecord:
        rec = ActionRecord(len(self.records) + 1, kind, reason)
        self.records.append(rec)
        return rec

    @property
    def last(self) -> ActionRecord:
        return self.records[-1]

    def recent(self, n: int) -> list[ActionRecord]:
        return self.records[-n:]

    def evaluations(self) -> list[ActionRecord]:
        return [r for r in self.records if r.kind is ActionKind.MODEL_EVALUATION and r.eval_outcome]


@dataclass
class RuleRevision:
    revision: int
    provenance: str
    text: str


class RuleMemory:
    """Current rule tree plus the text of every earlier revision."""

    def __init__(self, tree: RuleTree | None = None):
        tree = tree or initial_rule_tree()
        self.current = tree
        self.history = [RuleRevision(tree.revision, tree.provenance, serialize(tree))]

    def __eq__(self, other):
        if not isinstance(other, RuleMemory):
            return NotImplemented
        return self.current == other.current and self.history == other.history

    @property
    def revision(self) -> int:
        return self.history[-1].revision

    def revise(self, update: RuleTree, provenance: str) -> RuleTree:
        merged = merge(self.current, update)
        rev = self.revision + 1
        self.current = RuleTree(merged.roots, rev, provenance)
        self.history.append(RuleRevision(rev, provenance, serialize(self.current)))
        return self.current

    def text(self) -> str:
        return serialize(self.current)


@dataclass
class Memories:
    confidence: ConfidenceMemory = field(default_factory=ConfidenceMemory)
    rules: RuleMemory = field(default_factory=RuleMemory)
    actions: ActionMemory = field(default_factory=ActionMemory)


def _dump(obj) -> str:
    return json.dumps(obj, sort_keys=True, ensure_ascii=False)


def persist(memories: Memories, directory) -> None:
    """Write confidence.jsonl, actions.jsonl, rules.txt and rules.meta.json."""
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    with (d / "confidence.jsonl").open("w", encoding="utf-8") as fh:
        for e in memories.confidence:
            fh.write(_dump({"user": e.user, "item": e.item, "score": e.score,
                            "reason": e.reason, "revised_at": e.revised_at}) + "\n")
    with (d / "actions.jsonl").open("w", encoding="utf-8") as fh:
        for rec in memories.actions:
            fh.write(_dump(rec.to_json()) + "\n")
    (d / "rules.txt").write_text(memories.rules.text(), encoding="utf-8")
    meta = {
        "revision": memories.rules.current.revision,
        "provenance": memories.rules.current.provenance,
        "history": [vars(h) for h in memories.rules.history],
    }
    (d / "rules.meta.json").write_text(json.dumps(meta, indent=1, sort_keys=True), encoding="utf-8")


def _read_jsonl(path: Path):
    with path.open(encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                yield lineno, json.loads(line)
            except json.JSONDecodeError as exc:
                raise MemoryLoadError(path, lineno, f"corrupt record: {exc.msg}") from None


def load(directory) -> Memories:
    d = Path(directory)
    mem = Memories()
    path = d / "confidence.jsonl"
    for lineno, obj in _read_jsonl(path):
        try:
            mem.confidence.set(ConfidenceEntry(
                int(obj["user"]), int(obj["item"]), float(obj["score"]),
                str(obj["reason"]), int(obj.get("revised_at", 0)),
            ))
        except (KeyError, TypeError, ValueError) as exc:
            raise MemoryLoadError(path, lineno, f"bad confidence record: {exc}") from None
    path = d / "actions.jsonl"
    for lineno, obj in _read_jsonl(path):
        try:
            rec = ActionRecord.from_json(obj)
        except (KeyError, TypeError, ValueError) as exc:
            raise MemoryLoadError(path, lineno, f"bad action record: {exc}") from None
        if rec.index != len(mem.actions) + 1:
            raise MemoryLoadError(path, lineno, f"action index {rec.index} breaks the sequence")
        mem.actions.records.append(rec)
    meta = json.loads((d / "rules.meta.json").read_text(encoding="utf-8"))
    tree = parse_rule_text((d / "rules.txt").read_text(encoding="utf-8"))
    mem.rules.current = RuleTree(tree.roots, int(meta["revision"]), str(meta["provenance"]))
    mem.rules.history = [RuleRevision(int(h["revision"]), h["provenance"], h["text"]) for h in meta["history"]]
    return mem
