"""Hierarchical denoising rules over per-interaction loss traces.

Rules are written as a numbered outline::

    Rule-1(Value-Related): The confidence of ... is related to the loss value ...
      Rule-1.1(Value Threshold): The noisy sample's loss value exceeds the 95th percentile threshold.

Nesting follows the dotted id. Each description is compiled to a typed
predicate when it matches a known threshold phrasing, otherwise it is kept
as inert prose. Only leaves are executable; an interaction is noisy when
any leaf fires.
"""
from __future__ import annotations

import logging
import re
from dataclasses import dataclass, field, replace

import numpy as np

from .errors import RuleParseError
from .training import LossTrace, nearest_rank_threshold

log = logging.getLogger(__name__)

DEFAULT_MEDIAN_FACTOR = 3.0
DEFAULT_EXCEEDANCE_PERCENTILE = 0.95

INITIAL_RULE_TEXT = (
    "Rule-1(Value-Related): The confidence of the interaction data is related to the loss "
    "value of the interaction data, and the one with a large loss is more likely to be a "
    "noisy sample."
)


# -- predicates ---------------------------------------------------------------

@dataclass(frozen=True)
class PercentileThreshold:
    p: float


@dataclass(frozen=True)
class RepeatedExceedance:
    times: int
    # None: use the nearest ancestor's percentile (or 0.95)
    percentile: float | None = None


@dataclass(frozen=True)
class VarianceThreshold:
    v: float


@dataclass(frozen=True)
class OscillationBounds:
    upper: float
    lower: float
    times: int


@dataclass(frozen=True)
class MedianOutlier:
    factor: float = DEFAULT_MEDIAN_FACTOR


@dataclass(frozen=True)
class Prose:
    text: str


Predicate = PercentileThreshold | RepeatedExceedance | VarianceThreshold | OscillationBounds | MedianOutlier | Prose

_NUM = r"(\d+(?:\.\d+)?|\.\d+)"
_WORDS = {
    "once": 1, "twice": 2, "thrice": 3, "one": 1, "two": 2, "three": 3, "four": 4,
    "five": 5, "six": 6, "seven": 7, "eight": 8, "nine": 9, "ten": 10,
}
_COUNT = r"(\d+|one|two|three|four|five|six|seven|eight|nine|ten)\s+times\b|\b(once|twice|thrice)\b"


def _count(text: str) -> int | None:
    m = re.search(_COUNT, text, re.I)
    if not m:
        return None
    word = (m.group(1) or m.group(2)).lower()
    return int(word) if word.isdigit() else _WORDS[word]


def _percentile(text: str) -> float | None:
    m = re.search(_NUM + r"\s*(?:st|nd|rd|th)?[\s-]*percentile", text, re.I) or re.search(
        _NUM + r"\s*%\s*(?:percentile|threshold)", text, re.I
    )
    return float(m.group(1)) / 100.0 if m else None


def compile_predicate(description: str) -> Predicate:
    """Map a rule description onto a typed predicate; unknown phrasing -> Prose."""
    text = " ".join(description.split())
    try:
        pred = _compile(text)
    except (ValueError, ZeroDivisionError):
        pred = None
    if pred is None:
        return Prose(text)
    return pred


def _compile(text: str):
    upper = re.search(r"upper\s+bound\s*(?:of\s*)?\(?\s*" + _NUM, text, re.I)
    lower = re.search(r"lower\s+bound\s*(?:of\s*)?\(?\s*" + _NUM, text, re.I)
    if upper and lower:
        hi, lo = float(upper.group(1)), float(lower.group(1))
        times = _count(text) or 1
        return OscillationBounds(hi, lo, times) if hi > lo else None
    if re.search(r"variance", text, re.I):
        m = re.search(r"(?:threshold(?:\s+of)?|exceeds?|above|greater than|>)\s*(?:a\s+threshold\s*(?:of\s*)?)?" + _NUM,
                      text, re.I)
        return VarianceThreshold(float(m.group(1))) if m else None
    if re.search(r"\bmedian\b", text, re.I):
        m = re.search(_NUM + r"\s*(?:x\b|×|-?fold\b|times\s+(?:the\s+)?median)", text, re.I)
        factor = float(m.group(1)) if m else DEFAULT_MEDIAN_FACTOR
        return MedianOutlier(factor) if factor > 1.0 else None
    times = _count(text)
    if times is not None and re.search(r"exceed|above", text, re.I):
        p = _percentile(text)
        if p is not None and not 0.0 < p < 1.0:
            return None
        return RepeatedExceedance(times, p) if times >= 1 else None
    p = _percentile(text)
    if p is not None:
        return PercentileThreshold(p) if 0.0 < p < 1.0 else None
    return None


def _fmt(x: float) -> str:
    return f"{x:.10g}"


def describe(pred: Predicate) -> str:
    """Canonical description that :func:`compile_predicate` maps back to ``pred``."""
    if isinstance(pred, PercentileThreshold):
        return f"The loss value exceeds the {_fmt(pred.p * 100)}th percentile threshold."
    if isinstance(pred, RepeatedExceedance):
        at = f"the {_fmt(pred.percentile * 100)}th percentile " if pred.percentile is not None else "the threshold "
        return f"If the loss exceeds {at}{pred.times} times across multiple trainings, it is noisy."
    if isinstance(pred, VarianceThreshold):
        return f"If the variance exceeds a threshold {_fmt(pred.v)}, the sample is flagged as noisy."
    if isinstance(pred, OscillationBounds):
        return (f"If the loss value oscillates beyond upper bound ({_fmt(pred.upper)}) and "
                f"lower bound ({_fmt(pred.lower)}) {pred.times} times, it is noisy.")
    if isinstance(pred, MedianOutlier):
        return (f"The loss value is higher than {_fmt(pred.factor)}x the median loss or lower "
                f"than the median divided by that factor.")
    return pred.text


# -- tree ---------------------------------------------------------------------

@dataclass(frozen=True)
class RuleNode:
    id: tuple[int, ...]
    label: str
    description: str
    predicate: Predicate
    children: tuple["RuleNode", ...] = ()

    @property
    def rule_id(self) -> str:
        return ".".join(map(str, self.id))

    def walk(self):
        yield self
        for c in self.children:
            yield from c.walk()


def make_node(label: str, description: str, children=(), predicate=None) -> RuleNode:
    """Node with a provisional id; ids are assigned by :func:`canonical`."""
    description = " ".join(description.split())
    if predicate is None:
        predicate = compile_predicate(description)
    return RuleNode((1,), label.strip(), description, predicate, tuple(children))


@dataclass(frozen=True)
class RuleTree:
    roots: tuple[RuleNode, ...] = ()
    revision: int = field(default=0, compare=False)
    provenance: str = field(default="", compare=False)

    def nodes(self):
        for r in self.roots:
            yield from r.walk()

    def __len__(self):
        return sum(1 for _ in self.nodes())

    def ids(self) -> list[str]:
        return [n.rule_id for n in self.nodes()]

    def find(self, rule_id: str) -> RuleNode | None:
        for n in self.nodes():
            if n.rule_id == rule_id:
                return n
        return None

    def leaves(self) -> list[RuleNode]:
        return [n for n in self.nodes() if not n.children]


def _renumber(nodes, prefix=()) -> tuple[RuleNode, ...]:
    out = []
    for k, n in enumerate(nodes, start=1):
        nid = prefix + (k,)
        out.append(replace(n, id=nid, children=_renumber(n.children, nid)))
    return tuple(out)


def canonical(roots, revision: int = 0, provenance: str = "") -> RuleTree:
    return RuleTree(_renumber(roots), revision, provenance)


_RULE_START = re.compile(r"Rule\s*-|Rule\s+\d", re.I)
_RULE_LINE = re.compile(
    r"Rule\s*-?\s*(?P<id>\d+(?:\.\d+)*)\s*\((?P<label>.*?)\)\s*:\s*(?P<desc>.*)$"
    r"|Rule\s*-?\s*(?P<id2>\d+(?:\.\d+)*)\s*\((?P<label2>[^)]*)\)\s*(?P<desc2>.*)$",
    re.I,
)
_BULLET = re.compile(r"^[\s\-*•·>#]*")


def parse_rule_text(text: str) -> RuleTree:
    """Parse a numbered rule outline into a canonical :class:`RuleTree`."""
    entries: dict[tuple[int, ...], list] = {}
    order: list[tuple[int, ...]] = []
    current = None
    offset = 0
    for raw in text.splitlines(keepends=True):
        line_start = offset
        offset += len(raw)
        line = raw.rstrip("\r\n").replace("**", "").replace("__", "")
        lead = _BULLET.match(line).end()
        body = line[lead:].strip()
        if not body:
            current = None
            continue
        if not _RULE_START.match(body):
            if current is not None:
                current[1] = f"{current[1]} {body}"
            continue
        pos = line_start + re.search(r"rule", raw, re.I).start()
        m = _RULE_LINE.match(body)
        if not m:
            raise RuleParseError(f"malformed rule line {body[:60]!r}", pos)
        rid = m.group("id") or m.group("id2")
        label = m.group("label") if m.group("id") else m.group("label2")
        desc = m.group("desc") if m.group("id") else m.group("desc2")
        path = tuple(int(c) for c in rid.split("."))
        if any(c < 1 for c in path):
            raise RuleParseError(f"rule id components must be >= 1: Rule-{rid}", pos)
        if path in entries:
            raise RuleParseError(f"duplicate rule id Rule-{rid}", pos)
        current = [label.strip(), desc.strip(), pos]
        entries[path] = current
        order.append(path)
    for path in order:
        if len(path) > 1 and path[:-1] not in entries:
            parent = ".".join(map(str, path[:-1]))
            raise RuleParseError(
                f"Rule-{'.'.join(map(str, path))} has no parent Rule-{parent}", entries[path][2]
            )

    def build(prefix):
        kids = sorted(p for p in entries if len(p) == len(prefix) + 1 and p[:-1] == prefix)
        return tuple(make_node(entries[p][0], entries[p][1], build(p)) for p in kids)

    return canonical(build(()))


def serialize(tree: RuleTree) -> str:
    """Depth-first outline, two spaces of indent per level."""
    lines = []
    for n in tree.nodes():
        indent = "  " * (len(n.id) - 1)
        lines.append(f"{indent}Rule-{n.rule_id}({n.label}): {n.description}".rstrip())
    return "\n".join(lines) + ("\n" if lines else "")


def _merge_lists(left, right):
    out = list(left)
    for b in right:
        key = b.label.casefold()
        hit = next((k for k, a in enumerate(out) if a.label.casefold() == key), None)
        if hit is None:
            out.append(b)
            continue
        a = out[hit]
        # newer revision wins on label match
        out[hit] = replace(b, children=_merge_lists(a.children, b.children))
    return tuple(out)


def merge(a: RuleTree, b: RuleTree) -> RuleTree:
    """Union of two trees matched by label at each level; ``b`` wins conflicts."""
    return canonical(_merge_lists(a.roots, b.roots), max(a.revision, b.revision), b.provenance)


# -- evaluation ---------------------------------------------------------------

def _check_population(population):
    population = np.asarray(population, dtype=float)
    if population.size == 0:
        raise ValueError("this predicate needs a non-empty population")
    return population


def evaluate_predicate(pred: Predicate, trace, population=None, inherited_percentile=None) -> bool:
    """Verdict for one interaction's loss history (oldest value first)."""
    trace = np.asarray(trace, dtype=float)
    if trace.size == 0:
        raise ValueError("empty loss trace")
    return bool(predicate_mask(pred, trace[None, :], population, inherited_percentile)[0])


def predicate_mask(pred: Predicate, values: np.ndarray, population=None, inherited_percentile=None) -> np.ndarray:
    """Vectorised verdicts; ``values`` has one row per interaction."""
    values = np.asarray(values, dtype=float)
    n = values.shape[0]
    if isinstance(pred, Prose):
        return np.zeros(n, dtype=bool)
    if isinstance(pred, PercentileThreshold):
        tau = nearest_rank_threshold(_check_population(population), pred.p)
        return values[:, -1] > tau
    if isinstance(pred, RepeatedExceedance):
        p = pred.percentile or inherited_percentile or DEFAULT_EXCEEDANCE_PERCENTILE
        tau = nearest_rank_threshold(_check_population(population), p)
        return (values > tau).sum(axis=1) >= pred.times
    if isinstance(pred, VarianceThreshold):
        return values.var(axis=1) > pred.v
    if isinstance(pred, OscillationBounds):
        a, b = values[:, :-1], values[:, 1:]
        crossing = ((a > pred.upper) & (b < pred.lower)) | ((a < pred.lower) & (b > pred.upper))
        return crossing.sum(axis=1) >= pred.times
    if isinstance(pred, MedianOutlier):
        med = float(np.median(_check_population(population)))
        latest = values[:, -1]
        return (latest > pred.factor * med) | (latest < med / pred.factor)
    raise TypeError(f"unknown predicate {pred!r}")


@dataclass
class Verdicts:
    """Per-interaction firing rule ids (empty tuple = clean)."""

    fired: list[tuple[str, ...]]

    @property
    def noisy(self) -> list[int]:
        return [k for k, f in enumerate(self.fired) if f]

    def is_noisy(self, k: int) -> bool:
        return bool(self.fired[k])

    def counts(self) -> dict[str, int]:
        out: dict[str, int] = {}
        for f in self.fired:
            for rid in f:
                out[rid] = out.get(rid, 0) + 1
        return out


def _leaves_with_context(nodes, inherited=None):
    for n in nodes:
        p = n.predicate.p if isinstance(n.predicate, PercentileThreshold) else inherited
        if n.children:
            yield from _leaves_with_context(n.children, p)
        else:
            yield n, inherited


def apply_rules(tree: RuleTree, trace: LossTrace, population=None) -> Verdicts:
    """Flag interactions where any executable leaf fires.

    ``population`` defaults to the latest recorded loss of every traced
    interaction.
    """
    if population is None:
        population = trace.latest()
    fired: list[list[str]] = [[] for _ in range(len(trace))]
    for leaf, inherited in _leaves_with_context(tree.roots):
        if isinstance(leaf.predicate, Prose):
            log.debug("Rule-%s is prose and not executable", leaf.rule_id)
            continue
        mask = predicate_mask(leaf.predicate, trace.values, population, inherited)
        for k in np.flatnonzero(mask).tolist():
            fired[k].append(leaf.rule_id)
    return Verdicts([tuple(f) for f in fired])


def initial_rule_tree() -> RuleTree:
    return replace(parse_rule_text(INITIAL_RULE_TEXT), revision=1, provenance="Initialization")


def percentile_rank(values) -> np.ndarray:
    """Rank / N in (0, 1]; ties share the highest rank of their group."""
    values = np.asarray(values, dtype=float)
    n = values.size
    sorted_vals = np.sort(values)
    return np.searchsorted(sorted_vals, values, side="right") / n


def rule_one_scores(latest_losses) -> np.ndarray:
    """Initial confidence 2 * (1 - percentile rank of the loss): high loss -> low score."""
    return 2.0 * (1.0 - percentile_rank(latest_losses))


__all__ = [
    "PercentileThreshold", "RepeatedExceedance", "VarianceThreshold", "OscillationBounds",
    "MedianOutlier", "Prose", "RuleNode", "RuleTree", "Verdicts", "compile_predicate",
    "describe", "make_node", "canonical", "parse_rule_text", "serialize", "merge",
    "evaluate_predicate", "predicate_mask", "apply_rules", "initial_rule_tree",
    "percentile_rank", "rule_one_scores",
]
