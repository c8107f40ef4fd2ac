"""The autonomous denoising loop: plan, reflect, unlearn, evaluate."""
from __future__ import annotations

import json
import logging
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from . import memory as memory_mod
from .dataset import InteractionSet, NoiseLedger
from .errors import PlanningError, ResponseFormatError
from .llm import Backend
from .memory import ActionKind, ConfidenceEntry, Memories
from .metrics import EvalResult, evaluate
from .model import GmfParams, save_params
from .prompts import (
    CONFIDENCE_FORMAT, DEFAULT_PROFILE, PLANNING_FORMAT, RULES_FORMAT, confidence_prompt,
    parse_confidence_response, parse_planning_response, parse_rules_response, planning_prompt,
    reprompt, rules_prompt,
)
from .rules import percentile_rank, rule_one_scores
from .training import TrainConfig, TrainingSession, split_clean, write_epoch_log

log = logging.getLogger(__name__)

DECLINE_K = 20
HISTORY_WINDOW = 20
_PLAN_STREAM, _CONF_STREAM, _RULE_STREAM = 11, 13, 17


@dataclass
class AgentConfig:
    max_actions: int = 30
    decline_window: int = 5
    reflection_sample_size: int = 1000
    eraser_epochs: int = 20
    parallel_reflections: int = 4
    seed: int = 0
    profile_text: str = DEFAULT_PROFILE

    def __post_init__(self):
        if self.max_actions < 1:
            raise ValueError("max_actions must be >= 1")
        if self.decline_window < 1:
            raise ValueError("decline_window must be >= 1")
        if self.reflection_sample_size < 1:
            raise ValueError("reflection_sample_size must be >= 1")
        if self.eraser_epochs < 1:
            raise ValueError("eraser_epochs must be >= 1")


@dataclass
class SplitData:
    train: InteractionSet
    valid: InteractionSet
    test: InteractionSet
    ledger: NoiseLedger | None = None

    def seen_for_test(self) -> InteractionSet:
        """Train and validation positives, excluded when ranking for the test split."""
        return self.train.with_pairs(
            np.concatenate([self.train.users, self.valid.users]),
            np.concatenate([self.train.items, self.valid.items]),
        )


@dataclass
class RunReport:
    rules_text: str
    test_result: EvalResult | None
    actions: list[dict]
    confidences: list[dict]
    complete: bool
    stop_reason: str
    warnings: list[str] = field(default_factory=list)
    timing: dict = field(default_factory=dict, compare=False)

    def to_json(self) -> dict:
        # wall-clock timing lives in timing.json so report.json stays reproducible
        return {
            "complete": self.complete,
            "stop_reason": self.stop_reason,
            "test": self.test_result.to_json() if self.test_result else None,
            "rules": self.rules_text,
            "actions": self.actions,
            "confidences": self.confidences,
            "warnings": self.warnings,
        }


class Agent:
    def __init__(self, data: SplitData, cfg: AgentConfig, train_cfg: TrainConfig, backend: Backend,
                 evaluator: Callable[[GmfParams], EvalResult] | None = None):
        self.data = data
        self.cfg = cfg
        self.train_cfg = train_cfg
        self.backend = backend
        if hasattr(backend, "bind"):
            backend.bind(self)
        self.evaluator = evaluator or (lambda p: evaluate(p, data.valid, data.train))
        self.memories = Memories()
        self.session: TrainingSession | None = None
        self.declines = 0
        self.warnings: list[str] = []
        self.timing = {"initial_training": 0.0, "eraser_training": 0.0, "evaluation": 0.0, "llm": 0.0}

    # -- helpers -------------------------------------------------------------

    def _rng(self, stream: int) -> np.random.Generator:
        return np.random.default_rng([self.cfg.seed, len(self.memories.actions), stream])

    def _sample_entries(self, stream: int) -> list[ConfidenceEntry]:
        keys = self.memories.confidence.keys()
        n = min(self.cfg.reflection_sample_size, len(keys))
        idx = self._rng(stream).permutation(len(keys))[:n]
        return [self.memories.confidence.get(*keys[k]) for k in idx]

    def _ask(self, kind: str, prompt: str, fmt: str, parser):
        """One call plus one re-prompt on a format violation."""
        start = time.perf_counter()
        try:
            text = self.backend.complete(self.backend.request(kind, self.cfg.profile_text, prompt))
            try:
                return parser(text)
            except ResponseFormatError as exc:
                log.info("%s response rejected (%s); re-prompting", kind, exc)
            text = self.backend.complete(self.backend.request(kind, self.cfg.profile_text, reprompt(prompt, fmt)))
            return parser(text)
        finally:
            self.timing["llm"] += time.perf_counter() - start

    def _warn(self, message: str):
        log.warning(message)
        self.warnings.append(message)

    @property
    def planned_actions(self) -> int:
        return sum(1 for r in self.memories.actions if r.kind is not ActionKind.INITIALIZATION)

    # -- workflow ------------------------------------------------------------

    def initialize(self) -> "Agent":
        start = time.perf_counter()
        self.session = TrainingSession.fresh(self.data.train, self.train_cfg)
        self.session.fit_bpr()
        self.timing["initial_training"] += time.perf_counter() - start
        latest = self.session.trace.latest()
        ranks = percentile_rank(latest)
        scores = rule_one_scores(latest)
        for u, i, loss, r, s in zip(self.data.train.users.tolist(), self.data.train.items.tolist(),
                                    latest.tolist(), ranks.tolist(), scores.tolist()):
            reason = (f"Following Rule-1, the latest loss {loss:.4f} sits at the {100 * r:.1f}th "
                      f"percentile of all training interactions; larger losses are more likely noisy.")
            self.memories.confidence.set(ConfidenceEntry(u, i, min(2.0, max(0.0, s)), reason, 1))
        self.memories.actions.append(
            ActionKind.INITIALIZATION,
            "Rule memory set to Rule-1; confidence scores assigned from the losses of a complete training cycle.",
        )
        return self

    def plan(self) -> tuple[ActionKind, str]:
        entries = self._sample_entries(_PLAN_STREAM)
        prompt = planning_prompt(entries, self.memories.rules.text(),
                                 self.memories.actions.recent(HISTORY_WINDOW))
        try:
            kind, reason = self._ask("planning", prompt, PLANNING_FORMAT, parse_planning_response)
        except ResponseFormatError as exc:
            raise PlanningError(f"planning response unusable after re-prompt: {exc}") from None
        self.memories.actions.append(kind, reason)
        return kind, reason

    def reflect_confidence(self) -> "Agent":
        entries = self._sample_entries(_CONF_STREAM)
        trace = self.session.trace
        row_of = trace.index_of()
        rules_text = self.memories.rules.text()
        action_index = len(self.memories.actions)

        def ask(entry):
            prompt = confidence_prompt(rules_text, entry, trace.row(row_of[(entry.user, entry.item)]))
            try:
                return self._ask("confidence", prompt, CONFIDENCE_FORMAT, parse_confidence_response)
            except ResponseFormatError as exc:
                return exc

        workers = self.cfg.parallel_reflections if self.backend.concurrent else 1
        if workers > 1:
            with ThreadPoolExecutor(workers) as pool:
                results = list(pool.map(ask, entries))
        else:
            results = [ask(e) for e in entries]
        # writes applied in sample order so the outcome does not depend on scheduling
        for entry, res in zip(entries, results):
            if isinstance(res, Exception):
                self._warn(f"action {action_index}: confidence for ({entry.user}, {entry.item}) "
                           f"kept after malformed responses ({res})")
                continue
            score, reason = res
            self.memories.confidence.set(ConfidenceEntry(entry.user, entry.item, score, reason, action_index))
        return self

    def reflect_rules(self) -> "Agent":
        entries = self._sample_entries(_RULE_STREAM)
        record = self.memories.actions.last
        prompt = rules_prompt(self.memories.rules.text(), entries, record.reason)
        try:
            tree = self._ask("rules", prompt, RULES_FORMAT, parse_rules_response)
        except ResponseFormatError as exc:
            self._warn(f"action {record.index}: rules kept after malformed responses ({exc})")
            return self
        self.memories.rules.revise(tree, f"action {record.index}")
        return self

    def execute_training(self) -> "Agent":
        start = time.perf_counter()
        noisy = self.memories.confidence.noisy_set()
        clean = split_clean(self.data.train, noisy)
        self.session.fit_eraser(clean, noisy, self.cfg.eraser_epochs)
        self.timing["eraser_training"] += time.perf_counter() - start
        return self

    def execute_evaluation(self) -> EvalResult:
        start = time.perf_counter()
        previous = self.memories.actions.evaluations()
        result = self.evaluator(self.session.params)
        record = self.memories.actions.last
        if record.kind is not ActionKind.MODEL_EVALUATION:
            record = self.memories.actions.append(ActionKind.MODEL_EVALUATION, "evaluation requested")
        record.eval_outcome = result
        if previous and result.recall[DECLINE_K] < previous[-1].eval_outcome.recall[DECLINE_K]:
            self.declines += 1
        else:
            self.declines = 0
        self.timing["evaluation"] += time.perf_counter() - start
        return result

    def dispatch(self, kind: ActionKind):
        if kind is ActionKind.CONFIDENCE_REFLECTION:
            self.reflect_confidence()
        elif kind is ActionKind.RULE_REFLECTION:
            self.reflect_rules()
        elif kind is ActionKind.LOSS_ERASER_TRAINING:
            self.execute_training()
        elif kind is ActionKind.MODEL_EVALUATION:
            self.execute_evaluation()
        else:
            raise ValueError(f"cannot dispatch {kind}")

    def run(self) -> RunReport:
        start = time.perf_counter()
        self.initialize()
        complete, stop_reason = True, "max_actions"
        try:
            while self.planned_actions < self.cfg.max_actions:
                kind, _ = self.plan()
                self.dispatch(kind)
                if self.declines >= self.cfg.decline_window:
                    stop_reason = f"validation Recall@{DECLINE_K} declined {self.declines} times in a row"
                    break
        except PlanningError as exc:
            complete, stop_reason = False, f"planning error: {exc}"
            log.error(stop_reason)
        test = evaluate(self.session.params, self.data.test, self.data.seen_for_test())
        self.timing["total"] = time.perf_counter() - start
        return self.report(test, complete, stop_reason)

    def report(self, test: EvalResult | None, complete=True, stop_reason="") -> RunReport:
        return RunReport(
            rules_text=self.memories.rules.text(),
            test_result=test,
            actions=[r.to_json() for r in self.memories.actions],
            confidences=[
                {"user": e.user, "item": e.item, "score": e.score, "reason": e.reason}
                for e in self.memories.confidence
            ],
            complete=complete,
            stop_reason=stop_reason,
            warnings=list(self.warnings),
            timing=dict(self.timing),
        )

    def save(self, run_dir, report: RunReport, config: dict | None = None) -> Path:
        """Write the run directory: config, transcript, memories, model, traces, report."""
        d = Path(run_dir)
        d.mkdir(parents=True, exist_ok=True)
        if config is not None:
            (d / "config.json").write_text(json.dumps(config, indent=1, sort_keys=True))
        self.backend.write_transcript(d / "transcript.jsonl")
        memory_mod.persist(self.memories, d)
        (d / "report.json").write_text(json.dumps(report.to_json(), indent=1, sort_keys=True))
        (d / "timing.json").write_text(json.dumps(report.timing, indent=1, sort_keys=True))
        if self.session is not None:
            save_params(self.session.params, d / "params.npz")
            self.session.trace.save(d / "traces.bin")
            write_epoch_log(self.session.reports, d / "train_log.jsonl")
        return d


def run(data: SplitData, cfg: AgentConfig, backend: Backend, train_cfg: TrainConfig | None = None) -> RunReport:
    return Agent(data, cfg, train_cfg or TrainConfig(seed=cfg.seed), backend).run()


__all__ = ["Agent", "AgentConfig", "SplitData", "RunReport", "run"]
