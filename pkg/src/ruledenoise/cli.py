"""Command line entry point: ``ruledenoise <subcommand> --config run.json [overrides]``.

Every subcommand reads the same JSON run config, applies ``--kebab-case``
flag overrides and writes its artifacts to the configured output directory.
Results are also echoed to stdout as tab-separated rows.

Exit codes: 0 success, 1 usage error, 2 runtime error.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from . import plots
from .agent import Agent, AgentConfig, SplitData
from .dataset import (
    InteractionSet, NoiseLedger, densify_top_users, inject_noise, load_saved, save_interactions,
    split,
)
from .errors import ConfigurationError, RuleDenoiseError
from .llm import make_backend
from .memory import load as load_memories
from .metrics import EvalResult, evaluate
from .model import init_params, load_params, save_params
from .rules import RuleTree, apply_rules, describe, parse_rule_text, serialize
from .training import LossTrace, TrainConfig, TrainingSession, split_clean, write_epoch_log

log = logging.getLogger("ruledenoise")

# used by compile-rules / compare-unlearning when no rule file is given
DEFAULT_FILTER_RULES = """\
Rule-1(Value-Related): Interactions with a large loss are more likely to be noisy.
  Rule-1.1(Value Threshold): The loss value exceeds the 80th percentile threshold.
"""

CURVE_K = 20


class UsageError(Exception):
    pass


@dataclass
class RunConfig:
    dataset: str | None = None
    top_users: int | None = None
    split_seed: int = 0
    noise_seed: int = 0
    noise_rate: float = 0.2
    output_dir: str = "runs/default"
    rules: str | None = None
    train: TrainConfig = field(default_factory=TrainConfig)
    agent: AgentConfig = field(default_factory=AgentConfig)
    backend: dict = field(default_factory=lambda: {"kind": "scripted"})

    @classmethod
    def from_dict(cls, obj: dict, base_dir: Path | None = None) -> "RunConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(obj) - known
        if unknown:
            raise ConfigurationError(f"unknown config keys: {sorted(unknown)}")
        obj = dict(obj)
        try:
            train = TrainConfig(**obj.pop("train", {}))
            agent = AgentConfig(**obj.pop("agent", {}))
        except (TypeError, ValueError) as exc:
            raise ConfigurationError(f"bad train/agent section: {exc}") from None
        backend = dict(obj.pop("backend", {"kind": "scripted"}))
        cfg = cls(train=train, agent=agent, backend=backend, **obj)
        if base_dir is not None:
            cfg.resolve_paths(base_dir)
        return cfg

    @classmethod
    def load(cls, path) -> "RunConfig":
        path = Path(path)
        try:
            obj = json.loads(path.read_text(encoding="utf-8"))
        except OSError as exc:
            raise ConfigurationError(f"cannot read config {path}: {exc.strerror}") from None
        except json.JSONDecodeError as exc:
            raise ConfigurationError(f"config {path} is not valid JSON: {exc}") from None
        if not isinstance(obj, dict):
            raise ConfigurationError("config must be a JSON object")
        return cls.from_dict(obj, path.parent)

    def resolve_paths(self, base: Path) -> None:
        """Input paths in a config file are relative to that file; output_dir to the cwd."""
        def fix(p):
            return str((base / p).resolve()) if p and not Path(p).is_absolute() else p
        self.dataset = fix(self.dataset)
        self.rules = fix(self.rules)
        if isinstance(self.backend.get("script"), str):
            self.backend["script"] = fix(self.backend["script"])

    def to_json(self) -> dict:
        out = asdict(self)
        if out["agent"]["profile_text"] == AgentConfig().profile_text:
            del out["agent"]["profile_text"]
        return out

    @property
    def out(self) -> Path:
        return Path(self.output_dir)

    def require_dataset(self) -> Path:
        if not self.dataset:
            raise ConfigurationError("no dataset configured (set 'dataset' or --dataset)")
        path = Path(self.dataset)
        if not path.exists():
            raise ConfigurationError(f"dataset {path} does not exist")
        return path

    def require_backend(self) -> dict:
        kind = self.backend.get("kind")
        if kind not in ("scripted", "http"):
            raise ConfigurationError("backend.kind must be exactly one of 'scripted' or 'http'")
        if kind == "scripted" and isinstance(self.backend.get("script"), str):
            if not Path(self.backend["script"]).exists():
                raise ConfigurationError(f"backend script {self.backend['script']} does not exist")
        return self.backend


# -- flag plumbing ----------------------------------------------------------------

# (flag, section, key, type); section None means a top-level key
_OVERRIDES = [
    ("dataset", None, "dataset", str),
    ("top-users", None, "top_users", int),
    ("split-seed", None, "split_seed", int),
    ("noise-seed", None, "noise_seed", int),
    ("noise-rate", None, "noise_rate", float),
    ("output-dir", None, "output_dir", str),
    ("epochs", "train", "epochs", int),
    ("batch-size", "train", "batch_size", int),
    ("learning-rate", "train", "learning_rate", float),
    ("alpha", "train", "alpha", float),
    ("negatives-per-positive", "train", "negatives_per_positive", int),
    ("trace-every", "train", "trace_every", int),
    ("dim", "train", "dim", int),
    ("max-actions", "agent", "max_actions", int),
    ("decline-window", "agent", "decline_window", int),
    ("reflection-sample-size", "agent", "reflection_sample_size", int),
    ("eraser-epochs", "agent", "eraser_epochs", int),
    ("parallel-reflections", "agent", "parallel_reflections", int),
    ("backend", "backend", "kind", str),
    ("script", "backend", "script", str),
    ("base-url", "backend", "base_url", str),
    ("model", "backend", "model", str),
    ("temperature", "backend", "temperature", float),
    ("max-tokens", "backend", "max_tokens", int),
]


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="JSON run config; flags below override its keys")
    g = p.add_argument_group("config overrides")
    for flag, section, key, typ in _OVERRIDES:
        where = f"{section}.{key}" if section else key
        g.add_argument(f"--{flag}", type=typ, default=None, help=f"overrides '{where}'")
    g.add_argument("--seed", type=int, default=None, help="overrides 'train.seed' and 'agent.seed'")


def build_config(args) -> RunConfig:
    cfg = RunConfig.load(args.config) if args.config else RunConfig()
    for flag, section, key, _ in _OVERRIDES:
        value = getattr(args, flag.replace("-", "_"))
        if value is None:
            continue
        if section is None:
            setattr(cfg, key, value)
        elif section == "backend":
            cfg.backend[key] = value
        else:
            target = getattr(cfg, section)
            try:
                setattr(cfg, section, type(target)(**{**asdict(target), key: value}))
            except ValueError as exc:
                raise UsageError(f"--{flag}: {exc}") from None
    if args.seed is not None:
        cfg.train = TrainConfig(**{**asdict(cfg.train), "seed": args.seed})
        cfg.agent = AgentConfig(**{**asdict(cfg.agent), "seed": args.seed})
    return cfg


# -- shared steps -----------------------------------------------------------------

def load_dataset(cfg: RunConfig) -> InteractionSet:
    data = load_saved(cfg.require_dataset())
    if cfg.top_users:
        data = densify_top_users(data, cfg.top_users)
    return data


def prepare(cfg: RunConfig) -> SplitData:
    """Dataset -> split -> noise injection, all seeded from the config."""
    train, valid, test = split(load_dataset(cfg), cfg.split_seed)
    ledger = None
    if cfg.noise_rate > 0:
        held = train.with_pairs(np.concatenate([valid.users, test.users]),
                                np.concatenate([valid.items, test.items]))
        train, ledger = inject_noise(train, cfg.noise_rate, cfg.noise_seed, exclude=held)
    return SplitData(train, valid, test, ledger)


def _tsv(rows, header=None, path=None) -> None:
    lines = []
    if header:
        lines.append("\t".join(header))
    lines += ["\t".join(_fmt(v) for v in row) for row in rows]
    text = "\n".join(lines) + "\n"
    sys.stdout.write(text)
    if path is not None:
        Path(path).write_text(text, encoding="utf-8")


def _fmt(v) -> str:
    if isinstance(v, float):
        return f"{v:.6g}"
    return str(v)


def _metric_row(name: str, res: EvalResult) -> list:
    row = [name]
    for k in res.ks:
        row += [res.recall[k], res.ndcg[k]]
    return row + [res.num_users]


def _metric_header(res: EvalResult) -> list[str]:
    cols = ["split"]
    for k in res.ks:
        cols += [f"recall@{k}", f"ndcg@{k}"]
    return cols + ["users"]


def _write_json(path, obj) -> None:
    Path(path).write_text(json.dumps(obj, indent=1, sort_keys=True) + "\n", encoding="utf-8")


def _load_rules(path) -> RuleTree:
    if path is None:
        return parse_rule_text(DEFAULT_FILTER_RULES)
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigurationError(f"cannot read rules {path}: {exc.strerror}") from None
    return parse_rule_text(text)


def _noise_quality(flagged_pairs, ledger: NoiseLedger | None) -> dict:
    if ledger is None:
        return {}
    injected = ledger.pairs()
    hits = len(set(flagged_pairs) & injected)
    return {
        "noise_precision": hits / len(flagged_pairs) if flagged_pairs else 0.0,
        "noise_recall": hits / len(injected) if injected else 0.0,
    }


# -- subcommands ------------------------------------------------------------------

def cmd_ingest(cfg: RunConfig, args) -> int:
    data = load_dataset(cfg)
    cfg.out.mkdir(parents=True, exist_ok=True)
    save_interactions(data, cfg.out / "interactions.tsv")
    _tsv([[data.num_users, data.num_items, len(data)]], ["users", "items", "interactions"])
    return 0


def cmd_split(cfg: RunConfig, args) -> int:
    parts = dict(zip(("train", "valid", "test"), split(load_dataset(cfg), cfg.split_seed)))
    cfg.out.mkdir(parents=True, exist_ok=True)
    for name, part in parts.items():
        save_interactions(part, cfg.out / f"{name}.tsv")
    _tsv([[name, len(part)] for name, part in parts.items()], ["part", "interactions"])
    return 0


def cmd_inject_noise(cfg: RunConfig, args) -> int:
    data = prepare(cfg)
    cfg.out.mkdir(parents=True, exist_ok=True)
    save_interactions(data.train, cfg.out / "train_noisy.tsv")
    if data.ledger is not None:
        _write_json(cfg.out / "noise_ledger.json", data.ledger.to_json())
    n_noise = len(data.ledger) if data.ledger is not None else 0
    _tsv([[len(data.train), n_noise, cfg.noise_rate]], ["train_interactions", "injected", "rate"])
    return 0


def cmd_train(cfg: RunConfig, args) -> int:
    data = prepare(cfg)
    session = TrainingSession.fresh(data.train, cfg.train)
    session.fit_bpr()
    cfg.out.mkdir(parents=True, exist_ok=True)
    save_params(session.params, cfg.out / "params.npz")
    session.trace.save(cfg.out / "traces.bin")
    write_epoch_log(session.reports, cfg.out / "train_log.jsonl")
    res = evaluate(session.params, data.valid, data.train)
    _tsv([_metric_row("valid", res)], _metric_header(res), cfg.out / "train_metrics.tsv")
    return 0


def cmd_run_agent(cfg: RunConfig, args) -> int:
    backend = make_backend(cfg.require_backend())
    data = prepare(cfg)
    agent = Agent(data, cfg.agent, cfg.train, backend)
    report = agent.run()
    agent.save(cfg.out, report, cfg.to_json())
    if data.ledger is not None:
        _write_json(cfg.out / "noise_ledger.json", data.ledger.to_json())
    if report.test_result is not None:
        _tsv([_metric_row("test", report.test_result)], _metric_header(report.test_result))
    print(f"# stop: {report.stop_reason}", file=sys.stderr)
    if not report.complete:
        print(f"error: run incomplete ({report.stop_reason})", file=sys.stderr)
        return 2
    return 0


def cmd_eval(cfg: RunConfig, args) -> int:
    data = prepare(cfg)
    params = load_params(args.params or cfg.out / "params.npz")
    rows = [
        _metric_row("valid", evaluate(params, data.valid, data.train)),
        _metric_row("test", res := evaluate(params, data.test, data.seen_for_test())),
    ]
    cfg.out.mkdir(parents=True, exist_ok=True)
    _tsv(rows, _metric_header(res), cfg.out / "eval.tsv")
    return 0


def cmd_export_rules(cfg: RunConfig, args) -> int:
    run_dir = Path(args.run_dir) if args.run_dir else cfg.out
    mem = load_memories(run_dir)
    text = serialize(mem.rules.current)
    out = Path(args.out) if args.out else run_dir / "exported_rules.txt"
    out.write_text(text, encoding="utf-8")
    rows = [[n.rule_id, n.label, type(n.predicate).__name__, describe(n.predicate)]
            for n in mem.rules.current.nodes()]
    _tsv(rows, ["id", "label", "predicate", "description"])
    return 0


def cmd_compile_rules(cfg: RunConfig, args) -> int:
    data = prepare(cfg)
    tree = _load_rules(args.rules or cfg.rules)
    trace = LossTrace.load(args.traces or cfg.out / "traces.bin")
    if not (np.array_equal(trace.users, data.train.users) and np.array_equal(trace.items, data.train.items)):
        raise ConfigurationError("traces do not cover the configured training set")
    verdicts = apply_rules(tree, trace)
    flagged = [(int(trace.users[k]), int(trace.items[k])) for k in verdicts.noisy]
    clean = split_clean(data.train, flagged)
    session = TrainingSession(
        init_params(data.train.num_users, data.train.num_items, cfg.train.dim, cfg.train.seed),
        data.train, cfg.train,
    )
    session.fit_bpr(clean)
    res = evaluate(session.params, data.test, data.seen_for_test())
    cfg.out.mkdir(parents=True, exist_ok=True)
    summary = {
        "rules": serialize(tree),
        "flagged": len(flagged),
        "clean": len(clean),
        "per_rule": verdicts.counts(),
        "test": res.to_json(),
        **_noise_quality(flagged, data.ledger),
    }
    _write_json(cfg.out / "compile_report.json", summary)
    _tsv([_metric_row("filtered-test", res) + [len(flagged), len(clean)]],
         _metric_header(res) + ["flagged", "clean"], cfg.out / "compile_report.tsv")
    return 0


def cmd_compare_unlearning(cfg: RunConfig, args) -> int:
    data = prepare(cfg)
    tc = cfg.train
    base = TrainingSession.fresh(data.train, tc)
    base.fit_bpr()
    if args.noisy_source == "ledger":
        if data.ledger is None:
            raise ConfigurationError("--noisy-source ledger needs noise_rate > 0")
        noisy = [(u, i, 1.0) for u, i in sorted(data.ledger.pairs())]
    else:
        tree = _load_rules(args.rules or cfg.rules)
        verdicts = apply_rules(tree, base.trace)
        noisy = [(int(base.trace.users[k]), int(base.trace.items[k]), 1.0) for k in verdicts.noisy]
    if not noisy:
        raise ConfigurationError("no interaction was flagged; nothing to unlearn")
    clean = split_clean(data.train, noisy)

    def tracker(session):
        """Validation recall against cumulative training seconds, starting at t=0."""
        secs = [0.0]
        rec = [evaluate(session.params, data.valid, data.train).recall[CURVE_K]]

        def hook(s, report):
            secs.append(secs[-1] + report.wall_time)
            rec.append(evaluate(s.params, data.valid, data.train).recall[CURVE_K])
        return secs, rec, hook

    # re-training arm: fresh parameters, clean data only
    retrain = TrainingSession(
        init_params(data.train.num_users, data.train.num_items, tc.dim, tc.seed), data.train, tc,
    )
    r_secs, r_rec, hook = tracker(retrain)
    retrain.fit_bpr(clean, on_epoch=hook)
    r_time = sum(r.wall_time for r in retrain.reports)

    # LossEraser arm: continue the trained model for eraser_epochs
    e_secs, e_rec, hook = tracker(base)
    before = len(base.reports)
    base.fit_eraser(clean, noisy, cfg.agent.eraser_epochs, on_epoch=hook)
    e_time = sum(r.wall_time for r in base.reports[before:])

    seen = data.seen_for_test()
    arms = {
        "retrain": (tc.epochs, r_time, evaluate(retrain.params, data.test, seen)),
        "losseraser": (cfg.agent.eraser_epochs, e_time, evaluate(base.params, data.test, seen)),
    }
    r20 = arms["retrain"][2].recall[CURVE_K]
    e20 = arms["losseraser"][2].recall[CURVE_K]
    summary = {
        "noisy_source": args.noisy_source,
        "flagged": len(noisy),
        **_noise_quality([(u, i) for u, i, _ in noisy], data.ledger),
        "arms": {name: {"epochs": ep, "wall_time": t, "test": res.to_json()}
                 for name, (ep, t, res) in arms.items()},
        "speedup": r_time / e_time if e_time > 0 else float("inf"),
        f"relative_gap_recall@{CURVE_K}": abs(e20 - r20) / r20 if r20 > 0 else float("inf"),
    }
    cfg.out.mkdir(parents=True, exist_ok=True)
    _write_json(cfg.out / "unlearning.json", summary)
    res = arms["retrain"][2]
    _tsv(
        [[name, ep, t] + _metric_row(name, r)[1:-1] for name, (ep, t, r) in arms.items()],
        ["arm", "epochs", "wall_time"] + _metric_header(res)[1:-1],
        cfg.out / "unlearning.tsv",
    )
    print(f"# speedup {summary['speedup']:.2f}x", file=sys.stderr)
    plots.unlearning_curves(
        {"re-training": (r_secs, r_rec), "LossEraser": (e_secs, e_rec)}, CURVE_K,
        cfg.out / "unlearning.png",
    )
    return 0


def cmd_report(cfg: RunConfig, args) -> int:
    run_dir = Path(args.run_dir) if args.run_dir else cfg.out
    mem = load_memories(run_dir)
    rows = []
    evals = []
    for rec in mem.actions:
        res = rec.eval_outcome
        if res is not None:
            evals.append((rec.index, res))
        rows.append([rec.index, rec.kind.value,
                     res.recall[CURVE_K] if res else "", res.ndcg[CURVE_K] if res else ""])
    _tsv(rows, ["action", "kind", f"valid_recall@{CURVE_K}", f"valid_ndcg@{CURVE_K}"],
         run_dir / "summary.tsv")
    if evals:
        plots.eval_curve([i for i, _ in evals], [r.recall[CURVE_K] for _, r in evals],
                         [r.ndcg[CURVE_K] for _, r in evals], CURVE_K, run_dir / "eval_curve.png")
    scores = [e.score for e in mem.confidence]
    if scores:
        plots.confidence_hist(scores, run_dir / "confidence_hist.png")
    trace_path = run_dir / "traces.bin"
    if trace_path.exists():
        trace = LossTrace.load(trace_path)
        mask = np.zeros(len(trace), dtype=bool)
        ledger_path = run_dir / "noise_ledger.json"
        if ledger_path.exists():
            injected = NoiseLedger.from_json(json.loads(ledger_path.read_text())).pairs()
            mask = np.array([p in injected for p in zip(trace.users.tolist(), trace.items.tolist())])
        plots.loss_traces(trace.epochs, trace.values, mask, run_dir / "loss_traces.png")
    return 0


COMMANDS = {
    "ingest": (cmd_ingest, "load a user<TAB>item file (optionally densified) into the output dir"),
    "split": (cmd_split, "per-user 7:1:2 train/valid/test split"),
    "inject-noise": (cmd_inject_noise, "add uniformly drawn fake positives to the train split"),
    "train": (cmd_train, "plain BPR training on the (noisy) train split"),
    "run-agent": (cmd_run_agent, "full denoising agent run"),
    "eval": (cmd_eval, "Recall/NDCG of saved parameters on valid and test"),
    "export-rules": (cmd_export_rules, "write the rule memory of a run as a standalone outline"),
    "compile-rules": (cmd_compile_rules, "filter the train split with a rule outline and retrain"),
    "compare-unlearning": (cmd_compare_unlearning, "re-training vs LossEraser quality and wall time"),
    "report": (cmd_report, "summary table and figures for a run directory"),
}


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="ruledenoise", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", metavar="command")
    for name, (_, help_text) in COMMANDS.items():
        p = sub.add_parser(name, help=help_text, description=help_text)
        _common(p)
        if name == "eval":
            p.add_argument("--params", help="parameter file (default <output-dir>/params.npz)")
        if name in ("export-rules", "report"):
            p.add_argument("--run-dir", help="run directory (default <output-dir>)")
        if name == "export-rules":
            p.add_argument("--out", help="destination (default <run-dir>/exported_rules.txt)")
        if name in ("compile-rules", "compare-unlearning"):
            p.add_argument("--rules", help="rule outline file (default: config 'rules' or an 80th percentile rule)")
        if name == "compile-rules":
            p.add_argument("--traces", help="loss traces (default <output-dir>/traces.bin)")
        if name == "compare-unlearning":
            p.add_argument("--noisy-source", choices=("rules", "ledger"), default="rules",
                           help="flag interactions by rule verdicts or by the injected-noise ledger")
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if args.command is None:
            parser.print_help(sys.stderr)
            return 1
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                            format="%(levelname)s %(name)s: %(message)s")
        cfg = build_config(args)
    except SystemExit as exc:  # --help
        return 0 if exc.code in (None, 0) else 1
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return 1
    except ConfigurationError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    handler = COMMANDS[args.command][0]
    try:
        return handler(cfg, args)
    except (RuleDenoiseError, OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
