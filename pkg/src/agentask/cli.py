"""Command-line entry point.

Configuration comes from one JSON file with a section per stage. Values are
resolved in this order, later wins: built-in defaults, the config file,
``AGENTASK_<SECTION>__<KEY>`` environment variables, ``--set section.key=value``
flags, then the dedicated flags (``--seed``, ``--workers`` ...).
"""

from __future__ import annotations

import argparse
import dataclasses
import hashlib
import json
import logging
import os
import sys
from pathlib import Path
from typing import Any, Optional, Sequence

from . import policy as pol
from .audit import ConfigMismatchError, audit, report_rows, text_summary, write_csv
from .core import (
    AgentAskError,
    ContractError,
    RewardConfig,
    TraceParseError,
    TraceVersionError,
    TrainingAbort,
    read_traces,
    write_traces,
)
from .egrpo import METRIC_COLUMNS, TrainConfig, train_egrpo
from .env import ConfigError, Environment, EnvConfig
from .pipeline import SWEEP_COLUMNS, corpus_seeds, eval_seeds, run_sweep
from .rollout import REFERENCE_POLICIES, LearnedPolicy, NeverAsk, Policy, rollout_many
from .sft import SFTConfig, SFTDataError, build_corpus, read_corpus, train_sft, write_corpus

log = logging.getLogger("agentask")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_ABORT = 0, 1, 2, 3
ENV_PREFIX = "AGENTASK_"

DEFAULTS: dict[str, dict[str, Any]] = {
    "env": EnvConfig().to_dict(),
    "reward": dataclasses.asdict(RewardConfig()),
    "sft": dataclasses.asdict(SFTConfig()),
    "train": dataclasses.asdict(TrainConfig()),
    "corpus": {"episodes": 400},
    "simulate": {"episodes": 100},
    "sweep": {"lambdas": [0.2, 0.4, 0.8], "windows": [2, 3, 4, 5], "seeds": 20, "eval_episodes": 200},
    "gateway": {"endpoint": "", "model": "", "max_retries": 2, "prompt_file": "", "wire_log": ""},
}


class UsageError(AgentAskError):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # argparse would exit with status 2
        raise UsageError(f"{self.prog}: {message}")


# ---------------------------------------------------------------------------
# configuration


def _coerce(raw: str) -> Any:
    try:
        return json.loads(raw)
    except ValueError:
        return raw


def _apply(cfg: dict, section: str, key: str, value: Any, origin: str) -> None:
    if section not in DEFAULTS:
        raise ConfigError(f"{origin}: unknown config section {section!r}")
    if section != "env" and key not in DEFAULTS[section]:
        raise ConfigError(f"{origin}: unknown key {key!r} in section {section!r}")
    if section == "env" and key in ("preset", "fault_rate"):
        # A preset replaces the explicit probabilities rather than merging with them.
        cfg["env"].pop("injection_probabilities", None)
    cfg[section][key] = value


def load_config(path: Optional[str], overrides: Sequence[str] = (), environ=None) -> dict:
    environ = os.environ if environ is None else environ
    cfg = {k: dict(v) for k, v in DEFAULTS.items()}
    if path:
        try:
            doc = json.loads(Path(path).read_text(encoding="utf-8"))
        except (OSError, ValueError) as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from None
        if not isinstance(doc, dict):
            raise ConfigError(f"{path}: top level must be an object")
        for section, values in doc.items():
            if not isinstance(values, dict):
                raise ConfigError(f"{path}: section {section!r} must be an object")
            for key, value in values.items():
                _apply(cfg, section, key, value, path)
    for name, raw in sorted(environ.items()):
        if name.startswith(ENV_PREFIX) and "__" in name:
            section, key = name[len(ENV_PREFIX):].lower().split("__", 1)
            # env var names are upper case; recover keys such as train.G
            key = next((k for k in cfg.get(section, {}) if k.lower() == key), key)
            _apply(cfg, section, key, _coerce(raw), name)
    for item in overrides:
        if "=" not in item or "." not in item.split("=", 1)[0]:
            raise UsageError(f"--set expects section.key=value, got {item!r}")
        lhs, raw = item.split("=", 1)
        section, key = lhs.split(".", 1)
        _apply(cfg, section, key, _coerce(raw), "--set")
    return cfg


def config_hash(cfg: dict) -> str:
    return hashlib.sha256(json.dumps(cfg, sort_keys=True).encode()).hexdigest()[:16]


def _build(cls, values: dict):
    try:
        return cls(**values)
    except TypeError as exc:
        raise ConfigError(f"{cls.__name__}: {exc}") from None
    except (ValueError, ContractError) as exc:
        raise ConfigError(f"{cls.__name__}: {exc}") from None


def env_of(cfg: dict) -> Environment:
    return Environment(EnvConfig.from_dict(cfg["env"]))


def reward_of(cfg: dict) -> RewardConfig:
    return _build(RewardConfig, cfg["reward"])


def sft_of(cfg: dict) -> SFTConfig:
    return _build(SFTConfig, cfg["sft"])


def train_of(cfg: dict) -> TrainConfig:
    return _build(TrainConfig, cfg["train"])


def resolve_policy(name: str, args, cfg: dict) -> Policy:
    if args.gateway:
        from .gateway import GatewayClarifier, GatewayClient, load_system_prompt

        g = cfg["gateway"]
        client = GatewayClient.from_env(endpoint=g["endpoint"] or None, model=g["model"] or None,
                                        max_retries=int(g["max_retries"]), wire_log=g["wire_log"] or None)
        return GatewayClarifier(client, load_system_prompt(g["prompt_file"] or None))
    if name in REFERENCE_POLICIES:
        return REFERENCE_POLICIES[name]()
    if not Path(name).exists():
        raise UsageError(f"--policy {name!r} is neither a built-in policy ({', '.join(REFERENCE_POLICIES)}) nor a file")
    return LearnedPolicy(pol.load_checkpoint(name))


# ---------------------------------------------------------------------------
# commands


def _out(args) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def cmd_simulate(args, cfg) -> int:
    env, reward = env_of(cfg), reward_of(cfg)
    policy = resolve_policy(args.policy, args, cfg)
    n = args.episodes if args.episodes is not None else int(cfg["simulate"]["episodes"])
    workers = 1 if args.gateway else args.workers
    traces = rollout_many(env, policy, reward, eval_seeds(args.seed, n), workers)
    path = _out(args) / "traces.jsonl"
    write_traces(path, traces)
    print(f"wrote {len(traces)} traces to {path} (env config {env.config_hash()})")
    return EXIT_OK


def cmd_build_corpus(args, cfg) -> int:
    env, reward = env_of(cfg), reward_of(cfg)
    n = args.episodes if args.episodes is not None else int(cfg["corpus"]["episodes"])
    teacher = None
    if args.gateway:
        from .gateway import judge_teacher

        teacher = judge_teacher(resolve_policy("", args, cfg))
    corpus = build_corpus(env, corpus_seeds(args.seed, n), teacher=teacher, budget=reward.budget_b)
    path = _out(args) / "corpus.jsonl"
    write_corpus(path, corpus)
    print(f"wrote {len(corpus.examples)} examples to {path} ({corpus.skipped} skipped)")
    return EXIT_OK


def _meta(cfg: dict, stage: str, **extra) -> dict:
    return {"stage": stage, "config_hash": config_hash(cfg), "env_hash": EnvConfig.from_dict(cfg["env"]).config_hash(),
            **extra}


def cmd_sft(args, cfg) -> int:
    out = _out(args)
    corpus_path = args.corpus or str(out / "corpus.jsonl")
    corpus = read_corpus(corpus_path)
    env_hash = EnvConfig.from_dict(cfg["env"]).config_hash()
    if corpus.config_hash != env_hash:
        raise ConfigMismatchError(f"corpus was built under env config {corpus.config_hash}, current is {env_hash}")
    hyper = dataclasses.replace(sft_of(cfg), seed=args.seed)
    result = train_sft(corpus, hyper)
    path = out / "sft_policy.json"
    pol.save_checkpoint(result.params, path, _meta(cfg, "sft", best_epoch=result.best_epoch,
                                                   corpus=corpus.digest()))
    write_csv(out / "sft_history.csv", result.history, ("epoch", "holdout_loss"))
    print(f"wrote {path} (best epoch {result.best_epoch})")
    return EXIT_OK


def cmd_train(args, cfg) -> int:
    out = _out(args)
    env, reward = env_of(cfg), reward_of(cfg)
    tc = dataclasses.replace(train_of(cfg), seed=args.seed)
    if args.workers_given:
        tc = dataclasses.replace(tc, workers=args.workers)
    if args.init:
        init = pol.load_checkpoint(args.init)
    else:
        corpus = build_corpus(env, corpus_seeds(args.seed, int(cfg["corpus"]["episodes"])), budget=reward.budget_b)
        init = train_sft(corpus, dataclasses.replace(sft_of(cfg), seed=args.seed)).params
        pol.save_checkpoint(init, out / "sft_policy.json", _meta(cfg, "sft"))
    result = train_egrpo(env, init, reward, tc)
    rows = [dict(r, config_hash=config_hash(cfg)) for r in result.metrics]
    write_csv(out / "metrics.csv", rows, METRIC_COLUMNS + ("config_hash",))
    path = out / "policy.json"
    pol.save_checkpoint(result.params, path, _meta(cfg, "egrpo", baseline=result.baseline))
    last = result.metrics[-1] if result.metrics else {}
    print(f"wrote {path}; last iteration: " + ", ".join(f"{k}={v:.4g}" for k, v in last.items()
                                                         if isinstance(v, float)))
    return EXIT_OK


def _load_pair(args, cfg):
    traces = read_traces(args.traces)
    if not traces:
        raise SFTDataError(f"{args.traces} holds no traces")
    if args.baseline:
        baseline = read_traces(args.baseline)
    else:
        env, reward = env_of(cfg), reward_of(cfg)
        if traces[0].config_hash and traces[0].config_hash != env.config_hash():
            raise ConfigMismatchError("traces were recorded under a different env config; pass --baseline or --config")
        baseline = rollout_many(env, NeverAsk(), reward, [t.episode_seed for t in traces], args.workers)
    return traces, baseline


def cmd_eval(args, cfg) -> int:
    traces, baseline = _load_pair(args, cfg)
    rep = audit(traces, baseline)
    row = dict(rep.overhead.as_row())
    for t, frac in rep.taxonomy.fractions.items():
        row[f"share_{t.value}"] = frac
    row["config_hash"] = rep.overhead.config_hash
    cols = ["accuracy", "latency_pct", "extra_cost_pct", "asks_per_episode", "share_DG", "share_RD", "share_SC",
            "share_CG", "config_hash"]
    write_csv(_out(args) / "eval.csv", [row], cols)
    o = rep.overhead
    print(f"accuracy={o.accuracy:.4f} latency_pct={o.latency_pct:.2f} extra_cost_pct={o.extra_cost_pct:.3f} "
          f"asks_per_episode={o.asks_per_episode:.3f}")
    return EXIT_OK


def cmd_audit(args, cfg) -> int:
    traces = read_traces(args.traces)
    baseline = read_traces(args.baseline) if args.baseline else None
    rep = audit(traces, baseline)
    out = _out(args)
    rows = report_rows(rep)
    rows.append({"section": "run", "key": "config_hash", "value": config_hash(cfg)})
    write_csv(out / "audit.csv", rows, ("section", "key", "value"))
    summary = text_summary(rep)
    (out / "audit.txt").write_text(summary, encoding="utf-8")
    print(summary, end="")
    return EXIT_OK


def cmd_sweep(args, cfg) -> int:
    sw = cfg["sweep"]
    seeds = range(args.seed, args.seed + int(sw["seeds"]))
    tc = train_of(cfg)
    rows = run_sweep(EnvConfig.from_dict(cfg["env"]), reward_of(cfg), [float(x) for x in sw["lambdas"]],
                     [int(x) for x in sw["windows"]], seeds, sft_of(cfg), tc, int(cfg["corpus"]["episodes"]),
                     int(sw["eval_episodes"]), args.workers)
    h = config_hash(cfg)
    path = _out(args) / "sweep.csv"
    write_csv(path, [dict(r, config_hash=h) for r in rows], SWEEP_COLUMNS + ("config_hash",))
    for r in rows:
        print(", ".join(f"{k}={r[k]:.4g}" if isinstance(r[k], float) else f"{k}={r[k]}" for k in SWEEP_COLUMNS))
    return EXIT_OK


COMMANDS = {
    "simulate": cmd_simulate,
    "build-corpus": cmd_build_corpus,
    "sft": cmd_sft,
    "train": cmd_train,
    "eval": cmd_eval,
    "audit": cmd_audit,
    "sweep": cmd_sweep,
}


def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("--config", default=os.environ.get(ENV_PREFIX + "CONFIG"), help="JSON config file")
    common.add_argument("--seed", type=int, default=int(os.environ.get(ENV_PREFIX + "SEED", 0)))
    common.add_argument("--out", default=os.environ.get(ENV_PREFIX + "OUT", "."), help="output directory")
    common.add_argument("--workers", type=int, default=None, help="parallel rollout workers (default: CPU count)")
    common.add_argument("--set", action="append", default=[], metavar="SECTION.KEY=VALUE",
                        help="override one config key")
    common.add_argument("--gateway", action="store_true", help="use the remote clarifier endpoint")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = _Parser(prog="agentask", description="Edge-level clarification: simulate, train and audit.")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)
    p = sub.add_parser("simulate", parents=[common], help="roll out episodes and write traces")
    p.add_argument("--policy", default=os.environ.get(ENV_PREFIX + "POLICY", "never-ask"),
                   help="never-ask, always-ask, oracle, or a checkpoint path")
    p.add_argument("--episodes", type=int)
    p = sub.add_parser("build-corpus", parents=[common], help="teacher-label edges into an SFT corpus")
    p.add_argument("--episodes", type=int)
    p = sub.add_parser("sft", parents=[common], help="supervised training from a corpus")
    p.add_argument("--corpus")
    p = sub.add_parser("train", parents=[common], help="E-GRPO from an SFT checkpoint")
    p.add_argument("--init", help="SFT checkpoint; built from scratch when omitted")
    for name in ("eval", "audit"):
        p = sub.add_parser(name, parents=[common], help=f"{name} a trace file")
        p.add_argument("--traces", required=True)
        p.add_argument("--baseline", help="never-ask traces (eval regenerates them when omitted)")
    sub.add_parser("sweep", parents=[common], help="lambda_sw x H sensitivity grid")
    return parser


def run_command(argv: Optional[Sequence[str]] = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    try:
        args = build_parser().parse_args(argv)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    args.workers_given = args.workers is not None
    if args.workers is None:
        env_workers = os.environ.get(ENV_PREFIX + "WORKERS")
        args.workers = int(env_workers) if env_workers else (os.cpu_count() or 1)
    try:
        cfg = load_config(args.config, args.set)
        return COMMANDS[args.command](args, cfg)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except TrainingAbort as exc:
        print(f"training aborted: {exc}", file=sys.stderr)
        return EXIT_ABORT
    except (AgentAskError, OSError) as exc:
        kind = "data error"
        if isinstance(exc, (TraceParseError, TraceVersionError)):
            kind = "trace error"
        print(f"{kind}: {exc}", file=sys.stderr)
        return EXIT_DATA


def main() -> None:
    sys.exit(run_command())
