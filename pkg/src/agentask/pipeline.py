"""Stage A to C in one call, evaluation against the never-ask origin, and parameter sweeps."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass
from typing import Iterable, Optional, Sequence

import numpy as np

from . import policy as pol
from .audit import OverheadMetrics, overhead_metrics
from .core import RewardConfig
from .egrpo import TrainConfig, TrainResult, train_egrpo
from .env import Environment, EnvConfig
from .rollout import LearnedPolicy, NeverAsk, Policy, rollout_many
from .sft import Corpus, SFTConfig, build_corpus, train_sft

# Disjoint seed blocks per run seed, so corpus and evaluation episodes never overlap.
CORPUS_BLOCK = 1_000_000
EVAL_OFFSET = 500_000


def corpus_seeds(run_seed: int, episodes: int) -> range:
    start = run_seed * CORPUS_BLOCK
    return range(start, start + episodes)


def eval_seeds(run_seed: int, episodes: int) -> range:
    start = run_seed * CORPUS_BLOCK + EVAL_OFFSET
    return range(start, start + episodes)


@dataclass
class PipelineResult:
    corpus: Corpus
    sft_params: pol.PolicyParams
    train: Optional[TrainResult]

    @property
    def params(self) -> pol.PolicyParams:
        return self.train.params if self.train is not None else self.sft_params


def run_pipeline(env: Environment, reward: RewardConfig = RewardConfig(), sft: SFTConfig = SFTConfig(),
                 train: Optional[TrainConfig] = TrainConfig(), corpus_episodes: int = 400,
                 run_seed: int = 0) -> PipelineResult:
    corpus = build_corpus(env, corpus_seeds(run_seed, corpus_episodes), budget=reward.budget_b)
    sft_params = train_sft(corpus, dataclasses.replace(sft, seed=run_seed)).params
    result = None
    if train is not None:
        result = train_egrpo(env, sft_params, reward, dataclasses.replace(train, seed=run_seed))
    return PipelineResult(corpus, sft_params, result)


def evaluate_policy(env: Environment, policy: Policy, reward: RewardConfig, seeds: Iterable[int],
                    workers: int = 1) -> OverheadMetrics:
    seeds = list(seeds)
    traces = rollout_many(env, policy, reward, seeds, workers)
    baseline = rollout_many(env, NeverAsk(), reward, seeds, workers)
    return overhead_metrics(traces, baseline)


SWEEP_COLUMNS = ("lambda_sw", "H", "accuracy", "latency_pct", "extra_cost_pct", "asks_per_episode")


def run_sweep(env_config: EnvConfig, reward: RewardConfig = RewardConfig(),
              lambdas: Sequence[float] = (0.2, 0.4, 0.8), windows: Sequence[int] = (2, 3, 4, 5),
              seeds: Sequence[int] = range(20), sft: SFTConfig = SFTConfig(), train: TrainConfig = TrainConfig(),
              corpus_episodes: int = 400, eval_episodes: int = 200, workers: int = 1,
              cells: Optional[Sequence[tuple[float, int]]] = None) -> list[dict]:
    """One row per (lambda_sw, H) cell, each metric averaged over ``seeds``.

    ``cells`` restricts the grid to the given pairs; by default it is the full
    product of ``lambdas`` and ``windows``. The SFT stage does not depend on
    the swept coefficients, so each seed trains it once and every cell starts
    E-GRPO from that snapshot.
    """
    env = Environment(env_config)
    cells = [(lam, h) for lam in lambdas for h in windows] if cells is None else [tuple(c) for c in cells]
    acc = {c: [] for c in cells}
    for s in seeds:
        base = run_pipeline(env, reward, sft, None, corpus_episodes, s)
        for lam, h in cells:
            cfg = dataclasses.replace(reward, lambda_sw=lam, window_h=h)
            res = train_egrpo(env, base.sft_params, cfg, dataclasses.replace(train, seed=s))
            acc[(lam, h)].append(evaluate_policy(env, LearnedPolicy(res.params), cfg, eval_seeds(s, eval_episodes),
                                                 workers))
    rows = []
    for lam, h in cells:
        ms = acc[(lam, h)]
        rows.append({
            "lambda_sw": lam,
            "H": h,
            "accuracy": float(np.mean([m.accuracy for m in ms])),
            "latency_pct": float(np.mean([m.latency_pct for m in ms])),
            "extra_cost_pct": float(np.mean([m.extra_cost_pct for m in ms])),
            "asks_per_episode": float(np.mean([m.asks_per_episode for m in ms])),
        })
    return rows
