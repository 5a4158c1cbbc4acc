"""Edge-level group-relative policy optimisation.

Each visited edge gets G candidate actions from the frozen old policy. Every
candidate is executed on a discarded branch of the episode and scored by its
edge reward; the group-normalised rewards are the local advantages. The
first candidate is the one actually executed, and it alone receives the
terminal credit ``R - b`` once the episode ends.
"""

from __future__ import annotations

import logging
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from . import kernels
from . import policy as pol
from .audit import overhead_metrics, write_csv
from .core import Action, EdgeRecord, EdgeState, RewardConfig, TrainingAbort, Trajectory
from .env import Environment, EnvConfig
from .rewards import (
    edge_reward,
    effectiveness_reward,
    format_reward,
    parsimony_reward,
    terminal_reward,
    update_counter,
)
from .rollout import NeverAsk, run_episode, score_action

__all__ = [
    "AdvantageRecord", "EmaBaseline", "GroupSample", "SurrogateBatch", "TrainConfig", "TrainResult", "TrainingAbort",
    "edge_reward", "effectiveness_reward", "format_reward", "global_advantages", "local_advantages",
    "parsimony_reward", "surrogate_and_grad", "surrogate_objective", "terminal_reward", "train_egrpo", "update_counter",
]

log = logging.getLogger(__name__)

DELTA = 1e-8
METRIC_COLUMNS = ("iteration", "mean_s", "asks_per_episode", "latency_pct", "extra_cost_pct", "kl_mean", "objective",
                  "mean_latency_units", "mean_cost_tokens")


# ---------------------------------------------------------------------------
# advantages


def local_advantages(group_rewards: Sequence[float], delta: float = DELTA) -> np.ndarray:
    r = np.asarray(group_rewards, dtype=np.float64)
    if r.shape[0] < 2:
        raise ValueError("a group needs at least two candidates")
    centred = r - r.mean()
    std = r.std()
    if std == 0.0:
        return np.zeros_like(r)
    return centred / (std + delta)


def global_advantages(R: float, b: float, visited_edges: int, weights: Optional[Sequence[float]] = None) -> np.ndarray:
    w = np.ones(visited_edges) if weights is None else np.asarray(weights, dtype=np.float64)
    if w.shape[0] != visited_edges or np.any(w < 0):
        raise ValueError("weights must be nonnegative, one per visited edge")
    return w * (R - b)


@dataclass
class EmaBaseline:
    decay: float = 0.9
    value: float = 0.0

    def update(self, R: float) -> float:
        self.value = self.decay * self.value + (1.0 - self.decay) * R
        return self.value


# ---------------------------------------------------------------------------
# surrogate


@dataclass(frozen=True)
class GroupSample:
    edge_state: EdgeState
    candidates: tuple[tuple[Action, float, float], ...]  # (action, log_prob_old, r_edge)

    def __post_init__(self):
        if len(self.candidates) < 2:
            raise ValueError("G must be at least 2")


@dataclass(frozen=True)
class AdvantageRecord:
    a_local: float
    a_global: Optional[float]
    rho: float
    kl_ref: float


@dataclass(frozen=True)
class SurrogateBatch:
    """Flat batch: ``rows`` index into ``X``; ``a_glob`` is NaN where absent."""

    X: np.ndarray
    rows: np.ndarray
    t: np.ndarray
    v: np.ndarray
    k: np.ndarray
    a_loc: np.ndarray
    a_glob: np.ndarray

    def __len__(self):
        return self.rows.shape[0]

    @classmethod
    def from_entries(cls, entries: Sequence[tuple[EdgeState, Action, float, Optional[float]]]) -> "SurrogateBatch":
        index: dict[EdgeState, int] = {}
        states: list[EdgeState] = []
        rows, t, v, k, al, ag = [], [], [], [], [], []
        for state, action, a_loc, a_glob in entries:
            if state not in index:
                index[state] = len(states)
                states.append(state)
            ti, vi, ki = pol.encode_action(state, action)
            rows.append(index[state])
            t.append(ti)
            v.append(vi)
            k.append(ki)
            al.append(a_loc)
            ag.append(np.nan if a_glob is None else a_glob)
        return cls(pol.featurize_many(states), np.array(rows, dtype=np.int64), np.array(t, dtype=np.int64),
                   np.array(v, dtype=np.int64), np.array(k, dtype=np.int64), np.array(al, dtype=np.float64),
                   np.array(ag, dtype=np.float64))


def _entry_logprobs(params: pol.PolicyParams, batch: SurrogateBatch) -> np.ndarray:
    lt, la, lq = pol.log_heads(params, batch.X)
    r, t = batch.rows, batch.t
    ask = t != kernels.NONE_IDX
    ta = np.where(ask, t, 0)
    lp = lt[r, t]
    return np.where(ask, lp + la[r, ta, batch.v] + lq[r, ta, batch.k], lp)


def _clipped(rho: np.ndarray, A: np.ndarray, eps: float) -> tuple[np.ndarray, np.ndarray]:
    """Per-entry min(rho A, clip(rho) A) and the mask where the unclipped branch is active."""
    raw = rho * A
    clip = np.clip(rho, 1.0 - eps, 1.0 + eps) * A
    return np.minimum(raw, clip), raw <= clip


def _check_batch(batch, eps: float) -> SurrogateBatch:
    if not isinstance(batch, SurrogateBatch):
        batch = SurrogateBatch.from_entries(batch)
    if len(batch) == 0:
        raise ValueError("empty surrogate batch")
    if not 0.0 < eps < 1.0:
        raise ValueError("eps must lie in (0, 1)")
    return batch


def _surrogate_terms(params, params_old, batch: SurrogateBatch, eps: float, lambda_r: float):
    """Per-entry clipped terms, the score weights of their gradient, rho, and the A_glob mask."""
    rho = np.exp(_entry_logprobs(params, batch) - _entry_logprobs(params_old, batch))
    assert np.all(rho > 0), "probability ratio must be positive"
    per_entry, on_loc = _clipped(rho, batch.a_loc, eps)
    w = rho * np.where(on_loc, batch.a_loc, 0.0)
    has_glob = ~np.isnan(batch.a_glob)
    if has_glob.any():
        ag = np.where(has_glob, batch.a_glob, 0.0)
        term_glob, on_glob = _clipped(rho, ag, eps)
        per_entry = per_entry + lambda_r * np.where(has_glob, term_glob, 0.0)
        w = w + lambda_r * rho * np.where(has_glob & on_glob, ag, 0.0)
    return per_entry, w, rho, has_glob


def surrogate_objective(params: pol.PolicyParams, params_old: pol.PolicyParams, params_ref: pol.PolicyParams,
                        batch: SurrogateBatch | Sequence, eps: float = 0.2, lambda_r: float = 0.5,
                        beta: float = 0.02) -> float:
    """Value of the objective maximised by ``surrogate_and_grad``, without the gradient."""
    batch = _check_batch(batch, eps)
    per_entry, _, _, _ = _surrogate_terms(params, params_old, batch, eps, lambda_r)
    kl_entries = pol.kl_divergence(params, params_ref, batch.X)[batch.rows]
    return float(per_entry.mean() - beta * kl_entries.mean())


def surrogate_and_grad(params: pol.PolicyParams, params_old: pol.PolicyParams, params_ref: pol.PolicyParams,
                       batch: SurrogateBatch | Sequence, eps: float = 0.2, lambda_r: float = 0.5,
                       beta: float = 0.02) -> tuple[float, np.ndarray, list[AdvantageRecord]]:
    """Clipped surrogate with shared ratios, minus beta times the mean exact KL to the reference.

    Returns the objective, its gradient with respect to ``params.theta`` and
    one AdvantageRecord per entry.
    """
    batch = _check_batch(batch, eps)
    n = len(batch)
    per_entry, w, rho, has_glob = _surrogate_terms(params, params_old, batch, eps, lambda_r)
    kl_entries = pol.kl_divergence(params, params_ref, batch.X)[batch.rows]
    objective = float(per_entry.mean() - beta * kl_entries.mean())

    grad = kernels.score_grad(params.theta, batch.X, batch.rows, batch.t, batch.v, batch.k, w / n,
                              params.dim, params.n_templates)
    if beta != 0.0:
        row_weights = np.bincount(batch.rows, minlength=batch.X.shape[0]) * (beta / n)
        grad = grad - pol.kl_grad(params, params_ref, batch.X, row_weights)
    records = [AdvantageRecord(float(batch.a_loc[i]), None if not has_glob[i] else float(batch.a_glob[i]),
                               float(rho[i]), float(max(kl_entries[i], 0.0))) for i in range(n)]
    return objective, grad, records


# ---------------------------------------------------------------------------
# training


@dataclass(frozen=True)
class TrainConfig:
    G: int = 8
    iterations: int = 200
    lr: float = 0.05
    seed: int = 0
    episodes_per_iter: int = 8
    inner_steps: int = 2
    ema_decay: float = 0.9
    kl_ceiling: float = 5.0
    workers: int = 1

    def __post_init__(self):
        if self.G < 2:
            raise ValueError("G must be at least 2")
        if self.iterations < 0 or self.episodes_per_iter < 1 or self.inner_steps < 1:
            raise ValueError("iterations, episodes_per_iter and inner_steps must be positive")

    def to_dict(self) -> dict:
        return {k: getattr(self, k) for k in self.__dataclass_fields__}


@dataclass
class TrainResult:
    params: pol.PolicyParams
    metrics: list[dict] = field(default_factory=list)
    baseline: float = 0.0

    def write_metrics(self, path) -> None:
        write_csv(path, self.metrics, METRIC_COLUMNS)


@dataclass
class _EpisodeRollout:
    trajectory: Trajectory
    entries: list  # (state, action, a_loc); the first G-block member of each edge was executed
    executed: list[int]  # entry index of each executed candidate


def _collect_episode(env: Environment, params_old: pol.PolicyParams, cfg: RewardConfig, G: int,
                     seed: int, rng_key: tuple[int, ...]) -> _EpisodeRollout:
    rng = np.random.default_rng(list(rng_key))
    episode = env.reset(seed, budget=cfg.budget_b)
    window: tuple[int, ...] = ()
    records, entries, executed = [], [], []
    while not episode.done:
        state = env.emit_edge(episode)
        gold = env.gold_label(episode, state.step_index).error_type
        if pol.budget_blocks_ask(state):
            # The hard gate leaves no choice, so the edge carries no gradient.
            step = score_action(env, episode, state, Action(gate=0), cfg, window)
            chosen_action = Action(gate=0)
        else:
            lt, la, lq = pol.log_heads(params_old, pol.featurize(state))
            ts, vs, ks, _lp = pol.sample_group(lt[0], la[0], lq[0], rng, G)
            scored: dict[tuple[int, int, int], tuple] = {}
            steps, actions = [], []
            for key in zip(ts.tolist(), vs.tolist(), ks.tolist()):
                if key not in scored:  # identical candidates share one branch
                    action = pol.decode_action(state, *key)
                    scored[key] = (action, score_action(env, episode, state, action, cfg, window))
                action, step = scored[key]
                actions.append(action)
                steps.append(step)
            adv = local_advantages([s.rewards.r_edge for s in steps])
            executed.append(len(entries))
            entries.extend((state, a, float(x)) for a, x in zip(actions, adv))
            step, chosen_action = steps[0], actions[0]
        records.append(EdgeRecord(state=state, action=chosen_action, reply=step.outcome.reply,
                                  residual_flag=step.outcome.residual_flag, counter=step.counter,
                                  rewards=step.rewards, latency_units=step.outcome.latency_units,
                                  cost_tokens=step.outcome.cost_tokens, gold_type=gold))
        window = step.window
        episode = step.outcome.next
    s = env.terminal_score(episode)
    traj = Trajectory(tuple(records), s, float(terminal_reward(s, cfg.alpha_ans)), seed, env.config_hash())
    return _EpisodeRollout(traj, entries, executed)


def _collect_chunk(args):
    env, params_old, cfg, G, jobs = args
    return [_collect_episode(env, params_old, cfg, G, seed, key) for seed, key in jobs]


def episode_seed(train_seed: int, iteration: int, e: int) -> int:
    return int(np.random.SeedSequence([train_seed, iteration, e]).generate_state(1)[0])


def train_egrpo(env_config: EnvConfig | Environment, init_params: pol.PolicyParams,
                reward_config: RewardConfig = RewardConfig(), train_config: TrainConfig = TrainConfig(),
                metrics_path=None) -> TrainResult:
    """Run E-GRPO from ``init_params``, which also serves as the KL reference."""
    env = env_config if isinstance(env_config, Environment) else Environment(env_config)
    tc, cfg = train_config, reward_config
    ref = init_params
    params = init_params
    baseline = EmaBaseline(tc.ema_decay)
    metrics: list[dict] = []
    pool = ProcessPoolExecutor(max_workers=tc.workers) if tc.workers > 1 else None
    try:
        for it in range(1, tc.iterations + 1):
            old = params
            jobs = [(episode_seed(tc.seed, it, e), (tc.seed, it, e))
                    for e in range(tc.episodes_per_iter)]
            if pool is None:
                rollouts = [_collect_episode(env, old, cfg, tc.G, s, key) for s, key in jobs]
            else:
                chunks = [jobs[i::tc.workers] for i in range(tc.workers)]
                parts = list(pool.map(_collect_chunk, [(env, old, cfg, tc.G, c) for c in chunks]))
                rollouts = [None] * len(jobs)
                for w_i, part in enumerate(parts):
                    for j, ro in enumerate(part):
                        rollouts[w_i + j * tc.workers] = ro

            entries = []
            for ro in rollouts:  # fixed episode order keeps the baseline deterministic
                R = ro.trajectory.terminal_reward
                a_glob = R - baseline.value
                baseline.update(R)
                marks = set(ro.executed)
                for i, (state, action, a_loc) in enumerate(ro.entries):
                    entries.append((state, action, a_loc, a_glob if i in marks else None))

            objective, kl_mean = float("nan"), 0.0
            if entries:
                batch = SurrogateBatch.from_entries(entries)
                theta = params.theta
                for _ in range(tc.inner_steps):
                    objective, grad, _recs = surrogate_and_grad(params, old, ref, batch, cfg.clip_eps, cfg.lambda_r, cfg.beta_kl)
                    if not (math.isfinite(objective) and np.all(np.isfinite(grad))):
                        raise TrainingAbort(f"iteration {it}: non-finite surrogate (objective={objective})")
                    theta = theta + tc.lr * grad
                    params = params.with_theta(theta)
                kl_mean = float(pol.kl_divergence(params, ref, batch.X).mean())
                if not math.isfinite(kl_mean) or kl_mean > tc.kl_ceiling:
                    raise TrainingAbort(f"iteration {it}: KL to reference {kl_mean:.4g} exceeds ceiling {tc.kl_ceiling}")

            trajs = [ro.trajectory for ro in rollouts]
            base = [run_episode(env, NeverAsk(), cfg, s) for s, _ in jobs]
            om = overhead_metrics(trajs, base)
            row = {
                "iteration": it,
                "mean_s": om.accuracy,
                "asks_per_episode": om.asks_per_episode,
                "latency_pct": om.latency_pct,
                "extra_cost_pct": om.extra_cost_pct,
                "kl_mean": kl_mean,
                "objective": objective,
                "mean_latency_units": float(np.mean([sum(r.latency_units for r in t.records) for t in trajs])),
                "mean_cost_tokens": float(np.mean([sum(r.cost_tokens for r in t.records) for t in trajs])),
            }
            metrics.append(row)
            log.debug("iter %d %s", it, row)
    finally:
        if pool is not None:
            pool.shutdown()
    result = TrainResult(params, metrics, baseline.value)
    if metrics_path is not None:
        result.write_metrics(metrics_path)
    return result
