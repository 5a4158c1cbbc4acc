"""Episode rollouts under reference or learned policies, and trace replay."""

from __future__ import annotations

from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from typing import Callable, Iterable, Optional, Sequence

import numpy as np

from . import policy as pol
from . import templates
from .core import (
    Action,
    ContractError,
    EdgeRecord,
    EdgeState,
    ErrorType,
    RewardConfig,
    Rewards,
    Trajectory,
    action_to_clarifier_json,
    validate_schema,
)
from .env import Environment, EpisodeState, StepOutcome
from .rewards import edge_reward, effectiveness_reward, format_reward, parsimony_reward, terminal_reward, update_counter


class Policy:
    """Decides one action per edge. Subclasses see the episode for oracle access."""

    name = "policy"

    def act(self, env: Environment, episode: EpisodeState, state: EdgeState, rng: np.random.Generator) -> Action:
        raise NotImplementedError


class NeverAsk(Policy):
    name = "never-ask"

    def act(self, env, episode, state, rng):
        return Action(gate=0)


class OracleAsk(Policy):
    """Asks exactly the teacher's question on faulted edges."""

    name = "oracle"

    def act(self, env, episode, state, rng):
        return env.teacher_label(episode, state).to_action()


class AlwaysAsk(Policy):
    """Asks on every edge: the teacher's question where a fault exists, a
    generic data-gap check to the sender elsewhere."""

    name = "always-ask"

    def act(self, env, episode, state, rng):
        label = env.teacher_label(episode, state)
        if label.error_type is not ErrorType.NONE:
            return label.to_action()
        return Action(gate=1, error_type=ErrorType.DG, addressee=state.sender,
                      question=templates.render(ErrorType.DG, 0, state))


@dataclass
class LearnedPolicy(Policy):
    params: pol.PolicyParams
    greedy: bool = True
    name: str = "checkpoint"

    def act(self, env, episode, state, rng):
        if self.greedy:
            return pol.greedy_action(self.params, state)[0]
        return pol.sample_action(self.params, state, rng)[0]


REFERENCE_POLICIES: dict[str, Callable[[], Policy]] = {
    "never-ask": NeverAsk,
    "always-ask": AlwaysAsk,
    "oracle": OracleAsk,
}


def format_flag(state: EdgeState, action: Action, cap: int) -> int:
    return validate_schema(action_to_clarifier_json(action, state), cap)


@dataclass(frozen=True)
class ScoredStep:
    outcome: StepOutcome
    counter: int
    window: tuple[int, ...]
    rewards: Rewards


def score_action(env: Environment, episode: EpisodeState, state: EdgeState, action: Action,
                 cfg: RewardConfig, window: Sequence[int]) -> ScoredStep:
    """Execute ``action`` on a branch of ``episode`` and compute its edge reward."""
    out = env.apply_action(episode, action)
    c, new_window = update_counter(window, cfg.window_h, action.gate)
    r_eff = effectiveness_reward(action.gate, out.residual_flag)
    r_par = parsimony_reward(c, cfg.lambda_sw)
    r_fmt = format_reward(format_flag(state, action, cfg.token_cap), cfg.alpha_fmt)
    r_edge = edge_reward(r_eff, r_par, r_fmt, cfg.alpha_eff)
    return ScoredStep(out, c, new_window, Rewards(float(r_eff), float(r_par), float(r_fmt), float(r_edge)))


def enforce_budget(state: EdgeState, action: Action) -> Action:
    if action.gate == 1 and pol.budget_blocks_ask(state):
        return Action(gate=0)
    return action


def run_episode(env: Environment, policy: Policy, cfg: RewardConfig, seed: int,
                rng: Optional[np.random.Generator] = None, actions: Optional[Sequence[Action]] = None) -> Trajectory:
    """Roll out one episode. With ``actions`` given, replays them instead of
    querying the policy."""
    rng = rng if rng is not None else np.random.default_rng(seed)
    episode = env.reset(seed, budget=cfg.budget_b)
    window: tuple[int, ...] = ()
    records = []
    while not episode.done:
        state = env.emit_edge(episode)
        if actions is not None:
            action = actions[state.step_index]
        else:
            action = enforce_budget(state, policy.act(env, episode, state, rng))
        gold = env.gold_label(episode, state.step_index).error_type
        step = score_action(env, episode, state, action, cfg, window)
        window = step.window
        records.append(EdgeRecord(
            state=state,
            action=action,
            reply=step.outcome.reply,
            residual_flag=step.outcome.residual_flag,
            counter=step.counter,
            rewards=step.rewards,
            latency_units=step.outcome.latency_units,
            cost_tokens=step.outcome.cost_tokens,
            gold_type=gold,
        ))
        episode = step.outcome.next
    if actions is not None and len(actions) != len(records):
        raise ContractError(f"replay has {len(actions)} actions for {len(records)} edges")
    s = env.terminal_score(episode)
    return Trajectory(records=tuple(records), terminal_score=s, terminal_reward=float(terminal_reward(s, cfg.alpha_ans)),
                      episode_seed=seed, config_hash=env.config_hash())


def replay(env: Environment, trajectory: Trajectory, cfg: RewardConfig) -> Trajectory:
    """Re-simulate a recorded trajectory from its seed and recorded actions."""
    if trajectory.config_hash and trajectory.config_hash != env.config_hash():
        raise ContractError("trace was recorded under a different environment config")
    return run_episode(env, NeverAsk(), cfg, trajectory.episode_seed,
                       actions=[r.action for r in trajectory.records])


def _rollout_chunk(args):
    env, policy, cfg, seeds = args
    return [run_episode(env, policy, cfg, s) for s in seeds]


def rollout_many(env: Environment, policy: Policy, cfg: RewardConfig, seeds: Iterable[int],
                 workers: int = 1) -> list[Trajectory]:
    """Roll out one episode per seed; output order follows ``seeds``."""
    seeds = list(seeds)
    if workers <= 1 or len(seeds) < 2 * workers:
        return [run_episode(env, policy, cfg, s) for s in seeds]
    chunks = [seeds[i::workers] for i in range(workers)]
    with ProcessPoolExecutor(max_workers=workers) as pool:
        parts = list(pool.map(_rollout_chunk, [(env, policy, cfg, c) for c in chunks]))
    by_seed: dict[int, list[Trajectory]] = {}
    for part in parts:
        for traj in part:
            by_seed.setdefault(traj.episode_seed, []).append(traj)
    return [by_seed[s].pop(0) for s in seeds]
