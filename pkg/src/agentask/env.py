"""Synthetic relay-pipeline environment with taxonomy fault injection.

A task is a chain of agents that each apply an integer affine step to a
tracked quantity. Every handoff carries a small JSON payload; faults corrupt
that payload in one of four ways (dropped field, aliased symbol, corrupted
value, capability mismatch). Unresolved faults always push the final answer
away from the ground truth, so terminal correctness is exactly checkable.
"""

from __future__ import annotations

import hashlib
import json
import re
from dataclasses import dataclass, field, replace
from typing import Mapping, Optional

import numpy as np

from .core import (
    ASK_TYPES,
    AgentAskError,
    Action,
    ContractError,
    EdgeState,
    ErrorType,
    HistoryItem,
    QuestionSpec,
    count_tokens,
)
from . import templates


class ConfigError(AgentAskError):
    pass


class LifecycleError(AgentAskError):
    pass


class UnknownEdgeError(AgentAskError):
    pass


MESSAGE_FIELDS = ("symbol", "value", "unit", "range", "op", "needs")
CAPABILITIES = ("compute", "code", "text", "plan", "search")
ROLES: dict[str, frozenset[str]] = {
    "Planner": frozenset({"plan", "text"}),
    "Mathematician": frozenset({"compute", "plan"}),
    "Calculator": frozenset({"compute"}),
    "Programmer": frozenset({"compute", "code"}),
    "Writer": frozenset({"text"}),
    "Analyst": frozenset({"compute", "text"}),
    "Researcher": frozenset({"search", "text"}),
    "Scientist": frozenset({"compute", "search"}),
}
SYMBOLS = ("T1", "T2", "T3", "n", "k", "w")
UNITS = ("m", "kg", "s", "usd", "cups")

# Edge-level fault mixes. Each sums to 1; scale by a fault rate for a plan.
TAXONOMY_S3 = {ErrorType.DG: 0.291, ErrorType.RD: 0.273, ErrorType.SC: 0.368, ErrorType.CG: 0.068}
TAXONOMY_POOLED = {ErrorType.DG: 0.368, ErrorType.RD: 0.207, ErrorType.SC: 0.309, ErrorType.CG: 0.116}
PRESETS = {"s3": TAXONOMY_S3, "pooled": TAXONOMY_POOLED}
DEFAULT_FAULT_RATE = 0.2

REPLY_TOKEN_BOUND = 10
_QUERY_RE = re.compile(r"^Track (\S+) ")


def scaled(mix: Mapping[ErrorType, float], rate: float) -> dict[ErrorType, float]:
    return {t: rate * p for t, p in mix.items()}


def _default_probs() -> dict[ErrorType, float]:
    return scaled(TAXONOMY_S3, DEFAULT_FAULT_RATE)


@dataclass(frozen=True)
class EnvConfig:
    chain_length_range: tuple[int, int] = (3, 8)
    injection_probabilities: Mapping[ErrorType, float] = field(default_factory=_default_probs)
    corruption_rule: tuple[int, ...] = (10, 100)
    history_bound: int = 4
    seed: int = 0

    def __post_init__(self):
        lo, hi = self.chain_length_range
        if lo < 2 or hi < lo:
            raise ConfigError(f"chain_length_range {self.chain_length_range} must satisfy 2 <= lo <= hi")
        probs = {ErrorType(k): float(v) for k, v in dict(self.injection_probabilities).items()}
        if ErrorType.NONE in probs:
            raise ConfigError("NONE is not an injectable fault")
        if any(p < 0 for p in probs.values()):
            raise ConfigError("injection probabilities must be nonnegative")
        if sum(probs.values()) > 1.0 + 1e-12:
            raise ConfigError(f"injection probabilities sum to {sum(probs.values()):.6f} > 1")
        if not self.corruption_rule or any(int(f) < 2 for f in self.corruption_rule):
            raise ConfigError("corruption factors must be integers >= 2")
        if self.history_bound < 0:
            raise ConfigError("history_bound must be nonnegative")
        object.__setattr__(self, "chain_length_range", (int(lo), int(hi)))
        object.__setattr__(self, "injection_probabilities", {t: probs.get(t, 0.0) for t in ASK_TYPES})
        object.__setattr__(self, "corruption_rule", tuple(int(f) for f in self.corruption_rule))

    def to_dict(self) -> dict:
        return {
            "chain_length_range": list(self.chain_length_range),
            "injection_probabilities": {t.value: p for t, p in self.injection_probabilities.items()},
            "corruption_rule": {"factors": list(self.corruption_rule)},
            "history_bound": self.history_bound,
            "seed": self.seed,
        }

    @classmethod
    def from_dict(cls, data: Mapping) -> "EnvConfig":
        known = {"chain_length_range", "injection_probabilities", "corruption_rule", "history_bound", "seed",
                 "preset", "fault_rate"}
        unknown = set(data) - known
        if unknown:
            raise ConfigError(f"unknown env config key {sorted(unknown)[0]!r}")
        kwargs: dict = {}
        if "chain_length_range" in data:
            kwargs["chain_length_range"] = tuple(data["chain_length_range"])
        if "preset" in data or "fault_rate" in data:
            if "injection_probabilities" in data:
                raise ConfigError("give either injection_probabilities or preset/fault_rate, not both")
            try:
                mix = PRESETS[data.get("preset", "s3")]
            except KeyError:
                raise ConfigError(f"unknown preset {data['preset']!r}") from None
            kwargs["injection_probabilities"] = scaled(mix, float(data.get("fault_rate", DEFAULT_FAULT_RATE)))
        elif "injection_probabilities" in data:
            try:
                kwargs["injection_probabilities"] = {ErrorType(k): v for k, v in data["injection_probabilities"].items()}
            except ValueError as exc:
                raise ConfigError(str(exc)) from None
        if "corruption_rule" in data:
            rule = data["corruption_rule"]
            kwargs["corruption_rule"] = tuple(rule["factors"] if isinstance(rule, Mapping) else rule)
        for key in ("history_bound", "seed"):
            if key in data:
                kwargs[key] = int(data[key])
        return cls(**kwargs)

    def config_hash(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True)
        return hashlib.sha256(blob.encode()).hexdigest()[:16]


@dataclass(frozen=True)
class Fault:
    error_type: ErrorType
    detail: str  # dropped field (DG), alias (RD), lacking capability (CG), "" for SC
    amount: int  # alias offset (RD) or corruption factor (SC); 0 otherwise


@dataclass(frozen=True)
class FaultPlan:
    faults: tuple[Optional[Fault], ...]
    injection_probabilities: Mapping[ErrorType, float]

    def indicator(self) -> tuple[int, ...]:
        return tuple(int(f is not None) for f in self.faults)


@dataclass(frozen=True)
class PipelineTask:
    task_id: str
    chain: tuple[str, ...]
    ground_truth: int
    payload_schema: tuple[str, ...]
    symbol: str
    unit: str
    start: int
    steps: tuple[tuple[int, int], ...]  # (mult, add) applied by chain[1:]
    needs: tuple[str, ...]  # capability requested on each edge
    clean_values: tuple[int, ...]  # value carried on each edge

    @property
    def n_edges(self) -> int:
        return len(self.chain) - 1


@dataclass(frozen=True)
class GoldLabel:
    error_type: ErrorType
    addressee: Optional[str] = None
    question: Optional[QuestionSpec] = None

    def to_action(self) -> Action:
        if self.error_type is ErrorType.NONE:
            return Action(gate=0)
        return Action(gate=1, error_type=self.error_type, addressee=self.addressee, question=self.question)


@dataclass(frozen=True)
class EpisodeState:
    task: PipelineTask
    plan: FaultPlan
    cursor: int
    residual_faults: tuple[int, ...]
    ask_history: tuple[int, ...]
    tokens_spent: int
    latency_spent: int
    budget: int
    history: tuple[HistoryItem, ...]
    seed: int
    history_bound: int

    @property
    def done(self) -> bool:
        return self.cursor >= self.task.n_edges


@dataclass(frozen=True)
class StepOutcome:
    reply: Optional[str]
    residual_flag: int
    next: EpisodeState
    latency_units: int
    cost_tokens: int


def parse_message(message: str) -> Optional[dict]:
    try:
        obj = json.loads(message)
    except ValueError:
        return None
    return obj if isinstance(obj, dict) else None


def query_symbol(query: str) -> Optional[str]:
    m = _QUERY_RE.match(query)
    return m.group(1) if m else None


def agent_role(agent_id: str) -> str:
    return agent_id.split(".", 1)[-1]


def capabilities(agent_id: str) -> frozenset[str]:
    return ROLES.get(agent_role(agent_id), frozenset())


def plausible_range(value: int) -> list[int]:
    return [value // 2, 2 * value + 1]


def _render_payload(payload: dict) -> str:
    return json.dumps(payload, separators=(", ", ": "))


def _clean_payload(task: PipelineTask, i: int) -> dict:
    mult, add = task.steps[i]
    v = task.clean_values[i]
    return {
        "symbol": task.symbol,
        "value": v,
        "unit": task.unit,
        "range": plausible_range(v),
        "op": f"x*{mult}+{add}",
        "needs": task.needs[i],
    }


def _faulted_payload(task: PipelineTask, i: int, fault: Optional[Fault]) -> dict:
    payload = _clean_payload(task, i)
    if fault is None:
        return payload
    kind = fault.error_type
    if kind is ErrorType.DG:
        del payload[fault.detail]
    elif kind is ErrorType.RD:
        payload["symbol"] = fault.detail
    elif kind is ErrorType.SC:
        payload["value"] = payload["value"] * fault.amount
    elif kind is ErrorType.CG:
        payload["needs"] = fault.detail
    return payload


class Environment:
    """Stateless driver; every episode state is an immutable value."""

    def __init__(self, config: Optional[EnvConfig] = None):
        self.config = config or EnvConfig()

    def config_hash(self) -> str:
        return self.config.config_hash()

    # -- lifecycle -----------------------------------------------------------

    def reset(self, seed: int, budget: int = 200) -> EpisodeState:
        cfg = self.config
        rng = np.random.default_rng(int(seed) % (1 << 64))
        lo, hi = cfg.chain_length_range
        length = int(rng.integers(lo, hi + 1))
        role_names = list(ROLES)
        roles = [role_names[int(j)] for j in rng.integers(0, len(role_names), size=length)]
        chain = tuple(f"A{i}.{r}" for i, r in enumerate(roles))
        symbol = SYMBOLS[int(rng.integers(len(SYMBOLS)))]
        unit = UNITS[int(rng.integers(len(UNITS)))]
        start = int(rng.integers(1, 10))
        steps, needs, values = [], [], []
        v = start
        for i in range(length - 1):
            values.append(v)
            mult, add = int(rng.integers(2, 4)), int(rng.integers(1, 10))
            steps.append((mult, add))
            caps = sorted(ROLES[roles[i + 1]])
            needs.append(caps[int(rng.integers(len(caps)))])
            v = mult * v + add
        task = PipelineTask(
            task_id=f"relay-{int(seed)}",
            chain=chain,
            ground_truth=v,
            payload_schema=MESSAGE_FIELDS,
            symbol=symbol,
            unit=unit,
            start=start,
            steps=tuple(steps),
            needs=tuple(needs),
            clean_values=tuple(values),
        )
        plan = self._draw_plan(task, rng)
        return EpisodeState(
            task=task,
            plan=plan,
            cursor=0,
            residual_faults=plan.indicator(),
            ask_history=(),
            tokens_spent=0,
            latency_spent=0,
            budget=int(budget),
            history=(),
            seed=int(seed),
            history_bound=cfg.history_bound,
        )

    def _draw_plan(self, task: PipelineTask, rng: np.random.Generator) -> FaultPlan:
        probs = self.config.injection_probabilities
        cum = np.cumsum([probs[t] for t in ASK_TYPES])
        faults: list[Optional[Fault]] = []
        for i in range(task.n_edges):
            u = rng.random()
            # Parameter draws happen for every edge so the stream does not
            # depend on which type was selected.
            field_ = MESSAGE_FIELDS[int(rng.integers(len(MESSAGE_FIELDS)))]
            aliases = [s for s in SYMBOLS if s != task.symbol]
            alias = aliases[int(rng.integers(len(aliases)))]
            offset = int(rng.integers(1, 5))
            factor = self.config.corruption_rule[int(rng.integers(len(self.config.corruption_rule)))]
            lacking = sorted(set(CAPABILITIES) - ROLES[agent_role(task.chain[i + 1])])
            missing_cap = lacking[int(rng.integers(len(lacking)))]
            k = int(np.searchsorted(cum, u, side="right"))
            if k >= len(ASK_TYPES):
                faults.append(None)
                continue
            kind = ASK_TYPES[k]
            if kind is ErrorType.DG:
                faults.append(Fault(kind, field_, 0))
            elif kind is ErrorType.RD:
                faults.append(Fault(kind, alias, offset))
            elif kind is ErrorType.SC:
                faults.append(Fault(kind, "", factor))
            else:
                faults.append(Fault(kind, missing_cap, 0))
        return FaultPlan(faults=tuple(faults), injection_probabilities=dict(probs))

    # -- edges ---------------------------------------------------------------

    def message_at(self, episode: EpisodeState, index: int) -> str:
        return _render_payload(_faulted_payload(episode.task, index, episode.plan.faults[index]))

    def query(self, task: PipelineTask) -> str:
        return (f"Track {task.symbol} in {task.unit}: start at {task.start}, "
                f"apply each agent's step along the relay, and report the final {task.symbol}.")

    def emit_edge(self, episode: EpisodeState) -> EdgeState:
        if episode.done:
            raise LifecycleError("episode already terminated")
        i = episode.cursor
        bound = episode.history_bound
        history = episode.history[-bound:] if bound else ()
        return EdgeState(
            query=self.query(episode.task),
            sender=episode.task.chain[i],
            receiver=episode.task.chain[i + 1],
            message=self.message_at(episode, i),
            history=history,
            step_index=i,
            budget_remaining=max(episode.budget - episode.tokens_spent, 0),
        )

    def gold_label(self, episode: EpisodeState, index: int) -> GoldLabel:
        fault = episode.plan.faults[index]
        if fault is None:
            return GoldLabel(ErrorType.NONE)
        chain = episode.task.chain
        addressee = chain[index + 1] if fault.error_type is ErrorType.CG else chain[index]
        state = self._state_at(episode, index)
        return GoldLabel(fault.error_type, addressee, templates.render(fault.error_type, 0, state))

    def _state_at(self, episode: EpisodeState, index: int) -> EdgeState:
        # Only the fields used for slot filling matter here.
        return EdgeState(query=self.query(episode.task), sender=episode.task.chain[index],
                         receiver=episode.task.chain[index + 1], message=self.message_at(episode, index),
                         history=(), step_index=index, budget_remaining=0)

    def teacher_label(self, episode: EpisodeState, edge_state: EdgeState) -> GoldLabel:
        i = edge_state.step_index
        task = episode.task
        if (
            i >= task.n_edges
            or edge_state.sender != task.chain[i]
            or edge_state.receiver != task.chain[i + 1]
            or edge_state.message != self.message_at(episode, i)
            or edge_state.query != self.query(task)
        ):
            raise UnknownEdgeError("edge state was not produced by this episode")
        return self.gold_label(episode, i)

    def _reply(self, episode: EpisodeState, index: int, matched: bool) -> str:
        fault = episode.plan.faults[index]
        task = episode.task
        if fault is None:
            return "Confirmed, the handoff is complete."
        if not matched:
            return "No further information available."
        clean = _clean_payload(task, index)
        kind = fault.error_type
        if kind is ErrorType.DG:
            return f"{fault.detail}: {json.dumps(clean[fault.detail])}"
        if kind is ErrorType.RD:
            return f"{fault.detail} refers to {task.symbol}."
        if kind is ErrorType.SC:
            return f"Corrected {task.symbol} = {clean['value']} {task.unit}."
        capable = next((r for r, caps in ROLES.items() if fault.detail in caps), "a capable role")
        return f"Rerouted {fault.detail} to {capable}."

    def apply_action(self, episode: EpisodeState, action: Action) -> StepOutcome:
        if episode.done:
            raise LifecycleError("episode already terminated")
        i = episode.cursor
        sender, receiver = episode.task.chain[i], episode.task.chain[i + 1]
        fault = episode.plan.faults[i]
        residual = list(episode.residual_faults)
        reply: Optional[str] = None
        latency, cost = 1, 0
        if action.gate == 1:
            if action.addressee not in (sender, receiver):
                raise ContractError(f"addressee {action.addressee!r} is neither sender nor receiver")
            matched = False
            if fault is not None:
                gold_addr = receiver if fault.error_type is ErrorType.CG else sender
                matched = action.error_type is fault.error_type and action.addressee == gold_addr
                if matched:
                    residual[i] = 0
            reply = self._reply(episode, i, matched)
            latency += 1
            cost = action.question.token_count + count_tokens(reply)
        item = HistoryItem(sender=sender, receiver=receiver, message=self.message_at(episode, i),
                           gate=action.gate, reply=reply)
        bound = max(episode.history_bound, 1)
        nxt = replace(
            episode,
            cursor=i + 1,
            residual_faults=tuple(residual),
            ask_history=(episode.ask_history + (action.gate,))[-16:],
            tokens_spent=episode.tokens_spent + cost,
            latency_spent=episode.latency_spent + latency,
            history=(episode.history + (item,))[-bound:],
        )
        return StepOutcome(reply=reply, residual_flag=residual[i], next=nxt, latency_units=latency, cost_tokens=cost)

    # -- scoring -------------------------------------------------------------

    def final_answer(self, episode: EpisodeState) -> int:
        """Run the relay with the current residual faults applied.

        Every unresolved fault strictly increases the value a receiver works
        with, and every step is strictly increasing, so the answer differs
        from the ground truth iff some fault is left unresolved.
        """
        task = episode.task
        v = task.start
        for i, (mult, add) in enumerate(task.steps):
            fault = episode.plan.faults[i]
            live = fault is not None and episode.residual_faults[i]
            bump = 0
            if live:
                kind = fault.error_type
                if kind is ErrorType.DG:
                    v = v + 1  # receiver guesses the missing detail
                elif kind is ErrorType.RD:
                    v = v + fault.amount  # alias bound to a different quantity
                elif kind is ErrorType.SC:
                    v = v * fault.amount
                else:
                    bump = 1  # wrong role improvises the step
            v = mult * v + add + bump
        return v

    def terminal_score(self, episode: EpisodeState) -> int:
        if not episode.done:
            raise LifecycleError("terminal_score called before the last edge")
        return int(self.final_answer(episode) == episode.task.ground_truth)
