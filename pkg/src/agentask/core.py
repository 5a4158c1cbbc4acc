"""Domain types, the clarifier output schema check, and the trace codec."""

from __future__ import annotations

import enum
import json
from dataclasses import dataclass
from typing import Any, Iterable, Optional

TRACE_VERSION = 1
TRACE_KIND = "agentask-trace"
DEFAULT_TOKEN_CAP = 40


class AgentAskError(Exception):
    """Base class for all package errors."""


class ContractError(AgentAskError):
    """An operation was called with arguments that violate its contract."""


class TraceParseError(AgentAskError):
    def __init__(self, lineno: int, message: str):
        super().__init__(f"line {lineno}: {message}")
        self.lineno = lineno


class TrainingAbort(AgentAskError):
    """Training diverged or left its trust region."""


class TraceVersionError(AgentAskError):
    pass


class ErrorType(str, enum.Enum):
    DG = "DG"
    RD = "RD"
    SC = "SC"
    CG = "CG"
    NONE = "NONE"


# Fixed index order used by the policy heads.
TYPE_ORDER: tuple[ErrorType, ...] = (ErrorType.DG, ErrorType.RD, ErrorType.SC, ErrorType.CG, ErrorType.NONE)
ASK_TYPES: tuple[ErrorType, ...] = TYPE_ORDER[:4]
TYPE_INDEX = {t: i for i, t in enumerate(TYPE_ORDER)}
NONE_INDEX = TYPE_INDEX[ErrorType.NONE]


def count_tokens(text: str) -> int:
    return len(text.split())


@dataclass(frozen=True)
class QuestionSpec:
    template_id: str
    slots: tuple[str, ...]
    rendered: str
    token_count: int

    def __post_init__(self):
        object.__setattr__(self, "slots", tuple(self.slots))


@dataclass(frozen=True)
class HistoryItem:
    """Compact record of an earlier handoff, as visible to later edges."""

    sender: str
    receiver: str
    message: str
    gate: int
    reply: Optional[str] = None


@dataclass(frozen=True)
class EdgeState:
    query: str
    sender: str
    receiver: str
    message: str
    history: tuple[HistoryItem, ...]
    step_index: int
    budget_remaining: int

    def __post_init__(self):
        if self.sender == self.receiver:
            raise ContractError("sender and receiver must differ")
        if self.step_index < 0 or self.budget_remaining < 0:
            raise ContractError("step_index and budget_remaining must be nonnegative")
        object.__setattr__(self, "history", tuple(self.history))


@dataclass(frozen=True)
class Action:
    gate: int
    error_type: ErrorType = ErrorType.NONE
    addressee: Optional[str] = None
    question: Optional[QuestionSpec] = None

    def __post_init__(self):
        if self.gate not in (0, 1):
            raise ContractError("gate must be 0 or 1")
        if self.gate == 0:
            if self.error_type is not ErrorType.NONE or self.addressee is not None or self.question is not None:
                raise ContractError("a gate=0 action carries no type, addressee, or question")
        else:
            if self.error_type is ErrorType.NONE:
                raise ContractError("a gate=1 action needs a concrete error type")
            if self.addressee is None or self.question is None:
                raise ContractError("a gate=1 action needs an addressee and a question")

    @classmethod
    def none(cls) -> "Action":
        return cls(gate=0)


NO_ASK = Action(gate=0)


def action_to_clarifier_json(action: Action, state: Optional[EdgeState] = None) -> str:
    """Serialize an action in the clarifier JSON output contract.

    ``to_agent`` is written as ``"sender"``/``"receiver"`` when the
    originating state is known, otherwise the raw agent id.
    """
    if action.gate == 0:
        return json.dumps({"type": "NONE", "to_agent": None, "question": ""})
    to_agent = action.addressee
    if state is not None:
        to_agent = "sender" if action.addressee == state.sender else "receiver"
    return json.dumps({"type": action.error_type.value, "to_agent": to_agent, "question": action.question.rendered})


_SCHEMA_KEYS = frozenset({"type", "to_agent", "question"})
_SCHEMA_TYPES = frozenset(t.value for t in ErrorType)


def validate_schema(text: Any, cap: int = DEFAULT_TOKEN_CAP) -> int:
    """Return the format flag: 1 iff ``text`` is a well-formed clarifier output."""
    try:
        if isinstance(text, (bytes, bytearray)):
            text = bytes(text).decode("utf-8")
        if not isinstance(text, str):
            return 0
        obj = json.loads(text)
    except (ValueError, UnicodeDecodeError, RecursionError):
        return 0
    if not isinstance(obj, dict) or set(obj) != _SCHEMA_KEYS:
        return 0
    kind, to_agent, question = obj["type"], obj["to_agent"], obj["question"]
    if not isinstance(kind, str) or kind not in _SCHEMA_TYPES or not isinstance(question, str):
        return 0
    if kind == "NONE":
        return int(to_agent is None and question == "")
    if not isinstance(to_agent, str) or not to_agent:
        return 0
    n = count_tokens(question)
    return int(0 < n <= cap)


@dataclass(frozen=True)
class Rewards:
    r_eff: float
    r_par: float
    r_fmt: float
    r_edge: float


@dataclass(frozen=True)
class EdgeRecord:
    state: EdgeState
    action: Action
    reply: Optional[str]
    residual_flag: int
    counter: int
    rewards: Rewards
    latency_units: int
    cost_tokens: int
    # Injected fault on this edge when known (simulator traces); None means unlabeled.
    gold_type: Optional[ErrorType] = None

    def __post_init__(self):
        if (self.reply is not None) != (self.action.gate == 1):
            raise ContractError("reply must be present iff the action asks")


@dataclass(frozen=True)
class Trajectory:
    records: tuple[EdgeRecord, ...]
    terminal_score: int
    terminal_reward: float
    episode_seed: int
    config_hash: str = ""

    def __post_init__(self):
        object.__setattr__(self, "records", tuple(self.records))


@dataclass(frozen=True)
class RewardConfig:
    alpha_eff: float = 1.0
    lambda_sw: float = 0.4
    alpha_fmt: float = 0.1
    alpha_ans: float = 1.0
    window_h: int = 3
    budget_b: int = 200
    clip_eps: float = 0.2
    beta_kl: float = 0.02
    lambda_r: float = 0.5
    token_cap: int = DEFAULT_TOKEN_CAP

    def __post_init__(self):
        if self.window_h < 1:
            raise ContractError("window_h must be >= 1")
        if not 0 < self.clip_eps < 1:
            raise ContractError("clip_eps must lie in (0, 1)")
        if self.budget_b < 1 or self.token_cap < 1:
            raise ContractError("budget_b and token_cap must be positive")
        for name in ("alpha_eff", "lambda_sw", "alpha_fmt", "alpha_ans", "beta_kl", "lambda_r"):
            if getattr(self, name) < 0:
                raise ContractError(f"{name} must be nonnegative")


# ---------------------------------------------------------------------------
# Trace codec

def _question_to_obj(q: QuestionSpec) -> dict:
    return {"template_id": q.template_id, "slots": list(q.slots), "rendered": q.rendered, "token_count": q.token_count}


def _action_to_obj(a: Action) -> dict:
    obj: dict[str, Any] = {"gate": a.gate, "error_type": a.error_type.value}
    if a.gate == 1:
        obj["addressee"] = a.addressee
        obj["question"] = _question_to_obj(a.question)
    return obj


def _history_to_obj(h: HistoryItem) -> dict:
    return {"sender": h.sender, "receiver": h.receiver, "message": h.message, "gate": h.gate, "reply": h.reply}


def _state_to_obj(s: EdgeState) -> dict:
    return {
        "query": s.query,
        "sender": s.sender,
        "receiver": s.receiver,
        "message": s.message,
        "history": [_history_to_obj(h) for h in s.history],
        "step_index": s.step_index,
        "budget_remaining": s.budget_remaining,
    }


def record_to_obj(r: EdgeRecord) -> dict:
    return {
        "kind": "edge",
        "state": _state_to_obj(r.state),
        "action": _action_to_obj(r.action),
        "reply": r.reply,
        "residual_flag": r.residual_flag,
        "counter": r.counter,
        "rewards": {"r_eff": r.rewards.r_eff, "r_par": r.rewards.r_par, "r_fmt": r.rewards.r_fmt, "r_edge": r.rewards.r_edge},
        "latency_units": r.latency_units,
        "cost_tokens": r.cost_tokens,
        "gold_type": None if r.gold_type is None else r.gold_type.value,
    }


def _dumps(obj: dict) -> str:
    return json.dumps(obj, ensure_ascii=False, allow_nan=False)


def encode_trace(trajectory: Trajectory) -> list[str]:
    lines = [_dumps({"version": TRACE_VERSION, "kind": TRACE_KIND})]
    lines.extend(_dumps(record_to_obj(r)) for r in trajectory.records)
    lines.append(_dumps({
        "kind": "terminal",
        "terminal_score": trajectory.terminal_score,
        "terminal_reward": trajectory.terminal_reward,
        "episode_seed": trajectory.episode_seed,
        "config_hash": trajectory.config_hash,
    }))
    return lines


def _expect(obj: Any, keys: Iterable[str], lineno: int, where: str, optional: Iterable[str] = ()) -> dict:
    if not isinstance(obj, dict):
        raise TraceParseError(lineno, f"{where}: expected an object")
    keys, optional = set(keys), set(optional)
    extra = set(obj) - keys - optional
    if extra:
        raise TraceParseError(lineno, f"{where}: unknown field {sorted(extra)[0]!r}")
    missing = keys - set(obj)
    if missing:
        raise TraceParseError(lineno, f"{where}: missing field {sorted(missing)[0]!r}")
    return obj


def _typed(value: Any, types: tuple, lineno: int, where: str):
    # bool is an int subclass; never accept it where a number is expected
    if isinstance(value, bool) and bool not in types:
        raise TraceParseError(lineno, f"{where}: unexpected boolean")
    if not isinstance(value, types):
        raise TraceParseError(lineno, f"{where}: wrong type {type(value).__name__}")
    return value


def _num(value: Any, lineno: int, where: str) -> float:
    return _typed(value, (int, float), lineno, where)


def _decode_question(obj: Any, lineno: int) -> QuestionSpec:
    _expect(obj, ("template_id", "slots", "rendered", "token_count"), lineno, "question")
    slots = _typed(obj["slots"], (list,), lineno, "question.slots")
    return QuestionSpec(
        template_id=_typed(obj["template_id"], (str,), lineno, "question.template_id"),
        slots=tuple(_typed(s, (str,), lineno, "question.slots[]") for s in slots),
        rendered=_typed(obj["rendered"], (str,), lineno, "question.rendered"),
        token_count=_typed(obj["token_count"], (int,), lineno, "question.token_count"),
    )


def _decode_action(obj: Any, lineno: int) -> Action:
    if not isinstance(obj, dict):
        raise TraceParseError(lineno, "action: expected an object")
    gate = obj.get("gate")
    if gate == 0:
        _expect(obj, ("gate", "error_type"), lineno, "action")
    else:
        _expect(obj, ("gate", "error_type", "addressee", "question"), lineno, "action")
    try:
        etype = ErrorType(obj["error_type"])
    except ValueError:
        raise TraceParseError(lineno, f"action: bad error_type {obj['error_type']!r}") from None
    try:
        if gate == 0:
            return Action(gate=0, error_type=etype)
        return Action(
            gate=_typed(gate, (int,), lineno, "action.gate"),
            error_type=etype,
            addressee=_typed(obj["addressee"], (str,), lineno, "action.addressee"),
            question=_decode_question(obj["question"], lineno),
        )
    except ContractError as exc:
        raise TraceParseError(lineno, f"action: {exc}") from None


def _decode_state(obj: Any, lineno: int) -> EdgeState:
    _expect(obj, ("query", "sender", "receiver", "message", "history", "step_index", "budget_remaining"), lineno, "state")
    history = []
    for h in _typed(obj["history"], (list,), lineno, "state.history"):
        _expect(h, ("sender", "receiver", "message", "gate", "reply"), lineno, "history")
        history.append(HistoryItem(
            sender=_typed(h["sender"], (str,), lineno, "history.sender"),
            receiver=_typed(h["receiver"], (str,), lineno, "history.receiver"),
            message=_typed(h["message"], (str,), lineno, "history.message"),
            gate=_typed(h["gate"], (int,), lineno, "history.gate"),
            reply=_typed(h["reply"], (str, type(None)), lineno, "history.reply"),
        ))
    try:
        return EdgeState(
            query=_typed(obj["query"], (str,), lineno, "state.query"),
            sender=_typed(obj["sender"], (str,), lineno, "state.sender"),
            receiver=_typed(obj["receiver"], (str,), lineno, "state.receiver"),
            message=_typed(obj["message"], (str,), lineno, "state.message"),
            history=tuple(history),
            step_index=_typed(obj["step_index"], (int,), lineno, "state.step_index"),
            budget_remaining=_typed(obj["budget_remaining"], (int,), lineno, "state.budget_remaining"),
        )
    except ContractError as exc:
        raise TraceParseError(lineno, f"state: {exc}") from None


def _decode_record(obj: dict, lineno: int) -> EdgeRecord:
    _expect(obj, ("kind", "state", "action", "reply", "residual_flag", "counter", "rewards",
                  "latency_units", "cost_tokens", "gold_type"), lineno, "edge")
    rw = _expect(obj["rewards"], ("r_eff", "r_par", "r_fmt", "r_edge"), lineno, "rewards")
    gold = obj["gold_type"]
    try:
        gold_type = None if gold is None else ErrorType(gold)
    except ValueError:
        raise TraceParseError(lineno, f"edge: bad gold_type {gold!r}") from None
    try:
        return EdgeRecord(
            state=_decode_state(obj["state"], lineno),
            action=_decode_action(obj["action"], lineno),
            reply=_typed(obj["reply"], (str, type(None)), lineno, "edge.reply"),
            residual_flag=_typed(obj["residual_flag"], (int,), lineno, "edge.residual_flag"),
            counter=_typed(obj["counter"], (int,), lineno, "edge.counter"),
            rewards=Rewards(*(_num(rw[k], lineno, f"rewards.{k}") for k in ("r_eff", "r_par", "r_fmt", "r_edge"))),
            latency_units=_typed(obj["latency_units"], (int,), lineno, "edge.latency_units"),
            cost_tokens=_typed(obj["cost_tokens"], (int,), lineno, "edge.cost_tokens"),
            gold_type=gold_type,
        )
    except ContractError as exc:
        raise TraceParseError(lineno, f"edge: {exc}") from None


def _parse_line(line: str, lineno: int) -> dict:
    try:
        obj = json.loads(line)
    except ValueError as exc:
        raise TraceParseError(lineno, f"invalid JSON ({exc.msg})") from None
    if not isinstance(obj, dict):
        raise TraceParseError(lineno, "expected a JSON object")
    return obj


def decode_traces(lines: Iterable[str]) -> list[Trajectory]:
    """Decode a stream holding any number of concatenated trajectories."""
    out: list[Trajectory] = []
    records: Optional[list[EdgeRecord]] = None
    lineno = 0
    for lineno, raw in enumerate(lines, start=1):
        line = raw.rstrip("\n")
        if not line.strip():
            continue
        obj = _parse_line(line, lineno)
        kind = obj.get("kind")
        if records is None:
            if kind != TRACE_KIND:
                raise TraceParseError(lineno, "expected a trace header")
            _expect(obj, ("version", "kind"), lineno, "header")
            if obj["version"] != TRACE_VERSION:
                raise TraceVersionError(f"line {lineno}: trace version {obj['version']!r}, expected {TRACE_VERSION}")
            records = []
        elif kind == "edge":
            records.append(_decode_record(obj, lineno))
        elif kind == "terminal":
            _expect(obj, ("kind", "terminal_score", "terminal_reward", "episode_seed", "config_hash"), lineno, "terminal")
            out.append(Trajectory(
                records=tuple(records),
                terminal_score=_typed(obj["terminal_score"], (int,), lineno, "terminal.terminal_score"),
                terminal_reward=_num(obj["terminal_reward"], lineno, "terminal.terminal_reward"),
                episode_seed=_typed(obj["episode_seed"], (int,), lineno, "terminal.episode_seed"),
                config_hash=_typed(obj["config_hash"], (str,), lineno, "terminal.config_hash"),
            ))
            records = None
        else:
            raise TraceParseError(lineno, f"unexpected record kind {kind!r}")
    if records is not None:
        raise TraceParseError(lineno, "trace ended without a terminal record")
    return out


def decode_trace(lines: Iterable[str]) -> Trajectory:
    trajs = decode_traces(lines)
    if len(trajs) != 1:
        raise TraceParseError(0, f"expected exactly one trajectory, found {len(trajs)}")
    return trajs[0]


def write_traces(path, trajectories: Iterable[Trajectory]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for traj in trajectories:
            for line in encode_trace(traj):
                fh.write(line + "\n")


def read_traces(path) -> list[Trajectory]:
    with open(path, encoding="utf-8") as fh:
        return decode_traces(fh)
