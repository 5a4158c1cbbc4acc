"""Edge featurization and the factored clarifier policy.

The type head is a 5-way softmax over {DG, RD, SC, CG, NONE}; NONE doubles as
the closed gate, so pi(z=0|x) = p_type(NONE|x). The addressee head sees the
features plus a one-hot of the chosen type, and each ask type has its own
softmax over its question templates.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import kernels, templates
from .core import (
    NONE_INDEX,
    TYPE_INDEX,
    TYPE_ORDER,
    AgentAskError,
    Action,
    ContractError,
    EdgeState,
)
from .env import MESSAGE_FIELDS, REPLY_TOKEN_BOUND, capabilities, parse_message, query_symbol

CHECKPOINT_VERSION = 1

FEATURE_NAMES = (
    "bias",
    "missing_any",
    "missing_fraction",
    "symbol_consistency",
    "range_plausibility",
    "capability_match",
    "history_ask_fraction",
    "budget_fraction",
    "step_index",
    "history_fill",
    "message_parses",
    "receiver_computes",
    "sender_computes",
    "value_magnitude",
    "asked_previous_edge",
    "needs_compute",
)
FEATURE_DIM = len(FEATURE_NAMES)
HISTORY_BOUND = 4
BUDGET_SCALE = 200.0
STEP_SCALE = 8.0
K_TEMPLATES = templates.TEMPLATES_PER_TYPE


class CheckpointError(AgentAskError):
    pass


def feature_hash() -> str:
    blob = json.dumps({"names": FEATURE_NAMES, "history": HISTORY_BOUND, "budget": BUDGET_SCALE, "step": STEP_SCALE})
    return hashlib.sha256(blob.encode()).hexdigest()[:16]


def featurize(state: EdgeState) -> np.ndarray:
    payload = parse_message(state.message)
    parses = payload is not None
    payload = payload or {}
    missing = [f for f in MESSAGE_FIELDS if f not in payload]

    canonical = query_symbol(state.query)
    symbol = payload.get("symbol")
    consistent = 1.0
    if symbol is not None and canonical is not None and symbol != canonical:
        consistent = 0.0

    plausible = 1.0
    value, rng = payload.get("value"), payload.get("range")
    if isinstance(value, (int, float)) and isinstance(rng, list) and len(rng) == 2:
        if not rng[0] <= value <= rng[1]:
            plausible = 0.0

    needs = payload.get("needs")
    recv_caps = capabilities(state.receiver)
    cap_match = 0.0 if isinstance(needs, str) and needs not in recv_caps else 1.0

    hist = state.history[-HISTORY_BOUND:]
    asks = sum(h.gate for h in hist)
    magnitude = math.log10(1.0 + abs(value)) / 6.0 if isinstance(value, (int, float)) else 0.0

    x = np.array([
        1.0,
        float(bool(missing)),
        len(missing) / len(MESSAGE_FIELDS),
        consistent,
        plausible,
        cap_match,
        asks / HISTORY_BOUND,
        min(state.budget_remaining / BUDGET_SCALE, 1.0),
        min(state.step_index / STEP_SCALE, 1.0),
        len(hist) / HISTORY_BOUND,
        float(parses),
        float("compute" in recv_caps),
        float("compute" in capabilities(state.sender)),
        min(magnitude, 1.0),
        float(bool(hist) and hist[-1].gate == 1),
        float(needs == "compute"),
    ])
    return x


@dataclass(frozen=True, eq=False)
class PolicyParams:
    """Flat parameter vector with named views; treated as immutable."""

    theta: np.ndarray
    dim: int = FEATURE_DIM
    n_templates: int = K_TEMPLATES

    def __post_init__(self):
        theta = np.array(self.theta, dtype=np.float64)
        if theta.shape != (kernels.n_params(self.dim, self.n_templates),):
            raise ContractError(f"theta has shape {theta.shape}, expected ({kernels.n_params(self.dim, self.n_templates)},)")
        theta.setflags(write=False)
        object.__setattr__(self, "theta", theta)

    @classmethod
    def zeros(cls, dim: int = FEATURE_DIM, n_templates: int = K_TEMPLATES) -> "PolicyParams":
        return cls(np.zeros(kernels.n_params(dim, n_templates)), dim, n_templates)

    @classmethod
    def random(cls, rng: np.random.Generator, scale: float = 0.5, dim: int = FEATURE_DIM,
               n_templates: int = K_TEMPLATES) -> "PolicyParams":
        return cls(rng.normal(0.0, scale, kernels.n_params(dim, n_templates)), dim, n_templates)

    def block(self, name: str) -> np.ndarray:
        a, b = kernels.layout(self.dim, self.n_templates)[name]
        shapes = {
            "type_w": (self.dim, 5),
            "type_b": (5,),
            "addr_w": (self.dim + 5, 2),
            "addr_b": (2,),
            "q_w": (4, self.dim, self.n_templates),
            "q_b": (4, self.n_templates),
        }
        return self.theta[a:b].reshape(shapes[name])

    def with_theta(self, theta: np.ndarray) -> "PolicyParams":
        return PolicyParams(theta, self.dim, self.n_templates)

    def __eq__(self, other):
        if not isinstance(other, PolicyParams):
            return NotImplemented
        return (self.dim, self.n_templates) == (other.dim, other.n_templates) and np.array_equal(self.theta, other.theta)

    def __hash__(self):
        return hash(self.theta.tobytes())


@dataclass(frozen=True)
class HeadDistributions:
    type_probs: np.ndarray  # (5,)
    addr_probs: np.ndarray  # (4, 2): addressee simplex given each ask type
    question_probs: np.ndarray  # (4, K): template simplex of each ask type


def _check_features(params: PolicyParams, X: np.ndarray) -> np.ndarray:
    X = np.asarray(X, dtype=np.float64)
    if X.ndim == 1:
        X = X[None, :]
    if X.ndim != 2 or X.shape[1] != params.dim:
        raise ContractError(f"features have shape {X.shape}, policy expects dimension {params.dim}")
    return X


def log_heads(params: PolicyParams, X: np.ndarray):
    X = _check_features(params, X)
    return kernels.head_logprobs(params.theta, X, params.dim, params.n_templates)


def forward(params: PolicyParams, features: np.ndarray) -> HeadDistributions:
    lt, la, lq = log_heads(params, features)
    return HeadDistributions(np.exp(lt[0]), np.exp(la[0]), np.exp(lq[0]))


# ---------------------------------------------------------------------------
# action encoding


def encode_action(state: EdgeState, action: Action) -> tuple[int, int, int]:
    """Map an action to (type index, addressee index, template index)."""
    if action.gate == 0:
        return NONE_INDEX, 0, 0
    if action.addressee == state.sender:
        v = 0
    elif action.addressee == state.receiver:
        v = 1
    else:
        raise ContractError(f"addressee {action.addressee!r} is neither sender nor receiver")
    k = templates.template_index(action.error_type, action.question.template_id)
    return TYPE_INDEX[action.error_type], v, k


def decode_action(state: EdgeState, t: int, v: int, k: int) -> Action:
    if t == NONE_INDEX:
        return Action(gate=0)
    etype = TYPE_ORDER[t]
    return Action(gate=1, error_type=etype, addressee=state.sender if v == 0 else state.receiver,
                  question=templates.render(etype, k, state))


def joint_index(t: int, v: int, k: int, K: int = K_TEMPLATES) -> int:
    """Flat index into the finite joint action space; NONE is the last slot."""
    if t == NONE_INDEX:
        return 4 * 2 * K
    return (t * 2 + v) * K + k


def joint_log_table(lt: np.ndarray, la: np.ndarray, lq: np.ndarray) -> np.ndarray:
    """Log-probabilities of every joint action, shape (N, 8K+1)."""
    N, K = lt.shape[0], lq.shape[2]
    asks = lt[:, :4, None, None] + la[:, :, :, None] + lq[:, :, None, :]
    return np.concatenate([asks.reshape(N, 8 * K), lt[:, NONE_INDEX:NONE_INDEX + 1]], axis=1)


def joint_action_arrays(K: int = K_TEMPLATES):
    """(t, v, k) index arrays enumerating the joint action space in table order."""
    t, v, k = [], [], []
    for ti in range(4):
        for vi in range(2):
            for ki in range(K):
                t.append(ti)
                v.append(vi)
                k.append(ki)
    t.append(NONE_INDEX)
    v.append(0)
    k.append(0)
    return np.array(t), np.array(v), np.array(k)


# ---------------------------------------------------------------------------
# sampling and log-probabilities


def ask_cost_bound(state: EdgeState) -> int:
    """Worst-case token cost of any ask at this state."""
    return templates.max_question_tokens(state) + REPLY_TOKEN_BOUND


def budget_blocks_ask(state: EdgeState, budget_remaining: Optional[int] = None) -> bool:
    remaining = state.budget_remaining if budget_remaining is None else budget_remaining
    return remaining < ask_cost_bound(state)


def _draw(logp: np.ndarray, u: np.ndarray) -> np.ndarray:
    """Inverse-CDF draws from the categorical ``exp(logp)`` for uniforms ``u``."""
    cum = np.cumsum(np.exp(logp))
    return np.minimum(np.searchsorted(cum, u * cum[-1], side="right"), logp.shape[0] - 1)


def sample_group(lt_row, la_row, lq_row, rng: np.random.Generator, G: int) -> tuple[np.ndarray, ...]:
    """G independent joint draws; returns (t, v, k, logp) arrays. v and k are 0 where t is NONE."""
    u = rng.random((3, G))
    t = _draw(lt_row, u[0])
    ask = t != NONE_INDEX
    v = np.zeros(G, dtype=np.int64)
    k = np.zeros(G, dtype=np.int64)
    for j in np.unique(t[ask]):
        sel = t == j
        v[sel] = _draw(la_row[j], u[1, sel])
        k[sel] = _draw(lq_row[j], u[2, sel])
    ta = np.where(ask, t, 0)
    logp = lt_row[t] + np.where(ask, la_row[ta, v] + lq_row[ta, k], 0.0)
    return t, v, k, logp


def sample_indices(lt_row, la_row, lq_row, rng: np.random.Generator) -> tuple[int, int, int, float]:
    t, v, k, logp = sample_group(lt_row, la_row, lq_row, rng, 1)
    return int(t[0]), int(v[0]), int(k[0]), float(logp[0])


def sample_action(params: PolicyParams, edge_state: EdgeState, rng: np.random.Generator,
                  budget_remaining: Optional[int] = None) -> tuple[Action, float]:
    lt, la, lq = log_heads(params, featurize(edge_state))
    if budget_blocks_ask(edge_state, budget_remaining):
        return Action(gate=0), float(lt[0, NONE_INDEX])
    t, v, k, logp = sample_indices(lt[0], la[0], lq[0], rng)
    return decode_action(edge_state, t, v, k), logp


def greedy_action(params: PolicyParams, edge_state: EdgeState,
                  budget_remaining: Optional[int] = None) -> tuple[Action, float]:
    """Mode of each head in turn (type, then addressee and template)."""
    lt, la, lq = log_heads(params, featurize(edge_state))
    t = int(np.argmax(lt[0]))
    if t == NONE_INDEX or budget_blocks_ask(edge_state, budget_remaining):
        return Action(gate=0), float(lt[0, NONE_INDEX])
    v = int(np.argmax(la[0, t]))
    k = int(np.argmax(lq[0, t]))
    return decode_action(edge_state, t, v, k), float(lt[0, t] + la[0, t, v] + lq[0, t, k])


def _logprob_from_heads(lt, la, lq, t, v, k) -> float:
    if t == NONE_INDEX:
        return float(lt[t])
    return float(lt[t] + la[t, v] + lq[t, k])


def action_logprob(params: PolicyParams, edge_state: EdgeState, action: Action) -> float:
    t, v, k = encode_action(edge_state, action)
    lt, la, lq = log_heads(params, featurize(edge_state))
    return _logprob_from_heads(lt[0], la[0], lq[0], t, v, k)


def grad_logprob(params: PolicyParams, edge_state: EdgeState, action: Action) -> PolicyParams:
    t, v, k = encode_action(edge_state, action)
    X = _check_features(params, featurize(edge_state))
    g = kernels.score_grad(params.theta, X, [0], [t], [v], [k], [1.0], params.dim, params.n_templates)
    return params.with_theta(g)


def kl_divergence(params: PolicyParams, ref: PolicyParams, X: np.ndarray) -> np.ndarray:
    """Exact KL(pi_params || pi_ref) over the joint action space, one per row."""
    lp = joint_log_table(*log_heads(params, X))
    lr = joint_log_table(*log_heads(ref, X))
    return np.sum(np.exp(lp) * (lp - lr), axis=1)


def kl_grad(params: PolicyParams, ref: PolicyParams, X: np.ndarray, row_weights: np.ndarray) -> np.ndarray:
    """Gradient of sum_n row_weights[n] * KL_n with respect to params.

    Uses d KL = sum_a pi(a) (log pi(a) - log ref(a)) d log pi(a), the constant
    term vanishing because the score has zero mean.
    """
    X = _check_features(params, X)
    lp = joint_log_table(*log_heads(params, X))
    lr = joint_log_table(*log_heads(ref, X))
    w = np.exp(lp) * (lp - lr) * np.asarray(row_weights, dtype=np.float64)[:, None]
    N, A = lp.shape
    ta, va, ka = joint_action_arrays(params.n_templates)
    rows = np.repeat(np.arange(N), A)
    return kernels.score_grad(params.theta, X, rows, np.tile(ta, N), np.tile(va, N), np.tile(ka, N),
                              w.ravel(), params.dim, params.n_templates)


def enumerate_actions(state: EdgeState, K: int = K_TEMPLATES) -> list[Action]:
    ta, va, ka = joint_action_arrays(K)
    return [decode_action(state, int(t), int(v), int(k)) for t, v, k in zip(ta, va, ka)]


# ---------------------------------------------------------------------------
# checkpoints


def save_checkpoint(params: PolicyParams, path, extra: Optional[dict] = None) -> None:
    doc = {
        "version": CHECKPOINT_VERSION,
        "kind": "agentask-policy",
        "dim": params.dim,
        "n_templates": params.n_templates,
        "feature_hash": feature_hash(),
        "library_hash": templates.library_hash(),
        "theta": [float(x) for x in params.theta],
        "meta": extra or {},
    }
    Path(path).write_text(json.dumps(doc), encoding="utf-8")


def load_checkpoint(path) -> PolicyParams:
    try:
        doc = json.loads(Path(path).read_text(encoding="utf-8"))
    except (OSError, ValueError) as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from None
    if doc.get("kind") != "agentask-policy" or doc.get("version") != CHECKPOINT_VERSION:
        raise CheckpointError(f"{path}: not a version-{CHECKPOINT_VERSION} policy checkpoint")
    if doc.get("feature_hash") != feature_hash():
        raise CheckpointError(f"{path}: feature configuration hash mismatch")
    if doc.get("library_hash") != templates.library_hash():
        raise CheckpointError(f"{path}: question library hash mismatch")
    return PolicyParams(np.array(doc["theta"], dtype=np.float64), int(doc["dim"]), int(doc["n_templates"]))


def featurize_many(states: Sequence[EdgeState]) -> np.ndarray:
    if not states:
        return np.zeros((0, FEATURE_DIM))
    return np.stack([featurize(s) for s in states])

