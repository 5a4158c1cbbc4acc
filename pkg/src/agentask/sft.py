"""Teacher-labelled edge corpus and supervised training of the policy heads."""

from __future__ import annotations

import hashlib
import json
import logging
import math
from dataclasses import dataclass, field
from typing import Callable, Iterable, Optional, Sequence

import numpy as np

from . import kernels
from . import policy as pol
from .core import (
    NONE_INDEX,
    RewardConfig,
    TYPE_INDEX,
    AgentAskError,
    EdgeState,
    ErrorType,
    _decode_question,
    _decode_state,
    _question_to_obj,
    _state_to_obj,
    TraceParseError,
    TrainingAbort,
)
from .env import Environment, EnvConfig, EpisodeState, GoldLabel
from .rollout import NeverAsk, Policy, enforce_budget, score_action

log = logging.getLogger(__name__)

CORPUS_VERSION = 1


class SFTDataError(AgentAskError):
    pass


@dataclass(frozen=True)
class CorpusExample:
    state: EdgeState
    label: GoldLabel
    mask_m: int
    episode_seed: int

    def __post_init__(self):
        if self.mask_m != int(self.label.error_type is not ErrorType.NONE):
            raise SFTDataError("mask_m disagrees with the label type")


@dataclass(frozen=True)
class Corpus:
    examples: tuple[CorpusExample, ...]
    config_hash: str
    seeds: tuple[int, int]
    skipped: int = 0

    def digest(self) -> str:
        h = hashlib.sha256()
        h.update(self.config_hash.encode())
        for line in corpus_lines(self)[1:]:
            h.update(line.encode())
        return h.hexdigest()[:16]


Teacher = Callable[[EpisodeState, EdgeState], GoldLabel]


def build_corpus(env: Environment | EnvConfig, seeds: Iterable[int], teacher: Optional[Teacher] = None,
                 behavior: Optional[Policy] = None, budget: int = 200) -> Corpus:
    """Label every edge of every logged episode with the teacher.

    Episodes are logged under ``behavior`` (never-ask by default). A teacher
    exception skips that edge and is counted in ``Corpus.skipped``.
    """
    env = env if isinstance(env, Environment) else Environment(env)
    teacher = teacher or env.teacher_label
    behavior = behavior or NeverAsk()
    cfg = RewardConfig(budget_b=budget)
    seeds = list(seeds)
    seen: set = set()
    examples: list[CorpusExample] = []
    skipped = 0
    for seed in seeds:
        rng = np.random.default_rng(seed)
        episode = env.reset(seed, budget=budget)
        window: tuple[int, ...] = ()
        while not episode.done:
            state = env.emit_edge(episode)
            try:
                label = teacher(episode, state)
            except Exception as exc:  # noqa: BLE001 - any teacher failure is counted, not fatal
                skipped += 1
                log.warning("teacher failed on seed %d edge %d: %s", seed, state.step_index, exc)
                label = None
            if label is not None:
                key = (state, label)
                if key not in seen:
                    seen.add(key)
                    mask = int(label.error_type is not ErrorType.NONE)
                    examples.append(CorpusExample(state, label, mask, seed))
            action = enforce_budget(state, behavior.act(env, episode, state, rng))
            step = score_action(env, episode, state, action, cfg, window)
            window = step.window
            episode = step.outcome.next
    lo, hi = (min(seeds), max(seeds) + 1) if seeds else (0, 0)
    return Corpus(tuple(examples), env.config_hash(), (lo, hi), skipped)


# ---------------------------------------------------------------------------
# persistence


def corpus_lines(corpus: Corpus) -> list[str]:
    lines = [json.dumps({"version": CORPUS_VERSION, "kind": "agentask-corpus", "config_hash": corpus.config_hash,
                         "seeds": list(corpus.seeds), "skipped": corpus.skipped})]
    for ex in corpus.examples:
        label = {"error_type": ex.label.error_type.value, "addressee": ex.label.addressee,
                 "question": None if ex.label.question is None else _question_to_obj(ex.label.question)}
        lines.append(json.dumps({"state": _state_to_obj(ex.state), "label": label, "mask": ex.mask_m,
                                 "episode_seed": ex.episode_seed}, ensure_ascii=False))
    return lines


def write_corpus(path, corpus: Corpus) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for line in corpus_lines(corpus):
            fh.write(line + "\n")


def read_corpus(path) -> Corpus:
    with open(path, encoding="utf-8") as fh:
        lines = [ln for ln in fh if ln.strip()]
    if not lines:
        raise TraceParseError(1, "empty corpus file")
    try:
        head = json.loads(lines[0])
    except ValueError:
        raise TraceParseError(1, "invalid corpus header") from None
    if head.get("kind") != "agentask-corpus" or head.get("version") != CORPUS_VERSION:
        raise TraceParseError(1, "not a version-1 agentask corpus")
    examples = []
    for lineno, line in enumerate(lines[1:], start=2):
        try:
            obj = json.loads(line)
        except ValueError:
            raise TraceParseError(lineno, "invalid JSON") from None
        if set(obj) != {"state", "label", "mask", "episode_seed"}:
            raise TraceParseError(lineno, "corpus record has unexpected fields")
        lab = obj["label"]
        try:
            question = None if lab["question"] is None else _decode_question(lab["question"], lineno)
            label = GoldLabel(ErrorType(lab["error_type"]), lab["addressee"], question)
            examples.append(CorpusExample(_decode_state(obj["state"], lineno), label, int(obj["mask"]),
                                          int(obj["episode_seed"])))
        except (KeyError, ValueError, SFTDataError) as exc:
            raise TraceParseError(lineno, f"bad corpus record: {exc}") from None
    return Corpus(tuple(examples), head["config_hash"], tuple(head["seeds"]), int(head.get("skipped", 0)))


# ---------------------------------------------------------------------------
# loss


@dataclass(frozen=True)
class SFTBatch:
    X: np.ndarray
    t: np.ndarray
    v: np.ndarray
    k: np.ndarray
    mask: np.ndarray

    def __len__(self):
        return self.X.shape[0]

    def take(self, idx: np.ndarray) -> "SFTBatch":
        return SFTBatch(self.X[idx], self.t[idx], self.v[idx], self.k[idx], self.mask[idx])


def encode_examples(examples: Sequence[CorpusExample]) -> SFTBatch:
    X = pol.featurize_many([ex.state for ex in examples])
    t = np.empty(len(examples), dtype=np.int64)
    v = np.zeros(len(examples), dtype=np.int64)
    k = np.zeros(len(examples), dtype=np.int64)
    mask = np.empty(len(examples), dtype=np.float64)
    for i, ex in enumerate(examples):
        lab = ex.label
        t[i] = TYPE_INDEX[lab.error_type]
        mask[i] = ex.mask_m
        if ex.mask_m:
            if lab.addressee is None or lab.question is None:
                raise SFTDataError(f"example {i}: ask label without addressee or question")
            action = lab.to_action()
            try:
                _, v[i], k[i] = pol.encode_action(ex.state, action)
            except Exception as exc:
                raise SFTDataError(f"example {i}: {exc}") from None
    return SFTBatch(X, t, v, k, mask)


def sft_loss(params: pol.PolicyParams, batch: SFTBatch | Sequence[CorpusExample],
             lambda_ask: float = 1.0) -> tuple[float, np.ndarray]:
    """Type cross-entropy plus ``lambda_ask`` times the masked ask NLL.

    Returns the loss and its gradient with respect to ``params.theta``.
    """
    if not isinstance(batch, SFTBatch):
        batch = encode_examples(batch)
    n = len(batch)
    if n == 0:
        raise SFTDataError("empty batch")
    lt, la, lq = pol.log_heads(params, batch.X)
    rows = np.arange(n)
    l_type = -lt[rows, batch.t].mean()
    ask = batch.t != NONE_INDEX
    t_ask = np.where(ask, batch.t, 0)
    nll_ask = -(la[rows, t_ask, batch.v] + lq[rows, t_ask, batch.k])
    l_ask = float(np.sum(np.where(ask, batch.mask * nll_ask, 0.0)) / n)
    loss = float(l_type) + lambda_ask * l_ask
    grad = -kernels.score_grad(params.theta, batch.X, rows, batch.t, batch.v, batch.k,
                               np.full(n, 1.0 / n), params.dim, params.n_templates,
                               w_ask=batch.mask * (lambda_ask / n))
    return loss, grad


def stability_lr(batch: SFTBatch, lambda_ask: float = 1.0) -> float:
    """Step size below which full-batch gradient descent cannot increase the loss.

    Softmax cross-entropy has Hessian norm at most 1/2 per unit input norm, so
    the loss is L-smooth with L = 0.5 * max(1, lambda_ask) * max ||[x, e_t, 1]||^2;
    any lr <= 1/L guarantees monotone descent.
    """
    sq = float(np.max(np.sum(batch.X ** 2, axis=1))) + 2.0
    return 1.0 / (0.5 * max(1.0, lambda_ask) * sq)


# ---------------------------------------------------------------------------
# training


@dataclass(frozen=True)
class SFTConfig:
    lr: float = 0.5
    epochs: int = 300
    batch_size: int = 64
    lambda_ask: float = 1.0
    seed: int = 0
    patience: int = 10
    holdout_fraction: float = 0.1


@dataclass
class SFTResult:
    params: pol.PolicyParams
    best_epoch: int
    history: list[dict] = field(default_factory=list)


def split_by_seed(corpus: Corpus, seed: int, holdout_fraction: float = 0.1) -> tuple[list[int], list[int]]:
    seeds = sorted({ex.episode_seed for ex in corpus.examples})
    rng = np.random.default_rng(seed)
    order = rng.permutation(len(seeds))
    n_hold = max(1, int(round(holdout_fraction * len(seeds)))) if len(seeds) > 1 else 0
    held = {seeds[i] for i in order[:n_hold]}
    train = [i for i, ex in enumerate(corpus.examples) if ex.episode_seed not in held]
    hold = [i for i, ex in enumerate(corpus.examples) if ex.episode_seed in held]
    return train, hold


def head_accuracy(params: pol.PolicyParams, batch: SFTBatch) -> dict[str, float]:
    """Type accuracy over all rows; addressee/template accuracy over ask rows given the gold type."""
    lt, la, lq = pol.log_heads(params, batch.X)
    out = {"type_acc": float(np.mean(np.argmax(lt, axis=1) == batch.t)) if len(batch) else float("nan")}
    ask = batch.t != NONE_INDEX
    if ask.any():
        rows = np.flatnonzero(ask)
        out["addr_acc"] = float(np.mean(np.argmax(la[rows, batch.t[rows]], axis=1) == batch.v[rows]))
        out["template_acc"] = float(np.mean(np.argmax(lq[rows, batch.t[rows]], axis=1) == batch.k[rows]))
    return out


def train_sft(corpus: Corpus, hyper: SFTConfig = SFTConfig(),
              init: Optional[pol.PolicyParams] = None) -> SFTResult:
    if not corpus.examples:
        raise SFTDataError("corpus is empty")
    data = encode_examples(corpus.examples)
    train_idx, hold_idx = split_by_seed(corpus, hyper.seed, hyper.holdout_fraction)
    train = data.take(np.array(train_idx, dtype=np.int64))
    hold = data.take(np.array(hold_idx, dtype=np.int64)) if hold_idx else train
    rng = np.random.default_rng(hyper.seed)
    params = init or pol.PolicyParams.zeros()
    theta = params.theta.copy()
    best_loss, _ = sft_loss(params, hold, hyper.lambda_ask)
    best, best_epoch, stale = params, 0, 0
    history = [{"epoch": 0, "holdout_loss": best_loss}]
    for epoch in range(1, hyper.epochs + 1):
        order = rng.permutation(len(train))
        for start in range(0, len(order), hyper.batch_size):
            mb = train.take(order[start:start + hyper.batch_size])
            loss, grad = sft_loss(params, mb, hyper.lambda_ask)
            if not math.isfinite(loss) or not np.all(np.isfinite(grad)):
                raise TrainingAbort(f"SFT diverged at epoch {epoch}: loss={loss}")
            theta = theta - hyper.lr * grad
            params = params.with_theta(theta)
        hold_loss, _ = sft_loss(params, hold, hyper.lambda_ask)
        if not math.isfinite(hold_loss):
            raise TrainingAbort(f"SFT diverged at epoch {epoch}: held-out loss={hold_loss}")
        history.append({"epoch": epoch, "holdout_loss": hold_loss})
        if hold_loss < best_loss:
            best_loss, best, best_epoch, stale = hold_loss, params, epoch, 0
        else:
            stale += 1
            if stale >= hyper.patience:
                break
    return SFTResult(best, best_epoch, history)
