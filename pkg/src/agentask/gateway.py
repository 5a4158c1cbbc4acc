"""Bridge to LLM-backed clarifiers over an OpenAI-compatible chat endpoint.

Nothing here runs unless a caller opts in; the simulator and trainers never
import this module.
"""

from __future__ import annotations

import json
import os
import re
import threading
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import httpx
import numpy as np

from .core import (
    Action,
    AgentAskError,
    DEFAULT_TOKEN_CAP,
    EdgeState,
    ErrorType,
    count_tokens,
    validate_schema,
)
from .templates import freeform

ENV_ENDPOINT = "AGENTASK_ENDPOINT"
ENV_API_KEY = "AGENTASK_API_KEY"
ENV_MODEL = "AGENTASK_MODEL"
ENV_PROMPT_FILE = "AGENTASK_PROMPT_FILE"

DEFAULT_SYSTEM_PROMPT = """\
You sit on the link between two agents and see one message before it is delivered.
Decide whether a single short question would stop an error from being passed on.

Error types:
- DG: a detail the receiver needs is absent (a field, unit, range or identifier). Usually ask the sender.
- RD: a name or symbol may point at a different entity than before. Usually ask the sender to fix the binding.
- SC: a value, unit, scale or structure looks wrong or malformed. Usually ask the sender to confirm or repair it.
- CG: the receiver's role cannot perform the requested step. Ask the receiver to accept a reroute.
- NONE: the message is fine, or no single question would help.

Reply with one JSON object and nothing else:
{"type": "DG|RD|SC|CG|NONE", "to_agent": "sender|receiver", "question": "..."}
For NONE, use {"type": "NONE", "to_agent": null, "question": ""}.
Keep the question to one sentence of at most 40 words."""

_FENCE_RE = re.compile(r"^```(?:json)?\s*\n?(.*?)\n?```$", re.DOTALL)


class GatewayError(AgentAskError):
    def __init__(self, message: str, status: Optional[int] = None):
        super().__init__(message if status is None else f"{message} (HTTP {status})")
        self.status = status


def load_system_prompt(path=None) -> str:
    """The configured prompt file, else ``$AGENTASK_PROMPT_FILE``, else the built-in prompt."""
    path = path or os.environ.get(ENV_PROMPT_FILE)
    if path:
        return Path(path).read_text(encoding="utf-8").rstrip("\n")
    return DEFAULT_SYSTEM_PROMPT


def context_block(state: EdgeState) -> str:
    lines = [
        f"query: {state.query}",
        f"sender: {state.sender}",
        f"receiver: {state.receiver}",
        f"message: {state.message}",
    ]
    if not state.history:
        lines.append("history: none")
    else:
        lines.append("history:")
        for h in state.history:
            asked = "no ask" if h.gate == 0 else f"asked, reply: {h.reply}"
            lines.append(f"- {h.sender} -> {h.receiver}: {h.message} ({asked})")
    return "\n".join(lines)


def clarifier_messages(state: EdgeState, system_prompt: Optional[str] = None) -> list[dict]:
    return [
        {"role": "system", "content": system_prompt if system_prompt is not None else load_system_prompt()},
        {"role": "user", "content": context_block(state)},
    ]


def render_clarifier_prompt(state: EdgeState, system_prompt: Optional[str] = None) -> str:
    """System prompt, a blank line, then the handoff context. Byte-stable."""
    msgs = clarifier_messages(state, system_prompt)
    return msgs[0]["content"] + "\n\n" + msgs[1]["content"]


def inject_reply(message: str, question: str, reply: str) -> str:
    """What the receiver sees after a clarification: the original message plus the exchange."""
    return f"{message}\n[clarification] Q: {question}\n[clarification] A: {reply}"


@dataclass(frozen=True)
class ClarifierReply:
    raw: str
    parsed: Optional[Action]
    format_flag: int

    def __post_init__(self):
        if (self.parsed is not None) != (self.format_flag == 1):
            raise ValueError("parsed must be present exactly when format_flag is 1")


def _strip_fence(text: str) -> str:
    m = _FENCE_RE.match(text.strip())
    return m.group(1).strip() if m else text.strip()


def parse_clarifier_reply(text: str, state: Optional[EdgeState] = None, cap: int = DEFAULT_TOKEN_CAP) -> ClarifierReply:
    """Validate a clarifier output and map it to an Action.

    ``to_agent`` values "sender"/"receiver" resolve to agent ids when
    ``state`` is given. A reply naming an agent off the edge is malformed.
    """
    body = _strip_fence(text) if isinstance(text, str) else text
    if not validate_schema(body, cap):
        return ClarifierReply(str(text), None, 0)
    obj = json.loads(body)
    kind = ErrorType(obj["type"])
    if kind is ErrorType.NONE:
        return ClarifierReply(text, Action(gate=0), 1)
    to = obj["to_agent"]
    if state is not None:
        lookup = {"sender": state.sender, "receiver": state.receiver, state.sender: state.sender,
                  state.receiver: state.receiver}
        if to not in lookup:
            return ClarifierReply(text, None, 0)
        to = lookup[to]
    action = Action(gate=1, error_type=kind, addressee=to, question=freeform(obj["question"]))
    return ClarifierReply(text, action, 1)


# ---------------------------------------------------------------------------
# wire protocol


@dataclass(frozen=True)
class ChatRequest:
    messages: tuple[tuple[str, str], ...]
    model: str = ""
    endpoint: str = ""
    temperature: float = 0.0
    max_tokens: int = 128
    timeout: float = 30.0

    def __post_init__(self):
        if self.temperature != 0.0:
            raise ValueError("clarifier requests run at temperature 0")
        object.__setattr__(self, "messages", tuple((str(r), str(c)) for r, c in self.messages))

    def body(self) -> dict:
        return {
            "model": self.model,
            "messages": [{"role": r, "content": c} for r, c in self.messages],
            "temperature": self.temperature,
            "max_tokens": self.max_tokens,
        }


@dataclass(frozen=True)
class ChatResponse:
    content: str
    retry_count: int
    latency_s: float
    prompt_tokens: int
    completion_tokens: int
    cost_estimated: bool

    @property
    def total_tokens(self) -> int:
        return self.prompt_tokens + self.completion_tokens


@dataclass
class GatewayClient:
    endpoint: str = ""
    model: str = ""
    api_key: Optional[str] = None
    max_retries: int = 2
    backoff_s: float = 0.5
    wire_log: Optional[str] = None
    transport: Optional[httpx.BaseTransport] = None
    _lock: threading.Lock = field(default_factory=threading.Lock, repr=False)

    @classmethod
    def from_env(cls, **overrides) -> "GatewayClient":
        kw = {"endpoint": os.environ.get(ENV_ENDPOINT, ""), "model": os.environ.get(ENV_MODEL, ""),
              "api_key": os.environ.get(ENV_API_KEY)}
        kw.update({k: v for k, v in overrides.items() if v is not None})
        return cls(**kw)

    def _url(self, request: ChatRequest) -> str:
        base = (request.endpoint or self.endpoint).rstrip("/")
        if not base:
            raise GatewayError(f"no endpoint configured; set {ENV_ENDPOINT}")
        return base if base.endswith("/chat/completions") else base + "/chat/completions"

    def _log(self, record: dict) -> None:
        if not self.wire_log:
            return
        with self._lock, open(self.wire_log, "a", encoding="utf-8") as fh:
            fh.write(json.dumps(record, ensure_ascii=False) + "\n")

    def chat_roundtrip(self, request: ChatRequest) -> ChatResponse:
        body = request.body()
        if not body["model"]:
            body["model"] = self.model
        headers = {"Authorization": f"Bearer {self.api_key}"} if self.api_key else {}
        url = self._url(request)
        last: Optional[GatewayError] = None
        start = time.perf_counter()
        with httpx.Client(transport=self.transport, timeout=request.timeout) as http:
            for attempt in range(self.max_retries + 1):
                if attempt and self.backoff_s:
                    time.sleep(self.backoff_s * 2 ** (attempt - 1))
                try:
                    resp = http.post(url, json=body, headers=headers)
                except httpx.TransportError as exc:
                    last = GatewayError(f"transport error: {exc}")
                    self._log({"request": body, "error": str(exc), "attempt": attempt})
                    continue
                self._log({"request": body, "status": resp.status_code, "response": resp.text, "attempt": attempt})
                if resp.status_code >= 500:
                    last = GatewayError("server error", resp.status_code)
                    continue
                if resp.status_code >= 400:
                    raise GatewayError("request rejected", resp.status_code)
                return self._decode(resp, request, attempt, time.perf_counter() - start)
        assert last is not None
        raise last

    @staticmethod
    def _decode(resp: httpx.Response, request: ChatRequest, attempt: int, latency: float) -> ChatResponse:
        try:
            doc = resp.json()
            content = doc["choices"][0]["message"]["content"] or ""
        except (ValueError, KeyError, IndexError, TypeError):
            raise GatewayError("malformed chat-completions response", resp.status_code) from None
        usage = doc.get("usage") or {}
        if isinstance(usage.get("prompt_tokens"), int) and isinstance(usage.get("completion_tokens"), int):
            return ChatResponse(content, attempt, latency, usage["prompt_tokens"], usage["completion_tokens"], False)
        prompt = sum(count_tokens(c) for _, c in request.messages)
        return ChatResponse(content, attempt, latency, prompt, count_tokens(content), True)


class GatewayClarifier:
    """Policy backed by a remote clarifier model. Malformed replies become no-ask actions."""

    name = "gateway"

    def __init__(self, client: GatewayClient, system_prompt: Optional[str] = None, max_tokens: int = 128):
        self.client = client
        self.system_prompt = system_prompt if system_prompt is not None else load_system_prompt()
        self.max_tokens = max_tokens
        self.replies: list[tuple[ClarifierReply, ChatResponse]] = []

    def request_for(self, state: EdgeState) -> ChatRequest:
        msgs = clarifier_messages(state, self.system_prompt)
        return ChatRequest(messages=tuple((m["role"], m["content"]) for m in msgs), max_tokens=self.max_tokens)

    def clarify(self, state: EdgeState) -> ClarifierReply:
        resp = self.client.chat_roundtrip(self.request_for(state))
        reply = parse_clarifier_reply(resp.content, state)
        self.replies.append((reply, resp))
        return reply

    def act(self, env, episode, state: EdgeState, rng: np.random.Generator) -> Action:
        reply = self.clarify(state)
        return reply.parsed if reply.parsed is not None else Action(gate=0)


def judge_teacher(clarifier: GatewayClarifier):
    """Teacher callable for corpus building that labels edges with a remote judge.

    Raises on malformed judgements so the corpus builder counts them as skipped.
    """
    from .env import GoldLabel

    def teacher(episode, state: EdgeState) -> GoldLabel:
        reply = clarifier.clarify(state)
        if reply.parsed is None:
            raise GatewayError("judge reply failed the schema check")
        a = reply.parsed
        return GoldLabel(a.error_type, a.addressee, a.question)

    return teacher


def stub_transport(contents: Sequence[str], statuses: Sequence[int] = (), usage: bool = True) -> httpx.MockTransport:
    """In-process chat endpoint for tests and dry runs: replays ``statuses`` then serves ``contents`` in turn."""
    state = {"n": 0, "served": 0}
    statuses = list(statuses)

    def handler(request: httpx.Request) -> httpx.Response:
        i = state["n"]
        state["n"] += 1
        if i < len(statuses) and statuses[i] != 200:
            return httpx.Response(statuses[i], json={"error": "stub"})
        content = contents[min(state["served"], len(contents) - 1)]
        state["served"] += 1
        doc = {"choices": [{"message": {"role": "assistant", "content": content}}]}
        if usage:
            doc["usage"] = {"prompt_tokens": 50, "completion_tokens": count_tokens(content),
                            "total_tokens": 50 + count_tokens(content)}
        return httpx.Response(200, json=doc)

    return httpx.MockTransport(handler)
