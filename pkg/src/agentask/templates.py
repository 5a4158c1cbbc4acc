"""Finite question library used by the question head.

Each ask type owns ``TEMPLATES_PER_TYPE`` templates. Slot fillers are read
deterministically off the edge state, so a (type, template index) pair fully
determines the rendered question for a given state.
"""

from __future__ import annotations

import functools
import hashlib
import json
import string
from typing import Mapping

from .core import ContractError, EdgeState, ErrorType, QuestionSpec, count_tokens

TEMPLATES_PER_TYPE = 4
FREEFORM_ID = "freeform"

# Index 0 of every type is the minimal question the teacher emits.
LIBRARY: dict[ErrorType, tuple[tuple[str, str], ...]] = {
    ErrorType.DG: (
        ("dg.missing", "Please send the missing {field} for {symbol}."),
        ("dg.fill", "Which value should fill the {field} field before {receiver} proceeds?"),
        ("dg.range", "What range and unit apply to {symbol}?"),
        ("dg.restate", "Can you restate every required field of the handoff for {symbol}?"),
    ),
    ErrorType.RD: (
        ("rd.bind", "Does {symbol} refer to {canonical}?"),
        ("rd.which", "Which quantity does {symbol} name in this step?"),
        ("rd.alias", "Is {symbol} a new alias or the tracked {canonical}?"),
        ("rd.scope", "Please confirm the binding of every symbol you use."),
    ),
    ErrorType.SC: (
        ("sc.value", "Is {value} {unit} the correct value for {symbol}?"),
        ("sc.unit", "Should {symbol} be converted before the next step?"),
        ("sc.recheck", "Please recompute {symbol} and confirm its magnitude."),
        ("sc.structure", "Is the payload for {symbol} well formed?"),
    ),
    ErrorType.CG: (
        ("cg.reroute", "Can {receiver} handle {needs}, or should this be rerouted?"),
        ("cg.capable", "Who should perform the {needs} step?"),
        ("cg.tool", "Does {receiver} have the tools for {needs}?"),
        ("cg.reissue", "Please reissue this {needs} request to a capable role."),
    ),
}

_BY_ID = {tid: (etype, idx) for etype, rows in LIBRARY.items() for idx, (tid, _) in enumerate(rows)}


def _slot_names(text: str) -> tuple[str, ...]:
    return tuple(name for _, name, _, _ in string.Formatter().parse(text) if name)


_SLOTS = {text: _slot_names(text) for rows in LIBRARY.values() for _, text in rows}


def library_hash() -> str:
    blob = json.dumps({t.value: rows for t, rows in LIBRARY.items()}, sort_keys=True)
    return hashlib.sha256(blob.encode()).hexdigest()[:16]


def slot_values(state: EdgeState) -> dict[str, str]:
    """Slot fillers visible at a handoff."""
    return dict(_slot_values(state.message, state.query, state.sender, state.receiver))


@functools.lru_cache(maxsize=8192)
def _slot_values(message: str, query: str, sender: str, receiver: str) -> tuple[tuple[str, str], ...]:
    from .env import MESSAGE_FIELDS, parse_message, query_symbol

    payload = parse_message(message) or {}
    missing = [f for f in MESSAGE_FIELDS if f not in payload]
    canonical = query_symbol(query) or "the tracked quantity"
    return tuple({
        "field": missing[0] if missing else "value",
        "symbol": str(payload.get("symbol", canonical)),
        "canonical": canonical,
        "value": str(payload.get("value", "?")),
        "unit": str(payload.get("unit", "")).strip() or "units",
        "needs": str(payload.get("needs", "this step")),
        "receiver": receiver,
        "sender": sender,
    }.items())


def render(etype: ErrorType, index: int, state: EdgeState, values: Mapping[str, str] | None = None) -> QuestionSpec:
    if etype not in LIBRARY or not 0 <= index < len(LIBRARY[etype]):
        raise ContractError(f"no template {index} for type {etype}")
    tid, text = LIBRARY[etype][index]
    values = slot_values(state) if values is None else values
    names = _SLOTS[text]
    rendered = text.format(**values)
    return QuestionSpec(template_id=tid, slots=tuple(values[n] for n in names), rendered=rendered,
                        token_count=count_tokens(rendered))


def template_index(etype: ErrorType, template_id: str) -> int:
    try:
        owner, idx = _BY_ID[template_id]
    except KeyError:
        raise ContractError(f"template {template_id!r} is not in the library") from None
    if owner is not etype:
        raise ContractError(f"template {template_id!r} belongs to {owner.value}, not {etype.value}")
    return idx


def freeform(text: str) -> QuestionSpec:
    return QuestionSpec(template_id=FREEFORM_ID, slots=(), rendered=text, token_count=count_tokens(text))


def max_question_tokens(state: EdgeState) -> int:
    return _max_tokens(state.message, state.query, state.sender, state.receiver)


@functools.lru_cache(maxsize=8192)
def _max_tokens(message: str, query: str, sender: str, receiver: str) -> int:
    values = dict(_slot_values(message, query, sender, receiver))
    return max(count_tokens(text.format(**values)) for rows in LIBRARY.values() for _, text in rows)
