"""Agent output grammar: tags, tool-call schemas, and observation rendering.

This module is the single source of truth for the tag strings and tool
names used across the engine. Parsing is total: arbitrary bytes never
raise, they classify as ``Malformed`` with a machine-readable reason so
the curation stage can filter on it.
"""

from __future__ import annotations

import json
import textwrap
from dataclasses import dataclass, field
from typing import Union

THINK_OPEN = "<think>"
THINK_CLOSE = "</think>"
TOOL_CALL_OPEN = "<tool_call>"
TOOL_CALL_CLOSE = "</tool_call>"
ANSWER_OPEN = "<answer>"
ANSWER_CLOSE = "</answer>"
CODE_OPEN = "<code>"
CODE_CLOSE = "</code>"
OBSERVATION_OPEN = "<observation>"
OBSERVATION_CLOSE = "</observation>"

TOOL_IMAGE_SEARCH = "image_search"
TOOL_TEXT_SEARCH = "text_search"
TOOL_WEB_VISIT = "web_visit"
TOOL_CODE = "code"

# Exactly one argument key per tool; anything else is a malformed call.
TOOL_ARG_KEYS = {
    TOOL_IMAGE_SEARCH: "image_paths",
    TOOL_TEXT_SEARCH: "queries",
    TOOL_WEB_VISIT: "urls",
    TOOL_CODE: "code",
}
LIST_ARG_TOOLS = frozenset({TOOL_IMAGE_SEARCH, TOOL_TEXT_SEARCH, TOOL_WEB_VISIT})

# Malformation reason codes (machine-readable, consumed by the format filter).
MISSING_THINK = "MissingThink"
MULTIPLE_ACTIONS = "MultipleActions"
BAD_JSON = "BadJson"
UNKNOWN_TOOL = "UnknownTool"
BAD_ARG_KEYS = "BadArgKeys"
BAD_ARG_VALUES = "BadArgValues"
NO_ACTION = "NoAction"

MALFORMED_REASONS = frozenset(
    {
        MISSING_THINK,
        MULTIPLE_ACTIONS,
        BAD_JSON,
        UNKNOWN_TOOL,
        BAD_ARG_KEYS,
        BAD_ARG_VALUES,
        NO_ACTION,
    }
)

NO_RESULTS_SENTINEL = "No results found."


@dataclass(frozen=True)
class ToolCall:
    """A parsed tool invocation with schema-checked arguments."""

    name: str
    arguments: dict

    def __post_init__(self):
        if self.name not in TOOL_ARG_KEYS:
            raise ValueError(f"unknown tool: {self.name}")

    @property
    def values(self) -> list:
        """The single argument value as a list (code wraps its string)."""
        value = self.arguments[TOOL_ARG_KEYS[self.name]]
        return list(value) if isinstance(value, list) else [value]


@dataclass(frozen=True)
class FinalAnswer:
    text: str


@dataclass(frozen=True)
class Malformed:
    reason: str
    detail: str = ""


Action = Union[ToolCall, FinalAnswer, Malformed]


@dataclass(frozen=True)
class TurnSegments:
    """One model turn split into reasoning and exactly one action.

    ``raw`` keeps the original text for storage/debugging and is excluded
    from equality so round-trips compare on content.
    """

    think: str
    action: Action
    raw: str = field(default="", compare=False)

    @property
    def is_malformed(self) -> bool:
        return isinstance(self.action, Malformed)


class StopKind:
    AWAIT_MORE = "AwaitMore"
    STOP_AT_TOOL_CALL = "StopAtToolCall"
    STOP_AT_ANSWER = "StopAtAnswer"


@dataclass(frozen=True)
class StopDecision:
    """Where streaming generation should halt, if anywhere yet.

    ``offset`` points just past the closing tag in the buffer (character
    offset); it is None while more output is awaited.
    """

    kind: str
    offset: int | None = None

    @property
    def stopped(self) -> bool:
        return self.kind != StopKind.AWAIT_MORE


# --- Observation entries -----------------------------------------------


@dataclass(frozen=True)
class SearchHit:
    title: str
    link: str
    snippet: str = ""
    image: str = ""


@dataclass(frozen=True)
class PageEntry:
    url: str
    content: str


@dataclass(frozen=True)
class CodeEntry:
    stdout: str
    stderr: str = ""
    exit_status: int = 0
    image_refs: tuple[str, ...] = ()


@dataclass(frozen=True)
class ErrorEntry:
    message: str


ObservationEntry = Union[SearchHit, PageEntry, CodeEntry, ErrorEntry]


@dataclass(frozen=True)
class Observation:
    entries: tuple[ObservationEntry, ...] = ()

    @staticmethod
    def from_error(message: str) -> "Observation":
        return Observation(entries=(ErrorEntry(message),))


def _find_spans(text: str, open_tag: str, close_tag: str) -> list[tuple[int, int, str]]:
    """All non-overlapping complete ``open...close`` spans, left to right.

    Returns (start, end, inner content) with ``end`` just past the close tag.
    """
    spans = []
    pos = 0
    while True:
        start = text.find(open_tag, pos)
        if start < 0:
            break
        inner_start = start + len(open_tag)
        close = text.find(close_tag, inner_start)
        if close < 0:
            break
        spans.append((start, close + len(close_tag), text[inner_start:close]))
        pos = close + len(close_tag)
    return spans


def _check_tool_payload(payload: str) -> Action:
    """Validate a <tool_call> JSON payload against the tool schemas."""
    try:
        data = json.loads(payload)
    except (json.JSONDecodeError, RecursionError) as exc:
        return Malformed(BAD_JSON, str(exc))
    if not isinstance(data, dict) or set(data.keys()) != {"name", "arguments"}:
        return Malformed(BAD_JSON, "payload must be an object with name and arguments")
    name, arguments = data["name"], data["arguments"]
    if not isinstance(name, str) or not isinstance(arguments, dict):
        return Malformed(BAD_JSON, "name must be a string and arguments an object")
    if name not in TOOL_ARG_KEYS:
        return Malformed(UNKNOWN_TOOL, name)
    expected_key = TOOL_ARG_KEYS[name]
    if set(arguments.keys()) != {expected_key}:
        got = ",".join(sorted(arguments.keys())) or "<none>"
        return Malformed(BAD_ARG_KEYS, f"{name} expects only {expected_key!r}, got {got}")
    value = arguments[expected_key]
    if name in LIST_ARG_TOOLS:
        if (
            not isinstance(value, list)
            or not value
            or not all(isinstance(v, str) for v in value)
        ):
            return Malformed(BAD_ARG_VALUES, f"{expected_key} must be a non-empty list of strings")
    else:
        if not isinstance(value, str) or not value.strip():
            return Malformed(BAD_ARG_VALUES, "code must be a non-empty string")
    return ToolCall(name, {expected_key: value})


def parse_turn(text: str) -> TurnSegments:
    """Split one complete turn into think + action.

    Never raises on arbitrary input. The first think-span wins; exactly
    one complete action span (tool_call, code, or answer) must exist and
    the think-span must precede it.
    """
    actions = []
    for open_tag, close_tag, kind in (
        (TOOL_CALL_OPEN, TOOL_CALL_CLOSE, "tool_call"),
        (CODE_OPEN, CODE_CLOSE, "code"),
        (ANSWER_OPEN, ANSWER_CLOSE, "answer"),
    ):
        for start, end, inner in _find_spans(text, open_tag, close_tag):
            actions.append((start, end, kind, inner))
    actions.sort(key=lambda item: item[0])

    think_spans = _find_spans(text, THINK_OPEN, THINK_CLOSE)
    think = think_spans[0][2].strip() if think_spans else ""

    if len(actions) > 1:
        return TurnSegments(think, Malformed(MULTIPLE_ACTIONS, f"{len(actions)} actions"), text)
    if not actions:
        return TurnSegments(think, Malformed(NO_ACTION, "no complete action span"), text)

    start, _end, kind, inner = actions[0]
    if not think_spans or not think or think_spans[0][0] > start:
        return TurnSegments(think, Malformed(MISSING_THINK, "reasoning must precede the action"), text)

    if kind == "answer":
        return TurnSegments(think, FinalAnswer(inner.strip()), text)
    if kind == "code":
        code = textwrap.dedent(inner).strip("\n")
        if not code.strip():
            return TurnSegments(think, Malformed(BAD_ARG_VALUES, "empty code block"), text)
        return TurnSegments(think, ToolCall(TOOL_CODE, {"code": code}), text)
    return TurnSegments(think, _check_tool_payload(inner.strip()), text)


def detect_stop(buffer: str) -> StopDecision:
    """Decide whether a streaming buffer already contains a complete action.

    Stops at the first complete closing action tag; monotone in the sense
    that extending the buffer never moves an already-reported stop.
    """
    candidates = []
    for close_tag, kind in (
        (TOOL_CALL_CLOSE, StopKind.STOP_AT_TOOL_CALL),
        (CODE_CLOSE, StopKind.STOP_AT_TOOL_CALL),
        (ANSWER_CLOSE, StopKind.STOP_AT_ANSWER),
    ):
        idx = buffer.find(close_tag)
        if idx >= 0:
            candidates.append((idx, idx + len(close_tag), kind))
    if not candidates:
        return StopDecision(StopKind.AWAIT_MORE)
    idx, end, kind = min(candidates)
    return StopDecision(kind, end)


def _render_entry(entry: ObservationEntry, index: int) -> str:
    if isinstance(entry, SearchHit):
        lines = [f"{index}. {entry.title}", f"link: {entry.link}"]
        if entry.snippet:
            lines.append(f"text: {entry.snippet}")
        if entry.image:
            lines.append(f"image: {entry.image}")
        return "\n".join(lines)
    if isinstance(entry, PageEntry):
        return f"{index}. {entry.url}\n{entry.content}"
    if isinstance(entry, ErrorEntry):
        return f"{index}. error: {entry.message}"
    raise TypeError(f"unrenderable entry: {entry!r}")


def _render_code_entry(entry: CodeEntry) -> str:
    lines = []
    if entry.stdout.strip():
        lines.append(entry.stdout.rstrip("\n"))
    if entry.exit_status != 0:
        lines.append(f"exit status: {entry.exit_status}")
        if entry.stderr.strip():
            lines.append(entry.stderr.rstrip("\n"))
    lines.extend(entry.image_refs)
    return "\n".join(lines) if lines else "(no output)"


def render_observation(obs: Observation) -> str:
    """Deterministic model-visible text for an observation.

    Search/page/error entries are numbered 1..n in order received; code
    entries render their stdout followed by produced image references.
    """
    if not obs.entries:
        body = NO_RESULTS_SENTINEL
    else:
        parts = []
        index = 0
        for entry in obs.entries:
            if isinstance(entry, CodeEntry):
                parts.append(_render_code_entry(entry))
            else:
                index += 1
                parts.append(_render_entry(entry, index))
        body = "\n\n".join(parts)
    return f"{OBSERVATION_OPEN}\n{body}\n{OBSERVATION_CLOSE}"


def serialize_turn(seg: TurnSegments) -> str:
    """Render a well-formed turn back to protocol text.

    Code calls serialize to the tool-call JSON form (the parse-time
    normalization target), so parse(serialize(seg)) == seg.
    """
    if isinstance(seg.action, Malformed):
        raise ValueError(f"cannot serialize a malformed turn: {seg.action.reason}")
    head = f"{THINK_OPEN}{seg.think}{THINK_CLOSE}"
    if isinstance(seg.action, FinalAnswer):
        return f"{head}{ANSWER_OPEN}{seg.action.text}{ANSWER_CLOSE}"
    payload = json.dumps(
        {"name": seg.action.name, "arguments": seg.action.arguments},
        ensure_ascii=False,
    )
    return f"{head}{TOOL_CALL_OPEN}{payload}{TOOL_CALL_CLOSE}"


# --- Observation (de)serialization for trajectory storage ---------------

_ENTRY_KINDS = {
    "search": SearchHit,
    "page": PageEntry,
    "code": CodeEntry,
    "error": ErrorEntry,
}


def observation_to_dict(obs: Observation) -> dict:
    entries = []
    for entry in obs.entries:
        for kind, cls in _ENTRY_KINDS.items():
            if isinstance(entry, cls):
                record = {"kind": kind}
                record.update(entry.__dict__)
                if kind == "code":
                    record["image_refs"] = list(entry.image_refs)
                entries.append(record)
                break
    return {"entries": entries}


def observation_from_dict(data: dict) -> Observation:
    entries = []
    for record in data.get("entries", []):
        record = dict(record)
        kind = record.pop("kind")
        if kind == "code":
            record["image_refs"] = tuple(record.get("image_refs", ()))
        entries.append(_ENTRY_KINDS[kind](**record))
    return Observation(entries=tuple(entries))
