"""Structured plan format: strict parsing, placeholder dependencies, and
conversion of executed trajectories into plan supervision.

A plan is a JSON array of steps, each with exactly three keys
(description, tool_name, parameters). Placeholders like
"[Person identified in Step 1]" encode backward dependencies.
"""

from __future__ import annotations

import difflib
import json
import re
from dataclasses import dataclass

from .orchestrator import Trajectory
from .protocol import FinalAnswer, ToolCall, render_observation

PLAN_TOOLS = ("image_search", "text_search", "web_visit", "none")
PLAN_TOOL_PARAM = {"image_search": "image_path", "text_search": "query", "web_visit": "url"}
STEP_KEYS = frozenset({"description", "tool_name", "parameters"})
MIN_STEPS = 2
MAX_STEPS = 10

# Minimum overlap (characters) between an observation and a later value
# before the value is considered derived from that observation.
PROVENANCE_MIN_OVERLAP = 12

_PLACEHOLDER_BRACKET_RE = re.compile(r"\[([^\[\]]+)\]")
_STEP_REF_RE = re.compile(r"\bstep\s+(\d+)\b", re.IGNORECASE)
_STEP_WORD_RE = re.compile(r"\bstep\b", re.IGNORECASE)


class PlanError(ValueError):
    """Base class for plan parsing/validation failures."""

    def __init__(self, message: str, step: int | None = None):
        super().__init__(message if step is None else f"step {step}: {message}")
        self.step = step


class NotJsonArrayError(PlanError):
    pass


class ExtraProseError(PlanError):
    pass


class BadStepShapeError(PlanError):
    pass


class UnknownToolError(PlanError):
    pass


class MalformedPlaceholderError(PlanError):
    pass


class ForwardReferenceError(PlanError):
    pass


class MissingFinalReasoningStepError(PlanError):
    pass


class StepCountOutOfRangeError(PlanError):
    pass


class ToolParamMismatchError(PlanError):
    pass


class UnmappableTurnError(PlanError):
    pass


@dataclass(frozen=True)
class PlanStep:
    index: int  # 1-based
    description: str
    tool_name: str
    parameters: dict


@dataclass(frozen=True)
class Plan:
    steps: tuple


@dataclass(frozen=True)
class Placeholder:
    raw: str  # bracketed text, e.g. "[Person identified in Step 1]"
    referenced_step: int
    host: str  # "step 3 description" or "step 3 parameters.query"
    start: int  # offset of raw inside the host string


@dataclass(frozen=True)
class DependencyGraph:
    edges: frozenset  # (dependent step, dependency step), dependent > dependency
    order: tuple  # topological order; equals step order by construction


def parse_plan(text: str) -> Plan:
    """Strict parse of exactly one JSON array of three-key step objects."""
    stripped = text.strip()
    if not stripped:
        raise NotJsonArrayError("empty plan text")
    try:
        data = json.loads(stripped)
    except json.JSONDecodeError:
        start = stripped.find("[")
        if start >= 0:
            try:
                candidate, _end = json.JSONDecoder().raw_decode(stripped, start)
            except json.JSONDecodeError:
                raise NotJsonArrayError("plan is not valid JSON") from None
            if isinstance(candidate, list):
                raise ExtraProseError("non-whitespace content outside the JSON array") from None
        raise NotJsonArrayError("plan is not valid JSON") from None
    if not isinstance(data, list):
        raise NotJsonArrayError(f"expected a JSON array, got {type(data).__name__}")

    steps = []
    for position, item in enumerate(data, start=1):
        if not isinstance(item, dict):
            raise BadStepShapeError("step is not an object", step=position)
        if set(item.keys()) != STEP_KEYS:
            raise BadStepShapeError(
                f"step keys must be exactly {sorted(STEP_KEYS)}, got {sorted(item.keys())}",
                step=position,
            )
        description = item["description"]
        tool_name = item["tool_name"]
        parameters = item["parameters"]
        if not isinstance(description, str) or not description.strip():
            raise BadStepShapeError("description must be a non-empty string", step=position)
        if not isinstance(tool_name, str):
            raise BadStepShapeError("tool_name must be a string", step=position)
        if tool_name not in PLAN_TOOLS:
            raise UnknownToolError(f"unknown tool {tool_name!r}", step=position)
        if not isinstance(parameters, dict):
            raise BadStepShapeError("parameters must be an object", step=position)
        steps.append(
            PlanStep(index=position, description=description, tool_name=tool_name, parameters=parameters)
        )
    return Plan(steps=tuple(steps))


def serialize_plan(plan: Plan) -> str:
    """Canonical JSON array form; parse_plan(serialize_plan(p)) == p."""
    return json.dumps(
        [
            {"description": s.description, "tool_name": s.tool_name, "parameters": s.parameters}
            for s in plan.steps
        ],
        ensure_ascii=False,
    )


def _string_fields(step: PlanStep):
    """(host name, string value) pairs to scan for placeholders."""
    yield f"step {step.index} description", step.description
    for key, value in step.parameters.items():
        if isinstance(value, str):
            yield f"step {step.index} parameters.{key}", value


def _placeholders_in(host: str, text: str):
    found = []
    for match in _PLACEHOLDER_BRACKET_RE.finditer(text):
        inner = match.group(1)
        ref = _STEP_REF_RE.search(inner)
        if ref:
            found.append(
                Placeholder(
                    raw=match.group(0),
                    referenced_step=int(ref.group(1)),
                    host=host,
                    start=match.start(),
                )
            )
        elif _STEP_WORD_RE.search(inner):
            raise MalformedPlaceholderError(f"bracketed step reference without a number: {match.group(0)!r}")
    return found


def extract_placeholders(plan: Plan) -> list:
    """All bracketed Step-N references in descriptions and parameter values."""
    placeholders = []
    for step in plan.steps:
        for host, text in _string_fields(step):
            placeholders.extend(_placeholders_in(host, text))
    return placeholders


def validate_plan(plan: Plan, enforce_step_bounds: bool = True) -> DependencyGraph:
    """Enforce plan invariants and build the backward dependency graph.

    Supervision data keeps the hard 2..10 step bound; runtime callers may
    relax it (enforce_step_bounds=False keeps only non-emptiness).
    """
    count = len(plan.steps)
    if enforce_step_bounds:
        if not MIN_STEPS <= count <= MAX_STEPS:
            raise StepCountOutOfRangeError(f"plan has {count} steps, expected {MIN_STEPS}..{MAX_STEPS}")
    elif count < 1:
        raise StepCountOutOfRangeError("plan has no steps")
    if plan.steps[-1].tool_name != "none":
        raise MissingFinalReasoningStepError("final step must be a reasoning step with tool_name none")
    for step in plan.steps:
        if step.tool_name == "none":
            if step.parameters:
                raise ToolParamMismatchError("tool none takes no parameters", step=step.index)
        else:
            required = PLAN_TOOL_PARAM[step.tool_name]
            if required not in step.parameters:
                raise ToolParamMismatchError(
                    f"tool {step.tool_name} requires parameter {required!r}", step=step.index
                )

    edges = set()
    for step in plan.steps:
        for host, text in _string_fields(step):
            for placeholder in _placeholders_in(host, text):
                ref = placeholder.referenced_step
                if ref < 1 or ref >= step.index:
                    raise ForwardReferenceError(
                        f"placeholder {placeholder.raw!r} references step {ref}", step=step.index
                    )
                edges.add((step.index, ref))
    return DependencyGraph(edges=frozenset(edges), order=tuple(s.index for s in plan.steps))


# --- Trajectory -> plan supervision --------------------------------------


def _first_sentence(text: str, limit: int = 200) -> str:
    text = " ".join(text.split())
    if not text:
        return ""
    match = re.search(r"(?<=[.!?])\s", text)
    sentence = text[: match.start()] if match else text
    return sentence[:limit].strip()


_TOOL_STEP_TEMPLATES = {
    "image_search": "Identify the subject with a reverse image search.",
    "text_search": "Search the web for supporting facts.",
    "web_visit": "Read the relevant webpage for details.",
}


def _provenance_placeholder(value: str, sources) -> str:
    """Replace the longest earlier-observation overlap with a step placeholder."""
    best = None
    folded_value = value.casefold()
    for step_index, observation_text in sources:
        matcher = difflib.SequenceMatcher(None, folded_value, observation_text.casefold(), autojunk=False)
        match = matcher.find_longest_match(0, len(folded_value), 0, len(observation_text))
        if match.size >= PROVENANCE_MIN_OVERLAP:
            if best is None or match.size > best[0]:
                best = (match.size, step_index, match.a)
    if best is None:
        return value
    size, step_index, start = best
    return value[:start] + f"[Result from Step {step_index}]" + value[start + size :]


def trajectory_to_plan(traj: Trajectory, strict: bool = False) -> Plan:
    """Convert an executed trajectory into a validated plan.

    Tool turns map to plan steps; code turns become reasoning steps (the
    plan vocabulary has no code tool), or raise in strict mode. Values
    lifted from earlier observations are replaced by step placeholders.
    The result always passes validate_plan or this raises.
    """
    raw_steps = []  # (tool_name, parameters, description, observation_text)
    for record in traj.turns:
        action = record.segments.action
        summary = _first_sentence(record.segments.think)
        if isinstance(action, ToolCall):
            observation_text = render_observation(record.observation) if record.observation else ""
            if action.name == "code":
                if strict:
                    raise UnmappableTurnError("code turn has no planner tool equivalent")
                description = summary or "Perform an image operation to improve perception."
                raw_steps.append(("none", {}, description, observation_text))
                continue
            param_key = PLAN_TOOL_PARAM[action.name]
            value = action.values[0]
            description = summary or _TOOL_STEP_TEMPLATES[action.name]
            raw_steps.append((action.name, {param_key: value}, description, observation_text))
        elif isinstance(action, FinalAnswer):
            description = summary or "Analyze the gathered information and determine the final answer."
            raw_steps.append(("none", {}, description, ""))

    if not raw_steps or raw_steps[-1][0] != "none":
        raw_steps.append(("none", {}, "Verify the gathered evidence and conclude.", ""))

    steps = []
    sources = []  # (step index, observation text) for provenance matching
    for position, (tool_name, parameters, description, observation_text) in enumerate(raw_steps, start=1):
        parameters = {
            key: _provenance_placeholder(value, sources) if isinstance(value, str) else value
            for key, value in parameters.items()
        }
        description = _provenance_placeholder(description, sources)
        steps.append(
            PlanStep(index=position, description=description, tool_name=tool_name, parameters=parameters)
        )
        if observation_text:
            sources.append((position, observation_text))

    plan = Plan(steps=tuple(steps))
    validate_plan(plan)
    return plan


def plan_supervision_record(traj: Trajectory, plan: Plan) -> dict:
    """Export row coupling the question with the canonical plan JSON."""
    from .prompts import PLANNER_PROMPT

    canonical = serialize_plan(plan)
    return {
        "question": traj.task.question,
        "images": list(traj.task.images),
        "plan_canonical_json": canonical,
        "system": PLANNER_PROMPT,
        "messages": [
            {"role": "user", "content": traj.task.question},
            {"role": "assistant", "content": canonical},
        ],
        "meta": {"task_id": traj.task.id, "mix_tag": "planner"},
    }
