"""ReAct episode loop: prompts, streaming stop detection, tool dispatch.

An episode is strictly sequential; batches of episodes are independent.
All nondeterminism is injected (endpoint, clock, seeds) so that scripted
runs and replays are bit-reproducible.
"""

from __future__ import annotations

import json
import logging
import time
from dataclasses import dataclass, field, replace
from pathlib import Path

from . import prompts
from .endpoints import EndpointError, ScriptedEndpoint, TokenUsage
from .protocol import (
    CodeEntry,
    FinalAnswer,
    Malformed,
    Observation,
    ToolCall,
    TurnSegments,
    detect_stop,
    observation_from_dict,
    observation_to_dict,
    parse_turn,
    render_observation,
)
from .toolbox import (
    MissingImageError,
    SandboxUnreachableError,
    ToolUnavailableError,
    TranscriptMiss,
)

logger = logging.getLogger(__name__)

MODE_GENERAL = "general"
MODE_DEEP_RESEARCH = "deepresearch"
MODE_PLAN = "plan"
MODE_DIRECT = "direct"
MODES = (MODE_GENERAL, MODE_DEEP_RESEARCH, MODE_PLAN, MODE_DIRECT)

TERMINATION_ANSWERED = "Answered"
TERMINATION_MAX_TURNS = "MaxTurns"
TERMINATION_TOKEN_BUDGET = "TokenBudget"
TERMINATION_MODEL_ERROR = "ModelError"

_MODE_PROMPTS = {
    MODE_GENERAL: prompts.GENERAL_PROMPT,
    MODE_DEEP_RESEARCH: prompts.DEEP_RESEARCH_PROMPT,
    MODE_PLAN: prompts.PLANNER_PROMPT,
    MODE_DIRECT: prompts.DIRECT_PROMPT,
}

_MODE_TOOLS = {
    MODE_GENERAL: ("code",),
    MODE_DEEP_RESEARCH: ("image_search", "text_search", "web_visit", "code"),
    MODE_PLAN: (),
    MODE_DIRECT: (),
}


class StepClock:
    """Deterministic clock for reproducible timing fields in tests/runs."""

    def __init__(self, step: float = 1.0):
        self.step = step
        self._now = 0.0

    def __call__(self) -> float:
        now = self._now
        self._now += self.step
        return now


@dataclass(frozen=True)
class Task:
    id: str
    question: str
    images: tuple[str, ...] = ()
    gold_answer: str | None = None
    source: str = ""

    def __post_init__(self):
        if not self.question.strip():
            raise ValueError("task question must be non-empty")


@dataclass(frozen=True)
class EpisodeConfig:
    mode: str = MODE_DEEP_RESEARCH
    max_turns: int = 12
    max_total_tokens: int = 32000
    enabled_tools: tuple[str, ...] | None = None
    temperature: float | None = None
    seed: int | None = None

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"unknown mode: {self.mode}")
        if self.max_turns < 1:
            raise ValueError("max_turns must be >= 1")

    @property
    def effective_max_turns(self) -> int:
        return 1 if self.mode in (MODE_DIRECT, MODE_PLAN) else self.max_turns

    @property
    def effective_tools(self) -> tuple[str, ...]:
        if self.mode in (MODE_DIRECT, MODE_PLAN):
            return ()
        if self.enabled_tools is not None:
            return self.enabled_tools
        return _MODE_TOOLS[self.mode]


@dataclass
class TurnRecord:
    segments: TurnSegments
    observation: Observation | None = None
    model_latency: float = 0.0
    tool_latency: float = 0.0
    prompt_tokens: int = 0
    completion_tokens: int = 0
    produced_images: dict = field(default_factory=dict)
    retries: int = 0


@dataclass
class Trajectory:
    task: Task
    mode: str
    turns: list
    final_answer: str | None
    termination: str
    episode_key: str = ""

    @property
    def total_prompt_tokens(self) -> int:
        return sum(t.prompt_tokens for t in self.turns)

    @property
    def total_completion_tokens(self) -> int:
        return sum(t.completion_tokens for t in self.turns)

    @property
    def total_tokens(self) -> int:
        return self.total_prompt_tokens + self.total_completion_tokens


@dataclass
class RolloutSet:
    task: Task
    trajectories: list
    agreement: tuple | None = None


def build_system_prompt(mode: str) -> str:
    """Byte-stable system prompt for a dialogue mode."""
    if mode not in _MODE_PROMPTS:
        raise ValueError(f"unknown mode: {mode}")
    return _MODE_PROMPTS[mode]


def _initial_messages(task: Task, mode: str) -> tuple[list, dict]:
    """System + first user message; returns (messages, image label registry)."""
    registry = {}
    parts = [{"type": "text", "text": task.question}]
    images = list(task.images)
    for index, path in enumerate(images, start=1):
        label = "<image>" if len(images) == 1 else f"<image {index}>"
        registry[label] = str(Path(path).resolve())
        parts.append({"type": "image", "path": registry[label]})
    user = {"role": "user", "content": parts if images else task.question}
    return [{"role": "system", "content": build_system_prompt(mode)}, user], registry


def _resolve_image_arg(arg: str, registry: dict, workspace: Path | None):
    if arg in registry:
        return registry[arg]
    candidate = Path(arg)
    if candidate.is_file():
        return str(candidate.resolve())
    if workspace is not None and (workspace / arg).is_file():
        return str((workspace / arg).resolve())
    return None


def _strip_leading_think(text: str) -> tuple[str, str]:
    from .protocol import THINK_CLOSE, THINK_OPEN

    stripped = text.lstrip()
    if stripped.startswith(THINK_OPEN):
        close = stripped.find(THINK_CLOSE)
        if close >= 0:
            think = stripped[len(THINK_OPEN) : close].strip()
            return think, stripped[close + len(THINK_CLOSE) :].strip()
    return "", text.strip()


class _CodeDispatcher:
    """Runs code via the sandbox, optionally through the transcript cache.

    When a transcript is configured, produced image bytes are stored with
    the response so a replay can rematerialize the workspace.
    """

    def __init__(self, tools, transcript, episode_key: str):
        self.tools = tools
        self.transcript = transcript
        self.episode_key = episode_key
        self.call_index = 0

    def run(self, code: str, workspace: Path) -> "object":
        self.call_index += 1
        if self.transcript is None:
            return self.tools.execute_code(code, workspace)

        def fetcher() -> dict:
            result = self.tools.execute_code(code, workspace)
            files = {}
            for rel in result.produced_images:
                import base64

                files[rel] = base64.b64encode((workspace / rel).read_bytes()).decode("ascii")
            return {
                "stdout": result.stdout,
                "stderr": result.stderr,
                "exit_status": result.exit_status,
                "produced_images": list(result.produced_images),
                "wall_time": result.wall_time,
                "files": files,
            }

        args = {"episode": self.episode_key, "call_index": self.call_index, "code": code}
        response = self.transcript.fetch("code", args, fetcher)
        for rel, blob in response.get("files", {}).items():
            import base64

            target = workspace / rel
            if not target.exists():
                target.parent.mkdir(parents=True, exist_ok=True)
                target.write_bytes(base64.b64decode(blob))
        from .toolbox import CodeResult

        return CodeResult(
            stdout=response["stdout"],
            stderr=response["stderr"],
            exit_status=response["exit_status"],
            produced_images=tuple(response["produced_images"]),
            wall_time=response["wall_time"],
        )


def _dispatch_tool(
    call: ToolCall,
    tools,
    workspace: Path | None,
    registry: dict,
    sub_image_count: int,
    code_dispatcher: _CodeDispatcher,
    enabled: tuple,
) -> tuple[Observation, dict, int]:
    """Returns (observation, new produced-image labels, new sub-image count)."""
    produced: dict = {}
    if call.name not in enabled:
        return Observation.from_error(f"tool not available in this mode: {call.name}"), produced, sub_image_count
    try:
        if call.name == "image_search":
            resolved, errors = [], []
            for arg in call.arguments["image_paths"]:
                path = _resolve_image_arg(arg, registry, workspace)
                if path is None:
                    errors.append(f"unknown image reference: {arg}")
                else:
                    resolved.append(path)
            if not resolved:
                return Observation.from_error("; ".join(errors) or "no images to search"), produced, sub_image_count
            obs = tools.image_search(resolved)
            if errors:
                from .protocol import ErrorEntry

                obs = Observation(entries=tuple(ErrorEntry(e) for e in errors) + obs.entries)
            return obs, produced, sub_image_count
        if call.name == "text_search":
            return tools.text_search(call.arguments["queries"]), produced, sub_image_count
        if call.name == "web_visit":
            return tools.web_visit(call.arguments["urls"]), produced, sub_image_count
        if call.name == "code":
            if workspace is None:
                return Observation.from_error("no workspace configured for code execution"), produced, sub_image_count
            result = code_dispatcher.run(call.arguments["code"], workspace)
            refs = []
            for rel in result.produced_images:
                sub_image_count += 1
                label = f"<sub-image {sub_image_count}>"
                refs.append(label)
                produced[label] = rel
                registry[label] = str((workspace / rel).resolve())
            entry = CodeEntry(
                stdout=result.stdout,
                stderr=result.stderr,
                exit_status=result.exit_status,
                image_refs=tuple(refs),
            )
            return Observation(entries=(entry,)), produced, sub_image_count
        return Observation.from_error(f"unknown tool: {call.name}"), produced, sub_image_count
    except TranscriptMiss:
        raise
    except (ToolUnavailableError, MissingImageError, SandboxUnreachableError, ValueError) as exc:
        return Observation.from_error(f"{call.name} failed: {exc}"), produced, sub_image_count


def run_episode(
    task: Task,
    cfg: EpisodeConfig,
    model,
    tools=None,
    workspace: Path | None = None,
    clock=time.monotonic,
    episode_key: str | None = None,
) -> Trajectory:
    """Run one ReAct episode to completion.

    Endpoint failures terminate the trajectory with ModelError rather than
    raising, so batch runners never crash on a bad episode.
    """
    for path in task.images:
        if not Path(path).is_file():
            raise MissingImageError(str(path))
    if workspace is not None:
        workspace = Path(workspace)
        workspace.mkdir(parents=True, exist_ok=True)

    episode_key = episode_key or task.id
    messages, registry = _initial_messages(task, cfg.mode)
    enabled = cfg.effective_tools
    transcript = getattr(tools, "transcript", None) if tools is not None else None
    code_dispatcher = _CodeDispatcher(tools, transcript, episode_key)

    turns: list = []
    final_answer = None
    termination = TERMINATION_MAX_TURNS
    sub_image_count = 0
    total_tokens = 0
    tagless = cfg.mode in (MODE_DIRECT, MODE_PLAN)

    for turn_index in range(cfg.effective_max_turns):
        seg, usage, model_latency, retries = _generate_turn(model, messages, cfg, clock, tagless)
        if seg is None:
            termination = TERMINATION_MODEL_ERROR
            break
        record = TurnRecord(
            segments=seg,
            model_latency=model_latency,
            prompt_tokens=usage.prompt_tokens,
            completion_tokens=usage.completion_tokens,
            retries=retries,
        )
        total_tokens += usage.total_tokens
        messages.append({"role": "assistant", "content": seg.raw})

        if seg.is_malformed:
            turns.append(record)
            termination = TERMINATION_MODEL_ERROR
            break
        if isinstance(seg.action, FinalAnswer):
            turns.append(record)
            final_answer = seg.action.text
            termination = TERMINATION_ANSWERED
            break

        last_turn = turn_index == cfg.effective_max_turns - 1
        over_budget = total_tokens >= cfg.max_total_tokens
        if last_turn or over_budget:
            turns.append(record)
            termination = TERMINATION_TOKEN_BUDGET if over_budget else TERMINATION_MAX_TURNS
            break

        t0 = clock()
        obs, produced, sub_image_count = _dispatch_tool(
            seg.action, tools, workspace, registry, sub_image_count, code_dispatcher, enabled
        )
        record.tool_latency = clock() - t0
        record.observation = obs
        record.produced_images = produced
        turns.append(record)

        parts = [{"type": "text", "text": render_observation(obs)}]
        for label in produced:
            parts.append({"type": "image", "path": registry[label]})
        messages.append({"role": "observation", "content": parts})

    return Trajectory(
        task=task,
        mode=cfg.mode,
        turns=turns,
        final_answer=final_answer,
        termination=termination,
        episode_key=episode_key,
    )


def _generate_turn(model, messages, cfg: EpisodeConfig, clock, tagless: bool):
    """One model call (plus one corrective retry on a malformed turn)."""
    retries = 0
    usage = TokenUsage()
    while True:
        t0 = clock()
        try:
            result = model.complete(
                messages,
                temperature=cfg.temperature,
                seed=cfg.seed,
                stop_check=None if tagless else detect_stop,
            )
        except EndpointError as exc:
            logger.warning("model endpoint failed: %s", exc)
            return None, usage, clock() - t0, retries
        latency = clock() - t0
        usage = TokenUsage(
            prompt_tokens=usage.prompt_tokens + result.usage.prompt_tokens,
            completion_tokens=usage.completion_tokens + result.usage.completion_tokens,
        )
        if tagless:
            think, answer = _strip_leading_think(result.content)
            seg = TurnSegments(think=think, action=FinalAnswer(answer), raw=result.content)
            parsed = parse_turn(result.content)
            if isinstance(parsed.action, FinalAnswer) and parsed.think:
                seg = parsed
            return seg, usage, latency, retries
        seg = parse_turn(result.content)
        if not seg.is_malformed or retries >= 1:
            return seg, usage, latency, retries
        retries += 1


def run_rollouts(
    task: Task,
    cfg: EpisodeConfig,
    model,
    tools=None,
    workspace_root: Path | None = None,
    n: int = 4,
    judge=None,
    clock=time.monotonic,
) -> RolloutSet:
    """n independent episodes with distinct sampling seeds."""
    from .judging import answers_agree

    if n < 1:
        raise ValueError("rollout count must be >= 1")
    trajectories = []
    for index in range(n):
        seed = (cfg.seed if cfg.seed is not None else 0) + index
        rollout_cfg = replace(cfg, seed=seed)
        workspace = None
        if workspace_root is not None:
            workspace = Path(workspace_root) / f"rollout_{index:02d}"
        trajectories.append(
            run_episode(
                task,
                rollout_cfg,
                model,
                tools,
                workspace=workspace,
                clock=clock,
                episode_key=f"{task.id}#r{index}",
            )
        )
    agreement = None
    if task.gold_answer is not None:
        flags = []
        for traj in trajectories:
            if traj.final_answer is None:
                flags.append(False)
                continue
            verdict, _ = answers_agree(task.question, task.gold_answer, traj.final_answer, judge)
            flags.append(verdict is True)
        agreement = tuple(flags)
    return RolloutSet(task=task, trajectories=trajectories, agreement=agreement)


# --- Trajectory (de)serialization ---------------------------------------


def _action_to_dict(action) -> dict:
    if isinstance(action, ToolCall):
        return {"kind": "tool_call", "name": action.name, "arguments": action.arguments}
    if isinstance(action, FinalAnswer):
        return {"kind": "answer", "text": action.text}
    return {"kind": "malformed", "reason": action.reason, "detail": action.detail}


def _action_from_dict(data: dict):
    kind = data["kind"]
    if kind == "tool_call":
        return ToolCall(data["name"], data["arguments"])
    if kind == "answer":
        return FinalAnswer(data["text"])
    return Malformed(data["reason"], data.get("detail", ""))


def trajectory_to_dict(traj: Trajectory) -> dict:
    return {
        "task": {
            "id": traj.task.id,
            "question": traj.task.question,
            "images": list(traj.task.images),
            "gold_answer": traj.task.gold_answer,
            "source": traj.task.source,
        },
        "mode": traj.mode,
        "turns": [
            {
                "think": record.segments.think,
                "action": _action_to_dict(record.segments.action),
                "raw": record.segments.raw,
                "observation": observation_to_dict(record.observation)
                if record.observation is not None
                else None,
                "model_latency": record.model_latency,
                "tool_latency": record.tool_latency,
                "prompt_tokens": record.prompt_tokens,
                "completion_tokens": record.completion_tokens,
                "produced_images": dict(record.produced_images),
            }
            for record in traj.turns
        ],
        "final_answer": traj.final_answer,
        "termination": traj.termination,
        "episode_key": traj.episode_key,
        "total_prompt_tokens": traj.total_prompt_tokens,
        "total_completion_tokens": traj.total_completion_tokens,
    }


def trajectory_from_dict(data: dict) -> Trajectory:
    task = Task(
        id=data["task"]["id"],
        question=data["task"]["question"],
        images=tuple(data["task"]["images"]),
        gold_answer=data["task"].get("gold_answer"),
        source=data["task"].get("source", ""),
    )
    turns = []
    for item in data["turns"]:
        turns.append(
            TurnRecord(
                segments=TurnSegments(
                    think=item["think"],
                    action=_action_from_dict(item["action"]),
                    raw=item.get("raw", ""),
                ),
                observation=observation_from_dict(item["observation"])
                if item.get("observation") is not None
                else None,
                model_latency=item.get("model_latency", 0.0),
                tool_latency=item.get("tool_latency", 0.0),
                prompt_tokens=item.get("prompt_tokens", 0),
                completion_tokens=item.get("completion_tokens", 0),
                produced_images=dict(item.get("produced_images", {})),
            )
        )
    return Trajectory(
        task=task,
        mode=data["mode"],
        turns=turns,
        final_answer=data.get("final_answer"),
        termination=data["termination"],
        episode_key=data.get("episode_key", ""),
    )


def dumps_trajectory(traj: Trajectory) -> str:
    """Canonical single-line JSON; byte-stable given equal content."""
    return json.dumps(trajectory_to_dict(traj), sort_keys=True, ensure_ascii=False, separators=(",", ":"))


def save_trajectories(path, trajectories) -> None:
    with open(path, "w", encoding="utf-8") as handle:
        for traj in trajectories:
            handle.write(dumps_trajectory(traj) + "\n")


def load_trajectories(path) -> list:
    out = []
    with open(path, encoding="utf-8") as handle:
        for line in handle:
            line = line.strip()
            if line:
                out.append(trajectory_from_dict(json.loads(line)))
    return out


def replay_episode(source: Trajectory, cfg: EpisodeConfig, tools=None, workspace: Path | None = None) -> Trajectory:
    """Re-run an episode feeding back the stored turn texts.

    Tool results come from the transcript cache (or a deterministic stub),
    so every semantic field is recomputed; timing and token fields are
    observational and carried over from the source when the turn sequences
    align.
    """
    script = [record.segments.raw for record in source.turns]
    usages = [(record.prompt_tokens, record.completion_tokens) for record in source.turns]
    model = ScriptedEndpoint(script, usages=usages)
    replayed = run_episode(
        source.task,
        cfg,
        model,
        tools,
        workspace=workspace,
        clock=StepClock(0.0),
        episode_key=source.episode_key or source.task.id,
    )
    for ours, theirs in zip(replayed.turns, source.turns):
        ours.model_latency = theirs.model_latency
        ours.tool_latency = theirs.tool_latency
        ours.prompt_tokens = theirs.prompt_tokens
        ours.completion_tokens = theirs.completion_tokens
    return replayed
