"""Trajectory filtering, function classification, and SFT export.

Stage order is fixed: Format -> Answer -> FinalConsistency -> Stepwise ->
LowQuality. A trajectory failing stage k is never evaluated at stage k+1.
Judge outages yield pending verdicts that re-runs resolve idempotently.
"""

from __future__ import annotations

import csv
import json
import logging
import random
import re
from dataclasses import dataclass, field
from pathlib import Path

from . import prompts
from .judging import (
    FINAL_CONSISTENCY_PROMPT,
    PIPELINE_VERSION,
    STEPWISE_CONSISTENCY_PROMPT,
    answers_agree,
    judge_consistency,
)
from .orchestrator import (
    MODE_PLAN,
    TERMINATION_ANSWERED,
    Trajectory,
)
from .protocol import CodeEntry, FinalAnswer, ToolCall, render_observation

logger = logging.getLogger(__name__)

STAGE_FORMAT = "Format"
STAGE_ANSWER = "Answer"
STAGE_FINAL_CONSISTENCY = "FinalConsistency"
STAGE_STEPWISE = "StepwiseConsistency"
STAGE_LOW_QUALITY = "LowQuality"
STAGE_ORDER = (
    STAGE_FORMAT,
    STAGE_ANSWER,
    STAGE_FINAL_CONSISTENCY,
    STAGE_STEPWISE,
    STAGE_LOW_QUALITY,
)

TAG_ERROR_OPS = "error_ops"
TAG_SINGLE_ROUND = "single_round"
TAG_RE_CROP = "re_crop"
TAG_ZOOM_IN = "zoom_in"
TAG_NAVIGATION = "navigation"
TAG_CONTRAST_OR_OTHER = "contrast_or_other"

LOW_QUALITY_TAGS = frozenset({TAG_ERROR_OPS, TAG_RE_CROP})

MIX_TAGS = ("think_image", "search", "interleaved", "planner", "general_vqa")

_SEARCH_TOOLS = {"image_search", "text_search", "web_visit"}

# Correction markers for the re-crop detector; "shift" is matched as an
# exact word so navigation thinks about "shifting regions" stay clean.
_CORRECTION_RE = re.compile(r"\b(offset|adjust\w*|re-?crop\w*|shift)\b", re.IGNORECASE)
_CROP_RE = re.compile(r"\bcrop", re.IGNORECASE)
_ZOOM_RE = re.compile(r"\bzoom", re.IGNORECASE)
_RESIZE_RE = re.compile(r"\bresize\s*\(", re.IGNORECASE)
_UPSCALE_RE = re.compile(r"\*\s*([0-9]+(?:\.[0-9]+)?)")
_OTHER_OPS = {
    "contrast": re.compile(r"contrast", re.IGNORECASE),
    "enhancement": re.compile(r"enhance", re.IGNORECASE),
    "rotation": re.compile(r"rotat", re.IGNORECASE),
    "denoising": re.compile(r"denois", re.IGNORECASE),
    "annotation": re.compile(r"annotat|\bdraw", re.IGNORECASE),
    "sharpening": re.compile(r"sharpen", re.IGNORECASE),
    "brightness": re.compile(r"brightness", re.IGNORECASE),
    "pixel_analysis": re.compile(r"pixel", re.IGNORECASE),
}


@dataclass(frozen=True)
class FilterVerdict:
    stage: str
    passed: bool | None  # None while pending (judge outage)
    reason: str = ""
    judge_raw: str | None = None
    pipeline_version: str = PIPELINE_VERSION

    def __post_init__(self):
        if self.passed is False and not self.reason:
            raise ValueError("failing verdicts must carry a reason")

    @property
    def pending(self) -> bool:
        return self.passed is None


@dataclass(frozen=True)
class FunctionTags:
    tags: frozenset
    op_counts: dict = field(default_factory=dict, compare=False)
    tool_counts: dict = field(default_factory=dict, compare=False)


def format_filter(traj: Trajectory) -> FilterVerdict:
    """Pure rule check: grammar compliance and a terminal answer."""
    for index, record in enumerate(traj.turns):
        if record.segments.is_malformed:
            return FilterVerdict(
                STAGE_FORMAT,
                False,
                f"malformed turn {index}: {record.segments.action.reason}",
            )
        if isinstance(record.segments.action, FinalAnswer) and index != len(traj.turns) - 1:
            return FilterVerdict(STAGE_FORMAT, False, f"non-terminal answer at turn {index}")
    if traj.termination != TERMINATION_ANSWERED:
        return FilterVerdict(STAGE_FORMAT, False, "no terminal answer tag")
    return FilterVerdict(STAGE_FORMAT, True)


def answer_filter(traj: Trajectory, gold: str | None, judge=None) -> FilterVerdict:
    """Gold agreement: exact-match fast path, judge otherwise."""
    if gold is None:
        return FilterVerdict(STAGE_ANSWER, False, "no gold answer available")
    answer = traj.final_answer or ""
    verdict, raw = answers_agree(traj.task.question, gold, answer, judge)
    if verdict is True:
        return FilterVerdict(STAGE_ANSWER, True, reason=raw if raw == "exact match" else "", judge_raw=None if raw == "exact match" else raw)
    if verdict is False:
        return FilterVerdict(STAGE_ANSWER, False, "final answer did not agree with gold", judge_raw=raw)
    return FilterVerdict(STAGE_ANSWER, None, "judge pending", judge_raw=raw)


def final_consistency_check(traj: Trajectory, judge) -> FilterVerdict:
    """Compare only the last turn's reasoning against the final answer."""
    if not traj.turns:
        return FilterVerdict(STAGE_FINAL_CONSISTENCY, False, "no turns to compare")
    think = traj.turns[-1].segments.think
    if not think.strip():
        return FilterVerdict(STAGE_FINAL_CONSISTENCY, False, "no reasoning to compare")
    answer = traj.final_answer or ""
    verdict, raw = judge_consistency(
        FINAL_CONSISTENCY_PROMPT,
        f"Reasoning:\n{think}\n\nFinal answer:\n{answer}",
        judge,
    )
    if verdict is True:
        return FilterVerdict(STAGE_FINAL_CONSISTENCY, True, judge_raw=raw)
    if verdict is False:
        return FilterVerdict(
            STAGE_FINAL_CONSISTENCY, False, "final answer contradicts last reasoning", judge_raw=raw
        )
    return FilterVerdict(STAGE_FINAL_CONSISTENCY, None, "judge pending", judge_raw=raw)


def _produced_image_steps(traj: Trajectory):
    """(turn index, image label, relative path, following think) tuples."""
    steps = []
    for index, record in enumerate(traj.turns):
        if not record.produced_images:
            continue
        if index + 1 >= len(traj.turns):
            continue
        following_think = traj.turns[index + 1].segments.think
        for label, rel_path in record.produced_images.items():
            steps.append((index, label, rel_path, following_think))
    return steps


def stepwise_consistency_check(traj: Trajectory, vlm_judge, workspace: Path | None = None) -> FilterVerdict:
    """Ask the VLM judge whether each produced image supports the next think."""
    steps = _produced_image_steps(traj)
    if not steps:
        return FilterVerdict(STAGE_STEPWISE, True, "no produced images")
    offending = []
    pending = False
    raws = []
    for index, label, rel_path, think in steps:
        text = f"Image: {rel_path}\nReasoning that followed:\n{think}"
        content = [{"type": "text", "text": text}]
        if workspace is not None and (Path(workspace) / rel_path).is_file():
            content.append({"type": "image", "path": str((Path(workspace) / rel_path).resolve())})
        verdict, raw = judge_consistency(STEPWISE_CONSISTENCY_PROMPT, content, vlm_judge)
        raws.append(f"turn {index} {label}: {raw}")
        if verdict is False:
            offending.append(index)
        elif verdict is None:
            pending = True
    if offending:
        return FilterVerdict(
            STAGE_STEPWISE,
            False,
            f"image contradicts following reasoning at turns {sorted(set(offending))}",
            judge_raw="\n".join(raws),
        )
    if pending:
        return FilterVerdict(STAGE_STEPWISE, None, "judge pending", judge_raw="\n".join(raws))
    return FilterVerdict(STAGE_STEPWISE, True, judge_raw="\n".join(raws))


def _code_turns(traj: Trajectory):
    out = []
    for index, record in enumerate(traj.turns):
        action = record.segments.action
        if isinstance(action, ToolCall) and action.name == "code":
            out.append((index, record, action.arguments["code"]))
    return out


def _code_exit_statuses(traj: Trajectory):
    statuses = []
    for record in traj.turns:
        if record.observation is None:
            continue
        for entry in record.observation.entries:
            if isinstance(entry, CodeEntry):
                statuses.append(entry.exit_status)
    return statuses


def classify_functions(traj: Trajectory) -> FunctionTags:
    """Rule-based function tags and operation counts for one trajectory.

    Tags depend on parsed structure (code strings, thinks, exit codes),
    never on rendered observation text.
    """
    tags = set()
    op_counts: dict = {}
    tool_counts: dict = {}

    for record in traj.turns:
        action = record.segments.action
        if isinstance(action, ToolCall):
            tool_counts[action.name] = tool_counts.get(action.name, 0) + 1

    code_turns = _code_turns(traj)
    if len(code_turns) == 1:
        tags.add(TAG_SINGLE_ROUND)
    if any(status != 0 for status in _code_exit_statuses(traj)):
        tags.add(TAG_ERROR_OPS)

    crop_turn_indexes = []
    for index, _record, code in code_turns:
        if _CROP_RE.search(code):
            crop_turn_indexes.append(index)
            op_counts["cropping"] = op_counts.get("cropping", 0) + 1
        zoomed = bool(_ZOOM_RE.search(code))
        if not zoomed and _RESIZE_RE.search(code):
            zoomed = any(float(m) > 1 for m in _UPSCALE_RE.findall(code))
        if zoomed:
            tags.add(TAG_ZOOM_IN)
            op_counts["zooming"] = op_counts.get("zooming", 0) + 1
        for kind, pattern in _OTHER_OPS.items():
            if pattern.search(code):
                tags.add(TAG_CONTRAST_OR_OTHER)
                op_counts[kind] = op_counts.get(kind, 0) + 1

    correction_seen = False
    for index in crop_turn_indexes:
        for later_index, record_later, code_later in code_turns:
            if later_index <= index or not _CROP_RE.search(code_later):
                continue
            thinks_between = [
                traj.turns[k].segments.think for k in range(index + 1, later_index + 1)
            ]
            if any(_CORRECTION_RE.search(t) for t in thinks_between):
                correction_seen = True
    if correction_seen:
        tags.add(TAG_RE_CROP)
    elif len(crop_turn_indexes) >= 3:
        tags.add(TAG_NAVIGATION)

    return FunctionTags(tags=frozenset(tags), op_counts=op_counts, tool_counts=tool_counts)


def remove_low_quality(tagged) -> list:
    """Drop error-containing and re-crop trajectories from the export set."""
    return [(traj, tags) for traj, tags in tagged if not (tags.tags & LOW_QUALITY_TAGS)]


def function_distribution(tagged) -> dict:
    counts: dict = {}
    for _traj, tags in tagged:
        for kind, count in tags.op_counts.items():
            counts[kind] = counts.get(kind, 0) + count
    return counts


def write_distribution_csv(tagged, path) -> None:
    counts = function_distribution(tagged)
    with open(path, "w", newline="", encoding="utf-8") as handle:
        writer = csv.writer(handle)
        writer.writerow(["operation", "count"])
        for kind in sorted(counts):
            writer.writerow([kind, counts[kind]])


# --- Pipeline ------------------------------------------------------------


@dataclass
class CurationResult:
    trajectory: Trajectory
    verdicts: list
    tags: FunctionTags | None = None

    @property
    def passed_all(self) -> bool:
        return bool(self.verdicts) and all(v.passed is True for v in self.verdicts)

    @property
    def pending(self) -> bool:
        return any(v.pending for v in self.verdicts)


def run_pipeline(
    trajectories,
    judge=None,
    vlm_judge=None,
    workspace_root: Path | None = None,
    prior: dict | None = None,
) -> list:
    """Apply all stages in order with short-circuiting.

    ``prior`` maps episode keys to already-computed verdict dicts; settled
    stages are reused so re-runs only resolve pending ones.
    """
    results = []
    for traj in trajectories:
        key = traj.episode_key or traj.task.id
        reuse = {v["stage"]: v for v in (prior or {}).get(key, []) if v.get("passed") is not None}
        verdicts = []
        tags = None

        def settled(stage, compute):
            if stage in reuse:
                v = reuse[stage]
                return FilterVerdict(
                    stage=v["stage"],
                    passed=v["passed"],
                    reason=v.get("reason", ""),
                    judge_raw=v.get("judge_raw"),
                    pipeline_version=v.get("pipeline_version", PIPELINE_VERSION),
                )
            return compute()

        workspace = None
        if workspace_root is not None:
            workspace = Path(workspace_root) / (traj.episode_key or traj.task.id).replace("#", "_")

        stages = [
            (STAGE_FORMAT, lambda: format_filter(traj)),
            (STAGE_ANSWER, lambda: answer_filter(traj, traj.task.gold_answer, judge)),
            (STAGE_FINAL_CONSISTENCY, lambda: final_consistency_check(traj, judge)),
            (STAGE_STEPWISE, lambda: stepwise_consistency_check(traj, vlm_judge, workspace)),
        ]
        blocked = False
        for stage, compute in stages:
            verdict = settled(stage, compute)
            verdicts.append(verdict)
            if verdict.passed is not True:
                blocked = True
                break
        if not blocked:
            tags = classify_functions(traj)
            if tags.tags & LOW_QUALITY_TAGS:
                bad = ",".join(sorted(tags.tags & LOW_QUALITY_TAGS))
                verdicts.append(FilterVerdict(STAGE_LOW_QUALITY, False, f"low-quality tags: {bad}"))
            else:
                verdicts.append(FilterVerdict(STAGE_LOW_QUALITY, True))
        results.append(CurationResult(trajectory=traj, verdicts=verdicts, tags=tags))
    return results


def verdicts_to_dict(result: CurationResult) -> dict:
    return {
        "episode_key": result.trajectory.episode_key or result.trajectory.task.id,
        "task_id": result.trajectory.task.id,
        "passed_all": result.passed_all,
        "tags": sorted(result.tags.tags) if result.tags is not None else None,
        "verdicts": [
            {
                "stage": v.stage,
                "passed": v.passed,
                "reason": v.reason,
                "judge_raw": v.judge_raw,
                "pipeline_version": v.pipeline_version,
            }
            for v in result.verdicts
        ],
    }


def save_verdicts(results, path) -> None:
    with open(path, "w", encoding="utf-8") as handle:
        for result in results:
            handle.write(json.dumps(verdicts_to_dict(result), sort_keys=True, ensure_ascii=False) + "\n")


def load_verdicts(path) -> dict:
    """episode_key -> verdict dict list, for idempotent pipeline resumes."""
    prior: dict = {}
    with open(path, encoding="utf-8") as handle:
        for line in handle:
            line = line.strip()
            if not line:
                continue
            record = json.loads(line)
            prior[record["episode_key"]] = record["verdicts"]
    return prior


# --- SFT export -----------------------------------------------------------


@dataclass
class SftRecord:
    system_prompt: str
    messages: list
    images: list
    meta: dict


def infer_mix_tag(traj: Trajectory) -> str:
    if traj.mode == MODE_PLAN:
        return "planner"
    if traj.task.source in MIX_TAGS:
        return traj.task.source
    tools_used = set()
    for record in traj.turns:
        action = record.segments.action
        if isinstance(action, ToolCall):
            tools_used.add(action.name)
    has_code = "code" in tools_used
    has_search = bool(tools_used & _SEARCH_TOOLS)
    if has_code and has_search:
        return "interleaved"
    if has_code:
        return "think_image"
    if has_search:
        return "search"
    return "general_vqa"


_MIX_PROMPTS = {
    "think_image": prompts.DEEP_RESEARCH_PROMPT,
    "search": prompts.DEEP_RESEARCH_PROMPT,
    "interleaved": prompts.DEEP_RESEARCH_PROMPT,
    "planner": prompts.PLANNER_PROMPT,
    "general_vqa": prompts.GENERAL_VQA_PROMPT,
}


def trajectory_to_sft(traj: Trajectory, workspace_root: Path | None = None) -> SftRecord:
    """One curated trajectory as a role-tagged SFT conversation."""
    mix_tag = infer_mix_tag(traj)
    images = [str(p) for p in traj.task.images]
    messages = [{"role": "user", "content": traj.task.question}]
    for record in traj.turns:
        messages.append({"role": "assistant", "content": record.segments.raw})
        if record.observation is not None:
            messages.append({"role": "observation", "content": render_observation(record.observation)})
        for _label, rel in sorted(record.produced_images.items()):
            images.append(rel)
    for image in images:
        path = Path(image)
        if not path.is_absolute() and workspace_root is not None:
            key = (traj.episode_key or traj.task.id).replace("#", "_")
            path = Path(workspace_root) / key / image
        if not path.is_file():
            raise FileNotFoundError(f"unpackageable image reference: {image}")
    return SftRecord(
        system_prompt=_MIX_PROMPTS[mix_tag],
        messages=messages,
        images=images,
        meta={
            "task_id": traj.task.id,
            "episode_key": traj.episode_key or traj.task.id,
            "mode": traj.mode,
            "mix_tag": mix_tag,
            "pipeline_version": PIPELINE_VERSION,
        },
    )


def export_sft(trajectories, out_path, seed: int = 0, workspace_root: Path | None = None) -> list:
    """Write surviving trajectories as SFT JSONL, seeded deterministic order."""
    records = []
    seen = set()
    for traj in trajectories:
        key = traj.episode_key or traj.task.id
        if key in seen:
            logger.warning("skipping duplicate record for %s", key)
            continue
        seen.add(key)
        try:
            records.append(trajectory_to_sft(traj, workspace_root))
        except FileNotFoundError as exc:
            logger.warning("skipping record for %s: %s", traj.task.id, exc)
    records.sort(key=lambda r: r.meta["episode_key"])
    random.Random(seed).shuffle(records)
    with open(out_path, "w", encoding="utf-8") as handle:
        for record in records:
            handle.write(
                json.dumps(
                    {
                        "system": record.system_prompt,
                        "messages": record.messages,
                        "images": record.images,
                        "meta": record.meta,
                    },
                    sort_keys=True,
                    ensure_ascii=False,
                )
                + "\n"
            )
    return records
