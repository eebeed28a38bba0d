"""Benchmark harness: sequential runs, per-query accounting, TPS reporting.

Queries run strictly sequentially (timing fidelity); tokens-per-second is
computed over wall time including tool execution time. Records persist
incrementally so interrupted runs resume.
"""

from __future__ import annotations

import csv
import json
import logging
import random
import time
from dataclasses import dataclass, asdict
from pathlib import Path

from .judging import answers_agree
from .orchestrator import (
    MODE_DIRECT,
    TERMINATION_MODEL_ERROR,
    TERMINATION_TOKEN_BUDGET,
    EpisodeConfig,
    Task,
    run_episode,
)

logger = logging.getLogger(__name__)


class EmptyMetricsError(ValueError):
    """No non-error records to aggregate."""


@dataclass
class EvalRecord:
    task_id: str
    mode: str
    start: float
    end: float
    model_time: float
    tool_time: float
    turn_count: int
    answer_tokens: int
    total_tokens: int
    final_answer: str | None = None
    judged_correct: bool | None = None
    error: str | None = None
    max_length_hit: bool = False
    token_source: str = "usage"

    def __post_init__(self):
        if self.end < self.start:
            raise ValueError("record end precedes start")

    @property
    def wall_time(self) -> float:
        return self.end - self.start


@dataclass
class Metrics:
    mean_wall_time: float
    mean_total_tokens: float
    tokens_per_second: float
    mean_turns: float
    accuracy: float | None
    n_sampled: int
    n_errors: int


def subsample(tasks: list, fraction: float, seed: int | None) -> list:
    """Seeded subsample preserving dataset order; same seed, same id set."""
    if not 0 < fraction <= 1:
        raise ValueError("sample fraction must be in (0, 1]")
    count = round(len(tasks) * fraction)
    rng = random.Random(seed)
    chosen = sorted(rng.sample(range(len(tasks)), count))
    return [tasks[i] for i in chosen]


def _heuristic_tokens(text: str) -> int:
    return max(1, len(text) // 4)


def evaluate_task(
    task: Task,
    cfg: EpisodeConfig,
    model,
    tools=None,
    judge=None,
    clock=time.monotonic,
    workspace: Path | None = None,
) -> EvalRecord:
    start = clock()
    traj = run_episode(task, cfg, model, tools, workspace=workspace, clock=clock)
    end = clock()

    model_time = sum(t.model_latency for t in traj.turns)
    tool_time = sum(t.tool_latency for t in traj.turns)
    total_tokens = sum(t.completion_tokens for t in traj.turns)
    answer_tokens = traj.turns[-1].completion_tokens if traj.turns else 0
    token_source = "usage"
    if total_tokens == 0:
        generated = "".join(t.segments.raw for t in traj.turns)
        total_tokens = _heuristic_tokens(generated) if generated else 0
        answer_tokens = _heuristic_tokens(traj.final_answer) if traj.final_answer else 0
        token_source = "heuristic"

    judged = None
    if traj.final_answer is not None and task.gold_answer is not None:
        verdict, _raw = answers_agree(task.question, task.gold_answer, traj.final_answer, judge)
        judged = verdict if verdict is not None else None

    return EvalRecord(
        task_id=task.id,
        mode=cfg.mode,
        start=start,
        end=end,
        model_time=model_time,
        tool_time=tool_time,
        turn_count=max(len(traj.turns), 1),
        answer_tokens=answer_tokens,
        total_tokens=total_tokens,
        final_answer=traj.final_answer,
        judged_correct=judged,
        error=TERMINATION_MODEL_ERROR if traj.termination == TERMINATION_MODEL_ERROR else None,
        max_length_hit=traj.termination == TERMINATION_TOKEN_BUDGET,
        token_source=token_source,
    )


def run_benchmark(
    dataset: list,
    mode: str,
    cfg: EpisodeConfig | None = None,
    model=None,
    tools=None,
    judge=None,
    sample: float | None = None,
    seed: int | None = None,
    out_path: Path | None = None,
    clock=time.monotonic,
    workspace_root: Path | None = None,
) -> list:
    """Sequentially evaluate a dataset; persist each record as it completes."""
    if cfg is None:
        cfg = EpisodeConfig(mode=mode)
    elif cfg.mode != mode:
        from dataclasses import replace

        cfg = replace(cfg, mode=mode)

    tasks = subsample(dataset, sample, seed) if sample is not None else list(dataset)

    done_ids = set()
    records = []
    if out_path is not None and Path(out_path).exists():
        records = load_records(out_path)
        done_ids = {r.task_id for r in records}
        if done_ids:
            logger.info("resuming: %d records already present", len(done_ids))

    for task in tasks:
        if task.id in done_ids:
            continue
        workspace = None
        if workspace_root is not None:
            workspace = Path(workspace_root) / task.id
        record = evaluate_task(task, cfg, model, tools, judge=judge, clock=clock, workspace=workspace)
        records.append(record)
        if out_path is not None:
            with open(out_path, "a", encoding="utf-8") as handle:
                handle.write(json.dumps(asdict(record), sort_keys=True, ensure_ascii=False) + "\n")
    if mode == MODE_DIRECT:
        assert all(r.turn_count == 1 for r in records if r.error is None)
    return records


def compute_metrics(records: list) -> Metrics:
    """Aggregate non-error records; TPS over wall time including tool time."""
    usable = [r for r in records if r.error is None]
    errors = len(records) - len(usable)
    if not usable:
        raise EmptyMetricsError("no non-error records to aggregate")
    total_wall = sum(r.wall_time for r in usable)
    total_tokens = sum(r.total_tokens for r in usable)
    judged = [r for r in usable if r.judged_correct is not None]
    return Metrics(
        mean_wall_time=total_wall / len(usable),
        mean_total_tokens=total_tokens / len(usable),
        tokens_per_second=total_tokens / total_wall if total_wall > 0 else 0.0,
        mean_turns=sum(r.turn_count for r in usable) / len(usable),
        accuracy=(sum(1 for r in judged if r.judged_correct) / len(judged)) if judged else None,
        n_sampled=len(records),
        n_errors=errors,
    )


def load_records(path) -> list:
    records = []
    with open(path, encoding="utf-8") as handle:
        for line in handle:
            line = line.strip()
            if line:
                records.append(EvalRecord(**json.loads(line)))
    return records


def write_metrics_csv(metrics: Metrics, path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as handle:
        writer = csv.writer(handle)
        writer.writerow(["metric", "value"])
        for name, value in asdict(metrics).items():
            writer.writerow([name, "" if value is None else value])


def format_metrics_table(metrics: Metrics) -> str:
    rows = [
        ("queries", str(metrics.n_sampled)),
        ("errors", str(metrics.n_errors)),
        ("mean wall time (s)", f"{metrics.mean_wall_time:.3f}"),
        ("mean tokens", f"{metrics.mean_total_tokens:.1f}"),
        ("tokens per second", f"{metrics.tokens_per_second:.3f}"),
        ("mean turns", f"{metrics.mean_turns:.2f}"),
        ("accuracy", "n/a" if metrics.accuracy is None else f"{metrics.accuracy:.3f}"),
    ]
    width = max(len(name) for name, _ in rows)
    return "\n".join(f"{name.ljust(width)}  {value}" for name, value in rows)
