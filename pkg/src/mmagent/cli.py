"""Command-line entry point wiring configuration to the pipelines.

Subcommands: generate, curate, plan, walk, eval, replay. Exit codes:
0 ok, 2 config error, 3 endpoint error, 4 data error, 5 internal error.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import os
import random
import sys
import time
from pathlib import Path

from . import curation, evalbench, planner, querygen
from .endpoints import EndpointError, make_endpoint
from .orchestrator import (
    MODE_DEEP_RESEARCH,
    MODE_DIRECT,
    MODES,
    EpisodeConfig,
    StepClock,
    Task,
    dumps_trajectory,
    load_trajectories,
    replay_episode,
    run_episode,
    run_rollouts,
    save_trajectories,
)
from .toolbox import (
    SandboxClient,
    SearchProvider,
    SearchProviderConfig,
    StubSandbox,
    Toolbox,
    TranscriptCache,
    WebVisitor,
)

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_ENDPOINT = 3
EXIT_DATA = 4
EXIT_INTERNAL = 5

ENDPOINT_ROLES = ("model", "judge", "vlm_judge", "summarizer", "qa")

DEFAULT_CONFIG = {
    "workspace_root": "runs",
    "seed": 0,
    "deterministic_timing": False,
    "endpoints": {},
    "search": {
        "endpoint": "https://google.serper.dev",
        "api_key_env": "SERPER_API_KEY",
        "limit": 5,
        "timeout": 30.0,
    },
    "sandbox": {"address": "stub", "timeout": 60.0, "exec_timeout": 30.0},
    "transcript": {"path": None, "replay": False},
    "episode": {
        "mode": MODE_DEEP_RESEARCH,
        "max_turns": 12,
        "max_total_tokens": 32000,
        "temperature": None,
    },
    "web": {"summary_threshold": 4000, "timeout": 30.0},
}


class ConfigError(ValueError):
    """Invalid configuration; message carries the offending field path."""


def _merge(base: dict, override: dict) -> dict:
    merged = dict(base)
    for key, value in override.items():
        if isinstance(value, dict) and isinstance(merged.get(key), dict):
            merged[key] = _merge(merged[key], value)
        else:
            merged[key] = value
    return merged


def load_config(path: str | None) -> dict:
    if path is None:
        return json.loads(json.dumps(DEFAULT_CONFIG))
    try:
        with open(path, encoding="utf-8") as handle:
            user = json.load(handle)
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}") from None
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config file is not valid JSON: {exc}") from None
    if not isinstance(user, dict):
        raise ConfigError("config root must be a JSON object")
    return _merge(DEFAULT_CONFIG, user)


def validate_config(config: dict, needs: tuple = ()) -> None:
    """Check shapes and env-var indirection before any network call."""

    def expect(path: str, value, types) -> None:
        if not isinstance(value, types):
            names = "/".join(
                t.__name__ for t in (types if isinstance(types, tuple) else (types,))
            )
            raise ConfigError(f"{path}: expected {names}, got {type(value).__name__}")

    expect("workspace_root", config["workspace_root"], str)
    expect("seed", config["seed"], int)
    expect("episode.max_turns", config["episode"]["max_turns"], int)
    if config["episode"]["mode"] not in MODES:
        raise ConfigError(f"episode.mode: unknown mode {config['episode']['mode']!r}")

    for role, spec in config["endpoints"].items():
        if role not in ENDPOINT_ROLES:
            raise ConfigError(f"endpoints.{role}: unknown role (expected one of {ENDPOINT_ROLES})")
        expect(f"endpoints.{role}", spec, dict)
        base_url = spec.get("base_url")
        expect(f"endpoints.{role}.base_url", base_url, str)
        key_env = spec.get("api_key_env")
        if key_env is not None:
            expect(f"endpoints.{role}.api_key_env", key_env, str)
            if base_url.startswith(("http://", "https://")) and role in needs:
                if not os.environ.get(key_env):
                    raise ConfigError(
                        f"endpoints.{role}.api_key_env: environment variable {key_env} is not set"
                    )
        if base_url.startswith("scripted:") and not Path(base_url[len("scripted:") :]).is_file():
            raise ConfigError(f"endpoints.{role}.base_url: script file not found: {base_url}")

    search = config["search"]
    expect("search.limit", search["limit"], int)
    if "search" in needs and search["endpoint"].startswith(("http://", "https://")):
        replaying = bool(config["transcript"]["replay"])
        if not replaying and search.get("api_key_env") and not os.environ.get(search["api_key_env"]):
            raise ConfigError(
                f"search.api_key_env: environment variable {search['api_key_env']} is not set"
            )


def redacted(config: dict) -> dict:
    """Effective config for printing; any inline secret-looking field is masked."""

    def scrub(node):
        if isinstance(node, dict):
            return {
                key: "***"
                if ("key" in key or "token" in key) and not key.endswith("_env") and isinstance(value, str)
                else scrub(value)
                for key, value in node.items()
            }
        if isinstance(node, list):
            return [scrub(v) for v in node]
        return node

    return scrub(config)


def _sha256_bytes(data: bytes) -> str:
    return hashlib.sha256(data).hexdigest()


def write_manifest(out_dir: Path, config: dict, inputs: list, subcommand: str) -> None:
    manifest = {
        "subcommand": subcommand,
        "config_sha256": _sha256_bytes(json.dumps(config, sort_keys=True).encode()),
        "seed": config["seed"],
        "inputs": {},
        "timestamp": time.time(),
    }
    for item in inputs:
        path = Path(item)
        if path.is_file():
            manifest["inputs"][str(path)] = _sha256_bytes(path.read_bytes())
    out_dir.mkdir(parents=True, exist_ok=True)
    with open(out_dir / "manifest.json", "w", encoding="utf-8") as handle:
        json.dump(manifest, handle, indent=2, sort_keys=True)
        handle.write("\n")


def _endpoint_for(config: dict, role: str):
    spec = config["endpoints"].get(role)
    if spec is None:
        return None
    return make_endpoint(spec["base_url"], api_key_env=spec.get("api_key_env"))


def build_toolbox(config: dict, replay: bool = False) -> Toolbox:
    transcript = None
    transcript_path = config["transcript"]["path"]
    if transcript_path:
        transcript = TranscriptCache(transcript_path, replay=replay or config["transcript"]["replay"])
    search_cfg = SearchProviderConfig(
        endpoint=config["search"]["endpoint"],
        api_key_env=config["search"].get("api_key_env") or "SERPER_API_KEY",
        limit=config["search"]["limit"],
        timeout=config["search"]["timeout"],
    )
    search = SearchProvider(search_cfg, transcript=transcript)
    web = WebVisitor(
        summarizer=_endpoint_for(config, "summarizer"),
        threshold=config["web"]["summary_threshold"],
        timeout=config["web"]["timeout"],
        transcript=transcript,
    )
    address = config["sandbox"]["address"]
    if address == "stub":
        sandbox = StubSandbox()
    else:
        sandbox = SandboxClient(
            address,
            timeout=config["sandbox"]["timeout"],
            exec_timeout=config["sandbox"]["exec_timeout"],
        )
    return Toolbox(search=search, web=web, sandbox=sandbox, transcript=transcript)


def load_tasks(path) -> list:
    tasks = []
    with open(path, encoding="utf-8") as handle:
        for line_no, line in enumerate(handle, start=1):
            line = line.strip()
            if not line:
                continue
            data = json.loads(line)
            tasks.append(
                Task(
                    id=str(data["id"]),
                    question=data["question"],
                    images=tuple(data.get("images", ())),
                    gold_answer=data.get("gold_answer", data.get("gold")),
                    source=data.get("source", ""),
                )
            )
    if not tasks:
        raise ValueError(f"no tasks found in {path}")
    return tasks


def _episode_config(config: dict, mode: str | None = None) -> EpisodeConfig:
    episode = config["episode"]
    return EpisodeConfig(
        mode=mode or episode["mode"],
        max_turns=episode["max_turns"],
        max_total_tokens=episode["max_total_tokens"],
        temperature=episode.get("temperature"),
        seed=config["seed"],
    )


def _clock_factory(config: dict):
    if config.get("deterministic_timing"):
        return lambda: StepClock()
    return lambda: time.monotonic


def cmd_generate(args, config: dict) -> int:
    out_dir = Path(args.out)
    tasks = load_tasks(args.tasks)
    model = _endpoint_for(config, "model")
    if model is None:
        raise ConfigError("endpoints.model: required for generate")
    judge = _endpoint_for(config, "judge")
    tools = build_toolbox(config)
    cfg = _episode_config(config, args.mode)
    clock_factory = _clock_factory(config)
    write_manifest(out_dir, config, [args.tasks], "generate")
    workspaces = out_dir / "workspaces"

    trajectories = []
    for task in tasks:
        if args.rollouts > 1:
            rollout_set = run_rollouts(
                task,
                cfg,
                model,
                tools,
                workspace_root=workspaces / task.id,
                n=args.rollouts,
                judge=judge,
                clock=clock_factory(),
            )
            trajectories.extend(rollout_set.trajectories)
        else:
            trajectories.append(
                run_episode(
                    task,
                    cfg,
                    model,
                    tools,
                    workspace=workspaces / task.id.replace("#", "_"),
                    clock=clock_factory(),
                )
            )
    save_trajectories(out_dir / "trajectories.jsonl", trajectories)
    print(f"wrote {len(trajectories)} trajectories to {out_dir / 'trajectories.jsonl'}")
    return EXIT_OK


def cmd_curate(args, config: dict) -> int:
    out_dir = Path(args.out)
    trajectories = load_trajectories(args.traj)
    judge = _endpoint_for(config, "judge")
    vlm_judge = _endpoint_for(config, "vlm_judge") or judge
    workspace_root = Path(args.workspaces) if args.workspaces else Path(args.traj).parent / "workspaces"
    write_manifest(out_dir, config, [args.traj], "curate")

    verdict_path = out_dir / "verdicts.jsonl"
    prior = curation.load_verdicts(verdict_path) if verdict_path.exists() else None
    results = curation.run_pipeline(
        trajectories, judge=judge, vlm_judge=vlm_judge, workspace_root=workspace_root, prior=prior
    )
    curation.save_verdicts(results, verdict_path)

    survivors = [r.trajectory for r in results if r.passed_all]
    tagged = [(r.trajectory, r.tags) for r in results if r.tags is not None]
    curation.write_distribution_csv(tagged, out_dir / "function_distribution.csv")
    records = curation.export_sft(
        survivors, out_dir / "sft.jsonl", seed=config["seed"], workspace_root=workspace_root
    )
    pending = sum(1 for r in results if r.pending)
    print(
        f"curated {len(trajectories)} trajectories: {len(survivors)} passed, "
        f"{pending} pending, {len(records)} SFT records exported"
    )
    return EXIT_OK


def cmd_plan(args, config: dict) -> int:
    out_path = Path(args.out)
    out_path.parent.mkdir(parents=True, exist_ok=True)
    trajectories = load_trajectories(args.traj)
    written = 0
    skipped = 0
    with open(out_path, "w", encoding="utf-8") as handle:
        for traj in trajectories:
            try:
                plan = planner.trajectory_to_plan(traj)
            except planner.PlanError as exc:
                logger.info("skipping %s: %s", traj.task.id, exc)
                skipped += 1
                continue
            record = planner.plan_supervision_record(traj, plan)
            handle.write(json.dumps(record, sort_keys=True, ensure_ascii=False) + "\n")
            written += 1
    print(f"wrote {written} plans to {out_path} ({skipped} skipped)")
    return EXIT_OK if written or not trajectories else EXIT_DATA


def cmd_walk(args, config: dict) -> int:
    out_path = Path(args.out)
    out_path.parent.mkdir(parents=True, exist_ok=True)
    graph = querygen.build_graph(args.dump)
    if not graph.pages:
        raise ValueError(f"no pages parsed from {args.dump}")
    qa = _endpoint_for(config, "qa") or _endpoint_for(config, "model")
    if qa is None:
        raise ConfigError("endpoints.qa: required for walk")
    endpoints = querygen.WalkEndpoints(qa=qa)
    seed = args.seed if args.seed is not None else config["seed"]
    rng = random.Random(seed)
    titles = sorted(graph.pages)
    records = []
    for _ in range(args.count):
        entity = titles[rng.randrange(len(titles))]
        records.append(querygen.generate_walk(graph, entity, rng, endpoints, depth=args.depth))
    querygen.save_records(records, out_path)
    accepted = sum(1 for r in records if r.status == querygen.STATUS_ACCEPTED)
    print(f"wrote {len(records)} walk records to {out_path} ({accepted} accepted)")
    return EXIT_OK


def cmd_eval(args, config: dict) -> int:
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    tasks = load_tasks(args.dataset)
    model = _endpoint_for(config, "model")
    if model is None:
        raise ConfigError("endpoints.model: required for eval")
    judge = _endpoint_for(config, "judge")
    tools = build_toolbox(config)
    mode = MODE_DIRECT if args.mode == "direct" else MODE_DEEP_RESEARCH
    cfg = _episode_config(config, mode)
    write_manifest(out_dir, config, [args.dataset], "eval")

    records = evalbench.run_benchmark(
        tasks,
        mode,
        cfg=cfg,
        model=model,
        tools=tools,
        judge=judge,
        sample=args.sample,
        seed=args.seed if args.seed is not None else config["seed"],
        out_path=out_dir / "records.jsonl",
        workspace_root=out_dir / "workspaces",
    )
    metrics = evalbench.compute_metrics(records)
    evalbench.write_metrics_csv(metrics, out_dir / "metrics.csv")
    print(evalbench.format_metrics_table(metrics))
    return EXIT_OK


def cmd_replay(args, config: dict) -> int:
    out_path = Path(args.out)
    out_path.parent.mkdir(parents=True, exist_ok=True)
    sources = load_trajectories(args.traj)
    tools = build_toolbox(config, replay=True)
    workspaces = out_path.parent / "replay_workspaces"
    mismatches = 0
    with open(out_path, "w", encoding="utf-8") as handle:
        for source in sources:
            cfg = _episode_config(config, source.mode)
            replayed = replay_episode(
                source,
                cfg,
                tools,
                workspace=workspaces / (source.episode_key or source.task.id).replace("#", "_"),
            )
            line = dumps_trajectory(replayed)
            handle.write(line + "\n")
            if line != dumps_trajectory(source):
                mismatches += 1
                logger.warning("replay mismatch for %s", source.episode_key or source.task.id)
    print(f"replayed {len(sources)} trajectories, {mismatches} mismatches")
    return EXIT_OK if mismatches == 0 else EXIT_DATA


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="mmagent", description=__doc__)
    parser.add_argument("--config", default=None, help="JSON config file")
    parser.add_argument("--verbose", action="store_true")
    sub = parser.add_subparsers(dest="subcommand", required=True)

    p_generate = sub.add_parser("generate", help="run episodes over a task file")
    p_generate.add_argument("--tasks", required=True)
    p_generate.add_argument("--out", required=True)
    p_generate.add_argument("--mode", choices=MODES, default=None)
    p_generate.add_argument("--rollouts", type=int, default=1)

    p_curate = sub.add_parser("curate", help="filter trajectories and export SFT data")
    p_curate.add_argument("--traj", required=True)
    p_curate.add_argument("--out", required=True)
    p_curate.add_argument("--workspaces", default=None)

    p_plan = sub.add_parser("plan", help="convert trajectories to plan supervision")
    p_plan.add_argument("--traj", required=True)
    p_plan.add_argument("--out", required=True)

    p_walk = sub.add_parser("walk", help="generate queries by graph random walks")
    p_walk.add_argument("--dump", required=True)
    p_walk.add_argument("--out", required=True)
    p_walk.add_argument("--count", type=int, default=10)
    p_walk.add_argument("--seed", type=int, default=None)
    p_walk.add_argument("--depth", type=int, default=None)

    p_eval = sub.add_parser("eval", help="run a benchmark dataset")
    p_eval.add_argument("--dataset", required=True)
    p_eval.add_argument("--mode", choices=("direct", "search"), default="search")
    p_eval.add_argument("--sample", type=float, default=None)
    p_eval.add_argument("--seed", type=int, default=None)
    p_eval.add_argument("--out", required=True)

    p_replay = sub.add_parser("replay", help="re-run trajectories against the transcript cache")
    p_replay.add_argument("--traj", required=True)
    p_replay.add_argument("--out", required=True)

    return parser


_NEEDS = {
    "generate": ("model", "judge", "search"),
    "curate": ("judge", "vlm_judge"),
    "plan": (),
    "walk": ("qa",),
    "eval": ("model", "judge", "search"),
    "replay": (),
}

_COMMANDS = {
    "generate": cmd_generate,
    "curate": cmd_curate,
    "plan": cmd_plan,
    "walk": cmd_walk,
    "eval": cmd_eval,
    "replay": cmd_replay,
}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING)
    try:
        config = load_config(args.config)
        validate_config(config, needs=_NEEDS[args.subcommand])
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    print(f"effective config: {json.dumps(redacted(config), sort_keys=True)}")
    try:
        return _COMMANDS[args.subcommand](args, config)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except EndpointError as exc:
        print(f"endpoint error: {exc}", file=sys.stderr)
        return EXIT_ENDPOINT
    except (FileNotFoundError, ValueError, json.JSONDecodeError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except Exception as exc:  # pragma: no cover - defensive
        logger.exception("internal error")
        print(f"internal error: {exc}", file=sys.stderr)
        return EXIT_INTERNAL


if __name__ == "__main__":
    sys.exit(main())
