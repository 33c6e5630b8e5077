"""
Command-line entry point.

    python cvr_cli.py gen-scripts --family choice_behavior --count 10 --seed 0 --out corpus/
    python cvr_cli.py validate-scripts corpus/
    python cvr_cli.py run-episode --script corpus/x.json --policy scripted:turns.json --log runs/x.jsonl
    python cvr_cli.py train --corpus corpus/ --grpo-config grpo.json --out params.json --history history.csv
    python cvr_cli.py eval --logs runs/ --format table
    python cvr_cli.py sim-vs-real --sim-logs runs/sim --real-logs runs/real

Exit codes: 0 ok, 1 failure, 2 usage or config error.
"""

import argparse
import json
import logging
import sys
import time
from dataclasses import asdict
from pathlib import Path
from typing import List, Optional

import numpy as np

import artifacts
import config
import eval_harness
import task_profiles
from grpo_core import PolicyParams
from providers.remote_chat import RemoteChatClient, RemotePolicy
from providers.scripted import ScriptedPolicy, load_turn_script
from providers.softmax_policy import SoftmaxPolicy
from reward_model import total_reward
from script_model import (
    ScriptValidationError,
    collect_script_errors,
    dumps_script,
    iter_script_paths,
    load_corpus,
    load_script_file,
)
from workers import script_generator
from workers.episode_engine import run_episode, write_trajectory_log
from workers.simulator import LLMSimulatorEnvironment, SimulatorEnvironment
from workers.trainer import train, write_history_csv

logger = logging.getLogger("CVR.CLI")

EXIT_OK, EXIT_FAILURE, EXIT_USAGE = 0, 1, 2


def _optional_config(path: Optional[str], cls):
    return config.load_config_file(Path(path), cls) if path else cls()


# --- SUBCOMMANDS ---

def cmd_gen_scripts(args) -> int:
    knobs = _optional_config(args.knobs, config.GeneratorKnobs)
    out = Path(args.out)
    scripts = script_generator.generate_corpus(args.family, args.count, args.seed, knobs)
    if args.jsonl:
        artifacts.atomic_write_text(out / f"{args.family}.jsonl", "".join(dumps_script(s) + "\n" for s in scripts))
    else:
        for script in scripts:
            artifacts.atomic_write_text(out / f"{artifacts.slugify(script.script_id)}.json", dumps_script(script, indent=2))
    logger.info("✅ Wrote %d %s scripts to %s", len(scripts), args.family, out)
    return EXIT_OK


def cmd_validate_scripts(args) -> int:
    bad = 0
    seen = {}
    for path in iter_script_paths(Path(p) for p in args.paths):
        try:
            with open(path, "r", encoding="utf-8") as f:
                docs = [json.loads(line) for line in f if line.strip()] if path.suffix == ".jsonl" else [json.load(f)]
        except (OSError, json.JSONDecodeError) as exc:
            logger.error("❌ %s: %s", path, exc)
            bad += 1
            continue
        for idx, doc in enumerate(docs):
            label = f"{path}" if len(docs) == 1 else f"{path}#{idx + 1}"
            errors = collect_script_errors(doc)
            for issue in errors:
                print(f"{label}: {issue}")
            bad += bool(errors)
            sid = doc.get("script_id") if isinstance(doc, dict) else None
            if not errors and isinstance(sid, str):
                if sid in seen:
                    print(f"{label}: script_id: duplicate id (also in {seen[sid]})")
                    bad += 1
                seen[sid] = label
    if bad:
        logger.error("❌ %d invalid script documents", bad)
        return EXIT_FAILURE
    logger.info("✅ %d scripts valid", len(seen))
    return EXIT_OK


def _build_policy(policy_arg: str, script, episode_config, remote_cfg):
    kind, _, arg = policy_arg.partition(":")
    if kind == "scripted" and arg:
        return ScriptedPolicy(load_turn_script(Path(arg)))
    if kind == "softmax" and arg:
        params = PolicyParams.load(Path(arg))
        return SoftmaxPolicy(params, script, obs_buckets=params.obs_buckets)
    if kind == "remote":
        prompt = task_profiles.get_system_instruction(
            script.task_type, script.task_tag, video_count=script.video_count, episode_config=episode_config,
        )
        return RemotePolicy(remote_cfg, system_prompt=prompt)
    raise config.ConfigError(f"Unknown policy {policy_arg!r}; use scripted:FILE, softmax:PARAMS or remote")


def cmd_run_episode(args) -> int:
    episode_config = _optional_config(args.config, config.EpisodeConfig)
    reward_config = _optional_config(args.reward_config, config.RewardConfig)
    remote_cfg = _optional_config(args.remote_config, config.RemotePolicyConfig)
    scripts = load_script_file(Path(args.script))
    rng = np.random.default_rng(args.seed)
    failures = 0
    for script in scripts:
        policy = _build_policy(args.policy, script, episode_config, remote_cfg)
        if args.env == "sim-llm":
            environment = LLMSimulatorEnvironment(script, RemoteChatClient(remote_cfg))
        else:
            environment = SimulatorEnvironment(script)
        traj = run_episode(policy, environment, script, episode_config, rng=rng)
        reward = None
        if script.task_type != "free_form" and traj.error is None:
            reward = total_reward(traj, script.gold, reward_config)
        if args.log:
            write_trajectory_log(Path(args.log), [traj], [reward])
        failures += traj.error is not None
        logger.info(
            "🎬 %s: answer=%r turns=%d tool_calls=%d reward=%s%s",
            script.script_id, traj.final_answer, len(traj.turns), traj.tool_calls,
            None if reward is None else reward.r_total,
            f" error={traj.error}" if traj.error else "",
        )
    return EXIT_FAILURE if failures else EXIT_OK


def cmd_train(args) -> int:
    grpo_config = _optional_config(args.grpo_config, config.GrpoConfig)
    episode_config = _optional_config(args.episode_config, config.EpisodeConfig)
    reward_config = _optional_config(args.reward_config, config.RewardConfig)
    corpus = load_corpus(Path(args.corpus))
    init = PolicyParams.load(Path(args.init_params)) if args.init_params else None
    result = train(corpus, grpo_config, episode_config, reward_config=reward_config, params=init)
    result.params.save(Path(args.out))
    if args.history:
        write_history_csv(Path(args.history), result.history)
    logger.info(
        "✅ Trained %d iterations; trailing mean R_total %.3f; params -> %s",
        len(result.history), result.trailing_mean(), args.out,
    )
    return EXIT_OK


def cmd_eval(args) -> int:
    dimension_map = (
        task_profiles.dimension_map_from_file(Path(args.dimension_map))
        if args.dimension_map else task_profiles.DEFAULT_DIMENSION_MAP
    )
    records = eval_harness.records_from_logs(Path(args.logs))
    results = eval_harness.results_from_records(records)
    report = eval_harness.aggregate(
        results, dimension_map, weighting=args.weighting, iou_threshold=args.iou_threshold,
    )
    if args.format == "json":
        print(json.dumps(eval_harness.report_to_dict(report), indent=2))
    else:
        print(eval_harness.format_report_table(report))
    return EXIT_OK


def cmd_sim_vs_real(args) -> int:
    paired = eval_harness.pair_runs(
        eval_harness.records_from_logs(Path(args.sim_logs)),
        eval_harness.records_from_logs(Path(args.real_logs)),
    )
    if not paired.pairs:
        logger.error("❌ No script ids in common between the two runs")
        return EXIT_FAILURE
    block = eval_harness.alignment_block(paired)
    if args.format == "json":
        print(json.dumps(asdict(block), indent=2))
    else:
        print("\n".join(eval_harness.format_alignment(block)))
    return EXIT_OK


# --- PARSER ---

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(description="Cross-video reasoning agents: scripts, episodes, GRPO, eval.")
    parser.add_argument("--verbose", action="store_true", help="DEBUG logging")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-scripts", help="Generate a template script corpus")
    p.add_argument("--family", required=True, choices=script_generator.FAMILIES)
    p.add_argument("--count", type=int, required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True, help="Output directory")
    p.add_argument("--knobs", help="GeneratorKnobs JSON file")
    p.add_argument("--jsonl", action="store_true", help="Write one JSONL corpus file instead of one file per script")
    p.set_defaults(func=cmd_gen_scripts)

    p = sub.add_parser("validate-scripts", help="Schema-check script files")
    p.add_argument("paths", nargs="+")
    p.set_defaults(func=cmd_validate_scripts)

    p = sub.add_parser("run-episode", help="Run one episode per script in a file")
    p.add_argument("--script", required=True)
    p.add_argument("--policy", required=True, help="scripted:FILE | softmax:PARAMS | remote")
    p.add_argument("--config", help="EpisodeConfig JSON file")
    p.add_argument("--reward-config", help="RewardConfig JSON file")
    p.add_argument("--remote-config", help="RemotePolicyConfig JSON file")
    p.add_argument("--env", choices=["sim", "sim-llm"], default="sim")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--log", help="Trajectory JSONL output")
    p.set_defaults(func=cmd_run_episode)

    p = sub.add_parser("train", help="GRPO-train the tabular softmax policy")
    p.add_argument("--corpus", required=True)
    p.add_argument("--grpo-config", help="GrpoConfig JSON file")
    p.add_argument("--episode-config", help="EpisodeConfig JSON file")
    p.add_argument("--reward-config", help="RewardConfig JSON file")
    p.add_argument("--init-params", help="Start from saved params")
    p.add_argument("--out", required=True, help="params.json output")
    p.add_argument("--history", help="history.csv output")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="Aggregate trajectory logs into task and dimension accuracies")
    p.add_argument("--logs", required=True)
    p.add_argument("--dimension-map", help="JSON {task_tag: dimension}")
    p.add_argument("--format", choices=["table", "json"], default="table")
    p.add_argument("--weighting", choices=list(eval_harness.WEIGHTINGS), default="unweighted")
    p.add_argument("--iou-threshold", type=float, default=0.5)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("sim-vs-real", help="Decision overlap, interval IoU and latency between two runs")
    p.add_argument("--sim-logs", required=True)
    p.add_argument("--real-logs", required=True)
    p.add_argument("--format", choices=["table", "json"], default="table")
    p.set_defaults(func=cmd_sim_vs_real)
    return parser


def main(argv: Optional[List[str]] = None) -> int:
    args = build_parser().parse_args(argv)

    logging.basicConfig(
        level=logging.DEBUG if args.verbose else getattr(logging, config.LOG_LEVEL, logging.INFO),
        format="%(asctime)s - %(levelname)s - %(message)s",
        handlers=[logging.StreamHandler(sys.stdout)],
    )

    start = time.time()
    try:
        return args.func(args)
    except (config.ConfigError, ScriptValidationError, FileNotFoundError) as exc:
        logger.error("❌ %s", exc)
        return EXIT_USAGE
    except Exception as exc:
        logger.error("❌ %s failed: %s", args.command, exc)
        return EXIT_FAILURE
    finally:
        logger.debug("🏁 Done in %.1fs", time.time() - start)


if __name__ == "__main__":
    raise SystemExit(main())
