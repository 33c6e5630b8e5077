"""
The Master Agent episode loop.

One loop serves training rollouts against the simulator and inference
against real tools; only the environment binding differs. A turn is one
accepted decision: the policy gets up to `retry_budget` attempts to emit a
usable action, with a corrective message injected between attempts.

Turn budget: after `t_max` turns the episode enters the tolerance phase,
where tool calls are refused and only an answer ends the episode. After
`t_max + t_tol` turns it ends with ABSTAIN.
"""

import logging
import threading
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np

import artifacts
import config
import task_profiles
from action_protocol import (
    ABSTAIN,
    Answer,
    GetCaption,
    Observe,
    ParseOutcome,
    action_to_wire,
    build_retry_message,
    is_format_valid,
    parse_action,
    serialize_action,
)
from providers.remote_chat import RemotePolicyError
from script_model import GoldAnswer, SemanticScript, answer_to_wire, gold_to_document
from workers.simulator import EnvironmentFailure, Observation

logger = logging.getLogger("CVR.Episode")

PHASE_ACTIVE = "active"
PHASE_TOLERANCE = "tolerance"
PHASE_TERMINATED = "terminated"

INVALID_ACTION_TEXT = "INVALID ACTION — skipped"
ANSWER_ACCEPTED_TEXT = "Answer submitted."
TOLERANCE_NOTICE = (
    "NOTICE: The turn limit has been reached. Tool calls are no longer executed; "
    "reply with an answer action now."
)


@dataclass(frozen=True)
class FailedTurn:
    """History marker for a turn whose retries were exhausted."""
    violations: Tuple[str, ...]
    kind = "failed"


@dataclass(frozen=True)
class EpisodeTask:
    """What the agent sees of an episode, plus bookkeeping for logs."""
    query: str
    task_type: str
    options: Optional[Dict[str, str]] = None
    script_id: str = ""
    task_tag: Optional[str] = None
    video_count: int = 2
    gold: Optional[GoldAnswer] = None

    @classmethod
    def from_script(cls, script: SemanticScript) -> "EpisodeTask":
        return cls(
            query=script.question,
            task_type=script.task_type,
            options=dict(script.options) if script.options else None,
            script_id=script.script_id,
            task_tag=script.task_tag,
            video_count=script.video_count,
            gold=script.gold,
        )


@dataclass
class EpisodeState:
    query: str
    options: Optional[Dict[str, str]] = None
    history: List[Tuple[Any, Observation]] = field(default_factory=list)
    turn: int = 0
    phase: str = PHASE_ACTIVE
    video_count: int = 2

    def advance_phase(self, new_phase: str) -> None:
        allowed = {
            PHASE_ACTIVE: {PHASE_ACTIVE, PHASE_TOLERANCE, PHASE_TERMINATED},
            PHASE_TOLERANCE: {PHASE_TOLERANCE, PHASE_TERMINATED},
            PHASE_TERMINATED: {PHASE_TERMINATED},
        }
        if new_phase not in allowed[self.phase]:
            raise RuntimeError(f"Illegal phase transition {self.phase} -> {new_phase}")
        self.phase = new_phase


@dataclass
class TurnRecord:
    index: int
    phase: str
    raw_outputs: List[str]
    outcome: Optional[ParseOutcome]
    observation: Optional[Observation]
    retries_used: int = 0
    refused: bool = False
    elapsed_s: float = 0.0

    @property
    def failed(self) -> bool:
        return self.outcome is None or not self.outcome.usable

    @property
    def format_valid(self) -> bool:
        return self.outcome is not None and is_format_valid(self.outcome)

    @property
    def action(self):
        return None if self.outcome is None else self.outcome.result


@dataclass
class Trajectory:
    script_id: str
    task_type: str
    task_tag: Optional[str] = None
    gold: Optional[GoldAnswer] = None
    turns: List[TurnRecord] = field(default_factory=list)
    final_answer: Any = None
    tool_calls: int = 0
    format_valid_all: bool = True
    min_calls_violated: bool = False
    error: Optional[str] = None
    source: str = ""

    @property
    def abstained(self) -> bool:
        return self.final_answer is ABSTAIN

    @property
    def timings(self) -> List[float]:
        return [t.elapsed_s for t in self.turns]

    @property
    def tool_timings(self) -> List[float]:
        """elapsed_s of each executed tool call."""
        return [
            t.observation.elapsed_s
            for t in self.turns
            if t.observation is not None and isinstance(t.action, (Observe, GetCaption)) and not t.refused
        ]


# --- RENDERING ---

def _history_action_text(item) -> str:
    if isinstance(item, FailedTurn):
        return f"(invalid: {', '.join(item.violations)})"
    return serialize_action(item)


def render_state(state: EpisodeState, system_prompt: str) -> str:
    """System prompt, the question, every (action, observation) pair, then any phase notice."""
    parts = [system_prompt.rstrip(), "", f"QUESTION: {state.query}"]
    if state.options:
        parts.append("OPTIONS:")
        parts.extend(f"{key}. {text}" for key, text in sorted(state.options.items()))
    if state.history:
        parts += ["", "--- HISTORY ---"]
        for i, (item, observation) in enumerate(state.history, start=1):
            parts.append(f"[Turn {i}] ACTION: {_history_action_text(item)}")
            parts.append("OBSERVATION:")
            parts.append(observation.text)
    if state.phase == PHASE_TOLERANCE:
        parts += ["", TOLERANCE_NOTICE]
    return "\n".join(parts)


def _refusal(text: str, source: str) -> Observation:
    return Observation(text, source, 0.0)


# --- LOOP ---

def run_episode(
    policy,
    environment,
    script_or_task: Union[SemanticScript, EpisodeTask],
    episode_config: Optional[config.EpisodeConfig] = None,
    *,
    system_prompt: Optional[str] = None,
    rng: Optional[np.random.Generator] = None,
    protocol: Optional[config.ProtocolConfig] = None,
) -> Trajectory:
    cfg = episode_config or config.EpisodeConfig()
    protocol = protocol or config.ProtocolConfig()
    task = script_or_task if isinstance(script_or_task, EpisodeTask) else EpisodeTask.from_script(script_or_task)
    rng = rng if rng is not None else np.random.default_rng()
    video_count = getattr(environment, "video_count", None) or task.video_count
    if system_prompt is None:
        system_prompt = task_profiles.get_system_instruction(
            task.task_type, task.task_tag,
            video_count=video_count, episode_config=cfg, frame_budget=protocol.frame_budget,
        )
    source = getattr(environment, "source", "")

    state = EpisodeState(query=task.query, options=task.options, video_count=video_count)
    traj = Trajectory(
        script_id=task.script_id, task_type=task.task_type, task_tag=task.task_tag,
        gold=task.gold, source=source,
    )

    while state.phase != PHASE_TERMINATED:
        if state.turn >= cfg.turn_limit:
            traj.final_answer = ABSTAIN
            state.advance_phase(PHASE_TERMINATED)
            break
        if state.turn >= cfg.t_max:
            state.advance_phase(PHASE_TOLERANCE)

        started = time.perf_counter()
        rendered = render_state(state, system_prompt)
        raw_outputs: List[str] = []
        outcome: Optional[ParseOutcome] = None
        try:
            for attempt in range(1, cfg.retry_budget + 1):
                prompt = rendered
                if outcome is not None:
                    note = build_retry_message(
                        attempt - 1, outcome, task_type=task.task_type, frame_budget=protocol.frame_budget,
                    )
                    prompt = f"{rendered}\n\n{note}"
                    logger.debug("Turn %s retry %s/%s: %s", state.turn + 1, attempt, cfg.retry_budget, outcome.violations)
                text = policy.decide(prompt, rng, state=state)
                raw_outputs.append(text)
                outcome = parse_action(
                    text, task.task_type, attempt=attempt, protocol=protocol, video_count=video_count,
                )
                if outcome.usable:
                    break
        except RemotePolicyError as exc:
            traj.error = f"policy: {exc}"
            logger.error("❌ Episode %s aborted at turn %s: %s", task.script_id, state.turn + 1, exc)
            break

        record = TurnRecord(
            index=state.turn + 1,
            phase=state.phase,
            raw_outputs=raw_outputs,
            outcome=outcome,
            observation=None,
            retries_used=max(0, len(raw_outputs) - 1),
        )

        if outcome is None or not outcome.usable:
            record.observation = _refusal(INVALID_ACTION_TEXT, source)
            history_item = FailedTurn(outcome.violations if outcome else ())
            traj.format_valid_all = False
            logger.warning("⚠️ Turn %s of %s skipped after %s attempts", record.index, task.script_id, len(raw_outputs))
        else:
            action = outcome.result
            history_item = action
            if not is_format_valid(outcome):
                traj.format_valid_all = False
            if isinstance(action, Answer):
                # the tolerance phase always takes an answer
                if (
                    cfg.min_tool_calls_mode == "reject_answer"
                    and state.phase == PHASE_ACTIVE
                    and traj.tool_calls < cfg.min_tool_calls
                ):
                    record.refused = True
                    record.observation = _refusal(
                        f"Answer refused: at least {cfg.min_tool_calls} tool calls are required "
                        f"before answering ({traj.tool_calls} so far).",
                        source,
                    )
                else:
                    record.observation = _refusal(ANSWER_ACCEPTED_TEXT, source)
                    traj.final_answer = action.final_answer
                    traj.min_calls_violated = traj.tool_calls < cfg.min_tool_calls
            elif state.phase == PHASE_TOLERANCE:
                record.refused = True
                record.observation = _refusal(
                    "Tool call refused: the turn budget is exhausted. Only an answer action is accepted now.",
                    source,
                )
            else:
                try:
                    record.observation = environment.execute(action)
                except EnvironmentFailure as exc:
                    traj.error = f"environment: {exc}"
                    record.elapsed_s = time.perf_counter() - started
                    traj.turns.append(record)
                    logger.error("❌ Episode %s aborted at turn %s: %s", task.script_id, record.index, exc)
                    break
                traj.tool_calls += 1

        record.elapsed_s = time.perf_counter() - started
        traj.turns.append(record)
        state.history.append((history_item, record.observation))
        state.turn += 1
        if traj.final_answer is not None:
            state.advance_phase(PHASE_TERMINATED)

    if traj.min_calls_violated:
        logger.info("Episode %s answered after %s tool calls (< %s)", task.script_id, traj.tool_calls, cfg.min_tool_calls)
    logger.debug(
        "Episode %s: %s turns, %s tool calls, answer=%r, error=%s",
        task.script_id, len(traj.turns), traj.tool_calls, traj.final_answer, traj.error,
    )
    return traj


# --- CONCURRENT EPISODES ---

@dataclass
class EpisodeJob:
    policy: Any
    environment: Any
    script: Union[SemanticScript, EpisodeTask]
    episode_config: Optional[config.EpisodeConfig] = None
    system_prompt: Optional[str] = None
    rng: Optional[np.random.Generator] = None
    protocol: Optional[config.ProtocolConfig] = None


class _SerializedPolicy:
    """Funnels decide() calls of a serialize_me policy through one lock."""

    concurrency = "concurrent_ok"

    def __init__(self, policy, lock: threading.Lock):
        self._policy = policy
        self._lock = lock

    def decide(self, rendered_state: str, rng, *, state=None) -> str:
        with self._lock:
            return self._policy.decide(rendered_state, rng, state=state)


def run_episodes(jobs: Sequence[EpisodeJob], max_workers: int = 4) -> List[Trajectory]:
    """Runs independent episodes concurrently; results keep the job order."""
    locks: Dict[int, threading.Lock] = {}

    def _bind(policy):
        if getattr(policy, "concurrency", "serialize_me") == "concurrent_ok":
            return policy
        lock = locks.setdefault(id(policy), threading.Lock())
        return _SerializedPolicy(policy, lock)

    bound = [_bind(job.policy) for job in jobs]
    if max_workers <= 1 or len(jobs) <= 1:
        return [
            run_episode(p, j.environment, j.script, j.episode_config,
                        system_prompt=j.system_prompt, rng=j.rng, protocol=j.protocol)
            for p, j in zip(bound, jobs)
        ]
    with ThreadPoolExecutor(max_workers=max_workers) as executor:
        futures = [
            executor.submit(
                run_episode, p, j.environment, j.script, j.episode_config,
                system_prompt=j.system_prompt, rng=j.rng, protocol=j.protocol,
            )
            for p, j in zip(bound, jobs)
        ]
        return [f.result() for f in futures]


# --- LOGS ---

def _answer_wire(answer) -> Any:
    if answer is ABSTAIN:
        return "ABSTAIN"
    if answer is None:
        return None
    return answer_to_wire(answer)


def trajectory_to_records(traj: Trajectory, reward=None) -> List[Dict[str, Any]]:
    """Per-turn records followed by one terminal record."""
    records: List[Dict[str, Any]] = []
    for turn in traj.turns:
        outcome = turn.outcome
        records.append({
            "record": "turn",
            "script_id": traj.script_id,
            "turn": turn.index,
            "phase": turn.phase,
            "raw_outputs": turn.raw_outputs,
            "action": action_to_wire(turn.action) if turn.action is not None else None,
            "violations": list(outcome.violations) if outcome else [],
            "attempts": len(turn.raw_outputs),
            "retries_used": turn.retries_used,
            "format_valid": turn.format_valid,
            "refused": turn.refused,
            "observation": turn.observation.text if turn.observation else None,
            "source": turn.observation.source if turn.observation else None,
            "tool_elapsed_s": turn.observation.elapsed_s if turn.observation else None,
            "elapsed_s": turn.elapsed_s,
        })
    terminal: Dict[str, Any] = {
        "record": "terminal",
        "final_answer": _answer_wire(traj.final_answer),
        "tool_calls": traj.tool_calls,
        "turns": len(traj.turns),
        "abstained": traj.abstained,
        "script_id": traj.script_id,
        "task_tag": traj.task_tag,
        "task_type": traj.task_type,
        "gold": gold_to_document(traj.gold) if traj.gold is not None else None,
        "error": traj.error,
        "format_valid_all": traj.format_valid_all,
        "min_calls_violated": traj.min_calls_violated,
        "source": traj.source,
        "tool_timings": traj.tool_timings,
        "timings": traj.timings,
    }
    if reward is not None:
        terminal["reward"] = {
            "r_ans": reward.r_ans,
            "r_fmt": reward.r_fmt,
            "r_total": reward.r_total,
            "correctness_detail": reward.correctness_detail,
        }
    records.append(terminal)
    return records


_log_lock = threading.Lock()


def write_trajectory_log(path: Path, trajectories: Sequence[Trajectory], rewards: Optional[Sequence] = None) -> None:
    """Appends trajectories to a JSONL log."""
    rewards = list(rewards) if rewards is not None else [None] * len(trajectories)
    records = [r for traj, rew in zip(trajectories, rewards) for r in trajectory_to_records(traj, rew)]
    with _log_lock:
        artifacts.append_jsonl(Path(path), records)


def read_trajectory_log(path: Path) -> List[Dict[str, Any]]:
    """One dict per episode: the terminal record plus its `turn_records`."""
    episodes: List[Dict[str, Any]] = []
    pending: List[Dict[str, Any]] = []
    for record in artifacts.iter_jsonl(Path(path)):
        if record.get("record") == "turn":
            pending.append(record)
            continue
        if "final_answer" not in record:
            raise ValueError(f"{path}: unrecognized record {sorted(record)}")
        episode = dict(record)
        episode["turn_records"] = pending
        episodes.append(episode)
        pending = []
    if pending:
        logger.warning("⚠️ %s ends with %d turn records and no terminal record", path, len(pending))
    return episodes
