"""
Episode engine tests
Run: pytest tests/test_episode_engine.py -v
"""
import json

import numpy as np
import pytest

import config
from action_protocol import ABSTAIN, Answer, GetCaption, serialize_action
from providers.remote_chat import RemoteTimeoutError
from providers.scripted import ScriptedPolicy
from reward_model import total_reward
from script_model import Letter
from workers.episode_engine import (
    ANSWER_ACCEPTED_TEXT,
    INVALID_ACTION_TEXT,
    PHASE_TOLERANCE,
    TOLERANCE_NOTICE,
    EpisodeJob,
    EpisodeState,
    EpisodeTask,
    FailedTurn,
    read_trajectory_log,
    render_state,
    run_episode,
    run_episodes,
    write_trajectory_log,
)
from workers.simulator import EnvironmentFailure, Observation, SimulatorEnvironment

PROSE = "I think the answer is D."


def _gc(video, **times):
    return serialize_action(GetCaption(video, thought=f"Read video {video}.", **times))


def _obs(video, frames=32):
    return json.dumps({
        "action": "observe",
        "thought": f"Look at video {video}.",
        "params": {"observation_targets": [
            {"video_index": video, "start_time": 0, "end_time": 60, "num_frames": frames},
        ]},
    })


def _ans(value):
    return json.dumps({"action": "answer", "thought": "Done.", "final_answer": value})


FIVE_TURNS = [_gc(1), _gc(2), _obs(1), _obs(2), _ans("D")]


class CapturingPolicy(ScriptedPolicy):
    """Scripted outputs that also keeps every prompt it was shown."""

    def __init__(self, turn_script):
        super().__init__(turn_script)
        self.prompts = []

    def decide(self, rendered_state, rng=None, *, state=None):
        self.prompts.append(rendered_state)
        return super().decide(rendered_state, rng, state=state)


class RandomPolicy:
    """Draws each output from a mixed pool of valid, invalid and answer messages."""

    concurrency = "concurrent_ok"
    POOL = [_gc(1), _gc(3), _obs(2), _obs(4, 100) + " " + _obs(1), _obs(1, 200), PROSE, "{}", _ans("b"), _ans("C")]

    def decide(self, rendered_state, rng, *, state=None):
        return self.POOL[int(rng.integers(len(self.POOL)))]


class BrokenEnvironment:
    source = "real_tool"
    video_count = 4

    def execute(self, action):
        raise EnvironmentFailure("frame extractor crashed")


class TimeoutPolicy:
    def decide(self, rendered_state, rng=None, *, state=None):
        raise RemoteTimeoutError("Timed out after 120s")


class TestRunEpisode:
    """run_episode drives the policy through the turn loop."""

    def test_five_turn_example(self, choice_script):
        """Two caption reads, two observes, then answer D."""
        traj = run_episode(ScriptedPolicy(FIVE_TURNS), SimulatorEnvironment(choice_script), choice_script)
        assert traj.final_answer == Letter("D")
        assert traj.tool_calls == 4
        assert len(traj.turns) == 5
        assert traj.format_valid_all
        assert not traj.min_calls_violated
        assert traj.turns[-1].observation.text == ANSWER_ACCEPTED_TEXT
        assert traj.turns[0].observation.text == "[5s - 15s]: Line 1."

    def test_prose_abstains_after_turn_limit(self, choice_script):
        """A policy that never emits JSON abstains after t_max + t_tol turns."""
        policy = ScriptedPolicy([PROSE])
        traj = run_episode(policy, SimulatorEnvironment(choice_script), choice_script)
        assert traj.final_answer is ABSTAIN
        assert traj.abstained
        assert len(traj.turns) == 30
        assert traj.tool_calls == 0
        assert not traj.format_valid_all
        assert policy.calls == 90
        assert all(t.observation.text == INVALID_ACTION_TEXT for t in traj.turns)
        assert all(len(t.raw_outputs) == 3 for t in traj.turns)

    def test_flag_only_early_answer(self, choice_script):
        """An answer on turn 1 is accepted and flagged."""
        traj = run_episode(ScriptedPolicy([_ans("D")]), SimulatorEnvironment(choice_script), choice_script)
        assert traj.final_answer == Letter("D")
        assert len(traj.turns) == 1
        assert traj.min_calls_violated

    def test_reject_answer_mode(self, choice_script):
        """In reject_answer mode an early answer is refused and the loop continues."""
        cfg = config.EpisodeConfig(min_tool_calls=2, min_tool_calls_mode="reject_answer")
        outputs = [_ans("A"), _gc(1), _gc(2), _ans("D")]
        traj = run_episode(ScriptedPolicy(outputs), SimulatorEnvironment(choice_script), choice_script, cfg)
        assert traj.turns[0].refused
        assert "Answer refused" in traj.turns[0].observation.text
        assert traj.final_answer == Letter("D")
        assert traj.tool_calls == 2
        assert not traj.min_calls_violated

    def test_tolerance_refuses_tools(self, choice_script):
        """Past t_max tool calls are refused, then the episode abstains."""
        cfg = config.EpisodeConfig(t_max=2, t_tol=2)
        traj = run_episode(ScriptedPolicy([_gc(1)]), SimulatorEnvironment(choice_script), choice_script, cfg)
        assert traj.final_answer is ABSTAIN
        assert len(traj.turns) == 4
        assert traj.tool_calls == 2
        assert [t.refused for t in traj.turns] == [False, False, True, True]
        assert all(t.phase == PHASE_TOLERANCE for t in traj.turns[2:])

    def test_tolerance_accepts_answer(self, choice_script):
        """An answer inside the grace window ends the episode."""
        cfg = config.EpisodeConfig(t_max=2, t_tol=3)
        outputs = [_gc(1), _gc(2), _gc(3), _ans("D")]
        traj = run_episode(ScriptedPolicy(outputs), SimulatorEnvironment(choice_script), choice_script, cfg)
        assert traj.final_answer == Letter("D")
        assert len(traj.turns) == 4
        assert traj.tool_calls == 2

    def test_retry_then_recover(self, choice_script):
        """A failed attempt is retried with a corrective note and the turn recovers."""
        policy = CapturingPolicy([PROSE, _gc(1), _ans("D")])
        traj = run_episode(policy, SimulatorEnvironment(choice_script), choice_script)
        first = traj.turns[0]
        assert first.retries_used == 1
        assert first.raw_outputs == [PROSE, _gc(1)]
        assert first.format_valid
        assert "Format issue on attempt 1" not in policy.prompts[0]
        assert "Format issue on attempt 1" in policy.prompts[1]
        assert traj.format_valid_all
        assert traj.final_answer == Letter("D")

    def test_budget_overrun_retry_quotes_limit(self, choice_script):
        """Two oversize observes lead to an example on the third attempt."""
        policy = CapturingPolicy([_obs(1, 200), _obs(1, 200), _gc(1), _ans("D")])
        run_episode(policy, SimulatorEnvironment(choice_script), choice_script)
        assert "must not exceed 128" in policy.prompts[1]
        assert "Format issue on attempt 2" in policy.prompts[2]
        assert "Minimal valid example" in policy.prompts[2]

    def test_repaired_answer_costs_format(self, choice_script):
        """A lowercase letter is accepted but the episode loses format validity."""
        traj = run_episode(ScriptedPolicy([_ans("d")]), SimulatorEnvironment(choice_script), choice_script)
        assert traj.final_answer == Letter("D")
        assert not traj.format_valid_all

    def test_environment_failure_marks_error(self, choice_script):
        """A failing backend aborts the episode without an answer."""
        traj = run_episode(ScriptedPolicy(FIVE_TURNS), BrokenEnvironment(), choice_script)
        assert traj.error.startswith("environment:")
        assert traj.final_answer is None
        assert len(traj.turns) == 1

    def test_remote_policy_failure_marks_error(self, choice_script):
        """A remote timeout aborts the episode as errored, not abstained."""
        traj = run_episode(TimeoutPolicy(), SimulatorEnvironment(choice_script), choice_script)
        assert traj.error.startswith("policy:")
        assert traj.final_answer is None
        assert not traj.abstained
        assert traj.turns == []

    def test_episode_task_without_script(self, choice_script):
        """A bare task runs against any environment."""
        task = EpisodeTask(query="Which video?", task_type="single_choice", options={"A": "x", "B": "y"}, video_count=4)
        traj = run_episode(ScriptedPolicy([_gc(2), _ans("B")]), SimulatorEnvironment(choice_script), task)
        assert traj.final_answer == Letter("B")
        assert traj.gold is None

    def test_thousand_random_episodes_terminate(self, choice_script):
        """Every episode ends with an answer or ABSTAIN inside the turn limit."""
        rng = np.random.default_rng(7)
        env = SimulatorEnvironment(choice_script)
        for _ in range(1000):
            traj = run_episode(RandomPolicy(), env, choice_script, rng=rng, system_prompt="SYSTEM")
            assert traj.error is None
            assert traj.final_answer is ABSTAIN or isinstance(traj.final_answer, Letter)
            assert 1 <= len(traj.turns) <= 30
            assert traj.tool_calls <= 20
            assert sum(1 for t in traj.turns if isinstance(t.action, Answer) and not t.refused) <= 1


class TestRunEpisodes:
    """Concurrent episodes keep job order."""

    def test_order_preserved(self, choice_script):
        """Results line up with jobs regardless of completion order."""
        letters = "ABCD" * 3
        jobs = [
            EpisodeJob(ScriptedPolicy([_gc(1), _ans(letter)]), SimulatorEnvironment(choice_script), choice_script)
            for letter in letters
        ]
        trajs = run_episodes(jobs, max_workers=4)
        assert [t.final_answer.value for t in trajs] == list(letters)

    def test_shared_serialized_policy(self, choice_script):
        """A serialize_me policy shared across jobs is called once per decision."""
        policy = ScriptedPolicy([_ans("D")])
        jobs = [EpisodeJob(policy, SimulatorEnvironment(choice_script), choice_script) for _ in range(6)]
        trajs = run_episodes(jobs, max_workers=3)
        assert policy.calls == 6
        assert all(t.final_answer == Letter("D") for t in trajs)


class TestRenderState:
    """render_state shows the question, options and history."""

    def test_fresh_state(self):
        """No history section before the first turn."""
        state = EpisodeState(query="Which video?", options={"B": "Video 2", "A": "Video 1"})
        text = render_state(state, "SYSTEM\n")
        assert text.startswith("SYSTEM\n\nQUESTION: Which video?")
        assert text.index("A. Video 1") < text.index("B. Video 2")
        assert "HISTORY" not in text

    def test_history_and_tolerance_notice(self):
        """Past turns are numbered; failed turns show their violations."""
        state = EpisodeState(query="Q")
        state.history.append((GetCaption(1), Observation("[0s - 1s]: hi")))
        state.history.append((FailedTurn(("not_json",)), Observation(INVALID_ACTION_TEXT)))
        state.phase = PHASE_TOLERANCE
        text = render_state(state, "SYSTEM")
        assert '[Turn 1] ACTION: {"action": "get_caption"' in text
        assert "[0s - 1s]: hi" in text
        assert "[Turn 2] ACTION: (invalid: not_json)" in text
        assert text.endswith(TOLERANCE_NOTICE)


class TestTrajectoryLog:
    """JSONL trajectory logs."""

    def test_write_and_read(self, tmp_path, choice_script):
        """Turn records are grouped under their terminal record."""
        traj = run_episode(ScriptedPolicy(FIVE_TURNS), SimulatorEnvironment(choice_script), choice_script)
        reward = total_reward(traj, choice_script.gold)
        abstain = run_episode(ScriptedPolicy([PROSE]), SimulatorEnvironment(choice_script), choice_script,
                              config.EpisodeConfig(t_max=1, t_tol=1))
        path = tmp_path / "runs" / "log.jsonl"
        write_trajectory_log(path, [traj, abstain], [reward, None])

        episodes = read_trajectory_log(path)
        assert len(episodes) == 2
        first, second = episodes
        assert first["final_answer"] == "D"
        assert first["gold"] == {"kind": "letter", "value": "D"}
        assert first["task_tag"] == "NC"
        assert len(first["turn_records"]) == 5
        assert first["reward"]["r_total"] == pytest.approx(1.1)
        assert len(first["tool_timings"]) == 4
        assert second["final_answer"] == "ABSTAIN"
        assert second["abstained"] is True
        assert "reward" not in second
        assert second["turn_records"][0]["violations"] == ["not_json"]

    def test_unknown_record_rejected(self, tmp_path):
        """A line that is neither a turn nor a terminal record is an error."""
        path = tmp_path / "bad.jsonl"
        path.write_text('{"hello": 1}\n', encoding="utf-8")
        with pytest.raises(ValueError):
            read_trajectory_log(path)
