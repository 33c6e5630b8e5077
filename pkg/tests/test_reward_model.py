"""
Reward model tests
Run: pytest tests/test_reward_model.py -v
"""
import numpy as np
import pytest
from hypothesis import assume, given, strategies as st

import config
from action_protocol import ABSTAIN, AnswerShapeError
from reward_model import (
    FORMAT_REWARD,
    FreeFormNotScorableError,
    correctness,
    interval_iou,
    judge_free_form,
    total_reward,
)
from script_model import FreeText, Interval, Letter, LetterSet, Sequence
from workers.episode_engine import Trajectory, TurnRecord

GOLD_FSA = Interval(86.0, 104.0)

finite = st.floats(min_value=-1000, max_value=1000, allow_nan=False, allow_infinity=False)
length = st.floats(min_value=0.01, max_value=500, allow_nan=False, allow_infinity=False)


def _traj(final_answer, format_valid_all=True, retries=(0,)):
    turns = [TurnRecord(i + 1, "active", ["x"] * (r + 1), None, None, retries_used=r) for i, r in enumerate(retries)]
    return Trajectory("s", "single_choice", turns=turns, final_answer=final_answer, format_valid_all=format_valid_all)


class TestIntervalIoU:
    """interval_iou on closed intervals."""

    def test_shrimp_prediction(self):
        """The peeled-shrimp prediction scores about 0.93."""
        assert interval_iou(Interval(85.88, 105.24), GOLD_FSA) == pytest.approx(0.93, abs=0.005)

    def test_identity(self):
        """An interval overlaps itself completely."""
        assert interval_iou(GOLD_FSA, GOLD_FSA) == 1.0

    def test_disjoint(self):
        """Disjoint intervals score zero."""
        assert interval_iou(Interval(0, 10), Interval(20, 30)) == 0.0

    def test_touching(self):
        """Sharing an endpoint is no overlap."""
        assert interval_iou(Interval(0, 10), Interval(10, 20)) == 0.0

    def test_nested(self):
        """A nested interval scores its length ratio."""
        assert interval_iou(Interval(0, 10), Interval(2, 7)) == pytest.approx(0.5)

    def test_degenerate_rejected(self):
        """Zero-length intervals have no IoU."""
        with pytest.raises(ValueError):
            interval_iou(Interval(5, 5), Interval(0, 10))

    @given(finite, length, finite, length)
    def test_symmetric_and_bounded(self, s1, l1, s2, l2):
        """IoU is symmetric and in [0, 1]."""
        a, b = Interval(s1, s1 + l1), Interval(s2, s2 + l2)
        assume(a.end_s > a.start_s and b.end_s > b.start_s)
        iou = interval_iou(a, b)
        assert 0.0 <= iou <= 1.0 + 1e-12
        assert iou == pytest.approx(interval_iou(b, a))

    @given(finite, length, finite, length, st.floats(-100, 100, allow_nan=False))
    def test_translation_invariant(self, s1, l1, s2, l2, shift):
        """Shifting both intervals leaves the IoU unchanged."""
        a, b = Interval(s1, s1 + l1), Interval(s2, s2 + l2)
        a2, b2 = Interval(s1 + shift, s1 + l1 + shift), Interval(s2 + shift, s2 + l2 + shift)
        assume(min(a.length, b.length, a2.length, b2.length) > 1e-3)
        assert interval_iou(a2, b2) == pytest.approx(interval_iou(a, b), abs=1e-6)


class TestCorrectness:
    """correctness maps (gold, predicted) to R_ans."""

    def test_letter_match(self):
        """Exact letters score 1."""
        assert correctness(Letter("D"), Letter("D")) == (1.0, None)
        assert correctness(Letter("D"), Letter("A")) == (0.0, None)

    def test_letter_set_and_sequence(self):
        """Canonical strings compare exactly, with no partial credit."""
        assert correctness(LetterSet("AC"), LetterSet("AC"))[0] == 1.0
        assert correctness(LetterSet("AC"), LetterSet("A"))[0] == 0.0
        assert correctness(Sequence("3->5->4->2->1"), Sequence("3->5->4->2->1"))[0] == 1.0
        assert correctness(Sequence("3->5->4->2->1"), Sequence("3->5->4->1->2"))[0] == 0.0

    def test_interval_threshold(self):
        """Intervals pass at the IoU threshold and carry the IoU as detail."""
        score, detail = correctness(GOLD_FSA, Interval(85.88, 105.24), 0.5)
        assert score == 1.0
        assert detail == pytest.approx(0.93, abs=0.005)
        assert correctness(GOLD_FSA, Interval(85.88, 105.24), 0.95)[0] == 0.0

    def test_abstain_scores_zero(self):
        """ABSTAIN is wrong for every gold kind."""
        for gold in (Letter("A"), LetterSet("AB"), Sequence("1->2"), GOLD_FSA):
            assert correctness(gold, ABSTAIN) == (0.0, None)

    def test_free_form_not_scorable(self):
        """Free-form golds go to a judge instead."""
        with pytest.raises(FreeFormNotScorableError):
            correctness(FreeText("the sauce"), FreeText("the sauce"))

    def test_shape_mismatch(self):
        """A prediction of another kind is an error, not a zero."""
        with pytest.raises(AnswerShapeError):
            correctness(Letter("A"), LetterSet("A"))


class TestTotalReward:
    """R_total = R_ans + R_fmt."""

    def test_four_values(self):
        """Only 0.0, 0.1, 1.0 and 1.1 are possible."""
        assert total_reward(_traj(Letter("D")), Letter("D")).r_total == pytest.approx(1.1)
        assert total_reward(_traj(Letter("D"), False), Letter("D")).r_total == 1.0
        assert total_reward(_traj(Letter("A")), Letter("D")).r_total == pytest.approx(0.1)
        assert total_reward(_traj(ABSTAIN, False), Letter("D")).r_total == 0.0

    def test_retry_counts_only_in_strict_mode(self):
        """A recovered retry keeps R_fmt unless strict_format is on."""
        traj = _traj(Letter("D"), True, retries=(1, 0))
        assert total_reward(traj, Letter("D")).r_fmt == FORMAT_REWARD
        strict = config.RewardConfig(strict_format=True)
        assert total_reward(traj, Letter("D"), strict).r_fmt == 0.0

    def test_interval_detail(self):
        """The interval IoU is reported with the breakdown."""
        breakdown = total_reward(_traj(Interval(85.88, 105.24)), GOLD_FSA)
        assert breakdown.r_ans == 1.0
        assert breakdown.correctness_detail == pytest.approx(0.93, abs=0.005)

    def test_thousand_random_trajectories(self):
        """The sum identity holds on every generated trajectory."""
        rng = np.random.default_rng(11)
        gold = Letter("C")
        for _ in range(1000):
            pick = int(rng.integers(5))
            answer = ABSTAIN if pick == 4 else Letter("ABCD"[pick])
            retries = tuple(int(r) for r in rng.integers(0, 3, size=int(rng.integers(1, 6))))
            cfg = config.RewardConfig(strict_format=bool(rng.integers(2)))
            r = total_reward(_traj(answer, bool(rng.integers(2)), retries), gold, cfg)
            assert r.r_total == r.r_ans + r.r_fmt
            assert r.r_ans in (0.0, 1.0)
            assert r.r_fmt in (0.0, FORMAT_REWARD)

    def test_free_form_rejected(self):
        """total_reward refuses free-form golds."""
        with pytest.raises(FreeFormNotScorableError):
            total_reward(_traj(FreeText("x")), FreeText("x"))


class TestJudge:
    """Pluggable free-form judge."""

    def test_judge_called_with_texts(self):
        """The judge sees gold and predicted text."""
        seen = []

        def judge(gold_text, predicted_text):
            seen.append((gold_text, predicted_text))
            return 0.75

        assert judge_free_form(judge, FreeText("gold"), FreeText("guess")) == 0.75
        assert seen == [("gold", "guess")]

    def test_abstain_skips_judge(self):
        """ABSTAIN scores 0 without calling the judge."""
        assert judge_free_form(lambda g, p: 1 / 0, FreeText("gold"), ABSTAIN) == 0.0

    def test_out_of_range_score(self):
        """Judges must return a value in [0, 1]."""
        with pytest.raises(ValueError):
            judge_free_form(lambda g, p: 2.0, FreeText("gold"), FreeText("x"))
