import logging
from dataclasses import dataclass
from typing import Optional, Protocol, Tuple

import config
from action_protocol import ABSTAIN, AnswerShapeError
from script_model import FreeText, GoldAnswer, Interval

logger = logging.getLogger("CVR.Reward")

FORMAT_REWARD = 0.1


class FreeFormNotScorableError(ValueError):
    """Free-form golds need a judge; they are never auto-scored."""


@dataclass(frozen=True)
class RewardBreakdown:
    r_ans: float
    r_fmt: float
    r_total: float
    correctness_detail: Optional[float] = None


def interval_iou(a: Interval, b: Interval) -> float:
    """|a ∩ b| / |a ∪ b|; the union of disjoint intervals is the sum of their lengths."""
    for iv in (a, b):
        if not iv.end_s > iv.start_s:
            raise ValueError(f"Degenerate interval [{iv.start_s}, {iv.end_s}]")
    inter = max(0.0, min(a.end_s, b.end_s) - max(a.start_s, b.start_s))
    union = (a.end_s - a.start_s) + (b.end_s - b.start_s) - inter
    return inter / union


def correctness(
    gold: GoldAnswer,
    predicted,
    iou_threshold: float = 0.5,
) -> Tuple[float, Optional[float]]:
    """(r_ans, detail). Detail is the IoU for interval golds, else None."""
    if isinstance(gold, FreeText):
        raise FreeFormNotScorableError("free_form answers are scored by a judge, not by correctness()")
    if predicted is ABSTAIN or predicted is None:
        return 0.0, None
    if type(predicted) is not type(gold):
        raise AnswerShapeError(
            f"Predicted {type(predicted).__name__} cannot be compared with gold {type(gold).__name__}"
        )
    if isinstance(gold, Interval):
        iou = interval_iou(gold, predicted)
        return (1.0 if iou >= iou_threshold else 0.0), iou
    return (1.0 if predicted.value == gold.value else 0.0), None


def total_reward(trajectory, gold: GoldAnswer, reward_config: Optional[config.RewardConfig] = None) -> RewardBreakdown:
    """
    R_total = R_ans + R_fmt for a terminated trajectory.

    R_fmt is 0.1 only when every turn's final parse was format-valid; in
    strict mode a retried turn also forfeits it.
    """
    cfg = reward_config or config.RewardConfig()
    r_ans, detail = correctness(gold, trajectory.final_answer, cfg.iou_threshold)
    format_ok = trajectory.format_valid_all
    if cfg.strict_format and any(turn.retries_used for turn in trajectory.turns):
        format_ok = False
    r_fmt = FORMAT_REWARD if format_ok else 0.0
    if detail is not None:
        logger.debug("IoU %.4f for %s", detail, getattr(trajectory, "script_id", "?"))
    return RewardBreakdown(r_ans, r_fmt, r_ans + r_fmt, detail)


class FreeFormJudge(Protocol):
    def __call__(self, gold_text: str, predicted_text: str) -> float: ...


def judge_free_form(judge: FreeFormJudge, gold: FreeText, predicted) -> float:
    """Score in [0, 1] from a pluggable judge; ABSTAIN scores 0."""
    if predicted is ABSTAIN or predicted is None:
        return 0.0
    text = predicted.text if isinstance(predicted, FreeText) else str(predicted)
    score = float(judge(gold.text, text))
    if not 0.0 <= score <= 1.0:
        raise ValueError(f"Judge returned {score}, expected a value in [0, 1]")
    return score
