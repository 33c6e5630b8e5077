"""
Master Agent action messages: parse, canonicalize, serialize, retry prompts.

Parsing never raises. Every failure is recorded on the ParseOutcome as a
violation name, so the episode engine can retry and the reward model can
read format validity off the outcome alone.
"""

import json
import logging
import re
from dataclasses import dataclass, field
from typing import Annotated, Any, List, Optional, Tuple, Union

from pydantic import AfterValidator, BaseModel, ValidationError, ValidationInfo, field_validator, model_validator
from pydantic_core import PydanticCustomError

import config
import task_profiles
from script_model import (
    GOLD_KIND_FOR_TASK,
    LETTERS,
    FreeText,
    GoldAnswer,
    Index,
    Interval,
    Letter,
    LetterSet,
    Seconds,
    Sequence,
    answer_to_wire,
    is_sequence_text,
)

logger = logging.getLogger("CVR.Protocol")

ACTION_KINDS = ("observe", "get_caption", "answer")

# Violations that still leave a usable action: the turn proceeds without a
# retry but is not format-valid.
REPAIR_VIOLATIONS = frozenset({"answer_not_canonical", "multiple_actions"})

VIOLATION_TEXT = {
    "not_json": "LLM response is not valid JSON.",
    "not_object": "LLM response is JSON but not an object.",
    "unknown_action": 'action must be one of "observe", "get_caption", "answer".',
    "missing_params": "required params are missing.",
    "bad_params": "params have the wrong type.",
    "empty_targets": "observation_targets must not be empty.",
    "inverted_window": "start_time must not be after end_time.",
    "negative_time": "times must be >= 0.",
    "non_positive_frames": "num_frames must be a positive integer.",
    "frame_budget_exceeded": "too many frames requested.",
    "unknown_video": "video_index does not exist.",
    "answer_shape": "final_answer has the wrong shape for this task.",
    "answer_not_canonical": "final_answer is not in canonical form.",
    "multiple_actions": "only one JSON action per message is allowed.",
}


# --- ACTIONS ---

@dataclass(frozen=True)
class ObservationTarget:
    video_index: int
    start_time: float
    end_time: float
    num_frames: int


@dataclass(frozen=True)
class Observe:
    targets: Tuple[ObservationTarget, ...]
    focus_prompt: str = ""
    thought: str = ""
    kind = "observe"

    @property
    def total_frames(self) -> int:
        return sum(t.num_frames for t in self.targets)


@dataclass(frozen=True)
class GetCaption:
    video_index: int
    start_time: Optional[float] = None
    end_time: Optional[float] = None
    thought: str = ""
    kind = "get_caption"


@dataclass(frozen=True)
class Answer:
    final_answer: GoldAnswer
    thought: str = ""
    kind = "answer"


AgentAction = Union[Observe, GetCaption, Answer]


class _Abstain:
    """Terminal outcome of an episode that ended without a usable answer."""

    _instance = None

    def __new__(cls):
        if cls._instance is None:
            cls._instance = super().__new__(cls)
        return cls._instance

    def __repr__(self) -> str:
        return "ABSTAIN"

    def __reduce__(self):
        return (_Abstain, ())


ABSTAIN = _Abstain()


@dataclass(frozen=True)
class ParseOutcome:
    """
    Result of one parse attempt.

    `result` is set when the message yields a usable action. Hard violations
    leave it None; repair violations (REPAIR_VIOLATIONS) keep the repaired
    action, so `violations` is empty only for a clean valid action.
    """
    result: Optional[AgentAction]
    attempt: int = 1
    violations: Tuple[str, ...] = ()
    raw: str = field(default="", repr=False, compare=False)

    @property
    def usable(self) -> bool:
        return self.result is not None

    @property
    def reason(self) -> str:
        return " ".join(VIOLATION_TEXT.get(v, v) for v in self.violations)


class AnswerShapeError(ValueError):
    pass


class RetryMisuseError(ValueError):
    pass


# --- ANSWERS ---

_SEPARATORS = re.compile(r"[\s,;]+")


def _is_number(value: Any) -> bool:
    return isinstance(value, (int, float)) and not isinstance(value, bool)


def _letters_from(value: Any) -> Optional[List[str]]:
    if isinstance(value, str):
        return list(_SEPARATORS.sub("", value).upper())
    if isinstance(value, (list, tuple)) and all(isinstance(v, str) for v in value):
        return [ch for v in value for ch in _SEPARATORS.sub("", v).upper()]
    return None


def canonicalize_answer(value: Any, task_type: str) -> GoldAnswer:
    """Maps a raw final_answer to the canonical answer for a task type."""
    if task_type not in GOLD_KIND_FOR_TASK:
        raise AnswerShapeError(f"Unknown task_type {task_type!r}")
    expected_kind = GOLD_KIND_FOR_TASK[task_type]
    if isinstance(value, (Letter, LetterSet, Sequence, Interval, FreeText)):
        if value.kind != expected_kind:
            raise AnswerShapeError(f"{value.kind} answer given for a {task_type} task")
        value = answer_to_wire(value)

    if task_type == "single_choice":
        letters = _letters_from(value)
        if letters is None or len(letters) != 1 or letters[0] not in LETTERS:
            raise AnswerShapeError('single_choice expects one option letter, e.g. "D"')
        return Letter(letters[0])

    if task_type == "multi_select":
        letters = _letters_from(value)
        if not letters or any(ch not in LETTERS for ch in letters):
            raise AnswerShapeError('multi_select expects option letters, e.g. "AC"')
        return LetterSet("".join(sorted(set(letters))))

    if task_type == "sequence":
        if isinstance(value, (list, tuple)) and value and all(
            isinstance(v, int) and not isinstance(v, bool) for v in value
        ):
            value = "->".join(str(v) for v in value)
        if isinstance(value, str):
            compact = re.sub(r"\s+", "", value)
            if is_sequence_text(compact):
                return Sequence(compact)
        raise AnswerShapeError(r'sequence expects indices joined by "->", matching \d+(->\d+)+')

    if task_type == "interval":
        if isinstance(value, str):
            try:
                value = json.loads(value)
            except json.JSONDecodeError:
                value = None
        if (
            isinstance(value, (list, tuple))
            and len(value) == 2
            and all(_is_number(v) for v in value)
            and float(value[0]) < float(value[1])
        ):
            return Interval(float(value[0]), float(value[1]))
        raise AnswerShapeError("interval expects [start_s, end_s] with start_s < end_s")

    if not isinstance(value, str):
        raise AnswerShapeError("free_form expects a text answer")
    return FreeText(value.strip())


def _is_canonical_wire(value: Any, answer: GoldAnswer) -> bool:
    wire = answer_to_wire(answer)
    if isinstance(answer, Interval):
        return isinstance(value, (list, tuple)) and [float(v) for v in value] == wire
    return isinstance(value, str) and value == wire


# --- PARSING ---

def _strip_fences(text: str) -> str:
    text = text.strip()
    if text.startswith("```"):
        text = re.sub(r"^```[a-zA-Z]*\s*", "", text)
        text = re.sub(r"\s*```$", "", text)
    return text


def _extract_objects(text: str, limit: int = 2) -> List[dict]:
    """Up to `limit` top-level JSON objects, scanning left to right through prose."""
    decoder = json.JSONDecoder()
    found: List[dict] = []
    pos = text.find("{")
    while pos != -1 and len(found) < limit:
        try:
            obj, end = decoder.raw_decode(text, pos)
        except json.JSONDecodeError:
            pos = text.find("{", pos + 1)
            continue
        if isinstance(obj, dict):
            found.append(obj)
        pos = text.find("{", end)
    return found


# --- WIRE PAYLOADS ---
# Validation context: {"video_count": int | None, "frame_budget": int}.

def _video_index(value: int, info: ValidationInfo) -> int:
    video_count = (info.context or {}).get("video_count")
    if value < 1 or (video_count is not None and value > video_count):
        raise PydanticCustomError("unknown_video", "video_index {value} does not exist", {"value": value})
    return value


def _non_negative(value: Optional[float]) -> Optional[float]:
    if value is not None and value < 0:
        raise PydanticCustomError("negative_time", "times must be >= 0")
    return value


VideoRef = Annotated[Index, AfterValidator(_video_index)]
Time = Annotated[Seconds, AfterValidator(_non_negative)]


class _Window(BaseModel):
    @model_validator(mode="after")
    def _ordered(self):
        if self.start_time is not None and self.end_time is not None and self.start_time > self.end_time:
            raise PydanticCustomError("inverted_window", "start_time must not be after end_time")
        return self


class TargetPayload(_Window):
    video_index: VideoRef
    start_time: Time
    end_time: Time
    num_frames: Index

    @field_validator("num_frames")
    @classmethod
    def _positive(cls, value: int) -> int:
        if value <= 0:
            raise PydanticCustomError("non_positive_frames", "num_frames must be a positive integer")
        return value


class ObservePayload(BaseModel):
    observation_targets: List[TargetPayload]
    focus_prompt: str = ""

    @field_validator("observation_targets", mode="before")
    @classmethod
    def _not_empty(cls, value: Any) -> Any:
        if isinstance(value, list) and not value:
            raise PydanticCustomError("empty_targets", "observation_targets must not be empty")
        return value

    @model_validator(mode="after")
    def _within_budget(self, info: ValidationInfo):
        budget = (info.context or {}).get("frame_budget", config.FRAME_BUDGET)
        if sum(t.num_frames for t in self.observation_targets) > budget:
            raise PydanticCustomError("frame_budget_exceeded", "too many frames requested")
        return self


class GetCaptionPayload(_Window):
    video_index: VideoRef
    start_time: Optional[Time] = None
    end_time: Optional[Time] = None


def _violation_names(exc: ValidationError) -> List[str]:
    """Custom error types are violation names; pydantic's own are missing or malformed params."""
    names = []
    for err in exc.errors(include_url=False):
        kind = err["type"]
        if kind in VIOLATION_TEXT:
            names.append(kind)
        elif kind == "missing":
            names.append("missing_params")
        else:
            names.append("bad_params")
    return names


def _validate_params(model, params: Any, context: dict, violations: List[str]):
    if params is None:
        violations.append("missing_params")
        return None
    try:
        return model.model_validate(params, context=context)
    except ValidationError as exc:
        violations.extend(_violation_names(exc))
        return None


def _parse_observe(params: Any, thought: str, context: dict, violations: List[str]) -> Optional[Observe]:
    payload = _validate_params(ObservePayload, params, context, violations)
    if payload is None:
        return None
    targets = tuple(
        ObservationTarget(t.video_index, t.start_time, t.end_time, t.num_frames)
        for t in payload.observation_targets
    )
    return Observe(targets, focus_prompt=payload.focus_prompt, thought=thought)


def _parse_get_caption(params: Any, thought: str, context: dict, violations: List[str]) -> Optional[GetCaption]:
    payload = _validate_params(GetCaptionPayload, params, context, violations)
    if payload is None:
        return None
    return GetCaption(payload.video_index, start_time=payload.start_time, end_time=payload.end_time, thought=thought)


def _parse_answer(obj: dict, thought: str, task_type: str, cfg: config.ProtocolConfig, violations) -> Optional[Answer]:
    params = obj.get("params") if isinstance(obj.get("params"), dict) else {}
    if "final_answer" in obj:
        value = obj["final_answer"]
    elif "final_answer" in params:
        value = params["final_answer"]
    else:
        violations.append("missing_params")
        return None
    try:
        answer = canonicalize_answer(value, task_type)
    except AnswerShapeError as exc:
        logger.debug("Answer shape rejected: %s", exc)
        violations.append("answer_shape")
        return None
    if not _is_canonical_wire(value, answer):
        if cfg.strict_answer_format:
            violations.append("answer_not_canonical")
        logger.warning("⚠️ Repaired final_answer %r -> %r", value, answer_to_wire(answer))
    return Answer(answer, thought=thought)


def parse_action(
    raw: str,
    task_type: str,
    *,
    attempt: int = 1,
    protocol: Optional[config.ProtocolConfig] = None,
    video_count: Optional[int] = None,
) -> ParseOutcome:
    """
    Extracts the first JSON object from raw model output and maps it to an
    action. Surrounding prose and code fences are tolerated; a second object
    is ignored and flagged.
    """
    cfg = protocol or config.ProtocolConfig()
    raw = raw if isinstance(raw, str) else str(raw)
    text = _strip_fences(raw)
    objects = _extract_objects(text)
    if not objects:
        try:
            json.loads(text)
        except (json.JSONDecodeError, ValueError):
            return ParseOutcome(None, attempt, ("not_json",), raw)
        return ParseOutcome(None, attempt, ("not_object",), raw)

    obj = objects[0]
    violations: List[str] = []
    if len(objects) > 1:
        violations.append("multiple_actions")

    kind = obj.get("action")
    kind = kind.strip().lower() if isinstance(kind, str) else None
    thought = obj.get("thought", "")
    if not isinstance(thought, str):
        thought = json.dumps(thought, ensure_ascii=False)

    context = {"video_count": video_count, "frame_budget": cfg.frame_budget}
    hard: List[str] = []
    action: Optional[AgentAction] = None
    if kind == "observe":
        action = _parse_observe(obj.get("params"), thought, context, hard)
    elif kind == "get_caption":
        action = _parse_get_caption(obj.get("params"), thought, context, hard)
    elif kind == "answer":
        action = _parse_answer(obj, thought, task_type, cfg, hard)
    else:
        hard.append("unknown_action")

    # answer_not_canonical rides along with a usable action
    hard_only = [v for v in hard if v not in REPAIR_VIOLATIONS]
    violations.extend(dict.fromkeys(hard))
    if hard_only:
        action = None
    return ParseOutcome(action, attempt, tuple(violations), raw)


def is_format_valid(outcome: ParseOutcome) -> bool:
    return outcome.result is not None and not outcome.violations


# --- SERIALIZATION ---

def action_to_wire(action: AgentAction) -> dict:
    if isinstance(action, Observe):
        return {
            "action": "observe",
            "thought": action.thought,
            "params": {
                "observation_targets": [
                    {
                        "video_index": t.video_index,
                        "start_time": t.start_time,
                        "end_time": t.end_time,
                        "num_frames": t.num_frames,
                    }
                    for t in action.targets
                ],
                "focus_prompt": action.focus_prompt,
            },
        }
    if isinstance(action, GetCaption):
        params: dict = {"video_index": action.video_index}
        if action.start_time is not None:
            params["start_time"] = action.start_time
        if action.end_time is not None:
            params["end_time"] = action.end_time
        return {"action": "get_caption", "thought": action.thought, "params": params}
    if isinstance(action, Answer):
        return {"action": "answer", "thought": action.thought, "final_answer": answer_to_wire(action.final_answer)}
    raise TypeError(f"Not an agent action: {action!r}")


def serialize_action(action: AgentAction) -> str:
    return json.dumps(action_to_wire(action), ensure_ascii=False)


# --- RETRY PROMPTS ---

REQUIRED_SHAPE = (
    '{"action": "observe" | "get_caption", "thought": "...", "params": {...}} '
    'or {"action": "answer", "thought": "...", "final_answer": ...}'
)


def _minimal_example(violations: Tuple[str, ...], task_type: Optional[str], frame_budget: int) -> str:
    if task_type and ("answer_shape" in violations or "answer_not_canonical" in violations):
        example = task_profiles.ANSWER_FORMATS[task_type]["example"]
        return '{"action": "answer", "thought": "...", "final_answer": ' + example + "}"
    if "frame_budget_exceeded" in violations:
        frames = max(1, frame_budget // 2)
        return (
            '{"action": "observe", "thought": "...", "params": {"observation_targets": ['
            f'{{"video_index": 1, "start_time": 0, "end_time": 10, "num_frames": {frames}}}, '
            f'{{"video_index": 2, "start_time": 0, "end_time": 10, "num_frames": {frames}}}'
            '], "focus_prompt": "..."}}'
        )
    return '{"action": "get_caption", "thought": "...", "params": {"video_index": 1}}'


def build_retry_message(
    attempt: int,
    failure: ParseOutcome,
    *,
    task_type: Optional[str] = None,
    frame_budget: int = config.FRAME_BUDGET,
) -> str:
    """
    Corrective message injected before re-asking the policy. Attempt 1 is
    terse; later attempts add a minimal valid example.
    """
    if attempt < 1:
        raise RetryMisuseError(f"attempt must be >= 1, got {attempt}")
    if failure.usable:
        raise RetryMisuseError("build_retry_message called for a usable action")
    lines = [f"!Format issue on attempt {attempt}. Retrying cleanly... ({failure.reason})"]
    if "frame_budget_exceeded" in failure.violations:
        lines.append(f"The num_frames sum in a single observe call must not exceed {frame_budget}.")
    lines.append(f"Reply with exactly one JSON object: {REQUIRED_SHAPE}")
    if attempt >= 2:
        lines.append("Minimal valid example: " + _minimal_example(failure.violations, task_type, frame_budget))
    return "\n".join(lines)
