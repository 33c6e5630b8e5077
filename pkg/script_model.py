"""
Semantic scripts: the text surrogate for a set of videos.

A script carries the question, the gold answer and, per video, timed visual
events and caption lines. Scripts are validated once on load and are
immutable afterwards; the simulator only ever reads them through
`script_slice`.

External format (UTF-8 JSON, one script per file or one per line):

    {"script_id": str, "task_type": str, "task_tag": str?, "question": str,
     "options": {"A": str, ...}?, "gold": {"kind": str, "value": ...},
     "videos": [{"video_index": int, "duration_s": num,
                 "events": [{"start_s": num, "end_s": num, "visual": str}],
                 "captions": [{"start_s": num, "end_s": num, "text": str}]}]}
"""

import json
import logging
import re
from dataclasses import dataclass
from pathlib import Path
from typing import Annotated, Any, Dict, Iterable, List, Literal, Optional, Sequence as SequenceT, Tuple, Union

from pydantic import AfterValidator, BaseModel, BeforeValidator, ConfigDict, Field, ValidationError, ValidationInfo, field_validator
from pydantic_core import PydanticCustomError

logger = logging.getLogger("CVR.Script")

TASK_TYPES = ("single_choice", "multi_select", "sequence", "interval", "free_form")
CHOICE_TASKS = ("single_choice", "multi_select")
CHANNELS = ("events", "captions")
SEQUENCE_RE = re.compile(r"\d+(->\d+)+")  # always fullmatch
LETTERS = "ABCDEFGHIJKLMNOPQRSTUVWXYZ"


# --- GOLD ANSWERS ---

@dataclass(frozen=True)
class Letter:
    value: str
    kind = "letter"


@dataclass(frozen=True)
class LetterSet:
    value: str
    kind = "letter_set"


@dataclass(frozen=True)
class Sequence:
    value: str
    kind = "sequence"


@dataclass(frozen=True)
class Interval:
    start_s: float
    end_s: float
    kind = "interval"

    @property
    def length(self) -> float:
        return self.end_s - self.start_s


@dataclass(frozen=True)
class FreeText:
    text: str
    kind = "free_text"


GoldAnswer = Union[Letter, LetterSet, Sequence, Interval, FreeText]
GOLD_TYPES = (Letter, LetterSet, Sequence, Interval, FreeText)

# task_type -> the single gold kind it accepts
GOLD_KIND_FOR_TASK = {
    "single_choice": "letter",
    "multi_select": "letter_set",
    "sequence": "sequence",
    "interval": "interval",
    "free_form": "free_text",
}


def answer_to_wire(answer: GoldAnswer) -> Any:
    """The JSON value used for `final_answer` and for gold documents."""
    if isinstance(answer, Interval):
        return [answer.start_s, answer.end_s]
    if isinstance(answer, FreeText):
        return answer.text
    return answer.value


def gold_to_document(gold: GoldAnswer) -> dict:
    return {"kind": gold.kind, "value": answer_to_wire(gold)}


def is_sequence_text(value: Any) -> bool:
    return isinstance(value, str) and SEQUENCE_RE.fullmatch(value) is not None


# --- ERRORS ---

@dataclass(frozen=True)
class ValidationIssue:
    path: str
    message: str

    def __str__(self) -> str:
        return f"{self.path}: {self.message}"


class ScriptValidationError(ValueError):
    """Carries every violation found in a script document, not only the first."""

    def __init__(self, errors: List[ValidationIssue], script_id: Optional[str] = None):
        self.errors = list(errors)
        self.script_id = script_id
        head = "; ".join(str(e) for e in self.errors[:5])
        more = f" (+{len(self.errors) - 5} more)" if len(self.errors) > 5 else ""
        super().__init__(f"Invalid script {script_id or '<unknown>'}: {head}{more}")


class UnknownVideoError(ValueError):
    pass


def issue_at(error_type: str, message: str, *at: Union[str, int], **ctx: Any) -> PydanticCustomError:
    """
    A validator error whose path continues below the field that raised it;
    `at` is appended to the pydantic location when issues are collected.
    """
    return PydanticCustomError(error_type, message, {"at": list(at), **ctx})


def format_path(loc: Iterable[Union[str, int]]) -> str:
    """('videos', 1, 'events', 0, 'end_s') -> 'videos[1].events[0].end_s'; the root is '$'."""
    out = ""
    for part in loc:
        if isinstance(part, int):
            out += f"[{part}]"
        else:
            out += f".{part}" if out else str(part)
    return out or "$"


def issues_from_error(exc: ValidationError, prefix: Tuple[Union[str, int], ...] = ()) -> List[ValidationIssue]:
    issues = []
    for err in exc.errors(include_url=False):
        at = tuple((err.get("ctx") or {}).get("at", ()))
        issues.append(ValidationIssue(format_path(prefix + tuple(err["loc"]) + at), err["msg"]))
    return issues


# --- FIELD TYPES ---

def _require_number(value: Any) -> Any:
    if isinstance(value, bool) or not isinstance(value, (int, float)):
        raise PydanticCustomError("number_type", "must be a number")
    return value


def _require_integer(value: Any) -> Any:
    if isinstance(value, bool) or not isinstance(value, int):
        raise PydanticCustomError("integer_type", "must be an integer")
    return value


# JSON numbers only: strings and booleans are refused instead of coerced.
Seconds = Annotated[float, BeforeValidator(_require_number)]
Index = Annotated[int, BeforeValidator(_require_integer)]


def _non_blank(value: str) -> str:
    if not value.strip():
        raise PydanticCustomError("blank", "must be a non-empty string")
    return value


NonBlank = Annotated[str, AfterValidator(_non_blank)]


# --- SCRIPT TYPES ---

class TimedEntry(BaseModel):
    model_config = ConfigDict(frozen=True)

    start_s: Seconds = Field(ge=0)
    end_s: Seconds

    @field_validator("end_s")
    @classmethod
    def _not_before_start(cls, end_s: float, info: ValidationInfo) -> float:
        start_s = info.data.get("start_s")
        if start_s is not None and end_s < start_s:
            raise PydanticCustomError(
                "inverted_entry", "end_s {end_s} is before start_s {start_s}",
                {"end_s": end_s, "start_s": start_s},
            )
        return end_s


class TimedEvent(TimedEntry):
    visual: NonBlank


class TimedCaption(TimedEntry):
    # Empty text marks a silent interval.
    text: str


Entry = Union[TimedEvent, TimedCaption]


class VideoScript(BaseModel):
    model_config = ConfigDict(frozen=True)

    video_index: Index
    duration_s: Seconds = Field(gt=0)
    events: Tuple[TimedEvent, ...] = ()
    captions: Tuple[TimedCaption, ...] = ()

    @field_validator("events", "captions", mode="before")
    @classmethod
    def _absent_is_empty(cls, value: Any) -> Any:
        return () if value is None else value

    @field_validator("events", "captions")
    @classmethod
    def _ordered_inside_video(cls, entries: Tuple[TimedEntry, ...], info: ValidationInfo) -> Tuple[TimedEntry, ...]:
        duration = info.data.get("duration_s")
        for idx, entry in enumerate(entries):
            if duration is not None and entry.end_s > duration:
                raise issue_at(
                    "entry_past_end", "end_s {end_s} exceeds duration_s {duration_s}", idx, "end_s",
                    end_s=entry.end_s, duration_s=duration,
                )
        for idx in range(1, len(entries)):
            prev, cur = entries[idx - 1], entries[idx]
            if (cur.start_s, cur.end_s) < (prev.start_s, prev.end_s):
                raise issue_at("unsorted_entries", "entries must be sorted by start_s then end_s", idx)
        return entries


def _gold_from_value(raw: Any) -> GoldAnswer:
    if not isinstance(raw, dict):
        raise issue_at("gold_type", "must be an object with 'kind' and 'value'")
    kind, value = raw.get("kind"), raw.get("value")
    if kind == "letter":
        if isinstance(value, str) and len(value) == 1 and value in LETTERS:
            return Letter(value)
        raise issue_at("gold_value", "letter must be one uppercase character", "value")
    if kind == "letter_set":
        if (
            isinstance(value, str)
            and value
            and all(ch in LETTERS for ch in value)
            and all(a < b for a, b in zip(value, value[1:]))
        ):
            return LetterSet(value)
        raise issue_at("gold_value", "letter_set must be strictly ascending uppercase letters", "value")
    if kind == "sequence":
        if is_sequence_text(value):
            steps = [int(step) for step in value.split("->")]
            if sorted(steps) == list(range(1, len(steps) + 1)):
                return Sequence(value)
        raise issue_at("gold_value", "sequence must be a permutation of 1..n like '3->5->4->2->1'", "value")
    if kind == "interval":
        if (
            isinstance(value, (list, tuple))
            and len(value) == 2
            and all(not isinstance(v, bool) and isinstance(v, (int, float)) for v in value)
            and float(value[0]) < float(value[1])
        ):
            return Interval(float(value[0]), float(value[1]))
        raise issue_at("gold_value", "interval must be [start_s, end_s] with start_s < end_s", "value")
    if kind == "free_text":
        if isinstance(value, str):
            return FreeText(value)
        raise issue_at("gold_value", "free_text must be a string", "value")
    raise issue_at("gold_kind", "unknown gold kind '{kind}'", "kind", kind=str(kind))


class SemanticScript(BaseModel):
    model_config = ConfigDict(frozen=True)

    script_id: NonBlank
    task_type: Literal["single_choice", "multi_select", "sequence", "interval", "free_form"]
    task_tag: Optional[NonBlank] = None
    question: NonBlank
    options: Optional[Dict[str, str]] = Field(default=None, validate_default=True)
    gold: GoldAnswer
    videos: Tuple[VideoScript, ...]

    @field_validator("options")
    @classmethod
    def _options_match_task(cls, options: Optional[Dict[str, str]], info: ValidationInfo) -> Optional[Dict[str, str]]:
        if options is not None:
            if not options:
                raise PydanticCustomError("empty_options", "must be a non-empty object")
            for key in options:
                if not (len(key) == 1 and key in LETTERS):
                    raise issue_at("option_key", "keys must be single uppercase letters", key)
        task_type = info.data.get("task_type")
        if task_type in CHOICE_TASKS and options is None:
            raise PydanticCustomError("options_required", "required for task_type {task_type}", {"task_type": task_type})
        if task_type is not None and task_type not in CHOICE_TASKS and options is not None:
            raise PydanticCustomError("options_refused", "not allowed for task_type {task_type}", {"task_type": task_type})
        return options

    @field_validator("gold", mode="plain")
    @classmethod
    def _gold_matches_task(cls, value: Any, info: ValidationInfo) -> GoldAnswer:
        gold = value if isinstance(value, GOLD_TYPES) else _gold_from_value(value)
        task_type = info.data.get("task_type")
        if task_type is None:
            return gold
        if GOLD_KIND_FOR_TASK[task_type] != gold.kind:
            raise PydanticCustomError(
                "gold_mismatch", "gold/task_type mismatch: {kind} for {task_type}",
                {"kind": gold.kind, "task_type": task_type},
            )
        options = info.data.get("options")
        if task_type in CHOICE_TASKS and options:
            missing = [ch for ch in gold.value if ch not in options]
            if missing:
                raise issue_at("gold_not_option", "letters {missing} are not option keys", "value", missing=missing)
        return gold

    @field_validator("videos")
    @classmethod
    def _indexed_in_order(cls, videos: Tuple[VideoScript, ...]) -> Tuple[VideoScript, ...]:
        if len(videos) < 2:
            raise PydanticCustomError("too_few_videos", "cross-video scripts need at least 2 videos")
        for idx, video in enumerate(videos):
            if video.video_index != idx + 1:
                raise issue_at(
                    "video_order", "must be {expected} (1-based, in order)", idx, "video_index", expected=idx + 1,
                )
        return videos

    @property
    def video_count(self) -> int:
        return len(self.videos)

    def video(self, video_index: int) -> VideoScript:
        for video in self.videos:
            if video.video_index == video_index:
                return video
        raise UnknownVideoError(
            f"Script {self.script_id} has no video {video_index} (videos 1..{len(self.videos)})"
        )


# --- VALIDATION ---

def gold_from_document(doc: Any) -> GoldAnswer:
    try:
        return _gold_from_value(doc)
    except PydanticCustomError as exc:
        at = (exc.context or {}).get("at", [])
        raise ScriptValidationError([ValidationIssue(format_path(["gold", *at]), exc.message())]) from exc


def collect_script_errors(raw: Any) -> List[ValidationIssue]:
    """All violations in a raw document; empty when it validates."""
    try:
        SemanticScript.model_validate(raw)
    except ValidationError as exc:
        return issues_from_error(exc)
    return []


def validate_script(raw: Any) -> SemanticScript:
    try:
        return SemanticScript.model_validate(raw)
    except ValidationError as exc:
        sid = raw.get("script_id") if isinstance(raw, dict) else None
        raise ScriptValidationError(issues_from_error(exc), script_id=sid if isinstance(sid, str) else None) from exc


# --- SERIALIZATION ---

def script_to_document(script: SemanticScript) -> dict:
    doc: Dict[str, Any] = {
        "script_id": script.script_id,
        "task_type": script.task_type,
    }
    if script.task_tag is not None:
        doc["task_tag"] = script.task_tag
    doc["question"] = script.question
    if script.options is not None:
        doc["options"] = dict(script.options)
    doc["gold"] = gold_to_document(script.gold)
    doc["videos"] = [video.model_dump(mode="json") for video in script.videos]
    return doc


def dumps_script(script: SemanticScript, *, indent: Optional[int] = None) -> str:
    """Canonical JSON text; identical scripts give byte-identical output."""
    return json.dumps(script_to_document(script), ensure_ascii=False, indent=indent)


def load_script_file(path: Path) -> List[SemanticScript]:
    """A .json file holds one script; a .jsonl file holds one per line."""
    path = Path(path)
    with open(path, "r", encoding="utf-8") as f:
        if path.suffix == ".jsonl":
            docs = [json.loads(line) for line in f if line.strip()]
        else:
            docs = [json.load(f)]
    return [validate_script(doc) for doc in docs]


def iter_script_paths(paths: Iterable[Path]) -> List[Path]:
    found: List[Path] = []
    for path in paths:
        path = Path(path)
        if path.is_dir():
            found.extend(sorted(p for p in path.iterdir() if p.suffix in {".json", ".jsonl"}))
        else:
            found.append(path)
    return found


def load_corpus(paths: Union[Path, SequenceT[Path]]) -> List[SemanticScript]:
    """Loads scripts from files/directories and rejects duplicate script ids."""
    if isinstance(paths, (str, Path)):
        paths = [Path(paths)]
    scripts: List[SemanticScript] = []
    seen: Dict[str, Path] = {}
    for path in iter_script_paths(paths):
        for script in load_script_file(path):
            if script.script_id in seen:
                raise ScriptValidationError(
                    [ValidationIssue("script_id", f"duplicate id (also in {seen[script.script_id]})")],
                    script_id=script.script_id,
                )
            seen[script.script_id] = path
            scripts.append(script)
    logger.info("Loaded %d scripts", len(scripts))
    return scripts


# --- SLICING ---

def script_slice(
    script: SemanticScript,
    video_index: int,
    window: Tuple[float, float],
    channel: str = "events",
) -> List[Entry]:
    """
    Entries of one video whose [start_s, end_s] meets the window.

    Bounds are inclusive, so a single-instant window (t0 == t1) can hit an
    event and entries that only touch the window edge are returned. The
    window is clamped to [0, duration_s].
    """
    if channel not in CHANNELS:
        raise ValueError(f"Unknown channel {channel!r}")
    t0, t1 = float(window[0]), float(window[1])
    if t0 > t1:
        raise ValueError(f"Window start {t0} is after end {t1}")
    video = script.video(video_index)
    t0 = min(max(t0, 0.0), video.duration_s)
    t1 = min(max(t1, 0.0), video.duration_s)
    entries = video.events if channel == "events" else video.captions
    return [e for e in entries if e.start_s <= t1 and e.end_s >= t0]


def full_window(script: SemanticScript, video_index: int) -> Tuple[float, float]:
    return (0.0, script.video(video_index).duration_s)
