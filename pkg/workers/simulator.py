"""
Text environments for the Master Agent.

The default simulator answers tool actions by slicing the semantic script
and rendering the matching entries; it never invents content. The LLM
simulator sends the same slice to a chat model using the simulator system
prompt, and ToolEnvironment binds user-supplied real tools to the same
episode loop.
"""

import json
import logging
import time
from dataclasses import dataclass
from typing import Callable, List, Optional, Protocol, Tuple

import config
import task_profiles
from action_protocol import Answer, GetCaption, Observe
from script_model import SemanticScript, TimedCaption, script_slice

logger = logging.getLogger("CVR.Simulator")

SOURCE_SIM = "sim_deterministic"
SOURCE_SIM_LLM = "sim_llm"
SOURCE_REAL = "real_tool"

NO_EVIDENCE = config.NO_EVIDENCE


@dataclass(frozen=True)
class Observation:
    text: str
    source: str = SOURCE_SIM
    elapsed_s: float = 0.0

    def __post_init__(self):
        if not self.text:
            raise ValueError("Observation text must not be empty")


class EnvironmentFailure(RuntimeError):
    """A tool or simulator backend could not answer; aborts the episode."""


class Environment(Protocol):
    source: str

    @property
    def video_count(self) -> Optional[int]: ...

    def execute(self, action) -> Observation: ...


# --- RENDERING ---

def format_seconds(value: float) -> str:
    text = f"{float(value):.3f}".rstrip("0").rstrip(".")
    return text or "0"


def _clamp_window(script: SemanticScript, video_index: int, start, end) -> Tuple[float, float]:
    duration = script.video(video_index).duration_s
    t0 = 0.0 if start is None else min(max(float(start), 0.0), duration)
    t1 = duration if end is None else min(max(float(end), 0.0), duration)
    return t0, t1


def caption_line(caption: TimedCaption) -> str:
    return f"[{format_seconds(caption.start_s)}s - {format_seconds(caption.end_s)}s]: {caption.text}"


def _render_observe(script: SemanticScript, action: Observe) -> str:
    lines: List[str] = []
    for target in action.targets:
        window = _clamp_window(script, target.video_index, target.start_time, target.end_time)
        events = script_slice(script, target.video_index, window, "events")
        if not events:
            continue
        visuals = " | ".join(e.visual for e in events)
        lines.append(
            f"Video {target.video_index} [{format_seconds(window[0])}s-{format_seconds(window[1])}s]: {visuals}"
        )
    if not lines:
        return NO_EVIDENCE
    if action.focus_prompt.strip():
        lines.insert(0, f"FOCUS: {action.focus_prompt.strip()}")
    return "\n".join(lines)


def _render_captions(script: SemanticScript, action: GetCaption) -> str:
    window = _clamp_window(script, action.video_index, action.start_time, action.end_time)
    captions = script_slice(script, action.video_index, window, "captions")
    # blank captions are silent intervals
    lines = [caption_line(c) for c in captions if c.text.strip()]
    return "\n".join(lines) if lines else NO_EVIDENCE


def simulate(script: SemanticScript, action) -> Observation:
    """Deterministic observation for a tool action, rendered from script slices."""
    started = time.perf_counter()
    if isinstance(action, Observe):
        text = _render_observe(script, action)
    elif isinstance(action, GetCaption):
        text = _render_captions(script, action)
    elif isinstance(action, Answer):
        raise ValueError("simulate() received an Answer action; answers end the episode instead")
    else:
        raise TypeError(f"Not a tool action: {action!r}")
    return Observation(text, SOURCE_SIM, time.perf_counter() - started)


# --- LLM SIMULATOR PROMPTS ---

def describe_query(action) -> str:
    if isinstance(action, Observe):
        parts = [
            f"Observe video {t.video_index} from {format_seconds(t.start_time)}s to "
            f"{format_seconds(t.end_time)}s ({t.num_frames} frames)."
            for t in action.targets
        ]
        if action.focus_prompt.strip():
            parts.append(f"Focus: {action.focus_prompt.strip()}")
        return "\n".join(parts)
    if isinstance(action, GetCaption):
        start = "the start" if action.start_time is None else f"{format_seconds(action.start_time)}s"
        end = "the end" if action.end_time is None else f"{format_seconds(action.end_time)}s"
        return f"Report the speech and sounds of video {action.video_index} from {start} to {end}."
    raise ValueError(f"Only tool actions can be simulated, got {action!r}")


def sim_prompt_messages(slice_text: str, action) -> Tuple[str, str]:
    """(system, user) pair; the slice is embedded as a JSON string so any text survives."""
    system = task_profiles.simulator_system_prompt()
    user = [
        "Video script (Ground Truth):",
        json.dumps(slice_text, ensure_ascii=False),
    ]
    if not slice_text.strip():
        user.append(f'The script has no action in this time frame. Reply "{NO_EVIDENCE}"')
    user += ["", "Query:", describe_query(action)]
    return system, "\n".join(user)


def compose_sim_prompt(slice_text: str, action) -> str:
    system, user = sim_prompt_messages(slice_text, action)
    return f"{system}\n{user}"


def render_slice_text(script: SemanticScript, action: Observe) -> str:
    """Ground-truth event lines for every target of an Observe call."""
    lines = []
    for target in action.targets:
        window = _clamp_window(script, target.video_index, target.start_time, target.end_time)
        for event in script_slice(script, target.video_index, window, "events"):
            lines.append(
                f"Video {target.video_index} [{format_seconds(event.start_s)}s - "
                f"{format_seconds(event.end_s)}s]: {event.visual}"
            )
    return "\n".join(lines)


# --- ENVIRONMENTS ---

class SimulatorEnvironment:
    """The deterministic text simulator bound to one script."""

    source = SOURCE_SIM

    def __init__(self, script: SemanticScript):
        self.script = script

    @property
    def video_count(self) -> int:
        return self.script.video_count

    def execute(self, action) -> Observation:
        try:
            return simulate(self.script, action)
        except (ValueError, TypeError) as exc:
            raise EnvironmentFailure(f"Simulator rejected {type(action).__name__}: {exc}") from exc


class LLMSimulatorEnvironment:
    """
    Visual queries go through a chat model prompted with the script slice.
    Captions are returned straight from the script.
    """

    source = SOURCE_SIM_LLM

    def __init__(self, script: SemanticScript, client):
        self.script = script
        self.client = client

    @property
    def video_count(self) -> int:
        return self.script.video_count

    def execute(self, action) -> Observation:
        if not isinstance(action, Observe):
            return SimulatorEnvironment(self.script).execute(action)
        started = time.perf_counter()
        system, user = sim_prompt_messages(render_slice_text(self.script, action), action)
        try:
            text = self.client.complete(system, user)
        except Exception as exc:
            raise EnvironmentFailure(f"LLM simulator call failed: {exc}") from exc
        text = (text or "").strip() or NO_EVIDENCE
        return Observation(text, SOURCE_SIM_LLM, time.perf_counter() - started)


class ToolEnvironment:
    """Real tools: observe_fn(action) and caption_fn(action) return observation text."""

    source = SOURCE_REAL

    def __init__(
        self,
        observe_fn: Callable[[Observe], str],
        caption_fn: Callable[[GetCaption], str],
        video_count: Optional[int] = None,
    ):
        self.observe_fn = observe_fn
        self.caption_fn = caption_fn
        self._video_count = video_count

    @property
    def video_count(self) -> Optional[int]:
        return self._video_count

    def execute(self, action) -> Observation:
        if isinstance(action, Observe):
            fn = self.observe_fn
        elif isinstance(action, GetCaption):
            fn = self.caption_fn
        else:
            raise EnvironmentFailure(f"Tools cannot execute {action!r}")
        started = time.perf_counter()
        try:
            text = fn(action)
        except Exception as exc:
            logger.error("❌ Tool %s failed: %s", type(action).__name__, exc)
            raise EnvironmentFailure(f"Tool {type(action).__name__} failed: {exc}") from exc
        text = (text or "").strip() or NO_EVIDENCE
        return Observation(text, SOURCE_REAL, time.perf_counter() - started)
