"""
Trainable tabular softmax policy over named action templates.

A template turns (script, episode state) into one agent output. The policy
samples a template index from softmax(logits[state_key]) and records every
decision, including retries, so the trainer can rebuild the trajectory
log-probability exactly.
"""

import logging
import re
from typing import Callable, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np

import config
from action_protocol import (
    Answer,
    GetCaption,
    Observe,
    ObservationTarget,
    canonicalize_answer,
    serialize_action,
)
from grpo_core import PolicyParams, PolicyStep, StateKey, log_softmax, make_state_key
from script_model import LETTERS, SemanticScript

logger = logging.getLogger("CVR.SoftmaxPolicy")

QUOTED = re.compile(r'"([^"]+)"')
OBSERVE_LINE = re.compile(r"^Video (\d+) \[[^\]]*\]: (.*)$")
CAPTION_LINE = re.compile(r"^\[([\d.]+)s - ([\d.]+)s\]: (.*)$")

MALFORMED_TEXT = "I think the answer is probably the first option, but let me look at the videos again."


class TemplateError(ValueError):
    pass


# --- TEMPLATES ---

def _observe_all(script: SemanticScript, state) -> Observe:
    frames = config.FRAME_BUDGET // script.video_count
    if frames < 1:
        raise TemplateError(f"{script.video_count} videos do not fit the frame budget")
    return Observe(
        tuple(
            ObservationTarget(v.video_index, 0.0, v.duration_s, frames)
            for v in script.videos
        ),
        focus_prompt="Overview of every video.",
        thought="Scan all videos end to end first.",
    )


def _observe_first(script: SemanticScript, state) -> Observe:
    video = script.videos[0]
    return Observe(
        (ObservationTarget(video.video_index, 0.0, video.duration_s, 32),),
        thought="Look at video 1 in detail.",
    )


def _caption_first(script: SemanticScript, state) -> GetCaption:
    return GetCaption(1, thought="Read the captions of video 1.")


def _caption_last(script: SemanticScript, state) -> GetCaption:
    return GetCaption(script.video_count, thought=f"Read the captions of video {script.video_count}.")


def _observations(state, kind) -> List[Tuple[object, str]]:
    if state is None:
        return []
    return [(item, obs.text) for item, obs in state.history if isinstance(item, kind)]


def _video_letter(script: SemanticScript, video_index: int) -> str:
    for letter, text in (script.options or {}).items():
        if text.strip() == f"Video {video_index}":
            return letter
    return LETTERS[video_index - 1]


def _first_option(script: SemanticScript):
    if script.task_type in ("single_choice", "multi_select"):
        return sorted(script.options or {"A": ""})[0]
    if script.task_type == "sequence":
        return "->".join(str(v.video_index) for v in script.videos)
    if script.task_type == "interval":
        return [0.0, 1.0]
    return "unknown"


def _answer_from_evidence(script: SemanticScript, state) -> Answer:
    """
    Answers from what the history shows about the quoted phrase in the
    question: which videos' observations mention it, or, for intervals, the
    caption of the last video that mentions it.
    """
    match = QUOTED.search(script.question)
    phrase = match.group(1).lower() if match else None
    value = None
    if phrase and script.task_type in ("single_choice", "multi_select"):
        videos = set()
        for _, text in _observations(state, Observe):
            for line in text.splitlines():
                m = OBSERVE_LINE.match(line)
                if m and phrase in m.group(2).lower():
                    videos.add(int(m.group(1)))
        if videos:
            letters = sorted(_video_letter(script, v) for v in videos)
            value = letters[0] if script.task_type == "single_choice" else "".join(letters)
    elif phrase and script.task_type == "interval":
        target = script.video_count
        for item, text in _observations(state, GetCaption):
            if item.video_index != target:
                continue
            for line in text.splitlines():
                m = CAPTION_LINE.match(line)
                if m and phrase in m.group(3).lower():
                    value = [float(m.group(1)), float(m.group(2))]
                    break
    if value is None:
        value = _first_option(script)
    return Answer(canonicalize_answer(value, script.task_type), thought="Answer from the gathered evidence.")


def _answer_first_option(script: SemanticScript, state) -> Answer:
    return Answer(canonicalize_answer(_first_option(script), script.task_type), thought="Guess.")


def _malformed(script: SemanticScript, state) -> str:
    return MALFORMED_TEXT


Template = Callable[[SemanticScript, object], Union[Observe, GetCaption, Answer, str]]

TEMPLATE_REGISTRY: Dict[str, Template] = {
    "observe_all": _observe_all,
    "observe_first": _observe_first,
    "caption_first": _caption_first,
    "caption_last": _caption_last,
    "answer_from_evidence": _answer_from_evidence,
    "answer_first_option": _answer_first_option,
    "malformed": _malformed,
}

DEFAULT_TEMPLATES: Tuple[str, ...] = tuple(TEMPLATE_REGISTRY)

FALLBACK_TEXT = serialize_action(GetCaption(1, thought="Fallback: read the captions of video 1."))


def instantiate_template(name: str, script: SemanticScript, state=None) -> Tuple[str, bool]:
    """(raw text, fell_back). Unknown or failing templates fall back to GetCaption(video 1)."""
    template = TEMPLATE_REGISTRY.get(name)
    try:
        if template is None:
            raise TemplateError(f"Unknown template {name!r}")
        out = template(script, state)
    except (TemplateError, ValueError, IndexError) as exc:
        logger.warning("⚠️ Template %s failed on %s (%s); using the caption fallback", name, script.script_id, exc)
        return FALLBACK_TEXT, True
    return (out if isinstance(out, str) else serialize_action(out)), False


def state_key_from_state(state, obs_buckets: int) -> StateKey:
    if state is None or not state.history:
        return make_state_key(0 if state is None else state.turn, "none", "", obs_buckets)
    item, observation = state.history[-1]
    kind = getattr(item, "kind", "none")
    if kind not in ("observe", "get_caption"):
        kind = "none"
    return make_state_key(state.turn, kind, observation.text, obs_buckets)


def softmax_policy_decide(
    params: PolicyParams,
    state_key: StateKey,
    rng: np.random.Generator,
    *,
    script: SemanticScript,
    state=None,
) -> Tuple[int, str, float, bool]:
    """Samples a template at state_key: (index, raw text, log π(index|key), fell_back)."""
    log_p = log_softmax(params.row(state_key))
    p = np.exp(log_p)
    k = int(rng.choice(params.k, p=p / p.sum()))
    text, fell_back = instantiate_template(params.templates[k], script, state)
    return k, text, float(log_p[k]), fell_back


class SoftmaxPolicy:
    """
    One instance per rollout, bound to frozen params and one script.
    `steps` holds every sampled decision of the rollout.
    """

    concurrency = "concurrent_ok"

    def __init__(self, params: PolicyParams, script: SemanticScript, obs_buckets: Optional[int] = None):
        self.params = params
        self.script = script
        self.obs_buckets = obs_buckets if obs_buckets is not None else params.obs_buckets
        self.steps: List[PolicyStep] = []
        self.fallbacks = 0

    def decide(self, rendered_state: str, rng: np.random.Generator, *, state=None) -> str:
        key = state_key_from_state(state, self.obs_buckets)
        k, text, log_prob, fell_back = softmax_policy_decide(
            self.params, key, rng, script=self.script, state=state,
        )
        self.steps.append(PolicyStep(key, k, log_prob))
        self.fallbacks += int(fell_back)
        return text


def initial_params(templates: Sequence[str] = DEFAULT_TEMPLATES, obs_buckets: int = config.OBS_BUCKETS) -> PolicyParams:
    unknown = [t for t in templates if t not in TEMPLATE_REGISTRY]
    if unknown:
        raise ValueError(f"Unknown templates: {unknown}")
    return PolicyParams(templates, obs_buckets=obs_buckets)
