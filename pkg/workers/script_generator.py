"""
Template script generation.

Two families are planted with their own gold answer:

- alignment_interval: two cooking videos share one step with the same
  function; gold is that step's interval in video 2.
- choice_behavior: several videos of an animal; the gold subset are the
  videos in which the target behavior is visible.

Output is a deterministic function of (family, seed, knobs).
"""

import json
import logging
from string import Template
from typing import List, Optional, Tuple

import numpy as np

import config
import task_profiles
from script_model import (
    Interval,
    LetterSet,
    LETTERS,
    SemanticScript,
    TimedCaption,
    TimedEvent,
    VideoScript,
)

logger = logging.getLogger("CVR.ScriptGenerator")

FAMILIES = ("alignment_interval", "choice_behavior")

# Slots leave room around each event so neighbors rarely touch.
EVENT_FILL = 0.8
MIN_EVENT_S = 0.01  # generated times are rounded to 0.01s

# --- VOCABULARIES ---
# No phrase is a substring of another phrase or of any template text around it.

COOKING_STEPS = [
    "extract the water",
    "whisk the eggs",
    "peel the shrimp",
    "slice the onions",
    "season the broth",
    "knead the dough",
    "grate the cheese",
    "rinse the rice",
    "toast the spices",
    "strain the pasta",
    "chop the herbs",
    "melt the butter",
]

COOKS = ["the chef", "the home cook", "the instructor", "the grandmother"]

BEHAVIORS = [
    "wags its tail",
    "backs away slowly",
    "bares its teeth",
    "sniffs the ground",
    "lies down on its side",
    "jumps onto the sofa",
    "circles the room",
    "stares at the door",
    "paws at the window",
    "rolls onto its back",
    "hides under the table",
    "chases a ball",
    "drinks from a bowl",
    "scratches its ear",
    "stretches its legs",
    "yawns widely",
]

ANIMALS = ["dog", "cat", "puppy", "kitten"]

NEUTRAL_CAPTIONS = [
    "Ambient room noise.",
    "A television plays quietly in the background.",
    "Footsteps on a wooden floor.",
    "Birdsong from outside.",
    "",
]

THEMES = {
    "alignment_interval": ["seafood pasta", "vegetable soup", "fried rice", "flatbread", "omelette"],
    "choice_behavior": ["dog shelter visit", "cat adoption day", "pet training class", "family living room"],
}


class GeneratorConfigError(ValueError):
    pass


def _check_knobs(family: str, knobs: config.GeneratorKnobs) -> int:
    """Validates knobs for a family and returns the video count to use."""
    if family not in FAMILIES:
        raise GeneratorConfigError(f"Unknown family {family!r}; expected one of {list(FAMILIES)}")
    if knobs.min_duration_s <= 0 or knobs.max_duration_s < knobs.min_duration_s:
        raise GeneratorConfigError(
            f"Bad duration range [{knobs.min_duration_s}, {knobs.max_duration_s}]"
        )
    if knobs.events_per_minute <= 0:
        raise GeneratorConfigError("events_per_minute must be positive")
    if knobs.min_event_s < MIN_EVENT_S:
        raise GeneratorConfigError(f"min_event_s must be at least {MIN_EVENT_S}s, got {knobs.min_event_s}")
    slot = 60.0 / knobs.events_per_minute
    if slot * EVENT_FILL < knobs.min_event_s:
        raise GeneratorConfigError(
            f"Event density {knobs.events_per_minute}/min leaves {slot:.2f}s slots, "
            f"too small for {knobs.min_event_s}s events"
        )
    if knobs.min_duration_s * knobs.events_per_minute / 60.0 < 2:
        raise GeneratorConfigError(
            f"Duration {knobs.min_duration_s}s is too short for two events at "
            f"{knobs.events_per_minute}/min"
        )
    if family == "alignment_interval":
        if knobs.video_count not in (None, 2):
            raise GeneratorConfigError("alignment_interval scripts have exactly 2 videos")
        return 2
    count = knobs.video_count or 4
    if count > len(LETTERS):
        raise GeneratorConfigError(f"At most {len(LETTERS)} videos fit in the option letters")
    return count


def _r2(value: float) -> float:
    return round(float(value), 2)


def _layout(rng: np.random.Generator, knobs: config.GeneratorKnobs) -> Tuple[float, List[Tuple[float, float]]]:
    """Duration plus one (start, end) per slot, sorted and inside [0, duration]."""
    duration = _r2(rng.uniform(knobs.min_duration_s, knobs.max_duration_s))
    n_events = max(2, int(duration * knobs.events_per_minute / 60.0))
    slot = duration / n_events
    spans = []
    for i in range(n_events):
        length = rng.uniform(knobs.min_event_s, slot * EVENT_FILL)
        start = i * slot + rng.uniform(0.0, slot - length)
        end = min(_r2(start + length), duration)
        spans.append((_r2(start), end))
    return duration, spans


def _alignment_interval(seed: int, rng: np.random.Generator, knobs: config.GeneratorKnobs) -> SemanticScript:
    target = COOKING_STEPS[int(rng.integers(len(COOKING_STEPS)))]
    others = [s for s in COOKING_STEPS if s != target]
    cooks = rng.permutation(len(COOKS))[:2]

    videos = []
    planted: List[Tuple[float, float]] = []
    for video_index, cook_idx in zip((1, 2), cooks):
        cook = COOKS[int(cook_idx)]
        duration, spans = _layout(rng, knobs)
        hit = int(rng.integers(len(spans)))
        events, captions = [], []
        for slot_idx, (start, end) in enumerate(spans):
            step = target if slot_idx == hit else others[int(rng.integers(len(others)))]
            events.append(TimedEvent(start_s=start, end_s=end, visual=f"{cook.capitalize()} works at the counter to {step}."))
            captions.append(TimedCaption(start_s=start, end_s=end, text=f"Now we {step}."))
            if slot_idx == hit:
                planted.append((start, end))
        videos.append(VideoScript(video_index=video_index, duration_s=duration, events=tuple(events), captions=tuple(captions)))

    (s1, e1), (s2, e2) = planted
    theme = THEMES["alignment_interval"][int(rng.integers(len(THEMES["alignment_interval"])))]
    question = (
        f'Both videos prepare {theme}. In video 1 the cook performs the step "{target}" '
        f"between {s1}s and {e1}s. During which interval of video 2 is the step with "
        f"the same function performed?"
    )
    return SemanticScript(
        script_id=f"alignment_interval-{seed:06d}",
        task_type="interval",
        task_tag="FSA",
        question=question,
        gold=Interval(s2, e2),
        videos=tuple(videos),
    )


def _choice_behavior(seed: int, rng: np.random.Generator, knobs: config.GeneratorKnobs, video_count: int) -> SemanticScript:
    target = BEHAVIORS[int(rng.integers(len(BEHAVIORS)))]
    others = [b for b in BEHAVIORS if b != target]
    max_gold = min(3, video_count - 1)
    gold_size = int(rng.integers(1, max_gold + 1))
    gold_videos = sorted(int(v) + 1 for v in rng.choice(video_count, size=gold_size, replace=False))

    videos = []
    for video_index in range(1, video_count + 1):
        animal = ANIMALS[int(rng.integers(len(ANIMALS)))]
        duration, spans = _layout(rng, knobs)
        hit = int(rng.integers(len(spans))) if video_index in gold_videos else -1
        events, captions = [], []
        for slot_idx, (start, end) in enumerate(spans):
            behavior = target if slot_idx == hit else others[int(rng.integers(len(others)))]
            events.append(TimedEvent(start_s=start, end_s=end, visual=f"The {animal} {behavior}."))
            captions.append(
                TimedCaption(start_s=start, end_s=end, text=NEUTRAL_CAPTIONS[int(rng.integers(len(NEUTRAL_CAPTIONS)))])
            )
        videos.append(VideoScript(video_index=video_index, duration_s=duration, events=tuple(events), captions=tuple(captions)))

    options = {LETTERS[i]: f"Video {i + 1}" for i in range(video_count)}
    question = (
        f'In which videos does the animal show the behavior "{target}"? '
        f"Select every video that applies, but not all of them."
    )
    return SemanticScript(
        script_id=f"choice_behavior-{seed:06d}",
        task_type="multi_select",
        task_tag="BU",
        question=question,
        gold=LetterSet("".join(LETTERS[v - 1] for v in gold_videos)),
        videos=tuple(videos),
        options=options,
    )


def generate_template_script(
    family: str,
    seed: int,
    knobs: Optional[config.GeneratorKnobs] = None,
) -> SemanticScript:
    knobs = knobs or config.GeneratorKnobs()
    video_count = _check_knobs(family, knobs)
    rng = np.random.default_rng([int(seed), FAMILIES.index(family)])
    if family == "alignment_interval":
        script = _alignment_interval(seed, rng, knobs)
    else:
        script = _choice_behavior(seed, rng, knobs, video_count)
    logger.debug("Generated %s (%d videos)", script.script_id, script.video_count)
    return script


def generate_corpus(
    family: str,
    count: int,
    seed: int = 0,
    knobs: Optional[config.GeneratorKnobs] = None,
) -> List[SemanticScript]:
    """`count` scripts with consecutive seeds starting at `seed`."""
    if count <= 0:
        raise GeneratorConfigError("count must be positive")
    return [generate_template_script(family, seed + i, knobs) for i in range(count)]


# --- LLM SYNTHESIS PROMPTS (assembly only) ---

FAMILY_BRIEFS = {
    "alignment_interval": (
        "Two videos of different cooks preparing the same dish. Exactly one step in video 2 "
        "serves the same function as a named step in video 1, though it may look different. "
        "Narrate each step in the captions. The question names the video-1 step and asks for "
        'the video-2 interval; gold is {"kind": "interval", "value": [start_s, end_s]}.'
    ),
    "choice_behavior": (
        "Several videos of animals reacting to a situation. One to three videos, never all, show "
        "the target behavior; the others show plausible distractor behaviors. Options are "
        '"Video 1", "Video 2", ...; gold is {"kind": "letter_set", "value": "AC"} with letters in '
        "alphabetical order."
    ),
}

SCHEMA_EXAMPLE = {
    "script_id": "str",
    "task_type": "interval | multi_select",
    "task_tag": "FSA | BU",
    "question": "str",
    "options": {"A": "Video 1"},
    "gold": {"kind": "str", "value": "..."},
    "videos": [
        {
            "video_index": 1,
            "duration_s": 120.0,
            "events": [{"start_s": 0.0, "end_s": 4.5, "visual": "str"}],
            "captions": [{"start_s": 0.0, "end_s": 4.5, "text": "str"}],
        }
    ],
}


def compose_script_synthesis_prompt(
    family: str,
    seed: int,
    knobs: Optional[config.GeneratorKnobs] = None,
) -> str:
    """Prompt asking an LLM to write one script of a family. Never sent anywhere here."""
    knobs = knobs or config.GeneratorKnobs()
    video_count = _check_knobs(family, knobs)
    themes = THEMES[family]
    theme = themes[int(np.random.default_rng([int(seed), FAMILIES.index(family)]).integers(len(themes)))]
    task_tag = "FSA" if family == "alignment_interval" else "BU"
    return Template(task_profiles.load_prompt_asset("script_synthesis.txt")).safe_substitute(
        family=family,
        task_tag=task_tag,
        task_type=task_profiles.TASKS[task_tag]["task_type"],
        theme=theme,
        family_brief=FAMILY_BRIEFS[family],
        video_count=video_count,
        min_duration_s=knobs.min_duration_s,
        max_duration_s=knobs.max_duration_s,
        events_per_minute=knobs.events_per_minute,
        min_event_s=knobs.min_event_s,
        schema=json.dumps(SCHEMA_EXAMPLE, indent=2),
    )
