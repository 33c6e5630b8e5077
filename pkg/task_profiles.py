import json
import logging
from functools import lru_cache
from string import Template
from typing import Dict, Optional

import config

logger = logging.getLogger("CVR.Profiles")

# --- 1. THE TOOLS ---
# Shared tool descriptions; each task picks the ones it may use.

TOOLS = {
    "observe": (
        "observe: look at frames of one or more videos.\n"
        "   params: observation_targets (list of {video_index, start_time, end_time, num_frames}), "
        "focus_prompt (what to look for).\n"
        "   Limitation: the num_frames sum in a single call must not exceed $frame_budget."
    ),
    "get_caption": (
        "get_caption: read the timed subtitles/narration of one video.\n"
        "   params: video_index, optional start_time and end_time (defaults to the whole video)."
    ),
}

# --- 2. THE ANSWER SHAPES ---

ANSWER_FORMATS = {
    "single_choice": {
        "format": 'one option letter as a string, e.g. "D".',
        "example": '"D"',
    },
    "multi_select": {
        "format": 'option letters concatenated without spaces in alphabetical order, e.g. "A", "AC" or "BCD". Never select all options.',
        "example": '"AC"',
    },
    "sequence": {
        "format": 'video indices joined by "->" in the order the steps happen, e.g. "3->5->4->2->1".',
        "example": '"2->4->3->1"',
    },
    "interval": {
        "format": "a two-number list [start_s, end_s] in seconds of the target video, start_s < end_s.",
        "example": "[53.2, 57.8]",
    },
    "free_form": {
        "format": "a short free-text answer.",
        "example": '"The second cook adds the sauce before the noodles."',
    },
}

# --- 3. THE TASKS ---
# Tag -> dimension, answer shape and objective. Dimensions: C comparative,
# T temporal, M multi-view, F free-form.

TASKS = {
    "BU": {
        "name": "Behavior Understanding",
        "dimension": "C",
        "task_type": "multi_select",
        "tools": ["observe"],
        "objective": "Find every video whose subject shows the behavior described in the question. "
                     "One to three videos qualify; judge intent from visual evidence.",
    },
    "NC": {
        "name": "Narrative Comprehension",
        "dimension": "C",
        "task_type": "single_choice",
        "tools": ["observe", "get_caption"],
        "objective": "Follow the plot across the videos and pick the option the story supports.",
    },
    "CC": {
        "name": "Culinary Comparison",
        "dimension": "C",
        "task_type": "single_choice",
        "tools": ["observe", "get_caption"],
        "objective": "Compare how the videos carry out the same recipe and pick the option that "
                     "describes the difference correctly.",
    },
    "PEA": {
        "name": "Performance Evaluation",
        "dimension": "C",
        "task_type": "single_choice",
        "tools": ["observe"],
        "objective": "Compare the skill shown by the performers and pick the option the footage supports.",
    },
    "PI": {
        "name": "Plot Inference",
        "dimension": "T",
        "task_type": "single_choice",
        "tools": ["observe", "get_caption"],
        "objective": "Order the story across videos in time and infer what happens, picking one option.",
    },
    "FSA": {
        "name": "Functional Step Alignment",
        "dimension": "T",
        "task_type": "interval",
        "tools": ["observe", "get_caption"],
        "objective": "Find the step in video 2 that serves the same function as the step named in "
                     "the question for video 1, and return its time interval in video 2.",
    },
    "PSS": {
        "name": "Procedural Step Sequencing",
        "dimension": "T",
        "task_type": "sequence",
        "tools": ["observe", "get_caption"],
        "objective": "Each video shows one step of a procedure. Return the video order that "
                     "performs the procedure correctly.",
    },
    "MSR": {
        "name": "Multi-view Spatial Reasoning",
        "dimension": "M",
        "task_type": "single_choice",
        "tools": ["observe"],
        "objective": "Combine the camera views to reason about where things are and pick one option.",
    },
    "MOC": {
        "name": "Multi-view Object Counting",
        "dimension": "M",
        "task_type": "single_choice",
        "tools": ["observe"],
        "objective": "Count the objects across views without counting the same object twice.",
    },
    "CCQA": {
        "name": "Comparative Culinary QA",
        "dimension": "F",
        "task_type": "free_form",
        "tools": ["observe", "get_caption"],
        "objective": "Answer the open question by comparing the videos.",
    },
}

DEFAULT_DIMENSION_MAP: Dict[str, str] = {tag: profile["dimension"] for tag, profile in TASKS.items()}

# Generic profile for untagged scripts, keyed by task_type.
GENERIC_OBJECTIVE = "Answer the question correctly using evidence gathered from all videos."


@lru_cache(maxsize=None)
def load_prompt_asset(name: str) -> str:
    """Reads a text asset from the prompts directory, unmodified."""
    path = config.PROMPTS_DIR / name
    try:
        return path.read_text(encoding="utf-8")
    except OSError as exc:
        raise config.ConfigError(f"Missing prompt asset: {path}") from exc


def simulator_system_prompt() -> str:
    return load_prompt_asset("simulator_system.txt")


def task_profile(task_tag: Optional[str]) -> Optional[dict]:
    if not task_tag:
        return None
    return TASKS.get(task_tag.upper())


def get_system_instruction(
    task_type: str,
    task_tag: Optional[str] = None,
    *,
    video_count: int = 4,
    episode_config: Optional[config.EpisodeConfig] = None,
    frame_budget: int = config.FRAME_BUDGET,
) -> str:
    """
    Composes the Master Agent system prompt from the task profile, its tools
    and the answer shape of the task type.
    """
    episode_config = episode_config or config.EpisodeConfig()
    profile = task_profile(task_tag)
    if profile is not None and profile["task_type"] != task_type:
        logger.warning(
            "⚠️ Task tag %s expects %s, script says %s; using the script's type",
            task_tag, profile["task_type"], task_type,
        )
    answer = ANSWER_FORMATS[task_type]
    tool_names = profile["tools"] if profile else list(TOOLS)
    tools = "\n".join(
        f"{i}. " + Template(TOOLS[name]).safe_substitute(frame_budget=frame_budget)
        for i, name in enumerate(tool_names, start=1)
    )
    return Template(load_prompt_asset("master_agent.txt")).safe_substitute(
        task_name=profile["name"] if profile else task_type.replace("_", " ").title(),
        task_tag=(task_tag or "GENERIC").upper(),
        video_count=video_count,
        objective=profile["objective"] if profile else GENERIC_OBJECTIVE,
        tools=tools,
        answer_example=answer["example"],
        answer_format=answer["format"],
        min_tool_calls=episode_config.min_tool_calls,
        t_max=episode_config.t_max,
    )


def dimension_map_from_file(path) -> Dict[str, str]:
    """Reads a {task_tag: dimension} JSON object."""
    with open(path, "r", encoding="utf-8") as f:
        payload = json.load(f)
    if not isinstance(payload, dict) or not all(
        isinstance(k, str) and isinstance(v, str) for k, v in payload.items()
    ):
        raise config.ConfigError(f"Dimension map {path} must map task tags to dimension names")
    return {k.upper(): v for k, v in payload.items()}
