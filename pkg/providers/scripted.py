import json
import threading
from pathlib import Path
from typing import List, Sequence


class ScriptedPolicy:
    """Replays fixed outputs in order, then repeats the last one."""

    concurrency = "serialize_me"

    def __init__(self, turn_script: Sequence[str]):
        if not turn_script:
            raise ValueError("A scripted policy needs at least one output")
        self.turn_script: List[str] = list(turn_script)
        self.calls = 0
        self._lock = threading.Lock()

    def decide(self, rendered_state: str, rng=None, *, state=None) -> str:
        with self._lock:
            idx = min(self.calls, len(self.turn_script) - 1)
            self.calls += 1
        return self.turn_script[idx]


def scripted_policy(turn_script: Sequence[str]) -> ScriptedPolicy:
    return ScriptedPolicy(turn_script)


def load_turn_script(path: Path) -> List[str]:
    """
    A JSON list of outputs. Non-string entries are dumped back to JSON, so a
    file can hold action objects directly.
    """
    with open(path, "r", encoding="utf-8") as f:
        payload = json.load(f)
    if not isinstance(payload, list) or not payload:
        raise ValueError(f"{path}: expected a non-empty JSON list of policy outputs")
    return [item if isinstance(item, str) else json.dumps(item, ensure_ascii=False) for item in payload]
