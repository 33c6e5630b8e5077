"""Shared fixtures: small hand-written scripts and a fake HTTP session."""

import copy
import json

import pytest
import requests

from script_model import validate_script

SHRIMP_LINE = "Now wash and peel eight large cooked shrimp and cut them in half."


def _shrimp_doc():
    return {
        "script_id": "fsa-shrimp-001",
        "task_type": "interval",
        "task_tag": "FSA",
        "question": 'Video 1 shows the cook "extract the water" from the pasta. When does video 2 do the same?',
        "gold": {"kind": "interval", "value": [86.0, 104.0]},
        "videos": [
            {
                "video_index": 1,
                "duration_s": 120.0,
                "events": [
                    {"start_s": 10.0, "end_s": 25.5, "visual": "A cook drains the pasta to extract the water."},
                    {"start_s": 40.0, "end_s": 52.0, "visual": "The cook plates the pasta."},
                ],
                "captions": [
                    {"start_s": 10.0, "end_s": 25.5, "text": "Drain it well."},
                    {"start_s": 30.0, "end_s": 35.0, "text": ""},
                ],
            },
            {
                "video_index": 2,
                "duration_s": 150.0,
                "events": [
                    {"start_s": 20.0, "end_s": 40.0, "visual": "Another cook boils water."},
                    {"start_s": 85.88, "end_s": 105.24, "visual": "The cook peels shrimp over a colander."},
                ],
                "captions": [
                    {"start_s": 20.0, "end_s": 40.0, "text": "Bring the pot to a boil."},
                    {"start_s": 85.88, "end_s": 105.24, "text": SHRIMP_LINE},
                ],
            },
        ],
    }


def _choice_doc():
    return {
        "script_id": "nc-choice-001",
        "task_type": "single_choice",
        "task_tag": "NC",
        "question": "Which video shows the ending of the story?",
        "options": {"A": "Video 1", "B": "Video 2", "C": "Video 3", "D": "Video 4"},
        "gold": {"kind": "letter", "value": "D"},
        "videos": [
            {
                "video_index": i,
                "duration_s": 60.0,
                "events": [{"start_s": 5.0, "end_s": 15.0, "visual": f"Scene {i}: the hero walks."}],
                "captions": [{"start_s": 5.0, "end_s": 15.0, "text": f"Line {i}."}],
            }
            for i in range(1, 5)
        ],
    }


@pytest.fixture
def shrimp_doc():
    return copy.deepcopy(_shrimp_doc())


@pytest.fixture
def shrimp_script():
    return validate_script(_shrimp_doc())


@pytest.fixture
def choice_doc():
    return copy.deepcopy(_choice_doc())


@pytest.fixture
def choice_script():
    return validate_script(_choice_doc())


# --- HTTP ---

class FakeResponse:
    def __init__(self, status_code=200, body=None, text=None):
        self.status_code = status_code
        self._body = body
        self.text = text if text is not None else json.dumps(body)

    def json(self):
        if self._body is None:
            raise ValueError("no JSON body")
        return self._body


def chat_body(content):
    return {"choices": [{"message": {"role": "assistant", "content": content}}]}


class FakeSession:
    """Replays queued responses (or raises queued exceptions) and records every request."""

    def __init__(self, replies):
        self.replies = list(replies)
        self.requests = []

    def post(self, url, json=None, headers=None, timeout=None):
        self.requests.append({"url": url, "json": json, "headers": headers, "timeout": timeout})
        reply = self.replies.pop(0) if len(self.replies) > 1 else self.replies[0]
        if isinstance(reply, Exception):
            raise reply
        return reply


@pytest.fixture
def fake_session():
    def _make(*replies):
        return FakeSession(replies)
    return _make


@pytest.fixture
def ok_reply():
    def _make(content):
        return FakeResponse(200, chat_body(content))
    return _make


@pytest.fixture
def timeout_error():
    return requests.Timeout("read timed out")
