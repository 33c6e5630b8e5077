"""
OpenAI-compatible chat-completion client for the remote Master Agent.

One POST per turn to `{endpoint}/chat/completions`; no streaming. Timeouts,
429 and 5xx responses are retried with exponential backoff. Other 4xx
statuses and malformed bodies fail at once. Each failure kind has its own
exception so the episode loop can mark the episode errored.
"""

import logging
import threading
import time
from typing import List, Optional

import backoff
import requests

import config

logger = logging.getLogger("CVR.RemotePolicy")

BACKOFF_CAP_S = 45.0


class RemotePolicyError(RuntimeError):
    pass


class RemoteTimeoutError(RemotePolicyError):
    pass


class RemoteStatusError(RemotePolicyError):
    def __init__(self, message: str, status_code: Optional[int] = None):
        super().__init__(message)
        self.status_code = status_code

    @property
    def retryable(self) -> bool:
        return self.status_code is None or self.status_code == 429 or self.status_code >= 500


class RemoteResponseError(RemotePolicyError):
    pass


def _giveup(exc: Exception) -> bool:
    if isinstance(exc, RemoteStatusError):
        return not exc.retryable
    return not isinstance(exc, RemoteTimeoutError)


def _extract_content(payload) -> str:
    try:
        content = payload["choices"][0]["message"]["content"]
    except (KeyError, IndexError, TypeError) as exc:
        raise RemoteResponseError(f"Unexpected chat-completion body: {exc!r}") from exc
    if not isinstance(content, str):
        raise RemoteResponseError("Chat-completion content is not text")
    return content


class RemoteChatClient:
    """
    Thread-safe client; at most `max_in_flight` requests run at once.
    Per-request wall time (including retries) is kept in `timings`.
    """

    def __init__(
        self,
        remote_config: Optional[config.RemotePolicyConfig] = None,
        *,
        session: Optional[requests.Session] = None,
        api_key: Optional[str] = None,
    ):
        self.config = remote_config or config.RemotePolicyConfig()
        self.session = session or requests.Session()
        self.api_key = config.api_key() if api_key is None else api_key
        self.timings: List[float] = []
        self.request_count = 0
        self._lock = threading.Lock()
        self._slots = threading.BoundedSemaphore(self.config.max_in_flight)
        self._post = backoff.on_exception(
            backoff.expo,
            (RemoteTimeoutError, RemoteStatusError),
            max_tries=self.config.retries + 1,
            giveup=_giveup,
            factor=self.config.backoff_base_s,
            max_value=BACKOFF_CAP_S,
            on_backoff=self._log_retry,
            logger=None,
        )(self._post_once)

    @property
    def url(self) -> str:
        return f"{self.config.endpoint.rstrip('/')}/chat/completions"

    def _log_retry(self, details) -> None:
        logger.warning(
            "⚠️ Remote policy retry %s/%s after %s",
            details["tries"], self.config.retries, type(details.get("exception")).__name__,
        )

    def _headers(self) -> dict:
        headers = {"Content-Type": "application/json"}
        if self.api_key:
            headers["Authorization"] = f"Bearer {self.api_key}"
        return headers

    def _post_once(self, payload: dict) -> str:
        with self._lock:
            self.request_count += 1
        try:
            resp = self.session.post(
                self.url, json=payload, headers=self._headers(), timeout=self.config.timeout_s,
            )
        except requests.Timeout as exc:
            raise RemoteTimeoutError(f"Timed out after {self.config.timeout_s}s: {exc}") from exc
        except requests.ConnectionError as exc:
            raise RemoteStatusError(f"Connection failed: {exc}") from exc
        if resp.status_code != 200:
            raise RemoteStatusError(
                f"HTTP {resp.status_code} from {self.url}: {str(getattr(resp, 'text', ''))[:200]}",
                status_code=resp.status_code,
            )
        try:
            body = resp.json()
        except ValueError as exc:
            raise RemoteResponseError(f"Response is not JSON: {exc}") from exc
        return _extract_content(body)

    def complete(self, system_prompt: str, user_text: str) -> str:
        payload = {
            "model": self.config.model,
            "messages": [
                {"role": "system", "content": system_prompt},
                {"role": "user", "content": user_text},
            ],
            "temperature": self.config.temperature,
            "max_tokens": self.config.max_tokens,
        }
        with self._slots:
            started = time.perf_counter()
            try:
                return self._post(payload)
            finally:
                elapsed = time.perf_counter() - started
                with self._lock:
                    self.timings.append(elapsed)
                logger.debug("Chat completion took %.3fs", elapsed)


class RemotePolicy:
    """Policy backed by a remote chat model: system = task prompt, user = rendered state."""

    concurrency = "concurrent_ok"

    def __init__(
        self,
        remote_config: Optional[config.RemotePolicyConfig] = None,
        *,
        client: Optional[RemoteChatClient] = None,
        system_prompt: Optional[str] = None,
    ):
        self.config = remote_config or config.RemotePolicyConfig()
        self.client = client or RemoteChatClient(self.config)
        self.system_prompt = self.config.system_prompt if system_prompt is None else system_prompt

    def decide(self, rendered_state: str, rng=None, *, state=None) -> str:
        return self.client.complete(self.system_prompt, rendered_state)


def remote_policy_decide(
    remote_config: config.RemotePolicyConfig,
    rendered_state: str,
    *,
    session: Optional[requests.Session] = None,
) -> str:
    """One-shot decision through a fresh client."""
    return RemoteChatClient(remote_config, session=session).complete(remote_config.system_prompt, rendered_state)
