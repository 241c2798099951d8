"""Shared plumbing for the HTTP backends: retry policy and JSON POST."""

from __future__ import annotations

import logging
import os
import time
from dataclasses import dataclass
from typing import Callable, Optional, TypeVar

import requests

logger = logging.getLogger(__name__)

T = TypeVar("T")


class BackendError(RuntimeError):
    """A backend call failed (transport error or unusable payload)."""


class RetriesExhausted(BackendError):
    def __init__(self, attempts: int, last_error: Exception):
        super().__init__(f"gave up after {attempts} attempts: {last_error}")
        self.attempts = attempts
        self.last_error = last_error


@dataclass(frozen=True)
class RetryPolicy:
    """Bounded attempts with exponential backoff (1s, 2s, 4s, ... by default)."""

    attempts: int = 3
    backoff: float = 1.0
    factor: float = 2.0

    def __post_init__(self) -> None:
        if self.attempts < 1:
            raise ValueError("retry policy needs at least one attempt")

    def delay(self, attempt: int) -> float:
        return self.backoff * self.factor ** (attempt - 1)


def call_with_retry(fn: Callable[[], T], policy: RetryPolicy, what: str = "backend call",
                    sleep: Callable[[float], None] = time.sleep) -> tuple:
    """Run ``fn`` until it succeeds; return ``(value, attempts)``.

    Raises :class:`RetriesExhausted` after ``policy.attempts`` failures.
    Only ``BackendError`` and ``ValueError`` count as retryable.
    """
    last: Optional[Exception] = None
    for attempt in range(1, policy.attempts + 1):
        try:
            return fn(), attempt
        except (BackendError, ValueError) as exc:
            last = exc
            logger.warning("%s failed (attempt %d/%d): %s", what, attempt, policy.attempts, exc)
            if attempt < policy.attempts and policy.backoff > 0:
                sleep(policy.delay(attempt))
    raise RetriesExhausted(policy.attempts, last)


def auth_headers(auth_env: Optional[str]) -> dict:
    headers = {"Content-Type": "application/json"}
    if auth_env:
        token = os.environ.get(auth_env)
        if token:
            headers["Authorization"] = f"Bearer {token}"
    return headers


def post_json(url: str, payload: dict, auth_env: Optional[str] = None, timeout: float = 60.0):
    try:
        resp = requests.post(url, json=payload, headers=auth_headers(auth_env), timeout=timeout)
    except requests.RequestException as exc:
        raise BackendError(f"POST {url}: {exc}") from exc
    if resp.status_code >= 400:
        raise BackendError(f"POST {url}: HTTP {resp.status_code}")
    try:
        return resp.json()
    except ValueError as exc:
        raise BackendError(f"POST {url}: response is not JSON") from exc
