"""HTTP client for an external relationship-decoding service.

The service stands in for the captioning model: it receives a distilled edge
feature plus the subject/object labels and a prompt, and returns a free-text
predicate phrase. Wire protocol: POST /decode with JSON
``{edge_feature, subject, object, prompt}``; success is status 200 with JSON
``{"phrase": ...}``. Every failure mode is a distinct typed error so callers
can tell a slow service from a broken one; nothing here ever falls back
silently.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor

import numpy as np
import requests

DEFAULT_TIMEOUT = 30.0
DEFAULT_MAX_IN_FLIGHT = 4


class DecoderError(RuntimeError):
    """Base for all external-decoder failures."""


class DecoderTimeoutError(DecoderError):
    """The service did not answer within the configured timeout."""


class DecoderConnectionError(DecoderError):
    """The service could not be reached at all."""


class DecoderStatusError(DecoderError):
    """The service answered with a non-success HTTP status."""

    def __init__(self, status: int, body: str):
        super().__init__(f"decoder returned status {status}: {body[:200]}")
        self.status = status


class DecoderProtocolError(DecoderError):
    """The service answered 200 but the body was not the expected JSON."""


class ExternalDecoder:
    """Bounded-concurrency client over the /decode endpoint."""

    def __init__(
        self,
        endpoint: str,
        timeout: float = DEFAULT_TIMEOUT,
        max_in_flight: int = DEFAULT_MAX_IN_FLIGHT,
        session: requests.Session | None = None,
    ):
        if max_in_flight < 1:
            raise ValueError("max_in_flight must be >= 1")
        self.endpoint = endpoint.rstrip("/")
        self.timeout = timeout
        self.max_in_flight = max_in_flight
        self._session = session or requests.Session()

    def decode(self, edge_feature: np.ndarray, subject: str, obj: str, prompt: str) -> str:
        payload = {
            "edge_feature": [float(x) for x in np.asarray(edge_feature, dtype=np.float32)],
            "subject": subject,
            "object": obj,
            "prompt": prompt,
        }
        try:
            resp = self._session.post(f"{self.endpoint}/decode", json=payload, timeout=self.timeout)
        except requests.exceptions.Timeout as exc:
            raise DecoderTimeoutError(f"decoder timed out after {self.timeout}s") from exc
        except requests.exceptions.ConnectionError as exc:
            raise DecoderConnectionError(f"decoder unreachable at {self.endpoint}") from exc
        if resp.status_code != 200:
            raise DecoderStatusError(resp.status_code, resp.text)
        try:
            body = resp.json()
        except ValueError as exc:
            raise DecoderProtocolError(f"decoder response is not JSON: {resp.text[:200]}") from exc
        if not isinstance(body, dict) or "phrase" not in body:
            raise DecoderProtocolError(f"decoder response missing 'phrase': {body!r}")
        phrase = body["phrase"]
        if not isinstance(phrase, str) or not phrase:
            raise DecoderProtocolError(f"decoder phrase must be a non-empty string, got {phrase!r}")
        return phrase

    def decode_many(self, items):
        """Decode (edge_feature, subject, object, prompt) tuples concurrently.

        At most ``max_in_flight`` requests are outstanding at any time. Returns
        one entry per item, in order: either the phrase string or the
        DecoderError instance that request raised.
        """
        results = [None] * len(items)

        def run(idx, item):
            try:
                results[idx] = self.decode(*item)
            except DecoderError as exc:
                results[idx] = exc

        with ThreadPoolExecutor(max_workers=self.max_in_flight) as pool:
            futures = [pool.submit(run, i, item) for i, item in enumerate(items)]
            for f in futures:
                f.result()
        return results
