"""Policy/value backend interface and the HTTP wire protocol.

A backend proposes candidate next steps for a state and predicts a scalar
value in [-1, 1] for a state. Everything above this interface (search,
inference, data generation) is backend-agnostic.
"""

from __future__ import annotations

import json
import logging
import threading
import time
from abc import ABC, abstractmethod
from dataclasses import dataclass
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer

import requests

from .core import (
    ContractViolation,
    EngineError,
    ReasoningState,
    Step,
    StepKind,
    extract_answer_text,
    is_terminal,
    normalize_answer,
)

logger = logging.getLogger(__name__)

WIRE_VERSION = "1"
VERSION_HEADER = "x-rsp-version"
BACKEND_URL_ENV = "RSP_BACKEND_URL"

# Positive temperature this small requests the deterministic (mode-seeking)
# proposal ordering from a backend.
DETERMINISTIC_TEMPERATURE = 1e-9


class TransportError(EngineError):
    """The remote backend could not be reached or kept failing."""


@dataclass(frozen=True)
class ProposalRequest:
    """A request for up to ``n_samples`` distinct next steps."""

    state: ReasoningState
    n_samples: int
    temperature: float
    seed: int | None = None

    def __post_init__(self) -> None:
        if self.n_samples < 1:
            raise ContractViolation("n_samples must be >= 1")
        if not self.temperature > 0.0:
            raise ContractViolation("temperature must be > 0")


@dataclass(frozen=True)
class Proposal:
    step: Step


@dataclass(frozen=True)
class ValuePrediction:
    value: float

    def __post_init__(self) -> None:
        if not -1.0 <= self.value <= 1.0:
            raise ContractViolation("predicted value must lie in [-1, 1]")


class PolicyValueBackend(ABC):
    """Interface every proposal/value provider implements.

    Implementations must be safe for concurrent calls and must never
    propose steps for a terminal state.
    """

    @abstractmethod
    def propose_steps(self, request: ProposalRequest) -> list[Proposal]:
        """Return up to n_samples proposals, pairwise distinct by step text.

        An empty list signals a dead end: the state has no legal
        continuation. Duplicate completions must be merged, not repeated.
        """

    @abstractmethod
    def predict_value(self, state: ReasoningState) -> ValuePrediction:
        """Return the scalar value estimate for ``state``."""


def dedupe_proposals(proposals: list[Proposal]) -> list[Proposal]:
    """Merge proposals whose step text is identical, keeping the first."""
    seen: set[str] = set()
    unique: list[Proposal] = []
    for proposal in proposals:
        if proposal.step.text not in seen:
            seen.add(proposal.step.text)
            unique.append(proposal)
    return unique


def _step_from_wire(payload: dict) -> Step:
    kind = payload.get("kind")
    if kind not in ("c", "a"):
        raise TransportError(f"unknown proposal kind: {kind!r}")
    text = payload.get("text")
    if not isinstance(text, str):
        raise TransportError("proposal text missing or not a string")
    extracted = None
    if kind == "a":
        answer = payload.get("answer")
        if isinstance(answer, str):
            extracted = normalize_answer(answer).normalized
        else:
            # Fall back to parsing the rendered text; raises on malformed steps.
            extracted = extract_answer_text(text).normalized
    return Step(
        kind=StepKind.CODE if kind == "c" else StepKind.ANSWER,
        text=text,
        mean_log_prob=float(payload.get("mean_log_prob", 0.0)),
        contains_code=bool(payload.get("contains_code", False)),
        code_errored=bool(payload.get("code_errored", False)),
        code_output=payload.get("code_output"),
        extracted_answer=extracted,
    )


def _step_to_wire(step: Step) -> dict:
    return {
        "kind": step.kind.value,
        "text": step.text,
        "mean_log_prob": step.mean_log_prob,
        "contains_code": step.contains_code,
        "code_errored": step.code_errored,
        "code_output": step.code_output,
        "answer": step.extracted_answer,
    }


class RemoteBackend(PolicyValueBackend):
    """Client for a model server speaking the JSON wire protocol.

    POST /propose  {"state","n_samples","temperature","seed"} -> {"proposals":[...]}
    POST /value    {"state"} -> {"value": float}

    Requests carry the protocol version header; transient failures are
    retried up to ``max_attempts`` times with exponential backoff.
    """

    def __init__(
        self,
        base_url: str,
        timeout: float = 30.0,
        max_attempts: int = 3,
        backoff: float = 0.25,
    ) -> None:
        self.base_url = base_url.rstrip("/")
        self.timeout = timeout
        self.max_attempts = max_attempts
        self.backoff = backoff
        self._local = threading.local()

    def _session(self) -> requests.Session:
        session = getattr(self._local, "session", None)
        if session is None:
            session = requests.Session()
            self._local.session = session
        return session

    def _post(self, path: str, body: dict) -> dict:
        url = f"{self.base_url}{path}"
        headers = {VERSION_HEADER: WIRE_VERSION}
        last_error: Exception | None = None
        for attempt in range(self.max_attempts):
            if attempt:
                time.sleep(self.backoff * (2 ** (attempt - 1)))
            try:
                response = self._session().post(
                    url, json=body, headers=headers, timeout=self.timeout
                )
                if response.status_code >= 500:
                    last_error = TransportError(
                        f"{path} returned {response.status_code}"
                    )
                    continue
                if response.status_code != 200:
                    raise TransportError(
                        f"{path} returned {response.status_code}: {response.text[:200]}"
                    )
                return response.json()
            except (requests.RequestException, ValueError) as exc:
                last_error = exc
        raise TransportError(f"POST {path} failed after {self.max_attempts} attempts") from last_error

    def propose_steps(self, request: ProposalRequest) -> list[Proposal]:
        if is_terminal(request.state):
            raise ContractViolation("cannot propose steps for a terminal state")
        proposals: list[Proposal] = []
        attempts = 0
        # Re-request once on duplicate shortfall, never exceeding 2x the
        # requested sample budget in total draws.
        while len(proposals) < request.n_samples and attempts < 2 * request.n_samples:
            want = request.n_samples - len(proposals)
            body = {
                "state": request.state.render(),
                "n_samples": want,
                "temperature": request.temperature,
                "seed": None if request.seed is None else request.seed + attempts,
            }
            payload = self._post("/propose", body)
            raw = payload.get("proposals")
            if not isinstance(raw, list):
                raise TransportError("backend response lacks a proposals list")
            if not raw:
                break  # dead end: the server has no legal continuation
            attempts += len(raw)
            proposals = dedupe_proposals(
                proposals + [Proposal(step=_step_from_wire(p)) for p in raw]
            )
            if len(raw) < want:
                break  # backend is out of distinct candidates
        # An empty list is a dead-end signal, passed through to the caller.
        return proposals[: request.n_samples]

    def predict_value(self, state: ReasoningState) -> ValuePrediction:
        payload = self._post("/value", {"state": state.render()})
        value = payload.get("value")
        if not isinstance(value, (int, float)):
            raise TransportError(f"backend returned non-numeric value: {value!r}")
        value = float(value)
        if value < -1.0 or value > 1.0:
            logger.warning("clamping out-of-range value %.6f from backend", value)
            value = max(-1.0, min(1.0, value))
        return ValuePrediction(value=value)


class _BackendRequestHandler(BaseHTTPRequestHandler):
    """Serves an in-process backend over the wire protocol (used for tests
    and for exposing the toy environment to external clients)."""

    backend: PolicyValueBackend
    state_decoder = None  # callable: rendered text -> ReasoningState

    def log_message(self, fmt: str, *args) -> None:  # quiet by default
        logger.debug("wire server: " + fmt, *args)

    def _read_body(self) -> dict:
        length = int(self.headers.get("Content-Length", "0"))
        return json.loads(self.rfile.read(length) or b"{}")

    def _reply(self, code: int, payload: dict) -> None:
        blob = json.dumps(payload).encode()
        self.send_response(code)
        self.send_header("Content-Type", "application/json")
        self.send_header("Content-Length", str(len(blob)))
        self.send_header(VERSION_HEADER, WIRE_VERSION)
        self.end_headers()
        self.wfile.write(blob)

    def do_POST(self) -> None:  # noqa: N802 (http.server naming)
        try:
            body = self._read_body()
            decode = type(self).state_decoder
            if self.path == "/propose":
                state = decode(body["state"])
                request = ProposalRequest(
                    state=state,
                    n_samples=int(body["n_samples"]),
                    temperature=float(body["temperature"]),
                    seed=body.get("seed"),
                )
                proposals = type(self).backend.propose_steps(request)
                self._reply(
                    200,
                    {"proposals": [_step_to_wire(p.step) for p in proposals]},
                )
            elif self.path == "/value":
                state = decode(body["state"])
                prediction = type(self).backend.predict_value(state)
                self._reply(200, {"value": prediction.value})
            else:
                self._reply(404, {"error": f"unknown path {self.path}"})
        except Exception as exc:  # surface as a server error for the client
            self._reply(500, {"error": str(exc)})


def serve_backend(backend: PolicyValueBackend, state_decoder, host: str = "127.0.0.1", port: int = 0) -> ThreadingHTTPServer:
    """Expose ``backend`` over HTTP; returns the (already started) server.

    ``state_decoder`` maps a rendered state string back to a ReasoningState
    the backend understands. The caller owns shutdown().
    """
    handler = type(
        "BoundBackendHandler",
        (_BackendRequestHandler,),
        {"backend": backend, "state_decoder": staticmethod(state_decoder)},
    )
    server = ThreadingHTTPServer((host, port), handler)
    thread = threading.Thread(target=server.serve_forever, daemon=True)
    thread.start()
    return server
