"""Chat-completion oracle client, mock oracles, and the three-oracle consensus filter."""
from __future__ import annotations

import hashlib
import json
import logging
import os
import re
import threading
import time
from dataclasses import dataclass, field
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer
from pathlib import Path
from typing import Callable, Mapping, Protocol, Sequence

import numpy as np
import requests

from .answers import UNPARSEABLE, extract_answer
from .narrative import QaPair, parse_narrative
from .tokenizer import count_tokens
from .toytask import risk_factors, toy_label

log = logging.getLogger(__name__)

TOKEN_ENV = "MDDREASON_ORACLE_TOKEN"
RETRYABLE_STATUS = frozenset({408, 429, 500, 502, 503, 504})
Message = tuple[str, str]


def stable_seed(*parts: object) -> int:
    """64-bit seed derived from labeled parts; stable across runs and platforms."""
    h = hashlib.blake2b("\x1f".join(map(str, parts)).encode(), digest_size=8)
    return int.from_bytes(h.digest(), "little") >> 1


class OracleError(Exception):
    pass


class TransportError(OracleError):
    def __init__(self, message: str, attempts: int = 0):
        super().__init__(message)
        self.attempts = attempts


class ProtocolError(OracleError):
    pass


@dataclass(frozen=True)
class OracleEndpoint:
    base_url: str
    model_name: str
    auth_token: str = field(default="", repr=False)
    timeout: float = 30.0
    max_retries: int = 3
    backoff: float = 0.5       # seconds before the first retry; doubles each time
    backoff_max: float = 8.0
    max_in_flight: int = 4
    rate_per_s: float | None = None
    name: str | None = None

    def __post_init__(self):
        if not self.timeout > 0:
            raise ValueError("timeout must be > 0")
        if self.max_retries < 0:
            raise ValueError("max_retries must be >= 0")
        if self.max_in_flight < 1:
            raise ValueError("max_in_flight must be >= 1")

    @property
    def id(self) -> str:
        return self.name or self.model_name

    @property
    def token(self) -> str:
        return self.auth_token or os.environ.get(TOKEN_ENV, "")


@dataclass(frozen=True)
class ChatExchange:
    request: tuple[Message, ...]
    response: str
    latency: float
    token_counts: tuple[int, int]
    attempts: int = 1
    model: str = ""


class Transport(Protocol):
    def post(self, endpoint: OracleEndpoint, payload: dict) -> tuple[int, str]:
        """Send one request; return (status, body). Raise TransportError if unreachable."""


class HttpTransport:
    def __init__(self, session: requests.Session | None = None):
        self.session = session or requests.Session()

    def post(self, endpoint: OracleEndpoint, payload: dict) -> tuple[int, str]:
        headers = {"Content-Type": "application/json"}
        if endpoint.token:
            headers["Authorization"] = f"Bearer {endpoint.token}"
        url = endpoint.base_url.rstrip("/") + "/chat/completions"
        try:
            r = self.session.post(url, data=json.dumps(payload), headers=headers, timeout=endpoint.timeout)
        except (requests.ConnectionError, requests.Timeout) as e:
            raise TransportError(f"{endpoint.id}: {type(e).__name__}: {e}") from e
        return r.status_code, r.text


Responder = Callable[[dict], tuple[int, dict]]


class LocalTransport:
    """In-process transport that still round-trips the JSON wire format."""

    def __init__(self, responder: Responder):
        self.responder = responder

    def post(self, endpoint: OracleEndpoint, payload: dict) -> tuple[int, str]:
        status, body = self.responder(json.loads(json.dumps(payload)))
        return status, json.dumps(body)


class TokenBucket:
    def __init__(self, rate: float, burst: float | None = None,
                 clock: Callable[[], float] = time.monotonic, sleep: Callable[[float], None] = time.sleep):
        self.rate = rate
        self.capacity = burst if burst is not None else max(1.0, rate)
        self.tokens = self.capacity
        self.clock, self.sleep = clock, sleep
        self.last = clock()
        self.lock = threading.Lock()

    def acquire(self) -> None:
        while True:
            with self.lock:
                now = self.clock()
                self.tokens = min(self.capacity, self.tokens + (now - self.last) * self.rate)
                self.last = now
                if self.tokens >= 1:
                    self.tokens -= 1
                    return
                wait = (1 - self.tokens) / self.rate
            self.sleep(wait)


def _parse_completion(body: str, endpoint: OracleEndpoint) -> tuple[str, dict]:
    try:
        data = json.loads(body)
        content = data["choices"][0]["message"]["content"]
    except (ValueError, KeyError, IndexError, TypeError) as e:
        raise ProtocolError(f"{endpoint.id}: malformed completion body ({e})") from None
    if not isinstance(content, str) or not content:
        raise ProtocolError(f"{endpoint.id}: completion content is empty")
    return content, data.get("usage") or {}


class OracleClient:
    def __init__(self, endpoint: OracleEndpoint, transport: Transport | None = None,
                 sleep: Callable[[float], None] = time.sleep):
        self.endpoint = endpoint
        self.transport = transport or HttpTransport()
        self.sleep = sleep
        self._slots = threading.BoundedSemaphore(endpoint.max_in_flight)
        self._bucket = TokenBucket(endpoint.rate_per_s, sleep=sleep) if endpoint.rate_per_s else None

    @property
    def id(self) -> str:
        return self.endpoint.id

    def complete(self, messages: Sequence[Message], temperature: float = 0.0,
                 max_tokens: int = 1024, seed: int | None = None) -> ChatExchange:
        request = tuple((str(r), str(c)) for r, c in messages)
        if not request or any(r not in ("system", "user", "assistant") for r, _ in request):
            raise ValueError("messages must be a non-empty list of (role, content) with standard roles")
        payload = {"model": self.endpoint.model_name,
                   "messages": [{"role": r, "content": c} for r, c in request],
                   "temperature": temperature, "max_tokens": max_tokens}
        if seed is not None:
            payload["seed"] = int(seed)
        ep = self.endpoint
        last_error = ""
        for attempt in range(1, ep.max_retries + 2):
            if attempt > 1:
                self.sleep(min(ep.backoff * 2 ** (attempt - 2), ep.backoff_max))
            if self._bucket:
                self._bucket.acquire()
            start = time.perf_counter()
            try:
                with self._slots:
                    status, body = self.transport.post(ep, payload)
            except TransportError as e:
                last_error = str(e)
                log.debug("%s attempt %d failed: %s", ep.id, attempt, e)
                continue
            latency = time.perf_counter() - start
            if 200 <= status < 300:
                content, usage = _parse_completion(body, ep)
                counts = (int(usage.get("prompt_tokens", sum(count_tokens(c) for _, c in request))),
                          int(usage.get("completion_tokens", count_tokens(content))))
                return ChatExchange(request, content, latency, counts, attempt, ep.model_name)
            last_error = f"{ep.id}: HTTP {status}"
            if status not in RETRYABLE_STATUS:
                raise TransportError(last_error, attempt)
            log.debug("%s attempt %d got HTTP %d", ep.id, attempt, status)
        raise TransportError(f"{last_error} (after {ep.max_retries + 1} attempts)", ep.max_retries + 1)


# --- mock oracles -----------------------------------------------------------------

def completion_body(content: str, model: str = "mock", prompt: str = "") -> dict:
    return {"object": "chat.completion", "model": model,
            "choices": [{"index": 0, "finish_reason": "stop",
                         "message": {"role": "assistant", "content": content}}],
            "usage": {"prompt_tokens": count_tokens(prompt), "completion_tokens": count_tokens(content)}}


def _request_text(payload: Mapping) -> str:
    return "\n".join(m.get("content", "") for m in payload.get("messages", []))


@dataclass
class ScriptRule:
    match_substring: str
    scripted_response: str | list[str]
    fail_times: int = 0
    fail_status: int = 503
    calls: int = 0
    failures: int = 0


class ScriptedResponder:
    """First rule whose substring occurs in the request wins.

    A rule fails its first ``fail_times`` calls with ``fail_status``. A list
    response is played in order, repeating its last element.
    """

    def __init__(self, rules: Sequence[ScriptRule], default: str | None = None):
        self.rules = list(rules)
        self.default = default
        self.lock = threading.Lock()

    @classmethod
    def from_jsonl(cls, path: str | Path, default: str | None = None) -> ScriptedResponder:
        rules = []
        for line in Path(path).read_text(encoding="utf-8").splitlines():
            if line.strip():
                d = json.loads(line)
                rules.append(ScriptRule(d["match_substring"], d["scripted_response"],
                                        int(d.get("fail_times", 0)), int(d.get("fail_status", 503))))
        return cls(rules, default)

    def __call__(self, payload: dict) -> tuple[int, dict]:
        text = _request_text(payload)
        with self.lock:
            for rule in self.rules:
                if rule.match_substring in text:
                    if rule.failures < rule.fail_times:
                        rule.failures += 1
                        return rule.fail_status, {"error": {"message": "scripted failure"}}
                    resp = rule.scripted_response
                    if isinstance(resp, list):
                        resp = resp[min(rule.calls, len(resp) - 1)]
                    rule.calls += 1
                    return 200, completion_body(resp, payload.get("model", "mock"), text)
        if self.default is None:
            return 404, {"error": {"message": "no scripted rule matches"}}
        return 200, completion_body(self.default, payload.get("model", "mock"), text)


REFINE_MARKER = "Rewrite the original instructions"
GUIDANCE_MARKER = "Additional guidance:"
_STEP_LINE = re.compile(r"^Step \d+: (.+)$", re.MULTILINE)


class ClinicianOracle:
    """Deterministic stand-in for a clinical LLM.

    It reads the narrative, scores it with the toy risk rule and answers in
    the format the prompt asks for. With probability ``error_rate`` (halved
    under a refined prompt) the answer is flipped. The coin is a hash of the
    request seed, model and content, so identical requests get identical answers.
    """

    def __init__(self, error_rate: float = 0.1, refined_error_factor: float = 0.5):
        if not 0 <= error_rate <= 1:
            raise ValueError("error_rate must be in [0, 1]")
        self.error_rate = error_rate
        self.refined_error_factor = refined_error_factor

    def __call__(self, payload: dict) -> tuple[int, dict]:
        messages = payload.get("messages", [])
        system = next((m["content"] for m in messages if m.get("role") == "system"), "")
        user = next((m["content"] for m in reversed(messages) if m.get("role") == "user"), "")
        model = payload.get("model", "mock")
        if REFINE_MARKER in system:
            return 200, completion_body(self._refine(user), model, _request_text(payload))
        seed = stable_seed(payload.get("seed", 0), model, system, user)
        u = np.random.default_rng(seed).random()
        rate = self.error_rate * (self.refined_error_factor if GUIDANCE_MARKER in system else 1.0)
        return 200, completion_body(self._answer(system, user, flip=u < rate), model,
                                    _request_text(payload))

    @staticmethod
    def _refine(user: str) -> str:
        original = user.split("Original instructions:\n", 1)[-1].split("\n\nQuestion:\n", 1)[0]
        return (f"{original}\n{GUIDANCE_MARKER} weigh sleep disturbance, self-harm history, "
                "happiness and health satisfaction first, then account for illness, age and sex. "
                "State the overall risk explicitly before the final answer.")

    @staticmethod
    def _answer(system: str, user: str, flip: bool) -> str:
        values = parse_narrative(user)
        truth = toy_label(values)
        answer = {"MDD": "HC", "HC": "MDD"}[truth] if flip else truth
        tag = f"<answer>{answer}</answer>"
        stages = _STEP_LINE.findall(system)
        if not stages:
            return tag
        factors = risk_factors(values)
        findings = ", ".join(f for f, _ in factors) or "no notable risk factors"
        level = "high" if answer == "MDD" else "low"
        lines = []
        for i, stage in enumerate(stages):
            if i == len(stages) - 1:
                lines.append(f"{stage}: weighing {findings}, the risk of MDD is {level}.")
            else:
                relevant = [f for f, _ in factors[i::len(stages) - 1]] or ["nothing decisive"]
                lines.append(f"{stage}: the description shows {', '.join(relevant)}.")
        lines.append(f"Overall, the risk of MDD is {level}.")
        return "<think>\n" + "\n".join(lines) + "\n</think>\n" + tag


class _Handler(BaseHTTPRequestHandler):
    responder: Responder

    def do_POST(self):
        if not self.path.rstrip("/").endswith("/chat/completions"):
            self._send(404, {"error": {"message": "unknown path"}})
            return
        try:
            payload = json.loads(self.rfile.read(int(self.headers.get("Content-Length", 0))))
        except ValueError:
            self._send(400, {"error": {"message": "invalid JSON"}})
            return
        status, body = self.server.responder(payload)
        self._send(status, body)

    def _send(self, status: int, body: dict):
        data = json.dumps(body).encode()
        self.send_response(status)
        self.send_header("Content-Type", "application/json")
        self.send_header("Content-Length", str(len(data)))
        self.end_headers()
        self.wfile.write(data)

    def log_message(self, *args):
        pass


class MockOracleServer:
    """OpenAI-compatible HTTP server on localhost backed by a responder."""

    def __init__(self, responder: Responder, host: str = "127.0.0.1", port: int = 0):
        self.httpd = ThreadingHTTPServer((host, port), _Handler)
        self.httpd.daemon_threads = True
        self.httpd.responder = responder
        self.thread = threading.Thread(target=self.httpd.serve_forever, daemon=True)

    @property
    def base_url(self) -> str:
        host, port = self.httpd.server_address[:2]
        return f"http://{host}:{port}/v1"

    def __enter__(self) -> MockOracleServer:
        self.thread.start()
        return self

    def __exit__(self, *exc):
        self.httpd.shutdown()
        self.httpd.server_close()


# --- consensus filter --------------------------------------------------------------

@dataclass(frozen=True)
class OracleVerdict:
    endpoint_id: str
    extracted_answer: str
    raw: ChatExchange | None
    error: str | None = None


@dataclass(frozen=True)
class ConsensusResult:
    decision: str  # retain | exclude | deferred
    verdicts: tuple[OracleVerdict, ...]


def consensus_decision(answers: Sequence[str], truth: str) -> str:
    return "retain" if all(a == truth for a in answers) else "exclude"


def consensus_filter(qa: QaPair, clients: Sequence[OracleClient], seed: int = 0,
                     max_tokens: int = 1024) -> ConsensusResult:
    if len(clients) != 3:
        raise ValueError(f"consensus filtering needs exactly 3 oracles, got {len(clients)}")
    messages = [("system", qa.prompt.render()), ("user", qa.question)]
    verdicts = []
    for client in clients:
        try:
            ex = client.complete(messages, temperature=0.0, max_tokens=max_tokens,
                                 seed=stable_seed(seed, "consensus", qa.id, client.id))
        except OracleError as e:
            verdicts.append(OracleVerdict(client.id, UNPARSEABLE, None, str(e)))
            continue
        verdicts.append(OracleVerdict(client.id, extract_answer(ex.response), ex))
    if any(v.error for v in verdicts):
        return ConsensusResult("deferred", tuple(verdicts))
    return ConsensusResult(consensus_decision([v.extracted_answer for v in verdicts], qa.answer),
                           tuple(verdicts))
