"""Execution adapter: dispatches a timed trace against a serving endpoint.

Two transports share one report shape: an in-process simulator driven in
virtual time (bit-exact, used by campaigns and acceptance runs) and a
wall-clock HTTP client for OpenAI-style completion endpoints.
"""

from __future__ import annotations

import json
import logging
import threading
import time
from dataclasses import dataclass, field
from enum import Enum

from .trace import EventKind, RequestSpec, TimedTrace, parse_prompt, prompt_for, render_prompt

LOG = logging.getLogger(__name__)

KV_EVENT_KINDS = ("alloc", "free", "prefix_hit", "evict", "reuse")


class EndpointUnavailable(RuntimeError):
    """The endpoint refused service before the trace could be dispatched."""


class UnsupportedOperation(RuntimeError):
    """The endpoint does not implement the requested control surface."""


class EngineKind(str, Enum):
    SIMULATOR = "simulator"
    OPENAI = "generic-openai-compatible"


@dataclass(frozen=True)
class KvEvent:
    ts_ms: int
    kind: str
    block_id: int
    block_hash: int | None
    owner_request_id: str
    adapter: str

    def to_json_line(self) -> str:
        return json.dumps(
            {
                "ts_ms": self.ts_ms,
                "kind": self.kind,
                "block_id": self.block_id,
                "block_hash": self.block_hash,
                "owner_request_id": self.owner_request_id,
                "adapter": self.adapter,
            },
            sort_keys=True,
        )

    @staticmethod
    def from_json_line(line: str) -> "KvEvent":
        doc = json.loads(line)
        if doc["kind"] not in KV_EVENT_KINDS:
            raise ValueError(f"unknown kv event kind {doc['kind']!r}")
        return KvEvent(
            ts_ms=doc["ts_ms"],
            kind=doc["kind"],
            block_id=doc["block_id"],
            block_hash=doc.get("block_hash"),
            owner_request_id=doc["owner_request_id"],
            adapter=doc["adapter"],
        )


@dataclass
class RequestOutcome:
    request_id: str
    status: str  # completed | cancelled | disconnected | timeout | server_error
    dispatched_ms: int
    ttft_ms: int | None = None
    total_ms: int | None = None
    output_tokens: tuple = ()  # one token tuple per completion stream
    logprob_records: tuple | None = None  # per stream, per position: ((token, logprob), ...)
    token_stamps: tuple = ()  # absolute ms of stream-0 token arrivals
    error: str | None = None


@dataclass
class ExecutionReport:
    trace_id: str
    outcomes: dict[str, RequestOutcome]
    kv_events: tuple = ()
    server_crashed: bool = False
    crash_evidence: dict | None = None
    wall_clock_span_ms: int = 0
    request_index: dict = field(default_factory=dict)
    block_snapshots: dict = field(default_factory=dict)
    engine_info: dict = field(default_factory=dict)
    schedule_degraded: bool = False
    kv_stream_supported: bool = True


@dataclass
class KvStreamResult:
    events: tuple
    supported: bool


@dataclass
class EngineEndpoint:
    kind: EngineKind
    handle: object | None = None  # in-process simulator control surface
    base_url: str | None = None
    schedule_tolerance_ms: int = 5
    request_timeout_ms: int = 60_000
    kv_grace_ms: int = 2_000

    def __post_init__(self) -> None:
        if self.kind is EngineKind.SIMULATOR and self.handle is None:
            raise ValueError("simulator endpoint requires an in-process handle")
        if self.kind is EngineKind.OPENAI and not self.base_url:
            raise ValueError("openai endpoint requires a base_url")


@dataclass(frozen=True)
class ApiCall:
    """Transport-neutral description of the call an event maps to."""

    op: str  # completion | abort | pause
    request_id: str | None = None
    payload: dict | None = None
    graceful: bool = True
    duration_ms: int | None = None


def map_event(event, engine_kind: EngineKind, corpus_seed: int = 0, vocab_size: int = 1024) -> ApiCall:
    """Total mapping from trace events to endpoint calls."""
    if event.kind is EventKind.SEND:
        spec = event.spec
        tokens = prompt_for(spec, corpus_seed, vocab_size)
        payload = {
            "model": spec.adapter,
            "prompt": list(tokens) if engine_kind is EngineKind.SIMULATOR else render_prompt(tokens),
            "max_tokens": spec.sampling.max_tokens,
            "temperature": spec.sampling.temperature,
            "n": spec.sampling.n_completions,
            "stream": spec.stream,
        }
        if spec.sampling.seed is not None:
            payload["seed"] = spec.sampling.seed
        if spec.sampling.logprobs is not None:
            payload["logprobs"] = spec.sampling.logprobs
        return ApiCall(op="completion", request_id=spec.request_id, payload=payload)
    if event.kind is EventKind.CANCEL:
        return ApiCall(op="abort", request_id=event.target, graceful=True)
    if event.kind is EventKind.DISCONNECT:
        return ApiCall(op="abort", request_id=event.target, graceful=False)
    return ApiCall(op="pause", duration_ms=event.duration_ms)


def execute(
    trace: TimedTrace,
    endpoint: EngineEndpoint,
    corpus_seed: int = 0,
    canonical_decode: bool = False,
) -> ExecutionReport:
    """Dispatch every event at its offset and collect one outcome per Send."""
    if endpoint.kind is EngineKind.SIMULATOR:
        return _execute_virtual(trace, endpoint, corpus_seed, canonical_decode)
    return _execute_wall(trace, endpoint, corpus_seed)


def reset_server(endpoint: EngineEndpoint) -> None:
    if endpoint.kind is EngineKind.SIMULATOR:
        endpoint.handle.reset()
        return
    import requests

    resp = requests.post(endpoint.base_url.rstrip("/") + "/control/reset", timeout=10)
    if resp.status_code == 404:
        raise UnsupportedOperation("endpoint exposes no reset control")
    resp.raise_for_status()


def collect_kv_stream(endpoint: EngineEndpoint) -> KvStreamResult:
    if endpoint.kind is EngineKind.SIMULATOR:
        return KvStreamResult(events=tuple(endpoint.handle.kv_events()), supported=True)
    import requests

    resp = requests.get(endpoint.base_url.rstrip("/") + "/kv_events", timeout=10)
    if resp.status_code == 404:
        return KvStreamResult(events=(), supported=False)
    resp.raise_for_status()
    events = tuple(KvEvent.from_json_line(line) for line in resp.text.splitlines() if line.strip())
    return KvStreamResult(events=events, supported=True)


def check_health(endpoint: EngineEndpoint) -> bool:
    if endpoint.kind is EngineKind.SIMULATOR:
        return endpoint.handle.healthy
    import requests

    try:
        return requests.get(endpoint.base_url.rstrip("/") + "/health", timeout=5).status_code == 200
    except requests.RequestException:
        return False


# --------------------------------------------------------------------------
# Virtual-time execution against the in-process simulator.

def _execute_virtual(trace, endpoint, corpus_seed, canonical_decode) -> ExecutionReport:
    handle = endpoint.handle
    if not handle.healthy:
        raise EndpointUnavailable("simulator endpoint is down")
    handle.set_canonical_decode(canonical_decode)
    info = handle.engine_info()
    vocab = info["vocab_size"]

    outcomes: dict[str, RequestOutcome] = {}
    dispatched: dict[str, int] = {}
    undispatched: list[RequestSpec] = []
    for event in trace.events:
        if handle.crashed:
            if event.kind is EventKind.SEND:
                undispatched.append((event.spec, event.offset_ms))
            continue
        handle.advance_to(event.offset_ms)
        if handle.crashed:
            if event.kind is EventKind.SEND:
                undispatched.append((event.spec, event.offset_ms))
            continue
        if event.kind is EventKind.SEND:
            spec = event.spec
            tokens = prompt_for(spec, corpus_seed, vocab)
            err = handle.submit(
                rid=spec.request_id,
                prompt=tokens,
                adapter=spec.adapter,
                max_tokens=spec.sampling.max_tokens,
                n_completions=spec.sampling.n_completions,
                request_seed=spec.sampling.seed,
                logprobs=spec.sampling.logprobs,
                dispatched_ms=event.offset_ms,
            )
            if err is not None:
                outcomes[spec.request_id] = RequestOutcome(
                    request_id=spec.request_id, status="server_error", dispatched_ms=event.offset_ms, error=err
                )
            else:
                dispatched[spec.request_id] = event.offset_ms
        elif event.kind in (EventKind.CANCEL, EventKind.DISCONNECT):
            handle.cancel(event.target, disconnect=event.kind is EventKind.DISCONNECT)
        # Wait events are pure schedule spacing; nothing to dispatch.

    # Drain: run until every dispatched request is terminal or times out.
    timeout = endpoint.request_timeout_ms
    while not handle.crashed and handle.in_flight_ids():
        for rid in handle.in_flight_ids():
            if handle.clock_ms - dispatched.get(rid, 0) >= timeout:
                handle.expire(rid)
        if handle.in_flight_ids():
            handle.step_once()

    for rid, sent_at in dispatched.items():
        rec = handle.finished_record(rid)
        if rec is None:  # still in flight at crash time
            outcomes[rid] = RequestOutcome(
                request_id=rid, status="server_error", dispatched_ms=sent_at, error="engine crashed mid-request"
            )
            continue
        outcomes[rid] = RequestOutcome(
            request_id=rid,
            status=rec["status"],
            dispatched_ms=sent_at,
            ttft_ms=None if rec["first_token_ms"] is None else rec["first_token_ms"] - sent_at,
            total_ms=None if rec["finished_ms"] is None else rec["finished_ms"] - sent_at,
            output_tokens=tuple(tuple(s) for s in rec["outputs"]),
            logprob_records=rec["records"],
            token_stamps=tuple(rec["token_stamps"]),
        )
    for spec, offset in undispatched:
        outcomes[spec.request_id] = RequestOutcome(
            request_id=spec.request_id, status="server_error", dispatched_ms=offset, error="engine down before dispatch"
        )

    return ExecutionReport(
        trace_id=trace.trace_id,
        outcomes=outcomes,
        kv_events=tuple(handle.kv_events()),
        server_crashed=handle.crashed,
        crash_evidence=handle.crash_evidence,
        wall_clock_span_ms=handle.clock_ms,
        request_index=dict(trace.request_specs()),
        block_snapshots=handle.block_snapshots(),
        engine_info=info,
        schedule_degraded=False,
    )


# --------------------------------------------------------------------------
# Wall-clock execution against an OpenAI-style HTTP endpoint.

def _execute_wall(trace, endpoint, corpus_seed) -> ExecutionReport:
    import requests

    base = endpoint.base_url.rstrip("/")
    if not check_health(endpoint):
        raise EndpointUnavailable(f"no healthy endpoint at {base}")
    try:
        info = requests.get(base + "/control/info", timeout=5).json()
    except requests.RequestException:
        info = {}
    vocab = info.get("vocab_size", 1024)

    outcomes: dict[str, RequestOutcome] = {}
    live: dict[str, requests.Response] = {}
    threads: dict[str, threading.Thread] = {}
    lock = threading.Lock()
    dispatch_errors: list[int] = []

    def run_request(call: ApiCall, intended_ms: int) -> None:
        rid = call.request_id
        body = dict(call.payload)
        body["stream"] = True
        started = time.monotonic()
        tokens: list[int] = []
        stamps: list[int] = []
        ttft = None
        status, error = "completed", None
        try:
            resp = requests.post(base + "/v1/completions", json=body, stream=True, timeout=endpoint.request_timeout_ms / 1000)
            with lock:
                live[rid] = resp
            if resp.status_code != 200:
                status, error = "server_error", f"http {resp.status_code}"
            else:
                for raw in resp.iter_lines():
                    if not raw or not raw.startswith(b"data: "):
                        continue
                    payload = raw[len(b"data: ") :]
                    if payload == b"[DONE]":
                        break
                    chunk = json.loads(payload)
                    text = chunk["choices"][0].get("text", "")
                    now_ms = int((time.monotonic() - started) * 1000) + intended_ms
                    for tok in parse_prompt(text):
                        tokens.append(tok)
                        stamps.append(now_ms)
                        if ttft is None:
                            ttft = now_ms - intended_ms
        except requests.exceptions.Timeout:
            status, error = "timeout", "client-side timeout"
        except (requests.RequestException, OSError) as exc:
            # Closed from our side (abort) or the engine died under us.
            status = "cancelled" if aborted.get(rid) == "cancel" else "disconnected" if aborted.get(rid) else "server_error"
            error = None if rid in aborted else str(exc)
        with lock:
            live.pop(rid, None)
        outcomes[rid] = RequestOutcome(
            request_id=rid,
            status=status,
            dispatched_ms=intended_ms,
            ttft_ms=ttft,
            total_ms=int((time.monotonic() - started) * 1000),
            output_tokens=(tuple(tokens),),
            token_stamps=tuple(stamps),
            error=error,
        )

    aborted: dict[str, str] = {}
    epoch = time.monotonic()
    for event in trace.events:
        target = epoch + event.offset_ms / 1000.0
        delay = target - time.monotonic()
        if delay > 0:
            time.sleep(delay)
        lateness = int((time.monotonic() - target) * 1000)
        if lateness > endpoint.schedule_tolerance_ms:
            dispatch_errors.append(lateness)
        call = map_event(event, EngineKind.OPENAI, corpus_seed, vocab)
        if call.op == "completion":
            t = threading.Thread(target=run_request, args=(call, event.offset_ms), daemon=True)
            threads[call.request_id] = t
            t.start()
        elif call.op == "abort":
            aborted[call.request_id] = "cancel" if call.graceful else "disconnect"
            with lock:
                resp = live.get(call.request_id)
            if resp is not None:
                resp.close()

    for t in threads.values():
        t.join(timeout=endpoint.request_timeout_ms / 1000 + 5)
    span = int((time.monotonic() - epoch) * 1000)
    for event in trace.send_events():
        rid = event.spec.request_id
        if rid not in outcomes:
            outcomes[rid] = RequestOutcome(request_id=rid, status="timeout", dispatched_ms=event.offset_ms, error="no response")

    stream = collect_kv_stream(endpoint)
    crashed = not check_health(endpoint)
    return ExecutionReport(
        trace_id=trace.trace_id,
        outcomes=outcomes,
        kv_events=stream.events,
        server_crashed=crashed,
        crash_evidence={"signature": "connection-lost"} if crashed else None,
        wall_clock_span_ms=span,
        request_index=dict(trace.request_specs()),
        engine_info=info,
        schedule_degraded=bool(dispatch_errors),
        kv_stream_supported=stream.supported,
    )
