"""Stage-1 behavioral oracles and stage-3 KV-stream forensics.

Stage 1 stays cheap and engine-agnostic: statuses, latency against a rolling
baseline, structural output corruption, lifecycle bookkeeping.  Forensics
correlates the KV event stream and per-request block snapshots to catch state
corruption before it is ever visible in an output.  Semantic judgement of
diverging outputs belongs to the confirmation stage, not here.
"""

from __future__ import annotations

import math
from collections import deque
from dataclasses import dataclass, field
from enum import Enum

from .hashing import canonical_json, fingerprint
from .trace import EventKind, prompt_for


class SuspicionKind(str, Enum):
    TIMEOUT = "timeout"
    STALL = "stall"
    TTFT_REGRESSION = "ttft_regression"
    LIFECYCLE_VIOLATION = "lifecycle_violation"
    CORRUPTED_OUTPUT = "corrupted_output"
    KV_LEAK = "kv_leak"
    CROSS_ADAPTER_REUSE = "cross_adapter_reuse"
    HASH_CONFLICT = "hash_conflict"
    SNAPSHOT_DIVERGENCE = "snapshot_divergence"
    CRASH = "crash"


_SEVERITY = {
    SuspicionKind.CRASH: 1.0,
    SuspicionKind.CROSS_ADAPTER_REUSE: 0.9,
    SuspicionKind.HASH_CONFLICT: 0.85,
    SuspicionKind.SNAPSHOT_DIVERGENCE: 0.8,
    SuspicionKind.CORRUPTED_OUTPUT: 0.8,
    SuspicionKind.KV_LEAK: 0.7,
    SuspicionKind.LIFECYCLE_VIOLATION: 0.6,
    SuspicionKind.TTFT_REGRESSION: 0.5,
    SuspicionKind.STALL: 0.5,
    SuspicionKind.TIMEOUT: 0.4,
}


@dataclass(frozen=True)
class Suspicion:
    kind: SuspicionKind
    trace_id: str
    fingerprint: str
    signature: dict
    evidence: dict
    severity_hint: float

    @staticmethod
    def create(kind: SuspicionKind, trace_id: str, signature: dict, evidence: dict) -> "Suspicion":
        # The fingerprint covers only the normalized signature, never raw
        # request ids or timestamps, so equal anomalies collide across traces.
        return Suspicion(
            kind=kind,
            trace_id=trace_id,
            fingerprint=fingerprint(kind.value, signature),
            signature=signature,
            evidence=evidence,
            severity_hint=_SEVERITY[kind],
        )


@dataclass
class OracleThresholds:
    ttft_regression_factor: float = 10.0
    min_baseline_samples: int = 50
    stall_window_ms: int = 10_000
    kv_leak_grace_ms: int = 2_000
    lifecycle_tolerance_ms: int = 5


class BaselineStats:
    """Rolling TTFT quantiles over recent non-suspect executions."""

    def __init__(self, window: int = 500):
        self._samples: deque[int] = deque(maxlen=window)

    def add_report(self, report) -> None:
        for rid in sorted(report.outcomes):
            outcome = report.outcomes[rid]
            if outcome.status == "completed" and outcome.ttft_ms is not None:
                self._samples.append(outcome.ttft_ms)

    @property
    def count(self) -> int:
        return len(self._samples)

    def quantile(self, q: float) -> float:
        if not self._samples:
            raise ValueError("no baseline samples")
        data = sorted(self._samples)
        idx = min(len(data) - 1, max(0, math.ceil(q * len(data)) - 1))
        return float(data[idx])

    @property
    def p50(self) -> float:
        return self.quantile(0.50)

    @property
    def p95(self) -> float:
        return self.quantile(0.95)

    @property
    def p99(self) -> float:
        return self.quantile(0.99)


def _merge(suspicions: list[Suspicion]) -> list[Suspicion]:
    """Collapse same-fingerprint suspicions within one report, merging evidence."""
    out: dict[str, Suspicion] = {}
    for s in suspicions:
        prev = out.get(s.fingerprint)
        if prev is None:
            out[s.fingerprint] = s
            continue
        rids = sorted(set(prev.evidence.get("request_ids", [])) | set(s.evidence.get("request_ids", [])))
        merged = dict(prev.evidence)
        merged["request_ids"] = rids
        out[s.fingerprint] = Suspicion(prev.kind, prev.trace_id, prev.fingerprint, prev.signature, merged, prev.severity_hint)
    return list(out.values())


def _decade(value: float) -> int:
    return int(math.floor(math.log10(max(value, 1.0))))


# --------------------------------------------------------------------------
# Stage 1: behavioral


def behavioral_check(report, baseline: BaselineStats, thresholds: OracleThresholds) -> list[Suspicion]:
    suspicions: list[Suspicion] = []
    if report.server_crashed:
        evidence = dict(report.crash_evidence or {})
        signature = {"signature": evidence.get("signature", "connection-lost")}
        suspicions.append(Suspicion.create(SuspicionKind.CRASH, report.trace_id, signature, evidence))

    vocab = report.engine_info.get("vocab_size")
    regression_ready = baseline.count >= thresholds.min_baseline_samples and not report.schedule_degraded
    for rid in sorted(report.outcomes):
        outcome = report.outcomes[rid]
        spec = report.request_index.get(rid)
        if outcome.status == "timeout":
            suspicions.append(
                Suspicion.create(
                    SuspicionKind.TIMEOUT,
                    report.trace_id,
                    {"status": "timeout"},
                    {"request_ids": [rid], "dispatched_ms": outcome.dispatched_ms},
                )
            )
        if regression_ready and outcome.ttft_ms is not None:
            p50 = baseline.p50
            if p50 > 0 and outcome.ttft_ms >= thresholds.ttft_regression_factor * p50:
                ratio = outcome.ttft_ms / p50
                suspicions.append(
                    Suspicion.create(
                        SuspicionKind.TTFT_REGRESSION,
                        report.trace_id,
                        {"ratio_decade": _decade(ratio)},
                        {
                            "request_ids": [rid],
                            "ttft_ms": outcome.ttft_ms,
                            "dispatched_ms": outcome.dispatched_ms,
                            "baseline_p50_ms": p50,
                            "ratio": ratio,
                        },
                    )
                )
        if outcome.status == "completed":
            subtype = None
            if any(len(stream) == 0 for stream in outcome.output_tokens) or not outcome.output_tokens:
                subtype = "empty-body"
            elif spec is not None and any(len(stream) > spec.sampling.max_tokens for stream in outcome.output_tokens):
                subtype = "overflow"
            elif vocab is not None and any(t < 0 or t >= vocab for stream in outcome.output_tokens for t in stream):
                subtype = "undecodable"
            if subtype is not None:
                suspicions.append(
                    Suspicion.create(
                        SuspicionKind.CORRUPTED_OUTPUT,
                        report.trace_id,
                        {"subtype": subtype},
                        {"request_ids": [rid], "subtype": subtype},
                    )
                )

    suspicions.extend(_kv_leak_check(report, thresholds))
    return _merge(suspicions)


def _kv_leak_check(report, thresholds: OracleThresholds) -> list[Suspicion]:
    cancelled = {rid for rid, o in report.outcomes.items() if o.status in ("cancelled", "disconnected")}
    if not cancelled or not report.kv_stream_supported:
        return []
    owned: dict[str, set[int]] = {rid: set() for rid in cancelled}
    alloc_owner: dict[int, str] = {}
    for event in report.kv_events:
        if event.kind == "alloc":
            alloc_owner[event.block_id] = event.owner_request_id
            if event.owner_request_id in owned:
                owned[event.owner_request_id].add(event.block_id)
        elif event.kind in ("free", "evict"):
            alloc_owner.pop(event.block_id, None)
            for blocks in owned.values():
                blocks.discard(event.block_id)
        elif event.kind in ("prefix_hit", "reuse"):
            # Another request adopted the block: it is shared cache property
            # now, and outliving its allocator is by design, not a leak.
            if alloc_owner.get(event.block_id) not in (None, event.owner_request_id):
                for blocks in owned.values():
                    blocks.discard(event.block_id)
    out = []
    for rid in sorted(cancelled):
        leaked = owned[rid]
        if not leaked:
            continue
        outcome = report.outcomes[rid]
        end = outcome.dispatched_ms + (outcome.total_ms or 0)
        if report.wall_clock_span_ms - end < thresholds.kv_leak_grace_ms:
            continue  # still within the post-teardown grace window
        spec = report.request_index.get(rid)
        out.append(
            Suspicion.create(
                SuspicionKind.KV_LEAK,
                report.trace_id,
                {"adapter": spec.adapter if spec else "unknown"},
                {"request_ids": [rid], "leaked_blocks": sorted(leaked)},
            )
        )
    return out


def detect_stall(report, stall_window_ms: int) -> Suspicion | None:
    """A stall is a window with in-flight work, a live server, and zero token progress."""
    if report.schedule_degraded:
        return None
    progress = sorted(stamp for o in report.outcomes.values() for stamp in o.token_stamps)
    intervals = []
    for o in report.outcomes.values():
        end = o.dispatched_ms + (o.total_ms if o.total_ms is not None else 0)
        intervals.append((o.dispatched_ms, end))
    if not intervals:
        return None
    span_end = max(end for _, end in intervals)
    checkpoints = [0] + progress + [span_end]
    worst: tuple[int, int, int] | None = None
    for a, b in zip(checkpoints, checkpoints[1:]):
        gap = b - a
        if gap < stall_window_ms:
            continue
        covered = any(start <= a and end >= b for start, end in intervals)
        if covered and (worst is None or gap > worst[0]):
            worst = (gap, a, b)
    if worst is None:
        return None
    gap, a, b = worst
    return Suspicion.create(
        SuspicionKind.STALL,
        report.trace_id,
        {"gap_decade": _decade(gap)},
        {"gap_ms": gap, "window": [a, b]},
    )


def lifecycle_check(trace, report, thresholds: OracleThresholds | None = None) -> list[Suspicion]:
    tol = (thresholds or OracleThresholds()).lifecycle_tolerance_ms
    controls: dict[str, tuple[str, int]] = {}
    for event in trace.events:
        if event.kind in (EventKind.CANCEL, EventKind.DISCONNECT) and event.target not in controls:
            controls[event.target] = (event.kind.value, event.offset_ms)
    suspicions = []
    for rid in sorted(report.outcomes):
        outcome = report.outcomes[rid]
        control = controls.get(rid)
        subtype = None
        if outcome.status == "cancelled" and (control is None or control[0] != "Cancel"):
            subtype = "spurious-cancel"
        elif outcome.status == "disconnected" and (control is None or control[0] != "Disconnect"):
            subtype = "spurious-disconnect"
        elif control is not None and outcome.status == "completed" and outcome.total_ms is not None:
            end = outcome.dispatched_ms + outcome.total_ms
            if end > control[1] + tol:
                subtype = "generation-past-" + ("cancel" if control[0] == "Cancel" else "disconnect")
        if control is not None and control[0] == "Disconnect" and outcome.token_stamps:
            if max(outcome.token_stamps) > control[1] + tol:
                subtype = subtype or "post-disconnect-streaming"
        if subtype is not None:
            suspicions.append(
                Suspicion.create(
                    SuspicionKind.LIFECYCLE_VIOLATION,
                    report.trace_id,
                    {"subtype": subtype},
                    {"request_ids": [rid], "subtype": subtype},
                )
            )
    return _merge(suspicions)


# --------------------------------------------------------------------------
# Stage 3: structural forensics over the KV stream and block snapshots


def group_key(spec) -> str | None:
    """Snapshot comparability: identical prompt content and decode settings."""
    if spec.prompt_family_id is None:
        return None
    return canonical_json(
        [
            spec.prompt_family_id,
            spec.shape.prefix_len,
            spec.shape.prompt_len,
            spec.adapter,
            spec.sampling.max_tokens,
            spec.sampling.n_completions,
            spec.sampling.seed,
            spec.sampling.temperature,
        ]
    )


def extract_group_snapshots(report) -> dict[str, list]:
    """Canonical per-group block-hash sequences for the cross-run store."""
    out: dict[str, list] = {}
    for rid in sorted(report.outcomes):
        if report.outcomes[rid].status != "completed":
            continue
        spec = report.request_index.get(rid)
        if spec is None:
            continue
        key = group_key(spec)
        if key is None or rid not in report.block_snapshots:
            continue
        hashes = [entry[1] for entry in report.block_snapshots[rid]]
        out.setdefault(key, hashes)
    return out


def structural_forensics(report, corpus_seed: int = 0, prior_snapshots: dict | None = None) -> list[Suspicion]:
    suspicions: list[Suspicion] = []
    block_size = report.engine_info.get("block_size_tokens", 16)
    vocab = report.engine_info.get("vocab_size", 1024)

    # Correlate every reuse/prefix_hit with the block's most recent allocation.
    origin: dict[int, tuple[str, str]] = {}
    for event in report.kv_events:
        if event.kind == "alloc":
            origin[event.block_id] = (event.owner_request_id, event.adapter)
        elif event.kind in ("free", "evict"):
            origin.pop(event.block_id, None)
        elif event.kind in ("prefix_hit", "reuse"):
            alloc = origin.get(event.block_id)
            if alloc is not None and alloc[1] != event.adapter:
                suspicions.append(
                    Suspicion.create(
                        SuspicionKind.CROSS_ADAPTER_REUSE,
                        report.trace_id,
                        {"from_adapter": alloc[1], "to_adapter": event.adapter, "via": event.kind},
                        {"request_ids": sorted({alloc[0], event.owner_request_id}), "block_id": event.block_id},
                    )
                )

    # One content hash must never cover two different prompt spans.
    prompts: dict[str, tuple] = {}

    def prompt_of(rid: str):
        if rid not in prompts:
            spec = report.request_index.get(rid)
            prompts[rid] = prompt_for(spec, corpus_seed, vocab) if spec is not None else ()
        return prompts[rid]

    claims: dict[int, dict[tuple, list]] = {}
    for rid in sorted(report.block_snapshots):
        if rid not in report.request_index:
            continue
        prompt = prompt_of(rid)
        for index, (block_id, block_hash) in enumerate(report.block_snapshots[rid]):
            if block_hash is None:
                continue
            if (index + 1) * block_size > len(prompt):
                continue  # span reaches into decode tokens; content not comparable
            span = tuple(prompt[index * block_size : (index + 1) * block_size])
            adapter = report.request_index[rid].adapter
            claims.setdefault(block_hash, {}).setdefault((span, adapter), []).append((rid, index))
    for block_hash in sorted(claims):
        variants = claims[block_hash]
        if len(variants) > 1:
            rids = sorted({rid for claimants in variants.values() for rid, _ in claimants})
            indexes = sorted({idx for claimants in variants.values() for _, idx in claimants})
            adapters = sorted({adapter for (_, adapter) in variants})
            suspicions.append(
                Suspicion.create(
                    SuspicionKind.HASH_CONFLICT,
                    report.trace_id,
                    {"block_indexes": indexes, "adapters": adapters},
                    {"request_ids": rids, "block_hash": block_hash},
                )
            )

    # Matched groups must show identical block-hash sequences, both within a
    # report and against snapshots recorded by earlier runs.
    groups: dict[str, list[tuple[str, list]]] = {}
    for rid in sorted(report.block_snapshots):
        spec = report.request_index.get(rid)
        if spec is None or report.outcomes.get(rid) is None or report.outcomes[rid].status != "completed":
            continue
        key = group_key(spec)
        if key is None:
            continue
        groups.setdefault(key, []).append((rid, [entry[1] for entry in report.block_snapshots[rid]]))
    for key in sorted(groups):
        members = groups[key]
        spec = report.request_index[members[0][0]]
        reference_rid, reference = members[0]
        for rid, hashes in members[1:]:
            if hashes != reference:
                suspicions.append(
                    Suspicion.create(
                        SuspicionKind.SNAPSHOT_DIVERGENCE,
                        report.trace_id,
                        _snapshot_signature("intra", spec, reference, hashes),
                        {"request_ids": sorted([reference_rid, rid])},
                    )
                )
        if prior_snapshots and key in prior_snapshots and reference != prior_snapshots[key]:
            suspicions.append(
                Suspicion.create(
                    SuspicionKind.SNAPSHOT_DIVERGENCE,
                    report.trace_id,
                    _snapshot_signature("cross", spec, prior_snapshots[key], reference),
                    {"request_ids": [reference_rid]},
                )
            )
    return _merge(suspicions)


def _snapshot_signature(scope: str, spec, expected: list, got: list) -> dict:
    diverge = next((i for i, (a, b) in enumerate(zip(expected, got)) if a != b), min(len(expected), len(got)))
    return {
        "scope": scope,
        "shape": [spec.shape.prefix_len, spec.shape.prompt_len],
        "adapter": spec.adapter,
        "diverge_index": diverge,
    }


def full_sweep(
    trace,
    report,
    baseline: BaselineStats,
    thresholds: OracleThresholds | None = None,
    corpus_seed: int = 0,
    prior_snapshots: dict | None = None,
) -> list[Suspicion]:
    """Every oracle over one report, deduplicated by fingerprint."""
    thresholds = thresholds or OracleThresholds()
    suspicions = behavioral_check(report, baseline, thresholds)
    stall = detect_stall(report, thresholds.stall_window_ms)
    if stall is not None:
        suspicions.append(stall)
    suspicions.extend(lifecycle_check(trace, report, thresholds))
    suspicions.extend(structural_forensics(report, corpus_seed, prior_snapshots))
    unique: dict[str, Suspicion] = {}
    for susp in suspicions:
        unique.setdefault(susp.fingerprint, susp)
    return list(unique.values())
