"""Performance monitoring: per-provider analyzers and the global aggregator.

Local analyzers sample job progress and confirm SLA violations over a
sliding window of pairwise throughputs; the hub keeps the integrated view,
handles provider withdrawals, and forwards each actionable report to the
supervisory controller exactly once.
"""

from __future__ import annotations

import enum
from collections import deque
from dataclasses import dataclass
from typing import Any, Iterable, Protocol, Sequence

from .broker import ResourceBroker, UnknownProvider


class MonitorError(Exception):
    pass


class UnknownJob(MonitorError):
    pass


class InsufficientSamples(MonitorError):
    pass


class ReportKind(enum.Enum):
    NONE = "none"
    THROUGHPUT_VIOLATION = "throughput_violation"
    RESOURCE_WITHDRAWN = "resource_withdrawn"


@dataclass(frozen=True)
class ServiceLevelAgreement:
    """Throughput floor (iterations/second) with a k-sample confirmation window."""

    min_throughput: float
    window_k: int = 3
    sample_period_ms: int = 1000

    def __post_init__(self):
        if self.min_throughput <= 0:
            raise ValueError("min_throughput must be positive")
        if self.window_k < 1:
            raise ValueError("window_k must be >= 1")
        if self.sample_period_ms <= 0:
            raise ValueError("sample_period_ms must be positive")

    def to_dict(self) -> dict:
        return {"min_throughput": self.min_throughput, "window_k": self.window_k,
                "sample_period_ms": self.sample_period_ms}

    @classmethod
    def from_dict(cls, obj: dict) -> "ServiceLevelAgreement":
        return cls(min_throughput=float(obj["min_throughput"]),
                   window_k=int(obj.get("window_k", 3)),
                   sample_period_ms=int(obj.get("sample_period_ms", 1000)))


@dataclass(frozen=True)
class MonitorSample:
    provider_id: str
    job_id: str
    timestamp_ms: Any  # int in wall mode, exact rational in sim mode
    iterations_done: int
    counters: tuple[tuple[str, int], ...] = ()

    @classmethod
    def make(cls, provider_id: str, job_id: str, timestamp_ms, iterations_done: int,
             counters: dict[str, int] | None = None) -> "MonitorSample":
        items = tuple(sorted((counters or {}).items()))
        return cls(provider_id, job_id, timestamp_ms, iterations_done, items)

    def counter(self, name: str, default: int = 0) -> int:
        for key, value in self.counters:
            if key == name:
                return value
        return default


@dataclass(frozen=True)
class WithdrawalEvent:
    provider_id: str
    at_ms: Any


@dataclass(frozen=True)
class PerformanceReport:
    kind: ReportKind
    provider_id: str
    job_id: str
    evidence: tuple = ()
    emitted_at: Any = 0

    def to_dict(self) -> dict:
        if self.kind is ReportKind.RESOURCE_WITHDRAWN:
            evidence = [{"withdrawn": e.provider_id, "at_ms": float(e.at_ms)}
                        for e in self.evidence]
        else:
            evidence = [{"timestamp_ms": float(s.timestamp_ms),
                         "iterations_done": s.iterations_done} for s in self.evidence]
        return {"kind": self.kind.value, "provider_id": self.provider_id,
                "job_id": self.job_id, "evidence": evidence,
                "emitted_at": float(self.emitted_at)}

    @classmethod
    def from_dict(cls, obj: dict) -> "PerformanceReport":
        kind = ReportKind(obj["kind"])
        if kind is ReportKind.RESOURCE_WITHDRAWN:
            evidence = tuple(WithdrawalEvent(e["withdrawn"], e["at_ms"])
                             for e in obj.get("evidence", []))
        else:
            evidence = tuple(MonitorSample.make(obj["provider_id"], obj["job_id"],
                                                e["timestamp_ms"], int(e["iterations_done"]))
                             for e in obj.get("evidence", []))
        return cls(kind=kind, provider_id=obj["provider_id"], job_id=obj["job_id"],
                   evidence=evidence, emitted_at=obj.get("emitted_at", 0))


class ProgressSource(Protocol):
    def progress(self, job_id: str) -> tuple[int, dict[str, int]]: ...


def sample(provider_id: str, job_id: str, source: ProgressSource, now_ms) -> MonitorSample:
    """Snapshot a job's cumulative progress at the current clock."""
    iterations_done, counters = source.progress(job_id)
    return MonitorSample.make(provider_id, job_id, now_ms, iterations_done, counters)


def pair_throughputs(samples: Sequence[MonitorSample]) -> list[float]:
    """Iterations/second over each adjacent sample pair."""
    rates = []
    for a, b in zip(samples, samples[1:]):
        dt_ms = b.timestamp_ms - a.timestamp_ms
        if dt_ms <= 0:
            raise MonitorError(f"non-increasing timestamps for job {b.job_id!r}")
        rates.append((b.iterations_done - a.iterations_done) / (dt_ms / 1000))
    return rates


def analyze_local(samples: Sequence[MonitorSample], sla: ServiceLevelAgreement) -> PerformanceReport:
    """Confirm a throughput violation over the most recent window.

    A violation requires the last window_k pairwise throughputs to each fall
    below the SLA floor; the report's evidence is the window_k samples that
    terminate those pairs.
    """
    if len(samples) < 2:
        raise InsufficientSamples(f"need at least 2 samples, got {len(samples)}")
    last = samples[-1]
    rates = pair_throughputs(samples)
    k = sla.window_k
    if len(rates) >= k and all(r < sla.min_throughput for r in rates[-k:]):
        return PerformanceReport(kind=ReportKind.THROUGHPUT_VIOLATION,
                                 provider_id=last.provider_id, job_id=last.job_id,
                                 evidence=tuple(samples[-k:]), emitted_at=last.timestamp_ms)
    return PerformanceReport(kind=ReportKind.NONE, provider_id=last.provider_id,
                             job_id=last.job_id, emitted_at=last.timestamp_ms)


class LocalAnalyzer:
    """Per-provider analysis agent: one sliding window per local job."""

    def __init__(self, provider_id: str, max_window: int = 64):
        self.provider_id = provider_id
        self.max_window = max_window
        self._windows: dict[str, deque[MonitorSample]] = {}

    def observe(self, s: MonitorSample, sla: ServiceLevelAgreement) -> PerformanceReport:
        window = self._windows.setdefault(s.job_id, deque(maxlen=self.max_window))
        window.append(s)
        if len(window) < 2:
            return PerformanceReport(kind=ReportKind.NONE, provider_id=self.provider_id,
                                     job_id=s.job_id, emitted_at=s.timestamp_ms)
        report = analyze_local(list(window), sla)
        if report.kind is ReportKind.THROUGHPUT_VIOLATION:
            # restart confirmation so one slow stretch yields one report per window
            window.clear()
        return report

    def reset(self, job_id: str) -> None:
        """Drop the window, e.g. across a migration pause."""
        self._windows.pop(job_id, None)

    def window(self, job_id: str) -> list[MonitorSample]:
        return list(self._windows.get(job_id, ()))


def _report_key(report: PerformanceReport) -> tuple:
    return (report.kind.value, report.provider_id, report.job_id, report.emitted_at,
            report.evidence)


class Aggregator:
    """Global analyzer view: latest non-none report per job, actionable
    reports forwarded exactly once each."""

    def __init__(self):
        self.latest: dict[str, PerformanceReport] = {}
        self._forwarded: set[tuple] = set()

    def submit(self, report: PerformanceReport) -> list[PerformanceReport]:
        if report.kind is ReportKind.NONE:
            return []
        self.latest[report.job_id] = report
        key = _report_key(report)
        if key in self._forwarded:
            return []
        self._forwarded.add(key)
        return [report]

    def consume(self, reports: Iterable[PerformanceReport]) -> list[PerformanceReport]:
        forwarded = []
        for report in reports:
            forwarded.extend(self.submit(report))
        return forwarded


class MonitorHub:
    """Global analyzer: tracks job placement, turns withdrawals into reports,
    and aggregates the per-provider report streams."""

    def __init__(self, broker: ResourceBroker):
        self.broker = broker
        self.aggregator = Aggregator()
        self._placement: dict[str, str] = {}

    def track(self, job_id: str, provider_id: str) -> None:
        self._placement[job_id] = provider_id

    def untrack(self, job_id: str) -> None:
        self._placement.pop(job_id, None)

    def jobs_on(self, provider_id: str) -> list[str]:
        return sorted(j for j, p in self._placement.items() if p == provider_id)

    def note_withdrawal(self, provider_id: str, now_ms) -> list[PerformanceReport]:
        """Mark the provider unavailable and report every job running on it."""
        if self.broker.get(provider_id) is None:
            raise UnknownProvider(f"provider {provider_id!r} is not registered")
        self.broker.set_available(provider_id, False)
        event = WithdrawalEvent(provider_id=provider_id, at_ms=now_ms)
        return [PerformanceReport(kind=ReportKind.RESOURCE_WITHDRAWN, provider_id=provider_id,
                                  job_id=job_id, evidence=(event,), emitted_at=now_ms)
                for job_id in self.jobs_on(provider_id)]

    def submit(self, report: PerformanceReport) -> list[PerformanceReport]:
        return self.aggregator.submit(report)
