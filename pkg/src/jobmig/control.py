"""Job control: the supervisory agent, per-job subordinate agents, and the
local tuning hook.

The supervisory agent deploys jobs through the broker, keeps the per-job
candidate provider list, and turns performance reports into decisions:
continue, reschedule to another provider, or renegotiate the SLA. Subordinate
agents carry one job each; a migration moves the subordinate (and the job's
checkpointed state) to the new provider.
"""

from __future__ import annotations

import enum
import json
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Any, Protocol, Sequence

from .broker import (
    JobRequirementList,
    MatchResult,
    NoMatch,
    ResourceBroker,
    match_job,
    select_provider,
)
from .monitor import (
    MonitorHub,
    MonitorSample,
    PerformanceReport,
    ReportKind,
    ServiceLevelAgreement,
    UnknownJob,
)


class ControlError(Exception):
    pass


class InvalidTarget(ControlError):
    pass


class SubmitTimeout(ControlError):
    pass


class TransferFailed(ControlError):
    """Migration transfer failed; the job remains intact on the source."""


class JobStatus(enum.Enum):
    PENDING = "pending"
    RUNNING = "running"
    MIGRATING = "migrating"
    DONE = "done"
    FAILED = "failed"


@dataclass
class MigrationRecord:
    """One migration's accounting row: total = source + target + overhead."""

    job_id: str
    from_provider: str
    to_provider: str
    iterations_before: int
    time_on_source_ms: Any
    time_on_target_ms: Any = None
    overhead_ms: Any = 0
    total_ms: Any = None

    def finalize(self, time_on_target_ms) -> None:
        self.time_on_target_ms = time_on_target_ms
        self.total_ms = self.time_on_source_ms + time_on_target_ms + self.overhead_ms

    def check_identity(self) -> None:
        if self.total_ms != self.time_on_source_ms + self.time_on_target_ms + self.overhead_ms:
            raise ControlError(f"accounting identity violated for job {self.job_id!r}")


@dataclass
class SubordinateAgent:
    """Mobile agent carrying one job; relocates with it on migration."""

    job_id: str
    location: str
    carried_iterations: int = 0


@dataclass
class JobEntry:
    jrl: JobRequirementList
    sla: ServiceLevelAgreement
    current_provider: str
    candidates: MatchResult
    status: JobStatus
    subordinate: SubordinateAgent
    excluded: set[str] = field(default_factory=set)
    migrations: list[MigrationRecord] = field(default_factory=list)
    digest: int | None = None
    iterations_total: int | None = None


class DecisionAction(enum.Enum):
    CONTINUE = "continue"
    RESCHEDULE = "reschedule"
    RENEGOTIATE_SLA = "renegotiate_sla"
    FAIL = "fail"


@dataclass(frozen=True)
class Decision:
    action: DecisionAction
    target: str | None = None
    new_sla: ServiceLevelAgreement | None = None
    reason: str = ""


@dataclass(frozen=True)
class PolicyConfig:
    """Reschedule-vs-renegotiate policy, v1: move only to a strictly
    better-scored provider, otherwise relax the floor."""

    renegotiate_enabled: bool = True
    renegotiate_factor: float = 0.8


class Transport(Protocol):
    def submit(self, provider_id: str, job_spec: dict) -> None: ...
    def migrate(self, source_id: str, job_id: str, target_id: str) -> "MigrationOutcome": ...


@dataclass(frozen=True)
class MigrationOutcome:
    """What the source side reports once the transfer is acknowledged."""

    iterations_before: int
    time_on_source_ms: Any
    overhead_ms: Any


class DecisionLog:
    """Append-only JSON-lines record of every control decision."""

    def __init__(self, path: str | Path | None):
        self.path = Path(path) if path is not None else None
        if self.path is not None:
            self.path.parent.mkdir(parents=True, exist_ok=True)

    def append(self, ts, job_id: str, report_kind: str, decision: str, detail: str) -> None:
        if self.path is None:
            return
        entry = {"ts": float(ts), "job_id": job_id, "report_kind": report_kind,
                 "decision": decision, "detail": detail}
        with self.path.open("a") as fh:
            fh.write(json.dumps(entry, sort_keys=True) + "\n")


@dataclass(frozen=True)
class TuningAction:
    kind: str  # "set_checkpoint_interval" | "none"
    interval: int | None = None


CHECKPOINT_INTERVAL_CAP = 128
TUNE_RAISE_ABOVE = 0.05
TUNE_LOWER_BELOW = 0.01


def tune_decision(samples: Sequence[MonitorSample], current_interval: int) -> TuningAction:
    """Adapt the checkpoint interval to the measured capture overhead.

    The overhead fraction is cumulative checkpoint time over elapsed time
    across the sample window; above 5% the interval doubles (capped at 128),
    below 1% it halves (floored at 1).
    """
    if len(samples) < 2:
        return TuningAction("none")
    first, last = samples[0], samples[-1]
    elapsed_ms = last.timestamp_ms - first.timestamp_ms
    if elapsed_ms <= 0:
        return TuningAction("none")
    ckpt_ms = (last.counter("checkpoint_us") - first.counter("checkpoint_us")) / 1000
    fraction = ckpt_ms / elapsed_ms
    if fraction > TUNE_RAISE_ABOVE and current_interval < CHECKPOINT_INTERVAL_CAP:
        return TuningAction("set_checkpoint_interval",
                            min(current_interval * 2, CHECKPOINT_INTERVAL_CAP))
    if fraction < TUNE_LOWER_BELOW and current_interval > 1:
        return TuningAction("set_checkpoint_interval", max(current_interval // 2, 1))
    return TuningAction("none")


class TuningAgent:
    """Local tuner: tracks the checkpoint interval of jobs on one provider."""

    def __init__(self):
        self._intervals: dict[str, int] = {}

    def register(self, job_id: str, interval: int) -> None:
        self._intervals[job_id] = interval

    def local_tune(self, job_id: str, samples: Sequence[MonitorSample]) -> TuningAction:
        if job_id not in self._intervals:
            raise UnknownJob(f"job {job_id!r} is not tuned here")
        action = tune_decision(samples, self._intervals[job_id])
        if action.kind == "set_checkpoint_interval":
            self._intervals[job_id] = action.interval
        return action


class SupervisoryAgent:
    """The one global control agent: deploys jobs, reacts to reports,
    orchestrates migrations through the transport."""

    def __init__(self, broker: ResourceBroker, hub: MonitorHub, transport: Transport,
                 policy: PolicyConfig | None = None, clock=None,
                 decision_log: DecisionLog | None = None):
        self.broker = broker
        self.hub = hub
        self.transport = transport
        self.policy = policy or PolicyConfig()
        self.clock = clock or (lambda: 0)
        self.log = decision_log or DecisionLog(None)
        self.jobs: dict[str, JobEntry] = {}

    # -- deployment ---------------------------------------------------------

    def deploy(self, jrl: JobRequirementList, task_kind: str, params: dict,
               start_on: str | None = None, checkpoint_interval: int = 16,
               reply_to: str | None = None) -> str:
        """Match, pick a provider (or honor a forced placement), and submit."""
        if jrl.job_id in self.jobs:
            raise ControlError(f"job {jrl.job_id!r} already submitted")
        if jrl.sla is None:
            raise ControlError(f"job {jrl.job_id!r} has no SLA")
        result = self.broker.match(jrl)
        if start_on is not None:
            if start_on not in result.provider_ids:
                raise NoMatch(f"forced provider {start_on!r} is not eligible for {jrl.job_id!r}")
            chosen = start_on
        else:
            chosen = select_provider(result)
        spec = {"job_id": jrl.job_id, "task_kind": task_kind, "params": params,
                "sla": jrl.sla.to_dict(), "checkpoint_interval": checkpoint_interval,
                "reply_to": reply_to}
        self.transport.submit(chosen, spec)
        self.jobs[jrl.job_id] = JobEntry(
            jrl=jrl, sla=jrl.sla, current_provider=chosen, candidates=result,
            status=JobStatus.RUNNING,
            subordinate=SubordinateAgent(job_id=jrl.job_id, location=chosen))
        self.hub.track(jrl.job_id, chosen)
        self.log.append(self.clock(), jrl.job_id, "deploy", "submit",
                        f"provider={chosen} candidates={list(result.provider_ids)}")
        return jrl.job_id

    # -- report handling ----------------------------------------------------

    def decide(self, report: PerformanceReport) -> Decision:
        """Pure decision function of (report, state, broker snapshot, policy)."""
        entry = self.jobs.get(report.job_id)
        if entry is None:
            raise UnknownJob(f"report for untracked job {report.job_id!r}")
        if report.kind is ReportKind.NONE:
            return Decision(DecisionAction.CONTINUE, reason="no problem detected")

        rst = self.broker.build_rst()
        if report.kind is ReportKind.RESOURCE_WITHDRAWN:
            exclude = entry.excluded | {report.provider_id}
            for pid in entry.candidates.provider_ids:
                if pid in exclude:
                    continue
                t = rst.get(pid)
                if t is not None and t.available:
                    return Decision(DecisionAction.RESCHEDULE, target=pid,
                                    reason=f"provider {report.provider_id} withdrew")
            return Decision(DecisionAction.FAIL,
                            reason="no alternative provider after withdrawal")

        # throughput violation: move only if somewhere strictly better exists
        try:
            fresh = match_job(entry.jrl, rst)
        except NoMatch:
            fresh = None
        current_score = entry.candidates.score_of(entry.current_provider)
        if fresh is not None:
            for pid, pscore in fresh.ranked:
                if pid in entry.excluded or pid == entry.current_provider:
                    continue
                if current_score is None or pscore > current_score:
                    return Decision(DecisionAction.RESCHEDULE, target=pid,
                                    reason="strictly better provider available")
        if self.policy.renegotiate_enabled:
            new_sla = replace(entry.sla,
                              min_throughput=entry.sla.min_throughput * self.policy.renegotiate_factor)
            return Decision(DecisionAction.RENEGOTIATE_SLA, new_sla=new_sla,
                            reason="no better provider; relaxing throughput floor")
        return Decision(DecisionAction.FAIL, reason="violation with renegotiation disabled")

    def on_report(self, report: PerformanceReport) -> Decision:
        """Decide and apply: migrate, record the new SLA, or fail the job."""
        decision = self.decide(report)
        entry = self.jobs[report.job_id]
        self.log.append(self.clock(), report.job_id, report.kind.value,
                        decision.action.value,
                        decision.reason + (f" target={decision.target}" if decision.target else ""))
        if decision.action is DecisionAction.RESCHEDULE:
            self.migrate(report.job_id, decision.target)
        elif decision.action is DecisionAction.RENEGOTIATE_SLA:
            entry.sla = decision.new_sla
            update = getattr(self.transport, "update_sla", None)
            if update is not None:
                update(entry.current_provider, report.job_id, decision.new_sla)
        elif decision.action is DecisionAction.FAIL:
            entry.status = JobStatus.FAILED
        return decision

    # -- migration ----------------------------------------------------------

    def migrate(self, job_id: str, to_provider: str) -> MigrationRecord:
        """Quiesce, transfer, resume on the target, tombstone the source.

        All-or-nothing from the job's perspective: on TransferFailed the job
        keeps running on the source provider.
        """
        entry = self.jobs.get(job_id)
        if entry is None:
            raise UnknownJob(f"cannot migrate untracked job {job_id!r}")
        if entry.status is not JobStatus.RUNNING:
            raise ControlError(f"job {job_id!r} is {entry.status.value}, not running")
        source = entry.current_provider
        if to_provider == source:
            raise InvalidTarget("migration target equals the current provider")
        template = self.broker.get(to_provider)
        if template is None or not template.available:
            raise InvalidTarget(f"provider {to_provider!r} is not available")
        if template.cpu_mhz < entry.jrl.min_cpu_mhz or template.memory_mb < entry.jrl.min_memory_mb \
                or not template.arch_tags >= entry.jrl.arch_tags:
            raise InvalidTarget(f"provider {to_provider!r} does not satisfy the job requirements")

        entry.status = JobStatus.MIGRATING
        try:
            outcome = self.transport.migrate(source, job_id, to_provider)
        except TransferFailed:
            entry.status = JobStatus.RUNNING
            raise
        entry.status = JobStatus.RUNNING
        entry.current_provider = to_provider
        entry.excluded.add(source)
        entry.subordinate.location = to_provider
        entry.subordinate.carried_iterations = outcome.iterations_before
        self.hub.track(job_id, to_provider)
        record = MigrationRecord(job_id=job_id, from_provider=source, to_provider=to_provider,
                                 iterations_before=outcome.iterations_before,
                                 time_on_source_ms=outcome.time_on_source_ms,
                                 overhead_ms=outcome.overhead_ms)
        entry.migrations.append(record)
        self.log.append(self.clock(), job_id, "migrate", "transfer",
                        f"{source}->{to_provider} after {outcome.iterations_before} iterations")
        return record

    # -- completion ---------------------------------------------------------

    def complete(self, job_id: str, digest: int, exec_ms, iterations: int) -> None:
        entry = self.jobs.get(job_id)
        if entry is None:
            raise UnknownJob(f"completion for untracked job {job_id!r}")
        entry.status = JobStatus.DONE
        entry.digest = digest
        entry.iterations_total = iterations
        if entry.migrations and entry.migrations[-1].time_on_target_ms is None:
            entry.migrations[-1].finalize(exec_ms)
        self.hub.untrack(job_id)
        self.log.append(self.clock(), job_id, "result", "done",
                        f"digest={digest:016x} iterations={iterations}")
