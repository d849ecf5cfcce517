"""Resource-provider node: wire protocol, execution loop, and TCP daemon.

A node accepts jobs, runs their step/checkpoint/sample loop, services
migration transfers, and can announce withdrawal of its services. The same
runtime drives both modes: in sim mode a shared virtual clock advances by
the modeled per-iteration cost, in wall mode a real daemon executes jobs in
threads and talks length-prefixed frames over TCP.

Frame layout: 4-byte big-endian length, 1-byte message type, payload; the
length covers the type byte plus the payload. Control payloads are JSON;
CHECKPOINT_TRANSFER carries a raw checkpoint record bundle.
"""

from __future__ import annotations

import argparse
import json
import signal
import socket
import struct
import sys
import tempfile
import threading
import time
from dataclasses import dataclass, field
from fractions import Fraction
from pathlib import Path
from typing import Any, Callable

from . import checkpoint as ckpt
from . import workload
from .broker import ResourceSpecTemplate, template_to_dict
from .monitor import (
    LocalAnalyzer,
    ReportKind,
    ServiceLevelAgreement,
    UnknownJob,
    sample as take_sample,
)
from .control import TransferFailed, TuningAgent

MSG_REGISTER_PROVIDER = 0x01
MSG_JOB_SUBMIT = 0x02
MSG_CHECKPOINT_TRANSFER = 0x03
MSG_MIGRATE_REQUEST = 0x04
MSG_MONITOR_REPORT = 0x05
MSG_WITHDRAW_NOTICE = 0x06
MSG_RESULT_RETURN = 0x07
MSG_ACK = 0x08
MSG_ERROR = 0x09

MSG_NAMES = {
    MSG_REGISTER_PROVIDER: "REGISTER_PROVIDER",
    MSG_JOB_SUBMIT: "JOB_SUBMIT",
    MSG_CHECKPOINT_TRANSFER: "CHECKPOINT_TRANSFER",
    MSG_MIGRATE_REQUEST: "MIGRATE_REQUEST",
    MSG_MONITOR_REPORT: "MONITOR_REPORT",
    MSG_WITHDRAW_NOTICE: "WITHDRAW_NOTICE",
    MSG_RESULT_RETURN: "RESULT_RETURN",
    MSG_ACK: "ACK",
    MSG_ERROR: "ERROR",
}

MAX_PAYLOAD = 16 * 1024 * 1024


class NodeError(Exception):
    pass


class FrameError(NodeError):
    pass


class ConnectionClosed(NodeError):
    pass


class BindFailure(NodeError):
    pass


class DuplicateJob(NodeError):
    pass


class MalformedPayload(NodeError):
    pass


class UnsupportedMessage(NodeError):
    pass


class InvalidJobState(NodeError):
    pass


# -- framing -----------------------------------------------------------------

def encode_frame(msg_type: int, payload: bytes) -> bytes:
    if not 0 <= msg_type <= 0xFF:
        raise FrameError(f"message type {msg_type} out of range")
    if len(payload) > MAX_PAYLOAD:
        raise FrameError(f"payload of {len(payload)} bytes exceeds the 16 MiB cap")
    return struct.pack(">IB", len(payload) + 1, msg_type) + payload


def decode_frame(data: bytes) -> tuple[int, bytes]:
    if len(data) < 5:
        raise FrameError("frame shorter than its fixed header")
    (length, msg_type) = struct.unpack(">IB", data[:5])
    if length != len(data) - 4:
        raise FrameError(f"frame length {length} does not match {len(data) - 4} present bytes")
    if length - 1 > MAX_PAYLOAD:
        raise FrameError("frame payload exceeds the 16 MiB cap")
    return msg_type, data[5:]


def _recv_exact(sock: socket.socket, n: int) -> bytes:
    chunks = []
    got = 0
    while got < n:
        piece = sock.recv(n - got)
        if not piece:
            raise ConnectionClosed("peer closed the connection")
        chunks.append(piece)
        got += len(piece)
    return b"".join(chunks)


def send_frame(sock: socket.socket, msg_type: int, payload: bytes) -> None:
    sock.sendall(encode_frame(msg_type, payload))


def recv_frame(sock: socket.socket) -> tuple[int, bytes]:
    header = _recv_exact(sock, 4)
    (length,) = struct.unpack(">I", header)
    if length < 1:
        raise FrameError("frame length must cover the type byte")
    if length - 1 > MAX_PAYLOAD:
        raise FrameError("frame payload exceeds the 16 MiB cap")
    body = _recv_exact(sock, length)
    return body[0], body[1:]


def parse_hostport(addr: str) -> tuple[str, int]:
    host, _, port = addr.rpartition(":")
    if not host or not port.isdigit():
        raise ValueError(f"bad host:port address {addr!r}")
    return host, int(port)


def request(addr: str, msg_type: int, payload: bytes, timeout: float = 10.0) -> tuple[int, bytes]:
    """One round trip: connect, send a frame, read the reply."""
    host, port = parse_hostport(addr)
    with socket.create_connection((host, port), timeout=timeout) as sock:
        sock.settimeout(timeout)
        send_frame(sock, msg_type, payload)
        return recv_frame(sock)


def json_payload(obj: dict) -> bytes:
    return json.dumps(obj, sort_keys=True).encode("utf-8")


def parse_json(payload: bytes) -> dict:
    try:
        obj = json.loads(payload.decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise MalformedPayload(f"payload is not valid JSON: {exc}") from exc
    if not isinstance(obj, dict):
        raise MalformedPayload("payload must be a JSON object")
    return obj


# -- clocks -------------------------------------------------------------------

class WallClock:
    """Monotonic milliseconds since construction."""

    def __init__(self):
        self._t0 = time.monotonic_ns()

    def now_ms(self) -> int:
        return (time.monotonic_ns() - self._t0) // 1_000_000


class VirtualClock:
    """Deterministic clock advanced only by modeled costs."""

    def __init__(self):
        self._now = Fraction(0)
        self._lock = threading.Lock()

    def now_ms(self) -> Fraction:
        with self._lock:
            return self._now

    def advance(self, delta_ms) -> Fraction:
        delta = Fraction(delta_ms)
        if delta < 0:
            raise ValueError("virtual time cannot go backwards")
        with self._lock:
            self._now += delta
            return self._now


# -- job execution -------------------------------------------------------------

ST_RUNNING = "running"
ST_QUIESCED = "quiesced"
ST_TOMBSTONED = "tombstoned"
ST_DONE = "done"
ST_FAILED = "failed"


@dataclass
class JobExecution:
    job_id: str
    task: workload.SortTask
    sla: ServiceLevelAgreement | None
    checkpoint_interval: int
    reply_to: str | None
    status: str = ST_RUNNING
    seq_next: int = 0
    records_written: int = 0
    since_checkpoint: int = 0
    lineage: list[ckpt.CheckpointRecord] = field(default_factory=list)
    last_captured: ckpt.TaskState | None = None
    exec_ms: Any = 0
    checkpoint_us: int = 0
    next_sample_ms: Any = None
    quiesce_requested: bool = False
    # wall-mode coordination between the exec thread and the migrate handler
    quiesced_evt: threading.Event = field(default_factory=threading.Event)
    proceed_evt: threading.Event = field(default_factory=threading.Event)


class NodeRuntime:
    """Provider-side execution engine, independent of the transport."""

    def __init__(self, provider_id: str, clock, store_dir: str | Path, mode: str = "wall",
                 per_iteration_cost_ms: Fraction | None = None,
                 speed_factor: Fraction = Fraction(1),
                 withdraw_at: int | None = None, withdraw_at_ms=None,
                 full_every: int = 16, tune_enabled: bool = False,
                 on_step: Callable[[str, str, int], None] | None = None):
        if mode not in ("sim", "wall"):
            raise ValueError(f"unknown mode {mode!r}")
        if mode == "sim" and per_iteration_cost_ms is None:
            raise ValueError("sim mode needs a per-iteration cost")
        if withdraw_at is not None and withdraw_at < 1:
            raise ValueError("withdraw_at must be >= 1")
        self.provider_id = provider_id
        self.clock = clock
        self.mode = mode
        self.cost_ms = Fraction(per_iteration_cost_ms) if per_iteration_cost_ms is not None else None
        self.speed_factor = Fraction(speed_factor)
        self.withdraw_at = withdraw_at
        self.withdraw_at_ms = withdraw_at_ms
        self.full_every = full_every
        self.tune_enabled = tune_enabled
        self.on_step = on_step
        self.store = ckpt.CheckpointStore(store_dir)
        self.analyzer = LocalAnalyzer(provider_id)
        self.tuner = TuningAgent()
        self.jobs: dict[str, JobExecution] = {}
        self._withdrawn = False
        self._lock = threading.RLock()

    # -- job admission ------------------------------------------------------

    def job(self, job_id: str) -> JobExecution:
        try:
            return self.jobs[job_id]
        except KeyError:
            raise UnknownJob(f"job {job_id!r} is not on provider {self.provider_id!r}") from None

    def submit_job(self, job_id: str, task_kind: str, params: dict,
                   sla: ServiceLevelAgreement | None = None, checkpoint_interval: int = 16,
                   reply_to: str | None = None) -> dict:
        if not job_id:
            raise MalformedPayload("job_id must be non-empty")
        if checkpoint_interval < 1:
            raise MalformedPayload("checkpoint_interval must be >= 1")
        task = workload.create_task(job_id, task_kind, params)
        with self._lock:
            if job_id in self.jobs:
                raise DuplicateJob(f"job {job_id!r} already known to {self.provider_id!r}")
            entry = JobExecution(job_id=job_id, task=task, sla=sla,
                                 checkpoint_interval=checkpoint_interval, reply_to=reply_to)
            self.jobs[job_id] = entry
        self._init_execution(entry)
        return {"ok": True, "job_id": job_id, "provider_id": self.provider_id}

    def resume_from_bundle(self, data: bytes) -> dict:
        """Accept a CHECKPOINT_TRANSFER bundle: full record plus optional
        incrementals. The node is left unchanged on any decode failure."""
        t0 = time.perf_counter_ns()
        records = ckpt.decode_bundle(data)
        if records[0].kind != ckpt.KIND_FULL:
            raise ckpt.LineageBroken("transfer bundle must start with a full record")
        state = ckpt.compose(records[0], records[1:])
        task = workload.from_state(state)
        with self._lock:
            if state.job_id in self.jobs:
                raise DuplicateJob(f"job {state.job_id!r} already active on {self.provider_id!r}")
            entry = JobExecution(job_id=state.job_id, task=task, sla=None,
                                 checkpoint_interval=16, reply_to=None,
                                 seq_next=records[-1].seq + 1)
            self.jobs[state.job_id] = entry
        self._init_execution(entry)
        restore_ms = (time.perf_counter_ns() - t0) / 1e6
        return {"ok": True, "job_id": state.job_id, "provider_id": self.provider_id,
                "resumed_at_iteration": task.iterations_done, "restore_ms": restore_ms}

    def configure_resumed_job(self, job_id: str, sla: ServiceLevelAgreement | None = None,
                              checkpoint_interval: int | None = None,
                              reply_to: str | None = None) -> None:
        entry = self.job(job_id)
        if sla is not None:
            entry.sla = sla
            entry.next_sample_ms = self.clock.now_ms() + sla.sample_period_ms
        if checkpoint_interval is not None:
            entry.checkpoint_interval = checkpoint_interval
        if reply_to is not None:
            entry.reply_to = reply_to

    def set_sla(self, job_id: str, sla: ServiceLevelAgreement) -> None:
        self.job(job_id).sla = sla

    def _init_execution(self, entry: JobExecution) -> None:
        # initial full snapshot persists before any step runs
        self._capture(entry)
        if entry.sla is not None:
            entry.next_sample_ms = self.clock.now_ms() + entry.sla.sample_period_ms
        self.tuner.register(entry.job_id, entry.checkpoint_interval)

    # -- progress source -----------------------------------------------------

    def progress(self, job_id: str) -> tuple[int, dict[str, int]]:
        entry = self.job(job_id)
        counters = {"iterations": entry.task.iterations_done,
                    "checkpoint_us": entry.checkpoint_us}
        if self.mode == "wall":
            counters["elapsed_ms"] = int(self.clock.now_ms())
        return entry.task.iterations_done, counters

    # -- checkpoint cadence ----------------------------------------------------

    def _capture(self, entry: JobExecution, force_incremental: bool = False) -> ckpt.CheckpointRecord:
        t0 = time.perf_counter_ns()
        state = entry.task.state
        if entry.records_written == 0 or (
                not force_incremental and entry.records_written % self.full_every == 0):
            record = ckpt.capture_full(state, entry.seq_next)
            entry.lineage = [record]
        else:
            record = ckpt.capture_incremental(state, entry.last_captured, entry.seq_next)
            entry.lineage.append(record)
        self.store.append(record)
        entry.last_captured = state.copy()
        entry.seq_next += 1
        entry.records_written += 1
        entry.since_checkpoint = 0
        entry.checkpoint_us += (time.perf_counter_ns() - t0) // 1000
        return record

    # -- the execution loop ----------------------------------------------------

    def run_iteration(self, job_id: str) -> list[tuple[str, Any]]:
        """One yield-point-to-yield-point unit of work; returns outbound messages."""
        entry = self.job(job_id)
        if entry.status in (ST_TOMBSTONED, ST_DONE, ST_FAILED):
            raise InvalidJobState(f"job {job_id!r} is {entry.status} and cannot step")
        if entry.quiesce_requested:
            entry.status = ST_QUIESCED
            entry.quiesced_evt.set()
            return []
        if entry.task.done:  # a transferred state may already be complete
            return [self._complete(entry)]

        msgs: list[tuple[str, Any]] = []
        if self.mode == "sim":
            entry.task.step()
            cost = self.cost_ms / self.speed_factor
            self.clock.advance(cost)
            entry.exec_ms = entry.exec_ms + cost
        else:
            t0 = time.perf_counter_ns()
            entry.task.step()
            entry.exec_ms = entry.exec_ms + (time.perf_counter_ns() - t0) / 1e6
        iterations = entry.task.iterations_done
        if self.on_step is not None:
            self.on_step(self.provider_id, job_id, iterations - 1)

        entry.since_checkpoint += 1
        if not entry.task.done and entry.since_checkpoint >= entry.checkpoint_interval:
            self._capture(entry)

        if not self._withdrawn and (
                (self.withdraw_at is not None and iterations >= self.withdraw_at)
                or (self.withdraw_at_ms is not None and self.clock.now_ms() >= self.withdraw_at_ms)):
            msgs.extend(self.withdraw())

        if entry.sla is not None and not entry.task.done:
            now = self.clock.now_ms()
            if now >= entry.next_sample_ms:
                s = take_sample(self.provider_id, job_id, self, now)
                report = self.analyzer.observe(s, entry.sla)
                if report.kind is not ReportKind.NONE:
                    msgs.append(("monitor_report", report))
                if self.tune_enabled:
                    action = self.tuner.local_tune(job_id, self.analyzer.window(job_id))
                    if action.kind == "set_checkpoint_interval":
                        entry.checkpoint_interval = action.interval
                entry.next_sample_ms = now + entry.sla.sample_period_ms

        if entry.task.done:
            msgs.append(self._complete(entry))
        return msgs

    def _complete(self, entry: JobExecution) -> tuple[str, Any]:
        entry.status = ST_DONE
        self.analyzer.reset(entry.job_id)
        return ("result_return", {
            "job_id": entry.job_id, "provider_id": self.provider_id,
            "digest": entry.task.digest(), "iterations_done": entry.task.iterations_done,
            "exec_ms": entry.exec_ms})

    # -- migration, source side ---------------------------------------------

    def request_quiesce(self, job_id: str) -> None:
        entry = self.job(job_id)
        if entry.status not in (ST_RUNNING, ST_QUIESCED):
            raise InvalidJobState(f"job {job_id!r} is {entry.status}, cannot quiesce")
        entry.quiesce_requested = True
        if self.mode == "sim":
            # the sim strand only calls between iterations, i.e. at a yield point
            entry.status = ST_QUIESCED
            entry.quiesced_evt.set()

    def prepare_transfer(self, job_id: str) -> tuple[bytes, dict]:
        """Final incremental capture, compose, and encode the outgoing state."""
        entry = self.job(job_id)
        if entry.status != ST_QUIESCED:
            raise InvalidJobState(f"job {job_id!r} must be quiesced before transfer")
        final = self._capture(entry, force_incremental=True)
        composed = ckpt.compose(entry.lineage[0], entry.lineage[1:])
        if composed.fields != entry.task.state.fields:
            raise ckpt.CheckpointError(f"composed state diverges from live state for {job_id!r}")
        outgoing = ckpt.capture_full(composed, entry.seq_next)
        entry.seq_next += 1
        self.store.append(outgoing)
        info = {"iterations_before": entry.task.iterations_done,
                "time_on_source_ms": entry.exec_ms,
                "n": entry.task.total_iterations}
        return ckpt.encode(outgoing), info

    def abort_transfer(self, job_id: str) -> None:
        """Failed transfer: the job resumes on this node untouched."""
        entry = self.job(job_id)
        entry.quiesce_requested = False
        entry.quiesced_evt.clear()
        if entry.status == ST_QUIESCED:
            entry.status = ST_RUNNING
        entry.proceed_evt.set()

    def finish_transfer(self, job_id: str) -> None:
        """Target acknowledged: retire the local copy for good."""
        entry = self.job(job_id)
        entry.status = ST_TOMBSTONED
        self.analyzer.reset(job_id)
        entry.proceed_evt.set()

    # -- withdrawal -----------------------------------------------------------

    def withdraw(self) -> list[tuple[str, Any]]:
        """Announce withdrawal once; current jobs keep running until migrated."""
        with self._lock:
            if self._withdrawn:
                return []
            self._withdrawn = True
        return [("withdraw_notice", {"provider_id": self.provider_id,
                                     "at_ms": self.clock.now_ms()})]


# -- the wall-mode daemon -------------------------------------------------------

class NodeDaemon:
    """TCP frame server wrapping a NodeRuntime; one thread per connection,
    one execution thread per job."""

    def __init__(self, runtime: NodeRuntime, listen: str = "127.0.0.1:0",
                 supervisor: str | None = None, default_sla: ServiceLevelAgreement | None = None,
                 default_interval: int = 16, quiet: bool = True):
        self.runtime = runtime
        self.supervisor = supervisor
        self.default_sla = default_sla
        self.default_interval = default_interval
        self.quiet = quiet
        host, port = parse_hostport(listen)
        try:
            self._server = socket.create_server((host, port))
        except OSError as exc:
            raise BindFailure(f"cannot bind {listen}: {exc}") from exc
        self.address = "%s:%d" % self._server.getsockname()[:2]
        self._stop = threading.Event()
        self._threads: list[threading.Thread] = []

    def log(self, line: str) -> None:
        if not self.quiet:
            print(line, flush=True)

    def start(self) -> None:
        t = threading.Thread(target=self._accept_loop, name="accept", daemon=True)
        t.start()
        self._threads.append(t)
        self.log(f"EVENT ready provider={self.runtime.provider_id} address={self.address}")

    def stop(self) -> None:
        self._stop.set()
        try:
            self._server.close()
        except OSError:
            pass

    def register_with_supervisor(self, template: ResourceSpecTemplate,
                                 attempts: int = 50, delay: float = 0.1) -> None:
        payload = json_payload(template_to_dict(template))
        last: Exception | None = None
        for _ in range(attempts):
            try:
                msg_type, _ = request(self.supervisor, MSG_REGISTER_PROVIDER, payload, timeout=5)
                if msg_type == MSG_ACK:
                    self.log(f"EVENT registered provider={self.runtime.provider_id}")
                    return
            except OSError as exc:
                last = exc
            time.sleep(delay)
        raise NodeError(f"could not register with supervisor {self.supervisor}: {last}")

    # -- connection handling ---------------------------------------------------

    def _accept_loop(self) -> None:
        while not self._stop.is_set():
            try:
                conn, _ = self._server.accept()
            except OSError:
                return
            t = threading.Thread(target=self._serve_conn, args=(conn,), daemon=True)
            t.start()

    def _serve_conn(self, conn: socket.socket) -> None:
        with conn:
            conn.settimeout(30)
            while not self._stop.is_set():
                try:
                    msg_type, payload = recv_frame(conn)
                except (ConnectionClosed, OSError):
                    return
                except FrameError as exc:
                    # unrecoverable framing: report and drop the connection
                    try:
                        send_frame(conn, MSG_ERROR,
                                   json_payload({"error": "FrameError", "detail": str(exc)}))
                    except OSError:
                        pass
                    return
                try:
                    reply_type, reply = self._handle(msg_type, payload)
                except Exception as exc:  # typed reply, never a daemon crash
                    reply_type = MSG_ERROR
                    reply = json_payload({"error": type(exc).__name__, "detail": str(exc)})
                try:
                    send_frame(conn, reply_type, reply)
                except OSError:
                    return

    def _handle(self, msg_type: int, payload: bytes) -> tuple[int, bytes]:
        if msg_type == MSG_JOB_SUBMIT:
            obj = parse_json(payload)
            sla = None
            if obj.get("sla") is not None:
                try:
                    sla = ServiceLevelAgreement.from_dict(obj["sla"])
                except (KeyError, TypeError, ValueError) as exc:
                    raise MalformedPayload(f"bad sla: {exc}") from exc
            try:
                job_id = obj["job_id"]
                task_kind = obj["task_kind"]
                params = obj.get("params", {})
            except KeyError as exc:
                raise MalformedPayload(f"missing field {exc}") from exc
            interval = int(obj.get("checkpoint_interval", self.default_interval))
            ack = self.runtime.submit_job(job_id, task_kind, params, sla=sla or self.default_sla,
                                          checkpoint_interval=interval,
                                          reply_to=obj.get("reply_to"))
            self._start_exec(job_id)
            return MSG_ACK, json_payload(ack)

        if msg_type == MSG_CHECKPOINT_TRANSFER:
            ack = self.runtime.resume_from_bundle(payload)
            job_id = ack["job_id"]
            self.runtime.configure_resumed_job(job_id, sla=self.default_sla,
                                               checkpoint_interval=self.default_interval)
            self._start_exec(job_id)
            self.log(f"EVENT resumed job={job_id} iteration={ack['resumed_at_iteration']}")
            return MSG_ACK, json_payload(ack)

        if msg_type == MSG_MIGRATE_REQUEST:
            obj = parse_json(payload)
            try:
                job_id = obj["job_id"]
                target_addr = obj["target_addr"]
            except KeyError as exc:
                raise MalformedPayload(f"missing field {exc}") from exc
            info = self._migrate_out(job_id, target_addr)
            return MSG_ACK, json_payload(info)

        raise UnsupportedMessage(
            f"node does not serve {MSG_NAMES.get(msg_type, hex(msg_type))} messages")

    # -- execution threads -----------------------------------------------------

    def _start_exec(self, job_id: str) -> None:
        t = threading.Thread(target=self._exec_loop, args=(job_id,),
                             name=f"exec-{job_id}", daemon=True)
        t.start()
        self._threads.append(t)

    def _exec_loop(self, job_id: str) -> None:
        rt = self.runtime
        entry = rt.job(job_id)
        while not self._stop.is_set():
            if entry.quiesce_requested:
                entry.status = ST_QUIESCED
                entry.quiesced_evt.set()
                entry.proceed_evt.wait()
                entry.proceed_evt.clear()
                if entry.status == ST_TOMBSTONED:
                    return
                continue
            try:
                msgs = rt.run_iteration(job_id)
            except Exception as exc:
                entry.status = ST_FAILED
                self.log(f"EVENT job_failed job={job_id} error={type(exc).__name__}")
                self._send_upstream(MSG_RESULT_RETURN, {
                    "job_id": job_id, "provider_id": rt.provider_id,
                    "failed": True, "error": type(exc).__name__}, entry.reply_to)
                return
            self._dispatch(entry, msgs)
            if entry.status == ST_DONE:
                return

    def _dispatch(self, entry: JobExecution, msgs: list[tuple[str, Any]]) -> None:
        for kind, body in msgs:
            if kind == "withdraw_notice":
                self.log(f"EVENT withdraw provider={self.runtime.provider_id}")
                self._send_upstream(MSG_WITHDRAW_NOTICE,
                                    {"provider_id": body["provider_id"],
                                     "at_ms": float(body["at_ms"])}, None)
            elif kind == "monitor_report":
                self._send_upstream(MSG_MONITOR_REPORT, body.to_dict(), None)
            elif kind == "result_return":
                self.log(f"EVENT result job={body['job_id']} digest={body['digest']:016x}")
                self._send_upstream(MSG_RESULT_RETURN, {
                    "job_id": body["job_id"], "provider_id": body["provider_id"],
                    "digest": f"{body['digest']:016x}",
                    "iterations_done": body["iterations_done"],
                    "exec_ms": float(body["exec_ms"])}, entry.reply_to)

    def _send_upstream(self, msg_type: int, obj: dict, reply_to: str | None) -> None:
        addr = reply_to or self.supervisor
        if addr is None:
            return
        try:
            request(addr, msg_type, json_payload(obj), timeout=10)
        except (OSError, NodeError) as exc:
            self.log(f"EVENT send_failed type={MSG_NAMES.get(msg_type)} error={exc}")

    # -- migration, source side -------------------------------------------------

    def _migrate_out(self, job_id: str, target_addr: str) -> dict:
        entry = self.runtime.job(job_id)
        if target_addr == self.address:
            raise InvalidJobState("migration target equals the source node")
        self.runtime.request_quiesce(job_id)
        deadline = time.monotonic() + 10
        while not entry.quiesced_evt.wait(0.01):
            if entry.status in (ST_DONE, ST_FAILED):
                entry.quiesce_requested = False
                raise TransferFailed(f"job {job_id!r} finished before it could quiesce")
            if time.monotonic() > deadline:
                entry.quiesce_requested = False
                raise TransferFailed(f"job {job_id!r} did not quiesce in time")
        bundle, info = self.runtime.prepare_transfer(job_id)
        t0 = time.perf_counter_ns()
        try:
            reply_type, reply = request(target_addr, MSG_CHECKPOINT_TRANSFER, bundle, timeout=15)
        except (OSError, NodeError) as exc:
            self.runtime.abort_transfer(job_id)
            raise TransferFailed(f"transfer to {target_addr} failed: {exc}") from exc
        if reply_type != MSG_ACK:
            detail = parse_json(reply).get("error", "unknown") if reply else "unknown"
            self.runtime.abort_transfer(job_id)
            raise TransferFailed(f"target rejected the transfer: {detail}")
        transfer_ms = (time.perf_counter_ns() - t0) / 1e6
        target_ack = parse_json(reply)
        self.runtime.finish_transfer(job_id)
        self.log(f"EVENT transfer_ack job={job_id} iterations={info['iterations_before']}")
        return {"ok": True, "job_id": job_id,
                "iterations_before": info["iterations_before"],
                "time_on_source_ms": float(info["time_on_source_ms"]),
                "overhead_ms": transfer_ms,
                "restore_ms": target_ack.get("restore_ms", 0.0),
                "transfer_ms": transfer_ms}


# -- CLI ------------------------------------------------------------------------

def main(argv: list[str] | None = None) -> int:
    parser = argparse.ArgumentParser(prog="jobmig-node", description="resource provider daemon")
    parser.add_argument("--id", required=True, help="provider id")
    parser.add_argument("--listen", default="127.0.0.1:0", help="host:port to listen on")
    parser.add_argument("--mode", choices=("sim", "wall"), default="wall")
    parser.add_argument("--speed", default="1.0", help="sim speed factor")
    parser.add_argument("--cost-ms", default="100", help="sim per-iteration cost at speed 1.0")
    parser.add_argument("--supervisor", default=None, help="supervisory endpoint host:port")
    parser.add_argument("--data-dir", default=None, help="checkpoint store directory")
    parser.add_argument("--withdraw-at", type=int, default=None,
                        help="announce withdrawal once a job reaches this iteration count")
    parser.add_argument("--withdraw-at-ms", type=float, default=None,
                        help="announce withdrawal once the node clock reaches this time")
    parser.add_argument("--cpu-mhz", type=int, default=1000)
    parser.add_argument("--memory-mb", type=int, default=256)
    parser.add_argument("--arch", action="append", default=None, help="architecture tag (repeatable)")
    parser.add_argument("--full-every", type=int, default=16,
                        help="emit a full checkpoint every Nth record")
    parser.add_argument("--tune", action="store_true", help="enable local checkpoint-interval tuning")
    args = parser.parse_args(argv)

    data_dir = args.data_dir or tempfile.mkdtemp(prefix=f"jobmig-{args.id}-")
    clock = VirtualClock() if args.mode == "sim" else WallClock()
    runtime = NodeRuntime(
        provider_id=args.id, clock=clock, store_dir=data_dir, mode=args.mode,
        per_iteration_cost_ms=Fraction(args.cost_ms) if args.mode == "sim" else None,
        speed_factor=Fraction(args.speed), withdraw_at=args.withdraw_at,
        withdraw_at_ms=args.withdraw_at_ms, full_every=args.full_every,
        tune_enabled=args.tune)
    try:
        daemon = NodeDaemon(runtime, listen=args.listen, supervisor=args.supervisor, quiet=False)
    except BindFailure as exc:
        print(f"ERROR {exc}", file=sys.stderr)
        return 1
    daemon.start()

    if args.supervisor:
        template = ResourceSpecTemplate(
            provider_id=args.id, address=daemon.address, cpu_mhz=args.cpu_mhz,
            memory_mb=args.memory_mb, arch_tags=frozenset(args.arch or ()),
            speed_factor=Fraction(args.speed), available=True)
        try:
            daemon.register_with_supervisor(template)
        except NodeError as exc:
            print(f"ERROR {exc}", file=sys.stderr)
            daemon.stop()
            return 1

    stop = threading.Event()
    signal.signal(signal.SIGTERM, lambda *_: stop.set())
    signal.signal(signal.SIGINT, lambda *_: stop.set())
    stop.wait()
    daemon.stop()
    return 0


if __name__ == "__main__":
    sys.exit(main())
