"""Full and incremental task-state checkpoints with a canonical binary codec.

A checkpoint record is either a full snapshot of a task's field map or a
diff against the previous record. Records chain through sequence numbers;
``compose`` replays a full record plus its incremental lineage back into a
task state. The codec is canonical: every valid record has exactly one byte
representation, so equal records encode to identical bytes.

Binary layout (all integers big-endian):

    magic      4 bytes  ``MAF1``
    kind       1 byte   0x00 full, 0x01 incremental
    job_id     2-byte length + UTF-8 bytes
    seq        8 bytes
    base_seq   8 bytes
    count      4 bytes  number of field entries
    entry*     field_id (2) + value_type (1) + value_len (4) + value bytes
    crc32      4 bytes  over everything above (IEEE 802.3 polynomial)

Value types: 0x01 int64 (8 bytes, two's complement), 0x02 int64 array
(concatenated 8-byte elements), 0x03 byte string. Entries are sorted by
ascending field_id; decoding rejects unordered or duplicate entries.
"""

from __future__ import annotations

import hashlib
import re
import struct
import zlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Sequence

MAGIC = b"MAF1"
KIND_FULL = 0x00
KIND_INCREMENTAL = 0x01

VT_INT64 = 0x01
VT_INT64_ARRAY = 0x02
VT_BYTES = 0x03

_INT64_MIN = -(1 << 63)
_INT64_MAX = (1 << 63) - 1
_U64_MAX = (1 << 64) - 1
_U16_MAX = (1 << 16) - 1

# Runtime (mutable) field values live in TaskState; records hold the frozen
# form with tuples instead of lists.
FieldValue = int | list[int] | bytes
FrozenValue = int | tuple[int, ...] | bytes


class CheckpointError(Exception):
    pass


class SchemaMismatch(CheckpointError):
    pass


class UnknownTaskKind(CheckpointError):
    pass


class LineageBroken(CheckpointError):
    pass


class CodecError(CheckpointError):
    pass


class BadMagic(CodecError):
    pass


class Truncated(CodecError):
    pass


class ChecksumFailure(CodecError):
    pass


class MalformedRecord(CodecError):
    pass


@dataclass
class TaskState:
    """Mutable execution state of one resumable task."""

    job_id: str
    task_kind: str
    fields: dict[int, FieldValue]
    done: bool = False

    def copy(self) -> "TaskState":
        """Deep copy: mutating the original never alters the copy."""
        return TaskState(
            job_id=self.job_id,
            task_kind=self.task_kind,
            fields={fid: list(v) if isinstance(v, list) else v for fid, v in self.fields.items()},
            done=self.done,
        )


@dataclass(frozen=True)
class FieldDelta:
    field_id: int
    new_value: FrozenValue


@dataclass(frozen=True)
class CheckpointRecord:
    job_id: str
    seq: int
    kind: int
    base_seq: int
    deltas: tuple[FieldDelta, ...]
    checksum: int


@dataclass(frozen=True)
class TaskSchema:
    """Static field catalog for one task kind."""

    task_kind: str
    field_types: Mapping[int, int]
    done_field: int | None = None


_SCHEMAS: dict[str, TaskSchema] = {}


def register_task_schema(schema: TaskSchema) -> None:
    """Register a task kind's field catalog.

    Field-id sets must be distinguishable across kinds: the transfer format
    carries no kind tag, so the receiving side infers the kind from the
    field-id set of a full record.
    """
    for fid, vt in schema.field_types.items():
        if not 0 <= fid <= _U16_MAX:
            raise ValueError(f"field_id {fid} out of 16-bit range")
        if vt not in (VT_INT64, VT_INT64_ARRAY, VT_BYTES):
            raise ValueError(f"bad value type {vt} for field {fid}")
    if schema.done_field is not None and schema.done_field not in schema.field_types:
        raise ValueError("done_field not in field catalog")
    fid_set = frozenset(schema.field_types)
    for other in _SCHEMAS.values():
        if other.task_kind != schema.task_kind and frozenset(other.field_types) == fid_set:
            raise ValueError(f"field set collides with task kind {other.task_kind!r}")
    _SCHEMAS[schema.task_kind] = schema


def schema_for(task_kind: str) -> TaskSchema:
    try:
        return _SCHEMAS[task_kind]
    except KeyError:
        raise UnknownTaskKind(f"no schema registered for task kind {task_kind!r}") from None


def kind_for_fields(field_ids: frozenset[int]) -> TaskSchema:
    for schema in _SCHEMAS.values():
        if frozenset(schema.field_types) == field_ids:
            return schema
    raise UnknownTaskKind(f"no registered task kind has field set {sorted(field_ids)}")


def _freeze(fid: int, value: FieldValue, expected_vt: int) -> FrozenValue:
    if expected_vt == VT_INT64:
        if not isinstance(value, int) or isinstance(value, bool):
            raise SchemaMismatch(f"field {fid}: expected int64, got {type(value).__name__}")
        if not _INT64_MIN <= value <= _INT64_MAX:
            raise SchemaMismatch(f"field {fid}: value out of int64 range")
        return value
    if expected_vt == VT_INT64_ARRAY:
        if not isinstance(value, (list, tuple)):
            raise SchemaMismatch(f"field {fid}: expected int64 array, got {type(value).__name__}")
        for v in value:
            if not isinstance(v, int) or isinstance(v, bool) or not _INT64_MIN <= v <= _INT64_MAX:
                raise SchemaMismatch(f"field {fid}: array element out of int64 range")
        return tuple(value)
    if not isinstance(value, (bytes, bytearray)):
        raise SchemaMismatch(f"field {fid}: expected bytes, got {type(value).__name__}")
    return bytes(value)


def _thaw(value: FrozenValue) -> FieldValue:
    return list(value) if isinstance(value, tuple) else value


def _value_type(value: FrozenValue) -> int:
    if isinstance(value, int):
        return VT_INT64
    if isinstance(value, tuple):
        return VT_INT64_ARRAY
    return VT_BYTES


def _check_state_schema(state: TaskState) -> TaskSchema:
    schema = schema_for(state.task_kind)
    if set(state.fields) != set(schema.field_types):
        raise SchemaMismatch(
            f"task {state.job_id!r}: field set {sorted(state.fields)} does not match "
            f"schema of kind {state.task_kind!r}"
        )
    return schema


def _make_record(job_id: str, seq: int, kind: int, base_seq: int,
                 deltas: Iterable[FieldDelta]) -> CheckpointRecord:
    ordered = tuple(sorted(deltas, key=lambda d: d.field_id))
    for a, b in zip(ordered, ordered[1:]):
        if a.field_id == b.field_id:
            raise MalformedRecord(f"duplicate delta for field {a.field_id}")
    record = CheckpointRecord(job_id=job_id, seq=seq, kind=kind, base_seq=base_seq,
                              deltas=ordered, checksum=0)
    body = _encode_body(record)
    return CheckpointRecord(job_id=job_id, seq=seq, kind=kind, base_seq=base_seq,
                            deltas=ordered, checksum=zlib.crc32(body))


def capture_full(state: TaskState, seq: int) -> CheckpointRecord:
    """Snapshot every schema field. The record is decoupled from the state:
    later mutations of the state do not show through."""
    schema = _check_state_schema(state)
    deltas = [FieldDelta(fid, _freeze(fid, state.fields[fid], schema.field_types[fid]))
              for fid in state.fields]
    return _make_record(state.job_id, seq, KIND_FULL, seq, deltas)


def capture_incremental(state: TaskState, last_captured: TaskState, seq: int) -> CheckpointRecord:
    """Record exactly the fields whose values differ from ``last_captured``."""
    if state.job_id != last_captured.job_id:
        raise SchemaMismatch("incremental capture across different job ids")
    if set(state.fields) != set(last_captured.fields):
        raise SchemaMismatch("field sets differ between state and last capture")
    if seq < 1:
        raise MalformedRecord("incremental records need seq >= 1")
    schema = _check_state_schema(state)
    deltas = [FieldDelta(fid, _freeze(fid, value, schema.field_types[fid]))
              for fid, value in state.fields.items()
              if value != last_captured.fields[fid]]
    return _make_record(state.job_id, seq, KIND_INCREMENTAL, seq - 1, deltas)


def compose(full: CheckpointRecord, incrementals: Sequence[CheckpointRecord]) -> TaskState:
    """Rebuild a task state from a full record plus its incremental chain.

    The chain must be seq-contiguous: the first incremental's base_seq equals
    the full record's seq, and each later base_seq equals the previous seq.
    Every record's checksum is re-verified before its deltas are applied.
    """
    _verify_checksum(full)
    if full.kind != KIND_FULL:
        raise LineageBroken(f"base record {full.seq} is not a full checkpoint")
    fields: dict[int, FieldValue] = {d.field_id: _thaw(d.new_value) for d in full.deltas}
    schema = kind_for_fields(frozenset(fields))
    for fid in fields:
        _freeze(fid, fields[fid], schema.field_types[fid])

    prev_seq = full.seq
    for rec in incrementals:
        _verify_checksum(rec)
        if rec.job_id != full.job_id:
            raise LineageBroken(f"record {rec.seq} belongs to job {rec.job_id!r}")
        if rec.kind != KIND_INCREMENTAL:
            raise LineageBroken(f"record {rec.seq} in the chain is not incremental")
        if rec.base_seq != prev_seq:
            raise LineageBroken(
                f"record {rec.seq} chains from {rec.base_seq}, expected {prev_seq}")
        for d in rec.deltas:
            if d.field_id not in fields:
                raise SchemaMismatch(f"delta for unknown field {d.field_id}")
            _freeze(d.field_id, _thaw(d.new_value), schema.field_types[d.field_id])
            fields[d.field_id] = _thaw(d.new_value)
        prev_seq = rec.seq

    done = False
    if schema.done_field is not None:
        done = bool(fields[schema.done_field])
    return TaskState(job_id=full.job_id, task_kind=schema.task_kind, fields=fields, done=done)


def _verify_checksum(record: CheckpointRecord) -> None:
    if zlib.crc32(_encode_body(record)) != record.checksum:
        raise ChecksumFailure(f"record {record.seq} fails checksum validation")


def _encode_value(value: FrozenValue) -> bytes:
    if isinstance(value, int):
        return struct.pack(">q", value)
    if isinstance(value, tuple):
        return b"".join(struct.pack(">q", v) for v in value)
    return value


def _encode_body(record: CheckpointRecord) -> bytes:
    jid = record.job_id.encode("utf-8")
    if len(jid) > _U16_MAX:
        raise MalformedRecord("job_id too long to encode")
    if not 0 <= record.seq <= _U64_MAX or not 0 <= record.base_seq <= _U64_MAX:
        raise MalformedRecord("sequence number out of 64-bit range")
    parts = [MAGIC, bytes([record.kind]), struct.pack(">H", len(jid)), jid,
             struct.pack(">Q", record.seq), struct.pack(">Q", record.base_seq),
             struct.pack(">I", len(record.deltas))]
    for d in record.deltas:
        payload = _encode_value(d.new_value)
        parts.append(struct.pack(">HBI", d.field_id, _value_type(d.new_value), len(payload)))
        parts.append(payload)
    return b"".join(parts)


def encode(record: CheckpointRecord) -> bytes:
    body = _encode_body(record)
    if zlib.crc32(body) != record.checksum:
        raise ChecksumFailure("record checksum does not match its contents")
    return body + struct.pack(">I", record.checksum)


def _parse_record(buf: bytes, off: int) -> tuple[CheckpointRecord, int]:
    start = off

    def take(n: int) -> bytes:
        nonlocal off
        if off + n > len(buf):
            raise Truncated(f"record needs {off + n - len(buf)} more bytes")
        piece = buf[off:off + n]
        off += n
        return piece

    if take(4) != MAGIC:
        raise BadMagic("bad record magic")
    kind = take(1)[0]
    if kind not in (KIND_FULL, KIND_INCREMENTAL):
        raise MalformedRecord(f"unknown record kind 0x{kind:02x}")
    (jid_len,) = struct.unpack(">H", take(2))
    try:
        job_id = take(jid_len).decode("utf-8")
    except UnicodeDecodeError as exc:
        raise MalformedRecord("job_id is not valid UTF-8") from exc
    (seq,) = struct.unpack(">Q", take(8))
    (base_seq,) = struct.unpack(">Q", take(8))
    (count,) = struct.unpack(">I", take(4))

    deltas: list[FieldDelta] = []
    prev_fid = -1
    for _ in range(count):
        fid, vt, vlen = struct.unpack(">HBI", take(7))
        if fid <= prev_fid:
            raise MalformedRecord("field entries out of canonical order")
        prev_fid = fid
        raw = take(vlen)
        if vt == VT_INT64:
            if vlen != 8:
                raise MalformedRecord(f"int64 field {fid} has length {vlen}")
            value: FrozenValue = struct.unpack(">q", raw)[0]
        elif vt == VT_INT64_ARRAY:
            if vlen % 8:
                raise MalformedRecord(f"array field {fid} has ragged length {vlen}")
            value = tuple(struct.unpack(f">{vlen // 8}q", raw)) if vlen else ()
        elif vt == VT_BYTES:
            value = raw
        else:
            raise MalformedRecord(f"unknown value type 0x{vt:02x}")
        deltas.append(FieldDelta(fid, value))

    (stated_crc,) = struct.unpack(">I", take(4))
    if zlib.crc32(buf[start:off - 4]) != stated_crc:
        raise ChecksumFailure("record bytes fail CRC-32 validation")
    if kind == KIND_FULL and base_seq != seq:
        raise MalformedRecord("full record must have base_seq == seq")
    if kind == KIND_INCREMENTAL and (seq == 0 or base_seq != seq - 1):
        raise MalformedRecord("incremental record must have base_seq == seq - 1")
    record = CheckpointRecord(job_id=job_id, seq=seq, kind=kind, base_seq=base_seq,
                              deltas=tuple(deltas), checksum=stated_crc)
    return record, off


def decode(data: bytes) -> CheckpointRecord:
    record, end = _parse_record(bytes(data), 0)
    if end != len(data):
        raise MalformedRecord(f"{len(data) - end} trailing bytes after record")
    return record


def decode_bundle(data: bytes) -> list[CheckpointRecord]:
    """Parse a concatenation of one or more records."""
    data = bytes(data)
    if not data:
        raise Truncated("empty bundle")
    records = []
    off = 0
    while off < len(data):
        record, off = _parse_record(data, off)
        records.append(record)
    return records


def encode_bundle(records: Sequence[CheckpointRecord]) -> bytes:
    return b"".join(encode(r) for r in records)


_SAFE_NAME = re.compile(r"[A-Za-z0-9._-]{1,80}")


class CheckpointStore:
    """Per-job append-only record files (``<job_id>.ckpt``)."""

    def __init__(self, root: str | Path):
        self.root = Path(root)
        self.root.mkdir(parents=True, exist_ok=True)

    def path_for(self, job_id: str) -> Path:
        if _SAFE_NAME.fullmatch(job_id):
            name = job_id
        else:
            name = "j" + hashlib.sha256(job_id.encode("utf-8")).hexdigest()[:24]
        return self.root / f"{name}.ckpt"

    def append(self, record: CheckpointRecord) -> Path:
        path = self.path_for(record.job_id)
        with path.open("ab") as fh:
            fh.write(encode(record))
        return path

    def load(self, job_id: str) -> list[CheckpointRecord]:
        path = self.path_for(job_id)
        if not path.exists():
            return []
        return decode_bundle(path.read_bytes())
