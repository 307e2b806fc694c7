"""Message vocabulary, binary framing and the per-round state machine.

Frame layout (all integers little-endian)::

    b"FDV1" | u32 payload_len | payload

    payload = u8 version | u8 variant_tag | field*
    field   = u8 field_tag | u32 value_len | value

See PROTOCOL.md for the value encodings and worked examples.
"""

from __future__ import annotations

import enum
import json
import struct
from dataclasses import dataclass, field, replace
from typing import Protocol

import numpy as np

from .compression import CompressedUpdate
from .detection import ModelParams, params_from_bytes, params_to_bytes
from .explorer import ClientResourceReport

MAGIC = b"FDV1"
VERSION = 1
HEADER = struct.Struct("<4sI")
DEFAULT_MAX_FRAME = 64 * 1024 * 1024


class ProtocolError(Exception):
    pass


class BadMagic(ProtocolError):
    pass


class TruncatedFrame(ProtocolError):
    pass


class UnknownVariantTag(ProtocolError):
    pass


class LengthOverflow(ProtocolError):
    pass


class MalformedPayload(ProtocolError):
    pass


class ParamCodec(Protocol):
    def encode(self, data: bytes) -> bytes: ...

    def decode(self, data: bytes) -> bytes: ...


class IdentityCodec:
    """Pass-through parameter codec; the hook where encryption would plug in."""

    def encode(self, data: bytes) -> bytes:
        return data

    def decode(self, data: bytes) -> bytes:
        return data


# -- messages ---------------------------------------------------------------


@dataclass(frozen=True)
class Message:
    task_id: str
    sender_id: str


@dataclass(frozen=True)
class JoinTask(Message):
    n_samples: int = 0


@dataclass(frozen=True)
class TaskConfigMsg(Message):
    config: dict = field(default_factory=dict)


@dataclass(frozen=True, eq=False)
class DispatchModel(Message):
    round: int = 0
    params: ModelParams | None = None

    def __eq__(self, other):
        return (
            type(other) is DispatchModel
            and (self.task_id, self.sender_id, self.round) == (other.task_id, other.sender_id, other.round)
            and self.params == other.params
        )


@dataclass(frozen=True)
class ResourceReport(Message):
    report: ClientResourceReport | None = None


@dataclass(frozen=True)
class StartLocalTraining(Message):
    round: int = 0


@dataclass(frozen=True, eq=False)
class UploadUpdate(Message):
    round: int = 0
    update: CompressedUpdate | None = None
    metrics: dict = field(default_factory=dict)

    def __eq__(self, other):
        return (
            type(other) is UploadUpdate
            and (self.task_id, self.sender_id, self.round) == (other.task_id, other.sender_id, other.round)
            and self.update == other.update
            and self.metrics == other.metrics
        )


@dataclass(frozen=True)
class AggregationDone(Message):
    round: int = 0
    model_version: int = 0


@dataclass(frozen=True)
class Error(Message):
    code: int = 0
    text: str = ""


# variant tag -> (class, [(field tag, attribute, kind)])
_COMMON = [(1, "task_id", "str"), (2, "sender_id", "str")]
SCHEMA: dict[int, tuple[type, list[tuple[int, str, str]]]] = {
    1: (JoinTask, _COMMON + [(12, "n_samples", "int")]),
    2: (TaskConfigMsg, _COMMON + [(5, "config", "json")]),
    3: (DispatchModel, _COMMON + [(3, "round", "int"), (4, "params", "params")]),
    4: (ResourceReport, _COMMON + [(6, "report", "report")]),
    5: (StartLocalTraining, _COMMON + [(3, "round", "int")]),
    6: (UploadUpdate, _COMMON + [(3, "round", "int"), (7, "update", "update"), (8, "metrics", "json")]),
    7: (AggregationDone, _COMMON + [(3, "round", "int"), (9, "model_version", "int")]),
    8: (Error, _COMMON + [(10, "code", "int"), (11, "text", "str")]),
}
_TAG_OF = {cls: tag for tag, (cls, _) in SCHEMA.items()}


def _enc_json(obj) -> bytes:
    return json.dumps(obj, sort_keys=True, separators=(",", ":")).encode()


def _enc_report(r: ClientResourceReport) -> bytes:
    cid = r.client_id.encode()
    return struct.pack("<I", len(cid)) + cid + struct.pack(
        "<dddd", r.cpu_load, r.mem_load, r.bandwidth, r.last_round_quality
    )


def _dec_report(data: bytes) -> ClientResourceReport:
    (n,) = struct.unpack_from("<I", data, 0)
    if len(data) != 4 + n + 32:
        raise MalformedPayload("bad resource report length")
    cid = bytes(data[4 : 4 + n]).decode()
    cpu, mem, bw, q = struct.unpack_from("<dddd", data, 4 + n)
    return ClientResourceReport(cid, cpu, mem, bw, q)


def _enc_update(u: CompressedUpdate, codec: ParamCodec) -> bytes:
    cid = u.client_id.encode()
    parts = [struct.pack("<I", len(cid)), cid, struct.pack("<qqdI", u.round, u.sample_count, u.final_loss, len(u.contributions))]
    parts.append(np.asarray(u.contributions, dtype="<f8").tobytes())
    layers = [struct.pack("<I", len(u.included))]
    for j in sorted(u.included):
        W, b = u.included[j]
        layers.append(struct.pack("<III", j, *W.shape))
        layers.append(np.ascontiguousarray(W, dtype="<f8").tobytes())
        layers.append(np.ascontiguousarray(b, dtype="<f8").tobytes())
    blob = codec.encode(b"".join(layers))
    parts.append(struct.pack("<I", len(blob)))
    parts.append(blob)
    return b"".join(parts)


def _dec_update(data: bytes, codec: ParamCodec) -> CompressedUpdate:
    view = memoryview(data)
    (n,) = struct.unpack_from("<I", view, 0)
    off = 4 + n
    cid = bytes(view[4:off]).decode()
    rnd, count, loss, L = struct.unpack_from("<qqdI", view, off)
    off += struct.calcsize("<qqdI")
    if off + 8 * L > len(view):
        raise MalformedPayload("truncated contributions")
    contributions = np.frombuffer(view, dtype="<f8", count=L, offset=off).tolist()
    off += 8 * L
    (blob_len,) = struct.unpack_from("<I", view, off)
    off += 4
    if off + blob_len != len(view):
        raise MalformedPayload("bad layer blob length")
    blob = memoryview(codec.decode(bytes(view[off:])))
    (k,) = struct.unpack_from("<I", blob, 0)
    pos = 4
    included = {}
    for _ in range(k):
        j, rows, cols = struct.unpack_from("<III", blob, pos)
        pos += 12
        size = rows * cols
        if pos + 8 * (size + rows) > len(blob) or j in included:
            raise MalformedPayload("bad included layer")
        W = np.frombuffer(blob, dtype="<f8", count=size, offset=pos).reshape(rows, cols).astype(np.float64)
        b = np.frombuffer(blob, dtype="<f8", count=rows, offset=pos + 8 * size).astype(np.float64)
        pos += 8 * (size + rows)
        included[j] = (W, b)
    if pos != len(blob):
        raise MalformedPayload("trailing bytes in layer blob")
    return CompressedUpdate(cid, rnd, included, contributions, count, loss)


def _enc_value(kind: str, value, codec: ParamCodec) -> bytes:
    if kind == "str":
        return value.encode()
    if kind == "int":
        return struct.pack("<q", value)
    if kind == "json":
        return _enc_json(value)
    if kind == "params":
        return codec.encode(params_to_bytes(value))
    if kind == "report":
        return _enc_report(value)
    if kind == "update":
        return _enc_update(value, codec)
    raise AssertionError(kind)


def _dec_value(kind: str, data: bytes, codec: ParamCodec):
    if kind == "str":
        return data.decode()
    if kind == "int":
        if len(data) != 8:
            raise MalformedPayload("int field must be 8 bytes")
        return struct.unpack("<q", data)[0]
    if kind == "json":
        return json.loads(data.decode())
    if kind == "params":
        return params_from_bytes(codec.decode(data))
    if kind == "report":
        return _dec_report(data)
    if kind == "update":
        return _dec_update(data, codec)
    raise AssertionError(kind)


def encode_payload(msg: Message, codec: ParamCodec | None = None) -> bytes:
    codec = codec or IdentityCodec()
    tag = _TAG_OF.get(type(msg))
    if tag is None:
        raise TypeError(f"not a protocol message: {type(msg).__name__}")
    parts = [bytes([VERSION, tag])]
    for ftag, attr, kind in SCHEMA[tag][1]:
        value = getattr(msg, attr)
        if value is None:
            continue
        raw = _enc_value(kind, value, codec)
        parts.append(struct.pack("<BI", ftag, len(raw)))
        parts.append(raw)
    return b"".join(parts)


def encode_message(msg: Message, codec: ParamCodec | None = None) -> bytes:
    payload = encode_payload(msg, codec)
    return HEADER.pack(MAGIC, len(payload)) + payload


def frame_length(data: bytes, max_frame: int = DEFAULT_MAX_FRAME) -> int | None:
    """Total frame size once the header is readable, else ``None``."""
    if len(data) < 4:
        if MAGIC[: len(data)] != bytes(data[:4]):
            raise BadMagic(f"bad magic {bytes(data[:4])!r}")
        return None
    if bytes(data[:4]) != MAGIC:
        raise BadMagic(f"bad magic {bytes(data[:4])!r}")
    if len(data) < HEADER.size:
        return None
    (length,) = struct.unpack_from("<I", data, 4)
    if length > max_frame:
        raise LengthOverflow(f"declared payload {length} exceeds max frame {max_frame}")
    return HEADER.size + length


def decode_message(
    data: bytes, codec: ParamCodec | None = None, max_frame: int = DEFAULT_MAX_FRAME
) -> Message:
    """Decode exactly one frame.  Only ``ProtocolError`` subclasses escape."""
    data = bytes(data)
    total = frame_length(data, max_frame)
    if total is None or len(data) < total:
        raise TruncatedFrame(f"have {len(data)} bytes, frame needs {total or HEADER.size}")
    if len(data) > total:
        raise MalformedPayload(f"{len(data) - total} trailing bytes after frame")
    return decode_payload(data[HEADER.size :], codec)


def decode_payload(payload: bytes, codec: ParamCodec | None = None) -> Message:
    codec = codec or IdentityCodec()
    if len(payload) < 2:
        raise MalformedPayload("payload shorter than version + variant tag")
    if payload[0] != VERSION:
        raise MalformedPayload(f"unsupported payload version {payload[0]}")
    tag = payload[1]
    if tag not in SCHEMA:
        raise UnknownVariantTag(f"unknown variant tag {tag}")
    cls, fields = SCHEMA[tag]
    by_tag = {ftag: (attr, kind) for ftag, attr, kind in fields}
    values: dict[str, object] = {}
    pos = 2
    while pos < len(payload):
        if pos + 5 > len(payload):
            raise MalformedPayload("truncated field header")
        ftag, flen = struct.unpack_from("<BI", payload, pos)
        pos += 5
        if pos + flen > len(payload):
            raise MalformedPayload("field overruns payload")
        raw = payload[pos : pos + flen]
        pos += flen
        if ftag not in by_tag:
            continue  # unknown fields are skipped for forward compatibility
        attr, kind = by_tag[ftag]
        if attr in values:
            raise MalformedPayload(f"duplicate field {attr}")
        try:
            values[attr] = _dec_value(kind, raw, codec)
        except ProtocolError:
            raise
        except Exception as e:  # noqa: BLE001 - any garbage inside a field is malformed
            raise MalformedPayload(f"bad {attr} field: {e}") from None
    for attr in ("task_id", "sender_id"):
        if attr not in values:
            raise MalformedPayload(f"missing {attr}")
    if cls in (DispatchModel, UploadUpdate) and len(values) != len(fields):
        raise MalformedPayload(f"{cls.__name__} is missing fields")
    if "config" in values and not isinstance(values["config"], dict):
        raise MalformedPayload("config must be a JSON object")
    if "metrics" in values and not isinstance(values["metrics"], dict):
        raise MalformedPayload("metrics must be a JSON object")
    try:
        return cls(**values)
    except Exception as e:  # noqa: BLE001
        raise MalformedPayload(str(e)) from None


class FrameBuffer:
    """Accumulates stream bytes and yields complete decoded messages."""

    def __init__(self, codec: ParamCodec | None = None, max_frame: int = DEFAULT_MAX_FRAME):
        self.codec = codec
        self.max_frame = max_frame
        self._buf = bytearray()

    def feed(self, data: bytes) -> list[tuple[Message, int]]:
        self._buf.extend(data)
        out = []
        while True:
            total = frame_length(self._buf, self.max_frame)
            if total is None or len(self._buf) < total:
                return out
            frame = bytes(self._buf[:total])
            del self._buf[:total]
            out.append((decode_message(frame, self.codec, self.max_frame), total))


# -- round state machine ----------------------------------------------------


class Phase(enum.IntEnum):
    DISPATCHING = 0
    TRAINING = 1
    COLLECTING = 2
    AGGREGATING = 3
    DONE = 4


class IllegalTransition(Exception):
    pass


@dataclass(frozen=True)
class DispatchComplete:
    pass


@dataclass(frozen=True)
class UploadReceived:
    client_id: str
    update: CompressedUpdate


@dataclass(frozen=True)
class DeadlineExpired:
    pass


@dataclass(frozen=True)
class ClientDropped:
    client_id: str


@dataclass(frozen=True)
class AggregationResult:
    model_version: int | None = None


@dataclass(frozen=True)
class RoundState:
    round: int
    expected_clients: frozenset[str]
    deadline: float
    phase: Phase = Phase.DISPATCHING
    received_updates: dict = field(default_factory=dict)
    dropped: frozenset[str] = frozenset()
    stragglers: frozenset[str] = frozenset()
    quorum: int = 1
    failed: bool = False
    model_version: int | None = None

    @property
    def pending(self) -> frozenset[str]:
        return self.expected_clients - set(self.received_updates) - self.dropped


def _enter_aggregating(state: RoundState) -> RoundState:
    got = set(state.received_updates)
    return replace(
        state,
        phase=Phase.AGGREGATING,
        stragglers=frozenset(state.expected_clients - got),
        failed=len(got) < state.quorum,
    )


def advance_round(state: RoundState, event) -> RoundState:
    """Apply one event; raises ``IllegalTransition`` and leaves ``state`` untouched otherwise."""
    phase = state.phase
    if isinstance(event, DispatchComplete) and phase is Phase.DISPATCHING:
        return replace(state, phase=Phase.TRAINING)

    if isinstance(event, UploadReceived) and phase in (Phase.TRAINING, Phase.COLLECTING):
        cid = event.client_id
        if cid not in state.expected_clients:
            raise IllegalTransition(f"upload from unexpected client {cid!r}")
        if cid in state.received_updates or cid in state.dropped:
            raise IllegalTransition(f"client {cid!r} already reported or dropped")
        if event.update.round != state.round:
            raise IllegalTransition(f"upload for round {event.update.round} in round {state.round}")
        received = {**state.received_updates, cid: event.update}
        nxt = replace(state, phase=Phase.COLLECTING, received_updates=received)
        return _enter_aggregating(nxt) if not nxt.pending else nxt

    if isinstance(event, ClientDropped) and phase in (Phase.TRAINING, Phase.COLLECTING):
        cid = event.client_id
        if cid not in state.expected_clients:
            raise IllegalTransition(f"drop of unexpected client {cid!r}")
        if cid in state.received_updates or cid in state.dropped:
            return state
        nxt = replace(state, dropped=state.dropped | {cid})
        if not nxt.pending and phase is Phase.COLLECTING:
            return _enter_aggregating(nxt)
        if not nxt.pending:
            return _enter_aggregating(replace(nxt, phase=Phase.COLLECTING))
        return nxt

    if isinstance(event, DeadlineExpired):
        if phase is Phase.TRAINING:
            return replace(state, phase=Phase.COLLECTING)
        if phase is Phase.COLLECTING:
            return _enter_aggregating(state)

    if isinstance(event, AggregationResult) and phase is Phase.AGGREGATING:
        return replace(state, phase=Phase.DONE, model_version=event.model_version)

    raise IllegalTransition(f"{type(event).__name__} not valid in phase {phase.name}")
