"""Wire protocol: tagged message union and length-prefixed binary framing.

Frame layout, all integers big-endian:

    magic   4 bytes  "PHT1"
    version 1 byte   0x01
    type    1 byte   message variant tag
    length  4 bytes  payload byte count, unsigned
    payload          canonical JSON, UTF-8

Every message carries run_id, a per-sender monotonically increasing sequence
number, and the sender id. Oversized lengths are rejected from the header
alone, before any payload is read.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field

from .analysis import ValidatedResult
from .encoding import canonical_json_bytes
from .envelope import SealedPackage
from .errors import DecodeError
from .manifest import TrainManifest, manifest_from_dict, manifest_to_dict

MAGIC = b"PHT1"
VERSION = 0x01
HEADER_LEN = 10
MAX_PAYLOAD_DEFAULT = 256 * 1024 * 1024

TYPE_TRAIN_DISPATCH = 0x01
TYPE_ACK = 0x02
TYPE_SALT_OFFER = 0x03
TYPE_DATA_TRANSFER = 0x04
TYPE_RESULT_RETURN = 0x05
TYPE_ABORT = 0x06

ACK_OK = "OK"


@dataclass(frozen=True)
class TrainDispatch:
    run_id: str
    seq: int
    sender: str
    manifest: TrainManifest
    endpoints: tuple[tuple[str, str], ...] = ()  # (actor id, address), sorted


@dataclass(frozen=True)
class SaltOffer:
    run_id: str
    seq: int
    sender: str
    from_station: str
    to_station: str
    sealed_salt: SealedPackage


@dataclass(frozen=True)
class Ack:
    run_id: str
    seq: int
    sender: str
    status: str = ACK_OK


@dataclass(frozen=True)
class DataTransfer:
    run_id: str
    seq: int
    sender: str
    package: SealedPackage


@dataclass(frozen=True)
class ResultReturn:
    run_id: str
    seq: int
    sender: str
    result: ValidatedResult


@dataclass(frozen=True)
class Abort:
    run_id: str
    seq: int
    sender: str
    reason: str


Message = TrainDispatch | SaltOffer | Ack | DataTransfer | ResultReturn | Abort

_TYPE_BY_CLASS = {
    TrainDispatch: TYPE_TRAIN_DISPATCH,
    Ack: TYPE_ACK,
    SaltOffer: TYPE_SALT_OFFER,
    DataTransfer: TYPE_DATA_TRANSFER,
    ResultReturn: TYPE_RESULT_RETURN,
    Abort: TYPE_ABORT,
}


def _package_to_dict(pkg: SealedPackage) -> dict:
    return json.loads(pkg.to_bytes().decode("utf-8"))


def _package_from_dict(doc: dict) -> SealedPackage:
    return SealedPackage.from_bytes(canonical_json_bytes(doc))


def _payload_dict(msg: Message) -> dict:
    common = {"run_id": msg.run_id, "seq": msg.seq, "sender": msg.sender}
    if isinstance(msg, TrainDispatch):
        return {
            **common,
            "manifest": manifest_to_dict(msg.manifest),
            "endpoints": {k: v for k, v in msg.endpoints},
        }
    if isinstance(msg, Ack):
        return {**common, "status": msg.status}
    if isinstance(msg, SaltOffer):
        return {
            **common,
            "from_station": msg.from_station,
            "to_station": msg.to_station,
            "sealed_salt": _package_to_dict(msg.sealed_salt),
        }
    if isinstance(msg, DataTransfer):
        return {**common, "package": _package_to_dict(msg.package)}
    if isinstance(msg, ResultReturn):
        return {**common, "result": msg.result.to_dict()}
    if isinstance(msg, Abort):
        return {**common, "reason": msg.reason}
    raise TypeError(f"not a message: {msg!r}")


def _message_from_payload(type_byte: int, doc: dict) -> Message:
    run_id, seq, sender = doc["run_id"], doc["seq"], doc["sender"]
    if type_byte == TYPE_TRAIN_DISPATCH:
        return TrainDispatch(
            run_id,
            seq,
            sender,
            manifest_from_dict(doc["manifest"]),
            tuple(sorted(doc["endpoints"].items())),
        )
    if type_byte == TYPE_ACK:
        return Ack(run_id, seq, sender, doc["status"])
    if type_byte == TYPE_SALT_OFFER:
        return SaltOffer(
            run_id,
            seq,
            sender,
            doc["from_station"],
            doc["to_station"],
            _package_from_dict(doc["sealed_salt"]),
        )
    if type_byte == TYPE_DATA_TRANSFER:
        return DataTransfer(run_id, seq, sender, _package_from_dict(doc["package"]))
    if type_byte == TYPE_RESULT_RETURN:
        return ResultReturn(run_id, seq, sender, ValidatedResult.from_dict(doc["result"]))
    if type_byte == TYPE_ABORT:
        return Abort(run_id, seq, sender, doc["reason"])
    raise DecodeError(5, f"unknown type byte 0x{type_byte:02x}")


def message_type_name(msg: Message) -> str:
    return type(msg).__name__


def encode(msg: Message) -> bytes:
    payload = canonical_json_bytes(_payload_dict(msg))
    return (
        MAGIC
        + bytes([VERSION, _TYPE_BY_CLASS[type(msg)]])
        + struct.pack(">I", len(payload))
        + payload
    )


def check_header(header: bytes, max_payload: int = MAX_PAYLOAD_DEFAULT) -> tuple[int, int]:
    """Validate a 10-byte frame header; returns (type byte, payload length)."""
    if len(header) < HEADER_LEN:
        raise DecodeError(len(header), "truncated header")
    if header[:4] != MAGIC:
        raise DecodeError(0, f"bad magic {header[:4]!r}")
    if header[4] != VERSION:
        raise DecodeError(4, f"unsupported version 0x{header[4]:02x}")
    type_byte = header[5]
    if type_byte not in _TYPE_BY_CLASS.values():
        raise DecodeError(5, f"unknown type byte 0x{type_byte:02x}")
    (length,) = struct.unpack(">I", header[6:HEADER_LEN])
    if length > max_payload:
        raise DecodeError(6, f"payload length {length} exceeds limit {max_payload}")
    return type_byte, length


def decode(frame: bytes, max_payload: int = MAX_PAYLOAD_DEFAULT) -> Message:
    type_byte, length = check_header(frame[:HEADER_LEN], max_payload)
    if len(frame) < HEADER_LEN + length:
        raise DecodeError(len(frame), "truncated payload")
    if len(frame) > HEADER_LEN + length:
        raise DecodeError(HEADER_LEN + length, "trailing bytes after frame")
    payload = frame[HEADER_LEN:]
    try:
        doc = json.loads(payload.decode("utf-8"))
        return _message_from_payload(type_byte, doc)
    except DecodeError:
        raise
    except (ValueError, KeyError, TypeError) as exc:
        raise DecodeError(HEADER_LEN, f"bad payload: {exc}") from exc


def read_frame(stream, max_payload: int = MAX_PAYLOAD_DEFAULT) -> bytes | None:
    """Read one whole frame from a socket-like file object; None on EOF.

    The length check happens on the header alone, so an oversized frame is
    rejected before its payload is pulled off the wire.
    """
    header = _read_exact(stream, HEADER_LEN)
    if not header:
        return None
    if len(header) < HEADER_LEN:
        raise DecodeError(len(header), "truncated header")
    _, length = check_header(header, max_payload)
    payload = _read_exact(stream, length)
    if len(payload) < length:
        raise DecodeError(HEADER_LEN + len(payload), "truncated payload")
    return header + payload


def _read_exact(stream, n: int) -> bytes:
    buf = b""
    while len(buf) < n:
        chunk = stream.read(n - len(buf))
        if not chunk:
            break
        buf += chunk
    return buf
