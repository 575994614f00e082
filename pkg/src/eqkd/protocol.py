"""Authenticated framing for the classical channel, plus the offline tag-file format.

Frame layout (little-endian)::

    "EQKD" | version u8 | type u8 | id u64 | payload length u32 | payload | MAC[16]

The MAC is a keyed BLAKE2b-128 over header and payload.
"""
from __future__ import annotations

import hashlib
import hmac
import json
import struct
from dataclasses import dataclass
from enum import IntEnum
from pathlib import Path

import numpy as np

from .cascade import PassRequest, SearchRequest, VerifyRequest
from .sifting import Announcement, SiftResponse

MAGIC = b"EQKD"
VERSION = 1
HEADER = struct.Struct("<4sBBQI")
HEADER_LEN = HEADER.size  # 18
MAC_LEN = 16


class MsgType(IntEnum):
    ANNOUNCEMENT = 1
    SIFT_RESPONSE = 2
    CASCADE_PARITY = 3
    CASCADE_SEARCH = 4
    VERIFY_HASH = 5
    PA_SEED = 6
    KEY_CONFIRM = 7
    CLOCK_PING = 8
    RATE_GATE = 9
    ABORT = 10


class ProtocolError(Exception):
    pass


class BadMagic(ProtocolError):
    pass


class BadMac(ProtocolError):
    pass


class Truncated(ProtocolError):
    pass


class UnknownType(ProtocolError):
    pass


# Message bodies that are not already defined by the pipeline modules.
@dataclass(frozen=True, eq=False)
class ParityReply:
    bits: np.ndarray

    def __eq__(self, other):
        return isinstance(other, type(self)) and np.array_equal(self.bits, other.bits)


@dataclass(frozen=True, eq=False)
class SearchReply(ParityReply):
    pass


@dataclass(frozen=True)
class VerifyReply:
    ok: bool


@dataclass(frozen=True, eq=False)
class PASeed:
    l: int
    n_z: int
    block_seqs: tuple
    phi_u: float
    lambda_ec: int
    seed: np.ndarray

    def __eq__(self, other):
        return (
            isinstance(other, PASeed)
            and (self.l, self.n_z, tuple(self.block_seqs), self.phi_u, self.lambda_ec)
            == (other.l, other.n_z, tuple(other.block_seqs), other.phi_u, other.lambda_ec)
            and np.array_equal(self.seed, other.seed)
        )


@dataclass(frozen=True)
class KeyConfirm:
    tag: bytes
    # Reply flag: 0 = tag offered, 1 = tags matched, 2 = mismatch.
    status: int = 0


@dataclass(frozen=True)
class ClockPing:
    pass


@dataclass(frozen=True)
class RateGateMsg:
    present: bool


@dataclass(frozen=True)
class Abort:
    # 0 = end of stream / clean shutdown, other codes are errors.
    code: int
    reason: str = ""


@dataclass
class Message:
    type: MsgType
    msg_id: int
    body: object

    def __eq__(self, other):
        return (
            isinstance(other, Message)
            and self.type == other.type
            and self.msg_id == other.msg_id
            and _body_eq(self.body, other.body)
        )


def _body_eq(a, b):
    if isinstance(a, SearchRequest) and isinstance(b, SearchRequest):
        return np.array_equal(np.asarray(a.ranges).reshape(-1, 3), np.asarray(b.ranges).reshape(-1, 3))
    return a == b


def _bits(b: np.ndarray) -> bytes:
    b = np.asarray(b, dtype=np.uint8)
    return struct.pack("<I", len(b)) + np.packbits(b).tobytes()


def _unbits(buf: memoryview, pos: int):
    (n,) = struct.unpack_from("<I", buf, pos)
    pos += 4
    nb = (n + 7) // 8
    if pos + nb > len(buf):
        raise Truncated("bit field runs past payload")
    bits = np.unpackbits(np.frombuffer(buf, np.uint8, nb, pos))[:n]
    return bits, pos + nb


_RANGE = np.dtype([("p", "<u4"), ("s", "<u4"), ("e", "<u4")])


def encode_body(body) -> tuple[MsgType, bytes]:
    """Payload bytes and type code for a message body."""
    if isinstance(body, Announcement):
        n = len(body.times)
        return MsgType.ANNOUNCEMENT, (
            struct.pack("<I", n)
            + np.asarray(body.times, "<i8").tobytes()
            + np.packbits(np.asarray(body.basis, np.uint8)).tobytes()
            + _bits(body.x_bits)
        )
    if isinstance(body, SiftResponse):
        idx = np.asarray(body.indices, "<u4")
        return MsgType.SIFT_RESPONSE, struct.pack("<I", len(idx)) + idx.tobytes()
    if isinstance(body, PassRequest):
        return MsgType.CASCADE_PARITY, struct.pack("<BIIQ", 0, body.pass_index, body.block_size, body.perm_seed)
    if isinstance(body, SearchReply):
        return MsgType.CASCADE_SEARCH, b"\x01" + _bits(body.bits)
    if isinstance(body, ParityReply):
        return MsgType.CASCADE_PARITY, b"\x01" + _bits(body.bits)
    if isinstance(body, SearchRequest):
        r = np.asarray(body.ranges, dtype=np.int64).reshape(-1, 3)
        arr = np.empty(len(r), _RANGE)
        arr["p"], arr["s"], arr["e"] = r[:, 0], r[:, 1], r[:, 2]
        return MsgType.CASCADE_SEARCH, b"\x00" + struct.pack("<I", len(r)) + arr.tobytes()
    if isinstance(body, VerifyRequest):
        return MsgType.VERIFY_HASH, struct.pack("<BQQ", 0, body.hash_seed, body.digest)
    if isinstance(body, VerifyReply):
        return MsgType.VERIFY_HASH, struct.pack("<BB", 1, int(body.ok))
    if isinstance(body, PASeed):
        seqs = np.asarray(body.block_seqs, "<u8")
        return MsgType.PA_SEED, (
            struct.pack("<IIdQI", body.l, body.n_z, body.phi_u, body.lambda_ec, len(seqs))
            + seqs.tobytes()
            + _bits(body.seed)
        )
    if isinstance(body, KeyConfirm):
        if len(body.tag) != 16:
            raise ValueError("confirmation tag must be 16 bytes")
        return MsgType.KEY_CONFIRM, struct.pack("<B", body.status) + body.tag
    if isinstance(body, ClockPing):
        return MsgType.CLOCK_PING, b""
    if isinstance(body, RateGateMsg):
        return MsgType.RATE_GATE, struct.pack("<B", int(body.present))
    if isinstance(body, Abort):
        return MsgType.ABORT, struct.pack("<H", body.code) + body.reason.encode()
    raise TypeError(f"cannot encode {type(body).__name__}")


def decode_body(mtype: int, msg_id: int, payload: bytes):
    buf = memoryview(payload)
    try:
        t = MsgType(mtype)
    except ValueError:
        raise UnknownType(f"unknown message type {mtype}") from None
    try:
        if t == MsgType.ANNOUNCEMENT:
            (n,) = struct.unpack_from("<I", buf, 0)
            pos = 4
            if pos + 8 * n + (n + 7) // 8 > len(buf):
                raise Truncated("announcement shorter than its count")
            times = np.frombuffer(buf, "<i8", n, pos).astype(np.int64)
            pos += 8 * n
            basis = np.unpackbits(np.frombuffer(buf, np.uint8, (n + 7) // 8, pos))[:n]
            pos += (n + 7) // 8
            x_bits, _ = _unbits(buf, pos)
            return Announcement(msg_id, times, basis, x_bits)
        if t == MsgType.SIFT_RESPONSE:
            (n,) = struct.unpack_from("<I", buf, 0)
            if 4 + 4 * n > len(buf):
                raise Truncated("sift response shorter than its count")
            return SiftResponse(msg_id, np.frombuffer(buf, "<u4", n, 4).astype(np.int64))
        if t == MsgType.CASCADE_PARITY:
            if buf[0] == 0:
                _, p, k, seed = struct.unpack_from("<BIIQ", buf, 0)
                return PassRequest(p, k, seed)
            return ParityReply(_unbits(buf, 1)[0])
        if t == MsgType.CASCADE_SEARCH:
            if buf[0] == 0:
                (n,) = struct.unpack_from("<I", buf, 1)
                if 5 + n * _RANGE.itemsize > len(buf):
                    raise Truncated("search request shorter than its count")
                arr = np.frombuffer(buf, _RANGE, n, 5)
                return SearchRequest(np.stack([arr["p"], arr["s"], arr["e"]], axis=1).astype(np.int64))
            return SearchReply(_unbits(buf, 1)[0])
        if t == MsgType.VERIFY_HASH:
            if buf[0] == 0:
                _, seed, digest = struct.unpack_from("<BQQ", buf, 0)
                return VerifyRequest(seed, digest)
            return VerifyReply(bool(buf[1]))
        if t == MsgType.PA_SEED:
            l, n_z, phi_u, lam, nseq = struct.unpack_from("<IIdQI", buf, 0)
            pos = struct.calcsize("<IIdQI")
            seqs = tuple(int(s) for s in np.frombuffer(buf, "<u8", nseq, pos))
            seed, _ = _unbits(buf, pos + 8 * nseq)
            return PASeed(l, n_z, seqs, phi_u, lam, seed)
        if t == MsgType.KEY_CONFIRM:
            if len(buf) < 17:
                raise Truncated("key confirm too short")
            return KeyConfirm(bytes(buf[1:17]), buf[0])
        if t == MsgType.CLOCK_PING:
            return ClockPing()
        if t == MsgType.RATE_GATE:
            return RateGateMsg(bool(buf[0]))
        if t == MsgType.ABORT:
            (code,) = struct.unpack_from("<H", buf, 0)
            return Abort(code, bytes(buf[2:]).decode(errors="replace"))
    except (struct.error, IndexError, ValueError) as exc:
        if isinstance(exc, ProtocolError):
            raise
        raise Truncated(f"malformed {t.name} payload: {exc}") from None
    raise UnknownType(f"unhandled message type {t}")


class Codec:
    """Frame encoder/decoder with a pluggable 16-byte MAC."""

    def __init__(self, mac_key: bytes, mac=None):
        self.mac_key = mac_key
        self._mac = mac or (lambda key, data: hashlib.blake2b(data, key=key, digest_size=MAC_LEN).digest())
        self.bad_mac_count = 0

    def encode(self, msg: Message | object, msg_id: int | None = None) -> bytes:
        if not isinstance(msg, Message):
            msg = Message(encode_body(msg)[0], msg_id or 0, msg)
        t, payload = encode_body(msg.body)
        frame = HEADER.pack(MAGIC, VERSION, t, msg.msg_id, len(payload)) + payload
        return frame + self._mac(self.mac_key, frame)

    def decode(self, frame: bytes) -> Message:
        if len(frame) < HEADER_LEN + MAC_LEN:
            raise Truncated(f"frame of {len(frame)} bytes is shorter than header + MAC")
        magic, version, t, msg_id, n = HEADER.unpack_from(frame, 0)
        if magic != MAGIC:
            raise BadMagic(f"bad magic {magic!r}")
        if len(frame) < HEADER_LEN + n + MAC_LEN:
            raise Truncated("frame shorter than its payload length")
        body_end = HEADER_LEN + n
        expect = self._mac(self.mac_key, bytes(frame[:body_end]))
        if not hmac.compare_digest(expect, bytes(frame[body_end : body_end + MAC_LEN])):
            self.bad_mac_count += 1
            raise BadMac("MAC check failed")
        if version != VERSION:
            raise ProtocolError(f"unsupported version {version}")
        return Message(MsgType(t) if t in MsgType._value2member_map_ else t, msg_id,
                       decode_body(t, msg_id, bytes(frame[HEADER_LEN:body_end])))

    @staticmethod
    def frame_length(header: bytes) -> int:
        """Total frame length given its 18 header bytes."""
        magic, _, _, _, n = HEADER.unpack_from(header, 0)
        if magic != MAGIC:
            raise BadMagic(f"bad magic {magic!r}")
        return HEADER_LEN + n + MAC_LEN


class RateGate:
    """Signal-present detector on 1 ms detection counts.

    Asserts once ``consecutive`` successive 1 ms counts exceed ``factor``
    times the expected dark count; de-asserts after as many successive
    counts fall below half that threshold.
    """

    def __init__(self, dark_rate_hz: float, factor: float = 10.0, consecutive: int = 50):
        self.threshold = factor * dark_rate_hz * 1e-3
        self.consecutive = consecutive
        self.present = False
        self._run = 0

    def feed(self, counts) -> int | None:
        """Process 1 ms counts; returns the index at which the state flipped to present."""
        flipped = None
        for i, c in enumerate(np.asarray(counts).tolist()):
            if not self.present:
                self._run = self._run + 1 if c > self.threshold else 0
                if self._run >= self.consecutive:
                    self.present, self._run = True, 0
                    flipped = i if flipped is None else flipped
            else:
                self._run = self._run + 1 if c < self.threshold / 2 else 0
                if self._run >= self.consecutive:
                    self.present, self._run = False, 0
        return flipped


def rate_gate(counts_1ms, dark_rate_hz: float) -> bool:
    """Signal-present decision after a run of 1 ms counts."""
    g = RateGate(dark_rate_hz)
    g.feed(counts_1ms)
    return g.present


def millisecond_counts(times, t_start_ps: int, t_end_ps: int) -> np.ndarray:
    """Detections per 1 ms bin over [t_start, t_end)."""
    n = max(int((t_end_ps - t_start_ps) // 1_000_000_000), 0)
    edges = t_start_ps + np.arange(n + 1, dtype=np.int64) * 1_000_000_000
    return np.diff(np.searchsorted(np.asarray(times), edges))


TAG_MAGIC = b"EQKDTAGS"
TAG_RECORD = np.dtype([("t", "<u8"), ("c", "u1")])


def write_tag_file(path, blocks, header: dict) -> int:
    """Write AcquisitionBlocks as packed (u64 time_ps, u8 channel) records."""
    blob = json.dumps(header, sort_keys=True).encode()
    n = 0
    with open(path, "wb") as f:
        f.write(TAG_MAGIC + struct.pack("<I", len(blob)) + blob)
        for blk in blocks:
            rec = np.empty(len(blk.times), TAG_RECORD)
            rec["t"] = blk.times
            rec["c"] = blk.channels
            f.write(rec.tobytes())
            n += len(rec)
    return n


def read_tag_file(path) -> tuple[dict, np.ndarray, np.ndarray]:
    data = Path(path).read_bytes()
    if data[:8] != TAG_MAGIC:
        raise BadMagic("not a tag file")
    (hlen,) = struct.unpack_from("<I", data, 8)
    header = json.loads(data[12 : 12 + hlen])
    rec = np.frombuffer(data, TAG_RECORD, offset=12 + hlen)
    return header, rec["t"].astype(np.int64), rec["c"].copy()
