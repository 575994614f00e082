import numpy as np
import pytest
from hypothesis import given, strategies as st

from eqkd.cascade import PassRequest, SearchRequest, VerifyRequest
from eqkd.protocol import (
    HEADER_LEN,
    MAC_LEN,
    Abort,
    BadMac,
    BadMagic,
    ClockPing,
    Codec,
    KeyConfirm,
    Message,
    MsgType,
    ParityReply,
    PASeed,
    ProtocolError,
    RateGate,
    RateGateMsg,
    SearchReply,
    Truncated,
    UnknownType,
    VerifyReply,
    millisecond_counts,
    rate_gate,
    read_tag_file,
    write_tag_file,
)
from eqkd.sifting import Announcement, SiftResponse
from eqkd.sim_link import AcquisitionBlock

KEY = bytes(range(32))
bits = st.lists(st.integers(0, 1), max_size=300).map(lambda b: np.array(b, np.uint8))


def _round_trip(body, msg_id=7):
    codec = Codec(KEY)
    frame = codec.encode(body, msg_id)
    msg = codec.decode(frame)
    assert msg == Message(msg.type, msg_id, body)
    return frame, msg


def test_clock_ping_frame_size():
    frame, msg = _round_trip(ClockPing(), 1)
    assert len(frame) == HEADER_LEN + MAC_LEN == 34
    assert msg.type == MsgType.CLOCK_PING


@pytest.mark.parametrize("body", [
    PassRequest(3, 64, 2**63 + 5),
    SearchRequest(np.array([[0, 16, 32], [2, 0, 4]])),
    VerifyRequest(11, 2**64 - 1),
    VerifyReply(True),
    KeyConfirm(b"t" * 16, 1),
    RateGateMsg(True),
    Abort(3, "clock lost"),
    PASeed(100, 1_638_400, (0, 1, 2), 0.0712, 497_387, np.array([1, 0, 1], np.uint8)),
])
def test_fixed_bodies_round_trip(body):
    _round_trip(body)


@given(st.lists(st.tuples(st.integers(0, 2**62), st.integers(0, 3)), max_size=200), st.integers(0, 2**64 - 1))
def test_announcement_round_trip(entries, block_id):
    entries.sort()
    times = np.array([t for t, _ in entries], np.int64)
    ch = np.array([c for _, c in entries], np.uint8)
    basis = (ch >> 1).astype(np.uint8)
    ann = Announcement(block_id, times, basis, (ch[basis == 1] & 1).astype(np.uint8))
    _round_trip(ann, block_id)


@given(st.lists(st.integers(0, 2**32 - 1), unique=True, max_size=300).map(sorted), st.integers(0, 2**64 - 1))
def test_sift_response_round_trip(idx, block_id):
    _round_trip(SiftResponse(block_id, np.array(idx, np.int64)), block_id)


@given(bits)
def test_parity_replies_round_trip(b):
    _, m1 = _round_trip(ParityReply(b))
    _, m2 = _round_trip(SearchReply(b))
    assert type(m1.body) is ParityReply and type(m2.body) is SearchReply


@given(st.binary(max_size=100), st.data())
def test_any_bit_flip_is_rejected(payload, data):
    codec = Codec(KEY)
    frame = bytearray(codec.encode(Abort(1, payload.hex()[:40])))
    pos = data.draw(st.integers(0, len(frame) - 1))
    frame[pos] ^= 1 << data.draw(st.integers(0, 7))
    with pytest.raises(ProtocolError):
        codec.decode(bytes(frame))


def test_error_kinds():
    codec = Codec(KEY)
    frame = codec.encode(RateGateMsg(False), 2)
    flipped = bytearray(frame)
    flipped[HEADER_LEN] ^= 0x01
    with pytest.raises(BadMac):
        codec.decode(bytes(flipped))
    assert codec.bad_mac_count == 1
    with pytest.raises(BadMagic):
        codec.decode(b"XXXX" + frame[4:])
    with pytest.raises(Truncated):
        codec.decode(frame[:-1])
    with pytest.raises(Truncated):
        codec.decode(frame[:10])
    # A well-formed frame of an unassigned type, authenticated with the right key.
    raw = b"EQKD\x01\x63" + (0).to_bytes(8, "little") + (0).to_bytes(4, "little")
    with pytest.raises(UnknownType):
        codec.decode(raw + codec._mac(KEY, raw))
    with pytest.raises(BadMac):
        Codec(b"other key" * 4).decode(frame)


def test_rate_gate_examples():
    rng = np.random.default_rng(0)
    dark = 400.0
    assert not rate_gate(rng.poisson(dark * 1e-3, 1000), dark)
    g = RateGate(dark)
    flip = g.feed(np.concatenate([rng.poisson(0.4, 200), rng.poisson(100 * 0.4, 200)]))
    assert g.present and 200 <= flip < 250
    spike = rng.poisson(0.4, 1000)
    spike[500] = 1000
    assert not rate_gate(spike, dark)


def test_rate_gate_deasserts():
    g = RateGate(100.0)
    g.feed(np.full(60, 50))
    assert g.present
    g.feed(np.zeros(60))
    assert not g.present


def test_millisecond_counts():
    t = np.array([0, 10, 999_999_999, 1_000_000_000, 2_500_000_000], np.int64)
    assert millisecond_counts(t, 0, 3_000_000_000).tolist() == [3, 1, 1]


def test_tag_file_round_trip(tmp_path):
    blocks = [
        AcquisitionBlock("alice", i, 0, 1, np.array([i * 10, i * 10 + 5], np.int64), np.array([0, 3], np.uint8))
        for i in range(3)
    ]
    path = tmp_path / "a.tags"
    assert write_tag_file(path, blocks, {"seed": 4, "side": "alice"}) == 6
    header, t, c = read_tag_file(path)
    assert header == {"seed": 4, "side": "alice"}
    assert t.tolist() == [0, 5, 10, 15, 20, 25]
    assert c.tolist() == [0, 3] * 3
    path.write_bytes(b"garbage!" + path.read_bytes()[8:])
    with pytest.raises(BadMagic):
        read_tag_file(path)
