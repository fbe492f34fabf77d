import pytest
from hypothesis import given, strategies as st

from dfecsim import codec
from dfecsim.codec import CodecUsageError, Failed, NotNeeded, Recovered


def test_three_member_xor_cancellation():
    a, b, c = b"\x01\x02\x03", b"\xf0\x0f\xaa", b"\x55\x66\x77"
    blk = codec.encode_block([a, b, c])
    out = codec.try_recover(blk, {0: a, 2: c})
    assert out == Recovered(1, b)
    assert blk.parity == bytes(x ^ y ^ z for x, y, z in zip(a, b, c))


def test_short_member_is_zero_padded_and_truncated_on_recovery():
    payloads = [b"abcdef", b"xy", b"0123456789"]
    blk = codec.encode_block(payloads, seqs=[10, 20, 30])
    assert len(blk.parity) == 10
    out = codec.try_recover(blk, {10: payloads[0], 30: payloads[2]})
    assert out.seq == 20 and out.payload == b"xy"


def test_nothing_missing_is_not_needed():
    blk = codec.encode_block([b"a", b"b"])
    assert codec.try_recover(blk, {0: b"a", 1: b"b"}) == NotNeeded()


@pytest.mark.parametrize("missing", [(0, 1), (1, 3), (0, 2, 3)])
def test_two_or_more_missing_fails_with_count(missing):
    payloads = [bytes([i]) * 8 for i in range(4)]
    blk = codec.encode_block(payloads)
    got = {i: p for i, p in enumerate(payloads) if i not in missing}
    out = codec.try_recover(blk, got)
    assert isinstance(out, Failed)
    assert out.missing_count == len(missing)
    assert out.missing == tuple(missing)


def test_meta_word_recovered_alongside_payload():
    payloads = [b"p" * 100, b"q" * 50, b"r" * 100]
    metas = [codec.pack_meta(s, len(p)) for s, p in zip((0, 100, 150), payloads)]
    blk = codec.encode_block(payloads, metas)
    out = codec.try_recover(blk, {0: payloads[0], 2: payloads[2]}, {0: metas[0], 2: metas[2]})
    assert codec.unpack_meta(out.meta) == (100, 50)


@pytest.mark.parametrize("conn_seq,length", [(0, 0), (1448, 1448), (2**48 - 1, 65535)])
def test_meta_round_trip(conn_seq, length):
    assert codec.unpack_meta(codec.pack_meta(conn_seq, length)) == (conn_seq, length)


@pytest.mark.parametrize("kwargs,match", [
    ({"payloads": []}, "at least one"),
    ({"payloads": [b"a", b"b"], "seqs": [3, 3]}, "strictly increasing"),
    ({"payloads": [b"a", b"b"], "metas": [0]}, "metas"),
])
def test_encode_rejects_malformed_input(kwargs, match):
    with pytest.raises(CodecUsageError, match=match):
        codec.encode_block(**kwargs)


def test_foreign_sequence_rejected():
    blk = codec.encode_block([b"a", b"b"])
    with pytest.raises(CodecUsageError):
        codec.try_recover(blk, {7: b"z"})


@pytest.mark.parametrize("fec,data,expected", [(1, 9, 0.1), (1, 4, 0.2), (0, 10, 0.0), (1, 255, 1 / 256)])
def test_overhead_fraction(fec, data, expected):
    assert codec.fec_overhead(fec, data) == pytest.approx(expected)


def test_overhead_undefined_for_empty_run():
    with pytest.raises(ValueError):
        codec.fec_overhead(0, 0)


payload_lists = st.lists(st.binary(min_size=0, max_size=64), min_size=1, max_size=40)


@given(payload_lists, st.data())
def test_any_single_erasure_recovers_bit_exact(payloads, data):
    blk = codec.encode_block(payloads)
    lost = data.draw(st.integers(0, len(payloads) - 1))
    got = {i: p for i, p in enumerate(payloads) if i != lost}
    out = codec.try_recover(blk, got)
    assert isinstance(out, Recovered)
    assert out.seq == lost and out.payload == payloads[lost]


@given(payload_lists)
def test_recover_each_matches_try_recover(payloads):
    blk = codec.encode_block(payloads)
    each = codec.recover_each(blk, payloads)
    assert each == payloads


@given(st.lists(st.binary(min_size=1, max_size=16), min_size=2, max_size=20), st.data())
def test_never_fabricates_with_two_erasures(payloads, data):
    blk = codec.encode_block(payloads)
    lost = data.draw(st.sets(st.integers(0, len(payloads) - 1), min_size=2, max_size=len(payloads)))
    got = {i: p for i, p in enumerate(payloads) if i not in lost}
    out = codec.try_recover(blk, got)
    assert isinstance(out, Failed) and out.missing_count == len(lost)
