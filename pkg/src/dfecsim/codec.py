"""Systematic XOR block erasure coding over segment payloads.

One parity payload covers a block of k data payloads and repairs any
single missing member.  Members of unequal length are zero-padded to the
block maximum; each member's true length is kept so recovery truncates.
Alongside the payload parity, a 64-bit metadata word per member (the
connection-level mapping) is XORed into ``covered_meta``.
"""

from dataclasses import dataclass, field
from typing import Mapping, Optional, Sequence

import numpy as np

from . import _accel


class CodecUsageError(ValueError):
    """Raised on malformed codec input."""


@dataclass
class FecBlock:
    block_id: int
    members: tuple  # ((seq, length), ...), strictly increasing seq
    parity: bytes
    covered_meta: int = 0
    subflow: int = 0

    @property
    def k(self) -> int:
        return len(self.members)

    def member_seqs(self):
        return [s for s, _ in self.members]


@dataclass(frozen=True)
class Recovered:
    seq: int
    payload: bytes
    meta: Optional[int] = None


@dataclass(frozen=True)
class NotNeeded:
    pass


@dataclass(frozen=True)
class Failed:
    missing_count: int
    missing: tuple = field(default=())


def _pack(payloads: Sequence[bytes], width: int) -> np.ndarray:
    buf = b"".join(bytes(p).ljust(width, b"\0") for p in payloads)
    return np.frombuffer(buf, dtype=np.uint8).reshape(len(payloads), width)


def xor_payloads(payloads: Sequence[bytes], width: Optional[int] = None) -> bytes:
    """XOR of payloads zero-padded to ``width`` (default: the longest)."""
    if width is None:
        width = max((len(p) for p in payloads), default=0)
    if width == 0:
        return b""
    return _accel.xor_fold(_pack(payloads, width)).tobytes()


def encode_block(payloads, metas=None, seqs=None, block_id: int = 0, subflow: int = 0) -> FecBlock:
    """Build the parity block for ``payloads``.

    ``seqs`` defaults to ``0..k-1`` and must be strictly increasing.
    ``metas`` defaults to all-zero words.
    """
    payloads = list(payloads)
    if not payloads:
        raise CodecUsageError("encode_block needs at least one payload")
    if metas is None:
        metas = [0] * len(payloads)
    if len(metas) != len(payloads):
        raise CodecUsageError("metas and payloads differ in length")
    if seqs is None:
        seqs = range(len(payloads))
    seqs = list(seqs)
    if len(seqs) != len(payloads):
        raise CodecUsageError("seqs and payloads differ in length")
    for a, b in zip(seqs, seqs[1:]):
        if b <= a:
            raise CodecUsageError("member sequence numbers must be strictly increasing")
    meta = 0
    for m in metas:
        meta ^= int(m)
    members = tuple((int(s), len(p)) for s, p in zip(seqs, payloads))
    return FecBlock(block_id, members, xor_payloads(payloads), meta, subflow)


def try_recover(block: FecBlock, received: Mapping[int, bytes], received_meta: Optional[Mapping[int, int]] = None):
    """Attempt single-erasure repair.

    Returns ``Recovered`` when exactly one member is absent from
    ``received``, ``NotNeeded`` when none is, ``Failed`` otherwise.
    """
    lengths = dict(block.members)
    for seq in received:
        if seq not in lengths:
            raise CodecUsageError(f"sequence {seq} is not a member of block {block.block_id}")
    missing = [s for s, _ in block.members if s not in received]
    if not missing:
        return NotNeeded()
    if len(missing) > 1:
        return Failed(len(missing), tuple(missing))
    seq = missing[0]
    width = len(block.parity)
    rows = [block.parity]
    rows.extend(received[s] for s, _ in block.members if s != seq)
    payload = xor_payloads(rows, width)[: lengths[seq]]
    meta = None
    if received_meta is not None:
        meta = block.covered_meta
        for s, _ in block.members:
            if s != seq:
                meta ^= received_meta[s]
    return Recovered(seq, payload, meta)


def recover_each(block: FecBlock, payloads: Sequence[bytes]) -> list:
    """Recover every member as if it alone were erased.

    ``payloads`` are the members in block order.  Runs in O(k * width)
    using prefix/suffix XORs, so whole blocks can be checked cheaply.
    """
    if len(payloads) != block.k:
        raise CodecUsageError("payload count does not match block size")
    width = len(block.parity)
    rows = _pack(payloads, width)
    parity = np.frombuffer(block.parity, dtype=np.uint8)
    out = _accel.leave_one_out(rows, parity)
    return [out[i, : n].tobytes() for i, (_, n) in enumerate(block.members)]


def fec_overhead(fec_packets: int, data_packets: int) -> float:
    """Fraction of transmitted packets that carried parity."""
    if fec_packets < 0 or data_packets < 0:
        raise ValueError("packet counts must be non-negative")
    total = fec_packets + data_packets
    if total == 0:
        raise ValueError("overhead undefined when nothing was sent")
    return fec_packets / total


def pack_meta(conn_seq: int, length: int) -> int:
    """64-bit mapping word: connection sequence (48 bits) and length (16 bits)."""
    return ((conn_seq & 0xFFFF_FFFF_FFFF) << 16) | (length & 0xFFFF)


def unpack_meta(word: int):
    return word >> 16, word & 0xFFFF
