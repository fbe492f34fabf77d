"""Single-path reliable transport with optional in-band XOR FEC.

``TransportConn`` holds both halves of an endpoint: the sender (NewReno
congestion control with SACK-driven loss marking, PRR, RTO) and the
receiver (reassembly, cumulative + selective acks, FEC repair and
feedback).  A connection object is a pure state machine: callers feed it
segments and timer expiries and forward the segments it returns.
"""

import bisect
import heapq
import math
from collections import deque
from dataclasses import dataclass, asdict
from enum import IntEnum
from typing import Callable, Optional

from . import codec
from .dfec import DfecController, DfecParams, RatioCache
from .netsim import HEADER_BYTES, MSS


class Kind(IntEnum):
    DATA = 0
    FEC = 1
    ACK = 2
    SYN = 3
    SYNACK = 4
    REQUEST = 5
    RST = 6


class Outcome(IntEnum):
    RECOVERED = 0
    FAILED = 1
    ACKED_UNUSED = 2


class ProtocolError(RuntimeError):
    pass


@dataclass(frozen=True)
class FecFeedback:
    block_id: int
    outcome: Outcome
    missing: tuple = ()


class Segment:
    """Unit of transmission; ack fields are only meaningful on ACK segments."""

    __slots__ = ("kind", "seq", "payload_len", "payload", "meta", "fec_block", "fec_flag",
                 "cum_ack", "sack", "feedback", "trigger", "echo", "data_ack",
                 "send_time", "retransmission", "option_stripped", "subflow", "dsack")

    def __init__(self, kind, seq=0, payload=b"", meta=0, fec_block=None, fec_flag=False,
                 send_time=0.0, retransmission=False, subflow=0):
        self.kind = kind
        self.seq = seq
        self.payload = payload
        self.payload_len = len(payload)
        self.meta = meta
        self.fec_block = fec_block
        self.fec_flag = fec_flag
        self.cum_ack = 0
        self.sack = ()
        self.feedback = None
        self.trigger = None
        self.echo = None
        self.data_ack = None
        self.send_time = send_time
        self.retransmission = retransmission
        self.option_stripped = False
        self.subflow = subflow
        self.dsack = False  # ack was triggered by data the receiver already held

    @property
    def end(self):
        return self.seq + self.payload_len

    @property
    def ack_info(self):
        if self.kind != Kind.ACK:
            return None
        return {"cum_ack": self.cum_ack, "sack_ranges": list(self.sack), "fec_feedback": self.feedback}

    def wire_size(self) -> int:
        if self.kind == Kind.DATA:
            return self.payload_len + HEADER_BYTES
        if self.kind == Kind.FEC:
            return len(self.fec_block.parity) + HEADER_BYTES
        return HEADER_BYTES

    def __repr__(self):
        return f"Segment({self.kind.name}, seq={self.seq}, len={self.payload_len})"


@dataclass
class TransportConfig:
    mss: int = MSS
    iw: int = 10
    initial_rto: float = 1.0
    min_rto: float = 0.2
    max_rto: float = 60.0
    prr: bool = True
    delayed_ack: bool = False
    delack_timeout: float = 0.04
    dupthresh: int = 3
    rwnd_bytes: int = 8 * 1024 * 1024
    fec_loss_srtts: float = 1.0
    ir_interval_rtts: float = 0.25
    ir_adapt_dupthresh: bool = False
    flush_on_idle: bool = False
    # None: recovered losses reduce the window only in IR mode
    recovered_is_loss: Optional[bool] = None

    def to_dict(self):
        return asdict(self)


class SendRec:
    __slots__ = ("seq", "end", "payload", "meta", "sent_time", "xmits", "sacked", "acked",
                 "lost", "in_flight", "idx", "sacks_above", "block_id", "fec_recovered", "holed")

    def __init__(self, seq, payload, meta, idx, now):
        self.seq = seq
        self.end = seq + len(payload)
        self.payload = payload
        self.meta = meta
        self.sent_time = now
        self.xmits = 1
        self.sacked = False
        self.acked = False
        self.lost = False
        self.in_flight = True
        self.idx = idx
        self.sacks_above = 0
        self.block_id = -1
        self.fec_recovered = False
        self.holed = False


class FecRec:
    __slots__ = ("block", "members", "sent_time", "in_flight", "done", "scan", "all_acked_at", "k")

    def __init__(self, block, members, now):
        self.block = block
        self.members = members
        self.sent_time = now
        self.in_flight = True
        self.done = False
        self.scan = 0
        self.all_acked_at = None
        self.k = len(members)


class SackRanges:
    """Sorted, merged list of [start, end) byte ranges held out of order."""

    __slots__ = ("starts", "ends")

    def __init__(self):
        self.starts = []
        self.ends = []

    def add(self, start, end):
        starts, ends = self.starts, self.ends
        i = bisect.bisect_left(starts, start)
        # merge with predecessor
        if i > 0 and ends[i - 1] >= start:
            i -= 1
            start = starts[i]
            end = max(end, ends[i])
            del starts[i]
            del ends[i]
        while i < len(starts) and starts[i] <= end:
            end = max(end, ends[i])
            del starts[i]
            del ends[i]
        starts.insert(i, start)
        ends.insert(i, end)

    def trim_below(self, seq):
        starts, ends = self.starts, self.ends
        while starts and ends[0] <= seq:
            del starts[0]
            del ends[0]
        if starts and starts[0] < seq:
            starts[0] = seq

    def ranges(self):
        return tuple(zip(self.starts, self.ends))

    def __len__(self):
        return len(self.starts)


class TransportConn:
    """Reliable transport endpoint (sender and receiver halves)."""

    def __init__(self, config: Optional[TransportConfig] = None, offer_fec: bool = False,
                 ir_mode: bool = False, dfec_params: Optional[DfecParams] = None,
                 require_fec: bool = False, subflow: int = 0, name: str = "conn",
                 ratio_cache: Optional[RatioCache] = None, cache_key=None):
        self.cfg = config or TransportConfig()
        self.name = name
        self.subflow = subflow
        self.offer_fec = offer_fec or ir_mode
        self.ir_mode = ir_mode
        self.require_fec = require_fec
        self.dfec_params = dfec_params or DfecParams()
        self.ratio_cache = ratio_cache
        self.cache_key = cache_key
        self.state = "idle"
        self.fec_enabled = False
        self.abort_reason = None
        self.role = None
        self.peer_ready = False

        # sender
        self.cwnd = float(self.cfg.iw)
        self.ssthresh = math.inf
        self.srtt = None
        self.rttvar = None
        self.rto = self.cfg.initial_rto
        self.snd_una = 0
        self.snd_nxt = 0
        self.pipe = 0
        self.dupack_count = 0
        self.dupack_threshold = self.cfg.dupthresh
        self._recs = []
        self._base = 0  # absolute index of _recs[0]
        self._by_seq = {}
        self._unsent = deque()
        self._unsent_bytes = 0
        self.app_closed = False
        self._lost_heap = []
        self._pending_fec = deque()
        self._block = []
        self._block_k = 0
        self._block_id = 0
        self._fec_out = {}
        self._fec_order = deque()
        self._holes = []
        self._high_sacked_idx = -1
        self.in_recovery = False
        self.in_loss = False
        self.recover_point = 0
        self._prr_delivered = 0
        self._prr_out = 0
        self._recover_fs = 1
        self.rto_deadline = None
        self.ir_deadline = None
        self.fec_deadline = None
        self.backoffs = 0
        self.dfec = None
        self._syn_time = 0.0
        self.waiting_request = False
        self.on_rto_hook: Optional[Callable] = None
        self.ca_increase: Optional[Callable] = None
        self.on_established: Optional[Callable] = None
        self.counters = {
            "sent": 0, "first_sent": 0, "retransmitted": 0, "bytes_first_sent": 0,
            "fec_sent": 0, "fec_recovered": 0, "fec_failed": 0, "fec_unused": 0, "fec_lost": 0,
            "fast_retransmits": 0, "rtos": 0, "loss_events": 0, "unknown_feedback": 0,
            "spurious_retransmits": 0, "acks_received": 0,
        }
        self.cwnd_samples = []
        self.record_cwnd = False

        # receiver
        self.rcv_nxt = 0
        self._ofo = {}
        self._sack = SackRanges()
        self.ofo_bytes = 0
        self._store = {}
        self._store_order = deque()
        self._seen_blocks = set()
        self.data_ack_fn: Optional[Callable] = None
        self._delack_pending = None
        self.delack_deadline = None
        self.rcv_counters = {"data_received": 0, "dup_received": 0, "fec_received": 0,
                             "recovered": 0, "failed": 0, "unused": 0, "dropped_unknown": 0}
        self.ofo_samples = []
        self.record_ofo = False

    # ------------------------------------------------------------------
    # handshake
    # ------------------------------------------------------------------

    def connect(self, now: float) -> Segment:
        """Initiator: emit the SYN carrying the FEC offer."""
        if self.state != "idle":
            raise ProtocolError("connect on a non-idle connection")
        self.state = "handshake"
        self.role = "sender"
        self._syn_time = now
        self.rto_deadline = now + self.rto
        return Segment(Kind.SYN, fec_flag=self.offer_fec, send_time=now, subflow=self.subflow)

    def abort(self, reason: str):
        self.state = "aborted"
        self.abort_reason = reason
        self.rto_deadline = None
        self.ir_deadline = None

    def _on_synack(self, seg: Segment, now: float):
        out = []
        if self.state != "handshake":
            return out
        if seg.option_stripped:
            self.abort("fec option stripped in transit")
            out.append(Segment(Kind.RST, send_time=now, subflow=self.subflow))
            return out
        self.fec_enabled = bool(seg.fec_flag and self.offer_fec)
        if self.require_fec and not self.fec_enabled:
            self.abort("fec required but not negotiated")
            out.append(Segment(Kind.RST, send_time=now, subflow=self.subflow))
            return out
        self.state = "established"
        self.rto_deadline = None
        self._rtt_sample(now - self._syn_time)
        if self.fec_enabled and not self.ir_mode:
            start = None
            if self.ratio_cache is not None and self.cache_key is not None:
                start = self.ratio_cache.get(self.cache_key, self.dfec_params.start_ratio)
            self.dfec = DfecController(self.dfec_params, start_ratio=start)
            self.dfec.start(now, self.srtt)
        if self.fec_enabled and self.ir_mode:
            self.ir_deadline = now + self.cfg.ir_interval_rtts * self.srtt
        if self.fec_enabled and (not self.ir_mode or self.cfg.ir_adapt_dupthresh):
            self.dupack_threshold = self._next_block_k()
        ack = Segment(Kind.ACK, fec_flag=self.fec_enabled, send_time=now, subflow=self.subflow)
        out.append(ack)
        if self.on_established:
            self.on_established(self, now)
        return out

    # ------------------------------------------------------------------
    # application interface (sender)
    # ------------------------------------------------------------------

    def write(self, data: bytes, meta_base: int = 0):
        """Queue application bytes; split into MSS chunks tagged with mapping words."""
        mss = self.cfg.mss
        mv = memoryview(data)
        seq = meta_base
        for off in range(0, len(data), mss):
            chunk = bytes(mv[off:off + mss])
            self._unsent.append((chunk, codec.pack_meta(seq, len(chunk))))
            seq += len(chunk)
        self._unsent_bytes += len(data)

    def write_chunk(self, payload: bytes, meta: int):
        self._unsent.append((payload, meta))
        self._unsent_bytes += len(payload)

    def close(self):
        self.app_closed = True

    @property
    def unsent_bytes(self) -> int:
        return self._unsent_bytes

    def all_acked(self) -> bool:
        return self.snd_una >= self.snd_nxt and not self._unsent

    def has_room(self) -> bool:
        return self.state == "established" and self.pipe + 1 <= self.cwnd + 1e-9

    def has_own_work(self) -> bool:
        """Retransmissions or parity waiting for window space."""
        return bool(self._pending_fec) or self._peek_lost() is not None

    def can_accept_chunk(self) -> bool:
        """Room for one new data segment after retransmissions and parity."""
        if not self.has_room() or self.waiting_request:
            return False
        if self.snd_nxt - self.snd_una >= self.cfg.rwnd_bytes:
            return False
        return not self.has_own_work()

    # ------------------------------------------------------------------
    # sender
    # ------------------------------------------------------------------

    def _next_block_k(self) -> int:
        if self.dfec is not None:
            return self.dfec.block_size()
        return self.cfg.dupthresh

    def _rtt_sample(self, r: float):
        if r <= 0:
            r = 1e-6
        if self.srtt is None:
            self.srtt = r
            self.rttvar = r / 2.0
        else:
            self.rttvar = 0.75 * self.rttvar + 0.25 * abs(self.srtt - r)
            self.srtt = 0.875 * self.srtt + 0.125 * r
        self.rto = min(max(self.srtt + 4.0 * self.rttvar, self.cfg.min_rto), self.cfg.max_rto)
        self.backoffs = 0

    def sender_tick(self, now: float) -> list:
        """Emit everything the window allows: retransmissions, parity, new data."""
        out = []
        if self.state != "established" or self.role != "sender":
            return out
        cfg_rwnd = self.cfg.rwnd_bytes
        while self.pipe + 1 <= self.cwnd + 1e-9:
            rec = self._pop_lost()
            if rec is not None:
                out.append(self._retransmit(rec, now))
                continue
            if self._pending_fec:
                out.append(self._send_fec(now))
                continue
            if self._unsent and not self.waiting_request and self.snd_nxt - self.snd_una < cfg_rwnd:
                out.append(self._send_new(now))
                continue
            if self._block and not self._unsent and (self.app_closed or self.cfg.flush_on_idle):
                self._close_block()
                continue
            break
        return out

    def _send_new(self, now):
        payload, meta = self._unsent.popleft()
        self._unsent_bytes -= len(payload)
        idx = self._base + len(self._recs)
        rec = SendRec(self.snd_nxt, payload, meta, idx, now)
        self._recs.append(rec)
        self._by_seq[rec.seq] = rec
        self.snd_nxt = rec.end
        self.pipe += 1
        c = self.counters
        c["sent"] += 1
        c["first_sent"] += 1
        c["bytes_first_sent"] += len(payload)
        if self.in_recovery:
            self._prr_out += 1
        if self.rto_deadline is None:
            self.rto_deadline = now + self.rto
        if self.fec_enabled:
            if not self._block:
                self._block_k = self._next_block_k()
                if not self.ir_mode or self.cfg.ir_adapt_dupthresh:
                    self.dupack_threshold = self._block_k
            rec.block_id = self._block_id
            self._block.append(rec)
            if not self.ir_mode and len(self._block) >= self._block_k:
                self._close_block()
        self._tick_dfec(now)
        return Segment(Kind.DATA, rec.seq, payload, meta, fec_flag=self.fec_enabled,
                       send_time=now, subflow=self.subflow)

    def _close_block(self):
        members = self._block
        self._block = []
        block = codec.encode_block([r.payload for r in members], [r.meta for r in members],
                                   [r.seq for r in members], block_id=self._block_id,
                                   subflow=self.subflow)
        self._block_id += 1
        self._pending_fec.append((block, members))

    def flush_block(self):
        """Close the open block now (used at stream end)."""
        if self._block:
            self._close_block()

    def _send_fec(self, now):
        block, members = self._pending_fec.popleft()
        fr = FecRec(block, members, now)
        self._fec_out[block.block_id] = fr
        self._fec_order.append(fr)
        self.pipe += 1
        self.counters["fec_sent"] += 1
        if self.in_recovery:
            self._prr_out += 1
        if self.rto_deadline is None:
            self.rto_deadline = now + self.rto
        return Segment(Kind.FEC, members[0].seq, b"", 0, fec_block=block, fec_flag=True,
                       send_time=now, subflow=self.subflow)

    def _retransmit(self, rec, now):
        rec.lost = False
        rec.in_flight = True
        rec.xmits += 1
        rec.sent_time = now
        self.pipe += 1
        c = self.counters
        c["sent"] += 1
        c["retransmitted"] += 1
        if self.in_recovery:
            self._prr_out += 1
        if self.rto_deadline is None or rec.seq == self.snd_una:
            # retransmitting the head restarts the timer
            self.rto_deadline = now + self.rto
        self._tick_dfec(now)
        return Segment(Kind.DATA, rec.seq, rec.payload, rec.meta, fec_flag=self.fec_enabled,
                       send_time=now, retransmission=True, subflow=self.subflow)

    def _peek_lost(self):
        heap = self._lost_heap
        while heap:
            rec = heap[0][1]
            if rec.lost and not rec.sacked and not rec.acked:
                return rec
            heapq.heappop(heap)
        return None

    def _pop_lost(self):
        rec = self._peek_lost()
        if rec is not None:
            heapq.heappop(self._lost_heap)
        return rec

    def _mark_lost(self, rec):
        if rec.lost or rec.sacked or rec.acked:
            return
        rec.lost = True
        if rec.in_flight:
            rec.in_flight = False
            self.pipe -= 1
        heapq.heappush(self._lost_heap, (rec.idx, rec))

    def _tick_dfec(self, now):
        d = self.dfec
        if d is not None and now >= d.state.period_deadline:
            before = d.ratio
            d.on_period_tick(now, self.srtt, self.counters["sent"], self.counters["retransmitted"])
            if d.ratio != before and self.ratio_cache is not None and self.cache_key is not None:
                self.ratio_cache.put(self.cache_key, d.ratio)

    def _loss_event(self, now, sent_end=None):
        """Enter recovery (one window reduction per episode).

        ``sent_end`` is the highest byte covered by the evidence; losses from
        data sent before the previous reduction do not reduce again.
        """
        if self.in_recovery or self.in_loss:
            return
        if sent_end is not None and sent_end <= self.recover_point:
            return
        self.counters["loss_events"] += 1
        self.ssthresh = max(self.cwnd / 2.0, 2.0)
        self.in_recovery = True
        self.recover_point = self.snd_nxt
        self._prr_delivered = 0
        self._prr_out = 0
        self._recover_fs = max(self.pipe, 1)
        if not self.cfg.prr:
            self.cwnd = self.ssthresh

    def _first_unacked(self):
        recs = self._recs
        for rec in recs:
            if not rec.acked and not rec.sacked:
                return rec
            if rec.seq >= self.snd_nxt:
                break
        return None

    def on_dupack(self, now: float):
        """Count a duplicate ack; fast-retransmit once the threshold is reached."""
        self.dupack_count += 1
        if self.in_recovery or self.in_loss:
            return False
        if self.dupack_count < self.dupack_threshold:
            return False
        rec = self._first_unacked()
        if rec is None or not rec.in_flight or rec.xmits > 1:
            return False
        self.counters["fast_retransmits"] += 1
        self._loss_event(now)
        self._mark_lost(rec)
        self._mark_holes(force=True)
        return True

    def _mark_holes(self, force=False):
        thresh = self.dupack_threshold
        keep = []
        for h in self._holes:
            if h.acked or h.sacked or h.lost or not h.in_flight:
                h.holed = False
                continue
            if h.sacks_above >= thresh and (force or self.in_recovery or self.in_loss):
                self._mark_lost(h)
                h.holed = False
                continue
            keep.append(h)
        self._holes = keep

    def _on_sacked(self, rec):
        """Bookkeeping for a newly selectively-acknowledged record."""
        rec.sacked = True
        if rec.lost:
            rec.lost = False
        idx = rec.idx
        for h in self._holes:
            if h.idx < idx:
                h.sacks_above += 1
        if idx > self._high_sacked_idx:
            start = max(self._high_sacked_idx + 1, self._base)
            recs, base = self._recs, self._base
            for i in range(start, idx):
                r = recs[i - base]
                if not r.sacked and not r.acked and r.in_flight and not r.lost and r.xmits == 1 and not r.holed:
                    r.sacks_above = 1
                    r.holed = True
                    self._holes.append(r)
            self._high_sacked_idx = idx

    def on_ack(self, ack: Segment, now: float) -> list:
        """Process an ACK/feedback segment; returns control segments to send (if any)."""
        kind = ack.kind
        if kind == Kind.SYNACK:
            return self._on_synack(ack, now)
        if kind == Kind.RST:
            self.abort("reset by peer")
            return []
        if kind == Kind.REQUEST:
            self.waiting_request = False
            return []
        if self.state != "established":
            return []
        if self.fec_enabled and ack.option_stripped:
            self.abort("fec option stripped mid-connection")
            return [Segment(Kind.RST, send_time=now, subflow=self.subflow)]
        c = self.counters
        c["acks_received"] += 1
        if ack.dsack:
            c["spurious_retransmits"] += 1
        if ack.echo is not None:
            self._rtt_sample(now - ack.echo)
        delivered = 0
        growth = 0
        cum = ack.cum_ack
        advanced = False
        if cum > self.snd_una:
            advanced = True
            recs = self._recs
            i = 0
            n = len(recs)
            while i < n and recs[i].end <= cum:
                rec = recs[i]
                if not rec.sacked:
                    growth += 1
                    if rec.in_flight:
                        delivered += 1
                if rec.in_flight:
                    rec.in_flight = False
                    self.pipe -= 1
                rec.acked = True
                rec.lost = False
                del self._by_seq[rec.seq]
                i += 1
            if i:
                del recs[:i]
                self._base += i
            self.snd_una = cum
            self.dupack_count = 0
            self.rto_deadline = now + self.rto if self.snd_una < self.snd_nxt else None
            if self._high_sacked_idx < self._base - 1:
                self._high_sacked_idx = self._base - 1
        trig = ack.trigger
        if trig is not None and trig >= self.snd_una:
            rec = self._by_seq.get(trig)
            if rec is not None and not rec.sacked and not rec.acked:
                if rec.in_flight:
                    rec.in_flight = False
                    self.pipe -= 1
                    delivered += 1
                growth += 1
                self._on_sacked(rec)
        fb = ack.feedback
        if fb is not None:
            g, d = self._on_feedback(fb, now)
            growth += g
            delivered += d
        elif not advanced and trig is not None and self.snd_una < self.snd_nxt:
            self.on_dupack(now)
        if self._holes:
            self._mark_holes()
        if self._fec_order:
            self._check_fec_loss(now)
        # congestion window
        if self.in_recovery or self.in_loss:
            if self.snd_una >= self.recover_point:
                if self.in_recovery and self.cfg.prr:
                    self.cwnd = max(self.ssthresh, 1.0)
                self.in_recovery = False
                self.in_loss = False
            elif self.in_recovery and self.cfg.prr:
                self._prr_update(delivered)
            elif self.in_loss:
                self._grow(growth)
        else:
            self._grow(growth)
        if self.record_cwnd:
            self.cwnd_samples.append((now, self.cwnd))
        self._tick_dfec(now)
        if self.snd_una >= self.snd_nxt and not self._fec_in_flight():
            self.rto_deadline = None
        return []

    def _fec_in_flight(self):
        return any(fr.in_flight for fr in self._fec_order)

    def _grow(self, n):
        if n <= 0:
            return
        if self.cwnd < self.ssthresh:
            self.cwnd = min(self.cwnd + n, max(self.ssthresh, self.cwnd))
            if self.cwnd < self.ssthresh:
                return
            return
        if self.ca_increase is not None:
            self.ca_increase(self, n)
        else:
            self.cwnd += n / self.cwnd

    def _prr_update(self, delivered):
        self._prr_delivered += delivered
        pipe = self.pipe
        if pipe > self.ssthresh:
            sndcnt = math.ceil(self._prr_delivered * self.ssthresh / self._recover_fs) - self._prr_out
        else:
            sndcnt = min(self.ssthresh - pipe, max(self._prr_delivered - self._prr_out, delivered) + 1)
        sndcnt = max(int(sndcnt), 0)
        self.cwnd = float(pipe + sndcnt)
        if self.cwnd < 1.0:
            self.cwnd = 1.0 if pipe == 0 else self.cwnd

    def _on_feedback(self, fb: FecFeedback, now):
        fr = self._fec_out.get(fb.block_id)
        if fr is None:
            self.counters["unknown_feedback"] += 1
            return 0, 0
        if fr.done:
            return 0, 0
        fr.done = True
        delivered = 0
        if fr.in_flight:
            fr.in_flight = False
            self.pipe -= 1
            delivered = 1
        growth = 0
        c = self.counters
        if fb.outcome == Outcome.RECOVERED:
            c["fec_recovered"] += 1
            reduce = self.cfg.recovered_is_loss
            if reduce is None:
                reduce = self.ir_mode
            if reduce:
                self._loss_event(now, fr.members[-1].end)
            for rec in fr.members:
                if rec.seq in fb.missing or (fb.missing == () and not (rec.acked or rec.sacked)):
                    rec.fec_recovered = True
        elif fb.outcome == Outcome.ACKED_UNUSED:
            c["fec_unused"] += 1
            growth = 1
        else:
            c["fec_failed"] += 1
            self._loss_event(now, fr.members[-1].end)
            missing = set(fb.missing)
            for rec in fr.members:
                if rec.seq in missing and not rec.acked and not rec.sacked:
                    if rec.xmits > 1 and rec.sent_time > fr.sent_time:
                        continue  # retransmission still on its way
                    self._mark_lost(rec)
        return growth, delivered

    def _check_fec_loss(self, now):
        order = self._fec_order
        srtt = self.srtt
        self.fec_deadline = None
        while order:
            fr = order[0]
            if fr.done:
                order.popleft()
                self._fec_out.pop(fr.block.block_id, None)
                continue
            if fr.all_acked_at is None:
                members = fr.members
                i = fr.scan
                while i < fr.k and (members[i].acked or members[i].sacked):
                    i += 1
                fr.scan = i
                if i < fr.k:
                    return
                fr.all_acked_at = now
            if now >= fr.all_acked_at + self.cfg.fec_loss_srtts * srtt:
                fr.done = True
                if fr.in_flight:
                    fr.in_flight = False
                    self.pipe -= 1
                self.counters["fec_lost"] += 1
                self._loss_event(now, fr.members[-1].end)
                order.popleft()
                # the _fec_out entry stays so late feedback is recognised
                continue
            self.fec_deadline = fr.all_acked_at + self.cfg.fec_loss_srtts * srtt
            return

    def on_rto(self, now: float) -> bool:
        """Retransmission timeout: collapse the window and resend the oldest segment."""
        self.rto_deadline = None
        if self.snd_una >= self.snd_nxt:
            for fr in self._fec_order:
                if fr.in_flight:
                    fr.in_flight = False
                    self.pipe -= 1
            return False
        c = self.counters
        c["rtos"] += 1
        self.ssthresh = max(self.cwnd / 2.0, 2.0)
        self.cwnd = 1.0
        self.rto = min(self.rto * 2.0, self.cfg.max_rto)
        self.backoffs += 1
        self.in_recovery = False
        self.in_loss = True
        self.recover_point = self.snd_nxt
        self.dupack_count = 0
        for rec in self._recs:
            if not rec.sacked and not rec.acked:
                if rec.in_flight:
                    rec.in_flight = False
                    self.pipe -= 1
                if not rec.lost:
                    rec.lost = True
                    heapq.heappush(self._lost_heap, (rec.idx, rec))
        for fr in self._fec_order:
            if fr.in_flight:
                fr.in_flight = False
                self.pipe -= 1
        for h in self._holes:
            h.holed = False
        self._holes = []
        self.rto_deadline = now + self.rto
        oldest = self._peek_lost()
        if self.on_rto_hook is not None and oldest is not None:
            self.on_rto_hook(self, oldest, now)
        return True

    def ir_schedule(self, now: float) -> bool:
        """Close the open parity block on the fixed fraction-of-RTT schedule."""
        if not self.ir_mode or not self.fec_enabled:
            return False
        self.ir_deadline = now + self.cfg.ir_interval_rtts * self.srtt
        if self._block:
            self._close_block()
            return True
        return False

    def next_deadline(self) -> float:
        d = math.inf
        if self.rto_deadline is not None and self.rto_deadline < d:
            d = self.rto_deadline
        if self.ir_deadline is not None and self.ir_deadline < d:
            d = self.ir_deadline
        if self.delack_deadline is not None and self.delack_deadline < d:
            d = self.delack_deadline
        if self.fec_deadline is not None and self.fec_deadline < d:
            d = self.fec_deadline
        return d

    def on_timer(self, now: float) -> list:
        """Run every expired timer; returns receiver-side segments (delayed acks)."""
        out = []
        if self.state == "handshake":
            if self.rto_deadline is not None and now >= self.rto_deadline:
                # SYN (or SYN-ACK) lost: resend with backoff
                self.rto = min(self.rto * 2.0, self.cfg.max_rto)
                self._syn_time = now
                self.rto_deadline = now + self.rto
                out.append(Segment(Kind.SYN, fec_flag=self.offer_fec, send_time=now, subflow=self.subflow))
            return out
        if self.state != "established":
            return out
        if self.rto_deadline is not None and now >= self.rto_deadline:
            self.on_rto(now)
        if self.ir_deadline is not None and now >= self.ir_deadline:
            self.ir_schedule(now)
        if self.fec_deadline is not None and now >= self.fec_deadline:
            self._check_fec_loss(now)
        if self.delack_deadline is not None and now >= self.delack_deadline:
            self.delack_deadline = None
            if self._delack_pending is not None:
                out.append(self._delack_pending)
                self._delack_pending = None
        return out

    # ------------------------------------------------------------------
    # receiver
    # ------------------------------------------------------------------

    def _make_ack(self, now, trigger=None, echo=None, feedback=None):
        a = Segment(Kind.ACK, fec_flag=self.fec_enabled, send_time=now, subflow=self.subflow)
        a.cum_ack = self.rcv_nxt
        a.sack = self._sack.ranges() if self._sack.starts else ()
        a.trigger = trigger
        a.echo = echo
        a.feedback = feedback
        if self.data_ack_fn is not None:
            a.data_ack = self.data_ack_fn()
        return a

    def receiver_on_segment(self, seg: Segment, now: float):
        """Handle an arriving segment; returns (segments to send back, delivered chunks).

        Delivered chunks are ``(seq, payload, meta)`` tuples in sequence order.
        """
        kind = seg.kind
        if kind == Kind.SYN:
            return self._on_syn(seg, now), []
        if self.state == "aborted":
            return [], []
        if kind == Kind.ACK:
            if not self.peer_ready:
                self.peer_ready = True
            return [], []
        if kind == Kind.RST:
            self.abort("reset by peer")
            return [], []
        if self.state != "established" or self.role != "receiver":
            self.rcv_counters["dropped_unknown"] += 1
            return [], []
        if self.fec_enabled and seg.option_stripped:
            self.abort("fec option stripped mid-connection")
            return [Segment(Kind.RST, send_time=now, subflow=self.subflow)], []
        if kind == Kind.DATA:
            return self._on_data(seg, now)
        if kind == Kind.FEC:
            return self._on_fec(seg, now)
        self.rcv_counters["dropped_unknown"] += 1
        return [], []

    def _on_syn(self, seg, now):
        if self.state not in ("idle", "established"):
            return []
        if seg.option_stripped:
            self.abort("fec option stripped in transit")
            return [Segment(Kind.RST, send_time=now, subflow=self.subflow)]
        self.role = "receiver"
        self.fec_enabled = bool(seg.fec_flag and self.offer_fec)
        self.state = "established"
        return [Segment(Kind.SYNACK, fec_flag=self.fec_enabled, send_time=now, subflow=self.subflow)]

    def _store_payload(self, seq, payload, meta):
        if seq not in self._store:
            self._store[seq] = (payload, meta)
            self._store_order.append(seq)

    def _accept(self, seq, payload, meta, delivered):
        """Place one segment; append any newly in-order chunks to ``delivered``."""
        end = seq + len(payload)
        if end <= self.rcv_nxt or seq in self._ofo:
            return False
        if seq < self.rcv_nxt:
            return False  # partial overlap never happens with fixed segmentation
        if seq == self.rcv_nxt:
            delivered.append((seq, payload, meta))
            self.rcv_nxt = end
            ofo = self._ofo
            while self.rcv_nxt in ofo:
                s = self.rcv_nxt
                p, m = ofo.pop(s)
                self.ofo_bytes -= len(p)
                delivered.append((s, p, m))
                self.rcv_nxt = s + len(p)
            if self._sack.starts:
                self._sack.trim_below(self.rcv_nxt)
        else:
            self._ofo[seq] = (payload, meta)
            self.ofo_bytes += len(payload)
            self._sack.add(seq, end)
        return True

    def _on_data(self, seg, now):
        rc = self.rcv_counters
        rc["data_received"] += 1
        delivered = []
        fresh = self._accept(seg.seq, seg.payload, seg.meta, delivered)
        if self.record_ofo and fresh:
            self.ofo_samples.append((now, self.ofo_bytes))
        if not fresh:
            rc["dup_received"] += 1
        elif self.fec_enabled:
            self._store_payload(seg.seq, seg.payload, seg.meta)
        ack = self._make_ack(now, trigger=seg.seq, echo=seg.send_time)
        ack.dsack = not fresh
        if self.cfg.delayed_ack and fresh and not self._ofo and not seg.retransmission:
            if self._delack_pending is None:
                self._delack_pending = ack
                self.delack_deadline = now + self.cfg.delack_timeout
                return [], delivered
            self._delack_pending = None
            self.delack_deadline = None
            return [ack], delivered
        if self._delack_pending is not None:
            self._delack_pending = None
            self.delack_deadline = None
        return [ack], delivered

    def _on_fec(self, seg, now):
        rc = self.rcv_counters
        rc["fec_received"] += 1
        block = seg.fec_block
        if block.block_id in self._seen_blocks:
            return [], []
        self._seen_blocks.add(block.block_id)
        store = self._store
        received = {}
        metas = {}
        for s, _ in block.members:
            item = store.get(s)
            if item is not None:
                received[s] = item[0]
                metas[s] = item[1]
        outcome = codec.try_recover(block, received, metas)
        delivered = []
        trigger = None
        if isinstance(outcome, codec.Recovered):
            rc["recovered"] += 1
            fb = FecFeedback(block.block_id, Outcome.RECOVERED, (outcome.seq,))
            if self._accept(outcome.seq, outcome.payload, outcome.meta, delivered):
                self._store_payload(outcome.seq, outcome.payload, outcome.meta)
            trigger = outcome.seq
        elif isinstance(outcome, codec.NotNeeded):
            rc["unused"] += 1
            fb = FecFeedback(block.block_id, Outcome.ACKED_UNUSED)
        else:
            rc["failed"] += 1
            fb = FecFeedback(block.block_id, Outcome.FAILED, outcome.missing)
        if self.record_ofo:
            self.ofo_samples.append((now, self.ofo_bytes))
        self._prune_store(block.members[0][0])
        if self._delack_pending is not None:
            self._delack_pending = None
            self.delack_deadline = None
        return [self._make_ack(now, trigger=trigger, echo=seg.send_time, feedback=fb)], delivered

    def _prune_store(self, first_member):
        limit = min(first_member, self.rcv_nxt)
        order, store = self._store_order, self._store
        while order and order[0] < limit:
            store.pop(order.popleft(), None)

    def counter_record(self) -> dict:
        """Flat counter export for metrics and time-series files."""
        rec = dict(self.counters)
        rec.update({f"rcv_{k}": v for k, v in self.rcv_counters.items()})
        rec["cwnd"] = self.cwnd
        rec["srtt"] = self.srtt
        rec["ratio"] = self.dfec.ratio if self.dfec else None
        return rec


def handshake(initiator: TransportConn, responder: TransportConn, want_fec: bool = True,
              strip: bool = False, now: float = 0.0):
    """Run the three-way exchange in-process.

    ``strip`` simulates a middlebox removing the option from the SYN.
    Returns the pair; on failure both ends are left in the aborted state.
    """
    initiator.offer_fec = want_fec or initiator.ir_mode
    syn = initiator.connect(now)
    if strip and syn.fec_flag:
        syn.fec_flag = False
        syn.option_stripped = True
    replies, _ = responder.receiver_on_segment(syn, now)
    for seg in replies:
        back = initiator.on_ack(seg, now)
        for b in back:
            responder.receiver_on_segment(b, now)
    if responder.state == "aborted" and initiator.state != "aborted":
        initiator.abort(responder.abort_reason)
    if initiator.state == "aborted" and responder.state != "aborted":
        responder.abort(initiator.abort_reason)
    return initiator, responder
