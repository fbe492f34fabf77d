"""Connection layer over one or more transport subflows.

A ``Connection`` owns the application byte stream on both ends.  The
sending side splits it into MSS chunks, tags each chunk with a 64-bit
mapping word (connection sequence and length) and hands it to the
subflow picked by the min-SRTT scheduler.  The receiving side places
chunks by connection sequence, so bytes recovered from parity on any
subflow land in the right place.  Single-path protocols use the same
class with one subflow, where the mapping is the identity.
"""

import math
from dataclasses import dataclass
from typing import Callable, Optional

from . import codec
from .dfec import DfecParams, RatioCache
from .netsim import Path, Simulator
from .transport import Kind, Segment, TransportConfig, TransportConn

CONN_RCV_BUF = 8 * 1024 * 1024


@dataclass(frozen=True)
class OfoSample:
    time: float
    level: str  # "conn" or "sf<i>"
    bytes_queued: int


@dataclass(frozen=True)
class Mapping:
    subflow: int
    subflow_seq: int
    conn_seq: int
    length: int


class IntegrityError(AssertionError):
    pass


class Subflow:
    """Binds a sender/receiver endpoint pair to one duplex path."""

    def __init__(self, owner: "Connection", index: int, path: Path, sender: TransportConn,
                 receiver: TransportConn):
        self.owner = owner
        self.index = index
        self.path = path
        self.sender = sender
        self.receiver = receiver
        self.sim = owner.sim
        self.flow = owner.flow_id
        self._armed = {}
        self.established_at = None

    # wiring -----------------------------------------------------------

    def start(self, now):
        self.send_fwd([self.sender.connect(now)])
        self._arm(self.sender)

    def send_fwd(self, segs):
        fwd = self.path.forward
        for seg in segs:
            fwd.transmit(seg, seg.wire_size(), self._at_receiver, self.flow)

    def send_rev(self, segs):
        rev = self.path.reverse
        for seg in segs:
            rev.transmit(seg, seg.wire_size(), self._at_sender, self.flow)

    def tick(self, now):
        segs = self.sender.sender_tick(now)
        if segs:
            self.send_fwd(segs)
            self._arm(self.sender)

    def _at_receiver(self, seg: Segment):
        now = self.sim.now
        rx = self.receiver
        replies, delivered = rx.receiver_on_segment(seg, now)
        if replies:
            self.send_rev(replies)
        if delivered:
            self.owner.conn_receive(self, delivered, now)
        if seg.kind == Kind.ACK and self.owner.client_should_request():
            req = Segment(Kind.REQUEST, send_time=now, subflow=self.index)
            self.send_rev([req])
        if rx.cfg.delayed_ack:
            self._arm(rx)

    def _at_sender(self, seg: Segment):
        now = self.sim.now
        tx = self.sender
        was_up = tx.state == "established"
        out = tx.on_ack(seg, now)
        if seg.data_ack is not None and seg.data_ack > self.owner.data_ack:
            self.owner.data_ack = seg.data_ack
        if out:
            self.send_fwd(out)
        if seg.kind == Kind.REQUEST:
            self.owner.on_request(now)
        if not was_up and tx.state == "established":
            self.established_at = now
            self.owner.on_subflow_established(self, now)
        elif tx.state == "aborted":
            self.owner.on_subflow_aborted(self, now)
            return
        self.owner.pump(now)
        self._arm(tx)

    # timers -------------------------------------------------------------

    def _arm(self, ep: TransportConn):
        d = ep.next_deadline()
        if d == math.inf:
            return
        if d < self._armed.get(ep, math.inf):
            self._armed[ep] = d
            self.sim.at(d, self._fire, (ep, d))

    def _fire(self, arg):
        ep, t = arg
        if self._armed.get(ep) == t:
            del self._armed[ep]
        now = self.sim.now
        if ep.next_deadline() <= now:
            out = ep.on_timer(now)
            if ep is self.sender:
                if out:
                    self.send_fwd(out)
                if ep.state == "aborted":
                    return
                self.owner.pump(now)
            elif out:
                self.send_rev(out)
        self._arm(ep)

    def nudge(self, _=None):
        """Resend the final handshake ack while the client has not asked for data."""
        if not self.owner.waiting_request or self.sender.state != "established":
            return
        now = self.sim.now
        self.send_fwd([Segment(Kind.ACK, fec_flag=self.sender.fec_enabled, send_time=now,
                               subflow=self.index)])
        self.sim.after(max(self.sender.rto, 0.2), self.nudge)


class MinRttScheduler:
    """Lowest smoothed RTT among subflows with window space; ties go to the lowest index."""

    name = "minrtt"

    def pick(self, subflows, exclude=None):
        best = None
        best_rtt = math.inf
        for sf in subflows:
            if sf is exclude:
                continue
            tx = sf.sender
            if tx.srtt is None or not tx.can_accept_chunk():
                continue
            if tx.srtt < best_rtt:
                best, best_rtt = sf, tx.srtt
        return best


def lia_increase(conn: "Connection"):
    """Coupled congestion-avoidance increase shared by the subflows of ``conn``."""

    def increase(tx: TransportConn, n: int):
        live = [sf.sender for sf in conn.subflows if sf.sender.srtt]
        total = sum(t.cwnd for t in live)
        best = max(t.cwnd / t.srtt ** 2 for t in live)
        denom = sum(t.cwnd / t.srtt for t in live) ** 2
        alpha = total * best / denom
        tx.cwnd += n * min(alpha / total, 1.0 / tx.cwnd)

    return increase


class Connection:
    """Both ends of one (possibly multipath) connection."""

    def __init__(self, sim: Simulator, paths, *, fec: bool = False, ir_mode: bool = False,
                 dfec_params: Optional[DfecParams] = None, config: Optional[TransportConfig] = None,
                 fec_policy=None, coupled: bool = False, flow_id: str = "flow",
                 rcv_buf: int = CONN_RCV_BUF, require_fec: bool = False,
                 ratio_cache: Optional[RatioCache] = None, record: bool = False):
        self.sim = sim
        self.flow_id = flow_id
        self.cfg = config or TransportConfig()
        self.mss = self.cfg.mss
        self.rcv_buf = rcv_buf
        self.record = record
        self.scheduler = MinRttScheduler()
        if fec_policy is None:
            fec_policy = [fec] * len(paths)
        self.fec_policy = list(fec_policy)
        self.subflows = []
        for i, path in enumerate(paths):
            tx = TransportConn(self.cfg, offer_fec=self.fec_policy[i], ir_mode=ir_mode and self.fec_policy[i],
                               dfec_params=dfec_params, require_fec=require_fec, subflow=i,
                               name=f"{flow_id}.sf{i}.tx", ratio_cache=ratio_cache,
                               cache_key=path.name)
            rx = TransportConn(self.cfg, offer_fec=self.fec_policy[i], subflow=i, name=f"{flow_id}.sf{i}.rx")
            tx.record_cwnd = record
            rx.record_ofo = record
            sf = Subflow(self, i, path, tx, rx)
            if len(paths) > 1:
                tx.on_rto_hook = self._reinject
            rx.data_ack_fn = self._data_ack
            self.subflows.append(sf)
        if coupled and len(paths) > 1:
            inc = lia_increase(self)
            for sf in self.subflows:
                sf.sender.ca_increase = inc

        # sending side
        self.app_tx = bytearray()
        self.data_seq_next = 0
        self.data_ack = 0
        self.app_closed = False
        self.waiting_request = False
        self.request_at = None
        self._reinject_q = []
        self.mappings = []  # latest Mapping per scheduled chunk, in scheduling order
        self.reinjections = 0
        self.scheduler_log = []

        # receiving side
        self.app_rx = bytearray()
        self.rcv_nxt = 0
        self._ofo = {}
        self.ofo_bytes = 0
        self.ofo_samples = []
        self.duplicates = 0
        self._client_asked = False
        self.first_byte_at = None
        self.on_app_data: Optional[Callable] = None
        self.established_at = None
        self.aborted = False
        self.abort_reason = None
        self._pumping = False

    # application side -------------------------------------------------

    def start(self, now: float = 0.0, wait_for_request: bool = False):
        self.waiting_request = wait_for_request
        for sf in self.subflows:
            sf.start(now)

    def write(self, data: bytes):
        if self.app_closed:
            raise RuntimeError("write after close")
        self.app_tx += data
        if self.established_at is not None:
            self.pump(self.sim.now)

    def close(self):
        self.app_closed = True
        if self.established_at is not None:
            self.pump(self.sim.now)

    @property
    def bytes_delivered(self) -> int:
        return len(self.app_rx)

    def complete(self) -> bool:
        return self.app_closed and len(self.app_rx) == len(self.app_tx)

    # handshake / request ----------------------------------------------

    def on_subflow_established(self, sf: Subflow, now: float):
        if self.established_at is None:
            self.established_at = now
        if self.waiting_request and sf.index == 0:
            self.sim.after(max(sf.sender.rto, 0.2), sf.nudge)

    def on_subflow_aborted(self, sf: Subflow, now: float):
        if all(s.sender.state == "aborted" for s in self.subflows) or sf.index == 0:
            self.aborted = True
            self.abort_reason = sf.sender.abort_reason
            self.sim.stop()

    def client_should_request(self) -> bool:
        return self.waiting_request

    def on_request(self, now: float):
        if self.waiting_request:
            self.waiting_request = False
            self.request_at = now

    # sending ------------------------------------------------------------

    def _has_conn_data(self) -> bool:
        if self.waiting_request:
            return False
        return self.data_seq_next < len(self.app_tx) and self.data_seq_next - self.data_ack < self.rcv_buf

    def schedule(self, exclude=None) -> Optional[Subflow]:
        return self.scheduler.pick(self.subflows, exclude)

    def dss_wrap(self, sf: Subflow, payload: bytes, conn_seq: int) -> Mapping:
        """Hand one chunk to ``sf``; the mapping word travels with it (and inside parity)."""
        if len(payload) > self.mss:
            raise ValueError("chunk exceeds MSS")
        tx = sf.sender
        m = Mapping(sf.index, tx.snd_nxt + tx.unsent_bytes, conn_seq, len(payload))
        tx.write_chunk(payload, codec.pack_meta(conn_seq, len(payload)))
        self.mappings.append(m)
        return m

    def pump(self, now: float):
        if self._pumping or self.aborted:
            return
        self._pumping = True
        try:
            subflows = self.subflows
            for sf in subflows:
                if sf.sender.state == "established" and sf.sender.has_own_work():
                    sf.tick(now)
            while self._reinject_q:
                conn_seq, payload, origin = self._reinject_q[0]
                if conn_seq + len(payload) <= self.data_ack:
                    self._reinject_q.pop(0)
                    continue
                sf = self.schedule(exclude=origin)
                if sf is None:
                    break
                self._reinject_q.pop(0)
                self.dss_wrap(sf, payload, conn_seq)
                self.reinjections += 1
                sf.tick(now)
            mss = self.mss
            while self._has_conn_data():
                sf = self.schedule()
                if sf is None:
                    break
                seq = self.data_seq_next
                payload = bytes(self.app_tx[seq:seq + mss])
                self.data_seq_next = seq + len(payload)
                self.dss_wrap(sf, payload, seq)
                if self.record and len(subflows) > 1:
                    self.scheduler_log.append((now, sf.index))
                sf.tick(now)
            if self.app_closed and self.data_seq_next >= len(self.app_tx):
                for sf in subflows:
                    tx = sf.sender
                    if tx.state == "established" and not tx.app_closed:
                        tx.close()
                        sf.tick(now)
        finally:
            self._pumping = False

    def _reinject(self, tx: TransportConn, rec, now: float):
        """RTO on one subflow: reschedule its oldest chunk on the next-lowest-RTT subflow."""
        conn_seq, _ = codec.unpack_meta(rec.meta)
        if conn_seq + len(rec.payload) <= self.data_ack:
            return
        origin = self.subflows[tx.subflow]
        self._reinject_q.append((conn_seq, rec.payload, origin))

    # receiving ------------------------------------------------------------

    def _data_ack(self) -> int:
        return self.rcv_nxt

    def conn_receive(self, sf: Subflow, delivered, now: float):
        """Place subflow-ordered chunks by connection sequence; release the in-order prefix."""
        ofo = self._ofo
        before = len(self.app_rx)
        for _, payload, meta in delivered:
            conn_seq, length = codec.unpack_meta(meta)
            if length != len(payload):
                raise IntegrityError("mapping length disagrees with payload")
            if conn_seq < self.rcv_nxt or conn_seq in ofo:
                self.duplicates += 1
                if conn_seq in ofo and ofo[conn_seq] != payload:
                    raise IntegrityError("overlapping chunk with different content")
                continue
            if conn_seq == self.rcv_nxt:
                self.app_rx += payload
                self.rcv_nxt += length
                while self.rcv_nxt in ofo:
                    p = ofo.pop(self.rcv_nxt)
                    self.ofo_bytes -= len(p)
                    self.app_rx += p
                    self.rcv_nxt += len(p)
            else:
                ofo[conn_seq] = payload
                self.ofo_bytes += length
            if self.record:
                self.ofo_samples.append(OfoSample(now, "conn", self.ofo_bytes))
        if len(self.app_rx) > before:
            if self.first_byte_at is None:
                self.first_byte_at = now
            if self.on_app_data is not None:
                self.on_app_data(self, now)

    # reporting ------------------------------------------------------------

    def subflow_ofo_samples(self):
        out = []
        for sf in self.subflows:
            out.extend(OfoSample(t, f"sf{sf.index}", b) for t, b in sf.receiver.ofo_samples)
        return out

    def counters(self):
        return [sf.sender.counter_record() | {"subflow": sf.index} for sf in self.subflows]


def subflow_utilization(counters) -> list:
    """Share of first-transmitted data bytes carried by each subflow."""
    sent = [c["bytes_first_sent"] for c in counters]
    total = sum(sent)
    if total == 0:
        raise ValueError("utilization undefined: no data was sent")
    return [s / total for s in sent]
