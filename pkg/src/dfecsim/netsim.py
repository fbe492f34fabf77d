"""Deterministic discrete-event network simulation.

Links are store-and-forward FIFO queues with a byte bound, a serialization
rate and a propagation delay.  Packets refused by a full queue are tail
dropped; packets admitted to the queue are subject to an independent
loss-model draw when they reach the head of the queue.
"""

import heapq
import math
import zlib
from collections import deque
from dataclasses import dataclass, field, asdict
from typing import Callable, Optional

import numpy as np

from . import _accel

HEADER_BYTES = 64
MSS = 1448


# ---------------------------------------------------------------------------
# randomness
# ---------------------------------------------------------------------------

def rng_stream(seed: int, name: str) -> np.random.Generator:
    """Independent generator for one stochastic component of a run."""
    return np.random.default_rng([int(seed) & 0xFFFFFFFF, zlib.crc32(name.encode())])


# ---------------------------------------------------------------------------
# event loop
# ---------------------------------------------------------------------------

class EventQueue:
    """Min-heap of (time, insertion counter, callback, arg)."""

    __slots__ = ("_heap", "_counter")

    def __init__(self):
        self._heap = []
        self._counter = 0

    def push(self, time: float, fn: Callable, arg=None):
        self._counter += 1
        heapq.heappush(self._heap, (time, self._counter, fn, arg))

    def pop(self):
        return heapq.heappop(self._heap)

    def peek_time(self) -> float:
        return self._heap[0][0] if self._heap else math.inf

    def __len__(self):
        return len(self._heap)


class Simulator:
    def __init__(self):
        self.now = 0.0
        self.queue = EventQueue()
        self.events_processed = 0
        self._stopped = False

    def at(self, time: float, fn: Callable, arg=None):
        if time < self.now:
            time = self.now
        self.queue.push(time, fn, arg)

    def after(self, delay: float, fn: Callable, arg=None):
        self.queue.push(self.now + delay, fn, arg)

    def stop(self):
        self._stopped = True

    def run(self, until: float = math.inf, stop_when: Optional[Callable[[], bool]] = None):
        heap = self.queue._heap
        pop = heapq.heappop
        self._stopped = False
        n = 0
        while heap and not self._stopped:
            if heap[0][0] > until:
                self.now = until
                break
            t, _, fn, arg = pop(heap)
            self.now = t
            fn(arg)
            n += 1
            if stop_when is not None and stop_when():
                break
        self.events_processed += n
        return self.now


# ---------------------------------------------------------------------------
# loss models
# ---------------------------------------------------------------------------

class LossModel:
    """Base: never drops."""

    def drop(self) -> bool:
        return False

    def describe(self) -> dict:
        return {"kind": "none"}


class NoLoss(LossModel):
    pass


_CHUNK = 4096


class IidLoss(LossModel):
    def __init__(self, p: float, rng: np.random.Generator):
        if not 0.0 <= p <= 1.0:
            raise ValueError("loss probability must lie in [0, 1]")
        self.p = p
        self.rng = rng
        self._buf = []
        self._pos = 0

    def draws(self, n: int) -> np.ndarray:
        return (self.rng.random(n) < self.p).astype(np.uint8)

    def drop(self) -> bool:
        if self._pos >= len(self._buf):
            self._buf = self.draws(_CHUNK).tolist()
            self._pos = 0
        d = self._buf[self._pos]
        self._pos += 1
        return d != 0

    def describe(self):
        return {"kind": "iid", "p": self.p}


class GilbertElliottLoss(LossModel):
    """Two-state Markov channel: loss only in the Bad state."""

    def __init__(self, p_g2b: float, p_b2g: float, rng: np.random.Generator, drop_in_bad: float = 1.0):
        for v in (p_g2b, p_b2g, drop_in_bad):
            if not 0.0 <= v <= 1.0:
                raise ValueError("Gilbert-Elliott parameters must lie in [0, 1]")
        self.p_g2b = p_g2b
        self.p_b2g = p_b2g
        self.drop_in_bad = drop_in_bad
        self.rng = rng
        self.state = 0
        self._buf = []
        self._pos = 0

    def draws(self, n: int) -> np.ndarray:
        u_trans = self.rng.random(n)
        u_drop = self.rng.random(n) if self.drop_in_bad < 1.0 else u_trans
        drops, self.state = _accel.gilbert_elliott(
            u_trans, u_drop, self.p_g2b, self.p_b2g, self.drop_in_bad, self.state)
        return drops

    def drop(self) -> bool:
        if self._pos >= len(self._buf):
            self._buf = self.draws(_CHUNK).tolist()
            self._pos = 0
        d = self._buf[self._pos]
        self._pos += 1
        return d != 0

    def describe(self):
        return {"kind": "ge", "p_g2b": self.p_g2b, "p_b2g": self.p_b2g, "drop_in_bad": self.drop_in_bad}


class ScriptedLoss(LossModel):
    """Drops the packets whose admission index (0-based) is listed."""

    def __init__(self, drop_indices=(), predicate: Optional[Callable] = None):
        self.drop_indices = set(drop_indices)
        self.predicate = predicate
        self.index = 0

    def drop(self, pkt=None) -> bool:
        i = self.index
        self.index += 1
        if i in self.drop_indices:
            return True
        return bool(self.predicate and self.predicate(pkt))

    def describe(self):
        return {"kind": "scripted", "indices": sorted(self.drop_indices)}


def gilbert_elliot_params(target_loss: float, mean_burst: float):
    """Transition probabilities giving the requested stationary loss and mean burst.

    Loss probability is 1 in Bad and 0 in Good.
    """
    if not 0.0 < target_loss < 1.0:
        raise ValueError("target_loss must lie in (0, 1)")
    if mean_burst < 1.0:
        raise ValueError("mean_burst must be >= 1")
    p_b2g = 1.0 / mean_burst
    p_g2b = target_loss * p_b2g / (1.0 - target_loss)
    if p_g2b >= 1.0:
        raise ValueError(f"infeasible Gilbert-Elliott setting: p_g2b={p_g2b:.4f}")
    return {"p_g2b": p_g2b, "p_b2g": p_b2g}


@dataclass
class LossSpec:
    kind: str = "none"  # none | iid | ge
    rate: float = 0.0
    mean_burst: float = 2.0

    def build(self, rng: np.random.Generator) -> LossModel:
        if self.kind == "none" or (self.kind == "iid" and self.rate == 0.0):
            return NoLoss()
        if self.kind == "iid":
            return IidLoss(self.rate, rng)
        if self.kind == "ge":
            if self.rate == 0.0:
                return NoLoss()
            p = gilbert_elliot_params(self.rate, self.mean_burst)
            return GilbertElliottLoss(p["p_g2b"], p["p_b2g"], rng)
        raise ValueError(f"unknown loss kind {self.kind!r}")


# ---------------------------------------------------------------------------
# links
# ---------------------------------------------------------------------------

class Link:
    """One direction of a bottleneck."""

    def __init__(self, sim: Simulator, capacity_bps: float, prop_delay: float,
                 queue_bytes: int, loss: Optional[LossModel] = None, name: str = "link"):
        if capacity_bps <= 0:
            raise ValueError("capacity must be positive")
        if queue_bytes <= 0:
            raise ValueError("queue bound must be positive")
        if prop_delay < 0:
            raise ValueError("propagation delay must be non-negative")
        self.sim = sim
        self.capacity = float(capacity_bps)
        self.prop_delay = float(prop_delay)
        self.queue_bytes = int(queue_bytes)
        self.loss = loss or NoLoss()
        self.name = name
        self._scripted = isinstance(self.loss, ScriptedLoss)
        self._free_at = 0.0
        self._backlog = deque()  # (departure time, size)
        self._queued = 0
        self.injected = 0
        self.delivered = 0
        self.model_drops = 0
        self.queue_drops = 0
        self.bytes_delivered = 0
        self.drops_by_flow = {}
        self.strip_fec_option = False

    def queued_bytes(self, now: Optional[float] = None) -> int:
        if now is None:
            now = self.sim.now
        bl = self._backlog
        while bl and bl[0][0] <= now:
            self._queued -= bl.popleft()[1]
        return self._queued

    def transmit(self, pkt, size: int, deliver: Callable, flow=None):
        """Enqueue ``pkt``; ``deliver(pkt)`` runs at its arrival time unless dropped.

        Returns the arrival time, or None when the packet was dropped.
        """
        now = self.sim.now
        self.injected += 1
        queued = self.queued_bytes(now)
        if queued + size > self.queue_bytes:
            self.queue_drops += 1
            if flow is not None:
                self.drops_by_flow[flow] = self.drops_by_flow.get(flow, 0) + 1
            return None
        start = self._free_at if self._free_at > now else now
        dropped = self.loss.drop(pkt) if self._scripted else self.loss.drop()
        if dropped:
            # removed at the head of the queue without using the wire
            self._backlog.append((start, size))
            self._queued += size
            self.model_drops += 1
            return None
        done = start + size * 8.0 / self.capacity
        self._free_at = done
        self._backlog.append((done, size))
        self._queued += size
        arrival = done + self.prop_delay
        self.delivered += 1
        self.bytes_delivered += size
        if self.strip_fec_option and hasattr(pkt, "fec_flag") and pkt.fec_flag:
            pkt.option_stripped = True
            pkt.fec_flag = False
        self.sim.queue.push(arrival, deliver, pkt)
        return arrival

    def counters(self) -> dict:
        return {
            "link": self.name,
            "injected": self.injected,
            "delivered": self.delivered,
            "model_drops": self.model_drops,
            "queue_drops": self.queue_drops,
            "bytes_delivered": self.bytes_delivered,
        }


@dataclass
class LinkSpec:
    capacity_bps: float = 20e6
    rtt: float = 0.025
    loss: LossSpec = field(default_factory=LossSpec)
    queue_bytes: Optional[int] = None  # default: one bandwidth-delay product
    reverse_loss: LossSpec = field(default_factory=LossSpec)

    def bdp_bytes(self) -> int:
        return int(self.capacity_bps * self.rtt / 8.0)

    def queue_bound(self) -> int:
        if self.queue_bytes is not None:
            return int(self.queue_bytes)
        return max(self.bdp_bytes(), 2 * (MSS + HEADER_BYTES))

    def to_dict(self):
        return asdict(self)


@dataclass
class Path:
    """A duplex path: forward (data) link and reverse (ack) link."""
    name: str
    forward: Link
    reverse: Link
    spec: LinkSpec


def build_path(sim: Simulator, spec: LinkSpec, name: str, seed: int) -> Path:
    one_way = spec.rtt / 2.0
    fwd = Link(sim, spec.capacity_bps, one_way, spec.queue_bound(),
               spec.loss.build(rng_stream(seed, f"{name}.fwd.loss")), name=f"{name}.fwd")
    rev = Link(sim, spec.capacity_bps, one_way, spec.queue_bound(),
               spec.reverse_loss.build(rng_stream(seed, f"{name}.rev.loss")), name=f"{name}.rev")
    return Path(name, fwd, rev, spec)


@dataclass
class ScenarioTopology:
    b1: LinkSpec = field(default_factory=LinkSpec)
    b2: Optional[LinkSpec] = None
    shared: bool = False  # both flows share B1 (fairness runs)

    def to_dict(self):
        return asdict(self)


def table2_topology(b2_rtt: float = 0.025, b1_loss: float = 0.0, b2_loss: float = 0.0,
                    multipath: bool = True, loss_kind: str = "iid") -> ScenarioTopology:
    """Non-shared two-bottleneck topology: B1 20 Mb/s / 25 ms, B2 10 Mb/s."""
    b1 = LinkSpec(20e6, 0.025, LossSpec(loss_kind if b1_loss else "none", b1_loss))
    b2 = LinkSpec(10e6, b2_rtt, LossSpec(loss_kind if b2_loss else "none", b2_loss)) if multipath else None
    return ScenarioTopology(b1=b1, b2=b2)


@dataclass
class Network:
    sim: Simulator
    paths: list

    @property
    def links(self):
        out = []
        for p in self.paths:
            out.extend([p.forward, p.reverse])
        return out

    def counters(self):
        return [ln.counters() for ln in self.links]


def build_topology(sim: Simulator, topo: ScenarioTopology, seed: int, multipath: bool = None) -> Network:
    """Client and server joined by B1 (and B2 when present), each its own bottleneck."""
    if multipath is None:
        multipath = topo.b2 is not None
    paths = [build_path(sim, topo.b1, "b1", seed)]
    if multipath:
        if topo.b2 is None:
            raise ValueError("multipath topology requires a B2 link")
        paths.append(build_path(sim, topo.b2, "b2", seed))
    return Network(sim, paths)


# ---------------------------------------------------------------------------
# background traffic
# ---------------------------------------------------------------------------

BG_PACKET_BYTES = 1000


class _Sink:
    pass


class PacedStream:
    """Constant-rate datagram stream on a link (stand-in for rate-limited TCP)."""

    def __init__(self, sim, link, rate_pps, start, stop, size=BG_PACKET_BYTES):
        self.sim, self.link, self.size = sim, link, size
        self.interval = 1.0 / rate_pps
        self.stop = stop
        self.sent = 0
        sim.at(start, self._tick)

    def _tick(self, _):
        if self.sim.now >= self.stop:
            return
        self.link.transmit(None, self.size, _discard, flow="bg")
        self.sent += 1
        self.sim.after(self.interval, self._tick)


class OnOffDatagramFlow:
    """Poisson packet arrivals during Pareto ON periods, exponential OFF periods.

    ON and OFF durations are clipped to [on_off_min, on_off_max] seconds.
    With ``always_on`` the flow is a plain Poisson stream.
    """

    def __init__(self, sim, link, rate_pps, rng, start, stop, always_on=False,
                 size=BG_PACKET_BYTES, on_off_min=1.0, on_off_max=5.0, pareto_shape=1.5):
        self.sim, self.link, self.rng, self.size = sim, link, rng, size
        self.rate = rate_pps
        self.stop = stop
        self.always_on = always_on
        self.lo, self.hi, self.shape = on_off_min, on_off_max, pareto_shape
        self.sent = 0
        self._on_until = math.inf if always_on else start + self._on_len()
        sim.at(start, self._tick)

    def _on_len(self):
        return float(min(max((self.rng.pareto(self.shape) + 1.0) * self.lo, self.lo), self.hi))

    def _off_len(self):
        mean = 0.5 * (self.lo + self.hi)
        return float(min(max(self.rng.exponential(mean), self.lo), self.hi))

    def _tick(self, _):
        now = self.sim.now
        if now >= self.stop:
            return
        if now >= self._on_until:
            resume = now + self._off_len()
            self._on_until = resume + self._on_len()
            self.sim.at(resume, self._tick)
            return
        self.link.transmit(None, self.size, _discard, flow="bg")
        self.sent += 1
        self.sim.after(float(self.rng.exponential(1.0 / self.rate)), self._tick)


def _discard(_pkt):
    pass


@dataclass
class BackgroundSpec:
    load: float = 0.0  # mean fraction of the bottleneck capacity
    udp_share: float = 0.34
    udp_multiplier: float = 1.0
    duration: float = 3600.0


def background_traffic(sim: Simulator, link: Link, spec: BackgroundSpec, rng: np.random.Generator):
    """Populate ``link`` with paced streams and ON/OFF datagram flows.

    Paced streams draw their rate from an exponential with mean 150 pps;
    datagram flows draw their mean rate uniformly from [395, 995] pps.
    Flows are added until the expected offered load reaches
    ``load * capacity`` (the datagram part scaled by ``udp_multiplier``).
    """
    sources = []
    if spec.load <= 0:
        return sources
    pkt_bits = BG_PACKET_BYTES * 8
    budget_pps = spec.load * link.capacity / pkt_bits
    udp_budget = budget_pps * spec.udp_share * spec.udp_multiplier
    tcp_budget = budget_pps * (1.0 - spec.udp_share)
    offered = 0.0
    while offered < tcp_budget:
        rate = max(float(rng.exponential(150.0)), 10.0)
        sources.append(PacedStream(sim, link, rate, float(rng.uniform(0, 1.0)), spec.duration))
        offered += rate
    offered = 0.0
    while offered < udp_budget:
        rate = float(rng.uniform(395.0, 995.0))
        sources.append(OnOffDatagramFlow(sim, link, rate, rng, float(rng.uniform(0, 1.0)), spec.duration))
        # ON and OFF means are both about half the time
        offered += 0.5 * rate
    return sources
