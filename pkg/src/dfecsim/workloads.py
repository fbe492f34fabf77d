"""Application workloads, run harness and comparison metrics."""

import math
import statistics
from dataclasses import dataclass, field, asdict
from typing import Optional

import numpy as np

from . import codec
from .dfec import DfecParams, RatioCache
from .multipath import Connection, subflow_utilization
from .netsim import (BackgroundSpec, LinkSpec, LossSpec, ScenarioTopology, Simulator,
                     background_traffic, build_path, build_topology, rng_stream)
from .transport import TransportConfig

KIB = 1024
MIB = 1024 * 1024

PROTOCOLS = {
    "Tcp": {"multipath": False, "fec": False, "ir": False},
    "TcpDfec": {"multipath": False, "fec": True, "ir": False},
    "TcpIr": {"multipath": False, "fec": True, "ir": True},
    "Mptcp": {"multipath": True, "fec": False, "ir": False},
    "MptcpDfec": {"multipath": True, "fec": True, "ir": False},
}


class UsageError(ValueError):
    pass


# ---------------------------------------------------------------------------
# profiles
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class WebProfile:
    name: str
    objects: int
    total_kib: int
    sigma: float = 1.0

    @property
    def total_bytes(self) -> int:
        return self.total_kib * KIB

    def object_sizes(self, seed: int = 0) -> list:
        """Log-normal split of the total, renormalized so the sizes sum exactly."""
        if self.objects < 1:
            raise UsageError("a web profile needs at least one object")
        rng = rng_stream(seed, f"web.{self.name}")
        raw = rng.lognormal(0.0, self.sigma, self.objects)
        sizes = np.floor(raw / raw.sum() * self.total_bytes).astype(np.int64)
        sizes = np.maximum(sizes, 1)
        diff = self.total_bytes - int(sizes.sum())
        # hand the rounding residue to the largest objects
        order = np.argsort(-sizes, kind="stable")
        i = 0
        while diff != 0:
            j = order[i % self.objects]
            step = 1 if diff > 0 else -1
            if sizes[j] + step >= 1:
                sizes[j] += step
                diff -= step
            i += 1
        return [int(s) for s in sizes]


WEB_PROFILES = {
    "google": WebProfile("google", 6, 1080),
    "youtube": WebProfile("youtube", 26, 3204),
    "espn": WebProfile("espn", 111, 6072),
}


@dataclass(frozen=True)
class VideoProfile:
    duration: float = 60.0
    bitrate: float = 3.4e6  # bits per second
    fps: int = 25
    gop: str = "IBBPBBPBBPBB"
    weights: tuple = (("I", 6.0), ("P", 3.0), ("B", 1.0))
    startup_delay: float = 1.0

    @property
    def n_frames(self) -> int:
        return int(round(self.duration * self.fps))

    @property
    def mean_frame_bytes(self) -> float:
        return self.bitrate / (8.0 * self.fps)

    def frame_sizes(self) -> list:
        """Integer frame sizes following the GOP weights; total = bitrate * duration / 8."""
        w = dict(self.weights)
        n = self.n_frames
        pattern = [w[c] for c in self.gop]
        raw = np.array([pattern[i % len(pattern)] for i in range(n)], dtype=float)
        total = int(round(self.mean_frame_bytes * n))
        sizes = np.floor(raw / raw.sum() * total).astype(np.int64)
        rem = total - int(sizes.sum())
        sizes[:rem] += 1  # rem < n
        return [int(s) for s in sizes]


# ---------------------------------------------------------------------------
# metrics
# ---------------------------------------------------------------------------

@dataclass
class RunMetrics:
    protocol: str
    workload: str
    seed: int
    completion_time: float = math.nan
    handshake_time: float = math.nan
    fec_overhead: float = 0.0
    full_frame_ratio: float = math.nan
    utilization: list = field(default_factory=list)
    retransmissions: int = 0
    data_sent: int = 0
    fec_sent: int = 0
    fec_recovered: int = 0
    fec_failed: int = 0
    fec_unused: int = 0
    fec_lost: int = 0
    rtos: int = 0
    fast_retransmits: int = 0
    bytes_sent: int = 0
    bytes_delivered: int = 0
    goodput_bps: float = math.nan
    final_ratio: float = math.nan
    mean_ratio: float = math.nan
    integrity_ok: bool = True
    completed: bool = True
    aborted: bool = False
    events: int = 0
    timeseries: list = field(default_factory=list, repr=False)  # (time, metric, value)

    def row(self) -> dict:
        """Flat CSV row (time series excluded)."""
        d = asdict(self)
        d.pop("timeseries")
        util = d.pop("utilization")
        for i in range(2):
            d[f"util_sf{i}"] = util[i] if i < len(util) else math.nan
        return d


# ---------------------------------------------------------------------------
# harness
# ---------------------------------------------------------------------------

@dataclass
class RunSetup:
    protocol: str = "Tcp"
    topology: ScenarioTopology = field(default_factory=ScenarioTopology)
    seed: int = 0
    dfec: DfecParams = field(default_factory=DfecParams)
    transport: TransportConfig = field(default_factory=TransportConfig)
    background: BackgroundSpec = field(default_factory=BackgroundSpec)
    coupled: bool = False
    record: bool = False
    time_limit: float = 3600.0


def make_connection(setup: RunSetup, sim: Optional[Simulator] = None, paths=None,
                    flow_id: str = "flow", ratio_cache: Optional[RatioCache] = None) -> Connection:
    """Build the network for ``setup`` (unless ``paths`` is given) and one connection on it."""
    if setup.protocol not in PROTOCOLS:
        raise UsageError(f"unknown protocol {setup.protocol!r}")
    proto = PROTOCOLS[setup.protocol]
    if sim is None:
        sim = Simulator()
    if paths is None:
        if proto["multipath"] and setup.topology.b2 is None:
            raise UsageError(f"{setup.protocol} needs a topology with two bottlenecks")
        net = build_topology(sim, setup.topology, setup.seed, multipath=proto["multipath"])
        paths = net.paths
        if setup.background.load > 0:
            for p in paths:
                background_traffic(sim, p.forward, setup.background,
                                   rng_stream(setup.seed, f"bg.{p.name}"))
    conn = Connection(sim, paths, fec=proto["fec"], ir_mode=proto["ir"], dfec_params=setup.dfec,
                      config=setup.transport, coupled=setup.coupled, flow_id=flow_id,
                      record=setup.record, ratio_cache=ratio_cache)
    return conn


def payload(seed: int, size: int, name: str = "payload") -> bytes:
    return rng_stream(seed, name).bytes(size) if size else b""


def _collect(conn: Connection, m: RunMetrics, t_start: float = 0.0):
    counters = conn.counters()
    data = sum(c["sent"] for c in counters)
    fec = sum(c["fec_sent"] for c in counters)
    m.data_sent = data
    m.fec_sent = fec
    m.retransmissions = sum(c["retransmitted"] for c in counters)
    m.fec_recovered = sum(c["fec_recovered"] for c in counters)
    m.fec_failed = sum(c["fec_failed"] for c in counters)
    m.fec_unused = sum(c["fec_unused"] for c in counters)
    m.fec_lost = sum(c["fec_lost"] for c in counters)
    m.rtos = sum(c["rtos"] for c in counters)
    m.fast_retransmits = sum(c["fast_retransmits"] for c in counters)
    m.fec_overhead = codec.fec_overhead(fec, data) if data + fec else 0.0
    m.bytes_sent = len(conn.app_tx)
    m.bytes_delivered = conn.bytes_delivered
    m.integrity_ok = bytes(conn.app_rx) == bytes(conn.app_tx[:len(conn.app_rx)])
    m.aborted = conn.aborted
    m.events = conn.sim.events_processed
    try:
        m.utilization = subflow_utilization(counters)
    except ValueError:
        m.utilization = [math.nan] * len(counters)
    if conn.established_at is not None:
        m.handshake_time = conn.established_at - t_start
    ratios = [sf.sender.dfec for sf in conn.subflows if sf.sender.dfec is not None]
    if ratios:
        d = ratios[0]
        m.final_ratio = d.ratio
        m.mean_ratio = time_average(d.history, conn.sim.now)
    if conn.record:
        m.timeseries = timeseries(conn)


def time_average(history, end: float, start: Optional[float] = None) -> float:
    """Time-weighted mean of a step function given as (time, value) change points."""
    if not history:
        return math.nan
    if start is None:
        start = history[0][0]
    if end <= start:
        return history[-1][1]
    total = 0.0
    for i, (t, v) in enumerate(history):
        t_next = history[i + 1][0] if i + 1 < len(history) else end
        lo, hi = max(t, start), min(t_next, end)
        if hi > lo:
            total += v * (hi - lo)
    # value in force at ``start`` if the first change point is later
    if history[0][0] > start:
        total += history[0][1] * (min(history[0][0], end) - start)
    return total / (end - start)


def timeseries(conn: Connection) -> list:
    out = []
    for sf in conn.subflows:
        i = sf.index
        out.extend((t, f"cwnd_sf{i}", v) for t, v in sf.sender.cwnd_samples)
        if sf.sender.dfec is not None:
            out.extend((t, f"ratio_sf{i}", v) for t, v in sf.sender.dfec.history)
    out.extend((s.time, f"ofo_{s.level}", s.bytes_queued) for s in conn.ofo_samples)
    out.extend((s.time, f"ofo_{s.level}", s.bytes_queued) for s in conn.subflow_ofo_samples())
    out.sort(key=lambda r: (r[0], r[1]))
    return out


def _run_until_done(conn: Connection, limit: float, extra_stop=None):
    sim = conn.sim
    stop = conn.complete if extra_stop is None else (lambda: conn.complete() or extra_stop())
    sim.run(until=limit, stop_when=stop)


# ---------------------------------------------------------------------------
# workloads
# ---------------------------------------------------------------------------

def run_bulk(conn: Connection, size_bytes: int, seed: int = 0, protocol: str = "",
             time_limit: float = 3600.0) -> RunMetrics:
    """Send ``size_bytes`` as fast as the transport allows; completion = last in-order byte."""
    sim = conn.sim
    t0 = sim.now
    m = RunMetrics(protocol, "bulk", seed)
    conn.write(payload(seed, size_bytes))
    conn.close()
    conn.start(t0)
    last = [None]

    def on_data(c, now):
        last[0] = now

    conn.on_app_data = on_data
    if size_bytes == 0:
        sim.run(until=t0 + time_limit, stop_when=lambda: conn.established_at is not None)
        m.completion_time = (conn.established_at - t0) if conn.established_at is not None else math.nan
    else:
        _run_until_done(conn, t0 + time_limit)
        m.completion_time = (last[0] - t0) if conn.complete() else math.nan
        if conn.complete():
            m.goodput_bps = size_bytes * 8.0 / m.completion_time
    m.completed = conn.complete()
    _collect(conn, m, t0)
    return m


def run_web(conn: Connection, profile: WebProfile, seed: int = 0, protocol: str = "",
            time_limit: float = 3600.0) -> RunMetrics:
    """All objects multiplexed on one connection after one request round trip."""
    sim = conn.sim
    t0 = sim.now
    m = RunMetrics(protocol, f"web:{profile.name}", seed)
    sizes = profile.object_sizes(seed)
    conn.write(payload(seed, sum(sizes)))
    conn.close()
    conn.start(t0, wait_for_request=True)
    last = [None]

    def on_data(c, now):
        last[0] = now

    conn.on_app_data = on_data
    _run_until_done(conn, t0 + time_limit)
    m.completed = conn.complete()
    m.completion_time = (last[0] - t0) if m.completed and last[0] is not None else math.nan
    if m.completed:
        m.goodput_bps = sum(sizes) * 8.0 / m.completion_time
    _collect(conn, m, t0)
    return m


def run_video(conn: Connection, profile: VideoProfile, seed: int = 0, protocol: str = "",
              time_limit: float = 3600.0) -> RunMetrics:
    """Deadline-driven frame delivery; returns the share of frames fully received in time."""
    sim = conn.sim
    t0 = sim.now
    m = RunMetrics(protocol, "video", seed)
    sizes = profile.frame_sizes()
    data = payload(seed, sum(sizes))
    ends = np.cumsum(sizes)
    arrival = [math.inf] * len(sizes)
    nxt = [0]
    origin = [None]

    def on_data(c, now):
        have = c.bytes_delivered
        i = nxt[0]
        while i < len(ends) and ends[i] <= have:
            arrival[i] = now
            i += 1
        nxt[0] = i

    conn.on_app_data = on_data
    offsets = np.concatenate(([0], ends))

    def emit(i):
        conn.write(data[offsets[i]:offsets[i + 1]])
        if i + 1 < len(sizes):
            sim.at(origin[0] + (i + 1) / profile.fps, emit, i + 1)
        else:
            conn.close()

    def established():
        return conn.established_at is not None

    conn.start(t0)
    sim.run(until=t0 + time_limit, stop_when=established)
    if conn.established_at is None:
        m.completed = False
        m.full_frame_ratio = 0.0
        _collect(conn, m, t0)
        return m
    origin[0] = conn.established_at
    sim.at(origin[0], emit, 0)
    # late frames still count towards completion, not towards the ratio
    _run_until_done(conn, t0 + time_limit)
    full = 0
    for i, t in enumerate(arrival):
        deadline = origin[0] + profile.startup_delay + i / profile.fps
        if t <= deadline:
            full += 1
    m.full_frame_ratio = full / len(sizes)
    m.completed = conn.complete()
    m.completion_time = (max(arrival) - t0) if m.completed else math.nan
    _collect(conn, m, t0)
    return m


def run_competing(setup_a: RunSetup, setup_b: RunSetup, duration: float, seed: int = 0,
                  offset_max: float = 1.0):
    """Two greedy flows sharing B1; returns (metrics_a, metrics_b) with goodput over the overlap.

    A seeded coin picks which flow starts first; the other follows after a
    seeded random offset in [0, offset_max).  Goodput is measured from the
    later start over ``duration`` seconds.
    """
    sim = Simulator()
    topo = setup_a.topology
    path = build_path(sim, topo.b1, "b1", seed)
    if setup_a.background.load > 0:
        background_traffic(sim, path.forward, setup_a.background, rng_stream(seed, "bg.b1"))
    conns = []
    for name, st in (("a", setup_a), ("b", setup_b)):
        conns.append(make_connection(st, sim=sim, paths=[path], flow_id=name))
    rng = rng_stream(seed, "start")
    late = float(rng.uniform(0.0, offset_max)) if offset_max > 0 else 0.0
    starts = (0.0, late) if rng.integers(2) == 0 else (late, 0.0)
    size = int(topo.b1.capacity_bps * (duration + offset_max + 1.0) / 8.0) + MIB
    marks = {}
    for c, start, name in zip(conns, starts, ("a", "b")):
        c.write(payload(seed, size, f"payload.{name}"))
        sim.at(start, lambda _, c=c: c.start(sim.now))
    t_lo = late
    t_hi = late + duration

    def snap(_):
        marks[sim.now] = [c.bytes_delivered for c in conns]

    sim.at(t_lo, snap)
    sim.at(t_hi, snap)
    sim.run(until=t_hi)
    lo, hi = marks[t_lo], marks[t_hi]
    out = []
    for i, (c, st) in enumerate(zip(conns, (setup_a, setup_b))):
        m = RunMetrics(st.protocol, "competing", seed)
        m.goodput_bps = (hi[i] - lo[i]) * 8.0 / duration
        m.completed = not c.aborted
        _collect(c, m, 0.0)
        out.append(m)
    return out[0], out[1]


# ---------------------------------------------------------------------------
# comparison
# ---------------------------------------------------------------------------

@dataclass
class Comparison:
    metric: str
    seeds: list
    ratios: list
    mean: float
    median: float
    ci95: tuple
    ratio_of_means: float
    overhead_a: float
    overhead_b: float

    def to_dict(self):
        return asdict(self)


def compare(arm_a, arm_b, metric: str = "completion_time") -> Comparison:
    """Per-seed ratios ``a/b`` of ``metric`` with summary statistics.

    Both arms must cover exactly the same seeds (in any order).
    """
    a = {m.seed: m for m in arm_a}
    b = {m.seed: m for m in arm_b}
    if len(a) != len(arm_a) or len(b) != len(arm_b):
        raise UsageError("duplicate seeds within an arm")
    if set(a) != set(b):
        raise UsageError(f"seed sets differ: {sorted(set(a) ^ set(b))}")
    if not a:
        raise UsageError("nothing to compare")
    seeds = sorted(a)
    va = [getattr(a[s], metric) for s in seeds]
    vb = [getattr(b[s], metric) for s in seeds]
    ratios = [x / y if y else math.nan for x, y in zip(va, vb)]
    mean = statistics.fmean(ratios)
    median = statistics.median(ratios)
    if len(ratios) > 1:
        half = 1.96 * statistics.stdev(ratios) / math.sqrt(len(ratios))
    else:
        half = math.nan
    mb = statistics.fmean(vb)
    return Comparison(metric, seeds, ratios, mean, median, (mean - half, mean + half),
                      statistics.fmean(va) / mb if mb else math.nan,
                      statistics.fmean(m.fec_overhead for m in arm_a),
                      statistics.fmean(m.fec_overhead for m in arm_b))
