"""Experiment runner: scenario configs, parameter sweeps, presets and outputs.

A config file is one YAML mapping.  Scenario fields sit at the top level;
``arms`` (protocols compared within every cell) and ``axes`` (parameter
grid) turn it into a sweep.  Axis names are dotted field paths such as
``topology.b1.loss.rate``; an axis whose values are mappings sets several
paths at once (``{topology.b1.rtt: 0.4, topology.b2.rtt: 0.1}``).
"""

import argparse
import csv
import dataclasses
import io
import itertools
import json
import logging
import math
import os
import statistics
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, fields, replace
from types import SimpleNamespace
from typing import Optional, Union, get_args, get_origin, get_type_hints

import yaml

from . import __version__
from .dfec import DfecParams
from .netsim import BackgroundSpec, LinkSpec, LossSpec, ScenarioTopology
from .transport import TransportConfig
from .workloads import (MIB, PROTOCOLS, WEB_PROFILES, RunSetup, UsageError, VideoProfile, compare,
                        make_connection, run_bulk, run_competing, run_video, run_web)

log = logging.getLogger("dfecsim")

DEFAULT_SEEDS = list(range(20))
EXIT_OK, EXIT_CONFIG, EXIT_RUN = 0, 1, 2
EMPTY_MARKER = "# empty: no runs"


class ConfigError(ValueError):
    """Invalid configuration; the message starts with the offending field path."""

    def __init__(self, path: str, msg: str):
        self.path = path
        super().__init__(f"{path}: {msg}" if path else msg)


class AggregateError(ValueError):
    pass


# ---------------------------------------------------------------------------
# config types
# ---------------------------------------------------------------------------

@dataclass
class BulkWorkload:
    kind: str = "bulk"
    size_bytes: Optional[int] = None  # None: 10 MiB single path, 16 MiB multipath
    horizon: Optional[float] = None  # observe a fixed window instead of running to completion


@dataclass
class WebWorkload:
    kind: str = "web"
    profile: str = "google"


@dataclass
class VideoWorkload:
    kind: str = "video"
    duration: float = 60.0
    bitrate: float = 3.4e6
    fps: int = 25
    startup_delay: float = 1.0


@dataclass
class CompetingWorkload:
    """Two greedy flows on a shared B1: the scenario's protocol against ``opponent``."""
    kind: str = "competing"
    opponent: str = "Tcp"
    duration: float = 20.0
    offset_max: float = 1.0


WORKLOADS = {"bulk": BulkWorkload, "web": WebWorkload, "video": VideoWorkload,
             "competing": CompetingWorkload}
Workload = Union[BulkWorkload, WebWorkload, VideoWorkload, CompetingWorkload]


@dataclass
class Scenario:
    name: str = "scenario"
    protocol: str = "Tcp"
    topology: ScenarioTopology = field(default_factory=ScenarioTopology)
    workload: Workload = field(default_factory=BulkWorkload)
    dfec: DfecParams = field(default_factory=DfecParams)
    transport: TransportConfig = field(default_factory=TransportConfig)
    seeds: list = field(default_factory=lambda: list(DEFAULT_SEEDS))
    background_load: float = 0.0
    udp_multiplier: float = 1.0
    coupled: bool = False
    record: bool = False
    time_limit: float = 3600.0
    output: Optional[str] = None


@dataclass
class SweepSpec:
    base: Scenario
    arms: list = field(default_factory=list)
    axes: dict = field(default_factory=dict)

    def arm_list(self) -> list:
        return list(self.arms) if self.arms else [self.base.protocol]

    def cells(self) -> list:
        """Cartesian product of the axes as a list of {axis: value} dicts."""
        names = list(self.axes)
        return [dict(zip(names, combo)) for combo in itertools.product(*(self.axes[n] for n in names))]


# ---------------------------------------------------------------------------
# parsing and serialization
# ---------------------------------------------------------------------------

def _join(path, key):
    return f"{path}.{key}" if path else str(key)


def _coerce(tp, value, path):
    origin = get_origin(tp)
    if tp is Workload:
        return _build_workload(value, path)
    if origin is Union:
        args = [a for a in get_args(tp) if a is not type(None)]
        if value is None:
            if len(args) < len(get_args(tp)):
                return None
            raise ConfigError(path, "must not be null")
        return _coerce(args[0], value, path)
    if dataclasses.is_dataclass(tp):
        return _build(tp, value, path)
    if tp is bool:
        if not isinstance(value, bool):
            raise ConfigError(path, f"expected a boolean, got {value!r}")
        return value
    if tp is int:
        if isinstance(value, bool) or not isinstance(value, (int, float)) or value != int(value):
            raise ConfigError(path, f"expected an integer, got {value!r}")
        return int(value)
    if tp is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(path, f"expected a number, got {value!r}")
        return float(value)
    if tp is str:
        if not isinstance(value, str):
            raise ConfigError(path, f"expected a string, got {value!r}")
        return value
    if tp is list or origin is list:
        if not isinstance(value, list):
            raise ConfigError(path, f"expected a list, got {value!r}")
        return [_coerce(int, v, f"{path}[{i}]") for i, v in enumerate(value)]
    return value


def _build(cls, data, path):
    if data is None:
        data = {}
    if not isinstance(data, dict):
        raise ConfigError(path, f"expected a mapping, got {data!r}")
    hints = get_type_hints(cls)
    known = {f.name for f in fields(cls)}
    for key in data:
        if key not in known:
            raise ConfigError(_join(path, key), f"unknown field (expected one of {sorted(known)})")
    kwargs = {k: _coerce(hints[k], v, _join(path, k)) for k, v in data.items()}
    try:
        return cls(**kwargs)
    except ValueError as exc:
        raise ConfigError(path, str(exc)) from None


def _build_workload(data, path):
    if not isinstance(data, dict):
        raise ConfigError(path, f"expected a mapping, got {data!r}")
    kind = data.get("kind", "bulk")
    if kind not in WORKLOADS:
        raise ConfigError(_join(path, "kind"), f"unknown workload {kind!r} (expected one of {sorted(WORKLOADS)})")
    return _build(WORKLOADS[kind], data, path)


def _validate(sc: Scenario, path: str = ""):
    p = lambda k: _join(path, k)  # noqa: E731
    if sc.protocol not in PROTOCOLS:
        raise ConfigError(p("protocol"), f"unknown protocol {sc.protocol!r} (expected one of {list(PROTOCOLS)})")
    for name in ("b1", "b2"):
        link = getattr(sc.topology, name)
        if link is None:
            continue
        lp = p(f"topology.{name}")
        if link.capacity_bps <= 0:
            raise ConfigError(f"{lp}.capacity_bps", "must be positive")
        if link.rtt <= 0:
            raise ConfigError(f"{lp}.rtt", "must be positive")
        if link.queue_bytes is not None and link.queue_bytes <= 0:
            raise ConfigError(f"{lp}.queue_bytes", "must be positive")
        for lk in ("loss", "reverse_loss"):
            loss = getattr(link, lk)
            if loss.kind not in ("none", "iid", "ge"):
                raise ConfigError(f"{lp}.{lk}.kind", f"unknown loss model {loss.kind!r}")
            if not 0.0 <= loss.rate < 1.0:
                raise ConfigError(f"{lp}.{lk}.rate", "must lie in [0, 1)")
            if loss.kind == "ge" and loss.mean_burst < 1.0:
                raise ConfigError(f"{lp}.{lk}.mean_burst", "must be >= 1")
    w = sc.workload
    multipath = PROTOCOLS[sc.protocol]["multipath"]
    if multipath and sc.topology.b2 is None and not isinstance(w, CompetingWorkload):
        raise ConfigError(p("topology.b2"), f"{sc.protocol} requires two links")
    if isinstance(w, BulkWorkload):
        if w.size_bytes is not None and w.size_bytes < 0:
            raise ConfigError(p("workload.size_bytes"), "must be >= 0")
        if w.horizon is not None and w.horizon <= 0:
            raise ConfigError(p("workload.horizon"), "must be positive")
    elif isinstance(w, WebWorkload):
        if w.profile not in WEB_PROFILES:
            raise ConfigError(p("workload.profile"), f"unknown profile {w.profile!r} (expected one of {sorted(WEB_PROFILES)})")
    elif isinstance(w, VideoWorkload):
        for k in ("duration", "bitrate", "fps"):
            if getattr(w, k) <= 0:
                raise ConfigError(p(f"workload.{k}"), "must be positive")
        if w.startup_delay < 0:
            raise ConfigError(p("workload.startup_delay"), "must be >= 0")
    elif isinstance(w, CompetingWorkload):
        if w.opponent not in PROTOCOLS:
            raise ConfigError(p("workload.opponent"), f"unknown protocol {w.opponent!r}")
        if w.duration <= 0:
            raise ConfigError(p("workload.duration"), "must be positive")
        if w.offset_max < 0:
            raise ConfigError(p("workload.offset_max"), "must be >= 0")
    if not sc.seeds:
        raise ConfigError(p("seeds"), "at least one seed is required")
    if len(set(sc.seeds)) != len(sc.seeds):
        raise ConfigError(p("seeds"), "seeds must be distinct")
    if sc.background_load < 0 or sc.background_load >= 1:
        raise ConfigError(p("background_load"), "must lie in [0, 1)")
    if sc.udp_multiplier < 0:
        raise ConfigError(p("udp_multiplier"), "must be >= 0")
    if sc.time_limit <= 0:
        raise ConfigError(p("time_limit"), "must be positive")
    return sc


def parse_scenario(data: dict, path: str = "") -> Scenario:
    return _validate(_build(Scenario, data, path), path)


def scenario_to_dict(sc: Scenario) -> dict:
    return dataclasses.asdict(sc)


def _set_path(doc: dict, dotted: str, value, axis: str):
    keys = dotted.split(".")
    node = doc
    for k in keys[:-1]:
        if not isinstance(node, dict):
            raise ConfigError(f"axes.{axis}", f"path {dotted!r} crosses a non-mapping")
        if node.get(k) is None:
            node[k] = {}
        node = node[k]
    if not isinstance(node, dict):
        raise ConfigError(f"axes.{axis}", f"path {dotted!r} crosses a non-mapping")
    node[keys[-1]] = value


def _apply_cell(base_doc: dict, cell: dict) -> dict:
    doc = json.loads(json.dumps(base_doc))
    for axis, value in cell.items():
        if isinstance(value, dict):
            for dotted, v in value.items():
                _set_path(doc, dotted, v, axis)
        else:
            _set_path(doc, axis, value, axis)
    return doc


def parse_config(data) -> SweepSpec:
    """Parse a config mapping into a sweep (a plain scenario is a sweep with no axes)."""
    if not isinstance(data, dict):
        raise ConfigError("", "config must be a mapping")
    data = dict(data)
    arms = data.pop("arms", None) or []
    axes = data.pop("axes", None) or {}
    if not isinstance(arms, list):
        raise ConfigError("arms", "expected a list of protocols")
    for i, a in enumerate(arms):
        if a not in PROTOCOLS:
            raise ConfigError(f"arms[{i}]", f"unknown protocol {a!r}")
    if len(set(arms)) != len(arms):
        raise ConfigError("arms", "arms must be distinct")
    if not isinstance(axes, dict):
        raise ConfigError("axes", "expected a mapping of axis name to value list")
    for name, values in axes.items():
        if not isinstance(values, list) or not values:
            raise ConfigError(f"axes.{name}", "expected a non-empty list of values")
        if name in _run_columns():
            raise ConfigError(f"axes.{name}", "axis name clashes with a result column; use a dotted path or another label")
    if arms and "protocol" not in data:
        data["protocol"] = arms[0]
    base = parse_scenario(data)
    sweep = SweepSpec(base=base, arms=list(arms), axes={k: list(v) for k, v in axes.items()})
    # validate every expanded scenario up front so errors surface before any run
    expand(sweep)
    return sweep


def sweep_to_dict(sweep: SweepSpec) -> dict:
    doc = scenario_to_dict(sweep.base)
    if sweep.arms:
        doc["arms"] = list(sweep.arms)
    if sweep.axes:
        doc["axes"] = {k: list(v) for k, v in sweep.axes.items()}
    return doc


def dump_config(sweep: SweepSpec) -> str:
    return yaml.safe_dump(sweep_to_dict(sweep), sort_keys=False)


def load_config(text: str) -> SweepSpec:
    try:
        data = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        raise ConfigError("", f"not valid YAML: {exc}") from None
    return parse_config(data)


def expand(sweep: SweepSpec) -> list:
    """List of (cell, scenario) for every cell and arm."""
    base_doc = scenario_to_dict(sweep.base)
    out = []
    for cell in sweep.cells():
        doc = _apply_cell(base_doc, cell)
        for arm in sweep.arm_list():
            doc["protocol"] = arm
            label = ",".join(f"{k}={_cell_value(v)}" for k, v in cell.items())
            out.append((cell, parse_scenario(doc, f"cell[{label}]" if label else "")))
    return out


def _cell_value(v):
    if isinstance(v, dict):
        return json.dumps(v, sort_keys=True)
    return v


# ---------------------------------------------------------------------------
# presets
# ---------------------------------------------------------------------------

LOSSES = [0.0, 0.01, 0.02, 0.03, 0.05]
RTTS = [0.025, 0.1, 0.4]
BG = 0.2  # background load used wherever the experiments ran with cross traffic


def _single(rtt=0.025, loss=0.0):
    return {"b1": {"capacity_bps": 20e6, "rtt": rtt, "loss": {"kind": "iid", "rate": loss}}, "b2": None}


def _two(b2_rtt=0.025):
    return {"b1": {"capacity_bps": 20e6, "rtt": 0.025, "loss": {"kind": "iid", "rate": 0.0}},
            "b2": {"capacity_bps": 10e6, "rtt": b2_rtt}}


_SINGLE_GRID = {"topology.b1.rtt": RTTS, "topology.b1.loss.rate": LOSSES}
_TABLE2_GRID = {"topology.b2.rtt": RTTS, "topology.b1.loss.rate": LOSSES}

PRESETS = {
    "fig4_tolerance": ("dFEC vs TCP bulk, tolerance 0.25-3% at delta 0.33", {
        "arms": ["Tcp", "TcpDfec"], "topology": _single(), "workload": {"kind": "bulk"},
        "background_load": BG,
        "axes": {**_SINGLE_GRID, "dfec.target": [0.0025, 0.005, 0.01, 0.02, 0.03]}}),
    "fig5_delta": ("dFEC vs TCP bulk, delta 0.25-0.75 at tolerance 1%", {
        "arms": ["Tcp", "TcpDfec"], "topology": _single(), "workload": {"kind": "bulk"},
        "background_load": BG,
        "axes": {**_SINGLE_GRID, "dfec.delta": [0.25, 0.33, 0.5, 0.75]}}),
    "fig6_dynamics": ("FEC ratio over the first 10 s of a 25 ms bulk", {
        "protocol": "TcpDfec", "topology": _single(), "record": True,
        "workload": {"kind": "bulk", "size_bytes": 64 * MIB, "horizon": 10.0},
        "axes": {"topology.b1.loss.rate": LOSSES}}),
    "fig7_cwnd_ratio": ("cwnd and FEC ratio, 25 ms, 3% random vs burst loss", {
        "protocol": "TcpDfec", "topology": _single(loss=0.03), "record": True,
        "workload": {"kind": "bulk", "size_bytes": 64 * MIB, "horizon": 10.0},
        "axes": {"topology.b1.loss.kind": ["iid", "ge"]}}),
    "fig8_fairness": ("dFEC sharing a bottleneck with TCP and with dFEC", {
        "protocol": "TcpDfec", "topology": _single(), "workload": {"kind": "competing", "duration": 20.0},
        "axes": {**_SINGLE_GRID, "workload.opponent": ["Tcp", "TcpDfec"]}}),
    "tcpir": ("TCP-IR and dFEC vs TCP, Google web and bulk", {
        "arms": ["Tcp", "TcpIr", "TcpDfec"], "topology": _single(), "background_load": BG,
        "axes": {**_SINGLE_GRID, "app": [{"workload": {"kind": "web", "profile": "google"}},
                                              {"workload": {"kind": "bulk"}}]}}),
    "fig10_bulk": ("dFEC vs TCP bulk completion and overhead", {
        "arms": ["Tcp", "TcpDfec"], "topology": _single(), "workload": {"kind": "bulk"},
        "axes": dict(_SINGLE_GRID)}),
    "fig11_video": ("dFEC vs TCP video full-frame ratio", {
        "arms": ["Tcp", "TcpDfec"], "topology": _single(), "workload": {"kind": "video"},
        "background_load": BG, "udp_multiplier": 2.0,
        "axes": dict(_SINGLE_GRID)}),
    "web_tcp": ("dFEC vs TCP web completion for three sites", {
        "arms": ["Tcp", "TcpDfec"], "topology": _single(), "workload": {"kind": "web"},
        "background_load": BG,
        "axes": {**_SINGLE_GRID, "workload.profile": ["google", "youtube", "espn"]}}),
    "fig12_mptcp_bulk": ("MPTCP vs MPTCP-dFEC bulk on the two-bottleneck grid", {
        "arms": ["Mptcp", "MptcpDfec"], "topology": _two(), "workload": {"kind": "bulk"},
        "axes": dict(_TABLE2_GRID)}),
    "mptcp_video": ("MPTCP vs MPTCP-dFEC video on the two-bottleneck grid", {
        "arms": ["Mptcp", "MptcpDfec"], "topology": _two(), "workload": {"kind": "video"},
        "background_load": BG, "udp_multiplier": 2.0,
        "axes": dict(_TABLE2_GRID)}),
    "mptcp_web": ("MPTCP vs MPTCP-dFEC web on the two-bottleneck grid", {
        "arms": ["Mptcp", "MptcpDfec"], "topology": _two(), "workload": {"kind": "web"},
        "background_load": BG,
        "axes": {**_TABLE2_GRID, "workload.profile": ["google", "youtube", "espn"]}}),
    "table2_grid": ("every protocol on the two-bottleneck grid, bulk", {
        "arms": ["Tcp", "TcpDfec", "TcpIr", "Mptcp", "MptcpDfec"], "topology": _two(),
        "workload": {"kind": "bulk"}, "axes": dict(_TABLE2_GRID)}),
    "bufferbloat": ("MPTCP vs MPTCP-dFEC over WLAN and cellular with oversized buffers", {
        "arms": ["Mptcp", "MptcpDfec"], "workload": {"kind": "bulk"},
        "topology": {"b1": {"capacity_bps": 20e6, "rtt": 0.025, "queue_bytes": 8 * MIB},
                     "b2": {"capacity_bps": 10e6, "rtt": 0.1, "queue_bytes": 8 * MIB}},
        "axes": {"rtts": [{"topology.b1.rtt": 0.025, "topology.b2.rtt": 0.1},
                          {"topology.b1.rtt": 0.4, "topology.b2.rtt": 0.1}]}}),
}


def preset(name: str) -> SweepSpec:
    if name not in PRESETS:
        raise ConfigError("preset", f"unknown preset {name!r} (see --list-presets)")
    doc = json.loads(json.dumps(PRESETS[name][1]))
    doc.setdefault("name", name)
    return parse_config(doc)


# ---------------------------------------------------------------------------
# running
# ---------------------------------------------------------------------------

META_COLUMNS = ("scenario", "arm")
EXTRA_COLUMNS = ("peer_protocol", "peer_goodput_bps", "error")


def _setup(sc: Scenario, seed: int) -> RunSetup:
    return RunSetup(protocol=sc.protocol, topology=sc.topology, seed=seed, dfec=sc.dfec,
                    transport=sc.transport,
                    background=BackgroundSpec(load=sc.background_load, udp_multiplier=sc.udp_multiplier),
                    coupled=sc.coupled, record=sc.record, time_limit=sc.time_limit)


def run_one(sc: Scenario, seed: int):
    """Run one (scenario, seed); returns (metrics, extra columns)."""
    setup = _setup(sc, seed)
    w = sc.workload
    extra = {"peer_protocol": "", "peer_goodput_bps": math.nan, "error": ""}
    if isinstance(w, CompetingWorkload):
        a, b = run_competing(setup, replace(setup, protocol=w.opponent), w.duration, seed, w.offset_max)
        extra.update(peer_protocol=w.opponent, peer_goodput_bps=b.goodput_bps)
        return a, extra
    conn = make_connection(setup)
    if isinstance(w, BulkWorkload):
        size = w.size_bytes
        if size is None:
            size = 16 * MIB if PROTOCOLS[sc.protocol]["multipath"] else 10 * MIB
        limit = w.horizon if w.horizon is not None else sc.time_limit
        return run_bulk(conn, size, seed, sc.protocol, time_limit=limit), extra
    if isinstance(w, WebWorkload):
        return run_web(conn, WEB_PROFILES[w.profile], seed, sc.protocol, time_limit=sc.time_limit), extra
    profile = VideoProfile(duration=w.duration, bitrate=w.bitrate, fps=w.fps, startup_delay=w.startup_delay)
    return run_video(conn, profile, seed, sc.protocol, time_limit=sc.time_limit), extra


def _job(args):
    idx, cell, sc, seed = args
    base = {"scenario": sc.name, **{k: _cell_value(v) for k, v in cell.items()}, "arm": sc.protocol}
    try:
        m, extra = run_one(sc, seed)
    except Exception as exc:  # reported as a failed run, not a crash of the whole sweep
        log.exception("run failed: %s seed %d", sc.protocol, seed)
        row = {**base, "protocol": sc.protocol, "seed": seed, "completed": False,
               "error": f"{type(exc).__name__}: {exc}"}
        return idx, row, [], False
    row = {**base, **m.row(), **extra}
    ok = (m.completed or _observes_window(sc)) and m.integrity_ok and not m.aborted
    series = [(t, name, v) for t, name, v in m.timeseries]
    return idx, row, series, ok


def _observes_window(sc: Scenario) -> bool:
    return isinstance(sc.workload, BulkWorkload) and sc.workload.horizon is not None


def plan(sweep: SweepSpec, seeds: Optional[list] = None) -> list:
    jobs = []
    for cell, sc in expand(sweep):
        for seed in (seeds if seeds is not None else sc.seeds):
            jobs.append((len(jobs), cell, sc, seed))
    return jobs


def run_scenario(sweep, seeds: Optional[list] = None, jobs: int = 1):
    """Execute every run of ``sweep``; returns (rows, timeseries rows, all_ok).

    Rows come back in plan order whatever ``jobs`` is, so outputs are
    byte-identical between serial and parallel execution.
    """
    if isinstance(sweep, Scenario):
        sweep = SweepSpec(base=sweep)
    work = plan(sweep, seeds)
    if jobs > 1 and len(work) > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            results = list(pool.map(_job, work, chunksize=1))
    else:
        results = [_job(w) for w in work]
    results.sort(key=lambda r: r[0])
    rows, series, all_ok = [], [], True
    for (_, cell, sc, seed), (_, row, ts, ok) in zip(work, results):
        rows.append(row)
        all_ok &= ok
        base = {"scenario": sc.name, **{k: _cell_value(v) for k, v in cell.items()},
                "arm": sc.protocol, "seed": seed}
        series.extend({**base, "time": t, "metric": name, "value": v} for t, name, v in ts)
    return _normalize(rows), series, all_ok


def _normalize(rows):
    """Give every row the union of columns (failed runs lack metric fields)."""
    cols = []
    for r in rows:
        for k in r:
            if k not in cols:
                cols.append(k)
    return [{k: r.get(k, math.nan) for k in cols} for r in rows]


# ---------------------------------------------------------------------------
# aggregation
# ---------------------------------------------------------------------------

SUMMARY_METRICS = ("completion_time", "fec_overhead", "full_frame_ratio", "goodput_bps",
                   "peer_goodput_bps", "util_sf0", "util_sf1", "retransmissions", "mean_ratio")
RATIO_METRICS = ("completion_time", "full_frame_ratio", "goodput_bps")
_RUN_COLUMNS = None


def _run_columns():
    global _RUN_COLUMNS
    if _RUN_COLUMNS is None:
        from .workloads import RunMetrics
        _RUN_COLUMNS = set(RunMetrics("", "", 0).row()) | set(META_COLUMNS) | set(EXTRA_COLUMNS)
    return _RUN_COLUMNS


def _num(v):
    try:
        x = float(v)
    except (TypeError, ValueError):
        return math.nan
    return x


def _stats(values):
    xs = [x for x in values if math.isfinite(x)]
    n = len(xs)
    if n == 0:
        return {"mean": math.nan, "median": math.nan, "p10": math.nan, "p90": math.nan,
                "ci_lo": math.nan, "ci_hi": math.nan, "n": 0}
    mean = statistics.fmean(xs)
    half = 1.96 * statistics.stdev(xs) / math.sqrt(n) if n > 1 else 0.0
    qs = statistics.quantiles(xs, n=10, method="inclusive") if n > 1 else [xs[0]] * 9
    return {"mean": mean, "median": statistics.median(xs), "p10": qs[0], "p90": qs[-1],
            "ci_lo": mean - half, "ci_hi": mean + half, "n": n}


def cell_columns(rows) -> list:
    if not rows:
        return []
    known = _run_columns()
    return [k for k in rows[0] if k not in known]


def _check_schema(rows):
    keys = list(rows[0])
    for i, r in enumerate(rows):
        if list(r) != keys:
            raise AggregateError(f"row {i} has columns {sorted(set(r) ^ set(keys))} out of schema")


def _groups(rows):
    ccols = cell_columns(rows)
    groups = {}
    for r in rows:
        key = (r["scenario"],) + tuple(r[c] for c in ccols)
        groups.setdefault(key, {}).setdefault(r["arm"], []).append(r)
    return ccols, groups


def aggregate(rows) -> list:
    """One summary row per (cell, arm), with ratio columns against the cell's first arm."""
    if not rows:
        return []
    _check_schema(rows)
    ccols, groups = _groups(rows)
    out = []
    for key, arms in groups.items():
        base_arm = next(iter(arms))
        base_means = {m: _stats(_num(r.get(m)) for r in arms[base_arm])["mean"] for m in RATIO_METRICS}
        for arm, rs in arms.items():
            s = {"scenario": key[0], **dict(zip(ccols, key[1:])), "arm": arm, "baseline": base_arm,
                 "runs": len(rs),
                 "completed": sum(1 for r in rs if str(r.get("completed")) in ("True", "true", "1"))}
            for m in SUMMARY_METRICS:
                st = _stats(_num(r.get(m)) for r in rs)
                s["n"] = max(s.get("n", 0), st["n"])
                for k in ("mean", "median", "p10", "p90", "ci_lo", "ci_hi"):
                    s[f"{m}_{k}"] = st[k]
            s.pop("n")
            for m in RATIO_METRICS:
                b = base_means[m]
                a = s[f"{m}_mean"]
                s[f"ratio_{m}"] = a / b if math.isfinite(a) and math.isfinite(b) and b != 0 else math.nan
            g, p = s["goodput_bps_mean"], s["peer_goodput_bps_mean"]
            s["peer_goodput_ratio"] = g / p if math.isfinite(g) and math.isfinite(p) and p > 0 else math.nan
            out.append(s)
    return out


def _metric_for(rows) -> str:
    w = str(rows[0].get("workload", ""))
    if w == "video":
        return "full_frame_ratio"
    if w == "competing":
        return "goodput_bps"
    return "completion_time"


def comparisons(rows) -> list:
    """Per-cell paired comparison of every arm against the cell's first arm."""
    if not rows:
        return []
    _check_schema(rows)
    ccols, groups = _groups(rows)
    out = []
    for key, arms in groups.items():
        base_arm = next(iter(arms))
        metric = _metric_for(arms[base_arm])
        for arm, rs in arms.items():
            if arm == base_arm:
                continue
            a = [SimpleNamespace(seed=int(r["seed"]), fec_overhead=_num(r["fec_overhead"]), **{metric: _num(r[metric])})
                 for r in rs]
            b = [SimpleNamespace(seed=int(r["seed"]), fec_overhead=_num(r["fec_overhead"]), **{metric: _num(r[metric])})
                 for r in arms[base_arm]]
            try:
                c = compare(a, b, metric).to_dict()
            except UsageError as exc:
                c = {"metric": metric, "error": str(exc)}
            out.append({"scenario": key[0], "cell": dict(zip(ccols, key[1:])), "arm": arm,
                        "baseline": base_arm, **c})
    return out


# ---------------------------------------------------------------------------
# output
# ---------------------------------------------------------------------------

def _fmt(v):
    if isinstance(v, float):
        return repr(v)
    return v


def write_csv(rows, fh, empty_marker: bool = True):
    if not rows:
        if empty_marker:
            fh.write(EMPTY_MARKER + "\n")
        return
    w = csv.DictWriter(fh, fieldnames=list(rows[0]), lineterminator="\r\n")
    w.writeheader()
    for r in rows:
        w.writerow({k: _fmt(v) for k, v in r.items()})


def csv_bytes(rows) -> bytes:
    buf = io.StringIO()
    write_csv(rows, buf)
    return buf.getvalue().encode("utf-8")


def read_csv(path) -> list:
    with open(path, newline="", encoding="utf-8") as fh:
        text = fh.read()
    if not text.strip() or text.startswith(EMPTY_MARKER):
        return []
    return list(csv.DictReader(io.StringIO(text)))


def _json_default(o):
    if isinstance(o, tuple):
        return list(o)
    raise TypeError(type(o).__name__)


def _clean(o):
    # JSON has no NaN; write null instead
    if isinstance(o, float) and not math.isfinite(o):
        return None
    if isinstance(o, dict):
        return {k: _clean(v) for k, v in o.items()}
    if isinstance(o, (list, tuple)):
        return [_clean(v) for v in o]
    return o


def write_outputs(out_dir: str, sweep: Optional[SweepSpec], rows, series) -> dict:
    """Write runs/summary CSVs, the comparison JSON and the time series; returns the paths."""
    os.makedirs(out_dir, exist_ok=True)
    paths = {k: os.path.join(out_dir, f) for k, f in (
        ("runs", "runs.csv"), ("summary", "summary.csv"), ("comparison", "comparison.json"),
        ("timeseries", "timeseries.csv"), ("config", "config.yaml"))}
    with open(paths["runs"], "w", newline="", encoding="utf-8") as fh:
        write_csv(rows, fh)
    with open(paths["summary"], "w", newline="", encoding="utf-8") as fh:
        write_csv(aggregate(rows), fh)
    with open(paths["comparison"], "w", encoding="utf-8") as fh:
        json.dump(_clean(comparisons(rows)), fh, indent=2, sort_keys=True, default=_json_default)
        fh.write("\n")
    if series:
        with open(paths["timeseries"], "w", newline="", encoding="utf-8") as fh:
            write_csv(series, fh)
    else:
        paths.pop("timeseries")
    if sweep is not None:
        with open(paths["config"], "w", encoding="utf-8") as fh:
            fh.write(dump_config(sweep))
            web = [sc for _, sc in expand(sweep) if isinstance(sc.workload, WebWorkload)]
            if web:
                # per-object sizes are derived from the seed; list them for reproducibility
                sizes = {}
                for sc in web:
                    prof = WEB_PROFILES[sc.workload.profile]
                    sizes.setdefault(prof.name, {s: prof.object_sizes(s) for s in sc.seeds})
                fh.write("# web object sizes (bytes) per profile and seed\n")
                for line in yaml.safe_dump({"web_object_sizes": sizes}, sort_keys=True).splitlines():
                    fh.write(f"# {line}\n")
    else:
        paths.pop("config")
    return paths


# ---------------------------------------------------------------------------
# command line
# ---------------------------------------------------------------------------

def parse_seeds(text: str) -> list:
    """``"0-19"``, ``"1,4,9"`` or a mix such as ``"0-4,10"``."""
    seeds = []
    for part in text.split(","):
        part = part.strip()
        if not part:
            continue
        try:
            if "-" in part[1:]:
                lo, hi = part.split("-", 1) if not part.startswith("-") else part[1:].split("-", 1)
                lo, hi = int(lo), int(hi)
                if hi < lo:
                    raise ValueError
                seeds.extend(range(lo, hi + 1))
            else:
                seeds.append(int(part))
        except ValueError:
            raise ConfigError("--seeds", f"cannot parse {part!r}") from None
    if not seeds:
        raise ConfigError("--seeds", "no seeds given")
    if len(set(seeds)) != len(seeds):
        raise ConfigError("--seeds", "seeds must be distinct")
    return seeds


def build_parser():
    p = argparse.ArgumentParser(prog="dfecsim", description="Run dynamic-FEC transport experiments.")
    src = p.add_mutually_exclusive_group()
    src.add_argument("--scenario", metavar="PATH", help="YAML scenario or sweep config")
    src.add_argument("--preset", metavar="NAME", help="built-in sweep (see --list-presets)")
    src.add_argument("--aggregate", metavar="RUNS_CSV", help="re-aggregate an existing runs.csv")
    p.add_argument("--list-presets", action="store_true", help="list built-in presets and exit")
    p.add_argument("--show", action="store_true", help="print the resolved config and exit")
    seeds = p.add_mutually_exclusive_group()
    seeds.add_argument("--seed", type=int, help="run a single seed")
    seeds.add_argument("--seeds", help="seed list, e.g. 0-19 or 1,2,5")
    p.add_argument("--out", metavar="DIR", help="output directory (default: config 'output' or ./results/<name>)")
    p.add_argument("--jobs", type=int, default=1, help="parallel runs (default 1)")
    p.add_argument("-v", "--verbose", action="store_true")
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s", stream=sys.stderr)
    if args.list_presets:
        for name, (desc, _) in PRESETS.items():
            print(f"{name:18s} {desc}")
        return EXIT_OK
    try:
        if args.aggregate:
            try:
                rows = read_csv(args.aggregate)
            except OSError as exc:
                raise ConfigError("--aggregate", str(exc)) from None
            out = args.out or os.path.dirname(os.path.abspath(args.aggregate))
            os.makedirs(out, exist_ok=True)
            with open(os.path.join(out, "summary.csv"), "w", newline="", encoding="utf-8") as fh:
                write_csv(aggregate(rows), fh)
            if not rows:
                print("no rows to aggregate", file=sys.stderr)
                return EXIT_RUN
            return EXIT_OK
        if args.scenario:
            try:
                with open(args.scenario, encoding="utf-8") as fh:
                    sweep = load_config(fh.read())
            except OSError as exc:
                raise ConfigError("--scenario", str(exc)) from None
        elif args.preset:
            sweep = preset(args.preset)
        else:
            raise ConfigError("", "one of --scenario, --preset, --aggregate or --list-presets is required")
        if args.jobs < 1:
            raise ConfigError("--jobs", "must be >= 1")
        seeds = [args.seed] if args.seed is not None else parse_seeds(args.seeds) if args.seeds else None
        if seeds is not None:
            sweep = replace(sweep, base=replace(sweep.base, seeds=seeds))
        if args.show:
            sys.stdout.write(dump_config(sweep))
            return EXIT_OK
    except (ConfigError, AggregateError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    out = args.out or sweep.base.output or os.path.join("results", sweep.base.name)
    n = len(plan(sweep))
    log.info("%s: %d runs -> %s", sweep.base.name, n, out)
    rows, series, ok = run_scenario(sweep, jobs=args.jobs)
    try:
        paths = write_outputs(out, sweep, rows, series)
    except OSError as exc:
        print(f"cannot write outputs: {exc}", file=sys.stderr)
        return EXIT_RUN
    failed = sum(1 for r in rows if r.get("error")) + (0 if ok else 1)
    print(f"{len(rows)} runs written to {paths['runs']}")
    if not rows:
        return EXIT_RUN
    if not ok:
        print(f"some runs did not complete ({failed} problem(s)); see {paths['runs']}", file=sys.stderr)
        return EXIT_RUN
    return EXIT_OK


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
