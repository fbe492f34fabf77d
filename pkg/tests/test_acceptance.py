"""Acceptance criteria, one test per criterion.

Each test records a PASS/FAIL line that the terminal summary prints at the
end of the session, then asserts.  Thresholds are the contract values and
must not be relaxed here; deviations are explained in the decisions log.
"""

import math
import random
import statistics
import time
from dataclasses import replace

import numpy as np
import pytest

from conftest import data_bytes, drop_once, record_criterion, scripted_path
from dfecsim import _accel, codec
from dfecsim.cli import csv_bytes, load_config, run_scenario
from dfecsim.dfec import DfecParams
from dfecsim.multipath import Connection
from dfecsim.netsim import (MSS, GilbertElliottLoss, IidLoss, LinkSpec, LossSpec, ScenarioTopology,
                            Simulator, gilbert_elliot_params, rng_stream, table2_topology)
from dfecsim.transport import TransportConfig
from dfecsim.workloads import (MIB, WEB_PROFILES, RunSetup, VideoProfile, WebProfile, compare,
                               make_connection, run_bulk, run_competing, run_video, run_web,
                               time_average)

pytestmark = pytest.mark.slow

SEEDS20 = list(range(20))
SEEDS10 = list(range(10))


def single(rtt, loss, kind="iid"):
    return ScenarioTopology(b1=LinkSpec(20e6, rtt, LossSpec(kind, loss)))


def bulk_arm(protocol, topo, seeds, size=10 * MIB, **kw):
    out = []
    for s in seeds:
        setup = RunSetup(protocol=protocol, topology=topo, seed=s, **kw)
        out.append(run_bulk(make_connection(setup), size, s, protocol, time_limit=setup.time_limit))
    return out


def check(n, ok, detail):
    record_criterion(n, ok, detail)
    assert ok, detail


# 1 ----------------------------------------------------------------------------------

def test_c01_codec_property_suite():
    rng = np.random.default_rng(2024)
    t0 = time.perf_counter()
    bad_single = bad_multi = positions = 0
    for _ in range(10_000):
        k = int(rng.integers(4, 257))
        lens = rng.integers(1, 65, size=k)
        buf = rng.bytes(int(lens.sum()))
        ends = np.cumsum(lens).tolist()
        payloads = [buf[e - n:e] for e, n in zip(ends, lens.tolist())]
        blk = codec.encode_block(payloads)
        each = codec.recover_each(blk, payloads)
        positions += k
        bad_single += sum(1 for a, b in zip(each, payloads) if a != b)
        # the general decoder on one random position too
        lost = int(rng.integers(k))
        got = {i: p for i, p in enumerate(payloads) if i != lost}
        out = codec.try_recover(blk, got)
        if not (isinstance(out, codec.Recovered) and out.payload == payloads[lost]):
            bad_single += 1
        m = int(rng.integers(2, min(k, 6) + 1))
        erased = set(rng.choice(k, size=m, replace=False).tolist())
        out = codec.try_recover(blk, {i: p for i, p in enumerate(payloads) if i not in erased})
        if not (isinstance(out, codec.Failed) and out.missing_count == m):
            bad_multi += 1
    elapsed = time.perf_counter() - t0
    ok = bad_single == 0 and bad_multi == 0 and elapsed < 10.0
    check(1, ok, f"{positions} single erasures, {bad_single} wrong; {bad_multi} multi-erasure errors; "
                 f"{elapsed:.2f} s")


# 2 ----------------------------------------------------------------------------------

def iterate_to_cap(start, cap, delta):
    n, r = 0, start
    while r < cap:
        r *= 1 + delta
        n += 1
    return n


def dfec_run(topo, seed, transport=None, size=64 * MIB, horizon=60.0):
    setup = RunSetup(protocol="TcpDfec", topology=topo, seed=seed,
                     transport=transport or TransportConfig())
    conn = make_connection(setup)
    run_bulk(conn, size, seed, "TcpDfec", time_limit=horizon)
    return conn


def test_c02a_lossless_ratio_climbs_in_twelve_updates():
    expected = iterate_to_cap(9, 256, 0.33)
    bdp = 20e6 * 0.025 / 8
    # receive-window limited so the bottleneck queue never overflows
    cfg = TransportConfig(rwnd_bytes=int(1.5 * bdp))
    counts = []
    for seed in SEEDS10:
        conn = dfec_run(single(0.025, 0.0), seed, cfg, size=32 * MIB, horizon=10.0)
        values = [r for _, r in conn.subflows[0].sender.dfec.history]
        first = next((i for i, r in enumerate(values) if r >= 256), None)
        counts.append(first)
    ok = expected == 12 and all(c == 12 for c in counts)
    check("2a", ok, f"updates to cap per seed {counts}, oracle {expected}")


def test_c02b_ratio_settles_under_five_percent_loss():
    avgs = []
    for seed in SEEDS10:
        conn = dfec_run(single(0.025, 0.05), seed)
        d = conn.subflows[0].sender.dfec
        # the transfer must still be running at the horizon
        avgs.append(time_average(d.history, 60.0, start=30.0) if not conn.complete() else math.nan)
    ok = all(4 <= a <= 32 for a in avgs)
    check("2b", ok, "last-half mean ratio per seed " + ", ".join(f"{a:.1f}" for a in avgs))


# 3 ----------------------------------------------------------------------------------

@pytest.mark.parametrize("k", [4, 9, 32])
def test_c03_zero_rtt_recovery(k):
    sim = Simulator()
    victim = (k // 2) * MSS
    path = scripted_path(sim, predicate=drop_once(lambda s: s.seq == victim), rtt=0.05)
    conn = Connection(sim, [path], fec=True, dfec_params=DfecParams(start_ratio=k, ratio_min=min(4, k)))
    data = data_bytes(k, seed=k)
    conn.write(data)
    conn.close()
    conn.start(0.0)
    sim.run(until=600, stop_when=conn.complete)
    sim.run(until=sim.now + 1.0)
    c = conn.subflows[0].sender.counters
    ok = (bytes(conn.app_rx) == data and c["retransmitted"] == 0 and c["fast_retransmits"] == 0
          and c["rtos"] == 0 and c["fec_recovered"] == 1)
    check(f"3[k={k}]", ok, f"retx={c['retransmitted']} fr={c['fast_retransmits']} rto={c['rtos']} "
                           f"recovered={c['fec_recovered']}")


# 4 ----------------------------------------------------------------------------------

def test_c04_bulk_benefit_at_long_rtt():
    lossy = compare(bulk_arm("TcpDfec", single(0.4, 0.03), SEEDS20), bulk_arm("Tcp", single(0.4, 0.03), SEEDS20))
    clean = compare(bulk_arm("TcpDfec", single(0.4, 0.0), SEEDS20), bulk_arm("Tcp", single(0.4, 0.0), SEEDS20))
    ok = lossy.mean <= 0.90 and 0.95 <= clean.mean <= 1.05
    check(4, ok, f"mean ratio 3% loss {lossy.mean:.3f} (<= 0.90), 0% loss {clean.mean:.3f} (0.95..1.05)")


# 5 ----------------------------------------------------------------------------------

def test_c05_overhead_envelope():
    # transfers sized to outlast the 10 s window
    clean_runs = bulk_arm("TcpDfec", single(0.025, 0.0), SEEDS10, size=64 * MIB, time_limit=10.0)
    lossy_runs = bulk_arm("TcpDfec", single(0.025, 0.05), SEEDS10, size=64 * MIB, time_limit=10.0)
    runs = clean_runs + lossy_runs
    clean = [m.fec_overhead for m in clean_runs]
    lossy = [m.fec_overhead for m in lossy_runs]
    ok = max(clean) <= 0.03 and all(0.04 <= o <= 0.20 for o in lossy) and all(
        not m.completed for m in runs)
    check(5, ok, f"0% loss max {max(clean):.4f} (<= 0.03); 5% loss range "
                 f"{min(lossy):.4f}..{max(lossy):.4f} (0.04..0.20)")


# 6 ----------------------------------------------------------------------------------

def test_c06_tcp_ir_contrast():
    topo = single(0.1, 0.01)
    arms = {}
    for p in ("Tcp", "TcpIr", "TcpDfec"):
        arms[p] = [run_web(make_connection(RunSetup(protocol=p, topology=topo, seed=s)),
                           WEB_PROFILES["google"], s, p) for s in SEEDS20]
    ir = compare(arms["TcpIr"], arms["Tcp"]).mean
    dfec = compare(arms["TcpDfec"], arms["Tcp"]).mean
    ok = ir >= 0.95 and dfec < ir
    check(6, ok, f"TcpIr/Tcp {ir:.3f} (>= 0.95), TcpDfec/Tcp {dfec:.3f} (< TcpIr/Tcp)")


# 7 ----------------------------------------------------------------------------------

def test_c07_mptcp_heterogeneity():
    topo = table2_topology(b2_rtt=0.4, b1_loss=0.03)
    plain = bulk_arm("Mptcp", topo, SEEDS20, size=16 * MIB)
    dfec = bulk_arm("MptcpDfec", topo, SEEDS20, size=16 * MIB)
    ct_plain = statistics.fmean(m.completion_time for m in plain)
    ct_dfec = statistics.fmean(m.completion_time for m in dfec)
    u_plain = statistics.fmean(m.utilization[0] for m in plain)
    u_dfec = statistics.fmean(m.utilization[0] for m in dfec)
    ok = ct_dfec <= ct_plain and u_dfec > u_plain and all(m.integrity_ok for m in plain + dfec)
    check(7, ok, f"completion {ct_dfec:.2f} s vs {ct_plain:.2f} s; B1 utilization {u_dfec:.3f} vs {u_plain:.3f}")


# 8 ----------------------------------------------------------------------------------

def test_c08_video_direction():
    topo = single(0.1, 0.03)
    profile = VideoProfile(duration=60.0, bitrate=3.4e6, fps=25)
    means = {}
    for p in ("Tcp", "TcpDfec"):
        ratios = [run_video(make_connection(RunSetup(protocol=p, topology=topo, seed=s)), profile, s, p)
                  .full_frame_ratio for s in SEEDS20]
        means[p] = statistics.fmean(ratios)
    ratio = means["TcpDfec"] / means["Tcp"] if means["Tcp"] > 0 else math.inf
    check(8, ratio >= 1.05, f"full-frame ratio TcpDfec {means['TcpDfec']:.4f} / Tcp {means['Tcp']:.4f} "
                            f"= {ratio:.3f} (>= 1.05)")


# 9 ----------------------------------------------------------------------------------

def test_c09_fairness_grid():
    cells = []
    for rtt in (0.025, 0.1, 0.4):
        for loss in (0.0, 0.01, 0.03, 0.05):
            base = RunSetup(protocol="Tcp", topology=single(rtt, loss))
            duration = max(20.0, 50 * rtt)
            tcp, dfec = [], []
            for s in SEEDS20:
                a, b = run_competing(base, replace(base, protocol="TcpDfec"), duration, s)
                tcp.append(a.goodput_bps)
                dfec.append(b.goodput_bps)
            cells.append((rtt, loss, statistics.fmean(dfec) / statistics.fmean(tcp)))
    bad = [c for c in cells if not 0.5 <= c[2] <= 2.0]
    detail = "; ".join(f"{int(r * 1000)}ms/{int(l * 100)}%={x:.2f}" for r, l, x in cells)
    check(9, not bad, f"{len(cells) - len(bad)}/{len(cells)} cells in [0.5, 2.0]: {detail}")


# 10 ---------------------------------------------------------------------------------

def python_chain(p_g2b, p_b2g, n, seed):
    r = random.Random(seed)
    bad = False
    drops, bursts, run = 0, [], 0
    for _ in range(n):
        bad = (r.random() >= p_b2g) if bad else (r.random() < p_g2b)
        if bad:
            drops += 1
            run += 1
        elif run:
            bursts.append(run)
            run = 0
    return drops / n, statistics.fmean(bursts)


def test_c10_loss_calibration():
    n = 10**6
    lines, ok = [], True
    for p in (0.01, 0.03, 0.05):
        emp = IidLoss(p, rng_stream(10, f"iid{p}")).draws(n).mean()
        ok &= abs(emp - p) <= 0.05 * p
        lines.append(f"iid {p:.2f}: {emp:.5f}")
    prm = gilbert_elliot_params(0.03, 2.0)
    drops = GilbertElliottLoss(prm["p_g2b"], prm["p_b2g"], rng_stream(10, "ge")).draws(n)
    loss, burst = drops.mean(), _accel.run_lengths(drops).mean()
    o_loss, o_burst = python_chain(prm["p_g2b"], prm["p_b2g"], n, 10)
    ok &= abs(loss - 0.03) <= 0.1 * 0.03 and abs(burst - 2.0) <= 0.15 * 2.0
    ok &= abs(o_loss - 0.03) <= 0.1 * 0.03 and abs(o_burst - 2.0) <= 0.15 * 2.0
    lines.append(f"ge loss {loss:.5f} burst {burst:.3f} (Monte Carlo oracle {o_loss:.5f}/{o_burst:.3f})")
    check(10, ok, "; ".join(lines))


# 11 ---------------------------------------------------------------------------------

PROTOS = ("Tcp", "TcpDfec", "TcpIr", "Mptcp", "MptcpDfec")


def random_scenario(i):
    r = random.Random(i)
    proto = r.choice(PROTOS)

    def link(cap):
        kind = r.choice(["none", "iid", "ge"])
        rate = 0.0 if kind == "none" else r.choice([0.005, 0.01, 0.03, 0.05, 0.1, 0.2])
        rev = LossSpec("iid", r.choice([0.0, 0.0, 0.01, 0.05]))
        q = r.choice([None, 15_000, 200_000])
        return LinkSpec(cap, r.choice([0.01, 0.025, 0.1]), LossSpec(kind, rate), q, rev)

    b2 = link(10e6) if proto.startswith("Mptcp") else None
    topo = ScenarioTopology(b1=link(20e6), b2=b2)
    params = DfecParams(start_ratio=r.choice([4, 9, 32]))
    setup = RunSetup(protocol=proto, topology=topo, seed=i, dfec=params)
    kind = r.choice(["bulk", "bulk", "web", "video"])
    return setup, kind, r


def run_fuzz_case(i):
    setup, kind, r = random_scenario(i)
    conn = make_connection(setup)
    if kind == "bulk":
        m = run_bulk(conn, r.randint(0, 150_000), i, setup.protocol)
    elif kind == "web":
        prof = WebProfile("fuzz", r.randint(1, 8), r.randint(8, 120))
        m = run_web(conn, prof, i, setup.protocol)
    else:
        m = run_video(conn, VideoProfile(duration=2.0, bitrate=4e5), i, setup.protocol)
    exact = bytes(conn.app_rx) == bytes(conn.app_tx)
    return m.completed and m.integrity_ok and exact


def test_c11_integrity_fuzz():
    failures = [i for i in range(1000) if not run_fuzz_case(i)]
    check(11, not failures, f"1000 runs, failing cases {failures[:10]}")


# 12 ---------------------------------------------------------------------------------

DETERMINISM = """
name: determinism
arms: [Tcp, TcpDfec, MptcpDfec]
topology:
  b1: {capacity_bps: 20000000.0, rtt: 0.05, loss: {kind: ge, rate: 0.03}}
  b2: {capacity_bps: 10000000.0, rtt: 0.1}
workload: {kind: bulk, size_bytes: 400000}
background_load: 0.2
record: true
seeds: [3, 4]
"""


def test_c12_csv_determinism():
    sweep = load_config(DETERMINISM)
    a_rows, a_series, _ = run_scenario(sweep)
    b_rows, b_series, _ = run_scenario(sweep)
    ok = csv_bytes(a_rows) == csv_bytes(b_rows) and csv_bytes(a_series) == csv_bytes(b_series)
    check(12, ok, f"{len(a_rows)} rows and {len(a_series)} series rows compared byte for byte")
