import pytest
from hypothesis import given, settings, strategies as st

from conftest import Pair, data_bytes, drop_once, scripted_path
from dfecsim.dfec import DfecParams
from dfecsim.multipath import Connection
from dfecsim.netsim import MSS, Simulator
from dfecsim.transport import (FecFeedback, Kind, Outcome, Segment, TransportConfig, TransportConn,
                               handshake)


# -- handshake ----------------------------------------------------------------

def test_both_offer_fec():
    a, b = handshake(TransportConn(offer_fec=True), TransportConn(offer_fec=True))
    assert a.fec_enabled and b.fec_enabled
    assert a.state == b.state == "established"


def test_responder_declines():
    a, b = handshake(TransportConn(offer_fec=True), TransportConn(offer_fec=False))
    assert not a.fec_enabled and not b.fec_enabled
    assert a.state == "established" and a.dfec is None


def test_stripped_syn_aborts_both_ends():
    a, b = handshake(TransportConn(offer_fec=True), TransportConn(offer_fec=True), strip=True)
    assert a.state == b.state == "aborted"


def test_required_fec_refused_aborts():
    a, b = handshake(TransportConn(offer_fec=True, require_fec=True), TransportConn(offer_fec=False))
    assert a.state == "aborted" and b.state == "aborted"


def test_fec_flag_on_every_segment_after_handshake():
    p = Pair(fec=True)
    for _ in range(3):
        p.tx.write(data_bytes(5))
        p.round()
    assert p.sent_log and all(s.fec_flag for s in p.sent_log)


# -- sending discipline --------------------------------------------------------

def test_initial_window_carries_nine_data_and_one_parity():
    p = Pair(fec=True)
    p.tx.write(data_bytes(30))
    segs = p.tx.sender_tick(p.now)
    kinds = [s.kind for s in segs]
    assert kinds == [Kind.DATA] * 9 + [Kind.FEC]
    assert segs[-1].fec_block.member_seqs() == [s.seq for s in segs[:9]]


def test_window_gates_the_block():
    p = Pair(fec=True)
    p.tx.cwnd = 4
    p.tx.write(data_bytes(30))
    segs = p.tx.sender_tick(p.now)
    assert [s.kind for s in segs] == [Kind.DATA] * 4
    assert len(p.tx._block) == 4


def test_no_parity_without_negotiation():
    p = Pair(fec=False)
    p.tx.write(data_bytes(100))
    p.tx.close()
    for _ in range(10):
        p.round()
    assert all(s.kind == Kind.DATA for s in p.sent_log)
    assert p.tx.counters["fec_sent"] == 0


def test_tail_block_flushed_at_stream_end():
    p = Pair(fec=True)
    p.tx.write(data_bytes(3))
    p.tx.close()
    segs = p.tx.sender_tick(p.now)
    assert [s.kind for s in segs] == [Kind.DATA] * 3 + [Kind.FEC]


@given(st.integers(1, 60), st.lists(st.integers(0, 1000), max_size=40), st.booleans())
@settings(max_examples=60)
def test_pipe_never_exceeds_window(n, drops, fec):
    p = Pair(fec=fec)
    p.tx.write(data_bytes(n))
    p.tx.close()
    dropset = set(drops)
    counter = [0]

    def drop(seg):
        counter[0] += 1
        return counter[0] in dropset

    for _ in range(15):
        p.round(drop)
        assert p.tx.pipe <= p.tx.cwnd + 1e-9


# -- acks, feedback, recovery ---------------------------------------------------

def test_slow_start_doubles_per_round():
    p = Pair(fec=False)
    p.tx.write(data_bytes(400))
    sizes = []
    for _ in range(3):
        sizes.append(len(p.round()))
    assert sizes == [10, 20, 40]


def test_recovered_feedback_means_no_retransmission():
    p = Pair(fec=True)
    p.tx.write(data_bytes(9))
    p.tx.close()
    victim = 4 * MSS
    p.round(lambda s: s.kind == Kind.DATA and s.seq == victim and not s.retransmission)
    c = p.tx.counters
    assert c["fec_recovered"] == 1 and c["retransmitted"] == 0 and c["fast_retransmits"] == 0
    assert p.tx.cwnd >= 10 and p.tx.all_acked()
    assert bytes(p.delivered) == data_bytes(9)


def test_two_losses_fail_and_halve():
    p = Pair(fec=True, config=TransportConfig(prr=False))
    p.tx.write(data_bytes(9))
    p.tx.close()
    p.round(lambda s: s.kind == Kind.DATA and s.seq in (2 * MSS, 6 * MSS) and not s.retransmission)
    c = p.tx.counters
    assert c["fec_failed"] == 1 and c["loss_events"] == 1
    assert p.tx.ssthresh == pytest.approx(p.tx.cwnd) and p.tx.cwnd <= 10
    for _ in range(3):
        p.round()
    assert c["retransmitted"] == 2
    assert bytes(p.delivered) == data_bytes(9)


def test_clean_block_is_acked_unused():
    p = Pair(fec=True)
    p.tx.write(data_bytes(9))
    p.tx.close()
    p.round()
    assert p.tx.counters["fec_unused"] == 1
    assert p.rx.rcv_counters["unused"] == 1


def test_unknown_feedback_counted():
    p = Pair(fec=True)
    p.tx.write(data_bytes(2))
    p.round()
    ack = Segment(Kind.ACK, fec_flag=True)
    ack.cum_ack = p.tx.snd_una
    ack.feedback = FecFeedback(999, Outcome.RECOVERED)
    p.tx.on_ack(ack, p.now)
    assert p.tx.counters["unknown_feedback"] == 1


def _stalled_pair(fec, k=None):
    params = DfecParams(start_ratio=k, ratio_min=4) if k else None
    p = Pair(fec=fec, params=params)
    p.tx.write(data_bytes(40))
    p.tx.sender_tick(p.now)
    return p


def test_three_dupacks_trigger_fast_retransmit_without_fec():
    p = _stalled_pair(False)
    fired = [p.tx.on_dupack(p.now) for _ in range(3)]
    assert fired == [False, False, True]
    assert p.tx.counters["fast_retransmits"] == 1


def test_dupack_threshold_follows_block_size():
    p = _stalled_pair(True, k=10)
    assert p.tx.dupack_threshold == 10
    assert not any(p.tx.on_dupack(p.now) for _ in range(7))


def test_recovered_before_threshold_avoids_fast_retransmit():
    p = Pair(fec=True, params=DfecParams(start_ratio=10))
    p.tx.cwnd = 11
    p.tx.write(data_bytes(10))
    p.tx.close()
    victim = 6 * MSS  # seventh packet of the block
    p.round(lambda s: s.kind == Kind.DATA and s.seq == victim)
    assert p.tx.counters["fast_retransmits"] == 0
    assert p.tx.counters["retransmitted"] == 0
    assert p.tx.counters["fec_recovered"] == 1


def test_ten_dupacks_fire_without_recovery():
    p = _stalled_pair(True, k=10)
    fired = [p.tx.on_dupack(p.now) for _ in range(10)]
    assert fired[-1] and not any(fired[:-1])


def test_rto_collapses_window_and_backs_off():
    p = Pair(fec=False)
    p.tx.write(data_bytes(10))
    p.round(lambda s: True)
    rto0 = p.tx.rto
    deadline = p.tx.rto_deadline
    p.tx.on_timer(deadline)
    assert p.tx.cwnd == 1 and p.tx.counters["rtos"] == 1
    assert p.tx.rto == pytest.approx(2 * rto0)
    p.tx.sender_tick(deadline)
    p.tx.on_timer(p.tx.rto_deadline)
    assert p.tx.rto == pytest.approx(4 * rto0)


def test_spurious_retransmission_after_lost_feedback():
    # the parity repairs the hole but every ack after it is lost, so the timer fires
    p = Pair(fec=True)
    p.tx.write(data_bytes(9))
    p.tx.close()
    segs = p.tx.sender_tick(p.now)
    for s in segs:
        if s.kind == Kind.DATA and s.seq == 0:
            continue
        p.rx.receiver_on_segment(s, p.now)
    assert p.rx.rcv_nxt == 9 * MSS
    p.tx.on_timer(p.tx.rto_deadline)
    out = p.tx.sender_tick(p.tx.rto_deadline + 1e-9)
    assert out and out[0].retransmission and p.tx.counters["retransmitted"] == 1
    replies, delivered = p.rx.receiver_on_segment(out[0], p.now + 2)
    assert delivered == [] and p.rx.rcv_counters["dup_received"] == 1
    p.tx.on_ack(replies[0], p.now + 2)
    assert p.tx.counters["spurious_retransmits"] == 1


def test_ir_schedule_every_quarter_rtt():
    p = Pair(fec=True, ir=True, rtt=0.1)
    assert p.tx.ir_deadline == pytest.approx(p.now + 0.025)
    assert p.tx.dupack_threshold == 3
    assert not p.tx.ir_schedule(p.now)  # nothing sent yet: no parity
    p.tx.write(data_bytes(3))
    p.tx.sender_tick(p.now)
    assert p.tx.ir_schedule(p.now + 0.025)
    segs = p.tx.sender_tick(p.now + 0.025)
    assert [s.kind for s in segs] == [Kind.FEC]


@pytest.mark.parametrize("srtt,gap", [(0.1, 0.025), (0.4, 0.1)])
def test_ir_interval_arithmetic(srtt, gap):
    tx = TransportConn(offer_fec=True, ir_mode=True)
    tx.srtt = srtt
    tx.fec_enabled = True
    tx.ir_schedule(1.0)
    assert tx.ir_deadline == pytest.approx(1.0 + gap)


# -- simulated network ----------------------------------------------------------

def _run_single(pred, n_segments, fec=True, k=9, seed=0, rtt=0.05):
    sim = Simulator()
    path = scripted_path(sim, predicate=pred, rtt=rtt)
    params = DfecParams(start_ratio=k, ratio_min=min(4, k))
    conn = Connection(sim, [path], fec=fec, dfec_params=params)
    data = data_bytes(n_segments, seed)
    conn.write(data)
    conn.close()
    conn.start(0.0)
    sim.run(until=600, stop_when=conn.complete)
    sim.run(until=sim.now + 1.0)  # let the last acks and feedback reach the sender
    return conn, data


@pytest.mark.parametrize("k", [4, 9, 32])
def test_single_in_block_loss_repaired_without_retransmission(k):
    victim = (k // 2) * MSS
    conn, data = _run_single(drop_once(lambda s: s.seq == victim), k, k=k)
    c = conn.subflows[0].sender.counters
    assert bytes(conn.app_rx) == data
    assert (c["retransmitted"], c["fast_retransmits"], c["rtos"]) == (0, 0, 0)
    assert c["fec_recovered"] == 1


def test_fec_off_same_segments_as_plain():
    # a FEC-capable sender whose peer declines behaves exactly like plain transport
    def trace(offer):
        sim = Simulator()
        path = scripted_path(sim, predicate=drop_once(lambda s: s.seq % (7 * MSS) == 0))
        conn = Connection(sim, [path], fec_policy=[offer])
        conn.subflows[0].receiver.offer_fec = False
        conn.write(data_bytes(60))
        conn.close()
        conn.start(0.0)
        tx = conn.subflows[0].sender
        tx.record_cwnd = True
        sim.run(until=100, stop_when=conn.complete)
        return tx.counters, tx.cwnd_samples

    assert trace(True) == trace(False)


@given(st.integers(1, 80), st.sets(st.integers(0, 200), max_size=30), st.sampled_from(["Tcp", "dfec", "ir"]),
       st.sets(st.integers(0, 200), max_size=10))
@settings(max_examples=40)
def test_stream_integrity_under_arbitrary_drops(n, drops, variant, ack_drops):
    counter = {"f": -1, "r": -1}

    def fwd(pkt):
        counter["f"] += 1
        return counter["f"] in drops and pkt.kind in (Kind.DATA, Kind.FEC)

    def rev(pkt):
        counter["r"] += 1
        return counter["r"] in ack_drops and pkt.kind == Kind.ACK

    sim = Simulator()
    path = scripted_path(sim, predicate=fwd, rev_predicate=rev)
    conn = Connection(sim, [path], fec=variant != "Tcp", ir_mode=variant == "ir")
    data = data_bytes(n, seed=n)[: n * MSS - 17]
    conn.write(data)
    conn.close()
    conn.start(0.0)
    sim.run(until=3000, stop_when=conn.complete)
    assert conn.complete()
    assert bytes(conn.app_rx) == data
