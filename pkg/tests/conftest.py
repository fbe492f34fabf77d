import os

from hypothesis import HealthCheck, settings

from dfecsim.netsim import MSS, Link, Path, LinkSpec, ScriptedLoss, Simulator
from dfecsim.transport import Kind, TransportConn

settings.register_profile("default", deadline=None, suppress_health_check=[HealthCheck.too_slow])
settings.register_profile("ci", deadline=None, max_examples=200,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile(os.environ.get("HYPOTHESIS_PROFILE", "default"))


def scripted_path(sim, name="b1", predicate=None, rtt=0.025, capacity=20e6, queue=None,
                  rev_predicate=None):
    """A duplex path whose forward (and optionally reverse) drops follow ``predicate(pkt)``."""
    spec = LinkSpec(capacity, rtt)
    q = queue or spec.queue_bound()
    fwd = Link(sim, capacity, rtt / 2, q, ScriptedLoss(predicate=predicate), name=f"{name}.fwd")
    rev = Link(sim, capacity, rtt / 2, q, ScriptedLoss(predicate=rev_predicate), name=f"{name}.rev")
    return Path(name, fwd, rev, spec)


def drop_once(match):
    """Predicate dropping the first transmission of every data segment ``match`` accepts."""
    seen = set()

    def pred(pkt):
        if getattr(pkt, "kind", None) != Kind.DATA or pkt.retransmission:
            return False
        if pkt.seq in seen or not match(pkt):
            return False
        seen.add(pkt.seq)
        return True

    return pred


class Pair:
    """Sender/receiver endpoints wired back to back, advanced in lock-step rounds.

    Each round the sender emits what its window allows, ``drop`` filters the
    segments on the way, and all resulting acks reach the sender one RTT later.
    """

    def __init__(self, fec=True, ir=False, config=None, params=None, rtt=0.1):
        self.tx = TransportConn(config, offer_fec=fec, ir_mode=ir, dfec_params=params)
        self.rx = TransportConn(config, offer_fec=fec)
        self.rtt = rtt
        self.now = 0.0
        syn = self.tx.connect(0.0)
        replies, _ = self.rx.receiver_on_segment(syn, 0.0)
        self.now = rtt
        for seg in replies:
            for back in self.tx.on_ack(seg, self.now):
                self.rx.receiver_on_segment(back, self.now)
        self.delivered = bytearray()
        self.sent_log = []

    def round(self, drop=lambda seg: False):
        segs = self.tx.sender_tick(self.now)
        self.sent_log.extend(segs)
        acks = []
        for seg in segs:
            if drop(seg):
                continue
            out, chunks = self.rx.receiver_on_segment(seg, self.now + self.rtt / 2)
            acks.extend(out)
            for _, payload, _ in chunks:
                self.delivered += payload
        self.now += self.rtt
        for a in acks:
            self.tx.on_ack(a, self.now)
        return segs


def data_bytes(n_segments, seed=0):
    import numpy as np
    return np.random.default_rng(seed).bytes(n_segments * MSS)


def new_sim():
    return Simulator()


# acceptance criteria report ---------------------------------------------------

_CRITERIA = []


def record_criterion(n, ok, detail):
    line = f"criterion {n}: {'PASS' if ok else 'FAIL'} - {detail}"
    _CRITERIA.append(line)
    print(line)


def pytest_terminal_summary(terminalreporter):
    if _CRITERIA:
        terminalreporter.section("acceptance criteria")
        for line in _CRITERIA:
            terminalreporter.write_line(line)
