"""Dynamic FEC-ratio controller.

The sender measures residual loss (retransmissions over first-time
transmissions) over periods of ``period_rtts`` smoothed RTTs, averages
``n_periods`` such measurements and moves the ratio multiplicatively
toward a target residual loss.  The ratio is kept real-valued; only the
block size handed to the encoder is an integer.
"""

import math
from dataclasses import dataclass, field, asdict
from typing import Optional


@dataclass
class DfecParams:
    target: float = 0.01
    delta: float = 0.33
    n_periods: int = 2
    period_rtts: float = 3.0
    ratio_min: float = 4.0
    ratio_max: float = 256.0
    start_ratio: float = 9.0
    sliding_window: bool = False

    def __post_init__(self):
        self.validate()

    def validate(self):
        if not 0.0 < self.delta < 1.0:
            raise ValueError("delta must lie in (0, 1)")
        if not 0.0 < self.target < 1.0:
            raise ValueError("target must lie in (0, 1)")
        if self.ratio_min < 1:
            raise ValueError("ratio_min must be >= 1")
        if not self.ratio_min <= self.start_ratio <= self.ratio_max:
            raise ValueError("start_ratio must lie within [ratio_min, ratio_max]")
        if self.n_periods < 1:
            raise ValueError("n_periods must be >= 1")
        if self.period_rtts < 1:
            raise ValueError("period_rtts must be >= 1")

    def to_dict(self):
        return asdict(self)


class DegeneratePeriod(ValueError):
    """A period with no first-time transmissions has no residual loss."""


def residual_loss(retransmit: int, total: int) -> float:
    if retransmit < 0:
        raise ValueError("negative retransmission count")
    if total <= retransmit:
        raise DegeneratePeriod(f"total={total} retransmit={retransmit}")
    return retransmit / (total - retransmit)


def average_residual(history) -> Optional[float]:
    """Mean of the recorded residuals, or None when there is nothing to average."""
    if not history:
        return None
    return sum(history) / len(history)


def clamp(x: float, lo: float, hi: float) -> float:
    return lo if x < lo else hi if x > hi else x


@dataclass
class DfecState:
    ratio: float
    residual_history: list = field(default_factory=list)
    period_start: float = 0.0
    period_deadline: float = 0.0
    period_sent0: int = 0
    period_retx0: int = 0
    updates: int = 0


def update_ratio(state: DfecState, params: DfecParams) -> float:
    """Apply one multiplicative step and consume the residual history."""
    if len(state.residual_history) < params.n_periods:
        raise ValueError("update_ratio needs n_periods residual samples")
    mean = average_residual(state.residual_history[-params.n_periods:])
    if mean > params.target:
        ratio = state.ratio * (1.0 - params.delta)
    else:
        ratio = state.ratio * (1.0 + params.delta)
    state.ratio = clamp(ratio, params.ratio_min, params.ratio_max)
    if params.sliding_window:
        del state.residual_history[0]
    else:
        state.residual_history.clear()
    state.updates += 1
    return state.ratio


def effective_block_size(state: DfecState, params: DfecParams) -> int:
    """Integer block size: round-half-to-even of the ratio, clamped."""
    k = round(state.ratio)  # Python rounds half to even
    return int(clamp(k, math.ceil(params.ratio_min), math.floor(params.ratio_max)))


def updates_to_cap(params: DfecParams) -> int:
    """Updates needed to climb from the start ratio to the cap under zero loss."""
    if params.start_ratio >= params.ratio_max:
        return 0
    return math.ceil(math.log(params.ratio_max / params.start_ratio) / math.log(1.0 + params.delta))


class RatioCache:
    """Destination-keyed cache of the last ratio, reused by new connections."""

    def __init__(self):
        self._ratios = {}

    def get(self, key, default: float) -> float:
        return self._ratios.get(key, default)

    def put(self, key, ratio: float):
        self._ratios[key] = ratio

    def __len__(self):
        return len(self._ratios)


class DfecController:
    """One controller per transport connection."""

    def __init__(self, params: Optional[DfecParams] = None, start_ratio: Optional[float] = None):
        self.params = params or DfecParams()
        ratio = self.params.start_ratio if start_ratio is None else clamp(
            start_ratio, self.params.ratio_min, self.params.ratio_max)
        self.state = DfecState(ratio=ratio, period_deadline=math.inf)
        self.history = []  # (time, ratio) after every update
        self.skipped_periods = 0

    @property
    def ratio(self) -> float:
        return self.state.ratio

    def block_size(self) -> int:
        return effective_block_size(self.state, self.params)

    def start(self, now: float, srtt: float, sent_total: int = 0, retransmitted: int = 0):
        """Open the first period; called once the connection has an RTT sample."""
        self.history.append((now, self.state.ratio))
        self._open(now, srtt, sent_total, retransmitted)

    def _open(self, now, srtt, sent_total, retransmitted):
        st = self.state
        st.period_start = now
        st.period_deadline = now + self.params.period_rtts * srtt
        st.period_sent0 = sent_total
        st.period_retx0 = retransmitted

    def on_period_tick(self, now: float, srtt: float, sent_total: int, retransmitted: int) -> Optional[float]:
        """Close the open period if due; return the new ratio when an update happened.

        ``sent_total`` and ``retransmitted`` are cumulative connection counters
        of data packets (first transmissions plus retransmissions, and
        retransmissions alone).
        """
        st = self.state
        if now < st.period_deadline:
            return None
        total = sent_total - st.period_sent0
        retx = retransmitted - st.period_retx0
        self._open(now, srtt, sent_total, retransmitted)
        if total == 0:
            self.skipped_periods += 1
            return None
        try:
            sample = residual_loss(retx, total)
        except DegeneratePeriod:
            self.skipped_periods += 1
            return None
        st.residual_history.append(sample)
        if len(st.residual_history) >= self.params.n_periods:
            ratio = update_ratio(st, self.params)
            self.history.append((now, ratio))
            return ratio
        return None
