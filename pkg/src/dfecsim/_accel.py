"""Hot numeric kernels with a numba path and a pure-numpy fallback.

The numba path is used when numba imports cleanly and the environment
variable ``DFECSIM_NUMBA`` is not set to ``0``.  Both paths produce
bit-identical output for identical input.
"""

import os

import numpy as np

_WANT_NUMBA = os.environ.get("DFECSIM_NUMBA", "1").strip().lower() not in ("0", "false", "no", "off")

try:
    if not _WANT_NUMBA:
        raise ImportError
    from numba import njit

    HAVE_NUMBA = True
except ImportError:  # pragma: no cover - depends on environment
    HAVE_NUMBA = False


# ---------------------------------------------------------------------------
# numpy implementations (always available; also the reference for numba)
# ---------------------------------------------------------------------------

def xor_fold_numpy(rows: np.ndarray) -> np.ndarray:
    if rows.shape[0] == 0:
        return np.zeros(rows.shape[1], dtype=np.uint8)
    return np.bitwise_xor.reduce(rows, axis=0)


def leave_one_out_numpy(rows: np.ndarray, parity: np.ndarray) -> np.ndarray:
    """Row i of the result is parity XOR every row except row i."""
    k, width = rows.shape
    prefix = np.bitwise_xor.accumulate(rows, axis=0)
    suffix = np.bitwise_xor.accumulate(rows[::-1], axis=0)[::-1]
    out = np.empty((k, width), dtype=np.uint8)
    out[:] = parity
    if k > 1:
        out[1:] ^= prefix[:-1]
        out[:-1] ^= suffix[1:]
    return out


def gilbert_elliott_numpy(u_trans, u_drop, p_g2b, p_b2g, drop_in_bad, state0):
    """Two-state chain; each step transitions first, then draws loss in the new state.

    Returns (drops as uint8 array, final state).
    """
    n = u_trans.shape[0]
    if n == 0:
        return np.zeros(0, dtype=np.uint8), int(state0)
    to_bad = u_trans < p_g2b  # next state if currently good
    stay_bad = u_trans >= p_b2g  # next state if currently bad
    fixed = to_bad == stay_bad
    flip = to_bad & ~stay_bad
    idx = np.arange(n)
    last_fixed = np.maximum.accumulate(np.where(fixed, idx, -1))
    flips = np.cumsum(flip.astype(np.int64))
    base = np.where(last_fixed >= 0, to_bad[np.maximum(last_fixed, 0)], bool(state0))
    flips_before = np.where(last_fixed >= 0, flips[np.maximum(last_fixed, 0)], 0)
    # a fixed step consumes its own flip flag (it has none), so parity counts after it
    parity = (flips - flips_before) & 1
    states = base ^ parity.astype(bool)
    if drop_in_bad >= 1.0:
        drops = states
    else:
        drops = states & (u_drop < drop_in_bad)
    return drops.astype(np.uint8), int(states[-1])


def run_lengths_numpy(drops: np.ndarray) -> np.ndarray:
    """Lengths of maximal runs of nonzero entries."""
    d = np.concatenate(([0], (drops != 0).astype(np.int8), [0]))
    edges = np.diff(d)
    starts = np.flatnonzero(edges == 1)
    ends = np.flatnonzero(edges == -1)
    return (ends - starts).astype(np.int64)


# ---------------------------------------------------------------------------
# numba implementations
# ---------------------------------------------------------------------------

if HAVE_NUMBA:

    @njit(cache=True)
    def xor_fold_numba(rows):
        k, width = rows.shape
        out = np.zeros(width, dtype=np.uint8)
        for i in range(k):
            for j in range(width):
                out[j] ^= rows[i, j]
        return out

    @njit(cache=True)
    def leave_one_out_numba(rows, parity):
        k, width = rows.shape
        out = np.empty((k, width), dtype=np.uint8)
        acc = parity.copy()
        for i in range(k):
            for j in range(width):
                out[i, j] = acc[j]
                acc[j] ^= rows[i, j]
        acc[:] = 0
        for i in range(k - 1, -1, -1):
            for j in range(width):
                out[i, j] ^= acc[j]
                acc[j] ^= rows[i, j]
        return out

    @njit(cache=True)
    def _ge_numba(u_trans, u_drop, p_g2b, p_b2g, drop_in_bad, state0):
        n = u_trans.shape[0]
        drops = np.zeros(n, dtype=np.uint8)
        s = state0
        for i in range(n):
            if s == 0:
                if u_trans[i] < p_g2b:
                    s = 1
            else:
                if u_trans[i] < p_b2g:
                    s = 0
            if s == 1:
                if drop_in_bad >= 1.0 or u_drop[i] < drop_in_bad:
                    drops[i] = 1
        return drops, s

    def gilbert_elliott_numba(u_trans, u_drop, p_g2b, p_b2g, drop_in_bad, state0):
        drops, s = _ge_numba(u_trans, u_drop, float(p_g2b), float(p_b2g), float(drop_in_bad), int(state0))
        return drops, int(s)

    @njit(cache=True)
    def _runs_numba(drops):
        out = np.empty(drops.shape[0] // 2 + 1, dtype=np.int64)
        m = 0
        run = 0
        for i in range(drops.shape[0]):
            if drops[i] != 0:
                run += 1
            elif run > 0:
                out[m] = run
                m += 1
                run = 0
        if run > 0:
            out[m] = run
            m += 1
        return out[:m]

    def run_lengths_numba(drops):
        return _runs_numba(np.ascontiguousarray(drops, dtype=np.uint8))

    xor_fold = xor_fold_numba
    leave_one_out = leave_one_out_numba
    gilbert_elliott = gilbert_elliott_numba
    run_lengths = run_lengths_numba
else:
    xor_fold = xor_fold_numpy
    leave_one_out = leave_one_out_numpy
    gilbert_elliott = gilbert_elliott_numpy
    run_lengths = run_lengths_numpy

BACKEND = "numba" if HAVE_NUMBA else "numpy"
