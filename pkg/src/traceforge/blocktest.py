"""Block-sign similarity tests between input windows and trace windows.

A window of length l ending at position k is split into d1 = ceil(l/lambda)
blocks of length lambda or lambda+1; the sign of each block's +-1 sum is its
majority bit. The tests compare these signs against the signs of the
corresponding blocks of a trace window: T0 sums sign agreements over all
blocks, T1 over the top-robust-bias blocks of the whole window, T2 over the
top blocks of the window's right 1/shrink fraction, and T = T1 and T2.

When deletion and insertion rates differ, the trace-side window and its block
grid are stretched by trace_scale (default p_keep/p_noins, the expected
output-per-input ratio; the literal q_del/q_ins is available via
ChannelParams.literal_q_ratio for comparison).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np

from .bits import BitString, Seed

# Fraction of blocks whose robust bias a uniform window keeps clear, one tenth
# of the probability that a Brownian increment between two 1/50-wide endpoint
# windows exceeds 1 in modulus. Estimated once by estimate_brownian_theta
# (10^6 paths, 10^3 steps, seed 20240801); shipped frozen so configs are
# reproducible without re-simulation.
BROWNIAN_THETA = 0.0232


def estimate_brownian_theta(paths: int = 1_000_000, steps: int = 1000, seed: Seed | None = None) -> float:
    """Monte Carlo estimate of the Brownian top-block constant.

    Simulates standard Brownian motion on [0, 1 + 1/50] with the given number
    of steps and measures the probability that the ranges of B over the
    endpoint windows [0, 1/50] and [1, 1 + 1/50] are separated by more than 1;
    returns one tenth of that probability.
    """
    if seed is None:
        seed = Seed(20240801)
    rng = seed.generator()
    horizon = 1.0 + 1.0 / 50
    dt = horizon / steps
    lo_steps = max(1, int(round((1.0 / 50) / dt)))
    hi_start = int(round(1.0 / dt))
    hits = 0
    chunk = 20_000
    done = 0
    while done < paths:
        b = min(chunk, paths - done)
        inc = rng.normal(0.0, math.sqrt(dt), size=(b, steps))
        w = np.cumsum(inc, axis=1)
        first = np.concatenate([np.zeros((b, 1)), w[:, :lo_steps]], axis=1)
        second = w[:, hi_start:]
        gap_lo = second.min(axis=1) - first.max(axis=1)
        gap_hi = first.min(axis=1) - second.max(axis=1)
        hits += int(np.sum(np.maximum(gap_lo, gap_hi) > 1.0))
        done += b
    return hits / paths / 10.0


@dataclass(frozen=True)
class TestConfig:
    """Window/block geometry and thresholds for the sign tests.

    c1 is the sign-match threshold fraction for the whole-window sum; the
    tail sum over the right 1/shrink fraction uses c1_tail when given (the
    anchoring tests want a loose whole-window vote with a near-exact tail).
    """

    window_len: int
    block_len: int
    c1: float
    theta: float = 0.1
    shrink: float = 4.0
    trace_scale: float = 1.0
    slack_frac: float = 0.01
    c1_tail: float | None = None

    def __post_init__(self):
        if self.window_len < 1:
            raise ValueError("window_len must be positive")
        if not 1 <= self.block_len <= math.isqrt(self.window_len):
            raise ValueError(
                f"block_len must lie in [1, floor(sqrt(window_len))] = "
                f"[1, {math.isqrt(self.window_len)}], got {self.block_len}"
            )
        if not 0 < self.c1 < 1:
            raise ValueError("c1 must lie in (0, 1)")
        if self.c1_tail is not None and not 0 < self.c1_tail < 1:
            raise ValueError("c1_tail must lie in (0, 1)")
        if not 0 < self.theta <= 1:
            raise ValueError("theta must lie in (0, 1]")
        if self.shrink < 1:
            raise ValueError("shrink must be >= 1")
        if self.trace_scale <= 0:
            raise ValueError("trace_scale must be positive")

    @property
    def tail_threshold(self) -> float:
        return self.c1 if self.c1_tail is None else self.c1_tail

    @property
    def d1(self) -> int:
        return -(-self.window_len // self.block_len)

    @property
    def d2(self) -> int:
        return math.ceil(self.window_len / (self.block_len * self.shrink))

    @property
    def n_top1(self) -> int:
        return math.ceil(self.theta * self.d1)

    @property
    def n_top2(self) -> int:
        return math.ceil(self.theta * self.d2)

    @property
    def offsets(self) -> np.ndarray:
        """Within-window block boundaries: block i is (off[i-1], off[i]]."""
        i = np.arange(self.d1 + 1)
        return -(-i * self.window_len // self.d1)

    @property
    def trace_window_len(self) -> int:
        return int(round(self.window_len * self.trace_scale))

    @property
    def trace_offsets(self) -> np.ndarray:
        i = np.arange(self.d1 + 1)
        return -(-i * self.trace_window_len // self.d1)

    @property
    def tail_eligible(self) -> np.ndarray:
        """Blocks contained in the rightmost ceil(window_len/shrink) positions."""
        cut = self.window_len - math.ceil(self.window_len / self.shrink)
        return np.flatnonzero(self.offsets[:-1] >= cut)

    def scaled(self, window_len: int) -> "TestConfig":
        """Same thresholds on a different window length (block length capped)."""
        lam = min(self.block_len, math.isqrt(window_len))
        return replace(self, window_len=window_len, block_len=max(1, lam))


def block_boundaries(k: int, cfg: TestConfig) -> np.ndarray:
    """Absolute block boundaries u_0..u_d1 for the window ending at k."""
    if k < cfg.window_len - 1:
        raise ValueError(f"window ending at {k} does not fit (need k >= {cfg.window_len - 1})")
    return k - cfg.window_len + cfg.offsets


def block_sums(window, cfg: TestConfig, offsets: np.ndarray | None = None) -> np.ndarray:
    """Integer +-1 sums per block of one window (length must match the grid)."""
    bits = window.bits if isinstance(window, BitString) else np.asarray(window, dtype=np.uint8)
    off = cfg.offsets if offsets is None else offsets
    if bits.size != off[-1]:
        raise ValueError(f"window length {bits.size} does not match grid length {off[-1]}")
    signed = 2 * bits.astype(np.int32) - 1
    csum = np.concatenate([[0], np.cumsum(signed)])
    return csum[off[1:]] - csum[off[:-1]]


def robust_bias(
    x: BitString | np.ndarray,
    u_lo: int,
    u_hi: int,
    block_len: int,
    slack_frac: float = 0.01,
) -> float:
    """Endpoint-perturbation-robust normalized block sum.

    Minimizes |sum of 2x_j - 1 over (t1, t2]| over integer endpoints within
    block_len*slack_frac of (u_lo, u_hi), normalized by sqrt(block_len). With
    slack below one (block_len < 1/slack_frac) only the block sum itself
    remains. A block is "clear" when the result is at least 1.
    """
    bits = x.bits if isinstance(x, BitString) else np.asarray(x, dtype=np.uint8)
    n = bits.size
    if not (-1 <= u_lo <= u_hi < n):
        raise ValueError(f"block ({u_lo}, {u_hi}] out of range for length {n}")
    slack = block_len * slack_frac
    signed = 2 * bits.astype(np.int64) - 1
    csum = np.concatenate([[0], np.cumsum(signed)])
    t1s = _perturbed(u_lo, slack, -1, n - 1)
    t2s = _perturbed(u_hi, slack, 0, n - 1)
    best = None
    for t1 in t1s:
        for t2 in t2s:
            s = abs(int(csum[t2 + 1] - csum[t1 + 1])) if t2 >= t1 else 0
            best = s if best is None else min(best, s)
    return best / math.sqrt(block_len)


def _perturbed(u: int, slack: float, lo: int, hi: int) -> range:
    left = max(lo, int(math.floor(u - slack)) + 1)
    right = min(hi, int(math.ceil(u + slack)) - 1)
    if right < left:
        return range(u, u + 1)
    return range(left, right + 1)


def window_biases(x: BitString | np.ndarray, k: int, cfg: TestConfig) -> np.ndarray:
    """Robust bias of every block of the window ending at k."""
    u = block_boundaries(k, cfg)
    return np.array(
        [
            robust_bias(x, int(u[i]), int(u[i + 1]), cfg.block_len, cfg.slack_frac)
            for i in range(cfg.d1)
        ]
    )


def select_top_blocks(biases: np.ndarray, count: int, eligible: np.ndarray | None = None) -> np.ndarray:
    """Indices of the `count` largest biases; ties resolved to lower indices."""
    idx = np.arange(len(biases)) if eligible is None else np.asarray(eligible)
    if count > idx.size:
        raise ValueError(f"cannot select {count} blocks from {idx.size} eligible")
    order = idx[np.lexsort((idx, -biases[idx]))]
    return np.sort(order[:count])


@dataclass
class InputWindow:
    """Precomputed input-side data for scanning one window against traces."""

    cfg: TestConfig
    k: int
    sums: np.ndarray
    signs: np.ndarray
    biases: np.ndarray
    top1: np.ndarray
    top2: np.ndarray

    @property
    def thr1(self) -> float:
        return self.cfg.c1 * self.top1.size

    @property
    def thr2(self) -> float:
        return self.cfg.tail_threshold * self.top2.size


def build_input_window(x: BitString | np.ndarray, k: int, cfg: TestConfig) -> InputWindow:
    bits = x.bits if isinstance(x, BitString) else np.asarray(x, dtype=np.uint8)
    if k >= bits.size:
        raise ValueError(f"window endpoint {k} beyond string length {bits.size}")
    if k < cfg.window_len - 1:
        raise ValueError(f"window ending at {k} does not fit")
    w = bits[k - cfg.window_len + 1 : k + 1]
    sums = block_sums(w, cfg)
    biases = window_biases(bits, k, cfg)
    top1 = select_top_blocks(biases, cfg.n_top1)
    eligible = cfg.tail_eligible
    top2 = select_top_blocks(biases, min(cfg.n_top2, eligible.size), eligible)
    return InputWindow(cfg, k, sums, np.sign(sums).astype(np.int8), biases, top1, top2)


def trace_block_sums(trace, k_prime: int, cfg: TestConfig) -> np.ndarray:
    """Block sums of the trace window ending at k_prime (scaled grid)."""
    bits = trace.bits if isinstance(trace, BitString) else np.asarray(trace, dtype=np.uint8)
    lt = cfg.trace_window_len
    if k_prime < lt - 1 or k_prime >= bits.size:
        raise ValueError(f"trace window ending at {k_prime} does not fit")
    w = bits[k_prime - lt + 1 : k_prime + 1]
    return block_sums(w, cfg, offsets=cfg.trace_offsets)


def test_T0(w, w_tilde, cfg: TestConfig) -> bool:
    """Simplified test: sign agreement summed over all blocks vs c1*l/lambda."""
    s = block_sums(w, cfg)
    st = block_sums(w_tilde, cfg, offsets=cfg.trace_offsets)
    total = int(np.sum(np.sign(s) * np.sign(st)))
    return total > cfg.c1 * cfg.window_len / cfg.block_len


def test_T(x, x_tilde, k: int, k_prime: int, cfg: TestConfig) -> bool:
    """Full test T = T1 and T2 at input endpoint k, trace endpoint k_prime.

    Below-window endpoints make the test false by definition rather than an
    error; endpoints beyond the strings are usage errors.
    """
    if k < cfg.window_len - 1 or k_prime < cfg.trace_window_len - 1:
        return False
    win = build_input_window(x, k, cfg)
    st = trace_block_sums(x_tilde, k_prime, cfg)
    return _decide(win, np.sign(st).astype(np.int8))


def _decide(win: InputWindow, trace_signs: np.ndarray) -> bool:
    t1 = float(np.sum(win.signs[win.top1] * trace_signs[win.top1])) > win.thr1
    t2 = float(np.sum(win.signs[win.top2] * trace_signs[win.top2])) > win.thr2
    return bool(t1 and t2)


def scan_tests(
    win: InputWindow,
    prefix_sums: np.ndarray,
    lengths: np.ndarray,
    positions: np.ndarray,
) -> np.ndarray:
    """Vectorized T over many traces and candidate endpoints.

    prefix_sums is the (B, L+1) signed prefix-sum matrix of a trace batch,
    positions either a shared (P,) vector or a per-trace (B, P) matrix of
    right endpoints. Returns (B, P) booleans; endpoints that do not fit inside
    a trace are False.
    """
    cfg = win.cfg
    lt = cfg.trace_window_len
    toff = cfg.trace_offsets
    if positions.ndim == 1:
        pos = positions[None, :]
    else:
        pos = positions
    base = pos - lt + 1
    valid = (base >= 0) & (pos <= (lengths[:, None] - 1))
    idx = np.clip(base[:, :, None] + toff[None, None, :], 0, prefix_sums.shape[1] - 1)
    rows = np.arange(prefix_sums.shape[0])[:, None, None]
    gathered = prefix_sums[rows, idx]
    sums = gathered[:, :, 1:] - gathered[:, :, :-1]
    signs = np.sign(sums)
    prod1 = np.einsum("bpi,i->bp", signs[:, :, win.top1], win.signs[win.top1])
    prod2 = np.einsum("bpi,i->bp", signs[:, :, win.top2], win.signs[win.top2])
    return (prod1 > win.thr1) & (prod2 > win.thr2) & valid


def first_positive(
    win: InputWindow,
    prefix_sums: np.ndarray,
    lengths: np.ndarray,
    lo,
    hi,
    chunk: int = 256,
) -> np.ndarray:
    """First endpoint in [lo, hi] where T fires, per trace; -1 when none.

    lo is shared, hi may be shared or per-trace. The scan is chunked left to
    right and stops as soon as every trace has fired or exhausted its range,
    preserving first-positive semantics at vectorized cost.
    """
    B = prefix_sums.shape[0]
    hi_arr = np.broadcast_to(np.asarray(hi), (B,)).astype(np.int64)
    result = np.full(B, -1, dtype=np.int64)
    start = int(lo)
    top = int(hi_arr.max())
    while start <= top:
        stop = min(start + chunk - 1, top)
        pos = np.arange(start, stop + 1)
        hits = scan_tests(win, prefix_sums, lengths, pos)
        hits &= pos[None, :] <= hi_arr[:, None]
        undecided = result < 0
        hits &= undecided[:, None]
        any_hit = hits.any(axis=1)
        result[any_hit] = start + hits[any_hit].argmax(axis=1)
        if not (result < 0).any() or (stop >= hi_arr[result < 0].max()):
            break
        start = stop + 1
    return result
