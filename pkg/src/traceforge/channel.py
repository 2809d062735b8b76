"""Deletion-insertion channel: simulators, alignment bookkeeping, exact DPs.

Two faithful samplers are provided. `transmit` runs the per-step inductive
process (delete / insert-0 / insert-1 / copy driven by one uniform draw per
step), stopping once all input bits have been consumed, so no insertions occur
after the final input bit. `transmit_geometric` runs the two-stage process:
a Geometric(1-q_ins)-1 burst of uniform bits inserted before (or after) each
input bit, then independent Bernoulli(q_del) deletions of everything. Their
distributional equality is a test target, so the exact DPs below deliberately
avoid sharing derivations between the two routes: everything tagged "series"
sums the geometric/binomial series of the two-stage construction directly,
while the "step" engines use the per-step transition weights.

Every simulated trace carries provenance (which input bit each output bit was
copied from, or that it was inserted), from which the alignment maps are
derived: `f_of(k)` is the trace position of the first surviving bit of the
input suffix starting at k, `g_of(j)` is the input origin of the first copied
bit at or after trace position j, and `h_of(j)` is the last input bit examined
when output j was produced.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from functools import cached_property

import numpy as np
from scipy import sparse
from scipy.signal import lfilter

from .bits import BitString, Seed

# Per-term floor for geometric series in the exact DPs; documented so that
# likelihood and marginal comparisons are reproducible bit-for-bit.
SERIES_EPS = 1e-15


@dataclass(frozen=True)
class ChannelParams:
    """Deletion probability, insertion probability, and derived step weights."""

    q_del: float
    q_ins: float

    def __post_init__(self):
        if not (0 <= self.q_del < 1 and 0 <= self.q_ins < 1):
            raise ValueError(
                f"probabilities must lie in [0, 1): q_del={self.q_del}, q_ins={self.q_ins}"
            )

    @property
    def p_keep(self) -> float:
        return 1.0 - self.q_del

    @property
    def p_noins(self) -> float:
        return 1.0 - self.q_ins

    @property
    def step_delete(self) -> float:
        """Per-step deletion weight of the inductive construction."""
        return self.q_del * (1 - self.q_ins) / (1 - self.q_del * self.q_ins)

    @property
    def step_insert(self) -> float:
        """Per-step insertion weight of the inductive construction."""
        return self.q_ins * (1 - self.q_del) / (1 - self.q_del * self.q_ins)

    @property
    def step_copy(self) -> float:
        return 1.0 - self.step_delete - self.step_insert

    @property
    def length_ratio(self) -> float:
        """Expected |trace| / n; equals the per-bit mean emission p_keep/p_noins."""
        return self.p_keep / self.p_noins

    def literal_q_ratio(self) -> float:
        """The q_del/q_ins ratio, offered as an alternative window scale."""
        if self.q_ins == 0:
            raise ValueError("q_del/q_ins undefined for q_ins = 0")
        return self.q_del / self.q_ins


# ---------------------------------------------------------------------------
# Traces with provenance
# ---------------------------------------------------------------------------


@dataclass
class AlignedTrace:
    """A trace plus per-output-bit provenance.

    source[j] is the input index output bit j was copied from, or -1 if the
    bit was inserted. examined[j] is the largest input index examined by the
    time bit j was produced (-1 if none yet). events, when recorded, is the
    per-step action log (0 delete, 1 insert-0, 2 insert-1, 3 copy) from which
    the step index determining each output bit can be recovered.
    """

    bits: np.ndarray
    source: np.ndarray
    examined: np.ndarray
    n_input: int
    events: np.ndarray | None = None

    def __post_init__(self):
        self.bits = np.asarray(self.bits, dtype=np.uint8)
        self.source = np.asarray(self.source, dtype=np.int64)
        self.examined = np.asarray(self.examined, dtype=np.int64)

    def __len__(self) -> int:
        return int(self.bits.size)

    @property
    def trace(self) -> BitString:
        return BitString(self.bits)

    @cached_property
    def _copied_positions(self) -> np.ndarray:
        return np.flatnonzero(self.source >= 0)

    @cached_property
    def _copied_sources(self) -> np.ndarray:
        return self.source[self._copied_positions]

    def f_of(self, k: int) -> int | None:
        """Trace position of the first preserved input bit at index >= k."""
        if k < 0:
            raise IndexError("k must be nonnegative")
        idx = int(np.searchsorted(self._copied_sources, k, side="left"))
        if idx >= self._copied_sources.size:
            return None
        return int(self._copied_positions[idx])

    def g_of(self, j: int) -> int | None:
        """Input origin of the first copied trace bit at position >= j."""
        if j < 0:
            raise IndexError("j must be nonnegative")
        idx = int(np.searchsorted(self._copied_positions, j, side="left"))
        if idx >= self._copied_positions.size:
            return None
        return int(self._copied_sources[idx])

    def h_of(self, j: int) -> int:
        """Last input index examined by the time output bit j was produced."""
        if not 0 <= j < len(self):
            raise IndexError(f"output position {j} out of range")
        return int(self.examined[j])

    def psi_of(self, j: int) -> int:
        """Step index that produced output bit j (requires an event log)."""
        if self.events is None:
            raise ValueError("trace was simulated without an event log")
        emitting = np.flatnonzero(self.events != 0)
        return int(emitting[j])


def transmit(
    x: BitString, params: ChannelParams, seed: Seed, record_events: bool = False
) -> AlignedTrace:
    """Send x through the channel via the per-step inductive construction.

    One uniform draw per step selects delete / insert-0 / insert-1 / copy with
    the step weights; the process stops when all input bits are consumed.
    """
    rng = seed.generator()
    a = params.step_delete
    b = params.step_insert
    n = len(x)
    xb = x.bits
    out_bits: list[int] = []
    src: list[int] = []
    exam: list[int] = []
    events: list[int] = [] if record_events else None
    s = 0
    half = a + b / 2
    ab = a + b
    while s < n:
        u = rng.random()
        if u < a:
            s += 1
            if record_events:
                events.append(0)
        elif u < half:
            out_bits.append(0)
            src.append(-1)
            exam.append(s - 1)
            if record_events:
                events.append(1)
        elif u < ab:
            out_bits.append(1)
            src.append(-1)
            exam.append(s - 1)
            if record_events:
                events.append(2)
        else:
            out_bits.append(int(xb[s]))
            src.append(s)
            exam.append(s)
            s += 1
            if record_events:
                events.append(3)
    return AlignedTrace(
        np.array(out_bits, dtype=np.uint8),
        np.array(src, dtype=np.int64),
        np.array(exam, dtype=np.int64),
        n,
        np.array(events, dtype=np.int8) if record_events else None,
    )


def transmit_geometric(
    x: BitString, params: ChannelParams, seed: Seed, convention: str = "before"
) -> AlignedTrace:
    """Send x through the channel via the two-stage geometric construction.

    Inserts Geometric(1-q_ins)-1 uniform bits before (or after) each input
    bit, then deletes every bit of the padded string independently with
    probability q_del. Inserted-then-deleted bits leave no output.
    """
    if convention not in ("before", "after"):
        raise ValueError(f"unknown convention {convention!r}")
    rng = seed.generator()
    n = len(x)
    gaps = rng.geometric(params.p_noins, size=n).astype(np.int64) - 1
    total_ins = int(gaps.sum())
    ins_values = rng.integers(0, 2, size=total_ins, dtype=np.uint8)
    m = n + total_ins
    inter_bits = np.empty(m, dtype=np.uint8)
    inter_src = np.full(m, -1, dtype=np.int64)
    starts = np.concatenate([[0], np.cumsum(gaps + 1)])[:n]
    bit_pos = starts + (gaps if convention == "before" else 0)
    inter_src[bit_pos] = np.arange(n)
    inter_bits[bit_pos] = x.bits
    inter_bits[inter_src < 0] = ins_values
    kept = rng.random(m) >= params.q_del
    # running max of source indices = last input bit examined at each point
    examined = np.maximum.accumulate(inter_src) if m else inter_src
    return AlignedTrace(inter_bits[kept], inter_src[kept], examined[kept], n)


def validate_provenance(trace: AlignedTrace, x: BitString) -> None:
    """Assert the structural invariants of a simulated trace."""
    copied = trace.source >= 0
    srcs = trace.source[copied]
    if srcs.size and (np.diff(srcs) <= 0).any():
        raise AssertionError("copied source indices must be strictly increasing")
    if not np.array_equal(trace.bits[copied], x.bits[srcs]):
        raise AssertionError("copied values must equal their source bits")
    if srcs.size and (srcs >= len(x)).any():
        raise AssertionError("source index beyond input length")


# ---------------------------------------------------------------------------
# Bulk simulation (vectorized, same law as `transmit`)
# ---------------------------------------------------------------------------


@dataclass
class ChannelStructure:
    """Channel randomness decoupled from input values.

    Between consecutive consumed input bits the per-step process inserts a
    Geometric(1-step_insert)-1 burst, and each consumption keeps the bit with
    probability p_keep; `fill` pre-draws every output cell as a uniform bit so
    inserted values need no scatter. Holding the structure fixed while varying
    the input realizes common-random-number coupling across hypotheses.
    """

    ins_counts: np.ndarray  # (B, n) surviving insertions before each bit
    keep: np.ndarray  # (B, n) bool
    fill: np.ndarray  # (B, Lmax) uint8 uniform values

    @property
    def count(self) -> int:
        return self.ins_counts.shape[0]


@dataclass
class TraceBatch:
    """Padded batch of traces: bits, provenance, and true lengths."""

    bits: np.ndarray  # (B, Lmax) uint8, zero beyond length
    source: np.ndarray | None  # (B, Lmax) int32, -1 inserted, -2 padding
    lengths: np.ndarray  # (B,) int64

    @property
    def count(self) -> int:
        return self.bits.shape[0]

    def row(self, i: int) -> np.ndarray:
        return self.bits[i, : self.lengths[i]]

    def signed_prefix_sums(self) -> np.ndarray:
        """(B, Lmax+1) prefix sums of 2*bit - 1, zeroed beyond each length."""
        signed = 2 * self.bits.astype(np.int32) - 1
        cols = np.arange(self.bits.shape[1])
        signed[cols[None, :] >= self.lengths[:, None]] = 0
        out = np.zeros((self.bits.shape[0], self.bits.shape[1] + 1), dtype=np.int32)
        np.cumsum(signed, axis=1, out=out[:, 1:])
        return out

    def g_at(self, positions: np.ndarray) -> np.ndarray:
        """Vectorized g: input origin of first copied bit at/after positions.

        Returns -1 where no copied bit exists at or after the position (or the
        position itself is negative). Requires provenance.
        """
        if self.source is None:
            raise ValueError("batch has no provenance")
        positions = np.asarray(positions)
        cols = np.arange(self.bits.shape[1])
        eligible = (
            (self.source >= 0)
            & (cols[None, :] >= positions[:, None])
            & (cols[None, :] < self.lengths[:, None])
        )
        first = eligible.argmax(axis=1)
        has = eligible.any(axis=1) & (positions >= 0)
        out = np.where(has, self.source[np.arange(self.count), first], -1)
        return out.astype(np.int64)

    @staticmethod
    def from_traces(traces) -> "TraceBatch":
        """Pack plain bit strings (no provenance) into a padded batch."""
        lengths = np.array([len(t) for t in traces], dtype=np.int64)
        lmax = int(lengths.max()) if len(traces) else 0
        bits = np.zeros((len(traces), lmax), dtype=np.uint8)
        for i, t in enumerate(traces):
            arr = t.bits if isinstance(t, BitString) else np.asarray(t, dtype=np.uint8)
            bits[i, : arr.size] = arr
        return TraceBatch(bits, None, lengths)


def sample_structure(n: int, count: int, params: ChannelParams, rng) -> ChannelStructure:
    b = params.step_insert
    if b > 0:
        ins = rng.geometric(1 - b, size=(count, n)).astype(np.int32) - 1
    else:
        ins = np.zeros((count, n), dtype=np.int32)
    keep = rng.random((count, n)) < params.p_keep
    lengths = ins.sum(axis=1) + keep.sum(axis=1)
    lmax = int(lengths.max()) if count else 0
    fill = rng.integers(0, 2, size=(count, lmax), dtype=np.uint8)
    return ChannelStructure(ins, keep, fill)


def apply_structure(structure: ChannelStructure, x) -> TraceBatch:
    """Build the trace batch for input x under fixed channel randomness.

    x may be a BitString (shared by all rows) or a (B, n) uint8 matrix with
    one input per row.
    """
    ins, keep = structure.ins_counts, structure.keep
    count, n = ins.shape
    steps = ins + keep.astype(np.int32)
    cum = np.zeros((count, n + 1), dtype=np.int64)
    np.cumsum(steps, axis=1, out=cum[:, 1:])
    lengths = cum[:, n].copy()
    bits = structure.fill.copy()
    source = np.full(bits.shape, -1, dtype=np.int32)
    pos = cum[:, :n] + ins  # output position of bit k when kept
    rows, ks = np.nonzero(keep)
    cols = pos[rows, ks]
    if isinstance(x, BitString):
        vals = x.bits[ks]
    else:
        xm = np.asarray(x, dtype=np.uint8)
        vals = xm[rows, ks] if xm.ndim == 2 else xm[ks]
    bits[rows, cols] = vals
    source[rows, cols] = ks
    colgrid = np.arange(bits.shape[1])
    padmask = colgrid[None, :] >= lengths[:, None]
    bits[padmask] = 0
    source[padmask] = -2
    return TraceBatch(bits, source, lengths)


def transmit_batch(x: BitString, params: ChannelParams, seed: Seed, count: int) -> TraceBatch:
    """count independent traces of x, vectorized; same law as `transmit`."""
    rng = seed.generator()
    structure = sample_structure(len(x), count, params, rng)
    return apply_structure(structure, x)


# ---------------------------------------------------------------------------
# Insertion-burst equivalence (the moment computation behind Lemma-style
# equality of the two samplers)
# ---------------------------------------------------------------------------


def _gap_survivor_pmf(params: ChannelParams, tmax: int) -> np.ndarray:
    """P[t bits of one insertion burst survive deletion], t = 0..tmax.

    Honest series over the geometric burst length: sum_g (q_ins)^(g-1)
    (1-q_ins) Binomial(g-1, p_keep) pmf, truncated once the geometric weight
    drops below SERIES_EPS.
    """
    q, qi, p = params.q_del, params.q_ins, params.p_keep
    pi = np.zeros(tmax + 1)
    if qi == 0:
        pi[0] = 1.0
        return pi
    w = 1.0 - qi
    binrow = np.zeros(tmax + 1)
    binrow[0] = 1.0  # Binomial(0, p) mass
    while True:
        pi += w * binrow
        w *= qi
        if w < SERIES_EPS:
            return pi
        nxt = binrow * q
        nxt[1:] += binrow[:-1] * p
        binrow = nxt


def insertion_equivalence_pmf(params: ChannelParams, k: int) -> tuple[float, float]:
    """P[k insertions survive one burst], computed both ways.

    First via the geometric-of-binomials series of the two-stage construction,
    then via the Geometric(1 - step_insert) - 1 law implied by the per-step
    construction. The two must agree to ~1e-12.
    """
    if k < 0:
        raise ValueError("k must be nonnegative")
    series = float(_gap_survivor_pmf(params, k)[k])
    b = params.step_insert
    geometric = float((b**k) * (1 - b))
    return series, geometric


# ---------------------------------------------------------------------------
# Exact per-position marginals (series-based forward DP)
# ---------------------------------------------------------------------------


@dataclass
class MarginalSeries:
    """Exact per-position trace statistics for a finite input.

    p_one[j]    = P[|trace| > j and trace[j] = 1]
    p_exists[j] = P[|trace| > j]
    tail_mass   = P[|trace| > j_max]
    signed_padded[j] = E[2*trace[j] - 1] when the input is extended by an
    infinite uniform suffix (positions drawn from the suffix or inserted are
    uniform, so this equals 2*p_one - p_exists).
    """

    p_one: np.ndarray
    p_exists: np.ndarray
    j_max: int
    convention: str

    @property
    def tail_mass(self) -> float:
        return float(self.p_exists[self.j_max])

    @property
    def signed_padded(self) -> np.ndarray:
        return 2 * self.p_one - self.p_exists

    @property
    def p_one_given_exists(self) -> np.ndarray:
        with np.errstate(divide="ignore", invalid="ignore"):
            return np.where(self.p_exists > 0, self.p_one / self.p_exists, np.nan)


def exact_marginals(
    x: BitString, params: ChannelParams, convention: str, j_max: int
) -> MarginalSeries:
    """Exact P[trace position j exists / equals 1] for j <= j_max.

    Forward DP over (input bit processed, output position) using the
    two-stage construction with the given insertion convention; the burst
    survivor pmf is summed as a series (truncation SERIES_EPS).
    """
    if convention not in ("before", "after"):
        raise ValueError(f"unknown convention {convention!r}")
    if j_max < 0:
        raise ValueError("j_max must be nonnegative")
    n = len(x)
    J = j_max + 1
    p, q = params.p_keep, params.q_del
    pmf = _gap_survivor_pmf(params, J)
    pi = pmf[:J]
    # tailvec[t] = P[burst emits more than t survivors]: offset t into a burst
    # is occupied by an inserted bit exactly when the burst is still running.
    # The full pmf sums to 1 up to the series floor, so complement against 1.
    tailvec = np.maximum(0.0, 1.0 - np.cumsum(pmf))[:J]
    one_w = np.zeros(J)
    exist_copy = np.zeros(J)
    ins_w = np.zeros(J)
    v = np.zeros(J)
    v[0] = 1.0
    xb = x.bits
    for k in range(n):
        if convention == "before":
            ins_w += _conv_trunc(v, tailvec, J)
            g = _conv_trunc(v, pi, J)
            exist_copy += p * g
            if xb[k]:
                one_w += p * g
            nxt = q * g
            nxt[1:] += p * g[:-1]
            v = nxt
        else:
            exist_copy += p * v
            if xb[k]:
                one_w += p * v
            w = q * v
            w[1:] += p * v[:-1]
            ins_w += _conv_trunc(w, tailvec, J)
            v = _conv_trunc(w, pi, J)
    p_exists = exist_copy + ins_w
    p_one = one_w + 0.5 * ins_w
    return MarginalSeries(p_one, p_exists, j_max, convention)


def _conv_trunc(a: np.ndarray, b: np.ndarray, length: int) -> np.ndarray:
    out = np.convolve(a, b)[:length]
    if out.size < length:
        out = np.pad(out, (0, length - out.size))
    return out


# ---------------------------------------------------------------------------
# Trace likelihood (step-machine DP, scaled linear space)
# ---------------------------------------------------------------------------


def trace_log_likelihood(x: BitString, params: ChannelParams, y: BitString) -> float:
    """log P[trace = y | input = x] under the channel; -inf for impossible y."""
    out = _loglik_matrix(x.bits[None, :], params, y)
    return float(out[0])


def _loglik_matrix(xs: np.ndarray, params: ChannelParams, y: BitString) -> np.ndarray:
    """Row-wise log P[trace = y | input = row of xs]; xs is (C, n) uint8.

    Forward DP over (input consumed, output matched) with per-row max scaling
    so traces of length ~1e3 do not underflow. The within-row insertion
    recursion L[j] = base[j] + (b/2) L[j-1] is solved with an IIR filter.
    """
    a = params.step_delete
    b2 = params.step_insert / 2.0
    c = params.step_copy
    C, n = xs.shape
    m = len(y)
    yb = y.bits
    L = np.zeros((C, m + 1))
    L[:, 0] = 1.0
    if m and n > 0:
        # insertions are only available while input bits remain unconsumed
        L[:, 1:] = np.cumprod(np.full((C, m), b2), axis=1)
    logscale = np.zeros(C)
    for k in range(1, n + 1):
        match = (xs[:, k - 1 : k] == yb[None, :]).astype(float)
        base = a * L
        base[:, 1:] += c * match * L[:, :-1]
        if b2 > 0 and k < n:
            L = lfilter([1.0], [1.0, -b2], base, axis=1)
        else:
            L = base
        rowmax = L.max(axis=1)
        safe = rowmax > 0
        L[safe] /= rowmax[safe, None]
        with np.errstate(divide="ignore"):
            logscale += np.where(safe, np.log(np.where(safe, rowmax, 1.0)), -np.inf)
    with np.errstate(divide="ignore"):
        return np.log(L[:, m]) + logscale


# ---------------------------------------------------------------------------
# Exact trace distributions for tiny inputs
# ---------------------------------------------------------------------------

_DIST_MAX_N = 8
_DIST_MAX_CAP = 16


def exact_trace_distribution(
    x: BitString,
    params: ChannelParams,
    length_cap: int,
    construction: str = "step",
) -> tuple[dict[str, float], float]:
    """Exact {trace text: probability} over traces of length <= length_cap.

    construction selects the sampler whose law is computed: "step" for the
    per-step inductive process, "geometric_before"/"geometric_after" for the
    two-stage process. Returns the map and the tail mass (total probability
    of traces longer than the cap). Guarded to n <= 8, cap <= 16.
    """
    n = len(x)
    if n > _DIST_MAX_N or length_cap > _DIST_MAX_CAP:
        raise ValueError(
            f"exact distribution guarded to n <= {_DIST_MAX_N}, cap <= {_DIST_MAX_CAP}"
        )
    if length_cap < 0:
        raise ValueError("length_cap must be nonnegative")
    if construction == "step":
        v0, M0, M1, term = _step_automaton(x, params)
    elif construction in ("geometric_before", "geometric_after"):
        v0, M0, M1, term = _geometric_automaton(
            x, params, length_cap, construction.removeprefix("geometric_")
        )
    else:
        raise ValueError(f"unknown construction {construction!r}")

    probs: dict[str, float] = {}
    total = 0.0
    V = v0[None, :]
    p0 = float((V @ term)[0])
    if p0 > 0:
        probs[""] = p0
    total += p0
    for depth in range(1, length_cap + 1):
        nodes = V.shape[0]
        nxt = np.empty((2 * nodes, V.shape[1]))
        nxt[0::2] = _apply(V, M0)
        nxt[1::2] = _apply(V, M1)
        V = nxt
        pe = V @ term
        total += float(pe.sum())
        for idx in np.flatnonzero(pe > 0):
            probs[format(idx, f"0{depth}b")] = float(pe[idx])
    return probs, max(0.0, 1.0 - total)


def _apply(V: np.ndarray, M) -> np.ndarray:
    if sparse.issparse(M):
        return np.asarray(M.T.dot(V.T).T)
    return V @ M


def _step_automaton(x: BitString, params: ChannelParams):
    """Emission automaton of the per-step process; state = input bits consumed."""
    a, b, c = params.step_delete, params.step_insert, params.step_copy
    n = len(x)
    xb = x.bits
    M0 = np.zeros((n + 1, n + 1))
    M1 = np.zeros((n + 1, n + 1))
    term = np.zeros(n + 1)
    for k in range(n + 1):
        term[k] = a ** (n - k)
        w = 1.0
        for kk in range(k, n):
            M0[k, kk] += w * b / 2
            M1[k, kk] += w * b / 2
            (M1 if xb[kk] else M0)[k, kk + 1] += w * c
            w *= a
            if w == 0.0:
                break
    v0 = np.zeros(n + 1)
    v0[0] = 1.0
    return v0, M0, M1, term


def _geometric_automaton(x: BitString, params: ChannelParams, cap: int, convention: str):
    """Emission automaton of the two-stage process.

    States: ("ins", k, r) = r surviving burst bits of gap k still to emit;
    ("bit", k) = input bit k survived and is the next emission. Bursts of
    rcap = cap+1 or more survivors cannot finish within a cap-length horizon,
    so they are merged into the single state ("ins", k, rcap), which emits
    uniform bits and stays put; within the horizon this is exact, and it can
    never reach the terminal column, matching the truncated-map semantics.
    Silent hops (deleted bits, empty bursts) are folded into the transitions,
    depositing exact-termination mass in a virtual terminal column.
    """
    n = len(x)
    p, q = params.p_keep, params.q_del
    rcap = cap + 1
    pi = _gap_survivor_pmf(params, rcap).copy()
    pi[rcap] = max(0.0, 1.0 - pi[:rcap].sum())  # merged burst-tail mass
    states: list[tuple] = []
    index: dict[tuple, int] = {}
    for k in range(n):
        for r in range(1, rcap + 1):
            index[("ins", k, r)] = len(states)
            states.append(("ins", k, r))
        index[("bit", k)] = len(states)
        states.append(("bit", k))
    S = len(states)
    TERM = S

    from functools import lru_cache

    @lru_cache(maxsize=None)
    def enter_gap(k: int) -> tuple:
        """Distribution over states (plus TERM) entering gap k (before conv)."""
        if k == n:
            return ((TERM, 1.0),)
        out = [(index[("ins", k, r)], float(pi[r])) for r in range(1, rcap + 1)]
        out.append((index[("bit", k)], float(pi[0] * p)))
        for dst, w in enter_gap(k + 1):
            out.append((dst, float(pi[0] * q * w)))
        return tuple(out)

    @lru_cache(maxsize=None)
    def enter_bit(k: int) -> tuple:
        """Distribution over states entering bit k (after convention)."""
        if k == n:
            return ((TERM, 1.0),)
        out = [(index[("bit", k)], p)]
        for dst, w in gap_then_next(k):
            out.append((dst, float(q * w)))
        return tuple(out)

    @lru_cache(maxsize=None)
    def gap_then_next(k: int) -> tuple:
        out = [(index[("ins", k, r)], float(pi[r])) for r in range(1, rcap + 1)]
        for dst, w in enter_bit(k + 1):
            out.append((dst, float(pi[0] * w)))
        return tuple(out)

    rows0, cols0, w0 = [], [], []
    rows1, cols1, w1 = [], [], []

    def add(mat_rows, mat_cols, mat_w, src, dist, scale):
        for dst, w in dist:
            mat_rows.append(src)
            mat_cols.append(dst)
            mat_w.append(w * scale)

    for st in states:
        src = index[st]
        if st[0] == "ins":
            _, k, r = st
            if r == rcap:
                succ = ((index[("ins", k, rcap)], 1.0),)
            elif r > 1:
                succ = ((index[("ins", k, r - 1)], 1.0),)
            else:
                if convention == "before":
                    succ = tuple(
                        [(index[("bit", k)], p)]
                        + [(d, q * w) for d, w in enter_gap(k + 1)]
                    )
                else:
                    succ = enter_bit(k + 1)
            add(rows0, cols0, w0, src, succ, 0.5)
            add(rows1, cols1, w1, src, succ, 0.5)
        else:
            _, k = st
            succ = enter_gap(k + 1) if convention == "before" else gap_then_next(k)
            if x.bits[k]:
                add(rows1, cols1, w1, src, succ, 1.0)
            else:
                add(rows0, cols0, w0, src, succ, 1.0)

    M0 = sparse.csr_matrix((w0, (rows0, cols0)), shape=(S, S + 1))
    M1 = sparse.csr_matrix((w1, (rows1, cols1)), shape=(S, S + 1))
    v0 = np.zeros(S + 1)
    start = enter_gap(0) if convention == "before" else enter_bit(0)
    for dst, w in start:
        v0[dst] += w
    term = np.zeros(S + 1)
    term[TERM] = 1.0
    # emitted vectors live in S+1 dims; transitions out of TERM are absent, so
    # the terminal column only ever holds mass deposited by the last emission
    M0 = sparse.vstack([M0, sparse.csr_matrix((1, S + 1))]).tocsr()
    M1 = sparse.vstack([M1, sparse.csr_matrix((1, S + 1))]).tocsr()
    return v0, M0, M1, term


def enumerated_marginals(
    x: BitString, params: ChannelParams, j_max: int, construction: str = "step"
) -> MarginalSeries:
    """Per-position marginals by exhaustive prefix enumeration, aggregated.

    Sums P[first j+1 emissions = y'] over all prefixes y' by pushing the
    total alive mass through the emission automaton (the sum over prefixes is
    linear, so the exponential tree collapses to j_max matrix applications).
    Exact: unlike truncating `exact_trace_distribution`, no tail is lost.
    Serves as the independent oracle for `exact_marginals`.
    """
    n = len(x)
    if n > _DIST_MAX_N:
        raise ValueError(f"enumeration guarded to n <= {_DIST_MAX_N}")
    if construction == "step":
        v0, M0, M1, _ = _step_automaton(x, params)
    elif construction in ("geometric_before", "geometric_after"):
        v0, M0, M1, _ = _geometric_automaton(
            x, params, j_max + 1, construction.removeprefix("geometric_")
        )
    else:
        raise ValueError(f"unknown construction {construction!r}")
    p_one = np.zeros(j_max + 1)
    p_exists = np.zeros(j_max + 1)
    W = v0[None, :]
    for j in range(j_max + 1):
        ones = _apply(W, M1)
        zeros = _apply(W, M0)
        p_one[j] = ones.sum()
        W = ones + zeros
        p_exists[j] = W.sum()
    conv = "before" if construction != "geometric_after" else "after"
    return MarginalSeries(p_one, p_exists, j_max, conv)


def total_variation(dist_a, dist_b) -> float:
    """0.5 * L1 distance between two (map, tail) exact distributions."""
    map_a, tail_a = dist_a
    map_b, tail_b = dist_b
    keys = set(map_a) | set(map_b)
    l1 = sum(abs(map_a.get(k, 0.0) - map_b.get(k, 0.0)) for k in keys)
    return 0.5 * (l1 + abs(tail_a - tail_b))
