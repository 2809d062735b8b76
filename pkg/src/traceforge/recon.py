"""Bit-by-bit reconstruction from aligned trace statistics.

Each round assumes the prefix x(0:k) is known and decides the next bit by a
two-hypothesis Monte Carlo test: align every trace (two-stage), average the
trace bits at offsets j from the shifted pointer tau2 + s into the empirical
statistics Y_j, then simulate a budget of fresh traces under each hypothesis
prefix+b+uniform-suffix through the identical align-and-collect pipeline and
pick the hypothesis whose expected statistics are closest to Y in the sup
norm. The hypothesis pair shares channel randomness and suffixes (common
random numbers), which cancels most of the Monte Carlo noise in the margin.

Early bits, where no alignment window fits behind k, are decided the same way
with unshifted statistics (pointer fixed at trace position 0), mirroring the
small-k regime where the first stretch of the input is read off the start of
the traces directly.

Failed alignments are dropped from the statistics (per-offset renormalization
over the traces whose shifted window covers the offset). Abstentions, when
both hypotheses are indistinguishable, are recorded and resolved by a seeded
coin flip in evaluation summaries, never silently.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

from .align import AlignConfig, align_batch, choose_kstar, default_align_config
from .bits import BitString, Seed
from .channel import ChannelParams, TraceBatch, apply_structure, sample_structure

FAILED = -1


@dataclass
class ReconConfig:
    """Reconstruction loop constants on top of the alignment ledger."""

    align: AlignConfig
    j_max: int  # offsets 0..j_max enter the statistics
    mc_budget: int  # hypothesis simulations per candidate bit
    margin_floor: float  # below this sup-norm margin the round abstains
    bootstrap_bits: int  # bits decided from unshifted statistics
    j_halfwidth: int  # hypothesis comparison window around the expected offset
    min_signal: float  # smallest usable candidate-bit weight
    frontier_len: int  # exact-match anchor length (0 disables the stage)
    frontier_radius: int  # half-width of the anchor search window
    frontier_cap: int = 18  # anchor extension limit for self-similar prefixes
    lookahead_cap: int = 12  # most nuisance bits fitted jointly
    multi_bit: bool = False  # one bit per round (multi-bit advance unused)

    @property
    def shift_s(self) -> int:
        return self.align.shift_s


def default_recon_config(n: int, params: ChannelParams, mc_budget: int = 128) -> ReconConfig:
    align = default_align_config(n, params)
    boot = align.kstar_band[0] + align.min_fine_len + align.shift_s + 2
    # anchor length balancing intact-retention odds against random matches
    keep = params.p_keep * (1 - params.step_insert)
    m3 = int(np.clip(round(math.log(0.12) / math.log(max(keep, 0.3))), 6, 12))
    return ReconConfig(
        align=align,
        j_max=int(math.ceil((align.kstar_band[1] + 16) * params.length_ratio)),
        mc_budget=mc_budget,
        margin_floor=0.0,
        bootstrap_bits=boot,
        j_halfwidth=align.disc_tol + 6,
        # the hypothesis pair shares channel randomness, so separation
        # estimates are much tighter than independent binomials
        min_signal=1.0 / math.sqrt(mc_budget),
        frontier_len=m3,
        frontier_radius=align.disc_tol + 10,
    )


def drift_std(params: ChannelParams, distance: int) -> float:
    """Standard deviation of a trace position at the given input distance.

    One consumed input bit advances the output by keep + burst survivors;
    the variance per bit is Var(Bernoulli(p_keep)) + Var(Geom(1-b) - 1).
    """
    b = params.step_insert
    var = params.p_keep * params.q_del + (b / (1 - b) ** 2 if b > 0 else 0.0)
    return math.sqrt(max(var * max(distance, 0), 0.0))


@dataclass
class BitStatistics:
    """Per-offset empirical statistics over finitely aligned traces.

    y is the frequency of ones at each offset from the shifted pointer. The
    pair contrast is the frequency of a (0,1) bigram minus a (1,0) bigram at
    consecutive offsets; the channel never reorders bits, so this contrast
    survives alignment jitter and distinguishes locally transposed inputs
    that per-position frequencies cannot.
    """

    y: np.ndarray  # (J,) frequency of ones, nan where no trace contributes
    counts: np.ndarray  # (J,) contributing trace count per offset
    n_aligned: int
    pair_contrast: np.ndarray | None = None  # (J-1,) P[01 at j,j+1] - P[10]
    pair_counts: np.ndarray | None = None

    @property
    def empty(self) -> bool:
        return self.n_aligned == 0


def collect_statistics(
    batch: TraceBatch, pointers: np.ndarray, shift: int, j_max: int
) -> BitStatistics:
    """Average trace bits at offsets j from pointer+shift, per offset.

    pointers holds tau2 per trace with FAILED = -1; failed traces are dropped.
    Offsets reaching past a trace's end are skipped and the mean renormalized
    over the remaining traces.
    """
    pointers = np.asarray(pointers)
    finite = pointers >= 0
    n1 = int(finite.sum())
    J = j_max + 1
    if n1 == 0:
        return BitStatistics(np.full(J, np.nan), np.zeros(J, dtype=np.int64), 0)
    pos = pointers[finite][:, None] + shift + np.arange(J)[None, :]
    lens = batch.lengths[finite][:, None]
    valid = (pos >= 0) & (pos < lens)
    rows = np.flatnonzero(finite)[:, None]
    vals = batch.bits[rows, np.clip(pos, 0, batch.bits.shape[1] - 1)]
    counts = valid.sum(axis=0)
    ones = np.where(valid, vals, 0).sum(axis=0)
    with np.errstate(invalid="ignore"):
        y = np.where(counts > 0, ones / np.maximum(counts, 1), np.nan)
    both = valid[:, :-1] & valid[:, 1:]
    v = vals.astype(np.int8)
    p01 = np.where(both, (1 - v[:, :-1]) * v[:, 1:], 0).sum(axis=0)
    p10 = np.where(both, v[:, :-1] * (1 - v[:, 1:]), 0).sum(axis=0)
    pc = both.sum(axis=0)
    with np.errstate(invalid="ignore"):
        contrast = np.where(pc > 0, (p01 - p10) / np.maximum(pc, 1), np.nan)
    return BitStatistics(
        y, counts.astype(np.int64), n1, contrast, pc.astype(np.int64)
    )


@dataclass
class PredictOutcome:
    bit: int
    margin: float
    abstained: bool
    distances: tuple[float, float]


def _frontier_anchor_len(prefix_bits: np.ndarray, base_len: int, radius: int, cap: int) -> int:
    """Exact-tail length, extended while the frontier motif recurs nearby.

    A motif that reappears within the search radius would make exact matches
    read known prefix bits instead of the frontier; extending the anchor
    restores uniqueness when the prefix allows it.
    """
    k = prefix_bits.size
    m = min(base_len, k)
    while m < min(cap, k):
        motif = prefix_bits[k - m :]
        zone = prefix_bits[max(0, k - m - radius - 2) : k - 1]
        if zone.size < m:
            break
        windows = np.lib.stride_tricks.sliding_window_view(zone, m)
        if not (windows == motif).all(axis=1).any():
            break
        m += 1
    return m


def _frontier_config(window: int, exact_tail: int) -> "object":
    """Unit-block anchor test: loose vote over the window, exact right tail."""
    from .blocktest import TestConfig

    return TestConfig(
        window_len=window,
        block_len=1,
        c1=0.4,
        theta=1.0,
        shrink=window / exact_tail,
        c1_tail=1 - 1e-9,
    )


def _frontier_match(
    prefix_bits: np.ndarray,
    batch: TraceBatch,
    base_ptr: np.ndarray,
    expected_off: int,
    radius: int,
    exact_tail: int,
    context: int = 8,
) -> np.ndarray:
    """Per-trace anchor on the trailing prefix content.

    Scans trace windows whose right endpoints lie within +-radius of
    base_ptr + expected_off for the frontier motif: the last `exact_tail`
    prefix bits must match exactly (unit blocks at a near-one tail threshold,
    so alignment jitter cannot smear the anchor) and a loose majority of the
    `context` bits before them must agree, which suppresses random matches.
    Traces with no match, several matches (ambiguous), or a failed base
    pointer return FAILED.
    """
    from .blocktest import build_input_window, scan_tests

    k = prefix_bits.size
    window = min(exact_tail + context, k)
    if window < exact_tail or exact_tail < 2:
        return np.full(batch.count, FAILED, dtype=np.int64)
    cfg = _frontier_config(window, exact_tail)
    win = build_input_window(prefix_bits, k - 1, cfg)
    offs = np.arange(-radius, radius + 1)
    pos = base_ptr[:, None] + expected_off + offs[None, :]
    sums = batch.signed_prefix_sums()
    hits = scan_tests(win, sums, batch.lengths, np.maximum(pos, 0))
    hits &= (pos >= window - 1) & (base_ptr[:, None] >= 0)
    n_hits = hits.sum(axis=1)
    # an ambiguous trace (several matches in the window) is dropped rather
    # than read at the wrong spot
    unique = n_hits == 1
    firsts = hits.argmax(axis=1)
    out = np.where(unique, pos[np.arange(batch.count), firsts], FAILED)
    return out.astype(np.int64)


def predict_next_bit(
    prefix: BitString,
    stats: BitStatistics,
    kstar: int | None,
    params: ChannelParams,
    cfg: ReconConfig,
    mc_budget: int,
    seed: Seed,
    j_window: tuple[int, int] | None = None,
    align_cfg: AlignConfig | None = None,
    lookahead: int | None = None,
    pointer_fn=None,
) -> PredictOutcome:
    """Decide the next bit by nearest expected statistics in sup norm.

    mc_budget copies of prefix + candidate-window + uniform padding are sent
    through the identical pointer-and-collect pipeline (pointer_fn, default:
    two-stage alignment at kstar, or unshifted pointers when kstar is None).
    The candidate window holds the next bit plus `lookahead` not yet
    reconstructed neighbors, whose imprint on the real statistics is as
    strong as the candidate's and would otherwise masquerade as its signal.

    A first pass with the window zeroed extracts per-bit weights (given the
    pointers, the collected statistic is linear in input bit values) and fits
    the neighbors by ridge least squares. Each candidate value of the next
    bit is then re-applied to the same channel randomness together with the
    fitted neighbors, re-pointed, and re-collected, so content-sensitive
    pointer behavior is reproduced rather than linearized. The returned bit
    minimizes the sup-norm distance between the observed statistics and its
    re-collected expectation over the offsets where the candidate leaves an
    imprint.
    """
    if stats.empty:
        return PredictOutcome(0, 0.0, True, (math.inf, math.inf))
    if mc_budget < 1:
        raise ValueError("mc_budget must be >= 1")
    acfg = cfg.align if align_cfg is None else align_cfg
    next_idx = len(prefix)
    pad = acfg.sim_suffix_pad
    look = cfg.lookahead_cap if lookahead is None else min(lookahead, cfg.lookahead_cap)
    nvar = 1 + look
    rng = seed.generator()
    structure = sample_structure(next_idx + nvar + pad, mc_budget, params, rng)
    suffix = rng.integers(0, 2, size=(mc_budget, pad), dtype=np.uint8)
    x = np.concatenate(
        [
            np.broadcast_to(prefix.bits, (mc_budget, next_idx)),
            np.zeros((mc_budget, nvar), dtype=np.uint8),
            suffix,
        ],
        axis=1,
    )

    if pointer_fn is None:
        if kstar is None:

            def pointer_fn(batch):
                return np.zeros(batch.count, dtype=np.int64), 0

        else:
            kst = kstar

            def pointer_fn(batch):
                _, tau2 = align_batch(prefix.bits, batch, next_idx - 1, kst, acfg)
                return tau2, acfg.shift_s

    hbatch = apply_structure(structure, x)
    pointers, shift = pointer_fn(hbatch)
    finite = pointers >= 0
    if not finite.any():
        return PredictOutcome(0, 0.0, True, (math.inf, math.inf))
    J = cfg.j_max + 1
    pos = pointers[finite][:, None] + shift + np.arange(J)[None, :]
    lens = hbatch.lengths[finite][:, None]
    cell_ok = (pos >= 0) & (pos < lens)
    pos_c = np.clip(pos, 0, hbatch.bits.shape[1] - 1)
    rows = np.flatnonzero(finite)[:, None]
    src = hbatch.source[rows, pos_c]
    vals = hbatch.bits[rows, pos_c]
    var_cell = cell_ok & (src >= next_idx) & (src < next_idx + nvar)
    c_sim = cell_ok.sum(axis=0).astype(float)
    fixed_ones = np.where(cell_ok & ~var_cell, vals, 0).sum(axis=0).astype(float)
    ti = (src[var_cell] - next_idx).astype(np.int64)
    jcols = np.nonzero(var_cell)[1]
    weights = np.zeros((J, nvar))
    np.add.at(weights, (jcols, ti), 1.0)

    j_lo, j_hi = (0, cfg.j_max) if j_window is None else j_window
    j_lo, j_hi = max(0, j_lo), min(cfg.j_max, j_hi)
    window = np.zeros(J, dtype=bool)
    window[j_lo : j_hi + 1] = True
    valid = window & (stats.counts > 0) & (c_sim > 0)
    if not valid.any():
        return PredictOutcome(0, 0.0, True, (math.inf, math.inf))
    sepcol = weights[:, 0] / np.maximum(c_sim, 1)
    if float(np.abs(np.where(valid, sepcol, 0.0)).max()) < cfg.min_signal:
        return PredictOutcome(0, 0.0, True, (math.inf, math.inf))

    A = weights[valid] / np.maximum(c_sim[valid], 1)[:, None]
    r = stats.y[valid] - fixed_ones[valid] / np.maximum(c_sim[valid], 1)
    # ridge-regularized least squares for the candidate and nuisance bits
    lam = 0.5 / mc_budget + 1e-6
    gram = A.T @ A + lam * np.eye(nvar)
    u = np.linalg.solve(gram, A.T @ r)
    u = np.clip(u, 0.0, 1.0)
    u_round = np.round(u[1:]).astype(np.uint8)
    # the sup norm is taken where the candidate actually leaves an imprint;
    # elsewhere the residual is nuisance-bit and sampling noise shared by both
    col0 = np.zeros(J)
    col0[valid] = A[:, 0]
    informative = valid & (col0 >= max(0.3 * float(col0.max()), 0.5 * cfg.min_signal))
    if not informative.any():
        return PredictOutcome(0, 0.0, True, (math.inf, math.inf))

    dists = []
    for b in (0, 1):
        xb = x.copy()
        xb[:, next_idx] = b
        xb[:, next_idx + 1 : next_idx + nvar] = u_round[None, :]
        cbatch = apply_structure(structure, xb)
        cptr, cshift = pointer_fn(cbatch)
        ystat = collect_statistics(cbatch, cptr, cshift, cfg.j_max)
        use = informative & (ystat.counts > 0)
        if not use.any():
            dists.append(math.inf)
            continue
        dists.append(float(np.abs(stats.y[use] - ystat.y[use]).max()))
    margin = abs(dists[0] - dists[1])
    if not math.isfinite(margin):
        return PredictOutcome(0, 0.0, True, tuple(dists))
    if margin <= cfg.margin_floor:
        return PredictOutcome(0, margin, True, tuple(dists))
    bit = 0 if dists[0] < dists[1] else 1
    return PredictOutcome(bit, margin, False, tuple(dists))


@dataclass
class ReconState:
    """Reconstruction diagnostics: margins, abstentions, failed positions."""

    recovered: BitString
    margins: np.ndarray
    abstained: list[int] = field(default_factory=list)
    coin_flips: list[int] = field(default_factory=list)

    @property
    def abstention_count(self) -> int:
        return len(self.abstained)


def reconstruct(
    n: int,
    params: ChannelParams,
    N: int,
    cfg: ReconConfig,
    seed: Seed,
    oracle_input: BitString | None = None,
    traces: list | None = None,
) -> tuple[BitString, ReconState]:
    """Run the bit-by-bit loop over N traces.

    In evaluation mode (oracle_input given) the traces are simulated here; the
    loop itself only ever reads the recovered prefix, never the oracle input.
    Alternatively pre-recorded traces may be supplied. Abstentions are
    resolved by a seeded coin flip and recorded.
    """
    if N < 1:
        raise ValueError("need at least one trace")
    if (oracle_input is None) == (traces is None):
        raise ValueError("supply exactly one of oracle_input or traces")
    if oracle_input is not None:
        if len(oracle_input) < n:
            raise ValueError("oracle input shorter than n")
        from .channel import transmit_batch

        batch = transmit_batch(oracle_input, params, seed.derive(0), N)
    else:
        batch = TraceBatch.from_traces(traces)
        N = batch.count
    coin_rng = seed.derive(3).generator()
    recovered = np.zeros(n, dtype=np.uint8)
    margins = np.zeros(n)
    abstained: list[int] = []
    flips: list[int] = []
    scale = params.length_ratio
    for k_next in range(n):
        prefix = BitString(recovered[:k_next])
        pointer_fn, kstar, cfg_k, center, width, look, stats_ptr, stats_shift = _round_plan(
            prefix.bits, k_next, params, cfg, batch
        )
        stats = collect_statistics(batch, stats_ptr, stats_shift, cfg.j_max)
        j_window = (center - width, center + width)
        outcome = predict_next_bit(
            prefix,
            stats,
            kstar,
            params,
            cfg,
            cfg.mc_budget,
            seed.derive(1, k_next),
            j_window,
            align_cfg=cfg_k,
            lookahead=look,
            pointer_fn=pointer_fn,
        )
        margins[k_next] = outcome.margin
        if outcome.abstained:
            abstained.append(k_next)
            bit = int(coin_rng.integers(0, 2))
            flips.append(k_next)
        else:
            bit = outcome.bit
        recovered[k_next] = bit
    return BitString(recovered), ReconState(BitString(recovered), margins, abstained, flips)


def _round_plan(
    prefix_bits: np.ndarray,
    k_next: int,
    params: ChannelParams,
    cfg: ReconConfig,
    batch: TraceBatch,
):
    """Pointer pipeline and comparison window for one reconstruction round.

    Regimes: plain unshifted pointers for the first handful of bits;
    identity rough pointer plus frontier anchoring while no alignment window
    fits; two-stage alignment plus frontier anchoring beyond. The frontier
    anchor (exact match of the trailing prefix motif) pins each trace to the
    reconstruction frontier, so the comparison window is a short stretch just
    past the anchor.

    Anchor health is probed on the real batch: if too few traces anchor
    uniquely (motif damaged by channel noise, recurring content, or an
    earlier wrong commit) the anchor is retried longer and then dropped for
    this round in favor of the position-statistic pipeline, which lets the
    loop heal once the offending bits leave the motif.

    Returns (pointer_fn, kstar, align_cfg, center, width, lookahead,
    real_pointers, shift).
    """
    scale = params.length_ratio
    k = k_next - 1
    cfg_k = cfg.align

    # anchor base: while accumulated drift keeps the frontier inside a
    # moderate search radius, the identity estimate is the best base; beyond
    # that, the rough scan, once a window of useful length fits. The fine
    # stage is never in the anchor chain (its per-trace attrition would
    # multiply with the anchor's).
    var_step = drift_std(params, 1) ** 2
    ident_limit = int(((R_CAP_IDENT - 5) / 3) ** 2 / max(var_step, 1e-9))
    l_eff = k - cfg.align.back_offset + 1
    use_rough = l_eff >= max(160, cfg.align.min_rough_len) and k > ident_limit
    cache: dict[tuple, np.ndarray] = {}

    def rough_base(b: TraceBatch) -> tuple[np.ndarray, int, int]:
        """(base pointers, expected frontier offset from base, radius)."""
        if not use_rough:
            base = np.zeros(b.count, dtype=np.int64)
            rad = min(int(math.ceil(3 * drift_std(params, k))) + 5, R_CAP_IDENT)
            return base, int(round(k * scale)), rad
        key = ("rough", id(b))
        if key not in cache:
            if len(cache) > 6:
                cache.clear()
            from .align import _rough_batch

            cache[key] = _rough_batch(prefix_bits, b, k, cfg_k)
        exp = int(round(cfg.align.back_offset * scale))
        return cache[key], exp, cfg.frontier_radius

    if cfg.frontier_len and k_next >= 5:
        # for short prefixes the exact tail is the whole known prefix
        base_len = min(cfg.frontier_len, k_next - 1)
        e_base = _frontier_anchor_len(
            prefix_bits, base_len, cfg.frontier_radius, cfg.frontier_cap
        )
        min_anchored = max(5, batch.count // 16)
        for e_tail in (e_base, min(e_base + 4, cfg.frontier_cap)):
            if e_tail > k_next - 1:
                continue

            def fn_frontier(b: TraceBatch, e_tail=e_tail):
                base, exp, rad = rough_base(b)
                t3 = _frontier_match(prefix_bits, b, base, exp, rad, e_tail)
                return t3, 1

            real_ptr, _ = fn_frontier(batch)
            if int((real_ptr >= 0).sum()) >= min_anchored:
                look = min(cfg.lookahead_cap, 8)
                center = max(0, int(round(scale)) - 1)
                width = 4 + int(round(2 * scale))
                return fn_frontier, None, cfg_k, center, width, look, real_ptr, 1

    # fallback: the spec's two-stage alignment when a fine window fits,
    # plain unshifted statistics otherwise
    kstar = None
    if k_next >= cfg.bootstrap_bits:
        fine_k = cfg.align.fine_for_k(k)
        if fine_k is not None:
            if fine_k is not cfg.align.fine:
                cfg_k = replace(cfg.align, fine=fine_k)
            kstar = choose_kstar(BitString(prefix_bits), k, cfg_k)

    if kstar is None:
        width = int(math.ceil(3 * drift_std(params, k_next))) + 3

        def fn_plain(b: TraceBatch):
            return np.zeros(b.count, dtype=np.int64), 0

        return (
            fn_plain,
            None,
            cfg_k,
            int(round(k_next * scale)),
            width,
            min(cfg.lookahead_cap, width + 2),
            np.zeros(batch.count, dtype=np.int64),
            0,
        )

    kst = kstar

    def fn_two_stage(b: TraceBatch):
        key = ("tau2", id(b))
        if key not in cache:
            if len(cache) > 6:
                cache.clear()
            cache[key] = align_batch(prefix_bits, b, k, kst, cfg_k)[1]
        return cache[key], cfg_k.shift_s

    return (
        fn_two_stage,
        kstar,
        cfg_k,
        int(round((k_next - kstar - cfg_k.shift_s) * scale)),
        cfg.j_halfwidth,
        min(cfg.lookahead_cap, 2 * cfg_k.disc_tol),
        fn_two_stage(batch)[0],
        cfg_k.shift_s,
    )


def majority_baseline(batch: TraceBatch | list, params: ChannelParams, n: int) -> BitString:
    """Estimate bit k by majority over traces at position round(k * p/p').

    Positions are clamped to each trace's last index; ties round up to 1.
    """
    if not isinstance(batch, TraceBatch):
        batch = TraceBatch.from_traces(batch)
    if batch.count < 1:
        raise ValueError("need at least one trace")
    scale = params.length_ratio
    cols = np.round(np.arange(n) * scale).astype(np.int64)
    lens = np.maximum(batch.lengths, 1)
    out = np.zeros(n, dtype=np.uint8)
    pos = np.minimum(cols[None, :], (lens - 1)[:, None])
    vals = batch.bits[np.arange(batch.count)[:, None], pos]
    nonempty = (batch.lengths > 0)[:, None]
    ones = np.where(nonempty, vals, 0).sum(axis=0)
    total = np.broadcast_to(nonempty, vals.shape).sum(axis=0)
    out = (2 * ones >= total).astype(np.uint8)
    return BitString(out)
