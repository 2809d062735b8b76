"""Two-stage trace alignment and its empirical quality machinery.

Alignment of one trace against a known prefix x(0:k) runs in two stages.
First a rough pointer: slide a long window (length ~ log^{5/3} n) anchored at
rho = k - back_offset across the trace from left to right and let tau1 be the
first endpoint where the block-sign test fires. Then a fine pointer: pick a
good position k* behind k whose short window (length ~ log^{1/3} n) looks
unlike every nearby window, and let tau2 be the first endpoint in a band
relative to tau1 where the fine test fires. tau2 estimates f(k*), the trace
position of the first surviving bit at or after k*.

The paper-faithful constants (C_back = 5 C_BIG and friends) are astronomically
conservative at any feasible n, so configurations here are calibrated
empirically; `paper_constants` prints the faithful ledger for reference and
`calibrate` grid-searches window lengths and thresholds against measured
true/false-positive rates.

Both scans are streaming stopping rules: the decision at trace position k'
reads only trace(0:k'), which the suffix-mutation tests exercise.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

from .bits import BitString, Seed
from .blocktest import (
    InputWindow,
    TestConfig,
    build_input_window,
    first_positive,
    scan_tests,
)
from .channel import AlignedTrace, ChannelParams, TraceBatch, sample_structure, apply_structure

FAILED = -1


@dataclass(frozen=True)
class AlignConfig:
    """Full constant ledger for the two-stage alignment."""

    rough: TestConfig
    fine: TestConfig
    back_offset: int  # k - rho, distance from k to the rough anchor
    kstar_band: tuple[int, int]  # k* searched in [k - band[1], k - band[0]]
    fine_window: tuple[int, int]  # tau2 searched in [tau1 + lo, tau1 + hi]
    scan_floor: int  # rough scan starts here (paper: 2 * rough window)
    scan_cap: int  # rough scan never passes this trace position
    scan_slack: float  # dynamic cap at scale*rho + slack*sqrt(rho); <= 0 disables
    shift_s: int  # post-alignment shift for bit statistics
    disc_tol: int  # |g(tau2) - k*| tolerance defining a true positive
    kstar_bias_floor: float  # minimum robust bias for k* top blocks
    kstar_exclusion: int  # ignore windows closer than this in the k* score
    min_rough_len: int  # smallest rough window reconstruct may shrink to
    sim_suffix_pad: int  # uniform input padding for hypothesis simulations
    min_fine_len: int = 36  # smallest clipped fine window

    def dynamic_cap(self, rho: int, trace_len: int) -> int:
        hi = min(self.scan_cap, trace_len - 1)
        if self.scan_slack > 0:
            scale = self.rough.trace_scale
            dyn = int(math.ceil(scale * rho + self.scan_slack * math.sqrt(max(rho, 1))))
            hi = min(hi, dyn + self.rough.trace_window_len)
        return hi

    def rough_for_k(self, k: int) -> TestConfig | None:
        """Rough test geometry for anchoring at rho = k - back_offset.

        Shrinks the window when k is too small for the full length; returns
        None when even the minimum window does not fit, in which case the
        rough pointer falls back to the identity estimate scale*rho (for
        small k the drift since the trace start is within the fine window's
        slack, mirroring the paper's small-k case where tau1 := rho).
        """
        avail = k - self.back_offset + 1
        if avail >= self.rough.window_len:
            return self.rough
        if avail < self.min_rough_len:
            return None
        return self.rough.scaled(avail)

    def fine_for_k(self, k: int) -> TestConfig | None:
        """Fine test geometry for position k, clipped so the whole k* band
        admits a window (the far band edge is the binding constraint)."""
        avail = k - self.kstar_band[1] + 1
        if avail >= self.fine.window_len:
            return self.fine
        if avail < self.min_fine_len:
            return None
        return self.fine.scaled(avail)


def default_align_config(n: int, params: ChannelParams) -> AlignConfig:
    """Calibrated desk-scale defaults, parameterized by the paper's exponents.

    Multipliers were fixed by the calibration pilot documented in the README
    (grid searches via `calibrate` at n in {1024, 4096}, q = q' in {0.1, 0.2});
    the log-power shapes follow the two test scales log^{5/3} n / log^{1/3} n.
    All blocks enter the sign sums (theta = 1): at desk scale the top-bias
    subsets are too small for binomial separation, so selectivity comes from
    the threshold instead.
    """
    ln = math.log(max(n, 16))
    scale = params.length_ratio
    l1 = max(64, int(round(14.9 * ln ** (5 / 3))))
    lam1 = max(3, min(int(round(1.25 * l1**0.4)), math.isqrt(l1)))
    rough = TestConfig(
        window_len=l1, block_len=lam1, c1=0.62, theta=1.0, shrink=3.0, trace_scale=scale
    )
    l2 = max(40, int(round(35.0 * ln ** (1 / 3))))
    lam2 = min(5, math.isqrt(l2))
    fine = TestConfig(
        window_len=l2, block_len=lam2, c1=0.60, theta=1.0, shrink=3.0, trace_scale=scale
    )
    back = max(24, int(round(8.0 * ln)))
    band = (max(8, int(round(0.5 * back))), max(16, int(round(0.8 * back))))
    fw_slack = max(16, int(round(0.30 * back)))
    fine_window = (max(1, back - band[1] - fw_slack), back - band[0] + fw_slack)
    disc_tol = max(6, int(round(4.0 * ln ** (1 / 3))))
    return AlignConfig(
        rough=rough,
        fine=fine,
        back_offset=back,
        kstar_band=band,
        fine_window=fine_window,
        # scan from the first position where a window fits: the paper's 2*l
        # floor assumes l << k, which fails at desk scale
        scan_floor=0,
        scan_cap=int(math.ceil(1.5 * n)),
        scan_slack=6.0,
        shift_s=max(1, int(ln ** (4 / 9))),
        disc_tol=disc_tol,
        kstar_bias_floor=0.5,
        # windows within the discrepancy tolerance cannot cause false
        # positives, so only farther lookalikes are penalized
        kstar_exclusion=disc_tol + 1,
        min_rough_len=48,
        sim_suffix_pad=max(128, band[1] + 2 * fw_slack + 64),
    )


def paper_constants(n: int, ctilde: float = 0.05, c_sep: float = 1.0) -> dict[str, float]:
    """The paper-faithful constant ledger, printable for documentation.

    Everything follows from ctilde: C1 = 64 ctilde^-12, C_BIG = 80 ctilde^-1
    C1^{8/3}, C_back = 5 C_BIG, C_align = C_BIG/10, C_true = 2 C_BIG /
    (ctilde C1^{10/3}), C_false = ctilde C_BIG / (2 C1^{5/3}), C_avg =
    2 C_BIG / C1^2, kappa = c_sep (8 C_avg + C_back^{1/3}), M = 4 kappa +
    C_true. These values illustrate why every rate is indistinguishable from
    0 or 1 at desk scale; they are not used by the algorithms.
    """
    ln = math.log(n)
    c1 = 64.0 * ctilde**-12
    cbig = 80.0 * c1 ** (8 / 3) / ctilde
    cback = 5.0 * cbig
    cavg = 2.0 * cbig / c1**2
    ctrue = 2.0 * cbig / (ctilde * c1 ** (10 / 3))
    cfalse = ctilde * cbig / (2.0 * c1 ** (5 / 3))
    kappa = c_sep * (8.0 * cavg + cback ** (1 / 3))
    bigM = 4.0 * kappa + ctrue
    c0 = 600.0 / ctilde
    return {
        "ctilde": ctilde,
        "C1": c1,
        "C_BIG": cbig,
        "C_back": cback,
        "C_align": cbig / 10.0,
        "C_true": ctrue,
        "C_false": cfalse,
        "C_avg": cavg,
        "kappa": kappa,
        "M": bigM,
        "C0": c0,
        "rough_window": (c0 * ln) ** (5 / 3),
        "fine_window": cbig * ln ** (1 / 3),
        "fine_block": c1 ** (5 / 3),
        "shift_s": math.floor(ln ** (4 / 9)),
        "m": math.floor(((8 * cavg) ** 3 + cback) * ln),
        "trace_count": math.ceil(math.exp(bigM * ln ** (1 / 3))),
    }


@dataclass
class AlignmentResult:
    """Pointers for one trace; FAILED (-1) marks a failed stage."""

    tau1: int
    tau2: int
    kstar: int
    g_tau2: int | None = None  # ground-truth g(tau2) when provenance exists

    @property
    def finite(self) -> bool:
        return self.tau2 != FAILED


# ---------------------------------------------------------------------------
# Core scans
# ---------------------------------------------------------------------------


def rough_align(prefix: BitString, trace, k: int, cfg: AlignConfig) -> int | None:
    """First trace endpoint where the rough test fires; None when none does.

    Streaming left-to-right scan over [max(scan_floor, window-1), cap]; the
    decision at k' depends only on trace(0:k').
    """
    rcfg = cfg.rough
    if k < cfg.back_offset + rcfg.window_len:
        raise ValueError(
            f"k={k} too small: need k >= back_offset + rough window = "
            f"{cfg.back_offset + rcfg.window_len}"
        )
    if len(prefix) <= k:
        raise ValueError("prefix must extend past k")
    batch = TraceBatch.from_traces([trace])
    tau = _rough_batch(prefix.bits, batch, k, cfg)[0]
    return None if tau == FAILED else int(tau)


def fine_align(prefix: BitString, trace, kstar: int, tau1: int, cfg: AlignConfig) -> int | None:
    """First endpoint of the fine window (relative to tau1) where T fires."""
    if tau1 is None or tau1 < 0:
        raise ValueError("fine_align requires a finite tau1")
    batch = TraceBatch.from_traces([trace])
    win = build_input_window(prefix.bits, kstar, cfg.fine)
    tau = _fine_batch(win, batch, np.array([tau1]), cfg)[0]
    return None if tau == FAILED else int(tau)


def _rough_batch(prefix_bits: np.ndarray, batch: TraceBatch, k: int, cfg: AlignConfig) -> np.ndarray:
    rcfg = cfg.rough_for_k(k)
    rho = k - cfg.back_offset
    if rcfg is None:
        # small-k identity pointer: no window fits, but the accumulated drift
        # at rho is within the fine window's slack
        if rho < 0:
            return np.full(batch.count, FAILED, dtype=np.int64)
        ident = int(round(cfg.rough.trace_scale * rho))
        out = np.minimum(ident, batch.lengths - 1)
        out[batch.lengths == 0] = FAILED
        return out.astype(np.int64)
    win = build_input_window(prefix_bits, rho, rcfg)
    sums = batch.signed_prefix_sums()
    lo = max(cfg.scan_floor, rcfg.trace_window_len - 1)
    hi = np.minimum(
        np.array([cfg.dynamic_cap(rho, int(l)) for l in batch.lengths]),
        batch.lengths - 1,
    )
    return first_positive(win, sums, batch.lengths, lo, hi)


def _fine_batch(win: InputWindow, batch: TraceBatch, tau1: np.ndarray, cfg: AlignConfig) -> np.ndarray:
    lo_off, hi_off = cfg.fine_window
    offs = np.arange(lo_off, hi_off + 1)
    pos = np.where(tau1[:, None] >= 0, tau1[:, None] + offs[None, :], -1)
    pos = np.maximum(pos, -1)
    sums = batch.signed_prefix_sums()
    hits = scan_tests(win, sums, batch.lengths, np.maximum(pos, 0))
    hits &= pos >= win.cfg.trace_window_len - 1
    any_hit = hits.any(axis=1)
    firsts = hits.argmax(axis=1)
    out = np.where(any_hit, pos[np.arange(batch.count), firsts], FAILED)
    out[tau1 < 0] = FAILED
    return out.astype(np.int64)


def align_batch(
    prefix_bits: np.ndarray, batch: TraceBatch, k: int, kstar: int, cfg: AlignConfig
) -> tuple[np.ndarray, np.ndarray]:
    """Two-stage alignment of every trace in the batch; FAILED where lost."""
    tau1 = _rough_batch(prefix_bits, batch, k, cfg)
    win = build_input_window(prefix_bits, kstar, cfg.fine)
    tau2 = _fine_batch(win, batch, tau1, cfg)
    return tau1, tau2


def align_trace(
    prefix: BitString, trace, k: int, kstar: int, cfg: AlignConfig
) -> AlignmentResult:
    """Convenience two-stage alignment of a single trace."""
    batch = (
        TraceBatch.from_traces([trace]) if not isinstance(trace, AlignedTrace) else _wrap(trace)
    )
    tau1, tau2 = align_batch(prefix.bits, batch, k, kstar, cfg)
    g = None
    if isinstance(trace, AlignedTrace) and tau2[0] != FAILED:
        g = trace.g_of(int(tau2[0]))
    return AlignmentResult(int(tau1[0]), int(tau2[0]), kstar, g)


def _wrap(trace: AlignedTrace) -> TraceBatch:
    return TraceBatch(
        trace.bits[None, :].copy(),
        trace.source[None, :].astype(np.int32),
        np.array([len(trace)], dtype=np.int64),
    )


# ---------------------------------------------------------------------------
# Choosing the good position k*
# ---------------------------------------------------------------------------


def choose_kstar(
    prefix: BitString | np.ndarray, k: int, cfg: AlignConfig, seed: Seed | None = None
) -> int:
    """Deterministic proxy for the good alignment position.

    Candidates are the band [k - band_hi, k - band_lo]. A candidate window
    should (a) have all its top blocks robustly biased above the configured
    floor and (b) maximize the minimum sign-vector Hamming distance to every
    other window in the band and its +-bandwidth neighborhood, skipping
    windows that overlap the candidate. Ties and fallbacks resolve to the
    smallest position. The seed parameter is accepted for interface parity
    but unused: the score is deterministic.
    """
    bits = prefix.bits if isinstance(prefix, BitString) else np.asarray(prefix, dtype=np.uint8)
    fcfg = cfg.fine
    lo_b, hi_b = cfg.kstar_band
    c_lo = max(fcfg.window_len - 1, k - hi_b)
    c_hi = k - lo_b
    if c_hi < c_lo:
        raise ValueError(f"empty k* band for k={k}: [{c_lo}, {c_hi}]")
    width = hi_b - lo_b
    n_lo = max(fcfg.window_len - 1, c_lo - width)
    n_hi = min(len(bits) - 1, c_hi + width, k)
    endpoints = np.arange(n_lo, n_hi + 1)
    signed = 2 * bits.astype(np.int32) - 1
    csum = np.concatenate([[0], np.cumsum(signed)])
    base = endpoints - fcfg.window_len + 1
    idx = base[:, None] + fcfg.offsets[None, :]
    gath = csum[idx]
    sums = gath[:, 1:] - gath[:, :-1]
    signs = np.sign(sums).astype(np.int8)

    cand_mask = (endpoints >= c_lo) & (endpoints <= c_hi)
    cand_pos = endpoints[cand_mask]
    cand_signs = signs[cand_mask]
    # pairwise Hamming distance candidates x all windows
    dist = (cand_signs[:, None, :] != signs[None, :, :]).sum(axis=2)
    sep = np.abs(cand_pos[:, None] - endpoints[None, :]) >= max(1, cfg.kstar_exclusion)
    masked = np.where(sep, dist, np.iinfo(np.int32).max)
    score = masked.min(axis=1)
    score[~sep.any(axis=1)] = 0

    if cfg.kstar_bias_floor > 0:
        lam = fcfg.block_len
        if lam * fcfg.slack_frac <= 1:
            biases = np.abs(sums[cand_mask]) / math.sqrt(lam)
        else:
            from .blocktest import window_biases

            biases = np.stack([window_biases(bits, int(e), fcfg) for e in cand_pos])
        ok = np.ones(len(cand_pos), dtype=bool)
        for i in range(len(cand_pos)):
            order = np.lexsort((np.arange(fcfg.d1), -biases[i]))
            top1 = order[: fcfg.n_top1]
            elig = fcfg.tail_eligible
            order2 = elig[np.lexsort((elig, -biases[i][elig]))]
            top2 = order2[: min(fcfg.n_top2, elig.size)]
            ok[i] = bool(
                (biases[i][top1] >= cfg.kstar_bias_floor).all()
                and (biases[i][top2] >= cfg.kstar_bias_floor).all()
            )
        if ok.any():
            score = np.where(ok, score, -1)
    best = int(score.argmax())  # argmax takes the first, i.e. least position
    return int(cand_pos[best])


# ---------------------------------------------------------------------------
# Monte Carlo quality estimation
# ---------------------------------------------------------------------------


def wilson_interval(successes: int, trials: int, z: float = 1.96) -> tuple[float, float]:
    """Wilson score interval for a binomial proportion."""
    if trials == 0:
        return 0.0, 1.0
    phat = successes / trials
    denom = 1 + z * z / trials
    center = (phat + z * z / (2 * trials)) / denom
    half = z * math.sqrt(phat * (1 - phat) / trials + z * z / (4 * trials * trials)) / denom
    return max(0.0, center - half), min(1.0, center + half)


@dataclass
class QualityEstimate:
    """True/false-positive rates and discrepancy for one alignment position."""

    trials: int
    tp: int
    fp: int
    tp_rate: float
    fp_rate: float
    avg_discrepancy: float
    tp_ci: tuple[float, float]
    fp_ci: tuple[float, float]

    @property
    def fail_rate(self) -> float:
        return 1.0 - self.tp_rate - self.fp_rate


def estimate_position_quality(
    prefix: BitString,
    k3: int,
    params: ChannelParams,
    cfg: AlignConfig,
    trials: int,
    seed: Seed,
    chunk: int = 2048,
) -> QualityEstimate:
    """Simulate fresh traces of the prefix and measure alignment quality at k3.

    Each trial extends the prefix with fresh uniform bits, sends it through
    the channel, runs the two-stage alignment anchored at k = len(prefix)-1,
    and classifies a finite tau2 as a true positive when |g(tau2) - k3| is
    within the configured tolerance. Discrepancy averages |g(tau2) - k3| over
    true positives.
    """
    if trials < 1:
        raise ValueError("trials must be >= 1")
    k = len(prefix) - 1
    tp = fp = 0
    disc_sum = 0.0
    done = 0
    part = 0
    while done < trials:
        b = min(chunk, trials - done)
        rng = seed.derive(part).generator()
        structure = sample_structure(len(prefix) + cfg.sim_suffix_pad, b, params, rng)
        suffix = rng.integers(0, 2, size=(b, cfg.sim_suffix_pad), dtype=np.uint8)
        x = np.concatenate(
            [np.broadcast_to(prefix.bits, (b, len(prefix))), suffix], axis=1
        )
        batch = apply_structure(structure, x)
        _, tau2 = align_batch(prefix.bits, batch, k, k3, cfg)
        g = batch.g_at(np.maximum(tau2, 0))
        finite = tau2 >= 0
        disc = np.abs(g - k3)
        istrue = finite & (g >= 0) & (disc <= cfg.disc_tol)
        isfalse = finite & ~istrue
        tp += int(istrue.sum())
        fp += int(isfalse.sum())
        disc_sum += float(disc[istrue].sum())
        done += b
        part += 1
    return QualityEstimate(
        trials=trials,
        tp=tp,
        fp=fp,
        tp_rate=tp / trials,
        fp_rate=fp / trials,
        avg_discrepancy=disc_sum / tp if tp else float("nan"),
        tp_ci=wilson_interval(tp, trials),
        fp_ci=wilson_interval(fp, trials),
    )


# ---------------------------------------------------------------------------
# Calibration
# ---------------------------------------------------------------------------


class CalibrationError(RuntimeError):
    """No grid point met the false-positive target; carries the best point."""

    def __init__(self, message: str, best: tuple | None):
        super().__init__(message)
        self.best = best


def calibrate(
    params: ChannelParams,
    n: int,
    target_fp: float,
    seed: Seed,
    trials: int = 384,
    pilot_anchors: int = 3,
) -> tuple[AlignConfig, dict]:
    """Grid-search window lengths and thresholds for fp <= target, max tp.

    Pilot strings are sampled fresh from the seed; the search tunes the rough
    scale (window multiplier, threshold) by rough-stage accuracy, then the
    fine scale (window, block, threshold) by end-to-end true/false-positive
    rates at `pilot_anchors` anchor positions. Deterministic given the seed.
    """
    if n < 256:
        raise ValueError("calibration needs n >= 256")
    base = default_align_config(n, params)
    ln = math.log(n)
    from .bits import sample_uniform

    pilot = sample_uniform(n, seed.derive(0))
    anchors = [int(round(n * frac)) - 1 for frac in np.linspace(0.45, 0.95, pilot_anchors)]
    meta: dict = {"n": n, "q_del": params.q_del, "q_ins": params.q_ins, "rough": [], "fine": []}

    best_rough = None
    for mult in (9.0, 15.0):
        l1 = max(64, int(round(mult * ln ** (5 / 3))))
        lam1 = max(3, min(int(round(1.25 * l1**0.4)), math.isqrt(l1)))
        for c1r in (0.56, 0.62, 0.68):
            rough = replace(base.rough, window_len=l1, block_len=lam1, c1=c1r)
            cfg = replace(base, rough=rough, scan_floor=2 * l1)
            hits = miss = far = 0
            for ai, anchor in enumerate(anchors):
                prefix = BitString(pilot.bits[: anchor + 1])
                rng = seed.derive(1, ai, int(mult * 10), int(c1r * 100)).generator()
                b = max(1, trials // max(1, len(anchors)))
                structure = sample_structure(anchor + 1 + cfg.sim_suffix_pad, b, params, rng)
                suffix = rng.integers(0, 2, size=(b, cfg.sim_suffix_pad), dtype=np.uint8)
                x = np.concatenate(
                    [np.broadcast_to(prefix.bits, (b, anchor + 1)), suffix], axis=1
                )
                batch = apply_structure(structure, x)
                tau1 = _rough_batch(prefix.bits, batch, anchor, cfg)
                rho = anchor - cfg.back_offset
                g = batch.g_at(np.maximum(tau1, 0))
                finite = tau1 >= 0
                tol = max(cfg.kstar_band[0] // 2, 8)
                good = finite & (np.abs(g - rho) <= tol)
                hits += int(good.sum())
                far += int((finite & ~good).sum())
                miss += int((~finite).sum())
            total = hits + far + miss
            score = (hits - 2 * far) / max(total, 1)
            meta["rough"].append(
                {"window": l1, "block": lam1, "c1": c1r, "tp": hits / total, "fp": far / total}
            )
            if best_rough is None or score > best_rough[0]:
                best_rough = (score, rough, l1)
    _, rough_cfg, l1 = best_rough
    cfg = replace(base, rough=rough_cfg, scan_floor=2 * l1)

    feasible = []
    infeasible = []
    for l2 in (max(32, int(round(24 * ln ** (1 / 3)))), max(40, int(round(35 * ln ** (1 / 3))))):
        for lam2 in (3, 5):
            for c1f in (0.5, 0.6, 0.7):
                fine = replace(base.fine, window_len=l2, block_len=lam2, c1=c1f)
                trial_cfg = replace(cfg, fine=fine)
                tps, fps, discs = [], [], []
                for ai, anchor in enumerate(anchors):
                    prefix = BitString(pilot.bits[: anchor + 1])
                    k3 = choose_kstar(prefix, anchor, trial_cfg)
                    q = estimate_position_quality(
                        prefix,
                        k3,
                        params,
                        trial_cfg,
                        max(1, trials // len(anchors)),
                        seed.derive(2, ai, l2, lam2, int(c1f * 100)),
                    )
                    tps.append(q.tp_rate)
                    fps.append(q.fp_rate)
                    if not math.isnan(q.avg_discrepancy):
                        discs.append(q.avg_discrepancy)
                tp_rate = float(np.mean(tps))
                fp_rate = float(np.mean(fps))
                per_anchor = max(1, trials // len(anchors))
                tp_lo = wilson_interval(round(tp_rate * trials), trials)[0]
                fp_hi = wilson_interval(round(fp_rate * trials), trials)[1]
                point = {
                    "window": l2,
                    "block": lam2,
                    "c1": c1f,
                    "tp": tp_rate,
                    "fp": fp_rate,
                    "disc": float(np.mean(discs)) if discs else float("nan"),
                    "ratio_ok": bool(tp_lo >= 5 * fp_hi),
                }
                meta["fine"].append(point)
                if fp_rate <= target_fp:
                    # prefer points whose tp/fp separation already clears the
                    # 5x bar with confidence at pilot scale, then max tp
                    feasible.append(((point["ratio_ok"], tp_rate), trial_cfg, point))
                else:
                    infeasible.append((tp_rate - fp_rate, trial_cfg, point))
    if not feasible:
        best = max(infeasible, key=lambda t: t[0]) if infeasible else None
        raise CalibrationError(
            f"no config met fp <= {target_fp}; best infeasible point: "
            f"{best[2] if best else 'none'}",
            best,
        )
    feasible.sort(key=lambda t: t[0], reverse=True)
    chosen = feasible[0][1]
    meta["chosen"] = feasible[0][2]
    return chosen, meta


# ---------------------------------------------------------------------------
# Diagnostic detectors (require ground-truth provenance)
# ---------------------------------------------------------------------------


def detect_lambda_aligned(
    trace: AlignedTrace, k: int, cfg: TestConfig, slack_frac: float | None = None
) -> bool:
    """Exact block-alignment event for the window ending at k.

    True when every copied bit landing in block i of the trace window ending
    at f(k) originates within block_len*slack of block i of the input window
    ending at k. Requires provenance; windows that do not fit return False.
    """
    if k < cfg.window_len - 1:
        raise ValueError(f"window ending at {k} does not fit")
    slack = cfg.block_len * (cfg.slack_frac if slack_frac is None else slack_frac)
    ell = cfg.window_len
    fk = trace.f_of(k)
    if fk is None:
        return False
    off = cfg.offsets
    u = k - ell + off
    js = np.arange(1, ell + 1)
    jp = js + fk - ell
    inside = jp >= 0
    jp_c = np.clip(jp, 0, len(trace) - 1)
    copied = inside & (jp < len(trace)) & (trace.source[jp_c] >= 0)
    if not copied.any():
        return True
    blocks = np.searchsorted(off, js[copied], side="left")  # 1-based block index
    src = trace.source[jp_c[copied]]
    lo = u[blocks - 1] - slack
    hi = u[blocks] + slack
    return bool(((src >= lo) & (src <= hi)).all())


def detect_nonoverlap(trace: AlignedTrace, ell: int, k: int, k_prime: int) -> bool:
    """Exact non-overlap event: f(k-i) - (k'-i) uniformly beyond +-sqrt(ell).

    The walk is evaluated for i = 0..ell; a missing f (no surviving bit at or
    after the index) counts as +infinity. False whenever the endpoints leave
    no room for the window.
    """
    if k < ell or k_prime < ell - 1:
        return False
    root = math.sqrt(ell)
    idx = k - np.arange(ell + 1)
    fvals = np.empty(ell + 1, dtype=float)
    for i, kk in enumerate(idx):
        f = trace.f_of(int(kk))
        fvals[i] = math.inf if f is None else f
    diffs = fvals - (k_prime - np.arange(ell + 1))
    return bool((diffs > root).all() or (diffs < -root).all())
