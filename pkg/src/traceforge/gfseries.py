"""Generating-function machinery for separating strings through the channel.

The channel acts on power series through two Mobius maps: the deletion stage
substitutes phi1(w) = p*w + q and contributes a factor p, and the insertion
stage substitutes phi2(w) = p'*w / (1 - q'*w). For a signed series a (entries
in [-1, 1]; inserted bits average to zero) shifted by a random offset S with
law sigma supported on {0..d}, the expected signed trace series evaluates to

    E[sum_j a~_j w^j] = p * P(1 / phi(w)) * Q(phi(w)),   phi = phi2 o phi1,

where P is the probability polynomial of sigma and Q the series of a.

Insertion convention: the identity composes per-position maps that fix output
position 0, which is the behaviour of inserting each geometric burst *after*
its input bit (bit 0 never moves). The channel's exact marginals under the
"after" convention reproduce these coefficients to machine precision, while
the "before" convention picks up an extra burst factor; the empirical
determination lives in the test suite, and everything in this module is wired
to the after convention accordingly.

The coefficient route here (series composition by repeated convolution) is
deliberately independent of the channel module's forward DPs so the two can
cross-check each other.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .bits import BitString
from .channel import ChannelParams

POLE_EPS = 1e-12


class DomainGuardError(ValueError):
    """Evaluation point too close to a pole or zero of the Mobius maps."""


def phi1(w: complex, params: ChannelParams) -> complex:
    """Deletion-stage map p*w + q."""
    return params.p_keep * w + params.q_del


def phi2(w: complex, params: ChannelParams) -> complex:
    """Insertion-stage map p'*w / (1 - q'*w); guards the pole at 1/q'."""
    denom = 1.0 - params.q_ins * w
    if abs(denom) <= POLE_EPS:
        raise DomainGuardError(f"phi2 pole: |1 - q_ins*w| = {abs(denom):.3e}")
    return params.p_noins * w / denom


@dataclass(frozen=True)
class ShiftDistribution:
    """Probability weights for the random shift, supported on {0..d}."""

    betas: tuple[float, ...]

    def __post_init__(self):
        arr = np.asarray(self.betas, dtype=float)
        if arr.ndim != 1 or arr.size == 0:
            raise ValueError("betas must be a nonempty 1-d sequence")
        if (arr < 0).any():
            raise ValueError("shift probabilities must be nonnegative")
        if abs(arr.sum() - 1.0) > 1e-12:
            raise ValueError(f"shift probabilities sum to {arr.sum()}, not 1")
        object.__setattr__(self, "betas", tuple(float(v) for v in arr))

    @staticmethod
    def delta(s: int = 0) -> "ShiftDistribution":
        return ShiftDistribution((0.0,) * s + (1.0,))

    @property
    def d(self) -> int:
        return len(self.betas) - 1

    @property
    def array(self) -> np.ndarray:
        return np.asarray(self.betas)

    @property
    def mean(self) -> float:
        return float(np.dot(np.arange(len(self.betas)), self.array))

    @property
    def mean_abs_deviation(self) -> float:
        s = np.arange(len(self.betas))
        return float(np.dot(self.array, np.abs(s - self.mean)))

    def poly_at(self, z: complex) -> complex:
        """P(z) by Horner."""
        acc = 0j
        for beta in reversed(self.betas):
            acc = acc * z + beta
        return acc


@dataclass(frozen=True)
class SignedSeries:
    """Finite signed series with coefficients in [-1, 1]."""

    coeffs: tuple[float, ...]

    def __post_init__(self):
        arr = np.asarray(self.coeffs, dtype=float)
        if arr.size and np.abs(arr).max() > 1 + 1e-12:
            raise ValueError("signed coefficients must lie in [-1, 1]")
        object.__setattr__(self, "coeffs", tuple(float(v) for v in arr))

    @staticmethod
    def from_bits(x: BitString) -> "SignedSeries":
        return SignedSeries(tuple(float(v) for v in x.signed()))

    @staticmethod
    def difference(x1: BitString, x2: BitString) -> "SignedSeries":
        if len(x1) != len(x2):
            raise ValueError("difference requires equal-length strings")
        return SignedSeries(
            tuple(float(v) for v in x1.bits.astype(np.int8) - x2.bits.astype(np.int8))
        )

    @property
    def array(self) -> np.ndarray:
        return np.asarray(self.coeffs)

    @property
    def first_nonzero(self) -> int | None:
        nz = np.flatnonzero(self.array)
        return int(nz[0]) if nz.size else None

    def series_at(self, z: complex) -> complex:
        """Q(z) by Horner over the finite coefficient list."""
        acc = 0j
        for aj in reversed(self.coeffs):
            acc = acc * z + aj
        return acc


def expected_trace_gf(
    a: SignedSeries,
    sigma: ShiftDistribution,
    params: ChannelParams,
    w: complex,
) -> tuple[complex, float]:
    """Evaluate p * P(1/phi(w)) * Q(phi(w)) at a point with |w| < 1.

    Returns (value, truncation bound), the bound being |phi|^len / (1 - |phi|)
    on the tail a finite Q ignores relative to an infinite [-1,1] extension.
    """
    if abs(w) >= 1:
        raise DomainGuardError(f"|w| = {abs(w):.6f} must be < 1")
    inner = phi2(phi1(w, params), params)
    if abs(inner) <= POLE_EPS:
        raise DomainGuardError("phi2(phi1(w)) too close to 0 for the 1/phi argument")
    value = params.p_keep * sigma.poly_at(1.0 / inner) * a.series_at(inner)
    mod = abs(inner)
    bound = mod ** len(a.coeffs) / (1.0 - mod) if mod < 1 else math_inf()
    return value, bound


def math_inf() -> float:
    return float("inf")


def phi_series(params: ChannelParams, j_max: int) -> np.ndarray:
    """Power-series coefficients of phi2(phi1(w)) up to degree j_max.

    phi(w) = p'(q + p w) / ((1 - q q')(1 - b w)) with b the per-step insertion
    weight, so the coefficients are an explicit geometric progression.
    """
    q, p = params.q_del, params.p_keep
    b = params.step_insert
    scale = params.p_noins / (1 - params.q_del * params.q_ins)
    out = np.zeros(j_max + 1)
    out[0] = scale * q
    if j_max >= 1:
        t = np.arange(1, j_max + 1)
        out[1:] = scale * (q * b**t + p * b ** (t - 1))
    return out


def expected_trace_coeffs(
    a: SignedSeries,
    sigma: ShiftDistribution,
    params: ChannelParams,
    j_max: int,
) -> np.ndarray:
    """Coefficients of the expected signed trace series up to index j_max.

    Expands p * P(1/phi) * Q(phi) = p * sum_t c_t phi(w)^t with
    c_t = sum_{k-s=t} a_k beta_s, which is a true power series provided the
    shift support never outruns the first nonzero coefficient of a.
    """
    if j_max < 0:
        raise ValueError("j_max must be nonnegative")
    avec = a.array
    bvec = sigma.array
    if avec.size == 0:
        return np.zeros(j_max + 1)
    first = a.first_nonzero
    if first is not None and sigma.d > first:
        raise ValueError(
            f"shift support d={sigma.d} exceeds first nonzero coefficient {first}; "
            "P(1/phi)Q(phi) would have negative powers"
        )
    c = np.zeros(avec.size)
    for s, beta in enumerate(bvec):
        if beta == 0.0:
            continue
        c[: avec.size - s] += beta * avec[s:]
    phi = phi_series(params, j_max)
    out = np.zeros(j_max + 1)
    power = np.zeros(j_max + 1)
    power[0] = 1.0
    for t, ct in enumerate(c):
        if ct != 0.0:
            out += ct * power
        if t < avec.size - 1:
            power = np.convolve(power, phi)[: j_max + 1]
            if not power.any():
                break
    return params.p_keep * out


def find_separating_index(
    x1: BitString,
    x2: BitString,
    sigma: ShiftDistribution,
    params: ChannelParams,
    j_max: int,
) -> tuple[int, float]:
    """Trace position whose expected bit statistic best separates x1 from x2.

    Computes the exact difference of shift-averaged one-probabilities via the
    series identity on a = x1 - x2 and returns (argmax_j |difference|, gap),
    ties resolved toward the smallest index. A zero gap (which cannot happen
    for distinct strings once j_max is large enough) is reported rather than
    raised.
    """
    if x1 == x2:
        raise ValueError("strings must differ")
    d = sigma.d
    if d > 0:
        lead = min(d + 1, len(x1), len(x2))
        if not np.array_equal(x1.bits[:lead], x2.bits[:lead]):
            raise ValueError(f"strings must agree on positions 0..{d} for this shift law")
    diff = SignedSeries.difference(x1, x2)
    coeffs = expected_trace_coeffs(diff, sigma, params, j_max)
    gaps = np.abs(coeffs)
    j = int(gaps.argmax())
    return j, float(gaps[j])
