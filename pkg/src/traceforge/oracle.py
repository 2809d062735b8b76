"""Exhaustive maximum-a-posteriori decoding for tiny block lengths.

Scores every candidate input of length n by its exact total trace
log-likelihood (uniform prior, so MAP = maximum likelihood) and is the
ground-truth standard against which the heuristic reconstructions are judged.
Guarded to n <= 16.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import logsumexp

from .bits import BitString
from .channel import ChannelParams, _loglik_matrix

_MAX_N = 16


@dataclass
class Posterior:
    """Log-score per candidate (lexicographic order), argmax, and log-normalizer."""

    log_scores: np.ndarray
    n: int
    argmax_index: int
    log_normalizer: float

    def candidate(self, index: int) -> BitString:
        bits = (index >> np.arange(self.n - 1, -1, -1)) & 1
        return BitString(bits.astype(np.uint8))

    @property
    def map_estimate(self) -> BitString:
        return self.candidate(self.argmax_index)

    def log_posterior(self, x: BitString) -> float:
        idx = int("".join(str(b) for b in x.bits), 2) if len(x) else 0
        return float(self.log_scores[idx] - self.log_normalizer)


def map_reconstruct(
    traces: list, n: int, params: ChannelParams
) -> tuple[BitString, Posterior]:
    """Exact MAP decoder over all 2^n candidates under a uniform prior.

    Ties resolve to the lexicographically smallest candidate (candidates are
    enumerated most-significant-bit first at index order).
    """
    if not 0 <= n <= _MAX_N:
        raise ValueError(f"map_reconstruct is guarded to n <= {_MAX_N}")
    if not traces:
        raise ValueError("need at least one trace")
    count = 1 << n
    idx = np.arange(count, dtype=np.uint32)
    candidates = ((idx[:, None] >> np.arange(n - 1, -1, -1)[None, :]) & 1).astype(np.uint8)
    scores = np.zeros(count)
    for t in traces:
        y = t if isinstance(t, BitString) else BitString(t)
        scores += _loglik_matrix(candidates, params, y)
    argmax = int(scores.argmax())  # first max = lexicographically smallest
    logz = float(logsumexp(scores))
    post = Posterior(scores, n, argmax, logz)
    return post.map_estimate, post
