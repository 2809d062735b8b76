"""Trace reconstruction over the deletion-insertion channel.

Library layout:

- ``bits``: bit strings, seeded sampling, text/hex serialization
- ``channel``: simulators with alignment provenance, exact DPs (marginals,
  likelihood, full distributions for tiny inputs)
- ``gfseries``: Mobius-map generating functions and the separating-index
  search
- ``blocktest``: block-sign similarity tests between input and trace windows
- ``align``: two-stage alignment, good-position selection, calibration,
  quality estimators
- ``recon``: bit-by-bit reconstruction loop and the aligned-majority baseline
- ``oracle``: exhaustive MAP decoding for tiny n
- ``cli``: batch experiment harness (``traceforge`` entry point)
"""

from .bits import BitString, Seed, sample_uniform
from .channel import AlignedTrace, ChannelParams, transmit, transmit_geometric

__all__ = [
    "BitString",
    "Seed",
    "sample_uniform",
    "AlignedTrace",
    "ChannelParams",
    "transmit",
    "transmit_geometric",
]

__version__ = "0.1.0"
