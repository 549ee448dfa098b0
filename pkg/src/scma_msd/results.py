"""Result containers shared by the detectors."""

from dataclasses import dataclass, field

import numpy as np

from .complexity import OpCounters


@dataclass
class DetectionResult:
    """Hard multiuser decision with its residual metric and work counters."""

    indices: np.ndarray        # (K,) per-user point index
    x_hat: np.ndarray          # (K',) detected symbol vector
    bits: np.ndarray           # (K, L_M) per-user bit decisions, MSB first
    metric: float              # ||y - G x_hat||^2
    counters: OpCounters = field(default_factory=OpCounters)


@dataclass
class LlrFrame:
    """Per-user, per-bit log-likelihood ratios.

    Positive values vote for bit 0: each entry is the max* score of the
    bit-0 hypothesis set minus the score of the bit-1 set.  ``clamp`` is
    the saturation magnitude applied when a list leaves one of the two
    sets empty; None means no clamping was involved (exhaustive sets).
    ``list_size`` records how many hypotheses backed the values.
    """

    llrs: np.ndarray           # (K, L_M)
    clamp: float | None = None
    list_size: int | None = None

    def hard_bits(self) -> np.ndarray:
        """Sign decisions: positive (or zero) -> 0, negative -> 1."""
        return (self.llrs < 0).astype(np.int8)
