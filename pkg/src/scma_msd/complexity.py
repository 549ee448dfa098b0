"""Operation counters and the closed-form average-complexity expressions.

The counting convention (the source never fixes one) is chosen so the
sphere-search row is an identity: visiting a head layer k' <= N means one
candidate-symbol metric evaluation there and costs 4*d_f + 2 real adds and
multiplies (d_f complex products at 4 mults + 2 adds each, d_f complex
subtractions, squared magnitude charged as one complex product, plus the
running-metric accumulate).  A tail layer visit evaluates |x|^2 against a
unit diagonal and costs 2 adds and 2 mults.  exp/log operations never
occur in the sphere search.

The message-passing column is evaluated literally; its empirical
counterpart increments by the same per-event budgets at the matching loop
sites, so conformance is exact at any (M, N, d_f, d_v, N_i).
"""

from dataclasses import dataclass


@dataclass
class OpCounters:
    """Real-arithmetic totals for one decode (or sums over many)."""

    real_adds: float = 0.0
    real_mults: float = 0.0
    exp_log_ops: float = 0.0
    visited_layers_head: float = 0.0   # N_v1: evaluations at layers k' <= N
    visited_layers_tail: float = 0.0   # N_v2: evaluations at layers k' > N

    def __add__(self, other: "OpCounters") -> "OpCounters":
        return OpCounters(
            self.real_adds + other.real_adds,
            self.real_mults + other.real_mults,
            self.exp_log_ops + other.exp_log_ops,
            self.visited_layers_head + other.visited_layers_head,
            self.visited_layers_tail + other.visited_layers_tail,
        )

    def scaled(self, factor: float) -> "OpCounters":
        return OpCounters(
            self.real_adds * factor,
            self.real_mults * factor,
            self.exp_log_ops * factor,
            self.visited_layers_head * factor,
            self.visited_layers_tail * factor,
        )

    @property
    def combined_cost(self) -> float:
        """Adds + mults with each exp/log charged as one multiplier."""
        return self.real_adds + self.real_mults + self.exp_log_ops


def predicted_msd_ops(d_f: int, n_v1: float, n_v2: float) -> OpCounters:
    """Average sphere-search cost for given visited-layer counts."""
    if d_f < 0 or n_v1 < 0 or n_v2 < 0:
        raise ValueError("inputs must be nonnegative")
    ops = (4 * d_f + 2) * n_v1 + 2 * n_v2
    return OpCounters(real_adds=ops, real_mults=ops, exp_log_ops=0.0,
                      visited_layers_head=n_v1, visited_layers_tail=n_v2)


def predicted_mpa_ops(M: int, N: int, d_f: int, d_v: int, n_iter: int) -> OpCounters:
    """Log-domain message passing cost for one frame."""
    if min(M, N, d_f, d_v, n_iter) <= 0:
        raise ValueError("inputs must be positive")
    combos = float(M) ** (d_f - 1)
    edge_syms = M * N * d_f
    adds = edge_syms * (combos * (4 * d_f - 2 + n_iter * (2 + 1 / M))
                        + n_iter * (2 - 1 / d_v) + 5)
    mults = edge_syms * (4 * d_f * combos + 5)
    exp_log = edge_syms * n_iter * (combos + 1) + 1
    return OpCounters(real_adds=adds, real_mults=mults, exp_log_ops=exp_log)
