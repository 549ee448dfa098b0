"""Brute-force optimal detection and exhaustive soft outputs.

These are the correctness oracles for the sphere search: a maximum-
likelihood decision obtained by scoring every one of the M^K hypotheses,
and bit LLRs obtained by folding max* over the complete hypothesis set.
Hypotheses are ordered lexicographically by per-user point index (user 1
most significant); ties in the residual metric break toward the lowest
index tuple, and the same rule is used by the sphere search so that
equal-metric decisions match exactly.

Scoring uses per-resource energy tables: the residual on resource n only
involves the d_f users mapped there, so all M^K metrics are gathered from
N tables of M^d_f entries.  For systems too large to tabulate (16-QAM at
K=6 is 16.7M hypotheses) an exact conditional-minimization path is used:
the users behind the identity head of an upper-triangular mapping are
pairwise orthogonal, so once the remaining users are enumerated each head
user minimizes independently.  Both paths return the same decision; tests
pin them against each other.
"""

from functools import lru_cache

import numpy as np

from .codebook import Codebook, index_to_bits
from .maxstar import logsumexp_axis
from .results import DetectionResult, LlrFrame

try:
    from ._msd_kernel import HAVE_NUMBA as _HAVE_KERNEL, factored_ml_kernel
except Exception:  # pragma: no cover
    _HAVE_KERNEL = False

_FULL_ENUM_LIMIT = 1 << 21


def residual_metric(y: np.ndarray, G: np.ndarray, x: np.ndarray) -> float:
    """||y - G x||^2, the detection objective; shared by every detector."""
    e = y - G @ x
    return float(np.sum(e.real ** 2 + e.imag ** 2))


@lru_cache(maxsize=8)
def _digit_table(M: int, K: int) -> np.ndarray:
    """(M^K, K) per-user point indices in lexicographic order, read-only."""
    n = M ** K
    if n > _FULL_ENUM_LIMIT:
        raise ValueError(f"hypothesis table of {n} rows is too large to enumerate")
    h = np.arange(n)
    digits = np.empty((n, K), dtype=np.int32)
    for k in range(K):
        digits[:, k] = (h // M ** (K - 1 - k)) % M
    digits.setflags(write=False)
    return digits


def _re_structure(cb: Codebook):
    """Per resource: (users, their dimension on it, their layer column)."""
    cfg = cb.cfg
    out = []
    for n in range(cfg.N):
        layers = cb.mapping.layer_sets[n]
        users = [kp // cfg.d_v for kp in layers]
        dims = [kp % cfg.d_v for kp in layers]
        out.append((users, dims, list(layers)))
    return out


def _re_energy_tables(y, G, cb):
    """E_n over the M^d_f point-index combos of the users on resource n."""
    cfg = cb.cfg
    tables = []
    for n, (users, dims, layers) in enumerate(_re_structure(cb)):
        acc = np.zeros((1,), dtype=np.complex128)
        for j, (k, l, kp) in enumerate(zip(users, dims, layers)):
            comp = G[n, kp] * cb.points[k, :, l]          # (M,)
            acc = (acc[:, None] + comp[None, :]).ravel()
        tables.append(np.abs(y[n] - acc) ** 2)
    return tables


def all_hypothesis_metrics(y: np.ndarray, G: np.ndarray, cb: Codebook) -> np.ndarray:
    """||y - G x||^2 for every hypothesis, in lexicographic index order."""
    cfg = cb.cfg
    digits = _digit_table(cfg.M, cfg.K)
    tables = _re_energy_tables(y, G, cb)
    metrics = np.zeros(len(digits))
    for n, (users, dims, layers) in enumerate(_re_structure(cb)):
        idx = np.zeros(len(digits), dtype=np.int64)
        for k in users:
            idx = idx * cfg.M + digits[:, k]
        metrics += tables[n][idx]
    return metrics


def _result_from_indices(y, G, cb, indices, counters=None) -> DetectionResult:
    cfg = cb.cfg
    indices = np.asarray(indices, dtype=np.int64)
    x_hat = cb.stacked_point(indices)
    bits = np.array([index_to_bits(int(a), cfg.L_M) for a in indices])
    res = DetectionResult(indices=indices, x_hat=x_hat, bits=bits,
                          metric=residual_metric(y, G, x_hat))
    if counters is not None:
        res.counters = counters
    return res


def ml_detect(y: np.ndarray, G: np.ndarray, cb: Codebook) -> DetectionResult:
    """Global argmin of ||y - G x||^2 over all M^K codeword stacks."""
    cfg = cb.cfg
    if cfg.n_hypotheses <= _FULL_ENUM_LIMIT:
        metrics = all_hypothesis_metrics(y, G, cb)
        best = int(np.argmin(metrics))   # first minimum == lowest index tuple
        indices = _digit_table(cfg.M, cfg.K)[best]
        return _result_from_indices(y, G, cb, indices)
    return _ml_detect_factored(y, G, cb)


def _factored_arrays(y, G, cb):
    cfg = cb.cfg
    if not cb.mapping.is_upper_triangular:
        raise ValueError("factored ML needs an upper-triangular mapping")
    n_head = cfg.N // cfg.d_v
    tail_users = list(range(n_head, cfg.K))
    tail_val = np.zeros((len(tail_users), cfg.d_v, cfg.M), dtype=np.complex128)
    tail_re = np.zeros((len(tail_users), cfg.d_v), dtype=np.int64)
    for j, k in enumerate(tail_users):
        for l in range(cfg.d_v):
            kp = k * cfg.d_v + l
            n = cb.mapping.user_res[k, l]
            tail_val[j, l] = G[n, kp] * cb.points[k, :, l]
            tail_re[j, l] = n
    head_val = np.zeros((n_head, cfg.d_v, cfg.M), dtype=np.complex128)
    head_re = np.zeros((n_head, cfg.d_v), dtype=np.int64)
    for k in range(n_head):
        for l in range(cfg.d_v):
            kp = k * cfg.d_v + l
            n = cb.mapping.user_res[k, l]
            head_val[k, l] = G[n, kp] * cb.points[k, :, l]
            head_re[k, l] = n
    return tail_val, tail_re, head_val, head_re


def _ml_detect_factored(y, G, cb) -> DetectionResult:
    """Exact ML for large M^K via conditional minimization over head users.

    Requires an upper-triangular mapping: the head users (those owning the
    identity block) are pairwise orthogonal, so for every assignment of
    the remaining users each head user's best point is independent.  Runs
    compiled when available; the pure-numpy variant below is the reference
    it is tested against.
    """
    tail_val, tail_re, head_val, head_re = _factored_arrays(y, G, cb)
    if _HAVE_KERNEL:
        indices = factored_ml_kernel(y, tail_val, tail_re, head_val, head_re, cb.cfg.M)
        return _result_from_indices(y, G, cb, indices)
    return _ml_detect_factored_numpy(y, G, cb)


def _ml_detect_factored_numpy(y, G, cb) -> DetectionResult:
    cfg = cb.cfg
    tail_val, tail_re, head_val, head_re = _factored_arrays(y, G, cb)
    n_head = head_re.shape[0]
    n_tail = tail_re.shape[0]
    combos = _digit_table(cfg.M, n_tail)                  # (C, n_tail) lex order

    r = np.repeat(y[None, :], len(combos), axis=0)        # (C, N)
    for j in range(n_tail):
        for l in range(cfg.d_v):
            r[:, tail_re[j, l]] -= tail_val[j, l][combos[:, j]]

    totals = np.zeros(len(combos))
    head_choice = np.zeros((len(combos), n_head), dtype=np.int64)
    for k in range(n_head):
        cost = np.zeros((len(combos), cfg.M))
        for l in range(cfg.d_v):
            e = r[:, head_re[k, l], None] - head_val[k, l, None, :]
            cost += e.real ** 2 + e.imag ** 2
        head_choice[:, k] = np.argmin(cost, axis=1)
        totals += cost[np.arange(len(combos)), head_choice[:, k]]

    ties = np.flatnonzero(totals == totals.min())
    cands = [tuple(head_choice[i]) + tuple(combos[i]) for i in ties]
    indices = np.array(min(cands), dtype=np.int64)
    return _result_from_indices(y, G, cb, indices)


def exhaustive_app_llr(y: np.ndarray, G: np.ndarray, cb: Codebook,
                       sigma2: float) -> LlrFrame:
    """Bit LLRs from the complete hypothesis set under uniform priors.

    lambda[k, m] = max*_{c: bit m of user k is 0} (-||y - Gx||^2 / (2 sigma2))
                 - max*_{c: that bit is 1}        (same score)

    so positive values vote for bit 0.  No list truncation and no
    clamping; the a-priori term is constant and dropped.
    """
    cfg = cb.cfg
    ll = -all_hypothesis_metrics(y, G, cb) / (2.0 * sigma2)
    digits = _digit_table(cfg.M, cfg.K)
    llrs = np.zeros((cfg.K, cfg.L_M))
    for k in range(cfg.K):
        for m in range(cfg.L_M):
            bit = (digits[:, k] >> (cfg.L_M - 1 - m)) & 1
            s0 = logsumexp_axis(np.where(bit == 0, ll, -np.inf), axis=0)
            s1 = logsumexp_axis(np.where(bit == 1, ll, -np.inf), axis=0)
            llrs[k, m] = s0 - s1
    return LlrFrame(llrs=llrs, clamp=None, list_size=cfg.n_hypotheses)
