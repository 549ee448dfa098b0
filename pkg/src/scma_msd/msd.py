"""Depth-first sphere search over the augmented upper-triangular system.

The search tree has one position per transmitted scalar.  Positions are
processed in descending order; the highest position owned by a user is
where its codeword is chosen (up to M branches), every other position of
that user replicates the already-chosen codeword and has a single child.
The augmented square system pairs each position with one row: N positions
(one per resource, the lowest position that resource couples) carry the
physical observation rows, every other position carries an appended
identity row whose increment is |x_p|^2 against the appended zero
observation.

For constant-modulus codebooks the plan is the literal augmented system:
position = layer, the physical rows sit on the first N layers, and every
row is evaluated exactly at its own layer, which is the modified search
over [[G1, G2], [0, I]].  Weighted-QAM codebooks are searched in
decomposed coordinates (one position per QPSK component of G' = G Omega):
users are reordered so observation rows complete as early as possible,
and each observation row is evaluated at the branch position of the last
user it couples - the earliest point at which all of its symbols are
fixed - so its residual both orders that user's candidates and prunes
immediately.  Either way every row contributes exactly once on the way to
a leaf, the accumulated metric is nondecreasing, and the identity-row
increments sum to a hypothesis-independent constant for constant-modulus
alphabets, so minimizing the search metric minimizes ||y - G x||^2.

Children are ordered by ascending increment (ties keep candidate-index
order) and the radius starts at infinity, shrinking to the best leaf
found - or, in list mode, to the worst of the N_cand best leaves once the
list is full.  A subtree is pruned only when its accumulated metric plus
an admissible bound on the increments still to come (each remaining
identity row contributes at least its smallest candidate energy) strictly
exceeds the radius, so equal-metric leaves are still reached and ties
break toward the lowest lexicographic index tuple, matching the
brute-force oracle.  No QR factorization is ever involved; triangularity
comes from the mapping structure alone.
"""

import heapq
import weakref
from dataclasses import dataclass, field

import numpy as np

from .channel import EffectiveChannel
from .codebook import Codebook, MODULUS_GENERAL, index_to_bits
from .complexity import OpCounters
from .maxstar import max_star
from .ml_oracle import residual_metric
from .results import DetectionResult, LlrFrame

try:
    from ._msd_kernel import (HAVE_NUMBA, search_batch_kernel,
                              llr_from_lists_kernel)
except Exception:  # pragma: no cover - numba missing or broken
    HAVE_NUMBA = False

DEFAULT_LLR_CLAMP = 30.0


class GeneralModulusError(ValueError):
    """Raised when a codebook admits neither direct nor decomposed search."""


@dataclass(frozen=True)
class SearchPlan:
    """Tree layout plus the row data of one channel instance.

    The layout (everything except row_gain and row_y) depends only on the
    codebook and is cached per codebook; see _PlanTemplate.
    """

    T: int                     # tree depth = positions
    M: int
    K: int
    Q: int                     # positions per user
    N: int                     # observation rows
    user_of_pos: np.ndarray    # (T,) int32
    user_pos: np.ndarray       # (K, Q) int32, ascending positions of each user
    branch_pos: np.ndarray     # (K,) int32 = max position per user
    comp_val: np.ndarray       # (K, M, Q) complex, candidate components
    has_identity: np.ndarray   # (T,) uint8: identity-row increment here?
    att_ptr: np.ndarray        # (T+1,) int64: rows evaluated at each position
    att_row: np.ndarray        # (N,) int32
    row_ptr: np.ndarray        # (N+1,) int64 CSR bounds into row_pos/row_gain
    row_pos: np.ndarray        # (nnz,) int32 coupled positions per row
    row_cost: np.ndarray       # (N,) float64 adds (= mults) per row evaluation
    tail_energy: np.ndarray    # (K, M) identity-row energy per candidate
    below_lb: np.ndarray       # (T,) lower bound on the increments below pos
    L_M: int
    row_y: np.ndarray          # (N,) complex observations
    row_gain: np.ndarray       # (nnz,) complex


@dataclass(frozen=True)
class _PlanTemplate:
    """Channel-independent part of a SearchPlan, plus fill indices."""

    T: int
    M: int
    K: int
    Q: int
    N: int
    user_of_pos: np.ndarray
    user_pos: np.ndarray
    branch_pos: np.ndarray
    comp_val: np.ndarray
    has_identity: np.ndarray
    att_ptr: np.ndarray
    att_row: np.ndarray
    row_ptr: np.ndarray
    row_pos: np.ndarray
    row_cost: np.ndarray
    tail_energy: np.ndarray
    below_lb: np.ndarray
    L_M: int
    term_re: np.ndarray           # (nnz,) int32
    term_layer: np.ndarray        # (nnz,) int32
    term_weight: np.ndarray       # (nnz,) float64

    def fill(self, G: np.ndarray, y: np.ndarray) -> SearchPlan:
        row_gain = G[self.term_re, self.term_layer] * self.term_weight
        return SearchPlan(T=self.T, M=self.M, K=self.K, Q=self.Q, N=self.N,
                          user_of_pos=self.user_of_pos, user_pos=self.user_pos,
                          branch_pos=self.branch_pos, comp_val=self.comp_val,
                          has_identity=self.has_identity, att_ptr=self.att_ptr,
                          att_row=self.att_row, row_ptr=self.row_ptr,
                          row_pos=self.row_pos, row_cost=self.row_cost,
                          tail_energy=self.tail_energy, below_lb=self.below_lb,
                          L_M=self.L_M, row_y=np.ascontiguousarray(y),
                          row_gain=row_gain)

    def fill_batch(self, Gs: np.ndarray, ys: np.ndarray):
        """(B, nnz) gains and (B, N) observations for a stack of frames."""
        row_gain = Gs[:, self.term_re, self.term_layer] * self.term_weight
        return row_gain, np.ascontiguousarray(ys)


_plan_cache: "weakref.WeakKeyDictionary[Codebook, _PlanTemplate]" = weakref.WeakKeyDictionary()


def plan_template(cb: Codebook) -> _PlanTemplate:
    """The cached tree layout for a codebook."""
    tpl = _plan_cache.get(cb)
    if tpl is None:
        if cb.modulus_class == MODULUS_GENERAL:
            raise GeneralModulusError(
                "general modulus; MSD optimality not guaranteed - use ml or mpa")
        m = cb.omega.m if (cb.omega is not None and cb.modulus_class != "constant") else 1
        tpl = _build_template(cb, m)
        _plan_cache[cb] = tpl
    return tpl


def build_search_plan(ec: EffectiveChannel, cb: Codebook) -> SearchPlan:
    """Plan for one channel instance; decomposes non-constant-modulus books."""
    return plan_template(cb).fill(ec.G, ec.y)


def _build_template(cb: Codebook, m: int) -> _PlanTemplate:
    cfg = cb.cfg
    K, M, d_v, N = cfg.K, cfg.M, cfg.d_v, cfg.N
    Q = m * d_v
    T = K * Q

    if m == 1:
        # literal layout: position == layer, users in index order
        order = list(range(K))
        points = cb.points[:, :, :, None]           # (K, M, d_v, 1)
        weights = np.ones(1)
    else:
        order = _greedy_user_order(cb)
        points = cb.omega.components                # (K, M, d_v, m)
        weights = cb.omega.weights

    # positions: one block per user, first searched user on top
    slot_of = {k: s for s, k in enumerate(order)}
    pos_of = np.zeros((K, d_v, m), dtype=np.int32)
    user_of_pos = np.zeros(T, dtype=np.int32)
    for s, k in enumerate(order):
        base = T - (s + 1) * Q
        for l in range(d_v):
            for j in range(m):
                p = base + l * m + j
                pos_of[k, l, j] = p
                user_of_pos[p] = k

    user_pos = np.sort(pos_of.reshape(K, Q), axis=1).astype(np.int32)
    branch_pos = user_pos[:, -1].copy()

    comp_val = np.zeros((K, M, Q), dtype=np.complex128)
    for k in range(K):
        flat_pos = pos_of[k].reshape(Q)
        sort_idx = np.argsort(flat_pos)
        for a in range(M):
            comp_val[k, a] = points[k, a].reshape(Q)[sort_idx]

    # observation row r couples every component of every layer on resource
    # r with gain G[r, layer] * weight_j.  The lowest coupled position is
    # the row's slot in the square system (no identity row there).  The
    # literal layout evaluates the row at that slot; decomposed layouts
    # evaluate it at the branch position of the last user it couples,
    # where all of its symbols have just been fixed.
    has_identity = np.ones(T, dtype=np.uint8)
    attach_at = np.zeros(N, dtype=np.int64)
    row_ptr = np.zeros(N + 1, dtype=np.int64)
    pos_list, layer_list, weight_list, re_list = [], [], [], []
    for r in range(N):
        coupled = []
        users = set()
        for kp in cb.mapping.layer_sets[r]:
            k, l = divmod(kp, d_v)
            users.add(k)
            for j in range(m):
                coupled.append((int(pos_of[k, l, j]), kp, float(weights[j])))
        has_identity[min(p for p, _, _ in coupled)] = 0
        if m == 1:
            attach_at[r] = min(p for p, _, _ in coupled)
        else:
            attach_at[r] = min(int(branch_pos[k]) for k in users)
        for q, kp, w in coupled:
            pos_list.append(q)
            layer_list.append(kp)
            weight_list.append(w)
            re_list.append(r)
        row_ptr[r + 1] = len(pos_list)
    row_pos = np.array(pos_list, dtype=np.int32)
    term_layer = np.array(layer_list, dtype=np.int32)
    term_weight = np.array(weight_list, dtype=np.float64)
    term_re = np.array(re_list, dtype=np.int32)
    row_cost = 4.0 * np.diff(row_ptr) + 2.0

    att_ptr = np.zeros(T + 1, dtype=np.int64)
    att_row = np.zeros(N, dtype=np.int32)
    fill = 0
    for p in range(T):
        for r in range(N):
            if attach_at[r] == p:
                att_row[fill] = r
                fill += 1
        att_ptr[p + 1] = fill

    # per-candidate |component|^2, same arithmetic as the engines use
    comp_energy = comp_val.real * comp_val.real + comp_val.imag * comp_val.imag

    tail_energy = np.zeros((K, M))
    for k in range(K):
        for qi, p in enumerate(user_pos[k]):
            if has_identity[p]:
                tail_energy[k] += comp_energy[k, :, qi]

    # admissible bound on the metric still to be accumulated below each
    # position: identity increments are at least the smallest candidate
    # energy there, observation rows at least zero.  Shrunk by 1e-12
    # relative so float rounding can never prune an exact-tie leaf.
    min_energy = np.zeros(T)
    for k in range(K):
        for qi, p in enumerate(user_pos[k]):
            if has_identity[p]:
                min_energy[p] = comp_energy[k, :, qi].min()
    below_lb = np.concatenate(([0.0], np.cumsum(min_energy)[:-1])) * (1.0 - 1e-12)

    return _PlanTemplate(T=T, M=M, K=K, Q=Q, N=N, user_of_pos=user_of_pos,
                         user_pos=user_pos, branch_pos=branch_pos,
                         comp_val=comp_val, has_identity=has_identity,
                         att_ptr=att_ptr, att_row=att_row, row_ptr=row_ptr,
                         row_pos=row_pos, row_cost=row_cost,
                         tail_energy=tail_energy, below_lb=below_lb, L_M=cfg.L_M,
                         term_re=term_re, term_layer=term_layer,
                         term_weight=term_weight)


def _greedy_user_order(cb: Codebook) -> list:
    """Search order that completes observation rows as early as possible."""
    cfg = cb.cfg
    res_of = [set(cb.mapping.user_res[k].tolist()) for k in range(cfg.K)]
    remaining = set(range(cfg.K))
    filled: dict[int, int] = {n: 0 for n in range(cfg.N)}
    order = []
    while remaining:
        def score(k):
            done = sum(1 for n in res_of[k] if filled[n] + 1 == cfg.d_f)
            progress = sum(1 for n in res_of[k] if filled[n] > 0)
            return (-done, -progress, k)
        k = min(remaining, key=score)
        order.append(k)
        remaining.discard(k)
        for n in res_of[k]:
            filled[n] += 1
    return order


# ---------------------------------------------------------------------------
# reference engine

@dataclass
class SearchState:
    """Mutable walk state: assignment, partial metric, radius and leaf list."""

    plan: SearchPlan
    n_cand: int
    x_hat: np.ndarray = field(init=False)
    indices: np.ndarray = field(init=False)
    heap: list = field(init=False)        # max-heap of (metric, cand), worst on top
    radius: float = field(init=False)
    counters: OpCounters = field(init=False)

    def __post_init__(self):
        self.x_hat = np.zeros(self.plan.T, dtype=np.complex128)
        self.indices = np.zeros(self.plan.K, dtype=np.int32)
        self.heap = []
        self.radius = np.inf
        self.counters = OpCounters()

    def place(self, k: int, a: int):
        self.indices[k] = a
        self.x_hat[self.plan.user_pos[k]] = self.plan.comp_val[k, a]

    def increment(self, pos: int) -> float:
        """Metric increase contributed at one position: the identity-row
        energy (unless an observation row displaced it) plus the residuals
        of observation rows evaluated here.  Charges the visited-layer
        counters per evaluation.  Terms are accumulated in storage order
        so the compiled engine produces bit-identical metrics.
        """
        plan = self.plan
        inc = 0.0
        if plan.has_identity[pos]:
            e = self.x_hat[pos]
            inc += e.real * e.real + e.imag * e.imag
            self.counters.visited_layers_tail += 1
            self.counters.real_adds += 2.0
            self.counters.real_mults += 2.0
        for t in range(plan.att_ptr[pos], plan.att_ptr[pos + 1]):
            r = plan.att_row[t]
            e = plan.row_y[r]
            for u in range(plan.row_ptr[r], plan.row_ptr[r + 1]):
                e -= plan.row_gain[u] * self.x_hat[plan.row_pos[u]]
            inc += e.real * e.real + e.imag * e.imag
            self.counters.visited_layers_head += 1
            self.counters.real_adds += plan.row_cost[r]
            self.counters.real_mults += plan.row_cost[r]
        return inc

    def offer_leaf(self, metric: float):
        # heapq is a min-heap; negating the key (and the tuple elementwise)
        # keeps the worst (metric, cand) at the root for replacement
        cand = tuple(int(a) for a in self.indices)
        key = (-metric, tuple(-a for a in cand))
        if len(self.heap) < self.n_cand:
            heapq.heappush(self.heap, (key, metric, cand))
        elif key > self.heap[0][0]:
            heapq.heapreplace(self.heap, (key, metric, cand))
        else:
            return
        if len(self.heap) == self.n_cand:
            self.radius = self.heap[0][1]

    def sorted_leaves(self):
        return sorted((m, c) for _, m, c in self.heap)


def expand_layer(state: SearchState, pos: int):
    """Ordered children of the node about to assign `pos`.

    Branch positions return up to M (increment, candidate) pairs sorted by
    ascending increment with candidate order preserved on ties; replication
    positions return the single child of the codeword already chosen.
    """
    plan = state.plan
    k = plan.user_of_pos[pos]
    if pos == plan.branch_pos[k]:
        children = []
        for a in range(plan.M):
            state.place(k, a)
            children.append((state.increment(pos), a))
        children.sort(key=lambda c: c[0])   # stable: ties keep index order
        return children
    return [(state.increment(pos), int(state.indices[k]))]


def _walk(state: SearchState, pos: int, d1: float):
    plan = state.plan
    k = plan.user_of_pos[pos]
    branching = pos == plan.branch_pos[k]
    for inc, a in expand_layer(state, pos):
        if d1 + inc + plan.below_lb[pos] > state.radius:
            break                           # ascending order: the rest fail too
        if branching:
            state.place(k, a)
        if pos == 0:
            state.offer_leaf(d1 + inc)
        else:
            _walk(state, pos - 1, d1 + inc)


def _python_search(plan: SearchPlan, n_cand: int):
    state = SearchState(plan=plan, n_cand=n_cand)
    _walk(state, plan.T - 1, 0.0)
    leaves = state.sorted_leaves()
    metrics = np.array([m for m, _ in leaves])
    cands = np.array([c for _, c in leaves], dtype=np.int32).reshape(len(leaves), plan.K)
    return metrics, cands, state.counters


# ---------------------------------------------------------------------------
# public operations

def _resolve_engine(engine: str) -> str:
    if engine == "auto":
        return "numba" if HAVE_NUMBA else "python"
    if engine == "numba" and not HAVE_NUMBA:
        raise RuntimeError("numba engine requested but numba is unavailable")
    if engine not in ("numba", "python"):
        raise ValueError(f"unknown engine {engine!r}")
    return engine


def _run_search(plan: SearchPlan, n_cand: int, engine: str):
    if _resolve_engine(engine) == "python":
        return _python_search(plan, n_cand)
    metrics, cands, sizes, n_v1, n_v2, ops = search_batch_kernel(
        plan.T, plan.M, plan.K, plan.user_of_pos, plan.user_pos,
        plan.branch_pos, plan.comp_val, plan.has_identity, plan.att_ptr,
        plan.att_row, plan.row_ptr, plan.row_pos, plan.row_cost,
        plan.below_lb, plan.row_gain[None, :], plan.row_y[None, :], n_cand)
    size = sizes[0]
    counters = OpCounters(real_adds=ops[0], real_mults=ops[0],
                          visited_layers_head=n_v1[0], visited_layers_tail=n_v2[0])
    return metrics[0, :size], cands[0, :size], counters


def msd_detect(ec: EffectiveChannel, cb: Codebook, engine: str = "auto") -> DetectionResult:
    """ML-equivalent hard detection via the modified sphere search."""
    plan = build_search_plan(ec, cb)
    metrics, cands, counters = _run_search(plan, 1, engine)
    indices = cands[0]
    x_hat = cb.stacked_point(indices)
    bits = np.array([index_to_bits(int(a), cb.cfg.L_M) for a in indices])
    return DetectionResult(indices=np.asarray(indices, dtype=np.int64), x_hat=x_hat,
                           bits=bits, metric=residual_metric(ec.y, ec.G, x_hat),
                           counters=counters)


def list_search(ec: EffectiveChannel, cb: Codebook, n_cand: int,
                engine: str = "auto"):
    """The N_cand best leaves: (residual metrics, index tuples, counters).

    Metrics are ||y - G x||^2 per leaf (the identity-row energy the search
    accumulated is removed), sorted ascending with lexicographic order
    among exact ties.
    """
    if n_cand < 1:
        raise ValueError("n_cand must be >= 1")
    plan = build_search_plan(ec, cb)
    search_metrics, cands, counters = _run_search(plan, n_cand, engine)
    tail = plan.tail_energy[np.arange(plan.K)[None, :], cands].sum(axis=1)
    return search_metrics - tail, cands, counters


def list_msd(ec: EffectiveChannel, cb: Codebook, sigma2: float, n_cand: int,
             clamp: float = DEFAULT_LLR_CLAMP,
             engine: str = "auto") -> tuple[LlrFrame, DetectionResult]:
    """Soft outputs from the list search plus the hard decision it implies.

    Bit LLRs follow the exhaustive formula with the hypothesis set
    restricted to the list; when the list leaves one side of a bit empty
    the LLR saturates at +/-clamp.
    """
    metrics, cands, counters = list_search(ec, cb, n_cand, engine)
    cfg = cb.cfg
    scores = -metrics / (2.0 * sigma2)
    llrs = _llr_fold_python(scores, cands, cfg.L_M, clamp)
    frame = LlrFrame(llrs=llrs, clamp=clamp, list_size=len(metrics))

    indices = cands[0]
    x_hat = cb.stacked_point(indices)
    bits = np.array([index_to_bits(int(a), cfg.L_M) for a in indices])
    hard = DetectionResult(indices=np.asarray(indices, dtype=np.int64), x_hat=x_hat,
                           bits=bits, metric=residual_metric(ec.y, ec.G, x_hat),
                           counters=counters)
    return frame, hard


def _llr_fold_python(scores: np.ndarray, cands: np.ndarray, L_M: int,
                     clamp: float) -> np.ndarray:
    K = cands.shape[1]
    llrs = np.zeros((K, L_M))
    for k in range(K):
        for m in range(L_M):
            bit = (cands[:, k] >> (L_M - 1 - m)) & 1
            acc0 = acc1 = -np.inf
            for s, b in zip(scores, bit):
                if b:
                    acc1 = max_star(acc1, s)
                else:
                    acc0 = max_star(acc0, s)
            if acc0 == -np.inf:
                llrs[k, m] = -clamp
            elif acc1 == -np.inf:
                llrs[k, m] = clamp
            else:
                llrs[k, m] = acc0 - acc1
    return llrs


# ---------------------------------------------------------------------------
# batched operations for Monte Carlo runs

def msd_detect_batch(Gs: np.ndarray, ys: np.ndarray, cb: Codebook):
    """Hard-detect a stack of frames: (B, K) indices plus counter arrays.

    Compiled-engine equivalent of calling msd_detect per frame; returns
    (indices, n_v1, n_v2, ops) with ops the per-frame add (= mult) count.
    """
    if not HAVE_NUMBA:
        raise RuntimeError("batched detection needs the compiled engine")
    tpl = plan_template(cb)
    row_gain, row_y = tpl.fill_batch(Gs, ys)
    metrics, cands, sizes, n_v1, n_v2, ops = search_batch_kernel(
        tpl.T, tpl.M, tpl.K, tpl.user_of_pos, tpl.user_pos, tpl.branch_pos,
        tpl.comp_val, tpl.has_identity, tpl.att_ptr, tpl.att_row, tpl.row_ptr,
        tpl.row_pos, tpl.row_cost, tpl.below_lb, row_gain, row_y, 1)
    return cands[:, 0, :], n_v1, n_v2, ops


def list_msd_batch(Gs: np.ndarray, ys: np.ndarray, cb: Codebook, sigma2: float,
                   n_cand: int, clamp: float = DEFAULT_LLR_CLAMP):
    """List-decode a stack of frames.

    Returns (llrs (B, K, L_M), hard indices (B, K), n_v1, n_v2, ops).
    """
    if not HAVE_NUMBA:
        raise RuntimeError("batched detection needs the compiled engine")
    tpl = plan_template(cb)
    row_gain, row_y = tpl.fill_batch(Gs, ys)
    metrics, cands, sizes, n_v1, n_v2, ops = search_batch_kernel(
        tpl.T, tpl.M, tpl.K, tpl.user_of_pos, tpl.user_pos, tpl.branch_pos,
        tpl.comp_val, tpl.has_identity, tpl.att_ptr, tpl.att_row, tpl.row_ptr,
        tpl.row_pos, tpl.row_cost, tpl.below_lb, row_gain, row_y, n_cand)
    llrs = llr_from_lists_kernel(metrics, cands, sizes, tpl.tail_energy,
                                 tpl.L_M, sigma2, clamp)
    return llrs, cands[:, 0, :], n_v1, n_v2, ops
