"""Compiled inner loops of the sphere search.

Same algorithm as the reference walk in msd.py, restated iteratively over
flat arrays so numba can compile it: an explicit stack of (child order,
child increments, entry metric) per level, a bounded max-heap holding the
current leaf list, and a radius equal to the worst kept leaf once the
list is full.  The batch entry point runs a stack of frames that share
one tree layout and differ only in row gains and observations.  Tests pin
this path against the reference walk, including the visited-layer
counters.
"""

import math

import numpy as np

try:
    from numba import njit
    HAVE_NUMBA = True
except ImportError:  # pragma: no cover
    HAVE_NUMBA = False

    def njit(*args, **kwargs):
        if len(args) == 1 and callable(args[0]):
            return args[0]

        def wrap(f):
            return f
        return wrap


@njit(cache=True, inline="always")
def _worse(m1, c1, m2, c2):
    """Strict ordering: is leaf 1 worse than leaf 2?  Ties on the metric
    compare index tuples so the heap root is always the discard candidate."""
    if m1 != m2:
        return m1 > m2
    for k in range(c1.shape[0]):
        if c1[k] != c2[k]:
            return c1[k] > c2[k]
    return False


@njit(cache=True)
def _heap_swap(heap_m, heap_c, i, j):
    tm = heap_m[i]
    heap_m[i] = heap_m[j]
    heap_m[j] = tm
    for k in range(heap_c.shape[1]):
        tc = heap_c[i, k]
        heap_c[i, k] = heap_c[j, k]
        heap_c[j, k] = tc


@njit(cache=True)
def _sift_up(heap_m, heap_c, i):
    while i > 0:
        p = (i - 1) // 2
        if _worse(heap_m[i], heap_c[i], heap_m[p], heap_c[p]):
            _heap_swap(heap_m, heap_c, i, p)
            i = p
        else:
            break


@njit(cache=True)
def _sift_down(heap_m, heap_c, size):
    i = 0
    while True:
        l = 2 * i + 1
        r = l + 1
        top = i
        if l < size and _worse(heap_m[l], heap_c[l], heap_m[top], heap_c[top]):
            top = l
        if r < size and _worse(heap_m[r], heap_c[r], heap_m[top], heap_c[top]):
            top = r
        if top == i:
            break
        _heap_swap(heap_m, heap_c, i, top)
        i = top


@njit(cache=True)
def _heap_sort(heap_m, heap_c, size):
    """In-place sort ascending by (metric, index tuple): pop worst to the end."""
    n = size
    while n > 1:
        n -= 1
        _heap_swap(heap_m, heap_c, 0, n)
        # re-sift the root over the shrunk heap
        i = 0
        while True:
            l = 2 * i + 1
            r = l + 1
            top = i
            if l < n and _worse(heap_m[l], heap_c[l], heap_m[top], heap_c[top]):
                top = l
            if r < n and _worse(heap_m[r], heap_c[r], heap_m[top], heap_c[top]):
                top = r
            if top == i:
                break
            _heap_swap(heap_m, heap_c, i, top)
            i = top


@njit(cache=True, inline="always")
def _increment(pos, xhat, has_identity, att_ptr, att_row, row_y, row_ptr,
               row_pos, row_gain, row_cost, counts):
    """Metric increase at one position: the identity-row energy (unless an
    observation row displaced it) plus the residuals of observation rows
    evaluated here.  counts[0]/counts[1] accumulate head/tail visits,
    counts[2] the add (= mult) tally scaled by 2 to stay integral."""
    inc = 0.0
    if has_identity[pos]:
        e = xhat[pos]
        inc += e.real * e.real + e.imag * e.imag
        counts[1] += 1
        counts[2] += 2
    for t in range(att_ptr[pos], att_ptr[pos + 1]):
        r = att_row[t]
        e = row_y[r]
        for u in range(row_ptr[r], row_ptr[r + 1]):
            e -= row_gain[u] * xhat[row_pos[u]]
        inc += e.real * e.real + e.imag * e.imag
        counts[0] += 1
        counts[2] += row_cost[r]
    return inc


@njit(cache=True)
def _search_one(T, M, K, user_of_pos, user_pos, branch_pos, comp_val,
                has_identity, att_ptr, att_row, row_ptr, row_pos, row_cost,
                below_lb, row_gain, row_y, n_cand, heap_m, heap_c,
                xhat, indices, child_inc, child_cand, child_cnt, child_ptr,
                entry_d1, counts):
    Q = user_pos.shape[1]
    heap_size = 0
    radius = np.inf

    level = 0
    entry_d1[0] = 0.0
    pos = T - 1
    u = user_of_pos[pos]
    # the top position is always the first searched user's branch position
    for a in range(M):
        for qi in range(Q):
            xhat[user_pos[u, qi]] = comp_val[u, a, qi]
        inc = _increment(pos, xhat, has_identity, att_ptr, att_row, row_y,
                         row_ptr, row_pos, row_gain, row_cost, counts)
        j = a
        while j > 0 and child_inc[0, j - 1] > inc:
            child_inc[0, j] = child_inc[0, j - 1]
            child_cand[0, j] = child_cand[0, j - 1]
            j -= 1
        child_inc[0, j] = inc
        child_cand[0, j] = a
    child_cnt[0] = M
    child_ptr[0] = 0

    while level >= 0:
        if child_ptr[level] >= child_cnt[level]:
            level -= 1
            continue
        pos = T - 1 - level
        j = child_ptr[level]
        inc = child_inc[level, j]
        d1 = entry_d1[level] + inc
        if heap_size == n_cand and d1 + below_lb[pos] > radius:
            child_ptr[level] = child_cnt[level]   # children sorted: rest fail too
            continue
        child_ptr[level] += 1
        a = child_cand[level, j]
        u = user_of_pos[pos]
        if pos == branch_pos[u]:
            indices[u] = a
            for qi in range(Q):
                xhat[user_pos[u, qi]] = comp_val[u, a, qi]

        if pos == 0:
            # leaf
            if heap_size < n_cand:
                heap_m[heap_size] = d1
                for k in range(K):
                    heap_c[heap_size, k] = indices[k]
                _sift_up(heap_m, heap_c, heap_size)
                heap_size += 1
                if heap_size == n_cand:
                    radius = heap_m[0]
            elif d1 < heap_m[0] or (d1 == heap_m[0]
                                    and _worse(heap_m[0], heap_c[0], d1, indices)):
                heap_m[0] = d1
                for k in range(K):
                    heap_c[0, k] = indices[k]
                _sift_down(heap_m, heap_c, heap_size)
                radius = heap_m[0]
            continue

        # descend and open the next level
        level += 1
        entry_d1[level] = d1
        pos2 = T - 1 - level
        u2 = user_of_pos[pos2]
        if pos2 == branch_pos[u2]:
            for a2 in range(M):
                for qi in range(Q):
                    xhat[user_pos[u2, qi]] = comp_val[u2, a2, qi]
                inc2 = _increment(pos2, xhat, has_identity, att_ptr, att_row,
                                  row_y, row_ptr, row_pos, row_gain, row_cost,
                                  counts)
                jj = a2
                while jj > 0 and child_inc[level, jj - 1] > inc2:
                    child_inc[level, jj] = child_inc[level, jj - 1]
                    child_cand[level, jj] = child_cand[level, jj - 1]
                    jj -= 1
                child_inc[level, jj] = inc2
                child_cand[level, jj] = a2
            child_cnt[level] = M
        else:
            child_cand[level, 0] = indices[u2]
            child_inc[level, 0] = _increment(pos2, xhat, has_identity, att_ptr,
                                             att_row, row_y, row_ptr, row_pos,
                                             row_gain, row_cost, counts)
            child_cnt[level] = 1
        child_ptr[level] = 0

    _heap_sort(heap_m, heap_c, heap_size)
    return heap_size


@njit(cache=True)
def search_batch_kernel(T, M, K, user_of_pos, user_pos, branch_pos, comp_val,
                        has_identity, att_ptr, att_row, row_ptr, row_pos,
                        row_cost, below_lb, row_gain_all, row_y_all, n_cand):
    """Run the search over a stack of frames sharing one tree layout.

    Returns (metrics (B, n_cand), cands (B, n_cand, K), sizes, n_v1, n_v2,
    ops); per frame only the first sizes[b] list entries are valid, sorted
    ascending by (metric, index tuple).
    """
    B = row_gain_all.shape[0]
    metrics = np.full((B, n_cand), np.inf)
    cands = np.zeros((B, n_cand, K), dtype=np.int32)
    sizes = np.zeros(B, dtype=np.int64)
    n_v1 = np.zeros(B, dtype=np.int64)
    n_v2 = np.zeros(B, dtype=np.int64)
    ops = np.zeros(B, dtype=np.float64)

    xhat = np.zeros(T, dtype=np.complex128)
    indices = np.zeros(K, dtype=np.int32)
    child_inc = np.zeros((T, M), dtype=np.float64)
    child_cand = np.zeros((T, M), dtype=np.int32)
    child_cnt = np.zeros(T, dtype=np.int32)
    child_ptr = np.zeros(T, dtype=np.int32)
    entry_d1 = np.zeros(T, dtype=np.float64)
    counts = np.zeros(3, dtype=np.int64)

    for b in range(B):
        counts[0] = 0
        counts[1] = 0
        counts[2] = 0
        sizes[b] = _search_one(T, M, K, user_of_pos, user_pos, branch_pos,
                               comp_val, has_identity, att_ptr, att_row,
                               row_ptr, row_pos, row_cost, below_lb,
                               row_gain_all[b], row_y_all[b], n_cand,
                               metrics[b], cands[b], xhat, indices, child_inc,
                               child_cand, child_cnt, child_ptr, entry_d1,
                               counts)
        n_v1[b] = counts[0]
        n_v2[b] = counts[1]
        ops[b] = counts[2]
    return metrics, cands, sizes, n_v1, n_v2, ops


@njit(cache=True)
def factored_ml_kernel(y, tail_val, tail_re, head_val, head_re, M):
    """Exact ML by enumerating tail users and minimizing heads independently.

    tail_val[j, l, a] is the received contribution of tail user j's
    candidate a on resource tail_re[j, l]; head users (pairwise orthogonal)
    are scored against the residual.  Returns the lowest-index optimal
    tuple (heads then tails), matching lexicographic tie-breaking.
    """
    n_tail, d_v = tail_re.shape
    n_head = head_re.shape[0]
    N = y.shape[0]
    K = n_head + n_tail

    digits = np.zeros(n_tail, dtype=np.int32)
    r = np.empty(N, dtype=np.complex128)
    best_tuple = np.zeros(K, dtype=np.int32)
    cur_tuple = np.zeros(K, dtype=np.int32)
    best_total = np.inf
    n_combos = M ** n_tail

    for c in range(n_combos):
        for n in range(N):
            r[n] = y[n]
        for j in range(n_tail):
            a = digits[j]
            for l in range(d_v):
                r[tail_re[j, l]] -= tail_val[j, l, a]
        total = 0.0
        for k in range(n_head):
            best_cost = np.inf
            best_a = 0
            for a in range(M):
                cost = 0.0
                for l in range(d_v):
                    e = r[head_re[k, l]] - head_val[k, l, a]
                    cost += e.real * e.real + e.imag * e.imag
                if cost < best_cost:
                    best_cost = cost
                    best_a = a
            cur_tuple[k] = best_a
            total += best_cost
        if total < best_total:
            best_total = total
            for k in range(n_head):
                best_tuple[k] = cur_tuple[k]
            for j in range(n_tail):
                best_tuple[n_head + j] = digits[j]
        elif total == best_total:
            lower = False
            decided = False
            for k in range(K):
                v = cur_tuple[k] if k < n_head else digits[k - n_head]
                if v != best_tuple[k]:
                    lower = v < best_tuple[k]
                    decided = True
                    break
            if decided and lower:
                for k in range(n_head):
                    best_tuple[k] = cur_tuple[k]
                for j in range(n_tail):
                    best_tuple[n_head + j] = digits[j]
        # odometer, last digit fastest (lexicographic combo order)
        j = n_tail - 1
        while j >= 0:
            digits[j] += 1
            if digits[j] < M:
                break
            digits[j] = 0
            j -= 1
    return best_tuple


@njit(cache=True, inline="always")
def _max_star(a, b):
    if a == -np.inf:
        return b
    if b == -np.inf:
        return a
    d = a - b
    if d < 0.0:
        d = -d
    return max(a, b) + math.log1p(math.exp(-d))


@njit(cache=True)
def llr_from_lists_kernel(metrics, cands, sizes, tail_energy, L_M, sigma2, clamp):
    """Fold max* over each frame's list to get (B, K, L_M) bit LLRs.

    The stored metrics are search metrics; each leaf's identity-block
    energy is removed before scoring so the exponent matches the
    exhaustive formula.
    """
    B, n_cand, K = cands.shape
    out = np.empty((B, K, L_M))
    acc0 = np.empty((K, L_M))
    acc1 = np.empty((K, L_M))
    for b in range(B):
        for k in range(K):
            for m in range(L_M):
                acc0[k, m] = -np.inf
                acc1[k, m] = -np.inf
        for i in range(sizes[b]):
            tail = 0.0
            for k in range(K):
                tail += tail_energy[k, cands[b, i, k]]
            s = -(metrics[b, i] - tail) / (2.0 * sigma2)
            for k in range(K):
                c = cands[b, i, k]
                for m in range(L_M):
                    if (c >> (L_M - 1 - m)) & 1:
                        acc1[k, m] = _max_star(acc1[k, m], s)
                    else:
                        acc0[k, m] = _max_star(acc0[k, m], s)
        for k in range(K):
            for m in range(L_M):
                if acc0[k, m] == -np.inf:
                    out[b, k, m] = -clamp
                elif acc1[k, m] == -np.inf:
                    out[b, k, m] = clamp
                else:
                    out[b, k, m] = acc0[k, m] - acc1[k, m]
    return out
