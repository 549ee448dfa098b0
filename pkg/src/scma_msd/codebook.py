"""SCMA codebooks, mapping matrices and the weighted-QAM decomposition.

A codebook file is line-oriented text.  Blank lines and ``#`` comments are
ignored.  Grammar (all indices 1-based in the file)::

    version 1
    K <users>  N <resources>  dv <dims-per-user>  M <points-per-user>
    user <k> res <n_1> ... <n_dv>
    point <k> <bits> [re, im] [re, im] ...   # d_v complex entries

Each user needs one ``user`` line and exactly M ``point`` lines whose
``<bits>`` labels (MSB-first, length log2 M) are all distinct.  Point index
``a`` of user ``k`` is the point labelled with the binary expansion of
``a``.  The layer index of (user k, dimension l) is ``(k-1)*d_v + l``, so
the N x K' mapping matrix has a single 1 per column, at the resource that
dimension occupies.

Two codebooks ship with the package (see ``builtin_codebook``):

* ``qpsk-k6``  - 4-ary, K=6/N=4/d_v=2, unit-energy QPSK per layer with
  per-layer phase rotations chosen so superposed layers stay uniquely
  decodable on a gain-1 channel.
* ``qam16-k6`` - 16-QAM per layer, same mapping, decomposable into two
  weighted QPSK components.
"""

from dataclasses import dataclass, field
from importlib import resources
from itertools import combinations, product

import numpy as np

_NORM_SPREAD_TOL = 1e-9   # relative norm spread below this counts as constant modulus
_RECON_TOL = 1e-12        # absolute tolerance for exact weighted-QAM reconstruction

MODULUS_CONSTANT = "constant"
MODULUS_OMEGA = "omega-decomposable"
MODULUS_GENERAL = "general"


class CodebookError(ValueError):
    """Raised for malformed codebook files or violated structure invariants."""


@dataclass(frozen=True)
class SystemConfig:
    """Dimensions of an SCMA system and the quantities derived from them."""

    K: int
    N: int
    d_v: int
    M: int

    def __post_init__(self):
        if not (self.N < self.K):
            raise CodebookError(f"need N < K (overloaded system), got N={self.N}, K={self.K}")
        if not (0 < self.d_v < self.N):
            raise CodebookError(f"need 0 < d_v < N, got d_v={self.d_v}, N={self.N}")
        if self.M < 2 or self.M & (self.M - 1):
            raise CodebookError(f"M must be a power of 2, got {self.M}")
        if (self.d_v * self.K) % self.N:
            raise CodebookError("d_f * N = d_v * K must hold for a regular mapping")

    @property
    def K_prime(self) -> int:
        return self.d_v * self.K

    @property
    def d_f(self) -> int:
        return self.K_prime // self.N

    @property
    def L_M(self) -> int:
        return self.M.bit_length() - 1

    @property
    def n_hypotheses(self) -> int:
        return self.M ** self.K


@dataclass(frozen=True, eq=False)
class MappingMatrix:
    """Binary layer-to-resource map S and the structures derived from it."""

    S: np.ndarray                  # (N, K') int8, one 1 per column
    cfg: SystemConfig
    user_res: np.ndarray = field(init=False)   # (K, d_v) resource of each user dimension
    P: np.ndarray = field(init=False)           # (N, K) user-level indicator
    layer_sets: tuple = field(init=False)       # F_n, layers occupying each resource

    def __post_init__(self):
        S = np.asarray(self.S, dtype=np.int8)
        cfg = self.cfg
        if S.shape != (cfg.N, cfg.K_prime):
            raise CodebookError(f"S must be {cfg.N}x{cfg.K_prime}, got {S.shape}")
        if not np.all((S == 0) | (S == 1)):
            raise CodebookError("S must be binary")
        if not np.all(S.sum(axis=0) == 1):
            raise CodebookError("invalid mapping column: each column of S needs exactly one 1")
        row_occ = S.sum(axis=1)
        if not np.all(row_occ == cfg.d_f):
            raise CodebookError(f"each resource must carry d_f={cfg.d_f} layers, got {row_occ}")
        res_of_layer = np.argmax(S, axis=0)
        user_res = res_of_layer.reshape(cfg.K, cfg.d_v)
        for k in range(cfg.K):
            if len(set(user_res[k])) != cfg.d_v:
                raise CodebookError(f"user {k + 1} occupies a resource twice")
        P = np.zeros((cfg.N, cfg.K), dtype=np.int8)
        for k in range(cfg.K):
            P[user_res[k], k] = 1
        layer_sets = tuple(tuple(np.flatnonzero(S[n]).tolist()) for n in range(cfg.N))
        object.__setattr__(self, "S", S)
        object.__setattr__(self, "user_res", user_res)
        object.__setattr__(self, "P", P)
        object.__setattr__(self, "layer_sets", layer_sets)

    def user_block(self, k: int) -> np.ndarray:
        """S_k, the N x d_v block of user k (0-based)."""
        d_v = self.cfg.d_v
        return self.S[:, k * d_v:(k + 1) * d_v]

    @property
    def is_upper_triangular(self) -> bool:
        """True when the first N columns of S form the identity."""
        N = self.cfg.N
        return bool(np.array_equal(self.S[:, :N], np.eye(N, dtype=np.int8)))


@dataclass(frozen=True)
class OmegaDecomposition:
    """Factorization x = Omega x' with x' drawn from one scaled QPSK alphabet."""

    m: int
    weights: np.ndarray          # (m,) = [2^(m-1), ..., 1]
    base_alphabet: np.ndarray    # (4,) scaled QPSK points, entries of x'
    components: np.ndarray       # (K, M, d_v, m) complex, per-point components
    cfg: SystemConfig

    def omega_matrix(self) -> np.ndarray:
        """The K' x mK' block-diagonal weight matrix."""
        Kp, m = self.cfg.K_prime, self.m
        O = np.zeros((Kp, m * Kp))
        for kp in range(Kp):
            O[kp, kp * m:(kp + 1) * m] = self.weights
        return O

    def expand_points(self) -> np.ndarray:
        """Per-user points flattened to the decomposed coordinates (K, M, d_v*m)."""
        K, M, d_v, m = self.components.shape
        return self.components.reshape(K, M, d_v * m)


@dataclass(frozen=True, eq=False)
class Codebook:
    """Per-user constellations plus the mapping structure they live on."""

    cfg: SystemConfig
    mapping: MappingMatrix
    points: np.ndarray           # (K, M, d_v) complex
    modulus_class: str = field(init=False)
    omega: OmegaDecomposition | None = field(init=False)

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=np.complex128)
        if pts.shape != (self.cfg.K, self.cfg.M, self.cfg.d_v):
            raise CodebookError(f"points must be (K, M, d_v), got {pts.shape}")
        object.__setattr__(self, "points", pts)
        norms = np.sum(np.abs(pts) ** 2, axis=2)
        spread = norms.max() - norms.min()
        if spread <= _NORM_SPREAD_TOL * max(norms.max(), 1e-300):
            cls, omega = MODULUS_CONSTANT, None
        else:
            try:
                omega = omega_decompose(self)
                cls = MODULUS_OMEGA
            except CodebookError:
                cls, omega = MODULUS_GENERAL, None
        object.__setattr__(self, "modulus_class", cls)
        object.__setattr__(self, "omega", omega)

    def map_bits(self, bits, k: int) -> np.ndarray:
        """Map L_M bits (MSB first) of user k (0-based) to its d_v-dim point."""
        bits = np.asarray(bits, dtype=int).ravel()
        if bits.size != self.cfg.L_M:
            raise CodebookError(f"expected {self.cfg.L_M} bits, got {bits.size}")
        return self.points[k, bits_to_index(bits)]

    def index_of_point(self, point: np.ndarray, k: int) -> int:
        """Inverse of map_bits up to the point index; exact match required."""
        match = np.flatnonzero(np.all(self.points[k] == np.asarray(point), axis=1))
        if match.size != 1:
            raise CodebookError("point is not a codeword of this user")
        return int(match[0])

    @property
    def avg_codeword_energy(self) -> float:
        """Average ||x_k||^2 of one user codeword over uniform symbols."""
        return float(np.mean(np.abs(self.points) ** 2) * self.cfg.d_v)

    def stacked_point(self, indices) -> np.ndarray:
        """K' symbol vector for per-user point indices."""
        return np.concatenate([self.points[k, a] for k, a in enumerate(indices)])


def bits_to_index(bits) -> int:
    """MSB-first bit vector to integer."""
    out = 0
    for b in bits:
        out = (out << 1) | int(b)
    return out


def index_to_bits(idx: int, width: int) -> np.ndarray:
    """Integer to MSB-first bit vector of the given width."""
    return np.array([(idx >> (width - 1 - i)) & 1 for i in range(width)], dtype=np.int8)


# ---------------------------------------------------------------------------
# file parsing

def loads_codebook(text: str) -> Codebook:
    """Parse codebook file contents; see the module docstring for the grammar."""
    header: dict[str, int] = {}
    user_lines: dict[int, list[int]] = {}
    point_lines: dict[int, dict[str, np.ndarray]] = {}

    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        tok = line.split()
        try:
            if tok[0] == "version":
                if tok[1] != "1":
                    raise CodebookError(f"unsupported codebook version {tok[1]}")
            elif tok[0] in ("K", "N", "dv", "M"):
                header[tok[0]] = int(tok[1])
            elif tok[0] == "user":
                k = int(tok[1])
                if tok[2] != "res":
                    raise CodebookError("expected 'user <k> res <n...>'")
                user_lines[k] = [int(t) for t in tok[3:]]
            elif tok[0] == "point":
                k, bits = int(tok[1]), tok[2]
                if set(bits) - {"0", "1"}:
                    raise CodebookError(f"bad bit label {bits!r} at line {lineno}")
                user_pts = point_lines.setdefault(k, {})
                if bits in user_pts:
                    raise CodebookError(f"duplicate bit label {bits!r} for user {k}")
                user_pts[bits] = _parse_complex_entries(line)
            else:
                raise CodebookError(f"unknown directive {tok[0]!r}")
        except (IndexError, ValueError) as exc:
            if isinstance(exc, CodebookError):
                raise
            raise CodebookError(f"parse failure at line {lineno}: {raw!r}") from exc

    missing = {"K", "N", "dv", "M"} - set(header)
    if missing:
        raise CodebookError(f"missing header fields: {sorted(missing)}")
    cfg = SystemConfig(K=header["K"], N=header["N"], d_v=header["dv"], M=header["M"])

    S = np.zeros((cfg.N, cfg.K_prime), dtype=np.int8)
    for k in range(1, cfg.K + 1):
        if k not in user_lines:
            raise CodebookError(f"missing 'user {k}' line")
        res = user_lines[k]
        if len(res) != cfg.d_v or not all(1 <= n <= cfg.N for n in res):
            raise CodebookError(f"user {k}: need {cfg.d_v} resource indices in 1..{cfg.N}")
        for l, n in enumerate(res):
            S[n - 1, (k - 1) * cfg.d_v + l] = 1
    mapping = MappingMatrix(S=S, cfg=cfg)

    points = np.zeros((cfg.K, cfg.M, cfg.d_v), dtype=np.complex128)
    for k in range(1, cfg.K + 1):
        pts = point_lines.get(k, {})
        if any(len(b) != cfg.L_M for b in pts):
            raise CodebookError(f"user {k}: bit labels must have length {cfg.L_M}")
        if sorted(int(b, 2) for b in pts) != list(range(cfg.M)):
            raise CodebookError(f"user {k}: need {cfg.M} points with distinct bit labels")
        for bits, entries in pts.items():
            if entries.size != cfg.d_v:
                raise CodebookError(f"user {k}: each point needs {cfg.d_v} [re, im] entries")
            points[k - 1, int(bits, 2)] = entries
    return Codebook(cfg=cfg, mapping=mapping, points=points)


def _parse_complex_entries(line: str) -> np.ndarray:
    vals = []
    rest = line
    while "[" in rest:
        start = rest.index("[")
        end = rest.index("]", start)
        re_s, im_s = rest[start + 1:end].split(",")
        vals.append(complex(float(re_s), float(im_s)))
        rest = rest[end + 1:]
    return np.array(vals, dtype=np.complex128)


def load_codebook(path) -> Codebook:
    """Load and validate a codebook file from disk."""
    with open(path, "r", encoding="utf-8") as fh:
        return loads_codebook(fh.read())


def builtin_codebook(name: str) -> Codebook:
    """Load one of the shipped codebooks: 'qpsk-k6' or 'qam16-k6'."""
    fname = {"qpsk-k6": "qpsk_k6.cbk", "qam16-k6": "qam16_k6.cbk"}.get(name)
    if fname is None:
        raise CodebookError(f"unknown built-in codebook {name!r}")
    text = resources.files("scma_msd.data").joinpath(fname).read_text(encoding="utf-8")
    return loads_codebook(text)


def dumps_codebook(cb: Codebook, comment: str = "") -> str:
    """Serialize a codebook back to the file format (17 significant digits)."""
    cfg = cb.cfg
    out = []
    if comment:
        out += [f"# {line}" for line in comment.splitlines()]
    out.append("version 1")
    out.append(f"K {cfg.K}")
    out.append(f"N {cfg.N}")
    out.append(f"dv {cfg.d_v}")
    out.append(f"M {cfg.M}")
    for k in range(cfg.K):
        res = " ".join(str(n + 1) for n in cb.mapping.user_res[k])
        out.append(f"user {k + 1} res {res}")
    for k in range(cfg.K):
        for a in range(cfg.M):
            bits = "".join(str(b) for b in index_to_bits(a, cfg.L_M))
            entries = " ".join(f"[{z.real:.17g}, {z.imag:.17g}]" for z in cb.points[k, a])
            out.append(f"point {k + 1} {bits} {entries}")
    return "\n".join(out) + "\n"


# ---------------------------------------------------------------------------
# upper-triangular relabeling

@dataclass(frozen=True)
class Relabeling:
    """Permutations taking the original labels to the relabeled system.

    ``user_perm[i] = k`` means new user i is original user k (0-based);
    ``re_perm[n] = r`` means new resource n is original resource r.
    """

    user_perm: tuple
    re_perm: tuple

    @property
    def is_identity(self) -> bool:
        return all(i == k for i, k in enumerate(self.user_perm)) and \
            all(i == r for i, r in enumerate(self.re_perm))

    def to_original_user_order(self, per_user: np.ndarray) -> np.ndarray:
        """Reorder a leading per-user axis back to the original user labels."""
        out = np.empty_like(per_user)
        for new, orig in enumerate(self.user_perm):
            out[orig] = per_user[new]
        return out


def relabel_upper_triangular(mapping: MappingMatrix) -> tuple[Relabeling, MappingMatrix]:
    """Permute users (and resources if needed) so the first N columns of S are I.

    Tries a pure user permutation first: the front slots must be filled by
    users whose resources are exactly (i-1)d_v+1..i*d_v in order.  Failing
    that, searches for N/d_v mutually orthogonal users and relabels the
    resources after them.  Raises when no orthogonal subset exists; making
    S triangular by relabeling individual layers is not supported.
    """
    cfg = mapping.cfg
    n_front = cfg.N // cfg.d_v
    users = list(range(cfg.K))

    # user-only permutation: slot i wants literal resources (i*d_v .. i*d_v+d_v-1)
    front: list[int] = []
    for i in range(n_front):
        want = tuple(range(i * cfg.d_v, (i + 1) * cfg.d_v))
        cand = [k for k in users if tuple(mapping.user_res[k]) == want and k not in front]
        if not cand:
            front = []
            break
        front.append(cand[0])
    if front:
        return _apply_relabeling(mapping, front, tuple(range(cfg.N)))

    # general: any N/d_v users with pairwise disjoint resources, then relabel REs
    for subset in combinations(users, n_front):
        seen: set[int] = set()
        ok = True
        for k in subset:
            res = set(mapping.user_res[k].tolist())
            if seen & res:
                ok = False
                break
            seen |= res
        if ok:
            re_order = tuple(int(r) for k in subset for r in mapping.user_res[k])
            return _apply_relabeling(mapping, list(subset), re_order)
    raise CodebookError(
        "no orthogonal user subset found; layer-level relabeling is not supported")


def _apply_relabeling(mapping: MappingMatrix, front: list, re_order: tuple):
    cfg = mapping.cfg
    rest = [k for k in range(cfg.K) if k not in front]
    user_perm = tuple(front + rest)
    relab = Relabeling(user_perm=user_perm, re_perm=re_order)
    inv_re = np.empty(cfg.N, dtype=int)
    for new, orig in enumerate(re_order):
        inv_re[orig] = new
    cols = np.concatenate([np.arange(k * cfg.d_v, (k + 1) * cfg.d_v) for k in user_perm])
    S_new = np.zeros_like(mapping.S)
    S_src = mapping.S[:, cols]
    for orig in range(cfg.N):
        S_new[inv_re[orig]] = S_src[orig]
    new_mapping = MappingMatrix(S=S_new, cfg=cfg)
    if not new_mapping.is_upper_triangular:
        raise CodebookError("relabeling failed to produce an upper-triangular S")
    return relab, new_mapping


def apply_relabeling_to_codebook(cb: Codebook, relab: Relabeling,
                                 mapping: MappingMatrix) -> Codebook:
    """Codebook with users reordered to match a relabeled mapping."""
    return Codebook(cfg=cb.cfg, mapping=mapping,
                    points=cb.points[list(relab.user_perm)])


# ---------------------------------------------------------------------------
# weighted-QAM decomposition

def omega_decompose(cb: Codebook) -> OmegaDecomposition:
    """Factor every constellation entry as sum_j 2^(j-1) v'_j, v' in scaled QPSK.

    The scale is inferred from the largest entry coordinate; each scalar is
    then matched exhaustively against all 4^m weighted QPSK combinations
    (M <= 64 keeps this tiny).  Raises CodebookError when M is not a power
    of 4 or some entry has no exact representation.
    """
    cfg = cb.cfg
    m = 0
    M = cfg.M
    while M > 1:
        if M % 4:
            raise CodebookError(
                "general modulus; MSD optimality not guaranteed (M is not 4^m)")
        M //= 4
        m += 1
    if m == 0:
        raise CodebookError("general modulus; MSD optimality not guaranteed")

    entries = cb.points.ravel()
    peak = max(np.abs(entries.real).max(), np.abs(entries.imag).max())
    if peak <= 0:
        raise CodebookError("degenerate all-zero constellation")
    scale = peak / (2 ** m - 1)
    base = scale * np.array([1 + 1j, 1 - 1j, -1 + 1j, -1 - 1j])
    weights = np.array([2.0 ** (m - 1 - j) for j in range(m)])

    combos = list(product(range(4), repeat=m))
    combo_vals = np.array([sum(w * base[c] for w, c in zip(weights, cc)) for cc in combos])

    components = np.zeros((cfg.K, cfg.M, cfg.d_v, m), dtype=np.complex128)
    tol = _RECON_TOL * max(1.0, 2.0 ** m)
    for k in range(cfg.K):
        for a in range(cfg.M):
            for l in range(cfg.d_v):
                v = cb.points[k, a, l]
                hit = np.flatnonzero(np.abs(combo_vals - v) <= tol)
                if hit.size == 0:
                    raise CodebookError(
                        "general modulus; MSD optimality not guaranteed "
                        f"(entry {v} of user {k + 1} is not a weighted QPSK sum)")
                components[k, a, l] = base[list(combos[hit[0]])]
    return OmegaDecomposition(m=m, weights=weights, base_alphabet=base,
                              components=components, cfg=cfg)


# ---------------------------------------------------------------------------
# shipped codebook construction

def make_repetition_qam_codebook(M: int, rotations: bool) -> Codebook:
    """K=6/N=4/d_v=2 codebook where each user repeats one M-QAM symbol.

    With ``rotations`` each layer gets a phase offset of rank*pi/(2*d_f)
    among the layers sharing its resource, which keeps the superposition
    uniquely decodable even on an all-ones channel.  Rotations are omitted
    for M > 4 so the weighted-QPSK factorization stays available.
    """
    cfg = SystemConfig(K=6, N=4, d_v=2, M=M)
    user_res = [(1, 2), (3, 4), (1, 3), (1, 4), (2, 3), (2, 4)]
    S = np.zeros((cfg.N, cfg.K_prime), dtype=np.int8)
    for k, res in enumerate(user_res):
        for l, n in enumerate(res):
            S[n - 1, k * cfg.d_v + l] = 1
    mapping = MappingMatrix(S=S, cfg=cfg)

    m = 0
    MM = M
    while MM > 1:
        MM //= 4
        m += 1
    qpsk = np.array([1 + 1j, 1 - 1j, -1 + 1j, -1 - 1j])
    weights = [2 ** (m - 1 - j) for j in range(m)]
    syms = np.zeros(M, dtype=np.complex128)
    for a in range(M):
        digits = [(a >> (2 * (m - 1 - j))) & 3 for j in range(m)]
        syms[a] = sum(w * qpsk[d] for w, d in zip(weights, digits))
    syms /= np.sqrt(np.mean(np.abs(syms) ** 2))

    phase = np.zeros((cfg.K, cfg.d_v))
    if rotations:
        rank = {n: 0 for n in range(cfg.N)}
        for kp in range(cfg.K_prime):
            n = int(np.argmax(S[:, kp]))
            k, l = divmod(kp, cfg.d_v)
            phase[k, l] = rank[n] * np.pi / (2 * cfg.d_f)
            rank[n] += 1
    points = np.exp(1j * phase)[:, None, :] * syms[None, :, None]
    return Codebook(cfg=cfg, mapping=mapping, points=points)
