# slinalg.py - sparse kernels behind the Gauss-Newton step
#
# Matrices are scipy CSR matrices with sorted column indices and no stored
# zeros. The phase Hessian A^T W A is ordered with approximate minimum
# degree, its zero rows and columns (and any pinned unknowns) are cut off, and
# the remaining block gets a zero fill-in incomplete Cholesky factor that is
# reused every iteration.

import heapq
import logging
from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp
from numba import njit
from scipy.sparse.linalg import spsolve_triangular

from .sutils import FactorizationError, InvalidArgument, NumericalBreakdown

logger = logging.getLogger(__name__)

ICHOL_SHIFT = 1e-3
ICHOL_RETRIES = 3
PIVOT_TOL = 1e-12


def finalize_csr(S):
    S = sp.csr_matrix(S)
    S.sum_duplicates()
    S.eliminate_zeros()
    S.sort_indices()
    return S


def spmv(S, x):
    return S @ np.asarray(x, dtype=float)


def spmv_transpose(S, x):
    return S.T @ np.asarray(x, dtype=float)


def form_normal_matrix(A, w):
    """A^T diag(w) A, symmetrized so (i, j) and (j, i) agree bit for bit."""
    w = np.asarray(w, dtype=float)
    if w.shape != (A.shape[0],):
        raise InvalidArgument(
            "weights of length %d do not match %d rows" % (w.size, A.shape[0])
        )
    if A.shape[0] == 0:
        return sp.csr_matrix((A.shape[1], A.shape[1]))
    H = (A.T @ sp.diags(w) @ A).tocsr()
    H = (H + H.T) * 0.5
    return finalize_csr(H)


# Minimum degree on the quotient graph. Variables keep their remaining
# variable neighbours (adj) and the elements they touch (elems); an
# element is an eliminated pivot whose variable set is its column pattern
# in L. Degrees are the usual approximate external degree bound.


class _QuotientGraph(object):
    def __init__(self, S):
        S = sp.csr_matrix(S)
        n = S.shape[0]
        self.n = n
        self.adj = []
        for i in range(n):
            row = set(S.indices[S.indptr[i]:S.indptr[i + 1]].tolist())
            row.discard(i)
            self.adj.append(row)
        # structural symmetry
        for i in range(n):
            for j in self.adj[i]:
                self.adj[j].add(i)
        self.elems = [set() for _ in range(n)]
        self.members = {}
        self.eliminated = np.zeros(n, dtype=bool)

    def eliminate(self, p):
        """Eliminate p and return its column pattern below the diagonal."""
        pattern = set(self.adj[p])
        absorbed = self.elems[p]
        for e in absorbed:
            pattern |= self.members.pop(e)
        pattern.discard(p)
        self.eliminated[p] = True
        self.members[p] = pattern
        for i in pattern:
            self.adj[i].discard(p)
            self.adj[i] -= pattern
            self.elems[i] -= absorbed
            self.elems[i].add(p)
        self.adj[p] = set()
        self.elems[p] = set()
        return pattern

    def approximate_degree(self, i, p, remaining):
        pattern = self.members[p]
        degree = len(self.adj[i]) + len(pattern) - 1
        for e in self.elems[i]:
            if e != p:
                degree += len(self.members[e] - pattern)
        return min(degree, remaining - 1)


def _minimum_degree(S):
    graph = _QuotientGraph(S)
    n = graph.n
    degree = [len(a) for a in graph.adj]
    heap = [(degree[i], i) for i in range(n)]
    heapq.heapify(heap)
    order = []
    while heap:
        d, p = heapq.heappop(heap)
        if graph.eliminated[p] or d != degree[p]:
            continue
        pattern = graph.eliminate(p)
        order.append(p)
        remaining = n - len(order)
        for i in pattern:
            degree[i] = graph.approximate_degree(i, p, remaining)
            heapq.heappush(heap, (degree[i], i))
    return np.array(order, dtype=np.int64)


def active_rows(S):
    S = finalize_csr(S)
    return np.flatnonzero(np.diff(S.indptr) > 0)


def amd_ordering(S):
    """Permutation with the structurally nonzero rows first, AMD ordered.

    Rows and columns without entries follow in ascending order. Ties in the
    degree are broken by the smaller original index.
    """
    S = finalize_csr(S)
    n = S.shape[0]
    active = active_rows(S)
    inactive = np.setdiff1d(np.arange(n), active)
    if len(active) == 0:
        return inactive
    block = S[active][:, active]
    local = _minimum_degree(block)
    return np.concatenate([active[local], inactive]).astype(np.int64)


def symbolic_cholesky_nnz(S, perm=None):
    """Entries of the exact Cholesky factor of S[perm][:, perm], diagonal included."""
    S = finalize_csr(S)
    n = S.shape[0]
    if perm is None:
        perm = np.arange(n)
    graph = _QuotientGraph(S[perm][:, perm])
    total = n
    for p in range(n):
        total += len(graph.eliminate(p))
    return total


@njit(cache=True)
def _ichol0_kernel(indptr, indices, data, diag_pos, pivot_tol):
    # row-oriented IC(0) on the lower triangle, columns sorted per row
    n = len(indptr) - 1
    L = np.zeros(len(data))
    for i in range(n):
        for idx in range(indptr[i], diag_pos[i] + 1):
            k = indices[idx]
            s = data[idx]
            # sum over common columns j < k of rows i and k
            a = indptr[i]
            b = indptr[k]
            a_end = idx
            b_end = diag_pos[k]
            while a < a_end and b < b_end:
                ja = indices[a]
                jb = indices[b]
                if ja == jb:
                    s -= L[a] * L[b]
                    a += 1
                    b += 1
                elif ja < jb:
                    a += 1
                else:
                    b += 1
            if k < i:
                L[idx] = s / L[diag_pos[k]]
            else:
                if s <= pivot_tol * data[idx]:
                    return L, i
                L[idx] = np.sqrt(s)
    return L, -1


def ichol0(S_sub, shift=0.0):
    """Zero fill-in incomplete Cholesky factor of S_sub + shift I, or raise.

    A pivot counts as nonpositive when it drops below PIVOT_TOL times the
    matching diagonal entry.
    """
    S = finalize_csr(S_sub)
    n = S.shape[0]
    if shift:
        S = finalize_csr(S + shift * sp.identity(n, format="csr"))
    lower = finalize_csr(sp.tril(S))
    indptr = lower.indptr.astype(np.int64)
    indices = lower.indices.astype(np.int64)
    diag_pos = indptr[1:] - 1
    bad = (indptr[1:] == indptr[:-1])
    if n and (np.any(bad) or np.any(indices[diag_pos] != np.arange(n))):
        raise FactorizationError("ichol0 needs a stored diagonal in every row")
    values, failed = _ichol0_kernel(
        indptr, indices, lower.data.astype(float), diag_pos, PIVOT_TOL
    )
    if failed >= 0:
        raise FactorizationError("nonpositive pivot in row %d" % failed)
    return sp.csr_matrix((values, indices, indptr), shape=(n, n))


def pattern_residual(S, L):
    """max |L L^T - S| over the pattern of S, relative to max |S|."""
    S = finalize_csr(S)
    product = (L @ L.T).tocsr()
    coo = S.tocoo()
    diff = np.asarray(product[coo.row, coo.col]).ravel() - coo.data
    scale = np.abs(S.data).max() if S.nnz else 1.0
    return float(np.abs(diff).max() / scale) if S.nnz else 0.0


@dataclass(frozen=True)
class GNFactorization:
    perm: np.ndarray
    n_active: int
    L: sp.csr_matrix
    L_upper: sp.csr_matrix
    shift: float = 0.0

    @property
    def n(self):
        return len(self.perm)


def pin_unknowns(H, pinned):
    """H with the rows and columns listed in pinned emptied."""
    H = finalize_csr(H)
    pinned = np.asarray(pinned, dtype=np.int64).reshape(-1)
    if pinned.size == 0:
        return H
    n = H.shape[0]
    if pinned.min() < 0 or pinned.max() >= n:
        raise InvalidArgument("pinned unknowns must lie in [0, %d)" % n)
    keep = np.ones(n)
    keep[pinned] = 0.0
    D = sp.diags(keep)
    return finalize_csr(D @ H @ D)


def factorize_gn(H, pinned=()):
    """Permute, truncate and incompletely factor the Gauss-Newton matrix H.

    Unknowns in ``pinned`` are cut off together with the empty rows, so the
    step leaves them unchanged. Pinning one unknown per null direction of H
    makes the truncated block positive definite.

    Breakdown is handled by shifting the truncated block by sigma I with
    sigma = ICHOL_SHIFT * max diag, doubling on each retry.
    """
    H = pin_unknowns(H, pinned)
    perm = amd_ordering(H)
    n_active = len(active_rows(H))
    block = finalize_csr(H[perm[:n_active]][:, perm[:n_active]])
    shift = 0.0
    sigma = ICHOL_SHIFT * (block.diagonal().max() if n_active else 0.0)
    for attempt in range(ICHOL_RETRIES + 1):
        try:
            L = ichol0(block, shift)
            break
        except FactorizationError as error:
            if attempt == ICHOL_RETRIES:
                raise FactorizationError(
                    "ichol0 failed after %d shifts: %s" % (ICHOL_RETRIES, error)
                )
            shift = sigma * 2**attempt
            logger.warning("ichol0 breakdown (%s); retrying with shift %g", error, shift)
    logger.info(
        "factorized Gauss-Newton matrix: n=%d active=%d nnz(L)=%d shift=%g",
        H.shape[0], n_active, L.nnz, shift,
    )
    return GNFactorization(perm, n_active, L, finalize_csr(L.T), shift)


def solve_gn_step(fact, rhs):
    """Solve (L L^T) x = rhs on the active block; inactive entries stay 0."""
    rhs = np.asarray(rhs, dtype=float)
    if rhs.shape != (fact.n,):
        raise InvalidArgument("rhs of length %d, expected %d" % (rhs.size, fact.n))
    out = np.zeros(fact.n)
    if fact.n_active == 0:
        return out
    active = fact.perm[:fact.n_active]
    y = spsolve_triangular(fact.L, rhs[active], lower=True)
    out[active] = spsolve_triangular(fact.L_upper, y, lower=False)
    return out


@dataclass
class CGResult:
    x: np.ndarray
    iterations: int
    residual: float
    converged: bool
    history: list


def cg_solve(op, rhs, rel_tol=1e-1, max_iter=50):
    """Conjugate gradients for op(x) = rhs, op symmetric positive semi-definite.

    Stops when ||rhs - op(x)|| <= rel_tol ||rhs|| or after max_iter steps; a
    direction of zero curvature ends the iteration early with the current x.
    """
    if not (0 < rel_tol < 1):
        raise InvalidArgument("rel_tol must lie in (0, 1), found %s" % rel_tol)
    b = np.asarray(rhs, dtype=float)
    x = np.zeros_like(b)
    r = b.copy()
    rs = float(r @ r)
    bnorm = np.sqrt(rs)
    history = [bnorm]
    if bnorm == 0.0:
        return CGResult(x, 0, 0.0, True, history)
    target = rel_tol * bnorm
    p = r.copy()
    iterations = 0
    while iterations < max_iter:
        Ap = op(p)
        curvature = float(p @ Ap)
        if not (np.isfinite(curvature) and np.all(np.isfinite(Ap))):
            raise NumericalBreakdown("non-finite value in conjugate gradients")
        if curvature <= 0.0:
            break
        alpha = rs / curvature
        x = x + alpha * p
        r = r - alpha * Ap
        rs_new = float(r @ r)
        iterations += 1
        history.append(np.sqrt(rs_new))
        if np.sqrt(rs_new) <= target:
            rs = rs_new
            break
        p = r + (rs_new / rs) * p
        rs = rs_new
    residual = float(np.sqrt(rs))
    return CGResult(x, iterations, residual, residual <= target, history)
