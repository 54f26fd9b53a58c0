"""Patch-grid graphs from the shift scaffold, gate thresholds and KNN, plus
clustering coefficient and adjacency spectral gap."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp

from .agc import GATE_EPS, GatingParams, scaffold_shifts

DENSE_LIMIT = 1024
POWER_TOL = 1e-10
POWER_MAX_ITER = 10000


class ConvergenceError(RuntimeError):
    def __init__(self, iterations: int, which: str):
        super().__init__(f"power iteration for {which} did not converge in {iterations} iterations")
        self.iterations = iterations


@dataclass
class AdjacencyMatrix:
    """Symmetric boolean adjacency over nodes ``row * w + col``.

    ``ops`` counts the per-graph work of the construction policy: shift
    evaluations for scaffold/gated graphs, pairwise distances for KNN.
    """

    edges: np.ndarray
    h: int = 0
    w: int = 0
    ops: int = 0

    def __post_init__(self):
        e = np.asarray(self.edges, dtype=bool)
        if e.ndim != 2 or e.shape[0] != e.shape[1]:
            raise ValueError("adjacency must be square")
        if not np.array_equal(e, e.T):
            raise ValueError("adjacency must be symmetric")
        if e.diagonal().any():
            raise ValueError("adjacency must not contain self-loops")
        self.edges = e

    @property
    def n_nodes(self) -> int:
        return self.edges.shape[0]

    @property
    def degrees(self) -> np.ndarray:
        return self.edges.sum(axis=1)

    @property
    def n_edges(self) -> int:
        return int(self.edges.sum()) // 2

    @classmethod
    def from_directed(cls, directed: np.ndarray, **kw) -> "AdjacencyMatrix":
        d = np.asarray(directed, dtype=bool)
        sym = d | d.T
        np.fill_diagonal(sym, False)
        return cls(sym, **kw)


@dataclass
class GraphMetrics:
    clustering: float
    spectral_gap: float
    lambda1: float
    lambda2: float
    method: str = "dense"
    iterations: int = 0


def _grid_index(h: int, w: int) -> np.ndarray:
    return np.arange(h * w).reshape(h, w)


def _shift_targets(h: int, w: int, axis: str, offset: int) -> np.ndarray:
    # roll(X, -s) places pixel p + s at p, so node p sees p + s
    idx = _grid_index(h, w)
    ax = 0 if axis == "height" else 1
    return np.roll(idx, -offset, axis=ax).reshape(-1)


def build_scaffold_graph(h: int, w: int, k: int) -> AdjacencyMatrix:
    shifts = scaffold_shifts(h, w, k)
    n = h * w
    directed = np.zeros((n, n), dtype=bool)
    src = np.arange(n)
    ops = 0
    for s in shifts:
        directed[src, _shift_targets(h, w, s.axis, s.offset)] = True
        ops += n
    return AdjacencyMatrix.from_directed(directed, h=h, w=w, ops=ops)


def build_gated_graph(x, k: int, params: GatingParams | float, tau: float = 0.5) -> AdjacencyMatrix:
    """Scaffold graph whose long-range edges survive only when gate >= tau."""
    if not 0 < tau <= 1:
        raise ValueError(f"tau must lie in (0, 1], got {tau}")
    feats = np.asarray(getattr(x, "data", x), dtype=np.float64)[0]
    c, h, w = feats.shape
    if isinstance(params, GatingParams):
        t_eff = abs(params.value) + params.eps
    else:
        t_eff = abs(float(params)) + GATE_EPS
    shifts = scaffold_shifts(h, w, k)
    n = h * w
    flat = feats.reshape(c, n)
    directed = np.zeros((n, n), dtype=bool)
    src = np.arange(n)
    ops = 0
    for s in shifts:
        ops += n
        dst = _shift_targets(h, w, s.axis, s.offset)
        if s.gated:
            d = np.abs(flat - flat[:, dst]).sum(axis=0)
            keep = np.exp(-d / t_eff) >= tau
            directed[src[keep], dst[keep]] = True
        else:
            directed[src, dst] = True
    return AdjacencyMatrix.from_directed(directed, h=h, w=w, ops=ops)


def build_knn_graph(x, k_nn: int) -> AdjacencyMatrix:
    """Each node links to its ``k_nn`` nearest nodes (L2 on channel vectors,
    ties to the lower index); symmetrized by OR."""
    feats = np.asarray(getattr(x, "data", x), dtype=np.float64)[0]
    c, h, w = feats.shape
    n = h * w
    if not 1 <= k_nn < n:
        raise ValueError(f"k_nn must satisfy 1 <= k_nn < {n}, got {k_nn}")
    pts = feats.reshape(c, n).T
    order = np.empty((n, k_nn), dtype=np.int64)
    ops = 0
    chunk = max(1, (1 << 22) // max(1, n * c))
    for s in range(0, n, chunk):
        rows = np.arange(s, min(n, s + chunk))
        d2 = ((pts[rows, None, :] - pts[None, :, :]) ** 2).sum(axis=2)
        ops += d2.size - len(rows)  # self-distances are not candidates
        d2[np.arange(len(rows)), rows] = np.inf
        order[rows] = np.argsort(d2, axis=1, kind="stable")[:, :k_nn]
    directed = np.zeros((n, n), dtype=bool)
    directed[np.repeat(np.arange(n), k_nn), order.reshape(-1)] = True
    return AdjacencyMatrix.from_directed(directed, h=h, w=w, ops=ops)


def clustering_coefficient(a: AdjacencyMatrix) -> float:
    """Mean local clustering; nodes of degree < 2 contribute 0."""
    A = sp.csr_matrix(a.edges, dtype=np.int64)
    k = np.asarray(A.sum(axis=1)).ravel()
    links = np.asarray((A @ A).multiply(A).sum(axis=1)).ravel() // 2
    pairs = k * (k - 1) // 2
    local = np.divide(links, pairs, out=np.zeros(len(k)), where=pairs > 0)
    return float(local.mean()) if len(k) else 0.0


def _power_top(matvec, n: int, rng: np.random.Generator, deflate: list[np.ndarray], which: str) -> tuple[float, np.ndarray, int]:
    v = rng.standard_normal(n)
    for u in deflate:
        v -= (u @ v) * u
    v /= np.linalg.norm(v)
    y = matvec(v)
    for it in range(1, POWER_MAX_ITER + 1):
        for u in deflate:
            y -= (u @ y) * u
        lam = v @ y
        # residual of the Rayleigh pair; eigenvalue error is ~residual^2 / gap
        if np.linalg.norm(y - lam * v) <= POWER_TOL * max(1.0, abs(lam)):
            return float(lam), v, it
        norm = np.linalg.norm(y)
        if norm == 0:
            return 0.0, v, it
        v = y / norm
        y = matvec(v)
    raise ConvergenceError(POWER_MAX_ITER, which)


def top_two_eigenvalues(a: AdjacencyMatrix, method: str = "auto", seed: int = 0) -> tuple[float, float, str, int]:
    """Two largest (algebraic) adjacency eigenvalues.

    The iterative path runs power iteration on ``A + shift*I`` with
    ``shift = max degree`` so that the spectrum is non-negative and the
    dominant eigenvalue is the algebraically largest one; the second comes
    from deflating the first eigenvector.
    """
    n = a.n_nodes
    if method == "auto":
        method = "dense" if n <= DENSE_LIMIT else "power"
    if n < 2:
        return 0.0, 0.0, method, 0
    if method == "dense":
        vals = np.linalg.eigvalsh(a.edges.astype(np.float64))
        return float(vals[-1]), float(vals[-2]), method, 0
    if method != "power":
        raise ValueError(f"unknown eigen method {method!r}")
    A = sp.csr_matrix(a.edges.astype(np.float64))
    shift = float(a.degrees.max())

    def matvec(v):
        return A @ v + shift * v

    rng = np.random.default_rng(seed)
    mu1, v1, it1 = _power_top(matvec, n, rng, [], "lambda1")
    mu2, _, it2 = _power_top(matvec, n, rng, [v1], "lambda2")
    l1, l2 = mu1 - shift, mu2 - shift
    # a repeated top eigenvalue can come back a few ulp out of order
    return l1, min(l1, l2), method, it1 + it2


def spectral_gap(a: AdjacencyMatrix, method: str = "auto") -> GraphMetrics:
    l1, l2, used, iters = top_two_eigenvalues(a, method)
    return GraphMetrics(clustering_coefficient(a), l1 - l2, l1, l2, used, iters)
