"""Normalized-Laplacian spectra and the spatial message-passing matrix.

Spectral comparisons between graphs are restricted to a shared node set,
normally the largest connected component (LCC) of the original graph.
"""

import logging
import math
from dataclasses import dataclass
from typing import Literal, Optional, Sequence

import numpy as np
from pydantic import BaseModel

from rewirelab.graph import Graph, connected_components

logger = logging.getLogger(__name__)

Normalization = Literal["symmetric", "row"]
EigenMethod = Literal["eigh", "jacobi"]


class SpectrumReport(BaseModel):
    eigenvalues: list[float]
    lcc_size: int
    lambda2: float
    eps: float
    w_eps: Optional[float]
    whole_graph_lambda2: float
    dropped_isolated: int


@dataclass(frozen=True, eq=False)
class SpatialMPMatrix:
    alpha: float
    c1: float
    c2: float
    matrix: np.ndarray
    nodes: np.ndarray
    delta: float
    lambda2: float
    rho_eff: float


class TighteningResult(BaseModel):
    applicable: bool
    reason: Optional[str] = None
    rho_eff: Optional[float] = None
    rho_eff_prime: Optional[float] = None
    residuals: list[float] = []
    residuals_prime: list[float] = []
    bound_constant: Optional[float] = None
    bound_constant_prime: Optional[float] = None
    bound_holds: bool = False
    improved: bool = False


def _induced(g: Graph, nodes: np.ndarray) -> np.ndarray:
    adjacency = g.adjacency()
    return adjacency[np.ix_(nodes, nodes)]


def normalized_laplacian(
    g: Graph,
    lcc_only: bool = False,
    nodes: Optional[Sequence[int]] = None,
) -> tuple[np.ndarray, np.ndarray]:
    """Symmetric normalized Laplacian I - D^-1/2 A D^-1/2.

    Zero-degree nodes are dropped before normalizing.

    Args:
        g (Graph): The graph.
        lcc_only (bool): Restrict to the largest connected component.
        nodes (Optional[Sequence[int]]): Restrict to this node set
            instead (e.g. the LCC of another graph on the same nodes).

    Returns:
        tuple[np.ndarray, np.ndarray]: The Laplacian and the retained node
            indices, ascending, which index its rows and columns.

    Raises:
        ValueError: If no node with an edge remains, or the LCC has fewer
            than 2 nodes with `lcc_only`.
    """
    if nodes is not None:
        retained = np.asarray(sorted(nodes), dtype=np.int64)
    elif lcc_only:
        retained = np.asarray(connected_components(g).lcc_nodes)
        if len(retained) < 2:
            raise ValueError("LCC has fewer than 2 nodes")
    else:
        retained = np.arange(g.n)

    adjacency = _induced(g, retained)
    degree = adjacency.sum(axis=1)
    connected = degree > 0
    if not np.any(connected):
        raise ValueError("Every retained node is isolated")
    retained, adjacency = retained[connected], adjacency[
        np.ix_(connected, connected)
    ]

    inv_sqrt = 1.0 / np.sqrt(degree[connected])
    laplacian = np.eye(len(retained)) - (
        inv_sqrt[:, None] * adjacency * inv_sqrt[None, :]
    )
    return 0.5 * (laplacian + laplacian.T), retained


def _jacobi(
    matrix: np.ndarray, tol: float = 1e-12, max_sweeps: int = 100
) -> tuple[np.ndarray, np.ndarray]:
    """Cyclic Jacobi rotations until off(M) < tol·‖M‖_F."""
    a = matrix.copy()
    n = len(a)
    v = np.eye(n)
    threshold = tol * np.linalg.norm(a)

    for sweep in range(max_sweeps):
        off = math.sqrt(max(np.sum(a**2) - np.sum(np.diag(a) ** 2), 0.0))
        if off <= threshold:
            break
        for p in range(n - 1):
            for q in range(p + 1, n):
                if a[p, q] == 0.0:
                    continue
                theta = (a[q, q] - a[p, p]) / (2.0 * a[p, q])
                sign = 1.0 if theta >= 0 else -1.0
                t = sign / (abs(theta) + math.sqrt(theta**2 + 1.0))
                c = 1.0 / math.sqrt(t**2 + 1.0)
                s = t * c

                col_p, col_q = a[:, p].copy(), a[:, q].copy()
                a[:, p] = c * col_p - s * col_q
                a[:, q] = s * col_p + c * col_q
                row_p, row_q = a[p, :].copy(), a[q, :].copy()
                a[p, :] = c * row_p - s * row_q
                a[q, :] = s * row_p + c * row_q
                vec_p, vec_q = v[:, p].copy(), v[:, q].copy()
                v[:, p] = c * vec_p - s * vec_q
                v[:, q] = s * vec_p + c * vec_q
    else:
        logger.warning("Jacobi did not converge in %d sweeps", max_sweeps)

    return np.diag(a).copy(), v


def eigen_sym(
    matrix: np.ndarray, vectors: bool = False, method: EigenMethod = "eigh"
) -> np.ndarray | tuple[np.ndarray, np.ndarray]:
    """Full spectrum of a symmetric matrix, ascending.

    Args:
        matrix (np.ndarray): Symmetric matrix (within 1e-9).
        vectors (bool): Also return eigenvectors as columns.
        method (EigenMethod): LAPACK `eigh` or cyclic Jacobi rotations.

    Raises:
        ValueError: If the matrix is not square and symmetric.
    """
    matrix = np.asarray(matrix, dtype=np.float64)
    if matrix.ndim != 2 or matrix.shape[0] != matrix.shape[1]:
        raise ValueError(f"Matrix must be square, got {matrix.shape}")
    if matrix.size and np.max(np.abs(matrix - matrix.T)) > 1e-9:
        raise ValueError("Matrix is not symmetric")

    if method == "jacobi":
        values, vecs = _jacobi(matrix)
    else:
        values, vecs = np.linalg.eigh(matrix)

    order = np.argsort(values, kind="stable")
    values, vecs = values[order], vecs[:, order]
    return (values, vecs) if vectors else values


def _w_eps(eigenvalues: np.ndarray, eps: float) -> Optional[float]:
    """ε-trimmed spectral range of sorted eigenvalues, 1-indexed:

    λ_(⌈(1-ε)m⌉) - λ_(⌊εm⌋+1)
    """
    m = len(eigenvalues)
    if m < 3:
        return None
    upper = min(max(math.ceil((1.0 - eps) * m), 1), m)
    lower = min(math.floor(eps * m) + 1, m)
    return float(eigenvalues[upper - 1] - eigenvalues[lower - 1])


def spectral_report(
    g: Graph,
    eps: float = 0.05,
    nodes: Optional[Sequence[int]] = None,
    method: EigenMethod = "eigh",
) -> SpectrumReport:
    """λ2 and W_ε on the LCC (or `nodes`), plus whole-graph λ2.

    Raises:
        ValueError: If eps is outside (0, 0.5) or the LCC has fewer than 2
            nodes.
    """
    if not 0.0 < eps < 0.5:
        raise ValueError(f"eps must be in (0, 0.5), got {eps}")

    laplacian, retained = normalized_laplacian(
        g, lcc_only=nodes is None, nodes=nodes
    )
    eigenvalues = eigen_sym(laplacian, method=method)

    components = connected_components(g)
    if components.component_count > 1:
        whole = 0.0
    else:
        whole_laplacian, _ = normalized_laplacian(g)
        whole = float(eigen_sym(whole_laplacian, method=method)[1])

    return SpectrumReport(
        eigenvalues=[float(v) for v in eigenvalues],
        lcc_size=len(retained),
        lambda2=float(eigenvalues[1]) if len(eigenvalues) > 1 else 0.0,
        eps=eps,
        w_eps=_w_eps(eigenvalues, eps),
        whole_graph_lambda2=whole,
        dropped_isolated=components.isolated_count,
    )


def rho_eff(alpha: float, c2: float, lambda2: float, delta: float) -> float:
    """Effective mixing rate (σ̄₂ + δ) / (σ̄₁ - δ)."""
    sigma1 = alpha + c2
    sigma2 = alpha + c2 - c2 * lambda2
    if sigma1 - delta <= 0:
        return math.inf
    return (sigma2 + delta) / (sigma1 - delta)


def normalized_adjacency(
    adjacency: np.ndarray, normalization: Normalization = "symmetric"
) -> np.ndarray:
    degree = adjacency.sum(axis=1)
    safe = np.where(degree > 0, degree, 1.0)
    if normalization == "row":
        return adjacency / safe[:, None]
    inv_sqrt = np.where(degree > 0, 1.0 / np.sqrt(safe), 0.0)
    return inv_sqrt[:, None] * adjacency * inv_sqrt[None, :]


def spatial_mp(
    g: Graph,
    alpha: float,
    c1: float,
    c2: float,
    normalization: Normalization = "symmetric",
) -> SpatialMPMatrix:
    """S = αI + c1·diag(Âᵀ1) + c2·Â on the LCC, with δ and ρ_eff.

    Raises:
        ValueError: If a coefficient is not finite or the LCC is empty.
    """
    if not all(math.isfinite(x) for x in (alpha, c1, c2)):
        raise ValueError("alpha, c1 and c2 must be finite")

    laplacian, nodes = normalized_laplacian(g, lcc_only=True)
    lambda2 = float(eigen_sym(laplacian)[1])

    a_hat = normalized_adjacency(_induced(g, nodes), normalization)
    column_sums = a_hat.sum(axis=0)
    matrix = (
        alpha * np.eye(len(nodes))
        + c1 * np.diag(column_sums)
        + c2 * a_hat
    )
    delta = abs(c1) * float(
        np.max(np.abs(column_sums - column_sums.mean()))
    )
    return SpatialMPMatrix(
        alpha=alpha,
        c1=c1,
        c2=c2,
        matrix=matrix,
        nodes=nodes,
        delta=delta,
        lambda2=lambda2,
        rho_eff=rho_eff(alpha, c2, lambda2, delta),
    )


def _residuals(matrix: np.ndarray, k_max: int) -> Optional[list[float]]:
    """sup |(S/σ₁)^K - Π| for K = 1..k_max, Π the dominant projection.

    Returns None when the dominant eigenvalue is not simple and positive.
    """
    symmetric = np.allclose(matrix, matrix.T, atol=1e-12)
    if symmetric:
        values, vectors = np.linalg.eigh(matrix)
        left = right = vectors
    else:
        values, right = np.linalg.eig(matrix)
        left = np.linalg.inv(right).T

    order = np.argsort(-np.abs(values))
    top = order[0]
    if len(values) > 1 and (
        abs(values[top]) - abs(values[order[1]]) <= 1e-9
    ):
        return None
    sigma = values[top]
    if abs(np.imag(sigma)) > 1e-12 or np.real(sigma) <= 0:
        return None

    r = np.real(right[:, top])
    l_vec = np.real(left[:, top])
    limit = np.outer(r, l_vec) / float(l_vec @ r)

    scaled = matrix / float(np.real(sigma))
    power = np.eye(len(matrix))
    residuals = []
    for _ in range(k_max):
        power = power @ scaled
        residuals.append(float(np.max(np.abs(power - limit))))
    return residuals


def verify_tightening(
    g: Graph,
    g_prime: Graph,
    alpha: float,
    c1: float,
    c2: float,
    k_max: int = 10,
    normalization: Normalization = "symmetric",
) -> TighteningResult:
    """Check that a graph with a larger gap mixes at least as fast.

    For each graph, S is normalized by its dominant eigenvalue and the
    residual to the rank-1 limit is computed by direct matrix powers. The
    bound C·ρ_eff^K uses C fitted at K = 1.

    Raises:
        ValueError: If the node sets differ.
    """
    if g.n != g_prime.n:
        raise ValueError(f"Node sets differ: {g.n} vs {g_prime.n} nodes")

    mp = spatial_mp(g, alpha, c1, c2, normalization)
    mp_prime = spatial_mp(g_prime, alpha, c1, c2, normalization)

    if mp_prime.lambda2 < mp.lambda2 - 1e-12:
        return TighteningResult(
            applicable=False, reason="spectral gap decreased"
        )
    if mp_prime.delta > mp.delta + 1e-12:
        return TighteningResult(
            applicable=False, reason="degree heterogeneity increased"
        )

    residuals = _residuals(mp.matrix, k_max)
    residuals_prime = _residuals(mp_prime.matrix, k_max)
    if residuals is None or residuals_prime is None:
        return TighteningResult(
            applicable=False, reason="dominant eigenvalue is not simple"
        )

    def fit(res: list[float], rate: float) -> tuple[float, bool]:
        if rate <= 0 or not math.isfinite(rate):
            return math.inf, False
        constant = res[0] / rate
        holds = all(
            value <= constant * rate**k + 1e-12
            for k, value in enumerate(res, start=1)
        )
        return constant, holds

    constant, holds = fit(residuals, mp.rho_eff)
    constant_prime, holds_prime = fit(residuals_prime, mp_prime.rho_eff)

    return TighteningResult(
        applicable=True,
        rho_eff=mp.rho_eff,
        rho_eff_prime=mp_prime.rho_eff,
        residuals=residuals,
        residuals_prime=residuals_prime,
        bound_constant=constant,
        bound_constant_prime=constant_prime,
        bound_holds=holds and holds_prime,
        improved=all(
            b <= a + 1e-12 for a, b in zip(residuals, residuals_prime)
        ),
    )


def dirichlet_energy(g: Graph, features: np.ndarray) -> float:
    """tr(XᵀL̃X) / tr(XᵀX) on the whole graph.

    Isolated nodes keep an identity row in L̃.

    Raises:
        ValueError: If X is all zeros or its rows do not match the nodes.
    """
    x = np.asarray(features, dtype=np.float64)
    if x.ndim == 1:
        x = x[:, None]
    if x.shape[0] != g.n:
        raise ValueError(f"Features have {x.shape[0]} rows, expected {g.n}")
    denominator = float(np.sum(x * x))
    if denominator == 0.0:
        raise ValueError("Dirichlet energy is undefined for all-zero X")

    laplacian = np.eye(g.n) - normalized_adjacency(g.adjacency())
    return float(np.sum(x * (laplacian @ x)) / denominator)
