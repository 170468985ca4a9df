"""Diffusion operators from supervised or unsupervised kernels, and potential coordinates.

A kernel matrix is row-normalized into a Markov operator P; powers of P
integrate local affinities over multiple scales. Low-dimensional coordinates
come from classical MDS on distances between rows of -log(P^t).
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .forest import ProximityMatrix

_ROW_SUM_TOL = 1e-9
_LOG_FLOOR = 1e-12  # entries of P^t are floored here before -log


@dataclass
class DiffusionOperator:
    """Row-stochastic transition matrix with its source kernel tag and power."""

    P: np.ndarray
    kernel: str = "unknown"
    t: int = 1

    def __post_init__(self):
        P = np.asarray(self.P, dtype=float)
        if P.ndim != 2 or P.shape[0] != P.shape[1]:
            raise ValueError(f"operator must be square, got {P.shape}")
        if not np.isfinite(P).all():
            raise ValueError("operator contains NaN or Inf")
        if (P < 0).any() or (P > 1 + _ROW_SUM_TOL).any():
            raise ValueError("operator entries must lie in [0, 1]")
        err = np.abs(P.sum(axis=1) - 1.0).max()
        if err > _ROW_SUM_TOL:
            raise ValueError(f"rows must sum to 1 (max deviation {err:.3e})")
        self.P = P

    @property
    def n(self) -> int:
        return self.P.shape[0]


@dataclass
class PotentialCoords:
    """Low-dimensional potential coordinates with the spectrum that produced them."""

    Z: np.ndarray
    t_used: int
    eigenvalues: np.ndarray
    clipped_variance: float = 0.0

    @property
    def d(self) -> int:
        return self.Z.shape[1]


def pairwise_sq_dists(X: np.ndarray, Y: np.ndarray | None = None) -> np.ndarray:
    """Squared Euclidean distances between rows of X and Y (Y defaults to X)."""
    X = np.asarray(X, dtype=float)
    Y = X if Y is None else np.asarray(Y, dtype=float)
    sq = (X * X).sum(axis=1)[:, None] + (Y * Y).sum(axis=1)[None, :] - 2.0 * X @ Y.T
    return np.maximum(sq, 0.0)


def alpha_decay_kernel(X: np.ndarray, k: int = 5, alpha: float = 40.0) -> np.ndarray:
    """Adaptive-bandwidth decay kernel, symmetric by construction.

    The bandwidth of each point is its k-th nearest-neighbor distance, and the
    two one-sided exponentials are averaged:
    K_ij = exp(-(|x_i-x_j|^2 / e_i)^a)/2 + exp(-(|x_i-x_j|^2 / e_j)^a)/2.
    """
    X = np.asarray(X, dtype=float)
    n = len(X)
    if not k < n:
        raise ValueError(f"k={k} must be smaller than n={n}")
    if alpha < 1:
        raise ValueError(f"alpha must be >= 1, got {alpha}")
    sq = pairwise_sq_dists(X)
    dist = np.sqrt(sq)
    # column k of the row-sorted distances is the k-th neighbor (column 0 = self)
    eps = np.sort(dist, axis=1)[:, k]
    if (eps == 0).any():
        i = int(np.argmin(eps))
        dup = np.where(dist[i] == 0)[0]
        j = int(dup[dup != i][0]) if (dup != i).any() else i
        raise ValueError(f"duplicate points {i} and {j} give a zero bandwidth")
    with np.errstate(over="ignore"):
        K = 0.5 * np.exp(-((sq / eps[:, None]) ** alpha)) + 0.5 * np.exp(-((sq / eps[None, :]) ** alpha))
    return K


def row_normalize(K: np.ndarray, kernel: str = "unknown") -> DiffusionOperator:
    """Markov normalization P_ij = K_ij / sum_l K_il."""
    K = np.asarray(K, dtype=float)
    if (K < 0).any():
        raise ValueError("kernel has negative entries")
    sums = K.sum(axis=1)
    if (sums <= 0).any():
        bad = int(np.argmin(sums))
        raise ValueError(f"row {bad} of the kernel sums to zero; cannot normalize")
    return DiffusionOperator(K / sums[:, None], kernel=kernel, t=1)


def operator_from_proximity(
    prox: ProximityMatrix, mode: str = "affinity", k: int = 5, alpha: float = 40.0
) -> DiffusionOperator:
    """Supervised operator from forest proximities.

    The proximity matrix is symmetrized as (K + K^T)/2 first, since row-wise
    averaging over OOB trees is not symmetric. `mode="affinity"` normalizes
    the symmetrized proximities directly; `mode="distance"` instead applies
    the adaptive decay kernel to the proximity profiles (rows as coordinates).
    """
    K = 0.5 * (prox.K + prox.K.T)
    np.fill_diagonal(K, 0.0)
    if mode == "affinity":
        return row_normalize(K, kernel="rf_gap")
    if mode == "distance":
        return row_normalize(alpha_decay_kernel(K, k=k, alpha=alpha), kernel="rf_gap_distance")
    raise ValueError(f"unknown proximity mode {mode!r}")


def diffuse(op: DiffusionOperator | np.ndarray, t: int) -> np.ndarray:
    """P^t by repeated multiplication; t=0 returns the identity."""
    P = op.P if isinstance(op, DiffusionOperator) else np.asarray(op, dtype=float)
    if t < 0:
        raise ValueError(f"t must be >= 0, got {t}")
    if t == 0:
        return np.eye(P.shape[0])
    out = P.copy()
    for _ in range(t - 1):
        out = out @ P
    return out


def stationary_distribution(
    op: DiffusionOperator | np.ndarray, tol: float = 1e-12, max_iter: int = 200_000
) -> np.ndarray:
    """The left fixed vector: phi P = phi, sum(phi) = 1, phi > 0.

    The chain must be irreducible and aperiodic, verified by boolean repeated
    squaring of the support pattern (a primitive matrix becomes strictly
    positive at some power <= n^2).
    """
    P = op.P if isinstance(op, DiffusionOperator) else np.asarray(op, dtype=float)
    n = P.shape[0]
    pattern = (P > 0).astype(float)
    primitive = False
    for _ in range(max(3, 2 * int(math.ceil(math.log2(max(n, 2)))) + 2)):
        if (pattern > 0).all():
            primitive = True
            break
        new = np.minimum(pattern @ pattern, 1.0)
        if np.array_equal(new > 0, pattern > 0):
            break
        pattern = new
    if not primitive:
        raise ValueError("chain is not irreducible and aperiodic (no strictly positive power)")
    phi = np.full(n, 1.0 / n)
    for _ in range(max_iter):
        # damped update: same fixed point, converges regardless of periodicity
        nxt = 0.5 * (phi + phi @ P)
        nxt /= nxt.sum()
        if np.abs(nxt @ P - nxt).max() < tol:
            return nxt
        phi = nxt
    raise ValueError(f"stationary distribution did not converge within {max_iter} iterations")


def diffusion_distance(
    op: DiffusionOperator | np.ndarray, t: int, i: int, j: int, phi: np.ndarray
) -> float:
    """Distance between t-step transition profiles, weighted by 1/phi."""
    phi = np.asarray(phi, dtype=float)
    if (phi <= 0).any():
        bad = int(np.argmin(phi))
        raise ValueError(f"stationary weight {bad} is not positive")
    Pt = diffuse(op, t)
    diff = Pt[i] - Pt[j]
    return float(np.sqrt(np.sum(diff * diff / phi)))


def classical_mds(D: np.ndarray, d: int):
    """Classical MDS of a distance matrix: double-centered Gram, top-d eigenpairs.

    Returns (coords, eigenvalues, clipped_variance). Negative eigenvalues are
    clipped to zero and their total magnitude reported as a fraction of the
    absolute spectrum.
    """
    D = np.asarray(D, dtype=float)
    n = D.shape[0]
    J = np.eye(n) - np.full((n, n), 1.0 / n)
    B = -0.5 * J @ (D * D) @ J
    B = 0.5 * (B + B.T)
    eigvals, eigvecs = np.linalg.eigh(B)
    order = np.argsort(eigvals)[::-1]
    eigvals, eigvecs = eigvals[order], eigvecs[:, order]
    scale = max(eigvals[0], 0.0)
    rank = int(np.sum(eigvals > max(scale * 1e-9, 1e-12)))
    if d > rank:
        raise ValueError(f"requested d={d} exceeds rank {rank} of the centered Gram matrix")
    clipped = float(np.sum(np.abs(eigvals[eigvals < 0])))
    total = float(np.sum(np.abs(eigvals)))
    lam = np.maximum(eigvals[:d], 0.0)
    coords = eigvecs[:, :d] * np.sqrt(lam)[None, :]
    # fix each column's sign for reproducible artifacts
    for c in range(coords.shape[1]):
        col = coords[:, c]
        if col[np.argmax(np.abs(col))] < 0:
            coords[:, c] = -col
    return coords, eigvals, (clipped / total if total > 0 else 0.0)


def potential_coordinates(op: DiffusionOperator, t: int, d: int) -> PotentialCoords:
    """Embed -log(P^t) row distances with classical MDS.

    Entries of P^t are floored at 1e-12 so the log potential stays finite.
    Columns come out ordered by decreasing explained variance.
    """
    if d < 1:
        raise ValueError(f"d must be >= 1, got {d}")
    Pt = np.maximum(diffuse(op, t), _LOG_FLOOR)
    U = -np.log(Pt)
    D = np.sqrt(pairwise_sq_dists(U))
    coords, eigvals, clipped = classical_mds(D, d)
    return PotentialCoords(Z=coords, t_used=t, eigenvalues=eigvals, clipped_variance=clipped)


def von_neumann_entropy_curve(op: DiffusionOperator, t_max: int) -> np.ndarray:
    """Spectral entropy of P^t for t = 1..t_max.

    Eigenvalue magnitudes of P raised to t are normalized into a probability
    vector; the curve's decay marks the transition from local to global mixing.
    """
    lam = np.abs(np.linalg.eigvals(op.P))
    lam = np.sort(lam)[::-1]
    H = np.empty(t_max)
    for t in range(1, t_max + 1):
        p = lam**t
        total = p.sum()
        if total <= 0:
            H[t - 1] = 0.0
            continue
        p = p / total
        nz = p[p > 0]
        H[t - 1] = float(-(nz * np.log(nz)).sum())
    return H


def knee_point(values: np.ndarray) -> int:
    """Index (0-based) of the point with maximum distance to the end-to-end chord."""
    values = np.asarray(values, dtype=float)
    n = len(values)
    x = np.arange(n, dtype=float)
    x0, y0, x1, y1 = 0.0, values[0], float(n - 1), values[-1]
    chord = math.hypot(x1 - x0, y1 - y0)
    dist = np.abs((y1 - y0) * x - (x1 - x0) * values + x1 * y0 - y1 * x0) / chord
    return int(np.argmax(dist))


def vne_select_t(op: DiffusionOperator, t_max: int, default_t: int = 4) -> int:
    """Diffusion scale at the knee of the entropy curve; default on a flat curve."""
    if t_max < 2:
        raise ValueError(f"t_max must be >= 2, got {t_max}")
    H = von_neumann_entropy_curve(op, t_max)
    if H.max() - H.min() < 1e-9:
        return default_t
    return knee_point(H) + 1
