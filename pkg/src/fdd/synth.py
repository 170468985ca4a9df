"""Seeded synthetic datasets: desk-scale analogues of the labeled peptide suites.

These generators back the test and CLI smoke configurations: Gaussian blobs
and two-moons for classifier/proximity checks, a layered embedding suite with
depth-dependent nuisance variance, and a peptide composition gradient whose
descriptors rise along the generating parameter.
"""

from __future__ import annotations

import numpy as np

from .data import SequenceRecord


def make_blobs(n: int, centers: np.ndarray, spread: float = 1.0, seed: int = 0):
    """n points split evenly across Gaussian blobs; returns (X, labels)."""
    centers = np.atleast_2d(np.asarray(centers, dtype=float))
    k = len(centers)
    rng = np.random.default_rng(seed)
    sizes = [n // k + (1 if i < n % k else 0) for i in range(k)]
    X = np.concatenate([centers[i] + spread * rng.normal(size=(sizes[i], centers.shape[1])) for i in range(k)])
    y = np.concatenate([np.full(sizes[i], i) for i in range(k)])
    perm = rng.permutation(n)
    return X[perm], y[perm]


def make_two_moons(n: int, noise: float = 0.08, seed: int = 0):
    """Interleaved half-circles; returns (X, labels)."""
    rng = np.random.default_rng(seed)
    n0 = n // 2
    n1 = n - n0
    t0 = rng.uniform(0.0, np.pi, n0)
    t1 = rng.uniform(0.0, np.pi, n1)
    outer = np.stack([np.cos(t0), np.sin(t0)], axis=1)
    inner = np.stack([1.0 - np.cos(t1), 1.0 - np.sin(t1) - 0.5], axis=1)
    X = np.concatenate([outer, inner]) + noise * rng.normal(size=(n, 2))
    y = np.concatenate([np.zeros(n0, dtype=int), np.ones(n1, dtype=int)])
    perm = rng.permutation(n)
    return X[perm], y[perm]


def _random_rotation(dim: int, rng: np.random.Generator) -> np.ndarray:
    M = rng.normal(size=(dim, dim))
    Q, R = np.linalg.qr(M)
    return Q * np.sign(np.diag(R))


def layered_suite(n: int = 240, n_layers: int = 3, D: int = 32, seed: int = 0):
    """Synthetic per-layer embeddings of a labeled two-moons manifold.

    Layer 0 is near-constant (almost no signal, tiny variance). Deeper layers
    embed a nonlinear lift of the moons among nuisance directions whose
    variance grows with depth, so a small unsupervised autoencoder latches
    onto nuisance while the label signal stays recoverable through
    supervision. Signal and nuisance blocks keep their own coordinates (the
    columns are only permuted), mirroring embeddings whose task-relevant
    information concentrates on feature subsets.
    Returns (labels, [embedding matrix per layer]).
    """
    base, y = make_two_moons(n, noise=0.08, seed=seed)
    rng = np.random.default_rng(seed + 1)
    layers = []
    for l in range(n_layers):
        if l == 0:
            E = np.zeros((n, D))
            E[:, :2] = 0.01 * base
            E += 0.01 * rng.normal(size=(n, D))
        else:
            x, z = base[:, 0], base[:, 1]
            signal = np.stack([x, z, x * z, np.sin(2.0 * x), np.cos(2.0 * z)], axis=1)
            n_nuis = D - signal.shape[1]
            nuis_scale = 1.0 + 1.5 * l
            nuisance = nuis_scale * rng.normal(size=(n, n_nuis))
            E = np.concatenate([signal, nuisance], axis=1)[:, rng.permutation(D)]
            E += 0.02 * rng.normal(size=(n, D))
        layers.append(E)
    return y, layers


def retrieval_suite(n: int = 300, D: int = 32, seed: int = 0):
    """Embeddings, a degraded raw-feature view, and labels for retrieval runs.

    The embedding matrix carries the clean nonlinear lift of the moons among
    nuisance dimensions; the raw view plays the role of hand-crafted
    descriptors (noisy manifold coordinates plus unrelated columns), which is
    what the reference retrieval baseline consumes.
    Returns (E, raw, labels).
    """
    base, y = make_two_moons(n, noise=0.06, seed=seed)
    rng = np.random.default_rng(seed + 1)
    x, z = base[:, 0], base[:, 1]
    signal = np.stack([x, z, x * z, np.sin(2.0 * x), np.cos(2.0 * z)], axis=1)
    nuisance = 2.5 * rng.normal(size=(n, D - signal.shape[1]))
    E = np.concatenate([signal, nuisance], axis=1)[:, rng.permutation(D)]
    raw = np.concatenate([base + 0.5 * rng.normal(size=base.shape), rng.normal(size=(n, 4))], axis=1)
    return E, raw, y


# ---------------------------------------------------------------------------
# Peptide composition gradient
# ---------------------------------------------------------------------------

_BASIC = "KR"
_HYDRO = "LFIVA"
_ACIDIC = "DE"
_NEUTRAL = "GSTNQ"


def make_peptide_gradient(n: int = 300, length: int = 24, seed: int = 0):
    """Peptides whose composition slides from acidic/polar to cationic/hydrophobic.

    The gradient parameter s in [0, 1] raises the basic and hydrophobic
    residue fractions. Residue-category counts are apportioned
    deterministically (largest remainder), so net charge, isoelectric point
    and hydrophobic ratio are all monotone in s up to +-1 count wobble; only
    the residue identities within a category and their positions are random.
    Labels mark the AMP-like half (s > 0.5). Returns (records, s values).
    """
    rng = np.random.default_rng(seed)
    s_values = np.linspace(0.0, 1.0, n)
    pools = [_BASIC, _HYDRO, _ACIDIC, _NEUTRAL]
    records = []
    for i, s in enumerate(s_values):
        # acidic content stays below basic throughout so the isoelectric point
        # rises smoothly instead of jumping across a titration cliff
        probs = [
            0.06 + 0.44 * s,
            0.10 + 0.40 * s,
            0.03,
        ]
        probs.append(1.0 - sum(probs))
        raw = [p * length for p in probs]
        counts = [int(x) for x in raw]
        frac = [x - c for x, c in zip(raw, counts)]
        for _ in range(length - sum(counts)):
            j = max(range(4), key=lambda q: (frac[q], -q))
            counts[j] += 1
            frac[j] = -1.0
        # cycle within each category so descriptor values depend only on s;
        # just the residue order is random
        residues = [pools[c][j % len(pools[c])] for c in range(4) for j in range(counts[c])]
        seq = "".join(np.array(residues)[rng.permutation(length)])
        records.append(SequenceRecord(f"s{i:04d}", seq, label=int(s > 0.5)))
    return records, s_values


def gradient_embeddings(s_values: np.ndarray, D: int = 12, noise: float = 0.04, seed: int = 0):
    """Smooth embedding of the gradient parameter into D dimensions plus noise.

    The feature curve is nonlinear but bends gently (no self-approach), so the
    embedded manifold is a clean 1-D arc.
    """
    rng = np.random.default_rng(seed)
    s = np.asarray(s_values, dtype=float)
    feats = np.stack([s, s * s, np.sqrt(s + 0.2), np.exp(s) / np.e], axis=1)
    A = rng.normal(size=(feats.shape[1], D)) / np.sqrt(feats.shape[1])
    return feats @ A + noise * rng.normal(size=(len(s), D))
