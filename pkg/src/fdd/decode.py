"""Decoding heads: MLP probing, kNN retrieval, latent-to-embedding regression,
nearest-sequence lookup, and peptide physicochemical descriptors."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import nn
from .data import DatasetSplit, EmbeddingMatrix, SequenceRecord
from .diffusion import pairwise_sq_dists


# ---------------------------------------------------------------------------
# Ranking metrics
# ---------------------------------------------------------------------------


def _midranks(values: np.ndarray) -> np.ndarray:
    order = np.argsort(values, kind="stable")
    ranks = np.empty(len(values))
    sv = values[order]
    i = 0
    while i < len(sv):
        j = i
        while j + 1 < len(sv) and sv[j + 1] == sv[i]:
            j += 1
        ranks[order[i:j + 1]] = 0.5 * (i + j) + 1.0
        i = j + 1
    return ranks


def auc(scores: np.ndarray, labels: np.ndarray) -> float:
    """Probability that a random positive outscores a random negative; ties count half."""
    scores = np.asarray(scores, dtype=float)
    labels = np.asarray(labels, dtype=int)
    n_pos = int(labels.sum())
    n_neg = len(labels) - n_pos
    if n_pos == 0 or n_neg == 0:
        raise ValueError("AUC needs both classes present")
    ranks = _midranks(scores)
    return float((ranks[labels == 1].sum() - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg))


def spearman_rho(x: np.ndarray, y: np.ndarray) -> float:
    """Rank correlation with midranks for ties."""
    rx = _midranks(np.asarray(x, dtype=float))
    ry = _midranks(np.asarray(y, dtype=float))
    rx -= rx.mean()
    ry -= ry.mean()
    denom = np.sqrt((rx @ rx) * (ry @ ry))
    if denom == 0:
        return 0.0
    return float((rx @ ry) / denom)


# ---------------------------------------------------------------------------
# Probing
# ---------------------------------------------------------------------------


@dataclass
class ProbeConfig:
    hidden: tuple[int, ...] = (16,)
    epochs: int = 300
    batch_size: int = 32
    lr_start: float = 3e-5
    lr_max: float = 5e-4
    weight_decay: float = 1e-5
    patience: int = 20
    seed: int = 0


@dataclass
class ProbeResult:
    auc: float
    scores: np.ndarray  # held-out scores, aligned with test_indices
    test_indices: np.ndarray
    layer: int = -1


def train_probe(
    Z: np.ndarray, y: np.ndarray, split: DatasetSplit, config: ProbeConfig | None = None, layer: int = -1
) -> ProbeResult:
    """Fit a small MLP classifier on the train split and score the test split.

    The reported AUC uses held-out scores only. Deterministic given the seed.
    """
    config = config or ProbeConfig()
    Z = np.asarray(Z, dtype=float)
    y = np.asarray(y, dtype=int)
    if set(np.unique(y)) - {0, 1}:
        raise ValueError("probe labels must be binary")
    if len(np.unique(y[split.test])) < 2:
        raise ValueError("test split contains a single class; AUC undefined")
    net = nn.Mlp([Z.shape[1], *config.hidden, 1], seed=config.seed)
    rng = np.random.default_rng(config.seed + 1)
    train_idx, val_idx = split.train, split.val
    steps_per_epoch = max(1, -(-len(train_idx) // config.batch_size))
    state = nn.OptimizerState.for_params(
        net.params,
        total_steps=config.epochs * steps_per_epoch,
        lr_start=config.lr_start,
        lr_max=config.lr_max,
        weight_decay=config.weight_decay,
    )
    stopper = nn.EarlyStopping(config.patience)
    for _ in range(config.epochs):
        for batch in nn.epoch_batches(len(train_idx), config.batch_size, rng):
            idx = train_idx[batch]
            logits, cache = net.forward_cached(Z[idx])
            _, dlogits = nn.bce_with_logits(logits, y[idx])
            grads, _ = net.backward(cache, dlogits)
            nn.adamw_step(net.params, grads, state)
        val_loss, _ = nn.bce_with_logits(net.forward(Z[val_idx]), y[val_idx]) if len(val_idx) else (0.0, None)
        if stopper.update(val_loss, net.params):
            break
    if stopper.best_params is not None:
        net.set_params(stopper.best_params)
    logits = net.forward(Z[split.test]).reshape(-1)
    scores = 1.0 / (1.0 + np.exp(-logits))
    return ProbeResult(auc=auc(scores, y[split.test]), scores=scores, test_indices=split.test, layer=layer)


# ---------------------------------------------------------------------------
# Retrieval
# ---------------------------------------------------------------------------


def knn_retrieve(train_Z: np.ndarray, train_y: np.ndarray, query_Z: np.ndarray, k: int = 5) -> np.ndarray:
    """Fraction of positive labels among the k nearest training points of each query.

    Distance ties are broken by training index order (stable sort).
    """
    train_Z = np.atleast_2d(np.asarray(train_Z, dtype=float))
    query_Z = np.atleast_2d(np.asarray(query_Z, dtype=float))
    train_y = np.asarray(train_y, dtype=float)
    if len(train_Z) == 0:
        raise ValueError("empty training set")
    if k > len(train_Z):
        raise ValueError(f"k={k} exceeds training size {len(train_Z)}")
    d2 = pairwise_sq_dists(query_Z, train_Z)
    neighbors = np.argsort(d2, axis=1, kind="stable")[:, :k]
    return train_y[neighbors].mean(axis=1)


def retrieval_p_amp(scores: np.ndarray, labels: np.ndarray, n_retrieve: int | None = None) -> float:
    """Positive rate among the top-scored candidates (defaults to the positive count)."""
    scores = np.asarray(scores, dtype=float)
    labels = np.asarray(labels, dtype=int)
    if n_retrieve is None:
        n_retrieve = max(1, int(labels.sum()))
    order = np.argsort(-scores, kind="stable")[:n_retrieve]
    return float(labels[order].mean())


# ---------------------------------------------------------------------------
# Latent -> embedding decoding
# ---------------------------------------------------------------------------


@dataclass
class ManifoldMlpConfig:
    hidden: tuple[int, ...] | None = None  # default (4 * d_in, 6 * d_in)
    residual_scale: float = 0.3
    epochs: int = 300
    batch_size: int = 32
    lr_start: float = 3e-5
    lr_max: float = 5e-4
    weight_decay: float = 1e-5
    patience: int = 20
    val_fraction: float = 0.15
    seed: int = 0


@dataclass
class ManifoldMlp:
    """Regression net from proximity rows to embeddings with a residual projection:
    output = net(p) + residual_scale * (embedding of the nearest training row)."""

    net: nn.Mlp
    residual_scale: float
    bank_inputs: np.ndarray
    bank_embeddings: np.ndarray
    input_scale: float = 1.0  # proximity rows are rescaled to median unit norm

    def nearest_bank(self, P: np.ndarray) -> np.ndarray:
        d2 = pairwise_sq_dists(np.atleast_2d(P), self.bank_inputs)
        return np.argmin(d2, axis=1)

    def forward(self, P: np.ndarray) -> np.ndarray:
        P = np.asarray(P, dtype=float)
        single = P.ndim == 1
        P2 = np.atleast_2d(P)
        out = self.net.forward(P2 * self.input_scale)
        out += self.residual_scale * self.bank_embeddings[self.nearest_bank(P2)]
        return out[0] if single else out


def train_manifold_mlp(prox_rows: np.ndarray, E: np.ndarray | EmbeddingMatrix, config: ManifoldMlpConfig | None = None):
    """Fit the latent-to-embedding decoder; returns (model, validation MSE).

    The net regresses onto targets adjusted for the residual projection, so
    the full forward pass (net + scaled nearest-bank embedding) reproduces the
    embeddings. Rows of `prox_rows` and `E` must be aligned.
    """
    config = config or ManifoldMlpConfig()
    P = np.asarray(prox_rows, dtype=float)
    E = E.data.astype(float) if isinstance(E, EmbeddingMatrix) else np.asarray(E, dtype=float)
    if len(P) != len(E):
        raise ValueError(f"proximity rows ({len(P)}) and embeddings ({len(E)}) misaligned")
    n, d_in = P.shape
    rng = np.random.default_rng(config.seed)
    n_val = max(1, int(round(config.val_fraction * n))) if (n >= 10 and config.val_fraction > 0) else 0
    order = rng.permutation(n)
    val_idx, train_idx = order[:n_val], order[n_val:]

    hidden = config.hidden if config.hidden is not None else (4 * d_in, 6 * d_in)
    net = nn.Mlp([d_in, *hidden, E.shape[1]], seed=config.seed)
    scale = 1.0 / float(np.median(np.linalg.norm(P, axis=1)))
    model = ManifoldMlp(net, config.residual_scale, P[train_idx], E[train_idx], input_scale=scale)

    # nearest bank row of a training row is itself, so the regression target
    # is the embedding minus its own scaled residual
    nn_idx = model.nearest_bank(P)
    targets = E - config.residual_scale * model.bank_embeddings[nn_idx]

    steps_per_epoch = max(1, -(-len(train_idx) // config.batch_size))
    state = nn.OptimizerState.for_params(
        net.params,
        total_steps=config.epochs * steps_per_epoch,
        lr_start=config.lr_start,
        lr_max=config.lr_max,
        weight_decay=config.weight_decay,
    )
    stopper = nn.EarlyStopping(config.patience)

    def val_mse():
        idx = val_idx if n_val else train_idx
        return float(np.mean((model.forward(P[idx]) - E[idx]) ** 2))

    for _ in range(config.epochs):
        for batch in nn.epoch_batches(len(train_idx), config.batch_size, rng):
            idx = train_idx[batch]
            pred, cache = net.forward_cached(P[idx] * model.input_scale)
            loss, dloss = nn.mse_loss(pred, targets[idx])
            if not np.isfinite(loss):
                raise FloatingPointError("non-finite manifold regression loss")
            grads, _ = net.backward(cache, dloss)
            nn.adamw_step(net.params, grads, state)
        if stopper.update(val_mse(), net.params):
            break
    if stopper.best_params is not None:
        net.set_params(stopper.best_params)
    return model, val_mse()


def decode_to_sequence(e_hat: np.ndarray, bank: EmbeddingMatrix, sequences: list[SequenceRecord]):
    """Nearest bank row by cosine distance; returns (record, distance), ties to the lower index."""
    e_hat = np.asarray(e_hat, dtype=float)
    if not np.isfinite(e_hat).all():
        raise ValueError("decoded embedding contains NaN or Inf")
    if bank.n == 0 or not sequences:
        raise ValueError("empty sequence bank")
    if bank.n != len(sequences):
        raise ValueError("bank embeddings and sequences misaligned")
    norm = np.linalg.norm(e_hat)
    if norm == 0:
        raise ValueError("decoded embedding has zero norm; cosine distance undefined")
    B = bank.data.astype(float)
    bnorm = np.linalg.norm(B, axis=1)
    cos = (B @ e_hat) / (bnorm * norm)
    dist = 1.0 - cos
    idx = int(np.argmin(dist))
    return sequences[idx], float(dist[idx])


# ---------------------------------------------------------------------------
# Physicochemical descriptors
# ---------------------------------------------------------------------------

# EMBOSS pKa values (as shipped with the EMBOSS `charge`/`iep` programs)
PKA_NTERM = 8.6
PKA_CTERM = 3.6
PKA_BASIC = {"K": 10.8, "R": 12.5, "H": 6.5}
PKA_ACIDIC = {"D": 3.9, "E": 4.1, "C": 8.5, "Y": 10.1}

HYDROPHOBIC_RESIDUES = frozenset("AVLIMFWC")


def net_charge(seq: str, pH: float = 7.0) -> float:
    """Henderson-Hasselbalch net charge including both termini."""
    charge = 1.0 / (1.0 + 10.0 ** (pH - PKA_NTERM))
    charge -= 1.0 / (1.0 + 10.0 ** (PKA_CTERM - pH))
    for ch in seq:
        if ch in PKA_BASIC:
            charge += 1.0 / (1.0 + 10.0 ** (pH - PKA_BASIC[ch]))
        elif ch in PKA_ACIDIC:
            charge -= 1.0 / (1.0 + 10.0 ** (PKA_ACIDIC[ch] - pH))
    return charge


def isoelectric_point(seq: str) -> float:
    """pH at which the net charge vanishes, by bisection over [0, 14].

    The charge is strictly decreasing in pH (every term is), so the root is
    unique; peptides always bracket it because of the two termini.
    """
    lo, hi = 0.0, 14.0
    c_lo, c_hi = net_charge(seq, lo), net_charge(seq, hi)
    assert c_lo > 0 > c_hi, "termini guarantee a sign change over [0, 14]"
    for _ in range(200):
        mid = 0.5 * (lo + hi)
        c = net_charge(seq, mid)
        if abs(c) < 1e-6:
            return mid
        if c > 0:
            lo = mid
        else:
            hi = mid
    return 0.5 * (lo + hi)


def hydrophobic_ratio(seq: str) -> float:
    """Fraction of residues in {A, V, L, I, M, F, W, C}."""
    if not seq:
        raise ValueError("empty sequence")
    return sum(1 for ch in seq if ch in HYDROPHOBIC_RESIDUES) / len(seq)


def descriptor_row(seq: str) -> tuple[float, float, float]:
    return net_charge(seq), isoelectric_point(seq), hydrophobic_ratio(seq)


def write_descriptor_csv(times, sequences, path) -> None:
    """Descriptor trio along a decoded trajectory: t, net_charge, pI, hydrophobic_ratio."""
    with open(path, "w") as fh:
        fh.write("t,net_charge,isoelectric_point,hydrophobic_ratio\n")
        for t, seq in zip(times, sequences):
            q, pi, hr = descriptor_row(seq)
            fh.write(f"{float(t)!r},{q!r},{pi!r},{hr!r}\n")
