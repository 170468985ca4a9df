"""Parametric embedding of proximity vectors with latent alignment to potential coordinates.

The autoencoder reconstructs each sample's proximity distribution (softmax
decoder head, KL loss) while a second term pins the latent code to the
precomputed potential coordinates. A plain embedding autoencoder baseline
(MSE reconstruction, no supervision) lives here too.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import nn
from .diffusion import PotentialCoords
from .forest import ProximityMatrix


@dataclass
class RfaeConfig:
    latent_dim: int = 2
    hidden: tuple[int, ...] = (64,)
    epochs: int = 300
    batch_size: int = 32
    lr_start: float = 3e-5
    lr_max: float = 5e-4
    weight_decay: float = 1e-5
    patience: int = 20
    val_fraction: float = 0.15
    seed: int = 0


@dataclass
class RfaeModel:
    encoder: nn.Mlp
    decoder: nn.Mlp
    lam: float
    d: int
    n_prox: int
    target_mean: np.ndarray
    target_std: np.ndarray
    # proximity rows are tiny probability vectors; the encoder sees them scaled
    # to median unit norm so first-layer pre-activations start at unit scale
    input_scale: float = 1.0


@dataclass
class PlainAe:
    encoder: nn.Mlp
    decoder: nn.Mlp
    d: int
    D: int


@dataclass
class EpochRow:
    epoch: int
    total: float
    kl: float
    geo: float
    lr: float


def softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def kl_reconstruction(p: np.ndarray, p_hat: np.ndarray) -> float:
    """KL(p || p_hat) with the 0 log 0 = 0 convention.

    p_hat must be strictly positive wherever p is; a zero there makes the
    loss infinite and raises instead of returning inf.
    """
    p = np.asarray(p, dtype=float)
    p_hat = np.asarray(p_hat, dtype=float)
    support = p > 0
    if (p_hat[support] <= 0).any():
        raise ValueError("reconstruction assigns zero probability inside the support; KL is infinite")
    return float(np.sum(p[support] * np.log(p[support] / p_hat[support])))


def renormalize_rows(P: np.ndarray) -> np.ndarray:
    P = np.asarray(P, dtype=float)
    if (P < 0).any():
        raise ValueError("proximity rows must be nonnegative")
    sums = P.sum(axis=1, keepdims=True)
    if (sums <= 0).any():
        raise ValueError("proximity row sums to zero; cannot renormalize")
    return P / sums


def rfae_loss_and_grads(model: RfaeModel, P: np.ndarray, ZG: np.ndarray):
    """Composite loss over a batch of proximity rows P and standardized targets ZG.

    Returns (total, kl_term, geo_term, encoder_grads, decoder_grads). The two
    terms are the batch means; total = lam * kl + (1 - lam) * geo.
    """
    B = len(P)
    z, enc_cache = model.encoder.forward_cached(P * model.input_scale)
    logits, dec_cache = model.decoder.forward_cached(z)
    p_hat = softmax(logits)
    kl_term = sum(kl_reconstruction(P[i], p_hat[i]) for i in range(B)) / B
    diff = z - ZG
    geo_term = float(np.sum(diff * diff)) / B
    total = model.lam * kl_term + (1.0 - model.lam) * geo_term
    # dKL/dlogits for each row is p_hat - p; batch mean and lam weighting applied here
    dlogits = model.lam * (p_hat - P) / B
    dec_grads, dz_rec = model.decoder.backward(dec_cache, dlogits)
    dz = dz_rec + (1.0 - model.lam) * 2.0 * diff / B
    enc_grads, _ = model.encoder.backward(enc_cache, dz)
    return total, kl_term, geo_term, enc_grads, dec_grads


def _standardize_targets(ZG: np.ndarray):
    mean = ZG.mean(axis=0)
    std = ZG.std(axis=0)
    std = np.where(std > 0, std, 1.0)
    return (ZG - mean) / std, mean, std


def train_rfae(
    prox: ProximityMatrix | np.ndarray,
    targets: PotentialCoords | np.ndarray,
    lam: float = 0.5,
    config: RfaeConfig | None = None,
):
    """Train the proximity autoencoder with the composite reconstruction/alignment loss.

    Proximity rows are renormalized to probability vectors, targets are
    standardized per dimension, and early stopping keeps the parameters with
    the best validation loss. Returns (model, training log rows).
    """
    config = config or RfaeConfig()
    if not 0.0 <= lam <= 1.0:
        raise ValueError(f"lambda must lie in [0, 1], got {lam}")
    P = renormalize_rows(prox.K if isinstance(prox, ProximityMatrix) else prox)
    ZG_raw = targets.Z if isinstance(targets, PotentialCoords) else np.asarray(targets, dtype=float)
    if len(ZG_raw) != len(P):
        raise ValueError("proximity rows and targets must align")
    ZG, mean, std = _standardize_targets(ZG_raw)
    n, n_prox = P.shape
    d = ZG.shape[1]

    enc_widths = [n_prox, *config.hidden, d]
    dec_widths = [d, *reversed(config.hidden), n_prox]
    encoder = nn.Mlp(enc_widths, seed=config.seed)
    decoder = nn.Mlp(dec_widths, seed=config.seed + 1)
    scale = 1.0 / float(np.median(np.linalg.norm(P, axis=1)))
    model = RfaeModel(encoder, decoder, lam, d, n_prox, mean, std, input_scale=scale)

    rng = np.random.default_rng(config.seed + 2)
    n_val = max(1, int(round(config.val_fraction * n))) if (n >= 10 and config.val_fraction > 0) else 0
    order = rng.permutation(n)
    val_idx, train_idx = order[:n_val], order[n_val:]

    params = encoder.params + decoder.params
    steps_per_epoch = max(1, -(-len(train_idx) // config.batch_size))
    state = nn.OptimizerState.for_params(
        params,
        total_steps=config.epochs * steps_per_epoch,
        lr_start=config.lr_start,
        lr_max=config.lr_max,
        weight_decay=config.weight_decay,
    )
    stopper = nn.EarlyStopping(config.patience)
    log: list[EpochRow] = []

    def eval_loss(idx):
        total, _, _, _, _ = rfae_loss_and_grads(model, P[idx], ZG[idx])
        return total

    for epoch in range(config.epochs):
        kl_sum = geo_sum = total_sum = 0.0
        n_batches = 0
        for batch in nn.epoch_batches(len(train_idx), config.batch_size, rng):
            idx = train_idx[batch]
            total, kl_term, geo_term, enc_grads, dec_grads = rfae_loss_and_grads(model, P[idx], ZG[idx])
            if not np.isfinite(total):
                raise FloatingPointError(f"non-finite loss at epoch {epoch}")
            nn.adamw_step(params, enc_grads + dec_grads, state)
            kl_sum += kl_term
            geo_sum += geo_term
            total_sum += total
            n_batches += 1
        lr = nn.lr_at(min(state.step, state.total_steps), state.total_steps, state.lr_start, state.lr_max)
        log.append(EpochRow(epoch, total_sum / n_batches, kl_sum / n_batches, geo_sum / n_batches, lr))
        val_loss = eval_loss(val_idx) if n_val else total_sum / n_batches
        if stopper.update(val_loss, params):
            break
    if stopper.best_params is not None:
        for dst, src in zip(params, stopper.best_params):
            dst[...] = src
    return model, log


def encode(model: RfaeModel, p: np.ndarray) -> np.ndarray:
    """Latent coordinates of one proximity vector (or a batch of them)."""
    p = np.asarray(p, dtype=float)
    single = p.ndim == 1
    P = p[None, :] if single else p
    if P.shape[1] != model.n_prox:
        raise ValueError(f"proximity length {P.shape[1]} != expected {model.n_prox}")
    P = renormalize_rows(P)
    z = model.encoder.forward(P * model.input_scale)
    return z[0] if single else z


def decode(model: RfaeModel, z: np.ndarray) -> np.ndarray:
    """Reconstructed proximity distribution(s); rows sum to 1 via the softmax head."""
    return softmax(model.decoder.forward(z))


def write_training_log(log: list[EpochRow], path) -> None:
    with open(path, "w") as fh:
        fh.write("epoch,total,kl,geo,lr\n")
        for row in log:
            fh.write(f"{row.epoch},{row.total!r},{row.kl!r},{row.geo!r},{row.lr!r}\n")


# ---------------------------------------------------------------------------
# Plain embedding autoencoder baseline
# ---------------------------------------------------------------------------


def train_plain_ae(E: np.ndarray, d: int, config: RfaeConfig | None = None):
    """MSE autoencoder on raw embedding rows; returns (model, final validation MSE)."""
    config = config or RfaeConfig()
    E = np.asarray(E, dtype=float)
    if not np.isfinite(E).all():
        raise ValueError("embeddings contain NaN or Inf")
    n, D = E.shape
    if d >= D:
        raise ValueError(f"latent dim {d} must be smaller than embedding width {D}")

    encoder = nn.Mlp([D, *config.hidden, d], seed=config.seed)
    decoder = nn.Mlp([d, *reversed(config.hidden), D], seed=config.seed + 1)
    model = PlainAe(encoder, decoder, d, D)

    rng = np.random.default_rng(config.seed + 2)
    n_val = max(1, int(round(config.val_fraction * n))) if (n >= 10 and config.val_fraction > 0) else 0
    order = rng.permutation(n)
    val_idx, train_idx = order[:n_val], order[n_val:]

    params = encoder.params + decoder.params
    steps_per_epoch = max(1, -(-len(train_idx) // config.batch_size))
    state = nn.OptimizerState.for_params(
        params,
        total_steps=config.epochs * steps_per_epoch,
        lr_start=config.lr_start,
        lr_max=config.lr_max,
        weight_decay=config.weight_decay,
    )
    stopper = nn.EarlyStopping(config.patience)

    def val_mse():
        idx = val_idx if n_val else train_idx
        recon = decoder.forward(encoder.forward(E[idx]))
        return float(np.mean((recon - E[idx]) ** 2))

    for epoch in range(config.epochs):
        for batch in nn.epoch_batches(len(train_idx), config.batch_size, rng):
            idx = train_idx[batch]
            z, enc_cache = encoder.forward_cached(E[idx])
            recon, dec_cache = decoder.forward_cached(z)
            loss, dloss = nn.mse_loss(recon, E[idx])
            if not np.isfinite(loss):
                raise FloatingPointError(f"non-finite loss at epoch {epoch}")
            dec_grads, dz = decoder.backward(dec_cache, dloss)
            enc_grads, _ = encoder.backward(enc_cache, dz)
            nn.adamw_step(params, enc_grads + dec_grads, state)
        if stopper.update(val_mse(), params):
            break
    if stopper.best_params is not None:
        for dst, src in zip(params, stopper.best_params):
            dst[...] = src
    return model, val_mse()
