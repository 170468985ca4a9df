"""Dense MLPs with reverse-mode gradients, AdamW, and the shared learning-rate schedule.

Everything here is plain numpy float64. No general autodiff graph: layers are
affine maps plus {relu, tanh, identity} activations, and backward() returns
both parameter gradients and the input gradient so callers can chain nets
(encoder/decoder stacks, unrolled ODE solvers).
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

ACTIVATIONS = ("relu", "tanh", "identity")
_ADAM_BETA1 = 0.9
_ADAM_BETA2 = 0.999
_ADAM_EPS = 1e-8


def _act(name: str, z: np.ndarray) -> np.ndarray:
    if name == "relu":
        return np.maximum(z, 0.0)
    if name == "tanh":
        return np.tanh(z)
    return z


def _act_grad(name: str, z: np.ndarray, a: np.ndarray) -> np.ndarray:
    if name == "relu":
        return (z > 0.0).astype(z.dtype)
    if name == "tanh":
        return 1.0 - a * a
    return np.ones_like(z)


class Mlp:
    """Layered perceptron: widths[0] inputs -> widths[-1] outputs.

    `activations` has one entry per weight layer; defaults to relu on hidden
    layers and identity on the output. Weights use uniform Kaiming-style
    init scaled by fan-in, drawn from the given seed.
    """

    def __init__(self, widths: list[int], activations: list[str] | None = None, seed: int = 0):
        if len(widths) < 2:
            raise ValueError("need at least an input and an output width")
        if any(w < 1 for w in widths):
            raise ValueError(f"widths must be positive, got {widths}")
        if activations is None:
            activations = ["relu"] * (len(widths) - 2) + ["identity"]
        if len(activations) != len(widths) - 1:
            raise ValueError(f"{len(widths) - 1} layers but {len(activations)} activations")
        for a in activations:
            if a not in ACTIVATIONS:
                raise ValueError(f"unknown activation {a!r}")
        self.widths = list(widths)
        self.activations = list(activations)
        self.seed = seed
        rng = np.random.default_rng(seed)
        self.params: list[np.ndarray] = []
        for fan_in, fan_out in zip(widths[:-1], widths[1:]):
            bound = math.sqrt(6.0 / fan_in)
            self.params.append(rng.uniform(-bound, bound, size=(fan_in, fan_out)))
            self.params.append(np.zeros(fan_out))

    @property
    def n_layers(self) -> int:
        return len(self.widths) - 1

    def forward(self, X: np.ndarray) -> np.ndarray:
        return self.forward_cached(X)[0]

    def forward_cached(self, X: np.ndarray):
        """Forward pass keeping per-layer pre/post activations for backward()."""
        X = np.asarray(X, dtype=float)
        squeeze = X.ndim == 1
        if squeeze:
            X = X[None, :]
        if X.shape[1] != self.widths[0]:
            raise ValueError(f"batch width {X.shape[1]} != input width {self.widths[0]}")
        pre, post = [], []
        a = X
        for l in range(self.n_layers):
            W, b = self.params[2 * l], self.params[2 * l + 1]
            z = a @ W + b
            a = _act(self.activations[l], z)
            pre.append(z)
            post.append(a)
        out = a[0] if squeeze else a
        return out, {"X": X, "pre": pre, "post": post}

    def backward(self, cache: dict, grad_out: np.ndarray):
        """Backprop `grad_out` (dL/d output) through the cached forward pass.

        Returns (param_grads, input_grad); param_grads matches self.params.
        """
        if not isinstance(cache, dict) or "pre" not in cache:
            raise ValueError("backward requires the cache from forward_cached")
        g = np.asarray(grad_out, dtype=float)
        if g.ndim == 1:
            g = g[None, :]
        if g.shape != cache["post"][-1].shape:
            raise ValueError(f"grad shape {g.shape} != output shape {cache['post'][-1].shape}")
        grads = [np.zeros_like(p) for p in self.params]
        for l in range(self.n_layers - 1, -1, -1):
            z, a = cache["pre"][l], cache["post"][l]
            g = g * _act_grad(self.activations[l], z, a)
            a_prev = cache["X"] if l == 0 else cache["post"][l - 1]
            grads[2 * l] = a_prev.T @ g
            grads[2 * l + 1] = g.sum(axis=0)
            g = g @ self.params[2 * l].T
        return grads, g

    def copy_params(self) -> list[np.ndarray]:
        return [p.copy() for p in self.params]

    def set_params(self, params: list[np.ndarray]) -> None:
        for dst, src in zip(self.params, params):
            dst[...] = src

    def zero_last_layer(self) -> None:
        """Zero the final affine map (used for vector fields that start as a no-op)."""
        self.params[-2][...] = 0.0
        self.params[-1][...] = 0.0


# ---------------------------------------------------------------------------
# AdamW
# ---------------------------------------------------------------------------


@dataclass
class OptimizerState:
    """AdamW moments plus the schedule endpoints shared by all trained nets."""

    m: list[np.ndarray]
    v: list[np.ndarray]
    step: int
    total_steps: int
    lr_start: float
    lr_max: float
    weight_decay: float

    @classmethod
    def for_params(cls, params, total_steps, lr_start=3e-5, lr_max=5e-4, weight_decay=1e-5):
        return cls(
            m=[np.zeros_like(p) for p in params],
            v=[np.zeros_like(p) for p in params],
            step=0,
            total_steps=total_steps,
            lr_start=lr_start,
            lr_max=lr_max,
            weight_decay=weight_decay,
        )


def lr_at(step: int, total_steps: int, lr_start: float, lr_max: float) -> float:
    """Linear warmup from lr_start over the first 10% of steps, cosine decay back to lr_start."""
    if not 0 <= step <= total_steps:
        raise ValueError(f"step {step} outside [0, {total_steps}]")
    warmup = 0.1 * total_steps
    if step < warmup:
        return lr_start + (lr_max - lr_start) * (step / warmup)
    if total_steps == warmup:
        return lr_max
    frac = (step - warmup) / (total_steps - warmup)
    return lr_start + (lr_max - lr_start) * 0.5 * (1.0 + math.cos(math.pi * frac))


def adamw_step(params: list[np.ndarray], grads: list[np.ndarray], state: OptimizerState) -> None:
    """One bias-corrected AdamW update in place, with decoupled weight decay.

    The learning rate comes from lr_at over the state's schedule. NaN or Inf
    gradients abort training with a diagnostic naming the parameter.
    """
    for i, g in enumerate(grads):
        if not np.isfinite(g).all():
            raise FloatingPointError(
                f"non-finite gradient in parameter {i} at step {state.step}; training aborted"
            )
    state.step += 1
    t = state.step
    lr = lr_at(min(t, state.total_steps), state.total_steps, state.lr_start, state.lr_max)
    for p, g, m, v in zip(params, grads, state.m, state.v):
        m *= _ADAM_BETA1
        m += (1.0 - _ADAM_BETA1) * g
        v *= _ADAM_BETA2
        v += (1.0 - _ADAM_BETA2) * g * g
        m_hat = m / (1.0 - _ADAM_BETA1**t)
        v_hat = v / (1.0 - _ADAM_BETA2**t)
        p -= lr * (m_hat / (np.sqrt(v_hat) + _ADAM_EPS) + state.weight_decay * p)


# ---------------------------------------------------------------------------
# Training-loop helpers
# ---------------------------------------------------------------------------


@dataclass
class TrainConfig:
    epochs: int = 300
    batch_size: int = 32
    lr_start: float = 3e-5
    lr_max: float = 5e-4
    weight_decay: float = 1e-5
    patience: int = 20
    seed: int = 0


@dataclass
class EarlyStopping:
    """Keep the best-so-far parameters; stop after `patience` epochs without improvement."""

    patience: int
    best_loss: float = math.inf
    best_params: list[np.ndarray] | None = None
    epochs_since_best: int = 0

    def update(self, loss: float, params: list[np.ndarray]) -> bool:
        """Record an epoch's validation loss; returns True when training should stop."""
        if loss < self.best_loss:
            self.best_loss = loss
            self.best_params = [p.copy() for p in params]
            self.epochs_since_best = 0
        else:
            self.epochs_since_best += 1
        return self.epochs_since_best >= self.patience


def epoch_batches(n: int, batch_size: int, rng: np.random.Generator):
    """Yield shuffled index batches covering 0..n-1 once."""
    order = rng.permutation(n)
    for start in range(0, n, batch_size):
        yield order[start:start + batch_size]


def mse_loss(pred: np.ndarray, target: np.ndarray):
    """Mean over all entries of squared error; returns (loss, dloss/dpred)."""
    diff = pred - target
    loss = float(np.mean(diff * diff))
    return loss, (2.0 / diff.size) * diff


def bce_with_logits(logits: np.ndarray, labels: np.ndarray):
    """Binary cross-entropy on raw logits; returns (loss, dloss/dlogits)."""
    z = np.asarray(logits, dtype=float).reshape(-1)
    y = np.asarray(labels, dtype=float).reshape(-1)
    # log(1 + e^z) computed stably for both signs of z
    loss = float(np.mean(np.maximum(z, 0.0) - z * y + np.log1p(np.exp(-np.abs(z)))))
    sig = 1.0 / (1.0 + np.exp(-z))
    return loss, ((sig - y) / z.size).reshape(np.shape(logits))


# ---------------------------------------------------------------------------
# Checkpoints
# ---------------------------------------------------------------------------

_CKPT_MAGIC = b"FDDM"
_CKPT_VERSION = 1
_ACT_CODE = {name: i for i, name in enumerate(ACTIVATIONS)}


def save_mlp(net: Mlp, path: str | Path) -> None:
    """Versioned binary checkpoint: widths, activations, f32 parameters, seed."""
    with open(path, "wb") as fh:
        fh.write(_CKPT_MAGIC)
        fh.write(struct.pack("<IqI", _CKPT_VERSION, net.seed, len(net.widths)))
        fh.write(struct.pack(f"<{len(net.widths)}Q", *net.widths))
        fh.write(struct.pack(f"<{len(net.activations)}B", *(_ACT_CODE[a] for a in net.activations)))
        for p in net.params:
            fh.write(p.astype("<f4").tobytes())


def load_mlp(path: str | Path) -> Mlp:
    raw = Path(path).read_bytes()
    if raw[:4] != _CKPT_MAGIC:
        raise ValueError(f"{path}: not an MLP checkpoint")
    version, seed, n_widths = struct.unpack("<IqI", raw[4:20])
    if version != _CKPT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")
    off = 20
    widths = list(struct.unpack(f"<{n_widths}Q", raw[off:off + 8 * n_widths]))
    off += 8 * n_widths
    codes = struct.unpack(f"<{n_widths - 1}B", raw[off:off + n_widths - 1])
    off += n_widths - 1
    net = Mlp(widths, [ACTIVATIONS[c] for c in codes], seed=seed)
    for p in net.params:
        flat = np.frombuffer(raw[off:off + 4 * p.size], dtype="<f4").astype(float)
        if flat.size != p.size:
            raise ValueError(f"{path}: truncated parameter block")
        p[...] = flat.reshape(p.shape)
        off += 4 * p.size
    return net
