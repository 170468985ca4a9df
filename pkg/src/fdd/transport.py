"""Entropic optimal transport and RK4 neural-ODE training for latent interpolation.

Sinkhorn runs in the log domain with epsilon-scaling warm starts. Training
backpropagates exactly through the unrolled RK4 steps; the transport-loss
gradient with respect to the integrated points uses the converged plan
(envelope differentiation), which is exact at the solver's tolerance.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import nn
from .diffusion import pairwise_sq_dists


@dataclass
class OtPlanDiagnostics:
    """Converged entropic plan with its costs and marginal residuals.

    `cost` is the linear transport cost <P, C>; `objective` adds the entropic
    penalty eps * KL(P || mu x nu) and is the value used by the divergence.
    """

    cost: float
    objective: float
    plan: np.ndarray
    potentials: tuple[np.ndarray, np.ndarray]
    iterations: int
    marginal_errors: tuple[float, float]
    eps: float
    stage_costs: list[float] = field(default_factory=list)


@dataclass
class Trajectory:
    times: np.ndarray
    states: np.ndarray

    def __post_init__(self):
        self.times = np.asarray(self.times, dtype=float)
        self.states = np.asarray(self.states, dtype=float)
        if len(self.times) != len(self.states):
            raise ValueError("times and states must align")
        if (np.diff(self.times) <= 0).any():
            raise ValueError("times must be strictly increasing")
        if not np.isfinite(self.states).all():
            raise ValueError("trajectory states contain NaN or Inf")


def _lse(M: np.ndarray, axis: int) -> np.ndarray:
    mx = M.max(axis=axis, keepdims=True)
    out = mx + np.log(np.exp(M - mx).sum(axis=axis, keepdims=True))
    return np.squeeze(out, axis=axis)


def _eps_schedule(eps: float, scaling: float, cost_scale: float) -> list[float]:
    if not (0 < scaling <= 1):
        raise ValueError(f"scaling must lie in (0, 1], got {scaling}")
    start = max(10.0 * eps, cost_scale)
    if scaling == 1.0 or start <= eps:
        return [eps]
    stages = []
    e = start
    while e > eps * (1 + 1e-12):
        stages.append(e)
        e *= scaling
    stages.append(eps)
    return stages


def sinkhorn_ot(
    A: np.ndarray,
    B: np.ndarray,
    eps: float = 0.002,
    scaling: float = 0.9,
    tol: float = 1e-9,
    max_iter: int = 20_000,
) -> OtPlanDiagnostics:
    """Entropic OT between uniform measures on two point clouds, squared Euclidean cost.

    Dual potentials are iterated in the log domain, warm-started through an
    epsilon-scaling ladder that anneals by `scaling` per stage from the cost
    scale (at least 10x eps) down to eps. Identical clouds take the averaged
    symmetric fixed-point update, which converges in a handful of iterations
    at any eps. Raises if the target marginal tolerance is not reached within
    `max_iter` total iterations.
    """
    A = np.atleast_2d(np.asarray(A, dtype=float))
    B = np.atleast_2d(np.asarray(B, dtype=float))
    if eps <= 0:
        raise ValueError(f"eps must be positive, got {eps}")
    symmetric = A.shape == B.shape and np.array_equal(A, B)
    m, k = len(A), len(B)
    mu = np.full(m, 1.0 / m)
    nu = np.full(k, 1.0 / k)
    C = pairwise_sq_dists(A, B)
    log_mu, log_nu = np.log(mu), np.log(nu)

    f = np.zeros(m)
    g = np.zeros(k)
    iterations = 0
    stage_costs: list[float] = []
    plan = None
    err_row = err_col = math.inf
    stages = _eps_schedule(eps, scaling, float(C.max()))
    for stage, e in enumerate(stages):
        stage_tol = tol if stage == len(stages) - 1 else max(tol, 1e-6)
        converged = False
        while iterations < max_iter:
            iterations += 1
            if symmetric:
                f = 0.5 * (f - e * _lse(log_nu[None, :] + (f[None, :] - C) / e, axis=1))
                g = f
            else:
                f = -e * _lse(log_nu[None, :] + (g[None, :] - C) / e, axis=1)
                g = -e * _lse(log_mu[:, None] + (f[:, None] - C) / e, axis=0)
            plan = np.exp(log_mu[:, None] + log_nu[None, :] + (f[:, None] + g[None, :] - C) / e)
            err_row = float(np.abs(plan.sum(axis=1) - mu).max())
            err_col = float(np.abs(plan.sum(axis=0) - nu).max())
            if max(err_row, err_col) < stage_tol:
                converged = True
                break
        stage_costs.append(float(np.sum(plan * C)))
        if not converged:
            raise ValueError(
                f"Sinkhorn did not converge within {max_iter} iterations "
                f"(marginal errors {err_row:.2e}, {err_col:.2e} at eps={e:g}, "
                f"stage {stage + 1}/{len(stages)})"
            )
    cost = float(np.sum(plan * C))
    with np.errstate(divide="ignore", invalid="ignore"):
        ratio = plan / (mu[:, None] * nu[None, :])
        kl = float(np.sum(np.where(plan > 0, plan * np.log(ratio), 0.0)))
    return OtPlanDiagnostics(
        cost=cost,
        objective=cost + eps * kl,
        plan=plan,
        potentials=(f, g),
        iterations=iterations,
        marginal_errors=(err_row, err_col),
        eps=eps,
        stage_costs=stage_costs,
    )


def sinkhorn_divergence(
    A: np.ndarray,
    B: np.ndarray,
    eps: float = 0.002,
    scaling: float = 0.9,
    tol: float = 1e-9,
    max_iter: int = 20_000,
) -> float:
    """Debiased transport cost: OT(A,B) - [OT(A,A) + OT(B,B)] / 2 (nonnegative, zero iff equal)."""
    ab = sinkhorn_ot(A, B, eps, scaling, tol, max_iter).objective
    aa = sinkhorn_ot(A, A, eps, scaling, tol, max_iter).objective
    bb = sinkhorn_ot(B, B, eps, scaling, tol, max_iter).objective
    return ab - 0.5 * (aa + bb)


def _ot_grads(A, B, plan):
    """d<P,C>/dA and d<P,C>/dB at the converged plan (squared Euclidean cost)."""
    row = plan.sum(axis=1)
    col = plan.sum(axis=0)
    dA = 2.0 * (row[:, None] * A - plan @ B)
    dB = 2.0 * (col[:, None] * B - plan.T @ A)
    return dA, dB


def sinkhorn_divergence_with_grad(
    A: np.ndarray,
    B: np.ndarray,
    eps: float = 0.002,
    scaling: float = 0.9,
    tol: float = 1e-9,
    max_iter: int = 20_000,
):
    """Divergence and its gradient with respect to the source points A.

    At convergence the value function's derivative passes through the plan
    only (the potentials are stationary), so the gradient is assembled from
    the three converged plans.
    """
    A = np.atleast_2d(np.asarray(A, dtype=float))
    B = np.atleast_2d(np.asarray(B, dtype=float))
    ab = sinkhorn_ot(A, B, eps, scaling, tol, max_iter)
    aa = sinkhorn_ot(A, A, eps, scaling, tol, max_iter)
    bb = sinkhorn_ot(B, B, eps, scaling, tol, max_iter)
    value = ab.objective - 0.5 * (aa.objective + bb.objective)
    dA_ab, _ = _ot_grads(A, B, ab.plan)
    dA1, dA2 = _ot_grads(A, A, aa.plan)
    grad = dA_ab - 0.5 * (dA1 + dA2)
    return value, grad


# ---------------------------------------------------------------------------
# Vector field and RK4
# ---------------------------------------------------------------------------


class VectorField:
    """MLP field h(z, t): input is z with the scaled time appended, output dz/dt.

    The final affine layer starts at zero so a fresh field is the identity
    flow; time is rescaled to [0, 1] over [t_start, t_end].
    """

    def __init__(self, d: int, hidden=(64, 64), t_start: float = 0.0, t_end: float = 4.0, seed: int = 0):
        if t_end <= t_start:
            raise ValueError("t_end must exceed t_start")
        self.d = d
        self.t_start = t_start
        self.t_end = t_end
        # tanh keeps the field smooth, which RK4 rewards
        acts = ["tanh"] * len(hidden) + ["identity"]
        self.net = nn.Mlp([d + 1, *hidden, d], acts, seed=seed)
        self.net.zero_last_layer()

    def _augment(self, Z: np.ndarray, t: float) -> np.ndarray:
        s = (t - self.t_start) / (self.t_end - self.t_start)
        return np.concatenate([Z, np.full((len(Z), 1), s)], axis=1)

    def __call__(self, Z: np.ndarray, t: float) -> np.ndarray:
        Z = np.atleast_2d(np.asarray(Z, dtype=float))
        return self.net.forward(self._augment(Z, t))

    def eval_cached(self, Z: np.ndarray, t: float):
        return self.net.forward_cached(self._augment(Z, t))

    def backward(self, cache, dout):
        grads, din = self.net.backward(cache, dout)
        return grads, din[:, :-1]  # drop the time column


def _rk4_step(f, Z, t, h):
    k1 = f(Z, t)
    k2 = f(Z + 0.5 * h * k1, t + 0.5 * h)
    k3 = f(Z + 0.5 * h * k2, t + 0.5 * h)
    k4 = f(Z + h * k3, t + h)
    return Z + (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)


def rk4_integrate(field, z0: np.ndarray, times: np.ndarray) -> Trajectory:
    """Classical RK4 between consecutive time points.

    `field` is any callable (Z, t) -> dZ/dt over batched states. A NaN state
    aborts with the step index. Returns the trajectory of z0 (single state)
    or of the whole batch.
    """
    times = np.asarray(times, dtype=float)
    if len(times) < 2:
        raise ValueError("need at least two time points")
    if (np.diff(times) <= 0).any():
        raise ValueError("times must be strictly increasing (reversed integration unsupported)")
    z0 = np.asarray(z0, dtype=float)
    single = z0.ndim == 1
    Z = np.atleast_2d(z0)
    out = np.empty((len(times),) + Z.shape)
    out[0] = Z
    for i in range(len(times) - 1):
        Z = _rk4_step(field, Z, times[i], times[i + 1] - times[i])
        if not np.isfinite(Z).all():
            raise FloatingPointError(f"non-finite state at integration step {i + 1}")
        out[i + 1] = Z
    states = out[:, 0, :] if single else out
    return Trajectory(times=times, states=states)


def _integrate_cached(field: VectorField, Z0: np.ndarray, times: np.ndarray):
    Z = np.atleast_2d(np.asarray(Z0, dtype=float))
    caches = []
    for i in range(len(times) - 1):
        t, h = times[i], times[i + 1] - times[i]
        k1, c1 = field.eval_cached(Z, t)
        k2, c2 = field.eval_cached(Z + 0.5 * h * k1, t + 0.5 * h)
        k3, c3 = field.eval_cached(Z + 0.5 * h * k2, t + 0.5 * h)
        k4, c4 = field.eval_cached(Z + h * k3, t + h)
        Z = Z + (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
        if not np.isfinite(Z).all():
            raise FloatingPointError(f"non-finite state at integration step {i + 1}")
        caches.append((h, c1, c2, c3, c4))
    return Z, caches


def _integrate_backward(field: VectorField, caches, dZ_final):
    """Reverse pass of the unrolled RK4 integration.

    Returns (parameter gradients, gradient w.r.t. the initial states).
    """
    grads = [np.zeros_like(p) for p in field.net.params]

    def acc(gs):
        for a, b in zip(grads, gs):
            a += b

    dZ = dZ_final.copy()
    for h, c1, c2, c3, c4 in reversed(caches):
        dk1 = (h / 6.0) * dZ
        dk2 = (h / 3.0) * dZ
        dk3 = (h / 3.0) * dZ
        dk4 = (h / 6.0) * dZ
        g4, dz4 = field.backward(c4, dk4)
        acc(g4)
        dZ = dZ + dz4
        dk3 = dk3 + h * dz4
        g3, dz3 = field.backward(c3, dk3)
        acc(g3)
        dZ = dZ + dz3
        dk2 = dk2 + 0.5 * h * dz3
        g2, dz2 = field.backward(c2, dk2)
        acc(g2)
        dZ = dZ + dz2
        dk1 = dk1 + 0.5 * h * dz2
        g1, dz1 = field.backward(c1, dk1)
        acc(g1)
        dZ = dZ + dz1
    return grads, dZ


def interpolant_loss_and_grads(
    field: VectorField,
    source_batch: np.ndarray,
    target_batch: np.ndarray,
    times: np.ndarray,
    eps: float,
    scaling: float = 0.9,
    tol: float = 1e-9,
    max_iter: int = 20_000,
):
    """Sinkhorn divergence between the pushed-forward source batch and the target,
    with exact gradients through the unrolled integration."""
    pushed, caches = _integrate_cached(field, source_batch, times)
    value, d_pushed = sinkhorn_divergence_with_grad(pushed, target_batch, eps, scaling, tol, max_iter)
    grads, _ = _integrate_backward(field, caches, d_pushed)
    return value, grads, pushed


# ---------------------------------------------------------------------------
# Training
# ---------------------------------------------------------------------------


@dataclass
class OdeTrainConfig:
    t_start: float = 0.0
    t_end: float = 4.0
    n_timepoints: int = 200
    blur: float = 0.002
    scaling: float = 0.9
    lr: float = 1e-4
    epochs: int = 500
    batch_size: int = 64
    hidden: tuple[int, ...] = (64, 64)
    sinkhorn_tol: float = 1e-4
    sinkhorn_max_iter: int = 20_000
    abort_after_increases: int = 50
    seed: int = 0


def train_interpolant(source: np.ndarray, target: np.ndarray, config: OdeTrainConfig | None = None):
    """Fit the vector field transporting the source latents onto the target latents.

    Each step resamples source/target mini-batches, integrates the source
    batch over the configured time grid, and descends the Sinkhorn divergence
    with AdamW at a constant learning rate. Aborts if the divergence increases
    for `abort_after_increases` consecutive epochs. Returns (field, history).
    """
    config = config or OdeTrainConfig()
    source = np.atleast_2d(np.asarray(source, dtype=float))
    target = np.atleast_2d(np.asarray(target, dtype=float))
    if source.shape[1] != target.shape[1]:
        raise ValueError("source and target must share the latent dimension")
    d = source.shape[1]
    field = VectorField(d, config.hidden, config.t_start, config.t_end, seed=config.seed)
    times = np.linspace(config.t_start, config.t_end, config.n_timepoints)
    rng = np.random.default_rng(config.seed + 1)
    state = nn.OptimizerState.for_params(
        field.net.params,
        total_steps=config.epochs,
        lr_start=config.lr,
        lr_max=config.lr,
        weight_decay=0.0,
    )
    history: list[float] = []
    increases = 0
    for epoch in range(config.epochs):
        src = source[_batch_indices(rng, len(source), config.batch_size)]
        tgt = target[_batch_indices(rng, len(target), config.batch_size)]
        loss, grads, _ = interpolant_loss_and_grads(
            field, src, tgt, times, config.blur, config.scaling,
            config.sinkhorn_tol, config.sinkhorn_max_iter,
        )
        nn.adamw_step(field.net.params, grads, state)
        if history and loss > history[-1]:
            increases += 1
            if increases >= config.abort_after_increases:
                raise RuntimeError(
                    f"divergence increased for {increases} consecutive epochs "
                    f"(epoch {epoch}, loss {loss:.6g}); aborting"
                )
        else:
            increases = 0
        history.append(loss)
    return field, history


def _batch_indices(rng, n, batch_size):
    if batch_size >= n:
        return np.arange(n)
    return rng.choice(n, size=batch_size, replace=False)


def sample_trajectory(field: VectorField, z0: np.ndarray, n_timepoints: int = 200) -> Trajectory:
    """Integrate one latent point over the field's own time interval."""
    times = np.linspace(field.t_start, field.t_end, n_timepoints)
    return rk4_integrate(field, z0, times)


def write_trajectory_csv(traj: Trajectory, path) -> None:
    d = traj.states.shape[1]
    with open(path, "w") as fh:
        fh.write("t," + ",".join(f"z_{i + 1}" for i in range(d)) + "\n")
        for t, row in zip(traj.times, traj.states):
            fh.write(f"{float(t)!r}," + ",".join(repr(float(v)) for v in row) + "\n")
