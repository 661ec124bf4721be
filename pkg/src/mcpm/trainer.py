"""ELBO maximization: Adam on the unconstrained state with minibatching,
domain-violation step rejection, and best-state tracking.

The loop never clamps parameters. A proposed step that lands outside the
MGF domain (or breaks a factorization) shows up as a non-finite
objective; the step is halved a bounded number of times and rejected
outright if that fails, so the iterate only ever moves between states
where the bound is real.
"""

from __future__ import annotations

import json
import time
from dataclasses import dataclass, field, replace

import jax
import numpy as np
from jax import numpy as jnp

from .data import CountGrid
from .elbo import Minibatch, _elbo, _kl_u, _kl_w, batch_from_grid, pad_batch, pool_cells
from .exceptions import FactorizationError, TrainingFailureError
from .model import ModelConfig, VariationalState, init_state, latent_marginals, save_checkpoint


@dataclass(frozen=True)
class TrainConfig:
    """Optimization settings.

    batch_size None means full-batch. Setting both betas to 0 degrades
    Adam to the normalized update rho * g / (|g| + eps) (sign-like
    steps, not plain SGD; the running averages vanish but the
    second-moment normalization does not).
    """

    learning_rate: float = 1e-2
    epochs: int = 1500
    batch_size: int | None = None
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    seed: int = 0
    convergence_rtol: float = 1e-6
    convergence_window: int = 50
    max_halvings: int = 10
    checkpoint_every: int | None = None
    checkpoint_path: str | None = None

    def __post_init__(self):
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be positive")
        if self.epochs < 1:
            raise ValueError("epochs must be positive")
        if self.batch_size is not None and self.batch_size < 1:
            raise ValueError("batch_size must be positive or None for full batch")
        for name in ("adam_beta1", "adam_beta2"):
            beta = getattr(self, name)
            if not 0.0 <= beta < 1.0:
                raise ValueError(f"{name} must lie in [0, 1)")
        if self.convergence_window < 1:
            raise ValueError("convergence_window must be positive")
        if self.max_halvings < 0:
            raise ValueError("max_halvings must be nonnegative")


@dataclass
class TrainTrace:
    """Per-epoch record of the full-data bound and its parts."""

    epoch: list = field(default_factory=list)
    elbo: list = field(default_factory=list)
    kl_u: list = field(default_factory=list)
    kl_w: list = field(default_factory=list)
    ell: list = field(default_factory=list)
    grad_norm: list = field(default_factory=list)
    seconds: list = field(default_factory=list)
    rejected_steps: int = 0

    def append(self, epoch, elbo, kl_u, kl_w, ell, grad_norm, seconds):
        self.epoch.append(int(epoch))
        self.elbo.append(float(elbo))
        self.kl_u.append(float(kl_u))
        self.kl_w.append(float(kl_w))
        self.ell.append(float(ell))
        self.grad_norm.append(float(grad_norm))
        self.seconds.append(float(seconds))

    def __len__(self):
        return len(self.epoch)

    def to_csv(self, path, meta: dict | None = None, wall_clock: bool = True) -> None:
        """Write the trace; wall_clock=False drops the timing column so
        reruns with one seed produce identical bytes."""
        with open(path, "w", newline="") as handle:
            for key, value in (meta or {}).items():
                handle.write(f"# {key}: {json.dumps(value, sort_keys=True)}\n")
            handle.write(f"# rejected_steps: {self.rejected_steps}\n")
            header = "epoch,elbo,kl_u,kl_w,ell,grad_norm"
            handle.write(header + (",seconds" if wall_clock else "") + "\n")
            for i in range(len(self.epoch)):
                row = [
                    str(self.epoch[i]),
                    repr(self.elbo[i]),
                    repr(self.kl_u[i]),
                    repr(self.kl_w[i]),
                    repr(self.ell[i]),
                    repr(self.grad_norm[i]),
                ]
                if wall_clock:
                    row.append(repr(self.seconds[i]))
                handle.write(",".join(row) + "\n")


# ---------------------------------------------------------------------------
# gradients


def trainable_mask(state: VariationalState) -> VariationalState:
    """Boolean pytree matching the state: True where optimization may move.

    Fixed/limit weight modes freeze what their posterior lacks, and
    inducing inputs move only when the config asks for it.
    """
    cfg = state.config

    def full(value, flag):
        return None if value is None else np.full(np.shape(value), bool(flag))

    return replace(
        state,
        z=full(state.z, cfg.train_inducing),
        u_mean=full(state.u_mean, True),
        u_cov_factor=full(state.u_cov_factor, True),
        w_mean=full(state.w_mean, not cfg.weights_are_fixed),
        w_cov=full(state.w_cov, True),
        log_latent_variance=full(state.log_latent_variance, True),
        log_latent_lengthscales=full(state.log_latent_lengthscales, True),
        log_weight_variance=full(state.log_weight_variance, True),
        log_weight_lengthscales=full(state.log_weight_lengthscales, True),
        offsets=full(state.offsets, True),
    )


def _apply_mask(grads, mask):
    return jax.tree_util.tree_map(lambda g, m: g * m, grads, mask)


def grad_elbo(state: VariationalState, batch: Minibatch, total_observed: int) -> VariationalState:
    """Gradient of the bound with respect to every unconstrained array.

    Returned as a state-shaped pytree (None where the state stores
    None). Raises the same typed errors as the eager bound when the
    state is outside the objective's domain.
    """
    from .elbo import _check_mgf_domain

    moments = latent_marginals(state, batch.centroids)
    _check_mgf_domain(state, np.asarray(moments.var))
    grads = jax.grad(_elbo)(state, batch, float(total_observed))
    leaves = jax.tree_util.tree_leaves(grads)
    if not all(np.all(np.isfinite(leaf)) for leaf in leaves):
        raise FactorizationError("gradient is not finite")
    return jax.tree_util.tree_map(np.asarray, grads)


# ---------------------------------------------------------------------------
# Adam


@dataclass
class AdamMoments:
    """Running first/second gradient moments plus the step counter."""

    step: int
    mu: VariationalState
    nu: VariationalState


def adam_init(params) -> AdamMoments:
    zeros = jax.tree_util.tree_map(jnp.zeros_like, params)
    return AdamMoments(step=0, mu=zeros, nu=jax.tree_util.tree_map(jnp.zeros_like, zeros))


def _adam_moments(grads, moments: AdamMoments, config: TrainConfig) -> AdamMoments:
    b1, b2 = config.adam_beta1, config.adam_beta2
    mu = jax.tree_util.tree_map(lambda m, g: b1 * m + (1 - b1) * g, moments.mu, grads)
    nu = jax.tree_util.tree_map(lambda v, g: b2 * v + (1 - b2) * g * g, moments.nu, grads)
    return AdamMoments(step=moments.step + 1, mu=mu, nu=nu)


def _adam_update(moments: AdamMoments, config: TrainConfig):
    """Bias-corrected descent increment; subtract it from the parameters."""
    b1, b2 = config.adam_beta1, config.adam_beta2
    mu_scale = 1.0 / (1.0 - b1**moments.step)
    nu_scale = 1.0 / (1.0 - b2**moments.step)
    return jax.tree_util.tree_map(
        lambda m, v: config.learning_rate * (m * mu_scale) / (jnp.sqrt(v * nu_scale) + config.adam_eps),
        moments.mu,
        moments.nu,
    )


def adam_step(params, grads, moments: AdamMoments, config: TrainConfig):
    """One standard Adam descent step on an arbitrary parameter pytree."""
    new_moments = _adam_moments(grads, moments, config)
    update = _adam_update(new_moments, config)
    new_params = jax.tree_util.tree_map(lambda p, u: p - u, params, update)
    return new_params, new_moments


# ---------------------------------------------------------------------------
# the loop


def _tree_finite(tree) -> bool:
    return all(bool(np.all(np.isfinite(leaf))) for leaf in jax.tree_util.tree_leaves(tree))


def _to_numpy_state(state: VariationalState) -> VariationalState:
    return jax.tree_util.tree_map(np.asarray, state)


def fit(model_config: ModelConfig, train_config: TrainConfig, grid: CountGrid):
    """Maximize the bound; returns (best state seen, trace).

    Every epoch ends with a full-data evaluation that drives the trace,
    the best-state bookkeeping (the initial state participates, so the
    returned bound never falls below the starting one), and the
    relative-change stopping rule.
    """
    observed = np.asarray(grid.observed)
    if not observed.any(axis=0).all():
        missing = np.flatnonzero(~observed.any(axis=0)).tolist()
        raise ValueError(f"tasks with no observed cells: {missing}")

    state = init_state(model_config, grid, train_config.seed)
    mask = trainable_mask(state)
    pool = pool_cells(grid)
    total = float(pool.size)
    full_batch = batch_from_grid(grid)
    batch_size = train_config.batch_size or pool.size
    batch_size = min(batch_size, pool.size)
    rng = np.random.default_rng([int(train_config.seed), 13])

    def loss_fn(st, batch, total_observed):
        return -_elbo(st, batch, total_observed)

    loss_and_grad = jax.jit(jax.value_and_grad(loss_fn))
    loss_only = jax.jit(loss_fn)
    kl_parts = jax.jit(lambda st: (_kl_u(st), _kl_w(st)))

    trace = TrainTrace()
    moments = adam_init(state)
    best_state, best_elbo = None, -np.inf

    def record_epoch(epoch, start_time):
        nonlocal best_state, best_elbo
        loss, grads = loss_and_grad(state, full_batch, total)
        value = -float(loss)
        if np.isfinite(value):
            ku, kw = (float(v) for v in kl_parts(state))
            ell_value = value - ku - kw
            norm = float(
                jnp.sqrt(
                    sum(jnp.sum(g**2) for g in jax.tree_util.tree_leaves(_apply_mask(grads, mask)))
                )
            )
        else:
            ku = kw = ell_value = norm = float("nan")
        trace.append(epoch, value, ku, kw, ell_value, norm, time.perf_counter() - start_time)
        if np.isfinite(value) and value > best_elbo:
            best_elbo, best_state = value, _to_numpy_state(state)
        return value

    start = time.perf_counter()
    record_epoch(0, start)

    for epoch in range(1, train_config.epochs + 1):
        start = time.perf_counter()
        if batch_size >= pool.size:
            batches = [full_batch]
        else:
            order = rng.permutation(pool)
            batches = [
                pad_batch(batch_from_grid(grid, order[i : i + batch_size]), batch_size)
                for i in range(0, pool.size, batch_size)
            ]
        accepted_any = False
        for batch in batches:
            loss, grads = loss_and_grad(state, batch, total)
            if not (np.isfinite(float(loss)) and _tree_finite(grads)):
                trace.rejected_steps += 1
                continue
            masked = _apply_mask(grads, mask)
            proposal_moments = _adam_moments(masked, moments, train_config)
            update = _adam_update(proposal_moments, train_config)
            committed = False
            for halving in range(train_config.max_halvings + 1):
                scale = 0.5**halving
                candidate = jax.tree_util.tree_map(lambda p, u: p - scale * u, state, update)
                if np.isfinite(float(loss_only(candidate, batch, total))):
                    state, moments = candidate, proposal_moments
                    committed = accepted_any = True
                    break
            if not committed:
                trace.rejected_steps += 1
        if epoch == 1 and not accepted_any:
            raise TrainingFailureError(
                f"every step of the first epoch was rejected "
                f"({trace.rejected_steps} rejections); the initial state cannot "
                f"evaluate or improve the bound"
            )
        record_epoch(epoch, start)

        if (
            train_config.checkpoint_every
            and train_config.checkpoint_path
            and epoch % train_config.checkpoint_every == 0
        ):
            save_checkpoint(_to_numpy_state(state), train_config.checkpoint_path)

        window = train_config.convergence_window
        if len(trace) > window:
            newer, older = trace.elbo[-1], trace.elbo[-1 - window]
            if np.isfinite(newer) and np.isfinite(older):
                if abs(newer - older) / max(abs(older), 1e-8) < train_config.convergence_rtol:
                    break

    if best_state is None:
        raise TrainingFailureError("no epoch produced a finite bound")
    return best_state, trace
