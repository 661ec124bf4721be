"""Model configuration, variational state, and posterior marginals.

The generative model mixes Q latent Gaussian process surfaces into P
task log intensities through per-task weights, with a task offset. The
variational family factorizes over latents: Gaussians on inducing
values u_q and on the weight columns w_q. All covariance-like
parameters are stored as unconstrained arrays (log variances, or
triangular factors with log diagonals) so the trainer can move freely.

Weight handling has four variants, selected by configuration:
stochastic weights (the full model), weights fixed to a constant matrix
(single-task and shared-surface baselines), and deterministic trainable
weights (the vanishing-covariance limit).
"""

from __future__ import annotations

import enum
import json
from dataclasses import dataclass, field, replace
from pathlib import Path

import jax
import jax.numpy as jnp
import numpy as np
from jax import tree_util

from . import __version__
from .data import CountGrid
from .exceptions import FactorizationError
from .kernels import KernelFamily, KernelSpec, chol_jitter, chol_ladder, gram, kernel_values

__all__ = [
    "WeightPriorMode",
    "IndependentWeights",
    "CoupledWeights",
    "OffsetsInit",
    "BaselineMode",
    "ModelConfig",
    "VariationalState",
    "GaussianMoments",
    "init_state",
    "latent_marginals",
    "prior_log_intensity_cov",
    "sample_prior_counts",
    "sample_prior_log_intensities",
    "PriorSample",
    "save_checkpoint",
    "load_checkpoint",
    "config_to_dict",
    "config_from_dict",
    "CHECKPOINT_MAGIC",
]

CHECKPOINT_MAGIC = "MCPM1"


class OffsetsInit(str, enum.Enum):
    ZERO = "zero"
    LOG_MEAN_COUNT = "log-mean-count"


class BaselineMode(str, enum.Enum):
    MCPM = "mcpm"
    LGCP = "lgcp"
    ICM_LIMIT = "icm-limit"


class WeightPriorMode(str, enum.Enum):
    INDEPENDENT = "independent"
    COUPLED = "coupled"


def _tuple2d(arr, rows, cols, name):
    a = np.asarray(arr, dtype=float)
    if a.shape != (rows, cols):
        raise ValueError(f"{name} must have shape ({rows}, {cols}), got {a.shape}")
    return tuple(tuple(float(v) for v in row) for row in a)


@dataclass(frozen=True)
class IndependentWeights:
    """Factorized normal prior on weights: w_pq ~ N(mean_pq, var_pq).

    Entries are (task, latent) indexed. None fields default to zero
    means and unit variances once the owning config knows P and Q.
    """

    prior_means: tuple[tuple[float, ...], ...] | None = None
    prior_vars: tuple[tuple[float, ...], ...] | None = None

    @property
    def mode(self) -> WeightPriorMode:
        return WeightPriorMode.INDEPENDENT

    def means_array(self) -> np.ndarray:
        return np.asarray(self.prior_means, dtype=float)

    def vars_array(self) -> np.ndarray:
        return np.asarray(self.prior_vars, dtype=float)


@dataclass(frozen=True)
class CoupledWeights:
    """GP prior over each weight column, evaluated at task descriptors."""

    task_descriptors: tuple[tuple[float, ...], ...]
    weight_kernel: KernelSpec = field(default_factory=KernelSpec)

    def __post_init__(self):
        desc = np.asarray(self.task_descriptors, dtype=float)
        if desc.ndim != 2 or desc.shape[0] < 1 or desc.shape[1] < 1:
            raise ValueError("task_descriptors must be a (P, D_h) array")
        object.__setattr__(
            self, "task_descriptors", tuple(tuple(float(v) for v in row) for row in desc)
        )

    @property
    def mode(self) -> WeightPriorMode:
        return WeightPriorMode.COUPLED

    def descriptors_array(self) -> np.ndarray:
        return np.asarray(self.task_descriptors, dtype=float)


@dataclass(frozen=True)
class ModelConfig:
    """Structural configuration of the model.

    fixed_weights pins the (task, latent) mixing matrix to a constant:
    the LGCP baseline fills it with the identity, and the shared-surface
    preset (one extra latent common to all tasks) uses [I | 1]. Fixed
    and limit modes carry no weight posterior.
    """

    num_latents: int
    num_tasks: int
    latent_kernel: KernelSpec = field(default_factory=KernelSpec)
    weight_prior: IndependentWeights | CoupledWeights = field(default_factory=IndependentWeights)
    num_inducing: int | None = None
    offsets_init: OffsetsInit = OffsetsInit.LOG_MEAN_COUNT
    baseline_mode: BaselineMode = BaselineMode.MCPM
    fixed_weights: tuple[tuple[float, ...], ...] | None = None
    train_inducing: bool = False

    def __post_init__(self):
        q, p = int(self.num_latents), int(self.num_tasks)
        if q < 1 or p < 1:
            raise ValueError("num_latents and num_tasks must be positive")
        object.__setattr__(self, "num_latents", q)
        object.__setattr__(self, "num_tasks", p)
        object.__setattr__(self, "offsets_init", OffsetsInit(self.offsets_init))
        object.__setattr__(self, "baseline_mode", BaselineMode(self.baseline_mode))
        if self.num_inducing is not None:
            m = int(self.num_inducing)
            if m < 1:
                raise ValueError("num_inducing must be positive")
            object.__setattr__(self, "num_inducing", m)

        fixed = self.fixed_weights
        if self.baseline_mode == BaselineMode.LGCP:
            if q != p:
                raise ValueError(f"lgcp mode requires num_latents == num_tasks, got {q} != {p}")
            eye = _tuple2d(np.eye(p), p, q, "fixed_weights")
            if fixed is not None and _tuple2d(fixed, p, q, "fixed_weights") != eye:
                raise ValueError("lgcp mode fixes the weights to the identity")
            fixed = eye
        elif fixed is not None:
            fixed = _tuple2d(fixed, p, q, "fixed_weights")
            if self.baseline_mode == BaselineMode.ICM_LIMIT:
                raise ValueError("icm-limit trains deterministic weights; fixed_weights conflicts")
        object.__setattr__(self, "fixed_weights", fixed)

        prior = self.weight_prior
        if isinstance(prior, IndependentWeights):
            means = prior.prior_means
            varss = prior.prior_vars
            means = _tuple2d(np.zeros((p, q)) if means is None else means, p, q, "prior_means")
            varss = _tuple2d(np.ones((p, q)) if varss is None else varss, p, q, "prior_vars")
            if any(v <= 0 for row in varss for v in row):
                raise ValueError("prior_vars must be positive")
            object.__setattr__(
                self, "weight_prior", IndependentWeights(prior_means=means, prior_vars=varss)
            )
        elif isinstance(prior, CoupledWeights):
            if len(prior.task_descriptors) != p:
                raise ValueError(
                    f"task_descriptors has {len(prior.task_descriptors)} rows, expected {p}"
                )
        else:
            raise ValueError(f"unsupported weight prior: {type(prior).__name__}")

    @property
    def weights_are_fixed(self) -> bool:
        return self.fixed_weights is not None

    @property
    def weights_are_deterministic(self) -> bool:
        return self.weights_are_fixed or self.baseline_mode == BaselineMode.ICM_LIMIT

    @property
    def coupled(self) -> bool:
        return isinstance(self.weight_prior, CoupledWeights)

    def fixed_weights_array(self) -> np.ndarray:
        return np.asarray(self.fixed_weights, dtype=float)

    @classmethod
    def shared_surface(cls, num_tasks: int, **kwargs) -> "ModelConfig":
        """Each task gets its own latent plus one surface common to all."""
        p = int(num_tasks)
        fixed = np.concatenate([np.eye(p), np.ones((p, 1))], axis=1)
        return cls(
            num_latents=p + 1,
            num_tasks=p,
            fixed_weights=tuple(tuple(row) for row in fixed),
            **kwargs,
        )


@dataclass(frozen=True)
class GaussianMoments:
    """Elementwise means and variances of a Gaussian family."""

    mean: np.ndarray
    var: np.ndarray

    def __post_init__(self):
        mean = np.asarray(self.mean, dtype=float)
        var = np.asarray(self.var, dtype=float)
        if mean.shape != var.shape:
            raise ValueError("mean and var must have matching shapes")
        if np.any(var < 0):
            raise ValueError("variances must be nonnegative")
        object.__setattr__(self, "mean", mean)
        object.__setattr__(self, "var", var)


@tree_util.register_dataclass
@dataclass
class VariationalState:
    """All trainable arrays plus the static configuration.

    Leaves are unconstrained: kernel hyperparameters live in log space,
    covariance factors store log diagonals, and weight variances (in
    the factorized posterior) are log values. The struct is a jax
    pytree whose static part is (config, seed).
    """

    config: ModelConfig = field(metadata=dict(static=True))
    seed: int = field(metadata=dict(static=True))
    z: np.ndarray
    u_mean: np.ndarray
    u_cov_factor: np.ndarray
    w_mean: np.ndarray
    w_cov: np.ndarray | None
    log_latent_variance: np.ndarray
    log_latent_lengthscales: np.ndarray
    log_weight_variance: np.ndarray | None
    log_weight_lengthscales: np.ndarray | None
    offsets: np.ndarray

    @property
    def num_latents(self) -> int:
        return self.config.num_latents

    @property
    def num_tasks(self) -> int:
        return self.config.num_tasks

    @property
    def num_inducing(self) -> int:
        return int(np.asarray(self.z).shape[1])

    @property
    def input_dim(self) -> int:
        return int(np.asarray(self.z).shape[2])


def factor_from_raw(raw):
    """Materialize a lower-triangular factor from unconstrained storage."""
    raw = jnp.asarray(raw)
    return jnp.tril(raw, -1) + jnp.diag(jnp.exp(jnp.diag(raw)))


def raw_from_factor(factor):
    """Inverse of factor_from_raw for a factor with positive diagonal."""
    factor = np.asarray(factor, dtype=float)
    if np.any(np.diag(factor) <= 0):
        raise ValueError("factor diagonal must be positive")
    return np.tril(factor, -1) + np.diag(np.log(np.diag(factor)))


def weight_moments(state: VariationalState):
    """Posterior marginal means/variances of the weights, (Q, P) each."""
    cfg = state.config
    mean = jnp.asarray(state.w_mean)
    if cfg.weights_are_deterministic:
        return mean, jnp.zeros_like(mean)
    if cfg.coupled:
        factors = [factor_from_raw(state.w_cov[q]) for q in range(cfg.num_latents)]
        var = jnp.stack([jnp.sum(f**2, axis=1) for f in factors])
    else:
        var = jnp.exp(jnp.asarray(state.w_cov))
    return mean, var


def latent_chols(state: VariationalState):
    """Per-latent Cholesky factors of the jittered inducing Gram matrix."""
    cfg = state.config
    out = []
    for q in range(cfg.num_latents):
        kzz = kernel_values(
            cfg.latent_kernel.family,
            jnp.exp(state.log_latent_variance[q]),
            jnp.exp(state.log_latent_lengthscales[q]),
            jnp.asarray(state.z[q]),
            jnp.asarray(state.z[q]),
        )
        out.append(chol_ladder(kzz))
    return out


def latent_marginals_core(state: VariationalState, x, chols=None):
    """Latent posterior marginals at x as jax arrays, (N, Q) each.

    The conditional mean is A_q m_q and the variance collapses
    K_xx - A K_zx + A S A^T to its diagonal, all through triangular
    solves against the jittered Cholesky factor.
    """
    cfg = state.config
    x = jnp.asarray(x)
    if chols is None:
        chols = latent_chols(state)
    means, variances = [], []
    for q in range(cfg.num_latents):
        variance = jnp.exp(state.log_latent_variance[q])
        lengthscales = jnp.exp(state.log_latent_lengthscales[q])
        z_q = jnp.asarray(state.z[q])
        l_factor, _ = chols[q]
        kzx = kernel_values(cfg.latent_kernel.family, variance, lengthscales, z_q, x)
        kdiag = variance * jnp.ones(x.shape[0])  # stationary kernels: k(x,x) = variance
        half = jax.scipy.linalg.solve_triangular(l_factor, kzx, lower=True)  # L^-1 Kzx
        w_full = jax.scipy.linalg.solve_triangular(l_factor.T, half, lower=False)  # Kzz^-1 Kzx
        mu = w_full.T @ jnp.asarray(state.u_mean[q])
        qdiag = jnp.sum(kzx * w_full, axis=0)
        s_factor = factor_from_raw(state.u_cov_factor[q])
        proj = w_full.T @ s_factor
        svar = jnp.sum(proj**2, axis=1)
        means.append(mu)
        variances.append(jnp.maximum(kdiag - qdiag + svar, 0.0))
    return jnp.stack(means, axis=1), jnp.stack(variances, axis=1)


def latent_marginals(state: VariationalState, x) -> GaussianMoments:
    """Public marginal extraction; raises if factorization failed."""
    x = np.atleast_2d(np.asarray(x, dtype=float))
    mean, var = latent_marginals_core(state, x)
    mean, var = np.asarray(mean), np.asarray(var)
    if not (np.all(np.isfinite(mean)) and np.all(np.isfinite(var))):
        raise FactorizationError("latent marginals are not finite; inducing Gram not factorizable")
    return GaussianMoments(mean=mean, var=var)


def _latent_kernel_specs(model: ModelConfig | VariationalState, dim: int) -> list[KernelSpec]:
    if isinstance(model, VariationalState):
        cfg = model.config
        return [
            KernelSpec(
                cfg.latent_kernel.family,
                variance=float(np.exp(model.log_latent_variance[q])),
                lengthscales=tuple(np.exp(np.asarray(model.log_latent_lengthscales[q]))),
            )
            for q in range(cfg.num_latents)
        ]
    spec = KernelSpec(
        model.latent_kernel.family,
        variance=model.latent_kernel.variance,
        lengthscales=tuple(model.latent_kernel.lengthscales_for_dim(dim)),
    )
    return [spec] * model.num_latents


def _weight_prior_cov(model: ModelConfig | VariationalState) -> list[np.ndarray]:
    """Per-latent P x P prior second moment of the weight columns."""
    cfg = model.config if isinstance(model, VariationalState) else model
    if cfg.weights_are_fixed:
        w = cfg.fixed_weights_array()  # (P, Q), deterministic
        return [np.outer(w[:, q], w[:, q]) for q in range(cfg.num_latents)]
    if cfg.coupled:
        desc = cfg.weight_prior.descriptors_array()
        if isinstance(model, VariationalState) and model.log_weight_variance is not None:
            out = []
            for q in range(cfg.num_latents):
                spec = KernelSpec(
                    cfg.weight_prior.weight_kernel.family,
                    variance=float(np.exp(model.log_weight_variance[q])),
                    lengthscales=tuple(np.exp(np.asarray(model.log_weight_lengthscales[q]))),
                )
                out.append(gram(spec, desc).values)
            return out
        spec = KernelSpec(
            cfg.weight_prior.weight_kernel.family,
            variance=cfg.weight_prior.weight_kernel.variance,
            lengthscales=tuple(
                cfg.weight_prior.weight_kernel.lengthscales_for_dim(desc.shape[1])
            ),
        )
        k = gram(spec, desc).values
        return [k] * cfg.num_latents
    means = cfg.weight_prior.means_array()
    if np.any(means != 0.0):
        raise ValueError(
            "prior log-intensity covariance requires zero prior weight means in the factorized prior"
        )
    varss = cfg.weight_prior.vars_array()
    return [np.diag(varss[:, q]) for q in range(cfg.num_latents)]


def prior_log_intensity_cov(model: ModelConfig | VariationalState, x) -> np.ndarray:
    """Covariance of prior log intensities, (P*N, P*N), task-major.

    Entry ((p, n), (p', n')) sums k_w^q(h_p, h_p') k_f^q(x_n, x_n')
    over latents; rows are ordered task-by-task.
    """
    x = np.atleast_2d(np.asarray(x, dtype=float))
    cfg = model.config if isinstance(model, VariationalState) else model
    kernels_f = _latent_kernel_specs(model, x.shape[1])
    covs_w = _weight_prior_cov(model)
    n, p = x.shape[0], cfg.num_tasks
    total = np.zeros((p * n, p * n))
    for q in range(cfg.num_latents):
        total += np.kron(covs_w[q], gram(kernels_f[q], x).values)
    return total


@dataclass(frozen=True)
class PriorSample:
    """One draw from the generative model."""

    grid: CountGrid
    intensity: np.ndarray
    weights: np.ndarray
    latents: np.ndarray


def _sample_prior_weights(cfg: ModelConfig, rng, num_samples: int) -> np.ndarray:
    """Weight draws with shape (S, Q, P)."""
    q, p = cfg.num_latents, cfg.num_tasks
    if cfg.weights_are_fixed:
        w = cfg.fixed_weights_array().T
        return np.broadcast_to(w, (num_samples, q, p)).copy()
    if cfg.coupled:
        covs = _weight_prior_cov(cfg)
        out = np.empty((num_samples, q, p))
        for qi in range(q):
            factor, _ = chol_jitter(covs[qi])
            out[:, qi, :] = rng.standard_normal((num_samples, p)) @ factor.T
        return out
    means = cfg.weight_prior.means_array().T
    stds = np.sqrt(cfg.weight_prior.vars_array().T)
    return means + stds * rng.standard_normal((num_samples, q, p))


def sample_prior_log_intensities(
    cfg: ModelConfig, x, num_samples: int, seed: int, offsets=None
) -> np.ndarray:
    """Vectorized draws of log intensities, shape (S, N, P)."""
    x = np.atleast_2d(np.asarray(x, dtype=float))
    n = x.shape[0]
    offsets = np.zeros(cfg.num_tasks) if offsets is None else np.asarray(offsets, dtype=float)
    rng = np.random.default_rng([int(seed), 211])
    kernels_f = _latent_kernel_specs(cfg, x.shape[1])
    latents = np.empty((num_samples, n, cfg.num_latents))
    for q in range(cfg.num_latents):
        factor, _ = chol_jitter(gram(kernels_f[q], x))
        latents[:, :, q] = rng.standard_normal((num_samples, n)) @ factor.T
    weights = _sample_prior_weights(cfg, rng, num_samples)
    return np.einsum("snq,sqp->snp", latents, weights) + offsets


def sample_prior_counts(cfg: ModelConfig, x, seed: int, offsets=None) -> PriorSample:
    """Draw latents, weights, intensities, and Poisson counts once."""
    x = np.atleast_2d(np.asarray(x, dtype=float))
    n = x.shape[0]
    offsets = np.zeros(cfg.num_tasks) if offsets is None else np.asarray(offsets, dtype=float)
    rng = np.random.default_rng([int(seed), 211])
    kernels_f = _latent_kernel_specs(cfg, x.shape[1])
    latents = np.empty((n, cfg.num_latents))
    for q in range(cfg.num_latents):
        factor, _ = chol_jitter(gram(kernels_f[q], x))
        latents[:, q] = factor @ rng.standard_normal(n)
    weights = _sample_prior_weights(cfg, rng, 1)[0]
    intensity = np.exp(latents @ weights + offsets)
    counts = rng.poisson(intensity)
    grid = CountGrid(
        counts=counts, centroids=x, observed=np.ones_like(counts, dtype=bool), grid=None
    )
    return PriorSample(grid=grid, intensity=intensity, weights=weights, latents=latents)


def init_state(cfg: ModelConfig, grid: CountGrid, seed: int) -> VariationalState:
    """Starting point for optimization.

    Inducing inputs subsample the observed centroids per latent; the
    inducing posterior starts at mean zero with covariance 0.1 I, weight
    posteriors at small random means with variance 0.1, and kernel
    hyperparameters at the configured template values.
    """
    q, p = cfg.num_latents, cfg.num_tasks
    observed_cells = np.flatnonzero(grid.observed.any(axis=1))
    if observed_cells.size == 0:
        raise ValueError("grid has no observed cells")
    m = cfg.num_inducing if cfg.num_inducing is not None else max(1, round(0.3 * observed_cells.size))
    if m > observed_cells.size:
        raise ValueError(
            f"num_inducing={m} exceeds the {observed_cells.size} observed cells"
        )
    dim = grid.dim
    rng = np.random.default_rng([int(seed), 7])
    z = np.stack(
        [grid.centroids[rng.choice(observed_cells, size=m, replace=False)] for _ in range(q)]
    )
    u_mean = np.zeros((q, m))
    u_cov_factor = np.broadcast_to(np.diag(np.full(m, 0.5 * np.log(0.1))), (q, m, m)).copy()

    if cfg.weights_are_fixed:
        w_mean = cfg.fixed_weights_array().T.copy()
        w_cov = None
    else:
        w_mean = rng.normal(0.0, 0.1, size=(q, p))
        if cfg.baseline_mode == BaselineMode.ICM_LIMIT:
            w_cov = None
        elif cfg.coupled:
            w_cov = np.broadcast_to(np.diag(np.full(p, 0.5 * np.log(0.1))), (q, p, p)).copy()
        else:
            w_cov = np.full((q, p), np.log(0.1))

    if cfg.offsets_init == OffsetsInit.ZERO:
        offsets = np.zeros(p)
    else:
        offsets = np.empty(p)
        for task in range(p):
            obs = grid.observed[:, task]
            mean_count = grid.counts[obs, task].mean() if obs.any() else 0.0
            offsets[task] = np.log(mean_count + 1e-6)

    log_latent_variance = np.full(q, np.log(cfg.latent_kernel.variance))
    log_latent_lengthscales = np.broadcast_to(
        np.log(cfg.latent_kernel.lengthscales_for_dim(dim)), (q, dim)
    ).copy()

    log_weight_variance = None
    log_weight_lengthscales = None
    if cfg.coupled and not cfg.weights_are_fixed:
        wk = cfg.weight_prior.weight_kernel
        dh = cfg.weight_prior.descriptors_array().shape[1]
        log_weight_variance = np.full(q, np.log(wk.variance))
        log_weight_lengthscales = np.broadcast_to(
            np.log(wk.lengthscales_for_dim(dh)), (q, dh)
        ).copy()

    return VariationalState(
        config=cfg,
        seed=int(seed),
        z=z,
        u_mean=u_mean,
        u_cov_factor=u_cov_factor,
        w_mean=w_mean,
        w_cov=w_cov,
        log_latent_variance=log_latent_variance,
        log_latent_lengthscales=log_latent_lengthscales,
        log_weight_variance=log_weight_variance,
        log_weight_lengthscales=log_weight_lengthscales,
        offsets=offsets,
    )


# ---------------------------------------------------------------------------
# serialization


def _kernel_to_dict(spec: KernelSpec) -> dict:
    return {
        "family": spec.family.value,
        "variance": spec.variance,
        "lengthscales": list(spec.lengthscales),
    }


def _kernel_from_dict(d: dict) -> KernelSpec:
    return KernelSpec(
        family=KernelFamily(d["family"]),
        variance=d["variance"],
        lengthscales=tuple(d["lengthscales"]),
    )


def config_to_dict(cfg: ModelConfig) -> dict:
    if cfg.coupled:
        prior = {
            "mode": "coupled",
            "task_descriptors": [list(r) for r in cfg.weight_prior.task_descriptors],
            "kernel": _kernel_to_dict(cfg.weight_prior.weight_kernel),
        }
    else:
        prior = {
            "mode": "independent",
            "prior_means": [list(r) for r in cfg.weight_prior.prior_means],
            "prior_vars": [list(r) for r in cfg.weight_prior.prior_vars],
        }
    return {
        "num_latents": cfg.num_latents,
        "num_tasks": cfg.num_tasks,
        "num_inducing": cfg.num_inducing,
        "latent_kernel": _kernel_to_dict(cfg.latent_kernel),
        "weight_prior": prior,
        "offsets_init": cfg.offsets_init.value,
        "baseline_mode": cfg.baseline_mode.value,
        "fixed_weights": None
        if cfg.fixed_weights is None
        else [list(r) for r in cfg.fixed_weights],
        "train_inducing": cfg.train_inducing,
    }


def config_from_dict(d: dict) -> ModelConfig:
    prior_d = d.get("weight_prior", {"mode": "independent"})
    mode = WeightPriorMode(prior_d.get("mode", "independent"))
    if mode == WeightPriorMode.COUPLED:
        prior = CoupledWeights(
            task_descriptors=tuple(tuple(r) for r in prior_d["task_descriptors"]),
            weight_kernel=_kernel_from_dict(prior_d["kernel"]),
        )
    else:
        prior = IndependentWeights(
            prior_means=prior_d.get("prior_means"),
            prior_vars=prior_d.get("prior_vars"),
        )
    fixed = d.get("fixed_weights")
    return ModelConfig(
        num_latents=d["num_latents"],
        num_tasks=d["num_tasks"],
        num_inducing=d.get("num_inducing"),
        latent_kernel=_kernel_from_dict(d["latent_kernel"]) if "latent_kernel" in d else KernelSpec(),
        weight_prior=prior,
        offsets_init=OffsetsInit(d.get("offsets_init", "log-mean-count")),
        baseline_mode=BaselineMode(d.get("baseline_mode", "mcpm")),
        fixed_weights=None if fixed is None else tuple(tuple(r) for r in fixed),
        train_inducing=bool(d.get("train_inducing", False)),
    )


def _array_or_none(v):
    return None if v is None else np.asarray(v, dtype=float).tolist()


def save_checkpoint(state: VariationalState, path, meta: dict | None = None) -> None:
    payload = {
        "magic": CHECKPOINT_MAGIC,
        "tool_version": __version__,
        "meta": meta or {},
        "config": config_to_dict(state.config),
        "seed": state.seed,
        "params": {
            "z": _array_or_none(state.z),
            "u_mean": _array_or_none(state.u_mean),
            "u_cov_factor": _array_or_none(state.u_cov_factor),
            "w_mean": _array_or_none(state.w_mean),
            "w_cov": _array_or_none(state.w_cov),
            "log_latent_variance": _array_or_none(state.log_latent_variance),
            "log_latent_lengthscales": _array_or_none(state.log_latent_lengthscales),
            "log_weight_variance": _array_or_none(state.log_weight_variance),
            "log_weight_lengthscales": _array_or_none(state.log_weight_lengthscales),
            "offsets": _array_or_none(state.offsets),
        },
    }
    Path(path).write_text(json.dumps(payload, sort_keys=True, indent=1) + "\n")


def load_checkpoint(path) -> VariationalState:
    payload = json.loads(Path(path).read_text())
    if payload.get("magic") != CHECKPOINT_MAGIC:
        raise ValueError(f"{path}: not a {CHECKPOINT_MAGIC} checkpoint")
    cfg = config_from_dict(payload["config"])
    params = payload["params"]

    def arr(key):
        v = params.get(key)
        return None if v is None else np.asarray(v, dtype=float)

    return VariationalState(
        config=cfg,
        seed=int(payload["seed"]),
        z=arr("z"),
        u_mean=arr("u_mean"),
        u_cov_factor=arr("u_cov_factor"),
        w_mean=arr("w_mean"),
        w_cov=arr("w_cov"),
        log_latent_variance=arr("log_latent_variance"),
        log_latent_lengthscales=arr("log_latent_lengthscales"),
        log_weight_variance=arr("log_weight_variance"),
        log_weight_lengthscales=arr("log_weight_lengthscales"),
        offsets=arr("offsets"),
    )
