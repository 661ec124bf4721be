"""Evidence lower bound: analytic KL terms, the log-intensity MGF, and
the closed-form expected log likelihood with a Monte-Carlo twin used as
a validation oracle.

Everything here exists twice: an underscore-prefixed traced core that
jax can differentiate (numerical failure surfaces as NaN) and a public
eager wrapper that validates and raises typed errors. The trainer works
against the traced cores; user code and tests should call the wrappers.
"""

from __future__ import annotations

from dataclasses import dataclass

import jax
import jax.numpy as jnp
import numpy as np
from jax import tree_util
from jax.scipy.linalg import solve_triangular
from jax.scipy.special import gammaln

from .data import CountGrid
from .exceptions import FactorizationError, MgfDomainError
from .kernels import chol_ladder, kernel_values
from .model import (
    BaselineMode,
    GaussianMoments,
    VariationalState,
    factor_from_raw,
    latent_chols,
    latent_marginals,
    latent_marginals_core,
    weight_moments,
)

MGF_DOMAIN_EPS = 1e-8

_LOG_2PI = float(np.log(2.0 * np.pi))


# ---------------------------------------------------------------------------
# minibatches


@tree_util.register_dataclass
@dataclass
class Minibatch:
    """Cells the likelihood is evaluated on.

    counts are stored as floats so batches can flow through traced
    code; observed is the per (cell, task) mask. Padding rows (all
    False in the mask) contribute nothing to any sum and exist only to
    keep jit shapes stable.
    """

    centroids: np.ndarray
    counts: np.ndarray
    observed: np.ndarray

    @property
    def num_cells(self) -> int:
        """Cells carrying at least one observed entry (padding excluded)."""
        return int(np.asarray(self.observed).any(axis=1).sum())


def pool_cells(grid: CountGrid) -> np.ndarray:
    """Indices of cells with at least one observed task entry."""
    return np.flatnonzero(np.asarray(grid.observed).any(axis=1))


def batch_from_grid(grid: CountGrid, cells=None) -> Minibatch:
    """Build a batch from grid cells (default: the whole observed pool)."""
    pool = pool_cells(grid)
    if cells is None:
        cells = pool
    else:
        cells = np.asarray(cells, dtype=int)
        outside = np.setdiff1d(cells, pool)
        if outside.size:
            raise ValueError(f"cells not in the observed pool: {outside.tolist()}")
    return Minibatch(
        centroids=np.asarray(grid.centroids, dtype=float)[cells],
        counts=np.asarray(grid.counts, dtype=float)[cells],
        observed=np.asarray(grid.observed, dtype=bool)[cells],
    )


def pad_batch(batch: Minibatch, size: int) -> Minibatch:
    """Append zero-mask rows so every batch shares one traced shape."""
    b = batch.counts.shape[0]
    if size < b:
        raise ValueError(f"cannot pad batch of {b} cells down to {size}")
    if size == b:
        return batch
    extra = size - b
    return Minibatch(
        centroids=np.concatenate([batch.centroids, np.tile(batch.centroids[:1], (extra, 1))]),
        counts=np.concatenate([batch.counts, np.zeros((extra, batch.counts.shape[1]))]),
        observed=np.concatenate(
            [batch.observed, np.zeros((extra, batch.observed.shape[1]), dtype=bool)]
        ),
    )


# ---------------------------------------------------------------------------
# moment generating function


def _log_mgf(w_mean, w_var, f_mean, f_var, t):
    """log MGF of sum_q w_q f_q at t, summed over the trailing axis.

    Broadcasts over leading axes. Outside the domain the result is NaN
    (never clamped): gradients through a clamp would silently lie,
    whereas NaN makes the trainer reject the step.
    """
    denom = 1.0 - t**2 * w_var * f_var
    safe = jnp.where(denom > MGF_DOMAIN_EPS, denom, jnp.nan)
    num = t * w_mean * f_mean + 0.5 * (f_mean**2 * w_var + w_mean**2 * f_var) * t**2
    return jnp.sum(num / safe - 0.5 * jnp.log(safe), axis=-1)


def mgf_log_intensity(weight_moms: GaussianMoments, latent_moms: GaussianMoments, t: float) -> float:
    """MGF of the log intensity sum_q w_q f_q evaluated at t.

    Both arguments carry one mean/variance pair per latent. The value
    is the product over latents of

        exp[(t g m + (m^2 Vw + g^2 Vf) t^2 / 2) / d] / sqrt(d),
        d = 1 - t^2 Vw Vf,

    with (g, Vw) the weight moments and (m, Vf) the latent moments.

    Raises MgfDomainError naming the first latent whose denominator
    falls at or below the domain guard.
    """
    gamma = np.ravel(np.asarray(weight_moms.mean, dtype=float))
    var_w = np.ravel(np.asarray(weight_moms.var, dtype=float))
    mu = np.ravel(np.asarray(latent_moms.mean, dtype=float))
    var_f = np.ravel(np.asarray(latent_moms.var, dtype=float))
    if not gamma.shape == var_w.shape == mu.shape == var_f.shape:
        raise ValueError("weight and latent moments must have one entry per latent")
    t = float(t)
    denom = 1.0 - t**2 * var_w * var_f
    bad = np.flatnonzero(denom <= MGF_DOMAIN_EPS)
    if bad.size:
        q = int(bad[0])
        raise MgfDomainError(t, latent=q, denom=float(denom[q]))
    value = _log_mgf(jnp.asarray(gamma), jnp.asarray(var_w), jnp.asarray(mu), jnp.asarray(var_f), t)
    return float(np.exp(value))


# ---------------------------------------------------------------------------
# KL terms


def _kl_u(state: VariationalState, chols=None):
    """Negative KL from q(u) to the inducing prior, summed over latents."""
    if chols is None:
        chols = latent_chols(state)
    total = jnp.asarray(0.0)
    for q in range(state.num_latents):
        l_factor, _ = chols[q]
        raw = jnp.asarray(state.u_cov_factor[q])
        s_factor = factor_from_raw(raw)
        alpha = solve_triangular(l_factor, jnp.asarray(state.u_mean[q]), lower=True)
        half = solve_triangular(l_factor, s_factor, lower=True)
        logdet_s = 2.0 * jnp.sum(jnp.diag(raw))  # factor diag stores log values
        logdet_k = 2.0 * jnp.sum(jnp.log(jnp.diag(l_factor)))
        m_dim = raw.shape[0]
        total = total + 0.5 * (
            logdet_s + m_dim - logdet_k - jnp.sum(alpha**2) - jnp.sum(half**2)
        )
    return total


def kl_u(state: VariationalState) -> float:
    """-KL(q(u) || p(u)); zero exactly when the posterior sits at the prior."""
    value = float(_kl_u(state))
    if not np.isfinite(value):
        raise FactorizationError("inducing KL is not finite; Gram factorization failed")
    return value


def _weight_prior_chols(state: VariationalState):
    """Traced Cholesky factors of the per-latent descriptor Gram matrices."""
    cfg = state.config
    desc = jnp.asarray(cfg.weight_prior.descriptors_array())
    family = cfg.weight_prior.weight_kernel.family
    out = []
    for q in range(cfg.num_latents):
        if state.log_weight_variance is not None:
            variance = jnp.exp(state.log_weight_variance[q])
            lengthscales = jnp.exp(state.log_weight_lengthscales[q])
        else:
            variance = cfg.weight_prior.weight_kernel.variance
            lengthscales = jnp.asarray(
                cfg.weight_prior.weight_kernel.lengthscales_for_dim(desc.shape[1])
            )
        gram_q = kernel_values(family, variance, lengthscales, desc, desc)
        out.append(chol_ladder(gram_q, try_exact=True))
    return out


def _kl_w(state: VariationalState):
    """Negative KL (or log prior density in the deterministic limit) of the weights."""
    cfg = state.config
    if cfg.weights_are_fixed:
        return jnp.asarray(0.0)
    w_mean = jnp.asarray(state.w_mean)  # (Q, P)
    p = cfg.num_tasks

    if cfg.coupled:
        chols = _weight_prior_chols(state)
        total = jnp.asarray(0.0)
        for q in range(cfg.num_latents):
            l_w, _ = chols[q]
            logdet_k = 2.0 * jnp.sum(jnp.log(jnp.diag(l_w)))
            alpha = solve_triangular(l_w, w_mean[q], lower=True)
            cross = -0.5 * (p * _LOG_2PI + logdet_k + jnp.sum(alpha**2))
            if cfg.baseline_mode == BaselineMode.ICM_LIMIT:
                total = total + cross  # point mass: entropy and trace collapse
                continue
            raw = jnp.asarray(state.w_cov[q])
            omega_factor = factor_from_raw(raw)
            half = solve_triangular(l_w, omega_factor, lower=True)
            entropy = 0.5 * (p * _LOG_2PI + 2.0 * jnp.sum(jnp.diag(raw)) + p)
            total = total + cross - 0.5 * jnp.sum(half**2) + entropy
        return total

    gamma = jnp.asarray(cfg.weight_prior.means_array().T)  # (Q, P)
    kappa = jnp.asarray(cfg.weight_prior.vars_array().T)
    log_density = -0.5 * (jnp.log(2.0 * jnp.pi * kappa) + (w_mean - gamma) ** 2 / kappa)
    if cfg.baseline_mode == BaselineMode.ICM_LIMIT:
        return jnp.sum(log_density)
    log_omega = jnp.asarray(state.w_cov)
    omega = jnp.exp(log_omega)
    entropy = 0.5 * (_LOG_2PI + log_omega + 1.0)
    return jnp.sum(log_density - omega / (2.0 * kappa) + entropy)


def kl_w(state: VariationalState) -> float:
    """-KL(q(w) || p(w)) per weight mode; fixed weights contribute zero.

    In the deterministic limit only the prior log density of the weight
    point mass remains."""
    value = float(_kl_w(state))
    if not np.isfinite(value):
        raise FactorizationError("weight KL is not finite; descriptor Gram not factorizable")
    return value


# ---------------------------------------------------------------------------
# expected log likelihood


def _ell(state: VariationalState, batch: Minibatch, moments=None, chols=None):
    """Closed-form ELL over the batch, traced; NaN when the MGF domain fails."""
    if moments is None:
        moments = latent_marginals_core(state, batch.centroids, chols=chols)
    f_mean, f_var = moments
    w_mean, w_var = weight_moments(state)  # (Q, P)
    log_mgf = _log_mgf(
        w_mean.T[None, :, :],
        w_var.T[None, :, :],
        f_mean[:, None, :],
        f_var[:, None, :],
        1.0,
    )  # (B, P)
    offsets = jnp.asarray(state.offsets)
    y = jnp.asarray(batch.counts)
    rate = -jnp.exp(offsets[None, :] + log_mgf)
    linear = f_mean @ w_mean + offsets[None, :]
    terms = rate + y * linear - gammaln(y + 1.0)
    return jnp.sum(jnp.where(jnp.asarray(batch.observed), terms, 0.0))


def _check_mgf_domain(state, f_var_np, t=1.0):
    """Locate the first (cell, task, latent) domain violation, if any."""
    _, w_var = weight_moments(state)
    w_var = np.asarray(w_var)  # (Q, P)
    denom = 1.0 - t**2 * f_var_np[:, None, :] * np.transpose(w_var)[None, :, :]
    bad = np.argwhere(denom <= MGF_DOMAIN_EPS)
    if bad.size:
        n, p, q = (int(v) for v in bad[0])
        raise MgfDomainError(t, latent=q, denom=float(denom[n, p, q]), cell=n, task=p)


def ell_closed_form(state: VariationalState, batch: Minibatch, moments: GaussianMoments | None = None) -> float:
    """Expected Poisson log likelihood of the batch under the posterior.

    Each observed (cell, task) entry contributes

        -exp(offset_p) MGF(1) + y (sum_q w_mean_pq f_mean_nq + offset_p) - log Gamma(y + 1)

    using the marginal moments of the latents at the cell centroid and
    of the mixing weights. moments, when given, must come from
    latent_marginals on the batch centroids and skips recomputing them.
    """
    if moments is None:
        moments = latent_marginals(state, batch.centroids)
    f_var = np.asarray(moments.var)
    _check_mgf_domain(state, f_var)
    value = float(_ell(state, batch, moments=(jnp.asarray(moments.mean), jnp.asarray(f_var))))
    if not np.isfinite(value):
        raise FactorizationError("expected log likelihood is not finite")
    return value


def ell_monte_carlo(
    state: VariationalState,
    batch: Minibatch,
    num_samples: int,
    seed: int,
    moments: GaussianMoments | None = None,
):
    """Monte-Carlo estimate of the ELL and its standard error.

    Draws weights and latent values from the same marginal moments the
    closed form consumes and averages exact Poisson log likelihoods.
    Validation oracle only; the closed form is what training uses.
    """
    if num_samples < 2:
        raise ValueError("num_samples must be at least 2")
    if moments is None:
        moments = latent_marginals(state, batch.centroids)
    w_mean, w_var = (np.asarray(a) for a in weight_moments(state))
    f_mean, f_var = np.asarray(moments.mean), np.asarray(moments.var)
    rng = np.random.default_rng(seed)
    s = int(num_samples)
    w = w_mean[None] + np.sqrt(w_var)[None] * rng.standard_normal((s, *w_mean.shape))
    f = f_mean[None] + np.sqrt(f_var)[None] * rng.standard_normal((s, *f_mean.shape))
    log_lam = np.einsum("sbq,sqp->sbp", f, w) + np.asarray(state.offsets)[None, None, :]
    y = np.asarray(batch.counts)[None]
    from scipy.special import gammaln as np_gammaln

    terms = -np.exp(log_lam) + y * log_lam - np_gammaln(y + 1.0)
    mask = np.asarray(batch.observed)[None]
    totals = np.sum(np.where(mask, terms, 0.0), axis=(1, 2))
    estimate = float(totals.mean())
    std_error = float(totals.std(ddof=1) / np.sqrt(s))
    return estimate, std_error


# ---------------------------------------------------------------------------
# the bound


def _batch_cells(batch: Minibatch):
    return jnp.sum(jnp.any(jnp.asarray(batch.observed), axis=1))


def _elbo(state: VariationalState, batch: Minibatch, total_observed):
    """Traced ELBO: kl_u + kl_w + (total / batch cells) * ell."""
    chols = latent_chols(state)
    scale = jnp.asarray(total_observed, dtype=float) / _batch_cells(batch)
    return _kl_u(state, chols=chols) + _kl_w(state) + scale * _ell(state, batch, chols=chols)


def elbo(state: VariationalState, batch: Minibatch, total_observed: int) -> float:
    """Evidence lower bound with minibatch rescaling.

    total_observed is the number of cells in the full observed pool;
    batches drawn uniformly from that pool make the scaled ELL an
    unbiased estimate of the full-data ELL.
    """
    return sum(elbo_parts(state, batch, total_observed).values())


def elbo_parts(state: VariationalState, batch: Minibatch, total_observed: int) -> dict:
    """The three bound components, eagerly validated, keyed by name.

    The ell entry is already rescaled; the values sum to the ELBO.
    """
    cells = batch.num_cells
    if cells == 0:
        raise ValueError("batch is empty")
    scale = float(total_observed) / cells
    return {
        "kl_u": kl_u(state),
        "kl_w": kl_w(state),
        "ell": scale * ell_closed_form(state, batch),
    }
