"""Posterior intensity moments, predictive count distributions, and
conditional probability surfaces.

Intensity moments are closed form: E[lambda_p(x)^t] = exp(t phi_p)
times the MGF of the mixed log intensity at t. Count distributions over
regions come from joint posterior sampling of (weights, latents), the
only place the full latent covariance between cells matters.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.linalg import solve_triangular

from .data import _write_rows
from .elbo import MGF_DOMAIN_EPS
from .exceptions import MgfDomainError
from .kernels import chol_jitter, gram
from .model import (
    VariationalState,
    _latent_kernel_specs,
    factor_from_raw,
    latent_marginals,
    weight_moments,
)

VARIANCE_FLOOR_SLACK = 1e-10


@dataclass(frozen=True)
class IntensityPrediction:
    """Per (task, point) intensity mean and variance.

    variance_is_sampled marks the fallback used when the second moment
    is undefined (MGF domain fails at t=2) but the mean is fine;
    floored_variances counts analytic variances that came out negative
    by roundoff and were clipped to zero.
    """

    mean: np.ndarray
    variance: np.ndarray
    variance_is_sampled: bool = False
    floored_variances: int = 0


def _prediction_moments(state: VariationalState, x, use_prior_moments: bool):
    """Weight and latent marginal moments feeding the MGF, as arrays.

    Posterior moments by default. The prior flag swaps in the model
    prior: zero-mean latents with the stationary variance, and the
    configured weight prior (fixed weights stay point masses).
    """
    x = np.atleast_2d(np.asarray(x, dtype=float))
    cfg = state.config
    if not use_prior_moments:
        w_mean, w_var = (np.asarray(a) for a in weight_moments(state))
        moms = latent_marginals(state, x)
        return w_mean, w_var, np.asarray(moms.mean), np.asarray(moms.var)
    if cfg.weights_are_fixed:
        w_mean = cfg.fixed_weights_array().T
        w_var = np.zeros_like(w_mean)
    elif cfg.coupled:
        from .model import _weight_prior_cov

        w_mean = np.zeros((cfg.num_latents, cfg.num_tasks))
        w_var = np.stack([np.diag(k) for k in _weight_prior_cov(state)])
    else:
        w_mean = cfg.weight_prior.means_array().T
        w_var = cfg.weight_prior.vars_array().T
    f_mean = np.zeros((x.shape[0], cfg.num_latents))
    f_var = np.stack(
        [np.full(x.shape[0], spec.variance) for spec in _latent_kernel_specs(state, x.shape[1])],
        axis=1,
    )
    return w_mean, w_var, f_mean, f_var


def _log_moment(w_mean, w_var, f_mean, f_var, t, offsets):
    """log E[lambda^t] per (point, task); raises on a domain violation."""
    denom = 1.0 - t**2 * f_var[:, None, :] * w_var.T[None, :, :]  # (N, P, Q)
    bad = np.argwhere(denom <= MGF_DOMAIN_EPS)
    if bad.size:
        n, p, q = (int(v) for v in bad[0])
        raise MgfDomainError(t, latent=q, denom=float(denom[n, p, q]), cell=n, task=p)
    gamma = w_mean.T[None, :, :]
    mu = f_mean[:, None, :]
    num = t * gamma * mu + 0.5 * (mu**2 * w_var.T[None] + gamma**2 * f_var[:, None, :]) * t**2
    return t * offsets[None, :] + np.sum(num / denom - 0.5 * np.log(denom), axis=-1)


def intensity_moment(state: VariationalState, x_star, t: int, use_prior_moments: bool = False):
    """E[lambda_p(x)^t] for every task and point, shape (P, N).

    t must be a positive integer; the MGF domain tightens as t grows,
    and a violation raises MgfDomainError naming the point and task.
    """
    t = int(t)
    if t < 1:
        raise ValueError("moment order t must be a positive integer")
    w_mean, w_var, f_mean, f_var = _prediction_moments(state, x_star, use_prior_moments)
    log_m = _log_moment(w_mean, w_var, f_mean, f_var, float(t), np.asarray(state.offsets))
    return np.exp(log_m).T


def sample_intensities(
    state: VariationalState,
    x_star,
    num_samples: int,
    seed: int,
    use_prior_moments: bool = False,
):
    """Marginal posterior intensity draws, shape (num_samples, P, N).

    Weights and latents are drawn from their per-entry marginal
    moments, which is exactly what the closed-form moments integrate
    over; regional totals need joint draws (predictive_count_samples).
    """
    w_mean, w_var, f_mean, f_var = _prediction_moments(state, x_star, use_prior_moments)
    rng = np.random.default_rng(seed)
    s = int(num_samples)
    w = w_mean[None] + np.sqrt(w_var)[None] * rng.standard_normal((s, *w_mean.shape))
    f = f_mean[None] + np.sqrt(f_var)[None] * rng.standard_normal((s, *f_mean.shape))
    log_lam = np.einsum("snq,sqp->snp", f, w) + np.asarray(state.offsets)[None, None, :]
    return np.exp(log_lam).transpose(0, 2, 1)


def intensity_mean_var(
    state: VariationalState,
    x_star,
    variance_samples: int = 10_000,
    seed: int = 0,
    use_prior_moments: bool = False,
) -> IntensityPrediction:
    """Posterior mean and variance of the intensity at each (task, point).

    Variance composes the first two moments. When the second moment is
    outside the MGF domain the variance falls back to a sampled
    estimate and the result says so.
    """
    mean = intensity_moment(state, x_star, 1, use_prior_moments)
    try:
        second = intensity_moment(state, x_star, 2, use_prior_moments)
    except MgfDomainError:
        draws = sample_intensities(state, x_star, variance_samples, seed, use_prior_moments)
        return IntensityPrediction(
            mean=mean, variance=draws.var(axis=0, ddof=1), variance_is_sampled=True
        )
    variance = second - mean**2
    tiny = -VARIANCE_FLOOR_SLACK * np.maximum(second, 1.0)
    negative = variance < 0
    beyond_roundoff = variance < tiny
    if beyond_roundoff.any():
        raise ValueError(
            f"{int(beyond_roundoff.sum())} variances negative beyond roundoff; "
            "moment computation is inconsistent"
        )
    floored = int(negative.sum())
    return IntensityPrediction(
        mean=mean, variance=np.maximum(variance, 0.0), floored_variances=floored
    )


def _joint_intensity_samples(state: VariationalState, x, num_samples: int, rng):
    """Joint posterior draws of the intensity field, shape (S, N, P).

    Latents are sampled with their full cross-cell covariance per
    latent; weights jointly per latent across tasks.
    """
    cfg = state.config
    x = np.atleast_2d(np.asarray(x, dtype=float))
    n = x.shape[0]
    s = int(num_samples)
    specs = _latent_kernel_specs(state, x.shape[1])

    f = np.empty((s, n, cfg.num_latents))
    for q in range(cfg.num_latents):
        z_q = np.asarray(state.z[q])
        k_zz = gram(specs[q], z_q).values
        k_zx = gram(specs[q], z_q, x).values
        k_xx = gram(specs[q], x).values
        l_factor, _ = chol_jitter(k_zz)
        half = solve_triangular(l_factor, k_zx, lower=True)
        w_full = solve_triangular(l_factor.T, half, lower=False)
        mean_q = w_full.T @ np.asarray(state.u_mean[q])
        proj = w_full.T @ np.asarray(factor_from_raw(state.u_cov_factor[q]))
        cov_q = k_xx - half.T @ half + proj @ proj.T
        l_cov, _ = chol_jitter(cov_q)
        f[:, :, q] = mean_q[None, :] + rng.standard_normal((s, n)) @ l_cov.T

    w_mean = np.asarray(state.w_mean)
    if cfg.weights_are_deterministic:
        w = np.broadcast_to(w_mean, (s, *w_mean.shape))
    elif cfg.coupled:
        w = np.empty((s, cfg.num_latents, cfg.num_tasks))
        for q in range(cfg.num_latents):
            factor = np.asarray(factor_from_raw(state.w_cov[q]))
            w[:, q, :] = w_mean[q][None, :] + rng.standard_normal((s, cfg.num_tasks)) @ factor.T
    else:
        std = np.sqrt(np.exp(np.asarray(state.w_cov)))
        w = w_mean[None] + std[None] * rng.standard_normal((s, *w_mean.shape))

    log_lam = np.einsum("snq,sqp->snp", f, w) + np.asarray(state.offsets)[None, None, :]
    return np.exp(log_lam)


def predictive_count_samples(
    state: VariationalState,
    x_star,
    num_samples: int,
    seed: int,
    region=None,
):
    """Sampled total event counts over a cell region, shape (S, P).

    Each draw takes a joint (weights, latents) sample, sums the
    implied intensity over the region, and draws one Poisson count per
    task. region indexes rows of x_star; None covers all of them.
    """
    if num_samples < 1:
        raise ValueError("num_samples must be positive")
    x = np.atleast_2d(np.asarray(x_star, dtype=float))
    if region is not None:
        x = x[np.asarray(region, dtype=int)]
    rng = np.random.default_rng(seed)
    lam = _joint_intensity_samples(state, x, num_samples, rng)  # (S, N, P)
    totals = lam.sum(axis=1)
    return rng.poisson(totals)


def conditional_probability_surface(state: VariationalState, x_star):
    """Task membership probabilities pi_p(x), shape (P, N); columns sum to 1."""
    mean = intensity_moment(state, x_star, 1)
    return mean / mean.sum(axis=0, keepdims=True)


def write_surface_csv(
    path,
    state: VariationalState,
    x_star,
    num_samples: int = 1000,
    seed: int = 0,
    meta: dict | None = None,
) -> None:
    """Emit per-cell predictions: moments, count quantiles, and pi.

    lo90/hi90 are linear-interpolated empirical 5%/95% quantiles of
    per-cell predictive counts from joint posterior draws.
    """
    x = np.atleast_2d(np.asarray(x_star, dtype=float))
    pred = intensity_mean_var(state, x)
    pi = conditional_probability_surface(state, x)
    rng = np.random.default_rng(seed)
    lam = _joint_intensity_samples(state, x, num_samples, rng)
    counts = rng.poisson(lam)  # (S, N, P)
    lo = np.quantile(counts, 0.05, axis=0)
    hi = np.quantile(counts, 0.95, axis=0)

    dim = x.shape[1]
    header = ["cell_id", *[f"x{d + 1}" for d in range(dim)], "task",
              "mean", "variance", "lo90", "hi90", "pi"]
    rows = []
    for n in range(x.shape[0]):
        for p in range(state.num_tasks):
            rows.append(
                [
                    n,
                    *[repr(float(v)) for v in x[n]],
                    p,
                    repr(float(pred.mean[p, n])),
                    repr(float(pred.variance[p, n])),
                    repr(float(lo[n, p])),
                    repr(float(hi[n, p])),
                    repr(float(pi[p, n])),
                ]
            )
    full_meta = {"num_samples": int(num_samples), "seed": int(seed)}
    if pred.variance_is_sampled:
        full_meta["variance_is_sampled"] = True
    full_meta.update(meta or {})
    _write_rows(path, full_meta, header, rows)
