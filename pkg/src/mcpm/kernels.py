"""Stationary covariance functions on gridded inputs.

Two families are provided, squared exponential and Matern 3/2, both with
per-dimension lengthscales. The module keeps two layers: a small spec
dataclass plus numpy-facing helpers for callers that want plain arrays,
and jax-traceable value functions used inside the differentiable bound.

Cholesky factorizations go through an escalating relative jitter ladder
so mildly indefinite Gram matrices (near-duplicate inputs, long
lengthscales) still factor, while genuinely broken matrices fail loudly.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass

import jax
import jax.numpy as jnp
import numpy as np

from .exceptions import FactorizationError

__all__ = [
    "KernelFamily",
    "KernelSpec",
    "GramMatrix",
    "kernel_eval",
    "gram",
    "chol_jitter",
    "kernel_values",
    "chol_ladder",
    "BASE_JITTER",
    "JITTER_CAP",
]

BASE_JITTER = 1e-6
JITTER_CAP = 1e-2

_SQRT3 = 1.7320508075688772


class KernelFamily(str, enum.Enum):
    SQUARED_EXPONENTIAL = "squared-exponential"
    MATERN32 = "matern32"


@dataclass(frozen=True)
class KernelSpec:
    """Covariance function family plus its hyperparameters.

    Lengthscales are per input dimension; a single entry is broadcast to
    whatever dimension the inputs have.
    """

    family: KernelFamily = KernelFamily.SQUARED_EXPONENTIAL
    variance: float = 1.0
    lengthscales: tuple[float, ...] = (1.0,)

    def __post_init__(self):
        family = KernelFamily(self.family)
        object.__setattr__(self, "family", family)
        variance = float(self.variance)
        if not np.isfinite(variance) or variance <= 0:
            raise ValueError(f"kernel variance must be positive, got {variance}")
        object.__setattr__(self, "variance", variance)
        if np.ndim(self.lengthscales) == 0:
            ls = (float(self.lengthscales),)
        else:
            ls = tuple(float(v) for v in self.lengthscales)
        if len(ls) == 0 or any(not np.isfinite(v) or v <= 0 for v in ls):
            raise ValueError(f"lengthscales must be positive, got {ls}")
        object.__setattr__(self, "lengthscales", ls)

    def lengthscales_for_dim(self, dim: int) -> np.ndarray:
        """Expand the stored lengthscales to `dim` entries."""
        ls = np.asarray(self.lengthscales, dtype=float)
        if ls.shape[0] == dim:
            return ls
        if ls.shape[0] == 1:
            return np.full(dim, ls[0])
        raise ValueError(
            f"kernel has {ls.shape[0]} lengthscales but inputs have dimension {dim}"
        )


@dataclass(frozen=True)
class GramMatrix:
    """Kernel matrix together with the diagonal jitter applied to it."""

    values: np.ndarray
    jitter_applied: float = 0.0


def _scaled_sqdist(x, x2, lengthscales):
    """Pairwise squared distance after per-dimension rescaling."""
    xs = x / lengthscales
    x2s = x2 / lengthscales
    d2 = jnp.sum((xs[:, None, :] - x2s[None, :, :]) ** 2, axis=-1)
    return d2


def kernel_values(family: KernelFamily, variance, lengthscales, x, x2):
    """Kernel matrix as a jax expression; hyperparameters may be traced.

    :param family: static kernel family selector
    :param variance: scalar signal variance
    :param lengthscales: (D,) positive scales
    :param x: (N, D) inputs
    :param x2: (M, D) inputs
    :return: (N, M) covariance values
    """
    d2 = _scaled_sqdist(x, x2, lengthscales)
    if family == KernelFamily.SQUARED_EXPONENTIAL:
        return variance * jnp.exp(-0.5 * d2)
    if family == KernelFamily.MATERN32:
        # sqrt has no gradient at 0; mask the diagonal through a dummy value
        positive = d2 > 0.0
        r = jnp.sqrt(jnp.where(positive, d2, 1.0))
        vals = variance * (1.0 + _SQRT3 * r) * jnp.exp(-_SQRT3 * r)
        return jnp.where(positive, vals, variance)
    raise ValueError(f"unknown kernel family: {family}")


def _as_points(x, name: str) -> np.ndarray:
    pts = np.asarray(x, dtype=float)
    if pts.ndim == 1:
        pts = pts[None, :]
    if pts.ndim != 2:
        raise ValueError(f"{name} must be a point or an (N, D) array, got shape {pts.shape}")
    if pts.shape[0] == 0:
        raise ValueError(f"{name} is empty")
    return pts


def kernel_eval(spec: KernelSpec, x, x2) -> float:
    """Covariance between two single points."""
    xa = _as_points(x, "x")
    xb = _as_points(x2, "x2")
    if xa.shape != (1, xa.shape[1]) or xb.shape != (1, xb.shape[1]):
        raise ValueError("kernel_eval expects single points; use gram for batches")
    if xa.shape[1] != xb.shape[1]:
        raise ValueError(f"points have dimensions {xa.shape[1]} and {xb.shape[1]}")
    ls = spec.lengthscales_for_dim(xa.shape[1])
    val = kernel_values(spec.family, spec.variance, ls, xa, xb)
    return float(np.asarray(val)[0, 0])


def gram(spec: KernelSpec, x, x2=None) -> GramMatrix:
    """Dense kernel matrix between point sets (no jitter applied here)."""
    xa = _as_points(x, "x")
    xb = xa if x2 is None else _as_points(x2, "x2")
    if xa.shape[1] != xb.shape[1]:
        raise ValueError(f"point sets have dimensions {xa.shape[1]} and {xb.shape[1]}")
    ls = spec.lengthscales_for_dim(xa.shape[1])
    vals = np.asarray(kernel_values(spec.family, spec.variance, ls, xa, xb))
    return GramMatrix(values=vals, jitter_applied=0.0)


def _jitter_rungs(base_rel: float, cap_rel: float) -> tuple[float, ...]:
    rungs = []
    r = float(base_rel)
    while r < cap_rel * (1.0 - 1e-12):
        rungs.append(r)
        r *= 10.0
    rungs.append(float(cap_rel))
    return tuple(rungs)


def chol_ladder(k_matrix, base_rel: float = BASE_JITTER, cap_rel: float = JITTER_CAP,
                try_exact: bool = False):
    """Lower Cholesky factor with escalating relative jitter.

    Trial factorizations run under stop_gradient so only the final
    factorization at the selected jitter participates in gradients. When
    even the cap fails the returned factor contains NaNs; eager callers
    should check and raise, traced callers let the NaN propagate into
    the objective where the step logic rejects it.

    try_exact prepends a zero-jitter rung, for small well-conditioned
    matrices whose factorization should stay exact when possible.

    :return: (lower factor, absolute jitter added to the diagonal)
    """
    k_matrix = jnp.asarray(k_matrix)
    n = k_matrix.shape[0]
    eye = jnp.eye(n, dtype=k_matrix.dtype)
    diag_scale = jnp.mean(jnp.diag(k_matrix))
    diag_scale = jnp.where(diag_scale > 0.0, diag_scale, 1.0)
    ladder = _jitter_rungs(base_rel, cap_rel)
    if try_exact:
        ladder = [0.0, *ladder]
    rungs = jnp.asarray(ladder, dtype=k_matrix.dtype)
    frozen = jax.lax.stop_gradient(k_matrix)
    trials = [jnp.linalg.cholesky(frozen + r * diag_scale * eye) for r in rungs]
    ok = jnp.stack([~jnp.any(jnp.isnan(t)) for t in trials])
    rel = jnp.where(jnp.any(ok), rungs[jnp.argmax(ok)], rungs[-1])
    jitter = rel * diag_scale
    return jnp.linalg.cholesky(k_matrix + jitter * eye), jitter


def chol_jitter(k, base_jitter: float = BASE_JITTER):
    """Factor a Gram matrix, escalating jitter until it succeeds.

    :param k: GramMatrix or square array
    :param base_jitter: starting jitter relative to the mean diagonal
    :return: (lower triangular numpy factor, absolute jitter applied)
    :raises FactorizationError: not factorizable even at the jitter cap
    """
    values = k.values if isinstance(k, GramMatrix) else np.asarray(k, dtype=float)
    if values.ndim != 2 or values.shape[0] != values.shape[1]:
        raise ValueError(f"expected a square matrix, got shape {values.shape}")
    if values.shape[0] == 0:
        raise ValueError("empty matrix")
    factor, jitter = chol_ladder(jnp.asarray(values), base_rel=base_jitter)
    factor = np.asarray(factor)
    if np.any(np.isnan(factor)):
        raise FactorizationError(
            f"matrix of size {values.shape[0]} not factorizable at relative jitter cap {JITTER_CAP}"
        )
    return factor, float(jitter)
