"""Per-task accuracy, predictive likelihood, and interval coverage measures."""

from __future__ import annotations

import numpy as np
from scipy.special import gammaln

from .data import CountGrid, _block_decompositions
from .model import VariationalState
from .predict import intensity_mean_var, predictive_count_samples, sample_intensities

__all__ = [
    "rmse",
    "nlpl",
    "empirical_coverage",
    "evaluation_report",
]


def rmse(pred_mean, counts) -> float:
    """Root mean squared error between predicted means and counts."""
    pred = np.asarray(pred_mean, dtype=float).ravel()
    y = np.asarray(counts, dtype=float).ravel()
    if pred.size == 0:
        raise ValueError("rmse needs at least one cell")
    if pred.shape != y.shape:
        raise ValueError(f"length mismatch: {pred.size} predictions vs {y.size} counts")
    return float(np.sqrt(np.mean((y - pred) ** 2)))


def nlpl(intensity_samples, counts, normalizer: str = "cells") -> float:
    """Negative log predictive likelihood under sampled intensities.

    Averages the per-sample Poisson log likelihood of the counts, summed
    over cells, and negates it. The sum is divided by the number of
    cells; normalizer="events" divides by the total event count
    instead, for comparability across evaluation sets of very different
    density.
    """
    lam = np.atleast_2d(np.asarray(intensity_samples, dtype=float))
    y = np.asarray(counts, dtype=float).ravel()
    if y.size == 0:
        raise ValueError("nlpl needs at least one cell")
    if lam.shape[1] != y.size:
        raise ValueError(
            f"intensity samples cover {lam.shape[1]} cells but counts cover {y.size}"
        )
    if not np.all(np.isfinite(lam)) or np.any(lam <= 0):
        raise ValueError("sampled intensities must be finite and positive")
    if normalizer == "cells":
        denom = float(y.size)
    elif normalizer == "events":
        denom = float(y.sum())
        if denom == 0:
            raise ValueError("event normalizer undefined for all-zero counts")
    else:
        raise ValueError(f"normalizer must be 'cells' or 'events', got {normalizer!r}")
    log_p = y[None, :] * np.log(lam) - lam - gammaln(y + 1.0)[None, :]
    return float(-np.mean(log_p.sum(axis=1)) / denom)


def _seed_list(seed) -> list[int]:
    return [int(s) for s in np.atleast_1d(np.asarray(seed, dtype=np.int64))]


def _rectangle_shapes(region_cells: int, cells_per_dim) -> list[tuple[int, ...]]:
    dims = np.asarray(cells_per_dim)
    shapes = [
        sides
        for sides in _block_decompositions(region_cells, len(dims))
        if np.all(np.asarray(sides) <= dims)
    ]
    if not shapes:
        raise ValueError(
            f"no axis-aligned rectangle of {region_cells} cells fits a "
            f"{tuple(int(c) for c in dims)} grid"
        )
    return shapes


def empirical_coverage(
    state: VariationalState,
    grid: CountGrid,
    cell_pool: str,
    task: int,
    region_cells: int,
    num_regions: int = 100,
    level: float = 0.9,
    seed=0,
    num_count_samples: int = 100,
) -> float:
    """Fraction of random subregions whose total count falls in the
    central predictive interval.

    Subregions are axis-aligned lattice rectangles of exactly
    region_cells cells, placed uniformly at random and redrawn until
    every covered cell belongs to the pool ("train" = observed for the
    task, "test" = held out). The interval takes the empirical level
    quantiles (linear interpolation) of sampled regional counts, and
    membership is inclusive at both ends. Each subregion draws its
    counts from a seed derived from its index, so the loop could run in
    any order.
    """
    if grid.grid is None:
        raise ValueError("count grid carries no lattice geometry; coverage needs one")
    if not 0.0 < level < 1.0:
        raise ValueError(f"level must lie in (0, 1), got {level}")
    if num_regions < 1:
        raise ValueError("num_regions must be >= 1")
    if region_cells < 1:
        raise ValueError("region_cells must be >= 1")
    if cell_pool == "train":
        pool = np.asarray(grid.observed[:, task], dtype=bool)
    elif cell_pool == "test":
        pool = ~np.asarray(grid.observed[:, task], dtype=bool)
    else:
        raise ValueError(f"cell_pool must be 'train' or 'test', got {cell_pool!r}")
    if pool.sum() < region_cells:
        raise ValueError(
            f"{cell_pool} pool for task {task} has {int(pool.sum())} cells, "
            f"smaller than the region size {region_cells}"
        )
    cells_per_dim = grid.grid.cells_per_dim
    shapes = _rectangle_shapes(region_cells, cells_per_dim)
    base = _seed_list(seed)
    place_rng = np.random.default_rng([*base, 23])

    alpha = (1.0 - level) / 2.0
    covered = 0
    for i in range(num_regions):
        for _ in range(1000):
            sides = shapes[place_rng.integers(len(shapes))]
            anchor = [place_rng.integers(c - s + 1) for c, s in zip(cells_per_dim, sides)]
            axes = [np.arange(a, a + s) for a, s in zip(anchor, sides)]
            mesh = np.meshgrid(*axes, indexing="ij")
            cells = np.ravel_multi_index(tuple(m.ravel() for m in mesh), cells_per_dim)
            if pool[cells].all():
                break
        else:
            raise ValueError(
                f"could not place a {region_cells}-cell rectangle inside the "
                f"{cell_pool} pool for task {task}"
            )
        draws = predictive_count_samples(
            state, grid.centroids, num_count_samples, seed=[*base, 29, i], region=cells
        )[:, task]
        lo = np.quantile(draws, alpha)
        hi = np.quantile(draws, 1.0 - alpha)
        total = int(grid.counts[cells, task].sum())
        covered += int(lo <= total <= hi)
    return covered / num_regions


def evaluation_report(
    state: VariationalState,
    grid: CountGrid,
    cells: str = "missing",
    region_cells: int = 4,
    num_regions: int = 100,
    level: float = 0.9,
    num_intensity_samples: int = 1000,
    num_count_samples: int = 100,
    seed: int = 0,
    fold_id: int | None = None,
    config: dict | None = None,
) -> dict:
    """Per-task error, likelihood, and coverage summary.

    rmse and nlpl score each task on its missing (default), observed, or
    all cells; each per-task entry records how many cells it used.
    ec_in and ec_out are interval coverages over the observed and
    held-out pools, null when a pool cannot hold a single region.
    Returns a JSON-ready dict keyed by task index, echoing fold, seed,
    and whatever config mapping the caller wants recorded.
    """
    if cells not in ("missing", "observed", "all"):
        raise ValueError(f"cells must be 'missing', 'observed', or 'all', got {cells!r}")
    pred = intensity_mean_var(state, grid.centroids)
    draws = sample_intensities(state, grid.centroids, num_intensity_samples, seed=[seed, 31])
    tasks = {}
    for p in range(grid.num_tasks):
        observed = grid.observed[:, p]
        if cells == "missing":
            mask = ~observed
        elif cells == "observed":
            mask = observed
        else:
            mask = np.ones_like(observed)
        if not mask.any():
            raise ValueError(f"task {p} has no {cells} cells to evaluate")

        def ec(pool_name, pool_mask, tag):
            if grid.grid is None or pool_mask.sum() < region_cells:
                return None
            return empirical_coverage(
                state, grid, pool_name, p, region_cells, num_regions, level,
                seed=[seed, tag], num_count_samples=num_count_samples,
            )

        tasks[str(p)] = {
            "rmse": rmse(pred.mean[p, mask], grid.counts[mask, p]),
            "nlpl": nlpl(draws[:, p, mask], grid.counts[mask, p]),
            "ec_in": ec("train", observed, 37),
            "ec_out": ec("test", ~observed, 41),
            "cells_used": int(mask.sum()),
        }
    return {
        "tasks": tasks,
        "cells": cells,
        "fold_id": fold_id,
        "seed": int(seed),
        "level": float(level),
        "region_cells": int(region_cells),
        "config": config,
    }
