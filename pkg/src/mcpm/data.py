"""Event datasets, count grids, fold masking, and synthetic generators.

Grids are axis-aligned with half-open cells: an event on an interior
cell boundary lands in the higher-index cell, and the upper domain
boundary folds into the last cell so no event in the closed domain is
dropped. Cell ids are C-order ravel indices (first dimension slowest).

File formats are plain CSV/JSON. CSV files may carry '# key: json'
metadata lines ahead of the header row; loaders skip and return them.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from .kernels import KernelFamily, KernelSpec, chol_jitter, gram

__all__ = [
    "GridSpec",
    "EventDataset",
    "CountGrid",
    "FoldSpec",
    "SyntheticCounts",
    "discretize",
    "make_folds",
    "subregion_ids",
    "apply_fold",
    "generate_s1",
    "generate_line",
    "write_events_csv",
    "load_events_csv",
    "write_counts_csv",
    "load_counts_csv",
    "write_truth_csv",
    "load_truth_csv",
    "write_fold_json",
    "load_fold_json",
]


@dataclass(frozen=True)
class GridSpec:
    """Regular rectangular grid over an axis-aligned domain."""

    cells_per_dim: tuple[int, ...]
    bounds: tuple[tuple[float, float], ...]

    def __post_init__(self):
        cells = tuple(int(c) for c in self.cells_per_dim)
        bounds = tuple((float(lo), float(hi)) for lo, hi in self.bounds)
        if len(cells) != len(bounds):
            raise ValueError("cells_per_dim and bounds must have equal length")
        if len(cells) == 0:
            raise ValueError("grid needs at least one dimension")
        if any(c < 1 for c in cells):
            raise ValueError(f"cell counts must be >= 1, got {cells}")
        if any(hi <= lo for lo, hi in bounds):
            raise ValueError(f"bounds must satisfy lo < hi, got {bounds}")
        object.__setattr__(self, "cells_per_dim", cells)
        object.__setattr__(self, "bounds", bounds)

    @property
    def dim(self) -> int:
        return len(self.cells_per_dim)

    @property
    def num_cells(self) -> int:
        return int(np.prod(self.cells_per_dim))

    @property
    def widths(self) -> np.ndarray:
        return np.array([(hi - lo) / c for (lo, hi), c in zip(self.bounds, self.cells_per_dim)])

    def centroids(self) -> np.ndarray:
        """Cell centers in cell-id order, shape (num_cells, dim)."""
        axes = [
            lo + (np.arange(c) + 0.5) * (hi - lo) / c
            for (lo, hi), c in zip(self.bounds, self.cells_per_dim)
        ]
        mesh = np.meshgrid(*axes, indexing="ij")
        return np.stack([m.ravel() for m in mesh], axis=-1)

    def to_dict(self) -> dict:
        return {"cells_per_dim": list(self.cells_per_dim), "bounds": [list(b) for b in self.bounds]}

    @classmethod
    def from_dict(cls, d: dict) -> "GridSpec":
        return cls(
            cells_per_dim=tuple(d["cells_per_dim"]),
            bounds=tuple((b[0], b[1]) for b in d["bounds"]),
        )


@dataclass(frozen=True)
class EventDataset:
    """Point events with a task label per event.

    Bounds describe the observation region; when omitted they are
    inferred as the coordinate-wise extent of the events.
    """

    points: np.ndarray
    task: np.ndarray
    num_tasks: int
    bounds: tuple[tuple[float, float], ...] | None = None

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=float)
        task = np.asarray(self.task, dtype=int)
        if pts.ndim != 2:
            raise ValueError(f"points must be (N, D), got shape {pts.shape}")
        if task.shape != (pts.shape[0],):
            raise ValueError("task labels must align with points")
        if self.num_tasks < 1:
            raise ValueError("num_tasks must be >= 1")
        if pts.shape[0] and (task.min() < 0 or task.max() >= self.num_tasks):
            raise ValueError(
                f"task labels must lie in [0, {self.num_tasks}), got range "
                f"[{task.min()}, {task.max()}]"
            )
        bounds = self.bounds
        if bounds is None:
            if pts.shape[0]:
                bounds = tuple((float(lo), float(hi)) for lo, hi in zip(pts.min(0), pts.max(0)))
            else:
                bounds = tuple((0.0, 1.0) for _ in range(pts.shape[1]))
        else:
            bounds = tuple((float(lo), float(hi)) for lo, hi in bounds)
            if len(bounds) != pts.shape[1]:
                raise ValueError("bounds dimension does not match points")
            lo = np.array([b[0] for b in bounds])
            hi = np.array([b[1] for b in bounds])
            if pts.shape[0] and (np.any(pts < lo) or np.any(pts > hi)):
                raise ValueError("events fall outside the stated bounds")
        object.__setattr__(self, "points", pts)
        object.__setattr__(self, "task", task)
        object.__setattr__(self, "bounds", bounds)


@dataclass(frozen=True)
class CountGrid:
    """Per-cell, per-task counts with an observation mask.

    The mask marks training visibility. Counts for unobserved entries
    are retained when known (synthetic holdouts, fold evaluation) and
    zero otherwise.
    """

    counts: np.ndarray
    centroids: np.ndarray
    observed: np.ndarray
    grid: GridSpec | None = None

    def __post_init__(self):
        counts = np.asarray(self.counts)
        cent = np.asarray(self.centroids, dtype=float)
        obs = np.asarray(self.observed, dtype=bool)
        if counts.ndim != 2:
            raise ValueError(f"counts must be (N, P), got shape {counts.shape}")
        if cent.ndim != 2 or cent.shape[0] != counts.shape[0]:
            raise ValueError("centroids must be (N, D) aligned with counts")
        if obs.shape != counts.shape:
            raise ValueError("observed mask must match counts shape")
        if np.any(counts < 0):
            raise ValueError("counts must be nonnegative")
        object.__setattr__(self, "counts", counts.astype(np.int64))
        object.__setattr__(self, "centroids", cent)
        object.__setattr__(self, "observed", obs)

    @property
    def num_cells(self) -> int:
        return self.counts.shape[0]

    @property
    def num_tasks(self) -> int:
        return self.counts.shape[1]

    @property
    def dim(self) -> int:
        return self.centroids.shape[1]


@dataclass(frozen=True)
class FoldSpec:
    """Latin-style assignment of one masked subregion per task per fold."""

    num_subregions: int
    blocks_per_dim: tuple[int, ...]
    assignment: tuple[tuple[int, ...], ...]

    def __post_init__(self):
        blocks = tuple(int(b) for b in self.blocks_per_dim)
        assign = tuple(tuple(int(s) for s in row) for row in self.assignment)
        z = int(self.num_subregions)
        if int(np.prod(blocks)) != z:
            raise ValueError("blocks_per_dim must multiply to num_subregions")
        if len(assign) != z:
            raise ValueError(f"expected {z} folds, got {len(assign)}")
        for row in assign:
            if any(s < 0 or s >= z for s in row):
                raise ValueError("subregion ids out of range")
            if len(set(row)) != len(row):
                raise ValueError("a fold must mask distinct subregions across tasks")
        object.__setattr__(self, "num_subregions", z)
        object.__setattr__(self, "blocks_per_dim", blocks)
        object.__setattr__(self, "assignment", assign)

    @property
    def num_folds(self) -> int:
        return self.num_subregions

    @property
    def num_tasks(self) -> int:
        return len(self.assignment[0])


@dataclass(frozen=True)
class SyntheticCounts:
    """Generator output: observable counts plus the generating process."""

    grid: CountGrid
    intensity: np.ndarray
    weights: np.ndarray
    latents: np.ndarray
    offsets: np.ndarray


def discretize(events: EventDataset, grid_spec: GridSpec) -> CountGrid:
    """Bin events into grid cells, conserving the event total.

    Cells are half-open along every axis; events exactly on the upper
    domain boundary are assigned to the last cell. Events outside the
    closed domain raise with the offending row indices.
    """
    pts = events.points
    if pts.shape[1] != grid_spec.dim:
        raise ValueError(
            f"events have dimension {pts.shape[1]}, grid has {grid_spec.dim}"
        )
    lo = np.array([b[0] for b in grid_spec.bounds])
    hi = np.array([b[1] for b in grid_spec.bounds])
    inside = np.all((pts >= lo) & (pts <= hi), axis=1)
    if not np.all(inside):
        bad = np.flatnonzero(~inside)
        shown = ", ".join(str(i) for i in bad[:10])
        more = "" if bad.size <= 10 else f" (+{bad.size - 10} more)"
        raise ValueError(f"events outside grid bounds at rows: {shown}{more}")

    cells = np.asarray(grid_spec.cells_per_dim)
    widths = grid_spec.widths
    idx = np.floor((pts - lo) / widths).astype(np.int64)
    idx = np.minimum(idx, cells - 1)  # upper boundary folds into the last cell
    flat = np.ravel_multi_index(tuple(idx.T), tuple(cells))

    counts = np.zeros((grid_spec.num_cells, events.num_tasks), dtype=np.int64)
    np.add.at(counts, (flat, events.task), 1)
    observed = np.ones_like(counts, dtype=bool)
    return CountGrid(counts=counts, centroids=grid_spec.centroids(), observed=observed, grid=grid_spec)


def _block_decompositions(z: int, dims: int):
    """All per-dimension block counts whose product is z."""
    if dims == 1:
        yield (z,)
        return
    for b in range(1, z + 1):
        if z % b == 0:
            for rest in _block_decompositions(z // b, dims - 1):
                yield (b,) + rest


def make_folds(grid_spec: GridSpec, num_subregions: int, num_tasks: int, seed: int) -> FoldSpec:
    """Partition the grid into Z rectangular blocks and assign masks.

    Fold f masks subregion perm[(f + p) mod Z] for task p, with perm a
    seeded permutation: each fold masks P distinct subregions, and over
    all Z folds every task is masked on every subregion exactly once.
    """
    z = int(num_subregions)
    p = int(num_tasks)
    if z < 1:
        raise ValueError("num_subregions must be >= 1")
    if z < p:
        raise ValueError(f"need num_subregions >= num_tasks, got {z} < {p}")
    cells = np.asarray(grid_spec.cells_per_dim)
    valid = [
        blocks
        for blocks in _block_decompositions(z, grid_spec.dim)
        if all(c % b == 0 for c, b in zip(cells, blocks))
    ]
    if not valid:
        raise ValueError(
            f"cannot split grid {tuple(grid_spec.cells_per_dim)} into {z} rectangular blocks"
        )
    blocks = min(valid, key=lambda b: (max(b) / min(b), b))
    perm = np.random.default_rng([int(seed), 41]).permutation(z)
    assignment = tuple(tuple(int(perm[(f + q) % z]) for q in range(p)) for f in range(z))
    return FoldSpec(num_subregions=z, blocks_per_dim=blocks, assignment=assignment)


def subregion_ids(grid_spec: GridSpec, blocks_per_dim: tuple[int, ...]) -> np.ndarray:
    """Subregion id per cell, C-order over block indices."""
    cells = np.asarray(grid_spec.cells_per_dim)
    blocks = np.asarray(blocks_per_dim)
    if np.any(cells % blocks != 0):
        raise ValueError("block counts must divide cells_per_dim")
    per_block = cells // blocks
    multi = np.stack(np.unravel_index(np.arange(grid_spec.num_cells), tuple(cells)), axis=-1)
    block_multi = multi // per_block
    return np.ravel_multi_index(tuple(block_multi.T), tuple(blocks))


def apply_fold(grid: CountGrid, fold_spec: FoldSpec, fold_id: int) -> CountGrid:
    """Hide each task's assigned subregion for one fold."""
    if grid.grid is None:
        raise ValueError("count grid carries no GridSpec; folds need the grid geometry")
    if not 0 <= fold_id < fold_spec.num_folds:
        raise ValueError(f"fold_id must lie in [0, {fold_spec.num_folds}), got {fold_id}")
    if fold_spec.num_tasks != grid.num_tasks:
        raise ValueError("fold spec task count does not match the grid")
    regions = subregion_ids(grid.grid, fold_spec.blocks_per_dim)
    observed = grid.observed.copy()
    for p, sub in enumerate(fold_spec.assignment[fold_id]):
        observed[regions == sub, p] = False
    return replace(grid, observed=observed)


def _sample_latents(kernel: KernelSpec, x: np.ndarray, num_latents: int, rng) -> np.ndarray:
    factor, _ = chol_jitter(gram(kernel, x))
    eps = rng.standard_normal((x.shape[0], num_latents))
    return factor @ eps


S1_WEIGHTS = np.array([
    [1.2, 1.0, -0.8, -1.0],
    [0.1, 0.4, 0.8, 0.3],
])
S1_OFFSETS = np.array([0.6, 0.45, 0.55, 0.4])


def generate_s1(
    seed: int,
    weights: np.ndarray | None = None,
    offsets: np.ndarray | None = None,
    noise_std: float = 0.05,
) -> SyntheticCounts:
    """Four correlated tasks mixed from two latent surfaces on a 20x20 grid.

    The default mixing matrix makes tasks (1,2) and (3,4) positive pairs
    with negative cross-pair correlation. Intensities carry
    multiplicative lognormal noise (std noise_std) before Poisson
    sampling. Passing a custom (Q, P) weights matrix replaces both the
    mixing and the latent count, e.g. an identity for unmixed tasks.
    """
    grid_spec = GridSpec(cells_per_dim=(20, 20), bounds=((0.0, 1.0), (0.0, 1.0)))
    x = grid_spec.centroids()
    kernel = KernelSpec(KernelFamily.SQUARED_EXPONENTIAL, variance=1.0, lengthscales=(0.25, 0.25))
    weights = S1_WEIGHTS if weights is None else np.asarray(weights, dtype=float)
    offsets = (
        S1_OFFSETS if offsets is None else np.asarray(offsets, dtype=float)
    )
    if weights.ndim != 2 or weights.shape[1] != offsets.shape[0]:
        raise ValueError("weights must be (Q, P) with P matching offsets")
    rng = np.random.default_rng([int(seed), 101])
    latents = _sample_latents(kernel, x, weights.shape[0], rng)
    log_intensity = latents @ weights + offsets
    noise = rng.normal(0.0, noise_std, size=log_intensity.shape)
    intensity = np.exp(log_intensity + noise)
    counts = rng.poisson(intensity)
    count_grid = CountGrid(
        counts=counts,
        centroids=x,
        observed=np.ones_like(counts, dtype=bool),
        grid=grid_spec,
    )
    return SyntheticCounts(
        grid=count_grid, intensity=intensity, weights=weights, latents=latents, offsets=offsets
    )


def generate_line(
    seed: int,
    num_cells: int = 50,
    bounds: tuple[float, float] = (0.0, 100.0),
    holdout_above: float | None = None,
) -> SyntheticCounts:
    """Two tasks sharing one latent on a 1-D grid.

    With holdout_above set, cells whose centroid exceeds the threshold
    are masked for every task; their counts are retained for scoring.
    """
    grid_spec = GridSpec(cells_per_dim=(int(num_cells),), bounds=(bounds,))
    x = grid_spec.centroids()
    span = bounds[1] - bounds[0]
    kernel = KernelSpec(KernelFamily.SQUARED_EXPONENTIAL, variance=1.0, lengthscales=(0.12 * span,))
    weights = np.array([[1.0, 0.7]])
    offsets = np.array([0.4, 0.2])
    rng = np.random.default_rng([int(seed), 103])
    latents = _sample_latents(kernel, x, 1, rng)
    intensity = np.exp(latents @ weights + offsets + rng.normal(0.0, 0.05, (x.shape[0], 2)))
    counts = rng.poisson(intensity)
    observed = np.ones_like(counts, dtype=bool)
    if holdout_above is not None:
        observed[x[:, 0] > holdout_above, :] = False
    count_grid = CountGrid(counts=counts, centroids=x, observed=observed, grid=grid_spec)
    return SyntheticCounts(
        grid=count_grid, intensity=intensity, weights=weights, latents=latents, offsets=offsets
    )


# ---------------------------------------------------------------------------
# file formats


def _write_rows(path, meta: dict | None, header: list[str], rows):
    path = Path(path)
    with path.open("w", newline="") as fh:
        for key, value in (meta or {}).items():
            fh.write(f"# {key}: {json.dumps(value, sort_keys=True)}\n")
        writer = csv.writer(fh)
        writer.writerow(header)
        writer.writerows(rows)


def _read_rows(path):
    """Returns (meta dict, header, data rows); '#' lines become metadata."""
    meta = {}
    with Path(path).open() as fh:
        lines = fh.read().splitlines()
    body = []
    for line in lines:
        if line.startswith("#"):
            stripped = line[1:].strip()
            if ": " in stripped:
                key, _, raw = stripped.partition(": ")
                try:
                    meta[key] = json.loads(raw)
                except json.JSONDecodeError:
                    meta[key] = raw
            continue
        if line.strip():
            body.append(line)
    if not body:
        raise ValueError(f"{path}: no header row")
    reader = csv.reader(body)
    rows = list(reader)
    return meta, rows[0], rows[1:]


def write_events_csv(path, events: EventDataset, meta: dict | None = None) -> None:
    dim = events.points.shape[1]
    header = [f"x{d + 1}" for d in range(dim)] + ["task"]
    rows = [
        [repr(float(v)) for v in pt] + [str(int(t))]
        for pt, t in zip(events.points, events.task)
    ]
    _write_rows(path, meta, header, rows)


def load_events_csv(path, num_tasks: int | None = None) -> EventDataset:
    _, header, rows = _read_rows(path)
    if not header or header[-1] != "task" or not all(
        h == f"x{d + 1}" for d, h in enumerate(header[:-1])
    ):
        raise ValueError(f"{path}: expected header x1,...,xD,task, got {header}")
    dim = len(header) - 1
    if dim < 1:
        raise ValueError(f"{path}: events need at least one coordinate column")
    points, tasks = [], []
    for i, row in enumerate(rows):
        if len(row) != dim + 1:
            raise ValueError(f"{path}: row {i + 2} has {len(row)} fields, expected {dim + 1}")
        try:
            points.append([float(v) for v in row[:-1]])
            tasks.append(int(row[-1]))
        except ValueError as exc:
            raise ValueError(f"{path}: row {i + 2} is malformed: {exc}") from None
    task_arr = np.asarray(tasks, dtype=int)
    if task_arr.size and task_arr.min() < 0:
        raise ValueError(f"{path}: negative task labels")
    if num_tasks is not None:
        p = num_tasks
    else:
        p = int(task_arr.max()) + 1 if task_arr.size else 1
        present = set(task_arr.tolist())
        missing = sorted(set(range(p)) - present)
        if missing:
            raise ValueError(f"{path}: task ids are not dense, missing {missing}")
    return EventDataset(points=np.asarray(points, dtype=float).reshape(len(rows), dim), task=task_arr, num_tasks=p)


def write_counts_csv(path, grid: CountGrid, meta: dict | None = None) -> None:
    full_meta = dict(meta or {})
    if grid.grid is not None:
        full_meta.setdefault("grid", grid.grid.to_dict())
    dim = grid.dim
    header = ["cell_id"] + [f"x{d + 1}" for d in range(dim)] + ["task", "count", "observed"]
    rows = []
    for n in range(grid.num_cells):
        coords = [repr(float(v)) for v in grid.centroids[n]]
        for p in range(grid.num_tasks):
            rows.append(
                [str(n)] + coords + [str(p), str(int(grid.counts[n, p])), str(int(grid.observed[n, p]))]
            )
    _write_rows(path, full_meta, header, rows)


def load_counts_csv(path) -> tuple[CountGrid, dict]:
    meta, header, rows = _read_rows(path)
    if len(header) < 4 or header[0] != "cell_id" or header[-3:] != ["task", "count", "observed"]:
        raise ValueError(f"{path}: expected header cell_id,x1,...,task,count,observed, got {header}")
    dim = len(header) - 4
    cells: dict[int, np.ndarray] = {}
    records = []
    for i, row in enumerate(rows):
        if len(row) != len(header):
            raise ValueError(f"{path}: row {i + 2} has {len(row)} fields, expected {len(header)}")
        try:
            cid = int(row[0])
            coords = np.array([float(v) for v in row[1 : 1 + dim]])
            task = int(row[1 + dim])
            count = int(row[2 + dim])
            obs = bool(int(row[3 + dim]))
        except ValueError as exc:
            raise ValueError(f"{path}: row {i + 2} is malformed: {exc}") from None
        records.append((cid, task, count, obs))
        cells.setdefault(cid, coords)
    if not records:
        raise ValueError(f"{path}: no data rows")
    n = max(cells) + 1
    if sorted(cells) != list(range(n)):
        raise ValueError(f"{path}: cell ids must cover 0..{n - 1} without gaps")
    p = max(t for _, t, _, _ in records) + 1
    counts = np.zeros((n, p), dtype=np.int64)
    observed = np.zeros((n, p), dtype=bool)
    seen = np.zeros((n, p), dtype=bool)
    for cid, task, count, obs in records:
        if seen[cid, task]:
            raise ValueError(f"{path}: duplicate entry for cell {cid}, task {task}")
        seen[cid, task] = True
        counts[cid, task] = count
        observed[cid, task] = obs
    if not np.all(seen):
        raise ValueError(f"{path}: missing (cell, task) rows")
    centroids = np.stack([cells[i] for i in range(n)])
    grid_spec = GridSpec.from_dict(meta["grid"]) if "grid" in meta else _infer_grid(centroids)
    return (
        CountGrid(counts=counts, centroids=centroids, observed=observed, grid=grid_spec),
        meta,
    )


def _infer_grid(centroids: np.ndarray) -> GridSpec | None:
    """Recover a GridSpec from full-grid centroids, None if irregular."""
    dims = centroids.shape[1]
    axes = []
    for d in range(dims):
        vals = np.unique(centroids[:, d])
        if vals.size > 1:
            steps = np.diff(vals)
            if not np.allclose(steps, steps[0], rtol=1e-6):
                return None
            w = steps[0]
        else:
            w = 1.0
        axes.append((vals, w))
    if int(np.prod([a[0].size for a in axes])) != centroids.shape[0]:
        return None
    return GridSpec(
        cells_per_dim=tuple(a[0].size for a in axes),
        bounds=tuple((float(a[0][0] - a[1] / 2), float(a[0][-1] + a[1] / 2)) for a in axes),
    )


def write_truth_csv(path, grid: CountGrid, intensity: np.ndarray, meta: dict | None = None) -> None:
    intensity = np.asarray(intensity, dtype=float)
    if intensity.shape != grid.counts.shape:
        raise ValueError("intensity must be (N, P) aligned with the grid")
    full_meta = dict(meta or {})
    if grid.grid is not None:
        full_meta.setdefault("grid", grid.grid.to_dict())
    dim = grid.dim
    header = ["cell_id"] + [f"x{d + 1}" for d in range(dim)] + ["task", "intensity"]
    rows = []
    for n in range(grid.num_cells):
        coords = [repr(float(v)) for v in grid.centroids[n]]
        for p in range(grid.num_tasks):
            rows.append([str(n)] + coords + [str(p), repr(float(intensity[n, p]))])
    _write_rows(path, full_meta, header, rows)


def load_truth_csv(path) -> tuple[np.ndarray, dict]:
    meta, header, rows = _read_rows(path)
    if len(header) < 3 or header[0] != "cell_id" or header[-2:] != ["task", "intensity"]:
        raise ValueError(f"{path}: expected header cell_id,x1,...,task,intensity, got {header}")
    dim = len(header) - 3
    entries = []
    for i, row in enumerate(rows):
        try:
            entries.append((int(row[0]), int(row[1 + dim]), float(row[2 + dim])))
        except (ValueError, IndexError) as exc:
            raise ValueError(f"{path}: row {i + 2} is malformed: {exc}") from None
    n = max(e[0] for e in entries) + 1
    p = max(e[1] for e in entries) + 1
    out = np.full((n, p), np.nan)
    for cid, task, val in entries:
        out[cid, task] = val
    if np.any(np.isnan(out)):
        raise ValueError(f"{path}: missing (cell, task) rows")
    return out, meta


def write_fold_json(path, fold_spec: FoldSpec, meta: dict | None = None) -> None:
    payload = {
        "Z": fold_spec.num_subregions,
        "blocks_per_dim": list(fold_spec.blocks_per_dim),
        "folds": [list(row) for row in fold_spec.assignment],
    }
    payload.update(meta or {})
    Path(path).write_text(json.dumps(payload, sort_keys=True, indent=1) + "\n")


def load_fold_json(path) -> FoldSpec:
    payload = json.loads(Path(path).read_text())
    try:
        return FoldSpec(
            num_subregions=payload["Z"],
            blocks_per_dim=tuple(payload["blocks_per_dim"]),
            assignment=tuple(tuple(row) for row in payload["folds"]),
        )
    except KeyError as exc:
        raise ValueError(f"{path}: missing fold field {exc}") from None
