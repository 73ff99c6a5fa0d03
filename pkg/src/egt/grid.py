"""Gridded one-dimensional distributions and their group structure.

Distributions live on a uniform grid of cells over ``[lo, hi]``.  A
distribution stores the probability *mass* of each cell, not a density
value, so no cell-width bookkeeping leaks into divergence computations.
An attribute partition labels every cell with one of ``K >= 2`` groups,
which induces the mixture view

    P = sum_a pi_a * P_a,

where ``pi_a`` is the mass P assigns to group a's cells and ``P_a`` is
the conditional of P on those cells.  ``decompose`` / ``recombine``
convert between the two views and are exact inverses up to float
round-off.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from functools import cached_property

import numpy as np
from scipy.special import logsumexp

from .errors import NumericalError, ValidationError

MASS_TOL = 1e-12


def _as_readonly(a, dtype=None) -> np.ndarray:
    out = np.array(a, dtype=dtype, copy=True)
    out.setflags(write=False)
    return out


@dataclass(frozen=True)
class GridSpec:
    """Uniform grid of ``n_cells`` cells covering ``[lo, hi]``."""

    lo: float
    hi: float
    n_cells: int

    def __post_init__(self):
        if not (math.isfinite(self.lo) and math.isfinite(self.hi)):
            raise ValidationError("grid bounds must be finite")
        if not self.lo < self.hi:
            raise ValidationError(f"grid needs lo < hi, got [{self.lo}, {self.hi}]")
        if not isinstance(self.n_cells, int) or self.n_cells < 2:
            raise ValidationError(f"grid needs an integer n_cells >= 2, got {self.n_cells!r}")

    @property
    def cell_width(self) -> float:
        return (self.hi - self.lo) / self.n_cells

    @cached_property
    def edges(self) -> np.ndarray:
        return _as_readonly(np.linspace(self.lo, self.hi, self.n_cells + 1))

    @cached_property
    def centers(self) -> np.ndarray:
        w = self.cell_width
        return _as_readonly(self.lo + w * (np.arange(self.n_cells) + 0.5))

    def cell_index(self, values) -> np.ndarray:
        """Map points in ``[lo, hi]`` to cell indices (hi falls in the last cell)."""
        v = np.asarray(values, dtype=float)
        if v.size and (v.min() < self.lo or v.max() > self.hi):
            raise ValidationError("values outside the grid domain")
        idx = np.floor((v - self.lo) / self.cell_width).astype(np.int64)
        return np.clip(idx, 0, self.n_cells - 1)


@dataclass(frozen=True, eq=False)
class GriddedDensity:
    """A probability distribution given by per-cell masses on a grid."""

    grid: GridSpec
    mass: np.ndarray

    def __post_init__(self):
        m = np.asarray(self.mass, dtype=float)
        if m.shape != (self.grid.n_cells,):
            raise ValidationError(
                f"mass must have shape ({self.grid.n_cells},), got {m.shape}"
            )
        if not np.all(np.isfinite(m)):
            raise ValidationError("mass contains non-finite entries")
        if np.any(m < 0):
            raise ValidationError("mass contains negative entries")
        total = float(m.sum())
        if abs(total - 1.0) > MASS_TOL:
            raise ValidationError(f"mass must sum to 1 within {MASS_TOL}, got {total!r}")
        object.__setattr__(self, "mass", _as_readonly(m))

    def support(self, tol: float = 0.0) -> np.ndarray:
        """Boolean mask of cells carrying mass above ``tol``."""
        return self.mass > tol

    def mean(self) -> float:
        return float(self.mass @ self.grid.centers)

    def variance(self) -> float:
        c = self.grid.centers
        mu = self.mean()
        return float(self.mass @ (c - mu) ** 2)


@dataclass(frozen=True, eq=False)
class AttributePartition:
    """Assignment of every grid cell to one of K >= 2 attribute groups."""

    grid: GridSpec
    labels: np.ndarray
    attribute_names: tuple = None

    def __post_init__(self):
        lab = np.asarray(self.labels)
        if lab.shape != (self.grid.n_cells,) or not np.issubdtype(lab.dtype, np.integer):
            raise ValidationError("labels must be one integer per grid cell")
        k = int(lab.max()) + 1 if lab.size else 0
        if lab.min() < 0 or k < 2:
            raise ValidationError("labels must cover groups 0..K-1 with K >= 2")
        counts = np.bincount(lab, minlength=k)
        if np.any(counts == 0):
            raise ValidationError("every group must own at least one cell")
        names = self.attribute_names
        if names is None:
            names = tuple(f"group{a}" for a in range(k))
        else:
            names = tuple(str(n) for n in names)
            if len(names) != k:
                raise ValidationError(f"expected {k} attribute names, got {len(names)}")
        object.__setattr__(self, "labels", _as_readonly(lab, dtype=np.int64))
        object.__setattr__(self, "attribute_names", names)
        object.__setattr__(self, "_n_groups", k)

    @property
    def n_groups(self) -> int:
        return self._n_groups

    def group_mask(self, a: int) -> np.ndarray:
        return self.labels == a

    def group_cells(self, a: int) -> np.ndarray:
        return np.flatnonzero(self.labels == a)

    def same_structure(self, other: "AttributePartition") -> bool:
        return self.grid == other.grid and np.array_equal(self.labels, other.labels)


@dataclass(frozen=True, eq=False)
class GroupedDistribution:
    """Mixture view of a distribution: proportions plus per-group conditionals.

    ``conditionals[a]`` is supported exactly on group a's cells; a group with
    proportion zero carries ``None`` (there is no conditional to speak of) and
    is reported through :meth:`empty_groups`.
    """

    partition: AttributePartition
    proportions: np.ndarray
    conditionals: tuple

    def __post_init__(self):
        pi = np.asarray(self.proportions, dtype=float)
        k = self.partition.n_groups
        if pi.shape != (k,):
            raise ValidationError(f"proportions must have shape ({k},)")
        if np.any(pi < 0) or not np.all(np.isfinite(pi)):
            raise ValidationError("proportions must be finite and nonnegative")
        if abs(float(pi.sum()) - 1.0) > MASS_TOL:
            raise ValidationError("proportions must sum to 1")
        conds = tuple(self.conditionals)
        if len(conds) != k:
            raise ValidationError(f"expected {k} conditionals, got {len(conds)}")
        for a, cond in enumerate(conds):
            if pi[a] == 0.0:
                if cond is not None:
                    raise ValidationError(f"group {a} has zero proportion; use None")
                continue
            if cond is None:
                raise ValidationError(f"group {a} has positive proportion but no conditional")
            if cond.grid != self.partition.grid:
                raise ValidationError("conditional grid does not match the partition grid")
            off = cond.mass[self.partition.labels != a]
            if off.size and np.any(off != 0.0):
                raise ValidationError(f"conditional {a} carries mass outside its group cells")
        object.__setattr__(self, "proportions", _as_readonly(pi))
        object.__setattr__(self, "conditionals", conds)

    @property
    def grid(self) -> GridSpec:
        return self.partition.grid

    @property
    def n_groups(self) -> int:
        return self.partition.n_groups

    def empty_groups(self) -> tuple:
        return tuple(a for a in range(self.n_groups) if self.proportions[a] == 0.0)

    def mixture(self) -> GriddedDensity:
        return recombine(self)


def decompose(density: GriddedDensity, partition: AttributePartition) -> GroupedDistribution:
    """Split a distribution into group proportions and conditionals."""
    if density.grid != partition.grid:
        raise ValidationError("density and partition live on different grids")
    k = partition.n_groups
    pi = np.zeros(k)
    conds = []
    for a in range(k):
        mask = partition.group_mask(a)
        pa = float(density.mass[mask].sum())
        pi[a] = pa
        if pa == 0.0:
            conds.append(None)
            continue
        cond = np.zeros(density.grid.n_cells)
        cond[mask] = density.mass[mask] / pa
        conds.append(GriddedDensity(density.grid, cond))
    # float round-off in the per-group sums can leave pi off 1 by ~1e-16
    pi /= pi.sum()
    return GroupedDistribution(partition, pi, tuple(conds))


def recombine(grouped: GroupedDistribution) -> GriddedDensity:
    """Reassemble the mixture ``sum_a pi_a * P_a`` into a flat distribution."""
    mass = np.zeros(grouped.grid.n_cells)
    for a, cond in enumerate(grouped.conditionals):
        if cond is not None:
            mass += grouped.proportions[a] * cond.mass
    return GriddedDensity(grouped.grid, mass)


def truncated_gaussian(grid: GridSpec, mean: float, std: float, region) -> GriddedDensity:
    """Gaussian N(mean, std^2) restricted to ``region`` cells and renormalized.

    Cell masses are proportional to the Gaussian density at the cell center.
    Normalization happens in log space, so distant means (relative masses far
    below float range) still produce the correct renormalized distribution.
    """
    if not (math.isfinite(mean) and math.isfinite(std)) or std <= 0:
        raise ValidationError("truncated_gaussian needs finite mean and std > 0")
    mask = np.zeros(grid.n_cells, dtype=bool)
    mask[np.asarray(region)] = True
    if not mask.any():
        raise ValidationError("truncation region contains no cells")
    centers = grid.centers[mask]
    with np.errstate(over="ignore"):
        logw = -((centers - mean) ** 2) / (2.0 * std * std)
    norm = logsumexp(logw)
    if not np.isfinite(norm):
        raise NumericalError("degenerate truncation: Gaussian underflows on every region cell")
    mass = np.zeros(grid.n_cells)
    mass[mask] = np.exp(logw - norm)
    mass /= mass.sum()
    return GriddedDensity(grid, mass)


def rescaled_gaussian_model(
    grid: GridSpec,
    mu: float,
    sigma: float,
    partition: AttributePartition,
    proportions,
) -> GroupedDistribution:
    """Model family used by the level-set sweeps: one Gaussian rescaled per group.

    Every group conditional is the same N(mu, sigma^2) restricted to that
    group's cells and renormalized, mixed with the supplied proportions.
    Matching the proportions to the target's enforces equal group odds by
    construction; only the per-group divergences are then free to differ.
    """
    pi = np.asarray(proportions, dtype=float)
    conds = []
    for a in range(partition.n_groups):
        if pi[a] == 0.0:
            conds.append(None)
            continue
        conds.append(truncated_gaussian(grid, mu, sigma, partition.group_mask(a)))
    return GroupedDistribution(partition, pi, tuple(conds))


DEFAULT_WARMUP_GRID = GridSpec(-3.0, 3.0, 1200)


def halfline_partition(grid: GridSpec, names=("neg", "pos")) -> AttributePartition:
    """Two groups split at the origin: group 0 negative axis, group 1 positive."""
    labels = (grid.centers > 0.0).astype(np.int64)
    return AttributePartition(grid, labels, names)


def warmup_target(grid: GridSpec = None, offset: float = 0.5, std: float = 0.3) -> GroupedDistribution:
    """Two-group reference target: inward-facing truncated Gaussians.

    Group 0 is N(+offset, std^2) truncated to the negative half, group 1 is
    N(-offset, std^2) truncated to the positive half, mixed 50/50 (exactly,
    so equal-odds checks at delta = 0 pass bit-for-bit).  Each conditional
    concentrates against the origin from its own side; a single rescaled
    Gaussian far out on one side can then reproduce the opposite group's
    tail almost perfectly while missing its own side entirely, which is
    what makes the divergence level sets so unbalanced.
    """
    grid = grid or DEFAULT_WARMUP_GRID
    part = halfline_partition(grid)
    p0 = truncated_gaussian(grid, +offset, std, part.group_mask(0))
    p1 = truncated_gaussian(grid, -offset, std, part.group_mask(1))
    return GroupedDistribution(part, np.array([0.5, 0.5]), (p0, p1))
