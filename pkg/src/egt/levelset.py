"""Parameter sweeps and level-set extraction for the Gaussian model family.

The sweep evaluates a rescaled-Gaussian model (one N(mu, sigma^2) rescaled
onto each group's cells, mixed with the target's proportions) against a
grouped target over a (mu, sigma) lattice, recording the global divergence
and every per-group conditional divergence.  Along any global iso-level,
the per-group values can spread dramatically even though the global value
-- and, by construction, both odds criteria -- stay fixed; the extraction
walks lattice edges that cross the level and refines each crossing by
bisection on the true model (not on interpolated field values).
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .divergence import FGenerator, _divergence_rows
from .errors import ValidationError
from .grid import GroupedDistribution, recombine

DEFAULT_MU_RANGE = (-1.5, 1.5)
DEFAULT_SIGMA_RANGE = (0.05, 2.0)
DEFAULT_LATTICE = 301


@dataclass(frozen=True)
class SweepGrid:
    """Rectangular (mu, sigma) lattice, inclusive of both endpoints."""

    mu_lo: float = DEFAULT_MU_RANGE[0]
    mu_hi: float = DEFAULT_MU_RANGE[1]
    n_mu: int = DEFAULT_LATTICE
    sigma_lo: float = DEFAULT_SIGMA_RANGE[0]
    sigma_hi: float = DEFAULT_SIGMA_RANGE[1]
    n_sigma: int = DEFAULT_LATTICE

    def __post_init__(self):
        if not (self.mu_lo < self.mu_hi and self.sigma_lo < self.sigma_hi):
            raise ValidationError("sweep ranges must be nonempty intervals")
        if self.sigma_lo <= 0:
            raise ValidationError("sigma range must be positive")
        if self.n_mu < 2 or self.n_sigma < 2:
            raise ValidationError("sweep lattice needs at least 2 points per axis")

    @property
    def mus(self) -> np.ndarray:
        return np.linspace(self.mu_lo, self.mu_hi, self.n_mu)

    @property
    def sigmas(self) -> np.ndarray:
        return np.linspace(self.sigma_lo, self.sigma_hi, self.n_sigma)


@dataclass(frozen=True, eq=False)
class SweepField:
    """Sweep output: global and per-group divergences over the lattice.

    ``global_div`` has shape (n_mu, n_sigma); ``cond_div`` appends a group
    axis.  ``valid`` flags lattice entries whose model renormalization
    degenerated (never for finite parameters, kept for robustness).
    """

    sweep: SweepGrid
    generator: str
    global_div: np.ndarray
    cond_div: np.ndarray
    valid: np.ndarray


def _model_rows(p: GroupedDistribution, mu: float, sigmas: np.ndarray):
    """Conditional and mixture mass rows of the model at one mu, all sigmas.

    Returns (conds, mix): conds[a] has shape (n_sigma, n_cells_a) with the
    group-a conditional masses, mix (n_sigma, n_cells) the assembled model.
    The per-group renormalization happens in log space, so far-off (mu,
    sigma) still yield well-defined conditionals.
    """
    grid = p.grid
    centers = grid.centers
    n_sigma = sigmas.shape[0]
    mix = np.zeros((n_sigma, grid.n_cells))
    conds = []
    two_s2 = 2.0 * sigmas[:, None] ** 2
    for a in range(p.n_groups):
        cells = p.partition.group_cells(a)
        logw = -((centers[cells][None, :] - mu) ** 2) / two_s2
        logw -= logw.max(axis=1, keepdims=True)
        w = np.exp(logw)
        w /= w.sum(axis=1, keepdims=True)
        conds.append(w)
        mix[:, cells] += p.proportions[a] * w
    return conds, mix


def sweep(p: GroupedDistribution, f: FGenerator, sweep_grid: SweepGrid = None,
          support_tol: float = 0.0) -> SweepField:
    """Evaluate the rescaled-Gaussian family against ``p`` over the lattice."""
    if p.empty_groups():
        raise ValidationError("sweep target has empty groups")
    sweep_grid = sweep_grid or SweepGrid()
    mus, sigmas = sweep_grid.mus, sweep_grid.sigmas
    k = p.n_groups
    p_mix = recombine(p).mass
    p_conds = [p.conditionals[a].mass[p.partition.group_cells(a)] for a in range(k)]

    global_div = np.empty((sweep_grid.n_mu, sweep_grid.n_sigma))
    cond_div = np.empty((sweep_grid.n_mu, sweep_grid.n_sigma, k))
    valid = np.ones((sweep_grid.n_mu, sweep_grid.n_sigma), dtype=bool)
    for i, mu in enumerate(mus):
        conds, mix = _model_rows(p, float(mu), sigmas)
        ok = np.isfinite(mix).all(axis=1)
        valid[i] = ok
        global_div[i] = np.where(ok, _divergence_rows(f, p_mix, mix, support_tol), np.nan)
        for a in range(k):
            da = _divergence_rows(f, p_conds[a], conds[a], support_tol)
            cond_div[i, :, a] = np.where(ok, da, np.nan)
    return SweepField(sweep_grid, f.name, global_div, cond_div, valid)


@dataclass(frozen=True)
class LevelSetPoint:
    """One refined point on a global-divergence iso-level."""

    mu: float
    sigma: float
    global_div: float
    cond_div: tuple
    delta_egt: float


def _evaluate_point(p: GroupedDistribution, f: FGenerator, mu: float, sigma: float,
                    support_tol: float):
    conds, mix = _model_rows(p, mu, np.array([sigma]))
    g = float(_divergence_rows(f, recombine(p).mass, mix, support_tol)[0])
    per = tuple(
        float(_divergence_rows(
            f, p.conditionals[a].mass[p.partition.group_cells(a)], conds[a], support_tol)[0])
        for a in range(p.n_groups)
    )
    return g, per


def extract_level_set(
    p: GroupedDistribution,
    f: FGenerator,
    field: SweepField,
    epsilon: float,
    level_tol: float = 1e-4,
    support_tol: float = 0.0,
    max_bisect: int = 100,
) -> list:
    """Refine every lattice-edge crossing of the epsilon iso-level.

    For each lattice edge whose endpoints straddle epsilon, bisect along the
    edge re-evaluating the actual model until the global divergence is
    within ``level_tol`` of epsilon, then record the per-group divergences
    there.  Points come back sorted by (mu, sigma).
    """
    if not math.isfinite(epsilon) or epsilon <= 0:
        raise ValidationError("epsilon must be positive")
    mus, sigmas = field.sweep.mus, field.sweep.sigmas
    signed = field.global_div - epsilon

    def refine(mu0, s0, mu1, s1, g0, g1):
        lo, hi = 0.0, 1.0
        glo, ghi = g0, g1
        if abs(glo) <= level_tol:
            t, g = lo, glo
        elif abs(ghi) <= level_tol:
            t, g = hi, ghi
        else:
            t, g = None, None
            for _ in range(max_bisect):
                mid = 0.5 * (lo + hi)
                gm, _ = _evaluate_point(
                    p, f, mu0 + mid * (mu1 - mu0), s0 + mid * (s1 - s0), support_tol)
                gm -= epsilon
                if abs(gm) <= level_tol:
                    t, g = mid, gm
                    break
                if (gm < 0) == (glo < 0):
                    lo, glo = mid, gm
                else:
                    hi, ghi = mid, gm
            if t is None:
                return None
        mu = mu0 + t * (mu1 - mu0)
        sigma = s0 + t * (s1 - s0)
        gval, per = _evaluate_point(p, f, mu, sigma, support_tol)
        gap = max(per) - min(per) if all(map(math.isfinite, per)) else math.inf
        return LevelSetPoint(mu, sigma, gval, per, gap)

    points = []
    n_mu, n_sigma = signed.shape
    for i in range(n_mu):
        for j in range(n_sigma):
            if not field.valid[i, j] or not math.isfinite(signed[i, j]):
                continue
            # horizontal edge (same mu, next sigma) and vertical edge (next mu)
            for di, dj in ((0, 1), (1, 0)):
                i2, j2 = i + di, j + dj
                if i2 >= n_mu or j2 >= n_sigma:
                    continue
                if not field.valid[i2, j2] or not math.isfinite(signed[i2, j2]):
                    continue
                g0, g1 = signed[i, j], signed[i2, j2]
                if g0 == 0.0 or (g0 < 0) != (g1 < 0):
                    pt = refine(mus[i], sigmas[j], mus[i2], sigmas[j2], g0, g1)
                    if pt is not None:
                        points.append(pt)
    points.sort(key=lambda pt: (pt.mu, pt.sigma))
    # a node inside the tolerance band is reached from every incident edge;
    # keep one copy per coordinate pair
    deduped = []
    for pt in points:
        if deduped and pt.mu == deduped[-1].mu and pt.sigma == deduped[-1].sigma:
            continue
        deduped.append(pt)
    return deduped


def imbalance_extremes(points) -> tuple:
    """(most balanced, most imbalanced) level-set points by treatment gap."""
    if not points:
        raise ValidationError("no level-set points to rank")
    balanced = min(points, key=lambda pt: pt.delta_egt)
    worst = max(points, key=lambda pt: pt.delta_egt)
    return balanced, worst
