"""Hitting prescribed per-group divergences with support-preserving models.

The workhorse is a two-coefficient reweighting of a reference distribution
R: pick a region A with R(A) = alpha and define

    q = (1/beta) * r/alpha        on A,
        (1 - 1/beta) * r/(1-alpha)  elsewhere,

whose divergence from R is the closed form

    phi(alpha, beta) = (1/beta) f(beta*alpha)
                       + ((beta-1)/beta) f((1-alpha)*beta/(beta-1)),

independent of R.  phi(1/2, 2) = 0 and phi tends to f(0) + fbar(inf)
toward (alpha, beta) -> (1, inf), and it sweeps every value in between, so
any target divergence in the open interval is reachable.  Assembling one
such model per group (with the target's own proportions) produces mixtures
that pass the odds-based checks exactly while spreading treatment across
groups by any prescribed amount.

On a grid, region masses are quantized to prefix sums of R's cells.  A
fractional boundary cell cannot keep the construction exact: a cell mixing
the two coefficients contributes q_k f(r_k/q_k), which convexity of the
perspective map places strictly below the two-ratio value.  Instead, alpha
snaps to the nearest feasible prefix mass and beta is re-solved on the
analytic level set so phi -- hence the divergence -- is preserved exactly.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.optimize import brentq

from .divergence import FGenerator
from .errors import NumericalError, ValidationError
from .fairness import FairnessReport, fairness_report
from .grid import GriddedDensity, GroupedDistribution

REGION_RULES = ("lower-tail",)


def phi(f: FGenerator, alpha: float, beta: float) -> float:
    """Divergence of the two-coefficient reweighting, Jensen-nonnegative."""
    if not 0.0 < alpha < 1.0:
        raise ValidationError(f"alpha must lie in (0, 1), got {alpha!r}")
    if not beta > 1.0:
        raise ValidationError(f"beta must exceed 1, got {beta!r}")
    t1 = float(f.eval(beta * alpha)) / beta
    t2 = (beta - 1.0) / beta * float(f.eval((1.0 - alpha) * beta / (beta - 1.0)))
    return t1 + t2


@dataclass(frozen=True)
class PhiPoint:
    alpha: float
    beta: float
    value: float


def invert_phi(f: FGenerator, target: float, tol: float = 1e-9) -> PhiPoint:
    """Find (alpha, beta) with phi = target, canonically.

    The search walks the path alpha(s) = 1/2 + s*(alpha_max - 1/2),
    beta(s) = 2 + s*B from the zero point (1/2, 2) toward (1, inf), taking
    the first crossing of the target (phi is monotone along the path for
    the builtin generators; a fine scan re-brackets if it is not).  The
    path is extended adaptively until it clears the target, which keeps
    the result deterministic for a fixed target.
    """
    sup = f.divergence_range()
    if not 0.0 < target < sup:
        raise ValidationError(
            f"target {target!r} outside the reachable interval (0, {sup!r})"
        )

    # extend the path end until phi exceeds the target
    spread = 1e-8
    end = None
    for _ in range(40):
        alpha_max = 1.0 - spread
        b_max = 1.0 / spread
        val = phi(f, alpha_max, 2.0 + b_max)
        if val > target:
            end = (alpha_max, b_max)
            break
        spread /= 10.0
        if 1.0 - spread == 1.0:
            break
    if end is None:
        raise NumericalError(f"phi cannot clear target {target!r} at float precision")
    alpha_max, b_max = end

    def path(s: float):
        return 0.5 + s * (alpha_max - 0.5), 2.0 + s * b_max

    def g(s: float) -> float:
        val = phi(f, *path(s)) - target
        # keep brentq's interpolation finite if phi overflows past the target
        return min(val, 1e300) if math.isfinite(val) else 1e300

    # first sign change on a fine scan; phi(0) = 0 < target
    grid = np.linspace(0.0, 1.0, 4097)
    lo = 0.0
    bracket = None
    for s in grid[1:]:
        if g(s) >= 0.0:
            bracket = (lo, float(s))
            break
        lo = float(s)
    if bracket is None:
        raise NumericalError(f"no bracket found for target {target!r} along the phi path")
    root = brentq(g, *bracket, xtol=1e-16, rtol=8.9e-16, maxiter=200)
    alpha, beta = path(root)
    value = phi(f, alpha, beta)
    if abs(value - target) > tol:
        raise NumericalError(
            f"phi inversion stalled at |{value!r} - {target!r}| > {tol}"
        )
    return PhiPoint(alpha, beta, value)


def _phi_fixed_alpha_sup(f: FGenerator, alpha: float, toward_one: bool) -> float:
    """Supremum of phi(alpha, .) on the branch toward beta -> 1+ or beta -> inf."""
    if toward_one:
        return float(f.eval(alpha)) + (1.0 - alpha) * f.f_bar_inf
    return alpha * f.f_bar_inf + float(f.eval(1.0 - alpha))


def _solve_beta(f: FGenerator, alpha: float, target: float):
    """Find beta with phi(alpha, beta) = target, or None if out of reach.

    phi(alpha, .) vanishes at beta = 1/alpha and grows toward both ends of
    (1, inf), so each branch is scanned from the zero outward for the first
    bracket.  Branch order prefers beta below 1/alpha (region overweighted).
    """
    if target == 0.0:
        return 1.0 / alpha
    beta0 = 1.0 / alpha

    def g(beta: float) -> float:
        return phi(f, alpha, beta) - target

    for toward_one in (True, False):
        if target >= _phi_fixed_alpha_sup(f, alpha, toward_one) * (1.0 - 1e-12):
            continue
        if toward_one:
            # walk beta down from 1/alpha toward 1
            ts = 1.0 - np.logspace(0.0, -14.0, 600)  # fractions of the way to 1
            betas = beta0 - ts * (beta0 - 1.0)
        else:
            betas = beta0 * np.logspace(0.0, 250.0, 600)
            betas = betas[np.isfinite(betas)]
        prev = beta0
        for b in betas:
            if b == prev:
                continue
            try:
                val = g(float(b))
            except (OverflowError, FloatingPointError):
                break
            if not math.isfinite(val):
                break
            if val >= 0.0:
                lo, hi = (float(b), prev) if toward_one else (prev, float(b))
                return brentq(g, lo, hi, xtol=1e-300, rtol=8.9e-16, maxiter=300)
            prev = float(b)
    return None


def build_q_alpha_beta(
    f: FGenerator,
    r: GriddedDensity,
    alpha: float,
    beta: float,
    region_rule: str = "lower-tail",
) -> GriddedDensity:
    """Two-coefficient reweighting of R on its grid, divergence-exact.

    The region is the cumulative lower tail of R along increasing cell
    index.  The requested alpha snaps to the nearest prefix mass the grid
    can realize and beta is re-solved so phi(f, alpha', beta') equals
    phi(f, alpha, beta); the returned distribution therefore satisfies
    D_f(R || Q) = phi(f, alpha, beta) to float round-off and has exactly
    R's support.
    """
    if region_rule not in REGION_RULES:
        raise ValidationError(f"unknown region rule {region_rule!r}; choose from {REGION_RULES}")
    target = phi(f, alpha, beta)  # also validates the (alpha, beta) domain

    csum = np.cumsum(r.mass)
    prefixes = csum[:-1]
    usable = (prefixes > 0.0) & (prefixes < 1.0)
    # identical prefix masses (runs of empty cells) are interchangeable
    if not usable.any():
        raise ValidationError(
            "reference distribution is concentrated on a single cell; no region boundary exists"
        )
    candidates = np.flatnonzero(usable)
    order = np.argsort(np.abs(prefixes[candidates] - alpha), kind="stable")

    last_err = None
    for j in candidates[order]:
        a_snap = float(prefixes[j])
        beta_snap = _solve_beta(f, a_snap, target)
        if beta_snap is None:
            continue
        c_region = 1.0 / (beta_snap * a_snap)
        c_rest = (beta_snap - 1.0) / (beta_snap * (1.0 - a_snap))
        if not (c_region > 0.0 and c_rest > 0.0 and math.isfinite(c_region) and math.isfinite(c_rest)):
            continue
        mass = np.where(np.arange(r.grid.n_cells) <= j, c_region * r.mass, c_rest * r.mass)
        if not np.array_equal(mass > 0.0, r.mass > 0.0):
            last_err = "coefficient underflow broke support preservation"
            continue
        total = float(mass.sum())
        if abs(total - 1.0) > 1e-12:
            last_err = f"reweighted mass sums to {total!r}"
            continue
        achieved = phi(f, a_snap, beta_snap)
        if abs(achieved - target) > 2e-10:
            last_err = f"snapped divergence off target by {abs(achieved - target):.3e}"
            continue
        return GriddedDensity(r.grid, mass)
    raise NumericalError(
        f"no grid region realizes divergence {target!r} exactly"
        + (f" ({last_err})" if last_err else "")
    )


@dataclass(frozen=True)
class CounterexampleSpec:
    """Targets for an equal-odds model that still treats one group worst.

    With global divergence epsilon and treatment spread gamma, the singled
    out group ``bar_a`` receives epsilon + gamma*(K-1)/K and every other
    group epsilon - gamma/K, so the proportion-weighted mean stays epsilon
    while the worst pairwise gap is exactly gamma.
    """

    epsilon: float
    gamma: float
    bar_a: int = 0

    def __post_init__(self):
        if not (math.isfinite(self.epsilon) and math.isfinite(self.gamma)):
            raise ValidationError("epsilon and gamma must be finite")
        if not 0.0 < self.gamma < self.epsilon:
            raise ValidationError("need 0 < gamma < epsilon")
        if self.bar_a < 0:
            raise ValidationError("bar_a must be a group index")

    def targets(self, n_groups: int) -> np.ndarray:
        if self.bar_a >= n_groups:
            raise ValidationError(f"bar_a {self.bar_a} out of range for {n_groups} groups")
        t = np.full(n_groups, self.epsilon - self.gamma / n_groups)
        t[self.bar_a] = self.epsilon + self.gamma * (n_groups - 1) / n_groups
        return t


@dataclass(frozen=True)
class CounterexampleResult:
    model: GroupedDistribution
    targets: tuple
    achieved: tuple
    report: FairnessReport


def build_counterexample(
    f: FGenerator,
    p: GroupedDistribution,
    spec: CounterexampleSpec,
) -> CounterexampleResult:
    """Equal-odds model whose per-group treatment spreads by exactly gamma.

    Requires the target P to have exactly equal group proportions (the
    spread bookkeeping above assumes uniform weights).  Each group's model
    conditional is a two-coefficient reweighting of P's own conditional,
    so supports match per group and both odds checks pass at delta = 0.
    """
    if p.empty_groups():
        raise ValidationError("target has empty groups")
    ego_gap = float(p.proportions.max() - p.proportions.min())
    if ego_gap > 1e-12:
        raise ValidationError(
            f"counterexample construction needs exactly equal group odds (gap {ego_gap:.3e})"
        )
    k = p.n_groups
    targets = spec.targets(k)
    sup = f.divergence_range()
    if targets.min() <= 0.0 or targets.max() >= sup:
        raise ValidationError(
            f"per-group targets {targets.tolist()} fall outside the reachable interval (0, {sup!r})"
        )
    conds = []
    for a in range(k):
        point = invert_phi(f, float(targets[a]))
        conds.append(build_q_alpha_beta(f, p.conditionals[a], point.alpha, point.beta))
    model = GroupedDistribution(p.partition, p.proportions, tuple(conds))
    report = fairness_report(f, p, model)
    return CounterexampleResult(model, tuple(float(t) for t in targets), report.divergences, report)
