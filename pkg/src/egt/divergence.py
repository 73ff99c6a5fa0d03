"""f-divergences between gridded distributions.

For a convex generator f with f(1) = 0, the divergence between cell-mass
vectors p and q is

    D_f(P||Q) = sum_{q_i > 0} q_i f(p_i / q_i)  +  fbar_inf * sum_{q_i = 0} p_i,

where ``fbar_inf = lim f(t)/t`` prices the mass of P that escapes Q's
support, and cells with p_i = 0 inside Q's support use the stored limit
f(0) rather than evaluating 0*log(0).  The conventions 0 * inf = 0 apply:
an infinite limit only contributes when multiplied by positive mass.

The precision/recall entries in the builtin table are *support-based*
generators: their eval is identically zero on (0, inf) and the whole value
comes from the stored f(0) / fbar_inf limits, which makes the generic
formula return exact support masses -- 1 - Q(Supp P) for precision,
1 - P(Supp Q) for recall, and the sum of the two for the combined one.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.special import xlogy

from .errors import NumericalError, ValidationError
from .grid import GriddedDensity, GroupedDistribution, recombine

BUILTIN_GENERATORS = (
    "kl",
    "reverse-kl",
    "js",
    "tv",
    "chi2",
    "precision",
    "recall",
    "precision-recall",
)

# p/q ratios past this are priced as escaped mass (q * f(p/q) -> p * fbar_inf
# to relative error ~1e-297); keeps generator evals clear of float overflow.
RATIO_CAP = 1e300


@dataclass(frozen=True, eq=False)
class FGenerator:
    """Convex generator f plus the limits the divergence formula needs.

    ``eval`` and ``deriv`` accept scalars or numpy arrays of ratios in
    (0, inf).  ``f_at_zero`` and ``f_bar_inf`` are the stored limits
    f(0+) and lim f(t)/t; either may be ``math.inf``.  Support-based
    generators (precision/recall) have eval == 0 with a jump at the
    support boundary, so their stored limits are exempt from the usual
    limit-consistency check.
    """

    name: str
    eval: callable
    deriv: callable
    f_at_zero: float
    f_bar_inf: float
    log_base: float = None
    support_based: bool = False

    def divergence_range(self) -> float:
        """Upper end of the reachable divergence interval, f(0) + fbar(inf)."""
        return self.f_at_zero + self.f_bar_inf


def builtin_generator(name: str, base: float = None) -> FGenerator:
    """Look up a builtin generator by name.

    ``base`` sets the logarithm base for kl / reverse-kl / js; it defaults
    to 2 for js (divergences then live in (0, 2)) and to natural log for
    the KL pair.
    """
    key = name.strip().lower().replace("_", "-")
    if key not in BUILTIN_GENERATORS:
        raise ValidationError(f"unknown generator {name!r}; choose from {BUILTIN_GENERATORS}")
    if base is not None and base <= 1.0:
        raise ValidationError("log base must exceed 1")
    if base is not None and key not in ("kl", "reverse-kl", "js"):
        raise ValidationError(f"generator {key!r} takes no log base")

    if key == "kl":
        b = base if base is not None else math.e
        ln_b = math.log(b)
        return FGenerator(
            name="kl",
            eval=lambda t: xlogy(t, t) / ln_b,
            deriv=lambda t: (np.log(t) + 1.0) / ln_b,
            f_at_zero=0.0,
            f_bar_inf=math.inf,
            log_base=b,
        )
    if key == "reverse-kl":
        b = base if base is not None else math.e
        ln_b = math.log(b)
        return FGenerator(
            name="reverse-kl",
            eval=lambda t: -np.log(t) / ln_b,
            deriv=lambda t: -1.0 / (np.asarray(t, dtype=float) * ln_b),
            f_at_zero=math.inf,
            f_bar_inf=0.0,
            log_base=b,
        )
    if key == "js":
        b = base if base is not None else 2.0
        ln_b = math.log(b)
        # t*log(t) - (t+1)*log((t+1)/2), rearranged so huge ratios do not
        # cancel catastrophically.
        return FGenerator(
            name="js",
            eval=lambda t: (xlogy(t, 2.0 * t / (t + 1.0)) + np.log(2.0 / (np.asarray(t, dtype=float) + 1.0))) / ln_b,
            deriv=lambda t: np.log(2.0 * t / (t + 1.0)) / ln_b,
            f_at_zero=math.log(2.0) / ln_b,
            f_bar_inf=math.log(2.0) / ln_b,
            log_base=b,
        )
    if key == "tv":
        return FGenerator(
            name="tv",
            eval=lambda t: 0.5 * np.abs(np.asarray(t, dtype=float) - 1.0),
            deriv=lambda t: 0.5 * np.sign(np.asarray(t, dtype=float) - 1.0),
            f_at_zero=0.5,
            f_bar_inf=0.5,
        )
    if key == "chi2":
        return FGenerator(
            name="chi2",
            eval=lambda t: (np.asarray(t, dtype=float) - 1.0) ** 2,
            deriv=lambda t: 2.0 * (np.asarray(t, dtype=float) - 1.0),
            f_at_zero=1.0,
            f_bar_inf=math.inf,
        )
    zero = lambda t: np.zeros_like(np.asarray(t, dtype=float))
    if key == "precision":
        return FGenerator("precision", zero, zero, 1.0, 0.0, support_based=True)
    if key == "recall":
        return FGenerator("recall", zero, zero, 0.0, 1.0, support_based=True)
    # precision-recall: sum of the two support-based generators, so the
    # divergence equals (1 - precision) + (1 - recall).
    return FGenerator("precision-recall", zero, zero, 1.0, 1.0, support_based=True)


def _divergence_rows(f: FGenerator, p: np.ndarray, q_rows: np.ndarray, support_tol: float) -> np.ndarray:
    """D_f(p || q) for each row of ``q_rows``; the vectorized core.

    ``p`` has shape (n,), ``q_rows`` shape (m, n).  Returns shape (m,).
    Rows may evaluate to ``inf``; NaN anywhere aborts.
    """
    p = np.asarray(p, dtype=float)
    q = np.atleast_2d(np.asarray(q_rows, dtype=float))
    in_q = q > support_tol
    in_p = p > support_tol

    out = np.zeros(q.shape[0])

    # mass of P escaping Q's support, priced at fbar_inf (0 * inf = 0)
    escaped = np.where(~in_q, p[None, :], 0.0).sum(axis=1)
    if math.isinf(f.f_bar_inf):
        out = np.where(escaped > 0.0, np.inf, out)
    else:
        out = out + f.f_bar_inf * escaped

    # cells of Q's support where P vanishes: q * f(0) from the stored limit
    zero_p = in_q & ~in_p[None, :]
    q_at_zero_p = np.where(zero_p, q, 0.0).sum(axis=1)
    if math.isinf(f.f_at_zero):
        out = np.where(q_at_zero_p > 0.0, np.inf, out)
    else:
        out = out + f.f_at_zero * q_at_zero_p

    # joint-support cells: q * f(p/q)
    joint = in_q & in_p[None, :]
    if joint.any():
        with np.errstate(over="ignore", divide="ignore", invalid="ignore"):
            ratio = np.where(joint, p[None, :] / np.where(joint, q, 1.0), 1.0)
            overflow = joint & (ratio > RATIO_CAP)
            if overflow.any():
                # q is subnormal: q*f(p/q) ~ p*fbar_inf to far below any tolerance
                contrib = np.where(overflow, p[None, :], 0.0).sum(axis=1)
                if math.isinf(f.f_bar_inf):
                    out = np.where(contrib > 0.0, np.inf, out)
                else:
                    out = out + f.f_bar_inf * contrib
                ratio = np.where(overflow, 1.0, ratio)
                joint = joint & ~overflow
            vals = f.eval(ratio)
            terms = np.where(joint, q * vals, 0.0)
            if np.isnan(terms).any():
                raise NumericalError(f"generator {f.name!r} produced NaN terms")
            out = out + terms.sum(axis=1)

    if np.isnan(out).any():
        raise NumericalError(f"divergence for generator {f.name!r} is NaN")
    return out


def f_divergence(
    f: FGenerator,
    p: GriddedDensity,
    q: GriddedDensity,
    support_tol: float = 0.0,
) -> float:
    """D_f(P || Q) between two distributions on the same grid.

    The result is a finite nonnegative float or ``math.inf``; it is exactly
    0.0 when the mass vectors are identical.
    """
    if p.grid != q.grid:
        raise ValidationError("divergence needs both distributions on one grid")
    if support_tol < 0:
        raise ValidationError("support_tol must be nonnegative")
    if np.array_equal(p.mass, q.mass):
        return 0.0
    return float(_divergence_rows(f, p.mass, q.mass[None, :], support_tol)[0])


def support_precision_recall(q: GriddedDensity, p: GriddedDensity, support_tol: float = 0.0):
    """Support masses (precision, recall) of a model Q against a target P.

    Precision is Q(Supp P) -- how much of the model's mass lands where the
    target actually lives; recall is P(Supp Q) -- how much of the target the
    model covers.
    """
    if p.grid != q.grid:
        raise ValidationError("precision/recall needs both distributions on one grid")
    precision = float(q.mass[p.mass > support_tol].sum())
    recall = float(p.mass[q.mass > support_tol].sum())
    return precision, recall


@dataclass(frozen=True)
class DecompositionCheck:
    """Both sides of the mixture decomposition identity and their residual."""

    lhs: float
    rhs: float
    residual: float
    per_group: tuple


def decomposition_check(
    f: FGenerator,
    p: GroupedDistribution,
    q: GroupedDistribution,
    support_tol: float = 0.0,
) -> DecompositionCheck:
    """Verify D_f(P||Q) = sum_a pi_a^Q D_f(P_a||Q_a) for matched proportions.

    The identity only holds when P and Q give every group identical odds,
    so mismatched proportions are refused rather than silently compared.
    """
    if not p.partition.same_structure(q.partition):
        raise ValidationError("decomposition check needs a shared partition")
    gap = float(np.max(np.abs(p.proportions - q.proportions)))
    if gap > 1e-12:
        raise ValidationError(
            f"decomposition identity requires matching group odds (max gap {gap:.3e})"
        )
    lhs = f_divergence(f, recombine(p), recombine(q), support_tol)
    per_group = []
    rhs = 0.0
    for a in range(p.n_groups):
        if q.proportions[a] == 0.0:
            per_group.append(0.0)
            continue
        da = f_divergence(f, p.conditionals[a], q.conditionals[a], support_tol)
        per_group.append(da)
        rhs = rhs + q.proportions[a] * da
    if math.isinf(lhs) and math.isinf(rhs):
        residual = 0.0
    else:
        residual = abs(lhs - rhs)
    return DecompositionCheck(lhs, float(rhs), float(residual), tuple(per_group))
