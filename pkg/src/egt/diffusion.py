"""Toy denoising trainer: per-noise-level affine denoisers on grid data.

The denoiser family F(x, sigma) = a_sigma * x + b_sigma is deliberately
tiny: the expected reconstruction loss of an affine map against data with
mean m and variance v under additive N(0, sigma^2) noise has the closed
form

    L(a, b) = (a-1)^2 (v + m^2) + 2 (a-1) m b + b^2 + a^2 sigma^2,

minimized at the posterior-mean coefficients a* = v/(v+sigma^2),
b* = m (1 - a*) with L* = v sigma^2 / (v + sigma^2) -- for any data
distribution, Gaussian or not.  That oracle makes worst-group training
quantitatively checkable: every trained coefficient pair can be scored
against the exact optimum of its own objective.

Worst-group selection is per noise level: group losses feed one moving
average per (group, sigma), and each iteration descends, at every level,
the loss of the group whose average is largest there, ties to the lowest
index.  Coefficients are either shared across groups (pooled) or per-group
(the conditional variant).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np

from .errors import NumericalError, ValidationError
from .grid import GroupedDistribution, recombine
from .sampling import draw_cells
from .training import EmaTracker, TrainConfig

DEFAULT_NOISE_LEVELS = (0.05, 2.0, 8)  # geomspace lo, hi, count
DEFAULT_BATCH = 256


def default_noise_levels(n: int = DEFAULT_NOISE_LEVELS[2]) -> np.ndarray:
    return np.geomspace(DEFAULT_NOISE_LEVELS[0], DEFAULT_NOISE_LEVELS[1], n)


def affine_loss(a, b, m, v, sigma):
    """Expected reconstruction MSE of x -> a*x + b; broadcasts.

    Overflow is deliberate: runaway coefficients produce inf losses, which
    the training loop detects and converts into a clean abort.
    """
    a, b = np.asarray(a, dtype=float), np.asarray(b, dtype=float)
    with np.errstate(over="ignore", invalid="ignore"):
        return (a - 1.0) ** 2 * (v + m * m) + 2.0 * (a - 1.0) * m * b + b * b + a * a * sigma ** 2


def bayes_optimal_affine(m, v, sigma):
    """(a*, b*, minimal loss) of the affine family; exact for any data law."""
    sigma = np.asarray(sigma, dtype=float)
    a = v / (v + sigma ** 2)
    b = m * (1.0 - a)
    return a, b, v * sigma ** 2 / (v + sigma ** 2)


def group_moments(data: GroupedDistribution):
    """(means, variances) of the group conditionals, exact grid moments."""
    if data.empty_groups():
        raise ValidationError("toy data has empty groups")
    m = np.array([data.conditionals[a].mean() for a in range(data.n_groups)])
    v = np.array([data.conditionals[a].variance() for a in range(data.n_groups)])
    return m, v


def mixture_moments(data: GroupedDistribution):
    mix = recombine(data)
    return mix.mean(), mix.variance()


@dataclass(eq=False)
class DiffusionToy:
    """Affine denoisers (one pair per noise level, optionally per group)."""

    data: GroupedDistribution
    noise_levels: np.ndarray
    weights: np.ndarray = None
    coeffs: np.ndarray = None
    conditional: bool = False

    def __post_init__(self):
        sig = np.asarray(self.noise_levels, dtype=float)
        if sig.ndim != 1 or sig.size < 2 or np.any(sig <= 0) or not np.all(np.isfinite(sig)):
            raise ValidationError("need at least two positive, finite noise levels")
        self.noise_levels = sig
        w = np.ones(sig.size) if self.weights is None else np.asarray(self.weights, dtype=float)
        if w.shape != sig.shape or np.any(w < 0) or not np.all(np.isfinite(w)):
            raise ValidationError("weights must be finite, nonnegative, one per level")
        self.weights = w
        if self.data.empty_groups():
            raise ValidationError("toy data has empty groups")
        shape = (self.data.n_groups, sig.size, 2) if self.conditional else (sig.size, 2)
        if self.coeffs is None:
            init = np.zeros(shape)
            init[..., 0] = 1.0  # identity denoiser
            self.coeffs = init
        else:
            c = np.array(self.coeffs, dtype=float)
            if c.shape != shape or not np.all(np.isfinite(c)):
                raise ValidationError(f"coefficients must be finite with shape {shape}")
            self.coeffs = c

    @property
    def n_levels(self) -> int:
        return self.noise_levels.size

    @property
    def n_groups(self) -> int:
        return self.data.n_groups

    def coeffs_for(self, a: int) -> np.ndarray:
        """(n_levels, 2) coefficient view that group a's samples go through."""
        return self.coeffs[a] if self.conditional else self.coeffs

    def copy(self) -> "DiffusionToy":
        return DiffusionToy(self.data, self.noise_levels, self.weights,
                            self.coeffs.copy(), self.conditional)


def expected_group_losses(toy: DiffusionToy) -> np.ndarray:
    """Closed-form per-(group, level) losses of the current coefficients."""
    m, v = group_moments(toy.data)
    out = np.empty((toy.n_groups, toy.n_levels))
    for a in range(toy.n_groups):
        ca = toy.coeffs_for(a)
        out[a] = affine_loss(ca[:, 0], ca[:, 1], m[a], v[a], toy.noise_levels)
    return out


def loss_gap(toy: DiffusionToy) -> float:
    """Worst over noise levels of the largest pairwise group-loss gap."""
    losses = expected_group_losses(toy)
    return float((losses.max(axis=0) - losses.min(axis=0)).max())


@dataclass(frozen=True)
class DiffusionHistory:
    """Per-iteration record: minibatch losses, closed-form losses, selections.

    ``batch_losses[t, a, s]`` is NaN when iteration t saw no group-a samples
    (pooled modes only; stratified modes always populate).  ``selected`` is
    -1 outside minmax.  ``expected_losses`` has one leading row for the
    initial coefficients.
    """

    batch_losses: np.ndarray
    expected_losses: np.ndarray
    selected: np.ndarray

    @property
    def n_steps(self) -> int:
        return self.batch_losses.shape[0]


def _sq(x):
    return x * x


def _exact_grad(a, b, m, v, sigma):
    with np.errstate(over="ignore", invalid="ignore"):
        ga = 2.0 * (a - 1.0) * (v + m * m) + 2.0 * m * b + 2.0 * a * sigma ** 2
        gb = 2.0 * (a - 1.0) * m + 2.0 * b
    return ga, gb


def diffusion_train(toy: DiffusionToy, cfg: TrainConfig) -> tuple:
    """Train the toy's coefficients; returns (new toy, history).

    cfg.method picks the strategy: "baseline" descends the pooled loss,
    "reweighted" the equal-weight mean of group losses, "minmax" the
    per-level worst group chosen by EMA, and "conditional" fits per-group
    coefficient pairs (the toy must be conditional).  batch_size 0 uses
    exact expected gradients from grid moments; otherwise minibatches of
    that size are drawn per iteration (stratified per group except for the
    pooled baseline/reweighted draws).  Updates are preconditioned by the
    exact second moment of the noisy input, so all noise levels converge at
    comparable rates.  Deterministic per cfg.seed.
    """
    if cfg.method not in ("baseline", "conditional", "reweighted", "minmax"):
        raise ValidationError(f"diffusion training has no {cfg.method!r} method")
    if cfg.method == "conditional" and not toy.conditional:
        raise ValidationError("conditional method needs per-group coefficients")
    if cfg.method != "conditional" and toy.conditional:
        raise ValidationError(f"{cfg.method} method uses pooled coefficients")
    out = toy.copy()
    k, sig, w = out.n_groups, out.noise_levels, out.weights
    s = sig.size
    batch = cfg.batch_size if cfg.batch_size > 0 else 0
    rng = np.random.default_rng(np.random.SeedSequence((cfg.seed, 0xD1FF)))
    lr = cfg.learning_rate
    ema = EmaTracker(cfg.ema_decay)

    gm, gv = group_moments(out.data)
    mm, mv = mixture_moments(out.data)
    mix_mass = recombine(out.data).mass
    centers = out.data.grid.centers
    labels = out.data.partition.labels
    pi = out.data.proportions
    # preconditioners: exact E[x^2] per level for each gradient source
    m2_group = gv[:, None] + gm[:, None] ** 2 + sig[None, :] ** 2
    m2_mix = mv + mm * mm + sig ** 2
    m2_mean = m2_group.mean(axis=0)

    batch_losses = np.full((cfg.steps, k, s), np.nan)
    expected = np.empty((cfg.steps + 1, k, s))
    selected = np.full((cfg.steps, s), -1, dtype=np.int64)
    expected[0] = expected_group_losses(out)

    def batch_stats(x0):
        """per-level minibatch residual statistics for a coefficient table."""
        eps = rng.standard_normal((s, x0.size))
        x = x0[None, :] + sig[:, None] * eps
        return x

    for t in range(cfg.steps):
        if cfg.method == "minmax":
            # stratified draws so every (group, level) loss exists
            losses = np.empty((k, s))
            grads = np.empty((k, s, 2))
            for a in range(k):
                if batch:
                    x0 = centers[draw_cells(out.data.conditionals[a].mass, batch, rng)]
                    x = batch_stats(x0)
                    e = out.coeffs[:, 0, None] * x + out.coeffs[:, 1, None] - x0[None, :]
                    losses[a] = _sq(e).mean(axis=1)
                    grads[a, :, 0] = 2.0 * (e * x).mean(axis=1)
                    grads[a, :, 1] = 2.0 * e.mean(axis=1)
                else:
                    losses[a] = affine_loss(out.coeffs[:, 0], out.coeffs[:, 1],
                                            gm[a], gv[a], sig)
                    ga, gb = _exact_grad(out.coeffs[:, 0], out.coeffs[:, 1],
                                         gm[a], gv[a], sig)
                    grads[a, :, 0], grads[a, :, 1] = ga, gb
            batch_losses[t] = losses
            for a in range(k):
                for j in range(s):
                    ema.update((a, j), float(losses[a, j]))
            for j in range(s):
                sel = ema.argmax([(a, j) for a in range(k)])[0]
                selected[t, j] = sel
                out.coeffs[j, 0] -= lr * w[j] * grads[sel, j, 0] / m2_group[sel, j]
                out.coeffs[j, 1] -= lr * w[j] * grads[sel, j, 1]
        elif cfg.method == "conditional":
            for a in range(k):
                if batch:
                    x0 = centers[draw_cells(out.data.conditionals[a].mass, batch, rng)]
                    x = batch_stats(x0)
                    e = out.coeffs[a, :, 0, None] * x + out.coeffs[a, :, 1, None] - x0[None, :]
                    batch_losses[t, a] = _sq(e).mean(axis=1)
                    ga = 2.0 * (e * x).mean(axis=1)
                    gb = 2.0 * e.mean(axis=1)
                else:
                    batch_losses[t, a] = affine_loss(out.coeffs[a, :, 0], out.coeffs[a, :, 1],
                                                     gm[a], gv[a], sig)
                    ga, gb = _exact_grad(out.coeffs[a, :, 0], out.coeffs[a, :, 1],
                                         gm[a], gv[a], sig)
                out.coeffs[a, :, 0] -= lr * w * ga / m2_group[a]
                out.coeffs[a, :, 1] -= lr * w * gb
        else:  # pooled baseline / reweighted
            if batch:
                cells = draw_cells(mix_mass, batch, rng)
                x0, lab = centers[cells], labels[cells]
                x = batch_stats(x0)
                e = out.coeffs[:, 0, None] * x + out.coeffs[:, 1, None] - x0[None, :]
                sq = _sq(e)
                for a in range(k):
                    sel_mask = lab == a
                    if sel_mask.any():
                        batch_losses[t, a] = sq[:, sel_mask].mean(axis=1)
                if cfg.method == "reweighted":
                    sw = 1.0 / (k * pi[lab])  # per-sample weights toward equal groups
                    ga = 2.0 * (sw[None, :] * e * x).mean(axis=1)
                    gb = 2.0 * (sw[None, :] * e).mean(axis=1)
                    m2 = m2_mean
                else:
                    ga = 2.0 * (e * x).mean(axis=1)
                    gb = 2.0 * e.mean(axis=1)
                    m2 = m2_mix
            else:
                batch_losses[t] = affine_loss(out.coeffs[None, :, 0], out.coeffs[None, :, 1],
                                              gm[:, None], gv[:, None], sig[None, :])
                if cfg.method == "reweighted":
                    per = [_exact_grad(out.coeffs[:, 0], out.coeffs[:, 1], gm[a], gv[a], sig)
                           for a in range(k)]
                    ga = np.mean([g[0] for g in per], axis=0)
                    gb = np.mean([g[1] for g in per], axis=0)
                    m2 = m2_mean
                else:
                    ga, gb = _exact_grad(out.coeffs[:, 0], out.coeffs[:, 1], mm, mv, sig)
                    m2 = m2_mix
            with np.errstate(over="ignore", invalid="ignore"):
                out.coeffs[:, 0] -= lr * w * ga / m2
                out.coeffs[:, 1] -= lr * w * gb
        if not np.all(np.isfinite(out.coeffs)):
            err = NumericalError("denoiser coefficients are non-finite; aborting")
            err.history = DiffusionHistory(batch_losses[:t + 1], expected[:t + 2],
                                           selected[:t + 1])
            raise err
        expected[t + 1] = expected_group_losses(out)
    return out, DiffusionHistory(batch_losses, expected, selected)


def diffusion_minmax_train(toy: DiffusionToy, cfg: TrainConfig) -> tuple:
    """Per-noise-level worst-group training; see diffusion_train."""
    return diffusion_train(toy, replace(cfg, method="minmax"))
