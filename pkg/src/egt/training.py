"""Training strategies on logit-parameterized histogram generators.

The model is a histogram over the grid whose cell masses are the normalized
exponential of unconstrained logits, so every objective -- the plain global
divergence, the per-group reweighted sum, the worst-group value, and the
gap-regularized variant -- is exactly computable together with its analytic
gradient.  A conditional variant normalizes each group's logit block
separately and mixes with externally fixed proportions, which pins the
model's group odds to the target's.

Worst-group selection follows the EMA recipe: group losses feed exponential
moving averages (decay 0.9 by default), and each step descends the gradient
of the group whose average is currently largest, ties to the lowest index.

Exact mode (batch_size = 0) descends the true objectives with an optional
step-halving line search.  Stochastic mode draws per-group minibatches and
descends the negative log-likelihood surrogate; per-step diagnostics still
record the exact divergences, which stay cheap on a grid.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

from .divergence import FGenerator, _divergence_rows
from .errors import NumericalError, ValidationError
from .fairness import max_pairwise_gap
from .grid import (
    AttributePartition,
    GriddedDensity,
    GridSpec,
    GroupedDistribution,
    decompose,
)
from .sampling import draw_cells

METHODS = ("baseline", "conditional", "reweighted", "minmax", "regularized")


def _softmax(x: np.ndarray) -> np.ndarray:
    z = x - x.max()
    e = np.exp(z)
    return e / e.sum()


@dataclass(eq=False)
class HistogramModel:
    """Histogram generator with unconstrained logits.

    Joint mode (partition None): mass = softmax(logits) over all cells.
    Conditional mode: block a's conditional = softmax(logits on group a's
    cells) and the mixture uses the fixed ``proportions``; the induced
    conditional is supported exactly on group a's cells by construction.
    """

    grid: GridSpec
    logits: np.ndarray
    partition: AttributePartition = None
    proportions: np.ndarray = None

    def __post_init__(self):
        theta = np.array(self.logits, dtype=float)
        if theta.shape != (self.grid.n_cells,) or not np.all(np.isfinite(theta)):
            raise ValidationError("logits must be one finite real per grid cell")
        self.logits = theta
        if (self.partition is None) != (self.proportions is None):
            raise ValidationError("conditional mode needs both partition and proportions")
        if self.partition is not None:
            if self.partition.grid != self.grid:
                raise ValidationError("partition lives on a different grid")
            pi = np.asarray(self.proportions, dtype=float)
            if pi.shape != (self.partition.n_groups,) or np.any(pi <= 0) \
                    or abs(float(pi.sum()) - 1.0) > 1e-12:
                raise ValidationError("proportions must be a positive probability vector")
            self.proportions = pi.copy()

    @property
    def conditional(self) -> bool:
        return self.partition is not None

    def block_conditional(self, a: int, partition: AttributePartition = None) -> np.ndarray:
        """Group a's induced conditional, compacted to its own cells."""
        part = self.partition if self.partition is not None else partition
        return _softmax(self.logits[part.group_cells(a)])

    def mass(self) -> np.ndarray:
        if not self.conditional:
            return _softmax(self.logits)
        out = np.zeros(self.grid.n_cells)
        for a in range(self.partition.n_groups):
            cells = self.partition.group_cells(a)
            out[cells] = self.proportions[a] * _softmax(self.logits[cells])
        return out

    def density(self) -> GriddedDensity:
        return GriddedDensity(self.grid, self.mass())

    def grouped(self, partition: AttributePartition = None) -> GroupedDistribution:
        """Mixture view; conditional mode reuses its own pinned proportions."""
        if self.conditional:
            conds = []
            for a in range(self.partition.n_groups):
                cond = np.zeros(self.grid.n_cells)
                cells = self.partition.group_cells(a)
                cond[cells] = _softmax(self.logits[cells])
                conds.append(GriddedDensity(self.grid, cond))
            return GroupedDistribution(self.partition, self.proportions, tuple(conds))
        if partition is None:
            raise ValidationError("joint model needs a partition to be grouped")
        return decompose(self.density(), partition)

    def copy(self) -> "HistogramModel":
        return HistogramModel(self.grid, self.logits, self.partition, self.proportions)

    @classmethod
    def uniform(cls, grid: GridSpec, partition: AttributePartition = None,
                proportions=None) -> "HistogramModel":
        return cls(grid, np.zeros(grid.n_cells), partition, proportions)

    @classmethod
    def from_density(cls, density: GriddedDensity) -> "HistogramModel":
        if np.any(density.mass <= 0):
            raise ValidationError("logit init needs a strictly positive density")
        return cls(density.grid, np.log(density.mass))

    @classmethod
    def conditional_from(cls, p: GroupedDistribution) -> "HistogramModel":
        """Block model initialized at ``p``'s own conditionals and proportions."""
        if p.empty_groups():
            raise ValidationError("target has empty groups")
        theta = np.zeros(p.grid.n_cells)
        for a in range(p.n_groups):
            cells = p.partition.group_cells(a)
            block = p.conditionals[a].mass[cells]
            if np.any(block <= 0):
                raise ValidationError(f"conditional {a} has zero cells; cannot take logits")
            theta[cells] = np.log(block)
        return cls(p.grid, theta, p.partition, p.proportions)


@dataclass
class EmaTracker:
    """Exponential moving averages of keyed losses, initialized at zero."""

    decay: float = 0.9
    values: dict = field(default_factory=dict)

    def __post_init__(self):
        if not 0.0 < self.decay < 1.0:
            raise ValidationError("ema decay must lie strictly inside (0, 1)")

    def update(self, key, loss: float) -> float:
        new = self.decay * self.values.get(key, 0.0) + (1.0 - self.decay) * loss
        self.values[key] = new
        return new

    def value(self, key) -> float:
        return self.values.get(key, 0.0)

    def argmax(self, keys):
        """Key with the largest average; ties go to the earliest key given."""
        best = None
        best_v = -math.inf
        for k in keys:
            v = self.value(k)
            if v > best_v:
                best, best_v = k, v
        return best


@dataclass(frozen=True)
class TrainConfig:
    method: str = "baseline"
    f: FGenerator = None
    learning_rate: float = 0.1
    steps: int = 100
    batch_size: int = 0  # 0 = exact objectives, >0 = minibatch surrogate
    lam: float = 0.0  # gap-regularization strength ("lambda" in config files)
    seed: int = 0
    ema_decay: float = 0.9
    line_search: bool = True
    support_tol: float = 0.0

    def __post_init__(self):
        if self.method not in METHODS:
            raise ValidationError(f"method must be one of {METHODS}")
        if self.learning_rate <= 0:
            raise ValidationError("learning rate must be positive")
        if self.steps < 0 or self.batch_size < 0:
            raise ValidationError("steps and batch size must be nonnegative")
        if self.lam < 0:
            raise ValidationError("regularization strength must be nonnegative")
        if not 0.0 < self.ema_decay < 1.0:
            raise ValidationError("ema decay must lie strictly inside (0, 1)")


def _require_compatible(model: HistogramModel, p: GroupedDistribution, cfg: TrainConfig):
    if cfg.f is None:
        raise ValidationError("config carries no divergence generator")
    if model.grid != p.grid:
        raise ValidationError("model and target live on different grids")
    if p.empty_groups():
        raise ValidationError("target has empty groups")
    if model.conditional and not model.partition.same_structure(p.partition):
        raise ValidationError("model blocks and target use different partitions")
    if cfg.method == "conditional" and not model.conditional:
        raise ValidationError("conditional training needs a per-group block model")


def _compact_targets(p: GroupedDistribution) -> list:
    return [p.conditionals[a].mass[p.partition.group_cells(a)] for a in range(p.n_groups)]


def per_group_divergences(f: FGenerator, model: HistogramModel, p: GroupedDistribution,
                          support_tol: float = 0.0) -> np.ndarray:
    """D_f(P_a || Q_a) for every group, from the model's induced conditionals."""
    out = np.empty(p.n_groups)
    for a, target in enumerate(_compact_targets(p)):
        cond = model.block_conditional(a, p.partition)
        out[a] = _divergence_rows(f, target, cond[None, :], support_tol)[0]
    return out


def _pairwise_gap_sum(d: np.ndarray) -> float:
    """Sum of |d_a - d_a'| over unordered pairs, doubled (ordered-pair count)."""
    total = 0.0
    for a in range(d.shape[0]):
        for b in range(a + 1, d.shape[0]):
            total += abs(d[a] - d[b])
    return 2.0 * total


def exact_objective(model: HistogramModel, p: GroupedDistribution,
                    cfg: TrainConfig) -> tuple:
    """(objective value, per-group divergences) for cfg.method.

    Values may be infinite (reported as such, never NaN): baseline and
    conditional score the plain global divergence, reweighted scores
    sum_a pi_a^P * D_f(P_a||Q_a), minmax the worst group, and regularized
    adds lam times the ordered-pair sum of group gaps to the global value.
    """
    _require_compatible(model, p, cfg)
    f = cfg.f
    per_group = per_group_divergences(f, model, p, cfg.support_tol)
    if cfg.method == "minmax":
        return float(per_group.max()), per_group
    if cfg.method == "reweighted":
        return float(np.dot(p.proportions, per_group)), per_group
    p_mix = p.mixture().mass
    global_div = float(_divergence_rows(f, p_mix, model.mass()[None, :], cfg.support_tol)[0])
    if cfg.method == "regularized":
        if not np.all(np.isfinite(per_group)):
            return math.inf, per_group
        return global_div + cfg.lam * _pairwise_gap_sum(per_group), per_group
    return global_div, per_group


def _gcurve(f: FGenerator, p: np.ndarray, c: np.ndarray) -> np.ndarray:
    """d/dc_i of sum_i c_i f(p_i/c_i):  g_i = f(u_i) - u_i f'(u_i), u = p/c.

    Cells where p vanishes contribute the stored limit f(0); c > 0 always
    holds for softmax-induced masses.
    """
    pos = p > 0
    u = np.where(pos, p / np.where(c > 0, c, 1.0), 1.0)
    with np.errstate(divide="ignore", invalid="ignore", over="ignore"):
        g = np.where(pos, f.eval(u) - u * f.deriv(u), f.f_at_zero)
    return g


def _simplex_chain(c: np.ndarray, g: np.ndarray) -> np.ndarray:
    """Gradient through a softmax:  dD/dtheta = c * (g - <g>_c)."""
    return c * (g - float(np.dot(c, g)))


def _block_gradient(f: FGenerator, model: HistogramModel, p: GroupedDistribution,
                    a: int) -> np.ndarray:
    """Full-length gradient of D_f(P_a || Q_a) w.r.t. the logits."""
    cells = p.partition.group_cells(a)
    target = p.conditionals[a].mass[cells]
    cond = model.block_conditional(a, p.partition)
    out = np.zeros(model.grid.n_cells)
    out[cells] = _simplex_chain(cond, _gcurve(f, target, cond))
    return out


def _global_gradient(f: FGenerator, model: HistogramModel,
                     p: GroupedDistribution) -> np.ndarray:
    """Gradient of the global divergence D_f(P || Q) w.r.t. the logits."""
    p_mix = p.mixture().mass
    if not model.conditional:
        q = _softmax(model.logits)
        return _simplex_chain(q, _gcurve(f, p_mix, q))
    # fixed mixture weights: d/dtheta_a D(P||Q) = pi_a * d/dtheta_a D(P_a||Q_a)
    out = np.zeros(model.grid.n_cells)
    for a in range(p.n_groups):
        out += model.proportions[a] * _block_gradient(f, model, p, a)
    return out


def gradient(model: HistogramModel, p: GroupedDistribution, cfg: TrainConfig,
             selected: int = None) -> np.ndarray:
    """Analytic gradient of cfg.method's objective w.r.t. the logits.

    For minmax, the subgradient of the currently worst group (lowest index
    on ties) unless ``selected`` overrides the choice; for regularized, the
    absolute gaps use sign(0) = 0.
    """
    _require_compatible(model, p, cfg)
    f = cfg.f
    if cfg.method in ("minmax", "reweighted", "regularized") or selected is not None:
        per_group = per_group_divergences(f, model, p, cfg.support_tol)
        if not np.all(np.isfinite(per_group)):
            raise NumericalError("non-finite objective; gradient undefined")

    if cfg.method == "minmax":
        a = int(np.argmax(per_group)) if selected is None else int(selected)
        grad = _block_gradient(f, model, p, a)
    elif cfg.method == "reweighted":
        grad = np.zeros(model.grid.n_cells)
        for a in range(p.n_groups):
            grad += p.proportions[a] * _block_gradient(f, model, p, a)
    else:
        grad = _global_gradient(f, model, p)
        if cfg.method == "regularized" and cfg.lam > 0:
            blocks = [_block_gradient(f, model, p, a) for a in range(p.n_groups)]
            for a in range(p.n_groups):
                for b in range(a + 1, p.n_groups):
                    s = np.sign(per_group[a] - per_group[b])
                    if s != 0.0:
                        grad += 2.0 * cfg.lam * s * (blocks[a] - blocks[b])
    if not np.all(np.isfinite(grad)):
        raise NumericalError("non-finite objective; gradient undefined")
    return grad


@dataclass(frozen=True)
class TrainHistory:
    """Per-step diagnostics: row t is the state after t updates.

    ``selected`` and ``step_sizes`` have one entry per transition; selected
    is -1 whenever the method does no worst-group selection.  A step_size of
    0 marks a line-search rejection (parameters unchanged).
    """

    values: np.ndarray
    per_group: np.ndarray
    delta_egt: np.ndarray
    selected: np.ndarray
    step_sizes: np.ndarray

    @property
    def n_steps(self) -> int:
        return self.selected.shape[0]

    def final_value(self) -> float:
        return float(self.values[-1])


class _HistoryBuilder:
    def __init__(self):
        self.values, self.per_group, self.delta = [], [], []
        self.selected, self.lrs = [], []

    def snapshot(self, value, per_group):
        self.values.append(float(value))
        self.per_group.append(np.asarray(per_group, dtype=float).copy())
        self.delta.append(max_pairwise_gap(per_group))

    def transition(self, sel, lr):
        self.selected.append(-1 if sel is None else int(sel))
        self.lrs.append(float(lr))

    def build(self) -> TrainHistory:
        return TrainHistory(
            np.array(self.values),
            np.array(self.per_group),
            np.array(self.delta),
            np.array(self.selected, dtype=np.int64),
            np.array(self.lrs),
        )


def _abort(msg: str, builder: _HistoryBuilder) -> NumericalError:
    err = NumericalError(msg)
    err.history = builder.build()
    return err


MAX_HALVINGS = 40


def _train_exact(model, p, cfg) -> tuple:
    theta = model.logits.copy()
    mk = lambda t: HistogramModel(model.grid, t, model.partition, model.proportions)
    ema = EmaTracker(cfg.ema_decay)
    hist = _HistoryBuilder()
    group_keys = list(range(p.n_groups))

    value, per_group = exact_objective(mk(theta), p, cfg)
    hist.snapshot(value, per_group)
    for _ in range(cfg.steps):
        if not math.isfinite(value):
            raise _abort("objective is non-finite; aborting", hist)
        for a in group_keys:
            ema.update(a, float(per_group[a]))
        sel = ema.argmax(group_keys) if cfg.method == "minmax" else None
        grad = gradient(mk(theta), p, cfg, selected=sel)

        if not cfg.line_search:
            theta = theta - cfg.learning_rate * grad
            value, per_group = exact_objective(mk(theta), p, cfg)
            hist.transition(sel, cfg.learning_rate)
            hist.snapshot(value, per_group)
            continue

        lr = cfg.learning_rate
        accepted = False
        for _ in range(MAX_HALVINGS):
            cand = theta - lr * grad
            cand_value, cand_pg = exact_objective(mk(cand), p, cfg)
            if cand_value <= value:
                theta, value, per_group = cand, cand_value, cand_pg
                accepted = True
                break
            lr *= 0.5
        hist.transition(sel, lr if accepted else 0.0)
        hist.snapshot(value, per_group)
    return mk(theta), hist.build()


def _nll(c: np.ndarray, freq: np.ndarray) -> float:
    # freq and c live on the same block; c > 0 by construction
    return float(-np.dot(freq, np.log(c)))


def _train_stochastic(model, p, cfg) -> tuple:
    rng = np.random.default_rng(np.random.SeedSequence((cfg.seed, 0x7261)))
    theta = model.logits.copy()
    mk = lambda t: HistogramModel(model.grid, t, model.partition, model.proportions)
    ema = EmaTracker(cfg.ema_decay)
    hist = _HistoryBuilder()
    k = p.n_groups
    cells = [p.partition.group_cells(a) for a in range(k)]
    p_mix = p.mixture().mass

    def diagnostics(m):
        pg = per_group_divergences(cfg.f, m, p, cfg.support_tol)
        return pg

    hist.snapshot(np.nan, diagnostics(mk(theta)))
    for _ in range(cfg.steps):
        m = mk(theta)
        # per-group minibatches and their block frequencies
        freqs, nlls, conds = [], [], []
        for a in range(k):
            drawn = draw_cells(p.conditionals[a].mass, cfg.batch_size, rng)
            block_index = np.searchsorted(cells[a], drawn)
            freq = np.bincount(block_index, minlength=cells[a].size) / cfg.batch_size
            cond = m.block_conditional(a, p.partition)
            freqs.append(freq)
            conds.append(cond)
            nlls.append(_nll(cond, freq))
        for a in range(k):
            ema.update(a, nlls[a])

        sel = None
        grad = np.zeros(theta.shape)
        if cfg.method == "minmax":
            sel = ema.argmax(range(k))
            grad[cells[sel]] = conds[sel] - freqs[sel]
            value = nlls[sel]
        elif cfg.method in ("reweighted", "conditional"):
            for a in range(k):
                grad[cells[a]] = p.proportions[a] * (conds[a] - freqs[a])
            value = float(np.dot(p.proportions, nlls))
        else:  # baseline / regularized share the mixture term
            drawn = draw_cells(p_mix, cfg.batch_size, rng)
            freq_mix = np.bincount(drawn, minlength=theta.size) / cfg.batch_size
            q = _softmax(theta)
            grad = q - freq_mix
            value = float(-np.dot(freq_mix, np.log(q)))
            if cfg.method == "regularized" and cfg.lam > 0:
                for a in range(k):
                    for b in range(a + 1, k):
                        s = np.sign(nlls[a] - nlls[b])
                        if s != 0.0:
                            d = np.zeros(theta.shape)
                            d[cells[a]] = conds[a] - freqs[a]
                            d[cells[b]] -= conds[b] - freqs[b]
                            grad += 2.0 * cfg.lam * s * d
                        value += 2.0 * cfg.lam * abs(nlls[a] - nlls[b])
        if not np.all(np.isfinite(grad)):
            raise _abort("minibatch gradient is non-finite; aborting", hist)
        theta = theta - cfg.learning_rate * grad
        hist.transition(sel, cfg.learning_rate)
        hist.snapshot(value, diagnostics(mk(theta)))
    return mk(theta), hist.build()


def train(model: HistogramModel, p: GroupedDistribution, cfg: TrainConfig) -> tuple:
    """Gradient-descend cfg.method's objective; returns (final model, history).

    Deterministic for a fixed config: exact mode involves no randomness at
    all, stochastic mode derives every draw from cfg.seed.  Non-finite
    objectives abort with the history so far attached to the error.
    """
    _require_compatible(model, p, cfg)
    if cfg.batch_size == 0:
        return _train_exact(model, p, cfg)
    return _train_stochastic(model, p, cfg)


def conditional_train(model: HistogramModel, p: GroupedDistribution,
                      cfg: TrainConfig) -> HistogramModel:
    """Independently fit each block to its group conditional; MGO is exact.

    The returned model's grouped() view carries the pinned proportions, so
    its group odds match the target's bit for bit.
    """
    if not model.conditional:
        raise ValidationError("conditional training needs a per-group block model")
    final, _ = train(model, p, replace(cfg, method="conditional"))
    return final
