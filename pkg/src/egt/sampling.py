"""Sampling from gridded models and proportion repair by rejection.

Rejection here is label-only thinning: each group keeps its samples with a
fixed acceptance probability chosen so the accepted stream hits the target
proportions in expectation, the majority group capped at acceptance 1.
Within-group conditionals are untouched, which is exactly why this repairs
the odds criteria but cannot repair unequal treatment.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ValidationError
from .grid import AttributePartition, GriddedDensity, GridSpec

# chunked draws: per-chunk generators seeded by (seed, chunk) keep the output
# independent of how many chunks a caller splits n into
SAMPLE_CHUNK = 1 << 16

REJECTION_MODES = ("mgo", "ego")


@dataclass(frozen=True, eq=False)
class SampleBatch:
    """Sampled cell centers with (optional) oracle attribute labels."""

    values: np.ndarray
    labels: np.ndarray = None

    def __post_init__(self):
        vals = np.asarray(self.values, dtype=float)
        if vals.ndim != 1:
            raise ValidationError("sample values must be a flat vector")
        object.__setattr__(self, "values", vals)
        if self.labels is not None:
            lab = np.asarray(self.labels)
            if lab.shape != vals.shape or not np.issubdtype(lab.dtype, np.integer):
                raise ValidationError("labels must be one integer per sample")
            object.__setattr__(self, "labels", lab.astype(np.int64))

    def __len__(self) -> int:
        return self.values.shape[0]

    def subset(self, mask: np.ndarray) -> "SampleBatch":
        lab = None if self.labels is None else self.labels[mask]
        return SampleBatch(self.values[mask], lab)

    def group_proportions(self, n_groups: int) -> np.ndarray:
        if self.labels is None:
            raise ValidationError("batch carries no labels")
        if len(self) == 0:
            raise ValidationError("empty batch has no proportions")
        return np.bincount(self.labels, minlength=n_groups) / len(self)


def draw_cells(mass: np.ndarray, n: int, rng: np.random.Generator) -> np.ndarray:
    """Inverse-CDF draw of ``n`` cell indices from a mass vector."""
    cdf = np.cumsum(mass)
    cdf[-1] = 1.0  # guard the last bin against cumsum round-off
    return np.searchsorted(cdf, rng.random(n), side="right")


def sample(q: GriddedDensity, n: int, seed: int,
           partition: AttributePartition = None) -> SampleBatch:
    """Draw n i.i.d. cell centers from ``q``; labels attached if a partition is given."""
    if n < 0:
        raise ValidationError("sample size must be nonnegative")
    if partition is not None and partition.grid != q.grid:
        raise ValidationError("partition grid does not match the sampled density")
    centers = q.grid.centers
    cells = np.empty(n, dtype=np.int64)
    for chunk, start in enumerate(range(0, n, SAMPLE_CHUNK)):
        m = min(SAMPLE_CHUNK, n - start)
        rng = np.random.default_rng(np.random.SeedSequence((seed, chunk)))
        cells[start:start + m] = draw_cells(q.mass, m, rng)
    labels = None if partition is None else partition.labels[cells]
    return SampleBatch(centers[cells], labels)


@dataclass(frozen=True, eq=False)
class RejectionPlan:
    """Per-group acceptance probabilities hitting target proportions."""

    target_proportions: np.ndarray
    acceptance: np.ndarray
    expected_rate: float

    def __post_init__(self):
        acc = np.asarray(self.acceptance, dtype=float)
        tgt = np.asarray(self.target_proportions, dtype=float)
        if acc.shape != tgt.shape or acc.ndim != 1:
            raise ValidationError("acceptance and target vectors must align")
        if np.any(acc < 0) or np.any(acc > 1) or not np.any(acc == 1.0):
            raise ValidationError("acceptance must lie in [0,1] with a binding group at 1")
        object.__setattr__(self, "acceptance", acc)
        object.__setattr__(self, "target_proportions", tgt)


def make_rejection_plan(source_proportions, mode: str = "mgo",
                        target_proportions=None) -> RejectionPlan:
    """Acceptance probabilities turning source proportions into target ones.

    mode "mgo" repairs toward explicitly supplied target proportions (the
    data's); mode "ego" toward the uniform vector.  The group with the
    largest target/source ratio is kept wholesale, everything else thinned,
    which maximizes the overall acceptance rate 1/max_ratio.
    """
    src = np.asarray(source_proportions, dtype=float)
    if src.ndim != 1 or src.size < 2 or np.any(src <= 0) or abs(src.sum() - 1.0) > 1e-9:
        raise ValidationError("source proportions must be a positive probability vector")
    mode = mode.lower()
    if mode not in REJECTION_MODES:
        raise ValidationError(f"rejection mode must be one of {REJECTION_MODES}")
    if mode == "ego":
        tgt = np.full(src.size, 1.0 / src.size)
    else:
        if target_proportions is None:
            raise ValidationError("mgo mode needs the target proportions")
        tgt = np.asarray(target_proportions, dtype=float)
        if tgt.shape != src.shape or np.any(tgt < 0) or abs(tgt.sum() - 1.0) > 1e-9:
            raise ValidationError("target proportions must match the source's shape")
        if np.any((src == 0) & (tgt > 0)):
            raise ValidationError("target puts mass on a group the source never emits")
    ratio = tgt / src
    top = float(ratio.max())
    return RejectionPlan(tgt, ratio / top, 1.0 / top)


def rejection_mask(batch: SampleBatch, plan: RejectionPlan, seed: int,
                   exact_counts: bool = False) -> np.ndarray:
    """Boolean keep-mask over the batch under the plan.

    Default is probabilistic thinning (unbiased, stationary proportions
    equal the target).  ``exact_counts`` instead trims each group to the
    largest subsample with exactly-rounded target counts, for table
    reproduction; the subsample is chosen uniformly at random per seed.
    """
    if batch.labels is None:
        raise ValidationError("rejection needs labeled samples")
    k = plan.acceptance.shape[0]
    if len(batch) and batch.labels.max() >= k:
        raise ValidationError("batch labels exceed the plan's group count")
    rng = np.random.default_rng(np.random.SeedSequence((seed, 0x52)))
    if not exact_counts:
        return rng.random(len(batch)) < plan.acceptance[batch.labels]

    counts = np.bincount(batch.labels, minlength=k)
    with np.errstate(divide="ignore"):
        per_target = np.where(plan.target_proportions > 0,
                              counts / np.where(plan.target_proportions > 0,
                                                plan.target_proportions, 1.0),
                              np.inf)
    total = int(per_target.min())
    keep = np.floor(total * plan.target_proportions).astype(int)
    # distribute the rounding remainder by largest fractional part
    short = total - keep.sum()
    if short > 0:
        frac = total * plan.target_proportions - keep
        keep[np.argsort(-frac)[:short]] += 1
    mask = np.zeros(len(batch), dtype=bool)
    for a in range(k):
        members = np.flatnonzero(batch.labels == a)
        chosen = rng.permutation(members.size)[:keep[a]]
        mask[members[chosen]] = True
    return mask


def rejection_filter(batch: SampleBatch, plan: RejectionPlan, seed: int,
                     exact_counts: bool = False) -> SampleBatch:
    """Accepted sub-batch under the plan; see rejection_mask."""
    return batch.subset(rejection_mask(batch, plan, seed, exact_counts))


def empirical_density(batch: SampleBatch, grid: GridSpec) -> GriddedDensity:
    """Normalized cell counts of a batch as a distribution on the grid."""
    if len(batch) == 0:
        raise ValidationError("cannot build a density from an empty batch")
    counts = np.bincount(grid.cell_index(batch.values), minlength=grid.n_cells)
    return GriddedDensity(grid, counts / len(batch))
