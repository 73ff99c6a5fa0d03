import math

import numpy as np
import pytest

from egt.counterexample import build_q_alpha_beta, invert_phi
from egt.divergence import builtin_generator, f_divergence
from egt.errors import NumericalError, ValidationError
from egt.grid import (
    AttributePartition,
    GriddedDensity,
    GridSpec,
    GroupedDistribution,
    decompose,
    recombine,
)
from egt.training import (
    EmaTracker,
    HistogramModel,
    METHODS,
    TrainConfig,
    conditional_train,
    exact_objective,
    gradient,
    per_group_divergences,
    train,
)


def two_group_target(n_per=8, proportions=(0.5, 0.5)):
    n = 2 * n_per
    g = GridSpec(0.0, 1.0, n)
    part = AttributePartition(g, np.repeat([0, 1], n_per))
    gd = decompose(GriddedDensity(g, np.full(n, 1.0 / n)), part)
    return GroupedDistribution(part, np.asarray(proportions, float), gd.conditionals)


def model_with_group_divergences(js2, p, targets):
    """A joint model whose decomposed per-group divergences hit ``targets``."""
    conds = []
    for cond, tgt in zip(p.conditionals, targets):
        if tgt == 0.0:
            conds.append(cond.mass)
            continue
        pt = invert_phi(js2, tgt)
        conds.append(build_q_alpha_beta(js2, cond, pt.alpha, pt.beta).mass)
    mix = sum(pi * c for pi, c in zip(p.proportions, conds))
    return HistogramModel(p.partition.grid, np.log(mix))


def random_instance(seed, n_cells=32, conditional=False):
    gen = np.random.default_rng(seed)
    g = GridSpec(0.0, 1.0, n_cells)
    part = AttributePartition(g, np.repeat([0, 1], n_cells // 2))
    pm = gen.random(n_cells) + 0.05
    p = decompose(GriddedDensity(g, pm / pm.sum()), part)
    logits = gen.normal(0.0, 0.7, n_cells)
    if conditional:
        model = HistogramModel(g, logits, part, p.proportions.copy())
    else:
        model = HistogramModel(g, logits)
    return model, p


def fd_gradient(model, p, cfg, h=1e-6):
    base = model.logits
    out = np.zeros_like(base)
    for i in range(len(base)):
        plus, minus = base.copy(), base.copy()
        plus[i] += h
        minus[i] -= h
        up = HistogramModel(model.grid, plus, model.partition, model.proportions)
        dn = HistogramModel(model.grid, minus, model.partition, model.proportions)
        out[i] = (exact_objective(up, p, cfg)[0] - exact_objective(dn, p, cfg)[0]) / (2 * h)
    return out


# --- config ------------------------------------------------------------------


def test_train_config_validation(js2):
    with pytest.raises(ValidationError):
        TrainConfig(method="sgd")
    with pytest.raises(ValidationError):
        TrainConfig(learning_rate=0.0)
    with pytest.raises(ValidationError):
        TrainConfig(steps=-1)
    with pytest.raises(ValidationError):
        TrainConfig(batch_size=-2)
    with pytest.raises(ValidationError):
        TrainConfig(lam=-0.1)
    with pytest.raises(ValidationError):
        TrainConfig(ema_decay=1.0)
    assert set(METHODS) == {"baseline", "conditional", "reweighted", "minmax", "regularized"}


def test_objectives_require_a_generator():
    p = two_group_target()
    m = HistogramModel.uniform(p.partition.grid)
    with pytest.raises(ValidationError):
        exact_objective(m, p, TrainConfig(method="baseline"))


# --- model -------------------------------------------------------------------


def test_uniform_model_mass():
    m = HistogramModel.uniform(GridSpec(0.0, 1.0, 10))
    assert np.allclose(m.mass(), 0.1, atol=1e-15)
    assert not m.conditional


def test_from_density_round_trip():
    gen = np.random.default_rng(4)
    w = gen.random(12) + 0.01
    d = GriddedDensity(GridSpec(0.0, 1.0, 12), w / w.sum())
    m = HistogramModel.from_density(d)
    assert np.max(np.abs(m.mass() - d.mass)) <= 1e-12
    zero = GriddedDensity(GridSpec(0.0, 1.0, 4), np.array([0.5, 0.5, 0.0, 0.0]))
    with pytest.raises(ValidationError):
        HistogramModel.from_density(zero)


def test_conditional_from_pins_proportions(js2):
    p = two_group_target(proportions=(0.75, 0.25))
    m = HistogramModel.conditional_from(p)
    assert m.conditional
    assert np.array_equal(m.proportions, p.proportions)
    assert np.max(per_group_divergences(js2, m, p)) <= 1e-14


def test_conditional_model_requires_positive_proportions():
    p = two_group_target()
    with pytest.raises(ValidationError):
        HistogramModel(
            p.partition.grid, np.zeros(16), p.partition, np.array([1.0, 0.0])
        )


def test_per_group_divergences_match_loop(js2):
    model, p = random_instance(8)
    per = per_group_divergences(js2, model, p)
    grouped = model.grouped(p.partition)
    for a in (0, 1):
        direct = f_divergence(js2, p.conditionals[a], grouped.conditionals[a])
        assert per[a] == pytest.approx(direct, abs=1e-12)


# --- objective values ----------------------------------------------------------


def test_objective_values_on_calibrated_instance(js2):
    p = two_group_target()
    model = model_with_group_divergences(js2, p, (0.4, 0.1))

    def value(method, lam=0.0):
        cfg = TrainConfig(f=js2, method=method, lam=lam)
        return exact_objective(model, p, cfg)

    v, per = value("baseline")
    assert per == pytest.approx([0.4, 0.1], abs=1e-8)
    assert v == pytest.approx(0.25, abs=1e-8)  # equal-odds mixture averages
    assert value("minmax")[0] == pytest.approx(0.4, abs=1e-8)
    assert value("reweighted")[0] == pytest.approx(0.25, abs=1e-8)
    assert value("regularized", lam=1.0)[0] == pytest.approx(0.85, abs=1e-8)
    assert value("regularized", lam=0.0)[0] == pytest.approx(0.25, abs=1e-8)


def test_objectives_vanish_at_target(js2):
    p = two_group_target()
    model = HistogramModel.from_density(recombine(p))
    for method in ("baseline", "reweighted", "minmax", "regularized"):
        cfg = TrainConfig(f=js2, method=method, lam=1.0)
        assert exact_objective(model, p, cfg)[0] <= 1e-12
        assert np.max(np.abs(gradient(model, p, cfg))) <= 1e-8


def test_reweighted_ignores_model_proportions(js2):
    """Reweighted scores conditionals only; baseline also prices proportions."""
    p = two_group_target()
    skew = np.log(np.concatenate([np.full(8, 2.0), np.full(8, 1.0)]) / 24.0)
    skewed = HistogramModel(p.partition.grid, skew)
    balanced = HistogramModel(p.partition.grid, np.full(16, np.log(1 / 16)))
    rw = TrainConfig(f=js2, method="reweighted")
    bl = TrainConfig(f=js2, method="baseline")
    assert exact_objective(skewed, p, rw)[0] == pytest.approx(
        exact_objective(balanced, p, rw)[0], abs=1e-12
    )
    assert exact_objective(skewed, p, bl)[0] > exact_objective(balanced, p, bl)[0] + 1e-3


def test_regularized_with_infinite_group_divergence():
    kl = builtin_generator("kl")
    g = GridSpec(0.0, 1.0, 4)
    part = AttributePartition(g, np.array([0, 0, 1, 1]))
    p = decompose(GriddedDensity(g, np.array([0.5, 0.0, 0.25, 0.25])), part)
    model = HistogramModel.uniform(g)
    # reverse direction: p misses model support nowhere, but the model has
    # mass where the group-0 conditional vanishes, infinite under reverse-kl
    rkl = builtin_generator("reverse-kl")
    cfg = TrainConfig(f=rkl, method="regularized", lam=1.0)
    value, per = exact_objective(model, p, cfg)
    assert math.isinf(per[0]) and math.isfinite(per[1])
    assert math.isinf(value)


# --- gradients ------------------------------------------------------------------


@pytest.mark.parametrize("method", ["baseline", "reweighted", "minmax", "regularized"])
@pytest.mark.parametrize("name", ["js", "kl", "chi2"])
def test_gradient_matches_finite_differences(method, name):
    f = builtin_generator(name)
    for seed in range(3):
        model, p = random_instance(seed * 7 + 1)
        cfg = TrainConfig(f=f, method=method, lam=0.7)
        per = per_group_divergences(f, model, p)
        selected = int(np.argmax(per)) if method == "minmax" else None
        exact = gradient(model, p, cfg, selected=selected)
        approx = fd_gradient(model, p, cfg)
        scale = max(1.0, np.max(np.abs(exact)))
        assert np.max(np.abs(exact - approx)) / scale <= 1e-5


def test_conditional_gradient_matches_finite_differences(js2):
    for seed in (3, 11):
        model, p = random_instance(seed, conditional=True)
        cfg = TrainConfig(f=js2, method="conditional")
        exact = gradient(model, p, cfg)
        approx = fd_gradient(model, p, cfg)
        scale = max(1.0, np.max(np.abs(exact)))
        assert np.max(np.abs(exact - approx)) / scale <= 1e-5


def test_minmax_tie_selects_lowest_group(js2):
    p = two_group_target()
    model = model_with_group_divergences(js2, p, (0.3, 0.3))
    cfg = TrainConfig(f=js2, method="minmax", steps=1, learning_rate=0.1)
    _, hist = train(model, p, cfg)
    assert hist.selected[0] == 0


# --- EMA -----------------------------------------------------------------------


def test_ema_closed_form():
    t = EmaTracker(0.9)
    for step in range(1, 101):
        t.update(0, 2.5)
        assert t.value(0) == pytest.approx(2.5 * (1 - 0.9**step), abs=1e-12)


def test_ema_argmax_breaks_ties_low():
    t = EmaTracker(0.5)
    t.update(0, 1.0)
    t.update(1, 1.0)
    assert t.argmax([0, 1]) == 0
    t.update(1, 10.0)
    assert t.argmax([0, 1]) == 1


def test_ema_starts_at_zero():
    t = EmaTracker(0.9)
    assert t.value(5) == 0.0


# --- training loops --------------------------------------------------------------


def test_zero_steps_is_identity(js2):
    model, p = random_instance(2)
    cfg = TrainConfig(f=js2, method="baseline", steps=0)
    final, hist = train(model, p, cfg)
    assert np.array_equal(final.logits, model.logits)
    assert hist.n_steps == 0
    assert len(hist.values) == 1
    assert hist.final_value() == pytest.approx(exact_objective(model, p, cfg)[0])


def test_exact_training_is_deterministic(js2):
    runs = []
    for _ in range(2):
        model, p = random_instance(5)
        cfg = TrainConfig(f=js2, method="minmax", steps=40, learning_rate=1.0)
        final, hist = train(model, p, cfg)
        runs.append((final.logits, np.asarray(hist.values)))
    assert np.array_equal(runs[0][0], runs[1][0])
    assert np.array_equal(runs[0][1], runs[1][1])


def test_line_search_makes_objective_monotone(js2):
    model, p = random_instance(6)
    cfg = TrainConfig(f=js2, method="minmax", steps=60, learning_rate=2.0)
    _, hist = train(model, p, cfg)
    diffs = np.diff(hist.values)
    assert np.all(diffs <= 1e-15)
    # rejected steps are recorded as zero step size
    assert all(s == 0.0 or s > 0.0 for s in hist.step_sizes)


def test_history_layout(js2):
    model, p = random_instance(9)
    cfg = TrainConfig(f=js2, method="baseline", steps=5, learning_rate=0.5)
    _, hist = train(model, p, cfg)
    assert len(hist.values) == 6
    assert len(hist.step_sizes) == 5
    assert list(hist.selected) == [-1] * 5
    assert np.asarray(hist.per_group).shape == (6, 2)
    assert np.asarray(hist.delta_egt).shape == (6,)
    assert hist.delta_egt[0] == pytest.approx(
        abs(hist.per_group[0][0] - hist.per_group[0][1]), abs=1e-12
    )


def test_minmax_training_closes_the_gap(js2):
    p = two_group_target()
    init = model_with_group_divergences(js2, p, (0.4, 0.1))
    cfg = TrainConfig(f=js2, method="minmax", steps=400, learning_rate=2.0)
    final, hist = train(init, p, cfg)
    assert hist.delta_egt[-1] <= 1e-3
    assert max(per_group_divergences(js2, final, p)) < 0.01
    baseline_cfg = TrainConfig(f=js2, method="baseline", steps=400, learning_rate=2.0)
    _, bhist = train(model_with_group_divergences(js2, p, (0.4, 0.1)), p, baseline_cfg)
    # the pooled objective also converges here, but never faster on the gap
    assert hist.delta_egt[-1] <= bhist.delta_egt[-1] + 1e-9


def test_stochastic_mode_runs_and_is_seeded(js2):
    model, p = random_instance(12)
    cfg = TrainConfig(f=js2, method="baseline", steps=25, learning_rate=0.2,
                      batch_size=64, seed=7)
    final_a, hist_a = train(model, p, cfg)
    model_b, _ = random_instance(12)
    final_b, hist_b = train(model_b, p, cfg)
    assert np.array_equal(final_a.logits, final_b.logits)
    assert np.isnan(hist_a.values[0])
    assert np.all(np.isfinite(hist_a.values[1:]))
    # per-step diagnostics always carry exact divergences
    assert np.all(np.isfinite(hist_a.per_group))
    other = TrainConfig(f=js2, method="baseline", steps=25, learning_rate=0.2,
                        batch_size=64, seed=8)
    final_c, _ = train(random_instance(12)[0], p, other)
    assert not np.array_equal(final_a.logits, final_c.logits)


def test_stochastic_minmax_tracks_selection(js2):
    model, p = random_instance(13)
    cfg = TrainConfig(f=js2, method="minmax", steps=15, learning_rate=0.2,
                      batch_size=64, seed=3)
    _, hist = train(model, p, cfg)
    assert set(hist.selected) <= {0, 1}


def test_non_finite_objective_aborts_with_history():
    rkl = builtin_generator("reverse-kl")
    g = GridSpec(0.0, 1.0, 8)
    part = AttributePartition(g, np.repeat([0, 1], 4))
    mass = np.array([0.25, 0.25, 0.0, 0.0, 0.125, 0.125, 0.125, 0.125])
    p = decompose(GriddedDensity(g, mass), part)
    model = HistogramModel.uniform(g)
    cfg = TrainConfig(f=rkl, method="baseline", steps=5, learning_rate=0.5)
    with pytest.raises(NumericalError) as exc_info:
        train(model, p, cfg)
    assert hasattr(exc_info.value, "history")


# --- conditional training ---------------------------------------------------------


def test_conditional_train_holds_proportions_fixed(js2):
    p = two_group_target(proportions=(0.75, 0.25))
    init = HistogramModel(
        p.partition.grid,
        np.random.default_rng(3).normal(0.0, 0.5, 16),
        p.partition,
        p.proportions.copy(),
    )
    cfg = TrainConfig(f=js2, method="conditional", steps=150, learning_rate=2.0)
    final = conditional_train(init, p, cfg)
    assert np.array_equal(final.proportions, p.proportions)
    grouped = final.grouped()
    from egt.fairness import check_mgo

    assert check_mgo(p, grouped, 0.0).delta == 0.0
    per = per_group_divergences(js2, final, p)
    assert np.max(per) <= 1e-4
    # global divergence decomposes across the pinned proportions
    mixture = recombine(grouped)
    target_mix = recombine(p)
    total = f_divergence(js2, target_mix, mixture)
    assert total == pytest.approx(float(np.dot(p.proportions, per)), abs=1e-10)


def test_conditional_train_noop_at_target(js2):
    p = two_group_target()
    init = HistogramModel.conditional_from(p)
    cfg = TrainConfig(f=js2, method="conditional", steps=10, learning_rate=1.0)
    final = conditional_train(init, p, cfg)
    assert np.array_equal(final.logits, init.logits)


def test_conditional_objective_requires_conditional_model(js2):
    model, p = random_instance(4)  # joint model
    cfg = TrainConfig(f=js2, method="conditional")
    with pytest.raises(ValidationError):
        exact_objective(model, p, cfg)
