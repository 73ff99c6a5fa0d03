"""Experiment orchestration: configs, run records, and comparison tables.

Every scenario consumes one JSON config validated against a published
schema, runs a fixed-seed pipeline, and leaves a run directory containing
a content-addressed record plus CSV/JSON outputs.  Data outputs carry no
timestamps, so re-running the same config reproduces them byte for byte;
the record's creation time lives outside the hashed identity.
"""

from __future__ import annotations

import hashlib
import json
import os
from dataclasses import asdict, dataclass, field
from datetime import datetime, timezone
from pathlib import Path

import jsonschema
import numpy as np

from . import __version__
from .counterexample import CounterexampleSpec, build_counterexample
from .divergence import builtin_generator
from .errors import PropertyViolation, ValidationError
from .fairness import (
    ClosureFamily,
    check_ego,
    check_mgo,
    closure_optimum,
    fairness_report,
    verify_lower_bound,
)
from .grid import (
    AttributePartition,
    GriddedDensity,
    GridSpec,
    GroupedDistribution,
    decompose,
    warmup_target,
)
from .levelset import DEFAULT_LATTICE, SweepGrid, extract_level_set, imbalance_extremes, sweep
from .sampling import empirical_density, sample
from .storage import atomic_write_text, load_distribution, save_distribution
from .training import HistogramModel, TrainConfig, train

SCENARIOS = ("brittleness", "figure1", "method-comparison", "bound-check")
METHOD_ORDER = ("baseline", "conditional", "reweighted", "minmax", "regularized")

DELTA_COLUMNS = ("delta_p", "delta_r", "delta_pr")
PERCENT_PREFIXES = ("delta_p", "delta_r", "delta_pr", "precision_", "recall_")


# ---------------------------------------------------------------------------
# run records

@dataclass(frozen=True)
class RunRecord:
    """Content-addressed record of one pipeline execution.

    ``run_id`` hashes the scenario, family, method, and config snapshot --
    not the timestamp -- so identity is stable under re-serialization and
    re-execution.
    """

    run_id: str
    scenario: str
    family: str
    method: str
    config: dict
    metrics: dict
    files: dict = field(default_factory=dict)
    created: str = ""
    version: str = __version__

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2, sort_keys=True) + "\n"


def _canonical(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"))


def make_run_record(scenario: str, config: dict, metrics: dict,
                    family: str = "", method: str = "", files: dict = None) -> RunRecord:
    ident = _canonical({"scenario": scenario, "family": family,
                        "method": method, "config": config})
    run_id = hashlib.sha256(ident.encode()).hexdigest()[:16]
    return RunRecord(
        run_id=run_id,
        scenario=scenario,
        family=family,
        method=method,
        config=config,
        metrics=metrics,
        files=files or {},
        created=datetime.now(timezone.utc).isoformat(),
    )


def load_run_record(path) -> RunRecord:
    try:
        payload = json.loads(Path(path).read_text())
        return RunRecord(**payload)
    except (OSError, ValueError, TypeError) as exc:
        raise ValidationError(f"cannot read run record {path}: {exc}") from None


# ---------------------------------------------------------------------------
# comparison tables

class ComparisonTable:
    """Rows of (family, method) metrics with best-per-column flags.

    The flag marks the minimum of each delta column within a model family;
    ties flag every minimizer.  CSV output prints precision/recall columns
    in percentage points with one decimal and divergences raw.
    """

    def __init__(self, columns, rows):
        self.columns = tuple(columns)
        self.rows = list(rows)

    def to_json(self) -> str:
        return json.dumps({"columns": list(self.columns), "rows": self.rows},
                          indent=2, sort_keys=True) + "\n"

    def to_csv(self) -> str:
        lines = [",".join(self.columns)]
        for row in self.rows:
            cells = []
            for col in self.columns:
                v = row[col]
                if isinstance(v, bool):
                    cells.append("1" if v else "0")
                elif isinstance(v, float):
                    if col.startswith(PERCENT_PREFIXES):
                        cells.append(f"{100.0 * v:.1f}")
                    else:
                        cells.append(f"{v:.12g}")
                else:
                    cells.append(str(v))
            lines.append(",".join(cells))
        return "\n".join(lines) + "\n"


def render_table(records) -> ComparisonTable:
    """Assemble the delta-metric table from run records.

    Rows are ordered by model family, then by the canonical method order;
    every cell is copied verbatim from the record metrics.
    """
    records = list(records)
    if not records:
        raise ValidationError("no records to tabulate")
    needed = set(DELTA_COLUMNS) | {"global_divergence"}
    group_cols = None
    for rec in records:
        missing = needed - rec.metrics.keys()
        if missing:
            raise ValidationError(
                f"record {rec.run_id} lacks metrics {sorted(missing)}")
        cols = sorted(k for k in rec.metrics
                      if k.startswith(("precision_", "recall_")))
        if group_cols is None:
            group_cols = cols
        elif cols != group_cols:
            raise ValidationError("records report different per-group metrics")

    def order(rec):
        m = rec.method
        rank = METHOD_ORDER.index(m) if m in METHOD_ORDER else len(METHOD_ORDER)
        return (rec.family, rank, m)

    records.sort(key=order)
    columns = (["family", "method"] + list(DELTA_COLUMNS) + group_cols
               + ["global_divergence"] + [f"best_{c}" for c in DELTA_COLUMNS])
    rows = []
    for rec in records:
        row = {"family": rec.family, "method": rec.method}
        for c in list(DELTA_COLUMNS) + group_cols + ["global_divergence"]:
            row[c] = rec.metrics[c]
        rows.append(row)
    for col in DELTA_COLUMNS:
        by_family = {}
        for row in rows:
            by_family.setdefault(row["family"], []).append(row)
        for fam_rows in by_family.values():
            best = min(r[col] for r in fam_rows)
            for r in fam_rows:
                r[f"best_{col}"] = r[col] == best
    return ComparisonTable(columns, rows)


# ---------------------------------------------------------------------------
# config schemas

def _num(minimum=None, exclusive=None, maximum=None):
    out = {"type": "number"}
    if minimum is not None:
        out["minimum"] = minimum
    if exclusive is not None:
        out["exclusiveMinimum"] = exclusive
    if maximum is not None:
        out["maximum"] = maximum
    return out


def _int(minimum):
    return {"type": "integer", "minimum": minimum}


_COMMON = {
    "out": {"type": "string"},
    "seed": _int(0),
    "generator": {"type": "string"},
    "log_base": _num(exclusive=1),
}

CONFIG_SCHEMAS = {
    "brittleness": {
        "type": "object",
        "required": ["epsilon", "gamma"],
        "properties": {
            "epsilon": _num(exclusive=0),
            "gamma": _num(exclusive=0),
            "bar_a": _int(0),
            **_COMMON,
        },
        "additionalProperties": False,
    },
    "figure1": {
        "type": "object",
        "required": ["epsilon"],
        "properties": {
            "epsilon": _num(exclusive=0),
            "n_mu": _int(2),
            "n_sigma": _int(2),
            "level_tol": _num(exclusive=0),
            "dump_field": {"type": "boolean"},
            **_COMMON,
        },
        "additionalProperties": False,
    },
    "method-comparison": {
        "type": "object",
        "required": ["steps"],
        "properties": {
            "steps": _int(0),
            "methods": {
                "type": "array",
                "items": {"enum": list(METHOD_ORDER)},
                "minItems": 1,
            },
            "learning_rate": _num(exclusive=0),
            "lambda": _num(minimum=0),
            "sample_size": _int(1),
            "bias_scale": _num(minimum=0),
            **_COMMON,
        },
        "additionalProperties": False,
    },
    "bound-check": {
        "type": "object",
        "required": ["delta"],
        "properties": {
            "delta": _num(minimum=0),
            "n_families": _int(1),
            "n_candidates": _int(1),
            "n_groups": _int(2),
            "n_cells": _int(4),
            **_COMMON,
        },
        "additionalProperties": False,
    },
}


def validate_config(name: str, config: dict) -> None:
    """Schema-check a scenario config, reporting every violation at once."""
    if name not in CONFIG_SCHEMAS:
        raise ValidationError(f"unknown scenario {name!r}; choose from {SCENARIOS}")
    validator = jsonschema.Draft202012Validator(CONFIG_SCHEMAS[name])
    errors = sorted(validator.iter_errors(config), key=lambda e: e.json_path)
    if errors:
        details = "; ".join(f"{e.json_path}: {e.message}" for e in errors)
        raise ValidationError(f"config for {name!r} is invalid: {details}")


# ---------------------------------------------------------------------------
# shared pieces

def _generator_from(config: dict):
    name = config.get("generator", "js")
    return builtin_generator(name, config.get("log_base"))


def load_grouped(path) -> GroupedDistribution:
    """Load a distribution file that must carry attribute labels."""
    density, partition = load_distribution(path)
    if partition is None:
        raise ValidationError(f"{path} carries no attribute labels")
    return decompose(density, partition)


def _write_json(path: Path, text: str) -> None:
    atomic_write_text(path, text)


def resolve_out_dir(scenario: str, run_id: str, explicit=None, config_out=None) -> Path:
    """Output directory: explicit flag, then config, then $EGT_OUT_DIR, then ./runs."""
    if explicit:
        return Path(explicit)
    if config_out:
        return Path(config_out)
    base = os.environ.get("EGT_OUT_DIR")
    root = Path(base) if base else Path("runs")
    return root / f"{scenario}-{run_id}"


def _csv(header, rows) -> str:
    lines = [",".join(header)]
    for row in rows:
        lines.append(",".join(f"{v:.12g}" if isinstance(v, float) else str(v)
                              for v in row))
    return "\n".join(lines) + "\n"


# ---------------------------------------------------------------------------
# scenarios

def _run_brittleness(config: dict, out_dir: Path):
    f = _generator_from(config)
    target = warmup_target()
    spec = CounterexampleSpec(config["epsilon"], config["gamma"],
                              config.get("bar_a", 0))
    result = build_counterexample(f, target, spec)
    report = result.report
    mgo = check_mgo(target, result.model, 0.0)
    ego = check_ego(result.model, 0.0)
    metrics = {
        "mgo_pass": mgo.passed,
        "ego_pass": ego.passed,
        "delta_egt": report.delta_egt,
        "global_divergence": report.global_divergence,
        **{f"divergence_{n}": d for n, d in
           zip(report.attribute_names, report.divergences)},
    }
    record = make_run_record("brittleness", config, metrics,
                             family="construction", method="counterexample",
                             files={"model": "model.json", "table": "table.csv"})
    save_distribution(out_dir / "model.json", result.model.mixture(),
                      result.model.partition)
    header = ["criterion", "passed", "value"]
    rows = [
        ("mgo", int(mgo.passed), mgo.delta),
        ("ego", int(ego.passed), ego.delta),
        ("delta_egt", "", report.delta_egt),
        ("global_divergence", "", report.global_divergence),
    ]
    _write_json(out_dir / "table.csv", _csv(header, rows))
    return record


def _run_figure1(config: dict, out_dir: Path):
    f = _generator_from(config)
    target = warmup_target()
    lattice = SweepGrid(n_mu=config.get("n_mu", DEFAULT_LATTICE),
                        n_sigma=config.get("n_sigma", DEFAULT_LATTICE))
    field_ = sweep(target, f, lattice)
    eps = config["epsilon"]
    points = extract_level_set(target, f, field_, eps,
                               config.get("level_tol", 1e-4))
    if not points:
        raise ValidationError(f"level set at epsilon={eps} is empty")
    balanced, worst = imbalance_extremes(points)
    metrics = {
        "n_points": len(points),
        "balanced_delta_egt": balanced.delta_egt,
        "worst_delta_egt": worst.delta_egt,
        "worst_cond_min": min(worst.cond_div),
        "worst_cond_max": max(worst.cond_div),
        "worst_mu": worst.mu,
        "worst_sigma": worst.sigma,
    }
    record = make_run_record("figure1", config, metrics, family="gaussian-sweep",
                             method="levelset", files={"points": "levelset.csv"})
    header = ["mu", "sigma", "global_js", "cond_js_0", "cond_js_1", "delta_egt"]
    rows = [(pt.mu, pt.sigma, pt.global_div, pt.cond_div[0], pt.cond_div[1],
             pt.delta_egt) for pt in points]
    _write_json(out_dir / "levelset.csv", _csv(header, rows))
    if config.get("dump_field"):
        mus, sigmas = lattice.mus, lattice.sigmas
        frows = []
        for i, mu in enumerate(mus):
            for j, sg in enumerate(sigmas):
                frows.append((float(mu), float(sg), float(field_.global_div[i, j]),
                              float(field_.cond_div[i, j, 0]),
                              float(field_.cond_div[i, j, 1])))
        _write_json(out_dir / "field.csv",
                    _csv(["mu", "sigma", "global", "cond_0", "cond_1"], frows))
    return record


def _biased_init(target: GroupedDistribution, seed: int, scale: float) -> np.ndarray:
    """Logits at the target, perturbed on group 0's high-mass cells.

    Noise lands only on the cells carrying the top 99.9% of group 0's
    mass.  Corrupting the deep tail instead would park divergence in
    modes gradient descent drains only hyperbolically, turning the
    comparison into a float-noise endurance test rather than a fairness
    one.
    """
    rng = np.random.default_rng(np.random.SeedSequence((seed, 0xB1A5)))
    mix = target.mixture().mass
    group0 = target.partition.labels == 0
    masses = np.where(group0, mix, 0.0)
    order = np.argsort(masses)[::-1]
    cum = np.cumsum(masses[order])
    heavy = np.zeros_like(group0)
    heavy[order[: int(np.searchsorted(cum, 0.999 * cum[-1])) + 1]] = True
    noise = rng.normal(0.0, scale, mix.shape) * (group0 & heavy)
    return np.log(mix) + noise


def _run_method_comparison(config: dict, out_dir: Path):
    f = _generator_from(config)
    target = warmup_target()
    seed = config.get("seed", 0)
    methods = config.get("methods",
                         ["baseline", "conditional", "reweighted", "minmax"])
    theta0 = _biased_init(target, seed, config.get("bias_scale", 2.0))
    n_samples = config.get("sample_size", 20000)
    records = []
    for method in methods:
        cfg = TrainConfig(
            method=method,
            f=f,
            learning_rate=config.get("learning_rate", 50.0),
            steps=config["steps"],
            lam=config.get("lambda", 1.0),
            seed=seed,
        )
        if method == "conditional":
            model = HistogramModel(target.grid, theta0, target.partition,
                                   target.proportions)
        else:
            model = HistogramModel(target.grid, theta0)
        final, history = train(model, target, cfg)
        final_grouped = final.grouped(target.partition)
        exact = fairness_report(f, target, final_grouped)
        batch = sample(final.density(), n_samples, seed, target.partition)
        sampled = fairness_report(
            f, target, decompose(empirical_density(batch, target.grid),
                                 target.partition))
        metrics = {
            "delta_egt": exact.delta_egt,
            "delta_mgo": exact.delta_mgo,
            "delta_ego": exact.delta_ego,
            "global_divergence": exact.global_divergence,
            "delta_p": sampled.delta_p,
            "delta_r": sampled.delta_r,
            "delta_pr": sampled.delta_pr,
            **{f"precision_{n}": v for n, v in
               zip(sampled.attribute_names, sampled.precisions)},
            **{f"recall_{n}": v for n, v in
               zip(sampled.attribute_names, sampled.recalls)},
            "final_value": history.final_value(),
        }
        rec = make_run_record("method-comparison", config, metrics,
                              family="histogram", method=method,
                              files={"record": f"record-{method}.json"})
        _write_json(out_dir / f"record-{method}.json", rec.to_json())
        records.append(rec)
    table = render_table(records)
    _write_json(out_dir / "table.csv", table.to_csv())
    _write_json(out_dir / "table.json", table.to_json())
    summary = make_run_record(
        "method-comparison", config,
        {"methods": list(methods), "n_runs": len(records)},
        family="histogram", method="",
        files={"table": "table.csv", **{f"record_{m}": f"record-{m}.json"
                                        for m in methods}})
    return summary


def _random_family(rng, n_cells: int, k: int, n_candidates: int):
    """Random MGO family plus target, sharing one partition and proportions."""
    grid = GridSpec(0.0, 1.0, n_cells)
    labels = np.zeros(n_cells, dtype=np.int64)
    cuts = np.sort(rng.choice(np.arange(1, n_cells), size=k - 1, replace=False))
    bounds = [0, *cuts.tolist(), n_cells]
    for a in range(k):
        labels[bounds[a]:bounds[a + 1]] = a
    partition = AttributePartition(grid, labels)
    pi = rng.dirichlet(np.ones(k))

    def random_member():
        conds = []
        for a in range(k):
            mask = partition.group_mask(a)
            w = rng.random(int(mask.sum())) + 0.05
            cond = np.zeros(n_cells)
            cond[mask] = w / w.sum()
            conds.append(GriddedDensity(grid, cond))
        return GroupedDistribution(partition, pi, tuple(conds))

    target = random_member()
    return target, [random_member() for _ in range(n_candidates)]


def _run_bound_check(config: dict, out_dir: Path):
    f = _generator_from(config)
    delta = config["delta"]
    n_families = config.get("n_families", 25)
    n_candidates = config.get("n_candidates", 8)
    k = config.get("n_groups", 2)
    n_cells = config.get("n_cells", 16)
    rng = np.random.default_rng(np.random.SeedSequence((config.get("seed", 0), 0xB0)))
    rows = []
    violations = 0
    for idx in range(n_families):
        target, members = _random_family(rng, n_cells, k, n_candidates)
        family = ClosureFamily(members)
        optimum = closure_optimum(f, target, family, verify="always")
        bound = verify_lower_bound(f, target, family, delta)
        violations += len(bound.violations)
        rows.append((idx, float(optimum.value), float(bound.bound_base),
                     len(members), len(bound.violations)))
    metrics = {"n_families": n_families, "delta": delta, "violations": violations}
    record = make_run_record("bound-check", config, metrics,
                             family="random", method="bound",
                             files={"families": "families.csv"})
    _write_json(out_dir / "families.csv",
                _csv(["family", "closure_optimum", "bound_base",
                      "n_members", "n_violations"], rows))
    return record, violations


_RUNNERS = {
    "brittleness": _run_brittleness,
    "figure1": _run_figure1,
    "method-comparison": _run_method_comparison,
    "bound-check": _run_bound_check,
}


def run_scenario(name: str, config, out_dir=None) -> Path:
    """Validate the config, execute the named scenario, return its run dir.

    ``config`` is a dict or a path to a JSON file.  A bound-check scenario
    with violated bounds writes its outputs and then raises
    PropertyViolation (CLI exit code 3) carrying the run directory.
    """
    name = name.strip().lower()
    if isinstance(config, (str, Path)):
        try:
            config = json.loads(Path(config).read_text())
        except (OSError, ValueError) as exc:
            raise ValidationError(f"cannot read config: {exc}") from None
    if not isinstance(config, dict):
        raise ValidationError("config must be a JSON object")
    validate_config(name, config)

    probe = make_run_record(name, config, {})
    dest = resolve_out_dir(name, probe.run_id, explicit=out_dir,
                           config_out=config.get("out"))
    dest.mkdir(parents=True, exist_ok=True)

    runner = _RUNNERS[name]
    if name == "bound-check":
        record, violations = runner(config, dest)
    else:
        record = runner(config, dest)
        violations = 0
    _write_json(dest / "record.json", record.to_json())
    if violations:
        err = PropertyViolation(
            f"{violations} lower-bound violations; outputs in {dest}")
        err.run_dir = dest
        raise err
    return dest
