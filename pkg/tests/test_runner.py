"""Run records, config validation, comparison tables, and scenario wiring."""

import dataclasses
import json
import types

import pytest

import egt.runner as runner_mod
from egt.errors import PropertyViolation, ValidationError
from egt.runner import (
    METHOD_ORDER,
    load_run_record,
    make_run_record,
    render_table,
    resolve_out_dir,
    run_scenario,
    validate_config,
)


# ---------------------------------------------------------------------------
# run records

def test_run_id_ignores_metrics_and_time():
    a = make_run_record("brittleness", {"epsilon": 1.0}, {"x": 1.0})
    b = make_run_record("brittleness", {"epsilon": 1.0}, {"x": 2.0, "y": 3.0})
    assert a.run_id == b.run_id
    assert len(a.run_id) == 16
    assert set(a.run_id) <= set("0123456789abcdef")
    assert a.created != ""  # wall-clock stamp exists but is outside the hash


def test_run_id_tracks_identity_fields():
    base = make_run_record("brittleness", {"epsilon": 1.0}, {}, family="f",
                           method="m")
    for variant in (
        make_run_record("brittleness", {"epsilon": 2.0}, {}, family="f", method="m"),
        make_run_record("figure1", {"epsilon": 1.0}, {}, family="f", method="m"),
        make_run_record("brittleness", {"epsilon": 1.0}, {}, family="g", method="m"),
        make_run_record("brittleness", {"epsilon": 1.0}, {}, family="f", method="n"),
    ):
        assert variant.run_id != base.run_id


def test_run_id_stable_under_key_order():
    a = make_run_record("bound-check", {"delta": 0.1, "seed": 3}, {})
    b = make_run_record("bound-check", {"seed": 3, "delta": 0.1}, {})
    assert a.run_id == b.run_id


def test_record_round_trip(tmp_path):
    rec = make_run_record("figure1", {"epsilon": 0.5}, {"n_points": 7},
                          family="gaussian-sweep", method="levelset",
                          files={"points": "levelset.csv"})
    path = tmp_path / "record.json"
    path.write_text(rec.to_json())
    assert load_run_record(path) == rec


def test_load_record_rejects_broken_files(tmp_path):
    with pytest.raises(ValidationError, match="cannot read run record"):
        load_run_record(tmp_path / "missing.json")
    junk = tmp_path / "junk.json"
    junk.write_text("{not json")
    with pytest.raises(ValidationError, match="cannot read run record"):
        load_run_record(junk)
    stray = tmp_path / "stray.json"
    stray.write_text('{"run_id": "x", "bogus": 1}')
    with pytest.raises(ValidationError, match="cannot read run record"):
        load_run_record(stray)


# ---------------------------------------------------------------------------
# config validation

def test_validate_config_reports_every_violation_at_once():
    with pytest.raises(ValidationError) as exc:
        validate_config("brittleness", {})
    message = str(exc.value)
    assert "'epsilon' is a required property" in message
    assert "'gamma' is a required property" in message


def test_validate_config_names_json_paths():
    with pytest.raises(ValidationError, match=r"\$\.epsilon"):
        validate_config("brittleness", {"epsilon": "x", "gamma": 0.5})


def test_validate_config_rejects_stray_keys():
    with pytest.raises(ValidationError, match="bogus"):
        validate_config("brittleness", {"epsilon": 1.0, "gamma": 0.5, "bogus": 1})


def test_validate_config_unknown_scenario():
    with pytest.raises(ValidationError, match="unknown scenario"):
        validate_config("nope", {})


def test_validate_config_accepts_minimal_configs():
    validate_config("brittleness", {"epsilon": 1.0, "gamma": 0.5})
    validate_config("figure1", {"epsilon": 0.5})
    validate_config("method-comparison", {"steps": 10})
    validate_config("bound-check", {"delta": 0.1})


def test_validate_config_checks_method_names():
    with pytest.raises(ValidationError, match="method"):
        validate_config("method-comparison",
                        {"steps": 1, "methods": ["baseline", "sideways"]})


# ---------------------------------------------------------------------------
# output directory resolution

def test_out_dir_precedence(monkeypatch):
    monkeypatch.delenv("EGT_OUT_DIR", raising=False)
    assert resolve_out_dir("s", "abc") == runner_mod.Path("runs/s-abc")
    monkeypatch.setenv("EGT_OUT_DIR", "/tmp/envout")
    assert resolve_out_dir("s", "abc") == runner_mod.Path("/tmp/envout/s-abc")
    assert resolve_out_dir("s", "abc", config_out="cfg") == runner_mod.Path("cfg")
    assert resolve_out_dir("s", "abc", explicit="exp",
                           config_out="cfg") == runner_mod.Path("exp")


# ---------------------------------------------------------------------------
# comparison tables

def _rec(family, method, dp, dr, dpr, g=0.5, groups=("neg", "pos")):
    metrics = {"delta_p": dp, "delta_r": dr, "delta_pr": dpr,
               "global_divergence": g}
    for name in groups:
        metrics[f"precision_{name}"] = 0.875
        metrics[f"recall_{name}"] = 0.75
    return make_run_record("method-comparison", {"steps": 1}, metrics,
                           family=family, method=method)


def test_table_flags_best_per_family_with_ties():
    records = [
        _rec("h", "baseline", dp=0.2, dr=0.3, dpr=0.3),
        _rec("h", "minmax", dp=0.2, dr=0.1, dpr=0.1),
        _rec("k", "baseline", dp=0.9, dr=0.9, dpr=0.9),
    ]
    table = render_table(records)
    rows = {(r["family"], r["method"]): r for r in table.rows}
    assert rows[("h", "baseline")]["best_delta_p"]  # tie: both flagged
    assert rows[("h", "minmax")]["best_delta_p"]
    assert not rows[("h", "baseline")]["best_delta_r"]
    assert rows[("h", "minmax")]["best_delta_r"]
    # the other family competes only with itself
    assert rows[("k", "baseline")]["best_delta_p"]


def test_table_single_record_flags_everything():
    table = render_table([_rec("h", "baseline", 0.4, 0.4, 0.4)])
    (row,) = table.rows
    assert row["best_delta_p"] and row["best_delta_r"] and row["best_delta_pr"]


def test_table_orders_family_then_method():
    records = [
        _rec("zeta", "baseline", 0.1, 0.1, 0.1),
        _rec("alpha", "minmax", 0.1, 0.1, 0.1),
        _rec("alpha", "unlisted", 0.1, 0.1, 0.1),
        _rec("alpha", "baseline", 0.1, 0.1, 0.1),
        _rec("alpha", "regularized", 0.1, 0.1, 0.1),
    ]
    table = render_table(records)
    assert [(r["family"], r["method"]) for r in table.rows] == [
        ("alpha", "baseline"), ("alpha", "minmax"), ("alpha", "regularized"),
        ("alpha", "unlisted"),  # unknown methods trail the canonical order
        ("zeta", "baseline"),
    ]
    assert set(METHOD_ORDER) > {"baseline", "minmax", "regularized"}


def test_table_csv_formats_percent_and_flags():
    rec = _rec("h", "baseline", dp=0.123456, dr=0.0, dpr=0.2, g=0.5700175)
    table = render_table([rec])
    header, row = table.to_csv().splitlines()
    cells = dict(zip(header.split(","), row.split(",")))
    assert cells["delta_p"] == "12.3"  # percentage points, one decimal
    assert cells["delta_r"] == "0.0"
    assert cells["precision_neg"] == "87.5"
    assert cells["recall_pos"] == "75.0"
    assert cells["global_divergence"] == "0.5700175"  # raw divergence
    assert cells["best_delta_p"] == "1"


def test_table_round_trips_through_json():
    table = render_table([_rec("h", "baseline", 0.1, 0.2, 0.3)])
    payload = json.loads(table.to_json())
    assert payload["columns"] == list(table.columns)
    assert payload["rows"] == table.rows


def test_table_rejects_incomplete_records():
    with pytest.raises(ValidationError, match="no records"):
        render_table([])
    rec = _rec("h", "baseline", 0.1, 0.2, 0.3)
    gutted = dataclasses.replace(rec, metrics={"delta_p": 0.1})
    with pytest.raises(ValidationError, match="lacks metrics"):
        render_table([gutted])
    other_groups = _rec("h", "minmax", 0.1, 0.2, 0.3, groups=("a", "b"))
    with pytest.raises(ValidationError, match="per-group"):
        render_table([rec, other_groups])


# ---------------------------------------------------------------------------
# scenarios

def test_brittleness_scenario_artifacts(tmp_path):
    config = {"epsilon": 1.0, "gamma": 0.5}
    out = run_scenario("brittleness", config, out_dir=tmp_path / "run")
    assert sorted(p.name for p in out.iterdir()) == [
        "model.json", "record.json", "table.csv"]
    rec = load_run_record(out / "record.json")
    assert rec.metrics["mgo_pass"] and rec.metrics["ego_pass"]
    assert rec.metrics["delta_egt"] == pytest.approx(0.5, abs=1e-7)
    assert rec.metrics["global_divergence"] == pytest.approx(1.0, abs=1e-7)
    assert rec.run_id == make_run_record("brittleness", config, {},
                                         family="construction",
                                         method="counterexample").run_id


def test_brittleness_rerun_byte_identical(tmp_path):
    config = {"epsilon": 1.0, "gamma": 0.5}
    first = run_scenario("brittleness", config, out_dir=tmp_path / "a")
    second = run_scenario("brittleness", config, out_dir=tmp_path / "b")
    for name in ("model.json", "table.csv"):
        assert (first / name).read_bytes() == (second / name).read_bytes()
    # records agree on everything except the creation stamp
    recs = [dataclasses.asdict(load_run_record(d / "record.json"))
            for d in (first, second)]
    for rec in recs:
        rec.pop("created")
    assert recs[0] == recs[1]


def test_figure1_scenario_artifacts(tmp_path):
    config = {"epsilon": 0.5, "n_mu": 15, "n_sigma": 11, "dump_field": True}
    out = run_scenario("figure1", config, out_dir=tmp_path / "run")
    rec = load_run_record(out / "record.json")
    lines = (out / "levelset.csv").read_text().splitlines()
    assert lines[0] == "mu,sigma,global_js,cond_js_0,cond_js_1,delta_egt"
    assert len(lines) - 1 == rec.metrics["n_points"] > 0
    assert rec.metrics["worst_delta_egt"] >= rec.metrics["balanced_delta_egt"]
    field_lines = (out / "field.csv").read_text().splitlines()
    assert len(field_lines) - 1 == 15 * 11


def test_figure1_empty_level_set_is_an_error(tmp_path):
    with pytest.raises(ValidationError, match="empty"):
        run_scenario("figure1", {"epsilon": 99.0, "n_mu": 9, "n_sigma": 7},
                     out_dir=tmp_path / "run")


def test_method_comparison_scenario_artifacts(tmp_path):
    config = {"steps": 5, "methods": ["minmax", "baseline"],
              "learning_rate": 5.0, "sample_size": 2000}
    out = run_scenario("method-comparison", config, out_dir=tmp_path / "run")
    assert sorted(p.name for p in out.iterdir()) == [
        "record-baseline.json", "record-minmax.json", "record.json",
        "table.csv", "table.json"]
    table = json.loads((out / "table.json").read_text())
    # rows follow the canonical order even though the config listed minmax first
    assert [r["method"] for r in table["rows"]] == ["baseline", "minmax"]
    summary = load_run_record(out / "record.json")
    assert summary.metrics == {"methods": ["minmax", "baseline"], "n_runs": 2}
    per_method = load_run_record(out / "record-minmax.json")
    assert per_method.method == "minmax"
    assert {"delta_egt", "delta_p", "final_value"} <= per_method.metrics.keys()


def test_bound_check_scenario_holds(tmp_path):
    config = {"delta": 0.1, "n_families": 2, "n_candidates": 3, "n_cells": 8}
    out = run_scenario("bound-check", config, out_dir=tmp_path / "run")
    rec = load_run_record(out / "record.json")
    assert rec.metrics["violations"] == 0
    lines = (out / "families.csv").read_text().splitlines()
    assert len(lines) - 1 == 2


def test_bound_check_violation_aborts_after_writing(tmp_path, monkeypatch):
    monkeypatch.setattr(
        runner_mod, "verify_lower_bound",
        lambda *a, **k: types.SimpleNamespace(violations=("v",), bound_base=0.0))
    with pytest.raises(PropertyViolation, match="1 lower-bound violations") as exc:
        run_scenario("bound-check",
                     {"delta": 0.1, "n_families": 1, "n_candidates": 2,
                      "n_cells": 8},
                     out_dir=tmp_path / "run")
    assert exc.value.run_dir == tmp_path / "run"
    assert (tmp_path / "run" / "record.json").exists()  # outputs land first


def test_run_scenario_reads_config_files(tmp_path):
    cfg_path = tmp_path / "cfg.json"
    cfg_path.write_text(json.dumps({"epsilon": 1.0, "gamma": 0.5}))
    out = run_scenario("brittleness", cfg_path, out_dir=tmp_path / "run")
    assert (out / "record.json").exists()
    with pytest.raises(ValidationError, match="cannot read config"):
        run_scenario("brittleness", tmp_path / "absent.json",
                     out_dir=tmp_path / "x")
    listy = tmp_path / "list.json"
    listy.write_text("[1, 2]")
    with pytest.raises(ValidationError, match="JSON object"):
        run_scenario("brittleness", listy, out_dir=tmp_path / "y")
