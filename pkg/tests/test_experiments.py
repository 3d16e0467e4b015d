import csv
import json
import math

import numpy as np
import pytest

from decgp import cli
from decgp.errors import ContractError
from decgp.experiments import (
    CSV_COLUMNS,
    PREDICTORS,
    ExperimentSpec,
    dumps_record,
    load_csv_dataset,
    nlpd,
    partition_stripes,
    replication_seed,
    rmse,
    run_experiment,
    synth_field,
    write_results,
)
from decgp.gp import Dataset, HyperParams

THETA = HyperParams((1.2, 0.3), 1.3, 0.1)
FAST = dict(N=64, M=4, n_query=5, trainer=None, seed=3)


# --- synthetic field -------------------------------------------------------------------

def test_field_is_deterministic():
    a, b = synth_field(100, THETA, 7, n_query=4), synth_field(100, THETA, 7, n_query=4)
    np.testing.assert_array_equal(a.data.inputs, b.data.inputs)
    np.testing.assert_array_equal(a.data.outputs, b.data.outputs)
    np.testing.assert_array_equal(a.query_latent, b.query_latent)


def test_field_with_vanishing_signal_is_noise():
    d = synth_field(1000, HyperParams((1.2, 0.3), 1e-6, 0.1), 1)
    assert np.var(d.data.outputs) == pytest.approx(0.01, rel=0.2)


def test_field_variogram_sill():
    # short isotropic lengthscale so one draw spans many correlation lengths;
    # pairs beyond 5 lengthscales are uncorrelated, averaged over five draws
    hyper = HyperParams((0.15, 0.15), 1.3, 0.1)
    sills = []
    for seed in range(5):
        d = synth_field(1024, hyper, seed)
        X, y = d.data.inputs, d.data.outputs
        i, j = np.triu_indices(len(y), 1)
        far = np.linalg.norm(X[i] - X[j], axis=1) > 0.75
        sills.append(0.5 * np.mean((y[i[far]] - y[j[far]]) ** 2))
    assert np.mean(sills) == pytest.approx(1.69, rel=0.25)


def test_field_points_inside_box():
    d = synth_field(300, THETA, 3, n_query=50)
    assert d.data.inputs.min() >= 0 and d.data.inputs.max() <= 2
    assert np.all((d.query_inputs > 0) & (d.query_inputs < 2))


def test_field_size_limit():
    with pytest.raises(ContractError):
        synth_field(0, THETA, 0)


# --- partition -----------------------------------------------------------------------

def test_partition_single_agent_is_identity():
    ds = synth_field(50, THETA, 0).data
    (part,) = partition_stripes(ds, 1)
    np.testing.assert_array_equal(part.inputs, ds.inputs)


def test_partition_second_stripe_bounds():
    ds = synth_field(400, THETA, 1).data
    parts = partition_stripes(ds, 4, bounds=(0.0, 2.0))
    x = parts[1].inputs[:, 0]
    assert x.min() >= 0.5 and x.max() < 1.0


def test_partition_is_multiset_union():
    ds = synth_field(200, THETA, 2).data
    parts = partition_stripes(ds, 5, axis=1)
    assert sum(len(p) for p in parts) == len(ds)
    joined = Dataset.concat(parts)
    key = lambda d: sorted(map(tuple, np.column_stack([d.inputs, d.outputs])))
    assert key(joined) == key(ds)


def test_partition_empty_stripe_rejected():
    ds = Dataset([[0.0, 0.0], [2.0, 0.0]], [1.0, 2.0])
    with pytest.raises(ContractError):
        partition_stripes(ds, 3)


# --- metrics -----------------------------------------------------------------------

def test_metrics_perfect_prediction():
    t = np.array([0.3, -1.0, 2.0])
    assert rmse(t, t) == 0
    assert nlpd(t, np.full(3, 1 / (2 * math.pi)), t) == pytest.approx(0, abs=1e-15)


def test_metrics_scalar_example():
    assert rmse([0.0], [3.0]) == 3.0
    assert nlpd([0.0], [1.0], [3.0]) == pytest.approx(0.5 * math.log(2 * math.pi) + 4.5, rel=1e-15)


def test_rmse_permutation_invariant():
    rng = np.random.default_rng(0)
    a, b = rng.standard_normal(20), rng.standard_normal(20)
    p = rng.permutation(20)
    assert rmse(a, b) == pytest.approx(rmse(a[p], b[p]), rel=1e-15)


def test_metric_contracts():
    with pytest.raises(ContractError):
        rmse([1.0], [1.0, 2.0])
    with pytest.raises(ContractError):
        nlpd([0.0], [0.0], [0.0])


# --- spec / harness --------------------------------------------------------------------

def test_spec_rejects_unknown_keys_and_predictors():
    with pytest.raises(ContractError):
        ExperimentSpec.from_dict({"N": 64, "colour": "red"})
    with pytest.raises(ContractError):
        ExperimentSpec(predictors=("dec-median",))
    with pytest.raises(ContractError):
        ExperimentSpec(trainer="sgd")


def test_spec_round_trip():
    spec = ExperimentSpec.from_dict({"N": 100, "predictors": "dec-poe", "admm": {"s_end": 3}})
    assert spec.predictors == ("dec-poe",)
    assert ExperimentSpec.from_dict(spec.to_dict()) == spec


def test_replication_seeds_distinct():
    seeds = {replication_seed(0, r) for r in range(50)}
    assert len(seeds) == 50
    assert replication_seed(4, 2) == replication_seed(4, 2)


def test_run_is_byte_identical():
    spec = ExperimentSpec(**{**FAST, "trainer": "dec-apx", "admm": {"s_end": 3},
                             "predictors": ("gpoe", "dec-rbcm", "dec-nn-grbcm"), "replications": 2})
    a = [dumps_record(r) for r in run_experiment(spec)]
    b = [dumps_record(r) for r in run_experiment(spec)]
    assert a == b


def test_dec_gpoe_matches_gpoe():
    spec = ExperimentSpec(**{**FAST, "predictors": ("gpoe", "dec-gpoe")})
    (rec,) = run_experiment(spec)
    m = rec["metrics"]
    assert abs(m["gpoe"]["rmse"] - m["dec-gpoe"]["rmse"]) < 1e-6


def test_ledger_only_for_decentralized():
    spec = ExperimentSpec(**{**FAST, "predictors": ("full", "poe", "npae", "dec-poe", "dec-npae")})
    (rec,) = run_experiment(spec)
    for name, m in rec["metrics"].items():
        assert ("ledger" in m) == name.startswith("dec-")
    assert rec["metrics"]["dec-poe"]["ledger"]["streams"]["dac"] == 2


def test_full_gp_is_best_or_close():
    spec = ExperimentSpec(**{**FAST, "N": 256, "n_query": 30, "predictors": ("full", "poe")})
    (rec,) = run_experiment(spec)
    assert rec["metrics"]["full"]["rmse"] <= rec["metrics"]["poe"]["rmse"] + 1e-9


def test_training_record():
    spec = ExperimentSpec(**{**FAST, "trainer": "dec-gapx", "admm": {"s_end": 4}})
    (rec,) = run_experiment(spec, do_predict=False)
    tr = rec["train"]
    assert tr["rounds"] == 4 and len(tr["agent_theta"]) == 4
    assert "metrics" not in rec
    assert set(tr["ledger"]["scalars_sent_by_phase"]) == {"admm", "flood"}


def test_csv_dataset(tmp_path):
    d = synth_field(80, THETA, 5).data
    p = tmp_path / "data.csv"
    with open(p, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["x1", "x2", "y"])
        w.writerows(np.column_stack([d.inputs, d.outputs]).tolist())
    back = load_csv_dataset(p)
    np.testing.assert_allclose(back.outputs, d.outputs, rtol=1e-15)
    spec = ExperimentSpec(**{**FAST, "dataset_csv": str(p), "predictors": ("full",)})
    (rec,) = run_experiment(spec)
    assert sum(rec["local_sizes"]) == 75


def test_csv_dataset_needs_columns(tmp_path):
    p = tmp_path / "bad.csv"
    p.write_text("a,b\n1,2\n")
    with pytest.raises(ContractError):
        load_csv_dataset(p)


def test_custom_topology_needs_file(tmp_path):
    spec = ExperimentSpec(**{**FAST, "topology": "custom", "predictors": ("dec-poe",)})
    with pytest.raises(ContractError):
        run_experiment(spec)
    adj = tmp_path / "adj.csv"
    adj.write_text("0,1,1,1\n1,0,0,0\n1,0,0,0\n1,0,0,0\n")
    spec = ExperimentSpec(**{**FAST, "topology": "custom", "adjacency_file": str(adj), "predictors": ("dec-poe",)})
    (rec,) = run_experiment(spec)
    assert rec["metrics"]["dec-poe"]["rounds"] > 0


def test_write_results(tmp_path):
    spec = ExperimentSpec(**{**FAST, "predictors": ("poe", "dec-poe"), "replications": 2})
    paths = write_results(run_experiment(spec), tmp_path)
    assert [p.name for p in paths] == ["replication_000.json", "replication_001.json", "metrics.csv"]
    rows = list(csv.DictReader(open(tmp_path / "metrics.csv")))
    assert tuple(rows[0]) == CSV_COLUMNS
    assert len(rows) == 4
    assert rows[0]["method"] == "dec-poe" and rows[0]["rounds"] != ""
    assert rows[1]["method"] == "poe" and rows[1]["rounds"] == ""
    rec = json.loads((tmp_path / "replication_001.json").read_text())
    assert rec["schema"] == "decgp/v1" and rec["replication"] == 1


def test_all_predictors_run():
    spec = ExperimentSpec(**{**FAST, "N": 96, "n_query": 2, "predictors": PREDICTORS})
    (rec,) = run_experiment(spec)
    assert set(rec["metrics"]) == set(PREDICTORS)
    for name, m in rec["metrics"].items():
        if "error" not in m:
            assert np.isfinite(m["rmse"]) and np.isfinite(m["nlpd"])
        else:
            assert m["error"] in ("NonConvergenceError", "ConditioningError")


# --- command line ----------------------------------------------------------------------

def write_config(tmp_path, **kw):
    p = tmp_path / "cfg.json"
    p.write_text(json.dumps({**FAST, **kw}))
    return p


def test_cli_predict_prints_json(tmp_path, capsys):
    cfg = write_config(tmp_path, predictors=["gpoe", "dec-gpoe"])
    assert cli.main(["predict", "--config", str(cfg)]) == cli.EXIT_OK
    rec = json.loads(capsys.readouterr().out)
    assert set(rec["metrics"]) == {"gpoe", "dec-gpoe"}


def test_cli_seed_override(tmp_path, capsys, monkeypatch):
    cfg = write_config(tmp_path, predictors=["poe"])
    monkeypatch.setenv("DECGP_SEED", "11")
    cli.main(["predict", "--config", str(cfg)])
    assert json.loads(capsys.readouterr().out)["spec"]["seed"] == 11
    monkeypatch.setenv("DECGP_SEED", "eleven")
    assert cli.main(["predict", "--config", str(cfg)]) == cli.EXIT_INPUT


def test_cli_bad_config(tmp_path):
    assert cli.main(["train", "--config", str(tmp_path / "missing.json")]) == cli.EXIT_INPUT
    cfg = write_config(tmp_path, M=0)
    assert cli.main(["train", "--config", str(cfg)]) == cli.EXIT_INPUT


def test_cli_bench_writes_files(tmp_path):
    cfg = write_config(tmp_path, N=48, n_query=1, predictors=["poe", "dec-bcm"])
    out = tmp_path / "out"
    assert cli.main(["bench", "--config", str(cfg), "--out", str(out)]) == cli.EXIT_OK
    assert (out / "metrics.csv").exists() and (out / "replication_000.json").exists()


def test_cli_train_not_converged_exit(tmp_path, capsys):
    cfg = write_config(tmp_path, trainer="apx", admm={"max_rounds": 1})
    assert cli.main(["train", "--config", str(cfg)]) == cli.EXIT_NONCONVERGED
    assert "metrics" not in json.loads(capsys.readouterr().out)


def test_exit_code_mapping():
    ok = {"train": {"converged": True}, "metrics": {"poe": {"rmse": 0.1}}}
    assert cli.exit_code([ok]) == cli.EXIT_OK
    assert cli.exit_code([ok, {"metrics": {"x": {"error": "NonConvergenceError"}}}]) == cli.EXIT_NONCONVERGED
    assert cli.exit_code([{"metrics": {"x": {"error": "ConditioningError"},
                                       "y": {"error": "NonConvergenceError"}}}]) == cli.EXIT_CONDITIONING
