import json

import numpy as np
import pytest
import yaml
from click.testing import CliRunner
from hypothesis import given, settings, strategies as st

from usermeta.cli import main
from usermeta.data import NormalizationStats, Samples, load_meta_dataset, normalize_meta, sample_episode_split
from usermeta.harness import ExperimentConfig, MethodEntry, kfold_split, run_experiment
from usermeta.sim import EnvConfig, gen_meta_dataset
from usermeta.training import zero_velocity_mse


def test_paper_sized_folds():
    folds = kfold_split(range(20), 5, seed=0)
    assert [len(test) for _, test in folds] == [4] * 5


def test_leave_one_user_out():
    folds = kfold_split(range(6), 6, seed=1)
    assert sorted(t[0] for _, t in folds) == list(range(6))
    assert all(len(t) == 1 and len(tr) == 5 for tr, t in folds)


@settings(max_examples=50, deadline=None)
@given(st.integers(2, 30), st.integers(0, 100), st.data())
def test_folds_partition_users(n, seed, data):
    k = data.draw(st.integers(2, n))
    folds = kfold_split(range(n), k, seed)
    tests = [set(t) for _, t in folds]
    assert set().union(*tests) == set(range(n))
    assert sum(len(t) for t in tests) == n
    assert max(map(len, tests)) - min(map(len, tests)) <= 1
    for train, test in folds:
        assert not set(train) & set(test) and set(train) | set(test) == set(range(n))


def test_fold_errors():
    with pytest.raises(ValueError):
        kfold_split(range(3), 4, 0)
    with pytest.raises(ValueError):
        kfold_split(range(3), 1, 0)


def test_zero_velocity_examples():
    one = Samples(np.zeros((1, 12)), np.zeros((1, 2)), np.zeros((1, 2)), np.array([[0.1, -0.1]]),
                  np.zeros(1, dtype=np.int64), np.zeros(1, dtype=np.int64))
    assert abs(zero_velocity_mse(one) - 0.01) < 1e-15
    still = Samples(np.zeros((3, 12)), np.zeros((3, 2)), np.ones((3, 2)), np.ones((3, 2)),
                    np.zeros(3, dtype=np.int64), np.arange(3))
    assert zero_velocity_mse(still) == 0.0
    with pytest.raises(ValueError):
        zero_velocity_mse(one.take([]))


@pytest.fixture(scope="module")
def dataset(tmp_path_factory):
    d = tmp_path_factory.mktemp("data")
    gen_meta_dataset(6, 3, EnvConfig(episode_length=60), seed=0, out_dir=d)
    return d


def config(dataset, out, methods, **kw):
    base = dict(data=str(dataset), out=str(out), folds=3, seeds=[0], eval_batch=20, eval_draws=3,
                defaults=dict(iterations=4, hidden=8, batch_size=10, n_users=3, embed_size=4),
                methods=methods)
    base.update(kw)
    return ExperimentConfig.from_dict(base)


def test_zero_velocity_experiment_matches_direct_computation(dataset, tmp_path):
    cfg = config(dataset, tmp_path, ["zero-velocity"])
    results = run_experiment(cfg)
    raw = load_meta_dataset(dataset)
    for fi, (train, test) in enumerate(kfold_split(raw, 3, 0)):
        meta = normalize_meta(raw, NormalizationStats.fit(raw[u] for u in train))
        draws = []
        for u in test:
            for d in range(3):
                _, qry = sample_episode_split(meta[u], 20, np.random.default_rng([0, fi, u, d]))
                draws.append(zero_velocity_mse(qry))
        assert abs(results[fi].mse - np.mean(draws)) < 1e-15
    assert not (tmp_path / "logs" / "zero-velocity_f0_s0.log").exists()


def test_duplicate_entries_give_identical_rows(dataset, tmp_path):
    cfg = config(dataset, tmp_path, [{"kind": "cavia", "name": "a"}, {"kind": "cavia", "name": "b"}])
    rows = run_experiment(cfg)
    a = [r for r in rows if r.method == "a"]
    b = [r for r in rows if r.method == "b"]
    assert [r.mse for r in a] == [r.mse for r in b]


def test_reruns_give_identical_csv(dataset, tmp_path):
    methods = ["proposed", "maml", "supervised-fixed", "zero-velocity"]
    run_experiment(config(dataset, tmp_path / "a", methods))
    run_experiment(config(dataset, tmp_path / "b", methods))
    a, b = (tmp_path / "a" / "results.csv").read_bytes(), (tmp_path / "b" / "results.csv").read_bytes()
    assert a == b
    text = (tmp_path / "a" / "results.txt").read_text()
    assert all(m in text for m in methods)
    assert (tmp_path / "a" / "checkpoints" / "proposed_f0_s0.ckpt").exists()
    assert (tmp_path / "a" / "logs" / "maml_f2_s0.log").read_text().startswith("iter=1 ")


def test_finished_cells_are_reused(dataset, tmp_path):
    cfg = config(dataset, tmp_path, ["supervised-fixed"])
    run_experiment(cfg)
    cell = tmp_path / "cells" / "supervised-fixed_f0_s0.json"
    saved = json.loads(cell.read_text())
    saved["mse"] = 123.0
    cell.write_text(json.dumps(saved))
    assert run_experiment(cfg)[0].mse == 123.0
    # a different setting invalidates the cached cell
    cfg2 = config(dataset, tmp_path, ["supervised-fixed"], eval_draws=2)
    assert run_experiment(cfg2)[0].mse != 123.0


def test_divergence_recorded_and_run_continues(dataset, tmp_path):
    methods = [{"kind": "supervised-fixed", "name": "boom", "hyper": {"beta": 1e300}}, "zero-velocity"]
    with np.errstate(all="ignore"):
        results = run_experiment(config(dataset, tmp_path, methods))
    assert {r.status for r in results if r.method == "boom"} == {"diverged"}
    assert all(r.status == "ok" for r in results if r.method == "zero-velocity")
    assert "diverged" in (tmp_path / "results.csv").read_text()


def test_slow_cell_warns(dataset, tmp_path, caplog):
    with caplog.at_level("WARNING"):
        run_experiment(config(dataset, tmp_path, ["supervised-fixed"], cell_time_limit=1e-9))
    assert "limit" in caplog.text


def test_config_validation(dataset, tmp_path):
    with pytest.raises(ValueError):
        config(dataset, tmp_path, ["paml"])
    with pytest.raises(ValueError):
        config(dataset, tmp_path, ["cavia"], folds=1)
    with pytest.raises(ValueError):
        config(dataset, tmp_path, [{"kind": "cavia", "hyper": {"alpah": 1}}])
    with pytest.raises(ValueError):
        ExperimentConfig.from_dict({"data": "x", "out": "y", "methods": ["cavia"], "fold": 3})


def test_yaml_config_relative_paths(dataset, tmp_path):
    (tmp_path / "exp.yaml").write_text(yaml.safe_dump(
        {"data": str(dataset), "out": "run", "folds": 2, "methods": ["zero-velocity"], "eval_batch": 10}))
    cfg = ExperimentConfig.load(tmp_path / "exp.yaml")
    assert cfg.out == str(tmp_path / "run") and cfg.methods == [MethodEntry("zero-velocity")]


def test_cli_end_to_end(tmp_path):
    runner = CliRunner()
    data = tmp_path / "data"
    r = runner.invoke(main, ["gen-data", "--users", "4", "--episodes", "2", "--len", "40", "--seed", "1",
                             "--out", str(data), "--csv"])
    assert r.exit_code == 0, r.output
    assert (data / "user_003.bin").exists() and (data / "user_000.csv").exists()
    (tmp_path / "exp.yaml").write_text(yaml.safe_dump({
        "data": "data", "out": "run", "folds": 2, "eval_batch": 10, "eval_draws": 2,
        "defaults": {"iterations": 3, "hidden": 8, "batch_size": 8, "n_users": 2, "embed_size": 4},
        "methods": ["proposed", "zero-velocity"]}))
    r = runner.invoke(main, ["run", "--config", str(tmp_path / "exp.yaml")])
    assert r.exit_code == 0, r.output
    assert "proposed" in r.output
    ckpt = tmp_path / "run" / "checkpoints" / "proposed_f0_s0.ckpt"
    r = runner.invoke(main, ["embed", "--model", str(ckpt), "--data", str(data), "--batches", "3",
                             "--out", str(tmp_path / "emb.csv")])
    assert r.exit_code == 0, r.output
    assert len((tmp_path / "emb.csv").read_text().splitlines()) == 1 + 4 * 3
    for method in ("pca", "tsne"):
        r = runner.invoke(main, ["project", "--in", str(tmp_path / "emb.csv"), "--method", method,
                                 "--iterations", "50", "--out", str(tmp_path / f"{method}.csv")])
        assert r.exit_code == 0, r.output
        assert (tmp_path / f"{method}.csv").read_text().startswith("user_id,batch,px,py")
