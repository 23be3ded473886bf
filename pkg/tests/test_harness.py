import json
from dataclasses import replace

import numpy as np
import pytest

from himoe import harness as hz
from himoe.config import default_config
from himoe.moe import load_checkpoint
from himoe.router import EmaState


@pytest.fixture(scope="module")
def lab():
    cfg = default_config()
    return cfg, hz.generate_synthetic(cfg.data)


def short(cfg, steps=40, **router):
    t = replace(cfg.train, steps=steps)
    return t.with_router(**router) if router else t


def test_synthetic_examples():
    x, y = hz.generate_synthetic(hz.SyntheticDatasetSpec(4, 3, 5, cluster_spread=0.0, seed=1))
    assert np.allclose(np.linalg.norm(x, axis=1), 1.0)
    for c in range(4):
        assert np.allclose(x[y == c], x[y == c][0])
    assert np.bincount(y).tolist() == [5] * 4
    with pytest.raises(ValueError):
        hz.generate_synthetic(hz.SyntheticDatasetSpec(num_clusters=0))
    with pytest.raises(ValueError):
        hz.generate_synthetic(hz.SyntheticDatasetSpec(cluster_spread=-1.0))


def test_synthetic_golden():
    x, y = hz.generate_synthetic(hz.SyntheticDatasetSpec(2, 2, 4, cluster_spread=0.3, seed=5))
    golden = [[-0.4477381514609277, 0.34136077071674553], [-0.6973893118319766, 0.7145994764655638],
              [-0.17715213781525124, -0.82248922690379], [-0.6837602937230138, -1.0908352533036159],
              [-0.533711741458618, 0.5120334314151964]]
    assert np.allclose(x[:5], golden, rtol=0, atol=1e-15)
    assert y[:5].tolist() == [1, 1, 0, 0, 1]
    again = hz.generate_synthetic(hz.SyntheticDatasetSpec(2, 2, 4, cluster_spread=0.3, seed=5))
    assert np.array_equal(again[0], x)


def test_zero_steps_gives_initial_metrics_only(lab):
    cfg, data = lab
    rec = hz.train(short(cfg, steps=0), data)
    assert rec.snapshots == [] and rec.activations.shape == (0, 8)
    assert rec.initial["coverage_mean"] == 4.0
    assert rec.final == rec.initial


def test_determinism_and_conservation(lab):
    cfg, data = lab
    a = hz.train(short(cfg), data)
    b = hz.train(short(cfg), data)
    assert a.metrics_csv() == b.metrics_csv()
    assert a.activations_csv() == b.activations_csv()
    assert json.dumps(a.summary(), sort_keys=True) == json.dumps(b.summary(), sort_keys=True)
    k = cfg.train.router.top_k
    assert np.all(a.activations.sum(axis=1) == cfg.train.batch_size * k)
    assert len(a.snapshots) == 40 and a.activations.shape == (40, 8)
    assert sum(a.final_histogram) == len(data[1]) * k


def test_seed_changes_run(lab):
    cfg, data = lab
    a = hz.train(short(cfg), data)
    b = hz.train(replace(short(cfg), seed=1), data)
    assert a.metrics_csv() != b.metrics_csv()


def test_baseline_reduction_short(lab):
    cfg, data = lab
    hi = hz.train(short(cfg, 60, variant="hi_moe", bias_strength=0.0, lambda_intra=0.0,
                        lambda_inter=0.0), data)
    gr = hz.train(short(cfg, 60, variant="grouped", bias_strength=0.0, lambda_intra=0.0,
                        lambda_inter=0.0), data)
    assert hi.metrics_csv() == gr.metrics_csv()
    assert np.array_equal(hi.activations, gr.activations)


def test_coverage_log_and_flat_coverage(lab):
    cfg, data = lab
    log = []
    hz.train(short(cfg, 20), data, min_coverage_log=log)
    assert log == [4] * 20
    flat = hz.train(hz.baseline_config(short(cfg, 20), "flat"), data)
    assert all(s.coverage_mean <= 4 for s in flat.snapshots)
    assert flat.final["coverage_mean"] < 4


def test_divergence_aborts(lab):
    cfg, data = lab
    rec = hz.train(replace(short(cfg, 30), lr=1e250), data)
    assert rec.aborted and rec.aborted_at is not None
    assert len(rec.snapshots) == rec.aborted_at == rec.activations.shape[0]
    assert rec.final == {}
    assert hz._summary_row("hi_moe", rec)["status"] == f"aborted@{rec.aborted_at}"


def test_lossfree_bias_moves(lab):
    cfg, data = lab
    rec = hz.train(hz.baseline_config(short(cfg, 30), "flat_lossfree_bias"), data)
    assert rec.snapshots[0].load_loss == 0.0


def test_run_record_write(lab, tmp_path):
    cfg, data = lab
    rec = hz.train(short(cfg, 5), data)
    out = rec.write(tmp_path / "run")
    names = sorted(p.name for p in out.iterdir())
    assert names == ["activations.csv", "layer.ckpt", "metrics.csv", "summary.json"]
    metrics = (out / "metrics.csv").read_text().splitlines()
    assert metrics[0].startswith("step,expert_cv,group_cv") and len(metrics) == 6
    acts = (out / "activations.csv").read_text().splitlines()
    assert acts[0] == "step," + ",".join(f"expert_{i}" for i in range(8)) and len(acts) == 6
    summary = json.loads((out / "summary.json").read_text())
    assert summary["steps_completed"] == 5 and summary["config"]["variant"] == "hi_moe"
    params, header = load_checkpoint(out / "layer.ckpt")
    assert np.array_equal(params.router, rec.model.layer.router)
    assert header["num_groups"] == 4


def test_compare_baselines(lab):
    cfg, data = lab
    rows, recs = hz.compare_baselines(short(cfg, 30), data)
    assert [r["variant"] for r in rows] == list(hz.BASELINE_VARIANTS)
    cov = {r["variant"]: r["final_coverage"] for r in rows}
    assert cov["grouped"] == cov["hi_moe"] == 4.0
    assert cov["flat"] < 4.0
    assert recs["grouped"].config["lambda_inter"] == 0.0
    assert recs["hi_moe"].config["lambda_inter"] == 0.05
    text = hz.rows_to_csv(rows, hz.SUMMARY_COLUMNS)
    assert text.splitlines()[0] == ",".join(hz.SUMMARY_COLUMNS) and len(text.splitlines()) == 5


def test_identical_configs_identical_records(lab):
    cfg, data = lab
    rows, _ = hz.compare_baselines(short(cfg, 15), data, ["grouped", "grouped"])
    assert rows[0] == rows[1]


def test_pareto_sweep(lab):
    cfg, data = lab
    rows = hz.pareto_sweep(short(cfg, 10), [(0.4, 0.0), (0.0, 0.2), (0.0, 0.0)], data)
    assert [(r["lambda_intra"], r["lambda_inter"]) for r in rows] == [(0, 0), (0, 0.2), (0.4, 0)]
    single = hz.pareto_sweep(short(cfg, 10), [(0, 0)], data)
    assert len(single) == 1 and single[0]["aborted_runs"] == 0
    with pytest.raises(ValueError):
        hz.pareto_sweep(short(cfg, 10), [], data)


def test_parallel_runs_match_serial(lab, monkeypatch):
    cfg, data = lab
    configs = [replace(short(cfg, 10), seed=s) for s in range(2)]
    monkeypatch.setenv("HIMOE_THREADS", "1")
    serial = [r.metrics_csv() for r in hz.run_many(configs, data)]
    monkeypatch.setenv("HIMOE_THREADS", "2")
    parallel = [r.metrics_csv() for r in hz.run_many(configs, data)]
    assert serial == parallel


def test_forward_backward_rejects_unknown_term(lab):
    cfg, data = lab
    rng = np.random.default_rng(0)
    model = hz.init_classifier(cfg.train, rng)
    with pytest.raises(ValueError, match="unknown"):
        hz.forward_backward(model, data[0][:4], data[1][:4], cfg.train.router,
                            EmaState.zeros(8), terms=("task", "z_loss"))


def test_train_rejects_mismatched_data(lab):
    cfg, data = lab
    with pytest.raises(ValueError):
        hz.train(replace(short(cfg, 1), d_model=8), data)
    with pytest.raises(ValueError):
        hz.train(replace(short(cfg, 1), num_classes=4), data)
