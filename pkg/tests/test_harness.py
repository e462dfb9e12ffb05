import json
import math
import pickle
import statistics
from fractions import Fraction

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from pam.errors import ConfigurationError, IngestionError, InputError, ProtocolError
from pam.harness import checkpoint as ckpt
from pam.harness.ablation import AblationReport, Sweep, run_ablation
from pam.harness.cli import main as cli_main
from pam.harness.config import RunConfig, apply_env, dump_config, load_config, parse_override
from pam.harness.data import (
    LabeledImages,
    Preprocess,
    load_cifar,
    load_dataset,
    load_digits,
    load_npz,
    make_strokes,
)
from pam.harness.experiment import RunReport, rescore_run, run_experiment, run_seeds
from pam.harness.metrics import (
    FeatureCache,
    aggregate_seeds,
    average_accuracy,
    evaluate_stage,
    recount_accuracy,
)
from pam.harness.report import render_run, summary_table
from pam.harness.streams import SplitSpec, build_task_stream, expected_stage_count
from pam.trainer import TrainConfig, train_task

from conftest import tiny_session, toy_task

TOY = dict(dataset="synthetic", variant="rn10-c8", image_size=16, increment=2,
           train=TrainConfig(epochs=1, batch_size=8, prune_magnitude=0.5), test_batch_size=4)


def toy_cfg(tmp_path, **kw):
    return RunConfig(**{**TOY, "output_root": str(tmp_path), **kw})


# ---------------------------------------------------------------- streams


def test_cifar100_b0_inc5_has_20_stages():
    assert SplitSpec("cifar100", 0, 5).stage_sizes(100) == [5] * 20
    assert SplitSpec("cifar10", 0, 2).stages(10) == 5
    assert SplitSpec("x", 50, 10).stage_sizes(100) == [50] + [10] * 5
    assert SplitSpec("x", 0, 3).stage_sizes(10) == [3, 3, 3, 1]
    with pytest.raises(ConfigurationError):
        SplitSpec("x", 0, 0).stage_sizes(10)


@settings(max_examples=60, deadline=None)
@given(st.integers(2, 30), st.integers(1, 7), st.integers(0, 10), st.integers(0, 99))
def test_stream_soundness(total, inc, base, seed):
    base = min(base, total)
    inc = min(inc, total)
    ys = torch.arange(total).repeat_interleave(2)
    ds = LabeledImages("t", torch.zeros(len(ys), 3, 2, 2, dtype=torch.uint8), ys,
                       torch.zeros(len(ys), 3, 2, 2, dtype=torch.uint8), ys.clone())
    stream = build_task_stream(SplitSpec("t", base, inc, seed), ds)
    sets = stream.class_sets()
    flat = [c for s in sets for c in s]
    assert sorted(flat) == list(range(total)) and len(flat) == len(set(flat))
    assert len(stream) == expected_stage_count(total, base, inc)
    if base == 0:
        assert all(len(s) == inc for s in sets[:-1])
    for t in stream:
        assert set(t.train_y.tolist()) == set(t.classes) == set(t.test_y.tolist())


def test_seed_changes_order_not_sizes(synthetic_images):
    a = build_task_stream(SplitSpec("s", 0, 2, 0), synthetic_images)
    b = build_task_stream(SplitSpec("s", 0, 2, 1), synthetic_images)
    assert a.class_sets() != b.class_sets()
    assert [len(s) for s in a.class_sets()] == [len(s) for s in b.class_sets()]


def test_stream_errors(synthetic_images):
    with pytest.raises(ConfigurationError):
        build_task_stream(SplitSpec("s", 0, 7), synthetic_images)
    empty = LabeledImages("e", torch.zeros(0, 3, 2, 2), torch.zeros(0, dtype=torch.long),
                          torch.zeros(0, 3, 2, 2), torch.zeros(0, dtype=torch.long))
    with pytest.raises(IngestionError):
        build_task_stream(SplitSpec("e", 0, 2), empty)


# ---------------------------------------------------------------- metrics


def test_average_accuracy_examples():
    assert average_accuracy([100, 50]) == 75.0
    assert average_accuracy([37.25]) == 37.25
    with pytest.raises(InputError):
        average_accuracy([])


@settings(max_examples=200, deadline=None)
@given(st.lists(st.floats(0, 100), min_size=1, max_size=25))
def test_average_accuracy_closure(vals):
    exact = sum(map(Fraction, vals)) / len(vals)
    assert abs(average_accuracy(vals) - float(exact)) <= 1e-9


@settings(max_examples=100, deadline=None)
@given(st.lists(st.floats(0, 100), min_size=2, max_size=8))
def test_aggregate_seeds_matches_brute_force_std(vals):
    mean, std = aggregate_seeds(vals)
    m = sum(vals) / len(vals)
    brute = math.sqrt(sum((v - m) ** 2 for v in vals) / (len(vals) - 1))
    assert abs(mean - m) <= 1e-9 and abs(std - brute) <= 1e-9
    assert aggregate_seeds([3.0]) == (3.0, 0.0)


def test_evaluate_stage_recount_and_protocol(synthetic_stream):
    s = tiny_session()
    cfg = TrainConfig(epochs=2, batch_size=8, prune_magnitude=0.5)
    for t in synthetic_stream.tasks[:2]:
        train_task(s, t, cfg)
    res = evaluate_stage(s, synthetic_stream.tasks[:2], batch_size=3, cache=FeatureCache())
    assert 0 <= res.accuracy <= 100
    assert res.accuracy == recount_accuracy(res.predictions)
    assert res.total == sum(t.n_test for t in synthetic_stream.tasks[:2])
    with pytest.raises(ProtocolError):
        evaluate_stage(s, synthetic_stream.tasks[:3])
    with pytest.raises(InputError):
        recount_accuracy([])


def test_evaluate_stage_constant_stub_is_chance(monkeypatch):
    import pam.harness.metrics as metrics

    s = tiny_session()
    tasks = []
    for b in range(5):
        t = toy_task(b, [2 * b, 2 * b + 1], n_test=10)
        train_task(s, t, TrainConfig(epochs=1, batch_size=8, prune_magnitude=0.5))
        tasks.append(t)

    def const(state, batch, *a, **k):
        from pam.router import ConfidenceVector

        return torch.zeros(len(batch), dtype=torch.long), ConfidenceVector([1.0], 0, "confidence")

    monkeypatch.setattr(metrics, "predict", const)
    assert evaluate_stage(s, tasks).accuracy == 10.0

    def perfect(state, batch, *a, **k):
        from pam.router import ConfidenceVector

        return perfect.y.pop(0), ConfidenceVector([1.0], 0, "confidence")

    perfect.y = [t.test_y[i:i + 48] for t in tasks for i in range(0, t.n_test, 48)]
    monkeypatch.setattr(metrics, "predict", perfect)
    assert evaluate_stage(s, tasks).accuracy == 100.0


# ---------------------------------------------------------------- config


def test_config_round_trip_and_hash(tmp_path):
    cfg = toy_cfg(tmp_path, name="rt")
    p = tmp_path / "c.yaml"
    dump_config(cfg, p)
    back = load_config(p, env=False)
    assert back == cfg and back.config_hash() == cfg.config_hash()
    assert cfg.replace(**{"train.epochs": 3}).config_hash() != cfg.config_hash()


def test_config_validation_and_overrides(tmp_path, monkeypatch):
    with pytest.raises(ConfigurationError):
        RunConfig(method="x")
    with pytest.raises(ConfigurationError):
        RunConfig(strategy="x")
    with pytest.raises(ConfigurationError):
        RunConfig.from_dict({"bogus": 1})
    with pytest.raises(ConfigurationError):
        RunConfig.from_dict({"train": {"bogus": 1}})
    assert parse_override("train.epochs=5") == ("train.epochs", 5)
    assert parse_override("eval_strategies=[distance-map]") == ("eval_strategies", ["distance-map"])
    with pytest.raises(ConfigurationError):
        parse_override("novalue")
    monkeypatch.setenv("PAM_DATA_ROOT", "/data/x")
    monkeypatch.setenv("PAM_OUTPUT_ROOT", str(tmp_path / "o"))
    monkeypatch.setenv("PAM_WEIGHTS", "/w/rn18.pth")
    cfg = apply_env(RunConfig())
    assert cfg.data_root == "/data/x" and cfg.run_dir == tmp_path / "o" / "run"
    assert cfg.weights == "/w/rn18.pth"


# ---------------------------------------------------------------- data


def fake_cifar(root, name="cifar10"):
    folder = root / ("cifar-10-batches-py" if name == "cifar10" else "cifar-100-python")
    folder.mkdir(parents=True)
    rng = np.random.default_rng(0)
    key = b"labels" if name == "cifar10" else b"fine_labels"
    n_cls = 10 if name == "cifar10" else 100

    def dump(path, n):
        data = rng.integers(0, 256, size=(n, 3072), dtype=np.uint8)
        with open(path, "wb") as fh:
            pickle.dump({b"data": data, key: list(np.arange(n) % n_cls)}, fh)

    if name == "cifar10":
        for i in range(1, 6):
            dump(folder / f"data_batch_{i}", 20)
        dump(folder / "test_batch", 20)
    else:
        dump(folder / "train", 200)
        dump(folder / "test", 100)
    return root


@pytest.mark.parametrize("name", ["cifar10", "cifar100"])
def test_load_cifar_from_python_release_layout(tmp_path, name):
    ds = load_dataset(name, fake_cifar(tmp_path, name))
    assert ds.train_x.shape[1:] == (3, 32, 32) and ds.train_x.dtype == torch.uint8
    assert ds.num_classes == (10 if name == "cifar10" else 100)


def test_load_cifar_missing_gives_guidance(tmp_path):
    with pytest.raises(IngestionError, match="PAM_DATA_ROOT"):
        load_cifar("cifar10", tmp_path)
    with pytest.raises(ConfigurationError):
        load_dataset("cifar10", None)
    with pytest.raises(ConfigurationError):
        load_dataset("imagenet-r")


def test_load_digits_and_npz(tmp_path):
    d = load_digits()
    assert d.num_classes == 10 and d.train_x.shape[1:] == (3, 8, 8)
    assert len(d.train_y) + len(d.test_y) == 1797
    np.savez(tmp_path / "x.npz", train_x=d.train_x.numpy(), train_y=d.train_y.numpy(),
             test_x=d.test_x.numpy(), test_y=d.test_y.numpy())
    e = load_npz(tmp_path / "x.npz")
    assert torch.equal(e.train_x, d.train_x)
    np.savez(tmp_path / "bad.npz", train_x=d.train_x.numpy())
    with pytest.raises(IngestionError):
        load_npz(tmp_path / "bad.npz")
    with pytest.raises(IngestionError):
        load_npz(tmp_path / "none.npz")


def test_preprocess_and_subsample():
    x = torch.full((2, 3, 8, 8), 255, dtype=torch.uint8)
    y = Preprocess(16)(x)
    assert y.shape == (2, 3, 16, 16)
    assert torch.allclose(y[:, 0], torch.full((2, 16, 16), (1 - 0.485) / 0.229))
    ds = make_strokes(4, 5, 3, size=16, seed=1)
    sub = ds.subsample(2, 1)
    assert torch.bincount(sub.train_y).tolist() == [2] * 4 and len(sub.test_y) == 4


# ---------------------------------------------------------------- experiments


def test_run_experiment_smoke_and_report_fields(tmp_path):
    cfg = toy_cfg(tmp_path, name="smoke", dataset_args={"num_classes": 4, "train_per_class": 6,
                                                         "test_per_class": 4, "size": 16})
    r = run_experiment(cfg)
    assert len(r.per_stage_accuracy) == 2
    assert r.average_accuracy == sum(r.per_stage_accuracy) / 2
    assert all(0 <= a <= 100 for a in r.per_stage_accuracy)
    d = cfg.run_dir
    for b in range(2):
        for f in ("module.bin", "plan.txt", "classifier.bin", "centroid.bin", "log.jsonl",
                  "eval.json", "predictions.jsonl", "routing.jsonl"):
            assert (d / f"stage_{b}" / f).exists(), f
        preds = [json.loads(line) for line in (d / f"stage_{b}" / "predictions.jsonl").read_text().splitlines()]
        assert recount_accuracy(preds) == r.per_stage_accuracy[b]
    assert load_config(d / "config.yaml", env=False) == cfg
    back = RunReport.load(d)
    assert back.to_dict() == r.to_dict()
    assert RunConfig.from_dict(back.config_echo) == cfg
    assert all(v not in (None, [], {}) for k, v in back.to_dict().items() if k != "strategy_accuracy")
    assert abs(average_accuracy(back.per_stage_accuracy) - back.average_accuracy) <= 1e-9


def test_run_experiment_deterministic_and_resumable(tmp_path):
    args = {"num_classes": 6, "train_per_class": 6, "test_per_class": 4, "size": 16}
    base = toy_cfg(tmp_path, dataset_args=args)
    a = run_experiment(base.replace(name="a"), save=False)
    b = run_experiment(base.replace(name="b"), save=False)
    assert a.per_stage_accuracy == b.per_stage_accuracy
    c = base.replace(name="c")
    run_experiment(c, stop_after=2)
    assert ckpt.read_session(c.run_dir)["completed_stages"] == 2
    resumed = run_experiment(c)
    assert resumed.per_stage_accuracy == a.per_stage_accuracy
    assert resumed.per_task_til == a.per_task_til
    with pytest.raises(ConfigurationError):
        run_experiment(c.replace(seed=5))


def test_rescore_run_reproduces_stage_accuracy(tmp_path):
    cfg = toy_cfg(tmp_path, name="rs", dataset_args={"num_classes": 6, "train_per_class": 6,
                                                      "test_per_class": 4, "size": 16},
                  eval_strategies=["distance-map"])
    r = run_experiment(cfg)
    assert [x.accuracy for x in rescore_run(cfg.run_dir)] == r.per_stage_accuracy
    assert [x.accuracy for x in rescore_run(cfg.run_dir, "distance-map")] == \
        r.strategy_accuracy["distance-map"]


@pytest.mark.slow
def test_run_seeds_std_matches_brute_force(tmp_path):
    cfg = toy_cfg(tmp_path, name="seeds", dataset_args={"num_classes": 4, "train_per_class": 4,
                                                         "test_per_class": 3, "size": 16})
    summary = run_seeds(cfg, [0, 1, 2, 3, 4])
    finals = summary["final_accuracies"]
    assert len(finals) == 5
    assert abs(summary["final_accuracy_std"] - statistics.stdev(finals)) <= 1e-12
    assert (tmp_path / "seeds" / "seeds_summary.json").exists()


def test_finetune_baseline_runs(tmp_path):
    cfg = toy_cfg(tmp_path, name="ft", method="finetune",
                  dataset_args={"num_classes": 4, "train_per_class": 4, "test_per_class": 3, "size": 16})
    r = run_experiment(cfg)
    assert r.method == "finetune" and len(r.per_stage_accuracy) == 2


# ---------------------------------------------------------------- ablation


def test_sweep_parsing():
    assert Sweep.parse({"magnitude": None}).values == [0.95, 0.96, 0.97, 0.98]
    assert Sweep.parse({"beta": [0.7]}).key == "train.reuse_beta"
    with pytest.raises(ConfigurationError):
        Sweep.parse({"magnitude": None, "beta": None})
    with pytest.raises(ConfigurationError):
        Sweep.parse({"depth": [1]})
    with pytest.raises(ConfigurationError):
        Sweep.parse({"strategy": ["oracle"]})
    with pytest.raises(ConfigurationError):
        Sweep.parse({"magnitude": [0.9, 0.9]})


def test_single_arm_sweep_equals_run_experiment(tmp_path):
    args = {"num_classes": 4, "train_per_class": 6, "test_per_class": 4, "size": 16}
    base = toy_cfg(tmp_path, name="abl", dataset_args=args)
    rep = run_ablation(base, {"magnitude": [0.5]})
    direct = run_experiment(base.replace(name="direct"), save=False)
    assert rep.reports["magnitude=0.5"].per_stage_accuracy == direct.per_stage_accuracy
    out = tmp_path / "abl_ablate_magnitude"
    assert (out / "ablation.csv").exists() and (out / "ablation.png").exists()
    assert AblationReport.load(out).rows() == rep.rows()


def test_strategy_sweep_shares_one_training_run(tmp_path):
    args = {"num_classes": 4, "train_per_class": 6, "test_per_class": 4, "size": 16}
    base = toy_cfg(tmp_path, name="st", dataset_args=args)
    rep = run_ablation(base, {"strategy": None})
    direct = run_experiment(base.replace(name="d2", eval_strategies=["distance-map"]), save=False)
    assert rep.reports["strategy=confidence"].per_stage_accuracy == direct.per_stage_accuracy
    assert rep.reports["strategy=distance-map"].per_stage_accuracy == \
        direct.strategy_accuracy["distance-map"]
    ens = run_ablation(base.replace(name="en"), {"ensemble_w": [1.0, 0.8]})
    assert ens.reports["ensemble_w=1.0"].per_stage_accuracy == direct.per_stage_accuracy


# ---------------------------------------------------------------- report + cli


def test_report_and_cli(tmp_path, capsys):
    args = {"num_classes": 4, "train_per_class": 4, "test_per_class": 3, "size": 16}
    cfg = toy_cfg(tmp_path, name="cli", dataset_args=args)
    p = tmp_path / "cli.yaml"
    dump_config(cfg, p)
    assert cli_main(["train", "--config", str(p), "--set", "train.epochs=1"]) == 0
    run_dir = tmp_path / "cli"
    assert (run_dir / "report.json").exists()
    assert cli_main(["eval", "--run", str(run_dir), "--strategy", "oracle",
                     "--out", str(tmp_path / "e.json")]) == 0
    assert json.loads((tmp_path / "e.json").read_text())["strategy"] == "oracle"
    assert cli_main(["report", str(run_dir), "--out", str(tmp_path / "rep")]) == 0
    assert (tmp_path / "rep" / "summary.csv").exists()
    assert (tmp_path / "rep" / "cli" / "confusion.png").exists()
    assert cli_main(["ablate", "--config", str(p), "--axis", "magnitude", "--values", "0.5"]) == 0
    assert cli_main(["train", "--config", str(p), "--set", "dataset=cifar10"]) == 2
    out = capsys.readouterr().out
    assert "average" in out
    rows = summary_table({"cli": RunReport.load(run_dir)})
    assert rows[0]["run"] == "cli"
    assert len(render_run(run_dir, tmp_path / "r2")) == 3
