import json
from pathlib import Path

import numpy as np
import pytest
import torch
import yaml

from cimx.cli import main as cli_main
from cimx.config import ExperimentConfig, config_from_mapping, load_config
from cimx.data import generate_synthetic_dataset, ingest_dataset
from cimx.errors import ConfigError, DatasetError, InvalidSchedule
from cimx.experiment import RunResult, PhaseRow, build_schedule, run_experiment
from cimx.model import Branch, ModelSpec, build_model
from cimx.training import evaluate
from cimx.data import to_images

TINY = dict(
    protocol="lfs",
    phases=2,
    classes_total=4,
    image_size=32,
    channels=(8, 16, 24),
    synthetic_train_per_class=8,
    synthetic_test_per_class=4,
    memory_regime="growing",
    memory_budget=3.0,
    epochs_phase1=2,
    epochs_later=2,
    batch_size=16,
    bilevel_batch_size=6,
    task_lr=0.05,
    seed=0,
)


def tiny_config(**overrides) -> ExperimentConfig:
    merged = {**TINY, **overrides}
    return ExperimentConfig(**merged)


def test_schedule_lfs_equal_split():
    config = tiny_config(classes_total=10, phases=5)
    schedule = build_schedule(config, [f"c{i}" for i in range(10)])
    assert [len(p) for p in schedule.phases] == [2, 2, 2, 2, 2]
    assert schedule.seen_after(3) == 6


def test_schedule_lfh_base_half():
    config = tiny_config(protocol="lfh", classes_total=10, phases=5)
    schedule = build_schedule(config, [f"c{i}" for i in range(10)])
    assert [len(p) for p in schedule.phases] == [5, 1, 1, 1, 1, 1]


def test_schedule_lfh_n_includes_base():
    config = tiny_config(protocol="lfh", classes_total=12, phases=3, lfh_n_includes_base=True)
    schedule = build_schedule(config, [f"c{i}" for i in range(12)])
    assert [len(p) for p in schedule.phases] == [6, 3, 3]


def test_schedule_deterministic_order():
    config = tiny_config(classes_total=10, phases=5, class_order_seed=1993)
    names = [f"c{i}" for i in range(10)]
    s1 = build_schedule(config, names)
    s2 = build_schedule(config, names)
    assert s1.class_names == s2.class_names
    other = build_schedule(tiny_config(classes_total=10, phases=5, class_order_seed=7), names)
    assert other.class_names != s1.class_names


def test_schedule_divisibility_errors():
    with pytest.raises(InvalidSchedule):
        build_schedule(tiny_config(classes_total=10, phases=3), [f"c{i}" for i in range(10)])
    with pytest.raises(InvalidSchedule):
        build_schedule(
            tiny_config(protocol="lfh", classes_total=10, phases=4),
            [f"c{i}" for i in range(10)],
        )


def test_ingest_counts_and_determinism(tmp_path):
    root = generate_synthetic_dataset(tmp_path / "ds", classes=3, train_per_class=5,
                                      test_per_class=2, size=16, seed=1)
    ds1 = ingest_dataset(root, 16)
    assert sorted(ds1["train"]) == sorted(ds1["test"])
    assert sum(len(v) for v in ds1["train"].values()) == 15
    assert sum(len(v) for v in ds1["test"].values()) == 6
    ds2 = ingest_dataset(root, 16)
    for name in ds1["train"]:
        for a, b in zip(ds1["train"][name], ds2["train"][name]):
            np.testing.assert_array_equal(a, b)


def test_ingest_corrupt_file_names_path(tmp_path):
    root = generate_synthetic_dataset(tmp_path / "ds", classes=2, train_per_class=2,
                                      test_per_class=1, size=16, seed=1)
    bad = root / "train" / sorted(p.name for p in (root / "train").iterdir())[0] / "0000.png"
    bad.write_bytes(b"not a png")
    with pytest.raises(DatasetError) as err:
        ingest_dataset(root, 16)
    assert "0000.png" in str(err.value)


def test_ingest_missing_split(tmp_path):
    (tmp_path / "train" / "a").mkdir(parents=True)
    with pytest.raises(DatasetError):
        ingest_dataset(tmp_path, 16)


def test_evaluate_random_classifier_near_chance(rng):
    k = 4
    spec = ModelSpec(in_channels=3, channels=(6, 10), block_depth=1, image_size=16)
    from cimx.data import render_sample

    data = []
    for c in range(k):
        data.extend(to_images([render_sample(rng, c, 16) for _ in range(10)], c, f"c{c}"))
    accs = []
    for seed in range(30):
        state = build_model(spec, classes=k, seed=seed)
        with torch.no_grad():
            gen = torch.Generator().manual_seed(1000 + seed)
            state.net.classifier.weight.copy_(
                torch.randn(state.net.classifier.weight.shape, generator=gen)
            )
        accs.append(evaluate(state, data))
    n = len(data) * len(accs)
    se = np.sqrt(0.25 * (1 - 0.25) / n)
    assert abs(np.mean(accs) - 1 / k) <= 3 * se + 0.02


def test_config_round_trip(tmp_path):
    cfg = tiny_config()
    path = tmp_path / "c.yaml"
    from cimx.config import save_config

    save_config(cfg, path)
    back = load_config(path)
    assert back.to_dict() == cfg.to_dict()


def test_config_unknown_key_rejected(tmp_path):
    path = tmp_path / "c.yaml"
    path.write_text("protocol: lfs\nnot_a_real_key: 3\n")
    with pytest.raises(ConfigError) as err:
        load_config(path)
    assert "not_a_real_key" in str(err.value)


def test_config_nested_mapping_rejected(tmp_path):
    path = tmp_path / "c.yaml"
    path.write_text("training:\n  task_lr: 0.1\n")
    with pytest.raises(ConfigError):
        load_config(path)


def test_config_type_errors():
    with pytest.raises(ConfigError):
        config_from_mapping({"phases": "five"})
    with pytest.raises(ConfigError):
        config_from_mapping({"artifact_augment": 1})
    with pytest.raises(ConfigError):
        config_from_mapping({"protocol": "both"})


def test_config_channels_parsing():
    cfg = config_from_mapping({"channels": "8, 16"})
    assert cfg.channels == (8, 16)
    cfg = config_from_mapping({"channels": [8, 16, 24]})
    assert cfg.channels == (8, 16, 24)
    with pytest.raises(ConfigError):
        config_from_mapping({"channels": []})


def test_run_result_metrics():
    rows = [
        PhaseRow(1, 2, 0.9, 4, 1.0, 0.1),
        PhaseRow(2, 4, 0.7, 8, 1.0, 0.1),
    ]
    result = RunResult(rows=rows)
    assert result.average_accuracy == pytest.approx(0.8)
    assert result.last_accuracy == pytest.approx(0.7)


def test_run_experiment_baseline_and_artifacts(tmp_path):
    cfg = tiny_config(method="baseline", artifact_augment=False, output_dir=str(tmp_path / "run"))
    result = run_experiment(cfg)
    assert len(result.rows) == 2
    assert [r.seen_classes for r in result.rows] == [2, 4]
    out = tmp_path / "run"
    for name in ("config.yaml", "results.csv", "summary.json", "train_log.txt",
                 "phase-01.ckpt", "phase-02.ckpt"):
        assert (out / name).exists()
    assert (out / "exemplars" / "manifest.txt").exists()
    summary = json.loads((out / "summary.json").read_text())
    assert summary["status"] == "ok"
    assert summary["phases"] == 2
    # baseline exemplars cost exactly one unit each
    manifest = (out / "exemplars" / "manifest.txt").read_text()
    assert "cost=1.0" in manifest


def test_run_experiment_deterministic(tmp_path):
    cfg1 = tiny_config(method="bop", output_dir=str(tmp_path / "a"))
    cfg2 = tiny_config(method="bop", output_dir=str(tmp_path / "b"))
    run_experiment(cfg1)
    run_experiment(cfg2)
    a = (tmp_path / "a" / "results.csv").read_bytes()
    b = (tmp_path / "b" / "results.csv").read_bytes()
    assert a == b
    ma = (tmp_path / "a" / "exemplars" / "manifest.txt").read_text()
    mb = (tmp_path / "b" / "exemplars" / "manifest.txt").read_text()
    assert ma == mb


def test_cli_run_eval_preview_plot(tmp_path, capsys):
    cfg_path = tmp_path / "cfg.yaml"
    cfg = {**TINY, "method": "baseline", "artifact_augment": False,
           "channels": list(TINY["channels"]), "output_dir": str(tmp_path / "out")}
    cfg_path.write_text(yaml.safe_dump(cfg))

    assert cli_main(["run", "--config", str(cfg_path)]) == 0
    out = tmp_path / "out"
    assert (out / "results.csv").exists()

    data_dir = out / "synthetic-data"
    assert cli_main(["eval", "--checkpoint", str(out / "phase-02.ckpt"), "--data", str(data_dir)]) == 0
    captured = capsys.readouterr()
    assert "accuracy=" in captured.out

    image = next((data_dir / "train").rglob("*.png"))
    assert cli_main([
        "compress-preview", "--image", str(image), "--checkpoint", str(out / "phase-02.ckpt"),
        "--tau", "0.6", "--eta", "4.0", "--output", str(tmp_path / "prev"),
    ]) == 0
    for name in ("original.png", "soft_mask.png", "bbox_overlay.png", "compressed.png"):
        assert (tmp_path / "prev" / name).exists()

    assert cli_main(["plot", "--results", str(out)]) == 0
    assert (out / "accuracy_vs_phase.png").exists()
    assert (out / "cost_vs_phase.png").exists()


def test_cli_reports_categorized_errors(tmp_path, capsys):
    bad = tmp_path / "bad.yaml"
    bad.write_text("bogus_key: 1\n")
    code = cli_main(["run", "--config", str(bad)])
    captured = capsys.readouterr()
    assert code == 2
    assert "error: [ConfigError]" in captured.err
