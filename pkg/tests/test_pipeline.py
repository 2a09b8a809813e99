import json
import math

import numpy as np
import pytest
import yaml

from armsight.datasets import load_array, read_json
from armsight.errors import ConfigError, PrerequisiteError
from armsight.pipeline import (
    PipelineConfig,
    cmd_benchmark,
    cmd_evaluate,
    cmd_generate,
    cmd_predict,
    cmd_train_instance,
    cmd_train_localizer,
    config_from_mapping,
    dump_config,
    load_config,
)
from armsight.scenegen import ScenegenConfig


def micro_mapping(root):
    return {
        "master_seed": 0,
        "scenegen": {"width": 80, "height": 64, "max_robots": 2},
        "generation": {
            "train_count": 4,
            "test_count": 2,
            "background_count": 4,
            "background_size": [96, 120],
        },
        "localization": {
            "n_stages": 2, "features": 16, "stage_width": 16,
            "head_width": 8, "epochs": 2, "batch_size": 2,
        },
        "instance": {"hidden": 8, "head_width": 8, "epochs": 2, "batch_size": 2},
        "paths": {
            "train_dataset": str(root / "runs/train"),
            "test_dataset": str(root / "runs/test"),
            "localizer": str(root / "runs/localizer.pt"),
            "instance": str(root / "runs/instance.pt"),
            "predictions": str(root / "runs/predictions"),
            "metrics": str(root / "runs/metrics"),
            "benchmark": str(root / "runs/benchmark.json"),
        },
    }


def test_config_defaults():
    cfg = config_from_mapping({})
    assert cfg.master_seed == 0
    assert cfg.deterministic is True
    assert cfg.scenegen == ScenegenConfig()
    assert cfg.generation.train_count == 64
    assert cfg.localization.n_stages == 3
    assert cfg.instance.teacher == "predicted"
    assert cfg.evaluation.iou_threshold == 0.5
    assert cfg.paths.train_dataset == "runs/train"
    assert config_from_mapping(None) == PipelineConfig()


def test_config_rejects_unknown_keys():
    with pytest.raises(ConfigError, match="top-level"):
        config_from_mapping({"banana": 1})
    with pytest.raises(ConfigError, match="localization"):
        config_from_mapping({"localization": {"stages": 3}})
    with pytest.raises(ConfigError, match="scenegen"):
        config_from_mapping({"scenegen": {"widht": 80}})
    with pytest.raises(ConfigError, match="must be a mapping"):
        config_from_mapping({"instance": 7})
    with pytest.raises(ConfigError):
        config_from_mapping([1, 2])


def test_config_phi_hint_points_to_scenegen():
    with pytest.raises(ConfigError, match="scenegen section"):
        config_from_mapping({"evaluation": {"phi": 0.4}})


def test_config_rejects_invalid_scenegen_values():
    with pytest.raises(ConfigError):
        config_from_mapping({"scenegen": {"theta_vr": 2.0}})


def test_load_config_yaml_round_trip(tmp_path):
    mapping = micro_mapping(tmp_path)
    path = tmp_path / "config.yaml"
    path.write_text(yaml.safe_dump(mapping))
    cfg = load_config(path)
    assert cfg == config_from_mapping(mapping)
    # dump -> parse -> build gives the same config back
    again = config_from_mapping(yaml.safe_load(dump_config(cfg)))
    assert again == cfg


def test_load_config_missing_or_broken(tmp_path):
    with pytest.raises(ConfigError, match="does not exist"):
        load_config(tmp_path / "nope.yaml")
    bad = tmp_path / "bad.yaml"
    bad.write_text("a: [unclosed")
    with pytest.raises(ConfigError, match="cannot parse"):
        load_config(bad)


def test_generate_uses_split_seed_and_counts(tmp_path):
    cfg = config_from_mapping(micro_mapping(tmp_path))
    train = cmd_generate(cfg, split="train")
    test = cmd_generate(cfg, split="test")
    assert train["count"] == 4
    assert test["count"] == 2
    assert train["master_seed"] == 0
    assert test["master_seed"] == 10007
    assert (tmp_path / "runs/train/run.json").exists()
    run = read_json(tmp_path / "runs/train/run.json")
    assert run["command"] == "generate:train"
    assert "config" in run and "code_version" in run
    # count override
    small = cmd_generate(cfg, split="train", count=2)
    assert small["count"] == 2


def test_prerequisites_enforced(tmp_path):
    cfg = config_from_mapping(micro_mapping(tmp_path))
    with pytest.raises(PrerequisiteError, match="generate"):
        cmd_train_localizer(cfg)
    cmd_generate(cfg, split="train", count=2)
    with pytest.raises(PrerequisiteError, match="train-localizer"):
        cmd_train_instance(cfg)
    with pytest.raises(PrerequisiteError):
        cmd_predict(cfg, split="train")
    with pytest.raises(PrerequisiteError, match="predict"):
        cmd_evaluate(cfg, split="train")


def test_unknown_split_rejected(tmp_path):
    cfg = config_from_mapping(micro_mapping(tmp_path))
    with pytest.raises(ConfigError, match="split"):
        cmd_generate(cfg, split="validation")


def test_full_micro_pipeline(tmp_path):
    cfg = config_from_mapping(micro_mapping(tmp_path))
    cmd_generate(cfg, split="train")
    cmd_generate(cfg, split="test")

    hist_loc = cmd_train_localizer(cfg)
    assert len(hist_loc["epoch_loss"]) == 2
    assert (tmp_path / "runs/localizer.pt").exists()
    assert (tmp_path / "runs/localizer.history.json").exists()

    hist_inst = cmd_train_instance(cfg)
    assert len(hist_inst["epoch_loss"]) == 2
    assert (tmp_path / "runs/instance.pt").exists()

    result = cmd_predict(cfg, split="test", overlays=True)
    assert result["scenes"] == 2
    pred_root = tmp_path / "runs/predictions"
    manifest = read_json(pred_root / "manifest.json")
    assert manifest["scene_ids"] == ["000000", "000001"]
    for sid in manifest["scene_ids"]:
        det = read_json(pred_root / sid / "detections.json")
        assert det["scene_id"] == sid
        assert det["count"] == len(det["robots"])
        for robot in det["robots"]:
            assert len(robot["joints"]) == 6
            for j in robot["joints"]:
                if not j["found"]:
                    assert j["row"] is None and j["col"] is None
        masks = load_array(pred_root / sid / "masks.bin")
        assert masks.ndim == 3 and masks.shape[1:] == (64, 80)
        depth = load_array(pred_root / sid / "depth.bin")
        assert depth.shape == (64, 80)
        assert (pred_root / sid / "overlay.png").exists()

    results = cmd_evaluate(cfg, split="test")
    metrics_dir = tmp_path / "runs/metrics"
    assert (metrics_dir / "metrics.csv").exists()
    report = read_json(metrics_dir / "report.json")
    assert report["scenes"] == 2
    for key in ("ap", "count_accuracy", "misses", "spurious", "joint_recall",
                "pixel_error", "depth_error_cm"):
        assert key in report
    assert results["scenes"] == 2

    # evaluation output is byte-stable given fixed predictions
    first = (metrics_dir / "metrics.csv").read_bytes()
    cmd_evaluate(cfg, split="test")
    assert (metrics_dir / "metrics.csv").read_bytes() == first


def test_benchmark_report(tmp_path):
    cfg = config_from_mapping(micro_mapping(tmp_path))
    report = cmd_benchmark(cfg, repeats=20)
    out = tmp_path / "runs/benchmark.json"
    assert out.exists()
    assert (tmp_path / "runs/benchmark.csv").exists()
    on_disk = read_json(out)
    assert on_disk == report
    assert set(report["tasks"]) == {
        "rasterize_scene", "localizer_forward", "nms_decode", "log_decode"
    }
    for task in report["tasks"].values():
        assert task["repeats"] >= 20
        assert task["mean_ms"] > 0
        assert task["min_ms"] <= task["mean_ms"]
    assert isinstance(report["nms_faster_than_log"], bool)
    hw = report["hardware"]
    assert hw["cpu_count"] >= 1
    assert "platform" in hw and "torch" in hw
