"""YAML-backed pipeline configuration and the end-to-end stage runners.

One config file drives every stage.  Validation is strict: unknown keys
anywhere are rejected so typos cannot silently fall back to defaults, and
the belief gating level phi has a single home (the scenegen section) from
which training supervision and evaluation both read.  Every stage writes a
run manifest (config snapshot, seed, code version) beside its outputs;
manifests and metric files contain no timestamps, so reruns are
byte-comparable.
"""

import dataclasses
import json
from dataclasses import dataclass, field, fields
from importlib.metadata import version as pkg_version
from pathlib import Path

import numpy as np
import torch
import yaml

from . import metrics as metrics_mod
from .datasets import (
    Dataset,
    generate_dataset,
    load_array,
    procedural_background_spec,
    read_json,
    save_array,
    write_json,
)
from .decoding import decode_scene
from .errors import ConfigError, DataError, PrerequisiteError
from .metrics import SceneRecord, evaluate_scenes, render_overlay, write_metrics_csv
from .models import instance as inst
from .models import localization as loc
from .scenegen import ScenegenConfig
from . import benchmark as benchmark_mod


@dataclass
class PathsSection:
    train_dataset: str = "runs/train"
    test_dataset: str = "runs/test"
    localizer: str = "runs/localizer.pt"
    instance: str = "runs/instance.pt"
    predictions: str = "runs/predictions"
    metrics: str = "runs/metrics"
    benchmark: str = "runs/benchmark.json"


@dataclass
class GenerationSection:
    train_count: int = 64
    test_count: int = 16
    train_theme: str = "train"
    test_theme: str = "test"
    background_count: int = 32
    background_size: list = field(default_factory=lambda: [240, 320])
    background_dir: str = None
    write_beliefs: bool = False
    test_seed_offset: int = 10007
    jobs: int = 1


@dataclass
class LocalizationSection:
    n_stages: int = 3
    features: int = 64
    stage_width: int = 64
    head_width: int = 32
    epochs: int = 30
    batch_size: int = 8
    lr: float = 1e-3
    schedule: str = "cosine"


@dataclass
class InstanceSection:
    hidden: int = 64
    head_width: int = 32
    epochs: int = 30
    batch_size: int = 4
    lr: float = 1e-3
    schedule: str = "cosine"
    teacher: str = "predicted"
    stop_fraction: float = 0.05
    mask_threshold: float = 0.5


@dataclass
class EvaluationSection:
    iou_threshold: float = 0.5
    peak_threshold: float = 0.3
    window: int = 5
    method: str = "nms"
    box_activation: float = 0.6
    near_far_split_m: float = 5.0


@dataclass
class PipelineConfig:
    master_seed: int = 0
    deterministic: bool = True
    device: str = "cpu"
    scenegen: ScenegenConfig = field(default_factory=ScenegenConfig)
    generation: GenerationSection = field(default_factory=GenerationSection)
    localization: LocalizationSection = field(default_factory=LocalizationSection)
    instance: InstanceSection = field(default_factory=InstanceSection)
    evaluation: EvaluationSection = field(default_factory=EvaluationSection)
    paths: PathsSection = field(default_factory=PathsSection)

    def snapshot(self) -> dict:
        d = dataclasses.asdict(self)
        d["scenegen"] = self.scenegen.to_dict()
        return d


_SECTIONS = {
    "generation": GenerationSection,
    "localization": LocalizationSection,
    "instance": InstanceSection,
    "evaluation": EvaluationSection,
    "paths": PathsSection,
}
_SCALARS = {"master_seed", "deterministic", "device"}


def _build_section(name: str, cls, mapping: dict):
    allowed = {f.name for f in fields(cls)}
    unknown = set(mapping) - allowed
    if unknown:
        hint = ""
        if "phi" in unknown:
            hint = " (phi is configured once, in the scenegen section)"
        raise ConfigError(
            f"unknown key(s) in section '{name}': {sorted(unknown)}{hint}"
        )
    return cls(**mapping)


def config_from_mapping(mapping: dict) -> PipelineConfig:
    if mapping is None:
        mapping = {}
    if not isinstance(mapping, dict):
        raise ConfigError("top-level config must be a mapping")
    known = _SCALARS | set(_SECTIONS) | {"scenegen"}
    unknown = set(mapping) - known
    if unknown:
        raise ConfigError(f"unknown top-level key(s): {sorted(unknown)}")
    kwargs = {}
    for key in _SCALARS:
        if key in mapping:
            kwargs[key] = mapping[key]
    if "scenegen" in mapping:
        sg = mapping["scenegen"]
        if not isinstance(sg, dict):
            raise ConfigError("scenegen section must be a mapping")
        allowed = {f.name for f in fields(ScenegenConfig)}
        bad = set(sg) - allowed
        if bad:
            raise ConfigError(f"unknown key(s) in section 'scenegen': {sorted(bad)}")
        try:
            kwargs["scenegen"] = ScenegenConfig.from_dict(sg)
        except (TypeError, ValueError) as e:
            raise ConfigError(f"invalid scenegen section: {e}") from e
    for name, cls in _SECTIONS.items():
        if name in mapping:
            section = mapping[name]
            if not isinstance(section, dict):
                raise ConfigError(f"section '{name}' must be a mapping")
            kwargs[name] = _build_section(name, cls, section)
    try:
        return PipelineConfig(**kwargs)
    except (TypeError, ValueError) as e:
        raise ConfigError(str(e)) from e


def load_config(path) -> PipelineConfig:
    p = Path(path)
    if not p.exists():
        raise ConfigError(f"config file {p} does not exist")
    with open(p, "r", encoding="utf-8") as f:
        try:
            mapping = yaml.safe_load(f)
        except yaml.YAMLError as e:
            raise ConfigError(f"cannot parse {p}: {e}") from e
    return config_from_mapping(mapping)


def dump_config(cfg: PipelineConfig) -> str:
    return yaml.safe_dump(cfg.snapshot(), sort_keys=True)


def write_run_manifest(path: Path, command: str, cfg: PipelineConfig) -> None:
    write_json(
        path,
        {
            "command": command,
            "code_version": pkg_version("armsight"),
            "master_seed": cfg.master_seed,
            "config": cfg.snapshot(),
        },
    )


def _dataset_paths(cfg: PipelineConfig, split: str):
    if split == "train":
        return Path(cfg.paths.train_dataset)
    if split == "test":
        return Path(cfg.paths.test_dataset)
    raise ConfigError(f"unknown split {split!r} (expected 'train' or 'test')")


def _require_dataset(cfg: PipelineConfig, split: str) -> Dataset:
    root = _dataset_paths(cfg, split)
    if not (root / "manifest.json").exists():
        raise PrerequisiteError(
            f"dataset {root} does not exist; run 'generate --split {split}' first"
        )
    return Dataset(root)


def _require_file(path: Path, what: str, hint: str) -> Path:
    if not Path(path).exists():
        raise PrerequisiteError(f"{what} {path} does not exist; {hint}")
    return Path(path)


def cmd_generate(cfg: PipelineConfig, split: str = "train", count: int = None,
                 jobs: int = None, log=None) -> dict:
    gen = cfg.generation
    root = _dataset_paths(cfg, split)
    if split == "train":
        seed = cfg.master_seed
        theme = gen.train_theme
        n = count if count is not None else gen.train_count
    else:
        seed = cfg.master_seed + gen.test_seed_offset
        theme = gen.test_theme
        n = count if count is not None else gen.test_count
    if gen.background_dir:
        background = {"kind": "directory", "path": gen.background_dir}
    else:
        background = procedural_background_spec(
            theme, gen.background_count, tuple(gen.background_size)
        )
    if log is not None:
        log.info("generating %d scenes into %s (seed %d)", n, root, seed)
    manifest = generate_dataset(
        cfg.scenegen, root, n, seed, background=background,
        jobs=jobs if jobs is not None else gen.jobs,
        write_beliefs=gen.write_beliefs,
    )
    write_run_manifest(root / "run.json", f"generate:{split}", cfg)
    return manifest


def _stack_images(ds: Dataset):
    samples = list(ds)
    images = np.stack([s.image for s in samples])
    return samples, images


def cmd_train_localizer(cfg: PipelineConfig, log=None) -> dict:
    ds = _require_dataset(cfg, "train")
    samples, images = _stack_images(ds)
    sec = cfg.localization
    train_cfg = loc.TrainConfig(
        epochs=sec.epochs, batch_size=sec.batch_size, lr=sec.lr,
        schedule=sec.schedule, seed=cfg.master_seed,
        deterministic=cfg.deterministic, device=cfg.device,
    )
    # Seed before constructing the network so the initial weights depend
    # only on the config, not on ambient RNG state.
    loc.apply_determinism(train_cfg)
    net = loc.LocalizationNet(
        n_joints=cfg.scenegen.robot.joint_count, features=sec.features,
        n_stages=sec.n_stages, stage_width=sec.stage_width,
        head_width=sec.head_width,
    )
    targets = loc.build_targets(cfg.scenegen, samples)
    history = loc.train_localizer(
        net, loc.images_to_tensor(images), targets, train_cfg, log=log
    )
    out = Path(cfg.paths.localizer)
    out.parent.mkdir(parents=True, exist_ok=True)
    loc.save_localizer(net, out)
    write_json(out.with_suffix(".history.json"), history)
    write_run_manifest(out.with_suffix(".run.json"), "train-localizer", cfg)
    return history


def cmd_train_instance(cfg: PipelineConfig, log=None) -> dict:
    ds = _require_dataset(cfg, "train")
    loc_path = _require_file(
        Path(cfg.paths.localizer), "localizer checkpoint",
        "run 'train-localizer' first",
    )
    loc_net = loc.load_localizer(loc_path)
    samples, images = _stack_images(ds)
    sec = cfg.instance
    coarse = None
    if sec.teacher == "ground-truth":
        targets = loc.build_targets(cfg.scenegen, samples)
        coarse = torch.cat(
            [targets["beliefs_low"], targets["depth_low"][:, None]], dim=1
        )
    elif sec.teacher != "predicted":
        raise ConfigError(f"unknown teacher mode {sec.teacher!r}")
    x = inst.make_instance_inputs(loc_net, loc.images_to_tensor(images), coarse)
    train_cfg = loc.TrainConfig(
        epochs=sec.epochs, batch_size=sec.batch_size, lr=sec.lr,
        schedule=sec.schedule, seed=cfg.master_seed,
        deterministic=cfg.deterministic, device=cfg.device,
    )
    # Seed before constructing the network so the initial weights depend
    # only on the config, not on ambient RNG state.
    loc.apply_determinism(train_cfg)
    net = inst.InstanceNet(
        in_channels=x.shape[1], hidden=sec.hidden, head_width=sec.head_width
    )
    masks = [np.asarray(s.masks, dtype=np.float32) for s in samples]
    history = inst.train_instance(net, x, masks, train_cfg, log=log)
    out = Path(cfg.paths.instance)
    out.parent.mkdir(parents=True, exist_ok=True)
    inst.save_instance(net, out)
    write_json(out.with_suffix(".history.json"), history)
    write_run_manifest(out.with_suffix(".run.json"), "train-instance", cfg)
    return history


def _joint_to_dict(est) -> dict:
    return {
        "joint": est.joint,
        "found": est.found,
        "row": est.row if est.found else None,
        "col": est.col if est.found else None,
        "score": est.score,
        "ambiguous": est.ambiguous,
        "has_depth": est.has_depth,
        "unit_depth": est.unit_depth if est.has_depth else None,
        "z": est.z if est.has_depth else None,
        "point": list(est.point) if est.point is not None else None,
    }


def cmd_predict(cfg: PipelineConfig, split: str = "test",
                overlays: bool = False, log=None) -> dict:
    ds = _require_dataset(cfg, split)
    loc_net = loc.load_localizer(
        _require_file(Path(cfg.paths.localizer), "localizer checkpoint",
                      "run 'train-localizer' first")
    )
    inst_net = inst.load_instance(
        _require_file(Path(cfg.paths.instance), "instance checkpoint",
                      "run 'train-instance' first")
    )
    if cfg.deterministic:
        torch.set_num_threads(1)
    out_root = Path(cfg.paths.predictions)
    out_root.mkdir(parents=True, exist_ok=True)
    intr = cfg.scenegen.intrinsics()
    transform = cfg.scenegen.depth_transform()
    sec = cfg.evaluation
    max_steps = cfg.scenegen.max_robots + 2

    scene_ids = []
    for i in range(len(ds)):
        sample = ds.load(i)
        images = loc.images_to_tensor(sample.image)
        beliefs, depth = loc.predict_maps(loc_net, images)
        x = inst.make_instance_inputs(loc_net, images)
        pred = inst.predict_instances(
            inst_net, x, max_steps, cfg.instance.stop_fraction,
            cfg.instance.mask_threshold,
        )[0]
        robots = decode_scene(
            beliefs[0], depth[0], pred.masks, pred.confidences, intr,
            transform, threshold=sec.peak_threshold, window=sec.window,
            method=sec.method, sigma_log=cfg.scenegen.sigma,
            mask_threshold=cfg.instance.mask_threshold,
        )
        scene_dir = out_root / sample.scene_id
        scene_dir.mkdir(parents=True, exist_ok=True)
        write_json(
            scene_dir / "detections.json",
            {
                "scene_id": sample.scene_id,
                "count": len(robots),
                "steps_run": pred.steps_run,
                "robots": [
                    {
                        "confidence": r.confidence,
                        "joints": [_joint_to_dict(j) for j in r.joints],
                    }
                    for r in robots
                ],
            },
        )
        save_array(scene_dir / "masks.bin", pred.masks)
        save_array(scene_dir / "depth.bin", depth[0])
        if overlays:
            render_overlay(sample.image, robots).save(scene_dir / "overlay.png")
        scene_ids.append(sample.scene_id)
        if log is not None and (i + 1) % 10 == 0:
            log.info("predicted %d / %d scenes", i + 1, len(ds))

    write_json(
        out_root / "manifest.json",
        {"split": split, "scene_ids": scene_ids, "dataset": str(ds.root)},
    )
    write_run_manifest(out_root / "run.json", f"predict:{split}", cfg)
    return {"scenes": len(scene_ids), "output": str(out_root)}


def cmd_evaluate(cfg: PipelineConfig, split: str = "test", log=None) -> dict:
    ds = _require_dataset(cfg, split)
    pred_root = Path(cfg.paths.predictions)
    _require_file(pred_root / "manifest.json", "predictions",
                  "run 'predict' first")
    pred_manifest = read_json(pred_root / "manifest.json")
    missing = [s for s in ds.scene_ids if s not in set(pred_manifest["scene_ids"])]
    if missing:
        raise DataError(
            f"predictions missing for {len(missing)} scene(s), e.g. {missing[0]}"
        )
    sec = cfg.evaluation
    transform = cfg.scenegen.depth_transform()
    n_joints = cfg.scenegen.robot.joint_count

    records = []
    for i in range(len(ds)):
        sample = ds.load(i)
        scene_dir = pred_root / sample.scene_id
        det = read_json(scene_dir / "detections.json")
        pred_masks = load_array(scene_dir / "masks.bin")
        pred_depth = load_array(scene_dir / "depth.bin")
        confidences = np.asarray(
            [r["confidence"] for r in det["robots"]], dtype=np.float64
        )
        pred_joints = []
        for r in det["robots"]:
            arr = np.full((n_joints, 2), np.nan)
            for j in r["joints"]:
                if j["found"]:
                    arr[j["joint"]] = (j["row"], j["col"])
            pred_joints.append(arr)
        records.append(
            SceneRecord(
                scene_id=sample.scene_id,
                gt_masks=sample.masks,
                pred_masks=pred_masks,
                confidences=confidences,
                gt_depth=sample.depth,
                pred_depth=pred_depth,
                gt_joints_2d=sample.joints_2d,
                gt_valid=sample.in_frame & ~sample.occluded,
                pred_joints=pred_joints,
            )
        )
    results = evaluate_scenes(
        records, transform, iou_threshold=sec.iou_threshold,
        box_activation=sec.box_activation, split_m=sec.near_far_split_m,
    )
    out_root = Path(cfg.paths.metrics)
    out_root.mkdir(parents=True, exist_ok=True)
    write_metrics_csv(out_root / "metrics.csv", results)
    write_json(out_root / "report.json", results)
    write_run_manifest(out_root / "run.json", f"evaluate:{split}", cfg)
    if log is not None:
        log.info("ap=%.4f count_accuracy=%.4f", results["ap"],
                 results["count_accuracy"])
    return results


def cmd_benchmark(cfg: PipelineConfig, repeats: int = None, log=None) -> dict:
    report = benchmark_mod.run_benchmark(
        cfg.scenegen,
        repeats=repeats if repeats is not None else benchmark_mod.MIN_REPEATS,
        seed=cfg.master_seed,
    )
    out = Path(cfg.paths.benchmark)
    out.parent.mkdir(parents=True, exist_ok=True)
    write_json(out, report)
    rows = [
        (name, t["repeats"], t["mean_ms"], t["std_ms"], t["min_ms"])
        for name, t in sorted(report["tasks"].items())
    ]
    metrics_mod.write_csv(
        out.with_suffix(".csv"),
        ["task", "repeats", "mean_ms", "std_ms", "min_ms"], rows,
    )
    if log is not None:
        for name, _, mean, _, _ in rows:
            log.info("%s: %.3f ms", name, mean)
    return report
