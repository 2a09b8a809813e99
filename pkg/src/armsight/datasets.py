"""On-disk dataset format and deterministic generation.

Layout of a dataset directory::

    manifest.json                 dataset-level metadata (config, seed, ids)
    scenes/<id>/image.png         composited uint8 RGB image
    scenes/<id>/meta.json         scene spec, joint geometry, joint flags
    scenes/<id>/masks.png         instance masks, one image channel each
    scenes/<id>/depth.bin         sparse unit-depth target, float32
    scenes/<id>/beliefs.bin       optional belief maps (regenerable)

The .bin files are numpy containers written with an explicit little-endian
float32 dtype.  Belief maps can always be regenerated bit-exactly from the
stored 2D joints and the configured kernel width, so storing them is
optional.  All generation is keyed by (master_seed, scene_index), which
makes output bytes independent of worker count and generation order.
"""

import json
import logging
import multiprocessing
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image

from .errors import DataError
from .raster import BackgroundPool, composite, rasterize_scene
from .scenegen import (
    GroundTruth,
    SceneSpec,
    ScenegenConfig,
    Z_NEAR,
    belief_maps,
    render_ground_truth,
    sample_scene,
    scene_rng,
)

log = logging.getLogger(__name__)

MANIFEST_FORMAT = "armsight-dataset-v1"

# Image modes able to carry one instance mask per channel.
_MASK_MODES = {1: "L", 2: "LA", 3: "RGB", 4: "RGBA"}


def scene_id_for(index: int) -> str:
    return f"{index:06d}"


def write_json(path: Path, obj) -> None:
    """Canonical JSON writer: sorted keys, no volatile fields."""
    with open(path, "w", encoding="utf-8") as f:
        json.dump(obj, f, sort_keys=True, indent=2)
        f.write("\n")


def read_json(path: Path):
    with open(path, "r", encoding="utf-8") as f:
        return json.load(f)


def save_array(path: Path, arr: np.ndarray) -> None:
    """Write a float32 array in the npy container, forced little-endian."""
    with open(path, "wb") as f:
        np.save(f, np.ascontiguousarray(arr, dtype="<f4"))


def load_array(path: Path) -> np.ndarray:
    with open(path, "rb") as f:
        return np.load(f).astype(np.float32, copy=False)


def encode_masks(masks: np.ndarray) -> Image.Image:
    """Pack (R, H, W) boolean masks into the channels of one image."""
    r = masks.shape[0]
    if r not in _MASK_MODES:
        raise DataError(
            f"can encode 1..4 instance masks per scene, got {r}"
        )
    stacked = (np.moveaxis(masks, 0, -1).astype(np.uint8)) * 255
    if r == 1:
        stacked = stacked[..., 0]
    return Image.fromarray(stacked, mode=_MASK_MODES[r])


def decode_masks(image: Image.Image) -> np.ndarray:
    arr = np.asarray(image)
    if arr.ndim == 2:
        arr = arr[..., None]
    return np.moveaxis(arr > 127, -1, 0)


@dataclass
class SceneSample:
    """One fully loaded scene."""

    scene_id: str
    image: np.ndarray          # (H, W, 3) uint8
    beliefs: np.ndarray        # (J, H, W) float32
    depth: np.ndarray          # (H, W) float32
    masks: np.ndarray          # (R, H, W) bool
    spec: SceneSpec
    joints_2d: np.ndarray      # (R, J, 2)
    joints_3d: np.ndarray      # (R, J, 3)
    in_frame: np.ndarray       # (R, J) bool
    occluded: np.ndarray       # (R, J) bool
    depth_clamped: np.ndarray  # (R, J) bool

    @property
    def robot_count(self) -> int:
        return self.masks.shape[0]


def background_pool_from_spec(bg: dict) -> BackgroundPool:
    """Build the pool described by a manifest background entry."""
    kind = bg.get("kind")
    if kind == "procedural":
        return BackgroundPool.procedural(
            theme=bg["theme"], count=bg["count"], size=tuple(bg["size"])
        )
    if kind == "directory":
        return BackgroundPool.from_directory(bg["path"])
    raise DataError(f"unknown background kind {kind!r}")


def procedural_background_spec(theme: str, count: int = 32, size=(240, 320)) -> dict:
    return {"kind": "procedural", "theme": theme, "count": count, "size": list(size)}


def _scene_meta(index: int, spec: SceneSpec, gt: GroundTruth) -> dict:
    return {
        "scene_id": scene_id_for(index),
        "scene_index": index,
        "spec": spec.to_dict(),
        "robot_count": int(gt.masks.shape[0]),
        "joints_2d": gt.joints_2d.tolist(),
        "joints_3d": gt.joints_3d.tolist(),
        "in_frame": gt.in_frame.tolist(),
        "occluded": gt.occluded.tolist(),
        "depth_clamped": gt.depth_clamped.tolist(),
    }


def write_scene(scene_dir: Path, index: int, image: np.ndarray, gt: GroundTruth,
                spec: SceneSpec, write_beliefs: bool) -> None:
    scene_dir.mkdir(parents=True, exist_ok=True)
    Image.fromarray(image).save(scene_dir / "image.png")
    write_json(scene_dir / "meta.json", _scene_meta(index, spec, gt))
    if gt.masks.shape[0] > 0:
        encode_masks(gt.masks).save(scene_dir / "masks.png")
    save_array(scene_dir / "depth.bin", gt.depth)
    if write_beliefs:
        save_array(scene_dir / "beliefs.bin", gt.beliefs)


def generate_scene_files(index: int, cfg: ScenegenConfig, pool: BackgroundPool,
                         master_seed: int, out_root: Path, write_beliefs: bool) -> str:
    """Generate and persist one scene, fully determined by (seed, index)."""
    rng = scene_rng(master_seed, index)
    spec = sample_scene(cfg, rng)
    retries = 0
    while spec.camera.radius <= Z_NEAR:
        retries += 1
        if retries > 32:
            raise DataError(f"scene {index}: cannot sample a usable camera")
        log.info("scene %d: resampling degenerate camera", index)
        spec = sample_scene(cfg, rng)
    gt, rasterization = render_ground_truth(cfg, spec)
    image = composite(cfg, spec, rasterization, pool, rng)
    write_scene(out_root / "scenes" / scene_id_for(index), index, image, gt,
                spec, write_beliefs)
    return scene_id_for(index)


_worker_state: dict = {}


def _init_worker(cfg_dict, bg_spec, master_seed, out_root, write_beliefs):
    _worker_state["cfg"] = ScenegenConfig.from_dict(cfg_dict)
    _worker_state["pool"] = background_pool_from_spec(bg_spec)
    _worker_state["seed"] = master_seed
    _worker_state["root"] = Path(out_root)
    _worker_state["beliefs"] = write_beliefs


def _worker_generate(index: int) -> str:
    return generate_scene_files(
        index,
        _worker_state["cfg"],
        _worker_state["pool"],
        _worker_state["seed"],
        _worker_state["root"],
        _worker_state["beliefs"],
    )


def generate_dataset(cfg: ScenegenConfig, out_dir, count: int, master_seed: int,
                     background: dict = None, jobs: int = 1,
                     write_beliefs: bool = False) -> dict:
    """Generate a dataset directory and return its manifest.

    Scene contents depend only on (master_seed, scene_index), never on the
    worker count, so two runs with the same arguments are byte-identical.
    """
    if count < 1:
        raise DataError("dataset must contain at least one scene")
    if master_seed < 0:
        raise DataError("master seed must be non-negative")
    out_root = Path(out_dir)
    out_root.mkdir(parents=True, exist_ok=True)
    if background is None:
        background = procedural_background_spec("train")

    indices = list(range(count))
    if jobs > 1:
        with multiprocessing.Pool(
            processes=jobs,
            initializer=_init_worker,
            initargs=(cfg.to_dict(), background, master_seed, str(out_root),
                      write_beliefs),
        ) as pool:
            ids = pool.map(_worker_generate, indices, chunksize=4)
    else:
        bg_pool = background_pool_from_spec(background)
        ids = [
            generate_scene_files(i, cfg, bg_pool, master_seed, out_root,
                                 write_beliefs)
            for i in indices
        ]

    manifest = {
        "format": MANIFEST_FORMAT,
        "config": cfg.to_dict(),
        "master_seed": master_seed,
        "count": count,
        "scene_ids": sorted(ids),
        "background": background,
        "has_beliefs": write_beliefs,
    }
    write_json(out_root / "manifest.json", manifest)
    return manifest


class Dataset:
    """Read access to a generated dataset directory."""

    def __init__(self, root):
        self.root = Path(root)
        manifest_path = self.root / "manifest.json"
        if not manifest_path.exists():
            raise DataError(f"{self.root} has no manifest.json")
        self.manifest = read_json(manifest_path)
        if self.manifest.get("format") != MANIFEST_FORMAT:
            raise DataError(
                f"unsupported dataset format {self.manifest.get('format')!r}"
            )
        self.config = ScenegenConfig.from_dict(self.manifest["config"])
        self.scene_ids = list(self.manifest["scene_ids"])

    def __len__(self) -> int:
        return len(self.scene_ids)

    def __iter__(self):
        for i in range(len(self)):
            yield self.load(i)

    def load(self, index: int) -> SceneSample:
        scene_id = self.scene_ids[index]
        scene_dir = self.root / "scenes" / scene_id
        meta = read_json(scene_dir / "meta.json")
        image = np.asarray(Image.open(scene_dir / "image.png").convert("RGB"))
        depth = load_array(scene_dir / "depth.bin")

        robot_count = int(meta["robot_count"])
        if robot_count > 0:
            masks = decode_masks(Image.open(scene_dir / "masks.png"))
        else:
            masks = np.zeros((0, self.config.height, self.config.width), dtype=bool)
        if masks.shape[0] != robot_count:
            raise DataError(
                f"scene {scene_id}: mask count {masks.shape[0]} does not match "
                f"meta robot_count {robot_count}"
            )

        joints_2d = np.asarray(meta["joints_2d"], dtype=np.float64)
        joints_3d = np.asarray(meta["joints_3d"], dtype=np.float64)
        joints_2d = joints_2d.reshape(robot_count, self.config.robot.joint_count, 2)
        joints_3d = joints_3d.reshape(robot_count, self.config.robot.joint_count, 3)

        beliefs_path = scene_dir / "beliefs.bin"
        if beliefs_path.exists():
            beliefs = load_array(beliefs_path)
        else:
            beliefs = regenerate_beliefs(self.config, joints_2d, joints_3d)

        expected = (self.config.height, self.config.width)
        if image.shape[:2] != expected or depth.shape != expected:
            raise DataError(f"scene {scene_id}: array shapes do not match config")

        def flags(key):
            return np.asarray(meta[key], dtype=bool).reshape(
                robot_count, self.config.robot.joint_count
            )

        return SceneSample(
            scene_id=scene_id,
            image=image,
            beliefs=beliefs,
            depth=depth,
            masks=masks,
            spec=SceneSpec.from_dict(meta["spec"]),
            joints_2d=joints_2d,
            joints_3d=joints_3d,
            in_frame=flags("in_frame"),
            occluded=flags("occluded"),
            depth_clamped=flags("depth_clamped"),
        )


def regenerate_beliefs(cfg: ScenegenConfig, joints_2d: np.ndarray,
                       joints_3d: np.ndarray) -> np.ndarray:
    """Rebuild belief maps exactly as the generator produced them.

    Joints contribute whenever they sit in front of the near plane, which
    is recomputable from the stored camera-frame z.
    """
    front = joints_3d[..., 2] > Z_NEAR
    return belief_maps(joints_2d, front, (cfg.height, cfg.width), cfg.sigma)


def make_splits(scene_ids, test_fraction: float = 0.2):
    """Deterministic contiguous split of already-randomized scene ids."""
    if not 0.0 < test_fraction < 1.0:
        raise ValueError("test_fraction must lie strictly inside (0, 1)")
    n_test = max(1, int(round(len(scene_ids) * test_fraction)))
    n_train = len(scene_ids) - n_test
    if n_train < 1:
        raise ValueError("split leaves no training scenes")
    return list(scene_ids[:n_train]), list(scene_ids[n_train:])
