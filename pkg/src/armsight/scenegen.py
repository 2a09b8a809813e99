"""Randomized multi-robot scene sampling and exact ground-truth rendering.

A scene is sampled as a compact :class:`SceneSpec` (every random choice is
recorded), rasterized to color / depth / per-robot masks, and expanded into
dense training targets: per-joint-type belief maps, a sparse unit-range
depth map supported on discs around joints, and binary instance masks.
"""

import logging
import math
from dataclasses import dataclass, field, asdict

import numpy as np

from .geometry import (
    CameraIntrinsics,
    CameraPose,
    InverseDepthTransform,
    is_in_frame,
    project_points,
    sample_camera_pose,
)
from .kinematics import RobotModel, forward_kinematics
from . import raster

log = logging.getLogger(__name__)

# Joints closer than this to the camera plane cannot be projected and are
# flagged out-of-frame.
Z_NEAR = 0.05

# Floor for unit depth written into ground-truth discs.  Joints at or beyond
# z_max would otherwise produce exactly 0 inside the supervised region,
# breaking the "depth positive exactly where belief exceeds phi" contract.
UNIT_DEPTH_FLOOR = 1e-6


@dataclass(frozen=True)
class ScenegenConfig:
    """Hyper-parameters of the scene generator.

    ``belief_sigma`` defaults to 1.5% of the image diagonal; ``focal``
    defaults to 0.9 * width; ``z_max`` defaults to ``r_max``.
    """

    width: int = 160
    height: int = 120
    theta_vr: float = 0.75
    n_color: int = 400
    r_min: float = 0.0
    r_max: float = 10.0
    incl_max: float = math.pi
    noise_max: float = 30.0
    max_robots: int = 3
    belief_sigma: float = 0.0
    phi: float = 0.5
    colorize_mode: str = "per-robot"
    focal: float = 0.0
    z_min: float = 0.5
    z_max: float = 0.0
    robot: RobotModel = field(default_factory=RobotModel)

    def __post_init__(self):
        if not 0.0 <= self.theta_vr <= 1.0:
            raise ValueError("theta_vr must lie in [0, 1]")
        if self.n_color < 1:
            raise ValueError("n_color must be at least 1")
        if not 0.0 <= self.noise_max <= 255.0:
            raise ValueError("noise_max must lie in [0, 255]")
        if not 0.0 < self.phi < 1.0:
            raise ValueError("phi must lie strictly inside (0, 1)")
        if self.belief_sigma < 0.0:
            raise ValueError("belief_sigma must be positive")
        if self.max_robots < 1:
            raise ValueError("max_robots must be at least 1")
        if self.r_max <= 0.0:
            raise ValueError("r_max must be positive")
        if not 0.0 <= self.r_min < self.r_max:
            raise ValueError("need 0 <= r_min < r_max")
        if not 0.0 < self.incl_max <= math.pi:
            raise ValueError("need 0 < incl_max <= pi")

    @property
    def sigma(self) -> float:
        if self.belief_sigma > 0:
            return self.belief_sigma
        return 0.015 * math.hypot(self.width, self.height)

    def intrinsics(self) -> CameraIntrinsics:
        f = self.focal if self.focal > 0 else 0.9 * self.width
        return CameraIntrinsics(
            fx=f, fy=f, cx=self.width / 2.0, cy=self.height / 2.0,
            width=self.width, height=self.height,
        )

    def depth_transform(self) -> InverseDepthTransform:
        z_max = self.z_max if self.z_max > 0 else self.r_max
        return InverseDepthTransform.from_range(self.z_min, z_max)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["robot"] = self.robot.to_dict()
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ScenegenConfig":
        d = dict(d)
        if "robot" in d:
            d["robot"] = RobotModel.from_dict(d["robot"])
        return cls(**d)


@dataclass(frozen=True)
class RobotSpec:
    visible: bool
    angles: tuple
    color_indices: tuple


@dataclass(frozen=True)
class SceneSpec:
    """Every random choice behind one rendered scene."""

    robots: tuple
    camera: CameraPose
    background_u: float
    background_scale: float
    background_anchor: tuple
    noise_amplitude: float

    def to_dict(self) -> dict:
        return {
            "robots": [
                {
                    "visible": r.visible,
                    "angles": list(r.angles),
                    "color_indices": list(r.color_indices),
                }
                for r in self.robots
            ],
            "camera": self.camera.to_dict(),
            "background_u": self.background_u,
            "background_scale": self.background_scale,
            "background_anchor": list(self.background_anchor),
            "noise_amplitude": self.noise_amplitude,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "SceneSpec":
        robots = tuple(
            RobotSpec(
                visible=bool(r["visible"]),
                angles=tuple(r["angles"]),
                color_indices=tuple(r["color_indices"]),
            )
            for r in d["robots"]
        )
        return cls(
            robots=robots,
            camera=CameraPose.from_dict(d["camera"]),
            background_u=d["background_u"],
            background_scale=d["background_scale"],
            background_anchor=tuple(d["background_anchor"]),
            noise_amplitude=d["noise_amplitude"],
        )


def sample_scene(cfg: ScenegenConfig, rng: np.random.Generator) -> SceneSpec:
    """Draw one scene specification.

    Every robot slot is sampled regardless of visibility so the random
    stream has a fixed layout.  Visibility is Bernoulli(theta_vr), joint
    angles are U(-pi/2, pi/2), colors are uniform palette indices.
    """
    robots = []
    n_colors = cfg.robot.joint_count if cfg.colorize_mode == "per-joint" else 1
    for _ in range(cfg.max_robots):
        visible = bool(rng.uniform() < cfg.theta_vr)
        angles = tuple(rng.uniform(-math.pi / 2.0, math.pi / 2.0, size=cfg.robot.joint_count))
        colors = tuple(int(c) for c in rng.integers(0, cfg.n_color, size=n_colors))
        robots.append(RobotSpec(visible=visible, angles=angles, color_indices=colors))

    camera = sample_camera_pose(rng, cfg.r_max, cfg.r_min, cfg.incl_max)
    background_u = float(rng.uniform())
    background_scale = float(rng.uniform(1.0, 1.6))
    background_anchor = (float(rng.uniform()), float(rng.uniform()))
    noise_amplitude = float(rng.uniform(0.0, cfg.noise_max))
    return SceneSpec(
        robots=tuple(robots),
        camera=camera,
        background_u=background_u,
        background_scale=background_scale,
        background_anchor=background_anchor,
        noise_amplitude=noise_amplitude,
    )


@dataclass
class GroundTruth:
    """Dense targets plus joint-level geometry for one scene.

    Flags are per visible robot and joint: ``in_frame`` (projects inside
    the image with positive depth), ``occluded`` (another surface owns the
    joint's pixel), ``depth_clamped`` (metric depth outside the transform
    range, so the stored disc value saturates).
    """

    beliefs: np.ndarray        # (J, H, W) float32 in [0, 1]
    depth: np.ndarray          # (H, W) float32 in [0, 1], sparse
    masks: np.ndarray          # (R, H, W) bool
    joints_2d: np.ndarray      # (R, J, 2) float64 (row, col)
    joints_3d: np.ndarray      # (R, J, 3) float64 camera frame
    in_frame: np.ndarray       # (R, J) bool
    occluded: np.ndarray       # (R, J) bool
    depth_clamped: np.ndarray  # (R, J) bool


def world_joints(cfg: ScenegenConfig, spec: SceneSpec) -> np.ndarray:
    """World-frame joint positions for the visible robots, (R, J, 3)."""
    out = []
    for slot, robot in enumerate(spec.robots):
        if not robot.visible:
            continue
        base = cfg.robot.base_position(slot, cfg.max_robots)
        out.append(forward_kinematics(cfg.robot, robot.angles, base))
    if not out:
        return np.zeros((0, cfg.robot.joint_count, 3))
    return np.stack(out)


def belief_maps(joints_2d, valid, shape, sigma) -> np.ndarray:
    """Per-joint-type heatmaps: max over robots of unit-peak Gaussians.

    joints_2d: (R, J, 2) continuous (row, col); valid: (R, J) bool marking
    joints that may contribute (positive depth).  Peaks outside the image
    still contribute their in-image tail.
    """
    n_robots, n_joints = valid.shape
    height, width = shape
    rows = np.arange(height, dtype=np.float64)[:, None]
    cols = np.arange(width, dtype=np.float64)[None, :]
    maps = np.zeros((n_joints, height, width), dtype=np.float64)
    inv = 1.0 / (2.0 * sigma * sigma)
    for r in range(n_robots):
        for j in range(n_joints):
            if not valid[r, j]:
                continue
            jr, jc = joints_2d[r, j]
            g = np.exp(-((rows - jr) ** 2 + (cols - jc) ** 2) * inv)
            np.maximum(maps[j], g, out=maps[j])
    return maps.astype(np.float32)


def render_ground_truth(cfg: ScenegenConfig, spec: SceneSpec, rasterization=None):
    """Expand a scene spec into dense targets.

    Returns (GroundTruth, rasterization).  The depth map holds the unit
    inverse depth of the joint with maximal belief wherever that belief
    reaches phi, and zero elsewhere.  Occluded joints keep their beliefs
    and discs; out-of-range depths saturate at the transform boundaries
    (floored at UNIT_DEPTH_FLOOR so the supervised region test stays an
    exact set equality) and are flagged per joint.
    """
    intr = cfg.intrinsics()
    transform = cfg.depth_transform()
    jw = world_joints(cfg, spec)
    jc = spec.camera.world_to_camera(jw.reshape(-1, 3)).reshape(jw.shape)

    if rasterization is None:
        rasterization = raster.rasterize_scene(cfg, spec)

    n_robots, n_joints = jw.shape[0], cfg.robot.joint_count
    pixels, z = project_points(jc, intr)
    front = z > Z_NEAR
    in_frame = front & is_in_frame(pixels, intr)

    occluded = np.zeros((n_robots, n_joints), dtype=bool)
    visible_ids = [slot for slot, r in enumerate(spec.robots) if r.visible]
    for r in range(n_robots):
        for j in range(n_joints):
            if not in_frame[r, j]:
                continue
            pr = int(np.clip(round(pixels[r, j, 0]), 0, cfg.height - 1))
            pc = int(np.clip(round(pixels[r, j, 1]), 0, cfg.width - 1))
            occluded[r, j] = rasterization.owner[pr, pc] != visible_ids[r]

    unit_z = np.ones((n_robots, n_joints))
    depth_clamped = np.zeros((n_robots, n_joints), dtype=bool)
    if n_robots:
        unit_z, depth_clamped = transform.to_unit(z, return_clamped=True)
        unit_z = np.maximum(unit_z, UNIT_DEPTH_FLOOR)
        depth_clamped &= front

    beliefs, depth = compose_targets(
        pixels, front, unit_z, (cfg.height, cfg.width), cfg.sigma, cfg.phi
    )

    masks = np.stack(
        [rasterization.owner == slot for slot in visible_ids]
    ) if visible_ids else np.zeros((0, cfg.height, cfg.width), dtype=bool)

    gt = GroundTruth(
        beliefs=beliefs,
        depth=depth,
        masks=masks,
        joints_2d=pixels,
        joints_3d=jc,
        in_frame=in_frame,
        occluded=occluded,
        depth_clamped=depth_clamped,
    )
    return gt, rasterization


def compose_targets(joints_2d, valid, unit_z, shape, sigma, phi):
    """Belief and depth targets from per-joint geometry, on any pixel grid.

    Beliefs and the depth support region are both derived from the same
    float32 per-joint stack, so "stored depth positive" and "stored belief
    reaches phi" agree bit-for-bit even at boundary pixels.  The depth map
    carries the unit depth of the joint with maximal belief wherever that
    belief reaches phi.
    """
    n_robots, n_joints = np.asarray(valid).shape
    height, width = shape
    depth = np.zeros((height, width), dtype=np.float32)
    if n_robots == 0:
        return np.zeros((n_joints, height, width), dtype=np.float32), depth
    per_joint = _per_joint_gaussians(joints_2d, valid, shape, sigma).astype(
        np.float32
    )
    beliefs = per_joint.max(axis=0)
    flat = per_joint.reshape(n_robots * n_joints, -1)
    peak = flat.max(axis=0)
    winner = flat.argmax(axis=0)
    region = peak >= phi
    depth_flat = depth.reshape(-1)
    depth_flat[region] = np.asarray(unit_z, dtype=np.float32).reshape(-1)[
        winner[region]
    ]
    return beliefs, depth


def targets_at_stride(joints_2d, valid, unit_z, shape, sigma, phi, stride):
    """Targets on the coarse grid of stride-sized blocks.

    Coarse pixel (i, j) sits at the center of the corresponding full-res
    block, so joint coordinates shift by (stride - 1) / 2 and scale by the
    stride; the kernel width scales the same way.
    """
    offset = (stride - 1) / 2.0
    low = (np.asarray(joints_2d, dtype=np.float64) - offset) / stride
    return compose_targets(
        low, valid, unit_z, (shape[0] // stride, shape[1] // stride),
        sigma / stride, phi,
    )


def _per_joint_gaussians(joints_2d, valid, shape, sigma):
    """(R, J, H, W) unit-peak Gaussians, zero for invalid joints."""
    n_robots, n_joints = valid.shape
    height, width = shape
    rows = np.arange(height, dtype=np.float64)[:, None]
    cols = np.arange(width, dtype=np.float64)[None, :]
    inv = 1.0 / (2.0 * sigma * sigma)
    out = np.zeros((n_robots, n_joints, height, width))
    for r in range(n_robots):
        for j in range(n_joints):
            if not valid[r, j]:
                continue
            jr, jc = joints_2d[r, j]
            out[r, j] = np.exp(-((rows - jr) ** 2 + (cols - jc) ** 2) * inv)
    return out


def scene_rng(master_seed: int, scene_index: int) -> np.random.Generator:
    """Per-scene generator derived by hashing the master seed with the index."""
    return np.random.default_rng(np.random.SeedSequence((master_seed, scene_index)))


def generate_scene(cfg: ScenegenConfig, rng: np.random.Generator, max_retries: int = 32):
    """Sample a scene and render it, resampling degenerate cameras.

    A camera closer to the scene center than Z_NEAR cannot satisfy the
    look-at constraint with the center in front of it; such scenes are
    resampled from the same stream and the event is logged.
    """
    for attempt in range(max_retries):
        spec = sample_scene(cfg, rng)
        if spec.camera.radius > Z_NEAR:
            gt, rasterization = render_ground_truth(cfg, spec)
            return spec, gt, rasterization
        log.info("resampling degenerate camera (radius %.4f)", spec.camera.radius)
    raise RuntimeError("could not sample a non-degenerate scene")
