import math

import numpy as np
import pytest
from PIL import Image

from armsight.geometry import CameraPose
from armsight.raster import (
    AMBIENT,
    LIGHT_WORLD,
    BackgroundPool,
    composite,
    crop_background,
    palette,
    rasterize_scene,
)
from armsight.scenegen import RobotSpec, ScenegenConfig, SceneSpec, sample_scene, scene_rng


def _single_robot_scene(camera, noise=0.0):
    """One robot at the origin, straight up, deterministic backdrop slot."""
    cfg = ScenegenConfig(max_robots=1)
    robot = RobotSpec(visible=True, angles=(0.0,) * 6, color_indices=(0,) * 5)
    spec = SceneSpec(
        robots=(robot,),
        camera=camera,
        background_u=0.0,
        background_scale=1.0,
        background_anchor=(0.0, 0.0),
        noise_amplitude=noise,
    )
    return cfg, spec


def test_axis_aligned_depths_are_exact():
    # camera on the equator at radius 3 looking at the origin: every joint
    # sits at z-depth exactly 3, and the first link's axis projects onto
    # the principal column, so the cylinder surface there sits at 3 - r.
    cfg, spec = _single_robot_scene(CameraPose(3.0, math.pi / 2, 0.0))
    ras = rasterize_scene(cfg, spec)
    r = cfg.robot.link_radius

    # base joint projects to the principal point (row 60, col 80)
    assert ras.owner[60, 80] == 0
    assert ras.depth[60, 80] == pytest.approx(3.0 - r, abs=1e-6)

    # mid-link pixel on the principal column: ray stays in the axis plane
    assert ras.owner[47, 80] == 0
    assert ras.depth[47, 80] == pytest.approx(3.0 - r, abs=1e-6)

    # empty corner untouched
    assert ras.owner[0, 0] == -1
    assert np.isinf(ras.depth[0, 0])


def test_shading_range_and_normal_toward_camera():
    cfg, spec = _single_robot_scene(CameraPose(3.0, math.pi / 2, 0.0))
    ras = rasterize_scene(cfg, spec)
    robot = ras.owner >= 0
    assert robot.any()
    vals = ras.shaded[robot]
    assert vals.min() >= 0.0 and vals.max() <= 1.0
    # ambient floor times the palette floor bounds every lit pixel below
    assert vals.max(axis=1).min() >= AMBIENT * 0.2 - 1e-6
    assert ras.shaded[~robot].max() == 0.0


def test_camera_inside_capsule_uses_far_root():
    # camera 3cm from the origin sits inside the base cap (radius 6cm);
    # the ray through the principal point exits the far wall at 9cm.
    cfg, spec = _single_robot_scene(CameraPose(0.03, math.pi / 2, 0.0))
    ras = rasterize_scene(cfg, spec)
    assert ras.owner[60, 80] == 0
    assert ras.depth[60, 80] == pytest.approx(0.09, abs=1e-6)


def test_masks_disjoint_on_sampled_scenes():
    cfg = ScenegenConfig()
    for idx in range(6):
        spec = sample_scene(cfg, scene_rng(3, idx))
        if spec.camera.radius <= 0.05:
            continue
        ras = rasterize_scene(cfg, spec)
        visible = [s for s, r in enumerate(spec.robots) if r.visible]
        labels = np.unique(ras.owner)
        assert set(labels.tolist()) <= set(visible) | {-1}
        # depth finite exactly where a robot owns the pixel
        np.testing.assert_array_equal(np.isfinite(ras.depth), ras.owner >= 0)


def test_light_direction_is_unit():
    assert np.linalg.norm(LIGHT_WORLD) == pytest.approx(1.0)


def test_palette_deterministic_and_bounded():
    p1 = palette(400)
    p2 = palette(400)
    np.testing.assert_array_equal(p1, p2)
    assert p1.shape == (400, 3)
    assert p1.min() >= 0.2 and p1.max() <= 1.0
    assert not np.array_equal(palette(16), palette(32)[:16])


def test_procedural_pool_deterministic_and_theme_split():
    a = BackgroundPool.procedural("train", count=4, size=(60, 80))
    b = BackgroundPool.procedural("train", count=4, size=(60, 80))
    c = BackgroundPool.procedural("test", count=4, size=(60, 80))
    assert len(a) == 4
    for i in range(4):
        u = i / 4
        np.testing.assert_array_equal(a.get(u), b.get(u))
    assert not np.array_equal(a.get(0.0), c.get(0.0))
    img = a.get(0.0)
    assert img.shape == (60, 80, 3) and img.dtype == np.uint8


def test_pool_get_index_mapping():
    pool = BackgroundPool.procedural("train", count=4, size=(20, 30))
    # get maps u in [0, 1) to floor(u * count)
    np.testing.assert_array_equal(pool.get(0.26), pool.get(0.25))
    assert not np.array_equal(pool.get(0.0), pool.get(0.25))
    np.testing.assert_array_equal(pool.get(0.999), pool.get(0.75))
    # u == 1.0 clamps to the last slot instead of indexing past the end
    np.testing.assert_array_equal(pool.get(1.0), pool.get(0.75))


def test_pool_from_directory_sorted(tmp_path):
    rng = np.random.default_rng(0)
    for name in ("b.png", "a.png"):
        arr = rng.integers(0, 255, size=(30, 40, 3), dtype=np.uint8)
        Image.fromarray(arr).save(tmp_path / name)
    pool = BackgroundPool.from_directory(tmp_path)
    assert len(pool) == 2
    first = np.asarray(Image.open(tmp_path / "a.png"))
    np.testing.assert_array_equal(pool.get(0.0), first)


def test_crop_background_shapes_and_anchors():
    rng = np.random.default_rng(1)
    src = rng.integers(0, 255, size=(240, 320, 3), dtype=np.uint8)
    for scale in (1.0, 1.3, 1.6):
        for anchor in ((0.0, 0.0), (1.0, 1.0), (0.4, 0.7)):
            out = crop_background(src, (120, 160), scale, anchor)
            assert out.shape == (120, 160, 3)
            assert out.dtype == np.uint8
    # scale 1.0 on a 2x source is a plain half-size resize: no slack to crop
    exact = crop_background(src, (120, 160), 1.0, (1.0, 1.0))
    resized = np.asarray(Image.fromarray(src).resize((160, 120), Image.BILINEAR))
    np.testing.assert_array_equal(exact, resized)


def test_composite_noise_free_is_pure_layering():
    cfg, spec = _single_robot_scene(CameraPose(3.0, math.pi / 2, 0.0))
    ras = rasterize_scene(cfg, spec)
    pool = BackgroundPool.procedural("train", count=2, size=(240, 320))
    img1 = composite(cfg, spec, ras, pool, np.random.default_rng(0))
    img2 = composite(cfg, spec, ras, pool, np.random.default_rng(99))
    np.testing.assert_array_equal(img1, img2)  # no noise, rng irrelevant
    robot = ras.owner >= 0
    expected = np.clip(np.rint(ras.shaded[robot] * 255.0), 0, 255).astype(np.uint8)
    np.testing.assert_array_equal(img1[robot], expected)
    bg = crop_background(pool.get(0.0), (120, 160), 1.0, (0.0, 0.0))
    np.testing.assert_array_equal(img1[~robot], bg[~robot])


def test_composite_noise_bounded_and_seeded():
    cfg, spec = _single_robot_scene(CameraPose(3.0, math.pi / 2, 0.0), noise=12.0)
    ras = rasterize_scene(cfg, spec)
    pool = BackgroundPool.procedural("train", count=2, size=(240, 320))
    noisy1 = composite(cfg, spec, ras, pool, np.random.default_rng(7))
    noisy2 = composite(cfg, spec, ras, pool, np.random.default_rng(7))
    np.testing.assert_array_equal(noisy1, noisy2)
    cfg0, spec0 = _single_robot_scene(CameraPose(3.0, math.pi / 2, 0.0), noise=0.0)
    clean = composite(cfg0, spec0, ras, pool, np.random.default_rng(7))
    diff = np.abs(noisy1.astype(np.int16) - clean.astype(np.int16))
    assert diff.max() <= 13  # amplitude 12 plus rounding
    assert diff.max() > 0
