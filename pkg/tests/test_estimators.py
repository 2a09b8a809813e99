import numpy as np
import pytest
from sklearn.base import clone
from sklearn.exceptions import NotFittedError

from armsight.decoding import RobotEstimate
from armsight.estimators import (
    JointBeliefRegressor,
    RobotInstanceSegmenter,
    RobotPoseEstimator,
)
from armsight.scenegen import ScenegenConfig, render_ground_truth, sample_scene, scene_rng

CFG = ScenegenConfig(width=80, height=64, max_robots=2)

TINY_LOC = dict(n_stages=2, features=16, stage_width=16, head_width=8,
                epochs=2, batch_size=2)
TINY_SEG = dict(hidden=8, head_width=8, epochs=2, batch_size=2)


def _scenes(n=4, seed=0):
    rng = np.random.default_rng(seed)
    images = rng.integers(0, 255, size=(n, CFG.height, CFG.width, 3),
                          dtype=np.uint8)
    samples = []
    idx = 0
    while len(samples) < n:
        spec = sample_scene(CFG, scene_rng(seed, idx))
        idx += 1
        if spec.camera.radius <= 0.05:
            continue
        gt, _ = render_ground_truth(CFG, spec)
        samples.append(gt)
    return images, samples


def test_get_params_and_clone():
    est = JointBeliefRegressor(scene_config=CFG, epochs=3, lr=5e-4)
    params = est.get_params()
    assert params["epochs"] == 3
    assert params["lr"] == 5e-4
    assert params["scene_config"] == CFG
    cloned = clone(est)
    assert cloned.get_params() == params
    est.set_params(epochs=7)
    assert est.epochs == 7


def test_unfitted_predict_raises():
    with pytest.raises(NotFittedError):
        JointBeliefRegressor().predict(np.zeros((1, 120, 160, 3), dtype=np.uint8))


def test_regressor_fit_predict_transform():
    images, samples = _scenes(4)
    est = JointBeliefRegressor(scene_config=CFG, **TINY_LOC)
    assert est.fit(images, samples) is est
    beliefs, depth = est.predict(images)
    assert beliefs.shape == (4, 6, 64, 80)
    assert depth.shape == (4, 64, 80)
    assert beliefs.min() >= 0.0 and beliefs.max() <= 1.0
    stacked = est.transform(images)
    assert stacked.shape == (4, 7, 64, 80)
    np.testing.assert_array_equal(stacked[:, :6], beliefs)
    np.testing.assert_array_equal(stacked[:, 6], depth)
    assert est.history_["epoch_loss"][0] > 0


def test_regressor_rejects_mismatched_lengths():
    images, samples = _scenes(3)
    with pytest.raises(ValueError):
        JointBeliefRegressor(scene_config=CFG, **TINY_LOC).fit(images, samples[:2])


def test_regressor_rejects_wrong_image_size():
    images, samples = _scenes(2)
    est = JointBeliefRegressor(scene_config=ScenegenConfig(), **TINY_LOC)
    with pytest.raises(ValueError):
        est.fit(images, samples)  # 64x80 images vs 120x160 config


def test_segmenter_requires_fitted_localizer():
    images, samples = _scenes(2)
    with pytest.raises(ValueError):
        RobotInstanceSegmenter(localizer=None, **TINY_SEG).fit(images, samples)
    with pytest.raises(ValueError):
        RobotInstanceSegmenter(
            localizer=JointBeliefRegressor(), **TINY_SEG
        ).fit(images, samples)


def test_segmenter_fit_predict_both_teacher_modes():
    images, samples = _scenes(4)
    localizer = JointBeliefRegressor(scene_config=CFG, **TINY_LOC)
    localizer.fit(images, samples)
    for teacher in ("predicted", "ground-truth"):
        seg = RobotInstanceSegmenter(localizer=localizer, teacher=teacher,
                                     **TINY_SEG)
        seg.fit(images, samples)
        preds = seg.predict(images)
        assert len(preds) == 4
        for p in preds:
            assert p.masks.ndim == 3
            assert p.masks.shape[1:] == (64, 80)
            assert p.steps_run >= 1
            assert p.confidences.shape == (p.masks.shape[0],)


def test_segmenter_rejects_unknown_teacher():
    images, samples = _scenes(2)
    localizer = JointBeliefRegressor(scene_config=CFG, **TINY_LOC)
    localizer.fit(images, samples)
    seg = RobotInstanceSegmenter(localizer=localizer, teacher="bogus",
                                 **TINY_SEG)
    with pytest.raises(ValueError):
        seg.fit(images, samples)


def test_pose_estimator_end_to_end():
    images, samples = _scenes(4)
    est = RobotPoseEstimator(
        scene_config=CFG,
        localizer_params=TINY_LOC,
        segmenter_params=TINY_SEG,
    )
    est.fit(images, samples)
    scenes = est.predict(images)
    assert len(scenes) == 4
    for robots in scenes:
        assert isinstance(robots, list)
        for robot in robots:
            assert isinstance(robot, RobotEstimate)
            assert len(robot.joints) == 6
            for joint in robot.joints:
                if joint.found and joint.has_depth:
                    assert joint.z > 0
                    assert len(joint.point) == 3


def test_pose_estimator_nested_params_override_shared_seed():
    est = RobotPoseEstimator(seed=5, localizer_params={"seed": 9})
    images, samples = _scenes(2)
    est.localizer_params = {**TINY_LOC, "seed": 9}
    est.segmenter_params = TINY_SEG
    est.scene_config = CFG
    est.fit(images, samples)
    assert est.localizer_.seed == 9
    assert est.segmenter_.seed == 5
