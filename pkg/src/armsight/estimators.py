"""Estimator-style wrappers around the trainable models.

These follow the scikit-learn contract: constructors only store their
arguments, `fit` resolves and validates them, fitted state lives in
trailing-underscore attributes, and `get_params` / `set_params` work for
cloning and grid search.  Targets are passed as a list of scene samples
(anything exposing beliefs / depth / masks / joints_2d / joints_3d, e.g.
the dataset loader's records).
"""

import numpy as np
import torch
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from .decoding import decode_scene
from .models import instance as inst
from .models import localization as loc
from .scenegen import ScenegenConfig
from .validation import check_image_batch


def _resolve_config(scene_config) -> ScenegenConfig:
    if scene_config is None:
        return ScenegenConfig()
    if isinstance(scene_config, ScenegenConfig):
        return scene_config
    return ScenegenConfig.from_dict(dict(scene_config))


class JointBeliefRegressor(BaseEstimator):
    """Belief-map and inverse-depth regressor with a staged network."""

    def __init__(self, scene_config=None, n_stages=3, features=64,
                 stage_width=64, head_width=32, epochs=30, batch_size=8,
                 lr=1e-3, schedule="cosine", seed=0, deterministic=True,
                 device="cpu"):
        self.scene_config = scene_config
        self.n_stages = n_stages
        self.features = features
        self.stage_width = stage_width
        self.head_width = head_width
        self.epochs = epochs
        self.batch_size = batch_size
        self.lr = lr
        self.schedule = schedule
        self.seed = seed
        self.deterministic = deterministic
        self.device = device

    def fit(self, X, y):
        """X: (N, H, W, 3) uint8 images; y: matching list of scene samples."""
        cfg = _resolve_config(self.scene_config)
        images = check_image_batch(X, cfg.height, cfg.width)
        if len(y) != images.shape[0]:
            raise ValueError("X and y must hold the same number of scenes")
        self.config_ = cfg
        train_cfg = loc.TrainConfig(
            epochs=self.epochs, batch_size=self.batch_size, lr=self.lr,
            schedule=self.schedule, seed=self.seed,
            deterministic=self.deterministic, device=self.device,
        )
        # Seed before constructing the network so refitting is reproducible
        # regardless of ambient RNG state.
        loc.apply_determinism(train_cfg)
        self.net_ = loc.LocalizationNet(
            n_joints=cfg.robot.joint_count, features=self.features,
            n_stages=self.n_stages, stage_width=self.stage_width,
            head_width=self.head_width,
        )
        targets = loc.build_targets(cfg, y)
        self.history_ = loc.train_localizer(
            self.net_, loc.images_to_tensor(images), targets, train_cfg
        )
        return self

    def predict(self, X):
        """Full-resolution (beliefs (N, J, H, W), depth (N, H, W))."""
        check_is_fitted(self, "net_")
        images = check_image_batch(X, self.config_.height, self.config_.width)
        return loc.predict_maps(
            self.net_, loc.images_to_tensor(images), self.batch_size
        )

    def transform(self, X):
        """Stacked maps (N, J+1, H, W); the last channel is depth."""
        beliefs, depth = self.predict(X)
        return np.concatenate([beliefs, depth[:, None]], axis=1)


class RobotInstanceSegmenter(BaseEstimator):
    """Recurrent one-instance-per-step mask predictor.

    Needs a fitted JointBeliefRegressor whose maps and features form the
    input; with teacher="ground-truth" the coarse maps are replaced by
    targets derived from the sample geometry during training.
    """

    def __init__(self, localizer=None, hidden=64, head_width=32, epochs=30,
                 batch_size=4, lr=1e-3, schedule="cosine", seed=0,
                 deterministic=True, device="cpu", teacher="predicted",
                 stop_fraction=0.05, mask_threshold=0.5, max_steps=None):
        self.localizer = localizer
        self.hidden = hidden
        self.head_width = head_width
        self.epochs = epochs
        self.batch_size = batch_size
        self.lr = lr
        self.schedule = schedule
        self.seed = seed
        self.deterministic = deterministic
        self.device = device
        self.teacher = teacher
        self.stop_fraction = stop_fraction
        self.mask_threshold = mask_threshold
        self.max_steps = max_steps

    def _inputs(self, images_np, samples=None):
        cfg = self.localizer.config_
        images = loc.images_to_tensor(images_np)
        coarse = None
        if samples is not None and self.teacher == "ground-truth":
            targets = loc.build_targets(cfg, samples)
            coarse = torch.cat(
                [targets["beliefs_low"], targets["depth_low"][:, None]], dim=1
            )
        elif self.teacher not in ("predicted", "ground-truth"):
            raise ValueError(f"unknown teacher mode {self.teacher!r}")
        return inst.make_instance_inputs(self.localizer.net_, images, coarse)

    def fit(self, X, y):
        """X: images; y: scene samples carrying instance masks."""
        if self.localizer is None or not hasattr(self.localizer, "net_"):
            raise ValueError("localizer must be a fitted JointBeliefRegressor")
        cfg = self.localizer.config_
        images = check_image_batch(X, cfg.height, cfg.width)
        if len(y) != images.shape[0]:
            raise ValueError("X and y must hold the same number of scenes")
        x = self._inputs(images, y)
        train_cfg = loc.TrainConfig(
            epochs=self.epochs, batch_size=self.batch_size, lr=self.lr,
            schedule=self.schedule, seed=self.seed,
            deterministic=self.deterministic, device=self.device,
        )
        # Seed before constructing the network so refitting is reproducible
        # regardless of ambient RNG state.
        loc.apply_determinism(train_cfg)
        self.net_ = inst.InstanceNet(
            in_channels=x.shape[1], hidden=self.hidden,
            head_width=self.head_width,
        )
        masks = [np.asarray(s.masks, dtype=np.float32) for s in y]
        self.history_ = inst.train_instance(self.net_, x, masks, train_cfg)
        return self

    def predict(self, X):
        """Per-scene InstancePrediction (masks, confidences, steps)."""
        check_is_fitted(self, "net_")
        cfg = self.localizer.config_
        images = check_image_batch(X, cfg.height, cfg.width)
        x = self._inputs(images)
        max_steps = self.max_steps
        if max_steps is None:
            max_steps = cfg.max_robots + 2
        return inst.predict_instances(
            self.net_, x, max_steps, self.stop_fraction, self.mask_threshold
        )


class RobotPoseEstimator(BaseEstimator):
    """End-to-end pipeline: localize joints, split instances, decode 3D."""

    def __init__(self, scene_config=None, localizer_params=None,
                 segmenter_params=None, peak_threshold=0.3, window=5,
                 method="nms", mask_threshold=0.5, seed=0,
                 deterministic=True, device="cpu"):
        self.scene_config = scene_config
        self.localizer_params = localizer_params
        self.segmenter_params = segmenter_params
        self.peak_threshold = peak_threshold
        self.window = window
        self.method = method
        self.mask_threshold = mask_threshold
        self.seed = seed
        self.deterministic = deterministic
        self.device = device

    def fit(self, X, y):
        cfg = _resolve_config(self.scene_config)
        shared = {"seed": self.seed, "deterministic": self.deterministic,
                  "device": self.device}
        self.localizer_ = JointBeliefRegressor(
            scene_config=cfg, **{**shared, **(self.localizer_params or {})}
        ).fit(X, y)
        self.segmenter_ = RobotInstanceSegmenter(
            localizer=self.localizer_,
            **{**shared, **(self.segmenter_params or {})},
        ).fit(X, y)
        self.config_ = cfg
        return self

    def predict(self, X):
        """Per-scene list of RobotEstimate with 2D, depth, and 3D joints."""
        check_is_fitted(self, "localizer_")
        cfg = self.config_
        beliefs, depth = self.localizer_.predict(X)
        instances = self.segmenter_.predict(X)
        intr = cfg.intrinsics()
        transform = cfg.depth_transform()
        scenes = []
        for i, pred in enumerate(instances):
            scenes.append(
                decode_scene(
                    beliefs[i], depth[i], pred.masks, pred.confidences,
                    intr, transform, threshold=self.peak_threshold,
                    window=self.window, method=self.method,
                    sigma_log=cfg.sigma,
                    mask_threshold=self.mask_threshold,
                )
            )
        return scenes
