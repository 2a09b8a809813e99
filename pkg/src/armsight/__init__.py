"""Synthetic multi-robot scene generation and articulated pose estimation.

The package covers the full loop: domain-randomized scene rendering with
exact ground truth, a staged joint-localization network, a recurrent
instance-segmentation network, decoding of per-robot 3D kinematic chains,
and evaluation utilities.  See the README for the CLI workflow.
"""

from .geometry import (
    CameraIntrinsics,
    CameraPose,
    InverseDepthTransform,
    backproject,
    project,
)
from .kinematics import RobotModel, forward_kinematics
from .scenegen import ScenegenConfig, SceneSpec, sample_scene
from .estimators import (
    JointBeliefRegressor,
    RobotInstanceSegmenter,
    RobotPoseEstimator,
)

__all__ = [
    "CameraIntrinsics",
    "CameraPose",
    "InverseDepthTransform",
    "backproject",
    "project",
    "RobotModel",
    "forward_kinematics",
    "ScenegenConfig",
    "SceneSpec",
    "sample_scene",
    "JointBeliefRegressor",
    "RobotInstanceSegmenter",
    "RobotPoseEstimator",
]
