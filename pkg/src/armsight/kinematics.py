"""Articulated chain model and forward kinematics for capsule-link arms."""

import math
from dataclasses import dataclass

import numpy as np

DEFAULT_LINK_LENGTHS = (0.55, 0.5, 0.45, 0.4, 0.35)


@dataclass(frozen=True)
class RobotModel:
    """Serial chain of capsule links.

    ``joint_count`` positions are produced by forward kinematics; the
    chain has ``joint_count - 1`` links.  The first joint yaws about the
    world vertical axis, joints 2..J pitch within the arm's sagittal
    plane.  The last joint's angle rolls the tool flange and moves no
    joint center.
    """

    joint_count: int = 6
    link_lengths: tuple = DEFAULT_LINK_LENGTHS
    link_radius: float = 0.06
    base_ring_radius: float = 0.8

    def __post_init__(self):
        if self.joint_count < 2:
            raise ValueError("need at least two joints")
        if len(self.link_lengths) != self.joint_count - 1:
            raise ValueError(
                f"expected {self.joint_count - 1} link lengths, got {len(self.link_lengths)}"
            )
        if any(l <= 0 for l in self.link_lengths):
            raise ValueError("link lengths must be positive")
        if self.link_radius <= 0:
            raise ValueError("link radius must be positive")

    @property
    def reach(self) -> float:
        return float(sum(self.link_lengths))

    def base_position(self, index: int, count: int) -> np.ndarray:
        """Deterministic base placement: slots evenly spaced on a ground ring.

        A single slot sits at the scene center.
        """
        if count <= 1:
            return np.zeros(3)
        angle = 2.0 * math.pi * index / count
        return self.base_ring_radius * np.array([math.cos(angle), math.sin(angle), 0.0])

    def to_dict(self) -> dict:
        return {
            "joint_count": self.joint_count,
            "link_lengths": list(self.link_lengths),
            "link_radius": self.link_radius,
            "base_ring_radius": self.base_ring_radius,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "RobotModel":
        d = dict(d)
        d["link_lengths"] = tuple(d["link_lengths"])
        return cls(**d)


def forward_kinematics(model: RobotModel, angles, base=(0.0, 0.0, 0.0)) -> np.ndarray:
    """World-frame joint positions (J, 3) for the given joint angles.

    angles[0] is the base yaw; angles[1:] accumulate as pitch along the
    chain.  The zero configuration extends straight up from the base.
    """
    angles = np.asarray(angles, dtype=np.float64)
    if angles.shape != (model.joint_count,):
        raise ValueError(f"expected {model.joint_count} joint angles, got {angles.shape}")
    yaw = angles[0]
    horizontal = np.array([math.cos(yaw), math.sin(yaw), 0.0])
    vertical = np.array([0.0, 0.0, 1.0])

    positions = np.empty((model.joint_count, 3))
    positions[0] = np.asarray(base, dtype=np.float64)
    pitch = 0.0
    for i, length in enumerate(model.link_lengths):
        if i > 0:
            pitch += angles[i]
        direction = math.cos(pitch) * vertical + math.sin(pitch) * horizontal
        positions[i + 1] = positions[i] + length * direction
    return positions
