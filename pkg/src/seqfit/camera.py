"""Pinhole camera with fixed intrinsics and an optimizable translation."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .bodies import TORSO_JOINTS
from .errors import DegenerateProjectionError, InitFailure, InvalidInputError
from .model import BodyModelSpec, PoseParams, forward_kinematics, regress_joints

DEFAULT_FOCAL = 5000.0
MIN_DEPTH = 1e-6


@dataclass
class CameraParams:
    """Intrinsics are fixed; only ``translation`` (model -> camera offset, m) is fitted."""

    focal_length: float = DEFAULT_FOCAL
    principal_point: np.ndarray = field(default_factory=lambda: np.zeros(2))
    translation: np.ndarray = field(default_factory=lambda: np.array([0.0, 0.0, 3.0]))

    def __post_init__(self):
        self.principal_point = np.asarray(self.principal_point, dtype=float).reshape(2)
        self.translation = np.asarray(self.translation, dtype=float).reshape(3)
        if not self.focal_length > 0:
            raise InvalidInputError("focal length must be positive")

    def with_translation(self, translation) -> CameraParams:
        return CameraParams(self.focal_length, self.principal_point.copy(), np.array(translation, dtype=float))


def project(camera: CameraParams, points: np.ndarray, frame: int | None = None) -> np.ndarray:
    """Pixel coordinates of model-space points (..., 3)."""
    cam = np.asarray(points, dtype=float) + camera.translation
    z = cam[..., 2]
    bad = np.flatnonzero(~(z.reshape(-1) > MIN_DEPTH))
    if bad.size:
        j = int(bad[0])
        raise DegenerateProjectionError(j, float(z.reshape(-1)[j]), frame)
    return camera.principal_point + camera.focal_length * cam[..., :2] / z[..., None]


def torso_indices(spec: BodyModelSpec) -> list[int]:
    return [spec.joint_index(n) for n in TORSO_JOINTS]


def init_depth(camera: CameraParams, spec: BodyModelSpec, beta, frame, pose: PoseParams | None = None) -> np.ndarray:
    """Camera translation from the shoulder and hip keypoints (similar triangles).

    Depth is focal * (3D shoulder-center to hip-center distance in the rest
    skeleton) / (the same distance between keypoints in pixels). The lateral
    offset puts the posed torso center on the 2D torso center.
    """
    ls, rs, lh, rh = torso_indices(spec)
    targets, conf = frame.per_joint(spec.num_joints)
    if not all(conf[j] > 0 for j in (ls, rs, lh, rh)):
        raise InitFailure("shoulder and hip keypoints are required for depth initialization")
    shoulders_2d = (targets[ls] + targets[rs]) / 2.0
    hips_2d = (targets[lh] + targets[rh]) / 2.0
    dist_2d = np.linalg.norm(shoulders_2d - hips_2d)
    if dist_2d <= 0:
        raise InitFailure("shoulder and hip keypoints coincide")
    rest = regress_joints(spec, beta)
    dist_3d = np.linalg.norm((rest[ls] + rest[rs]) / 2.0 - (rest[lh] + rest[rh]) / 2.0)
    depth = camera.focal_length * dist_3d / dist_2d

    if pose is None:
        pose = PoseParams.rest(spec)
    posed = forward_kinematics(spec, beta, pose).positions
    center_3d = posed[[ls, rs, lh, rh]].mean(axis=0)
    center_2d = (shoulders_2d + hips_2d) / 2.0
    xy = (center_2d - camera.principal_point) * depth / camera.focal_length - center_3d[:2]
    return np.array([xy[0], xy[1], depth - center_3d[2]])
