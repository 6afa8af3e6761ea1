"""Loss terms of the per-frame fitting objective, the temporal term and the stage weights.

The functions here evaluate one frame (or one frame triple) at a time and
return plain floats. The optimizer uses the batched, differentiated version in
:mod:`seqfit.energy`; the two are kept independent and cross-checked in tests.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field

import numpy as np

from .camera import CameraParams, project
from .errors import InvalidInputError
from .model import BodyModelSpec, PoseParams, forward_kinematics

DEFAULT_SIGMA = 100.0
NUM_STAGES = 5


@dataclass
class KeypointFrame:
    """2D detections for one image.

    ``points[i]`` and ``confidence[i]`` belong to model joint ``joint_map[i]``.
    """

    points: np.ndarray  # (N, 2) pixels
    confidence: np.ndarray  # (N,)
    joint_map: list[int]

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=float).reshape(-1, 2)
        self.confidence = np.asarray(self.confidence, dtype=float).reshape(-1)
        self.joint_map = [int(j) for j in self.joint_map]
        if not (len(self.points) == len(self.confidence) == len(self.joint_map)):
            raise InvalidInputError("points, confidence and joint_map lengths differ")
        if len(set(self.joint_map)) != len(self.joint_map):
            raise InvalidInputError("joint_map must be injective")
        if ((self.confidence < 0) | (self.confidence > 1) | ~np.isfinite(self.confidence)).any():
            raise InvalidInputError("confidences must lie in [0, 1]")

    def per_joint(self, num_joints: int) -> tuple[np.ndarray, np.ndarray]:
        """Targets (K, 2) and confidences (K,) indexed by model joint; unmapped joints get 0."""
        targets = np.zeros((num_joints, 2))
        conf = np.zeros(num_joints)
        if self.joint_map and max(self.joint_map) >= num_joints:
            raise InvalidInputError("joint_map refers to joints the model does not have")
        targets[self.joint_map] = self.points
        conf[self.joint_map] = self.confidence
        return targets, conf

    @property
    def mean_confidence(self) -> float:
        return float(self.confidence.mean()) if len(self.confidence) else 0.0


@dataclass
class FrameParams:
    """Everything fitted for one frame."""

    beta: np.ndarray
    pose: PoseParams
    translation: np.ndarray

    def __post_init__(self):
        self.beta = np.asarray(self.beta, dtype=float).reshape(-1)
        self.translation = np.asarray(self.translation, dtype=float).reshape(3)

    def copy(self) -> FrameParams:
        return FrameParams(
            self.beta.copy(),
            PoseParams(self.pose.root_rotation.copy(), self.pose.joint_rotations.copy()),
            self.translation.copy(),
        )


@dataclass
class Stage:
    """Weights of one fitting stage."""

    body_pose: float
    hand_pose: float
    shape: float
    expression: float  # kept for completeness; no expression parameters exist
    jaw_pose: tuple[float, float, float]
    bending: float
    collision: float  # kept for completeness; no collision term exists
    joints_hand: float
    joints_face: float
    joints_body: float
    shared_shape: float
    gamma_scale: float = 1.0


_TABLE = {
    "body_pose": (404.0, 404.0, 57.4, 4.8, 4.8),
    "hand_pose": (404.0, 404.0, 57.4, 4.8, 4.8),
    "shape": (100.0, 50.0, 10.0, 5.0, 5.0),
    "expression": (100.0, 50.0, 10.0, 5.0, 5.0),
    "jaw_pose": (
        (63.6, 201.0, 201.0),
        (63.6, 201.0, 201.0),
        (24.0, 75.7, 75.8),
        (6.9, 21.9, 21.9),
        (6.9, 21.9, 21.9),
    ),
    "bending": (35.8, 35.8, 13.5, 3.9, 3.9),
    "collision": (0.0, 0.0, 0.0, 0.1, 1.0),
    "joints_hand": (0.0, 0.0, 0.0, 0.1, 2.0),
    "joints_face": (0.0, 0.0, 0.0, 0.0, 2.0),
    "joints_body": (1.0, 1.0, 1.0, 1.0, 1.0),
}


@dataclass
class StageSchedule:
    """Five annealing stages plus the temporal weight.

    Defaults reproduce the SMPLify-X weight table; the shared-shape prior weight
    of each stage defaults to that stage's shape prior weight.
    """

    stages: list[Stage] = field(default_factory=lambda: StageSchedule._default_stages())
    temporal_weight: float = 100.0

    def __post_init__(self):
        if len(self.stages) != NUM_STAGES:
            raise InvalidInputError(f"a schedule needs exactly {NUM_STAGES} stages")
        for s in self.stages:
            values = [v for v in asdict(s).values()]
            flat = [x for v in values for x in (v if isinstance(v, (tuple, list)) else (v,))]
            if any(not np.isfinite(x) or x < 0 for x in flat):
                raise InvalidInputError("schedule weights must be finite and nonnegative")
        if not self.temporal_weight >= 0:
            raise InvalidInputError("temporal weight must be nonnegative")

    @staticmethod
    def _default_stages() -> list[Stage]:
        out = []
        for i in range(NUM_STAGES):
            kw = {k: (tuple(v[i]) if k == "jaw_pose" else v[i]) for k, v in _TABLE.items()}
            out.append(Stage(shared_shape=kw["shape"], **kw))
        return out

    def to_dict(self) -> dict:
        keys = list(asdict(self.stages[0]).keys())
        return {
            "version": "1.0",
            "temporal_weight": self.temporal_weight,
            **{k: [_plain(getattr(s, k)) for s in self.stages] for k in keys},
        }

    @classmethod
    def from_dict(cls, data: dict) -> StageSchedule:
        base = cls()
        stages = []
        for i, default in enumerate(base.stages):
            kw = asdict(default)
            for key in kw:
                if key in data:
                    values = data[key]
                    if len(values) != NUM_STAGES:
                        raise InvalidInputError(f"{key!r} must list {NUM_STAGES} stage values")
                    kw[key] = tuple(values[i]) if key == "jaw_pose" else float(values[i])
            if "shape" in data and "shared_shape" not in data:
                kw["shared_shape"] = kw["shape"]
            stages.append(Stage(**kw))
        return cls(stages, float(data.get("temporal_weight", base.temporal_weight)))

    @property
    def digest(self) -> str:
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()


def _plain(v):
    return list(v) if isinstance(v, tuple) else v


def joint_groups(spec: BodyModelSpec) -> np.ndarray:
    """Keypoint group per model joint: 0 body, 1 hand, 2 face (jaw)."""
    groups = np.zeros(spec.num_joints, dtype=np.int64)
    groups[list(spec.hand_joints)] = 1
    groups[list(spec.jaw_joints)] = 2
    return groups


def gmof(residual, sigma: float = DEFAULT_SIGMA):
    """Geman-McClure robustifier e^2 s^2 / (e^2 + s^2), elementwise."""
    if not sigma > 0:
        raise InvalidInputError("sigma must be positive")
    sq = np.square(residual)
    return sq * sigma**2 / (sq + sigma**2)


def reprojection_loss(spec, beta, pose: PoseParams, camera: CameraParams, frame: KeypointFrame,
                      gamma=None, sigma: float = DEFAULT_SIGMA, joint_scale=None) -> float:
    """Sum over joints of gamma * confidence * robustified pixel residual.

    ``joint_scale`` optionally multiplies each model joint (the per-group stage
    weights enter this way).
    """
    targets, conf = frame.per_joint(spec.num_joints)
    weight = conf.copy()
    if gamma is not None:
        weight *= np.asarray(gamma, dtype=float)
    if joint_scale is not None:
        weight *= np.asarray(joint_scale, dtype=float)
    used = np.flatnonzero(weight > 0)
    if used.size == 0:
        return 0.0
    joints = forward_kinematics(spec, beta, pose).positions
    pixels = project(camera, joints[used])
    residual = pixels - targets[used]
    return float(np.sum(weight[used] * gmof(residual, sigma).sum(axis=1)))


def l2_prior(values, weight: float = 1.0) -> float:
    return float(weight * np.sum(np.square(np.asarray(values, dtype=float))))


def body_pose_prior(pose: PoseParams, spec: BodyModelSpec, weight: float = 1.0) -> float:
    """Quadratic prior on the body joints' axis-angle components (root excluded)."""
    return l2_prior(pose.rotvecs()[spec.body_joints], weight)


def hand_pose_prior(pose: PoseParams, spec: BodyModelSpec, weight: float = 1.0) -> float:
    return l2_prior(pose.rotvecs()[list(spec.hand_joints)], weight)


def jaw_pose_prior(pose: PoseParams, spec: BodyModelSpec, weights=(1.0, 1.0, 1.0)) -> float:
    """Jaw prior with one weight per axis-angle component."""
    jaw = pose.rotvecs()[list(spec.jaw_joints)]
    return float(np.sum(np.square(jaw) * np.asarray(weights, dtype=float)))


def bending_prior(pose: PoseParams, spec: BodyModelSpec, weight: float = 1.0) -> float:
    """Exponential penalty on hyperextension of the hinge joints listed in the model."""
    rot = pose.rotvecs()
    return float(weight * sum(np.exp(sign * rot[j, axis]) for j, axis, sign in spec.bend_joints))


def temporal_loss(spec: BodyModelSpec, shared_beta, poses, weight: float, frame_index: int,
                  sequence_length: int, betas=None) -> float:
    """Squared distance of each joint to its mean over the previous, current and next frame.

    ``poses`` holds the three PoseParams (i-1, i, i+1). ``frame_index`` is 0-based;
    the first and last frame of the sequence have no temporal term.
    """
    if betas is not None:
        b = [np.asarray(x, dtype=float) for x in betas]
        if any(x.shape != b[0].shape or not np.array_equal(x, b[0]) for x in b):
            raise InvalidInputError("the three frames of a temporal term must share one shape vector")
        shared_beta = b[0]
    if frame_index <= 0 or frame_index >= sequence_length - 1:
        return 0.0
    if len(poses) != 3:
        raise InvalidInputError("temporal_loss needs the previous, current and next pose")
    joints = [forward_kinematics(spec, shared_beta, p).positions for p in poses]
    mean = (joints[0] + joints[1] + joints[2]) / 3.0
    return float(weight * np.sum(np.square(joints[1] - mean)))


@dataclass
class FrameTerms:
    """Unweighted loss terms of one frame (the data terms are already split by group)."""

    joints_body: float
    joints_hand: float
    joints_face: float
    body_pose: float
    hand_pose: float
    jaw_pose: tuple[float, float, float]
    bending: float
    shape: float
    expression: float = 0.0
    collision: float = 0.0

    def weighted(self, stage: Stage) -> float:
        return (
            stage.joints_body * self.joints_body
            + stage.joints_hand * self.joints_hand
            + stage.joints_face * self.joints_face
            + stage.body_pose * self.body_pose
            + stage.hand_pose * self.hand_pose
            + float(np.dot(stage.jaw_pose, self.jaw_pose))
            + stage.bending * self.bending
            + stage.shape * self.shape
            + stage.expression * self.expression
            + stage.collision * self.collision
        )


def frame_terms(spec: BodyModelSpec, params: FrameParams, camera: CameraParams, frame: KeypointFrame,
                gamma=None, sigma: float = DEFAULT_SIGMA) -> FrameTerms:
    groups = joint_groups(spec)
    cam = camera.with_translation(params.translation)
    data = [
        reprojection_loss(spec, params.beta, params.pose, cam, frame, gamma, sigma,
                          joint_scale=(groups == g).astype(float))
        for g in (0, 1, 2)
    ]
    jaw = params.pose.rotvecs()[list(spec.jaw_joints)]
    return FrameTerms(
        joints_body=data[0],
        joints_hand=data[1],
        joints_face=data[2],
        body_pose=body_pose_prior(params.pose, spec),
        hand_pose=hand_pose_prior(params.pose, spec),
        jaw_pose=tuple(float(x) for x in np.square(jaw).sum(axis=0)) if len(jaw) else (0.0, 0.0, 0.0),
        bending=bending_prior(params.pose, spec),
        shape=l2_prior(params.beta),
    )


def frame_objective(spec: BodyModelSpec, params: FrameParams, camera: CameraParams, frame: KeypointFrame,
                    schedule: StageSchedule, stage: int, gamma=None, sigma: float = DEFAULT_SIGMA) -> float:
    """Weighted per-frame objective for ``stage`` (1-based, 1..5)."""
    if not 1 <= stage <= NUM_STAGES:
        raise InvalidInputError(f"stage must be in 1..{NUM_STAGES}")
    st = schedule.stages[stage - 1]
    if gamma is not None:
        gamma = np.asarray(gamma, dtype=float) * st.gamma_scale
    elif st.gamma_scale != 1.0:
        gamma = np.full(spec.num_joints, st.gamma_scale)
    return frame_terms(spec, params, camera, frame, gamma, sigma).weighted(st)
