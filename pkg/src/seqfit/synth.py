"""Synthetic subjects, scripted motions and noisy keypoint sequences."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .camera import CameraParams, project
from .errors import InvalidInputError
from .model import BodyModelSpec, PoseParams, batch_kinematics, skin_vertices
from .objectives import FrameParams, KeypointFrame
from .rotation import matrix_to_rotvec, rodrigues

FRAME_RATE = 25.0
# synthetic image; principal point at its center
IMAGE_SIZE = (2400, 3600)
SUBJECT_DEPTH = 3.0


def _view_rotation(yaw: float = 0.0) -> np.ndarray:
    """Root rotation turning the y-up model upside down for the y-down image, plus a yaw."""
    flip = rodrigues(np.array([np.pi, 0.0, 0.0]))
    return matrix_to_rotvec(flip @ rodrigues(np.array([0.0, yaw, 0.0])))


@dataclass
class MotionScript:
    """Per-joint axis-angle curves sampled at every frame.

    ``curves`` maps joint names (or ``"root"``) to arrays of shape (frames, 3).
    Joints without a curve stay at rest.
    """

    kind: str
    frames: int
    curves: dict[str, np.ndarray]
    frame_rate: float = FRAME_RATE
    segments: dict[str, tuple[int, int]] = field(default_factory=dict)

    def __post_init__(self):
        if self.frames < 1:
            raise InvalidInputError("a motion needs at least one frame")
        for name, c in self.curves.items():
            if np.shape(c) != (self.frames, 3):
                raise InvalidInputError(f"curve {name!r} must have shape ({self.frames}, 3)")

    def pose(self, spec: BodyModelSpec, i: int) -> PoseParams:
        rot = np.zeros((spec.num_joints, 3))
        for name, curve in self.curves.items():
            j = 0 if name == "root" else spec.joint_index(name)
            rot[j] = curve[i]
        return PoseParams.from_rotvecs(rot)


def constant_motion(frames: int, yaw: float = 0.0) -> MotionScript:
    root = np.tile(_view_rotation(yaw), (frames, 1))
    return MotionScript("constant", frames, {"root": root})


def wave_motion(frames: int = 25, frame_rate: float = FRAME_RATE) -> MotionScript:
    """Left arm raised and waving in the image plane; everything else static.

    An envelope brings the arm back to rest at the first and last frame.
    """
    t = np.arange(frames) / frame_rate
    u = np.arange(frames) / max(frames - 1, 1)
    env = np.sin(np.pi * u) ** 2
    shoulder = np.zeros((frames, 3))
    shoulder[:, 2] = 1.2 * env
    elbow = np.zeros((frames, 3))
    elbow[:, 2] = env * (0.9 + 0.5 * np.sin(2.0 * np.pi * 1.5 * t))
    wrist = np.zeros((frames, 3))
    wrist[:, 2] = env * 0.3 * np.sin(2.0 * np.pi * 1.5 * t + 0.5)
    root = np.tile(_view_rotation(), (frames, 1))
    return MotionScript(
        "wave", frames,
        {"root": root, "left_shoulder": shoulder, "left_elbow": elbow, "left_wrist": wrist},
        frame_rate,
    )


# normalized time -> {joint: rotvec}; hips flex forward (-x), knees back (+x)
_CROUCH_KEYS = [
    (0.0, {}),
    (0.25, {"left_hip": (-0.8, 0, 0), "right_hip": (-0.8, 0, 0), "left_knee": (1.0, 0, 0),
            "right_knee": (1.0, 0, 0), "spine1": (0.15, 0, 0)}),
    (0.4, {"left_hip": (-1.4, 0, 0), "right_hip": (-1.4, 0, 0), "left_knee": (1.8, 0, 0),
           "right_knee": (1.8, 0, 0), "left_ankle": (-0.3, 0, 0), "right_ankle": (-0.3, 0, 0),
           "spine1": (0.3, 0, 0), "right_shoulder": (0, 0, 0.7), "right_elbow": (0, -0.3, 0)}),
    (0.5, {"left_hip": (-1.6, 0, 0), "right_hip": (-1.6, 0, 0), "left_knee": (2.1, 0, 0),
           "right_knee": (2.1, 0, 0), "left_ankle": (-0.5, 0, 0), "right_ankle": (-0.5, 0, 0),
           "spine1": (0.5, 0, 0), "right_shoulder": (0, 0, 1.3), "right_elbow": (0, -0.1, 0)}),
    (0.6, {"left_hip": (-1.4, 0, 0), "right_hip": (-1.4, 0, 0), "left_knee": (1.8, 0, 0),
           "right_knee": (1.8, 0, 0), "left_ankle": (-0.3, 0, 0), "right_ankle": (-0.3, 0, 0),
           "spine1": (0.3, 0, 0), "right_shoulder": (0, 0, 0.7), "right_elbow": (0, -0.3, 0)}),
    (0.75, {"left_hip": (-0.8, 0, 0), "right_hip": (-0.8, 0, 0), "left_knee": (1.0, 0, 0),
            "right_knee": (1.0, 0, 0), "spine1": (0.15, 0, 0)}),
    (1.0, {}),
]
CROUCH_YAW = 0.5


def crouch_motion(frames: int = 25, frame_rate: float = FRAME_RATE) -> MotionScript:
    """Descend into a deep crouch, put the right hand on the floor, stand up again.

    Keyframes are blended with a smoothstep; the hand-to-ground segment is
    reported in ``segments["hand_to_ground"]`` as a half-open frame range.
    """
    names = sorted({n for _, kf in _CROUCH_KEYS for n in kf})
    times = np.array([t for t, _ in _CROUCH_KEYS])
    keys = {n: np.array([kf.get(n, (0.0, 0.0, 0.0)) for _, kf in _CROUCH_KEYS], dtype=float) for n in names}
    u = np.arange(frames) / max(frames - 1, 1)
    seg = np.clip(np.searchsorted(times, u, side="right") - 1, 0, len(times) - 2)
    local = (u - times[seg]) / (times[seg + 1] - times[seg])
    blend = local * local * (3.0 - 2.0 * local)
    curves = {
        n: (1.0 - blend)[:, None] * k[seg] + blend[:, None] * k[seg + 1] for n, k in keys.items()
    }
    curves["root"] = np.tile(_view_rotation(CROUCH_YAW), (frames, 1))
    inside = np.flatnonzero((u >= 0.4 - 1e-9) & (u <= 0.6 + 1e-9))
    segment = (int(inside[0]), int(inside[-1]) + 1) if inside.size else (frames // 2, frames // 2 + 1)
    return MotionScript("crouch", frames, curves, frame_rate, {"hand_to_ground": segment})


def keyframe_motion(frames: int, keys: list[tuple[float, dict]], yaw: float = 0.0) -> MotionScript:
    """Linear blend between scripted keyframes at normalized times in [0, 1]."""
    names = sorted({n for _, kf in keys for n in kf})
    times = np.array([t for t, _ in keys], dtype=float)
    u = np.arange(frames) / max(frames - 1, 1)
    curves = {}
    for n in names:
        vals = np.array([kf.get(n, (0.0, 0.0, 0.0)) for _, kf in keys], dtype=float)
        curves[n] = np.stack([np.interp(u, times, vals[:, c]) for c in range(3)], axis=1)
    curves["root"] = np.tile(_view_rotation(yaw), (frames, 1))
    return MotionScript("scripted", frames, curves)


@dataclass
class NoiseSpec:
    """Keypoint corruption.

    ``confidence`` is "binary" (1 observed, 0 dropped) or "residual"
    (1 / (1 + sigma * |noise|) for observed points). Dropout can be restricted
    to some joints (``dropout_joints``, names) and a frame range.
    """

    sigma: float = 0.0
    dropout: float = 0.0
    confidence: str = "binary"
    dropout_joints: list[str] | None = None
    dropout_frames: tuple[int, int] | None = None

    def __post_init__(self):
        if self.sigma < 0 or not 0.0 <= self.dropout <= 1.0:
            raise InvalidInputError("noise sigma must be >= 0 and dropout in [0, 1]")
        if self.confidence not in ("binary", "residual"):
            raise InvalidInputError("confidence model must be 'binary' or 'residual'")


LEG_JOINTS = ["left_hip", "right_hip", "left_knee", "right_knee", "left_ankle", "right_ankle",
              "left_foot", "right_foot"]


@dataclass
class SyntheticTruth:
    beta: np.ndarray
    params: list[FrameParams]
    joints: np.ndarray  # (N, K, 3) model space
    camera: CameraParams
    motion: str = ""

    def vertices(self, spec: BodyModelSpec, i: int) -> np.ndarray:
        return skin_vertices(spec, self.beta, self.params[i].pose)

    def to_dict(self) -> dict:
        return {
            "version": "1.0",
            "motion": self.motion,
            "beta": self.beta.tolist(),
            "focal_length": self.camera.focal_length,
            "principal_point": self.camera.principal_point.tolist(),
            "frames": [
                {
                    "root": p.pose.root_rotation.tolist(),
                    "pose": p.pose.joint_rotations.tolist(),
                    "translation": p.translation.tolist(),
                    "joints": j.tolist(),
                }
                for p, j in zip(self.params, self.joints)
            ],
        }

    @classmethod
    def from_dict(cls, data: dict) -> SyntheticTruth:
        beta = np.asarray(data["beta"], dtype=float)
        params = [
            FrameParams(beta.copy(), PoseParams(f["root"], f["pose"]), f["translation"])
            for f in data["frames"]
        ]
        camera = CameraParams(data["focal_length"], data["principal_point"], params[0].translation)
        joints = np.asarray([f["joints"] for f in data["frames"]], dtype=float)
        return cls(beta, params, joints, camera, data.get("motion", ""))


def default_camera() -> CameraParams:
    w, h = IMAGE_SIZE
    return CameraParams(principal_point=(w / 2.0, h / 2.0), translation=(0.0, 0.0, SUBJECT_DEPTH))


def make_subject(seed: int, spec: BodyModelSpec, beta=None) -> tuple[BodyModelSpec, np.ndarray]:
    """Draw a subject: shape coefficients uniform in [-2, 2] per dimension."""
    if beta is None:
        beta = np.random.default_rng(seed).uniform(-2.0, 2.0, spec.shape_dim)
    beta = np.asarray(beta, dtype=float)
    if beta.shape != (spec.shape_dim,):
        raise InvalidInputError("subject shape has the wrong dimension")
    return spec, beta


def render_keypoints(spec: BodyModelSpec, beta, motion: MotionScript, camera: CameraParams | None = None,
                     noise: NoiseSpec | None = None, seed: int = 0,
                     joint_map: list[int] | None = None) -> tuple[list[KeypointFrame], SyntheticTruth]:
    """Project the posed subject of every frame, then add noise and dropout.

    Each frame draws from its own stream seeded by (seed, frame index).
    """
    camera = camera or default_camera()
    noise = noise or NoiseSpec()
    beta = np.asarray(beta, dtype=float)
    joint_map = list(range(spec.num_joints)) if joint_map is None else list(joint_map)
    poses = [motion.pose(spec, i) for i in range(motion.frames)]
    rot = np.stack([p.rotvecs() for p in poses])
    joints = batch_kinematics(spec, np.tile(beta, (motion.frames, 1)), rot).positions
    drop_set = None
    if noise.dropout_joints is not None:
        drop_set = {spec.joint_index(n) for n in noise.dropout_joints}
    frames = []
    for i in range(motion.frames):
        exact = project(camera, joints[i][joint_map], frame=i)
        rng = np.random.default_rng((seed, i))
        offset = rng.normal(scale=noise.sigma, size=exact.shape) if noise.sigma > 0 else np.zeros_like(exact)
        points = exact + offset
        if noise.confidence == "binary":
            conf = np.ones(len(joint_map))
        else:
            conf = 1.0 / (1.0 + noise.sigma * np.linalg.norm(offset, axis=1))
        draw = rng.random(len(joint_map))
        eligible = np.ones(len(joint_map), dtype=bool)
        if drop_set is not None:
            eligible = np.array([j in drop_set for j in joint_map])
        if noise.dropout_frames is not None:
            lo, hi = noise.dropout_frames
            if not lo <= i < hi:
                eligible[:] = False
        conf = np.where(eligible & (draw < noise.dropout), 0.0, conf)
        frames.append(KeypointFrame(points, conf, joint_map))
    params = [FrameParams(beta.copy(), p, camera.translation.copy()) for p in poses]
    return frames, SyntheticTruth(beta.copy(), params, joints, camera, motion.kind)
