"""File formats: keypoints, fits, meshes, OpenPose conversion. All writes are atomic."""

from __future__ import annotations

import hashlib
import json
import logging
import os
import tempfile
import warnings
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path

import numpy as np

from .errors import InvalidInputError, SeqfitError
from .metrics import TriMesh
from .model import BodyModelSpec, PoseParams, skin_vertices
from .objectives import FrameParams, KeypointFrame, StageSchedule
from .pipeline import FitReport, RunConfig, SequenceFit

log = logging.getLogger(__name__)

FORMAT_VERSION = "1.0"


class FileFormatError(SeqfitError, OSError):
    """A file could not be read or written."""


def check_version(data: dict, what: str) -> None:
    version = str(data.get("version", ""))
    try:
        major = int(version.split(".")[0])
    except ValueError:
        raise InvalidInputError(f"{what}: missing or malformed version field {version!r}") from None
    supported = int(FORMAT_VERSION.split(".")[0])
    if major > supported:
        raise InvalidInputError(
            f"{what}: file version {version} is newer than the supported {FORMAT_VERSION}; upgrade seqfit"
        )


def atomic_write_text(path, text: str) -> Path:
    """Write via a temporary file in the target directory, then rename over ``path``."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(prefix=f".{path.name}.", suffix=".tmp", dir=path.parent)
    try:
        with os.fdopen(fd, "w", encoding="utf-8", newline="\n") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise
    return path


def dump_json(data) -> str:
    # repr-based float formatting round-trips doubles exactly
    return json.dumps(data, sort_keys=True, indent=1, allow_nan=False) + "\n"


def write_json(path, data) -> Path:
    return atomic_write_text(path, dump_json(data))


def read_json(path) -> dict:
    try:
        with open(path, encoding="utf-8") as fh:
            return json.load(fh)
    except OSError as exc:
        raise FileFormatError(f"cannot read {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise InvalidInputError(f"{path}: not valid JSON ({exc})") from exc


def digest(data) -> str:
    return hashlib.sha256(json.dumps(data, sort_keys=True).encode()).hexdigest()


# keypoints ------------------------------------------------------------------

@dataclass
class KeypointFile:
    """A keypoint sequence with image size and joint names; iterates over its frames."""

    width: int
    height: int
    joint_names: list[str]
    frames: list[KeypointFrame] = field(default_factory=list)

    def __len__(self):
        return len(self.frames)

    def __iter__(self):
        return iter(self.frames)

    def __getitem__(self, i):
        return self.frames[i]

    @property
    def image_size(self) -> tuple[int, int]:
        return (self.width, self.height)


def keypoint_file_from_frames(frames: list[KeypointFrame], spec: BodyModelSpec, width: int, height: int) -> KeypointFile:
    if not frames:
        raise InvalidInputError("no frames to store")
    joint_map = frames[0].joint_map
    if any(f.joint_map != joint_map for f in frames):
        raise InvalidInputError("all frames must share one joint map")
    return KeypointFile(int(width), int(height), [spec.joint_names[j] for j in joint_map], list(frames))


def keypoints_to_dict(kf: KeypointFile) -> dict:
    return {
        "version": FORMAT_VERSION,
        "width": kf.width,
        "height": kf.height,
        "joint_map": list(kf.joint_names),
        "frames": [
            [[float(x), float(y), float(c)] for (x, y), c in zip(f.points, f.confidence)] for f in kf.frames
        ],
    }


def keypoints_from_dict(data: dict, spec: BodyModelSpec, source: str = "keypoints") -> KeypointFile:
    check_version(data, source)
    try:
        names = list(data["joint_map"])
        width, height = int(data["width"]), int(data["height"])
        raw_frames = data["frames"]
    except (KeyError, TypeError, ValueError) as exc:
        raise InvalidInputError(f"{source}: missing or malformed field ({exc})") from exc
    unknown = [n for n in names if n not in spec.joint_names]
    if unknown:
        raise InvalidInputError(f"{source}: unknown joint names {unknown}")
    if len(set(names)) != len(names):
        raise InvalidInputError(f"{source}: joint_map lists a joint twice")
    joint_map = [spec.joint_names.index(n) for n in names]
    frames = []
    for i, rows in enumerate(raw_frames):
        arr = np.asarray(rows, dtype=float)
        if arr.shape != (len(names), 3):
            raise InvalidInputError(
                f"{source}: frame {i} has shape {arr.shape}, expected ({len(names)}, 3)"
            )
        if not np.all(np.isfinite(arr[:, :2])):
            j = int(np.flatnonzero(~np.isfinite(arr[:, :2]).all(axis=1))[0])
            raise InvalidInputError(f"{source}: frame {i}, joint {names[j]}: non-finite position")
        bad = (arr[:, 2] < 0) | (arr[:, 2] > 1) | ~np.isfinite(arr[:, 2])
        if bad.any():
            j = int(np.flatnonzero(bad)[0])
            raise InvalidInputError(
                f"{source}: frame {i}, joint {names[j]}: confidence {arr[j, 2]} outside [0, 1]"
            )
        frames.append(KeypointFrame(arr[:, :2], arr[:, 2], joint_map))
    return KeypointFile(width, height, names, frames)


def load_keypoints(path, spec: BodyModelSpec) -> KeypointFile:
    return keypoints_from_dict(read_json(path), spec, str(path))


def save_keypoints(path, kf: KeypointFile) -> Path:
    return write_json(path, keypoints_to_dict(kf))


# body model and schedule ----------------------------------------------------

def load_model(path) -> BodyModelSpec:
    data = read_json(path)
    check_version(data, str(path))
    return BodyModelSpec.from_dict(data)


def save_model(path, spec: BodyModelSpec) -> Path:
    return write_json(path, spec.to_dict())


def load_schedule(path) -> StageSchedule:
    data = read_json(path)
    check_version(data, str(path))
    return StageSchedule.from_dict(data)


# fits -----------------------------------------------------------------------

@dataclass
class FitFile:
    fit: SequenceFit
    report: FitReport
    config: dict
    schedule: StageSchedule
    model_hash: str
    phases_completed: int

    @property
    def partial(self) -> bool:
        """True when the fit stops before the temporal phase."""
        return self.phases_completed < 3


def fit_to_dict(fit: SequenceFit, report: FitReport, spec: BodyModelSpec, config: RunConfig,
                schedule: StageSchedule) -> dict:
    cfg = config.to_dict()
    sched = schedule.to_dict()
    return {
        "version": FORMAT_VERSION,
        "model_hash": spec.digest,
        "config": cfg,
        "config_hash": digest(cfg),
        "schedule": sched,
        "schedule_hash": schedule.digest,
        "phases_completed": int(fit.phase),
        "focal_length": float(fit.focal_length),
        "principal_point": [float(v) for v in fit.principal_point],
        "shared_shape": None if fit.shared_shape is None else [float(v) for v in fit.shared_shape],
        "frames": [
            {
                "beta": [float(v) for v in p.beta],
                "root": [float(v) for v in p.pose.root_rotation],
                "pose": [[float(v) for v in row] for row in p.pose.joint_rotations],
                "translation": [float(v) for v in p.translation],
                "provenance": prov,
                "failed": bool(failed),
            }
            for p, prov, failed in zip(fit.frames, fit.provenance, fit.failed)
        ],
        "report": {
            "phases": report.phases,
            "warnings": list(report.warnings),
            "frame_losses": report.frame_losses,
        },
    }


def fit_from_dict(data: dict, spec: BodyModelSpec | None = None, source: str = "fit") -> FitFile:
    check_version(data, source)
    if spec is not None and data.get("model_hash") != spec.digest:
        msg = f"{source}: body model hash differs from the model in use; parameters may not match"
        warnings.warn(msg, stacklevel=2)
        log.warning(msg)
    try:
        frames = [
            FrameParams(
                np.asarray(f["beta"], dtype=float),
                PoseParams(f["root"], f["pose"]),
                np.asarray(f["translation"], dtype=float),
            )
            for f in data["frames"]
        ]
        shared = data.get("shared_shape")
        fit = SequenceFit(
            frames,
            [f["provenance"] for f in data["frames"]],
            [bool(f["failed"]) for f in data["frames"]],
            float(data["focal_length"]),
            np.asarray(data["principal_point"], dtype=float),
            None if shared is None else np.asarray(shared, dtype=float),
            int(data["phases_completed"]),
        )
        rep = data.get("report", {})
        report = FitReport(dict(rep.get("phases", {})), list(rep.get("warnings", [])),
                           list(rep.get("frame_losses", [])))
        schedule = StageSchedule.from_dict(data["schedule"])
    except (KeyError, TypeError, ValueError) as exc:
        raise InvalidInputError(f"{source}: malformed fit file ({exc})") from exc
    phases = fit.phase if "phase3" in report.phases else min(fit.phase, 2)
    if phases < 3:
        log.info("%s: fit covers phase 1/2 only; no temporal phase recorded", source)
    return FitFile(fit, report, dict(data.get("config", {})), schedule, str(data.get("model_hash", "")), phases)


def export_fit(path, fit: SequenceFit, report: FitReport, spec: BodyModelSpec, config: RunConfig,
               schedule: StageSchedule, timings: bool = True) -> Path:
    """Write the fit JSON; wall-clock timings go to a ``.timings.json`` sidecar."""
    out = write_json(path, fit_to_dict(fit, report, spec, config, schedule))
    if timings and report.timings:
        write_json(Path(path).with_suffix(".timings.json"),
                   {"version": FORMAT_VERSION, "timings": report.timings})
    return out


def import_fit(path, spec: BodyModelSpec | None = None) -> FitFile:
    return fit_from_dict(read_json(path), spec, str(path))


# meshes ---------------------------------------------------------------------

def obj_text(vertices: np.ndarray, faces: np.ndarray) -> str:
    lines = [f"v {x!r} {y!r} {z!r}" for x, y, z in np.asarray(vertices, dtype=float).tolist()]
    lines += [f"f {a + 1} {b + 1} {c + 1}" for a, b, c in np.asarray(faces, dtype=np.int64).tolist()]
    return "\n".join(lines) + "\n"


def write_obj(path, vertices, faces) -> Path:
    return atomic_write_text(path, obj_text(vertices, faces))


def read_obj(path) -> TriMesh:
    verts, faces = [], []
    try:
        with open(path, encoding="utf-8") as fh:
            for lineno, line in enumerate(fh, 1):
                parts = line.split()
                if not parts or parts[0].startswith("#"):
                    continue
                if parts[0] == "v":
                    verts.append([float(v) for v in parts[1:4]])
                elif parts[0] == "f":
                    idx = [int(p.split("/")[0]) for p in parts[1:]]
                    if len(idx) < 3:
                        raise InvalidInputError(f"{path}:{lineno}: face with fewer than 3 vertices")
                    idx = [i - 1 if i > 0 else len(verts) + i for i in idx]
                    faces += [(idx[0], idx[k], idx[k + 1]) for k in range(1, len(idx) - 1)]
    except OSError as exc:
        raise FileFormatError(f"cannot read {path}: {exc}") from exc
    return TriMesh(np.array(verts, dtype=float).reshape(-1, 3), np.array(faces, dtype=np.int64).reshape(-1, 3))


def mesh_name(i: int, count: int) -> str:
    return f"frame_{i:0{max(5, len(str(count - 1)))}d}.obj"


def export_meshes(fit: SequenceFit, spec: BodyModelSpec, directory) -> list[Path]:
    """One OBJ per frame, posed by skinning, named by zero-padded frame index."""
    directory = Path(directory)
    n = len(fit.frames)
    return [
        write_obj(directory / mesh_name(i, n), skin_vertices(spec, p.beta, p.pose), spec.faces)
        for i, p in enumerate(fit.frames)
    ]


def load_meshes(directory) -> list[TriMesh]:
    paths = sorted(Path(directory).glob("*.obj"))
    if not paths:
        raise FileFormatError(f"no OBJ files in {directory}")
    return [read_obj(p) for p in paths]


# OpenPose -------------------------------------------------------------------

def openpose_mapping() -> dict:
    text = resources.files("seqfit").joinpath("data/openpose_map.json").read_text(encoding="utf-8")
    return json.loads(text)


def _openpose_person(data: dict) -> dict | None:
    people = data.get("people") or []
    if not people:
        return None
    # several detections: keep the one with the highest summed body confidence
    def score(p):
        kp = np.asarray(p.get("pose_keypoints_2d") or [0.0], dtype=float)
        return float(kp[2::3].sum()) if kp.size >= 3 else 0.0
    return max(people, key=score)


def convert_openpose(paths, spec: BodyModelSpec, width: int, height: int) -> KeypointFile:
    """Build a keypoint sequence from per-image OpenPose JSON files (given in frame order).

    Images without a detected person yield frames with zero confidence.
    """
    mapping = openpose_mapping()
    entries = []  # (section, source index, model joint name)
    for idx, name in mapping["body"].items():
        entries.append(("pose_keypoints_2d", int(idx), name))
    for side, key in (("left", "hand_left_keypoints_2d"), ("right", "hand_right_keypoints_2d")):
        for idx, name in mapping["hand"].items():
            entries.append((key, int(idx), f"{side}_{name}"))
    for idx, name in mapping["face"].items():
        entries.append(("face_keypoints_2d", int(idx), name))
    entries = [e for e in entries if e[2] in spec.joint_names]
    names = [e[2] for e in entries]
    joint_map = [spec.joint_names.index(n) for n in names]
    frames = []
    for path in paths:
        person = _openpose_person(read_json(path))
        pts = np.zeros((len(entries), 2))
        conf = np.zeros(len(entries))
        if person is not None:
            for row, (section, idx, _) in enumerate(entries):
                arr = person.get(section) or []
                if len(arr) >= 3 * idx + 3:
                    x, y, c = arr[3 * idx: 3 * idx + 3]
                    pts[row] = (x, y)
                    conf[row] = min(max(float(c), 0.0), 1.0)
        frames.append(KeypointFrame(pts, conf, joint_map))
    return KeypointFile(int(width), int(height), names, frames)
