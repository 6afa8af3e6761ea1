"""Linear-basis articulated body model: joint regression, kinematics, skinning."""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from functools import cached_property

import numpy as np

from .errors import InvalidInputError
from .rotation import rodrigues, rodrigues_vjp

DEFAULT_SHAPE_DIM = 10
SHAPE_BOUND = 10.0


@dataclass(frozen=True, eq=False)
class BodyModelSpec:
    """Template, kinematic tree, shape bases and skinning weights of a body model.

    Arrays are stored densely; ``skin_weights`` is (V, K) even though model
    files store it as sparse ``[vertex, joint, weight]`` triples.
    """

    joint_names: list[str]
    parent: list[int]
    template_joints: np.ndarray  # (K, 3)
    joint_shape_basis: np.ndarray  # (K, 3, D)
    template_vertices: np.ndarray  # (V, 3)
    faces: np.ndarray  # (F, 3)
    skin_weights: np.ndarray  # (V, K)
    vertex_shape_basis: np.ndarray  # (V, 3, D)
    bend_joints: list[tuple[int, int, int]] = field(default_factory=list)
    hand_joints: list[int] = field(default_factory=list)
    jaw_joints: list[int] = field(default_factory=list)
    watertight: bool = False
    name: str = "body"

    def __post_init__(self):
        k = len(self.joint_names)
        for attr in ("template_joints", "joint_shape_basis", "template_vertices",
                     "vertex_shape_basis", "skin_weights"):
            object.__setattr__(self, attr, np.asarray(getattr(self, attr), dtype=float))
        object.__setattr__(self, "faces", np.asarray(self.faces, dtype=np.int64).reshape(-1, 3))
        object.__setattr__(self, "parent", [int(p) for p in self.parent])
        object.__setattr__(
            self, "bend_joints", [tuple(int(x) for x in b) for b in self.bend_joints]
        )
        if len(self.parent) != k or self.template_joints.shape != (k, 3):
            raise InvalidInputError("joint_names, parent and template_joints disagree on joint count")
        roots = [j for j, p in enumerate(self.parent) if p < 0]
        if roots != [0]:
            raise InvalidInputError(f"kinematic tree must have exactly one root at index 0, got {roots}")
        for j, p in enumerate(self.parent[1:], start=1):
            if not 0 <= p < j:
                raise InvalidInputError(
                    f"joint {j} has parent {p}; parents must precede children (no cycles)"
                )
        if self.joint_shape_basis.ndim != 3 or self.joint_shape_basis.shape[:2] != (k, 3):
            raise InvalidInputError("joint_shape_basis must have shape (K, 3, D)")
        nv = len(self.template_vertices)
        if self.vertex_shape_basis.shape != (nv, 3, self.shape_dim):
            raise InvalidInputError(
                "vertex_shape_basis must have shape (V, 3, D) with the same D as joint_shape_basis"
            )
        if self.skin_weights.shape != (nv, k):
            raise InvalidInputError("skin_weights must cover every vertex and joint")
        if nv:
            if (self.skin_weights < 0).any():
                raise InvalidInputError("skin weights must be nonnegative")
            if np.abs(self.skin_weights.sum(axis=1) - 1.0).max() > 1e-6:
                raise InvalidInputError("skin weights must sum to 1 per vertex")
        if len(self.faces) and (self.faces.min() < 0 or self.faces.max() >= nv):
            raise InvalidInputError("faces reference vertices out of range")
        for j, axis, sign in self.bend_joints:
            if not (0 < j < k and axis in (0, 1, 2) and sign in (-1, 1)):
                raise InvalidInputError(f"bad bend joint entry {(j, axis, sign)}")
        for group in (self.hand_joints, self.jaw_joints):
            if any(not 0 < j < k for j in group):
                raise InvalidInputError("hand/jaw joint indices must be non-root joints")

    @property
    def num_joints(self) -> int:
        return len(self.joint_names)

    @property
    def shape_dim(self) -> int:
        return self.joint_shape_basis.shape[2]

    @cached_property
    def levels(self) -> list[tuple[np.ndarray, np.ndarray]]:
        """Joints grouped by tree depth as (indices, parent indices), root excluded."""
        depth = [0] * self.num_joints
        for j in range(1, self.num_joints):
            depth[j] = depth[self.parent[j]] + 1
        out = []
        for d in range(1, max(depth, default=0) + 1):
            idx = np.array([j for j in range(self.num_joints) if depth[j] == d], dtype=np.int64)
            out.append((idx, np.asarray(self.parent, dtype=np.int64)[idx]))
        return out

    @cached_property
    def descendants(self) -> np.ndarray:
        """(K, K) boolean matrix; entry [j, d] is true when d lies in the subtree of j."""
        k = self.num_joints
        out = np.eye(k, dtype=bool)
        for j in range(k - 1, 0, -1):
            out[self.parent[j]] |= out[j]
        return out

    @cached_property
    def body_joints(self) -> np.ndarray:
        """Non-root joints that belong to neither the hand nor the jaw subsets."""
        excluded = set(self.hand_joints) | set(self.jaw_joints) | {0}
        return np.array([j for j in range(self.num_joints) if j not in excluded], dtype=np.int64)

    def joint_index(self, name: str) -> int:
        try:
            return self.joint_names.index(name)
        except ValueError:
            raise InvalidInputError(f"unknown joint name {name!r}") from None

    def to_dict(self) -> dict:
        rows, cols = np.nonzero(self.skin_weights)
        return {
            "version": "1.0",
            "name": self.name,
            "joint_names": list(self.joint_names),
            "parent": list(self.parent),
            "template_joints": self.template_joints.tolist(),
            "joint_shape_basis": self.joint_shape_basis.tolist(),
            "template_vertices": self.template_vertices.tolist(),
            "faces": self.faces.tolist(),
            "skin_weights": [
                [int(v), int(j), float(self.skin_weights[v, j])] for v, j in zip(rows, cols)
            ],
            "vertex_shape_basis": self.vertex_shape_basis.tolist(),
            "bend_joints": [list(b) for b in self.bend_joints],
            "hand_joints": list(self.hand_joints),
            "jaw_joints": list(self.jaw_joints),
            "watertight": bool(self.watertight),
        }

    @classmethod
    def from_dict(cls, data: dict) -> BodyModelSpec:
        try:
            k = len(data["joint_names"])
            verts = np.asarray(data.get("template_vertices", []), dtype=float).reshape(-1, 3)
            jsb = np.asarray(data["joint_shape_basis"], dtype=float)
            d = jsb.shape[2] if jsb.ndim == 3 else DEFAULT_SHAPE_DIM
            weights = np.zeros((len(verts), k))
            for v, j, w in data.get("skin_weights", []):
                weights[int(v), int(j)] = w
            vsb = np.asarray(data.get("vertex_shape_basis", []), dtype=float)
            if vsb.size == 0:
                vsb = np.zeros((len(verts), 3, d))
            return cls(
                joint_names=list(data["joint_names"]),
                parent=[-1 if p is None else p for p in data["parent"]],
                template_joints=np.asarray(data["template_joints"], dtype=float),
                joint_shape_basis=jsb,
                template_vertices=verts,
                faces=np.asarray(data.get("faces", []), dtype=np.int64).reshape(-1, 3),
                skin_weights=weights,
                vertex_shape_basis=vsb,
                bend_joints=[tuple(b) for b in data.get("bend_joints", [])],
                hand_joints=list(data.get("hand_joints", [])),
                jaw_joints=list(data.get("jaw_joints", [])),
                watertight=bool(data.get("watertight", False)),
                name=data.get("name", "body"),
            )
        except (KeyError, TypeError, IndexError) as exc:
            raise InvalidInputError(f"malformed model description: {exc}") from exc

    @cached_property
    def digest(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()


@dataclass
class PoseParams:
    """Root axis-angle plus one axis-angle per non-root joint (radians)."""

    root_rotation: np.ndarray
    joint_rotations: np.ndarray

    def __post_init__(self):
        self.root_rotation = np.asarray(self.root_rotation, dtype=float).reshape(3)
        self.joint_rotations = np.asarray(self.joint_rotations, dtype=float).reshape(-1, 3)

    @classmethod
    def rest(cls, spec: BodyModelSpec, root_rotation=(0.0, 0.0, 0.0)) -> PoseParams:
        return cls(np.asarray(root_rotation, dtype=float), np.zeros((spec.num_joints - 1, 3)))

    @classmethod
    def from_rotvecs(cls, rotvecs: np.ndarray) -> PoseParams:
        rotvecs = np.asarray(rotvecs, dtype=float)
        return cls(rotvecs[0].copy(), rotvecs[1:].copy())

    def rotvecs(self) -> np.ndarray:
        """All joint rotations stacked as (K, 3), root first."""
        return np.vstack([self.root_rotation[None], self.joint_rotations])


@dataclass
class PosedJoints:
    positions: np.ndarray  # (K, 3), model space
    rotations: np.ndarray  # (K, 3, 3) world rotation per joint


def _check_shape(spec: BodyModelSpec, beta) -> np.ndarray:
    beta = np.asarray(beta, dtype=float)
    if beta.shape[-1:] != (spec.shape_dim,):
        raise InvalidInputError(
            f"shape vector has dimension {beta.shape[-1:]} but the model expects {spec.shape_dim}"
        )
    return beta


def regress_joints(spec: BodyModelSpec, beta) -> np.ndarray:
    """Rest joint positions for shape coefficients ``beta`` (leading batch dims allowed)."""
    beta = _check_shape(spec, beta)
    return spec.template_joints + np.einsum("kcd,...d->...kc", spec.joint_shape_basis, beta)


def _check_pose(spec: BodyModelSpec, rotvecs: np.ndarray) -> np.ndarray:
    rotvecs = np.asarray(rotvecs, dtype=float)
    if rotvecs.shape[-2:] != (spec.num_joints, 3):
        raise InvalidInputError(
            f"pose has shape {rotvecs.shape[-2:]}, expected ({spec.num_joints}, 3)"
        )
    return rotvecs


@dataclass
class KinematicsCache:
    """Intermediates of a batched forward pass, reused by :func:`kinematics_vjp`."""

    rotvecs: np.ndarray  # (F, K, 3)
    rest_joints: np.ndarray  # (F, K, 3)
    local: np.ndarray  # (F, K, 3, 3)
    world: np.ndarray  # (F, K, 3, 3)
    positions: np.ndarray  # (F, K, 3)


def batch_kinematics(spec: BodyModelSpec, betas: np.ndarray, rotvecs: np.ndarray) -> KinematicsCache:
    """Forward kinematics for a batch of frames.

    ``betas`` is (F, D) and ``rotvecs`` (F, K, 3). Joints are processed one tree
    level at a time so the Python loop runs over depth, not joint count.
    """
    rest = regress_joints(spec, betas)
    rotvecs = _check_pose(spec, rotvecs)
    local = rodrigues(rotvecs)
    world = np.empty_like(local)
    pos = np.empty_like(rest)
    world[:, 0] = local[:, 0]
    pos[:, 0] = rest[:, 0]
    for idx, par in spec.levels:
        world[:, idx] = world[:, par] @ local[:, idx]
        offset = rest[:, idx] - rest[:, par]
        pos[:, idx] = pos[:, par] + np.einsum("fkab,fkb->fka", world[:, par], offset)
    return KinematicsCache(rotvecs, rest, local, world, pos)


def kinematics_vjp(spec: BodyModelSpec, cache: KinematicsCache, grad_pos: np.ndarray):
    """Back-propagate dL/d(joint positions) to (dL/dbeta, dL/drotvecs)."""
    g_pos = np.array(grad_pos, dtype=float)
    g_world = np.zeros_like(cache.world)
    g_rest = np.zeros_like(cache.rest_joints)
    g_local = np.empty_like(cache.local)
    for idx, par in reversed(spec.levels):
        w_par = cache.world[:, par]
        w_par_t = np.swapaxes(w_par, -1, -2)
        offset = cache.rest_joints[:, idx] - cache.rest_joints[:, par]
        g_child = g_pos[:, idx]
        np.add.at(g_pos, (slice(None), par), g_child)
        contrib = g_child[..., :, None] * offset[..., None, :]
        contrib += g_world[:, idx] @ np.swapaxes(cache.local[:, idx], -1, -2)
        np.add.at(g_world, (slice(None), par), contrib)
        g_off = np.einsum("fkab,fkb->fka", w_par_t, g_child)
        g_rest[:, idx] += g_off
        np.add.at(g_rest, (slice(None), par), -g_off)
        g_local[:, idx] = w_par_t @ g_world[:, idx]
    g_local[:, 0] = g_world[:, 0]
    g_rest[:, 0] += g_pos[:, 0]
    g_beta = np.einsum("kcd,fkc->fd", spec.joint_shape_basis, g_rest)
    g_rot = rodrigues_vjp(cache.rotvecs, g_local)
    return g_beta, g_rot


def forward_kinematics(spec: BodyModelSpec, beta, pose: PoseParams) -> PosedJoints:
    """Posed joint positions and world rotations for one frame."""
    beta = _check_shape(spec, beta)
    cache = batch_kinematics(spec, beta[None], pose.rotvecs()[None])
    return PosedJoints(cache.positions[0], cache.world[0])


def rest_vertices(spec: BodyModelSpec, beta) -> np.ndarray:
    beta = _check_shape(spec, beta)
    return spec.template_vertices + np.einsum("vcd,d->vc", spec.vertex_shape_basis, beta)


def skin_vertices(spec: BodyModelSpec, beta, pose: PoseParams) -> np.ndarray:
    """Linear blend skinning of the shaped template."""
    beta = _check_shape(spec, beta)
    verts = rest_vertices(spec, beta)
    cache = batch_kinematics(spec, beta[None], pose.rotvecs()[None])
    rest_j = cache.rest_joints[0]
    world = cache.world[0]
    posed_j = cache.positions[0]
    # per joint: G_j (v - J_j) + X_j, then blend by weights
    rel = verts[:, None, :] - rest_j[None, :, :]
    moved = np.einsum("kab,vkb->vka", world, rel) + posed_j[None]
    return np.einsum("vk,vka->va", spec.skin_weights, moved)
