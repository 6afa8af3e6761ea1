"""Bundled default humanoid: 24 body joints, 15 joints per hand and a jaw.

The mesh is a set of closed low-poly capsules, one per bone, each rigidly
skinned to the bone's proximal joint, so the whole surface is a closed
2-manifold and its volume depends on shape only.

Every shape direction lengthens some bones and shortens others with zero net
change in total bone length. No shape vector can then mimic a uniform scaling
(which a camera depth change would absorb), and out-of-plane tilts, which only
foreshorten, cannot explain a shape whose bones got longer.
"""

from __future__ import annotations

from functools import lru_cache

import numpy as np

from .model import BodyModelSpec

_BODY = [
    # name, parent, rest position (m); y up, subject facing +z, left = +x
    ("pelvis", None, (0.0, 0.0, 0.0)),
    ("left_hip", "pelvis", (0.09, -0.08, 0.0)),
    ("right_hip", "pelvis", (-0.09, -0.08, 0.0)),
    ("spine1", "pelvis", (0.0, 0.11, 0.0)),
    ("left_knee", "left_hip", (0.10, -0.48, 0.0)),
    ("right_knee", "right_hip", (-0.10, -0.48, 0.0)),
    ("spine2", "spine1", (0.0, 0.23, 0.0)),
    ("left_ankle", "left_knee", (0.10, -0.88, 0.0)),
    ("right_ankle", "right_knee", (-0.10, -0.88, 0.0)),
    ("spine3", "spine2", (0.0, 0.35, 0.0)),
    ("left_foot", "left_ankle", (0.10, -0.93, 0.12)),
    ("right_foot", "right_ankle", (-0.10, -0.93, 0.12)),
    ("neck", "spine3", (0.0, 0.53, 0.0)),
    ("left_collar", "spine3", (0.07, 0.47, 0.0)),
    ("right_collar", "spine3", (-0.07, 0.47, 0.0)),
    ("head", "neck", (0.0, 0.64, 0.0)),
    ("left_shoulder", "left_collar", (0.18, 0.47, 0.0)),
    ("right_shoulder", "right_collar", (-0.18, 0.47, 0.0)),
    ("left_elbow", "left_shoulder", (0.45, 0.47, 0.0)),
    ("right_elbow", "right_shoulder", (-0.45, 0.47, 0.0)),
    ("left_wrist", "left_elbow", (0.70, 0.47, 0.0)),
    ("right_wrist", "right_elbow", (-0.70, 0.47, 0.0)),
    ("left_hand", "left_wrist", (0.79, 0.47, 0.0)),
    ("right_hand", "right_wrist", (-0.79, 0.47, 0.0)),
]

_FINGERS = ("thumb", "index", "middle", "ring", "pinky")
# finger base offsets from the wrist (left hand; mirrored in x for the right)
_FINGER_BASE = {
    "thumb": (0.03, -0.02, 0.04),
    "index": (0.09, 0.0, 0.03),
    "middle": (0.095, 0.0, 0.01),
    "ring": (0.09, 0.0, -0.01),
    "pinky": (0.085, 0.0, -0.03),
}
_SEGMENT = 0.025

# (bone child joint names lengthened, names shortened, girth change per unit)
_SHAPE_COMPONENTS = [
    (["left_knee", "right_knee", "left_ankle", "right_ankle"], ["spine1", "spine2", "spine3", "neck"], 0.03),
    (["left_elbow", "right_elbow", "left_wrist", "right_wrist"], ["left_knee", "right_knee"], -0.02),
    (["left_shoulder", "right_shoulder", "left_collar", "right_collar"], ["left_hip", "right_hip"], 0.02),
    (["neck", "head"], ["spine2", "spine3"], 0.0),
    (["left_knee", "right_knee"], ["left_ankle", "right_ankle"], 0.04),
    (["left_elbow", "right_elbow"], ["left_wrist", "right_wrist"], -0.03),
    (["left_hip", "right_hip"], ["spine1", "spine2"], 0.05),
    (["spine3", "neck"], ["spine1"], 0.0),
    (["left_hand", "right_hand", "left_wrist", "right_wrist"], ["left_elbow", "right_elbow"], 0.02),
    (["head", "left_hip", "right_hip"], ["neck", "left_collar", "right_collar"], -0.04),
]
# relative bone length change per unit shape coefficient
_LENGTH_RATE = 0.04

# capsule radius per bone, keyed by the bone's child joint
_RADIUS = {
    "left_hip": 0.07, "right_hip": 0.07, "spine1": 0.09, "spine2": 0.10, "spine3": 0.10,
    "neck": 0.07, "head": 0.05, "left_collar": 0.05, "right_collar": 0.05,
    "left_shoulder": 0.05, "right_shoulder": 0.05, "left_elbow": 0.045, "right_elbow": 0.045,
    "left_wrist": 0.035, "right_wrist": 0.035, "left_hand": 0.03, "right_hand": 0.03,
    "left_knee": 0.07, "right_knee": 0.07, "left_ankle": 0.05, "right_ankle": 0.05,
    "left_foot": 0.035, "right_foot": 0.035,
}


def _skeleton():
    names, parents, pos = [], [], []
    for name, par, p in _BODY:
        names.append(name)
        parents.append(-1 if par is None else names.index(par))
        pos.append(p)
    hand_joints = []
    for side, sx in (("left", 1.0), ("right", -1.0)):
        wrist = names.index(f"{side}_wrist")
        wpos = np.array(pos[wrist])
        for finger in _FINGERS:
            base = np.array(_FINGER_BASE[finger]) * (sx, 1.0, 1.0)
            direction = np.array([sx, 0.0, 0.0]) if finger != "thumb" else np.array([sx, -0.4, 0.6]) / np.hypot(1, np.hypot(0.4, 0.6))
            par = wrist
            for seg in range(3):
                names.append(f"{side}_{finger}{seg + 1}")
                parents.append(par)
                pos.append(tuple(wpos + base + seg * _SEGMENT * direction))
                par = len(names) - 1
                hand_joints.append(par)
    names.append("jaw")
    parents.append(names.index("head"))
    pos.append((0.0, 0.60, 0.06))
    jaw_joints = [len(names) - 1]
    return names, parents, np.array(pos, dtype=float), hand_joints, jaw_joints


def _joint_shape_basis(names, parents, pos):
    k = len(names)
    d = len(_SHAPE_COMPONENTS)
    # per-bone length rate (bone identified by its child joint)
    rates = np.zeros((k, d))
    for c, (longer, shorter, _) in enumerate(_SHAPE_COMPONENTS):
        idx_l = [names.index(n) for n in longer]
        idx_s = [names.index(n) for n in shorter]
        lengths = np.linalg.norm(pos - pos[np.maximum(parents, 0)], axis=1)
        total_l = lengths[idx_l].sum()
        total_s = lengths[idx_s].sum()
        for j in idx_l:
            rates[j, c] += _LENGTH_RATE * lengths[j]
        for j in idx_s:
            # scaled so the total length change of the component is zero
            rates[j, c] -= _LENGTH_RATE * lengths[j] * total_l / total_s
    basis = np.zeros((k, 3, d))
    for j in range(1, k):
        p = parents[j]
        bone = pos[j] - pos[p]
        direction = bone / np.linalg.norm(bone)
        basis[j] = basis[p] + direction[:, None] * rates[j][None, :]
    return basis


def _capsule(p0, p1, radius, sides, cap):
    """Closed prism-with-cone-caps along p0->p1; faces wound outward."""
    axis = p1 - p0
    length = np.linalg.norm(axis)
    u = axis / length
    helper = np.array([0.0, 0.0, 1.0]) if abs(u[2]) < 0.9 else np.array([1.0, 0.0, 0.0])
    e1 = np.cross(u, helper)
    e1 /= np.linalg.norm(e1)
    e2 = np.cross(u, e1)
    ang = 2.0 * np.pi * np.arange(sides) / sides
    normals = np.cos(ang)[:, None] * e1 + np.sin(ang)[:, None] * e2
    # (along-bone fraction s, radial factor, normal) per vertex
    verts = []
    for s in (0.0, 1.0):
        for n in normals:
            verts.append((s, 1.0, n))
    verts.append((-cap * radius / length, 0.0, np.zeros(3)))
    verts.append((1.0 + cap * radius / length, 0.0, np.zeros(3)))
    faces = []
    for i in range(sides):
        a, b = i, (i + 1) % sides
        faces.append((a, b, sides + b))
        faces.append((a, sides + b, sides + a))
        faces.append((2 * sides, b, a))
        faces.append((2 * sides + 1, sides + a, sides + b))
    return verts, faces


def _build_mesh(names, parents, pos, basis, hand_joints, jaw_joints):
    k = len(names)
    d = basis.shape[2]
    girth = np.array([g for *_, g in _SHAPE_COMPONENTS])
    parts = []  # (skin joint, start joint, end joint or None, end offset, radius, sides)
    for j in range(1, k):
        p = parents[j]
        if j in hand_joints:
            continue
        if names[j] == "jaw":
            continue
        parts.append((p, p, j, None, _RADIUS[names[j]], 6))
    extras = [
        ("head", np.array([0.0, 0.16, 0.0]), 0.09, 6),
        ("jaw", np.array([0.0, -0.03, 0.05]), 0.03, 4),
        ("left_foot", np.array([0.0, 0.0, 0.07]), 0.03, 4),
        ("right_foot", np.array([0.0, 0.0, 0.07]), 0.03, 4),
    ]
    for name, offset, radius, sides in extras:
        j = names.index(name)
        parts.append((j, j, None, offset, radius, sides))
    for j in hand_joints:
        children = [c for c in range(k) if parents[c] == j]
        if children:
            parts.append((j, j, children[0], None, 0.008, 3))
        else:
            tip = pos[j] - pos[parents[j]]
            parts.append((j, j, None, tip / np.linalg.norm(tip) * 0.02, 0.007, 3))
    # palms from wrist to hand end joint are covered by the body-bone loop
    verts, vbasis, faces, weights = [], [], [], []
    for skin_j, a, b, offset, radius, sides in parts:
        p0 = pos[a]
        p1 = pos[b] if b is not None else pos[a] + offset
        b0 = basis[a]
        b1 = basis[b] if b is not None else basis[a]
        local_v, local_f = _capsule(p0, p1, radius, sides, cap=0.6)
        base = len(verts)
        for s, rad, n in local_v:
            verts.append(p0 + s * (p1 - p0) + radius * rad * n)
            vb = (1.0 - s) * b0 + s * b1
            vb = vb + radius * rad * n[:, None] * girth[None, :]
            vbasis.append(vb)
            w = np.zeros(k)
            w[skin_j] = 1.0
            weights.append(w)
        faces.extend((base + f0, base + f1, base + f2) for f0, f1, f2 in local_f)
    return (
        np.array(verts),
        np.array(vbasis).reshape(-1, 3, d),
        np.array(faces, dtype=np.int64),
        np.array(weights),
    )


@lru_cache(maxsize=1)
def _default_arrays():
    names, parents, pos, hand_joints, jaw_joints = _skeleton()
    basis = _joint_shape_basis(names, parents, pos)
    verts, vbasis, faces, weights = _build_mesh(names, parents, pos, basis, hand_joints, jaw_joints)
    return names, parents, pos, basis, verts, vbasis, faces, weights, hand_joints, jaw_joints


def default_body_model(hands: bool = True, jaw: bool = True) -> BodyModelSpec:
    """The bundled humanoid; ``hands``/``jaw`` drop those subtrees when False."""
    names, parents, pos, basis, verts, vbasis, faces, weights, hand_joints, jaw_joints = _default_arrays()
    keep = [j for j in range(len(names))
            if (hands or j not in hand_joints) and (jaw or j not in jaw_joints)]
    remap = {old: new for new, old in enumerate(keep)}
    vkeep = np.flatnonzero(weights[:, keep].sum(axis=1) > 0.5)
    vremap = -np.ones(len(verts), dtype=np.int64)
    vremap[vkeep] = np.arange(len(vkeep))
    fkeep = faces[(vremap[faces] >= 0).all(axis=1)]
    bend = [
        (names.index("left_knee"), 0, -1),
        (names.index("right_knee"), 0, -1),
        (names.index("left_elbow"), 1, 1),
        (names.index("right_elbow"), 1, -1),
    ]
    return BodyModelSpec(
        joint_names=[names[j] for j in keep],
        parent=[-1 if parents[j] < 0 else remap[parents[j]] for j in keep],
        template_joints=pos[keep],
        joint_shape_basis=basis[keep],
        template_vertices=verts[vkeep],
        faces=vremap[fkeep],
        skin_weights=weights[vkeep][:, keep],
        vertex_shape_basis=vbasis[vkeep],
        bend_joints=[(remap[j], a, s) for j, a, s in bend],
        hand_joints=[remap[j] for j in hand_joints if j in remap],
        jaw_joints=[remap[j] for j in jaw_joints if j in remap],
        watertight=True,
        name="seqfit-default" + ("" if hands else "-nohands") + ("" if jaw else "-nojaw"),
    )


TORSO_JOINTS = ("left_shoulder", "right_shoulder", "left_hip", "right_hip")


def toy_model(num_joints: int = 6, shape_dim: int = 3, seed: int = 0) -> BodyModelSpec:
    """Small random skeleton for tests and examples.

    Joint 0 is the root; the last two joints are flagged as hand and jaw joints,
    joint 2 as a hinge. Shoulder/hip names are assigned to joints 1..4 so depth
    initialization works. The mesh is one tetrahedron per joint.
    """
    if num_joints < 6:
        raise ValueError("toy_model needs at least 6 joints")
    rng = np.random.default_rng(seed)
    parents = [-1] + [int(rng.integers(0, j)) if j > 1 else 0 for j in range(1, num_joints)]
    pos = np.zeros((num_joints, 3))
    for j in range(1, num_joints):
        pos[j] = pos[parents[j]] + rng.normal(scale=0.2, size=3) * (1.0, 1.0, 0.3)
    names = [f"joint{j}" for j in range(num_joints)]
    names[1:5] = list(TORSO_JOINTS)
    basis = rng.normal(scale=0.02, size=(num_joints, 3, shape_dim))
    basis[0] = 0.0
    tet = np.array([[0, 0, 0], [0.05, 0, 0], [0, 0.05, 0], [0, 0, 0.05]], dtype=float)
    tet_faces = np.array([[0, 2, 1], [0, 1, 3], [0, 3, 2], [1, 2, 3]])
    verts = np.concatenate([pos[j] + tet for j in range(num_joints)])
    faces = np.concatenate([tet_faces + 4 * j for j in range(num_joints)])
    weights = np.zeros((4 * num_joints, num_joints))
    for j in range(num_joints):
        weights[4 * j:4 * j + 4, j] = 1.0
    vbasis = np.repeat(basis, 4, axis=0)
    return BodyModelSpec(
        joint_names=names,
        parent=parents,
        template_joints=pos,
        joint_shape_basis=basis,
        template_vertices=verts,
        faces=faces,
        skin_weights=weights,
        vertex_shape_basis=vbasis,
        bend_joints=[(2, 0, -1)],
        hand_joints=[num_joints - 2],
        jaw_joints=[num_joints - 1],
        watertight=True,
        name=f"toy{num_joints}",
    )
