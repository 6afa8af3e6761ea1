"""Evaluation metrics: mesh volume, vertex-to-surface error with ICP, jitter."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import InvalidInputError, MetricUnavailable
from .rotation import rodrigues

LEAF_SIZE = 4


def is_watertight(faces: np.ndarray) -> bool:
    """True when every directed edge is matched by exactly one opposite edge."""
    faces = np.asarray(faces, dtype=np.int64).reshape(-1, 3)
    if not len(faces):
        return False
    edges = np.concatenate([faces[:, [0, 1]], faces[:, [1, 2]], faces[:, [2, 0]]])
    directed, counts = np.unique(edges, axis=0, return_counts=True)
    if (counts != 1).any():
        return False
    fwd = {tuple(e) for e in directed.tolist()}
    return all((b, a) in fwd for a, b in fwd)


@dataclass
class TriMesh:
    vertices: np.ndarray
    faces: np.ndarray
    watertight: bool | None = None  # None: determined from the faces

    def __post_init__(self):
        self.vertices = np.asarray(self.vertices, dtype=float).reshape(-1, 3)
        self.faces = np.asarray(self.faces, dtype=np.int64).reshape(-1, 3)
        if len(self.faces) and (self.faces.min() < 0 or self.faces.max() >= len(self.vertices)):
            raise InvalidInputError("face indices out of range")
        if self.watertight is None:
            self.watertight = is_watertight(self.faces)

    def triangles(self) -> np.ndarray:
        return self.vertices[self.faces]

    def transformed(self, rotation, translation) -> TriMesh:
        v = self.vertices @ np.asarray(rotation, dtype=float).T + np.asarray(translation, dtype=float)
        return TriMesh(v, self.faces, self.watertight)


def unit_cube() -> TriMesh:
    v = np.array([[x, y, z] for x in (0, 1) for y in (0, 1) for z in (0, 1)], dtype=float)
    f = [
        (0, 1, 3), (0, 3, 2), (4, 6, 7), (4, 7, 5), (0, 4, 5), (0, 5, 1),
        (2, 3, 7), (2, 7, 6), (0, 2, 6), (0, 6, 4), (1, 5, 7), (1, 7, 3),
    ]
    return TriMesh(v, f)


def icosphere(subdivisions: int = 3, radius: float = 1.0) -> TriMesh:
    t = (1.0 + 5.0**0.5) / 2.0
    verts = [(-1, t, 0), (1, t, 0), (-1, -t, 0), (1, -t, 0), (0, -1, t), (0, 1, t),
             (0, -1, -t), (0, 1, -t), (t, 0, -1), (t, 0, 1), (-t, 0, -1), (-t, 0, 1)]
    verts = [np.array(v, dtype=float) / np.linalg.norm(v) for v in verts]
    faces = [(0, 11, 5), (0, 5, 1), (0, 1, 7), (0, 7, 10), (0, 10, 11), (1, 5, 9), (5, 11, 4),
             (11, 10, 2), (10, 7, 6), (7, 1, 8), (3, 9, 4), (3, 4, 2), (3, 2, 6), (3, 6, 8),
             (3, 8, 9), (4, 9, 5), (2, 4, 11), (6, 2, 10), (8, 6, 7), (9, 8, 1)]
    for _ in range(subdivisions):
        cache: dict[tuple[int, int], int] = {}

        def mid(a, b):
            key = (min(a, b), max(a, b))
            if key not in cache:
                m = verts[a] + verts[b]
                verts.append(m / np.linalg.norm(m))
                cache[key] = len(verts) - 1
            return cache[key]

        new = []
        for a, b, c in faces:
            ab, bc, ca = mid(a, b), mid(b, c), mid(c, a)
            new += [(a, ab, ca), (b, bc, ab), (c, ca, bc), (ab, bc, ca)]
        faces = new
    return TriMesh(np.array(verts) * radius, faces)


# volume -------------------------------------------------------------------

def mesh_volume(mesh: TriMesh) -> float:
    """Enclosed volume in cubic meters (absolute value of the signed tetrahedra sum)."""
    if not mesh.watertight:
        raise MetricUnavailable("volume needs a watertight mesh")
    tri = mesh.triangles()
    # centering keeps the sum well conditioned for meshes far from the origin
    tri = tri - mesh.vertices.mean(axis=0)
    signed = np.einsum("ij,ij->i", tri[:, 0], np.cross(tri[:, 1], tri[:, 2])).sum() / 6.0
    return float(abs(signed))


def mean_volume_error(estimated, truth) -> float:
    """Mean absolute per-frame volume difference in cubic decimeters.

    Frames whose ground truth is ``None`` are skipped.
    """
    estimated, truth = list(estimated), list(truth)
    if len(estimated) != len(truth):
        raise InvalidInputError("estimated and ground-truth sequences differ in length")
    diffs = [abs(mesh_volume(e) - mesh_volume(t)) for e, t in zip(estimated, truth) if t is not None]
    if not diffs:
        raise MetricUnavailable("no frame has ground truth")
    return float(np.mean(diffs)) * 1000.0


# closest point on triangles ----------------------------------------------

def closest_on_triangles(p: np.ndarray, a: np.ndarray, b: np.ndarray, c: np.ndarray) -> np.ndarray:
    """Closest points on triangles (a, b, c) to points p; all (M, 3), row-wise.

    Voronoi-region classification after Ericson, Real-Time Collision Detection.
    """
    ab, ac, ap = b - a, c - a, p - a
    d1 = np.einsum("ij,ij->i", ab, ap)
    d2 = np.einsum("ij,ij->i", ac, ap)
    bp = p - b
    d3 = np.einsum("ij,ij->i", ab, bp)
    d4 = np.einsum("ij,ij->i", ac, bp)
    cp = p - c
    d5 = np.einsum("ij,ij->i", ab, cp)
    d6 = np.einsum("ij,ij->i", ac, cp)
    va = d3 * d6 - d5 * d4
    vb = d5 * d2 - d1 * d6
    vc = d1 * d4 - d3 * d2

    with np.errstate(divide="ignore", invalid="ignore"):
        denom = va + vb + vc
        v_in = vb / denom
        w_in = vc / denom
        out = a + ab * v_in[:, None] + ac * w_in[:, None]
        done = np.zeros(len(p), dtype=bool)

        def assign(mask, value):
            nonlocal done
            mask = mask & ~done
            out[mask] = value[mask]
            done |= mask

        assign((d1 <= 0) & (d2 <= 0), a)
        assign((d3 >= 0) & (d4 <= d3), b)
        t_ab = d1 / (d1 - d3)
        assign((vc <= 0) & (d1 >= 0) & (d3 <= 0), a + ab * t_ab[:, None])
        assign((d6 >= 0) & (d5 <= d6), c)
        t_ac = d2 / (d2 - d6)
        assign((vb <= 0) & (d2 >= 0) & (d6 <= 0), a + ac * t_ac[:, None])
        t_bc = (d4 - d3) / ((d4 - d3) + (d5 - d6))
        assign((va <= 0) & ((d4 - d3) >= 0) & ((d5 - d6) >= 0), b + (c - b) * t_bc[:, None])
    # degenerate triangles that slipped through: fall back to the nearest vertex
    bad = ~np.all(np.isfinite(out), axis=1)
    if bad.any():
        cand = np.stack([a[bad], b[bad], c[bad]], axis=1)
        k = np.argmin(np.square(cand - p[bad, None]).sum(axis=2), axis=1)
        out[bad] = cand[np.arange(len(k)), k]
    return out


def closest_point_brute_force(mesh: TriMesh, queries) -> tuple[np.ndarray, np.ndarray]:
    """Reference closest points by checking every triangle; (M, 3) points and (M,) distances."""
    q = np.asarray(queries, dtype=float).reshape(-1, 3)
    tri = mesh.triangles()
    nf = len(tri)
    best_d = np.full(len(q), np.inf)
    best_p = np.zeros_like(q)
    for i in range(len(q)):
        pts = closest_on_triangles(np.repeat(q[i:i + 1], nf, axis=0), tri[:, 0], tri[:, 1], tri[:, 2])
        d2 = np.square(pts - q[i]).sum(axis=1)
        k = int(np.argmin(d2))
        best_d[i], best_p[i] = d2[k], pts[k]
    return best_p, np.sqrt(best_d)


# AABB tree ------------------------------------------------------------------

@dataclass
class AabbTree:
    """Flat binary box hierarchy over the faces of a mesh.

    Internal nodes have ``left``/``right`` >= 0; leaves have ``left == -1`` and
    list up to four faces in ``leaf_faces`` (padded with -1).
    """

    mesh: TriMesh
    lo: np.ndarray  # (N, 3)
    hi: np.ndarray  # (N, 3)
    left: np.ndarray
    right: np.ndarray
    leaf_faces: np.ndarray  # (N, LEAF_SIZE)

    @property
    def num_nodes(self) -> int:
        return len(self.lo)


def build_aabb_tree(mesh: TriMesh) -> AabbTree:
    if not len(mesh.faces):
        raise InvalidInputError("cannot build a tree over an empty mesh")
    tri = mesh.triangles()
    tlo, thi = tri.min(axis=1), tri.max(axis=1)
    centroid = tri.mean(axis=1)
    lo, hi, left, right, leaves = [], [], [], [], []

    def build(ids: np.ndarray) -> int:
        node = len(lo)
        lo.append(tlo[ids].min(axis=0))
        hi.append(thi[ids].max(axis=0))
        left.append(-1)
        right.append(-1)
        slot = np.full(LEAF_SIZE, -1, dtype=np.int64)
        leaves.append(slot)
        if len(ids) <= LEAF_SIZE:
            slot[:len(ids)] = ids
            return node
        c = centroid[ids]
        axis = int(np.argmax(c.max(axis=0) - c.min(axis=0)))
        order = ids[np.argsort(c[:, axis], kind="stable")]
        half = len(order) // 2
        left[node] = build(order[:half])
        right[node] = build(order[half:])
        return node

    build(np.arange(len(mesh.faces)))
    return AabbTree(mesh, np.array(lo), np.array(hi), np.array(left), np.array(right), np.array(leaves))


def _box_dist2(tree: AabbTree, nodes: np.ndarray, q: np.ndarray) -> np.ndarray:
    d = np.maximum(tree.lo[nodes] - q, 0.0) + np.maximum(q - tree.hi[nodes], 0.0)
    return np.square(d).sum(axis=1)


def _leaf_candidates(tree, qidx, nodes, queries, best_d, best_p):
    faces = tree.leaf_faces[nodes]  # (P, LEAF_SIZE)
    qi = np.repeat(qidx, LEAF_SIZE)
    fi = faces.reshape(-1)
    keep = fi >= 0
    qi, fi = qi[keep], fi[keep]
    tri = tree.mesh.vertices[tree.mesh.faces[fi]]
    pts = closest_on_triangles(queries[qi], tri[:, 0], tri[:, 1], tri[:, 2])
    d2 = np.square(pts - queries[qi]).sum(axis=1)
    # keep the lowest distance per query; ties go to the lowest face index
    order = np.lexsort((fi, d2, qi))
    qi, d2, pts = qi[order], d2[order], pts[order]
    first = np.ones(len(qi), dtype=bool)
    first[1:] = qi[1:] != qi[:-1]
    qi, d2, pts = qi[first], d2[first], pts[first]
    better = d2 < best_d[qi]
    best_d[qi[better]] = d2[better]
    best_p[qi[better]] = pts[better]


def closest_point(tree: AabbTree, queries) -> tuple[np.ndarray, np.ndarray]:
    """Exact closest surface points and distances for one or many queries.

    All queries descend the tree together; a (query, node) pair is dropped as
    soon as the node's box is farther than the best distance found so far.
    """
    q = np.asarray(queries, dtype=float)
    single = q.ndim == 1
    q = q.reshape(-1, 3)
    m = len(q)
    best_d = np.full(m, np.inf)
    best_p = np.zeros_like(q)

    # greedy descent for a first upper bound
    node = np.zeros(m, dtype=np.int64)
    while True:
        inner = tree.left[node] >= 0
        if not inner.any():
            break
        l, r = tree.left[node[inner]], tree.right[node[inner]]
        qi = np.flatnonzero(inner)
        go_left = _box_dist2(tree, l, q[qi]) <= _box_dist2(tree, r, q[qi])
        node[qi] = np.where(go_left, l, r)
    _leaf_candidates(tree, np.arange(m), node, q, best_d, best_p)

    qidx = np.arange(m)
    nodes = np.zeros(m, dtype=np.int64)
    while len(qidx):
        keep = _box_dist2(tree, nodes, q[qidx]) <= best_d[qidx]
        qidx, nodes = qidx[keep], nodes[keep]
        leaf = tree.left[nodes] < 0
        if leaf.any():
            _leaf_candidates(tree, qidx[leaf], nodes[leaf], q, best_d, best_p)
        inner = ~leaf
        qidx = np.concatenate([qidx[inner], qidx[inner]])
        nodes = np.concatenate([tree.left[nodes[inner]], tree.right[nodes[inner]]])
    dist = np.sqrt(best_d)
    if single:
        return best_p[0], float(dist[0])
    return best_p, dist


# rigid alignment ----------------------------------------------------------

def kabsch(source: np.ndarray, target: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Rotation and translation minimizing Σ‖R s + t − d‖² over paired points."""
    cs, ct = source.mean(axis=0), target.mean(axis=0)
    h = (source - cs).T @ (target - ct)
    u, _, vt = np.linalg.svd(h)
    flip = np.sign(np.linalg.det(vt.T @ u.T))
    rot = vt.T @ np.diag([1.0, 1.0, flip if flip != 0 else 1.0]) @ u.T
    return rot, ct - rot @ cs


@dataclass
class IcpResult:
    rotation: np.ndarray
    translation: np.ndarray
    rms: float
    iterations: int

    def apply(self, points: np.ndarray) -> np.ndarray:
        return points @ self.rotation.T + self.translation


def _plane_step(pts: np.ndarray, closest: np.ndarray, dist: np.ndarray):
    """Gauss-Newton step on the summed squared point-to-surface distances.

    The unit vector from the closest point to the query is the gradient of the
    distance field, so each residual is linearized as n . (R p + t - q).
    """
    valid = dist > 1e-12
    if valid.sum() < 6:
        return None
    p, q = pts[valid], closest[valid]
    n = (p - q) / dist[valid, None]
    center = p.mean(axis=0)
    a = np.hstack([np.cross(p - center, n), n])
    b = -np.einsum("ij,ij->i", n, p - q)
    sol, *_ = np.linalg.lstsq(a, b, rcond=None)
    if not np.all(np.isfinite(sol)):
        return None
    rot = rodrigues(sol[:3])
    return rot, center + sol[3:] - rot @ center


def icp_align(source: TriMesh, target: TriMesh, max_iters: int = 100, tol: float = 1e-7,
              tree: AabbTree | None = None) -> IcpResult:
    """Rigid ICP of the source vertices onto the target surface.

    Each iteration tries a point-to-plane Gauss-Newton step and falls back to
    the point-to-point (Kabsch) step when that does not lower the RMS distance.
    Stops when the RMS improves by less than ``tol`` meters or after
    ``max_iters`` iterations. ``iterations`` counts transform updates applied.
    """
    if not len(source.vertices) or not len(target.faces):
        raise InvalidInputError("ICP needs nonempty meshes")
    tree = tree or build_aabb_tree(target)
    rot, trans = np.eye(3), np.zeros(3)
    pts = source.vertices.copy()
    closest, dist = closest_point(tree, pts)
    rms = float(np.sqrt(np.mean(dist**2)))
    it = 0
    while it < max_iters and rms > 0.0:
        accepted = None
        for step in (_plane_step(pts, closest, dist), kabsch(pts, closest)):
            if step is None:
                continue
            moved = pts @ step[0].T + step[1]
            new_closest, new_dist = closest_point(tree, moved)
            new_rms = float(np.sqrt(np.mean(new_dist**2)))
            if new_rms < rms:
                accepted = step, moved, new_closest, new_dist, new_rms
                break
        if accepted is None:
            break
        (r_step, t_step), pts, closest, dist, new_rms = accepted
        rot, trans = r_step @ rot, r_step @ trans + t_step
        it += 1
        improvement = rms - new_rms
        rms = new_rms
        if improvement < tol:
            break
    return IcpResult(rot, trans, rms, it)


def vertex_to_surface_error(estimated: TriMesh, truth: TriMesh, max_iters: int = 100,
                            tol: float = 1e-7) -> float:
    """Mean distance (cm) from the ICP-aligned estimated vertices to the truth surface."""
    tree = build_aabb_tree(truth)
    res = icp_align(estimated, truth, max_iters, tol, tree)
    _, dist = closest_point(tree, res.apply(estimated.vertices))
    return float(dist.mean()) * 100.0


# motion -------------------------------------------------------------------

def jitter_statistic(trajectories) -> float:
    """Mean norm of the second temporal difference over interior frames and joints (meters).

    Accepts (N, 3) for one joint or (N, K, 3).
    """
    x = np.asarray(trajectories, dtype=float)
    if x.ndim == 2:
        x = x[:, None, :]
    if x.ndim != 3 or x.shape[0] < 3:
        raise InvalidInputError("jitter needs at least three frames of (K, 3) positions")
    second = x[2:] - 2.0 * x[1:-1] + x[:-2]
    return float(np.linalg.norm(second, axis=-1).mean())


def mean_joint_error(estimated, truth, root: int = 0) -> float:
    """Mean 3D joint distance after aligning both skeletons at the root joint (meters)."""
    est = np.asarray(estimated, dtype=float)
    gt = np.asarray(truth, dtype=float)
    if est.shape != gt.shape or est.ndim != 3:
        raise InvalidInputError("joint arrays must both be (N, K, 3)")
    return float(np.linalg.norm((est - est[:, root:root + 1]) - (gt - gt[:, root:root + 1]), axis=-1).mean())
