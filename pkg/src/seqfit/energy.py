"""Batched fitting objective over a set of frames, with its exact gradient.

One :class:`FitProblem` covers every objective the pipeline minimizes: single
frames (phase 1), a subset with one shared shape plus the shared-shape prior
(phase 2), and windows with temporal terms and fixed context frames (phase 3).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DegenerateProjectionError, InvalidInputError
from .model import SHAPE_BOUND, BodyModelSpec, batch_kinematics, kinematics_vjp
from .objectives import DEFAULT_SIGMA, FrameParams, KeypointFrame, Stage, joint_groups
from .camera import MIN_DEPTH
from .model import PoseParams
from .optim import ParamBlock, ParamLayout


@dataclass
class Temporal:
    """Temporal terms of a problem.

    ``triples`` rows are (previous, current, next) indices into the stacked
    joints [optimized frames..., context frames...]; ``context`` holds the fixed
    joints (C, K, 3) of frames outside the optimized set.
    """

    triples: np.ndarray
    context: np.ndarray
    weight: float


class FitProblem:
    def __init__(
        self,
        spec: BodyModelSpec,
        frames: list[KeypointFrame | None],
        focal_length: float,
        principal_point,
        *,
        shared_shape: bool = False,
        freeze: tuple[str, ...] = (),
        temporal: Temporal | None = None,
        shared_prior: bool = False,
        gamma=None,
        sigma: float = DEFAULT_SIGMA,
        scale: float | None = None,
        frame_ids: list[int] | None = None,
    ):
        self.spec = spec
        self.n = len(frames)
        if self.n == 0:
            raise InvalidInputError("a fitting problem needs at least one frame")
        self.focal = float(focal_length)
        self.center = np.asarray(principal_point, dtype=float).reshape(2)
        self.shared_shape = shared_shape
        self.temporal = temporal
        self.shared_prior = shared_prior
        self.sigma = float(sigma)
        # mean over frames unless told otherwise
        self.scale = 1.0 / self.n if scale is None else float(scale)
        self.frame_ids = list(range(self.n)) if frame_ids is None else list(frame_ids)
        k = spec.num_joints
        self.targets = np.zeros((self.n, k, 2))
        self.conf = np.zeros((self.n, k))
        for i, fr in enumerate(frames):
            if fr is not None:
                self.targets[i], self.conf[i] = fr.per_joint(k)
        self.gamma = np.ones(k) if gamma is None else np.asarray(gamma, dtype=float)
        self.groups = joint_groups(spec)
        self.body = spec.body_joints
        self.hands = np.asarray(spec.hand_joints, dtype=np.int64)
        self.jaw = np.asarray(spec.jaw_joints, dtype=np.int64)
        bend = np.asarray(spec.bend_joints, dtype=np.int64).reshape(-1, 3)
        self.bend_j, self.bend_axis, self.bend_sign = bend[:, 0], bend[:, 1], bend[:, 2].astype(float)

        layout = ParamLayout()
        d = spec.shape_dim
        if shared_shape:
            layout.add("shape", d, bound=SHAPE_BOUND)
        for i in range(self.n):
            if not shared_shape:
                layout.add(f"shape/{i}", d, bound=SHAPE_BOUND)
            layout.add(f"root/{i}", 3, rotation=True)
            layout.add(f"pose/{i}", 3 * (k - 1), rotation=True)
            layout.add(f"camera/{i}", 3)
        self.layout = layout.freeze(*freeze) if freeze else layout
        self._build_index()

    def _build_index(self):
        k = self.spec.num_joints
        lay = self.layout
        self._root = np.array([lay[f"root/{i}"].start for i in range(self.n)])
        self._pose = np.array([lay[f"pose/{i}"].start for i in range(self.n)])
        self._cam = np.array([lay[f"camera/{i}"].start for i in range(self.n)])
        d = self.spec.shape_dim
        if self.shared_shape:
            self._shape = np.full(self.n, lay["shape"].start)
        else:
            self._shape = np.array([lay[f"shape/{i}"].start for i in range(self.n)])
        self._rot_idx = np.concatenate(
            [self._root[:, None] + np.arange(3), self._pose[:, None] + np.arange(3 * (k - 1))], axis=1
        )
        self._cam_idx = self._cam[:, None] + np.arange(3)
        self._shape_idx = self._shape[:, None] + np.arange(d)

    # packing --------------------------------------------------------------

    def pack(self, params: list[FrameParams], shared_beta=None) -> ParamBlock:
        if len(params) != self.n:
            raise InvalidInputError("one FrameParams per frame is required")
        x = np.zeros(self.layout.size)
        for i, p in enumerate(params):
            x[self._rot_idx[i]] = p.pose.rotvecs().reshape(-1)
            x[self._cam_idx[i]] = p.translation
            x[self._shape_idx[i]] = p.beta
        if self.shared_shape:
            beta = params[0].beta if shared_beta is None else shared_beta
            x[self._shape_idx[0]] = beta
        return ParamBlock(x, self.layout)

    def unpack(self, x) -> list[FrameParams]:
        x = x.x if isinstance(x, ParamBlock) else x
        k = self.spec.num_joints
        return [
            FrameParams(
                x[self._shape_idx[i]].copy(),
                PoseParams.from_rotvecs(x[self._rot_idx[i]].reshape(k, 3)),
                x[self._cam_idx[i]].copy(),
            )
            for i in range(self.n)
        ]

    def arrays(self, x):
        k = self.spec.num_joints
        return x[self._shape_idx], x[self._rot_idx].reshape(self.n, k, 3), x[self._cam_idx]

    # evaluation -----------------------------------------------------------

    def _data_weights(self, stage: Stage) -> np.ndarray:
        group_w = np.array([stage.joints_body, stage.joints_hand, stage.joints_face])[self.groups]
        return self.conf * (self.gamma * stage.gamma_scale * group_w)[None, :]

    def joints(self, x) -> np.ndarray:
        betas, rot, _ = self.arrays(x.x if isinstance(x, ParamBlock) else x)
        return batch_kinematics(self.spec, betas, rot).positions

    def evaluate(self, x: np.ndarray, stage: Stage, *, with_grad: bool = True, breakdown: bool = False):
        """Objective value and gradient w.r.t. the flat vector ``x``.

        With ``breakdown`` a dict of per-frame terms is returned instead of the gradient.
        """
        betas, rot, trans = self.arrays(x)
        cache = batch_kinematics(self.spec, betas, rot)
        pos = cache.positions
        n, k = self.n, self.spec.num_joints

        # data term
        w = self._data_weights(stage)
        used = w > 0
        cam = pos + trans[:, None, :]
        z = cam[..., 2]
        bad = used & ~(z > MIN_DEPTH)
        if bad.any():
            f_i, j = np.argwhere(bad)[0]
            raise DegenerateProjectionError(int(j), float(z[f_i, j]), self.frame_ids[f_i])
        z_safe = np.where(used, z, 1.0)
        pix = self.center + self.focal * cam[..., :2] / z_safe[..., None]
        r = np.where(used[..., None], pix - self.targets, 0.0)
        s2 = self.sigma**2
        r2 = r * r
        rho = r2 * s2 / (r2 + s2)
        data = (w[..., None] * rho).sum(axis=(1, 2))

        # priors
        rot_b = rot[:, self.body]
        rot_h = rot[:, self.hands]
        rot_f = rot[:, self.jaw]
        jaw_w = np.asarray(stage.jaw_pose, dtype=float)
        bend_vals = self.bend_sign * rot[:, self.bend_j, self.bend_axis]
        bend_exp = np.exp(bend_vals)
        prior_b = stage.body_pose * np.square(rot_b).sum(axis=(1, 2))
        prior_h = stage.hand_pose * np.square(rot_h).sum(axis=(1, 2))
        prior_f = (np.square(rot_f) * jaw_w).sum(axis=(1, 2))
        prior_a = stage.bending * bend_exp.sum(axis=1)
        prior_s = stage.shape * np.square(betas).sum(axis=1)
        per_frame = data + prior_b + prior_h + prior_f + prior_a + prior_s

        # temporal term
        temporal_pf = np.zeros(n)
        if self.temporal is not None and len(self.temporal.triples):
            allpos = np.concatenate([pos, self.temporal.context], axis=0) if len(self.temporal.context) else pos
            tp, tc, tn = self.temporal.triples.T
            dev = (2.0 * allpos[tc] - allpos[tp] - allpos[tn]) / 3.0
            t_vals = self.temporal.weight * np.square(dev).sum(axis=(1, 2))
            np.add.at(temporal_pf, tc, t_vals)  # tc always indexes an optimized frame
        total_shape = 0.0
        if self.shared_prior:
            total_shape = stage.shared_shape * float(np.square(betas[0]).sum())
        value = self.scale * float(per_frame.sum() + temporal_pf.sum()) + total_shape

        if breakdown:
            return value, {
                "data": data, "body_pose": prior_b, "hand_pose": prior_h, "jaw_pose": prior_f,
                "bending": prior_a, "shape": prior_s, "temporal": temporal_pf, "objective": per_frame + temporal_pf,
            }
        if not with_grad:
            return value, None

        c = self.scale
        # back through the robustifier and projection
        g_r = c * w[..., None] * 2.0 * r * s2 * s2 / np.square(r2 + s2)
        g_cam = np.zeros_like(cam)
        g_cam[..., :2] = self.focal * g_r / z_safe[..., None]
        g_cam[..., 2] = -self.focal * (g_r * cam[..., :2]).sum(axis=-1) / np.square(z_safe)
        g_pos = g_cam.copy()
        g_trans = g_cam.sum(axis=1)

        if self.temporal is not None and len(self.temporal.triples):
            g_all = np.zeros_like(allpos)
            scale = c * self.temporal.weight * 2.0 / 3.0
            np.add.at(g_all, tc, 2.0 * scale * dev)
            np.add.at(g_all, tp, -scale * dev)
            np.add.at(g_all, tn, -scale * dev)
            g_pos += g_all[:n]

        g_beta, g_rot = kinematics_vjp(self.spec, cache, g_pos)
        g_rot[:, self.body] += c * 2.0 * stage.body_pose * rot_b
        g_rot[:, self.hands] += c * 2.0 * stage.hand_pose * rot_h
        g_rot[:, self.jaw] += c * 2.0 * jaw_w * rot_f
        np.add.at(g_rot, (slice(None), self.bend_j, self.bend_axis),
                  c * stage.bending * self.bend_sign * bend_exp)
        g_beta += c * 2.0 * stage.shape * betas

        grad = np.zeros_like(x)
        grad[self._rot_idx] = g_rot.reshape(n, -1)
        grad[self._cam_idx] = g_trans
        if self.shared_shape:
            grad[self._shape_idx[0]] = g_beta.sum(axis=0)
            if self.shared_prior:
                grad[self._shape_idx[0]] += 2.0 * stage.shared_shape * betas[0]
        else:
            grad[self._shape_idx] = g_beta
        return value, grad

    def curvature(self, x: np.ndarray, stage: Stage) -> np.ndarray:
        """Approximate diagonal of the Gauss-Newton Hessian at ``x``, used to precondition the solver.

        Data residuals enter with their Geman-McClure reweighting; rotations act
        about their parent's world axes (exact at zero local rotation); shape
        and translation columns are exact for fixed rotations.
        """
        betas, rot, trans = self.arrays(x)
        spec = self.spec
        cache = batch_kinematics(spec, betas, rot)
        pos, world = cache.positions, cache.world
        n, k = self.n, spec.num_joints
        c = self.scale

        w = self._data_weights(stage)
        cam = pos + trans[:, None, :]
        z = np.where(cam[..., 2] > MIN_DEPTH, cam[..., 2], 1.0)
        pix = self.center + self.focal * cam[..., :2] / z[..., None]
        r2 = np.square(np.where(w[..., None] > 0, pix - self.targets, 0.0))
        s2 = self.sigma**2
        psi = w[..., None] * 2.0 * s2 * s2 / np.square(r2 + s2)  # (n, k, 2)
        proj = np.zeros((n, k, 2, 3))
        proj[..., 0, 0] = proj[..., 1, 1] = self.focal / z
        proj[..., :, 2] = -self.focal * cam[..., :2] / np.square(z)[..., None]

        t_frame = np.zeros(n)
        if self.temporal is not None and len(self.temporal.triples):
            coef = 2.0 * self.temporal.weight
            tp, tc, tn = self.temporal.triples.T
            for idx, cc in ((tc, 4.0 / 9.0), (tp, 1.0 / 9.0), (tn, 1.0 / 9.0)):
                keep = idx < n
                np.add.at(t_frame, idx[keep], coef * cc)

        # rotations: axis x (X_d - X_j) over the subtree of j
        parent = np.asarray(spec.parent)
        axes = np.empty((n, k, 3, 3))
        axes[:, 0] = np.eye(3)
        axes[:, 1:] = np.swapaxes(world[:, parent[1:]], -1, -2)  # rows are world axes
        diff = pos[:, None, :, :] - pos[:, :, None, :]  # (n, j, d, 3)
        diff = diff * spec.descendants[None, :, :, None]
        vel = np.cross(axes[:, :, :, None, :], diff[:, :, None, :, :])  # (n, j, a, d, 3)
        pix_vel = np.einsum("ndpc,njadc->njadp", proj, vel)
        h_rot = np.einsum("ndp,njadp->nja", psi, np.square(pix_vel))
        h_rot += t_frame[:, None, None] * np.square(vel).sum(axis=(3, 4))
        h_rot[:, self.body] += 2.0 * stage.body_pose
        h_rot[:, self.hands] += 2.0 * stage.hand_pose
        h_rot[:, self.jaw] += 2.0 * np.asarray(stage.jaw_pose, dtype=float)
        bend = stage.bending * np.exp(self.bend_sign * rot[:, self.bend_j, self.bend_axis])
        np.add.at(h_rot, (slice(None), self.bend_j, self.bend_axis), bend)

        h_cam = np.einsum("ndp,ndpc->nc", psi, np.square(proj))

        basis = spec.joint_shape_basis
        dpos = np.empty((n, k, 3, spec.shape_dim))
        dpos[:, 0] = basis[0]
        for idx, par in spec.levels:
            dpos[:, idx] = dpos[:, par] + world[:, par] @ (basis[idx] - basis[par])
        pix_shape = np.einsum("ndpc,ndcb->ndpb", proj, dpos)
        h_shape = np.einsum("ndp,ndpb->nb", psi, np.square(pix_shape))
        h_shape += t_frame[:, None] * np.square(dpos).sum(axis=(1, 2))
        h_shape += 2.0 * stage.shape

        diag = np.ones_like(x)
        diag[self._rot_idx] = c * h_rot.reshape(n, -1)
        diag[self._cam_idx] = c * h_cam
        if self.shared_shape:
            total = c * h_shape.sum(axis=0)
            if self.shared_prior:
                total += 2.0 * stage.shared_shape
            diag[self._shape_idx[0]] = total
        else:
            diag[self._shape_idx] = c * h_shape
        diag[~self.layout.free_mask()] = 1.0
        return diag

    def objective(self, stage: Stage):
        """Callable x -> (value, gradient) for the optimizer."""
        return lambda x: self.evaluate(x, stage)
