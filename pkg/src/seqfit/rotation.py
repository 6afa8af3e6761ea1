"""Axis-angle helpers: Rodrigues formula, its derivative, canonicalization."""

from __future__ import annotations

import numpy as np

# below this angle the closed-form coefficients are replaced by Taylor series
_SMALL = 0.05


def skew(v: np.ndarray) -> np.ndarray:
    """Cross-product matrices for vectors of shape (..., 3)."""
    v = np.asarray(v, dtype=float)
    out = np.zeros(v.shape + (3,))
    out[..., 0, 1] = -v[..., 2]
    out[..., 0, 2] = v[..., 1]
    out[..., 1, 0] = v[..., 2]
    out[..., 1, 2] = -v[..., 0]
    out[..., 2, 0] = -v[..., 1]
    out[..., 2, 1] = v[..., 0]
    return out


def _vee_antisym(m: np.ndarray) -> np.ndarray:
    # <M, skew(a)> == a . _vee_antisym(M)
    return np.stack(
        [
            m[..., 2, 1] - m[..., 1, 2],
            m[..., 0, 2] - m[..., 2, 0],
            m[..., 1, 0] - m[..., 0, 1],
        ],
        axis=-1,
    )


def _coefficients(theta: np.ndarray):
    """sin(t)/t, (1-cos t)/t^2 and their derivatives divided by t."""
    small = theta < _SMALL
    t = np.where(small, 1.0, theta)
    t2 = theta * theta
    s, c = np.sin(t), np.cos(t)
    a = np.where(small, 1.0 - t2 / 6.0 + t2 * t2 / 120.0, s / t)
    b = np.where(small, 0.5 - t2 / 24.0 + t2 * t2 / 720.0, (1.0 - c) / t**2)
    da = np.where(small, -1.0 / 3.0 + t2 / 30.0 - t2 * t2 / 840.0, (t * c - s) / t**3)
    db = np.where(
        small,
        -1.0 / 12.0 + t2 / 180.0 - t2 * t2 / 6720.0,
        (t * s - 2.0 * (1.0 - c)) / t**4,
    )
    return a, b, da, db


def rodrigues(rotvec: np.ndarray) -> np.ndarray:
    """Rotation matrices (..., 3, 3) from axis-angle vectors (..., 3)."""
    rotvec = np.asarray(rotvec, dtype=float)
    theta = np.linalg.norm(rotvec, axis=-1)
    a, b, _, _ = _coefficients(theta)
    k = skew(rotvec)
    eye = np.broadcast_to(np.eye(3), k.shape)
    return eye + a[..., None, None] * k + b[..., None, None] * (k @ k)


def rodrigues_vjp(rotvec: np.ndarray, grad_r: np.ndarray) -> np.ndarray:
    """Pull a gradient w.r.t. rotation matrices back to the axis-angle vectors.

    ``grad_r`` has shape (..., 3, 3) and holds dL/dR; returns dL/dv of shape (..., 3).
    """
    rotvec = np.asarray(rotvec, dtype=float)
    theta = np.linalg.norm(rotvec, axis=-1)
    a, b, da, db = _coefficients(theta)
    k = skew(rotvec)
    kt = np.swapaxes(k, -1, -2)
    w_g = _vee_antisym(grad_r)
    w_sym = _vee_antisym(grad_r @ kt + kt @ grad_r)
    g_dot_k = np.einsum("...i,...i->...", rotvec, w_g)
    g_dot_k2 = np.einsum("...ij,...ij->...", grad_r, k @ k)
    radial = da * g_dot_k + db * g_dot_k2
    return radial[..., None] * rotvec + a[..., None] * w_g + b[..., None] * w_sym


def canonicalize(rotvec: np.ndarray) -> np.ndarray:
    """Map axis-angle vectors to an equivalent one with magnitude in [0, pi]."""
    rotvec = np.array(rotvec, dtype=float)
    theta = np.linalg.norm(rotvec, axis=-1, keepdims=True)
    wrapped = np.mod(theta, 2.0 * np.pi)
    scale = np.where(theta > 0, wrapped / np.where(theta > 0, theta, 1.0), 1.0)
    rotvec = rotvec * scale
    theta = wrapped
    flip = theta > np.pi
    rotvec = np.where(flip, rotvec * (1.0 - 2.0 * np.pi / np.where(flip, theta, 1.0)), rotvec)
    return rotvec


def matrix_to_rotvec(rot: np.ndarray) -> np.ndarray:
    """Inverse of :func:`rodrigues` for a single rotation matrix."""
    rot = np.asarray(rot, dtype=float)
    cos = np.clip((np.trace(rot) - 1.0) / 2.0, -1.0, 1.0)
    theta = np.arccos(cos)
    if theta < 1e-8:
        return _vee_antisym(rot) / 2.0
    if np.pi - theta < 1e-6:
        # axis from the symmetric part; sign ambiguity is irrelevant at pi
        sym = (rot + np.eye(3)) / 2.0
        axis = np.sqrt(np.clip(np.diag(sym), 0.0, None))
        i = int(np.argmax(axis))
        axis = sym[i] / axis[i]
        return axis / np.linalg.norm(axis) * theta
    return _vee_antisym(rot) * theta / (2.0 * np.sin(theta))
