"""Rotation and rigid-transform kernels.

Quaternions are stored as ``(w, x, y, z)`` float arrays and every function
accepts arbitrary leading batch dimensions unless stated otherwise.
Rotations returned from this module are unit length with ``w >= 0``.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import DegenerateConfiguration, InvalidWeights, ShapeError

IDENTITY_QUAT = np.array([1.0, 0.0, 0.0, 0.0])

# relative singular-value floor below which a covariance counts as rank deficient
_RANK_TOL = 1e-10


def canonical(q):
    """Normalize quaternions and flip them onto the ``w >= 0`` hemisphere."""
    q = np.asarray(q, dtype=float)
    n = np.linalg.norm(q, axis=-1, keepdims=True)
    if np.any(n == 0):
        raise ValueError("zero-length quaternion")
    q = q / n
    return np.where(q[..., :1] < 0, -q, q)


def identity_quats(*shape):
    out = np.zeros(shape + (4,))
    out[..., 0] = 1.0
    return out


def quat_mul(a, b):
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    aw, ax, ay, az = np.moveaxis(a, -1, 0)
    bw, bx, by, bz = np.moveaxis(b, -1, 0)
    return np.stack([
        aw * bw - ax * bx - ay * by - az * bz,
        aw * bx + ax * bw + ay * bz - az * by,
        aw * by - ax * bz + ay * bw + az * bx,
        aw * bz + ax * by - ay * bx + az * bw,
    ], axis=-1)


def quat_conj(q):
    q = np.asarray(q, dtype=float)
    return q * np.array([1.0, -1.0, -1.0, -1.0])


def quat_rotate(q, v):
    """Rotate vectors ``v`` (..., 3) by quaternions ``q`` (..., 4)."""
    q = np.asarray(q, dtype=float)
    v = np.asarray(v, dtype=float)
    w = q[..., :1]
    u = q[..., 1:]
    t = 2.0 * np.cross(u, v)
    return v + w * t + np.cross(u, t)


def quat_to_matrix(q):
    q = canonical(q)
    w, x, y, z = np.moveaxis(q, -1, 0)
    m = np.stack([
        1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y),
        2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x),
        2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y),
    ], axis=-1)
    return m.reshape(q.shape[:-1] + (3, 3))


def matrix_to_quat(m):
    """Shepperd's method, branch chosen per element for stability."""
    m = np.asarray(m, dtype=float)
    batch = m.shape[:-2]
    m = m.reshape(-1, 3, 3)
    tr = np.trace(m, axis1=1, axis2=2)
    cand = np.stack([tr, m[:, 0, 0], m[:, 1, 1], m[:, 2, 2]], axis=1)
    which = np.argmax(cand, axis=1)
    q = np.empty((m.shape[0], 4))
    for k in range(4):
        sel = which == k
        if not np.any(sel):
            continue
        r = m[sel]
        if k == 0:
            s = np.sqrt(1.0 + tr[sel]) * 2
            q[sel] = np.stack([0.25 * s, (r[:, 2, 1] - r[:, 1, 2]) / s,
                               (r[:, 0, 2] - r[:, 2, 0]) / s, (r[:, 1, 0] - r[:, 0, 1]) / s], axis=1)
        elif k == 1:
            s = np.sqrt(1.0 + r[:, 0, 0] - r[:, 1, 1] - r[:, 2, 2]) * 2
            q[sel] = np.stack([(r[:, 2, 1] - r[:, 1, 2]) / s, 0.25 * s,
                               (r[:, 0, 1] + r[:, 1, 0]) / s, (r[:, 0, 2] + r[:, 2, 0]) / s], axis=1)
        elif k == 2:
            s = np.sqrt(1.0 + r[:, 1, 1] - r[:, 0, 0] - r[:, 2, 2]) * 2
            q[sel] = np.stack([(r[:, 0, 2] - r[:, 2, 0]) / s, (r[:, 0, 1] + r[:, 1, 0]) / s,
                               0.25 * s, (r[:, 1, 2] + r[:, 2, 1]) / s], axis=1)
        else:
            s = np.sqrt(1.0 + r[:, 2, 2] - r[:, 0, 0] - r[:, 1, 1]) * 2
            q[sel] = np.stack([(r[:, 1, 0] - r[:, 0, 1]) / s, (r[:, 0, 2] + r[:, 2, 0]) / s,
                               (r[:, 1, 2] + r[:, 2, 1]) / s, 0.25 * s], axis=1)
    return canonical(q).reshape(batch + (4,))


def quat_from_axis_angle(axis, angle):
    axis = np.asarray(axis, dtype=float)
    axis = axis / np.linalg.norm(axis, axis=-1, keepdims=True)
    half = 0.5 * np.asarray(angle, dtype=float)[..., None]
    return canonical(np.concatenate([np.cos(half), np.sin(half) * axis], axis=-1))


def quat_from_rotvec(rv):
    rv = np.asarray(rv, dtype=float)
    theta = np.linalg.norm(rv, axis=-1, keepdims=True)
    half = 0.5 * theta
    # sin(x/2)/x, series near zero
    small = theta < 1e-8
    safe = np.where(small, 1.0, theta)
    k = np.where(small, 0.5 - theta ** 2 / 48.0, np.sin(half) / safe)
    return np.concatenate([np.cos(half), k * rv], axis=-1)


def quat_to_rotvec(q):
    q = canonical(q)
    v = q[..., 1:]
    s = np.linalg.norm(v, axis=-1, keepdims=True)
    theta = 2.0 * np.arctan2(s, q[..., :1])
    small = s < 1e-12
    k = np.where(small, 2.0, theta / np.where(small, 1.0, s))
    return k * v


def geodesic_distance(a, b):
    """Rotation angle of ``a^-1 b`` in ``[0, pi]``; inputs are normalized first."""
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    a = a / np.linalg.norm(a, axis=-1, keepdims=True)
    b = b / np.linalg.norm(b, axis=-1, keepdims=True)
    d = quat_mul(quat_conj(a), b)
    return 2.0 * np.arctan2(np.linalg.norm(d[..., 1:], axis=-1), np.abs(d[..., 0]))


def slerp(a, b, t):
    """Shortest-path spherical interpolation, broadcasting over leading dims."""
    a = canonical(a)
    b = canonical(b)
    t = np.asarray(t, dtype=float)
    dot = np.sum(a * b, axis=-1, keepdims=True)
    b = np.where(dot < 0, -b, b)
    dot = np.abs(dot)
    omega = np.arccos(np.clip(dot, -1.0, 1.0))
    so = np.sin(omega)
    near = so < 1e-10
    tt = t[..., None] if t.ndim == a.ndim - 1 else t
    safe = np.where(near, 1.0, so)
    wa = np.where(near, 1.0 - tt, np.sin((1.0 - tt) * omega) / safe)
    wb = np.where(near, tt, np.sin(tt * omega) / safe)
    return canonical(wa * a + wb * b)


def kabsch_rotation(h):
    """Proper rotation matrices maximizing ``tr(R H)`` for covariances ``H = sum p q^T``.

    Returns ``(R, singular_values)``; callers decide what counts as degenerate.
    """
    u, s, vt = np.linalg.svd(h)
    v = np.swapaxes(vt, -1, -2)
    ut = np.swapaxes(u, -1, -2)
    d = np.sign(np.linalg.det(v @ ut))
    d = np.where(d == 0, 1.0, d)
    fix = np.ones(h.shape[:-2] + (3,))
    fix[..., 2] = d
    r = (v * fix[..., None, :]) @ ut
    return r, s


def weighted_covariance(src, dst, weights=None):
    """Centroids and cross-covariance ``sum w (src - cs)(dst - cd)^T``."""
    src = np.asarray(src, dtype=float)
    dst = np.asarray(dst, dtype=float)
    if weights is None:
        w = np.ones(src.shape[-2])
    else:
        w = np.asarray(weights, dtype=float)
    wsum = w.sum(axis=-1)
    cs = np.einsum("...n,...nk->...k", w, src) / wsum[..., None]
    cd = np.einsum("...n,...nk->...k", w, dst) / wsum[..., None]
    h = np.einsum("...n,...ni,...nj->...ij", w, src - cs[..., None, :], dst - cd[..., None, :])
    return cs, cd, h


def kabsch_fit(src, dst, weights=None):
    """Rotation minimizing weighted ``sum ||(dst - cd) - R (src - cs)||^2``.

    Raises DegenerateConfiguration for fewer than three points or a covariance
    of rank below two (collinear or coincident points).
    """
    src = np.asarray(src, dtype=float)
    dst = np.asarray(dst, dtype=float)
    if src.shape != dst.shape or src.ndim != 2 or src.shape[1] != 3:
        raise ShapeError(f"src {src.shape} and dst {dst.shape} must both be (n, 3)")
    if src.shape[0] < 3:
        raise DegenerateConfiguration(f"need at least 3 points, got {src.shape[0]}")
    if weights is not None:
        weights = np.asarray(weights, dtype=float)
        if weights.shape != (src.shape[0],) or np.any(weights < 0) or weights.sum() <= 0:
            raise InvalidWeights("weights must be non-negative with positive sum")
    _, _, h = weighted_covariance(src, dst, weights)
    r, s = kabsch_rotation(h)
    if s[1] <= _RANK_TOL * max(s[0], 1e-300):
        raise DegenerateConfiguration("covariance rank < 2")
    return matrix_to_quat(r)


def lbs_apply(rest, weights, rotations, translations):
    """Linear blend skinning of one frame: ``v_i' = sum_b W_ib (R_b v_i + t_b)``."""
    rest = np.asarray(rest, dtype=float)
    weights = np.asarray(weights, dtype=float)
    rotations = np.asarray(rotations, dtype=float)
    translations = np.asarray(translations, dtype=float)
    if rest.ndim != 2 or rest.shape[1] != 3:
        raise ShapeError(f"rest must be (N, 3), got {rest.shape}")
    n, b = rest.shape[0], rotations.shape[0]
    if weights.shape != (n, b) or rotations.shape != (b, 4) or translations.shape != (b, 3):
        raise ShapeError(
            f"weights {weights.shape}, rotations {rotations.shape}, translations "
            f"{translations.shape} inconsistent with {n} vertices")
    return lbs_sequence(rest, weights, rotations[None], translations[None])[0]


def lbs_sequence(rest, weights, rotations, translations):
    """LBS for many frames: rotations (F, B, 4), translations (F, B, 3) -> (F, N, 3)."""
    mats = quat_to_matrix(rotations)  # F,B,3,3
    f, b = mats.shape[:2]
    affine = np.concatenate([mats, np.asarray(translations, dtype=float)[..., None]], axis=-1)
    flat = np.moveaxis(affine.reshape(f, b, 12), 0, 1).reshape(b, f * 12)
    blended = (np.asarray(weights, dtype=float) @ flat).reshape(-1, f, 3, 4)  # N,F,3,4
    out = np.einsum("nfij,nj->fni", blended[..., :3], rest) + np.moveaxis(blended[..., 3], 0, 1)
    return out


def weighted_rotation_average(rotations, weights):
    """Hemisphere-aligned normalized weighted quaternion mean.

    ``rotations`` is (..., n, 4) and ``weights`` (..., n). Every input is flipped
    onto the hemisphere of the highest-weight element before averaging, so the
    result does not depend on the signs of the inputs.
    """
    q = canonical(rotations)
    w = np.asarray(weights, dtype=float)
    if w.shape != q.shape[:-1]:
        raise ShapeError(f"weights {w.shape} do not match rotations {q.shape}")
    if np.any(w < 0):
        raise InvalidWeights("negative weight")
    if np.any(w.sum(axis=-1) <= 0):
        raise InvalidWeights("weights sum to zero")
    ref = np.take_along_axis(q, np.argmax(w, axis=-1)[..., None, None], axis=-2)
    sign = np.where(np.sum(q * ref, axis=-1) < 0, -1.0, 1.0)
    acc = np.sum((w * sign)[..., None] * q, axis=-2)
    return canonical(acc)


@dataclass(frozen=True)
class RigidTransform:
    """``x -> R x + t`` with R stored as a quaternion."""

    rotation: np.ndarray = field(default_factory=lambda: IDENTITY_QUAT.copy())
    translation: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        object.__setattr__(self, "rotation", canonical(self.rotation))
        object.__setattr__(self, "translation", np.asarray(self.translation, dtype=float).reshape(3))

    @classmethod
    def identity(cls):
        return cls()

    def apply(self, points):
        return quat_rotate(self.rotation, points) + self.translation

    def compose(self, other: "RigidTransform") -> "RigidTransform":
        """``self ∘ other``: apply ``other`` first."""
        return RigidTransform(quat_mul(self.rotation, other.rotation),
                              quat_rotate(self.rotation, other.translation) + self.translation)

    def inverse(self) -> "RigidTransform":
        inv = quat_conj(self.rotation)
        return RigidTransform(inv, -quat_rotate(inv, self.translation))

    def matrix(self):
        m = np.eye(4)
        m[:3, :3] = quat_to_matrix(self.rotation)
        m[:3, 3] = self.translation
        return m


def transforms_to_arrays(transforms):
    """Sequence of RigidTransform -> (rotations (B, 4), translations (B, 3))."""
    rot = np.array([t.rotation for t in transforms]).reshape(-1, 4)
    trans = np.array([t.translation for t in transforms]).reshape(-1, 3)
    return rot, trans


def compose_arrays(q1, t1, q2, t2):
    """Array form of ``(q1, t1) ∘ (q2, t2)``."""
    return quat_mul(q1, q2), quat_rotate(q1, t2) + t1
