"""Forward kinematics, rigid skeleton binding and per-frame pose recovery.

The local rotation of a non-root joint ``c`` turns the edge ``parent(c) -> c``
(and everything below it) about the parent joint, so sibling edges bend
independently. The root rotation orients the whole tree. Vertices bound to the
edge ending at ``c`` follow the global transform of ``c``.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import cKDTree

from . import se3
from .errors import EmptyPointSet, ShapeError, SolverDiverged
from .types import KinematicTree

log = logging.getLogger(__name__)


def forward_kinematics(tree: KinematicTree, rotations, root_translation=None):
    """Global joint rotations and positions.

    ``rotations`` is (..., J, 4) local quaternions and ``root_translation``
    (..., 3). Returns ``(global_rotations (..., J, 4), positions (..., J, 3))``.
    """
    rotations = np.asarray(rotations, dtype=float)
    if rotations.shape[-2:] != (tree.joint_count, 4):
        raise ShapeError(f"pose shape {rotations.shape} does not match {tree.joint_count} joints")
    batch = rotations.shape[:-2]
    if root_translation is None:
        root_translation = np.zeros(batch + (3,))
    root_translation = np.broadcast_to(np.asarray(root_translation, dtype=float), batch + (3,))
    gr = np.empty_like(rotations)
    gp = np.empty(batch + (tree.joint_count, 3))
    c = tree.joints
    for j in tree.order():
        p = tree.parents[j]
        if p < 0:
            gr[..., j, :] = rotations[..., j, :]
            gp[..., j, :] = c[j] + root_translation
        else:
            gr[..., j, :] = se3.quat_mul(gr[..., p, :], rotations[..., j, :])
            gp[..., j, :] = gp[..., p, :] + se3.quat_rotate(gr[..., j, :], c[j] - c[p])
    return gr, gp


def joint_transforms(tree, global_rotations, positions):
    """Express each joint's global map ``x -> G (x - c_j) + p_j`` as ``(q, t)``."""
    t = positions - se3.quat_rotate(global_rotations, np.broadcast_to(tree.joints, positions.shape))
    return global_rotations, t


def root_to_children(tree: KinematicTree, rotations):
    """Fold the root rotation into the root's children and set the root to identity.

    With every vertex bound to an edge, the root rotation only acts through its
    children, so this is the unique representative of a pose.
    """
    rotations = np.array(rotations, dtype=float)
    if tree.joint_count == 1:
        return se3.canonical(rotations)
    r = tree.root
    root = rotations[..., r, :].copy()
    for c in tree.children(r):
        rotations[..., c, :] = se3.quat_mul(root, rotations[..., c, :])
    rotations[..., r, :] = se3.IDENTITY_QUAT
    return se3.canonical(rotations)


def driving_joints(tree):
    """Joint whose transform moves each binding column (the edge ending at ``c`` -> ``c``)."""
    return np.arange(tree.joint_count)


def _point_segment_distance(points, a, b):
    ab = b - a
    denom = np.maximum(np.sum(ab * ab, axis=-1), 1e-300)
    t = np.clip(np.einsum("nek,ek->ne", points[:, None, :] - a[None], ab) / denom, 0.0, 1.0)
    closest = a[None] + t[..., None] * ab[None]
    return np.linalg.norm(points[:, None, :] - closest, axis=-1)


def bind_vertices(rest, tree: KinematicTree, nearest=4):
    """Inverse-squared-distance weights to the nearest tree edges.

    Returns an (N, J) matrix whose column ``c`` is the edge ending at joint
    ``c``; a root-only tree puts all weight on the root column.
    """
    rest = np.asarray(rest, dtype=float)
    n, j = len(rest), tree.joint_count
    binding = np.zeros((n, j))
    if j == 1:
        binding[:, tree.root] = 1.0
        return binding
    edges = tree.edges
    d = _point_segment_distance(rest, tree.joints[edges[:, 0]], tree.joints[edges[:, 1]])
    k = min(nearest, len(edges))
    idx = np.argsort(d, axis=1, kind="stable")[:, :k]
    dk = np.take_along_axis(d, idx, axis=1)
    scale = max(float(np.linalg.norm(rest.max(0) - rest.min(0))), 1e-12)
    w = 1.0 / (dk ** 2 + (1e-9 * scale) ** 2)
    w /= w.sum(axis=1, keepdims=True)
    np.put_along_axis(binding, edges[idx, 1], w, axis=1)
    return binding


def skin(rest, binding, tree, global_rotations, positions):
    """Deform rest vertices with the rigid skeleton binding."""
    q, t = joint_transforms(tree, global_rotations, positions)
    drive = driving_joints(tree)
    return se3.lbs_apply(rest, binding, q[drive], t[drive])


def chamfer_distance(a, b):
    """Average of the two directional mean nearest-neighbour squared distances."""
    a = np.asarray(a, dtype=float).reshape(-1, 3)
    b = np.asarray(b, dtype=float).reshape(-1, 3)
    if len(a) == 0 or len(b) == 0:
        raise EmptyPointSet("chamfer distance needs two non-empty point sets")
    da, _ = cKDTree(b).query(a)
    db, _ = cKDTree(a).query(b)
    return 0.5 * (float(np.mean(da ** 2)) + float(np.mean(db ** 2)))


def _chamfer_residuals(a, b):
    d2 = np.sum((a[:, None, :] - b[None, :, :]) ** 2, axis=-1)
    ia = np.argmin(d2, axis=1)
    ib = np.argmin(d2, axis=0)
    ra = (a - b[ia]) * np.sqrt(0.5 / len(a))
    rb = (b - a[ib]) * np.sqrt(0.5 / len(b))
    return np.concatenate([ra.ravel(), rb.ravel()])


@dataclass
class PoseResult:
    rotations: np.ndarray  # (J, 4)
    root_translation: np.ndarray  # (3,)
    loss: float
    history: list = field(default_factory=list)  # objective after every accepted step
    iterations: int = 0


class _PoseObjective:
    def __init__(self, tree, binding, rest, target_vertices, target_samples, lam):
        self.tree = tree
        self.binding = binding
        self.rest = rest
        self.target_vertices = target_vertices
        self.target_samples = target_samples
        self.lam = lam
        self.drive = driving_joints(tree)
        n = len(rest)
        self.l2_scale = np.sqrt(lam / n) if lam > 0 and target_vertices is not None else 0.0
        self.rest_h = np.concatenate([rest, np.ones((n, 1))], axis=1)

    def pose_from(self, base_rot, base_trans, x):
        j = self.tree.joint_count
        inc = se3.quat_from_rotvec(x[:3 * j].reshape(j, 3))
        return se3.quat_mul(inc, base_rot), base_trans + x[3 * j:]

    def skinned(self, rot, trans):
        gr, gp = forward_kinematics(self.tree, rot, trans)
        q, t = joint_transforms(self.tree, gr, gp)
        mats = np.concatenate([se3.quat_to_matrix(q), t[:, :, None]], axis=2)[self.drive]
        blended = (self.binding @ mats.reshape(len(mats), 12)).reshape(-1, 3, 4)
        return np.einsum("nij,nj->ni", blended, self.rest_h), gp

    def residuals(self, rot, trans):
        parts = []
        verts, joints = self.skinned(rot, trans) if self.l2_scale else (None, forward_kinematics(self.tree, rot, trans)[1])
        if self.l2_scale:
            parts.append(self.l2_scale * (verts - self.target_vertices).ravel())
        if self.target_samples is not None:
            parts.append(_chamfer_residuals(joints, self.target_samples))
        return np.concatenate(parts) if parts else np.zeros(1)

    def value(self, rot, trans):
        r = self.residuals(rot, trans)
        return float(r @ r)


def pose_objective(tree, binding, rest, rotations, root_translation, target_vertices=None,
                   target_samples=None, lam=1.0):
    """Skeleton Chamfer term plus ``lam`` times the mean squared vertex error."""
    obj = _PoseObjective(tree, binding, np.asarray(rest, float), target_vertices, target_samples, lam)
    return obj.value(np.asarray(rotations, float), np.asarray(root_translation, float))


def solve_pose(tree: KinematicTree, binding, rest, target_vertices=None, target_samples=None,
               lam=1.0, iters=200, init_rotations=None, init_translation=None, h=1e-4, tol=1e-14):
    """Minimize ``CD(FK joints, target skeleton) + lam * L2(skinned, target vertices)``.

    Damped Gauss-Newton (Levenberg-Marquardt) on per-joint axis-angle
    increments and the root translation. The root rotation is held at identity
    when the tree has edges (see ``root_to_children``). The Jacobian is taken by
    central differences with step ``h``. A trial step is accepted only if it does not
    increase the objective; otherwise the damping doubles.
    """
    rest = np.asarray(rest, dtype=float)
    j = tree.joint_count
    if target_vertices is not None:
        target_vertices = np.asarray(target_vertices, dtype=float)
        if target_vertices.shape != rest.shape:
            raise ShapeError(f"target vertices {target_vertices.shape} vs rest {rest.shape}")
    if target_samples is not None:
        target_samples = np.asarray(target_samples, dtype=float).reshape(-1, 3)
        if len(target_samples) == 0:
            raise EmptyPointSet("empty target skeleton")
    if lam < 0:
        raise ValueError("lam must be non-negative")
    obj = _PoseObjective(tree, np.asarray(binding, float), rest, target_vertices, target_samples, lam)
    rot = se3.identity_quats(j) if init_rotations is None else root_to_children(tree, init_rotations)
    trans = np.zeros(3) if init_translation is None else np.asarray(init_translation, dtype=float).copy()
    scale = max(float(np.linalg.norm(rest.max(0) - rest.min(0))), 1e-12)
    steps = np.concatenate([np.full(3 * j, h), np.full(3, h * scale)])
    active = np.ones(len(steps), dtype=bool)
    if j > 1:
        active[3 * tree.root:3 * tree.root + 3] = False
    active = np.flatnonzero(active)
    nparam = len(active)

    r = obj.residuals(rot, trans)
    f = float(r @ r)
    if not np.isfinite(f):
        raise SolverDiverged("initial objective is not finite", (rot, trans))
    history = [f]
    mu = None
    it = 0
    for it in range(1, iters + 1):
        if f <= tol * scale ** 2:
            break
        # closed-form centroid alignment of the root translation
        if obj.l2_scale:
            verts, _ = obj.skinned(rot, trans)
            t_try = trans + (target_vertices.mean(0) - verts.mean(0))
            f_try = obj.value(rot, t_try)
            if f_try <= f:
                trans, f = t_try, f_try
                r = obj.residuals(rot, trans)
        jac = np.empty((len(r), nparam))
        for k, a_k in enumerate(active):
            e = np.zeros(len(steps))
            e[a_k] = steps[a_k]
            rp = obj.residuals(*obj.pose_from(rot, trans, e))
            rm = obj.residuals(*obj.pose_from(rot, trans, -e))
            jac[:, k] = (rp - rm) / (2 * steps[a_k])
        a = jac.T @ jac
        g = jac.T @ r
        diag = np.maximum(np.diag(a), 1e-12 * max(np.max(np.diag(a)), 1e-300))
        if mu is None:
            mu = 1e-3
        accepted = False
        while mu < 1e12:
            try:
                delta = np.zeros(len(steps))
                delta[active] = -np.linalg.solve(a + mu * np.diag(diag), g)
            except np.linalg.LinAlgError:
                mu *= 2.0
                continue
            rot_new, trans_new = obj.pose_from(rot, trans, delta)
            r_new = obj.residuals(rot_new, trans_new)
            f_new = float(r_new @ r_new)
            if not np.isfinite(f_new):
                raise SolverDiverged(f"objective became non-finite at iteration {it}", (rot, trans))
            if f_new <= f:
                improvement = f - f_new
                rot, trans, r, f = se3.canonical(rot_new), trans_new, r_new, f_new
                mu = max(mu / 3.0, 1e-12)
                accepted = True
                break
            mu *= 2.0
        history.append(f)
        if not accepted or improvement <= 1e-12 * max(f, 1e-300) and np.max(np.abs(delta)) < 1e-10:
            break
    return PoseResult(rot, trans, f, history, it)


@dataclass
class JointRotationTrack:
    rotations: np.ndarray  # (F, J, 4)
    root_translations: np.ndarray  # (F, 3)
    losses: np.ndarray | None = None


def solve_track(tree, binding, rest, frames, frame_samples=None, lam=1.0, iters=200,
                canonical_frame=0):
    """Solve every frame in order, warm-starting from the previous solution."""
    frames = np.asarray(frames, dtype=float)
    nf, j = len(frames), tree.joint_count
    rots = se3.identity_quats(nf, j)
    trans = np.zeros((nf, 3))
    losses = np.zeros(nf)
    prev_r, prev_t = se3.identity_quats(j), np.zeros(3)
    for f in range(nf):
        if f == canonical_frame:
            prev_r, prev_t = se3.identity_quats(j), np.zeros(3)
            continue
        samples = None if frame_samples is None else frame_samples[f]
        res = solve_pose(tree, binding, rest, frames[f], samples, lam=lam, iters=iters,
                         init_rotations=prev_r, init_translation=prev_t)
        rots[f], trans[f], losses[f] = res.rotations, res.root_translation, res.loss
        prev_r, prev_t = res.rotations, res.root_translation
    return JointRotationTrack(rots, trans, losses)
