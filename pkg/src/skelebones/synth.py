"""Deterministic synthetic articulated bodies with ground-truth rigs.

Every body is a union of capsules. Each capsule (segment) rotates about its
proximal end relative to its parent segment; root segments share one global
rigid motion. Surface points are sampled uniformly by area over the union and
carry a hard label for the segment they belong to.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import se3
from .errors import UsageError
from .ik import root_to_children
from .seqio import VertexSequence
from .types import KinematicTree

KINDS = ("rigid_body", "hinge_chain", "soft_chain", "y_branch", "humanoid_stick")


@dataclass
class Segment:
    start: np.ndarray
    end: np.ndarray
    radius: float
    parent: int  # segment index, -1 for root segments
    axis: np.ndarray = field(default_factory=lambda: np.array([0.0, 0.0, 1.0]))


@dataclass
class SyntheticBody:
    """Generator output. Bone tracks describe the rigid motion without jiggle."""

    sequence: VertexSequence
    labels: np.ndarray  # (N,) segment per vertex
    weights: np.ndarray  # (N, S) one-hot
    bone_rotations: np.ndarray  # (F, S, 4)
    bone_translations: np.ndarray  # (F, S, 3)
    angles: np.ndarray  # (F, S) hinge angle per segment
    hinges: np.ndarray  # (H, 3) canonical pivots of non-root segments
    tree: KinematicTree | None = None
    pose_rotations: np.ndarray | None = None  # (F, J, 4) when FK reproduces the motion exactly
    root_translations: np.ndarray | None = None  # (F, 3)
    rigid_positions: np.ndarray | None = None  # (F, N, 3) positions without jiggle
    params: dict = field(default_factory=dict)


# -- geometry

def _frame_axes(d):
    d = d / np.linalg.norm(d)
    helper = np.array([1.0, 0.0, 0.0]) if abs(d[0]) < 0.9 else np.array([0.0, 1.0, 0.0])
    e1 = np.cross(d, helper)
    e1 /= np.linalg.norm(e1)
    return d, e1, np.cross(d, e1)


def _segment_distance(points, a, b):
    ab = b - a
    t = np.clip((points - a) @ ab / max(ab @ ab, 1e-300), 0.0, 1.0)
    return np.linalg.norm(points - (a + t[:, None] * ab), axis=1)


def _sample_capsule(rng, a, b, r, count):
    length = np.linalg.norm(b - a)
    d, e1, e2 = _frame_axes(b - a)
    cyl_area, cap_area = 2 * np.pi * r * length, 4 * np.pi * r * r
    on_cyl = rng.uniform(size=count) < cyl_area / (cyl_area + cap_area)
    out = np.empty((count, 3))
    n = int(on_cyl.sum())
    u = rng.uniform(0, length, size=n)
    phi = rng.uniform(0, 2 * np.pi, size=n)
    out[on_cyl] = a + u[:, None] * d + r * (np.cos(phi)[:, None] * e1 + np.sin(phi)[:, None] * e2)
    m = count - n
    s = rng.normal(size=(m, 3))
    s /= np.linalg.norm(s, axis=1, keepdims=True)
    centers = np.where((s @ d < 0)[:, None], a, b)
    out[~on_cyl] = centers + r * s
    return out


def sample_union_surface(segments, n, rng):
    """Area-uniform surface samples of a capsule union and their segment labels."""
    areas = np.array([2 * np.pi * s.radius * np.linalg.norm(s.end - s.start) + 4 * np.pi * s.radius ** 2
                      for s in segments])
    pool_pts, pool_lab = [], []
    total = 0
    oversample = 3
    while total < n:
        counts = rng.multinomial(oversample * n, areas / areas.sum())
        for i, (seg, c) in enumerate(zip(segments, counts)):
            pts = _sample_capsule(rng, seg.start, seg.end, seg.radius, c)
            keep = np.ones(len(pts), dtype=bool)
            for k, other in enumerate(segments):
                if k != i:
                    keep &= _segment_distance(pts, other.start, other.end) >= other.radius * (1 - 1e-9)
            pool_pts.append(pts[keep])
            pool_lab.append(np.full(int(keep.sum()), i))
            total += int(keep.sum())
        oversample *= 2
    pts = np.concatenate(pool_pts)
    lab = np.concatenate(pool_lab)
    pick = np.sort(rng.choice(len(pts), size=n, replace=False))
    return pts[pick], lab[pick]


# -- kinematics

def _segment_transforms(segments, angles, root_rot, root_trans, pivot):
    """Global (q, t) per frame and segment; x -> R x + t."""
    nf, ns = angles.shape
    q = np.empty((nf, ns, 4))
    t = np.empty((nf, ns, 3))
    for s, seg in enumerate(segments):
        local_q = se3.quat_from_axis_angle(seg.axis, angles[:, s])
        local_t = seg.start - se3.quat_rotate(local_q, np.broadcast_to(seg.start, (nf, 3)))
        if seg.parent < 0:
            pq = root_rot
            pt = pivot + root_trans - se3.quat_rotate(root_rot, np.broadcast_to(pivot, (nf, 3)))
        else:
            pq, pt = q[:, seg.parent], t[:, seg.parent]
        q[:, s], t[:, s] = se3.compose_arrays(pq, pt, local_q, local_t)
    return q, t


def _root_motion(nf, amplitude, seed_phase=0.0):
    f = np.arange(nf)
    ang = amplitude * np.sin(2 * np.pi * f / max(nf, 1) + seed_phase) * np.sin(np.pi * f / max(nf, 1))
    axis = np.array([0.2, 1.0, 0.3])
    rot = se3.quat_from_axis_angle(axis / np.linalg.norm(axis), ang)
    trans = np.stack([0.3 * amplitude * np.sin(2 * np.pi * f / max(nf, 1)),
                      0.15 * amplitude * (1 - np.cos(2 * np.pi * f / max(nf, 1))),
                      np.zeros(nf)], axis=1)
    return rot, trans


def _tree_from_segments(segments, root_point):
    """Joint tree whose edges are the segments, or None if segments do not chain."""
    joints = [np.asarray(root_point, dtype=float)]
    parents = [-1]
    end_joint = {}

    def find(p):
        for k, j in enumerate(joints):
            if np.allclose(j, p, atol=1e-12):
                return k
        return None

    for s, seg in enumerate(segments):
        sj = find(seg.start)
        if sj is None:
            return None
        joints.append(np.asarray(seg.end, dtype=float))
        parents.append(sj)
        end_joint[s] = len(joints) - 1
    return KinematicTree(np.array(joints), np.array(parents)), end_joint


def _fk_poses(segments, tree_info, angles, root_rot, root_trans):
    """Local joint rotations reproducing the segment motion, or None if impossible."""
    tree, end_joint = tree_info
    nf = len(angles)
    rots = se3.identity_quats(nf, tree.joint_count)
    rots[:, tree.root] = root_rot
    for s, seg in enumerate(segments):
        start = int(tree.parents[end_joint[s]])
        expected = tree.root if seg.parent < 0 else end_joint[seg.parent]
        if start != expected:
            return None
        rots[:, end_joint[s]] = se3.quat_from_axis_angle(seg.axis, angles[:, s])
    return root_to_children(tree, rots), root_trans.copy()


def _apply_jiggle(segments, labels, rest, q, t, angles, amp, freq, jiggle_segments):
    """Out-of-plane bend of each listed segment, growing quadratically toward its tip."""
    out = se3.lbs_apply(rest, np.eye(len(segments))[labels], q[0], t[0])[None].repeat(len(q), 0)
    nf = len(q)
    for s in range(len(segments)):
        idx = np.flatnonzero(labels == s)
        seg = segments[s]
        if s in jiggle_segments:
            d = seg.end - seg.start
            length = np.linalg.norm(d)
            u = np.clip((rest[idx] - seg.start) @ d / length ** 2, 0.0, 1.0)
            offset = amp * length * np.sin(freq * angles[:, s])[:, None] * (u ** 2)[None, :]
            local = rest[idx][None] + offset[..., None] * seg.axis
        else:
            local = np.broadcast_to(rest[idx], (nf, len(idx), 3))
        out[:, idx] = se3.quat_rotate(q[:, s][:, None], local) + t[:, s][:, None]
    return out


def _build(segments, angles, root_rot, root_trans, root_point, n, rng, params,
           jiggle=None):
    rest, labels = sample_union_surface(segments, n, rng)
    q, t = _segment_transforms(segments, angles, root_rot, root_trans, np.asarray(root_point, float))
    s_count = len(segments)
    weights = np.eye(s_count)[labels]
    rigid = np.empty((len(angles), n, 3))
    for f in range(len(angles)):
        rigid[f] = se3.quat_rotate(q[f, labels], rest) + t[f, labels]
    positions = rigid
    if jiggle is not None:
        positions = _apply_jiggle(segments, labels, rest, q, t, angles, **jiggle)
    info = _tree_from_segments(segments, root_point)
    tree = poses = None
    if info is not None:
        tree = info[0]
        poses = _fk_poses(segments, info, angles, root_rot, root_trans)
    hinges = np.array([s.start for s in segments if s.parent >= 0]).reshape(-1, 3)
    return SyntheticBody(
        sequence=VertexSequence(positions),
        labels=labels,
        weights=weights,
        bone_rotations=q,
        bone_translations=t,
        angles=angles,
        hinges=hinges,
        tree=tree,
        pose_rotations=None if poses is None else poses[0],
        root_translations=None if poses is None else poses[1],
        rigid_positions=rigid,
        params=params,
    )


def _wave(nf, cycles, phase=0.0):
    f = np.arange(nf)
    return np.sin(2 * np.pi * cycles * f / max(nf, 1) + phase)


# -- public generators

def rigid_body(frames=50, vertices=1000, seed=0, root_motion=0.6):
    """An L-shaped body moving as a single rigid piece."""
    rng = np.random.default_rng(seed)
    segs = [Segment(np.array([0.0, 0, 0]), np.array([1.0, 0, 0]), 0.15, -1),
            Segment(np.array([0.0, 0, 0]), np.array([0.0, 0.6, 0]), 0.15, -1)]
    rot, trans = _root_motion(frames, root_motion)
    angles = np.zeros((frames, 2))
    return _build(segs, angles, rot, trans, [0.0, 0, 0], vertices, rng,
                  dict(kind="rigid_body", frames=frames, vertices=vertices, seed=seed))


def hinge_chain(frames=100, vertices=2000, seed=0, theta_max=60.0, segments=2, length=1.0,
                radius=0.15, root_motion=0.3, cycles=1.5, late_hinges=()):
    """Straight chain of equal capsules along x bending about z at every hinge.

    Hinges listed in ``late_hinges`` (1-based hinge numbers) stay straight for
    the first half of the sequence and articulate only in the second half.
    """
    rng = np.random.default_rng(seed)
    if segments < 1:
        raise UsageError("hinge_chain needs at least one segment")
    x0 = -0.5 * segments * length
    segs = []
    for s in range(segments):
        a = np.array([x0 + s * length, 0.0, 0.0])
        segs.append(Segment(a, a + [length, 0.0, 0.0], radius, s - 1))
    th = np.deg2rad(theta_max)
    angles = np.zeros((frames, segments))
    half = frames // 2
    for s in range(1, segments):
        if s in late_hinges:
            late = np.zeros(frames)
            late[half:] = np.sin(2 * np.pi * cycles * np.arange(frames - half) / max(frames - half, 1))
            angles[:, s] = th * late
        else:
            angles[:, s] = (-1) ** (s - 1) * th * _wave(frames, cycles * (1 + 0.25 * (s - 1)))
    rot, trans = _root_motion(frames, root_motion)
    return _build(segs, angles, rot, trans, segs[0].start, vertices, rng,
                  dict(kind="hinge_chain", frames=frames, vertices=vertices, seed=seed,
                       theta_max=theta_max, segments=segments, late_hinges=list(late_hinges)))


def soft_chain(frames=200, vertices=2000, seed=0, theta_max=60.0, phase=0.0, cycles=None,
               jiggle_amplitude=0.12, jiggle_frequency=4.0, limb_length=1.0, torso_length=1.0,
               radius=0.15):
    """Limb - torso - limb chain whose limbs flop out of plane with their hinge angle.

    Limb angles follow ``theta_max * sin(w f)`` and ``theta_max * sin(w f + phase)``.
    The flop offset is ``amp * L * sin(freq * angle) * u^2`` along the hinge
    axis, with ``u`` the normalized position along the limb. The emitted bone
    tracks and tree ignore the flop, so they form the rigid baseline.
    """
    rng = np.random.default_rng(seed)
    h = 0.5 * torso_length
    center = np.zeros(3)
    ha, hb = np.array([-h, 0, 0]), np.array([h, 0, 0])
    segs = [Segment(center, ha, radius, -1), Segment(center, hb, radius, -1),
            Segment(ha, ha - [limb_length, 0, 0], radius, 0),
            Segment(hb, hb + [limb_length, 0, 0], radius, 1)]
    if cycles is None:
        cycles = frames / 100.0
    th = np.deg2rad(theta_max)
    angles = np.zeros((frames, 4))
    angles[:, 2] = th * _wave(frames, cycles)
    angles[:, 3] = th * _wave(frames, cycles, phase)
    rot = se3.identity_quats(frames)
    trans = np.zeros((frames, 3))
    return _build(segs, angles, rot, trans, center, vertices, rng,
                  dict(kind="soft_chain", frames=frames, vertices=vertices, seed=seed,
                       theta_max=theta_max, phase=phase, jiggle_amplitude=jiggle_amplitude),
                  jiggle=dict(amp=jiggle_amplitude, freq=jiggle_frequency, jiggle_segments=(2, 3)))


def y_branch(frames=60, vertices=2000, seed=0, theta_max=35.0, radius=0.12, root_motion=0.2):
    """A stem with two arms that swing independently about the junction."""
    rng = np.random.default_rng(seed)
    j = np.zeros(3)
    segs = [Segment(np.array([0.0, -1.0, 0]), j, radius, -1),
            Segment(j, np.array([-0.75, 0.75, 0]), radius, 0),
            Segment(j, np.array([0.75, 0.75, 0]), radius, 0)]
    th = np.deg2rad(theta_max)
    angles = np.zeros((frames, 3))
    angles[:, 1] = th * _wave(frames, 1.0)
    angles[:, 2] = -th * _wave(frames, 2.0)
    rot, trans = _root_motion(frames, root_motion)
    return _build(segs, angles, rot, trans, segs[0].start, vertices, rng,
                  dict(kind="y_branch", frames=frames, vertices=vertices, seed=seed))


def humanoid_stick(frames=60, vertices=3000, seed=0, theta_max=40.0, radius=0.07):
    """Pelvis-rooted stick figure with a head, two arms and two legs."""
    rng = np.random.default_rng(seed)
    p = lambda *v: np.array(v, dtype=float)  # noqa: E731
    pelvis, chest, head = p(0, 0, 0), p(0, 0.6, 0), p(0, 0.9, 0)
    ls, rs, lh, rh = p(-0.2, 0.55, 0), p(0.2, 0.55, 0), p(-0.7, 0.55, 0), p(0.7, 0.55, 0)
    lp, rp, lf, rf = p(-0.12, -0.05, 0), p(0.12, -0.05, 0), p(-0.12, -0.8, 0), p(0.12, -0.8, 0)
    x = p(1, 0, 0)
    segs = [Segment(pelvis, chest, radius * 1.6, -1),
            Segment(chest, head, radius * 1.2, 0),
            Segment(chest, ls, radius, 0), Segment(ls, lh, radius, 2),
            Segment(chest, rs, radius, 0), Segment(rs, rh, radius, 4),
            Segment(pelvis, lp, radius, -1), Segment(lp, lf, radius, 6, x),
            Segment(pelvis, rp, radius, -1), Segment(rp, rf, radius, 8, x)]
    th = np.deg2rad(theta_max)
    angles = np.zeros((frames, len(segs)))
    angles[:, 3] = th * _wave(frames, 1.0)
    angles[:, 5] = -th * _wave(frames, 2.0)
    angles[:, 7] = 0.6 * th * _wave(frames, 1.0)
    angles[:, 9] = -0.6 * th * _wave(frames, 1.0)
    rot, trans = _root_motion(frames, 0.1)
    return _build(segs, angles, rot, trans, pelvis, vertices, rng,
                  dict(kind="humanoid_stick", frames=frames, vertices=vertices, seed=seed))


GENERATORS = {
    "rigid_body": rigid_body,
    "hinge_chain": hinge_chain,
    "soft_chain": soft_chain,
    "y_branch": y_branch,
    "humanoid_stick": humanoid_stick,
}


def generate_synthetic(kind, params=None, seed=0) -> SyntheticBody:
    if kind not in GENERATORS:
        raise UsageError(f"unknown generator {kind!r}; choose from {', '.join(KINDS)}")
    return GENERATORS[kind](seed=seed, **(params or {}))


# -- stand-alone point clouds for skeleton tests

def tube_cloud(polyline, radius, n, seed=0):
    """Surface samples of capsules along a polyline (or a list of polylines)."""
    rng = np.random.default_rng(seed)
    lines = polyline if isinstance(polyline[0][0], (list, tuple, np.ndarray)) else [polyline]
    segs = []
    for line in lines:
        line = np.asarray(line, dtype=float)
        for a, b in zip(line[:-1], line[1:]):
            segs.append(Segment(a, b, radius, -1))
    pts, _ = sample_union_surface(segs, n, rng)
    return pts
