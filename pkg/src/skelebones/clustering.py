"""Split-and-refine vector quantization of vertices into rigidly moving clusters."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from . import se3
from .errors import ClusteringFailed, DegenerateCluster

log = logging.getLogger(__name__)

_RANK_TOL = 1e-10


@dataclass
class ClusterAssignment:
    labels: np.ndarray  # (N,)
    rotations: np.ndarray  # (F, B, 4)
    translations: np.ndarray  # (F, B, 3)
    residuals: np.ndarray  # (B,) RMS rigid-fit residual per cluster, scene units
    history: list = field(default_factory=list)  # total SSE after every accepted split

    @property
    def cluster_count(self):
        return int(self.rotations.shape[1])


def descriptor_frames(frame_count, max_frames=32):
    """Uniformly strided frame indices, at most ``max_frames`` of them."""
    if frame_count <= max_frames:
        return np.arange(frame_count)
    return (np.arange(max_frames) * frame_count) // max_frames


def motion_descriptors(positions, canonical_frame=0, max_frames=32):
    """(N, 3 * frames) concatenated displacements from the canonical frame."""
    positions = np.asarray(positions, dtype=float)
    idx = descriptor_frames(len(positions), max_frames)
    disp = positions[idx] - positions[canonical_frame][None]
    return np.ascontiguousarray(np.moveaxis(disp, 0, 1).reshape(positions.shape[1], -1))


def motion_descriptor(seq, vertex, max_frames=32):
    if not 0 <= vertex < seq.vertex_count:
        raise IndexError(f"vertex {vertex} out of range")
    idx = descriptor_frames(seq.frame_count, max_frames)
    return (seq.positions[idx, vertex] - seq.canonical[vertex]).reshape(-1)


def _rigid_fit(src, dst):
    """Per-frame rigid fit of src (n, 3) onto dst (F, n, 3). Returns (R, t, ok)."""
    cs = src.mean(axis=0)
    cd = dst.mean(axis=1)
    h = (src - cs).T @ (dst - cd[:, None, :])
    r, s = se3.kabsch_rotation(h)
    ok = len(src) >= 3 and bool(np.all(s[:, 1] > _RANK_TOL * np.maximum(s[:, 0], 1e-300)))
    t = cd - np.einsum("fij,j->fi", r, cs)
    return r, t, ok


def _static_ok(src):
    """Whether the canonical points of a cluster span at least a plane."""
    if len(src) < 3:
        return False
    s = np.linalg.svd(src - src.mean(0), compute_uv=False)
    return bool(s[1] > _RANK_TOL * max(s[0], 1e-300))


def _fit_all(rest, frames, labels, count):
    """Rotation matrices (F, B, 3, 3), translations (F, B, 3) and degenerate ids."""
    nf = len(frames)
    rots = np.tile(np.eye(3), (nf, count, 1, 1))
    trans = np.zeros((nf, count, 3))
    bad = []
    for b in range(count):
        idx = np.flatnonzero(labels == b)
        if not _static_ok(rest[idx]):
            bad.append(b)
            continue
        r, t, ok = _rigid_fit(rest[idx], frames[:, idx])
        if not ok:
            bad.append(b)
            continue
        rots[:, b], trans[:, b] = r, t
    return rots, trans, bad


def _vertex_costs(rest, frames, rots, trans):
    """(N, B) squared error of every vertex under every cluster transform."""
    nb = rots.shape[1]
    out = np.empty((len(rest), nb))
    for b in range(nb):
        pred = rest @ np.swapaxes(rots[:, b], 1, 2) + trans[:, b][:, None, :]
        out[:, b] = np.sum((pred - frames) ** 2, axis=(0, 2))
    return out


def _relabel(labels):
    """Compact labels to 0..B-1 ordered by each cluster's lowest vertex index."""
    _, first = np.unique(labels, return_index=True)
    order = np.argsort(first)
    remap = np.empty(labels.max() + 1, dtype=int)
    remap[np.unique(labels)[order]] = np.arange(len(order))
    return remap[labels]


def _refine(rest, frames, labels, min_size, iters=10):
    """Lloyd iterations against per-cluster rigid transforms with merging of bad clusters."""
    labels = _relabel(labels)
    for _ in range(iters + 1):
        count = labels.max() + 1
        rots, trans, bad = _fit_all(rest, frames, labels, count)
        sizes = np.bincount(labels, minlength=count)
        drop = sorted(set(bad) | set(np.flatnonzero(sizes < min_size).tolist()))
        if drop and len(drop) == count:
            return None
        costs = _vertex_costs(rest, frames, rots, trans)
        costs[:, drop] = np.inf
        if drop:
            log.debug("merging %d small or degenerate clusters", len(drop))
            new = np.where(np.isin(labels, drop), np.argmin(costs, axis=1), labels)
        else:
            new = np.argmin(costs, axis=1)
            # keep the current label on exact ties
            cur = costs[np.arange(len(labels)), labels]
            new = np.where(cur <= costs[np.arange(len(labels)), new], labels, new)
        new = _relabel(new)
        if np.array_equal(new, labels) and not drop:
            return labels, rots, trans, costs
        labels = new
    count = labels.max() + 1
    rots, trans, bad = _fit_all(rest, frames, labels, count)
    sizes = np.bincount(labels, minlength=count)
    if bad or np.any(sizes < min_size):
        return None
    return labels, rots, trans, _vertex_costs(rest, frames, rots, trans)


def _cluster_rms(costs, labels, frame_count):
    count = costs.shape[1]
    own = costs[np.arange(len(labels)), labels]
    sse = np.bincount(labels, weights=own, minlength=count)
    sizes = np.bincount(labels, minlength=count)
    return np.sqrt(sse / np.maximum(sizes * frame_count, 1)), float(own.sum())


def _two_means(desc, iters=20):
    """Split descriptors in two, seeding at the centroid perturbed along the principal axis."""
    mu = desc.mean(axis=0)
    centered = desc - mu
    _, s, vt = np.linalg.svd(centered, full_matrices=False)
    if s[0] <= 0:
        return None
    eps = 1e-3 * s[0] / np.sqrt(len(desc))
    centers = np.stack([mu + eps * vt[0], mu - eps * vt[0]])
    assign = None
    for _ in range(iters):
        d = ((desc[:, None, :] - centers[None]) ** 2).sum(-1)
        new = np.argmin(d, axis=1)
        if assign is not None and np.array_equal(new, assign):
            break
        assign = new
        if assign.min() == assign.max():
            return None
        centers = np.stack([desc[assign == 0].mean(0), desc[assign == 1].mean(0)])
    return assign


def lbg_cluster(seq, max_bones=50, distortion_tol=0.005, min_cluster_size=10, max_frames=32,
                lloyd_iters=10) -> ClusterAssignment:
    """Grow clusters from one by splitting the worst-fitting cluster until rigid enough.

    A split seeds 2-means in descriptor space at the cluster centroid
    perturbed both ways along its principal axis, then refines every
    assignment against per-cluster rigid transforms. A split is kept only if
    the total rigid-fit error does not increase.
    """
    if seq.frame_count < 2:
        raise ClusteringFailed("clustering needs at least two frames")
    rest = seq.canonical
    n = len(rest)
    if n < min_cluster_size:
        raise ClusteringFailed(f"{n} vertices is fewer than min_cluster_size={min_cluster_size}")
    idx = descriptor_frames(seq.frame_count, max_frames)
    frames = seq.positions[idx]
    desc = motion_descriptors(seq.positions, seq.canonical_frame, max_frames)
    tol = distortion_tol * seq.bbox_diag

    labels = np.zeros(n, dtype=int)
    rots, trans, bad = _fit_all(rest, frames, labels, 1)
    if bad:
        raise ClusteringFailed("canonical shape is degenerate (collinear or too few points)")
    costs = _vertex_costs(rest, frames, rots, trans)
    rms, sse = _cluster_rms(costs, labels, len(frames))
    history = [sse]
    frozen = set()
    while labels.max() + 1 < max_bones:
        count = labels.max() + 1
        order = [b for b in np.argsort(-rms, kind="stable") if rms[b] >= tol and b not in frozen]
        if not order or rms.max() < tol:
            break
        c = int(order[0])
        members = np.flatnonzero(labels == c)
        split = _two_means(desc[members]) if len(members) >= 2 * min_cluster_size else None
        result = None
        if split is not None:
            trial = labels.copy()
            trial[members[split == 1]] = count
            # child holding the lowest vertex index keeps the old id
            if split[0] == 1:
                trial[members] = np.where(split == 1, c, count)
            result = _refine(rest, frames, trial, min_cluster_size, lloyd_iters)
        if result is None or result[0].max() + 1 <= count:
            frozen.add(c)
            continue
        new_labels, new_rots, new_trans, new_costs = result
        new_rms, new_sse = _cluster_rms(new_costs, new_labels, len(frames))
        if new_sse > sse:
            frozen.add(c)
            continue
        labels, rots, trans, costs, rms, sse = new_labels, new_rots, new_trans, new_costs, new_rms, new_sse
        history.append(sse)
        frozen = set()
        log.debug("split cluster %d -> %d clusters, sse %.3g", c, labels.max() + 1, sse)
    q, t = fit_cluster_transforms(seq, labels)
    full_costs = _vertex_costs(rest, seq.positions, se3.quat_to_matrix(q), t)
    res, _ = _cluster_rms(full_costs, labels, seq.frame_count)
    return ClusterAssignment(labels, q, t, res, history)


def fit_cluster_transforms(seq, labels):
    """Per-frame Kabsch fit of every cluster's canonical points. Returns (q (F,B,4), t (F,B,3))."""
    labels = np.asarray(labels, dtype=int)
    rest = seq.canonical
    count = int(labels.max()) + 1
    nf = seq.frame_count
    q = se3.identity_quats(nf, count)
    t = np.zeros((nf, count, 3))
    for b in range(count):
        idx = np.flatnonzero(labels == b)
        if not _static_ok(rest[idx]):
            raise DegenerateCluster(b, "(fewer than 3 points or collinear)")
        r, tb, ok = _rigid_fit(rest[idx], seq.positions[:, idx])
        if not ok:
            raise DegenerateCluster(b, "(rank-deficient covariance in some frame)")
        q[:, b] = se3.matrix_to_quat(r)
        t[:, b] = tb
    q[seq.canonical_frame] = se3.IDENTITY_QUAT
    t[seq.canonical_frame] = 0.0
    return q, t
