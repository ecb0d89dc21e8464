"""Alternating skinning-weight / rigid-bone decomposition and rigidity diagnostics."""

from __future__ import annotations

import itertools
import logging
from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import cKDTree

from . import se3
from .errors import ShapeError

log = logging.getLogger(__name__)


@dataclass
class SkinningResult:
    weights: np.ndarray  # (N, B), at most K nonzeros per row
    rotations: np.ndarray  # (F, B, 4)
    translations: np.ndarray  # (F, B, 3)
    rmse: float  # reconstruction RMSE divided by the bounding-box diagonal
    history: list = field(default_factory=list)  # SSE before the first and after every iteration
    dropped: list = field(default_factory=list)  # original ids of bones removed for lack of mass
    kept: np.ndarray | None = None  # original ids of the surviving bones

    @property
    def bone_count(self):
        return self.weights.shape[1]


def reconstruction_rmse(seq, weights, rotations, translations):
    """Root mean squared LBS error over every frame and vertex, in scene units."""
    positions = seq.positions if hasattr(seq, "positions") else np.asarray(seq, dtype=float)
    rest = positions[getattr(seq, "canonical_frame", 0)]
    if rotations.shape[0] != positions.shape[0]:
        raise ShapeError(f"{rotations.shape[0]} bone frames for {positions.shape[0]} sequence frames")
    pred = se3.lbs_sequence(rest, weights, rotations, translations)
    return float(np.sqrt(np.mean(np.sum((pred - positions) ** 2, axis=-1))))


def _bone_costs(rest, frames, mats, trans):
    """(N, B) sum over frames of ||R_b p_i + t_b - x_i||^2 without forming (N, B, F, 3)."""
    p2 = np.sum(rest ** 2, axis=1)
    x2 = np.sum(frames ** 2, axis=(0, 2))
    t2 = np.sum(trans ** 2, axis=(0, 2))
    nf = len(frames)
    cross_xrp = np.einsum("fnj,fbjk,nk->nb", frames, mats, rest, optimize=True)
    rt = np.einsum("fbjk,fbj->bk", mats, trans)
    cross_tx = np.einsum("fbj,fnj->nb", trans, frames, optimize=True)
    return nf * p2[:, None] + x2[:, None] + t2[None] + 2 * rest @ rt.T - 2 * cross_xrp - 2 * cross_tx


def _subsets(k):
    out = []
    for size in range(1, k + 1):
        out.extend(itertools.combinations(range(k), size))
    return out


def _simplex_lsq(gram, lin, const):
    """Exact ``min w'Gw - 2c'w + const`` over the probability simplex, batched.

    Enumerates every support subset, solves the equality-constrained problem
    on it and keeps the best feasible one. Returns (weights, objective).
    """
    n, k = lin.shape
    best_w = np.zeros((n, k))
    best_obj = np.full(n, np.inf)
    for sub in _subsets(k):
        s = len(sub)
        idx = np.array(sub)
        g = gram[:, idx][:, :, idx]
        kkt = np.zeros((n, s + 1, s + 1))
        kkt[:, :s, :s] = 2 * g
        kkt[:, :s, s] = 1.0
        kkt[:, s, :s] = 1.0
        rhs = np.zeros((n, s + 1))
        rhs[:, :s] = 2 * lin[:, idx]
        rhs[:, s] = 1.0
        sol = np.einsum("nij,nj->ni", np.linalg.pinv(kkt), rhs)[:, :s]
        if s == 1:
            sol = np.ones((n, 1))
        feasible = np.all(sol >= -1e-12, axis=1) & np.all(np.isfinite(sol), axis=1)
        sol = np.clip(sol, 0.0, None)
        sol /= np.maximum(sol.sum(axis=1, keepdims=True), 1e-300)
        obj = np.einsum("ni,nij,nj->n", sol, g, sol) - 2 * np.einsum("ni,ni->n", sol, lin[:, idx]) + const
        better = feasible & (obj < best_obj)
        if np.any(better):
            w = np.zeros((int(better.sum()), k))
            w[:, idx] = sol[better]
            best_w[better] = w
            best_obj[better] = obj[better]
    return best_w, best_obj


def _vertex_sse(rest, frames, weights, mats, trans):
    pred = _blend(rest, weights, mats, trans)
    return np.sum((pred - frames) ** 2, axis=(0, 2))


def _blend(rest, weights, mats, trans):
    affine = np.concatenate([mats, trans[..., None]], axis=-1)  # F,B,3,4
    nf, nb = affine.shape[:2]
    flat = np.moveaxis(affine.reshape(nf, nb, 12), 0, 1).reshape(nb, nf * 12)
    blended = (weights @ flat).reshape(-1, nf, 3, 4)
    return np.einsum("nfij,nj->fni", blended[..., :3], rest) + np.moveaxis(blended[..., 3], 0, 1)


def update_weights(rest, frames, weights, mats, trans, k=4):
    """Per-vertex simplex least squares over the ``k`` best-fitting bones.

    Rows whose new fit is not better than the current one are left unchanged.
    """
    n = len(rest)
    nb = mats.shape[1]
    k = min(k, nb)
    costs = _bone_costs(rest, frames, mats, trans)
    cand = np.argsort(costs, axis=1, kind="stable")[:, :k]
    # u[f, n, a] = R_{cand a} p_n + t_{cand a}
    u = np.einsum("fnajk,nk->fnaj", mats[:, cand], rest, optimize=True) + trans[:, cand]
    gram = np.einsum("fnaj,fnbj->nab", u, u, optimize=True)
    lin = np.einsum("fnaj,fnj->na", u, frames, optimize=True)
    const = np.sum(frames ** 2, axis=(0, 2))
    w_sub, obj = _simplex_lsq(gram, lin, const)
    new = np.zeros((n, nb))
    np.put_along_axis(new, cand, w_sub, axis=1)
    old = _vertex_sse(rest, frames, weights, mats, trans)
    keep_old = ~(obj < old)
    new[keep_old] = weights[keep_old]
    return new


def update_bones(rest, frames, weights, mats, trans, canonical_frame=0):
    """Solve each bone's per-frame transform exactly with the others held fixed."""
    mats = mats.copy()
    trans = trans.copy()
    pred = _blend(rest, weights, mats, trans)
    solve = np.ones(len(frames), dtype=bool)
    if canonical_frame is not None:
        solve[canonical_frame] = False
    for b in range(weights.shape[1]):
        idx = np.flatnonzero(weights[:, b] > 0)
        if len(idx) == 0:
            continue
        w = weights[idx, b]
        p = rest[idx]
        own = p @ np.swapaxes(mats[:, b], 1, 2) + trans[:, b][:, None, :]
        q = frames[:, idx] - (pred[:, idx] - w[None, :, None] * own)
        w2 = w * w
        p_star = (w2 @ p) / w2.sum()
        q_star = (w @ q) / w2.sum()
        h = (w[:, None] * (p - p_star)).T @ q
        r, _ = se3.kabsch_rotation(h[solve])
        new_m = mats[:, b].copy()
        new_t = trans[:, b].copy()
        new_m[solve] = r
        new_t[solve] = q_star[solve] - np.einsum("fij,j->fi", r, p_star)
        new_own = p @ np.swapaxes(new_m, 1, 2) + new_t[:, None, :]
        pred[:, idx] += w[None, :, None] * (new_own - own)
        mats[:, b], trans[:, b] = new_m, new_t
    return mats, trans


def ssdr_solve(seq, init, iters=20, k=4, tol=1e-7, min_mass=1e-9):
    """Alternate weight and bone updates starting from a cluster assignment.

    ``init`` needs ``labels``, ``rotations`` and ``translations``. With
    ``iters=0`` the one-hot weights of the labels and the initial transforms
    are returned unchanged.
    """
    if iters < 0:
        raise ValueError("iters must be non-negative")
    rest = seq.canonical
    frames = seq.positions
    labels = np.asarray(init.labels, dtype=int)
    nb = init.rotations.shape[1]
    weights = np.eye(nb)[labels]
    mats = se3.quat_to_matrix(init.rotations)
    trans = np.asarray(init.translations, dtype=float).copy()
    mats[seq.canonical_frame] = np.eye(3)
    trans[seq.canonical_frame] = 0.0
    scale = seq.bbox_diag
    count = frames.shape[0] * frames.shape[1]
    kept = np.arange(nb)
    dropped = []
    sse = float(np.sum(_vertex_sse(rest, frames, weights, mats, trans)))
    history = [sse]
    for it in range(iters):
        weights = update_weights(rest, frames, weights, mats, trans, k)
        mass = weights.sum(axis=0)
        alive = mass > min_mass
        if not np.all(alive):
            dropped.extend(kept[~alive].tolist())
            log.info("dropping %d bones without weight mass", int((~alive).sum()))
            weights, mats, trans, kept = weights[:, alive], mats[:, alive], trans[:, alive], kept[alive]
        mats, trans = update_bones(rest, frames, weights, mats, trans, seq.canonical_frame)
        new_sse = float(np.sum(_vertex_sse(rest, frames, weights, mats, trans)))
        history.append(new_sse)
        gain = np.sqrt(sse / count) - np.sqrt(new_sse / count)
        sse = new_sse
        if gain < tol * scale:
            log.debug("ssdr converged after %d iterations", it + 1)
            break
    q = se3.matrix_to_quat(mats)
    q[seq.canonical_frame] = se3.IDENTITY_QUAT
    rmse = np.sqrt(sse / count) / scale
    return SkinningResult(weights, q, trans, float(rmse), history, dropped, kept)


# -- rigidity diagnostic

@dataclass
class RigidityReport:
    arap: float  # total over frames and pairs
    distance: float
    arap_mean: float  # per frame per pair
    distance_mean: float
    pair_count: int
    frame_count: int  # frames compared against the canonical one
    skipped_pairs: int  # pair terms dropped from the ARAP sum (degenerate neighborhoods)


def rigidity_energy(seq, knn=8):
    """Local rigidity of a sequence relative to its canonical frame.

    For every canonical k-nearest-neighbour pair (i, j) and every other frame,
    the distance term is ``(|x_i - x_j| - |c_i - c_j|)^2`` and the ARAP term is
    ``|(x_i - x_j) - R_i (c_i - c_j)|^2`` with ``R_i`` the best rotation of
    vertex i's neighbourhood.
    """
    if knn < 3:
        raise ValueError("knn must be at least 3")
    if seq.frame_count < 2:
        raise ValueError("rigidity needs at least two frames")
    c = seq.canonical
    n = len(c)
    k = min(knn, n - 1)
    _, nbr = cKDTree(c).query(c, k=k + 1)
    nbr = np.asarray(nbr).reshape(n, k + 1)
    # drop the vertex itself wherever it appears (duplicate points may reorder)
    nbrs = np.empty((n, k), dtype=int)
    for i in range(n):
        row = [j for j in nbr[i] if j != i][:k]
        nbrs[i] = row
    hood = np.concatenate([np.arange(n)[:, None], nbrs], axis=1)
    others = [f for f in range(seq.frame_count) if f != seq.canonical_frame]
    frames = seq.positions[others]
    d_c = c[:, None, :] - c[nbrs]  # n,k,3
    len_c = np.linalg.norm(d_c, axis=-1)
    d_f = frames[:, :, None, :] - frames[:, nbrs]  # F,n,k,3
    distance = float(np.sum((np.linalg.norm(d_f, axis=-1) - len_c[None]) ** 2))

    ch = c[hood]
    ch = ch - ch.mean(axis=1, keepdims=True)
    fh = frames[:, hood]
    fh = fh - fh.mean(axis=2, keepdims=True)
    h = np.einsum("nki,fnkj->fnij", ch, fh)
    r, s = se3.kabsch_rotation(h)
    ok = s[..., 1] > 1e-10 * np.maximum(s[..., 0], 1e-300)
    s0 = np.linalg.svd(ch, compute_uv=False)
    ok &= (s0[:, 1] > 1e-10 * np.maximum(s0[:, 0], 1e-300))[None]
    res = d_f - np.einsum("fnij,nkj->fnki", r, d_c)
    per = np.sum(res ** 2, axis=(2, 3))
    arap = float(np.sum(per[ok]))
    skipped = int(np.sum(~ok)) * k
    pairs = n * k
    total = pairs * len(others)
    return RigidityReport(arap, distance, arap / total, distance / total, pairs, len(others), skipped)
