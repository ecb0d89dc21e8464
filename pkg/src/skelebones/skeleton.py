"""Curve-skeleton extraction, joint detection and kinematic tree construction."""

from __future__ import annotations

import logging
from collections import deque
from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp
from scipy.sparse.csgraph import connected_components, minimum_spanning_tree
from scipy.sparse.linalg import factorized
from scipy.spatial import cKDTree

from . import se3
from .errors import ContractionFailed, EmptyPointSet, ShapeError, SingleBoneSkeleton
from .types import CurveSkeleton, KinematicTree

log = logging.getLogger(__name__)


@dataclass
class ContractionParams:
    knn: int = 16
    contraction_weight: float = 1.0
    attraction_weight: float = 0.5
    growth: float = 2.0
    max_iters: int = 20
    # stop once the median neighbourhood thickness falls below this fraction of the initial one
    thin: float = 0.05
    samples: int = 100
    collapse_triangles: bool = True
    spur_length: int = 0
    spur_factor: float = 3.0
    branch_merge_hops: int = 2
    branch_merge_factor: float = 3.5


# -- contraction

def _knn_graph(points, k):
    n = len(points)
    k = min(k, n - 1)
    _, nb = cKDTree(points).query(points, k=k + 1)
    nb = np.asarray(nb)[:, 1:]
    rows = np.repeat(np.arange(n), k)
    a = sp.coo_matrix((np.ones(n * k), (rows, nb.ravel())), shape=(n, n)).tocsr()
    a = ((a + a.T) > 0).astype(float)
    return a, nb


def _thickness(x, hood):
    """Spread of each neighbourhood across its principal direction."""
    y = x[hood] - x[hood].mean(axis=1, keepdims=True)
    ev = np.linalg.eigvalsh(np.einsum("nki,nkj->nij", y, y) / hood.shape[1])
    return np.sqrt(np.maximum(ev[:, 0] + ev[:, 1], 0.0))


def contract_points(points, params: ContractionParams | None = None):
    """Laplacian contraction of a point cloud toward its centerlines.

    Each step solves ``min W_L^2 |L X|^2 + sum_i W_H,i^2 |X_i - P_i|^2`` with a
    uniform KNN Laplacian on the original neighbourhoods. ``W_L`` grows
    geometrically while each point's attraction grows as its neighbourhood
    thins out, so parts that have already collapsed to a curve stay put.
    Returns (contracted points, iterations).
    """
    p = params or ContractionParams()
    pts = np.asarray(points, dtype=float)
    n = len(pts)
    adj, nb = _knn_graph(pts, p.knn)
    hood = np.concatenate([np.arange(n)[:, None], nb], axis=1)
    deg = np.asarray(adj.sum(axis=1)).ravel()
    lap = sp.eye(n) - sp.diags(1.0 / deg) @ adj
    ltl = (lap.T @ lap).tocsc()
    diag0 = float(np.linalg.norm(pts.max(0) - pts.min(0)))
    t0 = _thickness(pts, hood)
    t0 = np.maximum(t0, 1e-9 * max(diag0, 1e-300))
    x = pts.copy()
    wl = p.contraction_weight
    t = t0
    it = 0
    for it in range(1, p.max_iters + 1):
        wh = p.attraction_weight * t0 / np.maximum(t, 1e-6 * t0)
        try:
            solve = factorized((wl * wl * ltl + sp.diags(wh * wh)).tocsc())
        except RuntimeError as exc:
            raise ContractionFailed(it, f"(singular system: {exc})") from exc
        rhs = (wh * wh)[:, None] * x
        x = np.stack([solve(rhs[:, c]) for c in range(3)], axis=1)
        if not np.all(np.isfinite(x)):
            raise ContractionFailed(it, "(non-finite positions)")
        diag = float(np.linalg.norm(x.max(0) - x.min(0)))
        if diag > 1.5 * diag0:
            raise ContractionFailed(it, f"(bounding box grew from {diag0:.4g} to {diag:.4g})")
        if diag < 1e-6 * diag0:
            raise ContractionFailed(it, "(the cloud collapsed to a point)")
        t = _thickness(x, hood)
        if np.median(t / t0) < p.thin:
            break
        wl *= p.growth
    return x, it


def farthest_point_sampling(points, count, start=None):
    """Indices of ``count`` farthest-point samples; starts at the point farthest from the centroid."""
    pts = np.asarray(points, dtype=float)
    count = min(count, len(pts))
    if start is None:
        start = int(np.argmax(np.sum((pts - pts.mean(0)) ** 2, axis=1)))
    chosen = [start]
    dist = np.sum((pts - pts[start]) ** 2, axis=1)
    for _ in range(count - 1):
        nxt = int(np.argmax(dist))
        chosen.append(nxt)
        dist = np.minimum(dist, np.sum((pts - pts[nxt]) ** 2, axis=1))
    return np.array(chosen)


# -- graph utilities

def _adjacency(m, edges):
    adj = [set() for _ in range(m)]
    for a, b in edges:
        if a != b:
            adj[a].add(int(b))
            adj[b].add(int(a))
    return adj


def _edges_from_adj(adj):
    return np.array(sorted((a, b) for a in range(len(adj)) for b in adj[a] if a < b),
                    dtype=int).reshape(-1, 2)


def hop_distances(adj, source, limit=None):
    """BFS hop counts from ``source`` (dict), optionally truncated at ``limit`` hops."""
    dist = {source: 0}
    queue = deque([source])
    while queue:
        u = queue.popleft()
        if limit is not None and dist[u] >= limit:
            continue
        for v in sorted(adj[u]):
            if v not in dist:
                dist[v] = dist[u] + 1
                queue.append(v)
    return dist


def _path_length(positions, path):
    if len(path) < 2:
        return 0.0
    p = positions[np.asarray(path)]
    return float(np.linalg.norm(np.diff(p, axis=0), axis=1).sum())


def _prune_spurs(adj, alive, positions, radius, max_len, factor):
    """Remove leaf branches that are short in hops or short relative to the local thickness.

    A leaf branch runs from a leaf to the first branch node. It is pruned if it
    has at most ``max_len`` edges or is shorter than ``factor`` times the
    median thickness along it.
    """
    changed = True
    while changed:
        changed = False
        for leaf in sorted(u for u in alive if len(adj[u]) == 1):
            if leaf not in alive or len(adj[leaf]) != 1:
                continue
            path = [leaf]
            prev, cur = leaf, next(iter(adj[leaf]))
            while len(adj[cur]) == 2:
                path.append(cur)
                prev, cur = cur, next(v for v in adj[cur] if v != prev)
            if len(adj[cur]) < 3:
                continue  # the whole graph is one chain
            length = _path_length(positions, path + [cur])
            if len(path) <= max_len or length < factor * np.median(radius[path]):
                for u in path:
                    for v in list(adj[u]):
                        adj[v].discard(u)
                    adj[u].clear()
                    alive.discard(u)
                changed = True
    return adj, alive


def _merge_branches(adj, alive, positions, radius, hops, factor):
    """Collapse branch nodes that are close along the graph into one node.

    Two branch nodes are close if they are at most ``hops`` edges apart, or if
    they lie within ``factor`` times the median thickness along the path
    between them and that path is at most twice as long.
    """
    changed = True
    while changed:
        changed = False
        branches = sorted(u for u in alive if len(adj[u]) >= 3)
        for i, a in enumerate(branches):
            for b in branches[i + 1:]:
                path = _path(adj, a, b)
                scale = factor * np.median(radius[path])
                near = (np.linalg.norm(positions[a] - positions[b]) < scale
                        and _path_length(positions, path) < 2.0 * scale)
                if len(path) - 1 <= hops or near:
                    members = sorted(path)
                    keep = min((a, b), key=lambda u: (-len(adj[u]), u))
                    positions[keep] = positions[members].mean(0)
                    for u in members:
                        if u == keep:
                            continue
                        for v in list(adj[u]):
                            adj[v].discard(u)
                            if v not in members:
                                adj[keep].add(v)
                                adj[v].add(keep)
                        adj[u].clear()
                        alive.discard(u)
                    changed = True
                    break
            if changed:
                break
    return adj, alive, positions


def _path(adj, a, b):
    prev = {a: None}
    queue = deque([a])
    while queue:
        u = queue.popleft()
        if u == b:
            break
        for v in sorted(adj[u]):
            if v not in prev:
                prev[v] = u
                queue.append(v)
    out, u = [], b
    while u is not None and u in prev:
        out.append(u)
        u = prev[u]
    return out


def _circle_center(xy):
    """Algebraic least-squares circle fit in the plane. Returns (center, radius, rms residual)."""
    a = np.column_stack([2 * xy, np.ones(len(xy))])
    sol = np.linalg.lstsq(a, (xy ** 2).sum(axis=1), rcond=None)[0]
    c = sol[:2]
    r = float(np.sqrt(max(sol[2] + c @ c, 0.0)))
    res = float(np.sqrt(np.mean((np.linalg.norm(xy - c, axis=1) - r) ** 2)))
    return c, r, res


def _recenter(adj, alive, positions, radius, pts, hops=2, min_points=8):
    """Move chain samples to the centre of the surface cross-section around them.

    Each degree-2 sample takes the surface points within twice its thickness
    that lie in a slab one edge wide across the local chain direction, and
    fits a circle to them in the cross-section plane. The fit is used only when
    it is plausible (centre inside the circle, small residual). Leaves are then
    projected onto the line through their two chain neighbours.
    """
    tree = cKDTree(pts)
    out = positions.copy()
    for j in sorted(alive):
        if len(adj[j]) != 2:
            continue
        hood = sorted(hop_distances(adj, j, hops))
        q = positions[hood] - positions[hood].mean(axis=0)
        tangent = np.linalg.svd(q)[2][0]
        h = float(np.mean([np.linalg.norm(positions[k] - positions[j]) for k in adj[j]]))
        idx = np.asarray(tree.query_ball_point(positions[j], 2.0 * radius[j]), dtype=int)
        if len(idx) < min_points:
            continue
        d = pts[idx] - positions[j]
        along = d @ tangent
        near = np.abs(along) <= h
        if near.sum() < min_points:
            continue
        d = d[near] - np.outer(along[near], tangent)
        u = np.linalg.svd(np.eye(3) - np.outer(tangent, tangent))[0][:, 0]
        v = np.cross(tangent, u)
        c, r, res = _circle_center(np.stack([d @ u, d @ v], axis=1))
        if np.linalg.norm(c) < 0.5 * r and res < 0.1 * r:
            out[j] = positions[j] + c[0] * u + c[1] * v
    for j in sorted(alive):
        if len(adj[j]) != 1:
            continue
        k = next(iter(adj[j]))
        if len(adj[k]) != 2:
            continue
        b = next(v for v in adj[k] if v != j)
        d = out[k] - out[b]
        norm = np.linalg.norm(d)
        if norm > 0:
            d /= norm
            out[j] = out[k] + ((out[j] - out[k]) @ d) * d
    return out


def _collapse_triangles(adj, positions, counts, cell):
    """Collapse the shortest edge lying on a triangle until the graph has none.

    Merged samples take the count-weighted mean position; ``cell`` is updated
    in place to point at the surviving sample.
    """
    alive = set(range(len(adj)))
    while True:
        best = None
        for a in sorted(alive):
            for b in sorted(adj[a]):
                if b <= a or not (adj[a] & adj[b]):
                    continue
                d = float(np.linalg.norm(positions[a] - positions[b]))
                if best is None or d < best[0]:
                    best = (d, a, b)
        if best is None:
            return adj, alive
        _, a, b = best
        total = counts[a] + counts[b]
        positions[a] = (counts[a] * positions[a] + counts[b] * positions[b]) / total
        counts[a] = total
        for v in adj[b]:
            adj[v].discard(b)
            if v != a:
                adj[v].add(a)
                adj[a].add(v)
        adj[b].clear()
        alive.discard(b)
        cell[cell == b] = a


def extract_curve_skeleton(points, params: ContractionParams | None = None) -> CurveSkeleton:
    """Contract the canonical points, sample them and connect the samples into a tree graph."""
    p = params or ContractionParams()
    pts = np.asarray(points, dtype=float)
    if len(pts) < 100:
        raise ValueError(f"skeleton extraction needs at least 100 points, got {len(pts)}")
    contracted, iters = contract_points(pts, p)
    log.debug("contraction stopped after %d iterations", iters)
    seeds = farthest_point_sampling(contracted, p.samples)
    m = len(seeds)
    _, cell = cKDTree(contracted[seeds]).query(contracted)
    cell = np.asarray(cell)
    # every seed owns itself, so no cell is empty
    counts = np.bincount(cell, minlength=m).astype(float)
    samples = np.zeros((m, 3))
    np.add.at(samples, cell, contracted)
    samples /= counts[:, None]

    # cells are adjacent when they share a neighbourhood edge of the original cloud
    knn, _ = _knn_graph(pts, p.knn)
    coo = knn.tocoo()
    adj_list = _adjacency(m, zip(cell[coo.row], cell[coo.col]))
    alive = set(range(m))
    if p.collapse_triangles:
        adj_list, alive = _collapse_triangles(adj_list, samples, counts, cell)

    ids = np.array(sorted(alive))
    index = -np.ones(m, dtype=int)
    index[ids] = np.arange(len(ids))
    pairs = np.array([(index[u], index[v]) for u in ids for v in adj_list[u] if u < v], dtype=int).reshape(-1, 2)
    mc = len(ids)
    w = np.linalg.norm(samples[ids[pairs[:, 0]]] - samples[ids[pairs[:, 1]]], axis=1) + 1e-12
    graph = sp.coo_matrix((w, (pairs[:, 0], pairs[:, 1])), shape=(mc, mc)).tocsr()
    ncomp, comp = connected_components(graph, directed=False)
    if ncomp > 1:
        # bridge components with their closest sample pairs
        sub_pos = samples[ids]
        extra = []
        for c in range(1, ncomp):
            ia, ib = np.flatnonzero(comp == 0), np.flatnonzero(comp == c)
            dist = np.linalg.norm(sub_pos[ia][:, None] - sub_pos[ib][None], axis=2) + 1e-12
            i, j = np.unravel_index(np.argmin(dist), dist.shape)
            extra.append((ia[i], ib[j], dist[i, j]))
        e = np.array(extra)
        graph = graph + sp.coo_matrix((e[:, 2], (e[:, 0].astype(int), e[:, 1].astype(int))), shape=(mc, mc))
    mst = minimum_spanning_tree(graph).tocoo()
    adj_list = _adjacency(m, zip(ids[mst.row], ids[mst.col]))
    # local thickness: mean distance from each sample to its original points
    radius = np.zeros(m)
    np.add.at(radius, cell, np.linalg.norm(pts - samples[cell], axis=1))
    radius /= np.maximum(np.bincount(cell, minlength=m), 1)
    for _ in range(3):
        adj_list, alive = _prune_spurs(adj_list, alive, samples, radius, p.spur_length, p.spur_factor)
        adj_list, alive, samples = _merge_branches(adj_list, alive, samples, radius,
                                                   p.branch_merge_hops, p.branch_merge_factor)

    kept = np.array(sorted(alive))
    remap = -np.ones(m, dtype=int)
    remap[kept] = np.arange(len(kept))
    coarse = samples[kept]
    coarse_edges = remap[_edges_from_adj(adj_list)].reshape(-1, 2)
    dense, edges = _subdivide(coarse, coarse_edges, p.samples)
    # every point belongs to the nearest sample of the subdivided graph
    _, vs = cKDTree(dense).query(contracted)
    vs = np.asarray(vs)
    md = len(dense)
    counts = np.bincount(vs, minlength=md)
    radius = np.zeros(md)
    np.add.at(radius, vs, np.linalg.norm(pts - dense[vs], axis=1))
    radius = np.where(counts > 0, radius / np.maximum(counts, 1), 0.0)
    dense = _recenter(_adjacency(md, edges), set(range(md)), dense, radius, pts)
    return CurveSkeleton(dense, edges, vs)


def _subdivide(points, edges, target):
    """Insert evenly spaced samples on every edge so the graph has about ``target`` samples."""
    if len(edges) == 0:
        return points.copy(), edges.reshape(-1, 2)
    lengths = np.linalg.norm(points[edges[:, 0]] - points[edges[:, 1]], axis=1)
    spacing = lengths.sum() / max(target - 1, 1)
    out = [points]
    new_edges = []
    nxt = len(points)
    for (a, b), length in zip(edges, lengths):
        pieces = max(1, int(np.ceil(length / max(spacing, 1e-300) - 1e-9)))
        prev = a
        for k in range(1, pieces):
            out.append(points[a] + (points[b] - points[a]) * (k / pieces))
            new_edges.append((prev, nxt))
            prev = nxt
            nxt += 1
        new_edges.append((prev, b))
    return np.vstack([out[0]] + [o[None] for o in out[1:]]), np.array(new_edges, dtype=int)


def transported_samples(skel: CurveSkeleton, rest, frame_positions, min_points=8):
    """Skeleton samples carried into other frames by their corresponded vertices.

    Each sample follows the best rigid motion of its correspondence set, so a
    rigidly moving region reproduces the canonical sample exactly. Sets
    smaller than ``min_points`` are extended with the sets of skeleton
    neighbours, ring by ring.
    """
    frame_positions = np.asarray(frame_positions, dtype=float)
    single = frame_positions.ndim == 2
    frames = frame_positions[None] if single else frame_positions
    out = np.empty((len(frames), skel.sample_count, 3))
    sets = skel.correspondences()
    if not any(len(idx) for idx in sets):
        raise ValueError("no sample has corresponded vertices")
    adj = skel.adjacency()
    for j in range(skel.sample_count):
        idx = sets[j]
        if len(idx) < min_points:
            # grow the set ring by ring along the skeleton
            ring, seen, parts = [j], {j}, [idx]
            while sum(len(p) for p in parts) < min_points and ring:
                ring = [v for u in ring for v in adj[u] if v not in seen]
                seen.update(ring)
                parts += [sets[v] for v in ring]
            idx = np.concatenate(parts)
        c = rest[idx]
        cbar = c.mean(0)
        fbar = frames[:, idx].mean(axis=1)
        if len(idx) >= 3:
            h = (c - cbar).T @ (frames[:, idx] - fbar[:, None])
            r, s = se3.kabsch_rotation(h)
            good = s[:, 1] > 1e-10 * np.maximum(s[:, 0], 1e-300)
            off = r @ (skel.samples[j] - cbar)
            out[:, j] = fbar + np.where(good[:, None], off, skel.samples[j] - cbar)
        else:
            out[:, j] = fbar + (skel.samples[j] - cbar)
    return out[0] if single else out


# -- weights on the skeleton

def pull_back_weights(skel: CurveSkeleton, weights):
    """Mean skinning-weight row of each sample's corresponded vertices, renormalized.

    Samples without corresponded vertices copy the nearest sample that has some.
    """
    weights = np.asarray(weights, dtype=float)
    m = skel.sample_count
    if m == 0:
        raise EmptyPointSet("curve skeleton has no samples")
    vs = np.asarray(skel.vertex_sample)
    if len(vs) != len(weights) or (len(vs) and (vs.min() < 0 or vs.max() >= m)):
        raise ShapeError("vertex-to-sample correspondence does not match the skeleton and weights")
    sums = np.zeros((m, weights.shape[1]))
    np.add.at(sums, skel.vertex_sample, weights)
    counts = np.bincount(skel.vertex_sample, minlength=m)
    has = counts > 0
    if not np.any(has):
        raise ValueError("no sample has corresponded vertices")
    out = np.zeros_like(sums)
    out[has] = sums[has] / counts[has, None]
    if not np.all(has):
        donors = np.flatnonzero(has)
        _, near = cKDTree(skel.samples[donors]).query(skel.samples[~has])
        out[~has] = out[donors[np.asarray(near)]]
    out /= out.sum(axis=1, keepdims=True)
    return out


def weight_gradient(skel: CurveSkeleton, sample_weights=None):
    """Scale-free weight change at every sample (max over skeleton neighbours)."""
    w = skel.sample_weights if sample_weights is None else sample_weights
    grad = np.zeros(skel.sample_count)
    if len(skel.edges) == 0:
        return grad
    ebar = skel.mean_edge_length()
    a, b = skel.edges[:, 0], skel.edges[:, 1]
    tv = 0.5 * np.abs(w[a] - w[b]).sum(axis=1)
    dist = np.maximum(np.linalg.norm(skel.samples[a] - skel.samples[b], axis=1), 1e-300)
    g = tv / dist * ebar
    np.maximum.at(grad, a, g)
    np.maximum.at(grad, b, g)
    return grad


@dataclass
class JointDetection:
    joints: np.ndarray  # sample indices, ascending
    gradient: np.ndarray  # (M,)
    branches: np.ndarray
    leaves: np.ndarray
    candidates: np.ndarray  # gradient joints kept after suppression


def detect_joints(skel: CurveSkeleton, tau=0.3, sample_weights=None, suppress_hops=2) -> JointDetection:
    """Joints at sharp weight transitions, branch samples and chain endpoints.

    Each connected run of samples whose gradient exceeds ``tau`` yields one
    joint at its peak; peaks within ``suppress_hops`` of a stronger joint or a
    branch are dropped.

    Raises SingleBoneSkeleton when there is neither a transition above ``tau``
    nor a branch.
    """
    if not 0 < tau <= 1:
        raise ValueError("tau must lie in (0, 1]")
    w = skel.sample_weights if sample_weights is None else sample_weights
    if w is None:
        raise ValueError("skeleton has no pulled-back weights")
    grad = weight_gradient(skel, w)
    adj = skel.adjacency()
    deg = np.array([len(a) for a in adj])
    branches = np.flatnonzero(deg >= 3)
    leaves = np.flatnonzero(deg == 1)
    cand = np.flatnonzero(grad > tau)
    if len(cand) == 0 and len(branches) == 0:
        raise SingleBoneSkeleton("no weight transition above tau and no branch")
    accepted = []
    blocked = set()
    for b in branches:
        accepted.append(int(b))
        blocked.update(hop_distances(adj, int(b), suppress_hops))
    # one joint per connected run of above-threshold samples, at its peak
    in_cand = set(cand.tolist())
    peaks, seen = [], set()
    for j in cand.tolist():
        if j in seen:
            continue
        run, stack = [], [j]
        seen.add(j)
        while stack:
            u = stack.pop()
            run.append(u)
            for v in adj[u]:
                if v in in_cand and v not in seen:
                    seen.add(v)
                    stack.append(v)
        peaks.append(min(run, key=lambda u: (-grad[u], u)))
    kept = []
    for j in sorted(peaks, key=lambda u: (-grad[u], u)):
        if j in blocked:
            continue
        kept.append(j)
        blocked.update(hop_distances(adj, j, suppress_hops))
    joints = sorted(set(accepted) | set(kept) | set(leaves.tolist()))
    return JointDetection(np.array(joints, dtype=int), grad, branches, leaves, np.array(sorted(kept), dtype=int))


# -- kinematic tree

def build_tree(skel: CurveSkeleton, joint_samples, center_of_mass) -> KinematicTree:
    """Connect joints along the skeleton and orient the tree from the joint nearest the centre of mass."""
    joint_samples = np.asarray(sorted(set(int(j) for j in joint_samples)), dtype=int)
    if len(joint_samples) == 0:
        raise ValueError("build_tree needs at least one joint")
    pos = skel.samples[joint_samples]
    jn = len(joint_samples)
    index = {int(s): k for k, s in enumerate(joint_samples)}
    adj = skel.adjacency()
    links = set()
    for k, s in enumerate(joint_samples):
        seen = {int(s)}
        queue = deque([int(s)])
        while queue:
            u = queue.popleft()
            for v in adj[u]:
                if v in seen:
                    continue
                seen.add(v)
                if v in index:
                    links.add((min(k, index[v]), max(k, index[v])))
                else:
                    queue.append(v)
    jadj = [set() for _ in range(jn)]
    for a, b in sorted(links):
        jadj[a].add(b)
        jadj[b].add(a)
    com = np.asarray(center_of_mass, dtype=float)
    d = np.sum((pos - com) ** 2, axis=1)
    root = int(np.flatnonzero(d == d.min())[0])

    parents = -np.ones(jn, dtype=int)
    visited = np.zeros(jn, dtype=bool)

    def dfs(start):
        stack = [start]
        visited[start] = True
        while stack:
            u = stack.pop()
            for v in sorted(jadj[u], reverse=True):
                if not visited[v]:
                    visited[v] = True
                    parents[v] = u
                    stack.append(v)

    dfs(root)
    while not np.all(visited):
        # attach the first unreached joint to its nearest reached joint
        lone = int(np.flatnonzero(~visited)[0])
        reached = np.flatnonzero(visited)
        near = int(reached[np.argmin(np.sum((pos[reached] - pos[lone]) ** 2, axis=1))])
        log.warning("joint %d is disconnected from the tree; attached to joint %d", lone, near)
        jadj[lone].add(near)
        jadj[near].add(lone)
        visited[lone] = True
        parents[lone] = near
        dfs_stack = [lone]
        while dfs_stack:
            u = dfs_stack.pop()
            for v in sorted(jadj[u], reverse=True):
                if not visited[v]:
                    visited[v] = True
                    parents[v] = u
                    dfs_stack.append(v)
    tree = KinematicTree(pos, parents, joint_samples)
    tree.validate()
    return tree


def root_only_tree(skel: CurveSkeleton, center_of_mass) -> KinematicTree:
    d = np.sum((skel.samples - np.asarray(center_of_mass)) ** 2, axis=1)
    s = int(np.flatnonzero(d == d.min())[0])
    return KinematicTree(skel.samples[s][None], np.array([-1]), np.array([s]))


def skeletonize(skel: CurveSkeleton, weights, center_of_mass, tau=0.3):
    """Pull back weights, detect joints and build the tree. Returns (skeleton, tree, detection)."""
    skel = CurveSkeleton(skel.samples, skel.edges, skel.vertex_sample, pull_back_weights(skel, weights))
    try:
        det = detect_joints(skel, tau)
    except SingleBoneSkeleton:
        log.info("no joints detected; using a root-only tree")
        return skel, root_only_tree(skel, center_of_mass), None
    return skel, build_tree(skel, det.joints, center_of_mass), det


def refine_with_frames(skel: CurveSkeleton, weights, prior: KinematicTree, center_of_mass, tau=0.3):
    """Re-detect joints with weights from a longer sequence, keeping prior joint identities.

    New joints within ``2 * mean edge length`` of a prior joint snap to it;
    prior joints whose weight change is still above ``tau`` are kept even if
    suppression dropped them. ``weights=None`` (no extension) returns the
    prior tree.
    """
    if weights is None:
        return prior
    skel = CurveSkeleton(skel.samples, skel.edges, skel.vertex_sample, pull_back_weights(skel, weights))
    try:
        det = detect_joints(skel, tau)
    except SingleBoneSkeleton:
        return prior if prior.joint_count > 1 else root_only_tree(skel, center_of_mass)
    snap = 2.0 * skel.mean_edge_length()
    prior_samples = [int(s) for s in prior.joint_samples if s >= 0]
    joints = set()
    for j in det.joints.tolist():
        near = [s for s in prior_samples
                if np.linalg.norm(skel.samples[s] - skel.samples[j]) <= snap]
        if near:
            joints.add(min(near, key=lambda s: (np.linalg.norm(skel.samples[s] - skel.samples[j]), s)))
        else:
            joints.add(j)
    for s in prior_samples:
        if s < skel.sample_count and det.gradient[s] > tau:
            joints.add(s)
    if prior.joint_count == 1 and len(joints) == 0:
        return prior
    return build_tree(skel, sorted(joints), center_of_mass)
