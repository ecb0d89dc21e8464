"""Partwise motion matching: patch database, per-part retrieval, alignment and coarse-to-fine blending."""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from . import se3
from .errors import InsufficientFrames, ShapeError
from .ik import bind_vertices, forward_kinematics
from .types import KinematicTree

log = logging.getLogger(__name__)

WEIGHT_EPS = 1e-8


# -- part decomposition

@dataclass
class PartDecomposition:
    owned: list  # per part, sorted joints whose rotations the part owns
    anchors: np.ndarray  # (P,) joint each part hangs from (the root for the root part)
    bone_part: np.ndarray  # (B,) part owning each bone

    @property
    def part_count(self):
        return len(self.owned)

    def joints(self, part):
        """Joint set of a part: its owned joints plus the anchor it shares with its parent part."""
        return np.array(sorted(set(self.owned[part]) | {int(self.anchors[part])}), dtype=int)

    def bones(self, part):
        return np.flatnonzero(self.bone_part == part)


def _split_point(tree, owned, anchor):
    """Joint whose owned subtree splits the part most evenly, or None."""
    owned_set = set(owned)
    best = None
    for c in sorted(owned):
        if c == anchor or tree.parents[c] < 0:
            continue
        sub = owned_set & set(tree.subtree(c))
        if not sub or len(sub) == len(owned_set):
            continue
        score = max(len(sub), len(owned_set) - len(sub))
        if best is None or score < best[0]:
            best = (score, c, sorted(sub))
    return best


def decompose_parts(tree: KinematicTree, weights, binding, target_parts=5) -> PartDecomposition:
    """Split the tree into overlapping parts and give every bone to one part.

    Every subtree hanging from the root forms a part anchored at the root (the
    root rotation is fixed, so no part needs to own it). Parts are then merged
    (smallest first, into the part owning its anchor, or into the smallest
    sibling sharing a free anchor) or split (largest first, at the subtree that
    balances joint counts best) until ``target_parts`` is reached or no move
    is possible. A bone goes to the part whose edges carry most of its
    skinning mass; ``binding`` column ``c`` is the edge ending at joint ``c``.
    """
    j = tree.joint_count
    if target_parts < 1:
        raise ValueError("target_parts must be at least 1")
    root = tree.root
    limit = max(j - 1, 1)
    if target_parts > limit:
        log.warning("target_parts=%d exceeds the %d movable joints; clamped", target_parts, limit)
        target_parts = limit
    if target_parts == 1 or j == 1:
        owned, anchors = [list(range(j))], [root]
    else:
        owned = [sorted(tree.subtree(c)) for c in tree.children(root)]
        anchors = [root] * len(owned)

    def owner(joint):
        return next((k for k, o in enumerate(owned) if joint in o), None)

    while len(owned) > target_parts:
        k = min(range(len(owned)), key=lambda m: (len(owned[m]), -m))
        dest = owner(anchors[k])
        if dest is None:
            siblings = [m for m in range(len(owned)) if m != k and anchors[m] == anchors[k]]
            dest = min(siblings, key=lambda m: (len(owned[m]), m))
        owned[dest] = sorted(owned[dest] + owned[k])
        del owned[k], anchors[k]
    while len(owned) < target_parts:
        options = []
        for k in range(len(owned)):
            split = _split_point(tree, owned[k], anchors[k])
            if split is not None:
                options.append((len(owned[k]), -k, k, split))
        if not options:
            log.warning("cannot split the tree into %d parts; using %d", target_parts, len(owned))
            break
        _, _, k, (_, c, sub) = max(options)
        owned[k] = sorted(set(owned[k]) - set(sub))
        owned.append(sub)
        anchors.append(int(tree.parents[c]))

    weights = np.asarray(weights, dtype=float)
    binding = np.asarray(binding, dtype=float)
    mass = np.stack([weights.T @ binding[:, o].sum(axis=1) for o in owned], axis=1)
    bone_part = np.argmax(mass, axis=1)
    return PartDecomposition([list(map(int, o)) for o in owned], np.array(anchors, dtype=int), bone_part)


def single_part(tree: KinematicTree, bone_count) -> PartDecomposition:
    """All joints and bones in one part (full-body matching)."""
    return PartDecomposition([list(range(tree.joint_count))], np.array([tree.root]),
                             np.zeros(bone_count, dtype=int))


# -- database

def level_strides(levels=5):
    """Frame strides from the coarsest level down to the full-rate sequence."""
    return [2 ** (levels - ell) for ell in range(levels + 1)]


@dataclass
class MotionPatch:
    start: int
    joint_rotations: np.ndarray  # (p, J, 4)
    bone_rotations: np.ndarray  # (p, B, 4)
    bone_translations: np.ndarray  # (p, B, 3)


@dataclass
class PatchLevel:
    stride: int
    frames: np.ndarray  # source frame index of every level frame
    joint_rotations: np.ndarray  # (n, J, 4)
    root_translations: np.ndarray  # (n, 3)
    joint_positions: np.ndarray  # (n, J, 3) forward kinematics
    bone_rotations: np.ndarray  # (n, B, 4)
    bone_translations: np.ndarray  # (n, B, 3)
    patch_size: int

    @property
    def length(self):
        return len(self.frames)

    @property
    def patch_count(self):
        return self.length - self.patch_size + 1

    def patch(self, start, size=None):
        size = self.patch_size if size is None else size
        if not 0 <= start <= self.length - size:
            raise IndexError(f"patch {start} out of range")
        s = slice(start, start + size)
        return MotionPatch(start, self.joint_rotations[s], self.bone_rotations[s], self.bone_translations[s])


@dataclass
class MotionDatabase:
    tree: KinematicTree
    levels: list  # PatchLevel, coarsest first, last is the full-rate sequence
    patch_size: int

    @property
    def finest(self) -> PatchLevel:
        return self.levels[-1]


def _strided_level(tree, stride, rotations, root_translations, bone_rotations, bone_translations, p):
    idx = np.arange(0, len(rotations), stride)
    rot = rotations[idx]
    trans = root_translations[idx]
    _, pos = forward_kinematics(tree, rot, trans)
    return PatchLevel(stride, idx, rot, trans, pos, bone_rotations[idx], bone_translations[idx],
                      min(p, len(idx)))


def build_database(tree: KinematicTree, rotations, root_translations, bone_rotations, bone_translations,
                   p=7, levels=5) -> MotionDatabase:
    """Patch pyramid over a skeletal motion and its bone tracks.

    Level ``l`` keeps every ``2**(levels - l)``-th frame; the last level is the
    full-rate sequence with ``F - p + 1`` patches. Coarse levels shorter than
    ``p`` use their own length as patch size.
    """
    rotations = np.asarray(rotations, dtype=float)
    nf = len(rotations)
    if p < 1:
        raise ValueError("patch size must be positive")
    if nf < p:
        raise InsufficientFrames(f"{nf} frames is fewer than the patch size {p}")
    root_translations = np.asarray(root_translations, dtype=float)
    bone_rotations = np.asarray(bone_rotations, dtype=float)
    bone_translations = np.asarray(bone_translations, dtype=float)
    if rotations.shape[1] != tree.joint_count:
        raise ShapeError(f"rotations have {rotations.shape[1]} joints, tree has {tree.joint_count}")
    if not (len(root_translations) == len(bone_rotations) == len(bone_translations) == nf):
        raise ShapeError("joint and bone tracks differ in length")
    out = [_strided_level(tree, s, rotations, root_translations, bone_rotations, bone_translations, p)
           for s in level_strides(levels)]
    return MotionDatabase(tree, out, p)


# -- retrieval

def frame_distances(query, level_rotations, chunk=64):
    """(nq, n) sum over joints of squared geodesic distance between query and level frames."""
    query = np.asarray(query, dtype=float)
    out = np.empty((len(query), len(level_rotations)))
    for a in range(0, len(query), chunk):
        g = se3.geodesic_distance(query[a:a + chunk, None], level_rotations[None])
        out[a:a + chunk] = np.sum(g * g, axis=-1)
    return out


def window_distances(frame_d, size):
    """(nq - size + 1, n - size + 1) patch distances from per-frame distances."""
    nq, n = frame_d.shape
    wq, wn = nq - size + 1, n - size + 1
    out = np.zeros((wq, wn))
    for i in range(size):
        out += frame_d[i:i + wq, i:i + wn]
    return out


def _top_k(d, k):
    order = np.argsort(d, axis=-1, kind="stable")
    return order[..., :k]


def match_part(level: PatchLevel, joints, query, k=7):
    """k nearest patches of ``level`` to a query window, by summed squared geodesic distance.

    ``query`` is (size, len(joints), 4) rotations of the part's key joints.
    Returns ``(patch starts, distances)`` ordered by distance, ties by start.
    """
    query = np.asarray(query, dtype=float)
    joints = np.asarray(joints, dtype=int)
    size = len(query)
    if size > level.length:
        raise ShapeError(f"query window of {size} frames exceeds the level length {level.length}")
    count = level.length - size + 1
    if k > count:
        log.warning("k=%d exceeds the %d available patches; returning all", k, count)
        k = count
    d = window_distances(frame_distances(query, level.joint_rotations[:, joints]), size)[0]
    idx = _top_k(d, k)
    return idx, d[idx]


def key_joints(parts: PartDecomposition, part):
    """Joints whose rotations describe a part's motion: the ones it owns."""
    return np.array(parts.owned[part], dtype=int)


# -- alignment

def alignment_rotation(query_positions, match_positions, query_pivot, match_pivot):
    """Rotation taking the matched part's joints onto the query's about the pivots.

    Returns ``(R (3, 3), degenerate)``; collinear or single-point parts give
    the identity and ``degenerate=True``.
    """
    a = np.asarray(match_positions, dtype=float) - match_pivot
    b = np.asarray(query_positions, dtype=float) - query_pivot
    h = a.T @ b
    r, s = se3.kabsch_rotation(h)
    sa = np.linalg.svd(a, compute_uv=False) if len(a) else np.zeros(1)
    sb = np.linalg.svd(b, compute_uv=False) if len(b) else np.zeros(1)
    scale = max(float(sa[0]) if len(sa) else 0.0, float(sb[0]) if len(sb) else 0.0, 1e-300)
    if len(sa) < 2 or len(sb) < 2 or sa[1] <= 1e-9 * scale or sb[1] <= 1e-9 * scale:
        return np.eye(3), True
    return r, False


def align_patch(rotation, query_pivot, match_pivot, bone_rotations, bone_translations):
    """Left-compose ``x -> R (x - match_pivot) + query_pivot`` onto bone transforms."""
    q = se3.matrix_to_quat(rotation)
    rot = se3.quat_mul(np.broadcast_to(q, bone_rotations.shape), bone_rotations)
    trans = (bone_translations - match_pivot) @ rotation.T + query_pivot
    return rot, trans


# -- blending

def _upsample(rot, trans, src_stride, dst_frames):
    """Interpolate a level track (stride ``src_stride``) at the given source-frame times."""
    u = dst_frames / src_stride
    i0 = np.floor(u).astype(int)
    n = len(rot)
    i0 = np.minimum(i0, n - 1)
    i1 = np.minimum(i0 + 1, n - 1)
    frac = np.where(i1 > i0, u - i0, 0.0)
    r = se3.slerp(rot[i0], rot[i1], np.broadcast_to(frac[:, None], rot[i0].shape[:2]))
    t = trans[i0] + frac[:, None, None] * (trans[i1] - trans[i0])
    return r, t


def _blend(prev_rot, prev_trans, rot, trans, lam):
    if lam >= 1.0:
        return rot.copy(), trans.copy()
    if lam <= 0.0:
        return prev_rot.copy(), prev_trans.copy()
    stacked = np.stack([prev_rot, rot], axis=-2)
    w = np.broadcast_to(np.array([1.0 - lam, lam]), stacked.shape[:-1])
    return se3.weighted_rotation_average(stacked, w), (1.0 - lam) * prev_trans + lam * trans


def _level_average(db_level, parts, q_rot, q_pos, k, size, bone_count, stats):
    """Per-frame weighted average of matched and aligned patches at one level."""
    nq = len(q_rot)
    windows = nq - size + 1
    out_rot = se3.identity_quats(nq, bone_count)
    out_trans = np.zeros((nq, bone_count, 3))
    half = size // 2
    for part in range(parts.part_count):
        bones = parts.bones(part)
        if len(bones) == 0:
            continue
        keys = key_joints(parts, part)
        pjoints = parts.joints(part)
        anchor = int(parts.anchors[part])
        count = db_level.length - size + 1
        kk = min(k, count)
        if kk < k:
            log.debug("k=%d exceeds the %d available patches; using all", k, count)
        d = window_distances(frame_distances(q_rot[:, keys], db_level.joint_rotations[:, keys]), size)
        top = _top_k(d, kk)
        # contributions per query frame: (frame, slot) with slot = offset * kk + rank
        acc_rot = np.tile(se3.IDENTITY_QUAT, (nq, size * kk, len(bones), 1))
        acc_trans = np.zeros((nq, size * kk, len(bones), 3))
        acc_w = np.zeros((nq, size * kk))
        for a in range(windows):
            qc = a + half
            for rank in range(kk):
                s = int(top[a, rank])
                dist = float(d[a, s])
                mc = s + half
                r, degenerate = alignment_rotation(q_pos[qc, pjoints], db_level.joint_positions[mc, pjoints],
                                                   q_pos[qc, anchor], db_level.joint_positions[mc, anchor])
                if degenerate:
                    stats["degenerate"] += 1
                br, bt = align_patch(r, q_pos[qc, anchor], db_level.joint_positions[mc, anchor],
                                     db_level.bone_rotations[s:s + size][:, bones],
                                     db_level.bone_translations[s:s + size][:, bones])
                w = 1.0 / (dist + WEIGHT_EPS)
                for i in range(size):
                    slot = i * kk + rank
                    acc_rot[a + i, slot] = br[i]
                    acc_trans[a + i, slot] = bt[i]
                    acc_w[a + i, slot] = w
        wsum = acc_w.sum(axis=1)
        wb = np.broadcast_to(acc_w[:, :, None], acc_rot.shape[:3])
        out_rot[:, bones] = se3.weighted_rotation_average(np.swapaxes(acc_rot, 1, 2), np.swapaxes(wb, 1, 2))
        out_trans[:, bones] = np.einsum("fs,fsbk->fbk", acc_w, acc_trans) / wsum[:, None, None]
    return out_rot, out_trans


def blend_pyramid(db: MotionDatabase, parts: PartDecomposition, query_rotations, query_translations=None,
                  k=7, lambda_alpha=0.7):
    """Bone tracks for every query frame by coarse-to-fine partwise matching.

    The coarsest level is initialized with its matched average; each finer
    level blends the upsampled previous result with its own matched average:
    ``T = (1 - lambda_alpha) * up(T_prev) + lambda_alpha * T_bar``.
    Returns ``(rotations (F, B, 4), translations (F, B, 3))``.
    """
    query_rotations = np.asarray(query_rotations, dtype=float)
    nq = len(query_rotations)
    if nq < 1:
        raise ShapeError("query has no frames")
    if query_rotations.shape[1:] != (db.tree.joint_count, 4):
        raise ShapeError(f"query pose shape {query_rotations.shape[1:]} does not match "
                         f"{db.tree.joint_count} joints")
    if query_translations is None:
        query_translations = np.zeros((nq, 3))
    query_translations = np.asarray(query_translations, dtype=float)
    if not 0.0 <= lambda_alpha <= 1.0:
        raise ValueError("lambda_alpha must lie in [0, 1]")
    if k < 1:
        raise ValueError("k must be positive")
    if nq < db.patch_size:
        log.info("query of %d frames is shorter than the patch size %d; windows clamped", nq, db.patch_size)
    bone_count = db.finest.bone_rotations.shape[1]
    stats = {"degenerate": 0}
    cur_rot = cur_trans = None
    cur_stride = None
    for level in db.levels:
        frames = np.arange(0, nq, level.stride)
        size = min(level.patch_size, len(frames))
        if level.length - size + 1 < 1:
            log.info("level with stride %d has no patches; skipped", level.stride)
            continue
        q_rot = query_rotations[frames]
        _, q_pos = forward_kinematics(db.tree, q_rot, query_translations[frames])
        bar_rot, bar_trans = _level_average(level, parts, q_rot, q_pos, k, size, bone_count, stats)
        if cur_rot is None:
            cur_rot, cur_trans = bar_rot, bar_trans
        else:
            up_rot, up_trans = _upsample(cur_rot, cur_trans, cur_stride, frames)
            cur_rot, cur_trans = _blend(up_rot, up_trans, bar_rot, bar_trans, lambda_alpha)
        cur_stride = level.stride
    if cur_stride != 1:
        cur_rot, cur_trans = _upsample(cur_rot, cur_trans, cur_stride, np.arange(nq))
    if stats["degenerate"]:
        log.info("%d patch alignments were degenerate and used the identity", stats["degenerate"])
    return cur_rot, cur_trans


def full_body_match(db: MotionDatabase, query_rotations, query_translations=None, k=7, lambda_alpha=0.7):
    """Matching with the whole skeleton as one part."""
    parts = single_part(db.tree, db.finest.bone_rotations.shape[1])
    return blend_pyramid(db, parts, query_rotations, query_translations, k, lambda_alpha)


def rig_database(rig, p=7, levels=5):
    """Patch database of a rig archive's own motion."""
    return build_database(rig.tree, rig.pose_rotations, rig.root_translations,
                          rig.bone_rotations, rig.bone_translations, p, levels)


def rig_parts(rig, parts=5, full_body=False):
    if full_body:
        return single_part(rig.tree, rig.bone_rotations.shape[1])
    binding = bind_vertices(rig.rest, rig.tree)
    return decompose_parts(rig.tree, rig.weights, binding, parts)


def animate(rig, query_rotations, query_translations=None, p=7, k=7, levels=5, lambda_alpha=0.7,
            parts=5, full_body=False):
    """Vertex positions of the rig driven by a novel skeletal motion.

    Returns ``(positions (F, N, 3), bone_rotations, bone_translations)``.
    """
    query_rotations = np.asarray(query_rotations, dtype=float)
    if query_rotations.ndim != 3 or query_rotations.shape[1] != rig.tree.joint_count:
        raise ShapeError(f"query pose shape {query_rotations.shape} does not match "
                         f"{rig.tree.joint_count} joints")
    db = rig_database(rig, p, levels)
    decomposition = rig_parts(rig, parts, full_body)
    rot, trans = blend_pyramid(db, decomposition, query_rotations, query_translations, k, lambda_alpha)
    return se3.lbs_sequence(rig.rest, rig.weights, rot, trans), rot, trans
