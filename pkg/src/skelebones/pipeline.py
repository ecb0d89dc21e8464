"""End-to-end orchestration: rig a vertex sequence, reanimate a rig."""

from __future__ import annotations

import logging
import time
from contextlib import contextmanager

import numpy as np

from . import __version__, clustering, ik, partmm, skeleton, ssdr
from .config import PipelineConfig
from .errors import SkelebonesError, StageFailed, UsageError
from .seqio import RigArchive, VertexSequence
from .types import CurveSkeleton

log = logging.getLogger(__name__)


@contextmanager
def _stage(name, partial, timings):
    start = time.perf_counter()
    try:
        yield
    except SkelebonesError as exc:
        raise StageFailed(name, exc, dict(partial)) from exc
    except (ValueError, np.linalg.LinAlgError) as exc:
        raise StageFailed(name, exc, dict(partial)) from exc
    finally:
        timings[name] = time.perf_counter() - start
        log.info("stage %-10s %.2fs", name, timings[name])


def rig_sequence(seq: VertexSequence, config: PipelineConfig | None = None,
                 curve_skeleton: CurveSkeleton | None = None) -> RigArchive:
    """Cluster, decompose, skeletonize and pose a sequence into a rig archive.

    ``curve_skeleton`` replaces the contraction step with an externally
    computed skeleton of the canonical frame.
    """
    cfg = (config or PipelineConfig()).validate()
    if curve_skeleton is not None and len(curve_skeleton.vertex_sample) != seq.vertex_count:
        raise UsageError(f"imported skeleton has {len(curve_skeleton.vertex_sample)} correspondences "
                         f"for {seq.vertex_count} vertices")
    partial, timings = {}, {}
    rest = seq.canonical
    with _stage("cluster", partial, timings):
        assignment = clustering.lbg_cluster(seq, cfg.max_bones, cfg.distortion_tol, cfg.min_cluster_size)
        partial["labels"] = assignment.labels
    with _stage("ssdr", partial, timings):
        fit = ssdr.ssdr_solve(seq, assignment, iters=cfg.ssdr_iters, k=cfg.weights_per_vertex, tol=cfg.ssdr_tol)
        partial.update(weights=fit.weights, bone_rotations=fit.rotations, bone_translations=fit.translations)
    with _stage("skeleton", partial, timings):
        if curve_skeleton is None:
            params = skeleton.ContractionParams(samples=cfg.skeleton_samples)
            curve_skeleton = skeleton.extract_curve_skeleton(rest, params)
        com = rest.mean(axis=0)
        skel, tree, _ = skeleton.skeletonize(curve_skeleton, fit.weights, com, cfg.tau)
        partial.update(skeleton_samples=skel.samples, joints=tree.joints, parents=tree.parents)
    with _stage("poses", partial, timings):
        binding = ik.bind_vertices(rest, tree)
        targets = skeleton.transported_samples(skel, rest, seq.positions)
        track = ik.solve_track(tree, binding, rest, seq.positions, targets, lam=cfg.ik_lambda,
                               iters=cfg.ik_iters, canonical_frame=seq.canonical_frame)
    meta = {
        "version": __version__,
        "config": cfg.to_dict(),
        "config_hash": cfg.digest(),
        "unit": cfg.unit,
        "frame_count": seq.frame_count,
        "vertex_count": seq.vertex_count,
        "bone_count": fit.bone_count,
        "joint_count": tree.joint_count,
        "ssdr_rmse": float(fit.rmse),
    }
    log.info("rig: %d bones, %d joints, total %.2fs", fit.bone_count, tree.joint_count, sum(timings.values()))
    return RigArchive(rest, fit.weights, fit.rotations, fit.translations, skel, tree,
                      track.rotations, track.root_translations, seq.canonical_frame, meta)


def animate_rig(rig: RigArchive, rotations, root_translations=None, config: PipelineConfig | None = None,
                return_bones=False):
    """Reanimate a rig from a skeletal motion.

    Returns a VertexSequence, or (sequence, bone rotations, bone translations)
    with ``return_bones``.
    """
    cfg = (config or PipelineConfig()).validate()
    rotations = np.asarray(rotations, dtype=float)
    if rotations.ndim != 3 or rotations.shape[1:] != (rig.tree.joint_count, 4):
        raise UsageError(f"query has shape {rotations.shape}; the rig expects (F, {rig.tree.joint_count}, 4)")
    if len(rotations) < 1:
        raise UsageError("query has no frames")
    start = time.perf_counter()
    positions, bone_rot, bone_trans = partmm.animate(rig, rotations, root_translations, p=cfg.patch_size, k=cfg.knn,
                                     levels=cfg.levels, lambda_alpha=cfg.blend, parts=cfg.parts,
                                     full_body=cfg.full_body)
    log.info("animate: %d frames in %.2fs", len(rotations), time.perf_counter() - start)
    seq = VertexSequence(positions)
    return (seq, bone_rot, bone_trans) if return_bones else seq
