"""Command-line entry point: rig, animate, eval, synth, export."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import __version__, metrics, pipeline, seqio, synth
from .config import PipelineConfig, load_config
from .errors import SkelebonesError, StageFailed, UsageError

log = logging.getLogger("skelebones")

# flag -> config field, for every flag that overrides a config value
RIG_FLAGS = {
    "max_bones": "max_bones",
    "distortion_tol": "distortion_tol",
    "min_cluster_size": "min_cluster_size",
    "max_iters": "ssdr_iters",
    "weights_per_vertex": "weights_per_vertex",
    "tol": "ssdr_tol",
    "tau": "tau",
    "skeleton_samples": "skeleton_samples",
    "ik_lambda": "ik_lambda",
    "ik_iters": "ik_iters",
    "unit": "unit",
}
ANIMATE_FLAGS = {
    "patch_size": "patch_size",
    "knn": "knn",
    "levels": "levels",
    "blend": "blend",
    "parts": "parts",
    "full_body": "full_body",
}


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _add_config(p, flags):
    d = PipelineConfig()
    p.add_argument("--config", type=Path, help="JSON file with configuration values; flags override it")
    help_text = {
        "max_bones": "upper bound on the bone count",
        "distortion_tol": "stop splitting once every cluster fits within this fraction of the bbox diagonal",
        "min_cluster_size": "smallest cluster a split may create",
        "ssdr_iters": "skinning decomposition iterations",
        "weights_per_vertex": "nonzero skinning weights per vertex",
        "ssdr_tol": "relative objective decrease below which the decomposition stops",
        "tau": "weight-change threshold for interior joints",
        "skeleton_samples": "curve skeleton sample count",
        "ik_lambda": "weight of the skeleton Chamfer term in pose fitting",
        "ik_iters": "pose solver iterations per frame",
        "unit": "free-form scene unit recorded with the rig and in reports",
        "patch_size": "motion patch length in frames",
        "knn": "neighbours blended per part and patch",
        "levels": "coarse levels above the full-rate level",
        "blend": "weight of each finer level against the upsampled coarser result",
        "parts": "target number of kinematic parts",
        "full_body": "match the whole skeleton as a single part",
    }
    for flag, name in flags.items():
        default = getattr(d, name)
        opt = "--" + flag.replace("_", "-")
        if isinstance(default, bool):
            p.add_argument(opt, dest=flag, action="store_const", const=True, default=None,
                           help=f"{help_text[name]} (default: off)")
        else:
            p.add_argument(opt, dest=flag, type=type(default), default=None,
                           help=f"{help_text[name]} (default: {default})")


def _config(args, flags):
    cfg = load_config(args.config) if args.config else PipelineConfig()
    overrides = {name: getattr(args, flag) for flag, name in flags.items() if getattr(args, flag) is not None}
    return replace(cfg, **overrides).validate()


def _check_output(path):
    path = Path(path)
    parent = path.parent if path.parent != Path("") else Path(".")
    if not parent.is_dir():
        raise UsageError(f"output directory {parent} does not exist")
    return path


def _write_sequence(seq, path):
    path = Path(path)
    if path.suffix == ".vseq":
        seqio.save_sequence(seq, path)
    else:
        seqio.save_obj_sequence(seq, path)


def _parse_frames(text, frame_count):
    if text is None:
        return []
    frames = []
    for part in text.split(","):
        try:
            f = int(part)
        except ValueError:
            raise UsageError(f"bad frame index {part!r}") from None
        if not 0 <= f < frame_count:
            raise UsageError(f"frame {f} out of range [0, {frame_count})")
        frames.append(f)
    return frames


# -- commands

def cmd_rig(args):
    cfg = _config(args, RIG_FLAGS)
    seq = seqio.load_sequence(args.input)
    skel = None
    if args.import_skeleton:
        skel = seqio.load_skeleton(args.import_skeleton, seq.vertex_count)
    out = _check_output(args.output)
    rig = pipeline.rig_sequence(seq, cfg, skel)
    seqio.save_rig(rig, out)
    print(f"wrote {out}: {rig.bone_count} bones, {rig.tree.joint_count} joints, {rig.frame_count} frames")
    return 0


def cmd_animate(args):
    cfg = _config(args, ANIMATE_FLAGS)
    rig = seqio.load_rig(args.rig)
    rot, trans = seqio.load_poses(args.query)
    if rot.shape[1] != rig.tree.joint_count:
        raise UsageError(f"query has {rot.shape[1]} joints; the rig has {rig.tree.joint_count}")
    view_frames = _parse_frames(args.view_frames, len(rot))
    if view_frames and not args.view_prefix:
        raise UsageError("--view-frames needs --view-prefix")
    out = _check_output(args.output)
    if view_frames:
        _check_output(args.view_prefix + "_0.ply")
    seq, bone_rot, bone_trans = pipeline.animate_rig(rig, rot, trans, cfg, return_bones=True)
    _write_sequence(seq, out)
    print(f"wrote {out}: {seq.frame_count} frames, {seq.vertex_count} vertices")
    if view_frames:
        animated = replace(rig, bone_rotations=bone_rot, bone_translations=bone_trans,
                           pose_rotations=rot, root_translations=trans, canonical_frame=0)
        for f in view_frames:
            path = f"{args.view_prefix}_{f:04d}.ply"
            seqio.export_viewable(animated, f, path)
            print(f"wrote {path}")
    return 0


def cmd_eval(args):
    pred = seqio.load_sequence(args.predicted)
    gt = seqio.load_sequence(args.ground_truth)
    cfg = load_config(args.config) if args.config else PipelineConfig()
    unit = args.unit or cfg.unit
    if args.json:
        _check_output(args.json)
    report = metrics.evaluate(pred.positions, gt.positions, unit)
    print(metrics.format_report(report))
    if args.json:
        Path(args.json).write_text(json.dumps(report, indent=2, sort_keys=True) + "\n")
    return 0


def cmd_synth(args):
    params = {}
    if args.frames is not None:
        params["frames"] = args.frames
    if args.vertices is not None:
        params["vertices"] = args.vertices
    if args.kind not in synth.KINDS:
        raise UsageError(f"unknown generator {args.kind!r}; choose from {', '.join(synth.KINDS)}")
    if any(v <= 0 for v in params.values()):
        raise UsageError("--frames and --vertices must be positive")
    out = _check_output(args.output)
    if args.poses:
        _check_output(args.poses)
    body = synth.generate_synthetic(args.kind, params, seed=args.seed)
    if args.poses and body.pose_rotations is None:
        raise UsageError(f"{args.kind} has no ground-truth joint poses")
    _write_sequence(body.sequence, out)
    print(f"wrote {out}: {body.sequence.frame_count} frames, {body.sequence.vertex_count} vertices")
    if args.poses:
        seqio.save_poses(args.poses, body.pose_rotations, body.root_translations,
                         {"generator": args.kind, "seed": args.seed})
        print(f"wrote {args.poses}: {body.tree.joint_count} joints")
    return 0


def cmd_export(args):
    rig = seqio.load_rig(args.rig)
    if not 0 <= args.frame < rig.frame_count:
        raise UsageError(f"frame {args.frame} out of range [0, {rig.frame_count})")
    out = _check_output(args.output)
    seqio.export_viewable(rig, args.frame, out)
    print(f"wrote {out}")
    return 0


def build_parser():
    p = _Parser(prog="skelebones", description="Rig 4D vertex sequences with bones and a skeleton, then reanimate them.")
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    p.add_argument("-v", "--verbose", action="count", default=0, help="-v for stage timings, -vv for debug output")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    r = sub.add_parser("rig", help="fit bones, skeleton and joint poses to a vertex sequence")
    r.add_argument("input", help=".vseq file or directory of OBJ frames")
    r.add_argument("-o", "--output", required=True, help="rig archive to write")
    r.add_argument("--import-skeleton", type=Path, help="curve skeleton file replacing contraction")
    _add_config(r, RIG_FLAGS)
    r.set_defaults(func=cmd_rig)

    a = sub.add_parser("animate", help="drive a rig with a joint-rotation motion")
    a.add_argument("rig", help="rig archive")
    a.add_argument("query", help="poses file or rig archive holding the query motion")
    a.add_argument("-o", "--output", required=True, help=".vseq file or OBJ directory to write")
    a.add_argument("--view-frames", help="comma-separated frames to export as PLY")
    a.add_argument("--view-prefix", help="path prefix of the PLY exports")
    _add_config(a, ANIMATE_FLAGS)
    a.set_defaults(func=cmd_animate)

    e = sub.add_parser("eval", help="compare a predicted sequence against ground truth")
    e.add_argument("predicted")
    e.add_argument("ground_truth")
    e.add_argument("--json", help="also write the report as JSON here")
    e.add_argument("--unit", help="scene unit to state in the report")
    e.add_argument("--config", type=Path, help="configuration file supplying the unit")
    e.set_defaults(func=cmd_eval)

    s = sub.add_parser("synth", help="generate a synthetic articulated sequence")
    s.add_argument("kind", help="one of: " + ", ".join(synth.KINDS))
    s.add_argument("-o", "--output", required=True, help=".vseq file or OBJ directory to write")
    s.add_argument("--frames", type=int)
    s.add_argument("--vertices", type=int)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--poses", help="also write the ground-truth joint poses here")
    s.set_defaults(func=cmd_synth)

    x = sub.add_parser("export", help="write one rig frame as a viewable PLY")
    x.add_argument("rig")
    x.add_argument("-o", "--output", required=True)
    x.add_argument("--frame", type=int, default=0)
    x.set_defaults(func=cmd_export)
    return p


def main(argv=None):
    try:
        args = build_parser().parse_args(argv)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return 2
    level = [logging.WARNING, logging.INFO, logging.DEBUG][min(args.verbose, 2)]
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return 2
    except StageFailed as exc:
        print(f"error: {exc}", file=sys.stderr)
        if exc.partial:
            print("partial outputs: " + ", ".join(sorted(exc.partial)), file=sys.stderr)
        return 1
    except (SkelebonesError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
