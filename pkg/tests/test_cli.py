import json

import numpy as np
import pytest

from skelebones import cli, pipeline, seqio, synth
from skelebones.config import PipelineConfig
from skelebones.errors import StageFailed, UsageError
from skelebones.types import CurveSkeleton


@pytest.fixture(scope="module")
def workdir(tmp_path_factory):
    d = tmp_path_factory.mktemp("cli")
    assert cli.main(["synth", "hinge_chain", "-o", str(d / "hinge.vseq"), "--frames", "30",
                     "--vertices", "800", "--seed", "1", "--poses", str(d / "hinge_poses.zip")]) == 0
    assert cli.main(["rig", str(d / "hinge.vseq"), "-o", str(d / "hinge.rig")]) == 0
    return d


def test_synth_writes_sequence_and_poses(workdir):
    seq = seqio.load_sequence(workdir / "hinge.vseq")
    assert (seq.frame_count, seq.vertex_count) == (30, 800)
    rot, trans = seqio.load_poses(workdir / "hinge_poses.zip")
    assert rot.shape == (30, 3, 4) and trans.shape == (30, 3)


def test_synth_obj_directory(tmp_path):
    assert cli.main(["synth", "y_branch", "-o", str(tmp_path / "objs"), "--frames", "3", "--vertices", "200"]) == 0
    assert len(list((tmp_path / "objs").glob("*.obj"))) == 3
    assert seqio.load_sequence(tmp_path / "objs").positions.shape == (3, 200, 3)


def test_rig_recovers_hinge(workdir):
    rig = seqio.load_rig(workdir / "hinge.rig")
    assert 1 <= rig.bone_count <= 3
    assert rig.tree.joint_count == 3
    assert rig.meta["frame_count"] == 30 and rig.meta["config_hash"] == PipelineConfig().digest()


def test_rig_is_deterministic(workdir, tmp_path):
    assert cli.main(["rig", str(workdir / "hinge.vseq"), "-o", str(tmp_path / "again.rig")]) == 0
    assert (tmp_path / "again.rig").read_bytes() == (workdir / "hinge.rig").read_bytes()


def test_animate_eval_export(workdir, capsys):
    out = workdir / "anim.vseq"
    assert cli.main(["animate", str(workdir / "hinge.rig"), str(workdir / "hinge_poses.zip"), "-o", str(out),
                     "--view-frames", "0,5", "--view-prefix", str(workdir / "view")]) == 0
    assert seqio.load_sequence(out).positions.shape == (30, 800, 3)
    assert (workdir / "view_0005.ply").exists()
    # the query may also be another rig archive
    assert cli.main(["animate", str(workdir / "hinge.rig"), str(workdir / "hinge.rig"), "-o",
                     str(workdir / "self.vseq"), "--full-body"]) == 0
    capsys.readouterr()
    assert cli.main(["eval", str(out), str(workdir / "hinge.vseq"), "--json", str(workdir / "r.json"),
                     "--unit", "m"]) == 0
    text = capsys.readouterr().out
    assert "rmse" in text and "(m)" in text
    report = json.loads((workdir / "r.json").read_text())
    assert report["unit"] == "m" and report["frame_count"] == 30
    assert cli.main(["export", str(workdir / "hinge.rig"), "-o", str(workdir / "f3.ply"), "--frame", "3"]) == 0
    assert (workdir / "f3.ply").read_text().startswith("ply")


def test_joint_count_mismatch_is_usage_error(workdir, tmp_path, capsys):
    poses = tmp_path / "y.zip"
    body = synth.y_branch(frames=10, vertices=200)
    seqio.save_poses(poses, body.pose_rotations, body.root_translations)
    out = tmp_path / "never.vseq"
    assert cli.main(["animate", str(workdir / "hinge.rig"), str(poses), "-o", str(out)]) == 2
    assert not out.exists()
    assert "joints" in capsys.readouterr().err


@pytest.mark.parametrize("argv", [
    ["synth", "octopus", "-o", "x.vseq"],
    ["synth", "hinge_chain", "-o", "x.vseq", "--frames", "0"],
    ["rig", "missing.vseq", "-o", "x.rig", "--tau", "3"],
    ["rig", "missing.vseq", "-o", "x.rig", "--max-bones", "lots"],
    ["frobnicate"],
    [],
])
def test_bad_invocations_exit_2(argv, tmp_path, monkeypatch):
    monkeypatch.chdir(tmp_path)
    assert cli.main(argv) == 2
    assert list(tmp_path.iterdir()) == []


def test_missing_input_exits_1(tmp_path):
    assert cli.main(["rig", str(tmp_path / "nope.vseq"), "-o", str(tmp_path / "x.rig")]) == 1
    assert not (tmp_path / "x.rig").exists()


def test_missing_output_directory(workdir, tmp_path):
    assert cli.main(["export", str(workdir / "hinge.rig"), "-o", str(tmp_path / "no" / "f.ply")]) == 2


def test_config_precedence(tmp_path):
    cfg_path = tmp_path / "c.json"
    cfg_path.write_text(json.dumps({"tau": 0.4, "max_bones": 9, "unit": "cm"}))
    args = cli.build_parser().parse_args(["rig", "in.vseq", "-o", "o.rig", "--config", str(cfg_path),
                                          "--tau", "0.2"])
    cfg = cli._config(args, cli.RIG_FLAGS)
    assert (cfg.tau, cfg.max_bones, cfg.unit, cfg.ik_lambda) == (0.2, 9, "cm", PipelineConfig().ik_lambda)
    args = cli.build_parser().parse_args(["animate", "r", "q", "-o", "o", "--full-body", "--knn", "3"])
    cfg = cli._config(args, cli.ANIMATE_FLAGS)
    assert cfg.full_body and cfg.knn == 3 and cfg.parts == 5


# -- pipeline

def test_rigid_body_gives_single_bone_and_root_only_tree():
    body = synth.rigid_body(frames=12, vertices=600)
    rig = pipeline.rig_sequence(body.sequence)
    assert rig.bone_count == 1
    assert rig.tree.joint_count == 1
    assert rig.meta["ssdr_rmse"] < 1e-8


def test_stage_failure_carries_partial_outputs():
    body = synth.hinge_chain(frames=12, vertices=600)
    bad = CurveSkeleton(np.zeros((0, 3)), np.zeros((0, 2), int), np.zeros(600, int))
    with pytest.raises(StageFailed) as info:
        pipeline.rig_sequence(body.sequence, PipelineConfig(ssdr_iters=2), bad)
    assert info.value.stage == "skeleton"
    assert {"labels", "weights", "bone_rotations", "bone_translations"} <= set(info.value.partial)


def test_imported_skeleton_is_used_and_checked(hinge_body):
    rest = hinge_body.sequence.canonical
    x = np.linspace(-1, 1, 41)
    samples = np.stack([x, 0 * x, 0 * x], 1)
    edges = np.stack([np.arange(40), np.arange(1, 41)], 1)
    vs = np.abs(rest[:, :1] - x[None]).argmin(1)
    rig = pipeline.rig_sequence(hinge_body.sequence, PipelineConfig(ssdr_iters=5),
                                CurveSkeleton(samples, edges, vs))
    assert rig.tree.joint_count == 3
    assert np.all(np.abs(rig.skeleton.samples[:, 1:]) < 1e-12)
    with pytest.raises(UsageError):
        pipeline.rig_sequence(hinge_body.sequence, None, CurveSkeleton(samples, edges, vs[:-1]))


def test_animate_rig_checks_shape(hinge_rig):
    with pytest.raises(UsageError):
        pipeline.animate_rig(hinge_rig, np.zeros((4, 2, 4)))
    seq = pipeline.animate_rig(hinge_rig, hinge_rig.pose_rotations[:9], hinge_rig.root_translations[:9])
    assert seq.positions.shape == (9, len(hinge_rig.rest), 3)
