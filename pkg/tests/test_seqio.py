import json
import zipfile

import numpy as np
import pytest

from skelebones import se3, seqio, ssdr, clustering, synth
from skelebones.errors import CorruptArchive, InconsistentTopology, SequenceIOError, ShapeError
from skelebones.seqio import RigArchive, VertexSequence
from skelebones.types import CurveSkeleton, KinematicTree

from conftest import ground_truth_rig


def cube_frames(f, n=8, seed=0):
    rng = np.random.default_rng(seed)
    return rng.normal(size=(f, n, 3))


def minimal_rig():
    rest = np.array([[0.0, 0, 0], [1, 0, 0], [0, 1, 0], [0, 0, 1]])
    skel = CurveSkeleton(np.zeros((1, 3)), np.zeros((0, 2), dtype=int), np.zeros(4, dtype=int))
    tree = KinematicTree(np.zeros((1, 3)), [-1], [0])
    q = np.stack([se3.identity_quats(1), se3.quat_from_axis_angle([0, 0, 1], 0.3)[None]])
    t = np.array([[[0.0, 0, 0]], [[0.1, 0.2, 0.3]]])
    return RigArchive(rest, np.ones((4, 1)), q, t, skel, tree, q.copy(), t[:, 0].copy(), 0, {"unit": "m"})


def assert_rigs_equal(a, b):
    for name in ("rest", "weights", "bone_rotations", "bone_translations", "pose_rotations", "root_translations"):
        np.testing.assert_array_equal(getattr(a, name), getattr(b, name))
    np.testing.assert_array_equal(a.skeleton.samples, b.skeleton.samples)
    np.testing.assert_array_equal(a.skeleton.edges, b.skeleton.edges)
    np.testing.assert_array_equal(a.skeleton.vertex_sample, b.skeleton.vertex_sample)
    np.testing.assert_array_equal(a.tree.joints, b.tree.joints)
    np.testing.assert_array_equal(a.tree.parents, b.tree.parents)
    np.testing.assert_array_equal(a.tree.joint_samples, b.tree.joint_samples)
    assert a.canonical_frame == b.canonical_frame


# -- sequences

def test_obj_directory_three_frames(tmp_path):
    pos = cube_frames(3)
    for f in range(3):
        seqio.write_obj(tmp_path / f"f{f}.obj", pos[f], [[0, 1, 2]])
    seq = seqio.load_sequence(tmp_path)
    assert (seq.frame_count, seq.vertex_count) == (3, 8)
    np.testing.assert_array_equal(seq.positions, pos)
    np.testing.assert_array_equal(seq.faces, [[0, 1, 2]])
    assert seq.canonical_frame == 0


def test_obj_directory_lexicographic_order(tmp_path):
    pos = cube_frames(3)
    for name, f in (("b.obj", 1), ("a.obj", 0), ("c.obj", 2)):
        seqio.write_obj(tmp_path / name, pos[f])
    np.testing.assert_array_equal(seqio.load_sequence(tmp_path).positions, pos)


def test_obj_directory_inconsistent_vertex_count(tmp_path):
    pos = cube_frames(3)
    seqio.write_obj(tmp_path / "f0.obj", pos[0])
    seqio.write_obj(tmp_path / "f1.obj", pos[1][:7])
    seqio.write_obj(tmp_path / "f2.obj", pos[2])
    with pytest.raises(InconsistentTopology):
        seqio.load_sequence(tmp_path)


def test_obj_unreadable_frame_reports_index(tmp_path):
    pos = cube_frames(2)
    seqio.write_obj(tmp_path / "f0.obj", pos[0])
    (tmp_path / "f1.obj").write_text("v 1 2\n")
    with pytest.raises(SequenceIOError) as err:
        seqio.load_sequence(tmp_path)
    assert err.value.frame == 1


def test_vseq_roundtrip_bitwise(tmp_path):
    pos = cube_frames(5, 11, seed=4)
    seq = VertexSequence(pos, np.array([[0, 1, 2], [2, 3, 4]]))
    seqio.save_sequence(seq, tmp_path / "s.vseq")
    back = seqio.load_sequence(tmp_path / "s.vseq")
    assert back.positions.tobytes() == pos.tobytes()
    np.testing.assert_array_equal(back.faces, seq.faces)
    np.testing.assert_array_equal(seqio.read_vseq_frame(tmp_path / "s.vseq", 3), pos[3])


def test_vseq_corruptions(tmp_path):
    seqio.save_sequence(VertexSequence(cube_frames(3)), tmp_path / "s.vseq")
    raw = (tmp_path / "s.vseq").read_bytes()
    (tmp_path / "bad.vseq").write_bytes(b"XXXX" + raw[4:])
    with pytest.raises(SequenceIOError):
        seqio.load_sequence(tmp_path / "bad.vseq")
    (tmp_path / "short.vseq").write_bytes(raw[:-10])
    with pytest.raises(SequenceIOError) as err:
        seqio.load_sequence(tmp_path / "short.vseq")
    assert err.value.frame == 2
    with pytest.raises(SequenceIOError):
        seqio.load_sequence(tmp_path / "missing.vseq")


def test_sequence_validation():
    with pytest.raises(ShapeError):
        VertexSequence(np.zeros((2, 3)))
    with pytest.raises(ValueError):
        VertexSequence(np.full((2, 4, 3), np.nan))
    with pytest.raises(ValueError):
        VertexSequence(np.zeros((2, 4, 3)))


# -- rig archives

def test_minimal_rig_roundtrip(tmp_path):
    rig = minimal_rig()
    seqio.save_rig(rig, tmp_path / "r.zip")
    back = seqio.load_rig(tmp_path / "r.zip")
    assert_rigs_equal(rig, back)
    assert back.meta["unit"] == "m"
    names = zipfile.ZipFile(tmp_path / "r.zip").namelist()
    assert {n.split("/")[0] for n in names} == set(seqio.ARCHIVE_SECTIONS)


def test_rig_save_is_byte_deterministic(tmp_path):
    seqio.save_rig(minimal_rig(), tmp_path / "a.zip")
    seqio.save_rig(minimal_rig(), tmp_path / "b.zip")
    assert (tmp_path / "a.zip").read_bytes() == (tmp_path / "b.zip").read_bytes()


def _rewrite(path, name, array):
    entries = {}
    with zipfile.ZipFile(path) as zf:
        for n in zf.namelist():
            entries[n] = zf.read(n)
    entries[name] = seqio._npy_bytes(array)
    seqio._write_zip(path, list(entries.items()))


def test_row_sum_violation_on_load(tmp_path):
    seqio.save_rig(minimal_rig(), tmp_path / "r.zip")
    _rewrite(tmp_path / "r.zip", "WEIGHTS/weights.npy", np.full((4, 1), 0.9))
    with pytest.raises(CorruptArchive) as err:
        seqio.load_rig(tmp_path / "r.zip")
    assert err.value.check == "weights_row_sum"


@pytest.mark.parametrize("name, array, check", [
    ("WEIGHTS/weights.npy", np.array([[1.5], [-0.5], [1.0], [1.0]]), "weights_nonnegative"),
    ("BONES/rotations.npy", np.ones((2, 1, 4)), "bone_quaternion_norm"),
    ("POSES/root_translations.npy", np.zeros((3, 3)), "root_translations_shape"),
    ("TREE/parents.npy", np.array([0]), "tree_structure"),
    ("SKELETON/vertex_sample.npy", np.array([0, 0, 0, 5]), "skeleton_correspondence"),
])
def test_load_names_failed_check(tmp_path, name, array, check):
    seqio.save_rig(minimal_rig(), tmp_path / "r.zip")
    _rewrite(tmp_path / "r.zip", name, array)
    with pytest.raises(CorruptArchive) as err:
        seqio.load_rig(tmp_path / "r.zip")
    assert err.value.check == check


def test_missing_section(tmp_path):
    seqio.save_rig(minimal_rig(), tmp_path / "r.zip")
    with zipfile.ZipFile(tmp_path / "r.zip") as zf:
        entries = [(n, zf.read(n)) for n in zf.namelist() if not n.startswith("TREE/")]
    seqio._write_zip(tmp_path / "r.zip", entries)
    with pytest.raises(CorruptArchive) as err:
        seqio.load_rig(tmp_path / "r.zip")
    assert err.value.check == "missing_section"


def test_not_a_zip(tmp_path):
    (tmp_path / "r.zip").write_bytes(b"nope")
    with pytest.raises(CorruptArchive):
        seqio.load_rig(tmp_path / "r.zip")


def test_fifty_bone_rig_roundtrip(tmp_path):
    body = synth.soft_chain(frames=12, vertices=1500, seed=1)
    seq = body.sequence
    # 50 slabs along the chain axis as the initial clustering
    x = seq.canonical[:, 0]
    labels = np.minimum(((x - x.min()) / np.ptp(x) * 50).astype(int), 49)
    q, t = clustering.fit_cluster_transforms(seq, labels)
    init = clustering.ClusterAssignment(labels, q, t, np.zeros(50), [])
    fit = ssdr.ssdr_solve(seq, init, iters=0)
    assert fit.bone_count == 50
    rig = ground_truth_rig(body)
    rig = RigArchive(rig.rest, fit.weights, fit.rotations, fit.translations, rig.skeleton, rig.tree,
                     rig.pose_rotations, rig.root_translations, 0, {})
    seqio.save_rig(rig, tmp_path / "r.zip")
    assert_rigs_equal(rig, seqio.load_rig(tmp_path / "r.zip"))


def test_skeleton_file_roundtrip_and_checks(tmp_path, hinge_rig):
    sk = hinge_rig.skeleton
    seqio.save_skeleton(tmp_path / "s.zip", sk)
    back = seqio.load_skeleton(tmp_path / "s.zip", len(hinge_rig.rest))
    np.testing.assert_array_equal(back.samples, sk.samples)
    np.testing.assert_array_equal(back.edges, sk.edges)
    np.testing.assert_array_equal(back.vertex_sample, sk.vertex_sample)
    with pytest.raises(CorruptArchive) as err:
        seqio.load_skeleton(tmp_path / "s.zip", len(hinge_rig.rest) + 1)
    assert err.value.check == "skeleton_vertex_count"
    # a rig archive carries the same section
    seqio.save_rig(hinge_rig, tmp_path / "r.zip")
    np.testing.assert_array_equal(seqio.load_skeleton(tmp_path / "r.zip").samples, sk.samples)


def test_poses_roundtrip(tmp_path, hinge_body):
    seqio.save_poses(tmp_path / "p.zip", hinge_body.pose_rotations, hinge_body.root_translations, {"a": 1})
    rot, trans = seqio.load_poses(tmp_path / "p.zip")
    np.testing.assert_array_equal(rot, hinge_body.pose_rotations)
    np.testing.assert_array_equal(trans, hinge_body.root_translations)
    meta = json.loads(zipfile.ZipFile(tmp_path / "p.zip").read("META/meta.json"))
    assert meta["joint_count"] == hinge_body.tree.joint_count
    with pytest.raises(ShapeError):
        seqio.save_poses(tmp_path / "q.zip", np.zeros((3, 2, 4)), np.zeros((2, 3)))


# -- viewable export

def test_export_two_bone_colors_and_joint_markers(tmp_path, hinge_rig):
    seqio.export_viewable(hinge_rig, 5, tmp_path / "v.ply")
    ply = seqio.read_ply(tmp_path / "v.ply")
    surface = ply["kind"] == seqio.KIND_SURFACE
    assert len({tuple(c) for c in ply["colors"][surface]}) == 2
    joints = ply["points"][ply["kind"] == seqio.KIND_JOINT]
    assert len(joints) == hinge_rig.tree.joint_count
    n_sk = len(hinge_rig.skeleton.edges)
    assert len(ply["edges"]) == n_sk + hinge_rig.tree.joint_count - 1


def test_export_joint_marker_at_hinge(tmp_path, hinge_body, hinge_rig):
    from skelebones.ik import forward_kinematics
    f = 7
    seqio.export_viewable(hinge_rig, f, tmp_path / "v.ply")
    ply = seqio.read_ply(tmp_path / "v.ply")
    joints = ply["points"][ply["kind"] == seqio.KIND_JOINT]
    # oracle: the hinge pivot moved by its proximal segment's rigid transform
    pivot = hinge_body.hinges[0]
    moved = se3.quat_rotate(hinge_body.bone_rotations[f, 0], pivot) + hinge_body.bone_translations[f, 0]
    assert np.min(np.linalg.norm(joints - moved, axis=1)) < 1e-9


def test_export_frame_out_of_range(tmp_path, hinge_rig):
    with pytest.raises(IndexError):
        seqio.export_viewable(hinge_rig, hinge_rig.frame_count, tmp_path / "v.ply")


def test_bone_palette_distinct():
    p = seqio.bone_palette(60)
    assert p.dtype == np.uint8 and len({tuple(c) for c in p}) == 60
