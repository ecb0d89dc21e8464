import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from skelebones import ik, partmm, se3, synth
from skelebones.errors import InsufficientFrames
from skelebones.types import KinematicTree

from conftest import ground_truth_rig


def random_track(rng, f, j, b=3):
    rot = se3.canonical(rng.normal(size=(f, j, 4)))
    return rot, rng.normal(size=(f, 3)), se3.canonical(rng.normal(size=(f, b, 4))), rng.normal(size=(f, b, 3))


def chain_tree(j):
    return KinematicTree(np.stack([np.arange(j, dtype=float), np.zeros(j), np.zeros(j)], axis=1), np.arange(j) - 1)


@pytest.fixture(scope="module")
def humanoid():
    return synth.humanoid_stick(frames=60, vertices=1500, seed=0)


# -- part decomposition

def test_root_only_single_part():
    tree = KinematicTree([[0.0, 0, 0]], [-1])
    parts = partmm.decompose_parts(tree, np.ones((10, 2)) / 2, np.ones((10, 1)), 5)
    assert parts.part_count == 1
    np.testing.assert_array_equal(parts.joints(0), [0])
    np.testing.assert_array_equal(parts.bone_part, [0, 0])


def test_humanoid_torso_and_four_limbs(humanoid):
    tree = humanoid.tree
    binding = ik.bind_vertices(humanoid.sequence.canonical, tree)
    parts = partmm.decompose_parts(tree, humanoid.weights, binding, 5)
    assert parts.part_count == 5
    # oracle: generator joints 1 chest, 3/5 shoulders, 7/9 hips
    owned = sorted(map(tuple, parts.owned))
    assert owned == [(1, 2), (3, 4), (5, 6), (7, 8), (9, 10)]
    for k in range(5):
        limb = parts.owned[k]
        if limb[0] in (3, 5):
            assert parts.anchors[k] == 1  # arms share the shoulder joint with the torso
        else:
            assert parts.anchors[k] == 0  # torso and legs share the pelvis
    # bones follow their segments
    for b in range(humanoid.weights.shape[1]):
        seg_joints = set(parts.joints(parts.bone_part[b]))
        assert len(seg_joints) >= 2


def test_parts_cover_joints_and_partition_bones(humanoid):
    tree = humanoid.tree
    binding = ik.bind_vertices(humanoid.sequence.canonical, tree)
    for target in (1, 2, 3, 4, 5, 7):
        parts = partmm.decompose_parts(tree, humanoid.weights, binding, target)
        covered = set().union(*[set(parts.joints(k)) for k in range(parts.part_count)])
        assert covered == set(range(tree.joint_count))
        assert sorted(np.concatenate([parts.bones(k) for k in range(parts.part_count)])) == \
            list(range(humanoid.weights.shape[1]))
        for k in range(parts.part_count):
            # every part shares its anchor joint with the part owning it (or the fixed root)
            a = parts.anchors[k]
            assert a == tree.root or any(a in parts.owned[m] for m in range(parts.part_count) if m != k)


def test_target_clamped_with_warning(caplog, hinge_body):
    tree = hinge_body.tree
    binding = ik.bind_vertices(hinge_body.sequence.canonical, tree)
    parts = partmm.decompose_parts(tree, hinge_body.weights, binding, 50)
    assert parts.part_count <= tree.joint_count
    assert "clamped" in caplog.text


def test_single_part_equals_target_one(humanoid):
    tree = humanoid.tree
    binding = ik.bind_vertices(humanoid.sequence.canonical, tree)
    a = partmm.decompose_parts(tree, humanoid.weights, binding, 1)
    b = partmm.single_part(tree, humanoid.weights.shape[1])
    assert a.owned == b.owned
    np.testing.assert_array_equal(a.anchors, b.anchors)
    np.testing.assert_array_equal(a.bone_part, b.bone_part)


# -- database

@pytest.mark.parametrize("f, p, expected", [(10, 7, 4), (7, 7, 1), (200, 7, 194)])
def test_finest_patch_count(f, p, expected):
    rng = np.random.default_rng(0)
    db = partmm.build_database(chain_tree(3), *random_track(rng, f, 3), p=p)
    assert db.finest.patch_count == expected == f - p + 1
    assert db.finest.stride == 1


def test_level_strides_and_lengths():
    assert partmm.level_strides(5) == [32, 16, 8, 4, 2, 1]
    rng = np.random.default_rng(1)
    db = partmm.build_database(chain_tree(2), *random_track(rng, 64, 2), p=7)
    assert db.levels[0].length == 2 and db.levels[0].patch_size == 2 and db.levels[0].patch_count == 1
    for level in db.levels:
        assert level.length == int(np.ceil(64 / level.stride)) and level.patch_count >= 1


def test_insufficient_frames():
    with pytest.raises(InsufficientFrames):
        partmm.build_database(chain_tree(2), *random_track(np.random.default_rng(0), 6, 2), p=7)


def test_patch_contents():
    rng = np.random.default_rng(2)
    track = random_track(rng, 12, 2)
    db = partmm.build_database(chain_tree(2), *track, p=5)
    patch = db.finest.patch(3)
    np.testing.assert_array_equal(patch.joint_rotations, track[0][3:8])
    np.testing.assert_array_equal(patch.bone_translations, track[3][3:8])
    with pytest.raises(IndexError):
        db.finest.patch(8)


# -- retrieval

def brute_force_ranking(level, joints, query):
    size = len(query)
    d = []
    for s in range(level.length - size + 1):
        total = 0.0
        for i in range(size):
            for a, jnt in enumerate(joints):
                total += se3.geodesic_distance(query[i, a], level.joint_rotations[s + i, jnt]) ** 2
        d.append(total)
    return np.argsort(np.array(d), kind="stable"), np.array(d)


@settings(max_examples=15, deadline=None)
@given(st.integers(0, 10_000), st.integers(7, 60), st.integers(1, 7))
def test_match_part_equals_brute_force(seed, f, k):
    rng = np.random.default_rng(seed)
    db = partmm.build_database(chain_tree(3), *random_track(rng, f, 3), p=7)
    joints = np.array([1, 2])
    query = se3.canonical(rng.normal(size=(7, 2, 4)))
    idx, dist = partmm.match_part(db.finest, joints, query, k)
    order, d = brute_force_ranking(db.finest, joints, query)
    kk = min(k, len(order))
    np.testing.assert_array_equal(idx, order[:kk])
    np.testing.assert_allclose(dist, d[order[:kk]], rtol=1e-9, atol=1e-12)


def test_self_retrieval_and_identity_patch():
    rng = np.random.default_rng(3)
    rot, trans, br, bt = random_track(rng, 30, 3)
    rot[10:17] = se3.IDENTITY_QUAT
    db = partmm.build_database(chain_tree(3), rot, trans, br, bt, p=7)
    idx, dist = partmm.match_part(db.finest, [0, 1, 2], rot[20:27], 3)
    assert idx[0] == 20 and dist[0] < 1e-20
    idx, _ = partmm.match_part(db.finest, [0, 1, 2], se3.identity_quats(7, 3), 1)
    assert idx[0] == 10


def test_ties_break_by_lower_index(caplog):
    rot = se3.identity_quats(12, 2)
    db = partmm.build_database(chain_tree(2), rot, np.zeros((12, 3)), se3.identity_quats(12, 1),
                               np.zeros((12, 1, 3)), p=7)
    idx, _ = partmm.match_part(db.finest, [0, 1], se3.identity_quats(7, 2), 10)
    np.testing.assert_array_equal(idx, np.arange(6))
    assert "exceeds" in caplog.text


def test_global_pre_rotation_keeps_matches(humanoid):
    body = humanoid
    db = partmm.build_database(body.tree, body.pose_rotations, body.root_translations,
                               body.bone_rotations, body.bone_translations, p=7)
    g = se3.quat_from_axis_angle([1, 1, 0], 0.9)
    rot2 = body.pose_rotations.copy()
    rot2[:, body.tree.root] = se3.quat_mul(g, rot2[:, body.tree.root])
    db2 = partmm.build_database(body.tree, rot2, body.root_translations,
                                body.bone_rotations, body.bone_translations, p=7)
    rng = np.random.default_rng(4)
    query = se3.canonical(body.pose_rotations[5:12] + 0.05 * rng.normal(size=(7, body.tree.joint_count, 4)))
    query2 = query.copy()
    query2[:, body.tree.root] = se3.quat_mul(g, query2[:, body.tree.root])
    joints = np.arange(body.tree.joint_count)
    a, _ = partmm.match_part(db.finest, joints, query, 7)
    b, _ = partmm.match_part(db2.finest, joints, query2, 7)
    np.testing.assert_array_equal(a, b)


# -- alignment

def test_alignment_identity_when_equal():
    pts = np.array([[0.0, 0, 0], [1, 0, 0], [1, 1, 0], [1, 1, 1]])
    r, degenerate = partmm.alignment_rotation(pts, pts, pts[0], pts[0])
    assert not degenerate
    np.testing.assert_allclose(r, np.eye(3), atol=1e-12)
    q = se3.canonical(np.random.default_rng(0).normal(size=(4, 4)))
    t = np.random.default_rng(1).normal(size=(4, 3))
    br, bt = partmm.align_patch(r, pts[0], pts[0], q, t)
    assert np.max(se3.geodesic_distance(br, q)) < 1e-7
    np.testing.assert_allclose(bt, t, atol=1e-12)


def test_alignment_recovers_global_rotation():
    pts = np.array([[0.0, 0, 0], [1, 0, 0], [1, 1, 0], [1.5, 1, 0.3]])
    rz = se3.quat_to_matrix(se3.quat_from_axis_angle([0, 0, 1], np.deg2rad(45)))
    pivot = pts[0]
    query = (pts - pivot) @ rz.T + pivot + [2, 0, 0]
    r, degenerate = partmm.alignment_rotation(query, pts, query[0], pts[0])
    assert not degenerate
    assert np.max(np.abs(r - rz)) < 1e-6


def test_alignment_degenerate_parts():
    line = np.array([[0.0, 0, 0], [1, 0, 0], [2, 0, 0]])
    r, degenerate = partmm.alignment_rotation(line, line[::-1], line[0], line[0])
    assert degenerate and np.array_equal(r, np.eye(3))
    one = np.zeros((1, 3))
    r, degenerate = partmm.alignment_rotation(one, one, one[0], one[0])
    assert degenerate and np.array_equal(r, np.eye(3))


def test_align_patch_maps_pivot():
    r = se3.quat_to_matrix(se3.quat_from_axis_angle([0, 1, 0], 0.4))
    qp, mp = np.array([1.0, 2, 3]), np.array([-1.0, 0, 0.5])
    # a bone whose transform is the identity keeps the matched pivot where it is,
    # so the aligned transform must send the matched pivot onto the query pivot
    br, bt = partmm.align_patch(r, qp, mp, se3.identity_quats(1, 1), np.zeros((1, 1, 3)))
    moved = se3.quat_rotate(br[0, 0], mp) + bt[0, 0]
    np.testing.assert_allclose(moved, qp, atol=1e-12)


# -- blending

@pytest.mark.parametrize("kind", ["hinge_chain", "humanoid_stick", "y_branch"])
def test_self_reconstruction(kind):
    body = synth.generate_synthetic(kind, {"frames": 50, "vertices": 600}, seed=1)
    rig = ground_truth_rig(body)
    pos, rot, trans = partmm.animate(rig, body.pose_rotations, body.root_translations, k=1, lambda_alpha=1.0)
    assert np.max(se3.geodesic_distance(rot, body.bone_rotations)) < 1e-6
    assert np.max(np.linalg.norm(trans - body.bone_translations, axis=-1)) < 1e-6 * rig.bbox_diag


def test_lambda_zero_keeps_coarsest_level():
    body = synth.hinge_chain(frames=64, vertices=400, seed=0)
    rig = ground_truth_rig(body)
    db = partmm.rig_database(rig, 7, 5)
    parts = partmm.rig_parts(rig, 5)
    rot, trans = partmm.blend_pyramid(db, parts, body.pose_rotations, body.root_translations, k=3,
                                      lambda_alpha=0.0)
    # oracle: the coarsest level alone, upsampled to every frame
    coarse = partmm.MotionDatabase(db.tree, [db.levels[0]], db.patch_size)
    c_rot, c_trans = partmm.blend_pyramid(coarse, parts, body.pose_rotations, body.root_translations, k=3)
    assert np.max(se3.geodesic_distance(rot, c_rot)) < 1e-7
    np.testing.assert_allclose(trans, c_trans, atol=1e-12)


def test_static_query_static_database():
    tree = chain_tree(3)
    f, b = 30, 2
    br = np.tile(se3.quat_from_axis_angle([0, 0, 1], 0.3), (f, b, 1))
    bt = np.tile([0.1, 0.2, 0.3], (f, b, 1))
    db = partmm.build_database(tree, se3.identity_quats(f, 3), np.zeros((f, 3)), br, bt, p=7)
    parts = partmm.single_part(tree, b)
    rot, trans = partmm.blend_pyramid(db, parts, se3.identity_quats(20, 3))
    assert np.max(se3.geodesic_distance(rot, br[0, 0])) < 1e-7
    np.testing.assert_allclose(trans, bt[:20], atol=1e-12)


def test_identity_query_repeats_canonical(hinge_rig):
    from dataclasses import replace
    # a database that holds a rest-pose stretch, as any capture starting from the canonical frame may
    rig = hinge_rig
    j, b = rig.tree.joint_count, rig.bone_count
    rest_block = 8
    rig = replace(rig,
                  pose_rotations=np.concatenate([se3.identity_quats(rest_block, j), rig.pose_rotations]),
                  root_translations=np.concatenate([np.zeros((rest_block, 3)), rig.root_translations]),
                  bone_rotations=np.concatenate([se3.identity_quats(rest_block, b), rig.bone_rotations]),
                  bone_translations=np.concatenate([np.zeros((rest_block, b, 3)), rig.bone_translations]))
    pos, _, _ = partmm.animate(rig, se3.identity_quats(10, j), k=1, lambda_alpha=1.0)
    np.testing.assert_allclose(pos, np.broadcast_to(rig.rest, pos.shape), atol=1e-6 * rig.bbox_diag)


def test_short_query_is_handled(hinge_rig):
    pos, _, _ = partmm.animate(hinge_rig, hinge_rig.pose_rotations[:3], hinge_rig.root_translations[:3])
    assert pos.shape == (3, len(hinge_rig.rest), 3) and np.all(np.isfinite(pos))


def test_full_body_matches_single_part(hinge_rig):
    db = partmm.rig_database(hinge_rig)
    a = partmm.full_body_match(db, hinge_rig.pose_rotations[:20], hinge_rig.root_translations[:20], k=3)
    b = partmm.blend_pyramid(db, partmm.single_part(hinge_rig.tree, hinge_rig.bone_count),
                             hinge_rig.pose_rotations[:20], hinge_rig.root_translations[:20], k=3)
    np.testing.assert_array_equal(a[0], b[0])
    np.testing.assert_array_equal(a[1], b[1])


def test_animate_deterministic(hinge_rig):
    q = hinge_rig.pose_rotations[::-1].copy()
    a = partmm.animate(hinge_rig, q)[0]
    b = partmm.animate(hinge_rig, q)[0]
    assert a.tobytes() == b.tobytes()


def test_interpolated_pose_beats_nearest_single_frame():
    train = synth.soft_chain(frames=200, vertices=600, seed=0)
    test = synth.soft_chain(frames=40, vertices=600, seed=0, phase=np.pi / 3, cycles=0.4)
    rig = ground_truth_rig(train)
    pos, _, _ = partmm.animate(rig, test.pose_rotations, test.root_translations)
    gt = test.sequence.positions
    # baseline: for each query frame, the training frame with the nearest pose
    d = partmm.frame_distances(test.pose_rotations, train.pose_rotations)
    nearest = train.sequence.positions[np.argmin(d, axis=1)]
    rmse = lambda x: np.sqrt(np.mean(np.sum((x - gt) ** 2, axis=-1)))  # noqa: E731
    assert rmse(pos) < rmse(nearest)
