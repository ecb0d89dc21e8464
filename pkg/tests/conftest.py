import numpy as np
import pytest
from scipy.spatial import cKDTree

from skelebones import synth
from skelebones.seqio import RigArchive
from skelebones.types import CurveSkeleton


def ground_truth_rig(body):
    """Rig archive assembled from a generator's ground truth, skeleton = tree joints."""
    rest = body.sequence.canonical
    tree = body.tree
    _, nearest = cKDTree(tree.joints).query(rest)
    skel = CurveSkeleton(tree.joints.copy(), tree.edges.copy(), np.asarray(nearest))
    return RigArchive(rest, body.weights.astype(float), body.bone_rotations, body.bone_translations, skel,
                      tree, body.pose_rotations, body.root_translations, 0, {"unit": "unspecified"})


@pytest.fixture(scope="session")
def hinge_body():
    return synth.hinge_chain(frames=40, vertices=800, seed=3)


@pytest.fixture(scope="session")
def hinge_rig(hinge_body):
    return ground_truth_rig(hinge_body)


def pytest_terminal_summary(terminalreporter):
    import sys

    module = sys.modules.get("test_acceptance")
    lines = getattr(module, "RESULTS", None)
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(lines):
            terminalreporter.write_line(line)
