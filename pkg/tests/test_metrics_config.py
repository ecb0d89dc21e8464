import json

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from skelebones import metrics
from skelebones.config import PipelineConfig, load_config
from skelebones.errors import UsageError


# -- metrics

def test_identical_sequences_zero():
    x = np.random.default_rng(0).normal(size=(4, 10, 3))
    rep = metrics.evaluate(x, x)
    assert rep["rmse"] == 0 and rep["chamfer"] == 0 and rep["per_frame_rmse"] == [0.0] * 4


def test_constant_offset():
    x = np.random.default_rng(1).normal(size=(3, 20, 3))
    t = np.array([0.3, -1.2, 0.4])
    assert metrics.rmse(x + t, x) == pytest.approx(np.linalg.norm(t), abs=1e-12)
    np.testing.assert_allclose(metrics.per_frame_rmse(x + t, x), np.linalg.norm(t), atol=1e-12)


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 10_000), st.integers(1, 5), st.integers(1, 12))
def test_random_pair_brute_force(seed, f, n):
    rng = np.random.default_rng(seed)
    a, b = rng.normal(size=(f, n, 3)), rng.normal(size=(f, n, 3))
    total, per = 0.0, []
    for fi in range(f):
        s = 0.0
        for i in range(n):
            s += sum((a[fi, i, c] - b[fi, i, c]) ** 2 for c in range(3))
        per.append(np.sqrt(s / n))
        total += s
    rep = metrics.evaluate(a, b)
    assert rep["rmse"] == pytest.approx(np.sqrt(total / (f * n)), abs=1e-12)
    np.testing.assert_allclose(rep["per_frame_rmse"], per, atol=1e-12)


def test_shape_mismatch_is_usage_error():
    with pytest.raises(UsageError):
        metrics.evaluate(np.zeros((2, 5, 3)), np.zeros((2, 6, 3)))
    with pytest.raises(UsageError):
        metrics.rmse(np.zeros((2, 5)), np.zeros((2, 5)))


def test_report_states_unit():
    x = np.zeros((1, 3, 3))
    text = metrics.format_report(metrics.evaluate(x, x, unit="mm"))
    assert "(mm)" in text
    assert "unit unspecified" in metrics.format_report(metrics.evaluate(x, x))
    json.dumps(metrics.evaluate(x, x))


# -- configuration

def test_defaults():
    cfg = PipelineConfig()
    assert (cfg.max_bones, cfg.tau, cfg.patch_size, cfg.knn, cfg.levels, cfg.blend, cfg.parts,
            cfg.weights_per_vertex) == (50, 0.3, 7, 7, 5, 0.7, 5, 4)
    cfg.validate()


@pytest.mark.parametrize("field, value", [("max_bones", 0), ("tau", 0.0), ("tau", 1.5), ("blend", -0.1),
                                          ("patch_size", 0), ("knn", 0), ("ik_lambda", -1.0)])
def test_out_of_range_rejected(field, value):
    with pytest.raises(UsageError):
        PipelineConfig(**{field: value}).validate()


def test_roundtrip_and_digest(tmp_path):
    cfg = PipelineConfig(max_bones=12, tau=0.25, full_body=True, unit="cm")
    path = tmp_path / "c.json"
    path.write_text(json.dumps(cfg.to_dict()))
    back = load_config(path)
    assert back == cfg and back.digest() == cfg.digest()
    assert PipelineConfig(max_bones=13).digest() != PipelineConfig(max_bones=12).digest()


def test_from_dict_rejects_unknown_and_bad_types(tmp_path):
    with pytest.raises(UsageError):
        PipelineConfig.from_dict({"bogus": 1})
    with pytest.raises(UsageError):
        PipelineConfig.from_dict({"max_bones": "many"})
    with pytest.raises(UsageError):
        PipelineConfig.from_dict({"full_body": "yes"})
    (tmp_path / "bad.json").write_text("[1, 2]")
    with pytest.raises(UsageError):
        load_config(tmp_path / "bad.json")
    with pytest.raises(UsageError):
        load_config(tmp_path / "missing.json")
