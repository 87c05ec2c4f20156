import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import stats

from hspace import faces as fc


def test_dx_negation_mirrors_image():
    p = fc.FaceParams(eye_openness=0.7, mouth_curve=0.4, dx=0.6, dy=-0.3)
    q = fc.FaceParams(eye_openness=0.7, mouth_curve=0.4, dx=-0.6, dy=-0.3)
    a, b = fc.render(p), fc.render(q)
    np.testing.assert_allclose(a[:, :, ::-1], b, atol=1e-6)


def test_closed_eyes_have_no_aperture():
    closed = fc.render(fc.FaceParams(eye_openness=0.0))
    open_ = fc.render(fc.FaceParams(eye_openness=1.0))
    # eye band in the centered face: rows above the center line
    band = (slice(None), slice(11, 15), slice(9, 23))
    assert closed[band].min() > fc.FACE - 0.05
    assert open_[band].min() < fc.FACE - 0.5
    assert fc.measure_attributes(closed)["eyes"] < 0.05


def test_brightness_shift_is_mean_pixel_difference():
    a = fc.render(fc.FaceParams(brightness=0.2))
    b = fc.render(fc.FaceParams(brightness=0.0))
    assert abs(float((a - b).mean()) - 0.2) <= 0.01


@pytest.mark.parametrize("kwargs", [
    dict(eye_openness=1.2), dict(mouth_curve=-1.5), dict(head_rotation=0.5),
    dict(face_scale=0.5), dict(brightness=0.3), dict(dx=2.0),
])
def test_out_of_range_rejected(kwargs):
    with pytest.raises(ValueError):
        fc.render(fc.FaceParams(**kwargs))


def test_pixels_in_range_and_deterministic(rng):
    P = fc.sample_params(20, rng)
    a = fc.render_batch(P)
    b = fc.render_batch(P)
    assert a.shape == (20, 1, 32, 32)
    assert a.min() >= -1 and a.max() <= 1
    assert np.array_equal(a, b)


def test_round_trip_within_tolerance():
    oracle = fc.AttributeOracle()
    P = fc.sample_params(200, np.random.default_rng(42))
    scores = oracle.score_batch(fc.render_batch(P))
    truth = oracle.truth(P)
    tol = np.array([oracle.tolerance[n] for n in oracle.names])
    within = np.abs(scores - truth) <= tol
    assert np.all(within.mean(axis=0) >= 0.95), dict(zip(oracle.names, within.mean(axis=0)))


def test_constant_image_gives_neutral_scores():
    m = fc.measure_attributes(np.full((1, 32, 32), 0.1))
    assert m["eyes"] == 0 and m["smile"] == 0 and m["rotation"] == 0 and m["scale"] == 0


def test_smile_monotone_in_mouth_curve():
    curves = np.linspace(-1, 1, 10)
    smiles = [fc.measure_attributes(fc.render(fc.FaceParams(mouth_curve=c)))["smile"] for c in curves]
    assert np.all(np.diff(smiles) > 0)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2 ** 20))
def test_estimators_total_on_arbitrary_images(seed):
    img = np.random.default_rng(seed).uniform(-1, 1, (1, 32, 32))
    img[0, seed % 32, :] = np.nan
    m = fc.measure_attributes(img)
    assert all(np.isfinite(v) for v in m.values())
    assert m == fc.measure_attributes(img)


def test_dataset_is_seed_deterministic():
    a, pa = fc.generate_dataset(16, 3)
    b, pb = fc.generate_dataset(16, 3)
    assert np.array_equal(a, b) and np.array_equal(pa, pb)
    assert len(pa) == 16


def test_marginals_uniform_and_independent():
    P = fc.sample_params(4096, np.random.default_rng(0))
    for i, name in enumerate(fc.PARAM_NAMES):
        lo, hi = fc.RANGES[name]
        assert stats.kstest((P[:, i] - lo) / (hi - lo), "uniform").statistic < 0.05
    corr = np.corrcoef(P.T)
    assert np.all(np.abs(corr[~np.eye(len(corr), dtype=bool)]) < 0.05)


def test_entangled_mode_hits_target_correlation():
    P = fc.sample_params(20000, np.random.default_rng(1), entangled=0.6)
    i, j = fc.PARAM_NAMES.index("eye_openness"), fc.PARAM_NAMES.index("brightness")
    assert abs(np.corrcoef(P[:, i], P[:, j])[0, 1] - 0.6) < 0.02
    lo, hi = fc.RANGES["brightness"]
    assert stats.kstest((P[:, j] - lo) / (hi - lo), "uniform").statistic < 0.05


def test_oracle_normalization_and_unknown_attribute():
    o = fc.AttributeOracle(["eyes", "brightness"])
    np.testing.assert_allclose(o.normalized([[0.0, -0.2], [1.0, 0.2]]), [[0, 0], [1, 1]])
    with pytest.raises(KeyError):
        fc.AttributeOracle(["hair"])
