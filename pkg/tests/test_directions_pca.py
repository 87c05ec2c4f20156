import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from hspace import denoiser as dn
from hspace import diffusion as df
from hspace import directions as dr
from hspace import experiments as ex
from hspace import faces as fc

from oracles import batch_pca, principal_angles, spearman


def spectrum_data(rng, n=400, dim=12, scales=(10, 7, 5, 3, 2, 1, .5, .4, .3, .2, .1, .05)):
    basis, _ = np.linalg.qr(rng.standard_normal((dim, dim)))
    return rng.standard_normal((n, dim)) * np.asarray(scales) @ basis.T + rng.standard_normal(dim)


def test_single_batch_equals_exact_pca(rng):
    X = spectrum_data(rng)
    st_ = dr.ipca_update(dr.IncrementalPCA(4, X.shape[1]), X)
    axes, s = batch_pca(X, 4)
    assert np.max(principal_angles(st_.components, axes)) < 1e-4
    np.testing.assert_allclose(st_.singular_values, s, rtol=1e-10)
    for i in range(4):
        assert abs(abs(st_.components[:, i] @ axes[:, i]) - 1) < 1e-8


def test_rank3_subspace_recovered_from_four_batches(rng):
    basis, _ = np.linalg.qr(rng.standard_normal((40, 3)))
    X = rng.standard_normal((200, 3)) * [5, 3, 2] @ basis.T + 0.7
    st_ = dr.IncrementalPCA(3, 40)
    for part in np.array_split(X, 4):
        st_ = st_.update(part)
    assert np.max(principal_angles(st_.components, basis)) < 1e-3


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2 ** 16), st.lists(st.integers(1, 30), min_size=1, max_size=6))
def test_running_mean_exact_for_any_batching(seed, sizes):
    rng = np.random.default_rng(seed)
    X = rng.standard_normal((sum(sizes), 5)) * 3 + 2
    st_ = dr.IncrementalPCA(3, 5)
    start = 0
    for m in sizes:
        st_ = st_.update(X[start:start + m])
        start += m
    assert st_.n == len(X)
    np.testing.assert_allclose(st_.mean, X.mean(axis=0), atol=1e-6)
    G = st_.components.T @ st_.components
    np.testing.assert_allclose(G, np.eye(G.shape[0]), atol=1e-5)
    assert np.all(np.diff(st_.singular_values) <= 0) and np.all(st_.singular_values >= 0)


def test_batching_matches_full_data_on_separated_spectrum(rng):
    X = spectrum_data(rng, n=600)
    full = dr.IncrementalPCA(12, 12).update(X)
    st_ = dr.IncrementalPCA(12, 12)
    for part in np.array_split(X, 6):
        st_ = st_.update(part)
    # keeping every component makes the sequential update exact
    np.testing.assert_allclose(st_.singular_values, full.singular_values, rtol=1e-9)
    assert np.max(principal_angles(st_.components[:, :3], full.components[:, :3])) < 1e-6


def test_batching_is_deterministic(rng):
    X = spectrum_data(rng)
    runs = []
    for _ in range(2):
        st_ = dr.IncrementalPCA(4, 12)
        for part in np.array_split(X, 5):
            st_ = st_.update(part)
        runs.append(st_)
    assert np.array_equal(runs[0].components, runs[1].components)


def test_sign_convention(rng):
    st_ = dr.IncrementalPCA(4, 12).update(spectrum_data(rng))
    C = st_.components
    idx = np.argmax(np.abs(C), axis=0)
    assert np.all(C[idx, np.arange(C.shape[1])] > 0)


def test_dimension_mismatch_rejected():
    with pytest.raises(ValueError):
        dr.IncrementalPCA(2, 5).update(np.zeros((3, 4)))


def _states(rng, steps=3, dim=256, k=4):
    out = []
    for _ in range(steps):
        out.append(dr.IncrementalPCA(k, dim).update(spectrum_data(rng, 100, 12) @ rng.standard_normal((12, dim))))
    return out


def test_assembled_direction_unit_norms_and_orthogonal(rng):
    states = _states(rng)
    d1 = dr.assemble_pca_direction(states, 1, [30, 20, 10], dn.TINY.h_shape)
    d2 = dr.assemble_pca_direction(states, 2, [30, 20, 10], dn.TINY.h_shape)
    assert d1.offsets.shape == (3,) + dn.TINY.h_shape and not d1.broadcast
    np.testing.assert_allclose(d1.norms, 1.0, atol=1e-6)
    for t in range(3):
        assert abs(np.sum(d1.offsets[t].astype(np.float64) * d2.offsets[t])) < 1e-4
    assert d1.meta["j"] == 1 and d1.method == "pca"


@pytest.mark.parametrize("j", [0, 5])
def test_component_index_out_of_range(rng, j):
    with pytest.raises(IndexError):
        dr.assemble_pca_direction(_states(rng), j, [3, 2, 1], dn.TINY.h_shape)


def test_random_direction_matches_norms(rng):
    states = _states(rng)
    ref = dr.assemble_pca_direction(states, 1, [3, 2, 1], dn.TINY.h_shape)
    ref = ref.with_flat(ref.flat() * np.repeat([1.0, 2.5, 0.3], 256))
    r = dr.random_direction_norm_matched(ref, seed=4)
    np.testing.assert_allclose(r.step_norms(), ref.norms, rtol=1e-6)
    assert r.method == "random" and r.offsets.shape == ref.offsets.shape


def test_random_directions_nearly_orthogonal_in_desk_dimension():
    ref = dr.Direction(np.ones(dn.DESK.h_shape), "pca", broadcast=True)
    a = dr.random_direction_norm_matched(ref, seed=1).flat()
    b = dr.random_direction_norm_matched(ref, seed=2).flat()
    assert abs(a @ b) / (np.linalg.norm(a) * np.linalg.norm(b)) < 0.2


@pytest.mark.parametrize("config,length", [(dn.REFERENCE_256, 32768), (dn.DESK, 1024), (dn.TINY, 256)])
def test_row_length(config, length):
    assert int(np.prod(config.h_shape)) == length


def test_collect_h_counts(tiny64, tiny_schedule):
    batches = list(dr.collect_h(tiny64, tiny_schedule, 8, seed=0, batch=4, steps=5))
    assert len(batches) == 2
    assert all(b.rows.shape == (5, 4, 256) for b in batches)


def test_collect_h_desk_rows():
    p = dn.init_params(dn.DESK, seed=0)
    (b,) = dr.collect_h(p, df.linear_schedule(200), 2, batch=2, steps=2)
    assert b.rows.shape == (2, 2, 1024)


def test_collect_h_skips_and_reports_divergent_samples(tiny64, tiny_schedule, monkeypatch):
    real = df.sample
    bad = 1

    def flaky(params, schedule, seed=0, steps=50, *a, **k):
        if bad in np.atleast_1d(seed):
            raise df.DivergenceError("non-finite pixels after step at t=100")
        return real(params, schedule, seed, steps, *a, **k)

    monkeypatch.setattr(df, "sample", flaky)
    (b,) = dr.collect_h(tiny64, tiny_schedule, 4, seed=0, batch=4, steps=3)
    assert b.skipped == [bad] and b.rows.shape[1] == 3 and bad not in b.seeds


def test_fit_pca_states(tiny64, tiny_schedule):
    states, ts, skipped = dr.fit_pca(tiny64, tiny_schedule, n_samples=12, k=3, batch=5, steps=4)
    assert len(states) == 4 and list(ts) == list(df.timestep_sequence(100, 4)) and not skipped
    assert all(s.n == 12 and s.components.shape == (256, 3) for s in states)


def test_broadcast_direction_expands(rng):
    d = dr.Direction(rng.standard_normal(dn.TINY.h_shape), "supervised", broadcast=True)
    assert d.expanded(7).shape == (7,) + dn.TINY.h_shape
    with pytest.raises(ValueError):
        dr.Direction(rng.standard_normal((3,) + dn.TINY.h_shape), "pca", timesteps=[2, 1])
    with pytest.raises(ValueError):
        dr.Direction(np.zeros(3), "magic")


# ------------------------------------------------------------ trained desk model

def test_top_component_moves_an_attribute_monotonically(desk_trained, desk_pca):
    states, ts = desk_pca
    d = dr.assemble_pca_direction(states, 1, ts, dn.DESK.h_shape)
    gammas = np.linspace(-8, 8, 9)
    _, scores = ex.pca_gamma_sweep(desk_trained.params, desk_trained.schedule(), d, gammas, seed=5)
    rho = [abs(spearman(gammas, scores[:, a])) for a in range(scores.shape[1])]
    assert max(rho) > 0.8, rho
