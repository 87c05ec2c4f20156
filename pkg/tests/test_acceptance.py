"""Acceptance criteria, one test (or parametrized group) per criterion.

The terminal summary prints one PASS/FAIL line per criterion.
"""
import numpy as np
import pytest

from hspace import autodiff as ad
from hspace import cli
from hspace import config as cf
from hspace import denoiser as dn
from hspace import diffusion as df
from hspace import directions as dr
from hspace import experiments as ex
from hspace import jacobian as jc
from hspace import storage as sg
from hspace import supervised as sv

from oracles import batch_pca, ddpm_posterior_std, fd_jacobian, gram_schmidt_complement, principal_angles

TIGHT = jc.StoppingRule(tol=1e-12, max_iter=2000)
DENSE_SEEDS = (0, 1, 2)


def criterion(number, title):
    return pytest.mark.criterion(number, title)


def rel(a, b):
    return float(np.linalg.norm(np.ravel(a) - np.ravel(b)) / np.linalg.norm(np.ravel(b)))


def dense(seed):
    return np.random.default_rng(seed).standard_normal((50, 30))


@pytest.fixture(scope="module")
def desk(desk_trained):
    return desk_trained.params, desk_trained.schedule()


# ------------------------------------------------------------ 1

@criterion(1, "autodiff adjoint and finite differences on the tiny denoiser")
def test_autodiff_correctness(tiny64):
    rng = np.random.default_rng(101)
    cfg = tiny64.config
    probes = [jc.DenoiserProbe(tiny64, rng.standard_normal(cfg.image_shape), int(t))
              for t in rng.integers(1, 101, 10)]
    adjoint, jvp_fd = [], []
    a = 1e-4
    for i in range(100):
        p = probes[i % len(probes)]
        v = rng.standard_normal((p.d_in, 1))
        u = rng.standard_normal((p.d_out, 1))
        lhs = float(u[:, 0] @ p.jvp(p.h, v)[:, 0])
        rhs = float(p.vjp(p.h, u)[:, 0] @ v[:, 0])
        adjoint.append(abs(lhs - rhs) / abs(lhs))
        w = v.reshape(p.h.shape)
        fd = (p.value(p.h + a * w) - p.value(p.h - a * w)) / (2 * a)
        jvp_fd.append(rel(p.jvp(p.h, v)[:, 0], fd))
    # parameter gradient of the training loss against directional differences
    x_t = rng.standard_normal((4,) + cfg.image_shape)
    t = rng.integers(1, 101, 4)
    fn = dn.loss_fn(cfg, x_t, t, rng.standard_normal(x_t.shape))
    arrays = tiny64.arrays
    _, grads = ad.grad_params(fn, arrays)

    def loss_at(delta, c):
        with ad.no_grad():
            return float(fn({k: ad.Tensor(v + c * delta[k]) for k, v in arrays.items()}).data)

    grad_fd = []
    for _ in range(100):
        delta = {k: rng.standard_normal(v.shape) for k, v in arrays.items()}
        analytic = sum(float(np.sum(grads[k] * delta[k])) for k in arrays)
        fd = (loss_at(delta, a) - loss_at(delta, -a)) / (2 * a)
        grad_fd.append(abs(analytic - fd) / abs(fd))
    assert max(adjoint) < 1e-5, max(adjoint)
    assert max(jvp_fd) < 1e-3, max(jvp_fd)
    assert max(grad_fd) < 1e-3, max(grad_fd)


# ------------------------------------------------------------ 2

@criterion(2, "schedule formulas")
@pytest.mark.parametrize("T", [100, 200, 1000])
def test_schedule_formulas(T):
    s0 = df.linear_schedule(T, eta=0.0)
    s1 = df.linear_schedule(T, eta=1.0)
    betas = 1 - s1.alpha_bar[1:] / s1.alpha_bar[:-1]
    assert all(df.sigma(t, s0) == 0.0 for t in range(1, T + 1))
    assert max(abs(df.sigma(t, s1) - ddpm_posterior_std(betas, t)) for t in range(1, T + 1)) < 1e-10
    rng = np.random.default_rng(T)
    x0 = rng.uniform(-1, 1, 256)
    n = rng.standard_normal(256)
    for t in range(1, T + 1):
        x_t = df.forward_noise(x0, t, n, s0)
        x_prev = np.sqrt(s0.alpha_bar[t - 1]) * df.predict_x0(x_t, n, t, s0) + df.direction_term(n, t, s0)
        assert np.max(np.abs(x_prev - df.forward_noise(x0, t - 1, n, s0))) < 1e-6


# ------------------------------------------------------------ 3

@criterion(3, "subspace iteration matches dense and finite-difference SVD")
@pytest.mark.parametrize("seed", DENSE_SEEDS)
def test_subspace_iteration_dense(seed):
    A = dense(seed)
    res = jc.subspace_iteration(jc.LinearProbe(A), np.zeros(30), 5, stop=TIGHT)
    _, s, Vt = np.linalg.svd(A)
    np.testing.assert_allclose(res.sigma, s[:5], rtol=1e-4)
    for i in range(5):
        gap_above = np.inf if i == 0 else s[i - 1] / s[i] - 1
        gap_below = s[i] / s[i + 1] - 1
        if min(gap_above, gap_below) > 0.01:
            assert principal_angles(res.V[:, i:i + 1], Vt[i][:, None])[0] < 1e-3


@criterion(3, "subspace iteration matches dense and finite-difference SVD")
def test_subspace_iteration_tiny_denoiser(tiny64):
    sch = df.linear_schedule(100)
    _, traj = df.sample(tiny64, sch, seed=21, steps=20)
    probe, h = ex.probe_at(tiny64, traj, 10, sch)
    s = np.linalg.svd(fd_jacobian(probe.value, h, step=1e-4), compute_uv=False)
    res = jc.subspace_iteration(probe, h, 3, stop=jc.StoppingRule(1e-8, 500))
    np.testing.assert_allclose(res.sigma, s[:3], rtol=1e-2)


# ------------------------------------------------------------ 4

@criterion(4, "sequential block variant matches the batched iteration")
@pytest.mark.parametrize("b", [1, 2])
@pytest.mark.parametrize("seed", DENSE_SEEDS)
def test_sequential_variant(seed, b):
    probe = jc.LinearProbe(dense(seed))
    full = jc.subspace_iteration(probe, np.zeros(30), 6, stop=TIGHT)
    blocked = jc.sequential_subspace_iteration(probe, np.zeros(30), 6, b=b, stop=TIGHT)
    np.testing.assert_allclose(blocked.sigma, full.sigma, rtol=1e-3)
    np.testing.assert_allclose(blocked.V.T @ blocked.V, np.eye(6), atol=1e-4)


# ------------------------------------------------------------ 5

@criterion(5, "predicted-image probe equals the noise probe up to scale")
@pytest.mark.parametrize("step", [4, 10, 16])
def test_predicted_image_equivalence(tiny64, step):
    sch = df.linear_schedule(100)
    _, traj = df.sample(tiny64, sch, seed=21, steps=20)
    pe, h = ex.probe_at(tiny64, traj, step, sch, "eps")
    px, _ = ex.probe_at(tiny64, traj, step, sch, "x0")
    a = jc.subspace_iteration(pe, h, 3, stop=TIGHT, residuals=False)
    b = jc.subspace_iteration(px, h, 3, stop=TIGHT, residuals=False)
    ab = sch.alpha_bar[int(traj.timesteps[step])]
    np.testing.assert_allclose(b.sigma / a.sigma, np.sqrt(1 - ab) / np.sqrt(ab), rtol=1e-3)
    for i in range(3):
        assert principal_angles(a.V[:, i:i + 1], b.V[:, i:i + 1])[0] < 1e-3


# ------------------------------------------------------------ 6

@criterion(6, "incremental PCA")
def test_incremental_pca():
    rng = np.random.default_rng(6)
    basis, _ = np.linalg.qr(rng.standard_normal((12, 12)))
    scales = np.array([10, 7, 5, 3, 2, 1, .5, .4, .3, .2, .1, .05])
    X = rng.standard_normal((400, 12)) * scales @ basis.T + rng.standard_normal(12)
    one = dr.IncrementalPCA(4, 12).update(X)
    axes, _ = batch_pca(X, 4)
    assert principal_angles(one.components, axes).max() < 1e-4
    B, _ = np.linalg.qr(rng.standard_normal((40, 3)))
    Y = rng.standard_normal((200, 3)) * [5, 3, 2] @ B.T + 0.7
    st = dr.IncrementalPCA(3, 40)
    for part in np.array_split(Y, 4):
        st = st.update(part)
    assert principal_angles(st.components, B).max() < 1e-3
    assert np.max(np.abs(st.mean - Y.mean(axis=0))) < 1e-6


# ------------------------------------------------------------ 7

def _vec(x):
    return dr.Direction(np.asarray(x, dtype=np.float64), "supervised", broadcast=True)


@criterion(7, "projection algebra")
def test_projection_algebra():
    rng = np.random.default_rng(7)
    for i in range(100):
        k = 1 + i % 4
        dim = 6 + rng.integers(0, 20)
        V = rng.standard_normal((dim, k))
        v0 = rng.standard_normal(dim)
        n0 = np.linalg.norm(v0)
        # pair
        r = sv.disentangle_pair(_vec(v0), _vec(V[:, 0])).flat()
        assert abs(r @ V[:, 0]) <= 1e-6 * n0 * np.linalg.norm(V[:, 0])
        np.testing.assert_allclose(sv.disentangle_pair(_vec(r), _vec(V[:, 0])).flat(), r, atol=1e-6 * n0)
        np.testing.assert_allclose(r, gram_schmidt_complement(v0, V[:, :1]), atol=1e-6 * n0)
        # multi
        others = [_vec(c) for c in V.T]
        m = sv.disentangle_multi(_vec(v0), others).flat()
        assert np.linalg.norm(V.T @ m) <= 1e-6 * n0 * np.linalg.norm(V)
        np.testing.assert_allclose(sv.disentangle_multi(_vec(m), others).flat(), m, atol=1e-6 * n0)
        np.testing.assert_allclose(m, gram_schmidt_complement(v0, V), atol=1e-6 * n0)
        inside = V @ rng.standard_normal(k)
        assert np.linalg.norm(sv.projector_apply(V, inside)) <= 1e-6 * np.linalg.norm(inside)


# ------------------------------------------------------------ 8

@criterion(8, "desk training, determinism and inversion")
def test_desk_end_to_end(desk_trained, desk):
    params, s = desk
    from hspace import faces as fc
    val, _ = fc.generate_dataset(512, 99, size=32, entangled=desk_trained.recipe.entangled)
    model, baseline = df.validation_loss(params, val, s)
    print(f"validation {model:.4f} vs zero baseline {baseline:.4f}; "
          f"trained in {desk_trained.seconds:.0f} s over {desk_trained.recipe.steps} steps")
    assert model <= 0.8 * baseline
    s0 = s.with_eta(0.0)
    seeds = list(range(200, 216))
    a, _ = df.sample(params, s0, seeds, steps=100)
    b, _ = df.sample(params, s0, seeds, steps=100)
    assert np.array_equal(a, b)
    inv = df.invert(params, a, s0, steps=100)
    rec, _ = df.sample(params, s0, seeds, steps=100, x_T=inv.x_T)
    mse = float(np.mean((rec.astype(np.float64) - a) ** 2))
    print(f"inversion round-trip mse {mse:.2e}")
    assert mse < 1e-2


# ------------------------------------------------------------ 9

@criterion(9, "top principal directions beat norm-matched random directions")
def test_pca_beats_random(desk, desk_pca):
    params, s = desk
    states, ts = desk_pca
    res = ex.pca_vs_random(params, s, states, ts, trials=25, gamma=4.0, seed=9, steps=len(ts))
    per_trial = {}
    for trial, _, _, e_pc, e_rand in res.rows:
        per_trial.setdefault(trial, []).append(e_pc > e_rand)
    trial_wins = sum(all(v) for v in per_trial.values())
    print(f"pca wins {res.wins}/{res.comparisons} comparisons; {trial_wins}/25 trials with both components winning")
    assert res.win_rate >= 0.8


# ------------------------------------------------------------ 10

@criterion(10, "projection removes entanglement between supervised directions")
def test_disentanglement(desk):
    params, s = desk
    run = ex.disentanglement_experiment(params, s, pool_size=256, m=32, n_samples=16, repeats=10,
                                        seed=10, steps=25)
    print(run.naive.to_csv() + run.disentangled.to_csv())
    assert len(run.naive.off_diagonal_rows()) >= 1
    assert run.disentangled.diagonal_hits() >= 3


# ------------------------------------------------------------ 11

@criterion(11, "a Jacobian direction transfers across samples")
def test_jacobian_transfer(desk):
    params, s = desk
    targets = ex.seeds_for("transfer-targets", 8, 11)
    res = ex.jacobian_transfer(params, s, source_seed=11, target_seeds=targets, steps=50)
    print(f"component {res.component} moves {res.attribute} by {res.source_change:+.3f}; "
          f"targets {np.round(res.target_changes, 3).tolist()}")
    assert res.consistent >= 6


# ------------------------------------------------------------ 12

@criterion(12, "masked Jacobian edits stay inside the mask")
def test_masked_locality(tiny_trained):
    params = tiny_trained.params
    s = tiny_trained.schedule()
    res = ex.mask_locality(params, s, seed=12, mask=ex.left_half_mask(params.config), steps=50)
    print(f"inside fraction {res.inside_fraction:.3f}")
    assert res.inside_fraction >= 0.6


# ------------------------------------------------------------ 13

@pytest.fixture(scope="module")
def desk_files(tmp_path_factory, desk_trained, desk_pca):
    base = tmp_path_factory.mktemp("acceptance")
    sg.save_params(base / "params.hslb", desk_trained.params, T=desk_trained.recipe.T)
    states, ts = desk_pca
    sg.save_direction(base / "pc1.hslb", dr.assemble_pca_direction(states, 1, ts, dn.DESK.h_shape))
    return base


@criterion(13, "sample-efficiency and Asyrp reports")
def test_sample_efficiency_report(desk_files, tmp_path):
    out = tmp_path / "eff"
    assert cli.main(["evaluate", "sample-efficiency", "--out", str(out), "--params",
                     str(desk_files / "params.hslb"), "--sizes", "5,10,25,50", "--n-samples", "16",
                     "--steps", "25"]) == 0
    rows = (out / "sample_efficiency.csv").read_text().splitlines()
    assert rows[1] == "n,latent,mean_change,std_change" and len(rows) == 2 + 8
    assert sg.load_png(out / "sample_efficiency.png").ndim == 2
    print("\n".join(rows))


@criterion(13, "sample-efficiency and Asyrp reports")
def test_asyrp_report(desk_files, tmp_path):
    out = tmp_path / "asyrp"
    assert cli.main(["evaluate", "asyrp", "--out", str(out), "--params", str(desk_files / "params.hslb"),
                     "--direction", str(desk_files / "pc1.hslb"), "--gammas=-4,0,4"]) == 0
    m = cf.read_manifest(out / "manifest.txt")
    assert int(m["calls_asyrp"]) == 2 * int(m["calls_both"]) > 0
    assert (out / "asyrp.csv").exists() and sg.load_png(out / "asyrp.png").ndim == 2
    print((out / "asyrp.csv").read_text())
