import numpy as np
import pytest

from mrfdip import acquisim, nufft, solvers
from mrfdip.forward import CoilSet, ForwardModel
from mrfdip.solvers import LRTV, SVDMRF, LowRankCG, LowRankTikhonov, NumericalError
from mrfdip.subspace import SubspaceBasis
from conftest import crandn
from oracles import materialize


def rel(a, b):
    return float(np.linalg.norm(a - b) / np.linalg.norm(b))


def single_frame_model(points, grid, dcf=None, width=6):
    basis = SubspaceBasis(np.ones((1, 1), complex), np.ones(1), 1.0)
    p = nufft.plan(points, grid, 2.0, width)
    w = np.ones(p.n_points) if dcf is None else dcf
    return ForwardModel(basis, CoilSet(np.ones((1,) + grid)), p, w)


@pytest.fixture(scope="module")
def tiny():
    """Two coils, four frames, K=2 on a 6x6 grid: small enough to materialize."""
    r = np.random.default_rng(5)
    q, _ = np.linalg.qr(r.standard_normal((4, 2)) + 1j * r.standard_normal((4, 2)))
    basis = SubspaceBasis(q, np.ones(2), 1.0)
    traj = acquisim.make_spiral(24, 4, (6, 6), turns=2)
    coils = acquisim.make_coils(2, (6, 6))
    model = acquisim.build_model(traj, coils, basis, 24)
    y = crandn(r, *model.kspace_shape)
    G = materialize(model.gram_apply, model.tsmi_shape)
    b = model.normal_rhs(y).ravel()
    return model, y, G, b


def test_dense_gram_is_hermitian_psd(tiny):
    _, _, G, _ = tiny
    assert np.max(np.abs(G - G.conj().T)) <= 1e-12 * np.max(np.abs(G))
    assert np.linalg.eigvalsh(G).min() >= -1e-10


def test_lr_cg_matches_dense_solve(rng):
    # four samples per unknown keeps the normal matrix well conditioned
    pts = rng.uniform(-0.5, 0.5, (1000, 2))
    m = single_frame_model(pts, (16, 16))
    y = crandn(rng, *m.kspace_shape)
    G = materialize(m.gram_apply, m.tsmi_shape)
    x_ref = np.linalg.solve(G, m.normal_rhs(y).ravel())
    x, rep = solvers.recon_lr_cg(m, y, n_iters=200, tol=1e-13)
    assert rep.iterations <= 200
    assert rel(x.ravel(), x_ref) <= 1e-8


def test_lr_tikh_matches_dense_solve(tiny):
    model, y, G, b = tiny
    mu = 0.3
    x_ref = np.linalg.solve(G + mu * np.eye(len(b)), b)
    x, _ = solvers.recon_lr_tikh(model, y, mu, n_iters=200, tol=1e-14)
    assert rel(x.ravel(), x_ref) <= 1e-8


def test_lr_cg_multicoil_matches_dense(tiny):
    model, y, G, b = tiny
    x_ref = np.linalg.lstsq(G, b, rcond=None)[0]
    x, _ = solvers.recon_lr_cg(model, y, n_iters=500, tol=1e-14)
    assert rel(G @ x.ravel(), b) <= 1e-8
    assert rel(x.ravel(), x_ref) <= 1e-6


def test_identity_operator_one_iteration(rng):
    n = 8
    k = (np.arange(n) - n // 2) / n
    pts = np.stack(np.meshgrid(k, k, indexing="ij"), -1).reshape(-1, 2)
    m = single_frame_model(pts, (n, n))
    # a full Cartesian lattice makes the Gram n^2 times the identity (up to gridding error)
    x_true = crandn(rng, n, n, 1)
    y = m.apply_forward(x_true)
    x, rep = solvers.recon_lr_cg(m, y, n_iters=1, tol=1e-4)
    assert rel(x, x_true) <= 1e-4


def test_residual_history_nonincreasing(tiny):
    model, y, _, _ = tiny
    _, rep = solvers.recon_lr_cg(model, y, 40, tol=0)
    h = np.array(rep.residual_history)
    assert h[0] == pytest.approx(1.0)
    # CG minimizes the error in the G-norm; the residual norm is monotone up to round-off here
    assert np.all(np.diff(h) <= 1e-10 + 0.05 * h[:-1])


def test_tikh_mu_zero_equals_cg(tiny):
    model, y, _, _ = tiny
    a, _ = solvers.recon_lr_cg(model, y, 15)
    b, _ = solvers.recon_lr_tikh(model, y, 0.0, 15)
    assert np.array_equal(a, b)


def test_tikh_huge_mu_shrinks(tiny):
    model, y, _, b = tiny
    mu = 1e12 * solvers.estimate_operator_norm(model)
    x, _ = solvers.recon_lr_tikh(model, y, mu, 5)
    # x ~ b / mu once mu dominates the Gram
    assert np.linalg.norm(x) == pytest.approx(np.linalg.norm(b) / mu, rel=1e-9)


def test_operator_norm_matches_dense(tiny):
    model, _, G, _ = tiny
    # power iteration approaches the top eigenvalue from below
    lam = solvers.estimate_operator_norm(model, 500)
    top = np.linalg.eigvalsh(G).max()
    assert lam <= top * (1 + 1e-12) and lam == pytest.approx(top, rel=1e-4)


def test_svdmrf_zero_data(tiny):
    model, _, _, _ = tiny
    assert np.all(solvers.recon_svdmrf(model, np.zeros(model.kspace_shape, complex)) == 0)


def test_svdmrf_cartesian_equals_inverse_dft(rng):
    n = 16
    k = (np.arange(n) - n // 2) / n
    pts = np.stack(np.meshgrid(k, k, indexing="ij"), -1).reshape(-1, 2)
    # wide kernel so gridding error sits well below the tolerance
    p = nufft.plan(pts, (n, n), 2.0, 8)
    m = single_frame_model(pts, (n, n), nufft.compute_dcf(p).weights, width=8)
    x_true = crandn(rng, n, n)
    y = nufft.direct_nudft(pts, x_true)[None, None]
    # inverse DFT of Cartesian samples with centered indices
    A = np.exp(-2j * np.pi * pts @ np.stack(np.meshgrid(k * n, k * n, indexing="ij"), -1).reshape(-1, 2).T)
    x_idft = (A.conj().T @ y[0, 0] / n**2).reshape(n, n)
    assert rel(solvers.recon_svdmrf(m, y)[..., 0], x_idft) <= 1e-5


def test_svdmrf_scale_is_least_squares_optimal(tiny, rng):
    model, y, _, _ = tiny
    x = solvers.recon_svdmrf(model, y)
    w = model.dcf_array()

    def res(z):
        return sum(np.sum(w * np.abs(model.apply_coil_forward(c, z) - y[c]) ** 2) for c in range(model.n_coils))

    best = res(x)
    for s in rng.uniform(0.2, 3.0, 10):
        assert best <= res(s * x) + 1e-12 * best


def test_lrtv_zero_lambda_matches_cg(tiny):
    model, y, G, b = tiny
    x_cg, _ = solvers.recon_lr_cg(model, y, 300, tol=1e-14)
    x_tv, _ = solvers.recon_lrtv(model, y, 0.0, n_iters=3000)
    cond_ok = rel(G @ x_tv.ravel(), b)
    assert rel(x_tv, x_cg) <= 1e-3 or cond_ok <= 1e-3


def test_lrtv_recovers_constant_image(rng):
    n = 8
    k = (np.arange(n) - n // 2) / n
    pts = np.stack(np.meshgrid(k, k, indexing="ij"), -1).reshape(-1, 2)
    m = single_frame_model(pts, (n, n))
    x_true = np.full((n, n, 1), 2.0 - 1.0j)
    y = m.apply_forward(x_true)
    x, rep = solvers.recon_lrtv(m, y, lambda_tv=1.0, n_iters=50)
    assert rel(x, x_true) <= 1e-3
    h = np.array(rep.loss_history[5:])
    assert np.all(np.diff(h) <= 1e-12 * np.abs(h[:-1]))


def test_tv_prox_keeps_constants_and_div_is_adjoint(rng):
    v = np.full((6, 5, 2), 3.0 + 0j)
    z, _ = solvers.tv_prox(v, 0.7, (0, 1))
    assert np.allclose(z, v)
    x = crandn(rng, 6, 5, 2)
    p = crandn(rng, 2, 6, 5, 2)
    lhs = np.vdot(p, solvers._grad(x, (0, 1)))
    rhs = np.vdot(-solvers._div(p, (0, 1)), x)
    assert abs(lhs - rhs) <= 1e-12 * abs(lhs)


def test_lrtv_divergence_raises(tiny):
    model, y, _, _ = tiny
    with pytest.raises(NumericalError, match="diverging"):
        solvers.recon_lrtv(model, y, 0.0, n_iters=50, lipschitz=1e-3 * solvers.estimate_operator_norm(model))


def test_cg_non_finite_raises(tiny):
    model, y, _, _ = tiny
    with pytest.raises(NumericalError, match="non-finite"):
        solvers.conjugate_gradient(lambda v: v * np.nan, model.normal_rhs(y), 3)


def test_deterministic(tiny):
    model, y, _, _ = tiny
    assert solvers.estimate_operator_norm(model) == solvers.estimate_operator_norm(model)
    a, _ = solvers.recon_lrtv(model, y, 1e-2, 10)
    b, _ = solvers.recon_lrtv(model, y, 1e-2, 10)
    assert np.array_equal(a, b)


def test_estimators(tiny):
    model, y, _, _ = tiny
    assert np.array_equal(SVDMRF(model).fit_transform(y), solvers.recon_svdmrf(model, y))
    assert np.array_equal(LowRankCG(model, n_iters=7).fit(y).tsmi_, solvers.recon_lr_cg(model, y, 7)[0])
    est = LowRankTikhonov(model, mu_scale=0.1).fit(y)
    assert est.mu_ == pytest.approx(0.1 * solvers.estimate_operator_norm(model))
    assert LRTV(model, lambda_tv=1e-3, n_iters=3).fit(y).tsmi_.shape == model.tsmi_shape
    assert LowRankCG(model).get_params()["n_iters"] == 30
