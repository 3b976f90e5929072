import numpy as np
import pytest

from mrfdip import acquisim, nufft
from mrfdip.forward import CoilSet, ForwardModel, from_kspace_array, to_kspace_array
from mrfdip.subspace import SubspaceBasis
from conftest import crandn
from oracles import rel_dot_error


def dot(a, b):
    return np.vdot(a, b)


@pytest.fixture(scope="module")
def golden_model(small):
    """Per-frame golden-angle plans exercise the per-frame code path."""
    frames = acquisim.frame_trajectories(small.traj, small.basis.n_frames, golden_angle=True)
    return acquisim.build_model(frames, small.coils, small.basis, 64)


@pytest.fixture(params=["shared", "per-frame"])
def model(request, small, golden_model):
    return small.model if request.param == "shared" else golden_model


def test_zero_in_zero_out(model):
    assert np.all(model.apply_coil_forward(0, np.zeros(model.tsmi_shape)) == 0)
    assert np.all(model.apply_coil_adjoint(1, np.zeros((model.n_frames, model.n_points))) == 0)
    assert np.all(model.gram_apply(np.zeros(model.tsmi_shape)) == 0)


def test_degenerate_reduces_to_nufft(rng):
    traj = acquisim.make_spiral(32, 2, (8, 8))
    p = nufft.plan(traj, (8, 8))
    basis = SubspaceBasis(np.ones((1, 1), complex), np.ones(1), 1.0)
    m = ForwardModel(basis, CoilSet(np.ones((1, 8, 8))), p, np.ones(64))
    x = crandn(rng, 8, 8, 1)
    assert np.allclose(m.apply_coil_forward(0, x)[0], nufft.forward(p, x[..., 0]), atol=1e-14)


def test_linearity(rng, model):
    x1, x2 = crandn(rng, *model.tsmi_shape), crandn(rng, *model.tsmi_shape)
    a = 0.7 - 1.3j
    lhs = model.apply_coil_forward(1, a * x1 + x2)
    rhs = a * model.apply_coil_forward(1, x1) + model.apply_coil_forward(1, x2)
    assert np.linalg.norm(lhs - rhs) <= 1e-12 * np.linalg.norm(lhs)


def test_coil_dot_test(rng, model):
    for c in range(model.n_coils):
        x = crandn(rng, *model.tsmi_shape)
        y = crandn(rng, model.n_frames, model.n_points)
        assert rel_dot_error(dot(y, model.apply_coil_forward(c, x)), dot(model.apply_coil_adjoint(c, y), x)) <= 1e-12


def test_weighted_adjoint_is_dcf_then_adjoint(rng, model):
    y = crandn(rng, model.n_frames, model.n_points)
    a = model.apply_coil_adjoint(0, y, weighted=True)
    b = model.apply_coil_adjoint(0, model.dcf_array() * y)
    assert np.max(np.abs(a - b)) <= 1e-14 * np.max(np.abs(b))


def test_full_dot_test_and_energy_split(rng, model):
    x = crandn(rng, *model.tsmi_shape)
    y = crandn(rng, *model.kspace_shape)
    ax = model.apply_forward(x)
    assert rel_dot_error(dot(y, ax), dot(model.apply_adjoint(y), x)) <= 1e-12
    split = sum(np.linalg.norm(model.apply_coil_forward(c, x)) ** 2 for c in range(model.n_coils))
    assert abs(np.linalg.norm(ax) ** 2 - split) <= 1e-12 * split


def test_single_coil_reduces_to_coil_ops(rng, small):
    m = acquisim.build_model(small.traj, acquisim.make_coils(1, (32, 32)), small.basis, 64)
    x = crandn(rng, *m.tsmi_shape)
    assert np.array_equal(m.apply_forward(x)[0], m.apply_coil_forward(0, x))


def test_gram_hermitian_psd_and_consistent(rng, model):
    x, z = crandn(rng, *model.tsmi_shape), crandn(rng, *model.tsmi_shape)
    assert rel_dot_error(dot(model.gram_apply(x), z), dot(x, model.gram_apply(z))) <= 1e-12
    for _ in range(20):
        v = crandn(rng, *model.tsmi_shape)
        assert dot(model.gram_apply(v), v).real >= -1e-12
    # fused Gram equals the explicit composition
    g = model.gram_apply(x, tikhonov_mu=0.5)
    explicit = model.apply_adjoint(model.dcf_array() * model.apply_forward(x)) + 0.5 * x
    assert np.linalg.norm(g - explicit) <= 1e-12 * np.linalg.norm(explicit)


def test_mixed_group_sizes_agree(rng, small):
    # frames split in groups smaller and larger than K go down different code paths
    T = small.basis.n_frames
    pa = nufft.plan(small.traj, (32, 32))
    pb = nufft.plan(acquisim.rotate_trajectory(small.traj, 0.3), (32, 32))
    plans = [pb if t == 0 else pa for t in range(T)]
    w = [np.ones(pa.n_points)] * T
    m = ForwardModel(small.basis, small.coils, plans, w)
    x = crandn(rng, *m.tsmi_shape)
    y = m.apply_coil_forward(0, x)
    imgs = np.tensordot(small.basis.v.conj(), np.moveaxis(x, -1, 0), axes=(1, 0)) * small.coils.sensitivities[0]
    ref = np.stack([nufft.forward(plans[t], imgs[t]) for t in range(T)])
    assert np.linalg.norm(y - ref) <= 1e-12 * np.linalg.norm(ref)


def test_sample_ordering_golden():
    """flat index = (t * L + l) * M + m and the on-disk layout is (C, M, L, T)."""
    C, T, L, M = 2, 3, 4, 5
    y = np.zeros((C, T, L * M))
    for c in range(C):
        for t in range(T):
            for l in range(L):
                for m in range(M):
                    y[c, t, l * M + m] = 1000 * c + 100 * t + 10 * l + m
    arr = to_kspace_array(y, M)
    assert arr.shape == (C, M, L, T)
    assert arr[1, 4, 2, 0] == 1000 + 0 + 20 + 4
    assert np.array_equal(from_kspace_array(arr), y)


def test_shape_errors(small):
    m = small.model
    with pytest.raises(ValueError, match="TSMI shape"):
        m.apply_coil_forward(0, np.zeros((4, 4, 3)))
    with pytest.raises(IndexError):
        m.apply_coil_forward(5, np.zeros(m.tsmi_shape))
    with pytest.raises(ValueError, match="one plan per frame"):
        ForwardModel(small.basis, small.coils, [m.plans[0]] * 3, m.dcf[0])
