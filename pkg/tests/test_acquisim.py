import numpy as np
import pytest

from mrfdip import acquisim
from mrfdip.acquisim import PhantomSpec, Region


def test_single_full_grid_region_is_constant():
    spec = PhantomSpec((16, 16), [Region((0.0, 0.0), (3.0, 3.0), 1000.0, 100.0, 1.0)], texture=0.0)
    ph = acquisim.make_phantom(spec)
    assert np.all(ph.t1_ms == 1000) and np.all(ph.t2_ms == 100) and np.allclose(ph.pd, 1.0)
    assert ph.mask.all()


def test_inner_region_wins():
    outer = Region((0.0, 0.0), (0.9, 0.9), 1200.0, 100.0, 0.85)
    inner = Region((0.0, 0.0), (0.4, 0.4), 800.0, 80.0, 0.7)
    ph = acquisim.make_phantom(PhantomSpec((32, 32), [outer, inner], texture=0.0))
    assert ph.t1_ms[16, 16] == 800 and ph.t1_ms[16, 2] == 1200
    assert ph.pd[16, 16] == pytest.approx(0.7)


def test_half_radius_sphere_volume_fraction():
    big = Region((0.0, 0.0, 0.0), (1.0, 1.0, 1.0), 1200.0, 100.0, 1.0)
    small_ = Region((0.0, 0.0, 0.0), (0.5, 0.5, 0.5), 800.0, 80.0, 1.0)
    ph = acquisim.make_phantom(PhantomSpec((64, 64, 64), [big, small_], texture=0.0, edge_sigma=0.0))
    ratio = np.sum(ph.t1_ms == 800) / ph.mask.sum()
    assert abs(ratio / 0.125 - 1) <= 0.02


def test_partial_volume_weights_sum_to_pd():
    ph = acquisim.make_phantom(PhantomSpec((32, 32)))
    assert np.allclose(ph.weights.sum(axis=0)[ph.mask], ph.pd[ph.mask])
    assert np.all(ph.fractions.sum(axis=0) <= 1 + 1e-12)
    assert 0 < ph.interior_mask().sum() < ph.mask.sum()


@pytest.mark.parametrize("bad", [
    dict(center=(0.0, 0.0), radii=(0.0, 0.5), t1_ms=800.0, t2_ms=80.0, pd=0.5),
    dict(center=(0.0, 0.0), radii=(0.5, 0.5), t1_ms=80.0, t2_ms=800.0, pd=0.5),
    dict(center=(0.0, 0.0), radii=(0.5, 0.5), t1_ms=800.0, t2_ms=80.0, pd=1.5),
])
def test_region_validation(bad):
    with pytest.raises(ValueError):
        Region(**bad)


def test_phantom_deterministic():
    a, b = acquisim.make_phantom(PhantomSpec((32, 32), seed=3)), acquisim.make_phantom(PhantomSpec((32, 32), seed=3))
    assert np.array_equal(a.pd, b.pd)


def test_spiral_geometry():
    L, M = 8, 256
    traj = acquisim.make_spiral(M, L, (64, 64))
    k = traj.points[:, 0] + 1j * traj.points[:, 1]
    assert np.all(np.abs(k) <= 0.5)
    arms = k.reshape(L, M)
    for l in range(L):
        assert np.allclose(arms[l], arms[0] * np.exp(2j * np.pi * l / L), atol=1e-15)
    assert np.allclose(np.abs(arms[:, -1]), 0.5 - 1e-9, atol=1e-15)
    assert np.array_equal(traj.arm_index, np.repeat(np.arange(L), M))


def test_stack_of_spirals():
    traj = acquisim.make_spiral(16, 2, (8, 8, 4))
    assert traj.points.shape == (16 * 2 * 4, 3)
    assert set(np.unique(traj.points[:, 2])) == {-0.5, -0.25, 0.0, 0.25}
    assert acquisim.arm_count(traj) == 8


def test_golden_angle_frames():
    traj = acquisim.make_spiral(16, 2, (8, 8))
    assert all(t is traj for t in acquisim.frame_trajectories(traj, 3))
    fr = acquisim.frame_trajectories(traj, 3, golden_angle=True)
    z0 = fr[0].points[:, 0] + 1j * fr[0].points[:, 1]
    z2 = fr[2].points[:, 0] + 1j * fr[2].points[:, 1]
    inside = np.abs(z0) < 0.49
    assert np.allclose(z2[inside], z0[inside] * np.exp(2j * acquisim.GOLDEN_ANGLE), atol=1e-12)


def test_coils_single_and_sos():
    assert np.allclose(acquisim.make_coils(1, (16, 16)).sensitivities, 1.0, atol=1e-12)
    s = acquisim.make_coils(4, (32, 32)).sensitivities
    assert np.max(np.abs(np.sqrt(np.sum(np.abs(s) ** 2, axis=0)) - 1)) <= 1e-10


def test_coil_rotational_symmetry():
    # C=4 centers sit 90 degrees apart; on an even symmetric grid a quarter turn maps coil c onto c+1
    s = acquisim.make_coils(4, (32, 32), phase_cycles=0.0).sensitivities
    for c in range(4):
        rotated = np.rot90(np.abs(s[c]), k=1)
        assert np.allclose(rotated, np.abs(s[(c + 1) % 4]), atol=1e-12)


def test_zero_pd_gives_zero_kspace(small):
    ph = acquisim.make_phantom(PhantomSpec((32, 32)))
    ph.pd[:] = 0
    ph.weights[:] = 0
    y, _ = acquisim.simulate_kspace(ph, small.seq, small.model, small.dictionary)
    assert np.all(y == 0)


def test_desk_kspace_shape(desk):
    from mrfdip.forward import to_kspace_array
    y, x_gt = acquisim.simulate_kspace(desk.phantom, desk.seq, desk.model, desk.dictionary)
    assert to_kspace_array(y, 256).shape == (4, 256, 8, 200)
    assert x_gt.shape == (64, 64, 5)


def test_off_grid_tissue_rejected(small):
    reg = [Region((0.0, 0.0), (0.8, 0.8), 812.0, 80.0, 1.0)]
    ph = acquisim.make_phantom(PhantomSpec((32, 32), reg))
    with pytest.raises(ValueError, match="not on the dictionary grid"):
        acquisim.simulate_kspace(ph, small.seq, small.model, small.dictionary)


def test_ground_truth_is_pd_times_fingerprint(small):
    ph = acquisim.make_phantom(PhantomSpec((32, 32), edge_sigma=0.0))
    x = acquisim.ground_truth_tsmi(ph, small.seq, small.basis, small.dictionary)
    v = np.unravel_index(np.argmax(ph.interior_mask() & (ph.t1_ms == 800)), ph.shape)
    atom = small.dictionary.raw_atoms()[small.dictionary.index_of(800.0, 80.0)]
    expect = ph.pd[v] * (atom @ small.basis.v)
    assert np.allclose(x[v], expect, rtol=1e-10)


def test_noise_level(rng):
    y = np.ones((2, 3, 1000), complex)
    noisy = acquisim.add_noise(y, 20.0, rng)
    assert 20 * np.log10(1 / np.sqrt(np.mean(np.abs(noisy - y) ** 2))) == pytest.approx(20.0, abs=0.2)


def test_undersample_rule():
    assert len(acquisim.kept_arms(56, 2)) == 28
    assert np.array_equal(acquisim.kept_arms(4, 2), [0, 2])
    assert len(acquisim.kept_arms(7, 2)) == 4
    with pytest.raises(ValueError, match="exceeds"):
        acquisim.kept_arms(4, 5)


def test_undersample_identity_and_consistency(small, rng):
    y = rng.standard_normal(small.model.kspace_shape) + 0j
    m1, t1, y1 = acquisim.undersample(small.model, small.traj, y, 1)
    assert np.array_equal(y1, y) and np.array_equal(t1.points, small.traj.points)
    m2, t2, y2 = acquisim.undersample(small.model, small.traj, y, 2)
    assert y2.shape[-1] == 3 * 64 and list(np.flatnonzero(m2.arm_mask)) == [0, 2, 4]
    # the accelerated operator samples exactly the kept arms of the full one
    x = rng.standard_normal(small.model.tsmi_shape) + 0j
    full = small.model.apply_forward(x)
    assert np.allclose(m2.apply_forward(x), acquisim.undersample_kspace(full, 2, 64), atol=1e-12)


def test_honest_crime_close_to_inverse_crime(small):
    spec = PhantomSpec((32, 32))
    y_fine, _ = acquisim.simulate_kspace_fine(spec, small.seq, small.model, small.traj, dictionary=small.dictionary)
    y, _ = acquisim.simulate_kspace(acquisim.make_phantom(spec), small.seq, small.model, small.dictionary)
    # same physical object sampled two ways; only discretization differs
    assert np.linalg.norm(y_fine - y) / np.linalg.norm(y) <= 0.2
