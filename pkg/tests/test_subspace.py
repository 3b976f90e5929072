import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mrfdip import epg, subspace
from mrfdip.subspace import SubspaceCompressor
from conftest import crandn


@pytest.fixture(scope="module")
def desk_dict():
    return epg.build_dictionary(epg.DESK_T1_GRID, epg.DESK_T2_GRID, epg.SequenceParams.desk(200))


def test_identical_atoms_rank_one(rng):
    a = crandn(rng, 1, 30)
    b = subspace.compute_basis(np.vstack([a, a]), 1)
    assert b.energy_captured == 1.0


def test_full_basis_captures_everything(rng):
    atoms = crandn(rng, 12, 8)
    b = subspace.compute_basis(atoms, 8)
    assert abs(b.energy_captured - 1.0) <= 1e-12
    # fewer atoms than frames: the completed basis is still orthonormal
    b2 = subspace.compute_basis(atoms[:3], 8)
    assert b2.orthonormality_residual() <= 1e-10 and abs(b2.energy_captured - 1) <= 1e-12


def test_energy_matches_gram_eigensolver(desk_dict):
    b = subspace.compute_basis(desk_dict, 5)
    a = desk_dict.atoms / np.linalg.norm(desk_dict.atoms, axis=1, keepdims=True)
    ev = np.linalg.eigvalsh(a.conj().T @ a)[::-1]
    assert abs(b.energy_captured - ev[:5].sum() / ev.sum()) <= 1e-10
    assert len(desk_dict) == 260 and b.v.shape == (200, 5)


def test_compress_basis_column_is_unit_vector(desk_dict):
    b = subspace.compute_basis(desk_dict, 5)
    for j in range(5):
        e = np.zeros(5)
        e[j] = 1
        assert np.allclose(subspace.compress(b.v[:, j].conj(), b), e, atol=1e-12)
    assert np.all(subspace.compress(np.zeros(200), b) == 0)


def test_projection_error_bound(desk_dict):
    b = subspace.compute_basis(desk_dict, 5)
    a = desk_dict.atoms
    err = np.linalg.norm(subspace.decompress(subspace.compress(a, b), b) - a, axis=1) / np.linalg.norm(a, axis=1)
    # per-atom error is bounded by the worst case of the discarded energy
    assert np.all(err**2 <= 1.0)
    assert np.sqrt(np.mean(err**2)) <= np.sqrt(1 - b.energy_captured) + 1e-10


def test_decompress_roundtrips(rng, desk_dict):
    b = subspace.compute_basis(desk_dict, 5)
    c = crandn(rng, 7, 5)
    assert np.allclose(subspace.compress(subspace.decompress(c, b), b), c, atol=1e-12)
    x = subspace.decompress(c, b)
    assert np.allclose(subspace.decompress(subspace.compress(x, b), b), x, atol=1e-12)
    e = np.eye(5)[2]
    assert np.allclose(subspace.decompress(e, b), b.v[:, 2].conj(), atol=1e-15)


def test_orthonormality(desk_dict):
    for k in (1, 3, 5, 10):
        assert subspace.compute_basis(desk_dict, k).orthonormality_residual() <= 1e-10


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 2**31), st.integers(4, 12), st.integers(4, 12))
def test_energy_nondecreasing_in_k(seed, D, T):
    atoms = crandn(np.random.default_rng(seed), D, T)
    energies = [subspace.compute_basis(atoms, k).energy_captured for k in range(1, min(D, T) + 1)]
    assert all(b >= a - 1e-12 for a, b in zip(energies, energies[1:]))


def test_bad_k(rng):
    with pytest.raises(ValueError):
        subspace.compute_basis(crandn(rng, 4, 6), 0)
    with pytest.raises(ValueError, match="exceeds the numerical rank"):
        a = crandn(rng, 1, 6)
        subspace.compute_basis(np.vstack([a, 2 * a]), 3)


def test_shape_checks(desk_dict):
    b = subspace.compute_basis(desk_dict, 5)
    with pytest.raises(ValueError, match="trailing dim"):
        subspace.compress(np.zeros(10), b)


def test_save_load(tmp_path, desk_dict):
    b = subspace.compute_basis(desk_dict, 5)
    subspace.save_basis(tmp_path / "b.mrft", b)
    assert np.array_equal(subspace.load_basis(tmp_path / "b.mrft").v, b.v)


def test_compressor_estimator(desk_dict):
    est = SubspaceCompressor(n_components=4).fit(desk_dict.atoms)
    z = est.transform(desk_dict.atoms[:3])
    assert z.shape == (3, 4)
    assert np.allclose(est.inverse_transform(z), subspace.decompress(z, est.basis_))
    assert est.get_params() == {"n_components": 4, "normalize": True}
