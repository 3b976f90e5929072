"""Temporal SVD compression of fingerprints (T frames -> K coefficients).

``compress`` projects row signals onto the basis (``s @ v``) and
``decompress`` maps coefficients back (``c @ v^H``).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from .datastore import read_tensor, write_tensor
from .epg import Dictionary


@dataclass
class SubspaceBasis:
    v: np.ndarray
    singular_values: np.ndarray
    energy_captured: float

    @property
    def n_frames(self) -> int:
        return self.v.shape[0]

    @property
    def rank(self) -> int:
        return self.v.shape[1]

    def orthonormality_residual(self) -> float:
        return float(np.max(np.abs(self.v.conj().T @ self.v - np.eye(self.rank))))


def _fix_signs(v: np.ndarray) -> np.ndarray:
    # largest-magnitude entry of each column made real-positive
    idx = np.argmax(np.abs(v), axis=0)
    pivot = v[idx, np.arange(v.shape[1])]
    return v * (np.abs(pivot) / pivot)[None, :]


def compute_basis(dictionary, k: int, normalize: bool = True) -> SubspaceBasis:
    """Top-``k`` right singular vectors of the atom matrix.

    ``dictionary`` may be a :class:`Dictionary` or a plain D x T array.
    Atoms are unit-normalized first unless ``normalize`` is False.
    """
    atoms = dictionary.atoms if isinstance(dictionary, Dictionary) else np.asarray(dictionary)
    atoms = np.atleast_2d(atoms).astype(np.complex128)
    D, T = atoms.shape
    if not 1 <= k <= T:
        raise ValueError(f"k must lie in [1, T={T}], got {k}")
    if normalize:
        norms = np.linalg.norm(atoms, axis=1, keepdims=True)
        atoms = atoms / np.where(norms > 0, norms, 1)
    _, s, vh = np.linalg.svd(atoms, full_matrices=False)
    tol = s.max(initial=0.0) * max(D, T) * np.finfo(float).eps
    rank = int(np.sum(s > tol))
    if k > rank and k < T:
        raise ValueError(f"k={k} exceeds the numerical rank {rank} of the dictionary")
    if k > s.size:
        # k == T with D < T: complete the basis through the full SVD
        _, _, vh = np.linalg.svd(atoms, full_matrices=True)
    v = _fix_signs(vh[:k].conj().T)
    total = float(np.sum(s**2))
    energy = float(np.sum(s[:k] ** 2) / total) if total > 0 else 1.0
    return SubspaceBasis(v, s, min(energy, 1.0))


def _check_trailing(x: np.ndarray, n: int, what: str):
    if x.shape[-1] != n:
        raise ValueError(f"{what}: trailing dim must be {n}, got shape {x.shape}")


def compress(signals, basis: SubspaceBasis) -> np.ndarray:
    signals = np.asarray(signals)
    _check_trailing(signals, basis.n_frames, "compress")
    return signals @ basis.v


def decompress(coeffs, basis: SubspaceBasis) -> np.ndarray:
    coeffs = np.asarray(coeffs)
    _check_trailing(coeffs, basis.rank, "decompress")
    return coeffs @ basis.v.conj().T


def save_basis(path, basis: SubspaceBasis) -> None:
    write_tensor(path, basis.v.astype(np.complex128))


def load_basis(path) -> SubspaceBasis:
    """Singular values are not persisted; energy is reported as NaN."""
    v = read_tensor(path).astype(np.complex128)
    return SubspaceBasis(v, np.array([]), float("nan"))


class SubspaceCompressor(TransformerMixin, BaseEstimator):
    """Estimator wrapper: ``fit`` on atoms, ``transform`` signals to coefficients.

    Parameters
    ----------
    n_components : int
        Subspace rank K.
    normalize : bool
        Unit-normalize atoms before the SVD.
    """

    def __init__(self, n_components: int = 5, normalize: bool = True):
        self.n_components = n_components
        self.normalize = normalize

    def fit(self, X, y=None):
        self.basis_ = compute_basis(X, self.n_components, normalize=self.normalize)
        self.components_ = self.basis_.v.T
        self.explained_energy_ = self.basis_.energy_captured
        return self

    def transform(self, X):
        check_is_fitted(self, "basis_")
        return compress(X, self.basis_)

    def inverse_transform(self, X):
        check_is_fitted(self, "basis_")
        return decompress(X, self.basis_)
