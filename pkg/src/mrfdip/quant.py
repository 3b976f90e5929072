"""Dictionary matching (TSMI -> T1/T2/PD maps) and masked image metrics."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import ndimage
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from .subspace import compress

PSNR_CAP_DB = 200.0


@dataclass
class QMaps:
    t1_ms: np.ndarray
    t2_ms: np.ndarray
    pd: np.ndarray
    mask: np.ndarray

    def __post_init__(self):
        self.mask = np.asarray(self.mask, dtype=bool)
        self.t1_ms = np.where(self.mask, self.t1_ms, 0.0)
        self.t2_ms = np.where(self.mask, self.t2_ms, 0.0)
        self.pd = np.where(self.mask, self.pd, 0.0)

    @property
    def shape(self) -> tuple[int, ...]:
        return self.mask.shape

    def stack(self) -> np.ndarray:
        """(3, *grid) array of T1, T2, PD."""
        return np.stack([self.t1_ms, self.t2_ms, self.pd])

    @classmethod
    def from_stack(cls, arr, mask=None) -> "QMaps":
        arr = np.asarray(arr, dtype=float)
        if mask is None:
            mask = arr[0] > 0
        return cls(arr[0], arr[1], arr[2], mask)


@dataclass
class CompressedDictionary:
    """Atoms projected on the basis; unit rows plus their pre-normalization norms."""

    atoms: np.ndarray
    norms: np.ndarray
    t1_ms: np.ndarray
    t2_ms: np.ndarray


def compress_dictionary(dictionary, basis) -> CompressedDictionary:
    """Compress raw (unit-M0) atoms and re-normalize the rows."""
    raw = compress(dictionary.raw_atoms(), basis)
    norms = np.linalg.norm(raw, axis=1)
    if np.any(norms == 0):
        raise ValueError("an atom vanishes in the subspace")
    return CompressedDictionary(raw / norms[:, None], norms, dictionary.t1_ms, dictionary.t2_ms)


def dict_match(x, dictionary, basis=None, mask=None, chunk: int = 4096) -> QMaps:
    """Exhaustive maximum-correlation match per voxel.

    Parameters
    ----------
    x : array, ``(*grid, K)``
        TSMI.
    dictionary : Dictionary or CompressedDictionary
        A plain dictionary is compressed with ``basis`` first.
    mask : bool array, optional
        Voxels to keep; default all voxels with nonzero data.
    """
    cd = dictionary if isinstance(dictionary, CompressedDictionary) else compress_dictionary(dictionary, basis)
    x = np.asarray(x)
    K = cd.atoms.shape[1]
    if x.shape[-1] != K:
        raise ValueError(f"TSMI has {x.shape[-1]} channels but the compressed dictionary has {K}")
    grid = x.shape[:-1]
    flat = x.reshape(-1, K)
    if mask is None:
        mask = np.any(flat != 0, axis=1).reshape(grid)
    mask = np.asarray(mask, dtype=bool)
    if mask.shape != grid:
        raise ValueError(f"mask shape {mask.shape} does not match TSMI grid {grid}")
    idx = np.flatnonzero(mask.ravel())
    best = np.zeros(idx.size, dtype=np.int64)
    corr = np.zeros(idx.size)
    dconj = cd.atoms.conj().T
    for s in range(0, idx.size, chunk):
        ip = np.abs(flat[idx[s:s + chunk]] @ dconj)
        best[s:s + chunk] = np.argmax(ip, axis=1)
        corr[s:s + chunk] = ip[np.arange(ip.shape[0]), best[s:s + chunk]]
    t1 = np.zeros(flat.shape[0])
    t2 = np.zeros(flat.shape[0])
    pd = np.zeros(flat.shape[0])
    t1[idx] = cd.t1_ms[best]
    t2[idx] = cd.t2_ms[best]
    pd[idx] = corr / cd.norms[best]
    return QMaps(t1.reshape(grid), t2.reshape(grid), pd.reshape(grid), mask)


def _masked(est, ref, mask):
    est = np.asarray(est, dtype=float)
    ref = np.asarray(ref, dtype=float)
    mask = np.ones(ref.shape, bool) if mask is None else np.asarray(mask, dtype=bool)
    if not mask.any():
        raise ValueError("empty mask")
    return est[mask], ref[mask]


def mape(est, ref, mask=None) -> float:
    """Mean absolute percentage error over the mask."""
    e, r = _masked(est, ref, mask)
    if np.any(r <= 0):
        raise ValueError("reference must be > 0 on the mask")
    return float(100.0 * np.mean(np.abs(e - r) / r))


def psnr(est, ref, mask=None) -> float:
    """``10 log10(peak^2 / MSE)`` with peak the masked reference maximum; inf if exact."""
    e, r = _masked(est, ref, mask)
    mse = np.mean((e - r) ** 2)
    if mse == 0:
        return float("inf")
    return float(10 * np.log10(np.max(r) ** 2 / mse))


def _ssim_map(est, ref, data_range, sigma=1.5, truncate=2.0, k1=0.01, k2=0.03):
    # 7-tap Gaussian window: radius = truncate * sigma = 3
    filt = lambda a: ndimage.gaussian_filter(a, sigma, truncate=truncate, mode="reflect")
    mu_x, mu_y = filt(est), filt(ref)
    sxx = filt(est * est) - mu_x**2
    syy = filt(ref * ref) - mu_y**2
    sxy = filt(est * ref) - mu_x * mu_y
    c1, c2 = (k1 * data_range) ** 2, (k2 * data_range) ** 2
    return ((2 * mu_x * mu_y + c1) * (2 * sxy + c2)) / ((mu_x**2 + mu_y**2 + c1) * (sxx + syy + c2))


def ssim(est, ref, mask=None) -> float:
    """Mean local SSIM over the mask; 3-D volumes are averaged over axial slices."""
    est = np.asarray(est, dtype=float)
    ref = np.asarray(ref, dtype=float)
    mask = np.ones(ref.shape, bool) if mask is None else np.asarray(mask, dtype=bool)
    if not mask.any():
        raise ValueError("empty mask")
    peak = float(np.max(ref[mask]))
    if peak <= 0:
        peak = float(np.max(np.abs(ref[mask]))) or 1.0
    if ref.ndim == 2:
        return float(np.mean(_ssim_map(est, ref, peak)[mask]))
    vals = [np.mean(_ssim_map(est[..., z], ref[..., z], peak)[mask[..., z]])
            for z in range(ref.shape[-1]) if mask[..., z].any()]
    return float(np.mean(vals))


def make_mask(pd_ref, threshold_frac: float = 0.05) -> np.ndarray:
    """Threshold at a fraction of max PD, keep the largest connected component."""
    pd_ref = np.asarray(pd_ref, dtype=float)
    mask = pd_ref > threshold_frac * np.max(pd_ref)
    labels, n = ndimage.label(mask)
    if n == 0:
        raise ValueError("mask is empty")
    sizes = np.bincount(labels.ravel())[1:]
    return labels == (1 + int(np.argmax(sizes)))


METRIC_COLUMNS = ("mape_t1", "mape_t2", "psnr_t1", "psnr_t2", "psnr_pd", "ssim_t1", "ssim_t2", "ssim_pd")


def evaluate(est: QMaps, ref: QMaps, mask=None) -> dict[str, float]:
    """The eight summary metrics; PD maps are normalized to their masked max."""
    mask = ref.mask if mask is None else np.asarray(mask, bool)
    pd_e = est.pd / max(np.max(est.pd[mask]), 1e-30)
    pd_r = ref.pd / max(np.max(ref.pd[mask]), 1e-30)
    out = {
        "mape_t1": mape(est.t1_ms, ref.t1_ms, mask),
        "mape_t2": mape(est.t2_ms, ref.t2_ms, mask),
        "psnr_t1": psnr(est.t1_ms, ref.t1_ms, mask),
        "psnr_t2": psnr(est.t2_ms, ref.t2_ms, mask),
        "psnr_pd": psnr(pd_e, pd_r, mask),
        "ssim_t1": ssim(est.t1_ms, ref.t1_ms, mask),
        "ssim_t2": ssim(est.t2_ms, ref.t2_ms, mask),
        "ssim_pd": ssim(pd_e, pd_r, mask),
    }
    return {k: (min(v, PSNR_CAP_DB) if k.startswith("psnr") else v) for k, v in out.items()}


class DictionaryMatcher(TransformerMixin, BaseEstimator):
    """Estimator form of :func:`dict_match`.

    ``fit`` compresses the dictionary onto the basis, ``transform`` maps a
    TSMI to a :class:`QMaps`.
    """

    def __init__(self, dictionary=None, basis=None, mask=None):
        self.dictionary = dictionary
        self.basis = basis
        self.mask = mask

    def fit(self, X=None, y=None):
        self.compressed_ = compress_dictionary(self.dictionary, self.basis)
        return self

    def transform(self, X) -> QMaps:
        check_is_fitted(self, "compressed_")
        return dict_match(X, self.compressed_, mask=self.mask)
