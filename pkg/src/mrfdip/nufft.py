"""Kaiser-Bessel gridding NUFFT (type 2 forward, type 1 adjoint) and DCF.

Conventions: image voxels sit at centered integer coordinates
``x in [-N//2, N - N//2)`` and k-space points are in cycles per voxel,
``k in [-0.5, 0.5)``, so that::

    forward(image)[p] ~= sum_x image[x] * exp(-2j*pi * k_p . x)

A plan stores the interpolation from the oversampled Cartesian grid to the
sample locations as a sparse matrix; ``adjoint`` uses its transpose, so
the two are exact adjoints of each other up to round-off.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
from scipy.special import i0

TABLE_OVERSAMP = 2048  # kernel table samples per grid unit


@dataclass(frozen=True)
class Trajectory:
    """Sample locations of one frame, ``points`` is P x d in [-0.5, 0.5)."""

    points: np.ndarray
    arm_index: np.ndarray = field(default=None)
    frame_index: np.ndarray = field(default=None)

    def __post_init__(self):
        pts = np.atleast_2d(np.asarray(self.points, dtype=float))
        object.__setattr__(self, "points", pts)
        if pts.shape[1] not in (2, 3):
            raise ValueError(f"trajectory must be P x 2 or P x 3, got {pts.shape}")
        P = pts.shape[0]
        for name in ("arm_index", "frame_index"):
            val = getattr(self, name)
            val = np.zeros(P, dtype=np.int64) if val is None else np.asarray(val, dtype=np.int64)
            if val.shape != (P,):
                raise ValueError(f"{name} must have length {P}")
            object.__setattr__(self, name, val)

    @property
    def ndim(self) -> int:
        return self.points.shape[1]

    def __len__(self) -> int:
        return self.points.shape[0]


def kb_beta(width: float, sigma: float) -> float:
    """Standard Kaiser-Bessel shape parameter for a given width and oversampling."""
    return float(np.pi * np.sqrt((width / sigma) ** 2 * (sigma - 0.5) ** 2 - 0.8))


def kb_kernel(u, width: float, beta: float) -> np.ndarray:
    """Kaiser-Bessel window, support ``|u| <= width / 2`` (grid units)."""
    u = np.asarray(u, dtype=float)
    t = 1.0 - (2.0 * u / width) ** 2
    return np.where(t >= 0, i0(beta * np.sqrt(np.clip(t, 0, None))), 0.0)


def kb_transform(xi, width: float, beta: float) -> np.ndarray:
    """Continuous Fourier transform of :func:`kb_kernel` at frequency ``xi`` (cycles/grid unit)."""
    z = beta**2 - (np.pi * width * np.asarray(xi, dtype=float)) ** 2
    s = np.sqrt(np.abs(z))
    with np.errstate(invalid="ignore", divide="ignore"):
        pos = width * np.sinh(s) / s
        neg = width * np.sin(s) / s
    out = np.where(z > 0, pos, neg)
    return np.where(s == 0, width, out)


def oversampled_size(n: int, sigma: float) -> int:
    m = int(np.ceil(sigma * n))
    return m + (m % 2)


@dataclass(frozen=True, eq=False)
class NufftPlan:
    grid_dims: tuple[int, ...]
    os_dims: tuple[int, ...]
    sigma: float
    width: int
    beta: float
    apodization: np.ndarray
    interp: sp.csr_matrix
    interp_t: sp.csr_matrix
    points: np.ndarray

    @property
    def n_points(self) -> int:
        return self.points.shape[0]

    @property
    def ndim(self) -> int:
        return len(self.grid_dims)


def _check_points(points: np.ndarray):
    bad = np.flatnonzero(np.any((points < -0.5) | (points >= 0.5) | ~np.isfinite(points), axis=1))
    if bad.size:
        raise ValueError(f"coordinate out of half-open range [-0.5, 0.5) at sample {bad[0]}: "
                         f"{points[bad[0]].tolist()}")


def plan(trajectory, grid_dims, sigma: float = 2.0, width: int = 6) -> NufftPlan:
    """Precompute the interpolation matrix and apodization for one frame.

    Parameters
    ----------
    trajectory : Trajectory or array_like
        P x d points in cycles per voxel.
    grid_dims : tuple of int
        Image matrix, length d.
    sigma : float
        Grid oversampling factor, >= 1.25.
    width : int
        Kernel width in oversampled grid cells, >= 2.
    """
    points = trajectory.points if isinstance(trajectory, Trajectory) else np.atleast_2d(
        np.asarray(trajectory, dtype=float))
    grid_dims = tuple(int(g) for g in grid_dims)
    d = len(grid_dims)
    if points.shape[1] != d:
        raise ValueError(f"trajectory is {points.shape[1]}-D but grid is {d}-D")
    if sigma < 1.25:
        raise ValueError("sigma must be >= 1.25")
    if width < 2:
        raise ValueError("width must be >= 2")
    _check_points(points)
    os_dims = tuple(oversampled_size(n, sigma) for n in grid_dims)
    beta = kb_beta(width, sigma)

    # tabulated kernel on [0, width/2], linear interpolation
    n_tab = int(np.ceil(TABLE_OVERSAMP * width / 2)) + 2
    table = kb_kernel(np.arange(n_tab) / TABLE_OVERSAMP, width, beta)

    P = points.shape[0]
    offsets = np.arange(width)
    weights = np.ones((P, 1))
    cols = np.zeros((P, 1), dtype=np.int64)
    for axis, n in enumerate(os_dims):
        pos = points[:, axis] * n
        start = np.floor(pos - width / 2).astype(np.int64) + 1
        m = start[:, None] + offsets[None, :]
        a = np.abs(pos[:, None] - m) * TABLE_OVERSAMP
        j = np.floor(a).astype(np.int64)
        f = a - j
        w = table[j] * (1 - f) + table[j + 1] * f
        w[a > TABLE_OVERSAMP * width / 2] = 0.0
        weights = (weights[:, :, None] * w[:, None, :]).reshape(P, -1)
        cols = (cols[:, :, None] * n + (m % n)[:, None, :]).reshape(P, -1)
    rows = np.repeat(np.arange(P), weights.shape[1])
    interp = sp.csr_matrix((weights.ravel(), (rows, cols.ravel())), shape=(P, int(np.prod(os_dims))))
    interp.sum_duplicates()
    interp.sort_indices()
    interp_t = interp.T.tocsr()
    interp_t.sort_indices()

    apod = np.ones(())
    for n, m in zip(grid_dims, os_dims):
        x = np.arange(n) - n // 2
        apod = np.multiply.outer(apod, 1.0 / kb_transform(x / m, width, beta))
    return NufftPlan(grid_dims, os_dims, float(sigma), int(width), beta, apod, interp, interp_t,
                     points.copy())


def _grid_index(p: NufftPlan):
    return np.ix_(*[(np.arange(n) - n // 2) % m for n, m in zip(p.grid_dims, p.os_dims)])


def forward(p: NufftPlan, image) -> np.ndarray:
    """Type-2 transform; ``image`` is ``(*batch, *grid_dims)``, returns ``(*batch, P)``."""
    image = np.asarray(image)
    d = p.ndim
    if image.shape[-d:] != p.grid_dims:
        raise ValueError(f"image dims {image.shape[-d:]} do not match plan grid {p.grid_dims}")
    batch = image.shape[:-d]
    pad = np.zeros(batch + p.os_dims, dtype=np.complex128)
    pad[(Ellipsis,) + _grid_index(p)] = image * p.apodization
    spec = np.fft.fftn(pad, axes=tuple(range(-d, 0)))
    flat = spec.reshape(-1, int(np.prod(p.os_dims)))
    out = (p.interp @ flat.T).T
    return out.reshape(batch + (p.n_points,))


def adjoint(p: NufftPlan, samples) -> np.ndarray:
    """Exact adjoint of :func:`forward`; ``samples`` is ``(*batch, P)``."""
    samples = np.asarray(samples)
    if samples.shape[-1] != p.n_points:
        raise ValueError(f"expected {p.n_points} samples, got {samples.shape[-1]}")
    batch = samples.shape[:-1]
    d = p.ndim
    flat = samples.reshape(-1, p.n_points).astype(np.complex128, copy=False)
    spread = (p.interp_t @ flat.T).T.reshape(batch + p.os_dims)
    pad = np.fft.ifftn(spread, axes=tuple(range(-d, 0))) * np.prod(p.os_dims)
    return pad[(Ellipsis,) + _grid_index(p)] * p.apodization


@dataclass(frozen=True)
class DensityCompensation:
    weights: np.ndarray

    def __post_init__(self):
        w = np.asarray(self.weights, dtype=float)
        if np.any(~np.isfinite(w)) or np.any(w <= 0):
            raise ValueError("density weights must be finite and > 0")
        object.__setattr__(self, "weights", w)


def compute_dcf(p: NufftPlan, n_iters: int = 20) -> DensityCompensation:
    """Pipe-Menon fixed-point iteration ``w <- w / (G G^H w)``, scaled to max 1."""
    if n_iters < 1:
        raise ValueError("n_iters must be >= 1")
    w = np.ones(p.n_points)
    for _ in range(n_iters):
        denom = p.interp @ (p.interp_t @ w)
        bad = np.flatnonzero(~(denom > 0))
        if bad.size:
            raise ValueError(f"zero density estimate at sample {bad[0]}")
        w = w / denom
    return DensityCompensation(w / w.max())


def direct_nudft(points, image) -> np.ndarray:
    """O(N P) reference transform (small problems only)."""
    points = np.atleast_2d(np.asarray(points, dtype=float))
    image = np.asarray(image)
    axes = [np.arange(n) - n // 2 for n in image.shape]
    out = np.zeros(points.shape[0], dtype=np.complex128)
    coords = np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1).reshape(-1, image.ndim)
    flat = image.ravel()
    for start in range(0, points.shape[0], 512):
        phase = points[start:start + 512] @ coords.T
        out[start:start + 512] = np.exp(-2j * np.pi * phase) @ flat
    return out


def benchmark(grid_dims, n_points: int, sigma: float = 2.0, width: int = 6, repeats: int = 5,
              check_dft: bool = True, seed: int = 0) -> dict:
    """Time forward/adjoint on random points; optionally compare with the direct DFT."""
    rng = np.random.default_rng(seed)
    pts = rng.uniform(-0.5, 0.5, (n_points, len(grid_dims)))
    img = rng.standard_normal(grid_dims) + 1j * rng.standard_normal(grid_dims)
    pl = plan(pts, grid_dims, sigma, width)
    out = forward(pl, img)
    t0 = time.perf_counter()
    for _ in range(repeats):
        out = forward(pl, img)
    t1 = time.perf_counter()
    for _ in range(repeats):
        adjoint(pl, out)
    t2 = time.perf_counter()
    err = float("nan")
    if check_dft:
        ref = direct_nudft(pts, img)
        err = float(np.linalg.norm(out - ref) / np.linalg.norm(ref))
    return {"P": n_points, "grid": "x".join(map(str, grid_dims)), "sigma": sigma, "w": width,
            "forward_ms": 1e3 * (t1 - t0) / repeats, "adjoint_ms": 1e3 * (t2 - t1) / repeats,
            "rel_err_vs_dft": err}
