"""Synthetic MRF acquisitions: phantom, spiral trajectory, coils and k-space data."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage
from scipy.special import erfc

from . import nufft
from . import epg
from .epg import Dictionary, SequenceParams
from .forward import CoilSet, ForwardModel
from .quant import QMaps
from .subspace import SubspaceBasis, compress


@dataclass(frozen=True)
class Region:
    """Axis-aligned ellipsoid in normalized coordinates (grid spans [-1, 1])."""

    center: tuple[float, ...]
    radii: tuple[float, ...]
    t1_ms: float
    t2_ms: float
    pd: float

    def __post_init__(self):
        if min(self.radii) <= 0:
            raise ValueError(f"degenerate region radii {self.radii}")
        if self.t2_ms > self.t1_ms:
            raise ValueError(f"region has t2 ({self.t2_ms}) > t1 ({self.t1_ms})")
        if not 0 <= self.pd <= 1:
            raise ValueError(f"region PD must lie in [0, 1], got {self.pd}")


WM = (800.0, 80.0, 0.7)
GM = (1200.0, 100.0, 0.85)
CSF = (4000.0, 1800.0, 1.0)


def brain_regions(ndim: int = 2, wm=WM, gm=GM, csf=CSF) -> list[Region]:
    """Three-tissue preset: CSF rim, GM, WM core and two CSF ventricles."""
    def r(center, radii, tissue):
        center = (tuple(center) + (0.0,) * 3)[:ndim]
        radii = tuple(radii)[:ndim]
        return Region(center, radii, *tissue)

    return [
        r((0.0, 0.0), (0.86, 0.72, 0.7), csf),
        r((0.0, 0.0), (0.80, 0.66, 0.64), gm),
        r((0.0, 0.0), (0.58, 0.46, 0.44), wm),
        r((0.16, -0.17), (0.24, 0.08, 0.12), csf),
        r((0.16, 0.17), (0.24, 0.08, 0.12), csf),
        r((-0.38, 0.0), (0.08, 0.08, 0.08), gm),
    ]


@dataclass
class PhantomSpec:
    """Phantom geometry.

    ``edge_sigma`` is the width (voxels) of the error-function edge profile
    that turns each ellipsoid into a partial-volume membership map; 0 gives
    hard binary edges.  Soft edges keep the object nearly band-limited, which
    a disk-shaped spiral coverage needs for an accurate inverse-crime recovery.
    """

    grid_dims: tuple[int, ...] = (64, 64)
    regions: list[Region] = field(default=None)
    texture: float = 0.1
    seed: int = 0
    edge_sigma: float = 0.5

    def __post_init__(self):
        self.grid_dims = tuple(int(g) for g in self.grid_dims)
        if len(self.grid_dims) not in (2, 3):
            raise ValueError("phantom must be 2-D or 3-D")
        if self.regions is None:
            self.regions = brain_regions(len(self.grid_dims))
        for reg in self.regions:
            if len(reg.center) != len(self.grid_dims) or len(reg.radii) != len(self.grid_dims):
                raise ValueError("region dimensionality does not match the grid")
        if self.edge_sigma < 0:
            raise ValueError("edge_sigma must be >= 0")
        if not 0 <= self.texture < 1:
            raise ValueError("texture must lie in [0, 1)")


@dataclass
class Phantom(QMaps):
    """Q-maps plus the per-tissue partial-volume weights that generated them.

    ``tissues`` is an (n, 3) array of (T1, T2, PD) and ``weights`` is
    ``(n, *grid)``: fraction of each tissue times its PD (times texture).
    The Q-maps hold the dominant tissue of each voxel.
    """

    tissues: np.ndarray = None
    fractions: np.ndarray = None
    weights: np.ndarray = None

    def interior_mask(self, purity: float = 0.99, erosion: int = 1) -> np.ndarray:
        """Voxels whose dominant tissue fraction is at least ``purity``, away from the mask edge."""
        pure = self.fractions.max(axis=0) >= purity
        inner = ndimage.binary_erosion(self.mask, iterations=erosion) if erosion else self.mask
        return pure & inner


def normalized_coords(grid_dims) -> list[np.ndarray]:
    """Voxel-center coordinates in [-1, 1], symmetric about 0."""
    axes = [(np.arange(n) - (n - 1) / 2) / (n / 2) for n in grid_dims]
    return np.meshgrid(*axes, indexing="ij")


def _membership(reg: Region, coords, grid_dims, edge_sigma: float) -> np.ndarray:
    rel = [(c - c0) / r for c, c0, r in zip(coords, reg.center, reg.radii)]
    rho = np.sqrt(sum(u**2 for u in rel))
    if edge_sigma == 0:
        return (rho <= 1).astype(float)
    # first-order signed distance to the surface in voxels: (rho - 1) / |grad rho|
    scaled = np.sqrt(sum((u / (r * n / 2)) ** 2 for u, r, n in zip(rel, reg.radii, grid_dims)))
    with np.errstate(invalid="ignore", divide="ignore"):
        dist = np.where(rho > 0, (rho - 1) * rho / np.where(scaled > 0, scaled, 1), -np.inf)
    return 0.5 * erfc(dist / (np.sqrt(2) * edge_sigma))


def make_phantom(spec: PhantomSpec) -> Phantom:
    """Rasterize the regions; later regions are composited over earlier ones."""
    coords = normalized_coords(spec.grid_dims)
    tissues = []
    for reg in spec.regions:
        key = (reg.t1_ms, reg.t2_ms, reg.pd)
        if key not in tissues:
            tissues.append(key)
    frac = np.zeros((len(tissues),) + spec.grid_dims)
    for reg in spec.regions:
        m = _membership(reg, coords, spec.grid_dims, spec.edge_sigma)
        if not np.any(m >= 0.5):
            raise ValueError(f"region {reg} covers no voxel")
        frac *= 1 - m
        frac[tissues.index((reg.t1_ms, reg.t2_ms, reg.pd))] += m
    tissues = np.array(tissues, dtype=float)
    total = frac.sum(axis=0)
    mask = total >= 0.5
    tex = np.ones(spec.grid_dims)
    if spec.texture > 0:
        rng = np.random.default_rng(spec.seed)
        noise = ndimage.gaussian_filter(rng.standard_normal(spec.grid_dims), sigma=max(spec.grid_dims) / 12,
                                        mode="wrap")
        noise /= np.max(np.abs(noise))
        tex = 1 + spec.texture * noise
    shape = (-1,) + (1,) * len(spec.grid_dims)
    weights = frac * np.clip(tissues[:, 2].reshape(shape) * tex, 0, 1)
    dom = np.argmax(frac, axis=0)
    pd = weights.sum(axis=0)
    return Phantom(tissues[dom, 0], tissues[dom, 1], pd, mask, tissues=tissues, fractions=frac,
                   weights=weights)


def make_spiral(M: int, L: int, grid_dims, turns: float = 4.0) -> nufft.Trajectory:
    """Interleaved Archimedean spiral, ``k(tau) = r*tau*exp(2j*pi*turns*tau)``.

    ``r = 0.5 - 1e-9`` keeps the last sample inside the half-open k range.
    In 3-D the spiral is stacked over Cartesian kz partitions, one arm per
    (partition, interleave) with arm label ``p * L + l``.
    """
    if M < 1 or L < 1:
        raise ValueError("M and L must be >= 1")
    grid_dims = tuple(grid_dims)
    tau = np.linspace(0.0, 1.0, M)
    base = (0.5 - 1e-9) * tau * np.exp(2j * np.pi * turns * tau)
    arms = base[None, :] * np.exp(2j * np.pi * np.arange(L)[:, None] / L)     # (L, M)
    pts2 = np.stack([arms.real, arms.imag], axis=-1)                           # (L, M, 2)
    if len(grid_dims) == 2:
        pts = pts2.reshape(-1, 2)
        labels = np.repeat(np.arange(L), M)
    else:
        nz = grid_dims[2]
        kz = (np.arange(nz) - nz // 2) / nz
        pts = np.concatenate([np.concatenate([pts2, np.full((L, M, 1), z)], axis=-1) for z in kz])
        pts = pts.reshape(-1, 3)
        labels = np.repeat(np.arange(L * nz), M)
    return nufft.Trajectory(pts, arm_index=labels)


def arm_count(traj: nufft.Trajectory) -> int:
    return int(traj.arm_index.max()) + 1


GOLDEN_ANGLE = np.pi * (3 - np.sqrt(5))


def rotate_trajectory(traj: nufft.Trajectory, angle: float) -> nufft.Trajectory:
    """In-plane (kx, ky) rotation, kept inside the half-open k range."""
    pts = traj.points.copy()
    z = (pts[:, 0] + 1j * pts[:, 1]) * np.exp(1j * angle)
    pts[:, 0], pts[:, 1] = z.real, z.imag
    return nufft.Trajectory(np.clip(pts, -0.5, 0.5 - 1e-9), arm_index=traj.arm_index)


def frame_trajectories(traj: nufft.Trajectory, n_frames: int, golden_angle: bool = False):
    """Per-frame trajectories: the same arms every frame, or rotated by the golden angle per frame."""
    if not golden_angle:
        return [traj] * n_frames
    return [rotate_trajectory(traj, t * GOLDEN_ANGLE) for t in range(n_frames)]


def make_coils(C: int, grid_dims, seed: int = 0, width: float = 0.9, phase_cycles: float = 0.5,
               phase_jitter: float = 0.0) -> CoilSet:
    """Smooth Gaussian receive profiles centered on a ring of C points.

    The maps are divided by their root sum of squares and referenced to the
    phase of their sum, so SOS = 1 everywhere and C = 1 gives a map of ones.
    ``phase_jitter`` (radians, drawn from ``seed``) adds a constant random
    phase per coil.
    """
    if C < 1:
        raise ValueError("C must be >= 1")
    coords = normalized_coords(grid_dims)
    rng = np.random.default_rng(seed)
    maps = []
    for c in range(C):
        ang = 2 * np.pi * c / C
        u = np.zeros(len(grid_dims))
        u[0], u[1] = np.cos(ang), np.sin(ang)
        d2 = sum((x - ui) ** 2 for x, ui in zip(coords, u))
        proj = sum(x * ui for x, ui in zip(coords, u))
        phase = 2 * np.pi * phase_cycles * proj + phase_jitter * rng.uniform(-np.pi, np.pi)
        maps.append(np.exp(-d2 / (2 * width**2)) * np.exp(1j * phase))
    maps = np.stack(maps)
    total = maps.sum(axis=0)
    mag = np.abs(total)
    ref = np.where(mag > 0, total / np.where(mag > 0, mag, 1), 1.0)
    sos = np.sqrt(np.sum(np.abs(maps) ** 2, axis=0))
    return CoilSet(maps * ref.conj() / sos)


def build_model(traj, coils: CoilSet, basis: SubspaceBasis, samples_per_arm: int,
                sigma: float = 2.0, width: int = 6, dcf_iters: int = 20, arm_mask=None,
                use_dcf_in_gram: bool = True) -> ForwardModel:
    """Forward model; ``traj`` is one Trajectory shared by all frames or one per frame."""
    if isinstance(traj, nufft.Trajectory):
        p = nufft.plan(traj, coils.grid_dims, sigma, width)
        plans, dcf = p, nufft.compute_dcf(p, dcf_iters)
    else:
        plans, dcf, cache = [], [], {}
        for tr in traj:
            if id(tr) not in cache:
                p = nufft.plan(tr, coils.grid_dims, sigma, width)
                cache[id(tr)] = (p, nufft.compute_dcf(p, dcf_iters))
            plans.append(cache[id(tr)][0])
            dcf.append(cache[id(tr)][1])
    return ForwardModel(basis, coils, plans, dcf, arm_mask=arm_mask, samples_per_arm=samples_per_arm,
                        use_dcf_in_gram=use_dcf_in_gram)


def _fingerprints(pairs, seq: SequenceParams, dictionary: Dictionary | None) -> np.ndarray:
    """Unit-M0 fingerprints for a list of (T1, T2) pairs."""
    if dictionary is not None:
        grid = set(zip(dictionary.t1_ms.tolist(), dictionary.t2_ms.tolist()))
        for a, b in pairs:
            if (a, b) not in grid:
                raise ValueError(f"tissue (T1={a}, T2={b}) is not on the dictionary grid")
        return dictionary.raw_atoms()[[dictionary.index_of(a, b) for a, b in pairs]]
    return np.stack([epg.simulate_fingerprint(a, b, seq) for a, b in pairs])


def ground_truth_tsmi(qmaps: QMaps, seq: SequenceParams, basis: SubspaceBasis,
                      dictionary: Dictionary | None = None) -> np.ndarray:
    """Ground-truth subspace images.

    For a :class:`Phantom` each voxel is the weight-mixed sum of its tissue
    fingerprints (partial volume); for plain Q-maps it is
    ``PD_v * compress(B(T1_v, T2_v))`` over the masked voxels.  With a
    dictionary, every tissue must lie on its grid.
    """
    K = basis.rank
    if isinstance(qmaps, Phantom) and qmaps.weights is not None:
        pairs = [(float(a), float(b)) for a, b in qmaps.tissues[:, :2]]
        coeffs = compress(_fingerprints(pairs, seq, dictionary), basis)        # (n, K)
        return np.tensordot(qmaps.weights, coeffs, axes=(0, 0)).astype(np.complex128)
    x = np.zeros(qmaps.t1_ms.shape + (K,), dtype=np.complex128)
    m = qmaps.mask
    pairs, inverse = np.unique(np.stack([qmaps.t1_ms[m], qmaps.t2_ms[m]], axis=1), axis=0,
                               return_inverse=True)
    coeffs = compress(_fingerprints([tuple(p) for p in pairs.tolist()], seq, dictionary), basis)
    x[m] = qmaps.pd[m][:, None] * coeffs[inverse.ravel()]
    return x


def add_noise(y: np.ndarray, snr_db: float, rng) -> np.ndarray:
    """Complex white noise with ``20 log10(rms(y) / sigma) = snr_db``."""
    rms = np.sqrt(np.mean(np.abs(y) ** 2))
    sigma = rms * 10 ** (-snr_db / 20)
    noise = rng.standard_normal(y.shape) + 1j * rng.standard_normal(y.shape)
    return y + sigma / np.sqrt(2) * noise


def simulate_kspace(qmaps: QMaps, seq: SequenceParams, model: ForwardModel,
                    dictionary: Dictionary | None = None, noise_snr_db: float | None = None,
                    seed: int = 0):
    """Synthesize ``y = A(x_gt)`` (+ noise).  Returns ``(y, x_gt)``."""
    x_gt = ground_truth_tsmi(qmaps, seq, model.basis, dictionary)
    y = model.apply_forward(x_gt)
    if noise_snr_db is not None:
        y = add_noise(y, noise_snr_db, np.random.default_rng(seed))
    return y, x_gt


def simulate_kspace_fine(spec: PhantomSpec, seq: SequenceParams, model: ForwardModel, traj,
                         coil_kw: dict | None = None, dictionary: Dictionary | None = None,
                         noise_snr_db: float | None = None, seed: int = 0, factor: int = 2):
    """Synthesize data on a ``factor``-times finer grid (no inverse crime).

    The phantom and coils are re-rasterized on the fine grid and sampled at
    the same physical k-space locations (``k / factor`` cycles per fine
    voxel).  Output is scaled by ``factor**-d`` and phase-corrected for the
    shift between fine and coarse voxel-center conventions, so it is
    directly comparable with ``model.apply_forward`` on the coarse grid.
    Returns ``(y, x_gt_coarse)``.
    """
    coil_kw = dict(coil_kw or {})
    fine_dims = tuple(factor * n for n in spec.grid_dims)
    fine_spec = PhantomSpec(fine_dims, spec.regions, spec.texture, spec.seed, spec.edge_sigma * factor)
    fine = make_phantom(fine_spec)
    coils_f = make_coils(model.n_coils, fine_dims, **coil_kw)
    trajs = frame_trajectories(traj, model.n_frames) if isinstance(traj, nufft.Trajectory) else list(traj)
    p0 = model.plans[0]
    d = len(fine_dims)
    cache, plans = {}, []
    for tr in trajs:
        if id(tr) not in cache:
            cache[id(tr)] = nufft.plan(tr.points / factor, fine_dims, p0.sigma, p0.width)
        plans.append(cache[id(tr)])
    fine_model = ForwardModel(model.basis, coils_f, plans, [np.ones(plans[0].n_points)] * model.n_frames,
                              samples_per_arm=model.samples_per_arm)
    x_f = ground_truth_tsmi(fine, seq, model.basis, dictionary)
    y = fine_model.apply_forward(x_f)
    # coarse voxel x sits at physical p - 1/2, fine voxel at p - 1/(2 factor), in coarse units
    shift = 0.5 - 0.5 / factor
    phase = np.stack([np.exp(2j * np.pi * shift * tr.points.sum(axis=1)) for tr in trajs])
    y = y * phase / factor**d
    if noise_snr_db is not None:
        y = add_noise(y, noise_snr_db, np.random.default_rng(seed))
    return y, ground_truth_tsmi(make_phantom(spec), seq, model.basis, dictionary)


def kept_arms(L: int, R: int) -> np.ndarray:
    if R < 1:
        raise ValueError("R must be >= 1")
    if R > L:
        raise ValueError(f"acceleration R={R} exceeds the number of arms L={L}")
    return np.arange(0, L, R)


def undersample_trajectory(traj: nufft.Trajectory, R: int) -> nufft.Trajectory:
    """Keep arms 0, R, 2R, ... (labels are renumbered consecutively)."""
    arms = kept_arms(arm_count(traj), R)
    keep = np.isin(traj.arm_index, arms)
    relabel = np.searchsorted(arms, traj.arm_index[keep])
    return nufft.Trajectory(traj.points[keep], arm_index=relabel)


def undersample_kspace(y: np.ndarray, R: int, samples_per_arm: int) -> np.ndarray:
    """Same rule on (C, T, L*M) data."""
    C, T, P = y.shape
    L = P // samples_per_arm
    arms = kept_arms(L, R)
    return y.reshape(C, T, L, samples_per_arm)[:, :, arms].reshape(C, T, -1)


def undersample(model: ForwardModel, traj: nufft.Trajectory, y: np.ndarray, R: int, **plan_kw):
    """Accelerate both data and operator; returns ``(model_R, traj_R, y_R)``."""
    M = model.samples_per_arm
    traj_r = undersample_trajectory(traj, R)
    mask = np.zeros(arm_count(traj), dtype=bool)
    mask[kept_arms(arm_count(traj), R)] = True
    p0 = model.plans[0]
    plan_kw.setdefault("sigma", p0.sigma)
    plan_kw.setdefault("width", p0.width)
    model_r = build_model(traj_r, model.coils, model.basis, M, arm_mask=mask,
                          use_dcf_in_gram=model.use_dcf_in_gram, **plan_kw)
    return model_r, traj_r, undersample_kspace(y, R, M)
