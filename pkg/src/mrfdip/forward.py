"""The MRF acquisition operator: subspace expansion, coil weighting, per-frame NUFFT.

Shapes
------
TSMI        ``(*grid, K)`` complex subspace coefficients.
coil data   ``(T, P)`` complex, P = active arms x samples per arm, so that the
            flat index is ``(t * L_active + l) * M + m``.
k-space     ``(C, T, P)`` internally; :func:`to_kspace_array` gives the
            ``(C, M, L, T)`` on-disk layout.

Frame images are ``sum_k x_k * conj(V[t, k])`` (the ``decompress``
convention).  Frames that share a plan and weights are processed together:
the K coefficient images are transformed once and contracted with V.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import nufft
from .subspace import SubspaceBasis


@dataclass
class CoilSet:
    sensitivities: np.ndarray
    labels: list = field(default=None)

    def __post_init__(self):
        self.sensitivities = np.asarray(self.sensitivities, dtype=np.complex128)
        if self.labels is None:
            self.labels = [f"coil{c}" for c in range(self.n_coils)]
        if not np.all(np.isfinite(self.sensitivities)):
            raise ValueError("coil sensitivities must be finite")

    @property
    def n_coils(self) -> int:
        return self.sensitivities.shape[0]

    @property
    def grid_dims(self) -> tuple[int, ...]:
        return self.sensitivities.shape[1:]

    def sum_of_squares(self) -> np.ndarray:
        return np.sqrt(np.sum(np.abs(self.sensitivities) ** 2, axis=0))


@dataclass
class _FrameGroup:
    plan: nufft.NufftPlan
    weights: np.ndarray
    frames: np.ndarray
    v: np.ndarray        # V[frames], (nt, K)
    mix: np.ndarray      # V[frames]^T conj(V[frames]), (K, K)


class ForwardModel:
    """Linear operator ``A = {A_c}`` from TSMI to multicoil k-space.

    Parameters
    ----------
    basis : SubspaceBasis
        Temporal basis; ``basis.v`` is T x K.
    coils : CoilSet
    plans : NufftPlan or list of NufftPlan
        One shared plan or one per frame (objects may repeat).
    dcf : array or list of arrays
        Density weights matching each plan's sample count.
    arm_mask : bool array, optional
        Which acquired arms are active (bookkeeping for undersampling).
    use_dcf_in_gram : bool
        Weight the normal operator by the DCF (default True).
    """

    def __init__(self, basis: SubspaceBasis, coils: CoilSet, plans, dcf, arm_mask=None,
                 samples_per_arm: int | None = None, use_dcf_in_gram: bool = True):
        self.basis = basis
        self.coils = coils
        T, K = basis.v.shape
        if isinstance(plans, nufft.NufftPlan):
            plans = [plans] * T
        if len(plans) != T:
            raise ValueError(f"need one plan per frame: got {len(plans)} plans for T={T}")
        if isinstance(dcf, (np.ndarray, nufft.DensityCompensation)):
            dcf = [dcf] * T
        if len(dcf) != T:
            raise ValueError(f"need one DCF per frame: got {len(dcf)} for T={T}")
        dcf = [np.asarray(d.weights if isinstance(d, nufft.DensityCompensation) else d, dtype=float)
               for d in dcf]
        P = plans[0].n_points
        for t, (p, w) in enumerate(zip(plans, dcf)):
            if p.grid_dims != coils.grid_dims:
                raise ValueError(f"frame {t}: plan grid {p.grid_dims} != coil grid {coils.grid_dims}")
            if p.n_points != P:
                raise ValueError(f"frame {t}: {p.n_points} samples, expected {P} (uniform per frame)")
            if w.shape != (P,):
                raise ValueError(f"frame {t}: DCF length {w.shape} does not match {P} samples")
        self.plans = list(plans)
        self.dcf = dcf
        self.n_points = P
        self.samples_per_arm = samples_per_arm
        self.arm_mask = None if arm_mask is None else np.asarray(arm_mask, dtype=bool)
        self.use_dcf_in_gram = use_dcf_in_gram

        groups: dict[tuple[int, int], list[int]] = {}
        for t in range(T):
            groups.setdefault((id(self.plans[t]), id(self.dcf[t])), []).append(t)
        V = basis.v
        self._groups = []
        for frames in groups.values():
            frames = np.asarray(frames)
            vg = V[frames]
            self._groups.append(_FrameGroup(self.plans[frames[0]], self.dcf[frames[0]], frames, vg,
                                            vg.T @ vg.conj()))

    # -- shapes ---------------------------------------------------------------
    @property
    def grid_dims(self) -> tuple[int, ...]:
        return self.coils.grid_dims

    @property
    def n_coils(self) -> int:
        return self.coils.n_coils

    @property
    def n_frames(self) -> int:
        return self.basis.v.shape[0]

    @property
    def rank(self) -> int:
        return self.basis.v.shape[1]

    @property
    def tsmi_shape(self) -> tuple[int, ...]:
        return self.grid_dims + (self.rank,)

    @property
    def kspace_shape(self) -> tuple[int, int, int]:
        return (self.n_coils, self.n_frames, self.n_points)

    def dcf_array(self) -> np.ndarray:
        """(T, P) density weights."""
        return np.stack(self.dcf)

    def _coef_images(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x)
        if x.shape != self.tsmi_shape:
            raise ValueError(f"TSMI shape {x.shape} does not match model {self.tsmi_shape}")
        return np.moveaxis(x, -1, 0)

    def _check_coil(self, c: int):
        if not 0 <= c < self.n_coils:
            raise IndexError(f"coil index {c} out of range for C={self.n_coils}")

    # -- per coil -------------------------------------------------------------
    def apply_coil_forward(self, c: int, x) -> np.ndarray:
        """``A_c x`` as a (T, P) array."""
        self._check_coil(c)
        xk = self._coef_images(x) * self.coils.sensitivities[c]
        out = np.empty((self.n_frames, self.n_points), dtype=np.complex128)
        for g in self._groups:
            if len(g.frames) >= self.rank:
                yk = nufft.forward(g.plan, xk)                       # (K, P)
                out[g.frames] = g.v.conj() @ yk
            else:
                imgs = np.tensordot(g.v.conj(), xk, axes=(1, 0))   # (nt, *grid)
                out[g.frames] = nufft.forward(g.plan, imgs)
        return out

    def apply_coil_adjoint(self, c: int, y_c, weighted: bool = False) -> np.ndarray:
        """``A_c^H (W y_c)`` with ``W = diag(DCF)`` if ``weighted`` else identity."""
        self._check_coil(c)
        y_c = np.asarray(y_c)
        if y_c.shape != (self.n_frames, self.n_points):
            y_c = y_c.reshape(self.n_frames, self.n_points)
        acc = np.zeros((self.rank,) + self.grid_dims, dtype=np.complex128)
        for g in self._groups:
            yg = y_c[g.frames]
            if weighted:
                yg = yg * g.weights
            if len(g.frames) >= self.rank:
                acc += nufft.adjoint(g.plan, g.v.T @ yg)
            else:
                imgs = nufft.adjoint(g.plan, yg)                    # (nt, *grid)
                acc += np.tensordot(g.v.T, imgs, axes=(1, 0))
        acc *= self.coils.sensitivities[c].conj()
        return np.moveaxis(acc, 0, -1)

    def coil_gram(self, c: int, x, weighted: bool = True) -> np.ndarray:
        """``A_c^H W A_c x`` without forming the (T, P) intermediate."""
        self._check_coil(c)
        s = self.coils.sensitivities[c]
        xk = self._coef_images(x) * s
        acc = np.zeros_like(xk)
        for g in self._groups:
            if len(g.frames) >= self.rank:
                yk = nufft.forward(g.plan, xk)
                if weighted:
                    yk = yk * g.weights
                acc += nufft.adjoint(g.plan, g.mix @ yk)
            else:
                imgs = np.tensordot(g.v.conj(), xk, axes=(1, 0))
                yt = nufft.forward(g.plan, imgs)
                if weighted:
                    yt = yt * g.weights
                acc += np.tensordot(g.v.T, nufft.adjoint(g.plan, yt), axes=(1, 0))
        return np.moveaxis(acc * s.conj(), 0, -1)

    # -- all coils -----------------------------------------------------------
    def apply_forward(self, x) -> np.ndarray:
        return np.stack([self.apply_coil_forward(c, x) for c in range(self.n_coils)])

    def apply_adjoint(self, y, weighted: bool = False) -> np.ndarray:
        y = np.asarray(y)
        if y.shape[0] != self.n_coils:
            raise ValueError(f"k-space has {y.shape[0]} coils, model has {self.n_coils}")
        out = self.apply_coil_adjoint(0, y[0], weighted)
        for c in range(1, self.n_coils):
            out += self.apply_coil_adjoint(c, y[c], weighted)
        return out

    def gram_apply(self, x, tikhonov_mu: float = 0.0) -> np.ndarray:
        """``A^H W A x + mu x`` (W = DCF unless the model disables it)."""
        if tikhonov_mu < 0:
            raise ValueError("tikhonov_mu must be >= 0")
        out = self.coil_gram(0, x, self.use_dcf_in_gram)
        for c in range(1, self.n_coils):
            out += self.coil_gram(c, x, self.use_dcf_in_gram)
        if tikhonov_mu:
            out += tikhonov_mu * np.asarray(x)
        return out

    def normal_rhs(self, y) -> np.ndarray:
        """Right-hand side ``A^H W y`` matching :meth:`gram_apply`."""
        return self.apply_adjoint(y, weighted=self.use_dcf_in_gram)

    def weighted_residual_norm2(self, x, y) -> float:
        """``||sqrt(DCF) (A x - y)||^2``."""
        w = self.dcf_array()
        return float(sum(np.sum(w * np.abs(self.apply_coil_forward(c, x) - y[c]) ** 2)
                         for c in range(self.n_coils)))


def to_kspace_array(y: np.ndarray, samples_per_arm: int) -> np.ndarray:
    """(C, T, L*M) -> (C, M, L, T)."""
    C, T, P = y.shape
    L = P // samples_per_arm
    return y.reshape(C, T, L, samples_per_arm).transpose(0, 3, 2, 1)


def from_kspace_array(arr: np.ndarray) -> np.ndarray:
    """(C, M, L, T) -> (C, T, L*M)."""
    C, M, L, T = arr.shape
    return np.ascontiguousarray(arr.transpose(0, 3, 2, 1)).reshape(C, T, L * M)
