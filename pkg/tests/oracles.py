"""Independent reference implementations used only by the tests."""

from __future__ import annotations

import numpy as np


def rotation(alpha: float, phase: float) -> np.ndarray:
    """Rodrigues rotation by ``alpha`` about the transverse axis at angle ``phase``."""
    n = np.array([np.cos(phase), np.sin(phase), 0.0])
    k = np.array([[0, -n[2], n[1]], [n[2], 0, -n[0]], [-n[1], n[0], 0]])
    return np.eye(3) + np.sin(alpha) * k + (1 - np.cos(alpha)) * (k @ k)


def isochromat_fingerprint(t1, t2, flips_deg, tr, te, ti, phase=-np.pi / 2, n_spins=2000,
                           inversion=True, efficiency=1.0):
    """Brute-force Bloch simulation of spins spread over one dephasing cycle per TR."""
    theta = 2 * np.pi * np.arange(n_spins) / n_spins
    m = np.zeros((3, n_spins))
    m[2] = 1.0
    if inversion:
        m[2] = 1 - 2 * efficiency
        ei = np.exp(-ti / t1)
        m[2] = m[2] * ei + (1 - ei)
    e1, e2 = np.exp(-tr / t1), np.exp(-tr / t2)
    rot = np.stack([np.cos(theta), -np.sin(theta), np.sin(theta), np.cos(theta)]).reshape(2, 2, -1)
    out = np.empty(len(flips_deg), complex)
    for t, a in enumerate(np.deg2rad(flips_deg)):
        m = rotation(a, phase) @ m
        out[t] = np.mean(m[0] + 1j * m[1]) * np.exp(-te / t2)
        m[:2] *= e2
        m[2] = m[2] * e1 + (1 - e1)
        m[:2] = np.einsum("ijn,jn->in", rot, m[:2])
    return out


def fisp_steady_state(alpha, tr, t1, t2):
    """Magnitude of the unbalanced-SSFP (FISP) F0 steady state right after the pulse."""
    e1, e2 = np.exp(-tr / t1), np.exp(-tr / t2)
    ca = np.cos(alpha)
    p = 1 - e1 * ca - e2**2 * (e1 - ca)
    q = e2 * (1 - e1) * (1 + ca)
    return abs(np.tan(alpha / 2) * (1 - (e1 - ca) * (1 - e2**2) / np.sqrt(p * p - q * q)))


def direct_dft_matrix(points, grid_dims) -> np.ndarray:
    """Dense type-2 DFT matrix with centered voxel indices."""
    axes = [np.arange(n) - n // 2 for n in grid_dims]
    coords = np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1).reshape(-1, len(grid_dims))
    return np.exp(-2j * np.pi * np.asarray(points) @ coords.T)


def materialize(apply, shape, dtype=np.complex128) -> np.ndarray:
    """Dense matrix of a linear map on arrays of ``shape`` (column j = apply(e_j))."""
    n = int(np.prod(shape))
    cols = []
    for j in range(n):
        e = np.zeros(n, dtype)
        e[j] = 1
        cols.append(np.asarray(apply(e.reshape(shape))).ravel())
    return np.stack(cols, axis=1)


def rel_dot_error(lhs, rhs) -> float:
    return abs(lhs - rhs) / max(abs(lhs), abs(rhs), 1e-300)


def central_gradient(f, x, h=1e-6):
    """Central-difference gradient of scalar ``f`` at real array ``x``."""
    g = np.zeros_like(x, dtype=np.float64)
    flat = x.reshape(-1)
    gf = g.reshape(-1)
    for i in range(flat.size):
        old = flat[i]
        flat[i] = old + h
        fp = f(x)
        flat[i] = old - h
        fm = f(x)
        flat[i] = old
        gf[i] = (fp - fm) / (2 * h)
    return g


def rel_error(a, b) -> float:
    a, b = np.asarray(a, float).ravel(), np.asarray(b, float).ravel()
    return float(np.linalg.norm(a - b) / max(np.linalg.norm(a), np.linalg.norm(b), 1e-300))
