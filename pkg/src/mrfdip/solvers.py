"""Classical ground-truth-free reconstructions of the TSMI.

All solvers work on the DCF-weighted least-squares objective
``0.5 * ||sqrt(W) (A x - y)||^2`` through :meth:`ForwardModel.gram_apply`
and :meth:`ForwardModel.normal_rhs`.
"""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from .forward import ForwardModel

log = logging.getLogger(__name__)


class NumericalError(RuntimeError):
    """A solver produced non-finite values or diverged."""


@dataclass
class SolverReport:
    method: str
    iterations: int = 0
    residual_history: list[float] = field(default_factory=list)
    loss_history: list[float] = field(default_factory=list)
    wall_time_s: float = 0.0
    converged: bool = False
    extra: dict = field(default_factory=dict)
    tsmi_path: str | None = None

    def to_text(self) -> str:
        lines = [f"method = {self.method}", f"iterations = {self.iterations}",
                 f"converged = {int(self.converged)}", f"wall_time_s = {self.wall_time_s:.3f}"]
        if self.residual_history:
            lines.append(f"final_relative_residual = {self.residual_history[-1]!r}")
        if self.loss_history:
            lines.append(f"final_loss = {self.loss_history[-1]!r}")
        lines += [f"{k} = {v!r}" for k, v in self.extra.items()]
        if self.tsmi_path:
            lines.append(f"tsmi = {self.tsmi_path}")
        return "\n".join(lines) + "\n"


def _dot(a, b) -> float:
    return float(np.vdot(a, b).real)


def _finite(x, what: str, it: int):
    if not np.all(np.isfinite(x)):
        raise NumericalError(f"non-finite values in {what} at iteration {it}")


def conjugate_gradient(apply, b, n_iters: int, tol: float = 1e-6, x0=None, method: str = "cg"):
    """Solve ``apply(x) = b`` for Hermitian PSD ``apply``.

    Returns ``(x, report)``; the history holds ``||r_i|| / ||b||`` for the
    initial residual and every iteration.
    """
    if n_iters < 1:
        raise ValueError("n_iters must be >= 1")
    t0 = time.perf_counter()
    x = np.zeros_like(b) if x0 is None else np.array(x0, dtype=b.dtype)
    r = b - apply(x) if x0 is not None else b.copy()
    p = r.copy()
    rr = _dot(r, r)
    bnorm = np.sqrt(_dot(b, b))
    report = SolverReport(method)
    if bnorm == 0:
        report.residual_history = [0.0]
        report.converged = True
        return x, report
    report.residual_history.append(np.sqrt(rr) / bnorm)
    for it in range(1, n_iters + 1):
        ap = apply(p)
        _finite(ap, "operator output", it)
        pap = _dot(p, ap)
        if pap <= 0:
            log.warning("CG stopped: non-positive curvature %g at iteration %d", pap, it)
            break
        alpha = rr / pap
        x += alpha * p
        r -= alpha * ap
        rr_new = _dot(r, r)
        report.iterations = it
        report.residual_history.append(np.sqrt(rr_new) / bnorm)
        if report.residual_history[-1] <= tol:
            report.converged = True
            break
        p = r + (rr_new / rr) * p
        rr = rr_new
    report.wall_time_s = time.perf_counter() - t0
    return x, report


def estimate_operator_norm(model: ForwardModel, n_iters: int = 30, seed: int = 0) -> float:
    """Largest eigenvalue of the (weighted) normal operator by power iteration."""
    rng = np.random.default_rng(seed)
    x = rng.standard_normal(model.tsmi_shape) + 1j * rng.standard_normal(model.tsmi_shape)
    x /= np.linalg.norm(x)
    lam = 0.0
    for _ in range(n_iters):
        gx = model.gram_apply(x)
        lam = np.linalg.norm(gx)
        if lam == 0:
            return 0.0
        x = gx / lam
    return float(lam)


def recon_svdmrf(model: ForwardModel, y) -> np.ndarray:
    """Density-compensated adjoint with the least-squares optimal global scale."""
    y = np.asarray(y)
    xt = model.apply_adjoint(y, weighted=True)
    if not np.any(y):
        return np.zeros(model.tsmi_shape, dtype=np.complex128)
    w = model.dcf_array()
    num = 0j
    den = 0.0
    for c in range(model.n_coils):
        ax = model.apply_coil_forward(c, xt)
        num += np.sum(w * ax.conj() * y[c])
        den += np.sum(w * np.abs(ax) ** 2)
    if den == 0:
        raise NumericalError("degenerate adjoint: A(A^H W y) vanishes")
    s = num / den
    return s.real * xt if abs(s.imag) <= 1e-12 * abs(s) else s * xt


def recon_lr_cg(model: ForwardModel, y, n_iters: int = 30, tol: float = 1e-6):
    """CG on the normal equations, cold start at zero."""
    return recon_lr_tikh(model, y, 0.0, n_iters, tol, _method="lr-cg")


def recon_lr_tikh(model: ForwardModel, y, mu: float, n_iters: int = 30, tol: float = 1e-6,
                  _method: str = "lr-tikh"):
    """CG on ``(A^H W A + mu I) x = A^H W y``."""
    if mu < 0:
        raise ValueError("mu must be >= 0")
    b = model.normal_rhs(y)
    x, report = conjugate_gradient(lambda v: model.gram_apply(v, mu), b, n_iters, tol, method=_method)
    report.extra["mu"] = mu
    return x, report


# --------------------------------------------------------------------------- TV


def _grad(x, axes):
    out = []
    for ax in axes:
        g = np.zeros_like(x)
        sl_hi = [slice(None)] * x.ndim
        sl_lo = [slice(None)] * x.ndim
        sl_hi[ax] = slice(1, None)
        sl_lo[ax] = slice(None, -1)
        g[tuple(sl_lo)] = x[tuple(sl_hi)] - x[tuple(sl_lo)]
        out.append(g)
    return np.stack(out)


def _div(p, axes):
    """Negative adjoint of :func:`_grad`."""
    out = np.zeros_like(p[0])
    for i, ax in enumerate(axes):
        q = p[i]
        n = q.shape[ax]
        d = np.zeros_like(q)
        first = [slice(None)] * q.ndim
        first[ax] = slice(0, 1)
        mid = [slice(None)] * q.ndim
        mid[ax] = slice(1, n - 1)
        prev = [slice(None)] * q.ndim
        prev[ax] = slice(0, n - 2)
        last = [slice(None)] * q.ndim
        last[ax] = slice(n - 1, n)
        before_last = [slice(None)] * q.ndim
        before_last[ax] = slice(n - 2, n - 1)
        d[tuple(first)] = q[tuple(first)]
        d[tuple(mid)] = q[tuple(mid)] - q[tuple(prev)]
        d[tuple(last)] = -q[tuple(before_last)]
        out += d
    return out


def tv_norm(x, spatial_axes) -> float:
    """Isotropic TV summed over channels (complex modulus of the gradient)."""
    g = _grad(x, spatial_axes)
    return float(np.sum(np.sqrt(np.sum(np.abs(g) ** 2, axis=0))))


def tv_prox(v, theta: float, spatial_axes, n_iters: int = 10, p0=None):
    """Chambolle's dual projection for ``argmin 0.5||z - v||^2 + theta TV(z)``.

    Returns ``(z, p)`` so the dual variable can warm-start the next call.
    """
    axes = tuple(spatial_axes)
    p = np.zeros((len(axes),) + v.shape, dtype=v.dtype) if p0 is None else p0
    if theta <= 0:
        return v.copy(), p
    tau = 1.0 / (4 * len(axes))
    for _ in range(n_iters):
        g = _grad(_div(p, axes) - v / theta, axes)
        p = (p + tau * g) / (1 + tau * np.sqrt(np.sum(np.abs(g) ** 2, axis=0)))
    return v - theta * _div(p, axes), p


def recon_lrtv(model: ForwardModel, y, lambda_tv: float, n_iters: int = 100, inner_iters: int = 10,
               lipschitz: float | None = None, x0=None, seed: int = 0):
    """Monotone FISTA on ``0.5||sqrt(W)(Ax - y)||^2 + lambda_tv * TV(x)``.

    Step ``1/L`` with ``L`` from 30 power iterations unless given.  Aborts
    with :class:`NumericalError` when the candidate objective rises for five
    consecutive iterations.
    """
    if lambda_tv < 0:
        raise ValueError("lambda_tv must be >= 0")
    t_start = time.perf_counter()
    axes = tuple(range(len(model.grid_dims)))
    L = estimate_operator_norm(model, 30, seed) if lipschitz is None else lipschitz
    if L <= 0:
        raise NumericalError("operator norm estimate is zero")
    b = model.normal_rhs(y)
    w = model.dcf_array() if model.use_dcf_in_gram else 1.0
    const = 0.5 * float(sum(np.sum(w * np.abs(y[c]) ** 2) for c in range(model.n_coils)))

    def objective(x, gx):
        return 0.5 * _dot(x, gx) - _dot(x, b) + const + lambda_tv * tv_norm(x, axes)

    x = np.zeros(model.tsmi_shape, np.complex128) if x0 is None else np.array(x0, np.complex128)
    gx = model.gram_apply(x)
    fx = objective(x, gx)
    report = SolverReport("lrtv", loss_history=[fx], extra={"lambda_tv": lambda_tv, "lipschitz": L})
    x_prev, gx_prev = x.copy(), gx.copy()
    yk, gyk = x.copy(), gx.copy()
    t = 1.0
    p = None
    rises = 0
    f_cand_prev = fx
    for it in range(1, n_iters + 1):
        z, p = tv_prox(yk - (gyk - b) / L, lambda_tv / L, axes, inner_iters, p)
        gz = model.gram_apply(z)
        _finite(gz, "operator output", it)
        fz = objective(z, gz)
        rises = rises + 1 if fz > f_cand_prev else 0
        f_cand_prev = fz
        if rises >= 5:
            report.iterations = it
            report.wall_time_s = time.perf_counter() - t_start
            raise NumericalError(f"LRTV diverging: objective rose 5 consecutive iterations "
                                 f"(iteration {it}, loss {fz:.6g})")
        t_next = 0.5 * (1 + np.sqrt(1 + 4 * t * t))
        x_prev, gx_prev = x, gx
        if fz <= fx:
            x, gx, fx = z, gz, fz
        a, c = t / t_next, (t - 1) / t_next
        yk = x + a * (z - x) + c * (x - x_prev)
        gyk = gx + a * (gz - gx) + c * (gx - gx_prev)
        t = t_next
        report.loss_history.append(fx)
        report.iterations = it
    report.wall_time_s = time.perf_counter() - t_start
    return x, report


# --------------------------------------------------------------------------- estimators


class _Reconstructor(TransformerMixin, BaseEstimator):
    """``fit(y)`` solves for the TSMI (``tsmi_``); ``transform(y)`` refits and returns it."""

    def transform(self, y):
        return self.fit(y).tsmi_

    def fit_transform(self, y, _=None, **kw):
        return self.fit(y).tsmi_

    def _done(self):
        check_is_fitted(self, "tsmi_")
        return self.tsmi_


class SVDMRF(_Reconstructor):
    def __init__(self, model=None):
        self.model = model

    def fit(self, y, _=None):
        t0 = time.perf_counter()
        self.tsmi_ = recon_svdmrf(self.model, y)
        self.report_ = SolverReport("svdmrf", wall_time_s=time.perf_counter() - t0, converged=True)
        return self


class LowRankCG(_Reconstructor):
    def __init__(self, model=None, n_iters: int = 30, tol: float = 1e-6):
        self.model = model
        self.n_iters = n_iters
        self.tol = tol

    def fit(self, y, _=None):
        self.tsmi_, self.report_ = recon_lr_cg(self.model, y, self.n_iters, self.tol)
        return self


class LowRankTikhonov(_Reconstructor):
    """``mu=None`` uses ``mu_scale`` times the estimated normal-operator norm."""

    def __init__(self, model=None, mu: float | None = None, mu_scale: float = 1e-2, n_iters: int = 30,
                 tol: float = 1e-6):
        self.model = model
        self.mu = mu
        self.mu_scale = mu_scale
        self.n_iters = n_iters
        self.tol = tol

    def fit(self, y, _=None):
        mu = self.mu if self.mu is not None else self.mu_scale * estimate_operator_norm(self.model)
        self.mu_ = mu
        self.tsmi_, self.report_ = recon_lr_tikh(self.model, y, mu, self.n_iters, self.tol)
        return self


class LRTV(_Reconstructor):
    def __init__(self, model=None, lambda_tv: float = 1e-3, n_iters: int = 100, inner_iters: int = 10):
        self.model = model
        self.lambda_tv = lambda_tv
        self.n_iters = n_iters
        self.inner_iters = inner_iters

    def fit(self, y, _=None):
        self.tsmi_, self.report_ = recon_lrtv(self.model, y, self.lambda_tv, self.n_iters, self.inner_iters)
        return self
