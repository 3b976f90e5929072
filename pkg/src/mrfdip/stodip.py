"""Stochastic deep-image-prior reconstruction of the TSMI.

An untrained generator ``G`` maps a fixed initial estimate ``x0`` (a
classical reconstruction) to the TSMI.  Each epoch visits the coils in a
fresh random order and takes one Adam step per coil on

    L_c = || sqrt(DCF) (A_c G(x0) - y_c) ||^2  +  lambda * TV(G(x0)),

so the network sees C noisy gradient estimates per epoch.  The
full-gradient variant sums the coil gradients first and takes one step per
epoch.  Complex TSMI values travel through the network as ``2K`` real
channels, real parts first.
"""

from __future__ import annotations

import csv
import json
import logging
import os
import time
from dataclasses import asdict, dataclass, field

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from . import datastore, solvers
from ._validation import check_choice, check_kspace
from .forward import ForwardModel
from .neuralnet import Adam, Network, build_dipunet, build_drunet, check_divisible, tv_penalty
from .quant import CompressedDictionary, QMaps, dict_match, mape

log = logging.getLogger(__name__)

SCHEDULERS = ("fixed", "triangular", "adaptive")
INITIALIZERS = ("svdmrf", "lr-cg", "lr-tikh")
ARCHITECTURES = ("drunet", "dipunet")


@dataclass
class StodipConfig:
    """Training settings.

    ``lr_fixed`` defaults to ``lr_min``.  ``half_cycle`` is the length in
    epochs of each linear ramp of the triangular schedule and ``n_levels``
    the number of adaptive increments between the bounds.
    """

    max_epochs: int = 500
    lambda_tv: float = 0.0
    tv_epsilon: float = 1e-8
    scheduler: str = "triangular"
    lr_min: float = 1e-3
    lr_max: float = 1e-2
    lr_fixed: float | None = None
    half_cycle: int = 250
    n_levels: int = 250
    initializer: str = "lr-cg"
    init_iters: int = 30
    init_mu: float | None = None
    init_mu_scale: float = 1e-2
    seed: int = 0
    monitor_every: int = 5
    arch: str = "drunet"
    channels: tuple = (16, 32, 64, 128)
    n_res: int = 2
    upsample: str = "trilinear"
    checkpoint_every: int = 50

    def __post_init__(self):
        self.channels = tuple(int(c) for c in self.channels)
        self.validate()

    def validate(self):
        if int(self.max_epochs) < 1:
            raise ValueError("max_epochs must be >= 1")
        if not 0 < self.lr_min <= self.lr_max:
            raise ValueError(f"need 0 < lr_min <= lr_max, got {self.lr_min}, {self.lr_max}")
        if self.lambda_tv < 0:
            raise ValueError("lambda_tv must be >= 0")
        if self.tv_epsilon <= 0:
            raise ValueError("tv_epsilon must be > 0")
        if self.half_cycle < 1 or self.n_levels < 1:
            raise ValueError("half_cycle and n_levels must be >= 1")
        if self.monitor_every < 0 or self.checkpoint_every < 0:
            raise ValueError("monitor_every and checkpoint_every must be >= 0")
        check_choice(self.scheduler, SCHEDULERS, "scheduler")
        check_choice(self.initializer, INITIALIZERS, "initializer")
        check_choice(self.arch, ARCHITECTURES, "architecture")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["channels"] = ",".join(map(str, self.channels))
        return d


# --------------------------------------------------------------------------- schedulers


@dataclass
class SchedulerState:
    kind: str
    lr_min: float
    lr_max: float
    lr_fixed: float
    half_cycle: int = 250
    n_levels: int = 250
    lr: float = 0.0
    level: int = 0
    best_loss: float = float("inf")
    steps: int = 0

    @classmethod
    def from_config(cls, cfg: StodipConfig) -> "SchedulerState":
        fixed = cfg.lr_min if cfg.lr_fixed is None else cfg.lr_fixed
        st = cls(cfg.scheduler, cfg.lr_min, cfg.lr_max, fixed, cfg.half_cycle, cfg.n_levels)
        st.lr = scheduler_lr(st, 0)
        return st


def _triangular(st: SchedulerState, epoch: int) -> float:
    u = epoch % (2 * st.half_cycle)
    if u == 0:
        return st.lr_min
    if u == st.half_cycle:
        return st.lr_max
    frac = u / st.half_cycle if u < st.half_cycle else (2 * st.half_cycle - u) / st.half_cycle
    return st.lr_min + (st.lr_max - st.lr_min) * frac


def _level_lr(st: SchedulerState) -> float:
    if st.level >= st.n_levels:
        return st.lr_max
    return st.lr_min + (st.lr_max - st.lr_min) * st.level / st.n_levels


def scheduler_lr(st: SchedulerState, epoch: int) -> float:
    if st.kind == "fixed":
        return st.lr_fixed
    if st.kind == "triangular":
        return _triangular(st, epoch)
    return _level_lr(st)


def scheduler_step(st: SchedulerState, epoch: int, epoch_loss: float) -> float:
    """Advance after ``epoch`` (1-based) and return the learning rate for the next one.

    adaptive: one increment of ``(lr_max - lr_min) / n_levels`` when the
    epoch loss beats the best so far, one decrement otherwise, clamped to
    the bounds.
    """
    if st.kind == "adaptive":
        if epoch_loss < st.best_loss:
            st.best_loss = epoch_loss
            st.level = min(st.level + 1, st.n_levels)
        else:
            st.level = max(st.level - 1, 0)
    st.lr = scheduler_lr(st, epoch)
    st.steps += 1
    return st.lr


# --------------------------------------------------------------------------- data plumbing


def to_channels(x: np.ndarray, dtype=np.float32) -> np.ndarray:
    """(*grid, K) complex -> (1, 2K, *grid) real."""
    xm = np.moveaxis(x, -1, 0)
    return np.concatenate([xm.real, xm.imag])[None].astype(dtype)


def from_channels(t: np.ndarray) -> np.ndarray:
    """(1, 2K, *grid) real -> (*grid, K) complex128."""
    K = t.shape[1] // 2
    t = t[0].astype(np.float64)
    return np.moveaxis(t[:K] + 1j * t[K:], 0, -1)


@dataclass
class Initialization:
    x0: np.ndarray          # scaled TSMI, max |x0| = 1
    y: np.ndarray           # data scaled by the same factor
    scale: float
    kind: str


def make_initializer(model: ForwardModel, y, kind: str, n_iters: int = 30, mu: float | None = None,
                     mu_scale: float = 1e-2) -> Initialization:
    """Classical start point for the generator, jointly rescaled with the data."""
    if kind not in INITIALIZERS:
        raise ValueError(f"unsupported initializer {kind!r}; valid choices: {', '.join(INITIALIZERS)}")
    y = check_kspace(y, model)
    if kind == "svdmrf":
        x = solvers.recon_svdmrf(model, y)
    elif kind == "lr-cg":
        x, _ = solvers.recon_lr_cg(model, y, n_iters)
    else:
        if mu is None:
            mu = mu_scale * solvers.estimate_operator_norm(model)
        x, _ = solvers.recon_lr_tikh(model, y, mu, n_iters)
    peak = float(np.max(np.abs(x)))
    if not np.isfinite(peak) or peak == 0:
        raise solvers.NumericalError(f"{kind} initializer is identically zero or non-finite")
    s = 1.0 / peak
    x0 = x * s
    return Initialization(x0, y * s, s, kind)


def build_generator(cfg: StodipConfig, K: int, ndim: int) -> Network:
    if cfg.arch == "drunet":
        return build_drunet(2 * K, cfg.channels, cfg.n_res, ndim=ndim, seed=cfg.seed)
    return build_dipunet(2 * K, cfg.channels, cfg.upsample, ndim=ndim, seed=cfg.seed)


# --------------------------------------------------------------------------- history


@dataclass
class TrainHistory:
    step_epoch: list[int] = field(default_factory=list)
    step_coil: list[int] = field(default_factory=list)
    step_loss: list[float] = field(default_factory=list)
    epoch_loss: list[float] = field(default_factory=list)
    lr_trace: list[float] = field(default_factory=list)
    monitor_epoch: list[int] = field(default_factory=list)
    mape_t1: list[float] = field(default_factory=list)
    mape_t2: list[float] = field(default_factory=list)
    optimizer_steps: int = 0
    scheduler_steps: int = 0
    wall_time_s: float = 0.0

    @property
    def coil_steps(self) -> int:
        return len(self.step_loss)

    def write_csv(self, path):
        """One row per epoch: lr used, mean coil loss, monitored MAPEs (blank if absent)."""
        mon = {e: (a, b) for e, a, b in zip(self.monitor_epoch, self.mape_t1, self.mape_t2)}
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["epoch", "lr", "epoch_loss", "mape_t1", "mape_t2"])
            for e, loss in enumerate(self.epoch_loss, 1):
                a, b = mon.get(e, ("", ""))
                w.writerow([e, repr(self.lr_trace[e - 1]), repr(loss), repr(a) if a != "" else "",
                            repr(b) if b != "" else ""])

    def write_steps_csv(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["step", "epoch", "coil", "loss"])
            for i, (e, c, loss) in enumerate(zip(self.step_epoch, self.step_coil, self.step_loss), 1):
                w.writerow([i, e, c, repr(loss)])

    def to_state(self) -> dict:
        return asdict(self)

    @classmethod
    def from_state(cls, d: dict) -> "TrainHistory":
        return cls(**d)


@dataclass
class StodipResult:
    tsmi: np.ndarray
    history: TrainHistory
    scale: float
    network: Network
    init: Initialization


# --------------------------------------------------------------------------- monitoring


@dataclass
class Monitor:
    """Dictionary-matches the current estimate and scores T1/T2 against a reference."""

    dictionary: CompressedDictionary
    reference: QMaps
    every: int = 5

    def due(self, epoch: int) -> bool:
        return self.every > 0 and epoch % self.every == 0

    def __call__(self, x: np.ndarray) -> tuple[float, float]:
        q = dict_match(x, self.dictionary, mask=self.reference.mask)
        m = self.reference.mask
        return mape(q.t1_ms, self.reference.t1_ms, m), mape(q.t2_ms, self.reference.t2_ms, m)


# --------------------------------------------------------------------------- training


class _Trainer:
    def __init__(self, model: ForwardModel, y, cfg: StodipConfig, monitor: Monitor | None,
                 init: Initialization | None):
        cfg.validate()
        self.model = model
        self.cfg = cfg
        check_divisible(model.grid_dims, 2 ** (len(cfg.channels) - (1 if cfg.arch == "drunet" else 0)))
        self.init = init if init is not None else make_initializer(
            model, y, cfg.initializer, cfg.init_iters, cfg.init_mu, cfg.init_mu_scale)
        self.x_in = to_channels(self.init.x0)
        self.y = self.init.y
        self.w = model.dcf_array()
        self.net = build_generator(cfg, model.rank, len(model.grid_dims))
        self.opt = Adam(self.net.parameters())
        self.sched = SchedulerState.from_config(cfg)
        self.rng = np.random.default_rng(cfg.seed)
        self.hist = TrainHistory(lr_trace=[self.sched.lr])
        self.monitor = monitor
        self.epoch = 0

    # one coil's data term and its gradient w.r.t. the network output channels
    def coil_term(self, xhat: np.ndarray, c: int):
        r = self.model.apply_coil_forward(c, xhat) - self.y[c]
        loss = float(np.sum(self.w * (r.real**2 + r.imag**2)))
        g = 2.0 * self.model.apply_coil_adjoint(c, self.w * r)
        return loss, to_channels(g)

    def tv_term(self, out: np.ndarray, weight: float):
        if weight == 0:
            return 0.0, None
        val, g = tv_penalty(out, self.cfg.tv_epsilon)
        return weight * val, (weight * g).astype(out.dtype)

    def _check(self, loss, epoch, coil):
        if not np.isfinite(loss):
            raise solvers.NumericalError(f"non-finite loss at epoch {epoch}, coil {coil}")

    def run_epoch_stochastic(self, epoch: int, lr: float) -> float:
        losses = []
        for c in self.rng.permutation(self.model.n_coils):
            out = self.net.forward(self.x_in)
            loss, g = self.coil_term(from_channels(out), int(c))
            tv, gtv = self.tv_term(out, self.cfg.lambda_tv)
            loss += tv
            if gtv is not None:
                g = g + gtv
            self._check(loss, epoch, int(c))
            self.net.backward(g)
            self.opt.step(lr)
            self.hist.optimizer_steps += 1
            self.hist.step_epoch.append(epoch)
            self.hist.step_coil.append(int(c))
            self.hist.step_loss.append(loss)
            losses.append(loss)
        return float(np.mean(losses))

    def run_epoch_full(self, epoch: int, lr: float) -> float:
        order = self.rng.permutation(self.model.n_coils)
        out = self.net.forward(self.x_in)
        xhat = from_channels(out)
        tv, gtv = self.tv_term(out, self.cfg.lambda_tv)
        losses, g = [], None
        for c in order:
            loss, gc = self.coil_term(xhat, int(c))
            loss += tv
            self._check(loss, epoch, int(c))
            g = gc if g is None else g + gc
            losses.append(loss)
            self.hist.step_epoch.append(epoch)
            self.hist.step_coil.append(int(c))
            self.hist.step_loss.append(loss)
        if gtv is not None:
            # each coil term carries its own copy of the penalty
            g = g + len(order) * gtv
        self.net.backward(g)
        self.opt.step(lr)
        self.hist.optimizer_steps += 1
        return float(np.mean(losses))

    def current(self) -> np.ndarray:
        """Generator output in the original (unscaled) data units."""
        return from_channels(self.net.forward(self.x_in)) / self.init.scale

    def train(self, stochastic: bool, checkpoint_dir=None) -> StodipResult:
        t0 = time.perf_counter()
        run = self.run_epoch_stochastic if stochastic else self.run_epoch_full
        while self.epoch < self.cfg.max_epochs:
            e = self.epoch + 1
            ep_loss = run(e, self.sched.lr)
            self.hist.epoch_loss.append(ep_loss)
            self.hist.lr_trace.append(scheduler_step(self.sched, e, ep_loss))
            self.hist.scheduler_steps += 1
            self.epoch = e
            if self.monitor is not None and self.monitor.due(e):
                try:
                    a, b = self.monitor(self.current())
                    self.hist.monitor_epoch.append(e)
                    self.hist.mape_t1.append(a)
                    self.hist.mape_t2.append(b)
                except Exception as exc:           # monitoring is best effort
                    log.warning("monitor failed at epoch %d: %s", e, exc)
            if checkpoint_dir is not None and self.cfg.checkpoint_every and e % self.cfg.checkpoint_every == 0:
                save_checkpoint(self, os.path.join(checkpoint_dir, f"epoch_{e:04d}"))
            if e % 50 == 0 or e == self.cfg.max_epochs:
                log.info("epoch %d loss %.6g lr %.5g", e, ep_loss, self.sched.lr)
        self.hist.wall_time_s += time.perf_counter() - t0
        return StodipResult(self.current(), self.hist, self.init.scale, self.net, self.init)


def _trainer(model, y, cfg, reference, dictionary, init):
    monitor = None
    if reference is not None and dictionary is not None:
        monitor = Monitor(dictionary, reference, cfg.monitor_every)
    return _Trainer(model, y, cfg, monitor, init)


def run_stodip(model: ForwardModel, y, cfg: StodipConfig, reference: QMaps | None = None,
               dictionary: CompressedDictionary | None = None, checkpoint_dir=None,
               init: Initialization | None = None) -> StodipResult:
    """Per-coil stochastic training (one Adam step per coil, coils in random order).

    Parameters
    ----------
    model, y
        Forward operator and its ``(C, T, P)`` data.
    cfg : StodipConfig
    reference, dictionary
        When both are given, the estimate is dictionary-matched every
        ``cfg.monitor_every`` epochs and its T1/T2 MAPE recorded.
    checkpoint_dir : path, optional
        Receives ``epoch_NNNN`` checkpoints every ``cfg.checkpoint_every`` epochs.
    init : Initialization, optional
        Reuse a precomputed start point instead of running the initializer.
    """
    return _trainer(model, y, cfg, reference, dictionary, init).train(True, checkpoint_dir)


def run_fullgrad_dip(model: ForwardModel, y, cfg: StodipConfig, reference: QMaps | None = None,
                     dictionary: CompressedDictionary | None = None, checkpoint_dir=None,
                     init: Initialization | None = None) -> StodipResult:
    """Same objective, gradients summed over coils, one Adam step per epoch."""
    return _trainer(model, y, cfg, reference, dictionary, init).train(False, checkpoint_dir)


# --------------------------------------------------------------------------- checkpoints


def save_checkpoint(tr: _Trainer, directory):
    """Network, Adam moments, scheduler, RNG and history, enough to resume bit-exactly."""
    from .neuralnet import save_network

    save_network(tr.net, os.path.join(directory, "network"))
    os.makedirs(os.path.join(directory, "adam"), exist_ok=True)
    for name, arr in tr.opt.state().items():
        datastore.write_tensor(os.path.join(directory, "adam", f"{name}.mrft"), arr)
    state = {"epoch": tr.epoch, "adam_t": tr.opt.t, "scheduler": asdict(tr.sched),
             "rng": tr.rng.bit_generator.state, "history": tr.hist.to_state(), "scale": tr.init.scale}
    with open(os.path.join(directory, "state.json"), "w") as fh:
        json.dump(state, fh, default=float)


def resume(model: ForwardModel, y, cfg: StodipConfig, checkpoint, stochastic: bool = True,
           reference: QMaps | None = None, dictionary: CompressedDictionary | None = None,
           checkpoint_dir=None, init: Initialization | None = None) -> StodipResult:
    """Continue a run from a checkpoint directory up to ``cfg.max_epochs``."""
    tr = _trainer(model, y, cfg, reference, dictionary, init)
    with open(os.path.join(checkpoint, "state.json")) as fh:
        state = json.load(fh)
    params = tr.net.named_parameters()
    tr.net.load_state_dict({n: datastore.read_tensor(os.path.join(checkpoint, "network", f"{n}.mrft"))
                            for n in params})
    tr.opt.load_state({k: datastore.read_tensor(os.path.join(checkpoint, "adam", f"{k}.mrft"))
                       for k in tr.opt.state()}, state["adam_t"])
    tr.sched = SchedulerState(**state["scheduler"])
    tr.rng.bit_generator.state = state["rng"]
    tr.hist = TrainHistory.from_state(state["history"])
    tr.epoch = int(state["epoch"])
    return tr.train(stochastic, checkpoint_dir)


# --------------------------------------------------------------------------- estimator


class StoDIP(TransformerMixin, BaseEstimator):
    """Estimator wrapper: ``fit(y)`` trains and sets ``tsmi_`` and ``history_``.

    ``stochastic=False`` selects the full-gradient variant.  Any
    :class:`StodipConfig` field can be passed as a keyword argument.
    """

    def __init__(self, model=None, stochastic: bool = True, max_epochs: int = 500, lambda_tv: float = 0.0,
                 scheduler: str = "triangular", initializer: str = "lr-cg", seed: int = 0,
                 arch: str = "drunet", channels=(16, 32, 64, 128), n_res: int = 2):
        self.model = model
        self.stochastic = stochastic
        self.max_epochs = max_epochs
        self.lambda_tv = lambda_tv
        self.scheduler = scheduler
        self.initializer = initializer
        self.seed = seed
        self.arch = arch
        self.channels = channels
        self.n_res = n_res

    def _config(self) -> StodipConfig:
        return StodipConfig(max_epochs=self.max_epochs, lambda_tv=self.lambda_tv, scheduler=self.scheduler,
                            initializer=self.initializer, seed=self.seed, arch=self.arch,
                            channels=self.channels, n_res=self.n_res)

    def fit(self, y, _=None):
        run = run_stodip if self.stochastic else run_fullgrad_dip
        res = run(self.model, y, self._config())
        self.tsmi_, self.history_, self.scale_ = res.tsmi, res.history, res.scale
        return self

    def transform(self, y):
        return self.fit(y).tsmi_

    def fit_transform(self, y, _=None, **kw):
        return self.fit(y).tsmi_

    @property
    def result_(self):
        check_is_fitted(self, "tsmi_")
        return self.tsmi_
