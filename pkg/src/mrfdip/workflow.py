"""Pipeline stages on disk: phantom, dictionary, simulated dataset, recon, match, eval.

Every stage takes a flat ``key -> value`` configuration (strings allowed),
fills defaults, rejects unknown keys and writes ``resolved-config.txt``
next to its outputs.
"""

from __future__ import annotations

import csv
import logging
import os
import time
from dataclasses import dataclass, fields
from pathlib import Path

import numpy as np

from . import acquisim, datastore, epg, nufft, quant, solvers, stodip, subspace
from .forward import CoilSet, ForwardModel, from_kspace_array, to_kspace_array

log = logging.getLogger(__name__)

METHODS = ("svdmrf", "lr-cg", "lr-tikh", "lrtv", "stodip", "stodip-tv")

# desk value of the TV weight for the stodip-tv method (data are rescaled so max|x0| = 1)
DESK_LAMBDA_TV = 0.5


class ConfigError(ValueError):
    """Bad configuration: unknown key, unparsable value, missing input."""


# --------------------------------------------------------------------------- configuration


def _tuple3(text):
    vals = tuple(float(v) for v in str(text).split(","))
    if len(vals) != 3:
        raise ValueError("expected T1,T2,PD")
    return vals


def _optional_float(text):
    return None if str(text).lower() in ("none", "auto", "") else float(text)


def _ints(text):
    return tuple(int(v) for v in str(text).replace("x", ",").split(","))


def _floats_or_desk(text):
    return "desk" if str(text) == "desk" else tuple(float(v) for v in str(text).split(","))


def _flag(text):
    if isinstance(text, bool):
        return text
    s = str(text).lower()
    if s in ("1", "true", "yes", "on"):
        return True
    if s in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


PHANTOM_KEYS = {
    "grid": (_ints, "64,64"), "texture": (float, 0.1), "edge_sigma": (float, 0.5), "seed": (int, 0),
    "wm": (_tuple3, "800,80,0.7"), "gm": (_tuple3, "1200,100,0.85"), "csf": (_tuple3, "4000,1800,1.0"),
}
DICT_KEYS = {
    "n_pulses": (int, 200), "peak_deg": (float, 70.0), "tr_ms": (float, 10.5), "te_ms": (float, 2.0),
    "ti_ms": (float, 18.0), "t1_grid": (_floats_or_desk, "desk"), "t2_grid": (_floats_or_desk, "desk"),
    "K": (int, 5),
}
SIM_KEYS = {
    "C": (int, 4), "M": (int, 256), "L": (int, 8), "turns": (float, 4.0), "sigma": (float, 2.0),
    "width": (int, 6), "dcf_iters": (int, 20), "noise_snr_db": (_optional_float, "none"), "seed": (int, 0),
    "golden_angle": (_flag, 0), "honest": (_flag, 0), "coil_width": (float, 0.9),
    "coil_phase_cycles": (float, 0.5),
}
RECON_KEYS = {
    "R": (int, 1), "cg_iters": (int, 30), "tol": (float, 1e-6), "mu": (_optional_float, "auto"),
    "mu_scale": (float, 1e-2), "lrtv_lambda": (float, 1e-3), "lrtv_iters": (int, 100),
    "lrtv_inner": (int, 10), "max_epochs": (int, 500), "lambda_tv": (_optional_float, "auto"),
    "tv_epsilon": (float, 1e-8), "scheduler": (str, "triangular"), "lr_min": (float, 1e-3),
    "lr_max": (float, 1e-2), "lr_fixed": (_optional_float, "none"), "half_cycle": (int, 250),
    "n_levels": (int, 250), "initializer": (str, "lr-cg"), "seed": (int, 0), "monitor_every": (int, 5),
    "arch": (str, "drunet"), "channels": (_ints, "16,32,64,128"), "n_res": (int, 2),
    "upsample": (str, "trilinear"), "checkpoint_every": (int, 50), "stochastic": (_flag, 1),
}
BENCH_KEYS = {
    "grid": (_ints, "64,64"), "points": (int, 2000), "sigma": (float, 2.0), "widths": (_ints, "2,4,6"),
    "repeats": (int, 5), "seed": (int, 0),
}


def resolve(spec: dict, overrides: dict | None, stage: str) -> dict:
    """Parse ``overrides`` against ``spec`` (key -> (parser, default))."""
    overrides = dict(overrides or {})
    unknown = sorted(set(overrides) - set(spec))
    if unknown:
        raise ConfigError(f"unknown {stage} key(s): {', '.join(unknown)}; valid keys: {', '.join(sorted(spec))}")
    out = {}
    for key, (parse, default) in spec.items():
        raw = overrides.get(key, default)
        try:
            out[key] = parse(raw) if isinstance(raw, str) or parse in (_flag,) else raw
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"{stage} key {key}: cannot parse {raw!r} ({exc})") from None
    return out


def _fmt(v):
    if v is None:
        return "none"
    if isinstance(v, bool):
        return str(int(v))
    if isinstance(v, (tuple, list)):
        return ",".join(_fmt(x) for x in v)
    if isinstance(v, float):
        return repr(v)
    return str(v)


def write_resolved(out_dir, values: dict, header: str):
    os.makedirs(out_dir, exist_ok=True)
    datastore.write_config(Path(out_dir) / "resolved-config.txt", {k: _fmt(v) for k, v in values.items()},
                           header=header)


# --------------------------------------------------------------------------- phantom


def phantom_spec(cfg: dict) -> acquisim.PhantomSpec:
    regions = acquisim.brain_regions(len(cfg["grid"]), wm=cfg["wm"], gm=cfg["gm"], csf=cfg["csf"])
    return acquisim.PhantomSpec(cfg["grid"], regions, cfg["texture"], cfg["seed"], cfg["edge_sigma"])


def make_phantom_dir(out_dir, overrides=None) -> acquisim.Phantom:
    """Write ``ref_qmaps``, ``mask`` and partial-volume ``fractions`` tensors."""
    cfg = resolve(PHANTOM_KEYS, overrides, "phantom")
    ph = acquisim.make_phantom(phantom_spec(cfg))
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    datastore.write_tensor(out / "ref_qmaps.mrft", ph.stack())
    datastore.write_tensor(out / "mask.mrft", ph.mask.astype(np.float32))
    datastore.write_tensor(out / "eval_mask.mrft", evaluation_mask(ph).astype(np.float32))
    datastore.write_tensor(out / "fractions.mrft", ph.fractions)
    datastore.write_config(out / "phantom.txt", {k: _fmt(v) for k, v in cfg.items()})
    write_resolved(out, {"subcommand": "phantom", **cfg}, "phantom")
    return ph


def evaluation_mask(ph: acquisim.Phantom, purity: float = 0.9) -> np.ndarray:
    """Masked voxels whose dominant tissue fills at least ``purity`` of the voxel."""
    return ph.mask & (ph.fractions.max(axis=0) >= purity)


def load_phantom_dir(path) -> tuple[acquisim.Phantom, dict]:
    path = Path(path)
    if not (path / "phantom.txt").is_file():
        raise ConfigError(f"{path} is not a phantom directory (no phantom.txt)")
    cfg = resolve(PHANTOM_KEYS, datastore.read_config(path / "phantom.txt"), "phantom")
    return acquisim.make_phantom(phantom_spec(cfg)), cfg


# --------------------------------------------------------------------------- dictionary


def sequence_from(cfg: dict) -> epg.SequenceParams:
    return epg.SequenceParams(epg.default_flip_train(cfg["n_pulses"], cfg["peak_deg"]), cfg["tr_ms"],
                              cfg["te_ms"], cfg["ti_ms"])


def make_dictionary_dir(out_dir, overrides=None):
    """Dictionary, SVD basis and flip-angle train."""
    cfg = resolve(DICT_KEYS, overrides, "dict")
    seq = sequence_from(cfg)
    t1 = epg.DESK_T1_GRID if cfg["t1_grid"] == "desk" else cfg["t1_grid"]
    t2 = epg.DESK_T2_GRID if cfg["t2_grid"] == "desk" else cfg["t2_grid"]
    t0 = time.perf_counter()
    d = epg.build_dictionary(t1, t2, seq)
    basis = subspace.compute_basis(d, cfg["K"])
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    epg.save_dictionary(out / "dictionary.mrft", d)
    subspace.save_basis(out / "basis.mrft", basis)
    datastore.write_tensor(out / "flip_angles.mrft", seq.flip_angles_deg.astype(np.float64))
    datastore.write_config(out / "sequence.txt", {k: _fmt(v) for k, v in cfg.items()})
    write_resolved(out, {"subcommand": "dict", **cfg, "n_atoms": d.atoms.shape[0],
                         "energy_captured": basis.energy_captured}, "dict")
    log.info("dictionary: %d atoms in %.2fs, energy %.6f", d.atoms.shape[0], time.perf_counter() - t0,
             basis.energy_captured)
    return d, basis, seq


def load_dictionary_dir(path):
    path = Path(path)
    if not (path / "sequence.txt").is_file():
        raise ConfigError(f"{path} is not a dictionary directory (no sequence.txt)")
    cfg = resolve(DICT_KEYS, datastore.read_config(path / "sequence.txt"), "dict")
    return (epg.load_dictionary(path / "dictionary.mrft"), subspace.load_basis(path / "basis.mrft"),
            sequence_from(cfg), cfg)


# --------------------------------------------------------------------------- simulation


def simulate_dataset(out_dir, phantom_dir, dict_dir, overrides=None) -> datastore.DatasetManifest:
    """Synthesize multicoil k-space and write a complete manifest directory."""
    cfg = resolve(SIM_KEYS, overrides, "simulate")
    ph, pcfg = load_phantom_dir(phantom_dir)
    d, basis, seq, dcfg = load_dictionary_dir(dict_dir)
    grid = ph.shape
    traj = acquisim.make_spiral(cfg["M"], cfg["L"], grid, cfg["turns"])
    L_total = acquisim.arm_count(traj)
    coil_kw = dict(seed=cfg["seed"], width=cfg["coil_width"], phase_cycles=cfg["coil_phase_cycles"])
    coils = acquisim.make_coils(cfg["C"], grid, **coil_kw)
    frames = acquisim.frame_trajectories(traj, seq.n_pulses, cfg["golden_angle"])
    model = acquisim.build_model(frames if cfg["golden_angle"] else traj, coils, basis, cfg["M"],
                                 cfg["sigma"], cfg["width"], cfg["dcf_iters"])
    if cfg["honest"]:
        y, x_gt = acquisim.simulate_kspace_fine(phantom_spec(pcfg), seq, model, frames, coil_kw, d,
                                                cfg["noise_snr_db"], cfg["seed"])
    else:
        y, x_gt = acquisim.simulate_kspace(ph, seq, model, d, cfg["noise_snr_db"], cfg["seed"])

    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    M, C, T = cfg["M"], cfg["C"], seq.n_pulses
    w = lambda name, arr: datastore.write_tensor(out / f"{name}.mrft", arr)
    w("kspace", to_kspace_array(y, M))
    if cfg["golden_angle"]:
        w("trajectory", np.stack([f.points.reshape(L_total, M, -1) for f in frames]))
        w("dcf", model.dcf_array().reshape(T, L_total, M))
    else:
        w("trajectory", traj.points.reshape(L_total, M, -1))
        w("dcf", model.dcf[0].reshape(L_total, M))
    w("coils", coils.sensitivities)
    w("basis", basis.v)
    epg.save_dictionary(out / "dictionary.mrft", d)
    w("flip_angles", seq.flip_angles_deg.astype(np.float64))
    w("ref_qmaps", ph.stack())
    w("mask", ph.mask.astype(np.float32))
    w("eval_mask", evaluation_mask(ph).astype(np.float32))
    w("ref_tsmi", x_gt)
    extra = {"nufft_sigma": cfg["sigma"], "nufft_width": cfg["width"], "dcf_iters": cfg["dcf_iters"],
             "eval_mask": "eval_mask.mrft", "honest": int(cfg["honest"]),
             "noise_snr_db": _fmt(cfg["noise_snr_db"]), "seed": cfg["seed"]}
    paths = {k: out / f"{k}.mrft" for k in ("kspace", "trajectory", "coils", "dcf", "basis", "dictionary",
                                             "flip_angles", "ref_qmaps", "mask", "ref_tsmi")}
    man = datastore.DatasetManifest(out, paths, C, M, L_total, T, basis.rank, tuple(grid), seq.tr_ms, seq.te_ms,
                                    seq.ti_ms, extra={k: _fmt(v) for k, v in extra.items()})
    datastore.write_manifest(out / "manifest.txt", man)
    write_resolved(out, {"subcommand": "simulate", "phantom": phantom_dir, "dict": dict_dir, **cfg}, "simulate")
    return datastore.load_manifest(out / "manifest.txt")


@dataclass
class Dataset:
    manifest: datastore.DatasetManifest
    model: ForwardModel
    y: np.ndarray                       # (C, T, P)
    trajectory: object                  # Trajectory or per-frame list
    dictionary: epg.Dictionary
    basis: subspace.SubspaceBasis
    reference: quant.QMaps | None
    eval_mask: np.ndarray | None


def load_dataset(manifest_path, R: int = 1) -> Dataset:
    """Rebuild the forward model from a manifest, optionally keeping every R-th arm."""
    man = datastore.load_manifest(manifest_path)
    rd = lambda key: datastore.read_tensor(man.path(key))
    basis = subspace.SubspaceBasis(rd("basis").astype(np.complex128), np.array([]), float("nan"))
    coils = CoilSet(rd("coils"))
    sigma = float(man.extra.get("nufft_sigma", 2.0))
    width = int(man.extra.get("nufft_width", 6))
    dcf_iters = int(man.extra.get("dcf_iters", 20))
    pts = rd("trajectory")
    dcf = rd("dcf")
    labels = np.repeat(np.arange(man.L), man.M)
    if pts.ndim == 3:
        traj = nufft.Trajectory(pts.reshape(-1, pts.shape[-1]), arm_index=labels)
        p = nufft.plan(traj, man.grid, sigma, width)
        model = ForwardModel(basis, coils, p, dcf.reshape(-1), samples_per_arm=man.M)
    else:
        traj = [nufft.Trajectory(f.reshape(-1, f.shape[-1]), arm_index=labels) for f in pts]
        plans = [nufft.plan(t, man.grid, sigma, width) for t in traj]
        model = ForwardModel(basis, coils, plans, [w.reshape(-1) for w in dcf], samples_per_arm=man.M)
    y = from_kspace_array(rd("kspace"))
    if R > 1:
        if isinstance(traj, list):
            kept = acquisim.kept_arms(man.L, R)
            mask = np.zeros(man.L, bool)
            mask[kept] = True
            traj = [acquisim.undersample_trajectory(t, R) for t in traj]
            model = acquisim.build_model(traj, coils, basis, man.M, sigma, width, dcf_iters, arm_mask=mask)
            y = acquisim.undersample_kspace(y, R, man.M)
        else:
            model, traj, y = acquisim.undersample(model, traj, y, R, sigma=sigma, width=width)
    ref = None
    if man.has("ref_qmaps"):
        maps = rd("ref_qmaps")
        mask = rd("mask") > 0.5 if man.has("mask") else maps[2] > 0
        ref = quant.QMaps(maps[0], maps[1], maps[2], mask)
    ev = None
    if "eval_mask" in man.extra and (man.root / man.extra["eval_mask"]).is_file():
        ev = datastore.read_tensor(man.root / man.extra["eval_mask"]) > 0.5
    return Dataset(man, model, y, traj, epg.load_dictionary(man.path("dictionary")), basis, ref, ev)


# --------------------------------------------------------------------------- reconstruction


def stodip_config(cfg: dict, method: str) -> stodip.StodipConfig:
    lam = cfg["lambda_tv"]
    if lam is None:
        lam = DESK_LAMBDA_TV if method == "stodip-tv" else 0.0
    names = {f.name for f in fields(stodip.StodipConfig)}
    kw = {k: v for k, v in cfg.items() if k in names}
    kw["lambda_tv"] = lam
    # the initializer reuses the classical solver settings
    kw.update(init_iters=cfg["cg_iters"], init_mu=cfg["mu"], init_mu_scale=cfg["mu_scale"])
    return stodip.StodipConfig(**kw)


@dataclass
class ReconResult:
    method: str
    tsmi: np.ndarray
    report: solvers.SolverReport
    history: stodip.TrainHistory | None = None
    config: dict | None = None


def reconstruct(ds: Dataset, method: str, cfg: dict, out_dir=None, monitor: bool = True,
                init: stodip.Initialization | None = None) -> ReconResult:
    """Run one method on a loaded dataset; ``cfg`` must be resolved against RECON_KEYS."""
    if method not in METHODS:
        raise ConfigError(f"unknown method {method!r}; valid methods: {', '.join(METHODS)}")
    model, y = ds.model, ds.y
    t0 = time.perf_counter()
    hist = None
    eff = dict(cfg)
    if method == "svdmrf":
        x = solvers.recon_svdmrf(model, y)
        rep = solvers.SolverReport("svdmrf", converged=True)
    elif method == "lr-cg":
        x, rep = solvers.recon_lr_cg(model, y, cfg["cg_iters"], cfg["tol"])
    elif method == "lr-tikh":
        mu = cfg["mu"] if cfg["mu"] is not None else cfg["mu_scale"] * solvers.estimate_operator_norm(model)
        eff["mu"] = mu
        x, rep = solvers.recon_lr_tikh(model, y, mu, cfg["cg_iters"], cfg["tol"])
    elif method == "lrtv":
        x, rep = solvers.recon_lrtv(model, y, cfg["lrtv_lambda"], cfg["lrtv_iters"], cfg["lrtv_inner"])
    else:
        scfg = stodip_config(cfg, method)
        eff.update(scfg.to_dict())
        cd = quant.compress_dictionary(ds.dictionary, ds.basis) if monitor and ds.reference is not None else None
        ref = ds.reference
        if ref is not None and ds.eval_mask is not None:
            ref = quant.QMaps(ref.t1_ms, ref.t2_ms, ref.pd, ds.eval_mask)
        ckpt = None if out_dir is None else os.path.join(out_dir, "checkpoints")
        run = stodip.run_stodip if cfg["stochastic"] else stodip.run_fullgrad_dip
        res = run(model, y, scfg, reference=ref if cd is not None else None, dictionary=cd,
                  checkpoint_dir=ckpt, init=init)
        x, hist = res.tsmi, res.history
        rep = solvers.SolverReport(method, iterations=scfg.max_epochs, loss_history=list(hist.epoch_loss),
                                   converged=True,
                                   extra={"coil_steps": hist.coil_steps, "optimizer_steps": hist.optimizer_steps,
                                          "scheduler_steps": hist.scheduler_steps, "scale": res.scale,
                                          "parameters": res.network.n_parameters()})
        eff["network"] = res.network.descriptor_text().strip().replace("\n", "; ")
    rep.wall_time_s = time.perf_counter() - t0
    if not np.all(np.isfinite(x)):
        raise solvers.NumericalError(f"{method} produced non-finite values")
    result = ReconResult(method, x, rep, hist, eff)
    if out_dir is not None:
        write_recon(out_dir, result)
    return result


def write_recon(out_dir, r: ReconResult):
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    datastore.write_tensor(out / "tsmi.mrft", r.tsmi)
    r.report.tsmi_path = "tsmi.mrft"
    (out / "report.txt").write_text(r.report.to_text(), encoding="utf-8")
    if r.history is not None:
        r.history.write_csv(out / "history.csv")
        r.history.write_steps_csv(out / "steps.csv")
    else:
        with open(out / "history.csv", "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["iteration", "relative_residual", "loss"])
            n = max(len(r.report.residual_history), len(r.report.loss_history))
            for i in range(n):
                res = r.report.residual_history[i] if i < len(r.report.residual_history) else ""
                loss = r.report.loss_history[i] if i < len(r.report.loss_history) else ""
                w.writerow([i, repr(res) if res != "" else "", repr(loss) if loss != "" else ""])


# --------------------------------------------------------------------------- matching / metrics


def match(tsmi, ds_or_dict, basis=None, mask=None) -> quant.QMaps:
    if isinstance(ds_or_dict, Dataset):
        basis = ds_or_dict.basis
        mask = ds_or_dict.reference.mask if mask is None and ds_or_dict.reference is not None else mask
        ds_or_dict = ds_or_dict.dictionary
    return quant.dict_match(tsmi, ds_or_dict, basis, mask=mask)


def _tensor_at(path, names) -> Path:
    p = Path(path)
    if p.is_dir():
        for n in names:
            if (p / n).is_file():
                return p / n
        raise ConfigError(f"no {' or '.join(names)} in {p}")
    if p.is_file():
        return p
    if Path(str(p) + ".mrft").is_file():
        return Path(str(p) + ".mrft")
    raise ConfigError(f"{p} does not exist")


def load_qmaps(path, mask_path=None, role="est") -> tuple[quant.QMaps, np.ndarray | None]:
    """Q-maps from a tensor or a directory; also returns the evaluation mask found next to it."""
    names = ("qmaps.mrft", "ref_qmaps.mrft") if role == "est" else ("ref_qmaps.mrft", "qmaps.mrft")
    f = _tensor_at(path, names)
    arr = datastore.read_tensor(f)
    if arr.ndim not in (3, 4) or arr.shape[0] != 3:
        raise ConfigError(f"{f}: expected (3, *grid) Q-maps, got {arr.shape}")
    mask = None
    if mask_path is not None:
        mask = datastore.read_tensor(_tensor_at(mask_path, ("eval_mask.mrft", "mask.mrft"))) > 0.5
    else:
        for n in ("eval_mask.mrft", "mask.mrft"):
            if (f.parent / n).is_file():
                mask = datastore.read_tensor(f.parent / n) > 0.5
                break
    base = mask if mask is not None else arr[2] > 0
    return quant.QMaps(arr[0], arr[1], arr[2], base if role == "ref" else arr[2] > 0), mask


METRICS_HEADER = ("psnr peak = masked max of reference; psnr capped at 200 dB when exact; "
                  "pd normalized to its masked max; ssim gaussian sigma 1.5, 7 taps")


def write_metrics(path, rows: list[tuple[str, dict]]):
    with open(path, "w", newline="") as fh:
        fh.write(f"# {METRICS_HEADER}\n")
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["method", *quant.METRIC_COLUMNS])
        for name, m in rows:
            w.writerow([name, *(f"{m[c]:.6f}" for c in quant.METRIC_COLUMNS)])


def evaluate_paths(est_path, ref_path, out_dir, mask_path=None, name="est") -> dict:
    ref, ref_mask = load_qmaps(ref_path, mask_path, role="ref")
    est, _ = load_qmaps(est_path, role="est")
    if est.shape != ref.shape:
        raise ConfigError(f"estimate grid {est.shape} != reference grid {ref.shape}")
    mask = ref.mask if ref_mask is None else ref_mask
    m = quant.evaluate(est, ref, mask)
    os.makedirs(out_dir, exist_ok=True)
    write_metrics(Path(out_dir) / "metrics.csv", [(name, m)])
    return m


def benchmark(out_dir, overrides=None) -> list[dict]:
    cfg = resolve(BENCH_KEYS, overrides, "bench-nufft")
    rows = [nufft.benchmark(cfg["grid"], cfg["points"], cfg["sigma"], w, cfg["repeats"], True, cfg["seed"])
            for w in cfg["widths"]]
    os.makedirs(out_dir, exist_ok=True)
    with open(Path(out_dir) / "bench.csv", "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=list(rows[0]), lineterminator="\n")
        w.writeheader()
        w.writerows(rows)
    write_resolved(out_dir, {"subcommand": "bench-nufft", **cfg}, "bench-nufft")
    return rows
