"""End-to-end desk experiment: five reconstructions of R=2 data and training curves.

Outputs under ``out_dir``:

``metrics.csv``     one row per method, the eight evaluation columns
``curves_loss.csv`` per-epoch mean coil loss of the DIP runs
``curves_mape.csv`` monitored T1/T2 MAPE of the DIP runs
``trends.csv``      scalar comparisons (stochastic vs full gradient, Laplacian energies)
``report.txt``      the same numbers plus wall times (not part of the reproducibility check)
"""

from __future__ import annotations

import csv
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import ndimage

from . import datastore, quant, stodip, workflow

log = logging.getLogger(__name__)

PIPELINE_KEYS = {
    "epochs": (int, 500), "fullgrad_epochs": (int, 100), "R": (int, 2), "noise_snr_db": (float, 20.0),
    "lambda_tv": (float, workflow.DESK_LAMBDA_TV), "seed": (int, 0), "grid": (workflow._ints, "64,64"),
    "C": (int, 4), "n_pulses": (int, 200), "K": (int, 5), "channels": (workflow._ints, "16,32,64,128"),
    "n_res": (int, 2), "monitor_every": (int, 5), "compare_epoch": (int, 100),
}
DIP_METHODS = ("stodip", "stodip-tv")
REPORT_METHODS = ("svdmrf", "lr-cg", "lr-tikh", "stodip", "stodip-tv")


def laplacian_energy(tsmi: np.ndarray, scale: float = 1.0) -> float:
    """Mean squared discrete Laplacian over the 2K real channels of ``scale * tsmi``."""
    ch = stodip.to_channels(tsmi * scale, np.float64)[0]
    return float(np.mean([np.mean(ndimage.laplace(c, mode="nearest") ** 2) for c in ch]))


@dataclass
class ReproduceReport:
    out_dir: Path
    metrics: dict[str, dict] = field(default_factory=dict)
    trends: dict[str, float] = field(default_factory=dict)
    wall_time_s: dict[str, float] = field(default_factory=dict)

    def summary(self) -> str:
        lines = [f"{'method':<10} " + " ".join(f"{c:>9}" for c in quant.METRIC_COLUMNS)]
        for name, m in self.metrics.items():
            lines.append(f"{name:<10} " + " ".join(f"{m[c]:9.3f}" for c in quant.METRIC_COLUMNS))
        lines += [f"{k} = {v!r}" for k, v in self.trends.items()]
        lines += [f"wall_time_s.{k} = {v:.1f}" for k, v in self.wall_time_s.items()]
        return "\n".join(lines)


def _write_curves(path, runs: dict[str, stodip.TrainHistory], kind: str):
    names = list(runs)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        if kind == "loss":
            w.writerow(["epoch", *names])
            n = max(len(h.epoch_loss) for h in runs.values())
            for e in range(n):
                w.writerow([e + 1, *(repr(h.epoch_loss[e]) if e < len(h.epoch_loss) else "" for h in runs.values())])
        else:
            w.writerow(["epoch", *(f"{n}_{m}" for n in names for m in ("t1", "t2"))])
            epochs = sorted({e for h in runs.values() for e in h.monitor_epoch})
            for e in epochs:
                row = [e]
                for h in runs.values():
                    if e in h.monitor_epoch:
                        i = h.monitor_epoch.index(e)
                        row += [repr(h.mape_t1[i]), repr(h.mape_t2[i])]
                    else:
                        row += ["", ""]
                w.writerow(row)


def _mape_at(h: stodip.TrainHistory, epoch: int) -> tuple[float, float]:
    if epoch not in h.monitor_epoch:
        raise ValueError(f"epoch {epoch} was not monitored")
    i = h.monitor_epoch.index(epoch)
    return h.mape_t1[i], h.mape_t2[i]


def pipeline_reproduce(out_dir, overrides=None) -> ReproduceReport:
    """Generate the desk dataset from seeds and run the method comparison."""
    cfg = workflow.resolve(PIPELINE_KEYS, overrides, "reproduce")
    if cfg["compare_epoch"] > min(cfg["epochs"], cfg["fullgrad_epochs"]):
        raise workflow.ConfigError("compare_epoch exceeds the trained epochs")
    if cfg["monitor_every"] < 1 or cfg["compare_epoch"] % cfg["monitor_every"]:
        raise workflow.ConfigError("compare_epoch must be a multiple of monitor_every")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    workflow.write_resolved(out, {"subcommand": "reproduce", **cfg}, "reproduce")
    rep = ReproduceReport(out)
    seed = cfg["seed"]

    t0 = time.perf_counter()
    workflow.make_phantom_dir(out / "phantom", {"grid": cfg["grid"], "seed": seed})
    workflow.make_dictionary_dir(out / "dict", {"n_pulses": cfg["n_pulses"], "K": cfg["K"]})
    workflow.simulate_dataset(out / "data", out / "phantom", out / "dict",
                              {"C": cfg["C"], "noise_snr_db": cfg["noise_snr_db"], "seed": seed})
    ds = workflow.load_dataset(out / "data", cfg["R"])
    rep.wall_time_s["data"] = time.perf_counter() - t0
    mask = ds.eval_mask if ds.eval_mask is not None else ds.reference.mask

    base = workflow.resolve(workflow.RECON_KEYS, {"seed": seed, "max_epochs": cfg["epochs"],
                                                  "channels": cfg["channels"], "n_res": cfg["n_res"],
                                                  "monitor_every": cfg["monitor_every"]}, "recon")
    init = None
    dip_out = {}
    for method in REPORT_METHODS:
        rc = dict(base)
        if method == "stodip-tv":
            rc["lambda_tv"] = cfg["lambda_tv"]
        mdir = out / "recon" / method
        if method in DIP_METHODS and init is None:
            sc = workflow.stodip_config(rc, method)
            init = stodip.make_initializer(ds.model, ds.y, sc.initializer, sc.init_iters, sc.init_mu,
                                           sc.init_mu_scale)
        res = workflow.reconstruct(ds, method, rc, mdir, init=init if method in DIP_METHODS else None)
        workflow.write_resolved(mdir, {"subcommand": "recon", "method": method, **res.config}, "recon")
        q = workflow.match(res.tsmi, ds)
        datastore.write_tensor(mdir / "qmaps.mrft", q.stack())
        rep.metrics[method] = quant.evaluate(q, ds.reference, mask)
        rep.wall_time_s[method] = res.report.wall_time_s
        if method in DIP_METHODS:
            dip_out[method] = res
        log.info("%s done in %.1fs", method, res.report.wall_time_s)
    workflow.write_metrics(out / "metrics.csv", list(rep.metrics.items()))

    # full-gradient comparator, same seed / architecture / scheduler, shorter budget
    fc = dict(base)
    fc["max_epochs"] = cfg["fullgrad_epochs"]
    fc["stochastic"] = False
    fres = workflow.reconstruct(ds, "stodip", fc, out / "recon" / "fullgrad", init=init)
    workflow.write_resolved(out / "recon" / "fullgrad", {"subcommand": "recon", "method": "stodip",
                                                         **fres.config}, "recon")
    rep.wall_time_s["fullgrad"] = fres.report.wall_time_s

    runs = {"stodip": dip_out["stodip"].history, "stodip_tv": dip_out["stodip-tv"].history,
            "fullgrad": fres.history}
    _write_curves(out / "curves_loss.csv", runs, "loss")
    _write_curves(out / "curves_mape.csv", runs, "mape")

    e = cfg["compare_epoch"]
    s1, s2 = _mape_at(runs["stodip"], e)
    f1, f2 = _mape_at(runs["fullgrad"], e)
    scale = init.scale
    lap_plain = laplacian_energy(dip_out["stodip"].tsmi, scale)
    lap_tv = laplacian_energy(dip_out["stodip-tv"].tsmi, scale)
    rep.trends = {
        "compare_epoch": e,
        "stochastic_mape_t1_plus_t2": s1 + s2,
        "fullgrad_mape_t1_plus_t2": f1 + f2,
        "laplacian_energy_stodip": lap_plain,
        "laplacian_energy_stodip_tv": lap_tv,
        "laplacian_ratio": lap_tv / lap_plain if lap_plain > 0 else float("nan"),
        "stodip_coil_steps": runs["stodip"].coil_steps,
        "stodip_scheduler_steps": runs["stodip"].scheduler_steps,
    }
    with open(out / "trends.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["quantity", "value"])
        for k, v in rep.trends.items():
            w.writerow([k, repr(v)])
    (out / "report.txt").write_text(rep.summary() + "\n", encoding="utf-8")
    return rep
