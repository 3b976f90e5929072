"""Command-line entry point ``mrfdip``.

Exit codes: 0 success, 2 configuration error, 3 numerical failure.
Module settings are passed as ``--set key=value`` (repeatable) or a
``key = value`` file via ``--config``; every run writes
``resolved-config.txt`` under ``--out``.  ``MRF_THREADS`` caps the
BLAS/FFT thread pools.
"""

from __future__ import annotations

import argparse
import logging
import os
import sys
from pathlib import Path

from . import datastore, workflow
from .neuralnet import NonFiniteGradientError
from .solvers import NumericalError

EXIT_OK, EXIT_CONFIG, EXIT_NUMERICAL = 0, 2, 3

log = logging.getLogger("mrfdip")


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_CONFIG, f"{self.prog}: error: {message}\n")


def _common(p: argparse.ArgumentParser, out_required: bool = True):
    p.add_argument("--out", required=out_required, help="output directory")
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="configuration override")
    p.add_argument("--config", help="file with key = value overrides (applied before --set)")
    p.add_argument("--seed", type=int, help="shortcut for --set seed=N")
    p.add_argument("-v", "--verbose", action="store_true")


def build_parser() -> argparse.ArgumentParser:
    ap = _Parser(prog="mrfdip", description="Desk-scale MRF reconstruction with stochastic deep image priors.")
    sub = ap.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("phantom", help="numerical brain phantom (reference Q-maps and masks)")
    _common(p)

    p = sub.add_parser("dict", help="EPG dictionary and SVD basis")
    _common(p)

    p = sub.add_parser("simulate", help="multicoil spiral k-space from a phantom and a dictionary")
    _common(p)
    p.add_argument("--phantom", required=True, help="directory written by `phantom`")
    p.add_argument("--dict", required=True, help="directory written by `dict`")

    p = sub.add_parser("recon", help="reconstruct the subspace images")
    _common(p)
    p.add_argument("--method", required=True, choices=workflow.METHODS)
    p.add_argument("--manifest", required=True, help="manifest file or dataset directory")

    p = sub.add_parser("match", help="dictionary-match a TSMI to Q-maps")
    _common(p)
    p.add_argument("--tsmi", required=True, help="tsmi tensor or a recon output directory")
    p.add_argument("--manifest", required=True)

    p = sub.add_parser("eval", help="masked MAPE/PSNR/SSIM of estimated vs reference Q-maps")
    _common(p)
    p.add_argument("--est", required=True, help="Q-maps tensor or directory")
    p.add_argument("--ref", required=True, help="reference Q-maps tensor or directory")
    p.add_argument("--mask", help="mask tensor (default: eval_mask/mask next to the reference)")
    p.add_argument("--name", default="est", help="row label in metrics.csv")

    p = sub.add_parser("bench-nufft", help="time the gridding NUFFT and compare with the direct DFT")
    _common(p)

    p = sub.add_parser("reproduce", help="phantom -> dict -> simulate -> R=2 -> five methods -> eval")
    _common(p)
    return ap


def _overrides(args) -> dict:
    vals: dict[str, str] = {}
    if args.config:
        vals.update(datastore.read_config(args.config))
    for item in args.set:
        if "=" not in item:
            raise workflow.ConfigError(f"--set expects KEY=VALUE, got {item!r}")
        k, v = item.split("=", 1)
        vals[k.strip()] = v.strip()
    if args.seed is not None:
        vals["seed"] = str(args.seed)
    return vals


def _split(vals: dict, *groups: dict) -> list[dict]:
    """Distribute keys over key groups; keys in no group are an error."""
    known = set().union(*groups)
    unknown = sorted(set(vals) - known)
    if unknown:
        raise workflow.ConfigError(f"unknown key(s): {', '.join(unknown)}; valid keys: {', '.join(sorted(known))}")
    return [{k: v for k, v in vals.items() if k in g} for g in groups]


def _setup_logging(out_dir, verbose: bool):
    os.makedirs(out_dir, exist_ok=True)
    root = logging.getLogger()
    root.setLevel(logging.DEBUG if verbose else logging.INFO)
    for h in list(root.handlers):
        if getattr(h, "_mrfdip", False):
            root.removeHandler(h)
            h.close()
    fh = logging.FileHandler(Path(out_dir) / "log.txt", mode="w")
    fh.setFormatter(logging.Formatter("%(asctime)s %(levelname)s %(name)s: %(message)s"))
    fh._mrfdip = True
    sh = logging.StreamHandler(sys.stderr)
    sh.setLevel(logging.INFO if verbose else logging.WARNING)
    sh.setFormatter(logging.Formatter("%(levelname)s: %(message)s"))
    sh._mrfdip = True
    root.addHandler(fh)
    root.addHandler(sh)


def _thread_limit():
    raw = os.environ.get("MRF_THREADS")
    if raw is None or raw == "":
        return None
    try:
        n = int(raw)
    except ValueError:
        raise workflow.ConfigError(f"MRF_THREADS must be a positive integer, got {raw!r}") from None
    if n < 1:
        raise workflow.ConfigError(f"MRF_THREADS must be a positive integer, got {raw!r}")
    return n


def _run(args) -> None:
    vals = _overrides(args)
    out = args.out
    cmd = args.command
    if cmd == "phantom":
        workflow.make_phantom_dir(out, vals)
    elif cmd == "dict":
        workflow.make_dictionary_dir(out, vals)
    elif cmd == "simulate":
        workflow.simulate_dataset(out, args.phantom, args.dict, vals)
    elif cmd == "recon":
        cfg = workflow.resolve(workflow.RECON_KEYS, vals, "recon")
        ds = workflow.load_dataset(args.manifest, cfg["R"])
        res = workflow.reconstruct(ds, args.method, cfg, out)
        workflow.write_resolved(out, {"subcommand": "recon", "method": args.method,
                                      "manifest": args.manifest, **res.config}, "recon")
    elif cmd == "match":
        if vals:
            _split(vals, {})
        ds = workflow.load_dataset(args.manifest)
        tsmi = datastore.read_tensor(workflow._tensor_at(args.tsmi, ("tsmi.mrft",)))
        if tsmi.shape != ds.model.tsmi_shape:
            raise workflow.ConfigError(f"TSMI shape {tsmi.shape} does not match dataset {ds.model.tsmi_shape}")
        q = workflow.match(tsmi, ds)
        os.makedirs(out, exist_ok=True)
        datastore.write_tensor(Path(out) / "qmaps.mrft", q.stack())
        workflow.write_resolved(out, {"subcommand": "match", "tsmi": args.tsmi, "manifest": args.manifest}, "match")
    elif cmd == "eval":
        if vals:
            _split(vals, {})
        m = workflow.evaluate_paths(args.est, args.ref, out, args.mask, args.name)
        workflow.write_resolved(out, {"subcommand": "eval", "est": args.est, "ref": args.ref,
                                      "mask": args.mask, **m}, "eval")
    elif cmd == "bench-nufft":
        for row in workflow.benchmark(out, vals):
            print(", ".join(f"{k}={v}" for k, v in row.items()))
    elif cmd == "reproduce":
        from .pipeline import pipeline_reproduce

        report = pipeline_reproduce(out, vals)
        print(report.summary())


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:           # argparse: usage errors exit 2, --help exits 0
        return int(exc.code or 0)
    try:
        _setup_logging(args.out, args.verbose)
        limit = _thread_limit()
        if limit is not None:
            from threadpoolctl import threadpool_limits

            with threadpool_limits(limits=limit):
                _run(args)
        else:
            _run(args)
    except (NumericalError, NonFiniteGradientError, FloatingPointError) as exc:
        log.error("numerical failure: %s", exc)
        print(f"mrfdip: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    except (ValueError, KeyError, FileNotFoundError, datastore.TensorFormatError, datastore.ManifestError) as exc:
        msg = exc.args[0] if isinstance(exc, KeyError) and exc.args else exc
        log.error("configuration error: %s", msg)
        print(f"mrfdip: configuration error: {msg}", file=sys.stderr)
        return EXIT_CONFIG
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
