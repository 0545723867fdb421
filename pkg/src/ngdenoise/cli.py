"""Command-line entry point: ``ngdenoise {simulate,train,run,eval,gradcheck}``.

Exit codes: 0 success, 1 runtime failure, 2 usage error.
"""
from __future__ import annotations

import argparse
import csv
import logging
import sys
from pathlib import Path

import numpy as np

from . import __version__
from . import config as cfgmod
from .checkpoint import CheckpointError, load_model
from .imagecore import ImageError, list_pngs, load_png, save_png
from .metrics import MetricError, evaluate_dirs
from .noisesim import NoiseSpec, Pattern, simulate
from .train import TrainingError, train

log = logging.getLogger("ngdenoise")

RUNTIME_ERRORS = (ImageError, CheckpointError, MetricError, TrainingError, cfgmod.ConfigError,
                  OSError, ValueError)


class UsageError(Exception):
    pass


def _sigma_arg(text):
    if text.strip().lower() == "auto":
        return None
    try:
        v = float(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected a number or 'auto', got {text!r}") from None
    if not 0.0 <= v <= 75.0:
        raise argparse.ArgumentTypeError("sigma must lie in [0, 75]")
    return v


def _train_sigma(text):
    v = _sigma_arg(text)
    return "auto" if v is None else v


def _positive(text):
    v = int(text)
    if v < 1:
        raise argparse.ArgumentTypeError("must be >= 1")
    return v


def _nonneg(text):
    v = int(text)
    if v < 0:
        raise argparse.ArgumentTypeError("must be >= 0")
    return v


def _same_dir(a: Path, b: Path) -> bool:
    return a.resolve() == b.resolve()


def image_seed(seed: int, index: int) -> int:
    """Per-image seed derived from the run seed, so each image replays on its own."""
    return int(np.random.SeedSequence([seed, index]).generate_state(1, np.uint64)[0])


# -- simulate -----------------------------------------------------------------

def cmd_simulate(args) -> int:
    src, dst = Path(args.inp), Path(args.out)
    if dst.exists() and _same_dir(src, dst):
        raise UsageError("--out must differ from --in (inputs are never modified)")
    paths = list_pngs(src)
    if not paths:
        raise ImageError(f"no PNG images in {src}")
    dst.mkdir(parents=True, exist_ok=True)
    sigma = "auto" if args.sigma is None else args.sigma
    cfgmod.write_run_cfg(dst, {"in": str(src), "out": str(dst),
                               "sigma": sigma, "pattern": args.pattern, "seed": args.seed}, "ngdenoise simulate")
    rows = []
    for i, path in enumerate(paths):
        clean = load_png(path)
        spec = NoiseSpec(Pattern(args.pattern), args.sigma, 0.0, image_seed(args.seed, i))
        sim = simulate(clean, spec)
        save_png(clean, dst / f"{path.stem}.clean.png")
        save_png(sim.noisy, dst / f"{path.stem}.noisy.png")
        rows.append((path.stem, sim.pattern.value, repr(sim.sigma8), spec.seed))
    with (dst / "manifest.csv").open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(("name", "pattern", "sigma", "seed"))
        w.writerows(rows)
    print(f"wrote {len(rows)} pairs to {dst}")
    return 0


# -- train --------------------------------------------------------------------

TRAIN_FLAGS = ("steps", "batch", "patch", "seed", "sigma", "pattern", "validate_every", "lr")


def cmd_train(args) -> int:
    file_values = cfgmod.load(args.config) if args.config else {}
    flag_values = {k: getattr(args, k) for k in TRAIN_FLAGS}
    if args.sigma == "auto":
        flag_values["sigma"] = None
        file_values.pop("sigma", None)
    flag_values.update(data=args.data, val=args.val, out=args.out)
    values = cfgmod.merge(file_values, flag_values)
    for key in ("data", "val", "out"):
        if key not in values:
            raise UsageError(f"--{key} is required (or set '{key}' in the config file)")
    tc = cfgmod.build_train_config(values)
    out = Path(values["out"])
    out.parent.mkdir(parents=True, exist_ok=True)
    echo = {"data": values["data"], "val": values["val"], "out": str(out),
            **cfgmod.train_config_items(tc)}
    cfgmod.write_run_cfg(out.parent, echo, "ngdenoise train; reusable as --config")
    state = train(tc, values["data"], values["val"], out, resume=args.resume)
    print(f"trained {state.step} steps; checkpoint {out}")
    if state.best is not None:
        print(f"best validation PSNR {state.best['psnr']:.4f} dB at step {state.best['step']}")
    return 0


# -- run ----------------------------------------------------------------------

def _denoise_file(model, src: Path, dst: Path, noise_dst: Path | None):
    img = load_png(src)
    clean, est = model.denoise(img)
    dst.parent.mkdir(parents=True, exist_ok=True)
    save_png(clean, dst)
    if noise_dst is not None:
        noise_dst.parent.mkdir(parents=True, exist_ok=True)
        save_png(np.clip(est + 0.5, 0.0, 1.0), noise_dst)


def cmd_run(args) -> int:
    model, _ = load_model(args.model)
    src, dst = Path(args.inp), Path(args.out)
    dump = Path(args.dump_noise) if args.dump_noise else None
    if src.is_dir():
        if dst.exists() and _same_dir(src, dst):
            raise UsageError("--out must differ from --in (inputs are never modified)")
        paths = list_pngs(src)
        if not paths:
            raise ImageError(f"no PNG images in {src}")
        for p in paths:
            _denoise_file(model, p, dst / f"{p.stem}.denoised.png",
                          None if dump is None else dump / f"{p.stem}.noise.png")
        out_dir = dst
    else:
        if dst.exists() and dst.resolve() == src.resolve():
            raise UsageError("--out must differ from --in (inputs are never modified)")
        _denoise_file(model, src, dst, dump)
        out_dir = dst.parent
    cfgmod.write_run_cfg(out_dir, {"model": args.model, "in": str(src),
                                   "out": str(dst), "dump_noise": args.dump_noise or ""}, "ngdenoise run")
    return 0


# -- eval ---------------------------------------------------------------------

def cmd_eval(args) -> int:
    report = evaluate_dirs(args.ref, args.test, args.manifest)
    out = Path(args.report)
    out.parent.mkdir(parents=True, exist_ok=True)
    report.write_csv(out)
    cfgmod.write_run_cfg(out.parent, {"ref": args.ref, "test": args.test,
                                      "report": str(out), "manifest": args.manifest or ""}, "ngdenoise eval")
    print(f"mean over {len(report.rows)} pairs: {report.summary()}")
    return 0


# -- gradcheck ----------------------------------------------------------------

def cmd_gradcheck(args) -> int:
    from .gradcheck import format_table, run_suite

    results = run_suite(args.seed, corrupt=args.corrupt)
    print(format_table(results))
    failed = [r.name for r in results if not r.passed]
    print(f"{len(results)} checks, {len(results) - len(failed)} passed")
    if failed:
        print("failing: " + ", ".join(failed), file=sys.stderr)
        return 1
    return 0


# -- parser -------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    # accepted before or after the subcommand
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--threads", type=_positive, default=argparse.SUPPRESS,
                        help="cap BLAS threads (1 gives the deterministic mode)")
    common.add_argument("-v", "--verbose", action="store_true", default=argparse.SUPPRESS,
                        help="debug logging")
    parser = argparse.ArgumentParser(prog="ngdenoise", parents=[common],
                                     description="Two-stage noise-guided image denoiser.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("simulate", parents=[common], help="write noisy/clean PNG pairs and a manifest")
    p.add_argument("--in", dest="inp", required=True, metavar="DIR")
    p.add_argument("--out", required=True, metavar="DIR")
    p.add_argument("--sigma", type=_sigma_arg, default=None, metavar="{S|auto}",
                   help="noise level in 8-bit units, or auto for uniform [0, 75] (default auto)")
    p.add_argument("--pattern", choices=[x.value for x in Pattern], default="auto")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_simulate, subparser=p)

    p = sub.add_parser("train", parents=[common], help="train both networks")
    p.add_argument("--data", metavar="DIR")
    p.add_argument("--val", metavar="DIR")
    p.add_argument("--out", metavar="CKPT")
    p.add_argument("--steps", type=_nonneg)
    p.add_argument("--batch", type=_positive)
    p.add_argument("--patch", type=_positive)
    p.add_argument("--seed", type=int)
    p.add_argument("--sigma", type=_train_sigma, metavar="{S|auto}")
    p.add_argument("--pattern", choices=[x.value for x in Pattern])
    p.add_argument("--validate-every", dest="validate_every", type=_nonneg)
    p.add_argument("--lr", type=float)
    p.add_argument("--config", metavar="FILE")
    p.add_argument("--resume", action="store_true", help="continue from --out if it exists")
    p.set_defaults(func=cmd_train, subparser=p)

    p = sub.add_parser("run", parents=[common], help="denoise a PNG (or a directory of PNGs)")
    p.add_argument("--model", required=True, metavar="CKPT")
    p.add_argument("--in", dest="inp", required=True, metavar="PATH")
    p.add_argument("--out", required=True, metavar="PATH")
    p.add_argument("--dump-noise", dest="dump_noise", metavar="PATH",
                   help="also write the noise estimate shifted by +0.5")
    p.set_defaults(func=cmd_run, subparser=p)

    p = sub.add_parser("eval", parents=[common], help="score test images against references")
    p.add_argument("--ref", required=True, metavar="DIR")
    p.add_argument("--test", required=True, metavar="DIR")
    p.add_argument("--report", required=True, metavar="PATH")
    p.add_argument("--manifest", metavar="CSV", help="explicit ref,test pairing")
    p.set_defaults(func=cmd_eval, subparser=p)

    p = sub.add_parser("gradcheck", parents=[common], help="finite-difference gradient suite")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--corrupt", action="store_true", help=argparse.SUPPRESS)
    p.set_defaults(func=cmd_gradcheck, subparser=p)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    threads = getattr(args, "threads", None)
    logging.basicConfig(level=logging.DEBUG if getattr(args, "verbose", False) else logging.INFO,
                        format="%(asctime)s %(levelname)s %(message)s", stream=sys.stderr)
    try:
        if threads is not None:
            from threadpoolctl import threadpool_limits

            with threadpool_limits(limits=threads):
                return args.func(args)
        return args.func(args)
    except UsageError as exc:
        args.subparser.print_usage(sys.stderr)
        print(f"ngdenoise: error: {exc}", file=sys.stderr)
        return 2
    except RUNTIME_ERRORS as exc:
        print(f"ngdenoise: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
