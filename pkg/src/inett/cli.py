"""``inett`` command line: phantoms, datasets, training, reconstruction, evaluation, export.

Exit codes: 0 success, 1 usage error, 2 data or I/O error, 3 numerical failure.
"""
from __future__ import annotations

import argparse
import csv
import logging
import os
import sys
from pathlib import Path

from . import config as config_mod

log = logging.getLogger("inett")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3
NETT_ALPHAS = (0.001, 0.01, 0.05, 0.1)


class UsageError(Exception):
    pass


class NumericalFailure(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _geometry(text):
    try:
        det, views = (int(v) for v in text.lower().split("x"))
    except ValueError:
        raise argparse.ArgumentTypeError(f"geometry must look like 64x30 (detectors x views), got {text!r}") from None
    return det, views


def _load_config(args):
    cfg = config_mod.load(args.config) if getattr(args, "config", None) else config_mod.Config()
    return cfg


def _write_config(cfg, path):
    Path(path).write_text(cfg.dumps())
    log.info("resolved config:\n%s", cfg.dumps())


# ---------------------------------------------------------------- commands


def cmd_gen_phantoms(args):
    from .core import nimg
    from .phantom import phantom_seeds, random_phantom

    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    seeds = phantom_seeds(args.seed, args.count)
    with open(out / "manifest.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["index", "file", "seed"])
        for i, seed in enumerate(seeds):
            name = f"phantom_{i:05d}.nimg"
            nimg.save(out / name, random_phantom(args.n, (args.k_min, args.k_max), seed))
            w.writerow([i, name, seed])
    print(f"wrote {len(seeds)} phantoms to {out}")


def _read_phantoms(directory):
    from .core import nimg

    directory = Path(directory)
    manifest = directory / "manifest.csv"
    if manifest.exists():
        with open(manifest, newline="") as fh:
            names = [row["file"] for row in csv.DictReader(fh)]
    else:
        names = sorted(p.name for p in directory.glob("*.nimg"))
    return [nimg.load(directory / name) for name in names]


def cmd_build_dataset(args):
    from .core import nimg
    from .tomo import build_projector
    from .training import build_dataset

    phantoms = _read_phantoms(args.phantoms)
    if args.n1 + args.n2 != len(phantoms):
        raise UsageError(f"--n1 + --n2 = {args.n1 + args.n2} but {args.phantoms} holds {len(phantoms)} phantoms")
    if not phantoms:
        raise UsageError("no phantoms found")
    n = phantoms[0].shape[0]
    n_det, n_views = args.geometry or (n, 30)
    op = build_projector(n, n_det, n_views)
    ds = build_dataset(phantoms, op, args.n1, args.n2, (0.0, args.noise_max), args.seed)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    split_of = {i: s for s, idx in (("train", ds.train), ("val", ds.val), ("test", ds.test)) for i in idx}
    cfg = config_mod.Config()
    cfg.geometry.n, cfg.geometry.n_det, cfg.geometry.n_views = n, n_det, n_views
    _write_config(cfg, out / "dataset.cfg")
    with open(out / "manifest.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["index", "kind", "split", "noise_level", "delta", "z", "r", "truth", "sinogram"])
        for i, (s, truth) in enumerate(zip(ds.samples, phantoms)):
            files = {k: f"{k}_{i:05d}.nimg" for k in ("z", "r", "truth")}
            nimg.save(out / files["z"], s.z)
            nimg.save(out / files["r"], s.r)
            nimg.save(out / files["truth"], truth)
            sino = ""
            if s.sinogram is not None:
                sino = f"sino_{i:05d}.nimg"
                nimg.save(out / sino, s.sinogram)
            w.writerow([i, s.kind, split_of[i], repr(s.noise_level), repr(s.delta),
                        files["z"], files["r"], files["truth"], sino])
    print(f"wrote {len(ds.samples)} samples to {out} (train {len(ds.train)}, val {len(ds.val)}, test {len(ds.test)})")


def read_dataset(directory):
    """Load a dataset directory written by ``build-dataset``."""
    from .core import nimg
    from .training import Dataset, Sample

    directory = Path(directory)
    samples, splits = [], {"train": [], "val": [], "test": []}
    with open(directory / "manifest.csv", newline="") as fh:
        for row in csv.DictReader(fh):
            i = int(row["index"])
            sino = nimg.load(directory / row["sinogram"]) if row["sinogram"] else None
            samples.append(Sample(nimg.load(directory / row["z"]), nimg.load(directory / row["r"]), row["kind"],
                                  float(row["noise_level"]), float(row["delta"]), sino))
            splits[row["split"]].append(i)
    return Dataset(samples, splits["train"], splits["val"], splits["test"])


def _unet_config(cfg):
    from .unet import UnetConfig

    u, g = cfg.unet, cfg.geometry
    return UnetConfig(g.n, g.n, u.levels, u.channels, u.multiplier, u.bn_eps, u.a, u.p, u.q)


def cmd_train(args):
    from .network import ConstraintPlan, save_checkpoint
    from .training import finalize_bn, train
    from .unet import build_unet, convex_plan

    cfg = _load_config(args)
    ds_dir = Path(args.dataset)
    if (ds_dir / "dataset.cfg").exists() and not args.config:
        cfg.geometry = config_mod.load(ds_dir / "dataset.cfg").geometry
    if args.epochs is not None:
        cfg.training.epochs = args.epochs
    if args.seed is not None:
        cfg.training.seed = args.seed
    ds = read_dataset(ds_dir)
    cfg.geometry.n = ds.samples[0].z.shape[0]
    t = cfg.training
    net, params = build_unet(_unet_config(cfg), cfg.unet.init_seed)
    plan = ConstraintPlan() if args.unconstrained else convex_plan(net)
    out = Path(args.out_checkpoint)

    def on_epoch(epoch, p):
        if t.checkpoint_every and epoch % t.checkpoint_every == 0:
            save_checkpoint(out.with_name(f"{out.stem}_epoch{epoch:04d}{out.suffix}"), p)

    params, history = train(net, params, plan, ds, t.epochs, t.batch_size, t.lr, t.lam, t.seed, on_epoch)
    params = finalize_bn(net, params, ds.inputs(ds.train))
    save_checkpoint(out, params)
    _write_config(cfg, str(out) + ".cfg")
    history.write_csv(args.history or out.with_suffix(".history.csv"))
    kind = "unconstrained" if args.unconstrained else "convex"
    print(f"trained {kind} U-net for {t.epochs} epochs; checkpoint {out}")


def _checkpoint_model(path, cfg_override=None):
    from .network import load_checkpoint
    from .unet import unet_spec

    sidecar = Path(str(path) + ".cfg")
    cfg = config_mod.load(sidecar) if sidecar.exists() else (cfg_override or config_mod.Config())
    return cfg, unet_spec(_unet_config(cfg)), load_checkpoint(path)


def _history_csv(path, rows):
    if not rows:
        return
    keys = list(rows[0])
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=keys, extrasaction="ignore")
        w.writeheader()
        for row in rows:
            w.writerow({k: repr(v) if isinstance(v, float) else v for k, v in row.items()})


def cmd_reconstruct(args):
    import numpy as np

    from . import solvers, tomo
    from .core import nimg
    from .unet import build_regularizer

    cfg = _load_config(args)
    s = cfg.solver
    if args.tau is not None:
        s.tau = args.tau
    if args.method == "nett" and args.alpha is None:
        raise UsageError("--method nett needs --alpha; values used for comparison: "
                         + ", ".join(str(a) for a in NETT_ALPHAS))
    if args.method in ("inett", "sit") and args.delta is None:
        raise UsageError(f"--method {args.method} needs --delta (noise norm of the sinogram)")
    if args.method in ("inett", "nett") and not args.checkpoint:
        raise UsageError(f"--method {args.method} needs --checkpoint")
    y = nimg.load(args.sinogram)
    if y.ndim != 2:
        raise ValueError(f"sinogram must be 2-D (detectors x views), got shape {y.shape}")
    model = _checkpoint_model(args.checkpoint, cfg) if args.method in ("inett", "nett") else None
    # without a checkpoint the default geometry (one detector per image column) fixes the size
    n = args.size or (model[0].geometry.n if model else y.shape[0])
    op = tomo.build_projector(n, y.shape[0], y.shape[1])
    schedule = solvers.GeometricSchedule(s.alpha1, s.ratio)
    inner = solvers.InnerGDConfig(s.inner_step, s.inner_max_iter, s.inner_tol)
    result = None
    if args.method == "art":
        x = solvers.art_solve(op, y, s.art_rounds)
    elif args.method == "sit":
        result = solvers.sit_solve(op, y, args.delta, tau=s.tau, schedule=schedule, n_max=s.n_max)
    else:
        mcfg, net, params = model
        if tuple(net.input_shape[:2]) != (n, n):
            raise ValueError(f"checkpoint expects {net.input_shape[:2]} images, sinogram geometry gives {n}x{n}")
        if args.method == "inett":
            reg = build_regularizer(net, params, mcfg.unet.a, mcfg.unet.p, mcfg.unet.q)
            result = solvers.inett_solve(reg, op, y, args.delta, tau=s.tau, schedule=schedule,
                                         n_max=s.n_max, inner=inner)
        else:
            gd = solvers.InnerGDConfig(s.inner_step, s.nett_max_iter, s.inner_tol)
            result = solvers.nett_solve(net, params, op, y, args.alpha, gd)
    if result is not None:
        x = result.x
        if args.history:
            _history_csv(args.history, result.history)
    nimg.save(args.out, np.asarray(x))
    if result is not None:
        print(f"{args.method}: status {result.status}, n_delta {result.n_delta}")
        if args.method in ("inett", "sit") and not result.converged:
            raise NumericalFailure(f"{args.method} did not meet the discrepancy principle within n_max={s.n_max}")
    print(f"wrote {args.out}")


def cmd_simulate(args):
    from . import tomo
    from .core import nimg
    from .phantom import load_image

    x = load_image(args.phantom)
    n_det, n_views = args.geometry or (x.shape[0], 30)
    op = tomo.build_projector(x.shape[0], n_det, n_views)
    sino = tomo.add_noise(tomo.apply(op, x), args.noise, args.seed)
    nimg.save(args.out, sino.data)
    print(f"delta = {sino.delta!r}")


def _parse_recon(spec):
    if "=" in spec:
        name, path = spec.split("=", 1)
        return name, path
    return Path(spec).stem, spec


def cmd_evaluate(args):
    from .metrics import psnr, ssim
    from .phantom import load_image

    if not Path(args.truth).exists():
        raise FileNotFoundError(f"truth image not found: {args.truth}")
    truth = load_image(args.truth)
    from .core import nimg

    rows = []
    for spec in args.recon:
        name, path = _parse_recon(spec)
        x = nimg.load(path)
        if x.shape != truth.shape:
            raise ValueError(f"{path}: shape {x.shape} does not match truth {truth.shape}")
        rows.append((name, psnr(x, truth), ssim(x, truth)))
    width = max([len("method")] + [len(r[0]) for r in rows])
    print(f"{'method':<{width}}  {'PSNR':>8}  {'SSIM':>6}")
    for name, p, s in rows:
        print(f"{name:<{width}}  {p:8.2f}  {s:6.4f}")
    if args.out_table:
        with open(args.out_table, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["method", "PSNR", "SSIM"])
            for name, p, s in rows:
                w.writerow([name, repr(p), repr(s)])


def cmd_export(args):
    from .core import nimg

    img = nimg.load(getattr(args, "in"))
    if img.ndim == 3 and img.shape[-1] == 1:
        img = img[..., 0]
    if img.ndim != 2:
        raise ValueError(f"can only export 2-D images, got shape {img.shape}")
    lo = args.lo if args.lo is not None else float(img.min())
    hi = args.hi if args.hi is not None else float(img.max())
    nimg.save_pgm(args.out, img, lo, hi)


# ---------------------------------------------------------------- parser


def build_parser():
    p = _Parser(prog="inett", description="Sparse-view CT with learned convex regularizers.")
    p.add_argument("--threads", type=int, default=None, help="cap on BLAS / worker threads")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    g = sub.add_parser("gen-phantoms", help="random ellipse phantoms")
    g.add_argument("--n", type=int, default=64)
    g.add_argument("--count", type=int, required=True)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--k-min", type=int, default=3)
    g.add_argument("--k-max", type=int, default=8)
    g.add_argument("--out-dir", required=True)
    g.set_defaults(func=cmd_gen_phantoms)

    b = sub.add_parser("build-dataset", help="artifact / clean training pairs")
    b.add_argument("--phantoms", required=True)
    b.add_argument("--geometry", type=_geometry, help="DETECTORSxVIEWS, default Nx30")
    b.add_argument("--n1", type=int, required=True)
    b.add_argument("--n2", type=int, required=True)
    b.add_argument("--noise-max", type=float, default=0.10)
    b.add_argument("--seed", type=int, default=0)
    b.add_argument("--out", required=True)
    b.set_defaults(func=cmd_build_dataset)

    t = sub.add_parser("train", help="train a U-net regularizer")
    t.add_argument("--dataset", required=True)
    t.add_argument("--config")
    t.add_argument("--epochs", type=int)
    t.add_argument("--seed", type=int)
    t.add_argument("--out-checkpoint", required=True)
    t.add_argument("--history", help="training-history CSV (default next to the checkpoint)")
    mode = t.add_mutually_exclusive_group()
    mode.add_argument("--convex", action="store_true", help="project onto the convexity constraints (default)")
    mode.add_argument("--unconstrained", action="store_true")
    t.set_defaults(func=cmd_train)

    r = sub.add_parser("reconstruct", help="reconstruct an image from a sinogram")
    r.add_argument("--method", choices=("inett", "nett", "sit", "art"), required=True)
    r.add_argument("--sinogram", required=True)
    r.add_argument("--delta", type=float)
    r.add_argument("--checkpoint")
    r.add_argument("--alpha", type=float)
    r.add_argument("--tau", type=float)
    r.add_argument("--size", type=int, help="image side length (default: checkpoint size, else detector count)")
    r.add_argument("--config")
    r.add_argument("--history")
    r.add_argument("--out", required=True)
    r.set_defaults(func=cmd_reconstruct)

    s = sub.add_parser("simulate", help="noisy sinogram of an image; prints its noise norm")
    s.add_argument("--phantom", required=True)
    s.add_argument("--geometry", type=_geometry)
    s.add_argument("--noise", type=float, default=0.05)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_simulate)

    e = sub.add_parser("evaluate", help="PSNR / SSIM table")
    e.add_argument("--recon", nargs="+", required=True, help="files or NAME=FILE pairs")
    e.add_argument("--truth", required=True)
    e.add_argument("--out-table")
    e.set_defaults(func=cmd_evaluate)

    x = sub.add_parser("export", help="NIMG to 8-bit PGM")
    x.add_argument("--in", required=True)
    x.add_argument("--out", required=True)
    x.add_argument("--lo", type=float)
    x.add_argument("--hi", type=float)
    x.set_defaults(func=cmd_export)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    if args.threads:
        for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
            os.environ[var] = str(args.threads)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    from .core.nimg import FormatError
    from .solvers import ConvergenceError, DivergenceError

    try:
        args.func(args)
    except UsageError as exc:
        print(f"inett: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except config_mod.ConfigError as exc:
        print(f"inett: config error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (NumericalFailure, DivergenceError, ConvergenceError) as exc:
        print(f"inett: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (OSError, FormatError, ValueError, KeyError) as exc:
        print(f"inett: data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
