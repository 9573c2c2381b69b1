"""Command-line entry point: synthesize, deblur, train, evaluate.

Exit codes: 0 success, 2 invalid config, 3 I/O failure, 4 numerical failure.
"""

import argparse
import functools
import logging
import subprocess
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import pipeline
from .config import dump_config, load_config
from .datagen import build_dataset, load_samples
from .errors import ConfigError, NumericalFailure, TrainingDiverged
from .io import read_image, write_csv
from .metrics import evaluate, read_manifest
from .unrolled.net import UnrolledNet, load_checkpoint, save_checkpoint
from .unrolled.train import train

log = logging.getLogger("unrolled_vba")

EXIT_OK, EXIT_CONFIG, EXIT_IO, EXIT_NUMERICAL = 0, 2, 3, 4


def build_parser():
    p = argparse.ArgumentParser(prog="unrolled-vba", description=__doc__.splitlines()[0])
    p.add_argument("--config", help="YAML run config (defaults apply for missing keys)")
    p.add_argument("--seed", type=int, help="global seed (overrides the config)")
    p.add_argument("--workers", type=int, help="parallel workers for manifest runs")
    p.add_argument("--log-level", default="INFO",
                   choices=["DEBUG", "INFO", "WARNING", "ERROR"])
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synthesize", help="build a degraded dataset from an image directory")
    s.add_argument("--images", required=True, help="directory of source images")
    s.add_argument("--out", required=True, help="output dataset directory")
    s.add_argument("--preset", choices=["dataset1", "dataset2"],
                   help="start from a built-in recipe instead of the config's")
    s.add_argument("--crop", type=int)
    s.add_argument("--resize-to", type=int)
    s.add_argument("--max-images", type=int)

    d = sub.add_parser("deblur", help="restore one image or every sample of a manifest")
    src = d.add_mutually_exclusive_group(required=True)
    src.add_argument("input", nargs="?", help="image (PNG) or observation (.npy)")
    src.add_argument("--manifest", help="dataset manifest (JSON lines)")
    d.add_argument("--out", required=True, help="output directory")
    d.add_argument("--split", help="restrict a manifest run to one split")
    d.add_argument("--sigma", type=float,
                   help="known noise std; sets beta = sigma**-2 and skips estimation")
    d.add_argument("--xi", type=float, help="SAR prior weight for plain VBA")
    d.add_argument("--xi-grid", action="store_true",
                   help="pick xi from the config grid by validation PSNR (needs --manifest)")
    d.add_argument("--net", help="unrolled-net checkpoint; plain VBA if omitted")
    d.add_argument("--color", action="store_true", help="YUV colour path")
    d.add_argument("--trace", action="store_true", help="write per-iteration CSV traces")
    d.add_argument("--post-process-cmd",
                   help="external command run on each output PNG path before scoring")

    t = sub.add_parser("train", help="train the unrolled net on a manifest")
    t.add_argument("--manifest", required=True)
    t.add_argument("--mode", choices=["greedy", "end-to-end"], default="greedy")
    t.add_argument("--out", required=True, help="checkpoint JSON path")
    t.add_argument("--init", help="checkpoint to start from (end-to-end warm start)")
    t.add_argument("--log", help="per-epoch CSV log path (default: next to the checkpoint)")
    t.add_argument("--epochs", type=int)
    t.add_argument("--K", type=int)

    e = sub.add_parser("evaluate", help="score restored outputs against a manifest")
    e.add_argument("--manifest", required=True)
    e.add_argument("--results", required=True)
    e.add_argument("--pad-size", type=int, default=64)

    c = sub.add_parser("config", help="print the effective config as YAML")
    c.set_defaults()
    return p


# ---------------------------------------------------------------------------
# commands


def cmd_synthesize(args, cfg):
    from .datagen import dataset1_recipe, dataset2_recipe

    recipe = cfg.recipe
    if args.preset:
        recipe = (dataset1_recipe if args.preset == "dataset1" else dataset2_recipe)()
    overrides = dict(seed=cfg.seed)
    for name in ("crop", "resize_to", "max_images"):
        v = getattr(args, name)
        if v is not None:
            overrides[name] = v
    recipe = replace(recipe, **overrides)
    if not Path(args.images).is_dir():
        raise FileNotFoundError(f"image directory not found: {args.images}")
    records = build_dataset(args.images, recipe, args.out)
    log.info("wrote %d samples to %s", len(records), Path(args.out) / "manifest.jsonl")
    return EXIT_OK


def _read_input(path):
    p = Path(path)
    if not p.exists():
        raise FileNotFoundError(f"input not found: {path}")
    try:
        return read_image(p)
    except (OSError, ValueError) as exc:
        raise OSError(f"cannot read {path}: {exc}") from exc


def _method(cfg, net, sigma, xi, trace):
    if net is not None:
        return functools.partial(pipeline.deblur_net, net=net, sigma=sigma)
    return functools.partial(pipeline.deblur_plain, vba_section=cfg.vba, sigma=sigma, xi=xi,
                             trace=trace)


def _deblur_one(job):
    """Worker body: ``job`` is (y, stem, out, cfg, net, sigma, xi, color, trace, cmd)."""
    y, stem, out, cfg, net, sigma, xi, color, want_trace, cmd = job
    trace = [] if want_trace and net is None else None
    x, h, state, info = pipeline.restore(y, _method(cfg, net, sigma, xi, trace), color)
    pipeline.export_result(out, stem, x, h, state, info, trace, cmd)
    return stem


def cmd_deblur(args, cfg):
    net = None
    if args.net:
        base = cfg.vba.vba_config()
        net, _ = load_checkpoint(args.net, base)
    if args.xi_grid and (net is not None or not args.manifest):
        raise ConfigError("--xi-grid needs --manifest and plain VBA (no --net)")
    xi = args.xi
    jobs = []
    if args.manifest:
        samples = load_samples(args.manifest)
        if args.xi_grid:
            val = [s for s in samples if s.split == "validation"]
            if not val:
                raise ConfigError("--xi-grid needs samples with split 'validation'")
            xi, table = pipeline.tune_xi(val, cfg.vba, cfg.vba.xi_grid)
            log.info("selected xi = %g", xi)
            write_csv(Path(args.out) / "xi_grid.csv",
                      [dict(xi=k, mean_psnr=v) for k, v in table.items()], ("xi", "mean_psnr"))
        if args.split:
            samples = [s for s in samples if s.split == args.split]
        for s in samples:
            sig = args.sigma if args.sigma is not None else (s.sigma if args.xi_grid else None)
            jobs.append((s.observed, s.sample_id, args.out, cfg, net, sig, xi, args.color,
                         args.trace, args.post_process_cmd))
    else:
        y = _read_input(args.input)
        jobs.append((y, Path(args.input).stem, args.out, cfg, net, args.sigma, xi, args.color,
                     args.trace, args.post_process_cmd))
    if not jobs:
        raise ConfigError("nothing to deblur")
    workers = max(1, cfg.workers)
    if workers > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=workers) as ex:
            done = list(ex.map(_deblur_one, jobs))
    else:
        done = [_deblur_one(j) for j in jobs]
    log.info("restored %d image(s) into %s", len(done), args.out)
    return EXIT_OK


def cmd_train(args, cfg):
    base = cfg.vba.vba_config()
    samples = load_samples(args.manifest)
    train_set = [s for s in samples if s.split == "train"]
    val_set = [s for s in samples if s.split == "validation"]
    if not train_set:
        raise ConfigError(f"{args.manifest}: no samples with split 'train'")
    run = cfg.train if args.mode == "greedy" else cfg.end_to_end
    run = replace(run, mode=args.mode, seed=cfg.seed,
                  loss=run.loss if run.mode == args.mode else None)
    if args.epochs is not None:
        run = replace(run, epochs=args.epochs)
    if args.init:
        net, _ = load_checkpoint(args.init, base)
    else:
        n = cfg.net
        net = UnrolledNet.create(args.K or n.K, base, beta_mode=n.beta_mode,
                                 xi_scale=n.xi_scale, xi_features=n.xi_features)
    net, curves = train(net, train_set, run, val_set)
    meta = dict(mode=run.mode, loss=run.loss, epochs=run.epochs, lr=run.lr,
                weight_decay=run.weight_decay, seed=run.seed, n_train=len(train_set),
                n_validation=len(val_set), manifest=str(args.manifest), init=args.init)
    save_checkpoint(args.out, net, meta)
    log_path = args.log or str(Path(args.out).with_suffix("")) + "_log.csv"
    rows = curves["rows"]
    if rows:
        write_csv(log_path, rows, list(rows[0]))
    log.info("saved checkpoint %s", args.out)
    return EXIT_OK


def cmd_evaluate(args, cfg):
    if not Path(args.manifest).exists():
        raise FileNotFoundError(f"manifest not found: {args.manifest}")
    read_manifest(args.manifest)
    report = evaluate(args.manifest, args.results, pad_size=args.pad_size)
    agg = report.aggregate()
    for k in ("kernel_mse", "kernel_hinf", "kernel_mae", "psnr", "ssim"):
        log.info("%s: %.6g (%.3g)", k, agg[k]["mean"], agg[k]["std"])
    return EXIT_OK


def cmd_config(args, cfg):
    sys.stdout.write(dump_config(cfg))
    return EXIT_OK


COMMANDS = dict(synthesize=cmd_synthesize, deblur=cmd_deblur, train=cmd_train,
                evaluate=cmd_evaluate, config=cmd_config)


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=getattr(logging, args.log_level),
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = load_config(args.config)
        if args.seed is not None:
            cfg = replace(cfg, seed=args.seed)
        if args.workers is not None:
            cfg = replace(cfg, workers=args.workers)
        return COMMANDS[args.command](args, cfg)
    except ConfigError as exc:
        log.error("invalid configuration: %s", exc)
        return EXIT_CONFIG
    except (NumericalFailure, np.linalg.LinAlgError, TrainingDiverged) as exc:
        log.error("numerical failure: %s", exc)
        return EXIT_NUMERICAL
    except (OSError, subprocess.CalledProcessError) as exc:
        log.error("I/O failure: %s", exc)
        return EXIT_IO
    except ValueError as exc:
        log.error("invalid input: %s", exc)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
