"""Greedy then end-to-end training of a 4-layer unrolled net on a toy set.

Builds 20 samples (64x64, three kernel families) from IMAGE_DIR, trains
greedily on the kernel MSE, warm-starts an SSIM run, and writes both
checkpoints plus training curves to OUT_DIR.

Usage: python3 scripts/toy_training.py IMAGE_DIR OUT_DIR
"""

import argparse
import csv
import time
from pathlib import Path

from unrolled_vba.datagen import Recipe, build_dataset, load_samples
from unrolled_vba.unrolled.net import UnrolledNet, save_checkpoint
from unrolled_vba.unrolled.train import (
    TrainRun,
    end_to_end_train,
    greedy_train,
    mean_kernel_mse,
    mean_ssim,
)
from unrolled_vba.vba import make_config


def _write_rows(path, rows):
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=list(rows[0]))
        w.writeheader()
        w.writerows(rows)


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("images", type=Path)
    ap.add_argument("out", type=Path)
    ap.add_argument("--K", type=int, default=4)
    ap.add_argument("--greedy-epochs", type=int, default=20)
    ap.add_argument("--greedy-lr", type=float, default=0.1)
    ap.add_argument("--e2e-epochs", type=int, default=3)
    ap.add_argument("--e2e-lr", type=float, default=0.01)
    args = ap.parse_args()

    recipe = Recipe(name="toy", crop=64, resize_to=128, sigma=0.01, max_images=7, seed=1,
                    blurs=(("gaussian-isotropic", 1), ("gaussian-anisotropic", 1),
                           ("defocus", 1)),
                    splits={"train": 4, "test": 3})
    build_dataset(args.images, recipe, args.out / "data")
    data = load_samples(args.out / "data/manifest.jsonl")[:20]
    train = [s for s in data if s.split == "train"]
    test = [s for s in data if s.split == "test"]
    print(f"{len(train)} train, {len(test)} test samples")

    t0 = time.perf_counter()
    net0 = UnrolledNet.create(args.K, make_config(9), xi_scale=1e4)
    greedy, gcurves = greedy_train(net0, train, TrainRun(lr=args.greedy_lr,
                                                         epochs=args.greedy_epochs))
    save_checkpoint(args.out / "greedy.json", greedy)
    _write_rows(args.out / "greedy_log.csv", gcurves["rows"])
    before, after = mean_kernel_mse(net0, test), mean_kernel_mse(greedy, test)
    print(f"held-out kernel MSE: untrained {before:.4f}, greedy {after:.4f} "
          f"(ratio {after / before:.3f}), {time.perf_counter() - t0:.0f} s")

    run = TrainRun(mode="end-to-end", lr=args.e2e_lr, epochs=args.e2e_epochs)
    e2e, ecurves = end_to_end_train(greedy, train, run, validation=test)
    save_checkpoint(args.out / "end_to_end.json", e2e)
    _write_rows(args.out / "end_to_end_log.csv", ecurves["rows"])
    print(f"SSIM train {mean_ssim(greedy, train):.4f} -> {mean_ssim(e2e, train):.4f}, "
          f"held-out {mean_ssim(greedy, test):.4f} -> {mean_ssim(e2e, test):.4f}, "
          f"{time.perf_counter() - t0:.0f} s total")


if __name__ == "__main__":
    main()
