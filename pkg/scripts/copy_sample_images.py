"""Copy the scikit-image sample photographs into a directory of source images.

Usage: python3 scripts/copy_sample_images.py OUT_DIR
"""

import argparse
import shutil
from pathlib import Path

NAMES = ("astronaut.png", "brick.png", "camera.png", "cell.png", "chelsea.png", "coffee.png",
         "coins.png", "grass.png", "gravel.png", "hubble_deep_field.jpg", "moon.png",
         "motorcycle_left.png", "retina.jpg", "rocket.jpg")


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("out", type=Path)
    args = ap.parse_args()
    import skimage

    src = Path(skimage.data_dir)
    args.out.mkdir(parents=True, exist_ok=True)
    n = 0
    for name in NAMES:
        if (src / name).exists():
            shutil.copy(src / name, args.out / name)
            n += 1
    print(f"copied {n} images to {args.out}")


if __name__ == "__main__":
    main()
