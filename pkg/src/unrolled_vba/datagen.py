"""Synthetic blur kernels, Gaussian-noise degradation and dataset manifests."""

import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np
from PIL import Image

from .io import LUMA, read_image, write_image, write_kernel_csv
from .operators import circular_convolve

log = logging.getLogger(__name__)

FAMILIES = ("gaussian-isotropic", "gaussian-anisotropic", "uniform", "defocus")
ORIENTATIONS = (np.pi / 4, 3 * np.pi / 4)
IMAGE_SUFFIXES = (".png", ".jpg", ".jpeg", ".bmp", ".tif", ".tiff")


def _check_side(side):
    if side < 1 or side % 2 == 0:
        raise ValueError(f"kernel side must be odd and positive, got {side}")


def _grid(side):
    r = np.arange(side) - (side - 1) / 2.0
    return np.meshgrid(r, r, indexing="ij")


def _diagonal_symmetric(orientation):
    c = np.cos(2 * orientation)
    return abs(c) < 1e-12


def _unit(side, units):
    if units == "half-width":
        return (side - 1) / 2.0
    if units == "pixels":
        return 1.0
    raise ValueError(f"unknown width units {units!r}")


def gen_gaussian_kernel(side=9, std_v=0.3, std_h=None, orientation=0.0, units="half-width"):
    """Sampled, rotated 2D Gaussian normalized to sum 1.

    Standard deviations are fractions of the half-width ``(side - 1) / 2``
    unless ``units="pixels"``. ``std_h=None`` gives the isotropic kernel.
    """
    _check_side(side)
    std_h = std_v if std_h is None else std_h
    if std_v <= 0 or std_h <= 0:
        raise ValueError("standard deviations must be positive")
    u = _unit(side, units)
    sv, sh = std_v * u, std_h * u
    dy, dx = _grid(side)
    c, s = np.cos(orientation), np.sin(orientation)
    a = c * dy + s * dx
    b = -s * dy + c * dx
    k = np.exp(-0.5 * ((a / sv) ** 2 + (b / sh) ** 2))
    if std_v == std_h or _diagonal_symmetric(orientation):
        k = 0.5 * (k + k.T)
    return k / k.sum()


def gen_uniform_kernel(side=9, width=5):
    _check_side(side)
    if width % 2 == 0 or width < 1:
        raise ValueError("uniform width must be odd and positive")
    if width > side:
        raise ValueError(f"uniform width {width} exceeds kernel side {side}")
    k = np.zeros((side, side))
    lo = (side - width) // 2
    k[lo:lo + width, lo:lo + width] = 1.0 / (width * width)
    return k


def gen_defocus_kernel(side=9, width_v=0.35, width_h=None, orientation=0.0, subsample=4):
    """Indicator of a rotated ellipse, antialiased by subpixel sampling.

    Semi-axes are ``width * side / 2`` pixels.
    """
    _check_side(side)
    width_h = width_v if width_h is None else width_h
    if width_v <= 0 or width_h <= 0:
        raise ValueError("defocus widths must be positive")
    av, ah = width_v * side / 2.0, width_h * side / 2.0
    off = (np.arange(subsample) + 0.5) / subsample - 0.5
    dy, dx = _grid(side)
    c, s = np.cos(orientation), np.sin(orientation)
    k = np.zeros((side, side))
    for oy in off:
        for ox in off:
            py, px = dy + oy, dx + ox
            a = c * py + s * px
            b = -s * py + c * px
            k += (a / av) ** 2 + (b / ah) ** 2 <= 1.0
    if k.sum() == 0:
        k[side // 2, side // 2] = 1.0
    if width_v == width_h or _diagonal_symmetric(orientation):
        k = 0.5 * (k + k.T)
    return k / k.sum()


@dataclass
class BlurSpec:
    family: str
    side: int = 9
    params: dict = field(default_factory=dict)
    seed: Optional[int] = None

    def __post_init__(self):
        if self.family not in FAMILIES:
            raise ValueError(f"unknown blur family {self.family!r}")


def make_kernel(spec, units="half-width"):
    p = spec.params
    if spec.family == "gaussian-isotropic":
        return gen_gaussian_kernel(spec.side, p["std"], units=units)
    if spec.family == "gaussian-anisotropic":
        return gen_gaussian_kernel(spec.side, p["std_v"], p["std_h"], p["orientation"], units)
    if spec.family == "uniform":
        return gen_uniform_kernel(spec.side, p["width"])
    return gen_defocus_kernel(spec.side, p["width_v"], p["width_h"], p["orientation"])


@dataclass
class DegradedSample:
    clean: np.ndarray
    kernel: np.ndarray
    sigma: float
    observed: np.ndarray
    seed: int
    split: str = "train"
    sample_id: str = ""
    blur: Optional[BlurSpec] = None


def blur_image(clean, kernel):
    """Circular blur; colour images are blurred channel by channel."""
    clean = np.asarray(clean, dtype=float)
    kernel = np.asarray(kernel, dtype=float)
    if clean.ndim == 3:
        return np.stack([circular_convolve(clean[..., c], kernel) for c in range(clean.shape[2])],
                        axis=-1)
    return circular_convolve(clean, kernel)


def degrade(clean, kernel, sigma, seed, split="train"):
    """``y = h * x + n`` with i.i.d. Gaussian noise drawn from ``default_rng(seed)``.

    The observation is not clipped.
    """
    if sigma < 0:
        raise ValueError("sigma must be nonnegative")
    blurred = blur_image(clean, kernel)
    rng = np.random.default_rng(seed)
    observed = blurred + sigma * rng.standard_normal(blurred.shape) if sigma > 0 else blurred
    return DegradedSample(clean=np.asarray(clean, dtype=float), kernel=np.asarray(kernel),
                          sigma=float(sigma), observed=observed, seed=int(seed), split=split)


# ---------------------------------------------------------------------------
# recipes


@dataclass
class Recipe:
    """How to turn a directory of images into degraded samples.

    ``blurs`` lists ``(family, count)`` per image. ``sigma`` is either a
    fixed value or a ``(low, high)`` uniform range. ``resize_to`` optionally
    rescales the shorter image side before the center crop.
    """

    name: str = "dataset1"
    side: int = 9
    crop: int = 64
    color: bool = False
    blurs: tuple = (("gaussian-isotropic", 2), ("gaussian-anisotropic", 8))
    iso_std: tuple = (0.2, 0.4)
    aniso_std: tuple = (0.15, 0.4)
    uniform_widths: tuple = (5, 7)
    defocus_width: tuple = (0.2, 0.5)
    sigma: object = 0.01
    width_units: str = "half-width"
    resize_to: Optional[int] = None
    splits: dict = field(default_factory=lambda: {"train": 1.0})
    max_images: Optional[int] = None
    seed: int = 0

    def __post_init__(self):
        self.blurs = tuple((str(f), int(c)) for f, c in self.blurs)
        for fam, _ in self.blurs:
            if fam not in FAMILIES:
                raise ValueError(f"unknown blur family {fam!r}")
        if isinstance(self.sigma, (list, tuple)):
            self.sigma = tuple(float(s) for s in self.sigma)
        total = sum(self.splits.values())
        if not self.splits or total <= 0:
            raise ValueError("splits must have positive total weight")

    @property
    def blurs_per_image(self):
        return sum(c for _, c in self.blurs)


def dataset1_recipe(**kw):
    """Grayscale, 2 isotropic + 8 anisotropic Gaussians per image, sigma = 0.01."""
    return Recipe(**{**dict(name="dataset1"), **kw})


def dataset2_recipe(**kw):
    """Colour, 10 Gaussians, 2 uniform and 3 defocus blurs, sigma ~ U[0.005, 0.05]."""
    base = dict(name="dataset2", color=True, sigma=(0.005, 0.05),
                blurs=(("gaussian-isotropic", 2), ("gaussian-anisotropic", 8),
                       ("uniform", 2), ("defocus", 3)))
    return Recipe(**{**base, **kw})


def sample_seed(global_seed, index):
    """Per-sample stream derived from ``(global_seed, index)``."""
    return int(np.random.SeedSequence([global_seed, index]).generate_state(1)[0])


def draw_blur(recipe, family, rank, rng):
    """Draw one ``BlurSpec``; ``rank`` indexes repeated draws of one family."""
    if family == "gaussian-isotropic":
        params = dict(std=float(rng.uniform(*recipe.iso_std)))
    elif family == "gaussian-anisotropic":
        params = dict(std_v=float(rng.uniform(*recipe.aniso_std)),
                      std_h=float(rng.uniform(*recipe.aniso_std)),
                      orientation=float(ORIENTATIONS[rng.integers(2)]))
    elif family == "uniform":
        params = dict(width=int(recipe.uniform_widths[rank % len(recipe.uniform_widths)]))
    else:
        params = dict(width_v=float(rng.uniform(*recipe.defocus_width)),
                      width_h=float(rng.uniform(*recipe.defocus_width)),
                      orientation=float(ORIENTATIONS[rng.integers(2)]))
    return BlurSpec(family=family, side=recipe.side, params=params)


def draw_sigma(recipe, rng):
    if isinstance(recipe.sigma, tuple):
        return float(rng.uniform(*recipe.sigma))
    return float(recipe.sigma)


def load_clean(path, recipe):
    """Read, optionally rescale, center-crop and 8-bit quantize one image.

    Grayscale recipes convert colour inputs by BT.601 luminance first.
    Returns ``None`` if the image is smaller than the crop.
    """
    with Image.open(path) as im:
        im = im.convert("RGB")
        if recipe.resize_to:
            w, h = im.size
            f = recipe.resize_to / min(w, h)
            im = im.resize((max(1, round(w * f)), max(1, round(h * f))), Image.LANCZOS)
        arr = np.asarray(im, dtype=float) / 255.0
    if not recipe.color:
        arr = np.rint(np.clip(arr @ LUMA, 0, 1) * 255.0) / 255.0
    H, W = arr.shape[:2]
    c = recipe.crop
    if H < c or W < c:
        return None
    top, left = (H - c) // 2, (W - c) // 2
    return arr[top:top + c, left:left + c]


def list_images(image_dir):
    return sorted(p for p in Path(image_dir).iterdir() if p.suffix.lower() in IMAGE_SUFFIXES)


def _split_of(i, n, splits):
    names = list(splits)
    w = np.array([splits[k] for k in names], dtype=float)
    edges = np.cumsum(w / w.sum()) * n
    return names[int(np.searchsorted(edges, i, side="right"))]


def build_dataset(image_dir, recipe, out_dir):
    """Degrade every readable image of ``image_dir`` per ``recipe``.

    Writes ``clean/``, ``observed/`` (``.npy`` plus a PNG preview),
    ``kernels/`` and ``manifest.jsonl`` into ``out_dir``; returns the
    manifest records. Splits are assigned per source image in sorted order.
    """
    out_dir = Path(out_dir)
    images = []
    for p in list_images(image_dir):
        try:
            clean = load_clean(p, recipe)
        except OSError as exc:
            log.warning("skipping unreadable image %s: %s", p, exc)
            continue
        if clean is None:
            log.warning("skipping %s: smaller than the %d px crop", p, recipe.crop)
            continue
        images.append((p, clean))
        if recipe.max_images and len(images) >= recipe.max_images:
            break
    if not images:
        raise ValueError(f"no usable images in {image_dir}")
    for sub in ("clean", "observed", "kernels"):
        (out_dir / sub).mkdir(parents=True, exist_ok=True)
    records = []
    index = 0
    for i, (path, clean) in enumerate(images):
        split = _split_of(i, len(images), recipe.splits)
        clean_rel = f"clean/{path.stem}.png"
        write_image(out_dir / clean_rel, clean)
        j = 0
        for family, count in recipe.blurs:
            for rank in range(count):
                seed = sample_seed(recipe.seed, index)
                rng = np.random.default_rng([seed, 0])
                spec = draw_blur(recipe, family, rank, rng)
                spec.seed = seed
                kernel = make_kernel(spec, recipe.width_units)
                sigma = draw_sigma(recipe, rng)
                s = degrade(clean, kernel, sigma, seed, split)
                sid = f"{path.stem}_{j:02d}"
                np.save(out_dir / "observed" / f"{sid}.npy", s.observed)
                write_image(out_dir / "observed" / f"{sid}.png", s.observed)
                write_kernel_csv(out_dir / "kernels" / f"{sid}.csv", kernel)
                records.append(dict(sample_id=sid, clean_path=clean_rel,
                                    observed_path=f"observed/{sid}.npy",
                                    kernel_path=f"kernels/{sid}.csv", sigma=sigma, seed=seed,
                                    split=split, blur_family=family, blur_params=spec.params,
                                    side=recipe.side, index=index))
                j += 1
                index += 1
    with open(out_dir / "manifest.jsonl", "w") as fh:
        for r in records:
            fh.write(json.dumps(r, sort_keys=True) + "\n")
    return records


def load_samples(manifest, split=None):
    """Read manifest entries back as :class:`DegradedSample` objects."""
    from .io import read_kernel_csv
    from .metrics import read_manifest

    manifest = Path(manifest)
    base = manifest.parent
    out = []
    for r in read_manifest(manifest):
        if split is not None and r["split"] != split:
            continue
        out.append(DegradedSample(
            clean=read_image(base / r["clean_path"]),
            kernel=read_kernel_csv(base / r["kernel_path"]),
            sigma=float(r["sigma"]),
            observed=np.load(base / r["observed_path"]),
            seed=int(r["seed"]), split=r["split"], sample_id=r["sample_id"],
            blur=BlurSpec(family=r["blur_family"], side=int(r.get("side", 9)),
                          params=r["blur_params"])))
    return out


def recipe_dict(recipe):
    d = asdict(recipe)
    d["blurs"] = [list(b) for b in recipe.blurs]
    return d
