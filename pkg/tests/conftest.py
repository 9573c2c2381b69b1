import shutil
from pathlib import Path

import numpy as np
import pytest

import acceptance_log
from unrolled_vba.datagen import degrade, gen_gaussian_kernel

SOURCE_IMAGES = ("astronaut.png", "brick.png", "camera.png", "cell.png", "chelsea.png",
                 "coffee.png", "coins.png", "grass.png", "gravel.png", "hubble_deep_field.jpg",
                 "moon.png", "motorcycle_left.png", "retina.jpg", "rocket.jpg")


def _skimage_data_dir():
    skimage = pytest.importorskip("skimage")
    return Path(skimage.data_dir)


@pytest.fixture(scope="session")
def image_dir(tmp_path_factory):
    """Directory of natural test images copied from the scikit-image data set."""
    src = _skimage_data_dir()
    out = tmp_path_factory.mktemp("images")
    for name in SOURCE_IMAGES:
        if (src / name).exists():
            shutil.copy(src / name, out / name)
    if not any(out.iterdir()):
        pytest.skip("scikit-image sample images are not available")
    return out


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def small_sample():
    """A 32x32 smooth random scene blurred by a 9x9 Gaussian, sigma = 0.01."""
    r = np.random.default_rng(7)
    x = r.uniform(0, 1, (32, 32))
    for _ in range(3):
        x = 0.25 * (np.roll(x, 1, 0) + np.roll(x, -1, 0) + np.roll(x, 1, 1) + np.roll(x, -1, 1))
    x = (x - x.min()) / (x.max() - x.min())
    return degrade(x, gen_gaussian_kernel(9, 0.3), 0.01, seed=11)


def pytest_terminal_summary(terminalreporter):
    if acceptance_log.LINES:
        terminalreporter.section("acceptance criteria")
        for line in acceptance_log.LINES:
            terminalreporter.write_line(line)
