import csv
import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from unrolled_vba.io import write_image, write_kernel_csv
from unrolled_vba.metrics import (
    PSNR_CAP,
    evaluate,
    kernel_hinf,
    kernel_mae,
    kernel_mse,
    psnr,
    ssim,
)


def naive_dft2(a, n):
    """Direct O(n^4) DFT of ``a`` zero-padded to ``n x n``."""
    out = np.zeros((n, n), dtype=complex)
    for u in range(n):
        for v in range(n):
            for i in range(a.shape[0]):
                for j in range(a.shape[1]):
                    out[u, v] += a[i, j] * np.exp(-2j * np.pi * (u * i + v * j) / n)
    return out


def test_kernel_mse_examples():
    u = np.full((3, 3), 1 / 9)
    d = np.zeros((3, 3))
    d[1, 1] = 1
    assert kernel_mse(u, u) == 0.0
    ref = (1 - 1 / 9) ** 2 + 8 * (1 / 9) ** 2
    assert kernel_mse(d, u) == pytest.approx(ref, abs=1e-15)
    assert kernel_mse(d, u) == pytest.approx(0.8889, abs=1e-4)
    assert kernel_mse(d, u) == kernel_mse(u, d)


def test_kernel_mse_size_mismatch():
    with pytest.raises(ValueError):
        kernel_mse(np.zeros(9), np.zeros(25))


def test_hinf_naive_dft(rng):
    a, b = rng.uniform(0, 1, (3, 3)), rng.uniform(0, 1, (3, 3))
    ref = np.max(np.abs(naive_dft2(a - b, 8)))
    assert abs(kernel_hinf(a, b, pad_size=8) - ref) < 1e-10
    assert kernel_hinf(a, a) == 0.0


def test_hinf_sum_to_one_off_dc(rng):
    a, b = rng.uniform(0, 1, (5, 5)), rng.uniform(0, 1, (5, 5))
    a, b = a / a.sum(), b / b.sum()
    F = np.abs(np.fft.fft2(a - b, s=(16, 16)))
    assert F[0, 0] < 1e-15
    assert kernel_hinf(a, b, 16) == pytest.approx(F.max()) and F.max() > 0


def test_mae_examples(rng):
    a, b = rng.standard_normal(9), rng.standard_normal(9)
    assert kernel_mae(a, a) == 0.0
    assert kernel_mae(a, b) == pytest.approx(sum(abs(x - y) for x, y in zip(a, b)), rel=1e-14)
    assert kernel_mae(b + 3 * (a - b), b) == pytest.approx(3 * kernel_mae(a, b), rel=1e-12)


def test_psnr_examples(rng):
    x = rng.uniform(0, 0.8, (32, 32))
    assert psnr(x, x) == PSNR_CAP == 99.0
    assert psnr(x + 0.1, x) == pytest.approx(20.0, abs=1e-10)
    rgb = rng.uniform(0, 0.8, (16, 16, 3))
    assert psnr(rgb + 0.1, rgb) == pytest.approx(20.0, abs=1e-10)


def test_ssim_identity_and_symmetry(rng):
    x, y = rng.uniform(0, 1, (40, 40)), rng.uniform(0, 1, (40, 40))
    assert ssim(x, x) == 1.0
    assert ssim(x, y) == pytest.approx(ssim(y, x), abs=1e-14)
    assert -1 <= ssim(x, y) <= 1


def test_ssim_matches_scikit_image(rng):
    metrics = pytest.importorskip("skimage.metrics")
    x = rng.uniform(0, 1, (48, 40))
    y = np.clip(x + 0.1 * rng.standard_normal(x.shape), 0, 1)
    ref = metrics.structural_similarity(x, y, data_range=1.0, gaussian_weights=True, sigma=1.5,
                                        use_sample_covariance=False)
    assert ssim(x, y) == pytest.approx(ref, abs=1e-10)


def test_ssim_gradient(rng):
    x = rng.uniform(0, 1, (24, 24))
    y = np.clip(x + 0.1 * rng.standard_normal(x.shape), 0, 1)
    _, g = ssim(x, y, return_grad=True)
    d = rng.standard_normal(x.shape)
    eps = 1e-6
    fd = (ssim(x + eps * d, y) - ssim(x - eps * d, y)) / (2 * eps)
    assert np.sum(g * d) == pytest.approx(fd, rel=1e-6)


def test_ssim_rejects_small():
    with pytest.raises(ValueError):
        ssim(np.zeros((8, 8)), np.zeros((8, 8)))


@settings(deadline=None, max_examples=30)
@given(seed=st.integers(0, 10 ** 6), H=st.integers(11, 40), W=st.integers(11, 40),
       scale=st.floats(1e-2, 1e2))
def test_property_ssim_self_is_one(seed, H, W, scale):
    x = scale * np.random.default_rng(seed).uniform(0, 1, (H, W))
    assert ssim(x, x) == 1.0


@settings(deadline=None, max_examples=30)
@given(seed=st.integers(0, 10 ** 6), n=st.sampled_from([9, 25, 49]))
def test_property_kernel_metrics_nonnegative(seed, n):
    r = np.random.default_rng(seed)
    a, b = r.standard_normal(n), r.standard_normal(n)
    for f in (kernel_mse, kernel_mae, kernel_hinf):
        assert f(a, b) > 0 and f(a, a) == 0


def test_psnr_decreases_with_noise():
    x = np.linspace(0, 1, 64 * 64).reshape(64, 64)
    wins = 0
    for seed in range(5):
        r = np.random.default_rng(seed)
        vals = [psnr(x + s * r.standard_normal(x.shape), x) for s in (0.01, 0.02, 0.05)]
        wins += vals[0] > vals[1] > vals[2]
    assert wins >= 3


# ---------------------------------------------------------------------------
# evaluate


@pytest.fixture
def results(tmp_path, rng):
    base = tmp_path / "ds"
    res = tmp_path / "res"
    lines = []
    for i in range(3):
        sid = f"img_{i:02d}"
        x = rng.uniform(0, 1, (20, 20))
        k = rng.uniform(0, 1, (3, 3))
        k /= k.sum()
        write_image(base / "clean" / f"{sid}.png", x)
        write_kernel_csv(base / "kernels" / f"{sid}.csv", k)
        write_image(res / f"{sid}.png", np.clip(x + 0.05 * rng.standard_normal(x.shape), 0, 1))
        write_kernel_csv(res / f"{sid}_kernel.csv", np.full((3, 3), 1 / 9))
        lines.append(dict(sample_id=sid, clean_path=f"clean/{sid}.png",
                          kernel_path=f"kernels/{sid}.csv"))
    (base / "manifest.jsonl").write_text("".join(json.dumps(r) + "\n" for r in lines))
    return base / "manifest.jsonl", res


def test_evaluate_report(results):
    manifest, res = results
    report = evaluate(manifest, res)
    assert len(report.rows) == 3
    with open(res / "report.csv") as fh:
        rows = list(csv.DictReader(fh))
    assert list(rows[0]) == ["sample_id", "kernel_mse", "kernel_hinf", "kernel_mae", "psnr",
                             "ssim"]
    agg = json.loads((res / "report.json").read_text())
    for m in ("kernel_mse", "psnr", "ssim"):
        assert agg[m]["mean"] == pytest.approx(np.mean([float(r[m]) for r in rows]), rel=1e-12)
    again = evaluate(manifest, res)
    assert again.rows == report.rows


def test_evaluate_empty_join(results, tmp_path):
    manifest, _ = results
    (tmp_path / "empty").mkdir()
    with pytest.raises(ValueError):
        evaluate(manifest, tmp_path / "empty")
