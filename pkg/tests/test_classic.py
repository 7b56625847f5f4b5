import numpy as np
import pytest

from dubm3d.classic import (
    ClassicConfig,
    bm3d,
    dct2,
    estimate_sigma,
    haar_forward,
    haar_inverse,
    haar_matrix,
    hard_threshold_filter,
    idct2,
    wiener_filter,
)
from dubm3d.imageio import make_phantom
from dubm3d.metrics import psnr
from dubm3d.rng import SplitMix64


def test_dct_constant_patch():
    c = 0.3
    coef = dct2(np.full((8, 8), c))
    assert coef[0, 0] == pytest.approx(8 * c)
    coef[0, 0] = 0
    assert np.abs(coef).max() < 1e-12


def test_dct_inverse_and_parseval():
    x = SplitMix64(0).normal((8, 8))
    coef = dct2(x)
    assert np.abs(idct2(coef) - x).max() < 1e-5
    assert abs((coef**2).sum() - (x**2).sum()) / (x**2).sum() < 1e-6


def test_dct_matches_explicit_formula():
    x = SplitMix64(1).normal((4, 4))
    n = 4
    a = lambda k: np.sqrt(1 / n) if k == 0 else np.sqrt(2 / n)  # noqa: E731
    ref = np.zeros((n, n))
    for u in range(n):
        for v in range(n):
            s = 0.0
            for i in range(n):
                for j in range(n):
                    s += x[i, j] * np.cos(np.pi * (2 * i + 1) * u / (2 * n)) * np.cos(np.pi * (2 * j + 1) * v / (2 * n))
            ref[u, v] = a(u) * a(v) * s
    np.testing.assert_allclose(dct2(x), ref, atol=1e-12)


def test_haar_identical_patches_energy_in_first():
    p = SplitMix64(2).normal((8, 8))
    coef = haar_forward(np.broadcast_to(p, (8, 8, 8)))
    np.testing.assert_allclose(coef[0], np.sqrt(8) * p, atol=1e-12)
    assert np.abs(coef[1:]).max() < 1e-12


@pytest.mark.parametrize("k", [1, 2, 4, 8, 16])
def test_haar_inverse_parseval(k):
    s = SplitMix64(k).normal((k, 4, 4))
    coef = haar_forward(s)
    assert np.abs(haar_inverse(coef) - s).max() < 1e-6
    assert abs((coef**2).sum() - (s**2).sum()) / (s**2).sum() < 1e-6
    np.testing.assert_allclose(haar_matrix(k) @ haar_matrix(k).T, np.eye(k), atol=1e-12)


def test_haar_rejects_non_power_of_two():
    with pytest.raises(ValueError):
        haar_forward(np.zeros((6, 4, 4)))


def test_hard_threshold_zero_stack():
    cfg = ClassicConfig(sigma=0.1)
    out, w = hard_threshold_filter(np.zeros((8, 8, 8)), cfg)
    assert not out.any()
    assert w == pytest.approx(1 / 0.1**2)


def test_hard_threshold_constant_stack_passes():
    c = 0.4
    cfg = ClassicConfig(sigma=0.05, lambda_thr=2.7)
    assert cfg.lambda_thr * cfg.sigma < 8 * np.sqrt(8) * c
    out, w = hard_threshold_filter(np.full((8, 8, 8), c), cfg)
    np.testing.assert_allclose(out, c, atol=1e-12)
    assert w == pytest.approx(1 / cfg.sigma**2)


def test_hard_threshold_zero_lambda_limit_is_identity():
    s = SplitMix64(3).normal((8, 8, 8))
    out, _ = hard_threshold_filter(s, ClassicConfig(sigma=1.0, lambda_thr=1e-300))
    assert np.abs(out - s).max() < 1e-5


def test_hard_threshold_rejects_zero_lambda():
    with pytest.raises(ValueError):
        ClassicConfig(sigma=1.0, lambda_thr=0.0)


def test_hard_threshold_kills_pure_noise():
    sigma = 0.1
    noise = sigma * SplitMix64(4).normal((1000, 8, 8, 8))
    out, _ = hard_threshold_filter(noise, ClassicConfig(sigma=sigma, lambda_thr=2.7))
    assert out.var() < 0.15 * noise.var()


def test_wiener_gains():
    cfg = ClassicConfig(sigma=0.5)
    noisy = SplitMix64(5).normal((2, 4, 4))
    zero_out, _ = wiener_filter(noisy, np.zeros_like(noisy), cfg)
    assert np.abs(zero_out).max() < 1e-12

    # pilot with a single 3-D coefficient of magnitude S = sigma: gain exactly 1/2
    from dubm3d.classic import inverse3d, transform3d

    pc = np.zeros((2, 4, 4))
    pc[0, 0, 0] = cfg.sigma
    out, w = wiener_filter(noisy, inverse3d(pc), cfg)
    nc = transform3d(noisy)
    oc = transform3d(out)
    assert oc[0, 0, 0] == pytest.approx(0.5 * nc[0, 0, 0])
    assert np.abs(oc.ravel()[1:]).max() < 1e-9
    assert w == pytest.approx(1 / (cfg.sigma**2 * 0.25))

    big, _ = wiener_filter(noisy, noisy * 1e6, cfg)
    np.testing.assert_allclose(big, noisy, atol=1e-9)


def test_wiener_shape_mismatch():
    with pytest.raises(ValueError):
        wiener_filter(np.zeros((2, 4, 4)), np.zeros((4, 4, 4)), ClassicConfig(sigma=1))


def test_sigma_estimate_gaussian():
    x = make_phantom("disks", 128, 128, 1).pixels
    y = x + 0.05 * SplitMix64(6).normal(x.shape)
    assert estimate_sigma(y) == pytest.approx(0.05, rel=0.1)


def test_bm3d_gain_on_disks():
    x = make_phantom("disks", 64, 64, 7).pixels
    y = (x + 25 / 255 * SplitMix64(7).normal(x.shape)).astype(np.float32)
    assert psnr(bm3d(y), x) - psnr(y, x) >= 2.0


def test_bm3d_constant_image():
    out = bm3d(np.full((32, 32), 0.6, dtype=np.float32))
    np.testing.assert_allclose(out, 0.6, atol=1e-6)
