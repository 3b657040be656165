import math

import numpy as np
import pytest

from rsic import metrics


def flat(value, dims=(64, 64)):
    return np.full((*dims, 3), value, dtype=np.float64)


def checkerboard(dims=(64, 64)):
    yy, xx = np.mgrid[0:dims[0], 0:dims[1]]
    board = ((yy // 4 + xx // 4) % 2).astype(np.float64)
    return np.repeat(board[:, :, None], 3, axis=2)


class TestPsnr:
    def test_identical_is_inf(self):
        a = np.random.default_rng(0).random((32, 32, 3))
        assert metrics.psnr(a, a) == math.inf

    def test_uniform_difference_values(self):
        # Oracle: PSNR = 10 log10(1 / d^2) for a constant difference d.
        for d in (16 / 255, 1 / 16):
            expected = 10.0 * math.log10(1.0 / d ** 2)
            assert metrics.psnr(flat(0.5), flat(0.5 + d)) == pytest.approx(expected, abs=1e-9)
        assert metrics.psnr(flat(0.5), flat(0.5 + 1 / 16)) == pytest.approx(24.0824, abs=1e-3)
        assert metrics.psnr(flat(0.5), flat(0.5 + 16 / 255)) == pytest.approx(24.0485, abs=1e-3)

    def test_symmetry(self):
        rng = np.random.default_rng(1)
        a, b = rng.random((32, 32, 3)), rng.random((32, 32, 3))
        assert metrics.psnr(a, b) == metrics.psnr(b, a)

    def test_dim_mismatch(self):
        with pytest.raises(ValueError):
            metrics.psnr(flat(0.1), flat(0.1, dims=(32, 64)))


class TestMaskedPsnr:
    def test_full_mask_equals_global(self):
        rng = np.random.default_rng(2)
        a, b = rng.random((32, 32, 3)), rng.random((32, 32, 3))
        mask = np.ones((32, 32), bool)
        assert metrics.masked_psnr(a, b, mask) == pytest.approx(metrics.psnr(a, b))

    def test_depends_only_on_masked_pixels(self):
        rng = np.random.default_rng(3)
        a, b = rng.random((32, 32, 3)), rng.random((32, 32, 3))
        mask = np.zeros((32, 32), bool)
        mask[8:16, 8:16] = True
        ref = metrics.masked_psnr(a, b, mask)
        b2 = b.copy()
        b2[~mask] = 0.0  # scramble everything outside
        assert metrics.masked_psnr(a, b2, mask) == pytest.approx(ref)

    def test_identical_inside_mask_is_inf(self):
        rng = np.random.default_rng(4)
        a = rng.random((32, 32, 3))
        b = a.copy()
        mask = np.zeros((32, 32), bool)
        mask[:8] = True
        b[16:] += 0.25
        assert metrics.masked_psnr(a, np.clip(b, 0, 1), mask) == math.inf

    def test_empty_mask_rejected(self):
        a = flat(0.5, (32, 32))
        with pytest.raises(ValueError):
            metrics.masked_psnr(a, a, np.zeros((32, 32), bool))


class TestSsim:
    def test_identical_is_one(self):
        a = np.random.default_rng(5).random((48, 48, 3))
        assert metrics.ssim(a, a) == pytest.approx(1.0, abs=1e-9)

    def test_inverted_checkerboard_disagrees(self):
        a = checkerboard()
        assert metrics.ssim(a, 1.0 - a) < 0.5

    def test_symmetry(self):
        rng = np.random.default_rng(6)
        a, b = rng.random((48, 48, 3)), rng.random((48, 48, 3))
        assert metrics.ssim(a, b) == pytest.approx(metrics.ssim(b, a), abs=1e-12)

    def test_too_small_rejected(self):
        a = flat(0.5, (8, 8))
        with pytest.raises(ValueError):
            metrics.ssim(a, a)


class TestMaskedSsim:
    def test_full_mask_equals_global(self):
        rng = np.random.default_rng(7)
        a, b = rng.random((48, 48, 3)), rng.random((48, 48, 3))
        mask = np.ones((48, 48), bool)
        assert metrics.masked_ssim(a, b, mask) == pytest.approx(metrics.ssim(a, b))

    def test_windows_inside_mask_only(self):
        rng = np.random.default_rng(8)
        a, b = rng.random((48, 48, 3)), rng.random((48, 48, 3))
        mask = np.zeros((48, 48), bool)
        mask[20:28, 20:28] = True
        ref = metrics.masked_ssim(a, b, mask)
        b2 = b.copy()
        b2[:14] = 0.0  # more than 5 px away from any masked center
        b2[:, :14] = 0.0
        assert metrics.masked_ssim(a, b2, mask) == pytest.approx(ref)

    def test_mask_without_valid_windows_rejected(self):
        a = flat(0.5, (48, 48))
        mask = np.zeros((48, 48), bool)
        mask[0, 0] = True  # window never fits at the corner center
        with pytest.raises(ValueError):
            metrics.masked_ssim(a, a, mask)

    def test_empty_mask_rejected(self):
        a = flat(0.5, (48, 48))
        with pytest.raises(ValueError):
            metrics.masked_ssim(a, a, np.zeros((48, 48), bool))
