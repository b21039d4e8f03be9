import math
import warnings

import numpy as np
import pytest

from hsdenoise.errors import DimensionError, DomainError
from hsdenoise.metrics import (
    band_fsim,
    band_psnr,
    band_ssim,
    ergas,
    metric_report,
    mfsim,
    mpsnr,
    msam,
    mssim,
)
from hsdenoise.noise import apply_iid_gaussian
from hsdenoise.synthetic import make_cube


def textured_cube(seed=0, bands=3, size=48):
    return make_cube(bands=bands, height=size, width=size, seed=seed).data.astype(np.float64)


class TestMpsnr:
    def test_identical_is_inf(self):
        x = textured_cube()
        assert mpsnr(x, x) == math.inf

    def test_uniform_mse(self):
        x = np.zeros((2, 10, 10))
        y = np.full((2, 10, 10), 0.1)
        assert mpsnr(x, y) == pytest.approx(20.0, abs=1e-9)

    def test_banded_mse_average(self):
        x = np.zeros((2, 10, 10))
        y = np.zeros((2, 10, 10))
        y[0] = 0.1  # mse 1e-2 -> 20 dB
        y[1] = 0.01  # mse 1e-4 -> 40 dB
        assert mpsnr(x, y) == pytest.approx(30.0, abs=1e-9)
        np.testing.assert_allclose(band_psnr(x, y), [20.0, 40.0], atol=1e-9)

    def test_shape_mismatch(self):
        with pytest.raises(DimensionError):
            mpsnr(np.zeros((1, 2, 2)), np.zeros((1, 2, 3)))


class TestMssim:
    def test_identical_is_one(self):
        x = textured_cube(1)
        assert mssim(x, x) == pytest.approx(1.0, abs=1e-12)

    def test_inverted_below_one(self):
        x = textured_cube(2)
        assert mssim(x, 1.0 - x) < 1.0

    def test_matches_hand_computed_windows(self):
        # 12x12 two-block fixture: direct formula evaluation as the oracle
        a = np.zeros((12, 12))
        a[:, :6] = 0.2
        a[:, 6:] = 0.8
        rng = np.random.default_rng(3)
        b = a + 0.05 * rng.standard_normal((12, 12))

        def oracle(x, y):
            coords = np.arange(11) - 5.0
            g = np.exp(-(coords**2) / (2 * 1.5**2))
            win = np.outer(g, g)
            win /= win.sum()
            c1, c2 = 0.01**2, 0.03**2
            vals = []
            for top in range(2):
                for left in range(2):
                    px = x[top : top + 11, left : left + 11]
                    py = y[top : top + 11, left : left + 11]
                    mu1 = (win * px).sum()
                    mu2 = (win * py).sum()
                    v1 = (win * px * px).sum() - mu1**2
                    v2 = (win * py * py).sum() - mu2**2
                    cov = (win * px * py).sum() - mu1 * mu2
                    vals.append(
                        ((2 * mu1 * mu2 + c1) * (2 * cov + c2))
                        / ((mu1**2 + mu2**2 + c1) * (v1 + v2 + c2))
                    )
            return float(np.mean(vals))

        assert band_ssim(a, b) == pytest.approx(oracle(a, b), abs=1e-12)

    def test_symmetric(self):
        x = textured_cube(4)
        y = textured_cube(5)
        assert mssim(x, y) == pytest.approx(mssim(y, x), abs=1e-12)

    def test_small_image_fallback(self):
        rng = np.random.default_rng(6)
        a = rng.random((1, 8, 8))
        val = mssim(a, a)
        assert val == pytest.approx(1.0, abs=1e-12)


class TestMfsim:
    def test_identical_is_one(self):
        x = textured_cube(7)
        assert mfsim(x, x) == pytest.approx(1.0, abs=1e-12)

    def test_constant_pair_defined_as_one(self):
        a = np.full((1, 16, 16), 0.4)
        b = np.full((1, 16, 16), 0.6)
        assert band_fsim(a[0], b[0]) == 1.0

    def test_monotone_degradation(self):
        x = textured_cube(8, bands=2, size=64)
        mild = apply_iid_gaussian(x, 10.0, seed=1)
        harsh = apply_iid_gaussian(x, 50.0, seed=1)
        assert mfsim(x, harsh) < mfsim(x, mild) < 1.0

    def test_symmetric(self):
        x = textured_cube(9, bands=1)
        y = apply_iid_gaussian(x, 30.0, seed=2)
        assert mfsim(x, y) == pytest.approx(mfsim(y, x), abs=1e-12)


class TestErgas:
    def test_identical_is_zero(self):
        x = textured_cube(10)
        assert ergas(x, x) == 0.0

    def test_single_band_analytic(self):
        x = np.full((1, 10, 10), 0.5)
        y = x + 0.1
        assert ergas(x, y) == pytest.approx(20.0, abs=1e-9)

    def test_scale_covariance(self):
        x = textured_cube(11)
        y = apply_iid_gaussian(x, 25.0, seed=3)
        assert ergas(3.0 * x, 3.0 * y) == pytest.approx(ergas(x, y), rel=1e-12)

    def test_zero_mean_band_excluded(self):
        x = np.zeros((2, 4, 4))
        x[1] = 0.5
        y = x + 0.1
        with pytest.warns(UserWarning):
            val = ergas(x, y)
        assert val == pytest.approx(20.0, abs=1e-9)

    def test_all_zero_mean_rejected(self):
        with pytest.raises(DomainError), warnings.catch_warnings():
            warnings.simplefilter("ignore")
            ergas(np.zeros((1, 2, 2)), np.ones((1, 2, 2)))


class TestMsam:
    def test_identical_is_zero(self):
        x = textured_cube(12)
        assert msam(x, x) == pytest.approx(0.0, abs=1e-5)

    def test_orthogonal_spectra(self):
        a = np.zeros((2, 1, 1))
        b = np.zeros((2, 1, 1))
        a[0] = 1.0
        b[1] = 1.0
        assert msam(a, b) == pytest.approx(90.0, abs=1e-9)

    def test_scale_invariance(self):
        x = textured_cube(13)
        assert msam(x, 2.0 * x) == pytest.approx(0.0, abs=1e-5)

    def test_zero_norm_pixels_excluded(self):
        a = np.zeros((2, 1, 2))
        a[:, 0, 1] = [1.0, 0.0]
        b = np.zeros((2, 1, 2))
        b[:, 0, 1] = [1.0, 0.0]
        with pytest.warns(UserWarning):
            val = msam(a, b)
        assert val == pytest.approx(0.0, abs=1e-9)


class TestMonotonicityAndReport:
    def test_noise_degrades_psnr_and_ssim(self):
        x = textured_cube(14, bands=4)
        scores = []
        for sigma in (10.0, 25.0, 50.0):
            y = apply_iid_gaussian(x, sigma, seed=4)
            scores.append((mpsnr(x, y), mssim(x, y)))
        assert scores[0][0] > scores[1][0] > scores[2][0]
        assert scores[0][1] > scores[1][1] > scores[2][1]

    def test_report_identity_values(self):
        x = textured_cube(15)
        rep = metric_report(x, x)
        assert rep.mpsnr == math.inf
        assert rep.mssim == pytest.approx(1.0, abs=1e-12)
        assert rep.ergas == 0.0
        assert rep.msam == pytest.approx(0.0, abs=1e-5)

    def test_report_formats(self):
        x = textured_cube(16, bands=2)
        y = apply_iid_gaussian(x, 25.0, seed=5)
        rep = metric_report(x, y)
        lines = rep.to_lines()
        parsed = dict(row.split("\t") for row in lines.splitlines())
        assert float(parsed["mpsnr_db"]) == pytest.approx(rep.mpsnr, abs=1e-5)
        assert "band0.psnr_db" in parsed
        table = rep.to_table()
        assert "MPSNR" in table and "MSAM" in table
