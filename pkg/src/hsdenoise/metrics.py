"""Quality indexes for hyperspectral restoration, band-wise then averaged.

Conventions (flagged in report headers): PSNR peak is 1.0 on normalized
data and identical inputs report infinity; the ERGAS resolution ratio is 1;
spectral angles are reported in degrees. PSNR, ERGAS and MSAM treat the
first argument as the reference; SSIM and FSIM are symmetric.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field

import numpy as np

from .errors import DimensionError, DomainError


def _check_pair(ref: np.ndarray, est: np.ndarray):
    ref = np.asarray(ref, dtype=np.float64)
    est = np.asarray(est, dtype=np.float64)
    if ref.shape != est.shape:
        raise DimensionError(f"image shapes differ: {ref.shape} vs {est.shape}")
    if ref.ndim != 3:
        raise DimensionError(f"expected (c, h, w) cubes, got {ref.shape}")
    return ref, est


def band_psnr(ref, est, peak: float = 1.0) -> np.ndarray:
    ref, est = _check_pair(ref, est)
    out = np.empty(ref.shape[0])
    for b in range(ref.shape[0]):
        err = np.mean((ref[b] - est[b]) ** 2)
        out[b] = math.inf if err == 0 else 10.0 * math.log10(peak**2 / err)
    return out


def mpsnr(ref, est, peak: float = 1.0) -> float:
    """Per-band PSNR averaged across bands; +inf when the images are identical."""
    return float(np.mean(band_psnr(ref, est, peak)))


# ---------------------------------------------------------------------------
# SSIM

_SSIM_WINDOW = 11
_SSIM_SIGMA = 1.5
_K1, _K2 = 0.01, 0.03


def _gaussian_window(side: int, sigma: float) -> np.ndarray:
    half = (side - 1) / 2.0
    coords = np.arange(side) - half
    g = np.exp(-(coords**2) / (2 * sigma**2))
    k = np.outer(g, g)
    return k / k.sum()


def _filter_valid(img: np.ndarray, kernel: np.ndarray) -> np.ndarray:
    s = kernel.shape[0]
    win = np.lib.stride_tricks.sliding_window_view(img, (s, s))
    return np.einsum("ijkl,kl->ij", win, kernel)


def band_ssim(ref_band: np.ndarray, est_band: np.ndarray, drange: float = 1.0) -> float:
    """Gaussian-window SSIM of one band over valid window positions.

    Images smaller than the window fall back to whole-image statistics.
    """
    c1 = (_K1 * drange) ** 2
    c2 = (_K2 * drange) ** 2
    h, w = ref_band.shape
    if h < _SSIM_WINDOW or w < _SSIM_WINDOW:
        mu1, mu2 = ref_band.mean(), est_band.mean()
        v1, v2 = ref_band.var(), est_band.var()
        cov = ((ref_band - mu1) * (est_band - mu2)).mean()
        return float(
            ((2 * mu1 * mu2 + c1) * (2 * cov + c2))
            / ((mu1**2 + mu2**2 + c1) * (v1 + v2 + c2))
        )
    win = _gaussian_window(_SSIM_WINDOW, _SSIM_SIGMA)
    mu1 = _filter_valid(ref_band, win)
    mu2 = _filter_valid(est_band, win)
    mu1_sq, mu2_sq, mu12 = mu1 * mu1, mu2 * mu2, mu1 * mu2
    s1 = _filter_valid(ref_band * ref_band, win) - mu1_sq
    s2 = _filter_valid(est_band * est_band, win) - mu2_sq
    s12 = _filter_valid(ref_band * est_band, win) - mu12
    ssim_map = ((2 * mu12 + c1) * (2 * s12 + c2)) / ((mu1_sq + mu2_sq + c1) * (s1 + s2 + c2))
    return float(ssim_map.mean())


def mssim(ref, est, drange: float = 1.0) -> float:
    ref, est = _check_pair(ref, est)
    return float(np.mean([band_ssim(ref[b], est[b], drange) for b in range(ref.shape[0])]))


# ---------------------------------------------------------------------------
# FSIM: phase congruency (log-Gabor bank) and Scharr gradient similarity

_FSIM_T1 = 0.85  # phase congruency similarity constant
_FSIM_T2 = 160.0  # gradient similarity constant, 0..255 scale
_PC_SCALES = 4
_PC_ORIENTS = 4
_PC_MIN_WAVELENGTH = 6.0
_PC_MULT = 2.0
_PC_SIGMA_ONF = 0.55
_PC_DTHETA_SIGMA = 1.2
_PC_NOISE_K = 2.0
_PC_CUTOFF = 0.5
_PC_G = 10.0
_EPS = 1e-10


def _pc_filter_bank(h: int, w: int):
    fy = np.fft.fftfreq(h)[:, None]
    fx = np.fft.fftfreq(w)[None, :]
    radius = np.sqrt(fy**2 + fx**2)
    radius[0, 0] = 1.0  # avoid log(0); the DC entry of each filter is zeroed below
    theta = np.arctan2(-fy, fx)
    sintheta, costheta = np.sin(theta), np.cos(theta)

    log_gabors = []
    for s in range(_PC_SCALES):
        f0 = 1.0 / (_PC_MIN_WAVELENGTH * _PC_MULT**s)
        lg = np.exp(-(np.log(radius / f0) ** 2) / (2 * np.log(_PC_SIGMA_ONF) ** 2))
        lg[0, 0] = 0.0
        log_gabors.append(lg)

    spreads = []
    theta_sigma = np.pi / _PC_ORIENTS / _PC_DTHETA_SIGMA
    for o in range(_PC_ORIENTS):
        angle = o * np.pi / _PC_ORIENTS
        ds = sintheta * np.cos(angle) - costheta * np.sin(angle)
        dc = costheta * np.cos(angle) + sintheta * np.sin(angle)
        dtheta = np.abs(np.arctan2(ds, dc))
        spreads.append(np.exp(-(dtheta**2) / (2 * theta_sigma**2)))
    return log_gabors, spreads


def phase_congruency(img: np.ndarray) -> np.ndarray:
    """Kovesi-style phase congruency map with noise compensation."""
    h, w = img.shape
    log_gabors, spreads = _pc_filter_bank(h, w)
    spectrum = np.fft.fft2(img)
    total_energy = np.zeros((h, w))
    total_sum_an = np.zeros((h, w))
    for o in range(_PC_ORIENTS):
        responses = [np.fft.ifft2(spectrum * log_gabors[s] * spreads[o]) for s in range(_PC_SCALES)]
        amplitudes = [np.abs(r) for r in responses]
        sum_re = sum(r.real for r in responses)
        sum_im = sum(r.imag for r in responses)
        sum_an = sum(amplitudes)
        max_an = np.maximum.reduce(amplitudes)
        tau = np.median(amplitudes[0]) / np.sqrt(np.log(4.0))
        x_energy = np.sqrt(sum_re**2 + sum_im**2) + _EPS
        mean_re, mean_im = sum_re / x_energy, sum_im / x_energy
        # per-scale projections onto the mean phase
        energy = np.zeros((h, w))
        for r in responses:
            re, im = r.real, r.imag
            energy += re * mean_re + im * mean_im - np.abs(re * mean_im - im * mean_re)
        total_tau = tau * (1 - (1 / _PC_MULT) ** _PC_SCALES) / (1 - 1 / _PC_MULT)
        noise_mean = total_tau * np.sqrt(np.pi / 2)
        noise_sigma = total_tau * np.sqrt((4 - np.pi) / 2)
        energy = np.maximum(energy - (noise_mean + _PC_NOISE_K * noise_sigma), 0.0)
        width = (sum_an / (max_an + _EPS)) / _PC_SCALES
        weight = 1.0 / (1.0 + np.exp(_PC_G * (_PC_CUTOFF - width)))
        total_energy += weight * energy
        total_sum_an += sum_an
    return total_energy / (total_sum_an + _EPS)


_SCHARR_X = np.array([[3, 0, -3], [10, 0, -10], [3, 0, -3]], dtype=np.float64) / 16.0


def _scharr_magnitude(img: np.ndarray) -> np.ndarray:
    padded = np.pad(img, 1, mode="edge")
    gx = _filter_valid(padded, _SCHARR_X)
    gy = _filter_valid(padded, _SCHARR_X.T)
    return np.sqrt(gx**2 + gy**2)


def band_fsim(ref_band: np.ndarray, est_band: np.ndarray) -> float:
    """Feature similarity of one band; constant-vs-constant is defined as 1."""
    a = ref_band * 255.0
    b = est_band * 255.0
    pc1, pc2 = phase_congruency(a), phase_congruency(b)
    g1, g2 = _scharr_magnitude(a), _scharr_magnitude(b)
    s_pc = (2 * pc1 * pc2 + _FSIM_T1) / (pc1**2 + pc2**2 + _FSIM_T1)
    s_g = (2 * g1 * g2 + _FSIM_T2) / (g1**2 + g2**2 + _FSIM_T2)
    pcm = np.maximum(pc1, pc2)
    denom = pcm.sum()
    if denom == 0.0:
        return 1.0  # featureless pair carries no evidence of dissimilarity
    return float((s_pc * s_g * pcm).sum() / denom)


def mfsim(ref, est) -> float:
    ref, est = _check_pair(ref, est)
    return float(np.mean([band_fsim(ref[b], est[b]) for b in range(ref.shape[0])]))


# ---------------------------------------------------------------------------
# ERGAS and spectral angle


def ergas(ref, est, ratio: float = 1.0) -> float:
    """100 * ratio * sqrt(mean_j(mse_j / mean_j^2)); zero-mean bands excluded."""
    ref, est = _check_pair(ref, est)
    terms = []
    for b in range(ref.shape[0]):
        mean = ref[b].mean()
        if mean == 0.0:
            warnings.warn(f"ergas: band {b} has zero mean and was excluded")
            continue
        terms.append(np.mean((ref[b] - est[b]) ** 2) / mean**2)
    if not terms:
        raise DomainError("ergas: every band has zero reference mean")
    return float(100.0 * ratio * np.sqrt(np.mean(terms)))


def msam(ref, est) -> float:
    """Mean per-pixel spectral angle in degrees; zero-norm pixels excluded."""
    ref, est = _check_pair(ref, est)
    c = ref.shape[0]
    r = ref.reshape(c, -1)
    e = est.reshape(c, -1)
    nr = np.linalg.norm(r, axis=0)
    ne = np.linalg.norm(e, axis=0)
    valid = (nr > 0) & (ne > 0)
    if not valid.all():
        warnings.warn(f"msam: {np.count_nonzero(~valid)} zero-norm pixels excluded")
    if not valid.any():
        raise DomainError("msam: no pixel has nonzero spectra in both images")
    cosines = np.sum(r[:, valid] * e[:, valid], axis=0) / (nr[valid] * ne[valid])
    angles = np.degrees(np.arccos(np.clip(cosines, -1.0, 1.0)))
    return float(angles.mean())


# ---------------------------------------------------------------------------
# report


@dataclass
class MetricReport:
    mpsnr: float
    mssim: float
    mfsim: float
    ergas: float
    msam: float
    psnr_per_band: np.ndarray = field(repr=False)
    ssim_per_band: np.ndarray = field(repr=False)

    HEADER_FLAGS = (
        "psnr: peak=1.0 on normalized data, identical images report inf",
        "ergas: resolution ratio fixed to 1",
        "msam: degrees",
    )

    def to_lines(self) -> str:
        """Machine format: one tab-separated key/value pair per line."""
        rows = [
            ("mpsnr_db", self.mpsnr),
            ("mssim", self.mssim),
            ("mfsim", self.mfsim),
            ("ergas", self.ergas),
            ("msam_deg", self.msam),
        ]
        out = [f"{k}\t{v:.6f}" if math.isfinite(v) else f"{k}\tinf" for k, v in rows]
        for b, (p, s) in enumerate(zip(self.psnr_per_band, self.ssim_per_band)):
            ptxt = f"{p:.6f}" if math.isfinite(p) else "inf"
            out.append(f"band{b}.psnr_db\t{ptxt}")
            out.append(f"band{b}.ssim\t{s:.6f}")
        return "\n".join(out)

    def to_table(self) -> str:
        def fmt(v):
            return f"{v:10.4f}" if math.isfinite(v) else f"{'inf':>10}"

        lines = [
            "metric        value",
            "-------------------",
            f"MPSNR (dB) {fmt(self.mpsnr)}",
            f"MSSIM      {fmt(self.mssim)}",
            f"MFSIM      {fmt(self.mfsim)}",
            f"ERGAS      {fmt(self.ergas)}",
            f"MSAM (deg) {fmt(self.msam)}",
        ]
        return "\n".join(lines)


def metric_report(ref, est) -> MetricReport:
    ref, est = _check_pair(ref, est)
    per_psnr = band_psnr(ref, est)
    per_ssim = np.array([band_ssim(ref[b], est[b]) for b in range(ref.shape[0])])
    return MetricReport(
        mpsnr=float(per_psnr.mean()),
        mssim=float(per_ssim.mean()),
        mfsim=mfsim(ref, est),
        ergas=ergas(ref, est),
        msam=msam(ref, est),
        psnr_per_band=per_psnr,
        ssim_per_band=per_ssim,
    )
