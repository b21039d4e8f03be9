"""Seeded synthetic degradations for hyperspectral cubes.

All noise levels follow the 0..255 convention and are divided by 255 before
being applied to [0,1]-normalized data. Every generator is a pure function of
(input, parameters, seed); noisy values are not clipped, so y - x is exactly
the drawn noise.
"""

from __future__ import annotations

import zlib
from dataclasses import dataclass
from typing import Optional, Union

import numpy as np

from .errors import ConfigError, DomainError

KINDS = ("iid_gaussian", "band_uniform", "correlated", "stripes")

SeedLike = Union[int, np.random.Generator]


def rng_from(master_seed: int, *path) -> np.random.Generator:
    """Derive an independent child generator from a master seed.

    The split is counter-based: each path component (int or string; strings
    are crc32-hashed) becomes one spawn-key entry, so the same (seed, path)
    always yields the same stream and distinct paths yield independent ones.
    """
    key = tuple(p if isinstance(p, int) else zlib.crc32(str(p).encode()) for p in path)
    return np.random.default_rng(np.random.SeedSequence(master_seed, spawn_key=key))


def _as_rng(seed: SeedLike) -> np.random.Generator:
    if isinstance(seed, np.random.Generator):
        return seed
    return np.random.default_rng(np.random.SeedSequence(int(seed)))


@dataclass(frozen=True)
class NoiseSpec:
    """Declarative description of one synthetic degradation pattern."""

    kind: str = "iid_gaussian"
    sigma: float = 25.0  # iid_gaussian; also the base gaussian level of stripes
    sigma_min: float = 10.0  # band_uniform
    sigma_max: float = 70.0
    beta: float = 23.08  # correlated: peak level of the spectral curve
    eta: float = 0.157  # correlated: curve width
    band_fraction: float = 0.33  # stripes: fraction of affected bands
    column_fraction: tuple = (0.10, 0.15)  # stripes: column fraction range
    amplitude: float = 0.25  # stripes: offsets drawn in [-amplitude, amplitude]

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ConfigError(f"noise.kind: unknown kind {self.kind!r}, expected one of {KINDS}")
        if self.sigma < 0 or self.sigma_min < 0 or self.sigma_max < self.sigma_min:
            raise ConfigError("noise: sigma values must be nonnegative with sigma_min <= sigma_max")

    def to_dict(self) -> dict:
        return {
            "kind": self.kind,
            "sigma": self.sigma,
            "sigma_min": self.sigma_min,
            "sigma_max": self.sigma_max,
            "beta": self.beta,
            "eta": self.eta,
            "band_fraction": self.band_fraction,
            "column_fraction": list(self.column_fraction),
            "amplitude": self.amplitude,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "NoiseSpec":
        d = dict(d)
        if "column_fraction" in d:
            d["column_fraction"] = tuple(d["column_fraction"])
        return cls(**d)


def apply_iid_gaussian(x: np.ndarray, sigma: float, seed: SeedLike) -> np.ndarray:
    """y = x + e with e ~ N(0, (sigma/255)^2) elementwise; sigma=0 is a copy."""
    if sigma < 0:
        raise DomainError(f"sigma must be nonnegative, got {sigma}")
    if sigma == 0:
        return x.copy()
    rng = _as_rng(seed)
    return x + rng.normal(0.0, sigma / 255.0, size=x.shape).astype(x.dtype)


def apply_band_uniform(x: np.ndarray, sigma_min: float, sigma_max: float, seed: SeedLike):
    """Per-band sigma_j ~ U[sigma_min, sigma_max], drawn fresh per call.

    Returns (y, sigmas); the drawn levels are diagnostics only and are never
    fed to a model at test time.
    """
    if sigma_min < 0 or sigma_max < sigma_min:
        raise DomainError(f"need 0 <= sigma_min <= sigma_max, got [{sigma_min}, {sigma_max}]")
    rng = _as_rng(seed)
    c = x.shape[0]
    sigmas = rng.uniform(sigma_min, sigma_max, size=c)
    noise = rng.standard_normal(x.shape) * (sigmas / 255.0)[:, None, None]
    return x + noise.astype(x.dtype), sigmas


def correlated_sigma_curve(bands: int, beta: float = 23.08, eta: float = 0.157) -> np.ndarray:
    """sigma_i = beta * exp(-(i/c - 1/2)^2 / (4 eta^2)) for i in [0, c-1]."""
    i = np.arange(bands, dtype=np.float64)
    return beta * np.exp(-((i / bands - 0.5) ** 2) / (4.0 * eta**2))


def apply_correlated(
    x: np.ndarray, beta: float = 23.08, eta: float = 0.157, seed: SeedLike = 0
) -> np.ndarray:
    """Gaussian noise whose level follows a fixed spectral bell curve."""
    rng = _as_rng(seed)
    sigmas = correlated_sigma_curve(x.shape[0], beta, eta)
    noise = rng.standard_normal(x.shape) * (sigmas / 255.0)[:, None, None]
    return x + noise.astype(x.dtype)


def apply_stripes(x: np.ndarray, seed: SeedLike, spec: Optional[NoiseSpec] = None):
    """Column offsets on a fraction of bands plus base Gaussian noise everywhere.

    floor(band_fraction * c) bands are drawn without replacement; in each, a
    column fraction f ~ U[column_fraction] selects floor(f * w) distinct
    columns, and each selected column gets one constant offset drawn in
    [-amplitude, amplitude] added down its whole extent. Returns (y, info)
    where info records every draw.
    """
    spec = spec or NoiseSpec(kind="stripes")
    rng = _as_rng(seed)
    c, h, w = x.shape
    n_bands = int(np.floor(spec.band_fraction * c))
    bands = np.sort(rng.choice(c, size=n_bands, replace=False))
    y = x.astype(x.dtype, copy=True)
    info = {"bands": bands.tolist(), "columns": {}, "offsets": {}}
    lo, hi = spec.column_fraction
    for b in bands:
        frac = rng.uniform(lo, hi)
        n_cols = int(np.floor(frac * w))
        cols = np.sort(rng.choice(w, size=n_cols, replace=False)) if n_cols > 0 else np.array([], int)
        offsets = rng.uniform(-spec.amplitude, spec.amplitude, size=n_cols)
        y[b, :, cols] += offsets[:, None].astype(x.dtype)
        info["columns"][int(b)] = cols.tolist()
        info["offsets"][int(b)] = offsets.tolist()
    y = y + rng.normal(0.0, spec.sigma / 255.0, size=x.shape).astype(x.dtype)
    return y, info


def apply_noise(x: np.ndarray, spec: NoiseSpec, seed: SeedLike):
    """Dispatch on spec.kind; returns (y, info dict of drawn parameters)."""
    if spec.kind == "iid_gaussian":
        return apply_iid_gaussian(x, spec.sigma, seed), {"sigma": spec.sigma}
    if spec.kind == "band_uniform":
        y, sigmas = apply_band_uniform(x, spec.sigma_min, spec.sigma_max, seed)
        return y, {"sigmas": sigmas.tolist()}
    if spec.kind == "correlated":
        y = apply_correlated(x, spec.beta, spec.eta, seed)
        return y, {"sigmas": correlated_sigma_curve(x.shape[0], spec.beta, spec.eta).tolist()}
    if spec.kind == "stripes":
        return apply_stripes(x, seed, spec)
    raise ConfigError(f"noise.kind: unknown kind {spec.kind!r}")
