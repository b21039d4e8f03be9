"""Procedural hyperspectral scenes for demos and desk-scale experiments.

Each cube mixes a few smooth spectral signatures over piecewise-smooth
abundance maps with sharp region edges, so the spectra are low-rank while
the spatial content has real structure to preserve.
"""

from __future__ import annotations

import numpy as np

from .hsio import HsiCube
from .noise import rng_from


def _smooth_spectra(rng: np.random.Generator, bands: int, count: int) -> np.ndarray:
    """(count, bands) positive signatures: sums of two or three spectral bumps."""
    grid = np.linspace(0.0, 1.0, bands)
    sigs = np.empty((count, bands))
    for i in range(count):
        n_bumps = int(rng.integers(2, 4))
        centers = rng.uniform(0.0, 1.0, n_bumps)
        widths = rng.uniform(0.08, 0.35, n_bumps)
        amps = rng.uniform(0.3, 1.0, n_bumps)
        sigs[i] = (amps[:, None] * np.exp(-((grid[None] - centers[:, None]) ** 2) / (2 * widths[:, None] ** 2))).sum(0)
    return sigs


def _region_labels(rng: np.random.Generator, h: int, w: int, regions: int) -> np.ndarray:
    """Label map with curved edges: quantile-sliced sum of low-frequency waves."""
    yy, xx = np.mgrid[0:h, 0:w]
    field = np.zeros((h, w))
    for _ in range(4):
        fy, fx = rng.uniform(0.5, 2.5, 2)
        phase = rng.uniform(0, 2 * np.pi, 2)
        field += rng.uniform(0.5, 1.0) * np.sin(2 * np.pi * fy * yy / h + phase[0]) * np.cos(
            2 * np.pi * fx * xx / w + phase[1]
        )
    edges = np.quantile(field, np.linspace(0, 1, regions + 1)[1:-1])
    return np.digitize(field, edges)


def make_cube(
    bands: int = 16,
    height: int = 64,
    width: int = 64,
    seed: int = 0,
    components: int = 3,
    regions: int = 5,
    sensor_id: str = "synthetic",
) -> HsiCube:
    """One scene in [0.05, 0.95]: low-rank spectra over edged abundance maps."""
    rng = rng_from(seed, "scene")
    spectra = _smooth_spectra(rng, bands, components)
    labels = _region_labels(rng, height, width, regions)
    abundance = np.empty((components, height, width))
    per_region = rng.dirichlet(np.ones(components), size=regions)  # (regions, k)
    for r in range(regions):
        mask = labels == r
        abundance[:, mask] = per_region[r][:, None]
    # mild smooth within-region variation keeps bands from being piecewise constant
    ramp = np.linspace(0.85, 1.15, width)[None, None, :]
    abundance = abundance * ramp
    cube = np.tensordot(spectra.T, abundance, axes=([1], [0]))  # (bands, h, w)
    lo, hi = cube.min(), cube.max()
    cube = 0.05 + 0.9 * (cube - lo) / (hi - lo)
    return HsiCube(cube.astype(np.float32), sensor_id=sensor_id)


def make_dataset(count: int, bands: int = 16, size: int = 64, seed: int = 0, **kwargs) -> list:
    """A list of scenes with per-index derived seeds."""
    return [
        make_cube(bands=bands, height=size, width=size, seed=seed * 100003 + i, **kwargs)
        for i in range(count)
    ]
