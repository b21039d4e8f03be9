"""Hyperspectral container, raster import, normalization, and patch pipeline.

The native HSR container layout (all integers little-endian):

    bytes 0..3    magic "HSR1"
    bytes 4..15   uint32 bands, height, width
    byte  16      dtype code (0 = float32)
    bytes 17..32  reserved (zeros)
    payload       bands*height*width float32, band-sequential
                  (band-major, row-major within band)
    optional      uint32 metadata length + UTF-8 JSON with sensor_id
                  and per-band normalization stats

Percentile normalization follows the nearest-rank convention on the pooled
sorted sample of the whole training set.
"""

from __future__ import annotations

import json
import struct
import warnings
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from .errors import (
    BadMagicError,
    DimensionError,
    DomainError,
    TruncatedFileError,
    UnknownDtypeError,
    UnsupportedFormatError,
)

_MAGIC = b"HSR1"
_DTYPE_FLOAT32 = 0
_RESERVED = 16

AUGMENT_OPS = ("identity", "rot90", "rot180", "rot270", "flip_h", "flip_v")


@dataclass
class BandStats:
    """Normalization anchors for one band: clip range and raw extrema."""

    p2: float
    p98: float
    vmin: float
    vmax: float

    def to_list(self) -> list:
        return [self.p2, self.p98, self.vmin, self.vmax]

    @classmethod
    def from_list(cls, vals) -> "BandStats":
        return cls(*map(float, vals))


@dataclass
class HsiCube:
    """A c x h x w cube with band metadata; data is float32 band-sequential."""

    data: np.ndarray
    sensor_id: str = ""
    band_stats: Optional[list] = None  # list[BandStats] once normalized

    def __post_init__(self):
        arr = np.asarray(self.data)
        if arr.ndim != 3:
            raise DimensionError(f"HsiCube expects (c, h, w) data, got shape {arr.shape}")
        if arr.dtype != np.float32:
            arr = arr.astype(np.float32)
        self.data = np.ascontiguousarray(arr)

    @property
    def bands(self) -> int:
        return self.data.shape[0]

    @property
    def height(self) -> int:
        return self.data.shape[1]

    @property
    def width(self) -> int:
        return self.data.shape[2]

    @property
    def shape(self) -> tuple:
        return self.data.shape


def write_hsr(path, cube: HsiCube) -> None:
    c, h, w = cube.shape
    with open(path, "wb") as f:
        f.write(_MAGIC)
        f.write(struct.pack("<III", c, h, w))
        f.write(struct.pack("<B", _DTYPE_FLOAT32))
        f.write(b"\x00" * _RESERVED)
        f.write(cube.data.astype("<f4", copy=False).tobytes())
        meta = {}
        if cube.sensor_id:
            meta["sensor_id"] = cube.sensor_id
        if cube.band_stats is not None:
            meta["band_stats"] = [s.to_list() for s in cube.band_stats]
        if meta:
            blob = json.dumps(meta, sort_keys=True).encode("utf-8")
            f.write(struct.pack("<I", len(blob)))
            f.write(blob)


def read_hsr(path) -> HsiCube:
    with open(path, "rb") as f:
        raw = f.read()
    if raw[:4] != _MAGIC:
        raise BadMagicError(f"{path}: expected HSR1 magic, found {raw[:4]!r}")
    header_len = 4 + 12 + 1 + _RESERVED
    if len(raw) < header_len:
        raise TruncatedFileError(f"{path}: header truncated at {len(raw)} bytes")
    c, h, w = struct.unpack_from("<III", raw, 4)
    (code,) = struct.unpack_from("<B", raw, 16)
    if code != _DTYPE_FLOAT32:
        raise UnknownDtypeError(f"{path}: unknown dtype code {code}")
    n = c * h * w
    payload_end = header_len + 4 * n
    if len(raw) < payload_end:
        raise TruncatedFileError(
            f"{path}: payload needs {4 * n} bytes, only {len(raw) - header_len} present"
        )
    data = np.frombuffer(raw, dtype="<f4", count=n, offset=header_len).reshape(c, h, w)
    cube = HsiCube(data.copy())
    rest = raw[payload_end:]
    if rest:
        if len(rest) < 4:
            raise TruncatedFileError(f"{path}: metadata length field truncated")
        (mlen,) = struct.unpack_from("<I", rest, 0)
        if len(rest) < 4 + mlen:
            raise TruncatedFileError(f"{path}: metadata truncated ({len(rest) - 4} of {mlen} bytes)")
        meta = json.loads(rest[4 : 4 + mlen].decode("utf-8"))
        cube.sensor_id = meta.get("sensor_id", "")
        if "band_stats" in meta:
            cube.band_stats = [BandStats.from_list(v) for v in meta["band_stats"]]
    return cube


# ---------------------------------------------------------------------------
# band-sequential raster import

_BSQ_DTYPES = {
    "12": np.dtype(np.uint16),  # ENVI code for 16-bit unsigned
    "4": np.dtype(np.float32),  # ENVI code for 32-bit float
}


def _parse_header(text: str) -> dict:
    fields = {}
    for line in text.splitlines():
        if "=" not in line:
            continue
        key, value = line.split("=", 1)
        fields[key.strip().lower()] = value.strip().lower()
    return fields


def import_bsq(header_path, data_path, sensor_id: str = "") -> HsiCube:
    """Read a minimal band-sequential raster described by a text header.

    Required keys: samples, lines, bands, data type (12 = uint16, 4 =
    float32), interleave (must be bsq); optional: byte order (0 little,
    1 big), header offset.
    """
    with open(header_path, "r", encoding="utf-8") as f:
        fields = _parse_header(f.read())
    for key in ("samples", "lines", "bands", "data type", "interleave"):
        if key not in fields:
            raise UnsupportedFormatError(f"{header_path}: missing header key {key!r}")
    if fields["interleave"] != "bsq":
        raise UnsupportedFormatError(
            f"{header_path}: interleave {fields['interleave']!r} not supported, only bsq"
        )
    if fields["data type"] not in _BSQ_DTYPES:
        raise UnsupportedFormatError(
            f"{header_path}: data type {fields['data type']!r} not supported (need 12 or 4)"
        )
    dtype = _BSQ_DTYPES[fields["data type"]]
    byte_order = int(fields.get("byte order", "0"))
    dtype = dtype.newbyteorder("<" if byte_order == 0 else ">")
    offset = int(fields.get("header offset", "0"))
    w = int(fields["samples"])
    h = int(fields["lines"])
    c = int(fields["bands"])
    n = c * h * w
    with open(data_path, "rb") as f:
        f.seek(offset)
        buf = f.read(n * dtype.itemsize)
    if len(buf) < n * dtype.itemsize:
        raise TruncatedFileError(f"{data_path}: expected {n * dtype.itemsize} bytes, got {len(buf)}")
    values = np.frombuffer(buf, dtype=dtype, count=n).reshape(c, h, w)
    return HsiCube(values.astype(np.float32), sensor_id=sensor_id)


# ---------------------------------------------------------------------------
# normalization


def nearest_rank(sorted_values: np.ndarray, q: float) -> float:
    """Nearest-rank percentile on an already-sorted sample."""
    n = sorted_values.size
    idx = max(int(np.ceil(q * n)), 1) - 1
    return float(sorted_values[idx])


def compute_band_stats(cubes: Sequence[HsiCube]) -> list:
    """Pool pixels per band across all cubes and take nearest-rank p2/p98."""
    if not cubes:
        raise DomainError("compute_band_stats needs at least one cube")
    c = cubes[0].bands
    for cube in cubes:
        if cube.bands != c:
            raise DimensionError("all cubes must share the band count")
    stats = []
    for b in range(c):
        pooled = np.sort(np.concatenate([cube.data[b].ravel() for cube in cubes]))
        stats.append(
            BandStats(
                p2=nearest_rank(pooled, 0.02),
                p98=nearest_rank(pooled, 0.98),
                vmin=float(pooled[0]),
                vmax=float(pooled[-1]),
            )
        )
    return stats


def apply_band_stats(cube: HsiCube, stats: list) -> HsiCube:
    """Clip each band to [p2, p98] then map that range onto [0, 1]."""
    if len(stats) != cube.bands:
        raise DimensionError(f"{len(stats)} band stats for {cube.bands} bands")
    out = np.empty_like(cube.data)
    for b, st in enumerate(stats):
        if st.p98 == st.p2:
            warnings.warn(f"band {b} is constant over the clip range; mapped to 0.5")
            out[b] = 0.5
            continue
        clipped = np.clip(cube.data[b], st.p2, st.p98)
        out[b] = (clipped - st.p2) / (st.p98 - st.p2)
    return HsiCube(out, sensor_id=cube.sensor_id, band_stats=list(stats))


def normalize_percentile(cubes: Sequence[HsiCube]):
    """Normalize a training set with pooled per-band percentile stats.

    Returns (normalized cubes, stats); apply the same stats to test cubes
    with ``apply_band_stats``.
    """
    stats = compute_band_stats(cubes)
    return [apply_band_stats(cube, stats) for cube in cubes], stats


def normalize_global(cube: HsiCube) -> HsiCube:
    """Min-max normalization over the whole cube, all bands jointly."""
    lo = float(cube.data.min())
    hi = float(cube.data.max())
    if hi == lo:
        warnings.warn("constant cube; mapped to 0.5")
        out = np.full_like(cube.data, 0.5)
    else:
        out = (cube.data - lo) / (hi - lo)
    stats = [BandStats(p2=lo, p98=hi, vmin=lo, vmax=hi) for _ in range(cube.bands)]
    return HsiCube(out, sensor_id=cube.sensor_id, band_stats=stats)


def denormalize(cube: HsiCube) -> HsiCube:
    """Invert the affine map recorded in band_stats (recovers clipped values)."""
    if cube.band_stats is None:
        raise DomainError("cube has no band_stats to invert")
    out = np.empty_like(cube.data)
    for b, st in enumerate(cube.band_stats):
        out[b] = cube.data[b] * (st.p98 - st.p2) + st.p2
    return HsiCube(out, sensor_id=cube.sensor_id)


# ---------------------------------------------------------------------------
# training patches


@dataclass
class PatchRecord:
    clean: np.ndarray  # (c, patch, patch) float32
    image_id: str
    scale: float
    offset: tuple  # (row, col) in the rescaled image


@dataclass
class PatchDataset:
    records: list
    patch: int
    augmented: bool = False

    def __len__(self) -> int:
        return len(self.records)

    def __getitem__(self, i) -> PatchRecord:
        return self.records[i]


def area_downscale(data: np.ndarray, factor: int) -> np.ndarray:
    """Average non-overlapping factor x factor blocks; trailing rows/cols drop."""
    c, h, w = data.shape
    h2, w2 = h // factor, w // factor
    trimmed = data[:, : h2 * factor, : w2 * factor]
    return trimmed.reshape(c, h2, factor, w2, factor).mean(axis=(2, 4)).astype(data.dtype)


def center_crop(data: np.ndarray, size: int) -> np.ndarray:
    c, h, w = data.shape
    th, tw = min(size, h), min(size, w)
    top = (h - th) // 2
    left = (w - tw) // 2
    return data[:, top : top + th, left : left + tw]


def extract_patches(
    cube: HsiCube,
    patch: int = 64,
    strides: tuple = (64, 32, 32),
    scales: tuple = (1.0, 0.5, 0.25),
    crop: Optional[int] = None,
    image_id: str = "",
) -> PatchDataset:
    """Grid extraction at multiple scales; deterministic (scale, row, col) order."""
    if len(strides) != len(scales):
        raise DomainError(f"{len(strides)} strides for {len(scales)} scales")
    data = cube.data if crop is None else center_crop(cube.data, crop)
    records = []
    for stride, s in zip(strides, scales):
        if s == 1.0:
            scaled = data
        else:
            factor = int(round(1.0 / s))
            scaled = area_downscale(data, factor)
        _, h, w = scaled.shape
        if h < patch or w < patch:
            warnings.warn(f"{image_id or 'image'}: scale {s} too small for {patch}px patches; skipped")
            continue
        for top in range(0, h - patch + 1, stride):
            for left in range(0, w - patch + 1, stride):
                records.append(
                    PatchRecord(
                        clean=np.ascontiguousarray(scaled[:, top : top + patch, left : left + patch]),
                        image_id=image_id,
                        scale=s,
                        offset=(top, left),
                    )
                )
    return PatchDataset(records=records, patch=patch)


def merge_datasets(datasets: Sequence[PatchDataset]) -> PatchDataset:
    if not datasets:
        raise DomainError("merge_datasets needs at least one dataset")
    patch = datasets[0].patch
    records = []
    for ds in datasets:
        if ds.patch != patch:
            raise DimensionError("datasets disagree on patch size")
        records.extend(ds.records)
    return PatchDataset(records=records, patch=patch)


def augment(patch: np.ndarray, op: str) -> np.ndarray:
    """Spatial-only transform of a (c, h, w) patch; spectra untouched."""
    if op == "identity":
        return patch.copy()
    if op == "rot90":
        return np.ascontiguousarray(np.rot90(patch, 1, axes=(1, 2)))
    if op == "rot180":
        return np.ascontiguousarray(np.rot90(patch, 2, axes=(1, 2)))
    if op == "rot270":
        return np.ascontiguousarray(np.rot90(patch, 3, axes=(1, 2)))
    if op == "flip_h":
        return np.ascontiguousarray(patch[:, :, ::-1])
    if op == "flip_v":
        return np.ascontiguousarray(patch[:, ::-1, :])
    raise DomainError(f"unknown augmentation {op!r}; expected one of {AUGMENT_OPS}")
