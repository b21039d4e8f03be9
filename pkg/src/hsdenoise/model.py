"""Two-layer spectral-spatial denoiser and whole-image inference.

Layer 1 codes each pixel's spectrum on a sensor-specific dense dictionary
(1x1 atoms). Layer 2 codes the resulting feature map on a shared low-rank
dictionary with spatial support, so it can be reused across sensors. Both
layers are unrolled encoders paired with overlap-add decoders; denoising is
decode(encode(y)) composed through both layers, with per-band means removed
before layer 1 and per-channel means removed around layer 2.

An optional three-stage CNN estimates per-band data-fit weights from the
noisy input, which the first layer's weighted encoder consumes; the same
mechanism (weights forced to zero) implements band masking.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from . import engine as eng
from .coding import CodeMap, IstaConfig, coverage_map, csc_encode, overlap_add_decode, weighted_csc_encode
from .dictionaries import DenseDictionary, LowRankDictionary, _he_normal
from .engine import Parameter, Tensor
from .errors import DimensionError, DomainError, InputTooSmallError
from .noise import rng_from

ESTIMATOR_PATCH = 56
ESTIMATOR_MIN_INPUT = 8
ESTIMATOR_FLOOR = 1e-3


@dataclass
class ModelConfig:
    sensors: dict  # sensor_id -> band count
    p1: int = 64
    p2: int = 1024
    rank: int = 3
    patch_side: int = 5
    t1: int = 12
    t2: int = 5
    estimator: bool = False
    lam_init: float = 1e-3

    def __post_init__(self):
        if not self.sensors:
            raise DomainError("model needs at least one sensor")
        for key in ("p1", "p2", "rank", "patch_side"):
            if getattr(self, key) < 1:
                raise DomainError(f"model.{key} must be >= 1")
        if self.t1 < 0 or self.t2 < 0:
            raise DomainError("unrolling counts must be >= 0")

    def to_dict(self) -> dict:
        return {
            "sensors": dict(self.sensors),
            "p1": self.p1,
            "p2": self.p2,
            "rank": self.rank,
            "patch_side": self.patch_side,
            "t1": self.t1,
            "t2": self.t2,
            "estimator": self.estimator,
            "lam_init": self.lam_init,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(**d)


def _inverse_softplus(y: float) -> float:
    return float(np.log(np.expm1(y)))


def _gram_norm(kernel: np.ndarray, extent: int = 24, stride: int = 1, iters: int = 40) -> float:
    """Largest eigenvalue of the encoder's analysis-synthesis composition.

    Power iteration on codes -> coverage-normalized reconstruction -> analysis,
    evaluated on a nominal square geometry (the norm is nearly size-invariant
    for stride-1 coding).
    """
    p, cin, s, _ = kernel.shape
    extent = max(extent, s)
    hp = (extent - s) // stride + 1
    cov = coverage_map(extent, extent, s, stride, np.float64)[None]
    kmat = kernel.reshape(p, cin * s * s).astype(np.float64)
    v = np.random.default_rng(0).standard_normal((p, hp * hp))
    lam = 1.0
    for _ in range(iters):
        v /= max(np.linalg.norm(v), 1e-30)
        img = eng._col2im(kmat.T @ v, (cin, extent, extent), s, stride) / cov
        cols, _ = eng._im2col(img, s, stride)
        w = kmat @ cols
        lam = float(np.sum(v * w))
        v = w
    return max(lam, 1e-12)


class SpectralLayer:
    """Sensor-specific pixelwise coding layer (1x1 atoms)."""

    def __init__(self, sensor_id: str, channels: int, atom_count: int, iterations: int, lam_init: float):
        self.sensor_id = sensor_id
        self.channels = channels
        self.atom_count = atom_count
        self.iterations = iterations
        prefix = f"spectral.{sensor_id}"
        self.C = DenseDictionary(atom_count, channels, name=f"{prefix}.C")
        self.D = DenseDictionary(atom_count, channels, name=f"{prefix}.D")
        self.W = DenseDictionary(atom_count, channels, name=f"{prefix}.W")
        self.lam_free = Parameter(
            np.full(atom_count, _inverse_softplus(lam_init), dtype=np.float32),
            name=f"{prefix}.lam_free",
        )

    def init_he(self, rng) -> "SpectralLayer":
        for d in (self.C, self.D, self.W):
            d.init_he(rng)
        # start the unrolled recursion as plain proximal-gradient steps:
        # analysis = step_size * synthesis, with the step bounded by the
        # operator norm so iterates cannot blow up before training shapes C
        eta = 0.9 / _gram_norm(self.D.materialize().data)
        self.C.atoms.value = Tensor(eta * self.D.atoms.value.data)
        return self

    def lam(self) -> Tensor:
        return eng.softplus(self.lam_free.value)

    def encode(self, y: Tensor, band_weights: Optional[Tensor] = None) -> CodeMap:
        cfg = IstaConfig(iterations=self.iterations, lam=self.lam(), band_weights=band_weights)
        if band_weights is None:
            return csc_encode(y, self.C, self.D, cfg)
        return weighted_csc_encode(y, self.C, self.D, cfg)

    def decode(self, codes: CodeMap) -> Tensor:
        return overlap_add_decode(codes, self.W)

    def parameters(self) -> list:
        return [self.C.atoms, self.D.atoms, self.W.atoms, self.lam_free]

    def param_count(self) -> int:
        return 3 * self.C.param_count() + self.atom_count


class SpectralSpatialLayer:
    """Shared coding layer with low-rank spatial-spectral atoms."""

    def __init__(self, channels: int, atom_count: int, patch_side: int, rank: int, iterations: int, lam_init: float):
        self.channels = channels
        self.atom_count = atom_count
        self.patch_side = patch_side
        self.iterations = iterations
        self.C = LowRankDictionary(atom_count, channels, patch_side, rank, name="shared.C")
        self.D = LowRankDictionary(atom_count, channels, patch_side, rank, name="shared.D")
        self.W = LowRankDictionary(atom_count, channels, patch_side, rank, name="shared.W")
        self.lam_free = Parameter(
            np.full(atom_count, _inverse_softplus(lam_init), dtype=np.float32),
            name="shared.lam_free",
        )

    def init_he(self, rng) -> "SpectralSpatialLayer":
        for d in (self.C, self.D, self.W):
            d.init_he(rng)
        eta = 0.9 / _gram_norm(self.D.materialize().data)
        self.C.U.value = Tensor(eta * self.D.U.value.data)
        self.C.V.value = Tensor(self.D.V.value.data.copy())
        return self

    def lam(self) -> Tensor:
        return eng.softplus(self.lam_free.value)

    def encode(self, x: Tensor) -> CodeMap:
        cfg = IstaConfig(iterations=self.iterations, lam=self.lam())
        return csc_encode(x, self.C, self.D, cfg)

    def decode(self, codes: CodeMap) -> Tensor:
        return overlap_add_decode(codes, self.W)

    def parameters(self) -> list:
        return [self.C.U, self.C.V, self.D.U, self.D.V, self.W.U, self.W.V, self.lam_free]

    def param_count(self) -> int:
        return 3 * self.C.param_count() + self.atom_count


class NoiseEstimator:
    """Three conv stages, global pooling, and an affine head with positive output.

    Operates on one centered band patch at a time and returns a scalar weight.
    """

    STAGES = ((1, 16), (16, 32), (32, 32))

    def __init__(self):
        self.weights = []
        self.biases = []
        for i, (cin, cout) in enumerate(self.STAGES, start=1):
            self.weights.append(Parameter(np.zeros((cout, cin, 3, 3), np.float32), name=f"estimator.conv{i}.w"))
            self.biases.append(Parameter(np.zeros(cout, np.float32), name=f"estimator.conv{i}.b"))
        self.aff_w = Parameter(np.zeros((1, 32), np.float32), name="estimator.affine.w")
        self.aff_b = Parameter(np.zeros(1, np.float32), name="estimator.affine.b")

    def init_he(self, rng) -> "NoiseEstimator":
        for w, (cin, _) in zip(self.weights, self.STAGES):
            w.value = Tensor(_he_normal(rng, w.value.shape, cin * 9, np.float32))
        self.aff_w.value = Tensor(_he_normal(rng, (1, 32), 32, np.float32))
        return self

    def run(self, patch: Tensor) -> Tensor:
        """(1, h, w) centered patch -> positive scalar."""
        x = patch
        for w, b in zip(self.weights, self.biases):
            x = eng.conv2d(x, w.value)
            x = eng.relu(eng.add(x, eng.reshape(b.value, (b.value.shape[0], 1, 1))))
        pooled = eng.reshape(eng.global_average_pool(x), (32, 1))
        z = eng.add(eng.matmul(self.aff_w.value, pooled), eng.reshape(self.aff_b.value, (1, 1)))
        return eng.reshape(eng.add(eng.softplus(z), eng.as_tensor(np.full((1, 1), ESTIMATOR_FLOOR, np.float32))), ())

    def parameters(self) -> list:
        out = []
        for w, b in zip(self.weights, self.biases):
            out.extend([w, b])
        out.extend([self.aff_w, self.aff_b])
        return out

    def param_count(self) -> int:
        return sum(p.value.size for p in self.parameters())


def _tile_starts(extent: int, size: int) -> list:
    """Top-left anchors of an edge-clamped non-overlapping grid."""
    if extent <= size:
        return [0]
    starts = list(range(0, extent - size + 1, size))
    if starts[-1] != extent - size:
        starts.append(extent - size)
    return starts


class DenoisingModel:
    """Sensor-specific spectral layers around one shared spectral-spatial layer."""

    def __init__(self, config: ModelConfig):
        self.config = config
        self.spectral = {
            sid: SpectralLayer(sid, channels, config.p1, config.t1, config.lam_init)
            for sid, channels in sorted(config.sensors.items())
        }
        self.shared = SpectralSpatialLayer(
            config.p1, config.p2, config.patch_side, config.rank, config.t2, config.lam_init
        )
        self.estimator = NoiseEstimator() if config.estimator else None

    @classmethod
    def build(cls, config: ModelConfig, seed: int = 0) -> "DenoisingModel":
        model = cls(config)
        rng = rng_from(seed, "init")
        for sid in sorted(model.spectral):
            model.spectral[sid].init_he(rng)
        model.shared.init_he(rng)
        if model.estimator is not None:
            model.estimator.init_he(rng)
        return model

    # -- parameter access ---------------------------------------------------

    def parameters(self) -> list:
        out = []
        for sid in sorted(self.spectral):
            out.extend(self.spectral[sid].parameters())
        out.extend(self.shared.parameters())
        if self.estimator is not None:
            out.extend(self.estimator.parameters())
        return out

    def param_counts(self) -> dict:
        counts = {f"spectral.{sid}": layer.param_count() for sid, layer in self.spectral.items()}
        counts["shared"] = self.shared.param_count()
        if self.estimator is not None:
            counts["estimator"] = self.estimator.param_count()
        return counts

    def _resolve_sensor(self, sensor_id: Optional[str]) -> str:
        if sensor_id is None:
            if len(self.spectral) == 1:
                return next(iter(self.spectral))
            raise DomainError(f"sensor_id required; model has {sorted(self.spectral)}")
        if sensor_id not in self.spectral:
            raise DomainError(f"unknown sensor {sensor_id!r}; model has {sorted(self.spectral)}")
        return sensor_id

    # -- forward ------------------------------------------------------------

    def forward_t(
        self,
        y,
        sensor_id: Optional[str] = None,
        band_weights: Optional[Tensor] = None,
        visible: Optional[Sequence[int]] = None,
    ) -> Tensor:
        """Tape-aware denoising pass; returns a Tensor of the input shape."""
        sid = self._resolve_sensor(sensor_id)
        layer1 = self.spectral[sid]
        y_t = eng.as_tensor(y)
        if y_t.ndim != 3:
            raise DimensionError(f"forward expects (c, h, w), got {y_t.shape}")
        c, h, w = y_t.shape
        if c != layer1.channels:
            raise DimensionError(f"sensor {sid!r} expects {layer1.channels} bands, got {c}")

        band_means = eng.as_tensor(y_t.data.mean(axis=(1, 2), keepdims=True))
        centered = eng.sub(y_t, band_means)

        beta = band_weights
        if visible is not None:
            vis = sorted(set(int(j) for j in visible))
            if not vis:
                raise DomainError("visible band set must not be empty")
            if vis[0] < 0 or vis[-1] >= c:
                raise DomainError(f"visible bands out of range for {c} bands: {vis}")
            if len(vis) < c:
                mask = np.zeros(c, dtype=y_t.dtype)
                mask[vis] = 1.0
                mask_t = eng.as_tensor(mask)
                centered = eng.mul(centered, eng.reshape(mask_t, (c, 1, 1)))
                beta = mask_t if beta is None else eng.mul(beta, mask_t)

        codes1 = layer1.encode(centered, beta)
        p1 = codes1.atom_count
        channel_means = eng.reshape(eng.global_average_pool(codes1.codes), (p1, 1, 1))
        features = eng.sub(codes1.codes, channel_means)

        codes2 = self.shared.encode(features)
        rec_features = eng.add(self.shared.decode(codes2), channel_means)

        rec_map = CodeMap(
            codes=rec_features,
            patch_side=codes1.patch_side,
            stride=codes1.stride,
            height=codes1.height,
            width=codes1.width,
        )
        return eng.add(layer1.decode(rec_map), band_means)

    def forward(self, y: np.ndarray, sensor_id=None, band_weights=None, visible=None) -> np.ndarray:
        bw = eng.as_tensor(band_weights) if band_weights is not None else None
        return self.forward_t(y, sensor_id, bw, visible).data

    # -- band-weight estimation ----------------------------------------------

    def estimate_band_weights_t(self, y: np.ndarray) -> Tensor:
        """Per-band positive weights from the noisy cube, differentiable."""
        if self.estimator is None:
            raise DomainError("model has no noise estimator")
        y = np.asarray(y)
        c, h, w = y.shape
        if h < ESTIMATOR_MIN_INPUT or w < ESTIMATOR_MIN_INPUT:
            raise InputTooSmallError(
                f"band weight estimation needs at least {ESTIMATOR_MIN_INPUT}x{ESTIMATOR_MIN_INPUT}, got {h}x{w}"
            )
        th, tw = min(ESTIMATOR_PATCH, h), min(ESTIMATOR_PATCH, w)
        top0 = (h - th) // 2 if h < ESTIMATOR_PATCH else None
        rows = [top0] if top0 is not None else _tile_starts(h, th)
        cols = [(w - tw) // 2] if w < ESTIMATOR_PATCH else _tile_starts(w, tw)
        per_band = []
        for b in range(c):
            vals = []
            for top in rows:
                for left in cols:
                    tile = y[b, top : top + th, left : left + tw]
                    centered = (tile - tile.mean()).astype(y.dtype)[None]
                    vals.append(self.estimator.run(eng.as_tensor(centered)))
            acc = vals[0]
            for v in vals[1:]:
                acc = eng.add(acc, v)
            per_band.append(eng.scale(acc, 1.0 / len(vals)))
        return eng.stack_scalars(per_band)

    def estimate_band_weights(self, y: np.ndarray) -> np.ndarray:
        return self.estimate_band_weights_t(y).data

    # -- masking and tiling ---------------------------------------------------

    def mask_bands(self, y: np.ndarray, visible: Sequence[int]):
        """Zero the hidden bands; returns (masked cube, hidden band indices)."""
        y = np.asarray(y)
        c = y.shape[0]
        vis = sorted(set(int(j) for j in visible))
        if not vis:
            raise DomainError("visible band set must not be empty")
        if vis[0] < 0 or vis[-1] >= c:
            raise DomainError(f"visible bands out of range for {c} bands: {vis}")
        hidden = [j for j in range(c) if j not in vis]
        masked = y.copy()
        masked[hidden] = 0.0
        return masked, hidden

    def block_inference(
        self,
        y: np.ndarray,
        sensor_id: Optional[str] = None,
        band_weights: Optional[np.ndarray] = None,
        block: int = 256,
        overlap: int = 6,
        threads: int = 1,
    ) -> np.ndarray:
        """Denoise in overlapping tiles and average shared pixels.

        Tiling is top-left anchored with the last block clamped to the image
        edge; accumulation runs in float64 in a fixed tile order.
        """
        y = np.asarray(y)
        c, h, w = y.shape
        if h <= block and w <= block:
            return self.forward(y, sensor_id, band_weights)
        step = block - overlap
        if step <= 0:
            raise DomainError(f"overlap {overlap} must be smaller than block {block}")

        def anchors(extent):
            if extent <= block:
                return [0]
            starts = list(range(0, extent - block + 1, step))
            if starts[-1] != extent - block:
                starts.append(extent - block)
            return starts

        rows = anchors(h)
        cols = anchors(w)
        bh = min(block, h)
        bw_ = min(block, w)
        tiles = [(top, left) for top in rows for left in cols]

        def run_tile(anchor):
            top, left = anchor
            return self.forward(y[:, top : top + bh, left : left + bw_], sensor_id, band_weights)

        if threads > 1:
            with ThreadPoolExecutor(max_workers=threads) as pool:
                outputs = list(pool.map(run_tile, tiles))
        else:
            outputs = [run_tile(t) for t in tiles]

        acc = np.zeros((c, h, w), dtype=np.float64)
        count = np.zeros((h, w), dtype=np.float64)
        for (top, left), out in zip(tiles, outputs):
            acc[:, top : top + bh, left : left + bw_] += out
            count[top : top + bh, left : left + bw_] += 1.0
        return (acc / count).astype(y.dtype)
