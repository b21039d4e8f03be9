"""Training loops, optimizer, schedule, and checkpoint serialization.

Supervised training regenerates noise per step from counter-based seeds, so
runs are reproducible and resuming at step k continues the exact stream an
uninterrupted run would have produced. The self-supervised loop never sees
clean data: its input records expose noisy patches only, noise having been
applied once per source image before patch extraction.

Checkpoint container (all integers little-endian):

    bytes 0..7   magic "T3SCCKPT"
    uint32       format version (1)
    uint64       training step
    uint32 + n   config snapshot, canonical JSON (model config, train
                 config, master seed)
    uint32       parameter count, then per parameter:
                 uint16 name length + name, uint8 dtype code (0 = float32,
                 1 = float64), uint8 ndim, uint32 dims, raw payload
"""

from __future__ import annotations

import json
import math
import struct
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from . import engine as eng
from .engine import Parameter, Tape, Tensor
from .errors import CheckpointError, ConfigError, DivergenceError
from .hsio import AUGMENT_OPS, HsiCube, PatchDataset, augment, extract_patches
from .model import DenoisingModel, ModelConfig
from .noise import NoiseSpec, apply_noise, rng_from

_CKPT_MAGIC = b"T3SCCKPT"
_CKPT_VERSION = 1
_DTYPE_CODES = {np.dtype(np.float32): 0, np.dtype(np.float64): 1}
_CODE_DTYPES = {0: np.dtype(np.float32), 1: np.dtype(np.float64)}


@dataclass
class TrainConfig:
    batch_size: int = 16
    epochs: int = 60
    lr: float = 3e-4
    lr_halving_epochs: tuple = (30, 45)
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    noise: NoiseSpec = field(default_factory=NoiseSpec)
    seed: int = 0
    mode: str = "supervised"
    ssl_n: int = 4
    epoch_multiplier: int = 1
    max_steps: Optional[int] = None
    blind: bool = False
    augment: bool = True
    checkpoint_every: int = 0

    def __post_init__(self):
        if self.lr <= 0:
            raise ConfigError(f"train.lr: must be positive, got {self.lr}")
        if self.batch_size < 1:
            raise ConfigError(f"train.batch_size: must be >= 1, got {self.batch_size}")
        if self.mode not in ("supervised", "ssl"):
            raise ConfigError(f"train.mode: expected supervised or ssl, got {self.mode!r}")
        if self.ssl_n < 1:
            raise ConfigError(f"train.ssl_n: must be >= 1, got {self.ssl_n}")
        if self.epoch_multiplier < 1:
            raise ConfigError(f"train.epoch_multiplier: must be >= 1, got {self.epoch_multiplier}")

    def to_dict(self) -> dict:
        d = {
            "batch_size": self.batch_size,
            "epochs": self.epochs,
            "lr": self.lr,
            "lr_halving_epochs": list(self.lr_halving_epochs),
            "adam_beta1": self.adam_beta1,
            "adam_beta2": self.adam_beta2,
            "adam_eps": self.adam_eps,
            "noise": self.noise.to_dict(),
            "seed": self.seed,
            "mode": self.mode,
            "ssl_n": self.ssl_n,
            "epoch_multiplier": self.epoch_multiplier,
            "max_steps": self.max_steps,
            "blind": self.blind,
            "augment": self.augment,
            "checkpoint_every": self.checkpoint_every,
        }
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        d = dict(d)
        d["noise"] = NoiseSpec.from_dict(d["noise"])
        d["lr_halving_epochs"] = tuple(d.get("lr_halving_epochs", (30, 45)))
        return cls(**d)


def lr_for_epoch(cfg: TrainConfig, epoch: int) -> float:
    halvings = sum(1 for h in cfg.lr_halving_epochs if epoch > h)
    return cfg.lr / (2.0**halvings)


class Adam:
    """Bias-corrected adaptive moments; updates parameter values in place."""

    def __init__(self, params: Sequence[Parameter], lr: float, beta1=0.9, beta2=0.999, eps=1e-8):
        self.params = list(params)
        self.lr = lr
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.m = [np.zeros_like(p.value.data) for p in self.params]
        self.v = [np.zeros_like(p.value.data) for p in self.params]
        self.t = 0

    def step(self) -> None:
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        bc1 = 1.0 - b1**self.t
        bc2 = 1.0 - b2**self.t
        for i, p in enumerate(self.params):
            g = p.grad
            if g is None:
                continue
            self.m[i] = b1 * self.m[i] + (1 - b1) * g
            self.v[i] = b2 * self.v[i] + (1 - b2) * (g * g)
            update = self.lr * (self.m[i] / bc1) / (np.sqrt(self.v[i] / bc2) + self.eps)
            p.value.data -= update.astype(p.value.data.dtype, copy=False)


@dataclass
class LogEntry:
    step: int
    epoch: int
    lr: float
    loss: float


class TrainLog:
    """Line-oriented training record: step, epoch, lr, loss."""

    def __init__(self, header: str = ""):
        self.header = header
        self.entries: list = []

    def append(self, step: int, epoch: int, lr: float, loss: float) -> None:
        self.entries.append(LogEntry(step, epoch, lr, loss))

    def losses(self) -> np.ndarray:
        return np.array([e.loss for e in self.entries])

    def save(self, path) -> None:
        with open(path, "w", encoding="utf-8") as f:
            if self.header:
                for line in self.header.splitlines():
                    f.write(f"# {line}\n")
            for e in self.entries:
                f.write(f"{e.step}\t{e.epoch}\t{e.lr:.8g}\t{e.loss:.8g}\n")


def _epoch_order(n: int, seed: int, epoch: int, multiplier: int) -> np.ndarray:
    rng = rng_from(seed, "shuffle", epoch)
    return np.concatenate([rng.permutation(n) for _ in range(multiplier)])


def _augmented(patch: np.ndarray, cfg: TrainConfig, step: int, slot: int) -> np.ndarray:
    if not cfg.augment:
        return patch
    op = AUGMENT_OPS[int(rng_from(cfg.seed, "aug", step, slot).integers(len(AUGMENT_OPS)))]
    return augment(patch, op)


def _run_loop(model, cfg, n_items, start_step, step_fn, checkpoint_path):
    params = model.parameters()
    opt = Adam(params, cfg.lr, cfg.adam_beta1, cfg.adam_beta2, cfg.adam_eps)
    steps_per_epoch = max(1, math.ceil(n_items * cfg.epoch_multiplier / cfg.batch_size))
    total_steps = cfg.epochs * steps_per_epoch
    if cfg.max_steps is not None:
        total_steps = min(total_steps, cfg.max_steps) if cfg.max_steps > 0 else total_steps
    log = TrainLog()
    order = None
    cur_epoch = -1
    for step in range(start_step, total_steps):
        epoch = step // steps_per_epoch + 1
        if epoch != cur_epoch:
            order = _epoch_order(n_items, cfg.seed, epoch, cfg.epoch_multiplier)
            cur_epoch = epoch
        offset = (step % steps_per_epoch) * cfg.batch_size
        batch_idx = order[offset : offset + cfg.batch_size]
        if batch_idx.size == 0:
            batch_idx = order[: cfg.batch_size]
        opt.lr = lr_for_epoch(cfg, epoch)
        with Tape() as tape:
            for p in params:
                tape.watch(p)
            total = None
            for slot, idx in enumerate(batch_idx):
                term = step_fn(step, slot, int(idx))
                total = term if total is None else eng.add(total, term)
            loss = eng.scale(total, 1.0 / len(batch_idx))
        loss_val = loss.item()
        if not math.isfinite(loss_val):
            raise DivergenceError(f"loss became non-finite at step {step}")
        tape.backward(loss)
        opt.step()
        log.append(step, epoch, opt.lr, loss_val)
        if checkpoint_path and cfg.checkpoint_every and (step + 1) % cfg.checkpoint_every == 0:
            save_checkpoint(checkpoint_path, model, step + 1, train_config=cfg)
    return log, total_steps


def train_supervised(
    model: DenoisingModel,
    dataset: PatchDataset,
    cfg: TrainConfig,
    sensor_id: Optional[str] = None,
    checkpoint_path=None,
    start_step: int = 0,
):
    """Minimize the clean-vs-restored squared error on noisy patches.

    Noise is drawn fresh per (step, slot) from the master seed; in blind mode
    the estimator produces per-band weights that feed the weighted encoder,
    inside the same tape so its parameters train jointly.
    """
    if len(dataset) == 0:
        raise ConfigError("dataset: no training patches")

    def step_fn(step, slot, idx):
        clean = _augmented(dataset[idx].clean, cfg, step, slot)
        noisy, _ = apply_noise(clean, cfg.noise, rng_from(cfg.seed, "noise", step, slot))
        beta = model.estimate_band_weights_t(noisy) if cfg.blind else None
        restored = model.forward_t(noisy, sensor_id, band_weights=beta)
        return eng.mse(restored, eng.as_tensor(clean))

    log, total = _run_loop(model, cfg, len(dataset), start_step, step_fn, checkpoint_path)
    return log, total


@dataclass
class NoisyPatch:
    """SSL training record: the noisy patch is all there is."""

    noisy: np.ndarray


def prepare_ssl_records(cubes: Sequence, noise: NoiseSpec, seed: int, patch: int = 64, **extract_kwargs):
    """Degrade each source cube once, then cut noisy patches from it.

    Accepts HsiCube objects or anything with a ``data`` array; only the pixel
    payload is read, never any clean counterpart a record might carry.
    """
    records = []
    for idx, cube in enumerate(cubes):
        data = cube.data if hasattr(cube, "data") else np.asarray(cube)
        noisy, _ = apply_noise(data, noise, rng_from(seed, "ssl_noise", idx))
        ds = extract_patches(HsiCube(noisy), patch=patch, image_id=str(idx), **extract_kwargs)
        records.extend(NoisyPatch(noisy=rec.clean) for rec in ds.records)
    return records


def masked_band_mse(restored: Tensor, target: np.ndarray, hidden: Sequence[int]) -> Tensor:
    """Mean squared error over the hidden bands only; the visible part of the
    target cannot influence the value."""
    c, h, w = target.shape
    mask = np.zeros((c, 1, 1), dtype=target.dtype)
    mask[list(hidden)] = 1.0
    diff = eng.mul(eng.sub(restored, eng.as_tensor(target)), eng.as_tensor(mask))
    return eng.scale(eng.sum_all(eng.mul(diff, diff)), 1.0 / (len(hidden) * h * w))


def train_ssl(
    model: DenoisingModel,
    records: Sequence,
    cfg: TrainConfig,
    sensor_id: Optional[str] = None,
    checkpoint_path=None,
    start_step: int = 0,
):
    """Band-masking self-supervision: hide ssl_n bands, reconstruct them from
    the rest, and score the reconstruction against the noisy target on the
    hidden bands only."""
    if len(records) == 0:
        raise ConfigError("dataset: no training patches")
    c = records[0].noisy.shape[0]
    if cfg.ssl_n >= c:
        raise ConfigError(f"train.ssl_n: must be < band count {c}, got {cfg.ssl_n}")

    def step_fn(step, slot, idx):
        noisy = _augmented(records[idx].noisy, cfg, step, slot)
        hidden = rng_from(cfg.seed, "mask", step, slot).choice(c, size=cfg.ssl_n, replace=False)
        visible = [j for j in range(c) if j not in set(hidden.tolist())]
        restored = model.forward_t(noisy, sensor_id, visible=visible)
        return masked_band_mse(restored, noisy, hidden.tolist())

    log, total = _run_loop(model, cfg, len(records), start_step, step_fn, checkpoint_path)
    return log, total


def ssl_denoise(model: DenoisingModel, y: np.ndarray, n: int, sensor_id: Optional[str] = None) -> np.ndarray:
    """Reconstruct every band from the others in ceil(c / n) masking passes.

    Bands are partitioned by index modulo the group count, so each pass hides
    an evenly spaced set and keeps only its own predictions.
    """
    y = np.asarray(y)
    c = y.shape[0]
    if not 1 <= n < c:
        raise ConfigError(f"ssl_denoise: need 1 <= n < {c}, got {n}")
    groups = math.ceil(c / n)
    out = np.empty_like(y)
    for k in range(groups):
        hidden = [j for j in range(c) if j % groups == k]
        visible = [j for j in range(c) if j % groups != k]
        restored = model.forward(y, sensor_id, visible=visible)
        out[hidden] = restored[hidden]
    return out


# ---------------------------------------------------------------------------
# checkpoints


def save_checkpoint(
    path,
    model: DenoisingModel,
    step: int,
    train_config: Optional[TrainConfig] = None,
    extra: Optional[dict] = None,
) -> None:
    config = {
        "model": model.config.to_dict(),
        "train": train_config.to_dict() if train_config is not None else None,
        "seed": train_config.seed if train_config is not None else None,
        "experiment": extra,
    }
    blob = json.dumps(config, sort_keys=True).encode("utf-8")
    params = model.parameters()
    with open(path, "wb") as f:
        f.write(_CKPT_MAGIC)
        f.write(struct.pack("<I", _CKPT_VERSION))
        f.write(struct.pack("<Q", step))
        f.write(struct.pack("<I", len(blob)))
        f.write(blob)
        f.write(struct.pack("<I", len(params)))
        for p in params:
            name = p.name.encode("utf-8")
            arr = p.value.data
            f.write(struct.pack("<H", len(name)))
            f.write(name)
            f.write(struct.pack("<B", _DTYPE_CODES[arr.dtype]))
            f.write(struct.pack("<B", arr.ndim))
            for d in arr.shape:
                f.write(struct.pack("<I", d))
            f.write(arr.astype(arr.dtype.newbyteorder("<"), copy=False).tobytes())


def load_checkpoint(path):
    """Rebuild the model and its parameters; returns (model, step, config dict)."""
    with open(path, "rb") as f:
        raw = f.read()
    if raw[:8] != _CKPT_MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint (bad magic {raw[:8]!r})")
    off = 8
    (version,) = struct.unpack_from("<I", raw, off)
    off += 4
    if version != _CKPT_VERSION:
        raise CheckpointError(f"{path}: format version {version}, this reader supports {_CKPT_VERSION}")
    (step,) = struct.unpack_from("<Q", raw, off)
    off += 8
    (clen,) = struct.unpack_from("<I", raw, off)
    off += 4
    config = json.loads(raw[off : off + clen].decode("utf-8"))
    off += clen
    (n_params,) = struct.unpack_from("<I", raw, off)
    off += 4
    stored = {}
    for _ in range(n_params):
        (nlen,) = struct.unpack_from("<H", raw, off)
        off += 2
        name = raw[off : off + nlen].decode("utf-8")
        off += nlen
        code, ndim = struct.unpack_from("<BB", raw, off)
        off += 2
        if code not in _CODE_DTYPES:
            raise CheckpointError(f"{path}: unknown dtype code {code} for {name}")
        shape = struct.unpack_from(f"<{ndim}I", raw, off) if ndim else ()
        off += 4 * ndim
        dtype = _CODE_DTYPES[code]
        count = int(np.prod(shape)) if shape else 1
        arr = np.frombuffer(raw, dtype=dtype.newbyteorder("<"), count=count, offset=off)
        off += count * dtype.itemsize
        stored[name] = arr.reshape(shape).astype(dtype)  # writable copy
    model = DenoisingModel(ModelConfig.from_dict(config["model"]))
    expected = {p.name: p for p in model.parameters()}
    missing = sorted(set(expected) - set(stored))
    if missing:
        raise CheckpointError(f"{path}: missing parameters: {', '.join(missing)}")
    extra = sorted(set(stored) - set(expected))
    if extra:
        raise CheckpointError(f"{path}: unknown parameters: {', '.join(extra)}")
    for name, p in expected.items():
        if stored[name].shape != p.value.shape:
            raise CheckpointError(
                f"{path}: {name} has shape {stored[name].shape}, model expects {p.value.shape}"
            )
        p.value = Tensor(stored[name])
    return model, step, config
