"""Unrolled sparse encoders, the overlap-add decoder, and a lasso test oracle.

The encoders unroll a fixed number of shrinkage-thresholding steps. The
patchwise form works on single vectors; the convolutional form codes a whole
image with atoms placed at every spatial location, replacing the per-patch
synthesis by the current whole-image reconstruction normalized by the true
per-pixel estimate count. A weighted variant scales the data-fit residual
bandwise, which is how unknown per-band noise levels and band masking enter
the encoder.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Union

import numpy as np

from . import engine as eng
from .engine import Tensor
from .errors import DimensionError, DomainError

Dictionary = Union["DenseDictionary", "LowRankDictionary"]  # noqa: F821 (duck-typed)


@dataclass
class IstaConfig:
    """Unrolling parameters: step size (plain ISTA only), step count, thresholds."""

    step_size: float = 1.0
    iterations: int = 1
    lam: Optional[Tensor] = None  # per-atom thresholds, shape (p,)
    band_weights: Optional[Tensor] = None  # per-band data-fit weights, shape (c,)

    def __post_init__(self):
        if self.step_size <= 0:
            raise DomainError(f"step_size must be positive, got {self.step_size}")
        if self.iterations < 0:
            raise DomainError(f"iterations must be >= 0, got {self.iterations}")


@dataclass
class CodeMap:
    """Codes for every spatial location plus the geometry that produced them."""

    codes: Tensor  # (p, h', w')
    patch_side: int
    stride: int
    height: int
    width: int

    @property
    def atom_count(self) -> int:
        return self.codes.shape[0]


# ---------------------------------------------------------------------------
# patchwise steps


def _as_col(t: Tensor) -> Tensor:
    if t.ndim == 1:
        return eng.reshape(t, (t.shape[0], 1))
    return t


def lista_step(alpha, y, C, D, cfg: IstaConfig) -> Tensor:
    """One learned shrinkage step: S_lam[alpha + C^T (y - D alpha)].

    ``C`` and ``D`` are (m, p) matrices whose columns are atoms.
    """
    alpha, y, C, D = map(eng.as_tensor, (alpha, y, C, D))
    vec_out = alpha.ndim == 1
    a_col, y_col = _as_col(alpha), _as_col(y)
    resid = eng.sub(y_col, eng.matmul(D, a_col))
    pre = eng.add(a_col, eng.matmul(eng.transpose2d(C), resid))
    lam = cfg.lam if cfg.lam is not None else eng.as_tensor(np.zeros((), dtype=pre.dtype))
    lam_col = _as_col(lam) if lam.ndim == 1 else lam
    out = eng.soft_threshold(pre, lam_col)
    return eng.reshape(out, (out.shape[0],)) if vec_out else out


def ista_step(alpha, y, D, cfg: IstaConfig) -> Tensor:
    """One proximal-gradient step; literally a lista_step with C = step_size * D."""
    D = eng.as_tensor(D)
    return lista_step(alpha, y, eng.scale(D, cfg.step_size), D, cfg)


# ---------------------------------------------------------------------------
# convolutional encoders / decoder

_coverage_cache: dict = {}


def coverage_map(height: int, width: int, patch_side: int, stride: int, dtype=np.float32) -> np.ndarray:
    """Per-pixel patch count: the transposed convolution of an all-ones code
    with an all-ones single-atom kernel."""
    key = (height, width, patch_side, stride, np.dtype(dtype).str)
    cached = _coverage_cache.get(key)
    if cached is None:
        hp = (height - patch_side) // stride + 1
        wp = (width - patch_side) // stride + 1
        ones_codes = np.ones((1, hp, wp), dtype=dtype)
        ones_kernel = np.ones((1, 1, patch_side, patch_side), dtype=dtype)
        cov = eng._col2im(
            ones_kernel.reshape(1, patch_side**2).T @ ones_codes.reshape(1, hp * wp),
            (1, height, width),
            patch_side,
            stride,
        )[0]
        if not cov.all():
            raise DomainError(
                f"geometry s={patch_side}, stride={stride} on {height}x{width} leaves pixels uncovered"
            )
        _coverage_cache[key] = cached = cov
    return cached


def _unrolled_encode(y: Tensor, analysis, synthesis, cfg: IstaConfig, stride: int) -> CodeMap:
    c, h, w = y.shape
    s = synthesis.patch_side
    if analysis.patch_side != s or analysis.channels != c or synthesis.channels != c:
        raise DimensionError(
            f"encoder dictionaries do not match input: input c={c}, "
            f"analysis ({analysis.atom_count},{analysis.channels},{analysis.patch_side}), "
            f"synthesis ({synthesis.atom_count},{synthesis.channels},{synthesis.patch_side})"
        )
    if analysis.atom_count != synthesis.atom_count:
        raise DimensionError("analysis and synthesis dictionaries must share the atom count")
    p = synthesis.atom_count
    hp = (h - s) // stride + 1
    wp = (w - s) // stride + 1

    a_kernel = analysis.materialize()
    s_kernel = synthesis.materialize()
    lam = cfg.lam if cfg.lam is not None else eng.as_tensor(np.zeros(p, dtype=y.dtype))
    lam_b = eng.reshape(lam, (p, 1, 1))
    beta = cfg.band_weights
    beta_b = eng.reshape(beta, (c, 1, 1)) if beta is not None else None
    trivial_cover = s == 1 and stride == 1
    cov = None if trivial_cover else eng.as_tensor(coverage_map(h, w, s, stride, y.dtype)[None])

    codes = eng.as_tensor(np.zeros((p, hp, wp), dtype=y.dtype))
    for t in range(cfg.iterations):
        if t == 0:
            resid = y  # alpha starts at zero, so the reconstruction is zero
        else:
            rec = eng.conv_transpose2d(codes, s_kernel, stride, out_hw=(h, w))
            if cov is not None:
                rec = eng.divide(rec, cov)
            resid = eng.sub(y, rec)
        if beta_b is not None:
            resid = eng.mul(resid, beta_b)
        pre = eng.add(codes, eng.conv2d(resid, a_kernel, stride))
        codes = eng.soft_threshold(pre, lam_b)
    return CodeMap(codes=codes, patch_side=s, stride=stride, height=h, width=w)


def csc_encode(y, analysis, synthesis, cfg: IstaConfig, stride: int = 1) -> CodeMap:
    """Convolutional sparse coding of a (c, h, w) image; codes start at zero."""
    y = eng.as_tensor(y)
    if y.ndim != 3:
        raise DimensionError(f"csc_encode expects (c, h, w), got {y.shape}")
    base = IstaConfig(cfg.step_size, cfg.iterations, cfg.lam, band_weights=None)
    return _unrolled_encode(y, analysis, synthesis, base, stride)


def weighted_csc_encode(y, analysis, synthesis, cfg: IstaConfig, stride: int = 1) -> CodeMap:
    """As ``csc_encode`` but the residual is scaled bandwise by cfg.band_weights."""
    if cfg.band_weights is None:
        raise DomainError("weighted_csc_encode requires cfg.band_weights")
    y = eng.as_tensor(y)
    if y.ndim != 3:
        raise DimensionError(f"weighted_csc_encode expects (c, h, w), got {y.shape}")
    beta = eng.as_tensor(cfg.band_weights)
    if beta.shape != (y.shape[0],):
        raise DimensionError(f"band_weights shape {beta.shape} does not match {y.shape[0]} bands")
    return _unrolled_encode(y, analysis, synthesis, cfg, stride)


def overlap_add_decode(codes: CodeMap, decoder) -> Tensor:
    """Average all patch estimates: transposed convolution with the decoder
    dictionary, divided by the per-pixel estimate count."""
    if decoder.patch_side != codes.patch_side:
        raise DimensionError(
            f"decoder patch side {decoder.patch_side} does not match code geometry {codes.patch_side}"
        )
    if decoder.atom_count != codes.atom_count:
        raise DimensionError(
            f"decoder atoms {decoder.atom_count} do not match code channels {codes.atom_count}"
        )
    kernel = decoder.materialize()
    out = eng.conv_transpose2d(codes.codes, kernel, codes.stride, out_hw=(codes.height, codes.width))
    if not (codes.patch_side == 1 and codes.stride == 1):
        cov = coverage_map(codes.height, codes.width, codes.patch_side, codes.stride, out.dtype)
        out = eng.divide(out, eng.as_tensor(cov[None]))
    return out


# ---------------------------------------------------------------------------
# objectives (useful for tests and diagnostics)


def lasso_objective(y: np.ndarray, D: np.ndarray, alpha: np.ndarray, lam) -> float:
    """0.5 ||y - D alpha||^2 + sum_k lam_k |alpha_k| in float64."""
    y = np.asarray(y, np.float64).ravel()
    D = np.asarray(D, np.float64)
    alpha = np.asarray(alpha, np.float64).ravel()
    lam = np.broadcast_to(np.asarray(lam, np.float64), alpha.shape)
    r = y - D @ alpha
    return 0.5 * float(r @ r) + float(lam @ np.abs(alpha))


# ---------------------------------------------------------------------------
# lasso oracle (tests only): coordinate descent to a tiny duality gap


def _soft(x: float, t: float) -> float:
    if x > t:
        return x - t
    if x < -t:
        return x + t
    return 0.0


def _duality_gap(y, D, lam, alpha, r) -> float:
    primal = 0.5 * float(r @ r) + float(lam @ np.abs(alpha))
    z = D.T @ r
    pos = lam > 0
    if not np.all(np.abs(z[~pos]) < 1e-12):
        return np.inf  # unpenalized coordinate not yet solved; gap undefined
    scale = 1.0
    if np.any(pos):
        scale = max(1.0, float(np.max(np.abs(z[pos]) / lam[pos])))
    theta = r / scale
    dual = 0.5 * float(y @ y) - 0.5 * float((y - theta) @ (y - theta))
    return primal - dual


def lasso_oracle(y, D, lam, gap_tol: float = 1e-10, max_sweeps: int = 200000) -> np.ndarray:
    """Solve min_a 0.5||y - D a||^2 + sum_k lam_k |a_k| by cyclic coordinate
    descent in float64, stopping at duality gap < gap_tol."""
    y = np.asarray(y, np.float64).ravel()
    D = np.asarray(D, np.float64)
    if D.ndim != 2 or D.shape[0] != y.size:
        raise DimensionError(f"lasso_oracle: D shape {D.shape} does not match y size {y.size}")
    p = D.shape[1]
    lam = np.broadcast_to(np.asarray(lam, np.float64).ravel(), (p,)).copy()
    if np.any(lam < 0):
        raise DomainError("lasso_oracle: lambda must be nonnegative")
    colsq = np.einsum("ij,ij->j", D, D)
    alpha = np.zeros(p)
    r = y.copy()
    for sweep in range(max_sweeps):
        max_move = 0.0
        for k in range(p):
            ck = colsq[k]
            if ck == 0.0:
                continue
            old = alpha[k]
            rho = float(D[:, k] @ r) + ck * old
            new = _soft(rho, lam[k]) / ck
            if new != old:
                r += D[:, k] * (old - new)
                alpha[k] = new
                move = abs(new - old)
                if move > max_move:
                    max_move = move
        if _duality_gap(y, D, lam, alpha, r) < gap_tol:
            break
        if max_move == 0.0:
            break
    return alpha
