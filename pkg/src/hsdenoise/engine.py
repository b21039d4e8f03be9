"""Dense tensors with reverse-mode differentiation.

The engine implements exactly the operation set the denoising model needs:
2-D matrix products, valid cross-correlation with its exact adjoint,
soft-thresholding, and a small pointwise suite. Every operation works in
two modes: with no tape active it is plain numpy, and inside a ``Tape``
context it records enough state for one reverse sweep.

Training runs in float32; float64 is used by the finite-difference oracle
and the numeric test suite.
"""

from __future__ import annotations

import threading
from typing import Callable, Optional, Sequence

import numpy as np

from .errors import DimensionError, DomainError, NonFiniteError, TapeStateError

DEFAULT_DTYPE = np.float32

_local = threading.local()
_debug_checks = False


def set_debug_checks(enabled: bool) -> None:
    """Toggle per-operation NaN/Inf detection (off by default, it is costly)."""
    global _debug_checks
    _debug_checks = bool(enabled)


def _active_tape() -> Optional["Tape"]:
    return getattr(_local, "tape", None)


def _check_finite(arr: np.ndarray) -> None:
    if _debug_checks and not np.all(np.isfinite(arr)):
        raise NonFiniteError("non-finite value produced by an operation")


class Tensor:
    """A dense array in row-major order.

    Tensors themselves carry no tape state, so they are freely shareable
    across threads; graph bookkeeping lives on the Tape that records them.
    """

    __slots__ = ("data",)

    def __init__(self, data, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(DEFAULT_DTYPE)
        if arr.ndim > 0 and not arr.flags["C_CONTIGUOUS"]:
            arr = np.ascontiguousarray(arr)
        self.data = arr

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data)

    def copy(self) -> "Tensor":
        return Tensor(self.data.copy())

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype})"


class Parameter:
    """A named learnable tensor; ``grad`` is filled by ``Tape.backward``.

    Float arrays keep their precision; anything else becomes float32.
    """

    __slots__ = ("value", "grad", "name")

    def __init__(self, value, name: str, dtype=None):
        self.value = value if isinstance(value, Tensor) else Tensor(value, dtype=dtype)
        self.grad: Optional[np.ndarray] = None
        self.name = name

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        return f"Parameter({self.name}, shape={self.value.shape})"


def as_tensor(x, dtype=None) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x, dtype=dtype)


class _Node:
    __slots__ = ("backward_fn", "parents")

    def __init__(self, backward_fn, parents):
        self.backward_fn = backward_fn
        self.parents = parents


class Tape:
    """Append-only record of operations for one reverse sweep.

    Nodes are stored in creation order, which is a topological order by
    construction. A tape is single-threaded; distinct tapes may live on
    distinct threads.
    """

    def __init__(self):
        self._nodes: list[Optional[_Node]] = []
        self._ids: dict[int, int] = {}  # id(tensor) -> node id
        self._keepalive: list[Tensor] = []  # pins ids against reuse
        self._watched: list[tuple[Parameter, int]] = []
        self._finished = False

    def __enter__(self) -> "Tape":
        if getattr(_local, "tape", None) is not None:
            raise TapeStateError("a tape is already active on this thread")
        _local.tape = self
        return self

    def __exit__(self, exc_type, exc, tb) -> None:
        _local.tape = None

    def __len__(self) -> int:
        return len(self._nodes)

    def _register(self, t: Tensor) -> int:
        """Return the node id of ``t`` on this tape, adding it as a leaf if new."""
        nid = self._ids.get(id(t))
        if nid is None:
            nid = len(self._nodes)
            self._nodes.append(None)
            self._ids[id(t)] = nid
            self._keepalive.append(t)
        return nid

    def _record(self, out: Tensor, parents: tuple, backward_fn) -> None:
        nid = len(self._nodes)
        self._nodes.append(_Node(backward_fn, parents))
        self._ids[id(out)] = nid
        self._keepalive.append(out)

    def watch(self, param: Parameter) -> None:
        """Ensure ``param`` receives a gradient after the sweep (zero if unreachable)."""
        nid = self._register(param.value)
        self._watched.append((param, nid))

    def backward(self, loss: Tensor) -> None:
        """Reverse sweep from a scalar loss; fills ``grad`` on watched parameters.

        May be called once per tape; accumulation order is the fixed reverse
        creation order, so gradients are bit-reproducible.
        """
        if self._finished:
            raise TapeStateError("backward already ran on this tape")
        loss_nid = self._ids.get(id(loss))
        if loss_nid is None:
            raise TapeStateError("loss tensor was not computed on this tape")
        if loss.data.shape != ():
            raise DimensionError(f"backward needs a scalar loss, got shape {loss.data.shape}")
        self._finished = True
        grads: list[Optional[np.ndarray]] = [None] * len(self._nodes)
        grads[loss_nid] = np.ones((), dtype=loss.data.dtype)
        for nid in range(len(self._nodes) - 1, -1, -1):
            node = self._nodes[nid]
            g = grads[nid]
            if node is None or g is None:
                continue
            node.backward_fn(g, grads)
            grads[nid] = None
        for param, nid in self._watched:
            g = grads[nid]
            if g is None:
                param.grad = np.zeros_like(param.value.data)
            else:
                param.grad = np.ascontiguousarray(g, dtype=param.value.data.dtype)


def _acc(grads: list, nid: int, g: np.ndarray) -> None:
    if grads[nid] is None:
        grads[nid] = g
    else:
        grads[nid] = grads[nid] + g


def _reduce_to(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum ``g`` over broadcast axes so it matches ``shape``."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


# ---------------------------------------------------------------------------
# elementwise suite


def _binary(a, b, fwd, bwd_a, bwd_b, opname: str) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    try:
        out_data = fwd(a.data, b.data)
    except ValueError as exc:
        raise DimensionError(f"{opname}: incompatible shapes {a.shape} and {b.shape}") from exc
    _check_finite(out_data)
    out = Tensor(out_data)
    tape = _active_tape()
    if tape is not None:
        pa, pb = tape._register(a), tape._register(b)
        ad, bd = a.data, b.data

        def backward(g, grads):
            _acc(grads, pa, _reduce_to(bwd_a(g, ad, bd), ad.shape))
            _acc(grads, pb, _reduce_to(bwd_b(g, ad, bd), bd.shape))

        tape._record(out, (pa, pb), backward)
    return out


def add(a, b) -> Tensor:
    return _binary(a, b, lambda x, y: x + y, lambda g, x, y: g, lambda g, x, y: g, "add")


def sub(a, b) -> Tensor:
    return _binary(a, b, lambda x, y: x - y, lambda g, x, y: g, lambda g, x, y: -g, "sub")


def mul(a, b) -> Tensor:
    return _binary(a, b, lambda x, y: x * y, lambda g, x, y: g * y, lambda g, x, y: g * x, "mul")


def divide(a, b) -> Tensor:
    """Elementwise a / b; b must be nonzero everywhere it is used."""
    return _binary(
        a,
        b,
        lambda x, y: x / y,
        lambda g, x, y: g / y,
        lambda g, x, y: -g * x / (y * y),
        "divide",
    )


def scale(a, s: float) -> Tensor:
    """Multiply by a python scalar (not differentiable w.r.t. the scalar)."""
    a = as_tensor(a)
    out_data = a.data * s
    _check_finite(out_data)
    out = Tensor(out_data)
    tape = _active_tape()
    if tape is not None:
        pa = tape._register(a)

        def backward(g, grads):
            _acc(grads, pa, g * s)

        tape._record(out, (pa,), backward)
    return out


def relu(a) -> Tensor:
    a = as_tensor(a)
    out_data = np.maximum(a.data, 0)
    out = Tensor(out_data)
    tape = _active_tape()
    if tape is not None:
        pa = tape._register(a)
        mask = a.data > 0

        def backward(g, grads):
            _acc(grads, pa, g * mask)

        tape._record(out, (pa,), backward)
    return out


def softplus(a) -> Tensor:
    a = as_tensor(a)
    out_data = np.logaddexp(np.zeros((), dtype=a.data.dtype), a.data)
    out = Tensor(out_data)
    tape = _active_tape()
    if tape is not None:
        pa = tape._register(a)
        sig = 0.5 * (1.0 + np.tanh(0.5 * a.data))

        def backward(g, grads):
            _acc(grads, pa, g * sig)

        tape._record(out, (pa,), backward)
    return out


def soft_threshold(u, lam) -> Tensor:
    """sign(u) * max(|u| - lam, 0), with lam broadcastable to u and lam >= 0.

    Subgradients: 1 w.r.t. u where |u| > lam, 0 elsewhere (closed dead zone);
    -sign(output) w.r.t. lam where the output is nonzero.
    """
    u, lam = as_tensor(u), as_tensor(lam)
    if np.any(lam.data < 0):
        raise DomainError("soft_threshold: lambda must be nonnegative")
    try:
        mag = np.abs(u.data) - lam.data
    except ValueError as exc:
        raise DimensionError(
            f"soft_threshold: lambda shape {lam.shape} does not broadcast to {u.shape}"
        ) from exc
    out_data = np.sign(u.data) * np.maximum(mag, 0)
    _check_finite(out_data)
    out = Tensor(out_data)
    tape = _active_tape()
    if tape is not None:
        pu, pl = tape._register(u), tape._register(lam)
        keep = mag > 0
        sgn = np.sign(u.data)
        lam_shape = lam.data.shape

        def backward(g, grads):
            _acc(grads, pu, g * keep)
            _acc(grads, pl, _reduce_to(np.where(keep, -sgn * g, 0.0), lam_shape))

        tape._record(out, (pu, pl), backward)
    return out


# ---------------------------------------------------------------------------
# shape manipulation


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    try:
        out_data = a.data.reshape(shape)
    except ValueError as exc:
        raise DimensionError(f"reshape: cannot view {a.shape} as {shape}") from exc
    out = Tensor(out_data)
    tape = _active_tape()
    if tape is not None:
        pa = tape._register(a)
        orig = a.data.shape

        def backward(g, grads):
            _acc(grads, pa, g.reshape(orig))

        tape._record(out, (pa,), backward)
    return out


def transpose2d(a) -> Tensor:
    a = as_tensor(a)
    if a.ndim != 2:
        raise DimensionError(f"transpose2d expects a matrix, got shape {a.shape}")
    out = Tensor(np.ascontiguousarray(a.data.T))
    tape = _active_tape()
    if tape is not None:
        pa = tape._register(a)

        def backward(g, grads):
            _acc(grads, pa, np.ascontiguousarray(g.T))

        tape._record(out, (pa,), backward)
    return out


def swap_last2(a) -> Tensor:
    """Transpose the trailing two axes of a 3-D tensor."""
    a = as_tensor(a)
    if a.ndim != 3:
        raise DimensionError(f"swap_last2 expects a 3-D tensor, got shape {a.shape}")
    out = Tensor(np.ascontiguousarray(a.data.transpose(0, 2, 1)))
    tape = _active_tape()
    if tape is not None:
        pa = tape._register(a)

        def backward(g, grads):
            _acc(grads, pa, np.ascontiguousarray(g.transpose(0, 2, 1)))

        tape._record(out, (pa,), backward)
    return out


def stack_scalars(items: Sequence) -> Tensor:
    """Stack scalar tensors into a vector; gradients split back per element."""
    ts = [as_tensor(t) for t in items]
    for t in ts:
        if t.data.shape != ():
            raise DimensionError(f"stack_scalars expects scalars, got shape {t.data.shape}")
    out = Tensor(np.array([t.data for t in ts]))
    tape = _active_tape()
    if tape is not None:
        pids = tuple(tape._register(t) for t in ts)

        def backward(g, grads):
            for i, pid in enumerate(pids):
                _acc(grads, pid, np.asarray(g[i]))

        tape._record(out, pids, backward)
    return out


# ---------------------------------------------------------------------------
# reductions


def sum_all(a) -> Tensor:
    a = as_tensor(a)
    out = Tensor(np.sum(a.data))
    tape = _active_tape()
    if tape is not None:
        pa = tape._register(a)
        shape, dt = a.data.shape, a.data.dtype

        def backward(g, grads):
            _acc(grads, pa, np.full(shape, g, dtype=dt))

        tape._record(out, (pa,), backward)
    return out


def global_average_pool(x) -> Tensor:
    """(c, h, w) -> (c,) spatial mean per channel."""
    x = as_tensor(x)
    if x.ndim != 3:
        raise DimensionError(f"global_average_pool expects (c, h, w), got {x.shape}")
    out = Tensor(x.data.mean(axis=(1, 2)))
    tape = _active_tape()
    if tape is not None:
        px = tape._register(x)
        c, h, w = x.data.shape

        def backward(g, grads):
            _acc(grads, px, np.broadcast_to(g[:, None, None] / (h * w), (c, h, w)).copy())

        tape._record(out, (px,), backward)
    return out


def mse(a, b) -> Tensor:
    """Mean of squared differences over all elements; scalar output."""
    a, b = as_tensor(a), as_tensor(b)
    try:
        diff = a.data - b.data
    except ValueError as exc:
        raise DimensionError(f"mse: incompatible shapes {a.shape} and {b.shape}") from exc
    out = Tensor(np.mean(diff * diff))
    tape = _active_tape()
    if tape is not None:
        pa, pb = tape._register(a), tape._register(b)
        n = diff.size
        ash, bsh = a.data.shape, b.data.shape

        def backward(g, grads):
            base = (2.0 / n) * g * diff
            _acc(grads, pa, _reduce_to(base, ash))
            _acc(grads, pb, _reduce_to(-base, bsh))

        tape._record(out, (pa, pb), backward)
    return out


# ---------------------------------------------------------------------------
# linear algebra


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    out_data = a.data @ b.data
    _check_finite(out_data)
    out = Tensor(out_data)
    tape = _active_tape()
    if tape is not None:
        pa, pb = tape._register(a), tape._register(b)
        ad, bd = a.data, b.data

        def backward(g, grads):
            _acc(grads, pa, g @ bd.T)
            _acc(grads, pb, ad.T @ g)

        tape._record(out, (pa, pb), backward)
    return out


def bmm(a, b) -> Tensor:
    """Batched matmul: (n, i, j) @ (n, j, k) -> (n, i, k)."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 3 or b.ndim != 3 or a.shape[0] != b.shape[0] or a.shape[2] != b.shape[1]:
        raise DimensionError(f"bmm: incompatible shapes {a.shape} and {b.shape}")
    out_data = np.matmul(a.data, b.data)
    _check_finite(out_data)
    out = Tensor(out_data)
    tape = _active_tape()
    if tape is not None:
        pa, pb = tape._register(a), tape._register(b)
        ad, bd = a.data, b.data

        def backward(g, grads):
            _acc(grads, pa, np.matmul(g, bd.transpose(0, 2, 1)))
            _acc(grads, pb, np.matmul(ad.transpose(0, 2, 1), g))

        tape._record(out, (pa, pb), backward)
    return out


# ---------------------------------------------------------------------------
# convolution pair (valid geometry, exact adjoints)


def _im2col(x: np.ndarray, s: int, stride: int):
    """(cin, h, w) -> (cin*s*s, n) column matrix; rows ordered (channel, dy, dx)."""
    win = np.lib.stride_tricks.sliding_window_view(x, (s, s), axis=(1, 2))
    win = win[:, ::stride, ::stride]
    cin = x.shape[0]
    hp, wp = win.shape[1], win.shape[2]
    cols = win.transpose(0, 3, 4, 1, 2).reshape(cin * s * s, hp * wp)
    return np.ascontiguousarray(cols), (hp, wp)


def _col2im(cols: np.ndarray, x_shape: tuple, s: int, stride: int) -> np.ndarray:
    """Exact adjoint of ``_im2col``: scatter-add columns back into an image."""
    cin, h, w = x_shape
    hp = (h - s) // stride + 1
    wp = (w - s) // stride + 1
    out = np.zeros(x_shape, dtype=cols.dtype)
    blocks = cols.reshape(cin, s, s, hp, wp)
    for dy in range(s):
        for dx in range(s):
            out[:, dy : dy + stride * hp : stride, dx : dx + stride * wp : stride] += blocks[
                :, dy, dx
            ]
    return out


def _conv_shapes(x_shape, k_shape, stride):
    if len(x_shape) != 3 or len(k_shape) != 4:
        raise DimensionError(f"conv2d: expected (cin,h,w) and (cout,cin,s,s), got {x_shape}, {k_shape}")
    cin, h, w = x_shape
    cout, kcin, s, s2 = k_shape
    if s != s2:
        raise DimensionError(f"conv2d: kernel must be square, got {k_shape}")
    if kcin != cin:
        raise DimensionError(f"conv2d: kernel channels {kcin} != input channels {cin}")
    if s > h or s > w:
        raise DimensionError(f"conv2d: kernel side {s} exceeds input {h}x{w}")
    if stride < 1:
        raise DomainError(f"conv2d: stride must be >= 1, got {stride}")
    return cout, cin, s, (h - s) // stride + 1, (w - s) // stride + 1


def conv2d(x, k, stride: int = 1) -> Tensor:
    """Valid cross-correlation: (cin,h,w) * (cout,cin,s,s) -> (cout,h',w')."""
    x, k = as_tensor(x), as_tensor(k)
    cout, cin, s, hp, wp = _conv_shapes(x.shape, k.shape, stride)
    cols, _ = _im2col(x.data, s, stride)
    kmat = k.data.reshape(cout, cin * s * s)
    out_data = (kmat @ cols).reshape(cout, hp, wp)
    _check_finite(out_data)
    out = Tensor(out_data)
    tape = _active_tape()
    if tape is not None:
        px, pk = tape._register(x), tape._register(k)
        x_shape, k_shape = x.data.shape, k.data.shape

        def backward(g, grads):
            gf = g.reshape(cout, hp * wp)
            _acc(grads, pk, (gf @ cols.T).reshape(k_shape))
            _acc(grads, px, _col2im(kmat.T @ gf, x_shape, s, stride))

        tape._record(out, (px, pk), backward)
    return out


def conv_transpose2d(a, k, stride: int = 1, out_hw: Optional[tuple] = None) -> Tensor:
    """Exact adjoint of ``conv2d`` at the same stride.

    (p,h',w') with kernel (p,cin,s,s) -> (cin,h,w); for every x and a,
    <conv2d(x,k), a> == <x, conv_transpose2d(a,k)>. ``out_hw`` resolves the
    output extent when (h-s) is not a multiple of the stride.
    """
    a, k = as_tensor(a), as_tensor(k)
    if a.ndim != 3 or k.ndim != 4:
        raise DimensionError(
            f"conv_transpose2d: expected (p,h',w') and (p,cin,s,s), got {a.shape}, {k.shape}"
        )
    p, hp, wp = a.shape
    kp, cin, s, s2 = k.shape
    if s != s2:
        raise DimensionError(f"conv_transpose2d: kernel must be square, got {k.shape}")
    if kp != p:
        raise DimensionError(f"conv_transpose2d: code channels {p} != kernel atoms {kp}")
    if stride < 1:
        raise DomainError(f"conv_transpose2d: stride must be >= 1, got {stride}")
    if out_hw is None:
        h, w = (hp - 1) * stride + s, (wp - 1) * stride + s
    else:
        h, w = out_hw
    if h < s or w < s or (h - s) // stride + 1 != hp or (w - s) // stride + 1 != wp:
        raise DimensionError(
            f"conv_transpose2d: output {h}x{w} inconsistent with codes {hp}x{wp} at stride {stride}"
        )
    kmat = k.data.reshape(p, cin * s * s)
    kt = np.ascontiguousarray(kmat.T)
    aflat = a.data.reshape(p, hp * wp)
    out_data = _col2im(kt @ aflat, (cin, h, w), s, stride)
    _check_finite(out_data)
    out = Tensor(out_data)
    tape = _active_tape()
    if tape is not None:
        pa, pk = tape._register(a), tape._register(k)
        a_shape, k_shape = a.data.shape, k.data.shape

        def backward(g, grads):
            cols_g, _ = _im2col(g, s, stride)
            _acc(grads, pa, (kmat @ cols_g).reshape(a_shape))
            _acc(grads, pk, (aflat @ cols_g.T).reshape(k_shape))

        tape._record(out, (pa, pk), backward)
    return out


# ---------------------------------------------------------------------------
# gradient oracle


def finite_diff_grad(f: Callable, at, eps: float = 1e-5):
    """Central-difference gradient of a tensor-to-scalar function.

    Returns an array (or Tensor, matching ``at``) of (f(x+eps*e_i) - f(x-eps*e_i)) / (2 eps).
    """
    is_tensor = isinstance(at, Tensor)
    x = (at.data if is_tensor else np.asarray(at)).astype(np.float64).copy()
    flat = x.reshape(-1)
    grad = np.zeros_like(flat)

    def evaluate():
        arg = Tensor(x.copy()) if is_tensor else x.copy()
        val = f(arg)
        return float(val.data) if isinstance(val, Tensor) else float(val)

    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        fp = evaluate()
        flat[i] = orig - eps
        fm = evaluate()
        flat[i] = orig
        grad[i] = (fp - fm) / (2.0 * eps)
    grad = grad.reshape(x.shape)
    return Tensor(grad) if is_tensor else grad
