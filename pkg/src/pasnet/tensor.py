"""Minimal float32 tensor with reverse-mode differentiation.

Only the operations needed by the two-branch network are provided. Every op
validates shapes up front, refuses to produce non-finite values, and records
a closure that pushes the output gradient back to its inputs. ``backward``
replays those closures in reverse creation order.
"""
from __future__ import annotations

import contextlib
import itertools
from dataclasses import dataclass
from typing import Callable, Iterable, Optional, Sequence, Tuple

import numpy as np

DTYPE = np.float32

_seq = itertools.count()
_grad_enabled = True


class ShapeError(ValueError):
    """Raised when operand shapes do not satisfy an op's contract."""


class NonFiniteError(FloatingPointError):
    """Raised when an op would produce NaN or Inf."""


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block (evaluation, checking)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


class Tensor:
    """Dense float32 array plus an optional gradient buffer.

    Leaves created by the user carry ``requires_grad``; op outputs inherit it
    from their parents and remember how to propagate gradients to them.
    """

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "_seq", "op")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.asarray(data, dtype=DTYPE)
        if arr.ndim == 0:
            arr = arr.reshape(())
        if any(s <= 0 for s in arr.shape):
            raise ShapeError(f"tensor extents must be positive, got {arr.shape}")
        self.data = arr
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = bool(requires_grad)
        self._parents: tuple = ()
        self._backward: Optional[Callable[[np.ndarray], None]] = None
        self._seq = next(_seq)
        self.op = "leaf"

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else _raise_scalar(self.shape)

    def zero_grad(self) -> None:
        self.grad = None

    def _accumulate(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = np.array(g, dtype=DTYPE, copy=True)
        else:
            self.grad += g

    def backward(self) -> None:
        backward(self)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, op={self.op}, requires_grad={self.requires_grad})"


def _raise_scalar(shape):
    raise ShapeError(f"item() needs a single-element tensor, got shape {shape}")


def _make(data: np.ndarray, parents: Sequence[Tensor], op: str,
          backward_fn: Callable[[np.ndarray], None]) -> Tensor:
    # ascontiguousarray would promote 0-d results to shape (1,)
    data = np.asarray(data, dtype=DTYPE)
    if not data.flags.c_contiguous:
        data = np.ascontiguousarray(data)
    if not np.isfinite(data).all():
        raise NonFiniteError(f"{op} produced non-finite values")
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out._seq = next(_seq)
    out.op = op
    needs = _grad_enabled and any(p.requires_grad for p in parents)
    out.requires_grad = needs
    if needs:
        out._parents = tuple(parents)
        out._backward = backward_fn
    else:
        out._parents = ()
        out._backward = None
    return out


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def backward(loss: Tensor) -> None:
    """Populate ``grad`` on every ``requires_grad`` ancestor of a scalar loss.

    Ops are replayed in reverse order of creation, each exactly once, so a
    tensor consumed by several ops has all of its contributions summed before
    it propagates further. Calling twice without zeroing accumulates.
    """
    if loss.data.size != 1:
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        return

    nodes = {}
    stack = [loss]
    while stack:
        t = stack.pop()
        if id(t) in nodes:
            continue
        nodes[id(t)] = t
        stack.extend(p for p in t._parents if p.requires_grad)

    # op outputs hold temporary grads; leaves accumulate across calls
    order = sorted(nodes.values(), key=lambda t: t._seq, reverse=True)
    grads = {id(loss): np.ones_like(loss.data)}
    for t in order:
        g = grads.pop(id(t), None)
        if t._backward is None:
            if g is not None:
                t._accumulate(g)
            continue
        if g is None:
            continue
        for p, pg in zip(t._parents, t._backward(g)):
            if pg is None or not p.requires_grad:
                continue
            if id(p) in grads:
                grads[id(p)] = grads[id(p)] + pg
            else:
                grads[id(p)] = pg


# --------------------------------------------------------------------------
# elementwise and reduction helpers


def _same_shape(op: str, a: Tensor, b: Tensor) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"{op}: shapes {a.shape} and {b.shape} differ")


def add(a: Tensor, b: Tensor) -> Tensor:
    _same_shape("add", a, b)
    return _make(a.data + b.data, (a, b), "add", lambda g: (g, g))


def mul(a: Tensor, b: Tensor) -> Tensor:
    _same_shape("mul", a, b)
    ad, bd = a.data, b.data
    return _make(ad * bd, (a, b), "mul", lambda g: (g * bd, g * ad))


def scale(x: Tensor, c: float) -> Tensor:
    c = DTYPE(c)
    return _make(x.data * c, (x,), "scale", lambda g: (g * c,))


def tsum(x: Tensor) -> Tensor:
    shape = x.shape
    return _make(np.sum(x.data, dtype=np.float64).astype(DTYPE), (x,), "sum",
                 lambda g: (np.full(shape, g, dtype=DTYPE),))


def mean(x: Tensor) -> Tensor:
    shape, n = x.shape, x.size
    return _make(np.mean(x.data, dtype=np.float64).astype(DTYPE), (x,), "mean",
                 lambda g: (np.full(shape, g / n, dtype=DTYPE),))


def relu(x: Tensor) -> Tensor:
    pos = x.data > 0
    return _make(np.where(pos, x.data, 0), (x,), "relu", lambda g: (g * pos,))


def concat_channels(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != 4 or b.data.ndim != 4:
        raise ShapeError("concat_channels expects two NCHW tensors")
    na, ca, ha, wa = a.shape
    nb, cb, hb, wb = b.shape
    if (na, ha, wa) != (nb, hb, wb):
        raise ShapeError(f"concat_channels: N,H,W mismatch {a.shape} vs {b.shape}")
    return _make(np.concatenate([a.data, b.data], axis=1), (a, b), "concat",
                 lambda g: (g[:, :ca], g[:, ca:]))


def upsample_nearest2x(x: Tensor) -> Tensor:
    _check_nchw("upsample_nearest2x", x)
    n, c, h, w = x.shape
    out = np.broadcast_to(x.data[:, :, :, None, :, None], (n, c, h, 2, w, 2)).reshape(n, c, 2 * h, 2 * w)

    def bwd(g):
        return (g.reshape(n, c, h, 2, w, 2).sum(axis=(3, 5)),)

    return _make(out, (x,), "upsample", bwd)


def global_avg_pool(x: Tensor) -> Tensor:
    _check_nchw("global_avg_pool", x)
    n, c, h, w = x.shape
    inv = DTYPE(1.0 / (h * w))
    out = x.data.mean(axis=(2, 3), dtype=np.float64).astype(DTYPE)

    def bwd(g):
        return (np.broadcast_to((g * inv)[:, :, None, None], (n, c, h, w)),)

    return _make(out, (x,), "gap", bwd)


def linear(x: Tensor, w: Tensor, b: Optional[Tensor] = None) -> Tensor:
    if x.data.ndim != 2 or w.data.ndim != 2:
        raise ShapeError(f"linear expects x [N,Din] and W [Dout,Din], got {x.shape}, {w.shape}")
    if x.shape[1] != w.shape[1]:
        raise ShapeError(f"linear: x has {x.shape[1]} features, W expects {w.shape[1]}")
    if b is not None and b.shape != (w.shape[0],):
        raise ShapeError(f"linear: bias shape {b.shape} != ({w.shape[0]},)")
    xd, wd = x.data, w.data
    out = xd @ wd.T
    if b is not None:
        out = out + b.data

    def bwd(g):
        return (g @ wd, g.T @ xd, g.sum(axis=0) if b is not None else None)

    parents = (x, w) if b is None else (x, w, b)
    return _make(out, parents, "linear", bwd)


def _check_nchw(op: str, x: Tensor) -> None:
    if x.data.ndim != 4:
        raise ShapeError(f"{op} expects an NCHW tensor, got shape {x.shape}")


# --------------------------------------------------------------------------
# convolution and pooling


def conv_output_size(size: int, k: int, stride: int, pad: int) -> int:
    return (size + 2 * pad - k) // stride + 1


def conv2d(x: Tensor, w: Tensor, b: Optional[Tensor] = None, stride: int = 1, pad: int = 0) -> Tensor:
    """2-D cross-correlation of NCHW input with [Cout, Cin, k, k] weights via im2col."""
    _check_nchw("conv2d", x)
    if w.data.ndim != 4 or w.shape[2] != w.shape[3]:
        raise ShapeError(f"conv2d: weight must be [Cout,Cin,k,k], got {w.shape}")
    n, cin, h, wd_ = x.shape
    cout, wcin, k, _ = w.shape
    if wcin != cin:
        raise ShapeError(f"conv2d: input has {cin} channels, weight expects {wcin}")
    if stride not in (1, 2):
        raise ShapeError(f"conv2d: stride must be 1 or 2, got {stride}")
    if pad < 0 or h + 2 * pad < k or wd_ + 2 * pad < k:
        raise ShapeError(f"conv2d: kernel {k} does not fit input {h}x{wd_} with pad {pad}")
    if b is not None and b.shape != (cout,):
        raise ShapeError(f"conv2d: bias shape {b.shape} != ({cout},)")

    ho = conv_output_size(h, k, stride, pad)
    wo = conv_output_size(wd_, k, stride, pad)
    xp = np.pad(x.data, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else x.data
    # one GEMM over all output positions: columns are [Cin*k*k, N*Ho*Wo]
    cols = np.empty((cin, k, k, n, ho, wo), dtype=DTYPE)
    xt = xp.transpose(1, 0, 2, 3)
    for i in range(k):
        for j in range(k):
            cols[:, i, j] = xt[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride]
    cols = cols.reshape(cin * k * k, n * ho * wo)
    wmat = w.data.reshape(cout, -1)
    out = wmat @ cols
    if b is not None:
        out += b.data[:, None]
    out = out.reshape(cout, n, ho, wo).transpose(1, 0, 2, 3)
    xp_shape = xp.shape

    def bwd(g):
        g2 = np.ascontiguousarray(g.transpose(1, 0, 2, 3)).reshape(cout, -1)
        gw = (g2 @ cols.T).reshape(w.shape) if w.requires_grad else None
        gb = g2.sum(axis=1) if (b is not None and b.requires_grad) else None
        gx = None
        if x.requires_grad:
            dcols = (wmat.T @ g2).reshape(cin, k, k, n, ho, wo)
            gxp = np.zeros((cin, n) + xp_shape[2:], dtype=DTYPE)
            for i in range(k):
                for j in range(k):
                    gxp[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride] += dcols[:, i, j]
            gxp = gxp.transpose(1, 0, 2, 3)
            gx = gxp[:, :, pad:pad + h, pad:pad + wd_] if pad else gxp
        return (gx, gw, gb)

    parents = (x, w) if b is None else (x, w, b)
    return _make(out, parents, "conv2d", bwd)


def maxpool2d(x: Tensor) -> Tensor:
    """2x2 max pooling with stride 2; ties resolve to the first cell in row-major order."""
    _check_nchw("maxpool2d", x)
    n, c, h, w = x.shape
    if h % 2 or w % 2:
        raise ShapeError(f"maxpool2d needs even spatial extents, got {h}x{w}")
    win = x.data.reshape(n, c, h // 2, 2, w // 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, h // 2, w // 2, 4)
    idx = win.argmax(axis=-1)
    out = np.take_along_axis(win, idx[..., None], axis=-1)[..., 0]

    def bwd(g):
        onehot = np.zeros((n, c, h // 2, w // 2, 4), dtype=DTYPE)
        np.put_along_axis(onehot, idx[..., None], g[..., None], axis=-1)
        gx = onehot.reshape(n, c, h // 2, w // 2, 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, h, w)
        return (gx,)

    return _make(out, (x,), "maxpool2d", bwd)


# --------------------------------------------------------------------------
# batch normalization


@dataclass
class RunningStats:
    """Per-channel running mean/variance updated in training mode."""

    mean: np.ndarray
    var: np.ndarray
    momentum: float = 0.1
    eps: float = 1e-5

    @classmethod
    def fresh(cls, channels: int) -> "RunningStats":
        return cls(np.zeros(channels, dtype=DTYPE), np.ones(channels, dtype=DTYPE))


def batchnorm2d(x: Tensor, gamma: Tensor, beta: Tensor, stats: RunningStats, training: bool) -> Tensor:
    _check_nchw("batchnorm2d", x)
    n, c, h, w = x.shape
    if gamma.shape != (c,) or beta.shape != (c,):
        raise ShapeError(f"batchnorm2d: affine params must be ({c},), got {gamma.shape}, {beta.shape}")
    g_ = gamma.data[None, :, None, None]
    b_ = beta.data[None, :, None, None]
    if training:
        m = n * h * w
        mu = x.data.mean(axis=(0, 2, 3), dtype=np.float64)
        var = x.data.var(axis=(0, 2, 3), dtype=np.float64)
        inv = (1.0 / np.sqrt(var + stats.eps)).astype(DTYPE)
        xhat = (x.data - mu.astype(DTYPE)[None, :, None, None]) * inv[None, :, None, None]
        unbiased = var * m / (m - 1) if m > 1 else var
        mom = stats.momentum
        stats.mean[...] = ((1 - mom) * stats.mean + mom * mu).astype(DTYPE)
        stats.var[...] = ((1 - mom) * stats.var + mom * unbiased).astype(DTYPE)
        out = xhat * g_ + b_

        def bwd(gr):
            dxhat = gr * g_
            s1 = dxhat.sum(axis=(0, 2, 3), keepdims=True)
            s2 = (dxhat * xhat).sum(axis=(0, 2, 3), keepdims=True)
            gx = (inv[None, :, None, None] / m) * (m * dxhat - s1 - xhat * s2)
            return (gx, (gr * xhat).sum(axis=(0, 2, 3)), gr.sum(axis=(0, 2, 3)))
    else:
        inv = (1.0 / np.sqrt(stats.var.astype(np.float64) + stats.eps)).astype(DTYPE)
        xhat = (x.data - stats.mean[None, :, None, None]) * inv[None, :, None, None]
        out = xhat * g_ + b_

        def bwd(gr):
            return (gr * g_ * inv[None, :, None, None], (gr * xhat).sum(axis=(0, 2, 3)), gr.sum(axis=(0, 2, 3)))

    return _make(out, (x, gamma, beta), "batchnorm2d", bwd)


# --------------------------------------------------------------------------
# gradient checking


KINK_REFINEMENTS = 2


def _scalar(t: Tensor) -> float:
    return float(np.asarray(t.data).reshape(()))


def _differences(f, x: Tensor, flat: np.ndarray, i: int, eps: float) -> Tuple[float, float, float]:
    """Central, forward and backward difference quotients at coordinate i."""
    orig = flat[i]
    hi, lo = orig + DTYPE(eps), orig - DTYPE(eps)
    f0 = _scalar(f(x))
    flat[i] = hi
    fp = _scalar(f(x))
    flat[i] = lo
    fm = _scalar(f(x))
    flat[i] = orig
    return ((fp - fm) / (float(hi) - float(lo)),
            (fp - f0) / (float(hi) - float(orig)),
            (f0 - fm) / (float(orig) - float(lo)))


def _smooth(est, tol: float = 1e-2) -> bool:
    _, fwd, bwd = est
    return abs(fwd - bwd) <= tol * max(1.0, abs(est[0]))


def grad_check(f: Callable[[Tensor], Tensor], x: Tensor, eps: float = 1e-3,
               coords: Optional[Iterable[int]] = None, max_coords: Optional[int] = None,
               seed: int = 0) -> float:
    """Largest relative disagreement between backprop and central differences.

    ``f`` maps ``x`` to a scalar tensor and must be deterministic; ``x`` is
    perturbed in place and restored. The error per coordinate is
    ``|analytic - numeric| / max(1, |numeric|)``. When the forward and
    backward differences disagree, a relu or max kink may lie inside the
    step, so shorter steps are tried as well (at most ``KINK_REFINEMENTS``
    times) and the error is taken against the closest of all central and
    one-sided estimates. A wrong analytic gradient matches none of them. For large tensors pass
    ``max_coords`` to probe a seeded random subset.
    """
    was = x.requires_grad
    x.requires_grad = True
    x.zero_grad()
    out = f(x)
    backward(out)
    analytic = np.zeros_like(x.data) if x.grad is None else x.grad.copy()
    x.zero_grad()
    x.requires_grad = was

    flat = x.data.reshape(-1)
    if coords is None:
        coords = range(flat.size)
        if max_coords is not None and flat.size > max_coords:
            coords = np.random.default_rng(seed).choice(flat.size, size=max_coords, replace=False)
    worst = 0.0
    with no_grad():
        for i in coords:
            a = float(analytic.reshape(-1)[i])
            step, estimates = eps, []
            for _ in range(KINK_REFINEMENTS + 1):
                est = _differences(f, x, flat, i, step)
                estimates.extend(est)
                if _smooth(est):
                    break
                # possibly a kink inside the step: also try a shorter one
                step /= 3.0
            err = min(abs(a - n) / max(1.0, abs(n)) for n in estimates)
            worst = max(worst, err)
    return worst
