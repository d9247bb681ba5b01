"""Dense rank-4 tensors and grouped 2D convolution with exact gradients.

Tensors are plain numpy arrays in row-major (n, c, h, w) layout, float32 by
default and float64 for gradient validation. Convolution is cross-correlation
(no kernel flip). Every op raises instead of silently producing NaN/Inf.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np

from . import _kernels

Array = np.ndarray

_FLOAT_DTYPES = (np.dtype(np.float32), np.dtype(np.float64))


class ShapeError(ValueError):
    """Tensor or kernel dimensions incompatible with the requested operation."""


class NonFiniteError(ArithmeticError):
    """An engine-produced value came out NaN or infinite."""


def as_tensor4(a, dtype=None) -> Array:
    """Coerce to a contiguous rank-4 float array (the engine's carrier)."""
    arr = np.ascontiguousarray(a, dtype=dtype)
    if arr.ndim != 4:
        raise ShapeError(f"expected a rank-4 tensor, got shape {arr.shape}")
    if arr.dtype not in _FLOAT_DTYPES:
        arr = arr.astype(np.float32)
    return arr


def require_tensor4(a: Array, name: str = "tensor") -> Array:
    if not isinstance(a, np.ndarray) or a.ndim != 4:
        raise ShapeError(f"{name} must be a rank-4 ndarray, got "
                         f"{getattr(a, 'shape', type(a))}")
    if a.dtype not in _FLOAT_DTYPES:
        raise ShapeError(f"{name} must be float32/float64, got {a.dtype}")
    return a


def assert_finite(a: Array, what: str = "result") -> Array:
    # One reduction pass. dot(x, x) sums squares, so poisoned values cannot
    # cancel: any NaN/Inf input yields a NaN/Inf total. (Magnitudes beyond
    # ~1e15 in float32 overflow the check itself; that is divergence anyway.)
    if not a.size:
        return a
    flat = a.reshape(-1) if a.flags.c_contiguous else a.ravel()
    if not np.isfinite(np.dot(flat, flat)):
        raise NonFiniteError(f"{what} contains NaN or Inf")
    return a


@dataclass(frozen=True)
class ConvSpec:
    """Geometry of one convolution layer."""

    c_in: int
    c_out: int
    kernel: int
    stride: int = 1
    padding: int = 0
    groups: int = 1

    def __post_init__(self):
        for field in ("c_in", "c_out", "kernel", "stride", "groups"):
            v = getattr(self, field)
            if not isinstance(v, int) or v < 1:
                raise ShapeError(f"ConvSpec.{field} must be a positive integer, got {v!r}")
        if not isinstance(self.padding, int) or self.padding < 0:
            raise ShapeError(f"ConvSpec.padding must be a non-negative integer, got {self.padding!r}")
        if self.c_in % self.groups or self.c_out % self.groups:
            raise ShapeError(
                f"groups={self.groups} must divide c_in={self.c_in} and c_out={self.c_out}")

    @property
    def depthwise(self) -> bool:
        return self.c_in == self.c_out == self.groups

    @property
    def dense(self) -> bool:
        return self.groups == 1

    def weight_shape(self) -> tuple[int, int, int, int]:
        return (self.c_out, self.c_in // self.groups, self.kernel, self.kernel)

    def out_hw(self, h: int, w: int) -> tuple[int, int]:
        ho = (h + 2 * self.padding - self.kernel) // self.stride + 1
        wo = (w + 2 * self.padding - self.kernel) // self.stride + 1
        if ho < 1 or wo < 1:
            raise ShapeError(f"input {h}x{w} too small for {self}")
        return ho, wo

    def check(self, x: Array, w: Array, bias: Optional[Array] = None) -> None:
        require_tensor4(x, "input")
        require_tensor4(w, "weight")
        if x.shape[1] != self.c_in:
            raise ShapeError(f"input has {x.shape[1]} channels, spec wants {self.c_in}")
        if w.shape != self.weight_shape():
            raise ShapeError(f"weight shape {w.shape} does not match spec {self.weight_shape()}")
        if bias is not None and bias.shape != (self.c_out,):
            raise ShapeError(f"bias shape {bias.shape}, expected ({self.c_out},)")
        if x.dtype != w.dtype:
            raise ShapeError(f"input dtype {x.dtype} != weight dtype {w.dtype}")


def conv2d_forward(x: Array, w: Array, spec: ConvSpec, bias: Optional[Array] = None) -> Array:
    """Grouped 2D cross-correlation.

    Output channel oc in group q = oc // (c_out/g) reads only input channels
    of group q. Output spatial size floor((h + 2p - k)/s) + 1.
    """
    out, _ = conv2d_forward_ctx(x, w, spec, bias, want_ctx=False)
    return out


def conv2d_forward_ctx(x: Array, w: Array, spec: ConvSpec, bias: Optional[Array] = None,
                       want_ctx: bool = True) -> tuple[Array, Optional[tuple]]:
    """Forward plus an opaque context that lets the matching backward skip
    re-deriving the padded input / patch matrix."""
    spec.check(x, w, bias)
    n, c_in, h, wid = x.shape
    k, s = spec.kernel, spec.stride
    h_out, w_out = spec.out_hw(h, wid)
    ctx = None

    if k == 1 and spec.padding == 0:
        out = _pointwise_forward(x, w, spec, h_out, w_out)
    elif spec.depthwise:
        xp = _pad(x, spec.padding)
        out = _depthwise_forward(xp, w, s, h_out, w_out)
        if want_ctx:
            ctx = ("dw", xp)
    else:
        xp = _pad(x, spec.padding)
        cols = _im2col(xp, k, s, h_out, w_out, spec.groups)
        out = _grouped_forward(cols, w, spec, n, h_out, w_out)
        if want_ctx:
            ctx = ("gen", cols)

    if bias is not None:
        out += bias.astype(x.dtype)[None, :, None, None]
    return assert_finite(out, "conv2d output"), ctx


def conv2d_backward(x: Array, w: Array, spec: ConvSpec, grad_out: Array,
                    need_grad_x: bool = True, ctx: Optional[tuple] = None,
                    need_grad_bias: bool = True
                    ) -> tuple[Optional[Array], Array, Optional[Array]]:
    """Exact reverse-mode gradients of conv2d_forward.

    Returns (grad_x, grad_w, grad_bias); grad_x is None when need_grad_x is
    False (first layers never propagate into the data), grad_bias is None
    when not requested. Pass the forward's ctx to reuse its derived buffers.
    """
    spec.check(x, w)
    require_tensor4(grad_out, "grad_out")
    n, c_in, h, wid = x.shape
    k, s = spec.kernel, spec.stride
    h_out, w_out = spec.out_hw(h, wid)
    if grad_out.shape != (n, spec.c_out, h_out, w_out):
        raise ShapeError(
            f"grad_out shape {grad_out.shape}, expected {(n, spec.c_out, h_out, w_out)}")

    grad_bias = grad_out.sum(axis=(0, 2, 3)) if need_grad_bias else None

    if k == 1 and spec.padding == 0:
        grad_x, grad_w = _pointwise_backward(x, w, spec, grad_out, need_grad_x)
    elif spec.depthwise:
        xp = ctx[1] if ctx else _pad(x, spec.padding)
        grad_x, grad_w = _depthwise_backward(xp, w, spec, grad_out, h, wid, need_grad_x)
    else:
        cols = ctx[1] if ctx else _im2col(_pad(x, spec.padding), k, s,
                                          h_out, w_out, spec.groups)
        grad_x, grad_w = _grouped_backward(cols, x, w, spec, grad_out, need_grad_x)

    if need_grad_x:
        assert_finite(grad_x, "conv2d grad_x")
    assert_finite(grad_w, "conv2d grad_w")
    return grad_x, grad_w, grad_bias


def finite_diff_grad(f: Callable[[Array], float], x: Array, step: float = 1e-3) -> Array:
    """Central-difference gradient of a scalar function, one coordinate at a
    time: (f(x + d e) - f(x - d e)) / 2d. Use float64 inputs."""
    if step <= 0:
        raise ValueError("step must be positive")
    x = np.array(x, dtype=np.float64)
    grad = np.zeros_like(x)
    flat, gflat = x.reshape(-1), grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + step
        fp = float(f(x))
        flat[i] = orig - step
        fm = float(f(x))
        flat[i] = orig
        if not (np.isfinite(fp) and np.isfinite(fm)):
            raise NonFiniteError(f"non-finite evaluation at coordinate {i}")
        gflat[i] = (fp - fm) / (2.0 * step)
    return grad


# internal helpers -----------------------------------------------------------

def _pad(x: Array, p: int) -> Array:
    if p == 0:
        return x
    n, c, h, w = x.shape
    if _kernels.HAVE_NUMBA and x.flags.c_contiguous:
        xp = np.empty((n, c, h + 2 * p, w + 2 * p), dtype=x.dtype)
        _kernels.pad2d(xp, x, p)
        return xp
    xp = np.zeros((n, c, h + 2 * p, w + 2 * p), dtype=x.dtype)
    xp[:, :, p:p + h, p:p + w] = x
    return xp


def _crop(xp: Array, p: int, h: int, w: int) -> Array:
    if p == 0:
        return xp
    if _kernels.HAVE_NUMBA and xp.flags.c_contiguous:
        x = np.empty((xp.shape[0], xp.shape[1], h, w), dtype=xp.dtype)
        _kernels.crop2d(xp, x, p)
        return x
    return np.ascontiguousarray(xp[:, :, p:p + h, p:p + w])


def _windows(xp: Array, k: int, stride: int) -> Array:
    """Strided view of all kxk patches: (n, c, h_out, w_out, k, k)."""
    win = np.lib.stride_tricks.sliding_window_view(xp, (k, k), axis=(2, 3))
    return win[:, :, ::stride, ::stride]


def _im2col(xp: Array, k: int, stride: int, h_out: int, w_out: int, groups: int) -> Array:
    """Patch matrix per group, patches along columns: (g, cpg*k*k, n*ho*wo)."""
    n, c, _, _ = xp.shape
    cpg = c // groups
    if _kernels.HAVE_NUMBA and xp.flags.c_contiguous:
        cols = np.empty((groups, cpg * k * k, n * h_out * w_out), dtype=xp.dtype)
        _kernels.im2col_t(xp, cols, k, stride, h_out, w_out, groups)
        return cols
    win = _windows(xp, k, stride)                       # (n, c, h_out, w_out, k, k)
    win = win.reshape(n, groups, cpg, h_out, w_out, k, k)
    cols = np.ascontiguousarray(win.transpose(1, 2, 5, 6, 0, 3, 4))
    return cols.reshape(groups, cpg * k * k, n * h_out * w_out)


def _depthwise_forward(xp: Array, w: Array, s: int, h_out: int, w_out: int) -> Array:
    n, c = xp.shape[:2]
    k = w.shape[2]
    wk = np.ascontiguousarray(w.reshape(c, k, k))
    out = np.empty((n, c, h_out, w_out), dtype=xp.dtype)
    if _kernels.HAVE_NUMBA:
        if k == 3:
            _kernels.dw_forward_k3(xp, wk, s, out)
        else:
            _kernels.dw_forward_any(xp, wk, s, out)
        return out
    out[:] = 0
    tmp = np.empty_like(out)
    for u in range(k):
        for v in range(k):
            sl = xp[:, :, u:u + s * (h_out - 1) + 1:s, v:v + s * (w_out - 1) + 1:s]
            np.multiply(sl, wk[:, u, v][None, :, None, None], out=tmp)
            out += tmp
    return out


def _depthwise_grad_x(w: Array, spec: ConvSpec, grad_out: Array,
                      h: int, wid: int) -> Array:
    """Input gradient as a stride-1 stencil: scatter(go, w) == correlate of the
    zero-embedded, s-dilated go with the flipped kernel."""
    n, c = grad_out.shape[:2]
    k, s, p = spec.kernel, spec.stride, spec.padding
    hp, wp = h + 2 * p, wid + 2 * p
    buf = np.empty((n, c, hp + k - 1, wp + k - 1), dtype=grad_out.dtype)
    _kernels.fill_dilated(buf, grad_out, k - 1, s)
    wf = np.ascontiguousarray(w.reshape(c, k, k)[:, ::-1, ::-1])
    grad_x = np.empty((n, c, h, wid), dtype=grad_out.dtype)
    view = buf[:, :, p:, p:]
    if k == 3:
        _kernels.dw_forward_k3(view, wf, 1, grad_x)
    else:
        _kernels.dw_forward_any(view, wf, 1, grad_x)
    return grad_x


def _depthwise_backward(xp: Array, w: Array, spec: ConvSpec, grad_out: Array,
                        h: int, wid: int, need_grad_x: bool):
    n, c = xp.shape[:2]
    k, s, p = spec.kernel, spec.stride, spec.padding
    h_out, w_out = grad_out.shape[2:]
    wk = np.ascontiguousarray(w.reshape(c, k, k))
    if _kernels.HAVE_NUMBA:
        go = np.ascontiguousarray(grad_out)
        gw3 = np.empty_like(wk)
        if k == 3:
            _kernels.dw_grad_w_k3(xp, go, s, gw3)
        else:
            _kernels.dw_grad_w_any(xp, go, s, gw3)
        grad_w = gw3.reshape(w.shape)
        grad_x = _depthwise_grad_x(w, spec, go, h, wid) if need_grad_x else None
        return grad_x, grad_w
    grad_w = np.zeros_like(w)
    grad_xp = np.zeros_like(xp) if need_grad_x else None
    tmp = np.empty_like(grad_out)
    for u in range(k):
        for v in range(k):
            rows = slice(u, u + s * (h_out - 1) + 1, s)
            cols_ = slice(v, v + s * (w_out - 1) + 1, s)
            np.multiply(grad_out, xp[:, :, rows, cols_], out=tmp)
            grad_w[:, 0, u, v] = tmp.sum(axis=(0, 2, 3))
            if need_grad_x:
                np.multiply(grad_out, wk[:, u, v][None, :, None, None], out=tmp)
                grad_xp[:, :, rows, cols_] += tmp
    grad_x = _crop(grad_xp, p, h, wid) if need_grad_x else None
    return grad_x, grad_w


def _grouped_forward(cols: Array, w: Array, spec: ConvSpec, n: int,
                     h_out: int, w_out: int) -> Array:
    g = spec.groups
    cpg, cpg_out = spec.c_in // g, spec.c_out // g
    k = spec.kernel
    wmat = w.reshape(g, cpg_out, cpg * k * k)
    prod = np.matmul(wmat, cols)                        # (g, cpg_out, nhw)
    if _kernels.HAVE_NUMBA:
        out = np.empty((n, spec.c_out, h_out, w_out), dtype=cols.dtype)
        _kernels.rows_t_to_nchw(prod, out, g)
        return out
    return np.ascontiguousarray(
        prod.reshape(g, cpg_out, n, h_out * w_out).transpose(2, 0, 1, 3)
    ).reshape(n, spec.c_out, h_out, w_out)


def _grouped_backward(cols: Array, x: Array, w: Array, spec: ConvSpec,
                      grad_out: Array, need_grad_x: bool):
    n, c_in, h, wid = x.shape
    k, s, g, p = spec.kernel, spec.stride, spec.groups, spec.padding
    cpg, cpg_out = c_in // g, spec.c_out // g
    h_out, w_out = grad_out.shape[2:]
    if _kernels.HAVE_NUMBA and grad_out.flags.c_contiguous:
        go_g = np.empty((g, cpg_out, n * h_out * w_out), dtype=grad_out.dtype)
        _kernels.nchw_to_rows_t(grad_out, go_g, g)
    else:
        go_g = np.ascontiguousarray(
            grad_out.reshape(n, g, cpg_out, h_out * w_out).transpose(1, 2, 0, 3)
        ).reshape(g, cpg_out, n * h_out * w_out)
    # BLAS consumes the transposed views without copies
    grad_w = np.matmul(go_g, cols.transpose(0, 2, 1)).reshape(spec.c_out, cpg, k, k)
    if not need_grad_x:
        return None, grad_w
    wmat = w.reshape(g, cpg_out, cpg * k * k)
    gcols = np.matmul(wmat.transpose(0, 2, 1), go_g)    # (g, cpg*k*k, nhw)
    grad_xp = np.zeros((n, c_in, h + 2 * p, wid + 2 * p), dtype=x.dtype)
    if _kernels.HAVE_NUMBA:
        _kernels.col2im_t_add(gcols, grad_xp, k, s, h_out, w_out, g)
        return _crop(grad_xp, p, h, wid), grad_w
    gc = np.ascontiguousarray(
        gcols.reshape(g, cpg, k, k, n, h_out, w_out).transpose(4, 0, 1, 5, 6, 2, 3)
    ).reshape(n, c_in, h_out, w_out, k, k)
    for u in range(k):
        for v in range(k):
            grad_xp[:, :, u:u + s * (h_out - 1) + 1:s,
                    v:v + s * (w_out - 1) + 1:s] += gc[..., u, v]
    return _crop(grad_xp, p, h, wid), grad_w


def _pointwise_forward(x: Array, w: Array, spec: ConvSpec, h_out: int, w_out: int) -> Array:
    n = x.shape[0]
    s, g = spec.stride, spec.groups
    xs = np.ascontiguousarray(x[:, :, ::s, ::s]) if s > 1 else x
    if g == 1:
        w2 = w.reshape(spec.c_out, spec.c_in)
        out = np.matmul(w2, xs.reshape(n, spec.c_in, h_out * w_out))
    else:
        cpg, cpg_out = spec.c_in // g, spec.c_out // g
        x4 = xs.reshape(n, g, cpg, h_out * w_out)
        wg = w.reshape(g, cpg_out, cpg)
        out = np.matmul(wg[None], x4).reshape(n, spec.c_out, h_out * w_out)
    return out.reshape(n, spec.c_out, h_out, w_out)


def _pointwise_backward(x: Array, w: Array, spec: ConvSpec, grad_out: Array,
                        need_grad_x: bool) -> tuple[Optional[Array], Array]:
    n, c_in, h, wid = x.shape
    s, g = spec.stride, spec.groups
    h_out, w_out = grad_out.shape[2:]
    xs = np.ascontiguousarray(x[:, :, ::s, ::s]) if s > 1 else x
    go3 = grad_out.reshape(n, spec.c_out, h_out * w_out)
    if g == 1:
        x3 = xs.reshape(n, c_in, h_out * w_out)
        # one big GEMM beats n batched small ones: (c_out, n*hw) @ (n*hw, c_in)
        go2 = np.ascontiguousarray(go3.transpose(1, 0, 2)).reshape(spec.c_out, -1)
        x2 = np.ascontiguousarray(x3.transpose(1, 0, 2)).reshape(c_in, -1)
        grad_w = np.matmul(go2, x2.T).reshape(w.shape)
        gxs = np.matmul(w.reshape(spec.c_out, c_in).T, go3) if need_grad_x else None
    else:
        cpg, cpg_out = c_in // g, spec.c_out // g
        x4 = xs.reshape(n, g, cpg, h_out * w_out)
        go4 = go3.reshape(n, g, cpg_out, h_out * w_out)
        grad_w = np.matmul(go4, x4.transpose(0, 1, 3, 2)).sum(axis=0).reshape(w.shape)
        wg = w.reshape(g, cpg_out, cpg)
        gxs = (np.matmul(wg.transpose(0, 2, 1)[None], go4).reshape(n, c_in, h_out * w_out)
               if need_grad_x else None)
    if not need_grad_x:
        return None, grad_w
    if s == 1:
        return gxs.reshape(n, c_in, h, wid), grad_w
    grad_x = np.zeros_like(x)
    grad_x[:, :, ::s, ::s] = gxs.reshape(n, c_in, h_out, w_out)
    return grad_x, grad_w
