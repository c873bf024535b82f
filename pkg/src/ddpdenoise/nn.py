"""Layer kernels: conv2d, conv_transpose2d, maxpool2d, bilinear upsampling,
batch norm and L1 loss, each with its backward rule.

Under :func:`autocast` the two convolution kernels run on binary16-rounded
inputs, weights and bias with float32 accumulation, and round their outputs
(and the gradients they produce) to binary16. Everything else stays F32.
"""
from __future__ import annotations

import contextlib
import threading
from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import ConfigError, DomainError, SizeError
from .tensor import DType, Tensor, _finish, cast, result

_amp = threading.local()


def autocast_enabled() -> bool:
    return getattr(_amp, "enabled", False)


@contextlib.contextmanager
def autocast(enabled: bool = True):
    prev = autocast_enabled()
    _amp.enabled = enabled
    try:
        yield
    finally:
        _amp.enabled = prev


def _amp_wrap(kernel, x: Tensor, weight: Tensor, bias: Tensor | None, *args) -> Tensor:
    if not autocast_enabled() or x.dtype is not DType.F32:
        return kernel(x, weight, bias, *args)
    xh, wh = cast(x, DType.F16E), cast(weight, DType.F16E)
    bh = cast(bias, DType.F16E) if bias is not None else None
    return cast(kernel(xh, wh, bh, *args), DType.F32)


# -- convolution ---------------------------------------------------------------

def _im2col(x: np.ndarray, k: int, stride: int, padding: int) -> tuple[np.ndarray, int, int]:
    if padding:
        x = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    win = sliding_window_view(x, (k, k), axis=(2, 3))[:, :, ::stride, ::stride]
    n, c, ho, wo = win.shape[:4]
    cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(n * ho * wo, c * k * k)
    return cols, ho, wo


def _col2im(cols: np.ndarray, shape, k: int, stride: int, padding: int, ho: int, wo: int):
    n, c, h, w = shape
    out = np.zeros((n, c, h + 2 * padding, w + 2 * padding), dtype=cols.dtype)
    cols = cols.reshape(n, ho, wo, c, k, k).transpose(0, 3, 4, 5, 1, 2)
    for i in range(k):
        for j in range(k):
            out[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride] += cols[:, :, i, j]
    if padding:
        out = out[:, :, padding:-padding, padding:-padding]
    return out


def _conv2d_kernel(x: Tensor, weight: Tensor, bias: Tensor | None, stride: int, padding: int):
    if x.data.ndim != 4 or weight.data.ndim != 4:
        raise SizeError("conv2d expects x[N,C,H,W] and weight[Cout,Cin,K,K]")
    cout, cin, kh, kw = weight.shape
    if kh != kw:
        raise ConfigError("only square kernels are supported")
    if x.shape[1] != cin:
        raise SizeError(f"conv2d: input has {x.shape[1]} channels, weight expects {cin}")
    if x.shape[2] + 2 * padding < kh or x.shape[3] + 2 * padding < kw:
        raise SizeError("conv2d: kernel larger than padded input")
    dtype = x.dtype
    n = x.shape[0]
    cols, ho, wo = _im2col(x.data, kh, stride, padding)
    wmat = weight.data.reshape(cout, -1)
    out = cols @ wmat.T
    if bias is not None:
        out = out + bias.data
    out = out.reshape(n, ho, wo, cout).transpose(0, 3, 1, 2)
    xshape = x.shape

    def backward(g):
        gmat = np.ascontiguousarray(g.transpose(0, 2, 3, 1)).reshape(-1, cout).astype(cols.dtype)
        # weight and bias gradients reduce over every output position; sum those in float64
        gw = (gmat.T.astype(np.float64) @ cols.astype(np.float64)).reshape(weight.shape)
        if stride == 1 and padding <= kh - 1:
            # input gradient = full correlation with the flipped kernel
            wflip = weight.data[:, :, ::-1, ::-1].transpose(1, 0, 2, 3).reshape(cin, -1)
            gcols, _, _ = _im2col(g.astype(cols.dtype), kh, 1, kh - 1 - padding)
            gx = (gcols @ wflip.T).reshape(n, xshape[2], xshape[3], cin).transpose(0, 3, 1, 2)
        else:
            gx = _col2im(gmat @ wmat, xshape, kh, stride, padding, ho, wo)
        gb = gmat.sum(axis=0, dtype=np.float64).astype(cols.dtype) if bias is not None else None
        return (_finish(gx, dtype), _finish(gw.astype(cols.dtype), dtype),
                _finish(gb, dtype) if gb is not None else None)

    parents = (x, weight) + ((bias,) if bias is not None else (None,))
    return _result3(_finish(out, dtype), dtype, parents, "conv2d", backward)


def _result3(data, dtype, parents, op, backward):
    # bias may be absent; drop the placeholder before recording parents
    if parents[-1] is None:
        parents = parents[:-1]
        return result(data, dtype, parents, op, lambda g: backward(g)[:2])
    return result(data, dtype, parents, op, backward)


def conv2d(x: Tensor, weight: Tensor, bias: Tensor | None = None,
           stride: int = 1, padding: int = 0) -> Tensor:
    """2-d cross-correlation with zero padding."""
    return _amp_wrap(_conv2d_kernel, x, weight, bias, stride, padding)


def _conv_t_kernel(x: Tensor, weight: Tensor, bias: Tensor | None, stride: int, padding: int):
    if stride != 2 or padding != 0 or weight.shape[2:] != (2, 2):
        raise ConfigError("conv_transpose2d supports kernel 2, stride 2, padding 0 only")
    if x.data.ndim != 4 or x.shape[1] != weight.shape[0]:
        raise SizeError(f"conv_transpose2d: input {x.shape} vs weight {weight.shape}")
    dtype = x.dtype
    n, cin, h, w = x.shape
    cout = weight.shape[1]
    xmat = x.data.transpose(0, 2, 3, 1).reshape(-1, cin)
    wmat = weight.data.reshape(cin, cout * 4)
    out = (xmat @ wmat).reshape(n, h, w, cout, 2, 2)
    out = out.transpose(0, 3, 1, 4, 2, 5).reshape(n, cout, 2 * h, 2 * w)
    if bias is not None:
        out = out + bias.data[None, :, None, None]

    def backward(g):
        gmat = g.reshape(n, cout, h, 2, w, 2).transpose(0, 2, 4, 1, 3, 5).reshape(-1, cout * 4)
        gmat = gmat.astype(xmat.dtype)
        gx = (gmat @ wmat.T).reshape(n, h, w, cin).transpose(0, 3, 1, 2)
        gw = (xmat.T.astype(np.float64) @ gmat).astype(xmat.dtype).reshape(weight.shape)
        gb = g.sum(axis=(0, 2, 3), dtype=np.float64).astype(xmat.dtype) if bias is not None else None
        return (_finish(gx, dtype), _finish(gw, dtype),
                _finish(gb, dtype) if gb is not None else None)

    parents = (x, weight) + ((bias,) if bias is not None else (None,))
    return _result3(_finish(out, dtype), dtype, parents, "conv_transpose2d", backward)


def conv_transpose2d(x: Tensor, weight: Tensor, bias: Tensor | None = None,
                     stride: int = 2, padding: int = 0) -> Tensor:
    """Transposed convolution; ``weight`` is [Cin, Cout, 2, 2].

    This is the adjoint of ``conv2d(., weight, stride=2)``, so the output
    extent doubles.
    """
    return _amp_wrap(_conv_t_kernel, x, weight, bias, stride, padding)


# -- pooling and resampling ------------------------------------------------------

def maxpool2d(x: Tensor, window: int = 2) -> Tensor:
    if window != 2:
        raise ConfigError("maxpool2d supports a 2x2 window only")
    n, c, h, w = x.shape
    if h % 2 or w % 2:
        raise SizeError(f"maxpool2d needs even extents, got {h}x{w}")
    win = x.data.reshape(n, c, h // 2, 2, w // 2, 2).transpose(0, 1, 2, 4, 3, 5)
    win = win.reshape(n, c, h // 2, w // 2, 4)
    arg = win.argmax(axis=-1)  # first max in row-major window order
    out = np.take_along_axis(win, arg[..., None], axis=-1)[..., 0]

    def backward(g):
        onehot = np.zeros(win.shape, dtype=g.dtype)
        np.put_along_axis(onehot, arg[..., None], g[..., None], axis=-1)
        gx = onehot.reshape(n, c, h // 2, w // 2, 2, 2).transpose(0, 1, 2, 4, 3, 5)
        return (gx.reshape(n, c, h, w),)

    return result(out, x.dtype, (x,), "maxpool2d", backward)


def interp_matrix(n_in: int, n_out: int, dtype=np.float64) -> np.ndarray:
    """Row i holds the bilinear weights for output sample i.

    Half-pixel centers: output i samples input coordinate
    (i + 0.5) * n_in / n_out - 0.5, clamped to [0, n_in - 1].
    """
    m = np.zeros((n_out, n_in), dtype=np.float64)
    ratio = n_in / n_out
    for i in range(n_out):
        src = min(max((i + 0.5) * ratio - 0.5, 0.0), n_in - 1.0)
        lo = int(np.floor(src))
        hi = min(lo + 1, n_in - 1)
        frac = src - lo
        m[i, lo] += 1.0 - frac
        m[i, hi] += frac
    return m.astype(dtype)


def resample2d(x: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Bilinear resampling of the last two axes (no autograd)."""
    mh = interp_matrix(x.shape[-2], out_h, x.dtype)
    mw = interp_matrix(x.shape[-1], out_w, x.dtype)
    return mh @ x @ mw.T


def bilinear_upsample2d(x: Tensor, factor: int = 2) -> Tensor:
    if factor != 2:
        raise ConfigError("bilinear_upsample2d supports factor 2 only")
    if x.data.ndim != 4:
        raise SizeError("bilinear_upsample2d expects [N,C,H,W]")
    h, w = x.shape[2:]
    mh = interp_matrix(h, 2 * h, x.data.dtype)
    mw = interp_matrix(w, 2 * w, x.data.dtype)
    out = mh @ x.data @ mw.T

    def backward(g):
        return (mh.T @ g @ mw,)

    return result(out, x.dtype, (x,), "upsample2d", backward)


# -- normalization ---------------------------------------------------------------

@dataclass
class BatchNormState:
    gamma: Tensor
    beta: Tensor
    running_mean: Tensor
    running_var: Tensor
    momentum: float = 0.1
    eps: float = 1e-5
    mode: str = "train"


def batchnorm2d(x: Tensor, s: BatchNormState) -> Tensor:
    """Per-channel batch norm.

    Train mode normalizes with the biased batch variance and moves the
    running statistics by ``momentum`` (the running variance also tracks the
    biased estimate). Eval mode only reads the running statistics.
    """
    n, c, h, w = x.shape
    if s.gamma.shape != (c,):
        raise SizeError(f"batchnorm2d: {c} channels but gamma has shape {s.gamma.shape}")
    dt = x.data.dtype
    gamma = s.gamma.data.reshape(1, c, 1, 1)
    beta = s.beta.data.reshape(1, c, 1, 1)
    eps = dt.type(s.eps)
    if s.mode == "train":
        count = n * h * w
        if count < 2:
            raise DomainError("batchnorm2d in train mode needs more than one value per channel")
        mean = x.data.mean(axis=(0, 2, 3), keepdims=True)
        centered = x.data - mean
        var = (centered * centered).mean(axis=(0, 2, 3), keepdims=True)
        inv = 1.0 / np.sqrt(var + eps)
        xhat = centered * inv
        mom = s.momentum
        rm, rv = s.running_mean.data, s.running_var.data
        rm[...] = (1 - mom) * rm + mom * mean.reshape(c).astype(rm.dtype)
        rv[...] = (1 - mom) * rv + mom * var.reshape(c).astype(rv.dtype)

        def backward(g):
            gxhat = g * gamma
            gx = inv * (gxhat - gxhat.mean(axis=(0, 2, 3), keepdims=True)
                        - xhat * (gxhat * xhat).mean(axis=(0, 2, 3), keepdims=True))
            return gx, (g * xhat).sum(axis=(0, 2, 3)), g.sum(axis=(0, 2, 3))
    else:
        mean = s.running_mean.data.reshape(1, c, 1, 1).astype(dt)
        var = s.running_var.data.reshape(1, c, 1, 1).astype(dt)
        inv = 1.0 / np.sqrt(var + eps)
        xhat = (x.data - mean) * inv

        def backward(g):
            return g * gamma * inv, (g * xhat).sum(axis=(0, 2, 3)), g.sum(axis=(0, 2, 3))

    out = xhat * gamma + beta
    return result(out, x.dtype, (x, s.gamma, s.beta), "batchnorm2d", backward)


# -- loss ------------------------------------------------------------------------

def l1_loss(pred: Tensor, target: Tensor) -> Tensor:
    """Mean absolute error; the subgradient at a tie is 0."""
    if pred.shape != target.shape:
        raise SizeError(f"l1_loss: {pred.shape} vs {target.shape}")
    if pred.size == 0:
        raise DomainError("l1_loss of empty tensors")
    acc = pred.dtype.accum
    diff = pred.data.astype(acc) - target.data.astype(acc)
    n = diff.size
    value = np.asarray(np.abs(diff).mean(dtype=acc), dtype=acc)
    out_dtype = DType.F64 if acc is np.float64 else DType.F32

    def backward(g):
        s = np.sign(diff) * (g / acc(n))
        return s, -s

    return result(value, out_dtype, (pred, target), "l1_loss", backward)
