"""Layer forward and backward passes.

Every backward takes the gradient of a scalar objective with respect to
the layer's output and returns exact analytic gradients with respect to
its input and parameters.

Transposed convolution is implemented as the adjoint of convolution and
shares its three kernels.  With w stored as (out_ch, in_ch, kh, kw) in
the layer's own orientation and wc = w with the first two axes swapped:

    deconv forward(x)   = conv input-gradient of x under wc, plus bias
    deconv d_input      = conv forward of d_out under wc, bias 0
    deconv d_weights    = conv weight-gradient with activation/gradient
                          roles swapped, axes swapped back

so the adjoint identity <Conv(x), y> == <x, ConvT(y)> holds by
construction, not by parallel code paths.
"""

from dataclasses import dataclass
from typing import Optional, Tuple

import numpy as np

from . import backend
from .errors import DataError, DomainError, ShapeError
from .tensor import Tensor, _wrap


@dataclass(frozen=True)
class ConvParams:
    """Convolution parameters: weights (out_ch, in_ch, kh, kw), bias (out_ch,)."""

    weights: Tensor
    bias: np.ndarray
    stride: int = 1
    padding: int = 0

    def __post_init__(self):
        out_ch, _, kh, kw = self.weights.data.shape
        if kh < 1 or kw < 1:
            raise ShapeError(f"kernel dims must be >= 1, got {kh}x{kw}")
        if self.stride < 1:
            raise DomainError(f"stride must be >= 1, got {self.stride}")
        if self.padding < 0:
            raise DomainError(f"padding must be >= 0, got {self.padding}")
        if self.bias.shape != (out_ch,):
            raise ShapeError(f"bias shape {self.bias.shape} != ({out_ch},)")
        if self.bias.dtype != self.weights.data.dtype:
            raise DataError(f"bias dtype {self.bias.dtype} != weights {self.weights.data.dtype}")


@dataclass
class LayerGrads:
    d_input: Tensor
    d_weights: Tensor
    d_bias: np.ndarray


def _conv_out_hw(H, W, kh, kw, stride, pad) -> Tuple[int, int]:
    num_h = H + 2 * pad - kh
    num_w = W + 2 * pad - kw
    if num_h < 0 or num_w < 0 or num_h % stride or num_w % stride:
        raise ShapeError(
            f"conv geometry invalid: input {H}x{W}, kernel {kh}x{kw}, "
            f"stride {stride}, pad {pad}")
    return num_h // stride + 1, num_w // stride + 1


def _check_dtype(x: Tensor, p: ConvParams):
    if x.data.dtype != p.weights.data.dtype:
        raise DataError(f"input dtype {x.dtype} != weights dtype {p.weights.data.dtype}")


def conv2d_forward(x: Tensor, p: ConvParams) -> Tensor:
    B, C, H, W = x.data.shape
    out_ch, in_ch, kh, kw = p.weights.data.shape
    if C != in_ch:
        raise ShapeError(f"input has {C} channels, weights expect {in_ch}")
    _check_dtype(x, p)
    _conv_out_hw(H, W, kh, kw, p.stride, p.padding)
    y = backend.impl().conv2d_forward(
        x.data, p.weights.data, p.bias, p.stride, p.padding, p.padding)
    return _wrap(y)


def conv2d_backward(x: Tensor, p: ConvParams, d_out: Tensor) -> LayerGrads:
    B, C, H, W = x.data.shape
    out_ch, in_ch, kh, kw = p.weights.data.shape
    if C != in_ch:
        raise ShapeError(f"input has {C} channels, weights expect {in_ch}")
    oh, ow = _conv_out_hw(H, W, kh, kw, p.stride, p.padding)
    if d_out.data.shape != (B, out_ch, oh, ow):
        raise ShapeError(f"d_out shape {tuple(d_out.data.shape)} != {(B, out_ch, oh, ow)}")
    impl = backend.impl()
    dx = impl.conv2d_input_grad(d_out.data, p.weights.data, p.stride,
                                p.padding, p.padding, H, W)
    dw = impl.conv2d_weight_grad(x.data, d_out.data, p.stride,
                                 p.padding, p.padding, kh, kw)
    db = d_out.data.sum(axis=(0, 2, 3))
    return LayerGrads(_wrap(dx), _wrap(dw), db)


def _swap01(w: np.ndarray) -> np.ndarray:
    return np.ascontiguousarray(w.transpose(1, 0, 2, 3))


def _deconv_out_hw(h, w_, kh, kw, stride, pad) -> Tuple[int, int]:
    oh = (h - 1) * stride - 2 * pad + kh
    ow = (w_ - 1) * stride - 2 * pad + kw
    if oh < 1 or ow < 1:
        raise ShapeError(
            f"deconv geometry invalid: input {h}x{w_}, kernel {kh}x{kw}, "
            f"stride {stride}, pad {pad}")
    return oh, ow


def convtranspose2d_forward(x: Tensor, p: ConvParams) -> Tensor:
    B, C, h, w_ = x.data.shape
    out_ch, in_ch, kh, kw = p.weights.data.shape
    if C != in_ch:
        raise ShapeError(f"input has {C} channels, weights expect {in_ch}")
    _check_dtype(x, p)
    oh, ow = _deconv_out_hw(h, w_, kh, kw, p.stride, p.padding)
    wc = _swap01(p.weights.data)
    y = backend.impl().conv2d_input_grad(x.data, wc, p.stride,
                                         p.padding, p.padding, oh, ow)
    y += p.bias.reshape(1, out_ch, 1, 1)
    return _wrap(y)


def convtranspose2d_backward(x: Tensor, p: ConvParams, d_out: Tensor) -> LayerGrads:
    B, C, h, w_ = x.data.shape
    out_ch, in_ch, kh, kw = p.weights.data.shape
    if C != in_ch:
        raise ShapeError(f"input has {C} channels, weights expect {in_ch}")
    oh, ow = _deconv_out_hw(h, w_, kh, kw, p.stride, p.padding)
    if d_out.data.shape != (B, out_ch, oh, ow):
        raise ShapeError(f"d_out shape {tuple(d_out.data.shape)} != {(B, out_ch, oh, ow)}")
    impl = backend.impl()
    wc = _swap01(p.weights.data)
    zero_bias = np.zeros(in_ch, x.data.dtype)
    dx = impl.conv2d_forward(d_out.data, wc, zero_bias, p.stride, p.padding, p.padding)
    # weight grad of the adjoint: d_out plays the conv input, x the output grad
    dwc = impl.conv2d_weight_grad(d_out.data, x.data, p.stride,
                                  p.padding, p.padding, kh, kw)
    db = d_out.data.sum(axis=(0, 2, 3))
    return LayerGrads(_wrap(dx), _wrap(_swap01(dwc)), db)


def maxpool2x2_forward(x: Tensor) -> Tuple[Tensor, np.ndarray]:
    B, C, H, W = x.data.shape
    if H % 2 or W % 2:
        raise ShapeError(f"maxpool2x2 needs even H and W, got {H}x{W}")
    y, mask = backend.impl().maxpool2x2_forward(x.data)
    return _wrap(y), mask


def maxpool2x2_backward(mask: np.ndarray, d_out: Tensor) -> Tensor:
    if mask.shape != d_out.data.shape:
        raise ShapeError(f"mask shape {mask.shape} != d_out shape {tuple(d_out.data.shape)}")
    return _wrap(backend.impl().maxpool2x2_backward(mask, d_out.data))


def dropout(x: Tensor, rate: float, rng: Optional[np.random.Generator],
            training: bool) -> Tuple[Tensor, Optional[np.ndarray]]:
    """Inverted dropout: kept elements scale by 1/(1-rate); inference is identity."""
    if not 0.0 <= rate < 1.0:
        raise DomainError(f"dropout rate must be in [0, 1), got {rate}")
    if not training or rate == 0.0:
        return x, None
    if rng is None:
        raise DomainError("training dropout with rate > 0 needs an rng")
    u = rng.random(x.data.shape, dtype=x.data.dtype)
    keep = u >= rate
    scale = x.data.dtype.type(1.0 / (1.0 - rate))
    return _wrap(x.data * keep * scale), keep


def dropout_backward(d_out: Tensor, keep_mask: Optional[np.ndarray], rate: float) -> Tensor:
    if keep_mask is None:
        return d_out
    if keep_mask.shape != d_out.data.shape:
        raise ShapeError(f"mask shape {keep_mask.shape} != d_out {tuple(d_out.data.shape)}")
    scale = d_out.data.dtype.type(1.0 / (1.0 - rate))
    return _wrap(d_out.data * keep_mask * scale)


def zeropad_rows(x: Tensor, top: int, bottom: int) -> Tensor:
    if top < 0 or bottom < 0:
        raise DomainError(f"pad amounts must be >= 0, got ({top}, {bottom})")
    if top == 0 and bottom == 0:
        return x
    B, C, H, W = x.data.shape
    y = np.zeros((B, C, H + top + bottom, W), x.data.dtype)
    y[:, :, top:top + H] = x.data
    return _wrap(y)


def crop_rows(x: Tensor, top: int, bottom: int) -> Tensor:
    if top < 0 or bottom < 0:
        raise DomainError(f"crop amounts must be >= 0, got ({top}, {bottom})")
    if top == 0 and bottom == 0:
        return x
    B, C, H, W = x.data.shape
    if H - top - bottom < 1:
        raise ShapeError(f"cannot crop {top}+{bottom} rows from height {H}")
    return _wrap(x.data[:, :, top:H - bottom].copy())


def relu_forward(x: Tensor) -> Tensor:
    return _wrap(np.maximum(x.data, x.data.dtype.type(0)))


def relu_backward(x: Tensor, d_out: Tensor) -> Tensor:
    if x.data.shape != d_out.data.shape:
        raise ShapeError(f"shape mismatch: {x.shape} vs {d_out.shape}")
    # subgradient at 0 is 0: strict > keeps it that way
    return _wrap(d_out.data * (x.data > 0))


def _flush_subnormals(a: np.ndarray) -> np.ndarray:
    # x86 handles subnormal operands in microcode, ~100x slower per op.  Once
    # the output saturates, subnormal sigmoid values would cascade that
    # penalty through every conv in the backward pass, so flush to zero here
    # (same effect as the FTZ/DAZ mode CPU frameworks run with).
    a[np.abs(a) < np.finfo(a.dtype).tiny] = a.dtype.type(0)
    return a


def flush_negligible(d: Tensor) -> Tensor:
    """Zero gradient entries too small to survive accumulation.

    A saturated output turns most of the loss gradient into a carpet of
    values ~20 orders below the useful signal.  They are absorbed without a
    trace when summed against that signal (anything under max * eps/2 cannot
    move a single add), but keep spawning subnormal products in every conv
    backward, each one served by microcode.  Thresholding on the tensor's own
    scale leaves an all-small gradient alone.
    """
    a = d.data
    fi = np.finfo(a.dtype)
    cut = np.max(np.abs(a)) * (fi.eps * a.dtype.type(0.5))
    if cut == 0 or not np.isfinite(cut):
        return d
    out = np.where(np.abs(a) < cut, a.dtype.type(0), a)
    return _wrap(out)


def sigmoid_forward(x: Tensor) -> Tensor:
    t = np.exp(-np.abs(x.data))
    y = np.where(x.data >= 0, 1.0 / (1.0 + t), t / (1.0 + t))
    return _wrap(_flush_subnormals(y.astype(x.data.dtype, copy=False)))


def sigmoid_backward(y: Tensor, d_out: Tensor) -> Tensor:
    """Gradient through sigmoid given its forward output y."""
    if y.data.shape != d_out.data.shape:
        raise ShapeError(f"shape mismatch: {y.shape} vs {d_out.shape}")
    one = y.data.dtype.type(1)
    return _wrap(_flush_subnormals(d_out.data * y.data * (one - y.data)))
