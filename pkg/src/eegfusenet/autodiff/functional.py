"""Layer primitives on top of :class:`Tensor`: convolutions, batch norm, pooling."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from ..errors import ContractError, DimensionError
from .tensor import Tensor

BN_EPS = 1e-5
BN_MOMENTUM = 0.1
ELU_ALPHA = 1.0


def _pair(v) -> tuple[int, int]:
    if isinstance(v, (tuple, list)):
        return int(v[0]), int(v[1])
    return int(v), int(v)


def _mix(xs: np.ndarray, k: np.ndarray) -> np.ndarray:
    """Grouped channel mixing: xs [N,G,cg,H,W], k [G,og,cg] -> [N,G,og,H,W]."""
    n, g, cg, h, w = xs.shape
    og = k.shape[1]
    if g == 1:
        out = np.tensordot(k[0], xs[:, 0], axes=([1], [1]))  # [og, N, H, W]
        return out.transpose(1, 0, 2, 3)[:, None]
    if cg == 1:
        return xs[:, :, 0][:, :, None] * k[None, :, :, 0, None, None]
    return np.einsum("ngchw,goc->ngohw", xs, k, optimize=True)


def _mix_adjoint(dy: np.ndarray, k: np.ndarray) -> np.ndarray:
    """Adjoint of :func:`_mix` w.r.t. xs: dy [N,G,og,H,W] -> [N,G,cg,H,W]."""
    n, g, og, h, w = dy.shape
    cg = k.shape[2]
    if g == 1:
        out = np.tensordot(k[0], dy[:, 0], axes=([0], [1]))  # [cg, N, H, W]
        return out.transpose(1, 0, 2, 3)[:, None]
    if cg == 1:
        return (dy * k[None, :, :, 0, None, None]).sum(axis=2, keepdims=True)
    return np.einsum("ngohw,goc->ngchw", dy, k, optimize=True)


def _kernel_corr(dy: np.ndarray, xs: np.ndarray) -> np.ndarray:
    """Kernel-gradient contraction: dy [N,G,og,H,W], xs [N,G,cg,H,W] -> [G,og,cg]."""
    if dy.shape[1] == 1:
        return np.tensordot(dy[:, 0], xs[:, 0], axes=([0, 2, 3], [0, 2, 3]))[None]
    return np.einsum("ngohw,ngchw->goc", dy, xs, optimize=True)


def _output_extent(size: int, k: int, s: int, p: int) -> int:
    return (size + 2 * p - k) // s + 1


def _windows(xp, kh, kw, sh, sw, ho, wo):
    win = sliding_window_view(xp, (kh, kw), axis=(2, 3))
    return win[:, :, : sh * (ho - 1) + 1 : sh, : sw * (wo - 1) + 1 : sw]


def _conv_forward(x, k, stride, padding, groups):
    n, cin, h, w = x.shape
    cout, cg, kh, kw = k.shape
    sh, sw = stride
    ph, pw = padding
    ho, wo = _output_extent(h, kh, sh, ph), _output_extent(w, kw, sw, pw)
    xp = np.pad(x, ((0, 0), (0, 0), (ph, ph), (pw, pw))) if (ph or pw) else x
    if groups == 1:
        win = _windows(xp, kh, kw, sh, sw, ho, wo)  # [N, Cin, Ho, Wo, kh, kw]
        out = np.tensordot(win, k, axes=([1, 4, 5], [1, 2, 3]))  # [N, Ho, Wo, Cout]
        return np.ascontiguousarray(out.transpose(0, 3, 1, 2))
    xg = xp.reshape(n, groups, cg, xp.shape[2], xp.shape[3])
    kg = k.reshape(groups, cout // groups, cg, kh, kw)
    out = np.zeros((n, groups, cout // groups, ho, wo), dtype=np.result_type(x, k))
    for i in range(kh):
        for j in range(kw):
            xs = xg[:, :, :, i : i + sh * (ho - 1) + 1 : sh, j : j + sw * (wo - 1) + 1 : sw]
            out += _mix(xs, kg[:, :, :, i, j])
    return out.reshape(n, cout, ho, wo)


def _conv_input_grad(dy, k, x_shape, stride, padding, groups):
    n, cin, h, w = x_shape
    cout, cg, kh, kw = k.shape
    sh, sw = stride
    ph, pw = padding
    ho, wo = dy.shape[2], dy.shape[3]
    if (sh, sw) == (1, 1) and ph <= kh - 1 and pw <= kw - 1:
        # full correlation of dy with the flipped, channel-swapped kernel
        og = cout // groups
        flipped = k.reshape(groups, og, cg, kh, kw).transpose(0, 2, 1, 3, 4)[..., ::-1, ::-1]
        flipped = flipped.reshape(cin, og, kh, kw)
        dyp = np.pad(dy, ((0, 0), (0, 0), (kh - 1 - ph, kh - 1 - ph), (kw - 1 - pw, kw - 1 - pw)))
        return _conv_forward(dyp, flipped, (1, 1), (0, 0), groups)[:, :, :h, :w]
    dxp = np.zeros((n, groups, cg, h + 2 * ph, w + 2 * pw), dtype=np.result_type(dy, k))
    dyg = dy.reshape(n, groups, cout // groups, ho, wo)
    kg = k.reshape(groups, cout // groups, cg, kh, kw)
    for i in range(kh):
        for j in range(kw):
            dxp[:, :, :, i : i + sh * (ho - 1) + 1 : sh, j : j + sw * (wo - 1) + 1 : sw] += _mix_adjoint(
                dyg, kg[:, :, :, i, j]
            )
    dx = dxp[:, :, :, ph : ph + h, pw : pw + w]
    return dx.reshape(n, cin, h, w)


def _conv_kernel_grad(x, dy, k_shape, stride, padding, groups):
    n, cin, h, w = x.shape
    cout, cg, kh, kw = k_shape
    sh, sw = stride
    ph, pw = padding
    ho, wo = dy.shape[2], dy.shape[3]
    xp = np.pad(x, ((0, 0), (0, 0), (ph, ph), (pw, pw))) if (ph or pw) else x
    if groups == 1:
        win = _windows(xp, kh, kw, sh, sw, ho, wo)
        return np.tensordot(dy, win, axes=([0, 2, 3], [0, 2, 3]))
    xg = xp.reshape(n, groups, cg, xp.shape[2], xp.shape[3])
    dyg = dy.reshape(n, groups, cout // groups, ho, wo)
    dk = np.zeros((groups, cout // groups, cg, kh, kw), dtype=np.result_type(x, dy))
    for i in range(kh):
        for j in range(kw):
            xs = xg[:, :, :, i : i + sh * (ho - 1) + 1 : sh, j : j + sw * (wo - 1) + 1 : sw]
            dk[:, :, :, i, j] = _kernel_corr(dyg, xs)
    return dk.reshape(k_shape)


def _check_conv(x_shape, k_shape, stride, padding, groups, what="conv2d"):
    if len(x_shape) != 4:
        raise DimensionError(f"{what}: input must be 4-D [N,C,H,W], got rank {len(x_shape)}")
    if len(k_shape) != 4:
        raise DimensionError(f"{what}: kernel must be 4-D, got rank {len(k_shape)}")
    if groups < 1 or x_shape[1] % groups:
        raise DimensionError(f"{what}: input channels (axis 1) = {x_shape[1]} not divisible by groups={groups}")


def conv2d(x: Tensor, kernel: Tensor, stride=1, padding=0, groups: int = 1) -> Tensor:
    """2-D cross-correlation.  ``kernel`` is ``[Cout, Cin/groups, kh, kw]``."""
    stride, padding = _pair(stride), _pair(padding)
    _check_conv(x.shape, kernel.shape, stride, padding, groups)
    cin = x.shape[1]
    cout, cg, kh, kw = kernel.shape
    if cg * groups != cin:
        raise DimensionError(f"conv2d: kernel axis 1 = {cg} but input axis 1 / groups = {cin // groups}")
    if cout % groups:
        raise DimensionError(f"conv2d: kernel axis 0 = {cout} not divisible by groups={groups}")
    if x.shape[2] + 2 * padding[0] < kh or x.shape[3] + 2 * padding[1] < kw:
        raise DimensionError(
            f"conv2d: padded input extents ({x.shape[2] + 2 * padding[0]}, {x.shape[3] + 2 * padding[1]}) "
            f"smaller than kernel ({kh}, {kw}) on axes (2, 3)"
        )
    xd, kd = x.data, kernel.data
    out = _conv_forward(xd, kd, stride, padding, groups)

    def back(g):
        return (
            _conv_input_grad(g, kd, xd.shape, stride, padding, groups) if x.requires_grad else None,
            _conv_kernel_grad(xd, g, kd.shape, stride, padding, groups) if kernel.requires_grad else None,
        )

    return Tensor._from_op(out, (x, kernel), back, "conv2d")


def conv2d_transpose(x: Tensor, kernel: Tensor, stride=1, padding=0, groups: int = 1) -> Tensor:
    """Transposed convolution, the adjoint of :func:`conv2d`.

    ``kernel`` is ``[Cin, Cout/groups, kh, kw]``; output extents are
    ``(H - 1) * stride - 2 * padding + k``.
    """
    stride, padding = _pair(stride), _pair(padding)
    _check_conv(x.shape, kernel.shape, stride, padding, groups, "conv2d_transpose")
    n, cin, h, w = x.shape
    kin, og, kh, kw = kernel.shape
    if kin != cin:
        raise DimensionError(f"conv2d_transpose: kernel axis 0 = {kin} but input axis 1 = {cin}")
    ho = (h - 1) * stride[0] - 2 * padding[0] + kh
    wo = (w - 1) * stride[1] - 2 * padding[1] + kw
    if ho < 1 or wo < 1:
        raise DimensionError(f"conv2d_transpose: non-positive output extents ({ho}, {wo})")
    out_shape = (n, og * groups, ho, wo)
    xd, kd = x.data, kernel.data
    # viewed as a conv2d from the output space, the kernel is [Cin, Cout/groups, kh, kw]
    out = _conv_input_grad(xd, kd, out_shape, stride, padding, groups)

    def back(g):
        return (
            _conv_forward(g, kd, stride, padding, groups) if x.requires_grad else None,
            _conv_kernel_grad(g, xd, kd.shape, stride, padding, groups) if kernel.requires_grad else None,
        )

    return Tensor._from_op(out, (x, kernel), back, "conv2d_transpose")


@dataclass
class BatchNormState:
    """Running statistics of one batch-norm layer."""

    running_mean: np.ndarray
    running_var: np.ndarray
    momentum: float = BN_MOMENTUM
    eps: float = BN_EPS

    @classmethod
    def fresh(cls, channels: int, dtype=np.float64) -> "BatchNormState":
        return cls(np.zeros(channels, dtype=dtype), np.ones(channels, dtype=dtype))

    def copy(self) -> "BatchNormState":
        return BatchNormState(self.running_mean.copy(), self.running_var.copy(), self.momentum, self.eps)


def batchnorm2d(x: Tensor, gamma: Tensor, beta: Tensor, state: BatchNormState, training: bool = True) -> Tensor:
    """Per-channel normalization over (N, H, W).

    In training mode the batch statistics are used and ``state`` is updated
    in place (only while gradients are being recorded or explicitly requested
    through ``training``); in eval mode the running statistics are used.
    """
    if x.ndim != 4:
        raise DimensionError(f"batchnorm2d: expected [N,C,H,W], got rank {x.ndim}")
    c = x.shape[1]
    if gamma.shape != (c,) or beta.shape != (c,):
        raise DimensionError(f"batchnorm2d: gamma/beta must have shape ({c},), got {gamma.shape}, {beta.shape}")
    xd = x.data
    gd = gamma.data.reshape(1, c, 1, 1)
    bd = beta.data.reshape(1, c, 1, 1)
    eps = state.eps

    if not training:
        rm = state.running_mean.reshape(1, c, 1, 1).astype(xd.dtype)
        inv = 1.0 / np.sqrt(state.running_var.reshape(1, c, 1, 1).astype(xd.dtype) + eps)
        xhat = (xd - rm) * inv
        out = gd * xhat + bd

        def back_eval(g):
            return (g * gd * inv, (g * xhat).sum(axis=(0, 2, 3)), g.sum(axis=(0, 2, 3)))

        return Tensor._from_op(out, (x, gamma, beta), back_eval, "batchnorm2d")

    m = xd.shape[0] * xd.shape[2] * xd.shape[3]
    if m < 2:
        raise ContractError(f"batchnorm2d: degenerate batch, N*H*W = {m} < 2 in train mode")
    mu = xd.mean(axis=(0, 2, 3), keepdims=True)
    var = xd.var(axis=(0, 2, 3), keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (xd - mu) * inv
    out = gd * xhat + bd

    mom = state.momentum
    state.running_mean = (1 - mom) * state.running_mean + mom * mu.reshape(c)
    state.running_var = (1 - mom) * state.running_var + mom * var.reshape(c) * m / (m - 1)

    def back(g):
        dxhat = g * gd
        dx = (inv / m) * (
            m * dxhat - dxhat.sum(axis=(0, 2, 3), keepdims=True) - xhat * (dxhat * xhat).sum(axis=(0, 2, 3), keepdims=True)
        )
        return (dx, (g * xhat).sum(axis=(0, 2, 3)), g.sum(axis=(0, 2, 3)))

    return Tensor._from_op(out, (x, gamma, beta), back, "batchnorm2d")


def activation(x: Tensor, kind: str) -> Tensor:
    if kind == "elu":
        return x.elu(ELU_ALPHA)
    if kind == "sigmoid":
        return x.sigmoid()
    if kind == "tanh":
        return x.tanh()
    raise ContractError(f"unknown activation {kind!r}")


def affine(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """``x @ weight + bias`` for ``x`` of shape [N, F] and ``weight`` [F, G]."""
    if x.ndim != 2 or weight.ndim != 2:
        raise DimensionError(f"affine: expected 2-D x and weight, got {x.shape} and {weight.shape}")
    if x.shape[1] != weight.shape[0]:
        raise DimensionError(f"affine: x axis 1 = {x.shape[1]} but weight axis 0 = {weight.shape[0]}")
    out = x @ weight
    if bias is not None:
        if bias.shape != (weight.shape[1],):
            raise DimensionError(f"affine: bias shape {bias.shape} != ({weight.shape[1]},)")
        out = out + bias
    return out


def avg_pool2d(x: Tensor, size) -> Tensor:
    """Non-overlapping average pooling; extents must divide exactly."""
    ph, pw = _pair(size)
    n, c, h, w = x.shape
    if h % ph or w % pw:
        raise DimensionError(f"avg_pool2d: extents ({h}, {w}) on axes (2, 3) not divisible by pool ({ph}, {pw})")
    out = x.data.reshape(n, c, h // ph, ph, w // pw, pw).mean(axis=(3, 5))
    scale = 1.0 / (ph * pw)

    def back(g):
        return (np.repeat(np.repeat(g, ph, axis=2), pw, axis=3) * scale,)

    return Tensor._from_op(out, (x,), back, "avg_pool2d")


def mse(x: Tensor, y: Tensor) -> Tensor:
    x, y = Tensor.lift(x), Tensor.lift(y)
    if x.shape != y.shape:
        raise DimensionError(f"mse: shapes differ {x.shape} vs {y.shape}")
    d = x - y
    return (d * d).mean()
