"""Minimal dense-tensor kernel: hand-written forward and backward passes.

Arrays are float64, C-contiguous, NHWC for images.  Exactly the layer
vocabulary the steering model needs is implemented; each forward returns an
opaque cache consumed by the matching backward, and every backward is the
exact analytic adjoint (finite-difference checked in the test suite).

Set DEBUG_CHECK_FINITE to make every op assert its outputs are finite.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

DEBUG_CHECK_FINITE = False

KINDS = ("input_norm", "conv2d", "maxpool2d", "relu", "fc", "gap", "residual_add")

NORM_EPS = 1e-6

FD_STEP = 1e-5


class ShapeError(ValueError):
    """Raised when an input does not match a layer's declared geometry."""


@dataclass(frozen=True)
class LayerSpec:
    """One layer: a kind plus the hyperparameters that kind needs."""

    kind: str
    kernel: int = 0
    stride: int = 1
    padding: int = 0
    in_channels: int = 0
    out_channels: int = 0
    in_features: int = 0
    out_features: int = 0
    bias: bool = True

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ShapeError(f"unknown layer kind {self.kind!r}")
        if self.kind == "conv2d":
            if self.kernel < 1 or self.stride < 1 or self.padding < 0:
                raise ShapeError(f"bad conv2d geometry: {self}")
            if self.in_channels < 1 or self.out_channels < 1:
                raise ShapeError(f"conv2d needs positive channel counts: {self}")
        elif self.kind == "maxpool2d":
            if self.kernel < 1 or self.stride < 1:
                raise ShapeError(f"bad maxpool2d geometry: {self}")
        elif self.kind == "fc":
            if self.in_features < 1 or self.out_features < 1:
                raise ShapeError(f"fc needs positive widths: {self}")


def conv_output_hw(h: int, w: int, kernel: int, stride: int, padding: int) -> tuple[int, int]:
    oh = (h + 2 * padding - kernel) // stride + 1
    ow = (w + 2 * padding - kernel) // stride + 1
    if oh < 1 or ow < 1:
        raise ShapeError(f"window {kernel}x{kernel}/s{stride}/p{padding} does not fit {h}x{w}")
    return oh, ow


def param_shapes(spec: LayerSpec) -> list[tuple[int, ...]]:
    """Shapes of the layer's parameter tensors, in storage order."""
    if spec.kind == "conv2d":
        shapes = [(spec.kernel, spec.kernel, spec.in_channels, spec.out_channels)]
        if spec.bias:
            shapes.append((spec.out_channels,))
        return shapes
    if spec.kind == "fc":
        shapes = [(spec.in_features, spec.out_features)]
        if spec.bias:
            shapes.append((spec.out_features,))
        return shapes
    return []


def _check_finite(name: str, *arrays) -> None:
    if DEBUG_CHECK_FINITE:
        for a in arrays:
            if not np.all(np.isfinite(a)):
                raise FloatingPointError(f"{name}: non-finite values produced")


def _im2col(x: np.ndarray, kernel: int, stride: int, padding: int):
    b, h, w, c = x.shape
    oh, ow = conv_output_hw(h, w, kernel, stride, padding)
    xp = np.pad(x, ((0, 0), (padding, padding), (padding, padding), (0, 0))) if padding else x
    cols = np.empty((b, oh, ow, kernel, kernel, c), dtype=np.float64)
    for a in range(kernel):
        for bb in range(kernel):
            cols[:, :, :, a, bb, :] = xp[:, a:a + oh * stride:stride, bb:bb + ow * stride:stride, :]
    return cols.reshape(b * oh * ow, kernel * kernel * c), (b, h, w, c, oh, ow)


def _col2im(gcols: np.ndarray, geom: tuple, kernel: int, stride: int, padding: int) -> np.ndarray:
    b, h, w, c, oh, ow = geom
    gxp = np.zeros((b, h + 2 * padding, w + 2 * padding, c), dtype=np.float64)
    g6 = gcols.reshape(b, oh, ow, kernel, kernel, c)
    for a in range(kernel):
        for bb in range(kernel):
            gxp[:, a:a + oh * stride:stride, bb:bb + ow * stride:stride, :] += g6[:, :, :, a, bb, :]
    if padding:
        return gxp[:, padding:h + padding, padding:w + padding, :]
    return gxp


def forward(spec: LayerSpec, params: list[np.ndarray], x):
    """Run the layer; returns (output, cache) with cache bound to this call."""
    kind = spec.kind

    if kind == "input_norm":
        if x.ndim != 4:
            raise ShapeError(f"input_norm expects NHWC, got shape {x.shape}")
        b = x.shape[0]
        flat = x.reshape(b, -1)
        mu = flat.mean(axis=1, keepdims=True)
        centered = flat - mu
        sigma = np.sqrt((centered ** 2).mean(axis=1, keepdims=True))
        y = (centered / (sigma + NORM_EPS)).reshape(x.shape)
        _check_finite(kind, y)
        return y, (spec, x.shape, centered, sigma)

    if kind == "conv2d":
        wgt = params[0]
        if x.ndim != 4 or x.shape[3] != spec.in_channels:
            raise ShapeError(f"conv2d expects NHWC with C={spec.in_channels}, got {x.shape}")
        cols, geom = _im2col(x, spec.kernel, spec.stride, spec.padding)
        wmat = wgt.reshape(-1, spec.out_channels)
        out = cols @ wmat
        if spec.bias:
            out = out + params[1]
        b, _, _, _, oh, ow = geom
        y = out.reshape(b, oh, ow, spec.out_channels)
        _check_finite(kind, y)
        return y, (spec, cols, geom, wmat)

    if kind == "maxpool2d":
        if x.ndim != 4:
            raise ShapeError(f"maxpool2d expects NHWC, got shape {x.shape}")
        b, h, w, c = x.shape
        k, s = spec.kernel, spec.stride
        oh, ow = conv_output_hw(h, w, k, s, 0)
        patches = np.empty((b, oh, ow, k * k, c), dtype=np.float64)
        for a in range(k):
            for bb in range(k):
                patches[:, :, :, a * k + bb, :] = x[:, a:a + oh * s:s, bb:bb + ow * s:s, :]
        arg = np.argmax(patches, axis=3)  # first index wins ties
        y = np.take_along_axis(patches, arg[:, :, :, None, :], axis=3)[:, :, :, 0, :]
        _check_finite(kind, y)
        return y, (spec, x.shape, arg)

    if kind == "relu":
        return np.maximum(x, 0.0), (spec, x > 0)

    if kind == "fc":
        wgt = params[0]
        if x.ndim != 2 or x.shape[1] != spec.in_features:
            raise ShapeError(f"fc expects (batch, {spec.in_features}), got {x.shape}")
        y = x @ wgt
        if spec.bias:
            y = y + params[1]
        _check_finite(kind, y)
        return y, (spec, x, wgt)

    if kind == "gap":
        if x.ndim != 4:
            raise ShapeError(f"gap expects NHWC, got shape {x.shape}")
        return x.mean(axis=(1, 2)), (spec, x.shape)

    if kind == "residual_add":
        a, b = x
        if a.shape != b.shape:
            raise ShapeError(f"residual_add shape mismatch: {a.shape} vs {b.shape}")
        return a + b, (spec, a.shape)

    raise ShapeError(f"unknown layer kind {kind!r}")


def backward(spec: LayerSpec, cache, grad_out):
    """Exact gradients of the forward pass: returns (grad_input, grad_params).

    For residual_add the grad_input is the (grad_a, grad_b) pair; max pooling
    routes each window's gradient to the first-encountered argmax.
    """
    if not isinstance(cache, tuple) or not cache or cache[0] != spec:
        raise ShapeError("stale or mismatched cache for backward")
    kind = spec.kind

    if kind == "input_norm":
        _, x_shape, centered, sigma = cache
        if grad_out.shape != x_shape:
            raise ShapeError(f"grad shape {grad_out.shape} != forward shape {x_shape}")
        b = x_shape[0]
        g = grad_out.reshape(b, -1)
        n = g.shape[1]
        denom = sigma + NORM_EPS
        gc = (g - g.mean(axis=1, keepdims=True)) / denom
        dot = (g * centered).sum(axis=1, keepdims=True)
        safe_sigma = np.where(sigma > 0.0, sigma, 1.0)
        scale = np.where(sigma > 0.0, dot / (denom ** 2 * n * safe_sigma), 0.0)
        gx = gc - centered * scale
        return gx.reshape(x_shape), []

    if kind == "conv2d":
        _, cols, geom, wmat = cache
        b, h, w, c, oh, ow = geom
        if grad_out.shape != (b, oh, ow, spec.out_channels):
            raise ShapeError(f"grad shape {grad_out.shape} != ({b},{oh},{ow},{spec.out_channels})")
        gmat = grad_out.reshape(-1, spec.out_channels)
        gw = (cols.T @ gmat).reshape(spec.kernel, spec.kernel, spec.in_channels, spec.out_channels)
        gx = _col2im(gmat @ wmat.T, geom, spec.kernel, spec.stride, spec.padding)
        grads = [gw]
        if spec.bias:
            grads.append(gmat.sum(axis=0))
        _check_finite(kind, gx, *grads)
        return gx, grads

    if kind == "maxpool2d":
        _, x_shape, arg = cache
        b, h, w, c = x_shape
        k, s = spec.kernel, spec.stride
        oh, ow = arg.shape[1], arg.shape[2]
        if grad_out.shape != (b, oh, ow, c):
            raise ShapeError(f"grad shape {grad_out.shape} != ({b},{oh},{ow},{c})")
        gx = np.zeros(x_shape, dtype=np.float64)
        for idx in range(k * k):
            contrib = grad_out * (arg == idx)
            a, bb = divmod(idx, k)
            gx[:, a:a + oh * s:s, bb:bb + ow * s:s, :] += contrib
        return gx, []

    if kind == "relu":
        _, mask = cache
        if grad_out.shape != mask.shape:
            raise ShapeError(f"grad shape {grad_out.shape} != forward shape {mask.shape}")
        return grad_out * mask, []

    if kind == "fc":
        _, x, wgt = cache
        if grad_out.shape != (x.shape[0], spec.out_features):
            raise ShapeError(f"grad shape {grad_out.shape} != ({x.shape[0]},{spec.out_features})")
        gw = x.T @ grad_out
        gx = grad_out @ wgt.T
        grads = [gw]
        if spec.bias:
            grads.append(grad_out.sum(axis=0))
        _check_finite(kind, gx, *grads)
        return gx, grads

    if kind == "gap":
        _, x_shape = cache
        b, h, w, c = x_shape
        if grad_out.shape != (b, c):
            raise ShapeError(f"grad shape {grad_out.shape} != ({b},{c})")
        gx = np.broadcast_to(grad_out[:, None, None, :] / (h * w), x_shape).copy()
        return gx, []

    if kind == "residual_add":
        _, shape = cache
        if grad_out.shape != shape:
            raise ShapeError(f"grad shape {grad_out.shape} != forward shape {shape}")
        return (grad_out.copy(), grad_out.copy()), []

    raise ShapeError(f"unknown layer kind {kind!r}")


def _default_instance(spec: LayerSpec, rng: np.random.Generator):
    """Small random (input, params) pair for gradient checking."""
    kind = spec.kind
    if kind in ("input_norm", "maxpool2d", "relu"):
        ch = 3 if kind != "relu" else 1
        x = rng.standard_normal((2, 6, 6, ch))
    elif kind == "conv2d":
        x = rng.standard_normal((2, 6, 6, spec.in_channels))
    elif kind == "fc":
        x = rng.standard_normal((2, spec.in_features))
    elif kind == "gap":
        x = rng.standard_normal((2, 4, 5, 3))
    elif kind == "residual_add":
        x = (rng.standard_normal((2, 3, 3, 2)), rng.standard_normal((2, 3, 3, 2)))
    else:
        raise ShapeError(kind)
    params = [rng.standard_normal(s) * 0.5 for s in param_shapes(spec)]
    return x, params


def _nudge_kinks(spec: LayerSpec, x, rng: np.random.Generator, margin: float = 1e-3):
    """Resample until the instance sits away from relu/maxpool kinks."""
    if spec.kind == "relu":
        while np.abs(x).min() < margin:
            x = rng.standard_normal(x.shape)
        return x
    if spec.kind == "maxpool2d":
        while True:
            patches, _ = _pool_patches(x, spec.kernel, spec.stride)
            top2 = np.sort(patches, axis=3)[:, :, :, -2:, :]
            if (top2[:, :, :, 1, :] - top2[:, :, :, 0, :]).min() > margin:
                return x
            x = rng.standard_normal(x.shape)
    return x


def _pool_patches(x, k, s):
    b, h, w, c = x.shape
    oh, ow = conv_output_hw(h, w, k, s, 0)
    patches = np.empty((b, oh, ow, k * k, c), dtype=np.float64)
    for a in range(k):
        for bb in range(k):
            patches[:, :, :, a * k + bb, :] = x[:, a:a + oh * s:s, bb:bb + ow * s:s, :]
    return patches, (oh, ow)


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-3) -> float:
    """Max elementwise |a-n| / max(|a|,|n|,floor); the floor keeps
    finite-difference roundoff on near-zero coordinates from dominating."""
    a = np.asarray(analytic, dtype=np.float64).ravel()
    n = np.asarray(numeric, dtype=np.float64).ravel()
    denom = np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)
    if a.size == 0:
        return 0.0
    return float(np.max(np.abs(a - n) / denom))


def grad_check(spec: LayerSpec, seed: int, step: float = FD_STEP) -> float:
    """Compare backward against central finite differences on every input and
    parameter coordinate of a small seeded instance; returns the max relative
    error."""
    rng = np.random.default_rng(seed)
    x, params = _default_instance(spec, rng)
    if spec.kind in ("relu", "maxpool2d"):
        x = _nudge_kinks(spec, x, rng)

    out, cache = forward(spec, params, x)
    proj = np.random.default_rng(seed + 1).standard_normal(out.shape)

    def loss_at(x_val, p_val):
        y, _ = forward(spec, p_val, x_val)
        return float(np.sum(y * proj))

    gx, gparams = backward(spec, cache, proj)

    def fd(read, write, analytic):
        flatg = np.asarray(analytic).ravel()
        numeric = np.empty_like(flatg)
        base = read()
        for idx in range(base.size):
            orig = base.flat[idx]
            base.flat[idx] = orig + step
            up = loss_at(*write())
            base.flat[idx] = orig - step
            down = loss_at(*write())
            base.flat[idx] = orig
            numeric[idx] = (up - down) / (2 * step)
        return relative_error(flatg, numeric)

    errs = []
    if spec.kind == "residual_add":
        for t, g in zip(x, gx):
            errs.append(fd(lambda t=t: t, lambda: (x, params), g))
    else:
        errs.append(fd(lambda: x, lambda: (x, params), gx))
    for p, g in zip(params, gparams):
        errs.append(fd(lambda p=p: p, lambda: (x, params), g))
    return max(errs)
