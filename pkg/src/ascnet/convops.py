"""The three 3x3 convolution operators: classic, integer-dilated, and
adaptive-scale (per-pixel fractional dilation with bilinear sampling).

All operators use stride 1 and zero padding sized to preserve spatial
dimensions. Forward and backward passes are hand-written; the adaptive
operator additionally produces the gradient with respect to the rate field.

Classic/dilated forwards are computed through the same column-gather +
matmul contraction as the adaptive operator, so a constant integer rate
field reproduces them bit for bit.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

# 3x3 kernel tap offsets (dy, dx), row-major over the kernel window.
TAP_OFFSETS = tuple(
    (dy, dx) for dy in (-1, 0, 1) for dx in (-1, 0, 1)
)

CLASSIC = "classic"
DILATED = "dilated"
ADAPTIVE = "adaptive"


@dataclass
class ConvLayer:
    """3x3 convolution parameters: weights (out,in,3,3), bias (out,)."""

    weights: np.ndarray
    bias: np.ndarray
    kind: str = CLASSIC
    rate: int = 1  # integer dilation, only meaningful for kind == "dilated"

    def __post_init__(self):
        w = self.weights
        if w.ndim != 4 or w.shape[2:] != (3, 3):
            raise ValueError(f"kernel must be (out,in,3,3), got {w.shape}")
        if self.bias.shape != (w.shape[0],):
            raise ValueError(
                f"bias shape {self.bias.shape} does not match {w.shape[0]} "
                "output channels"
            )
        if self.kind not in (CLASSIC, DILATED, ADAPTIVE):
            raise ValueError(f"unknown layer kind {self.kind!r}")
        if self.kind == DILATED and self.rate < 1:
            raise ValueError("dilation rate must be >= 1")

    @property
    def out_channels(self):
        return self.weights.shape[0]

    @property
    def in_channels(self):
        return self.weights.shape[1]


def bilinear_kernel(q, p) -> float:
    """Tent weight of integer location q for fractional sample point p.

    Both are (y, x) pairs; returns max(0,1-|qx-px|) * max(0,1-|qy-py|).
    """
    qy, qx = q
    py, px = p
    return max(0.0, 1.0 - abs(qx - px)) * max(0.0, 1.0 - abs(qy - py))


def sample_bilinear(x: np.ndarray, p, c: int) -> float:
    """Bilinearly sample channel c of x (C,H,W) at fractional point p=(y,x).

    Out-of-bounds neighbors contribute zero (implicit zero padding), so any
    p is legal, including points entirely outside the map.
    """
    if x.ndim != 3:
        raise ValueError(f"expected (C,H,W) input, got shape {x.shape}")
    channels, h, w = x.shape
    if not 0 <= c < channels:
        raise ValueError(f"channel {c} out of range [0,{channels})")
    py, px = float(p[0]), float(p[1])
    y0 = int(np.floor(py))
    x0 = int(np.floor(px))
    acc = 0.0
    for qy in (y0, y0 + 1):
        for qx in (x0, x0 + 1):
            if 0 <= qy < h and 0 <= qx < w:
                acc += bilinear_kernel((qy, qx), (py, px)) * float(x[c, qy, qx])
    return acc


def _check_input(x: np.ndarray, layer: ConvLayer) -> np.ndarray:
    if x.ndim != 4 or x.shape[0] != 1:
        raise ValueError(f"expected (1,C,H,W) input, got shape {x.shape}")
    if x.shape[1] != layer.in_channels:
        raise ValueError(
            f"input has {x.shape[1]} channels, kernel expects "
            f"{layer.in_channels}"
        )
    return x[0]


def _integer_cols(x3: np.ndarray, rate: int) -> np.ndarray:
    """Gather the 9 dilated taps of every pixel into (C, 9, H*W) columns.

    Zero padding of `rate` keeps spatial dims; equivalent to im2col for a
    3x3 kernel with integer dilation.
    """
    c, h, w = x3.shape
    pad = rate
    xp = np.zeros((c, h + 2 * pad, w + 2 * pad), dtype=x3.dtype)
    xp[:, pad:pad + h, pad:pad + w] = x3
    cols = np.empty((c, 9, h * w), dtype=x3.dtype)
    for t, (dy, dx) in enumerate(TAP_OFFSETS):
        oy = pad + rate * dy
        ox = pad + rate * dx
        cols[:, t, :] = xp[:, oy:oy + h, ox:ox + w].reshape(c, -1)
    return cols


def _cols_forward(cols: np.ndarray, layer: ConvLayer, h: int, w: int):
    c = layer.in_channels
    o = layer.out_channels
    wmat = layer.weights.reshape(o, c * 9)
    y = wmat @ cols.reshape(c * 9, h * w) + layer.bias[:, None].astype(cols.dtype)
    return y.reshape(1, o, h, w)


def _cols_backward(cols, layer, grad_y, h, w):
    c = layer.in_channels
    o = layer.out_channels
    g = grad_y.reshape(o, h * w)
    wmat = layer.weights.reshape(o, c * 9)
    grad_cols = (wmat.T @ g).reshape(c, 9, h * w)
    grad_w = (g @ cols.reshape(c * 9, h * w).T).reshape(layer.weights.shape)
    grad_b = g.sum(axis=1)
    return grad_cols, grad_w, grad_b


def _cols_to_image(grad_cols: np.ndarray, rate: int, h: int, w: int):
    """Adjoint of `_integer_cols`: scatter tap columns back onto the image."""
    c = grad_cols.shape[0]
    pad = rate
    gp = np.zeros((c, h + 2 * pad, w + 2 * pad), dtype=grad_cols.dtype)
    for t, (dy, dx) in enumerate(TAP_OFFSETS):
        oy = pad + rate * dy
        ox = pad + rate * dx
        gp[:, oy:oy + h, ox:ox + w] += grad_cols[:, t, :].reshape(c, h, w)
    return gp[:, pad:pad + h, pad:pad + w].reshape(1, c, h, w)


def conv_classic_forward(x: np.ndarray, layer: ConvLayer) -> np.ndarray:
    if layer.kind != CLASSIC:
        raise ValueError(f"expected a classic layer, got {layer.kind!r}")
    x3 = _check_input(x, layer)
    h, w = x3.shape[1:]
    return _cols_forward(_integer_cols(x3, 1), layer, h, w)


def conv_dilated_forward(x: np.ndarray, layer: ConvLayer) -> np.ndarray:
    if layer.kind != DILATED:
        raise ValueError(f"expected a dilated layer, got {layer.kind!r}")
    x3 = _check_input(x, layer)
    h, w = x3.shape[1:]
    return _cols_forward(_integer_cols(x3, layer.rate), layer, h, w)


def _conv_int_backward(x, layer, grad_y, rate):
    x3 = _check_input(x, layer)
    h, w = x3.shape[1:]
    if grad_y.shape != (1, layer.out_channels, h, w):
        raise ValueError(
            f"grad_y shape {grad_y.shape} does not match output "
            f"(1,{layer.out_channels},{h},{w})"
        )
    cols = _integer_cols(x3, rate)
    grad_cols, grad_w, grad_b = _cols_backward(cols, layer, grad_y, h, w)
    grad_x = _cols_to_image(grad_cols, rate, h, w)
    return grad_x, grad_w, grad_b


def conv_classic_backward(x, layer, grad_y):
    if layer.kind != CLASSIC:
        raise ValueError(f"expected a classic layer, got {layer.kind!r}")
    return _conv_int_backward(x, layer, grad_y, 1)


def conv_dilated_backward(x, layer, grad_y):
    if layer.kind != DILATED:
        raise ValueError(f"expected a dilated layer, got {layer.kind!r}")
    return _conv_int_backward(x, layer, grad_y, layer.rate)


@dataclass
class SamplingPlan:
    """Precomputed fractional sampling geometry for one rate field.

    For each of the 9 taps and each of the 4 bilinear corner neighbors of
    every output pixel: flattened gather index (clipped in-bounds), tent
    weight (zero for out-of-bounds corners), and the weight's derivative
    with respect to the pixel's rate value. Shared by every adaptive layer
    consuming the same rate field.
    """

    height: int
    width: int
    rates: np.ndarray                      # (H*W,)
    idx: np.ndarray = field(repr=False)    # (9, 4, H*W) int
    weight: np.ndarray = field(repr=False)          # (9, 4, H*W)
    dweight_drate: np.ndarray = field(repr=False)   # (9, 4, H*W)


def _check_rates(rates: np.ndarray, h: int, w: int) -> np.ndarray:
    if rates.shape != (1, 1, h, w):
        raise ValueError(
            f"rate field shape {rates.shape} does not match input spatial "
            f"dims (1,1,{h},{w})"
        )
    r = rates.reshape(-1)
    if np.any(r < 0):
        raise ValueError("rate field contains negative values")
    if not np.all(np.isfinite(r)):
        raise ValueError("rate field contains non-finite values")
    return r


def build_sampling_plan(rates: np.ndarray, h: int, w: int) -> SamplingPlan:
    """Geometry for sampling at p0 + r(p0) * tap for every pixel and tap.

    The rate derivative of the tent weight uses the floor-branch (one-sided)
    derivative, so it is well defined and non-zero at integer sample
    offsets; this keeps the rate field trainable from its all-ones start.
    """
    r = _check_rates(rates, h, w)
    dtype = r.dtype
    yy, xx = np.meshgrid(
        np.arange(h, dtype=dtype), np.arange(w, dtype=dtype), indexing="ij"
    )
    yy = yy.reshape(-1)
    xx = xx.reshape(-1)
    n = h * w

    idx = np.empty((9, 4, n), dtype=np.intp)
    weight = np.empty((9, 4, n), dtype=dtype)
    dwdr = np.empty((9, 4, n), dtype=dtype)

    for t, (dy, dx) in enumerate(TAP_OFFSETS):
        py = yy + r * dy
        px = xx + r * dx
        y0 = np.floor(py)
        x0 = np.floor(px)
        fy = py - y0
        fx = px - x0
        wy = (1.0 - fy, fy)
        wx = (1.0 - fx, fx)
        dwy = (-1.0, 1.0)
        y0i = y0.astype(np.intp)
        x0i = x0.astype(np.intp)
        for k, (iy, ix) in enumerate(((0, 0), (0, 1), (1, 0), (1, 1))):
            qy = y0i + iy
            qx = x0i + ix
            inb = (qy >= 0) & (qy < h) & (qx >= 0) & (qx < w)
            wgt = wy[iy] * wx[ix]
            # d(weight)/d(rate) via chain rule: dp/dr = (dy, dx).
            dw = (dwy[iy] * wx[ix]) * dy + (wy[iy] * dwy[ix]) * dx
            weight[t, k] = np.where(inb, wgt, 0.0)
            dwdr[t, k] = np.where(inb, dw, 0.0)
            idx[t, k] = np.clip(qy, 0, h - 1) * w + np.clip(qx, 0, w - 1)

    return SamplingPlan(h, w, r, idx, weight, dwdr)


def _asc_gather(x3: np.ndarray, plan: SamplingPlan):
    c = x3.shape[0]
    flat = x3.reshape(c, -1)
    corners = flat[:, plan.idx]                       # (C, 9, 4, H*W)
    sampled = (corners * plan.weight[None]).sum(axis=2)  # (C, 9, H*W)
    return corners, sampled


def asc_conv_forward(x, layer, rates, plan=None, return_cache=False):
    """Adaptive-scale convolution: taps at p0 + r(p0)*offset, bilinear reads.

    rates is a (1,1,H,W) non-negative field sampled at the output pixel and
    shared across all channels and taps. Pass a precomputed `plan` to share
    geometry across layers consuming the same field.
    """
    if layer.kind != ADAPTIVE:
        raise ValueError(f"expected an adaptive layer, got {layer.kind!r}")
    x3 = _check_input(x, layer)
    h, w = x3.shape[1:]
    if plan is None:
        plan = build_sampling_plan(rates, h, w)
    elif (plan.height, plan.width) != (h, w):
        raise ValueError("sampling plan dims do not match input")
    corners, sampled = _asc_gather(x3, plan)
    c = layer.in_channels
    o = layer.out_channels
    wmat = layer.weights.reshape(o, c * 9)
    y = wmat @ sampled.reshape(c * 9, h * w) + layer.bias[:, None].astype(x3.dtype)
    y = y.reshape(1, o, h, w)
    if return_cache:
        return y, (plan, corners, sampled)
    return y


def asc_conv_backward(x, layer, rates, grad_y, cache=None):
    """Gradients of the adaptive convolution for input, weights, bias and
    the rate field. Returns (grad_x, grad_w, grad_bias, grad_rates)."""
    if layer.kind != ADAPTIVE:
        raise ValueError(f"expected an adaptive layer, got {layer.kind!r}")
    x3 = _check_input(x, layer)
    h, w = x3.shape[1:]
    c = layer.in_channels
    o = layer.out_channels
    if grad_y.shape != (1, o, h, w):
        raise ValueError(
            f"grad_y shape {grad_y.shape} does not match output (1,{o},{h},{w})"
        )
    if cache is None:
        plan = build_sampling_plan(rates, h, w)
        corners, sampled = _asc_gather(x3, plan)
    else:
        plan, corners, sampled = cache

    n = h * w
    g = grad_y.reshape(o, n)
    wmat = layer.weights.reshape(o, c * 9)

    grad_w = (g @ sampled.reshape(c * 9, n).T).reshape(layer.weights.shape)
    grad_b = g.sum(axis=1)
    grad_sampled = (wmat.T @ g).reshape(c, 9, n)

    # Scatter tap gradients back through the bilinear weights. bincount
    # keeps a fixed summation order, so backward is deterministic.
    corner_grad = grad_sampled[:, :, None, :] * plan.weight[None]
    flat_idx = plan.idx.reshape(-1)
    grad_x = np.empty((c, n), dtype=x3.dtype)
    for ch in range(c):
        grad_x[ch] = np.bincount(
            flat_idx, weights=corner_grad[ch].reshape(-1), minlength=n
        )
    grad_x = grad_x.reshape(1, c, h, w).astype(x3.dtype, copy=False)

    # d(output)/d(rate) at each pixel: tent-weight derivatives against the
    # gathered corner values, contracted with the upstream tap gradients.
    dsample_drate = (corners * plan.dweight_drate[None]).sum(axis=2)  # (C,9,N)
    grad_rates = (dsample_drate * grad_sampled).sum(axis=(0, 1))
    grad_rates = grad_rates.reshape(1, 1, h, w)

    return grad_x, grad_w, grad_b, grad_rates


def oracle_asc_forward(x, layer, rates) -> np.ndarray:
    """Literal adaptive convolution summing the tent kernel over every
    integer location of the map. Quadratic in pixels; test oracle only."""
    if layer.kind != ADAPTIVE:
        raise ValueError(f"expected an adaptive layer, got {layer.kind!r}")
    x3 = _check_input(x, layer)
    c, h, w = x3.shape
    r = _check_rates(rates, h, w).reshape(h, w)
    o = layer.out_channels
    y = np.zeros((1, o, h, w), dtype=x3.dtype)
    for oc in range(o):
        for py0 in range(h):
            for px0 in range(w):
                acc = float(layer.bias[oc])
                for t, (dy, dx) in enumerate(TAP_OFFSETS):
                    sy = py0 + r[py0, px0] * dy
                    sx = px0 + r[py0, px0] * dx
                    for ic in range(c):
                        val = 0.0
                        for qy in range(h):
                            for qx in range(w):
                                f = bilinear_kernel((qy, qx), (sy, sx))
                                if f != 0.0:
                                    val += f * float(x3[ic, qy, qx])
                        acc += float(layer.weights[oc, ic, t // 3, t % 3]) * val
                y[0, oc, py0, px0] = acc
    return y
