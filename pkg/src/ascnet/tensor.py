"""Core numeric utilities shared by every other module.

Tensors are plain numpy ndarrays. Conventions used throughout the package:
4-D activations are laid out NCHW, 4-D kernels OIHW, float32 for training
and float64 for gradient checking. Randomness always flows through
``make_rng``, which is numpy's PCG64 generator: identical seeds give
identical value streams on every platform.

Also implements the binary tensor container used for checkpoints and
cached corpora (magic "ASCT", see `save_tensors` / `load_tensors`).
"""

from __future__ import annotations

import struct

import numpy as np

MAGIC = b"ASCT"
CONTAINER_VERSION = 1

_DTYPE_CODE = {np.dtype(np.float32): 0, np.dtype(np.float64): 1}
_CODE_DTYPE = {0: np.dtype("<f4"), 1: np.dtype("<f8")}


def make_rng(seed: int) -> np.random.Generator:
    """Deterministic generator (PCG64) for the given 64-bit seed."""
    return np.random.default_rng(seed)


def he_init(rng: np.random.Generator, shape, dtype=np.float32) -> np.ndarray:
    """He (fan-in) normal init for conv kernels shaped (out, in, kh, kw)."""
    fan_in = int(np.prod(shape[1:]))
    std = np.sqrt(2.0 / fan_in)
    return rng.normal(0.0, std, size=shape).astype(dtype)


def assert_finite(x: np.ndarray, what: str = "tensor") -> None:
    if not np.all(np.isfinite(x)):
        raise ValueError(f"{what} contains non-finite values")


def relu(x: np.ndarray) -> np.ndarray:
    return np.maximum(x, 0)


def relu_backward(x: np.ndarray, grad_out: np.ndarray) -> np.ndarray:
    """Gradient of relu. Subgradient at exactly 0 is 0."""
    return grad_out * (x > 0)


def softmax_cross_entropy(logits: np.ndarray, labels: np.ndarray):
    """Mean per-pixel cross entropy between softmax(logits) and integer labels.

    logits: (1, C, H, W); labels: (1, H, W) integers in [0, C).
    Returns (loss, grad_logits) with grad_logits = (softmax - onehot) / (H*W).
    Softmax uses max-subtraction for numerical stability.
    """
    if logits.ndim != 4 or logits.shape[0] != 1:
        raise ValueError(f"logits must be (1,C,H,W), got {logits.shape}")
    n, c, h, w = logits.shape
    lab = np.asarray(labels).reshape(h, w)
    bad = (lab < 0) | (lab >= c)
    if bad.any():
        yy, xx = np.argwhere(bad)[0]
        raise ValueError(
            f"label {lab[yy, xx]} out of range [0,{c}) at pixel ({yy},{xx})"
        )

    z = logits[0]
    zmax = z.max(axis=0)
    shifted = z - zmax
    e = np.exp(shifted)
    denom = e.sum(axis=0)
    probs = e / denom
    logp = shifted - np.log(denom)

    rows = np.arange(h)[:, None]
    cols = np.arange(w)[None, :]
    npix = h * w
    loss = float(-logp[lab, rows, cols].sum() / npix)

    grad = probs.copy()
    grad[lab, rows, cols] -= 1.0
    grad /= npix
    return loss, grad.reshape(1, c, h, w)


def adam_step(param, grad, m, v, t, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
    """One Adam update with bias correction.

    Returns new (param, m, v); inputs are not mutated. t is 1-based.
    """
    if not (param.shape == grad.shape == m.shape == v.shape):
        raise ValueError(
            f"shape mismatch: param {param.shape}, grad {grad.shape}, "
            f"m {m.shape}, v {v.shape}"
        )
    if t < 1:
        raise ValueError("step index t must be >= 1")
    m = beta1 * m + (1.0 - beta1) * grad
    v = beta2 * v + (1.0 - beta2) * grad * grad
    m_hat = m / (1.0 - beta1 ** t)
    v_hat = v / (1.0 - beta2 ** t)
    param = param - lr * m_hat / (np.sqrt(v_hat) + eps)
    return param, m, v


class Adam:
    """Adam over a dict of named parameter arrays, updated in place."""

    def __init__(self, params: dict, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
        self.params = params
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self.m = {k: np.zeros_like(p) for k, p in params.items()}
        self.v = {k: np.zeros_like(p) for k, p in params.items()}

    def step(self, grads: dict) -> None:
        self.t += 1
        for name, p in self.params.items():
            new_p, self.m[name], self.v[name] = adam_step(
                p, grads[name], self.m[name], self.v[name], self.t,
                self.lr, self.beta1, self.beta2, self.eps,
            )
            p[...] = new_p


def save_tensors(path, tensors: dict) -> None:
    """Write named tensors to the binary container format.

    Layout: magic "ASCT", version u16 LE, tensor count u32 LE; then per
    tensor: name length u16 + UTF-8 name, dtype code u8 (0=f32, 1=f64),
    ndim u8, dims u32 LE each, raw row-major little-endian payload.
    """
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<HI", CONTAINER_VERSION, len(tensors)))
        for name, arr in tensors.items():
            arr = np.ascontiguousarray(arr)
            if arr.dtype not in _DTYPE_CODE:
                raise ValueError(f"unsupported dtype {arr.dtype} for '{name}'")
            code = _DTYPE_CODE[arr.dtype]
            nb = name.encode("utf-8")
            f.write(struct.pack("<H", len(nb)))
            f.write(nb)
            f.write(struct.pack("<BB", code, arr.ndim))
            f.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            f.write(arr.astype(_CODE_DTYPE[code], copy=False).tobytes())


def load_tensors(path) -> dict:
    """Read a container written by `save_tensors`; preserves tensor order."""
    with open(path, "rb") as f:
        data = f.read()
    if data[:4] != MAGIC:
        raise ValueError(f"{path}: not a tensor container (bad magic)")
    version, count = struct.unpack_from("<HI", data, 4)
    if version != CONTAINER_VERSION:
        raise ValueError(f"{path}: unsupported container version {version}")
    off = 10
    out = {}
    for _ in range(count):
        (nlen,) = struct.unpack_from("<H", data, off)
        off += 2
        name = data[off:off + nlen].decode("utf-8")
        off += nlen
        code, ndim = struct.unpack_from("<BB", data, off)
        off += 2
        if code not in _CODE_DTYPE:
            raise ValueError(f"{path}: unknown dtype code {code}")
        dims = struct.unpack_from(f"<{ndim}I", data, off)
        off += 4 * ndim
        dtype = _CODE_DTYPE[code]
        n = int(np.prod(dims)) if ndim else 1
        arr = np.frombuffer(data, dtype=dtype, count=n, offset=off).reshape(dims)
        off += n * dtype.itemsize
        out[name] = arr.astype(dtype.newbyteorder("="))
    return out
