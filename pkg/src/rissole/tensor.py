"""Dense float64 tensor primitives, seeded RNG and the RSSL-T file format.

Tensors are plain ``numpy.ndarray`` objects of dtype float64.  Convolutions
and layer normalization accept either a single instance ``(C, H, W)`` or a
batch ``(N, C, H, W)``; the backward helpers always work on batches.
"""
from __future__ import annotations

import struct
from pathlib import Path
from typing import Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

DTYPE = np.float64
MAGIC = b"RSSL"
FORMAT_VERSION = 1


class Rng:
    """Counter-based (Philox) generator keyed by a seed and a stream path.

    ``split`` derives an independent child stream, so work that is scheduled
    in a different order (or in parallel) still sees the same numbers.
    """

    def __init__(self, seed: int, *stream: int):
        if seed < 0:
            raise ValueError(f"seed must be non-negative, got {seed}")
        self.seed = int(seed)
        self.stream = tuple(int(s) for s in stream)
        ss = np.random.SeedSequence(self.seed, spawn_key=self.stream)
        self._gen = np.random.Generator(np.random.Philox(ss))

    def split(self, *ids: int) -> "Rng":
        return Rng(self.seed, *self.stream, *ids)

    def normal(self, shape: Sequence[int]) -> np.ndarray:
        return self._gen.standard_normal(tuple(shape))

    def integers(self, low: int, high: int, size=None):
        """Uniform integers in ``[low, high)``."""
        return self._gen.integers(low, high, size=size)

    def uniform(self, low: float = 0.0, high: float = 1.0, size=None):
        return self._gen.uniform(low, high, size=size)

    def permutation(self, n: int) -> np.ndarray:
        return self._gen.permutation(n)

    def __repr__(self) -> str:
        return f"Rng(seed={self.seed}, stream={self.stream})"


def randn(rng: Rng, shape: Sequence[int]) -> np.ndarray:
    shape = tuple(int(s) for s in shape)
    if not shape or any(s < 1 for s in shape):
        raise ValueError(f"randn needs a non-empty shape with positive dims, got {shape}")
    return rng.normal(shape)


def flat_index(shape: Sequence[int], index: Sequence[int]) -> int:
    """Row-major offset of a multi-index."""
    return int(np.ravel_multi_index(tuple(index), tuple(shape)))


def multi_index(shape: Sequence[int], offset: int) -> tuple[int, ...]:
    return tuple(int(i) for i in np.unravel_index(offset, tuple(shape)))


# ---------------------------------------------------------------------------
# convolution

def _as_batch(x: np.ndarray) -> tuple[np.ndarray, bool]:
    if x.ndim == 3:
        return x[None], True
    if x.ndim == 4:
        return x, False
    raise ValueError(f"expected C×H×W or N×C×H×W input, got shape {x.shape}")


def im2col(x: np.ndarray, k: int) -> np.ndarray:
    """Unfold ``(N, C, H, W)`` into ``(N*H*W, k*k*C)`` zero-padded patches.

    Columns are ordered (row offset, column offset, channel); gathering with
    the channel axis innermost is about twice as fast as channel-major order.
    """
    n, c, h, w = x.shape
    p = k // 2
    xp = np.zeros((n, h + 2 * p, w + 2 * p, c), dtype=DTYPE)
    xp[:, p:p + h, p:p + w, :] = x.transpose(0, 2, 3, 1)
    win = sliding_window_view(xp, (k, k), axis=(1, 2))  # N, H, W, C, k, k
    return win.transpose(0, 1, 2, 4, 5, 3).reshape(n * h * w, k * k * c)


def col2im(cols: np.ndarray, shape: tuple[int, int, int, int], k: int) -> np.ndarray:
    """Adjoint of :func:`im2col`."""
    n, c, h, w = shape
    p = k // 2
    cols = cols.reshape(n, h, w, k, k, c)
    out = np.zeros((n, h + 2 * p, w + 2 * p, c), dtype=DTYPE)
    for di in range(k):
        for dj in range(k):
            out[:, di:di + h, dj:dj + w, :] += cols[:, :, :, di, dj, :]
    return np.ascontiguousarray(out[:, p:p + h, p:p + w, :].transpose(0, 3, 1, 2))


def _flat_kernel(kernel: np.ndarray) -> np.ndarray:
    """``C_out×C_in×k×k`` as ``C_out × (k*k*C_in)``, matching :func:`im2col` columns."""
    return kernel.transpose(0, 2, 3, 1).reshape(kernel.shape[0], -1)


def _check_kernel(x: np.ndarray, kernel: np.ndarray, bias: np.ndarray) -> int:
    if kernel.ndim != 4 or kernel.shape[2] != kernel.shape[3]:
        raise ValueError(f"kernel must be C_out×C_in×k×k, got {kernel.shape}")
    k = kernel.shape[2]
    if k % 2 == 0:
        raise ValueError(f"kernel size must be odd, got {k}")
    if x.shape[1] != kernel.shape[1]:
        raise ValueError(f"channel mismatch: input has {x.shape[1]}, kernel expects {kernel.shape[1]}")
    if bias.shape != (kernel.shape[0],):
        raise ValueError(f"bias shape {bias.shape} does not match C_out={kernel.shape[0]}")
    return k


def conv2d(x: np.ndarray, kernel: np.ndarray, bias: np.ndarray, *, return_cols: bool = False):
    """Same-padded stride-1 cross-correlation.

    With ``return_cols`` the unfolded input is returned as well, for reuse by
    :func:`conv2d_backward`.
    """
    xb, single = _as_batch(np.asarray(x, dtype=DTYPE))
    k = _check_kernel(xb, kernel, bias)
    n, _, h, w = xb.shape
    cols = im2col(xb, k)
    out = cols @ _flat_kernel(kernel).T + bias
    out = out.reshape(n, h, w, -1).transpose(0, 3, 1, 2)
    out = np.ascontiguousarray(out)
    if single:
        out = out[0]
    return (out, cols) if return_cols else out


def conv2d_backward(dout: np.ndarray, cols: np.ndarray, x_shape, kernel: np.ndarray,
                    need_input_grad: bool = True):
    """Gradients ``(d_kernel, d_bias, d_input)`` for a batched :func:`conv2d` call."""
    c_out = kernel.shape[0]
    d2 = dout.transpose(0, 2, 3, 1).reshape(-1, c_out)
    k = kernel.shape[2]
    d_kernel = np.ascontiguousarray((d2.T @ cols).reshape(c_out, k, k, -1).transpose(0, 3, 1, 2))
    d_bias = d2.sum(axis=0)
    d_input = None
    if need_input_grad:
        dcols = d2 @ _flat_kernel(kernel)
        d_input = col2im(dcols, tuple(x_shape), k)
    return d_kernel, d_bias, d_input


# ---------------------------------------------------------------------------
# layer normalization

def layer_norm(x: np.ndarray, gain, offset, eps: float = 1e-5, *, batched: bool = False):
    """Normalize each instance over all of its axes, then scale and shift.

    ``batched=True`` treats axis 0 as the batch axis.  ``gain`` and ``offset``
    broadcast against a single instance.
    """
    x = np.asarray(x, dtype=DTYPE)
    axes = tuple(range(1, x.ndim)) if batched else None
    mu = x.mean(axis=axes, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=axes, keepdims=True)
    return xc / np.sqrt(var + eps) * gain + offset


def layer_norm_forward(x: np.ndarray, gain: np.ndarray, offset: np.ndarray, eps: float):
    """Batched layer norm that also returns the cache needed for backward."""
    axes = tuple(range(1, x.ndim))
    mu = x.mean(axis=axes, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=axes, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    return xhat * gain + offset, (xhat, inv)


def layer_norm_backward(dout: np.ndarray, cache, gain: np.ndarray):
    """Returns ``(d_input, d_gain, d_offset)``.

    Gain/offset gradients are summed over the batch and reduced to the
    broadcast shape of ``gain``.
    """
    xhat, inv = cache
    axes = tuple(range(1, dout.ndim))
    dg_full = dout * xhat
    d_gain = _reduce_to(dg_full, np.shape(gain))
    d_offset = _reduce_to(dout, np.shape(gain))
    dxhat = dout * gain
    m = np.prod(dout.shape[1:])
    dx = inv / m * (m * dxhat - dxhat.sum(axis=axes, keepdims=True)
                    - xhat * (dxhat * xhat).sum(axis=axes, keepdims=True))
    return dx, d_gain, d_offset


def _reduce_to(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    lead = g.ndim - len(shape)
    g = g.sum(axis=tuple(range(lead)))
    keep = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if keep:
        g = g.sum(axis=keep, keepdims=True)
    return g.reshape(shape)


# ---------------------------------------------------------------------------
# activations

def sigmoid(x: np.ndarray) -> np.ndarray:
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def silu(x: np.ndarray) -> np.ndarray:
    return x * sigmoid(x)


def silu_grad(x: np.ndarray) -> np.ndarray:
    s = sigmoid(x)
    return s * (1.0 + x * (1.0 - s))


# ---------------------------------------------------------------------------
# RSSL-T persistence

def tensor_bytes(t: np.ndarray) -> bytes:
    t = np.asarray(t, dtype=DTYPE)
    head = MAGIC + struct.pack("<II", FORMAT_VERSION, t.ndim)
    head += struct.pack(f"<{t.ndim}Q", *t.shape)
    return head + np.ascontiguousarray(t).astype("<f8").tobytes()


def tensor_from_bytes(buf: bytes) -> np.ndarray:
    if buf[:4] != MAGIC:
        raise ValueError("not an RSSL-T tensor (bad magic)")
    version, ndim = struct.unpack_from("<II", buf, 4)
    if version != FORMAT_VERSION:
        raise ValueError(f"unsupported RSSL-T version {version}")
    shape = struct.unpack_from(f"<{ndim}Q", buf, 12)
    start = 12 + 8 * ndim
    count = int(np.prod(shape)) if ndim else 1
    payload = buf[start:]
    if len(payload) != 8 * count:
        raise ValueError(f"RSSL-T payload has {len(payload)} bytes, expected {8 * count}")
    return np.frombuffer(payload, dtype="<f8").astype(DTYPE).reshape(shape)


def save_tensor(path, t: np.ndarray) -> None:
    Path(path).write_bytes(tensor_bytes(t))


def load_tensor(path) -> np.ndarray:
    return tensor_from_bytes(Path(path).read_bytes())
