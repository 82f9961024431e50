"""Block-level noise-prediction network with retrieval conditioning.

Layout of one forward pass on a batch of blocks ``z`` (N, C, h, w)::

    h0 = pad(z) + conv_in(z) + mean_k conv_nbr(neighbor_k) [+ pos[i]]
    h  = LayerNorm(h0) + pad(z)
    R times:  h = h + conv2(silu(conv1(silu(h)) + time_proj(t)))
    eps_hat = conv_out(silu(h))

``pad(z)`` places the C input channels in the first C of ``width`` channels.
The second ``pad(z)`` skip lets the trunk see the scale of the noisy block,
which LayerNorm removes; without it reverse chains drift and blow up.
Gradients are computed by hand; :func:`backward` consumes the :class:`Tape`
filled by :func:`forward`.
"""
from __future__ import annotations

import enum
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from .manifest import read_manifest, write_manifest
from .tensor import (Rng, conv2d, conv2d_backward, layer_norm_backward, layer_norm_forward,
                     load_tensor, save_tensor, silu, silu_grad)


class CondMode(str, enum.Enum):
    RAG = "rag"
    RAG_PREV = "rag_prev"
    NO_RAG = "no_rag"


@dataclass
class DenoiserConfig:
    channels: int
    block_h: int
    block_w: int
    b: int
    k: int
    T: int
    width: int = 32
    n_res: int = 2
    d_t: int = 32
    kernel: int = 3
    cond_mode: CondMode = CondMode.RAG
    pos_enabled: bool = False
    ln_eps: float = 1e-5

    def __post_init__(self):
        self.cond_mode = CondMode(self.cond_mode)
        if self.width < self.channels:
            raise ValueError(f"width {self.width} must be >= block channels {self.channels}")
        if self.d_t % 2:
            raise ValueError(f"time embedding dimension must be even, got {self.d_t}")
        if self.k < 1 and self.cond_mode is not CondMode.NO_RAG:
            raise ValueError(f"k must be >= 1 in {self.cond_mode.value} mode")

    @property
    def block_shape(self) -> tuple[int, int, int]:
        return (self.channels, self.block_h, self.block_w)


@dataclass
class DenoiserModel:
    config: DenoiserConfig
    params: dict[str, np.ndarray]

    def param_count(self) -> int:
        return int(sum(p.size for p in self.params.values()))

    def copy(self) -> "DenoiserModel":
        return DenoiserModel(self.config, {k: v.copy() for k, v in self.params.items()})


def param_shapes(cfg: DenoiserConfig) -> dict[str, tuple[int, ...]]:
    C, W, k = cfg.channels, cfg.width, cfg.kernel
    shapes = {
        "in_w": (W, C, k, k), "in_b": (W,),
        "nbr_w": (W, C, k, k), "nbr_b": (W,),
        "ln_gain": (W,), "ln_offset": (W,),
    }
    for r in range(cfg.n_res):
        shapes[f"res{r}_conv1_w"] = (W, W, k, k)
        shapes[f"res{r}_conv1_b"] = (W,)
        shapes[f"res{r}_time_w"] = (W, cfg.d_t)
        shapes[f"res{r}_time_b"] = (W,)
        shapes[f"res{r}_conv2_w"] = (W, W, k, k)
        shapes[f"res{r}_conv2_b"] = (W,)
    shapes["out_w"] = (C, W, k, k)
    shapes["out_b"] = (C,)
    if cfg.pos_enabled:
        shapes["pos"] = (cfg.b, W)
    return shapes


def init_denoiser(cfg: DenoiserConfig, rng: Rng) -> DenoiserModel:
    """Weights ~ N(0, 1/fan_in), zero biases, unit LayerNorm gain, zero output conv."""
    params = {}
    for j, (name, shape) in enumerate(param_shapes(cfg).items()):
        if name == "ln_gain":
            params[name] = np.ones(shape)
        elif name.startswith("out_") or name.endswith("_b") or name in ("ln_offset", "pos"):
            params[name] = np.zeros(shape)
        else:
            fan_in = int(np.prod(shape[1:]))
            params[name] = rng.split(j).normal(shape) / np.sqrt(fan_in)
    return DenoiserModel(cfg, params)


def zero_grads(model: DenoiserModel) -> dict[str, np.ndarray]:
    return {k: np.zeros_like(v) for k, v in model.params.items()}


# ---------------------------------------------------------------------------

def time_embedding(t: int, T: int, d_t: int) -> np.ndarray:
    if d_t % 2:
        raise ValueError(f"time embedding dimension must be even, got {d_t}")
    if not 1 <= t <= T:
        raise ValueError(f"timestep {t} outside 1..{T}")
    return time_embedding_batch(np.array([t]), d_t)[0]


def time_embedding_batch(t: np.ndarray, d_t: int) -> np.ndarray:
    """Interleaved sin/cos features, ``(N,)`` -> ``(N, d_t)``."""
    m = np.arange(d_t // 2)
    arg = np.asarray(t, dtype=np.float64)[:, None] / 10000.0 ** (2 * m / d_t)
    out = np.empty((arg.shape[0], d_t))
    out[:, 0::2] = np.sin(arg)
    out[:, 1::2] = np.cos(arg)
    return out


class Tape:
    """Activations recorded by :func:`forward` for a later :func:`backward`."""

    def __init__(self):
        self.cache = None

    @property
    def recorded(self) -> bool:
        return self.cache is not None


def forward(model: DenoiserModel, z: np.ndarray, t: np.ndarray, nbrs: np.ndarray | None,
            pos: np.ndarray, tape: Tape | None = None, *, embed_only: bool = False) -> np.ndarray:
    """Batched noise prediction.

    z: (N, C, h, w) noisy blocks; t: (N,) 1-based timesteps; nbrs:
    (N, K, C, h, w) conditioning rows or None; pos: (N,) block indices.
    """
    cfg, p = model.config, model.params
    z = np.asarray(z, dtype=np.float64)
    if z.ndim != 4 or z.shape[1:] != cfg.block_shape:
        raise ValueError(f"block batch shape {z.shape} does not match (N,) + {cfg.block_shape}")
    n = z.shape[0]
    t = np.asarray(t).reshape(-1)
    pos = np.asarray(pos).reshape(-1)
    if t.shape[0] != n or pos.shape[0] != n:
        raise ValueError("t and pos need one entry per block")
    if t.min() < 1 or t.max() > cfg.T:
        raise ValueError(f"timesteps must lie in 1..{cfg.T}")
    if pos.min() < 0 or pos.max() >= cfg.b:
        raise ValueError(f"block index must lie in 0..{cfg.b - 1}")
    if cfg.cond_mode is CondMode.NO_RAG:
        if nbrs is not None and nbrs.shape[1] > 0:
            raise ValueError("neighbors supplied to a model in no_rag mode")
        nbrs = None
    elif nbrs is None or nbrs.shape[1] == 0:
        raise ValueError(f"{cfg.cond_mode.value} mode requires at least one neighbor")
    elif nbrs.shape[0] != n or nbrs.shape[2:] != cfg.block_shape:
        raise ValueError(f"neighbor batch shape {nbrs.shape} does not match blocks {z.shape}")

    C, W = cfg.channels, cfg.width
    e_in, cols_in = conv2d(z, p["in_w"], p["in_b"], return_cols=True)
    h0 = e_in
    h0[:, :C] += z
    cols_nb = None
    K = 0
    if nbrs is not None:
        K = nbrs.shape[1]
        e_nb, cols_nb = conv2d(nbrs.reshape((n * K,) + cfg.block_shape), p["nbr_w"], p["nbr_b"],
                               return_cols=True)
        h0 += e_nb.reshape((n, K, W) + e_nb.shape[2:]).mean(axis=1)
    if cfg.pos_enabled:
        h0 += p["pos"][pos][:, :, None, None]
    gain = p["ln_gain"][:, None, None]
    a, ln_cache = layer_norm_forward(h0, gain, p["ln_offset"][:, None, None], cfg.ln_eps)
    if embed_only:
        return a

    temb = time_embedding_batch(t, cfg.d_t)
    h = a
    h[:, :C] += z
    res_cache = []
    for r in range(cfg.n_res):
        pre = f"res{r}_"
        u, cols1 = conv2d(silu(h), p[pre + "conv1_w"], p[pre + "conv1_b"], return_cols=True)
        u += (temb @ p[pre + "time_w"].T + p[pre + "time_b"])[:, :, None, None]
        v, cols2 = conv2d(silu(u), p[pre + "conv2_w"], p[pre + "conv2_b"], return_cols=True)
        res_cache.append((h, u, cols1, cols2))
        h = h + v
    out, cols_out = conv2d(silu(h), p["out_w"], p["out_b"], return_cols=True)

    if tape is not None:
        tape.cache = dict(n=n, K=K, pos=pos, temb=temb, cols_in=cols_in, cols_nb=cols_nb,
                          ln_cache=ln_cache, res=res_cache, h=h, cols_out=cols_out)
    return out


def backward(model: DenoiserModel, tape: Tape, loss_grad: np.ndarray) -> dict[str, np.ndarray]:
    """Gradients of ``sum(loss_grad * forward_output)`` for every parameter."""
    if tape is None or not tape.recorded:
        raise RuntimeError("backward called without a recorded forward pass")
    cfg, p, c = model.config, model.params, tape.cache
    grads = {}
    shape_w = (c["n"], cfg.width, cfg.block_h, cfg.block_w)

    grads["out_w"], grads["out_b"], ds = conv2d_backward(loss_grad, c["cols_out"], shape_w, p["out_w"])
    dh = ds * silu_grad(c["h"])
    for r in reversed(range(cfg.n_res)):
        pre = f"res{r}_"
        h_in, u, cols1, cols2 = c["res"][r]
        grads[pre + "conv2_w"], grads[pre + "conv2_b"], ds2 = conv2d_backward(
            dh, cols2, shape_w, p[pre + "conv2_w"])
        du = ds2 * silu_grad(u)
        dtp = du.sum(axis=(2, 3))
        grads[pre + "time_w"] = dtp.T @ c["temb"]
        grads[pre + "time_b"] = dtp.sum(axis=0)
        grads[pre + "conv1_w"], grads[pre + "conv1_b"], ds1 = conv2d_backward(
            du, cols1, shape_w, p[pre + "conv1_w"])
        dh = dh + ds1 * silu_grad(h_in)

    dh0, dgain, doffset = layer_norm_backward(dh, c["ln_cache"], p["ln_gain"][:, None, None])
    grads["ln_gain"] = dgain.reshape(-1)
    grads["ln_offset"] = doffset.reshape(-1)
    grads["in_w"], grads["in_b"], _ = conv2d_backward(dh0, c["cols_in"], None, p["in_w"],
                                                      need_input_grad=False)
    K = c["K"]
    if K:
        dnb = np.broadcast_to((dh0 / K)[:, None], (c["n"], K) + dh0.shape[1:])
        dnb = dnb.reshape((c["n"] * K,) + dh0.shape[1:])
        grads["nbr_w"], grads["nbr_b"], _ = conv2d_backward(dnb, c["cols_nb"], None, p["nbr_w"],
                                                            need_input_grad=False)
    else:
        grads["nbr_w"] = np.zeros_like(p["nbr_w"])
        grads["nbr_b"] = np.zeros_like(p["nbr_b"])
    if cfg.pos_enabled:
        dpos = np.zeros_like(p["pos"])
        np.add.at(dpos, c["pos"], dh0.sum(axis=(2, 3)))
        grads["pos"] = dpos
    return grads


# ---------------------------------------------------------------------------
# single-block API

def condition_rows(model: DenoiserModel, neighbors, prev_block=None, i: int = 0) -> np.ndarray | None:
    """Assemble the ``(K, C, h, w)`` conditioning stack for one block.

    In ``rag_prev`` mode the previous block (zeros for block 0) is appended
    as one extra row after the retrieved neighbors.
    """
    cfg = model.config
    bs = cfg.block_shape
    rows = None
    if neighbors is not None:
        rows = np.asarray(neighbors, dtype=np.float64)
        if rows.size == 0:
            rows = None
        else:
            rows = rows.reshape((-1,) + bs)
    if cfg.cond_mode is CondMode.NO_RAG:
        if rows is not None:
            raise ValueError("neighbors supplied to a model in no_rag mode")
        if prev_block is not None:
            raise ValueError("previous-block conditioning requires rag_prev mode")
        return None
    if rows is None:
        raise ValueError(f"{cfg.cond_mode.value} mode requires at least one neighbor")
    if cfg.cond_mode is CondMode.RAG:
        if prev_block is not None:
            raise ValueError("previous-block conditioning requires rag_prev mode")
        return rows
    if prev_block is None:
        if i >= 1:
            raise ValueError(f"block {i} needs its previous block in rag_prev mode")
        prev_block = np.zeros(bs)
    prev = np.asarray(prev_block, dtype=np.float64).reshape((1,) + bs)
    return np.concatenate([rows, prev], axis=0)


def embed_condition(model: DenoiserModel, z_block: np.ndarray, neighbors, t: int, i: int,
                    prev_block=None) -> np.ndarray:
    """The LayerNorm-ed conditioned embedding that feeds the residual trunk."""
    rows = condition_rows(model, neighbors, prev_block, i)
    nb = None if rows is None else rows[None]
    return forward(model, np.asarray(z_block)[None], np.array([t]), nb, np.array([i]),
                   embed_only=True)[0]


def predict_noise(model: DenoiserModel, z_block: np.ndarray, t: int, neighbors, i: int,
                  prev_block=None, tape: Tape | None = None) -> np.ndarray:
    rows = condition_rows(model, neighbors, prev_block, i)
    nb = None if rows is None else rows[None]
    return forward(model, np.asarray(z_block)[None], np.array([t]), nb, np.array([i]), tape)[0]


# ---------------------------------------------------------------------------
# checkpoints

def save_denoiser(model: DenoiserModel, directory) -> None:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    for name, value in model.params.items():
        save_tensor(directory / f"{name}.rsslt", value)
    man = asdict(model.config)
    man["cond_mode"] = model.config.cond_mode.value
    write_manifest(directory / "manifest.txt", man)


def load_denoiser(directory) -> DenoiserModel:
    directory = Path(directory)
    man = read_manifest(directory / "manifest.txt")
    ints = ("channels", "block_h", "block_w", "b", "k", "T", "width", "n_res", "d_t", "kernel")
    cfg = DenoiserConfig(
        **{k: int(man[k]) for k in ints},
        cond_mode=CondMode(man["cond_mode"]),
        pos_enabled=man["pos_enabled"] == "True",
        ln_eps=float(man["ln_eps"]),
    )
    params = {name: load_tensor(directory / f"{name}.rsslt") for name in param_shapes(cfg)}
    return DenoiserModel(cfg, params)
