"""Block-wise ancestral sampling conditioned on pseudo-query neighbors."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .blocks import reassemble
from .codec import CodecModel, decode
from .denoiser import CondMode, DenoiserModel, forward, predict_noise
from .retrieval import RetrievalDB, pseudo_query, query_knn
from .schedule import NoiseSchedule
from .tensor import Rng
from .trainer import model_layout


@dataclass
class SampleConfig:
    n_samples: int = 16
    seed: int = 0
    noise_at_t1: bool = False


@dataclass
class SampleResult:
    latents: np.ndarray  # (n, C, H, W)
    query_rows: np.ndarray  # (n,) pseudo-query row per sample, -1 without retrieval
    neighbor_indices: np.ndarray  # (n, k) rows shared by every block of a sample


def reverse_update(schedule: NoiseSchedule, z_t: np.ndarray, t: int, eps_hat: np.ndarray,
                   noise: np.ndarray | None = None, noise_at_t1: bool = False) -> np.ndarray:
    """``z_{t-1} = (z_t - beta_t / sqrt(1 - alpha_bar_t) * eps_hat) / sqrt(1 - beta_t) + sigma_t * noise``.

    ``noise=None`` gives the deterministic (sigma-free) update; the noise
    term is skipped at ``t == 1`` unless ``noise_at_t1`` is set.
    """
    idx = schedule.check_t(t)
    beta = schedule.beta[idx]
    ab = schedule.alpha_bar[idx]
    out = (z_t - beta / np.sqrt(1.0 - ab) * eps_hat) / np.sqrt(1.0 - beta)
    if noise is not None and (t > 1 or noise_at_t1):
        out = out + schedule.sigma[idx] * noise
    return out


def reverse_step(model: DenoiserModel, schedule: NoiseSchedule, z_t: np.ndarray, t: int, neighbors,
                 i: int, rng: Rng | None, prev_block=None, noise_at_t1: bool = False) -> np.ndarray:
    """One reverse step for a single block; ``rng=None`` forces sigma to 0."""
    eps_hat = predict_noise(model, z_t, t, neighbors, i, prev_block)
    noise = None if rng is None else rng.normal(np.shape(z_t))
    return reverse_update(schedule, z_t, t, eps_hat, noise, noise_at_t1)


def _block_streams(seed: int, n: int, i: int, shape, T: int):
    """Start noise and per-step noise for block ``i`` of every sample."""
    z_T = np.empty((n,) + shape)
    noises = np.empty((n, T) + shape)
    for s in range(n):
        r = Rng(seed).split(s, 1, i)
        z_T[s] = r.normal(shape)
        noises[s] = r.normal((T,) + shape)  # row 0 is used at t=T
    return z_T, noises


def _run_block(model, schedule, i, z, noises, rows, noise_at_t1):
    n = z.shape[0]
    T = schedule.T
    pos = np.full(n, i)
    for t in range(T, 0, -1):
        eps_hat = forward(model, z, np.full(n, t), rows, pos)
        z = reverse_update(schedule, z, t, eps_hat, noises[:, T - t], noise_at_t1)
    return z


def sample_latents(model: DenoiserModel, schedule: NoiseSchedule, db: RetrievalDB | None,
                   config: SampleConfig, *, executor=None, block_order=None) -> SampleResult:
    """Generate ``config.n_samples`` latents.

    Each block runs its own reverse chain (batched over samples) with its own
    random streams, so ``block_order`` and ``executor`` only change the
    schedule of the work, never the result.  ``rag_prev`` mode is inherently
    sequential and always runs blocks in canonical order.
    """
    cfg = model.config
    if schedule.T != cfg.T:
        raise ValueError(f"schedule has T={schedule.T} but the model was built for T={cfg.T}")
    layout = model_layout(model)
    n = config.n_samples
    if n < 1:
        raise ValueError("n_samples must be >= 1")
    shape = layout.block_shape

    query_rows = np.full(n, -1)
    neighbor_idx = np.zeros((n, 0), dtype=np.int64)
    nbrs = None  # (b, n, k, C, h, w)
    if cfg.cond_mode is not CondMode.NO_RAG:
        if db is None or db.n == 0:
            raise ValueError("sampling with retrieval needs a non-empty database")
        if db.layout != layout:
            raise ValueError(f"database layout {db.layout} does not match model layout {layout}")
        nbrs = np.empty((cfg.b, n, cfg.k) + shape)
        neighbor_idx = np.empty((n, cfg.k), dtype=np.int64)
        for s in range(n):
            q, j = pseudo_query(db, Rng(config.seed).split(s, 0))
            ns = query_knn(db, q, cfg.k)
            query_rows[s] = j
            neighbor_idx[s] = ns.indices
            for i in range(cfg.b):
                nbrs[i, s] = ns.block_tensor(layout, i)

    out = np.empty((cfg.b, n) + shape)
    if cfg.cond_mode is CondMode.RAG_PREV:
        prev = np.zeros((n,) + shape)
        for i in range(cfg.b):
            z_T, noises = _block_streams(config.seed, n, i, shape, schedule.T)
            rows = np.concatenate([nbrs[i], prev[:, None]], axis=1)
            out[i] = _run_block(model, schedule, i, z_T, noises, rows, config.noise_at_t1)
            prev = out[i]
    else:
        def work(i):
            z_T, noises = _block_streams(config.seed, n, i, shape, schedule.T)
            rows = None if nbrs is None else nbrs[i]
            return i, _run_block(model, schedule, i, z_T, noises, rows, config.noise_at_t1)

        order = list(range(cfg.b)) if block_order is None else list(block_order)
        if sorted(order) != list(range(cfg.b)):
            raise ValueError(f"block_order must be a permutation of 0..{cfg.b - 1}")
        results = map(work, order) if executor is None else executor.map(work, order)
        for i, z in results:
            out[i] = z

    latents = reassemble(layout, out.transpose(1, 0, 2, 3, 4))
    return SampleResult(latents, query_rows, neighbor_idx)


def sample(model: DenoiserModel, schedule: NoiseSchedule, db: RetrievalDB | None,
           codec: CodecModel, config: SampleConfig) -> list[np.ndarray]:
    """Generated images, decoded from block-wise sampled latents."""
    res = sample_latents(model, schedule, db, config)
    if tuple(codec.latent_shape) != res.latents.shape[1:]:
        raise ValueError(f"codec latent shape {codec.latent_shape} != sampled {res.latents.shape[1:]}")
    return list(decode(codec, res.latents))
