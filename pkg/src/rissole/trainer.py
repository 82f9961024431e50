"""Block-wise retrieval-conditioned training loop with plain SGD."""
from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field

import numpy as np

from .blocks import BlockLayout, partition_stack
from .denoiser import CondMode, DenoiserModel, Tape, backward, forward
from .retrieval import RetrievalDB, query_knn
from .schedule import NoiseSchedule, forward_diffuse_batch
from .tensor import Rng

log = logging.getLogger(__name__)


class TrainingDiverged(RuntimeError):
    pass


@dataclass
class TrainConfig:
    epochs: int = 20
    batch: int = 1
    step: float = 1e-3
    exclude_self: bool = True
    seed: int = 0

    def __post_init__(self):
        if self.epochs < 0 or self.batch < 1 or self.step < 0:
            raise ValueError(f"invalid training config {self}")


@dataclass
class TrainReport:
    epoch_losses: list[float] = field(default_factory=list)
    wall_time: float = 0.0
    checkpoint_path: str | None = None


def model_layout(model: DenoiserModel) -> BlockLayout:
    cfg = model.config
    g = int(round(cfg.b ** 0.5))
    return BlockLayout(cfg.b, cfg.channels, g * cfg.block_h, g * cfg.block_w)


def example_batch(model: DenoiserModel, schedule: NoiseSchedule, db: RetrievalDB | None,
                  z: np.ndarray, row_id: int | None, rng: Rng, exclude_self: bool = True):
    """Noisy blocks, targets, timesteps and conditioning rows for one latent.

    Retrieval happens once per latent; block ``i`` draws ``(t, eps)`` from
    its own stream ``rng.split(i)``.
    """
    cfg = model.config
    layout = model_layout(model)
    blocks = partition_stack(layout, z)
    nbrs = None
    if cfg.cond_mode is not CondMode.NO_RAG:
        if db is None or db.n == 0:
            raise ValueError(f"{cfg.cond_mode.value} training needs a non-empty retrieval database")
        ns = query_knn(db, db.query_vector(z), cfg.k, exclude=row_id if exclude_self else None)
        nbrs = np.stack([ns.block_tensor(layout, i) for i in range(cfg.b)])
        if cfg.cond_mode is CondMode.RAG_PREV:
            prev = np.concatenate([np.zeros((1,) + layout.block_shape), blocks[:-1]])
            nbrs = np.concatenate([nbrs, prev[:, None]], axis=1)
    t = np.empty(cfg.b, dtype=np.int64)
    eps = np.empty_like(blocks)
    for i in range(cfg.b):
        r = rng.split(i)
        t[i] = r.integers(1, schedule.T + 1)
        eps[i] = r.normal(layout.block_shape)
    zt = forward_diffuse_batch(schedule, blocks, t, eps)
    return zt, eps, t, nbrs


def _block_loss(model, zt, eps, t, nbrs, idx):
    sl = slice(idx, idx + 1)
    tape = Tape()
    out = forward(model, zt[sl], t[sl], None if nbrs is None else nbrs[sl], np.array([idx]), tape)
    diff = out - eps[sl]
    return float(np.sum(diff * diff)), backward(model, tape, 2.0 * diff)


def block_gradients(model, schedule, db, z, row_id, rng, exclude_self=True, executor=None):
    """Per-block ``(loss, grads)`` pairs computed independently of each other."""
    zt, eps, t, nbrs = example_batch(model, schedule, db, z, row_id, rng, exclude_self)
    idx = range(model.config.b)
    if executor is None:
        return [_block_loss(model, zt, eps, t, nbrs, i) for i in idx]
    return list(executor.map(lambda i: _block_loss(model, zt, eps, t, nbrs, i), idx))


def loss_for_example(model: DenoiserModel, schedule: NoiseSchedule, db: RetrievalDB | None,
                     z: np.ndarray, row_id: int | None, rng: Rng, exclude_self: bool = True):
    """Summed squared noise-prediction error over all blocks of ``z`` and its gradients."""
    zt, eps, t, nbrs = example_batch(model, schedule, db, z, row_id, rng, exclude_self)
    tape = Tape()
    out = forward(model, zt, t, nbrs, np.arange(model.config.b), tape)
    diff = out - eps
    return float(np.sum(diff * diff)), backward(model, tape, 2.0 * diff)


def loss_for_batch(model: DenoiserModel, schedule: NoiseSchedule, db: RetrievalDB | None,
                   latents: np.ndarray, row_ids, rngs, exclude_self: bool = True):
    """Per-example losses and the summed gradient for several latents in one pass."""
    parts = [example_batch(model, schedule, db, z, r, rng, exclude_self)
             for z, r, rng in zip(latents, row_ids, rngs)]
    zt = np.concatenate([p[0] for p in parts])
    eps = np.concatenate([p[1] for p in parts])
    t = np.concatenate([p[2] for p in parts])
    nbrs = None if parts[0][3] is None else np.concatenate([p[3] for p in parts])
    b = model.config.b
    tape = Tape()
    out = forward(model, zt, t, nbrs, np.tile(np.arange(b), len(parts)), tape)
    diff = out - eps
    per_example = np.sum((diff * diff).reshape(len(parts), -1), axis=1)
    return per_example, backward(model, tape, 2.0 * diff)


def sgd_step(model: DenoiserModel, grads: dict[str, np.ndarray], step: float) -> None:
    for name, g in grads.items():
        model.params[name] -= step * g


def train(model: DenoiserModel, schedule: NoiseSchedule, db: RetrievalDB | None, latents,
          config: TrainConfig, progress=None) -> TrainReport:
    """SGD over shuffled examples; mini-batch gradients are averaged.

    ``latents[j]`` is assumed to be database row ``j`` (used for self-exclusion)
    whenever the database has exactly as many rows as there are latents.
    """
    latents = np.asarray(latents, dtype=np.float64)
    n = latents.shape[0]
    same_rows = db is not None and db.n == n
    root = Rng(config.seed)
    report = TrainReport()
    start = time.perf_counter()
    for epoch in range(config.epochs):
        order = root.split(0, epoch).permutation(n)
        total = 0.0
        for s in range(0, n, config.batch):
            idxs = [int(j) for j in order[s:s + config.batch]]
            losses, grads = loss_for_batch(
                model, schedule, db, latents[idxs], [j if same_rows else None for j in idxs],
                [root.split(1, epoch, j) for j in idxs], config.exclude_self)
            if not np.all(np.isfinite(losses)):
                raise TrainingDiverged(
                    f"non-finite loss at epoch {epoch + 1}, examples {idxs}; lower train.step "
                    f"(currently {config.step})"
                )
            total += float(losses.sum())
            sgd_step(model, {k: v / len(idxs) for k, v in grads.items()}, config.step)
        report.epoch_losses.append(total / max(n, 1))
        log.info("epoch %d/%d  loss %.5f", epoch + 1, config.epochs, report.epoch_losses[-1])
        if progress is not None:
            progress(epoch, report.epoch_losses[-1])
    report.wall_time = time.perf_counter() - start
    return report
