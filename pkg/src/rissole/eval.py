"""Toy datasets, the Fréchet proxy metric and the ablation harness."""
from __future__ import annotations

import enum
import logging
import time
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .blocks import BlockLayout
from .codec import CodecConfig, CodecModel, encode, train_codec
from .denoiser import CondMode, DenoiserConfig, init_denoiser
from .retrieval import QueryMode, build_database
from .sampler import SampleConfig, sample
from .schedule import build_schedule
from .tensor import Rng
from .trainer import TrainConfig, train

log = logging.getLogger(__name__)

RIDGE = 1e-6


class Pattern(str, enum.Enum):
    DISCS = "discs"
    GRADIENTS = "gradients"
    STRIPES = "stripes"


@dataclass
class ToySpec:
    n: int = 256
    c: int = 1
    h: int = 12
    w: int = 12
    pattern: Pattern = Pattern.DISCS
    radius: tuple[float, float] = (2.5, 4.5)
    background: tuple[float, float] = (0.0, 0.2)
    foreground: tuple[float, float] = (0.7, 1.0)
    seed: int = 0

    def __post_init__(self):
        self.pattern = Pattern(self.pattern)
        lo, hi = self.radius
        if self.n < 1 or min(self.c, self.h, self.w) < 1 or not 0 <= lo <= hi:
            raise ValueError(f"invalid toy dataset spec {self}")
        for lo, hi in (self.background, self.foreground):
            if not 0.0 <= lo <= hi <= 1.0:
                raise ValueError("intensity ranges must lie within [0, 1]")


def disc_mask(h: int, w: int, cy: float, cx: float, r: float) -> np.ndarray:
    """Pixels whose centers lie strictly inside the circle."""
    yy, xx = np.mgrid[0:h, 0:w] + 0.5
    return (yy - cy) ** 2 + (xx - cx) ** 2 < r * r


def gen_toy_dataset(spec: ToySpec, with_params: bool = False):
    """Deterministic synthetic images with values in [0, 1].

    Discs are placed anywhere in the frame so most of them straddle block
    boundaries.  ``with_params`` also returns the per-image generation
    parameters (used by tests).
    """
    rng = Rng(spec.seed)
    images, params = [], []
    for j in range(spec.n):
        r = rng.split(j)
        if spec.pattern is Pattern.DISCS:
            rad = r.uniform(*spec.radius)
            cy, cx = r.uniform(0.0, spec.h), r.uniform(0.0, spec.w)
            bg = r.uniform(*spec.background, size=spec.c)
            fg = r.uniform(*spec.foreground, size=spec.c)
            mask = disc_mask(spec.h, spec.w, cy, cx, rad)
            img = np.where(mask[None], fg[:, None, None], bg[:, None, None])
            params.append({"cy": cy, "cx": cx, "r": rad, "bg": bg, "fg": fg})
        elif spec.pattern is Pattern.GRADIENTS:
            theta = r.uniform(0.0, 2 * np.pi)
            yy, xx = np.mgrid[0:spec.h, 0:spec.w] + 0.5
            proj = (xx - spec.w / 2) * np.cos(theta) + (yy - spec.h / 2) * np.sin(theta)
            ramp = (proj - proj.min()) / max(np.ptp(proj), 1e-12)
            lo, hi = r.uniform(*spec.background), r.uniform(*spec.foreground)
            img = np.broadcast_to(lo + (hi - lo) * ramp, (spec.c, spec.h, spec.w)).copy()
            params.append({"theta": theta})
        else:
            theta = r.uniform(0.0, np.pi)
            period = r.uniform(3.0, max(3.0, spec.h / 2))
            phase = r.uniform(0.0, 2 * np.pi)
            yy, xx = np.mgrid[0:spec.h, 0:spec.w] + 0.5
            proj = xx * np.cos(theta) + yy * np.sin(theta)
            wave = 0.5 + 0.5 * np.sin(2 * np.pi * proj / period + phase)
            img = np.broadcast_to(wave, (spec.c, spec.h, spec.w)).copy()
            params.append({"theta": theta, "period": period, "phase": phase})
        images.append(img.astype(np.float64))
    return (images, params) if with_params else images


# ---------------------------------------------------------------------------
# Fréchet distance

@dataclass
class FrechetStats:
    mu: np.ndarray
    sigma: np.ndarray


def sqrtm_psd(m: np.ndarray) -> np.ndarray:
    """Symmetric square root of a symmetric PSD matrix (negative eigenvalues clipped)."""
    m = 0.5 * (m + m.T)
    vals, vecs = np.linalg.eigh(m)
    return (vecs * np.sqrt(np.clip(vals, 0.0, None))) @ vecs.T


def fit_stats(features: np.ndarray, ridge: float = RIDGE) -> FrechetStats:
    x = np.asarray(features, dtype=np.float64)
    if x.ndim == 1:
        x = x[:, None]
    mu = x.mean(axis=0)
    sigma = np.atleast_2d(np.cov(x, rowvar=False)) + ridge * np.eye(x.shape[1])
    return FrechetStats(mu, 0.5 * (sigma + sigma.T))


def _trace_sqrt_product(a: FrechetStats, b: FrechetStats) -> float:
    ra = sqrtm_psd(a.sigma)
    inner = ra @ b.sigma @ ra
    vals = np.linalg.eigvalsh(0.5 * (inner + inner.T))
    return float(np.sqrt(np.clip(vals, 0.0, None)).sum())


def frechet_from_stats(a: FrechetStats, b: FrechetStats) -> float:
    """``|mu_a - mu_b|^2 + Tr(S_a + S_b - 2 (S_a S_b)^(1/2))``.

    The trace of the product root is evaluated in both orders and averaged,
    which makes the result exactly symmetric in its arguments.
    """
    d = a.mu - b.mu
    cross = 0.5 * (_trace_sqrt_product(a, b) + _trace_sqrt_product(b, a))
    traces = float(np.trace(a.sigma)) + float(np.trace(b.sigma))  # commutative, unlike a chain
    value = float(d @ d) + traces - 2.0 * cross
    return max(value, 0.0)


def frechet_distance(feats_a: np.ndarray, feats_b: np.ndarray, ridge: float = RIDGE) -> float:
    feats_a = np.asarray(feats_a, dtype=np.float64).reshape(len(feats_a), -1)
    feats_b = np.asarray(feats_b, dtype=np.float64).reshape(len(feats_b), -1)
    dim = feats_a.shape[1]
    if feats_b.shape[1] != dim:
        raise ValueError(f"feature dims differ: {dim} vs {feats_b.shape[1]}")
    need = dim + 1
    if len(feats_a) < need or len(feats_b) < need:
        raise ValueError(
            f"need at least {need} samples per set for {dim}-dim features, "
            f"got {len(feats_a)} and {len(feats_b)}"
        )
    return frechet_from_stats(fit_stats(feats_a, ridge), fit_stats(feats_b, ridge))


def frechet_proxy(real, fake, codec: CodecModel, ridge: float = RIDGE) -> float:
    """Fréchet distance between codec-latent features of two image sets."""
    fr = encode(codec, np.stack(list(real))).reshape(len(real), -1)
    ff = encode(codec, np.stack(list(fake))).reshape(len(fake), -1)
    return frechet_distance(fr, ff, ridge)


# ---------------------------------------------------------------------------
# experiments

class Suite(str, enum.Enum):
    RAG_VS_NO_RAG = "rag_vs_norag"
    POS_VS_NO_POS = "pos_vs_nopos"
    PREV_VS_NO_PREV = "prev_vs_noprev"
    QUERY_Z_VS_Z0 = "query_z_vs_z0"
    B_SWEEP = "b_sweep"


@dataclass
class ExperimentConfig:
    toy: ToySpec = field(default_factory=ToySpec)
    codec: CodecConfig = field(default_factory=CodecConfig)
    codec_seed: int = 0
    b: int = 4
    k: int = 5
    T: int = 100
    beta_start: float = 1e-3
    beta_end: float = 0.2
    query_mode: QueryMode = QueryMode.FIRST_BLOCK
    width: int = 32
    n_res: int = 2
    d_t: int = 32
    cond_mode: CondMode = CondMode.RAG
    pos_enabled: bool = False
    train: TrainConfig = field(default_factory=TrainConfig)
    sample: SampleConfig = field(default_factory=SampleConfig)

    def with_seeds(self, data_seed: int, train_seed: int, sample_seed: int) -> "ExperimentConfig":
        return replace(self, toy=replace(self.toy, seed=data_seed), codec_seed=data_seed,
                       train=replace(self.train, seed=train_seed),
                       sample=replace(self.sample, seed=sample_seed))


@dataclass
class AblationRecord:
    variant: str
    score: float
    seconds: float
    param_count: int

    def line(self) -> str:
        return f"{self.variant}\t{self.score:.6f}\t{self.seconds:.3f}\t{self.param_count}"


@dataclass
class Prepared:
    images: list[np.ndarray]
    codec: CodecModel
    latents: np.ndarray


def prepare(exp: ExperimentConfig) -> Prepared:
    images = gen_toy_dataset(exp.toy)
    codec = train_codec(images, exp.codec, Rng(exp.codec_seed))
    return Prepared(images, codec, encode(codec, np.stack(images)))


def denoiser_config(exp: ExperimentConfig, layout: BlockLayout) -> DenoiserConfig:
    return DenoiserConfig(
        channels=layout.channels, block_h=layout.block_h, block_w=layout.block_w, b=layout.b,
        k=exp.k, T=exp.T, width=exp.width, n_res=exp.n_res, d_t=exp.d_t,
        cond_mode=exp.cond_mode, pos_enabled=exp.pos_enabled,
    )


def run_variant(name: str, exp: ExperimentConfig, prep: Prepared) -> AblationRecord:
    """Train, sample and score one configuration on prepared data."""
    start = time.perf_counter()
    c, h, w = prep.codec.latent_shape
    layout = BlockLayout(exp.b, c, h, w)
    db = build_database(prep.latents, layout, exp.query_mode)
    schedule = build_schedule(exp.T, exp.beta_start, exp.beta_end)
    model = init_denoiser(denoiser_config(exp, layout), Rng(exp.train.seed).split(99))
    train(model, schedule, db, prep.latents, exp.train)
    fake = sample(model, schedule, db, prep.codec, exp.sample)
    score = frechet_proxy(prep.images, fake, prep.codec)
    seconds = time.perf_counter() - start
    log.info("%s: score %.6f (%.1fs, %d params)", name, score, seconds, model.param_count())
    return AblationRecord(name, score, seconds, model.param_count())


def suite_variants(suite: Suite, base: ExperimentConfig) -> list[tuple[str, ExperimentConfig]]:
    suite = Suite(suite)
    rag = replace(base, cond_mode=CondMode.RAG, pos_enabled=False)
    if suite is Suite.RAG_VS_NO_RAG:
        return [("rissole", rag), ("rissole-rag", replace(rag, cond_mode=CondMode.NO_RAG))]
    if suite is Suite.POS_VS_NO_POS:
        return [("rissole", rag), ("rissole+pos", replace(rag, pos_enabled=True))]
    if suite is Suite.PREV_VS_NO_PREV:
        return [("rissole", rag), ("rissole+prev", replace(rag, cond_mode=CondMode.RAG_PREV))]
    if suite is Suite.QUERY_Z_VS_Z0:
        return [("query_z0", replace(rag, query_mode=QueryMode.FIRST_BLOCK)),
                ("query_z", replace(rag, query_mode=QueryMode.FULL_LATENT))]
    return [(f"b={b}", replace(rag, b=b)) for b in (4, 9, 16)]


def run_ablation(suite: Suite, base: ExperimentConfig, report_path=None,
                 prepared: Prepared | None = None) -> list[AblationRecord]:
    """Train every variant of ``suite`` from the same seeds and score it."""
    prep = prepared if prepared is not None else prepare(base)
    records = [run_variant(name, exp, prep) for name, exp in suite_variants(suite, base)]
    if report_path is not None:
        write_report(report_path, records)
    return records


def write_report(path, records: list[AblationRecord]) -> None:
    lines = [f"# variant\tscore\tseconds\tparam_count\tridge={RIDGE:g}"]
    lines += [r.line() for r in records]
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def read_report(path) -> list[AblationRecord]:
    out = []
    for line in Path(path).read_text(encoding="utf-8").splitlines():
        if not line or line.startswith("#"):
            continue
        name, score, secs, count = line.split("\t")
        out.append(AblationRecord(name, float(score), float(secs), int(count)))
    return out
