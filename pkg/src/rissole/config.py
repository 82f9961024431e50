"""Flat ``section.key = value`` run configuration."""
from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path

from .codec import CodecConfig
from .denoiser import CondMode
from .eval import ExperimentConfig, Pattern, Suite, ToySpec
from .retrieval import QueryMode
from .sampler import SampleConfig
from .trainer import TrainConfig


class ConfigError(ValueError):
    pass


DEFAULTS: dict[str, object] = {
    "data.n": 256,
    "data.c": 1,
    "data.h": 12,
    "data.w": 12,
    "data.pattern": "discs",
    "data.radius_min": 2.5,
    "data.radius_max": 4.5,
    "data.seed": 0,
    "codec.f": 2,
    "codec.c_latent": 4,
    "codec.epochs": 2000,
    "codec.step": 0.5,
    "codec.unit_latents": True,
    "schedule.T": 100,
    "schedule.beta_start": 1e-3,
    "schedule.beta_end": 0.2,
    "blocks.b": 4,
    "retrieval.k": 5,
    "retrieval.query_mode": "first_block",
    "retrieval.exclude_self": True,
    "model.R": 2,
    "model.d_t": 32,
    "model.width": 32,
    "model.cond_mode": "rag",
    "model.pos_enabled": False,
    "train.epochs": 60,
    "train.step": 1e-3,
    "train.batch": 1,
    "train.seed": 0,
    "sampler.n_samples": 256,
    "sampler.noise_at_t1": False,
    "sampler.seed": 0,
    "eval.suite": "rag_vs_norag",
}

CHOICES = {
    "data.pattern": [p.value for p in Pattern],
    "retrieval.query_mode": [q.value for q in QueryMode],
    "model.cond_mode": [m.value for m in CondMode],
    "eval.suite": [s.value for s in Suite],
}


def _coerce(key: str, raw: str, where: str):
    default = DEFAULTS[key]
    raw = raw.strip()
    try:
        if isinstance(default, bool):
            low = raw.lower()
            if low in ("true", "1", "yes", "on"):
                return True
            if low in ("false", "0", "no", "off"):
                return False
            raise ValueError(raw)
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, float):
            return float(raw)
    except ValueError:
        raise ConfigError(f"{where}: cannot parse {raw!r} as {type(default).__name__} for key {key}") from None
    if key in CHOICES and raw not in CHOICES[key]:
        raise ConfigError(f"{where}: {key} must be one of {CHOICES[key]}, got {raw!r}")
    return raw


@dataclass
class RunConfig:
    values: dict[str, object]

    def __getitem__(self, key: str):
        return self.values[key]

    def dump(self) -> str:
        return "".join(f"{k} = {_fmt(v)}\n" for k, v in self.values.items())

    # -- typed views ---------------------------------------------------------
    def toy_spec(self) -> ToySpec:
        v = self.values
        return ToySpec(n=v["data.n"], c=v["data.c"], h=v["data.h"], w=v["data.w"],
                       pattern=Pattern(v["data.pattern"]),
                       radius=(v["data.radius_min"], v["data.radius_max"]), seed=v["data.seed"])

    def codec_config(self) -> CodecConfig:
        v = self.values
        return CodecConfig(f=v["codec.f"], c_latent=v["codec.c_latent"], epochs=v["codec.epochs"],
                           step=v["codec.step"], unit_latents=v["codec.unit_latents"])

    def train_config(self) -> TrainConfig:
        v = self.values
        return TrainConfig(epochs=v["train.epochs"], batch=v["train.batch"], step=v["train.step"],
                           exclude_self=v["retrieval.exclude_self"], seed=v["train.seed"])

    def sample_config(self) -> SampleConfig:
        v = self.values
        return SampleConfig(n_samples=v["sampler.n_samples"], seed=v["sampler.seed"],
                            noise_at_t1=v["sampler.noise_at_t1"])

    def experiment(self) -> ExperimentConfig:
        v = self.values
        return ExperimentConfig(
            toy=self.toy_spec(), codec=self.codec_config(), codec_seed=v["data.seed"],
            b=v["blocks.b"], k=v["retrieval.k"], T=v["schedule.T"],
            beta_start=v["schedule.beta_start"], beta_end=v["schedule.beta_end"],
            query_mode=QueryMode(v["retrieval.query_mode"]), width=v["model.width"],
            n_res=v["model.R"], d_t=v["model.d_t"], cond_mode=CondMode(v["model.cond_mode"]),
            pos_enabled=v["model.pos_enabled"], train=self.train_config(),
            sample=self.sample_config(),
        )


def _fmt(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    return repr(v) if isinstance(v, float) else str(v)


def parse_config(path=None, overrides=(), text: str | None = None) -> RunConfig:
    """Defaults, then the file (or ``text``), then ``key=value`` overrides."""
    values = dict(DEFAULTS)
    if path is not None:
        text = Path(path).read_text(encoding="utf-8")
        source = str(path)
    else:
        source = "<config>"
    for lineno, raw in enumerate((text or "").splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        where = f"{source}:{lineno}"
        if "=" not in line:
            raise ConfigError(f"{where}: expected 'section.key = value', got {raw.strip()!r}")
        key, _, value = line.partition("=")
        key = key.strip()
        if key not in DEFAULTS:
            raise ConfigError(f"{where}: unknown key {key!r}")
        values[key] = _coerce(key, value, where)
    for i, item in enumerate(overrides, start=1):
        if "=" not in item:
            raise ConfigError(f"--set #{i}: expected KEY=VALUE, got {item!r}")
        key, _, value = item.partition("=")
        key = key.strip()
        if key not in DEFAULTS:
            raise ConfigError(f"--set #{i}: unknown key {key!r}")
        values[key] = _coerce(key, value, f"--set {key}")
    cfg = RunConfig(values)
    validate(cfg)
    return cfg


def validate(cfg: RunConfig) -> None:
    v = cfg.values
    b = v["blocks.b"]
    g = math.isqrt(b) if b > 0 else 0
    if b < 1 or g * g != b:
        raise ConfigError(f"blocks.b = {b} violates the constraint: b must be a perfect square (1, 4, 9, 16, ...)")
    f = v["codec.f"]
    for side in ("h", "w"):
        if v[f"data.{side}"] % f:
            raise ConfigError(f"data.{side} = {v[f'data.{side}']} must be divisible by codec.f = {f}")
        lat = v[f"data.{side}"] // f
        if lat % g:
            raise ConfigError(
                f"latent {side} = {lat} (data.{side} / codec.f) must be divisible by the grid side sqrt(blocks.b) = {g}"
            )
    positive = ["data.n", "data.c", "data.h", "data.w", "codec.f", "codec.c_latent", "schedule.T",
                "model.width", "model.d_t", "train.batch", "sampler.n_samples"]
    for key in positive:
        if v[key] < 1:
            raise ConfigError(f"{key} = {v[key]} must be positive")
    for key in ("codec.epochs", "model.R", "train.epochs", "data.seed", "train.seed", "sampler.seed"):
        if v[key] < 0:
            raise ConfigError(f"{key} = {v[key]} must be non-negative")
    if v["model.d_t"] % 2:
        raise ConfigError(f"model.d_t = {v['model.d_t']} must be even")
    if v["model.width"] < v["codec.c_latent"]:
        raise ConfigError("model.width must be >= codec.c_latent")
    if v["retrieval.k"] < 1 and v["model.cond_mode"] != CondMode.NO_RAG.value:
        raise ConfigError("retrieval.k must be >= 1 unless model.cond_mode = no_rag")
    if not 0 < v["schedule.beta_start"] <= v["schedule.beta_end"] < 1:
        raise ConfigError("need 0 < schedule.beta_start <= schedule.beta_end < 1")
    if not 0 <= v["data.radius_min"] <= v["data.radius_max"]:
        raise ConfigError("need 0 <= data.radius_min <= data.radius_max")
    if v["train.step"] < 0 or v["codec.step"] <= 0:
        raise ConfigError("step sizes must be positive (train.step may be 0)")
