"""Linear patch autoencoder used as the image <-> latent codec.

Each non-overlapping f×f patch (all c channels) is mapped affinely to a
c'-vector, which keeps the latent on a 2-D grid of size h/f × w/f.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .manifest import read_manifest, write_manifest
from .tensor import Rng, load_tensor, save_tensor

log = logging.getLogger(__name__)


@dataclass
class CodecModel:
    f: int
    c: int
    c_latent: int
    h: int
    w: int
    enc_w: np.ndarray  # c' × (c·f·f)
    enc_b: np.ndarray  # c'
    dec_w: np.ndarray  # (c·f·f) × c'
    dec_b: np.ndarray  # c·f·f
    losses: list[float] = field(default_factory=list)

    def __post_init__(self):
        if self.h % self.f or self.w % self.f:
            raise ValueError(f"image {self.h}x{self.w} not divisible by f={self.f}")

    @property
    def patch_dim(self) -> int:
        return self.c * self.f * self.f

    @property
    def image_shape(self) -> tuple[int, int, int]:
        return (self.c, self.h, self.w)

    @property
    def latent_shape(self) -> tuple[int, int, int]:
        return (self.c_latent, self.h // self.f, self.w // self.f)

    @property
    def final_loss(self) -> float:
        return self.losses[-1] if self.losses else float("nan")

    @classmethod
    def identity(cls, c: int, h: int, w: int) -> "CodecModel":
        eye = np.eye(c)
        return cls(1, c, c, h, w, eye.copy(), np.zeros(c), eye.copy(), np.zeros(c))


@dataclass
class CodecConfig:
    f: int = 2
    c_latent: int = 4
    epochs: int = 2000
    step: float = 0.5  # fraction of the stability bound, see train_codec
    unit_latents: bool = False


def to_patches(x: np.ndarray, f: int) -> np.ndarray:
    """``(N, c, h, w)`` -> ``(N, h/f, w/f, c·f·f)``."""
    n, c, h, w = x.shape
    v = x.reshape(n, c, h // f, f, w // f, f)
    return v.transpose(0, 2, 4, 1, 3, 5).reshape(n, h // f, w // f, c * f * f)


def from_patches(p: np.ndarray, c: int, f: int) -> np.ndarray:
    n, hh, ww, _ = p.shape
    v = p.reshape(n, hh, ww, c, f, f)
    return np.ascontiguousarray(v.transpose(0, 3, 1, 4, 2, 5)).reshape(n, c, hh * f, ww * f)


def _batched(x: np.ndarray, shape: tuple[int, int, int], what: str) -> tuple[np.ndarray, bool]:
    x = np.asarray(x, dtype=np.float64)
    if x.shape == shape:
        return x[None], True
    if x.ndim == 4 and x.shape[1:] == shape:
        return x, False
    raise ValueError(f"{what} shape {x.shape} does not match expected {shape}")


def encode(model: CodecModel, x: np.ndarray) -> np.ndarray:
    xb, single = _batched(x, model.image_shape, "image")
    z = to_patches(xb, model.f) @ model.enc_w.T + model.enc_b
    z = np.ascontiguousarray(z.transpose(0, 3, 1, 2))
    return z[0] if single else z


def decode(model: CodecModel, z: np.ndarray) -> np.ndarray:
    zb, single = _batched(z, model.latent_shape, "latent")
    p = zb.transpose(0, 2, 3, 1) @ model.dec_w.T + model.dec_b
    x = from_patches(p, model.c, model.f)
    return x[0] if single else x


def reconstruction_mse(model: CodecModel, data) -> float:
    x = np.stack(list(data))
    return float(np.mean((decode(model, encode(model, x)) - x) ** 2))


def train_codec(data, config: CodecConfig, rng: Rng) -> CodecModel:
    """Full-batch gradient descent on the mean squared reconstruction error.

    The step is ``config.step`` times ``d / λ_max``, where ``λ_max`` is the top
    eigenvalue of the bias-augmented patch second-moment matrix and ``d`` the
    patch dimension; this keeps the loss monotone for the tied initialization
    used here.
    """
    data = list(data)
    if not data:
        raise ValueError("train_codec needs a non-empty dataset")
    x = np.stack([np.asarray(im, dtype=np.float64) for im in data])
    if x.ndim != 4:
        raise ValueError(f"images must be c×h×w, got stacked shape {x.shape}")
    _, c, h, w = x.shape
    f, cl = config.f, config.c_latent
    if h % f or w % f:
        raise ValueError(f"image {h}x{w} not divisible by f={f}")

    P = to_patches(x, f).reshape(-1, c * f * f)
    m, d = P.shape
    aug = np.hstack([P, np.ones((m, 1))])
    lam = float(np.linalg.eigvalsh(aug.T @ aug / m)[-1])
    lr = config.step * d / max(lam, 1e-12)

    init = rng.normal((cl, d)) / np.sqrt(d)
    We, be = init, np.zeros(cl)
    Wd, bd = init.T.copy(), np.zeros(d)
    losses = []
    for _ in range(config.epochs):
        Z = P @ We.T + be
        E = Z @ Wd.T + bd - P
        losses.append(float(np.mean(E * E)))
        dR = 2.0 * E / (m * d)
        dWd = dR.T @ Z
        dbd = dR.sum(axis=0)
        dZ = dR @ Wd
        dWe = dZ.T @ P
        dbe = dZ.sum(axis=0)
        We -= lr * dWe
        be -= lr * dbe
        Wd -= lr * dWd
        bd -= lr * dbd
    Z = P @ We.T + be
    E = Z @ Wd.T + bd - P
    losses.append(float(np.mean(E * E)))
    if not np.isfinite(losses[-1]):
        raise FloatingPointError("codec training diverged; lower codec.step")
    log.info("codec trained: %d epochs, final mse %.3e", config.epochs, losses[-1])
    model = CodecModel(f, c, cl, h, w, We, be, Wd, bd, losses)
    return rescale_latents(model, x) if config.unit_latents else model


def rescale_latents(model: CodecModel, data) -> CodecModel:
    """Rescale encoder/decoder so latents of ``data`` have unit standard deviation.

    Reconstructions are unchanged; diffusion then works on unit-scale latents.
    """
    z = encode(model, np.stack(list(data)))
    s = float(z.std())
    if s <= 0:
        return model
    return CodecModel(model.f, model.c, model.c_latent, model.h, model.w,
                      model.enc_w / s, model.enc_b / s, model.dec_w * s, model.dec_b.copy(),
                      list(model.losses))


def save_codec(model: CodecModel, directory) -> None:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    for name in ("enc_w", "enc_b", "dec_w", "dec_b"):
        save_tensor(directory / f"{name}.rsslt", getattr(model, name))
    save_tensor(directory / "losses.rsslt", np.asarray(model.losses or [np.nan]))
    write_manifest(directory / "manifest.txt", {
        "f": model.f, "c": model.c, "c_latent": model.c_latent, "h": model.h, "w": model.w,
    })


def load_codec(directory) -> CodecModel:
    directory = Path(directory)
    man = read_manifest(directory / "manifest.txt")
    arrays = {n: load_tensor(directory / f"{n}.rsslt") for n in ("enc_w", "enc_b", "dec_w", "dec_b")}
    losses = [float(v) for v in load_tensor(directory / "losses.rsslt")]
    return CodecModel(int(man["f"]), int(man["c"]), int(man["c_latent"]), int(man["h"]),
                      int(man["w"]), losses=losses, **arrays)
