"""Command-line entry point: ``rissole <command> --run-dir DIR [--config F] [--set K=V ...]``.

Every command reads and writes only inside the run directory:

    gen-data     data/images.rsslt
    train-codec  codec/
    build-db     db/  (shards, manifest, latents.rsslt)
    train        model/, train_report.tsv
    sample       samples/sample_NNN.rsslt + .pgm/.ppm previews
    eval         eval_report.tsv
    ablate       ablation_<suite>.tsv

Wall-clock timings go to ``timings.tsv`` so that the other artifacts are
byte-reproducible.
"""
from __future__ import annotations

import argparse
import logging
import sys
import time
from pathlib import Path

import numpy as np

from .blocks import BlockLayout
from .codec import encode, load_codec, save_codec, train_codec
from .config import ConfigError, RunConfig, parse_config
from .denoiser import init_denoiser, load_denoiser, save_denoiser
from .eval import AblationRecord, denoiser_config, frechet_proxy, gen_toy_dataset, run_ablation, write_report
from .retrieval import QueryMode, build_database, load_database, save_database
from .sampler import sample
from .schedule import build_schedule
from .tensor import Rng, load_tensor, save_tensor
from .trainer import train

log = logging.getLogger("rissole")

COMMANDS = ("gen-data", "train-codec", "build-db", "train", "sample", "eval", "ablate")


class MissingArtifact(RuntimeError):
    def __init__(self, path: Path, producer: str):
        super().__init__(f"missing artifact {path} (produced by `rissole {producer}`)")


def _need(path: Path, producer: str) -> Path:
    if not path.exists():
        raise MissingArtifact(path, producer)
    return path


def _record_time(run_dir: Path, command: str, seconds: float) -> None:
    with open(run_dir / "timings.tsv", "a", encoding="utf-8") as fh:
        fh.write(f"{command}\t{seconds:.3f}\n")


def _last_time(run_dir: Path, command: str) -> float:
    """Most recent wall time recorded for ``command`` (0 if never timed)."""
    path = run_dir / "timings.tsv"
    found = 0.0
    if path.exists():
        for line in path.read_text(encoding="utf-8").splitlines():
            name, _, secs = line.partition("\t")
            if name == command:
                found = float(secs)
    return found


def _load_images(run_dir: Path) -> np.ndarray:
    return load_tensor(_need(run_dir / "data" / "images.rsslt", "gen-data"))


def _load_codec(run_dir: Path):
    _need(run_dir / "codec" / "manifest.txt", "train-codec")
    return load_codec(run_dir / "codec")


def _load_db(run_dir: Path):
    _need(run_dir / "db" / "manifest.txt", "build-db")
    return load_database(run_dir / "db")


def cmd_gen_data(cfg: RunConfig, run_dir: Path) -> None:
    images = gen_toy_dataset(cfg.toy_spec())
    (run_dir / "data").mkdir(exist_ok=True)
    save_tensor(run_dir / "data" / "images.rsslt", np.stack(images))


def cmd_train_codec(cfg: RunConfig, run_dir: Path) -> None:
    images = _load_images(run_dir)
    codec = train_codec(list(images), cfg.codec_config(), Rng(cfg["data.seed"]))
    save_codec(codec, run_dir / "codec")


def cmd_build_db(cfg: RunConfig, run_dir: Path) -> None:
    images = _load_images(run_dir)
    codec = _load_codec(run_dir)
    latents = encode(codec, images)
    layout = BlockLayout(cfg["blocks.b"], *codec.latent_shape)
    db = build_database(latents, layout, QueryMode(cfg["retrieval.query_mode"]))
    save_database(db, run_dir / "db")
    save_tensor(run_dir / "db" / "latents.rsslt", latents)


def cmd_train(cfg: RunConfig, run_dir: Path) -> None:
    db = _load_db(run_dir)
    latents = load_tensor(_need(run_dir / "db" / "latents.rsslt", "build-db"))
    exp = cfg.experiment()
    schedule = build_schedule(exp.T, exp.beta_start, exp.beta_end)
    model = init_denoiser(denoiser_config(exp, db.layout), Rng(cfg["train.seed"]).split(99))
    report = train(model, schedule, db, latents, cfg.train_config())
    save_denoiser(model, run_dir / "model")
    report.checkpoint_path = str(run_dir / "model")
    lines = ["# epoch\tmean_loss"] + [f"{i + 1}\t{v:.10g}" for i, v in enumerate(report.epoch_losses)]
    (run_dir / "train_report.tsv").write_text("\n".join(lines) + "\n", encoding="utf-8")
    _record_time(run_dir, "train.loop", report.wall_time)


def write_preview(path: Path, image: np.ndarray) -> None:
    """8-bit binary PGM (1 channel) or PPM (3 channels), min-max normalized."""
    lo, hi = float(image.min()), float(image.max())
    scaled = np.zeros_like(image) if hi <= lo else (image - lo) / (hi - lo)
    pix = np.round(scaled * 255).astype(np.uint8)
    c, h, w = pix.shape
    if c == 1:
        path.with_suffix(".pgm").write_bytes(f"P5\n{w} {h}\n255\n".encode() + pix[0].tobytes())
    elif c == 3:
        path.with_suffix(".ppm").write_bytes(
            f"P6\n{w} {h}\n255\n".encode() + pix.transpose(1, 2, 0).tobytes())
    else:
        log.warning("no preview for %d-channel image %s", c, path.name)


def cmd_sample(cfg: RunConfig, run_dir: Path) -> None:
    _need(run_dir / "model" / "manifest.txt", "train")
    model = load_denoiser(run_dir / "model")
    codec = _load_codec(run_dir)
    db = _load_db(run_dir)
    schedule = build_schedule(cfg["schedule.T"], cfg["schedule.beta_start"], cfg["schedule.beta_end"])
    if model.config.b != db.b:
        raise ConfigError(f"model was trained with b={model.config.b} but the database has b={db.b}")
    images = sample(model, schedule, db, codec, cfg.sample_config())
    out = run_dir / "samples"
    out.mkdir(exist_ok=True)
    for j, img in enumerate(images):
        save_tensor(out / f"sample_{j:03d}.rsslt", img)
        write_preview(out / f"sample_{j:03d}", img)


def cmd_eval(cfg: RunConfig, run_dir: Path) -> None:
    real = _load_images(run_dir)
    codec = _load_codec(run_dir)
    sample_dir = run_dir / "samples"
    files = sorted(sample_dir.glob("sample_*.rsslt")) if sample_dir.exists() else []
    if not files:
        raise MissingArtifact(sample_dir / "sample_000.rsslt", "sample")
    fake = [load_tensor(f) for f in files]
    model = load_denoiser(_need(run_dir / "model", "train"))
    score = frechet_proxy(list(real), fake, codec)
    name = model.config.cond_mode.value + ("+pos" if model.config.pos_enabled else "")
    seconds = _last_time(run_dir, "train") + _last_time(run_dir, "sample")
    write_report(run_dir / "eval_report.tsv", [AblationRecord(name, score, seconds, model.param_count())])


def cmd_ablate(cfg: RunConfig, run_dir: Path) -> None:
    suite = cfg["eval.suite"]
    run_ablation(suite, cfg.experiment(), run_dir / f"ablation_{suite}.tsv")


HANDLERS = {
    "gen-data": cmd_gen_data,
    "train-codec": cmd_train_codec,
    "build-db": cmd_build_db,
    "train": cmd_train,
    "sample": cmd_sample,
    "eval": cmd_eval,
    "ablate": cmd_ablate,
}


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="rissole", description=__doc__.splitlines()[0])
    ap.add_argument("command", choices=COMMANDS)
    ap.add_argument("--config", type=Path, help="flat section.key = value file")
    ap.add_argument("--set", dest="overrides", action="append", default=[], metavar="K=V",
                    help="override one config key (repeatable)")
    ap.add_argument("--run-dir", type=Path, default=Path("runs/default"))
    ap.add_argument("--seed", type=int, help="shorthand for data.seed, train.seed and sampler.seed")
    ap.add_argument("-v", "--verbose", action="store_true")
    return ap


def dispatch(command: str, cfg: RunConfig, run_dir: Path) -> int:
    run_dir.mkdir(parents=True, exist_ok=True)
    (run_dir / "resolved.cfg").write_text(cfg.dump(), encoding="utf-8")
    start = time.perf_counter()
    HANDLERS[command](cfg, run_dir)
    _record_time(run_dir, command, time.perf_counter() - start)
    return 0


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    overrides = list(args.overrides)
    if args.seed is not None:
        overrides += [f"{k}={args.seed}" for k in ("data.seed", "train.seed", "sampler.seed")]
    try:
        cfg = parse_config(args.config, overrides)
        return dispatch(args.command, cfg, args.run_dir)
    except (ValueError, RuntimeError, FileNotFoundError) as exc:
        print(f"rissole {args.command}: error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
