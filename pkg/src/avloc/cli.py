"""``avloc`` command line: gen-data, train, eval, infer, ablate.

Exit codes: 0 success, 1 usage error, 2 data error, 3 numerical failure.
"""

from __future__ import annotations

import argparse
import csv
import json
import os
import sys
from pathlib import Path

import numpy as np
import tomli
from PIL import Image

from . import metrics
from .checkpoint import load_checkpoint
from .config import RunConfig, load_config, save_config
from .encoders import make_spectrogram, read_pcm16
from .evaluate import MAP_NAMES, evaluate_model, predict_maps
from .model import LocalizationModel
from .recursion import FinalMapWeights
from .synthdata import SAMPLE_RATE, generate_split, read_split, write_split
from .train import train

OUT_ENV = "AVLOC_OUT"
EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3

LOSS_COMBOS = ((False, False), (True, False), (False, True), (True, True))
WEIGHT_TRIPLES = ((1, 1, 4), (1, 1, 2), (1, 1, 1), (1, 2, 1), (2, 1, 1), (2, 2, 1))


class UsageError(Exception):
    pass


class DataError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def default_out() -> Path:
    return Path(os.environ.get(OUT_ENV, "avloc-out"))


def resolve_config(args) -> RunConfig:
    if args.config:
        try:
            cfg = load_config(args.config)
        except FileNotFoundError:
            raise UsageError(f"config file {args.config} not found") from None
        except (ValueError, tomli.TOMLDecodeError) as exc:
            raise UsageError(f"bad config {args.config}: {exc}") from None
    else:
        cfg = RunConfig()
    if args.seed is not None:
        cfg = cfg.replace(seed=args.seed)
    return cfg


def _announce(cfg: RunConfig) -> None:
    notes = cfg.desk_scale_notes()
    if notes:
        print("desk-scale settings in effect:", file=sys.stderr)
        for line in notes:
            print(f"  {line}", file=sys.stderr)


def _split_dir(path: Path, split: str) -> Path:
    if (path / "manifest.json").exists():
        return path
    if (path / split / "manifest.json").exists():
        return path / split
    raise DataError(f"no dataset split found at {path} (expected manifest.json or {split}/manifest.json)")


def _load_split(path: Path, split: str):
    d = _split_dir(path, split)
    try:
        return read_split(d)
    except (OSError, ValueError, KeyError) as exc:
        raise DataError(f"cannot read dataset {d}: {exc}") from None


def _data_root(args, cfg: RunConfig) -> Path:
    if args.data:
        return Path(args.data)
    if cfg.data_dir:
        return Path(cfg.data_dir)
    return default_out() / "data"


# ---- verbs -----------------------------------------------------------------

def cmd_gen_data(args) -> int:
    cfg = resolve_config(args)
    out = Path(args.out) if args.out else (Path(cfg.data_dir) if cfg.data_dir else default_out() / "data")
    train_scenes, test_scenes = generate_split(cfg.scene_spec(), cfg.n_train, cfg.n_test)
    try:
        for split, scenes in (("train", train_scenes), ("test", test_scenes)):
            write_split(scenes, cfg.scene_spec(), out, split)
        save_config(cfg, out / "config.toml")
    except OSError as exc:
        raise DataError(f"cannot write dataset to {out}: {exc}") from None
    print(f"wrote {cfg.n_train} train / {cfg.n_test} test scenes to {out}")
    return EXIT_OK


def _train_run(cfg: RunConfig, data, out: Path, resume=None, quiet=False):
    every = max(1, (len(data) // cfg.batch_size) // 4)

    def progress(step, terms):
        if not quiet and step % every == 0:
            print(f"step {step}: " + " ".join(f"{k}={v:.4g}" for k, v in terms.items()), flush=True)

    out.mkdir(parents=True, exist_ok=True)
    save_config(cfg, out / "config.toml")
    return train(cfg, data, out_dir=out, resume=resume, progress=progress)


def cmd_train(args) -> int:
    cfg = resolve_config(args)
    _announce(cfg)
    data = _load_split(_data_root(args, cfg), "train")
    _check_dims(cfg, data)
    out = Path(args.out) if args.out else (Path(cfg.out_dir) if cfg.out_dir else default_out() / "run")
    resume = None
    if args.resume:
        try:
            resume = load_checkpoint(args.resume)
        except (OSError, ValueError) as exc:
            raise DataError(str(exc)) from None
        if not args.config:
            cfg = resume.config if args.seed is None else resume.config.replace(seed=args.seed)
    try:
        state = _train_run(cfg, data, out, resume)
    except ValueError as exc:
        raise DataError(str(exc)) from None
    print(f"trained {state.step} steps; checkpoints in {out / 'checkpoints'}")
    return EXIT_OK


def _check_dims(cfg: RunConfig, data) -> None:
    if data.images.shape[1:] != (cfg.image_size, cfg.image_size, 3) or \
            data.spectrograms.shape[1:] != (cfg.spec_size, cfg.spec_size, 1):
        raise DataError(f"dataset tensors {data.images.shape[1:]} / {data.spectrograms.shape[1:]} do not match "
                        f"image_size={cfg.image_size}, spec_size={cfg.spec_size}")


def _model_from(path) -> LocalizationModel:
    try:
        ckpt = load_checkpoint(path)
    except (OSError, ValueError, KeyError) as exc:
        raise DataError(f"cannot load checkpoint {path}: {exc}") from None
    model = LocalizationModel(ckpt.config)
    model.load_parameters(ckpt.params)
    return model


def cmd_eval(args) -> int:
    if not args.checkpoint:
        raise UsageError("eval needs --checkpoint")
    model = _model_from(args.checkpoint)
    cfg = model.cfg
    _announce(cfg)
    data = _load_split(_data_root(args, cfg), "test")
    _check_dims(cfg, data)
    report = evaluate_model(model, data, act_thresh=cfg.act_thresh)
    out = Path(args.out) if args.out else default_out() / "eval"
    out.mkdir(parents=True, exist_ok=True)
    extra = report.summary()
    metrics.write_report(report.final, out / "report.json", extra)
    for name, rep in report.components.items():
        metrics.write_report(rep, out / f"report_{name}.json")
    print(json.dumps({k: round(v, 4) for k, v in extra.items()}, sort_keys=True))
    return EXIT_OK


def _read_image(path, size: int) -> np.ndarray:
    path = Path(path)
    try:
        if path.suffix == ".npy":
            img = np.load(path, allow_pickle=False).astype(np.float64)
        else:
            with Image.open(path) as im:
                img = np.asarray(im.convert("RGB"), dtype=np.float64) / 255.0
    except (OSError, ValueError) as exc:
        raise DataError(f"cannot read image {path}: {exc}") from None
    if img.shape != (size, size, 3):
        raise DataError(f"image {path} has shape {img.shape}, expected {(size, size, 3)}")
    return img


def _read_spectrogram(path, cfg: RunConfig) -> np.ndarray:
    spec = cfg.scene_spec()
    try:
        wave = read_pcm16(path)
    except OSError as exc:
        raise DataError(f"cannot read audio {path}: {exc}") from None
    if wave.size < spec.n_samples:
        raise DataError(f"audio {path} has {wave.size} samples, need at least {spec.n_samples}")
    return make_spectrogram(wave[:spec.n_samples], SAMPLE_RATE, spec.window, spec.hop)[0]


def heatmap_bytes(loc_map) -> np.ndarray:
    return np.round(metrics.normalize_prediction(loc_map) * 255.0).astype(np.uint8)


def overlay(image, loc_map, alpha: float = 0.6) -> np.ndarray:
    m = metrics.normalize_prediction(loc_map)[..., None] * alpha
    red = np.array([1.0, 0.0, 0.0])
    return np.round(np.clip((1 - m) * image + m * red, 0, 1) * 255.0).astype(np.uint8)


def cmd_infer(args) -> int:
    if not (args.checkpoint and args.image and args.audio):
        raise UsageError("infer needs --checkpoint, --image and --audio")
    model = _model_from(args.checkpoint)
    cfg = model.cfg
    image = _read_image(args.image, cfg.image_size)
    spectrogram = _read_spectrogram(args.audio, cfg)
    maps = predict_maps(model, image[None], spectrogram[None])
    out = Path(args.out) if args.out else default_out() / "infer"
    out.mkdir(parents=True, exist_ok=True)
    written = []
    for name in MAP_NAMES:
        p = out / f"{name}.pgm"
        Image.fromarray(heatmap_bytes(maps[name][0]), mode="L").save(p, format="PPM")
        written.append(p)
    p = out / "overlay.ppm"
    Image.fromarray(overlay(image, maps["map_final"][0]), mode="RGB").save(p, format="PPM")
    written.append(p)
    for p in written:
        print(p)
    return EXIT_OK


def load_sweep(path) -> tuple[list, list]:
    """Sweep file (TOML): ``loss_combos = [[true, false], ...]``, ``weights = [[1, 1, 1], ...]``."""
    if path is None:
        return list(LOSS_COMBOS), list(WEIGHT_TRIPLES)
    try:
        with open(path, "rb") as fh:
            doc = tomli.load(fh)
    except (OSError, tomli.TOMLDecodeError) as exc:
        raise UsageError(f"bad sweep file {path}: {exc}") from None
    combos = [tuple(bool(v) for v in c) for c in doc.get("loss_combos", LOSS_COMBOS)]
    weights = [tuple(float(v) for v in w) for w in doc.get("weights", WEIGHT_TRIPLES)]
    if any(len(c) != 2 for c in combos) or any(len(w) != 3 for w in weights):
        raise UsageError("loss_combos entries need 2 flags and weights entries need 3 numbers")
    if not combos or not weights:
        raise UsageError("empty ablation sweep")
    return combos, weights


ABLATION_FIELDS = ("avpm", "sra", "lambda1", "lambda2", "w1", "w2", "w3", "ciou_at_half", "auc", "mciou")


def run_ablation(cfg: RunConfig, train_data, test_data, out: Path, combos, weights, quiet=True) -> list[dict]:
    if not combos or not weights:
        raise UsageError("empty ablation sweep")
    rows = []
    for use_avpm, use_sra in combos:
        run_cfg = cfg.replace(lambda1=cfg.lambda1 if use_avpm else 0.0, lambda2=cfg.lambda2 if use_sra else 0.0)
        tag = f"avpm{int(use_avpm)}_sra{int(use_sra)}"
        state = _train_run(run_cfg, train_data, out / tag, quiet=quiet)
        for w in weights:
            rep = evaluate_model(state.model, test_data, FinalMapWeights(*w), cfg.act_thresh).final
            rows.append({"avpm": use_avpm, "sra": use_sra, "lambda1": run_cfg.lambda1, "lambda2": run_cfg.lambda2,
                         "w1": float(w[0]), "w2": float(w[1]), "w3": float(w[2]),
                         "ciou_at_half": rep.ciou_at_half, "auc": rep.auc, "mciou": rep.mciou})
    with open(out / "ablation.csv", "w", newline="") as fh:
        w = csv.DictWriter(fh, ABLATION_FIELDS, lineterminator="\n")
        w.writeheader()
        w.writerows(rows)
    (out / "ablation.json").write_text(json.dumps(rows, indent=1) + "\n")
    return rows


def cmd_ablate(args) -> int:
    cfg = resolve_config(args)
    _announce(cfg)
    combos, weights = load_sweep(args.sweep)
    root = _data_root(args, cfg)
    train_data, test_data = _load_split(root, "train"), _load_split(root, "test")
    _check_dims(cfg, train_data)
    out = Path(args.out) if args.out else default_out() / "ablate"
    out.mkdir(parents=True, exist_ok=True)
    rows = run_ablation(cfg, train_data, test_data, out, combos, weights, quiet=False)
    for r in rows:
        print(f"avpm={int(r['avpm'])} sra={int(r['sra'])} w=({r['w1']:g},{r['w2']:g},{r['w3']:g}) "
              f"ciou@0.5={r['ciou_at_half']:.3f} auc={r['auc']:.3f}")
    return EXIT_OK


# ---- entry point -------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="TOML run configuration")
    common.add_argument("--seed", type=int, help="override the configured seed")
    common.add_argument("--out", help=f"output directory (default under ${OUT_ENV} or ./avloc-out)")
    common.add_argument("--data", help="dataset root or split directory")
    common.add_argument("--checkpoint", help="checkpoint file")

    parser = _Parser(prog="avloc", description="Audio-visual sound source localization on synthetic scenes.")
    sub = parser.add_subparsers(dest="verb", required=True, parser_class=_Parser)
    sub.add_parser("gen-data", parents=[common], help="write a synthetic dataset").set_defaults(fn=cmd_gen_data)
    p = sub.add_parser("train", parents=[common], help="train a model")
    p.add_argument("--resume", help="checkpoint to continue from")
    p.set_defaults(fn=cmd_train)
    sub.add_parser("eval", parents=[common], help="score a checkpoint on a test split").set_defaults(fn=cmd_eval)
    p = sub.add_parser("infer", parents=[common], help="write heatmaps for one image/audio pair")
    p.add_argument("--image", help="RGB image (any format Pillow reads, or .npy)")
    p.add_argument("--audio", help="headerless 16-bit little-endian mono PCM")
    p.set_defaults(fn=cmd_infer)
    p = sub.add_parser("ablate", parents=[common], help="loss-term and final-map-weight sweep")
    p.add_argument("--sweep", help="TOML sweep file (default: 4 loss combos x 6 weight triples)")
    p.set_defaults(fn=cmd_ablate)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except UsageError as exc:
        print(f"avloc: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except DataError as exc:
        print(f"avloc: data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except FloatingPointError as exc:
        print(f"avloc: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
