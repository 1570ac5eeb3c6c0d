"""``dagseg`` command-line entry point.

Every subcommand resolves a :class:`~dagseg.config.RunConfig` from defaults, an
optional ``--config`` file and repeated ``--set key=value`` overrides, then writes
that resolved configuration to ``<out>/config.txt`` before doing any work.
"""

from __future__ import annotations

import argparse
import dataclasses
import logging
import sys
from pathlib import Path

import numpy as np
from PIL import Image

from dagseg import checkpoint
from dagseg.config import ConfigError, RunConfig, dump_config, load_config
from dagseg.data import (
    DatasetError,
    load_split,
    make_split,
    overlay,
    save_mask,
    synth_generate,
    write_dataset,
)
from dagseg.gates import GateMode, SelfAttentionVariant
from dagseg.model import CLASS_NAMES, build, predict_masks
from dagseg.profiler import profile
from dagseg.train import TrainingError, evaluate_records, load_model, save_model, train

log = logging.getLogger("dagseg")

SWEEPS = ("heads", "gate_variant", "attention_mechanism", "loss_weights")
IMAGE_SUFFIXES = (".png", ".jpg", ".jpeg", ".bmp", ".tif", ".tiff")


class CliError(Exception):
    pass


# ---------------------------------------------------------------------------
# argument handling
# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", metavar="PATH", help="key = value config file")
    common.add_argument("--set", dest="overrides", metavar="KEY=VALUE", action="append", default=[],
                        help="override one config key (repeatable)")
    common.add_argument("--out", metavar="DIR", help="output directory")
    common.add_argument("--seed", type=int, help="seed for data, initialization and shuffling")
    common.add_argument("--checkpoint", metavar="PATH", help="model or training checkpoint")
    common.add_argument("--heads", type=int, help="transformer head count")
    common.add_argument("--variant", choices=[v.value for v in SelfAttentionVariant],
                        help="self-attention variant inside the gates")
    common.add_argument("--data", metavar="DIR", help="dataset directory (default: data.dir)")
    common.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")

    p = argparse.ArgumentParser(prog="dagseg", description="Dual-attention U-shaped segmentation toolkit.")
    sub = p.add_subparsers(dest="command", required=True)

    sub.add_parser("train", parents=[common], help="train a model; --checkpoint resumes")

    ev = sub.add_parser("eval", parents=[common], help="metric report for a checkpoint on a split")
    ev.add_argument("--split", default="test", choices=["train", "val", "test"])

    pr = sub.add_parser("predict", parents=[common], help="write index masks and overlays")
    pr.add_argument("inputs", nargs="*", help="image files or directories (default: --split of the dataset)")
    pr.add_argument("--split", default="test", choices=["train", "val", "test"])
    pr.add_argument("--no-overlay", action="store_true", help="skip colour overlays")

    pf = sub.add_parser("profile", parents=[common], help="parameter and MAC report")
    pf.add_argument("--summary", action="store_true", help="totals and groups only")

    sw = sub.add_parser("sweep", parents=[common], help="run one of the comparison sweeps")
    sw.add_argument("which", choices=SWEEPS)
    sw.add_argument("--params-only", action="store_true", help="skip training; IoU columns become nan")

    sub.add_parser("synth", parents=[common], help="generate a synthetic dataset")
    return p


def resolve(args) -> RunConfig:
    overrides = list(args.overrides)
    if args.seed is not None:
        overrides += [f"train.seed={args.seed}", f"data.seed={args.seed}", f"augment.seed={args.seed}"]
    if args.heads is not None:
        overrides.append(f"model.num_heads={args.heads}")
    if args.variant is not None:
        overrides.append(f"model.gate_variant={args.variant}")
    if args.data is not None:
        overrides.append(f"data.dir={args.data}")
    return load_config(args.config, overrides)


def _out_dir(args, default: str) -> Path:
    out = Path(args.out or default)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _snapshot(out: Path, cfg: RunConfig) -> None:
    (out / "config.txt").write_text(dump_config(cfg))


def _write_table(path: Path, header: list[str], rows: list[list]) -> str:
    def fmt(v):
        return f"{v:.6f}" if isinstance(v, float) else str(v)

    text = "\t".join(header) + "\n" + "".join("\t".join(fmt(v) for v in r) + "\n" for r in rows)
    path.write_text(text)
    return text


def _load_checkpoint_model(args):
    if not args.checkpoint:
        raise CliError("--checkpoint is required")
    model, _ = load_model(args.checkpoint)
    return model


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------


def cmd_synth(args, cfg: RunConfig) -> int:
    d = cfg.data
    out = _out_dir(args, d.dir)
    records = synth_generate(d.num_samples, d.size, d.seed)
    manifest = make_split([r.id for r in records], d.seed)
    write_dataset(records, out, manifest)
    _snapshot(out, cfg)
    print(f"wrote {len(records)} samples to {out} "
          f"(train {len(manifest.train)}, val {len(manifest.val)}, test {len(manifest.test)})")
    return 0


def cmd_train(args, cfg: RunConfig) -> int:
    out = _out_dir(args, "runs/train")
    _snapshot(out, cfg)
    train_set = load_split(cfg.data.dir, "train", cfg.model.num_classes)
    val_set = load_split(cfg.data.dir, "val", cfg.model.num_classes) or None
    model = build(cfg.model, seed=cfg.train.seed)
    resume = None
    if args.checkpoint:
        resume = checkpoint.load(args.checkpoint)
        if "epoch" not in resume.meta:
            raise CliError(f"{args.checkpoint} holds no training state to resume from")
    result = train(model, train_set, val_set, cfg.train, out_dir=out, resume=resume, aug=cfg.augment)
    save_model(out / "final.ckpt", model, {"epochs": len(result.history)})
    last = result.history[-1] if result.history else None
    if last is not None:
        print(f"epoch {last.epoch} train_loss {last.train_loss:.6f} val_loss {last.val_loss:.6f} "
              f"val_iou {last.val_iou:.4f} best_epoch {result.best_epoch}")
    print(f"checkpoints and history written to {out}")
    return 0


def cmd_eval(args, cfg: RunConfig) -> int:
    model = _load_checkpoint_model(args)
    out = _out_dir(args, "runs/eval")
    _snapshot(out, cfg)
    records = load_split(cfg.data.dir, args.split, model.config.num_classes)
    if not records:
        raise CliError(f"split {args.split!r} of {cfg.data.dir} is empty")
    _, acc = evaluate_records(model, records, cfg.train.batch_size, cfg.train.loss_weights)
    names = CLASS_NAMES if model.config.num_classes == len(CLASS_NAMES) else None
    text = acc.report().to_text(names)
    (out / "metrics.txt").write_text(text)
    sys.stdout.write(text)
    return 0


def _input_images(args, cfg: RunConfig) -> list[tuple[str, np.ndarray]]:
    if not args.inputs:
        return [(r.id, r.image) for r in load_split(cfg.data.dir, args.split)]
    paths: list[Path] = []
    for item in args.inputs:
        p = Path(item)
        if p.is_dir():
            paths.extend(sorted(q for q in p.iterdir() if q.suffix.lower() in IMAGE_SUFFIXES))
        elif p.is_file():
            paths.append(p)
        else:
            raise CliError(f"input not found: {p}")
    if not paths:
        raise CliError("no input images found")
    return [(p.stem, np.asarray(Image.open(p).convert("RGB"), dtype=np.uint8)) for p in paths]


def cmd_predict(args, cfg: RunConfig) -> int:
    model = _load_checkpoint_model(args)
    out = _out_dir(args, "runs/predict")
    _snapshot(out, cfg)
    h, w = model.config.input_size
    (out / "masks").mkdir(exist_ok=True)
    if not args.no_overlay:
        (out / "overlays").mkdir(exist_ok=True)
    for name, image in _input_images(args, cfg):
        src = image
        if image.shape[:2] != (h, w):
            src = np.asarray(Image.fromarray(image).resize((w, h), Image.BILINEAR))
        mask = predict_masks(model, src[None].astype(np.float64) / 255.0)[0]
        if mask.shape != image.shape[:2]:
            mask = np.asarray(Image.fromarray(mask).resize(image.shape[1::-1], Image.NEAREST))
        save_mask(mask, out / "masks" / f"{name}.png")
        if not args.no_overlay:
            Image.fromarray(overlay(image, mask)).save(out / "overlays" / f"{name}.png")
    print(f"masks written to {out / 'masks'}")
    return 0


def cmd_profile(args, cfg: RunConfig) -> int:
    model = _load_checkpoint_model(args) if args.checkpoint else build(cfg.model, seed=cfg.train.seed)
    text = profile(model, cfg.model.input_size).to_text(detail=not args.summary)
    if args.out:
        out = _out_dir(args, args.out)
        _snapshot(out, cfg)
        (out / "profile.txt").write_text(text)
    sys.stdout.write(text)
    return 0


def _sweep_entries(which: str, cfg: RunConfig):
    """(label columns, model config, train config) per sweep row."""
    base = cfg.model
    if which == "heads":
        for h in cfg.sweep.heads:
            yield [h], dataclasses.replace(base, num_heads=h), cfg.train
    elif which == "gate_variant":
        for v in SelfAttentionVariant:
            yield [v.value], dataclasses.replace(base, gate_variant=v, use_dag=True), cfg.train
    elif which == "attention_mechanism":
        for m in (GateMode.SPATIAL, GateMode.SELF, GateMode.DUAL):
            yield [m.value], dataclasses.replace(base, gate_mode=m, use_dag=True), cfg.train
    else:
        for wd in cfg.sweep.w_dice:
            w = round(1.0 - wd, 12)
            yield [wd, w], base, dataclasses.replace(cfg.train, w_dice=wd, w_scce=w)


def cmd_sweep(args, cfg: RunConfig) -> int:
    out = _out_dir(args, f"runs/sweep_{args.which}")
    _snapshot(out, cfg)
    labels = {
        "heads": ["heads"],
        "gate_variant": ["variant"],
        "attention_mechanism": ["mechanism"],
        "loss_weights": ["w_dice", "w_scce"],
    }[args.which]
    header = labels + ["params", "macs", "gflops", "val_iou", "val_dice"]
    if not args.params_only:
        train_set = load_split(cfg.data.dir, "train", cfg.model.num_classes)
        val_set = load_split(cfg.data.dir, "val", cfg.model.num_classes) or train_set
    rows = []
    for label, mcfg, tcfg in _sweep_entries(args.which, cfg):
        model = build(mcfg, seed=tcfg.seed)
        rep = profile(model)
        iou = dice = float("nan")
        if not args.params_only:
            tcfg = dataclasses.replace(tcfg, max_epochs=cfg.sweep.epochs)
            train(model, train_set, None, tcfg, aug=cfg.augment)
            _, acc = evaluate_records(model, val_set, tcfg.batch_size, tcfg.loss_weights)
            iou, dice = acc.report().macro["iou"], acc.report().macro["dice"]
        rows.append(label + [rep.params, rep.macs, rep.gflops, iou, dice])
        log.info("sweep %s %s params %d", args.which, label, rep.params)
    sys.stdout.write(_write_table(out / f"sweep_{args.which}.tsv", header, rows))
    return 0


COMMANDS = {
    "train": cmd_train,
    "eval": cmd_eval,
    "predict": cmd_predict,
    "profile": cmd_profile,
    "sweep": cmd_sweep,
    "synth": cmd_synth,
}


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        cfg = resolve(args)
        return COMMANDS[args.command](args, cfg)
    except (CliError, ConfigError, DatasetError, checkpoint.CheckpointError, TrainingError, OSError) as exc:
        print(f"dagseg {args.command}: error: {exc}", file=sys.stderr)
        return 1
    except ValueError as exc:
        print(f"dagseg {args.command}: invalid input: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
