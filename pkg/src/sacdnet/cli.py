"""``sacdnet`` command line: build-pseudo, pretrain, finetune, evaluate, predict."""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np
import torch
import yaml

from . import data, training
from .config import Config, apply_overrides, from_dict, load_config
from .errors import ConfigError, DataError, SACDError
from .metrics import accumulate, confusion, report
from .model import build_model
from .pseudochange import export_dataset, load_sources

log = logging.getLogger("sacdnet")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3


class UsageError(Exception):
    pass


class Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="YAML config file")
    p.add_argument("--seed", type=int, help="overrides train.seed / the pseudo-data seed")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                   help="override a config key, e.g. --set train.lr=0.05 (repeatable)")
    p.add_argument("--device", default="cpu")


def build_parser() -> Parser:
    parser = Parser(prog="sacdnet", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=Parser)

    p = sub.add_parser("build-pseudo", help="write pseudo-change pairs from segmentation sources")
    _common(p)
    p.add_argument("--count", type=int, help="number of pairs (default pseudo.count)")

    p = sub.add_parser("pretrain", help="single-temporal semantic pre-training on pseudo pairs")
    _common(p)

    p = sub.add_parser("finetune", help="train on a labelled change-detection dataset")
    _common(p)
    p.add_argument("--data", required=True, help="dataset with A/ B/ label/ (or train/ val/ test/)")
    p.add_argument("--init-from", help="pre-training checkpoint or run directory")

    p = sub.add_parser("evaluate", help="precision / recall / F1 / IoU on a dataset")
    _common(p)
    p.add_argument("--data", required=True)
    src = p.add_mutually_exclusive_group(required=True)
    src.add_argument("--checkpoint", help="checkpoint file or run directory")
    src.add_argument("--pred-dir", help="directory with binary/ or prob/ maps written by predict")
    p.add_argument("--branch", choices=training.BRANCHES, default="fused")
    p.add_argument("--threshold", type=float)
    p.add_argument("--split", default="test", help="split to use when the dataset has train/val/test")
    p.add_argument("--per-image", action="store_true", help="include per-image counts in the report")

    p = sub.add_parser("predict", help="write change maps for every A/B pair")
    _common(p)
    p.add_argument("--data", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--branch", choices=training.BRANCHES, default="fused")
    p.add_argument("--threshold", type=float)
    p.add_argument("--split", default="test")
    p.add_argument("--float-maps", action="store_true", help="also write float32 .npy probability maps")
    return parser


def _config(args, base: dict | None = None) -> Config:
    if base is not None:
        values = base
        if args.config:
            values = yaml.safe_load(Path(args.config).read_text()) or {}
        cfg = from_dict(apply_overrides(values, args.overrides))
    else:
        cfg = load_config(args.config, args.overrides)
    if args.seed is not None:
        cfg.train.seed = args.seed
    return cfg


def _save_effective(cfg: Config, out: Path) -> None:
    out.mkdir(parents=True, exist_ok=True)
    cfg.dump(out / "config.yaml")


def cmd_build_pseudo(args) -> int:
    cfg = _config(args)
    if not cfg.pseudo.sources:
        raise ConfigError("pseudo.sources is empty; list at least one segmentation source")
    manifest = cfg.pseudo.manifest(cfg.train.seed, cfg.train.samples_per_epoch)
    count = args.count if args.count is not None else cfg.pseudo.count
    path = export_dataset(manifest, load_sources(manifest), count, args.out)
    summary = yaml.safe_load(path.read_text())
    print(f"wrote {count} pseudo-change pairs to {args.out}")
    for name, n in summary["drawn"].items():
        print(f"  {name:<20} {n:>8}")
    print(f"manifest: {path}")
    return EXIT_OK


def cmd_pretrain(args) -> int:
    cfg = _config(args)
    cfg.train.phase = "pretrain"
    if not cfg.pseudo.sources:
        raise ConfigError("pseudo.sources is empty; list at least one segmentation source")
    out = Path(args.out)
    _save_effective(cfg, out)
    manifest = cfg.pseudo.manifest(cfg.train.seed, cfg.train.samples_per_epoch)
    ckpt = training.run_pretrain(cfg, manifest, out, device=args.device)
    print(f"final checkpoint: {ckpt}")
    return EXIT_OK


def cmd_finetune(args) -> int:
    cfg = _config(args)
    cfg.train.phase = "finetune"
    out = Path(args.out)
    _save_effective(cfg, out)
    ckpt = training.run_finetune(cfg, args.data, out, init=args.init_from, device=args.device)
    print(f"final checkpoint: {ckpt}")
    return EXIT_OK


def _eval_dataset(args) -> data.ChangeDataset:
    splits = data.split_dirs(args.data)
    root = splits.get(args.split) or splits.get("test") or splits["train"]
    return data.ChangeDataset(root, crop_size=None, require_labels=args.command == "evaluate")


def _load_model(args):
    ckpt = training.load_checkpoint(args.checkpoint)
    cfg = _config(args, base=ckpt["config"])
    cfg.train.phase = "finetune"
    model = build_model(cfg, "finetune")
    training.restore(model, ckpt, cfg)
    return model.to(args.device), cfg


def _pred_from_dir(pred_dir: Path, name: str) -> np.ndarray:
    binary = pred_dir / "binary" / f"{name}.png"
    if binary.is_file():
        return data.read_binary(binary).astype(np.float32)
    prob = pred_dir / "prob" / f"{name}.png"
    if prob.is_file():
        return data.read_prob(prob)
    raise DataError(f"no prediction for '{name}' under {pred_dir}")


def cmd_evaluate(args) -> int:
    dataset = _eval_dataset(args)
    if args.checkpoint:
        model, cfg = _load_model(args)
        threshold = args.threshold if args.threshold is not None else cfg.eval.threshold
        rep, per_image = training.evaluate_model(model, dataset, cfg, args.branch, threshold, args.device)
    else:
        threshold = args.threshold if args.threshold is not None else 0.5
        per_image = {}
        for k in range(len(dataset)):
            pair = dataset[k]
            per_image[pair.name] = confusion(_pred_from_dir(Path(args.pred_dir), pair.name), pair.label, threshold)
        rep = report(accumulate(per_image.values()))
    print(rep.format())
    record = {"dataset": str(args.data), "branch": args.branch, "threshold": threshold, **rep.as_dict()}
    if args.per_image:
        record["per_image"] = {n: report(c).as_dict() for n, c in per_image.items()}
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "report.json").write_text(json.dumps(record, indent=2, sort_keys=True))
    return EXIT_OK


def cmd_predict(args) -> int:
    model, cfg = _load_model(args)
    threshold = args.threshold if args.threshold is not None else cfg.eval.threshold
    dataset = _eval_dataset(args)
    out = Path(args.out)
    for k in range(len(dataset)):
        pair = dataset[k]
        probs = training.predict_full(model, pair.image_a, pair.image_b, cfg, args.device)[args.branch]
        data.write_prob(out / "prob" / f"{pair.name}.png", probs)
        data.write_binary(out / "binary" / f"{pair.name}.png", (probs >= threshold).astype(np.uint8))
        if args.float_maps:
            (out / "float").mkdir(parents=True, exist_ok=True)
            np.save(out / "float" / f"{pair.name}.npy", probs.astype(np.float32))
    print(f"wrote {len(dataset)} {args.branch} change maps to {out}")
    return EXIT_OK


COMMANDS = {
    "build-pseudo": cmd_build_pseudo,
    "pretrain": cmd_pretrain,
    "finetune": cmd_finetune,
    "evaluate": cmd_evaluate,
    "predict": cmd_predict,
}


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        parser.print_usage(sys.stderr)
        print(f"sacdnet: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    torch.use_deterministic_algorithms(True, warn_only=True)
    try:
        return COMMANDS[args.command](args)
    except SACDError as exc:
        print(f"sacdnet: {exc}", file=sys.stderr)
        diagnostics = getattr(exc, "diagnostics", None)
        if diagnostics:
            print(f"diagnostics: {diagnostics}", file=sys.stderr)
        return exc.exit_code
    except (FileNotFoundError, PermissionError) as exc:
        print(f"sacdnet: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
