"""Command-line entry point.

Subcommands: gen-data, train, eval, ablate, dump-features. Every command
accepts --seed and --config; flags win over config-file values. Exit
codes: 0 success, 1 runtime failure, 2 usage error. Setting
DISDET_DETERMINISTIC=1 forces deterministic kernels regardless of config.
"""

from __future__ import annotations

import argparse
import dataclasses
import os
import sys
from pathlib import Path

import numpy as np
import torch
import yaml
from PIL import Image

from .network import DisentangledDetector
from .synthdata import CLASS_NAMES, DomainStyle, SceneSpec, generate
from .training import (
    ABLATION_VARIANTS,
    TrainConfig,
    ablate,
    config_from_dict,
    format_ablation_table,
    load_model,
    normalize_images,
    train,
)


def _parse_yaml(path: Path) -> dict:
    raw = yaml.safe_load(Path(path).read_text())
    if raw is None:
        return {}
    if not isinstance(raw, dict):
        raise ValueError(f"config file {path} must hold a mapping")
    return raw


def _apply_override(raw: dict, dotted: str, value: str) -> None:
    keys = dotted.split(".")
    node = raw
    for key in keys[:-1]:
        node = node.setdefault(key, {})
        if not isinstance(node, dict):
            raise ValueError(f"cannot override through non-mapping key {key!r}")
    node[keys[-1]] = yaml.safe_load(value)


def _train_config(args) -> TrainConfig:
    raw = _parse_yaml(args.config) if args.config else {}
    for item in getattr(args, "set", None) or []:
        if "=" not in item:
            raise ValueError(f"--set expects key=value, got {item!r}")
        key, value = item.split("=", 1)
        _apply_override(raw, key, value)
    if args.seed is not None:
        raw["seed"] = args.seed
    if os.environ.get("DISDET_DETERMINISTIC") == "1":
        raw["deterministic"] = True
    return config_from_dict(raw)


def _scene_spec(args) -> SceneSpec:
    raw = _parse_yaml(args.spec) if args.spec else {}
    known = {f.name for f in dataclasses.fields(SceneSpec)}
    for key in raw:
        if key not in known:
            raise ValueError(f"unknown scene spec key {key!r}")
    if args.seed is not None:
        raw["seed"] = args.seed
    return SceneSpec(**raw)


def cmd_gen_data(args) -> int:
    spec = _scene_spec(args)
    style = DomainStyle.source() if args.style == "source" else DomainStyle.target()
    out = generate(spec, style, args.count, args.split, Path(args.out))
    print(f"wrote {args.count} {args.style}/{args.split} images to {out}")
    return 0


def cmd_train(args) -> int:
    config = _train_config(args)
    result = train(config, Path(args.source), Path(args.target), Path(args.out))
    print(f"trained {result.iterations} iterations")
    print(f"checkpoint: {result.checkpoint_path}")
    print(f"loss log:   {result.log_path}")
    return 0


def cmd_eval(args) -> int:
    from .evalmetrics import evaluate

    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    result = evaluate(
        Path(args.checkpoint),
        Path(args.data),
        protocol=args.ap_protocol,
        detections_path=out_dir / "detections.jsonl",
    )
    print(result.table(CLASS_NAMES))
    (out_dir / "ap.csv").write_text(result.csv(CLASS_NAMES) + "\n")
    return 0


def cmd_ablate(args) -> int:
    config = _train_config(args)
    variants = tuple(v.strip() for v in args.variants.split(",") if v.strip())
    seeds = tuple(int(s) for s in args.seeds.split(","))
    rows = ablate(
        config,
        variants,
        seeds,
        Path(args.source),
        Path(args.target),
        Path(args.eval_data),
        Path(args.out),
    )
    print(format_ablation_table(rows, seeds))
    return 0


def dump_features(checkpoint: Path, image_path: Path, out_dir: Path) -> list[Path]:
    """Write grayscale images of the strongest channel of each second-layer
    map (base / invariant / specific), min-max normalized per map."""
    model, means = load_model(checkpoint)
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    size = model.config.image_size
    with Image.open(image_path) as im:
        rgb = im.convert("RGB")
        if rgb.size != (size, size):
            rgb = rgb.resize((size, size), Image.BILINEAR)
        pixels = np.asarray(rgb, dtype=np.uint8)
    images = torch.from_numpy(pixels).permute(2, 0, 1).unsqueeze(0)
    with torch.no_grad():
        state = model.forward_maps(normalize_images(images, means))
    written = []
    for name, fmap in (("base", state.f_b2), ("dir", state.f_di2), ("dsr", state.f_ds2)):
        per_image = fmap[0]
        channel = int(torch.argmax(per_image.reshape(per_image.shape[0], -1).max(dim=1).values))
        selected = per_image[channel]
        low, high = float(selected.min()), float(selected.max())
        if high - low > 0:
            norm = (selected - low) / (high - low)
        else:
            norm = torch.zeros_like(selected)
        gray = (norm * 255.0).round().to(torch.uint8).numpy()
        path = out_dir / f"{name}.png"
        Image.fromarray(gray, mode="L").save(path)
        written.append(path)
    return written


def cmd_dump_features(args) -> int:
    written = dump_features(Path(args.checkpoint), Path(args.image), Path(args.out))
    for path in written:
        print(path)
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="disdet",
        description="Progressive-disentanglement domain-adaptive detection toolkit",
    )
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=None, help="random seed override")
    common.add_argument("--config", type=Path, default=None, help="YAML config file")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", parents=[common], help="generate a synthetic dataset split")
    p.add_argument("--spec", type=Path, default=None, help="scene spec YAML")
    p.add_argument("--style", choices=("source", "target"), required=True)
    p.add_argument("--count", type=int, required=True)
    p.add_argument("--split", choices=("train", "eval"), default="train")
    p.add_argument("--out", type=Path, required=True)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", parents=[common], help="run the three-stage training loop")
    p.add_argument("--source", type=Path, required=True, help="annotated source train dir")
    p.add_argument("--target", type=Path, required=True, help="unlabeled target train dir")
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--set", action="append", metavar="KEY=VALUE",
                   help="override a config entry, dotted keys allowed")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", parents=[common], help="score a checkpoint on a dataset")
    p.add_argument("--checkpoint", type=Path, required=True)
    p.add_argument("--data", type=Path, required=True)
    p.add_argument("--ap-protocol", choices=("all", "11pt"), default="all")
    p.add_argument("--out", type=Path, default=Path("eval_out"))
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("ablate", parents=[common], help="train and score ablation variants")
    p.add_argument("--source", type=Path, required=True)
    p.add_argument("--target", type=Path, required=True)
    p.add_argument("--eval-data", type=Path, required=True)
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--variants", default=",".join(ABLATION_VARIANTS))
    p.add_argument("--seeds", default="0,1,2")
    p.add_argument("--set", action="append", metavar="KEY=VALUE")
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("dump-features", parents=[common], help="write second-layer feature maps")
    p.add_argument("--checkpoint", type=Path, required=True)
    p.add_argument("--image", type=Path, required=True)
    p.add_argument("--out", type=Path, required=True)
    p.set_defaults(func=cmd_dump_features)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exit_:
        return int(exit_.code or 0)
    if os.environ.get("DISDET_DETERMINISTIC") == "1":
        torch.use_deterministic_algorithms(True)
    try:
        return args.func(args)
    except Exception as error:  # one-line machine-parseable failure
        print(f"error: {type(error).__name__}: {error}", file=sys.stderr)
        return 1


def console_entry() -> None:
    sys.exit(main())


if __name__ == "__main__":
    sys.exit(main())
