"""Command line interface.

Subcommands: `enrich` (emit saliency-driven crops plus a window manifest),
`describe --check` (validate description caches), `train`, `fuse`, `eval`.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from .core import Config, ImagePair, MtifError, load_config, load_image, save_image
from .enrich import center_periphery_partition
from .fusenet import load_model_checkpoint
from .harness import (
    build_manifest,
    evaluate_dir,
    fuse_pair,
    pair_saliency,
    seed_from_env,
    train,
)
from .textguide import StubTextEncoder, encode_text, load_description_cache


def _cmd_enrich(args) -> int:
    cfg = seed_from_env(Config(
        crop_size=args.crop_size,
        ve_mode=args.mode,
        variants=args.variants,
        seed=args.seed,
    ))
    in_dir = Path(args.input_dir)
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    manifest = {}
    pair_dirs = sorted(p for p in in_dir.iterdir() if p.is_dir())
    if not pair_dirs:
        print(f"no pair directories under {in_dir}", file=sys.stderr)
        return 1
    for index, pair_dir in enumerate(pair_dirs):
        pair_id = pair_dir.name
        a_path = pair_dir / "a.png"
        b_path = pair_dir / "b.png"
        if not a_path.exists() or not b_path.exists():
            print(f"skipping {pair_id}: missing a.png/b.png", file=sys.stderr)
            continue
        pair = ImagePair(load_image(a_path), load_image(b_path))
        sidecar = pair_dir / "a.saliency.png"
        if cfg.ve_mode == "random":
            rng = np.random.default_rng([cfg.seed, 0x5EED, 0, index])
            enriched = center_periphery_partition(pair, None, cfg, rng=rng)
        else:
            saliency = pair_saliency(pair, sidecar if sidecar.exists() else None)
            enriched = center_periphery_partition(pair, saliency, cfg)
        crop_dir = out_dir / pair_id
        crop_dir.mkdir(parents=True, exist_ok=True)
        windows = []
        for n, (variant, window) in enumerate(zip(enriched.variants, enriched.windows), start=1):
            save_image(variant.a, crop_dir / f"variant_{n}_a.png")
            save_image(variant.b, crop_dir / f"variant_{n}_b.png")
            windows.append({"top": window.top, "left": window.left, "size": window.size})
        manifest[pair_id] = windows
        print(f"{pair_id}: wrote {len(windows)} crop pairs")
    (out_dir / "enrich_manifest.json").write_text(json.dumps(manifest, indent=2), encoding="utf-8")
    return 0


def _cmd_describe(args) -> int:
    pairs_dir = Path(args.pairs_dir)
    problems = 0
    checked = 0
    for pair_dir in sorted(p for p in pairs_dir.iterdir() if p.is_dir()):
        path = pair_dir / f"{pair_dir.name}.text.json"
        checked += 1
        if not path.exists():
            print(f"{pair_dir.name}: MISSING {path.name}")
            problems += 1
            continue
        try:
            load_description_cache(path)
            print(f"{pair_dir.name}: ok")
        except MtifError as exc:
            print(f"{pair_dir.name}: INVALID ({exc})")
            problems += 1
    print(f"checked {checked} pair(s), {problems} problem(s)")
    if args.check and problems:
        return 1
    return 0


def _cmd_train(args) -> int:
    cfg = load_config(args.config, task=args.task)
    manifest = build_manifest(args.data, task=cfg.task, split="train", strict=args.strict)
    for problem in manifest.problems:
        print(f"warning: {problem}", file=sys.stderr)
    val_manifest = None
    if args.val is not None:
        val_manifest = build_manifest(args.val, task=cfg.task, split="test")
    state = train(cfg, manifest, args.out, resume_from=args.resume, val_manifest=val_manifest)
    final = state.loss_history[-1]["total"] if state.loss_history else float("nan")
    print(f"trained {state.epoch} epoch(s), {state.step} step(s); final total loss {final:.6f}")
    return 0


def _cmd_fuse(args) -> int:
    pair = ImagePair(load_image(args.a), load_image(args.b))
    desc = load_description_cache(args.text)
    _, cfg = load_model_checkpoint(args.ckpt)
    provider = StubTextEncoder(embed_dim=cfg.embed_dim, seed=cfg.seed)
    texts = encode_text(desc, provider)
    fused = fuse_pair(args.ckpt, pair, texts)
    save_image(fused, args.out)
    print(f"wrote {args.out}")
    return 0


def _cmd_eval(args) -> int:
    manifest = build_manifest(args.data, task=args.task, split="test")
    json_path = Path(args.report).with_suffix(".json") if args.json else None
    rows, skipped = evaluate_dir(args.fused, manifest, args.report, json_path)
    for pair_id in skipped:
        print(f"warning: no fused image for {pair_id}", file=sys.stderr)
    print(f"wrote {args.report} ({len(rows)} image(s), {len(skipped)} skipped)")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="mtif", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("enrich", help="emit saliency-driven crops and a window manifest")
    p.add_argument("--input-dir", required=True)
    p.add_argument("--out-dir", required=True)
    p.add_argument("--crop-size", type=int, required=True)
    p.add_argument("--mode", choices=("saliency", "random"), default="saliency")
    p.add_argument("--variants", type=int, default=5)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=_cmd_enrich)

    p = sub.add_parser("describe", help="validate description caches (no live MLLM calls)")
    p.add_argument("--pairs-dir", required=True)
    p.add_argument("--check", action="store_true", help="exit nonzero when any cache is invalid")
    p.set_defaults(func=_cmd_describe)

    p = sub.add_parser("train", help="train a fusion model")
    p.add_argument("--config", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--task", choices=("MEF", "MFF"), default=None)
    p.add_argument("--val", default=None)
    p.add_argument("--resume", default=None)
    p.add_argument("--strict", action="store_true")
    p.set_defaults(func=_cmd_train)

    p = sub.add_parser("fuse", help="fuse one pair with a trained checkpoint")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--a", required=True)
    p.add_argument("--b", required=True)
    p.add_argument("--text", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_fuse)

    p = sub.add_parser("eval", help="score fused images against their source pairs")
    p.add_argument("--fused", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--report", required=True)
    p.add_argument("--json", action="store_true", help="also write a JSON report")
    p.add_argument("--task", choices=("MEF", "MFF"), default="MEF")
    p.set_defaults(func=_cmd_eval)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except MtifError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except FileNotFoundError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
