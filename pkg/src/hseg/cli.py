"""Command-line front end.

Exit codes: 0 success, 1 validation error, 2 runtime failure.
"""
import argparse
import logging
import sys
from pathlib import Path

import numpy as np
from PIL import Image

from . import data as D
from .gradcheck import run_suite
from .metrics import CSV_COLUMNS, write_csv
from .network import (DOWNSAMPLE, CheckpointError, build_model, checkpoint_bytes, count_params,
                      load_checkpoint, mac_table, save_checkpoint)
from .train import BATCH_SIZES, SYNTH_LR, NonFiniteError, TrainConfig, evaluate, train, write_history

log = logging.getLogger("hseg")


class UsageError(ValueError):
    pass


def parse_size(text):
    try:
        w, h = (int(v) for v in text.lower().split("x"))
    except ValueError:
        raise UsageError(f"size must look like WxH, got {text!r}") from None
    if w <= 0 or h <= 0 or w % DOWNSAMPLE or h % DOWNSAMPLE:
        raise UsageError(f"input size {w}x{h}: width and height must be positive multiples of {DOWNSAMPLE}")
    return w, h


# ------------------------------------------------------------------ commands

def cmd_summary(args):
    w, h = parse_size(args.input_size)
    model = build_model(seed=args.seed)
    rows = mac_table(model, (1, 3, h, w))
    total = sum(m for _, _, m in rows)
    conv = sum(m for _, kind, m in rows if kind == "conv")
    params = count_params(model)
    size = len(checkpoint_bytes(model))
    print(f"input          3x{h}x{w}")
    print(f"params         {params} ({params / 1e6:.3f} M)")
    print(f"macs           {total} ({total / 1e9:.3f} GMACs)")
    print(f"macs_conv      {conv} ({conv / 1e9:.3f} GMACs)")
    print(f"checkpoint     {size} bytes ({size / 1e6:.2f} MB)")
    if args.verbose:
        for name, kind, m in rows:
            print(f"  {name:<40} {kind:<13} {m}")
    return 0


def cmd_gradcheck(args):
    reports = run_suite(tol=args.tol, seeds=range(args.seed, args.seed + args.seeds),
                        include_model=not args.no_model, model_seeds=(args.seed,))
    width = max(len(r.op_name) for r in reports)
    for r in reports:
        status = "PASS" if r.passed else "FAIL"
        print(f"{r.op_name:<{width}}  {r.max_rel_err:.3e}  {status}")
    failed = sum(not r.passed for r in reports)
    print(f"{len(reports) - failed}/{len(reports)} passed at tol {args.tol:g}")
    return 0 if failed == 0 else 1


def _samples(args, split=None):
    kind = D.dataset_kind(args.dataset)
    if kind == "SYNTH" and not args.data:
        return D.synth_vessels(args.seed, args.size, args.synth_count), kind
    if not args.data:
        raise UsageError(f"--data is required for dataset {kind}; {D.LAYOUT_HELP}")
    root = Path(args.data)
    if not root.is_dir():
        raise FileNotFoundError(f"data directory {root} does not exist; {D.LAYOUT_HELP}")
    if split in (None, "all"):
        return D.load_dataset(root, kind), kind
    spec = D.make_splits(root, kind)
    return D.load_dataset(root, kind, spec.train if split == "train" else spec.test), kind


def cmd_train(args):
    kind = D.dataset_kind(args.dataset)
    if kind == "SYNTH":
        train_set, _ = _samples(args)
        # overfit protocol: the synthetic set is its own validation set
        val_set = train_set
    else:
        train_set, _ = _samples(args, "train")
        val_set, _ = _samples(args, "test")
    synth = kind == "SYNTH"
    cfg = TrainConfig(
        lr=args.lr if args.lr is not None else (SYNTH_LR if synth else 1e-3),
        weight_decay=args.weight_decay,
        batch_size=args.batch_size or BATCH_SIZES[kind],
        max_epochs=args.max_epochs or (300 if synth else 500),
        patience=args.patience or (300 if synth else 30),
        mixed_loss_enabled=not args.no_mixed_loss,
        w=args.w,
        seed=args.seed,
        augment=None if (args.no_augment or (synth and not args.augment)) else D.AugmentConfig(),
        stop_at_dice=args.stop_at_dice,
    )
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    model = build_model(seed=args.seed)
    log.info("training on %d images (%s loss)", len(train_set), cfg.loss_mode)
    result = train(model, train_set, val_set, cfg)
    best = result["best_model"]
    save_checkpoint(best, out / "best.hseg")
    write_history(result["history"], out / "history.csv")
    reports, mean = evaluate(best, train_set, cfg.threshold)
    write_csv(reports, out / "train_metrics.csv")
    print(f"loss_mode      {cfg.loss_mode}")
    print(f"epochs         {len(result['history'])}")
    print(f"best_epoch     {result['best_epoch']}")
    print(f"best_val_dice  {result['best_dice']:.6f}")
    print(f"train_dice     {mean.f1:.6f}")
    print(f"checkpoint     {out / 'best.hseg'}")
    return 0


def cmd_eval(args):
    model = load_checkpoint(args.checkpoint)
    samples, _ = _samples(args, args.split)
    reports, mean = evaluate(model, samples, args.threshold)
    if args.out:
        write_csv(reports, args.out)
    print(",".join(CSV_COLUMNS))
    for r in reports + [mean]:
        print(",".join(r.csv_row()))
    return 0


def cmd_infer(args):
    model = load_checkpoint(args.checkpoint)
    img = D._open_8bit(args.image).convert("RGB")
    if args.dataset:
        target = D.TARGET_SIZES[D.dataset_kind(args.dataset)]
        if target is not None:
            img = img.resize((target[1], target[0]), Image.BILINEAR)
    w, h = img.size
    if w % DOWNSAMPLE or h % DOWNSAMPLE:
        raise UsageError(f"image size {w}x{h} is not a multiple of {DOWNSAMPLE}; pass --dataset to resize")
    x = (np.asarray(img, dtype=np.float32) / 255.0).transpose(2, 0, 1)[None]
    model.eval()
    prob = model.forward(np.ascontiguousarray(x))["prob"][0, 0]
    Image.fromarray(np.round(prob.astype(np.float64) * 255).astype(np.uint8), "L").save(args.out, format="PNG")
    print(f"wrote {args.out} ({w}x{h})")
    return 0


def cmd_synth(args):
    if args.size % DOWNSAMPLE:
        raise UsageError(f"--size {args.size} is not a multiple of {DOWNSAMPLE}")
    samples = D.synth_vessels(args.seed, args.size, args.count)
    D.save_dataset(samples, args.out)
    print(f"wrote {len(samples)} images and masks to {args.out}")
    return 0


# ------------------------------------------------------------------- parsing

def _add_data_flags(p):
    p.add_argument("--data", help="dataset root with images/ and masks/")
    p.add_argument("--dataset", default="synth", help="DRIVE, CHASE_DB1, HRF or synth")
    p.add_argument("--synth-count", type=int, default=4, help="synthetic images when --data is absent")
    p.add_argument("--size", type=int, default=64, help="synthetic image size")


def build_parser():
    parser = argparse.ArgumentParser(prog="hseg", description="Compact hybrid vessel segmentation network.")
    parser.add_argument("--config", help="key = value file; command-line flags take precedence")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("summary", help="parameter count, MACs and checkpoint size")
    p.add_argument("--input-size", default="512x512", help="WxH, multiples of 16")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_summary)

    p = sub.add_parser("gradcheck", help="finite-difference check of every op")
    p.add_argument("--tol", type=float, default=1e-4)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--seeds", type=int, default=5, help="seeds per op")
    p.add_argument("--no-model", action="store_true", help="skip the tiny whole-model row")
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("train", help="train with early stopping")
    _add_data_flags(p)
    p.add_argument("--out", default="runs/latest")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--no-mixed-loss", action="store_true", help="supervise the final head only")
    p.add_argument("--lr", type=float, default=None, help=f"default 1e-3, or {SYNTH_LR:g} for synth")
    p.add_argument("--weight-decay", type=float, default=5e-4)
    p.add_argument("--batch-size", type=int, default=None)
    p.add_argument("--max-epochs", type=int, default=None)
    p.add_argument("--patience", type=int, default=None)
    p.add_argument("--w", type=float, default=0.5, help="BCE weight in the combined loss")
    p.add_argument("--stop-at-dice", type=float, default=None)
    p.add_argument("--no-augment", action="store_true")
    p.add_argument("--augment", action="store_true", help="augment synthetic data too")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="per-image metrics CSV")
    _add_data_flags(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--split", choices=("train", "test", "all"), default="test")
    p.add_argument("--threshold", type=float, default=0.5)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", help="CSV output path")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("infer", help="write a probability map")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--image", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--dataset", help="resize to this dataset's working size first")
    p.set_defaults(func=cmd_infer)

    p = sub.add_parser("synth", help="write a synthetic dataset directory")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--size", type=int, default=64)
    p.add_argument("--count", type=int, default=4)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_synth)
    return parser


def read_config(path):
    values = {}
    for n, line in enumerate(Path(path).read_text().splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        if not sep:
            raise UsageError(f"{path}:{n}: expected key = value")
        values[key.strip().replace("-", "_")] = value.strip()
    return values


def _apply_config(parser, argv, path):
    values = read_config(path)
    probe = parser.parse_args(argv)
    sub = parser._subparsers._group_actions[0].choices[probe.command]
    actions = {a.dest: a for a in sub._actions if a.dest not in ("help", "func")}
    for key in values:
        if key not in actions:
            raise UsageError(f"{path}: unknown key {key!r} for '{probe.command}'")
    converted = {}
    for key, raw in values.items():
        action = actions[key]
        if isinstance(action, argparse._StoreTrueAction):
            if raw.lower() not in ("true", "false", "1", "0", "yes", "no"):
                raise UsageError(f"{path}: {key} must be true or false, got {raw!r}")
            converted[key] = raw.lower() in ("true", "1", "yes")
        else:
            converted[key] = raw  # argparse runs string defaults through the flag's type
    sub.set_defaults(**converted)
    return parser.parse_args(argv)


def main(argv=None):
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return 0 if exc.code == 0 else 1
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.config:
            args = _apply_config(parser, argv, args.config)
        return args.func(args)
    except (NonFiniteError, CheckpointError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (UsageError, FileNotFoundError, ValueError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


def main_exit():
    sys.exit(main())


if __name__ == "__main__":
    main_exit()
