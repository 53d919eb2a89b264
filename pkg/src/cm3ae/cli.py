"""Command-line entry point: ``cm3ae {pretrain,gen-data,probe,verify,export-attn}``."""
import argparse
import json
import logging
import sys
from pathlib import Path

from .config import PRESETS, preset
from .data import SyntheticConfig, generate_dataset, generate_synthetic_pair, load_dataset, load_sample, save_sample
from .exceptions import ConfigError

logger = logging.getLogger("cm3ae")


def _synthetic_for(model_config, **kw):
    return SyntheticConfig(
        image_size=model_config.image_size,
        voxel_count=model_config.voxel_count,
        events_per_voxel=model_config.events_per_voxel,
        **kw,
    )


def _add_train_flags(p):
    p.add_argument("--preset", choices=sorted(PRESETS), default="toy")
    p.add_argument("--mask-ratio", type=float, default=0.75)
    p.add_argument("--lr", type=float, default=2e-4)
    p.add_argument("--weight-decay", type=float, default=0.04)
    p.add_argument("--batch", type=int, default=8)
    p.add_argument("--epochs", type=int, default=1)
    p.add_argument("--steps", type=int, default=None, help="overrides --epochs")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--enable-mfrm", action=argparse.BooleanOptionalAction, default=True)
    p.add_argument("--enable-mcl", action=argparse.BooleanOptionalAction, default=True)
    p.add_argument("--grad-clip", type=float, default=None)
    p.add_argument("--data-dir", default=None, help="sample directories; synthetic data if omitted")
    p.add_argument("--num-samples", type=int, default=8, help="synthetic pairs when --data-dir is absent")
    p.add_argument("--data-seed", type=int, default=0)
    p.add_argument("--out-dir", required=True)
    p.add_argument("--checkpoint-every", type=int, default=0)
    p.add_argument("--resume", action="store_true", help="continue from OUT_DIR/checkpoint.cmck")


def cmd_pretrain(args):
    from .training import TrainConfig, pretrain

    cfg = TrainConfig(
        preset=args.preset,
        mask_ratio=args.mask_ratio,
        lr=args.lr,
        weight_decay=args.weight_decay,
        batch_size=args.batch,
        epochs=args.epochs,
        steps=args.steps,
        seed=args.seed,
        enable_mfrm=args.enable_mfrm,
        enable_mcl=args.enable_mcl,
        grad_clip=args.grad_clip,
        num_samples=args.num_samples,
        data_seed=args.data_seed,
        data_dir=args.data_dir,
        out_dir=args.out_dir,
        checkpoint_every=args.checkpoint_every,
    )
    trainer = pretrain(cfg, resume=args.resume)
    last = trainer.history[-1] if trainer.history else {}
    print(json.dumps({"steps": trainer.step, "checkpoint": str(Path(args.out_dir) / "checkpoint.cmck"), **last}))
    return 0


def cmd_gen_data(args):
    syn = _synthetic_for(preset(args.preset), num_classes=args.classes)
    out = Path(args.out_dir)
    pairs = generate_dataset(args.count, args.seed, syn)
    width = len(str(max(args.count - 1, 0)))
    for i, pair in enumerate(pairs):
        save_sample(pair, out / f"sample_{i:0{width}d}")
    print(f"wrote {len(pairs)} samples to {out}")
    return 0


def _probe_data(args, model_config):
    if args.data_dir:
        return load_dataset(args.data_dir, image_size=model_config.image_size, use_voxels=False)
    return generate_dataset(args.count, args.data_seed, _synthetic_for(model_config))


def cmd_probe(args):
    from .checkpoint import read_model_config
    from .estimator import CM3AEPretrainer, probe_accuracy

    model_config = read_model_config(args.checkpoint)
    pairs = _probe_data(args, model_config)
    use_fusion = args.mode == "rgb+event" and args.fusion
    params = dict(modality=args.mode, use_fusion=use_fusion, random_state=args.seed)
    trained = CM3AEPretrainer.from_checkpoint(args.checkpoint, **params)
    baseline = CM3AEPretrainer.random_init(model_config, **params)
    report = {
        "mode": args.mode,
        "fusion": use_fusion,
        "samples": len(pairs),
        "pretrained": probe_accuracy(trained, pairs, args.test_size, args.seed),
        "random_init": probe_accuracy(baseline, pairs, args.test_size, args.seed),
    }
    report["margin"] = report["pretrained"] - report["random_init"]
    print(json.dumps(report))
    return 0


def cmd_verify(args):
    from .verify import run

    skip = {"gradient check (toy, float64)"} if args.skip_gradcheck else set()
    results = run(mutation=args.mutate, skip=skip, grad_fraction=args.grad_fraction)
    failed = [name for name, (ok, _) in results.items() if not ok]
    print(f"{len(results) - len(failed)}/{len(results)} properties passed")
    return 1 if failed else 0


def cmd_export_attn(args):
    import torch

    from .attention import export_attention
    from .checkpoint import load_checkpoint, read_model_config
    from .training import build_model

    model_config = read_model_config(args.checkpoint)
    model = build_model(model_config, 0)
    load_checkpoint(args.checkpoint, model)
    if args.sample:
        sample = load_sample(args.sample, image_size=model_config.image_size, use_voxels=False)
    else:
        sample = generate_synthetic_pair(args.sample_seed, _synthetic_for(model_config))
    with torch.no_grad():
        paths = export_attention(model, sample, args.layer, args.out_dir)
    for modality, path in paths.items():
        print(f"{modality}: {path}")
    return 0


def build_parser():
    parser = argparse.ArgumentParser(prog="cm3ae", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("pretrain", help="self-supervised pre-training")
    _add_train_flags(p)
    p.set_defaults(func=cmd_pretrain)

    p = sub.add_parser("gen-data", help="write synthetic sample directories")
    p.add_argument("--preset", choices=sorted(PRESETS), default="toy")
    p.add_argument("--count", type=int, default=16)
    p.add_argument("--classes", type=int, default=4)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out-dir", required=True)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("probe", help="linear probe of frozen encoders vs. random init")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--mode", choices=("rgb", "event", "rgb+event"), default="rgb")
    p.add_argument("--fusion", action="store_true", help="rgb+event through the loaded fusion block")
    p.add_argument("--data-dir", default=None, help="labeled sample directories")
    p.add_argument("--count", type=int, default=600, help="synthetic samples without --data-dir")
    p.add_argument("--data-seed", type=int, default=1234)
    p.add_argument("--test-size", type=float, default=0.3)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_probe)

    p = sub.add_parser("verify", help="run the invariant suite")
    p.add_argument("--grad-fraction", type=float, default=0.01)
    p.add_argument("--skip-gradcheck", action="store_true")
    p.add_argument("--mutate", choices=("floor-shared",), default=None,
                   help="break a rule on purpose; the suite must then fail")
    p.set_defaults(func=cmd_verify)

    p = sub.add_parser("export-attn", help="CLS attention maps as grayscale PNGs")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--layer", type=int, required=True, help="0-based encoder block index")
    p.add_argument("--sample", default=None, help="sample directory; synthetic if omitted")
    p.add_argument("--sample-seed", type=int, default=0)
    p.add_argument("--out-dir", required=True)
    p.set_defaults(func=cmd_export_attn)
    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return args.func(args)
    except (ConfigError, FileNotFoundError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
