"""Command-line harness: ``mambacafu [global flags] <verb> [verb flags]``.

Exit codes: 0 success, 2 config error, 3 data error, 4 numeric failure.
"""
from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from .config import ConfigError, ModelConfig, load_kv, parse_overrides
from .data import DataError, load_dataset, read_manifest, synth_generate, PackingError
from .train import (CheckpointError, NumericError, TrainConfig, ablate, ablation_table, evaluate,
                    evaluate_model, load_checkpoint, report, run_id_for, train)

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC = 0, 2, 3, 4


def _global_flags(defaults: bool) -> argparse.ArgumentParser:
    # declared on the main parser and on every verb, so flags work on either side of the verb
    d = (lambda v: v) if defaults else (lambda v: argparse.SUPPRESS)
    p = argparse.ArgumentParser(add_help=False)
    p.add_argument("--config", default=d(None), help="key = value config file")
    p.add_argument("--seed", type=int, default=d(None))
    p.add_argument("--deterministic", action=argparse.BooleanOptionalAction, default=d(None))
    p.add_argument("--out-dir", default=d(None))
    p.add_argument("--device", default=d(None))
    p.add_argument("--set", dest="overrides", action="append", default=d([]), metavar="KEY=VALUE",
                   help="override a config key (repeatable; wins over the file)")
    return p


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="mambacafu", parents=[_global_flags(True)],
                                     description="Train, evaluate and inspect MambaCAFU segmentation models.")
    verbs = parser.add_subparsers(dest="verb", required=True)
    g = _global_flags(False)

    p = verbs.add_parser("train", parents=[g], help="train a model")
    p.add_argument("--train-manifest")
    p.add_argument("--val-manifest")
    p.add_argument("--run-id")
    p.add_argument("--cnn-weights", help="named-array archive for the CNN backbone")
    p.add_argument("--transformer-weights", help="named-array archive for the transformer backbone")
    p.add_argument("--allow-partial", action="store_true", help="accept weight files that cover only part of a backbone")

    p = verbs.add_parser("eval", parents=[g], help="evaluate a checkpoint on a manifest")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--dump-stats", help="write per-stage tensor statistics of the first sample (JSONL)")

    p = verbs.add_parser("ablate", parents=[g], help="train and compare ablation variants")
    p.add_argument("--plan", default="table6", help="table6, table7, all, or table6:Baseline,table7:full")
    p.add_argument("--train-manifest")
    p.add_argument("--val-manifest")

    p = verbs.add_parser("count", parents=[g], help="parameter and MAC counts")
    p.add_argument("--json", action="store_true")

    p = verbs.add_parser("synth", parents=[g], help="write a synthetic shapes dataset")
    p.add_argument("--n", type=int, default=16)
    p.add_argument("--size", type=int, default=64)
    p.add_argument("--num-classes", type=int, default=3)
    p.add_argument("--split", default="train")

    p = verbs.add_parser("report", parents=[g], help="summarise evaluated runs")
    p.add_argument("run_dirs", nargs="+")
    p.add_argument("--output", help="markdown file (default: stdout only)")
    p.add_argument("--overlays", action="store_true")
    return parser


def resolve_config(args: argparse.Namespace) -> TrainConfig:
    """File values, then ``--set`` overrides, then dedicated flags."""
    values = {}
    if args.config:
        try:
            values.update(load_kv(args.config))
        except OSError as err:
            raise ConfigError([f"cannot read config file: {err}"]) from err
    values.update(parse_overrides(args.overrides or []))
    for key in ("seed", "deterministic", "out_dir", "device", "train_manifest", "val_manifest", "run_id"):
        v = getattr(args, key, None)
        if v is not None:
            values[key] = v
    try:
        return TrainConfig.from_kv(values)
    except TypeError as err:
        raise ConfigError([str(err)]) from err


def _cmd_train(args, cfg: TrainConfig) -> int:
    art = train(cfg, backbone_weights=(args.cnn_weights, args.transformer_weights),
                allow_partial=args.allow_partial)
    model, _ = load_checkpoint(art.best_checkpoint or art.last_checkpoint, device=cfg.device)
    manifest = cfg.val_manifest or cfg.train_manifest
    samples = load_dataset(read_manifest(manifest))
    res = evaluate_model(model, samples, cfg.batch_size, cfg.device, art.run_dir / "eval",
                         {"manifest": str(Path(manifest).resolve()), "step": art.steps})
    print(f"run {art.run_dir}: {art.steps} steps, mean DSC {res.overall.mean_dsc:.4f}")
    return EXIT_OK


def _cmd_eval(args, cfg: TrainConfig) -> int:
    out = Path(cfg.out_dir) / "eval" if cfg.out_dir else Path("eval")
    res = evaluate(args.checkpoint, args.manifest, out, batch_size=cfg.batch_size, device=cfg.device)
    if args.dump_stats:
        import torch

        from .encoder import dump_stats
        from .train import to_batch

        model, _ = load_checkpoint(args.checkpoint, device=cfg.device)
        images, _ = to_batch(load_dataset(args.manifest)[:1], cfg.device)
        model.eval()
        with torch.no_grad(), open(args.dump_stats, "w") as fh:
            dump_stats(model.forward_features(images), fh)
    print(res.overall.to_json())
    if res.overall.skipped_classes:
        print(f"skipped classes (undefined HD95): {res.overall.skipped_classes}", file=sys.stderr)
    return EXIT_OK


def _cmd_ablate(args, cfg: TrainConfig) -> int:
    rows = ablate(cfg, args.plan)
    print(ablation_table(rows), end="")
    return EXIT_OK


def _cmd_count(args, cfg: TrainConfig) -> int:
    from .complexity import count_params_flops

    c = count_params_flops(cfg.model)
    if args.json:
        print(json.dumps({"params": c.params, "gmac": c.gmacs, "params_by_block": c.params_by_block,
                          "macs_by_block": c.macs_by_block}, indent=1))
    else:
        print(c.table())
    return EXIT_OK


def _cmd_synth(args, cfg: TrainConfig) -> int:
    out = Path(cfg.out_dir or "synthetic")
    try:
        m = synth_generate(args.n, args.size, args.num_classes, cfg.seed, out, split=args.split)
    except ValueError as err:
        raise ConfigError([str(err)]) from err
    print(out / f"{m.split}.tsv")
    return EXIT_OK


def _cmd_report(args, cfg: TrainConfig) -> int:
    res = report(args.run_dirs, args.output, overlays=args.overlays)
    print(res.markdown, end="")
    return EXIT_OK


COMMANDS = {"train": _cmd_train, "eval": _cmd_eval, "ablate": _cmd_ablate, "count": _cmd_count,
            "synth": _cmd_synth, "report": _cmd_report}


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = resolve_config(args)
        return COMMANDS[args.verb](args, cfg)
    except ConfigError as err:
        print(f"config error: {err}", file=sys.stderr)
        return EXIT_CONFIG
    except CheckpointError as err:
        print(f"config error: {err}", file=sys.stderr)
        return EXIT_CONFIG
    except (DataError, PackingError) as err:
        print(f"data error: {err}", file=sys.stderr)
        return EXIT_DATA
    except NumericError as err:
        print(f"numeric failure: {err}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
