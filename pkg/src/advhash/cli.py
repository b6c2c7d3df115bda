"""Command-line entry points: train, eval, ablate, plot.

Exit codes: 0 success, 2 usage or configuration error, 3 numerical
divergence during training.
"""

import argparse
import json
import logging
import os
import shutil
import sys

import numpy as np

from .config import (
    ConfigurationError,
    build_dataset,
    experiment_to_dict,
    load_ablation_manifest,
    load_experiment_config,
    train_config_from_dict,
)
from .data import SplitSpec, save_split_manifest, split_semi_supervised
from .encoder import EncoderSpec, HashEncoder, encode_dataset
from .retrieval import RetrievalRun, evaluate
from .training import DivergenceError, Trainer

log = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_DIVERGED = 3


def _prepare_run(cfg):
    """Dataset, split, and the label-hidden training view for a config."""
    dataset = build_dataset(cfg.dataset)
    split = split_semi_supervised(dataset, cfg.split)
    train_view = dataset.subset(split.database).hide_labels_except(
        np.searchsorted(split.database, split.labeled_train))
    return dataset, split, train_view


def cmd_train(args):
    cfg = load_experiment_config(args.config)
    os.makedirs(cfg.out_dir, exist_ok=True)
    dataset, split, train_view = _prepare_run(cfg)
    if args.resume:
        if not os.path.exists(args.resume):
            raise ConfigurationError(f"checkpoint not found: {args.resume}")
        trainer = Trainer.from_checkpoint(args.resume, train_view,
                                          out_dir=cfg.out_dir, cfg=cfg.train)
        log.info("resumed from %s at epoch %d", args.resume, trainer.epoch)
    else:
        shutil.copyfile(args.config, os.path.join(cfg.out_dir, "config.json"))
        save_split_manifest(os.path.join(cfg.out_dir, "split.json"),
                            cfg.split, split)
        trainer = Trainer(cfg.train, train_view, out_dir=cfg.out_dir)
    trainer.train()
    ckpt = os.path.join(cfg.out_dir, "checkpoint.pt")
    print(f"trained {cfg.train.variant} for {trainer.epoch} epochs -> {ckpt}")
    return EXIT_OK


def _load_encoder_only(ckpt_path):
    """Rebuild just the hashing encoder from a checkpoint.

    The generator parameters stay untouched on disk; evaluation never
    instantiates them.
    """
    import torch

    state = torch.load(ckpt_path, weights_only=False)
    cfg = train_config_from_dict(state["config"])
    spec = EncoderSpec(
        code_length=cfg.code_length,
        image_size=cfg.image_size,
        mask_layers=tuple(cfg.mask_layers),
    )
    encoder = HashEncoder(spec)
    encoder.load_state_dict(state["encoder"])
    encoder.eval()
    return encoder, cfg


def _evaluate_checkpoint(ckpt_path, exp_cfg, cutoff=None):
    encoder, _ = _load_encoder_only(ckpt_path)
    dataset, split, _ = _prepare_run(exp_cfg)
    db_bits = encode_dataset(encoder, dataset, split.database)
    q_bits = encode_dataset(encoder, dataset, split.query)
    run = RetrievalRun.from_codes(
        db_bits, [dataset.class_ids[i] for i in split.database],
        q_bits, [dataset.class_ids[i] for i in split.query],
    )
    cutoffs = (None,) if cutoff is None else (None, cutoff)
    return evaluate(run, cutoffs=cutoffs)


def cmd_eval(args):
    if not os.path.exists(args.ckpt):
        raise ConfigurationError(f"checkpoint not found: {args.ckpt}")
    if args.split != "test":
        raise ConfigurationError(f"unknown split {args.split!r}; only 'test'")
    run_dir = os.path.dirname(os.path.abspath(args.ckpt))
    config_path = args.config or os.path.join(run_dir, "config.json")
    exp_cfg = load_experiment_config(config_path)
    metrics = _evaluate_checkpoint(args.ckpt, exp_cfg, cutoff=args.cutoff)
    out_path = args.out or os.path.join(run_dir, "metrics.json")
    with open(out_path, "w") as f:
        json.dump(metrics, f, indent=2, sort_keys=True)
    print(json.dumps({"map": metrics["map"],
                      "code_length": metrics["code_length"]}, sort_keys=True))
    return EXIT_OK


def cmd_ablate(args):
    from dataclasses import replace

    manifest = load_ablation_manifest(args.manifest)
    os.makedirs(manifest.out_dir, exist_ok=True)
    results = {}
    k = manifest.base.train.code_length
    for tag in manifest.variants:
        per_seed = []
        for seed in manifest.seeds:
            run_dir = os.path.join(
                manifest.out_dir,
                f"{tag.replace('(', '_').replace(')', '').replace('.', 'p')}_s{seed}",
            )
            os.makedirs(run_dir, exist_ok=True)
            train_cfg = replace(manifest.base.train, variant=tag, seed=seed)
            _, split, train_view = _prepare_run(manifest.base)
            trainer = Trainer(train_cfg, train_view, out_dir=run_dir)
            trainer.train()
            ckpt = os.path.join(run_dir, "checkpoint.pt")
            metrics = _evaluate_checkpoint(ckpt, replace(manifest.base,
                                                         out_dir=run_dir))
            per_seed.append(metrics["map"]["full"])
            log.info("%s seed %s -> mAP %.4f", tag, seed, per_seed[-1])
        results[tag] = per_seed

    table_rows = [
        (tag, float(np.mean(vals)), float(np.std(vals)), vals)
        for tag, vals in results.items()
    ]
    csv_path = os.path.join(manifest.out_dir, "ablation.csv")
    with open(csv_path, "w") as f:
        f.write(f"variant,bits,map_mean,map_std,per_seed\n")
        for tag, mean, std, vals in table_rows:
            f.write(f"{tag},{k},{mean!r},{std!r},{';'.join(repr(v) for v in vals)}\n")
    md_path = os.path.join(manifest.out_dir, "ablation.md")
    with open(md_path, "w") as f:
        f.write(f"| variant | mAP @ {k} bits (mean +- std over "
                f"{len(manifest.seeds)} seeds) |\n|---|---|\n")
        for tag, mean, std, _ in table_rows:
            f.write(f"| {tag} | {mean:.4f} +- {std:.4f} |\n")
    print(open(md_path).read())
    return EXIT_OK


def cmd_plot(args):
    from .plotting import emit_plots

    if not os.path.isdir(args.in_dir):
        raise ConfigurationError(f"input directory not found: {args.in_dir}")
    written = emit_plots(args.in_dir, args.out_dir)
    for path in written:
        print(path)
    if not written:
        log.warning("nothing to plot in %s", args.in_dir)
    return EXIT_OK


def build_parser():
    parser = argparse.ArgumentParser(
        prog="advhash",
        description="Adversarial semi-supervised hashing: train, evaluate, ablate.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="run or resume a training config")
    p.add_argument("--config", required=True)
    p.add_argument("--resume", default=None, metavar="CKPT")
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("eval", help="Hamming-ranking metrics for a checkpoint")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--split", default="test")
    p.add_argument("--cutoff", type=int, default=None)
    p.add_argument("--config", default=None,
                   help="experiment config (defaults to config.json next to the checkpoint)")
    p.add_argument("--out", default=None)
    p.set_defaults(fn=cmd_eval)

    p = sub.add_parser("ablate", help="run a variant matrix and tabulate mAP")
    p.add_argument("--manifest", required=True)
    p.set_defaults(fn=cmd_ablate)

    p = sub.add_parser("plot", help="render loss/P@N/PR plots")
    p.add_argument("--in", dest="in_dir", required=True)
    p.add_argument("--out", dest="out_dir", required=True)
    p.set_defaults(fn=cmd_plot)
    return parser


def main(argv=None):
    logging.basicConfig(level=logging.INFO,
                        format="%(asctime)s %(name)s %(message)s")
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.fn(args)
    except ConfigurationError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except DivergenceError as e:
        print(f"error: {e} (dump: {e.dump_path})", file=sys.stderr)
        return EXIT_DIVERGED


if __name__ == "__main__":
    sys.exit(main())
