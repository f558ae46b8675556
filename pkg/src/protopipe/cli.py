"""Command-line entry point chaining the pipeline stages via checkpoint files.

Stages: gen-data -> pretrain -> metatrain -> eval / lr-search /
dump-embeddings, plus grad-check for the numeric verification suite.
Every subcommand writes the fully-resolved config next to its outputs so
that config + seed replays the run bitwise.

Exit codes: 0 success, 2 configuration error, 3 data error, 4 numeric
failure, 1 anything else.
"""

from __future__ import annotations

import argparse
import json
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from .backbone import (
    CheckpointError,
    SpecError,
    build_backbone,
    load_checkpoint,
    save_checkpoint,
)
from .config import ConfigError, parse_config
from .data import (
    DataError,
    Dataset,
    SplitDatasets,
    SyntheticSpec,
    apply_domain_shift,
    generate_synthetic,
    load_idx,
)
from .episodes import SamplerError, episode_rng
from .evalharness import EvaluationError, comparison_csv, dump_embeddings, evaluate
from .finetune import FineTuneError, select_learning_rate
from .pretrain import PretrainError, pretrain
from .protonet import history_to_csv, meta_train

EXIT_CONFIG = 2
EXIT_DATA = 3
EXIT_NUMERIC = 4

GRAD_TOLERANCE = 1e-4


def _load_splits(cfg) -> SplitDatasets:
    if cfg.idx is not None:
        parts = {}
        for split in ("train", "val", "test"):
            if split not in cfg.idx:
                raise DataError(f"data.idx does not define the {split!r} split")
            paths = cfg.idx[split]
            parts[split] = load_idx(paths["images"], paths["labels"], split=split,
                                    domain_name=cfg.domain_name)
        return SplitDatasets(**parts)
    return generate_synthetic(cfg.synthetic, domain_name=cfg.domain_name)


def _shifted(cfg, dataset: Dataset) -> Dataset:
    if cfg.shift is None:
        raise ConfigError("no data.shift configured but a shifted domain was requested")
    return apply_domain_shift(dataset, cfg.shift)


def _prepare_out(cfg, out_override):
    out = Path(out_override or cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "resolved-config.json", "w") as fh:
        fh.write(cfg.resolved_json())
        fh.write("\n")
    return out


def _load_config(args):
    if not args.config:
        raise ConfigError("--config is required for this subcommand")
    cfg = parse_config(args.config)
    if args.seed is not None:
        raw = json.loads(Path(args.config).read_text())
        raw["seed"] = args.seed
        from .config import parse_config_dict

        cfg = parse_config_dict(raw)
    return cfg


def _save_dataset(ds: Dataset, path) -> None:
    np.savez(path, items=ds.items, labels=ds.labels,
             domain_name=ds.domain_name, split=ds.split)


def cmd_gen_data(args):
    cfg = _load_config(args)
    out = _prepare_out(cfg, args.out)
    data_dir = out / "data"
    data_dir.mkdir(exist_ok=True)
    splits = _load_splits(cfg)
    for ds in splits:
        _save_dataset(ds, data_dir / f"{ds.domain_name}.{ds.split}.npz")
        print(f"{ds.domain_name}/{ds.split}: {len(ds.items)} items, "
              f"{len(ds.class_index)} classes")
    if cfg.shift is not None:
        for ds in splits:
            shifted = _shifted(cfg, ds)
            _save_dataset(shifted, data_dir / f"{shifted.domain_name}.{ds.split}.npz")
            print(f"{shifted.domain_name}/{ds.split}: {len(shifted.items)} items")
    return 0


def cmd_pretrain(args):
    cfg = _load_config(args)
    out = _prepare_out(cfg, args.out)
    splits = _load_splits(cfg)
    if cfg.pretrain_external:
        external_spec = SyntheticSpec(
            feature_dim=cfg.synthetic.feature_dim,
            num_classes=cfg.synthetic.num_classes,
            items_per_class=cfg.synthetic.items_per_class,
            class_sep=cfg.synthetic.class_sep,
            noise_sigma=cfg.synthetic.noise_sigma,
            seed=cfg.pretrain.seed + 0x5EED,
        )
        items = generate_synthetic(external_spec, domain_name="external").train.items
    else:
        items = splits.train.items
    if args.init:
        init = load_checkpoint(args.init)
        backbone = build_backbone(init.spec)
        for name, tensor in backbone.params.items():
            tensor.data[...] = init.params[name]
    else:
        backbone = build_backbone(cfg.backbone)
    pre_cfg = cfg.pretrain if args.steps is None else replace(cfg.pretrain, steps=args.steps)
    ckpt, losses = pretrain(backbone, items, pre_cfg, cfg.finetune.augment)
    save_checkpoint(ckpt, out / "pretrained.ckpt")
    with open(out / "pretrain-loss.csv", "w") as fh:
        fh.write("step,loss\n")
        fh.writelines(f"{i},{v!r}\n" for i, v in enumerate(losses))
    tail = f"{len(losses)} steps, final loss {losses[-1]:.4f}" if losses else "0 steps"
    print(f"pretrained checkpoint -> {out / 'pretrained.ckpt'} ({tail})")
    return 0


def cmd_metatrain(args):
    cfg = _load_config(args)
    out = _prepare_out(cfg, args.out)
    splits = _load_splits(cfg)
    init_path = args.init or (out / "pretrained.ckpt")
    if not Path(init_path).exists():
        raise DataError(f"initial checkpoint {init_path} not found; run pretrain first "
                        f"or pass --init")
    init = load_checkpoint(init_path)
    train_cfg = cfg.train if args.epochs is None else replace(cfg.train, epochs=args.epochs)
    ckpt, history = meta_train(init, splits.train, splits.val, cfg.sampler, train_cfg)
    save_checkpoint(ckpt, out / "metatrained.ckpt")
    history_to_csv(history, out / "train-history.csv")
    best = max((row["val_acc"] for row in history), default=float("nan"))
    print(f"meta-trained checkpoint -> {out / 'metatrained.ckpt'} "
          f"({len(history)} epochs, best val acc {best:.4f})")
    return 0


def _mode_requests(args):
    # readout is always the baseline row; fine-tuned modes add to it
    modes = [("readout", None, "readout")]
    if args.finetune:
        modes.append(("finetune", args.lr if args.lr is not None else 0.01, "finetune"))
    if args.lr_search:
        modes.append(("finetune_searched", None, "finetune-searched"))
    return modes


def cmd_eval(args):
    cfg = _load_config(args)
    out = _prepare_out(cfg, args.out)
    splits = _load_splits(cfg)
    ckpt_path = args.ckpt or (out / "metatrained.ckpt")
    ckpt = load_checkpoint(ckpt_path)
    episodes = args.episodes or cfg.eval_episodes
    workers = args.workers or cfg.workers
    domains = [(splits.test, splits.val)]
    if args.shifted:
        domains.append((_shifted(cfg, splits.test), _shifted(cfg, splits.val)))
    reports = []
    for test_ds, val_ds in domains:
        for mode, lr, slug in _mode_requests(args):
            report = evaluate(
                ckpt, test_ds, cfg.sampler, episodes, mode=mode,
                policy=cfg.finetune, lr=lr, val_dataset=val_ds, workers=workers,
                config_digest=cfg.digest(),
            )
            report.write(out / f"report-{test_ds.domain_name}-{slug}.json")
            reports.append(report)
            print(f"{test_ds.domain_name} [{report.mode}] "
                  f"acc {report.mean_accuracy:.4f} +/- {report.ci95_half_width:.4f} "
                  f"({episodes} episodes, {report.wall_clock_seconds:.1f}s)")
    comparison_csv(reports, out / "comparison.csv")
    return 0


def cmd_lr_search(args):
    cfg = _load_config(args)
    out = _prepare_out(cfg, args.out)
    splits = _load_splits(cfg)
    ckpt = load_checkpoint(args.ckpt or (out / "metatrained.ckpt"))
    val_ds = _shifted(cfg, splits.val) if args.shifted else splits.val
    chosen, means = select_learning_rate(
        ckpt, val_ds, cfg.sampler, cfg.finetune,
        episode_rng(cfg.sampler.seed, 5),
    )
    payload = {
        "domain_name": val_ds.domain_name,
        "chosen_lr": chosen,
        "accuracy_by_lr": {f"{lr:g}": acc for lr, acc in means.items()},
    }
    with open(out / "lr-search.json", "w") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
        fh.write("\n")
    print(f"{val_ds.domain_name}: chosen lr {chosen:g} "
          + " ".join(f"lr={lr:g}:{acc:.3f}" for lr, acc in means.items()))
    return 0


def cmd_dump_embeddings(args):
    cfg = _load_config(args)
    out = _prepare_out(cfg, args.out)
    splits = _load_splits(cfg)
    ds = {"train": splits.train, "val": splits.val, "test": splits.test}[args.split]
    if args.shifted:
        ds = _shifted(cfg, ds)
    ckpt = load_checkpoint(args.ckpt or (out / "metatrained.ckpt"))
    path = out / "embeddings.csv"
    dump_embeddings(ckpt, ds, args.max_items, path)
    print(f"embeddings -> {path}")
    return 0


def cmd_grad_check(args):
    from .verification import gradient_report

    report = gradient_report(num_inputs=args.inputs)
    failed = False
    for name, err in report.items():
        status = "ok" if err <= GRAD_TOLERANCE else "FAIL"
        if err > GRAD_TOLERANCE:
            failed = True
        print(f"{name:32s} max rel error {err:.3e}  {status}")
    if failed:
        print(f"gradient check FAILED (tolerance {GRAD_TOLERANCE:g})", file=sys.stderr)
        return EXIT_NUMERIC
    return 0


def build_parser():
    parser = argparse.ArgumentParser(
        prog="protopipe",
        description="Prototype-based few-shot pipeline: pre-train, meta-train, "
                    "fine-tune, evaluate.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, needs_config=True):
        p.add_argument("--config", required=needs_config, help="experiment config JSON")
        p.add_argument("--out", default=None, help="output directory override")
        p.add_argument("--seed", type=int, default=None, help="master seed override")

    p = sub.add_parser("gen-data", help="generate/export the configured datasets")
    common(p)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("pretrain", help="self-supervised pre-training stage")
    common(p)
    p.add_argument("--init", default=None, help="start from an existing checkpoint")
    p.add_argument("--steps", type=int, default=None)
    p.set_defaults(func=cmd_pretrain)

    p = sub.add_parser("metatrain", help="episodic meta-training stage")
    common(p)
    p.add_argument("--init", default=None, help="initial checkpoint "
                                                "(default: <out>/pretrained.ckpt)")
    p.add_argument("--epochs", type=int, default=None)
    p.set_defaults(func=cmd_metatrain)

    p = sub.add_parser("eval", help="multi-episode evaluation with reports")
    common(p)
    p.add_argument("--ckpt", default=None, help="checkpoint to evaluate "
                                                "(default: <out>/metatrained.ckpt)")
    p.add_argument("--episodes", type=int, default=None)
    p.add_argument("--workers", type=int, default=None)
    p.add_argument("--finetune", action="store_true",
                   help="also evaluate with per-task fine-tuning at --lr")
    p.add_argument("--lr", type=float, default=None, help="fine-tune learning rate")
    p.add_argument("--lr-search", action="store_true",
                   help="also evaluate with the domain-searched learning rate")
    p.add_argument("--shifted", action="store_true",
                   help="additionally evaluate the configured shifted domain")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("lr-search", help="domain-wise learning-rate selection")
    common(p)
    p.add_argument("--ckpt", default=None)
    p.add_argument("--shifted", action="store_true")
    p.set_defaults(func=cmd_lr_search)

    p = sub.add_parser("dump-embeddings", help="export embeddings as CSV")
    common(p)
    p.add_argument("--ckpt", default=None)
    p.add_argument("--split", choices=("train", "val", "test"), default="test")
    p.add_argument("--shifted", action="store_true")
    p.add_argument("--max-items", type=int, default=500)
    p.set_defaults(func=cmd_dump_embeddings)

    p = sub.add_parser("grad-check", help="finite-difference verification suite")
    p.add_argument("--inputs", type=int, default=100,
                   help="random inputs per op (default 100)")
    p.set_defaults(func=cmd_grad_check)

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (ConfigError, SpecError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (DataError, SamplerError, CheckpointError, FileNotFoundError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (FineTuneError, EvaluationError, PretrainError) as exc:
        print(f"numeric error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except Exception as exc:  # pragma: no cover - safety net
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
