"""Command-line entry points for the full experiment pipeline.

Subcommands: gen-data, pretrain, train, detect, eval, ablate, alpha-sweep,
grad-check, dump-embeddings. Exit code 0 on success; failures print a
structured JSON error on stderr and exit nonzero.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from .checkpoint import load_checkpoint
from .config import ExperimentConfig, check_structural_match


def _load_config(path: str | None, seed: int | None) -> ExperimentConfig:
    cfg = ExperimentConfig.from_file(path) if path else ExperimentConfig()
    if seed is not None:
        cfg.seed = seed
    return cfg


def _dataset_meta(data_dir: str) -> dict:
    return json.loads((Path(data_dir) / "dataset.json").read_text(encoding="utf-8"))


def _config_from_checkpoint(ckpt) -> ExperimentConfig:
    raw = ckpt.metadata.get("config")
    if not raw:
        raise ValueError("checkpoint metadata carries no configuration")
    return ExperimentConfig.from_dict(raw)


def cmd_gen_data(args) -> int:
    from .data import generate_dataset, save_dataset

    cfg = _load_config(args.config, args.seed)
    split = generate_dataset(cfg)
    save_dataset(split, args.out, cfg)
    print(json.dumps({
        "out": str(args.out),
        "train": len(split.train),
        "test": len(split.test),
        "base": split.base_categories,
        "target": split.target_categories,
    }, indent=1, sort_keys=True))
    return 0


def cmd_pretrain(args) -> int:
    from .data import load_dataset
    from .grounding import pretrain
    from .text import Vocabulary

    cfg = _load_config(args.config, args.seed)
    meta = _dataset_meta(args.data)
    check_structural_match(cfg.structural_hash(), meta["structural_hash"], "dataset")
    dataset = load_dataset(args.data)
    vocab = Vocabulary.load(Path(args.data) / "vocab.txt")
    log_path = args.log or (str(args.out) + ".log.csv")
    pretrain(dataset, cfg, no_grounding=args.no_grounding, no_auxiliary=args.no_auxiliary,
             vocab=vocab, out_path=args.out, log_path=log_path, quiet=args.quiet)
    print(json.dumps({"out": str(args.out), "log": log_path}, indent=1, sort_keys=True))
    return 0


def cmd_train(args) -> int:
    from .data import load_dataset
    from .detection import train_detector

    cfg = _load_config(args.config, args.seed)
    meta = _dataset_meta(args.data)
    check_structural_match(cfg.structural_hash(), meta["structural_hash"], "dataset")
    pretrained = None
    if not args.no_pretraining:
        if not args.pretrained:
            raise ValueError("either pass --pretrained <ckpt> or use --no-pretraining")
        pretrained = load_checkpoint(args.pretrained)
    dataset = load_dataset(args.data)
    train_detector(
        dataset, cfg,
        pretrained=pretrained,
        no_transfer_v2l=args.no_transfer_v2l,
        unfreeze_v2l=args.unfreeze_v2l,
        alpha=args.alpha,
        out_path=args.out,
        log_path=args.log or (str(args.out) + ".log.csv"),
        quiet=args.quiet,
    )
    print(json.dumps({"out": str(args.out)}, indent=1, sort_keys=True))
    return 0


def _load_detector_for(args):
    from .data import load_dataset
    from .detection import load_detector

    ckpt = load_checkpoint(args.ckpt)
    cfg = _config_from_checkpoint(ckpt)
    meta = _dataset_meta(args.data)
    check_structural_match(ckpt.structural_hash, meta["structural_hash"], "dataset vs checkpoint")
    return load_detector(ckpt, cfg), load_dataset(args.data)


def _resolve_classes(spec: str, dataset) -> list[str]:
    if spec == "base":
        return sorted(dataset.base_categories)
    if spec == "target":
        return sorted(dataset.target_categories)
    if spec == "all":
        return sorted(set(dataset.base_categories) | set(dataset.target_categories))
    names = [line.strip() for line in Path(spec).read_text(encoding="utf-8").splitlines() if line.strip()]
    if not names:
        raise ValueError(f"class file {spec!r} is empty")
    return names


def cmd_detect(args) -> int:
    from .evaluation import detect_test_set, detections_to_json

    det, dataset = _load_detector_for(args)
    names = _resolve_classes(args.classes, dataset)
    det.set_classes(names)
    detections = detect_test_set(det, dataset)
    detections_to_json(detections, dataset, names, args.out)
    print(json.dumps({"out": str(args.out), "images": len(dataset.test),
                      "detections": sum(len(d) for d in detections)}, indent=1, sort_keys=True))
    return 0


def cmd_eval(args) -> int:
    from .evaluation import evaluate

    det, dataset = _load_detector_for(args)
    report = evaluate(det, dataset, args.protocol)
    report.to_json(args.out)
    report.to_csv(str(args.out) + ".csv" if not str(args.out).endswith(".json")
                  else str(args.out)[: -len(".json")] + ".csv")
    print(report.to_json().strip())
    return 0


def cmd_dump_embeddings(args) -> int:
    from .evaluation import dump_embeddings

    det, dataset = _load_detector_for(args)
    n = dump_embeddings(det, dataset, args.out)
    print(json.dumps({"out": str(args.out), "records": n}, indent=1, sort_keys=True))
    return 0


def cmd_ablate(args) -> int:
    from .runner import DEFAULT_CELLS, run_matrix

    cfg = _load_config(args.config, None)
    cells = args.cells or list(DEFAULT_CELLS)
    seeds = args.seeds or [cfg.seed + i for i in range(3)]
    result = run_matrix(cfg, cells, seeds, args.out, quiet=args.quiet)
    failures = sum(1 for r in result.rows if r.error)
    print(json.dumps({"out": str(args.out), "cells": cells, "seeds": seeds,
                      "failures": failures}, indent=1, sort_keys=True))
    return 0


def cmd_alpha_sweep(args) -> int:
    from .runner import alpha_sweep

    cfg = _load_config(args.config, None)
    payload = alpha_sweep(cfg, args.alphas, args.out, quiet=args.quiet)
    print(json.dumps(payload, indent=1, sort_keys=True))
    return 0


def cmd_grad_check(args) -> int:
    from .verification import run_suite, suite_passed

    results = run_suite(n_seeds=args.seeds)
    worst = max(rep.max_rel_err for _, rep in results)
    for name, rep in results:
        if not rep.passed or args.verbose:
            print(f"{name}: {rep}")
    ok = suite_passed(results)
    print(f"grad-check: {len(results)} checks over {args.seeds} seeds, "
          f"worst rel err {worst:.3e}, {'PASS' if ok else 'FAIL'}")
    return 0 if ok else 1


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="ovdet",
                                     description="Desk-scale open-vocabulary detection pipeline")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate the synthetic dataset")
    p.add_argument("--config", default=None)
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=None)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("pretrain", help="caption-grounding pretraining")
    p.add_argument("--data", required=True)
    p.add_argument("--config", default=None)
    p.add_argument("--out", required=True)
    p.add_argument("--log", default=None)
    p.add_argument("--no-grounding", action="store_true")
    p.add_argument("--no-auxiliary", action="store_true")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--quiet", action="store_true")
    p.set_defaults(func=cmd_pretrain)

    p = sub.add_parser("train", help="train the detector on base-class boxes")
    p.add_argument("--pretrained", default=None)
    p.add_argument("--data", required=True)
    p.add_argument("--config", default=None)
    p.add_argument("--out", required=True)
    p.add_argument("--log", default=None)
    p.add_argument("--alpha", type=float, default=None)
    group = p.add_mutually_exclusive_group()
    group.add_argument("--no-pretraining", action="store_true")
    group.add_argument("--no-transfer-v2l", action="store_true")
    group.add_argument("--unfreeze-v2l", action="store_true")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--quiet", action="store_true")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("detect", help="run inference and dump detections")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--classes", required=True,
                   help="base|target|all or a file with one class name per line")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_detect)

    p = sub.add_parser("eval", help="mAP evaluation under a protocol")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--protocol", choices=("base", "target", "generalized"), required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("ablate", help="run the ablation matrix")
    p.add_argument("--config", default=None)
    p.add_argument("--out", required=True)
    p.add_argument("--cells", nargs="*", default=None)
    p.add_argument("--seeds", nargs="*", type=int, default=None)
    p.add_argument("--quiet", action="store_true")
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("alpha-sweep", help="background-weight trade-off curve")
    p.add_argument("--config", default=None)
    p.add_argument("--out", required=True)
    p.add_argument("--alphas", nargs="*", type=float, default=[0.0, 0.2, 1.0])
    p.add_argument("--quiet", action="store_true")
    p.set_defaults(func=cmd_alpha_sweep)

    p = sub.add_parser("grad-check", help="finite-difference verification suite")
    p.add_argument("--seeds", type=int, default=20)
    p.add_argument("--verbose", action="store_true")
    p.set_defaults(func=cmd_grad_check)

    p = sub.add_parser("dump-embeddings", help="per-detection embeddings for external plots")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_dump_embeddings)

    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except Exception as exc:  # structured failure contract for scripting
        print(json.dumps({"error": type(exc).__name__, "message": str(exc)}),
              file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
