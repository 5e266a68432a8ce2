"""Command line entry points: train, eval, mine, gradcheck.

Exit codes: 0 on success, 1 for usage or configuration problems,
2 for unreadable or malformed data, 3 for numeric divergence
(including a failed gradient check).
"""

from __future__ import annotations

import argparse
import csv
import logging
import sys
from pathlib import Path

import numpy as np

from .data import PatchDataset
from .errors import ConfigError, DataFormatError, NumericError
from .evaluation import (
    EvalReport,
    build_retrieval_protocol,
    fpr95,
    make_verification_set,
    retrieval_map,
    verification_ap,
    write_report,
)
from .gradcheck import check_names, run_gradchecks
from .mining import mine_distractors, write_distractors
from .models import TANH_HEAD, binarize, load_model, save_model
from .runconfig import (
    RunConfig,
    build_batch_spec,
    build_bins,
    build_datasets,
    build_mining,
    build_model,
    build_sgd,
)
from .train import train


class _Parser(argparse.ArgumentParser):
    """argparse with usage failures mapped onto exit code 1."""

    def error(self, message: str):
        self.print_usage(sys.stderr)
        print(f"error: {message}", file=sys.stderr)
        raise SystemExit(1)


def _sized_for(model, dataset: PatchDataset) -> PatchDataset:
    if dataset.patch_size == model.input_size:
        return dataset
    return dataset.resized(model.input_size)


def _embed(model, dataset: PatchDataset) -> np.ndarray:
    emb = model.embed(_sized_for(model, dataset).pixels)
    if model.head == TANH_HEAD:
        return binarize(emb)
    return emb


def _cmd_train(args) -> int:
    cfg = RunConfig.load(args.config)
    train_ds, val_ds = build_datasets(cfg)
    model = build_model(cfg)
    mined = None
    if cfg["mining.enabled"]:
        try:
            mined = mine_distractors(train_ds, build_mining(cfg))
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc
        print(f"mined {len(mined.pairs)} distractor pairs (tau = {mined.tau:.6f})")
    history = train(
        model,
        _sized_for(model, train_ds),
        build_sgd(cfg),
        build_batch_spec(cfg),
        build_bins(cfg),
        val_dataset=None if val_ds is None else _sized_for(model, val_ds),
        augment=cfg["augment.enabled"],
        mined=mined,
    )
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    save_model(out / "model.ckpt", model, run_config=cfg.echo())
    with open(out / "history.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["epoch", "lr", "mean_loss", "batches", "triplets", "val_map", "seconds"])
        for s in history:
            writer.writerow(
                [s.epoch, f"{s.lr:.8f}", f"{s.mean_loss:.6f}", s.batches, s.triplets,
                 "" if s.val_map is None else f"{s.val_map:.6f}", f"{s.seconds:.3f}"]
            )
    last = history[-1]
    tail = "" if last.val_map is None else f" val_map {last.val_map:.4f}"
    print(f"trained {len(history)} epochs, final loss {last.mean_loss:.4f}{tail}")
    print(f"wrote {out / 'model.ckpt'} and {out / 'history.csv'}")
    return 0


def _cmd_eval(args) -> int:
    cfg = RunConfig.load(args.config)
    model = load_model(args.checkpoint)
    train_ds, val_ds = build_datasets(cfg)
    dataset = val_ds if val_ds is not None else train_ds
    emb = _embed(model, dataset)

    out = Path(args.out)
    protocol = build_retrieval_protocol(dataset, cfg["eval.distractors"])
    retrieval = retrieval_map(protocol, emb)
    retrieval.config["distractors"] = cfg["eval.distractors"]
    write_report(retrieval, out / "retrieval")

    left, right, labels = make_verification_set(
        dataset, cfg["eval.pairs_per_class"], cfg["eval.seed"]
    )
    distances = np.linalg.norm(emb[left] - emb[right], axis=1)
    verification = EvalReport(
        task="verification",
        metrics={"ap": verification_ap(distances, labels), "fpr95": fpr95(distances, labels)},
        config={"pairs_per_class": cfg["eval.pairs_per_class"]},
    )
    write_report(verification, out / "verification")

    print(f"retrieval map = {retrieval.metrics['map']:.6f} ({cfg['eval.distractors']})")
    print(f"verification ap = {verification.metrics['ap']:.6f}")
    print(f"verification fpr95 = {verification.metrics['fpr95']:.6f}")
    print(f"reports under {out}")
    return 0


def _cmd_mine(args) -> int:
    cfg = RunConfig.load(args.config)
    train_ds, _ = build_datasets(cfg)
    try:
        mined = mine_distractors(train_ds, build_mining(cfg))
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    write_distractors(args.out, mined)
    print(f"mined {len(mined.pairs)} pairs (tau = {mined.tau:.6f}) -> {args.out}")
    return 0


def _cmd_gradcheck(args) -> int:
    names = args.only if args.only else None
    try:
        results = run_gradchecks(names, corrupt=args.corrupt)
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    for r in results:
        print(r.line())
    if all(r.passed for r in results):
        print(f"all {len(results)} gradient checks passed")
        return 0
    raise NumericError("one or more gradient checks failed")


def _build_parser() -> _Parser:
    parser = _Parser(prog="apdesc", description="Descriptor training and evaluation tools.")
    sub = parser.add_subparsers(dest="command", required=True)

    p_train = sub.add_parser("train", help="train a descriptor model")
    p_train.add_argument("--config", required=True, help="key = value run configuration")
    p_train.add_argument("--out", required=True, help="directory for model.ckpt and history.csv")
    p_train.set_defaults(func=_cmd_train)

    p_eval = sub.add_parser("eval", help="evaluate a checkpoint")
    p_eval.add_argument("--checkpoint", required=True)
    p_eval.add_argument("--config", required=True, help="describes the data and eval settings")
    p_eval.add_argument("--out", required=True, help="directory for report files")
    p_eval.set_defaults(func=_cmd_eval)

    p_mine = sub.add_parser("mine", help="mine visually confusable distractor pairs")
    p_mine.add_argument("--config", required=True)
    p_mine.add_argument("--out", required=True, help="output pair list file")
    p_mine.set_defaults(func=_cmd_mine)

    p_gc = sub.add_parser("gradcheck", help="finite-difference gradient verification")
    p_gc.add_argument("--only", action="append", choices=check_names(), help="run one named check")
    p_gc.add_argument("--corrupt", choices=check_names(), help=argparse.SUPPRESS)
    p_gc.set_defaults(func=_cmd_gradcheck)
    return parser


def main(argv: list[str] | None = None) -> int:
    logging.basicConfig(level=logging.INFO, format="%(message)s")
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 1
    except DataFormatError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return 2
    except NumericError as exc:
        print(f"numeric error: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
