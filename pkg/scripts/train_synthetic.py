#!/usr/bin/env python3
"""Train a patch descriptor on synthetic sequences and evaluate it.

The default settings reproduce the package's reference experiment: a
linear 16-d real-valued descriptor trained for 30 epochs on 20 noisy
sequences, evaluated on 4 held-out sequences with the retrieval and
verification protocols. Variants worth trying:

    python3 scripts/train_synthetic.py --head tanh --dim 32
    python3 scripts/train_synthetic.py --st --epochs 40
    python3 scripts/train_synthetic.py --mine --batch-mode two_sequence
"""

import argparse
import csv
import time
from pathlib import Path

import numpy as np

from apdesc.aploss import HAMMING, BinningConfig
from apdesc.data import SyntheticConfig, generate_synthetic, split_by_sequence
from apdesc.evaluation import (
    build_retrieval_protocol,
    fpr95,
    make_verification_set,
    retrieval_map,
    verification_ap,
    write_report,
)
from apdesc.mining import MiningConfig, mine_distractors
from apdesc.models import TANH_HEAD, DescriptorModel, ModelConfig, binarize, save_model
from apdesc.stn import STConfig, SpatialTransformerModel
from apdesc.train import BatchSpec, LinearToZero, SGDConfig, train


def parse_args() -> argparse.Namespace:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--arch", default="linear", choices=["linear", "mlp2", "smallconv"])
    ap.add_argument("--dim", type=int, default=16)
    ap.add_argument("--head", default="unit", choices=["unit", "tanh"])
    ap.add_argument("--epochs", type=int, default=30)
    ap.add_argument("--bins", type=int, default=25,
                    help="histogram resolution for the euclidean loss (tanh codes bin per bit)")
    ap.add_argument("--batch", type=int, default=64)
    ap.add_argument("--batch-mode", default="uniform",
                    choices=["uniform", "two_sequence", "small_dataset"])
    ap.add_argument("--lr", type=float, default=0.05,
                    help="initial learning rate; pass 0 to use the batch-size-scaled default")
    ap.add_argument("--sequences", type=int, default=20)
    ap.add_argument("--groups", type=int, default=50)
    ap.add_argument("--group-size", type=int, default=4)
    ap.add_argument("--lighting", type=float, default=0.8)
    ap.add_argument("--val-sequences", type=int, default=4)
    ap.add_argument("--seed", type=int, default=7)
    ap.add_argument("--augment", action="store_true",
                    help="random dihedral flips of every training patch")
    ap.add_argument("--st", action="store_true",
                    help="learn an aligning affine transform in front of the descriptor")
    ap.add_argument("--mine", action="store_true",
                    help="mine in-sequence distractor pairs before training")
    ap.add_argument("--clusters", type=int, default=100)
    ap.add_argument("--percentile", type=float, default=20.0)
    ap.add_argument("--out", type=Path, default=Path("runs/synthetic"))
    return ap.parse_args()


def main() -> None:
    args = parse_args()
    t0 = time.time()
    patch_size = 42 if args.st else 32
    dataset = generate_synthetic(
        SyntheticConfig(
            sequences=args.sequences,
            groups_per_sequence=args.groups,
            group_size=args.group_size,
            patch_size=patch_size,
            lighting=args.lighting,
            seed=args.seed,
        )
    )
    train_ds, val_ds = split_by_sequence(dataset, args.val_sequences, seed=0)
    print(f"dataset: {len(dataset.pixels)} patches, "
          f"{len(train_ds.pixels)} train / {len(val_ds.pixels)} held out")

    desc_cfg = ModelConfig(arch=args.arch, dim=args.dim, head=args.head,
                           input_size=32, hidden=128, seed=0)
    if args.st:
        model = SpatialTransformerModel.create(desc_cfg, STConfig(input_size=42, output_size=32))
    else:
        model = DescriptorModel.create(desc_cfg)

    if args.head == "tanh":
        bins = BinningConfig(bins=args.dim, kind=HAMMING, code_length=args.dim)
    else:
        bins = BinningConfig(bins=args.bins)

    mined = None
    if args.mine:
        mined = mine_distractors(
            train_ds, MiningConfig(clusters=args.clusters, percentile=args.percentile, seed=0)
        )
        print(f"mined {len(mined.pairs)} distractor pairs at tau={mined.tau:.3f}")

    def embed(pixels: np.ndarray) -> np.ndarray:
        e = model.embed(pixels)
        return binarize(e) if model.head == TANH_HEAD else e

    protocol = build_retrieval_protocol(val_ds)

    def held_out():
        emb = embed(val_ds.pixels)
        report = retrieval_map(protocol, emb)
        a, b, labels = make_verification_set(val_ds, pairs_per_class=500, seed=0)
        dist = np.linalg.norm(emb[a] - emb[b], axis=1)
        return {
            "map": report.metrics["map"],
            "verification_ap": verification_ap(dist, labels),
            "fpr95": fpr95(dist, labels),
        }, report

    before, _ = held_out()
    print("before training:", " ".join(f"{k}={v:.4f}" for k, v in before.items()))

    stats = train(
        model,
        train_ds,
        SGDConfig(schedule=LinearToZero(args.epochs), lr0=args.lr or None),
        BatchSpec(mode=args.batch_mode, size=args.batch),
        bins,
        val_dataset=val_ds,
        augment=args.augment,
        mined=mined,
    )

    after, report = held_out()
    print("after training: ", " ".join(f"{k}={v:.4f}" for k, v in after.items()))
    print(f"total wall time {time.time() - t0:.1f}s")

    args.out.mkdir(parents=True, exist_ok=True)
    save_model(args.out / "model.ckpt", model)
    with open(args.out / "history.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["epoch", "lr", "mean_loss", "batches", "triplets", "val_map", "seconds"])
        for s in stats:
            writer.writerow([s.epoch, f"{s.lr:.6g}", f"{s.mean_loss:.6f}",
                             s.batches, s.triplets,
                             "" if s.val_map is None else f"{s.val_map:.6f}",
                             f"{s.seconds:.2f}"])
    write_report(report, args.out / "retrieval")
    print(f"wrote checkpoint, history and reports under {args.out}/")


if __name__ == "__main__":
    main()
