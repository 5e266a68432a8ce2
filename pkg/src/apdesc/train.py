"""SGD training loop with group-preserving batch samplers.

Batches are built from whole groups so every query row has its
positives present. Three samplers cover the dataset regimes: shuffled
whole-group packing, pairs of sequences (half the batch from each), and
a cycler for small datasets that guarantees every group recurs.
"""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field

import numpy as np

from .aploss import BinningConfig, ap_loss_batch
from .data import PatchDataset
from .errors import ConfigError, NumericError
from .evaluation import build_retrieval_protocol, retrieval_map
from .mining import DistractorSet

log = logging.getLogger(__name__)

REFERENCE_LR = 0.1
REFERENCE_BATCH = 1024


@dataclass(frozen=True)
class LinearToZero:
    """Learning rate decays linearly, hitting zero one epoch past the end."""

    total_epochs: int

    def factor(self, epoch: int) -> float:
        return max(0.0, 1.0 - epoch / self.total_epochs)


@dataclass(frozen=True)
class StepDecay:
    """Learning rate divided by a factor on a fixed epoch period."""

    divide_by: float = 10.0
    every: int = 10
    total_epochs: int = 32

    def factor(self, epoch: int) -> float:
        return float(self.divide_by ** -(epoch // self.every))


def base_learning_rate(batch_size: int) -> float:
    """Reference rate 0.1 at batch 1024, scaled linearly with batch size."""
    return REFERENCE_LR * batch_size / REFERENCE_BATCH


@dataclass(frozen=True)
class SGDConfig:
    """Optimizer settings; lr0 of None means the batch-size scaling rule."""

    schedule: LinearToZero | StepDecay
    lr0: float | None = None
    momentum: float = 0.9
    weight_decay: float = 1e-4
    seed: int = 0

    @property
    def epochs(self) -> int:
        return self.schedule.total_epochs


@dataclass(frozen=True)
class BatchSpec:
    """Sampler choice and batch size."""

    mode: str = "uniform"
    size: int = 64
    batches_per_epoch: int = 1000  # only the small-dataset cycler uses this

    def __post_init__(self) -> None:
        if self.mode not in ("uniform", "two_sequence", "small_dataset"):
            raise ConfigError(f"unknown batch mode {self.mode!r}")
        if self.size < 4:
            raise ConfigError("batch size must be at least 4")


class SGD:
    """Momentum SGD on a flat parameter vector with per-entry lr scales."""

    def __init__(self, scales: np.ndarray, momentum: float, weight_decay: float):
        self.scales = np.asarray(scales, dtype=np.float64)
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.velocity = np.zeros_like(self.scales)

    def step(self, params: np.ndarray, grad: np.ndarray, lr: float) -> None:
        effective = lr * self.scales
        self.velocity = self.momentum * self.velocity - effective * (
            grad + self.weight_decay * params
        )
        params += self.velocity


def _eligible_groups(dataset: PatchDataset) -> list[tuple[int, np.ndarray]]:
    """Groups with at least two members, the ones a batch can learn from."""
    out = []
    skipped = 0
    for gid, count in sorted(dataset.group_sizes().items()):
        if count >= 2:
            out.append((gid, dataset.members(gid)))
        else:
            skipped += 1
    if skipped:
        log.warning("ignoring %d single-member groups", skipped)
    return out


def _pack_groups(groups: list[np.ndarray], size: int) -> list[np.ndarray]:
    """Greedily fill batches with whole groups, in the order given."""
    batches: list[np.ndarray] = []
    current: list[np.ndarray] = []
    used = 0
    for members in groups:
        if len(members) > size:
            raise ConfigError(
                f"a group of {len(members)} patches cannot fit a batch of {size}"
            )
        if used + len(members) > size:
            batches.append(np.concatenate(current))
            current, used = [], 0
        current.append(members)
        used += len(members)
    if len(current) >= 2:
        batches.append(np.concatenate(current))
    return batches


def sample_uniform_groups(
    dataset: PatchDataset, size: int, rng: np.random.Generator
) -> np.ndarray:
    """One batch of shuffled whole groups, stopping before it overflows."""
    groups = _eligible_groups(dataset)
    if not groups:
        raise ValueError("dataset has no multi-member groups")
    order = rng.permutation(len(groups))
    batch: list[np.ndarray] = []
    used = 0
    for gi in order:
        members = groups[gi][1]
        if len(members) > size:
            raise ConfigError(
                f"a group of {len(members)} patches cannot fit a batch of {size}"
            )
        if used + len(members) > size:
            break
        batch.append(members)
        used += len(members)
    return np.concatenate(batch)


def iter_uniform_epoch(dataset, size, rng):
    groups = _eligible_groups(dataset)
    order = rng.permutation(len(groups))
    yield from _pack_groups([groups[i][1] for i in order], size)


def sample_two_sequence(
    dataset: PatchDataset, seq_a: int, seq_b: int, size: int, rng: np.random.Generator
) -> np.ndarray:
    """Whole groups from two sequences, up to half the batch from each."""
    if seq_a == seq_b:
        raise ValueError("need two distinct sequences")
    half = size // 2
    parts = []
    for seq in (seq_a, seq_b):
        gids = [g for g in dataset.groups_in_sequence(seq)]
        members = [dataset.members(g) for g in gids]
        members = [m for m in members if len(m) >= 2]
        if not members:
            raise ValueError(f"sequence {seq} has no multi-member groups")
        order = rng.permutation(len(members))
        used = 0
        for gi in order:
            m = members[gi]
            if used + len(m) > half:
                continue
            parts.append(m)
            used += len(m)
    return np.concatenate(parts)


def iter_two_sequence_epoch(dataset, size, rng):
    seqs = np.unique(dataset.sequence_ids)
    pairs = [(a, b) for i, a in enumerate(seqs) for b in seqs[i + 1 :]]
    for pi in rng.permutation(len(pairs)):
        a, b = pairs[pi]
        try:
            batch = sample_two_sequence(dataset, int(a), int(b), size, rng)
        except ValueError:
            log.warning("skipping sequence pair (%s, %s): too few usable groups", a, b)
            continue
        if np.unique(dataset.group_ids[batch]).size >= 2:
            yield batch


def iter_small_dataset_epoch(dataset, size, rng, batches: int):
    """Fixed batch count per epoch; batch k always contains group k mod G."""
    groups = _eligible_groups(dataset)
    if not groups:
        raise ValueError("dataset has no multi-member groups")
    n = len(groups)
    for k in range(batches):
        anchor = k % n
        chosen = [groups[anchor][1]]
        used = len(chosen[0])
        for gi in rng.permutation(n):
            if gi == anchor:
                continue
            m = groups[gi][1]
            if used + len(m) > size:
                continue
            chosen.append(m)
            used += len(m)
        yield np.concatenate(chosen)


def iter_epoch(dataset: PatchDataset, spec: BatchSpec, rng: np.random.Generator):
    if spec.mode == "uniform":
        yield from iter_uniform_epoch(dataset, spec.size, rng)
    elif spec.mode == "two_sequence":
        yield from iter_two_sequence_epoch(dataset, spec.size, rng)
    else:
        yield from iter_small_dataset_epoch(dataset, spec.size, rng, spec.batches_per_epoch)


def dihedral(patch: np.ndarray, code: int) -> np.ndarray:
    """One of the eight axis-aligned flips and rotations of a patch."""
    if not 0 <= code < 8:
        raise ValueError("dihedral code must be in 0..7")
    out = np.rot90(patch, code % 4)
    if code >= 4:
        out = np.fliplr(out)
    return out


def augment_batch(pixels: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """Independent uniformly drawn dihedral transform per patch access."""
    codes = rng.integers(0, 8, size=pixels.shape[0])
    return np.stack([dihedral(p, int(c)) for p, c in zip(pixels, codes)])


def triplet_count(group_sizes: np.ndarray, batch_size: int) -> int:
    """Ranking triplets a batch induces: sum over patches of (n-1)(M-n)."""
    n = np.asarray(group_sizes, dtype=np.int64)
    return int((n * (n - 1) * (batch_size - n)).sum())


@dataclass
class EpochStats:
    epoch: int
    lr: float
    mean_loss: float
    batches: int
    triplets: int
    val_map: float | None = None
    seconds: float = 0.0


def train(
    model,
    dataset: PatchDataset,
    sgd: SGDConfig,
    batch_spec: BatchSpec,
    bins: BinningConfig,
    *,
    val_dataset: PatchDataset | None = None,
    augment: bool = True,
    mined: DistractorSet | None = None,
) -> list[EpochStats]:
    """Run the full schedule, mutating the model parameters in place.

    Raises NumericError as soon as a loss or gradient stops being
    finite. With a mined distractor set, batches carry sequence labels
    so unlabeled same-sequence pairs stay neutral.
    """
    if dataset.patch_size != model.input_size:
        raise ValueError(
            f"dataset patches are {dataset.patch_size}px but the model wants {model.input_size}px"
        )
    rng = np.random.default_rng(sgd.seed)
    opt = SGD(model.lr_scales(), sgd.momentum, sgd.weight_decay)
    lr0 = sgd.lr0 if sgd.lr0 is not None else base_learning_rate(batch_spec.size)
    mined_pairs = mined.pairs if mined is not None else None

    history: list[EpochStats] = []
    for epoch in range(sgd.epochs):
        t0 = time.perf_counter()
        lr = lr0 * sgd.schedule.factor(epoch)
        losses = []
        triplets = 0
        for indices in iter_epoch(dataset, batch_spec, rng):
            pixels = dataset.pixels[indices]
            if augment:
                pixels = augment_batch(pixels, rng)
            groups = dataset.group_ids[indices]
            kwargs = {}
            if mined_pairs is not None:
                kwargs["sequence_ids"] = dataset.sequence_ids[indices]
                kwargs["mined_pairs"] = _pairs_in_batch(indices, mined_pairs)
            emb, cache = model.train_forward(pixels)
            result = ap_loss_batch(emb, groups, bins, **kwargs)
            grad = model.train_backward(cache, result.grad_embeddings)
            if not np.isfinite(grad).all():
                raise NumericError(f"gradient diverged in epoch {epoch}")
            opt.step(model.params.flat, grad, lr)
            if not np.isfinite(model.params.flat).all():
                raise NumericError(f"parameters diverged in epoch {epoch}")
            losses.append(result.loss)
            _, counts = np.unique(groups, return_counts=True)
            triplets += triplet_count(counts, len(indices))
        if not losses:
            raise ValueError("the sampler produced no usable batches")
        val = None
        if val_dataset is not None:
            emb = model.embed(val_dataset.pixels)
            protocol = build_retrieval_protocol(val_dataset, "all")
            val = retrieval_map(protocol, emb).metrics["map"]
        history.append(
            EpochStats(
                epoch=epoch,
                lr=lr,
                mean_loss=float(np.mean(losses)),
                batches=len(losses),
                triplets=triplets,
                val_map=val,
                seconds=time.perf_counter() - t0,
            )
        )
        log.info(
            "epoch %d lr %.5f loss %.4f val %s",
            epoch, lr, history[-1].mean_loss,
            "-" if val is None else f"{val:.4f}",
        )
    return history


def _pairs_in_batch(
    indices: np.ndarray, mined: set[tuple[int, int]]
) -> set[tuple[int, int]]:
    """Translate dataset-level mined pairs into batch row positions."""
    pos = {int(ds_i): row for row, ds_i in enumerate(indices)}
    out = set()
    for a, b in mined:
        if a in pos and b in pos:
            out.add((pos[a], pos[b]))
    return out
