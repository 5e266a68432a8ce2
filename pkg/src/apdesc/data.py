"""Patch datasets: container, loaders, and a synthetic generator.

A dataset is a stack of square grayscale patches in [0, 1] with a group
id per patch (patches of one physical surface point share a group) and
a sequence id per patch (the scene or capture the group came from). A
group never spans sequences.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
from PIL import Image

from .errors import DataFormatError
from .imageops import resize_batch
from .stn import affine_grid, sample_replicate

UBC_INDEX_FILE = "info.txt"
UBC_MOSAIC_GLOB = "patches*.bmp"
UBC_MOSAIC_SIZE = 1024
UBC_TILE = 64
UBC_TILES_PER_MOSAIC = (UBC_MOSAIC_SIZE // UBC_TILE) ** 2

HPATCHES_VARIANTS = tuple(
    ["ref"] + [f"e{i}" for i in range(1, 6)] + [f"h{i}" for i in range(1, 6)] + [f"t{i}" for i in range(1, 6)]
)
HPATCHES_PATCH = 65


@dataclass
class Patch:
    """One patch with its provenance labels."""

    pixels: np.ndarray
    group_id: int
    sequence_id: int
    tag: str = ""


@dataclass
class PatchDataset:
    """Stack of labeled patches with validated group structure."""

    pixels: np.ndarray
    group_ids: np.ndarray
    sequence_ids: np.ndarray
    sequence_names: tuple[str, ...]
    tags: tuple[str, ...] | None = None

    def __post_init__(self) -> None:
        self.pixels = np.asarray(self.pixels, dtype=np.float64)
        self.group_ids = np.asarray(self.group_ids, dtype=np.int64)
        self.sequence_ids = np.asarray(self.sequence_ids, dtype=np.int64)
        n = self.pixels.shape[0]
        if self.pixels.ndim != 3 or self.pixels.shape[1] != self.pixels.shape[2]:
            raise ValueError("pixels must be a (N, S, S) stack")
        if n == 0:
            raise ValueError("dataset has no patches")
        if self.group_ids.shape != (n,) or self.sequence_ids.shape != (n,):
            raise ValueError("label arrays must have one entry per patch")
        if self.pixels.min() < 0.0 or self.pixels.max() > 1.0:
            raise ValueError("pixel values must lie in [0, 1]")
        if self.sequence_ids.min() < 0 or self.sequence_ids.max() >= len(self.sequence_names):
            raise ValueError("sequence id out of range of the name table")
        if len(set(self.sequence_names)) != len(self.sequence_names):
            raise ValueError("sequence names must be unique")
        if self.tags is not None and len(self.tags) != n:
            raise ValueError("tags must have one entry per patch")
        for gid in np.unique(self.group_ids):
            seqs = np.unique(self.sequence_ids[self.group_ids == gid])
            if seqs.size != 1:
                raise ValueError(f"group {gid} spans sequences {seqs.tolist()}")

    def __len__(self) -> int:
        return self.pixels.shape[0]

    def __getitem__(self, i: int) -> Patch:
        tag = self.tags[i] if self.tags is not None else ""
        return Patch(self.pixels[i], int(self.group_ids[i]), int(self.sequence_ids[i]), tag)

    @property
    def patch_size(self) -> int:
        return self.pixels.shape[1]

    @property
    def n_groups(self) -> int:
        return np.unique(self.group_ids).size

    def group_sizes(self) -> dict[int, int]:
        gids, counts = np.unique(self.group_ids, return_counts=True)
        return dict(zip(gids.tolist(), counts.tolist()))

    def members(self, group_id: int) -> np.ndarray:
        return np.flatnonzero(self.group_ids == group_id)

    def groups_in_sequence(self, sequence_id: int) -> np.ndarray:
        return np.unique(self.group_ids[self.sequence_ids == sequence_id])

    def subset(self, indices: np.ndarray) -> "PatchDataset":
        idx = np.asarray(indices)
        tags = tuple(self.tags[i] for i in idx) if self.tags is not None else None
        return PatchDataset(
            self.pixels[idx],
            self.group_ids[idx],
            self.sequence_ids[idx],
            self.sequence_names,
            tags,
        )

    def resized(self, size: int) -> "PatchDataset":
        if size == self.patch_size:
            return self
        return replace(self, pixels=np.clip(resize_batch(self.pixels, size), 0.0, 1.0))


def split_by_sequence(
    dataset: PatchDataset, val_count: int, seed: int = 0
) -> tuple[PatchDataset, PatchDataset]:
    """Hold out whole sequences for validation, chosen by seeded shuffle."""
    seq_ids = np.unique(dataset.sequence_ids)
    if not 0 < val_count < seq_ids.size:
        raise ValueError("validation sequence count must leave both sides non-empty")
    order = np.random.default_rng(seed).permutation(seq_ids)
    val = set(order[:val_count].tolist())
    val_mask = np.isin(dataset.sequence_ids, list(val))
    return dataset.subset(np.flatnonzero(~val_mask)), dataset.subset(np.flatnonzero(val_mask))


def save_dataset(path: str | Path, dataset: PatchDataset) -> None:
    """Canonical container: 8-bit pixel block plus label tables."""
    np.savez(
        path,
        pixels=np.round(dataset.pixels * 255.0).astype(np.uint8),
        group_ids=dataset.group_ids,
        sequence_ids=dataset.sequence_ids,
        sequence_names=np.array(dataset.sequence_names, dtype=np.str_),
        tags=np.array(dataset.tags if dataset.tags is not None else [], dtype=np.str_),
    )


def load_dataset(path: str | Path) -> PatchDataset:
    try:
        with np.load(path, allow_pickle=False) as z:
            tags = tuple(z["tags"].tolist()) if z["tags"].size else None
            return PatchDataset(
                z["pixels"].astype(np.float64) / 255.0,
                z["group_ids"],
                z["sequence_ids"],
                tuple(z["sequence_names"].tolist()),
                tags,
            )
    except (KeyError, ValueError, OSError) as exc:
        raise DataFormatError(f"{path}: not a dataset container ({exc})") from exc


def _read_gray(path: Path) -> np.ndarray:
    try:
        with Image.open(path) as im:
            return np.asarray(im.convert("L"), dtype=np.uint8)
    except OSError as exc:
        raise DataFormatError(f"{path}: unreadable image ({exc})") from exc


def load_ubc(root: str | Path) -> PatchDataset:
    """Load a mosaic-format patch directory.

    Expects an index file with one whitespace-separated line per patch
    whose first field is the 3d point id, and 1024x1024 mosaic bitmaps
    holding 16x16 tiles of 64x64 pixels in row-major patch order.
    """
    root = Path(root)
    index = root / UBC_INDEX_FILE
    if not index.is_file():
        raise DataFormatError(f"{root}: missing index file {UBC_INDEX_FILE}")
    point_ids = []
    for ln, line in enumerate(index.read_text().splitlines(), start=1):
        fields = line.split()
        if not fields:
            continue
        try:
            point_ids.append(int(fields[0]))
        except ValueError as exc:
            raise DataFormatError(f"{index}:{ln}: bad point id {fields[0]!r}") from exc
    if not point_ids:
        raise DataFormatError(f"{index}: no patches listed")

    mosaics = sorted(root.glob(UBC_MOSAIC_GLOB))
    needed = (len(point_ids) + UBC_TILES_PER_MOSAIC - 1) // UBC_TILES_PER_MOSAIC
    if len(mosaics) < needed:
        raise DataFormatError(
            f"{root}: {len(point_ids)} patches need {needed} mosaics, found {len(mosaics)}"
        )
    tiles_per_row = UBC_MOSAIC_SIZE // UBC_TILE
    patches = np.empty((len(point_ids), UBC_TILE, UBC_TILE), dtype=np.float64)
    for m in range(needed):
        img = _read_gray(mosaics[m])
        if img.shape != (UBC_MOSAIC_SIZE, UBC_MOSAIC_SIZE):
            raise DataFormatError(f"{mosaics[m]}: expected a {UBC_MOSAIC_SIZE} square mosaic")
        start = m * UBC_TILES_PER_MOSAIC
        for t in range(min(UBC_TILES_PER_MOSAIC, len(point_ids) - start)):
            r, c = divmod(t, tiles_per_row)
            tile = img[r * UBC_TILE : (r + 1) * UBC_TILE, c * UBC_TILE : (c + 1) * UBC_TILE]
            patches[start + t] = tile / 255.0
    return PatchDataset(
        patches, np.asarray(point_ids), np.zeros(len(point_ids), dtype=np.int64), (root.name,)
    )


def load_hpatches(root: str | Path) -> PatchDataset:
    """Load a directory of patch sequences in stacked-variant format.

    Every sequence directory holds 16 images (ref, e1..e5, h1..h5,
    t1..t5), each a vertical stack of 65x65 patches; row i across the
    variants forms group i of that sequence. Directory name prefixes
    (v_, i_) and the variant tags are recorded but not interpreted.
    """
    root = Path(root)
    seq_dirs = sorted(p for p in root.iterdir() if p.is_dir())
    if not seq_dirs:
        raise DataFormatError(f"{root}: no sequence directories")
    all_patches = []
    group_ids = []
    sequence_ids = []
    tags = []
    names = []
    next_group = 0
    for seq_idx, seq_dir in enumerate(seq_dirs):
        names.append(seq_dir.name)
        stacks = {}
        for variant in HPATCHES_VARIANTS:
            path = seq_dir / f"{variant}.png"
            if not path.is_file():
                raise DataFormatError(f"{seq_dir}: missing variant {variant}.png")
            img = _read_gray(path)
            if img.shape[1] != HPATCHES_PATCH or img.shape[0] % HPATCHES_PATCH:
                raise DataFormatError(
                    f"{path}: expected a vertical stack of {HPATCHES_PATCH} squares"
                )
            stacks[variant] = img
        heights = {v: s.shape[0] // HPATCHES_PATCH for v, s in stacks.items()}
        if len(set(heights.values())) != 1:
            raise DataFormatError(f"{seq_dir}: variants disagree on patch count {heights}")
        rows = next(iter(heights.values()))
        for row in range(rows):
            for variant in HPATCHES_VARIANTS:
                sl = stacks[variant][row * HPATCHES_PATCH : (row + 1) * HPATCHES_PATCH]
                all_patches.append(sl / 255.0)
                group_ids.append(next_group + row)
                sequence_ids.append(seq_idx)
                tags.append(variant)
        next_group += rows
    return PatchDataset(
        np.stack(all_patches), np.asarray(group_ids), np.asarray(sequence_ids),
        tuple(names), tuple(tags),
    )


@dataclass(frozen=True)
class SyntheticConfig:
    """Controls for the procedural dataset.

    Groups render views of one low-frequency texture under small affine
    warps; each view also picks up a lighting pattern drawn from a
    subspace the textures never use, so identity is recoverable but not
    trivially visible in pixel distance. Groups within a sequence share
    part of their texture, making in-sequence confusions the hard ones.
    """

    sequences: int = 4
    groups_per_sequence: int = 16
    group_size: int = 4
    patch_size: int = 32
    warp: float = 0.03
    lighting: float = 0.35
    sequence_similarity: float = 0.5
    seed: int = 0

    def __post_init__(self) -> None:
        if min(self.sequences, self.groups_per_sequence, self.group_size) < 1:
            raise ValueError("sequence, group, and view counts must be positive")
        if not 0.0 <= self.sequence_similarity < 1.0:
            raise ValueError("sequence similarity must lie in [0, 1)")


_CANVAS = 64
_N_BASIS = 16


def _cosine_basis(size: int) -> np.ndarray:
    x = np.linspace(0.0, 1.0, size)
    funcs = []
    for i in range(1, 5):
        for j in range(1, 5):
            funcs.append(np.outer(np.cos(np.pi * i * x), np.cos(np.pi * j * x)))
    return np.stack(funcs)


def _sine_basis(size: int) -> np.ndarray:
    x = np.linspace(0.0, 1.0, size)
    funcs = []
    for i in range(1, 5):
        for j in range(1, 5):
            funcs.append(np.outer(np.sin(np.pi * i * x), np.sin(np.pi * j * x)))
    return np.stack(funcs)


def generate_synthetic(cfg: SyntheticConfig) -> PatchDataset:
    """Render a deterministic dataset from the given config."""
    rng = np.random.default_rng(cfg.seed)
    canvas_basis = _cosine_basis(_CANVAS)
    light_basis = _sine_basis(cfg.patch_size)
    n = cfg.sequences * cfg.groups_per_sequence * cfg.group_size
    pixels = np.empty((n, cfg.patch_size, cfg.patch_size))
    group_ids = np.empty(n, dtype=np.int64)
    sequence_ids = np.empty(n, dtype=np.int64)

    def unit(v):
        return v / np.linalg.norm(v)

    idx = 0
    gid = 0
    beta = cfg.sequence_similarity
    for s in range(cfg.sequences):
        base = unit(rng.normal(size=_N_BASIS))
        for _ in range(cfg.groups_per_sequence):
            detail = unit(rng.normal(size=_N_BASIS))
            coeff = unit(beta * base + (1.0 - beta) * detail)
            canvas = np.einsum("k,kxy->xy", coeff, canvas_basis)
            for _ in range(cfg.group_size):
                theta = np.array([[1.0, 0.0, 0.0], [0.0, 1.0, 0.0]])
                theta += rng.uniform(-cfg.warp, cfg.warp, size=(2, 3))
                view = sample_replicate(canvas, affine_grid(theta, cfg.patch_size))
                eta = rng.normal(size=_N_BASIS)
                view = view + cfg.lighting / np.sqrt(_N_BASIS) * np.einsum(
                    "k,kxy->xy", eta, light_basis
                )
                pixels[idx] = np.clip(0.5 + view / 5.0, 0.0, 1.0)
                group_ids[idx] = gid
                sequence_ids[idx] = s
                idx += 1
            gid += 1
    names = tuple(f"synthetic_{cfg.seed}_{s}" for s in range(cfg.sequences))
    return PatchDataset(pixels, group_ids, sequence_ids, names)
