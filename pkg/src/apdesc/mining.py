"""Visual-similarity mining of extra negative pairs.

Patches are embedded with a fixed hand-crafted feature (oriented
gradient cells plus a downsampled intensity thumbnail), clustered, and
pairs of patches from well-separated clusters are marked as usable
negatives even inside one sequence, where unlabeled pairs are otherwise
treated as neutral.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .data import PatchDataset
from .errors import DataFormatError
from .imageops import bilinear_resize

FEATURE_SIZE = 64
CELL = 8
N_ORIENT = 18
THUMB = 16
FEATURE_DIM = (FEATURE_SIZE // CELL) ** 2 * 31 + THUMB * THUMB

_TRUNC = 0.2
_BLOCK_EPS = 1e-10
# energy contribution of a uniformly filled block, used to scale the
# texture-energy channels
_TEXTURE_WEIGHT = 1.0 / math.sqrt(N_ORIENT)


@dataclass(frozen=True)
class MiningConfig:
    """Cluster count and separation percentile for mining."""

    clusters: int = 100
    percentile: float = 20.0
    seed: int = 0
    kmeans_iters: int = 50

    def __post_init__(self) -> None:
        if self.clusters < 2:
            raise ValueError("mining needs at least two clusters")
        if not 0.0 < self.percentile <= 100.0:
            raise ValueError("percentile must lie in (0, 100]")


@dataclass
class DistractorSet:
    """Mined cross-cluster pairs, stored with the threshold that made them."""

    pairs: set[tuple[int, int]]
    tau: float
    clusters: int
    percentile: float

    def __contains__(self, pair: tuple[int, int]) -> bool:
        a, b = pair
        return (min(a, b), max(a, b)) in self.pairs


def _cell_histograms(patch: np.ndarray) -> np.ndarray:
    """Orientation histograms (cells_y, cells_x, 18) of a square patch."""
    gy, gx = np.gradient(patch)
    mag = np.hypot(gx, gy)
    ang = np.arctan2(gy, gx) % (2.0 * np.pi)
    bins = np.minimum((ang / (2.0 * np.pi) * N_ORIENT).astype(int), N_ORIENT - 1)
    n_cells = patch.shape[0] // CELL
    hist = np.zeros((n_cells, n_cells, N_ORIENT))
    cy = np.arange(patch.shape[0]) // CELL
    cx = np.arange(patch.shape[1]) // CELL
    np.add.at(hist, (cy[:, None], cx[None, :], bins), mag)
    return hist


def hog_feature(patch: np.ndarray) -> np.ndarray:
    """31 channels per cell: 18 contrast sensitive, 9 insensitive, 4 energy.

    Each cell is normalized against its four 2x2 neighborhoods (edge
    cells reuse their clipped neighbors), values truncated at 0.2.
    """
    if patch.shape[0] % CELL or patch.shape[0] != patch.shape[1]:
        raise ValueError("patch side must be a multiple of the cell size")
    sens = _cell_histograms(patch)
    insens = sens[:, :, : N_ORIENT // 2] + sens[:, :, N_ORIENT // 2 :]
    energy = (insens**2).sum(axis=2)
    n = sens.shape[0]
    idx = np.arange(n)

    def clipped(i):
        return np.clip(idx + i, 0, n - 1)

    feats = np.zeros((n, n, 31))
    texture = np.zeros((n, n, 4))
    for t, (di, dj) in enumerate([(-1, -1), (-1, 1), (1, -1), (1, 1)]):
        block = (
            energy
            + energy[clipped(di), :]
            + energy[:, clipped(dj)]
            + energy[clipped(di), :][:, clipped(dj)]
        )
        norm = np.sqrt(block + _BLOCK_EPS)[:, :, None]
        hs = np.minimum(sens / norm, _TRUNC)
        hi = np.minimum(insens / norm, _TRUNC)
        feats[:, :, :N_ORIENT] += 0.5 * hs
        feats[:, :, N_ORIENT : N_ORIENT + 9] += 0.5 * hi
        texture[:, :, t] = _TEXTURE_WEIGHT * hs.sum(axis=2)
    feats[:, :, 27:] = texture
    return feats


def mining_feature(patch: np.ndarray) -> np.ndarray:
    """Fixed 2240-d descriptor: gradient cells plus a 16x16 thumbnail."""
    patch = np.asarray(patch, dtype=np.float64)
    big = bilinear_resize(patch, FEATURE_SIZE)
    cells = hog_feature(big).ravel()
    thumb = bilinear_resize(patch, THUMB).ravel()
    return np.concatenate([cells, thumb])


def mining_features(dataset: PatchDataset) -> np.ndarray:
    return np.stack([mining_feature(p) for p in dataset.pixels])


@dataclass
class KMeansResult:
    centers: np.ndarray
    assignments: np.ndarray
    inertia_path: list[float]


def kmeans(
    x: np.ndarray, k: int, seed: int = 0, max_iter: int = 50
) -> KMeansResult:
    """Plain Lloyd iterations with farthest-point reseeding of empties."""
    x = np.asarray(x, dtype=np.float64)
    n = x.shape[0]
    if k > n:
        raise ValueError(f"cannot form {k} clusters from {n} points")
    rng = np.random.default_rng(seed)
    centers = x[rng.choice(n, size=k, replace=False)].copy()
    prev = None
    inertia_path: list[float] = []
    sq_x = (x * x).sum(axis=1)
    for _ in range(max_iter):
        d2 = sq_x[:, None] - 2.0 * (x @ centers.T) + (centers * centers).sum(axis=1)
        assign = d2.argmin(axis=1)
        best = np.maximum(d2[np.arange(n), assign], 0.0)
        inertia_path.append(float(best.sum()))
        for empty in np.setdiff1d(np.arange(k), assign):
            far = int(best.argmax())
            assign[far] = empty
            best[far] = 0.0
        for c in range(k):
            centers[c] = x[assign == c].mean(axis=0)
        if prev is not None and np.array_equal(prev, assign):
            break
        prev = assign.copy()
    return KMeansResult(centers, assign, inertia_path)


def separation_threshold(center_distances: np.ndarray, percentile: float) -> float:
    """Nearest-rank (exclusive) percentile of the center distance list.

    With k = floor(p * L / 100), the threshold is the k-th smallest
    distance, or 0 when k is 0, so at most p percent of the distances
    sit at or below it. Raising p never lowers the threshold.
    """
    d = np.sort(np.asarray(center_distances, dtype=np.float64))
    rank = int(math.floor(percentile * d.size / 100.0))
    if rank == 0:
        return 0.0
    return float(d[rank - 1])


def mine_distractors(dataset: PatchDataset, cfg: MiningConfig) -> DistractorSet:
    """Mark cross-cluster, cross-group pairs from well-separated clusters.

    Comparisons against the threshold are strict, so coincident cluster
    centers never generate pairs.
    """
    feats = mining_features(dataset)
    km = kmeans(feats, cfg.clusters, cfg.seed, cfg.kmeans_iters)
    k = cfg.clusters
    diff = km.centers[:, None, :] - km.centers[None, :, :]
    cdist = np.sqrt((diff**2).sum(axis=2))
    # centers that agree up to mean-roundoff are coincident, and
    # coincident centers must never mark pairs under the strict rule
    scale = max(1.0, float(np.abs(km.centers).max()))
    cdist[cdist <= 1e-9 * scale] = 0.0
    iu = np.triu_indices(k, 1)
    tau = separation_threshold(cdist[iu], cfg.percentile)

    members = [np.flatnonzero(km.assignments == c) for c in range(k)]
    gids = dataset.group_ids
    pairs: set[tuple[int, int]] = set()
    for a in range(k):
        for b in range(a + 1, k):
            if cdist[a, b] <= tau:
                continue
            for i in members[a]:
                for j in members[b]:
                    if gids[i] != gids[j]:
                        pairs.add((min(int(i), int(j)), max(int(i), int(j))))
    return DistractorSet(pairs, tau, cfg.clusters, cfg.percentile)


def write_distractors(path: str | Path, mined: DistractorSet) -> None:
    """Text format: commented header with the mining settings, then pairs."""
    lines = [
        f"# clusters = {mined.clusters}",
        f"# percentile = {mined.percentile}",
        f"# tau = {mined.tau!r}",
        f"# pairs = {len(mined.pairs)}",
    ]
    for a, b in sorted(mined.pairs):
        lines.append(f"{a} {b}")
    Path(path).write_text("\n".join(lines) + "\n")


def read_distractors(path: str | Path) -> DistractorSet:
    header: dict[str, str] = {}
    pairs: set[tuple[int, int]] = set()
    try:
        for line in Path(path).read_text().splitlines():
            if line.startswith("#"):
                key, _, value = line[1:].partition("=")
                header[key.strip()] = value.strip()
            elif line.strip():
                a, b = line.split()
                pairs.add((int(a), int(b)))
        mined = DistractorSet(
            pairs,
            tau=float(header["tau"]),
            clusters=int(header["clusters"]),
            percentile=float(header["percentile"]),
        )
    except (KeyError, ValueError) as exc:
        raise DataFormatError(f"{path}: not a distractor file ({exc})") from exc
    if int(header.get("pairs", len(pairs))) != len(pairs):
        raise DataFormatError(f"{path}: pair count does not match the header")
    return mined
