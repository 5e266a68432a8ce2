"""Retrieval, verification, and matching metrics over descriptors.

All metrics are rank based: pairs or candidates are ordered by ascending
distance with ties broken by the lower index, so any strictly monotone
transform of the distances leaves every number here unchanged.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .data import PatchDataset
from .errors import UndefinedMetricError
from .ranking import exact_ap, mean_ap

DISTRACTOR_POLICIES = ("all", "out_of_sequence", "in_sequence")


@dataclass
class EvalReport:
    """Results of one evaluation task plus enough context to rerun it."""

    task: str
    metrics: dict[str, float]
    per_query_ap: np.ndarray | None = None
    pr_curve: np.ndarray | None = None
    config: dict = field(default_factory=dict)


def write_report(report: EvalReport, directory: str | Path) -> list[Path]:
    """Emit report.txt (key = value lines) and pr.csv when a curve exists."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    lines = [f"task = {report.task}"]
    for name in sorted(report.metrics):
        lines.append(f"metric.{name} = {report.metrics[name]:.6f}")
    for key in sorted(report.config):
        lines.append(f"config.{key} = {report.config[key]}")
    if report.per_query_ap is not None:
        lines.append(f"queries = {len(report.per_query_ap)}")
    text = directory / "report.txt"
    text.write_text("\n".join(lines) + "\n")
    written = [text]
    if report.pr_curve is not None:
        curve = directory / "pr.csv"
        with open(curve, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["recall", "precision"])
            for recall, precision in report.pr_curve:
                writer.writerow([f"{recall:.8f}", f"{precision:.8f}"])
        written.append(curve)
    return written


def _ranked_by_distance(distances: np.ndarray) -> np.ndarray:
    """Indices sorted by ascending distance, lower index first on ties."""
    d = np.asarray(distances, dtype=np.float64)
    return np.lexsort((np.arange(d.size), d))


def fpr95(distances: np.ndarray, labels: np.ndarray) -> float:
    """False positive rate at the smallest threshold reaching 95% recall.

    Labels mark matching pairs; a pair is accepted when its distance is
    at or below the threshold.
    """
    d = np.asarray(distances, dtype=np.float64)
    y = np.asarray(labels, dtype=bool)
    if d.shape != y.shape or d.ndim != 1:
        raise ValueError("need matching 1-d distance and label arrays")
    pos = np.sort(d[y])
    neg = d[~y]
    if pos.size == 0 or neg.size == 0:
        raise UndefinedMetricError("fpr95 needs both matching and non-matching pairs")
    k = int(np.ceil(0.95 * pos.size))
    threshold = pos[k - 1]
    return float(np.mean(neg <= threshold))


def verification_ap(distances: np.ndarray, labels: np.ndarray) -> float:
    """AP of ranking pairs by ascending distance, matches as relevant."""
    d = np.asarray(distances, dtype=np.float64)
    y = np.asarray(labels, dtype=bool)
    if d.shape != y.shape or d.ndim != 1:
        raise ValueError("need matching 1-d distance and label arrays")
    order = _ranked_by_distance(d)
    return exact_ap(y[order].astype(int))


def make_verification_set(
    dataset: PatchDataset, pairs_per_class: int, seed: int = 0
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Sample balanced matching / non-matching index pairs."""
    rng = np.random.default_rng(seed)
    gids = dataset.group_ids
    eligible = [g for g, c in dataset.group_sizes().items() if c >= 2]
    if not eligible:
        raise ValueError("no group has two members to form matching pairs")
    left = np.empty(2 * pairs_per_class, dtype=np.int64)
    right = np.empty(2 * pairs_per_class, dtype=np.int64)
    labels = np.zeros(2 * pairs_per_class, dtype=bool)
    for t in range(pairs_per_class):
        g = eligible[rng.integers(len(eligible))]
        i, j = rng.choice(dataset.members(g), size=2, replace=False)
        left[t], right[t], labels[t] = i, j, True
    n = len(dataset)
    t = pairs_per_class
    while t < 2 * pairs_per_class:
        i, j = rng.integers(n, size=2)
        if gids[i] != gids[j]:
            left[t], right[t] = i, j
            t += 1
    return left, right, labels


@dataclass
class RetrievalProtocol:
    """Queries plus a distractor policy over one dataset.

    Every query must have an in-database match (a same-group partner),
    checked at construction. The positives are always in the database;
    the policy decides which different-group patches join them:
    the whole dataset, only other sequences, or only the query's own.
    """

    dataset: PatchDataset
    query_indices: np.ndarray
    distractors: str = "all"

    def __post_init__(self) -> None:
        if self.distractors not in DISTRACTOR_POLICIES:
            raise ValueError(f"unknown distractor policy {self.distractors!r}")
        self.query_indices = np.asarray(self.query_indices, dtype=np.int64)
        if self.query_indices.size == 0:
            raise ValueError("protocol needs at least one query")
        sizes = self.dataset.group_sizes()
        for q in self.query_indices:
            if sizes[int(self.dataset.group_ids[q])] < 2:
                raise ValueError(f"query {q} has no in-database match")


def build_retrieval_protocol(
    dataset: PatchDataset, distractors: str = "all"
) -> RetrievalProtocol:
    """Protocol using every patch with a same-group partner as a query."""
    sizes = dataset.group_sizes()
    ok = np.array([sizes[int(g)] >= 2 for g in dataset.group_ids])
    return RetrievalProtocol(dataset, np.flatnonzero(ok), distractors)


def retrieval_map(protocol: RetrievalProtocol, embeddings: np.ndarray) -> EvalReport:
    """Mean AP of ranking each query's database by descriptor distance."""
    ds = protocol.dataset
    x = np.asarray(embeddings, dtype=np.float64)
    if x.shape[0] != len(ds):
        raise ValueError("need one embedding per dataset patch")
    sq = (x * x).sum(axis=1)
    gids = ds.group_ids
    seqs = ds.sequence_ids
    aps = []
    for q in protocol.query_indices:
        same_group = gids == gids[q]
        if protocol.distractors == "all":
            candidate = np.ones(len(ds), dtype=bool)
        elif protocol.distractors == "out_of_sequence":
            candidate = (seqs != seqs[q]) | same_group
        else:
            candidate = seqs == seqs[q]
        candidate[q] = False
        idx = np.flatnonzero(candidate)
        d2 = sq[idx] - 2.0 * (x[idx] @ x[q]) + sq[q]
        order = idx[np.lexsort((idx, d2))]
        aps.append(exact_ap(same_group[order].astype(int)))
    per_query = np.asarray(aps)
    return EvalReport(
        task="retrieval",
        metrics={"map": mean_ap(per_query)},
        per_query_ap=per_query,
        config={"distractors": protocol.distractors, "queries": len(per_query)},
    )


def mutual_nn_match(
    desc_a: np.ndarray, desc_b: np.ndarray
) -> list[tuple[int, int, float]]:
    """Pairs (i, j, distance) where i and j are each other's nearest rows.

    argmin takes the first occurrence, so ties resolve to the lowest
    index on both sides.
    """
    a = np.asarray(desc_a, dtype=np.float64)
    b = np.asarray(desc_b, dtype=np.float64)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[1]:
        raise ValueError("descriptor arrays must be 2-d with equal width")
    d = np.sqrt(
        np.maximum(
            (a * a).sum(1)[:, None] - 2.0 * (a @ b.T) + (b * b).sum(1)[None, :], 0.0
        )
    )
    ab = d.argmin(axis=1)
    ba = d.argmin(axis=0)
    out = []
    for i, j in enumerate(ab):
        if ba[j] == i:
            out.append((i, int(j), float(d[i, j])))
    return out


def matching_pr_map(
    matches: list[tuple[int, int, float]],
    gt_pairs: set[tuple[int, int]],
    n_gt: int | None = None,
) -> EvalReport:
    """Precision-recall area for distance-ranked candidate matches.

    Recall counts against the full ground-truth correspondence set, so
    missing correspondences cap the score. The curve is anchored at
    (recall 0, precision 1) and integrated by the trapezoidal rule.
    """
    total = n_gt if n_gt is not None else len(gt_pairs)
    if total <= 0:
        raise UndefinedMetricError("matching needs a non-empty ground-truth set")
    if not matches:
        return EvalReport("matching", {"pr_auc": 0.0}, pr_curve=np.zeros((0, 2)))
    order = sorted(range(len(matches)), key=lambda t: (matches[t][2], matches[t][0]))
    correct = np.array([(matches[t][0], matches[t][1]) in gt_pairs for t in order])
    tp = np.cumsum(correct)
    ranks = np.arange(1, len(matches) + 1)
    precision = tp / ranks
    recall = tp / total
    curve = np.column_stack([recall, precision])
    r = np.concatenate([[0.0], recall])
    p = np.concatenate([[1.0], precision])
    auc = float(np.sum((r[1:] - r[:-1]) * (p[1:] + p[:-1]) / 2.0))
    return EvalReport("matching", {"pr_auc": auc}, pr_curve=curve)
