"""Central-difference verification of every analytic gradient.

Each named check builds a frozen fixture, evaluates the gradient both
ways, and reports a scale-normalized error. Fixtures are chosen away
from the kinks of the piecewise-smooth pieces (triangular kernels,
ReLU, bilinear corners), where one-sided derivatives genuinely differ
and finite differences say nothing useful.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .aploss import (
    BinningConfig,
    DistanceHistogram,
    EUCLIDEAN,
    HAMMING,
    ap_loss_batch,
    histogram_ap,
    histogram_ap_grad,
    soft_bin,
    soft_bin_grad,
)
from .models import DescriptorModel, ModelConfig, normalize_batch, normalize_batch_backward
from .stn import STConfig, SpatialTransformerModel, sample_backward, sample_replicate, affine_grid


@dataclass(frozen=True)
class GradCheckResult:
    name: str
    max_err: float
    tol: float
    passed: bool

    def line(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        return f"[GRADCHECK] {self.name}: max_err={self.max_err:.3e} tol={self.tol:.1e} {status}"


def central_difference(f, x: np.ndarray, eps: float, idx: np.ndarray | None = None) -> np.ndarray:
    """d f / d x[i] by symmetric differences, over idx (default: all)."""
    flat = x.ravel()
    if idx is None:
        idx = np.arange(flat.size)
    out = np.empty(idx.size)
    for j, i in enumerate(idx):
        keep = flat[i]
        flat[i] = keep + eps
        hi = f(x)
        flat[i] = keep - eps
        lo = f(x)
        flat[i] = keep
        out[j] = (hi - lo) / (2.0 * eps)
    return out


def _coords(n: int, limit: int, seed: int) -> np.ndarray:
    if n <= limit:
        return np.arange(n)
    return np.sort(np.random.default_rng(seed).choice(n, size=limit, replace=False))


def _unit_rows(m: int, dim: int, seed: int) -> np.ndarray:
    x = np.random.default_rng(seed).normal(size=(m, dim))
    return x / np.linalg.norm(x, axis=1, keepdims=True)


def _check_soft_binning() -> tuple[np.ndarray, np.ndarray, float]:
    cfg = BinningConfig(bins=10, kind=EUCLIDEAN)
    rng = np.random.default_rng(3)
    points = []
    while len(points) < 24:
        d = float(rng.uniform(0.0, cfg.domain_max))
        frac = d / cfg.delta
        if min(frac - np.floor(frac), np.ceil(frac) - frac) > 0.05:
            points.append(d)
    eps = 1e-7
    analytic = np.concatenate([soft_bin_grad(d, cfg) for d in points])
    numeric = np.concatenate(
        [(soft_bin(d + eps, cfg) - soft_bin(d - eps, cfg)) / (2 * eps) for d in points]
    )
    return analytic, numeric, 1e-5


def _check_histogram_ap() -> tuple[np.ndarray, np.ndarray, float]:
    rng = np.random.default_rng(11)
    analytic_parts, numeric_parts = [], []
    for _ in range(4):
        pos = rng.uniform(0.05, 3.0, size=9)
        neg = rng.uniform(0.05, 3.0, size=9)
        g_pos, g_neg = histogram_ap_grad(DistanceHistogram(pos, neg))
        analytic_parts.append(np.concatenate([g_pos, g_neg]))

        def value(flat: np.ndarray) -> float:
            return histogram_ap(DistanceHistogram(flat[:9], flat[9:]))

        numeric_parts.append(central_difference(value, np.concatenate([pos, neg]), 1e-6))
    return np.concatenate(analytic_parts), np.concatenate(numeric_parts), 1e-5


def _batch_fixture(seed: int, kind: str):
    m, dim = 12, 6
    groups = np.arange(m) // 3
    if kind == HAMMING:
        dim = 8
        x = np.tanh(np.random.default_rng(seed).normal(scale=0.8, size=(m, dim)))
        cfg = BinningConfig(bins=dim, kind=HAMMING, code_length=dim)
    else:
        x = _unit_rows(m, dim, seed)
        cfg = BinningConfig(bins=7, kind=EUCLIDEAN)
    return x, groups, cfg


def _check_batch_loss(kind: str) -> tuple[np.ndarray, np.ndarray, float]:
    x, groups, cfg = _batch_fixture(29 if kind == EUCLIDEAN else 31, kind)
    res = ap_loss_batch(x, groups, cfg)
    analytic = res.grad_embeddings.ravel().copy()

    if kind == EUCLIDEAN:
        def value(flat: np.ndarray) -> float:
            rows = flat.reshape(x.shape)
            rows = rows / np.linalg.norm(rows, axis=1, keepdims=True)
            return ap_loss_batch(rows, groups, cfg).loss
    else:
        def value(flat: np.ndarray) -> float:
            return ap_loss_batch(flat.reshape(x.shape), groups, cfg).loss

    numeric = central_difference(value, x.ravel().copy(), 1e-6)
    return analytic, numeric, 1e-4


def _surrogate_weights(shape: tuple[int, ...], seed: int) -> np.ndarray:
    return np.random.default_rng(seed).normal(size=shape)


def _check_descriptor(arch: str) -> tuple[np.ndarray, np.ndarray, float]:
    cfg = ModelConfig(arch=arch, dim=6, head="unit", input_size=12, hidden=20, seed=5)
    model = DescriptorModel.create(cfg)
    rng = np.random.default_rng(17)
    patches = rng.uniform(0.05, 0.95, size=(3, 12, 12))
    w = _surrogate_weights((3, 6), 23)

    emb, cache = model.train_forward(patches)
    analytic_full = model.train_backward(cache, w)
    idx = _coords(analytic_full.size, 48, seed=7)

    flat = model.params.flat

    def value(_: np.ndarray) -> float:
        out, _c = model.train_forward(patches)
        return float(np.sum(w * out))

    numeric = central_difference(value, flat, 1e-6, idx)
    return analytic_full[idx], numeric, 1e-4


def _smooth_image(n: int, seed: int) -> np.ndarray:
    rng = np.random.default_rng(seed)
    yy, xx = np.meshgrid(np.linspace(0, 1, n), np.linspace(0, 1, n), indexing="ij")
    img = np.zeros((n, n))
    for _ in range(4):
        fy, fx = rng.uniform(0.5, 2.0, size=2)
        py, px = rng.uniform(0, np.pi, size=2)
        img += rng.uniform(0.1, 0.4) * np.cos(fy * np.pi * yy + py) * np.cos(fx * np.pi * xx + px)
    return 0.5 + 0.25 * img


def _check_sampler_theta() -> tuple[np.ndarray, np.ndarray, float]:
    image = _smooth_image(14, seed=2)
    theta = np.array([[0.83, 0.05, 0.02], [-0.03, 0.78, -0.04]])
    upstream = _surrogate_weights((8, 8), 41)
    _, g_theta = sample_backward(image, theta, 8, upstream)

    def value(t: np.ndarray) -> float:
        return float(np.sum(upstream * sample_replicate(image, affine_grid(t, 8))))

    numeric = central_difference(value, theta.copy(), 1e-7)
    return g_theta.ravel(), numeric, 1e-4


def _check_transformer() -> tuple[np.ndarray, np.ndarray, float]:
    desc = ModelConfig(arch="linear", dim=5, head="unit", input_size=10, seed=9)
    st = STConfig(input_size=18, output_size=10)
    model = SpatialTransformerModel.create(desc, st)
    p = model.params
    p.view("loc_theta_b")[...] = [0.83, 0.041, 0.013, -0.027, 0.79, -0.019]
    p.view("loc_theta_w")[...] = np.random.default_rng(13).normal(scale=1e-3, size=p.view("loc_theta_w").shape)

    patches = np.stack([_smooth_image(18, seed=s) for s in (4, 5, 6)])
    w = _surrogate_weights((3, 5), 43)

    emb, cache = model.train_forward(patches)
    analytic_full = model.train_backward(cache, w)
    idx = _coords(analytic_full.size, 48, seed=19)

    def value(_: np.ndarray) -> float:
        out, _c = model.train_forward(patches)
        return float(np.sum(w * out))

    numeric = central_difference(value, p.flat, 1e-7, idx)
    return analytic_full[idx], numeric, 2e-4


def _check_normalization() -> tuple[np.ndarray, np.ndarray, float]:
    rng = np.random.default_rng(37)
    patches = rng.uniform(0.1, 0.9, size=(2, 6, 6))
    upstream = _surrogate_weights((2, 6, 6), 47)
    normed = normalize_batch(patches)
    sd = patches.std(axis=(-2, -1), keepdims=True)
    analytic = normalize_batch_backward(normed, sd, upstream).ravel()

    def value(x: np.ndarray) -> float:
        return float(np.sum(upstream * normalize_batch(x)))

    numeric = central_difference(value, patches.copy(), 1e-7)
    return analytic, numeric, 1e-5


_CHECKS = {
    "soft-binning": _check_soft_binning,
    "histogram-ap": _check_histogram_ap,
    "batch-loss-euclidean": lambda: _check_batch_loss(EUCLIDEAN),
    "batch-loss-hamming": lambda: _check_batch_loss(HAMMING),
    "descriptor-linear": lambda: _check_descriptor("linear"),
    "descriptor-mlp2": lambda: _check_descriptor("mlp2"),
    "descriptor-smallconv": lambda: _check_descriptor("smallconv"),
    "sampler-theta": _check_sampler_theta,
    "transformer-full": _check_transformer,
    "input-normalization": _check_normalization,
}


def check_names() -> list[str]:
    return list(_CHECKS)


def run_gradchecks(
    names: list[str] | None = None,
    corrupt: str | None = None,
) -> list[GradCheckResult]:
    """Run named checks (default: all). `corrupt` biases one check's
    analytic gradient so the harness itself can be tested end to end."""
    todo = names if names is not None else check_names()
    results = []
    for name in todo:
        if name not in _CHECKS:
            raise ValueError(f"unknown gradient check {name!r}")
        analytic, numeric, tol = _CHECKS[name]()
        if corrupt == name:
            analytic = analytic * 1.01 + 0.01 * (1.0 + np.abs(analytic).max())
        scale = max(1e-6, float(np.abs(numeric).max()))
        err = float(np.abs(analytic - numeric).max()) / scale
        results.append(GradCheckResult(name, err, tol, err <= tol))
    return results
