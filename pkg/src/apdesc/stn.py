"""Differentiable affine resampling and a pose-normalizing wrapper.

The grid generator follows the corner-aligned convention: output lattice
coordinates run over linspace(-1, 1, out) in both axes, a 2x3 affine
matrix maps them into the source frame, and normalized coordinate x maps
to pixel column (x + 1) / 2 * (W - 1). Sampling is bilinear with
replicate padding: source coordinates are clamped to the image, and a
coordinate that lands strictly outside contributes zero spatial
gradient along the clamped axis.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .models import (
    DescriptorModel,
    ModelConfig,
    ParamVector,
    conv2d_backward,
    conv2d_forward,
    he_uniform_fill,
    normalize_batch,
    normalize_batch_backward,
)

IDENTITY_THETA = np.array([[1.0, 0.0, 0.0], [0.0, 1.0, 0.0]])


@dataclass(frozen=True)
class STConfig:
    """Sizes and learning-rate treatment for the transformer stage."""

    input_size: int = 42
    output_size: int = 32
    theta_lr_scale: float = 0.01


def _lattice(out_size: int) -> np.ndarray:
    line = np.linspace(-1.0, 1.0, out_size)
    xo, yo = np.meshgrid(line, line)
    return np.stack([xo, yo, np.ones_like(xo)], axis=-1)  # (out, out, 3)


def affine_grid(theta: np.ndarray, out_size: int) -> np.ndarray:
    """Normalized source coordinates (x, y) for each output pixel."""
    theta = np.asarray(theta, dtype=np.float64)
    if theta.shape != (2, 3):
        raise ValueError("theta must be a 2x3 matrix")
    return _lattice(out_size) @ theta.T


def _sample_batch(
    images: np.ndarray, grids: np.ndarray
) -> tuple[np.ndarray, dict]:
    m, h, w = images.shape
    sx = grids[..., 0]
    sy = grids[..., 1]
    px = (sx + 1.0) / 2.0 * (w - 1)
    py = (sy + 1.0) / 2.0 * (h - 1)
    inside_x = (px >= 0.0) & (px <= w - 1.0)
    inside_y = (py >= 0.0) & (py <= h - 1.0)
    pxc = np.clip(px, 0.0, w - 1.0)
    pyc = np.clip(py, 0.0, h - 1.0)
    x0 = np.clip(np.floor(pxc).astype(int), 0, w - 2)
    y0 = np.clip(np.floor(pyc).astype(int), 0, h - 2)
    wx = pxc - x0
    wy = pyc - y0
    mi = np.arange(m)[:, None, None]
    v00 = images[mi, y0, x0]
    v01 = images[mi, y0, x0 + 1]
    v10 = images[mi, y0 + 1, x0]
    v11 = images[mi, y0 + 1, x0 + 1]
    top = v00 * (1.0 - wx) + v01 * wx
    bot = v10 * (1.0 - wx) + v11 * wx
    out = top * (1.0 - wy) + bot * wy
    cache = dict(
        shape=(m, h, w), x0=x0, y0=y0, wx=wx, wy=wy,
        inside_x=inside_x, inside_y=inside_y,
        v00=v00, v01=v01, v10=v10, v11=v11,
    )
    return out, cache


def _sample_batch_backward(
    cache: dict, upstream: np.ndarray
) -> tuple[np.ndarray, np.ndarray]:
    """Gradients with respect to the images and the normalized grids."""
    m, h, w = cache["shape"]
    x0, y0, wx, wy = cache["x0"], cache["y0"], cache["wx"], cache["wy"]
    g_img = np.zeros((m, h, w))
    mi = np.broadcast_to(np.arange(m)[:, None, None], x0.shape)
    np.add.at(g_img, (mi, y0, x0), upstream * (1.0 - wx) * (1.0 - wy))
    np.add.at(g_img, (mi, y0, x0 + 1), upstream * wx * (1.0 - wy))
    np.add.at(g_img, (mi, y0 + 1, x0), upstream * (1.0 - wx) * wy)
    np.add.at(g_img, (mi, y0 + 1, x0 + 1), upstream * wx * wy)

    dpx = (1.0 - wy) * (cache["v01"] - cache["v00"]) + wy * (cache["v11"] - cache["v10"])
    dpy = (1.0 - wx) * (cache["v10"] - cache["v00"]) + wx * (cache["v11"] - cache["v01"])
    gx = upstream * dpx * cache["inside_x"] * (w - 1) / 2.0
    gy = upstream * dpy * cache["inside_y"] * (h - 1) / 2.0
    return g_img, np.stack([gx, gy], axis=-1)


def sample_replicate(image: np.ndarray, grid: np.ndarray) -> np.ndarray:
    """Bilinear sample of one image at normalized grid coordinates."""
    image = np.asarray(image, dtype=np.float64)
    if image.ndim != 2:
        raise ValueError("expected a 2-d image")
    out, _ = _sample_batch(image[None], np.asarray(grid, dtype=np.float64)[None])
    return out[0]


def sample_backward(
    image: np.ndarray, theta: np.ndarray, out_size: int, upstream: np.ndarray
) -> tuple[np.ndarray, np.ndarray]:
    """Gradients of sum(upstream * sampled) in the image and in theta."""
    image = np.asarray(image, dtype=np.float64)
    grid = affine_grid(theta, out_size)
    _, cache = _sample_batch(image[None], grid[None])
    g_img, g_grid = _sample_batch_backward(cache, np.asarray(upstream)[None])
    g_theta = grid_to_theta_grad(g_grid, out_size)[0]
    return g_img[0], g_theta


def grid_to_theta_grad(grad_grids: np.ndarray, out_size: int) -> np.ndarray:
    """Fold per-pixel grid gradients back onto the 2x3 matrices."""
    lattice = _lattice(out_size)  # (out, out, 3)
    return np.einsum("mopc,opk->mck", grad_grids, lattice)


class SpatialTransformerModel:
    """Locator network plus resampler in front of a descriptor network.

    The locator sees the standardized full patch and predicts an affine
    matrix; the raw patch is resampled with it, standardized, and fed to
    the descriptor. The theta-predicting layer starts at the identity
    (zero weights, identity bias) and its learning rate is scaled down.
    """

    def __init__(self, desc: DescriptorModel, st: STConfig, params: ParamVector):
        self.desc = desc
        self.st = st
        self.params = params

    @classmethod
    def create(cls, desc_config: ModelConfig, st: STConfig | None = None):
        st = st or STConfig()
        if desc_config.input_size != st.output_size:
            raise ValueError("descriptor input size must match transformer output")
        loc_segments, loc_fans, flat_dim = cls._loc_layout(st.input_size)
        desc_segments, desc_fans = DescriptorModel._layout(desc_config)
        segments = loc_segments + [("desc." + n, s) for n, s in desc_segments]
        params = ParamVector(segments)
        fans = dict(loc_fans)
        fans.update({"desc." + n: f for n, f in desc_fans.items()})
        he_uniform_fill(params, fans, desc_config.seed)
        params.view("loc_theta_w")[...] = 0.0
        params.view("loc_theta_b")[...] = IDENTITY_THETA.ravel()

        desc_slice = slice(
            params.slices["desc." + desc_segments[0][0]].start, params.size
        )
        desc_params = ParamVector(desc_segments, flat=params.flat[desc_slice])
        desc = DescriptorModel(desc_config, desc_params)
        return cls(desc, st, params)

    @staticmethod
    def _loc_layout(input_size: int):
        def out(s, k, st):
            return (s - k) // st + 1

        s1 = out(input_size, 4, 2)
        s2 = out(s1, 4, 2)
        s3 = out(s2, 3, 2)
        flat = 12 * s3 * s3
        segments = [
            ("loc_conv1_w", (6, 1, 4, 4)),
            ("loc_conv1_b", (6,)),
            ("loc_conv2_w", (12, 6, 4, 4)),
            ("loc_conv2_b", (12,)),
            ("loc_conv3_w", (12, 12, 3, 3)),
            ("loc_conv3_b", (12,)),
            ("loc_theta_w", (6, flat)),
            ("loc_theta_b", (6,)),
        ]
        fans = {"loc_conv1_w": 16, "loc_conv2_w": 96, "loc_conv3_w": 108}
        return segments, fans, flat

    @property
    def input_size(self) -> int:
        return self.st.input_size

    @property
    def dim(self) -> int:
        return self.desc.dim

    @property
    def head(self) -> str:
        return self.desc.head

    def predict_theta(self, raw_patches: np.ndarray) -> tuple[np.ndarray, dict]:
        x = np.asarray(raw_patches, dtype=np.float64)
        s = self.st.input_size
        if x.ndim != 3 or x.shape[1:] != (s, s):
            raise ValueError(f"expected a (M, {s}, {s}) batch, got {x.shape}")
        p = self.params
        norm = normalize_batch(x)[:, None, :, :]
        pre1 = conv2d_forward(norm, p.view("loc_conv1_w"), p.view("loc_conv1_b"), 2)
        act1 = np.maximum(pre1, 0.0)
        pre2 = conv2d_forward(act1, p.view("loc_conv2_w"), p.view("loc_conv2_b"), 2)
        act2 = np.maximum(pre2, 0.0)
        pre3 = conv2d_forward(act2, p.view("loc_conv3_w"), p.view("loc_conv3_b"), 2)
        act3 = np.maximum(pre3, 0.0)
        flat = act3.reshape(x.shape[0], -1)
        theta = (flat @ p.view("loc_theta_w").T + p.view("loc_theta_b")).reshape(-1, 2, 3)
        cache = dict(norm=norm, pre1=pre1, act1=act1, pre2=pre2, act2=act2,
                     pre3=pre3, flat=flat)
        return theta, cache

    def _loc_backward(self, cache: dict, g_theta: np.ndarray, grads: ParamVector) -> None:
        p = self.params
        g_out = g_theta.reshape(g_theta.shape[0], 6)
        grads.view("loc_theta_w")[...] = g_out.T @ cache["flat"]
        grads.view("loc_theta_b")[...] = g_out.sum(axis=0)
        g_flat = g_out @ p.view("loc_theta_w")
        g_act3 = g_flat.reshape(-1, *cache["pre3"].shape[1:])
        g_pre3 = g_act3 * (cache["pre3"] > 0)
        g_act2, gw3, gb3 = conv2d_backward(cache["act2"], p.view("loc_conv3_w"), 2, g_pre3)
        grads.view("loc_conv3_w")[...] = gw3
        grads.view("loc_conv3_b")[...] = gb3
        g_pre2 = g_act2 * (cache["pre2"] > 0)
        g_act1, gw2, gb2 = conv2d_backward(cache["act1"], p.view("loc_conv2_w"), 2, g_pre2)
        grads.view("loc_conv2_w")[...] = gw2
        grads.view("loc_conv2_b")[...] = gb2
        g_pre1 = g_act1 * (cache["pre1"] > 0)
        _, gw1, gb1 = conv2d_backward(cache["norm"], p.view("loc_conv1_w"), 2, g_pre1)
        grads.view("loc_conv1_w")[...] = gw1
        grads.view("loc_conv1_b")[...] = gb1

    def train_forward(self, raw_patches: np.ndarray) -> tuple[np.ndarray, dict]:
        x = np.asarray(raw_patches, dtype=np.float64)
        theta, loc_cache = self.predict_theta(x)
        out = self.st.output_size
        grids = np.einsum("opk,mck->mopc", _lattice(out), theta)
        sampled, samp_cache = _sample_batch(x, grids)
        sd = sampled.std(axis=(-2, -1), keepdims=True)
        norm32 = normalize_batch(sampled)
        emb, desc_cache = self.desc.forward(norm32)
        cache = dict(loc=loc_cache, samp=samp_cache, desc=desc_cache,
                     norm32=norm32, sd32=sd, batch=x.shape[0])
        return emb, cache

    def train_backward(self, cache: dict, grad_emb: np.ndarray) -> np.ndarray:
        desc_grads, g_norm32 = self.desc.backward(cache["desc"], grad_emb)
        g_sampled = normalize_batch_backward(cache["norm32"], cache["sd32"], g_norm32)
        _, g_grids = _sample_batch_backward(cache["samp"], g_sampled)
        g_theta = grid_to_theta_grad(g_grids, self.st.output_size)
        grads = ParamVector([(n, self.params.shapes[n]) for n in self.params.segment_names()])
        self._loc_backward(cache["loc"], g_theta, grads)
        start = self.params.size - desc_grads.size
        grads.flat[start:] = desc_grads
        return grads.flat

    def embed(self, raw_patches: np.ndarray) -> np.ndarray:
        emb, _ = self.train_forward(raw_patches)
        return emb

    def lr_scales(self) -> np.ndarray:
        scales = np.ones(self.params.size)
        for name in ("loc_theta_w", "loc_theta_b"):
            scales[self.params.slices[name]] = self.st.theta_lr_scale
        return scales

    def checkpoint_header(self) -> dict:
        from dataclasses import asdict

        header = self.desc.checkpoint_header()
        header["model"] = "spatial_transformer"
        header["st"] = asdict(self.st)
        header["param_count"] = self.params.size
        return header
