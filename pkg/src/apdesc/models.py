"""Descriptor networks with explicit numpy forward and backward passes.

Three small architectures share one interface: a flat parameter vector
with named segments, a forward pass that caches what the backward pass
needs, and a backward pass returning the full parameter gradient plus
the gradient with respect to the (normalized) input pixels. Heads map
raw outputs either onto the unit sphere (real-valued descriptors under
euclidean distance) or through tanh (relaxed binary codes).
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from .errors import DataFormatError, NumericError

UNIT_HEAD = "unit"
TANH_HEAD = "tanh"
ARCHS = ("linear", "mlp2", "smallconv")

_NORM_GUARD = 1e-8


def normalize_input(patch: np.ndarray) -> np.ndarray:
    """Standardize a patch to zero mean and unit population deviation.

    A constant patch maps to all zeros instead of dividing by zero.
    """
    x = np.asarray(patch, dtype=np.float64)
    sd = float(x.std())
    if sd < 1e-12:
        return np.zeros_like(x)
    return (x - x.mean()) / sd


def normalize_batch(patches: np.ndarray) -> np.ndarray:
    """normalize_input applied to each patch in a stack."""
    x = np.asarray(patches, dtype=np.float64)
    mean = x.mean(axis=(-2, -1), keepdims=True)
    sd = x.std(axis=(-2, -1), keepdims=True)
    out = np.where(sd < 1e-12, 0.0, (x - mean) / np.where(sd < 1e-12, 1.0, sd))
    return out


def normalize_batch_backward(
    normalized: np.ndarray, raw_sd: np.ndarray, grad: np.ndarray
) -> np.ndarray:
    """Chain a gradient back through per-patch standardization.

    ``normalized`` is the forward output, ``raw_sd`` the per-patch
    population deviation of the raw input (shape (M, 1, 1)).
    """
    gm = grad.mean(axis=(-2, -1), keepdims=True)
    gy = (grad * normalized).mean(axis=(-2, -1), keepdims=True)
    out = (grad - gm - normalized * gy) / np.where(raw_sd < 1e-12, 1.0, raw_sd)
    return np.where(raw_sd < 1e-12, 0.0, out)


def binarize(embeddings: np.ndarray) -> np.ndarray:
    """Hard sign codes in {-1, +1}; zero rounds up to +1."""
    e = np.asarray(embeddings, dtype=np.float64)
    return np.where(e >= 0.0, 1.0, -1.0)


class ParamVector:
    """Named, shaped views over a single flat float64 vector.

    Passing an existing buffer makes the views alias it, which lets a
    composite model hand a sub-range to a component.
    """

    def __init__(
        self,
        segments: list[tuple[str, tuple[int, ...]]],
        flat: np.ndarray | None = None,
    ):
        self.shapes = dict(segments)
        self.slices: dict[str, slice] = {}
        offset = 0
        for name, shape in segments:
            size = int(np.prod(shape))
            self.slices[name] = slice(offset, offset + size)
            offset += size
        if flat is None:
            flat = np.zeros(offset, dtype=np.float64)
        elif flat.size != offset:
            raise ValueError("provided buffer does not match the segment layout")
        self.flat = flat

    def view(self, name: str) -> np.ndarray:
        return self.flat[self.slices[name]].reshape(self.shapes[name])

    @property
    def size(self) -> int:
        return self.flat.size

    def segment_names(self) -> list[str]:
        return list(self.slices)


def he_uniform_fill(params: ParamVector, fan_ins: dict[str, int], seed: int) -> None:
    """Seeded uniform(-sqrt(6/fan_in), +sqrt(6/fan_in)) weight init.

    Segments without a listed fan-in (biases) stay zero.
    """
    rng = np.random.default_rng(seed)
    for name in params.segment_names():
        if name in fan_ins:
            lim = np.sqrt(6.0 / fan_ins[name])
            v = params.view(name)
            v[...] = rng.uniform(-lim, lim, size=v.shape)


def _conv_windows(x: np.ndarray, kh: int, kw: int, stride: int) -> np.ndarray:
    v = np.lib.stride_tricks.sliding_window_view(x, (kh, kw), axis=(2, 3))
    return v[:, :, ::stride, ::stride]


def conv2d_forward(x: np.ndarray, w: np.ndarray, b: np.ndarray, stride: int) -> np.ndarray:
    windows = _conv_windows(x, w.shape[2], w.shape[3], stride)
    return np.einsum("mcopij,kcij->mkop", windows, w) + b[None, :, None, None]


def conv2d_backward(
    x: np.ndarray, w: np.ndarray, stride: int, gy: np.ndarray
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    kh, kw = w.shape[2], w.shape[3]
    oh, ow = gy.shape[2], gy.shape[3]
    windows = _conv_windows(x, kh, kw, stride)
    gw = np.einsum("mcopij,mkop->kcij", windows, gy)
    gb = gy.sum(axis=(0, 2, 3))
    gx = np.zeros_like(x)
    for i in range(kh):
        for j in range(kw):
            patch = np.einsum("mkop,kc->mcop", gy, w[:, :, i, j])
            gx[:, :, i : i + stride * oh : stride, j : j + stride * ow : stride] += patch
    return gx, gw, gb


@dataclass(frozen=True)
class ModelConfig:
    """Architecture choice and sizes for a descriptor network."""

    arch: str
    dim: int
    head: str = UNIT_HEAD
    input_size: int = 32
    hidden: int = 128
    channels: tuple[int, int] = (8, 16)
    seed: int = 0

    def __post_init__(self) -> None:
        if self.arch not in ARCHS:
            raise ValueError(f"unknown architecture {self.arch!r}")
        if self.head not in (UNIT_HEAD, TANH_HEAD):
            raise ValueError(f"unknown head {self.head!r}")
        if self.dim < 1 or self.input_size < 2:
            raise ValueError("descriptor dim and input size must be positive")
        if self.arch == "smallconv" and self.input_size < 10:
            raise ValueError("the convolutional stack needs patches of at least 10 pixels")


def _conv_out(size: int, k: int, s: int) -> int:
    return (size - k) // s + 1


class DescriptorModel:
    """A patch-to-descriptor network over a flat parameter vector.

    forward expects already standardized patches; use ``embed`` for raw
    pixel input. backward consumes the cache forward produced.
    """

    def __init__(self, config: ModelConfig, params: ParamVector):
        self.config = config
        self.params = params

    @classmethod
    def create(cls, config: ModelConfig) -> "DescriptorModel":
        segments, fan_ins = cls._layout(config)
        params = ParamVector(segments)
        he_uniform_fill(params, fan_ins, config.seed)
        return cls(config, params)

    @staticmethod
    def _layout(cfg: ModelConfig) -> tuple[list[tuple[str, tuple[int, ...]]], dict[str, int]]:
        n_in = cfg.input_size * cfg.input_size
        if cfg.arch == "linear":
            segments = [("w", (cfg.dim, n_in)), ("b", (cfg.dim,))]
            fan_ins = {"w": n_in}
        elif cfg.arch == "mlp2":
            segments = [
                ("w1", (cfg.hidden, n_in)),
                ("b1", (cfg.hidden,)),
                ("w2", (cfg.dim, cfg.hidden)),
                ("b2", (cfg.dim,)),
            ]
            fan_ins = {"w1": n_in, "w2": cfg.hidden}
        else:
            c1, c2 = cfg.channels
            s1 = _conv_out(cfg.input_size, 4, 2)
            s2 = _conv_out(s1, 4, 2)
            flat = c2 * s2 * s2
            segments = [
                ("conv1_w", (c1, 1, 4, 4)),
                ("conv1_b", (c1,)),
                ("conv2_w", (c2, c1, 4, 4)),
                ("conv2_b", (c2,)),
                ("out_w", (cfg.dim, flat)),
                ("out_b", (cfg.dim,)),
            ]
            fan_ins = {"conv1_w": 16, "conv2_w": c1 * 16, "out_w": flat}
        return segments, fan_ins

    @property
    def input_size(self) -> int:
        return self.config.input_size

    @property
    def dim(self) -> int:
        return self.config.dim

    @property
    def head(self) -> str:
        return self.config.head

    def _check_batch(self, patches: np.ndarray) -> np.ndarray:
        x = np.asarray(patches, dtype=np.float64)
        s = self.config.input_size
        if x.ndim != 3 or x.shape[1:] != (s, s):
            raise ValueError(f"expected a (M, {s}, {s}) batch, got {x.shape}")
        return x

    def forward(self, patches: np.ndarray) -> tuple[np.ndarray, dict]:
        x = self._check_batch(patches)
        cache: dict = {"batch": x.shape[0]}
        cfg = self.config
        p = self.params
        if cfg.arch == "linear":
            flat = x.reshape(x.shape[0], -1)
            raw = flat @ p.view("w").T + p.view("b")
            cache["flat"] = flat
        elif cfg.arch == "mlp2":
            flat = x.reshape(x.shape[0], -1)
            pre = flat @ p.view("w1").T + p.view("b1")
            hid = np.tanh(pre)
            raw = hid @ p.view("w2").T + p.view("b2")
            cache["flat"] = flat
            cache["hid"] = hid
        else:
            imgs = x[:, None, :, :]
            pre1 = conv2d_forward(imgs, p.view("conv1_w"), p.view("conv1_b"), 2)
            act1 = np.maximum(pre1, 0.0)
            pre2 = conv2d_forward(act1, p.view("conv2_w"), p.view("conv2_b"), 2)
            act2 = np.maximum(pre2, 0.0)
            flat2 = act2.reshape(x.shape[0], -1)
            raw = flat2 @ p.view("out_w").T + p.view("out_b")
            cache.update(imgs=imgs, pre1=pre1, act1=act1, pre2=pre2, act2=act2, flat2=flat2)

        if cfg.head == UNIT_HEAD:
            norms = np.linalg.norm(raw, axis=1, keepdims=True)
            if not np.isfinite(norms).all():
                raise NumericError("descriptor norms overflowed")
            norms = np.maximum(norms, _NORM_GUARD)
            emb = raw / norms
            cache["norms"] = norms
            cache["emb"] = emb
        else:
            emb = np.tanh(raw)
            cache["emb"] = emb
        return emb, cache

    def backward(self, cache: dict, grad_emb: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        g = np.asarray(grad_emb, dtype=np.float64)
        if g.shape != (cache["batch"], self.config.dim):
            raise ValueError("gradient shape does not match the cached forward pass")
        cfg = self.config
        p = self.params
        emb = cache["emb"]
        if cfg.head == UNIT_HEAD:
            radial = (g * emb).sum(axis=1, keepdims=True)
            g_raw = (g - emb * radial) / cache["norms"]
        else:
            g_raw = g * (1.0 - emb * emb)

        grads = ParamVector([(n, self.params.shapes[n]) for n in p.segment_names()])
        if cfg.arch == "linear":
            grads.view("w")[...] = g_raw.T @ cache["flat"]
            grads.view("b")[...] = g_raw.sum(axis=0)
            g_flat = g_raw @ p.view("w")
        elif cfg.arch == "mlp2":
            grads.view("w2")[...] = g_raw.T @ cache["hid"]
            grads.view("b2")[...] = g_raw.sum(axis=0)
            g_hid = (g_raw @ p.view("w2")) * (1.0 - cache["hid"] ** 2)
            grads.view("w1")[...] = g_hid.T @ cache["flat"]
            grads.view("b1")[...] = g_hid.sum(axis=0)
            g_flat = g_hid @ p.view("w1")
        else:
            grads.view("out_w")[...] = g_raw.T @ cache["flat2"]
            grads.view("out_b")[...] = g_raw.sum(axis=0)
            g_act2 = (g_raw @ p.view("out_w")).reshape(cache["act2"].shape)
            g_pre2 = g_act2 * (cache["pre2"] > 0)
            g_act1, gw2, gb2 = conv2d_backward(cache["act1"], p.view("conv2_w"), 2, g_pre2)
            grads.view("conv2_w")[...] = gw2
            grads.view("conv2_b")[...] = gb2
            g_pre1 = g_act1 * (cache["pre1"] > 0)
            g_imgs, gw1, gb1 = conv2d_backward(cache["imgs"], p.view("conv1_w"), 2, g_pre1)
            grads.view("conv1_w")[...] = gw1
            grads.view("conv1_b")[...] = gb1
            g_in = g_imgs[:, 0, :, :]
            return grads.flat, g_in

        s = cfg.input_size
        return grads.flat, g_flat.reshape(-1, s, s)

    def embed(self, raw_patches: np.ndarray) -> np.ndarray:
        """Descriptors for raw (unstandardized) patches."""
        emb, _ = self.forward(normalize_batch(raw_patches))
        return emb

    def train_forward(self, raw_patches: np.ndarray) -> tuple[np.ndarray, dict]:
        return self.forward(normalize_batch(raw_patches))

    def train_backward(self, cache: dict, grad_emb: np.ndarray) -> np.ndarray:
        return self.backward(cache, grad_emb)[0]

    def lr_scales(self) -> np.ndarray:
        return np.ones(self.params.size)

    def checkpoint_header(self) -> dict:
        cfg = asdict(self.config)
        cfg["channels"] = list(self.config.channels)
        return {"model": "descriptor", "config": cfg, "param_count": self.params.size}


def save_model(path: str | Path, model, run_config: dict | None = None) -> None:
    """Write a model as a JSON header line plus little-endian float64 bytes."""
    header = model.checkpoint_header()
    header["format"] = "apdesc-checkpoint"
    header["version"] = 1
    if run_config is not None:
        header["run_config"] = run_config
    blob = np.ascontiguousarray(model.params.flat, dtype="<f8").tobytes()
    with open(path, "wb") as fh:
        fh.write(json.dumps(header, sort_keys=True).encode("utf-8"))
        fh.write(b"\n")
        fh.write(blob)


def load_model(path: str | Path):
    """Rebuild a model saved by save_model."""
    with open(path, "rb") as fh:
        header_line = fh.readline()
        blob = fh.read()
    try:
        header = json.loads(header_line.decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise DataFormatError(f"{path}: not a checkpoint file") from exc
    if header.get("format") != "apdesc-checkpoint":
        raise DataFormatError(f"{path}: unrecognized checkpoint header")
    flat = np.frombuffer(blob, dtype="<f8").astype(np.float64)
    if flat.size != header["param_count"]:
        raise DataFormatError(
            f"{path}: expected {header['param_count']} parameters, found {flat.size}"
        )
    kind = header.get("model")
    if kind == "descriptor":
        model = DescriptorModel.create(_config_from_header(header["config"]))
    elif kind == "spatial_transformer":
        from .stn import SpatialTransformerModel, STConfig

        st_cfg = STConfig(**header["st"])
        inner = _config_from_header(header["config"])
        model = SpatialTransformerModel.create(inner, st_cfg)
    else:
        raise DataFormatError(f"{path}: unknown model kind {kind!r}")
    if model.params.size != flat.size:
        raise DataFormatError(f"{path}: parameter count does not match architecture")
    model.params.flat[...] = flat
    return model


def _config_from_header(cfg: dict) -> ModelConfig:
    cfg = dict(cfg)
    cfg["channels"] = tuple(cfg.get("channels", (8, 16)))
    return ModelConfig(**cfg)
