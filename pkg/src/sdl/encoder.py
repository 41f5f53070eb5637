"""Factorized spatial-temporal transformer encoder with per-slice frame heads.

Videos are ``(B, T, H, W, C_img)`` arrays (a single ``(T, H, W, C_img)``
video is promoted to a batch of one). Tokens live on a grid
``(B, n_t, n_h, n_w, d)``. Each block runs spatial attention among the
``n_h*n_w`` tokens of one temporal slice, then temporal attention among the
``n_t`` tokens sharing one spatial site, then an MLP, all pre-norm with
residuals.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import numpy as np

from sdl import ndtensor as nt
from sdl.errors import ConfigError, IndivisibleDimensions, ShapeMismatch
from sdl.ndtensor import Tensor

INIT_STD = 0.02
LN_EPS = 1e-5


@dataclass(frozen=True)
class EncoderConfig:
    frames: int = 8
    height: int = 32
    width: int = 32
    channels: int = 3
    patch: int = 8
    patch_t: int = 2
    dim: int = 64
    heads: int = 4
    depth: int = 2
    n_classes: int = 6

    def __post_init__(self):
        for name in ("frames", "height", "width", "channels", "patch", "patch_t", "dim", "heads", "n_classes"):
            if getattr(self, name) < 1:
                raise ConfigError(name, "must be a positive integer")
        if self.depth < 0:
            raise ConfigError("depth", "must be >= 0")
        if self.dim % self.heads:
            raise ConfigError("heads", f"dim {self.dim} is not divisible by {self.heads} heads")
        if self.height % self.patch or self.width % self.patch or self.frames % self.patch_t:
            raise IndivisibleDimensions(
                f"(T,H,W)=({self.frames},{self.height},{self.width}) not divisible by "
                f"(P_t,P,P)=({self.patch_t},{self.patch},{self.patch})"
            )

    @property
    def grid(self) -> tuple[int, int, int]:
        return self.frames // self.patch_t, self.height // self.patch, self.width // self.patch

    @property
    def n_tokens(self) -> int:
        return self.frames * self.height * self.width // (self.patch_t * self.patch * self.patch)

    @property
    def tubelet_size(self) -> int:
        return self.patch * self.patch * self.patch_t * self.channels

    def to_dict(self) -> dict:
        return asdict(self)


def _gauss(rng: np.random.Generator, shape, name: str) -> Tensor:
    return Tensor(rng.normal(0.0, INIT_STD, size=shape), requires_grad=True, name=name)


def _const(value: float, shape, name: str) -> Tensor:
    return Tensor(np.full(shape, value), requires_grad=True, name=name)


def init_encoder(cfg: EncoderConfig, rng: np.random.Generator) -> dict[str, Tensor]:
    """Encoder + frame-head parameters, keyed by stable names."""
    d = cfg.dim
    n_t, n_h, n_w = cfg.grid
    p: dict[str, Tensor] = {}
    p["embed.w"] = _gauss(rng, (cfg.tubelet_size, d), "embed.w")
    p["embed.b"] = _const(0.0, (d,), "embed.b")
    p["pos"] = _gauss(rng, (n_t, n_h, n_w, d), "pos")
    for l in range(cfg.depth):
        pre = f"blocks.{l}."
        for stage in ("spatial", "temporal"):
            s = f"{pre}{stage}."
            p[s + "ln.g"] = _const(1.0, (d,), s + "ln.g")
            p[s + "ln.b"] = _const(0.0, (d,), s + "ln.b")
            for m in ("wq", "wk", "wv"):
                p[s + m] = _gauss(rng, (d, d), s + m)
            p[s + "wo"] = _const(0.0, (d, d), s + "wo")
            p[s + "bo"] = _const(0.0, (d,), s + "bo")
        s = pre + "mlp."
        p[s + "ln.g"] = _const(1.0, (d,), s + "ln.g")
        p[s + "ln.b"] = _const(0.0, (d,), s + "ln.b")
        p[s + "w1"] = _gauss(rng, (d, 4 * d), s + "w1")
        p[s + "b1"] = _const(0.0, (4 * d,), s + "b1")
        p[s + "w2"] = _const(0.0, (4 * d, d), s + "w2")
        p[s + "b2"] = _const(0.0, (d,), s + "b2")
    p["heads.w"] = _gauss(rng, (n_t, n_h * n_w * d, cfg.n_classes), "heads.w")
    p["heads.b"] = _const(0.0, (n_t, 1, cfg.n_classes), "heads.b")
    return p


def encoder_param_count(cfg: EncoderConfig) -> int:
    d = cfg.dim
    n_t, n_h, n_w = cfg.grid
    embed = cfg.tubelet_size * d + d + cfg.n_tokens * d
    attn = 2 * d + 3 * d * d + d * d + d
    mlp = 2 * d + d * 4 * d + 4 * d + 4 * d * d + d
    heads = n_t * (n_h * n_w * d * cfg.n_classes + cfg.n_classes)
    return embed + cfg.depth * (2 * attn + mlp) + heads


def _batched(video) -> Tensor:
    v = nt.as_tensor(video)
    if v.ndim == 4:
        v = v.reshape((1,) + v.shape)
    if v.ndim != 5:
        raise ShapeMismatch(f"expected (B,T,H,W,C) video, got {v.shape}")
    return v


def tubelets(video, cfg: EncoderConfig) -> Tensor:
    """Rearrange ``(B,T,H,W,C)`` into flattened tubelets ``(B,n_t,n_h,n_w,P_t*P*P*C)``.

    Flatten order inside a tubelet is (frame, row, col, channel).
    """
    v = _batched(video)
    b, t, h, w, c = v.shape
    if (t, h, w, c) != (cfg.frames, cfg.height, cfg.width, cfg.channels):
        if t % cfg.patch_t or h % cfg.patch or w % cfg.patch:
            raise IndivisibleDimensions(f"video {v.shape[1:]} not divisible into tubelets")
        raise ShapeMismatch(f"video {v.shape[1:]} does not match config")
    n_t, n_h, n_w = cfg.grid
    P, Pt = cfg.patch, cfg.patch_t
    x = v.reshape(b, n_t, Pt, n_h, P, n_w, P, c)
    x = x.transpose(0, 1, 3, 5, 2, 4, 6, 7)
    return x.reshape(b, n_t, n_h, n_w, Pt * P * P * c)


def tubelet_embed(video, params: dict[str, Tensor], cfg: EncoderConfig, add_position: bool = True) -> Tensor:
    z = nt.linear(tubelets(video, cfg), params["embed.w"], params["embed.b"])
    if add_position:
        z = z + params["pos"]
    return z


def attention(q: Tensor, k: Tensor, v: Tensor, d_k: float | None = None) -> Tensor:
    """``softmax(q k^T / sqrt(d_k)) v`` over the last two axes."""
    return nt.scaled_dot_attention(q, k, v, d_k)


def multi_head_attention(x: Tensor, params: dict[str, Tensor], prefix: str, heads: int) -> Tensor:
    """Self-attention over axis -2 of ``x`` shaped ``(G, S, d)``."""
    g, s, d = x.shape
    dk = d // heads

    def split(t: Tensor) -> Tensor:
        return t.reshape(g, s, heads, dk).transpose(0, 2, 1, 3)

    q = split(nt.linear(x, params[prefix + "wq"]))
    k = split(nt.linear(x, params[prefix + "wk"]))
    v = split(nt.linear(x, params[prefix + "wv"]))
    o = attention(q, k, v, dk).transpose(0, 2, 1, 3).reshape(g, s, d)
    return nt.linear(o, params[prefix + "wo"], params[prefix + "bo"])


def _msa_residual(x: Tensor, params, prefix: str, heads: int) -> Tensor:
    y = nt.layer_norm(x, params[prefix + "ln.g"], params[prefix + "ln.b"], LN_EPS)
    return multi_head_attention(y, params, prefix, heads) + x


def encoder_block(z: Tensor, params: dict[str, Tensor], level: int, cfg: EncoderConfig) -> Tensor:
    b, n_t, n_h, n_w, d = z.shape
    pre = f"blocks.{level}."
    zs = z.reshape(b * n_t, n_h * n_w, d)
    ys = _msa_residual(zs, params, pre + "spatial.", cfg.heads)
    # group by spatial site, attend along time
    zt = ys.reshape(b, n_t, n_h * n_w, d).transpose(0, 2, 1, 3).reshape(b * n_h * n_w, n_t, d)
    yt = _msa_residual(zt, params, pre + "temporal.", cfg.heads)
    m = pre + "mlp."
    h = nt.layer_norm(yt, params[m + "ln.g"], params[m + "ln.b"], LN_EPS)
    h = nt.gelu(nt.linear(h, params[m + "w1"], params[m + "b1"]))
    out = nt.linear(h, params[m + "w2"], params[m + "b2"]) + yt
    return out.reshape(b, n_h * n_w, n_t, d).transpose(0, 2, 1, 3).reshape(b, n_t, n_h, n_w, d)


def encode(video, params: dict[str, Tensor], cfg: EncoderConfig) -> Tensor:
    z = tubelet_embed(video, params, cfg)
    for l in range(cfg.depth):
        z = encoder_block(z, params, l, cfg)
    return z


def frame_logits(z: Tensor, params: dict[str, Tensor], cfg: EncoderConfig) -> Tensor:
    """Per-frame logits ``(B, T, n_classes)``.

    Temporal slice ``t`` has its own linear head over its flattened
    ``n_h*n_w*d`` tokens; the ``P_t`` frames of the slice share its row.
    """
    b, n_t, n_h, n_w, d = z.shape
    flat = z.reshape(b, n_t, n_h * n_w * d).transpose(1, 0, 2)
    logits = nt.matmul(flat, params["heads.w"]) + params["heads.b"]
    logits = logits.transpose(1, 0, 2)
    c = logits.shape[-1]
    rep = logits.reshape(b, n_t, 1, c) + np.zeros((1, 1, cfg.patch_t, 1))
    return rep.reshape(b, n_t * cfg.patch_t, c)


def frame_features(z: Tensor) -> Tensor:
    """Spatial mean of each temporal slice: ``(B, n_t, d)``."""
    b, n_t, n_h, n_w, d = z.shape
    return nt.mean(z.reshape(b, n_t, n_h * n_w, d), axis=2)


def slice_labels(frame_labels, patch_t: int) -> np.ndarray:
    """Majority label per temporal slice; ties go to the earlier frame."""
    lab = np.asarray(frame_labels, dtype=np.int64)
    squeeze = lab.ndim == 1
    if squeeze:
        lab = lab[None]
    b, t = lab.shape
    groups = lab.reshape(b, t // patch_t, patch_t)
    out = np.empty(groups.shape[:2], dtype=np.int64)
    for i in range(groups.shape[0]):
        for j in range(groups.shape[1]):
            vals = list(groups[i, j])
            # max over count, then earliest first occurrence
            out[i, j] = max(vals, key=lambda c: (vals.count(c), -vals.index(c)))
    return out[0] if squeeze else out
