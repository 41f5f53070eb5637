"""Last-frame reconstruction head (training only).

The decoder is a single linear map applied to every spatial token of the
final temporal slice, producing one ``P x P x C_img`` patch per token; the
patches are tiled back into an ``H x W x C_img`` image.
"""

from __future__ import annotations

from pathlib import Path

import numpy as np

from sdl import ndtensor as nt
from sdl.encoder import INIT_STD, EncoderConfig
from sdl.errors import ShapeMismatch
from sdl.ndtensor import Tensor


def init_decoder(cfg: EncoderConfig, rng: np.random.Generator) -> dict[str, Tensor]:
    out = cfg.patch * cfg.patch * cfg.channels
    return {
        "decoder.w": Tensor(rng.normal(0.0, INIT_STD, (cfg.dim, out)), requires_grad=True, name="decoder.w"),
        "decoder.b": Tensor(np.zeros(out), requires_grad=True, name="decoder.b"),
    }


def decoder_param_count(cfg: EncoderConfig) -> int:
    return (cfg.dim + 1) * cfg.patch * cfg.patch * cfg.channels


def decode_last_frame(z: Tensor, params: dict[str, Tensor], cfg: EncoderConfig) -> Tensor:
    """Reconstruct frame ``T-1`` from the last token slice: ``(B, H, W, C_img)``."""
    if z.ndim != 5 or z.shape[1:] != cfg.grid + (cfg.dim,):
        raise ShapeMismatch(f"decoder expects (B,{cfg.grid},{cfg.dim}) tokens, got {z.shape}")
    b, n_t, n_h, n_w, d = z.shape
    P, c = cfg.patch, cfg.channels
    last = z[:, n_t - 1]
    patches = nt.linear(last, params["decoder.w"], params["decoder.b"])
    img = patches.reshape(b, n_h, n_w, P, P, c).transpose(0, 1, 3, 2, 4, 5)
    return img.reshape(b, n_h * P, n_w * P, c)


def rec_loss(i_rec: Tensor, i_last) -> Tensor:
    """Mean squared error over every pixel, channel and batch item."""
    i_last = nt.as_tensor(i_last)
    if i_rec.shape != i_last.shape:
        raise ShapeMismatch(f"rec_loss: {i_rec.shape} vs {i_last.shape}")
    return nt.mse_loss(i_rec, i_last)


def write_pnm(path: str | Path, image: np.ndarray) -> None:
    """Write an ``H x W x {1,3}`` image in [0,1] as binary PGM/PPM."""
    img = np.clip(np.asarray(image, dtype=np.float64), 0.0, 1.0)
    if img.ndim == 2:
        img = img[..., None]
    h, w, c = img.shape
    if c not in (1, 3):
        raise ShapeMismatch(f"PNM needs 1 or 3 channels, got {c}")
    magic = b"P5" if c == 1 else b"P6"
    raw = np.round(img * 255.0).astype(np.uint8).tobytes()
    Path(path).write_bytes(magic + f"\n{w} {h}\n255\n".encode() + raw)
