"""Synthetic confusable-behaviour videos and their on-disk format.

Six classes: a bright square moving left or right, each with and without a
static striped "road marking" band (the cue), a square drifting straight
down, and a background scene with no square. The stripes alternate
``+amp``/``-amp`` around the background level with a random phase, so the
cue has zero mean per pixel and is invisible to a linear read-out, while a
model with nonlinearities can pick it up.

Split files (``SDL1``), all little-endian::

    b"SDL1"  uint32 T, H, W, C_img, count
    count x { float32 video[T][H][W][C_img]; uint16 labels[T]; uint8 boundary[T] }
"""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from sdl.errors import ConfigError, InvalidClass, SDLError

MAGIC = b"SDL1"
HEADER = struct.Struct("<4s5I")

CLASS_NAMES = (
    "move_left_cue",
    "move_left",
    "move_right_cue",
    "move_right",
    "straight",
    "background",
)
CONFUSABLE_PAIRS = ((0, 1), (2, 3))
BACKGROUND = 5

_DIRECTION = {0: (0, -2), 1: (0, -2), 2: (0, 2), 3: (0, 2), 4: (1, 0), 5: None}
_HAS_CUE = {0: True, 1: False, 2: True, 3: False, 4: False, 5: False}

SQUARE = 6
SQUARE_VALUE = 0.9
BACKGROUND_LEVEL = 0.35
STRIPE_AMP = 0.15
STRIPE_PERIOD = 4


@dataclass
class SynthConfig:
    frames: int = 8
    height: int = 36
    width: int = 36
    channels: int = 3
    crop: int = 32
    n_classes: int = 6
    n_train: int = 600
    n_test: int = 200
    boundary_fraction: float = 0.3
    noise: float = 0.03
    seed: int = 0
    class_names: list[str] = field(default_factory=lambda: list(CLASS_NAMES))

    def __post_init__(self):
        if not 0.0 <= self.boundary_fraction <= 1.0:
            raise ConfigError("boundary_fraction", f"must lie in [0, 1], got {self.boundary_fraction}")
        if self.n_classes != len(CLASS_NAMES):
            raise ConfigError("n_classes", f"the generator renders exactly {len(CLASS_NAMES)} classes")
        if self.frames < 4:
            raise ConfigError("frames", "need at least 4 frames")
        if self.crop > min(self.height, self.width):
            raise ConfigError("crop", "crop larger than the generated frame")
        if self.height < 24 or self.width < 24:
            raise ConfigError("height", "frames smaller than 24 pixels cannot hold the scene")
        if self.noise < 0:
            raise ConfigError("noise", "must be >= 0")
        if self.n_train < 0 or self.n_test < 0:
            raise ConfigError("n_train", "split sizes must be >= 0")

    @property
    def road_top(self) -> int:
        return self.height * 2 // 3

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "SynthConfig":
        known = {k: v for k, v in d.items() if k in cls.__dataclass_fields__}
        return cls(**known)


@dataclass
class SequenceSample:
    video: np.ndarray  # (T, H, W, C) float in [0, 1]
    frame_labels: np.ndarray  # (T,) int
    boundary_flags: np.ndarray  # (T,) bool


def boundary_flags_for(labels) -> np.ndarray:
    lab = np.asarray(labels)
    flags = np.zeros(len(lab), dtype=bool)
    for t in range(1, len(lab)):
        if lab[t] != lab[t - 1]:
            flags[max(0, t - 1) : t + 2] = True
    return flags


def _start(cls_id: int, cfg: SynthConfig, rng: np.random.Generator) -> tuple[int, int]:
    span = 2 * (cfg.frames - 1)
    hi_x = cfg.width - SQUARE
    y = int(rng.integers(4, cfg.road_top - SQUARE - cfg.frames + 1))
    if cls_id in (0, 1):
        x = int(rng.integers(min(span, hi_x), hi_x + 1))
    elif cls_id in (2, 3):
        x = int(rng.integers(0, max(1, hi_x - span) + 1))
    else:
        x = int(rng.integers(4, hi_x - 3))
    return y, x


def render_sequence(classes, switch: int | None, cfg: SynthConfig, seed: int) -> SequenceSample:
    """Render one sequence.

    ``classes`` is a class id or ``(a, b)``; with ``switch=s`` frames ``< s``
    carry ``a`` and the rest ``b``.
    """
    if isinstance(classes, (int, np.integer)):
        a = b = int(classes)
    else:
        a, b = (int(c) for c in classes)
    for c in (a, b):
        if not 0 <= c < len(CLASS_NAMES):
            raise InvalidClass(f"class id {c} outside [0, {len(CLASS_NAMES)})")
    T, H, W, C = cfg.frames, cfg.height, cfg.width, cfg.channels
    if switch is None or a == b:
        switch = T
    if not 1 <= switch <= T:
        raise ConfigError("switch", f"switch frame {switch} outside [1, {T}]")
    labels = np.array([a if t < switch else b for t in range(T)], dtype=np.int64)

    rng = np.random.default_rng(seed)
    y, x = _start(a, cfg, rng)
    phase = int(rng.integers(0, STRIPE_PERIOD))
    noise = rng.normal(0.0, cfg.noise, size=(T, H, W, C))

    rows = np.arange(H)
    stripe = np.where(((rows + phase) % STRIPE_PERIOD) < STRIPE_PERIOD // 2, STRIPE_AMP, -STRIPE_AMP)
    stripe[: cfg.road_top] = 0.0

    video = np.full((T, H, W, C), BACKGROUND_LEVEL)
    for t in range(T):
        c = labels[t]
        if _HAS_CUE[c]:
            video[t] += stripe[:, None, None]
        if _DIRECTION[c] is not None:
            video[t, y : y + SQUARE, x : x + SQUARE, :] = SQUARE_VALUE
        nxt = labels[t + 1] if t + 1 < T else c
        if _DIRECTION[nxt] is not None:
            dy, dx = _DIRECTION[nxt]
            y = int(np.clip(y + dy, 0, cfg.road_top - SQUARE))
            x = int(np.clip(x + dx, 0, W - SQUARE))
    video = np.clip(video + noise, 0.0, 1.0)
    flags = boundary_flags_for(labels) if switch < T else np.zeros(T, dtype=bool)
    return SequenceSample(video, labels, flags)


def sequence_spec(cfg: SynthConfig, split: str, index: int) -> tuple[tuple[int, int], int | None, int]:
    """Classes, switch frame and render seed of one record, from ``(seed, index)`` alone."""
    if split == "train":
        n, offset = cfg.n_train, 0
    elif split == "test":
        n, offset = cfg.n_test, cfg.n_train
    else:
        raise SDLError(f"unknown split {split!r}")
    if not 0 <= index < n:
        raise IndexError(f"{split} index {index} outside [0, {n})")
    seq_seed = cfg.seed ^ (offset + index)
    rng = np.random.default_rng([seq_seed, 0x5D1])
    a = index % cfg.n_classes
    if rng.random() < cfg.boundary_fraction:
        b = int((a + rng.integers(1, cfg.n_classes)) % cfg.n_classes)
        switch = int(rng.integers(2, cfg.frames - 1))
        return (a, b), switch, seq_seed
    return (a, a), None, seq_seed


def regenerate(cfg: SynthConfig, split: str, index: int) -> SequenceSample:
    classes, switch, seq_seed = sequence_spec(cfg, split, index)
    return render_sequence(classes, switch, cfg, seq_seed)


# --------------------------------------------------------------------- I/O


def _record_dtype(T: int, H: int, W: int, C: int) -> np.dtype:
    return np.dtype([("video", "<f4", (T, H, W, C)), ("labels", "<u2", (T,)), ("boundary", "u1", (T,))])


def write_split(path: str | Path, samples: list[SequenceSample], cfg: SynthConfig) -> None:
    T, H, W, C = cfg.frames, cfg.height, cfg.width, cfg.channels
    rec = np.zeros(len(samples), dtype=_record_dtype(T, H, W, C))
    for i, s in enumerate(samples):
        rec[i]["video"] = s.video.astype("<f4")
        rec[i]["labels"] = s.frame_labels.astype("<u2")
        rec[i]["boundary"] = s.boundary_flags.astype("u1")
    with open(path, "wb") as fh:
        fh.write(HEADER.pack(MAGIC, T, H, W, C, len(samples)))
        fh.write(rec.tobytes())


@dataclass
class Split:
    videos: np.ndarray  # (N, T, H, W, C) float32
    labels: np.ndarray  # (N, T) int64
    boundary: np.ndarray  # (N, T) bool

    def __len__(self) -> int:
        return len(self.labels)

    def sample(self, i: int) -> SequenceSample:
        return SequenceSample(self.videos[i].astype(np.float64), self.labels[i].copy(), self.boundary[i].copy())


def read_split(path: str | Path) -> Split:
    raw = Path(path).read_bytes()
    if len(raw) < HEADER.size:
        raise SDLError(f"{path}: truncated header")
    magic, T, H, W, C, count = HEADER.unpack_from(raw)
    if magic != MAGIC:
        raise SDLError(f"{path}: bad magic {magic!r}")
    dt = _record_dtype(T, H, W, C)
    if len(raw) != HEADER.size + count * dt.itemsize:
        raise SDLError(f"{path}: size does not match header count {count}")
    rec = np.frombuffer(raw, dtype=dt, count=count, offset=HEADER.size)
    return Split(
        np.array(rec["video"], dtype=np.float32),
        rec["labels"].astype(np.int64),
        rec["boundary"].astype(bool),
    )


def generate_dataset(cfg: SynthConfig, out_dir: str | Path) -> dict:
    """Write ``train.bin``, ``test.bin`` and ``manifest.json``; returns the manifest."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    manifest = {"format": "SDL1", "config": cfg.to_dict(), "classes": list(CLASS_NAMES), "splits": {}}
    for split, n in (("train", cfg.n_train), ("test", cfg.n_test)):
        samples = [regenerate(cfg, split, i) for i in range(n)]
        fname = f"{split}.bin"
        write_split(out / fname, samples, cfg)
        counts = np.bincount([int(s.frame_labels[0]) for s in samples], minlength=cfg.n_classes)
        manifest["splits"][split] = {
            "file": fname,
            "count": n,
            "class_counts": {CLASS_NAMES[c]: int(k) for c, k in enumerate(counts)},
            "boundary_sequences": int(sum(bool(s.boundary_flags.any()) for s in samples)),
            "sha256": hashlib.sha256((out / fname).read_bytes()).hexdigest(),
        }
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return manifest


@dataclass
class Dataset:
    root: Path
    manifest: dict
    config: SynthConfig
    train: Split
    test: Split

    def split(self, name: str) -> Split:
        if name not in ("train", "test"):
            raise SDLError(f"unknown split {name!r}")
        return getattr(self, name)


def load_dataset(root: str | Path) -> Dataset:
    root = Path(root)
    mpath = root / "manifest.json"
    manifest = json.loads(mpath.read_text())
    cfg = SynthConfig.from_dict(manifest["config"])
    splits = {k: read_split(root / v["file"]) for k, v in manifest["splits"].items()}
    return Dataset(root, manifest, cfg, splits["train"], splits["test"])


# --------------------------------------------------------------- loading


@dataclass
class Batch:
    videos: np.ndarray  # (B, T, crop, crop, C) float64
    labels: np.ndarray  # (B, T)
    boundary: np.ndarray  # (B, T)
    indices: np.ndarray

    def __len__(self) -> int:
        return len(self.indices)


def load_batch(split: Split, indices, augment: bool, seed: int, crop: int = 32) -> Batch:
    """Crop (and optionally jitter) the requested records.

    ``augment`` draws, per record, a random crop shared by all frames,
    per-channel brightness offsets in [-0.1, 0.1] and a temporal offset in
    {-1, 0, 1} with edge clamping; labels and boundary flags move with the
    frames. Without ``augment`` the crop is centred. Draws depend only on
    ``(seed, index)``.
    """
    idx = np.asarray(indices, dtype=np.int64).reshape(-1)
    n = len(split)
    if np.any((idx < 0) | (idx >= n)):
        raise IndexError(f"batch indices outside [0, {n})")
    _, T, H, W, C = split.videos.shape
    vids = np.empty((len(idx), T, crop, crop, C))
    labels = np.empty((len(idx), T), dtype=np.int64)
    bnd = np.empty((len(idx), T), dtype=bool)
    for k, i in enumerate(idx):
        v = split.videos[i].astype(np.float64)
        lab, flg = split.labels[i], split.boundary[i]
        if augment:
            rng = np.random.default_rng([seed, int(i)])
            oy = int(rng.integers(0, H - crop + 1))
            ox = int(rng.integers(0, W - crop + 1))
            shift = int(rng.integers(-1, 2))
            bright = rng.uniform(-0.1, 0.1, size=C)
            src = np.clip(np.arange(T) + shift, 0, T - 1)
            v = np.clip(v[src, oy : oy + crop, ox : ox + crop, :] + bright, 0.0, 1.0)
            lab, flg = lab[src], flg[src]
        else:
            oy, ox = (H - crop) // 2, (W - crop) // 2
            v = v[:, oy : oy + crop, ox : ox + crop, :]
        vids[k] = v
        labels[k] = lab
        bnd[k] = flg
    return Batch(vids, labels, bnd, idx)
