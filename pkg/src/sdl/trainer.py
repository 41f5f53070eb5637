"""Joint objective, AdamW, cosine schedule and the training loop."""

from __future__ import annotations

import csv
import io
import json
import logging
import math
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Callable, Iterable, Mapping

import numpy as np

from sdl import checkpoint as ckpt
from sdl import ndtensor as nt
from sdl.discovery import (
    Dictionary,
    SdmConfig,
    beta_schedule,
    dict_loss,
    init_dictionary,
    sample_discovery_pass,
)
from sdl.encoder import (
    EncoderConfig,
    encode,
    encoder_param_count,
    frame_features,
    frame_logits,
    init_encoder,
    slice_labels,
)
from sdl.errors import ConfigError, InvalidEpoch, NonFiniteLoss, ShapeMismatch
from sdl.ndtensor import Tensor
from sdl.synthdata import BACKGROUND, Batch, Split, load_batch
from sdl.temporal import decode_last_frame, init_decoder, rec_loss

log = logging.getLogger(__name__)

METRIC_FIELDS = ("epoch", "lr", "beta", "ce", "rec", "dict", "mean_w", "train_acc")


@dataclass
class TrainConfig:
    epochs: int = 40
    lr: float = 3e-4
    weight_decay: float = 0.01
    batch_size: int = 8
    lambda_rec: float = 0.1
    lambda_dict: float = 0.5
    gate_fraction: float = 0.10
    seed: int = 0
    temporal_discovery: bool = True
    sample_discovery: bool = True
    augment: bool = True
    refine_head_input: bool = False
    model: EncoderConfig = field(default_factory=EncoderConfig)
    discovery: SdmConfig = field(default_factory=SdmConfig)

    def __post_init__(self):
        if self.epochs < 1:
            raise ConfigError("epochs", "must be >= 1")
        if self.batch_size < 1:
            raise ConfigError("batch_size", "must be >= 1")
        if self.lambda_rec < 0:
            raise ConfigError("lambda_rec", "must be >= 0")
        if self.lambda_dict < 0:
            raise ConfigError("lambda_dict", "must be >= 0")
        if not 0.0 <= self.gate_fraction <= 1.0:
            raise ConfigError("gate_fraction", "must lie in [0, 1]")
        if self.lr <= 0:
            raise ConfigError("lr", "must be > 0")
        if self.weight_decay < 0:
            raise ConfigError("weight_decay", "must be >= 0")

    @property
    def gate_epoch(self) -> int:
        return int(round(self.gate_fraction * self.epochs))

    def sdm(self) -> SdmConfig:
        d = self.discovery.to_dict()
        d["gate_epoch"] = self.gate_epoch
        return SdmConfig(**d)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["gate_epoch"] = self.gate_epoch
        return d

    @classmethod
    def from_dict(cls, d: Mapping) -> "TrainConfig":
        d = dict(d)
        names = {f.name for f in fields(cls)}
        unknown = set(d) - names - {"gate_epoch"}
        if unknown:
            raise ConfigError(sorted(unknown)[0], "unknown config field")
        model = d.pop("model", None) or {}
        disc = d.pop("discovery", None) or {}
        d.pop("gate_epoch", None)
        try:
            return cls(model=EncoderConfig(**model), discovery=SdmConfig(**disc), **d)
        except TypeError as exc:
            raise ConfigError("config", str(exc)) from exc


# ------------------------------------------------------------------ model


class TracedParams(dict):
    """Parameter dict that records every name read through ``[]``."""

    def __init__(self, *args, **kwargs):
        super().__init__(*args, **kwargs)
        self.accessed: list[str] = []

    def __getitem__(self, key):
        self.accessed.append(key)
        return super().__getitem__(key)


@dataclass
class SDLModel:
    cfg: EncoderConfig
    encoder: dict[str, Tensor]
    decoder: dict[str, Tensor] | None = None
    dictionary: Dictionary | None = None

    @classmethod
    def create(cls, cfg: EncoderConfig, seed: int, decoder: bool = True, dictionary: bool = True) -> "SDLModel":
        rng = np.random.default_rng([seed, 1])
        enc = init_encoder(cfg, rng)
        dec = init_decoder(cfg, np.random.default_rng([seed, 2])) if decoder else None
        dic = init_dictionary(cfg.n_classes, cfg.dim, seed) if dictionary else None
        return cls(cfg, enc, dec, dic)

    def trainable(self) -> dict[str, Tensor]:
        p = dict(self.encoder)
        if self.decoder is not None:
            p.update(self.decoder)
        if self.dictionary is not None:
            p["dictionary.atoms"] = self.dictionary.atoms
        return p

    def inference_param_count(self) -> int:
        return sum(t.size() for t in self.encoder.values())


def infer(model: SDLModel, videos, batch_size: int = 8, trace: list | None = None) -> np.ndarray:
    """Frame logits ``(N, T, C)`` from the encoder and heads only."""
    params = TracedParams(model.encoder)
    vids = np.asarray(videos, dtype=np.float64)
    if vids.ndim == 4:
        vids = vids[None]
    out = []
    with nt.inference_mode():
        for i in range(0, len(vids), batch_size):
            z = encode(vids[i : i + batch_size], params, model.cfg)
            out.append(frame_logits(z, params, model.cfg).data)
    if trace is not None:
        trace.extend(params.accessed)
    return np.concatenate(out, axis=0) if out else np.zeros((0, model.cfg.frames, model.cfg.n_classes))


# ------------------------------------------------------------------ loss


def expand_slice_weights(w_slices: np.ndarray, patch_t: int) -> np.ndarray:
    return np.repeat(np.asarray(w_slices, dtype=np.float64), patch_t, axis=-1)


def joint_loss(
    logits: Tensor,
    labels,
    weights=None,
    i_rec: Tensor | None = None,
    i_last=None,
    atoms: Tensor | None = None,
    cfg: TrainConfig | None = None,
    dict_classes: Iterable[int] | None = None,
) -> tuple[Tensor, dict[str, float]]:
    """Weighted frame cross-entropy plus the scaled auxiliary terms.

    The cross-entropy is averaged over all frames in the batch. Passing
    ``None`` for the reconstruction pair or for ``atoms`` drops that term.
    """
    cfg = cfg or TrainConfig()
    labels = np.asarray(labels, dtype=np.int64)
    c = logits.shape[-1]
    if logits.shape[:-1] != labels.shape:
        raise ShapeMismatch(f"logits {logits.shape} vs labels {labels.shape}")
    w = None if weights is None else np.asarray(weights, dtype=np.float64).reshape(-1)
    ce = nt.cross_entropy(logits.reshape(-1, c), labels.reshape(-1), w)
    total = ce
    parts = {"ce": ce.item(), "rec": 0.0, "dict": 0.0}
    if i_rec is not None:
        rec = rec_loss(i_rec, i_last)
        total = total + nt.scale(rec, cfg.lambda_rec)
        parts["rec"] = rec.item()
    if atoms is not None:
        dl = dict_loss(atoms, cfg.discovery, dict_classes)
        total = total + nt.scale(dl, cfg.lambda_dict)
        parts["dict"] = dl.item()
    return total, parts


# ------------------------------------------------------------------ optimizer


@dataclass
class OptimState:
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    step: int = 0


BETA1, BETA2, ADAM_EPS = 0.9, 0.999, 1e-8


def adamw_step(params: Mapping[str, Tensor], grads: Mapping[str, np.ndarray | None], state: OptimState, lr: float, wd: float) -> OptimState:
    """One AdamW update in place: decay the weights, then the Adam step."""
    state.step += 1
    bc1 = 1.0 - BETA1**state.step
    bc2 = 1.0 - BETA2**state.step
    for name, p in params.items():
        g = grads.get(name)
        g = np.zeros_like(p.data) if g is None else np.asarray(g, dtype=np.float64)
        if g.shape != p.shape:
            raise ShapeMismatch(f"gradient for {name}: {g.shape} vs {p.shape}")
        m = state.m.get(name)
        v = state.v.get(name)
        if m is None:
            m = np.zeros_like(p.data)
            v = np.zeros_like(p.data)
        m *= BETA1
        m += (1.0 - BETA1) * g
        v *= BETA2
        v += (1.0 - BETA2) * (g * g)
        state.m[name], state.v[name] = m, v
        if wd:
            p.data *= 1.0 - lr * wd
        denom = np.sqrt(v / bc2)
        denom += ADAM_EPS
        p.data -= (lr / bc1) * m / denom
    return state


def cosine_lr(epoch: int, total: int, base_lr: float) -> float:
    if not 0 <= epoch < total:
        raise InvalidEpoch(f"epoch {epoch} outside [0, {total})")
    if total == 1:
        return base_lr
    return base_lr * 0.5 * (1.0 + math.cos(math.pi * epoch / (total - 1)))


# ------------------------------------------------------------------ training


@dataclass
class StepOutput:
    loss: float
    parts: dict[str, float]
    weights: np.ndarray  # (B, T)
    correct: int
    frames: int


def train_step(
    model: SDLModel,
    batch: Batch,
    cfg: TrainConfig,
    state: OptimState,
    epoch: int,
    lr: float,
    beta: float,
    sdm: SdmConfig | None = None,
    uncertainty_path: bool = True,
) -> StepOutput:
    """Forward, sample discovery, joint loss, backward and one AdamW update.

    ``uncertainty_path=False`` keeps the dictionary EMA but never refines
    features or reweights frames.
    """
    sdm = sdm or cfg.sdm()
    ecfg = model.cfg
    params = model.trainable()
    tape = nt.get_tape()
    tape.clear()
    with nt.recording():
        z = encode(batch.videos, model.encoder, ecfg)
        b = len(batch)
        w_frames = np.ones((b, ecfg.frames))
        head_in = z
        if cfg.sample_discovery and model.dictionary is not None:
            feats = frame_features(z)
            slab = slice_labels(batch.labels, ecfg.patch_t)
            if uncertainty_path:
                res = sample_discovery_pass(feats.data, slab, model.dictionary, epoch, sdm, beta)
                w_frames = expand_slice_weights(res.weights, ecfg.patch_t)
                if cfg.refine_head_input and epoch >= sdm.gate_epoch:
                    shift = (res.features - feats.data)[:, :, None, None, :]
                    head_in = z + shift
            else:
                closed = SdmConfig(**{**sdm.to_dict(), "gate_epoch": epoch + 1})
                sample_discovery_pass(feats.data, slab, model.dictionary, epoch, closed, beta)
        logits = frame_logits(head_in, model.encoder, ecfg)
        i_rec = i_last = None
        if cfg.temporal_discovery and model.decoder is not None:
            i_rec = decode_last_frame(z, model.decoder, ecfg)
            i_last = batch.videos[:, -1]
        atoms = None
        if cfg.sample_discovery and model.dictionary is not None:
            atoms = model.dictionary.atoms
        dict_classes = [c for c in range(ecfg.n_classes) if c != sdm.background]
        loss, parts = joint_loss(logits, batch.labels, w_frames, i_rec, i_last, atoms, cfg, dict_classes)
        if not math.isfinite(loss.item()):
            raise NonFiniteLoss(f"epoch {epoch} step {state.step}: loss={loss.item()} parts={parts}")
        for p in params.values():
            p.grad = None
        nt.backward(loss)
    grads = {k: p.grad for k, p in params.items()}
    adamw_step(params, grads, state, lr, cfg.weight_decay)
    pred = logits.data.argmax(axis=-1)
    return StepOutput(loss.item(), parts, w_frames, int((pred == batch.labels).sum()), int(batch.labels.size))


@dataclass
class TrainResult:
    model: SDLModel
    state: OptimState
    metrics: list[dict]
    config: TrainConfig
    epoch: int = 0

    def metrics_csv(self) -> str:
        return format_metrics(self.metrics)


def format_metrics(rows: list[dict]) -> str:
    buf = io.StringIO()
    wr = csv.writer(buf, lineterminator="\n")
    wr.writerow(METRIC_FIELDS)
    for r in rows:
        wr.writerow([r["epoch"]] + [repr(float(r[k])) for k in METRIC_FIELDS[1:]])
    return buf.getvalue()


def train(
    cfg: TrainConfig,
    train_split: Split,
    crop: int = 32,
    on_epoch: Callable[[dict], None] | None = None,
    resume: TrainResult | None = None,
    stop_after: int | None = None,
) -> TrainResult:
    """Run (or resume) the full schedule. Deterministic per ``cfg.seed``."""
    if resume is None:
        model = SDLModel.create(cfg.model, cfg.seed, decoder=cfg.temporal_discovery, dictionary=cfg.sample_discovery)
        result = TrainResult(model, OptimState(), [], cfg, 0)
    else:
        result = resume
    model, state = result.model, result.state
    sdm = cfg.sdm()
    n = len(train_split)
    end = cfg.epochs if stop_after is None else min(cfg.epochs, stop_after)
    for epoch in range(result.epoch, end):
        lr = cosine_lr(epoch, cfg.epochs, cfg.lr)
        beta = beta_schedule(epoch, cfg.epochs, sdm)
        order = np.random.default_rng([cfg.seed, epoch, 7]).permutation(n)
        sums = {"ce": 0.0, "rec": 0.0, "dict": 0.0}
        w_sum = 0.0
        correct = frames = steps = 0
        for i in range(0, n, cfg.batch_size):
            idx = order[i : i + cfg.batch_size]
            batch = load_batch(train_split, idx, cfg.augment, seed=cfg.seed * 1_000_003 + epoch, crop=crop)
            out = train_step(model, batch, cfg, state, epoch, lr, beta, sdm)
            for k in sums:
                sums[k] += out.parts[k]
            w_sum += float(out.weights.sum())
            correct += out.correct
            frames += out.frames
            steps += 1
        row = {
            "epoch": epoch,
            "lr": lr,
            "beta": beta if cfg.sample_discovery else 0.0,
            "ce": sums["ce"] / steps,
            "rec": sums["rec"] / steps,
            "dict": sums["dict"] / steps,
            "mean_w": w_sum / frames,
            "train_acc": correct / frames,
        }
        result.metrics.append(row)
        result.epoch = epoch + 1
        log.info("epoch %d lr=%.2e ce=%.4f rec=%.4f dict=%.4f w=%.3f acc=%.3f", epoch, lr, row["ce"], row["rec"], row["dict"], row["mean_w"], row["train_acc"])
        if on_epoch is not None:
            on_epoch(row)
    return result


# ------------------------------------------------------------------ persistence


def save_checkpoint(path: str | Path, result: TrainResult) -> Path:
    m = result.model
    tensors: dict[str, np.ndarray] = {k: t.data for k, t in m.encoder.items()}
    if m.decoder is not None:
        tensors.update({k: t.data for k, t in m.decoder.items()})
    if m.dictionary is not None:
        tensors["dictionary.atoms"] = m.dictionary.atoms.data
    for k in sorted(result.state.m):
        tensors[f"optim.m.{k}"] = result.state.m[k]
        tensors[f"optim.v.{k}"] = result.state.v[k]
    meta = {
        "config": result.config.to_dict(),
        "epoch": result.epoch,
        "step": result.state.step,
        "dictionary_epoch": m.dictionary.epoch if m.dictionary is not None else None,
        "encoder_params": m.inference_param_count(),
    }
    root = ckpt.save_tensors(path, tensors, meta)
    (root / "metrics.csv").write_text(result.metrics_csv())
    return root


def load_checkpoint(path: str | Path) -> TrainResult:
    from sdl.errors import CheckpointCorrupt

    tensors, meta = ckpt.load_tensors(path)
    try:
        cfg = TrainConfig.from_dict(meta["config"])
        model = SDLModel.create(cfg.model, cfg.seed, decoder=cfg.temporal_discovery, dictionary=cfg.sample_discovery)
        for group in (model.encoder, model.decoder or {}):
            for k, t in group.items():
                if tensors[k].shape != t.shape:
                    raise CheckpointCorrupt(f"{path}: {k} has shape {tensors[k].shape}, expected {t.shape}")
                t.data = tensors[k].copy()
        if model.dictionary is not None:
            model.dictionary.atoms.data = tensors["dictionary.atoms"].copy()
            model.dictionary.epoch = meta.get("dictionary_epoch", -1)
        state = OptimState(step=int(meta["step"]))
        for k in tensors:
            if k.startswith("optim.m."):
                name = k[len("optim.m.") :]
                state.m[name] = tensors[k].copy()
                state.v[name] = tensors["optim.v." + name].copy()
        metrics = []
        mpath = Path(path) / "metrics.csv"
        if mpath.exists():
            for r in csv.DictReader(io.StringIO(mpath.read_text())):
                metrics.append({k: (int(v) if k == "epoch" else float(v)) for k, v in r.items()})
    except (KeyError, ValueError, TypeError, ConfigError) as exc:
        raise CheckpointCorrupt(f"{path}: {exc}") from exc
    return TrainResult(model, state, metrics, cfg, int(meta["epoch"]))


def write_config(path: str | Path, cfg: TrainConfig) -> None:
    Path(path).write_text(json.dumps(cfg.to_dict(), indent=2, sort_keys=True) + "\n")


def baseline_param_count(cfg: EncoderConfig) -> int:
    return encoder_param_count(cfg)


__all__ = [
    "BACKGROUND",
    "METRIC_FIELDS",
    "OptimState",
    "SDLModel",
    "StepOutput",
    "TracedParams",
    "TrainConfig",
    "TrainResult",
    "adamw_step",
    "baseline_param_count",
    "cosine_lr",
    "expand_slice_weights",
    "infer",
    "joint_loss",
    "load_checkpoint",
    "save_checkpoint",
    "train",
    "train_step",
    "write_config",
]
