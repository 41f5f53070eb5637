"""Frame-level AP/mAP, per-frame uncertainty curves and feature dumps."""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from sdl import ndtensor as nt
from sdl.discovery import Dictionary, sample_weight, uncertainty
from sdl.encoder import encode, frame_features, frame_logits, slice_labels
from sdl.errors import NoPositives, ShapeMismatch
from sdl.synthdata import BACKGROUND, CLASS_NAMES, Split, load_batch
from sdl.trainer import SDLModel


def average_precision(scores, labels) -> float:
    """Step-wise area under the precision-recall curve.

    Ranks by descending score (ties keep the original order) and sums
    precision at every rank where recall increases, times the recall step.
    """
    s = np.asarray(scores, dtype=np.float64).reshape(-1)
    y = np.asarray(labels).reshape(-1).astype(bool)
    if s.shape != y.shape:
        raise ShapeMismatch(f"{s.shape} scores vs {y.shape} labels")
    n_pos = int(y.sum())
    if n_pos == 0:
        raise NoPositives("average precision is undefined without positives")
    order = np.argsort(-s, kind="stable")
    hits = y[order]
    tp = np.cumsum(hits)
    precision = tp / np.arange(1, len(s) + 1)
    return float(precision[hits].sum() / n_pos)


def softmax_np(x: np.ndarray, axis: int = -1) -> np.ndarray:
    z = x - x.max(axis=axis, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=axis, keepdims=True)


@dataclass
class EvalReport:
    per_class_ap: dict[str, float | None]
    map: float
    classes_in_map: list[str]
    notes: list[str]
    frames: list[dict] = field(default_factory=list)
    config: dict = field(default_factory=dict)

    def to_json(self) -> str:
        d = {
            "per_class_ap": self.per_class_ap,
            "map": self.map,
            "classes_in_map": self.classes_in_map,
            "notes": self.notes,
            "config": self.config,
        }
        return json.dumps(d, indent=2, sort_keys=True) + "\n"

    def write(self, out_dir: str | Path) -> None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        (out / "report.json").write_text(self.to_json())
        cols = ("sequence", "frame", "true", "predicted", "score", "mu", "w")
        with open(out / "frames.csv", "w", newline="") as fh:
            wr = csv.writer(fh, lineterminator="\n")
            wr.writerow(cols)
            for r in self.frames:
                wr.writerow([r[c] if isinstance(r[c], (int, np.integer)) else repr(float(r[c])) for c in cols])


@dataclass
class ForwardPass:
    logits: np.ndarray  # (N, T, C)
    features: np.ndarray  # (N, n_t, D)


def forward_split(model: SDLModel, videos: np.ndarray, batch_size: int = 16) -> ForwardPass:
    logits, feats = [], []
    with nt.inference_mode():
        for i in range(0, len(videos), batch_size):
            z = encode(videos[i : i + batch_size], model.encoder, model.cfg)
            logits.append(frame_logits(z, model.encoder, model.cfg).data)
            feats.append(frame_features(z).data)
    return ForwardPass(np.concatenate(logits), np.concatenate(feats))


def slice_uncertainty(features: np.ndarray, classes: np.ndarray, dictionary: Dictionary | None, background: int | None = BACKGROUND):
    """``(mu, w)`` per feature row against the atom of ``classes``; background rows get NaN/1."""
    flat = features.reshape(-1, features.shape[-1])
    cls = np.asarray(classes).reshape(-1)
    mu = np.full(len(flat), np.nan)
    w = np.ones(len(flat))
    if dictionary is not None:
        for i, (f, c) in enumerate(zip(flat, cls)):
            if background is not None and c == background:
                continue
            mu[i] = uncertainty(f, dictionary.atoms.data[c])
            w[i] = sample_weight(mu[i])
    return mu.reshape(features.shape[:-1]), w.reshape(features.shape[:-1])


def score_frames(probs: np.ndarray, labels: np.ndarray, include_background: bool = False) -> EvalReport:
    """One-vs-rest AP per class over all frames, and their macro mean.

    ``probs`` is ``(..., C)`` with integer ``labels`` of the leading shape.
    Classes without positives are reported as ``None`` and left out of mAP.
    """
    probs = np.asarray(probs, dtype=np.float64)
    labels = np.asarray(labels)
    if probs.shape[:-1] != labels.shape:
        raise ShapeMismatch(f"probs {probs.shape} vs labels {labels.shape}")
    per_class: dict[str, float | None] = {}
    notes = []
    used = []
    for c in range(probs.shape[-1]):
        if c == BACKGROUND and not include_background:
            continue
        name = CLASS_NAMES[c] if c < len(CLASS_NAMES) else str(c)
        try:
            per_class[name] = average_precision(probs[..., c].reshape(-1), (labels == c).reshape(-1))
            used.append(name)
        except NoPositives:
            per_class[name] = None
            notes.append(f"class {name} has no test positives; excluded from mAP")
    m = float(np.mean([per_class[n] for n in used])) if used else float("nan")
    return EvalReport(per_class, m, used, notes)


def evaluate(model: SDLModel, split: Split, crop: int = 32, include_background: bool = False, keep_frames: bool = True) -> EvalReport:
    batch = load_batch(split, np.arange(len(split)), augment=False, seed=0, crop=crop)
    fp = forward_split(model, batch.videos)
    probs = softmax_np(fp.logits)
    labels = batch.labels
    report = score_frames(probs, labels, include_background)
    frames = []
    if keep_frames:
        pt = model.cfg.patch_t
        pred = probs.argmax(-1)
        slice_pred = fp.logits[:, ::pt].argmax(-1)
        mu_s, w_s = slice_uncertainty(fp.features, slice_pred, model.dictionary)
        mu_f = np.repeat(mu_s, pt, axis=1)
        w_f = np.repeat(w_s, pt, axis=1)
        for i in range(len(labels)):
            for t in range(labels.shape[1]):
                frames.append(
                    {
                        "sequence": int(batch.indices[i]),
                        "frame": t,
                        "true": int(labels[i, t]),
                        "predicted": int(pred[i, t]),
                        "score": float(probs[i, t, pred[i, t]]),
                        "mu": float(mu_f[i, t]),
                        "w": float(w_f[i, t]),
                    }
                )
    report.frames = frames
    return report


# ---------------------------------------------------------------- uncertainty


@dataclass
class UncertaintyCurve:
    frame: np.ndarray
    label: np.ndarray
    predicted: np.ndarray
    boundary: np.ndarray
    mu: np.ndarray
    w: np.ndarray
    mu_true: np.ndarray
    w_true: np.ndarray

    def __len__(self) -> int:
        return len(self.frame)

    def write_csv(self, path: str | Path) -> None:
        with open(path, "w", newline="") as fh:
            wr = csv.writer(fh, lineterminator="\n")
            wr.writerow(("frame_index", "class", "predicted", "boundary", "mu", "weight", "mu_true", "weight_true"))
            for i in range(len(self)):
                wr.writerow(
                    (
                        int(self.frame[i]),
                        int(self.label[i]),
                        int(self.predicted[i]),
                        int(self.boundary[i]),
                        repr(float(self.mu[i])),
                        repr(float(self.w[i])),
                        repr(float(self.mu_true[i])),
                        repr(float(self.w_true[i])),
                    )
                )


def uncertainty_curves(model: SDLModel, videos: np.ndarray, labels: np.ndarray, boundary: np.ndarray) -> list[UncertaintyCurve]:
    """Per-frame ``mu``/``w`` for each sequence, no feature refinement.

    The primary series uses the atom of the predicted class of each temporal
    slice; ``*_true`` use the ground-truth majority class.
    """
    fp = forward_split(model, np.asarray(videos, dtype=np.float64))
    pt = model.cfg.patch_t
    slice_pred = fp.logits[:, ::pt].argmax(-1)
    slice_true = slice_labels(labels, pt)
    mu_p, w_p = slice_uncertainty(fp.features, slice_pred, model.dictionary)
    mu_t, w_t = slice_uncertainty(fp.features, slice_true, model.dictionary)
    pred = fp.logits.argmax(-1)
    out = []
    for i in range(len(fp.logits)):
        out.append(
            UncertaintyCurve(
                np.arange(labels.shape[1]),
                np.asarray(labels[i]),
                pred[i],
                np.asarray(boundary[i]).astype(bool),
                np.repeat(mu_p[i], pt),
                np.repeat(w_p[i], pt),
                np.repeat(mu_t[i], pt),
                np.repeat(w_t[i], pt),
            )
        )
    return out


def uncertainty_curve(model: SDLModel, video: np.ndarray, labels, boundary=None) -> UncertaintyCurve:
    labels = np.asarray(labels)[None]
    boundary = np.zeros_like(labels, dtype=bool) if boundary is None else np.asarray(boundary)[None]
    return uncertainty_curves(model, np.asarray(video)[None], labels, boundary)[0]


def boundary_weight_stats(model: SDLModel, split: Split, crop: int = 32) -> tuple[float, float]:
    """Mean ``w`` on boundary-flagged vs interior frames over a split.

    Only frames whose predicted class has an atom (non-background) count.
    """
    batch = load_batch(split, np.arange(len(split)), augment=False, seed=0, crop=crop)
    curves = uncertainty_curves(model, batch.videos, batch.labels, batch.boundary)
    w = np.stack([c.w for c in curves])
    defined = ~np.isnan(np.stack([c.mu for c in curves]))
    bnd = batch.boundary
    return float(w[bnd & defined].mean()), float(w[~bnd & defined].mean())


def write_svg(path: str | Path, curve: UncertaintyCurve, width: int = 480, height: int = 200) -> None:
    """Line chart of ``w`` per frame; shaded bands mark boundary frames."""
    pad = 30
    n = len(curve)
    xs = [pad + (width - 2 * pad) * (i / max(1, n - 1)) for i in range(n)]

    def ymap(v: float) -> float:
        return height - pad - (height - 2 * pad) * (v - 0.5) / 0.5

    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" viewBox="0 0 {width} {height}">',
        f'<rect width="{width}" height="{height}" fill="white"/>',
    ]
    step = (width - 2 * pad) / max(1, n - 1)
    for i in range(n):
        if curve.boundary[i]:
            parts.append(f'<rect x="{xs[i] - step / 2:.2f}" y="{pad}" width="{step:.2f}" height="{height - 2 * pad}" fill="#fde0c5"/>')
    parts.append(f'<line x1="{pad}" y1="{height - pad}" x2="{width - pad}" y2="{height - pad}" stroke="black"/>')
    parts.append(f'<line x1="{pad}" y1="{pad}" x2="{pad}" y2="{height - pad}" stroke="black"/>')
    for v in (0.5, 0.75, 1.0):
        parts.append(f'<text x="2" y="{ymap(v) + 4:.2f}" font-size="10">{v:.2f}</text>')
    for i in range(n):
        parts.append(f'<text x="{xs[i] - 3:.2f}" y="{height - pad + 14}" font-size="10">{int(curve.label[i])}</text>')
    pts = " ".join(f"{x:.2f},{ymap(float(w)):.2f}" for x, w in zip(xs, curve.w))
    parts.append(f'<polyline points="{pts}" fill="none" stroke="#1f77b4" stroke-width="2"/>')
    parts.append(f'<text x="{width / 2 - 20:.0f}" y="14" font-size="12">weight w</text>')
    parts.append("</svg>")
    Path(path).write_text("\n".join(parts) + "\n")


# ---------------------------------------------------------------- features


@dataclass
class FeatureTable:
    sequence: np.ndarray
    frame: np.ndarray
    label: np.ndarray
    features: np.ndarray  # (rows, D)

    def write_csv(self, path: str | Path) -> None:
        d = self.features.shape[1]
        with open(path, "w", newline="") as fh:
            wr = csv.writer(fh, lineterminator="\n")
            wr.writerow(["sequence", "frame", "class"] + [f"f{j}" for j in range(d)])
            for s, f, c, row in zip(self.sequence, self.frame, self.label, self.features):
                wr.writerow([int(s), int(f), int(c)] + [repr(float(v)) for v in row])

    @classmethod
    def read_csv(cls, path: str | Path) -> "FeatureTable":
        with open(path, newline="") as fh:
            rows = list(csv.reader(fh))[1:]
        if not rows:
            return cls(np.zeros(0, int), np.zeros(0, int), np.zeros(0, int), np.zeros((0, 0)))
        arr = np.array([[float(v) for v in r] for r in rows])
        return cls(arr[:, 0].astype(int), arr[:, 1].astype(int), arr[:, 2].astype(int), arr[:, 3:])


def export_features(model: SDLModel, split: Split, alpha: float | None = None, crop: int = 32) -> FeatureTable:
    """Per-slice features of every non-background test slice.

    With ``alpha`` each row is replaced by ``(1 - alpha) f + alpha S_y``
    using the true class atom.
    """
    batch = load_batch(split, np.arange(len(split)), augment=False, seed=0, crop=crop)
    fp = forward_split(model, batch.videos)
    pt = model.cfg.patch_t
    lab = slice_labels(batch.labels, pt)
    n, n_t, d = fp.features.shape
    seq = np.repeat(batch.indices, n_t)
    frame = np.tile(np.arange(n_t) * pt, n)
    lab = lab.reshape(-1)
    feats = fp.features.reshape(-1, d)
    keep = lab != BACKGROUND
    feats = feats[keep]
    lab = lab[keep]
    if alpha is not None:
        if model.dictionary is None:
            raise ValueError("alpha sweep needs a checkpoint trained with sample discovery")
        if not 0.0 <= alpha <= 1.0 or math.isnan(alpha):
            raise ValueError(f"alpha={alpha} outside [0, 1]")
        feats = (1.0 - alpha) * feats + alpha * model.dictionary.atoms.data[lab]
    return FeatureTable(seq[keep], frame[keep], lab, feats)


def within_class_variance(table: FeatureTable) -> dict[int, np.ndarray]:
    return {int(c): table.features[table.label == c].var(axis=0) for c in np.unique(table.label)}
