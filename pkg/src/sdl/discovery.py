"""Online class-atom dictionary: feature refinement, uncertainty weights,
EMA atom updates and the angular-margin repulsion loss on the atoms.

Everything except :func:`dict_loss` operates on plain numpy arrays outside
the differentiation tape; the EMA update is a statistics update, not a
differentiated operation.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import numpy as np

from sdl import ndtensor as nt
from sdl.errors import (
    ConfigError,
    GateClosed,
    InvalidDims,
    InvalidEpoch,
    OutOfRangeMu,
    UnknownClass,
    ZeroNormAtom,
    ZeroNormVector,
)
from sdl.ndtensor import Tensor


@dataclass
class SdmConfig:
    alpha: float = 0.9
    beta0: float = 0.1
    beta_min: float = 0.01
    gate_epoch: int = 10
    s: float = 30.0
    m: float = 1.0
    delta: float = 0.35
    weight_floor: float = 0.5
    weight_ceil: float = 1.0
    background: int | None = 5

    def __post_init__(self):
        if not 0.0 <= self.alpha <= 1.0:
            raise ConfigError("alpha", "must lie in [0, 1]")
        if not 0.0 <= self.beta_min <= self.beta0 <= 1.0:
            raise ConfigError("beta0", "need 0 <= beta_min <= beta0 <= 1")
        if self.gate_epoch < 0:
            raise ConfigError("gate_epoch", "must be >= 0")
        if not self.weight_floor < self.weight_ceil:
            raise ConfigError("weight_floor", "must be below weight_ceil")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class Dictionary:
    """``C_cls x D`` matrix of class atoms."""

    atoms: Tensor
    epoch: int = -1

    @property
    def n_classes(self) -> int:
        return self.atoms.shape[0]

    @property
    def dim(self) -> int:
        return self.atoms.shape[1]

    def snapshot(self) -> "Dictionary":
        return Dictionary(Tensor(self.atoms.data, requires_grad=False, name="dictionary.atoms"), self.epoch)


def init_dictionary(c_cls: int, d: int, seed: int) -> Dictionary:
    if c_cls < 2 or d < 1:
        raise InvalidDims(f"need c_cls >= 2 and d >= 1, got ({c_cls}, {d})")
    rng = np.random.default_rng(seed)
    a = rng.standard_normal((c_cls, d))
    a /= np.linalg.norm(a, axis=1, keepdims=True)
    return Dictionary(Tensor(a, requires_grad=True, name="dictionary.atoms"))


def _check_class(y: int, n: int) -> None:
    if not 0 <= int(y) < n:
        raise UnknownClass(f"class {y} outside [0, {n})")


def feature_update(f, dictionary: Dictionary, y: int, alpha: float, gate_open: bool = True) -> np.ndarray:
    """``(1 - alpha) f + alpha S_y``."""
    if not gate_open:
        raise GateClosed("feature update requested before the gate epoch")
    _check_class(y, dictionary.n_classes)
    f = np.asarray(f, dtype=np.float64)
    return (1.0 - alpha) * f + alpha * dictionary.atoms.data[y]


def uncertainty(f, s_y) -> float:
    """Cosine distance ``1 - cos(f, s_y)``, in [0, 2]."""
    f = np.asarray(f, dtype=np.float64)
    s_y = np.asarray(s_y, dtype=np.float64)
    nf, ns = np.linalg.norm(f), np.linalg.norm(s_y)
    if nf == 0.0 or ns == 0.0:
        raise ZeroNormVector("cosine distance of a zero vector")
    cos = float(np.dot(f / nf, s_y / ns))
    return 1.0 - min(1.0, max(-1.0, cos))


def sample_weight(mu: float, floor: float = 0.5, ceil: float = 1.0) -> float:
    if not 0.0 <= mu <= 2.0 or math.isnan(mu):
        raise OutOfRangeMu(f"mu={mu} outside [0, 2]")
    return min(ceil, max(floor, 1.0 - mu))


def dictionary_update(dictionary: Dictionary, f, y: int, beta: float) -> Dictionary:
    """EMA-move atom ``y`` towards ``f`` in place; returns the same dictionary."""
    _check_class(y, dictionary.n_classes)
    if not 0.0 <= beta <= 1.0:
        raise ConfigError("beta", "must lie in [0, 1]")
    row = dictionary.atoms.data[y]
    dictionary.atoms.data[y] = (1.0 - beta) * row + beta * np.asarray(f, dtype=np.float64)
    return dictionary


def beta_schedule(epoch: int, total_epochs: int, cfg: SdmConfig) -> float:
    """Linear decay from ``beta0`` at epoch 0 to ``beta_min`` at the last epoch."""
    if not 0 <= epoch < total_epochs:
        raise InvalidEpoch(f"epoch {epoch} outside [0, {total_epochs})")
    if total_epochs == 1:
        return cfg.beta0
    t = epoch / (total_epochs - 1)
    return cfg.beta0 + (cfg.beta_min - cfg.beta0) * t


def dict_loss(atoms: Tensor, cfg: SdmConfig, classes=None) -> Tensor:
    """Angular-margin softmax over the atoms themselves.

    Atom ``i`` is the positive for row ``i``; its self-angle is zero, so the
    positive logit is the constant ``s * (cos(m * 0) - delta)``. Negatives are
    ``s * cos(theta_ij)`` for every other atom. ``classes`` restricts the loss
    to a subset of rows.
    """
    a = atoms if classes is None else atoms[np.asarray(list(classes), dtype=np.int64)]
    c = a.shape[0]
    if c < 2:
        raise InvalidDims("dict_loss needs at least two atoms")
    if np.any(np.linalg.norm(a.data, axis=1) == 0.0):
        raise ZeroNormAtom("dictionary contains a zero-norm atom")
    u = nt.l2_normalize(a, axis=1)
    cos = nt.matmul(u, u.transpose(1, 0))
    eye = np.eye(c)
    positive = cfg.s * (math.cos(cfg.m * 0.0) - cfg.delta)
    logits = nt.scale(cos, cfg.s) * (1.0 - eye) + positive * eye
    return nt.cross_entropy(logits, np.arange(c))


def max_pairwise_cosine(atoms) -> float:
    a = np.asarray(atoms.data if isinstance(atoms, Tensor) else atoms, dtype=np.float64)
    u = a / np.linalg.norm(a, axis=1, keepdims=True)
    g = u @ u.T
    np.fill_diagonal(g, -np.inf)
    return float(g.max())


@dataclass
class DiscoveryResult:
    features: np.ndarray
    weights: np.ndarray
    mu: np.ndarray
    dictionary: Dictionary


def sample_discovery_pass(
    features,
    labels,
    dictionary: Dictionary,
    epoch: int,
    cfg: SdmConfig,
    beta: float,
    apply_update: bool = True,
) -> DiscoveryResult:
    """Run the three-step loop over every feature row in order.

    ``features`` is ``(..., D)`` with ``labels`` of matching leading shape.
    Per row: feature update (only once ``epoch >= gate_epoch``), cosine
    distance to the class atom, clamped weight, then the EMA atom update
    (which moves the atom towards the unrefined feature).
    Background rows are skipped and keep weight 1. ``mu`` is NaN where
    undefined.
    """
    feats = np.asarray(features, dtype=np.float64)
    lab = np.asarray(labels, dtype=np.int64)
    if feats.shape[:-1] != lab.shape:
        raise InvalidDims(f"labels {lab.shape} do not align with features {feats.shape}")
    flat = feats.reshape(-1, feats.shape[-1])
    out = flat.copy()
    w = np.ones(len(flat))
    mu = np.full(len(flat), np.nan)
    gate_open = epoch >= cfg.gate_epoch
    for i, (f, y) in enumerate(zip(flat, lab.reshape(-1))):
        y = int(y)
        _check_class(y, dictionary.n_classes)
        if cfg.background is not None and y == cfg.background:
            continue
        if gate_open:
            f_new = feature_update(f, dictionary, y, cfg.alpha)
            out[i] = f_new
            mu[i] = uncertainty(f_new, dictionary.atoms.data[y])
            w[i] = sample_weight(mu[i], cfg.weight_floor, cfg.weight_ceil)
        if apply_update:
            dictionary_update(dictionary, f, y, beta)
    if apply_update:
        dictionary.epoch = epoch
    return DiscoveryResult(out.reshape(feats.shape), w.reshape(lab.shape), mu.reshape(lab.shape), dictionary)
