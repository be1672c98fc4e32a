"""Frozen convolutional feature extractor and trainable fully-connected head.

The backbone is three 3x3 stride-2 convolutions (3->8->16->32 channels, zero
padding 1, ReLU) followed by global average pooling, with weights drawn once
from a seed and never updated.  Its 32 pooled features feed the head::

    h_p = relu(f @ w_p + b_p)        # 32 -> 512
    h_1 = relu(h_p @ w_1 + b_1)      # 512 -> 256
    probs = softmax(h_1 @ w_2 + b_2) # 256 -> 2 (normal, abnormal)

Only the head is trained (mini-batch SGD on cross-entropy with a step-decay
learning rate), so backpropagation never enters the convolutions.
"""

from __future__ import annotations

import csv
import os
import re
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Iterable, Mapping

import numpy as np

from .augment import FLIP_STATES, AugmentConfig, FlipState, apply_flips, draw_flips, resize
from .convert import ConversionMethod, convert, image_percentile_bounds
from .errors import CheckpointFormatError, ConfigurationError
from .imageio import as_image8x3, load_pgm16
from .synth import DatasetIndex, Label, SampleRecord

FEATURE_DIM = 32
HIDDEN = (512, 256)
N_CLASSES = 2
MIN_INPUT = 8


# ---------------------------------------------------------------------------
# Backbone
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class BackboneSpec:
    seed: int = 0
    stages: tuple[tuple[int, int], ...] = ((3, 8), (8, 16), (16, 32))
    bias_scale: float = 0.05
    _params: tuple = field(default=None, init=False, repr=False, compare=False)

    def __post_init__(self):
        rng = np.random.default_rng(np.random.SeedSequence([self.seed, 0xBAC]))
        params = []
        for cin, cout in self.stages:
            # He-scaled kernels stored as (ky, kx, cin, cout) -> (9 * cin, cout)
            w = rng.normal(0.0, np.sqrt(2.0 / (9 * cin)), (3, 3, cin, cout)).reshape(9 * cin, cout)
            b = rng.normal(0.0, self.bias_scale, cout)
            w.flags.writeable = False
            b.flags.writeable = False
            params.append((w, b))
        object.__setattr__(self, "_params", tuple(params))

    @property
    def feature_dim(self) -> int:
        return self.stages[-1][1]

    @property
    def params(self) -> tuple:
        return self._params

    def serialize(self) -> bytes:
        return b"".join(a.tobytes() for pair in self._params for a in pair)


def _conv_stage(x: np.ndarray, w: np.ndarray, b: np.ndarray) -> np.ndarray:
    """3x3, stride 2, zero padding 1, ReLU on channel-last ``(N, H, W, C)``."""
    n, h, wd, c = x.shape
    ho, wo = (h - 1) // 2 + 1, (wd - 1) // 2 + 1
    xp = np.pad(x, ((0, 0), (1, 1), (1, 1), (0, 0)))
    cols = np.concatenate(
        [xp[:, ky : ky + 2 * ho - 1 : 2, kx : kx + 2 * wo - 1 : 2, :] for ky in range(3) for kx in range(3)],
        axis=-1,
    )
    out = cols.reshape(-1, 9 * c) @ w + b
    np.maximum(out, 0.0, out=out)
    return out.reshape(n, ho, wo, -1)


def backbone_forward_batch(images: np.ndarray, spec: BackboneSpec) -> np.ndarray:
    """Features for a stack of same-size images shaped ``(N, 3, H, W)``."""
    images = np.asarray(images)
    if images.ndim != 4 or images.shape[1] != 3:
        raise ValueError(f"expected (N, 3, H, W) images, got {images.shape}")
    if images.shape[2] < MIN_INPUT or images.shape[3] < MIN_INPUT:
        raise ValueError(f"backbone needs inputs of at least {MIN_INPUT}x{MIN_INPUT}, got {images.shape[2:]}")
    x = images.transpose(0, 2, 3, 1).astype(np.float64) / 255.0
    for w, b in spec.params:
        x = _conv_stage(x, w, b)
    return x.mean(axis=(1, 2))


def backbone_forward(image, spec: BackboneSpec) -> np.ndarray:
    return backbone_forward_batch(as_image8x3(image)[np.newaxis], spec)[0]


# ---------------------------------------------------------------------------
# Head
# ---------------------------------------------------------------------------


@dataclass
class HeadParams:
    w_p: np.ndarray
    b_p: np.ndarray
    w_1: np.ndarray
    b_1: np.ndarray
    w_2: np.ndarray
    b_2: np.ndarray

    def __post_init__(self):
        for f in fields(self):
            setattr(self, f.name, np.asarray(getattr(self, f.name), dtype=np.float64))
        f_dim, h_p = self.w_p.shape
        h_1 = self.w_1.shape[1]
        expected = {
            "b_p": (h_p,),
            "w_1": (h_p, h_1),
            "b_1": (h_1,),
            "w_2": (h_1, N_CLASSES),
            "b_2": (N_CLASSES,),
        }
        for name, shape in expected.items():
            if getattr(self, name).shape != shape:
                raise ValueError(f"{name} has shape {getattr(self, name).shape}, expected {shape}")

    @classmethod
    def names(cls) -> list[str]:
        return [f.name for f in fields(cls)]

    @property
    def feature_dim(self) -> int:
        return self.w_p.shape[0]

    def arrays(self) -> list[np.ndarray]:
        return [getattr(self, n) for n in self.names()]

    def copy(self) -> "HeadParams":
        return HeadParams(*[a.copy() for a in self.arrays()])

    @classmethod
    def zeros(cls, feature_dim: int = FEATURE_DIM, hidden=HIDDEN) -> "HeadParams":
        h_p, h_1 = hidden
        return cls(
            np.zeros((feature_dim, h_p)), np.zeros(h_p),
            np.zeros((h_p, h_1)), np.zeros(h_1),
            np.zeros((h_1, N_CLASSES)), np.zeros(N_CLASSES),
        )

    @classmethod
    def init(cls, rng: np.random.Generator, feature_dim: int = FEATURE_DIM, hidden=HIDDEN) -> "HeadParams":
        """He-normal weights, zero biases."""
        h_p, h_1 = hidden
        sizes = [(feature_dim, h_p), (h_p, h_1), (h_1, N_CLASSES)]
        ws = [rng.normal(0.0, np.sqrt(2.0 / fan_in), (fan_in, fan_out)) for fan_in, fan_out in sizes]
        return cls(ws[0], np.zeros(h_p), ws[1], np.zeros(h_1), ws[2], np.zeros(N_CLASSES))

    def all_finite(self) -> bool:
        return all(np.isfinite(a).all() for a in self.arrays())


@dataclass(frozen=True)
class Prediction:
    probs: np.ndarray
    label: Label


def log_softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


def softmax(logits: np.ndarray) -> np.ndarray:
    z = np.exp(logits - logits.max(axis=-1, keepdims=True))
    return z / z.sum(axis=-1, keepdims=True)


def argmax_label(probs: np.ndarray) -> Label:
    # ties go to abnormal
    return Label.ABNORMAL if probs[1] >= probs[0] else Label.NORMAL


def _forward(x: np.ndarray, p: HeadParams):
    z_p = x @ p.w_p + p.b_p
    h_p = np.maximum(z_p, 0.0)
    z_1 = h_p @ p.w_1 + p.b_1
    h_1 = np.maximum(z_1, 0.0)
    logits = h_1 @ p.w_2 + p.b_2
    return logits, (x, z_p, h_p, z_1, h_1)


def head_logits(features: np.ndarray, p: HeadParams) -> np.ndarray:
    return _forward(np.asarray(features, dtype=np.float64), p)[0]


def head_forward(f, p: HeadParams) -> Prediction:
    f = np.asarray(f, dtype=np.float64)
    if f.shape != (p.feature_dim,):
        raise ValueError(f"feature vector must have length {p.feature_dim}, got shape {f.shape}")
    if not np.isfinite(f).all() or not p.all_finite():
        raise ValueError("head_forward needs finite features and parameters")
    probs = softmax(head_logits(f, p))
    return Prediction(probs, argmax_label(probs))


def cross_entropy(probs, label) -> float:
    """Negative natural log of the probability assigned to ``label``."""
    return float(-np.log(np.asarray(probs, dtype=np.float64)[int(label)]))


def cross_entropy_logits(logits: np.ndarray, labels) -> np.ndarray:
    """Per-sample cross-entropy from logits via the stable log-softmax."""
    logits = np.atleast_2d(logits)
    labels = np.atleast_1d(np.asarray(labels, dtype=np.int64))
    return -log_softmax(logits)[np.arange(len(labels)), labels]


def _backward(x, labels, p: HeadParams):
    """Mean cross-entropy over the batch and its gradient as a HeadParams."""
    logits, (x, z_p, h_p, z_1, h_1) = _forward(x, p)
    n = len(labels)
    losses = -log_softmax(logits)[np.arange(n), labels]
    d_logits = softmax(logits)
    d_logits[np.arange(n), labels] -= 1.0
    d_logits /= n
    g_w2 = h_1.T @ d_logits
    g_b2 = d_logits.sum(axis=0)
    d_z1 = (d_logits @ p.w_2.T) * (z_1 > 0)
    g_w1 = h_p.T @ d_z1
    g_b1 = d_z1.sum(axis=0)
    d_zp = (d_z1 @ p.w_1.T) * (z_p > 0)
    g_wp = x.T @ d_zp
    g_bp = d_zp.sum(axis=0)
    return losses, HeadParams(g_wp, g_bp, g_w1, g_b1, g_w2, g_b2)


def head_gradients(f, p: HeadParams, label) -> HeadParams:
    """Exact gradient of ``cross_entropy(head_forward(f, p), label)`` w.r.t. every head parameter."""
    x = np.asarray(f, dtype=np.float64)[np.newaxis]
    return _backward(x, np.array([int(label)]), p)[1]


def sgd_step(p: HeadParams, grad: HeadParams, lr: float) -> None:
    for a, g in zip(p.arrays(), grad.arrays()):
        a -= lr * g


# ---------------------------------------------------------------------------
# Training
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 50
    lr0: float = 0.001
    decay_period: int = 10
    decay_factor: float = 0.1
    minibatch_size: int = 8
    seed: int = 0
    standardize: bool = True

    def __post_init__(self):
        if self.epochs < 1:
            raise ConfigurationError("epochs must be >= 1")
        if not self.lr0 > 0:
            raise ConfigurationError("lr0 must be > 0")
        if not 0 < self.decay_factor <= 1:
            raise ConfigurationError("decay_factor must lie in (0, 1]")
        if self.decay_period < 1:
            raise ConfigurationError("decay_period must be >= 1")
        if self.minibatch_size < 1:
            raise ConfigurationError("minibatch_size must be >= 1")


def lr_at(epoch: int, cfg: TrainConfig) -> float:
    if epoch < 0:
        raise ValueError("epoch must be >= 0")
    return cfg.lr0 * cfg.decay_factor ** (epoch // cfg.decay_period)


class FeatureExtractor:
    """Memoized ``backbone(resize(flip(convert(image))))`` per sample.

    The backbone is deterministic and frozen, so a flipped training view can
    be looked up instead of recomputed every epoch.  Raw images are cached
    too, since cross-validation revisits every sample once per fold.
    """

    def __init__(self, index: DatasetIndex, spec: BackboneSpec, aug: AugmentConfig, chunk: int = 16):
        self.index = index
        self.spec = spec
        self.aug = aug
        self.chunk = chunk
        self._raw: dict[str, np.ndarray] = {}
        self._memo: dict[tuple, np.ndarray] = {}
        self._pct: dict[str, tuple[int, int]] = {}

    @property
    def feature_dim(self) -> int:
        return self.spec.feature_dim

    def raw(self, rec: SampleRecord) -> np.ndarray:
        img = self._raw.get(rec.sample_id)
        if img is None:
            img = self._raw[rec.sample_id] = load_pgm16(self.index.image_path(rec))
        return img

    def percentile_bounds(self, rec: SampleRecord) -> tuple[int, int]:
        """Cached ``image_percentile_bounds`` of the sample's raw image."""
        pair = self._pct.get(rec.sample_id)
        if pair is None:
            pair = self._pct[rec.sample_id] = image_percentile_bounds(self.raw(rec))
        return pair

    def ensure(self, recs: Iterable[SampleRecord], method: ConversionMethod, states: Iterable[FlipState]) -> None:
        states = list(states)
        todo = [(r, s) for r in recs for s in states if (r.sample_id, method.key, s) not in self._memo]
        for start in range(0, len(todo), self.chunk):
            part = todo[start : start + self.chunk]
            # one conversion per image, then every requested flip of it
            converted = {}
            views = []
            for rec, state in part:
                if rec.sample_id not in converted:
                    converted[rec.sample_id] = convert(self.raw(rec), method)
                views.append(resize(apply_flips(converted[rec.sample_id], state),
                                    self.aug.target_width, self.aug.target_height))
            feats = backbone_forward_batch(np.stack(views), self.spec)
            for (rec, state), f in zip(part, feats):
                self._memo[(rec.sample_id, method.key, state)] = f

    def lookup(self, rec: SampleRecord, method: ConversionMethod, state: FlipState) -> np.ndarray:
        key = (rec.sample_id, method.key, state)
        if key not in self._memo:
            self.ensure([rec], method, [state])
        return self._memo[key]


class FeatureTable:
    """Precomputed features (e.g. from a pretrained network), keyed by sample id.

    Flips cannot be applied to stored vectors, so every view maps to the same row.
    """

    def __init__(self, features: Mapping[str, np.ndarray]):
        self.features = {k: np.asarray(v, dtype=np.float64) for k, v in features.items()}
        dims = {v.shape for v in self.features.values()}
        if len(dims) > 1:
            raise CheckpointFormatError(f"feature vectors have mixed shapes {dims}")
        self._dim = dims.pop()[0] if dims else FEATURE_DIM

    @property
    def feature_dim(self) -> int:
        return self._dim

    def ensure(self, recs, method, states) -> None:
        missing = [r.sample_id for r in recs if r.sample_id not in self.features]
        if missing:
            raise KeyError(f"no features for samples {missing[:5]}")

    def lookup(self, rec, method, state) -> np.ndarray:
        return self.features[rec.sample_id]


@dataclass
class TrainResult:
    params: HeadParams
    history: list[tuple[int, float, float]]  # (epoch, lr, mean loss)
    method: ConversionMethod


def _possible_states(aug: AugmentConfig) -> list[FlipState]:
    hs = {p for p in (False, True) if (aug.flip_h_prob > 0 if p else aug.flip_h_prob < 1)}
    vs = {p for p in (False, True) if (aug.flip_v_prob > 0 if p else aug.flip_v_prob < 1)}
    return [s for s in FLIP_STATES if s[0] in hs and s[1] in vs]


def feature_scaling(x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Per-feature mean and std of ``x``; constant features get std 1."""
    mu = x.mean(axis=0)
    sd = x.std(axis=0)
    sd[sd < 1e-12] = 1.0
    return mu, sd


def fold_scaling(params: HeadParams, mu: np.ndarray, sd: np.ndarray) -> HeadParams:
    """Absorb ``(f - mu) / sd`` into the first layer so the head takes raw features."""
    w_p = params.w_p / sd[:, None]
    b_p = params.b_p - (mu / sd) @ params.w_p
    return HeadParams(w_p, b_p, params.w_1.copy(), params.b_1.copy(), params.w_2.copy(), params.b_2.copy())


def train(index: DatasetIndex, train_batches, method: ConversionMethod, cfg: TrainConfig,
          aug: AugmentConfig, *, spec: BackboneSpec | None = None, extractor=None) -> TrainResult:
    """Fit a fresh head on the samples of ``train_batches``.

    Every epoch reshuffles the samples and draws fresh flips; mini-batches of
    ``cfg.minibatch_size`` (last one partial) take one SGD step each on the
    mean batch loss.  With ``cfg.standardize`` the features are centred and
    scaled by statistics of the unflipped training views while training, and
    the scaling is folded into ``w_p``/``b_p`` afterwards.  Deterministic for
    fixed ``cfg.seed`` and ``aug.seed``.
    """
    recs = index.select(train_batches)
    labels = np.array([int(r.label) for r in recs], dtype=np.int64)
    if len(set(labels.tolist())) < 2:
        raise ConfigurationError("training set must contain both normal and abnormal samples")
    if extractor is None:
        extractor = FeatureExtractor(index, spec or BackboneSpec(), aug)
    states = _possible_states(aug)
    extractor.ensure(recs, method, states + [(False, False)])

    dim = extractor.feature_dim
    if cfg.standardize:
        mu, sd = feature_scaling(np.stack([extractor.lookup(r, method, (False, False)) for r in recs]))
    else:
        mu, sd = np.zeros(dim), np.ones(dim)

    init_rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 0]))
    order_rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 1]))
    aug_rng = np.random.default_rng(np.random.SeedSequence([aug.seed, 2]))
    params = HeadParams.init(init_rng, dim)

    history = []
    n = len(recs)
    for epoch in range(cfg.epochs):
        lr = lr_at(epoch, cfg)
        order = order_rng.permutation(n)
        x = np.stack([extractor.lookup(recs[i], method, draw_flips(aug, aug_rng)) for i in order])
        x = (x - mu) / sd
        y = labels[order]
        total = 0.0
        for start in range(0, n, cfg.minibatch_size):
            xb, yb = x[start : start + cfg.minibatch_size], y[start : start + cfg.minibatch_size]
            losses, grad = _backward(xb, yb, params)
            total += float(losses.sum())
            sgd_step(params, grad, lr)
        history.append((epoch, lr, total / n))
    if cfg.standardize:
        params = fold_scaling(params, mu, sd)
    return TrainResult(params, history, method)


def predict_records(recs, method: ConversionMethod, params: HeadParams, extractor) -> list[Prediction]:
    """Evaluation-time predictions (resize only, no flips)."""
    recs = list(recs)
    if not recs:
        return []
    state = (False, False)
    extractor.ensure(recs, method, [state])
    x = np.stack([extractor.lookup(r, method, state) for r in recs])
    probs = softmax(head_logits(x, params))
    return [Prediction(pr, argmax_label(pr)) for pr in probs]


def predict(image, method: ConversionMethod, spec: BackboneSpec, params: HeadParams,
            aug: AugmentConfig) -> Prediction:
    """Full pipeline for one radiograph: convert, resize, backbone, head."""
    view = resize(convert(image, method), aug.target_width, aug.target_height)
    return head_forward(backbone_forward(view, spec), params)


def write_history(history, path: str | os.PathLike) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["epoch", "lr", "mean_loss"])
        for epoch, lr, loss in history:
            w.writerow([epoch, repr(lr), repr(loss)])


# ---------------------------------------------------------------------------
# Checkpoints and feature files
# ---------------------------------------------------------------------------

_HEADER_RE = re.compile(r"^xrayqc-head v1 F=(\d+)$")


def save_params(params: HeadParams, path: str | os.PathLike) -> None:
    lines = [f"xrayqc-head v1 F={params.feature_dim}"]
    for name, arr in zip(HeadParams.names(), params.arrays()):
        shape = "x".join(str(d) for d in arr.shape)
        # repr() is the shortest decimal that round-trips exactly
        lines.append(" ".join([name, shape] + [repr(float(v)) for v in arr.ravel()]))
    Path(path).write_text("\n".join(lines) + "\n")


def load_params(path: str | os.PathLike) -> HeadParams:
    lines = Path(path).read_text().splitlines()
    if not lines:
        raise CheckpointFormatError("empty checkpoint")
    m = _HEADER_RE.match(lines[0].strip())
    if not m:
        raise CheckpointFormatError(f"bad checkpoint header {lines[0][:40]!r}")
    f_dim = int(m.group(1))
    names = HeadParams.names()
    body = [ln for ln in lines[1:] if ln.strip()]
    if len(body) != len(names):
        raise CheckpointFormatError(f"expected {len(names)} tensors, found {len(body)}")
    arrays = []
    for name, line in zip(names, body):
        parts = line.split()
        if len(parts) < 2 or parts[0] != name:
            raise CheckpointFormatError(f"expected tensor {name!r}, got {parts[:1]}")
        try:
            shape = tuple(int(d) for d in parts[1].split("x"))
            values = np.array([float(v) for v in parts[2:]], dtype=np.float64)
        except ValueError as exc:
            raise CheckpointFormatError(f"tensor {name}: {exc}") from None
        if values.size != int(np.prod(shape)):
            raise CheckpointFormatError(f"tensor {name}: shape {shape} needs {int(np.prod(shape))} values, got {values.size}")
        arrays.append(values.reshape(shape))
    if arrays[0].shape[0] != f_dim:
        raise CheckpointFormatError(f"w_p has {arrays[0].shape[0]} rows but header declares F={f_dim}")
    try:
        return HeadParams(*arrays)
    except ValueError as exc:
        raise CheckpointFormatError(str(exc)) from None


def save_features(features: Mapping[str, np.ndarray], path: str | os.PathLike) -> None:
    items = list(features.items())
    dim = len(items[0][1]) if items else FEATURE_DIM
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["sample_id"] + [f"f{i}" for i in range(dim)])
        for sid, vec in items:
            w.writerow([sid] + [repr(float(v)) for v in vec])


def load_features(path: str | os.PathLike, feature_dim: int | None = FEATURE_DIM) -> dict[str, np.ndarray]:
    """Read ``sample_id,f0..f<F-1>`` rows; ``feature_dim=None`` accepts any width."""
    out = {}
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if not header or header[0] != "sample_id":
            raise CheckpointFormatError("feature CSV must start with a sample_id column")
        dim = len(header) - 1
        if header[1:] != [f"f{i}" for i in range(dim)]:
            raise CheckpointFormatError("feature columns must be named f0..f<F-1>")
        if feature_dim is not None and dim != feature_dim:
            raise CheckpointFormatError(f"feature CSV has F={dim}, expected {feature_dim}")
        for line, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != dim + 1:
                raise CheckpointFormatError(f"line {line}: expected {dim + 1} columns, got {len(row)}")
            if row[0] in out:
                raise CheckpointFormatError(f"line {line}: duplicate sample_id {row[0]!r}")
            try:
                vec = np.array([float(v) for v in row[1:]], dtype=np.float64)
            except ValueError:
                raise CheckpointFormatError(f"line {line}: non-numeric feature") from None
            if not np.isfinite(vec).all():
                raise CheckpointFormatError(f"line {line}: non-finite feature")
            out[row[0]] = vec
    return out
