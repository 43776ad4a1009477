"""Windowed per-pixel MLP classifier over the fused range/residual channels.

Features for a pixel are the ``window x window`` neighborhood of all fused
channels, flattened in (row offset, column offset, channel) order. Rows
outside the image are zero; columns wrap around the azimuth seam.
"""
from __future__ import annotations

import json
import logging
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import List, Optional, Sequence, Tuple

import numpy as np

from lidarmos.errors import (ConfigurationError, DivergenceError, FormatError, NumericError,
                             PreconditionError, ValidationError)
from lidarmos.labels import MovingLabel
from lidarmos.residual import BASE_CHANNELS, FusedInput, NormalizationSpec

log = logging.getLogger(__name__)

MAGIC = b"LMOSMLP\x00"
FORMAT_VERSION = 1


@dataclass(frozen=True)
class ModelSpec:
    window: int = 5
    n_residual: int = 1
    hidden: Tuple[int, ...] = (64, 32)
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "hidden", tuple(int(h) for h in self.hidden))
        if self.window < 1 or self.window % 2 == 0:
            raise ValidationError(f"window must be odd and >= 1, got {self.window}")
        if not self.hidden or min(self.hidden) < 1:
            raise ValidationError("need at least one hidden layer, all sizes >= 1")
        if self.n_residual < 0:
            raise ValidationError("n_residual must be >= 0")

    @property
    def channels(self) -> int:
        return len(BASE_CHANNELS) + self.n_residual

    @property
    def input_dim(self) -> int:
        return self.window * self.window * self.channels

    @property
    def layer_sizes(self) -> Tuple[int, ...]:
        return (self.input_dim,) + self.hidden + (1,)


@dataclass
class ModelParams:
    spec: ModelSpec
    weights: List[np.ndarray]  # (fan_in, fan_out) per layer
    biases: List[np.ndarray]
    norm: NormalizationSpec

    def arrays(self) -> List[np.ndarray]:
        out = []
        for W, b in zip(self.weights, self.biases):
            out += [W, b]
        return out

    def copy(self) -> "ModelParams":
        return ModelParams(self.spec, [W.copy() for W in self.weights],
                           [b.copy() for b in self.biases], self.norm)

    def check(self) -> None:
        sizes = self.spec.layer_sizes
        if len(self.weights) != len(sizes) - 1 or len(self.biases) != len(sizes) - 1:
            raise ValidationError("layer count does not match spec")
        for i, (W, b) in enumerate(zip(self.weights, self.biases)):
            if W.shape != (sizes[i], sizes[i + 1]) or b.shape != (sizes[i + 1],):
                raise ValidationError(f"layer {i} has shape {W.shape}/{b.shape}")
            if not (np.isfinite(W).all() and np.isfinite(b).all()):
                raise ValidationError(f"layer {i} has non-finite parameters")
        if self.norm.channels != self.spec.channels:
            raise ValidationError("normalization channel count does not match spec")


def init_params(spec: ModelSpec, norm: Optional[NormalizationSpec] = None) -> ModelParams:
    rng = np.random.default_rng(spec.seed)
    sizes = spec.layer_sizes
    weights, biases = [], []
    for fan_in, fan_out in zip(sizes[:-1], sizes[1:]):
        lim = np.sqrt(6.0 / (fan_in + fan_out))
        weights.append(rng.uniform(-lim, lim, size=(fan_in, fan_out)))
        biases.append(np.zeros(fan_out))
    norm = norm or NormalizationSpec.identity(spec.channels)
    return ModelParams(spec, weights, biases, norm)


def sigmoid(z):
    # split form avoids overflow in exp for large |z|
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def _forward_cache(params: ModelParams, X: np.ndarray):
    acts = [X]
    a = X
    n_layers = len(params.weights)
    for i, (W, b) in enumerate(zip(params.weights, params.biases)):
        with np.errstate(over="ignore", invalid="ignore"):
            z = a @ W + b
        if not np.isfinite(z).all():
            raise NumericError(f"non-finite activation in layer {i}")
        a = np.tanh(z) if i < n_layers - 1 else z
        acts.append(a)
    return acts  # last entry holds logits


def forward(params: ModelParams, features: np.ndarray) -> np.ndarray:
    """Moving probability for each row of ``features`` (or a single vector)."""
    X = np.asarray(features, dtype=np.float64)
    single = X.ndim == 1
    X = np.atleast_2d(X)
    if X.shape[1] != params.spec.input_dim:
        raise PreconditionError(
            f"feature length {X.shape[1]} != model input {params.spec.input_dim}")
    if not np.isfinite(X).all():
        raise PreconditionError("features must be finite")
    p = sigmoid(_forward_cache(params, X)[-1][:, 0])
    return p[0] if single else p


def _log_sigmoid(z):
    return -np.logaddexp(0.0, -z)


def loss_and_grad(params: ModelParams, X: np.ndarray, y: np.ndarray,
                  class_weights: Tuple[float, float] = (1.0, 1.0)):
    """Mean class-weighted binary cross-entropy and its exact gradient.

    ``y`` holds ``MovingLabel`` values (moving / static only). ``class_weights``
    is ``(moving, static)``. Returns ``(loss, [dW0, db0, dW1, db1, ...])``.
    """
    X = np.atleast_2d(np.asarray(X, dtype=np.float64))
    y = np.asarray(y)
    if len(y) == 0:
        raise PreconditionError("empty batch")
    if (y == MovingLabel.IGNORE).any():
        raise PreconditionError("ignore labels must be filtered before computing the loss")
    t = (y == MovingLabel.MOVING).astype(np.float64)
    w = np.where(t > 0, class_weights[0], class_weights[1])
    acts = _forward_cache(params, X)
    z = acts[-1][:, 0]
    B = len(t)
    loss = float(np.sum(-w * (t * _log_sigmoid(z) + (1 - t) * _log_sigmoid(-z))) / B)
    if not np.isfinite(loss):
        raise NumericError("non-finite loss")

    delta = (w * (sigmoid(z) - t) / B)[:, None]
    grads = [None] * (2 * len(params.weights))
    for i in range(len(params.weights) - 1, -1, -1):
        grads[2 * i] = acts[i].T @ delta
        grads[2 * i + 1] = delta.sum(axis=0)
        if i > 0:
            delta = (delta @ params.weights[i].T) * (1.0 - acts[i] ** 2)
    return loss, grads


def extract_features(data: np.ndarray, rows: np.ndarray, cols: np.ndarray,
                     window: int) -> np.ndarray:
    """``(K, window**2 * C)`` neighborhoods of ``data`` (``(C, h, w)``) at pixels."""
    C, h, w = data.shape
    half = window // 2
    padded = np.zeros((C, h + 2 * half, w), dtype=np.float64)
    padded[:, half:half + h] = data
    out = np.empty((len(rows), window, window, C))
    for a, dv in enumerate(range(-half, half + 1)):
        rr = rows + dv + half
        for b, du in enumerate(range(-half, half + 1)):
            out[:, a, b, :] = padded[:, rr, (cols + du) % w].T
    return out.reshape(len(rows), -1)


def predict_proba_image(params: ModelParams, fused: FusedInput,
                        chunk: int = 16384) -> np.ndarray:
    if fused.norm != params.norm:
        raise ConfigurationError("fused input normalization differs from the model's")
    if fused.data.shape[0] != params.spec.channels:
        raise ConfigurationError(
            f"fused input has {fused.data.shape[0]} channels, model expects "
            f"{params.spec.channels}")
    h, w = fused.valid.shape
    prob = np.full((h, w), np.nan)
    rows, cols = np.nonzero(fused.valid)
    for s in range(0, len(rows), chunk):
        r, c = rows[s:s + chunk], cols[s:s + chunk]
        prob[r, c] = forward(params, extract_features(fused.data, r, c, params.spec.window))
    return prob


def predict_image(params: ModelParams, fused: FusedInput) -> np.ndarray:
    prob = predict_proba_image(params, fused)
    out = np.full(prob.shape, MovingLabel.IGNORE, dtype=np.uint8)
    v = fused.valid
    out[v] = np.where(prob[v] > 0.5, MovingLabel.MOVING, MovingLabel.STATIC)
    return out


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 0.01
    batch_size: int = 256
    epochs: int = 30
    momentum: float = 0.9
    class_weights: Optional[Tuple[float, float]] = None  # (moving, static); None = from data
    sampling_rate: float = 0.05
    seed: int = 0

    def __post_init__(self):
        # 0 is allowed so a run can be checked to leave the initialization untouched
        if self.learning_rate < 0 or not np.isfinite(self.learning_rate):
            raise ValidationError("learning rate must be finite and >= 0")
        if self.class_weights is not None and min(self.class_weights) <= 0:
            raise ValidationError("class weights must be positive")
        if not 0 < self.sampling_rate <= 1:
            raise ValidationError("sampling rate must lie in (0, 1]")
        if self.batch_size < 1 or self.epochs < 0:
            raise ValidationError("batch size must be >= 1 and epochs >= 0")


@dataclass
class TrainLog:
    epoch_loss: List[float] = field(default_factory=list)
    val_iou: List[float] = field(default_factory=list)
    class_weights: Tuple[float, float] = (1.0, 1.0)
    n_samples: int = 0


def sample_pixels(dataset, window: int, sampling_rate: float, rng: np.random.Generator):
    """All moving pixels plus a ``sampling_rate`` share of static pixels per image."""
    feats, labels = [], []
    for fused, grid in dataset:
        moving = (grid == MovingLabel.MOVING) & fused.valid
        static = (grid == MovingLabel.STATIC) & fused.valid
        keep = moving | (static & (rng.random(grid.shape) < sampling_rate))
        r, c = np.nonzero(keep)
        feats.append(extract_features(fused.data, r, c, window))
        labels.append(grid[r, c])
    return np.concatenate(feats), np.concatenate(labels).astype(np.uint8)


def pixel_iou(params: ModelParams, dataset) -> float:
    from lidarmos.evaluation import ConfusionCounts, accumulate, iou

    counts = ConfusionCounts()
    for fused, grid in dataset:
        pred = predict_image(params, fused)
        v = fused.valid
        counts = accumulate(counts, pred[v], grid[v])
    return iou(counts)[0]


def train(spec: ModelSpec, config: TrainConfig, dataset: Sequence,
          validation: Sequence = (), norm: Optional[NormalizationSpec] = None):
    """Mini-batch SGD with momentum on sampled pixels.

    ``dataset`` and ``validation`` hold ``(FusedInput, label grid)`` pairs.
    Returns ``(ModelParams, TrainLog)``.
    """
    if len(dataset) == 0:
        raise PreconditionError("empty training set")
    norm = norm or dataset[0][0].norm
    for fused, _ in dataset:
        if fused.norm != norm:
            raise ConfigurationError("training inputs use different normalizations")
    params = init_params(spec, norm)
    rng = np.random.default_rng(config.seed)
    X, y = sample_pixels(dataset, spec.window, config.sampling_rate, rng)
    n_mov = int((y == MovingLabel.MOVING).sum())
    if config.class_weights is not None:
        weights = tuple(config.class_weights)
    else:
        weights = ((len(y) - n_mov) / n_mov if n_mov else 1.0, 1.0)
    tlog = TrainLog(class_weights=weights, n_samples=len(y))
    velocity = [np.zeros_like(a) for a in params.arrays()]
    for epoch in range(config.epochs):
        order = rng.permutation(len(y))
        total, n_batches = 0.0, 0
        for bi, s in enumerate(range(0, len(y), config.batch_size)):
            idx = order[s:s + config.batch_size]
            try:
                loss, grads = loss_and_grad(params, X[idx], y[idx], weights)
            except NumericError as e:
                raise DivergenceError(f"diverged at epoch {epoch}, batch {bi}: {e}") from e
            arrays = params.arrays()
            # overflow here surfaces as a non-finite activation on the next batch
            with np.errstate(over="ignore", invalid="ignore"):
                for a, g, vel in zip(arrays, grads, velocity):
                    vel *= config.momentum
                    vel -= config.learning_rate * g
                    a += vel
            total += loss
            n_batches += 1
        tlog.epoch_loss.append(total / max(n_batches, 1))
        if validation:
            tlog.val_iou.append(pixel_iou(params, validation))
        log.info("epoch %d loss %.5f%s", epoch, tlog.epoch_loss[-1],
                 f" val IoU {tlog.val_iou[-1]:.4f}" if validation else "")
    return params, tlog


def frame_samples(sequence, n_residual: int, cfg=None, noise_units: int = 0, seed: int = 0):
    """Yield ``(raw channels, valid mask, label grid)`` per labeled frame, online order."""
    from lidarmos.evaluation import iter_frames
    from lidarmos.projection import ProjectionConfig, image_labels_from_points, project_scan
    from lidarmos.residual import build_stack, raw_channels

    cfg = cfg or ProjectionConfig()
    for fr in iter_frames(sequence, n_residual, noise_units, seed, with_labels=True):
        current = project_scan(fr.scan, cfg)
        stack = build_stack(fr.history, fr.relative_poses, current, cfg, n_channels=n_residual)
        yield (raw_channels(current, stack), current.valid,
               image_labels_from_points(fr.scan.labels, current))


def make_dataset(sequences, n_residual: int, cfg=None, norm: Optional[NormalizationSpec] = None,
                 noise_units: int = 0, seed: int = 0):
    """``([(FusedInput, label grid)], norm)``; ``norm`` is estimated when not given."""
    from lidarmos.residual import estimate_normalization

    raw = [s for seq in sequences
           for s in frame_samples(seq, n_residual, cfg, noise_units, seed)]
    if norm is None:
        norm = estimate_normalization((r, v) for r, v, _ in raw)
    out = []
    for r, v, grid in raw:
        data = (r - norm.mean[:, None, None]) / norm.scale[:, None, None]
        data[:, ~v] = 0.0
        out.append((FusedInput(data, v, norm), grid))
    return out, norm


def save_model(params: ModelParams, path) -> None:
    params.check()
    spec = params.spec
    header = json.dumps({"window": spec.window, "n_residual": spec.n_residual,
                         "hidden": list(spec.hidden), "seed": spec.seed}).encode()
    blob = b"".join(np.ascontiguousarray(a, dtype="<f8").tobytes()
                    for a in [params.norm.mean, params.norm.scale] + params.arrays())
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<II", FORMAT_VERSION, len(header)))
        f.write(header)
        f.write(blob)


def load_model(path) -> ModelParams:
    data = Path(path).read_bytes()
    if len(data) < len(MAGIC) + 8 or data[:len(MAGIC)] != MAGIC:
        raise FormatError(f"{path}: not a model file (bad magic)")
    version, hlen = struct.unpack_from("<II", data, len(MAGIC))
    if version != FORMAT_VERSION:
        raise FormatError(f"{path}: unsupported model format version {version}")
    off = len(MAGIC) + 8
    try:
        meta = json.loads(data[off:off + hlen].decode())
        spec = ModelSpec(meta["window"], meta["n_residual"], tuple(meta["hidden"]), meta["seed"])
    except (ValueError, KeyError, TypeError, ValidationError) as e:
        raise FormatError(f"{path}: corrupt model header ({e})") from None
    off += hlen
    sizes = spec.layer_sizes
    shapes = [(spec.channels,), (spec.channels,)]
    for fan_in, fan_out in zip(sizes[:-1], sizes[1:]):
        shapes += [(fan_in, fan_out), (fan_out,)]
    need = 8 * sum(int(np.prod(s)) for s in shapes)
    if len(data) - off != need:
        raise FormatError(f"{path}: expected {need} parameter bytes, got {len(data) - off}")
    arrays = []
    for s in shapes:
        n = int(np.prod(s))
        arrays.append(np.frombuffer(data, dtype="<f8", count=n, offset=off).reshape(s).copy())
        off += 8 * n
    try:
        norm = NormalizationSpec(arrays[0], arrays[1])
        params = ModelParams(spec, arrays[2::2], arrays[3::2], norm)
        params.check()
    except (PreconditionError, ValidationError) as e:
        raise FormatError(f"{path}: invalid parameters ({e})") from None
    return params
