"""Feed-forward pedestrian velocity predictor, trained with Adam.

The network maps a window of the last ``H`` joint states
``(veh_par, veh_speed, ped_par, ped_perp)`` to the pedestrian's velocity over
the next control period.  Architecture: affine -> ReLU -> affine -> ReLU ->
affine, with 64 hidden units per layer by default.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from . import rng as rngmod

log = logging.getLogger(__name__)

N_STATE_FEATURES = 4
OUTPUT_DIM = 2


class ModelFormatError(ValueError):
    """Malformed or inconsistent model file."""


@dataclass(frozen=True)
class FeatureNorm:
    mean: np.ndarray
    std: np.ndarray

    def __post_init__(self):
        if np.shape(self.mean) != (N_STATE_FEATURES,) or np.shape(self.std) != (N_STATE_FEATURES,):
            raise ValueError(f"feature_norm needs {N_STATE_FEATURES} means and stds")
        if not np.all(np.asarray(self.std) > 0):
            raise ValueError("feature_norm stds must be positive")

    @classmethod
    def identity(cls) -> "FeatureNorm":
        return cls(np.zeros(N_STATE_FEATURES), np.ones(N_STATE_FEATURES))

    @classmethod
    def fit(cls, states: np.ndarray) -> "FeatureNorm":
        std = states.std(axis=0)
        return cls(states.mean(axis=0), np.where(std > 0, std, 1.0))

    def apply(self, states):
        return (np.asarray(states, dtype=float) - self.mean) / self.std


@dataclass
class Layer:
    w: np.ndarray  # (in_dim, out_dim)
    b: np.ndarray  # (out_dim,)

    @property
    def in_dim(self) -> int:
        return self.w.shape[0]

    @property
    def out_dim(self) -> int:
        return self.w.shape[1]


@dataclass
class MlpModel:
    layers: list[Layer]
    feature_window: int = 5
    feature_norm: FeatureNorm = field(default_factory=FeatureNorm.identity)

    @property
    def input_dim(self) -> int:
        return self.layers[0].in_dim

    def params(self) -> list[np.ndarray]:
        return [a for layer in self.layers for a in (layer.w, layer.b)]

    def with_params(self, arrays: Sequence[np.ndarray]) -> "MlpModel":
        layers = [Layer(w, b) for w, b in zip(arrays[0::2], arrays[1::2])]
        return replace(self, layers=layers)


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 1e-3
    epochs: int = 50
    lr_decay_every: int = 10
    lr_decay_factor: float = 0.5
    batch_size: int = 256
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    hidden: int = 64
    seed: int = 0

    def __post_init__(self):
        if self.epochs < 0:
            raise ValueError("epochs must be non-negative")
        if not 0 < self.lr_decay_factor <= 1:
            raise ValueError("lr_decay_factor must lie in (0, 1]")
        if self.lr_decay_every < 1 or self.batch_size < 1 or self.hidden < 1:
            raise ValueError("lr_decay_every, batch_size and hidden must be positive")
        if not self.learning_rate > 0:
            raise ValueError("learning_rate must be positive")

    def lr_at(self, epoch: int) -> float:
        return self.learning_rate * self.lr_decay_factor ** (epoch // self.lr_decay_every)


@dataclass
class AdamState:
    m: list[np.ndarray]
    v: list[np.ndarray]

    @classmethod
    def zeros_like(cls, params: Sequence[np.ndarray]) -> "AdamState":
        return cls([np.zeros_like(p) for p in params], [np.zeros_like(p) for p in params])


def init_model(input_dim: int, hidden: int = 64, out_dim: int = OUTPUT_DIM, seed: int = 0, **kw) -> MlpModel:
    """Glorot-uniform weights from a seeded stream, zero biases."""
    g = rngmod.stream(seed, rngmod.TRAIN, 0)
    dims = [input_dim, hidden, hidden, out_dim]
    layers = []
    for n_in, n_out in zip(dims[:-1], dims[1:]):
        lim = math.sqrt(6.0 / (n_in + n_out))
        layers.append(Layer(g.uniform(-lim, lim, size=(n_in, n_out)), np.zeros(n_out)))
    return MlpModel(layers, **kw)


def window_features(states: np.ndarray, H: int, norm: FeatureNorm) -> np.ndarray:
    """Feature vector for every prefix of a state sequence.

    Row ``i`` holds the normalised states ``i-H+1 .. i`` oldest first, with
    zeros standing in for steps before the start.
    """
    z = norm.apply(states)
    padded = np.vstack([np.zeros((H - 1, N_STATE_FEATURES)), z])
    win = sliding_window_view(padded, (H, N_STATE_FEATURES))[:, 0]
    return win.reshape(len(z), H * N_STATE_FEATURES)


def episode_features(ep, H: int, norm: FeatureNorm) -> np.ndarray:
    return window_features(ep.states(), H, norm)


def build_features(history, H: int, norm: FeatureNorm) -> np.ndarray:
    """Feature vector for the latest state of a list of world states."""
    if not history:
        raise ValueError("history must not be empty")
    recent = history[-H:]
    raw = np.array([(w.vehicle.par, w.vehicle.speed, w.pedestrian.par, w.pedestrian.perp) for w in recent])
    out = np.zeros((H, N_STATE_FEATURES))
    out[H - len(recent) :] = norm.apply(raw)
    return out.ravel()


def _forward_cache(m: MlpModel, x: np.ndarray):
    acts = [x]
    pre = []
    for k, layer in enumerate(m.layers):
        z = acts[-1] @ layer.w + layer.b
        pre.append(z)
        acts.append(np.maximum(z, 0.0) if k < len(m.layers) - 1 else z)
    return acts, pre


def forward(m: MlpModel, f) -> np.ndarray:
    x = np.asarray(f, dtype=float)
    if x.shape[-1] != m.input_dim:
        raise ValueError(f"feature length {x.shape[-1]} does not match model input {m.input_dim}")
    return _forward_cache(m, x)[0][-1]


def loss_and_grad(m: MlpModel, x: np.ndarray, y: np.ndarray):
    """Mean over the batch of ``0.5 * ||y_hat - y||^2`` and its gradients.

    Gradients are returned in :meth:`MlpModel.params` order.
    """
    x = np.atleast_2d(np.asarray(x, dtype=float))
    y = np.atleast_2d(np.asarray(y, dtype=float))
    if len(x) == 0:
        raise ValueError("batch must not be empty")
    acts, pre = _forward_cache(m, x)
    n = len(x)
    diff = acts[-1] - y
    loss = 0.5 * float(np.sum(diff * diff)) / n
    delta = diff / n
    grads: list[np.ndarray] = []
    for k in range(len(m.layers) - 1, -1, -1):
        layer = m.layers[k]
        grads.append(delta.sum(axis=0))
        grads.append(acts[k].T @ delta)
        if k:
            delta = (delta @ layer.w.T) * (pre[k - 1] > 0)
    grads.reverse()
    return loss, grads


def adam_step(m: MlpModel, grads, state: AdamState, t: int, lr: float, beta1=0.9, beta2=0.999, eps=1e-8):
    """One bias-corrected Adam update; ``t`` counts from 1."""
    params = m.params()
    new_p, new_m, new_v = [], [], []
    c1 = 1.0 - beta1**t
    c2 = 1.0 - beta2**t
    for p, g, mom, vel in zip(params, grads, state.m, state.v):
        mom = beta1 * mom + (1.0 - beta1) * g
        vel = beta2 * vel + (1.0 - beta2) * g * g
        new_p.append(p - lr * (mom / c1) / (np.sqrt(vel / c2) + eps))
        new_m.append(mom)
        new_v.append(vel)
    return m.with_params(new_p), AdamState(new_m, new_v)


def fit(x: np.ndarray, y: np.ndarray, cfg: TrainConfig, model: MlpModel | None = None):
    """Train on ready-made feature rows; returns ``(model, per-epoch losses)``."""
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    if len(x) == 0:
        raise ValueError("training set is empty")
    if model is None:
        model = init_model(x.shape[1], cfg.hidden, y.shape[1], cfg.seed)
    g = rngmod.stream(cfg.seed, rngmod.TRAIN, 1)
    state = AdamState.zeros_like(model.params())
    t = 0
    trace = []
    for epoch in range(cfg.epochs):
        lr = cfg.lr_at(epoch)
        order = g.permutation(len(x))
        total = 0.0
        for start in range(0, len(x), cfg.batch_size):
            idx = order[start : start + cfg.batch_size]
            loss, grads = loss_and_grad(model, x[idx], y[idx])
            if not math.isfinite(loss):
                raise FloatingPointError(f"non-finite loss at epoch {epoch}, batch starting {start} (lr={lr})")
            t += 1
            model, state = adam_step(
                model, grads, state, t, lr, cfg.adam_beta1, cfg.adam_beta2, cfg.adam_eps
            )
            total += loss * len(idx)
        trace.append(total / len(x))
        log.info("epoch %d lr %.2e loss %.6f", epoch, lr, trace[-1])
    return model, trace


def training_arrays(episodes, H: int, norm: FeatureNorm | None = None):
    episodes = list(episodes)
    if not episodes:
        raise ValueError("dataset is empty")
    if norm is None:
        norm = FeatureNorm.fit(np.concatenate([ep.states() for ep in episodes]))
    x = np.concatenate([episode_features(ep, H, norm) for ep in episodes])
    y = np.concatenate([ep.dvel() for ep in episodes])
    return x, y, norm


def train(episodes, cfg: TrainConfig, feature_window: int = 5):
    """Fit a predictor on recorded episodes; returns ``(model, per-epoch losses)``."""
    x, y, norm = training_arrays(episodes, feature_window)
    model = init_model(x.shape[1], cfg.hidden, OUTPUT_DIM, cfg.seed, feature_window=feature_window, feature_norm=norm)
    return fit(x, y, cfg, model)


def _num_list(values) -> str:
    return "[" + ", ".join(format(float(v), ".17g") for v in np.ravel(values)) + "]"


def save_model(m: MlpModel, path) -> None:
    layers = ",\n    ".join(
        f'{{"in": {layer.in_dim}, "out": {layer.out_dim}, "w": {_num_list(layer.w)}, "b": {_num_list(layer.b)}}}'
        for layer in m.layers
    )
    text = (
        "{\n"
        f'  "feature_window": {m.feature_window},\n'
        f'  "feature_norm": {{"mean": {_num_list(m.feature_norm.mean)}, "std": {_num_list(m.feature_norm.std)}}},\n'
        f'  "layers": [\n    {layers}\n  ]\n'
        "}\n"
    )
    Path(path).write_text(text)


def _require(d: dict, key: str, where: str):
    if key not in d:
        raise ModelFormatError(f"{where}: missing field {key!r}")
    return d[key]


def load_model(path) -> MlpModel:
    try:
        doc = json.loads(Path(path).read_text())
    except json.JSONDecodeError as e:
        raise ModelFormatError(f"{path}: not valid JSON ({e})") from e
    if not isinstance(doc, dict):
        raise ModelFormatError(f"{path}: top level must be an object")
    H = _require(doc, "feature_window", "model")
    if not isinstance(H, int) or H < 1:
        raise ModelFormatError("model: field 'feature_window' must be a positive integer")
    fn = _require(doc, "feature_norm", "model")
    try:
        norm = FeatureNorm(
            np.asarray(_require(fn, "mean", "feature_norm"), dtype=float),
            np.asarray(_require(fn, "std", "feature_norm"), dtype=float),
        )
    except (ValueError, TypeError) as e:
        raise ModelFormatError(f"feature_norm: {e}") from e
    raw_layers = _require(doc, "layers", "model")
    if not raw_layers:
        raise ModelFormatError("model: field 'layers' is empty")
    layers = []
    prev_out = H * N_STATE_FEATURES
    for i, d in enumerate(raw_layers):
        where = f"layer {i}"
        n_in, n_out = _require(d, "in", where), _require(d, "out", where)
        w = np.asarray(_require(d, "w", where), dtype=float)
        b = np.asarray(_require(d, "b", where), dtype=float)
        if n_in != prev_out:
            raise ModelFormatError(f"{where}: field 'in' is {n_in}, expected {prev_out}")
        if w.size != n_in * n_out:
            raise ModelFormatError(f"{where}: field 'w' has {w.size} entries, expected {n_in}x{n_out}")
        if b.size != n_out:
            raise ModelFormatError(f"{where}: field 'b' has {b.size} entries, expected {n_out}")
        if not (np.all(np.isfinite(w)) and np.all(np.isfinite(b))):
            raise ModelFormatError(f"{where}: non-finite weights")
        layers.append(Layer(w.reshape(n_in, n_out), b))
        prev_out = n_out
    if prev_out != OUTPUT_DIM:
        raise ModelFormatError(f"layer {len(layers) - 1}: field 'out' is {prev_out}, expected {OUTPUT_DIM}")
    return MlpModel(layers, feature_window=H, feature_norm=norm)
