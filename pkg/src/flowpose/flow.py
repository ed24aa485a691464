"""Conditional flow matching in R^3.

The clean joint cloud ``X(0) = Q u T^r`` and Gaussian noise ``X(1)`` are
joined by the straight path ``X(t) = (1 - t) X(0) + t X(1)``. A velocity model
regresses the forward velocity ``X(1) - X(0)``; inference integrates
``X <- X - v dt`` from t = 1 down to t = 0 with the query (anchor) rows held
still.

The trainable model is a small permutation-equivariant MLP written directly
in numpy, with hand-derived gradients checked against finite differences.
"""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field
from typing import Callable, Iterable, Optional, Protocol

import numpy as np

from .errors import DivergenceError, ValidationError
from .features import (
    NOISY_SLOT,
    ConditioningMatrix,
    EncodingConfig,
    positional_encoding,
    time_encoding,
)
from .geom import PointCloud

log = logging.getLogger(__name__)

DEFAULT_SIGMA = 0.5


@dataclass(frozen=True, eq=False)
class FlowState:
    positions: np.ndarray
    time: float
    anchor_mask: np.ndarray
    displacement: np.ndarray

    @classmethod
    def start(cls, positions, anchor_mask, time=1.0) -> "FlowState":
        positions = np.array(positions, dtype=np.float64)
        return cls(positions, float(time), np.asarray(anchor_mask, dtype=bool), np.zeros_like(positions))


class VelocityModel(Protocol):
    def velocity(self, t: float, positions: np.ndarray, conditioning: ConditioningMatrix) -> np.ndarray:
        ...


def interpolate_path(X0, X1, t: float) -> np.ndarray:
    X0 = np.asarray(X0, dtype=np.float64)
    X1 = np.asarray(X1, dtype=np.float64)
    if X0.shape != X1.shape:
        raise ValidationError("path endpoints must have the same shape")
    if not 0.0 <= t <= 1.0:
        raise ValidationError(f"t={t} outside [0, 1]")
    return (1.0 - t) * X0 + t * X1


def cfm_loss(predicted, target) -> float:
    """Mean squared error over every entry."""
    predicted = np.asarray(predicted)
    target = np.asarray(target)
    if predicted.shape != target.shape:
        raise ValidationError(f"shape mismatch {predicted.shape} vs {target.shape}")
    return float(np.mean((predicted - target) ** 2))


@dataclass(frozen=True, eq=False)
class TrainingSample:
    t: float
    positions: np.ndarray
    target_velocity: np.ndarray
    conditioning: ConditioningMatrix
    anchor_mask: np.ndarray
    start: np.ndarray
    noise: np.ndarray


def make_training_sample(Q, T_r, C: ConditioningMatrix, sigma: float = DEFAULT_SIGMA, seed=None) -> TrainingSample:
    """Draw ``t ~ U[0, 1]`` and noise, and return the point on the straight path.

    The query half is the anchor: it sits at its clean positions for every
    ``t`` (so its target velocity is zero), exactly as during inference.
    The returned conditioning carries the noise in its noisy-coordinate slot.
    """
    q = Q.positions if isinstance(Q, PointCloud) else np.asarray(Q, dtype=np.float64)
    tr = T_r.positions if isinstance(T_r, PointCloud) else np.asarray(T_r, dtype=np.float64)
    if len(C) != len(q) + len(tr):
        raise ValidationError("conditioning rows must cover Q then T")
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    t = float(rng.uniform(0.0, 1.0))
    X0 = np.vstack([q, tr])
    X1 = X0.copy()
    X1[len(q):] = rng.normal(0.0, sigma, size=tr.shape)
    anchor = np.zeros(len(X0), dtype=bool)
    anchor[:len(q)] = True
    return TrainingSample(t, interpolate_path(X0, X1, t), X1 - X0, C.with_noisy(X1), anchor, X0, X1)


@dataclass(eq=False)
class OracleVelocityModel:
    """Knows the clean endpoint of every row; returns the exact straight-path velocity."""

    endpoint: np.ndarray

    def velocity(self, t, positions, conditioning=None):
        if t <= 0:
            return np.zeros_like(positions)
        return (np.asarray(positions) - self.endpoint) / t


def _silu(a):
    s = 1.0 / (1.0 + np.exp(-a))
    return a * s, s


def _silu_grad(a, s):
    return s * (1.0 + a * (1.0 - s))


PARAM_ORDER = ("W1", "b1", "W2a", "W2b", "b2", "W3", "b3", "W4", "b4")


class MlpVelocityModel:
    """Per-point MLP with one mean-pooled global context vector.

    Input row: ``[conditioning row | position | time encoding]``, where the
    noisy-coordinate slot of the conditioning is re-encoded from the current
    positions. Layout::

        h1 = silu(z W1 + b1)
        g  = mean over rows of h1
        h2 = silu(h1 W2a + g W2b + b2)
        h3 = silu(h2 W3 + b3)
        v  = h3 W4 + b4
    """

    def __init__(self, feature_width=64, hidden=128, encoding: EncodingConfig = EncodingConfig(),
                 seed=0, dtype=np.float64, params=None):
        self.feature_width = int(feature_width)
        self.hidden = int(hidden)
        self.encoding = encoding
        self.seed = seed
        self.dtype = np.dtype(dtype)
        self.input_width = self.feature_width + encoding.width + 3 + (2 * encoding.frequencies + 1)
        if params is None:
            params = self._init_params(np.random.default_rng(seed))
        self.params = {k: np.asarray(params[k], dtype=self.dtype) for k in PARAM_ORDER}

    def _init_params(self, rng):
        d, h = self.input_width, self.hidden

        def dense(a, b, gain=1.0):
            return rng.normal(0.0, gain / np.sqrt(a), size=(a, b))

        W2 = dense(2 * h, h)
        return {
            "W1": dense(d, h), "b1": np.zeros(h),
            "W2a": W2[:h], "W2b": W2[h:], "b2": np.zeros(h),
            "W3": dense(h, h), "b3": np.zeros(h),
            "W4": dense(h, 3, 0.1), "b4": np.zeros(3),
        }

    @classmethod
    def zeros(cls, **kwargs) -> "MlpVelocityModel":
        m = cls(**kwargs)
        m.params = {k: np.zeros_like(v) for k, v in m.params.items()}
        return m

    def astype(self, dtype) -> "MlpVelocityModel":
        return MlpVelocityModel(self.feature_width, self.hidden, self.encoding, self.seed, dtype, self.params)

    @property
    def n_params(self) -> int:
        return sum(p.size for p in self.params.values())

    # -- input assembly ---------------------------------------------------
    def _noisy_columns(self):
        width = 2 * self.encoding.frequencies + 1
        start = self.feature_width + NOISY_SLOT.start * width
        return slice(start, start + 3 * width)

    def static_inputs(self, C: ConditioningMatrix) -> np.ndarray:
        """The conditioning part of the input that does not change along the flow."""
        if C.features.shape[1] != self.feature_width:
            raise ValidationError(f"conditioning feature width {C.features.shape[1]} != {self.feature_width}")
        return C.matrix

    def assemble(self, static, positions, t) -> np.ndarray:
        """Full input rows; ``static`` and ``positions`` may carry a leading batch axis."""
        static = np.asarray(static)
        positions = np.asarray(positions, dtype=np.float64)
        z = np.empty(static.shape[:-1] + (self.input_width,), dtype=self.dtype)
        cw = static.shape[-1]
        z[..., :cw] = static
        enc3 = EncodingConfig(self.encoding.frequencies, 3)
        noisy = positional_encoding(positions.reshape(-1, 3), enc3).reshape(positions.shape[:-1] + (-1,))
        z[..., self._noisy_columns()] = noisy
        z[..., cw:cw + 3] = positions
        temb = time_encoding(np.atleast_1d(t), self.encoding.frequencies)
        if static.ndim == 3:
            z[..., cw + 3:] = temb[:, None, :] if len(temb) == static.shape[0] else temb[0]
        else:
            z[..., cw + 3:] = temb[0]
        return z

    # -- forward / backward ------------------------------------------------
    def forward(self, z, cache=False):
        p = self.params
        squeeze = z.ndim == 2
        if squeeze:
            z = z[None]
        a1 = z @ p["W1"] + p["b1"]
        h1, s1 = _silu(a1)
        g = h1.mean(axis=1)
        a2 = h1 @ p["W2a"] + (g @ p["W2b"])[:, None, :] + p["b2"]
        h2, s2 = _silu(a2)
        a3 = h2 @ p["W3"] + p["b3"]
        h3, s3 = _silu(a3)
        v = h3 @ p["W4"] + p["b4"]
        out = v[0] if squeeze else v
        if not cache:
            return out
        return out, (z, a1, h1, s1, g, a2, h2, s2, a3, h3, s3, squeeze)

    def backward(self, cache, dv):
        """Parameter gradients given ``dv = dLoss/dv`` (same shape as the output)."""
        z, a1, h1, s1, g, a2, h2, s2, a3, h3, s3, squeeze = cache
        p = self.params
        if squeeze:
            dv = dv[None]
        n = z.shape[1]
        grads = {}
        grads["W4"] = h3.reshape(-1, h3.shape[-1]).T @ dv.reshape(-1, 3)
        grads["b4"] = dv.sum(axis=(0, 1))
        da3 = (dv @ p["W4"].T) * _silu_grad(a3, s3)
        grads["W3"] = h2.reshape(-1, h2.shape[-1]).T @ da3.reshape(-1, da3.shape[-1])
        grads["b3"] = da3.sum(axis=(0, 1))
        da2 = (da3 @ p["W3"].T) * _silu_grad(a2, s2)
        grads["W2a"] = h1.reshape(-1, h1.shape[-1]).T @ da2.reshape(-1, da2.shape[-1])
        da2_sum = da2.sum(axis=1)
        grads["W2b"] = g.T @ da2_sum
        grads["b2"] = da2_sum.sum(axis=0)
        dh1 = da2 @ p["W2a"].T + (da2_sum @ p["W2b"].T)[:, None, :] / n
        da1 = dh1 * _silu_grad(a1, s1)
        grads["W1"] = z.reshape(-1, z.shape[-1]).T @ da1.reshape(-1, da1.shape[-1])
        grads["b1"] = da1.sum(axis=(0, 1))
        return grads

    def velocity(self, t, positions, conditioning: ConditioningMatrix) -> np.ndarray:
        z = self.assemble(self.static_inputs(conditioning), positions, t)
        return np.asarray(self.forward(z), dtype=np.float64)

    def loss_and_grads(self, z, target):
        v, cache = self.forward(z, cache=True)
        diff = v - target
        loss = float(np.mean(diff.astype(np.float64) ** 2))
        return loss, self.backward(cache, (2.0 / diff.size) * diff)


def sample_loss(model: MlpVelocityModel, sample: TrainingSample) -> float:
    return cfm_loss(model.velocity(sample.t, sample.positions, sample.conditioning), sample.target_velocity)


def gradient_check(model: MlpVelocityModel, sample: TrainingSample, epsilon: float = 1e-5,
                   n_params: int = 200, seed=0, floor: float = 1e-6) -> float:
    """Largest relative gap between backprop and central-difference gradients.

    Checks ``n_params`` randomly chosen scalar parameters in float64. The
    denominator is ``max(|analytic|, |numeric|, floor)``: central differences
    of an O(1) loss carry ~1e-10 of round-off, so gradients below ``floor``
    are effectively compared in absolute terms.
    """
    if not 1e-7 <= epsilon <= 1e-3:
        raise ValidationError("epsilon must lie in [1e-7, 1e-3]")
    m = model.astype(np.float64)
    z = m.assemble(m.static_inputs(sample.conditioning), sample.positions, sample.t)
    _, grads = m.loss_and_grads(z, sample.target_velocity)
    rng = np.random.default_rng(seed)
    sizes = np.array([m.params[k].size for k in PARAM_ORDER])
    picks = rng.choice(sizes.sum(), size=min(n_params, sizes.sum()), replace=False)
    offsets = np.concatenate([[0], np.cumsum(sizes)])
    worst = 0.0
    for flat in np.sort(picks):
        which = np.searchsorted(offsets, flat, side="right") - 1
        name = PARAM_ORDER[which]
        idx = np.unravel_index(flat - offsets[which], m.params[name].shape)
        arr = m.params[name]
        orig = arr[idx]
        arr[idx] = orig + epsilon
        lp = cfm_loss(m.forward(z), sample.target_velocity)
        arr[idx] = orig - epsilon
        lm = cfm_loss(m.forward(z), sample.target_velocity)
        arr[idx] = orig
        fd = (lp - lm) / (2 * epsilon)
        an = grads[name][idx]
        denom = max(abs(fd), abs(an), floor)
        worst = max(worst, abs(fd - an) / denom)
    return worst


def euler_integrate(model, init: FlowState, C: Optional[ConditioningMatrix], K: int) -> FlowState:
    """K uniform Euler steps ``X <- X - v(t, X) dt`` from t = 1 to t = 0.

    Anchor rows get a null velocity and are never written.
    """
    if K < 1:
        raise ValidationError("K must be >= 1")
    X = np.array(init.positions, dtype=np.float64)
    disp = np.array(init.displacement, dtype=np.float64)
    moving = ~init.anchor_mask
    dt = 1.0 / K
    static = model.static_inputs(C) if hasattr(model, "static_inputs") else None
    for k in range(K):
        t = init.time - k * dt
        if static is not None:
            v = np.asarray(model.forward(model.assemble(static, X, t)), dtype=np.float64)
        else:
            v = np.asarray(model.velocity(t, X, C), dtype=np.float64)
        if not np.all(np.isfinite(v[moving])):
            raise DivergenceError(f"non-finite velocity at step {k}", stage="denoise")
        step = v[moving] * dt
        X[moving] -= step
        disp[moving] -= step
    return FlowState(X, init.time - K * dt if K else init.time, init.anchor_mask, disp)


def denoise_target(Q, T, C: ConditioningMatrix, model, K: int = 50, sigma: float = DEFAULT_SIGMA,
                   seed=0, return_state: bool = False):
    """Deform Gaussian noise into the estimate of ``T^r`` (the target in the query frame).

    Row ``i`` of the result corresponds to row ``i`` of ``T`` through the
    conditioning; the query rows act as a fixed anchor.
    """
    q = Q.positions if isinstance(Q, PointCloud) else np.asarray(Q, dtype=np.float64)
    n_t = len(T)
    if len(C) != len(q) + n_t:
        raise ValidationError("conditioning rows must cover Q then T")
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    noise = rng.normal(0.0, sigma, size=(n_t, 3))
    X = np.vstack([q, noise])
    anchor = np.zeros(len(X), dtype=bool)
    anchor[:len(q)] = True
    state = euler_integrate(model, FlowState.start(X, anchor), C.with_noisy(X), K)
    T_hat = PointCloud(state.positions[len(q):])
    return (T_hat, state) if return_state else T_hat


# -- training ---------------------------------------------------------------

@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 40
    steps_per_epoch: int = 100
    batch_size: int = 16
    rows_per_sample: int = 256
    learning_rate: float = 1e-3
    seed: int = 0
    sigma: float = DEFAULT_SIGMA
    hidden: int = 128
    optimizer: str = "adam"
    lr_decay: bool = True
    dtype: str = "float32"

    def __post_init__(self):
        if min(self.epochs, self.steps_per_epoch, self.batch_size, self.rows_per_sample, self.hidden) < 1:
            raise ValidationError("training hyperparameters must be positive")
        if not (self.learning_rate > 0 and self.sigma > 0):
            raise ValidationError("learning rate and sigma must be positive")
        if self.optimizer not in ("adam", "sgd"):
            raise ValidationError(f"unknown optimizer {self.optimizer!r}")


@dataclass(eq=False)
class FlowExample:
    """One precomputed scene: clean joint cloud, conditioning and anchor split."""

    start: np.ndarray
    conditioning: ConditioningMatrix
    n_anchor: int
    static: Optional[np.ndarray] = None


@dataclass
class TrainLog:
    rows: list = field(default_factory=list)

    def append(self, epoch, loss, seconds):
        self.rows.append((epoch, loss, seconds))

    @property
    def losses(self):
        return [r[1] for r in self.rows]


def _batch(examples, model, config, rng):
    B, n = config.batch_size, config.rows_per_sample
    statics, X0s, X1s, ts = [], [], [], rng.uniform(0.0, 1.0, size=B)
    for b in range(B):
        ex = examples[rng.integers(len(examples))]
        total = len(ex.start)
        rows = rng.choice(total, size=min(n, total), replace=False) if total > n else rng.integers(total, size=n)
        rows.sort()
        x0 = ex.start[rows]
        x1 = x0.copy()
        moving = rows >= ex.n_anchor
        x1[moving] = rng.normal(0.0, config.sigma, size=(int(moving.sum()), 3))
        statics.append(ex.static[rows])
        X0s.append(x0)
        X1s.append(x1)
    X0, X1 = np.stack(X0s), np.stack(X1s)
    Xt = (1.0 - ts[:, None, None]) * X0 + ts[:, None, None] * X1
    z = model.assemble(np.stack(statics), Xt, ts)
    return z, (X1 - X0).astype(model.dtype)


def train_velocity_model(examples: Iterable[FlowExample], config: TrainConfig = TrainConfig(),
                         model: Optional[MlpVelocityModel] = None, on_epoch: Optional[Callable] = None):
    """Seeded mini-batch training on the CFM loss.

    Each step draws ``batch_size`` scenes, a random row subset of each, a
    time and fresh noise. Returns ``(model, log)``; the log holds
    ``(epoch, mean loss, wall seconds)`` per epoch.

    Raises:
        DivergenceError: the loss became non-finite (carries the epoch).
    """
    examples = list(examples)
    if not examples:
        raise ValidationError("no training examples")
    rng = np.random.default_rng(config.seed)
    if model is None:
        model = MlpVelocityModel(examples[0].conditioning.features.shape[1], config.hidden,
                                 examples[0].conditioning.encoding, seed=config.seed)
    work = model.astype(config.dtype)
    for ex in examples:
        if ex.static is None:
            ex.static = work.static_inputs(ex.conditioning).astype(work.dtype)
    m = {k: np.zeros_like(v) for k, v in work.params.items()}
    s = {k: np.zeros_like(v) for k, v in work.params.items()}
    b1, b2, eps = 0.9, 0.999, 1e-8
    total_steps = config.epochs * config.steps_per_epoch
    log_ = TrainLog()
    step = 0
    t0 = time.perf_counter()
    for epoch in range(config.epochs):
        losses = []
        for _ in range(config.steps_per_epoch):
            z, target = _batch(examples, work, config, rng)
            loss, grads = work.loss_and_grads(z, target)
            if not np.isfinite(loss):
                raise DivergenceError(f"loss became non-finite at epoch {epoch}", stage="train")
            step += 1
            lr = config.learning_rate
            if config.lr_decay:
                lr *= 1.0 - 0.9 * (step - 1) / max(total_steps - 1, 1)
            for k, g in grads.items():
                if config.optimizer == "sgd":
                    work.params[k] -= lr * g
                    continue
                m[k] = b1 * m[k] + (1 - b1) * g
                s[k] = b2 * s[k] + (1 - b2) * g * g
                mh = m[k] / (1 - b1 ** step)
                sh = s[k] / (1 - b2 ** step)
                work.params[k] -= (lr * mh / (np.sqrt(sh) + eps)).astype(work.dtype)
            losses.append(loss)
        mean_loss = float(np.mean(losses))
        log_.append(epoch, mean_loss, time.perf_counter() - t0)
        log.info("epoch %d loss %.5f", epoch, mean_loss)
        if on_epoch is not None:
            on_epoch(epoch, mean_loss)
    return work.astype(np.float64), log_
