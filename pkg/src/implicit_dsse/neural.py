"""A small numpy multilayer perceptron with manual backprop, AdamW and early stopping."""

from __future__ import annotations

import copy
from dataclasses import dataclass, field, asdict

import numpy as np

from .errors import ConfigurationError, ContractViolation, TrainingAborted

HIDDEN = (128, 128, 128)


@dataclass
class TrainingConfig:
    learning_rate: float = 1e-4
    weight_decay: float = 1e-5
    batch_size: int = 1000
    max_epochs: int = 2000
    gn_iters: int = 10
    gamma: float = 0.5
    patience: int = 100
    threshold: float = 1e-7
    scheduler_factor: float = 0.5
    scheduler_patience: int = 50
    warm_start_noise: float = 1e-2
    seed: int = 0
    # opt-in: start each training-time WLS solve from that sample's previous estimate
    gn_warm_start: bool = False

    def __post_init__(self):
        if not 0.0 <= self.gamma <= 1.0:
            raise ConfigurationError(f"gamma must lie in [0, 1], got {self.gamma}")
        for name in ("learning_rate", "batch_size", "max_epochs", "gn_iters", "patience",
                     "scheduler_patience"):
            if not getattr(self, name) > 0:
                raise ConfigurationError(f"{name} must be positive")
        if self.weight_decay < 0 or self.threshold < 0 or self.warm_start_noise < 0:
            raise ConfigurationError("weight_decay, threshold and warm_start_noise must be non-negative")
        if not 0 < self.scheduler_factor < 1:
            raise ConfigurationError("scheduler_factor must lie in (0, 1)")

    def to_dict(self):
        return asdict(self)


class MlpModel:
    """Fully connected ReLU network; identity on the output layer."""

    def __init__(self, layer_dims, seed=0, weights=None, biases=None):
        self.layer_dims = tuple(int(d) for d in layer_dims)
        if len(self.layer_dims) < 2 or min(self.layer_dims) < 1:
            raise ConfigurationError(f"invalid layer dims {self.layer_dims}")
        if weights is None:
            rng = np.random.default_rng(seed)
            weights, biases = [], []
            for fan_in, fan_out in zip(self.layer_dims[:-1], self.layer_dims[1:]):
                bound = np.sqrt(6.0 / fan_in)  # He-uniform
                weights.append(rng.uniform(-bound, bound, size=(fan_in, fan_out)))
                biases.append(np.zeros(fan_out))
        self.weights = [np.array(w, dtype=float) for w in weights]
        self.biases = [np.array(b, dtype=float) for b in biases]
        for k, (w, b) in enumerate(zip(self.weights, self.biases)):
            if w.shape != (self.layer_dims[k], self.layer_dims[k + 1]) or b.shape != (self.layer_dims[k + 1],):
                raise ConfigurationError(f"layer {k}: parameter shapes do not match dims")
        self.version = 0

    @classmethod
    def standard(cls, n_in, n_out, seed=0):
        return cls((n_in, *HIDDEN, n_out), seed=seed)

    @property
    def params(self):
        return [p for pair in zip(self.weights, self.biases) for p in pair]

    def set_params(self, params):
        self.weights = [np.array(p, dtype=float) for p in params[0::2]]
        self.biases = [np.array(p, dtype=float) for p in params[1::2]]
        self.version += 1

    def copy(self):
        return copy.deepcopy(self)

    def n_params(self):
        return sum(p.size for p in self.params)


@dataclass
class ActivationCache:
    inputs: list
    pre: list
    version: int


def mlp_forward(model: MlpModel, x):
    """Forward pass; returns (output, cache).  ``x`` is (B, in) or (in,)."""
    x = np.asarray(x, dtype=float)
    single = x.ndim == 1
    h = np.atleast_2d(x)
    if h.shape[1] != model.layer_dims[0]:
        raise ValueError(f"input has {h.shape[1]} features, model expects {model.layer_dims[0]}")
    inputs, pre = [], []
    last = len(model.weights) - 1
    for k, (w, b) in enumerate(zip(model.weights, model.biases)):
        inputs.append(h)
        a = h @ w + b
        pre.append(a)
        h = a if k == last else np.maximum(a, 0.0)
    out = h[0] if single else h
    return out, ActivationCache(inputs, pre, model.version)


def mlp_backward(model: MlpModel, cache: ActivationCache, upstream_grad):
    """Reverse-mode gradients; returns (param grads in ``model.params`` order, input grad)."""
    if cache.version != model.version:
        raise ContractViolation("activation cache is stale: parameters changed after the forward pass")
    g = np.atleast_2d(np.asarray(upstream_grad, dtype=float))
    grads_w, grads_b = [None] * len(model.weights), [None] * len(model.weights)
    last = len(model.weights) - 1
    for k in range(last, -1, -1):
        if k != last:
            g = g * (cache.pre[k] > 0)  # subgradient 0 at 0
        grads_w[k] = cache.inputs[k].T @ g
        grads_b[k] = g.sum(axis=0)
        g = g @ model.weights[k].T
    grads = [p for pair in zip(grads_w, grads_b) for p in pair]
    return grads, g


@dataclass
class AdamWState:
    lr: float = 1e-4
    weight_decay: float = 1e-5
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: list = field(default_factory=list)
    v: list = field(default_factory=list)


def adamw_step(state: AdamWState, model: MlpModel, grads) -> MlpModel:
    """One AdamW update with decoupled weight decay (in place; returns the model)."""
    params = model.params
    if len(grads) != len(params) or any(g.shape != p.shape for g, p in zip(grads, params)):
        raise ValueError("gradient shapes do not match parameters")
    bad = [k for k, g in enumerate(grads) if not np.all(np.isfinite(g))]
    if bad:
        raise TrainingAborted(f"non-finite gradient in parameter tensors {bad} at step {state.step + 1}")
    if not state.m:
        state.m = [np.zeros_like(p) for p in params]
        state.v = [np.zeros_like(p) for p in params]
    state.step += 1
    bc1 = 1.0 - state.beta1 ** state.step
    bc2 = 1.0 - state.beta2 ** state.step
    new = []
    for p, g, m, v in zip(params, grads, state.m, state.v):
        p = p * (1.0 - state.lr * state.weight_decay)
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * g * g
        p = p - state.lr * (m / bc1) / (np.sqrt(v / bc2) + state.eps)
        new.append(p)
    model.set_params(new)
    return model


@dataclass
class TrainController:
    """Early stopping plus a plateau learning-rate scheduler.

    An epoch improves when ``val_loss < best - threshold``.  After
    ``scheduler_patience`` consecutive non-improving epochs the learning rate
    is reduced; after ``patience`` of them training stops.
    """

    patience: int = 100
    threshold: float = 1e-7
    scheduler_patience: int = 50
    scheduler_factor: float = 0.5
    current_lr: float = 1e-4
    best_val_loss: float = np.inf
    best_params: list | None = None
    best_epoch: int = -1
    stall_counter: int = 0
    lr_stall_counter: int = 0
    epoch: int = 0

    @classmethod
    def from_config(cls, config: TrainingConfig):
        return cls(patience=config.patience, threshold=config.threshold,
                   scheduler_patience=config.scheduler_patience,
                   scheduler_factor=config.scheduler_factor, current_lr=config.learning_rate)


def controller_update(controller: TrainController, val_loss: float, params=None) -> str:
    """Record one validation loss; returns 'continue', 'reduce_lr' or 'stop'."""
    if not np.isfinite(val_loss):
        raise TrainingAborted(f"non-finite validation loss at epoch {controller.epoch}")
    controller.epoch += 1
    if val_loss < controller.best_val_loss - controller.threshold:
        controller.best_val_loss = float(val_loss)
        controller.best_params = None if params is None else [p.copy() for p in params]
        controller.best_epoch = controller.epoch
        controller.stall_counter = 0
        controller.lr_stall_counter = 0
        return "continue"
    controller.stall_counter += 1
    controller.lr_stall_counter += 1
    if controller.stall_counter >= controller.patience:
        return "stop"
    if controller.lr_stall_counter >= controller.scheduler_patience:
        controller.lr_stall_counter = 0
        controller.current_lr *= controller.scheduler_factor
        return "reduce_lr"
    return "continue"
