"""Dense neural-network kernel.

Forward/backward passes for small multilayer perceptrons (hidden ReLU,
linear output), tempered softmax, and the loss family used by every
training strategy: cross-entropy, reverse cross-entropy, their weighted
symmetric combination, and KL divergence against fixed peer distributions.

Everything here is a pure function of its inputs; parameter vectors are
frozen numpy arrays and may be shared across threads.
"""

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .errors import ConfigError, NumericError

PROB_FLOOR = 1e-12

LayerDims = tuple[tuple[int, int], ...]


def param_count(layer_dims: Sequence[tuple[int, int]]) -> int:
    return sum(fan_in * fan_out + fan_out for fan_in, fan_out in layer_dims)


@dataclass(frozen=True)
class ModelParams:
    """Flat float64 parameter vector plus the layer shapes that interpret it.

    Layout is layer-major: weights (fan_in x fan_out, C order) then biases
    for layer 0, then layer 1, and so on.
    """

    layer_dims: LayerDims
    values: np.ndarray

    def __post_init__(self):
        dims = tuple((int(i), int(o)) for i, o in self.layer_dims)
        if not dims:
            raise ConfigError("model needs at least one layer")
        for (_, out_prev), (in_next, _) in zip(dims[:-1], dims[1:]):
            if out_prev != in_next:
                raise ConfigError(f"layer shapes do not chain: {dims}")
        values = np.ascontiguousarray(self.values, dtype=np.float64)
        if values.ndim != 1 or values.size != param_count(dims):
            raise ConfigError(
                f"expected {param_count(dims)} parameter values, got {values.size}"
            )
        if not np.all(np.isfinite(values)):
            raise ConfigError("parameter values must be finite")
        values.flags.writeable = False
        object.__setattr__(self, "layer_dims", dims)
        object.__setattr__(self, "values", values)

    @property
    def size(self) -> int:
        return self.values.size

    def layers(self):
        """Yield (weight matrix, bias vector) views per layer."""
        offset = 0
        for fan_in, fan_out in self.layer_dims:
            w = self.values[offset : offset + fan_in * fan_out].reshape(fan_in, fan_out)
            offset += fan_in * fan_out
            b = self.values[offset : offset + fan_out]
            offset += fan_out
            yield w, b


@dataclass(frozen=True)
class Hyperparams:
    """Training constants shared by the loss family and the protocols.

    lam/gamma weight the symmetric loss terms, temperature only applies to
    the collaborative distillation loss, zeta shapes the label-refinement
    schedule, eta_conf scales confidence reweighting, and rce_log_floor is
    the clamp substituted for log(0) in the reverse term.
    """

    lam: float = 0.4
    gamma: float = 0.9
    temperature: float = 4.0
    lr: float = 0.001
    zeta: float = 10.0
    eta_conf: float = 1.2
    rce_log_floor: float = -4.0

    def __post_init__(self):
        if self.lam < 0 or self.gamma < 0 or self.eta_conf < 0:
            raise ConfigError("loss and confidence weights must be non-negative")
        if self.temperature <= 0 or self.lr <= 0 or self.zeta <= 0:
            raise ConfigError("temperature, lr and zeta must be positive")
        if self.rce_log_floor >= 0:
            raise ConfigError("rce_log_floor must be strictly negative")


def init_params(layer_dims: Sequence[tuple[int, int]], seed) -> ModelParams:
    """Fan-based uniform weight init, zero biases, from a dedicated stream."""
    rng = np.random.default_rng(seed)
    chunks = []
    for fan_in, fan_out in layer_dims:
        limit = np.sqrt(6.0 / (fan_in + fan_out))
        chunks.append(rng.uniform(-limit, limit, size=fan_in * fan_out))
        chunks.append(np.zeros(fan_out))
    return ModelParams(tuple(layer_dims), np.concatenate(chunks))


def one_hot(labels: np.ndarray, class_count: int) -> np.ndarray:
    labels = np.asarray(labels)
    if labels.ndim != 1:
        raise ConfigError("labels must be a vector")
    if labels.size and (labels.min() < 0 or labels.max() >= class_count):
        raise ConfigError(f"labels outside [0, {class_count})")
    out = np.zeros((labels.size, class_count))
    out[np.arange(labels.size), labels] = 1.0
    return out


def _forward_cached(params: ModelParams, batch: np.ndarray):
    x = np.asarray(batch, dtype=np.float64)
    if x.ndim != 2:
        raise ConfigError("batch must be a 2-D feature matrix")
    if x.shape[1] != params.layer_dims[0][0]:
        raise ConfigError(
            f"batch has {x.shape[1]} features, model expects {params.layer_dims[0][0]}"
        )
    layers = list(params.layers())
    activations = [x]
    pre = []
    h = x
    for idx, (w, b) in enumerate(layers):
        a = h @ w + b
        pre.append(a)
        h = a if idx == len(layers) - 1 else np.maximum(a, 0.0)
        activations.append(h)
    return activations, pre


def mlp_forward(params: ModelParams, batch: np.ndarray) -> np.ndarray:
    """Logits (N x C) of a ReLU MLP with a linear output layer."""
    activations, _ = _forward_cached(params, batch)
    return activations[-1]


def softmax_t(logits: np.ndarray, tau: float) -> np.ndarray:
    """Temperature softmax over the last axis, max-shifted for stability."""
    if tau <= 0:
        raise ConfigError(f"temperature must be positive, got {tau}")
    z = np.asarray(logits, dtype=np.float64)
    if not np.all(np.isfinite(z)):
        raise NumericError("softmax input contains non-finite values")
    scaled = z / tau
    scaled = scaled - scaled.max(axis=-1, keepdims=True)
    e = np.exp(scaled)
    return e / e.sum(axis=-1, keepdims=True)


def _check_pair(pred, target) -> tuple[np.ndarray, np.ndarray]:
    p = np.asarray(pred, dtype=np.float64)
    t = np.asarray(target, dtype=np.float64)
    if p.shape != t.shape:
        raise ConfigError(f"distribution shapes differ: {p.shape} vs {t.shape}")
    return p, t


def _floored_log(x: np.ndarray, floor: float) -> np.ndarray:
    # Clamp convention: log(v) is floored at `floor`, so exact zeros and
    # entries below exp(floor) contribute the same bounded penalty.
    safe = np.where(x > 0, x, 1.0)
    return np.maximum(np.where(x > 0, np.log(safe), floor), floor)


def ce_loss(pred, target) -> float:
    """Cross entropy -sum(target * log pred), pred clamped at 1e-12."""
    p, t = _check_pair(pred, target)
    return float(-(t * np.log(np.maximum(p, PROB_FLOOR))).sum())


def rce_loss(pred, target, floor: float) -> float:
    """Reverse cross entropy -sum(pred * log* target) with a clamped log."""
    if floor >= 0:
        raise ConfigError("rce log floor must be negative")
    p, t = _check_pair(pred, target)
    return float(-(p * _floored_log(t, floor)).sum())


def sl_loss(pred, target, h: Hyperparams) -> float:
    """Symmetric loss: lam * CE + gamma * RCE."""
    return h.lam * ce_loss(pred, target) + h.gamma * rce_loss(pred, target, h.rce_log_floor)


def sl_loss_rows(pred: np.ndarray, target: np.ndarray, h: Hyperparams) -> np.ndarray:
    """Per-row symmetric loss for matrices of distributions (N x C)."""
    p, t = _check_pair(pred, target)
    ce = -(t * np.log(np.maximum(p, PROB_FLOOR))).sum(axis=-1)
    rce = -(p * _floored_log(t, h.rce_log_floor)).sum(axis=-1)
    return h.lam * ce + h.gamma * rce


def kl_div(p, q) -> float:
    """KL(p || q) with q clamped at 1e-12 and 0*log0 treated as 0."""
    pa, qa = _check_pair(p, q)
    qa = np.maximum(qa, PROB_FLOOR)
    terms = np.where(pa > 0, pa * (np.log(np.where(pa > 0, pa, 1.0)) - np.log(qa)), 0.0)
    return float(terms.sum())


@dataclass(frozen=True)
class CrossEntropySpec:
    """Mean cross-entropy against fixed (possibly soft) target rows."""

    targets: np.ndarray
    tau: float = 1.0


@dataclass(frozen=True)
class SymmetricLossSpec:
    """Mean symmetric loss against fixed target rows."""

    targets: np.ndarray
    lam: float
    gamma: float
    floor: float
    tau: float = 1.0


@dataclass(frozen=True)
class ConsensusKlSpec:
    """Mean weighted KL from fixed peer logits to the model's own output.

    peer_logits has shape (J, N, C); peer_weights has shape (J,).
    """

    peer_logits: np.ndarray
    peer_weights: np.ndarray
    tau: float


def weighted_kl_alignment(own_logits, peer_logits, peer_weights, tau):
    """Mean over rows of sum_j w_j KL(softmax_t(peer_j) || softmax_t(own)).

    Returns (loss, gradient w.r.t. own logits); peers are constants.
    """
    own = np.asarray(own_logits, dtype=np.float64)
    peers = np.asarray(peer_logits, dtype=np.float64)
    w = np.asarray(peer_weights, dtype=np.float64)
    if peers.ndim != 3 or peers.shape[1:] != own.shape:
        raise ConfigError(f"peer logits {peers.shape} do not match own {own.shape}")
    if w.shape != (peers.shape[0],):
        raise ConfigError("one weight per peer required")
    if peers.shape[0] == 0:
        return 0.0, np.zeros_like(own)
    n = own.shape[0]
    q = softmax_t(own, tau)
    p = softmax_t(peers, tau)
    log_q = np.log(np.maximum(q, PROB_FLOOR))
    p_log_p = np.where(p > 0, p * np.log(np.where(p > 0, p, 1.0)), 0.0)
    entropy_term = float(np.einsum("j,jnc->", w, p_log_p))
    mixture = np.einsum("j,jnc->nc", w, p)
    loss = (entropy_term - float((mixture * log_q).sum())) / n
    grad = (w.sum() * q - mixture) / (tau * n)
    return loss, grad


def _logit_gradient(logits: np.ndarray, spec) -> np.ndarray:
    """d(mean loss)/d(logits) for the supported loss specs."""
    n = logits.shape[0]
    if isinstance(spec, ConsensusKlSpec):
        return weighted_kl_alignment(logits, spec.peer_logits, spec.peer_weights, spec.tau)[1]
    targets = np.asarray(spec.targets, dtype=np.float64)
    if targets.shape != logits.shape:
        raise ConfigError(f"targets {targets.shape} do not match logits {logits.shape}")
    q = softmax_t(logits, spec.tau)
    mass = targets.sum(axis=-1, keepdims=True)
    ce_grad = q * mass - targets
    if isinstance(spec, CrossEntropySpec):
        return ce_grad / (spec.tau * n)
    if isinstance(spec, SymmetricLossSpec):
        a = _floored_log(targets, spec.floor)
        rce_grad = -q * (a - (q * a).sum(axis=-1, keepdims=True))
        return (spec.lam * ce_grad + spec.gamma * rce_grad) / (spec.tau * n)
    raise ConfigError(f"unknown loss spec {type(spec).__name__}")


def loss_value(logits: np.ndarray, spec) -> float:
    """Mean loss over the batch for a loss spec (matches backward())."""
    if isinstance(spec, ConsensusKlSpec):
        return weighted_kl_alignment(logits, spec.peer_logits, spec.peer_weights, spec.tau)[0]
    targets = np.asarray(spec.targets, dtype=np.float64)
    q = softmax_t(logits, spec.tau)
    ce = -(targets * np.log(np.maximum(q, PROB_FLOOR))).sum(axis=-1)
    if isinstance(spec, CrossEntropySpec):
        return float(ce.mean())
    rce = -(q * _floored_log(targets, spec.floor)).sum(axis=-1)
    return float((spec.lam * ce + spec.gamma * rce).mean())


def backward(params: ModelParams, batch, loss_spec) -> np.ndarray:
    """Flat gradient of the mean batch loss w.r.t. every parameter."""
    x = np.asarray(batch, dtype=np.float64)
    if x.ndim != 2 or x.shape[0] == 0:
        raise ConfigError("batch must be a non-empty 2-D matrix")
    activations, pre = _forward_cached(params, x)
    delta = _logit_gradient(activations[-1], loss_spec)
    layers = list(params.layers())
    grads = [None] * len(layers)
    for idx in range(len(layers) - 1, -1, -1):
        w, _ = layers[idx]
        grads[idx] = (activations[idx].T @ delta, delta.sum(axis=0))
        if idx > 0:
            delta = (delta @ w.T) * (pre[idx - 1] > 0)
    flat = []
    for gw, gb in grads:
        flat.append(gw.ravel())
        flat.append(gb)
    return np.concatenate(flat)


def sgd_step(params: ModelParams, grad: np.ndarray, alpha: float) -> ModelParams:
    """One gradient-descent update; shapes are preserved."""
    g = np.asarray(grad, dtype=np.float64)
    if g.shape != params.values.shape:
        raise ConfigError(f"gradient length {g.size} != parameter length {params.size}")
    return ModelParams(params.layer_dims, params.values - alpha * g)
