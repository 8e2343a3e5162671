"""Dense feedforward networks with hand-written backpropagation.

Weights live in one flat float64 vector so that SGD, FedAvg and
checkpointing all operate on plain arrays. Each layer occupies a
contiguous block of ``(fan_in + 1) * fan_out`` entries: the weight matrix
in row-major ``(fan_in, fan_out)`` order followed by the bias.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

ACTIVATIONS = ("tanh", "relu", "identity")


class ShapeError(ValueError):
    """Input or parameter dimensions do not match the network."""


class AggregationError(ValueError):
    """Models cannot be averaged because their architectures differ."""


@dataclass(frozen=True)
class LossKind:
    tag: str = "mse"
    temperature: float = 1.0

    def __post_init__(self):
        if self.tag not in ("mse", "cross_entropy"):
            raise ValueError(f"unknown loss kind {self.tag!r}")
        if not self.temperature > 0:
            raise ValueError("temperature must be positive")


MSE = LossKind("mse")
CROSS_ENTROPY = LossKind("cross_entropy")


class Mlp:
    """Fully connected network; hidden layers use ``activations``, output is linear."""

    def __init__(self, layer_dims, activations=None, seed=0, weights=None):
        dims = [int(d) for d in layer_dims]
        if len(dims) < 2 or any(d <= 0 for d in dims):
            raise ValueError(f"layer_dims must hold >= 2 positive ints, got {layer_dims}")
        n_hidden = len(dims) - 2
        if activations is None:
            activations = ["tanh"] * n_hidden
        elif isinstance(activations, str):
            activations = [activations] * n_hidden
        activations = list(activations)
        if len(activations) != n_hidden:
            raise ValueError(f"need {n_hidden} activations, got {len(activations)}")
        for act in activations:
            if act not in ACTIVATIONS:
                raise ValueError(f"unknown activation {act!r}")
        self.layer_dims = dims
        self.activations = activations
        self.seed = int(seed)
        if weights is None:
            weights = _init_weights(dims, self.seed)
        weights = np.array(weights, dtype=np.float64).ravel()
        if weights.size != self.n_params:
            raise ShapeError(f"expected {self.n_params} weights, got {weights.size}")
        self.weights = weights

    @property
    def n_params(self) -> int:
        return param_count(self.layer_dims)

    @property
    def logit_dim(self) -> int:
        return self.layer_dims[-2]

    @property
    def output_dim(self) -> int:
        return self.layer_dims[-1]

    def layers(self, weights=None):
        """Yield ``(W, b)`` views into ``weights`` (defaults to the model's own)."""
        w = self.weights if weights is None else weights
        offset = 0
        for din, dout in zip(self.layer_dims[:-1], self.layer_dims[1:]):
            W = w[offset:offset + din * dout].reshape(din, dout)
            offset += din * dout
            b = w[offset:offset + dout]
            offset += dout
            yield W, b

    def copy(self) -> "Mlp":
        return Mlp(self.layer_dims, self.activations, self.seed, self.weights.copy())

    def same_architecture(self, other: "Mlp") -> bool:
        return self.layer_dims == other.layer_dims and self.activations == other.activations

    def predict(self, X):
        return forward(self, X)[0]

    def __repr__(self):
        return f"Mlp({self.layer_dims}, {self.activations}, seed={self.seed})"


def param_count(layer_dims: Sequence[int]) -> int:
    return sum((a + 1) * b for a, b in zip(layer_dims[:-1], layer_dims[1:]))


def _init_weights(dims, seed):
    rng = np.random.default_rng(seed)
    blocks = []
    for din, dout in zip(dims[:-1], dims[1:]):
        bound = 1.0 / np.sqrt(din)
        blocks.append(rng.uniform(-bound, bound, size=(din + 1) * dout))
    return np.concatenate(blocks)


def _activate(kind, z):
    if kind == "tanh":
        return np.tanh(z)
    if kind == "relu":
        return np.maximum(z, 0.0)
    return z


def _activation_grad(kind, z, a):
    if kind == "tanh":
        return 1.0 - a * a
    if kind == "relu":
        # derivative at exactly 0 is taken as 0
        return (z > 0).astype(z.dtype)
    return np.ones_like(z)


def _as_batch(model, x):
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 1
    X = x[None, :] if single else x
    if X.ndim != 2 or X.shape[1] != model.layer_dims[0]:
        raise ShapeError(f"input shape {x.shape} does not match input dim {model.layer_dims[0]}")
    return X, single


def _forward_cache(model, X, weights=None):
    acts = [X]
    pre = []
    layers = list(model.layers(weights))
    a = X
    for (W, b), kind in zip(layers[:-1], model.activations):
        z = a @ W + b
        a = _activate(kind, z)
        pre.append(z)
        acts.append(a)
    W, b = layers[-1]
    out = a @ W + b
    return out, acts, pre


def forward(model: Mlp, x):
    """Return ``(prediction, logits)``; logits are the last hidden activations.

    Accepts a single vector or a ``(batch, dim)`` matrix.
    """
    X, single = _as_batch(model, x)
    out, acts, _ = _forward_cache(model, X)
    hidden = acts[-1]
    if single:
        return out[0], hidden[0]
    return out, hidden


def softmax(z, temperature=1.0):
    z = np.asarray(z, dtype=np.float64) / temperature
    z = z - np.max(z, axis=-1, keepdims=True)
    e = np.exp(z)
    return e / np.sum(e, axis=-1, keepdims=True)


def log_softmax(z, temperature=1.0):
    z = np.asarray(z, dtype=np.float64) / temperature
    z = z - np.max(z, axis=-1, keepdims=True)
    return z - np.log(np.sum(np.exp(z), axis=-1, keepdims=True))


def _check_probability(t):
    t = np.asarray(t)
    if np.any(t < -1e-12) or np.any(np.abs(np.sum(t, axis=-1) - 1.0) > 1e-9):
        raise ValueError("cross-entropy target must be a probability vector")


def loss(kind: LossKind, prediction, target) -> float:
    p = np.asarray(prediction, dtype=np.float64)
    t = np.asarray(target, dtype=np.float64)
    if p.shape != t.shape:
        raise ShapeError(f"prediction {p.shape} and target {t.shape} differ")
    if kind.tag == "cross_entropy":
        _check_probability(t)
    return float(_loss_and_grad(kind, p[None], t[None])[0][0])


def _loss_and_grad(kind, P, T):
    """Per-row losses and their gradients w.r.t. ``P``."""
    if kind.tag == "mse":
        diff = P - T
        return np.sum(diff * diff, axis=1), 2.0 * diff
    temp = kind.temperature
    logp = log_softmax(P, temp)
    values = -np.sum(T * logp, axis=1)
    grad = (np.exp(logp) * np.sum(T, axis=1, keepdims=True) - T) / temp
    return values, grad


def _distill_target(kind, teacher):
    # the cross-entropy regularizer compares softened distributions of both sides
    if kind.tag == "cross_entropy":
        return softmax(teacher, kind.temperature)
    return teacher


def objective(model, x, target, teacher_logits=None, lam=0.0, kinds=(MSE, MSE),
              logit_layer="hidden", sample_weight=None, weights=None):
    """Mean over the batch of ``w_i * loss + lam_i * distillation``."""
    value, _ = _objective_and_grad(model, x, target, teacher_logits, lam, kinds,
                                   logit_layer, sample_weight, weights, need_grad=False)
    return value


def backward(model, x, target, teacher_logits=None, lam=0.0, kinds=(MSE, MSE),
             logit_layer="hidden", sample_weight=None):
    """Gradient of :func:`objective` w.r.t. the flat weight vector.

    ``logit_layer`` selects which activations the distillation term compares:
    ``"hidden"`` (last hidden layer, the default) or ``"output"`` (pre-softmax
    outputs). ``lam`` and ``sample_weight`` may be scalars or per-sample arrays.
    """
    return _objective_and_grad(model, x, target, teacher_logits, lam, kinds,
                               logit_layer, sample_weight, None, need_grad=True)[1]


def _objective_and_grad(model, x, target, teacher_logits, lam, kinds, logit_layer,
                        sample_weight, weights, need_grad):
    X, single = _as_batch(model, x)
    B = X.shape[0]
    T = np.asarray(target, dtype=np.float64).reshape(B, -1)
    if T.shape[1] != model.output_dim:
        raise ShapeError(f"target dim {T.shape[1]} != output dim {model.output_dim}")
    if logit_layer not in ("hidden", "output"):
        raise ValueError(f"logit_layer must be 'hidden' or 'output', got {logit_layer!r}")
    lam_arr = np.broadcast_to(np.asarray(lam, dtype=np.float64), (B,))
    if np.any(lam_arr < 0):
        raise ValueError("distillation weight must be non-negative")
    sw = np.ones(B) if sample_weight is None else np.broadcast_to(
        np.asarray(sample_weight, dtype=np.float64), (B,))
    loss_kind, reg_kind = kinds

    out, acts, pre = _forward_cache(model, X, weights)
    losses, g_out = _loss_and_grad(loss_kind, out, T)
    total = np.sum(sw * losses)
    g_out = g_out * sw[:, None]

    g_hidden = None
    if teacher_logits is not None:
        F = out if logit_layer == "output" else acts[-1]
        teacher = np.asarray(teacher_logits, dtype=np.float64).reshape(B, -1)
        if teacher.shape[1] != F.shape[1]:
            raise ShapeError(f"teacher logits dim {teacher.shape[1]} != logit dim {F.shape[1]}")
        reg, g_reg = _loss_and_grad(reg_kind, F, _distill_target(reg_kind, teacher))
        total += np.sum(lam_arr * reg)
        g_reg = g_reg * lam_arr[:, None]
        if logit_layer == "output":
            g_out = g_out + g_reg
        else:
            g_hidden = g_reg
    value = total / B
    if not need_grad:
        return value, None

    layers = list(model.layers(weights))
    grads = []
    delta = g_out / B
    W, _ = layers[-1]
    grads.append((acts[-1].T @ delta, delta.sum(axis=0)))
    g_a = delta @ W.T
    if g_hidden is not None:
        g_a = g_a + g_hidden / B
    for k in range(len(layers) - 2, -1, -1):
        g_z = g_a * _activation_grad(model.activations[k], pre[k], acts[k + 1])
        grads.append((acts[k].T @ g_z, g_z.sum(axis=0)))
        W, _ = layers[k]
        g_a = g_z @ W.T
    grads.reverse()
    flat = np.concatenate([np.concatenate([gW.ravel(), gb]) for gW, gb in grads])
    return value, flat


def sgd_step(model: Mlp, gradient, eta: float) -> Mlp:
    """Return a new model with ``weights - eta * gradient``."""
    if not eta > 0:
        raise ValueError("learning rate must be positive")
    g = np.asarray(gradient, dtype=np.float64).ravel()
    if g.shape != model.weights.shape:
        raise ShapeError(f"gradient has {g.size} entries, model has {model.n_params}")
    return Mlp(model.layer_dims, model.activations, model.seed, model.weights - eta * g)


def fedavg(models: Sequence[Mlp]) -> Mlp:
    """Elementwise mean of the weight vectors of architecturally identical models."""
    models = list(models)
    if not models:
        raise AggregationError("cannot average an empty list of models")
    first = models[0]
    for m in models[1:]:
        if not first.same_architecture(m):
            raise AggregationError(
                f"heterogeneous architectures: {first.layer_dims}/{first.activations} "
                f"vs {m.layer_dims}/{m.activations}")
    mean = np.mean(np.stack([m.weights for m in models]), axis=0)
    return Mlp(first.layer_dims, first.activations, first.seed, mean)


def numerical_gradient(f: Callable[[np.ndarray], float], w, step=1e-5):
    """Central finite differences of scalar ``f`` around ``w``."""
    w = np.array(w, dtype=np.float64)
    grad = np.empty_like(w)
    for i in range(w.size):
        orig = w[i]
        w[i] = orig + step
        hi = f(w)
        w[i] = orig - step
        lo = f(w)
        w[i] = orig
        grad[i] = (hi - lo) / (2 * step)
    return grad


def relative_error(a, b) -> float:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    denom = np.linalg.norm(a) + np.linalg.norm(b)
    if denom == 0:
        return 0.0
    return float(np.linalg.norm(a - b) / denom)


def gradient_check(model, x, target, teacher_logits=None, lam=0.0, kinds=(MSE, MSE),
                   logit_layer="hidden", sample_weight=None, step=1e-5) -> float:
    """Relative error between :func:`backward` and central differences."""
    analytic = backward(model, x, target, teacher_logits, lam, kinds, logit_layer, sample_weight)

    def f(w):
        return objective(model, x, target, teacher_logits, lam, kinds, logit_layer,
                         sample_weight, weights=w)

    return relative_error(analytic, numerical_gradient(f, model.weights, step))


def save_checkpoint(model: Mlp, path) -> None:
    header = {
        "layer_dims": model.layer_dims,
        "activations": model.activations,
        "seed": model.seed,
        "n_weights": model.n_params,
    }
    with open(path, "wb") as fh:
        fh.write(json.dumps(header).encode("utf-8") + b"\n")
        fh.write(model.weights.astype("<f8").tobytes())


def load_checkpoint(path) -> Mlp:
    raw = Path(path).read_bytes()
    head, sep, body = raw.partition(b"\n")
    if not sep:
        raise ValueError("checkpoint has no JSON header line")
    header = json.loads(head.decode("utf-8"))
    weights = np.frombuffer(body, dtype="<f8")
    if weights.size != header["n_weights"]:
        raise ValueError(f"checkpoint holds {weights.size} weights, header says {header['n_weights']}")
    return Mlp(header["layer_dims"], header["activations"], header["seed"], weights.astype(np.float64))
