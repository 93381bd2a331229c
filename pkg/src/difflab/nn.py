"""Small numpy multilayer perceptrons with hand-written reverse mode.

The same :class:`Mlp` serves as the diffusion denoiser and as every
classifier.  Inputs may be a single vector ``(d,)`` or a batch ``(n, d)``;
parameter gradients from :func:`backward` are summed over the batch.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .numerics import RngStream

ACTIVATIONS = ("tanh", "relu")
CHECKPOINT_VERSION = 1


@dataclass
class Mlp:
    layer_dims: list[int]
    weights: list[np.ndarray]
    biases: list[np.ndarray]
    activation: str = "relu"

    def __post_init__(self):
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")
        if len(self.layer_dims) < 2:
            raise ValueError("an Mlp needs at least an input and an output width")
        if len(self.weights) != len(self.layer_dims) - 1 or len(self.biases) != len(self.weights):
            raise ValueError("one weight matrix and bias per layer required")
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            shape = (self.layer_dims[i], self.layer_dims[i + 1])
            if w.shape != shape or b.shape != (shape[1],):
                raise ValueError(f"layer {i}: expected W{shape}, b({shape[1]},), got {w.shape}, {b.shape}")

    @classmethod
    def init(cls, layer_dims, rng: RngStream, activation: str = "relu") -> "Mlp":
        """He/Xavier-scaled random weights, zero biases."""
        layer_dims = [int(d) for d in layer_dims]
        gain = 2.0 if activation == "relu" else 1.0
        weights, biases = [], []
        for i in range(len(layer_dims) - 1):
            fan_in, fan_out = layer_dims[i], layer_dims[i + 1]
            weights.append(rng.normal((fan_in, fan_out)) * np.sqrt(gain / fan_in))
            biases.append(np.zeros(fan_out))
        return cls(layer_dims, weights, biases, activation)

    @classmethod
    def zeros(cls, layer_dims, activation: str = "relu") -> "Mlp":
        dims = [int(d) for d in layer_dims]
        return cls(dims, [np.zeros((dims[i], dims[i + 1])) for i in range(len(dims) - 1)],
                   [np.zeros(dims[i + 1]) for i in range(len(dims) - 1)], activation)

    @property
    def in_dim(self) -> int:
        return self.layer_dims[0]

    @property
    def out_dim(self) -> int:
        return self.layer_dims[-1]

    def params(self) -> list[np.ndarray]:
        return [p for pair in zip(self.weights, self.biases) for p in pair]

    def copy(self) -> "Mlp":
        return Mlp(list(self.layer_dims), [w.copy() for w in self.weights],
                   [b.copy() for b in self.biases], self.activation)

    def __call__(self, x):
        return forward(self, x)


@dataclass
class Gradients:
    weights: list[np.ndarray]
    biases: list[np.ndarray]
    input: np.ndarray | None = None

    def params(self) -> list[np.ndarray]:
        return [p for pair in zip(self.weights, self.biases) for p in pair]

    def __add__(self, other: "Gradients") -> "Gradients":
        inp = None
        if self.input is not None and other.input is not None:
            inp = self.input + other.input
        return Gradients([a + b for a, b in zip(self.weights, other.weights)],
                         [a + b for a, b in zip(self.biases, other.biases)], inp)

    def scale(self, c: float) -> "Gradients":
        return Gradients([c * w for w in self.weights], [c * b for b in self.biases],
                         None if self.input is None else c * self.input)


def _act(name, z):
    return np.tanh(z) if name == "tanh" else np.maximum(z, 0.0)


def _act_grad(name, z, a):
    return 1.0 - a * a if name == "tanh" else (z > 0).astype(z.dtype)


def _as_batch(model: Mlp, x) -> tuple[np.ndarray, bool]:
    x = np.asarray(x, dtype=float)
    single = x.ndim == 1
    xb = x[None, :] if single else x
    if xb.ndim != 2 or xb.shape[1] != model.in_dim:
        raise ValueError(f"input width {x.shape} does not match model input {model.in_dim}")
    return xb, single


def _forward_cached(model: Mlp, xb: np.ndarray):
    zs, acts = [], [xb]
    h = xb
    last = len(model.weights) - 1
    for i, (w, b) in enumerate(zip(model.weights, model.biases)):
        z = h @ w + b
        zs.append(z)
        h = z if i == last else _act(model.activation, z)
        acts.append(h)
    return zs, acts


def forward(model: Mlp, x) -> np.ndarray:
    xb, single = _as_batch(model, x)
    out = _forward_cached(model, xb)[1][-1]
    return out[0] if single else out


def backward(model: Mlp, x, output_grad) -> Gradients:
    """Reverse-mode gradients of ``sum(output * output_grad)``.

    Returns parameter gradients summed over the batch and the per-row
    gradient with respect to the input.
    """
    xb, single = _as_batch(model, x)
    g = np.asarray(output_grad, dtype=float)
    g = g[None, :] if g.ndim == 1 else g
    if g.shape != (xb.shape[0], model.out_dim):
        raise ValueError(f"output_grad shape {g.shape} does not match ({xb.shape[0]}, {model.out_dim})")
    zs, acts = _forward_cached(model, xb)
    grads = _backward_cached(model, zs, acts, g)
    if single:
        grads.input = grads.input[0]
    return grads


def _backward_cached(model: Mlp, zs, acts, g) -> Gradients:
    n_layers = len(model.weights)
    gw, gb = [None] * n_layers, [None] * n_layers
    for i in range(n_layers - 1, -1, -1):
        if i != n_layers - 1:
            g = g * _act_grad(model.activation, zs[i], acts[i + 1])
        gw[i] = acts[i].T @ g
        gb[i] = g.sum(axis=0)
        g = g @ model.weights[i].T
    return Gradients(gw, gb, g)


def value_and_grad(model: Mlp, x, loss_fn):
    """Run one forward pass, score it with ``loss_fn(output) -> (loss, output_grad)``
    and backpropagate without recomputing the forward pass."""
    xb, _ = _as_batch(model, x)
    zs, acts = _forward_cached(model, xb)
    loss, g = loss_fn(acts[-1])
    return loss, _backward_cached(model, zs, acts, np.asarray(g, dtype=float))


def softmax(logits) -> np.ndarray:
    z = np.asarray(logits, dtype=float)
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def cross_entropy_with_grad(logits, label):
    """Softmax cross-entropy and its gradient with respect to the logits.

    Batched inputs return the mean loss and the gradient of that mean.
    """
    z = np.asarray(logits, dtype=float)
    single = z.ndim == 1
    zb = z[None, :] if single else z
    labels = np.atleast_1d(np.asarray(label))
    if labels.shape[0] != zb.shape[0]:
        raise ValueError("one label per row of logits required")
    if np.any(labels < 0) or np.any(labels >= zb.shape[1]):
        raise ValueError(f"label out of range for {zb.shape[1]} classes")
    shifted = zb - zb.max(axis=1, keepdims=True)
    logsum = np.log(np.exp(shifted).sum(axis=1))
    rows = np.arange(zb.shape[0])
    losses = logsum - shifted[rows, labels]
    grad = softmax(zb)
    grad[rows, labels] -= 1.0
    if single:
        return float(losses[0]), grad[0]
    n = zb.shape[0]
    return float(losses.mean()), grad / n


def predict(model: Mlp, x) -> np.ndarray:
    return np.argmax(forward(model, x), axis=-1)


@dataclass
class OptimizerState:
    """Adam moments; shapes follow the owning model's parameter list."""
    m: list[np.ndarray]
    v: list[np.ndarray]
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0

    @classmethod
    def for_model(cls, model: Mlp, lr: float = 1e-3, **kw) -> "OptimizerState":
        ps = model.params()
        return cls([np.zeros_like(p) for p in ps], [np.zeros_like(p) for p in ps], lr=lr, **kw)


def optimizer_step(state: OptimizerState, model: Mlp, grads: Gradients) -> tuple[Mlp, OptimizerState]:
    params, gs = model.params(), grads.params()
    if len(gs) != len(params) or any(g.shape != p.shape for g, p in zip(gs, params)):
        raise ValueError("gradient shapes do not mirror the model")
    if any(m.shape != p.shape for m, p in zip(state.m, params)):
        raise ValueError("optimizer state does not mirror the model")
    state.step += 1
    c1 = 1.0 - state.beta1 ** state.step
    c2 = 1.0 - state.beta2 ** state.step
    for p, g, m, v in zip(params, gs, state.m, state.v):
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * g * g
        p -= state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
    return model, state


def minibatches(n: int, batch_size: int, rng: RngStream):
    order = rng.permutation(n)
    for start in range(0, n, batch_size):
        yield order[start:start + batch_size]


def train_classifier(model: Mlp, x, y, *, epochs: int, rng: RngStream, lr: float = 1e-3,
                     batch_size: int = 128, perturb=None) -> Mlp:
    """Fit ``model`` with minibatch Adam on cross-entropy.

    ``perturb(model, xb, yb, rng)`` may replace each batch before the update
    (used for adversarial training).
    """
    x = np.asarray(x, dtype=float)
    y = np.asarray(y)
    if len(x) == 0:
        raise ValueError("empty training set")
    state = OptimizerState.for_model(model, lr=lr)
    for epoch in range(epochs):
        erng = rng.derive("epoch", epoch)
        for idx in minibatches(len(x), batch_size, erng):
            xb, yb = x[idx], y[idx]
            if perturb is not None:
                xb = perturb(model, xb, yb, erng)
            _, grads = value_and_grad(model, xb, lambda out: cross_entropy_with_grad(out, yb))
            optimizer_step(state, model, grads)
    return model


def save_mlp(model: Mlp, path) -> None:
    path = Path(path)
    meta = {"version": CHECKPOINT_VERSION, "layer_dims": model.layer_dims,
            "activation": model.activation}
    arrays = {f"p{i}": p for i, p in enumerate(model.params())}
    with open(path, "wb") as fh:
        np.savez(fh, meta=np.frombuffer(json.dumps(meta).encode(), dtype=np.uint8), **arrays)


def load_mlp(path) -> Mlp:
    with np.load(Path(path)) as data:
        meta = json.loads(bytes(data["meta"]).decode())
        if meta.get("version") != CHECKPOINT_VERSION:
            raise ValueError(f"unsupported checkpoint version {meta.get('version')}")
        dims = meta["layer_dims"]
        ps = [data[f"p{i}"].copy() for i in range(2 * (len(dims) - 1))]
    return Mlp(dims, ps[0::2], ps[1::2], meta["activation"])
