"""Small dense networks with hand-written backprop, Adam, and a cosine tau embedding.

Everything operates on float64 numpy arrays. Inputs may be a single vector
``(d,)`` or a batch ``(n, d)``; batch outputs keep the leading axis.
Weights are stored as ``(fan_in, fan_out)`` so a layer is ``x @ W + b``.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np


class ShapeError(ValueError):
    """Input or parameter shapes do not chain."""


class NumericError(ValueError):
    """Non-finite values reached a computation that needs finite inputs."""


@dataclass
class DenseNet:
    """Feed-forward net: rectifier on hidden layers, identity on the output.

    ``relu_output=True`` rectifies the final layer as well, which is how the
    IQN state torso is built.
    """

    layer_dims: list[int]
    weights: list[np.ndarray]
    biases: list[np.ndarray]
    relu_output: bool = False

    def __post_init__(self):
        if len(self.layer_dims) < 2 or any(int(d) <= 0 for d in self.layer_dims):
            raise ShapeError(f"layer_dims must hold >= 2 positive ints, got {self.layer_dims}")
        if len(self.weights) != len(self.layer_dims) - 1 or len(self.biases) != len(self.weights):
            raise ShapeError("need one weight matrix and one bias per layer")
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            expect = (self.layer_dims[i], self.layer_dims[i + 1])
            if w.shape != expect or b.shape != (expect[1],):
                raise ShapeError(f"layer {i}: weight {w.shape} / bias {b.shape}, expected {expect}")

    @property
    def params(self) -> list[np.ndarray]:
        """Parameters in checkpoint order: weights then bias, layer by layer."""
        out = []
        for w, b in zip(self.weights, self.biases):
            out += [w, b]
        return out

    def copy(self) -> "DenseNet":
        return DenseNet(list(self.layer_dims), [w.copy() for w in self.weights],
                        [b.copy() for b in self.biases], self.relu_output)


def init_dense(layer_dims, rng: np.random.Generator, zero_output=False, relu_output=False) -> DenseNet:
    """He-uniform fan-in init with zero biases.

    ``zero_output`` zeroes the last weight matrix so the fresh net outputs its
    (zero) bias everywhere.
    """
    layer_dims = [int(d) for d in layer_dims]
    weights, biases = [], []
    for i in range(len(layer_dims) - 1):
        fan_in, fan_out = layer_dims[i], layer_dims[i + 1]
        limit = np.sqrt(6.0 / fan_in)
        weights.append(rng.uniform(-limit, limit, size=(fan_in, fan_out)))
        biases.append(np.zeros(fan_out))
    if zero_output:
        weights[-1][:] = 0.0
    return DenseNet(layer_dims, weights, biases, relu_output)


def _check_input(net: DenseNet, x) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim not in (1, 2) or x.shape[-1] != net.layer_dims[0]:
        raise ShapeError(f"input shape {x.shape} does not match input dim {net.layer_dims[0]}")
    if not np.all(np.isfinite(x)):
        raise NumericError("non-finite network input")
    return x


def forward(net: DenseNet, x, return_cache=False):
    """Evaluate the net; optionally return the activations needed by `backward`."""
    x = _check_input(net, x)
    acts = [x]
    pre = []
    h = x
    last = len(net.weights) - 1
    for i, (w, b) in enumerate(zip(net.weights, net.biases)):
        z = h @ w + b
        pre.append(z)
        h = np.maximum(z, 0.0) if (i < last or net.relu_output) else z
        acts.append(h)
    if return_cache:
        return h, (acts, pre)
    return h


@dataclass
class Gradients:
    weights: list[np.ndarray]
    biases: list[np.ndarray]
    inputs: np.ndarray

    @property
    def params(self) -> list[np.ndarray]:
        out = []
        for w, b in zip(self.weights, self.biases):
            out += [w, b]
        return out


def backward(net: DenseNet, x, upstream_grad, cache=None) -> Gradients:
    """Chain rule through the net for ``sum(upstream_grad * forward(x))``.

    The rectifier's derivative at exactly zero is taken as 0. Batched inputs
    accumulate (sum) parameter gradients over the batch.
    """
    if cache is None:
        _, cache = forward(net, x, return_cache=True)
    acts, pre = cache
    g = np.asarray(upstream_grad, dtype=np.float64)
    if g.shape != acts[-1].shape:
        raise ShapeError(f"upstream grad {g.shape} does not match output {acts[-1].shape}")
    if not np.all(np.isfinite(g)):
        raise NumericError("non-finite upstream gradient")
    last = len(net.weights) - 1
    gw: list[np.ndarray] = [None] * len(net.weights)
    gb: list[np.ndarray] = [None] * len(net.weights)
    for i in range(last, -1, -1):
        if i < last or net.relu_output:
            g = g * (pre[i] > 0.0)
        a = acts[i]
        if a.ndim == 1:
            gw[i] = np.outer(a, g)
            gb[i] = g.copy()
        else:
            gw[i] = a.T @ g
            gb[i] = g.sum(axis=0)
        g = g @ net.weights[i].T
    return Gradients(gw, gb, g)


@dataclass
class AdamState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    first_moment: list[np.ndarray] = field(default_factory=list)
    second_moment: list[np.ndarray] = field(default_factory=list)
    step_count: int = 0


def adam_init(params, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8) -> AdamState:
    if lr <= 0:
        raise ValueError("learning rate must be positive")
    return AdamState(lr, beta1, beta2, eps,
                     [np.zeros_like(p) for p in params], [np.zeros_like(p) for p in params], 0)


def adam_step(params, grads, state: AdamState):
    """One bias-corrected Adam update, applied to ``params`` in place."""
    if len(params) != len(grads) or len(params) != len(state.first_moment):
        raise ShapeError("params, grads and Adam moments must align")
    state.step_count += 1
    t = state.step_count
    c1 = 1.0 - state.beta1 ** t
    c2 = 1.0 - state.beta2 ** t
    for p, g, m, v in zip(params, grads, state.first_moment, state.second_moment):
        if p.shape != g.shape:
            raise ShapeError(f"param {p.shape} vs grad {g.shape}")
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * g * g
        p -= state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
    return params, state


@dataclass
class QuantileEmbedding:
    """Cosine features of tau followed by one rectified dense projection."""

    embed_dim: int
    weight: np.ndarray
    bias: np.ndarray

    @property
    def params(self) -> list[np.ndarray]:
        return [self.weight, self.bias]

    def copy(self) -> "QuantileEmbedding":
        return QuantileEmbedding(self.embed_dim, self.weight.copy(), self.bias.copy())


def init_embedding(embed_dim, hidden, rng: np.random.Generator) -> QuantileEmbedding:
    limit = np.sqrt(6.0 / embed_dim)
    return QuantileEmbedding(int(embed_dim), rng.uniform(-limit, limit, size=(embed_dim, hidden)),
                             np.zeros(hidden))


def cosine_features(tau, embed_dim) -> np.ndarray:
    """``cos(pi * i * tau)`` for ``i = 0 .. embed_dim-1``, appended as a last axis.

    Built with the Chebyshev recurrence ``cos(k t) = 2 cos(t) cos((k-1) t) -
    cos((k-2) t)``, which is stable on [-1, 1] and far cheaper than calling
    ``np.cos`` on every entry.
    """
    tau = np.asarray(tau, dtype=np.float64)
    if np.any(tau < 0.0) or np.any(tau > 1.0) or not np.all(np.isfinite(tau)):
        raise ValueError("tau must lie in [0, 1]")
    scalar = tau.ndim == 0
    tau = np.atleast_1d(tau)
    out = np.empty((embed_dim,) + tau.shape)
    out[0] = 1.0
    if embed_dim > 1:
        c = np.cos(np.pi * tau)
        out[1] = c
        c2 = 2.0 * c
        for k in range(2, embed_dim):
            np.multiply(c2, out[k - 1], out=out[k])
            out[k] -= out[k - 2]
    return out[:, 0] if scalar else np.moveaxis(out, 0, -1)


def quantile_embed(tau, emb: QuantileEmbedding, return_cache=False, features=None):
    """``relu(cos_features(tau) @ W + b)``; pass precomputed ``features`` to skip the cosines."""
    feats = cosine_features(tau, emb.embed_dim) if features is None else features
    z = (feats.reshape(-1, emb.embed_dim) @ emb.weight + emb.bias).reshape(feats.shape[:-1] + (-1,))
    out = np.maximum(z, 0.0)
    if return_cache:
        return out, (feats, z)
    return out


def embedding_backward(emb: QuantileEmbedding, cache, upstream_grad) -> list[np.ndarray]:
    feats, z = cache
    g = upstream_grad * (z > 0.0)
    f2 = feats.reshape(-1, emb.embed_dim)
    g2 = g.reshape(-1, g.shape[-1])
    return [f2.T @ g2, g2.sum(axis=0)]


# --- checkpoints -----------------------------------------------------------

def _flatten(params) -> bytes:
    flat = np.concatenate([np.asarray(p, dtype=np.float64).ravel() for p in params]) if params else np.zeros(0)
    return flat.astype("<f4").tobytes()


def save_params(path, components: dict, meta: dict) -> None:
    """Write ``<path>.json`` (manifest) and ``<path>.bin`` (little-endian float32 blob).

    ``components`` maps a name to a `DenseNet` or `QuantileEmbedding`; the blob
    holds their parameters in manifest order.
    """
    path = Path(path)
    layout = []
    params = []
    for name, comp in components.items():
        if isinstance(comp, DenseNet):
            layout.append({"name": name, "type": "dense", "layer_dims": comp.layer_dims,
                           "relu_output": comp.relu_output})
        else:
            layout.append({"name": name, "type": "embedding", "embed_dim": comp.embed_dim,
                           "hidden": int(comp.weight.shape[1])})
        params += comp.params
    blob = _flatten(params)
    manifest = dict(meta)
    manifest["components"] = layout
    manifest["n_params"] = len(blob) // 4
    path.with_suffix(".bin").write_bytes(blob)
    path.with_suffix(".json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")


def load_params(path) -> tuple[dict, dict]:
    """Inverse of `save_params`; returns ``(components, manifest)``."""
    path = Path(path)
    manifest = json.loads(path.with_suffix(".json").read_text())
    raw = path.with_suffix(".bin").read_bytes()
    if len(raw) != 4 * manifest["n_params"]:
        raise ValueError(f"checkpoint blob has {len(raw)} bytes, manifest expects {4 * manifest['n_params']}")
    flat = np.frombuffer(raw, dtype="<f4").astype(np.float64)
    pos = 0

    def take(shape):
        nonlocal pos
        n = int(np.prod(shape))
        arr = flat[pos:pos + n].reshape(shape).copy()
        pos += n
        return arr

    comps = {}
    for entry in manifest["components"]:
        if entry["type"] == "dense":
            dims = entry["layer_dims"]
            ws, bs = [], []
            for i in range(len(dims) - 1):
                ws.append(take((dims[i], dims[i + 1])))
                bs.append(take((dims[i + 1],)))
            comps[entry["name"]] = DenseNet(dims, ws, bs, entry["relu_output"])
        else:
            w = take((entry["embed_dim"], entry["hidden"]))
            comps[entry["name"]] = QuantileEmbedding(entry["embed_dim"], w, take((entry["hidden"],)))
    return comps, manifest

