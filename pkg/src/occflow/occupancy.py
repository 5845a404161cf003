"""Self-recursive occupancy prediction and the small MLP behind it.

The MLP carries hand-written backward passes so that the desk-scale training
loop can run without an autodiff framework.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import List, Optional, Sequence, Tuple

import numpy as np

from .voxelgrid import DimMismatch, upsample2x_weights

ALPHA_INIT = 0.5


def _sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


_ACT = {
    "identity": (lambda x: x, lambda y, x: np.ones_like(x)),
    "relu": (lambda x: np.maximum(x, 0.0), lambda y, x: (x > 0).astype(x.dtype)),
    "tanh": (np.tanh, lambda y, x: 1.0 - y * y),
    "sigmoid": (_sigmoid, lambda y, x: y * (1.0 - y)),
}


@dataclass
class Mlp:
    """Fully connected net acting on rows: ``x`` is (N, in_features)."""

    weights: List[np.ndarray]  # layer k: (out_k, in_k)
    biases: List[np.ndarray]
    hidden_activation: str = "relu"
    output_activation: str = "identity"

    def __post_init__(self):
        if len(self.weights) != len(self.biases) or not self.weights:
            raise DimMismatch("weights and biases must pair up")
        for k, (w, b) in enumerate(zip(self.weights, self.biases)):
            if b.shape != (w.shape[0],):
                raise DimMismatch(f"layer {k}: bias {b.shape} vs weight {w.shape}")
            if k and w.shape[1] != self.weights[k - 1].shape[0]:
                raise DimMismatch(f"layer {k}: input {w.shape[1]} vs previous output {self.weights[k - 1].shape[0]}")

    @classmethod
    def init(cls, sizes: Sequence[int], rng: np.random.Generator, hidden_activation="relu",
             output_activation="identity", output_bias: float = 0.0, scale: float = 1.0) -> "Mlp":
        weights, biases = [], []
        for n_in, n_out in zip(sizes[:-1], sizes[1:]):
            weights.append(scale * rng.standard_normal((n_out, n_in)) * np.sqrt(2.0 / n_in))
            biases.append(np.zeros(n_out))
        biases[-1] += output_bias
        return cls(weights, biases, hidden_activation, output_activation)

    @property
    def in_features(self) -> int:
        return self.weights[0].shape[1]

    @property
    def out_features(self) -> int:
        return self.weights[-1].shape[0]

    def parameters(self) -> List[np.ndarray]:
        return [p for pair in zip(self.weights, self.biases) for p in pair]

    def copy(self) -> "Mlp":
        return Mlp([w.copy() for w in self.weights], [b.copy() for b in self.biases],
                   self.hidden_activation, self.output_activation)

    def _act(self, k):
        name = self.output_activation if k == len(self.weights) - 1 else self.hidden_activation
        return _ACT[name]

    def forward(self, x: np.ndarray, keep: bool = False):
        if x.ndim != 2 or x.shape[1] != self.in_features:
            raise DimMismatch(f"MLP expects (N, {self.in_features}), got {x.shape}")
        cache = [x]
        h = x
        for k, (w, b) in enumerate(zip(self.weights, self.biases)):
            pre = h @ w.T + b
            h = self._act(k)[0](pre)
            cache.append((pre, h))
        return (h, cache) if keep else h

    def backward(self, cache, grad_out: np.ndarray) -> Tuple[List[np.ndarray], np.ndarray]:
        """Returns gradients in ``parameters()`` order and the input gradient."""
        grads_w, grads_b = [], []
        g = grad_out
        for k in range(len(self.weights) - 1, -1, -1):
            pre, out = cache[k + 1]
            g = g * self._act(k)[1](out, pre)
            h_in = cache[0] if k == 0 else cache[k][1]
            grads_w.append(g.T @ h_in)
            grads_b.append(g.sum(axis=0))
            g = g @ self.weights[k]
        grads = []
        for gw, gb in zip(reversed(grads_w), reversed(grads_b)):
            grads += [gw, gb]
        return grads, g


def mlp_forward_backward(m: Mlp, x: np.ndarray, upstream: np.ndarray):
    out, cache = m.forward(x, keep=True)
    if upstream.shape != out.shape:
        raise DimMismatch(f"upstream gradient {upstream.shape} vs output {out.shape}")
    grads, grad_in = m.backward(cache, upstream)
    return out, grads, grad_in


@dataclass
class SropState:
    """Occupancy predictor shared by every layer of a stage, plus per-layer alphas."""

    predictor: Mlp
    alpha: np.ndarray = field(default_factory=lambda: np.full(2, ALPHA_INIT))

    @classmethod
    def init(cls, channels: int, height: int, layers: int, rng, output_bias: float = 0.0) -> "SropState":
        mlp = Mlp.init([channels, 2 * channels, height], rng, output_activation="sigmoid",
                       output_bias=output_bias)
        return cls(mlp, np.full(layers, ALPHA_INIT))


def _columns(b: np.ndarray) -> np.ndarray:
    c, x, y = b.shape
    return b.reshape(c, x * y).T


def srop_predict(b: np.ndarray, predictor: Mlp, keep: bool = False):
    """Per-column height recovery: (C, X, Y) BEV -> (X, Y, Z) sigmoid outputs."""
    _, x, y = b.shape
    res = predictor.forward(_columns(b), keep=keep)
    out = res[0] if keep else res
    out = out.reshape(x, y, predictor.out_features)
    return (out, res[1]) if keep else out


def srop_step(b: np.ndarray, w_prev: np.ndarray, alpha: float, predictor: Mlp) -> np.ndarray:
    """One refinement: clip(f(b) + alpha * w_prev, 0, 1)."""
    if b.shape[1:] != w_prev.shape[:2] or w_prev.shape[2] != predictor.out_features:
        raise DimMismatch(f"BEV {b.shape} / weights {w_prev.shape} / predictor height {predictor.out_features}")
    return np.clip(srop_predict(b, predictor) + alpha * w_prev, 0.0, 1.0)


def srop_init(stage: int, dims: Tuple[int, int, int], w_prev_stage: Optional[np.ndarray] = None) -> np.ndarray:
    """Initial weights of a stage (1-based): zeros for the first stage, else upsampled."""
    if stage == 1 or w_prev_stage is None:
        return np.zeros(dims)
    up = upsample2x_weights(w_prev_stage)
    if up.shape != tuple(dims):
        raise DimMismatch(f"upsampled weights {up.shape} vs stage dims {dims}")
    return up


@dataclass
class SropTrace:
    """Forward record of a recursive run, enough for the backward pass."""

    inputs: List[np.ndarray]  # BEV fed to each layer
    w0: np.ndarray
    caches: list = field(default_factory=list)
    pre_clip: List[np.ndarray] = field(default_factory=list)
    outputs: List[np.ndarray] = field(default_factory=list)


def srop_forward(bevs: Sequence[np.ndarray], w0: np.ndarray, state: SropState) -> SropTrace:
    """Run the recursion over precomputed per-layer BEV inputs."""
    trace = SropTrace(list(bevs), w0)
    w = w0
    for layer, b in enumerate(bevs):
        f, cache = srop_predict(b, state.predictor, keep=True)
        pre = f + state.alpha[layer] * w
        w = np.clip(pre, 0.0, 1.0)
        trace.caches.append(cache)
        trace.pre_clip.append(pre)
        trace.outputs.append(w)
    return trace


def srop_backward(trace: SropTrace, state: SropState, grad_w: np.ndarray):
    """Gradients of a scalar loss through the recursion.

    ``grad_w`` is dLoss/dW for the last layer's output. Returns gradients for
    the predictor parameters and for ``alpha``. The clip passes gradient only
    where the pre-clip value is strictly inside (0, 1).
    """
    params = state.predictor.parameters()
    grads = [np.zeros_like(p) for p in params]
    grad_alpha = np.zeros_like(state.alpha)
    g = grad_w
    for layer in range(len(trace.inputs) - 1, -1, -1):
        pre = trace.pre_clip[layer]
        g = g * ((pre > 0.0) & (pre < 1.0))
        w_prev = trace.outputs[layer - 1] if layer else trace.w0
        grad_alpha[layer] = np.sum(g * w_prev)
        x, y, z = g.shape
        layer_grads, _ = state.predictor.backward(trace.caches[layer], g.reshape(x * y, z))
        for acc, lg in zip(grads, layer_grads):
            acc += lg
        g = g * state.alpha[layer]
    return grads, grad_alpha
