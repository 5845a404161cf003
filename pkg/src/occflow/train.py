"""Gradient descent on the final-stage occupancy predictor and the heads.

The attention features of the final stage are frozen (taken from one decoder
pass); the voxel volume is rebuilt from them as ``B (x) W + fusion delta`` so
the loss reaches the occupancy predictor through ``W``.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import List, Optional, Sequence

import numpy as np

from .decoder import HeadParams, StageTrace, heads
from .lift_splat import DepthDistribution
from .losses import class_weights, depth_ce, weighted_focal
from .metrics import miou
from .occupancy import Mlp, SropState, srop_backward, srop_forward


class Diverged(ArithmeticError):
    pass


@dataclass
class TrainConfig:
    steps: int = 500
    lr: float = 2.0
    flow_lr: float = 0.01  # the L1 sign gradient oscillates at larger steps
    gamma: float = 2.0
    lambda_flow: float = 1.0
    foreground: Sequence[int] = (2, 3, 4)
    train_alpha: bool = True
    log_every: int = 0
    dtype: str = "float32"  # arithmetic precision of the loop; results are returned as float64


@dataclass
class HeadProblem:
    """Frozen inputs of the final stage together with its targets."""

    trace: StageTrace
    semantic: np.ndarray  # (X, Y, Z) labels
    flow: np.ndarray  # (2, X, Y, Z)
    depths: Sequence[DepthDistribution] = ()
    depth_bins: Sequence[np.ndarray] = ()
    num_classes: int = 6

    def __post_init__(self):
        self.weights = class_weights(self.semantic, self.num_classes + 1)
        vals = [depth_ce(d, b) for d, b in zip(self.depths, self.depth_bins)]
        cnt = sum(v.count for v in vals)
        # the depth distributions are inputs here, so this term is a constant offset
        self.depth_term = sum(v.value * v.count for v in vals) / cnt if cnt else 0.0

    def astype(self, dtype) -> "HeadProblem":
        tr = self.trace
        cast = StageTrace([b.astype(dtype) for b in tr.srop_inputs], tr.w0.astype(dtype), tr.alphas,
                          tr.bev_final.astype(dtype), tr.fusion_delta.astype(dtype), tr.layer_weights)
        out = HeadProblem(cast, self.semantic, self.flow.astype(dtype), num_classes=self.num_classes)
        out.weights = self.weights.astype(dtype)
        out.depth_term = self.depth_term
        return out


@dataclass
class StepResult:
    loss: float
    focal: float
    flow: float
    logits: np.ndarray
    flow_pred: np.ndarray
    srop_grads: list
    alpha_grad: np.ndarray
    head_grads: tuple


def forward_backward(problem: HeadProblem, srop: SropState, head: HeadParams, cfg: TrainConfig,
                     need_grad: bool = True) -> StepResult:
    """Loss and gradients. The flow head only runs on foreground voxels, the only
    place the flow loss looks at."""
    tr = problem.trace
    strace = srop_forward(tr.srop_inputs, tr.w0, srop)
    w = strace.outputs[-1]
    b = tr.bev_final
    v = b[:, :, :, None] * w[None] + tr.fusion_delta
    c = v.shape[0]
    rows = v.reshape(c, -1).T
    sem_out, sem_cache = head.semantic.forward(rows, keep=True)
    logits = sem_out.T.reshape((-1,) + w.shape)
    fg = np.flatnonzero(np.isin(problem.semantic.reshape(-1), list(cfg.foreground)))
    flo_out, flo_cache = head.flow.forward(rows[fg], keep=True)
    flow_fg = flo_out.T
    foc = weighted_focal(logits, problem.semantic, cfg.gamma, problem.weights)
    gt_fg = problem.flow.reshape(2, -1)[:, fg]
    diff = flow_fg - gt_fg
    n_fg = max(fg.size, 1)
    fl_value = float(np.abs(diff).sum() / n_fg) if fg.size else 0.0
    loss = foc.value + cfg.lambda_flow * fl_value + problem.depth_term
    if not need_grad:
        return StepResult(loss, foc.value, fl_value, logits, flow_fg, [], np.zeros(0), ())
    g_sem = foc.grad.reshape(foc.grad.shape[0], -1).T
    sem_grads, g_rows = head.semantic.backward(sem_cache, g_sem)
    g_flo = cfg.lambda_flow * np.sign(diff).T / n_fg
    flo_grads, gin_flo = head.flow.backward(flo_cache, g_flo)
    g_rows[fg] += gin_flo
    g_v = g_rows.T.reshape((c,) + w.shape)
    g_w = np.einsum("cxy,cxyz->xyz", b, g_v)
    srop_grads, alpha_grad = srop_backward(strace, srop, g_w)
    return StepResult(loss, foc.value, fl_value, logits, flow_fg, srop_grads, alpha_grad,
                      (sem_grads, flo_grads))


def predict(problem: HeadProblem, srop: SropState, head: HeadParams):
    """Full-grid logits and flow from the frozen features."""
    tr = problem.trace
    w = srop_forward(tr.srop_inputs, tr.w0, srop).outputs[-1]
    v = tr.bev_final[:, :, :, None] * w[None] + tr.fusion_delta
    return heads(v, head)


@dataclass
class TrainResult:
    srop: SropState
    heads: HeadParams
    losses: List[float] = field(default_factory=list)
    accuracy: float = float("nan")
    miou: float = float("nan")


def _cast_mlp(m: Mlp, dtype) -> Mlp:
    return Mlp([w.astype(dtype) for w in m.weights], [b.astype(dtype) for b in m.biases],
               m.hidden_activation, m.output_activation)


def _apply(params: List[np.ndarray], grads: List[np.ndarray], lr: float) -> None:
    for p, g in zip(params, grads):
        p -= lr * g


def evaluate(problem: HeadProblem, srop: SropState, head: HeadParams, cfg: TrainConfig):
    res = forward_backward(problem, srop, head, cfg, need_grad=False)
    labels = np.argmax(res.logits, axis=0)
    acc = float(np.mean(labels == problem.semantic))
    _, m = miou(labels, problem.semantic, problem.num_classes)
    return res.loss, acc, m


def train_head(problem: HeadProblem, srop: SropState, head: HeadParams, cfg: TrainConfig) -> TrainResult:
    """Plain gradient descent; the inputs are copied, never modified.

    ``losses`` has ``steps + 1`` entries: the loss before every update and the
    final loss. Raises Diverged on a non-finite loss or gradient.
    """
    dt = np.dtype(cfg.dtype)
    if cfg.steps == 0:
        # nothing to update: echo the inputs exactly rather than through the loop precision
        loss, acc, m = evaluate(problem, srop, head, cfg)
        f64 = np.dtype(np.float64)
        return TrainResult(SropState(_cast_mlp(srop.predictor, f64), srop.alpha.astype(f64)),
                           HeadParams(_cast_mlp(head.semantic, f64), _cast_mlp(head.flow, f64)),
                           [float(loss)], acc, m)
    problem = problem.astype(dt)
    srop = SropState(_cast_mlp(srop.predictor, dt), srop.alpha.astype(dt))
    head = HeadParams(_cast_mlp(head.semantic, dt), _cast_mlp(head.flow, dt))
    losses = []
    for step in range(cfg.steps + 1):
        res = forward_backward(problem, srop, head, cfg, need_grad=step < cfg.steps)
        if not np.isfinite(res.loss):
            raise Diverged(f"loss became {res.loss} at step {step}")
        losses.append(float(res.loss))
        if step == cfg.steps:
            break
        grads = res.srop_grads + res.head_grads[0] + res.head_grads[1]
        if not all(np.all(np.isfinite(g)) for g in grads):
            raise Diverged(f"non-finite gradient at step {step}")
        _apply(srop.predictor.parameters(), res.srop_grads, cfg.lr)
        if cfg.train_alpha:
            srop.alpha -= cfg.lr * res.alpha_grad
        _apply(head.semantic.parameters(), res.head_grads[0], cfg.lr)
        _apply(head.flow.parameters(), res.head_grads[1], cfg.flow_lr)
        if cfg.log_every and step % cfg.log_every == 0:
            print(f"step {step:4d} loss {res.loss:.6f}")
    _, acc, m = evaluate(problem, srop, head, cfg)
    f64 = np.dtype(np.float64)
    srop = SropState(_cast_mlp(srop.predictor, f64), srop.alpha.astype(f64))
    head = HeadParams(_cast_mlp(head.semantic, f64), _cast_mlp(head.flow, f64))
    return TrainResult(srop, head, losses, acc, m)


def window_non_increasing(losses: Sequence[float], window: int = 10) -> bool:
    """True when loss[i + window] <= loss[i] for every i."""
    a = np.asarray(losses)
    if a.size <= window:
        return bool(a[-1] <= a[0]) if a.size else True
    return bool(np.all(a[window:] <= a[:-window]))
