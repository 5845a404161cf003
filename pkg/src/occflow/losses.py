"""Occupancy, flow and depth losses.

Focal, flow L1 and depth cross-entropy return analytic gradients; the
scene-class affinity and Lovasz terms are forward-only.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import List, NamedTuple, Optional, Sequence

import numpy as np

from .lift_splat import DepthDistribution

IGNORE = 255
_LOG_FLOOR = -100.0  # log clamp as in torch's binary cross-entropy


def softmax(logits: np.ndarray, axis: int = 0) -> np.ndarray:
    z = logits - logits.max(axis=axis, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=axis, keepdims=True)


def _neg_log(x: float) -> float:
    return -max(np.log(x) if x > 0 else _LOG_FLOOR, _LOG_FLOOR)


def stage_weights(num_stages: int) -> np.ndarray:
    return np.array([1.0 / 2 ** (num_stages - i) for i in range(1, num_stages + 1)])


def class_weights(gt: np.ndarray, num_classes: int, lo: float = 0.1, hi: float = 10.0) -> np.ndarray:
    """Inverse-frequency weights for ``num_classes`` labels, clipped to [lo, hi] then
    renormalized to mean 1 over the classes present. Absent classes get weight 1."""
    labels = gt[gt != IGNORE].astype(np.int64)
    counts = np.bincount(labels, minlength=num_classes)[:num_classes].astype(np.float64)
    present = counts > 0
    w = np.ones(num_classes)
    if not present.any():
        return w
    inv = counts.sum() / (present.sum() * counts[present])
    cw = np.clip(inv, lo, hi)
    w[present] = cw / cw.mean()
    return w


def downsample_labels(gt: np.ndarray) -> np.ndarray:
    """Majority label per 2x2x2 block; empty (0) loses ties to any other class,
    remaining ties go to the lower class id."""
    x, y, z = gt.shape
    blocks = gt.reshape(x // 2, 2, y // 2, 2, z // 2, 2).transpose(0, 2, 4, 1, 3, 5).reshape(-1, 8)
    n_cls = int(gt.max()) + 1
    counts = np.stack([(blocks == c).sum(axis=1) for c in range(n_cls)], axis=1).astype(np.float64)
    # empty gets a half-vote handicap so equal counts resolve to the foreground class
    counts[:, 0] -= 0.5
    return np.argmax(counts, axis=1).astype(gt.dtype).reshape(x // 2, y // 2, z // 2)


def _flatten(probs: np.ndarray, gt: np.ndarray):
    n_cls = probs.shape[0]
    p = probs.reshape(n_cls, -1)
    g = gt.reshape(-1)
    keep = g != IGNORE
    return p[:, keep], g[keep].astype(np.int64)


def scal_loss(probs: np.ndarray, gt: np.ndarray, mode: str = "sem") -> float:
    """Scene-class affinity: -log precision, recall and specificity.

    ``sem`` averages over classes present in ``gt``; ``geo`` uses the
    occupied/empty split with class 0 as empty.
    """
    p, g = _flatten(probs, gt)
    if mode == "geo":
        occ_p = 1.0 - p[0]
        occ_t = (g != 0).astype(np.float64)
        inter = float((occ_p * occ_t).sum())
        loss = 0.0
        if occ_p.sum() > 0:
            loss += _neg_log(inter / occ_p.sum())
        if occ_t.sum() > 0:
            loss += _neg_log(inter / occ_t.sum())
        if (1 - occ_t).sum() > 0:
            loss += _neg_log(float(((1 - occ_t) * p[0]).sum() / (1 - occ_t).sum()))
        return loss
    if mode != "sem":
        raise ValueError(f"unknown scal mode {mode!r}")
    total, count = 0.0, 0
    for c in range(p.shape[0]):
        t = (g == c).astype(np.float64)
        if t.sum() == 0:
            continue
        count += 1
        pc = p[c]
        nom = float((pc * t).sum())
        if pc.sum() > 0:
            total += _neg_log(nom / pc.sum())
        total += _neg_log(nom / t.sum())
        if (1 - t).sum() > 0:
            total += _neg_log(float(((1 - pc) * (1 - t)).sum() / (1 - t).sum()))
    return total / count if count else 0.0


class LossGrad(NamedTuple):
    value: float
    grad: np.ndarray


def weighted_focal(logits: np.ndarray, gt: np.ndarray, gamma: float = 2.0,
                   weights: Optional[np.ndarray] = None) -> LossGrad:
    """Mean over voxels of -w_gt (1 - p_t)^gamma log p_t, with its logit gradient."""
    n_cls = logits.shape[0]
    z = logits.reshape(n_cls, -1)
    g = gt.reshape(-1).astype(np.int64)
    keep = g != IGNORE
    n = int(keep.sum())
    grad = np.zeros_like(z)
    if n == 0:
        return LossGrad(0.0, grad.reshape(logits.shape))
    zk = z[:, keep]
    gk = g[keep]
    zs = zk - zk.max(axis=0)
    logp = zs - np.log(np.exp(zs).sum(axis=0))
    p = np.exp(logp)
    cols = np.arange(gk.size)
    logpt = logp[gk, cols]
    pt = p[gk, cols]
    w = np.ones(gk.size) if weights is None else np.asarray(weights)[gk]
    one_m = 1.0 - pt
    mod = one_m ** gamma
    loss = float(np.sum(-w * mod * logpt) / n)
    # dL/dlog p_t, then through log-softmax: d log p_t / dz_j = [j == t] - p_j
    if gamma == 0:
        dmod = np.zeros_like(pt)
    else:
        dmod = gamma * one_m ** (gamma - 1)
    dl_dlogpt = -w * (mod - dmod * pt * logpt) / n
    gz = -p * dl_dlogpt
    gz[gk, cols] += dl_dlogpt
    grad[:, keep] = gz
    return LossGrad(loss, grad.reshape(logits.shape))


def cross_entropy(logits: np.ndarray, gt: np.ndarray) -> float:
    n_cls = logits.shape[0]
    z = logits.reshape(n_cls, -1)
    g = gt.reshape(-1).astype(np.int64)
    keep = g != IGNORE
    if not keep.any():
        return 0.0
    zk = z[:, keep]
    lse = np.log(np.exp(zk - zk.max(axis=0)).sum(axis=0)) + zk.max(axis=0)
    return float(np.mean(lse - zk[g[keep], np.arange(keep.sum())]))


def _lovasz_grad(fg_sorted: np.ndarray) -> np.ndarray:
    gts = fg_sorted.sum()
    inter = gts - np.cumsum(fg_sorted)
    union = gts + np.cumsum(1.0 - fg_sorted)
    jac = 1.0 - inter / union
    jac[1:] = jac[1:] - jac[:-1]
    return jac


def lovasz_softmax(probs: np.ndarray, gt: np.ndarray) -> float:
    """Lovasz extension of the per-class Jaccard loss, mean over classes present in ``gt``."""
    p, g = _flatten(probs, gt)
    losses = []
    for c in range(p.shape[0]):
        fg = (g == c).astype(np.float64)
        if fg.sum() == 0:
            continue
        err = np.abs(fg - p[c])
        order = np.argsort(-err, kind="stable")
        losses.append(float(np.dot(err[order], _lovasz_grad(fg[order]))))
    return float(np.mean(losses)) if losses else 0.0


def flow_l1(flow_pred: np.ndarray, flow_gt: np.ndarray, gt: np.ndarray,
            foreground: Sequence[int]) -> LossGrad:
    """Mean over foreground voxels of |dvx| + |dvy|."""
    mask = np.isin(gt, list(foreground))
    n = int(mask.sum())
    grad = np.zeros_like(flow_pred)
    if n == 0:
        return LossGrad(0.0, grad)
    diff = (flow_pred - flow_gt) * mask[None]
    grad = np.sign(diff) / n
    return LossGrad(float(np.abs(diff).sum() / n), grad)


class DepthCE(NamedTuple):
    value: float
    count: int
    grad: np.ndarray  # w.r.t. the probabilities


def depth_ce(depth_pred: DepthDistribution, gt_bins: np.ndarray, eps: float = 1e-12) -> DepthCE:
    """Mean -log p(gt bin) over pixels whose gt bin is not negative (ignore mark)."""
    probs = depth_pred.probs
    grad = np.zeros_like(probs)
    rows, cols = np.nonzero(gt_bins >= 0)
    n = rows.size
    if n == 0:
        return DepthCE(0.0, 0, grad)
    bins = gt_bins[rows, cols]
    pg = np.maximum(probs[bins, rows, cols], eps)
    grad[bins, rows, cols] = -1.0 / (n * pg)
    return DepthCE(float(-np.log(pg).sum() / n), n, grad)


@dataclass
class LossConfig:
    gamma: float = 2.0
    lambda_flow: float = 1.0
    foreground: Sequence[int] = (2, 3, 4)
    class_weights: Optional[np.ndarray] = None  # computed from the ground truth when absent


@dataclass
class StagePrediction:
    """Class probabilities of one stage. ``binary`` stages predict occupied vs empty."""

    probs: np.ndarray
    binary: bool = False

    @classmethod
    def from_weights(cls, w: np.ndarray) -> "StagePrediction":
        return cls(np.stack([1.0 - w, w]), binary=True)


@dataclass
class LossReport:
    scal_geo: float = 0.0
    scal_sem: float = 0.0
    focal: float = 0.0
    lovasz: float = 0.0
    flow_l1: float = 0.0
    depth_ce: float = 0.0
    total: float = 0.0
    per_stage: List[float] = field(default_factory=list)


def occupancy_loss(pred: StagePrediction, gt: np.ndarray, cfg: LossConfig):
    """(scal_geo, scal_sem, focal, lovasz) for one stage; the stage's loss is their sum."""
    target = (gt != 0).astype(gt.dtype) if pred.binary else gt
    n_cls = pred.probs.shape[0]
    cw = class_weights(target, n_cls) if (cfg.class_weights is None or pred.binary) else cfg.class_weights
    logp = np.log(np.clip(pred.probs, 1e-300, None))
    return (scal_loss(pred.probs, target, "geo"), scal_loss(pred.probs, target, "sem"),
            weighted_focal(logp, target, cfg.gamma, cw).value, lovasz_softmax(pred.probs, target))


def total_loss(stages: Sequence[StagePrediction], gt: np.ndarray, cfg: LossConfig,
               flow_pred: Optional[np.ndarray] = None, flow_gt: Optional[np.ndarray] = None,
               depths: Sequence[DepthDistribution] = (), depth_bins: Sequence[np.ndarray] = ()) -> LossReport:
    """Weighted per-stage occupancy losses plus flow L1 and depth cross-entropy.

    ``stages`` are ordered coarsest first; the last one is at ``gt`` resolution
    and coarser ground truth comes from repeated majority downsampling.
    """
    n = len(stages)
    sw = stage_weights(n)
    targets = [gt]
    for _ in range(n - 1):
        targets.append(downsample_labels(targets[-1]))
    targets = targets[::-1]
    rep = LossReport()
    for wi, pred, target in zip(sw, stages, targets):
        if pred.probs.shape[1:] != target.shape:
            raise ValueError(f"stage prediction {pred.probs.shape[1:]} vs ground truth {target.shape}")
        geo, sem, foc, lov = occupancy_loss(pred, target, cfg)
        rep.scal_geo += wi * geo
        rep.scal_sem += wi * sem
        rep.focal += wi * foc
        rep.lovasz += wi * lov
        rep.per_stage.append(geo + sem + foc + lov)
    if flow_pred is not None and flow_gt is not None:
        rep.flow_l1 = flow_l1(flow_pred, flow_gt, gt, cfg.foreground).value
    if depths:
        vals = [depth_ce(d, b) for d, b in zip(depths, depth_bins)]
        cnt = sum(v.count for v in vals)
        rep.depth_ce = sum(v.value * v.count for v in vals) / cnt if cnt else 0.0
    rep.total = cfg.lambda_flow * rep.flow_l1 + rep.depth_ce + float(np.dot(sw, rep.per_stage))
    return rep
