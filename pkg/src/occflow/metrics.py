"""Ray-based occupancy evaluation: voxel traversal, RayIoU, mIoU and mAVE."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import Dict, List, NamedTuple, Optional, Sequence, Tuple

import numpy as np

from .geometry import GridSpec
from .voxelgrid import DimMismatch

THRESHOLDS = (1.0, 2.0, 4.0)
MAVE_THRESHOLD = 2.0


class QueryRay(NamedTuple):
    origin: np.ndarray
    direction: np.ndarray


class RayHit(NamedTuple):
    cls: int
    depth: float
    voxel: Tuple[int, int, int]


class RayHits(NamedTuple):
    """Batched first hits; ``cls`` is 0 and ``depth`` is inf for misses."""

    cls: np.ndarray
    depth: np.ndarray
    voxel: np.ndarray  # (N, 3), -1 for misses


def make_ray(origin, direction) -> QueryRay:
    d = np.asarray(direction, dtype=np.float64)
    return QueryRay(np.asarray(origin, dtype=np.float64), d / np.linalg.norm(d))


def raycast_batch(grid: np.ndarray, spec: GridSpec, origins: np.ndarray, directions: np.ndarray,
                  max_range: float) -> RayHits:
    """Amanatides-Woo traversal of all rays in lockstep.

    The reported depth is the distance at which the ray enters the hit voxel
    (0 when the origin already lies in an occupied voxel). Rays starting
    outside the grid are first advanced to their entry point.
    """
    origins = np.atleast_2d(np.asarray(origins, dtype=np.float64))
    directions = np.atleast_2d(np.asarray(directions, dtype=np.float64))
    n = max(origins.shape[0], directions.shape[0])
    origins = np.broadcast_to(origins, (n, 3))
    directions = np.broadcast_to(directions, (n, 3))
    dims = np.asarray(spec.dims)
    lo = np.asarray(spec.origin)
    hi = lo + dims * spec.voxel_size
    vs = spec.voxel_size

    with np.errstate(divide="ignore", invalid="ignore"):
        inv = 1.0 / directions
        t0 = (lo - origins) * inv
        t1 = (hi - origins) * inv
    tmin = np.where(directions == 0, -np.inf, np.minimum(t0, t1))
    tmax = np.where(directions == 0, np.inf, np.maximum(t0, t1))
    # axes with zero direction: inside the slab or never
    in_slab = (origins >= lo) & (origins < hi)
    tmin = np.where((directions == 0) & ~in_slab, np.inf, tmin)
    t_enter = np.maximum(tmin.max(axis=1), 0.0)
    t_exit = np.minimum(tmax.min(axis=1), max_range)
    active = t_enter < t_exit

    entry = origins + directions * t_enter[:, None]
    cell = np.floor((entry - lo) / vs).astype(np.int64)
    cell = np.clip(cell, 0, dims - 1)
    step = np.where(directions > 0, 1, np.where(directions < 0, -1, 0)).astype(np.int64)
    next_bound = lo + (cell + (step > 0)) * vs
    with np.errstate(divide="ignore", invalid="ignore"):
        t_max = np.where(step != 0, (next_bound - origins) * inv, np.inf)
        t_delta = np.where(step != 0, vs * np.abs(inv), np.inf)

    hit_cls = np.zeros(n, dtype=np.int64)
    hit_depth = np.full(n, np.inf)
    hit_vox = np.full((n, 3), -1, dtype=np.int64)
    t_cur = t_enter.copy()
    idx = np.flatnonzero(active)
    while idx.size:
        c = cell[idx]
        lab = grid[c[:, 0], c[:, 1], c[:, 2]]
        hit = (lab != 0) & (t_cur[idx] <= max_range)
        if hit.any():
            h = idx[hit]
            hit_cls[h] = lab[hit]
            hit_depth[h] = t_cur[h]
            hit_vox[h] = c[hit]
        go = idx[~hit]
        if go.size == 0:
            break
        tm = t_max[go]
        axis = np.argmin(tm, axis=1)
        rows = np.arange(go.size)
        t_cur[go] = tm[rows, axis]
        cell[go, axis] += step[go, axis]
        t_max[go, axis] += t_delta[go, axis]
        nc = cell[go, axis]
        ok = (nc >= 0) & (nc < dims[axis]) & (t_cur[go] < t_exit[go])
        idx = go[ok]
    return RayHits(hit_cls, hit_depth, hit_vox)


def dda_raycast(grid: np.ndarray, spec: GridSpec, ray: QueryRay, max_range: float) -> Optional[RayHit]:
    hits = raycast_batch(grid, spec, ray.origin[None], ray.direction[None], max_range)
    if hits.cls[0] == 0:
        return None
    return RayHit(int(hits.cls[0]), float(hits.depth[0]), tuple(int(i) for i in hits.voxel[0]))


@dataclass
class RayConfig:
    azimuths: int = 360
    rings: int = 32
    elevation_min_deg: float = -30.0
    elevation_max_deg: float = 10.0
    origin: Tuple[float, float, float] = (0.0, 0.0, 1.5)
    max_range: float = 40.0


def generate_query_rays(cfg: RayConfig) -> Tuple[np.ndarray, np.ndarray]:
    """Lidar-like fan: ``rings`` elevations (linspace min..max) x ``azimuths`` from 0 rad.

    Returns (N, 3) origins and unit directions, ring-major.
    """
    elev = np.deg2rad(np.linspace(cfg.elevation_min_deg, cfg.elevation_max_deg, cfg.rings))
    az = 2.0 * np.pi * np.arange(cfg.azimuths) / cfg.azimuths
    ee, aa = np.meshgrid(elev, az, indexing="ij")
    dirs = np.stack([np.cos(ee) * np.cos(aa), np.cos(ee) * np.sin(aa), np.sin(ee)], axis=-1).reshape(-1, 3)
    dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
    origins = np.broadcast_to(np.asarray(cfg.origin, dtype=np.float64), dirs.shape).copy()
    return origins, dirs


@dataclass
class RayCounts:
    """Per-class TP/FP/FN at every threshold: arrays (len(thresholds), num_classes + 1)."""

    thresholds: Tuple[float, ...]
    tp: np.ndarray
    fp: np.ndarray
    fn: np.ndarray

    @classmethod
    def zeros(cls, num_classes: int, thresholds=THRESHOLDS) -> "RayCounts":
        shape = (len(thresholds), num_classes + 1)
        return cls(tuple(thresholds), np.zeros(shape, np.int64), np.zeros(shape, np.int64), np.zeros(shape, np.int64))

    def __iadd__(self, other: "RayCounts"):
        self.tp += other.tp
        self.fp += other.fp
        self.fn += other.fn
        return self

    def scores(self) -> np.ndarray:
        """Mean IoU over non-empty classes with any TP/FP/FN, per threshold."""
        out = []
        for t in range(len(self.thresholds)):
            denom = self.tp[t, 1:] + self.fp[t, 1:] + self.fn[t, 1:]
            present = denom > 0
            out.append(float(np.mean(self.tp[t, 1:][present] / denom[present])) if present.any() else float("nan"))
        return np.asarray(out)


def ray_match(pred_hits: RayHits, gt_hits: RayHits, num_classes: int, thresholds=THRESHOLDS) -> RayCounts:
    counts = RayCounts.zeros(num_classes, thresholds)
    n_cls = num_classes + 1
    with np.errstate(invalid="ignore"):
        depth_err = np.abs(pred_hits.depth - gt_hits.depth)
    for t, tau in enumerate(thresholds):
        gt_hit = gt_hits.cls != 0
        pr_hit = pred_hits.cls != 0
        with np.errstate(invalid="ignore"):
            tp = gt_hit & pr_hit & (pred_hits.cls == gt_hits.cls) & (depth_err <= tau)
        counts.tp[t] = np.bincount(gt_hits.cls[tp], minlength=n_cls)[:n_cls]
        counts.fn[t] = np.bincount(gt_hits.cls[gt_hit & ~tp], minlength=n_cls)[:n_cls]
        counts.fp[t] = np.bincount(pred_hits.cls[pr_hit & ~tp], minlength=n_cls)[:n_cls]
    return counts


def rayiou(pred: np.ndarray, gt: np.ndarray, spec: GridSpec, origins: np.ndarray, directions: np.ndarray,
           num_classes: int, max_range: float = 40.0, thresholds=THRESHOLDS):
    """Per-threshold RayIoU plus the raw counts."""
    if pred.shape != gt.shape or gt.shape != spec.dims:
        raise DimMismatch(f"pred {pred.shape} vs gt {gt.shape} vs spec {spec.dims}")
    ph = raycast_batch(pred, spec, origins, directions, max_range)
    gh = raycast_batch(gt, spec, origins, directions, max_range)
    counts = ray_match(ph, gh, num_classes, thresholds)
    return counts.scores(), counts, ph, gh


@dataclass
class FlowErrors:
    """Velocity-error sums of true-positive rays per category."""

    sums: Dict[int, float] = field(default_factory=dict)
    counts: Dict[int, int] = field(default_factory=dict)

    def add(self, other: "FlowErrors") -> None:
        for k, v in other.sums.items():
            self.sums[k] = self.sums.get(k, 0.0) + v
            self.counts[k] = self.counts.get(k, 0) + other.counts[k]

    def per_category(self) -> Dict[int, float]:
        return {k: self.sums[k] / self.counts[k] for k in sorted(self.sums) if self.counts[k]}

    def mave(self) -> Optional[float]:
        per = self.per_category()
        return float(np.mean(list(per.values()))) if per else None


def flow_errors(pred_hits: RayHits, gt_hits: RayHits, pred_flow: np.ndarray, gt_flow: np.ndarray,
                categories: Sequence[int], tau: float = MAVE_THRESHOLD) -> FlowErrors:
    """Velocity error ||v_pred - v_gt|| of TP rays at ``tau`` for the given categories."""
    with np.errstate(invalid="ignore"):
        tp = (gt_hits.cls != 0) & (pred_hits.cls == gt_hits.cls) & (np.abs(pred_hits.depth - gt_hits.depth) <= tau)
    out = FlowErrors()
    for c in categories:
        sel = tp & (gt_hits.cls == c)
        if not sel.any():
            continue
        pv = pred_hits.voxel[sel]
        gv = gt_hits.voxel[sel]
        vp = pred_flow[:, pv[:, 0], pv[:, 1], pv[:, 2]]
        vg = gt_flow[:, gv[:, 0], gv[:, 1], gv[:, 2]]
        out.sums[int(c)] = float(np.linalg.norm(vp - vg, axis=0).sum())
        out.counts[int(c)] = int(sel.sum())
    return out


def mave(pred_hits, gt_hits, pred_flow, gt_flow, categories, tau: float = MAVE_THRESHOLD):
    """(mAVE or None when there is no true positive, per-category dict)."""
    fe = flow_errors(pred_hits, gt_hits, pred_flow, gt_flow, categories, tau)
    return fe.mave(), fe.per_category()


@dataclass
class VoxelCounts:
    tp: np.ndarray
    fp: np.ndarray
    fn: np.ndarray

    @classmethod
    def zeros(cls, num_classes: int) -> "VoxelCounts":
        z = np.zeros(num_classes + 1, np.int64)
        return cls(z.copy(), z.copy(), z.copy())

    def __iadd__(self, other):
        self.tp += other.tp
        self.fp += other.fp
        self.fn += other.fn
        return self

    def per_class(self) -> np.ndarray:
        denom = self.tp + self.fp + self.fn
        with np.errstate(invalid="ignore", divide="ignore"):
            return np.where(denom > 0, self.tp / np.maximum(denom, 1), np.nan)


def voxel_counts(pred: np.ndarray, gt: np.ndarray, num_classes: int, mask: Optional[np.ndarray] = None) -> VoxelCounts:
    if pred.shape != gt.shape:
        raise DimMismatch(f"pred {pred.shape} vs gt {gt.shape}")
    p = pred.reshape(-1).astype(np.int64)
    g = gt.reshape(-1).astype(np.int64)
    if mask is not None:
        m = mask.reshape(-1).astype(bool)
        p, g = p[m], g[m]
    n = num_classes + 1
    agree = p == g
    tp = np.bincount(g[agree], minlength=n)[:n]
    fn = np.bincount(g[~agree], minlength=n)[:n]
    fp = np.bincount(p[~agree], minlength=n)[:n]
    return VoxelCounts(tp, fp, fn)


def miou(pred: np.ndarray, gt: np.ndarray, num_classes: int, mask: Optional[np.ndarray] = None):
    """Per-class voxel IoU (index 0, empty, included for reference) and the mean over the
    non-empty classes present in either grid."""
    per = voxel_counts(pred, gt, num_classes, mask).per_class()
    fg = per[1:]
    return per, float(np.nanmean(fg)) if np.any(~np.isnan(fg)) else float("nan")


@dataclass
class MetricsReport:
    rayiou_1m: float
    rayiou_2m: float
    rayiou_4m: float
    rayiou_mean: float
    miou: float
    per_class_iou: Dict[str, Optional[float]]
    mave: Optional[float]
    mave_per_category: Dict[str, float]
    counts: dict

    def to_json(self) -> str:
        def clean(v):
            if isinstance(v, float) and math.isnan(v):
                return None
            if isinstance(v, float):
                return round(v, 12)
            if isinstance(v, dict):
                return {k: clean(x) for k, x in v.items()}
            if isinstance(v, list):
                return [clean(x) for x in v]
            return v

        doc = {
            "rayiou_1m": clean(self.rayiou_1m),
            "rayiou_2m": clean(self.rayiou_2m),
            "rayiou_4m": clean(self.rayiou_4m),
            "rayiou_mean": clean(self.rayiou_mean),
            "miou": clean(self.miou),
            "per_class_iou": clean(self.per_class_iou),
            "mave": clean(self.mave),
            "mave_absent": self.mave is None,
            "mave_per_category": clean(self.mave_per_category),
            "counts": clean(self.counts),
        }
        return json.dumps(doc, indent=2) + "\n"


def build_report(ray_counts: RayCounts, vox: VoxelCounts, flow: Optional[FlowErrors]) -> MetricsReport:
    scores = ray_counts.scores()
    per = vox.per_class()
    fg = per[1:]
    m = float(np.nanmean(fg)) if np.any(~np.isnan(fg)) else float("nan")
    counts = {
        "rays": {f"{tau:g}m": {"tp": ray_counts.tp[t].tolist(), "fp": ray_counts.fp[t].tolist(),
                              "fn": ray_counts.fn[t].tolist()} for t, tau in enumerate(ray_counts.thresholds)},
        "voxels": {"tp": vox.tp.tolist(), "fp": vox.fp.tolist(), "fn": vox.fn.tolist()},
        "mave_tp": {str(k): v for k, v in sorted((flow.counts if flow else {}).items())},
    }
    mv = flow.mave() if flow is not None else None
    per_cat = {str(k): v for k, v in (flow.per_category() if flow else {}).items()}
    return MetricsReport(
        rayiou_1m=float(scores[0]), rayiou_2m=float(scores[1]), rayiou_4m=float(scores[2]),
        rayiou_mean=float(np.mean(scores)), miou=m,
        per_class_iou={str(c): (None if np.isnan(v) else float(v)) for c, v in enumerate(per)},
        mave=mv, mave_per_category=per_cat, counts=counts,
    )
