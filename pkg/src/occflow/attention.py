"""Single-head deformable attention and its occupancy-aware variants.

Value maps are channel-first arrays ``(C, R, S)``. Sampling locations are
given in index space of the map: ``(row, col)`` with cell ``i`` centered at
``i``. For BEV maps ``(C, X, Y)`` that is ``(x_index, y_index)``; an image
pixel ``(u, v)`` sits at ``(v - 0.5, u - 0.5)``.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import List, NamedTuple, Optional, Sequence

import numpy as np
from scipy.special import ndtr, ndtri

from .geometry import Camera, GridSpec, project_points
from .lift_splat import DepthDistribution
from .voxelgrid import DimMismatch

DEFAULT_SIGMA = 2.0
EVAL_THRESHOLD = 0.5


class OutOfImage(ValueError):
    pass


@dataclass
class DeformableParams:
    """Offset and weight predictors of one attention call (linear maps)."""

    offset_weight: np.ndarray  # (2P, D)
    offset_bias: np.ndarray  # (2P,)
    logit_weight: np.ndarray  # (P, D)
    logit_bias: np.ndarray  # (P,)

    @property
    def num_points(self) -> int:
        return self.logit_bias.shape[0]

    @property
    def cond_dim(self) -> int:
        return self.logit_weight.shape[1]

    @classmethod
    def init(cls, num_points: int, cond_dim: int, rng, offset_scale: float = 1.0) -> "DeformableParams":
        # kernel points start on a ring of radius offset_scale, perturbed by the conditioning
        angles = 2 * np.pi * np.arange(num_points) / num_points
        ring = offset_scale * np.stack([np.cos(angles), np.sin(angles)], axis=1).reshape(-1)
        s = 1.0 / np.sqrt(cond_dim)
        return cls(
            offset_weight=0.1 * s * rng.standard_normal((2 * num_points, cond_dim)),
            offset_bias=ring,
            logit_weight=s * rng.standard_normal((num_points, cond_dim)),
            logit_bias=np.zeros(num_points),
        )

    @classmethod
    def frozen(cls, num_points: int, cond_dim: int, offsets=None, logits=None) -> "DeformableParams":
        """Predictors that ignore the conditioning vector."""
        off = np.zeros(2 * num_points) if offsets is None else np.asarray(offsets, float).reshape(-1)
        lg = np.zeros(num_points) if logits is None else np.asarray(logits, float)
        return cls(np.zeros((2 * num_points, cond_dim)), off, np.zeros((num_points, cond_dim)), lg)


def _softmax(z: np.ndarray) -> np.ndarray:
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def predict_kernel(params: DeformableParams, cond: np.ndarray):
    """(Q, D) conditioning -> offsets (Q, P, 2) and softmax weights (Q, P)."""
    if cond.shape[-1] != params.cond_dim:
        raise DimMismatch(f"conditioning width {cond.shape[-1]} vs {params.cond_dim}")
    offsets = (cond @ params.offset_weight.T + params.offset_bias).reshape(cond.shape[0], -1, 2)
    weights = _softmax(cond @ params.logit_weight.T + params.logit_bias)
    return offsets, weights


def bilinear_sample(value_map: np.ndarray, rows: np.ndarray, cols: np.ndarray) -> np.ndarray:
    """Sample (C, R, S) at index-space locations, clamping to the border. Returns (..., C)."""
    _, nr, ns = value_map.shape
    r = np.clip(rows, 0.0, nr - 1)
    s = np.clip(cols, 0.0, ns - 1)
    r0 = np.floor(r).astype(np.int64)
    s0 = np.floor(s).astype(np.int64)
    r1 = np.minimum(r0 + 1, nr - 1)
    s1 = np.minimum(s0 + 1, ns - 1)
    fr = (r - r0)[..., None]
    fs = (s - s0)[..., None]
    vm = np.moveaxis(value_map, 0, -1)
    return ((vm[r0, s0] * (1 - fs) + vm[r0, s1] * fs) * (1 - fr)
            + (vm[r1, s0] * (1 - fs) + vm[r1, s1] * fs) * fr)


def deformable_attend_batch(value_map: np.ndarray, anchors: np.ndarray, cond: np.ndarray,
                            params: DeformableParams) -> np.ndarray:
    """Sum over kernel points of softmax weight times the bilinear sample; (Q, C)."""
    offsets, weights = predict_kernel(params, cond)
    loc = anchors[:, None, :] + offsets
    samples = bilinear_sample(value_map, loc[..., 0], loc[..., 1])  # (Q, P, C)
    return np.einsum("qp,qpc->qc", weights, samples)


def deformable_attend(query: np.ndarray, value_map: np.ndarray, anchor, params: DeformableParams,
                      conditioning: Optional[np.ndarray] = None) -> np.ndarray:
    """Single-query form; the query doubles as conditioning unless one is given."""
    cond = query if conditioning is None else conditioning
    out = deformable_attend_batch(value_map, np.asarray(anchor, float)[None], np.asarray(cond, float)[None], params)
    return out[0]


def _bev_queries(b: np.ndarray) -> np.ndarray:
    c, x, y = b.shape
    return b.reshape(c, x * y).T


def _bev_anchors(x: int, y: int) -> np.ndarray:
    gx, gy = np.meshgrid(np.arange(x, dtype=float), np.arange(y, dtype=float), indexing="ij")
    return np.stack([gx.ravel(), gy.ravel()], axis=1)


def oa_tsa(b_curr: np.ndarray, b_hist: np.ndarray, w_bar: np.ndarray, params: DeformableParams,
           reweight: bool = True) -> np.ndarray:
    """Temporal self-attention over {current, aligned history} reweighted by z-averaged occupancy.

    The kernel of each map is conditioned on ``[w_bar, b[:, x, y]]``. With
    ``reweight=False`` the occupancy prefactor and conditioning are replaced by
    ones (plain temporal self-attention).
    """
    if b_curr.shape != b_hist.shape or b_curr.shape[1:] != w_bar.shape:
        raise DimMismatch(f"current {b_curr.shape}, history {b_hist.shape}, weights {w_bar.shape}")
    c, x, y = b_curr.shape
    wb = w_bar.reshape(-1) if reweight else np.ones(x * y)
    anchors = _bev_anchors(x, y)
    out = np.zeros((x * y, c))
    for b in (b_curr, b_hist):
        cond = np.concatenate([wb[:, None], _bev_queries(b)], axis=1)
        out += wb[:, None] * deformable_attend_batch(b, anchors, cond, params)
    return out.T.reshape(c, x, y)


def compute_beta(d_r, d_r_prime, delta_d, sigma=DEFAULT_SIGMA):
    """Depth-agreement weight exp(-m^2/(2 sigma^2)), m the distance of ``d_r`` to the
    nearer of ``d_r_prime -/+ delta_d``."""
    d_r = np.asarray(d_r, dtype=np.float64)
    m = np.minimum(np.abs(d_r - (d_r_prime - delta_d)), np.abs(d_r - (d_r_prime + delta_d)))
    out = np.exp(-(m * m) / (2.0 * sigma * sigma))
    return float(out) if out.ndim == 0 else out


@dataclass
class SamplingGate:
    """Threshold source for reference-point sampling.

    ``train``: thresholds from a normal(mean, std) truncated to [low, high],
    drawn by inverse CDF from a counter-based (Philox) stream, one draw per
    lattice point so evaluation order never changes the draws.
    ``eval``: fixed threshold 0.5. ``off``: every point is selected.
    """

    mode: str = "eval"
    mean: float = 0.5
    std: float = 1.0
    low: float = 0.5
    high: float = 1.0
    seed: int = 0

    def __post_init__(self):
        if self.mode not in ("train", "eval", "off"):
            raise ValueError(f"unknown gate mode {self.mode!r}")

    def thresholds(self, shape, stream: int = 0) -> np.ndarray:
        if self.mode == "eval":
            return np.full(shape, EVAL_THRESHOLD)
        if self.mode == "off":
            return np.full(shape, -np.inf)
        bitgen = np.random.Philox(key=[self.seed & (2**64 - 1), stream & (2**64 - 1)])
        u = np.random.Generator(bitgen).random(int(np.prod(shape))).reshape(shape)
        a = ndtr((self.low - self.mean) / self.std)
        b = ndtr((self.high - self.mean) / self.std)
        t = self.mean + self.std * ndtri(a + u * (b - a))
        return np.clip(t, self.low, np.nextafter(self.high, -np.inf))

    def select(self, weights: np.ndarray, stream: int = 0) -> np.ndarray:
        return weights > self.thresholds(weights.shape, stream)


@dataclass
class ReferenceColumn:
    position: tuple  # (x, y) meters
    heights: np.ndarray  # strictly increasing z, meters
    weights: np.ndarray  # occupancy weight per height

    def __post_init__(self):
        self.heights = np.asarray(self.heights, float)
        self.weights = np.asarray(self.weights, float)
        if np.any(np.diff(self.heights) <= 0):
            raise ValueError("reference heights must be strictly increasing")
        if self.weights.shape != self.heights.shape:
            raise DimMismatch("one weight per reference height")


def sample_reference_points(column: ReferenceColumn, gate: SamplingGate, stream: int = 0) -> np.ndarray:
    """Indices of the selected reference points (strict ``w > u``)."""
    return np.flatnonzero(gate.select(column.weights, stream))


def reference_levels(z: int, n_ref: int) -> np.ndarray:
    """z indices of the reference heights: every cell when n_ref >= z, else an even stride."""
    if n_ref >= z:
        return np.arange(z)
    stride = z // n_ref
    return (np.arange(n_ref) * stride + stride // 2).astype(np.int64)


def decode_object_depth(depth: DepthDistribution, pixel) -> float:
    u, v = pixel
    h, w = depth.image_size
    if not (0 <= u < w and 0 <= v < h):
        raise OutOfImage(f"pixel {pixel} outside {w}x{h} image")
    return float(decode_depth_at(depth, np.array([u]), np.array([v]))[0])


def decode_depth_at(depth: DepthDistribution, u: np.ndarray, v: np.ndarray) -> np.ndarray:
    """Argmax-bin center depth at the pixels containing (u, v); lowest bin wins ties."""
    h, w = depth.image_size
    col = np.clip(np.floor(u).astype(np.int64), 0, w - 1)
    row = np.clip(np.floor(v).astype(np.int64), 0, h - 1)
    modal = np.argmax(depth.probs[:, row, col], axis=0)
    return depth.bin_start + (modal + 0.5) * depth.bin_step


class ColumnPoints(NamedTuple):
    positions: np.ndarray  # (Q, H, 3)
    weights: np.ndarray  # (Q, H)
    levels: np.ndarray  # (H,) z indices


def query_columns(spec: GridSpec, w: np.ndarray, n_ref: int) -> ColumnPoints:
    levels = reference_levels(spec.dims[2], n_ref)
    centers = spec.cell_centers()[:, :, levels, :]
    x, y = spec.dims[:2]
    return ColumnPoints(centers.reshape(x * y, len(levels), 3), w[:, :, levels].reshape(x * y, len(levels)), levels)


def oa_sca(b: np.ndarray, image_feats: Sequence[np.ndarray], depths: Sequence[DepthDistribution],
           w: np.ndarray, cameras: Sequence[Camera], spec: GridSpec, gate: SamplingGate,
           params: DeformableParams, sigma: float = DEFAULT_SIGMA, n_ref: int = 8,
           use_occupancy: bool = True, use_beta: bool = True, stream: int = 0) -> np.ndarray:
    """Occupancy-aware spatial cross-attention; returns the (C, X, Y) update.

    Each reference point x of a query column is kept when ``w_x > u_x`` and
    contributes ``Omega_x * F_d`` averaged over the cameras that see it, with
    ``Omega_x = w_x * beta_x``. ``use_occupancy=False`` drops the ``w_x`` factor
    and ``use_beta=False`` forces beta to one.
    """
    c, x, y = b.shape
    if (x, y) != spec.dims[:2] or w.shape != spec.dims:
        raise DimMismatch(f"BEV {b.shape}, weights {w.shape}, grid {spec.dims}")
    cols = query_columns(spec, w, n_ref)
    q, nh = cols.weights.shape
    selected = gate.select(cols.weights, stream).reshape(-1)
    pts = cols.positions.reshape(-1, 3)
    wx = cols.weights.reshape(-1)
    queries = _bev_queries(b)
    point_query = np.repeat(np.arange(q), nh)

    acc = np.zeros((q * nh, c))
    seen = np.zeros(q * nh)
    for feat, depth, cam in zip(image_feats, depths, cameras):
        u, v, d, valid = project_points(cam, pts)
        valid &= selected
        idx = np.flatnonzero(valid)
        if idx.size == 0:
            continue
        omega = wx[idx] if use_occupancy else np.ones(idx.size)
        if use_beta:
            d_obj = decode_depth_at(depth, u[idx], v[idx])
            omega = omega * compute_beta(d[idx], d_obj, depth.bin_step, sigma)
        anchors = np.stack([v[idx] - 0.5, u[idx] - 0.5], axis=1)
        sampled = deformable_attend_batch(feat, anchors, queries[point_query[idx]], params)
        acc[idx] += omega[:, None] * sampled
        seen[idx] += 1.0
    per_point = acc / np.maximum(seen, 1.0)[:, None]
    out = per_point.reshape(q, nh, c).sum(axis=1)
    return out.T.reshape(c, x, y)


def vanilla_sca(b: np.ndarray, image_feats: Sequence[np.ndarray], cameras: Sequence[Camera],
                spec: GridSpec, params: DeformableParams, n_ref: int = 8) -> np.ndarray:
    """Plain spatial cross-attention: every reference point, unit weights.

    Coded separately from :func:`oa_sca` (homogeneous projection through the
    3x4 camera matrix, per-height accumulation) so the two can check each other.
    """
    c, x, y = b.shape
    levels = reference_levels(spec.dims[2], n_ref)
    centers = spec.cell_centers()
    queries = _bev_queries(b)
    out = np.zeros((x * y, c))
    for zi in levels:
        pts_h = np.concatenate([centers[:, :, zi, :].reshape(-1, 3), np.ones((x * y, 1))], axis=1)
        total = np.zeros((x * y, c))
        hits = np.zeros(x * y)
        for feat, cam in zip(image_feats, cameras):
            proj = pts_h @ cam.projection_matrix().T
            depth = proj[:, 2]
            ok = depth > 1e-6
            uu = np.full(x * y, -1.0)
            vv = np.full(x * y, -1.0)
            uu[ok] = proj[ok, 0] / depth[ok]
            vv[ok] = proj[ok, 1] / depth[ok]
            hgt, wid = cam.image_size
            ok &= (uu >= 0) & (uu < wid) & (vv >= 0) & (vv < hgt)
            if not ok.any():
                continue
            anchors = np.stack([vv[ok] - 0.5, uu[ok] - 0.5], axis=1)
            total[ok] += deformable_attend_batch(feat, anchors, queries[ok], params)
            hits[ok] += 1.0
        seen = hits > 0
        out[seen] += total[seen] / hits[seen, None]
    return out.T.reshape(c, x, y)
