"""Lift image features along depth bins and sum-pool them into voxels."""

from __future__ import annotations

from dataclasses import dataclass
from typing import List, NamedTuple, Sequence

import numpy as np

from .geometry import Camera, GridSpec
from .voxelgrid import DimMismatch, avg_pool2x

DEFAULT_BIN_START = 1.0
DEFAULT_BIN_STEP = 0.5
DEFAULT_NUM_BINS = 88


class IndivisibleDims(ValueError):
    pass


@dataclass
class DepthDistribution:
    """Per-pixel categorical distribution over uniform depth bins, ``probs`` is (D, H, W).

    Bin ``b`` covers ``[bin_start + b*step, bin_start + (b+1)*step)``.
    """

    probs: np.ndarray
    bin_start: float = DEFAULT_BIN_START
    bin_step: float = DEFAULT_BIN_STEP

    def __post_init__(self):
        self.probs = np.asarray(self.probs, dtype=np.float64)
        if self.probs.ndim != 3:
            raise ValueError(f"depth probs must be (D, H, W), got {self.probs.shape}")
        if self.bin_step <= 0:
            raise ValueError("bin_step must be positive")

    @property
    def num_bins(self) -> int:
        return self.probs.shape[0]

    @property
    def image_size(self):
        return self.probs.shape[1:]

    def bin_centers(self) -> np.ndarray:
        return self.bin_start + (np.arange(self.num_bins) + 0.5) * self.bin_step

    def bin_of(self, depth) -> np.ndarray:
        b = np.floor((np.asarray(depth) - self.bin_start) / self.bin_step).astype(np.int64)
        return np.clip(b, 0, self.num_bins - 1)

    def validate(self, tol: float = 1e-6) -> None:
        if self.probs.min() < 0:
            raise ValueError("negative depth probability")
        if not np.allclose(self.probs.sum(axis=0), 1.0, atol=tol, rtol=0):
            raise ValueError("depth probabilities do not sum to 1")

    @classmethod
    def uniform(cls, num_bins, image_size, bin_start=DEFAULT_BIN_START, bin_step=DEFAULT_BIN_STEP):
        h, w = image_size
        return cls(np.full((num_bins, h, w), 1.0 / num_bins), bin_start, bin_step)


class LiftedPoints(NamedTuple):
    positions: np.ndarray  # (N, 3) ego frame
    payloads: np.ndarray  # (N, C)


def lift(feat: np.ndarray, depth: DepthDistribution, camera: Camera, drop_zero: bool = False) -> LiftedPoints:
    """Back-project every (bin, pixel) pair to the bin-center depth.

    Points are ordered bin-major, then row, then column. With ``drop_zero``
    the points whose bin probability is exactly zero are omitted (their payload
    would be zero anyway).
    """
    c, h, w = feat.shape
    if depth.image_size != (h, w):
        raise DimMismatch(f"feature {feat.shape[1:]} vs depth {depth.image_size}")
    centers = depth.bin_centers()
    vv, uu = np.meshgrid(np.arange(h) + 0.5, np.arange(w) + 0.5, indexing="ij")
    rays = np.stack([uu, vv, np.ones_like(uu)], axis=-1).reshape(-1, 3) @ np.linalg.inv(camera.intrinsics).T
    # rays have camera z == 1, so scaling by the bin depth gives camera-frame points
    probs = depth.probs.reshape(depth.num_bins, -1)
    if drop_zero:
        b_idx, p_idx = np.nonzero(probs)
    else:
        b_idx, p_idx = np.divmod(np.arange(probs.size), h * w)
    pts_cam = rays[p_idx] * centers[b_idx, None]
    positions = camera.extrinsics.inverse().apply(pts_cam)
    payloads = feat.reshape(c, -1)[:, p_idx].T * probs[b_idx, p_idx][:, None]
    return LiftedPoints(positions, payloads)


def splat(positions: np.ndarray, payloads: np.ndarray, spec: GridSpec) -> np.ndarray:
    """Sum-pool payloads into the voxels containing their positions; (C, X, Y, Z)."""
    c = payloads.shape[1]
    idx, inside = spec.points_to_indices(positions)
    lin = spec.linear_index(idx[inside])
    pay = payloads[inside]
    out = np.empty((c, spec.num_voxels))
    for ch in range(c):
        out[ch] = np.bincount(lin, weights=pay[:, ch], minlength=spec.num_voxels)
    return out.reshape((c,) + spec.dims)


def lift_splat(feats: Sequence[np.ndarray], depths: Sequence[DepthDistribution],
               cameras: Sequence[Camera], spec: GridSpec) -> np.ndarray:
    """Coarse voxel feature from all cameras, accumulated in camera order."""
    grid = None
    for feat, depth, cam in zip(feats, depths, cameras):
        pts = lift(feat, depth, cam, drop_zero=True)
        g = splat(pts.positions, pts.payloads, spec)
        grid = g if grid is None else grid + g
    return grid


def coarse_pyramid(v: np.ndarray, stages: int) -> List[np.ndarray]:
    """Multi-resolution grids, coarsest first; entry i has dims / 2**(stages-1-i)."""
    f = 2 ** (stages - 1)
    if any(d % f for d in v.shape[1:]):
        raise IndivisibleDims(f"dims {v.shape[1:]} not divisible by {f}")
    levels = [v]
    for _ in range(stages - 1):
        levels.append(avg_pool2x(levels[-1]))
    return levels[::-1]
