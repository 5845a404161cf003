"""Sparse long/short-stream temporal fusion over FIFO memory banks."""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass, field
from typing import Deque, List, NamedTuple, Optional, Sequence

import numpy as np

from .geometry import GridSpec, Pose, relative_pose
from .voxelgrid import DimMismatch

DEFAULT_HISTORY = (16, 8, 4)


class KTooLarge(ValueError):
    pass


class WidthMismatch(ValueError):
    pass


@dataclass
class WeightEmbed:
    """Linear embedding of a scalar occupancy weight into C_s channels."""

    weight: np.ndarray  # (C_s,)
    bias: np.ndarray  # (C_s,)

    @property
    def dim(self) -> int:
        return self.weight.shape[0]

    def __call__(self, w: np.ndarray) -> np.ndarray:
        return self.weight[:, None] * w[None, :] + self.bias[:, None]

    @classmethod
    def init(cls, dim: int, rng) -> "WeightEmbed":
        return cls(rng.standard_normal(dim), 0.1 * rng.standard_normal(dim))


@dataclass
class SeedSet:
    indices: np.ndarray  # (N,) linear voxel indices
    features: np.ndarray  # (C, N)
    positions: np.ndarray  # (3, N) ego-frame cell centers
    weights: np.ndarray  # (N,)
    weight_embed: np.ndarray  # (C_s, N)

    @property
    def count(self) -> int:
        return self.indices.shape[0]


def topk_sample(v: np.ndarray, w: np.ndarray, k: int, region: str, spec: GridSpec,
                embed: WeightEmbed) -> SeedSet:
    """k highest-weight (``non-empty``) or lowest-weight (``empty``) voxels, ties by index."""
    if v.shape[1:] != w.shape or w.shape != spec.dims:
        raise DimMismatch(f"grid {v.shape}, weights {w.shape}, spec {spec.dims}")
    flat = w.reshape(-1)
    if k > flat.size:
        raise KTooLarge(f"k={k} exceeds {flat.size} voxels")
    if region == "non-empty":
        order = np.argsort(-flat, kind="stable")
    elif region == "empty":
        order = np.argsort(flat, kind="stable")
    else:
        raise ValueError(f"unknown region {region!r}")
    idx = order[:k]
    ix, iy, iz = np.unravel_index(idx, spec.dims)
    centers = spec.voxel_to_world(np.stack([ix, iy, iz], axis=1))
    feats = v.reshape(v.shape[0], -1)[:, idx]
    return SeedSet(idx, feats, centers.T, flat[idx], embed(flat[idx]))


def trilinear_sample(grid: np.ndarray, spec: GridSpec, points: np.ndarray) -> np.ndarray:
    """Sample (C, X, Y, Z) at (N, 3) ego positions; zero outside the grid bounds.

    Inside the bounds but beyond the outermost cell centers, values clamp to
    the border cells.
    """
    c = grid.shape[0]
    rel = (points - np.asarray(spec.origin)) / spec.voxel_size
    dims = np.asarray(spec.dims)
    inside = np.all((rel >= 0) & (rel < dims), axis=1)
    out = np.zeros((c, points.shape[0]))
    if not inside.any():
        return out
    f = np.clip(rel[inside] - 0.5, 0.0, dims - 1)
    i0 = np.floor(f).astype(np.int64)
    i1 = np.minimum(i0 + 1, dims - 1)
    t = f - i0
    acc = np.zeros((c, i0.shape[0]))
    for cx in (0, 1):
        wx = t[:, 0] if cx else 1 - t[:, 0]
        ix = i1[:, 0] if cx else i0[:, 0]
        for cy in (0, 1):
            wy = t[:, 1] if cy else 1 - t[:, 1]
            iy = i1[:, 1] if cy else i0[:, 1]
            for cz in (0, 1):
                wz = t[:, 2] if cz else 1 - t[:, 2]
                iz = i1[:, 2] if cz else i0[:, 2]
                acc += grid[:, ix, iy, iz] * (wx * wy * wz)
    out[:, inside] = acc
    return out


class BankEntry(NamedTuple):
    grid: np.ndarray  # (C, X, Y, Z) snapshot of the stage output
    pose: Pose  # ego-to-world at the snapshot frame
    timestamp: float


@dataclass
class MemoryBank:
    capacity: int
    entries: Deque[BankEntry] = field(default_factory=deque)

    def __len__(self) -> int:
        return len(self.entries)

    def push(self, entry: BankEntry) -> None:
        if self.entries and entry.timestamp <= self.entries[-1].timestamp:
            raise ValueError("bank timestamps must strictly increase")
        self.entries.append(entry)
        while len(self.entries) > self.capacity:
            self.entries.popleft()

    def recent(self, k: int) -> List[BankEntry]:
        """Up to k entries, most recent first."""
        return list(reversed(self.entries))[:k]


def bank_update(bank: MemoryBank, entry: BankEntry) -> MemoryBank:
    bank.push(entry)
    return bank


def retrieve_history(seeds: SeedSet, bank: MemoryBank, pose_t: Pose, spec: GridSpec, k: int) -> List[np.ndarray]:
    """History features of the seeds for frames t-1 .. t-k, zero-padded; each (C, N)."""
    c = seeds.features.shape[0]
    out = []
    points = seeds.positions.T
    for entry in bank.recent(k):
        rel = relative_pose(pose_t, entry.pose)
        out.append(trilinear_sample(entry.grid, spec, rel.apply(points)))
    while len(out) < k:
        out.append(np.zeros((c, seeds.count)))
    return out


@dataclass
class FusionMlp:
    """Linear map over [current, t-1 .. t-k, weight embedding] channels."""

    weight: np.ndarray  # (C, C*(k+1) + C_s)
    bias: np.ndarray  # (C,)
    k: int
    embed_dim: int

    def __post_init__(self):
        c = self.weight.shape[0]
        if self.weight.shape[1] != c * (self.k + 1) + self.embed_dim:
            raise WidthMismatch(f"fusion weight {self.weight.shape} for k={self.k}, C_s={self.embed_dim}")

    @classmethod
    def init(cls, channels: int, k: int, embed_dim: int, rng, scale: float = 1.0) -> "FusionMlp":
        width = channels * (k + 1) + embed_dim
        w = scale * rng.standard_normal((channels, width)) / np.sqrt(width)
        return cls(w, np.zeros(channels), k, embed_dim)

    @classmethod
    def zeros(cls, channels: int, k: int, embed_dim: int) -> "FusionMlp":
        return cls(np.zeros((channels, channels * (k + 1) + embed_dim)), np.zeros(channels), k, embed_dim)


def fuse_seeds(current: SeedSet, history: Sequence[np.ndarray], mlp: FusionMlp) -> np.ndarray:
    if len(history) != mlp.k:
        raise WidthMismatch(f"got {len(history)} history frames, fusion expects {mlp.k}")
    stacked = np.concatenate([current.features, *history, current.weight_embed], axis=0)
    if stacked.shape[0] != mlp.weight.shape[1]:
        raise WidthMismatch(f"concatenated width {stacked.shape[0]} vs fusion input {mlp.weight.shape[1]}")
    return mlp.weight @ stacked + mlp.bias[:, None]


def scatter_add(v: np.ndarray, indices: np.ndarray, fused: np.ndarray) -> np.ndarray:
    out = v.copy()
    flat = out.reshape(v.shape[0], -1)
    for ch in range(v.shape[0]):
        np.add.at(flat[ch], indices, fused[ch])
    return out


@dataclass
class StreamConfig:
    long_frames: int
    long_fraction: float = 0.10
    short_fraction: float = 0.05

    @property
    def short_frames(self) -> int:
        return self.long_frames // 2

    def seed_counts(self, num_voxels: int):
        n_long = max(1, int(round(self.long_fraction * num_voxels))) if self.long_fraction > 0 else 0
        n_short = max(1, int(round(self.short_fraction * num_voxels))) if self.short_fraction > 0 else 0
        return min(n_long, num_voxels), min(n_short, num_voxels)


@dataclass
class StreamParams:
    mlp: FusionMlp
    embed: WeightEmbed


def run_stream(v: np.ndarray, w: np.ndarray, bank: MemoryBank, pose_t: Pose, spec: GridSpec,
               count: int, region: str, params: StreamParams):
    seeds = topk_sample(v, w, count, region, spec, params.embed)
    history = retrieve_history(seeds, bank, pose_t, spec, params.mlp.k)
    return seeds.indices, fuse_seeds(seeds, history, params.mlp)


def sparse_temporal_fusion(v: np.ndarray, w: np.ndarray, bank: MemoryBank, pose_t: Pose, spec: GridSpec,
                           cfg: StreamConfig, long: Optional[StreamParams], short: Optional[StreamParams]) -> np.ndarray:
    """Both streams read the current (pre-fusion) grid and scatter-add into it.

    A stream given as ``None`` is skipped. The caller appends the result to the
    bank once the frame is finished.
    """
    n_long, n_short = cfg.seed_counts(spec.num_voxels)
    out = v
    for params, count, region in ((long, n_long, "non-empty"), (short, n_short, "empty")):
        if params is None or count == 0:
            continue
        idx, fused = run_stream(v, w, bank, pose_t, spec, count, region, params)
        out = scatter_add(out, idx, fused)
    return out
