"""Dense grid containers and the BEV <-> voxel conversions.

Grids are plain float64 numpy arrays with a fixed axis order:

==================  ===============
feature grid        (C, X, Y, Z)
BEV feature         (C, X, Y)
occupancy weights   (X, Y, Z), values in [0, 1]
semantic grid       (X, Y, Z), uint8 class ids, 0 = empty
flow grid           (2, X, Y, Z), planar (vx, vy) in m/s
==================  ===============
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np


class DimMismatch(ValueError):
    pass


def check_finite(a: np.ndarray, what: str = "grid") -> None:
    if not np.all(np.isfinite(a)):
        raise ValueError(f"{what} contains non-finite values")


def check_weights(w: np.ndarray) -> None:
    if w.ndim != 3:
        raise DimMismatch(f"occupancy weights must be (X, Y, Z), got {w.shape}")
    if w.size and (w.min() < 0.0 or w.max() > 1.0):
        raise ValueError("occupancy weights must lie in [0, 1]")


def z_average(w: np.ndarray) -> np.ndarray:
    return w.mean(axis=2)


def bev_to_voxel(b: np.ndarray, w: np.ndarray) -> np.ndarray:
    if b.shape[1:] != w.shape[:2]:
        raise DimMismatch(f"BEV {b.shape} vs weights {w.shape}")
    return b[:, :, :, None] * w[None, :, :, :]


@dataclass
class BevCollapse:
    """Learned height collapse: (C*Z) -> C linear map with bias.

    Column ``c * Z + z`` of ``weight`` multiplies ``v[c, :, :, z]``.
    """

    weight: np.ndarray  # (C, C*Z)
    bias: np.ndarray  # (C,)
    occupancy_weighted: bool = False

    @property
    def height(self) -> int:
        return self.weight.shape[1] // self.weight.shape[0]

    @classmethod
    def slice_mean(cls, channels: int, height: int, noise: float = 0.0, rng=None) -> "BevCollapse":
        weight = np.zeros((channels, channels * height))
        for c in range(channels):
            weight[c, c * height:(c + 1) * height] = 1.0 / height
        if noise:
            weight += noise * rng.standard_normal(weight.shape) / np.sqrt(height)
        return cls(weight, np.zeros(channels))


def voxel_to_bev(v: np.ndarray, collapse: BevCollapse, w: Optional[np.ndarray] = None) -> np.ndarray:
    """Fold the z axis into channels and project back to C channels.

    With ``collapse.occupancy_weighted`` each slice is first scaled by its
    occupancy weight, normalized per column (requires ``w``).
    """
    c, x, y, z = v.shape
    if collapse.weight.shape != (c, c * z):
        raise DimMismatch(f"collapse weight {collapse.weight.shape} for grid {v.shape}")
    if collapse.occupancy_weighted:
        if w is None:
            raise ValueError("occupancy-weighted collapse needs weights")
        norm = w.sum(axis=2, keepdims=True)
        scale = np.where(norm > 0, w * z / np.where(norm > 0, norm, 1.0), 1.0)
        v = v * scale[None]
    folded = v.transpose(1, 2, 0, 3).reshape(x, y, c * z)
    out = folded @ collapse.weight.T + collapse.bias
    return out.transpose(2, 0, 1)


def _upsample_axis_linear(a: np.ndarray, axis: int) -> np.ndarray:
    # cell-center aligned: output j samples input coordinate j/2 - 1/4, clamped at borders
    n = a.shape[axis]
    src = np.arange(2 * n) / 2.0 - 0.25
    src = np.clip(src, 0.0, n - 1)
    i0 = np.floor(src).astype(int)
    i1 = np.minimum(i0 + 1, n - 1)
    frac = src - i0
    shape = [1] * a.ndim
    shape[axis] = 2 * n
    frac = frac.reshape(shape)
    return np.take(a, i0, axis=axis) * (1.0 - frac) + np.take(a, i1, axis=axis) * frac


def upsample2x_grid(v: np.ndarray) -> np.ndarray:
    """Trilinear 2x upsampling of a (C, X, Y, Z) grid."""
    out = v
    for axis in (1, 2, 3):
        out = _upsample_axis_linear(out, axis)
    return out


def upsample2x_weights(w: np.ndarray) -> np.ndarray:
    """Nearest-neighbor 2x replication of (X, Y, Z) weights."""
    return w.repeat(2, axis=0).repeat(2, axis=1).repeat(2, axis=2)


def avg_pool2x(v: np.ndarray) -> np.ndarray:
    c, x, y, z = v.shape
    if x % 2 or y % 2 or z % 2:
        raise DimMismatch(f"cannot pool dims {v.shape[1:]}")
    return v.reshape(c, x // 2, 2, y // 2, 2, z // 2, 2).mean(axis=(2, 4, 6))


def layer_norm(b: np.ndarray, eps: float = 1e-5) -> np.ndarray:
    """Normalize a (C, X, Y) map over channels at every position."""
    mu = b.mean(axis=0, keepdims=True)
    var = b.var(axis=0, keepdims=True)
    return (b - mu) / np.sqrt(var + eps)
