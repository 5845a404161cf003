"""Rigid poses, pinhole cameras and the voxel lattice.

Frame conventions used throughout the package:

* ego frame: x forward, y left, z up (meters);
* camera frame: x right, y down, z along the optical axis;
* grid origin is the min corner of voxel (0, 0, 0).

A ``Pose`` maps points from its source frame to its target frame,
``p_target = R @ p_source + t``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import NamedTuple, Optional, Sequence, Tuple

import numpy as np

ORTHO_TOL = 1e-9
MIN_DEPTH = 1e-6


class BehindCamera(ValueError):
    """Raised when a point has non-positive depth in the camera frame."""


def _frozen(a, shape) -> np.ndarray:
    arr = np.array(a, dtype=np.float64).reshape(shape)
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True)
class Pose:
    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        r = _frozen(self.rotation, (3, 3))
        t = _frozen(self.translation, (3,))
        if not np.allclose(r @ r.T, np.eye(3), atol=ORTHO_TOL, rtol=0.0):
            raise ValueError("rotation is not orthonormal")
        if abs(np.linalg.det(r) - 1.0) > ORTHO_TOL:
            raise ValueError("rotation must have determinant +1")
        object.__setattr__(self, "rotation", r)
        object.__setattr__(self, "translation", t)

    @classmethod
    def identity(cls) -> "Pose":
        return cls(np.eye(3), np.zeros(3))

    @classmethod
    def from_yaw(cls, yaw: float, translation: Sequence[float] = (0.0, 0.0, 0.0)) -> "Pose":
        return cls(rot_z(yaw), translation)

    @classmethod
    def from_matrix(cls, m) -> "Pose":
        m = np.asarray(m, dtype=np.float64)
        return cls(m[:3, :3], m[:3, 3])

    def matrix(self) -> np.ndarray:
        m = np.eye(4)
        m[:3, :3] = self.rotation
        m[:3, 3] = self.translation
        return m

    def apply(self, points) -> np.ndarray:
        """Transform points of shape (..., 3)."""
        p = np.asarray(points, dtype=np.float64)
        return p @ self.rotation.T + self.translation

    def compose(self, other: "Pose") -> "Pose":
        """Return ``self ∘ other`` (apply ``other`` first)."""
        r = self.rotation @ other.rotation
        return Pose(_reorthonormalize(r), self.rotation @ other.translation + self.translation)

    def inverse(self) -> "Pose":
        rt = self.rotation.T
        return Pose(rt, -rt @ self.translation)

    def yaw(self) -> float:
        return math.atan2(self.rotation[1, 0], self.rotation[0, 0])

    def to_dict(self) -> dict:
        return {"rotation": self.rotation.tolist(), "translation": self.translation.tolist()}

    @classmethod
    def from_dict(cls, d: dict) -> "Pose":
        return cls(d["rotation"], d["translation"])


def _reorthonormalize(r: np.ndarray) -> np.ndarray:
    # keeps long compose chains inside the orthonormality tolerance
    u, _, vt = np.linalg.svd(r)
    out = u @ vt
    if np.linalg.det(out) < 0:
        u[:, -1] *= -1
        out = u @ vt
    return out


def rot_z(yaw: float) -> np.ndarray:
    c, s = math.cos(yaw), math.sin(yaw)
    return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])


def relative_pose(ego_to_world_t: Pose, ego_to_world_past: Pose) -> Pose:
    """Transform taking ego-frame coordinates at t into the ego frame of a past frame."""
    return ego_to_world_past.inverse().compose(ego_to_world_t)


def align_position(pose_t_to_tj: Pose, position_ego_t) -> np.ndarray:
    return pose_t_to_tj.apply(position_ego_t)


# Rotation from ego axes (x fwd, y left, z up) into camera axes (x right, y down, z fwd)
# for a camera looking along ego +x.
EGO_TO_CAMERA_AXES = np.array([[0.0, -1.0, 0.0], [0.0, 0.0, -1.0], [1.0, 0.0, 0.0]])


@dataclass(frozen=True)
class Camera:
    intrinsics: np.ndarray
    extrinsics: Pose  # camera-from-ego
    image_size: Tuple[int, int]  # (H, W)

    def __post_init__(self):
        k = _frozen(self.intrinsics, (3, 3))
        if k[2, 2] != 1.0 or k[2, 0] != 0.0 or k[2, 1] != 0.0:
            raise ValueError("intrinsics last row must be (0, 0, 1)")
        if k[0, 0] <= 0 or k[1, 1] <= 0:
            raise ValueError("focal lengths must be positive")
        object.__setattr__(self, "intrinsics", k)
        object.__setattr__(self, "image_size", (int(self.image_size[0]), int(self.image_size[1])))

    @classmethod
    def pinhole(cls, focal: float, principal: Tuple[float, float], image_size, extrinsics: Optional[Pose] = None):
        k = np.array([[focal, 0.0, principal[0]], [0.0, focal, principal[1]], [0.0, 0.0, 1.0]])
        return cls(k, extrinsics or Pose.identity(), image_size)

    @classmethod
    def mounted(cls, yaw: float, position_ego, focal: float, image_size) -> "Camera":
        """Camera at ``position_ego`` looking horizontally along ego heading ``yaw``."""
        h, w = image_size
        cam_to_ego_rot = rot_z(yaw) @ EGO_TO_CAMERA_AXES.T
        cam_to_ego = Pose(cam_to_ego_rot, position_ego)
        return cls.pinhole(focal, (w / 2.0, h / 2.0), image_size, cam_to_ego.inverse())

    def projection_matrix(self) -> np.ndarray:
        """3x4 matrix P with d*[u, v, 1]^T = P [x, y, z, 1]^T."""
        rt = np.hstack([self.extrinsics.rotation, self.extrinsics.translation[:, None]])
        return self.intrinsics @ rt

    @property
    def center_ego(self) -> np.ndarray:
        return self.extrinsics.inverse().translation

    def pixel_rays(self) -> Tuple[np.ndarray, np.ndarray]:
        """Unit ray directions (H, W, 3) in the ego frame through pixel centers, and the
        camera-frame z component of each unit ray (H, W)."""
        h, w = self.image_size
        vv, uu = np.meshgrid(np.arange(h) + 0.5, np.arange(w) + 0.5, indexing="ij")
        pix = np.stack([uu, vv, np.ones_like(uu)], axis=-1)
        d_cam = pix @ np.linalg.inv(self.intrinsics).T
        d_cam /= np.linalg.norm(d_cam, axis=-1, keepdims=True)
        d_ego = d_cam @ self.extrinsics.rotation  # R^T applied to row vectors
        return d_ego, d_cam[..., 2]

    def to_dict(self) -> dict:
        return {
            "intrinsics": self.intrinsics.tolist(),
            "extrinsics": self.extrinsics.to_dict(),
            "image_size": list(self.image_size),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Camera":
        return cls(d["intrinsics"], Pose.from_dict(d["extrinsics"]), tuple(d["image_size"]))


class Projection(NamedTuple):
    u: float
    v: float
    depth: float
    in_image: bool


def project_to_image(camera: Camera, point_ego) -> Projection:
    p_cam = camera.extrinsics.apply(point_ego)
    d = float(p_cam[2])
    if d <= MIN_DEPTH:
        raise BehindCamera(f"point has camera depth {d:g}")
    uvw = camera.intrinsics @ p_cam
    u, v = float(uvw[0] / d), float(uvw[1] / d)
    h, w = camera.image_size
    return Projection(u, v, d, 0.0 <= u < w and 0.0 <= v < h)


def project_points(camera: Camera, points_ego) -> Tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    """Vectorized projection of (N, 3) points.

    Returns ``(u, v, depth, valid)`` where ``valid`` marks points in front of the
    camera and inside the image. Invalid entries of u, v are NaN.
    """
    p_cam = camera.extrinsics.apply(points_ego)
    d = p_cam[:, 2]
    front = d > MIN_DEPTH
    safe_d = np.where(front, d, 1.0)
    uvw = p_cam @ camera.intrinsics.T
    u = np.where(front, uvw[:, 0] / safe_d, np.nan)
    v = np.where(front, uvw[:, 1] / safe_d, np.nan)
    h, w = camera.image_size
    with np.errstate(invalid="ignore"):
        valid = front & (u >= 0) & (u < w) & (v >= 0) & (v < h)
    return u, v, d, valid


@dataclass(frozen=True)
class GridSpec:
    dims: Tuple[int, int, int]
    voxel_size: float
    origin: Tuple[float, float, float] = (0.0, 0.0, 0.0)

    def __post_init__(self):
        if self.voxel_size <= 0:
            raise ValueError("voxel_size must be positive")
        dims = tuple(int(d) for d in self.dims)
        if len(dims) != 3 or min(dims) <= 0:
            raise ValueError(f"bad grid dims {self.dims}")
        object.__setattr__(self, "dims", dims)
        object.__setattr__(self, "origin", tuple(float(o) for o in self.origin))

    @property
    def num_voxels(self) -> int:
        x, y, z = self.dims
        return x * y * z

    @property
    def extent(self) -> np.ndarray:
        return np.asarray(self.dims, dtype=np.float64) * self.voxel_size

    @property
    def upper(self) -> np.ndarray:
        return np.asarray(self.origin) + self.extent

    def check_divisible(self, stages: int) -> None:
        f = 2 ** (stages - 1)
        if any(d % f for d in self.dims):
            raise ValueError(f"grid dims {self.dims} not divisible by {f} for {stages} stages")

    def coarsened(self, factor: int) -> "GridSpec":
        if any(d % factor for d in self.dims):
            raise ValueError(f"grid dims {self.dims} not divisible by {factor}")
        return GridSpec(tuple(d // factor for d in self.dims), self.voxel_size * factor, self.origin)

    def world_to_voxel(self, point) -> Optional[Tuple[int, int, int]]:
        idx = np.floor((np.asarray(point, dtype=np.float64) - self.origin) / self.voxel_size).astype(int)
        if np.any(idx < 0) or np.any(idx >= self.dims):
            return None
        return tuple(int(i) for i in idx)

    def voxel_to_world(self, index) -> np.ndarray:
        """Center of the voxel at ``index``."""
        return np.asarray(self.origin) + (np.asarray(index, dtype=np.float64) + 0.5) * self.voxel_size

    def points_to_indices(self, points) -> Tuple[np.ndarray, np.ndarray]:
        """(N, 3) points -> (N, 3) int indices and an in-grid mask."""
        idx = np.floor((np.asarray(points) - self.origin) / self.voxel_size).astype(np.int64)
        inside = np.all((idx >= 0) & (idx < np.asarray(self.dims)), axis=-1)
        return idx, inside

    def linear_index(self, idx) -> np.ndarray:
        idx = np.asarray(idx)
        return np.ravel_multi_index((idx[..., 0], idx[..., 1], idx[..., 2]), self.dims)

    def cell_centers(self) -> np.ndarray:
        """All voxel centers as (X, Y, Z, 3)."""
        axes = [self.origin[a] + (np.arange(self.dims[a]) + 0.5) * self.voxel_size for a in range(3)]
        return np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1)

    def to_dict(self) -> dict:
        return {"dims": list(self.dims), "voxel_size": self.voxel_size, "origin": list(self.origin)}

    @classmethod
    def from_dict(cls, d: dict) -> "GridSpec":
        return cls(tuple(d["dims"]), float(d["voxel_size"]), tuple(d["origin"]))
