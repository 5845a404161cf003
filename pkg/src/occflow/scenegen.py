"""Deterministic synthetic driving scenes with dense ground truth.

Boxes are axis-aligned in the world frame and move at constant planar
velocity; the ego vehicle follows a constant-velocity, constant-yaw-rate
trajectory. Every frame is rasterized on the ego-centric grid, rendered into
near-one-hot camera depth distributions, and given procedural image features.
"""

from __future__ import annotations

import configparser
import json
import os
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from . import gridio
from .geometry import Camera, GridSpec, Pose
from .gridio import GridKind
from .lift_splat import DEFAULT_BIN_START, DEFAULT_BIN_STEP, DEFAULT_NUM_BINS, DepthDistribution
from .metrics import raycast_batch

CLASS_NAMES = ("empty", "ground", "car", "truck", "pedestrian", "barrier", "manmade")
FOREGROUND = (2, 3, 4)
NUM_CLASSES = 6
SKY = NUM_CLASSES + 1  # reserved slot in the feature code

# footprint (x, y) and height in meters, all on the 0.25 m lattice
CLASS_SIZES = {
    2: (2.0, 1.0, 1.0),
    3: (3.0, 1.5, 1.75),
    4: (0.5, 0.5, 1.5),
    5: (1.5, 0.25, 0.75),
    6: (1.0, 1.0, 2.5),
}
SPEEDS = (-1.0, -0.5, 0.5, 1.0)


class ConfigError(ValueError):
    """Scene config problem; the message names the offending section/key."""


@dataclass
class Box:
    cls: int
    size: Tuple[float, float, float]
    center: Tuple[float, float]  # world-frame footprint center at t = 0
    velocity: Tuple[float, float] = (0.0, 0.0)  # m/s, world frame

    def center_at(self, time: float) -> np.ndarray:
        return np.asarray(self.center) + np.asarray(self.velocity) * time

    @property
    def moving(self) -> bool:
        return any(v != 0.0 for v in self.velocity)


@dataclass
class RigConfig:
    count: int = 6
    height: float = 1.5
    radius: float = 0.25  # mounting offset from the ego origin
    fov_deg: float = 70.0
    image_size: Tuple[int, int] = (24, 40)

    def cameras(self) -> List[Camera]:
        h, w = self.image_size
        focal = (w / 2.0) / np.tan(np.deg2rad(self.fov_deg) / 2.0)
        out = []
        for k in range(self.count):
            yaw = 2.0 * np.pi * k / self.count
            pos = (self.radius * np.cos(yaw), self.radius * np.sin(yaw), self.height)
            out.append(Camera.mounted(yaw, pos, focal, self.image_size))
        return out


@dataclass
class EgoTrajectory:
    velocity: Tuple[float, float] = (0.0, 0.0)  # world frame, m/s
    yaw_rate: float = 0.0  # rad/s

    def pose_at(self, time: float) -> Pose:
        v = np.asarray(self.velocity) * time
        return Pose.from_yaw(self.yaw_rate * time, (v[0], v[1], 0.0))


@dataclass
class DepthBins:
    start: float = DEFAULT_BIN_START
    step: float = DEFAULT_BIN_STEP
    count: int = DEFAULT_NUM_BINS
    eps: float = 0.05


@dataclass
class SceneConfig:
    seed: int = 0
    grid: GridSpec = field(default_factory=lambda: GridSpec((64, 64, 16), 0.25, (-8.0, -8.0, -0.25)))
    num_classes: int = NUM_CLASSES
    boxes: List[Box] = field(default_factory=list)
    ground_layer: int = 0
    rig: RigConfig = field(default_factory=RigConfig)
    ego: EgoTrajectory = field(default_factory=EgoTrajectory)
    num_frames: int = 8
    interval: float = 0.5
    envelope: float = 7.0  # boxes stay within |x|, |y| <= envelope (world and ego frame)
    keep_out: float = 2.5  # and at least this far from the ego origin
    channels: int = 32
    bins: DepthBins = field(default_factory=DepthBins)

    def times(self) -> np.ndarray:
        return np.arange(self.num_frames) * self.interval

    def validate(self) -> None:
        if self.num_frames < 1:
            raise ConfigError("scene.frames must be at least 1")
        if self.interval <= 0:
            raise ConfigError("scene.interval must be positive")
        if self.channels < 2 * (self.num_classes + 2):
            raise ConfigError(f"features.channels must be at least {2 * (self.num_classes + 2)}")
        for i, box in enumerate(self.boxes):
            if not 2 <= box.cls <= self.num_classes:
                raise ConfigError(f"box {i}: class {box.cls} outside 2..{self.num_classes}")
            for t in self.times():
                if not self._box_ok(box, t):
                    raise ConfigError(f"box {i} leaves the envelope at t={t:g}s")

    def _box_ok(self, box: Box, time: float) -> bool:
        pose = self.ego.pose_at(time)
        c = box.center_at(time)
        hx, hy = box.size[0] / 2, box.size[1] / 2
        corners = np.array([[c[0] + sx * hx, c[1] + sy * hy, 0.0] for sx in (-1, 1) for sy in (-1, 1)])
        ego = pose.inverse().apply(corners)
        for pts in (corners, ego):
            if np.abs(pts[:, :2]).max() > self.envelope:
                return False
        # nearest footprint point to the ego origin, in the world frame
        origin = pose.translation[:2]
        near = np.clip(origin, c - (hx, hy), c + (hx, hy))
        return float(np.linalg.norm(near - origin)) >= self.keep_out


def random_boxes(seed: int, cfg: SceneConfig, static: bool = False) -> List[Box]:
    """2-5 boxes of random classes on the 0.25 m lattice, rejection-sampled into the envelope."""
    rng = np.random.default_rng([seed, 0x5CE7E])
    n = int(rng.integers(2, 6))
    boxes: List[Box] = []
    attempts = 0
    while len(boxes) < n:
        attempts += 1
        if attempts > 10000:
            raise ConfigError("could not place boxes inside the envelope")
        cls = int(rng.integers(2, cfg.num_classes + 1))
        size = CLASS_SIZES[cls]
        # corners on the lattice: centers offset by half the size
        corner = np.round(rng.uniform(-cfg.envelope, cfg.envelope - np.asarray(size[:2])) / 0.25) * 0.25
        center = tuple(float(v) for v in corner + np.asarray(size[:2]) / 2)
        if static or cls not in FOREGROUND:
            vel = (0.0, 0.0)
        else:
            axis = int(rng.integers(0, 2))
            speed = float(rng.choice(SPEEDS))
            vel = (speed, 0.0) if axis == 0 else (0.0, speed)
        box = Box(cls, size, center, vel)
        if not all(cfg._box_ok(box, t) for t in cfg.times()):
            continue
        if any(_overlap(box, other, cfg.times()) for other in boxes):
            continue
        boxes.append(box)
    return boxes


def _overlap(a: Box, b: Box, times) -> bool:
    for t in times:
        d = np.abs(a.center_at(t) - b.center_at(t))
        if d[0] < (a.size[0] + b.size[0]) / 2 and d[1] < (a.size[1] + b.size[1]) / 2:
            return True
    return False


# ---------------------------------------------------------------- config files

def _floats(text: str, n: int, key: str) -> Tuple[float, ...]:
    parts = [p for p in text.replace(",", " ").split() if p]
    if len(parts) != n:
        raise ConfigError(f"{key}: expected {n} numbers, got {text!r}")
    try:
        return tuple(float(p) for p in parts)
    except ValueError:
        raise ConfigError(f"{key}: not numeric: {text!r}") from None


REQUIRED = {
    "scene": ("seed", "frames", "interval"),
    "grid": ("dims", "voxel_size", "origin"),
}

DEFAULT_CONFIG = """\
# occflow scene config. Box sections are optional; without them 2-5 boxes
# are drawn from the seed.
[scene]
seed = {seed}
frames = 8
interval = 0.5
static = {static}

[grid]
dims = 64 64 16
voxel_size = 0.25
origin = -8 -8 -0.25

[cameras]
count = 6
height = 1.5
fov_deg = 70
image_height = 24
image_width = 40

[ego]
velocity = {ego_velocity}
yaw_rate = 0

[features]
channels = 32
"""


def default_config_text(seed: int = 0, static: bool = False) -> str:
    return DEFAULT_CONFIG.format(seed=seed, static=str(static).lower(),
                                 ego_velocity="0 0" if static else "0.5 0")


def parse_config(text: str, source: str = "<config>") -> SceneConfig:
    parser = configparser.ConfigParser(inline_comment_prefixes=("#", ";"))
    try:
        parser.read_string(text, source=source)
    except configparser.Error as exc:
        raise ConfigError(f"{source}: {exc}") from None
    for section, keys in REQUIRED.items():
        if not parser.has_section(section):
            raise ConfigError(f"{source}: missing required section [{section}]")
        for key in keys:
            if not parser.has_option(section, key):
                raise ConfigError(f"{source}: missing required key '{section}.{key}'")

    def get(section, key, conv, default):
        if not parser.has_option(section, key):
            return default
        raw = parser.get(section, key)
        try:
            return conv(raw)
        except (ValueError, ConfigError) as exc:
            raise ConfigError(f"{source}: bad value for '{section}.{key}': {exc}") from None

    sc = parser["scene"]
    try:
        seed = int(sc["seed"])
        frames = int(sc["frames"])
        interval = float(sc["interval"])
    except ValueError as exc:
        raise ConfigError(f"{source}: [scene] {exc}") from None
    static = get("scene", "static", lambda s: parser.BOOLEAN_STATES[s.lower()], False)
    dims = tuple(int(v) for v in _floats(parser.get("grid", "dims"), 3, "grid.dims"))
    voxel = get("grid", "voxel_size", float, 0.25)
    origin = _floats(parser.get("grid", "origin"), 3, "grid.origin")
    rig = RigConfig(
        count=get("cameras", "count", int, 6),
        height=get("cameras", "height", float, 1.5),
        radius=get("cameras", "radius", float, 0.25),
        fov_deg=get("cameras", "fov_deg", float, 70.0),
        image_size=(get("cameras", "image_height", int, 24), get("cameras", "image_width", int, 40)),
    )
    ego = EgoTrajectory(
        velocity=get("ego", "velocity", lambda s: _floats(s, 2, "ego.velocity"), (0.0, 0.0)),
        yaw_rate=get("ego", "yaw_rate", float, 0.0),
    )
    if static:
        ego = EgoTrajectory()
    cfg = SceneConfig(
        seed=seed, grid=GridSpec(dims, voxel, origin), rig=rig, ego=ego, num_frames=frames, interval=interval,
        envelope=get("scene", "envelope", float, 7.0), keep_out=get("scene", "keep_out", float, 2.5),
        channels=get("features", "channels", int, 32),
    )
    box_sections = sorted(s for s in parser.sections() if s.startswith("box"))
    for s in box_sections:
        for key in ("class", "size", "center"):
            if not parser.has_option(s, key):
                raise ConfigError(f"{source}: missing required key '{s}.{key}'")
        vel = get(s, "velocity", lambda t: _floats(t, 2, f"{s}.velocity"), (0.0, 0.0))
        cfg.boxes.append(Box(get(s, "class", int, 0), _floats(parser.get(s, "size"), 3, f"{s}.size"),
                             _floats(parser.get(s, "center"), 2, f"{s}.center"), (0.0, 0.0) if static else vel))
    if not box_sections:
        cfg.boxes = random_boxes(seed, cfg, static)
    cfg.validate()
    return cfg


def load_config(path) -> SceneConfig:
    with open(path, "r", encoding="utf-8") as fh:
        return parse_config(fh.read(), str(path))


# ---------------------------------------------------------------- rendering

@dataclass
class FrameTruth:
    index: int
    timestamp: float
    semantic: np.ndarray  # (X, Y, Z) uint8
    flow: np.ndarray  # (2, X, Y, Z) ego-frame m/s
    depths: List[DepthDistribution]
    depth_bins: List[np.ndarray]  # (H, W) hit bin, -1 for sky
    features: List[np.ndarray]  # (C, H, W)
    ego_pose: Pose
    cameras: List[Camera]


def rasterize(cfg: SceneConfig, time: float, pose: Pose):
    """Semantic and flow grids on the ego grid at ``time``; boxes drawn in list order."""
    spec = cfg.grid
    centers = spec.cell_centers()
    world = pose.apply(centers.reshape(-1, 3)).reshape(centers.shape)
    sem = np.zeros(spec.dims, dtype=np.uint8)
    sem[:, :, cfg.ground_layer] = 1
    flow = np.zeros((2,) + spec.dims)
    ground_top = spec.origin[2] + (cfg.ground_layer + 1) * spec.voxel_size
    r_inv = pose.rotation.T[:2, :2]
    for box in cfg.boxes:
        c = box.center_at(time)
        hx, hy, hz = box.size[0] / 2, box.size[1] / 2, box.size[2]
        inside = ((np.abs(world[..., 0] - c[0]) < hx) & (np.abs(world[..., 1] - c[1]) < hy)
                  & (world[..., 2] > ground_top) & (world[..., 2] < ground_top + hz))
        sem[inside] = box.cls
        v_ego = r_inv @ np.asarray(box.velocity, dtype=np.float64)
        flow[0][inside] = v_ego[0]
        flow[1][inside] = v_ego[1]
    return sem, flow


def camera_hits(semantic: np.ndarray, spec: GridSpec, camera: Camera, max_range: float = 100.0):
    """Per pixel: hit class (0 for sky), camera-z depth and ego hit point."""
    dirs, cz = camera.pixel_rays()
    h, w = camera.image_size
    d = dirs.reshape(-1, 3)
    origin = camera.center_ego
    hits = raycast_batch(semantic, spec, origin[None], d, max_range)
    cls = hits.cls.reshape(h, w)
    dist = np.where(hits.cls > 0, hits.depth, 0.0)
    depth = (dist * cz.reshape(-1)).reshape(h, w)
    points = (origin + d * dist[:, None]).reshape(h, w, 3)
    return cls, depth, points


def depth_distribution(cls: np.ndarray, depth: np.ndarray, bins: DepthBins) -> Tuple[DepthDistribution, np.ndarray]:
    """Near-one-hot rows: 1 - eps on the hit bin, eps split over its neighbors, uniform for sky.

    Hits outside the bin range are treated as sky.
    """
    h, w = cls.shape
    d_cnt = bins.count
    # depths a few ulps under a bin edge belong to the upper bin
    b = np.floor((depth - bins.start) / bins.step + 1e-9).astype(np.int64)
    valid = (cls > 0) & (b >= 0) & (b < d_cnt)
    probs = np.full((d_cnt, h, w), 1.0 / d_cnt)
    rows, cols = np.nonzero(valid)
    bb = b[rows, cols]
    probs[:, rows, cols] = 0.0
    probs[bb, rows, cols] = 1.0 - bins.eps
    lo_ok = bb > 0
    hi_ok = bb < d_cnt - 1
    share = np.where(lo_ok & hi_ok, bins.eps / 2, bins.eps)
    probs[np.where(lo_ok, bb - 1, 0)[lo_ok], rows[lo_ok], cols[lo_ok]] += share[lo_ok]
    probs[np.where(hi_ok, bb + 1, 0)[hi_ok], rows[hi_ok], cols[hi_ok]] += share[hi_ok]
    gt = np.where(valid, b, -1)
    return DepthDistribution(probs, bins.start, bins.step), gt


def class_code(num_classes: int) -> np.ndarray:
    """Embedding table (num_classes + 2, num_classes + 2): row k is the one-hot code of class k,
    the last row is the reserved sky code."""
    return np.eye(num_classes + 2)


def position_code(z: np.ndarray, channels: int) -> np.ndarray:
    """sin/cos code of the hit height, (channels, ...) with geometric wavelengths 0.5-8 m."""
    n = channels // 2
    wavelengths = 0.5 * 16.0 ** (np.arange(n) / max(n - 1, 1))
    arg = 2.0 * np.pi * z[None] / wavelengths.reshape((-1,) + (1,) * z.ndim)
    return np.concatenate([np.sin(arg), np.cos(arg)], axis=0)


def image_features(cls: np.ndarray, points: np.ndarray, channels: int, num_classes: int) -> np.ndarray:
    table = class_code(num_classes)
    k = table.shape[0]
    code = np.where(cls > 0, cls, SKY)
    feat = np.zeros((channels,) + cls.shape)
    feat[:k] = np.moveaxis(table[code], -1, 0)
    rest = channels - k
    pos = position_code(points[..., 2], rest - rest % 2)
    sky = cls == 0
    pos[:, sky] = 0.0
    feat[k:k + pos.shape[0]] = pos
    return feat


def render_depth_distribution(truth_semantic: np.ndarray, spec: GridSpec, camera: Camera,
                              bins: DepthBins = DepthBins()) -> Tuple[DepthDistribution, np.ndarray]:
    cls, depth, _ = camera_hits(truth_semantic, spec, camera)
    return depth_distribution(cls, depth, bins)


def synth_image_features(truth_semantic: np.ndarray, spec: GridSpec, camera: Camera, channels: int,
                         num_classes: int = NUM_CLASSES) -> np.ndarray:
    cls, _, points = camera_hits(truth_semantic, spec, camera)
    return image_features(cls, points, channels, num_classes)


def build_frame(cfg: SceneConfig, t: int) -> FrameTruth:
    if not 0 <= t < cfg.num_frames:
        raise IndexError(f"frame {t} outside 0..{cfg.num_frames - 1}")
    time = float(t * cfg.interval)
    pose = cfg.ego.pose_at(time)
    sem, flow = rasterize(cfg, time, pose)
    cams = cfg.rig.cameras()
    depths, gts, feats = [], [], []
    for cam in cams:
        cls, depth, points = camera_hits(sem, cfg.grid, cam)
        dist, gt = depth_distribution(cls, depth, cfg.bins)
        depths.append(dist)
        gts.append(gt)
        feats.append(image_features(cls, points, cfg.channels, cfg.num_classes))
    return FrameTruth(t, time, sem, flow, depths, gts, feats, pose, cams)


# ---------------------------------------------------------------- persistence

def _frame_files(t: int, num_cams: int) -> Dict[str, object]:
    stem = f"frame_{t:04d}"
    return {
        "semantic": f"{stem}.stcg",
        "flow": f"{stem}_flow.stcg",
        "depth": [f"{stem}_cam{k}_depth.stcg" for k in range(num_cams)],
        "features": [f"{stem}_cam{k}_feat.stcg" for k in range(num_cams)],
    }


def write_scene(cfg: SceneConfig, out_dir, config_text: Optional[str] = None) -> dict:
    """Write every frame plus ``manifest.json``; returns the manifest."""
    os.makedirs(out_dir, exist_ok=True)
    cams = cfg.rig.cameras()
    frames = []
    for t in range(cfg.num_frames):
        truth = build_frame(cfg, t)
        files = _frame_files(t, len(cams))
        gridio.write_grid(os.path.join(out_dir, files["semantic"]), truth.semantic, GridKind.SEMANTIC)
        gridio.write_grid(os.path.join(out_dir, files["flow"]), truth.flow, GridKind.FLOW)
        for k in range(len(cams)):
            gridio.write_grid(os.path.join(out_dir, files["depth"][k]), truth.depths[k].probs[..., None],
                              GridKind.FEATURE)
            gridio.write_grid(os.path.join(out_dir, files["features"][k]), truth.features[k][..., None],
                              GridKind.FEATURE)
        frames.append({"index": t, "timestamp": truth.timestamp, "ego_pose": truth.ego_pose.to_dict(),
                       "files": files})
    manifest = {
        "kind": "scene",
        "seed": cfg.seed,
        "grid": cfg.grid.to_dict(),
        "num_classes": cfg.num_classes,
        "class_names": list(CLASS_NAMES[:cfg.num_classes + 1]),
        "foreground": list(FOREGROUND),
        "channels": cfg.channels,
        "interval": cfg.interval,
        "depth_bins": {"start": cfg.bins.start, "step": cfg.bins.step, "count": cfg.bins.count, "eps": cfg.bins.eps},
        "boxes": [{"class": b.cls, "size": list(b.size), "center": list(b.center), "velocity": list(b.velocity)}
                  for b in cfg.boxes],
        "cameras": [c.to_dict() for c in cams],
        "frames": frames,
    }
    with open(os.path.join(out_dir, "manifest.json"), "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")
    if config_text is not None:
        with open(os.path.join(out_dir, "scene.cfg"), "w", encoding="utf-8") as fh:
            fh.write(config_text)
    return manifest


def read_manifest(directory) -> dict:
    path = os.path.join(directory, "manifest.json")
    with open(path, "r", encoding="utf-8") as fh:
        return json.load(fh)


@dataclass
class Scene:
    """A scene directory opened for reading."""

    directory: str
    manifest: dict

    @classmethod
    def open(cls, directory) -> "Scene":
        m = read_manifest(directory)
        if m.get("kind") != "scene":
            raise ValueError(f"{directory} is not a scene directory")
        return cls(str(directory), m)

    @property
    def spec(self) -> GridSpec:
        return GridSpec.from_dict(self.manifest["grid"])

    @property
    def cameras(self) -> List[Camera]:
        return [Camera.from_dict(c) for c in self.manifest["cameras"]]

    @property
    def num_frames(self) -> int:
        return len(self.manifest["frames"])

    def _path(self, name: str) -> str:
        return os.path.join(self.directory, name)

    def semantic(self, t: int) -> np.ndarray:
        return gridio.read_grid(self._path(self.manifest["frames"][t]["files"]["semantic"]), GridKind.SEMANTIC)

    def flow(self, t: int) -> np.ndarray:
        return gridio.read_grid(self._path(self.manifest["frames"][t]["files"]["flow"]), GridKind.FLOW)

    def frame(self, t: int) -> FrameTruth:
        entry = self.manifest["frames"][t]
        files = entry["files"]
        spec = self.spec
        sem = self.semantic(t)
        if sem.shape != spec.dims:
            raise ValueError(f"frame {t}: semantic grid {sem.shape} vs manifest dims {spec.dims}")
        bins = self.manifest["depth_bins"]
        depths, gts, feats = [], [], []
        for dpath, fpath in zip(files["depth"], files["features"]):
            probs = gridio.read_grid(self._path(dpath), GridKind.FEATURE)[..., 0]
            dist = DepthDistribution(probs, bins["start"], bins["step"])
            sky = np.isclose(probs.max(axis=0), probs.min(axis=0))
            gts.append(np.where(sky, -1, np.argmax(probs, axis=0)))
            depths.append(dist)
            feats.append(gridio.read_grid(self._path(fpath), GridKind.FEATURE)[..., 0])
        return FrameTruth(t, float(entry["timestamp"]), sem, self.flow(t), depths, gts, feats,
                          Pose.from_dict(entry["ego_pose"]), self.cameras)
