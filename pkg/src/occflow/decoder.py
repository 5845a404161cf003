"""The multi-stage spatial-temporal cascade and its prediction heads."""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field, fields, replace
from typing import List, Optional, Sequence, Tuple

import numpy as np

from .attention import DeformableParams, SamplingGate, bilinear_sample, oa_sca, oa_tsa, vanilla_sca
from .geometry import Camera, GridSpec, Pose, relative_pose
from .lift_splat import DepthDistribution, coarse_pyramid, lift_splat
from .occupancy import Mlp, SropState, srop_step
from .temporal import (BankEntry, FusionMlp, MemoryBank, StreamConfig, StreamParams, WeightEmbed,
                       sparse_temporal_fusion)
from .voxelgrid import (BevCollapse, DimMismatch, bev_to_voxel, layer_norm, upsample2x_grid,
                        upsample2x_weights, voxel_to_bev, z_average)

SCA_MODES = ("oa", "vanilla", "depth", "off")
TSA_MODES = ("oa", "vanilla", "off")
SROP_MODES = ("recursive", "one-off")


def default_history(num_stages: int) -> Tuple[int, ...]:
    return tuple(4 * 2 ** (num_stages - 1 - i) for i in range(num_stages))


@dataclass
class DecoderConfig:
    num_stages: int = 3
    num_layers: int = 2
    history: Optional[Tuple[int, ...]] = None  # frames kept per stage, coarsest first
    channels: int = 32
    num_classes: int = 6  # K; heads emit K + 1 logits
    sigma: float = 2.0
    n_ref: int = 8
    num_points: int = 4
    offset_scale: float = 1.0
    embed_dim: int = 8
    long_fraction: float = 0.10
    short_fraction: float = 0.05
    head_hidden: int = 64
    collapse_noise: float = 0.1
    gate_mode: str = "eval"
    seed: int = 0
    sca: str = "oa"
    tsa: str = "oa"
    fusion: bool = True
    srop: str = "recursive"
    bev_collapse: str = "linear"  # or "occupancy"
    srop_prior: float = -2.0  # occupancy predictor output bias: sparse prior, keeps W off the clip
    empty_prior: float = 2.0  # semantic head bias on the empty logit

    def __post_init__(self):
        if self.history is None:
            self.history = default_history(self.num_stages)
        self.history = tuple(int(h) for h in self.history)
        if len(self.history) != self.num_stages:
            raise ValueError(f"history {self.history} needs one entry per stage ({self.num_stages})")
        if self.sca not in SCA_MODES:
            raise ValueError(f"sca must be one of {SCA_MODES}")
        if self.tsa not in TSA_MODES:
            raise ValueError(f"tsa must be one of {TSA_MODES}")
        if self.srop not in SROP_MODES:
            raise ValueError(f"srop must be one of {SROP_MODES}")
        if self.bev_collapse not in ("linear", "occupancy"):
            raise ValueError("bev_collapse must be 'linear' or 'occupancy'")
        SamplingGate(self.gate_mode)

    def to_dict(self) -> dict:
        d = {f.name: getattr(self, f.name) for f in fields(self)}
        d["history"] = list(self.history)
        return d

    def with_overrides(self, **kw) -> "DecoderConfig":
        return replace(self, **kw)


@dataclass
class LayerParams:
    tsa: DeformableParams
    sca: DeformableParams


@dataclass
class StageParams:
    index: int  # 1-based
    collapse: BevCollapse
    srop: SropState
    layers: List[LayerParams]
    long: StreamParams
    short: StreamParams


@dataclass
class HeadParams:
    semantic: Mlp
    flow: Mlp

    def copy(self) -> "HeadParams":
        return HeadParams(self.semantic.copy(), self.flow.copy())


@dataclass
class DecoderParams:
    stages: List[StageParams]
    heads: HeadParams


def stage_spec(spec: GridSpec, stage: int, num_stages: int) -> GridSpec:
    return spec.coarsened(2 ** (num_stages - stage))


def init_decoder_params(cfg: DecoderConfig, spec: GridSpec) -> DecoderParams:
    spec.check_divisible(cfg.num_stages)
    rng = np.random.default_rng(cfg.seed)
    c = cfg.channels
    stages = []
    for i in range(1, cfg.num_stages + 1):
        z = stage_spec(spec, i, cfg.num_stages).dims[2]
        collapse = BevCollapse.slice_mean(c, z, cfg.collapse_noise, rng)
        collapse.occupancy_weighted = cfg.bev_collapse == "occupancy"
        srop = SropState.init(c, z, cfg.num_layers, rng, output_bias=cfg.srop_prior)
        layers = [LayerParams(DeformableParams.init(cfg.num_points, c + 1, rng, cfg.offset_scale),
                              DeformableParams.init(cfg.num_points, c, rng, cfg.offset_scale))
                  for _ in range(cfg.num_layers)]
        t = cfg.history[i - 1]
        long = StreamParams(FusionMlp.init(c, t, cfg.embed_dim, rng), WeightEmbed.init(cfg.embed_dim, rng))
        short = StreamParams(FusionMlp.init(c, t // 2, cfg.embed_dim, rng), WeightEmbed.init(cfg.embed_dim, rng))
        stages.append(StageParams(i, collapse, srop, layers, long, short))
    semantic = Mlp.init([c, cfg.head_hidden, cfg.num_classes + 1], rng)
    semantic.biases[-1][0] += cfg.empty_prior
    flow = Mlp.init([c, cfg.head_hidden, 2], rng, scale=0.5)
    flow.weights[-1][:] = 0.0  # start from zero velocity everywhere
    heads = HeadParams(semantic, flow)
    return DecoderParams(stages, heads)


@dataclass
class FrameInputs:
    image_feats: Sequence[np.ndarray]
    depths: Sequence[DepthDistribution]
    cameras: Sequence[Camera]
    ego_pose: Pose  # ego-to-world
    timestamp: float


@dataclass
class StageTrace:
    """Intermediate values of one stage, kept for head training and inspection."""

    srop_inputs: List[np.ndarray]
    w0: np.ndarray
    alphas: np.ndarray
    bev_final: np.ndarray
    fusion_delta: np.ndarray
    layer_weights: List[np.ndarray]


@dataclass
class StageOutput:
    voxel: np.ndarray
    weights: np.ndarray
    bev_snapshot: np.ndarray
    trace: StageTrace


@dataclass
class FramePrediction:
    logits: np.ndarray  # (K+1, X, Y, Z)
    flow: np.ndarray  # (2, X, Y, Z) m/s
    stage_weights: List[np.ndarray]
    traces: List[StageTrace] = field(default_factory=list, repr=False)
    features: Optional[np.ndarray] = field(default=None, repr=False)

    @property
    def labels(self) -> np.ndarray:
        return np.argmax(self.logits, axis=0).astype(np.uint8)

    def checksum(self) -> str:
        h = hashlib.sha256()
        for a in (self.logits, self.flow, *self.stage_weights):
            h.update(np.ascontiguousarray(a, dtype=np.float64).tobytes())
        return h.hexdigest()


def align_bev(bev: np.ndarray, bev_pose: Pose, pose_t: Pose, spec: GridSpec) -> np.ndarray:
    """Resample a past BEV map onto the current frame's BEV cells (planar ego motion).

    Cells whose aligned position falls outside the past grid are zero.
    """
    c, x, y = bev.shape
    centers = spec.cell_centers()[:, :, 0, :].reshape(-1, 3)
    centers[:, 2] = spec.origin[2] + 0.5 * spec.extent[2]
    past = relative_pose(pose_t, bev_pose).apply(centers)
    rel = (past[:, :2] - np.asarray(spec.origin[:2])) / spec.voxel_size
    inside = np.all((rel >= 0) & (rel < np.asarray([x, y])), axis=1)
    out = np.zeros((x * y, c))
    if inside.any():
        out[inside] = bilinear_sample(bev, rel[inside, 0] - 0.5, rel[inside, 1] - 0.5)
    return out.T.reshape(c, x, y)


def _stream_id(frame: int, stage: int, layer: int) -> int:
    return (frame * 64 + stage) * 64 + layer


def run_stage(i: int, coarse: np.ndarray, prev: Optional[np.ndarray], prev_w: Optional[np.ndarray],
              bank: MemoryBank, b_hist: Optional[np.ndarray], frame: FrameInputs, params: StageParams,
              cfg: DecoderConfig, spec: GridSpec, frame_index: int = 0) -> StageOutput:
    """One cascade stage on its own grid ``spec``; ``prev``/``prev_w`` are already upsampled."""
    if coarse.shape[1:] != spec.dims:
        raise DimMismatch(f"coarse grid {coarse.shape[1:]} vs stage dims {spec.dims}")
    x = coarse if prev is None else coarse + prev
    if prev is not None and prev.shape != coarse.shape:
        raise DimMismatch(f"previous stage {prev.shape} vs coarse {coarse.shape}")
    recursive = cfg.srop == "recursive"
    w = np.zeros(spec.dims) if (prev_w is None or not recursive) else prev_w
    if w.shape != spec.dims:
        raise DimMismatch(f"previous weights {w.shape} vs stage dims {spec.dims}")
    b = voxel_to_bev(x, params.collapse, w if params.collapse.occupancy_weighted else None)
    hist = np.zeros_like(b) if b_hist is None else b_hist
    gate = SamplingGate(cfg.gate_mode, seed=cfg.seed)

    w0 = w
    srop_inputs, layer_weights = [], []
    alphas = params.srop.alpha if recursive else np.zeros_like(params.srop.alpha)
    for layer, lp in enumerate(params.layers):
        if recursive or layer == 0:
            srop_inputs.append(b)
            w = srop_step(b, w, alphas[layer], params.srop.predictor)
        layer_weights.append(w)
        if cfg.tsa != "off":
            b = layer_norm(b + oa_tsa(b, hist, z_average(w), lp.tsa, reweight=cfg.tsa == "oa"))
        if cfg.sca != "off":
            if cfg.sca == "vanilla":
                upd = vanilla_sca(b, frame.image_feats, frame.cameras, spec, lp.sca, cfg.n_ref)
            else:
                oa = cfg.sca == "oa"
                upd = oa_sca(b, frame.image_feats, frame.depths, w, frame.cameras, spec,
                             gate if oa else SamplingGate("off"), lp.sca, cfg.sigma, cfg.n_ref,
                             use_occupancy=oa, use_beta=True, stream=_stream_id(frame_index, i, layer))
            b = layer_norm(b + upd)
    v_tilde = bev_to_voxel(b, w)
    if cfg.fusion:
        stream_cfg = StreamConfig(cfg.history[i - 1], cfg.long_fraction, cfg.short_fraction)
        v_out = sparse_temporal_fusion(v_tilde, w, bank, frame.ego_pose, spec, stream_cfg, params.long, params.short)
    else:
        v_out = v_tilde
    snapshot = voxel_to_bev(v_out, params.collapse, w if params.collapse.occupancy_weighted else None)
    trace = StageTrace(srop_inputs, w0, alphas[:len(srop_inputs)].copy(), b, v_out - v_tilde, layer_weights)
    return StageOutput(v_out, w, snapshot, trace)


def heads(v: np.ndarray, params: HeadParams, keep: bool = False):
    """Per-voxel semantic logits (K+1, X, Y, Z) and planar flow (2, X, Y, Z)."""
    c = v.shape[0]
    dims = v.shape[1:]
    rows = v.reshape(c, -1).T
    sem = params.semantic.forward(rows, keep=keep)
    flo = params.flow.forward(rows, keep=keep)
    if keep:
        (sem, sem_cache), (flo, flo_cache) = sem, flo
    logits = sem.T.reshape((-1,) + dims)
    flow = flo.T.reshape((2,) + dims)
    if keep:
        return logits, flow, (sem_cache, flo_cache)
    return logits, flow


@dataclass
class DecoderState:
    banks: List[MemoryBank]
    bev_history: List[Optional[Tuple[np.ndarray, Pose]]]
    frame_index: int = 0

    @classmethod
    def fresh(cls, cfg: DecoderConfig) -> "DecoderState":
        return cls([MemoryBank(t) for t in cfg.history], [None] * cfg.num_stages)


def run_decoder(pyramid: Sequence[np.ndarray], state: DecoderState, frame: FrameInputs,
                params: DecoderParams, cfg: DecoderConfig, spec: GridSpec) -> FramePrediction:
    """Chain all stages for one frame, updating the banks and BEV history in ``state``."""
    if len(pyramid) != cfg.num_stages:
        raise DimMismatch(f"pyramid has {len(pyramid)} levels, config has {cfg.num_stages} stages")
    prev = prev_w = None
    stage_w, traces = [], []
    for i in range(1, cfg.num_stages + 1):
        sspec = stage_spec(spec, i, cfg.num_stages)
        b_hist = None
        if state.bev_history[i - 1] is not None:
            bev, pose = state.bev_history[i - 1]
            b_hist = align_bev(bev, pose, frame.ego_pose, sspec)
        out = run_stage(i, pyramid[i - 1], prev, prev_w, state.banks[i - 1], b_hist, frame,
                        params.stages[i - 1], cfg, sspec, state.frame_index)
        if cfg.fusion:
            state.banks[i - 1].push(BankEntry(out.voxel, frame.ego_pose, frame.timestamp))
        state.bev_history[i - 1] = (out.bev_snapshot, frame.ego_pose)
        stage_w.append(out.weights)
        traces.append(out.trace)
        if i < cfg.num_stages:
            prev = upsample2x_grid(out.voxel)
            prev_w = upsample2x_weights(out.weights)
    logits, flow = heads(out.voxel, params.heads)
    state.frame_index += 1
    return FramePrediction(logits, flow, stage_w, traces, out.voxel)


class CascadeDecoder:
    """Stateful frame-by-frame driver: lift-splat, pyramid, cascade, heads."""

    def __init__(self, cfg: DecoderConfig, spec: GridSpec, params: Optional[DecoderParams] = None):
        self.cfg = cfg
        self.spec = spec
        self.params = params if params is not None else init_decoder_params(cfg, spec)
        self.state = DecoderState.fresh(cfg)

    def reset(self) -> None:
        self.state = DecoderState.fresh(self.cfg)

    def coarse_features(self, frame: FrameInputs) -> np.ndarray:
        grid = lift_splat(frame.image_feats, frame.depths, frame.cameras, self.spec)
        if grid.shape[0] != self.cfg.channels:
            raise DimMismatch(f"image features have {grid.shape[0]} channels, decoder expects {self.cfg.channels}")
        return grid

    def step(self, frame: FrameInputs) -> FramePrediction:
        pyramid = coarse_pyramid(self.coarse_features(frame), self.cfg.num_stages)
        return run_decoder(pyramid, self.state, frame, self.params, self.cfg, self.spec)
