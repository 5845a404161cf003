"""``occflow`` command line: gen-scene, run, eval, train-head, render.

Exit codes: 0 ok, 1 usage, 2 data error, 3 numeric failure.
"""

from __future__ import annotations

import argparse
import configparser
import hashlib
import json
import os
import sys
from dataclasses import fields
from typing import List, Optional

import numpy as np

from . import gridio, scenegen
from .decoder import CascadeDecoder, DecoderConfig, DecoderParams, FrameInputs, HeadParams
from .gridio import GridFormatError, GridKind
from .metrics import (FlowErrors, RayConfig, RayCounts, VoxelCounts, build_report, flow_errors,
                      generate_query_rays, ray_match, raycast_batch, voxel_counts)
from .occupancy import Mlp, SropState
from .train import Diverged, HeadProblem, TrainConfig, predict, train_head
from .voxelgrid import DimMismatch

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3

# RGB per class id; index 0 (empty) is the background
PALETTE = np.array([
    [0, 0, 0],
    [128, 128, 128],  # ground
    [0, 114, 178],  # car
    [230, 159, 0],  # truck
    [204, 121, 167],  # pedestrian
    [240, 228, 66],  # barrier
    [0, 158, 115],  # manmade
    [213, 94, 0],
], dtype=np.uint8)


class DataError(Exception):
    pass


# ---------------------------------------------------------------- parameters on disk

def _mlp_arrays(prefix: str, m: Mlp) -> dict:
    out = {}
    for k, (w, b) in enumerate(zip(m.weights, m.biases)):
        out[f"{prefix}/w{k}"] = w
        out[f"{prefix}/b{k}"] = b
    return out


def _mlp_from(arrays, prefix: str, template: Mlp) -> Mlp:
    n = len(template.weights)
    ws = [np.asarray(arrays[f"{prefix}/w{k}"], dtype=np.float64) for k in range(n)]
    bs = [np.asarray(arrays[f"{prefix}/b{k}"], dtype=np.float64) for k in range(n)]
    return Mlp(ws, bs, template.hidden_activation, template.output_activation)


def save_head_params(path, srop: SropState, head: HeadParams) -> None:
    arrays = {"srop/alpha": srop.alpha}
    arrays.update(_mlp_arrays("srop", srop.predictor))
    arrays.update(_mlp_arrays("semantic", head.semantic))
    arrays.update(_mlp_arrays("flow", head.flow))
    with open(path, "wb") as fh:
        np.savez(fh, **arrays)


def load_head_params(path, params: DecoderParams) -> None:
    """Replace the final-stage occupancy predictor and the heads in ``params``."""
    with np.load(path) as arrays:
        last = params.stages[-1]
        try:
            last.srop = SropState(_mlp_from(arrays, "srop", last.srop.predictor),
                                  np.asarray(arrays["srop/alpha"], dtype=np.float64))
            params.heads = HeadParams(_mlp_from(arrays, "semantic", params.heads.semantic),
                                      _mlp_from(arrays, "flow", params.heads.flow))
        except KeyError as exc:
            raise DataError(f"{path}: missing array {exc}") from None


# ---------------------------------------------------------------- run config

ABLATIONS = {
    # flag: (dest, DecoderConfig overrides)
    "--no-oa-sca": {"sca": "vanilla"},
    "--vanilla-sca": {"sca": "vanilla"},
    "--depth-only-sca": {"sca": "depth"},
    "--no-sca": {"sca": "off"},
    "--no-oa-tsa": {"tsa": "vanilla"},
    "--no-tsa": {"tsa": "off"},
    "--no-fusion": {"fusion": False},
    "--one-off-srop": {"srop": "one-off"},
    "--occupancy-collapse": {"bev_collapse": "occupancy"},
    "--baseline": {"sca": "vanilla", "tsa": "vanilla", "fusion": False, "srop": "one-off"},
}


def _coerce(name: str, raw: str):
    kinds = {f.name: f.type for f in fields(DecoderConfig)}
    if name not in kinds:
        raise DataError(f"unknown decoder key '{name}'")
    default = getattr(DecoderConfig(), name)
    if isinstance(default, bool):
        low = raw.strip().lower()
        if low not in configparser.ConfigParser.BOOLEAN_STATES:
            raise DataError(f"decoder.{name}: not a boolean: {raw!r}")
        return configparser.ConfigParser.BOOLEAN_STATES[low]
    if isinstance(default, int):
        return int(raw)
    if isinstance(default, float):
        return float(raw)
    if isinstance(default, tuple):
        return tuple(int(v) for v in raw.replace(",", " ").split())
    return raw.strip()


def load_run_config(path: Optional[str]) -> dict:
    """Decoder overrides from an INI file with a ``[decoder]`` section."""
    if not path:
        return {}
    parser = configparser.ConfigParser(inline_comment_prefixes=("#", ";"))
    try:
        with open(path, "r", encoding="utf-8") as fh:
            parser.read_file(fh, source=path)
    except configparser.Error as exc:
        raise DataError(f"{path}: {exc}") from None
    out = {}
    if parser.has_section("decoder"):
        for key, raw in parser.items("decoder"):
            try:
                out[key] = _coerce(key, raw)
            except ValueError as exc:
                raise DataError(f"{path}: decoder.{key}: {exc}") from None
    return out


def decoder_config(args, num_classes: int, channels: int) -> DecoderConfig:
    over = load_run_config(getattr(args, "config", None))
    for flag, changes in ABLATIONS.items():
        if getattr(args, flag[2:].replace("-", "_"), False):
            over.update(changes)
    if getattr(args, "gate", None):
        over["gate_mode"] = args.gate
    over["seed"] = args.seed
    over.setdefault("num_classes", num_classes)
    over.setdefault("channels", channels)
    try:
        cfg = DecoderConfig(**over)
    except (TypeError, ValueError) as exc:
        raise DataError(f"bad decoder configuration: {exc}") from None
    if cfg.num_classes != num_classes or cfg.channels != channels:
        raise DimMismatch(f"config expects K={cfg.num_classes}, C={cfg.channels}; scene has K={num_classes}, "
                          f"C={channels}")
    return cfg


# ---------------------------------------------------------------- commands

def sha256_dir(directory) -> str:
    h = hashlib.sha256()
    for name in sorted(os.listdir(directory)):
        path = os.path.join(directory, name)
        if os.path.isfile(path):
            h.update(name.encode())
            h.update(gridio.file_checksum(path).encode())
    return h.hexdigest()


def cmd_gen_scene(args) -> int:
    if args.config:
        with open(args.config, "r", encoding="utf-8") as fh:
            text = fh.read()
        source = args.config
    else:
        text = scenegen.default_config_text(args.seed, args.static)
        source = "<default>"
    cfg = scenegen.parse_config(text, source)
    if args.frames is not None:
        cfg.num_frames = args.frames
        cfg.validate()
    scenegen.write_scene(cfg, args.out, text)
    print(f"wrote {cfg.num_frames} frames to {args.out}")
    return EXIT_OK


def _frame_inputs(truth) -> FrameInputs:
    return FrameInputs(truth.features, truth.depths, truth.cameras, truth.ego_pose, truth.timestamp)


def _open_scene(directory) -> scenegen.Scene:
    try:
        return scenegen.Scene.open(directory)
    except FileNotFoundError:
        raise DataError(f"{directory}: no manifest.json") from None
    except ValueError as exc:
        raise DataError(str(exc)) from None


def cmd_run(args) -> int:
    scene = _open_scene(args.scene)
    m = scene.manifest
    cfg = decoder_config(args, m["num_classes"], m["channels"])
    dec = CascadeDecoder(cfg, scene.spec)
    if args.params:
        load_head_params(args.params, dec.params)
    os.makedirs(args.out, exist_ok=True)
    n = scene.num_frames if args.frames is None else min(args.frames, scene.num_frames)
    frames = []
    for t in range(n):
        try:
            truth = scene.frame(t)
        except FileNotFoundError as exc:
            raise DataError(f"missing frame {t}: {exc.filename}") from None
        pred = dec.step(_frame_inputs(truth))
        if not (np.all(np.isfinite(pred.logits)) and np.all(np.isfinite(pred.flow))):
            raise Diverged(f"non-finite prediction at frame {t}")
        stem = f"pred_{t:04d}"
        files = {"semantic": f"{stem}.stcg", "flow": f"{stem}_flow.stcg", "logits": f"{stem}_logits.stcg",
                 "weights": [f"{stem}_w{i + 1}.stcg" for i in range(cfg.num_stages)]}
        gridio.write_grid(os.path.join(args.out, files["semantic"]), pred.labels, GridKind.SEMANTIC)
        gridio.write_grid(os.path.join(args.out, files["flow"]), pred.flow, GridKind.FLOW)
        gridio.write_grid(os.path.join(args.out, files["logits"]), pred.logits, GridKind.FEATURE)
        for name, w in zip(files["weights"], pred.stage_weights):
            gridio.write_grid(os.path.join(args.out, name), w, GridKind.WEIGHTS)
        frames.append({"index": t, "checksum": pred.checksum(), "files": files})
    manifest = {"kind": "prediction", "seed": cfg.seed, "scene": os.path.abspath(args.scene),
                "decoder": cfg.to_dict(), "params": args.params, "grid": m["grid"],
                "num_classes": m["num_classes"], "foreground": m["foreground"], "frames": frames}
    with open(os.path.join(args.out, "manifest.json"), "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")
    print(f"wrote {n} predictions to {args.out}")
    return EXIT_OK


def _prediction_grids(directory, t: int, manifest: dict):
    """(semantic, flow or None) of frame ``t`` from a prediction or scene directory."""
    entry = manifest["frames"][t]
    files = entry["files"]
    sem = gridio.read_grid(os.path.join(directory, files["semantic"]), GridKind.SEMANTIC)
    flow_path = os.path.join(directory, files.get("flow", ""))
    flow = gridio.read_grid(flow_path, GridKind.FLOW) if files.get("flow") and os.path.exists(flow_path) else None
    return sem, flow


def evaluate_dirs(pred_dir, scene_dir, rays: RayConfig = RayConfig()):
    scene = _open_scene(scene_dir)
    try:
        pm = scenegen.read_manifest(pred_dir)
    except FileNotFoundError:
        raise DataError(f"{pred_dir}: no manifest.json") from None
    spec = scene.spec
    k = scene.manifest["num_classes"]
    fg = scene.manifest["foreground"]
    if pm.get("grid") != scene.manifest["grid"]:
        raise DimMismatch("prediction grid does not match the scene grid")
    n = len(pm["frames"])
    if n > scene.num_frames:
        raise DataError(f"{n} predicted frames but the scene has {scene.num_frames}")
    origins, dirs = generate_query_rays(rays)
    ray_counts = RayCounts.zeros(k)
    vox = VoxelCounts.zeros(k)
    flow_acc: Optional[FlowErrors] = FlowErrors()
    for t in range(n):
        gt_sem, gt_flow = scene.semantic(t), scene.flow(t)
        p_sem, p_flow = _prediction_grids(pred_dir, t, pm)
        if p_sem.shape != gt_sem.shape:
            raise DimMismatch(f"frame {t}: prediction {p_sem.shape} vs ground truth {gt_sem.shape}")
        ph = raycast_batch(p_sem, spec, origins, dirs, rays.max_range)
        gh = raycast_batch(gt_sem, spec, origins, dirs, rays.max_range)
        ray_counts += ray_match(ph, gh, k)
        vox += voxel_counts(p_sem, gt_sem, k)
        if p_flow is None:
            flow_acc = None
        elif flow_acc is not None:
            flow_acc.add(flow_errors(ph, gh, p_flow, gt_flow, fg))
    return build_report(ray_counts, vox, flow_acc)


def cmd_eval(args) -> int:
    report = evaluate_dirs(args.pred, args.scene)
    text = report.to_json()
    if args.out:
        with open(args.out, "w", encoding="utf-8") as fh:
            fh.write(text)
    sys.stdout.write(text)
    return EXIT_OK


def cmd_train_head(args) -> int:
    scene = _open_scene(args.scene)
    m = scene.manifest
    cfg = decoder_config(args, m["num_classes"], m["channels"])
    dec = CascadeDecoder(cfg, scene.spec)
    if args.frame >= scene.num_frames:
        raise DataError(f"frame {args.frame} outside the scene's {scene.num_frames} frames")
    truth = None
    for t in range(args.frame + 1):
        truth = scene.frame(t)
        pred = dec.step(_frame_inputs(truth))
    problem = HeadProblem(pred.traces[-1], truth.semantic, truth.flow, truth.depths, truth.depth_bins,
                          m["num_classes"])
    tc = TrainConfig(steps=args.steps, lr=args.lr, flow_lr=args.flow_lr, foreground=tuple(m["foreground"]))
    result = train_head(problem, dec.params.stages[-1].srop, dec.params.heads, tc)
    os.makedirs(args.out, exist_ok=True)
    save_head_params(os.path.join(args.out, "head_params.npz"), result.srop, result.heads)
    summary = {"steps": args.steps, "lr": args.lr, "flow_lr": args.flow_lr, "seed": args.seed,
               "frame": args.frame, "accuracy": result.accuracy, "miou": result.miou,
               "losses": result.losses}
    with open(os.path.join(args.out, "loss_curve.json"), "w", encoding="utf-8") as fh:
        json.dump(summary, fh, indent=2, sort_keys=True)
        fh.write("\n")
    print(f"accuracy {result.accuracy:.4f} miou {result.miou:.4f} final loss {result.losses[-1]:.6f}")
    return EXIT_OK


def render_bev(labels: np.ndarray) -> np.ndarray:
    """Top-down view: the highest non-empty class of every column; (X, Y, 3) RGB."""
    occupied = labels != 0
    z = labels.shape[2]
    top = z - 1 - np.argmax(occupied[:, :, ::-1], axis=2)
    cls = np.take_along_axis(labels, top[:, :, None], axis=2)[:, :, 0]
    cls = np.where(occupied.any(axis=2), cls, 0)
    return PALETTE[np.clip(cls, 0, len(PALETTE) - 1)]


def render_heatmap(w: np.ndarray) -> np.ndarray:
    """z-averaged occupancy as a black-to-white ramp; (X, Y, 3)."""
    g = np.clip(np.round(w.mean(axis=2) * 255.0), 0, 255).astype(np.uint8)
    return np.repeat(g[:, :, None], 3, axis=2)


def write_ppm(path, rgb: np.ndarray) -> None:
    """Binary P6 pixmap; image rows follow the grid x axis, columns the y axis."""
    rows, cols, _ = rgb.shape
    with open(path, "wb") as fh:
        fh.write(f"P6\n{cols} {rows}\n255\n".encode("ascii"))
        fh.write(np.ascontiguousarray(rgb, dtype=np.uint8).tobytes())


def cmd_render(args) -> int:
    kind, data = gridio.read_grid_kind(args.grid)
    if kind == GridKind.SEMANTIC:
        rgb = render_bev(data)
    elif kind == GridKind.WEIGHTS:
        rgb = render_heatmap(data)
    elif kind == GridKind.FEATURE:
        rgb = render_bev(np.argmax(data, axis=0).astype(np.uint8))
    else:
        raise DataError(f"{args.grid}: cannot render a {kind.name.lower()} grid")
    write_ppm(args.out, rgb)
    if args.heatmap:
        w = gridio.read_grid(args.heatmap, GridKind.WEIGHTS)
        base, ext = os.path.splitext(args.out)
        write_ppm(f"{base}_heat{ext or '.ppm'}", render_heatmap(w))
    return EXIT_OK


# ---------------------------------------------------------------- parser

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="occflow", description="Occupancy and scene-flow cascade toolkit.")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-scene", help="generate a synthetic scene directory")
    g.add_argument("--config", help="scene config file (INI); default scene when omitted")
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--static", action="store_true", help="no box or ego motion (default config only)")
    g.add_argument("--frames", type=int, help="override the frame count")
    g.add_argument("--out", required=True)
    g.set_defaults(func=cmd_gen_scene)

    def decoder_args(sp):
        sp.add_argument("--config", help="run config file with a [decoder] section")
        sp.add_argument("--seed", type=int, default=0, help="parameter and sampling seed")
        sp.add_argument("--gate", choices=("train", "eval", "off"), help="reference point gate mode")
        for flag in ABLATIONS:
            sp.add_argument(flag, action="store_true")

    r = sub.add_parser("run", help="run the decoder over a scene")
    r.add_argument("scene")
    r.add_argument("--out", required=True)
    r.add_argument("--params", help="head parameters from train-head")
    r.add_argument("--frames", type=int, help="only the first N frames")
    decoder_args(r)
    r.set_defaults(func=cmd_run)

    e = sub.add_parser("eval", help="score predictions against a scene")
    e.add_argument("pred", help="prediction directory (or a scene directory)")
    e.add_argument("scene")
    e.add_argument("--out", help="write the metrics document here too")
    e.set_defaults(func=cmd_eval)

    t = sub.add_parser("train-head", help="fit the occupancy predictor and heads on one frame")
    t.add_argument("scene")
    t.add_argument("--out", required=True)
    t.add_argument("--steps", type=int, default=500)
    t.add_argument("--lr", type=float, default=TrainConfig.lr)
    t.add_argument("--flow-lr", type=float, default=TrainConfig.flow_lr)
    t.add_argument("--frame", type=int, default=0)
    decoder_args(t)
    t.set_defaults(func=cmd_train_head)

    v = sub.add_parser("render", help="top-down image of a grid file")
    v.add_argument("grid")
    v.add_argument("--out", required=True)
    v.add_argument("--heatmap", help="also render this weights grid")
    v.set_defaults(func=cmd_render)
    return p


def main(argv: Optional[List[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_USAGE
    try:
        return args.func(args)
    except (Diverged, FloatingPointError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (DataError, DimMismatch, GridFormatError, scenegen.ConfigError, OSError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
