"""Independent reference implementations used as test oracles."""

import numpy as np
from scipy.ndimage import map_coordinates

from occflow.geometry import relative_pose


def march_rays(grid, spec, origins, directions, max_range, substeps=16):
    """Fixed-step marcher: first occupied sample at spacing voxel/substeps.

    Returns (N, 3) voxel indices, -1 for misses.
    """
    step = spec.voxel_size / substeps
    ts = np.arange(0.0, max_range, step)
    lo = np.asarray(spec.origin)
    dims = np.asarray(spec.dims)
    out = np.full((origins.shape[0], 3), -1, dtype=np.int64)
    for s in range(0, origins.shape[0], 256):
        o = origins[s:s + 256, None, :]
        d = directions[s:s + 256, None, :]
        idx = np.floor((o + ts[None, :, None] * d - lo) / spec.voxel_size).astype(np.int64)
        ok = np.all((idx >= 0) & (idx < dims), axis=2)
        safe = np.where(ok[..., None], idx, 0)
        lab = np.where(ok, grid[safe[..., 0], safe[..., 1], safe[..., 2]], 0)
        hit = lab != 0
        first = np.argmax(hit, axis=1)
        any_hit = hit.any(axis=1)
        rows = np.arange(first.size)
        out[s:s + 256][any_hit] = idx[rows, first][any_hit]
    return out


def chord_length(spec, voxel, origin, direction):
    """Length of the ray segment (t >= 0) inside one voxel."""
    lo = np.asarray(spec.origin) + np.asarray(voxel) * spec.voxel_size
    hi = lo + spec.voxel_size
    with np.errstate(divide="ignore", invalid="ignore"):
        t0 = (lo - origin) / direction
        t1 = (hi - origin) / direction
    t_in = np.max(np.minimum(t0, t1))
    t_out = np.min(np.maximum(t0, t1))
    return max(0.0, t_out - max(t_in, 0.0))


def dense_history(grid, spec, pose_t, pose_past):
    """Every cell center of the current frame resampled from a past grid (C, X*Y*Z)."""
    centers = spec.cell_centers().reshape(-1, 3)
    past = relative_pose(pose_t, pose_past).apply(centers)
    rel = (past - np.asarray(spec.origin)) / spec.voxel_size
    inside = np.all((rel >= 0) & (rel < np.asarray(spec.dims)), axis=1)
    coords = (rel - 0.5).T
    out = np.stack([map_coordinates(grid[c], coords, order=1, mode="nearest") for c in range(grid.shape[0])])
    return out * inside


def dense_fusion(v, w, history_entries, pose_t, spec, streams):
    """Concatenation fusion at every voxel: v + sum over streams of W [v; h_1..h_k; embed(w)] + b.

    ``history_entries`` are (grid, pose) pairs, most recent first. ``streams``
    are (weight, bias, k, embed_weight, embed_bias) tuples.
    """
    c = v.shape[0]
    flat_v = v.reshape(c, -1)
    flat_w = w.reshape(-1)
    out = flat_v.copy()
    for weight, bias, k, ew, eb in streams:
        hist = [dense_history(g, spec, pose_t, p) for g, p in history_entries[:k]]
        hist += [np.zeros_like(flat_v)] * (k - len(hist))
        embed = np.outer(ew, flat_w) + eb[:, None]
        out = out + weight @ np.concatenate([flat_v, *hist, embed]) + bias[:, None]
    return out.reshape(v.shape)


def _bilinear_clamped(img, r, s):
    _, nr, ns = img.shape
    r = min(max(r, 0.0), nr - 1.0)
    s = min(max(s, 0.0), ns - 1.0)
    r0, s0 = int(np.floor(r)), int(np.floor(s))
    r1, s1 = min(r0 + 1, nr - 1), min(s0 + 1, ns - 1)
    a, b = r - r0, s - s0
    return ((1 - a) * (1 - b) * img[:, r0, s0] + (1 - a) * b * img[:, r0, s1]
            + a * (1 - b) * img[:, r1, s0] + a * b * img[:, r1, s1])


def loop_vanilla_sca(b, image_feats, cameras, spec, params, levels):
    """Point-by-point spatial cross-attention with unit weights.

    Every cell center at the given z levels is projected into every camera; the
    deformable kernel is conditioned on the BEV query and the per-point result is
    averaged over the cameras that see the point, then summed up the column.
    """
    c, nx, ny = b.shape
    n_pts = params.logit_bias.shape[0]
    out = np.zeros((c, nx, ny))
    for i in range(nx):
        for j in range(ny):
            q = b[:, i, j]
            offsets = (params.offset_weight @ q + params.offset_bias).reshape(n_pts, 2)
            logits = params.logit_weight @ q + params.logit_bias
            attn = np.exp(logits - logits.max())
            attn /= attn.sum()
            for k in levels:
                p = np.asarray(spec.origin) + (np.array([i, j, k]) + 0.5) * spec.voxel_size
                total, seen = np.zeros(c), 0
                for feat, cam in zip(image_feats, cameras):
                    pc = cam.extrinsics.rotation @ p + cam.extrinsics.translation
                    if pc[2] <= 1e-6:
                        continue
                    u = (cam.intrinsics[0, 0] * pc[0] + cam.intrinsics[0, 2] * pc[2]) / pc[2]
                    v = (cam.intrinsics[1, 1] * pc[1] + cam.intrinsics[1, 2] * pc[2]) / pc[2]
                    h, w = cam.image_size
                    if not (0 <= u < w and 0 <= v < h):
                        continue
                    seen += 1
                    for m in range(n_pts):
                        total += attn[m] * _bilinear_clamped(feat, v - 0.5 + offsets[m, 0], u - 0.5 + offsets[m, 1])
                if seen:
                    out[:, i, j] += total / seen
    return out
