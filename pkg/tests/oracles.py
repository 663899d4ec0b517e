"""Brute-force reference implementations used as test oracles.

Everything here is deliberately naive (explicit loops, BFS queues, dense
kernels) and independent of the library's vectorized code paths.
"""

from __future__ import annotations

import math
from collections import deque


import numpy as np


def block_mean_3d(data: np.ndarray, voxel, target) -> np.ndarray:
    """Nested-loop box average with the voxel-centre rule."""
    nz, ny, nx = data.shape
    vx, vy, vz = voxel
    tx, ty, tz = target

    def bins(n, h, t):
        return [int(math.floor(((i + 0.5) * h) / t)) for i in range(n)]

    bx, by, bz = bins(nx, vx, tx), bins(ny, vy, ty), bins(nz, vz, tz)
    out = np.zeros((bz[-1] + 1, by[-1] + 1, bx[-1] + 1))
    cnt = np.zeros_like(out)
    for z in range(nz):
        for y in range(ny):
            for x in range(nx):
                out[bz[z], by[y], bx[x]] += data[z, y, x]
                cnt[bz[z], by[y], bx[x]] += 1
    return out / cnt


def mirror_index(i: int, n: int) -> int:
    if n == 1:
        return 0
    period = 2 * (n - 1)
    j = abs(i) % period
    return period - j if j > n - 1 else j


def dense_gaussian_blur(volume: np.ndarray, sigmas_vox) -> np.ndarray:
    """Direct dense convolution with the full product kernel (mirror pad)."""
    volume = np.asarray(volume, dtype=np.float64)
    nd = volume.ndim
    sigmas = [float(s) for s in (sigmas_vox if np.iterable(sigmas_vox) else [sigmas_vox] * nd)]
    radii = [max(1, int(math.ceil(4 * s))) for s in sigmas]
    axes1d = []
    for s, r in zip(sigmas, radii):
        ax = np.exp(-0.5 * (np.arange(-r, r + 1) / s) ** 2)
        axes1d.append(ax)
    kernel = axes1d[0]
    for ax in axes1d[1:]:
        kernel = np.multiply.outer(kernel, ax)
    kernel = kernel / kernel.sum()
    idx = [np.array([mirror_index(i, volume.shape[d]) for i in
                     range(-radii[d], volume.shape[d] + radii[d])])
           for d in range(nd)]
    padded = volume[np.ix_(*idx)]
    out = np.zeros_like(volume)
    for offset in np.ndindex(*kernel.shape):
        w = kernel[offset]
        sl = tuple(slice(o, o + volume.shape[d]) for d, o in enumerate(offset))
        out += w * padded[sl]
    return out


def flood_fill_components(mask: np.ndarray, offsets) -> list[set]:
    """BFS connected components; returns a list of voxel-index sets."""
    mask = np.asarray(mask, dtype=bool)
    seen = np.zeros_like(mask)
    comps = []
    dims = mask.shape
    for seed in map(tuple, np.argwhere(mask)):
        if seen[seed]:
            continue
        comp = set()
        queue = deque([seed])
        seen[seed] = True
        while queue:
            cur = queue.popleft()
            comp.add(cur)
            for off in offsets:
                nxt = tuple(c + o for c, o in zip(cur, off))
                if all(0 <= v < d for v, d in zip(nxt, dims)) and mask[nxt] and not seen[nxt]:
                    seen[nxt] = True
                    queue.append(nxt)
        comps.append(comp)
    return comps


OFFSETS_6 = [(1, 0, 0), (-1, 0, 0), (0, 1, 0), (0, -1, 0), (0, 0, 1), (0, 0, -1)]
OFFSETS_8 = [(dy, dx) for dy in (-1, 0, 1) for dx in (-1, 0, 1) if (dy, dx) != (0, 0)]


def largest_component_oracle(mask: np.ndarray) -> np.ndarray:
    """Largest 6-connected component, smallest-min-index tie break."""
    comps = flood_fill_components(mask, OFFSETS_6)
    out = np.zeros(mask.shape, dtype=bool)
    if not comps:
        return out
    strides = (mask.shape[1] * mask.shape[2], mask.shape[2], 1)

    def min_linear(comp):
        return min(sum(c * s for c, s in zip(v, strides)) for v in comp)

    best = max(comps, key=lambda c: (len(c), -min_linear(c)))
    for v in best:
        out[v] = True
    return out


def rough_localize_oracle(volume: np.ndarray, voxel_vox_um, t_raw: float, sigma_um: float) -> np.ndarray:
    """Dense-convolution + flood-fill reference for injection localization."""
    binary = (volume > t_raw).astype(np.float64)
    if not binary.any():
        return np.zeros(volume.shape, dtype=bool)
    vz, vy, vx = voxel_vox_um
    smoothed = dense_gaussian_blur(binary, (sigma_um / vz, sigma_um / vy, sigma_um / vx))
    t_low = 0.5 * smoothed.max()
    return largest_component_oracle(smoothed > t_low)


def subtract_oracle(cg, cr, t):
    out = np.zeros(cg.shape)
    for y in range(cg.shape[0]):
        for x in range(cg.shape[1]):
            out[y, x] = 0.0 if cg[y, x] < t * cr[y, x] else cg[y, x] - t * cr[y, x]
    return out


def reconstruct_oracle(marker: np.ndarray, mask: np.ndarray) -> np.ndarray:
    """Flood fill seeded at the marker, constrained to the mask (8-conn)."""
    out = np.zeros(mask.shape, dtype=bool)
    seen = np.zeros(mask.shape, dtype=bool)
    queue = deque(map(tuple, np.argwhere(marker)))
    for s in queue:
        seen[s] = True
    while queue:
        cy, cx = queue.popleft()
        out[cy, cx] = True
        for dy, dx in OFFSETS_8:
            ny, nx = cy + dy, cx + dx
            if 0 <= ny < mask.shape[0] and 0 <= nx < mask.shape[1] \
                    and mask[ny, nx] and not seen[ny, nx]:
                seen[ny, nx] = True
                queue.append((ny, nx))
    return out


def dilate_oracle(binary: np.ndarray, radius: int) -> np.ndarray:
    h, w = binary.shape
    out = np.zeros_like(binary, dtype=bool)
    for y in range(h):
        for x in range(w):
            if not binary[y, x]:
                continue
            for dy in range(-radius, radius + 1):
                for dx in range(-radius, radius + 1):
                    if dy * dy + dx * dx <= radius * radius:
                        ny, nx = y + dy, x + dx
                        if 0 <= ny < h and 0 <= nx < w:
                            out[ny, nx] = True
    return out


def erode_oracle(binary: np.ndarray, radius: int) -> np.ndarray:
    """Erosion treating outside the grid as foreground (matches a padded
    closing, where the dilation halo extends beyond the crop)."""
    h, w = binary.shape
    out = np.ones_like(binary, dtype=bool)
    for y in range(h):
        for x in range(w):
            for dy in range(-radius, radius + 1):
                for dx in range(-radius, radius + 1):
                    if dy * dy + dx * dx <= radius * radius:
                        ny, nx = y + dy, x + dx
                        if 0 <= ny < h and 0 <= nx < w and not binary[ny, nx]:
                            out[y, x] = False
    return out


def close_oracle(binary: np.ndarray, radius: int) -> np.ndarray:
    pad = 2 * radius
    padded = np.zeros((binary.shape[0] + 2 * pad, binary.shape[1] + 2 * pad), dtype=bool)
    padded[pad:-pad, pad:-pad] = binary
    closed = erode_oracle(dilate_oracle(padded, radius), radius)
    return closed[pad:-pad, pad:-pad]


def optimal_match_count(pred_points, truth_points, radius) -> int:
    """Maximum bipartite matching size (augmenting-path search)."""
    pred = list(map(tuple, pred_points))
    truth = list(map(tuple, truth_points))

    def ok(p, t):
        return p[2] == t[2] and (p[0] - t[0]) ** 2 + (p[1] - t[1]) ** 2 <= radius ** 2

    edges = [[j for j, t in enumerate(truth) if ok(p, t)] for p in pred]
    owner = [-1] * len(truth)

    def try_assign(i, seen):
        for j in edges[i]:
            if not seen[j]:
                seen[j] = True
                if owner[j] < 0 or try_assign(owner[j], seen):
                    owner[j] = i
                    return True
        return False

    matched = 0
    for i in range(len(pred)):
        if try_assign(i, [False] * len(truth)):
            matched += 1
    return matched


def linear_resample_oracle(data: np.ndarray, coords_zyx) -> float:
    """Scalar trilinear interpolation with zero outside the domain."""
    nz, ny, nx = data.shape
    cz, cy, cx = coords_zyx
    z0, y0, x0 = math.floor(cz), math.floor(cy), math.floor(cx)
    total = 0.0
    for dz in (0, 1):
        for dy in (0, 1):
            for dx in (0, 1):
                wz = 1 - abs(cz - (z0 + dz))
                wy = 1 - abs(cy - (y0 + dy))
                wx = 1 - abs(cx - (x0 + dx))
                w = wz * wy * wx
                if w == 0:
                    continue
                z, y, x = z0 + dz, y0 + dy, x0 + dx
                if 0 <= z < nz and 0 <= y < ny and 0 <= x < nx:
                    total += w * data[z, y, x]
    return total


def psnr(reference: np.ndarray, result: np.ndarray, peak: float = 65535.0) -> float:
    mse = float(np.mean((reference - result) ** 2))
    if mse == 0:
        return float("inf")
    return 10.0 * math.log10(peak * peak / mse)
