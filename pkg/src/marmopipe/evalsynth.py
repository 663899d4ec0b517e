"""Synthetic phantoms with exact ground truth, plus detection/segmentation
evaluation utilities.

The generator builds noiseless integer "scenes" per section and channel,
cuts them into overlapping tiles (the overlap is chosen so that after the
stitcher's margin crop the configured blend overlap remains), applies the
multiplicative vignette, and finally either quantizes (noiseless mode) or
draws Poisson counts around the vignetted means.  Ground truth is derived
from the same integer scenes:

* tracer truth uses the channel-subtraction formula directly on the scenes,
* the rough injection mask is computed by deliberately naive reference code
  (per-voxel block averaging, dense kernel convolution, BFS flood fill) that
  shares no code with the production pipeline,
* region tables are accumulated with per-region loops over the truth grids.

Structures are kept disjoint by construction (vessels are carved around
axons, axons avoid the injection neighborhood), which is what makes the
noiseless source/target tables exactly recoverable end to end.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field as dc_field, fields as dc_fields
from pathlib import Path

import numpy as np

from .imgcore import Stack3D, Tile2D, U16_MAX, write_stack
from .injsite import CellPointCloud
from .mapping import ConnectivityTable, RegionAtlas
from .tracerseg import morph_close


# ---------------------------------------------------------------------------
# phantom specification
# ---------------------------------------------------------------------------


@dataclass
class PhantomSpec:
    """Everything that determines a phantom; the seed pins all randomness."""

    seed: int = 0
    grid_x: int = 2
    grid_y: int = 2
    tile_extent: int = 360
    overlap_px: int = 80           # blend overlap left after margin cropping
    margin_px: int = 50
    n_sections: int = 6
    pitch_um: float = 1.34
    z_step_um: float = 50.0
    vignette_corner: float = 1.0   # 1.0 = flat field; 0.6 = strong vignette
    bg_cr: float = 100.0
    bg_cb: float = 300.0
    bg_cg: float = -1.0            # < 0: derived as round(crosstalk * bg_cr)
    crosstalk: float = 1.1
    poisson: bool = True
    n_cells: int = 30
    cell_amp: float = 20000.0
    cell_sigma: float = 3.0
    cell_cg_amp: float = 30.0
    cell_min_sep: float = 14.0
    n_axons: int = 4
    axon_amp: float = 1200.0
    axon_width: float = 3.0
    axon_steps: int = 400
    n_vessels: int = 2
    vessel_amp: float = 1500.0
    vessel_radius: float = 25.0
    vessel_width: float = 4.0
    inj_amp: float = 10000.0       # 0 disables the injection box
    inj_frac_x: float = 0.22       # injection centre as section fraction
    inj_frac_y: float = 0.5
    inj_size_px: int = 120
    inj_z0: int = 1
    inj_z1: int = 4
    region_bound_1: float = 0.45   # atlas slab boundaries, fractions of width
    region_bound_2: float = 0.70

    @property
    def step_px(self) -> int:
        step = self.tile_extent - self.overlap_px - 2 * self.margin_px
        if step < 1:
            raise ValueError("tile extent too small for overlap + margins")
        return step

    @property
    def full_extent(self) -> tuple[int, int]:
        """Rendered scene extent (covers the tile grid before cropping)."""
        w = self.step_px * (self.grid_x - 1) + self.tile_extent
        h = self.step_px * (self.grid_y - 1) + self.tile_extent
        return (w, h)

    @property
    def section_extent(self) -> tuple[int, int]:
        """Extent of the stitched output: the scene minus the margin apron."""
        w, h = self.full_extent
        return (w - 2 * self.margin_px, h - 2 * self.margin_px)

    def validate(self) -> None:
        w, h = self.section_extent
        if w < 8 or h < 8:
            raise ValueError("section extent too small after margin cropping")
        if self.inj_amp > 0:
            if self.inj_size_px + 8 * self.cell_sigma >= min(w, h):
                raise ValueError("injection box does not fit the section")
            if not 0 <= self.inj_z0 <= self.inj_z1 < self.n_sections:
                raise ValueError("injection z range outside the stack")
        if not 0 < self.region_bound_1 < self.region_bound_2 < 1:
            raise ValueError("region bounds must satisfy 0 < b1 < b2 < 1")

    def save(self, path) -> None:
        lines = [f"{f.name}={getattr(self, f.name)!r}" for f in dc_fields(self)]
        Path(path).write_text("\n".join(lines) + "\n")

    @classmethod
    def load(cls, path) -> "PhantomSpec":
        kwargs = {}
        casts = {f.name: f.type for f in dc_fields(cls)}
        for line in Path(path).read_text().splitlines():
            line = line.strip()
            if not line or line.startswith("#") or "=" not in line:
                continue
            key, value = line.split("=", 1)
            key = key.strip()
            if key not in casts:
                raise ValueError(f"unknown phantom key {key!r}")
            kind = casts[key]
            if kind == "bool" or kind is bool:
                kwargs[key] = value.strip() in ("1", "True", "true")
            elif kind == "int" or kind is int:
                kwargs[key] = int(value)
            else:
                kwargs[key] = float(value)
        return cls(**kwargs)


@dataclass
class GroundTruth:
    """Exact per-structure truth for one phantom."""

    vignette: np.ndarray
    cells: np.ndarray                 # (n, 3) int (x, y, z) in the section frame
    axon_pixels: np.ndarray           # (nz, h, w) bool, as rendered
    vessel_pixels: np.ndarray
    tracer_mask: np.ndarray           # closed mask, what the pipeline recovers
    tracer_signal: np.ndarray
    injection_mask_low: np.ndarray    # (nzl, nyl, nxl) bool
    atlas_high: RegionAtlas
    atlas_low: RegionAtlas
    table: ConnectivityTable
    scenes: dict = dc_field(default_factory=dict)  # channel -> noiseless stack

    def save(self, out_dir) -> None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        pitch, zs = self.atlas_high.voxel_size[0], self.atlas_high.voxel_size[2]
        write_stack(Stack3D(self.tracer_mask.astype(np.float64), (pitch, pitch, zs), dtype="u16"),
                    out / "tracer_mask")
        write_stack(Stack3D(self.tracer_signal, (pitch, pitch, zs), dtype="f32"),
                    out / "tracer_signal")
        write_stack(Stack3D(self.injection_mask_low.astype(np.float64),
                            self.atlas_low.voxel_size, dtype="u16"),
                    out / "injection_mask_low")
        write_stack(Stack3D(self.vignette[None], (pitch, pitch, 1.0), dtype="f32"),
                    out / "vignette")
        self.atlas_high.save(out / "atlas_high")
        self.atlas_low.save(out / "atlas_low")
        self.table.save(out / "table.txt")
        CellPointCloud(points=self.cells, scores=np.ones(len(self.cells))).save(out / "cells.txt")


# ---------------------------------------------------------------------------
# building blocks
# ---------------------------------------------------------------------------


def vignette_field(extent: int, corner: float = 0.6) -> np.ndarray:
    """Radially symmetric raised-cosine falloff, mean-normalized.

    The raw profile is 1 at the tile centre and ``corner`` at the corners.
    """
    if not 0 < corner <= 1.0:
        raise ValueError("corner factor must be in (0, 1]")
    if corner == 1.0:
        return np.ones((extent, extent))
    c = (extent - 1) / 2.0
    yy, xx = np.mgrid[0:extent, 0:extent]
    r = np.hypot(yy - c, xx - c) / math.hypot(c, c)
    raw = 1.0 - (1.0 - corner) * 0.5 * (1.0 - np.cos(np.pi * np.minimum(r, 1.0)))
    return raw / raw.mean()


def render_cells(extent_wh, centers, amp: float, sigma: float) -> np.ndarray:
    """Additive Gaussian blobs (cut at 4 sigma) on a zero canvas."""
    w, h = extent_wh
    canvas = np.zeros((h, w))
    r = int(math.ceil(4 * sigma))
    span = np.arange(-r, r + 1)
    blob = amp * np.exp(-0.5 * (span[:, None] ** 2 + span[None, :] ** 2) / sigma ** 2)
    for cx, cy in centers:
        y0, y1 = max(0, cy - r), min(h, cy + r + 1)
        x0, x1 = max(0, cx - r), min(w, cx + r + 1)
        canvas[y0:y1, x0:x1] += blob[y0 - (cy - r):y1 - (cy - r), x0 - (cx - r):x1 - (cx - r)]
    return canvas


def _place_points(rng, n, x_range, y_range, min_sep, max_tries=3000):
    points = []
    tries = 0
    while len(points) < n and tries < max_tries:
        tries += 1
        x = int(rng.integers(x_range[0], x_range[1]))
        y = int(rng.integers(y_range[0], y_range[1]))
        if all((x - px) ** 2 + (y - py) ** 2 >= min_sep ** 2 for px, py in points):
            points.append((x, y))
    if len(points) < n:
        raise ValueError(f"could not place {n} points with separation {min_sep}")
    return points


def _random_walk_mask(rng, shape, steps, width, forbidden=None) -> np.ndarray:
    """Rasterized smoothed random-walk polyline of the given width."""
    h, w = shape
    mask = np.zeros(shape, dtype=bool)
    y = float(rng.uniform(0.1 * h, 0.9 * h))
    x = float(rng.uniform(0.1 * w, 0.9 * w))
    theta = float(rng.uniform(0, 2 * np.pi))
    r = max(0.5, width / 2.0)
    ri = int(math.ceil(r))
    dy, dx = np.mgrid[-ri:ri + 1, -ri:ri + 1]
    stamp = (dy ** 2 + dx ** 2) <= r ** 2
    sy, sx = np.nonzero(stamp)
    sy, sx = sy - ri, sx - ri
    for _ in range(steps):
        theta += float(rng.normal(0.0, 0.25))
        y += math.sin(theta)
        x += math.cos(theta)
        if not (ri + 1 <= y < h - ri - 1 and ri + 1 <= x < w - ri - 1):
            break
        yy = sy + int(round(y))
        xx = sx + int(round(x))
        mask[yy, xx] = True
    if forbidden is not None:
        mask &= ~forbidden
    return mask


def _ring_mask(shape, cx, cy, radius, width) -> np.ndarray:
    h, w = shape
    yy, xx = np.mgrid[0:h, 0:w]
    d = np.hypot(yy - cy, xx - cx)
    return np.abs(d - radius) <= width / 2.0


# -- deliberately naive reference implementations (truth side) --------------


def _block_mean_low(volume: np.ndarray, voxel, target: float) -> np.ndarray:
    """Per-target-voxel box average using the voxel-centre rule."""
    nz, ny, nx = volume.shape
    vx, vy, vz = voxel

    def bins(n, h):
        return np.floor(((np.arange(n) + 0.5) * h) / target).astype(int)

    bx, by, bz = bins(nx, vx), bins(ny, vy), bins(nz, vz)
    out = np.zeros((bz[-1] + 1, by[-1] + 1, bx[-1] + 1))
    for tz in range(out.shape[0]):
        zsel = bz == tz
        for ty in range(out.shape[1]):
            ysel = by == ty
            sub = volume[zsel][:, ysel, :]
            for tx in range(out.shape[2]):
                block = sub[:, :, bx == tx]
                out[tz, ty, tx] = block.sum() / block.size
    return out


def _mirror_axis(n: int, radius: int) -> np.ndarray:
    # mirror extension without edge repeat: triangle fold of period 2(n-1)
    idx = np.arange(-radius, n + radius)
    if n == 1:
        return np.zeros_like(idx)
    j = np.abs(idx) % (2 * (n - 1))
    return np.where(j > n - 1, 2 * (n - 1) - j, j)


def _dense_gaussian_blur(volume: np.ndarray, sigma_vox: float) -> np.ndarray:
    """Full 3D kernel accumulated offset by offset over a mirrored pad."""
    r = max(1, int(math.ceil(4 * sigma_vox)))
    ax = np.arange(-r, r + 1)
    k1 = np.exp(-0.5 * (ax / sigma_vox) ** 2)
    kernel = k1[:, None, None] * k1[None, :, None] * k1[None, None, :]
    kernel /= kernel.sum()
    nz, ny, nx = volume.shape
    padded = volume[np.ix_(_mirror_axis(nz, r), _mirror_axis(ny, r), _mirror_axis(nx, r))]
    out = np.zeros_like(volume, dtype=np.float64)
    for iz in range(2 * r + 1):
        for iy in range(2 * r + 1):
            for ix in range(2 * r + 1):
                out += kernel[iz, iy, ix] * padded[iz:iz + nz, iy:iy + ny, ix:ix + nx]
    return out


def _bfs_largest(mask: np.ndarray) -> np.ndarray:
    """Largest 6-connected component via a queue flood fill."""
    from collections import deque

    mask = mask.astype(bool)
    seen = np.zeros_like(mask)
    best = None
    best_size = 0
    nz, ny, nx = mask.shape
    for seed in np.argwhere(mask):
        z, y, x = (int(v) for v in seed)
        if seen[z, y, x]:
            continue
        comp = []
        queue = deque([(z, y, x)])
        seen[z, y, x] = True
        while queue:
            cz, cy, cx = queue.popleft()
            comp.append((cz, cy, cx))
            for dz, dy, dx in ((1, 0, 0), (-1, 0, 0), (0, 1, 0), (0, -1, 0), (0, 0, 1), (0, 0, -1)):
                tz, ty, tx = cz + dz, cy + dy, cx + dx
                if 0 <= tz < nz and 0 <= ty < ny and 0 <= tx < nx \
                        and mask[tz, ty, tx] and not seen[tz, ty, tx]:
                    seen[tz, ty, tx] = True
                    queue.append((tz, ty, tx))
        if len(comp) > best_size:
            best_size = len(comp)
            best = comp
    out = np.zeros_like(mask)
    if best:
        for z, y, x in best:
            out[z, y, x] = True
    return out


def reference_rough_localize(low_cb: np.ndarray, voxel_um: float, t_raw: float, sigma_um: float) -> np.ndarray:
    """Reference injection mask: dense convolution + flood fill."""
    binary = (low_cb > t_raw).astype(np.float64)
    if not binary.any():
        return np.zeros(low_cb.shape, dtype=bool)
    smoothed = _dense_gaussian_blur(binary, sigma_um / voxel_um)
    return _bfs_largest(smoothed > 0.5 * smoothed.max())


# ---------------------------------------------------------------------------
# generation
# ---------------------------------------------------------------------------


def _atlas_labels(shape_zyx, voxel_x_um, bound1_um, bound2_um) -> np.ndarray:
    nz, ny, nx = shape_zyx
    x_um = (np.arange(nx) + 0.5) * voxel_x_um
    row = 1 + (x_um >= bound1_um).astype(np.int64) + (x_um >= bound2_um).astype(np.int64)
    return np.broadcast_to(row, (nz, ny, nx)).copy()


def generate_phantom(spec: PhantomSpec):
    """Render a phantom; returns ``(tiles, truth)``.

    ``tiles`` maps channel tag to the list of Tile2D covering all sections.
    The vignette is applied to the corrected channels (C_R, C_G) only, since
    the pipeline passes C_B through uncorrected; ground-truth grids live on
    the stitched output frame (the scene minus the margin apron).
    """
    spec.validate()
    wf, hf = spec.full_extent
    w, h = spec.section_extent  # stitched output frame (scene minus apron)
    m = spec.margin_px
    nz = spec.n_sections
    names = {1: "slab_left", 2: "slab_middle", 3: "slab_right"}

    ss = np.random.SeedSequence(spec.seed)
    struct_ss, noise_ss = ss.spawn(2)
    rng = np.random.default_rng(struct_ss)

    bg_cg = spec.bg_cg if spec.bg_cg >= 0 else float(round(spec.crosstalk * spec.bg_cr))

    # injection box in the stitched frame
    if spec.inj_amp > 0:
        icx, icy = int(spec.inj_frac_x * w), int(spec.inj_frac_y * h)
        half = spec.inj_size_px // 2
        inj_rect = (icx - half, icy - half, icx - half + spec.inj_size_px,
                    icy - half + spec.inj_size_px)
    else:
        inj_rect = None

    # cells: inside the injection box, spread over its z range
    cells = []
    if spec.n_cells > 0:
        pad = int(4 * spec.cell_sigma) + 2
        if inj_rect is not None:
            x_range = (inj_rect[0] + pad, inj_rect[2] - pad)
            y_range = (inj_rect[1] + pad, inj_rect[3] - pad)
            z_lo, z_hi = spec.inj_z0, spec.inj_z1
        else:
            x_range, y_range = (pad, w - pad), (pad, h - pad)
            z_lo, z_hi = 0, nz - 1
        per_z = np.sort(rng.integers(z_lo, z_hi + 1, size=spec.n_cells))
        for z in range(nz):
            n_here = int((per_z == z).sum())
            if n_here:
                for x, y in _place_points(rng, n_here, x_range, y_range, spec.cell_min_sep):
                    cells.append((x, y, z))
    cells = np.array(cells, dtype=np.int64).reshape(-1, 3)

    # structure masks in the stitched frame
    axon_px = np.zeros((nz, h, w), dtype=bool)
    vessel_px = np.zeros((nz, h, w), dtype=bool)
    forbidden = np.zeros((h, w), dtype=bool)
    if inj_rect is not None:
        x0, y0, x1, y1 = inj_rect
        g = 20
        forbidden[max(0, y0 - g):y1 + g, max(0, x0 - g):x1 + g] = True
    for _ in range(spec.n_axons):
        z = int(rng.integers(0, nz))
        axon_px[z] |= _random_walk_mask(
            rng, (h, w), spec.axon_steps, spec.axon_width, forbidden=forbidden
        )
    for _ in range(spec.n_vessels):
        z = int(rng.integers(0, nz))
        cx = float(rng.uniform(0.15 * w, 0.85 * w))
        cy = float(rng.uniform(0.15 * h, 0.85 * h))
        ring = _ring_mask((h, w), cx, cy, spec.vessel_radius, spec.vessel_width)
        ring &= ~forbidden
        ring &= ~axon_px[z]  # keep the channel-subtraction truth exact
        vessel_px[z] |= ring

    # noiseless integer scenes on the full frame; structures live inside the
    # stitched window, the apron carries plain background
    win = (slice(m, m + h), slice(m, m + w))
    scenes = {
        "CR": np.zeros((nz, hf, wf)),
        "CG": np.zeros((nz, hf, wf)),
        "CB": np.zeros((nz, hf, wf)),
    }
    for z in range(nz):
        cr = np.full((hf, wf), float(spec.bg_cr))
        cg = np.full((hf, wf), bg_cg)
        cb = np.full((hf, wf), float(spec.bg_cb))
        cr[win][vessel_px[z]] += spec.vessel_amp
        cg[win][vessel_px[z]] += spec.vessel_amp
        cg[win][axon_px[z]] += spec.axon_amp
        here = cells[cells[:, 2] == z]
        if len(here):
            blobs = render_cells((w, h), [(c[0], c[1]) for c in here], 1.0, spec.cell_sigma)
            cb[win] += spec.cell_amp * blobs
            cg[win] += spec.cell_cg_amp * blobs
        if inj_rect is not None and spec.inj_z0 <= z <= spec.inj_z1:
            x0, y0, x1, y1 = inj_rect
            cb[m + y0:m + y1, m + x0:m + x1] += spec.inj_amp
        scenes["CR"][z] = np.clip(np.rint(cr), 0, U16_MAX)
        scenes["CG"][z] = np.clip(np.rint(cg), 0, U16_MAX)
        scenes["CB"][z] = np.clip(np.rint(cb), 0, U16_MAX)

    nominal = {ch: scenes[ch][:, m:m + h, m:m + w] for ch in scenes}

    # tracer truth from the integer scenes (stitched frame)
    scaled = spec.crosstalk * nominal["CR"]
    t_scene = np.where(nominal["CG"] < scaled, 0.0, nominal["CG"] - scaled)
    tracer_mask = np.stack([morph_close(axon_px[z], 3) for z in range(nz)])
    tracer_signal = np.where(tracer_mask, t_scene, 0.0)

    # injection truth on the 50 µm grid via the naive reference path; the
    # pipeline reads its low stack back from an f32 file, so the truth is
    # computed from the same f32-quantized block means
    low_cb = _block_mean_low(nominal["CB"], (spec.pitch_um, spec.pitch_um, spec.z_step_um), 50.0)
    low_cb = low_cb.astype(np.float32).astype(np.float64)
    inj_low = reference_rough_localize(low_cb, 50.0, t_raw=4500.0, sigma_um=150.0)

    # atlases on both grids, defined by the same µm slab boundaries
    b1, b2 = spec.region_bound_1 * w * spec.pitch_um, spec.region_bound_2 * w * spec.pitch_um
    atlas_high = RegionAtlas(
        labels=_atlas_labels((nz, h, w), spec.pitch_um, b1, b2),
        voxel_size=(spec.pitch_um, spec.pitch_um, spec.z_step_um),
        names=dict(names),
    )
    atlas_low = RegionAtlas(
        labels=_atlas_labels(inj_low.shape, 50.0, b1, b2),
        voxel_size=(50.0, 50.0, 50.0),
        names=dict(names),
    )

    # region tables accumulated with plain loops over the truth grids
    sources = {}
    for rid in names:
        sources[rid] = int(np.sum((atlas_low.labels == rid) & inj_low))
    targets = {}
    for rid in names:
        targets[rid] = float(np.sum(tracer_signal[atlas_high.labels == rid]))
    table = ConnectivityTable(
        brain_id="phantom",
        injection_id=f"seed{spec.seed}",
        sources={k: float(v) for k, v in sources.items()},
        targets=targets,
        outside_source=0.0,
        outside_target=0.0,
        meta={"resolution_um": repr(spec.pitch_um)},
    )

    truth = GroundTruth(
        vignette=vignette_field(spec.tile_extent, spec.vignette_corner),
        cells=cells,
        axon_pixels=axon_px,
        vessel_pixels=vessel_px,
        tracer_mask=tracer_mask,
        tracer_signal=tracer_signal,
        injection_mask_low=inj_low,
        atlas_high=atlas_high,
        atlas_low=atlas_low,
        table=table,
        scenes={
            ch: Stack3D(data=nominal[ch].copy(),
                        voxel_size=(spec.pitch_um, spec.pitch_um, spec.z_step_um),
                        channel=ch, dtype="u16")
            for ch in nominal
        },
    )

    # cut tiles, apply vignette, add noise
    tiles = {ch: [] for ch in scenes}
    n_tiles = nz * spec.grid_y * spec.grid_x * 3
    children = noise_ss.spawn(n_tiles)
    vignettes = {"CR": truth.vignette, "CG": truth.vignette,
                 "CB": np.ones_like(truth.vignette)}
    child = 0
    for z in range(nz):
        for gy in range(spec.grid_y):
            for gx in range(spec.grid_x):
                oy, ox = gy * spec.step_px, gx * spec.step_px
                j = (z * spec.grid_y + gy) * spec.grid_x + gx
                for ch in ("CR", "CG", "CB"):
                    cut = scenes[ch][z, oy:oy + spec.tile_extent, ox:ox + spec.tile_extent]
                    mean = cut * vignettes[ch]
                    if spec.poisson:
                        tile_rng = np.random.default_rng(children[child])
                        vals = tile_rng.poisson(mean).astype(np.float64)
                    else:
                        vals = np.rint(mean)
                    child += 1
                    tiles[ch].append(Tile2D(
                        pixels=np.clip(vals, 0, U16_MAX),
                        channel=ch,
                        world_offset=(ox * spec.pitch_um, oy * spec.pitch_um, z * spec.z_step_um),
                        tile_index=j,
                        pixel_pitch=spec.pitch_um,
                    ))
    return tiles, truth


def generate_cell_slices(
    n_slices: int,
    extent: int,
    cells_per_slice: int,
    amp: float = 20000.0,
    sigma: float = 3.0,
    bg: float = 300.0,
    noise: bool = True,
    border: int = 16,
    min_sep: float = 14.0,
    seed: int = 0,
):
    """Standalone cell-body slices for detector training and evaluation.

    Returns ``(images, centers)``: images (n, extent, extent) float64 and a
    list of per-slice (n_i, 2) arrays of (x, y) centres.
    """
    rng = np.random.default_rng(seed)
    images = np.zeros((n_slices, extent, extent))
    centers = []
    for i in range(n_slices):
        pts = _place_points(rng, cells_per_slice, (border, extent - border),
                            (border, extent - border), min_sep)
        canvas = bg + amp * render_cells((extent, extent), pts, 1.0, sigma)
        if noise:
            canvas = rng.poisson(canvas).astype(np.float64)
        images[i] = np.clip(canvas, 0, U16_MAX)
        centers.append(np.array(pts, dtype=np.int64).reshape(-1, 2))
    return images, centers


def background_tile_stream(
    n_tiles: int,
    extent: int = 720,
    lam: float = 80.0,
    corner: float = 0.6,
    channel: str = "CG",
    outlier_fraction: float = 0.002,
    seed: int = 0,
):
    """Yield Poisson background tiles under a known vignette, with outliers.

    Outliers alternate between dark (0 or 1) and bright (> 2500) pixels so
    the estimator's cut bounds are exercised; the generating field is
    ``vignette_field(extent, corner)``.
    """
    vignette = vignette_field(extent, corner)
    children = np.random.SeedSequence(seed).spawn(n_tiles)
    for j in range(n_tiles):
        rng = np.random.default_rng(children[j])
        vals = rng.poisson(lam * vignette).astype(np.float64)
        n_out = int(outlier_fraction * vals.size)
        if n_out:
            idx = rng.choice(vals.size, size=2 * n_out, replace=False)
            flat = vals.ravel()
            flat[idx[:n_out]] = rng.integers(0, 2, size=n_out)
            flat[idx[n_out:]] = rng.integers(2600, 12000, size=n_out)
        yield Tile2D(
            pixels=np.clip(vals, 0, U16_MAX),
            channel=channel,
            world_offset=(0.0, 0.0, 0.0),
            tile_index=j,
        )


# ---------------------------------------------------------------------------
# detection matching and metrics
# ---------------------------------------------------------------------------


@dataclass
class MatchResult:
    tp: int
    fp: int
    fn: int
    pairs: list


def match_detections(pred: CellPointCloud, truth_points: np.ndarray, radius_px: float) -> MatchResult:
    """Greedy score-descending matching within a planar radius.

    Detections are matched to the nearest unused truth centre in the same
    section; each truth point is used at most once.  Greedy matching in
    score order is deterministic and, on sparse clouds, within one match of
    the optimal assignment.
    """
    if radius_px <= 0:
        raise ValueError("radius must be > 0")
    truth_points = np.asarray(truth_points, dtype=np.int64).reshape(-1, 3)
    used = np.zeros(len(truth_points), dtype=bool)
    order = np.lexsort((np.arange(len(pred)), -pred.scores))
    pairs = []
    for i in order:
        x, y, z = pred.points[i]
        same_z = np.nonzero((truth_points[:, 2] == z) & ~used)[0]
        if len(same_z) == 0:
            continue
        d2 = (truth_points[same_z, 0] - x) ** 2 + (truth_points[same_z, 1] - y) ** 2
        best = int(np.argmin(d2))
        if d2[best] <= radius_px ** 2:
            j = int(same_z[best])
            used[j] = True
            pairs.append((int(i), j))
    tp = len(pairs)
    return MatchResult(tp=tp, fp=len(pred) - tp, fn=len(truth_points) - tp, pairs=pairs)


def precision_recall_curve(pred: CellPointCloud, truth_points: np.ndarray, radius_px: float, thresholds):
    """PR points for score cutoffs; empty detection sets count precision 1.

    Returns an array of rows (threshold, precision, recall).  Because each
    cutoff keeps a score-ordered prefix of the detections, greedy matching
    makes recall non-increasing in the threshold.
    """
    truth_points = np.asarray(truth_points, dtype=np.int64).reshape(-1, 3)
    rows = []
    for t in thresholds:
        keep = pred.scores > t
        sub = CellPointCloud(points=pred.points[keep], scores=pred.scores[keep])
        m = match_detections(sub, truth_points, radius_px) if len(sub) else None
        if m is None:
            precision = 1.0
            recall = 0.0 if len(truth_points) else 1.0
        else:
            precision = m.tp / (m.tp + m.fp) if (m.tp + m.fp) else 1.0
            recall = m.tp / len(truth_points) if len(truth_points) else 1.0
        rows.append((float(t), precision, recall))
    return np.array(rows)


@dataclass
class SegmentationMetrics:
    precision: float
    recall: float
    f1: float
    iou: float


def segmentation_metrics(pred_mask: np.ndarray, truth_mask: np.ndarray) -> SegmentationMetrics:
    """Pixel-set precision/recall/F1/IoU; empty vs empty scores 1."""
    pred = np.asarray(pred_mask, dtype=bool)
    truth = np.asarray(truth_mask, dtype=bool)
    if pred.shape != truth.shape:
        raise ValueError(f"shape mismatch {pred.shape} vs {truth.shape}")
    tp = int((pred & truth).sum())
    fp = int((pred & ~truth).sum())
    fn = int((~pred & truth).sum())
    if tp == fp == fn == 0:
        return SegmentationMetrics(1.0, 1.0, 1.0, 1.0)
    precision = tp / (tp + fp) if tp + fp else 1.0
    recall = tp / (tp + fn) if tp + fn else 1.0
    f1 = 2 * tp / (2 * tp + fp + fn)
    iou = tp / (tp + fp + fn)
    return SegmentationMetrics(precision, recall, f1, iou)


# ---------------------------------------------------------------------------
# Hessian-baseline evaluation protocol
# ---------------------------------------------------------------------------


def _subsets(values):
    values = list(values)
    for bits in range(1, 1 << len(values)):
        yield tuple(v for i, v in enumerate(values) if bits >> i & 1)


def hessian_scale_search(
    slices: np.ndarray,
    centers: list,
    sigmas=(2, 3, 4, 5),
    radius_px: float = 4.0,
    n_thresholds: int = 40,
    max_candidates: int = 2000,
):
    """Sweep all scale combinations on a training split.

    For every non-empty subset of ``sigmas`` the multi-scale response is
    computed per slice, local maxima become scored detections (capped to the
    ``max_candidates`` strongest; weak noise maxima cannot enter the best
    operating point anyway), and the best F1 over a threshold sweep is
    recorded.  Returns ``(best_sigmas, best_threshold, best_f1)``; ties
    prefer fewer scales, then the first in enumeration order.
    """
    from .injsite import detect_cells, hessian_cell_filter

    truth = np.concatenate([
        np.column_stack([c, np.full(len(c), z, dtype=np.int64)])
        for z, c in enumerate(centers)
    ]) if centers else np.empty((0, 3), dtype=np.int64)

    best = None
    for subset in _subsets(sigmas):
        responses = np.stack([hessian_cell_filter(s, subset) for s in slices])
        cloud = detect_cells(responses, t_high=0.0)
        if len(cloud) == 0:
            continue
        if len(cloud) > max_candidates:
            keep = np.argsort(-cloud.scores)[:max_candidates]
            cloud = CellPointCloud(points=cloud.points[keep], scores=cloud.scores[keep])
        qs = np.quantile(cloud.scores, np.linspace(0.0, 0.999, n_thresholds))
        curve = precision_recall_curve(cloud, truth, radius_px, np.unique(qs))
        f1 = np.where(
            curve[:, 1] + curve[:, 2] > 0,
            2 * curve[:, 1] * curve[:, 2] / (curve[:, 1] + curve[:, 2]),
            0.0,
        )
        i = int(np.argmax(f1))
        key = (float(f1[i]), -len(subset))
        if best is None or key > best[0]:
            best = (key, subset, float(curve[i, 0]))
    if best is None:
        raise ValueError("no detections at any scale")
    (f1_val, _), subset, threshold = best
    return subset, threshold, f1_val


def evaluate_hessian(slices: np.ndarray, centers: list, sigmas, threshold: float, radius_px: float = 4.0):
    """Apply a fixed scale set + threshold; returns (f1, MatchResult)."""
    from .injsite import detect_cells, hessian_cell_filter

    truth = np.concatenate([
        np.column_stack([c, np.full(len(c), z, dtype=np.int64)])
        for z, c in enumerate(centers)
    ]) if centers else np.empty((0, 3), dtype=np.int64)
    responses = np.stack([hessian_cell_filter(s, sigmas) for s in slices])
    cloud = detect_cells(responses, t_high=threshold)
    m = match_detections(cloud, truth, radius_px)
    f1 = 2 * m.tp / (2 * m.tp + m.fp + m.fn) if (2 * m.tp + m.fp + m.fn) else 1.0
    return f1, m
