"""Mosaic reconstruction from tiles: margin cropping, placement, blending.

Tiles carry stage world coordinates which are trusted as-is (no correlation
refinement; block-face acquisition has no in-plane distortion).  Offsets are
converted to integer pixels with round-half-away-from-zero so layouts are
reproducible across platforms.  Overlap bands are fused with a separable
linear ramp per tile, renormalized per pixel, which preserves constants even
where four tiles meet.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from .imgcore import Stack3D, Tile2D

log = logging.getLogger(__name__)


def _round_half_away(x: np.ndarray) -> np.ndarray:
    return np.where(x >= 0, np.floor(x + 0.5), np.ceil(x - 0.5)).astype(np.int64)


@dataclass
class MosaicLayout:
    """Integer pixel placement of one section's tiles.

    ``offsets[i]`` is the (ox, oy) of tile i in the section frame;
    ``extent`` is (width, height); ``tile_extent`` the common (w, h) of the
    placed tiles.  ``nominal_overlap`` is the overlap (px) between adjacent
    tiles implied by the offset grid, or None for a single tile.
    """

    offsets: list[tuple[int, int]]
    extent: tuple[int, int]
    tile_extent: tuple[int, int]
    nominal_overlap: int | None = None

    def overlap_counts(self) -> np.ndarray:
        w, h = self.extent
        tw, th = self.tile_extent
        counts = np.zeros((h, w), dtype=np.int64)
        for ox, oy in self.offsets:
            counts[oy:oy + th, ox:ox + tw] += 1
        return counts


def plan_layout(tiles: list[Tile2D]) -> MosaicLayout:
    """Derive integer pixel offsets for one section from world coordinates."""
    if not tiles:
        raise ValueError("no tiles to lay out")
    pitch = tiles[0].pixel_pitch
    z = tiles[0].world_offset[2]
    shape = tiles[0].pixels.shape
    for t in tiles:
        if abs(t.pixel_pitch - pitch) > 1e-9:
            raise ValueError("inconsistent pixel pitch within section")
        if abs(t.world_offset[2] - z) > 1e-6:
            raise ValueError("tiles of one section must share the z coordinate")
        if t.pixels.shape != shape:
            raise ValueError("tiles of one section must share the extent")

    xs = _round_half_away(np.array([t.world_offset[0] / pitch for t in tiles]))
    ys = _round_half_away(np.array([t.world_offset[1] / pitch for t in tiles]))
    xs -= xs.min()
    ys -= ys.min()
    th, tw = shape
    extent = (int(xs.max()) + tw, int(ys.max()) + th)
    offsets = [(int(x), int(y)) for x, y in zip(xs, ys)]

    if len(tiles) > 1:
        for i, (ox, oy) in enumerate(offsets):
            touches = any(
                abs(ox - px) < tw and abs(oy - py) < th
                for j, (px, py) in enumerate(offsets)
                if j != i
            )
            if not touches:
                log.warning("tile %d at offset (%d, %d) is disjoint from all others", i, ox, oy)

    overlaps = []
    for vals, size in ((np.unique(xs), tw), (np.unique(ys), th)):
        deltas = [int(d) for d in np.diff(vals) if d > 0]
        if deltas:
            overlaps.append(size - min(deltas))
    nominal = max(overlaps) if overlaps else None
    return MosaicLayout(offsets=offsets, extent=extent, tile_extent=(tw, th), nominal_overlap=nominal)


def crop_margins(tile: Tile2D, margin: int) -> Tile2D:
    """Centered crop removing ``margin`` pixels from every tile boundary."""
    if margin < 0:
        raise ValueError("margin must be >= 0")
    if margin == 0:
        return tile
    if 2 * margin >= min(tile.width, tile.height):
        raise ValueError(f"margin {margin} too large for {tile.width}x{tile.height} tile")
    x, y, z = tile.world_offset
    shift = margin * tile.pixel_pitch
    return Tile2D(
        pixels=tile.pixels[margin:-margin, margin:-margin],
        channel=tile.channel,
        world_offset=(x + shift, y + shift, z),
        tile_index=tile.tile_index,
        pixel_pitch=tile.pixel_pitch,
    )


def _ramp(n: int) -> np.ndarray:
    # distance to the nearest tile edge; 0 on the first/last pixel
    x = np.arange(n, dtype=np.float64)
    return np.minimum(x, (n - 1) - x)


def assemble_slice(tiles: list[Tile2D], layout: MosaicLayout | None = None, margin: int = 50) -> np.ndarray:
    """Fuse one section's tiles into a single 2D image.

    Tiles are margin-cropped, placed at their layout offsets, and fused with
    per-tile separable linear ramps (zero on the cropped edges) renormalized
    to sum 1 per pixel.  Pixels covered by exactly one tile keep that tile's
    values untouched; pixels covered by none are 0 and counted in a warning.
    """
    cropped = [crop_margins(t, margin) for t in tiles]
    if layout is None:
        layout = plan_layout(cropped)
    tw, th = layout.tile_extent
    if any(t.pixels.shape != (th, tw) for t in cropped):
        raise ValueError("layout tile extent does not match the tiles")

    w, h = layout.extent
    weighted = np.zeros((h, w), dtype=np.float64)
    weights = np.zeros((h, w), dtype=np.float64)
    plain = np.zeros((h, w), dtype=np.float64)
    count = np.zeros((h, w), dtype=np.int64)

    ramp = _ramp(th)[:, None] * _ramp(tw)[None, :]
    for tile, (ox, oy) in zip(cropped, layout.offsets):
        sl = (slice(oy, oy + th), slice(ox, ox + tw))
        weighted[sl] += ramp * tile.pixels
        weights[sl] += ramp
        plain[sl] += tile.pixels
        count[sl] += 1

    out = np.zeros((h, w), dtype=np.float64)
    single = count == 1
    out[single] = plain[single]
    multi = count > 1
    pos = multi & (weights > 0)
    out[pos] = weighted[pos] / weights[pos]
    flat = multi & (weights == 0)  # coincident ramp zeros: plain mean
    out[flat] = plain[flat] / count[flat]
    holes = int((count == 0).sum())
    if holes:
        log.warning("%d mosaic pixels had no contributing tile (filled 0)", holes)
    return out


def assemble_stack(sections, pitch_um: float = 1.34, channel: str = "NONE", dtype: str = "u16") -> Stack3D:
    """Stack assembled sections, ordered by ascending z.

    ``sections`` is a sequence of ``(z_um, image2d)`` pairs; spacing must be
    uniform (single sections default to 50 µm).
    """
    if not sections:
        raise ValueError("no sections")
    ordered = sorted(sections, key=lambda s: s[0])
    shape = np.asarray(ordered[0][1]).shape
    for z, img in ordered:
        if np.asarray(img).shape != shape:
            raise ValueError("sections must share the same extent")
    zs = np.array([z for z, _ in ordered], dtype=np.float64)
    if len(zs) > 1:
        steps = np.diff(zs)
        if np.ptp(steps) > 1e-6:
            raise ValueError(f"non-uniform section spacing: {sorted(set(steps))}")
        dz = float(steps[0])
    else:
        dz = 50.0
    data = np.stack([np.asarray(img, dtype=np.float64) for _, img in ordered])
    return Stack3D(data=data, voxel_size=(pitch_um, pitch_um, dz), channel=channel, dtype=dtype)
