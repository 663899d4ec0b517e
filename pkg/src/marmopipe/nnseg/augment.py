"""Training-sample augmentation: rotation, gamma, elastic warp, scaling.

All spatial transforms resample the input bilinearly and the label/weight
grids with nearest-neighbor lookup, through exactly the same coordinate
field, so a labeled structure lands where its image content lands.  Samples
are finally center-cropped to the network input extent; the source tile
must therefore be larger than the crop (the classic 810 -> 572 pairing
leaves just enough room for arbitrary rotations).  Coordinates that fall
outside the source tile are mirrored back in.
"""

from __future__ import annotations

import numpy as np

from ..imgcore import gaussian_blur
from .train import TrainingSample


def _reflect_coords(c: np.ndarray, n: int) -> np.ndarray:
    if n == 1:
        return np.zeros_like(c)
    period = 2.0 * (n - 1)
    c = np.abs(c) % period
    return np.where(c > n - 1, period - c, c)


def _sample_bilinear(grid: np.ndarray, ys: np.ndarray, xs: np.ndarray) -> np.ndarray:
    h, w = grid.shape
    ys = _reflect_coords(ys, h)
    xs = _reflect_coords(xs, w)
    y0 = np.clip(np.floor(ys).astype(np.int64), 0, h - 2) if h > 1 else np.zeros_like(ys, dtype=np.int64)
    x0 = np.clip(np.floor(xs).astype(np.int64), 0, w - 2) if w > 1 else np.zeros_like(xs, dtype=np.int64)
    fy = ys - y0
    fx = xs - x0
    y1 = np.minimum(y0 + 1, h - 1)
    x1 = np.minimum(x0 + 1, w - 1)
    return (
        grid[y0, x0] * (1 - fy) * (1 - fx)
        + grid[y0, x1] * (1 - fy) * fx
        + grid[y1, x0] * fy * (1 - fx)
        + grid[y1, x1] * fy * fx
    )


def _sample_nearest(grid: np.ndarray, ys: np.ndarray, xs: np.ndarray) -> np.ndarray:
    h, w = grid.shape
    yi = np.rint(_reflect_coords(ys, h)).astype(np.int64)
    xi = np.rint(_reflect_coords(xs, w)).astype(np.int64)
    return grid[np.clip(yi, 0, h - 1), np.clip(xi, 0, w - 1)]


def elastic_field(
    out_extent: int,
    rng: np.random.Generator,
    grid_nodes: int = 8,
    displacement_std: float = 10.0,
    smooth_sigma: float = 8.0,
) -> np.ndarray:
    """Smooth random displacement field, shape (2, out, out) in pixels."""
    coarse = rng.normal(0.0, displacement_std, size=(2, grid_nodes, grid_nodes))
    # bilinear upsampling of the control grid to the output extent
    pos = np.linspace(0, grid_nodes - 1, out_extent)
    i0 = np.clip(np.floor(pos).astype(np.int64), 0, grid_nodes - 2)
    f = pos - i0
    rows = coarse[:, i0, :] * (1 - f)[None, :, None] + coarse[:, i0 + 1, :] * f[None, :, None]
    dense = rows[:, :, i0] * (1 - f)[None, None, :] + rows[:, :, i0 + 1] * f[None, None, :]
    return np.stack([gaussian_blur(dense[0], smooth_sigma), gaussian_blur(dense[1], smooth_sigma)])


def warp_sample(
    sample: TrainingSample,
    out_extent: int,
    angle: float = 0.0,
    scale: float = 1.0,
    gamma: float = 1.0,
    displacement: np.ndarray | None = None,
) -> TrainingSample:
    """Apply one explicit transform combination and crop to ``out_extent``.

    ``angle`` rotates the content counterclockwise, ``scale`` > 1 enlarges
    it, ``gamma`` adjusts intensity contrast (input only, relative to the
    tile maximum), ``displacement`` is an optional (2, out, out) pixel field
    added to the sampling coordinates.  Neutral parameters reduce to a plain
    center crop.
    """
    cin, h, w = sample.input.shape
    if out_extent > min(h, w):
        raise ValueError(f"sample {h}x{w} too small for output extent {out_extent}")

    cy_in, cx_in = (h - 1) / 2.0, (w - 1) / 2.0
    c_out = (out_extent - 1) / 2.0
    yy, xx = np.mgrid[0:out_extent, 0:out_extent].astype(np.float64)
    u, v = yy - c_out, xx - c_out
    # content rotated by +angle and scaled by +scale means sampling with the
    # inverse map (rotate -angle, scale 1/scale)
    cos_a, sin_a = np.cos(angle), np.sin(angle)
    ys = (cos_a * u - sin_a * v) / scale + cy_in
    xs = (sin_a * u + cos_a * v) / scale + cx_in
    if displacement is not None:
        ys = ys + displacement[0]
        xs = xs + displacement[1]

    identity = (
        angle == 0.0 and scale == 1.0 and displacement is None
    )
    if identity:
        y0 = (h - out_extent) // 2
        x0 = (w - out_extent) // 2
        new_input = sample.input[:, y0:y0 + out_extent, x0:x0 + out_extent].copy()
        new_label = sample.label[y0:y0 + out_extent, x0:x0 + out_extent].copy()
        new_weight = sample.weight[y0:y0 + out_extent, x0:x0 + out_extent].copy()
    else:
        new_input = np.stack([_sample_bilinear(sample.input[c], ys, xs) for c in range(cin)])
        new_label = _sample_nearest(sample.label, ys, xs)
        new_weight = _sample_nearest(sample.weight, ys, xs)

    if gamma != 1.0:
        vmax = new_input.max()
        if vmax > 0:
            new_input = vmax * (new_input / vmax) ** gamma

    return TrainingSample(input=new_input, label=new_label, weight=new_weight)


def augment(
    sample: TrainingSample,
    seed: int,
    out_extent: int,
    gamma_range: tuple[float, float] = (0.7, 1.4),
    scale_range: tuple[float, float] = (0.9, 1.1),
    elastic_params: tuple[int, float, float] = (8, 10.0, 8.0),
) -> TrainingSample:
    """Random transform combination drawn deterministically from ``seed``."""
    rng = np.random.default_rng(seed)
    angle = rng.uniform(0.0, 2.0 * np.pi)
    gamma = rng.uniform(*gamma_range)
    scale = rng.uniform(*scale_range)
    nodes, std, smooth = elastic_params
    disp = elastic_field(out_extent, rng, nodes, std, smooth) if std > 0 else None
    return warp_sample(sample, out_extent, angle=angle, scale=scale, gamma=gamma, displacement=disp)
