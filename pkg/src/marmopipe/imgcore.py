"""Image containers, bit-exact file I/O, resampling and Gaussian filtering.

Conventions used throughout the package:

* Tiles are 2D arrays indexed ``pixels[y, x]``; stacks are 3D arrays indexed
  ``data[z, y, x]`` (x fastest in memory, matching the raw file layout).
* Voxel/pixel sizes are given in micrometres as ``(x, y, z)`` tuples.
* The centre of voxel ``i`` along an axis with spacing ``h`` sits at
  ``(i + 0.5) * h`` micrometres.
* All computation happens on float64 arrays; 16-bit quantization only occurs
  when writing ``u16`` payloads.
"""

from __future__ import annotations

import math
import re
from dataclasses import dataclass
from pathlib import Path

import numpy as np

CHANNELS = ("CR", "CG", "CB")

U16_MAX = 65535


class FormatError(ValueError):
    """Raised when a tile or stack file does not conform to the format."""


def _as_float_grid(a, ndim, name):
    a = np.asarray(a, dtype=np.float64)
    if a.ndim != ndim:
        raise ValueError(f"{name}: expected {ndim}D array, got shape {a.shape}")
    if a.size == 0:
        raise ValueError(f"{name}: empty array")
    return a


@dataclass
class Tile2D:
    """One microscope image tile with its world placement.

    ``pixels`` is float64 in memory but represents 16-bit intensities; values
    must stay inside [0, 65535].  ``world_offset`` is the (x, y, z) position
    of the tile origin in micrometres.
    """

    pixels: np.ndarray
    channel: str
    world_offset: tuple[float, float, float] = (0.0, 0.0, 0.0)
    tile_index: int = 0
    pixel_pitch: float = 1.34

    def __post_init__(self):
        self.pixels = _as_float_grid(self.pixels, 2, "Tile2D.pixels")
        if self.channel not in CHANNELS:
            raise ValueError(f"unknown channel tag {self.channel!r}")
        if self.pixel_pitch <= 0:
            raise ValueError("pixel_pitch must be > 0")
        lo, hi = float(self.pixels.min()), float(self.pixels.max())
        if lo < 0 or hi > U16_MAX:
            raise ValueError(f"tile intensities outside [0, {U16_MAX}]: [{lo}, {hi}]")
        self.world_offset = tuple(float(v) for v in self.world_offset)

    @property
    def height(self) -> int:
        return self.pixels.shape[0]

    @property
    def width(self) -> int:
        return self.pixels.shape[1]


@dataclass
class Stack3D:
    """3D image stack with per-axis voxel size.

    ``data`` has shape (nz, ny, nx); ``voxel_size`` is (vx, vy, vz) in µm.
    ``dtype`` records the storage type used on disk (``u16`` or ``f32``).
    """

    data: np.ndarray
    voxel_size: tuple[float, float, float]
    channel: str = "NONE"
    dtype: str = "f32"

    def __post_init__(self):
        self.data = _as_float_grid(self.data, 3, "Stack3D.data")
        self.voxel_size = tuple(float(v) for v in self.voxel_size)
        if any(v <= 0 for v in self.voxel_size):
            raise ValueError("voxel sizes must be > 0")
        if self.channel not in CHANNELS + ("NONE",):
            raise ValueError(f"unknown channel tag {self.channel!r}")
        if self.dtype not in ("u16", "f32"):
            raise ValueError(f"unsupported dtype {self.dtype!r}")

    @property
    def dims(self) -> tuple[int, int, int]:
        """(nx, ny, nz) voxel counts."""
        nz, ny, nx = self.data.shape
        return (nx, ny, nz)

    def slice(self, z: int) -> np.ndarray:
        return self.data[z]


@dataclass
class SaliencyMap:
    """Grid of scores in [0, 1], congruent with a slice or a stack."""

    values: np.ndarray

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.ndim not in (2, 3):
            raise ValueError("saliency map must be 2D or 3D")
        lo, hi = float(self.values.min()), float(self.values.max())
        if lo < 0.0 or hi > 1.0:
            raise ValueError(f"saliency values outside [0, 1]: [{lo}, {hi}]")


# ---------------------------------------------------------------------------
# tile I/O: binary PGM (P5, maxval 65535, big-endian) + text sidecar
# ---------------------------------------------------------------------------


def _tile_paths(path) -> tuple[Path, Path]:
    path = Path(path)
    if path.suffix != ".pgm":
        path = path.with_suffix(".pgm")
    return path, path.with_suffix(".meta")


def write_tile(tile: Tile2D, path) -> Path:
    """Write a tile as 16-bit PGM plus a ``.meta`` sidecar; returns the PGM path."""
    pgm, meta = _tile_paths(path)
    pix = np.rint(tile.pixels)
    if (pix < 0).any() or (pix > U16_MAX).any():
        raise ValueError("tile intensities outside u16 range")
    header = f"P5\n{tile.width} {tile.height}\n{U16_MAX}\n".encode("ascii")
    pgm.write_bytes(header + pix.astype(">u2").tobytes())
    x, y, z = tile.world_offset
    meta.write_text(
        f"channel={tile.channel}\n"
        f"offset_um={x!r} {y!r} {z!r}\n"
        f"pitch_um={tile.pixel_pitch!r}\n"
        f"index={tile.tile_index}\n"
    )
    return pgm


def _parse_pgm_header(blob: bytes):
    # magic, width, height, maxval as whitespace-separated tokens; '#' comments
    pos = 0
    tokens = []
    while len(tokens) < 4:
        if pos >= len(blob):
            raise FormatError("truncated PGM header")
        m = re.compile(rb"\s*(#[^\n]*\n)*\s*(\S+)").match(blob, pos)
        if m is None:
            raise FormatError("malformed PGM header")
        tokens.append(m.group(2))
        pos = m.end()
    if tokens[0] != b"P5":
        raise FormatError(f"not a binary PGM (magic {tokens[0]!r})")
    try:
        width, height, maxval = (int(t) for t in tokens[1:])
    except ValueError as exc:
        raise FormatError("non-numeric PGM header field") from exc
    if maxval != U16_MAX:
        raise FormatError(f"expected maxval {U16_MAX}, got {maxval}")
    # payload starts after exactly one whitespace byte past maxval
    return width, height, pos + 1


def read_tile(path) -> Tile2D:
    """Read a PGM tile and its sidecar metadata."""
    pgm, meta = _tile_paths(path)
    blob = pgm.read_bytes()
    width, height, offset = _parse_pgm_header(blob)
    payload = blob[offset:]
    if len(payload) != width * height * 2:
        raise FormatError(
            f"payload is {len(payload)} bytes, expected {width * height * 2} "
            f"for {width}x{height}"
        )
    pixels = np.frombuffer(payload, dtype=">u2").reshape(height, width)

    fields = {}
    for line in meta.read_text().splitlines():
        line = line.strip()
        if line and "=" in line:
            key, value = line.split("=", 1)
            fields[key] = value
    try:
        channel = fields["channel"]
        ox, oy, oz = (float(v) for v in fields["offset_um"].split())
        pitch = float(fields["pitch_um"])
        index = int(fields["index"])
    except (KeyError, ValueError) as exc:
        raise FormatError(f"malformed sidecar {meta}: {exc}") from exc
    if channel not in CHANNELS:
        raise FormatError(f"unknown channel tag {channel!r}")
    return Tile2D(
        pixels=pixels.astype(np.float64),
        channel=channel,
        world_offset=(ox, oy, oz),
        tile_index=index,
        pixel_pitch=pitch,
    )


# ---------------------------------------------------------------------------
# stack I/O: text header (.hdr) + little-endian raw payload (.raw), x fastest
# ---------------------------------------------------------------------------

_STACK_DTYPES = {"u16": "<u2", "f32": "<f4"}


def _stack_paths(prefix) -> tuple[Path, Path]:
    prefix = Path(prefix)
    if prefix.suffix in (".hdr", ".raw"):
        prefix = prefix.with_suffix("")
    return prefix.with_suffix(".hdr"), prefix.with_suffix(".raw")


def write_stack(stack: Stack3D, prefix) -> Path:
    """Write ``<prefix>.hdr`` and ``<prefix>.raw``; u16 payloads are quantized."""
    hdr, raw = _stack_paths(prefix)
    nx, ny, nz = stack.dims
    vx, vy, vz = stack.voxel_size
    hdr.write_text(
        f"dims={nx} {ny} {nz}\n"
        f"voxel_um={vx!r} {vy!r} {vz!r}\n"
        f"dtype={stack.dtype}\n"
        f"channel={stack.channel}\n"
    )
    if stack.dtype == "u16":
        payload = np.clip(np.rint(stack.data), 0, U16_MAX).astype("<u2")
    else:
        payload = stack.data.astype("<f4")
    raw.write_bytes(payload.tobytes())
    return hdr


def read_stack(prefix) -> Stack3D:
    hdr, raw = _stack_paths(prefix)
    fields = {}
    for line in hdr.read_text().splitlines():
        line = line.strip()
        if line and "=" in line:
            key, value = line.split("=", 1)
            fields[key] = value
    try:
        nx, ny, nz = (int(v) for v in fields["dims"].split())
        voxel = tuple(float(v) for v in fields["voxel_um"].split())
        dtype = fields["dtype"]
        channel = fields["channel"]
    except (KeyError, ValueError) as exc:
        raise FormatError(f"malformed header {hdr}: {exc}") from exc
    if dtype not in _STACK_DTYPES:
        raise FormatError(f"unsupported dtype {dtype!r}")
    if len(voxel) != 3:
        raise FormatError("voxel_um needs three values")
    blob = raw.read_bytes()
    expected = nx * ny * nz * np.dtype(_STACK_DTYPES[dtype]).itemsize
    if len(blob) != expected:
        raise FormatError(f"payload is {len(blob)} bytes, expected {expected}")
    data = np.frombuffer(blob, dtype=_STACK_DTYPES[dtype]).reshape(nz, ny, nx)
    return Stack3D(
        data=data.astype(np.float64),
        voxel_size=voxel,
        channel=channel,
        dtype=dtype,
    )


# ---------------------------------------------------------------------------
# resampling
# ---------------------------------------------------------------------------


def _axis_bins(n: int, h_src: float, h_tgt: float) -> np.ndarray:
    """Target bin index for each source voxel along one axis (centre rule)."""
    centers = (np.arange(n) + 0.5) * h_src
    return np.floor(centers / h_tgt).astype(np.int64)


def downsample_stack(stack: Stack3D, target_voxel) -> Stack3D:
    """Box-average a stack onto a coarser grid.

    Each output voxel is the mean of the source voxels whose centres fall
    inside it.  ``target_voxel`` is a scalar (isotropic) or an (x, y, z)
    tuple in µm and must be >= the source spacing on every axis.
    """
    if np.isscalar(target_voxel):
        target = (float(target_voxel),) * 3
    else:
        target = tuple(float(v) for v in target_voxel)
    for t, s in zip(target, stack.voxel_size):
        if t < s - 1e-9:
            raise ValueError(f"target voxel {t} µm finer than source {s} µm")

    nz, ny, nx = stack.data.shape
    bx = _axis_bins(nx, stack.voxel_size[0], target[0])
    by = _axis_bins(ny, stack.voxel_size[1], target[1])
    bz = _axis_bins(nz, stack.voxel_size[2], target[2])
    ox, oy, oz = bx[-1] + 1, by[-1] + 1, bz[-1] + 1

    flat = (bz[:, None, None] * oy + by[None, :, None]) * ox + bx[None, None, :]
    flat = flat.ravel()
    sums = np.bincount(flat, weights=stack.data.ravel(), minlength=oz * oy * ox)
    counts = np.bincount(flat, minlength=oz * oy * ox)
    out = (sums / counts).reshape(oz, oy, ox)
    # box means are fractional even for u16 input; store as float
    return Stack3D(data=out, voxel_size=target, channel=stack.channel, dtype="f32")


# ---------------------------------------------------------------------------
# separable Gaussian filtering
# ---------------------------------------------------------------------------


def gaussian_kernel1d(sigma: float) -> np.ndarray:
    """Normalized Gaussian samples truncated at 4*sigma (odd length)."""
    if sigma <= 0:
        raise ValueError("sigma must be > 0")
    radius = max(1, int(math.ceil(4.0 * sigma)))
    x = np.arange(-radius, radius + 1, dtype=np.float64)
    k = np.exp(-0.5 * (x / sigma) ** 2)
    return k / k.sum()


def mirror_indices(n: int, before: int, after: int) -> np.ndarray:
    """Source indices for mirror extension (no edge repeat, period 2(n-1))."""
    idx = np.arange(-before, n + after)
    if n == 1:
        return np.zeros_like(idx)
    period = 2 * (n - 1)
    j = np.abs(idx) % period
    return np.where(j > n - 1, period - j, j)


def reflect_pad(a: np.ndarray, widths) -> np.ndarray:
    """Mirror-pad by per-axis (before, after) widths of any size."""
    out = np.asarray(a)
    for axis, (before, after) in enumerate(widths):
        if before or after:
            out = out.take(mirror_indices(out.shape[axis], before, after), axis=axis)
    return out


def _convolve_axis(a: np.ndarray, kernel: np.ndarray, axis: int) -> np.ndarray:
    radius = len(kernel) // 2
    widths = [(0, 0)] * a.ndim
    widths[axis] = (radius, radius)
    padded = reflect_pad(np.asarray(a, dtype=np.float64), widths)
    windows = np.lib.stride_tricks.sliding_window_view(padded, len(kernel), axis=axis)
    return np.tensordot(windows, kernel, axes=([-1], [0]))


def gaussian_blur(image, sigma, voxel_size=1.0) -> np.ndarray:
    """Separable Gaussian blur with mirror boundary handling.

    ``sigma`` is isotropic in µm; ``voxel_size`` (scalar or per-axis, ordered
    like the array axes) converts it to fractional voxel units per axis.
    Pass ``voxel_size=1.0`` to give sigma directly in pixels.  The kernel is
    truncated at 4*sigma and renormalized, so a constant image is invariant.
    """
    a = np.asarray(image, dtype=np.float64)
    if sigma <= 0:
        raise ValueError("sigma must be > 0")
    if np.isscalar(voxel_size):
        voxels = (float(voxel_size),) * a.ndim
    else:
        voxels = tuple(float(v) for v in voxel_size)
        if len(voxels) != a.ndim:
            raise ValueError("voxel_size length must match array rank")
    out = a
    for axis, v in enumerate(voxels):
        out = _convolve_axis(out, gaussian_kernel1d(sigma / v), axis)
    return out
