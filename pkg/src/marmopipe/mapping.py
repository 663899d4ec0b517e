"""Reference-space mapping and region-wise connectivity.

Displacement fields follow the pull-back convention: the field lives on the
reference grid and stores, per voxel, the offset (µm) from that voxel's
centre to the position in the source volume to sample.  This is what
resampling needs and what deformable-registration toolkits emit; computing
the registration itself is out of scope here.

When reference and source share the same grid geometry, sampling positions
are formed as ``index + displacement/voxel`` so a zero field is exactly the
identity (no µm round trip that could perturb the last bit).
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field as dc_field
from pathlib import Path

import numpy as np

from .imgcore import Stack3D, read_stack, write_stack
from .injsite import CellPointCloud

log = logging.getLogger(__name__)


@dataclass
class DisplacementField:
    """(3, nz, ny, nx) µm offsets (dx, dy, dz) on the reference grid."""

    disp: np.ndarray
    voxel_size: tuple[float, float, float]

    def __post_init__(self):
        self.disp = np.asarray(self.disp, dtype=np.float64)
        if self.disp.ndim != 4 or self.disp.shape[0] != 3:
            raise ValueError("displacement field must be shaped (3, nz, ny, nx)")
        if not np.isfinite(self.disp).all():
            raise ValueError("displacement vectors must be finite")
        self.voxel_size = tuple(float(v) for v in self.voxel_size)

    @property
    def shape(self):
        return self.disp.shape[1:]


def identity_field(dims_zyx, voxel_size) -> DisplacementField:
    return DisplacementField(
        disp=np.zeros((3,) + tuple(dims_zyx), dtype=np.float64),
        voxel_size=tuple(voxel_size),
    )


def save_field(field: DisplacementField, prefix) -> None:
    """Store as three f32 stacks ``<prefix>_dx/_dy/_dz``."""
    for i, tag in enumerate(("dx", "dy", "dz")):
        write_stack(
            Stack3D(data=field.disp[i], voxel_size=field.voxel_size, dtype="f32"),
            f"{prefix}_{tag}",
        )


def load_field(prefix) -> DisplacementField:
    parts = [read_stack(f"{prefix}_{tag}").data for tag in ("dx", "dy", "dz")]
    voxel = read_stack(f"{prefix}_dx").voxel_size
    return DisplacementField(disp=np.stack(parts), voxel_size=voxel)


def _source_indices(field: DisplacementField, source: Stack3D):
    """Continuous (z, y, x) sampling indices into the source grid."""
    nz, ny, nx = field.shape
    vx, vy, vz = field.voxel_size
    sx, sy, sz = source.voxel_size
    zz, yy, xx = np.meshgrid(
        np.arange(nz, dtype=np.float64),
        np.arange(ny, dtype=np.float64),
        np.arange(nx, dtype=np.float64),
        indexing="ij",
    )
    congruent = field.shape == source.data.shape and np.allclose(
        field.voxel_size, source.voxel_size, rtol=0, atol=1e-12
    )
    if congruent:
        ci_x = xx + field.disp[0] / sx
        ci_y = yy + field.disp[1] / sy
        ci_z = zz + field.disp[2] / sz
    else:
        ci_x = ((xx + 0.5) * vx + field.disp[0]) / sx - 0.5
        ci_y = ((yy + 0.5) * vy + field.disp[1]) / sy - 0.5
        ci_z = ((zz + 0.5) * vz + field.disp[2]) / sz - 0.5
    return ci_z, ci_y, ci_x


def _gather(data: np.ndarray, zi, yi, xi, valid) -> np.ndarray:
    out = np.zeros(zi.shape, dtype=np.float64)
    if valid.any():
        out[valid] = data[zi[valid], yi[valid], xi[valid]]
    return out


def apply_field(stack: Stack3D, field: DisplacementField, interpolation: str = "linear") -> Stack3D:
    """Resample a source stack onto the reference grid through the field.

    ``nearest`` is for label/mask volumes, ``linear`` for intensities;
    samples falling outside the source domain become 0.
    """
    if interpolation not in ("linear", "nearest"):
        raise ValueError(f"unknown interpolation {interpolation!r}")
    data = stack.data
    if interpolation == "linear" and float(np.abs(data - np.rint(data)).max(initial=0.0)) == 0.0 \
            and stack.dtype == "u16" and len(np.unique(data)) < 64:
        log.warning("linear interpolation of an integer-labeled volume; did you mean nearest?")
    ci_z, ci_y, ci_x = _source_indices(field, stack)
    nz, ny, nx = data.shape

    if interpolation == "nearest":
        zi = np.rint(ci_z).astype(np.int64)
        yi = np.rint(ci_y).astype(np.int64)
        xi = np.rint(ci_x).astype(np.int64)
        valid = (zi >= 0) & (zi < nz) & (yi >= 0) & (yi < ny) & (xi >= 0) & (xi < nx)
        out = _gather(data, zi, yi, xi, valid)
    else:
        z0 = np.floor(ci_z).astype(np.int64)
        y0 = np.floor(ci_y).astype(np.int64)
        x0 = np.floor(ci_x).astype(np.int64)
        fz, fy, fx = ci_z - z0, ci_y - y0, ci_x - x0
        out = np.zeros(ci_z.shape, dtype=np.float64)
        for dz, wz in ((0, 1.0 - fz), (1, fz)):
            for dy, wy in ((0, 1.0 - fy), (1, fy)):
                for dx, wx in ((0, 1.0 - fx), (1, fx)):
                    zi, yi, xi = z0 + dz, y0 + dy, x0 + dx
                    weight = wz * wy * wx
                    valid = (
                        (zi >= 0) & (zi < nz) & (yi >= 0) & (yi < ny)
                        & (xi >= 0) & (xi < nx) & (weight != 0)
                    )
                    out += weight * _gather(data, zi, yi, xi, valid)
    return Stack3D(data=out, voxel_size=field.voxel_size, channel=stack.channel, dtype=stack.dtype)


def compose_fields(outer: DisplacementField, inner: DisplacementField) -> DisplacementField:
    """Composite field c with apply(stack, c) == apply(apply(stack, inner), outer).

    ``outer`` maps reference -> intermediate, ``inner`` intermediate ->
    source; the inner field is linearly interpolated at the positions the
    outer field points to (out-of-domain lookups extend with zero
    displacement at the clamped border).
    """
    nz, ny, nx = outer.shape
    vx, vy, vz = outer.voxel_size
    ivx, ivy, ivz = inner.voxel_size
    zz, yy, xx = np.meshgrid(
        np.arange(nz, dtype=np.float64),
        np.arange(ny, dtype=np.float64),
        np.arange(nx, dtype=np.float64),
        indexing="ij",
    )
    # intermediate positions in µm, then continuous indices into the inner grid
    px = (xx + 0.5) * vx + outer.disp[0]
    py = (yy + 0.5) * vy + outer.disp[1]
    pz = (zz + 0.5) * vz + outer.disp[2]
    ci = [pz / ivz - 0.5, py / ivy - 0.5, px / ivx - 0.5]
    inz, iny, inx = inner.shape
    bounds = (inz, iny, inx)
    c0 = [np.clip(np.floor(c).astype(np.int64), 0, b - 1) for c, b in zip(ci, bounds)]
    c1 = [np.minimum(c + 1, b - 1) for c, b in zip(c0, bounds)]
    fr = [np.clip(c - lo, 0.0, 1.0) for c, lo in zip(ci, c0)]

    total = np.empty_like(outer.disp)
    for comp in range(3):
        grid = inner.disp[comp]
        acc = np.zeros((nz, ny, nx), dtype=np.float64)
        for dz, wz in ((c0[0], 1 - fr[0]), (c1[0], fr[0])):
            for dy, wy in ((c0[1], 1 - fr[1]), (c1[1], fr[1])):
                for dx, wx in ((c0[2], 1 - fr[2]), (c1[2], fr[2])):
                    acc += wz * wy * wx * grid[dz, dy, dx]
        total[comp] = outer.disp[comp] + acc
    return DisplacementField(disp=total, voxel_size=outer.voxel_size)


def axisymmetric_average(stacks: list[Stack3D], midplane_axis: str = "x") -> Stack3D:
    """Mean of the stacks and their midsagittal mirror images.

    Flipping along the midplane axis doubles the number of samples per voxel
    and makes the result exactly mirror-symmetric.
    """
    if not stacks:
        raise ValueError("no stacks to average")
    axis = {"z": 0, "y": 1, "x": 2}[midplane_axis]
    shape = stacks[0].data.shape
    for s in stacks:
        if s.data.shape != shape:
            raise ValueError("stacks must be congruent")
    total = np.zeros(shape, dtype=np.float64)
    for s in stacks:
        total += s.data
    total += np.flip(total, axis=axis)
    return Stack3D(
        data=total / (2 * len(stacks)),
        voxel_size=stacks[0].voxel_size,
        channel=stacks[0].channel,
        dtype="f32",
    )


# ---------------------------------------------------------------------------
# atlas + connectivity
# ---------------------------------------------------------------------------


@dataclass
class RegionAtlas:
    """Integer region labels (0 = outside) plus a region-name table."""

    labels: np.ndarray
    voxel_size: tuple[float, float, float]
    names: dict[int, str] = dc_field(default_factory=dict)

    def __post_init__(self):
        self.labels = np.asarray(self.labels)
        if not np.issubdtype(self.labels.dtype, np.integer):
            rounded = np.rint(np.asarray(self.labels, dtype=np.float64))
            self.labels = rounded.astype(np.int64)
        ids = np.unique(self.labels)
        for rid in ids[ids > 0]:
            self.names.setdefault(int(rid), f"region_{int(rid)}")

    @classmethod
    def load(cls, prefix) -> "RegionAtlas":
        stack = read_stack(prefix)
        names = {}
        names_path = Path(str(prefix)).with_suffix(".names")
        if names_path.exists():
            for line in names_path.read_text().splitlines():
                if line.strip():
                    rid, name = line.split(None, 1)
                    names[int(rid)] = name.strip()
        return cls(labels=stack.data, voxel_size=stack.voxel_size, names=names)

    def save(self, prefix) -> None:
        write_stack(
            Stack3D(data=self.labels.astype(np.float64), voxel_size=self.voxel_size, dtype="u16"),
            prefix,
        )
        lines = [f"{rid} {name}" for rid, name in sorted(self.names.items())]
        Path(str(prefix)).with_suffix(".names").write_text("\n".join(lines) + "\n")


def injection_regions(source, atlas: RegionAtlas):
    """Count injection evidence per atlas region.

    ``source`` is a binary mask stack congruent with the atlas or a
    CellPointCloud in atlas voxel coordinates.  Returns ``(counts, outside)``
    where counts maps region id -> voxel/point count and outside tallies
    hits on id 0 or out-of-bounds coordinates.
    """
    counts = {rid: 0 for rid in sorted(atlas.names)}
    outside = 0
    if isinstance(source, CellPointCloud):
        nz, ny, nx = atlas.labels.shape
        for x, y, z in source.points:
            if 0 <= x < nx and 0 <= y < ny and 0 <= z < nz:
                rid = int(atlas.labels[z, y, x])
                if rid > 0:
                    counts[rid] = counts.get(rid, 0) + 1
                else:
                    outside += 1
            else:
                outside += 1
        return counts, outside

    mask = source.data if isinstance(source, Stack3D) else np.asarray(source)
    if mask.shape != atlas.labels.shape:
        raise ValueError(f"mask {mask.shape} incongruent with atlas {atlas.labels.shape}")
    hits = atlas.labels[mask > 0]
    binned = np.bincount(hits)
    outside = int(binned[0]) if len(binned) else 0
    for rid in np.nonzero(binned)[0]:
        if rid > 0:
            counts[int(rid)] = int(binned[rid])
    return counts, outside


def projection_strengths(signal: Stack3D, atlas: RegionAtlas, normalize: bool = False):
    """Sum the tracer signal per atlas region.

    Returns ``(sums, outside)``; with ``normalize`` the per-region sum is
    divided by the region's voxel count.  The sums plus the outside share
    conserve the total signal.
    """
    data = signal.data if isinstance(signal, Stack3D) else np.asarray(signal, dtype=np.float64)
    if data.shape != atlas.labels.shape:
        raise ValueError(f"signal {data.shape} incongruent with atlas {atlas.labels.shape}")
    if (data < 0).any():
        raise ValueError("signal must be nonnegative")
    flat = atlas.labels.ravel()
    sums = np.bincount(flat, weights=data.ravel())
    voxels = np.bincount(flat)
    outside = float(sums[0]) if len(sums) else 0.0
    result: dict[int, float] = {}
    for rid in sorted(atlas.names):
        value = float(sums[rid]) if rid < len(sums) else 0.0
        if normalize:
            value = value / float(voxels[rid]) if rid < len(voxels) and voxels[rid] else 0.0
        result[rid] = value
    return result, outside


@dataclass
class ConnectivityTable:
    """Per-region source counts and target signal sums for one injection."""

    brain_id: str
    injection_id: str
    sources: dict[int, float]
    targets: dict[int, float]
    outside_source: float = 0.0
    outside_target: float = 0.0
    meta: dict[str, str] = dc_field(default_factory=dict)

    def save(self, path) -> None:
        lines = [f"# brain={self.brain_id} injection={self.injection_id}"]
        for key in sorted(self.meta):
            lines.append(f"# {key}={self.meta[key]}")
        lines.append(
            f"# outside_src={float(self.outside_source)!r} outside_tgt={float(self.outside_target)!r}"
        )
        for rid in sorted(self.sources):
            lines.append(f"src {rid} {float(self.sources[rid])!r}")
        for rid in sorted(self.targets):
            lines.append(f"tgt {rid} {float(self.targets[rid])!r}")
        Path(path).write_text("\n".join(lines) + "\n")

    @classmethod
    def load(cls, path) -> "ConnectivityTable":
        brain = injection = ""
        meta = {}
        sources: dict[int, float] = {}
        targets: dict[int, float] = {}
        out_src = out_tgt = 0.0
        for line in Path(path).read_text().splitlines():
            line = line.strip()
            if not line:
                continue
            if line.startswith("#"):
                for token in line[1:].split():
                    if "=" in token:
                        key, value = token.split("=", 1)
                        if key == "brain":
                            brain = value
                        elif key == "injection":
                            injection = value
                        elif key == "outside_src":
                            out_src = float(value)
                        elif key == "outside_tgt":
                            out_tgt = float(value)
                        else:
                            meta[key] = value
                continue
            kind, rid, value = line.split()
            if kind == "src":
                sources[int(rid)] = float(value)
            elif kind == "tgt":
                targets[int(rid)] = float(value)
            else:
                raise ValueError(f"unrecognized table line: {line!r}")
        return cls(
            brain_id=brain,
            injection_id=injection,
            sources=sources,
            targets=targets,
            outside_source=out_src,
            outside_target=out_tgt,
            meta=meta,
        )
