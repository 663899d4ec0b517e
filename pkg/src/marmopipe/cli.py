"""Batch driver: configuration, pipeline stages, subcommands.

The pipeline runs stage (a) flat-field + stitching, (b) injection-site
localization, (c) tracer segmentation, (d) mapping to reference space and
(e) connectivity, entirely file-driven: every stage reads its inputs from
and writes its outputs to the run directory, is skipped when its outputs
are newer than its inputs, and appends a ``stage=... status=... seconds=...``
line (plus a content hash of its outputs) to the run report.

Configuration files are line-oriented ``key=value`` with ``#`` comments.
Exit codes: 0 ok, 1 validation error, 2 runtime failure.
"""

from __future__ import annotations

import argparse
import difflib
import hashlib
import logging
import sys
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field as dc_field
from pathlib import Path

import numpy as np

from . import evalsynth, flatfield, imgcore, injsite, mapping, nnseg, stitch, tracerseg

log = logging.getLogger("marmopipe")


class ConfigError(ValueError):
    """Invalid configuration; maps to exit code 1."""


# ---------------------------------------------------------------------------
# configuration
# ---------------------------------------------------------------------------

_CHOICES = {
    "flatfield": None,  # estimate | none | <prefix>
    "cell_backend": ("hessian", "unet"),
    "tracer_backend": ("threshold", "unet"),
    "sources": ("mask", "cells"),
}

_DEFAULTS = {
    "tiles": "",
    "out": "",
    "threads": "1",
    "seed": "0",
    "flatfield": "estimate",
    "ff_lower": "2",
    "ff_upper": "2500",
    "margin": "50",
    "low_voxel_um": "50",
    "traw": "4500",
    "sigma_um": "150",
    "thigh": "0.5",
    "cell_backend": "hessian",
    "cell_model": "",
    "hessian_sigmas": "2,3,4,5",
    "hessian_cutoff": "0",
    "roi_pad": "8",
    "tracer_backend": "threshold",
    "tracer_model": "",
    "t": "1.1",
    "hi": "300",
    "lo": "100",
    "close": "3",
    "theta": "0.5",
    "field": "identity",
    "atlas": "",
    "atlas_low": "",
    "sources": "mask",
    "normalize": "0",
    "brain_id": "brain",
    "injection_id": "inj",
}


@dataclass
class PipelineConfig:
    values: dict = dc_field(default_factory=dict)

    def __getattr__(self, key):
        values = object.__getattribute__(self, "values")
        if key in values:
            return values[key]
        raise AttributeError(key)

    @property
    def out_dir(self) -> Path:
        return Path(self.values["out"])

    def sigmas(self) -> tuple[float, ...]:
        return tuple(float(s) for s in self.values["hessian_sigmas"].split(",") if s.strip())


def parse_config_text(text: str) -> dict:
    raw = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected key=value, got {line!r}")
        key, value = line.split("=", 1)
        raw[key.strip()] = value.strip()
    return raw


def validate_config(raw: dict) -> list[str]:
    """Return a list of human-readable problems (empty = valid)."""
    errors = []
    for key in raw:
        if key not in _DEFAULTS:
            hint = difflib.get_close_matches(key, _DEFAULTS, n=1)
            suffix = f"; did you mean {hint[0]!r}?" if hint else ""
            errors.append(f"unknown key {key!r}{suffix}")
    merged = dict(_DEFAULTS, **{k: v for k, v in raw.items() if k in _DEFAULTS})

    def number(key, cast=float):
        try:
            return cast(merged[key])
        except ValueError:
            errors.append(f"{key}={merged[key]!r}: not a number")
            return None

    threads = number("threads", int)
    if threads is not None and threads < 1:
        errors.append(f"threads={threads}: must be >= 1")
    lower, upper = number("ff_lower"), number("ff_upper")
    if lower is not None and upper is not None and lower >= upper:
        errors.append(f"ff_lower={lower} must be < ff_upper={upper}")
    hi, lo = number("hi"), number("lo")
    if hi is not None and lo is not None and not 0 < lo < hi:
        errors.append(f"need 0 < lo < hi, got lo={lo} hi={hi}")
    t = number("t")
    if t is not None and t <= 0:
        errors.append(f"t={t}: must be > 0")
    margin = number("margin", int)
    if margin is not None and margin < 0:
        errors.append(f"margin={margin}: must be >= 0")
    thigh = number("thigh")
    if thigh is not None and not 0 <= thigh <= 1:
        errors.append(f"thigh={thigh}: must be in [0, 1]")
    for key, choices in _CHOICES.items():
        if choices and merged[key] not in choices:
            errors.append(f"{key}={merged[key]!r}: expected one of {choices}")
    for key in ("sigma_um", "traw", "close", "theta", "low_voxel_um", "seed",
                "hessian_cutoff", "roi_pad", "normalize"):
        number(key)
    for key in ("cell_backend", "tracer_backend"):
        model_key = "cell_model" if key == "cell_backend" else "tracer_model"
        if merged[key] == "unet" and not merged[model_key]:
            errors.append(f"{key}=unet requires {model_key}=<model prefix>")
        if merged[key] == "unet" and merged[model_key] and not Path(merged[model_key] + ".manifest").exists():
            errors.append(f"{model_key}: no model at {merged[model_key]!r}")
    try:
        tuple(float(s) for s in merged["hessian_sigmas"].split(",") if s.strip())
    except ValueError:
        errors.append(f"hessian_sigmas={merged['hessian_sigmas']!r}: expected comma-separated numbers")

    # referenced input paths must exist at validation time
    if merged["tiles"] and not Path(merged["tiles"]).is_dir():
        errors.append(f"tiles: no such directory {merged['tiles']!r}")
    for key in ("atlas", "atlas_low"):
        if merged[key] and not Path(merged[key] + ".hdr").exists():
            errors.append(f"{key}: no stack header at {merged[key]!r}")
    if merged["field"] not in ("", "identity") and not Path(merged["field"] + "_dx.hdr").exists():
        errors.append(f"field: no displacement stacks at {merged['field']!r}")
    if merged["flatfield"] not in ("estimate", "none"):
        if not any(Path(f"{merged['flatfield']}_{ch}.hdr").exists() for ch in ("CR", "CG")):
            errors.append(f"flatfield: no saved field at {merged['flatfield']!r}")
    return errors


def load_config(path) -> PipelineConfig:
    try:
        raw = parse_config_text(Path(path).read_text())
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    errors = validate_config(raw)
    if errors:
        raise ConfigError("; ".join(errors))
    return PipelineConfig(values=dict(_DEFAULTS, **raw))


# ---------------------------------------------------------------------------
# stage machinery
# ---------------------------------------------------------------------------


def _pmap(fn, items, threads: int):
    """Ordered parallel map; results do not depend on the thread count."""
    items = list(items)
    if threads <= 1 or len(items) <= 1:
        return [fn(item) for item in items]
    with ThreadPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(fn, items))


def _hash_files(paths) -> str:
    digest = hashlib.sha256()
    for p in sorted(str(p) for p in paths):
        digest.update(Path(p).read_bytes())
    return digest.hexdigest()[:12]


def _fresh(inputs, outputs) -> bool:
    outs = [Path(p) for p in outputs]
    if not outs or not all(p.exists() for p in outs):
        return False
    ins = [Path(p) for p in inputs if Path(p).exists()]
    if not ins:
        return True
    newest_in = max(p.stat().st_mtime_ns for p in ins)
    oldest_out = min(p.stat().st_mtime_ns for p in outs)
    return newest_in <= oldest_out


@dataclass
class RunReport:
    lines: list = dc_field(default_factory=list)

    def add(self, stage: str, status: str, seconds: float, outputs=()):
        extra = f" hash={_hash_files(outputs)}" if outputs else ""
        self.lines.append(f"stage={stage} status={status} seconds={seconds:.3f}{extra}")

    def text(self) -> str:
        return "\n".join(self.lines) + "\n"


def _stack_paths(prefix) -> list[Path]:
    p = Path(prefix)
    return [p.with_suffix(".hdr"), p.with_suffix(".raw")]


# ---------------------------------------------------------------------------
# stages
# ---------------------------------------------------------------------------


def _load_tiles(tile_dir) -> dict[str, list]:
    paths = sorted(Path(tile_dir).glob("*.pgm"))
    if not paths:
        raise FileNotFoundError(f"no .pgm tiles under {tile_dir}")
    tiles = {}
    for p in paths:
        tile = imgcore.read_tile(p)
        tiles.setdefault(tile.channel, []).append(tile)
    return tiles


def stage_stitch(cfg: PipelineConfig, report: RunReport) -> None:
    out = cfg.out_dir
    inputs = sorted(Path(cfg.tiles).glob("*"))
    outputs = [q for ch in imgcore.CHANNELS
               for prefix in (out / f"high_{ch}", out / f"low_{ch}")
               for q in _stack_paths(prefix)]
    if _fresh(inputs, outputs):
        report.add("stitch", "skip", 0.0)
        return
    t0 = time.time()
    tiles = _load_tiles(cfg.tiles)
    threads = int(cfg.threads)

    fields = {}
    mode = cfg.flatfield
    for ch in ("CR", "CG"):
        if ch not in tiles or mode == "none":
            continue
        if mode == "estimate":
            fields[ch] = flatfield.estimate_shading(
                tiles[ch], float(cfg.ff_lower), float(cfg.ff_upper)
            )
            imgcore.write_stack(flatfield.field_to_stack(fields[ch]), out / f"field_{ch}")
        else:
            fields[ch] = flatfield.field_from_stack(imgcore.read_stack(f"{mode}_{ch}"))

    for ch, channel_tiles in sorted(tiles.items()):
        if ch in fields:
            channel_tiles = [flatfield.correct_tile(t, fields[ch]) for t in channel_tiles]
        by_z = {}
        for tile in channel_tiles:
            by_z.setdefault(tile.world_offset[2], []).append(tile)
        zs = sorted(by_z)
        mosaics = _pmap(
            lambda z: stitch.assemble_slice(by_z[z], margin=int(cfg.margin)), zs, threads
        )
        stack = stitch.assemble_stack(
            list(zip(zs, mosaics)),
            pitch_um=channel_tiles[0].pixel_pitch,
            channel=ch,
            dtype="u16",
        )
        imgcore.write_stack(stack, out / f"high_{ch}")
        low = imgcore.downsample_stack(stack, float(cfg.low_voxel_um))
        low.dtype = "f32"
        imgcore.write_stack(low, out / f"low_{ch}")
    report.add("stitch", "ok", time.time() - t0, outputs)


def _cells_in_roi(high_cb, mask, low_voxel_um, model, cutoff, sigmas, roi_pad):
    """Detect cells inside the mask's high-resolution ROI rectangles."""
    roi = injsite.roi_from_mask(
        mask,
        high_voxel_um=high_cb.voxel_size[0],
        low_voxel_um=low_voxel_um,
        pad_px=roi_pad,
    ).clip(high_cb.data.shape[2], high_cb.data.shape[1])
    points, scores = [], []
    for z, (x0, y0, x1, y1) in sorted(roi.rects.items()):
        window = high_cb.data[z, y0:y1, x0:x1]
        if window.size == 0:
            continue
        if model is not None:
            sal = nnseg.sliding_window_predict(model, window).values
        else:
            sal = injsite.hessian_cell_filter(window, sigmas)
        cloud = injsite.detect_cells(sal, t_high=cutoff)
        if len(cloud):
            points.append(cloud.points + np.array([x0, y0, z]))
            scores.append(cloud.scores)
    return injsite.CellPointCloud(
        points=np.concatenate(points) if points else np.empty((0, 3), dtype=np.int64),
        scores=np.concatenate(scores) if scores else np.empty(0),
    )


def stage_locate(cfg: PipelineConfig, report: RunReport) -> None:
    out = cfg.out_dir
    inputs = _stack_paths(out / "low_CB") + _stack_paths(out / "high_CB")
    outputs = _stack_paths(out / "inj_mask") + [out / "cells.txt"]
    if _fresh(inputs, outputs):
        report.add("locate", "skip", 0.0)
        return
    t0 = time.time()
    low_cb = imgcore.read_stack(out / "low_CB")
    mask = injsite.rough_localize(low_cb, t_raw=float(cfg.traw), sigma_um=float(cfg.sigma_um))
    imgcore.write_stack(mask.mask, out / "inj_mask")

    if mask.empty:
        cloud = injsite.CellPointCloud(points=np.empty((0, 3), dtype=np.int64),
                                       scores=np.empty(0))
    else:
        if cfg.cell_backend == "unet":
            model = nnseg.load_model(cfg.cell_model)
            cutoff = float(cfg.thigh)
        else:
            model = None
            cutoff = float(cfg.hessian_cutoff)
        high_cb = imgcore.read_stack(out / "high_CB")
        cloud = _cells_in_roi(high_cb, mask, low_cb.voxel_size[0], model, cutoff,
                              cfg.sigmas(), int(cfg.roi_pad))
    cloud.save(out / "cells.txt")
    report.add("locate", "ok", time.time() - t0, outputs)


def stage_tracer(cfg: PipelineConfig, report: RunReport) -> None:
    out = cfg.out_dir
    inputs = _stack_paths(out / "high_CG") + _stack_paths(out / "high_CR")
    outputs = _stack_paths(out / "tracer_L") + _stack_paths(out / "tracer_mask")
    if _fresh(inputs, outputs):
        report.add("tracer", "skip", 0.0)
        return
    t0 = time.time()
    cg = imgcore.read_stack(out / "high_CG")
    cr = imgcore.read_stack(out / "high_CR")
    if cg.data.shape != cr.data.shape:
        raise ValueError("C_G and C_R stacks are incongruent")
    model = nnseg.load_model(cfg.tracer_model) if cfg.tracer_backend == "unet" else None

    def segment(z):
        if model is None:
            return tracerseg.threshold_pipeline(
                cg.data[z], cr.data[z],
                t=float(cfg.t), hi=float(cfg.hi), lo=float(cfg.lo),
                close_radius=int(cfg.close),
            )
        sal = nnseg.sliding_window_predict(model, np.stack([cr.data[z], cg.data[z]])).values
        sub = tracerseg.background_subtract(cg.data[z], cr.data[z], t=float(cfg.t))
        return tracerseg.compose_label(sal, sub, theta=float(cfg.theta))

    labels = _pmap(segment, range(cg.data.shape[0]), int(cfg.threads))
    signal = np.stack([lab.signal for lab in labels])
    masks = np.stack([lab.mask for lab in labels]).astype(np.float64)
    imgcore.write_stack(
        imgcore.Stack3D(signal, cg.voxel_size, channel="CG", dtype="f32"), out / "tracer_L"
    )
    imgcore.write_stack(
        imgcore.Stack3D(masks, cg.voxel_size, dtype="u16"), out / "tracer_mask"
    )
    report.add("tracer", "ok", time.time() - t0, outputs)


def stage_map(cfg: PipelineConfig, report: RunReport) -> None:
    out = cfg.out_dir
    inputs = _stack_paths(out / "tracer_L") + _stack_paths(out / "inj_mask")
    outputs = _stack_paths(out / "mapped_L") + _stack_paths(out / "mapped_mask")
    if _fresh(inputs, outputs):
        report.add("map", "skip", 0.0)
        return
    t0 = time.time()
    signal = imgcore.read_stack(out / "tracer_L")
    mask = imgcore.read_stack(out / "inj_mask")
    if cfg.field == "identity":
        field_l = mapping.identity_field(signal.data.shape, signal.voxel_size)
        field_m = mapping.identity_field(mask.data.shape, mask.voxel_size)
    else:
        field_l = mapping.load_field(cfg.field)
        field_m = field_l
    mapped_l = mapping.apply_field(signal, field_l, interpolation="linear")
    mapped_l.dtype = "f32"
    mapped_m = mapping.apply_field(mask, field_m, interpolation="nearest")
    mapped_m.dtype = "u16"
    imgcore.write_stack(mapped_l, out / "mapped_L")
    imgcore.write_stack(mapped_m, out / "mapped_mask")
    report.add("map", "ok", time.time() - t0, outputs)


def stage_connectivity(cfg: PipelineConfig, report: RunReport) -> None:
    out = cfg.out_dir
    inputs = _stack_paths(out / "mapped_L") + _stack_paths(out / "mapped_mask") + [out / "cells.txt"]
    outputs = [out / "connectivity.txt"]
    if _fresh(inputs, outputs):
        report.add("connectivity", "skip", 0.0)
        return
    t0 = time.time()
    if not cfg.atlas:
        raise ConfigError("connectivity stage requires atlas=<prefix>")
    atlas_high = mapping.RegionAtlas.load(cfg.atlas)
    atlas_low = mapping.RegionAtlas.load(cfg.atlas_low) if cfg.atlas_low else atlas_high

    if cfg.sources == "cells":
        source_input = injsite.CellPointCloud.load(out / "cells.txt")
        src_atlas = atlas_high
    else:
        source_input = imgcore.read_stack(out / "mapped_mask")
        src_atlas = atlas_low
    sources, out_src = mapping.injection_regions(source_input, src_atlas)
    signal = imgcore.read_stack(out / "mapped_L")
    targets, out_tgt = mapping.projection_strengths(
        signal, atlas_high, normalize=bool(int(cfg.normalize))
    )
    table = mapping.ConnectivityTable(
        brain_id=cfg.brain_id,
        injection_id=cfg.injection_id,
        sources={k: float(v) for k, v in sources.items()},
        targets=targets,
        outside_source=float(out_src),
        outside_target=float(out_tgt),
        meta={"resolution_um": repr(signal.voxel_size[0])},
    )
    table.save(out / "connectivity.txt")
    report.add("connectivity", "ok", time.time() - t0, outputs)


_STAGES = [
    ("stitch", stage_stitch),
    ("locate", stage_locate),
    ("tracer", stage_tracer),
    ("map", stage_map),
    ("connectivity", stage_connectivity),
]


def run_pipeline(cfg: PipelineConfig) -> RunReport:
    """Run all stages in order; failures halt with the stage name attached."""
    if not cfg.tiles or not cfg.values["out"]:
        raise ConfigError("run requires tiles=<dir> and out=<dir>")
    cfg.out_dir.mkdir(parents=True, exist_ok=True)
    report = RunReport()
    for name, fn in _STAGES:
        try:
            fn(cfg, report)
        except ConfigError:
            raise
        except Exception as exc:
            report.add(name, "fail", 0.0)
            (cfg.out_dir / "report.txt").write_text(report.text())
            raise RuntimeError(f"stage {name} failed: {exc}") from exc
    (cfg.out_dir / "report.txt").write_text(report.text())
    return report


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------


def _cmd_phantom(args) -> int:
    spec = evalsynth.PhantomSpec.load(args.spec) if args.spec else evalsynth.PhantomSpec()
    out = Path(args.out)
    tile_dir = out / "tiles"
    tile_dir.mkdir(parents=True, exist_ok=True)
    tiles, truth = evalsynth.generate_phantom(spec)
    for ch, tile_list in sorted(tiles.items()):
        for tile in tile_list:
            z = int(round(tile.world_offset[2] / spec.z_step_um))
            imgcore.write_tile(tile, tile_dir / f"z{z:04d}_j{tile.tile_index:04d}_{ch}.pgm")
    truth.save(out / "truth")
    spec.save(out / "phantom_spec.txt")
    print(f"phantom written to {out} ({sum(len(v) for v in tiles.values())} tiles)")
    return 0


def _cmd_flatfield(args) -> int:
    tiles = [t for t in (imgcore.read_tile(p) for p in sorted(Path(args.tiles).glob("*.pgm")))
             if t.channel == args.channel]
    if not tiles:
        raise ConfigError(f"no {args.channel} tiles under {args.tiles}")
    field = flatfield.estimate_shading(tiles, args.lower, args.upper)
    imgcore.write_stack(flatfield.field_to_stack(field, tiles[0].pixel_pitch), args.out)
    print(f"field written to {args.out} (tiles={field.sample_count})")
    return 0


def _cmd_stitch(args) -> int:
    cfg = PipelineConfig(values=dict(
        _DEFAULTS, tiles=args.tiles, out=args.out,
        margin=str(args.margin), flatfield=args.flatfield, threads=str(args.threads),
    ))
    Path(args.out).mkdir(parents=True, exist_ok=True)
    report = RunReport()
    stage_stitch(cfg, report)
    layout_lines = []
    tiles = _load_tiles(args.tiles)
    first_channel = sorted(tiles)[0]
    by_z = {}
    for tile in tiles[first_channel]:
        by_z.setdefault(tile.world_offset[2], []).append(tile)
    for z in sorted(by_z):
        cropped = [stitch.crop_margins(t, args.margin) for t in by_z[z]]
        layout = stitch.plan_layout(cropped)
        for tile, (ox, oy) in zip(cropped, layout.offsets):
            layout_lines.append(f"z={z} index={tile.tile_index} offset={ox} {oy}")
    (Path(args.out) / "layout.txt").write_text("\n".join(layout_lines) + "\n")
    print(report.text(), end="")
    return 0


def _cmd_train(args, in_channels: int) -> int:
    images = imgcore.read_stack(args.stack)
    second = imgcore.read_stack(args.second) if in_channels == 2 else None
    labels = imgcore.read_stack(args.labels)
    net = nnseg.init_unet(args.depth, args.base, in_channels, seed=args.seed,
                          input_scale=1.0 / 65535.0)
    tile = args.tile if args.tile else nnseg.next_valid_input(args.depth, nnseg.margin(args.depth) + 32)
    if args.task == "cells":
        weight_fn = lambda lab: nnseg.build_cell_weight_map(lab)
    else:
        weight_fn = lambda lab: nnseg.build_tracer_weight_map(lab)
    samples = []
    for z in range(images.data.shape[0]):
        if second is None:
            image = images.data[z]
        else:
            image = np.stack([second.data[z], images.data[z]])
        samples.extend(nnseg.sample_training_tiles(
            image, labels.data[z], n_dense=args.dense, n_sparse=args.sparse,
            tile=tile, seed=args.seed + z, weight_fn=weight_fn,
        ))
    trained, history = nnseg.train(net, samples, steps=args.steps,
                                   learning_rate=args.lr, seed=args.seed)
    nnseg.save_model(trained, args.out)
    print(f"trained {args.steps} steps; loss {history[0]:.4f} -> {history[-1]:.4f}")
    return 0


def _cmd_predict(args) -> int:
    model = nnseg.load_model(args.model)
    stack = imgcore.read_stack(args.stack)
    if model.in_channels == 2:
        if not args.second:
            raise ConfigError("two-channel models need --second <C_R stack>")
        # channel order must match training: background first, tracer second
        other = imgcore.read_stack(args.second)
        volume = [np.stack([other.data[z], stack.data[z]]) for z in range(stack.data.shape[0])]
    else:
        volume = [stack.data[z] for z in range(stack.data.shape[0])]
    out = np.stack([nnseg.sliding_window_predict(model, v).values for v in volume])
    imgcore.write_stack(
        imgcore.Stack3D(out, stack.voxel_size, dtype="f32"), args.out
    )
    print(f"saliency written to {args.out}")
    return 0


def _cmd_eval(args) -> int:
    truth_dir = Path(args.truth)
    run_dir = Path(args.run)
    lines = []
    cells_path = run_dir / "cells.txt"
    truth_cells = truth_dir / "cells.txt"
    if cells_path.exists() and truth_cells.exists():
        pred = injsite.CellPointCloud.load(cells_path)
        truth = injsite.CellPointCloud.load(truth_cells)
        m = evalsynth.match_detections(pred, truth.points, radius_px=args.radius)
        f1 = 2 * m.tp / (2 * m.tp + m.fp + m.fn) if (m.tp + m.fp + m.fn) else 1.0
        lines.append(f"cells tp={m.tp} fp={m.fp} fn={m.fn} f1={f1:.4f}")
    mask_path = run_dir / "tracer_mask"
    truth_mask = truth_dir / "tracer_mask"
    if mask_path.with_suffix(".hdr").exists() and truth_mask.with_suffix(".hdr").exists():
        pred = imgcore.read_stack(mask_path).data > 0
        truth = imgcore.read_stack(truth_mask).data > 0
        sm = evalsynth.segmentation_metrics(pred, truth)
        lines.append(
            f"tracer precision={sm.precision:.4f} recall={sm.recall:.4f} "
            f"f1={sm.f1:.4f} iou={sm.iou:.4f}"
        )
    table_path = run_dir / "connectivity.txt"
    truth_table = truth_dir / "table.txt"
    if table_path.exists() and truth_table.exists():
        got = mapping.ConnectivityTable.load(table_path)
        want = mapping.ConnectivityTable.load(truth_table)
        src_ok = got.sources == want.sources
        tgt_ok = got.targets == want.targets
        lines.append(f"table sources_match={src_ok} targets_match={tgt_ok}")
    if not lines:
        raise ConfigError("nothing to evaluate (no matching outputs in run/truth dirs)")
    print("\n".join(lines))
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="marmopipe", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("phantom", help="generate a synthetic phantom with ground truth")
    p.add_argument("--spec", default="", help="phantom spec file (key=value)")
    p.add_argument("--out", required=True)

    p = sub.add_parser("flatfield-estimate", help="estimate a shading field from tiles")
    p.add_argument("--in", dest="tiles", required=True)
    p.add_argument("--channel", default="CG", choices=imgcore.CHANNELS)
    p.add_argument("--lower", type=float, default=2.0)
    p.add_argument("--upper", type=float, default=2500.0)
    p.add_argument("--out", required=True)

    p = sub.add_parser("stitch", help="stitch tiles into stacks")
    p.add_argument("--tiles", required=True)
    p.add_argument("--margin", type=int, default=50)
    p.add_argument("--flatfield", default="estimate")
    p.add_argument("--threads", type=int, default=1)
    p.add_argument("--out", required=True)

    p = sub.add_parser("inject-locate", help="localize the injection site")
    p.add_argument("--cb-low", required=True)
    p.add_argument("--cb-high", default="", help="omit to compute the rough mask only")
    p.add_argument("--backend", default="hessian", choices=("hessian", "unet"))
    p.add_argument("--model", default="")
    p.add_argument("--traw", type=float, default=4500.0)
    p.add_argument("--sigma-um", type=float, default=150.0)
    p.add_argument("--thigh", type=float, default=0.5)
    p.add_argument("--sigmas", default="2,3,4,5", help="hessian scales (px)")
    p.add_argument("--cutoff", type=float, default=0.0, help="hessian detection cutoff")
    p.add_argument("--roi-pad", type=int, default=8)
    p.add_argument("--out", required=True, help="output directory")

    p = sub.add_parser("tracer-seg", help="segment the axon tracer signal")
    p.add_argument("--cg", required=True)
    p.add_argument("--cr", required=True)
    p.add_argument("--backend", default="threshold", choices=("threshold", "unet"))
    p.add_argument("--model", default="")
    p.add_argument("--t", type=float, default=1.1)
    p.add_argument("--hi", type=float, default=300.0)
    p.add_argument("--lo", type=float, default=100.0)
    p.add_argument("--close", type=int, default=3)
    p.add_argument("--theta", type=float, default=0.5)
    p.add_argument("--threads", type=int, default=1)
    p.add_argument("--out", required=True)

    for task in ("train-cells", "train-tracer"):
        p = sub.add_parser(task, help=f"train the {task.split('-')[1]} network")
        p.add_argument("--stack", required=True,
                       help="C_B stack (cells) or C_G stack (tracer)")
        p.add_argument("--second", default="", help="C_R stack (tracer only)")
        p.add_argument("--labels", required=True)
        p.add_argument("--depth", type=int, default=2)
        p.add_argument("--base", type=int, default=8)
        p.add_argument("--tile", type=int, default=0)
        p.add_argument("--dense", type=int, default=10)
        p.add_argument("--sparse", type=int, default=10)
        p.add_argument("--steps", type=int, default=2000)
        p.add_argument("--lr", type=float, default=0.5)
        p.add_argument("--seed", type=int, default=0)
        p.add_argument("--out", required=True)

    p = sub.add_parser("predict", help="run sliding-window inference")
    p.add_argument("--model", required=True)
    p.add_argument("--in", dest="stack", required=True,
                   help="C_B stack (cell models) or C_G stack (tracer models)")
    p.add_argument("--second", default="", help="C_R stack (tracer models)")
    p.add_argument("--out", required=True)

    p = sub.add_parser("map", help="apply a displacement field to a stack")
    p.add_argument("--in", dest="stack", required=True)
    p.add_argument("--field", required=True, help="field prefix or 'identity'")
    p.add_argument("--interp", default="linear", choices=("linear", "nearest"))
    p.add_argument("--out", required=True)

    p = sub.add_parser("connectivity", help="region-wise connectivity table")
    p.add_argument("--signal", required=True)
    p.add_argument("--mask", required=True)
    p.add_argument("--atlas", required=True)
    p.add_argument("--atlas-low", default="")
    p.add_argument("--normalize", action="store_true")
    p.add_argument("--brain-id", default="brain")
    p.add_argument("--injection-id", default="inj")
    p.add_argument("--out", required=True)

    p = sub.add_parser("eval", help="compare run outputs against phantom truth")
    p.add_argument("--run", required=True)
    p.add_argument("--truth", required=True)
    p.add_argument("--radius", type=float, default=4.0)

    p = sub.add_parser("run", help="run the full pipeline from a config file")
    p.add_argument("--config", required=True)

    return parser


def _dispatch(args) -> int:
    if args.command == "phantom":
        return _cmd_phantom(args)
    if args.command == "flatfield-estimate":
        return _cmd_flatfield(args)
    if args.command == "stitch":
        return _cmd_stitch(args)
    if args.command == "inject-locate":
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        low = imgcore.read_stack(args.cb_low)
        mask = injsite.rough_localize(low, t_raw=args.traw, sigma_um=args.sigma_um)
        imgcore.write_stack(mask.mask, out / "inj_mask")
        if args.cb_high and not mask.empty:
            high = imgcore.read_stack(args.cb_high)
            model = nnseg.load_model(args.model) if args.backend == "unet" else None
            cutoff = args.thigh if model is not None else args.cutoff
            sigmas = tuple(float(s) for s in args.sigmas.split(","))
            cloud = _cells_in_roi(high, mask, low.voxel_size[0], model, cutoff,
                                  sigmas, args.roi_pad)
            cloud.save(out / "cells.txt")
            print(f"mask + {len(cloud)} cells written to {out} (empty={mask.empty})")
        else:
            print(f"mask written to {out} (empty={mask.empty})")
        return 0
    if args.command == "tracer-seg":
        cfg = PipelineConfig(values=dict(
            _DEFAULTS, out=str(Path(args.out)),
            tracer_backend=args.backend, tracer_model=args.model,
            t=str(args.t), hi=str(args.hi), lo=str(args.lo), close=str(args.close),
            theta=str(args.theta), threads=str(args.threads),
        ))
        Path(args.out).mkdir(parents=True, exist_ok=True)
        for name, src in (("high_CG", args.cg), ("high_CR", args.cr)):
            stack = imgcore.read_stack(src)
            imgcore.write_stack(stack, Path(args.out) / name)
        report = RunReport()
        stage_tracer(cfg, report)
        print(report.text(), end="")
        return 0
    if args.command in ("train-cells", "train-tracer"):
        args.task = "cells" if args.command == "train-cells" else "tracer"
        return _cmd_train(args, in_channels=1 if args.task == "cells" else 2)
    if args.command == "predict":
        return _cmd_predict(args)
    if args.command == "map":
        stack = imgcore.read_stack(args.stack)
        if args.field == "identity":
            field = mapping.identity_field(stack.data.shape, stack.voxel_size)
        else:
            field = mapping.load_field(args.field)
        mapped = mapping.apply_field(stack, field, interpolation=args.interp)
        imgcore.write_stack(mapped, args.out)
        print(f"mapped stack written to {args.out}")
        return 0
    if args.command == "connectivity":
        atlas_high = mapping.RegionAtlas.load(args.atlas)
        atlas_low = mapping.RegionAtlas.load(args.atlas_low) if args.atlas_low else atlas_high
        mask = imgcore.read_stack(args.mask)
        signal = imgcore.read_stack(args.signal)
        sources, out_src = mapping.injection_regions(mask, atlas_low)
        targets, out_tgt = mapping.projection_strengths(signal, atlas_high, normalize=args.normalize)
        table = mapping.ConnectivityTable(
            brain_id=args.brain_id, injection_id=args.injection_id,
            sources={k: float(v) for k, v in sources.items()}, targets=targets,
            outside_source=float(out_src), outside_target=float(out_tgt),
        )
        table.save(args.out)
        print(f"table written to {args.out}")
        return 0
    if args.command == "eval":
        return _cmd_eval(args)
    if args.command == "run":
        cfg = load_config(args.config)
        report = run_pipeline(cfg)
        print(report.text(), end="")
        return 0
    raise ConfigError(f"unknown command {args.command!r}")


def main(argv=None) -> int:
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(name)s: %(message)s")
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return _dispatch(args)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:  # runtime failure
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
