"""Model serialization: text manifest + little-endian f32 blob.

``<prefix>.manifest`` lists the architecture line followed by one line per
parameter (name and shape) in blob order; ``<prefix>.bin`` concatenates the
arrays as little-endian float32 in exactly that order.  Batch-norm running
statistics are stored like parameters with a ``stat:`` prefix.
"""

from __future__ import annotations

from pathlib import Path

import numpy as np

from .unet import UNetParams


def _paths(prefix):
    prefix = Path(prefix)
    if prefix.suffix in (".manifest", ".bin"):
        prefix = prefix.with_suffix("")
    return prefix.with_suffix(".manifest"), prefix.with_suffix(".bin")


def save_model(net: UNetParams, prefix) -> Path:
    manifest, blob = _paths(prefix)
    lines = [
        "format=marmopipe-unet-1",
        f"depth={net.depth}",
        f"base_features={net.base_features}",
        f"in_channels={net.in_channels}",
        f"input_scale={net.input_scale!r}",
        f"use_batchnorm={int(net.use_batchnorm)}",
        f"dropout_rate={net.dropout_rate!r}",
        f"seed={net.seed}",
    ]
    chunks = []
    for name in sorted(net.params):
        arr = net.params[name]
        lines.append(f"param:{name}={' '.join(str(s) for s in arr.shape)}")
        chunks.append(arr.astype("<f4").tobytes())
    for name in sorted(net.stats):
        arr = net.stats[name]
        lines.append(f"stat:{name}={' '.join(str(s) for s in arr.shape)}")
        chunks.append(arr.astype("<f4").tobytes())
    manifest.write_text("\n".join(lines) + "\n")
    blob.write_bytes(b"".join(chunks))
    return manifest


def load_model(prefix) -> UNetParams:
    manifest, blob = _paths(prefix)
    head = {}
    entries = []
    for line in manifest.read_text().splitlines():
        line = line.strip()
        if not line:
            continue
        key, value = line.split("=", 1)
        if key.startswith(("param:", "stat:")):
            kind, name = key.split(":", 1)
            shape = tuple(int(v) for v in value.split()) if value.strip() else ()
            entries.append((kind, name, shape))
        else:
            head[key] = value
    if head.get("format") != "marmopipe-unet-1":
        raise ValueError(f"unknown model format in {manifest}")

    raw = blob.read_bytes()
    params, stats = {}, {}
    offset = 0
    for kind, name, shape in entries:
        n = int(np.prod(shape)) if shape else 1
        arr = np.frombuffer(raw, dtype="<f4", count=n, offset=offset).reshape(shape)
        offset += n * 4
        (params if kind == "param" else stats)[name] = arr.astype(np.float64)
    if offset != len(raw):
        raise ValueError(f"model blob has {len(raw)} bytes, manifest expects {offset}")
    return UNetParams(
        depth=int(head["depth"]),
        base_features=int(head["base_features"]),
        in_channels=int(head["in_channels"]),
        params=params,
        stats=stats,
        input_scale=float(head["input_scale"]),
        use_batchnorm=bool(int(head["use_batchnorm"])),
        dropout_rate=float(head["dropout_rate"]),
        seed=int(head["seed"]),
    )
