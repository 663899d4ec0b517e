"""Classical axon-tracer segmentation on 2D sections.

The stages mirror the training-label generator: autofluorescence removal by
channel subtraction, double thresholding, morphological reconstruction of
the permissive mask from the conservative one, and closing with a digital
disk.  The final label keeps the subtracted signal strength inside the mask
so downstream connectivity sums reflect axon density, not just area.

All thresholds compare with strict ``>``; the subtraction zeroes pixels
where the tracer channel is strictly below ``t`` times the background
channel.  Everything here is per-slice 2D; stacking happens in the driver.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ._cc import CONN_8_2D, label_components


@dataclass
class SubtractedSignal:
    """Tracer signal after background-channel subtraction."""

    values: np.ndarray
    factor: float

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if (self.values < 0).any():
            raise ValueError("subtracted signal must be nonnegative")


@dataclass
class TracerLabel:
    """Binary tracer mask plus the signal-weighted label image."""

    mask: np.ndarray
    signal: np.ndarray

    def __post_init__(self):
        self.mask = np.asarray(self.mask, dtype=bool)
        self.signal = np.asarray(self.signal, dtype=np.float64)
        if self.mask.shape != self.signal.shape:
            raise ValueError("mask and signal must be congruent")


def background_subtract(cg_slice, cr_slice, t: float = 1.1) -> SubtractedSignal:
    """Remove autofluorescence: 0 where C_G < t*C_R, else C_G - t*C_R."""
    cg = np.asarray(cg_slice, dtype=np.float64)
    cr = np.asarray(cr_slice, dtype=np.float64)
    if cg.shape != cr.shape:
        raise ValueError(f"extent mismatch {cg.shape} vs {cr.shape}")
    if t <= 0:
        raise ValueError("subtraction factor must be > 0")
    scaled = t * cr
    values = np.where(cg < scaled, 0.0, cg - scaled)
    return SubtractedSignal(values=values, factor=t)


def double_threshold(signal: SubtractedSignal, hi: float = 300.0, lo: float = 100.0):
    """Conservative and permissive masks; hi_mask is a subset of lo_mask."""
    if not 0 < lo < hi:
        raise ValueError(f"need 0 < lo < hi, got lo={lo} hi={hi}")
    values = signal.values if isinstance(signal, SubtractedSignal) else np.asarray(signal)
    return values > hi, values > lo


def morph_reconstruct(marker: np.ndarray, mask: np.ndarray) -> np.ndarray:
    """Keep the 8-connected components of ``mask`` that touch ``marker``."""
    marker = np.asarray(marker, dtype=bool)
    mask = np.asarray(mask, dtype=bool)
    if marker.shape != mask.shape:
        raise ValueError("marker and mask must be congruent")
    if (marker & ~mask).any():
        raise ValueError("marker must be a subset of mask")
    if not marker.any():
        return np.zeros_like(mask)
    labels, count = label_components(mask, CONN_8_2D)
    keep = np.unique(labels[marker])
    selected = np.zeros(count + 1, dtype=bool)
    selected[keep] = True
    return mask & selected[labels]


def disk_offsets(radius: int) -> np.ndarray:
    """Pixel offsets of the digital disk: Euclidean distance <= radius."""
    r = int(radius)
    dy, dx = np.mgrid[-r:r + 1, -r:r + 1]
    keep = dy * dy + dx * dx <= r * r
    return np.stack([dy[keep], dx[keep]], axis=1)


def _dilate(binary: np.ndarray, offsets: np.ndarray) -> np.ndarray:
    h, w = binary.shape
    r = int(np.abs(offsets).max())
    padded = np.zeros((h + 2 * r, w + 2 * r), dtype=bool)
    for dy, dx in offsets:
        padded[r + dy:r + dy + h, r + dx:r + dx + w] |= binary
    return padded


def _erode(binary: np.ndarray, offsets: np.ndarray, r: int) -> np.ndarray:
    h, w = binary.shape
    out = np.ones((h - 2 * r, w - 2 * r), dtype=bool)
    for dy, dx in offsets:
        out &= binary[r + dy:r + dy + h - 2 * r, r + dx:r + dx + w - 2 * r]
    return out


def morph_close(binary: np.ndarray, disk_radius: int = 3) -> np.ndarray:
    """Morphological closing with a disk structure element.

    Dilation runs on a padded copy so structures near the border close the
    same way as interior ones (outside counts as background).
    """
    binary = np.asarray(binary, dtype=bool)
    if disk_radius < 1:
        raise ValueError("disk radius must be >= 1")
    offsets = disk_offsets(disk_radius)
    dilated = _dilate(binary, offsets)
    r = int(np.abs(offsets).max())
    return _erode(dilated, offsets, r)


def compose_label(saliency: np.ndarray, signal: SubtractedSignal, theta: float = 0.5) -> TracerLabel:
    """Mask the subtracted signal with a thresholded saliency map."""
    sal = np.asarray(saliency, dtype=np.float64)
    values = signal.values if isinstance(signal, SubtractedSignal) else np.asarray(signal)
    if sal.shape != values.shape:
        raise ValueError("saliency and signal must be congruent")
    mask = sal > theta
    return TracerLabel(mask=mask, signal=np.where(mask, values, 0.0))


def threshold_pipeline(
    cg_slice,
    cr_slice,
    t: float = 1.1,
    hi: float = 300.0,
    lo: float = 100.0,
    close_radius: int = 3,
) -> TracerLabel:
    """Full classical segmentation of one section.

    subtraction -> double threshold -> reconstruction of the low mask from
    the high mask -> closing; the label signal is the subtracted image
    inside the closed mask.
    """
    sub = background_subtract(cg_slice, cr_slice, t=t)
    hi_mask, lo_mask = double_threshold(sub, hi=hi, lo=lo)
    reconstructed = morph_reconstruct(hi_mask, lo_mask)
    closed = morph_close(reconstructed, disk_radius=close_radius)
    return TracerLabel(mask=closed, signal=np.where(closed, sub.values, 0.0))
