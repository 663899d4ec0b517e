"""Training: SGD loop, weight-map construction, training-tile sampling.

Labels and weight maps travel at the full sample extent and are center-
cropped to the network's valid output region when the loss is evaluated.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..imgcore import gaussian_blur
from .loss import weighted_logistic_loss
from .unet import UNet, UNetParams


class TrainingDiverged(RuntimeError):
    """Loss became non-finite during training."""

    def __init__(self, step: int, loss: float):
        super().__init__(f"training diverged at step {step} (loss={loss})")
        self.step = step
        self.loss = loss


@dataclass
class TrainingSample:
    """Input tile (c, h, w) with congruent binary label and weight grids."""

    input: np.ndarray
    label: np.ndarray
    weight: np.ndarray

    def __post_init__(self):
        self.input = np.asarray(self.input, dtype=np.float64)
        if self.input.ndim == 2:
            self.input = self.input[None]
        self.label = np.asarray(self.label, dtype=np.float64)
        self.weight = np.asarray(self.weight, dtype=np.float64)
        if self.label.shape != self.weight.shape:
            raise ValueError("label and weight must be congruent")
        if not np.isin(self.label, (0.0, 1.0)).all():
            raise ValueError("labels must be binary")
        if (self.weight < 0).any():
            raise ValueError("weights must be nonnegative")


def _crop_center(grid: np.ndarray, height: int, width: int) -> np.ndarray:
    y0 = (grid.shape[0] - height) // 2
    x0 = (grid.shape[1] - width) // 2
    if y0 < 0 or x0 < 0:
        raise ValueError(f"grid {grid.shape} smaller than output {height}x{width}")
    return grid[y0:y0 + height, x0:x0 + width]


def train(
    net: UNetParams,
    samples: list[TrainingSample],
    steps: int,
    learning_rate: float,
    seed: int = 0,
):
    """Plain SGD with a fixed learning rate.

    Samples are visited in reshuffled epochs drawn from ``seed``, so the
    whole run is reproducible bit for bit.  Returns ``(trained, history)``
    where history holds the per-step loss; the input parameter bundle is not
    modified.  Raises TrainingDiverged when the loss leaves the finite range.
    """
    if not samples:
        raise ValueError("no training samples")
    trained = net.copy()
    model = UNet(trained)
    rng = np.random.default_rng(seed)
    order = np.empty(0, dtype=np.int64)
    history = []
    for step in range(steps):
        if step % len(samples) == 0:
            order = rng.permutation(len(samples))
        sample = samples[order[step % len(samples)]]
        pred = model.forward(sample.input, train=True, rng=rng)
        ho, wo = pred.shape[1], pred.shape[2]
        label = _crop_center(sample.label, ho, wo)
        weight = _crop_center(sample.weight, ho, wo)
        loss, dlogits = weighted_logistic_loss(pred[0], label, weight)
        if not np.isfinite(loss):
            raise TrainingDiverged(step, loss)
        grads = model.backward(dlogits[None])
        for name, g in grads.items():
            trained.params[name] -= learning_rate * g
        history.append(loss)
    return trained, history


# ---------------------------------------------------------------------------
# weight maps
# ---------------------------------------------------------------------------


def _laplacian(image: np.ndarray) -> np.ndarray:
    p = np.pad(image, 1, mode="reflect")
    return p[1:-1, 2:] + p[1:-1, :-2] + p[2:, 1:-1] + p[:-2, 1:-1] - 4.0 * image


def build_cell_weight_map(
    cell_labels: np.ndarray,
    image: np.ndarray | None = None,
    radius_zero: int = 5,
    boundary_weight: float = 2.0,
    label_weight: float = 500.0,
    structure_weight: float = 2.0,
    log_sigma: float = 2.0,
    log_threshold: float | None = None,
) -> np.ndarray:
    """Error-weight map for cell-centre training labels.

    Defaults to 1 everywhere.  Around every labeled centre, a disk of
    ``radius_zero`` is masked out (weight 0, tolerating small placement
    error), the one-pixel ring just outside it gets ``boundary_weight``, and
    the centre pixel itself gets ``label_weight`` to counter the class
    imbalance.  When an intensity image and ``log_threshold`` are given,
    pixels whose absolute Laplacian-of-Gaussian response exceeds the
    threshold (cell-like or axon-like structures) get ``structure_weight``
    unless they fall inside a masked disk.
    """
    labels = np.asarray(cell_labels)
    weight = np.ones(labels.shape, dtype=np.float64)

    if image is not None and log_threshold is not None:
        response = _laplacian(gaussian_blur(np.asarray(image, dtype=np.float64), log_sigma))
        weight[np.abs(response) > log_threshold] = structure_weight

    h, w = labels.shape
    r = int(radius_zero)
    span = np.arange(-(r + 1), r + 2)
    dist = np.hypot(span[:, None], span[None, :])
    disk = dist <= r
    ring = (dist > r) & (dist <= r + 1)
    centers = np.argwhere(labels > 0)

    def paste(cy, cx, template, value):
        ys, xs = np.nonzero(template)
        yy = cy + ys - (r + 1)
        xx = cx + xs - (r + 1)
        ok = (yy >= 0) & (yy < h) & (xx >= 0) & (xx < w)
        weight[yy[ok], xx[ok]] = value

    for cy, cx in centers:
        paste(cy, cx, ring, boundary_weight)
    for cy, cx in centers:
        paste(cy, cx, disk, 0.0)
    for cy, cx in centers:
        weight[cy, cx] = label_weight
    return weight


def build_tracer_weight_map(
    labels: np.ndarray,
    negatives: np.ndarray | None = None,
    tracer_weight: float = 8.0,
    negative_weight: float = 100.0,
) -> np.ndarray:
    """Class weights for tracer training: background 1, tracer pixels
    ``tracer_weight`` (the ~8:1 background/tracer imbalance), explicitly
    annotated negative structures ``negative_weight``."""
    labels = np.asarray(labels)
    weight = np.ones(labels.shape, dtype=np.float64)
    weight[labels > 0] = tracer_weight
    if negatives is not None:
        weight[np.asarray(negatives) > 0] = negative_weight
    return weight


# ---------------------------------------------------------------------------
# density-guided tile sampling
# ---------------------------------------------------------------------------


def sample_training_tiles(
    image: np.ndarray,
    labels: np.ndarray,
    n_dense: int = 10,
    n_sparse: int = 10,
    tile: int = 810,
    seed: int = 0,
    density_sigma: float = 50.0,
    weight_fn=None,
) -> list[TrainingSample]:
    """Draw training tiles from label-dense and label-sparse areas.

    The label image blurred with a large Gaussian serves as a density map;
    dense tiles are drawn with probability proportional to the density at
    the tile centre, sparse tiles proportional to (max - density).  A slice
    without any labels falls back to uniform sampling, so all tiles become
    background examples.  ``weight_fn(label_tile)`` builds each sample's
    weight map (default: all ones).
    """
    image = np.asarray(image, dtype=np.float64)
    if image.ndim == 2:
        image = image[None]
    labels = np.asarray(labels, dtype=np.float64)
    h, w = labels.shape
    if h < tile or w < tile:
        raise ValueError(f"slice {h}x{w} smaller than tile {tile}")
    density = gaussian_blur(labels, density_sigma)
    centers = density[tile // 2:h - tile + 1 + tile // 2, tile // 2:w - tile + 1 + tile // 2]
    flat = centers.ravel()

    def draw(rng, weights, n):
        total = weights.sum()
        p = None if total <= 0 else weights / total
        return rng.choice(flat.size, size=n, replace=True, p=p)

    rng = np.random.default_rng(seed)
    picks = np.concatenate([
        draw(rng, flat, n_dense),
        draw(rng, flat.max() - flat, n_sparse),
    ])
    samples = []
    for idx in picks:
        y0, x0 = np.unravel_index(idx, centers.shape)
        sl = (slice(y0, y0 + tile), slice(x0, x0 + tile))
        label_tile = labels[sl]
        weight_tile = weight_fn(label_tile) if weight_fn else np.ones_like(label_tile)
        samples.append(TrainingSample(
            input=image[:, sl[0], sl[1]].copy(),
            label=(label_tile > 0).astype(np.float64),
            weight=np.asarray(weight_tile, dtype=np.float64),
        ))
    return samples
