"""Connected component labeling on binary grids (any rank).

Components are labeled by a breadth-first flood fill seeded in ascending
linear-index order, so label k is the component whose smallest linear index
is the k-th smallest among all components.  That ordering is what makes
largest-component tie-breaking deterministic.
"""

from __future__ import annotations

import numpy as np

CONN_6_3D = tuple(
    d
    for d in (
        (-1, 0, 0), (1, 0, 0),
        (0, -1, 0), (0, 1, 0),
        (0, 0, -1), (0, 0, 1),
    )
)

CONN_8_2D = tuple(
    (dy, dx) for dy in (-1, 0, 1) for dx in (-1, 0, 1) if (dy, dx) != (0, 0)
)


def label_components(mask: np.ndarray, offsets) -> tuple[np.ndarray, int]:
    """Label the connected components of a boolean grid.

    ``offsets`` lists neighbor index deltas (e.g. ``CONN_6_3D``).  Returns
    ``(labels, count)`` where labels is int64, -1 on background, and
    components are numbered 0..count-1 in order of their minimum linear index.
    """
    mask = np.asarray(mask, dtype=bool)
    shape = mask.shape
    labels = np.full(shape, -1, dtype=np.int64)
    strides = np.array([int(np.prod(shape[d + 1:], dtype=np.int64)) for d in range(len(shape))])
    flat_mask = mask.ravel()
    flat_labels = labels.ravel()

    deltas = [np.array(d, dtype=np.int64) for d in offsets]
    seeds = np.flatnonzero(flat_mask)
    count = 0
    dims = np.array(shape, dtype=np.int64)

    for seed in seeds:
        if flat_labels[seed] >= 0:
            continue
        flat_labels[seed] = count
        frontier = np.array([seed], dtype=np.int64)
        while frontier.size:
            coords = np.stack(np.unravel_index(frontier, shape), axis=1)
            nxt = []
            for d in deltas:
                nc = coords + d
                ok = np.all((nc >= 0) & (nc < dims), axis=1)
                if not ok.any():
                    continue
                flat = nc[ok] @ strides
                flat = flat[flat_mask[flat] & (flat_labels[flat] < 0)]
                if flat.size:
                    flat = np.unique(flat)
                    flat_labels[flat] = count
                    nxt.append(flat)
            frontier = np.unique(np.concatenate(nxt)) if nxt else np.empty(0, dtype=np.int64)
        count += 1
    return labels, count


def largest_component_mask(mask: np.ndarray, offsets) -> np.ndarray:
    """Keep only the largest component (ties: smallest minimum linear index)."""
    labels, count = label_components(mask, offsets)
    if count == 0:
        return np.zeros_like(np.asarray(mask, dtype=bool))
    sizes = np.bincount(labels[labels >= 0], minlength=count)
    return labels == int(np.argmax(sizes))
