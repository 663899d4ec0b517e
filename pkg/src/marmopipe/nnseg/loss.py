"""Weighted logistic loss for saliency training."""

from __future__ import annotations

import numpy as np

_P_EPS = 1e-12


def weighted_logistic_loss(pred: np.ndarray, label: np.ndarray, weights: np.ndarray):
    """Weight-normalized binary cross-entropy.

    Returns ``(loss, dlogits)`` where ``dlogits`` is the gradient with
    respect to the pre-sigmoid logits: ``w * (p - y) / sum(w)``.  Because the
    loss divides by the total weight, scaling every weight by a constant
    changes neither the loss nor any gradient.  With uniform weights this is
    exactly the mean binary cross-entropy.  All-zero weights give a zero
    loss and zero gradients (fully masked sample).
    """
    pred = np.asarray(pred, dtype=np.float64)
    label = np.asarray(label, dtype=np.float64)
    weights = np.asarray(weights, dtype=np.float64)
    if not (pred.shape == label.shape == weights.shape):
        raise ValueError(
            f"incongruent grids: pred {pred.shape}, label {label.shape}, weights {weights.shape}"
        )
    total = weights.sum()
    if total == 0:
        return 0.0, np.zeros_like(pred)
    p = np.clip(pred, _P_EPS, 1.0 - _P_EPS)
    loss = -np.sum(weights * (label * np.log(p) + (1.0 - label) * np.log(1.0 - p))) / total
    dlogits = weights * (p - label) / total
    return float(loss), dlogits
