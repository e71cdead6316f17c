"""Prediction depth, iteration learned and inference learning curves.

Both depth (over probe layers) and iteration learned (over training
checkpoints) are the same *suffix agreement* rule: the earliest position
from which every later entry equals the final prediction.
"""

from dataclasses import dataclass

import numpy as np

PERCENTILE_METHOD = "linear interpolation between order statistics, h = (n - 1) * q"


def suffix_agreement_start(sequence, final):
    """Earliest index ``s`` with ``sequence[s:] == final`` everywhere; None if the last differs."""
    seq = list(sequence)
    if not seq:
        raise ValueError("empty prediction sequence")
    if seq[-1] != final:
        return None
    s = len(seq)
    while s > 0 and seq[s - 1] == final:
        s -= 1
    return s


def suffix_agreement_batch(matrix, finals):
    """Column-wise suffix agreement for ``matrix[position, example]``; -1 where undefined."""
    m = np.asarray(matrix)
    if m.ndim != 2 or m.shape[0] == 0:
        raise ValueError("need a non-empty [positions, examples] matrix")
    agree = m == np.asarray(finals)[None, :]
    rev = ~agree[::-1]
    # index of the last disagreement counted from the end
    has_dis = rev.any(axis=0)
    last_dis = m.shape[0] - 1 - np.argmax(rev, axis=0)
    start = np.where(has_dis, last_dis + 1, 0)
    return np.where(agree[-1], start, -1).astype(np.int64)


@dataclass(frozen=True)
class DepthResult:
    depth: object  # int, or None when undefined
    probe_predictions: tuple
    final_prediction: int

    @property
    def defined(self):
        return self.depth is not None


def prediction_depth(probe_predictions, final_prediction):
    """Layer from which every k-NN probe agrees with the network's prediction.

    Undefined (``depth is None``) when the softmax probe itself disagrees with
    the network.
    """
    preds = tuple(int(p) for p in probe_predictions)
    return DepthResult(suffix_agreement_start(preds, int(final_prediction)), preds, int(final_prediction))


def iteration_learned(checkpoint_predictions, final_prediction, steps=None):
    """Checkpoint step from which the prediction permanently equals the final one."""
    preds = list(checkpoint_predictions)
    if not preds:
        raise ValueError("no checkpoints")
    if preds[-1] != final_prediction:
        raise ValueError("last checkpoint prediction differs from the final prediction")
    s = suffix_agreement_start(preds, final_prediction)
    steps = list(range(len(preds))) if steps is None else list(steps)
    return int(steps[s])


def percentile(values, q):
    """Linear-interpolation percentile, ``q`` in [0, 100]."""
    v = np.sort(np.asarray(values, dtype=np.float64))
    if v.size == 0:
        raise ValueError("percentile of an empty sequence")
    h = (v.size - 1) * q / 100.0
    lo = int(np.floor(h))
    hi = min(lo + 1, v.size - 1)
    return float(v[lo] + (h - lo) * (v[hi] - v[lo]))


def rescale_iterations(taus):
    """Divide by the 95th percentile so it lands at 1.0; all zeros when that is 0."""
    t = np.asarray(taus, dtype=np.float64)
    if t.size == 0:
        raise ValueError("no iterations to rescale")
    if np.any(t < 0):
        raise ValueError("iterations must be non-negative")
    p95 = percentile(t, 95)
    if p95 == 0:
        return np.zeros_like(t)
    return t / p95


PARTITIONS = ("clean_train", "noisy_train", "noisy_original", "validation")


def inference_learning_curve(layer_predictions, partitions):
    """Per-layer probe accuracy for each named partition.

    ``layer_predictions[l, i]`` is the probe-``l`` class for example ``i``;
    ``partitions`` maps a name to ``(indices, labels_for_all_examples)``.
    Empty partitions yield NaN rather than an accuracy.
    """
    lp = np.asarray(layer_predictions)
    table = {}
    for name, (idx, labels) in partitions.items():
        idx = np.asarray(idx, dtype=np.int64)
        if idx.size == 0:
            table[name] = np.full(lp.shape[0], np.nan)
        else:
            table[name] = (lp[:, idx] == np.asarray(labels)[idx][None, :]).mean(axis=1)
    return table


def noise_partitions(dataset, split):
    """The four partitions used for learning curves of a label-noise run."""
    tr = np.asarray(split.train_indices)
    noisy = dataset.noise_mask[tr]
    return {
        "clean_train": (tr[~noisy], dataset.labels),
        "noisy_train": (tr[noisy], dataset.labels),
        "noisy_original": (tr[noisy], dataset.original_labels),
        "validation": (np.asarray(split.val_indices), dataset.labels),
    }
