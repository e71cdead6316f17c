"""Statistics across an ensemble of models trained on random splits."""

import math
import warnings
from dataclasses import dataclass

import numpy as np

CORNERS = {
    # (PD_val, PD_train) in the unit square
    "easy": (0.0, 0.0),
    "looks_like_other": (0.0, 1.0),
    "ambiguous_unless_label": (1.0, 0.0),
    "ambiguous": (1.0, 1.0),
}
ENTROPY_BASE = "e"
TIEBREAK_RULE = "ties containing the ground truth resolve to it, otherwise lowest class index"


def _preds(predictions):
    p = np.asarray(predictions, dtype=np.int64).ravel()
    return p


def consistency_score(predictions, ground_truth):
    """Fraction of held-out predictions equal to the ground truth; NaN with none."""
    p = _preds(predictions)
    if p.size == 0:
        return math.nan
    return float(np.mean(p == ground_truth))


def consensus_class(predictions, ground_truth):
    p = _preds(predictions)
    if p.size == 0:
        raise ValueError("consensus of an empty prediction set")
    counts = np.bincount(p, minlength=max(int(p.max()), int(ground_truth)) + 1)
    top = counts.max()
    if counts[ground_truth] == top:
        return int(ground_truth)
    return int(np.flatnonzero(counts == top)[0])


def consensus_consistency(predictions, consensus):
    p = _preds(predictions)
    if p.size == 0:
        return math.nan
    return float(np.mean(p == consensus))


def prediction_entropy(predictions, num_classes):
    """Entropy (natural log) of the normalized prediction histogram."""
    p = _preds(predictions)
    if p.size == 0:
        raise ValueError("entropy of an empty prediction set")
    freq = np.bincount(p, minlength=num_classes) / p.size
    nz = freq[freq > 0]
    return float(-(nz * np.log(nz)).sum()) + 0.0


# -- correlations ----------------------------------------------------------

def average_ranks(values):
    """1-based ranks with ties given the mean of their positions."""
    v = np.asarray(values, dtype=np.float64)
    order = np.argsort(v, kind="stable")
    sv = v[order]
    ranks = np.empty(v.size, dtype=np.float64)
    start = 0
    while start < v.size:
        end = start
        while end + 1 < v.size and sv[end + 1] == sv[start]:
            end += 1
        ranks[order[start:end + 1]] = (start + end) / 2.0 + 1.0
        start = end + 1
    return ranks


def pearson(xs, ys):
    x = np.asarray(xs, dtype=np.float64)
    y = np.asarray(ys, dtype=np.float64)
    if x.shape != y.shape or x.size < 2:
        raise ValueError("need two equal-length sequences of at least 2 values")
    dx, dy = x - x.mean(), y - y.mean()
    den = math.sqrt(float((dx * dx).sum()) * float((dy * dy).sum()))
    if den == 0:
        return math.nan
    return float(np.clip((dx * dy).sum() / den, -1.0, 1.0))


def spearman(xs, ys):
    """Rank correlation with average ranks for ties; NaN at zero rank variance."""
    x = np.asarray(xs, dtype=np.float64)
    y = np.asarray(ys, dtype=np.float64)
    if x.shape != y.shape or x.size < 2:
        raise ValueError("need two equal-length sequences of at least 2 values")
    return pearson(average_ranks(x), average_ranks(y))


def pearson_log(xs, margins):
    """Pearson of ``xs`` against ``ln(margins)``; returns ``(r, n_excluded)``.

    Non-positive and non-finite margins are dropped and counted.
    """
    x = np.asarray(xs, dtype=np.float64)
    m = np.asarray(margins, dtype=np.float64)
    keep = np.isfinite(m) & (m > 0) & np.isfinite(x)
    if keep.sum() < 2:
        raise ValueError("fewer than 2 positive finite margins")
    return pearson(x[keep], np.log(m[keep])), int((~keep).sum())


# -- ensemble aggregation --------------------------------------------------

@dataclass
class EnsembleTable:
    """Per-model records for every tracked example.

    Arrays are [models, examples]; ``depth`` is -1 where undefined.
    """

    truth: np.ndarray
    in_val: np.ndarray
    preds: np.ndarray
    depth: np.ndarray
    tau_rescaled: np.ndarray

    def __post_init__(self):
        shapes = {a.shape for a in (self.in_val, self.preds, self.depth, self.tau_rescaled)}
        if len(shapes) != 1 or next(iter(shapes))[1] != len(self.truth):
            raise ValueError("every model must contribute one entry per example")

    @property
    def num_models(self):
        return self.preds.shape[0]

    @property
    def num_examples(self):
        return self.preds.shape[1]


@dataclass
class DifficultyProfile:
    """Per-example aggregates (struct of arrays, NaN where undefined)."""

    ids: np.ndarray
    truth: np.ndarray
    consensus: np.ndarray
    c_hat: np.ndarray
    c_star: np.ndarray
    entropy: np.ndarray
    mean_pd_val: np.ndarray
    mean_pd_train: np.ndarray
    mean_tau: np.ndarray
    corner: list
    num_layers: int

    def __len__(self):
        return len(self.ids)


def _masked_mean(values, mask):
    cnt = mask.sum(axis=0)
    tot = np.where(mask, values, 0.0).sum(axis=0)
    with np.errstate(invalid="ignore", divide="ignore"):
        return np.where(cnt > 0, tot / np.maximum(cnt, 1), np.nan)


def nearest_corner(pd_val, pd_train):
    if not (np.isfinite(pd_val) and np.isfinite(pd_train)):
        return ""
    best = min(CORNERS, key=lambda c: (math.hypot(pd_val - CORNERS[c][0], pd_train - CORNERS[c][1]),
                                       list(CORNERS).index(c)))
    return best


def difficulty_profiles(table, num_layers, num_classes):
    """Aggregate an ensemble table; statistics of predictions use validation occurrences only."""
    n = table.num_examples
    consensus = np.full(n, -1, dtype=np.int64)
    c_hat = np.full(n, np.nan)
    c_star = np.full(n, np.nan)
    entropy = np.full(n, np.nan)
    for i in range(n):
        p = table.preds[table.in_val[:, i], i]
        if p.size == 0:
            continue
        t = int(table.truth[i])
        consensus[i] = consensus_class(p, t)
        c_hat[i] = consistency_score(p, t)
        c_star[i] = consensus_consistency(p, consensus[i])
        entropy[i] = prediction_entropy(p, num_classes)
    defined = table.depth >= 0
    depth = table.depth.astype(np.float64)
    mean_pd_val = _masked_mean(depth, defined & table.in_val)
    mean_pd_train = _masked_mean(depth, defined & ~table.in_val)
    mean_tau = _masked_mean(table.tau_rescaled, table.in_val)
    corner = [nearest_corner(v / num_layers, t / num_layers) for v, t in zip(mean_pd_val, mean_pd_train)]
    return DifficultyProfile(np.arange(n), np.asarray(table.truth, dtype=np.int64), consensus, c_hat,
                             c_star, entropy, mean_pd_val, mean_pd_train, mean_tau, corner, num_layers)


def corner_distances(pd_val, pd_train, num_layers):
    """Distances [n, 4] from depth-normalized points to each corner (CORNERS order)."""
    v = np.asarray(pd_val, dtype=np.float64) / num_layers
    t = np.asarray(pd_train, dtype=np.float64) / num_layers
    return np.stack([np.hypot(v - cx, t - cy) for cx, cy in CORNERS.values()], axis=1)


def corner_examples(profiles, corner, count):
    """Ids of the ``count`` examples closest to ``corner``, ties by id."""
    if corner not in CORNERS:
        raise ValueError(f"corner must be one of {sorted(CORNERS)}")
    col = list(CORNERS).index(corner)
    d = corner_distances(profiles.mean_pd_val, profiles.mean_pd_train, profiles.num_layers)[:, col]
    ok = np.flatnonzero(np.isfinite(d))
    order = ok[np.lexsort((profiles.ids[ok], d[ok]))]
    if count > order.size:
        warnings.warn(f"only {order.size} examples available for corner {corner!r}, asked for {count}")
    return profiles.ids[order[:count]]


def override_accuracy(model_preds, probe_preds, truth):
    """(model accuracy, probe accuracy) on matching prediction arrays."""
    m = np.asarray(model_preds)
    p = np.asarray(probe_preds)
    t = np.asarray(truth)
    if m.size == 0:
        raise ValueError("empty example set")
    return float(np.mean(m == t)), float(np.mean(p == t))


def midlayer_override_eval(model, probe, x, labels, ids):
    """Accuracy of the network vs. its layer-``probe.layer`` k-NN probe on ``ids``."""
    from .knn import classify_batch
    from .mlp import forward_with_embeddings

    ids = np.asarray(ids, dtype=np.int64)
    if ids.size == 0:
        raise ValueError("empty example set")
    if not 0 < probe.layer < model.num_probes - 1:
        raise ValueError("override probe must sit at an interior layer")
    logits, probes = forward_with_embeddings(model, np.asarray(x)[ids])
    probe_pred, _ = classify_batch(probe, probes[probe.layer])
    return override_accuracy(np.argmax(logits, axis=1), probe_pred, np.asarray(labels)[ids])


@dataclass
class BucketTrend:
    buckets: np.ndarray
    counts: np.ndarray
    means: np.ndarray
    rho: float


def depth_bucket(mean_pd):
    return np.floor(np.asarray(mean_pd, dtype=np.float64) + 0.5)


def bucket_trend(mean_pd, y, min_count=10):
    """Mean of ``y`` per rounded-depth bucket and the Spearman rho of bucket means."""
    x = np.asarray(mean_pd, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    keep = np.isfinite(x) & np.isfinite(y)
    b = depth_bucket(x[keep])
    yk = y[keep]
    buckets, counts, means = [], [], []
    for v in np.unique(b):
        sel = b == v
        if sel.sum() >= min_count:
            buckets.append(v)
            counts.append(int(sel.sum()))
            means.append(float(yk[sel].mean()))
    if len(buckets) < 2:
        raise ValueError("fewer than 2 buckets with enough points")
    buckets = np.array(buckets)
    means = np.array(means)
    return BucketTrend(buckets, np.array(counts), means, spearman(buckets, means))
