"""Exact k-nearest-neighbor classifier probes.

Distances are squared Euclidean on the raw embeddings. Neighbor ties at equal
distance go to the smaller reference index; vote ties go to the smallest class
index. Candidates are found with a fast norm-expansion distance and then
confirmed with the exact ``sum((q - r)**2)`` in float64; rows whose candidate
set cannot be certified fall back to an exact full scan.
"""

from dataclasses import dataclass

import numpy as np

DEFAULT_K = 30
SELF_MODES = ("include", "exclude")

_CHUNK = 256
_PAD = 8


@dataclass(frozen=True)
class ProbeIndex:
    references: np.ndarray
    labels: np.ndarray
    k: int
    layer: int
    num_classes: int
    sq_norms: np.ndarray

    @property
    def n(self):
        return self.references.shape[0]

    @property
    def dim(self):
        return self.references.shape[1]


@dataclass(frozen=True)
class VoteResult:
    predicted: int
    fractions: np.ndarray


def build_probe(embeddings, labels, k=DEFAULT_K, layer=0, num_classes=None):
    refs = np.array(embeddings, dtype=np.float64)
    if refs.ndim != 2 or refs.shape[1] == 0:
        raise ValueError("embeddings must be a 2-d matrix with at least one column")
    lab = np.array(labels, dtype=np.int64)
    if lab.shape != (refs.shape[0],):
        raise ValueError(f"{len(lab)} labels for {refs.shape[0]} reference rows")
    if not 1 <= k <= refs.shape[0]:
        raise ValueError(f"k={k} must lie in [1, {refs.shape[0]}]")
    if lab.min() < 0:
        raise ValueError("labels must be non-negative class indices")
    if num_classes is None:
        num_classes = int(lab.max()) + 1
    elif lab.max() >= num_classes:
        raise ValueError("label outside num_classes")
    for a in (refs, lab):
        a.setflags(write=False)
    norms = np.einsum("ij,ij->i", refs, refs)
    norms.setflags(write=False)
    return ProbeIndex(refs, lab, int(k), int(layer), int(num_classes), norms)


def _exact_row(probe, q, excl):
    d = ((probe.references - q) ** 2).sum(axis=1)
    if excl >= 0:
        d[excl] = np.inf
    return np.argsort(d, kind="stable")[:probe.k]


def neighbors(probe, queries, exclude=None):
    """Indices [Q, k] of the k nearest references for each query row."""
    q = np.asarray(queries, dtype=np.float64)
    if q.ndim == 1:
        q = q[None, :]
    if q.shape[1] != probe.dim:
        raise ValueError(f"query dimension {q.shape[1]} does not match probe dimension {probe.dim}")
    nq = q.shape[0]
    excl = np.full(nq, -1, dtype=np.int64) if exclude is None else np.asarray(exclude, dtype=np.int64).reshape(nq)
    if np.any(excl >= probe.n):
        raise ValueError("exclude index outside the reference rows")
    k = probe.k
    available = probe.n - (excl >= 0)
    if np.any(available < k):
        raise ValueError("k exceeds the number of references left after exclusion")
    out = np.empty((nq, k), dtype=np.int64)
    refs = probe.references
    m = min(probe.n, k + _PAD + 1)
    for s in range(0, nq, _CHUNK):
        qc, ec = q[s:s + _CHUNK], excl[s:s + _CHUNK]
        qn = np.einsum("ij,ij->i", qc, qc)
        approx = qn[:, None] + probe.sq_norms[None, :] - 2.0 * (qc @ refs.T)
        rows = np.flatnonzero(ec >= 0)
        approx[rows, ec[rows]] = np.inf
        if m < probe.n:
            cand = np.argpartition(approx, m - 1, axis=1)[:, :m]
            outside = np.partition(approx, m - 1, axis=1)[:, m - 1]
        else:
            cand = np.broadcast_to(np.arange(probe.n), approx.shape).copy()
            outside = np.full(len(qc), np.inf)
        exact = ((refs[cand] - qc[:, None, :]) ** 2).sum(axis=2)
        exact[cand == ec[:, None]] = np.inf
        order = np.lexsort((cand, exact), axis=1)
        cand = np.take_along_axis(cand, order, axis=1)
        exact = np.take_along_axis(exact, order, axis=1)
        kth = exact[:, k - 1]
        # every reference outside the candidate set has approx >= outside;
        # certify when that bound clears the k-th exact distance with room for rounding
        tol = 1e-9 * (qn + probe.sq_norms.max()) + 1e-300
        ok = (outside - tol > kth) | (m >= probe.n)
        out[s:s + _CHUNK][ok] = cand[ok, :k]
        for b in np.flatnonzero(~ok):
            out[s + b] = _exact_row(probe, qc[b], ec[b])
    return out


def vote(probe, nbrs):
    """Predicted classes [Q] and vote fractions [Q, C] for neighbor index rows.

    Rows from :func:`neighbors` are sorted by distance, so ``nbrs[:, :j]`` is the
    exact j-NN set for any ``j <= k``.
    """
    lab = probe.labels[nbrs]
    counts = np.zeros((lab.shape[0], probe.num_classes), dtype=np.int64)
    np.add.at(counts, (np.repeat(np.arange(lab.shape[0]), lab.shape[1]), lab.ravel()), 1)
    return np.argmax(counts, axis=1), counts / float(lab.shape[1])


def classify_batch(probe, queries, exclude=None):
    return vote(probe, neighbors(probe, queries, exclude))


def classify(probe, query, exclude_index=None):
    query = np.asarray(query, dtype=np.float64)
    if query.ndim != 1:
        raise ValueError("classify takes a single query vector")
    excl = None if exclude_index is None else [exclude_index]
    if exclude_index is not None and not 0 <= exclude_index < probe.n:
        raise ValueError("exclude_index is not a valid reference row")
    pred, frac = classify_batch(probe, query[None, :], excl)
    return VoteResult(int(pred[0]), frac[0])


def self_exclusion(self_mode, self_rows, n_queries):
    if self_mode not in SELF_MODES:
        raise ValueError(f"self_mode must be one of {SELF_MODES}")
    if self_mode == "include":
        return None
    if self_rows is None:
        raise ValueError("exclude mode needs the reference row of every evaluated point")
    rows = np.asarray(self_rows, dtype=np.int64)
    if rows.shape != (n_queries,):
        raise ValueError("one reference row per evaluated point required")
    return rows


def probe_accuracy(probe, eval_embeddings, eval_labels, self_mode="include", self_rows=None):
    """Fraction of points whose probe class equals their label.

    ``self_rows`` maps each evaluated point to its own reference row (or -1);
    it is consulted only in ``exclude`` mode.
    """
    x = np.asarray(eval_embeddings)
    y = np.asarray(eval_labels)
    if x.ndim != 2 or x.shape[0] != y.shape[0]:
        raise ValueError("eval embeddings and labels disagree in length")
    if x.shape[0] == 0:
        raise ValueError("empty evaluation set")
    excl = self_exclusion(self_mode, self_rows, x.shape[0])
    pred, _ = classify_batch(probe, x, excl)
    return float(np.mean(pred == y))
