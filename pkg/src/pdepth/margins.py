"""Output margin and first-order estimate of the adversarial input margin."""

from dataclasses import dataclass

import numpy as np

from .mlp import _as_input, forward, logit_input_jacobian

GRAD_FLOOR = 1e-12


@dataclass(frozen=True)
class MarginEstimate:
    output_margin: float
    input_margin: float  # +inf when every pairwise gradient vanishes
    predicted: int
    min_pair_class: int  # -1 when input_margin is infinite


def output_margin(logits):
    """Largest minus second-largest logit, row-wise for 2-d input."""
    z = np.asarray(logits, dtype=np.float64)
    if z.shape[-1] < 2:
        raise ValueError("output margin needs at least 2 logits")
    top2 = np.partition(z, -2, axis=-1)[..., -2:]
    m = top2[..., 1] - top2[..., 0]
    return float(m) if m.ndim == 0 else m


def input_margins(model, x, chunk=512):
    """Batch form of :func:`input_margin`; returns arrays (out, gamma, pred, pair).

    Computation runs in float64 regardless of the model's parameter dtype.
    """
    m64 = model.astype(np.float64)
    x = _as_input(m64, x)
    parts = [_margins(m64, x[s:s + chunk]) for s in range(0, x.shape[0], chunk)]
    return tuple(np.concatenate(p) for p in zip(*parts))


def _margins(m64, x):
    z = forward(m64, x)
    if not np.all(np.isfinite(z)):
        raise FloatingPointError("non-finite logits")
    jac = logit_input_jacobian(m64, x)
    if not np.all(np.isfinite(jac)):
        raise FloatingPointError("non-finite input gradients")
    rows = np.arange(x.shape[0])
    pred = np.argmax(z, axis=1)
    num = np.abs(z[rows, pred][:, None] - z)
    den = np.linalg.norm(jac[rows, pred][:, None, :] - jac, axis=2)
    with np.errstate(divide="ignore", invalid="ignore"):
        ratio = np.where(den >= GRAD_FLOOR, num / np.where(den >= GRAD_FLOOR, den, 1.0), np.inf)
    ratio[rows, pred] = np.inf
    pair = np.argmin(ratio, axis=1)
    gamma = ratio[rows, pair]
    pair = np.where(np.isfinite(gamma), pair, -1)
    return output_margin(z), gamma, pred, pair


def input_margin(model, x):
    """``min_{j != i} |z_i - z_j| / ||grad_x (z_i - z_j)||_2`` at a single input."""
    out, gamma, pred, pair = input_margins(model, x)
    if out.shape[0] != 1:
        raise ValueError("input_margin takes a single input; use input_margins for batches")
    return MarginEstimate(float(out[0]), float(gamma[0]), int(pred[0]), int(pair[0]))
