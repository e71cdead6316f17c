"""Feedforward ReLU networks with hand-written backpropagation.

Layer ``l`` computes ``z = h @ W[l] + b[l]`` with ``W[l]`` of shape
(fan_in, fan_out); ReLU follows every layer except the last. Probe points
for k-NN analysis are the raw input, each hidden pre-activation and the
softmax of the logits, so a net with ``H`` hidden layers has ``H + 2`` probes.
"""

from dataclasses import dataclass, field

import numpy as np

from .rng import generator

LOSSES = ("cross_entropy", "zero_hinge")
OPTIMIZERS = ("sgd", "full_batch_gd")


class TrainingDiverged(FloatingPointError):
    def __init__(self, step, what="loss"):
        super().__init__(f"non-finite {what} at step {step}")
        self.step = step


@dataclass
class MlpModel:
    widths: tuple
    weights: list
    biases: list

    @property
    def dtype(self):
        return self.weights[0].dtype

    @property
    def num_probes(self):
        return len(self.widths)  # input + hidden pre-activations + softmax

    @property
    def num_classes(self):
        return self.widths[-1]

    def copy(self):
        return MlpModel(tuple(self.widths), [w.copy() for w in self.weights], [b.copy() for b in self.biases])

    def astype(self, dtype):
        return MlpModel(tuple(self.widths), [w.astype(dtype) for w in self.weights],
                        [b.astype(dtype) for b in self.biases])

    def parameters(self):
        for w, b in zip(self.weights, self.biases):
            yield w
            yield b


def _check_widths(widths):
    widths = tuple(int(w) for w in widths)
    if len(widths) < 2 or any(w < 1 for w in widths):
        raise ValueError(f"invalid layer widths {widths}")
    return widths


def init_model(widths, seed, dtype=np.float32):
    """Uniform(-a, a) weights with ``a = sqrt(6 / fan_in)``; zero biases."""
    widths = _check_widths(widths)
    rng = generator(seed, "init")
    weights, biases = [], []
    for fan_in, fan_out in zip(widths[:-1], widths[1:]):
        a = np.sqrt(6.0 / fan_in)
        weights.append(rng.uniform(-a, a, size=(fan_in, fan_out)).astype(dtype))
        biases.append(np.zeros(fan_out, dtype=dtype))
    return MlpModel(widths, weights, biases)


def _as_input(model, x):
    x = np.asarray(x, dtype=model.dtype)
    if x.ndim == 1:
        x = x[None, :]
    if x.shape[1] != model.widths[0]:
        raise ValueError(f"input dimension {x.shape[1]} does not match model input {model.widths[0]}")
    return x


def _forward_cache(model, x):
    pre, acts = [], [x]
    h = x
    last = len(model.weights) - 1
    for l, (w, b) in enumerate(zip(model.weights, model.biases)):
        z = h @ w + b
        pre.append(z)
        if l < last:
            h = np.maximum(z, 0)
            acts.append(h)
    return pre, acts


def softmax(logits):
    z = np.asarray(logits, dtype=np.float64)
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def forward(model, x):
    x = _as_input(model, x)
    return _forward_cache(model, x)[0][-1]


def forward_with_embeddings(model, x):
    """Return ``(logits, probes)``; ``probes[0]`` is ``x``, ``probes[-1]`` the softmax."""
    x = _as_input(model, x)
    pre, _ = _forward_cache(model, x)
    logits = pre[-1]
    probes = [x] + pre[:-1] + [softmax(logits).astype(model.dtype)]
    return logits, probes


def predict(model, x):
    # np.argmax resolves ties to the lowest class index
    return np.argmax(forward(model, x), axis=1)


# -- losses ----------------------------------------------------------------

def _logits_labels(logits, labels):
    z = np.asarray(logits, dtype=np.float64)
    if z.ndim == 1:
        z = z[None, :]
    y = np.atleast_1d(np.asarray(labels, dtype=np.int64))
    if not np.all(np.isfinite(z)):
        raise FloatingPointError("non-finite logits")
    if y.shape[0] != z.shape[0] or y.min() < 0 or y.max() >= z.shape[1]:
        raise ValueError("labels must be valid class indices, one per row")
    return z, y


def cross_entropy_terms(logits, labels):
    z, y = _logits_labels(logits, labels)
    shifted = z - z.max(axis=1, keepdims=True)
    logsumexp = np.log(np.exp(shifted).sum(axis=1))
    losses = logsumexp - shifted[np.arange(len(y)), y]
    grad = softmax(z)
    grad[np.arange(len(y)), y] -= 1.0
    return losses, grad


def zero_hinge_terms(logits, labels):
    """Per-row ``sum_{j != i} max(0, z_j - z_i)`` and its gradient w.r.t. logits."""
    z, y = _logits_labels(logits, labels)
    rows = np.arange(len(y))
    diff = z - z[rows, y][:, None]
    diff[rows, y] = 0.0
    active = diff > 0
    losses = np.where(active, diff, 0.0).sum(axis=1)
    grad = active.astype(np.float64)
    grad[rows, y] = -active.sum(axis=1)
    return losses, grad


_LOSS_TERMS = {"cross_entropy": cross_entropy_terms, "zero_hinge": zero_hinge_terms}


def loss_cross_entropy(logits, label):
    return float(cross_entropy_terms(logits, [label])[0][0])


def loss_zero_hinge(logits, label):
    return float(zero_hinge_terms(logits, [label])[0][0])


def loss_terms(kind, logits, labels):
    try:
        return _LOSS_TERMS[kind](logits, labels)
    except KeyError:
        raise ValueError(f"unknown loss {kind!r}") from None


# -- backpropagation -------------------------------------------------------

def backprop(model, x, grad_logits, cache=None):
    """Push ``dL/dlogits`` back through the net.

    Returns ``(grad_weights, grad_biases, grad_input)`` for the summed loss
    whose logit gradient is ``grad_logits`` (scale it for a mean).
    """
    x = _as_input(model, x)
    pre, acts = cache if cache is not None else _forward_cache(model, x)
    g = np.asarray(grad_logits, dtype=model.dtype)
    gw = [None] * len(model.weights)
    gb = [None] * len(model.weights)
    for l in range(len(model.weights) - 1, -1, -1):
        gw[l] = acts[l].T @ g
        gb[l] = g.sum(axis=0)
        g = g @ model.weights[l].T
        if l > 0:
            g = g * (pre[l - 1] > 0)
    return gw, gb, g


def backward(model, x, labels, loss):
    """Mean batch loss and its gradients with respect to every parameter."""
    x = _as_input(model, x)
    if x.shape[0] == 0:
        raise ValueError("empty batch")
    cache = _forward_cache(model, x)
    losses, dz = loss_terms(loss, cache[0][-1], labels)
    n = x.shape[0]
    gw, gb, _ = backprop(model, x, dz / n, cache)
    for g in gw + gb:
        if not np.all(np.isfinite(g)):
            raise FloatingPointError("non-finite gradient during backpropagation")
    return float(losses.sum() / n), gw, gb


def input_gradient(model, x, class_pair):
    """Exact gradient of ``z_i - z_j`` with respect to the (single) input ``x``."""
    i, j = class_pair
    if i == j:
        raise ValueError("class pair must name two different classes")
    x = _as_input(model, x)
    dz = np.zeros((x.shape[0], model.num_classes), dtype=model.dtype)
    dz[:, i] = 1
    dz[:, j] = -1
    g = backprop(model, x, dz)[2]
    if not np.all(np.isfinite(g)):
        raise FloatingPointError("non-finite input gradient")
    return g[0] if g.shape[0] == 1 else g


def logit_input_jacobian(model, x):
    """``J[n, c, :] = d z_c / d x`` for every row of ``x``."""
    x = _as_input(model, x)
    cache = _forward_cache(model, x)
    n, c = x.shape[0], model.num_classes
    jac = np.empty((n, c, x.shape[1]), dtype=model.dtype)
    for cls in range(c):
        dz = np.zeros((n, c), dtype=model.dtype)
        dz[:, cls] = 1
        jac[:, cls, :] = backprop(model, x, dz, cache)[2]
    return jac


# -- training --------------------------------------------------------------

@dataclass(frozen=True)
class TrainConfig:
    loss: str = "cross_entropy"
    optimizer: str = "sgd"
    learning_rate: float = 0.02
    momentum: float = 0.9
    batch_size: int = 256
    schedule: tuple = ()
    total_steps: int = 2000
    log_every: int = 10
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "schedule", tuple(int(s) for s in self.schedule))
        if self.loss not in LOSSES:
            raise ValueError(f"loss must be one of {LOSSES}")
        if self.optimizer not in OPTIMIZERS:
            raise ValueError(f"optimizer must be one of {OPTIMIZERS}")
        if self.learning_rate < 0:
            raise ValueError("learning_rate must be non-negative")
        if not 0.0 <= self.momentum < 1.0:
            raise ValueError("momentum must lie in [0, 1)")
        if self.batch_size < 1 or self.log_every < 1 or self.total_steps < 0:
            raise ValueError("batch_size and log_every must be positive, total_steps non-negative")
        s = self.schedule
        if any(b <= a for a, b in zip(s, s[1:])) or any(b < 1 or b > self.total_steps for b in s):
            raise ValueError("schedule boundaries must be strictly increasing within (0, total_steps]")

    def lr_at(self, step):
        """Learning rate used for the update that produces ``step + 1``."""
        drops = sum(1 for b in self.schedule if step >= b)
        return self.learning_rate * 0.2 ** drops

    def as_dict(self):
        return dict(loss=self.loss, optimizer=self.optimizer, learning_rate=float(self.learning_rate),
                    momentum=float(self.momentum), batch_size=int(self.batch_size),
                    schedule=list(self.schedule), total_steps=int(self.total_steps),
                    log_every=int(self.log_every), seed=int(self.seed))


CURVES = ("loss", "clean_train", "noisy_train", "noisy_original", "validation")


@dataclass
class TrainingLog:
    """Checkpoint steps, tracked-example predictions per checkpoint, curves.

    ``predictions[c, m]`` is the argmax class of tracked example ``m`` at
    ``steps[c]``. ``curves[name][c]`` holds mean loss over the training split
    and accuracies per data partition (NaN for an empty partition).
    """

    steps: np.ndarray
    predictions: np.ndarray
    curves: dict = field(default_factory=dict)

    @property
    def final_predictions(self):
        return self.predictions[-1]


def _partition_accuracy(pred, labels, idx):
    if len(idx) == 0:
        return np.nan
    return float(np.mean(pred[idx] == labels[idx]))


def checkpoint_steps(config):
    steps = list(range(0, config.total_steps + 1, config.log_every))
    if steps[-1] != config.total_steps:
        steps.append(config.total_steps)
    return steps


def _batches(train_idx, config, rng):
    if config.optimizer == "full_batch_gd":
        while True:
            yield train_idx
    bs = config.batch_size
    while True:
        perm = train_idx[rng.permutation(len(train_idx))]
        for start in range(0, len(perm), bs):
            yield perm[start:start + bs]


def train(model, dataset, split, config, track=None):
    """Momentum (S)GD on ``split.train_indices``.

    Update: ``v <- m*v - lr*g``; ``theta <- theta + v``. Predictions of the
    tracked examples (default: all) are logged at step 0, every
    ``log_every`` steps and at the final step. Returns the trained copy of
    ``model``, the log and the probe embeddings at the final parameters.
    """
    train_idx = np.asarray(split.train_indices, dtype=np.int64)
    val_idx = np.asarray(split.val_indices, dtype=np.int64)
    if len(train_idx) == 0:
        raise ValueError("empty training split")
    if max(train_idx.max(), val_idx.max() if len(val_idx) else 0) >= dataset.n:
        raise ValueError("split indices exceed dataset size")
    track = np.arange(dataset.n) if track is None else np.asarray(track, dtype=np.int64)
    model = model.copy()
    x_all = dataset.examples.astype(model.dtype)
    y = dataset.labels
    noisy = dataset.noise_mask[train_idx]
    parts = dict(clean_train=(train_idx[~noisy], y), noisy_train=(train_idx[noisy], y),
                 noisy_original=(train_idx[noisy], dataset.original_labels), validation=(val_idx, y))

    ckpts = set(checkpoint_steps(config))
    steps, preds = [], []
    curves = {name: [] for name in CURVES}

    def log(step):
        with np.errstate(over="ignore", invalid="ignore"):
            logits = forward(model, x_all)
        if not np.all(np.isfinite(logits)):
            raise TrainingDiverged(step, "logits")
        pred = np.argmax(logits, axis=1)
        losses, _ = loss_terms(config.loss, logits[train_idx], y[train_idx])
        steps.append(step)
        preds.append(pred[track])
        curves["loss"].append(float(losses.mean()))
        for name, (idx, labels) in parts.items():
            curves[name].append(_partition_accuracy(pred, labels, idx))

    velocity = [np.zeros_like(p) for p in model.parameters()]
    rng = generator(config.seed, "minibatch")
    batches = _batches(train_idx, config, rng)
    log(0)
    for step in range(config.total_steps):
        batch = next(batches)
        try:
            with np.errstate(over="ignore", invalid="ignore"):
                loss, gw, gb = backward(model, x_all[batch], y[batch], config.loss)
        except FloatingPointError:
            raise TrainingDiverged(step + 1) from None
        if not np.isfinite(loss):
            raise TrainingDiverged(step + 1)
        lr = model.dtype.type(config.lr_at(step))
        mom = model.dtype.type(config.momentum)
        for p, v, g in zip(model.parameters(), velocity, _interleave(gw, gb)):
            v *= mom
            v -= lr * g
            p += v
        if step + 1 in ckpts:
            log(step + 1)

    logits, probes = forward_with_embeddings(model, x_all[track])
    trace = EmbeddingTrace([np.ascontiguousarray(p, dtype=np.float32) for p in probes])
    tlog = TrainingLog(np.array(steps, dtype=np.int64), np.array(preds, dtype=np.int64),
                       {k: np.array(v, dtype=np.float64) for k, v in curves.items()})
    return model, tlog, trace


def _interleave(gw, gb):
    for w, b in zip(gw, gb):
        yield w
        yield b


@dataclass
class EmbeddingTrace:
    """Per-probe activation matrices, rows in tracked-example order."""

    probes: list

    def __len__(self):
        return len(self.probes)

    def __getitem__(self, layer):
        return self.probes[layer]
