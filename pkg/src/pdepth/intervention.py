"""Low-margin intervention: {cross-entropy, zero-hinge} x {SGD, full-batch GD}.

The two-class task puts well separated Gaussian clusters in a couple of
feature columns and pads them with wider pure-noise columns. Distances are
dominated by the noise, so k-NN on the raw input is weak while a single linear
direction separates the classes; the unit-ish input scale keeps the untrained
network's logit gaps near 0.1.
"""

import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from threadpoolctl import threadpool_limits

from . import config as cfgmod
from . import plotting, store
from .data import append_distractors, gaussian_blobs, make_split
from .experiment import layer_neighbors
from .knn import vote
from .margins import output_margin
from .mlp import TrainConfig, TrainingDiverged, forward, init_model, train
from .rng import SEED_SCHEME, derive_seed

CELLS = ("ce_sgd", "ce_gd", "hinge_sgd", "hinge_gd")


@dataclass(frozen=True)
class InterventionConfig:
    seed: int = 0
    per_class: int = 2048
    test_per_class: int = 256
    signal_dim: int = 2
    center_scale: float = 0.05
    sigma: float = 0.0125
    distractors: int = 62
    distractor_sigma: float = 0.125
    hidden_layers: int = 4
    width: int = 128
    k: int = 30
    self_mode: str = "include"
    repeats: int = 1
    log_every: int = 100
    sgd_batch_size: int = 256
    ce_sgd_lr: float = 0.05
    ce_sgd_steps: int = 3000
    ce_sgd_schedule: tuple = (2000,)
    ce_sgd_momentum: float = 0.9
    ce_gd_lr: float = 0.1
    ce_gd_steps: int = 1000
    ce_gd_momentum: float = 0.9
    hinge_sgd_lr: float = 0.05
    hinge_sgd_steps: int = 3000
    hinge_sgd_schedule: tuple = (2000,)
    hinge_sgd_momentum: float = 0.9
    hinge_gd_lr: float = 0.1
    hinge_gd_steps: int = 1000
    hinge_gd_momentum: float = 0.9
    reach_fraction: float = 0.9

    def cell_config(self, cell, seed):
        loss = "cross_entropy" if cell.startswith("ce") else "zero_hinge"
        gd = cell.endswith("gd")
        steps = getattr(self, f"{cell}_steps")
        return TrainConfig(
            loss=loss, optimizer="full_batch_gd" if gd else "sgd",
            learning_rate=getattr(self, f"{cell}_lr"), momentum=getattr(self, f"{cell}_momentum"),
            batch_size=self.sgd_batch_size, schedule=() if gd else getattr(self, f"{cell}_schedule"),
            total_steps=steps, log_every=min(self.log_every, max(steps, 1)), seed=seed)

    def as_dict(self):
        import dataclasses

        d = dataclasses.asdict(self)
        return {k: list(v) if isinstance(v, tuple) else v for k, v in d.items()}


def build_task(cfg):
    total = cfg.per_class + cfg.test_per_class
    seed = derive_seed(cfg.seed, "intervention-data")
    ds = gaussian_blobs(2, total, cfg.signal_dim, cfg.center_scale, cfg.sigma, seed)
    ds = append_distractors(ds, cfg.distractors, cfg.distractor_sigma, seed)
    split = make_split(ds.n, cfg.test_per_class / total, derive_seed(cfg.seed, "intervention-split"))
    return ds, split


def probe_curve(trace, ds, split, k, self_mode):
    layers = layer_neighbors(trace, ds.labels, split, k, self_mode, ds.num_classes)
    preds = np.stack([vote(p, nb)[0] for p, nb in layers])
    tr, te = split.train_indices, split.val_indices
    return ((preds[:, tr] == ds.labels[tr]).mean(axis=1), (preds[:, te] == ds.labels[te]).mean(axis=1))


def earliest_reaching(curve, target):
    hit = np.flatnonzero(np.asarray(curve) >= target)
    return int(hit[0]) if hit.size else -1


def run_cell(cfg, ds, split, cell, repeat):
    widths = (ds.dim,) + (cfg.width,) * cfg.hidden_layers + (2,)
    model = init_model(widths, derive_seed(cfg.seed, f"intervention-init-{cell}", repeat))
    tc = cfg.cell_config(cell, derive_seed(cfg.seed, f"intervention-train-{cell}", repeat))
    model, log_, trace = train(model, ds, split, tc)
    logits = forward(model, ds.examples)
    pred = np.argmax(logits, axis=1)
    tr, te = split.train_indices, split.val_indices
    train_acc = float(np.mean(pred[tr] == ds.labels[tr]))
    test_acc = float(np.mean(pred[te] == ds.labels[te]))
    probe_train, probe_test = probe_curve(trace, ds, split, cfg.k, cfg.self_mode)
    return dict(
        cell=cell, repeat=repeat, model=model, log=log_, trace=trace, train_accuracy=train_acc,
        test_accuracy=test_acc, output_margin=float(np.mean(output_margin(logits[te]))),
        train_output_margin=float(np.mean(output_margin(logits[tr]))),
        probe_train=probe_train, probe_test=probe_test,
        reach_layer=earliest_reaching(probe_train, cfg.reach_fraction * train_acc))


def run_intervention(cfg, out):
    """Train the 2x2 grid (plus an untrained reference) and write a run directory."""
    root = Path(out)
    root.mkdir(parents=True, exist_ok=True)
    ds, split = build_task(cfg)
    results, errors, files = {}, {}, {}
    with threadpool_limits(1):
        for cell in CELLS:
            results[cell] = []
            for r in range(cfg.repeats):
                try:
                    res = run_cell(cfg, ds, split, cell, r)
                except TrainingDiverged as exc:
                    errors[f"{cell}/{r}"] = str(exc)
                    continue
                results[cell].append(res)
                files[f"models/{cell}_{r}.pdmlp"] = store.encode_model(res["model"])
                files[f"embeddings/{cell}_{r}.pdemb"] = store.encode_trace(res["trace"])
        widths = (ds.dim,) + (cfg.width,) * cfg.hidden_layers + (2,)
        untrained = init_model(widths, derive_seed(cfg.seed, "intervention-untrained"))
        _, _, trace0 = train(untrained, ds, split, TrainConfig(total_steps=0))
        base_train, base_test = probe_curve(trace0, ds, split, cfg.k, cfg.self_mode)

    summary = {}
    rows, probe_rows = [], []
    for cell in CELLS:
        rs = results[cell]
        if not rs:
            summary[cell] = None
            continue
        s = {key: float(np.mean([r[key] for r in rs]))
             for key in ("train_accuracy", "test_accuracy", "output_margin", "train_output_margin")}
        s["probe_train"] = np.mean([r["probe_train"] for r in rs], axis=0).tolist()
        s["probe_test"] = np.mean([r["probe_test"] for r in rs], axis=0).tolist()
        s["reach_layer"] = earliest_reaching(s["probe_train"], cfg.reach_fraction * s["train_accuracy"])
        summary[cell] = s
        rows.append([cell, len(rs), s["train_accuracy"], s["test_accuracy"], s["output_margin"],
                     s["train_output_margin"], s["reach_layer"]])
        for l, (a, b) in enumerate(zip(s["probe_train"], s["probe_test"])):
            probe_rows.append([cell, l, a, b])
    for l, (a, b) in enumerate(zip(base_train, base_test)):
        probe_rows.append(["untrained", l, a, b])
    summary["untrained"] = {"probe_train": base_train.tolist(), "probe_test": base_test.tolist()}
    ce, hg = summary.get("ce_sgd"), summary.get("hinge_gd")
    if ce and hg:
        summary["margin_ratio"] = hg["output_margin"] / ce["output_margin"] if ce["output_margin"] > 0 else math.inf
    files["metrics/intervention.csv"] = store.csv_bytes(
        ["cell", "repeats", "train_accuracy", "test_accuracy", "mean_output_margin", "mean_train_output_margin",
         "reach_layer"], rows)
    files["metrics/intervention_probes.csv"] = store.csv_bytes(["cell", "layer", "train_accuracy", "test_accuracy"],
                                                               probe_rows)
    for rel, data in files.items():
        store.write_artifact(root, rel, data)
    svg = root / "analysis" / "intervention.svg"
    svg.parent.mkdir(exist_ok=True)
    fig, axes = plotting.figure(2)
    for ax, key in zip(axes, ("probe_train", "probe_test")):
        series = {c: (np.arange(len(summary[c][key])), summary[c][key]) for c in CELLS if summary.get(c)}
        series["untrained"] = (np.arange(len(base_train)), summary["untrained"][key])
        plotting.lines(ax, series, f"k-NN probe accuracy ({key.split('_')[1]})", "probe layer", "accuracy")
    plotting.save(fig, svg)
    manifest = dict(kind="intervention", base_seed=cfg.seed, seed_scheme=SEED_SCHEME, config=cfg.as_dict(),
                    dataset=dict(digest=ds.digest(), n=ds.n, dim=ds.dim, num_classes=2),
                    probe=dict(k=cfg.k, metric="squared_euclidean", self_mode=cfg.self_mode),
                    errors=errors)
    store.finalize_manifest(root, manifest, list(files))
    return summary, errors


def load_config(path=None, **overrides):
    return cfgmod.load(InterventionConfig, path, overrides)
