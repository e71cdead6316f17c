"""Analyses over a finished ensemble run; each writes one CSV and one SVG.

Every analysis is a pure function of the stored artifacts and the manifest's
policy record, so rerunning it reproduces its CSV byte for byte.
"""

import logging
from dataclasses import dataclass
from functools import cached_property
from pathlib import Path

import numpy as np

from . import plotting, store
from .depth import inference_learning_curve, noise_partitions
from .ensemble import (CORNERS, DifficultyProfile, bucket_trend, corner_distances, corner_examples,
                       override_accuracy, pearson_log, spearman)
from .experiment import _read_checkpoints, build_dataset, config_from_manifest, layer_neighbors
from .knn import vote
from .margins import input_margins
from .mlp import CURVES
from .data import SplitSpec

log = logging.getLogger(__name__)

ANALYSES = ("depth_hist", "consistency", "trend", "corners", "margins", "curves", "ksweep")


class MissingPrerequisite(RuntimeError):
    pass


def _num(v):
    return float(v) if v not in ("", "nan") else np.nan


class Run:
    """Read-only view of an ensemble run directory."""

    def __init__(self, root):
        self.root = Path(root)
        self.manifest, self.files = store.read_run(root)
        if self.manifest.get("kind") != "ensemble":
            raise MissingPrerequisite(f"{root} is not an ensemble run")
        self.cfg = config_from_manifest(self.manifest)
        self.members = list(self.manifest["completed_members"])
        self.L = self.manifest["num_layers"]

    def need(self, rel):
        if rel not in self.files:
            raise MissingPrerequisite(f"missing prerequisite artifact {rel}")
        try:
            return self.files[rel]
        except store.MissingArtifact:
            raise MissingPrerequisite(f"missing prerequisite artifact {rel}") from None

    @cached_property
    def dataset(self):
        ds = build_dataset(self.cfg)
        if ds.digest() != self.manifest["dataset"]["digest"]:
            raise MissingPrerequisite("regenerated dataset does not match the manifest digest")
        return ds

    @cached_property
    def profile(self):
        _, rows = store.read_csv(self.need("metrics/profile.csv"))
        col = lambda j, f=_num: np.array([f(r[j]) for r in rows])  # noqa: E731
        return DifficultyProfile(
            ids=col(0, int), truth=col(1, int),
            consensus=np.array([int(r[2]) if r[2] else -1 for r in rows]),
            c_hat=col(3), c_star=col(4), entropy=col(5), mean_pd_val=col(6), mean_pd_train=col(7),
            mean_tau=col(8), corner=[r[9] for r in rows], num_layers=self.L)

    def member(self, m):
        """(split names [n], layer predictions [L+1, n], final predictions [n])."""
        _, rows = store.read_csv(self.need(f"metrics/probes_{m}.csv"))
        split = np.array([r[1] for r in rows])
        layer = np.array([[int(v) for v in r[2:-1]] for r in rows]).T
        final = np.array([int(r[-1]) for r in rows])
        return split, layer, final

    def depths(self, m):
        _, rows = store.read_csv(self.need(f"metrics/depth_{m}.csv"))
        return np.array([int(r[2]) if r[3] == "1" else -1 for r in rows])

    def split(self, m):
        names, _, _ = self.member(m)
        return SplitSpec(np.flatnonzero(names == "train"), np.flatnonzero(names == "val"), 0)

    def model(self, m):
        return store.decode_model(self.need(f"models/{m}.pdmlp"))

    def trace(self, m):
        return store.decode_trace(self.need(f"embeddings/{m}.pdemb"))


@dataclass
class AnalysisResult:
    name: str
    csv_path: Path
    svg_path: Path
    summary: dict


def _outputs(run, name, out_dir):
    out = Path(out_dir) if out_dir else run.root / "analysis"
    out.mkdir(parents=True, exist_ok=True)
    return out / f"{name}.csv", out / f"{name}.svg"


def _write(path, header, rows):
    Path(path).write_bytes(store.csv_bytes(header, rows))


# -- depth_hist ------------------------------------------------------------

def depth_hist(run, out_dir=None):
    csv_path, svg_path = _outputs(run, "depth_hist", out_dir)
    counts = {"train": np.zeros(run.L + 1, dtype=np.int64), "val": np.zeros(run.L + 1, dtype=np.int64)}
    undefined = {"train": 0, "val": 0}
    for m in run.members:
        names, _, _ = run.member(m)
        d = run.depths(m)
        for s in counts:
            ds = d[names == s]
            counts[s] += np.bincount(ds[ds >= 0], minlength=run.L + 1)
            undefined[s] += int((ds < 0).sum())
    rows, mass = [], {}
    for s, c in counts.items():
        mass[s] = c / c.sum() if c.sum() else np.zeros_like(c, dtype=float)
        rows += [[s, d, c[d], mass[s][d]] for d in range(run.L + 1)]
    _write(csv_path, ["split", "depth", "count", "mass"], rows)
    fig, (ax,) = plotting.figure()
    plotting.bars(ax, mass, list(range(run.L + 1)), "Prediction depth", "depth", "probability")
    plotting.save(fig, svg_path)
    return AnalysisResult("depth_hist", csv_path, svg_path,
                          {"mass": {s: mass[s].tolist() for s in mass}, "undefined": undefined})


# -- consistency -----------------------------------------------------------

def consistency(run, out_dir=None):
    csv_path, svg_path = _outputs(run, "consistency", out_dir)
    p = run.profile
    keep = np.flatnonzero(np.isfinite(p.mean_pd_val) & np.isfinite(p.c_hat))
    match = p.consensus == p.truth
    rows = [[i, p.mean_pd_val[i], p.c_hat[i], p.c_star[i], p.entropy[i], match[i]] for i in keep]
    _write(csv_path, ["id", "mean_pd_val", "c_hat", "c_star", "entropy", "consensus_is_truth"], rows)
    fig, axes = plotting.figure(3)
    for ax, sel, title in ((axes[0], keep, "all"), (axes[1], keep[match[keep]], "consensus = truth"),
                           (axes[2], keep[~match[keep]], "consensus != truth")):
        plotting.scatter(ax, p.mean_pd_val[sel], p.c_hat[sel], title, "mean PD (val)", "consistency")
    plotting.save(fig, svg_path)
    summary = {"n": int(keep.size),
               "spearman_pd_c_hat": spearman(p.mean_pd_val[keep], p.c_hat[keep]) if keep.size > 1 else np.nan,
               "spearman_pd_c_star": spearman(p.mean_pd_val[keep], p.c_star[keep]) if keep.size > 1 else np.nan}
    tk = np.flatnonzero(np.isfinite(p.mean_pd_val) & np.isfinite(p.mean_tau))
    summary["spearman_pd_tau"] = spearman(p.mean_pd_val[tk], p.mean_tau[tk]) if tk.size > 1 else np.nan
    return AnalysisResult("consistency", csv_path, svg_path, summary)


# -- trend -----------------------------------------------------------------

TREND_METRICS = {"c_star": "c_star", "entropy": "entropy", "accuracy": "c_hat", "tau": "mean_tau"}


def trend(run, out_dir=None, min_count=10):
    csv_path, svg_path = _outputs(run, "trend", out_dir)
    p = run.profile
    rows, summary, series = [], {}, {}
    for name, attr in TREND_METRICS.items():
        try:
            t = bucket_trend(p.mean_pd_val, getattr(p, attr), min_count)
        except ValueError:
            summary[name] = np.nan
            continue
        summary[name] = t.rho
        series[name] = (t.buckets, t.means)
        rows += [[name, int(b), c, mu, t.rho] for b, c, mu in zip(t.buckets, t.counts, t.means)]
    _write(csv_path, ["metric", "bucket", "count", "mean", "rho"], rows)
    fig, axes = plotting.figure(len(series) or 1)
    for ax, (name, xy) in zip(axes, series.items()):
        plotting.lines(ax, {name: xy}, name, "mean PD (val) bucket", f"mean {name}")
    plotting.save(fig, svg_path)
    return AnalysisResult("trend", csv_path, svg_path, summary)


# -- corners ---------------------------------------------------------------

def _val_occurrences(run, ids, layer):
    """Per example: lists of (model prediction, probe-``layer`` prediction) over val occurrences."""
    ids = np.asarray(ids)
    out_model, out_probe, out_layers = [], [], []
    for m in run.members:
        names, lp, final = run.member(m)
        sel = ids[names[ids] == "val"]
        out_model.append((sel, final[sel]))
        out_probe.append((sel, lp[layer, sel]))
        out_layers.append((sel, lp[:, sel]))
    return out_model, out_probe, out_layers


def corners(run, out_dir=None, count=50, layer=None):
    layer = run.manifest["policy"]["override_layer"] if layer is None else int(layer)
    csv_path, svg_path = _outputs(run, "corners", out_dir)
    p = run.profile
    dist = corner_distances(p.mean_pd_val, p.mean_pd_train, run.L)
    truth = p.truth
    rows, summary, layer_rows, layer_series = [], {}, [], {}
    picks = {}
    for c_idx, corner in enumerate(CORNERS):
        ids = corner_examples(p, corner, count)
        picks[corner] = ids
        mods, probes, layers = _val_occurrences(run, ids, layer)
        per_model = {i: [] for i in ids}
        per_probe = {i: [] for i in ids}
        for (sel, mp), (_, pp) in zip(mods, probes):
            for i, a, b in zip(sel, mp, pp):
                per_model[i].append(a)
                per_probe[i].append(b)
        all_m = np.concatenate([mp for _, mp in mods]) if mods else np.array([])
        all_p = np.concatenate([pp for _, pp in probes]) if probes else np.array([])
        all_t = np.concatenate([truth[sel] for sel, _ in mods]) if mods else np.array([])
        for rank, i in enumerate(ids):
            mp, pp = np.array(per_model[i]), np.array(per_probe[i])
            rows.append([corner, rank, i, p.mean_pd_val[i], p.mean_pd_train[i], dist[i, c_idx], truth[i],
                         p.consensus[i] if p.consensus[i] >= 0 else "", mp.size,
                         np.mean(mp == truth[i]) if mp.size else np.nan,
                         np.mean(pp == truth[i]) if pp.size else np.nan])
        if all_t.size:
            acc_model, acc_probe = override_accuracy(all_m, all_p, all_t)
            all_l = np.concatenate([lp for _, lp in layers], axis=1)
            all_cons = np.concatenate([p.consensus[sel] for sel, _ in mods])
            acc_layers = (all_l == all_t[None, :]).mean(axis=1)
            cons_layers = (all_l == all_cons[None, :]).mean(axis=1)
        else:
            acc_model = acc_probe = np.nan
            acc_layers = cons_layers = np.full(run.L + 1, np.nan)
        summary[corner] = {"examples": int(len(ids)), "occurrences": int(all_t.size),
                           "model_accuracy": acc_model, "probe_accuracy": acc_probe, "layer": int(layer)}
        layer_series[corner] = (np.arange(run.L + 1), acc_layers)
        layer_rows += [[corner, l, acc_layers[l], cons_layers[l]] for l in range(run.L + 1)]
    _write(csv_path, ["corner", "rank", "id", "mean_pd_val", "mean_pd_train", "distance", "truth", "consensus",
                      "val_occurrences", "model_accuracy", "probe_accuracy"], rows)
    _write(csv_path.with_name("corners_layers.csv"), ["corner", "layer", "acc_truth", "acc_consensus"], layer_rows)
    fig, axes = plotting.figure(2)
    ok = np.isfinite(p.mean_pd_val) & np.isfinite(p.mean_pd_train)
    plotting.scatter(axes[0], p.mean_pd_train[ok], p.mean_pd_val[ok], "", "mean PD (train)", "mean PD (val)",
                     color="#BBBBBB", size=2)
    for s, (corner, ids) in enumerate(picks.items()):
        plotting.scatter(axes[0], p.mean_pd_train[ids], p.mean_pd_val[ids], "Corners", "mean PD (train)",
                         "mean PD (val)", color=plotting.PALETTE[s], label=corner, size=6)
    plotting.lines(axes[1], layer_series, "k-NN accuracy (ground truth)", "probe layer", "accuracy")
    plotting.save(fig, svg_path)
    return AnalysisResult("corners", csv_path, svg_path, summary)


# -- margins ---------------------------------------------------------------

def margins(run, out_dir=None, models=None):
    csv_path, svg_path = _outputs(run, "margins", out_dir)
    ds = run.dataset
    members = run.members if models is None else run.members[:models]
    rows = []
    n = ds.n
    out_sum, in_sum, cnt = np.zeros(n), np.zeros(n), np.zeros(n)
    in_ok = np.zeros(n)
    for m in members:
        names, _, _ = run.member(m)
        ids = np.flatnonzero(names == "val")
        out, gamma, pred, pair = input_margins(run.model(m), ds.examples[ids])
        for i, o, g, pr, pa in zip(ids, out, gamma, pred, pair):
            rows.append([m, i, o, g, pr, pa])
        out_sum[ids] += out
        cnt[ids] += 1
        fin = np.isfinite(gamma)
        in_sum[ids[fin]] += gamma[fin]
        in_ok[ids[fin]] += 1
    _write(csv_path, ["model", "id", "output_margin", "input_margin", "pred", "min_pair_class"], rows)
    with np.errstate(invalid="ignore", divide="ignore"):
        mean_out = np.where(cnt > 0, out_sum / np.maximum(cnt, 1), np.nan)
        mean_in = np.where(in_ok > 0, in_sum / np.maximum(in_ok, 1), np.nan)
    pd = run.profile.mean_pd_val
    summary = {}
    fig, axes = plotting.figure(2)
    for ax, name, vals in ((axes[0], "output_margin", mean_out), (axes[1], "input_margin", mean_in)):
        keep = np.isfinite(pd) & np.isfinite(vals)
        try:
            r, excluded = pearson_log(pd[keep], vals[keep])
        except ValueError:
            r, excluded = np.nan, int(keep.sum())
        summary[name] = {"pearson_log": r, "excluded": excluded, "n": int(keep.sum())}
        pos = keep & (vals > 0)
        plotting.scatter(ax, pd[pos], vals[pos], f"{name} (r={r:.2f})", "mean PD (val)", name, logy=True)
    plotting.save(fig, svg_path)
    return AnalysisResult("margins", csv_path, svg_path, summary)


# -- curves ----------------------------------------------------------------

def curves(run, out_dir=None):
    csv_path, svg_path = _outputs(run, "curves", out_dir)
    ds = run.dataset
    train_curves, infer = [], []
    steps = None
    for m in run.members:
        _, rows = store.read_csv(run.need(f"logs/{m}.csv"))
        arr = np.array([[_num(v) for v in r] for r in rows])
        steps = arr[:, 0].astype(np.int64)
        train_curves.append(arr[:, 2:])
        split = run.split(m)
        _, lp, _ = run.member(m)
        infer.append(inference_learning_curve(lp, noise_partitions(ds, split)))
    parts = list(CURVES[1:])
    mean_train = np.nanmean(np.stack(train_curves), axis=0) if train_curves else np.zeros((0, len(parts)))
    rows = []
    for r, s in enumerate(steps if steps is not None else []):
        rows += [["training", int(s), name, mean_train[r, c]] for c, name in enumerate(parts)]
    mean_infer = {}
    for name in parts:
        stacked = np.stack([t[name] for t in infer])
        mean_infer[name] = np.nanmean(stacked, axis=0) if np.isfinite(stacked).any() else stacked[0]
        rows += [["inference", l, name, mean_infer[name][l]] for l in range(run.L + 1)]
    _write(csv_path, ["kind", "position", "partition", "accuracy"], rows)
    fig, axes = plotting.figure(2)
    plotting.lines(axes[0], {n: (steps, mean_train[:, c]) for c, n in enumerate(parts)},
                   "Training learning curve", "step", "accuracy")
    plotting.lines(axes[1], {n: (np.arange(run.L + 1), mean_infer[n]) for n in parts},
                   "Inference learning curve", "probe layer", "k-NN accuracy")
    plotting.save(fig, svg_path)
    summary = {"inference": {n: v.tolist() for n, v in mean_infer.items()},
               "final_training": {n: float(mean_train[-1, c]) for c, n in enumerate(parts)}}
    return AnalysisResult("curves", csv_path, svg_path, summary)


# -- ksweep ----------------------------------------------------------------

def ksweep(run, out_dir=None, ks=(10, 30), models=None, train_self_mode="exclude"):
    """Per-layer probe accuracy for several k, from one shared neighbor search.

    Training rows are scored with ``train_self_mode`` (default exclude): when a
    row counts itself, its own label carries weight 1/k and the accuracy moves
    with k for that reason alone.
    """
    csv_path, svg_path = _outputs(run, "ksweep", out_dir)
    ks = tuple(sorted(set(int(k) for k in ks)))
    ds = run.dataset
    members = run.members if models is None else run.members[:models]
    acc = {(k, s): [] for k in ks for s in ("train", "val")}
    for m in members:
        split = run.split(m)
        layers = layer_neighbors(run.trace(m), ds.labels, split, max(ks), train_self_mode, ds.num_classes)
        for k in ks:
            preds = np.stack([vote(probe, nb[:, :k])[0] for probe, nb in layers])
            for s, idx in (("train", split.train_indices), ("val", split.val_indices)):
                if len(idx):
                    acc[(k, s)].append((preds[:, idx] == ds.labels[idx][None, :]).mean(axis=1))
    rows, mean = [], {}
    for (k, s), vals in acc.items():
        mean[(k, s)] = np.mean(vals, axis=0) if vals else np.full(run.L + 1, np.nan)
        rows += [[k, l, s, mean[(k, s)][l]] for l in range(run.L + 1)]
    _write(csv_path, ["k", "layer", "split", "accuracy"], rows)
    ref = ks[-1]
    deltas = {f"{k}_{s}": np.abs(mean[(k, s)] - mean[(ref, s)]).tolist() for k in ks[:-1] for s in ("train", "val")}
    max_delta = max((max(v) for v in deltas.values()), default=0.0)
    fig, axes = plotting.figure(2)
    for ax, s in zip(axes, ("train", "val")):
        plotting.lines(ax, {f"k={k}": (np.arange(run.L + 1), mean[(k, s)]) for k in ks},
                       f"k-NN probe accuracy ({s})", "probe layer", "accuracy")
    plotting.save(fig, svg_path)
    return AnalysisResult("ksweep", csv_path, svg_path, {"deltas": deltas, "max_delta": max_delta, "ks": list(ks),
                                                               "train_self_mode": train_self_mode})


def analyze(root, name, out_dir=None, **opts):
    if name not in ANALYSES:
        raise ValueError(f"analysis must be one of {ANALYSES}")
    run = Run(root)
    return globals()[name](run, out_dir, **opts)
