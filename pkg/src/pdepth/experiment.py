"""Ensemble runs: train members on random splits, probe them, persist everything."""

import dataclasses
import json
import logging
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from threadpoolctl import threadpool_limits

from . import config as cfgmod
from . import store
from .data import concatenate, concentric_rings, gaussian_blobs, inject_label_noise, csv_text, load_idx, make_split
from .depth import PERCENTILE_METHOD, percentile, suffix_agreement_batch
from .ensemble import ENTROPY_BASE, TIEBREAK_RULE, EnsembleTable, difficulty_profiles
from .knn import build_probe, neighbors, vote
from .mlp import CURVES, TrainConfig, TrainingDiverged, init_model, train
from .rng import SEED_SCHEME, derive_seed

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class EnsembleConfig:
    seed: int = 0
    dataset: str = "mixture"  # blobs | rings | mixture | idx
    num_classes: int = 10
    per_class: int = 500
    dim: int = 16
    center_scale: float = 3.0
    sigma: float = 1.0
    ring_per_class: int = 50
    ring_gap: float = 0.5
    ring_sigma: float = 0.1
    idx_images: str = ""
    idx_labels: str = ""
    noise_fraction: float = 0.2
    ensemble_size: int = 25
    val_fraction: float = 0.1
    hidden_layers: int = 4
    width: int = 128
    loss: str = "cross_entropy"
    optimizer: str = "sgd"
    learning_rate: float = 0.02
    momentum: float = 0.9
    batch_size: int = 256
    schedule: tuple = (1500,)
    total_steps: int = 2000
    log_every: int = 10
    k: int = 30
    self_mode: str = "include"
    override_layer: int = 0  # 0 selects ceil(L / 2)
    tau_scope: str = "union"  # union | train | val
    jobs: int = 1

    def __post_init__(self):
        if self.ensemble_size < 1:
            raise ValueError("ensemble_size must be positive")
        if self.tau_scope not in ("union", "train", "val"):
            raise ValueError("tau_scope must be union, train or val")
        if self.self_mode not in ("include", "exclude"):
            raise ValueError("self_mode must be include or exclude")
        if self.hidden_layers < 1 or self.width < 1:
            raise ValueError("need at least one hidden layer of positive width")
        self.train_config(0)

    @property
    def num_layers(self):
        """Index of the softmax probe (probe count minus one)."""
        return self.hidden_layers + 1

    @property
    def effective_override_layer(self):
        layer = self.override_layer or math.ceil(self.num_layers / 2)
        if not 0 < layer < self.num_layers:
            raise ValueError(f"override layer must be interior, in (0, {self.num_layers})")
        return layer

    def widths(self, dim, num_classes):
        return (dim,) + (self.width,) * self.hidden_layers + (num_classes,)

    def train_config(self, seed):
        return TrainConfig(self.loss, self.optimizer, self.learning_rate, self.momentum, self.batch_size,
                           self.schedule, self.total_steps, self.log_every, seed)

    def as_dict(self):
        d = dataclasses.asdict(self)
        d["schedule"] = list(self.schedule)
        return d


def build_dataset(cfg):
    seed = derive_seed(cfg.seed, "dataset")
    if cfg.dataset == "blobs":
        ds = gaussian_blobs(cfg.num_classes, cfg.per_class, cfg.dim, cfg.center_scale, cfg.sigma, seed)
    elif cfg.dataset == "rings":
        ds = concentric_rings(cfg.num_classes, cfg.ring_per_class, cfg.ring_gap, cfg.ring_sigma, seed)
    elif cfg.dataset == "mixture":
        ds = concatenate(
            gaussian_blobs(cfg.num_classes, cfg.per_class, cfg.dim, cfg.center_scale, cfg.sigma, seed),
            concentric_rings(cfg.num_classes, cfg.ring_per_class, cfg.ring_gap, cfg.ring_sigma, seed))
    elif cfg.dataset == "idx":
        ds = load_idx(cfg.idx_images, cfg.idx_labels, cfg.num_classes)
    else:
        raise ValueError(f"unknown dataset kind {cfg.dataset!r}")
    if cfg.noise_fraction > 0:
        ds = inject_label_noise(ds, cfg.noise_fraction, derive_seed(cfg.seed, "noise"))
    return ds


# -- one ensemble member ---------------------------------------------------

@dataclass
class MemberResult:
    index: int
    split: object
    model: object
    log: object
    trace: object
    layer_preds: np.ndarray  # [L+1, n]
    depth: np.ndarray  # -1 undefined
    tau: np.ndarray
    tau_rescaled: np.ndarray


def layer_neighbors(trace, labels, split, k, self_mode, num_classes):
    """Sorted k-NN index rows per probe layer for every example (train refs only)."""
    tr = np.asarray(split.train_indices)
    n = trace[0].shape[0]
    exclude = None
    if self_mode == "exclude":
        exclude = np.full(n, -1, dtype=np.int64)
        exclude[tr] = np.arange(len(tr))
    out = []
    for layer in range(len(trace)):
        probe = build_probe(trace[layer][tr], labels[tr], k, layer, num_classes)
        out.append((probe, neighbors(probe, trace[layer], exclude)))
    return out


def probe_predictions(trace, labels, split, k, self_mode, num_classes):
    """[L+1, n] k-NN probe classes per layer."""
    return np.stack([vote(p, nb)[0] for p, nb in layer_neighbors(trace, labels, split, k, self_mode, num_classes)])


def rescale_scope(tau, split, scope):
    if scope == "train":
        basis = tau[split.train_indices]
    elif scope == "val" and len(split.val_indices):
        basis = tau[split.val_indices]
    else:
        basis = tau
    p95 = percentile(basis, 95)
    return np.zeros(len(tau)) if p95 == 0 else tau / p95


def member_metrics(cfg, dataset, split, log_, trace):
    layer_preds = probe_predictions(trace, dataset.labels, split, cfg.k, cfg.self_mode, dataset.num_classes)
    final = log_.final_predictions
    depth = suffix_agreement_batch(layer_preds, final)
    tau = log_.steps[suffix_agreement_batch(log_.predictions, final)].astype(np.float64)
    return layer_preds, depth, tau, rescale_scope(tau, split, cfg.tau_scope)


def run_member(cfg, dataset, index):
    split = make_split(dataset.n, cfg.val_fraction, derive_seed(cfg.seed, "member-split", index))
    model = init_model(cfg.widths(dataset.dim, dataset.num_classes), derive_seed(cfg.seed, "member-init", index))
    model, log_, trace = train(model, dataset, split, cfg.train_config(derive_seed(cfg.seed, "member-train", index)))
    layer_preds, depth, tau, tau_r = member_metrics(cfg, dataset, split, log_, trace)
    return MemberResult(index, split, model, log_, trace, layer_preds, depth, tau, tau_r)


# -- member serialization --------------------------------------------------

def _split_names(split, n):
    names = np.array(["train"] * n, dtype=object)
    names[split.val_indices] = "val"
    return names


def member_files(res, num_layers):
    n = res.layer_preds.shape[1]
    i = res.index
    files = {
        f"models/{i}.pdmlp": store.encode_model(res.model),
        f"embeddings/{i}.pdemb": store.encode_trace(res.trace),
        f"logs/{i}.csv": store.csv_bytes(
            ["step"] + list(CURVES),
            [[s] + [res.log.curves[c][r] for c in CURVES] for r, s in enumerate(res.log.steps)]),
        f"logs/{i}_checkpoints.csv": store.int_matrix_csv_bytes(
            ["step"] + [f"e{j}" for j in range(n)], res.log.steps, res.log.predictions),
    }
    files.update(metric_files(res, num_layers))
    return files


def metric_files(res, num_layers):
    """Per-member probe and depth CSVs; everything here is derivable from stored artifacts."""
    n = res.layer_preds.shape[1]
    i = res.index
    split = _split_names(res.split, n).tolist()
    cols = np.concatenate([res.layer_preds, res.log.final_predictions[None, :]]).T.tolist()
    probes = [f"{j},{split[j]}," + ",".join(map(str, cols[j])) for j in range(n)]
    header = ",".join(["id", "split"] + [f"p{l}" for l in range(num_layers + 1)] + ["final"])
    return {
        f"metrics/probes_{i}.csv": ("\n".join([header] + probes) + "\n").encode(),
        f"metrics/depth_{i}.csv": store.csv_bytes(
            ["id", "split", "depth", "depth_defined", "tau", "tau_rescaled"],
            [[j, split[j], res.depth[j] if res.depth[j] >= 0 else "", res.depth[j] >= 0,
              int(res.tau[j]), res.tau_rescaled[j]] for j in range(n)]),
    }


def read_member_records(files, index):
    """(split names, final preds, depth, tau_rescaled) from a member's metric CSVs."""
    _, rows = store.read_csv(files[f"metrics/probes_{index}.csv"])
    split = np.array([r[1] for r in rows])
    final = np.array([int(r[-1]) for r in rows])
    layer = np.array([[int(v) for v in r[2:-1]] for r in rows]).T
    _, drows = store.read_csv(files[f"metrics/depth_{index}.csv"])
    depth = np.array([int(r[2]) if r[3] == "1" else -1 for r in drows])
    tau_r = np.array([float(r[5]) for r in drows])
    return split, final, layer, depth, tau_r


def _member_job(args):
    cfg, dataset, index = args
    with threadpool_limits(1):
        try:
            res = run_member(cfg, dataset, index)
        except TrainingDiverged as exc:
            return index, None, str(exc), 0
        undefined = int((res.depth < 0).sum())
        return index, member_files(res, cfg.num_layers), None, undefined


# -- ensemble --------------------------------------------------------------

def _config_digest(cfg):
    d = cfg.as_dict()
    d.pop("jobs")
    return store.sha256_bytes(store.canonical_json(d))


def _member_record_ok(root, index, digest):
    path = Path(root) / "members" / f"{index}.json"
    if not path.exists():
        return None
    rec = json.loads(path.read_bytes())
    if rec.get("config_digest") != digest:
        return None
    if rec.get("diverged"):
        return rec
    report = store.check_digests(root, rec["files"])
    return rec if report.ok else None


def table_files(table, profile):
    ens_rows = []
    for m in range(table.num_models):
        for j in range(table.num_examples):
            d = table.depth[m, j]
            ens_rows.append([m, j, table.in_val[m, j], table.preds[m, j], d if d >= 0 else "", d >= 0,
                             table.tau_rescaled[m, j]])
    prof_rows = [[j, profile.truth[j], profile.consensus[j] if profile.consensus[j] >= 0 else "",
                  profile.c_hat[j], profile.c_star[j], profile.entropy[j], profile.mean_pd_val[j],
                  profile.mean_pd_train[j], profile.mean_tau[j], profile.corner[j]] for j in range(len(profile))]
    return {
        "metrics/ensemble_table.csv": store.csv_bytes(
            ["model", "id", "in_val", "pred", "depth", "depth_defined", "tau_rescaled"], ens_rows),
        "metrics/profile.csv": store.csv_bytes(
            ["id", "truth", "consensus", "c_hat", "c_star", "entropy", "mean_pd_val", "mean_pd_train",
             "mean_tau", "corner"], prof_rows),
    }


def assemble_table(files, members, truth):
    recs = [read_member_records(files, m) for m in members]
    in_val = np.stack([r[0] == "val" for r in recs])
    preds = np.stack([r[1] for r in recs])
    depth = np.stack([r[3] for r in recs])
    tau_r = np.stack([r[4] for r in recs])
    return EnsembleTable(np.asarray(truth), in_val, preds, depth, tau_r)


class _DirFiles:
    def __init__(self, root):
        self.root = Path(root)

    def __getitem__(self, rel):
        return (self.root / rel).read_bytes()


def run_ensemble(cfg, out):
    """Train (or resume) every member and write the run directory; returns the manifest."""
    root = Path(out)
    root.mkdir(parents=True, exist_ok=True)
    dataset = build_dataset(cfg)
    digest = _config_digest(cfg)
    store.write_artifact(root, "dataset.csv", _dataset_csv(dataset))

    records = {}
    todo = []
    for i in range(cfg.ensemble_size):
        rec = _member_record_ok(root, i, digest)
        if rec is None:
            todo.append(i)
        else:
            records[i] = rec
    if todo:
        log.info("training %d of %d members", len(todo), cfg.ensemble_size)
    jobs = [(cfg, dataset, i) for i in todo]
    if cfg.jobs > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(cfg.jobs) as pool:
            results = pool.map(_member_job, jobs)
            for r in results:
                records[r[0]] = _store_member(root, digest, *r)
    else:
        for job in jobs:
            records[job[2]] = _store_member(root, digest, *_member_job(job))

    ok_members = [i for i in range(cfg.ensemble_size) if not records[i].get("diverged")]
    files = _DirFiles(root)
    inventory = ["dataset.csv"]
    for i in ok_members:
        inventory.extend(records[i]["files"])
    if ok_members:
        table = assemble_table(files, ok_members, dataset.labels)
        profile = difficulty_profiles(table, cfg.num_layers, dataset.num_classes)
        for rel, data in table_files(table, profile).items():
            store.write_artifact(root, rel, data)
            inventory.append(rel)
    manifest = ensemble_manifest(cfg, dataset, records, ok_members)
    return store.finalize_manifest(root, manifest, inventory)


def _store_member(root, digest, index, files, error, undefined):
    rec = dict(index=index, config_digest=digest, diverged=error is not None, error=error or "",
               undefined_depths=undefined, files={})
    if files:
        rec["files"] = {rel: store.write_artifact(root, rel, data) for rel, data in files.items()}
    store.write_artifact(root, f"members/{index}.json", store.canonical_json(rec))
    return rec


def _dataset_csv(dataset):
    return csv_text(dataset).encode()


def policy_record(cfg):
    return dict(entropy_log_base=ENTROPY_BASE, percentile_method=PERCENTILE_METHOD, tau_percentile=95,
                tau_scope=cfg.tau_scope, consensus_tiebreak=TIEBREAK_RULE,
                prediction_tiebreak="argmax, lowest class index",
                knn_tiebreak="distance ties to lower reference index, vote ties to lowest class",
                override_layer=cfg.effective_override_layer,
                pd_normalization="divide by L (softmax probe index)",
                undefined_depth="excluded from aggregates",
                statistics_occurrences="validation occurrences for c_hat, consensus, c_star, entropy, mean_tau")


def ensemble_manifest(cfg, dataset, records, ok_members):
    return dict(
        kind="ensemble",
        base_seed=cfg.seed,
        seed_scheme=SEED_SCHEME,
        config=cfg.as_dict() | {"jobs": None},
        dataset=dict(descriptor=dataset.descriptor, digest=dataset.digest(), n=dataset.n, dim=dataset.dim,
                     num_classes=dataset.num_classes, noisy=int(dataset.noise_mask.sum())),
        ensemble_size=cfg.ensemble_size,
        split_fraction=cfg.val_fraction,
        architecture=dict(widths=list(cfg.widths(dataset.dim, dataset.num_classes)), activation="relu",
                          init="uniform(-sqrt(6/fan_in), sqrt(6/fan_in)), zero bias", dtype="float32"),
        train_config=cfg.train_config(0).as_dict() | {"seed": "derived per member"},
        probe=dict(k=cfg.k, metric="squared_euclidean", self_mode=cfg.self_mode,
                   placement="input, hidden pre-activations, softmax"),
        num_layers=cfg.num_layers,
        members=[dict(index=i, diverged=records[i]["diverged"], error=records[i]["error"],
                      undefined_depths=records[i]["undefined_depths"]) for i in range(cfg.ensemble_size)],
        completed_members=ok_members,
        undefined_depths=int(sum(records[i]["undefined_depths"] for i in ok_members)),
        diverged_members=[i for i in range(cfg.ensemble_size) if records[i]["diverged"]],
        policy=policy_record(cfg),
    )


def config_from_manifest(manifest):
    d = dict(manifest["config"])
    d["jobs"] = 1
    d["schedule"] = tuple(d["schedule"])
    return EnsembleConfig(**d)


def rederive_member(root, manifest, member=None):
    """Recompute one member from its stored model and embeddings; compare bytes."""
    with threadpool_limits(1):
        return _rederive(root, manifest, member)


def _rederive(root, manifest, member):
    cfg = config_from_manifest(manifest)
    members = manifest["completed_members"]
    if not members:
        return None, []
    if member is None:
        rng = np.random.default_rng(derive_seed(cfg.seed, "verify"))
        member = int(members[rng.integers(len(members))])
    dataset = build_dataset(cfg)
    problems = []
    if dataset.digest() != manifest["dataset"]["digest"]:
        problems.append("dataset digest differs from regenerated dataset")
        return member, problems
    files = store.RunFiles(root, manifest["files"])
    model = store.decode_model(files[f"models/{member}.pdmlp"])
    trace = store.decode_trace(files[f"embeddings/{member}.pdemb"])
    from .mlp import forward_with_embeddings

    _, probes = forward_with_embeddings(model, dataset.examples)
    for l, (a, b) in enumerate(zip(probes, trace.probes)):
        if not np.array_equal(np.asarray(a, dtype=np.float32), b):
            problems.append(f"embeddings/{member}.pdemb probe {l} differs from recomputed forward pass")
    split = make_split(dataset.n, cfg.val_fraction, derive_seed(cfg.seed, "member-split", member))
    steps, preds = _read_checkpoints(files[f"logs/{member}_checkpoints.csv"])
    from .mlp import TrainingLog

    res_log = TrainingLog(steps, preds)
    layer_preds, depth, tau, tau_r = member_metrics(cfg, dataset, split, res_log, trace)
    res = MemberResult(member, split, model, res_log, trace, layer_preds, depth, tau, tau_r)
    regenerated = metric_files(res, cfg.num_layers)
    for rel in (f"metrics/probes_{member}.csv", f"metrics/depth_{member}.csv"):
        if regenerated[rel] != files[rel]:
            problems.append(f"{rel} differs from re-derived values")
    table = assemble_table(files, members, dataset.labels)
    profile = difficulty_profiles(table, cfg.num_layers, dataset.num_classes)
    for rel, data in table_files(table, profile).items():
        if data != files[rel]:
            problems.append(f"{rel} differs from re-derived values")
    return member, problems


def _read_checkpoints(buf):
    _, rows = store.read_csv(buf)
    steps = np.array([int(r[0]) for r in rows], dtype=np.int64)
    preds = np.array([[int(v) for v in r[1:]] for r in rows], dtype=np.int64)
    return steps, preds


def load_config(path=None, **overrides):
    return cfgmod.load(EnsembleConfig, path, overrides)
