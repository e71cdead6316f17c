"""Command line entry point: ``pdepth {ensemble,analyze,intervention,verify}``."""

import argparse
import json
import sys

import numpy as np

from . import analysis, config, store
from .experiment import EnsembleConfig, run_ensemble
from .intervention import InterventionConfig, run_intervention


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.generic):
        return obj.item()
    if isinstance(obj, float) and not np.isfinite(obj):
        return str(obj)
    return obj


def _print_json(obj):
    print(json.dumps(_jsonable(obj), indent=2, sort_keys=True))


def _raw_settings(pairs):
    raw = {}
    for pair in pairs or ():
        if "=" not in pair:
            raise ValueError(f"--set expects KEY=VALUE, got {pair!r}")
        key, value = pair.split("=", 1)
        raw[key.strip()] = value.strip()
    return raw


def _load(cls, args, flags):
    raw = config.parse_text(open(args.config).read()) if args.config else {}
    raw.update(_raw_settings(args.set))
    return config.build(cls, raw, {k: getattr(args, k, None) for k in flags})


def cmd_ensemble(args):
    cfg = _load(EnsembleConfig, args, ("seed", "k", "self_mode", "override_layer", "jobs"))
    manifest = run_ensemble(cfg, args.out)
    diverged = manifest["diverged_members"]
    print(f"run: {args.out}")
    print(f"members completed: {len(manifest['completed_members'])}/{cfg.ensemble_size}")
    print(f"undefined depths: {manifest['undefined_depths']}")
    if diverged:
        print(f"diverged members: {diverged}", file=sys.stderr)
        return 1
    return 0


def cmd_analyze(args):
    report = store.verify_run(args.run, rederive=False)
    if not report.ok:
        for line in report.lines():
            print(line, file=sys.stderr)
        return 1
    names = analysis.ANALYSES if args.analysis == "all" else (args.analysis,)
    status = 0
    for name in names:
        opts = {}
        if name == "corners":
            opts = {"count": args.count, "layer": args.override_layer}
        elif name == "ksweep":
            opts = {"ks": tuple(int(k) for k in args.ks.split(","))}
        try:
            res = analysis.analyze(args.run, name, args.out_dir, **opts)
        except analysis.MissingPrerequisite as exc:
            print(f"{name}: missing prerequisite: {exc}", file=sys.stderr)
            status = 1
            continue
        print(f"{name}: {res.csv_path} {res.svg_path}")
        if args.verbose:
            _print_json(res.summary)
    return status


def cmd_intervention(args):
    cfg = _load(InterventionConfig, args, ("seed", "k", "self_mode"))
    summary, errors = run_intervention(cfg, args.out)
    _print_json({k: v for k, v in summary.items() if k != "untrained"})
    for cell, msg in errors.items():
        print(f"diverged: {cell}: {msg}", file=sys.stderr)
    return 1 if errors else 0


def cmd_verify(args):
    report = store.verify_run(args.run, rederive=not args.no_rederive, member=args.member)
    for line in report.lines():
        print(line)
    print("ok" if report.ok else "FAILED")
    return 0 if report.ok else 1


def build_parser():
    p = argparse.ArgumentParser(prog="pdepth", description="Prediction-depth experiments on small MLPs.")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, with_override=True):
        sp.add_argument("config", nargs="?", help="key = value config file")
        sp.add_argument("--out", required=True, help="run directory")
        sp.add_argument("--seed", type=int)
        sp.add_argument("--k", type=int)
        sp.add_argument("--self-mode", dest="self_mode", choices=("include", "exclude"))
        sp.add_argument("--set", action="append", metavar="KEY=VALUE", help="override any config key")
        if with_override:
            sp.add_argument("--override-layer", dest="override_layer", type=int)

    e = sub.add_parser("ensemble", help="train an ensemble and record per-member metrics")
    common(e)
    e.add_argument("--jobs", type=int)
    e.set_defaults(func=cmd_ensemble)

    a = sub.add_parser("analyze", help="write one analysis CSV and SVG")
    a.add_argument("run")
    a.add_argument("analysis", choices=analysis.ANALYSES + ("all",))
    a.add_argument("--out-dir", dest="out_dir")
    a.add_argument("--override-layer", dest="override_layer", type=int)
    a.add_argument("--count", type=int, default=50)
    a.add_argument("--ks", default="10,30")
    a.add_argument("-v", "--verbose", action="store_true")
    a.set_defaults(func=cmd_analyze)

    i = sub.add_parser("intervention", help="loss x optimizer margin comparison")
    common(i, with_override=False)
    i.set_defaults(func=cmd_intervention)

    v = sub.add_parser("verify", help="check digests and re-derive one member")
    v.add_argument("run")
    v.add_argument("--member", type=int)
    v.add_argument("--no-rederive", action="store_true")
    v.set_defaults(func=cmd_verify)
    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (ValueError, OSError, store.RunStoreError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
