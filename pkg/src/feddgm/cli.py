"""Command-line front door.

Subcommands: partition, pretrain-gen, run, sweep, theory, dump-synth,
summarize, report. Exit codes: 0 success, 1 configuration error, 2 runtime
failure (diagnostics on stderr).
"""

from __future__ import annotations

import argparse
import itertools
import json
import sys
import time
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np

from . import config as cfgmod
from . import datasets as dst
from . import federation as fed
from . import generator as gn
from . import theory as th
from .config import ConfigError


def _parse_seeds(text: str) -> list[int]:
    try:
        return [int(s) for s in text.replace(";", ",").split(",") if s.strip()]
    except ValueError:
        raise ConfigError(f"bad seed list {text!r}", "seeds")


def _parse_axis(text: str):
    if "=" not in text:
        raise ConfigError(f"axis must look like name=v1,v2,... got {text!r}", "sweep")
    name, _, vals = text.partition("=")
    name = name.strip().replace("-", "_")
    if name not in cfgmod.SWEEP_AXES:
        raise ConfigError(f"unknown sweep axis {name!r} "
                          f"(choices: {', '.join(cfgmod.SWEEP_AXES)})", "sweep")
    parse = float if name == "alpha" else int
    try:
        return name, [parse(v) for v in vals.split(",") if v.strip()]
    except ValueError:
        raise ConfigError(f"bad values for axis {name!r}: {vals!r}", "sweep")


def _overrides_from(args) -> dict:
    out: dict = {}
    direct = ("method", "alpha", "clients", "rounds", "precision", "workers")
    for key in direct:
        val = getattr(args, key, None)
        if val is not None:
            out[key] = val
    if getattr(args, "seeds", None) is not None:
        out["seeds"] = _parse_seeds(args.seeds)
    if getattr(args, "seed", None) is not None:
        out["seeds"] = [args.seed]
    if getattr(args, "out", None) is not None:
        out["output_dir"] = args.out
    if getattr(args, "dump_synth", False):
        out["dump_synth"] = True
    distill = {}
    for key in ("ipc", "layer", "local_epochs", "distill_iters", "student_steps"):
        val = getattr(args, key, None)
        if val is not None:
            distill[key] = val
    if distill:
        out["distill"] = distill
    return out


def _load(args) -> dict:
    return cfgmod.load_config(getattr(args, "config", None), _overrides_from(args))


def _prepare_data(cfg: dict):
    ds_cfg = cfg["dataset"]
    if "name" in ds_cfg:
        ds = dst.load_dataset(ds_cfg["name"], **ds_cfg.get("params", {}))
    else:
        ds = dst.load_dataset(ds_cfg["path"], **ds_cfg.get("params", {}))
    proxy, rest = dst.public_proxy_split(ds, cfg["proxy_fraction"], cfg["data_seed"])
    test, train = dst.public_proxy_split(rest, cfg["test_fraction"],
                                         cfg["data_seed"] + 1)
    return proxy, train, test


def _run_one_seed(cfg: dict, seed: int, proxy, train, test, dump_root):
    shards = dst.dirichlet_partition(train, cfg["clients"], cfg["alpha"], seed)
    fedcfg = cfgmod.build_fed_config(cfg, seed, train.image_shape, train.classes)
    gen = None
    if cfg["method"] == "feddgm":
        gen = gn.pretrain_decoder(proxy, cfgmod.build_generator_config(cfg, seed))
    audit = fed.TransportAudit()
    dump_dir = None
    if cfg["dump_synth"]:
        dump_dir = Path(dump_root) / f"synth_seed_{seed}"
    series = fed.run_method(fedcfg, train, shards, test, gen, audit, dump_dir)
    return series, audit


def cmd_partition(args) -> int:
    cfg = _load(args)
    out = cfgmod.resolve_output_dir(cfg)
    out.mkdir(parents=True, exist_ok=True)
    _, train, _ = _prepare_data(cfg)
    seed = cfg["seeds"][0]
    shards = dst.dirichlet_partition(train, cfg["clients"], cfg["alpha"], seed)
    dst.save_partition(out / "partition.csv", shards)
    cfgmod.write_manifest(out / "manifest.json", cfg, sys.argv[1:])
    for s in shards:
        print(f"client {s.client_id}: {len(s)} samples, histogram {list(s.histogram)}")
    print(f"wrote {out / 'partition.csv'}")
    return 0


def cmd_pretrain_gen(args) -> int:
    cfg = _load(args)
    out = cfgmod.resolve_output_dir(cfg)
    out.mkdir(parents=True, exist_ok=True)
    proxy, _, _ = _prepare_data(cfg)
    seed = cfg["seeds"][0]
    gen = gn.pretrain_decoder(proxy, cfgmod.build_generator_config(cfg, seed))
    gn.save_generator(out / "generator.fdgm", gen)
    cfgmod.write_manifest(out / "manifest.json", cfg, sys.argv[1:],
                          {"generator_meta": gen.meta})
    print(f"pretrained generator: recon MSE {gen.meta['final_mse']:.4g} "
          f"after {gen.meta['epochs']} epochs -> {out / 'generator.fdgm'}")
    return 0


def _execute_run(cfg: dict, out: Path, argv) -> Path:
    out.mkdir(parents=True, exist_ok=True)
    proxy, train, test = _prepare_data(cfg)
    all_series = []
    audit_all = fed.TransportAudit()
    tic = time.perf_counter()
    for seed in cfg["seeds"]:
        series, audit = _run_one_seed(cfg, seed, proxy, train, test, out)
        all_series.extend(series)
        audit_all.records.extend(audit.records)
        final = series[-1]
        print(f"method={cfg['method']} alpha={cfg['alpha']:g} seed={seed}: "
              f"final global acc {final.global_acc:.3f}")
    fed.write_metrics_csv(out / "metrics.csv", all_series)
    if any(rm.traces for rm in all_series):
        fed.write_traces_csv(out / "traces.csv", all_series)
    audit_all.write_csv(out / "audit.csv")
    cfgmod.write_manifest(out / "manifest.json", cfg, argv,
                          {"wall_s_total": time.perf_counter() - tic})
    print(f"wrote {out / 'metrics.csv'}")
    return out / "metrics.csv"


def cmd_run(args) -> int:
    cfg = _load(args)
    _execute_run(cfg, cfgmod.resolve_output_dir(cfg), sys.argv[1:])
    return 0


_AXIS_TARGETS = {
    "alpha": ("alpha",),
    "ipc": ("distill", "ipc"),
    "layer": ("distill", "layer"),
    "local_epochs": ("distill", "local_epochs"),
    "surrogate_depth": ("surrogate", "depth"),
}


def _cell_config(cfg: dict, assignment: dict) -> dict:
    cell = json.loads(json.dumps(cfg))  # deep copy via round-trip
    for axis, value in assignment.items():
        target = _AXIS_TARGETS[axis]
        ref = cell
        for key in target[:-1]:
            ref = ref[key]
        ref[target[-1]] = value
    return cell


def _run_cell(payload):
    cfg, cell_dir, argv = payload
    _execute_run(cfg, Path(cell_dir), argv)
    return cell_dir


def cmd_sweep(args) -> int:
    cfg = _load(args)
    axes = dict(cfg.get("sweep") or {})
    for text in args.axis or []:
        name, values = _parse_axis(text)
        axes[name] = values
    axes = {k: v for k, v in axes.items() if v}
    if not axes:
        raise ConfigError("sweep needs at least one axis "
                          "(--axis name=v1,v2 or config sweep block)", "sweep")
    out = cfgmod.resolve_output_dir(cfg)
    out.mkdir(parents=True, exist_ok=True)
    names = sorted(axes)
    cells = list(itertools.product(*(axes[n] for n in names)))
    payloads = []
    for combo in cells:
        assignment = dict(zip(names, combo))
        tag = ",".join(f"{n}={assignment[n]:g}" if isinstance(assignment[n], float)
                       else f"{n}={assignment[n]}" for n in names)
        cell_dir = out / "cells" / tag
        payloads.append((_cell_config(cfg, assignment), str(cell_dir),
                         sys.argv[1:]))
    if cfg["workers"] > 1:
        with ProcessPoolExecutor(max_workers=cfg["workers"]) as pool:
            list(pool.map(_run_cell, payloads))
    else:
        for p in payloads:
            _run_cell(p)
    combined = out / "sweep.csv"
    with open(combined, "w", newline="") as f:
        import csv as _csv
        w = _csv.writer(f)
        w.writerow(list(names) + list(fed.METRICS_COLUMNS))
        for combo, payload in zip(cells, payloads):
            rows = fed.read_metrics_csv(Path(payload[1]) / "metrics.csv")
            for row in rows:
                w.writerow([f"{v:g}" if isinstance(v, float) else str(v)
                            for v in combo] + [row[c] for c in fed.METRICS_COLUMNS])
    cfgmod.write_manifest(out / "manifest.json", cfg, sys.argv[1:],
                          {"axes": axes})
    print(f"swept {len(cells)} cells -> {combined}")
    return 0


def cmd_theory(args) -> int:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    if args.family == "quadratic":
        problem = th.make_quadratic(d=args.d, agents=args.agents, seed=args.problem_seed)
    else:
        problem = th.make_overparam_linreg(d=args.d, n=args.n,
                                           agents=args.agents,
                                           seed=args.problem_seed)
    seeds = _parse_seeds(args.seeds)
    reports = []
    for seed in seeds:
        chain = th.gibbs_alternate(problem, args.beta_d, args.beta_star,
                                   args.steps, seed)
        th.write_chain_csv(out / f"chain_seed_{seed}.csv", chain)
        rep = th.chain_report(chain, problem, eps=args.eps)
        rep["seed"] = seed
        reports.append(rep)
        print(f"seed {seed}: accept=({rep['accept_theta']:.2f},"
              f"{rep['accept_synth']:.2f}) support={rep['support_condition']}")
    summary = {
        "family": args.family,
        "beta_d": args.beta_d,
        "beta_star": args.beta_star,
        "steps": args.steps,
        "support_fraction": float(np.mean([r["support_condition"] for r in reports])),
        "chains": reports,
    }
    (out / "report.json").write_text(json.dumps(summary, indent=2) + "\n")
    print(f"wrote {out / 'report.json'}")
    return 0


def cmd_dump_synth(args) -> int:
    gen = gn.load_generator(args.generator)
    layer = args.layer if args.layer is not None else gen.default_layer
    z = gn.init_latents(gen, layer, args.ipc, gen.classes, args.seed)
    images = gn.decode(gen, z)
    out = Path(args.out)
    gn.dump_synthetic(out, images, z.labels)
    print(f"decoded {images.shape[0]} images from layer {layer} -> {out}")
    return 0


def cmd_summarize(args) -> int:
    from .report import summarize, write_summary_csv
    table = summarize(args.csvs)
    if args.out:
        out = Path(args.out)
        out.parent.mkdir(parents=True, exist_ok=True)
        write_summary_csv(out, table)
        print(f"wrote {out}")
    for row in table:
        print(f"{row['method']:<10} alpha={row['alpha']:<8} arch={row['architecture']:<16} "
              f"final acc {row['mean_final_acc']:.4f} +/- {row['std_final_acc']:.4f} "
              f"({row['seeds']} seeds)")
    return 0


def cmd_report(args) -> int:
    from .report import render_report
    outputs = render_report(args.csvs, Path(args.out))
    for p in outputs:
        print(f"wrote {p}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="feddgm",
        description="Desk-scale federated learning with server-side "
                    "generative-latent dataset distillation")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, seeds=True):
        p.add_argument("--config", help="JSON config file (or a manifest.json)")
        p.add_argument("--out", help="output directory")
        p.add_argument("--alpha", type=float, help="Dirichlet concentration")
        p.add_argument("--clients", type=int)
        if seeds:
            p.add_argument("--seeds", help="comma-separated seed list")
            p.add_argument("--seed", type=int, help="single seed shorthand")

    p = sub.add_parser("partition", help="write a Dirichlet partition manifest")
    common(p)
    p.set_defaults(func=cmd_partition)

    p = sub.add_parser("pretrain-gen", help="pretrain the decoder on the proxy split")
    common(p)
    p.set_defaults(func=cmd_pretrain_gen)

    def run_flags(p):
        p.add_argument("--method", choices=fed.METHODS)
        p.add_argument("--rounds", type=int)
        p.add_argument("--ipc", type=int)
        p.add_argument("--layer", type=int)
        p.add_argument("--local-epochs", dest="local_epochs", type=int)
        p.add_argument("--distill-iters", dest="distill_iters", type=int)
        p.add_argument("--student-steps", dest="student_steps", type=int)
        p.add_argument("--precision", choices=("f32", "f64"))

    p = sub.add_parser("run", help="run one experiment (all seeds)")
    common(p)
    run_flags(p)
    p.add_argument("--dump-synth", dest="dump_synth", action="store_true")
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("sweep", help="grid over ablation axes")
    common(p)
    run_flags(p)
    p.add_argument("--axis", action="append",
                   help="axis=v1,v2,... (alpha, ipc, layer, local_epochs, "
                        "surrogate_depth); repeatable")
    p.add_argument("--workers", type=int, help="parallel sweep cells")
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("theory", help="alternating-sampler sandbox")
    p.add_argument("--family", choices=("quadratic", "linreg"), default="linreg")
    p.add_argument("--d", type=int, default=20)
    p.add_argument("--n", type=int, default=10)
    p.add_argument("--agents", type=int, default=1)
    p.add_argument("--beta-d", dest="beta_d", type=float, default=1e4)
    p.add_argument("--beta-star", dest="beta_star", type=float, default=1e5)
    p.add_argument("--steps", type=int, default=2000)
    p.add_argument("--eps", type=float, default=1e-3)
    p.add_argument("--seeds", default="0")
    p.add_argument("--problem-seed", dest="problem_seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_theory)

    p = sub.add_parser("dump-synth", help="decode fresh latents to a tensor dump")
    p.add_argument("--generator", required=True, help="generator checkpoint")
    p.add_argument("--layer", type=int)
    p.add_argument("--ipc", type=int, default=10)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_dump_synth)

    p = sub.add_parser("summarize", help="mean +/- std of final accuracy per cell")
    p.add_argument("csvs", nargs="+")
    p.add_argument("--out")
    p.set_defaults(func=cmd_summarize)

    p = sub.add_parser("report", help="summary table plus rendered figures")
    p.add_argument("csvs", nargs="+")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_report)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return 0 if e.code == 0 else 1
    try:
        return args.func(args)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return 1
    except (dst.DatasetFormatError, FileNotFoundError) as e:
        print(f"config error: {e}", file=sys.stderr)
        return 1
    except Exception as e:  # runtime failure
        print(f"runtime failure: {type(e).__name__}: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
