"""Single executable covering the whole pipeline.

Subcommands: synth, fit, score, evaluate, protocol, sweep, drift-plan,
drift-apply, profile, inspect, serve. Every run prints its resolved
configuration as one ``config: {...}`` JSON line so outputs are auditable;
failures print one ``error: ...`` line on stderr and exit nonzero.

The CADBENCH_THREADS environment variable caps BLAS worker threads; it is
applied before numpy loads, so it must be set when the process starts.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from pathlib import Path


def _apply_thread_cap() -> None:
    cap = os.environ.get("CADBENCH_THREADS")
    if not cap:
        return
    for var in ("OPENBLAS_NUM_THREADS", "OMP_NUM_THREADS", "MKL_NUM_THREADS"):
        os.environ.setdefault(var, cap)


def _echo(config: dict) -> None:
    print("config: " + json.dumps(config, sort_keys=True))


def _check_rho(parser: argparse.ArgumentParser, rho: float) -> None:
    if not 0.0 < rho <= 1.0:
        parser.error("rho must be in (0,1]")


def _load_registry(parser, bank: str | None, bank_dir: str | None):
    from cadbench.membank import BankRegistry, load_bank

    if bank and bank_dir:
        parser.error("--bank and --bank-dir are mutually exclusive")
    if bank:
        return BankRegistry([load_bank(bank)])
    if bank_dir:
        paths = sorted(Path(bank_dir).glob("*.cadb"))
        if not paths:
            parser.error(f"no .cadb files in {bank_dir}")
        return BankRegistry([load_bank(p) for p in paths])
    parser.error("one of --bank or --bank-dir is required")


def cmd_synth(parser, args) -> int:
    from cadbench.featstore import SyntheticSpec, materialize_synthetic

    spec = SyntheticSpec(
        seed=args.seed,
        n_tasks=args.tasks,
        n_train=args.train,
        n_test_normal=args.test_normal,
        n_test_anomalous=args.test_anomalous,
        grid_h=args.grid_h,
        grid_w=args.grid_w,
        dim=args.dim,
        cluster_spread=args.sigma,
        anomaly_delta=args.delta,
        task_separation=args.separation,
    )
    _echo({"command": "synth", **spec.__dict__, "out": args.out})
    manifest = materialize_synthetic(spec, args.out)
    print(f"wrote manifest {manifest}")
    return 0


def cmd_fit(parser, args) -> int:
    _check_rho(parser, args.rho)
    from cadbench.featstore import read_feature_file
    from cadbench.membank import fit_task, save_bank, storage_bytes

    _echo({"command": "fit", "features": args.features, "rho": args.rho,
           "radius": args.radius, "out": args.out})
    train = read_feature_file(args.features)
    bank = fit_task(train, rho=args.rho, radius=args.radius)
    payload, serialized = storage_bytes(bank)
    save_bank(bank, args.out)
    print(
        f"fitted {bank.task_id}: M={bank.m} per location, D={bank.train_count}, "
        f"threshold={bank.threshold:.6g}, payload {payload} B, file {serialized} B"
    )
    return 0


def cmd_score(parser, args) -> int:
    from cadbench.featstore import read_feature_file
    from cadbench.scoring import infer

    registry = _load_registry(parser, args.bank, args.bank_dir)
    _echo({"command": "score", "features": args.features, "radius": args.radius,
           "routing": args.routing, "tasks": registry.task_ids, "out": args.out})
    test = read_feature_file(args.features)
    lines = ["image_id,routed_task,image_score,decision,latency_ns"]
    for g in test.features:
        oracle = test.task_id if args.routing == "oracle" else None
        rep = infer(g, registry, args.radius, task_id=oracle)
        lines.append(
            f"{rep.image_id},{rep.routed_task},{rep.image_score!r},"
            f"{rep.decision},{rep.latency_ns}"
        )
    body = "\n".join(lines) + "\n"
    if args.out:
        Path(args.out).write_text(body)
        print(f"wrote {args.out} ({len(test.features)} images)")
    else:
        print(body, end="")
    return 0


def cmd_evaluate(parser, args) -> int:
    from cadbench.featstore import read_feature_file
    from cadbench.harness import metric_values
    from cadbench.scoring import score_dataset

    registry = _load_registry(parser, args.bank, args.bank_dir)
    _echo({"command": "evaluate", "features": args.features, "radius": args.radius,
           "routing": args.routing, "tasks": registry.task_ids})
    test = read_feature_file(args.features)
    oracle = test.task_id if args.routing == "oracle" else None
    reports = score_dataset(test, registry, args.radius, task_id=oracle)
    values = metric_values(reports, test.labels())
    print(
        f"auroc={values['auroc']:.6f} accuracy={values['accuracy']:.6f} "
        f"recall={values['recall']:.6f} images={len(reports)}"
    )
    if args.out:
        lines = ["image_id,label,routed_task,image_score,decision"]
        for g, r in zip(test.features, reports):
            lines.append(
                f"{g.image_id},{g.label},{r.routed_task},{r.image_score!r},{r.decision}"
            )
        Path(args.out).write_text("\n".join(lines) + "\n")
        print(f"wrote {args.out}")
    return 0


def cmd_protocol(parser, args) -> int:
    _check_rho(parser, args.rho)
    from cadbench.harness import ProtocolConfig, run_protocol

    config = ProtocolConfig(
        manifest=args.manifest,
        method=args.method,
        rho=args.rho,
        radius=args.radius,
        routing=args.routing,
        metric_kind=args.metric,
        seed=args.seed,
        profile=args.profile,
    )
    _echo({"command": "protocol", **config.echo(), "out": args.out})
    report = run_protocol(config, out_dir=args.out)
    row = report.summary_row()
    print(
        f"final: auroc={row['auroc']:.6f} accuracy={row['accuracy']:.6f} "
        f"recall={row['recall']:.6f} fm={row['fm']:.6f}"
        + (f" [{report.fm_flag}]" if report.fm_flag else "")
    )
    if report.routing_accuracy is not None:
        print(f"routing accuracy: {report.routing_accuracy:.6f}")
    if args.out:
        print(f"wrote report files under {args.out}")
    return 0


def cmd_sweep(parser, args) -> int:
    from cadbench.harness import ProtocolConfig, run_sweep

    rhos = tuple(float(x) for x in args.rhos.split(",")) if args.rhos else None
    radii = tuple(int(x) for x in args.radii.split(",")) if args.radii else None
    config = ProtocolConfig(
        manifest=args.manifest,
        method=args.method,
        routing=args.routing,
        seed=args.seed,
        sweep_rhos=rhos,
        sweep_radii=radii,
    )
    _echo({"command": "sweep", **config.echo()})
    sweep = run_sweep(config)
    print(sweep.to_markdown())
    for (rho, radius), msg in sweep.errors.items():
        print(f"cell (rho={rho}, r={radius}) failed: {msg}", file=sys.stderr)
    if args.out:
        Path(args.out).parent.mkdir(parents=True, exist_ok=True)
        Path(args.out).write_text(sweep.to_markdown() + "\n")
        print(f"wrote {args.out}")
    return 0


def cmd_drift_plan(parser, args) -> int:
    from cadbench.drift import make_plan

    plan = make_plan(args.track, args.seed)
    doc = plan.to_json()
    _echo({"command": "drift-plan", "track": args.track, "seed": args.seed,
           "out": args.out})
    body = json.dumps(doc, indent=2) + "\n"
    if args.out:
        Path(args.out).parent.mkdir(parents=True, exist_ok=True)
        Path(args.out).write_text(body)
        print(f"wrote {args.out}")
    else:
        print(body, end="")
    return 0


def cmd_drift_apply(parser, args) -> int:
    from cadbench.drift import DriftPlan, BlurParams, ColorParams, GeoParams, build_drift_tasks, make_plan

    if args.plan:
        doc = json.loads(Path(args.plan).read_text())
        track = doc["track"]
        cls = {"color": ColorParams, "blur": BlurParams, "geometric": GeoParams}[track]
        plan = DriftPlan(
            track=track,
            seed=doc["seed"],
            params=tuple(cls(**p) for p in doc["params"]),
        )
    elif args.track:
        plan = make_plan(args.track, args.seed)
    else:
        parser.error("one of --plan or --track is required")
    _echo({"command": "drift-apply", "src": args.src, "out": args.out,
           **plan.to_json()})
    manifest = build_drift_tasks(args.src, plan, args.out)
    print(f"wrote manifest {manifest}")
    return 0


def cmd_profile(parser, args) -> int:
    from cadbench.featstore import read_feature_file
    from cadbench.harness import profile_fit, profile_inference

    registry = _load_registry(parser, args.bank, args.bank_dir)
    _echo({"command": "profile", "features": args.features, "radius": args.radius,
           "runs": args.runs, "warmup": args.warmup, "index": args.index})
    test = read_feature_file(args.features)
    grid = test.features[args.index]
    stats = profile_inference(
        registry, grid, runs=args.runs, warmup=args.warmup, radius=args.radius
    )
    print(
        f"inference: mean {stats.mean_ms:.2f} ms +/- {stats.std_ms:.2f} ms "
        f"over {stats.runs} runs ({stats.warmup} warmup excluded), {stats.fps:.1f} FPS"
    )
    if args.fit_features:
        _check_rho(parser, args.rho)
        train = read_feature_file(args.fit_features)
        _, seconds = profile_fit(train, rho=args.rho, radius=args.radius)
        print(f"fit: {seconds:.2f} s for {len(train)} images")
    return 0


def cmd_inspect(parser, args) -> int:
    path = Path(args.path)
    magic = path.open("rb").read(4)
    _echo({"command": "inspect", "path": str(path)})
    if magic == b"CADF":
        from cadbench.featstore import read_feature_file

        ds = read_feature_file(path)
        labels = ds.labels()
        print(
            f"feature file: split={ds.split} grid={ds.grid_h}x{ds.grid_w} "
            f"dim={ds.dim} images={len(ds)} normal={int((~labels).sum())} "
            f"anomalous={int(labels.sum())}"
        )
    elif magic == b"CADB":
        from cadbench.membank import load_bank, storage_bytes

        bank = load_bank(path)
        payload, serialized = storage_bytes(bank)
        print(
            f"bank file: task={bank.task_id} grid={bank.grid_h}x{bank.grid_w} "
            f"dim={bank.dim} M={bank.m} D={bank.train_count} rho={bank.rho:g} "
            f"threshold={bank.threshold:.6g} payload={payload} B file={serialized} B"
        )
    else:
        parser.error(f"unrecognized file magic {magic!r}")
    return 0


def cmd_serve(parser, args) -> int:
    import uvicorn

    from cadbench.service.app import create_app

    _echo({"command": "serve", "host": args.host, "port": args.port,
           "bank_dir": args.bank_dir, "radius": args.radius})
    app = create_app(bank_dir=args.bank_dir, default_radius=args.radius)
    uvicorn.run(app, host=args.host, port=args.port, log_level="info")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="cadbench",
        description="Continual anomaly detection with spatially-indexed coreset memory.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate synthetic feature tasks")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--tasks", type=int, default=5)
    p.add_argument("--train", type=int, default=20)
    p.add_argument("--test-normal", type=int, default=10)
    p.add_argument("--test-anomalous", type=int, default=10)
    p.add_argument("--grid-h", type=int, default=8)
    p.add_argument("--grid-w", type=int, default=8)
    p.add_argument("--dim", type=int, default=16)
    p.add_argument("--sigma", type=float, default=0.05)
    p.add_argument("--delta", type=float, default=2.0)
    p.add_argument("--separation", type=float, default=0.5)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("fit", help="fit a task memory bank from a feature file")
    p.add_argument("--features", required=True)
    p.add_argument("--rho", type=float, default=0.10)
    p.add_argument("--radius", type=int, default=3)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_fit)

    p = sub.add_parser("score", help="score a feature file against fitted banks")
    p.add_argument("--features", required=True)
    p.add_argument("--bank")
    p.add_argument("--bank-dir")
    p.add_argument("--radius", type=int, default=3)
    p.add_argument("--routing", choices=("prototype", "oracle"), default="prototype")
    p.add_argument("--out")
    p.set_defaults(func=cmd_score)

    p = sub.add_parser("evaluate", help="compute AUROC/accuracy/recall for a test file")
    p.add_argument("--features", required=True)
    p.add_argument("--bank")
    p.add_argument("--bank-dir")
    p.add_argument("--radius", type=int, default=3)
    p.add_argument("--routing", choices=("prototype", "oracle"), default="prototype")
    p.add_argument("--out")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("protocol", help="run a full continual protocol from a manifest")
    p.add_argument("--manifest", required=True)
    p.add_argument("--method", choices=("dinosaur", "flat_baseline"), default="dinosaur")
    p.add_argument("--rho", type=float, default=0.10)
    p.add_argument("--radius", type=int, default=3)
    p.add_argument("--routing", choices=("prototype", "oracle"), default="prototype")
    p.add_argument("--metric", choices=("auroc", "accuracy", "recall"), default="auroc")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--profile", action="store_true")
    p.add_argument("--out")
    p.set_defaults(func=cmd_protocol)

    p = sub.add_parser("sweep", help="grid-sweep rho and radius over a manifest")
    p.add_argument("--manifest", required=True)
    p.add_argument("--method", choices=("dinosaur", "flat_baseline"), default="dinosaur")
    p.add_argument("--routing", choices=("prototype", "oracle"), default="prototype")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--rhos", help="comma list, default 0.01,0.025,0.05,0.1,0.2")
    p.add_argument("--radii", help="comma list, default 0,1,2,3,4")
    p.add_argument("--out")
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("drift-plan", help="emit a drift schedule")
    p.add_argument("--track", choices=("color", "blur", "geometric"), required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out")
    p.set_defaults(func=cmd_drift_plan)

    p = sub.add_parser("drift-apply", help="build drifted task images from sources")
    p.add_argument("--src", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--track", choices=("color", "blur", "geometric"))
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--plan", help="existing plan JSON (overrides --track/--seed)")
    p.set_defaults(func=cmd_drift_apply)

    p = sub.add_parser("profile", help="latency profile of inference (and optional fit)")
    p.add_argument("--features", required=True)
    p.add_argument("--index", type=int, default=0)
    p.add_argument("--bank")
    p.add_argument("--bank-dir")
    p.add_argument("--radius", type=int, default=3)
    p.add_argument("--runs", type=int, default=30)
    p.add_argument("--warmup", type=int, default=5)
    p.add_argument("--fit-features")
    p.add_argument("--rho", type=float, default=0.10)
    p.set_defaults(func=cmd_profile)

    p = sub.add_parser("inspect", help="describe a .cadf or .cadb file")
    p.add_argument("--path", required=True)
    p.set_defaults(func=cmd_inspect)

    p = sub.add_parser("serve", help="run the HTTP scoring service")
    p.add_argument("--host", default="127.0.0.1")
    p.add_argument("--port", type=int, default=8000)
    p.add_argument("--bank-dir")
    p.add_argument("--radius", type=int, default=3)
    p.set_defaults(func=cmd_serve)

    return parser


def main(argv: list[str] | None = None) -> int:
    _apply_thread_cap()
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(parser, args)
    except SystemExit:
        raise
    except BrokenPipeError:
        return 0
    except Exception as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
