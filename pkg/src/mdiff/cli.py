"""Command-line entry point: ``mdiff {gen-data,train,eval,ablate,report}``.

Configuration comes from an optional JSON file (``--config``), then
``--set key=value`` pairs and dedicated flags, in increasing precedence.
The output root is ``--out``, else ``$MDIFF_OUT``, else the config's ``out``.

Exit codes: 0 success, 2 usage or configuration error, 3 numeric failure.
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

from . import datastore, envs
from . import harness as hx
from . import numcore as nc

EXIT_OK, EXIT_USAGE, EXIT_NUMERIC = 0, 2, 3


class UsageError(Exception):
    pass


def _parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, help="JSON config file")
    common.add_argument("--out", help="output root (overrides $MDIFF_OUT and the config)")
    common.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                        help="override any config field; repeatable")
    common.add_argument("--family", choices=None, help="environment family")
    common.add_argument("--seed", type=int, help="sets task, data, context and diffusion seeds")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="mdiff", description=__doc__,
                                formatter_class=argparse.RawDescriptionHelpFormatter)
    sub = p.add_subparsers(dest="cmd", required=True)

    g = sub.add_parser("gen-data", parents=[common], help="collect the offline dataset")
    g.add_argument("--quality", choices=datastore.POLICIES,
                   help="collect only this quality (n_<quality> trajectories per task)")

    t = sub.add_parser("train", parents=[common], help="train context and diffusion models")
    t.add_argument("--data", type=Path, help="dataset directory (default <out>/data)")
    t.add_argument("--steps", type=int, help="diffusion training steps")
    t.add_argument("--drop-prob", type=float, help="context drop probability; 1.0 trains the unconditional model")
    t.add_argument("--resume", action="store_true", help="continue from the checkpoint in <out>/ckpt")
    t.add_argument("--stop-at", type=int, help=argparse.SUPPRESS)

    e = sub.add_parser("eval", parents=[common], help="meta-test on the test tasks")
    e.add_argument("--ckpt", type=Path, help="checkpoint directory (default <out>/ckpt)")
    e.add_argument("--quality", action="append", choices=datastore.POLICIES,
                   help="warm-start quality; repeatable")
    e.add_argument("--episodes", type=int, help="episodes per task and seed")

    a = sub.add_parser("ablate", parents=[common], help="sweep a parameter grid")
    a.add_argument("--grid", action="append", default=[], metavar="KEY=V1,V2,...",
                   help="one swept parameter; repeat for a cross product")
    a.add_argument("--ckpt", type=Path, help="base checkpoint directory (default <out>/ckpt)")
    a.add_argument("--jobs", type=int, help="worker processes (default: CPU count)")

    r = sub.add_parser("report", parents=[common], help="render CSV results as Markdown")
    r.add_argument("csv", nargs="*", type=Path, help="CSV files (default: all under <out>)")
    r.add_argument("-o", "--output", type=Path, help="write Markdown here instead of stdout")
    return p


def resolve_config(args) -> hx.ExperimentConfig:
    cfg = hx.ExperimentConfig()
    if args.config:
        try:
            doc = json.loads(Path(args.config).read_text())
        except FileNotFoundError:
            raise UsageError(f"config file not found: {args.config}") from None
        except json.JSONDecodeError as e:
            raise UsageError(f"{args.config}: invalid JSON: {e}") from None
        cfg = hx.ExperimentConfig.from_json(doc)
    for item in args.set:
        if "=" not in item:
            raise UsageError(f"--set expects KEY=VALUE, got {item!r}")
        k, v = item.split("=", 1)
        cfg = cfg.override(**{k: hx.coerce(cfg, k, v)})
    if args.family:
        cfg = cfg.override(family=args.family)
    if args.seed is not None:
        cfg = cfg.override(task_seed=args.seed, data_seed=args.seed, ctx_seed=args.seed, diff_seed=args.seed)
    out = args.out or os.environ.get("MDIFF_OUT") or cfg.out
    cfg = cfg.override(out=str(out))
    if getattr(args, "steps", None) is not None:
        cfg = cfg.override(diff_steps=args.steps)
    if getattr(args, "drop_prob", None) is not None:
        cfg = cfg.override(drop_prob=args.drop_prob)
    if getattr(args, "episodes", None) is not None:
        cfg = cfg.override(episodes_per_task=args.episodes)
    if getattr(args, "quality", None) and args.cmd == "eval":
        cfg = cfg.override(warm_qualities=list(args.quality))
    if getattr(args, "jobs", None) is not None:
        cfg = cfg.override(jobs=args.jobs)
    return cfg.validate()


def cmd_gen_data(args, cfg: hx.ExperimentConfig) -> int:
    if args.quality:
        counts = {q: 0 for q in datastore.POLICIES}
        counts[args.quality] = max(getattr(cfg, f"n_{args.quality}"), 1)
        cfg = cfg.override(n_expert=counts["expert"], n_medium=counts["medium"], n_random=counts["random"])
    ds, out = hx.gen_data(cfg)
    train, test = hx.make_tasks(cfg)
    print(f"wrote {out}: {len(train)} train / {len(test)} test tasks, "
          f"{len(ds.all_trajectories())} trajectories")
    for tid in ds.task_ids("train"):
        rets = [t.return_ for t in ds.trajectories.get(tid, [])]
        print(f"  task {tid}: mean return {sum(rets) / len(rets):.4f} over {len(rets)} trajectories")
    for q, v in hx.summarize_returns(ds).items():
        print(f"  {q}: mean return {v:.4f}")
    return EXIT_OK


def cmd_train(args, cfg: hx.ExperimentConfig) -> int:
    root = Path(cfg.out)
    data = args.data or root / "data"
    if not (Path(data) / "meta.json").exists():
        raise UsageError(f"no dataset at {data}; run gen-data first")
    ckpt = root / "ckpt"
    hx.train(cfg, Path(data), ckpt, resume=args.resume, stop_at=args.stop_at)
    print(f"wrote checkpoints to {ckpt}")
    return EXIT_OK


def cmd_eval(args, cfg: hx.ExperimentConfig) -> int:
    root = Path(cfg.out)
    ckpt = args.ckpt or root / "ckpt"
    try:
        models = hx.load_planner(Path(ckpt))
    except FileNotFoundError as e:
        raise UsageError(str(e)) from None
    _, test = hx.make_tasks(cfg)
    doc = hx.eval_report(cfg, models, test)
    out = root / "eval"
    out.mkdir(parents=True, exist_ok=True)
    (out / "report.json").write_text(json.dumps(doc, indent=1, sort_keys=True) + "\n")
    (out / "report.csv").write_text(hx.report_csv(doc))
    for q, body in doc["qualities"].items():
        s = body["summary"]
        if s["mean_return"] is None:
            print(f"{q}: no episodes")
        else:
            print(f"{q}: mean return {s['mean_return']:.4f} +- {s['std_return']:.4f} "
                  f"(oracle {s['mean_oracle_return']:.4f}) over {s['n_episodes']} episodes")
    print(f"wrote {out / 'report.json'}")
    return EXIT_OK


def parse_grid(items: list[str], cfg: hx.ExperimentConfig) -> dict[str, list]:
    grid = {}
    for item in items:
        if "=" not in item:
            raise UsageError(f"--grid expects KEY=V1,V2,..., got {item!r}")
        k, vals = item.split("=", 1)
        grid[k] = [hx.coerce(cfg, k, v) for v in vals.split(",") if v]
    return grid


def cmd_ablate(args, cfg: hx.ExperimentConfig) -> int:
    grid = parse_grid(args.grid, cfg)
    cells = hx.expand_grid(grid)
    root = Path(cfg.out)
    ckpt = args.ckpt or root / "ckpt"
    if set(grid) <= set(hx.TEST_TIME) or not set(grid) - set(hx.TEST_TIME) - set(hx.DIFFUSION_TIME):
        if not (Path(ckpt) / "context" / "context.json").exists():
            raise UsageError(f"no checkpoint at {ckpt}; run train first")
    print(f"ablation: {len(cells)} cells")
    rows = hx.ablate(cfg, grid, Path(ckpt), root / "data", root / "ablate", args.jobs)
    for r in rows:
        keys = ", ".join(f"{k}={r[k]}" for k in grid)
        if r["status"] == "ok":
            print(f"  [{keys}] mean return {r['mean_return']:.4f} +- {r['std_return']:.4f}")
        else:
            print(f"  [{keys}] {r['status']}")
    print(f"wrote {root / 'ablate' / 'table.csv'}")
    return EXIT_OK


def cmd_report(args, cfg: hx.ExperimentConfig) -> int:
    paths = args.csv or sorted(Path(cfg.out).rglob("*.csv"))
    paths = [p for p in paths if not p.name.endswith("_losses.csv")] if not args.csv else paths
    missing = [p for p in paths if not Path(p).exists()]
    if missing:
        raise UsageError(f"no such file: {missing[0]}")
    md = hx.render_markdown([Path(p) for p in paths])
    if args.output:
        args.output.write_text(md)
    else:
        sys.stdout.write(md)
    return EXIT_OK


COMMANDS = {"gen-data": cmd_gen_data, "train": cmd_train, "eval": cmd_eval, "ablate": cmd_ablate,
            "report": cmd_report}


def main(argv=None) -> int:
    parser = _parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return EXIT_OK if e.code == 0 else EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = resolve_config(args)
        return COMMANDS[args.cmd](args, cfg)
    except (UsageError, envs.ConfigError, datastore.DatasetParseError, nc.ShapeError) as e:
        print(f"mdiff {args.cmd}: error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except nc.NumericError as e:
        print(f"mdiff {args.cmd}: numeric failure: {e}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
