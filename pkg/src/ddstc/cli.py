"""Command-line front end: ``collect``, ``run``, ``sweep`` and ``report``.

Exit codes: 0 on success, 1 when a run fails (infeasible solve, failed
data check, solver error) and 2 for configuration or usage errors.
"""
from __future__ import annotations

import argparse
import csv
import logging
import math
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np

from . import __version__, sim, trajectory
from .experiment import (ConfigError, ExperimentConfig, collect_data, emit_config,
                         load_config, parse_config, prepare_output_feedback,
                         run_experiment, shipped_presets)

log = logging.getLogger("ddstc")

EXIT_OK, EXIT_RUN_FAILURE, EXIT_CONFIG = 0, 1, 2


class UsageError(Exception):
    """Bad invocation; maps to exit code 2."""


def repro_header(cfg: ExperimentConfig, seed=None) -> dict:
    """``# key=value`` entries embedded in every output file."""
    return {"version": __version__,
            "seed": cfg["noise"]["seed"] if seed is None else seed,
            "data_seed": cfg["data"]["seed"],
            "config": cfg.json()}


def parse_seeds(text: str) -> list[int]:
    """``"0-19"`` or ``"1,4,7"`` (or a mix) to a list of seeds."""
    seeds: list[int] = []
    for part in filter(None, (p.strip() for p in text.split(","))):
        lo, sep, hi = part.partition("-")
        try:
            seeds.extend(range(int(lo), int(hi) + 1) if sep else [int(lo)])
        except ValueError:
            raise UsageError(f"--seeds: cannot parse {part!r}") from None
    if not seeds:
        raise UsageError("--seeds: empty seed list")
    return seeds


def parse_sigmas(text: str) -> list[float]:
    try:
        sigmas = [float(s) for s in text.split(",") if s.strip()]
    except ValueError:
        raise UsageError(f"--sigmas: cannot parse {text!r}") from None
    if not sigmas:
        raise UsageError("--sigmas: empty sigma list")
    if any(not 0 < s < 1 for s in sigmas):
        raise UsageError("--sigmas: every sigma must lie in (0, 1)")
    return sigmas


def _load(args) -> ExperimentConfig:
    cfg = load_config(args.config)
    return cfg.with_overrides(out=args.out)


def _write_data(cfg: ExperimentConfig, path: Path) -> trajectory.TrajectoryData:
    data = collect_data(cfg)
    path.parent.mkdir(parents=True, exist_ok=True)
    trajectory.save_csv(data, path, repro_header(cfg, cfg["data"]["seed"]))
    return data


def cmd_collect(args) -> int:
    cfg = _load(args)
    if args.seed is not None:
        d = cfg.to_dict()
        d["data"]["seed"] = args.seed
        cfg = parse_config(d)
    path = Path(cfg["out"]) / "data.csv"
    data = _write_data(cfg, path)
    print(f"wrote {path} ({data.N} samples)")
    print(f"PE certificate: input Hankel of order {cfg['data']['order']} has full row rank "
          f"{data.n_u * cfg['data']['order']}")
    return EXIT_OK


def _data_for_run(cfg: ExperimentConfig, data_arg) -> trajectory.TrajectoryData:
    if data_arg is not None:
        path = Path(data_arg)
        if not path.is_file():
            raise UsageError(f"--data: no such file {path}")
        return trajectory.load_csv(path)
    path = Path(cfg["out"]) / "data.csv"
    if path.is_file():
        return trajectory.load_csv(path)
    log.info("no data file at %s; collecting it first", path)
    return _write_data(cfg, path)


def cmd_run(args) -> int:
    cfg = _load(args).with_overrides(seed=args.seed)
    data = _data_for_run(cfg, args.data)
    res = run_experiment(cfg, data)
    paths = sim.save_run(res, cfg["out"], repro_header(cfg))
    (Path(cfg["out"]) / "config.yaml").write_text(emit_config(cfg))
    m = sim.metrics(res)
    for key in ("packets_sent", "measurements_sent", "terminal_error",
                "feasibility_violations", "audit_violations"):
        print(f"{key}={m[key]}")
    print(f"wrote {paths['summary'].parent}")
    return EXIT_OK if res.feasible else EXIT_RUN_FAILURE


_SETUP_CACHE: dict = {}


def _sweep_cell(cfg_dict: dict, data: trajectory.TrajectoryData) -> dict:
    """One (sigma, seed) run; failures become flagged rows."""
    cfg = parse_config(cfg_dict)
    key = "state_feedback" if cfg["mode"] == "state-feedback" else "output_feedback"
    row = {"sigma": cfg[key]["sigma"], "seed": cfg["noise"]["seed"]}
    try:
        setup = None
        if cfg["mode"] == "output-feedback":
            ck = (id(data), cfg.with_overrides(seed=0).json())
            if ck not in _SETUP_CACHE:
                _SETUP_CACHE.clear()
                _SETUP_CACHE[ck] = prepare_output_feedback(cfg, data)
            setup = _SETUP_CACHE[ck]
        m = sim.metrics(run_experiment(cfg, data, setup))
        row.update(status="ok" if m["feasibility_violations"] == 0 else "infeasible", **m)
    except Exception as exc:  # flagged row, the sweep continues
        log.warning("sigma=%s seed=%s failed: %s", row["sigma"], row["seed"], exc)
        row.update(status=f"failed: {type(exc).__name__}")
    return row


SWEEP_FIELDS = ["sigma", "seed", "status", "packets_sent", "measurements_sent",
                "mean_inter_trigger", "terminal_error", "feasibility_violations",
                "audit_violations", "threshold_violations", "final_cost"]


def sweep_rows(cfg: ExperimentConfig, data, sigmas, seeds, jobs: int = 1) -> list[dict]:
    cells = [cfg.with_overrides(seed=s, sigma=sg).to_dict() for sg in sigmas for s in seeds]
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            return list(pool.map(_sweep_cell, cells, [data] * len(cells)))
    return [_sweep_cell(c, data) for c in cells]


def sweep_means(rows: list[dict], sigmas) -> list[dict]:
    means = []
    for sg in sigmas:
        ok = [r for r in rows if r["sigma"] == sg and r["status"] == "ok"]
        mean = {"sigma": sg, "seed": "mean",
                "status": f"{len(ok)}/{sum(r['sigma'] == sg for r in rows)} ok"}
        for f in SWEEP_FIELDS[3:]:
            vals = [r[f] for r in ok if f in r]
            mean[f] = float(np.mean(vals)) if vals else math.nan
        means.append(mean)
    return means


def cmd_sweep(args) -> int:
    cfg = _load(args)
    sigmas = parse_sigmas(args.sigmas)
    seeds = parse_seeds(args.seeds) if args.seeds else [
        cfg["noise"]["seed"] if args.seed is None else args.seed]
    data = _data_for_run(cfg, args.data)
    rows = sweep_rows(cfg, data, sigmas, seeds, args.jobs)
    means = sweep_means(rows, sigmas)
    out = Path(cfg["out"])
    out.mkdir(parents=True, exist_ok=True)
    path = out / "sweep.csv"
    with path.open("w", newline="") as fh:
        hdr = repro_header(cfg, ",".join(map(str, seeds)))
        fh.writelines(f"# {k}={v}\n" for k, v in hdr.items())
        w = csv.DictWriter(fh, SWEEP_FIELDS, extrasaction="ignore", restval="",
                           lineterminator="\n")
        w.writeheader()
        w.writerows(rows + means)
    for m in means:
        print(f"sigma={m['sigma']} mean_packets={m['packets_sent']:.2f} ({m['status']})")
    print(f"wrote {path}")
    return EXIT_OK if all(r["status"] == "ok" for r in rows) else EXIT_RUN_FAILURE


def _series(path: Path, header: dict, blocks: list[tuple[str, list[tuple]]]) -> None:
    with path.open("w") as fh:
        fh.writelines(f"# {k}={v}\n" for k, v in header.items())
        for i, (title, pts) in enumerate(blocks):
            if i:
                fh.write("\n\n")
            fh.write(f"# {title}\n")
            fh.writelines(f"{a} {format(float(b), '.17g')}\n" for a, b in pts)


def cmd_report(args) -> int:
    run_dir = Path(args.run_dir if args.run_dir is not None else args.out or "")
    traj, events = run_dir / "trajectory.csv", run_dir / "events.csv"
    for p in (traj, events):
        if not p.is_file():
            raise UsageError(f"report: missing {p}")
    meta, header, rows = trajectory.read_csv_table(traj)
    _, ev_header, ev_rows = trajectory.read_csv_table(events)
    keep = {k: meta[k] for k in ("version", "seed", "data_seed", "config") if k in meta}
    out = Path(args.out) if args.out and args.run_dir is not None else run_dir
    out.mkdir(parents=True, exist_ok=True)
    y_cols = [i for i, h in enumerate(header) if h.startswith("y")]
    blocks = [(header[i], [(r[0], r[i]) for r in rows]) for i in y_cols]
    written = [out / "outputs.dat", out / "inter_trigger.dat"]
    _series(written[0], keep, blocks)
    ti, taui = ev_header.index("t"), ev_header.index("tau")
    _series(written[1], keep, [("t tau", [(r[ti], r[taui]) for r in ev_rows])])
    ci, li = ev_header.index("cost"), ev_header.index("l")
    costs = [(r[li], r[ci]) for r in ev_rows if math.isfinite(float(r[ci]))]
    if costs:
        written.append(out / "cost.dat")
        _series(written[2], keep, [("l J", costs)])
    for p in written:
        print(f"wrote {p}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="ddstc", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=__version__)
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, config=True):
        if config:
            sp.add_argument("--config", required=True,
                            help=f"YAML file or shipped preset ({', '.join(shipped_presets())})")
        sp.add_argument("--seed", type=int, default=None,
                        help="noise seed (data seed for collect)")
        sp.add_argument("--out", default=None, help="output directory")

    sp = sub.add_parser("collect", help="generate the offline data set")
    common(sp)
    sp.set_defaults(func=cmd_collect)
    sp = sub.add_parser("run", help="run one closed-loop experiment")
    common(sp)
    sp.add_argument("--data", default=None, help="offline data CSV (default: <out>/data.csv)")
    sp.set_defaults(func=cmd_run)
    sp = sub.add_parser("sweep", help="run a sigma by seed grid")
    common(sp)
    sp.add_argument("--data", default=None)
    sp.add_argument("--sigmas", required=True, help="comma-separated thresholds")
    sp.add_argument("--seeds", default=None, help='e.g. "0-19" or "1,2,5"')
    sp.add_argument("--jobs", type=int, default=1, help="worker processes")
    sp.set_defaults(func=cmd_sweep)
    sp = sub.add_parser("report", help="emit plot-data series from a run directory")
    sp.add_argument("run_dir", nargs="?", default=None)
    common(sp, config=False)
    sp.set_defaults(func=cmd_report)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_CONFIG if exc.code else EXIT_OK
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (ConfigError, UsageError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except Exception as exc:
        print(f"run failed: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUN_FAILURE


def main_exit() -> None:
    """Console-script entry point."""
    sys.exit(main())


if __name__ == "__main__":
    main_exit()
