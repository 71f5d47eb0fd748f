"""``nowcast`` command line: mosaic planning, staged runs, ablations.

Exit codes: 0 success, 2 config or validation error, 3 missing upstream
artifact, 4 numeric failure (non-finite loss or a failed reproducibility
check).
"""

from __future__ import annotations

import argparse
import contextlib
import json
import os
import sys
import tempfile
from pathlib import Path

from .experiment import (
    STAGES, SWITCHES, ConfigError, ExperimentError, NumericFailure, Workspace,
    ablation_csv, ablation_rows, artifact_hashes, load_config, run_stages, with_switches,
)
from .mosaic import load_catalog, plan_mosaics, plan_to_json

EXIT_OK, EXIT_CONFIG, EXIT_MISSING, EXIT_NUMERIC = 0, 2, 3, 4


def _log(msg):
    print(msg, file=sys.stderr, flush=True)


@contextlib.contextmanager
def output_lock(out: Path):
    """Exclusive ownership of ``out``; a lock left by a dead process is taken over."""
    out.mkdir(parents=True, exist_ok=True)
    lock = out / ".lock"
    for _ in range(2):
        try:
            fd = os.open(lock, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
            break
        except FileExistsError:
            try:
                pid = int(lock.read_text().strip() or 0)
                os.kill(pid, 0)
            except (ValueError, ProcessLookupError):
                lock.unlink(missing_ok=True)
                continue
            except PermissionError:
                pass
            raise ConfigError(f"{out} is locked by another run ({lock})")
    else:
        raise ConfigError(f"could not lock {out}")
    try:
        os.write(fd, str(os.getpid()).encode())
        os.close(fd)
        yield
    finally:
        lock.unlink(missing_ok=True)


@contextlib.contextmanager
def thread_cap():
    n = os.environ.get("NOWCAST_THREADS")
    if not n:
        yield
        return
    try:
        limit = int(n)
        if limit < 1:
            raise ValueError
    except ValueError:
        raise ConfigError(f"NOWCAST_THREADS must be a positive integer, got {n!r}") from None
    from threadpoolctl import threadpool_limits
    with threadpool_limits(limits=limit):
        yield


def cmd_mosaic_plan(args) -> int:
    path = Path(args.catalog)
    try:
        if path.stat().st_size == 0:
            raise ValueError("catalog file is empty")
        plan = plan_mosaics(load_catalog(path))
    except (OSError, ValueError, KeyError, json.JSONDecodeError) as e:
        _log(f"error: {path}: {e}")
        return EXIT_CONFIG
    text = plan_to_json(plan)
    if args.out:
        Path(args.out).parent.mkdir(parents=True, exist_ok=True)
        Path(args.out).write_text(text)
    else:
        sys.stdout.write(text)
    return EXIT_OK


def _verify_repro(cfg, out: Path, stage: str):
    """Rerun from scratch in a scratch directory; every artifact both trees hold must match."""
    last = STAGES[-1] if stage == "all" else stage
    with tempfile.TemporaryDirectory(prefix="nowcast-repro-") as tmp:
        _log(f"verify-repro: rerunning into {tmp}")
        if cfg.get("ablate"):
            run_stages(Workspace(tmp, with_switches(cfg, [])), "all", log=lambda m: None)
        ws = Workspace(tmp, cfg)
        for s in STAGES[:STAGES.index(last) + 1]:
            run_stages(ws, s, log=lambda m: None, force=True)
        fresh = artifact_hashes(tmp)
    existing = artifact_hashes(out)
    shared = sorted(set(fresh) & set(existing))
    if not shared:
        raise NumericFailure("verify-repro: no artifacts to compare")
    differ = [k for k in shared if fresh[k] != existing[k]]
    if differ:
        raise NumericFailure("verify-repro: artifacts differ: " + ", ".join(differ[:10]))
    _log(f"verify-repro: {len(shared)} artifacts bit-identical")


def cmd_run(args) -> int:
    cfg = load_config(args.config, args.seed)
    out = Path(args.out)
    with output_lock(out), thread_cap():
        status = run_stages(Workspace(out, cfg), args.stage, log=_log)
        if args.verify_repro:
            _verify_repro(cfg, out, args.stage)
    print(json.dumps(status, sort_keys=True))
    return EXIT_OK


def cmd_ablate(args) -> int:
    cfg = load_config(args.config, args.seed)
    switches = args.ablate if args.ablate is not None else cfg.get("ablate", [])
    for sw in switches:
        if sw not in SWITCHES:
            raise ConfigError(f"unknown ablation switch {sw!r}; choose from {sorted(SWITCHES)}")
    out = Path(args.out)
    base_cfg = with_switches(cfg, [])
    rows = []
    with output_lock(out), thread_cap():
        if switches:
            base = Workspace(out, base_cfg)
            run_stages(base, "all", log=_log)
            full_csv = (base.stage_dir("evaluate") / "verification.csv").read_text()
        for sw in switches:
            _log(f"ablation {sw}")
            ws = Workspace(out, with_switches(base_cfg, [sw]))
            run_stages(ws, "all", log=_log)
            rows += ablation_rows(full_csv, (ws.stage_dir("evaluate") / "verification.csv").read_text(), sw)
            if args.verify_repro:
                _verify_repro(with_switches(base_cfg, [sw]), out, "all")
        report = out / "reports" / "ablation.csv"
        report.parent.mkdir(parents=True, exist_ok=True)
        report.write_text(ablation_csv(rows))
    print(report)
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="nowcast", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)

    mp = sub.add_parser("mosaic-plan", help="derive the mosaic plan of a band catalog")
    mp.add_argument("catalog", help="band catalog JSON")
    mp.add_argument("--out", help="write the plan here instead of stdout")
    mp.set_defaults(func=cmd_mosaic_plan)

    for name, func, helptext in (("run", cmd_run, "run pipeline stages"),
                                 ("ablate", cmd_ablate, "retrain with inputs removed and compare")):
        sp = sub.add_parser(name, help=helptext)
        sp.add_argument("--config", required=True, help="run config JSON")
        sp.add_argument("--out", required=True, help="output directory")
        sp.add_argument("--seed", type=int, help="override the config seed")
        sp.add_argument("--verify-repro", action="store_true",
                        help="rerun from scratch in a scratch directory and compare checksums")
        if name == "run":
            sp.add_argument("--stage", default="all", choices=STAGES + ("all",))
        else:
            sp.add_argument("--ablate", action="append", metavar="SWITCH",
                            help=f"one of {', '.join(sorted(SWITCHES))}; repeatable")
        sp.set_defaults(func=func)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ExperimentError as e:
        _log(f"error: {e}")
        return e.exit_code


if __name__ == "__main__":
    sys.exit(main())
