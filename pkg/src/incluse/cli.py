"""Command line entry point: run pipeline stages and write plot-ready artifacts.

Usage::

    incluse <command> --scenario <path|name> --out <dir> [--seed N] [--cells N] [--check NAME ...]

Commands are ``reach``, ``barrier``, ``smooth``, ``certify`` and ``all``.
Exit codes: 0 pass, 1 check failure, 2 configuration error, 3 unresolved.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import sys
import time
from pathlib import Path

from . import __version__
from .certify import (
    FAIL,
    PASS,
    UNRESOLVED,
    Stages,
    build_report,
    run_checks,
    stage_barrier,
    stage_reach,
    stage_smooth,
)
from .scenario import CHECKS, Scenario, ScenarioError, bundled_scenario_path, parse_scenario

log = logging.getLogger("incluse")

COMMANDS = ("reach", "barrier", "smooth", "certify", "all")
EXIT_PASS, EXIT_FAIL, EXIT_CONFIG, EXIT_UNRESOLVED = 0, 1, 2, 3
_EXIT = {PASS: EXIT_PASS, FAIL: EXIT_FAIL, UNRESOLVED: EXIT_UNRESOLVED}

# ASCII stand-in for the reach set name so file names stay portable
REACH_STEM = "K_epsbar"


class StageError(RuntimeError):
    """A pipeline stage raised; carries the stage name."""

    def __init__(self, stage: str, exc: Exception):
        super().__init__(f"stage {stage}: {exc}")
        self.stage = stage


def resolve_scenario(arg: str) -> Path:
    """A file path, or the name of a bundled scenario such as ``linear``."""
    p = Path(arg)
    if p.exists():
        return p
    bundled = bundled_scenario_path(Path(arg).stem)
    if p.suffix in ("", ".toml") and bundled.exists():
        return bundled
    raise ScenarioError(f"scenario not found: {arg}")


def load_scenario(arg: str, seed: int | None = None, cells: int | None = None) -> Scenario:
    sc = parse_scenario(resolve_scenario(arg))
    if seed is not None or cells is not None:
        sc = sc.with_overrides(seed=seed, cells=cells)
    return sc


def _stage(name: str, fn, *args):
    try:
        return fn(*args)
    except ScenarioError:
        raise
    except Exception as exc:  # noqa: BLE001 - re-raised with the stage name
        raise StageError(name, exc) from exc


class _Writer:
    def __init__(self, out: Path):
        self.out = out
        self.files: dict[str, str] = {}
        out.mkdir(parents=True, exist_ok=True)

    def write(self, name: str, data: str | bytes) -> None:
        raw = data.encode() if isinstance(data, str) else data
        (self.out / name).write_bytes(raw)
        self.files[name] = hashlib.sha256(raw).hexdigest()


def _emit_reach(wr: _Writer, st: Stages) -> None:
    K = st.reach.region
    wr.write(f"{REACH_STEM}.csv", K.to_csv())
    wr.write(f"{REACH_STEM}.bin", K.to_bytes())
    wr.write(f"{REACH_STEM}.json", st.reach.sidecar_json())


def _emit_barrier(wr: _Writer, st: Stages, extras: bool) -> None:
    wr.write("BK.csv", st.BK.to_csv())
    if extras:
        wr.write("K_prime.csv", st.reach_inflated.region.to_csv())
        wr.write("bhat.csv", st.bhat.to_csv())
        wr.write("U1.csv", st.U1.to_csv())


def run(command: str, sc: Scenario, out_dir, checks=None) -> tuple[dict, int]:
    """Run ``command`` on ``sc`` and write artifacts plus ``manifest.json``.

    Returns:
        ``(manifest, exit_code)``.

    Raises:
        StageError: a stage failed; the message names the stage.
    """
    if command not in COMMANDS:
        raise ScenarioError(f"unknown command {command!r}")
    if checks and "invariance" in checks and sc.halfspace is None:
        raise ScenarioError("the invariance check needs an [invariance] half-space")
    wr = _Writer(Path(out_dir))
    t0 = time.perf_counter()
    st = _stage("reach", stage_reach, sc)
    _emit_reach(wr, st)
    status = None
    if command != "reach":
        _stage("barrier", stage_barrier, sc, st)
        _emit_barrier(wr, st, extras=command == "all")
    if command in ("smooth", "certify", "all"):
        _stage("smooth", stage_smooth, sc, st)
        wr.write("B_smooth.csv", st.B.to_csv())
    if command in ("certify", "all"):
        verdicts = _stage("certify", run_checks, sc, st, checks)
        report = build_report(sc, st, verdicts)
        wr.write("report.json", report.to_json())
        status = report.status
    st.timings["total"] = time.perf_counter() - t0
    manifest = {
        "command": command,
        "scenario": sc.name,
        "scenario_sha256": sc.digest(),
        "seed": int(sc.seed),
        "version": __version__,
        "status": status,
        "edge_truncated": bool(st.reach.edge_truncated),
        "timings": {k: round(v, 6) for k, v in sorted(st.timings.items())},
    }
    wr.write("scenario.toml", sc.to_toml())
    manifest["files"] = dict(sorted(wr.files.items()))
    (wr.out / "manifest.json").write_text(json.dumps(manifest, sort_keys=True, indent=2) + "\n")
    return manifest, _EXIT.get(status, EXIT_PASS)


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="incluse", description=__doc__.splitlines()[0])
    p.add_argument("command", choices=COMMANDS)
    p.add_argument("--scenario", required=True,
                   help="TOML file, or a bundled name (linear, example1)")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--cells", type=int, default=None, help="cells per axis")
    p.add_argument("--check", action="append", choices=CHECKS, default=None,
                   help="restrict to these checks (repeatable)")
    p.add_argument("-v", "--verbose", action="store_true")
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s")
    try:
        if args.cells is not None and args.cells < 2:
            raise ScenarioError("--cells must be at least 2")
        sc = load_scenario(args.scenario, args.seed, args.cells)
        manifest, code = run(args.command, sc, args.out, args.check)
    except ScenarioError as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except StageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_FAIL
    log.info("timings %s", manifest["timings"])
    print(f"{args.command}: {manifest['status'] or 'done'} -> {args.out}")
    return code


if __name__ == "__main__":
    sys.exit(main())
