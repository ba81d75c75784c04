"""Command-line front end: run, sweep, sinr-curve and validate."""
from __future__ import annotations

import argparse
import csv
import logging
import shutil
import sys
import tempfile
from pathlib import Path
from typing import Sequence

import numpy as np
import yaml

from . import config as cfgmod
from .channel import pathloss_db
from .engine import AXES, RunResult, Simulator, run_many, sweep_configs
from .grid import ConfigError
from .metrics import fmt

log = logging.getLogger("sidelink_sim")

EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME = 0, 1, 2
RESOLVED = "resolved_config.yaml"


def _load(args) -> cfgmod.RunConfig:
    cfg = cfgmod.load(args.config, args.set, args.seed)
    return cfg.validate()


def _write_outputs(out: Path, result: RunResult) -> None:
    result.store.write(out, result.summary)
    (out / RESOLVED).write_text(cfgmod.dump(result.config))
    with (out / "vehicles.csv").open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["id", "position_m", "speed_mps", "is_hpm_node", "tx_offset", "hpm_phase"])
        for v in result.vehicles:
            w.writerow([v.id, fmt(v.position), fmt(v.speed), int(v.is_hpm_node), v.tx_offset,
                        v.hpm_phase])


def _commit(stage: Path, out: Path) -> None:
    out.mkdir(parents=True, exist_ok=True)
    for f in sorted(stage.iterdir()):
        dest = out / f.name
        if dest.is_dir():
            shutil.rmtree(dest)
        f.replace(dest)


def _run_one(cfg: cfgmod.RunConfig, out: Path) -> RunResult:
    """Run into a staging directory beside ``out``; nothing is left behind on failure."""
    out.parent.mkdir(parents=True, exist_ok=True)
    stage = Path(tempfile.mkdtemp(prefix=f".{out.name}.", dir=out.parent))
    try:
        if cfg.metrics.trace:
            with (stage / "trace.csv").open("w", newline="") as fh:
                result = Simulator(cfg, fh).run()
        else:
            result = Simulator(cfg).run()
        _write_outputs(stage, result)
        _commit(stage, out)
        return result
    finally:
        shutil.rmtree(stage, ignore_errors=True)


def cmd_run(args) -> int:
    cfg = _load(args)
    result = _run_one(cfg, Path(args.out))
    s = result.summary
    print(f"run done: {s['n_vehicles']} vehicles, BSM PRR {s['bsm_prr_mean']}, "
          f"CBR {s['cbr_mean']} -> {args.out}")
    return EXIT_OK


def _parse_values(axis: str, raw: str) -> list:
    items = [v.strip() for v in raw.split(",") if v.strip()]
    if axis == "policies":
        return items
    try:
        return [float(v) for v in items]
    except ValueError:
        raise ConfigError(f"--values for {axis} must be numbers") from None


def cmd_sweep(args) -> int:
    base = _load(args)
    values = _parse_values(args.axis, args.values)
    cfgs = sweep_configs(base, args.axis, values)
    out = Path(args.out)
    results = run_many(cfgs, args.jobs)
    failed = 0
    for i, (v, cfg, res) in enumerate(zip(values, cfgs, results)):
        sub = out / f"run_{i:03d}_{v}"
        if isinstance(res, BaseException):
            failed += 1
            print(f"run {i} ({args.axis}={v}) failed: {res}", file=sys.stderr)
            continue
        stage = Path(tempfile.mkdtemp(prefix=f".{sub.name}.", dir=_mk(out)))
        try:
            _write_outputs(stage, res)
            _commit(stage, sub)
        finally:
            shutil.rmtree(stage, ignore_errors=True)
        print(f"run {i} ({args.axis}={v}): BSM PRR {res.summary['bsm_prr_mean']}, "
              f"CBR {res.summary['cbr_mean']}")
    return EXIT_RUNTIME if failed else EXIT_OK


def _mk(p: Path) -> Path:
    p.mkdir(parents=True, exist_ok=True)
    return p


def sinr_curve(cfg: cfgmod.RunConfig, separation: float, powers: Sequence[float],
               step: float = 10.0) -> tuple[np.ndarray, dict[float, np.ndarray]]:
    """SINR of the target link when two equal-power transmitters collide.

    The target sits at 0 and the interferer at ``separation``. Receivers
    span ``[-separation, separation)``: negative positions lie on the far
    side of the target, so link distance is ``|x|`` throughout. Shadowing
    is left out so the curve is deterministic.
    """
    if not separation > 0 or not step > 0:
        raise ConfigError("sinr-curve: separation and step must be > 0")
    if step >= separation:
        raise ConfigError("sinr-curve: step must be smaller than the separation")
    x = np.arange(-separation, separation, step)
    pl = cfg.channel.pathloss
    noise = cfg.channel.noise.mw
    loss_t = pathloss_db(pl, np.abs(x))
    loss_i = pathloss_db(pl, separation - x)
    curves = {}
    for p in powers:
        s = 10.0 ** ((p - loss_t) / 10.0)
        i = 10.0 ** ((p - loss_i) / 10.0)
        curves[float(p)] = 10.0 * np.log10(s / (i + noise))
    return x, curves


def cmd_sinr_curve(args) -> int:
    cfg = _load(args)
    try:
        powers = [float(v) for v in args.powers.split(",") if v.strip()]
    except ValueError:
        raise ConfigError("sinr-curve: --powers must be numbers") from None
    if not powers:
        raise ConfigError("sinr-curve: empty power list")
    x, curves = sinr_curve(cfg, args.separation, powers, args.step)
    out = _mk(Path(args.out))
    with (out / "sinr_curve.csv").open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["rx_position_m", "link_distance_m", "interferer_distance_m"]
                   + [f"sinr_db_{fmt(p)}dbm" for p in curves])
        for j, pos in enumerate(x):
            w.writerow([fmt(pos), fmt(abs(pos)), fmt(args.separation - pos)]
                       + [fmt(c[j]) for c in curves.values()])
    (out / RESOLVED).write_text(cfgmod.dump(cfg))
    print(f"wrote {out / 'sinr_curve.csv'}")
    return EXIT_OK


def cmd_validate(args) -> int:
    cfg = _load(args)
    sys.stdout.write(cfgmod.dump(cfg))
    print("# config valid", file=sys.stderr)
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="YAML config (default: shipped defaults)")
    common.add_argument("--seed", type=int, help="master seed override")
    common.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                        help="dotted override, repeatable (e.g. policy.kind=adaptive)")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="sidelink-sim", description=__doc__)
    sub = p.add_subparsers(dest="command", required=True)

    r = sub.add_parser("run", parents=[common], help="simulate one configuration")
    r.add_argument("--out", required=True, help="output directory")
    r.set_defaults(func=cmd_run)

    s = sub.add_parser("sweep", parents=[common], help="one run per value along an axis")
    s.add_argument("--out", required=True)
    s.add_argument("--axis", required=True, choices=sorted(AXES))
    s.add_argument("--values", required=True, help="comma-separated values")
    s.add_argument("--jobs", type=int, default=1, help="parallel worker processes")
    s.set_defaults(func=cmd_sweep)

    c = sub.add_parser("sinr-curve", parents=[common],
                       help="analytic SINR between two colliding transmitters")
    c.add_argument("--out", required=True)
    c.add_argument("--separation", type=float, default=1000.0, help="meters")
    c.add_argument("--powers", default="0,5,10,15,20", help="dBm, comma-separated")
    c.add_argument("--step", type=float, default=10.0, help="receiver spacing in meters")
    c.set_defaults(func=cmd_sinr_curve)

    v = sub.add_parser("validate", parents=[common], help="check a config and print it resolved")
    v.set_defaults(func=cmd_validate)
    return p


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (OSError, yaml.YAMLError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG if isinstance(exc, (FileNotFoundError, yaml.YAMLError)) else EXIT_RUNTIME
    except Exception as exc:  # noqa: BLE001
        print(f"runtime error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
