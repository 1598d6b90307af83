"""Command line runner: ``pykpz <subcommand> [options]``.

Each subcommand computes a list of result rows, writes them to
``<out>/<subcommand>.csv`` (or ``.json``) and records a manifest next to
them. Exit codes: 0 success, 2 configuration error, 3 invariant violation,
4 numeric overflow.
"""
import argparse
import csv
import json
import logging
import os
import sys
from dataclasses import asdict, dataclass, field
from datetime import datetime, timezone
from typing import Callable, Dict, List, Optional

import numpy

from . import __version__, lattice_she, noise, plots, polymer, stats, tiling
from .config import ExperimentConfig, config_hash, load_config, to_text, validate
from .disk_archive import InDiskArchive
from .errors import InvalidArgumentError, KPZError

KERNEL_CACHE = "kernels.kpz"


@dataclass
class RunManifest:
    name: str
    config: str
    config_hash: str
    outputs: List[str] = field(default_factory=list)
    timestamp: str = ""
    version: str = __version__

    def save(self, path: str):
        with open(path, "w") as f:
            json.dump(asdict(self), f, indent=2)


def _point(text: Optional[str], d: int) -> numpy.ndarray:
    if not text:
        return numpy.zeros(d)
    values = [float(v) for v in text.split(",")]
    if len(values) == 1:
        values = values + [0.0] * (d - 1)
    if len(values) != d:
        raise InvalidArgumentError(f"point {text!r} does not have {d} coordinates")
    return numpy.array(values)


def _center(config: ExperimentConfig, args) -> numpy.ndarray:
    """Droplet center: --x0, else stats.x0 along the first axis."""
    if args.x0:
        return _point(args.x0, config.d)
    return _point(str(config.stats.x0), config.d)


def _partition(config: ExperimentConfig, args) -> List[dict]:
    x = _point(args.x, config.d)
    estimate = polymer.partition_function(config, polymer.make_field(config), x)
    return [estimate.row()]


def _covariance(config: ExperimentConfig, args) -> List[dict]:
    return [row for record in stats.covariance_table(config) for row in record.rows()]


def _powerlaw(config: ExperimentConfig, args) -> List[dict]:
    separations = [s for s in config.stats.separations if s >= 1]
    if len(separations) < stats.MIN_FIT_POINTS:
        logging.info(f"only {len(separations)} separations >= 1 in stats.separations; fitting at 1, 2, 3, 4")
        separations = [1.0, 2.0, 3.0, 4.0]
    records = []
    for s in separations:
        x = numpy.zeros(config.d)
        x[0] = s
        records.append(stats.covariance_overlap(config, x))
    fit = stats.powerlaw_fit(
        [r.distance for r in records], [r.overlap for r in records], [r.overlap_se for r in records]
    )
    rows = [row for r in records for row in r.rows()]
    rows.append({"estimator": "fit", **fit.row(), "expected": -(config.d - 2)})
    return rows


def _plateau(config: ExperimentConfig, args) -> List[dict]:
    return stats.martingale_plateau(config).rows()


def _tiling(config: ExperimentConfig, args) -> List[dict]:
    rows = []
    for n in config.tiling.levels:
        n = int(n)
        estimate = tiling.discrete_partition(config, tiling.tiling_field(config, n), n, config.T)
        gap = tiling.l2_gap(config, n, config.T)
        rows.append({"n": n, "value": estimate.value, "se": estimate.se, "gap": gap.gap, "gap_se": gap.se})
    return rows


def _she(config: ExperimentConfig, args) -> List[dict]:
    t = config.she.t
    x = _point(args.x, config.d)
    initial = lattice_she.InitialCondition.flat()
    if args.x0 is not None:
        initial = lattice_she.InitialCondition.droplet(_point(args.x0, config.d))

    grid = lattice_she.SHEGrid.create(config, t=t)
    snapshot = lattice_she.run_to(
        grid, t, initial, lattice_she.lattice_field(config, grid), digest=config_hash(config)
    )
    u, h = snapshot.at(x)

    archive_path = os.path.join(args.out, "she.kpz")
    archive = InDiskArchive(archive_path, create=True)
    name = f"{config_hash(config)[:12]}-t{t}"
    if archive.array_exists(f"she/{name}/u"):
        for suffix in ("u", "meta", "hash"):
            archive.remove_array(f"she/{name}/{suffix}")
    snapshot.save(archive, name)
    archive.save()

    rows = [
        {
            "t": t,
            "eps": snapshot.eps,
            "u": u,
            "h": h,
            "mass": snapshot.grid.mass(),
            "u_min": float(snapshot.u.min()),
            "u_max": float(snapshot.u.max()),
            "sites": snapshot.grid.sites,
        }
    ]
    if args.compare:
        rows.append({"t": t, **lattice_she.she_vs_polymer(config, t, x).row()})
    return rows


def _bump_h0(y: numpy.ndarray) -> numpy.ndarray:
    return numpy.log1p(numpy.exp(-numpy.sum(y * y, axis=-1)))


def _theorem1(config: ExperimentConfig, args) -> List[dict]:
    x = _point(args.x, config.d)
    record = stats.theorem1_gap(
        config,
        args.variant,
        config.she.t,
        x,
        h0=_bump_h0 if args.variant == "general" else None,
        h0_bound=float(numpy.log(2.0)),
        x0=_center(config, args),
    )
    return record.rows()


def _narrow_wedge(config: ExperimentConfig, args) -> List[dict]:
    x = _point(args.x, config.d)
    x0 = _center(config, args)
    return [stats.narrow_wedge_mean(config, config.she.t, x, x0).row()]


def _tails(config: ExperimentConfig, args) -> List[dict]:
    archive = InDiskArchive(os.path.join(args.out, "tails.kpz"), create=True)
    rows = []
    for inner in (config.stats.inner_small, config.stats.inner_large):
        rows.extend(stats.tail_study(config, inner=inner, archive=archive).rows())
    archive.save()
    return rows


def _split(config: ExperimentConfig, args) -> List[dict]:
    record = stats.decorrelation_split(config, X=_point(args.x, config.d))
    value, se = stats.split_second_moment(config)
    return [{**record.row(), "split_second_moment": value, "split_second_moment_se": se}]


def _noise_check(config: ExperimentConfig, args) -> List[dict]:
    lambdas = config.stats.lambdas
    coarsest = max(lambdas)
    field = noise.NoiseField(config.seed, coarsest**2 / 4, coarsest / 4, config.d)
    phi, norm2 = noise.bump_test_function(config.d)
    rows, slope = noise.besov_scaling_check(field, phi, lambdas, seeds=args.seeds, norm2=norm2, per_scale=True)
    out = [{"lambda": r.lam, "variance": r.variance, "se": r.se, "expected": r.expected} for r in rows]
    out.append({"lambda": float("nan"), "slope": slope, "expected_slope": -(config.d + 2)})
    return out


def _gaussian_f(y: numpy.ndarray) -> numpy.ndarray:
    return numpy.exp(-numpy.sum(y * y, axis=-1))


def _average(config: ExperimentConfig, args) -> List[dict]:
    return [record.row() for record in stats.spatial_average(config, _gaussian_f, config.she.t)]


def _free_energy(config: ExperimentConfig, args) -> List[dict]:
    mean, se = stats.free_energy_sign(config)
    return [{"T": config.T, "beta": config.beta, "mean_log_z": mean, "se": se}]


def _validate(config: ExperimentConfig, args) -> List[dict]:
    print(to_text(config), end="")
    return [{"config_hash": config_hash(config)}]


COMMANDS: Dict[str, Callable] = {
    "partition": _partition,
    "covariance": _covariance,
    "powerlaw": _powerlaw,
    "plateau": _plateau,
    "tiling": _tiling,
    "she": _she,
    "theorem1": _theorem1,
    "narrow-wedge": _narrow_wedge,
    "tails": _tails,
    "split": _split,
    "noise-check": _noise_check,
    "average": _average,
    "free-energy": _free_energy,
    "validate": _validate,
}


def write_rows(rows: List[dict], path: str, fmt: str):
    if fmt == "json":
        with open(path, "w") as f:
            json.dump(rows, f, indent=2, default=float)
        return

    columns = []
    for row in rows:
        columns.extend(k for k in row if k not in columns)
    with open(path, "w", newline="") as f:
        writer = csv.DictWriter(f, fieldnames=columns)
        writer.writeheader()
        writer.writerows(rows)


def read_rows(path: str) -> List[dict]:
    if path.endswith(".json"):
        with open(path) as f:
            return json.load(f)
    with open(path, newline="") as f:
        return [{k: v for k, v in row.items() if v != ""} for row in csv.DictReader(f)]


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="pykpz", description="Mollified KPZ/SHE numerical experiments")
    parser.add_argument("--config", help="key = value config file")
    parser.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="override a config key")
    parser.add_argument("--seed", type=int)
    parser.add_argument("--workers", type=int)
    parser.add_argument("--out", default=".", help="output directory")
    parser.add_argument("--format", choices=("csv", "json"), default="csv")
    parser.add_argument("-v", "--verbose", action="count", default=0)

    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        cmd = sub.add_parser(name)
        cmd.add_argument("--x", help="point, comma separated (a single value means x e_1)")
        cmd.add_argument("--x0", help="droplet center")
        if name == "theorem1":
            cmd.add_argument("--variant", choices=("flat", "general", "droplet"), default="flat")
        if name == "she":
            cmd.add_argument("--compare", action="store_true", help="also compare with the polymer in law")
        if name == "noise-check":
            cmd.add_argument("--seeds", type=int, default=1000)

    plot = sub.add_parser("plot")
    plot.add_argument("kind", choices=sorted(plots.PLOTS))
    plot.add_argument("input", help="CSV or JSON rows from a previous run")
    plot.add_argument("--output", help="image path, <input>.png by default")
    return parser


def _overrides(args) -> List[str]:
    pairs = list(args.set)
    if args.seed is not None:
        pairs.append(f"seed={args.seed}")
    if args.workers is not None:
        pairs.append(f"workers={args.workers}")
    return pairs


def _plot(args) -> int:
    rows = read_rows(args.input)
    output = args.output or os.path.splitext(args.input)[0] + ".png"
    kwargs = {}
    if args.kind == "covariance":
        fits = [r for r in rows if r.get("estimator") == "fit"]
        rows = [r for r in rows if r.get("estimator") != "fit"]
        if fits:
            kwargs = {"slope": float(fits[0]["slope"]), "amplitude": float(fits[0]["amplitude"])}
    plots.render(args.kind, rows, output, **kwargs)
    return 0


def run(argv: Optional[List[str]] = None) -> int:
    """Parse ``argv``, run the subcommand and return the exit code."""
    args = build_parser().parse_args(argv)
    level = logging.WARNING if args.verbose == 0 else logging.INFO if args.verbose == 1 else logging.DEBUG
    logging.basicConfig(level=level, format="%(asctime)s %(levelname)s %(message)s")

    try:
        if args.command == "plot":
            return _plot(args)

        config = validate(load_config(args.config, _overrides(args)))
        os.makedirs(args.out, exist_ok=True)

        cache = InDiskArchive(os.path.join(args.out, KERNEL_CACHE), create=True)
        polymer.kernel_for(config.d, config.mollifier.dr, cache)
        if cache.modified_entries:
            cache.save()

        rows = COMMANDS[args.command](config, args)
        if args.command == "validate":
            return 0

        output = os.path.join(args.out, f"{args.command}.{args.format}")
        write_rows(rows, output, args.format)
        manifest = RunManifest(
            args.command,
            to_text(config),
            config_hash(config),
            [output],
            datetime.now(timezone.utc).isoformat(),
        )
        manifest.save(os.path.join(args.out, f"{args.command}.manifest.json"))
        logging.info(f"{len(rows)} rows written to {output}")
        return 0
    except KPZError as e:
        logging.error(f"{type(e).__name__}: {e}")
        return e.exit_code


def main():
    sys.exit(run())
