"""Experiment runner: configs in, report bundles out.

Commands::

    harnack-lab run <config.json | preset>
    harnack-lab convergence <config.json | preset>
    harnack-lab dump-system --k K --n N [--generator preset]

Exit codes: 0 pass, 1 asserted property failed, 2 usage or config error,
3 solver failure.
"""
from __future__ import annotations

import argparse
import json
import os
import sys
from dataclasses import asdict, dataclass, field
from importlib import resources
from pathlib import Path

import numpy as np

from . import fields
from .approx import build_system, flat_system
from .campanato import (
    QuotientError,
    RankDeficiencyError,
    Samples,
    decay_profile,
    dyadic_scales,
    holder_estimate,
    quotient_field,
    quotient_max_error,
    richardson_error,
)
from .domain import (
    GraphDomain,
    ManufacturedPair,
    conformal_pair_2d,
    manufactured_flattened,
    synthetic_pair,
)
from .elliptic import (
    Grid,
    GridField,
    SolverError,
    convergence_study,
    max_error,
    solve_dirichlet,
)
from .polyalg import taylor_coefficients

CONFIG_SCHEMA_VERSION = 1
ENV_OUTPUT = "HARNACK_LAB_OUTPUT_DIR"
ENV_THREADS = "HARNACK_LAB_THREADS"
HOLDER_DRIFT_LIMIT = 0.25
ORDER_WINDOW = (1.7, 2.3)
QUOTIENT_ORDER_MIN = 1.7

EXIT_PASS, EXIT_FAIL, EXIT_USAGE, EXIT_SOLVER = 0, 1, 2, 3

GENERATORS = ("conformal", "manufactured_flattened", "synthetic")


class ConfigError(ValueError):
    """Invalid configuration; the message names the offending field or position."""


@dataclass
class ScaleSpec:
    r0: float = 0.5
    rho: float = 0.5
    count: int = 2

    def radii(self) -> list:
        # count halvings give count + 1 radii; the last one is r0 * rho**count
        return dyadic_scales(self.r0, self.rho, self.count + 1)


@dataclass
class SolverSpec:
    tol: float = 1e-10
    max_iters: int = 2000
    mode: str = "auto"


@dataclass
class ExperimentConfig:
    generator: dict
    k: int
    alpha: float = 0.5
    grids: list = field(default_factory=lambda: [64, 128, 256])
    scales: ScaleSpec = field(default_factory=ScaleSpec)
    solver: SolverSpec = field(default_factory=SolverSpec)
    seed: int = 0
    output_dir: str = "harnack-out"
    name: str = "experiment"
    expect: dict = field(default_factory=dict)
    holder_pairs: int = 10_000
    schema_version: int = CONFIG_SCHEMA_VERSION

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        def bad(name, why):
            raise ConfigError(f"{name}: {why}")

        if self.schema_version != CONFIG_SCHEMA_VERSION:
            bad("schema_version", f"unsupported version {self.schema_version!r}")
        if not isinstance(self.generator, dict) or "name" not in self.generator:
            bad("generator", "must be an object with a 'name'")
        if self.generator["name"] not in GENERATORS:
            bad("generator.name", f"unknown generator {self.generator['name']!r}; "
                f"expected one of {', '.join(GENERATORS)}")
        if not isinstance(self.k, int) or isinstance(self.k, bool) or self.k < 1:
            bad("k", f"must be an integer >= 1, got {self.k!r}")
        if self.k > 6:
            bad("k", f"must be <= 6, got {self.k}")
        if not 0 < self.alpha < 1:
            bad("alpha", f"must lie in (0, 1), got {self.alpha!r}")
        if not self.grids or any(not isinstance(N, int) or N < 8 for N in self.grids):
            bad("grids", f"must be a non-empty list of integers >= 8, got {self.grids!r}")
        s = self.scales
        if not 0 < s.rho < 1:
            bad("scales.rho", f"must lie in (0, 1), got {s.rho!r}")
        if not 0 < s.r0 <= 1:
            bad("scales.r0", f"must lie in (0, 1], got {s.r0!r}")
        if not isinstance(s.count, int) or s.count < 1:
            bad("scales.count", f"must be an integer >= 1, got {s.count!r}")
        floor = 8 / min(self.grids)
        if s.r0 * s.rho**s.count < floor * (1 - 1e-12):
            bad("scales", f"smallest radius r0*rho**count = {s.r0 * s.rho**s.count:g} "
                f"is below 8/min(grids) = {floor:g}")
        if self.solver.mode not in ("auto", "direct", "iterative"):
            bad("solver.mode", f"must be auto, direct or iterative, got {self.solver.mode!r}")
        if not self.solver.tol > 0:
            bad("solver.tol", f"must be positive, got {self.solver.tol!r}")
        if not isinstance(self.solver.max_iters, int) or self.solver.max_iters < 1:
            bad("solver.max_iters", f"must be a positive integer, got {self.solver.max_iters!r}")
        unknown = set(self.expect) - {"violation"}
        if unknown:
            bad("expect", f"unknown keys {sorted(unknown)}")

    @classmethod
    def from_dict(cls, data: dict) -> ExperimentConfig:
        if not isinstance(data, dict):
            raise ConfigError("config: top level must be a JSON object")
        allowed = {f for f in cls.__dataclass_fields__}
        extra = set(data) - allowed
        if extra:
            raise ConfigError(f"{sorted(extra)[0]}: unknown config field")
        data = dict(data)
        for key in ("generator", "k"):
            if key not in data:
                raise ConfigError(f"{key}: required field missing")
        try:
            data["scales"] = ScaleSpec(**data.get("scales", {}))
        except TypeError as exc:
            raise ConfigError(f"scales: {exc}") from None
        try:
            data["solver"] = SolverSpec(**data.get("solver", {}))
        except TypeError as exc:
            raise ConfigError(f"solver: {exc}") from None
        try:
            return cls(**data)
        except TypeError as exc:
            raise ConfigError(f"config: wrong value type ({exc})") from None

    @classmethod
    def from_json(cls, text: str, source: str = "<config>") -> ExperimentConfig:
        try:
            data = json.loads(text)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{source}:{exc.lineno}:{exc.colno}: {exc.msg}") from None
        return cls.from_dict(data)

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"


def preset_names() -> list:
    return sorted(p.name[:-5] for p in resources.files("harnack_lab.presets").iterdir()
                  if p.name.endswith(".json"))


def load_config(name: str) -> ExperimentConfig:
    """Read a config from a path, or from a bundled preset by name."""
    path = Path(name)
    if path.is_file():
        return ExperimentConfig.from_json(path.read_text(), str(path))
    if name in preset_names():
        text = resources.files("harnack_lab.presets").joinpath(f"{name}.json").read_text()
        return ExperimentConfig.from_json(text, f"preset {name}")
    raise ConfigError(f"config: no such file or preset {name!r} "
                      f"(presets: {', '.join(preset_names())})")


def make_pair(gen: dict) -> ManufacturedPair:
    """Instantiate the generator block of a config."""
    params = {k: v for k, v in gen.items() if k != "name"}
    name = gen["name"]
    try:
        if name == "conformal":
            return conformal_pair_2d(fields.exact_number(params.get("eps", 0.1)),
                                     int(params.get("power", 2)))
        n = int(params.get("n", 2))
        g = fields.parse(str(params.get("g", 0)), n)
        if name == "manufactured_flattened":
            return manufactured_flattened(GraphDomain(n, g), str(params["Q"]))
        return synthetic_pair(str(params["quotient"]), n, g)
    except KeyError as exc:
        raise ConfigError(f"generator.{exc.args[0]}: required parameter missing") from None
    except (ValueError, TypeError, SyntaxError) as exc:
        raise ConfigError(f"generator: {exc}") from None


@dataclass
class Level:
    """Fields of one grid level."""

    grid: Grid
    u: GridField
    v: GridField
    q: GridField


class Experiment:
    """A configured run: one solve per grid level, measured on the finest."""

    def __init__(self, config: ExperimentConfig):
        self.config = config
        self.pair = make_pair(config.generator)
        self.op_y, self.u_y, self.v_y, self.q_y = self.pair.flattened()
        self._levels = {}

    def level(self, N: int) -> Level:
        if N not in self._levels:
            grid = Grid(self.pair.n, N, self.pair.domain)
            if self.pair.synthetic:
                # no PDE behind a synthetic pair: sample the planted fields
                u = GridField(grid, grid.node_values(self.u_y))
                v = GridField(grid, grid.node_values(self.v_y))
            else:
                s = self.config.solver
                kw = dict(mode=s.mode, tol=s.tol, max_iters=s.max_iters)
                u = solve_dirichlet(self.op_y, grid, 0, self.u_y, **kw)
                v = solve_dirichlet(self.op_y, grid, self.op_y.f, self.v_y, **kw)
            self._levels[N] = Level(grid, u, v, quotient_field(u, v))
        return self._levels[N]

    def convergence(self) -> dict:
        Ns = sorted(self.config.grids)
        if self.pair.synthetic or len(Ns) < 2:
            return {}
        return {
            "u": convergence_study(lambda N: max_error(self.level(N).u, self.u_y), Ns),
            "v": convergence_study(lambda N: max_error(self.level(N).v, self.v_y), Ns),
            "q": convergence_study(
                lambda N: quotient_max_error(self.level(N).q, self.pair.quotient_exact), Ns),
        }

    def decay(self):
        cfg = self.config
        Ns = sorted(cfg.grids)
        fine = self.level(Ns[-1])
        if not self.pair.synthetic and Ns[-1] // 2 in Ns and Ns[-1] % 2 == 0:
            coarse = self.level(Ns[-1] // 2)
            samples = Samples.from_grid(fine.u, fine.v,
                                        richardson_error(fine.u, coarse.u),
                                        richardson_error(fine.v, coarse.v))
        elif not self.pair.synthetic:
            samples = Samples.from_grid(fine.u, fine.v, self.u_y, self.v_y)
        else:
            samples = Samples.from_grid(fine.u, fine.v)
        u_taylor = taylor_coefficients(self.pair.u_exact, cfg.k, self.pair.n)
        system = build_system(self.pair.op, u_taylor, k=cfg.k)
        report = decay_profile(
            samples, system, cfg.scales.radii(), cfg.alpha, quotient=fine.q,
            quotient_exact=None if self.pair.synthetic else self.pair.quotient_exact,
            holder_pairs=cfg.holder_pairs, seed=cfg.seed)
        report.u_at_half = self.pair.u_at_half()
        report.meta.update({
            "generator": dict(cfg.generator),
            "grid_N": Ns[-1],
            "smallness_delta": self.pair.smallness(cfg.k, seed=cfg.seed),
            "synthetic": self.pair.synthetic,
        })
        return report

    def holder_by_level(self) -> dict:
        cfg = self.config
        Ns = sorted(cfg.grids)[-2:]
        return {N: holder_estimate(self.level(N).q, cfg.k, cfg.alpha,
                                   pairs=cfg.holder_pairs, seed=cfg.seed) for N in Ns}


def _check(label: str, ok: bool, detail: str) -> tuple:
    return label, bool(ok), detail


def assess(exp: Experiment, report, conv: dict, holders: dict) -> list:
    """PASS/FAIL lines for every property the run asserts."""
    checks = []
    violation = report.violation
    holder_values = list(holders.values())
    drift = (abs(holder_values[1] - holder_values[0]) / abs(holder_values[0])
             if len(holder_values) == 2 and holder_values[0] else float("nan"))
    expected = exp.config.expect.get("violation", exp.pair.synthetic)
    if expected:
        flagged = violation or not drift < HOLDER_DRIFT_LIMIT
        checks.append(_check("violation flagged", flagged,
                             f"violation={violation}, holder drift={drift:.3g}"))
        return checks
    expo = "exact" if report.status == "exact quotient" else (
        f"{report.fitted_exponent:.3f}" if report.fitted_exponent is not None else report.status)
    checks.append(_check("decay exponent", report.exponent_ok,
                         f"fitted {expo} vs required >= {report.target_exponent - 0.1:.2f}"))
    checks.append(_check("ratio bound", report.ratio_bounded,
                         f"spread {report.ratio_spread:.3f} <= 3"))
    checks.append(_check("drift bound", report.drift_bounded,
                         f"spread {report.drift_spread:.3f} <= 3"))
    checks.append(_check("no violation", not violation, f"violation={violation}"))
    if len(holder_values) == 2:
        checks.append(_check("holder stable", drift < HOLDER_DRIFT_LIMIT,
                             f"relative change {drift:.3g} < {HOLDER_DRIFT_LIMIT}"))
    for key in ("u", "v"):
        if key in conv:
            c = conv[key]
            ok = c.exact or ORDER_WINDOW[0] <= c.order <= ORDER_WINDOW[1]
            checks.append(_check(f"solver order {key}", ok, f"order {c.label}"))
    if "q" in conv:
        c = conv["q"]
        checks.append(_check("quotient order", c.exact or c.order >= QUOTIENT_ORDER_MIN,
                             f"order {c.label} >= {QUOTIENT_ORDER_MIN}"))
    return checks


def _summary(name: str, checks: list) -> str:
    lines = [f"{'PASS' if ok else 'FAIL'} {name}: {label} ({detail})" for label, ok, detail in checks]
    return "\n".join(lines) + "\n"


def _convergence_csv(conv: dict) -> str:
    if not conv:
        return "field,N,h,error\n"
    lines = ["field,N,h,error"]
    for key, c in conv.items():
        lines += [f"{key},{N},{h:.17g},{e:.17g}" for N, h, e in zip(c.N, c.h, c.errors)]
    for key, c in conv.items():
        lines.append(f"# order {key},{c.label}")
    return "\n".join(lines) + "\n"


def _write(out: Path, name: str, text: str) -> None:
    out.mkdir(parents=True, exist_ok=True)
    (out / name).write_text(text)


def cmd_run(config: ExperimentConfig, out: Path, timestamp: bool = True) -> int:
    exp = Experiment(config)
    conv = exp.convergence()
    report = exp.decay()
    holders = exp.holder_by_level()
    report.meta["holder_by_N"] = {str(N): h for N, h in holders.items()}
    checks = assess(exp, report, conv, holders)
    summary = _summary(config.name, checks)
    _write(out, "config.resolved.json", config.to_json())
    _write(out, "report.json", report.to_json(timestamp))
    _write(out, "report.csv", report.to_csv())
    _write(out, "plot.csv", report.plot_csv())
    _write(out, "convergence.csv", _convergence_csv(conv))
    _write(out, "summary.txt", summary)
    sys.stdout.write(summary)
    return EXIT_PASS if all(ok for _, ok, _ in checks) else EXIT_FAIL


def cmd_convergence(config: ExperimentConfig, out: Path) -> int:
    exp = Experiment(config)
    if exp.pair.synthetic:
        raise ConfigError("generator: a synthetic pair has no discrete problem to converge")
    conv = exp.convergence()
    checks = []
    for key in ("u", "v"):
        c = conv[key]
        checks.append(_check(f"solver order {key}",
                             c.exact or ORDER_WINDOW[0] <= c.order <= ORDER_WINDOW[1],
                             f"order {c.label}"))
    summary = _summary(config.name, checks)
    _write(out, "config.resolved.json", config.to_json())
    _write(out, "convergence.csv", _convergence_csv(conv))
    _write(out, "summary.txt", summary)
    sys.stdout.write(summary)
    return EXIT_PASS if all(ok for _, ok, _ in checks) else EXIT_FAIL


def cmd_dump_system(k: int, n: int, generator: str | None, targets: bool = False) -> str:
    if not 1 <= k <= 6 or not 1 <= n <= 3:
        raise ConfigError(f"dump-system: need 1 <= k <= 6 and n <= 3, got k={k}, n={n}")
    if generator in (None, "flat"):
        return flat_system(k, n).format(targets)
    pair = make_pair(load_config(generator).generator)
    if pair.n != n:
        raise ConfigError(f"--n: generator {generator!r} lives in dimension {pair.n}")
    system = build_system(pair.op, taylor_coefficients(pair.u_exact, k, n), k=k)
    return system.format(targets)


def _common_options(parser, default) -> None:
    parser.add_argument("--threads", type=int, default=default,
                        help=f"BLAS thread count (env {ENV_THREADS}); 1 is deterministic")
    parser.add_argument("--output", default=default,
                        help=f"output directory (env {ENV_OUTPUT}); overrides the config")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="harnack-lab", description=__doc__.splitlines()[0])
    _common_options(parser, None)
    # the same options after the subcommand; SUPPRESS keeps the global value otherwise
    common = argparse.ArgumentParser(add_help=False)
    _common_options(common, argparse.SUPPRESS)
    sub = parser.add_subparsers(dest="command", required=True)
    p = sub.add_parser("run", parents=[common], help="run an experiment and write its report bundle")
    p.add_argument("config", help="config path or preset name")
    p.add_argument("--no-timestamp", action="store_true", help="omit the created field")
    p = sub.add_parser("convergence", parents=[common], help="grid convergence study only")
    p.add_argument("config", help="config path or preset name")
    p = sub.add_parser("dump-system", parents=[common],
                       help="print the approximating-polynomial system")
    p.add_argument("--k", type=int, required=True)
    p.add_argument("--n", type=int, required=True)
    p.add_argument("--generator", default=None, help="'flat' (default), a preset or a config path")
    p.add_argument("--targets", action="store_true", help="show right-hand sides")
    sub.add_parser("presets", parents=[common], help="list bundled presets")
    return parser


def _output_dir(args, config: ExperimentConfig) -> Path:
    if args.output:
        config.output_dir = args.output
    elif os.environ.get(ENV_OUTPUT):
        config.output_dir = os.environ[ENV_OUTPUT]
    return Path(config.output_dir)


def _threads(args) -> int | None:
    if args.threads is not None:
        return args.threads
    env = os.environ.get(ENV_THREADS)
    if env:
        try:
            return int(env)
        except ValueError:
            raise ConfigError(f"{ENV_THREADS}: not an integer: {env!r}") from None
    return None


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_PASS if exc.code == 0 else EXIT_USAGE
    try:
        threads = _threads(args)
        if threads is not None and threads < 1:
            raise ConfigError(f"--threads: must be >= 1, got {threads}")
        from threadpoolctl import threadpool_limits

        with threadpool_limits(limits=threads):
            return _dispatch(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (SolverError, QuotientError, RankDeficiencyError, np.linalg.LinAlgError) as exc:
        print(f"solver failure: {exc}", file=sys.stderr)
        return EXIT_SOLVER


def _dispatch(args) -> int:
    if args.command == "presets":
        print("\n".join(preset_names()))
        return EXIT_PASS
    if args.command == "dump-system":
        sys.stdout.write(cmd_dump_system(args.k, args.n, args.generator, args.targets))
        return EXIT_PASS
    config = load_config(args.config)
    out = _output_dir(args, config)
    if args.command == "run":
        return cmd_run(config, out, timestamp=not args.no_timestamp)
    return cmd_convergence(config, out)


if __name__ == "__main__":
    sys.exit(main())
