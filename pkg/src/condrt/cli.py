"""Command-line front end.

Subcommands: ``test``, ``invert``, ``simulate-sw``, ``quasi``, ``fisher``
and ``conformal``.  Study settings come from a JSON config file; ``--seed``,
``--mode`` and ``--resamples`` override it.  Reports are JSON with sorted
keys so identical inputs give byte-identical output.

Example config::

    {"design": "crossover", "null": "sharp", "conditioning": "none",
     "statistic": {"name": "T2", "orientation": "large"},
     "mode": "exact", "seed": 1, "level": 0.9}
"""

from __future__ import annotations

import argparse
import hashlib
import json
import sys
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import __version__
from .applications import ConformalProblem, TwoByTwoTable, fisher_exact, prediction_set
from .assignment import (
    ObservedData,
    build_bernoulli,
    build_complete_randomization,
    build_crossover_orders,
    restrict,
)
from .conditioning import (
    biclique_decomposition,
    build_null_exposure_graph,
    count_treated,
    partition_by_focal_units,
    partition_by_function,
    partition_by_order_statistics,
    partition_from_bicliques,
    whole_space,
)
from .engine import EXACT, LARGE, MONTE_CARLO, SMALL, PValueReport, exact_p_value, mc_p_value
from .errors import ConfigurationError, DataError
from .hypothesis import constant_effect_null, fisher_sharp_null, spillover_null, treatment_exposure
from .inference import invert_constant_effect
from .statistics import get_statistic
from .stepped_wedge import (
    QUASI_SCHEMES,
    SteppedWedgeData,
    infer_crossover_order,
    parse_scheme,
    quasi_permutation_test,
    read_csv,
    simulate_stepped_wedge,
    write_csv,
)

SCHEMA = 1
DISTRIBUTION_CAP = 10_000
DESIGNS = ("complete", "bernoulli", "crossover", "restricted")
NULLS = ("sharp", "constant_effect", "spillover")
CONDITIONINGS = ("none", "function", "order_stats", "focal", "biclique")
FUNCTIONS = {"count_treated": count_treated}
QUASI_BANNER = (
    "QUASI-RANDOMIZATION: variables other than the crossover order were permuted; "
    "validity assumes those variables are exchangeable across patients"
)


@dataclass
class StudyConfig:
    design: str = "crossover"
    null: str = "sharp"
    tau: float = 0.0
    conditioning: str = "none"
    function: str | None = None
    focal: list[int] = field(default_factory=list)
    min_units: int = 0
    statistic: str = "T2"
    orientation: str = LARGE
    mode: str = EXACT
    resamples: int = 999
    seed: int = 0
    level: float = 0.9
    prob: float = 0.5
    balance: str = "cluster"
    threshold: float | None = None
    grid: dict | None = None
    permute: str = "crossover"

    @classmethod
    def from_dict(cls, raw: dict) -> StudyConfig:
        raw = dict(raw)
        cfg = cls()
        known = set(asdict(cfg))
        null = raw.pop("null", cfg.null)
        if isinstance(null, dict):
            if set(null) != {"constant_effect"}:
                raise ConfigurationError(f"null must be one of {list(NULLS)}; got {null}")
            cfg.null, cfg.tau = "constant_effect", float(null["constant_effect"])
        else:
            cfg.null = null
        cond = raw.pop("conditioning", cfg.conditioning)
        if isinstance(cond, dict):
            if len(cond) != 1:
                raise ConfigurationError(f"conditioning must name one scheme; got {cond}")
            (kind, arg), = cond.items()
            cfg.conditioning = kind
            if kind == "function":
                cfg.function = arg
            elif kind == "focal":
                cfg.focal = [int(u) for u in arg]
            elif kind == "biclique":
                cfg.min_units = int((arg or {}).get("min_units", 0)) if isinstance(arg, dict) else int(arg or 0)
        else:
            cfg.conditioning = cond
        stat = raw.pop("statistic", None)
        if isinstance(stat, dict):
            cfg.statistic = stat.get("name", cfg.statistic)
            cfg.orientation = stat.get("orientation", cfg.orientation)
        elif stat is not None:
            cfg.statistic = stat
        mode = raw.pop("mode", cfg.mode)
        if isinstance(mode, dict):
            if set(mode) != {"mc"}:
                raise ConfigurationError(f"mode must be 'exact' or {{'mc': B}}; got {mode}")
            cfg.mode, cfg.resamples = MONTE_CARLO, int(mode["mc"])
        else:
            cfg.mode = _mode_name(mode)
        for key, value in raw.items():
            if key not in known:
                raise ConfigurationError(f"unknown config key {key!r}")
            setattr(cfg, key, value)
        cfg.validate()
        return cfg

    def validate(self) -> None:
        if self.design not in DESIGNS:
            raise ConfigurationError(f"design must be one of {list(DESIGNS)}; got {self.design!r}")
        if self.null not in NULLS:
            raise ConfigurationError(f"null must be one of {list(NULLS)}; got {self.null!r}")
        if self.conditioning not in CONDITIONINGS:
            raise ConfigurationError(f"conditioning must be one of {list(CONDITIONINGS)}; got {self.conditioning!r}")
        if self.conditioning == "function" and self.function not in FUNCTIONS:
            raise ConfigurationError(f"conditioning function must be one of {sorted(FUNCTIONS)}; got {self.function!r}")
        if self.conditioning == "focal" and not self.focal:
            raise ConfigurationError("focal conditioning needs a non-empty unit list")
        if self.orientation not in (SMALL, LARGE):
            raise ConfigurationError(f"orientation must be 'small' or 'large'; got {self.orientation!r}")
        if self.mode == MONTE_CARLO and self.resamples < 0:
            raise ConfigurationError("resamples must be non-negative")
        if not 0 < self.level < 1:
            raise ConfigurationError("level must lie in (0, 1)")
        if not 0 <= int(self.seed) < 2**64:
            raise ConfigurationError("seed must be an unsigned 64-bit integer")
        if self.design == "restricted" and self.threshold is None:
            raise ConfigurationError("restricted design needs a balance threshold")
        parse_scheme(self.permute)

    def digest(self) -> str:
        blob = json.dumps(asdict(self), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()


def _mode_name(mode: str) -> str:
    if mode in (EXACT,):
        return EXACT
    if mode in ("mc", MONTE_CARLO):
        return MONTE_CARLO
    raise ConfigurationError(f"mode must be 'exact' or 'mc'; got {mode!r}")


def load_config(path, args=None) -> StudyConfig:
    raw = {} if path is None else json.loads(Path(path).read_text(encoding="utf-8"))
    cfg = StudyConfig.from_dict(raw)
    if args is not None:
        if getattr(args, "seed", None) is not None:
            cfg.seed = args.seed
        if getattr(args, "mode", None) is not None:
            cfg.mode = _mode_name(args.mode)
        if getattr(args, "resamples", None) is not None:
            cfg.resamples = args.resamples
        cfg.validate()
    return cfg


# -- study assembly -----------------------------------------------------------


@dataclass
class Study:
    model: object
    exposure: object
    observed: ObservedData
    partition: object
    null: object
    statistic: object


def _balance_fn(data: SteppedWedgeData, column: str):
    if column not in ("cluster", "period"):
        raise ConfigurationError("balance covariate must be 'cluster' or 'period'")
    x = getattr(data, column).astype(float)

    def balance(rows):
        rows = np.asarray(rows, dtype=float)
        n1 = rows.sum(axis=1)
        n0 = rows.shape[1] - n1
        with np.errstate(invalid="ignore", divide="ignore"):
            diff = rows @ x / n1 - (1 - rows) @ x / n0
        return np.where((n1 == 0) | (n0 == 0), np.inf, np.abs(diff))

    return balance


def build_study(data: SteppedWedgeData, cfg: StudyConfig) -> Study:
    n = data.n_units
    if cfg.design == "crossover":
        n_c = data.n_clusters
        model = build_crossover_orders(n_c)
        exposure = data.exposure_map()
        z_obs = infer_crossover_order(data)
    else:
        exposure = treatment_exposure(n)
        z_obs = data.treatment.copy()
        if cfg.design == "complete":
            model = build_complete_randomization(n, int(z_obs.sum()))
        elif cfg.design == "bernoulli":
            model = build_bernoulli(n, cfg.prob, lazy=n > 24)
        else:
            base = build_complete_randomization(n, int(z_obs.sum()))
            model = restrict(base, _balance_fn(data, cfg.balance), cfg.threshold, batched=True)
            if model.enumerable and not model.contains(z_obs):
                raise DataError("observed assignment violates the balance restriction")
    observed = ObservedData(z_obs, data.outcome)

    if cfg.null == "sharp":
        null = fisher_sharp_null(n)
    elif cfg.null == "constant_effect":
        null = constant_effect_null(exposure, cfg.tau)
    else:
        null = spillover_null(exposure)

    if cfg.conditioning == "none":
        partition = whole_space(model)
    elif cfg.conditioning == "function":
        partition = partition_by_function(model, FUNCTIONS[cfg.function](), batched=True)
    elif cfg.conditioning == "order_stats":
        partition = partition_by_order_statistics(model)
    elif cfg.conditioning == "focal":
        partition = partition_by_focal_units(model, exposure, cfg.focal)
    else:
        graph = build_null_exposure_graph(model, exposure)
        partition = partition_from_bicliques(model, biclique_decomposition(graph, cfg.min_units))

    statistic = get_statistic(cfg.statistic, exposure=exposure, meta=data.meta, orientation=cfg.orientation)
    return Study(model, exposure, observed, partition, null, statistic)


# -- reports ------------------------------------------------------------------


def _jsonable(x):
    if isinstance(x, (np.integer,)):
        return int(x)
    if isinstance(x, (np.floating,)):
        return float(x)
    if isinstance(x, np.ndarray):
        return [_jsonable(v) for v in x.tolist()]
    if isinstance(x, bytes):
        return x.hex()
    if isinstance(x, (tuple, list)):
        return [_jsonable(v) for v in x]
    if isinstance(x, dict):
        return {str(k): _jsonable(v) for k, v in x.items()}
    return x


def distribution_sample(report: PValueReport, seed: int) -> list[float]:
    """At most ``DISTRIBUTION_CAP`` draws from the randomization distribution."""
    dist = report.distribution
    if dist is None:
        return []
    w = report.weights
    if len(dist) <= DISTRIBUTION_CAP and w is None:
        return [float(v) for v in dist]
    rng = np.random.default_rng(seed)
    size = min(DISTRIBUTION_CAP, len(dist)) if w is None else DISTRIBUTION_CAP
    idx = rng.choice(len(dist), size=size, replace=w is not None, p=w)
    return [float(v) for v in dist[np.sort(idx)]]


def p_value_report(report: PValueReport, cfg: StudyConfig, label: str) -> dict:
    return {
        "schema": SCHEMA,
        "kind": label,
        "p_value": report.p,
        "cell": _jsonable(report.cell),
        "cell_size": report.cell_size,
        "mode": report.mode,
        "resamples": report.resamples,
        "seed": int(cfg.seed),
        "statistic": report.statistic,
        "orientation": cfg.orientation,
        "observed_stat": report.observed_stat,
        "units_used": report.n_units_used,
        "distribution_sample": distribution_sample(report, int(cfg.seed)),
        "config_hash": cfg.digest(),
        "version": __version__,
    }


def _emit(obj: dict, out) -> str:
    text = json.dumps(obj, sort_keys=True, indent=2) + "\n"
    if out is None or out == "-":
        sys.stdout.write(text)
    else:
        Path(out).write_text(text, encoding="utf-8")
    return text


def run_test(data: SteppedWedgeData, cfg: StudyConfig) -> PValueReport:
    study = build_study(data, cfg)
    if cfg.mode == EXACT:
        return exact_p_value(study.model, study.partition, study.null, study.statistic, study.observed)
    return mc_p_value(
        study.model, study.partition, study.null, study.statistic, study.observed, cfg.resamples, int(cfg.seed)
    )


def cmd_test(data_path, cfg: StudyConfig, out=None) -> dict:
    report = run_test(read_csv(data_path), cfg)
    result = p_value_report(report, cfg, "RANDOMIZATION")
    _emit(result, out)
    return result


def cmd_invert(data_path, cfg: StudyConfig, out=None) -> dict:
    data = read_csv(data_path)
    study = build_study(data, cfg)
    grid = None
    if cfg.grid:
        grid = np.linspace(float(cfg.grid["lo"]), float(cfg.grid["hi"]), int(cfg.grid.get("points", 201)))
    res = invert_constant_effect(
        study.model,
        study.partition,
        study.exposure,
        study.statistic,
        study.observed,
        grid=grid,
        level=cfg.level,
        mode=cfg.mode,
        seed=int(cfg.seed),
        resamples=cfg.resamples if cfg.mode == MONTE_CARLO else None,
    )
    result = {
        "schema": SCHEMA,
        "kind": "INVERSION",
        "level": cfg.level,
        "one_sided_level": res.alpha_each,
        "interval": None if res.interval is None else list(res.interval),
        "contiguous": res.contiguous,
        "truncated": res.truncated,
        "estimate": res.estimate,
        "monotone_violations": res.monotone_violations,
        "table": res.table(),
        "mode": cfg.mode,
        "resamples": cfg.resamples if cfg.mode == MONTE_CARLO else None,
        "seed": int(cfg.seed),
        "statistic": study.statistic.name,
        "config_hash": cfg.digest(),
        "version": __version__,
    }
    _emit(result, out)
    return result


def cmd_simulate_sw(n_wards, n_periods, patients_per_cell, tau, trend, seed, out) -> dict:
    data, order = simulate_stepped_wedge(n_wards, n_periods, patients_per_cell, tau, trend, seed)
    if out is None or out == "-":
        write_csv(data, sys.stdout)
    else:
        write_csv(data, out)
    audit = {"crossover_order": [int(c) for c in order], "seed": int(seed), "n_units": data.n_units}
    sys.stderr.write(json.dumps(audit, sort_keys=True) + "\n")
    return audit


def cmd_quasi(data_path, cfg: StudyConfig, out=None) -> dict:
    if parse_scheme(cfg.permute) == {"crossover"}:
        report = run_test(read_csv(data_path), cfg)
        result = p_value_report(report, cfg, "RANDOMIZATION")
        result["permute"] = cfg.permute
        _emit(result, out)
        return result
    data = read_csv(data_path)
    report = quasi_permutation_test(
        data, cfg.permute, cfg.statistic, cfg.resamples, int(cfg.seed), cfg.orientation
    )
    result = p_value_report(report, cfg, "QUASI")
    result["permute"] = cfg.permute
    result["assumption"] = QUASI_BANNER
    _emit(result, out)
    return result


def cmd_fisher(counts, side, out=None) -> dict:
    table = TwoByTwoTable(*counts)
    result = {
        "schema": SCHEMA,
        "kind": "FISHER",
        "table": {"n00": table.n00, "n01": table.n01, "n10": table.n10, "n11": table.n11},
        "side": side,
        "p_value": fisher_exact(table, side),
        "version": __version__,
    }
    _emit(result, out)
    return result


def cmd_conformal(data_path, alpha, points, out=None) -> dict:
    """Full conformal interval for the row whose ``y`` field is empty."""
    rows = []
    text = Path(data_path).read_text(encoding="utf-8").splitlines()
    if not text or [h.strip() for h in text[0].split(",")][-1] != "y":
        raise DataError("line 1: header must list covariate columns followed by 'y'")
    width = len(text[0].split(","))
    test_row = None
    for lineno, line in enumerate(text[1:], start=2):
        if not line.strip():
            continue
        fields = [f.strip() for f in line.split(",")]
        if len(fields) != width:
            raise DataError(f"line {lineno}: expected {width} fields, got {len(fields)}")
        try:
            x = [float(f) for f in fields[:-1]]
        except ValueError:
            raise DataError(f"line {lineno}: covariates must be numbers") from None
        if fields[-1] == "":
            if test_row is not None:
                raise DataError(f"line {lineno}: only one row may have an empty y")
            test_row = x
            continue
        try:
            rows.append((x, float(fields[-1])))
        except ValueError:
            raise DataError(f"line {lineno}: y {fields[-1]!r} is not a number") from None
    if test_row is None:
        raise DataError("no test row: leave y empty on the row to predict")
    X = np.array([r[0] for r in rows] + [test_row])
    y = np.array([r[1] for r in rows])
    pset = prediction_set(ConformalProblem(X, y), alpha=alpha, points=points)
    result = {
        "schema": SCHEMA,
        "kind": "CONFORMAL",
        "alpha": alpha,
        "grid_points": points,
        "interval": None if pset.interval is None else list(pset.interval),
        "version": __version__,
    }
    _emit(result, out)
    return result


def _common(p: argparse.ArgumentParser, data: bool = True) -> None:
    if data:
        p.add_argument("data", help="CSV with header unit_id,cluster,period,treatment,outcome")
    p.add_argument("--config", help="JSON study config")
    p.add_argument("--seed", type=int, help="override the config seed")
    p.add_argument("--mode", choices=("exact", "mc"), help="override the config mode")
    p.add_argument("--resamples", type=int, help="Monte-Carlo resample count")
    p.add_argument("--out", help="write the report here instead of stdout")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="condrt", description="Conditional randomization tests.")
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    _common(sub.add_parser("test", help="randomization test p-value"))
    _common(sub.add_parser("invert", help="confidence interval for a constant effect"))
    q = sub.add_parser("quasi", help="(quasi-)permutation test of a stepped-wedge trial")
    _common(q)
    q.add_argument("--permute", choices=QUASI_SCHEMES, help="variables to permute")

    s = sub.add_parser("simulate-sw", help="write a synthetic stepped-wedge trial as CSV")
    s.add_argument("--wards", type=int, default=6)
    s.add_argument("--periods", type=int, default=None)
    s.add_argument("--patients", type=int, default=10, help="patients per ward and period")
    s.add_argument("--tau", type=float, default=0.0)
    s.add_argument("--trend", type=float, default=0.0)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", help="CSV path (stdout if omitted)")

    f = sub.add_parser("fisher", help="Fisher's exact test of a 2x2 table")
    f.add_argument("counts", nargs=4, type=int, metavar="N", help="cell counts in the order n00 n01 n10 n11")
    f.add_argument("--side", choices=("greater", "less", "two-sided"), default="greater")
    f.add_argument("--out")

    c = sub.add_parser("conformal", help="full conformal prediction interval")
    c.add_argument("data", help="CSV: covariate columns then y; leave y empty on the test row")
    c.add_argument("--alpha", type=float, default=0.1)
    c.add_argument("--points", type=int, default=513)
    c.add_argument("--out")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        if args.command in ("test", "invert", "quasi"):
            cfg = load_config(args.config, args)
            if args.command == "quasi" and args.permute:
                cfg.permute = args.permute
            {"test": cmd_test, "invert": cmd_invert, "quasi": cmd_quasi}[args.command](args.data, cfg, args.out)
        elif args.command == "simulate-sw":
            cmd_simulate_sw(args.wards, args.periods, args.patients, args.tau, args.trend, args.seed, args.out)
        elif args.command == "fisher":
            cmd_fisher(args.counts, args.side, args.out)
        else:
            cmd_conformal(args.data, args.alpha, args.points, args.out)
    except (ValueError, KeyError, ArithmeticError, RuntimeError, OSError) as exc:
        msg = exc.args[0] if isinstance(exc, KeyError) and exc.args else exc
        sys.stderr.write(f"condrt: error: {msg}\n")
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
