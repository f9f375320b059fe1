"""Stepped-wedge trials: synthetic data, CSV I/O and permutation schemes.

Clusters (wards) cross from control to treatment one per period in a
random order.  Period 0 is all control; the cluster in position ``k`` of
the order is treated from period ``k + 1`` on.  A patient is exposed when
their cluster has crossed over by their period.

Besides the randomization test that permutes the crossover order, the
module runs quasi-randomization tests that also (or instead) permute the
patients' periods and/or clusters.  Those are justified only if the
permuted variables are exchangeable.
"""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .assignment import as_generator
from .engine import LARGE, MONTE_CARLO, PValueReport, extreme_mask
from .errors import ConfigurationError, DataError
from .hypothesis import ExposureMap, stepped_wedge_exposure
from .statistics import T1_SPEC, T2_SPEC, T3_SPEC, DesignMatrixSpec, least_squares

CSV_HEADER = ("unit_id", "cluster", "period", "treatment", "outcome")
CROSSOVER, TIME, WARD = "crossover", "time", "ward"
QUASI_SCHEMES = (
    "crossover",
    "time",
    "ward",
    "time+ward",
    "crossover+time",
    "crossover+ward",
    "crossover+time+ward",
)
SW_STATISTICS = {"T1": T1_SPEC, "diff_in_means": T1_SPEC, "T2": T2_SPEC, "T3": T3_SPEC}


@dataclass(frozen=True)
class SteppedWedgeData:
    """Patient-level records; clusters are coded ``0..C-1``."""

    unit_id: np.ndarray
    cluster: np.ndarray
    period: np.ndarray
    treatment: np.ndarray
    outcome: np.ndarray
    cluster_labels: tuple = ()

    def __post_init__(self):
        n = len(self.outcome)
        for name in ("unit_id", "cluster", "period", "treatment"):
            if len(getattr(self, name)) != n:
                raise DataError(f"column {name} has {len(getattr(self, name))} rows, expected {n}")
        if not self.cluster_labels:
            object.__setattr__(self, "cluster_labels", tuple(range(self.n_clusters)))

    @property
    def n_units(self) -> int:
        return len(self.outcome)

    @property
    def n_clusters(self) -> int:
        return int(self.cluster.max()) + 1 if len(self.cluster) else 0

    @property
    def n_periods(self) -> int:
        return int(self.period.max()) + 1 if len(self.period) else 0

    @property
    def meta(self) -> dict[str, np.ndarray]:
        return {"cluster": self.cluster, "period": self.period}

    def exposure_map(self) -> ExposureMap:
        n_periods = max(self.n_periods, self.n_clusters + 1)
        return stepped_wedge_exposure(self.n_clusters, n_periods, self.cluster, self.period)


def simulate_stepped_wedge(
    n_wards: int = 6,
    n_periods: int | None = None,
    patients_per_cell: int = 10,
    tau: float = 0.0,
    trend: float = 0.0,
    seed=0,
    ward_sd: float = 0.5,
    noise_sd: float = 1.0,
) -> tuple[SteppedWedgeData, np.ndarray]:
    """Synthetic trial: outcome = ward effect + trend * period + tau * exposure + noise.

    Returns the data and the true crossover order.
    """
    if n_wards < 2:
        raise ConfigurationError("need at least two wards")
    n_periods = n_wards + 1 if n_periods is None else int(n_periods)
    if n_periods < 2:
        raise ConfigurationError("need at least two periods")
    if patients_per_cell < 1:
        raise ConfigurationError("need at least one patient per ward and period")
    # the crossover order gets its own stream so it is independent of the outcome draws
    design_rng, rng = as_generator(seed).spawn(2)
    order = design_rng.permutation(n_wards)
    cells = np.array([(w, t) for w in range(n_wards) for t in range(n_periods)])
    cells = np.repeat(cells, patients_per_cell, axis=0)
    cluster, period = cells[:, 0], cells[:, 1]
    exposure = stepped_wedge_exposure(n_wards, max(n_periods, n_wards + 1), cluster, period)
    d = exposure(order)
    ward_effect = rng.normal(0.0, ward_sd, n_wards)
    y = ward_effect[cluster] + trend * period + tau * d + rng.normal(0.0, noise_sd, len(cluster))
    data = SteppedWedgeData(np.arange(len(y)), cluster, period, d, y)
    return data, order


def write_csv(data: SteppedWedgeData, dest) -> None:
    """Write ``data`` with the fixed header; ``dest`` is a path or text stream."""
    own = not hasattr(dest, "write")
    fh = open(dest, "w", newline="", encoding="utf-8") if own else dest
    try:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(CSV_HEADER)
        for i in range(data.n_units):
            w.writerow(
                [
                    int(data.unit_id[i]),
                    data.cluster_labels[int(data.cluster[i])],
                    int(data.period[i]),
                    int(data.treatment[i]),
                    repr(float(data.outcome[i])),
                ]
            )
    finally:
        if own:
            fh.close()


def read_csv(source) -> SteppedWedgeData:
    """Parse the fixed CSV schema; errors name the offending line."""
    if isinstance(source, (str, Path)):
        text = Path(source).read_text(encoding="utf-8")
    else:
        text = source.read()
    reader = csv.reader(io.StringIO(text))
    try:
        header = next(reader)
    except StopIteration:
        raise DataError("line 1: empty file, expected header " + ",".join(CSV_HEADER)) from None
    if tuple(h.strip() for h in header) != CSV_HEADER:
        raise DataError(f"line 1: header must be {','.join(CSV_HEADER)}; got {','.join(header)}")
    ids, raw_clusters, periods, treat, outcomes = [], [], [], [], []
    for lineno, row in enumerate(reader, start=2):
        if not row or all(not c.strip() for c in row):
            continue
        if len(row) != len(CSV_HEADER):
            raise DataError(f"line {lineno}: expected {len(CSV_HEADER)} fields, got {len(row)}")
        uid, cl, per, tr, out = (c.strip() for c in row)
        try:
            ids.append(int(uid))
        except ValueError:
            raise DataError(f"line {lineno}: unit_id {uid!r} is not an integer") from None
        if not cl:
            raise DataError(f"line {lineno}: empty cluster")
        raw_clusters.append(cl)
        try:
            p = int(per)
        except ValueError:
            raise DataError(f"line {lineno}: period {per!r} is not an integer") from None
        if p < 0:
            raise DataError(f"line {lineno}: period {p} is negative")
        periods.append(p)
        if tr not in ("0", "1"):
            raise DataError(f"line {lineno}: treatment must be 0 or 1; got {tr!r}")
        treat.append(int(tr))
        try:
            v = float(out)
        except ValueError:
            raise DataError(f"line {lineno}: outcome {out!r} is not a number") from None
        if not math.isfinite(v):
            raise DataError(f"line {lineno}: outcome {out!r} is not finite")
        outcomes.append(v)
    if not ids:
        raise DataError("no data rows after the header")
    if len(set(ids)) != len(ids):
        seen = set()
        for k, u in enumerate(ids):
            if u in seen:
                raise DataError(f"line {k + 2}: duplicate unit_id {u}")
            seen.add(u)
    labels = sorted(set(raw_clusters), key=_label_key)
    code = {lab: k for k, lab in enumerate(labels)}
    return SteppedWedgeData(
        np.array(ids, dtype=np.int64),
        np.array([code[c] for c in raw_clusters], dtype=np.int64),
        np.array(periods, dtype=np.int64),
        np.array(treat, dtype=np.int64),
        np.array(outcomes, dtype=float),
        tuple(labels),
    )


def _label_key(s: str):
    try:
        return (0, int(s), "")
    except ValueError:
        return (1, 0, s)


def infer_crossover_order(data: SteppedWedgeData) -> np.ndarray:
    """Crossover order consistent with the observed treatment column.

    Each cluster's crossover period is its first treated period; at most
    one cluster may stay untreated throughout (it takes the last position).
    """
    n_c = data.n_clusters
    first = np.full(n_c, -1)
    for c in range(n_c):
        rows = data.cluster == c
        treated = data.period[rows & (data.treatment == 1)]
        if treated.size:
            first[c] = int(treated.min())
    if (first == 0).any():
        c = int(np.flatnonzero(first == 0)[0])
        raise DataError(f"cluster {data.cluster_labels[c]} is treated in period 0, which is all control")
    never = np.flatnonzero(first < 0)
    if never.size > 1:
        raise DataError(f"clusters {[data.cluster_labels[c] for c in never]} are never treated; at most one may be")
    pos = first - 1
    if never.size == 1:
        pos[never[0]] = n_c - 1
    if sorted(pos.tolist()) != list(range(n_c)):
        raise DataError("crossover periods are not one cluster per period starting at period 1")
    order = np.empty(n_c, dtype=np.int64)
    order[pos] = np.arange(n_c)
    expected = data.exposure_map()(order)
    bad = np.flatnonzero(expected != data.treatment)
    if bad.size:
        i = int(bad[0])
        raise DataError(
            f"unit {int(data.unit_id[i])}: treatment {int(data.treatment[i])} contradicts the "
            "stepped-wedge schedule implied by the data"
        )
    return order


def _exposure_from(order, cluster, period):
    position = np.empty(len(order), dtype=np.int64)
    position[np.asarray(order)] = np.arange(len(order))
    return (period >= position[cluster] + 1).astype(float)


def sw_statistic(name: str, d, y, cluster, period) -> float:
    """Exposure coefficient for ``T1``/``T2``/``T3`` on one (possibly permuted) dataset."""
    if name not in SW_STATISTICS:
        raise ConfigurationError(f"unknown stepped-wedge statistic {name!r}; choose from {sorted(SW_STATISTICS)}")
    spec: DesignMatrixSpec = SW_STATISTICS[name]
    units = np.arange(len(y))
    X, names = spec.matrix(d, {"cluster": cluster, "period": period}, units)
    return float(least_squares(X, y, names)[names.index("exposure")])


def parse_scheme(scheme: str) -> frozenset[str]:
    parts = frozenset(p.strip() for p in scheme.split("+"))
    if not parts or not parts <= {CROSSOVER, TIME, WARD}:
        raise ConfigurationError(f"unknown permutation scheme {scheme!r}; choose from {list(QUASI_SCHEMES)}")
    return parts


def quasi_permutation_test(
    data: SteppedWedgeData,
    scheme: str,
    statistic: str = "T2",
    resamples: int = 999,
    seed=0,
    orientation: str = LARGE,
    order=None,
) -> PValueReport:
    """Monte-Carlo permutation test permuting the variables named in ``scheme``.

    ``time`` shuffles patients' periods, ``ward`` shuffles patients'
    clusters, ``crossover`` shuffles the crossover order.  Exposure and the
    statistic are recomputed on each permuted dataset; outcomes stay put.
    """
    parts = parse_scheme(scheme)
    order = infer_crossover_order(data) if order is None else np.asarray(order)
    y = data.outcome
    obs = sw_statistic(statistic, _exposure_from(order, data.cluster, data.period), y, data.cluster, data.period)
    rng = as_generator(seed)
    stats = np.empty(resamples)
    for b in range(resamples):
        o = rng.permutation(order) if CROSSOVER in parts else order
        per = rng.permutation(data.period) if TIME in parts else data.period
        cl = rng.permutation(data.cluster) if WARD in parts else data.cluster
        stats[b] = sw_statistic(statistic, _exposure_from(o, cl, per), y, cl, per)
    k = int(extreme_mask(stats, obs, orientation).sum())
    return PValueReport(
        p=(1 + k) / (resamples + 1),
        cell=scheme,
        cell_size=None,
        mode=MONTE_CARLO,
        seed=seed if not isinstance(seed, np.random.Generator) else None,
        observed_stat=obs,
        resamples=resamples,
        statistic=statistic,
        n_units_used=data.n_units,
        distribution=stats,
    )
