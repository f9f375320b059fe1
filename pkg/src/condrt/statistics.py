"""Built-in test statistics and a name registry for configs.

Every built-in comes as a plain function of ``(z, outcomes, ...)`` and as a
factory returning an engine :class:`Statistic` with a vectorized batch path.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Mapping, Sequence

import numpy as np

from .engine import LARGE, SMALL, StatContext, Statistic
from .errors import CollinearityError, ConfigurationError, DegenerateStatisticError, RegistrationError
from .hypothesis import ExposureMap, PartialOutcomes

INTERCEPT = "intercept"
EXPOSURE = "exposure"
CLUSTER = "factor(cluster)"
PERIOD = "factor(period)"
TERMS = (INTERCEPT, EXPOSURE, CLUSTER, PERIOD)
# relative tolerance for declaring a column linearly dependent
RANK_TOL = 1e-10

_DEGENERATE_HINT = (
    "condition on a partition that fixes group sizes (e.g. order statistics) "
    "so every candidate has both groups"
)


def _guard(outcomes) -> PartialOutcomes:
    return outcomes if isinstance(outcomes, PartialOutcomes) else PartialOutcomes(outcomes)


def diff_in_means(z, outcomes, exposure: ExposureMap) -> float:
    """Mean defined outcome among exposed units minus mean among unexposed."""
    y = _guard(outcomes)
    idx = y.indices
    d = exposure(z)[idx]
    vals = y[idx]
    n1 = int((d == 1).sum())
    n0 = int((d == 0).sum())
    if n1 == 0 or n0 == 0:
        raise DegenerateStatisticError(
            f"exposure group empty at z*={np.asarray(z).tolist()} (exposed={n1}, control={n0}); "
            + _DEGENERATE_HINT
        )
    return float(vals[d == 1].mean() - vals[d == 0].mean())


@dataclass(frozen=True)
class DesignMatrixSpec:
    """Columns of a regression whose exposure coefficient is the statistic.

    ``columns`` draws from ``intercept``, ``exposure``, ``factor(cluster)``
    and ``factor(period)``.  Factors are one-hot with the first level seen
    (in unit order) dropped.
    """

    columns: tuple[str, ...] = (INTERCEPT, EXPOSURE)

    def __post_init__(self):
        cols = tuple(self.columns)
        object.__setattr__(self, "columns", cols)
        unknown = [c for c in cols if c not in TERMS]
        if unknown:
            raise ConfigurationError(f"unknown design terms {unknown}; choose from {list(TERMS)}")
        if cols.count(EXPOSURE) != 1:
            raise ConfigurationError("design must contain the exposure column exactly once")
        if len(set(cols)) != len(cols):
            raise ConfigurationError(f"duplicate design terms in {list(cols)}")

    def _blocks(self, d, meta, units):
        blocks, names = [], []
        for term in self.columns:
            if term == INTERCEPT:
                blocks.append(np.ones((len(units), 1)))
                names.append(INTERCEPT)
            elif term == EXPOSURE:
                if d is not None:
                    blocks.append(np.asarray(d, dtype=float)[:, None])
                    names.append(EXPOSURE)
            else:
                key = "cluster" if term == CLUSTER else "period"
                if meta is None or key not in meta:
                    raise ConfigurationError(f"design term {term} needs unit metadata '{key}'")
                labels = np.asarray(meta[key])[units]
                _, first = np.unique(labels, return_index=True)
                levels = labels[np.sort(first)]
                for lev in levels[1:]:
                    blocks.append((labels == lev).astype(float)[:, None])
                    names.append(f"{key}[{lev}]")
        X = np.hstack(blocks) if blocks else np.empty((len(units), 0))
        return X, names

    def controls(self, meta, units) -> tuple[np.ndarray, list[str]]:
        """Non-exposure columns restricted to ``units``, with their names."""
        return self._blocks(None, meta, np.asarray(units))

    def matrix(self, d, meta, units) -> tuple[np.ndarray, list[str]]:
        """Full design for exposure vector ``d`` (already restricted to ``units``)."""
        return self._blocks(d, meta, np.asarray(units))


T1_SPEC = DesignMatrixSpec((INTERCEPT, EXPOSURE))
T2_SPEC = DesignMatrixSpec((INTERCEPT, EXPOSURE, CLUSTER))
T3_SPEC = DesignMatrixSpec((INTERCEPT, EXPOSURE, CLUSTER, PERIOD))


def _dependent_columns(X: np.ndarray, names: list[str]) -> list[str]:
    """Columns that add nothing to the rank of the ones before them."""
    bad, kept = [], np.empty((X.shape[0], 0))
    scale = max(1.0, float(np.abs(X).max(initial=0.0)))
    for j, name in enumerate(names):
        trial = np.hstack([kept, X[:, j : j + 1]])
        if np.linalg.matrix_rank(trial, tol=RANK_TOL * scale * max(X.shape)) > kept.shape[1]:
            kept = trial
        else:
            bad.append(name)
    return bad


def least_squares(X: np.ndarray, y: np.ndarray, names: list[str]) -> np.ndarray:
    """Least-squares coefficients via QR; raises on rank deficiency."""
    if X.shape[0] < X.shape[1]:
        raise CollinearityError(
            f"{X.shape[0]} observations for {X.shape[1]} columns", columns=names[X.shape[0] :]
        )
    Q, R = np.linalg.qr(X)
    diag = np.abs(np.diag(R))
    if diag.size and diag.min() <= RANK_TOL * max(1.0, diag.max()) * max(X.shape):
        bad = _dependent_columns(X, names)
        raise CollinearityError(f"design matrix is rank deficient; dependent columns: {bad}", columns=bad)
    return np.linalg.solve(R, Q.T @ y)


def ols_exposure_coeff(z, outcomes, spec: DesignMatrixSpec, meta, exposure: ExposureMap) -> float:
    """Exposure coefficient of the least-squares fit on units with defined outcomes."""
    y = _guard(outcomes)
    idx = y.indices
    d = exposure(z)[idx]
    X, names = spec.matrix(d, meta, idx)
    beta = least_squares(X, y[idx], names)
    return float(beta[names.index(EXPOSURE)])


def treated_mean(z, outcomes, exposure: ExposureMap) -> float:
    y = _guard(outcomes)
    idx = y.indices
    d = exposure(z)[idx]
    if not (d == 1).any():
        raise DegenerateStatisticError(f"no exposed unit at z*={np.asarray(z).tolist()}; " + _DEGENERATE_HINT)
    return float(y[idx][d == 1].mean())


# -- engine statistics --------------------------------------------------------


def _group_means(rows, values, mask, exposure):
    d = exposure.matrix(rows)[:, mask]
    y = values[:, mask]
    n1 = (d == 1).sum(axis=1)
    n0 = (d == 0).sum(axis=1)
    empty = (n1 == 0) | (n0 == 0)
    if empty.any():
        k = int(np.flatnonzero(empty)[0])
        raise DegenerateStatisticError(
            f"exposure group empty at z*={np.asarray(rows[k]).tolist()} "
            f"(exposed={n1[k]}, control={n0[k]}); " + _DEGENERATE_HINT
        )
    s1 = np.where(d == 1, y, 0.0).sum(axis=1)
    s0 = np.where(d == 0, y, 0.0).sum(axis=1)
    return s1 / n1, s0 / n0


def difference_in_means(exposure: ExposureMap, orientation: str = LARGE) -> Statistic:
    """Exposed-minus-control mean difference; large values are extreme by default."""

    def batch(rows, values, mask, ctx):
        m1, m0 = _group_means(rows, values, mask, exposure)
        return m1 - m0

    return Statistic(
        lambda z, y, ctx: diff_in_means(z, y, exposure),
        orientation,
        "diff_in_means",
        batch,
        linear=True,
    )


def treated_mean_statistic(exposure: ExposureMap, orientation: str = LARGE) -> Statistic:
    def batch(rows, values, mask, ctx):
        d = exposure.matrix(rows)[:, mask]
        n1 = (d == 1).sum(axis=1)
        if (n1 == 0).any():
            k = int(np.flatnonzero(n1 == 0)[0])
            raise DegenerateStatisticError(f"no exposed unit at z*={rows[k].tolist()}; " + _DEGENERATE_HINT)
        return np.where(d == 1, values[:, mask], 0.0).sum(axis=1) / n1

    return Statistic(lambda z, y, ctx: treated_mean(z, y, exposure), orientation, "treated_mean", batch, linear=True)


def exposure_regression(
    exposure: ExposureMap,
    meta: Mapping[str, Sequence[int]] | None,
    terms: Sequence[str] | DesignMatrixSpec = T2_SPEC,
    orientation: str = LARGE,
    name: str | None = None,
) -> Statistic:
    """OLS exposure coefficient, vectorized over candidates.

    The non-exposure columns do not depend on the candidate assignment, so
    they are projected out once and each candidate costs one residualized
    inner product.
    """
    spec = terms if isinstance(terms, DesignMatrixSpec) else DesignMatrixSpec(tuple(terms))
    cache: dict[bytes, tuple[np.ndarray, list[str]]] = {}

    def projector(mask):
        key = np.packbits(mask).tobytes() + mask.size.to_bytes(8, "little")
        if key not in cache:
            units = np.flatnonzero(mask)
            C, names = spec.controls(meta, units)
            if C.shape[1]:
                bad = _dependent_columns(C, names)
                if bad:
                    raise CollinearityError(f"control columns are rank deficient: {bad}", columns=bad)
                Q, _ = np.linalg.qr(C)
            else:
                Q = C
            cache[key] = (Q, names)
        return cache[key]

    def batch(rows, values, mask, ctx):
        Q, names = projector(mask)
        d = exposure.matrix(rows)[:, mask].astype(float)
        y = values[:, mask]
        d_res = d - (d @ Q) @ Q.T
        y_res = y - (y @ Q) @ Q.T
        ss = np.einsum("ij,ij->i", d_res, d_res)
        scale = np.maximum(np.einsum("ij,ij->i", d, d), 1.0)
        flat = ss <= RANK_TOL * scale * max(d.shape[1], 1)
        if flat.any():
            k = int(np.flatnonzero(flat)[0])
            raise CollinearityError(
                f"exposure is collinear with {names} at z*={np.asarray(rows[k]).tolist()}",
                columns=[EXPOSURE],
            )
        return np.einsum("ij,ij->i", d_res, y_res) / ss

    return Statistic(
        lambda z, y, ctx: ols_exposure_coeff(z, y, spec, meta, exposure),
        orientation,
        name or "ols[" + ",".join(spec.columns) + "]",
        batch,
        linear=True,
    )


# -- registry -----------------------------------------------------------------

Builder = Callable[..., Statistic]
_REGISTRY: dict[str, Builder] = {}


def _register_builder(name: str, builder: Builder) -> None:
    if name in _REGISTRY:
        raise RegistrationError(f"statistic {name!r} is already registered")
    _REGISTRY[name] = builder


def register_statistic(
    name: str,
    fn: Callable[[np.ndarray, PartialOutcomes, StatContext], float],
    orientation: str = SMALL,
) -> Statistic:
    """Register ``fn(z, outcomes, ctx)`` under ``name`` for use from configs.

    ``fn`` always receives guarded partial outcomes, so reading an entry
    that is not imputable raises at evaluation time.
    """
    stat = Statistic(lambda z, y, ctx: fn(z, _guard(y), ctx), orientation, name)
    _register_builder(name, lambda exposure=None, meta=None: stat)
    return stat


def unregister_statistic(name: str) -> None:
    if name not in _REGISTRY:
        raise RegistrationError(f"no statistic named {name!r}")
    del _REGISTRY[name]


def get_statistic(
    name: str,
    *,
    exposure: ExposureMap | None = None,
    meta: Mapping[str, Sequence[int]] | None = None,
    orientation: str | None = None,
) -> Statistic:
    """Look up a statistic by name, binding exposure and metadata for built-ins."""
    if name not in _REGISTRY:
        raise RegistrationError(f"unknown statistic {name!r}; registered: {sorted(_REGISTRY)}")
    stat = _REGISTRY[name](exposure=exposure, meta=meta)
    if orientation is not None and orientation != stat.orientation:
        stat = stat.with_orientation(orientation)
    return stat


def registered_statistics() -> list[str]:
    return sorted(_REGISTRY)


def _needs_exposure(builder):
    def build(exposure=None, meta=None):
        if exposure is None:
            raise ConfigurationError("this statistic needs an exposure map")
        return builder(exposure, meta)

    return build


_register_builder("diff_in_means", _needs_exposure(lambda e, m: difference_in_means(e)))
_register_builder("treated_mean", _needs_exposure(lambda e, m: treated_mean_statistic(e)))
_register_builder("T1", _needs_exposure(lambda e, m: exposure_regression(e, m, T1_SPEC, name="T1")))
_register_builder("T2", _needs_exposure(lambda e, m: exposure_regression(e, m, T2_SPEC, name="T2")))
_register_builder("T3", _needs_exposure(lambda e, m: exposure_regression(e, m, T3_SPEC, name="T3")))
