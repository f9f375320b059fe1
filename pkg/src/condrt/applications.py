"""Turnkey tests built on the engine: Fisher's exact test, permutation tests
of independence, conditional-independence tests with a known treatment law,
and full conformal prediction (optionally weighted for covariate shift).
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass
from fractions import Fraction
from typing import Callable, Sequence

import numpy as np

from .assignment import ObservedData, as_generator, build_uniform_permutations
from .conditioning import partition_by_order_statistics
from .engine import LARGE, MONTE_CARLO, EXACT, SMALL, PValueReport, Statistic, exact_p_value, extreme_mask
from .errors import ConfigurationError, DataError, PositivityError
from .hypothesis import fisher_sharp_null

# Exact permutation enumeration is used up to this many units.
MAX_EXACT_PERMUTATION = 8
CONFORMAL_GRID_POINTS = 513


# -- Fisher's exact test ------------------------------------------------------


@dataclass(frozen=True)
class TwoByTwoTable:
    """Counts ``n_zy`` of units with treatment ``z`` and binary outcome ``y``."""

    n00: int
    n01: int
    n10: int
    n11: int

    def __post_init__(self):
        for name in ("n00", "n01", "n10", "n11"):
            v = getattr(self, name)
            if int(v) != v or v < 0:
                raise DataError(f"{name} must be a non-negative integer; got {v}")
            object.__setattr__(self, name, int(v))

    @classmethod
    def from_data(cls, z, y) -> TwoByTwoTable:
        z = np.asarray(z)
        y = np.asarray(y)
        if z.shape != y.shape:
            raise DataError("z and y must have the same length")
        if not (np.isin(z, (0, 1)).all() and np.isin(y, (0, 1)).all()):
            raise DataError("z and y must be binary")
        return cls(
            int(((z == 0) & (y == 0)).sum()),
            int(((z == 0) & (y == 1)).sum()),
            int(((z == 1) & (y == 0)).sum()),
            int(((z == 1) & (y == 1)).sum()),
        )

    def to_data(self) -> tuple[np.ndarray, np.ndarray]:
        """Unit-level ``(z, y)`` vectors realizing the table, ordered by cell."""
        z = np.repeat([0, 0, 1, 1], [self.n00, self.n01, self.n10, self.n11])
        y = np.repeat([0, 1, 0, 1], [self.n00, self.n01, self.n10, self.n11])
        return z, y

    @property
    def n(self) -> int:
        return self.n00 + self.n01 + self.n10 + self.n11

    @property
    def row_totals(self) -> tuple[int, int]:
        return self.n00 + self.n01, self.n10 + self.n11

    @property
    def col_totals(self) -> tuple[int, int]:
        return self.n00 + self.n10, self.n01 + self.n11

    def with_n11(self, n11: int) -> TwoByTwoTable:
        """The table with the same margins and the given ``n11``."""
        (r0, r1), (c0, c1) = self.row_totals, self.col_totals
        return TwoByTwoTable(r0 - (c1 - n11), c1 - n11, r1 - n11, n11)

    def n11_range(self) -> range:
        (r0, r1), (c0, c1) = self.row_totals, self.col_totals
        return range(max(0, c1 - r0), min(r1, c1) + 1)


def table_probability(table: TwoByTwoTable, form: int = 1) -> Fraction:
    """Hypergeometric probability of ``table`` given its margins, exactly.

    ``form`` selects one of three algebraically equal expressions: the
    factorial ratio, choosing treated units' outcomes, or choosing positive
    outcomes' treatments.
    """
    t = table
    (r0, r1), (c0, c1) = t.row_totals, t.col_totals
    f = math.factorial
    if form == 1:
        num = f(r0) * f(r1) * f(c0) * f(c1)
        den = f(t.n00) * f(t.n01) * f(t.n10) * f(t.n11) * f(t.n)
        return Fraction(num, den)
    if form == 2:
        return Fraction(math.comb(r1, t.n11) * math.comb(r0, t.n01), math.comb(t.n, c1))
    if form == 3:
        return Fraction(math.comb(c1, t.n11) * math.comb(c0, t.n10), math.comb(t.n, r1))
    raise ValueError("form must be 1, 2 or 3")


def fisher_exact(table: TwoByTwoTable, side: str = "greater") -> float:
    """Fisher's exact p-value conditional on both margins.

    ``greater`` sums tables with ``n11`` at least the observed value,
    ``less`` at most.  ``two-sided`` sums all tables whose probability does
    not exceed the observed one.
    """
    if not isinstance(table, TwoByTwoTable):
        table = TwoByTwoTable(*table)
    probs = {k: table_probability(table.with_n11(k)) for k in table.n11_range()}
    obs = table.n11
    if side == "greater":
        p = sum(v for k, v in probs.items() if k >= obs)
    elif side == "less":
        p = sum(v for k, v in probs.items() if k <= obs)
    elif side == "two-sided":
        p = sum(v for v in probs.values() if v <= probs[obs])
    else:
        raise ConfigurationError(f"side must be 'greater', 'less' or 'two-sided'; got {side!r}")
    return float(p)


# -- permutation tests --------------------------------------------------------


def correlation(z, y) -> float:
    """Pearson correlation, 0 when either vector is constant."""
    z = np.asarray(z, dtype=float)
    y = np.asarray(y, dtype=float)
    zc = z - z.mean()
    yc = y - y.mean()
    den = math.sqrt(float(zc @ zc) * float(yc @ yc))
    return 0.0 if den == 0.0 else float(zc @ yc) / den


def abs_correlation(z, y, x=None) -> float:
    return abs(correlation(z, y))


def _batched_abs_corr(Z: np.ndarray, y: np.ndarray) -> np.ndarray:
    Zc = Z - Z.mean(axis=1, keepdims=True)
    yc = y - y.mean()
    # row-wise reductions, not a mat-vec product: identical rows must give
    # bit-identical values or exact ties get broken by BLAS blocking
    den = np.sqrt((Zc * Zc).sum(axis=1) * float((yc * yc).sum()))
    num = np.abs((Zc * yc[None, :]).sum(axis=1))
    with np.errstate(invalid="ignore", divide="ignore"):
        out = np.where(den == 0, 0.0, num / np.where(den == 0, 1.0, den))
    return out


def _resolve(statistic, orientation):
    if statistic is None:
        return abs_correlation, orientation or LARGE, True
    return statistic, orientation or SMALL, False


def independence_permutation_test(
    z,
    y,
    statistic: Callable[[np.ndarray, np.ndarray], float] | None = None,
    *,
    orientation: str | None = None,
    resamples: int | None = None,
    exact: bool | None = None,
    seed=0,
) -> PValueReport:
    """Permutation test of independence between ``z`` and ``y``.

    ``statistic(z, y)`` defaults to the absolute correlation with large
    values extreme; a user statistic defaults to small values extreme.  The
    p-value averages over all ``N!`` reorderings of ``z`` when ``N <= 8``
    (or ``exact=True``) and uses ``resamples`` random reorderings otherwise.
    """
    z = np.asarray(z)
    y = np.asarray(y, dtype=float)
    if z.shape != y.shape or z.ndim != 1:
        raise DataError("z and y must be vectors of equal length")
    n = len(z)
    fn, orientation, builtin = _resolve(statistic, orientation)
    if exact is None:
        exact = n <= MAX_EXACT_PERMUTATION and resamples is None
    obs = fn(z, y)

    if exact:
        perms = np.array(list(itertools.permutations(range(n))), dtype=np.int64).reshape(-1, n)
        Zs = z[perms]
        if builtin:
            stats = _batched_abs_corr(Zs.astype(float), y)
        else:
            stats = np.array([fn(zp, y) for zp in Zs])
        # the first permutation is the identity
        obs = stats[0]
        k = int(extreme_mask(stats, obs, orientation).sum())
        return PValueReport(
            p=k / len(perms),
            cell="order-statistics",
            cell_size=len(perms),
            mode=EXACT,
            seed=None,
            observed_stat=float(obs),
            statistic=getattr(fn, "__name__", "statistic"),
            distribution=stats,
        )
    if resamples is None:
        raise ConfigurationError("Monte-Carlo permutation test needs a resample count")
    rng = as_generator(seed)
    Zs = np.stack([rng.permutation(z) for _ in range(resamples)]) if resamples else np.empty((0, n))
    if builtin:
        stats = _batched_abs_corr(Zs.astype(float), y)
        obs = float(_batched_abs_corr(z[None, :].astype(float), y)[0])
    else:
        stats = np.array([fn(zp, y) for zp in Zs])
    k = int(extreme_mask(stats, obs, orientation).sum())
    return PValueReport(
        p=(1 + k) / (resamples + 1),
        cell="order-statistics",
        cell_size=math.factorial(n) if n <= 20 else None,
        mode=MONTE_CARLO,
        seed=seed if not isinstance(seed, np.random.Generator) else None,
        observed_stat=float(obs),
        resamples=resamples,
        statistic=getattr(fn, "__name__", "statistic"),
        distribution=stats,
    )


def independence_engine_p_value(z, y, statistic=None, orientation: str | None = None) -> PValueReport:
    """The same test run through the generic engine.

    The assignment is a uniformly random reordering ``g`` of the units, the
    treatment seen by the statistic is ``z[g]``, outcomes are taken to be
    unaffected by the ordering, and the test conditions on the order
    statistics of the treatment.
    """
    z = np.asarray(z)
    y = np.asarray(y, dtype=float)
    n = len(z)
    fn, orientation, builtin = _resolve(statistic, orientation)
    model = build_uniform_permutations(n)
    stat = Statistic(lambda g, out, ctx: fn(z[np.asarray(g, dtype=np.int64)], out.to_numpy()), orientation, "permuted")
    if builtin:

        def batch(rows, values, mask, ctx):
            return _batched_abs_corr(z[rows.astype(np.int64)].astype(float), values[0])

        stat = Statistic(stat.fn, orientation, "permuted", batch)
    observed = ObservedData(np.arange(n), y)
    return exact_p_value(model, partition_by_order_statistics(model), fisher_sharp_null(n), stat, observed)


def _pairwise_swaps(z, logq, rng, steps):
    """Swap-chain moves reversible for the product law given the order statistics."""
    z = z.copy()
    n = len(z)
    rows = np.arange(n)
    for _ in range(steps):
        order = rng.permutation(n)
        i, j = order[0 : n - n % 2 : 2], order[1 : n - n % 2 : 2]
        keep = logq[rows[i], z[i]] + logq[rows[j], z[j]]
        swap = logq[rows[i], z[j]] + logq[rows[j], z[i]]
        accept = rng.random(len(i)) < 1.0 / (1.0 + np.exp(keep - swap))
        zi = z[i].copy()
        z[i[accept]] = z[j[accept]]
        z[j[accept]] = zi[accept]
    return z


def cond_independence_test(
    z,
    y,
    x,
    conditional_law: Callable[[np.ndarray], Sequence[float]],
    *,
    labels: Sequence = (0, 1),
    statistic: Callable | None = None,
    orientation: str | None = None,
    resamples: int = 999,
    seed=0,
    order_statistics: bool = False,
    steps: int = 50,
) -> PValueReport:
    """Test ``Y`` independent of ``Z`` given ``X`` when the law of ``Z | X`` is known.

    ``conditional_law(x_row)`` returns probabilities over ``labels``.
    Without conditioning each ``Z*_i`` is redrawn from its own law.  With
    ``order_statistics=True`` candidates are rearrangements of the observed
    labels drawn with a pairwise-swap Markov chain run from a common hub
    state, which makes the observed and resampled assignments exchangeable.
    ``statistic(z, y, x)`` defaults to the absolute correlation of ``z`` and
    ``y`` with large values extreme.
    """
    z_raw = np.asarray(z)
    y = np.asarray(y, dtype=float)
    x = np.asarray(x)
    labels = list(labels)
    n = len(z_raw)
    if len(y) != n or len(x) != n:
        raise DataError("z, y and x must have the same number of rows")
    lut = {lab: k for k, lab in enumerate(labels)}
    try:
        codes = np.array([lut[v] for v in z_raw.tolist()], dtype=np.int64)
    except KeyError as exc:
        raise DataError(f"treatment label {exc.args[0]!r} not among {labels}") from None
    probs = np.array([np.asarray(conditional_law(row), dtype=float) for row in x])
    if probs.shape != (n, len(labels)):
        raise DataError(f"conditional law must return {len(labels)} probabilities per row")
    if (probs < 0).any() or not np.allclose(probs.sum(axis=1), 1.0):
        raise DataError("conditional law rows must be probability vectors")
    label_arr = np.asarray(labels)

    if statistic is None:
        fn, orientation = abs_correlation, orientation or LARGE
    else:
        fn, orientation = statistic, orientation or SMALL

    rng = as_generator(seed)
    if order_statistics:
        with np.errstate(divide="ignore"):
            logq = np.log(probs)
        hub = _pairwise_swaps(codes, logq, rng, steps)
        draws = np.stack([_pairwise_swaps(hub, logq, rng, steps) for _ in range(resamples)]) if resamples else np.empty((0, n), dtype=np.int64)
    else:
        cdf = np.cumsum(probs, axis=1)
        u = rng.random((resamples, n))
        draws = np.minimum((u[:, :, None] > cdf[None, :, :]).sum(axis=2), len(labels) - 1)

    obs = fn(z_raw, y, x)
    stats = np.array([fn(label_arr[d], y, x) for d in draws])
    k = int(extreme_mask(stats, obs, orientation).sum())
    return PValueReport(
        p=(1 + k) / (resamples + 1),
        cell="order-statistics" if order_statistics else "all",
        cell_size=None,
        mode=MONTE_CARLO,
        seed=seed if not isinstance(seed, np.random.Generator) else None,
        observed_stat=float(obs),
        resamples=resamples,
        statistic=getattr(fn, "__name__", "statistic"),
        distribution=stats,
    )


# -- conformal prediction -----------------------------------------------------


class LeastSquaresScore:
    """Absolute residuals of an OLS fit (with intercept) on all rows.

    The fit treats its rows symmetrically, so residuals permute with the rows.
    """

    def __call__(self, X, y) -> np.ndarray:
        A = self._design(X)
        beta, *_ = np.linalg.lstsq(A, y, rcond=None)
        return np.abs(y - A @ beta)

    @staticmethod
    def _design(X):
        X = np.asarray(X, dtype=float)
        if X.ndim == 1:
            X = X[:, None]
        return np.hstack([np.ones((len(X), 1)), X])

    def residuals_grid(self, X, y_obs, candidates) -> np.ndarray:
        """Residuals for every candidate at once: ``(n_candidates, N)``.

        Fitted values are linear in the response, so the residual vector at
        candidate ``c`` is ``r0 + c * r1``.
        """
        A = self._design(X)
        H = A @ np.linalg.pinv(A)
        base = np.append(np.asarray(y_obs, dtype=float), 0.0)
        e = np.zeros(len(base))
        e[-1] = 1.0
        r0 = base - H @ base
        r1 = e - H @ e
        return np.abs(r0[None, :] + np.asarray(candidates, dtype=float)[:, None] * r1[None, :])


@dataclass
class ConformalProblem:
    """``N`` covariate rows, responses for the first ``N - 1``, and a score.

    ``pi1``/``pi2`` are the covariate densities of the training and test
    points; supplying both enables the covariate-shift weights.
    """

    x: np.ndarray
    y: np.ndarray
    score: Callable[[np.ndarray, np.ndarray], np.ndarray] = LeastSquaresScore()
    pi1: Callable[[np.ndarray], np.ndarray] | None = None
    pi2: Callable[[np.ndarray], np.ndarray] | None = None

    def __post_init__(self):
        self.x = np.asarray(self.x, dtype=float)
        self.y = np.asarray(self.y, dtype=float)
        if len(self.x) != len(self.y) + 1:
            raise DataError("x needs exactly one more row than y (the test point)")

    @property
    def n(self) -> int:
        return len(self.x)


def _rank_p(resid: np.ndarray, weights: np.ndarray | None) -> np.ndarray:
    """Rows of residuals -> p-values, ties at the candidate counted in its favour."""
    resid = np.atleast_2d(resid)
    last = resid[:, -1:]
    # tolerate rounding in refitted residuals that are equal in exact arithmetic
    tol = 1e-12 * np.maximum(np.abs(resid).max(axis=1, keepdims=True), 1.0)
    hit = resid >= last - tol
    if weights is None:
        return hit.sum(axis=1) / resid.shape[1]
    return np.minimum((hit * weights[None, :]).sum(axis=1), 1.0)


def weighted_conformal_weights(problem: ConformalProblem) -> np.ndarray:
    """Normalized density ratios ``pi2 / pi1`` at every row."""
    if problem.pi1 is None or problem.pi2 is None:
        return np.full(problem.n, 1.0 / problem.n)
    p1 = np.asarray(problem.pi1(problem.x), dtype=float).reshape(-1)
    p2 = np.asarray(problem.pi2(problem.x), dtype=float).reshape(-1)
    if (p1 <= 0).any():
        raise PositivityError(f"reference density is not positive at row {int(np.flatnonzero(p1 <= 0)[0])}")
    if (p2 < 0).any():
        raise PositivityError("target density is negative")
    r = p2 / p1
    total = r.sum()
    if total <= 0:
        raise PositivityError("target density vanishes at every row")
    return r / total


def conformal_p_value(problem: ConformalProblem, y_candidate: float, weighted: bool = False) -> float:
    """Full conformal p-value of ``y_candidate`` for the test point."""
    resid = np.asarray(problem.score(problem.x, np.append(problem.y, y_candidate)), dtype=float)
    w = weighted_conformal_weights(problem) if weighted else None
    return float(_rank_p(resid, w)[0])


def conformal_p_values(problem: ConformalProblem, candidates, weighted: bool = False) -> np.ndarray:
    candidates = np.asarray(candidates, dtype=float)
    if hasattr(problem.score, "residuals_grid"):
        resid = problem.score.residuals_grid(problem.x, problem.y, candidates)
    else:
        resid = np.stack([problem.score(problem.x, np.append(problem.y, c)) for c in candidates])
    w = weighted_conformal_weights(problem) if weighted else None
    return _rank_p(resid, w)


def conformal_grid(problem: ConformalProblem, points: int = CONFORMAL_GRID_POINTS) -> np.ndarray:
    """Candidates spanning the observed response range widened by 3 SDs."""
    sd = float(np.std(problem.y)) if len(problem.y) > 1 else 1.0
    sd = sd if sd > 0 else 1.0
    return np.linspace(problem.y.min() - 3 * sd, problem.y.max() + 3 * sd, points)


@dataclass(frozen=True)
class PredictionSet:
    grid: np.ndarray
    p_values: np.ndarray
    alpha: float

    @property
    def accepted(self) -> np.ndarray:
        return self.grid[self.p_values > self.alpha]

    @property
    def interval(self) -> tuple[float, float] | None:
        acc = self.accepted
        return (float(acc.min()), float(acc.max())) if acc.size else None

    def contains(self, y: float) -> bool:
        lo_hi = self.interval
        return lo_hi is not None and lo_hi[0] <= y <= lo_hi[1]


def prediction_set(
    problem: ConformalProblem,
    alpha: float = 0.1,
    grid=None,
    points: int = CONFORMAL_GRID_POINTS,
    weighted: bool = False,
) -> PredictionSet:
    """Candidates whose conformal p-value exceeds ``alpha``."""
    if not 0 < alpha < 1:
        raise ConfigurationError("alpha must lie in (0, 1)")
    grid = conformal_grid(problem, points) if grid is None else np.asarray(grid, dtype=float)
    return PredictionSet(grid, conformal_p_values(problem, grid, weighted), alpha)
