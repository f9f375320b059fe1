"""Confidence sets for a constant additive effect by test inversion.

For each candidate effect ``tau`` the observed outcomes are shifted to
``Y - tau * D(Z)`` and two one-sided randomization tests are run on the
shifted data under the sharp null of no remaining effect.  ``tau`` is kept
when both one-sided p-values exceed ``(1 - level) / 2``.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np

from .assignment import AssignmentModel, ObservedData, as_generator
from .conditioning import Partition
from .engine import (
    EXACT,
    MONTE_CARLO,
    LARGE,
    SMALL,
    StatContext,
    Statistic,
    _draw_from_cell,
    _exact_p,
)
from .errors import ConfigurationError, EnumerationError
from .hypothesis import ExposureMap

DEFAULT_GRID_POINTS = 201
DEFAULT_GRID_HALF_WIDTH = 5.0
# the default grid doubles its half-width until both ends are rejected
MAX_GRID_DOUBLINGS = 12


@dataclass(frozen=True)
class InversionResult:
    grid: np.ndarray
    p_lower: np.ndarray
    p_upper: np.ndarray
    interval: tuple[float, float] | None
    level: float
    estimate: float
    contiguous: bool = True
    monotone_violations: list[int] = field(default_factory=list)
    truncated: bool = False

    @property
    def alpha_each(self) -> float:
        return (1.0 - self.level) / 2.0

    @property
    def retained(self) -> np.ndarray:
        a = self.alpha_each
        return (self.p_lower > a) & (self.p_upper > a)

    def table(self) -> list[dict]:
        keep = self.retained
        return [
            {"tau": float(t), "p_lower": float(lo), "p_upper": float(up), "retained": bool(k)}
            for t, lo, up, k in zip(self.grid, self.p_lower, self.p_upper, keep)
        ]


class _Candidates:
    """Candidate assignments for one cell with their weights.

    Exact mode: every cell member with its probability.  Monte-Carlo mode:
    ``B`` draws reused for every grid point, so the p-value profile is a
    deterministic function of the seed.
    """

    def __init__(self, model, partition, z_obs, mode, resamples, seed):
        z_obs = np.asarray(z_obs, dtype=model.dtype)
        self.cell = partition.cell_of(z_obs)
        if mode == EXACT:
            if not model.enumerable:
                raise EnumerationError(f"{model.name} cannot be enumerated; use mode='monte-carlo'")
            members = partition.members(self.cell)
            self.rows = model.assignments[members]
            self.probs = model.probabilities[members]
            self.weights = self.probs / self.probs.sum()
            self.obs_pos = int(np.flatnonzero(members == model.index(z_obs))[0])
        elif mode == MONTE_CARLO:
            if resamples is None or resamples < 0:
                raise ConfigurationError("Monte-Carlo inversion needs a non-negative resample count")
            draws, _ = _draw_from_cell(model, partition, z_obs, as_generator(seed), resamples)
            self.rows = np.vstack([z_obs[None, :], draws])
            self.weights = None
            self.obs_pos = 0
        else:
            raise ConfigurationError(f"unknown mode {mode!r}")
        self.mode = mode

    def p_values(self, stats: np.ndarray) -> tuple[float, float]:
        """(P(T* >= T_obs), P(T* <= T_obs)) with ties counted."""
        obs = stats[self.obs_pos]
        if self.weights is not None:
            # same arithmetic as the engine so the two paths agree exactly
            return _exact_p(stats, obs, self.probs, LARGE), _exact_p(stats, obs, self.probs, SMALL)
        ge = stats >= obs
        le = stats <= obs
        n = len(stats) - 1
        # the observed row is always counted once: add-one estimator
        return (int(ge.sum())) / (n + 1), (int(le.sum())) / (n + 1)

    def spread(self, stats: np.ndarray) -> float:
        if self.weights is None:
            return float(np.std(stats[1:])) if len(stats) > 1 else 0.0
        mean = float(self.weights @ stats)
        return float(np.sqrt(max(self.weights @ (stats - mean) ** 2, 0.0)))


def _check_grid(grid) -> np.ndarray:
    grid = np.asarray(grid, dtype=float)
    if grid.ndim != 1 or grid.size < 3:
        raise ConfigurationError("grid needs at least 3 points")
    if not np.all(np.isfinite(grid)):
        raise ConfigurationError("grid values must be finite")
    if np.any(np.diff(grid) <= 0):
        raise ConfigurationError("grid must be strictly increasing")
    return grid


def invert_constant_effect(
    model: AssignmentModel,
    partition: Partition,
    exposure: ExposureMap,
    statistic: Statistic,
    observed: ObservedData,
    grid=None,
    level: float = 0.9,
    mode: str = EXACT,
    seed=0,
    resamples: int | None = None,
) -> InversionResult:
    """Invert two one-sided tests over a grid of constant effects.

    ``statistic`` should be effect-signed (larger when the exposed do
    better); its orientation attribute is ignored because both tails are
    evaluated.  ``p_lower`` tests against larger effects (small ``tau`` are
    rejected), ``p_upper`` against smaller ones.

    Without ``grid``, 201 points are centred on the estimate with a
    half-width of five randomization SDs, doubled until both ends are
    rejected.
    """
    if not 0.0 < level < 1.0:
        raise ConfigurationError(f"level must lie in (0, 1); got {level}")
    cand = _Candidates(model, partition, observed.assignment, mode, resamples, seed)
    rows = cand.rows
    n = observed.n_units
    mask = np.ones(n, dtype=bool)
    ctx = StatContext(cand.cell, observed, observed.covariates)
    d_obs = exposure(observed.assignment).astype(float)
    y = np.asarray(observed.outcomes, dtype=float)

    def stats_at(values):
        return statistic.evaluate_many(rows, values, mask, ctx)

    base = stats_at(y)
    estimate = float(base[cand.obs_pos])
    slope = stats_at(d_obs) if statistic.linear else None

    def profile(grid):
        p_lower = np.empty(grid.size)
        p_upper = np.empty(grid.size)
        for j, tau in enumerate(grid):
            shifted = base - tau * slope if slope is not None else stats_at(y - tau * d_obs)
            p_lower[j], p_upper[j] = cand.p_values(shifted)
        return p_lower, p_upper

    a = (1.0 - level) / 2.0
    if grid is None:
        # the spread of the statistic understates the interval width when
        # candidate exposures resemble the observed one, so widen as needed
        half = DEFAULT_GRID_HALF_WIDTH * (cand.spread(base) or 1.0)
        for _ in range(MAX_GRID_DOUBLINGS + 1):
            grid = np.linspace(estimate - half, estimate + half, DEFAULT_GRID_POINTS)
            p_lower, p_upper = profile(grid)
            keep = (p_lower > a) & (p_upper > a)
            if not (keep[0] or keep[-1]):
                break
            half *= 2.0
    else:
        grid = _check_grid(grid)
        p_lower, p_upper = profile(grid)

    keep = (p_lower > a) & (p_upper > a)
    truncated = bool(keep[0] or keep[-1])
    if truncated:
        warnings.warn("the retained set reaches the end of the grid; the interval may be cut short", stacklevel=2)
    idx = np.flatnonzero(keep)
    if idx.size == 0:
        interval = None
        contiguous = True
        warnings.warn("no effect on the grid is retained; widen the grid or check the data", stacklevel=2)
    else:
        interval = (float(grid[idx[0]]), float(grid[idx[-1]]))
        contiguous = bool(idx[-1] - idx[0] + 1 == idx.size)
        if not contiguous:
            warnings.warn(
                "retained effects are not contiguous on the grid; the interval is their hull",
                stacklevel=2,
            )
    violations = [int(j) for j in np.flatnonzero(np.diff(p_upper) > 0) + 1]
    return InversionResult(
        grid=grid,
        p_lower=p_lower,
        p_upper=p_upper,
        interval=interval,
        level=level,
        estimate=estimate,
        contiguous=contiguous,
        monotone_violations=violations,
        truncated=truncated,
    )


