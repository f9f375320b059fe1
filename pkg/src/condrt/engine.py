"""Conditional randomization test p-values.

For an observed assignment ``Z`` in cell ``S`` of a partition, the exact
p-value is the probability, under the assignment density restricted to
``S``, that the statistic at a fresh draw ``Z*`` is at least as extreme as
at ``Z``.  Ties count as extreme.  The default orientation treats small
statistic values as extreme; ``orientation="large"`` flips the comparison.

Imputability is enforced structurally: the statistic only ever receives
outcomes of units that are imputable for *every* pair of assignments in
the cell (the intersection set), wrapped in :class:`PartialOutcomes`.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Callable, Hashable, Sequence

import numpy as np

from .assignment import AssignmentModel, ObservedData, OutcomeSchedule, PROBE_PROPOSALS, as_generator, sample
from .conditioning import ConditioningVariable, Partition, bayes_conditional_density
from .errors import (
    ConfigurationError,
    EnumerationError,
    ImpracticalConditioningError,
    ImputabilityError,
)
from .hypothesis import (
    CONSTANT_EFFECT,
    FULLY_SHARP,
    LEVEL_SET,
    SPILLOVER,
    NullHypothesis,
    PartialOutcomes,
)

SMALL = "small"
LARGE = "large"
EXACT = "exact"
MONTE_CARLO = "monte-carlo"
#: Minimum acceptance rate tolerated by rejection sampling from a cell.
MIN_ACCEPTANCE = 1e-4


@dataclass(frozen=True)
class StatContext:
    """What a statistic may see besides the candidate assignment and outcomes."""

    cell: Hashable
    observed: ObservedData
    covariates: np.ndarray | None = None


@dataclass(frozen=True)
class Statistic:
    """A test statistic ``T(z*, y)`` with its orientation.

    ``fn(z, outcomes, ctx)`` receives :class:`PartialOutcomes`.  An optional
    ``batch(rows, values, mask, ctx)`` evaluates many candidates at once;
    ``values`` then carries NaN for units outside ``mask``.  ``linear``
    declares ``T`` linear in the outcome vector for fixed ``z``, which lets
    test inversion reuse one evaluation across shifts.
    """

    fn: Callable[[np.ndarray, PartialOutcomes, StatContext], float]
    orientation: str = SMALL
    name: str = "statistic"
    batch: Callable | None = field(default=None, compare=False)
    linear: bool = False

    def __post_init__(self):
        if self.orientation not in (SMALL, LARGE):
            raise ConfigurationError(f"orientation must be 'small' or 'large'; got {self.orientation!r}")

    def __call__(self, z, outcomes, ctx: StatContext | None = None) -> float:
        if not isinstance(outcomes, PartialOutcomes):
            outcomes = PartialOutcomes(outcomes)
        return float(self.fn(np.asarray(z), outcomes, ctx))

    def evaluate_many(self, rows, values, mask, ctx: StatContext | None = None) -> np.ndarray:
        rows = np.atleast_2d(np.asarray(rows))
        values = np.asarray(values, dtype=float)
        if values.ndim == 1:
            values = np.broadcast_to(values, (len(rows), len(values)))
        mask = np.asarray(mask, dtype=bool)
        if self.batch is not None:
            guarded = np.where(mask[None, :], values, np.nan)
            out = np.asarray(self.batch(rows, guarded, mask, ctx), dtype=float)
            if np.isnan(out).any():
                k = int(np.flatnonzero(np.isnan(out))[0])
                raise ImputabilityError(
                    f"{self.name} returned NaN for candidate {rows[k].tolist()}; "
                    "it reads outcomes that are not imputable",
                    pair=(None if ctx is None else ctx.observed.assignment, rows[k]),
                )
            return out
        out = np.empty(len(rows))
        for k, z in enumerate(rows):
            try:
                out[k] = self.fn(z, PartialOutcomes(values[k], mask), ctx)
            except ImputabilityError as exc:
                z_obs = None if ctx is None else ctx.observed.assignment
                pair_txt = "" if z_obs is None else f" for pair (z={np.asarray(z_obs).tolist()}, z*={z.tolist()})"
                raise ImputabilityError(f"{exc}{pair_txt}", unit=exc.unit, pair=(z_obs, z.copy())) from None
        return out

    def with_orientation(self, orientation: str) -> Statistic:
        return replace(self, orientation=orientation)

    def negated(self) -> Statistic:
        """``-T`` with the opposite orientation; gives identical p-values."""
        fn, batch = self.fn, self.batch
        return Statistic(
            lambda z, y, ctx: -fn(z, y, ctx),
            LARGE if self.orientation == SMALL else SMALL,
            f"-{self.name}",
            None if batch is None else (lambda rows, v, m, ctx: -np.asarray(batch(rows, v, m, ctx))),
            self.linear,
        )


def statistic(orientation: str = SMALL, name: str | None = None):
    """Decorator turning ``fn(z, outcomes, ctx)`` into a :class:`Statistic`."""

    def wrap(fn):
        return Statistic(fn, orientation, name or fn.__name__)

    return wrap


@dataclass(frozen=True)
class PValueReport:
    """Result of one conditional randomization test."""

    p: float
    cell: Hashable
    cell_size: int | None
    mode: str
    seed: int | None
    observed_stat: float
    resamples: int | None = None
    statistic: str = ""
    n_units_used: int | None = None
    distribution: np.ndarray | None = field(default=None, repr=False, compare=False)
    weights: np.ndarray | None = field(default=None, repr=False, compare=False)

    def __post_init__(self):
        if not 0.0 < self.p <= 1.0:
            raise ValueError(f"p-value {self.p} outside (0, 1]")


def extreme_mask(stats: np.ndarray, observed: float, orientation: str) -> np.ndarray:
    if orientation == SMALL:
        return stats <= observed
    return stats >= observed


def _exact_p(stats, obs, probs, orientation) -> float:
    hit = extreme_mask(stats, obs, orientation)
    if probs.min() == probs.max():
        # uniform cell: count, so that p is exactly k / |S|
        return int(hit.sum()) / len(hit)
    p = float(probs[hit].sum() / probs.sum())
    return min(p, 1.0)


def _cell_of(model: AssignmentModel, partition: Partition, z_obs):
    if not model.enumerable:
        raise EnumerationError(
            f"{model.name} cannot be enumerated; use mc_p_value for a Monte-Carlo p-value"
        )
    if partition.model is not model:
        raise ConfigurationError("partition was built for a different assignment model")
    cell = partition.cell_of(z_obs)
    members = partition.members(cell)
    return cell, members


def _units_for_cell(null: NullHypothesis, rows: np.ndarray) -> np.ndarray:
    return null.intersection(rows)


def _imputed(null: NullHypothesis, observed: ObservedData, rows: np.ndarray, mask: np.ndarray):
    values, defined = null.impute_many(observed, rows)
    if not defined[:, mask].all():
        k, i = np.argwhere(~defined[:, mask])[0]
        unit = int(np.flatnonzero(mask)[i])
        raise ImputabilityError(
            f"null's imputation leaves unit {unit} undefined for candidate {rows[k].tolist()} "
            "although its mapping marks it imputable",
            unit=unit,
            pair=(observed.assignment, rows[k]),
        )
    return values


def exact_p_value(
    model: AssignmentModel,
    partition: Partition,
    null: NullHypothesis,
    statistic: Statistic,
    observed: ObservedData,
) -> PValueReport:
    """Exact CRT p-value by enumerating the observed assignment's cell."""
    cell, members = _cell_of(model, partition, observed.assignment)
    rows = model.assignments[members]
    probs = model.probabilities[members]
    obs_pos = int(np.flatnonzero(members == model.index(observed.assignment))[0])
    mask = _units_for_cell(null, rows)
    values = _imputed(null, observed, rows, mask)
    ctx = StatContext(cell, observed, observed.covariates)
    stats = statistic.evaluate_many(rows, values, mask, ctx)
    obs = stats[obs_pos]
    p = _exact_p(stats, obs, probs, statistic.orientation)
    uniform = np.allclose(probs, probs[0], rtol=0, atol=1e-15)
    return PValueReport(
        p=p,
        cell=cell,
        cell_size=len(members),
        mode=EXACT,
        seed=None,
        observed_stat=float(obs),
        statistic=statistic.name,
        n_units_used=int(mask.sum()),
        distribution=stats,
        weights=None if uniform else probs / probs.sum(),
    )


def _lazy_units(null: NullHypothesis, partition: Partition, observed: ObservedData) -> np.ndarray:
    n = null.n_units
    if null.kind in (FULLY_SHARP, CONSTANT_EFFECT):
        return np.ones(n, dtype=bool)
    if partition.focal is not None and null.kind in (LEVEL_SET, SPILLOVER):
        mask = np.zeros(n, dtype=bool)
        mask[partition.focal] = True
        if null.kind == SPILLOVER:
            mask &= null.exposure(observed.assignment) == 0
        return mask
    raise ConfigurationError(
        f"cannot determine the units imputable across a non-enumerable cell for a {null.kind} null; "
        "use an enumerable model or a focal-unit partition"
    )


def _draw_from_cell(model, partition, z_obs, rng, n_draws):
    if model.enumerable:
        cell = partition.cell_of(z_obs)
        members = partition.members(cell)
        probs = model.probabilities[members]
        picks = rng.choice(len(members), size=n_draws, p=probs / probs.sum())
        return model.assignments[members[picks]], len(members)
    if partition.has_direct_sampler:
        out = np.empty((n_draws, model.length), dtype=model.dtype)
        for b in range(n_draws):
            out[b] = partition.sample_cell(z_obs, rng)
        return out, None
    target = partition.key(z_obs)
    out = np.empty((n_draws, model.length), dtype=model.dtype)
    accepted = proposals = 0
    while accepted < n_draws:
        cand = model.draw(rng)
        proposals += 1
        if partition.key(cand) == target:
            out[accepted] = cand
            accepted += 1
        if proposals >= PROBE_PROPOSALS and accepted / proposals < MIN_ACCEPTANCE:
            raise ImpracticalConditioningError(
                f"rejection sampling accepted {accepted} of {proposals} proposals "
                f"(rate below {MIN_ACCEPTANCE}); use exact mode or a coarser partition"
            )
    return out, None


def mc_p_value(
    model: AssignmentModel,
    partition: Partition,
    null: NullHypothesis,
    statistic: Statistic,
    observed: ObservedData,
    resamples: int,
    seed: int | None = 0,
) -> PValueReport:
    """Monte-Carlo CRT p-value ``(1 + #extreme) / (B + 1)`` from ``B`` cell draws."""
    if resamples < 0:
        raise ConfigurationError("resamples must be non-negative")
    rng = as_generator(seed)
    z_obs = observed.assignment
    cell = partition.cell_of(z_obs)
    if model.enumerable:
        mask = _units_for_cell(null, partition.cell_rows(cell))
    else:
        mask = _lazy_units(null, partition, observed)
    draws, cell_size = _draw_from_cell(model, partition, z_obs, rng, resamples)
    rows = np.vstack([np.asarray(z_obs, dtype=model.dtype)[None, :], draws])
    values = _imputed(null, observed, rows, mask)
    ctx = StatContext(cell, observed, observed.covariates)
    stats = statistic.evaluate_many(rows, values, mask, ctx)
    obs, resampled = stats[0], stats[1:]
    k = int(extreme_mask(resampled, obs, statistic.orientation).sum())
    return PValueReport(
        p=(1 + k) / (resamples + 1),
        cell=cell,
        cell_size=cell_size,
        mode=MONTE_CARLO,
        seed=seed if not isinstance(seed, np.random.Generator) else None,
        observed_stat=float(obs),
        resamples=resamples,
        statistic=statistic.name,
        n_units_used=int(mask.sum()),
        distribution=resampled,
    )


def schedule_p_value(
    model: AssignmentModel,
    partition: Partition,
    null: NullHypothesis,
    statistic: Statistic,
    assignment,
    schedule: OutcomeSchedule,
) -> float:
    """Exact p-value computed from the full potential-outcomes schedule.

    Uses the true outcomes ``schedule(z*)`` of the intersection units
    instead of imputing them; an oracle for computability checks.
    """
    z_obs = np.asarray(assignment)
    cell, members = _cell_of(model, partition, z_obs)
    rows = model.assignments[members]
    probs = model.probabilities[members]
    obs_pos = int(np.flatnonzero(members == model.index(z_obs))[0])
    mask = _units_for_cell(null, rows)
    values = np.stack([schedule(z) for z in rows])
    observed = schedule.observe(z_obs)
    ctx = StatContext(cell, observed, observed.covariates)
    stats = statistic.evaluate_many(rows, values, mask, ctx)
    return _exact_p(stats, stats[obs_pos], probs, statistic.orientation)


def lemma2_equivalence_check(
    model: AssignmentModel,
    partition: Partition,
    null: NullHypothesis,
    statistic: Statistic,
    schedule: OutcomeSchedule,
    seed,
) -> bool:
    """Draw ``Z``; compare the p-value from imputed outcomes with the one from the schedule.

    Equality is guaranteed when the schedule satisfies the null; off the
    null the two may differ.
    """
    z = sample(model, seed)
    observed = schedule.observe(z)
    p_imputed = exact_p_value(model, partition, null, statistic, observed).p
    p_schedule = schedule_p_value(model, partition, null, statistic, z, schedule)
    return p_imputed == p_schedule


def post_randomized_p_value(
    model: AssignmentModel,
    variable: ConditioningVariable,
    null: NullHypothesis,
    statistic_by_g: Statistic | Callable[[Hashable], Statistic],
    observed: ObservedData,
    seed,
    mode: str = EXACT,
    resamples: int | None = None,
) -> PValueReport:
    """CRT conditioning on a post-randomized variable ``G`` drawn from its kernel at ``Z``.

    Candidates follow ``pi(. | G = g)`` from Bayes' formula; the statistic
    may depend on ``g``.
    """
    rng = as_generator(seed)
    z_obs = observed.assignment
    g = variable.draw(z_obs, rng)
    stat = statistic_by_g if isinstance(statistic_by_g, Statistic) else statistic_by_g(g)
    ctx = StatContext(g, observed, observed.covariates)
    seed_out = seed if not isinstance(seed, np.random.Generator) else None
    if model.enumerable:
        dens = bayes_conditional_density(model, variable, g)
        support = np.flatnonzero(dens > 0)
        mask = _units_for_cell(null, model.assignments[support])
    else:
        if null.kind not in (FULLY_SHARP, CONSTANT_EFFECT):
            raise ConfigurationError("post-randomized tests on lazy models need a fully imputable null")
        dens = support = None
        mask = np.ones(null.n_units, dtype=bool)

    if mode == EXACT:
        if dens is None:
            raise EnumerationError(f"{model.name} cannot be enumerated; use mode='monte-carlo'")
        rows = model.assignments[support]
        probs = dens[support]
        values = _imputed(null, observed, rows, mask)
        stats = stat.evaluate_many(rows, values, mask, ctx)
        obs = stats[int(np.flatnonzero(support == model.index(z_obs))[0])]
        return PValueReport(
            p=_exact_p(stats, obs, probs, stat.orientation),
            cell=g,
            cell_size=len(support),
            mode=EXACT,
            seed=seed_out,
            observed_stat=float(obs),
            statistic=stat.name,
            n_units_used=int(mask.sum()),
            distribution=stats,
            weights=probs,
        )
    if mode != MONTE_CARLO:
        raise ConfigurationError(f"unknown mode {mode!r}")
    if resamples is None:
        raise ConfigurationError("Monte-Carlo mode needs a resample count")
    if dens is not None:
        picks = rng.choice(len(support), size=resamples, p=dens[support] / dens[support].sum())
        draws = model.assignments[support[picks]]
    else:
        draws = np.empty((resamples, model.length), dtype=model.dtype)
        got = proposals = 0
        while got < resamples:
            cand = model.draw(rng)
            proposals += 1
            if rng.random() < variable.prob(g, cand):
                draws[got] = cand
                got += 1
            if proposals >= PROBE_PROPOSALS and got / proposals < MIN_ACCEPTANCE:
                raise ImpracticalConditioningError("posterior rejection sampler accepts too rarely")
    rows = np.vstack([np.asarray(z_obs, dtype=model.dtype)[None, :], draws])
    values = _imputed(null, observed, rows, mask)
    stats = stat.evaluate_many(rows, values, mask, ctx)
    k = int(extreme_mask(stats[1:], stats[0], stat.orientation).sum())
    return PValueReport(
        p=(1 + k) / (resamples + 1),
        cell=g,
        cell_size=None if support is None else len(support),
        mode=MONTE_CARLO,
        seed=seed_out,
        observed_stat=float(stats[0]),
        resamples=resamples,
        statistic=stat.name,
        n_units_used=int(mask.sum()),
        distribution=stats[1:],
    )


def averaged_p_value(reports: Sequence[PValueReport], alpha: float = 0.05) -> tuple[float, float]:
    """Mean of p-values from independent post-randomizations, with its decision threshold.

    The mean is valid up to a factor of two, so the returned threshold is
    ``alpha / 2``: reject at level ``alpha`` iff ``mean <= alpha / 2``.
    """
    if len(reports) == 0:
        raise ValueError("need at least one report to average")
    ps = [r.p if isinstance(r, PValueReport) else float(r) for r in reports]
    return float(np.mean(ps)), alpha / 2
