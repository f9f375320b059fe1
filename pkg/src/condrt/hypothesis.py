"""Partially sharp null hypotheses.

A null hypothesis is an imputability mapping ``H(z, z*)`` (which units'
outcomes under ``z*`` can be reconstructed from outcomes observed under
``z``) together with an imputation rule.  Imputed outcomes are returned
as :class:`PartialOutcomes`, which refuses reads of undefined entries.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Mapping, Sequence

import numpy as np

from .assignment import ObservedData
from .errors import ConfigurationError, DataError, ImputabilityError, UnsupportedNullError


class ExposureMap:
    """Unit-level exposure functions ``D_i(z)`` with a countable label alphabet.

    ``fn(z)`` returns the exposure vector of all units under ``z``; an
    optional ``batch(rows)`` returns the ``(n_rows, n_units)`` matrix for many
    assignments at once.
    """

    def __init__(
        self,
        fn: Callable[[np.ndarray], np.ndarray],
        n_units: int,
        *,
        batch: Callable[[np.ndarray], np.ndarray] | None = None,
        alphabet: Sequence[int] | None = None,
        name: str = "exposure",
    ):
        self._fn = fn
        self._batch = batch
        self.n_units = int(n_units)
        self.alphabet = tuple(sorted(alphabet)) if alphabet is not None else None
        self.name = name

    def __repr__(self) -> str:
        return f"ExposureMap({self.name!r}, n_units={self.n_units}, alphabet={self.alphabet})"

    def __call__(self, z) -> np.ndarray:
        return np.asarray(self._fn(np.asarray(z)), dtype=np.int64)

    def unit(self, i: int, z) -> int:
        return int(self(z)[i])

    def matrix(self, rows) -> np.ndarray:
        rows = np.atleast_2d(np.asarray(rows))
        if self._batch is not None:
            return np.asarray(self._batch(rows), dtype=np.int64)
        if len(rows) == 0:
            return np.empty((0, self.n_units), dtype=np.int64)
        return np.stack([self(z) for z in rows])

    def recode(self, mapping: Mapping[int, int], name: str | None = None) -> ExposureMap:
        """Relabel exposure levels, e.g. ``{0: 0, 1: 0, 2: 1}`` to merge levels."""
        src = self.alphabet if self.alphabet is not None else tuple(mapping)
        missing = set(src) - set(mapping)
        if missing:
            raise ConfigurationError(f"recode mapping misses levels {sorted(missing)}")
        lut_keys = np.array(sorted(mapping))
        lut_vals = np.array([mapping[k] for k in lut_keys])

        def apply(e):
            return lut_vals[np.searchsorted(lut_keys, e)]

        return ExposureMap(
            lambda z: apply(self(z)),
            self.n_units,
            batch=lambda rows: apply(self.matrix(rows)),
            alphabet=sorted(set(mapping.values())),
            name=name or f"{self.name}|recoded",
        )


def treatment_exposure(n_units: int, alphabet: Sequence[int] = (0, 1)) -> ExposureMap:
    """No-interference exposure: ``D_i(z) = z_i``."""
    return ExposureMap(
        lambda z: z,
        n_units,
        batch=lambda rows: rows,
        alphabet=alphabet,
        name="treatment",
    )


def stepped_wedge_exposure(
    n_clusters: int,
    n_periods: int,
    clusters: Sequence[int],
    periods: Sequence[int],
) -> ExposureMap:
    """Exposure of each unit under a crossover order.

    Assignments are orders: ``z[k]`` is the cluster placed in position
    ``k``, which crosses over at period ``k + 1``.  Every cluster is in
    control during period 0.  Unit ``i`` is exposed iff its cluster has
    crossed over by its period.
    """
    clusters = np.asarray(clusters, dtype=np.int64)
    periods = np.asarray(periods, dtype=np.int64)
    if clusters.shape != periods.shape or clusters.ndim != 1:
        raise DataError("clusters and periods must be vectors of equal length")
    if clusters.size and (clusters.min() < 0 or clusters.max() >= n_clusters):
        bad = int(np.flatnonzero((clusters < 0) | (clusters >= n_clusters))[0])
        raise DataError(f"unit {bad}: cluster {clusters[bad]} outside 0..{n_clusters - 1}")
    if periods.size and (periods.min() < 0 or periods.max() >= n_periods):
        bad = int(np.flatnonzero((periods < 0) | (periods >= n_periods))[0])
        raise DataError(f"unit {bad}: period {periods[bad]} outside 0..{n_periods - 1}")

    def batch(rows):
        rows = np.asarray(rows)
        if rows.shape[1] != n_clusters:
            raise DataError(f"crossover order must have {n_clusters} entries")
        # inverse permutation: position of each cluster
        position = np.argsort(rows, axis=1, kind="stable")
        crossing = position[:, clusters] + 1
        return (periods[None, :] >= crossing).astype(np.int64)

    return ExposureMap(
        lambda z: batch(np.asarray(z)[None, :])[0],
        len(clusters),
        batch=batch,
        alphabet=(0, 1),
        name="stepped-wedge",
    )


def neighborhood_exposure(adjacency) -> ExposureMap:
    """Three-level interference exposure on a graph.

    0 = untreated with no treated neighbour, 1 = untreated with at least one
    treated neighbour (spillover), 2 = treated.
    """
    adj = np.asarray(adjacency, dtype=np.int64)
    if adj.ndim != 2 or adj.shape[0] != adj.shape[1]:
        raise DataError("adjacency must be a square matrix")
    adj = (adj != 0).astype(np.int64)
    np.fill_diagonal(adj, 0)

    def batch(rows):
        rows = np.asarray(rows, dtype=np.int64)
        spill = (rows @ adj.T) > 0
        return np.where(rows == 1, 2, np.where(spill, 1, 0))

    return ExposureMap(
        lambda z: batch(np.asarray(z)[None, :])[0],
        adj.shape[0],
        batch=batch,
        alphabet=(0, 1, 2),
        name="neighborhood",
    )


class PartialOutcomes:
    """An outcome vector with a defined-mask; reading an undefined entry raises.

    Only :meth:`defined_values`, :attr:`indices` and guarded indexing expose
    values, so a statistic cannot silently use a non-imputable outcome.
    """

    __slots__ = ("_values", "defined")

    def __init__(self, values, defined=None):
        values = np.asarray(values, dtype=float)
        if defined is None:
            defined = np.ones(values.shape, dtype=bool)
        defined = np.asarray(defined, dtype=bool)
        if defined.shape != values.shape:
            raise ValueError("mask and values must have the same shape")
        self._values = np.where(defined, values, np.nan)
        self._values.setflags(write=False)
        self.defined = defined
        self.defined.setflags(write=False)

    def __len__(self) -> int:
        return len(self._values)

    def __repr__(self) -> str:
        return f"PartialOutcomes(n={len(self)}, defined={int(self.defined.sum())})"

    def __getitem__(self, idx):
        ok = self.defined[idx]
        if not np.all(ok):
            where = np.arange(len(self))[idx]
            bad = int(np.atleast_1d(where)[~np.atleast_1d(ok)][0])
            raise ImputabilityError(f"outcome of unit {bad} is not imputable under the null", unit=bad)
        return self._values[idx]

    @property
    def indices(self) -> np.ndarray:
        return np.flatnonzero(self.defined)

    def defined_values(self) -> np.ndarray:
        return self._values[self.defined]

    def to_numpy(self) -> np.ndarray:
        """Full vector; raises unless every entry is defined."""
        return self[:]

    def restrict(self, mask) -> PartialOutcomes:
        return PartialOutcomes(self._values, self.defined & np.asarray(mask, dtype=bool))

    def is_complete(self) -> bool:
        return bool(self.defined.all())


FULLY_SHARP = "fully-sharp"
CONSTANT_EFFECT = "constant-effect"
SPILLOVER = "spillover"
LEVEL_SET = "level-set"
CUSTOM = "custom"


@dataclass(frozen=True)
class NullHypothesis:
    """Imputability mapping plus imputation rule.

    ``mapping(z, z_star)`` returns a boolean mask over units (the set
    ``H(z, z*)``); ``impute(observed, z_star)`` returns the outcomes under
    ``z_star`` as :class:`PartialOutcomes` defined exactly on
    ``H(observed.assignment, z_star)``.
    """

    n_units: int
    mapping: Callable[[np.ndarray, np.ndarray], np.ndarray]
    impute: Callable[[ObservedData, np.ndarray], PartialOutcomes]
    kind: str = CUSTOM
    exposure: ExposureMap | None = None
    tau: float | None = None

    def imputable_mask(self, z, z_star) -> np.ndarray:
        return np.asarray(self.mapping(np.asarray(z), np.asarray(z_star)), dtype=bool)

    def imputable(self, z, z_star) -> frozenset[int]:
        return frozenset(np.flatnonzero(self.imputable_mask(z, z_star)).tolist())

    def intersection(self, rows) -> np.ndarray:
        """Units imputable for every pair of the given assignments (mask).

        Level-set and spillover nulls use their exposure structure; custom
        nulls fall back to the pairwise intersection.
        """
        rows = np.atleast_2d(np.asarray(rows))
        if self.kind in (FULLY_SHARP, CONSTANT_EFFECT):
            return np.ones(self.n_units, dtype=bool)
        if self.kind == LEVEL_SET:
            e = self.exposure.matrix(rows)
            return (e == e[0]).all(axis=0)
        if self.kind == SPILLOVER:
            return (self.exposure.matrix(rows) == 0).all(axis=0)
        mask = np.ones(self.n_units, dtype=bool)
        for z in rows:
            for z_star in rows:
                mask &= self.imputable_mask(z, z_star)
                if not mask.any():
                    return mask
        return mask

    def impute_many(self, observed: ObservedData, rows) -> tuple[np.ndarray, np.ndarray]:
        """Imputed outcomes for many candidates: ``(values, defined)``, both ``(K, N)``."""
        rows = np.atleast_2d(np.asarray(rows))
        y = observed.outcomes
        k = len(rows)
        if self.kind == FULLY_SHARP:
            return np.broadcast_to(y, (k, len(y))), np.ones((k, len(y)), dtype=bool)
        if self.kind == CONSTANT_EFFECT:
            d_obs = self.exposure(observed.assignment)
            values = y[None, :] + (self.exposure.matrix(rows) - d_obs[None, :]) * self.tau
            return values, np.ones(values.shape, dtype=bool)
        if self.kind in (LEVEL_SET, SPILLOVER):
            e = self.exposure.matrix(rows)
            e_obs = self.exposure(observed.assignment)
            defined = e == e_obs[None, :]
            if self.kind == SPILLOVER:
                defined &= e_obs[None, :] == 0
            return np.broadcast_to(y, (k, len(y))), defined
        values = np.empty((k, len(y)))
        defined = np.empty((k, len(y)), dtype=bool)
        for r, z_star in enumerate(rows):
            part = self.impute(observed, z_star)
            values[r] = np.where(part.defined, part._values, np.nan)
            defined[r] = part.defined
        return values, defined


def fisher_sharp_null(n_units: int) -> NullHypothesis:
    """No effect whatsoever: every outcome equals the observed one."""
    return NullHypothesis(
        n_units,
        mapping=lambda z, zs: np.ones(n_units, dtype=bool),
        impute=lambda obs, zs: PartialOutcomes(obs.outcomes),
        kind=FULLY_SHARP,
    )


def constant_effect_null(exposure: ExposureMap, tau: float) -> NullHypothesis:
    """``Y_i(1) - Y_i(0) = tau`` for a binary exposure.

    Imputation shifts each observed outcome by ``(D_i(z*) - D_i(Z)) * tau``;
    with two exposure levels every unit is imputable.
    """
    if exposure.alphabet is None or not set(exposure.alphabet) <= {0, 1}:
        raise UnsupportedNullError(
            f"constant-effect null needs a binary exposure alphabet; got {exposure.alphabet}"
        )
    tau = float(tau)

    def impute(obs: ObservedData, z_star) -> PartialOutcomes:
        shift = (exposure(z_star) - exposure(obs.assignment)) * tau
        return PartialOutcomes(obs.outcomes + shift)

    return NullHypothesis(
        exposure.n_units,
        mapping=lambda z, zs: np.ones(exposure.n_units, dtype=bool),
        impute=impute,
        kind=CONSTANT_EFFECT,
        exposure=exposure,
        tau=tau,
    )


def spillover_null(exposure: ExposureMap) -> NullHypothesis:
    """Outcomes are equal across assignments that put a unit at exposure 0.

    ``H(z, z*) = {i : D_i(z) = D_i(z*) = 0}``.  To test "no spillover",
    recode control and spillover exposures to level 0 first.
    """
    if exposure.alphabet is None or 0 not in exposure.alphabet:
        raise ConfigurationError(
            f"spillover null needs exposure level 0 in the alphabet; got {exposure.alphabet}"
        )

    def mapping(z, z_star):
        return (exposure(z) == 0) & (exposure(z_star) == 0)

    def impute(obs: ObservedData, z_star) -> PartialOutcomes:
        return PartialOutcomes(obs.outcomes, mapping(obs.assignment, z_star))

    return NullHypothesis(exposure.n_units, mapping, impute, kind=SPILLOVER, exposure=exposure)


def level_set_null(exposure: ExposureMap) -> NullHypothesis:
    """Outcomes depend on the assignment only through the unit's exposure.

    ``H(z, z*) = {i : D_i(z) = D_i(z*)}``.
    """

    def mapping(z, z_star):
        return exposure(z) == exposure(z_star)

    def impute(obs: ObservedData, z_star) -> PartialOutcomes:
        return PartialOutcomes(obs.outcomes, mapping(obs.assignment, z_star))

    return NullHypothesis(exposure.n_units, mapping, impute, kind=LEVEL_SET, exposure=exposure)


def custom_null(
    n_units: int,
    mapping: Callable[[np.ndarray, np.ndarray], np.ndarray],
    impute: Callable[[ObservedData, np.ndarray], PartialOutcomes],
) -> NullHypothesis:
    """A user-supplied (mapping, impute) pair; consistency between them is the caller's claim."""
    return NullHypothesis(n_units, mapping, impute, kind=CUSTOM)
