"""Finite assignment spaces and known assignment mechanisms.

An :class:`AssignmentModel` bundles a finite space of treatment
assignments (integer label sequences of fixed length), its probability
mass function and a seeded sampler.  Spaces up to :data:`MAX_ENUMERATION`
assignments can be materialized; larger ones are available in lazy mode
for Monte-Carlo work only.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass
from functools import cached_property
from typing import Callable, Sequence

import numpy as np

from .errors import (
    ConfigurationError,
    EnumerationError,
    InfeasibleRestrictionError,
    PositivityError,
)

MAX_ENUMERATION = 2**24
MAX_BINARY_UNITS = 24
#: Proposals used to probe feasibility/acceptance of lazy rejection samplers.
PROBE_PROPOSALS = 100_000


def as_generator(seed) -> np.random.Generator:
    """Return ``seed`` if it is already a Generator, else a fresh seeded one."""
    if isinstance(seed, np.random.Generator):
        return seed
    return np.random.default_rng(seed)


def _label_dtype(max_label: int):
    return np.int8 if max_label < 127 else np.int64


class AssignmentModel:
    """A finite assignment space with a known, strictly positive density.

    Parameters
    ----------
    length : int
        Number of labels in each assignment.
    size : int or None
        Number of assignments in the space, ``None`` when unknown (lazy
        restrictions).
    draw : callable
        ``draw(rng) -> ndarray`` producing one assignment from the density.
    enumerate : callable, optional
        ``enumerate() -> ndarray (size, length)``; the row order defines
        assignment indices.
    batch_density : callable, optional
        ``batch_density(rows) -> ndarray`` of probability masses.
    exchangeable : bool
        True if the density is invariant to permuting label positions.
    """

    def __init__(
        self,
        length: int,
        size: int | None,
        *,
        draw: Callable[[np.random.Generator], np.ndarray],
        enumerate: Callable[[], np.ndarray] | None = None,
        batch_density: Callable[[np.ndarray], np.ndarray] | None = None,
        name: str = "model",
        exchangeable: bool = False,
        alphabet: Sequence[int] | None = None,
    ):
        self.length = int(length)
        self.size = size
        self.name = name
        self.exchangeable = exchangeable
        self.alphabet = tuple(sorted(alphabet)) if alphabet is not None else None
        self._draw = draw
        self._enumerate = enumerate
        self._batch_density = batch_density
        max_label = max(self.alphabet) if self.alphabet else max(self.length, 1)
        self.dtype = _label_dtype(max_label)

    def __repr__(self) -> str:
        return f"AssignmentModel({self.name!r}, length={self.length}, size={self.size})"

    # -- enumeration -------------------------------------------------------
    @property
    def enumerable(self) -> bool:
        return (
            self._enumerate is not None
            and self.size is not None
            and self.size <= MAX_ENUMERATION
        )

    @cached_property
    def assignments(self) -> np.ndarray:
        """All assignments as a read-only ``(size, length)`` integer array."""
        if self._enumerate is None or self.size is None:
            raise EnumerationError(f"{self.name}: space is lazy and cannot be enumerated")
        if self.size > MAX_ENUMERATION:
            raise EnumerationError(
                f"{self.name}: {self.size} assignments exceeds the enumeration "
                f"limit of {MAX_ENUMERATION} (2**24); use Monte-Carlo mode"
            )
        rows = np.ascontiguousarray(self._enumerate(), dtype=self.dtype)
        rows.setflags(write=False)
        return rows

    @cached_property
    def probabilities(self) -> np.ndarray:
        """Probability mass of each enumerated assignment (same row order)."""
        rows = self.assignments
        if self._batch_density is None:
            probs = np.full(len(rows), 1.0 / len(rows))
        else:
            probs = np.asarray(self._batch_density(rows), dtype=float)
        probs.setflags(write=False)
        return probs

    @cached_property
    def _index(self) -> dict[bytes, int]:
        return {row.tobytes(): i for i, row in enumerate(self.assignments)}

    def index(self, z) -> int:
        """Row index of assignment ``z`` in :attr:`assignments`."""
        key = np.asarray(z, dtype=self.dtype).tobytes()
        try:
            return self._index[key]
        except KeyError:
            raise KeyError(f"assignment {list(np.asarray(z))} is not in {self.name}") from None

    def contains(self, z) -> bool:
        z = np.asarray(z)
        if z.shape != (self.length,):
            return False
        if self.enumerable:
            return z.astype(self.dtype).tobytes() in self._index
        return self.alphabet is None or bool(np.isin(z, self.alphabet).all())

    def density(self, z) -> float:
        """Probability mass of a single assignment."""
        if self.enumerable:
            return float(self.probabilities[self.index(z)])
        if self._batch_density is None:
            if self.size is None:
                raise ConfigurationError(f"{self.name}: density unknown for lazy restriction")
            return 1.0 / self.size
        return float(self._batch_density(np.asarray(z)[None, :])[0])

    # -- sampling ----------------------------------------------------------
    def draw(self, rng: np.random.Generator) -> np.ndarray:
        return np.asarray(self._draw(rng), dtype=self.dtype)

    def draw_many(self, rng: np.random.Generator, n: int) -> np.ndarray:
        out = np.empty((n, self.length), dtype=self.dtype)
        for b in range(n):
            out[b] = self._draw(rng)
        return out

    # -- constructors ------------------------------------------------------
    @classmethod
    def from_table(cls, assignments, probabilities=None, *, name: str = "table", exchangeable=False):
        """Model over an explicit list of assignments (uniform if no probabilities)."""
        rows = np.atleast_2d(np.asarray(assignments))
        if rows.size == 0:
            raise ConfigurationError("assignment table is empty")
        if not np.issubdtype(rows.dtype, np.integer):
            if not np.all(rows == np.round(rows)):
                raise ConfigurationError("assignment labels must be integers")
            rows = rows.astype(np.int64)
        if len({r.tobytes() for r in rows}) != len(rows):
            raise ConfigurationError("assignment table contains duplicates")
        if probabilities is None:
            probs = np.full(len(rows), 1.0 / len(rows))
        else:
            probs = np.asarray(probabilities, dtype=float)
            if probs.shape != (len(rows),):
                raise ConfigurationError("one probability per assignment is required")
            if np.any(probs <= 0):
                raise PositivityError("assignment probabilities must be strictly positive")
            if abs(probs.sum() - 1.0) > 1e-9:
                raise ConfigurationError(f"probabilities sum to {probs.sum()!r}, not 1")
        alphabet = np.unique(rows).tolist()
        frozen_rows = rows.copy()
        frozen_probs = probs.copy()
        model = cls(
            rows.shape[1],
            len(rows),
            draw=lambda rng: frozen_rows[rng.choice(len(frozen_rows), p=frozen_probs)],
            enumerate=lambda: frozen_rows,
            batch_density=None if probabilities is None else (lambda zs: _lookup(model, zs, frozen_probs)),
            name=name,
            exchangeable=exchangeable,
            alphabet=alphabet,
        )
        return model


def _lookup(model: AssignmentModel, rows: np.ndarray, probs: np.ndarray) -> np.ndarray:
    if rows is model.__dict__.get("assignments"):
        return probs
    return np.array([probs[model.index(r)] for r in rows])


# -- built-in designs ------------------------------------------------------


def build_complete_randomization(n_units: int, n_treated: int) -> AssignmentModel:
    """Uniform over binary vectors with exactly ``n_treated`` ones."""
    if not 0 <= n_treated <= n_units <= MAX_BINARY_UNITS:
        raise ConfigurationError(
            f"complete randomization needs 0 <= n_treated <= n_units <= {MAX_BINARY_UNITS}; "
            f"got n_units={n_units}, n_treated={n_treated}"
        )
    size = math.comb(n_units, n_treated)
    base = np.zeros(n_units, dtype=np.int8)
    base[:n_treated] = 1

    def enumerate_():
        rows = np.zeros((size, n_units), dtype=np.int8)
        for r, treated in enumerate(itertools.combinations(range(n_units), n_treated)):
            rows[r, list(treated)] = 1
        # lexicographic order of the 0/1 strings
        order = np.lexsort(rows.T[::-1])
        return rows[order]

    return AssignmentModel(
        n_units,
        size,
        draw=lambda rng: rng.permutation(base),
        enumerate=enumerate_,
        name=f"complete({n_units},{n_treated})",
        exchangeable=True,
        alphabet=(0, 1),
    )


def _binary_rows(n: int) -> np.ndarray:
    idx = np.arange(2**n, dtype=np.int64)
    shifts = np.arange(n - 1, -1, -1, dtype=np.int64)
    return ((idx[:, None] >> shifts) & 1).astype(np.int8)


def build_bernoulli(n_units: int, prob: float, *, lazy: bool = False) -> AssignmentModel:
    """Independent Bernoulli(``prob``) assignment of each unit.

    With ``lazy=True`` the unit bound is lifted but the space can then only
    be sampled, not enumerated.
    """
    if not 0.0 < prob < 1.0:
        raise PositivityError(f"Bernoulli probability must lie strictly in (0, 1); got {prob}")
    if n_units < 1:
        raise ConfigurationError("n_units must be positive")
    if n_units > MAX_BINARY_UNITS and not lazy:
        raise EnumerationError(
            f"Bernoulli({n_units}) has 2**{n_units} assignments, above the enumeration "
            f"limit 2**{MAX_BINARY_UNITS}; pass lazy=True for Monte-Carlo use"
        )
    log_p, log_q = math.log(prob), math.log1p(-prob)

    def batch_density(rows):
        k = np.asarray(rows).sum(axis=1)
        return np.exp(k * log_p + (n_units - k) * log_q)

    return AssignmentModel(
        n_units,
        2**n_units,
        draw=lambda rng: (rng.random(n_units) < prob).astype(np.int8),
        enumerate=None if n_units > MAX_BINARY_UNITS else (lambda: _binary_rows(n_units)),
        batch_density=batch_density,
        name=f"bernoulli({n_units},{prob})",
        exchangeable=True,
        alphabet=(0, 1),
    )


def build_uniform_permutations(n: int, *, lazy: bool = False) -> AssignmentModel:
    """Uniform distribution over all orderings of ``0..n-1``."""
    if n < 1:
        raise ConfigurationError("need at least one element to permute")
    size = math.factorial(n)
    if size > MAX_ENUMERATION and not lazy:
        raise EnumerationError(
            f"{n}! = {size} permutations exceeds the enumeration limit; pass lazy=True"
        )
    return AssignmentModel(
        n,
        size,
        draw=lambda rng: rng.permutation(n),
        enumerate=(lambda: np.array(list(itertools.permutations(range(n))))) if size <= MAX_ENUMERATION else None,
        name=f"permutations({n})",
        exchangeable=True,
        alphabet=range(n),
    )


def build_crossover_orders(n_clusters: int) -> AssignmentModel:
    """Uniformly randomized crossover order of ``n_clusters`` clusters.

    Label ``k`` of an assignment is the cluster placed in position ``k``;
    under the stepped-wedge convention that cluster crosses over to
    treatment at period ``k + 1``.
    """
    if not 2 <= n_clusters <= 8:
        raise ConfigurationError(f"crossover designs support 2..8 clusters; got {n_clusters}")
    model = build_uniform_permutations(n_clusters)
    model.name = f"crossover({n_clusters})"
    return model


def build_iid(n_units: int, probs: Sequence[float], *, lazy: bool = False) -> AssignmentModel:
    """Independent draws of labels ``0..len(probs)-1`` with the given probabilities."""
    probs = np.asarray(probs, dtype=float)
    if np.any(probs <= 0):
        raise PositivityError("label probabilities must be strictly positive")
    if abs(probs.sum() - 1) > 1e-9:
        raise ConfigurationError("label probabilities must sum to 1")
    k = len(probs)
    size = k**n_units
    if size > MAX_ENUMERATION and not lazy:
        raise EnumerationError(f"{k}**{n_units} assignments exceeds the enumeration limit")
    log_probs = np.log(probs)

    def enumerate_():
        return np.array(list(itertools.product(range(k), repeat=n_units)))

    return AssignmentModel(
        n_units,
        size,
        draw=lambda rng: rng.choice(k, size=n_units, p=probs),
        enumerate=enumerate_ if size <= MAX_ENUMERATION else None,
        batch_density=lambda rows: np.exp(log_probs[np.asarray(rows, dtype=np.int64)].sum(axis=1)),
        name=f"iid({n_units},{k})",
        exchangeable=True,
        alphabet=range(k),
    )


def restrict(
    model: AssignmentModel,
    balance: Callable[[np.ndarray], float],
    threshold: float,
    *,
    batched: bool = False,
) -> AssignmentModel:
    """Restrict ``model`` to ``{z : balance(z) <= threshold}`` (rerandomization).

    The restricted density is the parent density renormalized on the
    acceptance region; sampling is rejection from the parent sampler.
    ``batched=True`` declares that ``balance`` maps an ``(n, length)`` array
    to ``n`` values, which speeds up enumeration.
    """

    def accept(z) -> bool:
        return bool(balance(np.asarray(z)[None, :])[0] <= threshold) if batched else balance(z) <= threshold

    def draw(rng):
        while True:
            z = model.draw(rng)
            if accept(z):
                return z

    name = f"restrict({model.name}, <= {threshold})"
    if model.enumerable:
        rows = model.assignments
        values = np.asarray(balance(rows)) if batched else np.array([balance(z) for z in rows])
        keep = values <= threshold
        if not keep.any():
            raise InfeasibleRestrictionError(
                f"no assignment of {model.name} has balance <= {threshold} "
                f"(minimum attained is {values.min()!r})"
            )
        kept = rows[keep].copy()
        probs = model.probabilities[keep]
        probs = probs / probs.sum()
        restricted = AssignmentModel(
            model.length,
            int(keep.sum()),
            draw=draw,
            enumerate=lambda: kept,
            batch_density=lambda zs: _lookup(restricted, zs, probs),
            name=name,
            exchangeable=False,
            alphabet=model.alphabet,
        )
        return restricted

    rng = np.random.default_rng(0)
    if not any(accept(model.draw(rng)) for _ in range(PROBE_PROPOSALS)):
        raise InfeasibleRestrictionError(
            f"no accepted draw in {PROBE_PROPOSALS} proposals from {model.name}; "
            "the restriction looks infeasible"
        )
    return AssignmentModel(
        model.length,
        None,
        draw=draw,
        name=name,
        alphabet=model.alphabet,
    )


def sample(model: AssignmentModel, seed) -> np.ndarray:
    """One draw from ``model``; the same integer seed always gives the same draw."""
    return model.draw(as_generator(seed))


@dataclass(frozen=True)
class ObservedData:
    """Realized assignment, observed outcomes and optional fixed covariates."""

    assignment: np.ndarray
    outcomes: np.ndarray
    covariates: np.ndarray | None = None

    def __post_init__(self):
        z = np.asarray(self.assignment)
        y = np.asarray(self.outcomes, dtype=float)
        if y.ndim != 1:
            raise ValueError("outcomes must be a vector")
        object.__setattr__(self, "assignment", z)
        object.__setattr__(self, "outcomes", y)
        if self.covariates is not None:
            x = np.asarray(self.covariates, dtype=float)
            if x.ndim == 1:
                x = x[:, None]
            if x.shape[0] != len(y):
                raise ValueError(f"covariates have {x.shape[0]} rows for {len(y)} outcomes")
            object.__setattr__(self, "covariates", x)

    @property
    def n_units(self) -> int:
        return len(self.outcomes)


class OutcomeSchedule:
    """Full potential-outcomes table: ``schedule(z)`` is the outcome vector under ``z``."""

    def __init__(self, fn: Callable[[np.ndarray], np.ndarray], n_units: int):
        self._fn = fn
        self.n_units = n_units

    def __call__(self, z) -> np.ndarray:
        y = np.asarray(self._fn(np.asarray(z)), dtype=float)
        if y.shape != (self.n_units,):
            raise ValueError(f"schedule returned shape {y.shape}, expected ({self.n_units},)")
        return y

    def observe(self, z) -> ObservedData:
        return ObservedData(np.asarray(z), self(z))
