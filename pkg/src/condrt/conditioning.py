"""Conditioning structures for conditional randomization tests.

Partitions of an assignment space (level sets of a function, order
statistics, focal-unit exposure profiles, biclique decompositions of the
null exposure graph), a validator for user-proposed conditioning maps, and
post-randomized conditioning variables with their Bayes posterior.
"""

from __future__ import annotations

import io
import os
from dataclasses import dataclass, field
from functools import cached_property
from typing import Callable, Hashable, Iterable, Sequence

import numpy as np

from .assignment import AssignmentModel, as_generator
from .errors import ConfigurationError, DataError, UnreachableConditioningError
from .hypothesis import ExposureMap, NullHypothesis

#: Biclique search enumerates closed unit sets exactly up to this many assignments.
EXACT_BICLIQUE_LIMIT = 4096
#: Cap on closed unit sets before falling back to the seeded heuristic.
CLOSURE_LIMIT = 50_000
#: Seeds (highest-degree assignments) used by the heuristic biclique search.
HEURISTIC_SEEDS = 64


def dense_ids(keys) -> np.ndarray:
    """Map keys to dense integer ids in order of first appearance."""
    if isinstance(keys, np.ndarray) and keys.dtype != object:
        axis = 0 if keys.ndim > 1 else None
        _, first, inverse = np.unique(keys, axis=axis, return_index=True, return_inverse=True)
        inverse = np.asarray(inverse).reshape(-1)
        remap = np.empty(len(first), dtype=np.int64)
        remap[np.argsort(first, kind="stable")] = np.arange(len(first))
        return remap[inverse]
    seen: dict = {}
    out = np.empty(len(keys), dtype=np.int64)
    for i, k in enumerate(keys):
        out[i] = seen.setdefault(k, len(seen))
    return out


def _as_key(value) -> Hashable:
    if isinstance(value, np.ndarray):
        return value.tobytes() if value.ndim else value.item()
    if isinstance(value, np.generic):
        return value.item()
    return value


class Partition:
    """A partition of an assignment space into conditioning cells.

    Cells are identified by dense integer ids in enumeration order.  For
    lazy (non-enumerable) models cells are identified by the raw key value
    and only membership tests and sampling are available.
    """

    def __init__(
        self,
        model: AssignmentModel,
        key: Callable[[np.ndarray], Hashable],
        *,
        batched_key: Callable[[np.ndarray], np.ndarray] | None = None,
        labels: np.ndarray | None = None,
        sampler: Callable[[np.ndarray, np.random.Generator], np.ndarray] | None = None,
        focal: np.ndarray | None = None,
        name: str = "partition",
    ):
        self.model = model
        self._key = key
        self._batched_key = batched_key
        self._sampler = sampler
        self.focal = None if focal is None else np.asarray(focal, dtype=np.int64)
        self.name = name
        if labels is not None:
            labels = np.asarray(labels, dtype=np.int64)
            labels.setflags(write=False)
            self.__dict__["labels"] = labels

    def __repr__(self) -> str:
        cells = self.n_cells if self.model.enumerable else "?"
        return f"Partition({self.name!r}, cells={cells})"

    def key(self, z) -> Hashable:
        return _as_key(self._key(np.asarray(z)))

    @cached_property
    def labels(self) -> np.ndarray:
        """Cell id of every enumerated assignment."""
        rows = self.model.assignments
        if self._batched_key is not None:
            keys = np.asarray(self._batched_key(rows))
        else:
            keys = [self.key(z) for z in rows]
        labels = dense_ids(keys)
        labels.setflags(write=False)
        return labels

    @property
    def n_cells(self) -> int:
        return int(self.labels.max()) + 1

    def cell_of(self, z) -> Hashable:
        if self.model.enumerable:
            return int(self.labels[self.model.index(z)])
        return self.key(z)

    def members(self, cell: int) -> np.ndarray:
        """Row indices (into ``model.assignments``) of the cell's assignments."""
        idx = np.flatnonzero(self.labels == cell)
        if idx.size == 0:
            raise KeyError(f"no cell {cell} in {self.name}")
        return idx

    def cell_rows(self, cell: int) -> np.ndarray:
        return self.model.assignments[self.members(cell)]

    @property
    def cells(self) -> dict[int, list[np.ndarray]]:
        rows = self.model.assignments
        out: dict[int, list[np.ndarray]] = {}
        for r, lab in zip(rows, self.labels):
            out.setdefault(int(lab), []).append(r)
        return out

    def same_cell(self, z, z_star) -> bool:
        if self.model.enumerable:
            return self.cell_of(z) == self.cell_of(z_star)
        return self.key(z) == self.key(z_star)

    @property
    def has_direct_sampler(self) -> bool:
        return self._sampler is not None

    def sample_cell(self, z, rng: np.random.Generator) -> np.ndarray:
        """Draw from the assignment density restricted to the cell of ``z``.

        Uses a direct sampler when the partition provides one, otherwise
        rejection from the model sampler.
        """
        if self._sampler is not None:
            return self._sampler(np.asarray(z), rng)
        target = self.key(z)
        while True:
            cand = self.model.draw(rng)
            if self.key(cand) == target:
                return cand


def partition_by_function(
    model: AssignmentModel,
    g: Callable[[np.ndarray], Hashable],
    *,
    batched: bool = False,
    name: str = "function",
) -> Partition:
    """Level sets of ``g``.  ``batched=True`` means ``g`` maps rows to an array."""
    if batched:
        return Partition(
            model,
            key=lambda z: g(z[None, :])[0],
            batched_key=g,
            name=name,
        )
    return Partition(model, key=g, name=name)


def count_treated(units: Sequence[int] | None = None) -> Callable[[np.ndarray], np.ndarray]:
    """Batched function counting treated labels among ``units`` (all by default)."""
    cols = None if units is None else np.asarray(units, dtype=np.int64)

    def g(rows):
        rows = np.asarray(rows)
        sub = rows if cols is None else rows[:, cols]
        return sub.sum(axis=1)

    return g


def whole_space(model: AssignmentModel) -> Partition:
    """The trivial partition: one cell, an unconditional test."""
    return Partition(
        model,
        key=lambda z: 0,
        batched_key=lambda rows: np.zeros(len(rows), dtype=np.int64),
        sampler=lambda z, rng: model.draw(rng),
        name="whole-space",
    )


def partition_by_order_statistics(model: AssignmentModel) -> Partition:
    """Cells are the rearrangements of an assignment's labels.

    Exchangeable models get a direct sampler (a uniform random
    permutation of the observed labels); otherwise sampling is rejection.
    """
    sampler = (lambda z, rng: rng.permutation(z)) if model.exchangeable else None
    return Partition(
        model,
        key=lambda z: np.sort(z).tobytes(),
        batched_key=lambda rows: np.sort(rows, axis=1),
        sampler=sampler,
        name="order-statistics",
    )


def partition_by_focal_units(model: AssignmentModel, exposure: ExposureMap, focal) -> Partition:
    """Cells hold the exposure profile of the focal units fixed."""
    focal = np.unique(np.asarray(list(focal), dtype=np.int64))
    if focal.size == 0:
        raise ConfigurationError("focal unit set must be non-empty")
    if focal.min() < 0 or focal.max() >= exposure.n_units:
        raise ConfigurationError("focal unit index out of range")
    return Partition(
        model,
        key=lambda z: exposure(z)[focal].tobytes(),
        batched_key=lambda rows: exposure.matrix(rows)[:, focal],
        focal=focal,
        name=f"focal({len(focal)})",
    )


def partition_from_labels(model: AssignmentModel, labels, *, name: str = "labels") -> Partition:
    """Partition from explicit cell labels over ``model.assignments``."""
    labels = dense_ids(np.asarray(labels))
    if len(labels) != len(model.assignments):
        raise ConfigurationError("one label per enumerated assignment is required")
    return Partition(
        model,
        key=lambda z: int(labels[model.index(z)]),
        labels=labels,
        name=name,
    )


@dataclass(frozen=True)
class ConditioningRejection:
    """A proposed conditioning map that does not define a partition.

    ``reason`` is ``"reflexivity"`` (``z`` not in its own set),
    ``"invariance"`` (``z*`` in the set of ``z`` but with a different set),
    or ``"outside-space"``.
    """

    reason: str
    witness: tuple[np.ndarray, np.ndarray]
    message: str

    accepted = False

    def __bool__(self) -> bool:
        return False


def validate_conditioning_map(
    model: AssignmentModel,
    proposal: Callable[[np.ndarray], Iterable],
) -> Partition | ConditioningRejection:
    """Accept ``proposal`` iff its sets are the cells of a partition.

    Requires ``z in proposal(z)`` and ``proposal(z*) == proposal(z)`` for
    every ``z*`` in ``proposal(z)``.  The scan follows enumeration order,
    so the reported witness is the first violation found and is
    deterministic.
    """
    rows = model.assignments
    sets: dict[int, frozenset[int]] = {}

    def set_of(i: int) -> frozenset[int] | ConditioningRejection:
        if i not in sets:
            idx = []
            for member in proposal(rows[i]):
                member = np.asarray(member)
                if not model.contains(member):
                    return ConditioningRejection(
                        "outside-space",
                        (rows[i].copy(), member.copy()),
                        f"proposal({rows[i].tolist()}) contains {member.tolist()}, "
                        "which is not in the assignment space",
                    )
                idx.append(model.index(member))
            sets[i] = frozenset(idx)
        return sets[i]

    for i in range(len(rows)):
        s = set_of(i)
        if isinstance(s, ConditioningRejection):
            return s
        if i not in s:
            return ConditioningRejection(
                "reflexivity",
                (rows[i].copy(), rows[i].copy()),
                f"{rows[i].tolist()} is not a member of its own conditioning set",
            )
        for j in sorted(s):
            t = set_of(j)
            if isinstance(t, ConditioningRejection):
                return t
            if t != s:
                return ConditioningRejection(
                    "invariance",
                    (rows[i].copy(), rows[j].copy()),
                    f"{rows[j].tolist()} lies in the set of {rows[i].tolist()} "
                    "but has a different conditioning set",
                )
    keys = [min(sets[i]) for i in range(len(rows))]
    return partition_from_labels(model, np.asarray(keys), name="validated")


def intersection_units(partition: Partition, null: NullHypothesis, cell: int) -> frozenset[int]:
    """Units imputable for every pair of assignments in the cell."""
    mask = null.intersection(partition.cell_rows(cell))
    return frozenset(np.flatnonzero(mask).tolist())


# -- null exposure graph -----------------------------------------------------


@dataclass(frozen=True)
class NullExposureGraph:
    """Bipartite graph linking unit ``i`` and assignment ``k`` iff ``D_i(z_k) = 0``.

    ``adjacency`` is a boolean ``(n_assignments, n_units)`` matrix.
    """

    adjacency: np.ndarray
    assignments: np.ndarray | None = field(default=None, compare=False)

    def __post_init__(self):
        adj = np.asarray(self.adjacency, dtype=bool)
        if adj.ndim != 2:
            raise ConfigurationError("adjacency must be two-dimensional")
        object.__setattr__(self, "adjacency", adj)

    @property
    def n_units(self) -> int:
        return self.adjacency.shape[1]

    @property
    def n_assignments(self) -> int:
        return self.adjacency.shape[0]

    @property
    def n_edges(self) -> int:
        return int(self.adjacency.sum())

    def has_edge(self, unit: int, assignment: int) -> bool:
        return bool(self.adjacency[assignment, unit])

    def edges(self) -> list[tuple[int, int]]:
        """``(unit, assignment)`` pairs sorted by unit then assignment."""
        k, i = np.nonzero(self.adjacency)
        order = np.lexsort((k, i))
        return [(int(i[o]), int(k[o])) for o in order]

    def to_edgelist(self, dest=None) -> str:
        """Serialize as ``units=<N> assignments=<M>`` then tab-separated pairs."""
        lines = [f"units={self.n_units} assignments={self.n_assignments}"]
        lines += [f"{u}\t{a}" for u, a in self.edges()]
        text = "\n".join(lines) + "\n"
        if dest is not None:
            if isinstance(dest, (str, os.PathLike)):
                with open(dest, "w", encoding="utf-8") as fh:
                    fh.write(text)
            else:
                dest.write(text)
        return text

    @classmethod
    def from_edgelist(cls, source) -> NullExposureGraph:
        if isinstance(source, (str, os.PathLike)) and os.path.exists(source):
            with open(source, encoding="utf-8") as fh:
                text = fh.read()
        elif isinstance(source, str):
            text = source
        else:
            text = source.read()
        lines = io.StringIO(text).read().splitlines()
        if not lines:
            raise DataError("line 1: missing header 'units=<N> assignments=<M>'")
        header = dict(part.split("=", 1) for part in lines[0].split() if "=" in part)
        try:
            n_units, n_assign = int(header["units"]), int(header["assignments"])
        except (KeyError, ValueError):
            raise DataError(f"line 1: malformed header {lines[0]!r}") from None
        adj = np.zeros((n_assign, n_units), dtype=bool)
        for lineno, line in enumerate(lines[1:], start=2):
            if not line.strip():
                continue
            parts = line.split("\t")
            if len(parts) != 2:
                raise DataError(f"line {lineno}: expected 'unit<TAB>assignment', got {line!r}")
            try:
                u, a = int(parts[0]), int(parts[1])
            except ValueError:
                raise DataError(f"line {lineno}: non-integer index in {line!r}") from None
            if not (0 <= u < n_units and 0 <= a < n_assign):
                raise DataError(f"line {lineno}: index out of range in {line!r}")
            adj[a, u] = True
        return cls(adj)


def build_null_exposure_graph(model: AssignmentModel, exposure: ExposureMap) -> NullExposureGraph:
    if exposure.alphabet is not None and 0 not in exposure.alphabet:
        raise ConfigurationError("null exposure graph needs exposure level 0")
    rows = model.assignments
    return NullExposureGraph(exposure.matrix(rows) == 0, assignments=rows)


@dataclass(frozen=True)
class Biclique:
    """Complete bipartite subgraph: every listed unit is at level 0 under every listed assignment."""

    units: tuple[int, ...]
    assignments: tuple[int, ...]
    low_power: bool = False

    @property
    def n_edges(self) -> int:
        return len(self.units) * len(self.assignments)


def _popcount(x: int) -> int:
    return bin(x).count("1")


def _closed_unit_sets(masks: Sequence[int], limit: int) -> set[int] | None:
    """All non-empty intersections of the given neighbourhoods (None if over ``limit``)."""
    closed: set[int] = set()
    for m in masks:
        if m == 0:
            continue
        new = {m}
        for c in closed:
            inter = c & m
            if inter:
                new.add(inter)
        closed |= new
        if len(closed) > limit:
            return None
    return closed


def _heuristic_unit_sets(masks: Sequence[int], degrees: np.ndarray, seeds: int) -> set[int]:
    order = np.lexsort((np.arange(len(masks)), -degrees))[:seeds]
    cands = {masks[k] for k in order if masks[k]}
    seed_masks = [masks[k] for k in order]
    for a in range(len(seed_masks)):
        for b in range(a + 1, len(seed_masks)):
            inter = seed_masks[a] & seed_masks[b]
            if inter:
                cands.add(inter)
    return cands


def _best_biclique(adj: np.ndarray, remaining: np.ndarray, min_units: int, exact_limit: int):
    sub = adj[remaining]
    n_units = adj.shape[1]
    weights = 1 << np.arange(n_units, dtype=object)
    masks = [int(np.dot(row.astype(object), weights)) if row.any() else 0 for row in sub]
    cands = None
    if len(remaining) <= exact_limit:
        cands = _closed_unit_sets(masks, CLOSURE_LIMIT)
    if cands is None:
        cands = _heuristic_unit_sets(masks, sub.sum(axis=1), HEURISTIC_SEEDS)
    floor = max(min_units, 1)
    cands = [c for c in cands if _popcount(c) >= floor]
    if not cands:
        return None
    cand_mat = np.array([[(c >> u) & 1 for u in range(n_units)] for c in cands], dtype=np.int64)
    # H subset of N(z)  <=>  H has no unit outside N(z)
    outside = cand_mat @ (~sub).T.astype(np.int64)
    contains = outside == 0
    n_h = cand_mat.sum(axis=1)
    n_s = contains.sum(axis=1)
    score = n_h * n_s
    best = None
    for c in range(len(cands)):
        s_idx = tuple(int(remaining[k]) for k in np.flatnonzero(contains[c]))
        rank = (-int(score[c]), -int(n_h[c]), s_idx)
        if best is None or rank < best[0]:
            best = (rank, c, s_idx)
    _, c, s_idx = best
    units = tuple(int(u) for u in np.flatnonzero(cand_mat[c]))
    return Biclique(units, s_idx, low_power=len(units) < min_units)


def biclique_decomposition(
    graph: NullExposureGraph,
    min_units: int = 0,
    *,
    exact_limit: int = EXACT_BICLIQUE_LIMIT,
) -> list[Biclique]:
    """Greedy biclique decomposition of the null exposure graph.

    Repeatedly takes the biclique with the most edges among the remaining
    assignments (unit side of at least ``max(min_units, 1)`` units) and
    removes its assignments.  Ties go to the larger unit side, then to the
    lexicographically smaller assignment side.  Assignments that cannot
    join such a biclique become singleton cells with their full
    neighbourhood as unit side, flagged ``low_power`` when that side has
    fewer than ``min_units`` units.  Assignment sides partition the space.
    """
    if min_units < 0:
        raise ConfigurationError("min_units must be non-negative")
    adj = graph.adjacency
    remaining = np.arange(graph.n_assignments)
    out: list[Biclique] = []
    while remaining.size:
        best = _best_biclique(adj, remaining, min_units, exact_limit)
        if best is None:
            k = int(remaining[0])
            units = tuple(int(u) for u in np.flatnonzero(adj[k]))
            best = Biclique(units, (k,), low_power=len(units) < min_units)
        out.append(best)
        remaining = np.setdiff1d(remaining, best.assignments, assume_unique=True)
    return out


def max_biclique_edges_bruteforce(graph: NullExposureGraph) -> int:
    """Maximum edge count of any biclique, by enumerating assignment subsets.

    Exponential in the number of assignments; intended as a check for
    small graphs only.
    """
    adj = graph.adjacency
    k = graph.n_assignments
    if k > 20:
        raise ConfigurationError("brute-force biclique search is limited to 20 assignments")
    best = 0
    for subset in range(1, 2**k):
        members = [j for j in range(k) if subset >> j & 1]
        units = adj[members].all(axis=0).sum()
        best = max(best, int(units) * len(members))
    return best


def partition_from_bicliques(model: AssignmentModel, bicliques: Sequence[Biclique]) -> Partition:
    labels = np.full(len(model.assignments), -1, dtype=np.int64)
    for m, b in enumerate(bicliques):
        labels[list(b.assignments)] = m
    if (labels < 0).any():
        raise ConfigurationError("bicliques do not cover the assignment space")
    return partition_from_labels(model, labels, name="biclique")


# -- post-randomized conditioning -------------------------------------------


class ConditioningVariable:
    """A conditioning variable ``G = g(Z, V)`` given through its kernel.

    ``kernel(z)`` returns a dict ``{g: P(G = g | Z = z)}``.  An optional
    ``batch_prob(g, rows)`` evaluates ``P(G = g | Z = z)`` for many rows.
    """

    def __init__(
        self,
        kernel: Callable[[np.ndarray], dict],
        *,
        batch_prob: Callable[[Hashable, np.ndarray], np.ndarray] | None = None,
        name: str = "G",
    ):
        self._kernel = kernel
        self._batch_prob = batch_prob
        self.name = name

    def probabilities(self, z) -> dict:
        dist = self._kernel(np.asarray(z))
        total = sum(dist.values())
        if abs(total - 1.0) > 1e-9:
            raise ConfigurationError(f"kernel probabilities at {np.asarray(z).tolist()} sum to {total}")
        return dist

    def prob(self, g, z) -> float:
        return float(self._kernel(np.asarray(z)).get(g, 0.0))

    def prob_many(self, g, rows) -> np.ndarray:
        rows = np.atleast_2d(np.asarray(rows))
        if self._batch_prob is not None:
            return np.asarray(self._batch_prob(g, rows), dtype=float)
        return np.array([self.prob(g, z) for z in rows])

    def draw(self, z, rng) -> Hashable:
        rng = as_generator(rng)
        dist = self.probabilities(z)
        keys = list(dist)
        p = np.array([dist[k] for k in keys], dtype=float)
        return keys[int(rng.choice(len(keys), p=p / p.sum()))]


def deterministic_variable(g: Callable[[np.ndarray], Hashable], *, batched: bool = False) -> ConditioningVariable:
    """``G = g(Z)`` with no analyst randomness."""
    if batched:
        return ConditioningVariable(
            lambda z: {_as_key(g(z[None, :])[0]): 1.0},
            batch_prob=lambda val, rows: (np.asarray(g(rows)) == val).astype(float),
            name="deterministic",
        )
    return ConditioningVariable(lambda z: {_as_key(g(z)): 1.0}, name="deterministic")


def partition_variable(partition: Partition) -> ConditioningVariable:
    """``G`` = the cell id of ``Z`` in ``partition``."""
    return ConditioningVariable(
        lambda z: {partition.cell_of(z): 1.0},
        batch_prob=lambda g, rows: (partition.labels[[partition.model.index(r) for r in rows]] == g).astype(float)
        if rows is not partition.model.assignments
        else (partition.labels == g).astype(float),
        name=f"cell({partition.name})",
    )


def randomized_partition_choice(
    partitions: Sequence[Partition], weights: Sequence[float] | None = None
) -> ConditioningVariable:
    """Analyst draws ``V`` (partition index) independently of ``Z``; ``G = (V, cell of Z)``."""
    if not partitions:
        raise ConfigurationError("need at least one partition")
    w = np.full(len(partitions), 1 / len(partitions)) if weights is None else np.asarray(weights, float)
    if w.shape != (len(partitions),) or np.any(w <= 0) or abs(w.sum() - 1) > 1e-9:
        raise ConfigurationError("weights must be positive and sum to 1")
    model = partitions[0].model

    def kernel(z):
        return {(v, p.cell_of(z)): float(w[v]) for v, p in enumerate(partitions)}

    def batch_prob(g, rows):
        v, cell = g
        p = partitions[v]
        if rows is model.assignments:
            labels = p.labels
        else:
            labels = np.array([p.cell_of(r) for r in rows])
        return w[v] * (labels == cell)

    return ConditioningVariable(kernel, batch_prob=batch_prob, name="randomized-partition")


def independent_variable(values: Sequence[Hashable], probs: Sequence[float]) -> ConditioningVariable:
    """``G`` drawn independently of ``Z`` (conditioning on it changes nothing)."""
    probs = np.asarray(probs, dtype=float)
    dist = dict(zip(values, probs.tolist()))
    return ConditioningVariable(
        lambda z: dict(dist),
        batch_prob=lambda g, rows: np.full(len(rows), dist.get(g, 0.0)),
        name="independent",
    )


def bayes_conditional_density(model: AssignmentModel, variable: ConditioningVariable, g) -> np.ndarray:
    """``pi(z | g)`` for every assignment of ``model`` (aligned with ``model.assignments``)."""
    rows = model.assignments
    joint = variable.prob_many(g, rows) * model.probabilities
    total = joint.sum()
    if total <= 0:
        raise UnreachableConditioningError(f"P(G = {g!r}) = 0 under {model.name}")
    return joint / total
