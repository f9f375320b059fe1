"""Testing for spillovers on a network.

A unit is exposed to spillover when a neighbour is treated.  Under the null
of no spillover, an untreated unit's outcome does not depend on who else is
treated, so it can be imputed under any assignment that also leaves it
untreated.  Bicliques of the null-exposure graph give conditioning cells in
which one fixed set of units is imputable across every assignment.
"""

import numpy as np

from condrt import (
    LARGE,
    ExposureMap,
    ObservedData,
    Statistic,
    biclique_decomposition,
    build_complete_randomization,
    build_null_exposure_graph,
    exact_p_value,
    neighborhood_exposure,
    partition_from_bicliques,
    sample,
    spillover_null,
)

rng = np.random.default_rng(3)
n = 12
adj = np.triu(rng.random((n, n)) < 0.25, 1)
adj = (adj | adj.T).astype(int)
design = build_complete_randomization(n, 3)
exposure = neighborhood_exposure(adj)

# the null compares control and spillover, so both map to level 0
untreated_vs_treated = ExposureMap(
    lambda z: np.asarray(z, dtype=np.int64),
    n,
    batch=lambda rows: np.asarray(rows, dtype=np.int64),
    alphabet=(0, 1),
    name="treated",
)
null = spillover_null(untreated_vs_treated)

graph = build_null_exposure_graph(design, untreated_vs_treated)
cells = biclique_decomposition(graph, min_units=4)
partition = partition_from_bicliques(design, cells)
biggest = max(cells, key=lambda c: c.n_edges)
print(f"{design.size} assignments split into {len(cells)} bicliques")
print(f"largest: {len(biggest.assignments)} assignments x {len(biggest.units)} imputable units")


def spillover_gap(z, y, ctx):
    """Mean outcome of spillover-exposed minus isolated units among the imputable ones."""
    idx = y.indices
    e = exposure(z)[idx]
    if e.min() == e.max():
        return 0.0
    return float(y[idx][e == 1].mean() - y[idx][e == 0].mean())


gap = Statistic(spillover_gap, LARGE, "spillover gap")
base = rng.normal(size=n)
print("\nshare of 200 randomizations with p <= 0.1")
for spill in (0.0, 2.0):
    hits = 0
    for _ in range(200):
        z = sample(design, rng)
        y = base + spill * (exposure(z) == 1)
        hits += exact_p_value(design, partition, null, gap, ObservedData(z, y)).p <= 0.1
    print(f"  spillover {spill}: {hits / 200:.2f}")
