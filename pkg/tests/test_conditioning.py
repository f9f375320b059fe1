import io
import itertools

import numpy as np
import pytest

from condrt.assignment import (
    AssignmentModel,
    build_bernoulli,
    build_complete_randomization,
    build_crossover_orders,
    build_iid,
)
from condrt.conditioning import (
    ConditioningRejection,
    NullExposureGraph,
    bayes_conditional_density,
    biclique_decomposition,
    build_null_exposure_graph,
    count_treated,
    deterministic_variable,
    independent_variable,
    intersection_units,
    max_biclique_edges_bruteforce,
    partition_by_focal_units,
    partition_by_function,
    partition_by_order_statistics,
    partition_from_bicliques,
    partition_variable,
    randomized_partition_choice,
    validate_conditioning_map,
    whole_space,
)
from condrt.errors import DataError, UnreachableConditioningError
from condrt.hypothesis import (
    ExposureMap,
    custom_null,
    fisher_sharp_null,
    level_set_null,
    neighborhood_exposure,
    spillover_null,
    treatment_exposure,
)

LINE4 = np.array([[0, 1, 0, 0], [1, 0, 1, 0], [0, 1, 0, 1], [0, 0, 1, 0]])


def own_plus_neighbour(n):
    """Exposure = own treatment + treated neighbours on a line."""
    def fn(z):
        z = np.asarray(z)
        left = np.concatenate([[0], z[:-1]])
        right = np.concatenate([z[1:], [0]])
        return z + left + right
    return ExposureMap(fn, n, alphabet=(0, 1, 2, 3))


def check_lemma1(partition):
    rows = partition.model.assignments
    labels = partition.labels
    cells = {}
    for i, lab in enumerate(labels):
        cells.setdefault(int(lab), set()).add(i)
    assert set().union(*cells.values()) == set(range(len(rows)))
    for i, z in enumerate(rows):
        cell = partition.cell_of(z)
        assert i in cells[cell]
        for j in cells[cell]:
            assert partition.cell_of(rows[j]) == cell


def test_function_partition_counts_first_half():
    m = build_bernoulli(20, 0.5)
    part = partition_by_function(m, count_treated(range(10)), batched=True)
    assert part.n_cells == 11
    # cell ids follow first encounter in enumeration order
    first = [int(part.labels[i]) for i in range(3)]
    assert first[0] == 0
    sizes = np.bincount(part.labels)
    import math
    assert sorted(sizes.tolist()) == sorted(math.comb(10, m) * 2**10 for m in range(11))


def test_constant_and_injective_functions():
    m = build_complete_randomization(6, 3)
    assert whole_space(m).n_cells == 1
    assert partition_by_function(m, lambda z: 0).n_cells == 1
    inj = partition_by_function(m, lambda z: tuple(z))
    assert inj.n_cells == m.size


def test_partitions_satisfy_lemma1():
    m = build_bernoulli(8, 0.4)
    for part in [
        partition_by_function(m, count_treated([0, 2, 5]), batched=True),
        partition_by_order_statistics(m),
        partition_by_focal_units(m, neighborhood_exposure(np.eye(8, k=1) + np.eye(8, k=-1)), [1, 4]),
        whole_space(m),
    ]:
        check_lemma1(part)


def test_order_statistics_partition():
    m = build_bernoulli(5, 0.5)
    part = partition_by_order_statistics(m)
    for z in m.assignments:
        for zs in m.assignments:
            assert part.same_cell(z, zs) == (z.sum() == zs.sum())
    assert part.same_cell([1, 1, 0, 0, 0], [0, 0, 0, 1, 1])
    iid = build_iid(3, [1 / 3] * 3)
    op = partition_by_order_statistics(iid)
    assert len(op.members(op.cell_of([0, 1, 2]))) == 6


def test_validate_accepts_level_sets():
    m = build_complete_randomization(6, 3)
    part = partition_by_function(m, lambda z: int(z[0] + z[1]))
    rows = m.assignments

    def proposal(z):
        return [r for r in rows if part.same_cell(r, z)]

    out = validate_conditioning_map(m, proposal)
    assert not isinstance(out, ConditioningRejection)
    assert out.n_cells == part.n_cells
    check_lemma1(out)


def test_validate_rejects_missing_self():
    m = build_complete_randomization(4, 2)
    rows = m.assignments

    def proposal(z):
        return [r for r in rows if not np.array_equal(r, z)]

    out = validate_conditioning_map(m, proposal)
    assert isinstance(out, ConditioningRejection)
    assert not out
    assert out.reason == "reflexivity"


def balanced_proposal(rows, n):
    def proposal(z):
        return [r for r in rows if int(r @ z) == n // 4]
    return proposal


def test_validate_rejects_balanced_permutations():
    m = build_complete_randomization(8, 4)
    out = validate_conditioning_map(m, balanced_proposal(m.assignments, 8))
    assert isinstance(out, ConditioningRejection)
    z, zs = out.witness
    # z^T z = 4 != 2, so z is never in its own set
    assert out.reason == "reflexivity"
    assert int(z @ z) == 4
    again = validate_conditioning_map(m, balanced_proposal(m.assignments, 8))
    assert np.array_equal(again.witness[0], z) and np.array_equal(again.witness[1], zs)


def test_validate_rejects_noninvariant_even_when_reflexive():
    # balanced sets with z added back still fail invariance
    m = build_complete_randomization(8, 4)
    rows = m.assignments

    def proposal(z):
        return [r for r in rows if int(r @ z) in (2, 4)]

    out = validate_conditioning_map(m, proposal)
    assert isinstance(out, ConditioningRejection) and out.reason == "invariance"
    z, zs = out.witness
    assert int(z @ zs) == 2


def test_intersection_units_cases():
    m = build_bernoulli(4, 0.5)
    expo = neighborhood_exposure(LINE4)
    null = level_set_null(expo)
    single = partition_by_function(m, lambda z: tuple(z))
    assert intersection_units(single, null, 0) == frozenset(range(4))
    full = whole_space(m)
    assert intersection_units(full, fisher_sharp_null(4), 0) == frozenset(range(4))
    # brute-force pairwise intersection over every cell
    part = partition_by_focal_units(m, expo, [0])
    generic = custom_null(4, null.mapping, null.impute)
    for cell in range(part.n_cells):
        rows = part.cell_rows(cell)
        want = set(range(4))
        for z in rows:
            for zs in rows:
                want &= null.imputable(z, zs)
        assert intersection_units(part, null, cell) == frozenset(want)
        assert intersection_units(part, generic, cell) == frozenset(want)
        e = expo.matrix(rows)
        if not (e[:, 3] == e[0, 3]).all():
            assert 3 not in want


def test_intersection_bruteforce_all_cells_spillover():
    m = build_bernoulli(5, 0.3)
    adj = np.zeros((5, 5), dtype=int)
    for i in range(4):
        adj[i, i + 1] = adj[i + 1, i] = 1
    expo = neighborhood_exposure(adj).recode({0: 0, 1: 1, 2: 2})
    null = spillover_null(expo)
    part = partition_by_function(m, count_treated([0, 1]), batched=True)
    for cell in range(part.n_cells):
        rows = part.cell_rows(cell)
        want = set(range(5))
        for z in rows:
            for zs in rows:
                want &= null.imputable(z, zs)
        assert intersection_units(part, null, cell) == frozenset(want)


def test_focal_partitions():
    m = build_bernoulli(4, 0.5)
    expo = own_plus_neighbour(4)
    all_focal = partition_by_focal_units(m, expo, range(4))
    by_fn = partition_by_function(m, lambda z: tuple(expo(z)))
    assert np.array_equal(all_focal.labels, by_fn.labels)
    one = partition_by_focal_units(m, expo, [1])
    values = {int(expo(z)[1]) for z in m.assignments}
    assert one.n_cells == len(values)
    # brute force: cells are level sets of the focal profile
    focal = [0, 3]
    part = partition_by_focal_units(m, expo, focal)
    for z in m.assignments:
        for zs in m.assignments:
            same = np.array_equal(expo(z)[focal], expo(zs)[focal])
            assert part.same_cell(z, zs) == same


def test_focal_requires_units():
    m = build_bernoulli(3, 0.5)
    with pytest.raises(Exception):
        partition_by_focal_units(m, treatment_exposure(3), [])


def test_null_exposure_graph_cases():
    m = build_bernoulli(2, 0.5)
    zero = ExposureMap(lambda z: np.zeros(3, dtype=int), 3, alphabet=(0, 1))
    g = build_null_exposure_graph(m, zero)
    assert g.n_edges == 3 * 4
    never = ExposureMap(lambda z: np.ones(3, dtype=int), 3, alphabet=(0, 1))
    assert build_null_exposure_graph(m, never).n_edges == 0
    # 3 units, 4 assignments; exposures hand-enumerated
    expo = ExposureMap(lambda z: np.array([z[0], z[1], z[0] * z[1]]), 3, alphabet=(0, 1))
    g = build_null_exposure_graph(m, expo)
    # rows: (0,0), (0,1), (1,0), (1,1)
    want = {(0, 0), (1, 0), (2, 0), (0, 1), (2, 1), (1, 2), (2, 2)}
    assert set(g.edges()) == want


def test_edgelist_roundtrip_and_errors():
    rng = np.random.default_rng(0)
    g = NullExposureGraph(rng.random((6, 4)) < 0.5)
    text = g.to_edgelist()
    assert text.splitlines()[0] == "units=4 assignments=6"
    back = NullExposureGraph.from_edgelist(io.StringIO(text))
    assert np.array_equal(back.adjacency, g.adjacency)
    with pytest.raises(DataError, match="line 3"):
        NullExposureGraph.from_edgelist("units=2 assignments=2\n0\t1\n5\t0\n")
    with pytest.raises(DataError, match="line 1"):
        NullExposureGraph.from_edgelist("nodes=2\n")


def check_decomposition(graph, cells):
    covered = sorted(a for b in cells for a in b.assignments)
    assert covered == list(range(graph.n_assignments))
    for b in cells:
        for u in b.units:
            for a in b.assignments:
                assert graph.has_edge(u, a)


def test_biclique_trivial_cases():
    full = NullExposureGraph(np.ones((5, 3), dtype=bool))
    cells = biclique_decomposition(full)
    assert len(cells) == 1 and cells[0].units == (0, 1, 2) and cells[0].assignments == tuple(range(5))
    empty = NullExposureGraph(np.zeros((4, 3), dtype=bool))
    cells = biclique_decomposition(empty)
    assert [c.assignments for c in cells] == [(0,), (1,), (2,), (3,)]
    assert all(c.units == () for c in cells)


def constrained_max(graph, min_units):
    adj = graph.adjacency
    best = 0
    for r in range(1, graph.n_assignments + 1):
        for subset in itertools.combinations(range(graph.n_assignments), r):
            units = int(adj[list(subset)].all(axis=0).sum())
            if units >= min_units:
                best = max(best, units * r)
    return best


def test_biclique_random_small_graphs_against_bruteforce():
    rng = np.random.default_rng(5)
    for _ in range(30):
        k, n = rng.integers(1, 11), rng.integers(1, 8)
        g = NullExposureGraph(rng.random((k, n)) < rng.uniform(0.2, 0.9))
        min_units = int(rng.integers(0, 3))
        cells = biclique_decomposition(g, min_units=min_units)
        check_decomposition(g, cells)
        if min_units <= 1:
            exact = max_biclique_edges_bruteforce(g)
            if exact > 0:
                assert cells[0].n_edges == exact
        constrained = constrained_max(g, max(min_units, 1))
        if constrained > 0:
            assert cells[0].n_edges == constrained and not cells[0].low_power
        assert biclique_decomposition(g) == biclique_decomposition(g)


def test_biclique_heuristic_path_is_sound():
    rng = np.random.default_rng(9)
    g = NullExposureGraph(rng.random((40, 12)) < 0.6)
    cells = biclique_decomposition(g, min_units=2, exact_limit=4)
    check_decomposition(g, cells)
    for c in cells:
        assert c.low_power == (len(c.units) < 2)


def test_partition_from_bicliques_on_interference_design():
    m = build_complete_randomization(6, 2)
    adj = np.zeros((6, 6), dtype=int)
    for i in range(5):
        adj[i, i + 1] = adj[i + 1, i] = 1
    expo = neighborhood_exposure(adj).recode({0: 0, 1: 1, 2: 1})
    g = build_null_exposure_graph(m, expo)
    cells = biclique_decomposition(g, min_units=1)
    part = partition_from_bicliques(m, cells)
    check_lemma1(part)
    null = spillover_null(expo)
    for b, cell in zip(cells, range(part.n_cells)):
        got = intersection_units(part, null, part.cell_of(m.assignments[b.assignments[0]]))
        assert set(b.units) <= got


def test_bayes_density_deterministic_recovers_cells():
    m = build_bernoulli(4, 0.3)
    g = count_treated([0, 1])
    var = deterministic_variable(g, batched=True)
    part = partition_by_function(m, g, batched=True)
    for val in range(3):
        dens = bayes_conditional_density(m, var, val)
        level = g(m.assignments) == val
        want = np.where(level, m.probabilities, 0.0)
        np.testing.assert_allclose(dens, want / want.sum(), atol=1e-15)
        assert dens.sum() == pytest.approx(1.0, abs=1e-9)
    pv = partition_variable(part)
    cell = part.cell_of(m.assignments[5])
    dens = bayes_conditional_density(m, pv, cell)
    assert np.array_equal(dens > 0, part.labels == cell)


def test_bayes_density_independent_kernel():
    m = build_complete_randomization(5, 2)
    var = independent_variable(["a", "b"], [0.3, 0.7])
    np.testing.assert_allclose(bayes_conditional_density(m, var, "b"), m.probabilities, atol=1e-15)
    with pytest.raises(UnreachableConditioningError):
        bayes_conditional_density(m, var, "c")


def test_bayes_density_randomized_choice_six_assignments():
    m = AssignmentModel.from_table(np.arange(6)[:, None], [0.1, 0.2, 0.05, 0.25, 0.3, 0.1])
    p1 = partition_by_function(m, lambda z: int(z[0]) // 3)
    p2 = partition_by_function(m, lambda z: int(z[0]) % 2)
    var = randomized_partition_choice([p1, p2], [0.4, 0.6])
    for v, part in enumerate([p1, p2]):
        for cell in range(part.n_cells):
            dens = bayes_conditional_density(m, var, (v, cell))
            mask = part.labels == cell
            want = np.where(mask, m.probabilities, 0) / m.probabilities[mask].sum()
            np.testing.assert_allclose(dens, want, atol=1e-15)
    for z in m.assignments:
        assert sum(var.probabilities(z).values()) == pytest.approx(1.0, abs=1e-9)
