import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from hiercast import (
    ContractError,
    InputError,
    aggregate,
    ancestors,
    build_hierarchy,
    is_coherent,
    load_hierarchy,
    summing_matrix,
    trivial_hierarchy,
)
from helpers import FIG_EDGES, random_hierarchy, two_level_tree

EXPECTED_S = np.array(
    [
        [1, 1, 1, 1],
        [1, 1, 0, 0],
        [0, 0, 1, 1],
        [1, 0, 0, 0],
        [0, 1, 0, 0],
        [0, 0, 1, 0],
        [0, 0, 0, 1],
    ],
    dtype=float,
)


class TestBuildHierarchy:
    def test_level_major_ordering(self):
        h = two_level_tree()
        assert h.nodes == ("A", "B", "C", "D", "E", "F", "G")
        assert h.levels == (0, 1, 1, 2, 2, 2, 2)
        assert h.bottom_indices == (3, 4, 5, 6)

    def test_within_level_order_follows_edge_list(self):
        # C appears before B in the edge list, so it comes first in level 1
        h = build_hierarchy(
            [("A", "C"), ("A", "B"), ("C", "F"), ("C", "G"), ("B", "D"), ("B", "E")]
        )
        assert h.nodes == ("A", "C", "B", "F", "G", "D", "E")

    def test_counts(self):
        h = two_level_tree()
        assert h.n_series == 7
        assert h.n_bottom == 4
        assert h.n_levels == 3
        assert h.level_counts() == (1, 2, 4)
        assert h.level_members(1) == (1, 2)

    def test_children_sorted_and_parent_links(self):
        h = two_level_tree()
        assert h.children[0] == (1, 2)
        assert h.parent[3] == 1
        assert h.parent[6] == 2
        assert 0 not in h.parent

    def test_edges_round_trip(self):
        h = two_level_tree()
        assert build_hierarchy(h.edges()).nodes == h.nodes

    def test_empty_edge_list(self):
        with pytest.raises(InputError, match="empty"):
            build_hierarchy([])

    def test_duplicate_edge(self):
        with pytest.raises(InputError, match="duplicate edge"):
            build_hierarchy([("A", "B"), ("A", "B")])

    def test_self_edge_is_a_cycle(self):
        with pytest.raises(InputError, match="cycle"):
            build_hierarchy([("A", "A")])

    def test_two_parents(self):
        with pytest.raises(InputError, match="two parents"):
            build_hierarchy([("A", "B"), ("A", "C"), ("C", "B")])

    def test_pure_cycle_has_no_root(self):
        with pytest.raises(InputError, match="no root"):
            build_hierarchy([("A", "B"), ("B", "A")])

    def test_detached_cycle_is_unreachable(self):
        with pytest.raises(InputError, match="unreachable"):
            build_hierarchy([("A", "B"), ("C", "D"), ("D", "C")])

    def test_multiple_roots(self):
        with pytest.raises(InputError, match="multiple roots"):
            build_hierarchy([("A", "B"), ("C", "D")])

    def test_blank_identifier(self):
        with pytest.raises(InputError, match="non-empty"):
            build_hierarchy([("", "B")])

    def test_single_child_chain_warns(self):
        with pytest.warns(UserWarning, match="single-child"):
            h = build_hierarchy([("A", "B")])
        assert h.n_bottom == 1

    def test_trivial_hierarchy(self):
        h = trivial_hierarchy("only")
        assert h.n_series == 1
        assert h.bottom_indices == (0,)
        assert summing_matrix(h).entries.tolist() == [[1.0]]


class TestLoadHierarchy:
    def test_comments_and_blanks(self, tmp_path):
        f = tmp_path / "h.csv"
        f.write_text("# a comment\nA,B\n\nA,C  # trailing\nB,D\nB,E\nC,F\nC,G\n")
        h = load_hierarchy(f)
        assert h.nodes == ("A", "B", "C", "D", "E", "F", "G")

    def test_bad_line_reports_location(self, tmp_path):
        f = tmp_path / "h.csv"
        f.write_text("A,B\nA,B,C\n")
        with pytest.raises(InputError, match=r"h\.csv:2"):
            load_hierarchy(f)

    def test_missing_file(self, tmp_path):
        with pytest.raises(InputError, match="cannot read"):
            load_hierarchy(tmp_path / "absent.csv")


class TestSummingMatrix:
    def test_worked_tree(self):
        s = summing_matrix(two_level_tree())
        assert s.shape == (7, 4)
        np.testing.assert_array_equal(s.entries, EXPECTED_S)

    def test_three_level_chain(self):
        with pytest.warns(UserWarning):
            h = build_hierarchy([("A", "B"), ("B", "C")])
        np.testing.assert_array_equal(
            summing_matrix(h).entries, np.array([[1.0], [1.0], [1.0]])
        )

    def test_entries_read_only(self):
        s = summing_matrix(two_level_tree())
        with pytest.raises(ValueError):
            s.entries[0, 0] = 5.0


class TestAncestors:
    def test_leaf_path_is_root_first(self):
        h = two_level_tree()
        assert ancestors(h, h.index_of("D")) == [0, 1]

    def test_root_has_none(self):
        assert ancestors(two_level_tree(), 0) == []

    def test_out_of_range(self):
        with pytest.raises(ContractError, match="out of range"):
            ancestors(two_level_tree(), 7)


class TestAggregate:
    def test_worked_values(self):
        h = two_level_tree()
        out = aggregate(h, np.array([1.0, 2.0, 3.0, 4.0]))
        np.testing.assert_array_equal(out, [10.0, 3.0, 7.0, 1.0, 2.0, 3.0, 4.0])

    def test_exactly_coherent_at_zero_tolerance(self):
        h = two_level_tree()
        rng = np.random.default_rng(5)
        out = aggregate(h, rng.normal(0, 7.3, (4, 20)))
        assert is_coherent(h, out, 0.0)

    def test_matches_summing_matrix_product(self):
        h = two_level_tree()
        rng = np.random.default_rng(2)
        bottom = rng.random((4, 9))
        s = summing_matrix(h).entries
        np.testing.assert_allclose(aggregate(h, bottom), s @ bottom, rtol=1e-12)

    def test_wrong_bottom_count(self):
        with pytest.raises(ContractError, match="bottom"):
            aggregate(two_level_tree(), np.ones(3))


class TestIsCoherent:
    def test_accepts_exact_sums(self):
        h = two_level_tree()
        assert is_coherent(h, np.array([10.0, 3.0, 7.0, 1.0, 2.0, 3.0, 4.0]), 0.0)

    def test_rejects_broken_parent(self):
        h = two_level_tree()
        y = np.array([10.5, 3.0, 7.0, 1.0, 2.0, 3.0, 4.0])
        assert not is_coherent(h, y, 1e-3)
        assert is_coherent(h, y, 0.05)

    def test_two_dimensional_checks_every_step(self):
        h = two_level_tree()
        good = aggregate(h, np.ones((4, 3)))
        bad = good.copy()
        bad[0, 2] += 1.0
        assert is_coherent(h, good, 1e-9)
        assert not is_coherent(h, bad, 1e-9)

    def test_relative_floor_for_small_magnitudes(self):
        h = two_level_tree()
        y = aggregate(h, np.full(4, 1e-9))
        y[0] += 5e-10
        # gap 5e-10 against floor max(1, |y0|) = 1
        assert is_coherent(h, y, 1e-9)
        assert not is_coherent(h, y, 1e-10)

    def test_negative_tolerance(self):
        with pytest.raises(ContractError, match="tolerance"):
            is_coherent(two_level_tree(), np.zeros(7), -1.0)


@settings(max_examples=40, deadline=None)
@given(seed=st.integers(0, 10_000))
def test_random_trees_aggregate_coherently(seed):
    rng = np.random.default_rng(seed)
    h = random_hierarchy(rng)
    assert h.n_bottom <= 50
    assert h.n_levels <= 4
    bottom = rng.normal(0, 100, (h.n_bottom, 4))
    out = aggregate(h, bottom)
    assert is_coherent(h, out, 0.0)
    s = summing_matrix(h).entries
    # root row covers every leaf exactly once
    assert s[0].sum() == h.n_bottom
    np.testing.assert_allclose(out, s @ bottom, rtol=1e-9, atol=1e-9)


@settings(max_examples=25, deadline=None)
@given(seed=st.integers(0, 10_000))
def test_random_trees_ancestor_paths_terminate(seed):
    rng = np.random.default_rng(seed)
    h = random_hierarchy(rng)
    for leaf in h.bottom_indices:
        path = ancestors(h, leaf)
        assert path[:1] == [0] or (leaf == 0 and path == [])
        assert len(path) == h.levels[leaf]
