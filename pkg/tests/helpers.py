"""Shared builders for the test suite."""

from __future__ import annotations

import numpy as np

from hiercast import Hierarchy, SeriesPanel, build_hierarchy, panel_from_values
from hiercast.hierarchy import aggregate

FIG_EDGES = [("A", "B"), ("A", "C"), ("B", "D"), ("B", "E"), ("C", "F"), ("C", "G")]


def two_level_tree() -> Hierarchy:
    """Root A over B, C; leaves D, E under B and F, G under C."""
    return build_hierarchy(FIG_EDGES)


def random_hierarchy(rng, max_levels: int = 4, max_leaves: int = 50) -> Hierarchy:
    """Random tree within the given depth and leaf budget, no unary chains."""
    counter = 0

    def fresh():
        nonlocal counter
        name = f"n{counter}"
        counter += 1
        return name

    leaf_budget = int(rng.integers(2, max_leaves + 1))
    root = fresh()
    edges = []
    frontier = [(root, 0)]
    done_leaves = 0
    while frontier:
        node, depth = frontier.pop(0)
        slots = leaf_budget - (done_leaves + len(frontier) + 1)
        can_branch = depth < max_levels - 1 and slots >= 1
        if can_branch and (depth == 0 or rng.random() < 0.6):
            k = int(rng.integers(2, min(4, slots + 1) + 1))
            for _ in range(k):
                child = fresh()
                edges.append((node, child))
                frontier.append((child, depth + 1))
        else:
            done_leaves += 1
    return build_hierarchy(edges)


def make_panel(
    h: Hierarchy,
    rng=None,
    n_steps: int = 40,
    test_len: int = 8,
    offset: float = 10.0,
) -> SeriesPanel:
    """Panel of positive noisy sinusoid leaves aggregated upward."""
    if rng is None:
        rng = np.random.default_rng(0)
    t = np.arange(n_steps)
    bottom = np.stack([
        np.abs(
            offset
            + 3.0 * np.sin(2 * np.pi * t / 12 + k)
            + rng.normal(0, 0.5, n_steps)
        )
        for k in range(h.n_bottom)
    ])
    values = {
        h.nodes[leaf]: bottom[j] for j, leaf in enumerate(h.bottom_indices)
    }
    stamps = [f"t{i:04d}" for i in range(n_steps)]
    return panel_from_values(h, values, stamps, test_len)


def raw_panel(h: Hierarchy, bottom: np.ndarray, train_len: int) -> SeriesPanel:
    """Panel built directly from bottom values with no global scaling."""
    full = aggregate(h, np.asarray(bottom, dtype=float))
    n_steps = full.shape[1]
    return SeriesPanel(
        hierarchy=h,
        values=full,
        timestamps=tuple(f"t{i:04d}" for i in range(n_steps)),
        train_len=train_len,
        global_scale=1.0,
    )
