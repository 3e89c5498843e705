"""Hierarchy tree, node ordering, and the summing matrix.

Nodes are indexed 0..N-1 in level-major order (root first, then level 1,
and so on); within a level the order is the first appearance in the edge
list. This ordering is what makes every derived matrix reproducible.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np

from .errors import ContractError, InputError

__all__ = [
    "Hierarchy",
    "SummingMatrix",
    "build_hierarchy",
    "trivial_hierarchy",
    "load_hierarchy",
    "summing_matrix",
    "ancestors",
    "aggregate",
    "is_coherent",
]


@dataclass(frozen=True)
class Hierarchy:
    """Validated tree of series with level structure.

    Attributes:
        nodes: node identifiers, level-major order, root at index 0.
        parent: child index -> parent index (no entry for the root).
        levels: level number per node, 0 for the root.
        bottom_indices: indices of the leaves, in node order.
        children: parent index -> tuple of child indices, in node order.
    """

    nodes: tuple[str, ...]
    parent: dict[int, int]
    levels: tuple[int, ...]
    bottom_indices: tuple[int, ...]
    children: dict[int, tuple[int, ...]] = field(repr=False)

    @property
    def n_series(self) -> int:
        return len(self.nodes)

    @property
    def n_bottom(self) -> int:
        return len(self.bottom_indices)

    @property
    def n_levels(self) -> int:
        return self.levels[-1] + 1

    def index_of(self, node_id: str) -> int:
        try:
            return self.nodes.index(node_id)
        except ValueError:
            raise InputError(f"unknown node id {node_id!r}") from None

    def level_members(self, level: int) -> tuple[int, ...]:
        return tuple(i for i, lv in enumerate(self.levels) if lv == level)

    def level_counts(self) -> tuple[int, ...]:
        counts = [0] * self.n_levels
        for lv in self.levels:
            counts[lv] += 1
        return tuple(counts)

    def edges(self) -> list[tuple[str, str]]:
        """Edge list (parent_id, child_id) in child node order."""
        return [
            (self.nodes[p], self.nodes[c]) for c, p in sorted(self.parent.items())
        ]


@dataclass(frozen=True)
class SummingMatrix:
    """Dense N x M 0/1 matrix expanding bottom values to all levels."""

    entries: np.ndarray

    def __post_init__(self):
        self.entries.setflags(write=False)

    @property
    def shape(self) -> tuple[int, int]:
        return self.entries.shape


def build_hierarchy(edges: list[tuple[str, str]]) -> Hierarchy:
    """Build and validate a Hierarchy from (parent_id, child_id) pairs.

    Raises InputError on cycles, multiple roots, duplicate edges, a child
    with two parents, or empty/blank identifiers. Single-child chains are
    legal but trigger a warning since top-down splits there are trivial.
    """
    if not edges:
        raise InputError("edge list is empty")

    first_seen: dict[str, int] = {}
    child_lists: dict[str, list[str]] = {}
    parent_of: dict[str, str] = {}
    seen_edges: set[tuple[str, str]] = set()

    for parent_id, child_id in edges:
        for node_id in (parent_id, child_id):
            if not isinstance(node_id, str) or not node_id.strip():
                raise InputError(f"node ids must be non-empty strings, got {node_id!r}")
            if node_id not in first_seen:
                first_seen[node_id] = len(first_seen)
        if (parent_id, child_id) in seen_edges:
            raise InputError(f"duplicate edge ({parent_id!r}, {child_id!r})")
        seen_edges.add((parent_id, child_id))
        if parent_id == child_id:
            raise InputError(f"cycle detected: self-edge on {parent_id!r}")
        if child_id in parent_of:
            raise InputError(
                f"node {child_id!r} has two parents "
                f"({parent_of[child_id]!r} and {parent_id!r})"
            )
        parent_of[child_id] = parent_id
        child_lists.setdefault(parent_id, []).append(child_id)

    all_ids = list(first_seen)
    roots = [node_id for node_id in all_ids if node_id not in parent_of]
    if not roots:
        raise InputError("cycle detected: no root node")
    if len(roots) > 1:
        raise InputError(f"multiple roots: {', '.join(repr(r) for r in sorted(roots))}")
    root = roots[0]

    # BFS from the root; anything unreached sits on a cycle.
    level_of: dict[str, int] = {root: 0}
    frontier = [root]
    while frontier:
        nxt = []
        for node_id in frontier:
            for child_id in child_lists.get(node_id, ()):
                level_of[child_id] = level_of[node_id] + 1
                nxt.append(child_id)
        frontier = nxt
    if len(level_of) != len(all_ids):
        stranded = sorted(set(all_ids) - set(level_of))
        raise InputError(f"cycle detected: unreachable nodes {', '.join(map(repr, stranded))}")

    ordered = sorted(all_ids, key=lambda node_id: (level_of[node_id], first_seen[node_id]))
    index = {node_id: i for i, node_id in enumerate(ordered)}

    parent = {index[c]: index[p] for c, p in parent_of.items()}
    children = {
        index[p]: tuple(index[c] for c in sorted(cs, key=index.get))
        for p, cs in child_lists.items()
    }
    bottom = tuple(i for i, node_id in enumerate(ordered) if node_id not in child_lists)
    levels = tuple(level_of[node_id] for node_id in ordered)

    singles = [ordered[p] for p, cs in children.items() if len(cs) == 1]
    if singles:
        warnings.warn(
            f"single-child chain at {', '.join(map(repr, sorted(singles)))}; "
            "top-down proportions there are trivially 1",
            stacklevel=2,
        )

    return Hierarchy(
        nodes=tuple(ordered),
        parent=parent,
        levels=levels,
        bottom_indices=bottom,
        children=children,
    )


def trivial_hierarchy(node_id: str = "total") -> Hierarchy:
    """One node that is both root and leaf; no edges can express this."""
    if not node_id.strip():
        raise InputError("node ids must be non-empty strings")
    return Hierarchy(
        nodes=(node_id,),
        parent={},
        levels=(0,),
        bottom_indices=(0,),
        children={},
    )


def load_hierarchy(path) -> Hierarchy:
    """Read an edge-list file: one `parent_id,child_id` per line, # comments."""
    edges = []
    try:
        with open(path, encoding="utf-8") as fh:
            for lineno, raw in enumerate(fh, start=1):
                line = raw.split("#", 1)[0].strip()
                if not line:
                    continue
                parts = [p.strip() for p in line.split(",")]
                if len(parts) != 2:
                    raise InputError(
                        f"{path}:{lineno}: expected `parent_id,child_id`, got {raw.strip()!r}"
                    )
                edges.append((parts[0], parts[1]))
    except OSError as exc:
        raise InputError(f"cannot read hierarchy file {path}: {exc}") from exc
    return build_hierarchy(edges)


def summing_matrix(h: Hierarchy) -> SummingMatrix:
    """The N x M matrix with entry (i, j) = 1 iff leaf j is a descendant of i.

    Leaf rows are one-hot; the row of an internal node marks every leaf in
    its subtree. Repeated calls return byte-identical matrices.
    """
    entries = np.zeros((h.n_series, h.n_bottom))
    for j, leaf in enumerate(h.bottom_indices):
        node = leaf
        entries[node, j] = 1.0
        while node in h.parent:
            node = h.parent[node]
            entries[node, j] = 1.0
    return SummingMatrix(entries)


def ancestors(h: Hierarchy, node: int) -> list[int]:
    """Path from the root down to the node's parent; empty for the root."""
    if not 0 <= node < h.n_series:
        raise ContractError(f"node index {node} out of range 0..{h.n_series - 1}")
    path = []
    while node in h.parent:
        node = h.parent[node]
        path.append(node)
    path.reverse()
    return path


def aggregate(h: Hierarchy, bottom: np.ndarray) -> np.ndarray:
    """Expand bottom-level values to all N series by exact per-level sums.

    Accepts shape (M,) or (M, T). Each parent is the sum of its children's
    already-computed values, so the result is coherent at tolerance zero
    under `is_coherent`, which recomputes the same sums.
    """
    bottom = np.asarray(bottom, dtype=float)
    if bottom.shape[0] != h.n_bottom:
        raise ContractError(
            f"expected {h.n_bottom} bottom series, got {bottom.shape[0]}"
        )
    out = np.zeros((h.n_series,) + bottom.shape[1:])
    for j, leaf in enumerate(h.bottom_indices):
        out[leaf] = bottom[j]
    # children always have larger indices than their parent
    for i in range(h.n_series - 1, -1, -1):
        kids = h.children.get(i)
        if kids:
            out[i] = out[list(kids)].sum(axis=0)
    return out


def is_coherent(h: Hierarchy, y: np.ndarray, tol: float) -> bool:
    """Whether every internal node matches the sum of its children.

    The check is relative with floor 1: for each internal node i the gap
    |y_i - sum(children)| must be <= tol * max(1, |y_i|). Accepts shape
    (N,) or (N, T); a 2-D input must pass at every time step.
    """
    y = np.asarray(y, dtype=float)
    if y.shape[0] != h.n_series:
        raise ContractError(f"expected {h.n_series} series, got {y.shape[0]}")
    if tol < 0:
        raise ContractError("tolerance must be nonnegative")
    for i, kids in h.children.items():
        gap = np.abs(y[i] - y[list(kids)].sum(axis=0))
        if np.any(gap > tol * np.maximum(1.0, np.abs(y[i]))):
            return False
    return True
