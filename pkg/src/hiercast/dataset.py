"""Panel ingestion, global scaling, and blocked cross-validation folds.

A panel holds every series of the hierarchy as rows of an N x T matrix,
already divided by the global scale (the mean absolute value over all
series in the training window). Ingestion either aggregates bottom-level
input upward or verifies that supplied upper levels are coherent.
"""

from __future__ import annotations

import csv
import json
import os
from dataclasses import dataclass

import numpy as np

from .errors import ContractError, InputError
from .hierarchy import Hierarchy, aggregate, build_hierarchy, is_coherent, load_hierarchy

__all__ = [
    "SeriesPanel",
    "Fold",
    "FoldSpec",
    "MODE_BOTTOM_ONLY",
    "MODE_ALL_LEVELS",
    "ingest",
    "panel_from_values",
    "blocked_folds",
    "naive_scale",
    "save_panel",
    "load_panel",
]

MODE_BOTTOM_ONLY = "bottom-only"
MODE_ALL_LEVELS = "all-levels"

COHERENCE_TOL = 1e-6

VALUES_HEADER = ["series_id", "timestamp", "value"]


@dataclass(frozen=True)
class SeriesPanel:
    """Aligned multi-series observations, scaled, with a train/test split.

    Attributes:
        hierarchy: the tree the rows belong to; row i is series for node i.
        values: N x T matrix after division by global_scale.
        timestamps: T ordered labels shared by all series.
        train_len: number of leading time steps in the training window.
        global_scale: the positive divisor applied at ingestion.
    """

    hierarchy: Hierarchy
    values: np.ndarray
    timestamps: tuple[str, ...]
    train_len: int
    global_scale: float

    def __post_init__(self):
        self.values.setflags(write=False)

    @property
    def n_steps(self) -> int:
        return self.values.shape[1]

    @property
    def test_len(self) -> int:
        return self.n_steps - self.train_len

    @property
    def train_window(self) -> range:
        return range(self.train_len)

    @property
    def test_window(self) -> range:
        return range(self.train_len, self.n_steps)

    def raw_values(self) -> np.ndarray:
        """Values in original units (scaling undone)."""
        return self.values * self.global_scale


@dataclass(frozen=True)
class Fold:
    """One blocked fold: a contiguous validation window inside the training period."""

    val_start: int
    val_stop: int
    train_len: int

    @property
    def val_range(self) -> range:
        return range(self.val_start, self.val_stop)

    def train_ranges(self) -> list[range]:
        """Training period minus the validation window."""
        out = []
        if self.val_start > 0:
            out.append(range(0, self.val_start))
        if self.val_stop < self.train_len:
            out.append(range(self.val_stop, self.train_len))
        return out

    def train_times(self) -> np.ndarray:
        parts = [np.arange(r.start, r.stop) for r in self.train_ranges()]
        return np.concatenate(parts) if parts else np.empty(0, dtype=int)


@dataclass(frozen=True)
class FoldSpec:
    folds: tuple[Fold, ...]

    @property
    def k(self) -> int:
        return len(self.folds)


def blocked_folds(panel: SeriesPanel, k: int) -> FoldSpec:
    """Split the training period into k contiguous validation windows.

    Window sizes are floor(train_len / k); remainder steps are appended to
    the earliest windows, one each, so sizes never differ by more than one.
    Fold i's validation window is the i-th block in time order.
    """
    if k < 2:
        raise ContractError(f"fold count must be >= 2, got {k}")
    train_len = panel.train_len
    if train_len < k:
        raise ContractError(
            f"training period too short: {train_len} steps cannot form {k} folds"
        )
    base, rem = divmod(train_len, k)
    folds = []
    start = 0
    for i in range(k):
        size = base + (1 if i < rem else 0)
        folds.append(Fold(val_start=start, val_stop=start + size, train_len=train_len))
        start += size
    return FoldSpec(folds=tuple(folds))


def naive_scale(panel: SeriesPanel, times=None) -> np.ndarray:
    """Per-series mean absolute one-step naive error on the training window.

    `times` restricts the target steps; a target t contributes only when
    t-1 is also in `times` (defaults to the whole training window).
    """
    if times is None:
        targets = np.arange(1, panel.train_len)
    else:
        tset = set(int(t) for t in times)
        targets = np.array(sorted(t for t in tset if (t - 1) in tset), dtype=int)
    if targets.size == 0:
        raise ContractError("no usable steps to compute the naive error")
    diffs = np.abs(panel.values[:, targets] - panel.values[:, targets - 1])
    return diffs.mean(axis=1)


def _parse_values_csv(path) -> tuple[dict[str, list[float]], list[str]]:
    """Read `series_id,timestamp,value` rows into per-series value lists."""
    per_series: dict[str, list[float]] = {}
    per_series_ts: dict[str, list[str]] = {}
    try:
        fh = open(path, newline="", encoding="utf-8")
    except OSError as exc:
        raise InputError(f"cannot read values file {path}: {exc}") from exc
    with fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or [h.strip() for h in header] != VALUES_HEADER:
            raise InputError(
                f"{path}: expected header {','.join(VALUES_HEADER)}, got {header}"
            )
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != 3:
                raise InputError(f"{path}:{lineno}: expected 3 fields, got {len(row)}")
            sid, ts, raw = (f.strip() for f in row)
            if not sid or not ts or not raw:
                raise InputError(f"{path}:{lineno}: empty field")
            try:
                value = float(raw)
            except ValueError:
                raise InputError(f"{path}:{lineno}: bad value {raw!r}") from None
            if not np.isfinite(value):
                raise InputError(f"{path}:{lineno}: non-finite value {raw!r}")
            per_series.setdefault(sid, []).append(value)
            per_series_ts.setdefault(sid, []).append(ts)

    if not per_series:
        raise InputError(f"{path}: no data rows")

    timestamps = None
    ref_series = None
    for sid, ts_list in per_series_ts.items():
        if len(set(ts_list)) != len(ts_list):
            raise InputError(f"{path}: duplicate timestamp for series {sid!r}")
        if sorted(ts_list) != ts_list:
            raise InputError(f"{path}: timestamps for series {sid!r} are not ordered")
        if timestamps is None:
            timestamps, ref_series = ts_list, sid
        elif ts_list != timestamps:
            raise InputError(
                f"{path}: series {sid!r} timestamps differ from series {ref_series!r}"
            )
    return per_series, timestamps


def panel_from_values(
    hierarchy: Hierarchy,
    values_by_id: dict[str, np.ndarray],
    timestamps,
    test_len: int,
    mode: str = MODE_BOTTOM_ONLY,
) -> SeriesPanel:
    """Assemble a panel from per-series arrays already aligned in time.

    In bottom-only mode exactly the leaves must be present; upper levels
    are rebuilt by aggregation. In all-levels mode all N series must be
    present and coherence is verified per time step at relative 1e-6.
    """
    h = hierarchy
    if mode == MODE_BOTTOM_ONLY:
        wanted = [h.nodes[i] for i in h.bottom_indices]
    elif mode == MODE_ALL_LEVELS:
        wanted = list(h.nodes)
    else:
        raise InputError(f"unknown mode {mode!r}")

    missing = [s for s in wanted if s not in values_by_id]
    if missing:
        raise InputError(f"missing series: {', '.join(map(repr, missing))}")
    extra = sorted(set(values_by_id) - set(wanted))
    if extra:
        raise InputError(f"unexpected series for mode {mode}: {', '.join(map(repr, extra))}")

    lengths = {s: len(values_by_id[s]) for s in wanted}
    n_steps = lengths[wanted[0]]
    ragged = {s: n for s, n in lengths.items() if n != n_steps}
    if ragged:
        raise InputError(f"ragged series lengths: {ragged}")
    if len(timestamps) != n_steps:
        raise InputError(f"{len(timestamps)} timestamps for {n_steps} observations")

    stacked = np.array([values_by_id[s] for s in wanted], dtype=float)
    if not np.all(np.isfinite(stacked)):
        raise InputError("non-finite values in input")

    if mode == MODE_BOTTOM_ONLY:
        full = aggregate(h, stacked)
    else:
        full = stacked
        if not is_coherent(h, full, COHERENCE_TOL):
            raise InputError(
                f"input is not coherent at relative tolerance {COHERENCE_TOL:g}; "
                "some parent differs from the sum of its children"
            )

    train_len = n_steps - test_len
    if test_len < 0:
        raise InputError(f"test_len must be nonnegative, got {test_len}")
    if train_len < 2:
        raise InputError(
            f"need at least 2 training steps, got {train_len} "
            f"({n_steps} observations, test_len {test_len})"
        )

    global_scale = float(np.mean(np.abs(full[:, :train_len])))
    if global_scale == 0.0:
        raise InputError("training values are all zero; global scale undefined")

    return SeriesPanel(
        hierarchy=h,
        values=full / global_scale,
        timestamps=tuple(timestamps),
        train_len=train_len,
        global_scale=global_scale,
    )


def ingest(values_path, hierarchy_path, test_len: int, mode: str = MODE_BOTTOM_ONLY) -> SeriesPanel:
    """Parse a hierarchy file and a values CSV into a validated SeriesPanel."""
    h = load_hierarchy(hierarchy_path)
    per_series, timestamps = _parse_values_csv(values_path)
    return panel_from_values(h, per_series, timestamps, test_len, mode)


# --- workspace artifacts ---------------------------------------------------

PANEL_FILE = "panel.csv"
MANIFEST_FILE = "manifest.json"
EDGES_FILE = "hierarchy_edges.csv"

_SCHEMA_VERSION = 1


def _atomic_write(path, text: str):
    tmp = f"{path}.tmp"
    with open(tmp, "w", newline="", encoding="utf-8") as fh:
        fh.write(text)
    os.replace(tmp, path)


def save_panel(panel: SeriesPanel, out_dir):
    """Write panel.csv (scaled values), hierarchy_edges.csv, and manifest.json."""
    os.makedirs(out_dir, exist_ok=True)
    h = panel.hierarchy

    rows = ["series_id,timestamp,value"]
    for i, sid in enumerate(h.nodes):
        for t, ts in enumerate(panel.timestamps):
            rows.append(f"{sid},{ts},{float(panel.values[i, t])!r}")
    _atomic_write(os.path.join(out_dir, PANEL_FILE), "\n".join(rows) + "\n")

    edge_rows = [f"{p},{c}" for p, c in h.edges()]
    _atomic_write(os.path.join(out_dir, EDGES_FILE), "\n".join(edge_rows) + "\n")

    manifest = {
        "schema_version": _SCHEMA_VERSION,
        "n_series": h.n_series,
        "n_bottom": h.n_bottom,
        "level_counts": list(h.level_counts()),
        "train_len": panel.train_len,
        "test_len": panel.test_len,
        "global_scale": repr(panel.global_scale),
        "scaling": "mean absolute value over all series, training window",
    }
    _atomic_write(
        os.path.join(out_dir, MANIFEST_FILE),
        json.dumps(manifest, indent=2, sort_keys=True) + "\n",
    )


def load_panel(out_dir) -> SeriesPanel:
    """Rebuild the SeriesPanel from a workspace written by save_panel."""
    manifest_path = os.path.join(out_dir, MANIFEST_FILE)
    try:
        with open(manifest_path, encoding="utf-8") as fh:
            manifest = json.load(fh)
    except OSError as exc:
        raise InputError(f"no panel workspace at {out_dir}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise InputError(f"corrupt manifest {manifest_path}: {exc}") from exc
    if manifest.get("schema_version") != _SCHEMA_VERSION:
        raise InputError(f"unsupported manifest schema in {manifest_path}")

    h = load_hierarchy(os.path.join(out_dir, EDGES_FILE))
    per_series, timestamps = _parse_values_csv(os.path.join(out_dir, PANEL_FILE))

    wanted = list(h.nodes)
    missing = [s for s in wanted if s not in per_series]
    if missing:
        raise InputError(f"panel file is missing series: {missing}")
    values = np.array([per_series[s] for s in wanted], dtype=float)
    if not is_coherent(h, values, COHERENCE_TOL):
        raise InputError(f"stored panel is not coherent at {COHERENCE_TOL:g}")

    return SeriesPanel(
        hierarchy=h,
        values=values,
        timestamps=tuple(timestamps),
        train_len=int(manifest["train_len"]),
        global_scale=float(manifest["global_scale"]),
    )
