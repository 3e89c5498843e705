"""Classical reconciliation: the linear y-tilde = S P y-hat family plus
the per-step top-down descent on forecasted proportions.

The linear methods differ only in how the M x N mapping matrix P is
built: bottom-up selection, historical top-down proportions, the
identity-weighted projection, or the error-covariance-weighted (trace
minimizing) projection.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np

from .dataset import SeriesPanel
from .errors import ContractError, InputError, NumericError
from .hierarchy import Hierarchy, aggregate, summing_matrix

__all__ = [
    "MappingMatrix",
    "bu_matrix",
    "tdhp_matrix",
    "tdfp_reconcile",
    "oc_matrix",
    "error_covariance",
    "tm_matrix",
    "reconcile_linear",
    "middle_out_reconcile",
    "SHRINK_DIAGONAL",
    "SHRINK_DIAGONAL_ONLY",
]

SHRINK_DIAGONAL = "diagonal-shrinkage"
SHRINK_DIAGONAL_ONLY = "diagonal-only"

ZERO_SIBLING_TOL = 1e-12


@dataclass(frozen=True)
class MappingMatrix:
    """M x N matrix sending base forecasts to bottom-level reconciled values."""

    entries: np.ndarray
    method: str

    def __post_init__(self):
        self.entries.setflags(write=False)

    @property
    def shape(self) -> tuple[int, int]:
        return self.entries.shape


def bu_matrix(h: Hierarchy) -> MappingMatrix:
    """Selection matrix keeping each leaf's own base forecast."""
    entries = np.zeros((h.n_bottom, h.n_series))
    for j, leaf in enumerate(h.bottom_indices):
        entries[j, leaf] = 1.0
    return MappingMatrix(entries=entries, method="BU")


def tdhp_matrix(h: Hierarchy, panel: SeriesPanel) -> MappingMatrix:
    """Top-down split of the root forecast by historical proportions.

    The proportion for leaf j is the ratio of training-window means,
    mean(leaf j) / mean(root). Only the root column is nonzero.
    """
    means = panel.values[:, : panel.train_len].mean(axis=1)
    root_mean = means[0]
    if root_mean == 0.0:
        raise ContractError("top series has zero training mean; proportions undefined")
    entries = np.zeros((h.n_bottom, h.n_series))
    for j, leaf in enumerate(h.bottom_indices):
        entries[j, 0] = means[leaf] / root_mean
    return MappingMatrix(entries=entries, method="TDHP")


def tdfp_reconcile(h: Hierarchy, y_hat: np.ndarray) -> np.ndarray:
    """Descend the tree splitting each parent by its children's forecast shares.

    The root keeps its base forecast; each child receives
    parent_value * (own forecast / sibling forecast sum). A sibling group
    whose forecast sum is below 1e-12 in absolute value is split equally
    and reported with a warning. Works on one step (N,) or a window (N, W).
    """
    y_hat = np.asarray(y_hat, dtype=float)
    squeeze = y_hat.ndim == 1
    y = y_hat[:, None] if squeeze else y_hat
    if y.shape[0] != h.n_series:
        raise ContractError(f"expected {h.n_series} forecasts, got {y.shape[0]}")

    out = np.empty_like(y)
    out[0] = y[0]
    degenerate = []
    for i in range(h.n_series):
        kids = h.children.get(i)
        if not kids:
            continue
        kid_rows = y[list(kids)]
        sib_sum = kid_rows.sum(axis=0)
        zero = np.abs(sib_sum) < ZERO_SIBLING_TOL
        if zero.any():
            degenerate.append(h.nodes[i])
        safe = np.where(zero, 1.0, sib_sum)
        for k in kids:
            share = np.where(zero, 1.0 / len(kids), y[k] / safe)
            out[k] = out[i] * share
    if degenerate:
        warnings.warn(
            "sibling forecasts sum to ~0 under "
            f"{', '.join(map(repr, degenerate))}; split equally",
            stacklevel=2,
        )
    return out[:, 0] if squeeze else out


def oc_matrix(h: Hierarchy) -> MappingMatrix:
    """Identity-weighted least-squares projection, P = (S'S)^-1 S'."""
    s = summing_matrix(h).entries
    gram = s.T @ s
    entries = np.linalg.solve(gram, s.T)
    return MappingMatrix(entries=entries, method="OC")


def _shrinkage_intensity(x: np.ndarray) -> float:
    """Optimal weight on the diagonal target for a residual matrix x (R x N).

    Standard plug-in estimate: ratio of the summed sampling variances of the
    off-diagonal correlations to their summed squares, clamped to [0, 1].
    """
    r_count = x.shape[0]
    second = x.T @ x / r_count
    std = np.sqrt(np.diag(second))
    std = np.where(std > 0.0, std, 1.0)
    xs = x / std
    corm = xs.T @ xs / r_count
    xs2 = xs**2
    v = (xs2.T @ xs2 - (xs.T @ xs) ** 2 / r_count) / (r_count * (r_count - 1))
    np.fill_diagonal(v, 0.0)
    d = corm**2
    np.fill_diagonal(d, 0.0)
    denom = d.sum()
    if denom == 0.0:
        return 0.0
    return float(min(max(v.sum() / denom, 0.0), 1.0))


def error_covariance(residuals: np.ndarray, shrink: str = SHRINK_DIAGONAL) -> np.ndarray:
    """Covariance of base-forecast errors, optionally shrunk toward its diagonal.

    Residuals are N series by R steps, assumed mean zero (one-step in-sample
    errors); the second-moment matrix about zero is used, as is conventional
    for reconciliation weights. diagonal-shrinkage blends toward diag(W) with
    the plug-in intensity; diagonal-only discards off-diagonals entirely.
    """
    residuals = np.asarray(residuals, dtype=float)
    if residuals.ndim != 2:
        raise ContractError("residuals must be an N x R matrix")
    if residuals.shape[1] < 2:
        raise ContractError(
            f"need at least 2 residual steps, got {residuals.shape[1]}"
        )
    if not np.all(np.isfinite(residuals)):
        raise ContractError("residuals contain non-finite values")

    x = residuals.T
    w = x.T @ x / x.shape[0]
    if shrink == SHRINK_DIAGONAL_ONLY:
        return np.diag(np.diag(w))
    if shrink != SHRINK_DIAGONAL:
        raise InputError(f"unknown shrink mode {shrink!r}")
    lam = _shrinkage_intensity(x)
    return lam * np.diag(np.diag(w)) + (1.0 - lam) * w


def tm_matrix(h: Hierarchy, w: np.ndarray) -> MappingMatrix:
    """Covariance-weighted projection, P = (S'W^-1 S)^-1 S'W^-1."""
    s = summing_matrix(h).entries
    w = np.asarray(w, dtype=float)
    if w.shape != (h.n_series, h.n_series):
        raise ContractError(f"weight matrix must be {h.n_series} square, got {w.shape}")
    scale = np.max(np.abs(w))
    if scale == 0.0 or np.max(np.abs(w - w.T)) > 1e-8 * scale:
        raise NumericError("weight matrix is not symmetric")
    try:
        np.linalg.cholesky(w)
    except np.linalg.LinAlgError as exc:
        raise NumericError(f"weight matrix is not positive-definite: {exc}") from exc

    winv_s = np.linalg.solve(w, s)
    entries = np.linalg.solve(s.T @ winv_s, winv_s.T)
    return MappingMatrix(entries=entries, method="TM")


def _entries(mat):
    return mat.entries if hasattr(mat, "entries") else np.asarray(mat, dtype=float)


def reconcile_linear(p_mat, s_mat, y_hat: np.ndarray) -> np.ndarray:
    """Apply y-tilde = S (P y-hat); accepts one step (N,) or a window (N, W)."""
    p = _entries(p_mat)
    s = _entries(s_mat)
    y_hat = np.asarray(y_hat, dtype=float)
    if p.shape[1] != y_hat.shape[0] or s.shape[1] != p.shape[0]:
        raise ContractError(
            f"shape mismatch: S {s.shape}, P {p.shape}, input {y_hat.shape}"
        )
    return s @ (p @ y_hat)


def middle_out_reconcile(h: Hierarchy, y_hat: np.ndarray, level: int) -> np.ndarray:
    """Anchor one level's base forecasts; split downward, sum upward.

    Series at the anchor level keep their base forecasts; their subtrees are
    filled by the forecast-share descent, and everything above the anchor
    level is rebuilt by exact aggregation of the resulting bottom values.
    """
    if not 0 <= level < h.n_levels:
        raise ContractError(f"level {level} out of range 0..{h.n_levels - 1}")
    y_hat = np.asarray(y_hat, dtype=float)
    squeeze = y_hat.ndim == 1
    y = y_hat[:, None] if squeeze else y_hat
    if y.shape[0] != h.n_series:
        raise ContractError(f"expected {h.n_series} forecasts, got {y.shape[0]}")

    filled = np.empty_like(y)
    degenerate = []
    for i in range(h.n_series):
        # anchors keep their forecasts; so does a leaf sitting above the
        # anchor level, since no anchor covers it
        if h.levels[i] == level or (h.levels[i] < level and i not in h.children):
            filled[i] = y[i]
        if h.levels[i] < level:
            continue
        kids = h.children.get(i)
        if not kids:
            continue
        kid_rows = y[list(kids)]
        sib_sum = kid_rows.sum(axis=0)
        zero = np.abs(sib_sum) < ZERO_SIBLING_TOL
        if zero.any():
            degenerate.append(h.nodes[i])
        safe = np.where(zero, 1.0, sib_sum)
        for k in kids:
            share = np.where(zero, 1.0 / len(kids), y[k] / safe)
            filled[k] = filled[i] * share
    if degenerate:
        warnings.warn(
            "sibling forecasts sum to ~0 under "
            f"{', '.join(map(repr, degenerate))}; split equally",
            stacklevel=2,
        )

    bottom = filled[list(h.bottom_indices)]
    out = aggregate(h, bottom)
    return out[:, 0] if squeeze else out
