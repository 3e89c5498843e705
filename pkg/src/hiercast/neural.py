"""Trainable encoder with a fixed summing decoder.

The encoder is a small feed-forward ReLU network mapping all N base
forecasts to M bottom-level values; multiplying by the summing matrix
then yields coherent forecasts at every level. Inputs are divided by a
per-series scale on the way in and outputs multiplied by the bottom
entries of that scale on the way out. The scale is snapped to powers of
two so the divide/multiply round trip is exact in binary floating point,
which is what makes the freshly initialized network reproduce bottom-up
reconciliation bit for bit on nonnegative inputs.

Two wirings are available: fully-connected hidden layers of width M, and
a "shrunk" variant with an 8-unit sub-network per leaf that may only read
the leaf's own forecast and its ancestors'. Initialization sets a chain
of pass-through weights of 1 from each bottom input to its output unit
and everything else to 0.

Training is plain minibatch gradient descent with decoupled weight decay
and adaptive moments, backpropagation written out by hand so the loss
kinks (|error| at 0, ReLU at 0) use subgradient 0 deterministically.
"""

from __future__ import annotations

import json
import os
import struct
import warnings
from dataclasses import dataclass, replace

import numpy as np

from .dataset import SeriesPanel, naive_scale as panel_naive_scale
from .errors import ContractError, NumericError
from .forecasting import ForecastSet
from .hierarchy import (
    Hierarchy,
    ancestors,
    build_hierarchy,
    summing_matrix,
    trivial_hierarchy,
)

__all__ = [
    "ARCH_FC",
    "ARCH_SHRUNK",
    "LOSS_MASE",
    "LOSS_MLAE",
    "LOSS_REG_MASE",
    "EncoderConfig",
    "Encoder",
    "Ensemble",
    "AdamState",
    "scale_factors",
    "build_encoder",
    "encode",
    "reconcile",
    "loss",
    "gradients",
    "GradientSet",
    "init_adam",
    "optimizer_step",
    "train",
    "train_ensemble",
    "save_model",
    "load_model",
]

ARCH_FC = "fully-connected"
ARCH_SHRUNK = "shrunk"

LOSS_MASE = "mase"
LOSS_MLAE = "mlae"
LOSS_REG_MASE = "regularized-mase"

SHRUNK_BLOCK = 8

ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8


@dataclass(frozen=True)
class EncoderConfig:
    architecture: str = ARCH_FC
    hidden_layers: int = 0
    dropout: float = 0.0
    learning_rate: float = 1e-3
    weight_decay: float = 0.0
    epochs: int = 100
    batch_size: int = 128
    loss: str = LOSS_MASE
    ensemble_size: int = 10
    seed: int = 0

    def __post_init__(self):
        if self.architecture not in (ARCH_FC, ARCH_SHRUNK):
            raise ContractError(f"unknown architecture {self.architecture!r}")
        if self.hidden_layers not in (0, 1, 2, 3):
            raise ContractError(f"hidden_layers must be 0..3, got {self.hidden_layers}")
        if not 0.0 <= self.dropout < 1.0:
            raise ContractError(f"dropout must be in [0, 1), got {self.dropout}")
        if self.learning_rate <= 0.0:
            raise ContractError("learning_rate must be positive")
        if self.weight_decay < 0.0:
            raise ContractError("weight_decay must be nonnegative")
        if self.epochs < 0:
            raise ContractError("epochs must be nonnegative")
        if self.batch_size < 1:
            raise ContractError("batch_size must be at least 1")
        if self.loss not in (LOSS_MASE, LOSS_MLAE, LOSS_REG_MASE):
            raise ContractError(f"unknown loss {self.loss!r}")
        if self.ensemble_size < 1:
            raise ContractError("ensemble_size must be at least 1")


@dataclass
class Encoder:
    """Network parameters plus the fixed scaling and wiring they belong to.

    weights[l] has shape (out_l, in_l); masks, when present, align with
    weights and hold 1.0 where a connection is allowed.
    """

    config: EncoderConfig
    hierarchy: Hierarchy
    scale: np.ndarray
    weights: list[np.ndarray]
    biases: list[np.ndarray]
    masks: list[np.ndarray] | None

    @property
    def bottom_scale(self) -> np.ndarray:
        return self.scale[list(self.hierarchy.bottom_indices)]


@dataclass(frozen=True)
class Ensemble:
    members: tuple[Encoder, ...]

    def __post_init__(self):
        if not self.members:
            raise ContractError("ensemble needs at least one member")
        first = self.members[0]
        for m in self.members[1:]:
            if replace(m.config, seed=0) != replace(first.config, seed=0):
                raise ContractError("ensemble members must share a configuration")
            if not np.array_equal(m.scale, first.scale):
                raise ContractError("ensemble members must share the scale vector")
            if m.hierarchy.nodes != first.hierarchy.nodes:
                raise ContractError("ensemble members must share the hierarchy")


def scale_factors(panel: SeriesPanel, times=None) -> np.ndarray:
    """Per-series factor 1 + mean absolute value over the training window.

    `times` restricts the window (used when training inside a CV fold).
    Entries are always >= 1, so dividing by them shrinks, never inflates.
    """
    if times is None:
        window = panel.values[:, : panel.train_len]
    else:
        idx = np.asarray(sorted(set(int(t) for t in times)), dtype=int)
        if idx.size == 0:
            raise ContractError("empty time selection for scale factors")
        window = panel.values[:, idx]
    return 1.0 + np.abs(window).mean(axis=1)


def _quantize_scale(scale: np.ndarray) -> np.ndarray:
    """Snap to the nearest power of two, floored at 1.

    Powers of two make x/s*s == x exact, which the initialization
    guarantee below relies on; the snap changes each factor by at most
    a factor of sqrt(2), irrelevant to its normalizing job.
    """
    return np.maximum(np.exp2(np.rint(np.log2(scale))), 1.0)


def _layer_dims(config: EncoderConfig, h: Hierarchy) -> list[int]:
    n, m = h.n_series, h.n_bottom
    if config.architecture == ARCH_FC:
        hidden = m
    else:
        hidden = SHRUNK_BLOCK * m
    return [n] + [hidden] * config.hidden_layers + [m]


def _shrunk_masks(config: EncoderConfig, h: Hierarchy) -> list[np.ndarray]:
    """Connectivity masks giving each leaf an 8-unit private sub-network.

    The first layer may read only the leaf's own forecast and its
    ancestors'; hidden layers are block-diagonal per leaf; the output
    unit of leaf j reads only block j.
    """
    m = h.n_bottom
    dims = _layer_dims(config, h)
    masks = [np.zeros((dims[i + 1], dims[i])) for i in range(len(dims) - 1)]

    allowed_cols = []
    for leaf in h.bottom_indices:
        allowed_cols.append([leaf] + ancestors(h, leaf))

    first = masks[0]
    for j in range(m):
        rows = [j] if config.hidden_layers == 0 else range(
            SHRUNK_BLOCK * j, SHRUNK_BLOCK * (j + 1)
        )
        for r in rows:
            first[r, allowed_cols[j]] = 1.0

    for li in range(1, config.hidden_layers):
        for j in range(m):
            lo, hi = SHRUNK_BLOCK * j, SHRUNK_BLOCK * (j + 1)
            masks[li][lo:hi, lo:hi] = 1.0

    if config.hidden_layers > 0:
        last = masks[-1]
        for j in range(m):
            last[j, SHRUNK_BLOCK * j : SHRUNK_BLOCK * (j + 1)] = 1.0
    return masks


def build_encoder(config: EncoderConfig, h: Hierarchy, scale: np.ndarray) -> Encoder:
    """Zero-initialized network except for a pass-through chain of ones.

    The chain routes each scaled bottom input to its own output unit
    (through the first unit of the leaf's block, or the j-th hidden unit
    in the fully-connected case), so the untrained network is exactly
    bottom-up reconciliation on nonnegative inputs.
    """
    scale = np.asarray(scale, dtype=float)
    if scale.shape != (h.n_series,):
        raise ContractError(f"scale must have {h.n_series} entries, got {scale.shape}")
    if not np.all(np.isfinite(scale)) or np.any(scale < 1.0):
        raise ContractError("scale entries must be finite and >= 1")
    qscale = _quantize_scale(scale)

    dims = _layer_dims(config, h)
    weights = [np.zeros((dims[i + 1], dims[i])) for i in range(len(dims) - 1)]
    biases = [np.zeros(d) for d in dims[1:]]
    masks = _shrunk_masks(config, h) if config.architecture == ARCH_SHRUNK else None

    m = h.n_bottom
    stride = 1 if config.architecture == ARCH_FC else SHRUNK_BLOCK
    for j, leaf in enumerate(h.bottom_indices):
        first_row = j if config.hidden_layers == 0 else stride * j
        weights[0][first_row, leaf] = 1.0
    for li in range(1, config.hidden_layers):
        for j in range(m):
            weights[li][stride * j, stride * j] = 1.0
    if config.hidden_layers > 0:
        for j in range(m):
            weights[-1][j, stride * j] = 1.0

    return Encoder(
        config=config,
        hierarchy=h,
        scale=qscale,
        weights=weights,
        biases=biases,
        masks=masks,
    )


def _effective_weights(enc: Encoder) -> list[np.ndarray]:
    if enc.masks is None:
        return enc.weights
    return [w * mk for w, mk in zip(enc.weights, enc.masks)]


def _forward(enc: Encoder, x: np.ndarray, train_mode: bool, rng):
    """Run the network on scaled inputs x (width, batch).

    Returns (activations per layer incl. input, pre-activations per hidden
    layer, dropout keep-masks per hidden layer or None, output).
    """
    rate = enc.config.dropout
    use_dropout = train_mode and rate > 0.0
    if use_dropout and rng is None:
        raise ContractError("dropout requires a random generator in train mode")

    w_eff = _effective_weights(enc)
    acts = [x]
    pre = []
    keep = []
    a = x
    for li in range(len(w_eff) - 1):
        z = w_eff[li] @ a + enc.biases[li][:, None]
        pre.append(z)
        a = np.maximum(z, 0.0)
        if use_dropout:
            mask = (rng.random(a.shape) >= rate) / (1.0 - rate)
            a = a * mask
            keep.append(mask)
        else:
            keep.append(None)
        acts.append(a)
    out = w_eff[-1] @ a + enc.biases[-1][:, None]
    return acts, pre, keep, out


def encode(enc: Encoder, y_hat: np.ndarray, train_mode: bool = False, rng=None) -> np.ndarray:
    """Scaled forward pass: divide by scale, run the net, rescale the output.

    Accepts one step (N,) or a window (N, W); dropout fires only in train
    mode and only when the configured rate is positive.
    """
    y_hat = np.asarray(y_hat, dtype=float)
    squeeze = y_hat.ndim == 1
    y = y_hat[:, None] if squeeze else y_hat
    if y.shape[0] != enc.hierarchy.n_series:
        raise ContractError(
            f"expected {enc.hierarchy.n_series} inputs, got {y.shape[0]}"
        )
    if not np.all(np.isfinite(y)):
        raise ContractError("non-finite forecast input")

    x = y / enc.scale[:, None]
    _, _, _, out = _forward(enc, x, train_mode, rng)
    out = out * enc.bottom_scale[:, None]
    return out[:, 0] if squeeze else out


def reconcile(model, s_mat, y_hat: np.ndarray) -> np.ndarray:
    """Coherent forecasts S * encoding; ensembles average member encodings."""
    s = s_mat.entries if hasattr(s_mat, "entries") else np.asarray(s_mat, dtype=float)
    if isinstance(model, Ensemble):
        if len(model.members) == 1:
            bottom = encode(model.members[0], y_hat)
        else:
            bottom = np.mean([encode(m, y_hat) for m in model.members], axis=0)
    else:
        bottom = encode(model, y_hat)
    return s @ bottom


def loss(pred: np.ndarray, actual: np.ndarray, kind: str, naive_scale: np.ndarray = None) -> float:
    """Mean pointwise error over every series and step.

    mase divides each series' absolute error by its in-sample naive error;
    mlae is mean log1p absolute error; regularized-mase divides by one plus
    the naive error so constant series stay usable.
    """
    pred = np.asarray(pred, dtype=float)
    actual = np.asarray(actual, dtype=float)
    if pred.shape != actual.shape:
        raise ContractError(f"shape mismatch: {pred.shape} vs {actual.shape}")
    err = np.abs(pred - actual)
    if err.ndim == 1:
        err = err[:, None]

    if kind == LOSS_MLAE:
        return float(np.log1p(err).mean())

    if naive_scale is None:
        raise ContractError(f"{kind} needs the per-series naive errors")
    q = np.asarray(naive_scale, dtype=float)
    if q.shape != (err.shape[0],):
        raise ContractError(f"naive errors must have {err.shape[0]} entries")
    if kind == LOSS_MASE:
        if np.any(q <= 0.0):
            bad = np.flatnonzero(q <= 0.0)
            raise ContractError(
                f"zero naive error for series index {bad.tolist()} (constant "
                "training series); use regularized-mase instead"
            )
        return float((err / q[:, None]).mean())
    if kind == LOSS_REG_MASE:
        if np.any(q < 0.0):
            raise ContractError("naive errors must be nonnegative")
        return float((err / (1.0 + q)[:, None]).mean())
    raise ContractError(f"unknown loss kind {kind!r}")


@dataclass
class GradientSet:
    weights: list[np.ndarray]
    biases: list[np.ndarray]
    value: float


def gradients(
    enc: Encoder,
    batch,
    kind: str,
    naive_scale: np.ndarray = None,
    rng=None,
    train_mode: bool = True,
) -> GradientSet:
    """Exact reverse-mode gradients of the batch-mean loss.

    `batch` is a list of (forecast, actual) pairs of N-vectors. The loss is
    taken on the full reconciled output S * encoding against the actuals at
    every level, averaged over all series and batch entries. Kinks use
    subgradient 0: sign(0) = 0 and relu'(0) = 0. Masked weights always get
    gradient 0.
    """
    if not batch:
        raise ContractError("empty batch")
    h = enc.hierarchy
    y_hat = np.column_stack([np.asarray(p, dtype=float) for p, _ in batch])
    y_act = np.column_stack([np.asarray(a, dtype=float) for _, a in batch])
    if y_hat.shape[0] != h.n_series:
        raise ContractError(f"expected {h.n_series} series per sample")

    s = summing_matrix(h).entries
    s_bottom = enc.bottom_scale
    x = y_hat / enc.scale[:, None]
    acts, pre, keep, out = _forward(enc, x, train_mode, rng)
    bottom = out * s_bottom[:, None]
    full = s @ bottom
    e = full - y_act

    value = loss(full, y_act, kind, naive_scale)
    if not np.isfinite(value):
        raise NumericError("loss is non-finite")

    count = e.shape[0] * e.shape[1]
    sign = np.sign(e)
    if kind == LOSS_MASE:
        g_full = sign / np.asarray(naive_scale, dtype=float)[:, None] / count
    elif kind == LOSS_REG_MASE:
        g_full = sign / (1.0 + np.asarray(naive_scale, dtype=float))[:, None] / count
    else:
        g_full = sign / (1.0 + np.abs(e)) / count

    g_out = (s.T @ g_full) * s_bottom[:, None]

    w_eff = _effective_weights(enc)
    gw = [None] * len(enc.weights)
    gb = [None] * len(enc.biases)

    gw[-1] = g_out @ acts[-1].T
    gb[-1] = g_out.sum(axis=1)
    upstream = w_eff[-1].T @ g_out
    for li in range(len(pre) - 1, -1, -1):
        if keep[li] is not None:
            upstream = upstream * keep[li]
        g_z = upstream * (pre[li] > 0.0)
        gw[li] = g_z @ acts[li].T
        gb[li] = g_z.sum(axis=1)
        if li > 0:
            upstream = w_eff[li].T @ g_z
    if enc.masks is not None:
        for li, mk in enumerate(enc.masks):
            gw[li] *= mk
    return GradientSet(weights=gw, biases=gb, value=value)


@dataclass
class AdamState:
    first: list[np.ndarray]
    second: list[np.ndarray]


def init_adam(params) -> AdamState:
    return AdamState(
        first=[np.zeros_like(p) for p in params],
        second=[np.zeros_like(p) for p in params],
    )


def optimizer_step(
    params,
    grads,
    state: AdamState,
    learning_rate: float,
    weight_decay: float,
    step_count: int,
    decay_masks=None,
) -> None:
    """One adaptive-moment update with decoupled weight decay, in place.

    `step_count` is 1 for the first call. decay_masks aligns with params:
    None means no decay for that parameter (biases), an array confines
    decay to the unmasked entries.
    """
    if step_count < 1:
        raise ContractError("step_count starts at 1")
    if decay_masks is None:
        decay_masks = [1.0] * len(params)
    c1 = 1.0 - ADAM_BETA1**step_count
    c2 = 1.0 - ADAM_BETA2**step_count
    for p, g, m, v, dm in zip(params, grads, state.first, state.second, decay_masks):
        m *= ADAM_BETA1
        m += (1.0 - ADAM_BETA1) * g
        v *= ADAM_BETA2
        v += (1.0 - ADAM_BETA2) * g**2
        m_hat = m / c1
        v_hat = v / c2
        p -= learning_rate * m_hat / (np.sqrt(v_hat) + ADAM_EPS)
        if weight_decay != 0.0 and dm is not None:
            p -= learning_rate * weight_decay * dm * p


def train(
    config: EncoderConfig,
    h: Hierarchy,
    panel: SeriesPanel,
    forecasts: ForecastSet,
    sample_times=None,
    scale: np.ndarray = None,
    naive: np.ndarray = None,
) -> Encoder:
    """Fit one encoder on training-window forecast/actual pairs.

    One sample is one time step's (forecast vector, actual vector) pair.
    Each epoch shuffles the samples and walks batches of batch_size, last
    partial batch included; a single generator seeded from the config
    drives both the shuffle and dropout, so runs are bit-reproducible.
    `sample_times`, `scale`, and `naive` exist so cross-validation can
    restrict training strictly to a fold's own training window.
    """
    if forecasts.window.stop > panel.train_len:
        raise ContractError(
            f"training forecasts extend to {forecasts.window.stop}, past the "
            f"training window end {panel.train_len}"
        )
    if sample_times is None:
        times = list(forecasts.window)
    else:
        times = sorted(int(t) for t in sample_times)
        outside = [t for t in times if t not in forecasts.window]
        if outside:
            raise ContractError(f"sample times {outside} outside the forecast window")
    if not times:
        raise ContractError("no training samples")

    if scale is None:
        scale = scale_factors(panel)
    if naive is None and config.loss in (LOSS_MASE, LOSS_REG_MASE):
        naive = panel_naive_scale(panel)

    enc = build_encoder(config, h, scale)
    params = enc.weights + enc.biases
    decay_masks = (enc.masks or [1.0] * len(enc.weights)) + [None] * len(enc.biases)
    state = init_adam(params)
    rng = np.random.default_rng(config.seed)

    offset = forecasts.window.start
    samples = [
        (forecasts.values[:, t - offset], panel.values[:, t]) for t in times
    ]

    step = 0
    for epoch in range(config.epochs):
        order = rng.permutation(len(samples))
        for start in range(0, len(samples), config.batch_size):
            batch = [samples[i] for i in order[start : start + config.batch_size]]
            try:
                gset = gradients(enc, batch, config.loss, naive, rng=rng)
            except NumericError as exc:
                raise NumericError(
                    f"training diverged at epoch {epoch}, batch {start // config.batch_size}: {exc}"
                ) from exc
            step += 1
            optimizer_step(
                params,
                gset.weights + gset.biases,
                state,
                config.learning_rate,
                config.weight_decay,
                step,
                decay_masks,
            )
    return enc


def train_ensemble(
    config: EncoderConfig,
    h: Hierarchy,
    panel: SeriesPanel,
    forecasts: ForecastSet,
    sample_times=None,
    scale: np.ndarray = None,
    naive: np.ndarray = None,
) -> Ensemble:
    """Train ensemble_size encoders on seeds seed, seed+1, ... and bundle them."""
    if scale is None:
        scale = scale_factors(panel)
    members = []
    for i in range(config.ensemble_size):
        member_cfg = replace(config, seed=config.seed + i)
        members.append(
            train(member_cfg, h, panel, forecasts, sample_times, scale, naive)
        )
    return Ensemble(members=tuple(members))


# --- model persistence -----------------------------------------------------

_MODEL_MAGIC = b"HCENC001\n"


def _array_bytes(arr: np.ndarray) -> bytes:
    return np.ascontiguousarray(arr, dtype="<f8").tobytes()


def save_model(model, path) -> None:
    """Serialize an Encoder or Ensemble to a versioned binary file.

    Layout: magic, little-endian uint32 header length, JSON header (config,
    hierarchy edges, array shapes), then raw float64 array payloads in
    header order. Writing is atomic and byte-deterministic, and loading
    restores parameters bit for bit.
    """
    members = model.members if isinstance(model, Ensemble) else (model,)
    first = members[0]
    arrays: list[np.ndarray] = [first.scale]
    specs: list[dict] = [{"name": "scale", "shape": list(first.scale.shape)}]
    if first.masks is not None:
        for li, mk in enumerate(first.masks):
            arrays.append(mk)
            specs.append({"name": f"mask_{li}", "shape": list(mk.shape)})
    for mi, enc in enumerate(members):
        for li, w in enumerate(enc.weights):
            arrays.append(w)
            specs.append({"name": f"w_{mi}_{li}", "shape": list(w.shape)})
        for li, b in enumerate(enc.biases):
            arrays.append(b)
            specs.append({"name": f"b_{mi}_{li}", "shape": list(b.shape)})

    header = {
        "kind": "ensemble" if isinstance(model, Ensemble) else "encoder",
        "n_members": len(members),
        "config": {k: getattr(first.config, k) for k in (
            "architecture", "hidden_layers", "dropout", "learning_rate",
            "weight_decay", "epochs", "batch_size", "loss", "ensemble_size", "seed",
        )},
        "member_seeds": [m.config.seed for m in members],
        "edges": first.hierarchy.edges(),
        "single_node": first.hierarchy.nodes[0] if first.hierarchy.n_series == 1 else None,
        "arrays": specs,
    }
    blob = json.dumps(header, sort_keys=True).encode("utf-8")

    tmp = f"{path}.tmp"
    with open(tmp, "wb") as fh:
        fh.write(_MODEL_MAGIC)
        fh.write(struct.pack("<I", len(blob)))
        fh.write(blob)
        for arr in arrays:
            fh.write(_array_bytes(arr))
    os.replace(tmp, path)


def load_model(path):
    """Inverse of save_model; returns an Encoder or Ensemble."""
    try:
        with open(path, "rb") as fh:
            data = fh.read()
    except OSError as exc:
        raise ContractError(f"cannot read model file {path}: {exc}") from exc
    if not data.startswith(_MODEL_MAGIC):
        raise ContractError(f"{path} is not a model file (bad magic)")
    off = len(_MODEL_MAGIC)
    (hlen,) = struct.unpack_from("<I", data, off)
    off += 4
    try:
        header = json.loads(data[off : off + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise ContractError(f"corrupt model header in {path}: {exc}") from exc
    off += hlen

    loaded: dict[str, np.ndarray] = {}
    for spec in header["arrays"]:
        shape = tuple(spec["shape"])
        n_items = int(np.prod(shape)) if shape else 1
        nbytes = 8 * n_items
        if off + nbytes > len(data):
            raise ContractError(f"truncated model file {path}")
        loaded[spec["name"]] = np.frombuffer(
            data[off : off + nbytes], dtype="<f8"
        ).reshape(shape).copy()
        off += nbytes

    if header["single_node"] is not None:
        h = trivial_hierarchy(header["single_node"])
    else:
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            h = build_hierarchy([tuple(e) for e in header["edges"]])

    cfg = EncoderConfig(**header["config"])
    n_layers = cfg.hidden_layers + 1
    masks = None
    if cfg.architecture == ARCH_SHRUNK:
        masks = [loaded[f"mask_{li}"] for li in range(n_layers)]

    members = []
    for mi in range(header["n_members"]):
        member_cfg = replace(cfg, seed=header["member_seeds"][mi])
        members.append(
            Encoder(
                config=member_cfg,
                hierarchy=h,
                scale=loaded["scale"].copy(),
                weights=[loaded[f"w_{mi}_{li}"] for li in range(n_layers)],
                biases=[loaded[f"b_{mi}_{li}"] for li in range(n_layers)],
                masks=masks,
            )
        )
    if header["kind"] == "encoder":
        return members[0]
    return Ensemble(members=tuple(members))
