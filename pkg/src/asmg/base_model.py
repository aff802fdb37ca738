"""The Embedding&MLP click-prediction model and its incremental training.

Every categorical feature owns an embedding table; a sample's feature
embeddings are concatenated (user features first, then item features) and
passed through an MLP whose scalar output is squashed by a sigmoid.  The
user-sequence feature is multi-hot: its looked-up rows are pooled (mean by
default) over the present entries, with a dedicated padding row that is
masked out and therefore never receives gradient.

Parameters live in one flat float64 vector; the layout maps segments
(embedding tables, MLP weights and biases) onto it.  Vocabularies may grow
append-only between periods, and `extend_params` recreates rows of any
snapshot deterministically from (seed, feature, row index), so period
snapshots of different widths stay comparable.
"""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass, replace

import numpy as np

from .autodiff import Node, Tape
from .datastream import MAX_SEQUENCE, PeriodDataset
from .errors import DataError, NumericalError
from .metrics import SCORE_CLIP
from .metrics import log_loss as log_loss  # canonical definition, shared with metrics
from .optimize import Adam, AdamConfig

INIT_SCALE = 0.01  # embeddings and MLP weights start uniform(-0.01, 0.01)

CHECKPOINT_MAGIC = b"ASMGBASE"
CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class FeatureField:
    """One categorical feature: its table size and whether it is multi-hot."""

    name: str
    vocab_size: int
    kind: str = "onehot"  # or "sequence"
    side: str = "item"  # "user" or "item"; controls concat order only

    @property
    def rows(self) -> int:
        # sequence tables carry an extra padding row at index 0
        return self.vocab_size + 1 if self.kind == "sequence" else self.vocab_size


@dataclass(frozen=True)
class ModelLayout:
    features: tuple[FeatureField, ...]
    embed_dim: int
    hidden_sizes: tuple[int, ...]
    activation: str = "relu"
    pooling: str = "mean"

    def __post_init__(self):
        if self.activation not in ("relu", "tanh"):
            raise DataError(f"unsupported activation {self.activation!r}")
        if self.pooling not in ("mean", "sum"):
            raise DataError(f"unsupported pooling {self.pooling!r}")
        user = [f for f in self.features if f.side == "user"]
        item = [f for f in self.features if f.side == "item"]
        if not user or not item:
            raise DataError("layout needs at least one user and one item feature")

    # ------------------------------------------------------------------

    @property
    def ordered_features(self) -> list[FeatureField]:
        return [f for f in self.features if f.side == "user"] + [
            f for f in self.features if f.side == "item"
        ]

    @property
    def mlp_input_dim(self) -> int:
        return len(self.features) * self.embed_dim

    def segments(self) -> list[tuple[str, tuple[int, ...], int]]:
        """(name, shape, offset) for every parameter block, in flat order."""
        segs = []
        offset = 0
        for f in self.ordered_features:
            shape = (f.rows, self.embed_dim)
            segs.append((f"emb:{f.name}", shape, offset))
            offset += shape[0] * shape[1]
        dims = [self.mlp_input_dim, *self.hidden_sizes, 1]
        for li, (din, dout) in enumerate(zip(dims, dims[1:])):
            segs.append((f"mlp:w{li}", (din, dout), offset))
            offset += din * dout
            segs.append((f"mlp:b{li}", (dout,), offset))
            offset += dout
        return segs

    @property
    def n_params(self) -> int:
        segs = self.segments()
        name, shape, offset = segs[-1]
        return offset + int(np.prod(shape))

    def structure(self) -> dict:
        return {
            "features": [
                (f.name, f.vocab_size, f.kind, f.side) for f in self.ordered_features
            ],
            "embed_dim": self.embed_dim,
            "hidden_sizes": list(self.hidden_sizes),
            "activation": self.activation,
            "pooling": self.pooling,
        }

    def digest(self) -> bytes:
        blob = json.dumps(self.structure(), sort_keys=True).encode()
        return hashlib.sha256(blob).digest()

    def grow(self, new_vocab_sizes: dict[str, int]) -> "ModelLayout":
        """Append-only vocabulary growth; all other structure is immutable."""
        grown = []
        for f in self.features:
            new_size = new_vocab_sizes.get(f.name, f.vocab_size)
            if new_size < f.vocab_size:
                raise DataError(f"vocab of {f.name} cannot shrink ({f.vocab_size} -> {new_size})")
            grown.append(replace(f, vocab_size=new_size))
        return replace(self, features=tuple(grown))


@dataclass
class BaseModelParams:
    """Flat parameter snapshot tagged with the period that produced it."""

    theta: np.ndarray
    layout: ModelLayout
    period: int = 0

    def __post_init__(self):
        if self.theta.shape != (self.layout.n_params,):
            raise DataError(
                f"theta length {self.theta.shape} does not match layout n={self.layout.n_params}"
            )


@dataclass
class Batch:
    """Index-encoded samples: one-hot per feature, multi-hot for sequences."""

    feature_idx: dict[str, np.ndarray]  # name -> (B,) or (B, MAX_SEQUENCE)
    labels: np.ndarray  # (B,)

    def __len__(self):
        return int(self.labels.size)


def batch_from_period(period: PeriodDataset, rows: np.ndarray | None = None) -> Batch:
    if rows is None:
        rows = np.arange(len(period))
    feats = {
        "user": period.user_idx[rows],
        "hist": period.seq_idx[rows],
        "item": period.item_idx[rows],
    }
    for name, col in period.side_idx.items():
        feats[f"side_{name}"] = col[rows]
    return Batch(feature_idx=feats, labels=period.labels[rows])


def standard_layout(
    vocab_sizes: dict[str, int],
    embed_dim: int,
    hidden_sizes: tuple[int, ...],
    activation: str = "relu",
    pooling: str = "mean",
) -> ModelLayout:
    """User id + user history + item id (+ side columns) layout."""
    features = [
        FeatureField("user", vocab_sizes["user"], "onehot", "user"),
        FeatureField("hist", vocab_sizes["item"], "sequence", "user"),
        FeatureField("item", vocab_sizes["item"], "onehot", "item"),
    ]
    for name, size in sorted(vocab_sizes.items()):
        if name.startswith("side_"):
            features.append(FeatureField(name, size, "onehot", "item"))
    return ModelLayout(
        features=tuple(features),
        embed_dim=embed_dim,
        hidden_sizes=tuple(hidden_sizes),
        activation=activation,
        pooling=pooling,
    )


# ----------------------------------------------------------------------
# initialization


def _feature_stream(seed: int, tag: str) -> np.random.Generator:
    digest = hashlib.sha256(tag.encode()).digest()[:8]
    return np.random.default_rng(np.random.SeedSequence([seed, int.from_bytes(digest, "little")]))


def _embedding_rows(seed: int, feature: str, n_rows: int, embed_dim: int) -> np.ndarray:
    """First `n_rows` init rows of a feature table; row r is seed-stable."""
    rng = _feature_stream(seed, f"emb:{feature}")
    return rng.uniform(-INIT_SCALE, INIT_SCALE, size=(n_rows, embed_dim))


def init_params(layout: ModelLayout, seed: int) -> BaseModelParams:
    """Uniform(-0.01, 0.01) embeddings and MLP weights, zero biases."""
    theta = np.empty(layout.n_params, dtype=np.float64)
    for name, shape, offset in layout.segments():
        size = int(np.prod(shape))
        view = theta[offset : offset + size]
        if name.startswith("emb:"):
            rows = _embedding_rows(seed, name[4:], shape[0], shape[1])
            view[:] = rows.ravel()
        elif name.startswith("mlp:b"):
            view[:] = 0.0
        else:
            rng = _feature_stream(seed, name)
            view[:] = rng.uniform(-INIT_SCALE, INIT_SCALE, size=size)
    return BaseModelParams(theta=theta, layout=layout, period=0)


def extend_params(params: BaseModelParams, new_layout: ModelLayout, seed: int) -> BaseModelParams:
    """Re-home a snapshot onto a grown layout, appending seed-stable init rows.

    Appended rows equal what `init_params` would have produced for them, so
    snapshots taken before an id appeared remain comparable with later ones.
    """
    if new_layout.structure() == params.layout.structure():
        return params
    old_segs = {name: (shape, offset) for name, shape, offset in params.layout.segments()}
    theta = np.empty(new_layout.n_params, dtype=np.float64)
    for name, shape, offset in new_layout.segments():
        size = int(np.prod(shape))
        view = theta[offset : offset + size].reshape(shape)
        old_shape, old_offset = old_segs[name]
        old = params.theta[old_offset : old_offset + int(np.prod(old_shape))].reshape(old_shape)
        if name.startswith("emb:"):
            view[: old_shape[0]] = old
            if shape[0] > old_shape[0]:
                rows = _embedding_rows(seed, name[4:], shape[0], shape[1])
                view[old_shape[0] :] = rows[old_shape[0] :]
        else:
            if old_shape != shape:
                raise DataError(f"MLP segment {name} changed shape {old_shape} -> {shape}")
            view[:] = old
    return BaseModelParams(theta=theta, layout=new_layout, period=params.period)


# ----------------------------------------------------------------------
# forward graph


def split_theta(layout: ModelLayout, theta: np.ndarray) -> dict[str, np.ndarray]:
    out = {}
    for name, shape, offset in layout.segments():
        size = int(np.prod(shape))
        out[name] = theta[offset : offset + size].reshape(shape)
    return out


def flatten_segments(layout: ModelLayout, segments: dict[str, np.ndarray]) -> np.ndarray:
    return np.concatenate([segments[name].ravel() for name, _, _ in layout.segments()])


def _check_batch(layout: ModelLayout, batch: Batch) -> None:
    fields = {f.name: f for f in layout.features}
    for name, idx in batch.feature_idx.items():
        f = fields.get(name)
        if f is None:
            raise DataError(f"batch feature {name!r} not in layout")
        limit = f.rows
        if idx.size and (idx.min() < 0 or idx.max() >= limit):
            raise DataError(
                f"feature {name!r}: index out of range (max {int(idx.max())}, table rows {limit})"
            )


def score_nodes(tape: Tape, layout: ModelLayout, seg_nodes: dict[str, Node], batch: Batch) -> Node:
    """Build the scoring graph; returns the (B,) sigmoid score node."""
    _check_batch(layout, batch)
    parts = []
    for f in layout.ordered_features:
        table = seg_nodes[f"emb:{f.name}"]
        idx = batch.feature_idx[f.name]
        if f.kind == "onehot":
            parts.append(tape.gather(table, idx))
        else:
            looked = tape.gather(table, idx)  # (B, L, d)
            mask = (idx != 0).astype(np.float64)[:, :, None]
            masked = tape.mul(looked, tape.constant(mask))
            pooled = tape.sum(masked, axis=1)
            if layout.pooling == "mean":
                counts = np.maximum(mask.sum(axis=1), 1.0)  # (B, 1)
                pooled = tape.mul(pooled, tape.constant(1.0 / counts))
            parts.append(pooled)
    x = tape.concat(parts, axis=1)
    n_hidden = len(layout.hidden_sizes)
    for li in range(n_hidden + 1):
        w = seg_nodes[f"mlp:w{li}"]
        b = seg_nodes[f"mlp:b{li}"]
        x = tape.add(tape.matmul(x, w), b)
        if li < n_hidden:
            x = tape.relu(x) if layout.activation == "relu" else tape.tanh(x)
    logits = tape.reshape(x, (len(batch),))
    return tape.sigmoid(logits)


def loss_nodes(tape: Tape, layout: ModelLayout, seg_nodes: dict[str, Node], batch: Batch) -> Node:
    """Mean clipped log loss over the batch, as a scalar node."""
    scores = score_nodes(tape, layout, seg_nodes, batch)
    y = batch.labels.astype(np.float64)
    p = tape.clip(scores, SCORE_CLIP, 1.0 - SCORE_CLIP)
    pos = tape.mul(tape.log(p), tape.constant(y))
    q = tape.clip(tape.sub(tape.constant(np.ones_like(y)), scores), SCORE_CLIP, 1.0 - SCORE_CLIP)
    neg = tape.mul(tape.log(q), tape.constant(1.0 - y))
    total = tape.sum(tape.add(pos, neg))
    return tape.mul(total, tape.constant(-1.0 / len(batch)))


def forward(params: BaseModelParams, batch: Batch) -> np.ndarray:
    """Scores in (0, 1) for a batch; no gradient bookkeeping."""
    tape = Tape()
    seg_nodes = {
        name: tape.constant(arr) for name, arr in split_theta(params.layout, params.theta).items()
    }
    return score_nodes(tape, params.layout, seg_nodes, batch).value


def predict_period(params: BaseModelParams, period: PeriodDataset, chunk: int = 8192) -> np.ndarray:
    """Scores for a whole period, evaluated in chunks."""
    out = np.empty(len(period), dtype=np.float64)
    for start in range(0, len(period), chunk):
        rows = np.arange(start, min(start + chunk, len(period)))
        out[rows] = forward(params, batch_from_period(period, rows))
    return out


# ----------------------------------------------------------------------
# incremental training


@dataclass(frozen=True)
class OptConfig:
    epochs: int = 1
    batch_size: int = 256
    adam: AdamConfig = AdamConfig()
    seed: int = 0


def _epoch_order(n: int, seed: int, period: int, epoch: int) -> np.ndarray:
    rng = np.random.default_rng(np.random.SeedSequence([seed, period, epoch]))
    return rng.permutation(n)


def concat_periods(datasets: list[PeriodDataset]) -> PeriodDataset:
    """Union of shards as one dataset, tagged with the most recent index."""
    if len(datasets) == 1:
        return datasets[0]
    keys = set(datasets[0].side_idx)
    if any(set(ds.side_idx) != keys for ds in datasets):
        raise DataError("cannot union shards with differing side features")
    return PeriodDataset(
        index=datasets[-1].index,
        user_idx=np.concatenate([ds.user_idx for ds in datasets]),
        item_idx=np.concatenate([ds.item_idx for ds in datasets]),
        seq_idx=np.concatenate([ds.seq_idx for ds in datasets]),
        side_idx={k: np.concatenate([ds.side_idx[k] for ds in datasets]) for k in keys},
        labels=np.concatenate([ds.labels for ds in datasets]),
        timestamps=np.concatenate([ds.timestamps for ds in datasets]),
        provenance="+".join(ds.provenance for ds in datasets[:1]),
    )


def incremental_update(
    params_prev: BaseModelParams,
    period_data: PeriodDataset | list[PeriodDataset],
    opt: OptConfig,
) -> BaseModelParams:
    """Train a copy of `params_prev` on one period (or a shard union) of data.

    Runs `opt.epochs` passes of jointly shuffled mini-batch Adam on the
    clipped log loss; a shard list is treated as one pooled dataset.  The
    input snapshot is never mutated; with zero epochs the result is a
    bitwise copy retagged to the data's period.
    """
    data = concat_periods(period_data) if isinstance(period_data, list) else period_data
    period = data.index
    layout = params_prev.layout
    theta = params_prev.theta.copy()
    seg_meta = layout.segments()
    adam = Adam([shape for _, shape, _ in seg_meta], opt.adam)

    for epoch in range(opt.epochs):
        order = _epoch_order(len(data), opt.seed, period, epoch)
        for bi, start in enumerate(range(0, len(data), opt.batch_size)):
            batch = batch_from_period(data, order[start : start + opt.batch_size])
            tape = Tape()
            seg_nodes = {name: tape.leaf(arr) for name, arr in split_theta(layout, theta).items()}
            loss = loss_nodes(tape, layout, seg_nodes, batch)
            if not np.isfinite(float(loss.value)):
                raise NumericalError("non-finite training loss", period=period, batch_index=bi)
            grads = tape.backward(loss)
            views = [
                theta[offset : offset + int(np.prod(shape))].reshape(shape)
                for _, shape, offset in seg_meta
            ]
            adam.step(views, grads)
    return BaseModelParams(theta=theta, layout=layout, period=period)


# ----------------------------------------------------------------------
# checkpoints


def save_params(path, params: BaseModelParams) -> None:
    """Binary checkpoint: magic, version, layout hash, period, n, then <f8 data."""
    theta = np.ascontiguousarray(params.theta, dtype="<f8")
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<I", CHECKPOINT_VERSION))
        fh.write(params.layout.digest())
        fh.write(struct.pack("<q", params.period))
        fh.write(struct.pack("<Q", theta.size))
        fh.write(theta.tobytes())


def load_params(path, layout: ModelLayout) -> BaseModelParams:
    with open(path, "rb") as fh:
        magic = fh.read(8)
        if magic != CHECKPOINT_MAGIC:
            raise DataError(f"{path}: not a base-model checkpoint (magic {magic!r})")
        (version,) = struct.unpack("<I", fh.read(4))
        if version != CHECKPOINT_VERSION:
            raise DataError(f"{path}: unsupported checkpoint version {version}")
        digest = fh.read(32)
        if digest != layout.digest():
            raise DataError(f"{path}: checkpoint layout hash does not match the expected layout")
        (period,) = struct.unpack("<q", fh.read(8))
        (n,) = struct.unpack("<Q", fh.read(8))
        if n != layout.n_params:
            raise DataError(f"{path}: checkpoint has {n} params, layout expects {layout.n_params}")
        theta = np.frombuffer(fh.read(8 * n), dtype="<f8").astype(np.float64)
    return BaseModelParams(theta=theta, layout=layout, period=period)
