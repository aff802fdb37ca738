"""Parameter-sequence generators: grouped GRU cells and a linear combiner.

The GRU generator runs coordinate-wise over the base model's flat parameter
vector: every coordinate has its own hidden-state trajectory, fed the
coordinate's scalar value from each snapshot in the window.  What is shared
is the learnable cell: MLP coordinates each own a private cell, while an
embedding feature owns one cell per embedding dimension, shared across all
vocabulary rows of that dimension.  The learnable size is therefore
independent of vocabulary sizes (and of the window length).

Execution is batched: one time step for all coordinates is a stack of
matrix ops over the per-coordinate gathered cell weights, which computes
exactly the same values as the per-group reference `gru_step`.
"""

from __future__ import annotations

import hashlib
import struct
from dataclasses import dataclass

import numpy as np

from .autodiff import Node, Tape
from .base_model import ModelLayout
from .errors import DataError

GATE_INIT_SCALE = 0.1

META_MAGIC = b"ASMGMETA"
META_VERSION = 1


# ----------------------------------------------------------------------
# grouping


@dataclass(frozen=True)
class GroupMap:
    """Partition of the flat parameter coordinates into generator groups."""

    group_names: tuple[str, ...]
    coord_group: np.ndarray  # (n,) int64, group index of every coordinate
    layout_digest: bytes

    @property
    def n_groups(self) -> int:
        return len(self.group_names)

    @property
    def n_coords(self) -> int:
        return int(self.coord_group.size)

    def group_sizes(self) -> np.ndarray:
        return np.bincount(self.coord_group, minlength=self.n_groups)

    def digest(self) -> bytes:
        blob = "\n".join(self.group_names).encode()
        return hashlib.sha256(blob).digest()


def build_group_map(layout: ModelLayout) -> GroupMap:
    """One group per MLP scalar; one group per embedding dimension.

    Embedding group names carry no vocabulary size, so the same groups (and
    the same learnable stacks) survive append-only vocabulary growth; only
    `coord_group` is recomputed.
    """
    names: list[str] = []
    coord_group = np.empty(layout.n_params, dtype=np.int64)
    for name, shape, offset in layout.segments():
        size = int(np.prod(shape))
        if name.startswith("emb:"):
            rows, dim = shape
            base = len(names)
            names.extend(f"{name}:dim{e}" for e in range(dim))
            block = np.tile(np.arange(base, base + dim, dtype=np.int64), rows)
            coord_group[offset : offset + size] = block
        else:
            base = len(names)
            names.extend(f"{name}:{j}" for j in range(size))
            coord_group[offset : offset + size] = np.arange(base, base + size, dtype=np.int64)
    return GroupMap(
        group_names=tuple(names),
        coord_group=coord_group,
        layout_digest=layout.digest(),
    )


# ----------------------------------------------------------------------
# parameters


@dataclass
class GruGroupParams:
    """One cell: gate matrices are d x (d+1), acting on [h, theta]."""

    w_r: np.ndarray
    w_z: np.ndarray
    w_h: np.ndarray
    w_out: np.ndarray  # (d,)
    b_out: float


@dataclass
class MetaParams:
    """Stacked cells for every group, plus the shared rollout settings."""

    w_r: np.ndarray  # (G, d, d+1)
    w_z: np.ndarray
    w_h: np.ndarray
    w_out: np.ndarray  # (G, d)
    b_out: np.ndarray  # (G,)
    d: int
    k: int
    residual_readout: bool = False

    STACKS = ("w_r", "w_z", "w_h", "w_out", "b_out")

    def group(self, g: int) -> GruGroupParams:
        return GruGroupParams(
            w_r=self.w_r[g], w_z=self.w_z[g], w_h=self.w_h[g],
            w_out=self.w_out[g], b_out=float(self.b_out[g]),
        )

    @property
    def n_groups(self) -> int:
        return self.w_r.shape[0]

    def n_learnable(self) -> int:
        return sum(getattr(self, s).size for s in self.STACKS)

    def stacks(self) -> list[np.ndarray]:
        return [getattr(self, s) for s in self.STACKS]

    def copy(self) -> "MetaParams":
        return MetaParams(
            w_r=self.w_r.copy(), w_z=self.w_z.copy(), w_h=self.w_h.copy(),
            w_out=self.w_out.copy(), b_out=self.b_out.copy(),
            d=self.d, k=self.k, residual_readout=self.residual_readout,
        )


def init_meta(
    group_map: GroupMap, d: int, k: int, seed: int, residual_readout: bool = False
) -> MetaParams:
    """Gates and readout weights uniform(-0.1, 0.1); readout bias zero."""
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0x6D657461]))
    g = group_map.n_groups
    return MetaParams(
        w_r=rng.uniform(-GATE_INIT_SCALE, GATE_INIT_SCALE, size=(g, d, d + 1)),
        w_z=rng.uniform(-GATE_INIT_SCALE, GATE_INIT_SCALE, size=(g, d, d + 1)),
        w_h=rng.uniform(-GATE_INIT_SCALE, GATE_INIT_SCALE, size=(g, d, d + 1)),
        w_out=rng.uniform(-GATE_INIT_SCALE, GATE_INIT_SCALE, size=(g, d)),
        b_out=np.zeros(g, dtype=np.float64),
        d=d,
        k=k,
        residual_readout=residual_readout,
    )


@dataclass
class HiddenStore:
    """Carried per-coordinate hidden states; `tag` marks which h_t this is."""

    h: np.ndarray  # (n, d)
    tag: int

    def copy(self) -> "HiddenStore":
        return HiddenStore(h=self.h.copy(), tag=self.tag)


def zero_hidden(n_coords: int, d: int, tag: int = 0) -> HiddenStore:
    return HiddenStore(h=np.zeros((n_coords, d), dtype=np.float64), tag=tag)


def extend_hidden(store: HiddenStore, n_coords: int) -> HiddenStore:
    """Append zero rows for coordinates created by vocabulary growth."""
    if n_coords < store.h.shape[0]:
        raise DataError(f"hidden store cannot shrink ({store.h.shape[0]} -> {n_coords})")
    if n_coords == store.h.shape[0]:
        return store
    h = np.zeros((n_coords, store.h.shape[1]), dtype=np.float64)
    h[: store.h.shape[0]] = store.h
    return HiddenStore(h=h, tag=store.tag)


# ----------------------------------------------------------------------
# reference (per-group) ops


def _sigmoid(x):
    return 0.5 * (np.tanh(0.5 * x) + 1.0)


def gru_step(g: GruGroupParams, h_prev: np.ndarray, theta: float) -> np.ndarray:
    """One recurrent step for one coordinate of one group."""
    x = np.concatenate([h_prev, [theta]])
    r = _sigmoid(g.w_r @ x)
    z = _sigmoid(g.w_z @ x)
    h_tilde = np.tanh(g.w_h @ np.concatenate([r * h_prev, [theta]]))
    return (1.0 - z) * h_prev + z * h_tilde


def readout(g: GruGroupParams, h: np.ndarray) -> float:
    """Generated parameter value from a hidden state."""
    return float(g.w_out @ h + g.b_out)


# ----------------------------------------------------------------------
# stacked execution


def _gathered(meta: MetaParams, coord_group: np.ndarray):
    return (
        meta.w_r[coord_group],
        meta.w_z[coord_group],
        meta.w_h[coord_group],
        meta.w_out[coord_group],
        meta.b_out[coord_group],
    )


def stacked_step(meta: MetaParams, coord_group: np.ndarray, h_prev: np.ndarray, theta: np.ndarray) -> np.ndarray:
    """`gru_step` for all coordinates at once; (A, d) hidden in and out."""
    w_r, w_z, w_h, _, _ = _gathered(meta, coord_group)
    x = np.concatenate([h_prev, theta[:, None]], axis=1)[:, :, None]  # (A, d+1, 1)
    r = _sigmoid(np.matmul(w_r, x)[:, :, 0])
    z = _sigmoid(np.matmul(w_z, x)[:, :, 0])
    xh = np.concatenate([r * h_prev, theta[:, None]], axis=1)[:, :, None]
    h_tilde = np.tanh(np.matmul(w_h, xh)[:, :, 0])
    return (1.0 - z) * h_prev + z * h_tilde


def stacked_readout(meta: MetaParams, coord_group: np.ndarray, h: np.ndarray, theta: np.ndarray) -> np.ndarray:
    w_out = meta.w_out[coord_group]
    out = np.sum(w_out * h, axis=1) + meta.b_out[coord_group]
    if meta.residual_readout:
        out = out + theta
    return out


def generate(
    meta: MetaParams,
    group_map: GroupMap,
    window: list[np.ndarray],
    h_init: HiddenStore,
) -> tuple[list[np.ndarray], list[np.ndarray]]:
    """Roll the generator over a window of snapshots.

    Returns one generated parameter vector per step plus every intermediate
    hidden state (one (n, d) array per step).  Step i sees only window
    entries up to i, so outputs are causal in the window.
    """
    if not window:
        raise DataError("generate: empty model window")
    n = group_map.n_coords
    for i, theta in enumerate(window):
        if theta.shape != (n,):
            raise DataError(
                f"generate: window entry {i} has shape {theta.shape}, expected ({n},)"
            )
    if h_init.h.shape != (n, meta.d):
        raise DataError(
            f"generate: hidden store shape {h_init.h.shape} != ({n}, {meta.d})"
        )
    h = h_init.h
    outputs, hiddens = [], []
    for theta in window:
        h = stacked_step(meta, group_map.coord_group, h, theta)
        hiddens.append(h)
        outputs.append(stacked_readout(meta, group_map.coord_group, h, theta))
    return outputs, hiddens


# ----------------------------------------------------------------------
# tape graph (for training the generator)


def meta_leaves(tape: Tape, meta: MetaParams) -> dict[str, Node]:
    return {name: tape.leaf(getattr(meta, name)) for name in MetaParams.STACKS}


def rollout_nodes(
    tape: Tape,
    meta: MetaParams,
    leaves: dict[str, Node],
    coord_group: np.ndarray,
    h_init: np.ndarray,
    thetas: list[np.ndarray],
) -> list[Node]:
    """Differentiable counterpart of `generate` on a coordinate subset.

    `thetas` are constants (input snapshots are not trained); the returned
    nodes are the generated values per step, shape (A,).
    """
    a = coord_group.size
    d = meta.d
    cg = coord_group
    w_r = tape.gather(leaves["w_r"], cg)
    w_z = tape.gather(leaves["w_z"], cg)
    w_h = tape.gather(leaves["w_h"], cg)
    w_out = tape.gather(leaves["w_out"], cg)
    b_out = tape.gather(leaves["b_out"], cg)
    h = tape.constant(h_init)
    one = tape.constant(np.ones((a, d)))
    outputs = []
    for theta in thetas:
        th_col = tape.constant(theta[:, None])
        x = tape.reshape(tape.concat([h, th_col], axis=1), (a, d + 1, 1))
        r = tape.sigmoid(tape.reshape(tape.matmul(w_r, x), (a, d)))
        z = tape.sigmoid(tape.reshape(tape.matmul(w_z, x), (a, d)))
        xh = tape.reshape(tape.concat([tape.mul(r, h), th_col], axis=1), (a, d + 1, 1))
        h_tilde = tape.tanh(tape.reshape(tape.matmul(w_h, xh), (a, d)))
        h = tape.add(tape.mul(tape.sub(one, z), h), tape.mul(z, h_tilde))
        out = tape.add(tape.sum(tape.mul(w_out, h), axis=1), b_out)
        if meta.residual_readout:
            out = tape.add(out, tape.constant(theta))
        outputs.append(out)
    return outputs


# ----------------------------------------------------------------------
# linear combiner


@dataclass
class LinearMetaParams:
    """Mixing weights over the window, most recent last."""

    alpha: np.ndarray  # (k,)

    @property
    def k(self) -> int:
        return int(self.alpha.size)

    def copy(self) -> "LinearMetaParams":
        return LinearMetaParams(alpha=self.alpha.copy())


def init_linear(k: int) -> LinearMetaParams:
    return LinearMetaParams(alpha=np.full(k, 1.0 / k, dtype=np.float64))


def linear_combine(alpha: np.ndarray, window: list[np.ndarray]) -> np.ndarray:
    """Coordinate-wise weighted sum of the window snapshots."""
    alpha = np.asarray(alpha, dtype=np.float64)
    if alpha.ndim != 1 or alpha.size != len(window):
        raise DataError(
            f"linear_combine: {alpha.size} weights for a window of {len(window)} models"
        )
    stacked = np.stack(window, axis=0)  # (k, n)
    return np.matmul(alpha[None, :], stacked)[0]


def linear_combine_nodes(tape: Tape, alpha_leaf: Node, window: list[np.ndarray]) -> Node:
    stacked = tape.constant(np.stack(window, axis=0))
    k = len(window)
    mixed = tape.matmul(tape.reshape(alpha_leaf, (1, k)), stacked)
    return tape.reshape(mixed, (window[0].size,))


# ----------------------------------------------------------------------
# checkpoints

_KIND_GRU = 0
_KIND_LINEAR = 1


def save_meta(path, meta: MetaParams, hidden: HiddenStore, group_map: GroupMap, period: int) -> None:
    """Binary checkpoint: header, stacked cell weights, carried hidden states."""
    with open(path, "wb") as fh:
        fh.write(META_MAGIC)
        fh.write(struct.pack("<IB", META_VERSION, _KIND_GRU))
        fh.write(group_map.digest())
        fh.write(
            struct.pack(
                "<iiqQQB",
                meta.d,
                meta.k,
                period,
                meta.n_groups,
                hidden.h.shape[0],
                1 if meta.residual_readout else 0,
            )
        )
        fh.write(struct.pack("<q", hidden.tag))
        for stack in meta.stacks():
            fh.write(np.ascontiguousarray(stack, dtype="<f8").tobytes())
        fh.write(np.ascontiguousarray(hidden.h, dtype="<f8").tobytes())


def load_meta(path, group_map: GroupMap) -> tuple[MetaParams, HiddenStore, int]:
    with open(path, "rb") as fh:
        if fh.read(8) != META_MAGIC:
            raise DataError(f"{path}: not a meta checkpoint")
        version, kind = struct.unpack("<IB", fh.read(5))
        if version != META_VERSION or kind != _KIND_GRU:
            raise DataError(f"{path}: unsupported meta checkpoint (v{version}, kind {kind})")
        digest = fh.read(32)
        if digest != group_map.digest():
            raise DataError(f"{path}: group map hash mismatch")
        d, k, period, n_groups, n_coords, residual = struct.unpack("<iiqQQB", fh.read(33))
        (tag,) = struct.unpack("<q", fh.read(8))
        if n_groups != group_map.n_groups:
            raise DataError(f"{path}: {n_groups} groups on disk, map has {group_map.n_groups}")

        def read_block(shape):
            size = int(np.prod(shape))
            return np.frombuffer(fh.read(8 * size), dtype="<f8").astype(np.float64).reshape(shape)

        meta = MetaParams(
            w_r=read_block((n_groups, d, d + 1)),
            w_z=read_block((n_groups, d, d + 1)),
            w_h=read_block((n_groups, d, d + 1)),
            w_out=read_block((n_groups, d)),
            b_out=read_block((n_groups,)),
            d=d,
            k=k,
            residual_readout=bool(residual),
        )
        hidden = HiddenStore(h=read_block((n_coords, d)), tag=tag)
    return meta, hidden, period


def save_linear(path, params: LinearMetaParams, period: int) -> None:
    with open(path, "wb") as fh:
        fh.write(META_MAGIC)
        fh.write(struct.pack("<IB", META_VERSION, _KIND_LINEAR))
        fh.write(struct.pack("<iq", params.k, period))
        fh.write(np.ascontiguousarray(params.alpha, dtype="<f8").tobytes())


def load_linear(path) -> tuple[LinearMetaParams, int]:
    with open(path, "rb") as fh:
        if fh.read(8) != META_MAGIC:
            raise DataError(f"{path}: not a meta checkpoint")
        version, kind = struct.unpack("<IB", fh.read(5))
        if version != META_VERSION or kind != _KIND_LINEAR:
            raise DataError(f"{path}: unsupported linear checkpoint")
        k, period = struct.unpack("<iq", fh.read(12))
        alpha = np.frombuffer(fh.read(8 * k), dtype="<f8").astype(np.float64)
    return LinearMetaParams(alpha=alpha), period
