"""Warm-up and online generate/serve/update loops for all updating variants.

Variants
--------
- ``iu``          incremental update; serve the period's model directly
- ``bu``          batch update on the last `bu_window` shards (bu-1 == iu)
- ``gru_multi``   truncated window, carried hidden state, multi-step loss
- ``gru_single``  same, but loss only on the final step (forced last_only)
- ``gru_zero``    multi-step but the input hidden state is reset each period
- ``gru_full``    full-history window, zero initial hidden state
- ``gru_unif``    gru_multi with uniform step weights (forced uniform)
- ``linear``      learned linear combination of the window snapshots

One online step at period t is strictly ordered: generate the serving
model from the window ending at t, evaluate it on the next period's data,
then train the base model on that data, then the generator, and finally
advance the carried hidden state by one snapshot.  Evaluation therefore
always precedes any training contact with the data it scores.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, field
from typing import Protocol

import numpy as np

from .autodiff import Tape
from .base_model import (
    BaseModelParams,
    Batch,
    ModelLayout,
    OptConfig,
    _embedding_rows,
    batch_from_period,
    extend_params,
    incremental_update,
    loss_nodes,
    predict_period,
)
from .datastream import PeriodDataset
from .errors import ConfigError, DataError, NumericalError
from .metagen import (
    GroupMap,
    HiddenStore,
    LinearMetaParams,
    MetaParams,
    build_group_map,
    extend_hidden,
    generate,
    init_linear,
    init_meta,
    linear_combine,
    linear_combine_nodes,
    meta_leaves,
    rollout_nodes,
    stacked_step,
    zero_hidden,
)
from .metrics import auc as compute_auc
from .metrics import log_loss
from .optimize import Adam, AdamConfig

GRU_VARIANTS = ("gru_multi", "gru_single", "gru_zero", "gru_full", "gru_unif")
META_VARIANTS = GRU_VARIANTS + ("linear",)
ALL_VARIANTS = ("iu", "bu") + META_VARIANTS

_FORCED_DECAY = {"gru_single": "last_only", "gru_unif": "uniform", "linear": "last_only"}
_DECAY_MODES = ("linear_decay", "uniform", "last_only")


@dataclass(frozen=True)
class TrainerConfig:
    variant: str
    k: int = 3
    warmup_periods: int = 10
    decay_mode: str | None = None  # None resolves to the variant's default
    meta_epochs: int = 5
    meta_batch_size: int = 256
    meta_adam: AdamConfig = AdamConfig(lr=1e-3)
    meta_hidden: int = 4
    residual_readout: bool = False
    hidden_mode: str | None = None  # "carry" or "zero"; None = variant default
    advance_with: str = "final"  # "final" or "initial" generator weights
    early_window: str = "protocol"  # "protocol" delays meta training to t=k
    bu_window: int = 1
    seed: int = 0

    def __post_init__(self):
        if self.variant not in ALL_VARIANTS:
            raise ConfigError(f"unknown variant {self.variant!r}; choose from {ALL_VARIANTS}")
        if self.k < 1:
            raise ConfigError(f"window length k must be >= 1, got {self.k}")
        if self.warmup_periods < 1:
            raise ConfigError(f"warmup_periods must be >= 1, got {self.warmup_periods}")
        if self.bu_window < 1:
            raise ConfigError(f"bu_window must be >= 1, got {self.bu_window}")
        forced = _FORCED_DECAY.get(self.variant)
        if forced and self.decay_mode not in (None, forced):
            raise ConfigError(f"variant {self.variant} requires decay_mode {forced!r}")
        if self.decay_mode is not None and self.decay_mode not in _DECAY_MODES:
            raise ConfigError(f"unknown decay_mode {self.decay_mode!r}")
        if self.hidden_mode not in (None, "carry", "zero"):
            raise ConfigError(f"hidden_mode must be 'carry' or 'zero', got {self.hidden_mode!r}")
        if self.advance_with not in ("final", "initial"):
            raise ConfigError(f"advance_with must be 'final' or 'initial'")
        if self.early_window not in ("protocol", "padded"):
            raise ConfigError(f"early_window must be 'protocol' or 'padded'")

    @property
    def decay(self) -> str:
        forced = _FORCED_DECAY.get(self.variant)
        if forced:
            return forced
        return self.decay_mode or "linear_decay"

    @property
    def hidden(self) -> str:
        if self.hidden_mode:
            return self.hidden_mode
        return "zero" if self.variant in ("gru_zero", "gru_full") else "carry"

    @property
    def full_window(self) -> bool:
        return self.variant == "gru_full"

    @property
    def is_meta(self) -> bool:
        return self.variant in META_VARIANTS


@dataclass
class PeriodLog:
    period: int
    variant: str
    seed: int
    auc: float
    logloss: float
    meta_seconds: float
    base_seconds: float


# ----------------------------------------------------------------------
# step weights


def decay_weights(k: int, mode: str) -> np.ndarray:
    """Per-step loss weights over a window, oldest first; always sums to 1.

    ``linear_decay`` ramps as j / (1 + ... + k) toward the most recent step.
    """
    if k < 1:
        raise ConfigError(f"window length must be >= 1, got {k}")
    if mode == "linear_decay":
        j = np.arange(1, k + 1, dtype=np.float64)
        return j / j.sum()
    if mode == "uniform":
        return np.full(k, 1.0 / k, dtype=np.float64)
    if mode == "last_only":
        lam = np.zeros(k, dtype=np.float64)
        lam[-1] = 1.0
        return lam
    raise ConfigError(f"unknown decay mode {mode!r}")


def _validate_lambdas(lambdas: np.ndarray) -> np.ndarray:
    lambdas = np.asarray(lambdas, dtype=np.float64)
    if lambdas.ndim != 1 or lambdas.size < 1:
        raise ConfigError("step weights must be a non-empty vector")
    if np.any(lambdas < 0) or abs(lambdas.sum() - 1.0) > 1e-12:
        raise ConfigError(f"step weights must be non-negative and sum to 1, got {lambdas}")
    return lambdas


# ----------------------------------------------------------------------
# active-coordinate plans (train the generator only where a batch looks)


@dataclass
class _SegmentPlan:
    name: str
    rows: np.ndarray  # selected table rows, sorted (embeddings) or all (mlp)
    table_rows: int  # rows the generated table provides at the window layout
    needed_rows: int  # rows the batches may address (>= table_rows on growth)
    start: int  # slice of the active vector
    stop: int


@dataclass
class _ActivePlan:
    active_idx: np.ndarray  # (A,) coordinate ids into the flat window vectors
    segments: list[_SegmentPlan]
    embed_dim: int

    def remap_batch(self, batch: Batch) -> Batch:
        remapped = {}
        by_feature = {p.name[4:]: p for p in self.segments if p.name.startswith("emb:")}
        for fname, idx in batch.feature_idx.items():
            rows = by_feature[fname].rows
            remapped[fname] = np.searchsorted(rows, idx)
        return Batch(feature_idx=remapped, labels=batch.labels)


def _build_active_plan(layout: ModelLayout, batches: list[Batch]) -> _ActivePlan:
    fields_by_name = {f.name: f for f in layout.features}
    used: dict[str, list[np.ndarray]] = {f.name: [] for f in layout.features}
    for batch in batches:
        for fname, idx in batch.feature_idx.items():
            used[fname].append(idx.ravel())
    pieces: list[np.ndarray] = []
    segments: list[_SegmentPlan] = []
    cursor = 0
    d_e = layout.embed_dim
    for name, shape, offset in layout.segments():
        if name.startswith("emb:"):
            f = fields_by_name[name[4:]]
            parts = used[f.name]
            always = [np.array([0], dtype=np.int64)] if f.kind == "sequence" else []
            rows = np.unique(np.concatenate(parts + always)) if (parts or always) else np.array([], dtype=np.int64)
            table_rows = shape[0]
            gen_rows = rows[rows < table_rows]
            coords = (gen_rows[:, None] * d_e + np.arange(d_e)[None, :]).ravel() + offset
            pieces.append(coords)
            size = coords.size
            segments.append(
                _SegmentPlan(
                    name=name,
                    rows=rows,
                    table_rows=table_rows,
                    needed_rows=int(rows.max()) + 1 if rows.size else 0,
                    start=cursor,
                    stop=cursor + size,
                )
            )
            cursor += size
        else:
            size = int(np.prod(shape))
            pieces.append(np.arange(offset, offset + size, dtype=np.int64))
            segments.append(
                _SegmentPlan(
                    name=name, rows=np.arange(size), table_rows=size,
                    needed_rows=size, start=cursor, stop=cursor + size,
                )
            )
            cursor += size
    return _ActivePlan(active_idx=np.concatenate(pieces), segments=segments, embed_dim=d_e)


def _assemble_segment_nodes(
    tape: Tape,
    layout: ModelLayout,
    plan: _ActivePlan,
    generated,  # Node of shape (A,)
    init_seed: int,
):
    """Carve per-segment nodes out of the generated active vector.

    Rows beyond the generated table (ids that appeared after the window's
    layout) are appended as constant init rows, so batches from the newest
    period can still be scored.
    """
    seg_shapes = {name: shape for name, shape, _ in layout.segments()}
    nodes = {}
    for p in plan.segments:
        flat = tape.slice(generated, p.start, p.stop)
        if p.name.startswith("emb:"):
            gen_rows = int(np.sum(p.rows < p.table_rows))
            table = tape.reshape(flat, (gen_rows, plan.embed_dim))
            tail = p.rows[p.rows >= p.table_rows]
            if tail.size:
                init_block = _embedding_rows(init_seed, p.name[4:], p.needed_rows, plan.embed_dim)
                table = tape.concat([table, tape.constant(init_block[tail])], axis=0)
            nodes[p.name] = table
        else:
            nodes[p.name] = tape.reshape(flat, seg_shapes[p.name])
    return nodes


# ----------------------------------------------------------------------
# meta objective and update


def _check_alignment(window, datasets, lambdas):
    lambdas = _validate_lambdas(lambdas)
    if not (len(window) == len(datasets) == lambdas.size):
        raise ConfigError(
            f"window/datasets/weights lengths differ: {len(window)}/{len(datasets)}/{lambdas.size}"
        )
    return lambdas


def meta_objective(
    meta: MetaParams,
    group_map: GroupMap,
    layout: ModelLayout,
    window: list[np.ndarray],
    h_init: HiddenStore,
    datasets: list[PeriodDataset],
    lambdas: np.ndarray,
    init_seed: int = 0,
) -> float:
    """Weighted next-period loss of every step's generated model.

    Step i's output is scored on datasets[i] (the period after snapshot i);
    steps with zero weight contribute exactly zero and are skipped.
    """
    lambdas = _check_alignment(window, datasets, lambdas)
    outs, _ = generate(meta, group_map, window, h_init)
    total = 0.0
    for lam, theta_star, ds in zip(lambdas, outs, datasets):
        if lam == 0.0:
            continue
        params = BaseModelParams(theta=theta_star, layout=layout, period=ds.index)
        needed = _grown_layout_for(layout, ds)
        if needed is not None:
            params = extend_params(params, needed, init_seed)
        scores = predict_period(params, ds)
        total += lam * log_loss(scores, ds.labels)
    return float(total)


def _grown_layout_for(layout: ModelLayout, ds: PeriodDataset) -> ModelLayout | None:
    sizes = {}
    fields_by_name = {f.name: f for f in layout.features}
    batch = batch_from_period(ds)
    grow = False
    for fname, idx in batch.feature_idx.items():
        f = fields_by_name[fname]
        max_idx = int(idx.max()) if idx.size else -1
        if f.kind == "sequence":
            needed_vocab = max_idx  # sequence indices are vocab index + 1
        else:
            needed_vocab = max_idx + 1
        if needed_vocab > f.vocab_size:
            sizes[fname] = needed_vocab
            grow = True
        else:
            sizes[fname] = f.vocab_size
    return layout.grow(sizes) if grow else None


def _batch_plan(n: int, batch_size: int) -> int:
    return max(1, math.ceil(n / batch_size))


def _epoch_orders(datasets, lambdas, seed, period, epoch):
    orders = {}
    for i, ds in enumerate(datasets):
        if lambdas[i] == 0.0:
            continue
        rng = np.random.default_rng(np.random.SeedSequence([seed, period, ds.index, epoch]))
        orders[i] = rng.permutation(len(ds))
    return orders


def meta_update(
    meta: MetaParams,
    group_map: GroupMap,
    layout: ModelLayout,
    window: list[np.ndarray],
    h_init: HiddenStore,
    datasets: list[PeriodDataset],
    lambdas: np.ndarray,
    cfg: TrainerConfig,
    period: int,
    init_seed: int = 0,
) -> MetaParams:
    """Adam on the generator weights; the window snapshots stay constant.

    Each epoch walks the most recent dataset once in shuffled mini-batches;
    earlier steps' datasets cycle their own shuffled batches alongside.
    Gradients flow only where some batch looks, which is exact because
    untouched coordinates cannot influence the loss.
    """
    lambdas = _check_alignment(window, datasets, lambdas)
    new_meta = meta.copy()
    stacks = new_meta.stacks()
    adam = Adam([s.shape for s in stacks], cfg.meta_adam)
    steps = len(window)
    n_batches = [_batch_plan(len(ds), cfg.meta_batch_size) for ds in datasets]

    for epoch in range(cfg.meta_epochs):
        orders = _epoch_orders(datasets, lambdas, cfg.seed, period, epoch)
        for b in range(n_batches[-1]):
            batches: dict[int, Batch] = {}
            for i in range(steps):
                if lambdas[i] == 0.0:
                    continue
                rows_order = orders[i]
                chunk = b % n_batches[i]
                lo = chunk * cfg.meta_batch_size
                batches[i] = batch_from_period(
                    datasets[i], rows_order[lo : lo + cfg.meta_batch_size]
                )
            plan = _build_active_plan(layout, list(batches.values()))
            act = plan.active_idx
            tape = Tape()
            leaves = meta_leaves(tape, new_meta)
            outs = rollout_nodes(
                tape,
                new_meta,
                leaves,
                group_map.coord_group[act],
                h_init.h[act],
                [w[act] for w in window],
            )
            total = None
            for i, batch in batches.items():
                seg_nodes = _assemble_segment_nodes(tape, layout, plan, outs[i], init_seed)
                step_loss = loss_nodes(tape, layout, seg_nodes, plan.remap_batch(batch))
                term = tape.mul(step_loss, tape.constant(lambdas[i]))
                total = term if total is None else tape.add(total, term)
            if not np.isfinite(float(total.value)):
                raise NumericalError("non-finite meta loss", period=period, batch_index=b)
            grads = tape.backward(total)
            adam.step(stacks, grads)
    return new_meta


def meta_update_linear(
    params: LinearMetaParams,
    layout: ModelLayout,
    window: list[np.ndarray],
    dataset: PeriodDataset,
    cfg: TrainerConfig,
    period: int,
    init_seed: int = 0,
) -> LinearMetaParams:
    """Adam on the mixing weights toward the newest period's loss."""
    if params.k != len(window):
        raise ConfigError(f"linear window mismatch: {params.k} weights, {len(window)} models")
    new_params = params.copy()
    adam = Adam([new_params.alpha.shape], cfg.meta_adam)
    nb = _batch_plan(len(dataset), cfg.meta_batch_size)
    for epoch in range(cfg.meta_epochs):
        rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, period, dataset.index, epoch]))
        order = rng.permutation(len(dataset))
        for b in range(nb):
            lo = b * cfg.meta_batch_size
            batch = batch_from_period(dataset, order[lo : lo + cfg.meta_batch_size])
            plan = _build_active_plan(layout, [batch])
            act = plan.active_idx
            tape = Tape()
            alpha_leaf = tape.leaf(new_params.alpha)
            mixed = linear_combine_nodes(tape, alpha_leaf, [w[act] for w in window])
            seg_nodes = _assemble_segment_nodes(tape, layout, plan, mixed, init_seed)
            loss = loss_nodes(tape, layout, seg_nodes, plan.remap_batch(batch))
            if not np.isfinite(float(loss.value)):
                raise NumericalError("non-finite linear meta loss", period=period, batch_index=b)
            (grad,) = tape.backward(loss)
            adam.step([new_params.alpha], [grad])
    return new_params


def advance_hidden_state(
    meta: MetaParams,
    group_map: GroupMap,
    window: list[np.ndarray],
    store: HiddenStore,
    window_start: int,
) -> HiddenStore:
    """Consume the oldest window snapshot into the carried hidden state.

    The store must represent h of the period just before the window starts;
    the returned store's tag advances by one.
    """
    if store.tag != window_start - 1:
        raise ConfigError(
            f"hidden store tag {store.tag} does not precede window start {window_start}"
        )
    h = stacked_step(meta, group_map.coord_group, store.h, window[0])
    return HiddenStore(h=h, tag=store.tag + 1)


# ----------------------------------------------------------------------
# period providers


class PeriodProvider(Protocol):
    """Update-period view of a prepared dataset, in relative period indices.

    Relative period 1 is the first period after pre-training; `dataset(r)`
    must be available for r up to `n_periods` (the last one is the final
    evaluation target and never receives an update).
    """

    def n_periods(self) -> int: ...

    def dataset(self, rel_t: int) -> PeriodDataset: ...

    def layout_at(self, rel_t: int) -> ModelLayout: ...


class ListProvider:
    """In-memory provider with a fixed layout; test and toy use."""

    def __init__(self, datasets: list[PeriodDataset], layout: ModelLayout):
        self._datasets = datasets
        self._layout = layout

    def n_periods(self) -> int:
        return len(self._datasets)

    def dataset(self, rel_t: int) -> PeriodDataset:
        if not (1 <= rel_t <= len(self._datasets)):
            raise DataError(f"period {rel_t} out of range 1..{len(self._datasets)}")
        return self._datasets[rel_t - 1]

    def layout_at(self, rel_t: int) -> ModelLayout:
        return self._layout


# ----------------------------------------------------------------------
# the period loop


@dataclass
class Runner:
    """Drives one variant through warm-up and online periods.

    State lives in plain fields so callers can checkpoint and resume; all
    mutation happens in `_commit_*` helpers after a period fully succeeds.
    """

    provider: PeriodProvider
    tcfg: TrainerConfig
    base_opt: OptConfig
    pretrain: BaseModelParams  # snapshot before relative period 1
    init_seed: int
    t: int = 0  # most recent update period completed
    warmed: bool = False
    meta: MetaParams | None = None
    linear: LinearMetaParams | None = None
    hidden: HiddenStore | None = None
    snapshots: dict[int, BaseModelParams] = field(default_factory=dict)

    def __post_init__(self):
        if self.tcfg.is_meta and self.meta is None and self.linear is None:
            gm = build_group_map(self.provider.layout_at(1))
            if self.tcfg.variant == "linear":
                self.linear = init_linear(self.tcfg.k)
            else:
                self.meta = init_meta(
                    gm,
                    d=self.tcfg.meta_hidden,
                    k=self.tcfg.k,
                    seed=self.tcfg.seed,
                    residual_readout=self.tcfg.residual_readout,
                )
                self.hidden = zero_hidden(gm.n_coords, self.tcfg.meta_hidden, tag=0)

    # -- helpers -------------------------------------------------------

    def _group_map(self, layout: ModelLayout) -> GroupMap:
        return build_group_map(layout)

    def _snapshot(self, rel: int) -> BaseModelParams:
        if rel == 0:
            return self.pretrain
        return self.snapshots[rel]

    def _train_base(self, rel: int) -> BaseModelParams:
        layout = self.provider.layout_at(rel)
        prev = extend_params(self._snapshot(rel - 1), layout, self.init_seed)
        if self.tcfg.variant == "bu":
            lo = max(1, rel - self.tcfg.bu_window + 1)
            shards = [self.provider.dataset(r) for r in range(lo, rel + 1)]
        else:
            shards = [self.provider.dataset(rel)]
        opt = OptConfig(
            epochs=self.base_opt.epochs,
            batch_size=self.base_opt.batch_size,
            adam=self.base_opt.adam,
            seed=self.init_seed,
        )
        return incremental_update(prev, shards, opt)

    def _window_start(self, rel: int) -> int:
        return 1 if self.tcfg.full_window else max(1, rel - self.tcfg.k + 1)

    def _window_vectors(self, rel: int, layout: ModelLayout) -> list[np.ndarray]:
        start = self._window_start(rel)
        return [
            extend_params(self._snapshot(r), layout, self.init_seed).theta
            for r in range(start, rel + 1)
        ]

    def _h_init(self, rel: int, layout: ModelLayout, gm: GroupMap) -> HiddenStore:
        start = self._window_start(rel)
        if self.tcfg.full_window or self.tcfg.hidden == "zero":
            return zero_hidden(gm.n_coords, self.tcfg.meta_hidden, tag=start - 1)
        store = extend_hidden(self.hidden, gm.n_coords)
        if store.tag != start - 1:
            raise ConfigError(
                f"hidden store tag {store.tag} inconsistent with window start {start}"
            )
        return store

    def _meta_ready(self, rel: int) -> bool:
        # protocol mode delays generator training until a full window exists;
        # gru_full follows the same schedule so variants stay comparable
        if not self.tcfg.is_meta:
            return False
        if self.tcfg.early_window == "padded":
            return rel >= 1
        return rel >= self.tcfg.k

    def _train_meta(self, rel: int, target: PeriodDataset) -> float:
        """Train the generator at window end `rel` toward `target`; returns seconds."""
        start_time = time.perf_counter()
        layout = self.provider.layout_at(rel)
        window = self._window_vectors(rel, layout)
        if self.tcfg.variant == "linear":
            window = window[-self.linear.k :]
            if len(window) < self.linear.k:
                raise ConfigError("linear variant needs a full window of snapshots")
            self.linear = meta_update_linear(
                self.linear, layout, window, target, self.tcfg, rel, self.init_seed
            )
            return time.perf_counter() - start_time
        gm = self._group_map(layout)
        h0 = self._h_init(rel, layout, gm)
        lambdas = decay_weights(len(window), self.tcfg.decay)
        start = self._window_start(rel)
        datasets = [self.provider.dataset(r + 1) for r in range(start, rel)] + [target]
        meta_before = self.meta
        self.meta = meta_update(
            self.meta, gm, layout, window, h0, datasets, lambdas,
            self.tcfg, rel, self.init_seed,
        )
        if self.tcfg.hidden == "carry" and not self.tcfg.full_window and len(window) == self.tcfg.k:
            advancing = self.meta if self.tcfg.advance_with == "final" else meta_before
            self.hidden = advance_hidden_state(advancing, gm, window, h0, start)
        return time.perf_counter() - start_time

    def _evict(self, rel: int) -> None:
        if self.tcfg.variant in ("iu", "bu"):
            keep_from = rel
        elif self.tcfg.full_window:
            return
        else:
            keep_from = rel - self.tcfg.k + 1
        for r in [r for r in self.snapshots if r < keep_from]:
            del self.snapshots[r]

    # -- serving -------------------------------------------------------

    def serving_params(self, rel: int) -> BaseModelParams:
        """The model deployed to score period rel+1."""
        layout = self.provider.layout_at(rel)
        base = self.snapshots[rel]
        if not self.tcfg.is_meta or not self._meta_ready(rel):
            return base
        window = self._window_vectors(rel, layout)
        if self.tcfg.variant == "linear":
            theta = linear_combine(self.linear.alpha, window[-self.linear.k :])
        else:
            gm = self._group_map(layout)
            outs, _ = generate(self.meta, gm, window, self._h_init(rel, layout, gm))
            theta = outs[-1]
        return BaseModelParams(theta=theta, layout=layout, period=rel)

    # -- lifecycle -----------------------------------------------------

    def warmup(self) -> None:
        """Offline phase: build the incremental chain and pre-train the generator."""
        tau = self.tcfg.warmup_periods
        need = tau + 1
        if self.provider.n_periods() < need:
            raise DataError(
                f"warm-up needs at least {need} update periods "
                f"({tau} warm-up + 1), provider has {self.provider.n_periods()}"
            )
        for rel in range(1, tau + 1):
            base = self._train_base(rel)
            self.snapshots[rel] = base
            self.t = rel
            if self._meta_ready(rel):
                self._train_meta(rel, self.provider.dataset(rel + 1))
            self._evict(rel)
        self.snapshots[tau + 1] = self._train_base(tau + 1)
        self.t = tau + 1
        self._evict(tau + 1)
        self.warmed = True

    def online_step(self, train_after: bool = True) -> PeriodLog:
        """Serve, evaluate, then update base and generator; strict order.

        `train_after=False` skips the post-evaluation updates; only valid at
        the stream's final period where nothing can observe them.
        """
        if not self.warmed:
            raise ConfigError("online_step before warmup")
        rel = self.t
        if rel + 1 > self.provider.n_periods():
            raise DataError(f"no dataset for period {rel + 1}; run is complete")
        next_ds = self.provider.dataset(rel + 1)

        served = self.serving_params(rel)
        eval_layout = self.provider.layout_at(rel + 1)
        served = extend_params(served, eval_layout, self.init_seed)
        scores = predict_period(served, next_ds)
        period_auc = compute_auc(scores, next_ds.labels)
        period_logloss = log_loss(scores, next_ds.labels)

        base_seconds = 0.0
        meta_seconds = 0.0
        if train_after:
            t0 = time.perf_counter()
            new_base = self._train_base(rel + 1)
            base_seconds = time.perf_counter() - t0
            self.snapshots[rel + 1] = new_base
            if self._meta_ready(rel):
                meta_seconds = self._train_meta(rel, next_ds)
        self.t = rel + 1
        self._evict(rel + 1)
        return PeriodLog(
            period=rel,
            variant=self.tcfg.variant if self.tcfg.variant != "bu" else f"bu{self.tcfg.bu_window}",
            seed=self.init_seed,
            auc=period_auc,
            logloss=period_logloss,
            meta_seconds=meta_seconds,
            base_seconds=base_seconds,
        )
