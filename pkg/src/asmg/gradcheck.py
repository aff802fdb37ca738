"""The finite-difference verification suite behind `asmg check-grads`.

Half the instances differentiate the base model's log loss with respect to
its full parameter vector; the other half differentiate the multi-step
generator objective with respect to the cell weights.  Probes for the
generator objective use a 1e-3 central-difference step: its gradient
spectrum spans many orders of magnitude, and at 1e-5 the float64
cancellation noise (|loss|*eps/2h ~ 8e-12) sits above the error metric's
1e-8 denominator floor.  Base-model probes keep the 1e-5 step.

ReLU instances are redrawn if any hidden pre-activation falls within a
guard band of the kink, where central differences are invalid.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autodiff import Tape, finite_diff_check
from .base_model import Batch, loss_nodes, split_theta, standard_layout
from .datastream import MAX_SEQUENCE
from .metagen import MetaParams, build_group_map, init_meta, rollout_nodes
from .trainer import decay_weights

BASE_STEP = 1e-5
META_STEP = 1e-3
TOLERANCE = 1e-4


@dataclass
class CheckResult:
    name: str
    error: float
    tolerance: float

    @property
    def ok(self) -> bool:
        return self.error < self.tolerance


def _random_layout(rng: np.random.Generator, activation: str):
    return standard_layout(
        {"user": int(rng.integers(3, 8)), "item": int(rng.integers(3, 9))},
        embed_dim=int(rng.integers(2, 4)),
        hidden_sizes=tuple(int(h) for h in rng.integers(2, 5, size=int(rng.integers(1, 3)))),
        activation=activation,
    )


def _random_batch(rng: np.random.Generator, layout, size=4) -> Batch:
    vocab = {f.name: f.vocab_size for f in layout.features}
    seq = rng.integers(0, vocab["item"] + 1, size=(size, MAX_SEQUENCE))
    seq[:, rng.integers(5, MAX_SEQUENCE) :] = 0
    return Batch(
        feature_idx={
            "user": rng.integers(0, vocab["user"], size=size),
            "item": rng.integers(0, vocab["item"], size=size),
            "hist": seq,
        },
        labels=rng.integers(0, 2, size=size),
    )


def _relu_preacts_safe(layout, theta, batch, guard: float) -> bool:
    """False if any hidden pre-activation sits inside the kink guard band."""
    if layout.activation != "relu":
        return True
    tape = Tape()
    segs = {n: tape.constant(a) for n, a in split_theta(layout, theta).items()}
    from .base_model import score_nodes  # local import avoids cycle at module load

    parts = []
    for f in layout.ordered_features:
        table = segs[f"emb:{f.name}"]
        idx = batch.feature_idx[f.name]
        if f.kind == "onehot":
            parts.append(tape.gather(table, idx))
        else:
            looked = tape.gather(table, idx)
            mask = (idx != 0).astype(np.float64)[:, :, None]
            pooled = tape.sum(tape.mul(looked, tape.constant(mask)), axis=1)
            counts = np.maximum(mask.sum(axis=1), 1.0)
            pooled = tape.mul(pooled, tape.constant(1.0 / counts))
            parts.append(pooled)
    x = tape.concat(parts, axis=1)
    for li in range(len(layout.hidden_sizes)):
        pre = tape.add(tape.matmul(x, segs[f"mlp:w{li}"]), segs[f"mlp:b{li}"])
        if np.min(np.abs(pre.value)) < guard:
            return False
        x = tape.relu(pre)
    return True


def base_model_instance(seed: int) -> CheckResult:
    """Clipped log loss of the scoring model w.r.t. every parameter."""
    attempt = 0
    while True:
        rng = np.random.default_rng(np.random.SeedSequence([seed, attempt, 0xBA5E]))
        activation = "relu" if seed % 2 == 0 else "tanh"
        layout = _random_layout(rng, activation)
        theta = rng.uniform(-0.5, 0.5, size=layout.n_params)
        batch = _random_batch(rng, layout)
        if _relu_preacts_safe(layout, theta, batch, guard=20 * BASE_STEP):
            break
        attempt += 1

    def build(tape, leaves):
        names = [name for name, _, _ in layout.segments()]
        return loss_nodes(tape, layout, dict(zip(names, leaves)), batch)

    err = finite_diff_check(build, list(split_theta(layout, theta).values()), step=BASE_STEP)
    return CheckResult(f"base-loss[{activation}] seed={seed}", err, TOLERANCE)


def meta_objective_instance(seed: int, k: int = 2) -> CheckResult:
    """Weighted multi-step generator objective w.r.t. the cell weights."""
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0x6E7A]))
    layout = _random_layout(rng, "tanh")
    gm = build_group_map(layout)
    d = int(rng.integers(2, 4))
    meta = init_meta(gm, d=d, k=k, seed=seed)
    h0 = rng.uniform(-0.8, 0.8, size=(gm.n_coords, d))
    window = [rng.uniform(-0.5, 0.5, size=gm.n_coords) for _ in range(k)]
    batches = [_random_batch(rng, layout) for _ in range(k)]
    lam = decay_weights(k, "linear_decay")

    def build(tape, leaves):
        leaf_map = dict(zip(MetaParams.STACKS, leaves))
        outs = rollout_nodes(tape, meta, leaf_map, gm.coord_group, h0, window)
        total = None
        for lam_i, out, batch in zip(lam, outs, batches):
            seg_nodes = {}
            for name, shape, offset in layout.segments():
                size = int(np.prod(shape))
                seg_nodes[name] = tape.reshape(tape.slice(out, offset, offset + size), shape)
            term = tape.mul(loss_nodes(tape, layout, seg_nodes, batch), tape.constant(lam_i))
            total = term if total is None else tape.add(total, term)
        return total

    err = finite_diff_check(build, meta.stacks(), step=META_STEP)
    return CheckResult(f"meta-objective[k={k},d={d}] seed={seed}", err, TOLERANCE)


def run_suite(n_instances: int = 20, seed: int = 0) -> list[CheckResult]:
    """At least `n_instances` random tiny gradient checks, half per family."""
    half = max(1, n_instances // 2)
    results = [base_model_instance(seed + i) for i in range(half)]
    results += [meta_objective_instance(seed + i, k=2 + (i % 2)) for i in range(n_instances - half)]
    return results
