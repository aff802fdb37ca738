"""Shared toy-data builders for trainer-level tests."""

import numpy as np

from asmg.base_model import init_params, standard_layout
from asmg.datastream import PeriodDataset
from asmg.trainer import ListProvider


def toy_layout(n_users=8, n_items=10, embed_dim=2, hidden=(4,), activation="tanh"):
    return standard_layout(
        {"user": n_users, "item": n_items}, embed_dim, hidden, activation=activation
    )


def drifting_period(layout, index, n=48, seed=0):
    """One period whose positive items rotate with the period index."""
    rng = np.random.default_rng(np.random.SeedSequence([seed, index]))
    n_users = [f for f in layout.features if f.name == "user"][0].vocab_size
    n_items = [f for f in layout.features if f.name == "item"][0].vocab_size
    users = rng.integers(0, n_users, size=n)
    labels = rng.integers(0, 2, size=n)
    hot = (np.arange(3) + index) % n_items  # popular items drift over periods
    items = np.where(labels == 1, hot[rng.integers(0, 3, size=n)], rng.integers(0, n_items, size=n))
    seq = rng.integers(0, n_items + 1, size=(n, 30))
    seq[:, 10:] = 0
    return PeriodDataset(
        index=index,
        user_idx=users,
        item_idx=items.astype(np.int64),
        seq_idx=seq,
        side_idx={},
        labels=labels,
        timestamps=np.full(n, index * 1000, dtype=np.int64),
        provenance="toy",
    )


def toy_provider(layout, n_periods=8, n=48, seed=0):
    datasets = [drifting_period(layout, t, n=n, seed=seed) for t in range(1, n_periods + 1)]
    return ListProvider(datasets, layout)


def pretrained(layout, seed=0):
    return init_params(layout, seed)
