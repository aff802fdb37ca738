"""Synthetic non-stationary interaction stream for desk-scale experiments.

Items sit at fixed angles on a circle and a popularity peak sweeps around
it, advancing `rotation` cycles per period; an item's popularity logit is
the concentration times the cosine of its distance to the peak.  Every
item therefore rises toward the top and decays away smoothly, so recent
data is genuinely informative about the next period while data several
periods old mixes in stale popularity.  A user-cluster affinity whose
per-user preferences random-walk at the `drift` rate and Gumbel sampling
noise complete the picked-item distribution.

With rotation and drift both zero the stream is stationary and incremental
vs batch updating should tie within noise.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import ConfigError

SECONDS_PER_DAY = 86400


@dataclass(frozen=True)
class SyntheticDriftSpec:
    n_users: int = 10_000
    n_items: int = 1_000
    n_periods: int = 31
    events_per_period: int = 2_500
    rotation: float = 0.03  # popularity-peak advance, in cycles per period
    drift: float = 0.05  # user-preference random-walk mixing rate
    noise: float = 1.0  # Gumbel temperature on the sampling scores
    popularity_skew: float = 3.0  # concentration of popularity around the peak
    affinity_scale: float = 1.5  # weight of the user-cluster component
    n_clusters: int = 8
    seed: int = 0

    def __post_init__(self):
        if not (0.0 <= self.rotation <= 1.0):
            raise ConfigError(f"rotation must be in [0, 1], got {self.rotation}")
        if not (0.0 <= self.drift <= 1.0):
            raise ConfigError(f"drift must be in [0, 1], got {self.drift}")
        if min(self.n_users, self.n_items, self.n_periods, self.events_per_period) < 1:
            raise ConfigError("users/items/periods/events must all be positive")
        if self.noise < 0:
            raise ConfigError(f"noise must be >= 0, got {self.noise}")


def _popularity_logits(spec: SyntheticDriftSpec, angles: np.ndarray, period: int) -> np.ndarray:
    peak = 2.0 * np.pi * spec.rotation * (period - 1)
    return spec.popularity_skew * np.cos(angles - peak)


def generate_events(spec: SyntheticDriftSpec) -> list[tuple[str, str, int]]:
    """(user_id, item_id, timestamp) positives, deterministic in the seed."""
    rng = np.random.default_rng(np.random.SeedSequence([spec.seed, 0x5D21F7]))
    # items spread evenly around the circle, in a shuffled order
    angles = 2.0 * np.pi * rng.permutation(spec.n_items) / spec.n_items
    item_cluster = rng.integers(0, spec.n_clusters, size=spec.n_items)
    prefs = rng.dirichlet(np.ones(spec.n_clusters), size=spec.n_users)

    events: list[tuple[str, str, int]] = []
    for period in range(1, spec.n_periods + 1):
        pop = _popularity_logits(spec, angles, period)
        users = rng.integers(0, spec.n_users, size=spec.events_per_period)
        affinity = spec.affinity_scale * prefs[users][:, item_cluster]  # (E, N)
        scores = pop[None, :] + affinity
        if spec.noise > 0:
            scores = scores + spec.noise * rng.gumbel(size=scores.shape)
        items = np.argmax(scores, axis=1)
        t0 = (period - 1) * SECONDS_PER_DAY
        for j, (u, i) in enumerate(zip(users, items)):
            events.append((f"u{u}", f"i{i}", t0 + j))
        if spec.drift > 0:
            fresh = rng.dirichlet(np.ones(spec.n_clusters), size=spec.n_users)
            prefs = (1.0 - spec.drift) * prefs + spec.drift * fresh
            prefs /= prefs.sum(axis=1, keepdims=True)
    return events


def write_stream(spec: SyntheticDriftSpec, path) -> int:
    """Write the stream as a tab-separated interaction log; returns row count."""
    events = generate_events(spec)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", encoding="utf-8") as fh:
        fh.write("user_id\titem_id\tlabel\ttimestamp\n")
        for user, item, ts in events:
            fh.write(f"{user}\t{item}\t1\t{ts}\n")
    return len(events)


def top_item_overlap(events, period_a: int, period_b: int, top_frac: float = 0.1) -> float:
    """Jaccard-free overlap: |top_a intersect top_b| / top size, by frequency."""

    def top_items(period):
        counts: dict[str, int] = {}
        lo = (period - 1) * SECONDS_PER_DAY
        hi = period * SECONDS_PER_DAY
        for _, item, ts in events:
            if lo <= ts < hi:
                counts[item] = counts.get(item, 0) + 1
        ranked = sorted(counts, key=lambda i: (-counts[i], i))
        size = max(1, int(len(ranked) * top_frac))
        return set(ranked[:size]), size

    top_a, size_a = top_items(period_a)
    top_b, _ = top_items(period_b)
    return len(top_a & top_b) / size_a
