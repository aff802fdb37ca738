"""Interaction-log ingestion, period splitting, user sequences and shards.

Input format: delimiter-separated text (tab or comma, sniffed from the
header), one interaction per line::

    user_id<TAB>item_id<TAB>label<TAB>timestamp[<TAB>name=value ...]

The header row is required and must name the four fixed columns.  Trailing
columns carry categorical side features as ``name=value`` pairs and are
treated as item attributes.

`prepare_shards` splits a log into periods, builds the 30-item user
sequence feature, optionally pairs every positive with one sampled
negative, and persists one shard file per period plus a manifest.  All of
it is deterministic given the input file and the sampling seed.
"""

from __future__ import annotations

import json
import hashlib
from bisect import bisect_left
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import DataError

MAX_SEQUENCE = 30
REQUIRED_COLUMNS = ("user_id", "item_id", "label", "timestamp")
PAD_INDEX = 0  # row 0 of the sequence embedding table is the padding row


@dataclass
class Interaction:
    user_id: str
    item_id: str
    label: int
    timestamp: int
    side_features: dict[str, str] = field(default_factory=dict)
    input_index: int = 0  # position in the source file; tie-break for equal timestamps


# ----------------------------------------------------------------------
# reading


def _sniff_delimiter(header: str) -> str:
    return "\t" if "\t" in header else ","


def read_interactions(path) -> tuple[list[Interaction], list[str]]:
    """Parse an interaction log. Returns (interactions, side feature names)."""
    path = Path(path)
    if not path.exists():
        raise DataError(f"input file not found: {path}")
    with path.open("r", encoding="utf-8") as fh:
        header_line = fh.readline()
        if not header_line:
            raise DataError(f"{path}: empty file, expected a header row naming {REQUIRED_COLUMNS}")
        delim = _sniff_delimiter(header_line)
        header = [c.strip() for c in header_line.rstrip("\n").split(delim)]
        if tuple(header[:4]) != REQUIRED_COLUMNS:
            raise DataError(
                f"{path}: header must start with {', '.join(REQUIRED_COLUMNS)}; got {header[:4]}"
            )
        interactions: list[Interaction] = []
        side_names: list[str] | None = None
        for lineno, line in enumerate(fh, start=2):
            line = line.rstrip("\n")
            if not line:
                continue
            cells = line.split(delim)
            if len(cells) < 4:
                raise DataError(f"{path}:{lineno}: expected at least 4 columns, got {len(cells)}")
            user, item, label_s, ts_s = cells[:4]
            try:
                label = int(label_s)
                ts = int(ts_s)
            except ValueError:
                raise DataError(f"{path}:{lineno}: label/timestamp must be integers") from None
            if label not in (0, 1):
                raise DataError(f"{path}:{lineno}: label must be 0 or 1, got {label}")
            side: dict[str, str] = {}
            for cell in cells[4:]:
                if "=" not in cell:
                    raise DataError(f"{path}:{lineno}: side column {cell!r} is not name=value")
                name, value = cell.split("=", 1)
                side[name] = value
            names = sorted(side)
            if side_names is None:
                side_names = names
            elif names != side_names:
                raise DataError(
                    f"{path}:{lineno}: side features {names} differ from first row's {side_names}"
                )
            interactions.append(Interaction(user, item, label, ts, side, len(interactions)))
    if not interactions:
        raise DataError(f"{path}: no interaction rows")
    return interactions, side_names or []


# ----------------------------------------------------------------------
# splitting

SECONDS_PER_DAY = 86400


def split_periods(
    interactions: list[Interaction],
    scheme: str,
    n_periods: int | None = None,
) -> list[list[Interaction]]:
    """Split interactions into time-ordered disjoint periods.

    ``calendar_day`` makes one period per distinct UTC day present in the
    data.  ``equal_count`` makes `n_periods` periods whose sizes differ by at
    most one, earliest periods taking the extra sample.  Ties on timestamps
    keep input-file order and are split mechanically.
    """
    if not interactions:
        raise DataError("cannot split an empty interaction list")
    ordered = sorted(interactions, key=lambda r: (r.timestamp, r.input_index))
    if scheme == "calendar_day":
        periods: list[list[Interaction]] = []
        current_day = None
        for row in ordered:
            day = row.timestamp // SECONDS_PER_DAY
            if day != current_day:
                periods.append([])
                current_day = day
            periods[-1].append(row)
        return periods
    if scheme == "equal_count":
        if n_periods is None or n_periods <= 0:
            raise DataError(f"equal_count requires a positive n_periods, got {n_periods}")
        if n_periods > len(ordered):
            raise DataError(
                f"equal_count: n_periods {n_periods} exceeds {len(ordered)} interactions"
            )
        base, extra = divmod(len(ordered), n_periods)
        periods = []
        offset = 0
        for p in range(n_periods):
            size = base + (1 if p < extra else 0)
            periods.append(ordered[offset : offset + size])
            offset += size
        return periods
    raise DataError(f"unknown splitting scheme {scheme!r}")


# ----------------------------------------------------------------------
# user sequences


class UserHistory:
    """Time-indexed positive-feedback history of one user.

    `before(ts)` returns the most recent `MAX_SEQUENCE` positively-labeled
    item ids strictly earlier than `ts`.  Events sharing a timestamp keep
    input-file order inside the sequence; an event is never part of a
    sequence queried at its own timestamp.
    """

    __slots__ = ("timestamps", "items")

    def __init__(self):
        self.timestamps: list[int] = []
        self.items: list[str] = []

    def append(self, ts: int, item: str) -> None:
        self.timestamps.append(ts)
        self.items.append(item)

    def before(self, ts: int, limit: int = MAX_SEQUENCE) -> list[str]:
        cut = bisect_left(self.timestamps, ts)
        start = max(0, cut - limit)
        return self.items[start:cut]


def build_user_sequences(interactions: list[Interaction]) -> dict[str, UserHistory]:
    """Chronological positive-feedback history per user.

    Histories must be appended in (timestamp, input order); this function
    sorts accordingly so callers can pass interactions in any order.
    """
    histories: dict[str, UserHistory] = {}
    for row in sorted(interactions, key=lambda r: (r.timestamp, r.input_index)):
        if row.label != 1:
            continue
        histories.setdefault(row.user_id, UserHistory()).append(row.timestamp, row.item_id)
    return histories


# ----------------------------------------------------------------------
# negative sampling


def sample_negatives(
    period_positives: list[Interaction],
    item_catalog: list[str],
    seed: int,
    observed_by_user: dict[str, set[str]] | None = None,
) -> list[Interaction]:
    """Pair every positive with one sampled unobserved item.

    Returns positives and negatives interleaved (each positive followed by
    its negative).  The negative copies the positive's user, timestamp and
    side placement; its item is drawn uniformly from `item_catalog` minus
    the user's observed-positive set.  Deterministic given `seed`.
    """
    if observed_by_user is None:
        observed_by_user = {}
        for row in period_positives:
            observed_by_user.setdefault(row.user_id, set()).add(row.item_id)
    rng = np.random.default_rng(seed)
    catalog_size = len(item_catalog)
    out: list[Interaction] = []
    for row in period_positives:
        observed = observed_by_user.get(row.user_id, set())
        if len(observed) >= catalog_size:
            raise DataError(
                f"user {row.user_id!r} has interacted with the entire catalog; "
                "cannot sample a negative"
            )
        while True:
            candidate = item_catalog[int(rng.integers(0, catalog_size))]
            if candidate not in observed:
                break
        out.append(row)
        out.append(
            Interaction(
                user_id=row.user_id,
                item_id=candidate,
                label=0,
                timestamp=row.timestamp,
                side_features={},
                input_index=row.input_index,
            )
        )
    return out


# ----------------------------------------------------------------------
# vocabulary


class Vocab:
    """Append-only id -> index table with the period each id first appeared."""

    def __init__(self):
        self.ids: list[str] = []
        self.first_seen: list[int] = []
        self._index: dict[str, int] = {}

    def add(self, raw_id: str, period: int) -> int:
        idx = self._index.get(raw_id)
        if idx is None:
            idx = len(self.ids)
            self.ids.append(raw_id)
            self.first_seen.append(period)
            self._index[raw_id] = idx
        return idx

    def index(self, raw_id: str) -> int:
        return self._index[raw_id]

    def __len__(self) -> int:
        return len(self.ids)

    def size_at(self, period: int) -> int:
        """Vocabulary size counting only ids first seen at or before `period`."""
        # first_seen is non-decreasing because ids are added scanning periods in order
        return bisect_left(self.first_seen, period + 1)

    def save(self, path: Path) -> None:
        with path.open("w", encoding="utf-8") as fh:
            for raw_id, seen in zip(self.ids, self.first_seen):
                fh.write(f"{raw_id}\t{seen}\n")

    @classmethod
    def load(cls, path: Path) -> "Vocab":
        vocab = cls()
        with path.open("r", encoding="utf-8") as fh:
            for line in fh:
                raw_id, seen = line.rstrip("\n").split("\t")
                vocab.add(raw_id, int(seen))
        return vocab


# ----------------------------------------------------------------------
# shards


@dataclass
class PeriodDataset:
    """Vectorized labeled samples of one period, ready for batching."""

    index: int
    user_idx: np.ndarray  # (N,) int64
    item_idx: np.ndarray  # (N,) int64
    seq_idx: np.ndarray  # (N, MAX_SEQUENCE) int64; PAD_INDEX marks absent slots
    side_idx: dict[str, np.ndarray]
    labels: np.ndarray  # (N,) int64 in {0, 1}
    timestamps: np.ndarray  # (N,) int64
    provenance: str

    def __len__(self) -> int:
        return int(self.labels.size)

    @property
    def n_positives(self) -> int:
        return int(self.labels.sum())


def _shard_name(t: int) -> str:
    return f"period_{t:04d}.tsv"


def prepare_shards(
    interactions: list[Interaction],
    side_names: list[str],
    out_dir,
    scheme: str,
    n_periods: int | None,
    negative_mode: str,
    seed: int,
) -> dict:
    """Split, featurize, sample negatives and persist period shards.

    negative_mode ``sample`` pairs each positive with one drawn negative
    (inputs must then be all-positive); ``explicit`` keeps given labels and
    samples nothing.  Side feature values for sampled negatives come from
    the sampled item's first observed attributes.  Returns the manifest
    dict (also written to ``manifest.json``).
    """
    if negative_mode not in ("sample", "explicit"):
        raise DataError(f"negative_mode must be 'sample' or 'explicit', got {negative_mode!r}")
    if negative_mode == "sample" and any(r.label != 1 for r in interactions):
        raise DataError("negative_mode 'sample' expects an all-positive input log")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)

    periods = split_periods(interactions, scheme, n_periods)
    histories = build_user_sequences(interactions)
    user_vocab, item_vocab = Vocab(), Vocab()
    side_vocabs = {name: Vocab() for name in side_names}
    item_side: dict[str, dict[str, str]] = {}  # item -> first observed side values
    observed: dict[str, set[str]] = {}

    manifest_periods = []
    for t, rows in enumerate(periods, start=1):
        # register ids before sampling so this period's items are in the catalog
        for row in rows:
            user_vocab.add(row.user_id, t)
            item_vocab.add(row.item_id, t)
            for name in side_names:
                side_vocabs[name].add(row.side_features[name], t)
            if row.item_id not in item_side:
                item_side[row.item_id] = dict(row.side_features)
            if row.label == 1:
                observed.setdefault(row.user_id, set()).add(row.item_id)

        if negative_mode == "sample":
            catalog = item_vocab.ids[: item_vocab.size_at(t)]
            labeled = sample_negatives(rows, catalog, seed=seed + t, observed_by_user=observed)
        else:
            labeled = rows

        n_pos = sum(1 for r in labeled if r.label == 1)
        shard_path = out_dir / _shard_name(t)
        with shard_path.open("w", encoding="utf-8") as fh:
            cols = ["user_id", "item_id", "label", "timestamp", "sequence", *side_names]
            fh.write("\t".join(cols) + "\n")
            for row in labeled:
                seq = histories.get(row.user_id)
                seq_items = seq.before(row.timestamp) if seq else []
                side_src = row.side_features if row.label == 1 or negative_mode == "explicit" else item_side[row.item_id]
                cells = [
                    row.user_id,
                    row.item_id,
                    str(row.label),
                    str(row.timestamp),
                    ",".join(seq_items),
                    *[side_src[name] for name in side_names],
                ]
                fh.write("\t".join(cells) + "\n")
        manifest_periods.append(
            {
                "index": t,
                "file": shard_path.name,
                "start_ts": rows[0].timestamp,
                "end_ts": rows[-1].timestamp,
                "n_samples": len(labeled),
                "n_positives": n_pos,
            }
        )

    user_vocab.save(out_dir / "vocab_user.tsv")
    item_vocab.save(out_dir / "vocab_item.tsv")
    for name, vocab in side_vocabs.items():
        vocab.save(out_dir / f"vocab_side_{name}.tsv")

    manifest = {
        "scheme": scheme if scheme != "equal_count" else f"equal_count({n_periods})",
        "n_periods": len(periods),
        "negative_mode": negative_mode,
        "seed": seed,
        "max_sequence": MAX_SEQUENCE,
        "side_features": side_names,
        "n_users": len(user_vocab),
        "n_items": len(item_vocab),
        "periods": manifest_periods,
    }
    with (out_dir / "manifest.json").open("w", encoding="utf-8") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return manifest


@dataclass
class ShardStore:
    """Read access to a prepared shard directory."""

    root: Path
    manifest: dict
    user_vocab: Vocab
    item_vocab: Vocab
    side_vocabs: dict[str, Vocab]

    @classmethod
    def open(cls, root) -> "ShardStore":
        root = Path(root)
        manifest_path = root / "manifest.json"
        if not manifest_path.exists():
            raise DataError(f"no manifest.json under {root}")
        manifest = json.loads(manifest_path.read_text(encoding="utf-8"))
        side = {
            name: Vocab.load(root / f"vocab_side_{name}.tsv")
            for name in manifest["side_features"]
        }
        return cls(
            root=root,
            manifest=manifest,
            user_vocab=Vocab.load(root / "vocab_user.tsv"),
            item_vocab=Vocab.load(root / "vocab_item.tsv"),
            side_vocabs=side,
        )

    @property
    def n_periods(self) -> int:
        return self.manifest["n_periods"]

    def load_period(self, t: int) -> PeriodDataset:
        if not (1 <= t <= self.n_periods):
            raise DataError(f"period {t} out of range 1..{self.n_periods}")
        path = self.root / _shard_name(t)
        side_names = self.manifest["side_features"]
        users, items, labels, stamps = [], [], [], []
        side_cols: dict[str, list[int]] = {name: [] for name in side_names}
        seq_rows: list[list[int]] = []
        with path.open("r", encoding="utf-8") as fh:
            fh.readline()  # header
            for line in fh:
                cells = line.rstrip("\n").split("\t")
                users.append(self.user_vocab.index(cells[0]))
                items.append(self.item_vocab.index(cells[1]))
                labels.append(int(cells[2]))
                stamps.append(int(cells[3]))
                seq = cells[4]
                # sequence indices are offset by one; PAD_INDEX fills the tail
                row = [self.item_vocab.index(i) + 1 for i in seq.split(",")] if seq else []
                seq_rows.append(row)
                for name, cell in zip(side_names, cells[5:]):
                    side_cols[name].append(self.side_vocabs[name].index(cell))
        n = len(users)
        seq_idx = np.full((n, MAX_SEQUENCE), PAD_INDEX, dtype=np.int64)
        for i, row in enumerate(seq_rows):
            if row:
                seq_idx[i, : len(row)] = row
        return PeriodDataset(
            index=t,
            user_idx=np.asarray(users, dtype=np.int64),
            item_idx=np.asarray(items, dtype=np.int64),
            seq_idx=seq_idx,
            side_idx={k: np.asarray(v, dtype=np.int64) for k, v in side_cols.items()},
            labels=np.asarray(labels, dtype=np.int64),
            timestamps=np.asarray(stamps, dtype=np.int64),
            provenance=self.manifest["scheme"],
        )

    def vocab_sizes_at(self, t: int) -> dict[str, int]:
        sizes = {
            "user": self.user_vocab.size_at(t),
            "item": self.item_vocab.size_at(t),
        }
        for name, vocab in self.side_vocabs.items():
            sizes[f"side_{name}"] = vocab.size_at(t)
        return sizes


def manifest_digest(out_dir) -> str:
    """SHA-256 of the manifest file; used by idempotence checks."""
    data = (Path(out_dir) / "manifest.json").read_bytes()
    return hashlib.sha256(data).hexdigest()
