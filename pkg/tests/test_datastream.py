import numpy as np
import pytest

from asmg.datastream import (
    Interaction,
    ShardStore,
    build_user_sequences,
    manifest_digest,
    prepare_shards,
    read_interactions,
    sample_negatives,
    split_periods,
)
from asmg.errors import DataError


def make(user, item, ts, label=1, idx=0, side=None):
    return Interaction(user, item, label, ts, side or {}, idx)


def day(d, offset=0):
    return d * 86400 + offset


# ----------------------------------------------------------------------
# splitting


def test_calendar_day_split_makes_one_period_per_day():
    rows = [make("u", f"i{d}", day(d, 100), idx=d) for d in range(31)]
    periods = split_periods(rows, "calendar_day")
    assert len(periods) == 31
    assert all(len(p) == 1 for p in periods)


def test_equal_count_exact_division():
    rows = [make("u", f"i{k}", ts=k, idx=k) for k in range(310)]
    periods = split_periods(rows, "equal_count", n_periods=31)
    assert len(periods) == 31
    assert all(len(p) == 10 for p in periods)


def test_equal_count_remainder_goes_to_earliest():
    rows = [make("u", f"i{k}", ts=k, idx=k) for k in range(100)]
    periods = split_periods(rows, "equal_count", n_periods=3)
    assert [len(p) for p in periods] == [34, 33, 33]


def test_split_rejects_empty_and_bad_counts():
    with pytest.raises(DataError):
        split_periods([], "calendar_day")
    rows = [make("u", "i", 0)]
    with pytest.raises(DataError):
        split_periods(rows, "equal_count", n_periods=0)
    with pytest.raises(DataError):
        split_periods(rows, "equal_count", n_periods=2)
    with pytest.raises(DataError):
        split_periods(rows, "nope")


def test_split_partition_property():
    rng = np.random.default_rng(3)
    rows = [
        make(f"u{rng.integers(5)}", f"i{rng.integers(9)}", int(rng.integers(0, 10**6)), idx=k)
        for k in range(97)
    ]
    periods = split_periods(rows, "equal_count", n_periods=7)
    flat = [r for p in periods for r in p]
    assert sorted(r.input_index for r in flat) == list(range(97))
    # time ordered across period boundaries
    for earlier, later in zip(periods, periods[1:]):
        assert earlier[-1].timestamp <= later[0].timestamp


def test_equal_count_ties_stay_in_input_order():
    rows = [make("u", f"i{k}", ts=42, idx=k) for k in range(6)]
    periods = split_periods(rows, "equal_count", n_periods=2)
    assert [r.item_id for r in periods[0]] == ["i0", "i1", "i2"]
    assert [r.item_id for r in periods[1]] == ["i3", "i4", "i5"]


# ----------------------------------------------------------------------
# user sequences


def test_sequence_empty_without_prior_positives():
    hist = build_user_sequences([make("u", "a", 50)])
    assert hist["u"].before(50) == []
    assert hist["u"].before(10) == []


def test_sequence_caps_at_thirty_latest():
    rows = [make("u", f"i{k}", ts=k, idx=k) for k in range(45)]
    hist = build_user_sequences(rows)
    seq = hist["u"].before(1000)
    assert len(seq) == 30
    assert seq == [f"i{k}" for k in range(15, 45)]


def test_sequence_partial_history():
    rows = [make("u", f"i{k}", ts=k, idx=k) for k in range(5)]
    hist = build_user_sequences(rows)
    assert hist["u"].before(3) == ["i0", "i1", "i2"]


def test_sequence_tied_timestamps_keep_file_order():
    rows = [
        make("u", "first", ts=100, idx=0),
        make("u", "second", ts=100, idx=1),
        make("u", "later", ts=200, idx=2),
    ]
    hist = build_user_sequences(rows)
    assert hist["u"].before(200) == ["first", "second"]
    # an event is not part of sequences queried at its own timestamp
    assert hist["u"].before(100) == []


def test_sequence_ignores_negatives():
    rows = [make("u", "bad", 10, label=0, idx=0), make("u", "good", 20, idx=1)]
    hist = build_user_sequences(rows)
    assert hist["u"].before(100) == ["good"]


# ----------------------------------------------------------------------
# negative sampling


def test_negatives_double_the_samples():
    positives = [make(f"u{k % 7}", f"i{k}", ts=k, idx=k) for k in range(100)]
    catalog = [f"i{k}" for k in range(300)]
    labeled = sample_negatives(positives, catalog, seed=1)
    assert len(labeled) == 200
    assert sum(1 for r in labeled if r.label == 1) == 100
    # pairwise layout: positive then its negative
    for pos, neg in zip(labeled[::2], labeled[1::2]):
        assert pos.label == 1 and neg.label == 0
        assert pos.user_id == neg.user_id
        assert pos.timestamp == neg.timestamp


def test_negative_avoids_observed_items():
    pos = make("u", "a", 5)
    labeled = sample_negatives([pos], ["a", "b"], seed=9, observed_by_user={"u": {"a"}})
    assert labeled[1].item_id == "b"


def test_negative_sampling_deterministic():
    positives = [make(f"u{k % 3}", f"i{k}", ts=k, idx=k) for k in range(50)]
    catalog = [f"i{k}" for k in range(80)]
    a = [r.item_id for r in sample_negatives(positives, catalog, seed=7)]
    b = [r.item_id for r in sample_negatives(positives, catalog, seed=7)]
    assert a == b
    c = [r.item_id for r in sample_negatives(positives, catalog, seed=8)]
    assert a != c


def test_negative_sampling_exhausted_catalog_names_user():
    pos = make("greedy", "a", 5)
    with pytest.raises(DataError, match="greedy"):
        sample_negatives([pos], ["a", "b"], seed=1, observed_by_user={"greedy": {"a", "b"}})


# ----------------------------------------------------------------------
# reading


def write_log(path, lines, header="user_id\titem_id\tlabel\ttimestamp"):
    path.write_text("\n".join([header, *lines]) + "\n", encoding="utf-8")


def test_read_roundtrip_with_side_features(tmp_path):
    log = tmp_path / "log.tsv"
    write_log(
        log,
        ["u1\ti1\t1\t100\tcat=a", "u2\ti2\t1\t200\tcat=b"],
        header="user_id\titem_id\tlabel\ttimestamp\tside",
    )
    rows, side_names = read_interactions(log)
    assert side_names == ["cat"]
    assert rows[0].side_features == {"cat": "a"}
    assert rows[1].timestamp == 200


def test_read_rejects_missing_header(tmp_path):
    log = tmp_path / "log.tsv"
    log.write_text("u1\ti1\t1\t100\n", encoding="utf-8")
    with pytest.raises(DataError, match="header"):
        read_interactions(log)


def test_read_reports_line_numbers(tmp_path):
    log = tmp_path / "log.tsv"
    write_log(log, ["u1\ti1\t1\t100", "u2\ti2\ttwo\t200"])
    with pytest.raises(DataError, match=":3:"):
        read_interactions(log)


def test_read_rejects_bad_label(tmp_path):
    log = tmp_path / "log.tsv"
    write_log(log, ["u1\ti1\t5\t100"])
    with pytest.raises(DataError, match="label"):
        read_interactions(log)


def test_read_comma_delimited(tmp_path):
    log = tmp_path / "log.csv"
    log.write_text("user_id,item_id,label,timestamp\nu1,i1,1,100\n", encoding="utf-8")
    rows, _ = read_interactions(log)
    assert rows[0].user_id == "u1"


# ----------------------------------------------------------------------
# shards


def synthetic_rows(n_users=6, n_items=12, n_periods=5, per_period=20, seed=0):
    rng = np.random.default_rng(seed)
    rows = []
    idx = 0
    for p in range(n_periods):
        for k in range(per_period):
            rows.append(
                make(
                    f"u{rng.integers(n_users)}",
                    f"i{rng.integers(n_items)}",
                    ts=day(p, k + 1),
                    idx=idx,
                )
            )
            idx += 1
    return rows


def test_prepare_and_reload_shards(tmp_path):
    rows = synthetic_rows()
    manifest = prepare_shards(rows, [], tmp_path, "calendar_day", None, "sample", seed=3)
    assert manifest["n_periods"] == 5
    store = ShardStore.open(tmp_path)
    total = 0
    for t in range(1, 6):
        period = store.load_period(t)
        total += period.n_positives
        # 1:1 negatives per period
        assert len(period) == 2 * period.n_positives
        # all period timestamps within the manifest boundary
        meta = manifest["periods"][t - 1]
        assert period.timestamps.min() >= meta["start_ts"]
        assert period.timestamps.max() <= meta["end_ts"]
    assert total == len(rows)


def test_prepare_idempotent(tmp_path):
    rows = synthetic_rows(seed=5)
    a_dir, b_dir = tmp_path / "a", tmp_path / "b"
    prepare_shards(rows, [], a_dir, "calendar_day", None, "sample", seed=11)
    prepare_shards(rows, [], b_dir, "calendar_day", None, "sample", seed=11)
    assert manifest_digest(a_dir) == manifest_digest(b_dir)
    for t in range(1, 6):
        name = f"period_{t:04d}.tsv"
        assert (a_dir / name).read_bytes() == (b_dir / name).read_bytes()


def test_shards_have_no_temporal_leakage(tmp_path):
    rows = synthetic_rows(n_users=4, n_items=40, n_periods=4, per_period=30, seed=9)
    prepare_shards(rows, [], tmp_path, "calendar_day", None, "sample", seed=2)
    store = ShardStore.open(tmp_path)
    # reconstruct per-user positive event times from the raw rows
    events: dict[str, list[tuple[int, str]]] = {}
    for r in rows:
        events.setdefault(r.user_id, []).append((r.timestamp, r.item_id))
    for t in range(1, 5):
        path = tmp_path / f"period_{t:04d}.tsv"
        with path.open() as fh:
            fh.readline()
            for line in fh:
                user, _item, _label, ts, seq = line.rstrip("\n").split("\t")[:5]
                if not seq:
                    continue
                ts = int(ts)
                for item in seq.split(","):
                    assert any(ets < ts and eitem == item for ets, eitem in events[user])


def test_prepare_rejects_labeled_input_in_sample_mode(tmp_path):
    rows = [make("u", "a", 5), make("u", "b", 6, label=0, idx=1)]
    with pytest.raises(DataError, match="all-positive"):
        prepare_shards(rows, [], tmp_path, "equal_count", 1, "sample", seed=0)


def test_explicit_mode_keeps_labels(tmp_path):
    rows = [make("u", "a", 5), make("u", "b", 6, label=0, idx=1), make("v", "a", 7, idx=2)]
    prepare_shards(rows, [], tmp_path, "equal_count", 1, "explicit", seed=0)
    period = ShardStore.open(tmp_path).load_period(1)
    assert len(period) == 3
    assert period.n_positives == 2


def test_vocab_growth_is_append_only(tmp_path):
    rows = synthetic_rows(n_users=8, n_items=20, n_periods=6, per_period=15, seed=13)
    prepare_shards(rows, [], tmp_path, "calendar_day", None, "sample", seed=1)
    store = ShardStore.open(tmp_path)
    sizes = [store.vocab_sizes_at(t)["item"] for t in range(1, 7)]
    assert sizes == sorted(sizes)
    assert sizes[-1] == len(store.item_vocab)
    # shard indices never exceed the vocab size of their own period
    for t in range(1, 7):
        period = store.load_period(t)
        assert period.item_idx.max() < store.vocab_sizes_at(t)["item"]
        assert period.user_idx.max() < store.vocab_sizes_at(t)["user"]
