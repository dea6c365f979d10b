import numpy as np

from fdrec import dataio, features
from conftest import make_log


def split_of(records):
    log = make_log(records)
    span = int(log.times[-1]) - int(log.times[0])
    return dataio.split_global_timeline(
        log, test_window_s=span // 4, valid_window_s=span // 4
    )


def test_sequences_mirror_log_rows():
    records = [
        ("u1", "a", 100, "l1"), ("u2", "x", 200, "l2"), ("u1", "b", 300, "l1"),
        ("u1", "a", 400, "l3"), ("u2", "x", 500, "l2"), ("u1", "b", 600, "l1"),
        ("u1", "a", 700, "l1"), ("u2", "y", 800, "l2"),
    ]
    split = split_of(records)
    vocabs = features.build_vocabs(split)
    seqs = features.build_sequences(split, vocabs)
    log = split.log
    for pos in range(len(log)):
        row = int(seqs.flat_of_global[pos])
        assert vocabs.store_ids[seqs.store[row]] == log.store_ids[log.stores[pos]]
        assert int(seqs.time[row]) == int(log.times[pos])
    # per-user rows are time-ordered and contiguous
    for code in range(len(log.user_ids)):
        lo, hi = int(seqs.offsets[code]), int(seqs.offsets[code + 1])
        assert (np.diff(seqs.time[lo:hi]) >= 0).all()


def test_distinct_before_and_repeat_flags():
    records = [
        ("u1", "a", 1, "l"), ("u1", "b", 2, "l"), ("u1", "a", 3, "l"),
        ("u1", "c", 4, "l"), ("u1", "c", 5, "l"),
    ]
    split = split_of(records)
    vocabs = features.build_vocabs(split)
    seqs = features.build_sequences(split, vocabs)
    lo = int(seqs.offsets[0])
    assert seqs.repeat[lo:lo + 5].tolist() == [False, False, True, False, True]
    assert seqs.distinct_before[lo:lo + 5].tolist() == [0, 1, 2, 2, 3]


def test_first_stores_pool_in_first_visit_order():
    records = [
        ("u1", "b", 1, "l"), ("u1", "a", 2, "l"), ("u1", "b", 3, "l"),
        ("u1", "c", 4, "l"), ("u1", "a", 5, "l"),
    ]
    split = split_of(records)
    vocabs = features.build_vocabs(split)
    seqs = features.build_sequences(split, vocabs)
    lo, hi = int(seqs.first_offsets[0]), int(seqs.first_offsets[1])
    pool = [vocabs.store_ids[s] for s in seqs.first_stores[lo:hi]]
    assert pool == ["b", "a", "c"]


def test_unseen_location_maps_to_fallback():
    # l9 appears only in the test window, so the train vocab can't contain it
    records = [("u1", "a", t, "l1") for t in range(0, 800, 100)]
    records.append(("u1", "a", 900, "l9"))
    split = split_of(records)
    vocabs = features.build_vocabs(split)
    seqs = features.build_sequences(split, vocabs)
    assert "l9" not in vocabs.location_ids
    row = int(seqs.flat_of_global[int(np.argmax(split.log.times))])
    assert int(seqs.loc[row]) == features.FALLBACK
    assert vocabs.location_ids[features.FALLBACK] == "<other>"


def test_window_rows_right_aligned_with_mask():
    records = [("u1", "a", t, "l") for t in (1, 2, 3)] + [
        ("u2", "b", t, "l") for t in range(4, 12)
    ]
    split = split_of(records)
    vocabs = features.build_vocabs(split)
    seqs = features.build_sequences(split, vocabs)
    lo1, lo2 = int(seqs.offsets[0]), int(seqs.offsets[1])

    # batch mixing a short (2 priors) and a long (7 priors) history; the
    # window width is min(limit, longest history in the batch)
    rows, mask = features.window_rows(
        seqs, np.array([0, 1]), np.array([2, 7]), limit=5
    )
    assert rows.shape == (2, 5)
    # u1: left-padded, the two real rows sit at the right edge
    assert mask[0].tolist() == [False, False, False, True, True]
    assert rows[0, 3:].tolist() == [lo1, lo1 + 1]
    # masked slots still index rows of the same user (neutralized by mask)
    assert (rows[0, :3] == lo1).all()
    # u2: 7 priors truncated to the 5 most recent, oldest to newest
    assert mask[1].all()
    assert rows[1].tolist() == [lo2 + 2, lo2 + 3, lo2 + 4, lo2 + 5, lo2 + 6]

    # width clips to the longest history present, not the limit
    rows2, mask2 = features.window_rows(seqs, np.array([0]), np.array([2]), limit=5)
    assert rows2.shape == (1, 2)
    assert mask2.all()
