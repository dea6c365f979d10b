"""Shared fixtures: small deterministic datasets reused across test modules."""

import numpy as np
import pytest

from fdrec import dataio, features

DAY = dataio.SECONDS_PER_DAY


def make_log(records, catalog=None, tz_offset_minutes=0):
    """Build a log from (user, store, time, location) tuples; optional catalog."""
    if catalog is None:
        stores = sorted({r[1] for r in records})
        catalog = {
            s: dataio.StoreMeta(s, f"b{i % 3}", f"c{i % 2}", f"sl{i % 4}")
            for i, s in enumerate(stores)
        }
    return dataio.InteractionLog.from_records(
        records, tz_offset_minutes=tz_offset_minutes, catalog=catalog
    )


@pytest.fixture(scope="session")
def small_split():
    """~1k-interaction synthetic split with planted couplings."""
    cfg = dataio.SynthConfig(
        n_users=90,
        n_stores=30,
        n_orders_per_user=12,
        situation_coupling=0.6,
        collab_coupling=0.6,
        n_locations=6,
        n_brands=10,
        n_cuisines=5,
    )
    log, _ = dataio.generate_synthetic(cfg, seed=11)
    return dataio.split_global_timeline(
        log, test_window_s=4 * DAY, valid_window_s=4 * DAY
    )


@pytest.fixture(scope="session")
def small_seqs(small_split):
    vocabs = features.build_vocabs(small_split)
    return features.build_sequences(small_split, vocabs), vocabs


@pytest.fixture(scope="session")
def tiny_split():
    """Hand-sized split for brute-force oracle comparisons."""
    cfg = dataio.SynthConfig(
        n_users=12,
        n_stores=10,
        n_orders_per_user=8,
        situation_coupling=0.5,
        collab_coupling=0.5,
        n_locations=4,
        n_brands=5,
        n_cuisines=3,
        span_days=21,
    )
    log, _ = dataio.generate_synthetic(cfg, seed=5)
    return dataio.split_global_timeline(
        log, test_window_s=4 * DAY, valid_window_s=4 * DAY
    )


def rng(seed=0):
    return np.random.Generator(np.random.PCG64(seed))
