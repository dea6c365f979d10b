import numpy as np
import pytest

from fdrec import diffcore as dc
from fdrec import evalharness, features, reprec
from fdrec.dataio import Interaction, SituationFeatures, time_facets
from fdrec.training import TrainSettings
from conftest import rng


def situation_vec(state, hour, dow, loc_idx):
    return (
        state.value("emb.hour")[hour]
        + state.value("emb.dow")[dow]
        + state.value("emb.loc")[loc_idx]
    )


def brute_force_scores(state, history, now, candidates):
    """Direct transcription: profile = sum of cosine-weighted store vectors."""
    meta = state.meta
    store_index = {s: i for i, s in enumerate(meta["store_ids"])}
    loc_index = {l: i for i, l in enumerate(meta["location_ids"])}
    times = np.array([it.time for it in history], dtype=np.int64)
    _, hours, dows = time_facets(times, meta["tz_offset_minutes"], meta["epoch"])

    def cos(a, b):
        na, nb = np.linalg.norm(a), np.linalg.norm(b)
        if na == 0.0 or nb == 0.0:
            return 0.0
        return float(a @ b / (na * nb))

    mu_now = situation_vec(
        state, now.hour, now.day_of_week,
        loc_index.get(now.location_id, features.FALLBACK),
    )
    profile = np.zeros(meta["dim"])
    for it, h, d in zip(history, hours, dows):
        mu_i = situation_vec(
            state, int(h), int(d), loc_index.get(it.location_id, features.FALLBACK)
        )
        s_i = state.value("emb.store")[store_index[it.store_id]]
        profile = profile + cos(mu_i, mu_now) * s_i
    return np.array(
        [state.value("emb.store")[store_index[c]] @ profile for c in candidates]
    )


def sample_history(split, n=6, seed=0):
    log = split.log
    user_code = max(log.per_user, key=lambda c: len(log.per_user[c]))
    positions = log.per_user[user_code][: n + 1]
    history = [log.interaction(int(p)) for p in positions[:-1]]
    p = int(positions[-1])
    day, hour, dow = log.facets
    now = SituationFeatures(
        int(day[p]), int(hour[p]), int(dow[p]), log.location_ids[log.locs[p]]
    )
    return history, now


def test_forward_matches_brute_force(tiny_split):
    state = reprec.reprec_build(tiny_split, dim=12, seed=3)
    history, now = sample_history(tiny_split)
    candidates = sorted({it.store_id for it in history})
    slate = reprec.reprec_forward(state, history, now, candidates)
    want = brute_force_scores(state, history, now, candidates)
    np.testing.assert_allclose(slate.scores, want, atol=1e-9)
    assert slate.candidates == tuple(candidates)


def test_forward_identical_situation_scores_self_similarity(tiny_split):
    state = reprec.reprec_build(tiny_split, dim=8, seed=0)
    log = tiny_split.log
    sid = log.store_ids[0]
    meta = state.meta
    # one history entry whose situation equals "now": cosine weight is 1
    day0, hour0, dow0 = time_facets(
        np.array([meta["epoch"]]), meta["tz_offset_minutes"], meta["epoch"]
    )
    entry = Interaction("u", sid, meta["epoch"], log.location_ids[0])
    now = SituationFeatures(int(day0[0]), int(hour0[0]), int(dow0[0]),
                            log.location_ids[0])
    slate = reprec.reprec_forward(state, [entry], now, [sid])
    s = state.value("emb.store")[meta["store_ids"].index(sid)]
    assert slate.scores[0] == pytest.approx(float(s @ s), abs=1e-9)


def test_forward_history_permutation_invariant(tiny_split):
    state = reprec.reprec_build(tiny_split, dim=10, seed=1)
    history, now = sample_history(tiny_split)
    candidates = sorted({it.store_id for it in history})
    base = reprec.reprec_forward(state, history, now, candidates).scores
    perm = [history[i] for i in rng(4).permutation(len(history))]
    out = reprec.reprec_forward(state, perm, now, candidates).scores
    np.testing.assert_allclose(out, base, atol=1e-12)


def test_forward_duplicated_entry_doubles_its_weight(tiny_split):
    state = reprec.reprec_build(tiny_split, dim=10, seed=2)
    history, now = sample_history(tiny_split, n=3)
    sid = history[0].store_id
    single = reprec.reprec_forward(state, history, now, [sid]).scores[0]
    doubled = reprec.reprec_forward(
        state, history + [history[0]], now, [sid]
    ).scores[0]
    lone = reprec.reprec_forward(state, [history[0]], now, [sid]).scores[0]
    assert doubled == pytest.approx(single + lone, abs=1e-9)


def test_forward_situation_scale_invariance(tiny_split):
    """Cosine weights ignore positive rescaling of the situation tables."""
    state = reprec.reprec_build(tiny_split, dim=10, seed=5)
    history, now = sample_history(tiny_split)
    candidates = sorted({it.store_id for it in history})
    base = reprec.reprec_forward(state, history, now, candidates).scores
    for name in ("emb.hour", "emb.dow", "emb.loc"):
        state.value(name)[...] *= 3.7
    scaled = reprec.reprec_forward(state, history, now, candidates).scores
    np.testing.assert_allclose(scaled, base, atol=1e-9)


def test_forward_zero_situation_gets_exactly_zero_weight(tiny_split):
    state = reprec.reprec_build(tiny_split, dim=6, seed=6)
    for name in ("emb.hour", "emb.dow", "emb.loc"):
        state.value(name)[...] = 0.0
    history, now = sample_history(tiny_split, n=4)
    candidates = sorted({it.store_id for it in history})
    slate = reprec.reprec_forward(state, history, now, candidates)
    np.testing.assert_array_equal(slate.scores, np.zeros(len(candidates)))


def test_forward_input_validation(tiny_split):
    state = reprec.reprec_build(tiny_split, dim=6, seed=0)
    history, now = sample_history(tiny_split, n=3)
    with pytest.raises(ValueError, match="non-empty"):
        reprec.reprec_forward(state, [], now, ["s0000"])
    with pytest.raises(ValueError, match="does not appear"):
        absent = next(
            s for s in tiny_split.log.store_ids
            if s not in {it.store_id for it in history}
        )
        reprec.reprec_forward(state, history, now, [absent])


def test_batch_loss_gradients_match_finite_differences(tiny_split):
    state = reprec.reprec_build(tiny_split, dim=6, seed=7)
    vocabs = features.build_vocabs(tiny_split)
    seqs = features.build_sequences(tiny_split, vocabs)
    flags = seqs.repeat & (seqs.distinct_before >= 2)
    rows = np.nonzero(flags)[0][:8]
    assert len(rows) >= 4
    batch = reprec._gather_batch(seqs, rows, window=10)
    gen = rng(1)
    neg = np.zeros(len(rows), dtype=np.int64)
    for i, r in enumerate(rows):
        user = int(np.searchsorted(seqs.offsets, int(r), side="right") - 1)
        lo, hi = int(seqs.first_offsets[user]), int(seqs.first_offsets[user + 1])
        pool = [s for s in seqs.first_stores[lo:hi] if s != seqs.store[r]]
        neg[i] = pool[int(gen.integers(len(pool)))]

    err = dc.finite_difference_check(
        lambda s: reprec.reprec_batch_loss(s, batch, neg),
        state, num_coords=80, rng_seed=0,
    )
    assert err <= 1e-4


def test_training_is_deterministic_and_improves(small_split):
    settings = TrainSettings(lr=0.05, batch_size=128, patience=3, max_epochs=6,
                             seed=1)
    state, result = reprec.reprec_train(small_split, settings, dim=16)
    state2, result2 = reprec.reprec_train(small_split, settings, dim=16)
    assert result.history == result2.history
    assert result.best_metric >= result.history[0] - 1e-12
    assert state.meta["model"] == "reprec"
    for name in state.params:
        np.testing.assert_array_equal(state.value(name), state2.value(name))


def test_checkpoint_roundtrip_preserves_scores(tiny_split, tmp_path):
    state = reprec.reprec_build(tiny_split, dim=8, seed=4)
    history, now = sample_history(tiny_split)
    candidates = sorted({it.store_id for it in history})
    want = reprec.reprec_forward(state, history, now, candidates).scores
    path = tmp_path / "reprec.ckpt"
    state.save(str(path))
    back = dc.ModelState.load(str(path))
    got = reprec.reprec_forward(back, history, now, candidates).scores
    np.testing.assert_array_equal(got, want)


def test_scorer_matches_public_op_with_window(small_split, small_seqs):
    seqs, vocabs = small_seqs
    state = reprec.reprec_build(small_split, dim=8, seed=8)
    window = int(state.meta["window"])
    scorer = reprec.reprec_scorer(state, small_split, seqs, vocabs)
    cases = evalharness.build_cases(small_split, "repeat", seed=0, max_cases=12,
                                    seqs=seqs, vocabs=vocabs)
    log = small_split.log
    day, hour, dow = log.facets
    for case in cases:
        full = [
            log.interaction(p)
            for p in range(case.position)
            if log.users[p] == log.users[case.position]
        ]
        now = SituationFeatures(
            int(day[case.position]), int(hour[case.position]),
            int(dow[case.position]), log.location_ids[log.locs[case.position]],
        )
        want = reprec.reprec_forward(
            state, full[-window:], now, list(case.candidates)
        ).scores
        np.testing.assert_allclose(scorer(case).scores, want, atol=1e-9)
