"""Intent-aware combination of the repeat and exploration recommenders.

A small intent network (GRU over the user's past repeat/explore flags,
concatenated with situation and user embeddings) predicts how likely the next
order is a repeat.  Both base models' slates are min-max normalized, lifted to
(score, origin) features, passed through one residual self-attention block and
one intent-queried cross-attention, and projected to a per-item weight in
(0,1).  The final score of every item is exactly ``weight * normalized score``.

Training is two-stage on frozen base models: the intent head first (binary
cross-entropy on repeat flags), then the whole network with a pairwise
ranking loss over fixed-size training slates plus the intent loss as an
auxiliary term.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import diffcore as dc
from . import evalharness, exprec, features, reprec
from .dataio import DatasetSplit, SituationFeatures
from .evalharness import EvalCase, ScoredSlate
from .training import TrainResult, TrainSettings, run_training

__all__ = [
    "IntentEstimate",
    "CombinedSlate",
    "ensemble_build",
    "predict_intent",
    "normalize_slate",
    "combine",
    "ensemble_train",
    "ensemble_scorer",
    "concat_scorer",
]

DEFAULT_ATTN_DIM = 32
DEFAULT_WINDOW = 20
DEFAULT_BUDGET = 30
DEFAULT_LAMBDA = 1.0


@dataclass(frozen=True)
class IntentEstimate:
    repeat_prob: float
    explore_prob: float

    def __post_init__(self):
        for p in (self.repeat_prob, self.explore_prob):
            if not 0.0 <= p <= 1.0:
                raise ValueError("intent probabilities must lie in [0, 1]")
        if abs(self.repeat_prob + self.explore_prob - 1.0) > 1e-9:
            raise ValueError("intent probabilities must sum to 1")


@dataclass(frozen=True)
class CombinedSlate:
    """Final slate: ``a`` repeat items followed by ``b`` exploration items.

    ``scores == weights * base`` holds exactly, element by element.
    """

    candidates: tuple[str, ...]
    a: int
    b: int
    base: np.ndarray     # normalized input scores, repeat part first
    weights: np.ndarray  # per-item sigmoid weights in (0, 1)
    scores: np.ndarray

    def __post_init__(self):
        n = self.a + self.b
        if not (len(self.candidates) == len(self.base) == len(self.weights)
                == len(self.scores) == n):
            raise ValueError("slate arrays must all have length a + b")


def ensemble_build(
    split: DatasetSplit,
    dim: int = 64,
    attn_dim: int = DEFAULT_ATTN_DIM,
    seed: int = 0,
    window: int = DEFAULT_WINDOW,
    budget: int = DEFAULT_BUDGET,
) -> dc.ModelState:
    vocabs = features.build_vocabs(split)
    state = dc.ModelState(seed=seed)
    state.add_embedding("emb.hour", 24, dim)
    state.add_embedding("emb.dow", 7, dim)
    state.add_embedding("emb.loc", len(vocabs.location_ids), dim)
    state.add_embedding("emb.user", len(vocabs.user_ids), dim)
    state.add_embedding("emb.flag", 2, dim)
    state.add_gru("gru.intent", dim, dim)
    state.add_dense("intent", 2, 3 * dim)
    state.add_dense("lift", attn_dim, 2)
    scale = 1.0 / np.sqrt(attn_dim)
    for name in ("attn.wq", "attn.wk", "attn.wv", "cross.wk", "cross.wv"):
        state.add_param(name, (attn_dim, attn_dim), scale)
    state.add_dense("cq", attn_dim, 2)
    state.add_dense("proj", 1, 2 * attn_dim)
    state.meta = {
        "model": "ensemble",
        "dim": dim,
        "attn_dim": attn_dim,
        "window": window,
        "budget": budget,
        "store_ids": vocabs.store_ids,
        "location_ids": vocabs.location_ids,
        "user_ids": vocabs.user_ids,
        "tz_offset_minutes": split.log.tz_offset_minutes,
        "epoch": split.log.epoch,
    }
    return state


def _values(state: dc.ModelState) -> dict[str, np.ndarray]:
    return {name: state.value(name) for name in state.params}


def _situation_np(values, hours, dows, locs) -> np.ndarray:
    return values["emb.hour"][hours] + values["emb.dow"][dows] + values["emb.loc"][locs]


# ---------------------------------------------------------------- intent

def _intent_probs_np(
    values: dict, dim: int, window: int, seqs: features.UserSequences,
    rows: np.ndarray,
) -> np.ndarray:
    """Batched (repeat_prob, explore_prob) for the interactions at ``rows``."""
    user_codes = np.searchsorted(seqs.offsets, rows, side="right") - 1
    local = rows - seqs.offsets[user_codes]
    wrows, mask = features.window_rows(seqs, user_codes, local, window)
    flags = seqs.repeat[wrows].astype(np.int64)
    h = np.zeros((len(rows), dim))
    for t in range(flags.shape[1]):
        x = values["emb.flag"][flags[:, t]]
        h_new = dc.gru_cell_np(values, "gru.intent", x, h)
        m = mask[:, t : t + 1]
        h = np.where(m, h_new, h)
    e_mu = _situation_np(values, seqs.hour[rows], seqs.dow[rows], seqs.loc[rows])
    u = values["emb.user"][user_codes]
    logits = (
        np.concatenate([h, e_mu, u], axis=-1) @ values["intent.w"].T
        + values["intent.b"]
    )
    return dc._softmax(logits, axis=-1)


def predict_intent(
    state: dc.ModelState,
    user: str,
    intent_history,
    now: SituationFeatures,
) -> IntentEstimate:
    """Repeat/explore probabilities from past flags, situation, and user."""
    values = _values(state)
    meta = state.meta
    dim = int(meta["dim"])
    window = int(meta["window"])
    user_index = {u: i for i, u in enumerate(meta["user_ids"])}
    loc_index = {l: i for i, l in enumerate(meta["location_ids"])}
    if user not in user_index:
        raise ValueError(f"unknown user {user!r}")

    h = np.zeros(dim)
    for f in list(intent_history)[-window:]:
        x = values["emb.flag"][int(bool(f))]
        h = dc.gru_cell_np(values, "gru.intent", x, h)
    e_mu = (
        values["emb.hour"][now.hour]
        + values["emb.dow"][now.day_of_week]
        + values["emb.loc"][loc_index.get(now.location_id, features.FALLBACK)]
    )
    u = values["emb.user"][user_index[user]]
    logits = np.concatenate([h, e_mu, u]) @ values["intent.w"].T + values["intent.b"]
    probs = dc._softmax(logits, axis=-1)
    return IntentEstimate(float(probs[0]), float(probs[1]))


def _intent_logits_var(
    state: dc.ModelState,
    flags: np.ndarray,
    mask: np.ndarray,
    now_hour: np.ndarray,
    now_dow: np.ndarray,
    now_loc: np.ndarray,
    users: np.ndarray,
) -> dc.Var:
    B, L = flags.shape
    dim = int(state.meta["dim"])
    gru = dc.gru_leaves(state, "gru.intent")
    femb = dc.gather_rows(state.leaf("emb.flag"), flags)
    h = dc.Var(np.zeros((B, dim)))
    for t in range(L):
        x_t = dc.getitem(femb, (slice(None), t))
        h_new = dc.gru_cell(gru, x_t, h)
        m = mask[:, t : t + 1]
        h = dc.add(dc.mul(h_new, m), dc.mul(h, 1.0 - m))
    e_mu = dc.add(
        dc.add(
            dc.gather_rows(state.leaf("emb.hour"), now_hour),
            dc.gather_rows(state.leaf("emb.dow"), now_dow),
        ),
        dc.gather_rows(state.leaf("emb.loc"), now_loc),
    )
    u = dc.gather_rows(state.leaf("emb.user"), users)
    feats = dc.concat([h, e_mu, u], axis=-1)
    return dc.dense(state.leaf("intent.w"), state.leaf("intent.b"), feats)


# ---------------------------------------------------------------- combine

def normalize_slate(scores) -> np.ndarray:
    """Min-max normalization to [0, 1]; a constant slate maps to all 0.5."""
    arr = np.asarray(scores, dtype=np.float64)
    if arr.size == 0:
        raise ValueError("cannot normalize an empty slate")
    lo, hi = float(arr.min()), float(arr.max())
    if hi == lo:
        return np.full(arr.shape, 0.5)
    return (arr - lo) / (hi - lo)


def _item_weights_np(values: dict, base: np.ndarray, origin: np.ndarray,
                     probs: np.ndarray) -> np.ndarray:
    """Per-item weights in (0,1) from one attention pass (single slate)."""
    A = values["attn.wq"].shape[0]
    x = np.stack([base, origin], axis=-1)
    X = x @ values["lift.w"].T + values["lift.b"]
    att = dc._softmax((X @ values["attn.wq"]) @ (X @ values["attn.wk"]).T
                      / np.sqrt(A), axis=-1)
    H = X + att @ (X @ values["attn.wv"])
    q = probs @ values["cq.w"].T + values["cq.b"]
    att2 = dc._softmax(q @ (H @ values["cross.wk"]).T / np.sqrt(A), axis=-1)
    c = att2 @ (H @ values["cross.wv"])
    feats = np.concatenate([H, np.broadcast_to(c, H.shape)], axis=-1)
    logits = (feats @ values["proj.w"].T + values["proj.b"])[:, 0]
    return dc._sigmoid(logits)


def _item_weights_var(state: dc.ModelState, x_feats: np.ndarray,
                      probs: dc.Var) -> dc.Var:
    """Differentiable twin of :func:`_item_weights_np` over [G, n, 2] slates."""
    G, n, _ = x_feats.shape
    A = int(state.meta["attn_dim"])
    X = dc.dense(state.leaf("lift.w"), state.leaf("lift.b"), dc.Var(x_feats))
    Q = dc.matmul(X, state.leaf("attn.wq"))
    K = dc.matmul(X, state.leaf("attn.wk"))
    V = dc.matmul(X, state.leaf("attn.wv"))
    att = dc.softmax(dc.mul(dc.matmul(Q, dc.transpose_last2(K)), 1.0 / np.sqrt(A)))
    H = dc.add(X, dc.matmul(att, V))
    q = dc.reshape(dc.dense(state.leaf("cq.w"), state.leaf("cq.b"), probs), (G, 1, A))
    K2 = dc.matmul(H, state.leaf("cross.wk"))
    att2 = dc.softmax(dc.mul(dc.matmul(q, dc.transpose_last2(K2)), 1.0 / np.sqrt(A)))
    c = dc.matmul(att2, dc.matmul(H, state.leaf("cross.wv")))       # [G,1,A]
    c_n = dc.mul(c, np.ones((1, n, 1)))
    feats = dc.concat([H, c_n], axis=-1)
    logits = dc.dense(state.leaf("proj.w"), state.leaf("proj.b"), feats)
    return dc.sigmoid(dc.reshape(logits, (G, n)))


def combine(
    state: dc.ModelState,
    repeat_slate: ScoredSlate | None,
    exploration_slate: ScoredSlate | None,
    intent: IntentEstimate,
) -> CombinedSlate:
    """Weight two normalized, disjoint slates into one final ranking."""
    parts = [s for s in (repeat_slate, exploration_slate) if s is not None
             and len(s.candidates)]
    if not parts:
        raise ValueError("both slates are empty")
    for s in parts:
        if s.scores.min() < -1e-12 or s.scores.max() > 1.0 + 1e-12:
            raise ValueError("slates must be min-max normalized before combining")
    rep = repeat_slate.candidates if repeat_slate else ()
    exp = exploration_slate.candidates if exploration_slate else ()
    if set(rep) & set(exp):
        raise ValueError("repeat and exploration slates overlap")
    a, b = len(rep), len(exp)
    base = np.concatenate([
        repeat_slate.scores if a else np.empty(0),
        exploration_slate.scores if b else np.empty(0),
    ])
    origin = np.concatenate([np.ones(a), np.zeros(b)])
    probs = np.array([intent.repeat_prob, intent.explore_prob])
    weights = _item_weights_np(_values(state), base, origin, probs)
    return CombinedSlate(
        candidates=tuple(rep) + tuple(exp),
        a=a, b=b, base=base, weights=weights, scores=weights * base,
    )


# ---------------------------------------------------------------- training

@dataclass(frozen=True)
class _Slate:
    row: int          # flat sequence row of the target interaction
    a: int
    x_feats: np.ndarray   # [n, 2] (normalized base score, origin flag)
    tgt: int              # target index within the slate


def _frozen_base_scores(rep_state, exp_state, seqs, neighbors):
    """Closures scoring arbitrary candidate code arrays with the frozen bases."""
    rep_values = {n: rep_state.value(n) for n in rep_state.params}
    exp_values = {n: exp_state.value(n) for n in exp_state.params}
    rep_window = int(rep_state.meta["window"])
    exp_window = int(exp_state.meta["window"])
    exp_dim = int(exp_state.meta["dim"])
    nb_ids, nb_w = neighbors
    no_mask = np.zeros(len(exprec.TRIGGERS), dtype=bool)

    def repeat_scores(row: int, lo: int, codes: np.ndarray) -> np.ndarray:
        profile = reprec.profile_vector(
            rep_values, seqs, row, max(lo, row - rep_window)
        )
        return rep_values["emb.store"][codes] @ profile

    def explore_scores(row: int, user_code: int, lo: int,
                       codes: np.ndarray) -> np.ndarray:
        s_e = exprec.fused_vector(exp_values, exp_dim, exp_window, seqs,
                                  nb_ids, nb_w, row, user_code, lo, no_mask)
        return exp_values["emb.store"][codes] @ s_e

    return repeat_scores, explore_scores


def _build_training_slates(
    split, seqs, vocabs, rows, budget, seed, repeat_scores, explore_scores
) -> list[_Slate]:
    n_stores = len(vocabs.store_ids)
    user_codes = np.searchsorted(seqs.offsets, rows, side="right") - 1
    rep_cap = budget // 2
    slates: list[_Slate] = []
    for row, ucode in zip(rows, user_codes):
        row = int(row)
        lo = int(seqs.offsets[ucode])
        d = int(seqs.distinct_before[row])
        fo = int(seqs.first_offsets[ucode])
        priors = seqs.first_stores[fo : fo + d]
        tc = int(seqs.store[row])
        is_rep = bool(seqs.repeat[row])

        if is_rep:
            others = priors[priors != tc]
            keep = others[-(rep_cap - 1):] if len(others) > rep_cap - 1 else others
            rep_part = np.concatenate([[tc], keep]).astype(np.int64)
        else:
            rep_part = (priors[-rep_cap:] if d > rep_cap else priors).astype(np.int64)

        visited = np.zeros(n_stores, dtype=bool)
        visited[priors] = True
        visited[tc] = True  # target never doubles as a sampled filler
        pool = np.nonzero(~visited)[0]
        want = budget - len(rep_part) - (0 if is_rep else 1)
        rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence([seed, row])))
        take = min(max(want, 0), len(pool))
        picked = pool[rng.permutation(len(pool))[:take]]
        if is_rep:
            exp_part = picked
            tgt = 0
        else:
            exp_part = np.concatenate([[tc], picked]).astype(np.int64)
            tgt = len(rep_part)
        n = len(rep_part) + len(exp_part)
        if n < 2:
            continue  # a ranking pair needs at least two items

        base = np.empty(n)
        if len(rep_part):
            base[: len(rep_part)] = normalize_slate(
                repeat_scores(row, lo, rep_part)
            )
        if len(exp_part):
            base[len(rep_part):] = normalize_slate(
                explore_scores(row, int(ucode), lo, exp_part)
            )
        origin = np.concatenate([np.ones(len(rep_part)), np.zeros(len(exp_part))])
        slates.append(_Slate(
            row=row, a=len(rep_part),
            x_feats=np.stack([base, origin], axis=-1), tgt=tgt,
        ))
    return slates


def _combined_batch_loss(
    state: dc.ModelState,
    slates: list[_Slate],
    seqs: features.UserSequences,
    chunk: np.ndarray,
    rng: np.random.Generator,
    lam: float,
) -> dc.Var:
    window = int(state.meta["window"])
    by_size: dict[int, list[int]] = {}
    for i in chunk:
        sl = slates[int(i)]
        by_size.setdefault(len(sl.x_feats), []).append(int(i))

    total: dc.Var | None = None
    for n, idx in by_size.items():
        group = [slates[i] for i in idx]
        G = len(group)
        rows = np.array([sl.row for sl in group])
        x_feats = np.stack([sl.x_feats for sl in group])
        tgt = np.array([sl.tgt for sl in group])

        user_codes = np.searchsorted(seqs.offsets, rows, side="right") - 1
        local = rows - seqs.offsets[user_codes]
        wrows, mask = features.window_rows(seqs, user_codes, local, window)
        logits = _intent_logits_var(
            state, seqs.repeat[wrows].astype(np.int64), mask.astype(np.float64),
            seqs.hour[rows], seqs.dow[rows], seqs.loc[rows], user_codes,
        )
        probs = dc.softmax(logits)
        weights = _item_weights_var(state, x_feats, probs)
        p = dc.mul(weights, x_feats[:, :, 0])

        ar = np.arange(G)
        j = rng.integers(0, n - 1, size=G)
        j = j + (j >= tgt)
        rank = dc.sum_(dc.bpr_loss(
            dc.getitem(p, (ar, tgt)), dc.getitem(p, (ar, j))
        ))

        # two-class cross-entropy from logits: -log softmax_true
        y = seqs.repeat[rows]
        true_col = np.where(y, 0, 1)
        ce = dc.sum_(dc.bpr_loss(
            dc.getitem(logits, (ar, true_col)),
            dc.getitem(logits, (ar, 1 - true_col)),
        ))
        term = dc.add(rank, dc.mul(ce, lam))
        total = term if total is None else dc.add(total, term)
    return dc.mul(total, 1.0 / len(chunk))


def ensemble_train(
    split: DatasetSplit,
    frozen_reprec: dc.ModelState,
    frozen_exprec: dc.ModelState,
    settings: TrainSettings = TrainSettings(),
    dim: int = 64,
    attn_dim: int = DEFAULT_ATTN_DIM,
    window: int = DEFAULT_WINDOW,
    budget: int = DEFAULT_BUDGET,
    lam: float = DEFAULT_LAMBDA,
    max_instances: int = 20000,
    val_max_cases: int = 2000,
) -> tuple[dc.ModelState, dict[str, TrainResult]]:
    """Two-stage training against frozen base models."""
    if frozen_reprec is None or frozen_exprec is None:
        raise ValueError("ensemble training needs both frozen base models")
    vocabs = features.build_vocabs(split)
    seqs = features.build_sequences(split, vocabs)
    state = ensemble_build(split, dim=dim, attn_dim=attn_dim, seed=settings.seed,
                           window=window, budget=budget)
    values = _values(state)

    train_rows = seqs.flat_of_global[split.train_idx]
    valid_rows = seqs.flat_of_global[split.valid_idx]

    # stage 1: intent head, early-stopped on validation cross-entropy
    def intent_loss(st, chunk, rng):
        rows = train_rows[chunk]
        user_codes = np.searchsorted(seqs.offsets, rows, side="right") - 1
        local = rows - seqs.offsets[user_codes]
        wrows, mask = features.window_rows(seqs, user_codes, local, window)
        logits = _intent_logits_var(
            st, seqs.repeat[wrows].astype(np.int64), mask.astype(np.float64),
            seqs.hour[rows], seqs.dow[rows], seqs.loc[rows], user_codes,
        )
        y = seqs.repeat[rows]
        true_col = np.where(y, 0, 1)
        ar = np.arange(len(rows))
        return dc.mean_(dc.bpr_loss(
            dc.getitem(logits, (ar, true_col)),
            dc.getitem(logits, (ar, 1 - true_col)),
        ))

    val_rows = valid_rows[: min(len(valid_rows), 5000)]

    def intent_val(st) -> float:
        probs = _intent_probs_np(values, dim, window, seqs, val_rows)
        y = seqs.repeat[val_rows]
        p_true = np.where(y, probs[:, 0], probs[:, 1])
        return float(np.log(np.clip(p_true, 1e-12, None)).mean())

    result_intent = run_training(
        state, len(train_rows), intent_loss, intent_val, settings, stream=104
    )

    # stage 2: item weighting over fixed-size slates, frozen base scores
    neighbors = exprec.neighbor_arrays(
        split.log, vocabs.user_ids, int(frozen_exprec.meta["k_neighbors"]),
        int(frozen_exprec.meta["neighbor_as_of"]),
    )
    repeat_scores, explore_scores = _frozen_base_scores(
        frozen_reprec, frozen_exprec, seqs, neighbors
    )
    rows = train_rows
    if max_instances and len(rows) > max_instances:
        keep = np.unique(np.linspace(0, len(rows) - 1, max_instances).astype(np.int64))
        rows = rows[keep]
    slates = _build_training_slates(
        split, seqs, vocabs, rows, budget, settings.seed,
        repeat_scores, explore_scores,
    )
    if not slates:
        raise ValueError("no combined training slates could be built")

    valid_cases = evalharness.validation_cases(
        split, "combined", settings.seed, val_max_cases, seqs, vocabs
    )
    if not valid_cases:
        raise ValueError("validation partition has no combined cases")
    scorer = ensemble_scorer(state, frozen_reprec, frozen_exprec, split,
                             seqs=seqs, vocabs=vocabs, neighbors=neighbors)

    def combined_val(st) -> float:
        report = evalharness.evaluate(
            scorer, valid_cases, k=3, model_id="ensemble", seed=settings.seed
        )
        return report.protocols["combined"]["hr@3"]

    def combined_loss(st, chunk, rng):
        return _combined_batch_loss(st, slates, seqs, chunk, rng, lam)

    result_combine = run_training(
        state, len(slates), combined_loss, combined_val, settings, stream=105
    )
    return state, {"intent": result_intent, "combine": result_combine}


# ---------------------------------------------------------------- scoring

def ensemble_scorer(
    state: dc.ModelState,
    rep_state: dc.ModelState,
    exp_state: dc.ModelState,
    split: DatasetSplit,
    seqs: features.UserSequences | None = None,
    vocabs: features.Vocabs | None = None,
    neighbors: tuple[np.ndarray, np.ndarray] | None = None,
):
    """Combined-protocol adapter running the full weighting pipeline."""
    if vocabs is None:
        vocabs = features.build_vocabs(split)
    if seqs is None:
        seqs = features.build_sequences(split, vocabs)
    if neighbors is None:
        neighbors = exprec.neighbor_arrays(
            split.log, vocabs.user_ids, int(exp_state.meta["k_neighbors"]),
            int(exp_state.meta["neighbor_as_of"]),
        )
    repeat_scores, explore_scores = _frozen_base_scores(
        rep_state, exp_state, seqs, neighbors
    )
    values = _values(state)
    dim = int(state.meta["dim"])
    window = int(state.meta["window"])
    log = split.log

    def score(case: EvalCase) -> ScoredSlate:
        row = int(seqs.flat_of_global[case.position])
        user_code = int(log.users[case.position])
        lo = int(seqs.offsets[user_code])
        codes = np.array([vocabs.store_code(c) for c in case.candidates])
        a = case.n_prior
        base = np.empty(len(codes))
        if a:
            base[:a] = normalize_slate(repeat_scores(row, lo, codes[:a]))
        if len(codes) > a:
            base[a:] = normalize_slate(
                explore_scores(row, user_code, lo, codes[a:])
            )
        origin = np.concatenate([np.ones(a), np.zeros(len(codes) - a)])
        probs = _intent_probs_np(values, dim, window, seqs, np.array([row]))[0]
        weights = _item_weights_np(values, base, origin, probs)
        return ScoredSlate(case.candidates, weights * base, origin="ensemble")

    return score


def concat_scorer(
    rep_state: dc.ModelState,
    exp_state: dc.ModelState,
    split: DatasetSplit,
    seqs: features.UserSequences | None = None,
    vocabs: features.Vocabs | None = None,
    neighbors: tuple[np.ndarray, np.ndarray] | None = None,
):
    """Unit-weight reference: normalized base slates concatenated as-is."""
    if vocabs is None:
        vocabs = features.build_vocabs(split)
    if seqs is None:
        seqs = features.build_sequences(split, vocabs)
    if neighbors is None:
        neighbors = exprec.neighbor_arrays(
            split.log, vocabs.user_ids, int(exp_state.meta["k_neighbors"]),
            int(exp_state.meta["neighbor_as_of"]),
        )
    repeat_scores, explore_scores = _frozen_base_scores(
        rep_state, exp_state, seqs, neighbors
    )
    log = split.log

    def score(case: EvalCase) -> ScoredSlate:
        row = int(seqs.flat_of_global[case.position])
        user_code = int(log.users[case.position])
        lo = int(seqs.offsets[user_code])
        codes = np.array([vocabs.store_code(c) for c in case.candidates])
        a = case.n_prior
        base = np.empty(len(codes))
        if a:
            base[:a] = normalize_slate(repeat_scores(row, lo, codes[:a]))
        if len(codes) > a:
            base[a:] = normalize_slate(
                explore_scores(row, user_code, lo, codes[a:])
            )
        return ScoredSlate(case.candidates, base, origin="concat")

    return score
