"""Situation and store similarity kernels plus preference-based user neighbors.

Situation similarity compares two consumption situations on four facets
(date distance capped at 30 days, circular hour-of-day, circular day-of-week,
delivery-location mismatch), each normalized to [0, 1] and averaged.  Store
similarity is the fraction of matching attributes among brand, cuisine, and
store location.  User neighbors are ranked by the Pearson correlation of
relative store-frequency vectors aligned on the union of both users' stores.
"""

from __future__ import annotations

import math
from typing import Sequence

import numpy as np

from .dataio import Interaction, InteractionLog, SituationFeatures, StoreMeta

DATE_CAP_DAYS = 30


def situation_similarity(a: SituationFeatures, b: SituationFeatures) -> float:
    """Similarity in [0, 1]; 1 iff all four facets coincide."""
    d_date = min(abs(a.day_index - b.day_index), DATE_CAP_DAYS) / DATE_CAP_DAYS
    dh = abs(a.hour - b.hour)
    d_hour = min(dh, 24 - dh) / 12.0
    dw = abs(a.day_of_week - b.day_of_week)
    d_dow = min(dw, 7 - dw) / 3.0
    mismatch = 0.0 if a.location_id == b.location_id else 1.0
    return 1.0 - (d_date + d_hour + d_dow + mismatch) / 4.0


def situation_similarity_arrays(
    day_index: np.ndarray,
    hour: np.ndarray,
    dow: np.ndarray,
    loc_match: np.ndarray,
    now_day: int,
    now_hour: int,
    now_dow: int,
) -> np.ndarray:
    """Vectorized twin of :func:`situation_similarity`.

    ``loc_match`` is a boolean array (same delivery location as "now").
    """
    d_date = np.minimum(np.abs(day_index - now_day), DATE_CAP_DAYS) / DATE_CAP_DAYS
    dh = np.abs(hour - now_hour)
    d_hour = np.minimum(dh, 24 - dh) / 12.0
    dw = np.abs(dow - now_dow)
    d_dow = np.minimum(dw, 7 - dw) / 3.0
    mismatch = 1.0 - loc_match.astype(np.float64)
    return 1.0 - (d_date + d_hour + d_dow + mismatch) / 4.0


def store_similarity(a: StoreMeta, b: StoreMeta) -> float:
    """Fraction of matching attributes among brand, cuisine, store location."""
    matches = (
        (a.brand_id == b.brand_id)
        + (a.cuisine_id == b.cuisine_id)
        + (a.store_location_id == b.store_location_id)
    )
    return matches / 3.0


def pearson(x: Sequence[float], y: Sequence[float]) -> float | None:
    """Sample Pearson correlation; ``None`` when either sequence is constant.

    Raises ``ValueError`` on length mismatch or fewer than two points.
    """
    xa = np.asarray(x, dtype=np.float64)
    ya = np.asarray(y, dtype=np.float64)
    if xa.shape != ya.shape or xa.ndim != 1:
        raise ValueError("pearson needs two equal-length 1-d sequences")
    if len(xa) < 2:
        raise ValueError("pearson needs at least two points")
    # exact constant check: rounding in the mean must not turn an undefined
    # correlation into a spurious finite one
    if bool((xa == xa[0]).all()) or bool((ya == ya[0]).all()):
        return None
    xc = xa - xa.mean()
    yc = ya - ya.mean()
    vx = float(xc @ xc)
    vy = float(yc @ yc)
    if vx <= 0.0 or vy <= 0.0:
        return None
    r = float(xc @ yc) / math.sqrt(vx * vy)
    return min(1.0, max(-1.0, r))


def preference_vector(history: Sequence[Interaction]) -> dict[str, float]:
    """Relative frequency of each store in the history."""
    if not history:
        raise ValueError("history must be non-empty")
    counts: dict[str, int] = {}
    for it in history:
        counts[it.store_id] = counts.get(it.store_id, 0) + 1
    n = len(history)
    return {s: c / n for s, c in counts.items()}


def _union_pearson(
    pu: dict[str, float], pv: dict[str, float]
) -> float:
    """Pearson of two preference vectors over the union of their supports.

    Missing stores count as 0.  Undefined correlations and disjoint supports
    map to similarity 0.
    """
    if not pu or not pv:
        return 0.0
    union = set(pu) | set(pv)
    m = len(union)
    if m < 2:
        return 0.0
    dot = sum(pu[s] * pv.get(s, 0.0) for s in pu)
    overlap = sum(1 for s in pu if s in pv)
    if overlap == 0:
        return 0.0
    qu = sum(w * w for w in pu.values())
    qv = sum(w * w for w in pv.values())
    # Component sums over the union are 1 by construction.
    vu = qu - 1.0 / m
    vv = qv - 1.0 / m
    if vu <= 1e-15 or vv <= 1e-15:
        return 0.0
    r = (dot - 1.0 / m) / math.sqrt(vu * vv)
    return min(1.0, max(-1.0, r))


def _histories_before(
    log: InteractionLog, as_of: int
) -> dict[int, np.ndarray]:
    """User code -> positions strictly before ``as_of``."""
    out = {}
    for code, positions in log.per_user.items():
        cut = int(np.searchsorted(log.times[positions], as_of, side="left"))
        out[code] = positions[:cut]
    return out


def collaborative_users(
    target: str, log: InteractionLog, k: int, as_of: int
) -> list[tuple[str, float]]:
    """Top-``k`` users by preference-vector correlation with ``target``.

    Only interactions strictly before ``as_of`` count.  Every other user is a
    candidate; undefined or non-overlapping correlations score 0.  Sorting is
    by descending similarity, ties by ascending user id.  A target with no
    history before ``as_of`` has no neighbors.
    """
    if k <= 0:
        raise ValueError("k must be positive")
    if target not in log.user_ids:
        raise ValueError(f"unknown user {target!r}")
    before = _histories_before(log, as_of)
    code_of = {u: i for i, u in enumerate(log.user_ids)}
    tcode = code_of[target]
    tpos = before.get(tcode, np.empty(0, dtype=np.int64))
    if not len(tpos):
        return []

    def prefs(positions: np.ndarray) -> dict[str, float]:
        if not len(positions):
            return {}
        stores, counts = np.unique(log.stores[positions], return_counts=True)
        n = len(positions)
        return {log.store_ids[s]: c / n for s, c in zip(stores, counts)}

    pt = prefs(tpos)
    scored = []
    for user in log.user_ids:
        if user == target:
            continue
        sim = _union_pearson(pt, prefs(before.get(code_of[user], np.empty(0, np.int64))))
        scored.append((user, sim))
    scored.sort(key=lambda us: (-us[1], us[0]))
    return scored[:k]


def neighbor_table(
    log: InteractionLog, k: int, as_of: int
) -> dict[str, list[tuple[str, float]]]:
    """All users' neighbor lists at once; agrees with :func:`collaborative_users`.

    Works in user blocks with dense linear algebra so it stays fast on logs
    with tens of thousands of users.
    """
    if k <= 0:
        raise ValueError("k must be positive")
    n_users = len(log.user_ids)
    n_stores = len(log.store_ids)
    counts = np.zeros((n_users, n_stores), dtype=np.float64)
    before = _histories_before(log, as_of)
    for code, positions in before.items():
        if len(positions):
            np.add.at(counts[code], log.stores[positions], 1.0)
    totals = counts.sum(axis=1)
    active = totals > 0
    pref = np.zeros_like(counts)
    pref[active] = counts[active] / totals[active, None]
    support = counts > 0
    n_distinct = support.sum(axis=1).astype(np.float64)

    q = (pref * pref).sum(axis=1)
    uids = np.array(log.user_ids)
    uid_order = np.argsort(uids, kind="stable")  # ascending-id tiebreak helper
    rank_by_id = np.empty(n_users, dtype=np.int64)
    rank_by_id[uid_order] = np.arange(n_users)

    result: dict[str, list[tuple[str, float]]] = {}
    block = max(1, min(512, n_users))
    supportf = support.astype(np.float64)
    for start in range(0, n_users, block):
        stop = min(start + block, n_users)
        dot = pref[start:stop] @ pref.T
        overlap = supportf[start:stop] @ supportf.T
        m = n_distinct[start:stop, None] + n_distinct[None, :] - overlap
        with np.errstate(divide="ignore", invalid="ignore"):
            inv_m = np.where(m > 0, 1.0 / np.maximum(m, 1.0), 0.0)
            vu = q[start:stop, None] - inv_m
            vv = q[None, :] - inv_m
            r = (dot - inv_m) / np.sqrt(np.maximum(vu, 0.0) * np.maximum(vv, 0.0))
        defined = (
            (overlap > 0)
            & (m >= 2)
            & (vu > 1e-15)
            & (vv > 1e-15)
            & active[start:stop, None]
            & active[None, :]
        )
        r = np.where(defined, np.clip(r, -1.0, 1.0), 0.0)
        for row in range(stop - start):
            u = start + row
            if not active[u]:
                result[log.user_ids[u]] = []
                continue
            kk = min(k, n_users - 1)
            if kk <= 0:
                result[log.user_ids[u]] = []
                continue
            sims = r[row].copy()
            sims[u] = -np.inf
            if kk < n_users - 1:
                top = np.argpartition(-sims, kk - 1)[:kk]
                threshold = sims[top].min()
                above = np.nonzero(sims > threshold)[0]
                need = kk - len(above)
                tied = np.nonzero(sims == threshold)[0]
                if need < len(tied):
                    ranks = rank_by_id[tied]
                    pick = np.argpartition(ranks, need - 1)[:need] if need else []
                    tied = tied[pick]
                chosen = np.concatenate([above, tied]).astype(np.int64)
            else:
                chosen = np.nonzero(np.arange(n_users) != u)[0]
            chosen = chosen[np.lexsort((rank_by_id[chosen], -sims[chosen]))]
            result[log.user_ids[u]] = [
                (log.user_ids[int(j)], float(sims[int(j)])) for j in chosen
            ]
    return result
