"""Synthetic marketplace and logging cascade.

The simulator owns the ground truth: every (user, query, item) triple has
a true relevance in (0, 1) derived from latent vectors plus a category
match bonus, and click / purchase probabilities are fixed monotone
transforms of that relevance.  A logged request flows through three
stages (matching pool -> pre-ranking set -> ranked exposures), each of
which sorts by true relevance plus stage-specific gaussian noise.  Stage
noise is drawn from named substreams keyed by (seed, request id, stage),
so the exact scores any stage used can be regenerated after the fact and
the logging policy itself can be evaluated as a scorer.

Out-of-scenario purchases (the traffic other surfaces generate) are
drawn per user from a Poisson process and recorded on the user's most
recent request at that time.  Events that precede the user's first
request have no carrier and are counted as dropped.
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .config import SimConfig
from .errors import UnknownIdError
from .seeding import substream

LOG_FORMAT = "prerank-lab-logs"
CATALOG_FORMAT = "prerank-lab-catalog"
FORMAT_VERSION = 1

OTHER_SCENARIOS = ("recommend", "cart", "homepage")

DAY_SECONDS = 86400.0


@dataclass
class UserProfile:
    user_id: int
    profile_ids: tuple[int, ...]
    pref_categories: tuple[int, ...]
    latent: tuple[float, ...]
    behaviors_recent: tuple[int, ...]
    behaviors_short: tuple[int, ...]
    behaviors_long: tuple[int, ...]


@dataclass
class QueryDef:
    query_id: int
    category_ids: tuple[int, ...]
    term_ids: tuple[int, ...]
    freq_bucket: int
    latent: tuple[float, ...]


@dataclass
class ItemDef:
    item_id: int
    category_id: int
    brand_id: int
    title_terms: tuple[int, ...]
    latent: tuple[float, ...]


@dataclass
class OtherPurchase:
    """A purchase made outside the search scenario."""

    item_id: int
    ts: float
    scenario: str


@dataclass
class RequestLog:
    """One logged search request with its full cascade trace."""

    request_id: int
    user_id: int
    query_id: int
    timestamp: float
    matching_out: tuple[int, ...]
    prerank_out: tuple[int, ...]
    exposures: tuple[int, ...]
    clicks: tuple[int, ...]
    purchases: tuple[int, ...]
    purchase_ts: tuple[float, ...]
    other_scenario_purchases: tuple[OtherPurchase, ...] = ()


@dataclass
class CascadeStats:
    n_requests: int = 0
    n_exposures: int = 0
    n_clicks: int = 0
    n_purchases: int = 0
    n_other_purchases: int = 0
    n_other_dropped: int = 0


@dataclass
class Catalog:
    """Generated marketplace entities plus stacked arrays for fast scoring."""

    seed: int
    config: SimConfig
    users: list[UserProfile]
    queries: list[QueryDef]
    items: list[ItemDef]

    user_latent: np.ndarray = field(init=False, repr=False)
    query_latent: np.ndarray = field(init=False, repr=False)
    item_latent: np.ndarray = field(init=False, repr=False)
    item_category: np.ndarray = field(init=False, repr=False)
    item_brand: np.ndarray = field(init=False, repr=False)
    items_by_category: dict[int, np.ndarray] = field(init=False, repr=False)

    def __post_init__(self) -> None:
        self.user_latent = np.array([u.latent for u in self.users], dtype=np.float64)
        self.query_latent = np.array([q.latent for q in self.queries], dtype=np.float64)
        self.item_latent = np.array([p.latent for p in self.items], dtype=np.float64)
        self.item_category = np.array([p.category_id for p in self.items], dtype=np.int64)
        self.item_brand = np.array([p.brand_id for p in self.items], dtype=np.int64)
        self.items_by_category = {
            c: np.flatnonzero(self.item_category == c) for c in range(self.config.n_categories)
        }

    def check_ids(self, user_id: int, query_id: int) -> None:
        if not 0 <= user_id < len(self.users):
            raise UnknownIdError(f"unknown user_id {user_id}")
        if not 0 <= query_id < len(self.queries):
            raise UnknownIdError(f"unknown query_id {query_id}")


def _sigmoid(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x, dtype=np.float64)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def _unit_rows(v: np.ndarray) -> np.ndarray:
    return v / np.linalg.norm(v, axis=-1, keepdims=True)


def _top_ids(ids: np.ndarray, scores: np.ndarray, k: int) -> np.ndarray:
    # descending score, ascending id on ties
    order = np.lexsort((ids, -scores))
    return ids[order[:k]]


# ----------------------------------------------------------------------
# catalog generation


def gen_catalog(cfg: SimConfig, seed: int) -> Catalog:
    cfg.validate()
    rng = substream(seed, "catalog")
    ld = cfg.latent_dim

    centers = _unit_rows(rng.standard_normal((cfg.n_categories, ld)))

    items = []
    for item_id in range(cfg.n_items):
        cat = int(rng.integers(cfg.n_categories))
        latent = _unit_rows(0.8 * centers[cat] + 0.4 * rng.standard_normal(ld))
        block = cat * cfg.terms_per_category
        n_terms = int(rng.integers(cfg.title_terms_min, cfg.title_terms_max + 1))
        own = rng.choice(cfg.terms_per_category, size=min(n_terms, cfg.terms_per_category), replace=False)
        title = tuple(int(block + t) for t in own)
        items.append(
            ItemDef(
                item_id=item_id,
                category_id=cat,
                brand_id=int(rng.integers(cfg.n_brands)),
                title_terms=title,
                latent=tuple(float(x) for x in latent),
            )
        )

    popularity = rng.permutation(cfg.n_queries)
    queries = []
    for query_id in range(cfg.n_queries):
        primary = int(rng.integers(cfg.n_categories))
        cats = [primary]
        if cfg.query_categories_max > 1 and rng.random() < 0.3:
            extra = int(rng.integers(cfg.n_categories))
            if extra != primary:
                cats.append(extra)
        latent = _unit_rows(0.85 * centers[primary] + 0.3 * rng.standard_normal(ld))
        block = primary * cfg.terms_per_category
        n_terms = int(rng.integers(cfg.query_terms_min, cfg.query_terms_max + 1))
        own = rng.choice(cfg.terms_per_category, size=min(n_terms, cfg.terms_per_category), replace=False)
        bucket = int(popularity[query_id]) * cfg.n_freq_buckets // cfg.n_queries
        queries.append(
            QueryDef(
                query_id=query_id,
                category_ids=tuple(cats),
                term_ids=tuple(int(block + t) for t in own),
                freq_bucket=bucket,
                latent=tuple(float(x) for x in latent),
            )
        )

    item_category = np.array([p.category_id for p in items], dtype=np.int64)
    by_cat = {c: np.flatnonzero(item_category == c) for c in range(cfg.n_categories)}

    users = []
    for user_id in range(cfg.n_users):
        prefs = tuple(
            int(c) for c in rng.choice(cfg.n_categories, size=min(cfg.user_categories, cfg.n_categories), replace=False)
        )
        latent = _unit_rows(0.7 * centers[list(prefs)].mean(axis=0) + 0.5 * rng.standard_normal(ld))
        profile_ids = tuple(int(rng.integers(cfg.profile_vocab)) for _ in range(cfg.n_profile_features))

        n_beh = int(rng.poisson(cfg.behaviors_per_user))
        recent, short, long_ = [], [], []
        for _ in range(n_beh):
            if rng.random() < 0.8:
                pool = by_cat[prefs[int(rng.integers(len(prefs)))]]
            else:
                pool = None
            item = int(pool[rng.integers(len(pool))]) if pool is not None and len(pool) else int(rng.integers(cfg.n_items))
            age = rng.random() * cfg.history_days
            if age <= 1.0:
                recent.append(item)
            elif age <= 10.0:
                short.append(item)
            else:
                long_.append(item)
        users.append(
            UserProfile(
                user_id=user_id,
                profile_ids=profile_ids,
                pref_categories=prefs,
                latent=tuple(float(x) for x in latent),
                behaviors_recent=tuple(recent),
                behaviors_short=tuple(short),
                behaviors_long=tuple(long_),
            )
        )

    return Catalog(seed=seed, config=cfg, users=users, queries=queries, items=items)


# ----------------------------------------------------------------------
# ground-truth probabilities


def true_relevance(catalog: Catalog, user_id: int, query_id: int) -> np.ndarray:
    """True relevance of every item for (user, query), shape (n_items,)."""
    catalog.check_ids(user_id, query_id)
    cfg = catalog.config
    q = catalog.query_latent[query_id]
    u = catalog.user_latent[user_id]
    match = np.isin(catalog.item_category, catalog.queries[query_id].category_ids)
    iq = catalog.item_latent @ q
    iu = catalog.item_latent @ u
    # the multiplicative term makes the top of the ranking depend jointly
    # on query fit and user taste, so no single-factor model can nail it
    score = (
        cfg.query_affinity * iq
        + cfg.user_affinity * iu
        + cfg.cross_affinity * iq * iu
        + cfg.category_bonus * match
        - cfg.relevance_offset
    )
    return _sigmoid(score)


def event_probabilities(cfg: SimConfig, rel: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Map relevance to (pClick, pPurchase | click)."""
    rel = np.asarray(rel, dtype=np.float64)
    pclick = cfg.click_floor + (cfg.click_ceil - cfg.click_floor) * rel**cfg.click_power
    pcvr = cfg.cvr_floor + (cfg.cvr_ceil - cfg.cvr_floor) * rel**cfg.cvr_power
    return pclick, pcvr


def true_probabilities(
    catalog: Catalog, user_id: int, query_id: int, item_ids=None
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """(relevance, pClick, pPurchase|click) for the given items.

    ``item_ids=None`` returns all items.  P(purchase | exposure) is the
    product of the two event probabilities.
    """
    rel = true_relevance(catalog, user_id, query_id)
    if item_ids is not None:
        rel = rel[np.asarray(item_ids, dtype=np.intp)]
    pclick, pcvr = event_probabilities(catalog.config, rel)
    return rel, pclick, pcvr


# ----------------------------------------------------------------------
# logging cascade


def _stage_scores(
    catalog: Catalog, seed: int, request_id: int, stage: str, rel: np.ndarray, pool: np.ndarray
) -> np.ndarray:
    """Noisy stage scores for ``pool``, regenerable from (seed, request, stage).

    ``pool`` must be in canonical ascending-id order so the noise stream
    lines up no matter who asks.
    """
    sigma = {
        "matching": catalog.config.matching_noise,
        "prerank": catalog.config.prerank_noise,
        "ranking": catalog.config.ranking_noise,
    }[stage]
    rng = substream(seed, "stage", request_id, stage)
    return rel[pool] + sigma * rng.standard_normal(len(pool))


def logging_prerank_scores(catalog: Catalog, seed: int, request: RequestLog) -> tuple[np.ndarray, np.ndarray]:
    """Reproduce the pre-ranking stage scores the cascade used.

    Returns (pool ids ascending, scores).  Selecting the top
    ``prerank_size`` of these by (score desc, id asc) yields exactly
    ``request.prerank_out``.
    """
    rel = true_relevance(catalog, request.user_id, request.query_id)
    pool = np.sort(np.asarray(request.matching_out, dtype=np.int64))
    return pool, _stage_scores(catalog, seed, request.request_id, "prerank", rel, pool)


def run_cascade_logging(
    catalog: Catalog,
    seed: int | None = None,
    n_requests: int | None = None,
    explore_rate: float = 0.0,
) -> tuple[list[RequestLog], CascadeStats]:
    """Simulate logged traffic through the three-stage cascade.

    ``explore_rate`` is the per-slot chance that an exposure slot shows
    a random matching candidate instead of the ranking pick, the way
    production slates mix in exploration traffic.  Exploration windows
    lose the exposures-within-prerank containment, so the default
    logging window keeps it at zero.
    """
    cfg = catalog.config
    if seed is None:
        seed = catalog.seed
    if n_requests is None:
        n_requests = cfg.n_requests
    if not 0.0 <= explore_rate <= 1.0:
        raise ValueError("explore_rate must lie in [0, 1]")

    sched = substream(seed, "schedule")
    user_ids = sched.integers(cfg.n_users, size=n_requests)
    timestamps = np.sort(sched.random(n_requests) * cfg.window_days * DAY_SECONDS)

    # queries drawn per user: popular queries in preferred categories dominate
    pop = 1.0 / (1.0 + np.array([q.freq_bucket for q in catalog.queries], dtype=np.float64))
    primary = np.array([q.category_ids[0] for q in catalog.queries], dtype=np.int64)
    query_choices = np.empty(n_requests, dtype=np.int64)
    for i in range(n_requests):
        prefs = catalog.users[int(user_ids[i])].pref_categories
        w = pop * np.where(np.isin(primary, prefs), 8.0, 1.0)
        query_choices[i] = sched.choice(cfg.n_queries, p=w / w.sum())

    all_ids = np.arange(cfg.n_items, dtype=np.int64)
    stats = CascadeStats(n_requests=n_requests)
    logs: list[RequestLog] = []
    for rid in range(n_requests):
        uid = int(user_ids[rid])
        qid = int(query_choices[rid])
        rel = true_relevance(catalog, uid, qid)

        m_scores = _stage_scores(catalog, seed, rid, "matching", rel, all_ids)
        matching = _top_ids(all_ids, m_scores, cfg.matching_pool)

        pool = np.sort(matching)
        p_scores = _stage_scores(catalog, seed, rid, "prerank", rel, pool)
        prerank = _top_ids(pool, p_scores, cfg.prerank_size)

        rpool = np.sort(prerank)
        r_scores = _stage_scores(catalog, seed, rid, "ranking", rel, rpool)
        exposed = _top_ids(rpool, r_scores, cfg.exposure_cap)

        if explore_rate > 0.0:
            xrng = substream(seed, "explore", rid)
            swap = np.flatnonzero(xrng.random(len(exposed)) < explore_rate)
            if swap.size:
                fresh = np.setdiff1d(pool, exposed)
                exposed = exposed.copy()
                exposed[swap] = xrng.choice(fresh, size=swap.size, replace=False)

        pclick, pcvr = event_probabilities(cfg, rel[exposed])
        ev = substream(seed, "events", rid)
        click_mask = ev.random(len(exposed)) < pclick
        clicked = exposed[click_mask]
        bought = clicked[ev.random(len(clicked)) < pcvr[click_mask]]
        ts = float(timestamps[rid])
        p_ts = tuple(float(ts + 60.0 + 540.0 * ev.random()) for _ in bought)

        logs.append(
            RequestLog(
                request_id=rid,
                user_id=uid,
                query_id=qid,
                timestamp=ts,
                matching_out=tuple(int(x) for x in matching),
                prerank_out=tuple(int(x) for x in prerank),
                exposures=tuple(int(x) for x in exposed),
                clicks=tuple(int(x) for x in clicked),
                purchases=tuple(int(x) for x in bought),
                purchase_ts=p_ts,
            )
        )
        stats.n_exposures += len(exposed)
        stats.n_clicks += len(clicked)
        stats.n_purchases += len(bought)

    _add_other_purchases(catalog, seed, logs, stats)
    return logs, stats


def _add_other_purchases(
    catalog: Catalog, seed: int, logs: list[RequestLog], stats: CascadeStats
) -> None:
    cfg = catalog.config
    by_user: dict[int, list[int]] = {}
    for idx, log in enumerate(logs):
        by_user.setdefault(log.user_id, []).append(idx)

    extra: dict[int, list[OtherPurchase]] = {}
    for user in catalog.users:
        rng = substream(seed, "other", user.user_id)
        n = int(rng.poisson(cfg.other_purchase_rate * cfg.window_days))
        owned = by_user.get(user.user_id, [])
        for _ in range(n):
            ts = float(rng.random() * cfg.window_days * DAY_SECONDS)
            cat = user.pref_categories[int(rng.integers(len(user.pref_categories)))]
            pool = catalog.items_by_category[cat]
            if len(pool) == 0:
                pool = np.arange(cfg.n_items)
            item = int(pool[rng.integers(len(pool))])
            scenario = OTHER_SCENARIOS[int(rng.integers(len(OTHER_SCENARIOS)))]
            carrier = None
            for idx in owned:
                if logs[idx].timestamp <= ts:
                    carrier = idx
                else:
                    break
            if carrier is None:
                stats.n_other_dropped += 1
                continue
            extra.setdefault(carrier, []).append(OtherPurchase(item, ts, scenario))
            stats.n_other_purchases += 1

    for idx, events in extra.items():
        events.sort(key=lambda e: (e.ts, e.item_id))
        logs[idx] = dataclasses.replace(logs[idx], other_scenario_purchases=tuple(events))


# ----------------------------------------------------------------------
# serialization


def save_catalog(catalog: Catalog, path: str | Path) -> None:
    payload = {
        "format": CATALOG_FORMAT,
        "version": FORMAT_VERSION,
        "seed": catalog.seed,
        "config": dataclasses.asdict(catalog.config),
        "users": [dataclasses.asdict(u) for u in catalog.users],
        "queries": [dataclasses.asdict(q) for q in catalog.queries],
        "items": [dataclasses.asdict(p) for p in catalog.items],
    }
    Path(path).write_text(json.dumps(payload))


def load_catalog(path: str | Path) -> Catalog:
    payload = json.loads(Path(path).read_text())
    if payload.get("format") != CATALOG_FORMAT:
        raise ValueError(f"{path} is not a catalog file")
    cfg = SimConfig(**payload["config"])

    def tup(d, key):
        d[key] = tuple(d[key])

    users = []
    for d in payload["users"]:
        for key in ("profile_ids", "pref_categories", "latent", "behaviors_recent", "behaviors_short", "behaviors_long"):
            tup(d, key)
        users.append(UserProfile(**d))
    queries = []
    for d in payload["queries"]:
        for key in ("category_ids", "term_ids", "latent"):
            tup(d, key)
        queries.append(QueryDef(**d))
    items = []
    for d in payload["items"]:
        for key in ("title_terms", "latent"):
            tup(d, key)
        items.append(ItemDef(**d))
    return Catalog(seed=payload["seed"], config=cfg, users=users, queries=queries, items=items)


def save_logs(logs: list[RequestLog], path: str | Path, *, seed: int, config_digest: str = "") -> None:
    with open(path, "w") as fh:
        header = {
            "format": LOG_FORMAT,
            "version": FORMAT_VERSION,
            "seed": seed,
            "config_digest": config_digest,
            "n_requests": len(logs),
        }
        fh.write(json.dumps(header) + "\n")
        for log in logs:
            d = dataclasses.asdict(log)
            d["other_scenario_purchases"] = [dataclasses.asdict(e) for e in log.other_scenario_purchases]
            fh.write(json.dumps(d) + "\n")


def load_logs(path: str | Path) -> tuple[list[RequestLog], dict]:
    logs: list[RequestLog] = []
    with open(path) as fh:
        header = json.loads(fh.readline())
        if header.get("format") != LOG_FORMAT:
            raise ValueError(f"{path} is not a request log file")
        for line in fh:
            d = json.loads(line)
            d["other_scenario_purchases"] = tuple(OtherPurchase(**e) for e in d["other_scenario_purchases"])
            for key in ("matching_out", "prerank_out", "exposures", "clicks", "purchases", "purchase_ts"):
                d[key] = tuple(d[key])
            logs.append(RequestLog(**d))
    return logs, header
