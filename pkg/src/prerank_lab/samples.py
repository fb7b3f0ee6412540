"""Entire-space training samples with all-scenario labels.

A logged request only shows outcomes for the ten exposed items, yet the
model must rank the whole candidate space.  Each training sample
therefore covers three disjoint origins: the exposures themselves, a
draw from the unexposed pre-ranking output (rank candidates), and a draw
from the matching pool that pre-ranking rejected (pre-rank candidates).

Purchases are credited across scenarios: every purchase event, search or
otherwise, is attached to the user's latest earlier query whose true
relevance to the bought item clears the borderline.  Each (user, item)
pair is attached at most once, keeping the earliest purchase.  Attached
items are injected into the request's sample if the candidate draws
missed them, so every purchase positive is visible to the loss.

Labels cascade: a purchase positive forces the click and exposure labels
to one, and a click positive forces the exposure label, so deeper tasks
never contradict shallower ones.
"""

from __future__ import annotations

import dataclasses
import json
from collections import defaultdict
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .config import SampleConfig
from .errors import LabelingError
from .seeding import substream
from .simulator import Catalog, RequestLog, true_relevance

SAMPLE_FORMAT = "prerank-lab-samples"
FORMAT_VERSION = 1

SCENARIO_SEARCH = "search"
ORIGINS = ("ex", "rc", "prc")


@dataclass(frozen=True)
class AttachedPurchase:
    """A purchase event credited to the user's latest relevant query."""

    user_id: int
    item_id: int
    purchase_ts: float
    scenario: str
    request_id: int
    query_id: int
    query_ts: float


@dataclass
class AttachStats:
    n_search_events: int = 0
    n_other_events: int = 0
    n_duplicates_dropped: int = 0
    n_unattached: int = 0
    n_attached: int = 0


@dataclass
class LabeledItem:
    item_id: int
    origin: str
    exposure: int
    click: int
    purchase: int
    injected: bool = False
    teacher_pctr: float | None = None
    teacher_pcvr: float | None = None


@dataclass
class QuerySample:
    """One request's entire-space sample."""

    request_id: int
    user_id: int
    query_id: int
    items: tuple[LabeledItem, ...]
    rc_truncated: bool = False
    prc_truncated: bool = False

    def item_ids(self) -> np.ndarray:
        return np.array([it.item_id for it in self.items], dtype=np.int64)

    def origins(self) -> tuple[str, ...]:
        return tuple(it.origin for it in self.items)

    def label_arrays(self) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        exposure = np.array([it.exposure for it in self.items], dtype=bool)
        click = np.array([it.click for it in self.items], dtype=bool)
        purchase = np.array([it.purchase for it in self.items], dtype=bool)
        return exposure, click, purchase

    def teacher_arrays(self) -> tuple[np.ndarray, np.ndarray]:
        pctr = np.array(
            [np.nan if it.teacher_pctr is None else it.teacher_pctr for it in self.items], dtype=np.float64
        )
        pcvr = np.array(
            [np.nan if it.teacher_pcvr is None else it.teacher_pcvr for it in self.items], dtype=np.float64
        )
        return pctr, pcvr


@dataclass
class BuildStats:
    n_samples: int = 0
    n_items: int = 0
    n_ex: int = 0
    n_rc: int = 0
    n_prc: int = 0
    n_injected: int = 0
    n_rc_truncated: int = 0
    n_prc_truncated: int = 0


def distill_mask(origins, distill_set: str) -> np.ndarray:
    """Membership mask of the distillation set D over sample origins."""
    allowed = {
        "none": (),
        "ex": ("ex",),
        "ex_rc": ("ex", "rc"),
        "ex_rc_prc": ("ex", "rc", "prc"),
    }[distill_set]
    return np.array([o in allowed for o in origins], dtype=bool)


# ----------------------------------------------------------------------
# purchase attachment


def attach_related_queries(
    catalog: Catalog, logs: list[RequestLog], borderline: float | None = None
) -> tuple[list[AttachedPurchase], AttachStats]:
    """Credit every purchase event to the user's latest relevant prior query.

    Relevance is judged against the catalog's ground truth; queries at or
    above ``borderline`` qualify.  Events with no qualifying prior query
    are dropped and counted.
    """
    if borderline is None:
        borderline = catalog.config.borderline
    stats = AttachStats()

    events: list[tuple[int, int, float, str]] = []
    for log in logs:
        for item, ts in zip(log.purchases, log.purchase_ts):
            events.append((log.user_id, item, ts, SCENARIO_SEARCH))
            stats.n_search_events += 1
        for ev in log.other_scenario_purchases:
            events.append((log.user_id, ev.item_id, ev.ts, ev.scenario))
            stats.n_other_events += 1

    # one attachment per (user, item): keep the earliest purchase
    events.sort(key=lambda t: (t[0], t[1], t[2]))
    unique: list[tuple[int, int, float, str]] = []
    seen: set[tuple[int, int]] = set()
    for user_id, item_id, ts, scenario in events:
        if (user_id, item_id) in seen:
            stats.n_duplicates_dropped += 1
            continue
        seen.add((user_id, item_id))
        unique.append((user_id, item_id, ts, scenario))

    by_user: dict[int, list[RequestLog]] = defaultdict(list)
    for log in logs:
        by_user[log.user_id].append(log)

    rel_cache: dict[tuple[int, int], np.ndarray] = {}

    def rel(user_id: int, query_id: int) -> np.ndarray:
        key = (user_id, query_id)
        if key not in rel_cache:
            rel_cache[key] = true_relevance(catalog, user_id, query_id)
        return rel_cache[key]

    attached: list[AttachedPurchase] = []
    for user_id, item_id, ts, scenario in unique:
        target = None
        for req in reversed(by_user.get(user_id, [])):
            if req.timestamp >= ts:
                continue
            if rel(user_id, req.query_id)[item_id] >= borderline:
                target = req
                break
        if target is None:
            stats.n_unattached += 1
            continue
        attached.append(
            AttachedPurchase(
                user_id=user_id,
                item_id=item_id,
                purchase_ts=ts,
                scenario=scenario,
                request_id=target.request_id,
                query_id=target.query_id,
                query_ts=target.timestamp,
            )
        )
        stats.n_attached += 1

    attached.sort(key=lambda a: (a.request_id, a.item_id))
    return attached, stats


def attachments_by_request(attached: list[AttachedPurchase]) -> dict[int, list[AttachedPurchase]]:
    out: dict[int, list[AttachedPurchase]] = defaultdict(list)
    for a in attached:
        out[a.request_id].append(a)
    return dict(out)


# ----------------------------------------------------------------------
# sample construction


def sample_candidates(
    log: RequestLog, rng: np.random.Generator, n_rank: int, n_prerank: int
) -> tuple[list[int], list[int], bool, bool]:
    """Draw unexposed rank candidates and rejected pre-rank candidates."""
    rank_pool = sorted(set(log.prerank_out) - set(log.exposures))
    prc_pool = sorted(set(log.matching_out) - set(log.prerank_out))
    rc_truncated = len(rank_pool) < n_rank
    prc_truncated = len(prc_pool) < n_prerank
    rc = rng.choice(len(rank_pool), size=min(n_rank, len(rank_pool)), replace=False) if rank_pool else []
    prc = rng.choice(len(prc_pool), size=min(n_prerank, len(prc_pool)), replace=False) if prc_pool else []
    rc_ids = sorted(rank_pool[i] for i in rc)
    prc_ids = sorted(prc_pool[i] for i in prc)
    return rc_ids, prc_ids, rc_truncated, prc_truncated


def assign_labels(
    log: RequestLog,
    rc_ids: list[int],
    prc_ids: list[int],
    attached_items: set[int],
) -> list[LabeledItem]:
    """Label a request's candidate set with cascaded all-scenario labels.

    Attached purchase items missing from every draw are injected so the
    positives always appear, placed in the deepest cascade set that
    contains them (outside the matching pool they count as pre-rank
    candidates).
    """
    clicks = set(log.clicks)
    prerank = set(log.prerank_out)
    matching = set(log.matching_out)
    exposures = set(log.exposures)

    items: list[LabeledItem] = []
    for item in log.exposures:
        pos = item in attached_items
        items.append(
            LabeledItem(
                item_id=item,
                origin="ex",
                exposure=1,
                click=int(item in clicks or pos),
                purchase=int(pos),
            )
        )

    rc_set = set(rc_ids)
    prc_set = set(prc_ids)
    inject_rc, inject_prc = [], []
    for item in sorted(attached_items):
        if item in exposures or item in rc_set or item in prc_set:
            continue
        if item in prerank:
            inject_rc.append(item)
        else:
            # rejected by pre-ranking, or missed by matching entirely
            inject_prc.append(item)

    def non_exposed(item: int, origin: str, injected: bool) -> LabeledItem:
        pos = int(item in attached_items)
        return LabeledItem(item_id=item, origin=origin, exposure=pos, click=pos, purchase=pos, injected=injected)

    for item in sorted(rc_set | set(inject_rc)):
        items.append(non_exposed(item, "rc", item in inject_rc))
    for item in sorted(prc_set | set(inject_prc)):
        items.append(non_exposed(item, "prc", item in inject_prc))
    return items


def validate_sample(sample: QuerySample) -> None:
    """Raise LabelingError if labels or origins violate the invariants."""
    seen: set[int] = set()
    for it in sample.items:
        if it.origin not in ORIGINS:
            raise LabelingError(f"bad origin {it.origin!r} in request {sample.request_id}")
        if it.item_id in seen:
            raise LabelingError(f"duplicate item {it.item_id} in request {sample.request_id}")
        seen.add(it.item_id)
        if it.purchase and not it.click:
            raise LabelingError(f"purchase without click on item {it.item_id}")
        if it.click and not it.exposure:
            raise LabelingError(f"click without exposure on item {it.item_id}")
        if it.origin != "ex" and it.exposure and not it.purchase:
            raise LabelingError(f"non-exposed item {it.item_id} has a bare exposure label")


def build_query_samples(
    catalog: Catalog,
    logs: list[RequestLog],
    cfg: SampleConfig,
    seed: int,
    attached: list[AttachedPurchase] | None = None,
) -> tuple[list[QuerySample], BuildStats]:
    """Build one entire-space sample per logged request."""
    cfg.validate()
    if attached is None:
        attached, _ = attach_related_queries(catalog, logs)
    by_request = attachments_by_request(attached)

    stats = BuildStats()
    samples: list[QuerySample] = []
    for log in logs:
        rng = substream(seed, "samples", log.request_id)
        rc_ids, prc_ids, rc_trunc, prc_trunc = sample_candidates(
            log, rng, cfg.n_rank_cands, cfg.n_prerank_cands
        )
        attached_items = {a.item_id for a in by_request.get(log.request_id, [])}
        items = assign_labels(log, rc_ids, prc_ids, attached_items)
        sample = QuerySample(
            request_id=log.request_id,
            user_id=log.user_id,
            query_id=log.query_id,
            items=tuple(items),
            rc_truncated=rc_trunc,
            prc_truncated=prc_trunc,
        )
        validate_sample(sample)
        samples.append(sample)

        stats.n_samples += 1
        stats.n_items += len(items)
        stats.n_ex += sum(it.origin == "ex" for it in items)
        stats.n_rc += sum(it.origin == "rc" for it in items)
        stats.n_prc += sum(it.origin == "prc" for it in items)
        stats.n_injected += sum(it.injected for it in items)
        stats.n_rc_truncated += rc_trunc
        stats.n_prc_truncated += prc_trunc
    return samples, stats


# ----------------------------------------------------------------------
# time-based split


def split_logs(logs: list[RequestLog], eval_frac: float = 0.2) -> tuple[list[RequestLog], list[RequestLog]]:
    """Split time-ordered logs into a training prefix and an eval suffix."""
    if not 0.0 < eval_frac < 1.0:
        raise ValueError("eval_frac must lie in (0, 1)")
    cut = max(1, int(round(len(logs) * (1.0 - eval_frac))))
    cut = min(cut, len(logs) - 1)
    return logs[:cut], logs[cut:]


# ----------------------------------------------------------------------
# serialization


def save_samples(samples: list[QuerySample], path: str | Path, *, seed: int, config_digest: str = "") -> None:
    with open(path, "w") as fh:
        header = {
            "format": SAMPLE_FORMAT,
            "version": FORMAT_VERSION,
            "seed": seed,
            "config_digest": config_digest,
            "n_samples": len(samples),
        }
        fh.write(json.dumps(header) + "\n")
        for sample in samples:
            d = dataclasses.asdict(sample)
            d["items"] = [dataclasses.asdict(it) for it in sample.items]
            fh.write(json.dumps(d) + "\n")


def load_samples(path: str | Path) -> tuple[list[QuerySample], dict]:
    samples: list[QuerySample] = []
    with open(path) as fh:
        header = json.loads(fh.readline())
        if header.get("format") != SAMPLE_FORMAT:
            raise ValueError(f"{path} is not a sample file")
        for line in fh:
            d = json.loads(line)
            d["items"] = tuple(LabeledItem(**it) for it in d["items"])
            samples.append(QuerySample(**d))
    return samples, header
