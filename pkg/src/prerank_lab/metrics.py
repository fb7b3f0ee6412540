"""Set-quality and rank-consistency metrics over logged requests.

Two complementary views of a pre-ranker, because optimizing one can
degrade the other:

* Purchase hitrate at k measures output-set quality: how many of a
  request's purchase targets appear in the scorer's top k of the
  candidate pool.  The all-scenario variant takes the purchases
  attached to the request (any scenario) as targets; the in-scenario
  variant takes only the purchases logged under the request itself.
* Purchase AUC over the request's exposures (at most ten) measures
  ranking consistency among items the user actually saw, counting tied
  scores as half wins.

Per-request values are exact fractions, aggregated by exact macro
averaging over the requests that have at least one target; floats only
appear when a report formats them.  Top-k selection breaks score ties
by ascending item id so results never depend on input order.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from fractions import Fraction
from typing import Callable

import numpy as np

from .config import EvalConfig
from .errors import EvaluationError
from .samples import AttachedPurchase, attachments_by_request
from .simulator import Catalog, RequestLog, logging_prerank_scores

Scorer = Callable[[RequestLog, np.ndarray], np.ndarray]


# ----------------------------------------------------------------------
# primitives


def topk_ids(ids: np.ndarray, scores: np.ndarray, k: int) -> np.ndarray:
    """Top-k ids by (score descending, id ascending)."""
    ids = np.asarray(ids, dtype=np.int64)
    scores = np.asarray(scores, dtype=np.float64)
    if ids.shape != scores.shape:
        raise EvaluationError("ids and scores must align")
    order = np.lexsort((ids, -scores))
    return ids[order[:k]]


def hitrate_at_k(ids: np.ndarray, scores: np.ndarray, targets: set[int], k: int) -> Fraction:
    """|top-k intersect targets| / |targets| as an exact fraction."""
    if not targets:
        raise EvaluationError("hitrate needs at least one target")
    top = topk_ids(ids, scores, k)
    hits = len(targets.intersection(top.tolist()))
    return Fraction(hits, len(targets))


def pauc(scores: np.ndarray, labels: np.ndarray) -> Fraction | None:
    """Pairwise AUC with ties worth 1/2; None when one class is absent."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels, dtype=bool)
    pos = scores[labels]
    neg = scores[~labels]
    if pos.size == 0 or neg.size == 0:
        return None
    total = Fraction(0)
    for p in pos:
        for n in neg:
            if p > n:
                total += 1
            elif p == n:
                total += Fraction(1, 2)
    return total / (pos.size * neg.size)


def _mean(values: list[Fraction]) -> Fraction | None:
    if not values:
        return None
    return sum(values, Fraction(0)) / len(values)


# ----------------------------------------------------------------------
# request evaluation


@dataclass
class MetricReport:
    """Macro-averaged metrics, exact until formatted."""

    n_requests: int = 0
    n_all_scenario: int = 0
    n_in_scenario: int = 0
    n_pauc: int = 0
    asph: dict[int, Fraction] = field(default_factory=dict)
    isph: dict[int, Fraction] = field(default_factory=dict)
    pauc: Fraction | None = None

    def as_floats(self) -> dict[str, float]:
        out: dict[str, float] = {}
        for k in sorted(self.asph):
            out[f"asph@{k}"] = float(self.asph[k])
        for k in sorted(self.isph):
            out[f"isph@{k}"] = float(self.isph[k])
        if self.pauc is not None:
            out["pauc"] = float(self.pauc)
        return out


def build_eval_pool(log: RequestLog, targets: set[int], inject: bool) -> np.ndarray:
    """Candidate pool for one request: the matching output, optionally
    with out-of-pool targets injected so set quality is measured on a
    pool that contains every target."""
    pool = set(log.matching_out)
    if inject:
        pool |= targets
    return np.array(sorted(pool), dtype=np.int64)


def evaluate_scorer(
    logs: list[RequestLog],
    scorer: Scorer,
    eval_cfg: EvalConfig,
    attached: list[AttachedPurchase],
) -> MetricReport:
    """Score every request's pool once and aggregate all metrics."""
    eval_cfg.validate()
    by_request = attachments_by_request(attached)
    ks = sorted(set(eval_cfg.k_grid) | {eval_cfg.k_eval})

    asph_acc: dict[int, list[Fraction]] = {k: [] for k in ks}
    isph_acc: dict[int, list[Fraction]] = {k: [] for k in ks}
    pauc_acc: list[Fraction] = []
    report = MetricReport(n_requests=len(logs))

    for log in logs:
        targets_in = set(log.purchases)
        # all-scenario targets: purchases made on this request plus
        # related purchases attached from the other scenarios
        targets_all = targets_in | {a.item_id for a in by_request.get(log.request_id, [])}
        pool = build_eval_pool(log, targets_all, eval_cfg.inject_targets)
        scores = np.asarray(scorer(log, pool), dtype=np.float64)
        if scores.shape != pool.shape:
            raise EvaluationError("scorer returned a misshapen score vector")
        if np.any(np.isnan(scores)):
            raise EvaluationError("scorer returned NaN")

        if targets_all:
            report.n_all_scenario += 1
            for k in ks:
                asph_acc[k].append(hitrate_at_k(pool, scores, targets_all, k))
        if targets_in:
            report.n_in_scenario += 1
            for k in ks:
                isph_acc[k].append(hitrate_at_k(pool, scores, targets_in, k))

        exposures = np.asarray(log.exposures, dtype=np.int64)
        if exposures.size:
            pos = np.isin(exposures, np.asarray(sorted(targets_in), dtype=np.int64))
            idx = {int(i): j for j, i in enumerate(pool)}
            exp_scores = scores[[idx[int(i)] for i in exposures]]
            value = pauc(exp_scores, pos)
            if value is not None:
                report.n_pauc += 1
                pauc_acc.append(value)

    for k in ks:
        mean_asph = _mean(asph_acc[k])
        mean_isph = _mean(isph_acc[k])
        if mean_asph is not None:
            report.asph[k] = mean_asph
        if mean_isph is not None:
            report.isph[k] = mean_isph
    report.pauc = _mean(pauc_acc)
    return report


# ----------------------------------------------------------------------
# scorer adapters


def model_scorer(params: dict, model_cfg, catalog: Catalog) -> Scorer:
    from .model import featurize, score_items

    def scorer(log: RequestLog, pool: np.ndarray) -> np.ndarray:
        feats = featurize(catalog, log.user_id, log.query_id, pool)
        return score_items(params, model_cfg, feats)

    return scorer


def logging_policy_scorer(catalog: Catalog, seed: int) -> Scorer:
    """Replays the pre-ranking stage scores the logging cascade used.

    Items outside the request's matching output were never seen by that
    stage and score an arbitrarily low constant, ranking last.
    """

    def scorer(log: RequestLog, pool: np.ndarray) -> np.ndarray:
        ids, stage_scores = logging_prerank_scores(catalog, seed, log)
        lookup = {int(i): s for i, s in zip(ids, stage_scores)}
        return np.array([lookup.get(int(i), -1e18) for i in pool], dtype=np.float64)

    return scorer


def true_relevance_scorer(catalog: Catalog) -> Scorer:
    from .simulator import true_relevance

    def scorer(log: RequestLog, pool: np.ndarray) -> np.ndarray:
        return true_relevance(catalog, log.user_id, log.query_id)[pool]

    return scorer


def combined_scorer(scorers: list[Scorer], combine: str) -> Scorer:
    """Multiply sigmoid link values of several scorers into one score.

    Used by the multi-model baseline: each model predicts one event
    stage, and the serving score is the product of the predicted
    probabilities.  Scores arrive as cosine/temperature logits, so each
    factor is sigmoid(z).
    """
    if combine not in ("product",):
        raise EvaluationError(f"unknown combine mode {combine!r}")

    def scorer(log: RequestLog, pool: np.ndarray) -> np.ndarray:
        out = np.ones(len(pool), dtype=np.float64)
        for s in scorers:
            z = np.asarray(s(log, pool), dtype=np.float64)
            out *= 1.0 / (1.0 + np.exp(-z))
        return out

    return scorer
