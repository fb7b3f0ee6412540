"""Teacher scorers that supply soft click/purchase probabilities.

Distillation needs per-item pCTR and pCVR estimates from a model richer
than the student.  Two teachers are available:

* oracle: reads the simulator's true probabilities.  Useful as an upper
  bound and for isolating distillation effects from teacher error.
* learned: a joint-feature network (user, query, and item signals
  concatenated, so it can cross them freely, unlike the student's two
  towers) with a shared trunk and separate sigmoid heads.  The CTR head
  trains on every exposure with click labels; the CVR head trains on
  clicked exposures with purchase labels, mirroring how conversion
  models see only post-click traffic.  Besides embeddings the input
  carries the usual engineered crosses of a production ranker: match
  indicators (category hit, preference hit, term overlap, behavior
  hit), elementwise query x item and behavior x item embedding
  products, and bucketed history statistics (impression counts and
  smoothed click/purchase rates, per item and per query-item pair)
  from a counting window, so heavily shown pairs get near-empirical
  rates while unexposed items score conservatively at the prior; the
  model still has no way to find the good items the logging policy
  never showed.

pCTCVR is always the product pCTR * pCVR.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass

import numpy as np

from .config import TeacherConfig
from .errors import LabelingError
from .model.layers import embed_scatter, embed_rows, fc_backward, fc_forward, lrelu_backward, lrelu_forward
from .model.params import VocabSpec
from .optim import Adam
from .samples import QuerySample
from .seeding import substream
from .simulator import Catalog, RequestLog, true_probabilities

TEACHER_EMB_TABLES = (
    "temb_profile",
    "temb_query_term",
    "temb_title_term",
    "temb_item_id",
    "temb_category",
    "temb_brand",
    "temb_freq",
    "temb_expcount",
    "temb_ctrrate",
    "temb_cvrrate",
    "temb_qiexp",
    "temb_qictr",
    "temb_qibuy",
)

N_EXPCOUNT_BUCKETS = 8
N_CROSS_FEATURES = 4  # category-in-query, category-in-prefs, term overlap, behavior hit
RATE_CAP = 0.5  # click rates map linearly onto bins over [0, RATE_CAP)
BUY_RATE_CAP = 0.2  # purchases-per-exposure are an order smaller


def exposure_buckets(logs: list[RequestLog], n_items: int) -> np.ndarray:
    """Log-bucketed per-item exposure counts, offset by 0.5.

    Bucket 0 means never exposed in the given logs; the count is the
    item-history feature a serving-side ranker would look up.  Values
    are stored mid-interval (bucket + 0.5) so that finite-difference
    probes never cross an integer boundary.
    """
    counts = np.zeros(n_items, dtype=np.int64)
    for log in logs:
        counts[np.asarray(log.exposures, dtype=np.int64)] += 1
    bucket = np.minimum(np.log2(1 + counts).astype(np.int64), N_EXPCOUNT_BUCKETS - 1)
    return bucket + 0.5


def rate_buckets(logs: list[RequestLog], n_items: int, bins: int) -> tuple[np.ndarray, np.ndarray]:
    """Binned smoothed per-item click and purchase rates, offset by 0.5.

    Click rate is clicks over exposures, purchase rate is purchases
    over clicks, both shrunk toward the global mean with two
    pseudo-observations so low-count items stay near the prior.  Same
    mid-interval storage trick as exposure_buckets.
    """
    exp = np.zeros(n_items)
    clk = np.zeros(n_items)
    buy = np.zeros(n_items)
    for log in logs:
        np.add.at(exp, np.asarray(log.exposures, dtype=np.int64), 1.0)
        np.add.at(clk, np.asarray(log.clicks, dtype=np.int64), 1.0)
        np.add.at(buy, np.asarray(log.purchases, dtype=np.int64), 1.0)
    gm_ctr = clk.sum() / max(exp.sum(), 1.0)
    gm_cvr = buy.sum() / max(clk.sum(), 1.0)
    hctr = (clk + 2.0 * gm_ctr) / (exp + 2.0)
    hcvr = (buy + 2.0 * gm_cvr) / (clk + 2.0)

    def to_bucket(rate: np.ndarray) -> np.ndarray:
        b = np.minimum((rate * bins / RATE_CAP).astype(np.int64), bins - 1)
        return b + 0.5

    return to_bucket(hctr), to_bucket(hcvr)


def qi_rate_buckets(logs: list[RequestLog], n_queries: int, n_items: int, bins: int) -> dict[str, np.ndarray]:
    """Per-(query, item) history features, each (n_queries, n_items).

    Returns log-bucketed exposure counts plus smoothed click-rate and
    purchase-per-exposure buckets for the trunk embeddings, and the raw
    statistics (exposure counts, smoothed click and conversion rates)
    the serving-side calibration blends with the model output.  Pairs
    the logging policy showed often get sharp empirical rates, pairs it
    never showed sit at the prior; bucket arrays are stored
    mid-interval like the per-item variants.
    """
    exp = np.zeros((n_queries, n_items))
    clk = np.zeros_like(exp)
    buy = np.zeros_like(exp)
    for log in logs:
        exp[log.query_id, np.asarray(log.exposures, dtype=np.int64)] += 1.0
        if log.clicks:
            clk[log.query_id, np.asarray(log.clicks, dtype=np.int64)] += 1.0
        if log.purchases:
            buy[log.query_id, np.asarray(log.purchases, dtype=np.int64)] += 1.0
    gm_ctr = clk.sum() / max(exp.sum(), 1.0)
    gm_buy = buy.sum() / max(exp.sum(), 1.0)
    gm_cvr = buy.sum() / max(clk.sum(), 1.0)
    hctr = (clk + 2.0 * gm_ctr) / (exp + 2.0)
    hbuy = (buy + 2.0 * gm_buy) / (exp + 2.0)
    hcvr = (buy + 2.0 * gm_cvr) / (clk + 2.0)

    return {
        "tqiexp_bucket": np.minimum(np.log2(1 + exp).astype(np.int64), N_EXPCOUNT_BUCKETS - 1) + 0.5,
        "tqictr_bucket": np.minimum((hctr * bins / RATE_CAP).astype(np.int64), bins - 1) + 0.5,
        "tqibuy_bucket": np.minimum((hbuy * bins / BUY_RATE_CAP).astype(np.int64), bins - 1) + 0.5,
        "tqexp_count": exp,
        "tqctr_rate": hctr,
        "tqcvr_rate": hcvr,
    }


# ----------------------------------------------------------------------
# oracle teacher


def oracle_scores(catalog: Catalog, user_id: int, query_id: int, item_ids) -> tuple[np.ndarray, np.ndarray]:
    _, pctr, pcvr = true_probabilities(catalog, user_id, query_id, item_ids)
    return pctr, pcvr


# ----------------------------------------------------------------------
# learned teacher


def teacher_shapes(cfg: TeacherConfig, vocab: VocabSpec) -> dict[str, tuple[int, ...]]:
    e = cfg.emb_dim
    # profile rows + sixteen further embedding blocks (pooled context,
    # item fields, history buckets, two elementwise product blocks)
    # + raw match features
    d_in = (vocab.n_profile_features + 16) * e + N_CROSS_FEATURES
    shapes: dict[str, tuple[int, ...]] = {
        "temb_profile": (vocab.n_profiles, e),
        "temb_query_term": (vocab.n_terms, e),
        "temb_title_term": (vocab.n_terms, e),
        "temb_item_id": (vocab.n_items, e),
        "temb_category": (vocab.n_categories, e),
        "temb_brand": (vocab.n_brands, e),
        "temb_freq": (vocab.n_freq_buckets, e),
        "temb_expcount": (N_EXPCOUNT_BUCKETS, e),
        "temb_ctrrate": (cfg.rate_bins, e),
        "temb_cvrrate": (cfg.rate_bins, e),
        "temb_qiexp": (N_EXPCOUNT_BUCKETS, e),
        "temb_qictr": (cfg.rate_bins, e),
        "temb_qibuy": (cfg.rate_bins, e),
        # frozen history features, not weights
        "texp_bucket": (vocab.n_items,),
        "tctr_bucket": (vocab.n_items,),
        "tcvr_bucket": (vocab.n_items,),
        "tqiexp_bucket": (vocab.n_queries, vocab.n_items),
        "tqictr_bucket": (vocab.n_queries, vocab.n_items),
        "tqibuy_bucket": (vocab.n_queries, vocab.n_items),
        # raw pair statistics consumed by the serving calibration
        "tqexp_count": (vocab.n_queries, vocab.n_items),
        "tqctr_rate": (vocab.n_queries, vocab.n_items),
        "tqcvr_rate": (vocab.n_queries, vocab.n_items),
    }
    prev = d_in
    for i, width in enumerate(cfg.hidden, start=1):
        shapes[f"tfc{i}_W"] = (prev, width)
        shapes[f"tfc{i}_b"] = (width,)
        prev = width
    for head in ("ctr", "cvr"):
        shapes[f"t{head}_W"] = (prev, 1)
        shapes[f"t{head}_b"] = (1,)
    return shapes


def init_teacher_params(cfg: TeacherConfig, vocab: VocabSpec, seed: int) -> dict[str, np.ndarray]:
    params: dict[str, np.ndarray] = {}
    for name, shape in teacher_shapes(cfg, vocab).items():
        if name.endswith("_bucket"):
            # cold-start default: every item in the lowest bucket
            params[name] = np.full(shape, 0.5)
            continue
        if name.endswith(("_count", "_rate")):
            # cold-start default: no history, calibration is a no-op
            params[name] = np.zeros(shape)
            continue
        rng = substream(seed, "teacher-init", name)
        if name.endswith("_b"):
            params[name] = np.zeros(shape)
        else:
            fan = shape[1] if name.startswith("temb_") else shape[0]
            params[name] = rng.uniform(-1.0, 1.0, size=shape) / np.sqrt(fan)
    # near-zero id memory: an item never seen in training keeps an
    # almost-null id vector, so its prediction falls back to category,
    # brand, and title content instead of init noise
    params["temb_item_id"] *= 0.05
    return params


@dataclass
class _TeacherFeatures:
    profile_ids: np.ndarray
    beh_ids: np.ndarray
    query_terms: np.ndarray
    query_cats: np.ndarray
    freq_bucket: int
    item_ids: np.ndarray
    item_cats: np.ndarray
    item_brands: np.ndarray
    title_terms: tuple[np.ndarray, ...]
    cross: np.ndarray  # (n_items, N_CROSS_FEATURES) raw match indicators


def _teacher_featurize(catalog: Catalog, user_id: int, query_id: int, item_ids) -> _TeacherFeatures:
    user = catalog.users[user_id]
    query = catalog.queries[query_id]
    ids = np.asarray(item_ids, dtype=np.int64)
    beh = np.asarray(user.behaviors_recent + user.behaviors_short + user.behaviors_long, dtype=np.int64)
    cats = catalog.item_category[ids]
    titles = tuple(np.asarray(catalog.items[int(i)].title_terms, dtype=np.int64) for i in ids)
    qterms = np.asarray(query.term_ids, dtype=np.int64)
    cross = np.empty((len(ids), N_CROSS_FEATURES))
    cross[:, 0] = np.isin(cats, query.category_ids)
    cross[:, 1] = np.isin(cats, user.pref_categories)
    cross[:, 2] = [np.isin(t, qterms).mean() if t.size else 0.0 for t in titles]
    cross[:, 3] = np.isin(ids, beh)
    return _TeacherFeatures(
        profile_ids=np.asarray(user.profile_ids, dtype=np.int64),
        beh_ids=beh,
        query_terms=qterms,
        query_cats=np.asarray(query.category_ids, dtype=np.int64),
        freq_bucket=query.freq_bucket,
        item_ids=ids,
        item_cats=cats,
        item_brands=catalog.item_brand[ids],
        title_terms=titles,
        cross=cross,
    )


def _mean_rows(table: np.ndarray, ids: np.ndarray, width: int) -> np.ndarray:
    if ids.size == 0:
        return np.zeros(width)
    return embed_rows(table, ids).mean(axis=0)


def teacher_forward(params: dict, cfg: TeacherConfig, catalog: Catalog, user_id: int, query_id: int, item_ids):
    """Batched forward over one request's items: returns (pctr, pcvr, cache)."""
    f = _teacher_featurize(catalog, user_id, query_id, item_ids)
    e = cfg.emb_dim
    beh_mean = _mean_rows(params["temb_item_id"], f.beh_ids, e)
    qterm_mean = _mean_rows(params["temb_query_term"], f.query_terms, e)
    context = np.concatenate(
        [
            embed_rows(params["temb_profile"], f.profile_ids).ravel(),
            beh_mean,
            qterm_mean,
            _mean_rows(params["temb_category"], f.query_cats, e),
            params["temb_freq"][f.freq_bucket],
        ]
    )
    title_mean = np.stack([_mean_rows(params["temb_title_term"], t, e) for t in f.title_terms])
    exp_buckets = params["texp_bucket"][f.item_ids].astype(np.int64)
    ctr_buckets = params["tctr_bucket"][f.item_ids].astype(np.int64)
    cvr_buckets = params["tcvr_bucket"][f.item_ids].astype(np.int64)
    qiexp_buckets = params["tqiexp_bucket"][query_id, f.item_ids].astype(np.int64)
    qictr_buckets = params["tqictr_bucket"][query_id, f.item_ids].astype(np.int64)
    qibuy_buckets = params["tqibuy_bucket"][query_id, f.item_ids].astype(np.int64)
    item_rows = embed_rows(params["temb_item_id"], f.item_ids)
    x = np.concatenate(
        [
            np.tile(context, (len(f.item_ids), 1)),
            item_rows,
            embed_rows(params["temb_category"], f.item_cats),
            embed_rows(params["temb_brand"], f.item_brands),
            title_mean,
            embed_rows(params["temb_expcount"], exp_buckets),
            f.cross,
            item_rows * qterm_mean,
            item_rows * beh_mean,
            embed_rows(params["temb_ctrrate"], ctr_buckets),
            embed_rows(params["temb_cvrrate"], cvr_buckets),
            embed_rows(params["temb_qiexp"], qiexp_buckets),
            embed_rows(params["temb_qictr"], qictr_buckets),
            embed_rows(params["temb_qibuy"], qibuy_buckets),
        ],
        axis=1,
    )
    caches = []
    h = x
    for i in range(1, len(cfg.hidden) + 1):
        h, c_fc = fc_forward(h, params[f"tfc{i}_W"], params[f"tfc{i}_b"])
        h, c_act = lrelu_forward(h, cfg.lrelu_slope)
        caches.append((c_fc, c_act))
    z_ctr = (h @ params["tctr_W"] + params["tctr_b"]).ravel()
    z_cvr = (h @ params["tcvr_W"] + params["tcvr_b"]).ravel()
    pctr = 1.0 / (1.0 + np.exp(-z_ctr))
    pcvr = 1.0 / (1.0 + np.exp(-z_cvr))
    cache = {
        "feats": f,
        "mlp": caches,
        "h": h,
        "pctr": pctr,
        "pcvr": pcvr,
        "exp_buckets": exp_buckets,
        "ctr_buckets": ctr_buckets,
        "cvr_buckets": cvr_buckets,
        "qiexp_buckets": qiexp_buckets,
        "qictr_buckets": qictr_buckets,
        "qibuy_buckets": qibuy_buckets,
        "item_rows": item_rows,
        "beh_mean": beh_mean,
        "qterm_mean": qterm_mean,
    }
    return pctr, pcvr, cache


def teacher_backward(params: dict, cfg: TeacherConfig, cache: dict, d_zctr: np.ndarray, d_zcvr: np.ndarray, grads: dict) -> None:
    """Accumulate gradients given d(loss)/d(logit) for both heads."""
    f: _TeacherFeatures = cache["feats"]
    h = cache["h"]
    e = cfg.emb_dim

    grads["tctr_W"] += h.T @ d_zctr[:, None]
    grads["tctr_b"] += d_zctr.sum(keepdims=True)
    grads["tcvr_W"] += h.T @ d_zcvr[:, None]
    grads["tcvr_b"] += d_zcvr.sum(keepdims=True)
    dh = d_zctr[:, None] @ params["tctr_W"].T + d_zcvr[:, None] @ params["tcvr_W"].T

    for i in range(len(cfg.hidden), 0, -1):
        c_fc, c_act = cache["mlp"][i - 1]
        dh = lrelu_backward(dh, c_act)
        dh, dW, db = fc_backward(dh, c_fc)
        grads[f"tfc{i}_W"] += dW
        grads[f"tfc{i}_b"] += db

    n_items = len(f.item_ids)
    n_pf = len(f.profile_ids)
    dcontext = dh[:, : (n_pf + 4) * e].sum(axis=0)  # context was tiled per item
    d_item = dh[:, (n_pf + 4) * e :]

    pos = 0
    embed_scatter(grads["temb_profile"], f.profile_ids, dcontext[: n_pf * e].reshape(n_pf, e))
    pos = n_pf * e
    if f.beh_ids.size:
        embed_scatter(
            grads["temb_item_id"],
            f.beh_ids,
            np.tile(dcontext[pos : pos + e] / f.beh_ids.size, (f.beh_ids.size, 1)),
        )
    pos += e
    embed_scatter(
        grads["temb_query_term"],
        f.query_terms,
        np.tile(dcontext[pos : pos + e] / f.query_terms.size, (f.query_terms.size, 1)),
    )
    pos += e
    embed_scatter(
        grads["temb_category"],
        f.query_cats,
        np.tile(dcontext[pos : pos + e] / f.query_cats.size, (f.query_cats.size, 1)),
    )
    pos += e
    grads["temb_freq"][f.freq_bucket] += dcontext[pos : pos + e]

    # the product blocks route gradient to both of their factors
    nc = N_CROSS_FEATURES
    d_prod_qi = d_item[:, 5 * e + nc : 6 * e + nc]
    d_prod_ui = d_item[:, 6 * e + nc : 7 * e + nc]
    d_item_rows = d_item[:, :e] + d_prod_qi * cache["qterm_mean"] + d_prod_ui * cache["beh_mean"]

    embed_scatter(grads["temb_item_id"], f.item_ids, d_item_rows)
    embed_scatter(grads["temb_category"], f.item_cats, d_item[:, e : 2 * e])
    embed_scatter(grads["temb_brand"], f.item_brands, d_item[:, 2 * e : 3 * e])
    for i, terms in enumerate(f.title_terms):
        embed_scatter(
            grads["temb_title_term"],
            terms,
            np.tile(d_item[i, 3 * e : 4 * e] / len(terms), (len(terms), 1)),
        )
    # cross-feature columns are raw inputs with nothing to update
    embed_scatter(grads["temb_expcount"], cache["exp_buckets"], d_item[:, 4 * e : 5 * e])
    embed_scatter(grads["temb_ctrrate"], cache["ctr_buckets"], d_item[:, 7 * e + nc : 8 * e + nc])
    embed_scatter(grads["temb_cvrrate"], cache["cvr_buckets"], d_item[:, 8 * e + nc : 9 * e + nc])
    embed_scatter(grads["temb_qiexp"], cache["qiexp_buckets"], d_item[:, 9 * e + nc : 10 * e + nc])
    embed_scatter(grads["temb_qictr"], cache["qictr_buckets"], d_item[:, 10 * e + nc : 11 * e + nc])
    embed_scatter(grads["temb_qibuy"], cache["qibuy_buckets"], d_item[:, 11 * e + nc : 12 * e + nc])

    d_qterm = (d_prod_qi * cache["item_rows"]).sum(axis=0)
    embed_scatter(
        grads["temb_query_term"],
        f.query_terms,
        np.tile(d_qterm / f.query_terms.size, (f.query_terms.size, 1)),
    )
    if f.beh_ids.size:
        d_beh = (d_prod_ui * cache["item_rows"]).sum(axis=0)
        embed_scatter(
            grads["temb_item_id"],
            f.beh_ids,
            np.tile(d_beh / f.beh_ids.size, (f.beh_ids.size, 1)),
        )


# ----------------------------------------------------------------------
# training


def _bce(p: np.ndarray, y: np.ndarray) -> float:
    eps = 1e-12
    return float(-(y * np.log(p + eps) + (1 - y) * np.log(1 - p + eps)).mean())


def train_teacher(
    catalog: Catalog,
    logs: list[RequestLog],
    cfg: TeacherConfig,
    seed: int,
    rate_logs: list[RequestLog] | None = None,
) -> tuple[dict[str, np.ndarray], list[dict]]:
    """Fit the learned teacher on exposure events; returns (params, history).

    ``rate_logs`` supplies the (typically longer) window the frozen
    per-item count and rate features are computed from; by default the
    training window itself is counted.
    """
    cfg.validate()
    if rate_logs is None:
        rate_logs = logs
    rows = []  # (user, query, item, clicked, bought)
    for log in logs:
        clicks = set(log.clicks)
        buys = set(log.purchases)
        for item in log.exposures:
            rows.append((log.user_id, log.query_id, item, item in clicks, item in buys))
    if not any(r[3] for r in rows):
        raise LabelingError("teacher training needs at least one clicked exposure")

    vocab = VocabSpec.from_sim_config(catalog.config)
    params = init_teacher_params(cfg, vocab, seed)
    # item history statistics are input features, not weights; they are
    # frozen from the counting window and ride along in the params dict
    # so checkpoints and predictors carry them automatically
    params["texp_bucket"] = exposure_buckets(rate_logs, vocab.n_items)
    params["tctr_bucket"], params["tcvr_bucket"] = rate_buckets(rate_logs, vocab.n_items, cfg.rate_bins)
    params.update(qi_rate_buckets(rate_logs, vocab.n_queries, vocab.n_items, cfg.rate_bins))
    opt = Adam(params, lr=cfg.learning_rate)
    history: list[dict] = []

    # group rows per (user, query) so each forward scores one request side
    grouped: dict[tuple[int, int], list[tuple[int, bool, bool]]] = {}
    for u, q, item, c, b in rows:
        grouped.setdefault((u, q), []).append((item, c, b))
    keys = sorted(grouped)

    for epoch in range(cfg.epochs):
        rng = substream(seed, "teacher-shuffle", epoch)
        order = rng.permutation(len(keys))
        ctr_losses, cvr_losses = [], []
        pos = 0
        while pos < len(order):
            grads = {n: np.zeros_like(v) for n, v in params.items()}
            rows_in_batch = 0
            while pos < len(order) and rows_in_batch < cfg.batch_size:
                u, q = keys[order[pos]]
                pos += 1
                entries = grouped[(u, q)]
                rows_in_batch += len(entries)
                items = np.array([t[0] for t in entries], dtype=np.int64)
                y_ctr = np.array([t[1] for t in entries], dtype=np.float64)
                y_cvr = np.array([t[2] for t in entries], dtype=np.float64)
                clicked = y_ctr > 0
                pctr, pcvr, cache = teacher_forward(params, cfg, catalog, u, q, items)
                d_zctr = (pctr - y_ctr) / len(items)
                d_zcvr = np.zeros(len(items))
                if clicked.any():
                    d_zcvr[clicked] = (pcvr[clicked] - y_cvr[clicked]) / clicked.sum()
                teacher_backward(params, cfg, cache, d_zctr, d_zcvr, grads)
                ctr_losses.append(_bce(pctr, y_ctr))
                if clicked.any():
                    cvr_losses.append(_bce(pcvr[clicked], y_cvr[clicked]))
            if cfg.weight_decay > 0:
                for name, value in params.items():
                    # decay weights only, never biases or frozen features
                    if name.endswith(("_b", "_bucket", "_count", "_rate")):
                        continue
                    grads[name] += cfg.weight_decay * value
            opt.step(grads)
        history.append(
            {
                "epoch": epoch,
                "ctr_loss": float(np.mean(ctr_losses)),
                "cvr_loss": float(np.mean(cvr_losses)) if cvr_losses else float("nan"),
            }
        )
    return params, history


# ----------------------------------------------------------------------
# prediction plumbing


def teacher_predictor(mode: str, catalog: Catalog, params: dict | None = None, cfg: TeacherConfig | None = None):
    """Uniform (user, query, items) -> (pctr, pcvr) callable for both modes.

    The learned mode serves calibrated scores: on (query, item) pairs
    with exposure history the model output is pulled toward the
    empirical rate with weight n / (n + calib_prior), the usual
    impression-calibration step.  Unseen pairs pass through untouched,
    so generalization beyond the logs is fully the model's.
    """
    if mode == "oracle":
        return lambda u, q, items: oracle_scores(catalog, u, q, items)
    if mode == "learned":
        if params is None or cfg is None:
            raise ValueError("learned teacher needs params and config")

        def predict(u, q, items):
            ids = np.asarray(items, dtype=np.int64)
            pctr, pcvr, _ = teacher_forward(params, cfg, catalog, u, q, ids)
            if cfg.calib_prior > 0:
                n = params["tqexp_count"][q, ids]
                w = n / (n + cfg.calib_prior)
                pctr = w * params["tqctr_rate"][q, ids] + (1.0 - w) * pctr
                pcvr = w * params["tqcvr_rate"][q, ids] + (1.0 - w) * pcvr
            return pctr, pcvr

        return predict
    raise ValueError(f"unknown teacher mode {mode!r}")


def annotate_samples(samples: list[QuerySample], predictor) -> list[QuerySample]:
    """Fill teacher_pctr / teacher_pcvr on every item of every sample."""
    out = []
    for sample in samples:
        ids = sample.item_ids()
        pctr, pcvr = predictor(sample.user_id, sample.query_id, ids)
        items = tuple(
            dataclasses.replace(it, teacher_pctr=float(pctr[i]), teacher_pcvr=float(pcvr[i]))
            for i, it in enumerate(sample.items)
        )
        out.append(dataclasses.replace(sample, items=items))
    return out


def calibration_report(predictor, logs: list[RequestLog], n_bins: int = 10) -> list[dict]:
    """Observed click rate vs predicted pCTR by prediction decile on exposures."""
    preds, obs = [], []
    for log in logs:
        if not log.exposures:
            continue
        pctr, _ = predictor(log.user_id, log.query_id, np.asarray(log.exposures, dtype=np.int64))
        clicked = np.isin(np.asarray(log.exposures), np.asarray(log.clicks, dtype=np.int64))
        preds.extend(pctr.tolist())
        obs.extend(clicked.tolist())
    preds = np.asarray(preds)
    obs = np.asarray(obs, dtype=np.float64)
    edges = np.quantile(preds, np.linspace(0.0, 1.0, n_bins + 1))
    rows = []
    for b in range(n_bins):
        lo, hi = edges[b], edges[b + 1]
        mask = (preds >= lo) & ((preds <= hi) if b == n_bins - 1 else (preds < hi))
        if not mask.any():
            continue
        rows.append(
            {
                "bin": b,
                "n": int(mask.sum()),
                "pred_mean": float(preds[mask].mean()),
                "obs_rate": float(obs[mask].mean()),
            }
        )
    return rows
