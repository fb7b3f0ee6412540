"""Two-tower scorer with a hand-written backward pass.

The query tower condenses the request context into one vector: the
user's profile embeddings, query side features (category, frequency
bucket), a three-part query semantic unit (mean-pooled terms,
max-pooled self-attention over terms, and user-conditioned attention
over terms), and attention-pooled behavior summaries for three history
windows (recent, short, long), where behaviors are first filtered to
the query's categories.  The item tower concatenates item id, category,
brand, and mean-pooled title term embeddings.  Both towers run the same
MLP shape (three FC + LayerNorm + LeakyReLU blocks, then a linear
projection) and l2-normalize their outputs; the score is the cosine
similarity divided by the temperature.

The towers stay separate end to end: no feature mixes user/query and
item signals before the final dot product, which is what lets item
vectors be cached and scored by nearest-neighbor lookup at serving
scale.  ``forward`` keeps every intermediate needed by ``backward``,
and ``backward`` accumulates parameter gradients into a caller-owned
dict so batches can share one gradient buffer.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..config import ModelConfig
from ..errors import EmptyQueryError
from ..simulator import Catalog
from .layers import (
    attn_pool_backward,
    attn_pool_forward,
    embed_rows,
    embed_scatter,
    fc_backward,
    fc_forward,
    l2norm_backward,
    l2norm_forward,
    layernorm_backward,
    layernorm_forward,
    lrelu_backward,
    lrelu_forward,
    self_attn_max_backward,
    self_attn_max_forward,
)
from .params import BEHAVIOR_PARTITIONS


@dataclass
class Features:
    """Integer feature bundle for one request and its candidate items."""

    user_id: int
    query_id: int
    profile_ids: np.ndarray
    query_terms: np.ndarray
    query_cats: np.ndarray
    freq_bucket: int
    beh_items: dict[str, np.ndarray]
    beh_cats: dict[str, np.ndarray]
    item_ids: np.ndarray
    item_cats: np.ndarray
    item_brands: np.ndarray
    title_terms: tuple[np.ndarray, ...]


def featurize(catalog: Catalog, user_id: int, query_id: int, item_ids) -> Features:
    catalog.check_ids(user_id, query_id)
    user = catalog.users[user_id]
    query = catalog.queries[query_id]
    if len(query.term_ids) == 0:
        raise EmptyQueryError(f"query {query_id} has no terms")
    ids = np.asarray(item_ids, dtype=np.int64)
    beh_items = {
        "recent": np.asarray(user.behaviors_recent, dtype=np.int64),
        "short": np.asarray(user.behaviors_short, dtype=np.int64),
        "long": np.asarray(user.behaviors_long, dtype=np.int64),
    }
    beh_cats = {part: catalog.item_category[v] for part, v in beh_items.items()}
    return Features(
        user_id=user_id,
        query_id=query_id,
        profile_ids=np.asarray(user.profile_ids, dtype=np.int64),
        query_terms=np.asarray(query.term_ids, dtype=np.int64),
        query_cats=np.asarray(query.category_ids, dtype=np.int64),
        freq_bucket=query.freq_bucket,
        beh_items=beh_items,
        beh_cats=beh_cats,
        item_ids=ids,
        item_cats=catalog.item_category[ids],
        item_brands=catalog.item_brand[ids],
        title_terms=tuple(np.asarray(catalog.items[int(i)].title_terms, dtype=np.int64) for i in ids),
    )


# ----------------------------------------------------------------------
# shared MLP trunk


def _mlp_forward(params: dict, cfg: ModelConfig, prefix: str, x: np.ndarray):
    caches = []
    h = x
    for i in range(1, len(cfg.hidden) + 1):
        h, c_fc = fc_forward(h, params[f"{prefix}_fc{i}_W"], params[f"{prefix}_fc{i}_b"])
        h, c_ln = layernorm_forward(h, params[f"{prefix}_ln{i}_g"], params[f"{prefix}_ln{i}_b"], cfg.ln_eps)
        h, c_act = lrelu_forward(h, cfg.lrelu_slope)
        caches.append((c_fc, c_ln, c_act))
    h, c_out = fc_forward(h, params[f"{prefix}_out_W"], params[f"{prefix}_out_b"])
    caches.append(c_out)
    return h, caches


def _mlp_backward(dh: np.ndarray, cfg: ModelConfig, prefix: str, caches, grads: dict) -> np.ndarray:
    dh, dW, db = fc_backward(dh, caches[-1])
    grads[f"{prefix}_out_W"] += dW
    grads[f"{prefix}_out_b"] += db
    for i in range(len(cfg.hidden), 0, -1):
        c_fc, c_ln, c_act = caches[i - 1]
        dh = lrelu_backward(dh, c_act)
        dh, dg, dbeta = layernorm_backward(dh, c_ln)
        grads[f"{prefix}_ln{i}_g"] += dg
        grads[f"{prefix}_ln{i}_b"] += dbeta
        dh, dW, db = fc_backward(dh, c_fc)
        grads[f"{prefix}_fc{i}_W"] += dW
        grads[f"{prefix}_fc{i}_b"] += db
    return dh


# ----------------------------------------------------------------------
# full forward


def forward(params: dict, cfg: ModelConfig, feats: Features):
    """Score all candidate items for one request.

    Returns (scores, cache) where scores has one cosine/temperature
    logit per item in ``feats.item_ids``.
    """
    cache: dict = {"feats": feats}

    # query semantic unit
    E = embed_rows(params["emb_query_term"], feats.query_terms)
    nt, d = E.shape
    scale = 1.0 / np.sqrt(d)
    Qm = E.mean(axis=0)
    Qs, cache["self_attn"] = self_attn_max_forward(E, scale)
    eu = embed_rows(params["emb_profile"], feats.profile_ids).ravel()
    proj, cache["q_attn_fc"] = fc_forward(eu, params["q_attn_W"], params["q_attn_b"])
    Qp, cache["q_attn_pool"] = attn_pool_forward(proj, E, scale)
    Qo = np.concatenate([Qm, Qs, Qp])
    cache["E"] = E
    cache["eu_width"] = eu.size

    # side features
    cat_rows = embed_rows(params["emb_category"], feats.query_cats)
    side_cat = cat_rows.mean(axis=0)
    side_freq = params["emb_freq"][feats.freq_bucket]

    # behavior summaries, category-filtered per partition
    beh_scale = 1.0 / np.sqrt(cfg.d_behavior)
    b_parts = []
    cache["beh"] = {}
    for part in BEHAVIOR_PARTITIONS:
        cats = feats.beh_cats[part]
        keep = np.isin(cats, feats.query_cats)
        ids_f = feats.beh_items[part][keep]
        cats_f = cats[keep]
        if ids_f.size == 0:
            b_parts.append(np.zeros(cfg.d_behavior))
            cache["beh"][part] = None
            continue
        Hb = np.concatenate(
            [embed_rows(params["emb_item_id"], ids_f), embed_rows(params["emb_category"], cats_f)], axis=1
        )
        projb, c_fc = fc_forward(Qo, params[f"beh_W_{part}"], params[f"beh_b_{part}"])
        pooled, c_pool = attn_pool_forward(projb, Hb, beh_scale)
        b_parts.append(pooled)
        cache["beh"][part] = (ids_f, cats_f, c_fc, c_pool)

    x_q = np.concatenate([eu, side_cat, side_freq, Qo, *b_parts])
    hq, cache["q_mlp"] = _mlp_forward(params, cfg, "q", x_q)
    vq, cache["q_norm"] = l2norm_forward(hq)

    # item tower, batched over candidates
    title_mean = np.stack(
        [embed_rows(params["emb_title_term"], t).mean(axis=0) for t in feats.title_terms]
    )
    x_p = np.concatenate(
        [
            embed_rows(params["emb_item_id"], feats.item_ids),
            embed_rows(params["emb_category"], feats.item_cats),
            embed_rows(params["emb_brand"], feats.item_brands),
            title_mean,
        ],
        axis=1,
    )
    hp, cache["p_mlp"] = _mlp_forward(params, cfg, "p", x_p)
    vp, cache["p_norm"] = l2norm_forward(hp)

    scores = (vp @ vq) / cfg.temperature
    cache["vq"] = vq
    cache["vp"] = vp
    return scores, cache


def backward(params: dict, cfg: ModelConfig, cache: dict, dscores: np.ndarray, grads: dict) -> None:
    """Accumulate d(loss)/d(params) into ``grads`` given d(loss)/d(scores)."""
    feats: Features = cache["feats"]
    vq, vp = cache["vq"], cache["vp"]
    dscores = np.asarray(dscores, dtype=np.float64)

    dvq = (dscores @ vp) / cfg.temperature
    dvp = np.outer(dscores, vq) / cfg.temperature

    # item tower
    dhp = l2norm_backward(dvp, cache["p_norm"])
    dx_p = _mlp_backward(dhp, cfg, "p", cache["p_mlp"], grads)
    o1 = cfg.d_item_id
    o2 = o1 + cfg.d_category
    o3 = o2 + cfg.d_brand
    embed_scatter(grads["emb_item_id"], feats.item_ids, dx_p[:, :o1])
    embed_scatter(grads["emb_category"], feats.item_cats, dx_p[:, o1:o2])
    embed_scatter(grads["emb_brand"], feats.item_brands, dx_p[:, o2:o3])
    for i, terms in enumerate(feats.title_terms):
        embed_scatter(grads["emb_title_term"], terms, np.repeat(dx_p[i : i + 1, o3:] / len(terms), len(terms), axis=0))

    # query tower
    dhq = l2norm_backward(dvq, cache["q_norm"])
    dx_q = _mlp_backward(dhq, cfg, "q", cache["q_mlp"], grads)

    d_eu_w = cache["eu_width"]
    d = cfg.d_term
    s0 = d_eu_w
    s1 = s0 + cfg.d_category
    s2 = s1 + cfg.d_freq
    s3 = s2 + 3 * d
    deu = dx_q[:s0].copy()
    dside_cat = dx_q[s0:s1]
    dside_freq = dx_q[s1:s2]
    dQo = dx_q[s2:s3].copy()
    dB = dx_q[s3:]

    # behavior partitions feed back into both their tables and Qo
    for k, part in enumerate(BEHAVIOR_PARTITIONS):
        entry = cache["beh"][part]
        if entry is None:
            continue
        ids_f, cats_f, c_fc, c_pool = entry
        dpooled = dB[k * cfg.d_behavior : (k + 1) * cfg.d_behavior]
        dprojb, dHb = attn_pool_backward(dpooled, c_pool)
        dQo_part, dWp, dbp = fc_backward(dprojb, c_fc)
        grads[f"beh_W_{part}"] += dWp
        grads[f"beh_b_{part}"] += dbp
        dQo += dQo_part
        embed_scatter(grads["emb_item_id"], ids_f, dHb[:, : cfg.d_item_id])
        embed_scatter(grads["emb_category"], cats_f, dHb[:, cfg.d_item_id :])

    # semantic unit
    E = cache["E"]
    nt = E.shape[0]
    dQm, dQs, dQp = dQo[:d], dQo[d : 2 * d], dQo[2 * d :]
    dE = np.tile(dQm / nt, (nt, 1))
    dE += self_attn_max_backward(dQs, cache["self_attn"])
    dproj, dE_pool = attn_pool_backward(dQp, cache["q_attn_pool"])
    dE += dE_pool
    deu_attn, dW1, db1 = fc_backward(dproj, cache["q_attn_fc"])
    grads["q_attn_W"] += dW1
    grads["q_attn_b"] += db1
    deu += deu_attn
    embed_scatter(grads["emb_query_term"], feats.query_terms, dE)

    # profile, side features
    embed_scatter(
        grads["emb_profile"], feats.profile_ids, deu.reshape(len(feats.profile_ids), -1)
    )
    embed_scatter(
        grads["emb_category"],
        feats.query_cats,
        np.tile(dside_cat / len(feats.query_cats), (len(feats.query_cats), 1)),
    )
    grads["emb_freq"][feats.freq_bucket] += dside_freq


def score_items(params: dict, cfg: ModelConfig, feats: Features) -> np.ndarray:
    scores, _ = forward(params, cfg, feats)
    return scores
