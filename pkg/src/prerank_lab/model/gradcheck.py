"""Finite-difference verification of the analytic backward pass.

Builds a randomly shaped miniature model (tiny vocabularies and widths,
so every coordinate can be probed), scores a random feature bundle, and
compares the analytic gradient of a fixed linear functional of the
scores against central differences.  The feature draw deliberately
includes the awkward cases: single-term queries, empty behavior
partitions, repeated candidate items.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..config import ModelConfig
from ..seeding import substream
from .params import VocabSpec, init_params, params_to_vector, vector_to_params, zeros_like_params
from .tower import Features, backward, forward


@dataclass
class GradCheckResult:
    max_rel_err: float
    worst_name: str
    worst_index: int
    n_coords: int

    def ok(self, tol: float = 1e-4) -> bool:
        return self.max_rel_err <= tol


def tiny_setup(seed: int):
    """Random miniature (config, vocab, params, features, functional)."""
    rng = substream(seed, "gradcheck")
    cfg = ModelConfig(
        d_term=int(rng.integers(2, 5)),
        d_proj=0,  # patched below: must equal d_term
        d_profile=int(rng.integers(2, 4)),
        d_item_id=int(rng.integers(2, 5)),
        d_category=int(rng.integers(2, 4)),
        d_brand=int(rng.integers(2, 4)),
        d_freq=int(rng.integers(2, 4)),
        hidden=(int(rng.integers(4, 7)), int(rng.integers(3, 6)), int(rng.integers(3, 5))),
        out_dim=int(rng.integers(2, 5)),
        temperature=0.05,
    )
    cfg.d_proj = cfg.d_term
    cfg.validate()
    vocab = VocabSpec(
        n_terms=int(rng.integers(4, 8)),
        n_profiles=int(rng.integers(3, 6)),
        n_profile_features=int(rng.integers(1, 4)),
        n_items=int(rng.integers(5, 10)),
        n_categories=int(rng.integers(2, 5)),
        n_brands=int(rng.integers(2, 5)),
        n_freq_buckets=int(rng.integers(2, 4)),
    )
    params = init_params(cfg, vocab, seed)

    n_items = int(rng.integers(2, 7))
    item_ids = rng.integers(vocab.n_items, size=n_items)  # repeats allowed
    query_cats = np.unique(rng.integers(vocab.n_categories, size=int(rng.integers(1, 3))))
    beh_items = {}
    beh_cats = {}
    for part in ("recent", "short", "long"):
        m = int(rng.integers(0, 6))  # zero-length partitions exercised
        beh_items[part] = rng.integers(vocab.n_items, size=m)
        beh_cats[part] = rng.integers(vocab.n_categories, size=m)
    feats = Features(
        user_id=0,
        query_id=0,
        profile_ids=rng.integers(vocab.n_profiles, size=vocab.n_profile_features),
        query_terms=rng.integers(vocab.n_terms, size=int(rng.integers(1, 5))),
        query_cats=query_cats,
        freq_bucket=int(rng.integers(vocab.n_freq_buckets)),
        beh_items=beh_items,
        beh_cats=beh_cats,
        item_ids=item_ids,
        item_cats=rng.integers(vocab.n_categories, size=n_items),
        item_brands=rng.integers(vocab.n_brands, size=n_items),
        title_terms=tuple(
            rng.integers(vocab.n_terms, size=int(rng.integers(1, 4))) for _ in range(n_items)
        ),
    )
    w = rng.standard_normal(n_items)
    return cfg, vocab, params, feats, w


def finite_difference_check(seed: int, h: float = 1e-5) -> GradCheckResult:
    """Compare analytic and central-difference gradients coordinate by coordinate."""
    cfg, _, params, feats, w = tiny_setup(seed)

    scores, cache = forward(params, cfg, feats)
    grads = zeros_like_params(params)
    backward(params, cfg, cache, w, grads)
    analytic = params_to_vector(grads)

    vec = params_to_vector(params)
    template = params

    def loss_at(v: np.ndarray) -> float:
        p = vector_to_params(v, template)
        z, _ = forward(p, cfg, feats)
        return float(w @ z)

    names = []
    for name in sorted(params):
        names.extend([name] * params[name].size)

    max_rel = 0.0
    worst = 0
    for i in range(vec.size):
        probe = vec.copy()
        probe[i] = vec[i] + h
        up = loss_at(probe)
        probe[i] = vec[i] - h
        down = loss_at(probe)
        numeric = (up - down) / (2.0 * h)
        # the 1e-3 floor turns the test absolute (|a - n| <= tol * 1e-3)
        # for gradients near the finite-difference noise floor
        denom = max(abs(analytic[i]), abs(numeric), 1e-3)
        rel = abs(analytic[i] - numeric) / denom
        if rel > max_rel:
            max_rel = rel
            worst = i
    return GradCheckResult(
        max_rel_err=max_rel, worst_name=names[worst], worst_index=worst, n_coords=vec.size
    )
