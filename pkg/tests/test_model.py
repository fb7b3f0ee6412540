import numpy as np
import pytest

from prerank_lab import simulator as sim
from prerank_lab.config import ModelConfig, SimConfig
from prerank_lab.errors import NormalizationError
from prerank_lab.model import (
    VocabSpec,
    backward,
    feature_widths,
    featurize,
    forward,
    init_params,
    load_checkpoint,
    params_to_vector,
    save_checkpoint,
    score_items,
    tensor_shapes,
    vector_to_params,
    zeros_like_params,
)
from prerank_lab.model import layers as L
from prerank_lab.model.gradcheck import finite_difference_check, tiny_setup
from prerank_lab.seeding import substream

H = 1e-6


def num_grad(f, x, h=H):
    g = np.zeros_like(x, dtype=np.float64)
    flat_x = x.reshape(-1)
    flat_g = g.reshape(-1)
    for i in range(flat_x.size):
        orig = flat_x[i]
        flat_x[i] = orig + h
        up = f()
        flat_x[i] = orig - h
        down = f()
        flat_x[i] = orig
        flat_g[i] = (up - down) / (2 * h)
    return g


class TestLayerGradients:
    def test_fc(self):
        rng = substream(5, "t")
        x = rng.standard_normal((3, 4))
        W = rng.standard_normal((4, 2))
        b = rng.standard_normal(2)
        w = rng.standard_normal((3, 2))

        def loss():
            return float((L.fc_forward(x, W, b)[0] * w).sum())

        y, cache = L.fc_forward(x, W, b)
        dx, dW, db = L.fc_backward(w, cache)
        np.testing.assert_allclose(dx, num_grad(loss, x), atol=1e-8)
        np.testing.assert_allclose(dW, num_grad(loss, W), atol=1e-8)
        np.testing.assert_allclose(db, num_grad(loss, b), atol=1e-8)

    def test_layernorm(self):
        rng = substream(6, "t")
        x = rng.standard_normal((4, 5))
        gamma = rng.standard_normal(5)
        beta = rng.standard_normal(5)
        w = rng.standard_normal((4, 5))

        def loss():
            return float((L.layernorm_forward(x, gamma, beta, 1e-5)[0] * w).sum())

        _, cache = L.layernorm_forward(x, gamma, beta, 1e-5)
        dx, dg, dbta = L.layernorm_backward(w, cache)
        np.testing.assert_allclose(dx, num_grad(loss, x), atol=1e-7)
        np.testing.assert_allclose(dg, num_grad(loss, gamma), atol=1e-7)
        np.testing.assert_allclose(dbta, num_grad(loss, beta), atol=1e-7)

    def test_lrelu(self):
        x = np.array([-2.0, -0.5, 0.5, 3.0])
        y, cache = L.lrelu_forward(x, 0.01)
        np.testing.assert_allclose(y, [-0.02, -0.005, 0.5, 3.0])
        dy = np.ones(4)
        np.testing.assert_allclose(L.lrelu_backward(dy, cache), [0.01, 0.01, 1.0, 1.0])

    def test_l2norm(self):
        rng = substream(7, "t")
        x = rng.standard_normal((3, 4)) + 0.5
        w = rng.standard_normal((3, 4))

        def loss():
            return float((L.l2norm_forward(x)[0] * w).sum())

        y, cache = L.l2norm_forward(x)
        np.testing.assert_allclose(np.linalg.norm(y, axis=1), 1.0, atol=1e-12)
        np.testing.assert_allclose(L.l2norm_backward(w, cache), num_grad(loss, x), atol=1e-7)

    def test_l2norm_zero_vector_raises(self):
        with pytest.raises(NormalizationError):
            L.l2norm_forward(np.zeros((2, 3)))

    def test_attn_pool(self):
        rng = substream(8, "t")
        proj = rng.standard_normal(4)
        E = rng.standard_normal((5, 4))
        w = rng.standard_normal(4)
        scale = 0.5

        def loss():
            return float(L.attn_pool_forward(proj, E, scale)[0] @ w)

        pooled, cache = L.attn_pool_forward(proj, E, scale)
        A = cache[2]
        assert A.shape == (5,)
        np.testing.assert_allclose(A.sum(), 1.0, atol=1e-12)
        dproj, dE = L.attn_pool_backward(w, cache)
        np.testing.assert_allclose(dproj, num_grad(loss, proj), atol=1e-7)
        np.testing.assert_allclose(dE, num_grad(loss, E), atol=1e-7)

    def test_self_attn_max(self):
        rng = substream(9, "t")
        E = rng.standard_normal((4, 3))
        w = rng.standard_normal(3)
        scale = 1.0 / np.sqrt(3)

        def loss():
            return float(L.self_attn_max_forward(E, scale)[0] @ w)

        pooled, cache = L.self_attn_max_forward(E, scale)
        A = cache[1]
        np.testing.assert_allclose(A.sum(axis=1), 1.0, atol=1e-12)
        dE = L.self_attn_max_backward(w, cache)
        np.testing.assert_allclose(dE, num_grad(loss, E), atol=1e-6)

    def test_single_row_self_attn_is_identity(self):
        E = np.array([[1.5, -2.0]])
        pooled, _ = L.self_attn_max_forward(E, 1.0)
        np.testing.assert_array_equal(pooled, E[0])


@pytest.fixture(scope="module")
def small_world():
    sim_cfg = SimConfig(n_users=10, n_queries=8, n_items=120, n_categories=5, n_requests=10, matching_pool=60, prerank_size=20)
    catalog = sim.gen_catalog(sim_cfg, 11)
    cfg = ModelConfig()
    vocab = VocabSpec.from_sim_config(sim_cfg)
    params = init_params(cfg, vocab, 11)
    return catalog, cfg, vocab, params


class TestTower:
    def test_output_unit_norms(self, small_world):
        catalog, cfg, _, params = small_world
        feats = featurize(catalog, 0, 0, [0, 1, 2, 3])
        _, cache = forward(params, cfg, feats)
        np.testing.assert_allclose(np.linalg.norm(cache["vq"]), 1.0, atol=1e-6)
        np.testing.assert_allclose(np.linalg.norm(cache["vp"], axis=1), 1.0, atol=1e-6)

    def test_scores_bounded_by_cosine_over_temperature(self, small_world):
        catalog, cfg, _, params = small_world
        feats = featurize(catalog, 1, 2, list(range(30)))
        z = score_items(params, cfg, feats)
        assert np.all(np.abs(z) <= 1.0 / cfg.temperature + 1e-9)

    def test_attention_weights_normalized(self, small_world):
        catalog, cfg, _, params = small_world
        feats = featurize(catalog, 2, 3, [5, 6])
        _, cache = forward(params, cfg, feats)
        np.testing.assert_allclose(cache["self_attn"][1].sum(axis=1), 1.0, atol=1e-9)
        np.testing.assert_allclose(cache["q_attn_pool"][2].sum(), 1.0, atol=1e-9)
        for entry in cache["beh"].values():
            if entry is not None:
                np.testing.assert_allclose(entry[3][2].sum(), 1.0, atol=1e-9)

    def test_duplicate_items_score_identically(self, small_world):
        catalog, cfg, _, params = small_world
        feats = featurize(catalog, 0, 1, [7, 7, 9])
        z = score_items(params, cfg, feats)
        assert z[0] == z[1]

    def test_item_vectors_independent_of_query(self, small_world):
        # the towers only meet at the dot product, so item vectors must not
        # change when the user or query does
        catalog, cfg, _, params = small_world
        items = [3, 4, 5]
        _, cache_a = forward(params, cfg, featurize(catalog, 0, 0, items))
        _, cache_b = forward(params, cfg, featurize(catalog, 5, 7, items))
        np.testing.assert_array_equal(cache_a["vp"], cache_b["vp"])

    def test_batch_matches_single_item_scoring(self, small_world):
        catalog, cfg, _, params = small_world
        items = [11, 23, 57]
        together = score_items(params, cfg, featurize(catalog, 3, 2, items))
        alone = [score_items(params, cfg, featurize(catalog, 3, 2, [i]))[0] for i in items]
        np.testing.assert_allclose(together, alone, atol=1e-12)

    def test_mean_pooled_terms_hand_value(self):
        # two orthogonal unit term embeddings average to (0.5, 0.5)
        cfg = ModelConfig(d_term=2, d_proj=2, d_profile=2, d_item_id=2, d_category=2, d_brand=2, d_freq=2, hidden=(3, 3, 3), out_dim=2)
        vocab = VocabSpec(n_terms=4, n_profiles=3, n_profile_features=2, n_items=5, n_categories=2, n_brands=2, n_freq_buckets=2)
        params = init_params(cfg, vocab, 1)
        params["emb_query_term"][0] = [1.0, 0.0]
        params["emb_query_term"][1] = [0.0, 1.0]
        from prerank_lab.model.tower import Features

        feats = Features(
            user_id=0,
            query_id=0,
            profile_ids=np.array([0, 1]),
            query_terms=np.array([0, 1]),
            query_cats=np.array([0]),
            freq_bucket=0,
            beh_items={p: np.array([], dtype=np.int64) for p in ("recent", "short", "long")},
            beh_cats={p: np.array([], dtype=np.int64) for p in ("recent", "short", "long")},
            item_ids=np.array([0]),
            item_cats=np.array([0]),
            item_brands=np.array([0]),
            title_terms=(np.array([2]),),
        )
        _, cache = forward(params, cfg, feats)
        x_q = cache["q_mlp"][0][0][0]
        widths = feature_widths(cfg, vocab)
        start = widths["user"] + widths["side"]
        np.testing.assert_allclose(x_q[start : start + 2], [0.5, 0.5], atol=1e-12)

    def test_empty_behavior_partitions_handled(self, small_world):
        catalog, cfg, vocab, params = small_world
        from prerank_lab.model.tower import Features

        feats = Features(
            user_id=0,
            query_id=0,
            profile_ids=np.array([0, 1, 2]),
            query_terms=np.array([0]),
            query_cats=np.array([0]),
            freq_bucket=0,
            beh_items={p: np.array([], dtype=np.int64) for p in ("recent", "short", "long")},
            beh_cats={p: np.array([], dtype=np.int64) for p in ("recent", "short", "long")},
            item_ids=np.array([0, 1]),
            item_cats=catalog.item_category[[0, 1]],
            item_brands=catalog.item_brand[[0, 1]],
            title_terms=(np.array([0]), np.array([1])),
        )
        z, cache = forward(params, cfg, feats)
        assert np.all(np.isfinite(z))
        assert all(entry is None for entry in cache["beh"].values())
        grads = zeros_like_params(params)
        backward(params, cfg, cache, np.ones(2), grads)
        for part in ("recent", "short", "long"):
            assert not grads[f"beh_W_{part}"].any()

    def test_zero_upstream_gradient_gives_zero_grads(self, small_world):
        catalog, cfg, _, params = small_world
        feats = featurize(catalog, 1, 1, [2, 3, 4])
        _, cache = forward(params, cfg, feats)
        grads = zeros_like_params(params)
        backward(params, cfg, cache, np.zeros(3), grads)
        assert all(not g.any() for g in grads.values())


class TestParams:
    def test_vector_round_trip(self, small_world):
        _, cfg, vocab, params = small_world
        vec = params_to_vector(params)
        again = vector_to_params(vec, params)
        assert set(again) == set(params)
        for name in params:
            np.testing.assert_array_equal(again[name], params[name])

    def test_init_deterministic_and_seed_sensitive(self, small_world):
        _, cfg, vocab, params = small_world
        same = init_params(cfg, vocab, 11)
        other = init_params(cfg, vocab, 12)
        for name in params:
            np.testing.assert_array_equal(same[name], params[name])
        assert any(not np.array_equal(other[n], params[n]) for n in params)

    def test_norm_gains_and_biases(self, small_world):
        _, _, _, params = small_world
        assert np.all(params["q_ln1_g"] == 1.0)
        assert np.all(params["q_ln1_b"] == 0.0)
        assert np.all(params["p_fc1_b"] == 0.0)

    def test_shapes_trace_feature_widths(self, small_world):
        _, cfg, vocab, _ = small_world
        shapes = tensor_shapes(cfg, vocab)
        widths = feature_widths(cfg, vocab)
        assert shapes["q_fc1_W"] == (widths["query_in"], cfg.hidden[0])
        assert shapes["p_fc1_W"] == (widths["item_in"], cfg.hidden[0])
        assert shapes["q_out_W"] == (cfg.hidden[-1], cfg.out_dim)
        assert widths["query_in"] == widths["user"] + widths["side"] + widths["semantic"] + widths["behavior"]

    def test_checkpoint_round_trip_and_byte_stability(self, small_world, tmp_path):
        _, cfg, vocab, params = small_world
        a = tmp_path / "a.ckpt"
        b = tmp_path / "b.ckpt"
        meta = {"temperature": cfg.temperature}
        save_checkpoint(a, params, kind="two_tower", meta=meta)
        save_checkpoint(b, params, kind="two_tower", meta=meta)
        assert a.read_bytes() == b.read_bytes()
        loaded, kind, got_meta = load_checkpoint(a)
        assert kind == "two_tower"
        assert got_meta == meta
        for name in params:
            np.testing.assert_array_equal(loaded[name], params[name])

    def test_checkpoint_rejects_garbage(self, tmp_path):
        path = tmp_path / "x.ckpt"
        path.write_bytes(b"NOPE" + b"\x00" * 16)
        with pytest.raises(ValueError):
            load_checkpoint(path)


class TestFiniteDifference:
    @pytest.mark.parametrize("seed", [0, 1, 2, 3, 4])
    def test_analytic_gradient_matches(self, seed):
        result = finite_difference_check(seed)
        assert result.ok(1e-4), f"{result.worst_name}: {result.max_rel_err}"

    def test_setups_cover_degenerate_shapes(self):
        saw_single_term = saw_empty_partition = saw_repeat = False
        for seed in range(30):
            _, _, _, feats, _ = tiny_setup(seed)
            saw_single_term |= feats.query_terms.size == 1
            saw_empty_partition |= any(v.size == 0 for v in feats.beh_items.values())
            saw_repeat |= len(set(feats.item_ids.tolist())) < feats.item_ids.size
        assert saw_single_term and saw_empty_partition and saw_repeat
