import dataclasses
import math

import numpy as np
import pytest

from prerank_lab import simulator as sim
from prerank_lab.config import SimConfig
from prerank_lab.errors import UnknownIdError

SEED = 1301


@pytest.fixture(scope="module")
def catalog():
    return sim.gen_catalog(SimConfig(), SEED)


@pytest.fixture(scope="module")
def world(catalog):
    logs, stats = sim.run_cascade_logging(catalog, SEED)
    return catalog, logs, stats


class TestCatalog:
    def test_deterministic(self, catalog):
        again = sim.gen_catalog(SimConfig(), SEED)
        assert again.users == catalog.users
        assert again.queries == catalog.queries
        assert again.items == catalog.items

    def test_seed_changes_catalog(self, catalog):
        other = sim.gen_catalog(SimConfig(), SEED + 1)
        assert other.items != catalog.items

    def test_cardinalities(self, catalog):
        cfg = catalog.config
        assert len(catalog.users) == cfg.n_users
        assert len(catalog.queries) == cfg.n_queries
        assert len(catalog.items) == cfg.n_items

    def test_vocabulary_ranges(self, catalog):
        cfg = catalog.config
        for item in catalog.items:
            assert 0 <= item.category_id < cfg.n_categories
            assert 0 <= item.brand_id < cfg.n_brands
            assert all(0 <= t < cfg.term_vocab for t in item.title_terms)
        for query in catalog.queries:
            assert 1 <= len(query.category_ids) <= cfg.query_categories_max
            assert 0 <= query.freq_bucket < cfg.n_freq_buckets
            assert all(0 <= t < cfg.term_vocab for t in query.term_ids)
        for user in catalog.users:
            assert len(user.profile_ids) == cfg.n_profile_features
            assert all(0 <= p < cfg.profile_vocab for p in user.profile_ids)
            behaviors = user.behaviors_recent + user.behaviors_short + user.behaviors_long
            assert all(0 <= b < cfg.n_items for b in behaviors)

    def test_latents_unit_norm(self, catalog):
        for stack in (catalog.user_latent, catalog.query_latent, catalog.item_latent):
            np.testing.assert_allclose(np.linalg.norm(stack, axis=1), 1.0, atol=1e-12)

    def test_query_terms_come_from_primary_category_block(self, catalog):
        cfg = catalog.config
        for query in catalog.queries:
            block = query.category_ids[0] * cfg.terms_per_category
            assert all(block <= t < block + cfg.terms_per_category for t in query.term_ids)


class TestProbabilities:
    def test_ranges(self, catalog):
        cfg = catalog.config
        rel, pclick, pcvr = sim.true_probabilities(catalog, 0, 0)
        assert rel.shape == (cfg.n_items,)
        assert np.all((rel > 0) & (rel < 1))
        assert np.all((pclick >= cfg.click_floor) & (pclick <= cfg.click_ceil))
        assert np.all((pcvr >= cfg.cvr_floor) & (pcvr <= cfg.cvr_ceil))

    def test_monotone_in_relevance(self, catalog):
        rel, pclick, pcvr = sim.true_probabilities(catalog, 3, 5)
        order = np.argsort(rel)
        assert np.all(np.diff(pclick[order]) >= 0)
        assert np.all(np.diff(pcvr[order]) >= 0)

    def test_subset_matches_full(self, catalog):
        ids = [5, 17, 1999]
        rel_full, pc_full, pv_full = sim.true_probabilities(catalog, 1, 2)
        rel_sub, pc_sub, pv_sub = sim.true_probabilities(catalog, 1, 2, ids)
        np.testing.assert_array_equal(rel_sub, rel_full[ids])
        np.testing.assert_array_equal(pc_sub, pc_full[ids])
        np.testing.assert_array_equal(pv_sub, pv_full[ids])

    def test_unknown_ids_raise(self, catalog):
        with pytest.raises(UnknownIdError):
            sim.true_relevance(catalog, len(catalog.users), 0)
        with pytest.raises(UnknownIdError):
            sim.true_relevance(catalog, 0, -1)

    def test_category_match_lifts_relevance(self, catalog):
        query = catalog.queries[0]
        rel = sim.true_relevance(catalog, 0, 0)
        match = np.isin(catalog.item_category, query.category_ids)
        assert rel[match].mean() > rel[~match].mean() + 0.3


class TestCascade:
    def test_stage_cardinalities(self, world):
        catalog, logs, _ = world
        cfg = catalog.config
        for log in logs:
            assert len(log.matching_out) == cfg.matching_pool
            assert len(log.prerank_out) == cfg.prerank_size
            assert len(log.exposures) == cfg.exposure_cap

    def test_containment_chain(self, world):
        _, logs, _ = world
        for log in logs:
            matching = set(log.matching_out)
            prerank = set(log.prerank_out)
            exposed = set(log.exposures)
            clicked = set(log.clicks)
            bought = set(log.purchases)
            assert bought <= clicked <= exposed <= prerank <= matching
            assert len(matching) == len(log.matching_out)
            assert len(prerank) == len(log.prerank_out)

    def test_deterministic(self, world):
        catalog, logs, _ = world
        again, _ = sim.run_cascade_logging(catalog, SEED)
        assert again == logs

    def test_seed_changes_outcomes(self, world):
        catalog, logs, _ = world
        other, _ = sim.run_cascade_logging(catalog, SEED + 1)
        assert [l.purchases for l in other] != [l.purchases for l in logs]

    def test_timestamps_sorted_and_ids_sequential(self, world):
        _, logs, _ = world
        ts = [log.timestamp for log in logs]
        assert ts == sorted(ts)
        assert [log.request_id for log in logs] == list(range(len(logs)))

    def test_purchase_times_follow_request(self, world):
        _, logs, _ = world
        for log in logs:
            assert len(log.purchase_ts) == len(log.purchases)
            for pts in log.purchase_ts:
                assert log.timestamp < pts <= log.timestamp + 600.0

    def test_purchase_rate_in_desk_band(self, world):
        _, logs, stats = world
        per_request = stats.n_purchases / stats.n_requests
        assert 0.2 <= per_request <= 0.8

    def test_prerank_stage_reproducible(self, world):
        catalog, logs, _ = world
        for log in logs[:100]:
            pool, scores = sim.logging_prerank_scores(catalog, SEED, log)
            top = sim._top_ids(pool, scores, catalog.config.prerank_size)
            assert tuple(int(x) for x in top) == log.prerank_out


class TestSelectionBias:
    def test_mean_relevance_rises_through_stages(self, world):
        catalog, logs, _ = world
        r_all, r_match, r_pre, r_exp = [], [], [], []
        for log in logs:
            rel = sim.true_relevance(catalog, log.user_id, log.query_id)
            r_all.append(rel.mean())
            r_match.append(rel[list(log.matching_out)].mean())
            r_pre.append(rel[list(log.prerank_out)].mean())
            r_exp.append(rel[list(log.exposures)].mean())
        assert len(logs) >= 500
        assert np.mean(r_match) > np.mean(r_all) + 0.10
        assert np.mean(r_pre) > np.mean(r_match) + 0.30
        assert np.mean(r_exp) > np.mean(r_pre) + 0.02


class TestEventCalibration:
    def test_click_and_purchase_frequencies_match_probabilities(self, world):
        # the logged events over ~8000 exposures form a Monte-Carlo sample;
        # totals must sit within 4 sigma of the model's expectations
        catalog, logs, stats = world
        exp_clicks = exp_purch = var_clicks = var_purch = 0.0
        for log in logs:
            _, pclick, pcvr = sim.true_probabilities(catalog, log.user_id, log.query_id, list(log.exposures))
            pboth = pclick * pcvr
            exp_clicks += pclick.sum()
            exp_purch += pboth.sum()
            var_clicks += (pclick * (1 - pclick)).sum()
            var_purch += (pboth * (1 - pboth)).sum()
        assert abs(stats.n_clicks - exp_clicks) <= 4 * math.sqrt(var_clicks)
        assert abs(stats.n_purchases - exp_purch) <= 4 * math.sqrt(var_purch)

    def test_click_rate_calibrated_per_decile(self, world):
        catalog, logs, _ = world
        probs, hits = [], []
        for log in logs:
            _, pclick, _ = sim.true_probabilities(catalog, log.user_id, log.query_id, list(log.exposures))
            clicked = np.isin(np.array(log.exposures), np.array(log.clicks, dtype=np.int64))
            probs.extend(pclick)
            hits.extend(clicked)
        probs = np.array(probs)
        hits = np.array(hits, dtype=np.float64)
        edges = np.quantile(probs, np.linspace(0, 1, 6))
        for lo, hi in zip(edges[:-1], edges[1:]):
            mask = (probs >= lo) & (probs <= hi)
            if mask.sum() < 50:
                continue
            p = probs[mask]
            sigma = math.sqrt((p * (1 - p)).sum()) / mask.sum()
            assert abs(hits[mask].mean() - p.mean()) <= 4 * sigma + 1e-9


class TestOtherScenario:
    def test_events_exist_and_counted(self, world):
        _, logs, stats = world
        total = sum(len(log.other_scenario_purchases) for log in logs)
        assert total == stats.n_other_purchases
        assert total > 100

    def test_carrier_is_latest_prior_request(self, world):
        _, logs, _ = world
        by_user = {}
        for log in logs:
            by_user.setdefault(log.user_id, []).append(log)
        for log in logs:
            mine = by_user[log.user_id]
            pos = mine.index(log)
            for event in log.other_scenario_purchases:
                assert event.ts >= log.timestamp
                if pos + 1 < len(mine):
                    assert mine[pos + 1].timestamp > event.ts

    def test_scenario_tags_and_items_valid(self, world):
        catalog, logs, _ = world
        for log in logs:
            for event in log.other_scenario_purchases:
                assert event.scenario in sim.OTHER_SCENARIOS
                assert 0 <= event.item_id < catalog.config.n_items

    def test_rate_tracks_poisson_mean(self, world):
        catalog, logs, stats = world
        cfg = catalog.config
        lam = cfg.other_purchase_rate * cfg.window_days * cfg.n_users
        kept_plus_dropped = stats.n_other_purchases + stats.n_other_dropped
        assert abs(kept_plus_dropped - lam) <= 4 * math.sqrt(lam)


class TestSerialization:
    def test_catalog_round_trip(self, catalog, tmp_path):
        path = tmp_path / "catalog.json"
        sim.save_catalog(catalog, path)
        again = sim.load_catalog(path)
        assert again.users == catalog.users
        assert again.queries == catalog.queries
        assert again.items == catalog.items
        assert again.config == catalog.config
        # relevance must be bitwise identical after a reload
        np.testing.assert_array_equal(
            sim.true_relevance(again, 2, 3), sim.true_relevance(catalog, 2, 3)
        )

    def test_logs_round_trip(self, world, tmp_path):
        _, logs, _ = world
        path = tmp_path / "logs.jsonl"
        sim.save_logs(logs, path, seed=SEED, config_digest="abc")
        again, header = sim.load_logs(path)
        assert again == logs
        assert header["seed"] == SEED
        assert header["config_digest"] == "abc"
        assert header["n_requests"] == len(logs)

    def test_wrong_format_rejected(self, tmp_path):
        path = tmp_path / "bogus.json"
        path.write_text('{"format": "something-else"}\n')
        with pytest.raises(ValueError):
            sim.load_catalog(path)
        with pytest.raises(ValueError):
            sim.load_logs(path)

    def test_json_dataclass_fields_are_plain_python(self, world):
        _, logs, _ = world
        d = dataclasses.asdict(logs[0])
        assert all(isinstance(x, int) for x in d["matching_out"])
        assert isinstance(d["timestamp"], float)
