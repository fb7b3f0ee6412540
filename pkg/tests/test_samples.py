import dataclasses

import numpy as np
import pytest

from prerank_lab import samples as smp
from prerank_lab import simulator as sim
from prerank_lab.config import SampleConfig, SimConfig
from prerank_lab.errors import LabelingError
from prerank_lab.simulator import true_relevance

SEED = 424


@pytest.fixture(scope="module")
def world():
    catalog = sim.gen_catalog(SimConfig(), SEED)
    logs, _ = sim.run_cascade_logging(catalog, SEED)
    return catalog, logs


@pytest.fixture(scope="module")
def attached(world):
    catalog, logs = world
    return smp.attach_related_queries(catalog, logs)


@pytest.fixture(scope="module")
def built(world, attached):
    catalog, logs = world
    return smp.build_query_samples(catalog, logs, SampleConfig(), SEED, attached=attached[0])


class TestAttachment:
    def test_event_conservation(self, attached):
        att, stats = attached
        total = stats.n_search_events + stats.n_other_events
        assert stats.n_attached == len(att)
        assert total == stats.n_attached + stats.n_unattached + stats.n_duplicates_dropped
        assert stats.n_attached > 200

    def test_user_item_unique(self, attached):
        att, _ = attached
        pairs = [(a.user_id, a.item_id) for a in att]
        assert len(pairs) == len(set(pairs))

    def test_attached_query_is_latest_relevant_prior(self, world, attached):
        catalog, logs = world
        att, _ = attached
        borderline = catalog.config.borderline
        by_user = {}
        for log in logs:
            by_user.setdefault(log.user_id, []).append(log)
        for a in att[:200]:
            assert a.query_ts < a.purchase_ts
            assert true_relevance(catalog, a.user_id, a.query_id)[a.item_id] >= borderline
            for req in by_user[a.user_id]:
                if a.query_ts < req.timestamp < a.purchase_ts:
                    rel = true_relevance(catalog, a.user_id, req.query_id)[a.item_id]
                    assert rel < borderline

    def test_unattached_events_exist_and_are_dropped(self, attached):
        _, stats = attached
        assert stats.n_unattached > 0

    def test_cross_scenario_attachments_present(self, attached):
        att, _ = attached
        scenarios = {a.scenario for a in att}
        assert smp.SCENARIO_SEARCH in scenarios
        assert scenarios - {smp.SCENARIO_SEARCH}

    def test_deterministic(self, world, attached):
        catalog, logs = world
        again, _ = smp.attach_related_queries(catalog, logs)
        assert again == attached[0]


class TestCandidateDraws:
    def test_origin_counts(self, world, built):
        catalog, logs = world
        samples, _ = built
        cfg = SampleConfig()
        for log, sample in zip(logs, samples):
            origins = sample.origins()
            n_ex = origins.count("ex")
            n_rc_base = sum(1 for it in sample.items if it.origin == "rc" and not it.injected)
            assert n_ex == len(log.exposures)
            assert n_rc_base == min(cfg.n_rank_cands, len(set(log.prerank_out) - set(log.exposures)))
            assert not sample.rc_truncated
            assert not sample.prc_truncated

    def test_origins_disjoint_and_sourced(self, world, built):
        catalog, logs = world
        samples, _ = built
        for log, sample in zip(logs, samples):
            exposures = set(log.exposures)
            prerank = set(log.prerank_out)
            ids = [it.item_id for it in sample.items]
            assert len(ids) == len(set(ids))
            for it in sample.items:
                if it.origin == "ex":
                    assert it.item_id in exposures
                elif it.origin == "rc":
                    assert it.item_id in prerank - exposures
                else:
                    assert it.item_id not in prerank
                    if not it.injected:
                        assert it.item_id in set(log.matching_out)

    def test_truncation_flagged(self, world):
        catalog, logs = world
        cfg = SampleConfig(n_rank_cands=45, n_prerank_cands=40)
        samples, stats = smp.build_query_samples(catalog, logs[:20], cfg, SEED)
        assert all(s.rc_truncated for s in samples)
        assert stats.n_rc_truncated == len(samples)
        # the whole unexposed pre-ranking output gets used
        for log, sample in zip(logs[:20], samples):
            n_rc = sum(1 for it in sample.items if it.origin == "rc" and not it.injected)
            assert n_rc == len(set(log.prerank_out) - set(log.exposures))

    def test_deterministic_and_seed_sensitive(self, world, attached):
        catalog, logs = world
        att = attached[0]
        a1, _ = smp.build_query_samples(catalog, logs, SampleConfig(), SEED, attached=att)
        a2, _ = smp.build_query_samples(catalog, logs, SampleConfig(), SEED, attached=att)
        b, _ = smp.build_query_samples(catalog, logs, SampleConfig(), SEED + 1, attached=att)
        assert a1 == a2
        assert a1 != b


class TestLabels:
    def test_cascade_property(self, built):
        samples, _ = built
        for sample in samples:
            for it in sample.items:
                assert it.purchase <= it.click <= it.exposure

    def test_all_attachments_appear_as_purchase_positives(self, world, attached):
        catalog, logs = world
        att, stats = attached
        samples, _ = smp.build_query_samples(catalog, logs, SampleConfig(), SEED, attached=att)
        total_pos = sum(it.purchase for s in samples for it in s.items)
        assert total_pos == stats.n_attached
        by_request = smp.attachments_by_request(att)
        for sample in samples:
            want = {a.item_id for a in by_request.get(sample.request_id, [])}
            got = {it.item_id for it in sample.items if it.purchase}
            assert got == want

    def test_unclicked_exposures_keep_zero_click_label(self, built):
        samples, _ = built
        n_unclicked = sum(
            1 for s in samples for it in s.items if it.origin == "ex" and it.exposure and not it.click
        )
        assert n_unclicked > 1000

    def test_promoted_positives_outside_exposures_exist(self, built):
        samples, _ = built
        promoted = [
            it for s in samples for it in s.items if it.origin != "ex" and it.purchase
        ]
        assert promoted
        assert all(it.exposure == 1 and it.click == 1 for it in promoted)

    def test_some_exposed_purchases_credit_home_request(self, built):
        samples, _ = built
        assert any(it.origin == "ex" and it.purchase for s in samples for it in s.items)

    def test_injection_counted(self, built):
        samples, stats = built
        assert stats.n_injected == sum(it.injected for s in samples for it in s.items)
        assert stats.n_injected > 0

    def test_validate_rejects_broken_cascade(self, built):
        samples, _ = built
        sample = samples[0]
        bad = dataclasses.replace(
            sample,
            items=sample.items + (smp.LabeledItem(item_id=999999, origin="prc", exposure=0, click=0, purchase=1),),
        )
        with pytest.raises(LabelingError):
            smp.validate_sample(bad)

    def test_validate_rejects_duplicates(self, built):
        samples, _ = built
        sample = samples[0]
        bad = dataclasses.replace(sample, items=sample.items + (sample.items[0],))
        with pytest.raises(LabelingError):
            smp.validate_sample(bad)


class TestArrays:
    def test_label_arrays_match_items(self, built):
        samples, _ = built
        sample = samples[0]
        exposure, click, purchase = sample.label_arrays()
        assert exposure.dtype == bool
        np.testing.assert_array_equal(exposure, [bool(it.exposure) for it in sample.items])
        np.testing.assert_array_equal(click, [bool(it.click) for it in sample.items])
        np.testing.assert_array_equal(purchase, [bool(it.purchase) for it in sample.items])

    def test_distill_mask_sets(self, built):
        samples, _ = built
        origins = samples[0].origins()
        none = smp.distill_mask(origins, "none")
        ex = smp.distill_mask(origins, "ex")
        ex_rc = smp.distill_mask(origins, "ex_rc")
        full = smp.distill_mask(origins, "ex_rc_prc")
        assert not none.any()
        assert ex.sum() == origins.count("ex")
        assert ex_rc.sum() == origins.count("ex") + origins.count("rc")
        assert full.all()
        assert np.all(ex <= ex_rc) and np.all(ex_rc <= full)

    def test_teacher_arrays_default_nan(self, built):
        samples, _ = built
        pctr, pcvr = samples[0].teacher_arrays()
        assert np.isnan(pctr).all() and np.isnan(pcvr).all()


class TestSplit:
    def test_time_split(self, world):
        _, logs = world
        train, evl = smp.split_logs(logs, eval_frac=0.2)
        assert len(train) + len(evl) == len(logs)
        assert len(evl) == len(logs) - int(round(len(logs) * 0.8))
        assert train[-1].timestamp <= evl[0].timestamp

    def test_bad_frac_rejected(self, world):
        _, logs = world
        with pytest.raises(ValueError):
            smp.split_logs(logs, eval_frac=0.0)
        with pytest.raises(ValueError):
            smp.split_logs(logs, eval_frac=1.0)


class TestSerialization:
    def test_round_trip(self, built, tmp_path):
        samples, _ = built
        path = tmp_path / "samples.jsonl"
        smp.save_samples(samples, path, seed=SEED, config_digest="d1")
        again, header = smp.load_samples(path)
        assert again == samples
        assert header["seed"] == SEED
        assert header["n_samples"] == len(samples)

    def test_wrong_format_rejected(self, tmp_path):
        path = tmp_path / "bogus.jsonl"
        path.write_text('{"format": "nope"}\n')
        with pytest.raises(ValueError):
            smp.load_samples(path)
