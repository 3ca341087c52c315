"""Analytics layer tests: ingestion, calibration, detection, imputation."""

import math

import numpy as np
import pytest

from plumenet.nodes import Sample, encode_batch
from plumenet.twin import (CalibrationError, DetectorConfig, GapRecord,
                           Reading, SeriesStore, anomaly_flags, compute_metrics,
                           decay_to_ambient, detect_events, export_csv,
                           fit_calibration, idw_mean, import_csv, impute_gap,
                           residual_orthogonality)
from plumenet.twin.impute import ImputeConfig


def mk_sample(node_id, seq, ts, ch4=2.0, temp=25.0, rh=50.0, press=1013.0):
    return Sample(node_id=node_id, seq=seq, ts=ts, ch4_ppm_raw=ch4,
                  co2_ppm_raw=420.0, temp_c=temp, rh_pct=rh, press_hpa=press,
                  batt_v=4.0, lat=35.0, lon=-97.0, speed_mps=0.0)


def mk_reading(node_id, seq, ts, cal, speed=0.0, imputed=False):
    return Reading(node_id=node_id, seq=seq, ts=ts, ch4_ppm_raw=cal,
                   ch4_ppm_cal=cal, co2_ppm=420.0, temp_c=25.0, rh_pct=50.0,
                   press_hpa=1013.0, batt_v=4.0, lat=35.0, lon=-97.0,
                   speed_mps=speed, imputed=imputed)


class TestIngest:
    def _batch(self, node="n07", seqs=range(1, 16), t0=0.0):
        samples = [mk_sample(node, s, t0 + 4.0 * k) for k, s in enumerate(seqs)]
        return encode_batch(node, 0, samples)

    def test_fresh_batch_appends_all(self):
        store = SeriesStore()
        new = store.ingest(self._batch(), "aimnet/v1/n07/data", ingest_ts=100.0)
        assert len(new) == 15
        assert len(store.readings["n07"]) == 15

    def test_reingest_is_idempotent(self):
        store = SeriesStore()
        payload = self._batch()
        store.ingest(payload, "aimnet/v1/n07/data", 100.0)
        before = store.content_hash()
        again = store.ingest(payload, "aimnet/v1/n07/data", 200.0)
        assert again == []
        assert store.content_hash() == before
        assert store.counters["duplicates"] == 15

    def test_seq_jump_records_gap(self):
        store = SeriesStore()
        s100 = encode_batch("n07", 0, [mk_sample("n07", 100, 400.0)])
        s103 = encode_batch("n07", 1, [mk_sample("n07", 103, 412.0)])
        store.ingest(s100, "aimnet/v1/n07/data", 500.0)
        store.ingest(s103, "aimnet/v1/n07/data", 500.0)
        gaps = store.gaps["n07"]
        assert len(gaps) == 1
        assert (gaps[0].seq_start, gaps[0].seq_end) == (101, 102)

    def test_gap_closes_when_late_samples_arrive(self):
        store = SeriesStore()
        store.ingest(encode_batch("n07", 0, [mk_sample("n07", 1, 0.0)]),
                     "aimnet/v1/n07/data", 1.0)
        store.ingest(encode_batch("n07", 1, [mk_sample("n07", 4, 12.0)]),
                     "aimnet/v1/n07/data", 13.0)
        store.ingest(encode_batch("n07", 2, [mk_sample("n07", 2, 4.0),
                                             mk_sample("n07", 3, 8.0)]),
                     "aimnet/v1/n07/data", 14.0)
        assert store.gaps["n07"] == []

    def test_topic_payload_mismatch_rejected(self):
        store = SeriesStore()
        new = store.ingest(self._batch(node="n07"), "aimnet/v1/n08/data", 1.0)
        assert new == []
        assert store.counters["topic_mismatch"] == 1
        assert len(store.quarantine) == 1

    def test_malformed_payload_quarantined(self):
        store = SeriesStore()
        new = store.ingest(b"{not json", "aimnet/v1/n07/data", 1.0)
        assert new == []
        assert store.counters["malformed"] == 1


class TestSeriesQuery:
    def _store(self):
        store = SeriesStore()
        for k in range(75):
            store._append(mk_reading("n01", k + 1, 4.0 * k, 2.0 + 0.01 * k))
        return store

    def test_full_range(self):
        s = self._store().series(["n01"])
        assert len(s["n01"]) == 75

    def test_downsample_75_into_15_buckets(self):
        s = self._store().series(["n01"], downsample=15)
        assert len(s["n01"]) == 15
        # each bucket is the mean of 5 consecutive values
        assert s["n01"][0][1] == pytest.approx(np.mean([2.0 + 0.01 * k for k in range(5)]))

    def test_unknown_node_is_empty(self):
        assert self._store().series(["ghost"])["ghost"] == []

    def test_imputed_excluded_when_asked(self):
        store = self._store()
        store.add_imputed(mk_reading("n01", None, 1000.0, 3.3, imputed=True))
        with_imp = store.series(["n01"])["n01"]
        without = store.series(["n01"], include_imputed=False)["n01"]
        assert len(with_imp) == len(without) + 1


class TestCalibration:
    def _pairs(self, distort, n=400, seed=5, noise=0.0):
        rng = np.random.default_rng(seed)
        pairs = []
        for k in range(n):
            true = rng.uniform(1.9, 100.0)
            temp = rng.uniform(0.0, 45.0)
            rh = rng.uniform(20.0, 90.0)
            press = rng.uniform(985.0, 1040.0)
            raw = distort(true, temp, rh, press) + (rng.normal(0, noise) if noise else 0.0)
            pairs.append((mk_sample("bench", k, float(k), ch4=raw, temp=temp,
                                    rh=rh, press=press), true))
        return pairs

    def test_identity_world_recovers_identity(self):
        pairs = self._pairs(lambda c, t, r, p: c)
        model = fit_calibration(pairs, ridge_lambda=0.0)
        expected = np.zeros(8)
        expected[1] = 1.0
        np.testing.assert_allclose(model.beta, expected, atol=1e-8)
        assert model.report.mad_ppm < 1e-8

    def test_affine_distortion_inverted_exactly(self):
        pairs = self._pairs(lambda c, t, r, p: 1.1 * c + 0.05 * (t - 25.0))
        model = fit_calibration(pairs, ridge_lambda=0.0)
        assert model.report.mad_ppm <= 0.01
        # raw 11.5 at T=35 inverts to the true 10.0
        assert model.apply(11.5, 35.0, 50.0, 1013.0) == pytest.approx(10.0, abs=1e-6)

    def test_noisy_default_meets_targets(self):
        distort = lambda c, t, r, p: (1.1 * c + 0.05 * (t - 25.0)
                                      - 0.01 * (r - 50.0) + 0.002 * (p - 1013.0) + 0.3)
        pairs = self._pairs(distort, n=600, noise=1.5)
        model = fit_calibration(pairs, ridge_lambda=1e-6)
        assert model.report.mad_ppm <= 3.0
        assert model.report.r_squared >= 0.90

    def test_negative_prediction_clamped(self):
        pairs = self._pairs(lambda c, t, r, p: c + 30.0)
        model = fit_calibration(pairs, ridge_lambda=0.0)
        assert model.apply(0.0, 25.0, 50.0, 1013.0) == 0.0

    def test_too_few_pairs_rejected(self):
        with pytest.raises(CalibrationError, match="at least"):
            fit_calibration(self._pairs(lambda c, t, r, p: c, n=50))

    def test_rank_deficiency_suggests_ridge(self):
        # constant environment makes several feature columns collinear
        rng = np.random.default_rng(0)
        pairs = [(mk_sample("b", k, float(k), ch4=2.0), 2.0) for k in range(200)]
        with pytest.raises(CalibrationError, match="lambda > 0"):
            fit_calibration(pairs, ridge_lambda=0.0)

    def test_residuals_orthogonal_to_features(self):
        pairs = self._pairs(lambda c, t, r, p: 1.2 * c - 0.03 * (r - 50.0), noise=0.8)
        model = fit_calibration(pairs, ridge_lambda=0.0)
        assert residual_orthogonality(model, pairs) <= 1e-8


class TestDetection:
    def test_constant_background_no_events(self):
        rows = [mk_reading("n01", k, 4.0 * k, 2.0) for k in range(100)]
        assert detect_events(rows, DetectorConfig()) == []

    def test_plateau_yields_one_event_with_peak(self):
        rows = [mk_reading("n01", k, 4.0 * k, 2.0) for k in range(50)]
        for k in range(50, 65):  # 60 s at 7 ppm
            rows.append(mk_reading("n01", k, 4.0 * k, 7.0))
        rows += [mk_reading("n01", k, 4.0 * k, 2.0) for k in range(65, 100)]
        events = detect_events(rows, DetectorConfig())
        assert len(events) == 1
        ev = events[0]
        assert not ev.suppressed
        assert ev.peak_ppm == pytest.approx(7.0)
        assert ev.t_end - ev.t_start == pytest.approx(60.0)  # 15 samples x 4 s

    def test_single_highspeed_spike_suppressed(self):
        rows = [mk_reading("n01", k, 4.0 * k, 2.0, speed=30.0) for k in range(50)]
        rows[25] = mk_reading("n01", 25, 100.0, 15.0, speed=30.0)
        events = detect_events(rows, DetectorConfig())
        assert len(events) == 1
        assert events[0].suppressed and events[0].reason == "speed_gate"
        assert events[0].peak_ppm == pytest.approx(15.0)

    def test_single_lowspeed_blip_is_nothing(self):
        rows = [mk_reading("n01", k, 4.0 * k, 2.0) for k in range(50)]
        rows[25] = mk_reading("n01", 25, 100.0, 15.0)
        assert detect_events(rows, DetectorConfig()) == []

    def test_long_highspeed_exceedance_not_suppressed(self):
        # sustained exceedance while driving fast is a real detection
        rows = [mk_reading("n01", k, 4.0 * k, 2.0, speed=20.0) for k in range(20)]
        rows += [mk_reading("n01", k, 4.0 * k, 8.0, speed=20.0) for k in range(20, 30)]
        rows += [mk_reading("n01", k, 4.0 * k, 2.0, speed=20.0) for k in range(30, 50)]
        events = detect_events(rows, DetectorConfig())
        assert len(events) == 1 and not events[0].suppressed

    def test_threshold_monotonicity(self):
        rng = np.random.default_rng(2)
        rows = [mk_reading("n01", k, 4.0 * k, float(np.abs(rng.normal(3, 3))))
                for k in range(500)]
        cfg5 = DetectorConfig(threshold_ppm=5.0)
        cfg8 = DetectorConfig(threshold_ppm=8.0)
        n5 = len([e for e in detect_events(rows, cfg5) if not e.suppressed])
        n8 = len([e for e in detect_events(rows, cfg8) if not e.suppressed])
        assert n8 <= n5

    def test_min_duration_monotonicity(self):
        rng = np.random.default_rng(3)
        rows = [mk_reading("n01", k, 4.0 * k, float(np.abs(rng.normal(3, 3))))
                for k in range(500)]
        short = DetectorConfig(min_duration_s=4.0)
        long = DetectorConfig(min_duration_s=20.0)
        assert len(detect_events(rows, long)) <= len(detect_events(rows, short))

    def test_baseline_relative_mode(self):
        cfg = DetectorConfig(threshold_ppm=3.0, threshold_is_absolute=False)
        rows = [mk_reading("n01", k, 4.0 * k, 6.0) for k in range(400)]
        # elevated but flat: no excess over its own baseline
        assert detect_events(rows, cfg) == []


class TestAnomalyFlags:
    def test_stuck_45_minutes(self):
        rows = [mk_reading("n01", k, 60.0 * k, 2.00) for k in range(45)]
        flags = anomaly_flags(rows)
        assert any("stuck" in f for f in flags.values())

    def test_spike_detected(self):
        rng = np.random.default_rng(4)
        rows = [mk_reading("n01", k, 60.0 * k, 2.0 + float(rng.normal(0, 0.05)))
                for k in range(60)]
        rows[40] = mk_reading("n01", 40, 2400.0, 50.0)
        flags = anomaly_flags(rows)
        assert "spike" in flags.get(40, set())

    def test_drift_ramp(self):
        # 2 -> 8 ppm across 6 h: slope 1 ppm/h
        rows = [mk_reading("n01", k, 120.0 * k, 2.0 + 6.0 * k / 180.0)
                for k in range(181)]
        flags = anomaly_flags(rows)
        assert any("drift" in f for f in flags.values())

    def test_insufficient_history_no_flags(self):
        rows = [mk_reading("n01", k, 60.0 * k, 2.0) for k in range(5)]
        assert anomaly_flags(rows) == {}


class TestImpute:
    def _store_with_gap(self):
        store = SeriesStore()
        for k in range(10):
            if k in (4, 5):
                continue
            store._append(mk_reading("n02", k + 1, 4.0 * k, 2.5))
        store.gaps["n02"] = [GapRecord("n02", 5, 6, 12.0, 24.0)]
        return store

    def test_two_equidistant_neighbors_average(self):
        assert idw_mean([2.0, 4.0], [500.0, 500.0]) == pytest.approx(3.0)

    def test_idw_hand_computed(self):
        assert idw_mean([3.0, 5.0], [100.0, 300.0]) == pytest.approx(3.2)

    def test_decay_to_ambient_after_one_hour(self):
        v = decay_to_ambient(6.0, 3600.0, ambient=1.9)
        assert v == pytest.approx(1.9 + 4.1 * math.exp(-1), abs=1e-3)

    def test_gap_filled_from_neighbors(self):
        store = self._store_with_gap()
        for k in range(10):
            store._append(mk_reading("n01", k + 1, 4.0 * k, 2.0))
            store._append(mk_reading("n03", k + 1, 4.0 * k, 4.0))
        positions = {"n01": (0.0, 0.0), "n02": (500.0, 0.0), "n03": (1000.0, 0.0)}
        new = impute_gap(store, store.gaps["n02"][0], positions,
                         ImputeConfig(radius_m=2000.0))
        assert len(new) == 2
        for r in new:
            assert r.imputed and r.ch4_ppm_raw is None
            assert r.ch4_ppm_cal == pytest.approx(3.0)  # equidistant 2 and 4

    def test_idw_bounded_by_neighbor_range(self):
        store = self._store_with_gap()
        for k in range(10):
            store._append(mk_reading("n01", k + 1, 4.0 * k, 2.2))
            store._append(mk_reading("n03", k + 1, 4.0 * k, 3.7))
        positions = {"n01": (100.0, 0.0), "n02": (500.0, 0.0), "n03": (1700.0, 0.0)}
        new = impute_gap(store, store.gaps["n02"][0], positions)
        for r in new:
            assert 2.2 <= r.ch4_ppm_cal <= 3.7

    def test_no_neighbors_falls_back_to_decay(self):
        store = self._store_with_gap()
        positions = {"n02": (500.0, 0.0), "far": (90_000.0, 0.0)}
        new = impute_gap(store, store.gaps["n02"][0], positions)
        assert len(new) == 2
        last_before = 2.5
        expect = decay_to_ambient(last_before, 16.0 - 12.0, 1.9)
        assert new[0].ch4_ppm_cal == pytest.approx(expect)

    def test_nothing_to_extrapolate_leaves_gap(self):
        store = SeriesStore()
        store._append(mk_reading("n02", 5, 20.0, 2.0))
        store.gaps["n02"] = [GapRecord("n02", 1, 4, -4.0, 20.0)]
        new = impute_gap(store, store.gaps["n02"][0], {"n02": (0.0, 0.0)})
        assert new == []


class TestMetrics:
    def test_freshness_and_staleness(self):
        store = SeriesStore()
        for k in range(75):
            store._append(mk_reading("n01", k + 1, 4.0 * k, 2.0))
        m = compute_metrics(store, {}, now=360.0)["n01"]
        assert m.freshness_s == pytest.approx(360.0 - 296.0)
        assert not m.stale
        m2h = compute_metrics(store, {}, now=296.0 + 7200.0)["n01"]
        assert m2h.freshness_s == pytest.approx(7200.0)
        assert m2h.stale

    def test_empty_node_is_infinitely_stale(self):
        store = SeriesStore()
        m = compute_metrics(store, {}, now=100.0, node_ids=["ghost"])["ghost"]
        assert math.isinf(m.freshness_s)
        assert m.stale


class TestCsvRoundtrip:
    def test_export_import_identical(self):
        store = SeriesStore()
        for k in range(20):
            store._append(mk_reading("n01", k + 1, 4.0 * k, 2.0 + 0.1 * k))
        store.add_imputed(mk_reading("n01", None, 500.0, 3.2, imputed=True))
        store.readings["n01"][-1].ch4_ppm_raw = None
        text = export_csv(store)
        again = import_csv(text)
        assert export_csv(again) == text
        assert again.content_hash() == store.content_hash()
