import json

import numpy as np
import pytest

from picktrace import errors
from picktrace.annotate import DbscanParams, MassBounds, dbscan, mass_valid, points_in_polygon
from picktrace.efficiency import BreakInterval, picker_efficiency, trim_to_harvest
from picktrace.annotate import LabelSequence
from picktrace.ingest import NOPICK, PICK, load_session_csv, save_session_csv, sessions_equal
from picktrace.synth import (
    BREAK,
    PICKING,
    SynthConfig,
    corrupt,
    generate_day,
    generate_season,
    load_truth_json,
    save_truth_json,
)


class TestGenerateDay:
    def test_zero_noise_single_tray(self):
        cfg = SynthConfig(
            n_carts=1,
            day_length_s=700.0,
            breaks=(),
            prepost_s=(40.0, 50.0),
            pick_rate_jitter=0.0,
            mass_noise_kg=0.0,
            mass_ramp_noise=0.0,
            gnss_sigma_m=0.0,
            pick_rate_kg_per_min=0.7,
            tray_capacity_kg=3.0,
            seed=1,
        )
        day = generate_day(cfg)
        (cart,) = day.truth.carts
        assert cart.true_tray_count == 1
        mass = day.sessions[0].raw_mass
        # one ramp up to capacity + tare, one reset back to zero
        peak = mass.max()
        assert peak == pytest.approx(3.5, abs=0.01)
        resets = np.flatnonzero((mass[:-1] > 3.0) & (mass[1:] < 0.5))
        assert len(resets) == 1
        # picking ramp is linear: constant increments while mass grows
        # (to within the 6-decimal serialization quantum)
        picking = cart.states == PICKING
        increments = np.diff(mass)[picking[:-1] & picking[1:]]
        assert np.allclose(increments, increments.mean(), atol=1.1e-6)

    def test_same_seed_byte_identical_csv(self, tmp_path):
        paths = []
        for name in ("a.csv", "b.csv"):
            day = generate_day(SynthConfig(seed=42))
            path = tmp_path / name
            save_session_csv(day.sessions, path)
            paths.append(path)
        assert paths[0].read_bytes() == paths[1].read_bytes()

    def test_truth_efficiency_matches_formula(self, break_day):
        for session, cart in zip(break_day.sessions, break_day.truth.carts):
            labels = LabelSequence(cart.session_id, cart.labels)
            trim = trim_to_harvest(labels)
            breaks = [BreakInterval(a, b) for a, b in break_day.truth.breaks_s]
            recomputed = picker_efficiency(
                labels, trim, breaks, session.nominal_rate, session.times_s
            )
            assert recomputed == pytest.approx(cart.true_efficiency_pct, abs=1e-12)

    def test_schema_conformance(self, tmp_path, break_day):
        path = tmp_path / "day.csv"
        save_session_csv(break_day.sessions, path)
        loaded = load_session_csv(path)
        assert [s.session_id for s in loaded] == [s.session_id for s in break_day.sessions]
        assert all(s.labeled for s in loaded)

    def test_labels_match_states(self, tiny_day):
        for session, cart in zip(tiny_day.sessions, tiny_day.truth.carts):
            expected = np.where(cart.states == PICKING, PICK, NOPICK)
            assert np.array_equal(session.activity, expected)

    def test_breaks_emit_break_state(self, break_day):
        for cart in break_day.truth.carts:
            assert np.sum(cart.states == BREAK) >= 600 * 10

    def test_outside_boundary_only_in_prepost(self, break_day):
        for session, cart in zip(break_day.sessions, break_day.truth.carts):
            inside = points_in_polygon(
                np.stack([cart.true_easting, cart.true_northing], axis=1), break_day.boundary
            )
            outside_states = set(cart.states[~inside].tolist())
            assert outside_states <= {0}  # PREPOST only

    def test_position_noise_sd(self):
        cfg = SynthConfig(n_carts=5, day_length_s=2400.0, seed=9)
        day = generate_day(cfg)
        residuals = np.concatenate(
            [s.easting - c.true_easting for s, c in zip(day.sessions, day.truth.carts)]
            + [s.northing - c.true_northing for s, c in zip(day.sessions, day.truth.carts)]
        )
        assert len(residuals) >= 2e5
        assert abs(residuals.std() - cfg.gnss_sigma_m) / cfg.gnss_sigma_m < 0.05

    def test_break_record_and_tray_record_emitted(self, break_day):
        assert all(r.no_breaks == 2 for r in break_day.break_records)
        truth = {c.session_id: c.true_tray_count for c in break_day.truth.carts}
        for record in break_day.tray_records:
            assert truth[f"{record.harvest_date}_{record.cart_id}"] == record.tray_count

    def test_config_validation(self):
        with pytest.raises(errors.ConfigInvalid):
            SynthConfig(n_carts=0).validate()
        with pytest.raises(errors.ConfigInvalid):
            SynthConfig(breaks=((10_000.0, 600.0),)).validate()
        with pytest.raises(errors.ConfigInvalid):
            generate_day(SynthConfig(day_length_s=100.0))

    def test_generate_season_dates_distinct(self, small_season):
        dates = [d.truth.harvest_date for d in small_season]
        assert len(set(dates)) == 3


class TestCorrupt:
    def test_severity_zero_is_identity(self, tiny_day):
        out, log = corrupt(tiny_day.sessions, severity=0.0)
        assert log == []
        assert all(sessions_equal(a, b) for a, b in zip(tiny_day.sessions, out))
        assert out[0] is not tiny_day.sessions[0]

    def test_mass_spikes_fail_mass_validity(self, break_day):
        out, log = corrupt(break_day.sessions, severity=0.6, seed=2)
        spikes = [e for e in log if e["kind"] == "mass_spike"]
        assert spikes
        by_sid = {s.session_id: s for s in out}
        for e in spikes:
            s = by_sid[e["session_id"]]
            masses = s.raw_mass[e["index"] : e["index"] + e["length"]]
            assert not np.any(mass_valid(masses, MassBounds()))

    def test_gps_jumps_become_dbscan_noise(self, break_day):
        out, log = corrupt(break_day.sessions, severity=0.5, seed=4)
        params = DbscanParams()
        flagged, total = 0, 0
        for session in out:
            jump_idx = {
                i
                for e in log
                if e["kind"] == "gps_jump" and e["session_id"] == session.session_id
                for i in range(e["index"], e["index"] + e["length"])
            }
            if not jump_idx:
                continue
            inside = points_in_polygon(
                np.stack([session.easting, session.northing], axis=1), break_day.boundary
            )
            keep = np.flatnonzero(inside)
            t = (session.gps_tow[keep] - session.gps_tow[keep[0]]) / 1000.0
            embedded = np.stack(
                [session.easting[keep], session.northing[keep], t / params.time_scale], axis=1
            )
            clusters = dbscan(embedded, params)
            for local, original in enumerate(keep):
                if int(original) in jump_idx:
                    total += 1
                    flagged += clusters[local] == -1
        assert total > 0
        assert flagged / total >= 0.9

    def test_dropouts_shorten_sessions(self, break_day):
        out, log = corrupt(break_day.sessions, severity=1.0, seed=6)
        dropped = [e for e in log if e["kind"] == "dropout"]
        assert dropped
        assert sum(len(s) for s in out) < sum(len(s) for s in break_day.sessions)

    def test_bad_severity(self, tiny_day):
        with pytest.raises(errors.ConfigInvalid):
            corrupt(tiny_day.sessions, severity=1.5)


class TestTruthJson:
    def test_round_trip(self, tmp_path, tiny_day):
        path = tmp_path / "truth.json"
        save_truth_json(tiny_day.truth, path)
        loaded = load_truth_json(path)
        assert loaded.harvest_date == tiny_day.truth.harvest_date
        for a, b in zip(loaded.carts, tiny_day.truth.carts):
            assert a.session_id == b.session_id
            assert np.array_equal(a.states, b.states)
            assert a.true_tray_count == b.true_tray_count
            assert a.true_efficiency_pct == pytest.approx(b.true_efficiency_pct, abs=1e-6)
        payload = json.loads(path.read_text())
        assert payload["breaks_s"] == []
