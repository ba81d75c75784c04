import csv
import math
from pathlib import Path

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from oracles import pathloss_reference, receive_reference, sinr_db_reference
from sidelink_sim.channel import (DecodeModel, NoiseConfig, OnAir, PathlossModel, Shadowing,
                                  decode, dbm_to_mw, mw_to_dbm, observe, pathloss_db, receive,
                                  sinr_db)
from sidelink_sim.grid import Allocation, ConfigError

GOLDEN = Path(__file__).parent / "golden"
NO_SHADOW = PathlossModel(shadowing_sigma_db=0.0)


def test_pathloss_reference_distance():
    assert pathloss_db(NO_SHADOW, 1.0) == pytest.approx(47.0)
    assert pathloss_db(NO_SHADOW, 0.2) == pytest.approx(47.0)  # clamped


def test_pathloss_one_decade_near_slope():
    assert pathloss_db(NO_SHADOW, 10.0) == pytest.approx(47.0 + 20.0)


def test_pathloss_golden():
    with open(GOLDEN / "pathloss_default.csv") as fh:
        for row in csv.DictReader(fh):
            d = float(row["distance_m"])
            assert pathloss_db(NO_SHADOW, d) == pytest.approx(float(row["loss_db"]), abs=1e-9)
            assert pathloss_db(NO_SHADOW, d) == pytest.approx(pathloss_reference(d), abs=1e-9)


def test_pathloss_monotone():
    d = np.linspace(0, 3000, 5001)
    assert np.all(np.diff(pathloss_db(NO_SHADOW, d)) >= 0)


def test_pathloss_shadowing_draw():
    rng = np.random.default_rng(0)
    draws = pathloss_db(PathlossModel(), np.full(20000, 100.0), rng) - 87.0
    assert abs(draws.mean()) < 0.1
    assert draws.std() == pytest.approx(3.0, rel=0.05)


def test_sinr_examples():
    assert sinr_db(-80, [], NoiseConfig(-92)) == pytest.approx(12.0, abs=1e-9)
    assert sinr_db(-80, [-80], NoiseConfig(-200)) == pytest.approx(0.0, abs=1e-9)


def test_sinr_matches_reference_evaluator():
    rng = np.random.default_rng(7)
    for _ in range(10_000):
        target = rng.uniform(-130, -40)
        inter = list(rng.uniform(-140, -40, size=rng.integers(0, 6)))
        noise = rng.uniform(-130, -90)
        got = sinr_db(target, inter, NoiseConfig(noise))
        ref = sinr_db_reference(target, inter, noise)
        # compare in the linear domain, relative
        assert 10 ** (got / 10) == pytest.approx(10 ** (ref / 10), rel=1e-9)


@settings(max_examples=200)
@given(st.floats(-130, -40), st.lists(st.floats(-140, -40), max_size=5), st.floats(-140, -40))
def test_adding_interferer_never_helps(target, inter, extra):
    noise = NoiseConfig(-110)
    assert sinr_db(target, inter + [extra], noise) <= sinr_db(target, inter, noise) + 1e-12
    assert sinr_db(target, inter, NoiseConfig(-300)) >= sinr_db(target, inter, noise) - 1e-12


def test_common_power_offset_invariance_without_noise():
    noise = NoiseConfig(-400)
    a = sinr_db(-90, [-95, -100], noise)
    b = sinr_db(-80, [-85, -90], noise)
    assert a == pytest.approx(b, abs=1e-9)


def test_shadowing_symmetric_and_reseeded():
    sh = Shadowing(5, 3.0, 100, np.random.default_rng(1))
    m0 = sh.at(0).copy()
    assert np.allclose(m0, m0.T) and np.all(np.diag(m0) == 0)
    assert np.array_equal(sh.at(99), m0)
    assert not np.array_equal(sh.at(100), m0)


def test_decode_far_above_and_below():
    model = DecodeModel.logistic({11: 13.0})
    assert all(decode(40.0, 11, model, u) for u in np.linspace(1e-9, 0.999, 50))
    assert not any(decode(-20.0, 11, model, u) for u in np.linspace(0, 0.999, 50))


def test_decode_monte_carlo_at_half():
    model = DecodeModel.logistic({5: 7.0})
    assert model.bler(7.0, 5) == pytest.approx(0.5)
    rng = np.random.default_rng(3)
    rate = np.mean([decode(7.0, 5, model, rng.random()) for _ in range(10_000)])
    assert abs(rate - 0.5) <= 0.02


def test_decode_missing_curve():
    with pytest.raises(ConfigError):
        decode(10.0, 9, DecodeModel.logistic({5: 7.0}), 0.5)


def test_curve_file_roundtrip(tmp_path):
    f = tmp_path / "curves.csv"
    f.write_text("mcs, sinr_db, bler\n# comment\n5, -10, 1.0\n5, 0, 0.5\n5, 30, 0.0\n")
    model = DecodeModel.from_file(f)
    assert model.bler(-5.0, 5) == pytest.approx(0.75)
    f.write_text("5, -10, 0.2\n5, 0, 0.5\n")
    with pytest.raises(ConfigError):
        DecodeModel.from_file(f)


def test_db_conversions():
    assert dbm_to_mw(0.0) == pytest.approx(1.0)
    assert mw_to_dbm(100.0) == pytest.approx(20.0)


def test_receive_matches_reference():
    rng = np.random.default_rng(11)
    for _ in range(200):
        C = 10
        T = int(rng.integers(1, 6))
        allocs = []
        for _ in range(T):
            L = int(rng.integers(1, 4))
            allocs.append(Allocation(0, int(rng.integers(0, C - L + 1)), L))
        R = int(rng.integers(1, 4))
        rx = rng.uniform(-120, -60, size=(R, T))
        rec = receive(rx, allocs, C, NoiseConfig(-110))
        s_ref, sci_ref, tb_ref = receive_reference(rx.tolist(), allocs, C, -110)
        assert np.allclose(rec.s_rssi_mw, s_ref, rtol=1e-9, atol=0)
        assert np.allclose(rec.sci_sinr_db, sci_ref, atol=1e-9)
        assert np.allclose(rec.tb_sinr_db, tb_ref, atol=1e-9)


def test_power_conservation():
    """Power attributed to transmitters over subchannels equals what was received."""
    rng = np.random.default_rng(5)
    noise = NoiseConfig(-110)
    for _ in range(100):
        allocs = [Allocation(0, int(s), int(L))
                  for s, L in zip(rng.integers(0, 7, 4), rng.integers(1, 4, 4))]
        rx = rng.uniform(-110, -50, size=(3, 4))
        rec = receive(rx, allocs, 10, noise)
        attributed = (rec.s_rssi_mw - noise.mw).sum(axis=1)
        expected = (dbm_to_mw(rx) * np.array([a.length for a in allocs])).sum(axis=1)
        assert np.allclose(attributed, expected, rtol=1e-9)


def test_observe_empty_channel():
    obs = observe([], [], 5, 10, NoiseConfig(-110), DecodeModel.logistic({2: 3.0}), [])
    assert len(obs) == 10
    assert all(o.s_rssi_dbm == -110 and not o.decoded_scis for o in obs)


def test_observe_single_transmitter():
    on_air = [OnAir(3, Allocation(5, 2, 2), 11, period=100, remaining=7)]
    obs = observe([-70.0], on_air, 5, 10, NoiseConfig(-110), DecodeModel.logistic({2: 3.0}), [0.5])
    sci = obs[2].decoded_scis[0]
    assert sci.tx_id == 3 and sci.rsrp_dbm == -70.0 and sci.remaining == 7
    assert obs[3].decoded_scis and not obs[4].decoded_scis
    for o in obs:
        for s in o.decoded_scis:
            assert dbm_to_mw(s.rsrp_dbm) <= dbm_to_mw(o.s_rssi_dbm)


def test_observe_two_equal_colliders_statistics():
    model = DecodeModel.logistic({2: 3.0})
    on_air = [OnAir(0, Allocation(0, 0, 2), 11), OnAir(1, Allocation(0, 0, 2), 11)]
    rng = np.random.default_rng(9)
    hits = 0
    n = 5000
    for _ in range(n):
        obs = observe([-70.0, -70.0], on_air, 0, 10, NoiseConfig(-150), model, rng.random(2))
        hits += len(obs[0].decoded_scis)
    expected = 1.0 - float(model.bler(0.0, 2))
    assert hits / (2 * n) == pytest.approx(expected, abs=0.02)
