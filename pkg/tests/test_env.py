import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from xappdistill.env import (DC, KEEP, CellularEnv, Controls, EnvParams, append_rate_log,
                             apply_action, channel_gain, data_rate, enforce_capacity, gain_matrix,
                             initial_state, move_users, observe, path_loss, proportional_fairness,
                             sinr, step, utility)

# Frozen oracle values, evaluated in 30-digit arithmetic (mpmath) from the
# textbook urban Hata expression, independent of the package code.
HATA_900_50_1P5_1KM = 123.337336761159419598
HATA_900_50_1P5_100M = 89.5655902895603427698
LN_1E3 = -6.90775527898213705205
THERMAL_100MHZ_W = 3.98107170553497250770e-13


@pytest.fixture
def params():
    return EnvParams()


def test_defaults_derive_thermal_noise(params):
    assert params.noise_power == pytest.approx(THERMAL_100MHZ_W, rel=1e-12)


def test_default_resource_constants(params):
    assert params.total_rbs == 273
    assert params.rb_bandwidth == 360e3
    assert params.guard_bandwidth == 845e3
    assert params.channel_bandwidth == 100e6


@pytest.mark.parametrize("kwargs, msg", [
    (dict(power_levels=(25.0, 25.0)), "increasing"),
    (dict(power_levels=(20.0, 30.0)), r"\[25, 35\]"),
    (dict(rb_options=(1, 300)), "total_rbs"),
    (dict(utility_clip=(1.0, 1.0)), "L < U"),
    (dict(utility_scale=1.0), "> 1"),
    (dict(rate_floor=0.0), "> 0"),
    (dict(num_bs=2, bs_positions=((0.0, 0.0),)), "num_bs"),
])
def test_params_reject_invalid(kwargs, msg):
    with pytest.raises(ValueError, match=msg):
        EnvParams(**kwargs)


# -- propagation -------------------------------------------------------------

def test_hata_reference_1km(params):
    assert float(path_loss(1000.0, params)) == pytest.approx(HATA_900_50_1P5_1KM, abs=1e-6)


def test_hata_reference_100m(params):
    assert float(path_loss(100.0, params)) == pytest.approx(HATA_900_50_1P5_100M, abs=1e-6)


def test_path_loss_clamps_below_one_metre(params):
    assert path_loss(0.5, params) == path_loss(1.0, params)
    assert path_loss(0.0, params) == path_loss(1.0, params)


@given(st.floats(1.0, 5000.0))
def test_path_loss_increases_with_distance(d):
    p = EnvParams()
    assert path_loss(2 * d, p) > path_loss(d, p)
    assert np.isfinite(path_loss(d, p))


def test_gain_decades(params):
    # path loss of 0 dB and 30 dB through the same conversion
    assert 10.0 ** (-0.0 / 10.0) == 1.0
    p = EnvParams(bs_positions=((0.0, 0.0), (10.0, 0.0), (20.0, 0.0)))
    h = channel_gain(0, (300.0, 400.0), p)
    assert h == pytest.approx(10.0 ** (-float(path_loss(500.0, p)) / 10.0), rel=1e-12)
    assert 0.0 < h <= 1.0


def test_gain_matrix_matches_scalar_gain():
    rng = np.random.default_rng(3)
    p = EnvParams()
    pos = rng.uniform(0, 250, size=(20, 2))
    g = gain_matrix(pos, p)
    for i in range(20):
        for j in range(p.num_bs):
            d = math.dist(pos[i], p.bs_positions[j])
            ref = 10.0 ** (-float(path_loss(d, p)) / 10.0)
            assert g[i, j] == pytest.approx(ref, rel=1e-12)
            assert g[i, j] == pytest.approx(channel_gain(j, pos[i], p), rel=1e-12)


# -- SINR / rate / utility / PF ---------------------------------------------

def test_sinr_single_bs_is_snr():
    s = sinr(np.array([2.0]), np.array([[1e-9]]), 1e-12)
    assert s[0, 0] == pytest.approx(2.0 * 1e-9 / 1e-12, rel=1e-15)


def test_sinr_zero_gain_is_zero():
    s = sinr(np.array([1.0, 1.0]), np.array([[0.0, 1e-9]]), 1e-12)
    assert s[0, 0] == 0.0


def test_sinr_matches_direct_sum():
    rng = np.random.default_rng(11)
    for _ in range(50):
        p = rng.uniform(0.1, 5.0, size=3)
        h = 10.0 ** rng.uniform(-14, -6, size=(4, 3))
        n0 = 10.0 ** rng.uniform(-14, -11)
        s = sinr(p, h, n0)
        for i in range(4):
            for j in range(3):
                interf = math.fsum(h[i, k] * p[k] for k in range(3) if k != j)
                assert s[i, j] == pytest.approx(p[j] * h[i, j] / (n0 + interf), rel=1e-12)


def test_power_monotonicity():
    rng = np.random.default_rng(5)
    h = 10.0 ** rng.uniform(-12, -7, size=(6, 3))
    p = np.array([1.0, 1.0, 1.0])
    base = sinr(p, h, 1e-13)
    p2 = p.copy()
    p2[1] = 3.0
    up = sinr(p2, h, 1e-13)
    assert np.all(up[:, 1] >= base[:, 1])
    assert np.all(up[:, [0, 2]] <= base[:, [0, 2]])


def test_data_rate_examples():
    assert data_rate(1, 1.0, 360e3) == pytest.approx(360_000.0)
    assert data_rate(0, 5.0, 360e3) == 0.0
    assert data_rate(1, 0.0, 360e3) == 0.0
    assert data_rate(273, 1023.0, 360e3) == pytest.approx(982.8e6, rel=1e-15)


@given(st.integers(1, 273), st.floats(1e-6, 1e6), st.integers(1, 10), st.floats(1e-3, 10.0))
def test_data_rate_increasing(r, s, dr, ds):
    assert data_rate(r + dr, s, 360e3) > data_rate(r, s, 360e3)
    assert data_rate(r, s * (1 + ds), 360e3) > data_rate(r, s, 360e3)


def test_utility_examples(params):
    assert utility(1.0, params) == pytest.approx(0.0)
    assert utility(10.0, params) == pytest.approx(10.0)
    assert utility(1e6, params) == 10.0
    assert utility(0.0, params) == -10.0


@given(st.floats(0.0, 1e9, allow_nan=False))
def test_utility_in_clip_range(r):
    u = float(utility(r, EnvParams()))
    assert -10.0 <= u <= 10.0


def test_pf_examples():
    assert proportional_fairness([1.0, 1.0, 1.0]) == 0.0
    assert proportional_fairness([math.e, math.e]) == pytest.approx(2.0)
    assert proportional_fairness([0.0, 1.0], 1e-3) == pytest.approx(LN_1E3, rel=1e-12)


@given(st.lists(st.floats(0.0, 1e4), min_size=1, max_size=8), st.randoms())
def test_pf_permutation_invariant(rates, rnd):
    shuffled = list(rates)
    rnd.shuffle(shuffled)
    assert proportional_fairness(shuffled) == pytest.approx(proportional_fairness(rates), rel=1e-12, abs=1e-12)


# -- actions -----------------------------------------------------------------

def _controls(params, serving):
    k = params.num_users
    serving = np.asarray(serving, dtype=np.int64)
    req = np.full(k, params.static_rb_share, dtype=np.int64)
    return Controls(serving, req, enforce_capacity(serving, req, params.num_bs, params.total_rbs),
                    np.full(params.num_bs, params.default_power_index, dtype=np.int64))


def test_capacity_scaling_example():
    alloc = enforce_capacity(np.array([0, 0]), np.array([200, 200]), 1, 273)
    assert alloc.tolist() == [136, 136]


def test_capacity_under_limit_granted():
    alloc = enforce_capacity(np.array([0, 1, DC]), np.array([273, 12, 50]), 2, 273)
    assert alloc.tolist() == [273, 12, 0]


@given(st.lists(st.tuples(st.integers(-1, 2), st.integers(0, 273)), min_size=1, max_size=12))
def test_capacity_never_exceeded(pairs):
    serving = np.array([p[0] for p in pairs])
    req = np.array([p[1] for p in pairs])
    alloc = enforce_capacity(serving, req, 3, 273)
    for j in range(3):
        assert alloc[serving == j].sum() <= 273
    assert np.all(alloc <= req)
    assert np.all(alloc[serving == DC] == 0)


def test_apply_action_maps_indices(params):
    c = _controls(params, [0, 1, 2, 0, 1])
    a = np.array([0, 1, 2, 3, KEEP, 4, 0, 1, 2, KEEP, 4, KEEP, 0])
    out = apply_action(c, a, params)
    assert out.serving.tolist() == [DC, 0, 1, 2, 1]
    assert out.rb_request.tolist() == [136, 1, 16, 45, 54]
    assert out.power_idx.tolist() == [4, 2, 0]


def test_apply_action_all_dc_gives_zero_rates(params):
    env = CellularEnv(params, np.random.default_rng(0))
    a = np.concatenate([np.zeros(5), np.full(5, 4), np.full(3, 2)]).astype(int)
    _, reward, m = env.step(a)
    assert np.all(m.rates == 0.0)
    assert reward == pytest.approx(5 * LN_1E3, rel=1e-12)


@pytest.mark.parametrize("bad", [np.zeros(12, dtype=int), np.zeros(14, dtype=int)])
def test_apply_action_rejects_length(params, bad):
    with pytest.raises(ValueError, match="shape"):
        apply_action(_controls(params, [0] * 5), bad, params)


def test_apply_action_rejects_out_of_range(params):
    a = np.zeros(13, dtype=int)
    a[0] = 4
    with pytest.raises(ValueError, match="range"):
        apply_action(_controls(params, [0] * 5), a, params)


# -- mobility ----------------------------------------------------------------

def test_zero_speed_keeps_positions():
    p = EnvParams(ue_speed_range=(0.0, 0.0))
    rng = np.random.default_rng(1)
    s = initial_state(p, rng)
    pos, wp, sp = move_users(s.positions, s.waypoints, s.speeds, p, rng)
    assert np.array_equal(pos, s.positions)


def test_positions_stay_in_area_and_speed_bounded():
    p = EnvParams()
    rng = np.random.default_rng(2)
    s = initial_state(p, rng)
    pos, wp, sp = s.positions, s.waypoints, s.speeds
    for _ in range(10_000):
        new, wp, sp = move_users(pos, wp, sp, p, rng)
        assert np.all(np.linalg.norm(new - pos, axis=1) <= 2.0 + 1e-9)
        pos = new
        assert np.all((pos >= 0.0) & (pos <= 250.0))


def test_mobility_deterministic():
    p = EnvParams()
    a, b = CellularEnv(p, np.random.default_rng(9)), CellularEnv(p, np.random.default_rng(9))
    act = np.full(13, KEEP)
    for _ in range(50):
        a.step(act)
        b.step(act)
    assert np.array_equal(a.state.positions, b.state.positions)


# -- step --------------------------------------------------------------------

def test_observation_layout(params):
    env = CellularEnv(params, np.random.default_rng(0))
    obs = env.observation()
    assert obs.shape == (5 * 4 + 5 * 3 + 5,)
    onehot = obs[:20].reshape(5, 4)
    assert np.all(onehot.sum(axis=1) == 1)
    assert np.all(obs[20:35] >= 0)
    assert np.all(np.abs(obs[35:]) <= 10)


def test_initial_serving_is_strongest_cell(params):
    s = initial_state(params, np.random.default_rng(4))
    assert np.array_equal(s.serving, np.argmax(s.gains, axis=1))


def test_frozen_users_identical_reward():
    p = EnvParams(ue_speed_range=(0.0, 0.0))
    env = CellularEnv(p, np.random.default_rng(0))
    a = np.array([1, 2, 3, 1, 2, 4, 3, 2, 1, 0, 4, 0, 2])
    rewards = [env.step(a)[1] for _ in range(5)]
    assert len(set(rewards)) == 1


def test_single_user_single_bs_end_to_end():
    p = EnvParams(num_bs=1, num_users=1, bs_positions=((0.0, 0.0),),
                  user_positions=((30.0, 40.0),), ue_speed_range=(0.0, 0.0))
    env = CellularEnv(p, np.random.default_rng(0))
    _, reward, m = env.step(np.array([1, 4, 4]))
    loss = HATA_900_50_1P5_1KM + (44.9 - 6.55 * math.log10(50.0)) * math.log10(50.0 / 1000.0)
    snr = 10.0 ** ((35.0 - 30.0) / 10.0) * 10.0 ** (-loss / 10.0) / THERMAL_100MHZ_W
    rate = 360e3 * 136 * math.log2(1.0 + snr) / 1e6
    assert m.rates[0] == pytest.approx(rate, rel=1e-9)
    assert reward == pytest.approx(math.log(rate), rel=1e-9)


def test_rate_zero_iff_dc_or_no_rbs(params):
    env = CellularEnv(params, np.random.default_rng(7))
    a = np.array([0, 1, 2, 3, 1, 0, 0, 1, 2, 3, 2, 2, 2])
    _, _, m = env.step(a)
    st_ = env.state
    zero = (st_.controls.serving == DC) | (st_.controls.rb_alloc == 0)
    assert np.array_equal(m.rates == 0.0, zero)


def test_permuting_users_permutes_rates():
    rng = np.random.default_rng(8)
    pos = rng.uniform(0, 250, size=(5, 2))
    perm = np.array([3, 0, 4, 1, 2])
    p1 = EnvParams(user_positions=tuple(map(tuple, pos)), ue_speed_range=(0.0, 0.0))
    p2 = EnvParams(user_positions=tuple(map(tuple, pos[perm])), ue_speed_range=(0.0, 0.0))
    a = np.array([1, 2, 3, 1, 0, 4, 3, 2, 1, 0, 1, 3, 2])
    ap = np.concatenate([a[:5][perm], a[5:10][perm], a[10:]])
    _, r1, m1 = CellularEnv(p1, np.random.default_rng(0)).step(a)
    _, r2, m2 = CellularEnv(p2, np.random.default_rng(0)).step(ap)
    assert np.allclose(m2.rates, m1.rates[perm], rtol=1e-12)
    assert r2 == pytest.approx(r1, rel=1e-12)


def test_step_is_pure_given_rng(params):
    s = initial_state(params, np.random.default_rng(1))
    a = np.full(13, KEEP)
    n1 = step(s, a, params, np.random.default_rng(2))
    n2 = step(s, a, params, np.random.default_rng(2))
    assert np.array_equal(n1[1], n2[1]) and n1[2] == n2[2]
    assert np.array_equal(observe(n1[0], params), n1[1])


def test_restore_controls_keeps_serving(params):
    env = CellularEnv(params, np.random.default_rng(0))
    snap = env.snapshot_controls()
    env.step(np.array([1, 1, 1, 1, 1, 4, 4, 4, 4, 4, 0, 0, 0]))
    serving = env.state.controls.serving.copy()
    env.restore_controls(snap)
    c = env.state.controls
    assert np.array_equal(c.serving, serving)
    assert np.array_equal(c.rb_request, snap.rb_request)
    assert np.array_equal(c.power_idx, snap.power_idx)


def test_rate_log_csv(tmp_path, params):
    env = CellularEnv(params, np.random.default_rng(0))
    ms = [env.step(np.zeros(13, dtype=int))[2], env.step(np.full(13, KEEP))[2]]
    path = tmp_path / "rates.csv"
    append_rate_log(path, ms[:1])
    append_rate_log(path, ms[1:])
    lines = path.read_text().splitlines()
    assert lines[0] == "step,user,serving_bs,rate_mbps"
    assert len(lines) == 1 + 2 * 5
    assert lines[1].startswith("1,0,0,")
