"""Simulator tests: feedforward tracking, determinism, gain logging,
the nonlinear term, recovery metrics, corpus generation, and the
online/offline feature consistency contract."""

import logging
import math

import numpy as np
import numpy.testing as npt
import pytest

from dyadgain import features, synthetic
from dyadgain.errors import UnstablePolicyError
from dyadgain.features import prepare_trial, trial_samples
from dyadgain.nominal import NominalTrajectory, UnicycleState, rollout
from dyadgain.synthetic import (
    CRUISE_SPEED,
    PolicySpec,
    ScenarioConfig,
    TURN_RATE,
    generate_corpus,
    nonlinear_term,
    recovery_error,
    scenario_nominal,
    simulate_dyad,
)

DT = 1.0 / 18.0

ZERO = PolicySpec(gain=np.zeros((2, 4)))


def straight_nominal(lon0, lat, speed, n=200):
    controls = np.zeros((n, 2))
    entry = UnicycleState(pos=[lon0, lat], heading=0.0, speed=speed)
    return NominalTrajectory(states=rollout(entry, controls, DT),
                            controls=controls, dt=DT)


def accel_gain(value):
    # only the accel-vs-z2 entry set
    g = np.zeros((2, 4))
    g[0, 1] = value
    return PolicySpec(gain=g)


# ---------------------------------------------------------------------------
# scenario_nominal
# ---------------------------------------------------------------------------

def test_scenario_nominal_ramp_ends_at_cruise():
    for entry in (3.0, 8.0):
        nom = scenario_nominal(entry, 5.2)
        d = np.hypot(nom.states[:, 0], nom.states[:, 1])
        k25 = int(np.nonzero(d <= 25.0)[0][0])
        assert abs(nom.states[k25, 3] - 5.2) < 1e-9
        assert abs(nom.states[0, 3] - entry) < 1e-12


def test_scenario_nominal_constant_turn_rate_in_circle():
    # every frame inside the inner circle rides the pure arc
    for cruise in (4.5, 5.0, 5.5):
        nom = scenario_nominal(6.0, cruise)
        d = np.hypot(nom.states[:, 0], nom.states[:, 1])
        idx = np.nonzero(d < 10.0)[0]
        idx = idx[idx < nom.controls.shape[0]]
        assert idx.size > 10
        npt.assert_allclose(nom.controls[idx, 1], TURN_RATE, rtol=0, atol=1e-12)
        npt.assert_allclose(nom.controls[idx, 0], 0.0, rtol=0, atol=1e-12)


def test_scenario_nominal_turn_angle_within_gate():
    for cruise in (4.5, 5.5):
        nom = scenario_nominal(5.0, cruise)
        d = np.hypot(nom.states[:, 0], nom.states[:, 1])
        idx = np.nonzero(d < 10.0)[0]
        head = np.unwrap(nom.states[:, 2])
        net = math.degrees(head[idx[-1]] - head[idx[0]])
        assert -120.0 < net < -60.0


def test_scenario_nominal_follower_is_rotated_lane():
    a = scenario_nominal(5.0, 5.0)
    b = scenario_nominal(5.0, 5.0, follower=True)
    npt.assert_allclose(b.states[:, :2], -a.states[:, :2], atol=1e-9)


def test_scenario_nominal_rejects_bad_args():
    with pytest.raises(ValueError):
        scenario_nominal(0.0, 5.0)
    with pytest.raises(ValueError):
        scenario_nominal(5.0, 5.0, turn_rate=0.4)


# ---------------------------------------------------------------------------
# simulate_dyad basics
# ---------------------------------------------------------------------------

def scenario_trial(seed, policy_a=ZERO, policy_b=ZERO, noise=None, eta=0.0,
                   log=None):
    if noise is not None:
        policy_a = PolicySpec(gain=policy_a.gain, nonlin_amp=eta,
                              noise_std=noise)
        policy_b = PolicySpec(gain=policy_b.gain, nonlin_amp=eta,
                              noise_std=noise)
    config = ScenarioConfig(seed=seed, lead="A", entry_speed_a=5.5,
                            entry_speed_b=4.8, cruise_speed_a=5.2,
                            cruise_speed_b=5.0, entry_offset=1.5)
    nom_a = scenario_nominal(5.5, 5.2)
    nom_b = scenario_nominal(4.8, 5.0, follower=True)
    return simulate_dyad(config, policy_a, policy_b, nom_a, nom_b,
                         reference=scenario_nominal(), trial_id="t",
                         site="ISR", feature_log=log)


def test_zero_gain_tracks_nominal():
    trial = scenario_trial(seed=7)
    nom = {"A": scenario_nominal(5.5, 5.2),
           "B": scenario_nominal(4.8, 5.0, follower=True)}
    for car in ("A", "B"):
        traj = trial.traj(car)
        states = nom[car].states
        worst = 0.0
        for i, f in enumerate(traj):
            worst = max(worst, math.hypot(f.pos_lon - states[i, 0],
                                          f.pos_lat - states[i, 1]))
        assert len(traj) > 100
        assert worst <= 1e-3


def test_equal_seeds_bit_identical():
    t1 = scenario_trial(seed=11, noise=(0.05, 0.02))
    t2 = scenario_trial(seed=11, noise=(0.05, 0.02))
    assert t1.traj_a == t2.traj_a
    assert t1.traj_b == t2.traj_b


def test_different_seeds_differ():
    t1 = scenario_trial(seed=11, noise=(0.05, 0.02))
    t2 = scenario_trial(seed=12, noise=(0.05, 0.02))
    assert t1.traj_a != t2.traj_a


def test_longitudinal_gap_gain_recovered():
    # car B ahead on the same straight lane; car A's only feedback entry
    # couples accel to the longitudinal gap
    config = ScenarioConfig(seed=3, lead="B", entry_offset=0.0, horizon=2.0)
    nom_a = straight_nominal(-14.0, 0.0, 5.0)
    nom_b = straight_nominal(-5.0, 0.0, 5.0)
    log = []
    trial = simulate_dyad(config, accel_gain(-0.5), ZERO, nom_a, nom_b,
                          feature_log=log)
    z2_by_t = {round(t / DT): z[1] for t, z in log}
    pairs = [(z2_by_t[round(f.t / DT)], f.accel) for f in trial.traj_a
             if round(f.t / DT) in z2_by_t]
    assert len(pairs) > 20
    x = np.array([p[0] for p in pairs])
    y = np.array([p[1] for p in pairs])
    assert x.max() - x.min() > 1.0
    slope, intercept = np.polyfit(x, y, 1)
    assert abs(slope - (-0.5)) <= 0.005
    assert abs(intercept) <= 1e-6


def test_unstable_policy_names_car():
    # positive gap feedback chasing a faster car runs away
    config = ScenarioConfig(seed=3, lead="B", entry_offset=0.0, horizon=10.0)
    nom_a = straight_nominal(-20.0, 0.0, 5.0)
    nom_b = straight_nominal(-5.0, 0.0, 12.0)
    with pytest.raises(UnstablePolicyError) as err:
        simulate_dyad(config, accel_gain(5.0), ZERO, nom_a, nom_b)
    assert "car A" in str(err.value)


def test_feature_consistency_online_offline():
    g = np.array([[0.012, 0.010, 0.10, -0.15],
                  [-0.003, 0.002, -0.015, -0.05]])
    log = []
    trial = scenario_trial(seed=21, policy_a=PolicySpec(gain=g),
                           policy_b=PolicySpec(gain=g),
                           noise=(0.01, 0.01), log=log)
    online = {round(t / DT): z for t, z in log}
    prep = prepare_trial(trial)
    lead, per_agent = trial_samples(prep, scenario_nominal(), prepared=True)
    assert lead == "A"
    n_checked = 0
    for samples in per_agent.values():
        for s in samples:
            key = round(s.t / DT)
            if key in online:
                npt.assert_allclose(s.z, online[key], rtol=0, atol=1e-6)
                n_checked += 1
    assert n_checked > 50


# ---------------------------------------------------------------------------
# nonlinear term
# ---------------------------------------------------------------------------

def test_nonlinear_term_decays_with_distance():
    far = nonlinear_term(np.array([600.0, 800.0, 0.0, 0.0]))
    assert abs(far[0]) < 1e-3
    assert far[1] == 0.0


def test_nonlinear_term_finite_at_contact():
    npt.assert_allclose(nonlinear_term(np.zeros(4)), [-1.0, 0.0], atol=1e-15)


def test_nonlinear_term_inverse_envelope():
    # distances at whole periods hit the envelope peak, so the inverse
    # law is exact between them
    near = nonlinear_term(np.array([0.0, 4.0, 0.0, 0.0]))
    far = nonlinear_term(np.array([0.0, 8.0, 0.0, 0.0]))
    npt.assert_allclose(near[0], -0.2, atol=1e-15)
    npt.assert_allclose(far[0], near[0] * 5.0 / 9.0, atol=1e-15)


def test_nonlinear_term_alternates_sign():
    half = nonlinear_term(np.array([0.0, 2.0, 0.0, 0.0]))
    full = nonlinear_term(np.array([0.0, 4.0, 0.0, 0.0]))
    assert half[0] > 0.0
    assert full[0] < 0.0


# ---------------------------------------------------------------------------
# recovery metrics
# ---------------------------------------------------------------------------

G_EXAMPLE = np.array([[0.06, 0.01, 0.10, -0.15],
                      [-0.003, 0.002, -0.015, -0.05]])


def test_recovery_error_identity():
    r = recovery_error(G_EXAMPLE, G_EXAMPLE)
    assert r["rel_frobenius"] == 0.0
    npt.assert_array_equal(r["per_entry"], np.zeros((2, 4)))
    assert r["sign_agree"] == r["n_significant"] == 4


def test_recovery_error_antipodal():
    r = recovery_error(G_EXAMPLE, -G_EXAMPLE)
    npt.assert_allclose(r["rel_frobenius"], 2.0, atol=1e-12)
    assert r["sign_agree"] == 0


def test_recovery_error_scaling():
    r = recovery_error(G_EXAMPLE, 1.1 * G_EXAMPLE)
    npt.assert_allclose(r["rel_frobenius"], 0.1, atol=1e-12)
    assert r["sign_agree"] == r["n_significant"]


def test_policy_spec_validation():
    with pytest.raises(ValueError):
        PolicySpec(gain=np.zeros((2, 3)))
    with pytest.raises(ValueError):
        PolicySpec(gain=np.full((2, 4), np.nan))
    with pytest.raises(ValueError):
        PolicySpec(gain=np.zeros((2, 4)), nonlin_amp=-0.1)


def test_scenario_config_validation():
    with pytest.raises(ValueError):
        ScenarioConfig(seed=1, frame_rate=0.0)
    with pytest.raises(ValueError):
        ScenarioConfig(seed=1, lead="C")
    with pytest.raises(ValueError):
        ScenarioConfig(seed=1, entry_speed_a=-1.0)


# ---------------------------------------------------------------------------
# corpus generation
# ---------------------------------------------------------------------------

def test_corpus_alternates_leads_and_validates(caplog):
    pol = PolicySpec(gain=np.zeros((2, 4)), noise_std=(0.01, 0.01))
    with caplog.at_level(logging.ERROR):
        trials, manifest = generate_corpus(4, pol, seed=5)
    assert len(trials) == 4
    assert [r["lead"] for r in manifest["trials"]] == ["A", "B", "A", "B"]
    for trial, record in zip(trials, manifest["trials"]):
        prep = prepare_trial(trial)
        assert features.exclusion_reason(prep) is None
        assert features.determine_lead(prep) == record["lead"]
        assert record["attempts"] >= 1


def test_corpus_is_deterministic():
    pol = PolicySpec(gain=np.zeros((2, 4)), noise_std=(0.02, 0.01))
    t1, m1 = generate_corpus(2, pol, seed=9)
    t2, m2 = generate_corpus(2, pol, seed=9)
    assert m1 == m2
    for a, b in zip(t1, t2):
        assert a.traj_a == b.traj_a and a.traj_b == b.traj_b


def test_corpus_manifest_records_policy():
    g = np.array([[0.012, 0.010, 0.10, -0.15],
                  [-0.003, 0.002, -0.015, -0.05]])
    pol = PolicySpec(gain=g, nonlin_amp=0.5, noise_std=(0.01, 0.01))
    _, manifest = generate_corpus(2, pol, seed=13)
    assert manifest["policy"]["gain"] == g.tolist()
    assert manifest["policy"]["nonlin_amp"] == 0.5
    assert manifest["scenario"]["turn_rate"] == TURN_RATE
    assert manifest["master_seed"] == 13
