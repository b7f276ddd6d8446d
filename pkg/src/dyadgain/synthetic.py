"""Closed-loop dyad simulation with known feedback policies.

Ground-truth oracle for the identification pipeline: two unicycle
vehicles run opposing left turns through the intersection, each applying

    u = nominal feedforward + G' z + eta * n(z) + noise

where z is the same 4-vector feature the features module extracts
offline.  Gains act on raw (unnormalized) features.  Feedback engages
once the interaction window has started and the car is inside its own
analysis regions; before and after, only feedforward and noise apply.

The world frame follows the designated lead car's approach, so the lead
always spawns on the canonical approach lane and the follower on the
rotated one.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np

from .errors import NoCrossingError, TooFewSamplesError, UnstablePolicyError
from .features import (
    DyadTrial,
    Frame,
    INNER_RADIUS,
    OUTER_RADIUS,
    exclusion_reason,
    determine_lead,
    interaction_window,
    prepare_trial,
)
from .nominal import NominalTrajectory, UnicycleState, rollout, _propagate_array
from .seeds import derive_seed

__all__ = [
    "PolicySpec",
    "ScenarioConfig",
    "scenario_nominal",
    "simulate_dyad",
    "nonlinear_term",
    "recovery_error",
    "generate_corpus",
]

log = logging.getLogger(__name__)

SPEED_LIMIT = 30.0
NONLIN_FLOOR = 1.0
NONLIN_SCALE = 1.0
NONLIN_PERIOD = 4.0

# Turn radius whose arc endpoints sit exactly on the inner analysis
# circle for a car entering on a 1.75 m lane.
SCENARIO_TURN_RADIUS = 1.75 + math.sqrt(INNER_RADIUS ** 2 - 1.75 ** 2)

# All scenario nominals share one arc turn rate; each car's radius is
# cruise_speed / |TURN_RATE|.  The rate is pinned so the slowest cruise
# still sweeps a radius slightly above SCENARIO_TURN_RADIUS, which keeps
# every in-circle frame on the pure arc.  The feedforward turn rate is
# then identical across trials inside the intersection region, so the
# per-distribution intercept absorbs it instead of biasing the gain fit.
CRUISE_SPEED = 5.0
CRUISE_JITTER = 0.5
TURN_RATE = -0.97 * (CRUISE_SPEED - CRUISE_JITTER) / SCENARIO_TURN_RADIUS

# Entry-speed ramps finish this far before the 25 m circle, so windowed
# frames never carry feedforward acceleration.
RAMP_MARGIN = 2.0


@dataclass(frozen=True)
class PolicySpec:
    """Feedback law parameters for one driver.

    gain is the 2x4 matrix G' (row 0: accel per unit feature, row 1:
    angular velocity); nonlin_amp scales the fixed inverse-distance
    term; noise_std is (accel, ang_vel) standard deviations.
    """

    gain: np.ndarray
    nonlin_amp: float = 0.0
    noise_std: tuple = (0.0, 0.0)

    def __post_init__(self):
        g = np.asarray(self.gain, dtype=float)
        if g.shape != (2, 4):
            raise ValueError(f"gain must be 2x4, got {g.shape}")
        if not np.all(np.isfinite(g)):
            raise ValueError("gain entries must be finite")
        if self.nonlin_amp < 0:
            raise ValueError("nonlin_amp must be nonnegative")
        object.__setattr__(self, "gain", g)


@dataclass(frozen=True)
class ScenarioConfig:
    """One trial's geometry, timing, and seed."""

    seed: int
    lead: str = "A"
    spawn_distance: float = 40.0
    lane_offset: float = 1.75
    turn_rate: float = TURN_RATE
    entry_speed_a: float = 5.0
    entry_speed_b: float = 5.0
    cruise_speed_a: float = CRUISE_SPEED
    cruise_speed_b: float = CRUISE_SPEED
    entry_offset: float = 0.0
    lat_offset_a: float = 0.0
    lat_offset_b: float = 0.0
    frame_rate: float = 18.0
    horizon: float = 60.0

    def __post_init__(self):
        if self.frame_rate <= 0:
            raise ValueError("frame_rate must be positive")
        if min(self.entry_speed_a, self.entry_speed_b) < 0:
            raise ValueError("entry speeds must be nonnegative")
        if self.lead not in ("A", "B"):
            raise ValueError("lead must be 'A' or 'B'")


@lru_cache(maxsize=64)
def scenario_nominal(entry_speed: float = CRUISE_SPEED,
                     cruise_speed: float = CRUISE_SPEED, *,
                     spawn_distance: float = 40.0, lane_offset: float = 1.75,
                     turn_rate: float = TURN_RATE, exit_length: float = 45.0,
                     follower: bool = False,
                     frame_rate: float = 18.0) -> NominalTrajectory:
    """Reference left turn for one lane of the scenario.

    The lead lane approaches along +longitude at +lane_offset lateral;
    the follower lane is the same path rotated half a turn.  Speed ramps
    from entry_speed to cruise_speed before the 25 m circle, then holds;
    the arc turns at the shared turn_rate, so the radius scales with the
    cruise speed.  States come from integrating the control schedule, so
    a zero-gain car tracks the trajectory exactly.
    """
    if cruise_speed <= 0 or entry_speed <= 0:
        raise ValueError("speeds must be positive")
    if turn_rate >= 0:
        raise ValueError("turn_rate must be negative (left turn)")
    dt = 1.0 / frame_rate
    radius = cruise_speed / abs(turn_rate)
    approach = spawn_distance - (radius - lane_offset)
    d_ramp = (spawn_distance
              - math.sqrt(OUTER_RADIUS ** 2 - lane_offset ** 2) - RAMP_MARGIN)
    if approach < d_ramp:
        raise ValueError("approach too short for the entry ramp")
    a_ramp = (cruise_speed ** 2 - entry_speed ** 2) / (2 * d_ramp)
    t_ramp = 2 * d_ramp / (entry_speed + cruise_speed)
    t_arc_start = t_ramp + (approach - d_ramp) / cruise_speed
    t_arc_end = t_arc_start + (math.pi / 2) / abs(turn_rate)
    total_time = t_arc_end + exit_length / cruise_speed
    n_intervals = max(int(math.ceil(total_time / dt - 1e-9)), 1)
    controls = np.zeros((n_intervals, 2))
    for k in range(n_intervals):
        lo, hi = k * dt, (k + 1) * dt
        # Boundary intervals blend by overlap so net speed and heading
        # changes are exact.
        controls[k, 0] = a_ramp * max(0.0, min(hi, t_ramp) - lo) / dt
        controls[k, 1] = turn_rate * max(
            0.0, min(hi, t_arc_end) - max(lo, t_arc_start)) / dt
    if follower:
        entry = UnicycleState(pos=[spawn_distance, -lane_offset],
                              heading=math.pi, speed=entry_speed)
    else:
        entry = UnicycleState(pos=[-spawn_distance, lane_offset],
                              heading=0.0, speed=entry_speed)
    states = rollout(entry, controls, dt)
    return NominalTrajectory(states=states, controls=controls, dt=dt)


def nonlinear_term(z) -> np.ndarray:
    """Stuttering inverse-distance term on the acceleration channel.

    An oscillation in the car-to-car distance (period NONLIN_PERIOD)
    under an inverse-distance envelope; the 1 m floor keeps it finite
    at contact.  The alternating sign means large amplitudes perturb
    speed without net braking, so trials stay viable.  Angular
    velocity is untouched.
    """
    d = math.hypot(z[0], z[1])
    envelope = NONLIN_SCALE / (d + NONLIN_FLOOR)
    return np.array([-math.cos(2.0 * math.pi * d / NONLIN_PERIOD) * envelope,
                     0.0])


def recovery_error(gain_true, gain_est, sig_floor: float = 0.05) -> dict:
    """Entrywise and Frobenius recovery metrics plus sign agreement."""
    gt = np.asarray(gain_true, dtype=float)
    ge = np.asarray(gain_est, dtype=float)
    if gt.shape != ge.shape:
        raise ValueError("gain shapes differ")
    per_entry = ge - gt
    denom = np.linalg.norm(gt)
    rel = float(np.linalg.norm(per_entry) / denom) if denom > 0 else float(
        np.linalg.norm(per_entry))
    significant = np.abs(gt) >= sig_floor
    agree = int(np.sum(np.sign(ge[significant]) == np.sign(gt[significant])))
    return {
        "per_entry": per_entry,
        "rel_frobenius": rel,
        "sign_agree": agree,
        "n_significant": int(np.sum(significant)),
    }


@dataclass
class _CarSim:
    name: str
    policy: PolicySpec
    nominal: NominalTrajectory
    spawn_k: int
    state: np.ndarray
    frames: list = field(default_factory=list)
    entered: bool = False
    done: bool = False

    def active(self, k: int) -> bool:
        return k >= self.spawn_k and not self.done

    def region(self, inner: float, outer: float):
        # Incremental mirror of features.segment_regions
        d = math.hypot(self.state[0], self.state[1])
        if d < inner:
            self.entered = True
            return "intersection"
        if d <= outer:
            return "exit" if self.entered else "approach"
        if self.entered:
            self.done = True
        return None


def _nominal_outer_time(nominal: NominalTrajectory, outer: float) -> float:
    dist = np.hypot(nominal.states[:, 0], nominal.states[:, 1])
    idx = np.nonzero(dist <= outer)[0]
    if idx.size == 0:
        raise ValueError("reference trajectory never enters the outer radius")
    return float(idx[0] * nominal.dt)


def simulate_dyad(config: ScenarioConfig, policy_a: PolicySpec,
                  policy_b: PolicySpec, nominal_a: NominalTrajectory,
                  nominal_b: NominalTrajectory, *,
                  reference: NominalTrajectory | None = None,
                  trial_id: str = "sim", site: str = "SIM",
                  feature_log: list | None = None) -> DyadTrial:
    """Integrate both cars in lockstep and emit a trial log.

    nominal_a / nominal_b provide each car's feedforward controls and
    start states; ``reference`` is the trajectory the deviation features
    are measured against (the lead's nominal when omitted).  Noise draws
    happen for both cars every step in a fixed order, so equal seeds
    give bit-identical trials regardless of gating.
    """
    dt = 1.0 / config.frame_rate
    rng = np.random.default_rng(config.seed)
    lead_name = config.lead
    if reference is None:
        reference = nominal_a if lead_name == "A" else nominal_b
    s25_ref = _nominal_outer_time(reference, OUTER_RADIUS)

    follow_k = int(round(config.entry_offset * config.frame_rate))
    cars = {}
    for name, policy, nominal in (("A", policy_a, nominal_a),
                                  ("B", policy_b, nominal_b)):
        start = nominal.states[0].copy()
        start[1] += config.lat_offset_a if name == "A" else config.lat_offset_b
        cars[name] = _CarSim(
            name=name, policy=policy, nominal=nominal,
            spawn_k=0 if name == lead_name else follow_k,
            state=start,
        )
    lead = cars[lead_name]

    window_started = False
    t_cross25 = None
    n_steps = int(config.horizon * config.frame_rate)
    for k in range(n_steps + 1):
        t = k * dt
        noise = {name: rng.normal(0.0, car.policy.noise_std)
                 for name, car in cars.items()}
        active = {name: car.active(k) for name, car in cars.items()}
        if not any(active.values()):
            if k > max(c.spawn_k for c in cars.values()):
                break
            continue

        labels = {name: car.region(INNER_RADIUS, OUTER_RADIUS)
                  if active[name] else None for name, car in cars.items()}
        both_alive = active["A"] and active["B"]
        if active[lead_name] and t_cross25 is None:
            if math.hypot(lead.state[0], lead.state[1]) <= OUTER_RADIUS:
                t_cross25 = t
        if both_alive and not window_started:
            window_started = all(
                math.hypot(c.state[0], c.state[1]) <= OUTER_RADIUS
                for c in cars.values())

        z = None
        if window_started and both_alive and t_cross25 is not None:
            a, b = cars["A"].state, cars["B"].state
            tau = s25_ref + (t - t_cross25)
            nom_lon, nom_lat = reference.position_at(max(tau, 0.0))
            z = np.array([
                b[1] - a[1],
                b[0] - a[0],
                lead.state[1] - nom_lat,
                lead.state[0] - nom_lon,
            ])
            if feature_log is not None:
                feature_log.append((t, z.copy()))

        for name, car in cars.items():
            if not active[name]:
                continue
            j = k - car.spawn_k
            if j < car.nominal.controls.shape[0]:
                u = car.nominal.controls[j].astype(float).copy()
            else:
                u = np.zeros(2)
            if z is not None and labels[name] is not None:
                u += car.policy.gain @ z
                if car.policy.nonlin_amp > 0:
                    u += car.policy.nonlin_amp * nonlinear_term(z)
            u += noise[name]
            if car.done:
                continue
            car.frames.append(Frame(
                t=t, pos_lat=float(car.state[1]), pos_lon=float(car.state[0]),
                heading=float(car.state[2]), speed=float(car.state[3]),
                accel=float(u[0]), ang_vel=float(u[1]),
            ))
            car.state = _propagate_array(car.state, u, dt)
            if car.state[3] > SPEED_LIMIT:
                raise UnstablePolicyError(
                    f"trial {trial_id}: car {name} exceeded "
                    f"{SPEED_LIMIT:g} m/s at t={t:.2f}")
        if all(car.done for car in cars.values()):
            break

    return DyadTrial(trial_id=trial_id, site=site,
                     traj_a=cars["A"].frames, traj_b=cars["B"].frames)


# ---------------------------------------------------------------------------
# Corpus generation
# ---------------------------------------------------------------------------

def generate_corpus(n_trials: int, policy: PolicySpec, *, seed: int,
                    site: str = "ISR", lead_cycle=("A", "B"),
                    speed_range=(3.0, 8.0), offset_range=(0.0, 3.0),
                    cruise_range=(CRUISE_SPEED - CRUISE_JITTER,
                                  CRUISE_SPEED + CRUISE_JITTER),
                    lat_offset_max: float = 0.6,
                    spawn_distance: float = 40.0, lane_offset: float = 1.75,
                    turn_rate: float = TURN_RATE, frame_rate: float = 18.0,
                    max_attempts: int = 20):
    """Simulate a corpus of trials with excitation variety.

    Entry speeds, cruise speeds, entry offsets, and small lateral spawn
    offsets are drawn per trial from seeded child streams; the
    follower's offset gets an extra stagger term so the designated lead
    reaches the intersection first.  Each trial is verified (designated
    lead holds, both cars complete left turns, an interaction window
    exists) and redrawn on failure.  Returns (trials, manifest).
    """
    reference = scenario_nominal(
        CRUISE_SPEED, CRUISE_SPEED, spawn_distance=spawn_distance,
        lane_offset=lane_offset, turn_rate=turn_rate, frame_rate=frame_rate)
    trials = []
    records = []
    for i in range(n_trials):
        designated = lead_cycle[i % len(lead_cycle)]
        trial_seed = derive_seed(seed, f"trial:{i}")
        rng = np.random.default_rng(trial_seed)
        trial = None
        for attempt in range(max_attempts):
            v_lead, v_follow = rng.uniform(*speed_range, size=2)
            vc_lead, vc_follow = rng.uniform(*cruise_range, size=2)
            base_offset = rng.uniform(*offset_range)
            lat_lead, lat_follow = rng.uniform(
                -lat_offset_max, lat_offset_max, size=2)
            if designated == "A":
                v_a, v_b = v_lead, v_follow
                vc_a, vc_b = vc_lead, vc_follow
                lat_a, lat_b = lat_lead, lat_follow
            else:
                v_a, v_b = v_follow, v_lead
                vc_a, vc_b = vc_follow, vc_lead
                lat_a, lat_b = lat_follow, lat_lead
            lead_is_a = designated == "A"
            nom_a = scenario_nominal(
                round(v_a, 6), round(vc_a, 6), spawn_distance=spawn_distance,
                lane_offset=lane_offset, turn_rate=turn_rate,
                follower=not lead_is_a, frame_rate=frame_rate)
            nom_b = scenario_nominal(
                round(v_b, 6), round(vc_b, 6), spawn_distance=spawn_distance,
                lane_offset=lane_offset, turn_rate=turn_rate,
                follower=lead_is_a, frame_rate=frame_rate)
            nom_lead, nom_follow = ((nom_a, nom_b) if lead_is_a
                                    else (nom_b, nom_a))
            # Delay the follower enough that the designated lead wins
            # the race to the inner circle even when slower.
            stagger = max(0.0, _nominal_outer_time(nom_lead, INNER_RADIUS)
                          - _nominal_outer_time(nom_follow, INNER_RADIUS))
            offset = base_offset + 1.05 * stagger + 0.2
            config = ScenarioConfig(
                seed=derive_seed(trial_seed, f"sim:{attempt}"),
                lead=designated, spawn_distance=spawn_distance,
                lane_offset=lane_offset, turn_rate=turn_rate,
                entry_speed_a=v_a, entry_speed_b=v_b,
                cruise_speed_a=vc_a, cruise_speed_b=vc_b,
                entry_offset=offset,
                lat_offset_a=lat_a, lat_offset_b=lat_b,
                frame_rate=frame_rate,
            )
            try:
                candidate = simulate_dyad(
                    config, policy, policy, nom_a, nom_b, reference=reference,
                    trial_id=f"{site.lower()}-{i:04d}", site=site)
                prepared = prepare_trial(candidate, rate=frame_rate)
            except (UnstablePolicyError, TooFewSamplesError):
                continue
            if exclusion_reason(prepared) is not None:
                continue
            try:
                if determine_lead(prepared) != designated:
                    continue
            except NoCrossingError:
                continue
            if interaction_window(prepared) is None:
                continue
            trial = candidate
            records.append({
                "trial_id": candidate.trial_id, "seed": config.seed,
                "lead": designated, "entry_offset": round(offset, 9),
                "speed_a": round(v_a, 9), "speed_b": round(v_b, 9),
                "cruise_a": round(vc_a, 9), "cruise_b": round(vc_b, 9),
                "lat_offset_a": round(lat_a, 9),
                "lat_offset_b": round(lat_b, 9),
                "attempts": attempt + 1,
            })
            break
        if trial is None:
            raise UnstablePolicyError(
                f"trial {i}: no stable draw in {max_attempts} attempts")
        trials.append(trial)
    manifest = {
        "master_seed": seed,
        "site": site,
        "n_trials": n_trials,
        "policy": {
            "gain": np.asarray(policy.gain).tolist(),
            "nonlin_amp": policy.nonlin_amp,
            "noise_std": list(policy.noise_std),
        },
        "scenario": {
            "spawn_distance": spawn_distance, "lane_offset": lane_offset,
            "turn_rate": turn_rate, "frame_rate": frame_rate,
            "speed_range": list(speed_range),
            "cruise_range": list(cruise_range),
            "offset_range": list(offset_range),
            "lat_offset_max": lat_offset_max,
        },
        "trials": records,
    }
    return trials, manifest
