"""Feature extraction from dyadic trajectory logs.

Turns a pair of intersection trajectories into regression datasets: the
controls each driver applied, paired with the 4-vector state feature

    z = (relative position of car B minus car A, lateral then
         longitudinal; deviation of the lead car from its nominal
         trajectory, lateral then longitudinal)

All positions live in a world frame centered on the intersection with
the longitudinal axis along the lead car's approach direction and the
lateral axis to that driver's right.  Headings are bearings in that
frame, so a left turn decreases heading.  Trajectories are resampled to
a uniform 18 Hz grid before any differencing, angular velocity is
derived from heading, and samples are pooled by (site, lead, region)
into per-control datasets.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, replace

import numpy as np

from .dataset import Dataset, Scaling, normalize_inputs, train_valid_split
from .errors import NoCrossingError, TooFewSamplesError
from .nominal import NominalTrajectory

__all__ = [
    "Frame",
    "DyadTrial",
    "FeatureSample",
    "DistributionKey",
    "REGIONS",
    "CONTROLS",
    "resample_frames",
    "derive_controls",
    "prepare_trial",
    "interaction_window",
    "determine_lead",
    "segment_regions",
    "net_intersection_turn",
    "completed_left_turn",
    "exclusion_reason",
    "build_features",
    "trial_samples",
    "group_distributions",
    "normalize_inputs",
    "train_valid_split",
    "Dataset",
    "Scaling",
]

log = logging.getLogger(__name__)

FRAME_RATE = 18.0
INNER_RADIUS = 10.0
OUTER_RADIUS = 25.0
SMOOTH_WINDOW = 5

REGION_APPROACH = "approach"
REGION_INTERSECTION = "intersection"
REGION_EXIT = "exit"
REGIONS = (REGION_APPROACH, REGION_INTERSECTION, REGION_EXIT)
CONTROLS = ("accel", "ang_vel")

# Completed left turn: net heading change across the intersection region.
# Heading is a bearing (lateral axis is the driver's right), so the
# physical 60..120 degree counterclockwise sweep is a negative change.
LEFT_TURN_MIN = -2.0 * math.pi / 3.0
LEFT_TURN_MAX = -math.pi / 3.0


@dataclass(frozen=True)
class Frame:
    """One trajectory sample.

    ``pos_lat`` / ``pos_lon`` are the lateral and longitudinal world
    coordinates in meters; ``accel`` and ``ang_vel`` may be None in raw
    logs until :func:`derive_controls` fills them in.
    """

    t: float
    pos_lat: float
    pos_lon: float
    heading: float
    speed: float
    accel: float | None = None
    ang_vel: float | None = None

    def distance(self) -> float:
        return math.hypot(self.pos_lat, self.pos_lon)


@dataclass
class DyadTrial:
    """A recorded two-car interaction."""

    trial_id: str
    site: str
    traj_a: list[Frame]
    traj_b: list[Frame]
    excluded: bool = False
    exclusion_note: str | None = None

    def traj(self, car: str) -> list[Frame]:
        if car == "A":
            return self.traj_a
        if car == "B":
            return self.traj_b
        raise ValueError(f"unknown car label {car!r}")


@dataclass(frozen=True)
class FeatureSample:
    """One regression sample: feature vector and the agent's controls."""

    z: np.ndarray
    accel: float
    ang_vel: float
    region: str
    lead: str
    agent: str
    t: float = 0.0


@dataclass(frozen=True, order=True)
class DistributionKey:
    """Pooling key: (site, lead car, region, control channel)."""

    site: str
    lead: str
    region: str
    control: str

    def label(self) -> str:
        return f"{self.site} {self.lead} {self.region} {self.control}"


def all_keys(sites=("ISR", "NYC")) -> list[DistributionKey]:
    """The full key set in report row order (regions before controls)."""
    return [
        DistributionKey(site, lead, region, control)
        for site in sites
        for lead in ("A", "B")
        for region in REGIONS
        for control in CONTROLS
    ]


# ---------------------------------------------------------------------------
# Resampling and control derivation
# ---------------------------------------------------------------------------

def _traj_arrays(traj):
    t = np.array([f.t for f in traj])
    lat = np.array([f.pos_lat for f in traj])
    lon = np.array([f.pos_lon for f in traj])
    heading = np.array([f.heading for f in traj])
    speed = np.array([f.speed for f in traj])
    return t, lat, lon, heading, speed


def resample_frames(traj, rate: float = FRAME_RATE, t_anchor: float | None = None):
    """Linear interpolation onto a uniform grid of 1/rate seconds.

    The grid is anchored at multiples of 1/rate from ``t_anchor`` (the
    trajectory's own first timestamp by default) so that two
    trajectories resampled with a common anchor share exact timestamps
    on their overlap.  Heading is unwrapped before interpolation and
    wrapped back to (-pi, pi].
    """
    if len(traj) < 2:
        raise TooFewSamplesError("resampling needs at least 2 frames")
    t, lat, lon, heading, speed = _traj_arrays(traj)
    if np.any(np.diff(t) <= 0):
        raise ValueError("frame times must be strictly increasing")
    anchor = t[0] if t_anchor is None else t_anchor
    dt = 1.0 / rate
    k0 = math.ceil((t[0] - anchor) / dt - 1e-9)
    k1 = math.floor((t[-1] - anchor) / dt + 1e-9)
    if k1 < k0 + 1:
        raise TooFewSamplesError("trajectory spans fewer than two grid frames")
    grid = anchor + np.arange(k0, k1 + 1) * dt
    unwrapped = np.unwrap(heading)
    accel_raw = [f.accel for f in traj]
    have_accel = all(a is not None for a in accel_raw)
    out = []
    lat_g = np.interp(grid, t, lat)
    lon_g = np.interp(grid, t, lon)
    head_g = np.interp(grid, t, unwrapped)
    speed_g = np.interp(grid, t, speed)
    acc_g = np.interp(grid, t, np.array(accel_raw, dtype=float)) if have_accel else None
    for i, tg in enumerate(grid):
        wrapped = math.remainder(head_g[i], 2.0 * math.pi)
        if wrapped <= -math.pi:
            wrapped += 2.0 * math.pi
        out.append(Frame(
            t=float(tg),
            pos_lat=float(lat_g[i]),
            pos_lon=float(lon_g[i]),
            heading=wrapped,
            speed=float(speed_g[i]),
            accel=float(acc_g[i]) if acc_g is not None else None,
        ))
    return out


def _central_diff(values: np.ndarray, t: np.ndarray) -> np.ndarray:
    d = np.empty_like(values)
    d[1:-1] = (values[2:] - values[:-2]) / (t[2:] - t[:-2])
    d[0] = (values[1] - values[0]) / (t[1] - t[0])
    d[-1] = (values[-1] - values[-2]) / (t[-1] - t[-2])
    return d


def _moving_average(values: np.ndarray, window: int) -> np.ndarray:
    # Centered window, shrinking symmetrically at the edges.
    half = window // 2
    out = np.empty_like(values)
    n = len(values)
    for i in range(n):
        h = min(half, i, n - 1 - i)
        out[i] = values[i - h:i + h + 1].mean()
    return out


def derive_controls(traj, window: int = SMOOTH_WINDOW):
    """Populate accel and ang_vel on every frame.

    Angular velocity is the central finite difference of the unwrapped
    heading, smoothed by a centered moving average of ``window`` frames.
    Acceleration passes through when the log carries it, otherwise it is
    the central difference of speed.
    """
    if window % 2 != 1:
        raise ValueError("smoothing window must be odd")
    if len(traj) < window:
        raise TooFewSamplesError(
            f"need at least {window} frames to derive controls, got {len(traj)}"
        )
    t, _, _, heading, speed = _traj_arrays(traj)
    omega = _central_diff(np.unwrap(heading), t)
    omega = _moving_average(omega, window)
    if all(f.accel is not None for f in traj):
        accel = np.array([f.accel for f in traj], dtype=float)
    else:
        accel = _central_diff(speed, t)
    return [
        replace(f, accel=float(accel[i]), ang_vel=float(omega[i]))
        for i, f in enumerate(traj)
    ]


def prepare_trial(trial: DyadTrial, rate: float = FRAME_RATE,
                  window: int = SMOOTH_WINDOW) -> DyadTrial:
    """Resample both cars onto one grid phase and derive controls."""
    anchor = min(trial.traj_a[0].t, trial.traj_b[0].t)
    return replace(
        trial,
        traj_a=derive_controls(resample_frames(trial.traj_a, rate, anchor), window),
        traj_b=derive_controls(resample_frames(trial.traj_b, rate, anchor), window),
    )


# ---------------------------------------------------------------------------
# Windowing, lead determination, segmentation
# ---------------------------------------------------------------------------

def _first_entry_time(traj, radius: float) -> float | None:
    for f in traj:
        if f.distance() <= radius:
            return f.t
    return None


def _interp_distance(traj, t: float) -> float | None:
    times = [f.t for f in traj]
    if t < times[0] or t > times[-1]:
        return None
    lat = float(np.interp(t, times, [f.pos_lat for f in traj]))
    lon = float(np.interp(t, times, [f.pos_lon for f in traj]))
    return math.hypot(lat, lon)


def interaction_window(trial: DyadTrial, radius: float = OUTER_RADIUS):
    """Time interval where both cars are engaged, or None.

    Starts at the first time both cars are simultaneously within
    ``radius`` of the intersection center; ends when either car runs out
    of analysis-region frames (per :func:`segment_regions`).
    """
    start = None
    for f in trial.traj_a:
        if f.distance() > radius:
            continue
        other = _interp_distance(trial.traj_b, f.t)
        if other is not None and other <= radius:
            start = f.t
            break
    if start is None:
        # Symmetric scan in case B's grid starts earlier
        for f in trial.traj_b:
            if f.distance() > radius:
                continue
            other = _interp_distance(trial.traj_a, f.t)
            if other is not None and other <= radius:
                start = f.t
                break
    if start is None:
        return None
    ends = []
    for traj in (trial.traj_a, trial.traj_b):
        labels = segment_regions(traj)
        kept = [f.t for f, lab in zip(traj, labels) if lab is not None]
        if not kept:
            return None
        ends.append(kept[-1])
    end = min(ends)
    if end < start:
        return None
    return (start, end)


def determine_lead(trial: DyadTrial, radius: float = INNER_RADIUS) -> str:
    """The car that first enters the intersection circle.

    Exact ties break toward A with a logged warning.
    """
    t_a = _first_entry_time(trial.traj_a, radius)
    t_b = _first_entry_time(trial.traj_b, radius)
    if t_a is None and t_b is None:
        raise NoCrossingError(
            f"trial {trial.trial_id}: neither car enters the {radius:g} m circle"
        )
    if t_b is None:
        return "A"
    if t_a is None:
        return "B"
    if t_a == t_b:
        log.warning("trial %s: simultaneous intersection entry, breaking tie toward A",
                    trial.trial_id)
        return "A"
    return "A" if t_a < t_b else "B"


def segment_regions(traj, inner: float = INNER_RADIUS,
                    outer: float = OUTER_RADIUS):
    """Region label per frame; None marks dropped frames.

    approach: within [inner, outer] before first entering the inner
    circle; intersection: inside the inner circle; exit: back out of the
    inner circle after having been inside, until distance exceeds
    ``outer`` (everything after that is dropped for good).
    """
    labels: list[str | None] = []
    entered = False
    done = False
    for f in traj:
        d = f.distance()
        if done:
            labels.append(None)
            continue
        if d < inner:
            entered = True
            labels.append(REGION_INTERSECTION)
        elif d <= outer:
            labels.append(REGION_EXIT if entered else REGION_APPROACH)
        else:
            if entered:
                done = True
            labels.append(None)
    return labels


def net_intersection_turn(traj, inner: float = INNER_RADIUS) -> float | None:
    """Net unwrapped heading change across the intersection region."""
    labels = segment_regions(traj, inner=inner)
    headings = [f.heading for f, lab in zip(traj, labels)
                if lab == REGION_INTERSECTION]
    if len(headings) < 2:
        return None
    unwrapped = np.unwrap(np.array(headings))
    return float(unwrapped[-1] - unwrapped[0])


def completed_left_turn(traj, inner: float = INNER_RADIUS) -> bool:
    net = net_intersection_turn(traj, inner=inner)
    return net is not None and LEFT_TURN_MIN <= net <= LEFT_TURN_MAX


def exclusion_reason(trial: DyadTrial) -> str | None:
    """Why a trial leaves the analysis, or None if it stays.

    A trial is excluded when either driver does not complete a left
    turn through the intersection circle.
    """
    for car in ("A", "B"):
        traj = trial.traj(car)
        net = net_intersection_turn(traj)
        if net is None:
            return f"car {car} does not cross the intersection"
        if not (LEFT_TURN_MIN <= net <= LEFT_TURN_MAX):
            return f"car {car} not a left turn (net {math.degrees(net):.0f} deg)"
    return None


# ---------------------------------------------------------------------------
# Feature construction
# ---------------------------------------------------------------------------

def _nominal_outer_crossing(nominal: NominalTrajectory,
                            outer: float = OUTER_RADIUS) -> float:
    dist = np.hypot(nominal.states[:, 0], nominal.states[:, 1])
    idx = np.nonzero(dist <= outer)[0]
    if idx.size == 0:
        raise NoCrossingError("nominal trajectory never enters the outer radius")
    return float(idx[0] * nominal.dt)


def build_features(trial: DyadTrial, lead: str, nominal: NominalTrajectory,
                   agent: str, *, inner: float = INNER_RADIUS,
                   outer: float = OUTER_RADIUS):
    """FeatureSamples for one agent of a prepared (grid-aligned) trial.

    z1, z2 = car B minus car A position (lateral, longitudinal);
    z3, z4 = lead car position minus the nominal position at equal
    elapsed time since each crossed the outer radius.  Samples cover
    frames inside the interaction window where the agent has a region
    label; frames past the nominal's coverage are truncated with a
    warning.
    """
    window = interaction_window(trial, radius=outer)
    if window is None:
        return []
    t_start, t_end = window
    lead_traj = trial.traj(lead)
    agent_traj = trial.traj(agent)
    other_traj = trial.traj("B" if agent == "A" else "A")
    t_lead25 = _first_entry_time(lead_traj, outer)
    if t_lead25 is None:
        return []
    s25 = _nominal_outer_crossing(nominal, outer)

    lead_by_t = {round(f.t * FRAME_RATE): f for f in lead_traj}
    other_by_t = {round(f.t * FRAME_RATE): f for f in other_traj}
    labels = segment_regions(agent_traj, inner=inner, outer=outer)

    samples = []
    truncated = False
    for f, label in zip(agent_traj, labels):
        if label is None or f.t < t_start - 1e-9 or f.t > t_end + 1e-9:
            continue
        key = round(f.t * FRAME_RATE)
        lead_f = lead_by_t.get(key)
        other_f = other_by_t.get(key)
        if lead_f is None or other_f is None:
            continue
        tau = s25 + (f.t - t_lead25)
        if tau > nominal.duration + 1e-9:
            truncated = True
            continue
        nom_lon, nom_lat = nominal.position_at(max(tau, 0.0))
        frame_a = f if agent == "A" else other_f
        frame_b = other_f if agent == "A" else f
        z = np.array([
            frame_b.pos_lat - frame_a.pos_lat,
            frame_b.pos_lon - frame_a.pos_lon,
            lead_f.pos_lat - nom_lat,
            lead_f.pos_lon - nom_lon,
        ])
        samples.append(FeatureSample(
            z=z, accel=float(f.accel), ang_vel=float(f.ang_vel),
            region=label, lead=lead, agent=agent, t=f.t,
        ))
    if truncated:
        log.warning("trial %s agent %s: nominal shorter than window, truncated",
                    trial.trial_id, agent)
    return samples


def trial_samples(trial: DyadTrial, nominal: NominalTrajectory, *,
                  inner: float = INNER_RADIUS, outer: float = OUTER_RADIUS,
                  prepared: bool = False):
    """(lead, {agent: samples}) for one trial; empty on exclusion."""
    if trial.excluded:
        return None, {}
    work = trial if prepared else prepare_trial(trial)
    if exclusion_reason(work) is not None:
        return None, {}
    lead = determine_lead(work, radius=inner)
    per_agent = {
        agent: build_features(work, lead, nominal, agent,
                              inner=inner, outer=outer)
        for agent in ("A", "B")
    }
    return lead, per_agent


def group_distributions(trials, nominal: NominalTrajectory, *,
                        inner: float = INNER_RADIUS,
                        outer: float = OUTER_RADIUS,
                        prepared: bool = False):
    """Pool per-frame samples into per-(site, lead, region) datasets.

    Each pooled sample set appears under two keys, one per control
    channel, with that channel's observations as outputs.  Excluded
    trials contribute nothing; empty groups are absent keys.
    """
    pools: dict[tuple, list[FeatureSample]] = {}
    n_in = 0
    n_excluded = 0
    for trial in trials:
        lead, per_agent = trial_samples(
            trial, nominal, inner=inner, outer=outer, prepared=prepared)
        if lead is None:
            n_excluded += 1
            continue
        for agent, samples in per_agent.items():
            n_in += len(samples)
            for s in samples:
                pools.setdefault((trial.site, lead, s.region), []).append(s)

    out: dict[DistributionKey, Dataset] = {}
    for (site, lead, region), samples in sorted(pools.items()):
        z = np.array([s.z for s in samples])
        for control in CONTROLS:
            y = np.array([getattr(s, control) for s in samples])
            out[DistributionKey(site, lead, region, control)] = Dataset(z, y)
        log.info("distribution %s %s %s: %d samples", site, lead, region,
                 len(samples))
    log.info("pooled %d samples from %d trials (%d excluded)",
             n_in, len(list(trials)) if hasattr(trials, "__len__") else -1,
             n_excluded)
    return out
