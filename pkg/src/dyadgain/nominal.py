"""Nominal left-turn reference trajectories for a unicycle vehicle.

State is (x, y, heading, speed) with dynamics

    x' = v cos(theta),  y' = v sin(theta),  theta' = omega,  v' = a

integrated by a fourth-order Runge-Kutta step.  Throughout the package x
is the longitudinal world axis (positive along the lead car's approach
direction) and y the lateral axis (positive to the approaching driver's
right), so heading is a bearing measured from the approach axis and a
left turn has omega < 0.

Two constructors are provided: an analytic straight/arc/straight
reference, and a successive-convexification solver that minimizes
control effort inside a lane-keeping corridor, using the analytic path
as its initial guess.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field

import cvxpy as cp
import numpy as np

from .errors import InfeasibleProblemError

DEFAULT_DT = 1.0 / 18.0

# Trust region schedule and dynamics-slack penalty for the convex steps.
TRUST_RADIUS_INIT = 2.0
TRUST_RADIUS_MIN = 1e-4
TRUST_SHRINK = 0.5
SLACK_WEIGHT = 1e4
MAX_ITERS = 30
CONVERGENCE_TOL = 1e-3


@dataclass(frozen=True)
class UnicycleState:
    """Planar pose plus scalar speed; speed is never negative."""

    pos: np.ndarray
    heading: float
    speed: float

    def __post_init__(self):
        pos = np.asarray(self.pos, dtype=float).ravel()
        if pos.shape != (2,):
            raise ValueError("pos must be a 2-vector")
        if not np.all(np.isfinite(pos)) or not (
            np.isfinite(self.heading) and np.isfinite(self.speed)
        ):
            raise ValueError("state contains non-finite values")
        if self.speed < 0.0:
            raise ValueError("speed must be nonnegative")
        object.__setattr__(self, "pos", pos)

    def as_array(self) -> np.ndarray:
        return np.array([self.pos[0], self.pos[1], self.heading, self.speed])

    @staticmethod
    def from_array(arr) -> "UnicycleState":
        arr = np.asarray(arr, dtype=float)
        return UnicycleState(pos=arr[:2], heading=float(arr[2]),
                             speed=float(max(arr[3], 0.0)))


@dataclass(frozen=True)
class ConvexRegion:
    """Intersection of half-planes: normals @ p <= offsets."""

    normals: np.ndarray
    offsets: np.ndarray

    def __post_init__(self):
        normals = np.atleast_2d(np.asarray(self.normals, dtype=float))
        offsets = np.asarray(self.offsets, dtype=float).ravel()
        if normals.shape[0] != offsets.shape[0] or normals.shape[1] != 2:
            raise ValueError("normals must be (m, 2) with matching offsets")
        object.__setattr__(self, "normals", normals)
        object.__setattr__(self, "offsets", offsets)

    def contains(self, p, tol: float = 1e-6) -> bool:
        p = np.asarray(p, dtype=float).ravel()
        return bool(np.all(self.normals @ p <= self.offsets + tol))


@dataclass(frozen=True)
class NominalProblem:
    """Fixed-time minimum-effort steering problem inside a corridor."""

    start: UnicycleState
    goal: UnicycleState
    corridor: tuple[ConvexRegion, ...]
    n_nodes: int
    total_time: float
    a_max: float = 3.0
    omega_max: float = 1.5

    def __post_init__(self):
        if self.n_nodes < 10:
            raise ValueError("need at least 10 nodes")
        if len(self.corridor) != self.n_nodes:
            raise ValueError("corridor must provide one region per node")
        if self.total_time <= 0:
            raise ValueError("total_time must be positive")


@dataclass
class NominalTrajectory:
    """Sampled reference: states (N, 4), controls (N-1, 2) of (a, omega)."""

    states: np.ndarray
    controls: np.ndarray
    dt: float
    converged: bool = True
    objective_trace: tuple = ()

    def __post_init__(self):
        self.states = np.atleast_2d(np.asarray(self.states, dtype=float))
        self.controls = np.atleast_2d(np.asarray(self.controls, dtype=float))
        if self.states.shape[1] != 4 or self.controls.shape[1] != 2:
            raise ValueError("states must be (N, 4) and controls (N-1, 2)")
        if self.controls.shape[0] != self.states.shape[0] - 1:
            raise ValueError("need exactly N-1 controls for N states")
        if self.dt <= 0:
            raise ValueError("dt must be positive")

    @property
    def n(self) -> int:
        return self.states.shape[0]

    @property
    def duration(self) -> float:
        return (self.n - 1) * self.dt

    @property
    def times(self) -> np.ndarray:
        return np.arange(self.n) * self.dt

    def state(self, k: int) -> UnicycleState:
        return UnicycleState.from_array(self.states[k])

    def position_at(self, t: float) -> np.ndarray:
        """Linear interpolation of position at elapsed time t (clamped)."""
        t = float(np.clip(t, 0.0, self.duration))
        x = np.interp(t, self.times, self.states[:, 0])
        y = np.interp(t, self.times, self.states[:, 1])
        return np.array([x, y])


def _deriv(s: np.ndarray, control) -> np.ndarray:
    v = max(s[3], 0.0)
    return np.array([
        v * math.cos(s[2]),
        v * math.sin(s[2]),
        control[1],
        control[0],
    ])


def propagate_unicycle(state: UnicycleState, control, dt: float) -> UnicycleState:
    """One RK4 step of the unicycle dynamics; speed clamped at zero."""
    if dt <= 0:
        raise ValueError("dt must be positive")
    s = state.as_array()
    k1 = _deriv(s, control)
    k2 = _deriv(s + 0.5 * dt * k1, control)
    k3 = _deriv(s + 0.5 * dt * k2, control)
    k4 = _deriv(s + dt * k3, control)
    out = s + dt / 6.0 * (k1 + 2 * k2 + 2 * k3 + k4)
    out[3] = max(out[3], 0.0)
    return UnicycleState.from_array(out)


def _propagate_array(s: np.ndarray, control, dt: float) -> np.ndarray:
    k1 = _deriv(s, control)
    k2 = _deriv(s + 0.5 * dt * k1, control)
    k3 = _deriv(s + 0.5 * dt * k2, control)
    k4 = _deriv(s + dt * k3, control)
    out = s + dt / 6.0 * (k1 + 2 * k2 + 2 * k3 + k4)
    out[3] = max(out[3], 0.0)
    return out


def rollout(start: UnicycleState, controls: np.ndarray, dt: float) -> np.ndarray:
    """Integrate a control sequence; returns the (N, 4) state array."""
    controls = np.atleast_2d(controls)
    states = np.zeros((controls.shape[0] + 1, 4))
    states[0] = start.as_array()
    for k in range(controls.shape[0]):
        states[k + 1] = _propagate_array(states[k], controls[k], dt)
    return states


def wrap_angle(a: float) -> float:
    """Wrap to (-pi, pi]."""
    w = math.fmod(a + math.pi, 2.0 * math.pi)
    if w <= 0.0:
        w += 2.0 * math.pi
    return w - math.pi


def analytic_nominal(
    entry: UnicycleState,
    exit_heading: float,
    turn_radius: float,
    speed: float,
    *,
    approach_length: float,
    exit_length: float,
    dt: float = DEFAULT_DT,
) -> NominalTrajectory:
    """Straight / circular-arc / straight reference at constant speed.

    The turn direction and magnitude come from the wrapped heading
    difference; the arc's angular rate is speed / turn_radius with the
    sign of the heading change.  Controls are per-interval, and the
    intervals straddling the arc boundaries blend the arc rate by
    overlap fraction so the net heading change is exact.  States are
    produced by integrating those controls, which makes the trajectory
    dynamically feasible by construction.
    """
    if turn_radius <= 0:
        raise ValueError("turn_radius must be positive")
    if speed <= 0:
        raise ValueError("speed must be positive")
    if approach_length < 0 or exit_length < 0:
        raise ValueError("segment lengths must be nonnegative")
    dtheta = wrap_angle(exit_heading - entry.heading)
    arc_len = abs(dtheta) * turn_radius
    omega_arc = 0.0 if dtheta == 0.0 else math.copysign(speed / turn_radius, dtheta)
    t_arc_start = approach_length / speed
    t_arc_end = t_arc_start + arc_len / speed
    total_time = t_arc_end + exit_length / speed
    n_intervals = max(int(math.ceil(total_time / dt - 1e-9)), 1)
    controls = np.zeros((n_intervals, 2))
    for k in range(n_intervals):
        lo, hi = k * dt, (k + 1) * dt
        overlap = max(0.0, min(hi, t_arc_end) - max(lo, t_arc_start))
        controls[k, 1] = omega_arc * overlap / dt
    states = rollout(entry, controls, dt)
    return NominalTrajectory(states=states, controls=controls, dt=dt)


def corridor_from_path(
    positions: np.ndarray, headings: np.ndarray, half_width: float
) -> tuple[ConvexRegion, ...]:
    """Per-node lateral bounds of +-half_width around a reference path.

    Each node gets the pair of half-planes |n . (p - p_ref)| <= w where
    n is the left normal of the reference heading at that node.
    """
    positions = np.atleast_2d(positions)
    regions = []
    for p, th in zip(positions, np.asarray(headings, dtype=float)):
        n = np.array([-math.sin(th), math.cos(th)])
        regions.append(
            ConvexRegion(
                normals=np.array([n, -n]),
                offsets=np.array([n @ p + half_width, -(n @ p) + half_width]),
            )
        )
    return tuple(regions)


def _resample_reference(traj: NominalTrajectory, n_nodes: int, total_time: float):
    """Interpolate a trajectory onto the solver's node grid.

    The source timeline is scaled to fill the requested total time, so
    the guess contributes its path shape even when its own duration
    differs.
    """
    t_new = np.linspace(0.0, total_time, n_nodes)
    scale = total_time / traj.duration if traj.duration > 0 else 1.0
    t_old = traj.times * scale
    cols = []
    for j in range(4):
        col = traj.states[:, j]
        if j == 2:
            col = np.unwrap(col)
        cols.append(np.interp(t_new, t_old, col))
    states = np.column_stack(cols)
    dt = total_time / (n_nodes - 1)
    controls = np.zeros((n_nodes - 1, 2))
    controls[:, 0] = np.diff(states[:, 3]) / dt
    controls[:, 1] = np.diff(states[:, 2]) / dt
    return states, controls


def _arc_line_guess(problem: NominalProblem) -> NominalTrajectory:
    """Initial guess: straight / arc / straight between start and goal.

    For matched headings this degenerates to a straight line; otherwise
    the largest turn radius keeping both straight segments nonnegative
    is used.  Falls back to direct state interpolation if the geometry
    does not admit the construction (the solver's slack absorbs it).
    """
    start, goal = problem.start, problem.goal
    dtheta = wrap_angle(goal.heading - start.heading)
    speed = max(0.5 * (start.speed + goal.speed), 0.5)
    hs = np.array([math.cos(start.heading), math.sin(start.heading)])
    hg = np.array([math.cos(goal.heading), math.sin(goal.heading)])
    gap = goal.pos - start.pos
    if abs(dtheta) < 1e-9:
        dist = float(gap @ hs)
        lateral = float(np.linalg.norm(gap - dist * hs))
        if dist > 0 and lateral < 1e-6:
            traj = analytic_nominal(
                start, goal.heading, turn_radius=1.0, speed=speed,
                approach_length=dist, exit_length=0.0,
            )
            return traj
    else:
        # Arc displacement is linear in the radius: start + L1 hs + r d
        # + L2 hg = goal, so L1(r), L2(r) solve a 2x2 linear system.
        sgn = math.copysign(1.0, dtheta)
        n_left = np.array([-math.sin(start.heading), math.cos(start.heading)])
        center_dir = sgn * n_left
        n_left_g = np.array([-math.sin(goal.heading), math.cos(goal.heading)])
        d_unit = center_dir - sgn * n_left_g
        basis = np.column_stack([hs, hg])
        try:
            base = np.linalg.solve(basis, gap)
            slope = np.linalg.solve(basis, d_unit)
        except np.linalg.LinAlgError:
            base = slope = None
        if base is not None:
            # Prefer lane-scale radii; fall back toward the extremes
            r_hi = 50.0
            for coeff, inter in zip(slope, base):
                if coeff > 1e-12:
                    r_hi = min(r_hi, max(inter, 0.0) / coeff)
            ladder = [8.0, 10.0, 12.0, 6.0, 4.0, 2.0, 1.0, 0.5, r_hi * 0.95]
            for r in (r for r in ladder if r > 1e-3):
                l1, l2 = base - slope * r
                if l1 >= -1e-9 and l2 >= -1e-9:
                    return analytic_nominal(
                        start, goal.heading, turn_radius=r, speed=speed,
                        approach_length=max(l1, 0.0),
                        exit_length=max(l2, 0.0),
                    )
    # Degenerate geometry: interpolate states directly.
    n = problem.n_nodes
    states = np.linspace(start.as_array(), goal.as_array(), n)
    states[:, 2] = start.heading + np.linspace(0.0, 1.0, n) * dtheta
    dt = problem.total_time / (n - 1)
    controls = np.zeros((n - 1, 2))
    controls[:, 0] = np.diff(states[:, 3]) / dt
    controls[:, 1] = np.diff(states[:, 2]) / dt
    return NominalTrajectory(states=states, controls=controls, dt=dt)


def _linearize(states: np.ndarray, controls: np.ndarray, dt: float):
    """Finite-difference Jacobians of the RK4 step at each node."""
    n = controls.shape[0]
    phis = np.zeros((n, 4))
    a_mats = np.zeros((n, 4, 4))
    b_mats = np.zeros((n, 4, 2))
    eps = 1e-6
    for k in range(n):
        s, u = states[k], controls[k]
        phis[k] = _propagate_array(s, u, dt)
        for j in range(4):
            ds = np.zeros(4)
            ds[j] = eps
            a_mats[k, :, j] = (
                _propagate_array(s + ds, u, dt) - _propagate_array(s - ds, u, dt)
            ) / (2 * eps)
        for j in range(2):
            du = np.zeros(2)
            du[j] = eps
            b_mats[k, :, j] = (
                _propagate_array(s, u + du, dt) - _propagate_array(s, u - du, dt)
            ) / (2 * eps)
    return phis, a_mats, b_mats


def solve_nominal(problem: NominalProblem) -> NominalTrajectory:
    """Minimum-effort trajectory through the corridor via SCvx.

    Repeatedly linearizes the RK4 dynamics about the current reference
    and solves a convex quadratic subproblem (effort objective, slacked
    linearized dynamics, corridor and control bounds, position trust
    region).  Steps that fail to decrease the penalized objective shrink
    the trust region; convergence is declared when the accepted state
    update falls below 1e-3 m.
    """
    if not problem.corridor[0].contains(problem.start.pos):
        raise InfeasibleProblemError("start position outside its corridor region")
    if not problem.corridor[-1].contains(problem.goal.pos):
        raise InfeasibleProblemError("goal position outside its corridor region")

    n = problem.n_nodes
    dt = problem.total_time / (n - 1)
    ref_states, ref_controls = _resample_reference(
        _arc_line_guess(problem), n, problem.total_time
    )
    # Heading continuity matters for linearization; keep it unwrapped.
    ref_states[:, 2] = np.unwrap(ref_states[:, 2])
    # Project the guess into the corridor so the first subproblem's
    # trust region does not fight the half-plane constraints.
    for i in range(n):
        region = problem.corridor[min(i, len(problem.corridor) - 1)]
        p = ref_states[i, :2]
        for _ in range(4):
            gaps = region.normals @ p - region.offsets
            worst = int(np.argmax(gaps))
            if gaps[worst] <= 0.0:
                break
            p = p - gaps[worst] * region.normals[worst]
        ref_states[i, :2] = p

    radius = TRUST_RADIUS_INIT
    prev_obj = None
    converged = False
    trace = []
    for _ in range(MAX_ITERS):
        phis, a_mats, b_mats = _linearize(ref_states, ref_controls, dt)
        sol = None
        stalled = False
        while radius >= TRUST_RADIUS_MIN:
            cand = _solve_subproblem(
                problem, ref_states, ref_controls, phis, a_mats, b_mats, dt, radius
            )
            if cand is not None and (prev_obj is None or cand.obj <= prev_obj + 1e-9):
                sol = cand
                break
            # A solvable step whose objective rose is a stall, not
            # infeasibility; only solver failure all the way down the
            # trust-region ladder is fatal.
            stalled = stalled or cand is not None
            radius *= TRUST_SHRINK
        if sol is None:
            if stalled and prev_obj is not None:
                break
            raise InfeasibleProblemError(
                "convex subproblem failed below the minimum trust radius"
            )
        step = float(np.max(np.abs(sol.states[:, :2] - ref_states[:, :2])))
        ref_states, ref_controls = sol.states, sol.controls
        prev_obj = sol.obj
        trace.append(sol.obj)
        if step < CONVERGENCE_TOL and sol.max_slack < 1e-7:
            converged = True
            break

    states = np.array(ref_states)
    states[:, 2] = [wrap_angle(a) for a in states[:, 2]]
    states[:, 3] = np.maximum(states[:, 3], 0.0)
    return NominalTrajectory(
        states=states, controls=np.array(ref_controls), dt=dt,
        converged=converged, objective_trace=tuple(trace),
    )


@dataclass
class _Subproblem:
    states: np.ndarray
    controls: np.ndarray
    obj: float
    max_slack: float


def _solve_subproblem(problem, ref_states, ref_controls, phis, a_mats, b_mats,
                      dt, radius):
    n = problem.n_nodes
    s = cp.Variable((n, 4))
    u = cp.Variable((n - 1, 2))
    nu = cp.Variable((n - 1, 4))
    cons = [
        s[0] == problem.start.as_array(),
        s[n - 1, 0] == problem.goal.pos[0],
        s[n - 1, 1] == problem.goal.pos[1],
        s[n - 1, 3] == problem.goal.speed,
        cp.abs(u[:, 0]) <= problem.a_max,
        cp.abs(u[:, 1]) <= problem.omega_max,
        s[:, 3] >= 0,
    ]
    goal_heading = problem.goal.heading
    # Match the goal heading on the unwrapped branch of the reference.
    branch = round((ref_states[-1, 2] - goal_heading) / (2 * math.pi))
    cons.append(s[n - 1, 2] == goal_heading + branch * 2 * math.pi)
    for k in range(n - 1):
        rhs = (
            phis[k]
            + a_mats[k] @ (s[k] - ref_states[k])
            + b_mats[k] @ (u[k] - ref_controls[k])
            + nu[k]
        )
        cons.append(s[k + 1] == rhs)
    for k, region in enumerate(problem.corridor):
        cons.append(region.normals @ s[k, :2] <= region.offsets)
    cons.append(cp.norm_inf(s[:, :2] - ref_states[:, :2]) <= radius)
    objective = cp.sum_squares(u) * dt + SLACK_WEIGHT * cp.sum(cp.abs(nu))
    prob = cp.Problem(cp.Minimize(objective), cons)
    try:
        prob.solve(solver=cp.CLARABEL)
    except cp.SolverError:
        return None
    if prob.status not in ("optimal", "optimal_inaccurate") or s.value is None:
        return None
    return _Subproblem(
        states=np.array(s.value),
        controls=np.array(u.value),
        obj=float(prob.value),
        max_slack=float(np.max(np.abs(nu.value))),
    )


def left_turn_problem(
    *,
    approach: float = 25.0,
    exit_dist: float = 25.0,
    turn_radius: float = 8.0,
    speed: float = 5.0,
    half_width: float = 2.0,
    n_nodes: int = 50,
) -> NominalProblem:
    """Standard left-turn instance: approach from `approach` meters out,
    exit `exit_dist` meters along the cross road, corridor of lateral
    half-width around the arc-line path."""
    start = UnicycleState(pos=[-approach, 0.0], heading=0.0, speed=speed)
    goal = UnicycleState(pos=[0.0, -exit_dist], heading=-math.pi / 2.0, speed=speed)
    reference = analytic_nominal(
        start, goal.heading, turn_radius, speed,
        approach_length=approach - turn_radius,
        exit_length=exit_dist - turn_radius,
    )
    path_len = approach - turn_radius + abs(
        wrap_angle(goal.heading - start.heading)
    ) * turn_radius + exit_dist - turn_radius
    total_time = path_len / speed
    states, _ = _resample_reference(reference, n_nodes, total_time)
    corridor = corridor_from_path(states[:, :2], states[:, 2], half_width)
    return NominalProblem(
        start=start, goal=goal, corridor=corridor,
        n_nodes=n_nodes, total_time=total_time,
    )


def straight_problem(
    *, length: float = 40.0, speed: float = 5.0, half_width: float = 2.0,
    n_nodes: int = 50,
) -> NominalProblem:
    """Collinear start and goal with matched headings in a straight corridor."""
    start = UnicycleState(pos=[0.0, 0.0], heading=0.0, speed=speed)
    goal = UnicycleState(pos=[length, 0.0], heading=0.0, speed=speed)
    xs = np.linspace(0.0, length, n_nodes)
    positions = np.column_stack([xs, np.zeros(n_nodes)])
    corridor = corridor_from_path(positions, np.zeros(n_nodes), half_width)
    return NominalProblem(
        start=start, goal=goal, corridor=corridor,
        n_nodes=n_nodes, total_time=length / speed,
    )


# ---------------------------------------------------------------------------
# CSV import/export
# ---------------------------------------------------------------------------

NOMINAL_COLUMNS = ("k", "t_s", "pos_lat_m", "pos_lon_m", "heading_rad",
                   "speed_mps", "a_mps2", "omega_radps")


def write_nominal_csv(traj: NominalTrajectory, path) -> None:
    """One row per state; control columns are per-interval, so the final
    row leaves them empty."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(NOMINAL_COLUMNS)
        for k in range(traj.n):
            x, y, heading, speed = traj.states[k]
            if k < traj.n - 1:
                a, omega = traj.controls[k]
                ctrl = [f"{a:.12g}", f"{omega:.12g}"]
            else:
                ctrl = ["", ""]
            writer.writerow([
                k, f"{k * traj.dt:.12g}", f"{y:.12g}", f"{x:.12g}",
                f"{heading:.12g}", f"{speed:.12g}", *ctrl,
            ])


def read_nominal_csv(path) -> NominalTrajectory:
    rows = []
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        missing = set(NOMINAL_COLUMNS) - set(reader.fieldnames or ())
        if missing:
            raise ValueError(f"nominal CSV missing columns: {sorted(missing)}")
        for row in reader:
            rows.append(row)
    if len(rows) < 2:
        raise ValueError("nominal CSV must contain at least two states")
    states = np.zeros((len(rows), 4))
    controls = np.zeros((len(rows) - 1, 2))
    times = np.zeros(len(rows))
    for i, row in enumerate(rows):
        states[i] = [
            float(row["pos_lon_m"]),
            float(row["pos_lat_m"]),
            float(row["heading_rad"]),
            float(row["speed_mps"]),
        ]
        times[i] = float(row["t_s"])
        if i < len(rows) - 1:
            controls[i] = [float(row["a_mps2"]), float(row["omega_radps"])]
    dt = float(np.mean(np.diff(times)))
    return NominalTrajectory(states=states, controls=controls, dt=dt)
