"""Two-car reach-avoid game on a bounded plane.

The attacker (follower, reward collector) tries to reach a goal disc on the
lower edge; the defender (leader) tries to stop it.  Each car moves at a
constant speed and turns by ``-1, 0, +1`` times ``turn_angle`` per step; a
turn of +1 increases the heading (counter-clockwise).  Deterministic policies
may also emit any turn in ``[-1, 1]``, which makes the dynamics differentiable
almost everywhere.

Headings are kept in degrees in ``[0, 360)`` so that turn sequences on the
30 degree lattice are exact.  A game state is the vector
``[def_x, def_y, def_heading, att_x, att_y, att_heading]``.
"""
from __future__ import annotations

import csv
import math
from dataclasses import asdict, dataclass, field, fields

import numpy as np

from ._backend import kernels
from .errors import ConfigError
from .mdpgame import ActionSpace, MarkovStackelbergGame, PathwiseEstimate, StepGrads, TrajectoryBatch

DEG = math.pi / 180.0
TURNS = (-1.0, 0.0, 1.0)
FEATURE_NAMES = (
    "attacker_x", "attacker_y", "attacker_cos", "attacker_sin",
    "defender_x", "defender_y", "defender_cos", "defender_sin",
    "attacker_goal_distance", "attacker_to_defender_angle", "player_distance",
    "attacker_to_goal_angle", "defender_to_goal_angle",
)
DONE_NONE, DONE_TARGET, DONE_CAPTURE = 0, 1, 2
_DONE_NAMES = {DONE_TARGET: "target", DONE_CAPTURE: "capture"}


@dataclass
class ReachAvoidConfig:
    env_min: float = -3.0
    env_max: float = 3.0
    goal_center: tuple = (0.0, -3.0)
    goal_radius: float = 1.0
    capture_radius: float = 0.3
    speed: float = 0.25
    turn_angle: float = 30.0            # degrees
    max_steps: int = 50
    gamma: float = 0.99
    reward_mode: str = "stackelberg_hard"   # or gne_soft
    reward_kind: str = "reach_distance"     # or reach_probability
    target_bonus: float = 200.0
    capture_penalty: float = 200.0
    constraint_form: str = "distance"       # or exponential
    constraint_states: str = "visitation"   # or initial
    capture_terminal: bool | None = None    # None: terminal only in gne_soft
    static_defender: bool = False
    defender_start: tuple = (0.0, -2.0, 90.0)
    attacker_x_range: tuple = (-3.0, 3.0)
    attacker_y_range: tuple = (0.0, 3.0)
    attacker_heading: float = 270.0

    def __post_init__(self):
        self.goal_center = tuple(float(v) for v in self.goal_center)
        self.defender_start = tuple(float(v) for v in self.defender_start)
        self.attacker_x_range = tuple(float(v) for v in self.attacker_x_range)
        self.attacker_y_range = tuple(float(v) for v in self.attacker_y_range)
        self.validate()

    def validate(self):
        if not self.env_min < self.env_max:
            raise ConfigError("env_min must be below env_max")
        if not 0 < self.capture_radius < self.goal_radius:
            raise ConfigError("need 0 < capture_radius < goal_radius")
        if self.speed <= 0:
            raise ConfigError("speed must be positive")
        if not 0 < self.turn_angle < 180:
            raise ConfigError("turn_angle must lie in (0, 180) degrees")
        if self.max_steps < 1:
            raise ConfigError("max_steps must be positive")
        if not 0 <= self.gamma < 1:
            raise ConfigError("gamma must lie in [0, 1)")
        for name, allowed in (("reward_mode", ("stackelberg_hard", "gne_soft")),
                              ("reward_kind", ("reach_distance", "reach_probability")),
                              ("constraint_form", ("distance", "exponential")),
                              ("constraint_states", ("visitation", "initial"))):
            if getattr(self, name) not in allowed:
                raise ConfigError(f"{name} must be one of {allowed}, got {getattr(self, name)!r}")
        lo, hi = self.attacker_x_range
        if not (self.env_min <= lo <= hi <= self.env_max):
            raise ConfigError("attacker_x_range must lie inside the plane")
        lo, hi = self.attacker_y_range
        if not (self.env_min <= lo <= hi <= self.env_max):
            raise ConfigError("attacker_y_range must lie inside the plane")

    @property
    def soft(self):
        return self.reward_mode == "gne_soft"

    @property
    def capture_ends_episode(self):
        return self.soft if self.capture_terminal is None else bool(self.capture_terminal)

    @property
    def r_max(self):
        diameter = math.sqrt(2.0) * (self.env_max - self.env_min)
        return max(self.target_bonus, self.capture_penalty, diameter ** 2)

    def params(self):
        """Flat float vector handed to the kernels."""
        return np.array([
            self.env_min, self.env_max, self.goal_center[0], self.goal_center[1],
            self.goal_radius, self.capture_radius, self.speed, self.turn_angle,
            self.target_bonus, self.capture_penalty, float(self.soft),
            float(self.reward_kind == "reach_probability"),
            float(self.constraint_form == "exponential"), float(self.capture_ends_episode),
            float(self.static_defender)], dtype=float)

    def to_dict(self):
        d = asdict(self)
        return {k: list(v) if isinstance(v, tuple) else v for k, v in d.items()}

    @classmethod
    def from_dict(cls, d):
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown env keys: {sorted(unknown)}")
        return cls(**d)


# ---------------------------------------------------------------------------
# single-car kinematics


@dataclass(frozen=True)
class CarState:
    x: float
    y: float
    heading_deg: float

    @property
    def heading(self):
        """Heading in radians."""
        return self.heading_deg * DEG

    @property
    def position(self):
        return np.array([self.x, self.y])


@dataclass(frozen=True)
class JointState:
    defender: CarState
    attacker: CarState
    step_count: int = 0

    def vector(self):
        d, a = self.defender, self.attacker
        return np.array([d.x, d.y, d.heading_deg, a.x, a.y, a.heading_deg], dtype=float)

    @classmethod
    def from_vector(cls, s, step_count=0):
        s = [float(v) for v in s]
        return cls(CarState(*s[:3]), CarState(*s[3:6]), step_count)


def wrap_degrees(h):
    """Map a heading to ``[0, 360)``."""
    m = math.fmod(h, 360.0)
    if m < 0.0:
        m += 360.0
    if m >= 360.0:
        m -= 360.0
    return m


def wrap_angle(a):
    """Map an angle in radians to ``(-pi, pi]``."""
    return math.pi - math.fmod(math.fmod(math.pi - a, 2 * math.pi) + 2 * math.pi, 2 * math.pi)


def bounce(x, y, heading, cfg):
    """Clamp a proposed position into the plane, mirroring the heading off
    each wall it crossed.  Returns ``(x, y, heading, hit_x, hit_y)``."""
    hit_x = hit_y = False
    if x > cfg.env_max or x < cfg.env_min:
        x = cfg.env_max if x > cfg.env_max else cfg.env_min
        heading = 180.0 - heading
        hit_x = True
    if y > cfg.env_max or y < cfg.env_min:
        y = cfg.env_max if y > cfg.env_max else cfg.env_min
        heading = -heading
        hit_y = True
    return x, y, wrap_degrees(heading), hit_x, hit_y


def move_car(x, y, heading, turn, cfg, with_jac=False):
    """Turn, advance by ``speed`` and bounce.  With ``with_jac`` also returns
    the 3x4 Jacobian of ``(x', y', heading')`` w.r.t. ``(x, y, heading, turn)``;
    turns outside [-1, 1] are clipped and have zero derivative."""
    u = min(max(turn, -1.0), 1.0)
    du = 1.0 if -1.0 <= turn <= 1.0 else 0.0
    h1 = heading + cfg.turn_angle * u
    c, s = math.cos(h1 * DEG), math.sin(h1 * DEG)
    x1 = x + cfg.speed * c
    y1 = y + cfg.speed * s
    x1, y1, h2, hit_x, hit_y = bounce(x1, y1, h1, cfg)
    if not with_jac:
        return x1, y1, h2
    w = cfg.turn_angle * du
    J = np.array([[1.0, 0.0, -cfg.speed * s * DEG, -cfg.speed * s * DEG * w],
                  [0.0, 1.0, cfg.speed * c * DEG, cfg.speed * c * DEG * w],
                  [0.0, 0.0, 1.0, w]])
    if hit_x:
        J[0] = 0.0
        J[2] = -J[2]
    if hit_y:
        J[1] = 0.0
        J[2] = -J[2]
    return (x1, y1, h2), J


def displacement(car: CarState, action, cfg) -> CarState:
    """One step of a single car under turn ``action``."""
    return CarState(*move_car(car.x, car.y, car.heading_deg, float(action), cfg))


# ---------------------------------------------------------------------------
# joint dynamics, rewards and constraints


def _advance(s, a, b, cfg, with_jac=False):
    """Both cars move simultaneously from ``s``."""
    s = np.asarray(s, dtype=float)
    T_s = np.zeros((6, 6))
    T_a = np.zeros(6)
    T_b = np.zeros(6)
    if cfg.static_defender:
        nd = (s[0], s[1], s[2])
        T_s[:3, :3] = np.eye(3)
    elif with_jac:
        nd, Jd = move_car(s[0], s[1], s[2], a, cfg, True)
        T_s[:3, :3] = Jd[:, :3]
        T_a[:3] = Jd[:, 3]
    else:
        nd = move_car(s[0], s[1], s[2], a, cfg)
    if with_jac:
        na, Ja = move_car(s[3], s[4], s[5], b, cfg, True)
        T_s[3:, 3:] = Ja[:, :3]
        T_b[3:] = Ja[:, 3]
    else:
        na = move_car(s[3], s[4], s[5], b, cfg)
    nxt = np.array([*nd, *na], dtype=float)
    return (nxt, T_s, T_a, T_b) if with_jac else nxt


def _outcome(s, nxt, cfg):
    """Reward, constraint and done code of the transition ``s -> nxt`` with
    gradients w.r.t. both states: ``(r, r_s, r_n, g, g_s, g_n, done)``."""
    gx, gy = cfg.goal_center
    ax, ay = nxt[3], nxt[4]
    dx, dy = nxt[0], nxt[1]
    r_s, r_n = np.zeros(6), np.zeros(6)
    g_s, g_n = np.zeros(6), np.zeros(6)
    gvx, gvy = ax - gx, ay - gy
    dist_goal = math.sqrt(gvx * gvx + gvy * gvy)
    pvx, pvy = ax - dx, ay - dy
    dist_pair = math.sqrt(pvx * pvx + pvy * pvy)
    in_target = dist_goal <= cfg.goal_radius
    captured = dist_pair < cfg.capture_radius
    done = DONE_NONE
    if in_target:
        done = DONE_TARGET
    elif captured and cfg.capture_ends_episode:
        done = DONE_CAPTURE
    if cfg.reward_kind == "reach_probability":
        r = 1.0 if in_target else 0.0
    elif in_target:
        r = cfg.target_bonus
    elif cfg.soft and captured:
        r = -cfg.capture_penalty
    else:
        gap = dist_goal - cfg.goal_radius
        r = -gap * gap
        r_n[3] = -2.0 * gap * gvx / dist_goal
        r_n[4] = -2.0 * gap * gvy / dist_goal
    if cfg.constraint_form == "distance":
        g = dist_pair - cfg.capture_radius
        if dist_pair > 0:
            g_n[3], g_n[4] = pvx / dist_pair, pvy / dist_pair
            g_n[0], g_n[1] = -g_n[3], -g_n[4]
    else:
        # room to move shrinks exponentially near the defender's committed position
        qx, qy = s[3] - dx, s[4] - dy
        dq = math.sqrt(qx * qx + qy * qy)
        mx, my = ax - s[3], ay - s[4]
        step = math.sqrt(mx * mx + my * my)
        near = dq - cfg.capture_radius
        if near > 0.0:
            e = math.exp(near)
            g = e - 1.0 - step
            g_s[3], g_s[4] = e * qx / dq, e * qy / dq
            g_n[0], g_n[1] = -g_s[3], -g_s[4]
        else:
            g = -step
        if step > 0:
            g_n[3] -= mx / step
            g_n[4] -= my / step
            g_s[3] += mx / step
            g_s[4] += my / step
    return r, r_s, r_n, np.array([g]), g_s, g_n, done


def next_joint(joint: JointState, a, b, cfg) -> JointState:
    return JointState.from_vector(_advance(joint.vector(), a, b, cfg), joint.step_count + 1)


def reward(joint: JointState, a, b, cfg) -> float:
    """Attacker reward for the move ``(a, b)`` from ``joint`` (the defender
    receives the negation)."""
    s = joint.vector()
    return _outcome(s, _advance(s, a, b, cfg), cfg)[0]


def safety_constraint(joint: JointState, a, b, cfg) -> np.ndarray:
    """Coupling value; nonnegative means the attacker's move is safe."""
    s = joint.vector()
    return _outcome(s, _advance(s, a, b, cfg), cfg)[3]


def feasible_actions(joint: JointState, defender_action, cfg):
    """Attacker turns whose move keeps the coupling nonnegative."""
    return [b for b in TURNS if safety_constraint(joint, defender_action, b, cfg)[0] >= 0.0]


def features(joint: JointState, cfg) -> np.ndarray:
    return _features(joint.vector(), cfg)[0]


def _features(s, cfg, with_jac=False):
    lo, hi = cfg.env_min, cfg.env_max
    span = hi - lo
    gx, gy = cfg.goal_center
    dx, dy, dh, ax, ay, ah = (float(v) for v in s)
    ca, sa = math.cos(ah * DEG), math.sin(ah * DEG)
    cd, sd = math.cos(dh * DEG), math.sin(dh * DEG)
    agx, agy = gx - ax, gy - ay
    r_ag = math.sqrt(agx * agx + agy * agy)
    adx, ady = dx - ax, dy - ay
    r_ad = math.sqrt(adx * adx + ady * ady)
    dgx, dgy = gx - dx, gy - dy
    r_dg = math.sqrt(dgx * dgx + dgy * dgy)
    f = np.array([
        2.0 * (ax - lo) / span - 1.0, 2.0 * (ay - lo) / span - 1.0, ca, sa,
        2.0 * (dx - lo) / span - 1.0, 2.0 * (dy - lo) / span - 1.0, cd, sd,
        r_ag, wrap_angle(math.atan2(ady, adx) - ah * DEG), r_ad,
        wrap_angle(math.atan2(agy, agx) - ah * DEG),
        wrap_angle(math.atan2(dgy, dgx) - dh * DEG)])
    if not with_jac:
        return f, None
    J = np.zeros((13, 6))
    J[0, 3] = J[1, 4] = J[4, 0] = J[5, 1] = 2.0 / span
    J[2, 5], J[3, 5] = -sa * DEG, ca * DEG
    J[6, 2], J[7, 2] = -sd * DEG, cd * DEG
    if r_ag > 0:
        J[8, 3], J[8, 4] = -agx / r_ag, -agy / r_ag
        q = r_ag * r_ag
        J[11, 3], J[11, 4] = agy / q, -agx / q
    J[11, 5] = -DEG
    if r_ad > 0:
        J[10, 3], J[10, 4] = -adx / r_ad, -ady / r_ad
        J[10, 0], J[10, 1] = adx / r_ad, ady / r_ad
        q = r_ad * r_ad
        J[9, 0], J[9, 1] = -ady / q, adx / q
        J[9, 3], J[9, 4] = ady / q, -adx / q
    J[9, 5] = -DEG
    if r_dg > 0:
        q = r_dg * r_dg
        J[12, 0], J[12, 1] = dgy / q, -dgx / q
    J[12, 2] = -DEG
    return f, J


def pursuit_defender(joint: JointState, cfg) -> int:
    """Turn that brings the defender closest to the attacker's current
    position; ties go to straight, then -1."""
    best, best_d = 0, math.inf
    for u in (0, -1, 1):
        x, y, _ = move_car(joint.defender.x, joint.defender.y, joint.defender.heading_deg, u, cfg)
        d = math.sqrt((x - joint.attacker.x) ** 2 + (y - joint.attacker.y) ** 2)
        if d < best_d:
            best, best_d = u, d
    return best


def initial_state(rng, cfg) -> JointState:
    u = rng.random(2)
    xlo, xhi = cfg.attacker_x_range
    ylo, yhi = cfg.attacker_y_range
    att = CarState(xlo + (xhi - xlo) * u[0], ylo + (yhi - ylo) * u[1], wrap_degrees(cfg.attacker_heading))
    d = cfg.defender_start
    return JointState(CarState(d[0], d[1], wrap_degrees(d[2])), att, 0)


# ---------------------------------------------------------------------------
# the game


class ReachAvoidGame(MarkovStackelbergGame):
    """Reach-avoid game with the defender as leader and attacker as follower.

    Capture means the cars end a step closer than ``capture_radius``; it ends
    the episode when ``capture_ends_episode`` (the soft-penalty default).  In
    hard mode the coupling ``distance - capture_radius >= 0`` restricts the
    attacker's turns and is what the multiplier prices during training.
    """

    state_dim = 6
    obs_dim = 13
    num_constraints = 1
    differentiable = True

    def __init__(self, cfg: ReachAvoidConfig | None = None, **overrides):
        cfg = cfg or ReachAvoidConfig()
        if overrides:
            cfg = ReachAvoidConfig(**{**asdict(cfg), **overrides})
        self.cfg = cfg
        self.gamma = cfg.gamma
        self.horizon = cfg.max_steps
        self.r_max = cfg.r_max
        self.hard_constraints = not cfg.soft
        self.constraint_states = cfg.constraint_states
        space = ActionSpace([-1.0], [1.0], [[-1.0], [0.0], [1.0]])
        self.leader_space = space
        self.follower_space = space
        self._params = cfg.params()

    def with_config(self, **overrides):
        return ReachAvoidGame(self.cfg, **overrides)

    # scalar interface
    def initial_state(self, rng):
        return initial_state(rng, self.cfg).vector()

    def observe(self, s):
        return _features(s, self.cfg)[0]

    def observe_jac(self, s):
        return _features(s, self.cfg, True)

    def step(self, s, a, b, rng):
        nxt = _advance(s, float(np.asarray(a).ravel()[0]), float(np.asarray(b).ravel()[0]), self.cfg)
        r, _, _, g, _, _, done = _outcome(s, nxt, self.cfg)
        return nxt, r, g, _DONE_NAMES.get(done)

    def step_grads(self, s, a, b):
        a = float(np.asarray(a).ravel()[0])
        b = float(np.asarray(b).ravel()[0])
        nxt, T_s, T_a, T_b = _advance(s, a, b, self.cfg, True)
        r, r_s, r_n, g, g_s, g_n, done = _outcome(s, nxt, self.cfg)
        return StepGrads(
            next_state=nxt, reward=r, constraint=g, done=_DONE_NAMES.get(done),
            T_s=T_s, T_a=T_a[:, None], T_b=T_b[:, None],
            r_s=r_s + r_n @ T_s, r_a=np.array([r_n @ T_a]), r_b=np.array([r_n @ T_b]),
            g_s=(g_s + g_n @ T_s)[None, :], g_a=np.array([[g_n @ T_a]]), g_b=np.array([[g_n @ T_b]]))

    def feasible_follower_mask(self, s, a):
        a = float(np.asarray(a).ravel()[0])
        return np.array([self.step(s, [a], [b], None)[2][0] >= 0.0 for b in TURNS])

    def project_follower(self, s, a, b):
        """Closest safe turn to ``b`` on a 41-point grid, or None if none is safe."""
        if self.step(s, a, b, None)[2][0] >= 0.0:
            return b
        cands = np.linspace(-1.0, 1.0, 41)
        target = float(np.clip(np.asarray(b).ravel()[0], -1, 1))
        for u in cands[np.argsort(np.abs(cands - target), kind="stable")]:
            if self.step(s, a, [u], None)[2][0] >= 0.0:
                return np.array([u])
        return None

    def pursuit_action(self, s):
        return pursuit_defender(JointState.from_vector(s), self.cfg)

    # batched interface (compiled kernels when available)
    def features_batch(self, S):
        S = np.ascontiguousarray(S, dtype=float)
        F = np.empty((len(S), 13))
        kernels.ra_features(self._params, S, F)
        return F

    def step_batch(self, S, a, b):
        S = np.ascontiguousarray(S, dtype=float)
        n = len(S)
        out = np.empty((n, 6))
        r = np.empty(n)
        g = np.empty(n)
        done = np.empty(n, dtype=np.int64)
        kernels.ra_step(self._params, S, np.ascontiguousarray(a, dtype=float),
                        np.ascontiguousarray(b, dtype=float), out, r, g, done)
        return out, r, g, done

    def feasible_batch(self, S, a):
        S = np.ascontiguousarray(S, dtype=float)
        M = np.empty((len(S), 3), dtype=np.uint8)
        kernels.ra_feasible(self._params, S, np.ascontiguousarray(a, dtype=float), M)
        return M.astype(bool)

    def pursuit_batch(self, S):
        S = np.ascontiguousarray(S, dtype=float)
        out = np.empty(len(S))
        kernels.ra_pursuit(self._params, S, out)
        return out

    def rollout_batch(self, leader, follower, rng, batch, mask=None, horizon=None, start_states=None,
                      leader_override=None):
        """Lock-step rollout of ``batch`` episodes with one child stream per
        episode, drawing exactly what ``sample_trajectory`` draws.

        ``leader_override`` replaces the leader's policy by a function of the
        state batch returning turns (used for the scripted pursuer).
        """
        H = self.horizon if horizon is None else int(horizon)
        use_mask = self.hard_constraints if mask is None else bool(mask)
        streams = rng.spawn(batch)
        explore = leader.exploration_std > 0 or follower.exploration_std > 0
        S = np.empty((batch, 6))
        U = np.empty((batch, H, 2))
        Z = np.zeros((batch, H, 2))
        for i, r in enumerate(streams):
            S[i] = self.initial_state(r) if start_states is None else start_states[i]
            U[i] = r.random((H, 2))
            if explore:
                Z[i] = r.standard_normal((H, 2))
        tb = TrajectoryBatch.empty(batch, H, self.obs_dim, 1, 1, 1, self.gamma,
                                   with_masks=use_mask and follower.head == "softmax",
                                   n_follower=3)
        tb.states[:, 0] = S
        alive = np.ones(batch, dtype=bool)
        for t in range(H):
            idx = np.flatnonzero(alive)
            if len(idx) == 0:
                break
            St = S[idx]
            O = self.features_batch(St)
            if leader_override is not None:
                ia = np.full(len(idx), -1)
                a = np.asarray(leader_override(St), dtype=float)
            else:
                ia, A = leader.sample_batch(O, U[idx, t, 0], Z[idx, t, 0])
                a = A[:, 0]
            M = None
            if use_mask and follower.head == "softmax":
                M = self.feasible_batch(St, a)
                dead = ~M.any(axis=1)
                if dead.any():
                    tb.mark_infeasible(idx[dead], t)
                    alive[idx[dead]] = False
                    keep = ~dead
                    idx, St, O, a, ia, M = idx[keep], St[keep], O[keep], a[keep], ia[keep], M[keep]
                    if len(idx) == 0:
                        break
            ib, Bm = follower.sample_batch(O, U[idx, t, 1], Z[idx, t, 1], M)
            b = Bm[:, 0]
            if use_mask and follower.head != "softmax":
                b = b.copy()
                for j, i in enumerate(idx):
                    pb = self.project_follower(St[j], [a[j]], [b[j]])
                    if pb is None:
                        tb.mark_infeasible(np.array([i]), t)
                        alive[i] = False
                    else:
                        b[j] = float(np.asarray(pb).ravel()[0])
                ok = alive[idx]
                idx, St, O, a, b, ia, ib = idx[ok], St[ok], O[ok], a[ok], b[ok], ia[ok], ib[ok]
                if M is not None:
                    M = M[ok]
            nxt, r, g, done = self.step_batch(St, a, b)
            tb.record(idx, t, O, a[:, None], b[:, None], ia, ib, r, g[:, None], M, nxt)
            S[idx] = nxt
            ended = done != DONE_NONE
            if ended.any():
                for j in np.flatnonzero(ended):
                    tb.mark_absorbed(idx[j], t + 1, _DONE_NAMES[int(done[j])])
                alive[idx[ended]] = False
        return tb

    def pathwise_batch(self, leader, follower, rng, batch, horizon=None, project_constraint=True):
        """Compiled pathwise gradients for bilinear policies without
        exploration noise; returns None for anything else so the generic
        path handles it."""
        if (leader.kind != "bilinear" or follower.kind != "bilinear"
                or leader.exploration_std > 0 or follower.exploration_std > 0):
            return None
        H = self.horizon if horizon is None else int(horizon)
        S0 = np.array([self.initial_state(r) for r in rng.spawn(batch)])
        if self.constraint_states == "initial":
            cw = np.zeros(H)
            cw[0] = 1.0
        else:
            cw = np.array([self.gamma ** t for t in range(H)])
            cw = cw / cw.sum()
        nx, ny = leader.n, follower.n
        ret = np.empty(batch)
        dret = np.empty((batch, nx + ny))
        gv = np.empty(batch)
        dg = np.empty((batch, nx + ny))
        kernels.ra_pathwise(self._params, S0, np.ascontiguousarray(leader.theta),
                            np.ascontiguousarray(follower.theta), H, self.gamma, cw,
                            bool(project_constraint), ret, dret, gv, dg)
        d = dret.sum(axis=0) / batch
        j = dg.sum(axis=0) / batch
        return PathwiseEstimate(
            value=float(ret.mean()), grad_x=d[:nx], grad_y=d[nx:],
            constraint=np.array([gv.sum() / batch]), jac_x=j[None, :nx], jac_y=j[None, nx:],
            returns=ret, violations=-np.minimum(gv, 0.0))


# ---------------------------------------------------------------------------
# episode export


TRAJECTORY_COLUMNS = ("t", "def_x", "def_y", "def_heading", "att_x", "att_y", "att_heading")


def write_trajectory_csv(states, path):
    """One row per visited state."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(TRAJECTORY_COLUMNS)
        for t, s in enumerate(np.asarray(states, dtype=float)):
            w.writerow([t, *(f"{v:.6f}" for v in s)])


def trajectory_svg(states, cfg: ReachAvoidConfig, size=400):
    """Static SVG of one episode: plane, goal disc, both paths, final capture ring."""
    S = np.asarray(states, dtype=float)
    lo, hi = cfg.env_min, cfg.env_max
    k = size / (hi - lo)

    def px(x, y):
        return (x - lo) * k, (hi - y) * k

    def path(xs, ys, colour):
        pts = " ".join("%.2f,%.2f" % px(x, y) for x, y in zip(xs, ys))
        return f'<polyline points="{pts}" fill="none" stroke="{colour}" stroke-width="2"/>'

    gx, gy = px(*cfg.goal_center)
    dx, dy = px(S[-1, 0], S[-1, 1])
    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{size}" height="{size}" viewBox="0 0 {size} {size}">',
        f'<rect x="0" y="0" width="{size}" height="{size}" fill="white" stroke="black"/>',
        f'<circle cx="{gx:.2f}" cy="{gy:.2f}" r="{cfg.goal_radius * k:.2f}" fill="#b8e0b8"/>',
        path(S[:, 0], S[:, 1], "#c0392b"),
        path(S[:, 3], S[:, 4], "#2c3e90"),
        f'<circle cx="{dx:.2f}" cy="{dy:.2f}" r="{cfg.capture_radius * k:.2f}" fill="none" '
        f'stroke="#c0392b" stroke-dasharray="4 3"/>',
        "</svg>",
    ]
    return "\n".join(parts) + "\n"
