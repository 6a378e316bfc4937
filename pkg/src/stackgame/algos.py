"""Training loops for two-player Markov Stackelberg games.

Four algorithms share one configuration and one record format:

* ``nested_pgda``: per outer iteration, ``inner_iters`` projected ascent
  steps for the follower and descent steps for the multipliers on fresh
  pathwise-gradient batches, then one projected descent step for the leader.
* ``sim_pgda``: one batch per iteration drives one follower/multiplier step
  and one leader step, both taken from the same point.
* ``nested_reinforce`` / ``sim_reinforce``: the same two schedules with
  score-function gradients, a shared value baseline and discrete-action
  softmax policies.  The coupling is handled by the game itself (action
  masking in hard mode, penalty rewards in soft mode), so there is no
  multiplier.

Outer iteration ``t`` takes all of its randomness from
``iteration_rng(seed, t)``, which is what makes resuming from a checkpoint
reproduce the uninterrupted run.
"""
from __future__ import annotations

import json
import math
import os
import time
from dataclasses import asdict, dataclass, field, fields
from typing import Callable

import numpy as np

from .errors import CheckpointError, ConfigError, DivergenceError
from .mdpgame import (PolicyParams, ValueBaseline, as_minmax_problem, baseline_fit, reinforce_batch_grad,
                      rollout)
from .minmax import SolverConfig, init_rng, iteration_rng, lagrangian_grads, parse_schedule, sgda_inner

ALGORITHMS = ("nested_pgda", "sim_pgda", "nested_reinforce", "sim_reinforce")
RECORD_COLUMNS = ("iter", "return", "violation", "grad_x_norm", "grad_y_norm", "lambda_norm", "sec")
STATE_SCHEMA = 1


@dataclass
class TrainConfig:
    algo: str = "nested_pgda"
    outer_iters: int = 10_000
    inner_iters: int = 3
    lr_leader: str = "fixed:0.001"
    lr_follower: str = "fixed:0.001"
    lr_baseline: str = "fixed:0.001"
    batch_size: int = 32
    lambda_cap: float = 10.0
    seed: int = 0
    policy: str = ""                 # empty: bilinear for pgda, linear softmax for reinforce
    hidden: tuple = ()
    baseline_hidden: tuple = (64,)
    init_scale: float = 0.1
    param_bound: float = 10.0
    inner_output: str = "last"       # or "average"
    project_constraint: bool = True
    leader_uses_multiplier: bool = False
    share_samples: bool = True
    max_grad_norm: float = 0.0       # 0 disables clipping
    checkpoint_every: int = 0        # 0: only at the end
    record_time: bool = False

    def __post_init__(self):
        self.hidden = tuple(int(h) for h in self.hidden)
        self.baseline_hidden = tuple(int(h) for h in self.baseline_hidden)
        self.validate()

    def validate(self):
        if self.algo not in ALGORITHMS:
            raise ConfigError(f"algo must be one of {ALGORITHMS}, got {self.algo!r}")
        if int(self.outer_iters) < 1:
            raise ConfigError("outer_iters must be >= 1")
        if int(self.inner_iters) < 0:
            raise ConfigError("inner_iters must be >= 0")
        if int(self.batch_size) < 1:
            raise ConfigError("batch_size must be >= 1")
        if not self.lambda_cap > 0:
            raise ConfigError("lambda_cap must be positive")
        for name in ("lr_leader", "lr_follower", "lr_baseline"):
            rate(getattr(self, name))
        if self.policy not in ("", "bilinear", "tabular_softmax", "mlp"):
            raise ConfigError(f"unknown policy kind {self.policy!r}")
        if self.reinforce and self.policy == "bilinear":
            raise ConfigError("REINFORCE training needs softmax policies")
        if not self.reinforce and self.policy in ("tabular_softmax", "mlp"):
            raise ConfigError("policy GDA needs deterministic bilinear policies")
        if self.inner_output not in ("last", "average"):
            raise ConfigError("inner_output must be 'last' or 'average'")
        if self.max_grad_norm < 0 or self.checkpoint_every < 0:
            raise ConfigError("max_grad_norm and checkpoint_every must be nonnegative")

    @property
    def reinforce(self):
        return self.algo.endswith("reinforce")

    @property
    def nested(self):
        return self.algo.startswith("nested")

    def solver_config(self):
        """The min-max solver settings the policy GDA loops run with."""
        return SolverConfig(outer_iters=self.outer_iters, inner_iters=self.inner_iters,
                            lr_outer=rate(self.lr_leader), lr_inner=rate(self.lr_follower),
                            lambda_cap=self.lambda_cap, seed=self.seed, inner_output=self.inner_output)

    def to_dict(self):
        d = asdict(self)
        d["hidden"] = list(self.hidden)
        d["baseline_hidden"] = list(self.baseline_hidden)
        return d

    @classmethod
    def from_dict(cls, d):
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown train keys: {sorted(unknown)}")
        return cls(**d)


@dataclass
class TrainRecord:
    iter: int
    ret: float
    violation: float
    grad_x_norm: float
    grad_y_norm: float
    lambda_norm: float
    sec: float

    def row(self, with_time=True):
        sec = self.sec if with_time else 0.0
        return [str(self.iter), *(repr(float(v)) for v in (self.ret, self.violation, self.grad_x_norm,
                                                          self.grad_y_norm, self.lambda_norm, sec))]


def write_records(records, path, with_time=False):
    with open(path, "w") as fh:
        fh.write(",".join(RECORD_COLUMNS) + "\n")
        for r in records:
            fh.write(",".join(r.row(with_time)) + "\n")


def read_records(path):
    out = []
    with open(path) as fh:
        header = fh.readline().strip().split(",")
        if tuple(header) != RECORD_COLUMNS:
            raise CheckpointError(f"{path}: unexpected columns {header}")
        for line in fh:
            v = line.strip().split(",")
            out.append(TrainRecord(int(v[0]), *(float(x) for x in v[1:])))
    return out


@dataclass
class TrainResult:
    leader: PolicyParams
    follower: PolicyParams
    lam: np.ndarray
    records: list
    baseline: ValueBaseline | None = None
    leader_avg: PolicyParams | None = None
    follower_avg: PolicyParams | None = None
    follower_updates: int = 0
    leader_updates: int = 0


class TrainingAborted(DivergenceError):
    """Raised with the records completed before the failure in ``partial``."""


@dataclass
class TrainState:
    """Everything needed to continue a run after ``iteration`` outer steps."""
    iteration: int
    leader: PolicyParams
    follower: PolicyParams
    lam: np.ndarray
    baseline: ValueBaseline | None = None
    x_sum: np.ndarray | None = None
    y_sum: np.ndarray | None = None
    w_sum: float = 0.0
    follower_updates: int = 0
    leader_updates: int = 0
    records: list = field(default_factory=list)

    def to_dict(self):
        d = {
            "schema_version": STATE_SCHEMA, "iteration": self.iteration,
            "leader": self.leader.to_dict(), "follower": self.follower.to_dict(),
            "lambda": self.lam.tolist(), "w_sum": self.w_sum,
            "follower_updates": self.follower_updates, "leader_updates": self.leader_updates,
            "x_sum": None if self.x_sum is None else self.x_sum.tolist(),
            "y_sum": None if self.y_sum is None else self.y_sum.tolist(),
            "baseline": None,
            # wall time is left out so that state files are reproducible
            "records": [[r.iter, r.ret, r.violation, r.grad_x_norm, r.grad_y_norm, r.lambda_norm]
                        for r in self.records],
        }
        if self.baseline is not None:
            d["baseline"] = {"hidden": list(self.baseline.hidden), "obs_dim": self.baseline.obs_dim,
                             "w": self.baseline.w.tolist()}
        return d

    @classmethod
    def from_dict(cls, d):
        if not isinstance(d, dict) or d.get("schema_version") != STATE_SCHEMA:
            raise CheckpointError("not a training state of a supported version")
        try:
            base = None
            if d.get("baseline") is not None:
                b = d["baseline"]
                base = ValueBaseline(b["obs_dim"], tuple(b["hidden"]))
                w = np.array(b["w"], dtype=float)
                if w.shape != base.w.shape:
                    raise CheckpointError("baseline weight count does not match its layout")
                base.w = w
            arr = lambda v: None if v is None else np.array(v, dtype=float)
            return cls(int(d["iteration"]), PolicyParams.from_dict(d["leader"]),
                       PolicyParams.from_dict(d["follower"]), np.array(d["lambda"], dtype=float), base,
                       arr(d["x_sum"]), arr(d["y_sum"]), float(d["w_sum"]),
                       int(d["follower_updates"]), int(d["leader_updates"]),
                       [TrainRecord(int(r[0]), *map(float, r[1:]), 0.0) for r in d.get("records", [])])
        except (KeyError, TypeError, ValueError) as err:
            raise CheckpointError(f"malformed training state: {err}") from err


def save_state(path, state: TrainState, metadata=None):
    d = state.to_dict()
    d["metadata"] = metadata or {}
    tmp = f"{path}.tmp"
    with open(tmp, "w") as fh:
        json.dump(d, fh, sort_keys=True)
        fh.write("\n")
    os.replace(tmp, path)


def load_state(path):
    try:
        with open(path) as fh:
            d = json.load(fh)
    except (OSError, json.JSONDecodeError) as err:
        raise CheckpointError(f"cannot read training state {path}: {err}") from err
    state = TrainState.from_dict(d)
    return state, d.get("metadata", {})


# ---------------------------------------------------------------------------
# setup helpers


def initial_policies(game, config: TrainConfig):
    """Leader and follower policies drawn from the run's initialisation stream."""
    kind = config.policy or ("tabular_softmax" if config.reinforce else "bilinear")
    rng = init_rng(config.seed)
    kw = {"bound": config.param_bound}
    if kind == "mlp":
        kw["hidden"] = config.hidden
    lead = PolicyParams.init(kind, game.obs_dim, game.leader_space, rng, config.init_scale, **kw)
    foll = PolicyParams.init(kind, game.obs_dim, game.follower_space, rng, config.init_scale, **kw)
    return lead, foll


def _frozen(t):
    return 0.0


def rate(desc):
    """A schedule, where ``fixed:0`` (or ``0``) freezes the player it drives."""
    if isinstance(desc, str):
        kind, _, rest = desc.strip().partition(":")
        if (kind == "fixed" and rest and float(rest) == 0.0) or kind in ("0", "0.0"):
            return _frozen
    return parse_schedule(desc)


def _clip(g, max_norm):
    if max_norm > 0:
        n = float(np.linalg.norm(g))
        if n > max_norm:
            return g * (max_norm / n)
    return g


def _check(theta, what, t):
    if not np.all(np.isfinite(theta)):
        raise DivergenceError(f"non-finite {what} at outer iteration {t}", iteration=t)


class _Run:
    """Shared bookkeeping: records, averages, checkpoints, monitors."""

    def __init__(self, config, state, monitor, checkpoint):
        self.config = config
        self.state = state
        self.monitor = monitor
        self.checkpoint = checkpoint
        self.t0 = time.perf_counter()

    def emit(self, event, t):
        if self.monitor is not None:
            s = self.state
            self.monitor(event, t, s.leader.theta.copy(), s.follower.theta.copy(), s.lam.copy())

    def finish_iteration(self, t, ret, viol, gx, gy, eta):
        s = self.state
        s.iteration = t + 1
        if s.x_sum is None:
            s.x_sum = np.zeros(s.leader.n)
            s.y_sum = np.zeros(s.follower.n)
        s.x_sum += eta * s.leader.theta
        s.y_sum += eta * s.follower.theta
        s.w_sum += eta
        s.records.append(TrainRecord(t, float(ret), float(viol), float(gx), float(gy),
                                     float(np.linalg.norm(s.lam)), time.perf_counter() - self.t0))
        every = self.config.checkpoint_every
        if self.checkpoint is not None and every and s.iteration % every == 0:
            self.checkpoint(s)

    def result(self):
        s = self.state
        lead_avg = foll_avg = None
        if s.w_sum > 0:
            lead_avg = s.leader.copy(s.x_sum / s.w_sum)
            foll_avg = s.follower.copy(s.y_sum / s.w_sum)
        return TrainResult(s.leader, s.follower, s.lam, s.records, s.baseline, lead_avg, foll_avg,
                           s.follower_updates, s.leader_updates)


def _new_state(game, config, leader, follower):
    if leader is None or follower is None:
        lead0, foll0 = initial_policies(game, config)
        leader = leader or lead0
        follower = follower or foll0
    leader, follower = leader.copy(), follower.copy()
    lam = np.zeros(0 if config.reinforce else game.num_constraints)
    base = None
    if config.reinforce:
        base = ValueBaseline(game.obs_dim, config.baseline_hidden, rng=init_rng(config.seed + 1))
        base.zero_output()
    return TrainState(0, leader, follower, lam, base)


def _guarded(loop):
    def run(game, config, leader=None, follower=None, *, resume: TrainState | None = None,
            monitor: Callable | None = None, checkpoint: Callable | None = None):
        state = resume if resume is not None else _new_state(game, config, leader, follower)
        run_ = _Run(config, state, monitor, checkpoint)
        try:
            loop(game, config, run_)
        except (DivergenceError, FloatingPointError) as err:
            raise TrainingAborted(str(err), iteration=state.iteration, partial=state.records) from err
        every = config.checkpoint_every
        if checkpoint is not None and (not every or state.iteration % every):
            checkpoint(state)
        return run_.result()
    run.__name__ = loop.__name__.lstrip("_")
    run.__doc__ = loop.__doc__
    return run


# ---------------------------------------------------------------------------
# policy gradient descent ascent (pathwise gradients)


def _problem(game, config, state):
    # games may narrow the parameter boxes where the policy box is redundant
    return as_minmax_problem(game, state.leader, state.follower, batch=config.batch_size,
                             x_box=getattr(game, "leader_param_box", None),
                             y_box=getattr(game, "follower_param_box", None),
                             project_constraint=config.project_constraint)


@_guarded
def _nested_policy_gda(game, config: TrainConfig, run: _Run):
    """Nested policy gradient descent ascent on deterministic policies.

    The update sequence is that of ``nested_sgda`` on
    ``as_minmax_problem(game, ...)`` started from the same parameters.
    """
    s = run.state
    prob = _problem(game, config, s)
    solver = config.solver_config()
    sched_out = rate(config.lr_leader)
    sched_in = rate(config.lr_follower)
    cap = float(config.lambda_cap)
    x, y, lam = s.leader.theta.copy(), s.follower.theta.copy(), s.lam.copy()
    for t in range(s.iteration, config.outer_iters):
        rng = iteration_rng(config.seed, t)
        eta = sched_out(t)
        y, lam, ilog = sgda_inner(prob, x, solver, y0=y, lam0=lam, cap=cap, rng=rng,
                                  iters=config.inner_iters, lr=sched_in, record=run.monitor is not None)
        for k in range(ilog["steps"]):
            s.follower_updates += 1
            if run.monitor is not None:
                s.follower.theta, s.lam = ilog["y"][k], ilog["lam"][k]
                run.emit("follower", t)
        s.follower.theta, s.lam = y.copy(), lam.copy()
        smp = lagrangian_grads(prob, x, y, lam, rng)
        x = prob.project_x(x - eta * smp.grad_x)
        _check(x, "leader parameters", t)
        s.leader.theta = x.copy()
        s.leader_updates += 1
        run.emit("leader", t)
        run.finish_iteration(t, smp.f, np.linalg.norm(np.minimum(smp.g, 0.0)),
                             np.linalg.norm(smp.grad_x), ilog["grad_y_norm"], eta)


@_guarded
def _simultaneous_policy_gda(game, config: TrainConfig, run: _Run):
    """One pathwise batch per iteration moves follower, multipliers and leader
    together.  The leader follows the objective gradient only unless
    ``leader_uses_multiplier`` is set."""
    s = run.state
    prob = _problem(game, config, s)
    sched_out = rate(config.lr_leader)
    sched_in = rate(config.lr_follower)
    cap = float(config.lambda_cap)
    x, y, lam = s.leader.theta.copy(), s.follower.theta.copy(), s.lam.copy()
    for t in range(s.iteration, config.outer_iters):
        rng = iteration_rng(config.seed, t)
        eta_x, eta_y = sched_out(t), sched_in(t)
        (f, gx, gy), (g, jx, jy), _ = prob.sample_joint(x, y, rng)
        if lam.size:
            gy = gy + jy.T @ lam
            if config.leader_uses_multiplier:
                gx = gx + jx.T @ lam
        y_new = prob.project_y(y + eta_y * gy)
        lam_new = np.clip(lam - eta_y * g, 0.0, cap)
        x_new = prob.project_x(x - eta_x * gx)
        for v, what in ((y_new, "follower parameters"), (lam_new, "multiplier"), (x_new, "leader parameters")):
            _check(v, what, t)
        x, y, lam = x_new, y_new, lam_new
        s.follower.theta, s.lam = y.copy(), lam.copy()
        s.follower_updates += 1
        run.emit("follower", t)
        s.leader.theta = x.copy()
        s.leader_updates += 1
        run.emit("leader", t)
        run.finish_iteration(t, f, np.linalg.norm(np.minimum(g, 0.0)), np.linalg.norm(gx),
                             np.linalg.norm(gy), eta_x)


# ---------------------------------------------------------------------------
# REINFORCE with a value baseline


def _batch_stats(tb):
    ret = float(tb.returns().mean()) if len(tb) else 0.0
    viol = 0.0
    if tb.constraints.size:
        valid = tb.valid()
        if valid.any():
            viol = float(-np.minimum(tb.constraints[valid], 0.0).mean())
    return ret, viol


def _reinforce_step(policy, g, lr, sign, config, what, t):
    g = _clip(g, config.max_grad_norm)
    policy.theta = policy.theta + sign * lr * g
    policy.project()
    _check(policy.theta, what, t)
    return float(np.linalg.norm(g))


@_guarded
def _nested_reinforce_baseline(game, config: TrainConfig, run: _Run):
    """Nested REINFORCE: ``inner_iters`` follower ascent steps, each on a fresh
    batch, then one leader descent step on another fresh batch.  Every batch
    also takes one fitting step of the shared baseline."""
    s = run.state
    sched_l = rate(config.lr_leader)
    sched_f = rate(config.lr_follower)
    sched_b = rate(config.lr_baseline)
    B = config.batch_size
    for t in range(s.iteration, config.outer_iters):
        rng = iteration_rng(config.seed, t)
        gy = math.nan
        for k in range(config.inner_iters):
            tb = rollout(game, s.leader, s.follower, rng, B)
            g = reinforce_batch_grad(tb, s.follower, "follower", s.baseline)
            gy = _reinforce_step(s.follower, g, sched_f(k), 1.0, config, "follower parameters", t)
            baseline_fit(s.baseline, tb, sched_b(t))
            s.follower_updates += 1
            run.emit("follower", t)
        tb = rollout(game, s.leader, s.follower, rng, B)
        g = reinforce_batch_grad(tb, s.leader, "leader", s.baseline)
        eta = sched_l(t)
        gx = _reinforce_step(s.leader, g, eta, -1.0, config, "leader parameters", t)
        baseline_fit(s.baseline, tb, sched_b(t))
        s.leader_updates += 1
        run.emit("leader", t)
        run.finish_iteration(t, *_batch_stats(tb), gx, gy, eta)


@_guarded
def _simultaneous_reinforce_baseline(game, config: TrainConfig, run: _Run):
    """Simultaneous REINFORCE: both players step from the same point each
    iteration, on one shared batch (or two fresh batches when
    ``share_samples`` is off)."""
    s = run.state
    sched_l = rate(config.lr_leader)
    sched_f = rate(config.lr_follower)
    sched_b = rate(config.lr_baseline)
    B = config.batch_size
    for t in range(s.iteration, config.outer_iters):
        rng = iteration_rng(config.seed, t)
        tb_f = rollout(game, s.leader, s.follower, rng, B)
        tb_l = tb_f if config.share_samples else rollout(game, s.leader, s.follower, rng, B)
        g_f = reinforce_batch_grad(tb_f, s.follower, "follower", s.baseline)
        g_l = reinforce_batch_grad(tb_l, s.leader, "leader", s.baseline)
        gy = _reinforce_step(s.follower, g_f, sched_f(t), 1.0, config, "follower parameters", t)
        s.follower_updates += 1
        run.emit("follower", t)
        eta = sched_l(t)
        gx = _reinforce_step(s.leader, g_l, eta, -1.0, config, "leader parameters", t)
        s.leader_updates += 1
        run.emit("leader", t)
        baseline_fit(s.baseline, tb_f, sched_b(t))
        if tb_l is not tb_f:
            baseline_fit(s.baseline, tb_l, sched_b(t))
        run.finish_iteration(t, *_batch_stats(tb_l), gx, gy, eta)


nested_policy_gda = _nested_policy_gda
simultaneous_policy_gda = _simultaneous_policy_gda
nested_reinforce_baseline = _nested_reinforce_baseline
simultaneous_reinforce_baseline = _simultaneous_reinforce_baseline

TRAINERS = {
    "nested_pgda": nested_policy_gda,
    "sim_pgda": simultaneous_policy_gda,
    "nested_reinforce": nested_reinforce_baseline,
    "sim_reinforce": simultaneous_reinforce_baseline,
}


def train(game, config: TrainConfig, leader=None, follower=None, **kw) -> TrainResult:
    """Dispatch on ``config.algo``."""
    return TRAINERS[config.algo](game, config, leader, follower, **kw)
