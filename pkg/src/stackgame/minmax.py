"""Stochastic min-max optimization with coupled constraints.

The leader minimizes ``V(x) = max {f(x, y) : g(x, y) >= 0}`` over a box X while
the follower picks ``y`` in a box Y.  The solver works on the Lagrangian
``L(y, lam; x) = f(x, y) + <lam, g(x, y)>``: an inner projected stochastic
gradient ascent on ``y`` / descent on ``lam`` approximates the follower's
constrained best response, and an outer projected stochastic descent step on
``x`` uses the x-gradient of the Lagrangian at that point.
"""
from __future__ import annotations

import itertools
import json
import math
from dataclasses import asdict, dataclass
from typing import Callable, NamedTuple

import numpy as np

from ._backend import kernels
from .errors import ArgumentError, ConfigError, DivergenceError, SlaterViolationError

SCHEMA_VERSION = 1


# ---------------------------------------------------------------------------
# boxes and problems


class Box:
    """Axis-aligned box with component-wise clamp projection."""

    def __init__(self, lo, hi):
        self.lo = np.atleast_1d(np.asarray(lo, dtype=float)).copy()
        self.hi = np.atleast_1d(np.asarray(hi, dtype=float)).copy()
        if self.lo.shape != self.hi.shape or np.any(self.lo > self.hi):
            raise ArgumentError("box bounds must have equal shapes with lo <= hi")

    @property
    def dim(self):
        return self.lo.shape[0]

    def project(self, v):
        return np.clip(np.asarray(v, dtype=float), self.lo, self.hi)

    def contains(self, v, tol=0.0):
        v = np.asarray(v, dtype=float)
        return bool(np.all(v >= self.lo - tol) and np.all(v <= self.hi + tol))

    def grid(self, n):
        axes = [np.linspace(l, h, n) for l, h in zip(self.lo, self.hi)]
        return np.array(list(itertools.product(*axes)), dtype=float)

    def __repr__(self):
        return f"Box({self.lo.tolist()}, {self.hi.tolist()})"


class CoupledMinMaxProblem:
    """Stochastic oracle bundle for ``min_x max_{y: g(x,y) >= 0} f(x, y)``.

    Subclasses either override ``sample_objective`` / ``sample_constraints``
    directly or provide the noise-free ``objective_grads`` /
    ``constraint_grads`` and let ``noise_std`` add Gaussian oracle noise.  The
    noise for one objective draw is ``1 + dim_x + dim_y`` standard normals
    (value, x-gradient, y-gradient) and one constraint draw uses ``K`` more;
    constraint Jacobians are exact.
    """

    noise_std = 0.0
    lipschitz_smooth = None
    strong_convexity = None
    objective_range = None
    slater_x_probes = None

    def __init__(self, x_box: Box, y_box: Box, num_constraints: int):
        self.x_box = x_box
        self.y_box = y_box
        self.dim_x = x_box.dim
        self.dim_y = y_box.dim
        self.num_constraints = int(num_constraints)

    # noise-free pieces; optional
    def objective_grads(self, x, y):
        raise NotImplementedError

    def constraint_grads(self, x, y):
        raise NotImplementedError

    def objective(self, x, y):
        return self.objective_grads(x, y)[0]

    def constraints(self, x, y):
        return self.constraint_grads(x, y)[0]

    def best_response(self, x):
        """Exact follower best response ``(y, lam)`` or None if unknown."""
        return None

    def slater_point(self, x):
        """A strictly feasible follower action for ``x`` or None."""
        return None

    # stochastic oracle
    def sample_objective(self, x, y, rng):
        f, gx, gy = self.objective_grads(x, y)
        gx = np.array(gx, dtype=float)
        gy = np.array(gy, dtype=float)
        if self.noise_std > 0:
            z = rng.standard_normal(1 + self.dim_x + self.dim_y)
            s = self.noise_std
            f = f + s * z[0]
            gx = gx + s * z[1:1 + self.dim_x]
            gy = gy + s * z[1 + self.dim_x:]
        return float(f), gx, gy

    def sample_constraints(self, x, y, rng):
        g, jx, jy = self.constraint_grads(x, y)
        g = np.array(g, dtype=float)
        if self.noise_std > 0 and self.num_constraints > 0:
            g = g + self.noise_std * rng.standard_normal(self.num_constraints)
        return g, np.asarray(jx, dtype=float), np.asarray(jy, dtype=float)

    def project_x(self, x):
        return self.x_box.project(x)

    def project_y(self, y):
        return self.y_box.project(y)


class FunctionProblem(CoupledMinMaxProblem):
    """Problem assembled from noise-free callables.

    ``objective(x, y) -> (f, grad_x, grad_y)`` and
    ``constraints(x, y) -> (g, jac_x, jac_y)``.
    """

    def __init__(self, x_box, y_box, objective, constraints=None, num_constraints=0,
                 noise_std=0.0, best_response=None, slater_point=None,
                 objective_range=None, lipschitz_smooth=None):
        super().__init__(x_box, y_box, num_constraints)
        self._objective = objective
        self._constraints = constraints
        self._best_response = best_response
        self._slater_point = slater_point
        self.noise_std = float(noise_std)
        self.objective_range = objective_range
        self.lipschitz_smooth = lipschitz_smooth

    def objective_grads(self, x, y):
        return self._objective(np.asarray(x, float), np.asarray(y, float))

    def constraint_grads(self, x, y):
        if self._constraints is None:
            K = self.num_constraints
            return np.zeros(K), np.zeros((K, self.dim_x)), np.zeros((K, self.dim_y))
        return self._constraints(np.asarray(x, float), np.asarray(y, float))

    def best_response(self, x):
        return None if self._best_response is None else self._best_response(x)

    def slater_point(self, x):
        return None if self._slater_point is None else self._slater_point(x)


class QuadraticProblem(CoupledMinMaxProblem):
    """``f = x'Qx x/2 + x'P y - y'Qy y/2 + cx'x + cy'y + f0``, ``g = h - A x - B y``.

    Runs of ``nested_sgda`` on this family go through the compiled kernel.
    """

    def __init__(self, Qx, P, Qy, cx, cy, A, B, h, x_box, y_box, f0=0.0,
                 noise_std=0.0, best_response=None, slater_point=None,
                 objective_range=None, strong_convexity=None):
        x_box = x_box if isinstance(x_box, Box) else Box(*x_box)
        y_box = y_box if isinstance(y_box, Box) else Box(*y_box)
        dx, dy = x_box.dim, y_box.dim
        self.Qx = np.ascontiguousarray(np.reshape(Qx, (dx, dx)), dtype=float)
        self.P = np.ascontiguousarray(np.reshape(P, (dx, dy)), dtype=float)
        self.Qy = np.ascontiguousarray(np.reshape(Qy, (dy, dy)), dtype=float)
        self.cx = np.ascontiguousarray(np.reshape(cx, (dx,)), dtype=float)
        self.cy = np.ascontiguousarray(np.reshape(cy, (dy,)), dtype=float)
        h = np.atleast_1d(np.asarray(h, dtype=float))
        K = h.shape[0]
        self.A = np.ascontiguousarray(np.reshape(A, (K, dx)), dtype=float)
        self.B = np.ascontiguousarray(np.reshape(B, (K, dy)), dtype=float)
        self.h = np.ascontiguousarray(h)
        self.f0 = float(f0)
        super().__init__(x_box, y_box, K)
        self.noise_std = float(noise_std)
        self._best_response = best_response
        self._slater_point = slater_point
        self.objective_range = objective_range
        self.strong_convexity = strong_convexity
        hess = np.block([
            [self.Qx, self.P, -self.A.T],
            [self.P.T, -self.Qy, -self.B.T],
            [-self.A, -self.B, np.zeros((K, K))],
        ])
        self.lipschitz_smooth = float(np.linalg.norm(hess, 2))

    def objective_grads(self, x, y):
        x = np.asarray(x, dtype=float)
        y = np.asarray(y, dtype=float)
        f = (0.5 * x @ self.Qx @ x + x @ self.P @ y - 0.5 * y @ self.Qy @ y
             + self.cx @ x + self.cy @ y + self.f0)
        gx = self.Qx @ x + self.P @ y + self.cx
        gy = self.P.T @ x - self.Qy @ y + self.cy
        return float(f), gx, gy

    def constraint_grads(self, x, y):
        g = self.h - self.A @ np.asarray(x, float) - self.B @ np.asarray(y, float)
        return g, -self.A, -self.B

    def best_response(self, x):
        return None if self._best_response is None else self._best_response(x)

    def slater_point(self, x):
        return None if self._slater_point is None else self._slater_point(x)


def benchmark_quadratic(noise_std=0.0, mu_x=2.0):
    """``f = (mu_x/2) x^2 + y``, ``g = 1 - x - y`` on ``X = Y = [0, 1]``.

    With the default ``mu_x = 2``: ``V(x) = x^2 + 1 - x``, best response
    ``y*(x) = 1 - x`` with multiplier 1, equilibrium ``(0.5, 0.5)`` and
    ``V* = 0.75``.
    """
    if mu_x <= 0:
        raise ConfigError("mu_x must be positive")

    def best_response(x):
        x = np.atleast_1d(np.asarray(x, dtype=float))
        return np.clip(1.0 - x, 0.0, 1.0), np.ones(1)

    prob = QuadraticProblem(
        Qx=[[mu_x]], P=[[0.0]], Qy=[[0.0]], cx=[0.0], cy=[1.0],
        A=[[1.0]], B=[[1.0]], h=[1.0],
        x_box=Box([0.0], [1.0]), y_box=Box([0.0], [1.0]),
        noise_std=noise_std, best_response=best_response,
        slater_point=lambda x: np.zeros(1),
        objective_range=0.5 * mu_x + 1.0, strong_convexity=mu_x,
    )
    prob.slater_x_probes = np.linspace(0.0, 0.5, 51)[:, None]
    prob.solution = (np.array([1.0 / mu_x]) if mu_x >= 1.0 else np.array([1.0]))
    return prob


# ---------------------------------------------------------------------------
# Lagrangian pieces


def lagrangian_value(f_val, g_vals, lam):
    g_vals = np.atleast_1d(np.asarray(g_vals, dtype=float))
    lam = np.atleast_1d(np.asarray(lam, dtype=float))
    if g_vals.shape != lam.shape:
        raise ArgumentError(f"multiplier shape {lam.shape} does not match constraints {g_vals.shape}")
    if np.any(lam < 0):
        raise ArgumentError("multipliers must be nonnegative")
    return float(f_val + lam @ g_vals) if lam.size else float(f_val)


class LagrangianSample(NamedTuple):
    grad_x: np.ndarray
    grad_y: np.ndarray
    grad_lam: np.ndarray
    f: float
    g: np.ndarray


def lagrangian_grads(problem, x, y, lam, rng=None):
    """One oracle draw of the three Lagrangian gradient blocks.

    ``grad_x = grad_x f + sum_k lam_k grad_x g_k``, ``grad_y`` likewise and
    ``grad_lam = g``.  The objective is drawn before the constraints unless
    the problem offers a joint draw.
    """
    if rng is None:
        rng = np.random.default_rng(0)
    lam = np.asarray(lam, dtype=float)
    joint = getattr(problem, "sample_joint", None)
    if joint is not None:
        # objective and constraint estimated from one shared sample
        (f, gx, gy), (g, jx, jy), _ = joint(x, y, rng)
    else:
        f, gx, gy = problem.sample_objective(x, y, rng)
        g, jx, jy = problem.sample_constraints(x, y, rng)
    if lam.shape != g.shape:
        raise ArgumentError("multiplier dimension does not match the constraints")
    if lam.size:
        gx = gx + jx.T @ lam
        gy = gy + jy.T @ lam
    return LagrangianSample(gx, gy, g, f, g)


# ---------------------------------------------------------------------------
# learning rates


@dataclass(frozen=True)
class Schedule:
    """``inv_sqrt``: c/sqrt(t+1); ``fixed``: c; ``strongly_convex``: 2/(mu (t+1))."""

    kind: str
    param: float = 1.0

    def __post_init__(self):
        if self.kind not in ("inv_sqrt", "fixed", "strongly_convex"):
            raise ConfigError(f"unknown schedule kind {self.kind!r}")
        if not (self.param > 0) or not math.isfinite(self.param):
            raise ConfigError(f"schedule parameter must be positive, got {self.param}")

    def __call__(self, t):
        if t < 0:
            raise ConfigError("schedule index must be nonnegative")
        if self.kind == "inv_sqrt":
            return self.param / math.sqrt(t + 1)
        if self.kind == "fixed":
            return self.param
        return 2.0 / (self.param * (t + 1))

    def __str__(self):
        if self.kind == "inv_sqrt" and self.param == 1.0:
            return "inv_sqrt"
        return f"{self.kind}:{self.param!r}"


def parse_schedule(desc) -> Schedule:
    """Accepts a Schedule, ``"kind"``, ``"kind:param"`` or ``(kind, param)``;
    any other callable ``t -> rate`` is passed through."""
    if isinstance(desc, Schedule) or (callable(desc) and not isinstance(desc, type)):
        return desc
    if isinstance(desc, (tuple, list)):
        kind, param = desc[0], (desc[1] if len(desc) > 1 else None)
    elif isinstance(desc, str):
        kind, _, rest = desc.strip().partition(":")
        param = float(rest) if rest else None
    else:
        raise ConfigError(f"cannot read schedule from {desc!r}")
    if param is None:
        if kind in ("fixed", "strongly_convex"):
            raise ConfigError(f"schedule {kind!r} needs a parameter")
        param = 1.0
    return Schedule(kind, float(param))


def lr_schedule(kind, t, param=None):
    """Learning rate at step ``t`` for a schedule descriptor."""
    sched = parse_schedule(kind if param is None else (kind, param))
    return sched(t)


# ---------------------------------------------------------------------------
# solver state and config


@dataclass
class SaddleState:
    x: np.ndarray
    y: np.ndarray
    lam: np.ndarray

    def copy(self):
        return SaddleState(self.x.copy(), self.y.copy(), self.lam.copy())


@dataclass
class SolverConfig:
    outer_iters: int = 1000
    inner_iters: int = 100
    lr_outer: str = "inv_sqrt"
    lr_inner: str = "inv_sqrt"
    lambda_cap: float | str = "auto"
    seed: int = 0
    target_delta: float = 0.0
    inner_output: str = "average"  # or "last"
    warm_start: bool = True
    oracle: str = "sgda"  # or "analytic"
    averaging: str = "auto"  # "step", "linear" or "auto"

    def __post_init__(self):
        if int(self.outer_iters) < 1:
            raise ConfigError("outer_iters must be >= 1")
        if int(self.inner_iters) < 0:
            raise ConfigError("inner_iters must be >= 0")
        parse_schedule(self.lr_outer)
        parse_schedule(self.lr_inner)
        if self.lambda_cap != "auto":
            cap = float(self.lambda_cap)
            if not cap > 0:
                raise ConfigError("lambda_cap must be positive")
        if self.target_delta < 0:
            raise ConfigError("target_delta must be nonnegative")
        if self.inner_output not in ("average", "last"):
            raise ConfigError("inner_output must be 'average' or 'last'")
        if self.oracle not in ("sgda", "analytic"):
            raise ConfigError("oracle must be 'sgda' or 'analytic'")
        if self.averaging not in ("auto", "step", "linear"):
            raise ConfigError("averaging must be 'auto', 'step' or 'linear'")

    def averaging_rule(self):
        """``auto`` averages with weights t+1 under the strongly convex schedule
        (the weighting its rate argument telescopes with) and with the step
        sizes otherwise."""
        if self.averaging != "auto":
            return self.averaging
        return "linear" if parse_schedule(self.lr_outer).kind == "strongly_convex" else "step"

    def to_dict(self):
        d = asdict(self)
        d["lr_outer"] = str(parse_schedule(self.lr_outer))
        d["lr_inner"] = str(parse_schedule(self.lr_inner))
        return d


def iteration_rng(seed, t):
    """Random stream of outer iteration ``t``; independent of all other iterations."""
    ss = np.random.SeedSequence(int(seed) & 0xFFFFFFFFFFFFFFFF, spawn_key=(0, int(t)))
    return np.random.default_rng(ss)


def init_rng(seed):
    """Stream used only for drawing starting points."""
    ss = np.random.SeedSequence(int(seed) & 0xFFFFFFFFFFFFFFFF, spawn_key=(1,))
    return np.random.default_rng(ss)


class IterateLog:
    """Per-outer-iteration records plus weighted averages.

    ``x[t]`` is the leader point at which step ``t`` was taken, ``y[t]`` and
    ``lam[t]`` the follower/multiplier pair used for it.  Averages use the step
    sizes as weights, or ``t + 1`` when ``averaging == "linear"``.
    """

    def __init__(self, T, dx, dy, K, averaging="step"):
        self.averaging = averaging
        self.t = np.arange(T)
        self.x = np.zeros((T, dx))
        self.y = np.zeros((T, dy))
        self.lam = np.zeros((T, K))
        self.lr = np.zeros(T)
        self.f_hat = np.zeros(T)
        self.delta_hat = np.zeros(T)
        self.eps_hat = np.zeros(T)
        # gradient norms are only tracked on the generic path
        self.grad_x_norm = np.full(T, np.nan)
        self.grad_y_norm = np.full(T, np.nan)
        self.n = 0
        self.final = None
        self.cap = None

    def record(self, x, y, lam, lr, f_hat, delta_hat, eps_hat, gx_norm=np.nan, gy_norm=np.nan):
        i = self.n
        self.grad_x_norm[i] = gx_norm
        self.grad_y_norm[i] = gy_norm
        self.x[i] = x
        self.y[i] = y
        self.lam[i] = lam
        self.lr[i] = lr
        self.f_hat[i] = f_hat
        self.delta_hat[i] = delta_hat
        self.eps_hat[i] = eps_hat
        self.n += 1

    def truncate(self):
        n = self.n
        for name in ("t", "x", "y", "lam", "lr", "f_hat", "delta_hat", "eps_hat",
                     "grad_x_norm", "grad_y_norm"):
            setattr(self, name, getattr(self, name)[:n])
        return self

    def __len__(self):
        return self.n

    def weighted_average(self, values):
        values = np.asarray(values, dtype=float)[: self.n]
        w = self.weights
        return np.tensordot(w, values, axes=(0, 0)) / w.sum()

    @property
    def weights(self):
        if self.averaging == "linear":
            return self.t[: self.n] + 1.0
        return self.lr[: self.n]

    @property
    def x_bar(self):
        return self.weighted_average(self.x)

    @property
    def y_bar(self):
        return self.weighted_average(self.y)

    @property
    def lam_bar(self):
        return self.weighted_average(self.lam)

    def write_csv(self, path):
        with open(path, "w") as fh:
            fh.write("t,lr,f_hat,delta_hat,eps_hat\n")
            for i in range(self.n):
                fh.write(f"{int(self.t[i])},{self.lr[i]!r},{self.f_hat[i]!r},"
                         f"{self.delta_hat[i]!r},{self.eps_hat[i]!r}\n")

    def summary(self, config=None):
        out = {"schema_version": SCHEMA_VERSION}
        if config is not None:
            out["config"] = config.to_dict() if hasattr(config, "to_dict") else dict(config)
        if self.final is not None:
            out["final"] = {"x": self.final.x.tolist(), "y": self.final.y.tolist(),
                            "lambda": self.final.lam.tolist()}
        out["average"] = {"x": self.x_bar.tolist(), "y": self.y_bar.tolist(),
                          "lambda": self.lam_bar.tolist()}
        out["averaging"] = self.averaging
        out["lambda_cap"] = self.cap
        out["iterations"] = self.n
        return out

    def write_json(self, path, config=None, extra=None):
        data = self.summary(config)
        if extra:
            data.update(extra)
        with open(path, "w") as fh:
            json.dump(data, fh, indent=2, sort_keys=True)
            fh.write("\n")


# ---------------------------------------------------------------------------
# inner loop and oracles


class InnerResult(NamedTuple):
    y: np.ndarray
    lam: np.ndarray
    log: dict


def _check_finite(arr, what, index):
    if not np.all(np.isfinite(arr)):
        raise DivergenceError(f"non-finite {what} at iteration {index}", iteration=index)


def sgda_inner(problem, x, config: SolverConfig | None = None, *, y0=None, lam0=None,
               cap=None, rng=None, iters=None, lr=None, output=None,
               residual=None, check_every=10, record=False):
    """Projected stochastic ascent on ``y`` and descent on ``lam`` with ``x`` fixed.

    Both blocks move simultaneously from the same oracle draw.  ``lam`` lives
    in ``[0, cap]^K``.  Returns the step-weighted average of the post-update
    iterates (``output="average"``) or the last iterate.  If ``residual`` is
    given and the config has a positive ``target_delta`` the loop stops once
    ``residual(y, lam) <= target_delta``.
    """
    config = config or SolverConfig()
    x = np.asarray(x, dtype=float)
    y = problem.project_y(problem.y_box.lo if y0 is None else y0).copy()
    K = problem.num_constraints
    lam = np.zeros(K) if lam0 is None else np.array(lam0, dtype=float)
    if cap is None:
        cap = resolve_cap(problem, config.lambda_cap)
    rng = rng if rng is not None else np.random.default_rng(config.seed)
    T = config.inner_iters if iters is None else int(iters)
    sched = parse_schedule(config.lr_inner if lr is None else lr)
    output = output or config.inner_output
    # averages are accumulated relative to the start so a motionless run
    # returns its start exactly
    y_anchor, l_anchor = y.copy(), lam.copy()
    ysum = np.zeros_like(y)
    lsum = np.zeros(K)
    wsum = 0.0
    path_y, path_l = [], []
    steps = 0
    gy_norm = np.nan
    for s in range(T):
        eta = sched(s)
        smp = lagrangian_grads(problem, x, y, lam, rng)
        y_new = problem.project_y(y + eta * smp.grad_y)
        lam_new = np.clip(lam - eta * smp.grad_lam, 0.0, cap)
        gy_norm = float(np.linalg.norm(smp.grad_y))
        _check_finite(y_new, "follower iterate", s)
        _check_finite(lam_new, "multiplier", s)
        y, lam = y_new, lam_new
        ysum += eta * (y - y_anchor)
        lsum += eta * (lam - l_anchor)
        wsum += eta
        steps = s + 1
        if record:
            path_y.append(y.copy())
            path_l.append(lam.copy())
        if (residual is not None and config.target_delta > 0 and steps % check_every == 0):
            cand = (y_anchor + ysum / wsum, l_anchor + lsum / wsum) if output == "average" else (y, lam)
            if residual(*cand) <= config.target_delta:
                break
    if output == "average" and wsum > 0:
        y = problem.project_y(y_anchor + ysum / wsum)
        lam = np.clip(l_anchor + lsum / wsum, 0.0, cap)
    log = {"steps": steps, "grad_y_norm": gy_norm}
    if record:
        log["y"] = np.array(path_y).reshape(steps, -1)
        log["lam"] = np.array(path_l).reshape(steps, K)
    return InnerResult(y, lam, log)


def saddle_residual(problem, x, y, lam, cap, grid=101):
    """``max_y' L(y', lam; x) - min_{lam' in [0,cap]} L(y, lam'; x)``, noise-free.

    The y-maximization uses the exact best response of the Lagrangian when the
    follower dimension is at most 2 via a grid; otherwise it is unavailable.
    """
    if problem.dim_y > 2:
        raise ArgumentError("grid residual only for follower dimension <= 2")
    lam = np.asarray(lam, dtype=float)
    pts = problem.y_box.grid(grid)
    best = -np.inf
    for yp in pts:
        v = problem.objective(x, yp)
        if lam.size:
            v += lam @ problem.constraints(x, yp)
        best = max(best, v)
    g = np.asarray(problem.constraints(x, y), dtype=float)
    low = problem.objective(x, y) + (cap * np.minimum(g, 0.0).sum() if g.size else 0.0)
    return float(best - low)


class OracleResult(NamedTuple):
    y: np.ndarray
    lam: np.ndarray
    residual: float
    reached: bool


def saddle_point_oracle(problem, x, delta, *, mode="auto", cap=None, config=None,
                        y0=None, lam0=None, rng=None, max_iters=200_000, grid=101):
    """Approximate saddle point of ``L(., .; x)`` with residual at most ``delta``.

    ``analytic`` uses the problem's exact best response; ``sgda`` runs
    ``sgda_inner`` with a doubling budget until the grid residual drops below
    ``delta`` or ``max_iters`` is spent, in which case ``reached`` is False.
    """
    if delta < 0:
        raise ArgumentError("delta must be nonnegative")
    config = config or SolverConfig()
    if cap is None:
        cap = resolve_cap(problem, config.lambda_cap)
    if mode == "auto":
        mode = "analytic" if problem.best_response(x) is not None else "sgda"
    if mode == "analytic":
        br = problem.best_response(x)
        if br is None:
            raise ArgumentError("problem has no analytic best response")
        y, lam = (np.asarray(v, dtype=float) for v in br)
        try:
            res = saddle_residual(problem, x, y, lam, cap, grid)
        except (ArgumentError, NotImplementedError):
            res = 0.0
        return OracleResult(y, lam, res, res <= delta)
    if mode != "sgda":
        raise ConfigError(f"unknown oracle mode {mode!r}")
    y = problem.project_y(problem.y_box.lo if y0 is None else y0)
    lam = np.zeros(problem.num_constraints) if lam0 is None else np.asarray(lam0, float)
    rng = rng if rng is not None else np.random.default_rng(config.seed)
    res = saddle_residual(problem, x, y, lam, cap, grid)
    budget, spent = 100, 0
    while res > delta and spent < max_iters:
        n = min(budget, max_iters - spent)
        y, lam, _ = sgda_inner(problem, x, config, y0=y, lam0=lam, cap=cap, rng=rng,
                               iters=n)
        spent += n
        budget *= 2
        res = saddle_residual(problem, x, y, lam, cap, grid)
    return OracleResult(y, lam, res, res <= delta)


# ---------------------------------------------------------------------------
# multiplier cap


def _probe_points(box, n_per_dim=101, n_random=256, seed=0):
    if box.dim <= 2:
        return box.grid(n_per_dim)
    rng = np.random.default_rng(seed)
    return box.lo + rng.random((n_random, box.dim)) * (box.hi - box.lo)


def multiplier_cap(problem, slater_point_finder: Callable | None = None, x_probes=None,
                   objective_range=None, floor=1e-3):
    """Bound on optimal multipliers: objective range over the smallest Slater margin.

    For each probe ``x`` the finder returns a follower action ``y_hat``; the
    margin is ``min_k g_k(x, y_hat)``.  Probes without a positive margin are
    skipped; if every probe fails a ``SlaterViolationError`` is raised.
    """
    if problem.num_constraints == 0:
        return float(floor)
    finder = slater_point_finder or problem.slater_point
    if x_probes is None:
        x_probes = problem.slater_x_probes
    if x_probes is None:
        x_probes = _probe_points(problem.x_box)
    x_probes = np.asarray(x_probes, dtype=float).reshape(-1, problem.dim_x)
    if objective_range is None:
        objective_range = problem.objective_range
    if objective_range is None:
        vals = [problem.objective(xp, yp) for xp in _probe_points(problem.x_box, 11, 64)
                for yp in _probe_points(problem.y_box, 11, 64, seed=1)]
        objective_range = max(vals) - min(vals)
    worst = math.inf
    found = 0
    for xp in x_probes:
        y_hat = finder(xp)
        if y_hat is None:
            continue
        margin = float(np.min(problem.constraints(xp, y_hat)))
        if margin > 0:
            found += 1
            worst = min(worst, margin)
    if found == 0:
        raise SlaterViolationError("no strictly feasible follower action at any probe")
    return float(max(objective_range / worst, floor))


def resolve_cap(problem, lambda_cap):
    if lambda_cap == "auto":
        return 2.0 * multiplier_cap(problem)
    return float(lambda_cap)


# ---------------------------------------------------------------------------
# outer loop


def nested_sgda(problem, config: SolverConfig, x0=None, y0=None, lam0=None,
                callback=None, use_kernel=None) -> IterateLog:
    """Nested SGDA: per outer step an inner saddle solve, then a projected
    stochastic descent step on ``x`` along the Lagrangian x-gradient.

    Outer iteration ``t`` draws all its randomness from ``iteration_rng(seed, t)``.
    Quadratic problems are solved by the compiled kernel unless ``use_kernel``
    is False or a callback / stopping residual is configured.
    """
    cap = resolve_cap(problem, config.lambda_cap)
    T, Ty = int(config.outer_iters), int(config.inner_iters)
    K = problem.num_constraints
    if x0 is None:
        # uniform start; a corner of the box can sit on a non-unique multiplier
        box = problem.x_box
        x0 = box.lo + init_rng(config.seed).random(box.dim) * (box.hi - box.lo)
    x = problem.project_x(x0).copy()
    y_init = problem.project_y(problem.y_box.lo if y0 is None else y0).copy()
    lam_init = np.zeros(K) if lam0 is None else np.clip(np.asarray(lam0, float), 0, cap)
    y, lam = y_init.copy(), lam_init.copy()
    sched_out = parse_schedule(config.lr_outer)
    sched_in = parse_schedule(config.lr_inner)
    lr_in = np.array([sched_in(s) for s in range(Ty)], dtype=float)
    average = config.inner_output == "average"
    log = IterateLog(T, problem.dim_x, problem.dim_y, K, config.averaging_rule())
    log.cap = cap

    if use_kernel is None:
        use_kernel = (isinstance(problem, QuadraticProblem) and callback is None
                      and config.target_delta == 0 and config.oracle == "sgda")
    if use_kernel:
        n_noise = 1 + problem.dim_x + problem.dim_y + K
        sigma = problem.noise_std
        empty = np.zeros((0, n_noise))
    for t in range(T):
        rng = iteration_rng(config.seed, t)
        eta = sched_out(t)
        if not config.warm_start:
            y, lam = y_init.copy(), lam_init.copy()
        x_t = x.copy()
        gx_norm = gy_norm = np.nan
        if use_kernel:
            noise = rng.standard_normal((Ty + 1, n_noise)) if sigma > 0 else empty
            status, f_hat, d_hat = kernels.quad_outer_step(
                problem.Qx, problem.P, problem.Qy, problem.cx, problem.cy, problem.f0,
                problem.A, problem.B, problem.h, problem.x_box.lo, problem.x_box.hi,
                problem.y_box.lo, problem.y_box.hi, x, y, lam, cap, sigma, noise,
                lr_in, eta, average)
            if status >= 0:
                where = "leader step" if status == Ty else f"inner step {status}"
                raise DivergenceError(f"non-finite iterate at outer iteration {t}, {where}",
                                      iteration=t, partial=log.truncate())
        else:
            try:
                if config.oracle == "analytic":
                    res = saddle_point_oracle(problem, x, config.target_delta, mode="analytic",
                                              cap=cap)
                    y, lam = res.y, res.lam
                else:
                    residual = None
                    if config.target_delta > 0:
                        residual = lambda yy, ll: saddle_residual(problem, x, yy, ll, cap)
                    y, lam, ilog = sgda_inner(problem, x, config, y0=y, lam0=lam, cap=cap,
                                              rng=rng, iters=Ty, lr=sched_in,
                                              residual=residual)
                    gy_norm = ilog["grad_y_norm"]
                smp = lagrangian_grads(problem, x, y, lam, rng)
                x = problem.project_x(x - eta * smp.grad_x)
                _check_finite(x, "leader iterate", t)
            except DivergenceError as err:
                raise DivergenceError(f"outer iteration {t}: {err}", iteration=t,
                                      partial=log.truncate()) from err
            f_hat = smp.f
            gx_norm = float(np.linalg.norm(smp.grad_x))
            d_hat = float(np.linalg.norm(np.minimum(smp.g, 0.0)))
        log.record(x_t, y, lam, eta, f_hat, d_hat, float(np.linalg.norm(x_t - x)) / eta,
                   gx_norm, gy_norm)
        if callback is not None:
            callback(t, x_t, y, lam)
    log.final = SaddleState(x.copy(), y.copy(), lam.copy())
    return log


# ---------------------------------------------------------------------------
# certification


def marginal_value(problem, x, grid=101, rng=None):
    """``V(x)`` from the exact best response, a feasible grid over Y, or SGDA."""
    br = problem.best_response(x)
    if br is not None:
        return float(problem.objective(x, br[0]))
    if problem.dim_y <= 2:
        best = -np.inf
        for yp in problem.y_box.grid(grid):
            g = problem.constraints(x, yp)
            if np.all(np.asarray(g) >= 0):
                best = max(best, problem.objective(x, yp))
        return float(best)
    res = saddle_point_oracle(problem, x, 1e-3, mode="sgda", rng=rng)
    return float(problem.objective(x, res.y))


class SEResidual(NamedTuple):
    epsilon: float
    delta: float
    probes: int


def se_residual(problem, x, y, eval_budget=101):
    """Equilibrium residual ``(epsilon, delta)`` of the profile ``(x, y)``.

    ``delta`` is the norm of the negative part of ``g(x, y)``; ``epsilon`` is
    the larger of the follower's gap to its best response value and the
    leader's gap ``V(x) - min V`` over a probe set of leader actions.
    """
    x = np.atleast_1d(np.asarray(x, dtype=float))
    y = np.atleast_1d(np.asarray(y, dtype=float))
    g = np.atleast_1d(np.asarray(problem.constraints(x, y), dtype=float))
    delta = float(np.linalg.norm(np.minimum(g, 0.0)))
    v_x = marginal_value(problem, x, eval_budget)
    probes = _probe_points(problem.x_box, eval_budget)
    v_min = min(marginal_value(problem, xp, eval_budget) for xp in probes)
    follower_gap = v_x - problem.objective(x, y)
    eps = max(0.0, follower_gap, v_x - v_min)
    return SEResidual(float(eps), delta, len(probes))


def gradient_error_terms(problem, log: IterateLog, x_star, every=100):
    """Both sides of the gradient approximation error bound on logged iterates.

    Left: ``<grad V(x_t) - grad_x L(y_t, lam_t; x_t), x_t - x*>`` with the
    noise-free Lagrangian gradient and ``grad V`` from the exact best response.
    Right: ``L_smooth (|y*_t - y_t| + |lam*_t - lam_t|) |x_t - x*|``.
    """
    x_star = np.atleast_1d(np.asarray(x_star, dtype=float))
    idx = np.arange(0, len(log), every)
    lhs = np.zeros(len(idx))
    rhs = np.zeros(len(idx))
    for n, t in enumerate(idx):
        xt, yt, lt = log.x[t], log.y[t], log.lam[t]
        ys, ls = problem.best_response(xt)

        def gx(yy, ll):
            _, gxf, _ = problem.objective_grads(xt, yy)
            _, jx, _ = problem.constraint_grads(xt, yy)
            return gxf + (jx.T @ ll if ll.size else 0.0)

        diff = xt - x_star
        lhs[n] = (gx(ys, ls) - gx(yt, lt)) @ diff
        rhs[n] = problem.lipschitz_smooth * (
            np.linalg.norm(ys - yt) + np.linalg.norm(ls - lt)) * np.linalg.norm(diff)
    return idx, lhs, rhs


def problem_from_name(name):
    """CLI problem registry: ``quadratic`` or ``quadratic-noisy:SIGMA``."""
    if name == "quadratic":
        return benchmark_quadratic()
    if name.startswith("quadratic-noisy:"):
        try:
            sigma = float(name.split(":", 1)[1])
        except ValueError:
            raise ConfigError(f"bad noise level in {name!r}") from None
        if sigma < 0:
            raise ConfigError("noise level must be nonnegative")
        return benchmark_quadratic(noise_std=sigma)
    raise ConfigError(f"unknown problem {name!r}")
