"""Small games with known answers, used by tests, examples and the CLI."""
from __future__ import annotations

import numpy as np

from .minmax import Box
from .mdpgame import ActionSpace, MarkovStackelbergGame, StepGrads


class MatrixBandit(MarkovStackelbergGame):
    """One state, one step; the follower's reward is ``payoff[a, b]``.

    Actions are the integers ``0..n-1`` so a sampled value is its own index.
    """

    def __init__(self, payoff, gamma=0.99, horizon=1):
        self.payoff = np.atleast_2d(np.asarray(payoff, dtype=float))
        na, nb = self.payoff.shape
        self.leader_space = ActionSpace.discrete(np.arange(na))
        self.follower_space = ActionSpace.discrete(np.arange(nb))
        self.gamma = gamma
        self.horizon = horizon
        self.r_max = float(np.abs(self.payoff).max())
        self.obs_dim = 1
        self.state_dim = 1

    def initial_state(self, rng):
        return np.ones(1)

    def step(self, s, a, b, rng):
        r = self.payoff[int(round(a[0])), int(round(b[0]))]
        return s, float(r), np.zeros(0), None

    def expected_reward(self, p_leader, p_follower):
        return float(np.asarray(p_leader) @ self.payoff @ np.asarray(p_follower))


def two_arm_bandit(rewards=(1.0, 0.3), gamma=0.99):
    return MatrixBandit([list(rewards)], gamma=gamma)


class RewardChain(MarkovStackelbergGame):
    """Deterministic cycle over ``n_states`` one-hot states with constant reward."""

    def __init__(self, n_states=2, reward=1.0, gamma=0.99, horizon=50):
        self.n_states = n_states
        self.reward = reward
        self.gamma = gamma
        self.horizon = horizon
        self.state_dim = self.obs_dim = n_states
        self.r_max = abs(reward)
        self.leader_space = ActionSpace.discrete([0])
        self.follower_space = ActionSpace.discrete([0])

    def initial_state(self, rng):
        s = np.zeros(self.n_states)
        s[0] = 1.0
        return s

    def step(self, s, a, b, rng):
        return np.roll(s, 1), self.reward, np.zeros(0), None


class OneStepBenchmark(MarkovStackelbergGame):
    """Constant state 1, actions ``a = x``, ``b = y`` clipped to [0, 1];
    reward ``(mu/2) a^2 + b`` and coupling ``1 - a - b``.  Its equilibrium is
    that of the quadratic benchmark: ``x = y = 0.5``."""

    differentiable = True
    num_constraints = 1
    horizon = 1
    state_dim = obs_dim = 1

    def __init__(self, mu=2.0, gamma=0.99):
        self.mu = mu
        self.gamma = gamma
        self.r_max = mu / 2 + 1
        self.leader_space = ActionSpace([0.0], [1.0])
        self.follower_space = ActionSpace([0.0], [1.0])
        # with a constant observation the parameter is the action, so the
        # policy parameters live in the action box (outside it the clip kills the gradient)
        self.leader_param_box = Box([0.0], [1.0])
        self.follower_param_box = Box([0.0], [1.0])

    def initial_state(self, rng):
        return np.ones(1)

    def _parts(self, a, b):
        ac = float(np.clip(a[0], 0, 1))
        bc = float(np.clip(b[0], 0, 1))
        # one-sided slopes at the edges keep the box endpoints from trapping iterates
        da = 1.0 if 0 <= a[0] <= 1 else 0.0
        db = 1.0 if 0 <= b[0] <= 1 else 0.0
        return ac, bc, da, db

    def step(self, s, a, b, rng):
        ac, bc, _, _ = self._parts(a, b)
        return s, 0.5 * self.mu * ac * ac + bc, np.array([1 - ac - bc]), None

    def step_grads(self, s, a, b):
        ac, bc, da, db = self._parts(a, b)
        z1 = np.zeros((1, 1))
        return StepGrads(
            next_state=np.asarray(s, float), reward=0.5 * self.mu * ac * ac + bc,
            constraint=np.array([1 - ac - bc]), done=None,
            T_s=np.eye(1), T_a=z1, T_b=z1,
            r_s=np.zeros(1), r_a=np.array([self.mu * ac * da]), r_b=np.array([db]),
            g_s=np.zeros((1, 1)), g_a=np.array([[-da]]), g_b=np.array([[-db]]))


class QuadraticOneStep(MarkovStackelbergGame):
    """One step from ``s ~ N(0, I_d)`` with scalar actions and reward

        r = alpha a^2 - beta b^2 + c a b + (p . s) a + (q . s) b

    No action bounds.  Used for hand-derived pathwise gradients and, with
    exploring policies, for comparing score-function and pathwise estimates.
    """

    differentiable = True
    horizon = 1

    def __init__(self, dim=2, alpha=0.5, beta=1.0, c=0.3, p=None, q=None, gamma=0.99,
                 state_mean=None):
        self.state_dim = self.obs_dim = dim
        self.alpha, self.beta, self.c = alpha, beta, c
        self.p = np.ones(dim) if p is None else np.asarray(p, float)
        self.q = np.linspace(1.0, -1.0, dim) if q is None else np.asarray(q, float)
        self.mean = np.zeros(dim) if state_mean is None else np.asarray(state_mean, float)
        self.gamma = gamma
        self.r_max = np.inf
        self.leader_space = ActionSpace([-np.inf], [np.inf])
        self.follower_space = ActionSpace([-np.inf], [np.inf])

    def initial_state(self, rng):
        return self.mean + rng.standard_normal(self.state_dim)

    def reward(self, s, a, b):
        return (self.alpha * a * a - self.beta * b * b + self.c * a * b
                + (self.p @ s) * a + (self.q @ s) * b)

    def step(self, s, a, b, rng):
        return s, float(self.reward(s, a[0], b[0])), np.zeros(0), None

    def step_grads(self, s, a, b):
        a, b = float(a[0]), float(b[0])
        d = self.state_dim
        return StepGrads(
            next_state=np.asarray(s, float), reward=float(self.reward(s, a, b)),
            constraint=np.zeros(0), done=None,
            T_s=np.eye(d), T_a=np.zeros((d, 1)), T_b=np.zeros((d, 1)),
            r_s=self.p * a + self.q * b,
            r_a=np.array([2 * self.alpha * a + self.c * b + self.p @ s]),
            r_b=np.array([-2 * self.beta * b + self.c * a + self.q @ s]),
            g_s=np.zeros((0, d)), g_a=np.zeros((0, 1)), g_b=np.zeros((0, 1)))


class AffineConcaveGame(MarkovStackelbergGame):
    """State ``(z, w)``: ``z`` evolves by ``z' = M z`` regardless of play and
    ``w' = w + b`` accumulates the follower's actions.  Policies see ``z`` only,
    so with bilinear policies the actions ``a_t = X z_t``, ``b_t = Y z_t`` are
    linear in the parameters and every state is affine in them.

    Reward ``kappa a^2 + beta b - rho b^2 - rho_w w'^2`` is convex in the
    leader's action and concave in the follower's; the coupling
    ``1 - a - b >= 0`` is checked at the initial state.
    """

    differentiable = True
    num_constraints = 1
    constraint_states = "initial"

    def __init__(self, M=None, z0=None, w0=0.2, kappa=2.0, beta=1.0, rho=0.5, rho_w=0.3,
                 gamma=0.9, horizon=4):
        self.M = np.array([[0.9, 0.2], [-0.1, 0.8]]) if M is None else np.asarray(M, float)
        self.m = self.M.shape[0]
        self.z0 = np.array([1.0, 0.5]) if z0 is None else np.asarray(z0, float)
        self.w0 = float(w0)
        self.kappa, self.beta, self.rho, self.rho_w = kappa, beta, rho, rho_w
        self.gamma = gamma
        self.horizon = horizon
        self.state_dim = self.m + 1
        self.obs_dim = self.m
        self.r_max = np.inf
        self.leader_space = ActionSpace([-np.inf], [np.inf])
        self.follower_space = ActionSpace([-np.inf], [np.inf])

    def initial_state(self, rng):
        return np.concatenate([self.z0, [self.w0]])

    def observe(self, s):
        return np.asarray(s[: self.m], dtype=float)

    def observe_jac(self, s):
        J = np.zeros((self.m, self.state_dim))
        J[:, : self.m] = np.eye(self.m)
        return self.observe(s), J

    def _next(self, s, b):
        return np.concatenate([self.M @ s[: self.m], [s[self.m] + b]])

    def step(self, s, a, b, rng):
        a, b = float(a[0]), float(b[0])
        nxt = self._next(s, b)
        w = nxt[self.m]
        r = self.kappa * a * a + self.beta * b - self.rho * b * b - self.rho_w * w * w
        return nxt, r, np.array([1.0 - a - b]), None

    def step_grads(self, s, a, b):
        a, b = float(a[0]), float(b[0])
        nxt, r, g, _ = self.step(s, [a], [b], None)
        w = nxt[self.m]
        d = self.state_dim
        T_s = np.zeros((d, d))
        T_s[: self.m, : self.m] = self.M
        T_s[self.m, self.m] = 1.0
        T_b = np.zeros((d, 1))
        T_b[self.m, 0] = 1.0
        r_s = np.zeros(d)
        r_s[self.m] = -2 * self.rho_w * w
        return StepGrads(
            next_state=nxt, reward=r, constraint=g, done=None,
            T_s=T_s, T_a=np.zeros((d, 1)), T_b=T_b,
            r_s=r_s, r_a=np.array([2 * self.kappa * a]),
            r_b=np.array([self.beta - 2 * self.rho * b - 2 * self.rho_w * w]),
            g_s=np.zeros((1, d)), g_a=np.array([[-1.0]]), g_b=np.array([[-1.0]]))


class MatrixChain(MarkovStackelbergGame):
    """Cycle through ``len(payoffs)`` states; in state ``k`` the follower
    receives ``payoffs[k][a, b]``.  Play does not affect the transitions."""

    def __init__(self, payoffs, gamma=0.9, horizon=10):
        self.payoffs = [np.atleast_2d(np.asarray(p, dtype=float)) for p in payoffs]
        na, nb = self.payoffs[0].shape
        if any(p.shape != (na, nb) for p in self.payoffs):
            raise ValueError("all payoff matrices need the same shape")
        self.n_states = len(self.payoffs)
        self.state_dim = self.obs_dim = self.n_states
        self.leader_space = ActionSpace.discrete(np.arange(na))
        self.follower_space = ActionSpace.discrete(np.arange(nb))
        self.gamma = gamma
        self.horizon = horizon
        self.r_max = max(float(np.abs(p).max()) for p in self.payoffs)

    def initial_state(self, rng):
        s = np.zeros(self.n_states)
        s[0] = 1.0
        return s

    def step(self, s, a, b, rng):
        k = int(np.argmax(s))
        r = self.payoffs[k][int(round(a[0])), int(round(b[0]))]
        return np.roll(s, 1), float(r), np.zeros(0), None
