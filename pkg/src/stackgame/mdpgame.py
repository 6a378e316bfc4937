"""Zero-sum Markov Stackelberg games: policies, rollouts and gradient oracles.

The follower (maximizer) collects the reward; the leader minimizes the
follower's expected discounted return subject to the follower's coupled
constraint ``g(s, a, b) >= 0``.  Rollouts run a fixed horizon and weight step
``t`` by ``gamma**t``.
"""
from __future__ import annotations

import base64
import json
import math
from dataclasses import dataclass, field

import numpy as np

from .errors import ArgumentError, CheckpointError, ConfigError, UnsupportedEstimatorError
from .minmax import Box, CoupledMinMaxProblem

SCHEMA_VERSION = 1
PARAM_BOUND = 10.0


# ---------------------------------------------------------------------------
# spaces and games


class ActionSpace:
    """Box of actions, optionally with a finite list of canonical actions.

    ``values`` (n x dim) are the choices of softmax policies; deterministic
    policies act anywhere in ``[lo, hi]``.
    """

    def __init__(self, lo, hi, values=None):
        self.lo = np.atleast_1d(np.asarray(lo, dtype=float))
        self.hi = np.atleast_1d(np.asarray(hi, dtype=float))
        self.dim = self.lo.shape[0]
        self.values = None if values is None else np.asarray(values, dtype=float).reshape(-1, self.dim)

    @classmethod
    def discrete(cls, values):
        v = np.asarray(values, dtype=float)
        v = v.reshape(len(v), -1)
        return cls(v.min(axis=0), v.max(axis=0), v)

    @property
    def n(self):
        return 0 if self.values is None else len(self.values)


class MarkovStackelbergGame:
    """Base class.  Subclasses set the attributes below and implement ``step``.

    ``step(s, a, b, rng) -> (next_state, reward, constraint[K], done)`` where
    ``done`` is None or a short string naming the absorbing event.  Games with
    ``differentiable = True`` also implement ``observe_jac`` and
    ``step_grads``.
    """

    state_dim = 1
    obs_dim = 1
    num_constraints = 0
    gamma = 0.99
    horizon = 1
    r_max = 1.0
    differentiable = False
    hard_constraints = False
    constraint_states = "initial"   # or "visitation"
    leader_space: ActionSpace
    follower_space: ActionSpace

    def initial_state(self, rng):
        raise NotImplementedError

    def observe(self, s):
        return np.asarray(s, dtype=float)

    def step(self, s, a, b, rng):
        raise NotImplementedError

    def feasible_follower_mask(self, s, a):
        """Boolean mask over ``follower_space.values``; all True by default."""
        return np.ones(self.follower_space.n, dtype=bool)

    def project_follower(self, s, a, b):
        """Nearest feasible continuous follower action, or None if there is none."""
        return b

    # differentiable games
    def observe_jac(self, s):
        obs = self.observe(s)
        return obs, np.eye(len(obs), self.state_dim)

    def step_grads(self, s, a, b):
        """Returns ``StepGrads`` with derivatives of next state, reward and constraint."""
        raise UnsupportedEstimatorError(f"{type(self).__name__} has no pathwise derivatives")


@dataclass
class StepGrads:
    next_state: np.ndarray
    reward: float
    constraint: np.ndarray
    done: str | None
    T_s: np.ndarray
    T_a: np.ndarray
    T_b: np.ndarray
    r_s: np.ndarray
    r_a: np.ndarray
    r_b: np.ndarray
    g_s: np.ndarray
    g_a: np.ndarray
    g_b: np.ndarray


# ---------------------------------------------------------------------------
# policies


def _mlp_shapes(sizes):
    return [(sizes[i + 1], sizes[i]) for i in range(len(sizes) - 1)]


class PolicyParams:
    """Flat parameter vector plus the description of how it maps states to actions.

    kinds:
      * ``bilinear``: action = Theta @ obs, Theta of shape (act_dim, obs_dim);
        deterministic unless ``exploration_std > 0`` (Gaussian around the mean).
      * ``tabular_softmax``: logits = Theta @ obs with one-hot observations.
      * ``mlp``: tanh hidden layers of sizes ``hidden``; softmax head over the
        space's discrete values, or a linear deterministic head when
        ``head == "linear"``.  ``hidden=()`` gives a linear softmax policy.
    """

    def __init__(self, kind, obs_dim, space: ActionSpace, theta=None, hidden=(),
                 exploration_std=0.0, head=None, bound=PARAM_BOUND):
        if kind not in ("bilinear", "tabular_softmax", "mlp"):
            raise ConfigError(f"unknown policy kind {kind!r}")
        self.kind = kind
        self.obs_dim = int(obs_dim)
        self.space = space
        self.hidden = tuple(int(h) for h in hidden)
        self.exploration_std = float(exploration_std)
        self.bound = float(bound)
        if head is None:
            head = "linear" if kind == "bilinear" or space.values is None else "softmax"
        self.head = head
        if self.head == "softmax" and space.values is None:
            raise ConfigError("softmax policies need an action space with discrete values")
        if kind == "bilinear":
            self.shape = (space.dim, self.obs_dim)
            self.n = space.dim * self.obs_dim
        elif kind == "tabular_softmax":
            self.shape = (space.n, self.obs_dim)
            self.n = space.n * self.obs_dim
        else:
            out = space.n if self.head == "softmax" else space.dim
            self.sizes = (self.obs_dim,) + self.hidden + (out,)
            self.shape = self.sizes
            self.n = sum(o * i + o for o, i in _mlp_shapes(self.sizes))
        self.theta = np.zeros(self.n) if theta is None else np.array(theta, dtype=float).reshape(self.n)

    # construction helpers
    @classmethod
    def init(cls, kind, obs_dim, space, rng=None, scale=0.1, **kw):
        pol = cls(kind, obs_dim, space, **kw)
        if rng is not None and scale > 0:
            if kind == "mlp":
                parts = []
                for o, i in _mlp_shapes(pol.sizes):
                    parts.append(rng.standard_normal(o * i) * scale / math.sqrt(i))
                    parts.append(np.zeros(o))
                pol.theta = np.concatenate(parts)
            else:
                pol.theta = rng.standard_normal(pol.n) * scale
        return pol

    def copy(self, theta=None):
        new = PolicyParams(self.kind, self.obs_dim, self.space,
                           self.theta if theta is None else theta, self.hidden,
                           self.exploration_std, self.head, self.bound)
        new.theta = np.array(new.theta, dtype=float)
        return new

    @property
    def stochastic(self):
        return self.head == "softmax" or self.exploration_std > 0

    @property
    def box(self):
        return Box(-self.bound * np.ones(self.n), self.bound * np.ones(self.n))

    def project(self):
        np.clip(self.theta, -self.bound, self.bound, out=self.theta)
        return self

    # forward passes
    def _layers(self):
        out, off = [], 0
        for o, i in _mlp_shapes(self.sizes):
            W = self.theta[off:off + o * i].reshape(o, i)
            off += o * i
            b = self.theta[off:off + o]
            off += o
            out.append((W, b))
        return out

    def _mlp_forward(self, obs):
        acts = [obs]
        h = obs
        layers = self._layers()
        for k, (W, b) in enumerate(layers):
            z = W @ h + b
            h = z if k == len(layers) - 1 else np.tanh(z)
            acts.append(h)
        return acts

    def _mlp_backward(self, acts, gout):
        """Gradient of ``gout . output`` w.r.t. theta and obs."""
        layers = self._layers()
        grads = []
        g = gout
        for k in range(len(layers) - 1, -1, -1):
            W, _ = layers[k]
            if k != len(layers) - 1:
                g = g * (1.0 - acts[k + 1] ** 2)
            grads.append((np.outer(g, acts[k]).ravel(), g.copy()))
            g = W.T @ g
        flat = []
        for gw, gb in reversed(grads):
            flat.append(gw)
            flat.append(gb)
        return np.concatenate(flat), g

    def logits(self, obs):
        obs = np.asarray(obs, dtype=float)
        if self.kind == "mlp":
            return self._mlp_forward(obs)[-1]
        return self.theta.reshape(self.shape) @ obs

    def probs(self, obs, mask=None):
        if self.head != "softmax":
            raise UnsupportedEstimatorError("deterministic policy has no action probabilities")
        z = self.logits(obs)
        return masked_softmax(z, mask)

    def mean_action(self, obs):
        if self.head == "softmax":
            raise UnsupportedEstimatorError("softmax policy has no deterministic action")
        return self.logits(obs)

    def act_jac(self, obs):
        """Deterministic action with Jacobians w.r.t. theta (dim x n) and obs (dim x obs_dim)."""
        obs = np.asarray(obs, dtype=float)
        if self.head == "softmax":
            raise UnsupportedEstimatorError("pathwise gradients need a deterministic policy")
        if self.kind == "bilinear":
            Th = self.theta.reshape(self.shape)
            m, d = self.shape
            J = np.zeros((m, self.n))
            for i in range(m):
                J[i, i * d:(i + 1) * d] = obs
            return Th @ obs, J, Th
        acts = self._mlp_forward(obs)
        m = self.space.dim
        Jt = np.zeros((m, self.n))
        Jo = np.zeros((m, self.obs_dim))
        for i in range(m):
            e = np.zeros(m)
            e[i] = 1.0
            Jt[i], Jo[i] = self._mlp_backward(acts, e)
        return acts[-1], Jt, Jo

    def sample(self, obs, u, z=0.0, mask=None):
        """Draw an action: inverse CDF with uniform ``u`` for softmax heads,
        mean plus ``exploration_std * z`` otherwise.  Returns (index, action)."""
        if self.head == "softmax":
            p = self.probs(obs, mask)
            idx = inverse_cdf(p, u)
            return idx, self.space.values[idx]
        a = self.mean_action(obs)
        if self.exploration_std > 0:
            a = a + self.exploration_std * np.asarray(z, dtype=float)
        return -1, a

    def grad_log_prob(self, obs, idx=None, action=None, mask=None):
        obs = np.asarray(obs, dtype=float)
        if self.head == "softmax":
            p = self.probs(obs, mask)
            gz = -p
            gz[idx] += 1.0
            if self.kind == "mlp":
                return self._mlp_backward(self._mlp_forward(obs), gz)[0]
            return np.outer(gz, obs).ravel()
        if self.exploration_std > 0:
            mu, J, _ = self.act_jac(obs)
            return J.T @ ((np.asarray(action, float) - mu) / self.exploration_std ** 2)
        raise UnsupportedEstimatorError("REINFORCE needs a stochastic policy; use det_pg_grad")

    # batched forms; rows of ``O`` are observations
    def batch_logits(self, O):
        O = np.atleast_2d(np.asarray(O, dtype=float))
        if self.kind == "mlp":
            return self._mlp_forward_batch(O)[-1]
        return O @ self.theta.reshape(self.shape).T

    def _mlp_forward_batch(self, O):
        acts = [O]
        h = O
        layers = self._layers()
        for k, (W, b) in enumerate(layers):
            z = h @ W.T + b
            h = z if k == len(layers) - 1 else np.tanh(z)
            acts.append(h)
        return acts

    def batch_probs(self, O, M=None):
        if self.head != "softmax":
            raise UnsupportedEstimatorError("deterministic policy has no action probabilities")
        return masked_softmax_rows(self.batch_logits(O), M)

    def sample_batch(self, O, u, z=None, M=None):
        """Row-wise ``sample``: returns (indices, actions); indices are -1 for
        continuous actions."""
        O = np.atleast_2d(np.asarray(O, dtype=float))
        if self.head == "softmax":
            idx = inverse_cdf_rows(self.batch_probs(O, M), np.asarray(u, dtype=float))
            return idx, self.space.values[idx]
        A = self.batch_logits(O)
        if self.exploration_std > 0:
            A = A + self.exploration_std * np.asarray(z, dtype=float).reshape(len(O), -1)
        return np.full(len(O), -1), A

    def batch_grad(self, O, G):
        """Sum over rows of the gradient of ``G_i . output(O_i)`` w.r.t. theta."""
        O = np.atleast_2d(np.asarray(O, dtype=float))
        G = np.atleast_2d(np.asarray(G, dtype=float))
        if self.kind != "mlp":
            return (G.T @ O).ravel()
        acts = self._mlp_forward_batch(O)
        layers = self._layers()
        parts = []
        g = G
        for k in range(len(layers) - 1, -1, -1):
            W, _ = layers[k]
            if k != len(layers) - 1:
                g = g * (1.0 - acts[k + 1] ** 2)
            parts.append(((g.T @ acts[k]).ravel(), g.sum(axis=0)))
            g = g @ W
        flat = []
        for gw, gb in reversed(parts):
            flat.append(gw)
            flat.append(gb)
        return np.concatenate(flat)

    def score_grad(self, O, idx, actions, coef, M=None):
        """``sum_i coef_i * grad log pi(action_i | O_i)``."""
        coef = np.asarray(coef, dtype=float)
        if self.head == "softmax":
            P = self.batch_probs(O, M)
            gz = -P
            gz[np.arange(len(P)), idx] += 1.0
            return self.batch_grad(O, coef[:, None] * gz)
        if self.exploration_std > 0:
            mu = self.batch_logits(O)
            G = (np.asarray(actions, float).reshape(mu.shape) - mu) / self.exploration_std ** 2
            return self.batch_grad(O, coef[:, None] * G)
        raise UnsupportedEstimatorError("REINFORCE needs a stochastic policy; use det_pg_grad")

    # checkpoints
    def to_dict(self, metadata=None):
        meta = {"obs_dim": self.obs_dim, "hidden": list(self.hidden), "head": self.head,
                "exploration_std": self.exploration_std, "bound": self.bound,
                "action_lo": self.space.lo.tolist(), "action_hi": self.space.hi.tolist(),
                "action_values": None if self.space.values is None else self.space.values.tolist()}
        meta.update(metadata or {})
        raw = self.theta.astype("<f8").tobytes()
        return {"schema_version": SCHEMA_VERSION, "kind": self.kind, "shape": list(self.shape),
                "theta": base64.b64encode(raw).decode("ascii"), "metadata": meta}

    @classmethod
    def from_dict(cls, d):
        try:
            if d.get("schema_version") != SCHEMA_VERSION:
                raise CheckpointError(f"unsupported schema version {d.get('schema_version')!r}")
            meta = d["metadata"]
            vals = meta["action_values"]
            space = ActionSpace(meta["action_lo"], meta["action_hi"], vals)
            pol = cls(d["kind"], meta["obs_dim"], space, hidden=meta["hidden"],
                      exploration_std=meta["exploration_std"], head=meta["head"],
                      bound=meta["bound"])
            if list(pol.shape) != list(d["shape"]):
                raise CheckpointError("checkpoint shape does not match its description")
            raw = base64.b64decode(d["theta"].encode("ascii"), validate=True)
        except CheckpointError:
            raise
        except (KeyError, TypeError, ValueError, ConfigError) as err:
            raise CheckpointError(f"malformed policy checkpoint: {err}") from None
        if len(raw) != 8 * pol.n:
            raise CheckpointError(f"expected {pol.n} parameters, found {len(raw) / 8:g}")
        pol.theta = np.frombuffer(raw, dtype="<f8").astype(float)
        pol.metadata = {k: v for k, v in meta.items()}
        return pol


def masked_softmax(z, mask=None):
    z = np.asarray(z, dtype=float)
    if mask is None:
        e = np.exp(z - z.max())
        return e / e.sum()
    mask = np.asarray(mask, dtype=bool)
    if not mask.any():
        raise ArgumentError("empty action mask")
    zm = np.where(mask, z, -np.inf)
    e = np.where(mask, np.exp(zm - zm[mask].max()), 0.0)
    return e / e.sum()


def inverse_cdf(p, u):
    """Index of the first action whose cumulative probability exceeds ``u``."""
    c = 0.0
    last = 0
    for i, pi in enumerate(p):
        if pi <= 0.0:
            continue
        c += pi
        last = i
        if u < c:
            return i
    return last


def masked_softmax_rows(Z, M=None):
    Z = np.atleast_2d(np.asarray(Z, dtype=float))
    if M is None:
        E = np.exp(Z - Z.max(axis=1, keepdims=True))
        return E / E.sum(axis=1, keepdims=True)
    M = np.asarray(M, dtype=bool)
    if not M.any(axis=1).all():
        raise ArgumentError("empty action mask")
    Zm = np.where(M, Z, -np.inf)
    E = np.where(M, np.exp(Zm - Zm.max(axis=1, keepdims=True)), 0.0)
    return E / E.sum(axis=1, keepdims=True)


def inverse_cdf_rows(P, u):
    """Row-wise ``inverse_cdf``."""
    P = np.atleast_2d(P)
    C = np.cumsum(P, axis=1)
    hit = (P > 0) & (np.asarray(u)[:, None] < C)
    last = P.shape[1] - 1 - np.argmax((P > 0)[:, ::-1], axis=1)
    return np.where(hit.any(axis=1), np.argmax(hit, axis=1), last)


def save_policy(path, policy, metadata=None):
    with open(path, "w") as fh:
        json.dump(policy.to_dict(metadata), fh, indent=1, sort_keys=True)
        fh.write("\n")


def load_policy(path):
    try:
        with open(path) as fh:
            data = json.load(fh)
    except (OSError, json.JSONDecodeError) as err:
        raise CheckpointError(f"cannot read checkpoint {path}: {err}") from None
    if not isinstance(data, dict):
        raise CheckpointError("checkpoint must be a JSON object")
    return PolicyParams.from_dict(data)


# ---------------------------------------------------------------------------
# trajectories


@dataclass
class Trajectory:
    states: np.ndarray
    obs: np.ndarray
    leader_actions: np.ndarray
    follower_actions: np.ndarray
    leader_idx: np.ndarray
    follower_idx: np.ndarray
    rewards: np.ndarray
    constraints: np.ndarray
    masks: np.ndarray | None
    gamma: float
    termination: str = "horizon"  # horizon | absorbed | infeasible
    reason: str | None = None

    def __len__(self):
        return len(self.rewards)

    @property
    def discount_weights(self):
        return np.array([self.gamma ** t for t in range(len(self))], dtype=float)

    def reward_to_go(self):
        G = np.zeros(len(self))
        acc = 0.0
        for t in range(len(self) - 1, -1, -1):
            acc = self.rewards[t] + self.gamma * acc
            G[t] = acc
        return G

    def write_jsonl(self, fh):
        for t in range(len(self)):
            rec = {"t": t, "state": self.states[t].tolist(),
                   "leader_action": self.leader_actions[t].tolist(),
                   "follower_action": self.follower_actions[t].tolist(),
                   "reward": float(self.rewards[t])}
            fh.write(json.dumps(rec, sort_keys=True) + "\n")


def rollout_streams(rng, batch):
    """One independent child stream per trajectory index."""
    return rng.spawn(batch)


def sample_trajectory(game, leader, follower, rng, mask=None, horizon=None, start_state=None):
    """Roll out one episode: leader acts, then the follower (restricted by the
    feasibility mask when masking is on), then the game steps.

    Randomness: initial state first (skipped when ``start_state`` is given),
    then ``H x 2`` uniforms for action sampling, then ``H x 2`` normals when a
    policy explores with Gaussian noise.
    """
    H = game.horizon if horizon is None else int(horizon)
    use_mask = game.hard_constraints if mask is None else bool(mask)
    if start_state is None:
        s = np.asarray(game.initial_state(rng), dtype=float)
    else:
        s = np.array(start_state, dtype=float)
    U = rng.random((H, 2))
    Z = rng.standard_normal((H, 2)) if (leader.exploration_std > 0 or follower.exploration_std > 0) else np.zeros((H, 2))
    states, obs_l, al, bl, ai, bi, rs, gs, ms = [s], [], [], [], [], [], [], [], []
    termination, reason = "horizon", None
    for t in range(H):
        o = game.observe(s)
        ia, a = leader.sample(o, U[t, 0], Z[t, 0])
        m = None
        if use_mask and follower.head == "softmax":
            m = game.feasible_follower_mask(s, a)
            if not m.any():
                termination, reason = "infeasible", "no feasible follower action"
                break
        ib, b = follower.sample(o, U[t, 1], Z[t, 1], mask=m)
        if use_mask and follower.head != "softmax":
            b = game.project_follower(s, a, b)
            if b is None:
                termination, reason = "infeasible", "no feasible follower action"
                break
        s_next, r, g, done = game.step(s, a, b, rng)
        obs_l.append(o)
        al.append(np.atleast_1d(a))
        bl.append(np.atleast_1d(b))
        ai.append(ia)
        bi.append(ib)
        rs.append(r)
        gs.append(np.atleast_1d(g))
        if m is not None:
            ms.append(m)
        s = np.asarray(s_next, dtype=float)
        states.append(s)
        if done:
            termination, reason = "absorbed", done
            break
    K = game.num_constraints
    return Trajectory(
        states=np.array(states), obs=np.array(obs_l).reshape(len(rs), game.obs_dim),
        leader_actions=np.array(al).reshape(len(rs), game.leader_space.dim),
        follower_actions=np.array(bl).reshape(len(rs), game.follower_space.dim),
        leader_idx=np.array(ai, dtype=int), follower_idx=np.array(bi, dtype=int),
        rewards=np.array(rs, dtype=float), constraints=np.array(gs).reshape(len(rs), K),
        masks=np.array(ms) if ms else None, gamma=game.gamma,
        termination=termination, reason=reason)


def sample_batch(game, leader, follower, rng, batch, mask=None, horizon=None, start_states=None):
    streams = rollout_streams(rng, batch)
    return [sample_trajectory(game, leader, follower, r, mask, horizon,
                              None if start_states is None else start_states[i])
            for i, r in enumerate(streams)]


def discounted_return(traj):
    w = traj.discount_weights
    return float(w @ traj.rewards) if len(traj) else 0.0


@dataclass
class TrajectoryBatch:
    """A batch of episodes padded to a common horizon ``H``.

    Entries at ``t >= lengths[i]`` are padding (zeros, index -1).
    ``states[i, t]`` is the state before step ``t``.
    """
    states: np.ndarray
    obs: np.ndarray
    leader_actions: np.ndarray
    follower_actions: np.ndarray
    leader_idx: np.ndarray
    follower_idx: np.ndarray
    rewards: np.ndarray
    constraints: np.ndarray
    masks: np.ndarray | None
    lengths: np.ndarray
    gamma: float
    termination: list
    reasons: list

    @classmethod
    def empty(cls, batch, H, obs_dim, da, db, K, gamma, with_masks=False, n_follower=0, state_dim=6):
        return cls(
            states=np.zeros((batch, H + 1, state_dim)), obs=np.zeros((batch, H, obs_dim)),
            leader_actions=np.zeros((batch, H, da)), follower_actions=np.zeros((batch, H, db)),
            leader_idx=np.full((batch, H), -1), follower_idx=np.full((batch, H), -1),
            rewards=np.zeros((batch, H)), constraints=np.zeros((batch, H, K)),
            masks=np.zeros((batch, H, n_follower), dtype=bool) if with_masks else None,
            lengths=np.zeros(batch, dtype=int), gamma=gamma,
            termination=["horizon"] * batch, reasons=[None] * batch)

    def record(self, idx, t, O, A, B, ia, ib, r, g, M, nxt):
        self.obs[idx, t] = O
        self.leader_actions[idx, t] = A
        self.follower_actions[idx, t] = B
        self.leader_idx[idx, t] = ia
        self.follower_idx[idx, t] = ib
        self.rewards[idx, t] = r
        self.constraints[idx, t] = g
        if M is not None and self.masks is not None:
            self.masks[idx, t] = M
        self.states[idx, t + 1] = nxt
        self.lengths[idx] = t + 1

    def mark_infeasible(self, idx, t):
        for i in np.atleast_1d(idx):
            self.termination[i] = "infeasible"
            self.reasons[i] = "no feasible follower action"
            self.lengths[i] = t

    def mark_absorbed(self, i, length, reason):
        self.termination[i] = "absorbed"
        self.reasons[i] = reason
        self.lengths[i] = length

    @classmethod
    def from_trajectories(cls, trajs, game):
        H = max([len(t) for t in trajs] + [1])
        K = game.num_constraints
        nb = game.follower_space.n
        with_masks = any(t.masks is not None for t in trajs)
        tb = cls.empty(len(trajs), H, game.obs_dim, game.leader_space.dim, game.follower_space.dim,
                       K, game.gamma, with_masks, nb, state_dim=len(trajs[0].states[0]) if trajs else 1)
        for i, tr in enumerate(trajs):
            n = len(tr)
            tb.states[i, :len(tr.states)] = tr.states
            if n:
                tb.obs[i, :n] = tr.obs
                tb.leader_actions[i, :n] = tr.leader_actions
                tb.follower_actions[i, :n] = tr.follower_actions
                tb.leader_idx[i, :n] = tr.leader_idx
                tb.follower_idx[i, :n] = tr.follower_idx
                tb.rewards[i, :n] = tr.rewards
                tb.constraints[i, :n] = tr.constraints
                if tr.masks is not None:
                    tb.masks[i, :n] = tr.masks
            tb.lengths[i] = n
            tb.termination[i] = tr.termination
            tb.reasons[i] = tr.reason
        return tb

    def __len__(self):
        return len(self.lengths)

    @property
    def horizon(self):
        return self.rewards.shape[1]

    def valid(self):
        return np.arange(self.horizon)[None, :] < self.lengths[:, None]

    def discount_weights(self):
        return np.array([self.gamma ** t for t in range(self.horizon)])

    def returns(self):
        return (self.rewards * self.valid()) @ self.discount_weights()

    def reward_to_go(self):
        G = np.zeros_like(self.rewards)
        acc = np.zeros(len(self))
        R = self.rewards * self.valid()
        for t in range(self.horizon - 1, -1, -1):
            acc = R[:, t] + self.gamma * acc
            G[:, t] = acc
        return G

    def trajectory(self, i):
        n = int(self.lengths[i])
        return Trajectory(
            states=self.states[i, :n + 1].copy(), obs=self.obs[i, :n].copy(),
            leader_actions=self.leader_actions[i, :n].copy(),
            follower_actions=self.follower_actions[i, :n].copy(),
            leader_idx=self.leader_idx[i, :n].copy(), follower_idx=self.follower_idx[i, :n].copy(),
            rewards=self.rewards[i, :n].copy(), constraints=self.constraints[i, :n].copy(),
            masks=None if self.masks is None else self.masks[i, :n].copy(), gamma=self.gamma,
            termination=self.termination[i], reason=self.reasons[i])


def rollout(game, leader, follower, rng, batch, mask=None, horizon=None, start_states=None):
    """``batch`` episodes as a ``TrajectoryBatch``; games may supply a faster
    ``rollout_batch`` that consumes the random streams identically."""
    fast = getattr(game, "rollout_batch", None)
    if fast is not None:
        return fast(leader, follower, rng, batch, mask=mask, horizon=horizon, start_states=start_states)
    return TrajectoryBatch.from_trajectories(
        sample_batch(game, leader, follower, rng, batch, mask, horizon, start_states), game)


# ---------------------------------------------------------------------------
# value baseline


class ValueBaseline:
    """Tanh MLP state-value estimate ``v(obs; w)``; default one hidden layer of 64."""

    def __init__(self, obs_dim, hidden=(64,), rng=None, scale=1.0):
        self.obs_dim = int(obs_dim)
        self.hidden = tuple(hidden)
        self.sizes = (self.obs_dim,) + self.hidden + (1,)
        rng = rng if rng is not None else np.random.default_rng(0)
        parts = []
        for o, i in _mlp_shapes(self.sizes):
            parts.append(rng.standard_normal(o * i) * scale / math.sqrt(i))
            parts.append(np.zeros(o))
        self.w = np.concatenate(parts)

    def zero_output(self):
        """Zero the output layer so the baseline starts at exactly 0 everywhere."""
        o, i = self.sizes[-1], self.sizes[-2]
        self.w[len(self.w) - o * i - o:] = 0.0
        return self

    def copy(self):
        new = ValueBaseline.__new__(ValueBaseline)
        new.obs_dim, new.hidden, new.sizes = self.obs_dim, self.hidden, self.sizes
        new.w = self.w.copy()
        return new

    def _layers(self):
        out, off = [], 0
        for o, i in _mlp_shapes(self.sizes):
            W = self.w[off:off + o * i].reshape(o, i)
            off += o * i
            out.append((W, self.w[off:off + o]))
            off += o
        return out

    def forward(self, X):
        """Values for a batch of observations (N x obs_dim); also returns activations."""
        X = np.atleast_2d(np.asarray(X, dtype=float))
        acts = [X]
        h = X
        layers = self._layers()
        for k, (W, b) in enumerate(layers):
            z = h @ W.T + b
            h = z if k == len(layers) - 1 else np.tanh(z)
            acts.append(h)
        return acts[-1][:, 0], acts

    def __call__(self, X):
        return self.forward(X)[0]

    def grad(self, acts, gout):
        """Sum over the batch of ``gout_i * d v(x_i) / d w``."""
        layers = self._layers()
        g = np.asarray(gout, dtype=float)[:, None]
        parts = []
        for k in range(len(layers) - 1, -1, -1):
            W, _ = layers[k]
            if k != len(layers) - 1:
                g = g * (1.0 - acts[k + 1] ** 2)
            parts.append((g.T @ acts[k]).ravel())
            parts.append(g.sum(axis=0))
            g = g @ W
        flat = []
        for i in range(len(parts) - 2, -1, -2):
            flat.append(parts[i])
            flat.append(parts[i + 1])
        return np.concatenate(flat)

    def fit_step(self, X, targets, lr):
        """One averaged gradient step on ``0.5 * mean (target - v)^2``."""
        X = np.atleast_2d(X)
        if len(X) == 0 or lr == 0:
            return self
        v, acts = self.forward(X)
        delta = np.asarray(targets, dtype=float) - v
        self.w = self.w + lr * self.grad(acts, delta) / len(X)
        if not np.all(np.isfinite(self.w)):
            raise FloatingPointError("baseline parameters became non-finite")
        return self


def baseline_update(baseline, traj, lr):
    """One gradient step per visited step toward its reward-to-go, in order."""
    if lr == 0 or len(traj) == 0:
        return baseline
    G = traj.reward_to_go()
    for t in range(len(traj)):
        v, acts = baseline.forward(traj.obs[t:t + 1])
        delta = G[t] - v[0]
        if delta != 0.0:
            baseline.w = baseline.w + lr * baseline.grad(acts, [delta])
    if not np.all(np.isfinite(baseline.w)):
        raise FloatingPointError("baseline parameters became non-finite")
    return baseline


# ---------------------------------------------------------------------------
# estimators


def reinforce_grad(traj, policy, player="follower", baseline=None):
    """Score-function gradient of the follower's return w.r.t. one player's policy.

    ``sum_t gamma^t (G_t - v(s_t)) grad log pi(action_t | s_t)`` with ``G_t``
    the reward-to-go from step ``t`` (inclusive).
    """
    if not policy.stochastic:
        raise UnsupportedEstimatorError("REINFORCE needs a stochastic policy; use det_pg_grad")
    grad = np.zeros(policy.n)
    T = len(traj)
    if T == 0:
        return grad
    adv = traj.reward_to_go()
    if baseline is not None:
        adv = adv - baseline(traj.obs)
    w = traj.discount_weights
    for t in range(T):
        c = w[t] * adv[t]
        if c == 0.0:
            continue
        if player == "follower":
            m = traj.masks[t] if traj.masks is not None else None
            gl = policy.grad_log_prob(traj.obs[t], traj.follower_idx[t], traj.follower_actions[t], m)
        else:
            gl = policy.grad_log_prob(traj.obs[t], traj.leader_idx[t], traj.leader_actions[t])
        grad += c * gl
    return grad


def reinforce_batch_grad(tb, policy, player="follower", baseline=None):
    """Batch mean of ``reinforce_grad`` over the episodes of ``tb``."""
    if not policy.stochastic:
        raise UnsupportedEstimatorError("REINFORCE needs a stochastic policy; use det_pg_grad")
    valid = tb.valid()
    if not valid.any():
        return np.zeros(policy.n)
    adv = tb.reward_to_go()
    rows, cols = np.nonzero(valid)
    O = tb.obs[rows, cols]
    a = adv[rows, cols]
    if baseline is not None:
        a = a - baseline(O)
    coef = a * np.array([tb.gamma ** t for t in range(tb.horizon)])[cols]
    if player == "follower":
        M = None if tb.masks is None else tb.masks[rows, cols]
        g = policy.score_grad(O, tb.follower_idx[rows, cols], tb.follower_actions[rows, cols], coef, M)
    else:
        g = policy.score_grad(O, tb.leader_idx[rows, cols], tb.leader_actions[rows, cols], coef)
    return g / len(tb)


def baseline_fit(baseline, tb, lr):
    """One averaged gradient step of the value baseline on every visited state of the batch."""
    valid = tb.valid()
    if lr == 0 or not valid.any():
        return baseline
    rows, cols = np.nonzero(valid)
    return baseline.fit_step(tb.obs[rows, cols], tb.reward_to_go()[rows, cols], lr)


@dataclass
class PathwiseEstimate:
    value: float
    grad_x: np.ndarray
    grad_y: np.ndarray
    constraint: np.ndarray
    jac_x: np.ndarray
    jac_y: np.ndarray
    returns: np.ndarray = field(default_factory=lambda: np.zeros(0))
    violations: np.ndarray = field(default_factory=lambda: np.zeros(0))


def _constraint_weights(game, H):
    if game.constraint_states == "initial":
        w = np.zeros(H)
        w[0] = 1.0
        return w
    w = np.array([game.gamma ** t for t in range(H)])
    return w / w.sum()


def pathwise_rollout(game, leader, follower, s0, horizon=None, noise=None, project_constraint=True):
    """Forward-mode derivative of one deterministic rollout.

    Returns (return, d return/d theta, projected constraint, its Jacobian) where
    theta stacks the leader's then the follower's parameters.  The constraint
    is the weighted sum of ``min(g_t, 0)`` (or of ``g_t`` itself when
    ``project_constraint`` is False) over the game's constraint states.
    """
    H = game.horizon if horizon is None else int(horizon)
    nx, ny = leader.n, follower.n
    n = nx + ny
    s = np.asarray(s0, dtype=float)
    dS = np.zeros((len(s), n))
    K = game.num_constraints
    cw = _constraint_weights(game, H)
    ret, dret = 0.0, np.zeros(n)
    gsum, dg = np.zeros(K), np.zeros((K, n))
    for t in range(H):
        o, Jo = game.observe_jac(s)
        dO = Jo @ dS
        a, Ja, Jao = leader.act_jac(o)
        b, Jb, Jbo = follower.act_jac(o)
        if noise is not None:
            a = a + leader.exploration_std * noise[t, 0]
            b = b + follower.exploration_std * noise[t, 1]
        dA = Jao @ dO
        dA[:, :nx] += Ja
        dB = Jbo @ dO
        dB[:, nx:] += Jb
        st = game.step_grads(s, a, b)
        w = game.gamma ** t
        ret += w * st.reward
        dret += w * (st.r_s @ dS + st.r_a @ dA + st.r_b @ dB)
        if K and cw[t] != 0.0:
            neg = st.constraint < 0 if project_constraint else np.ones(K, dtype=bool)
            gsum += cw[t] * np.where(neg, st.constraint, 0.0)
            if neg.any():
                dgt = st.g_s @ dS + st.g_a @ dA + st.g_b @ dB
                dg[neg] += cw[t] * dgt[neg]
        dS = st.T_s @ dS + st.T_a @ dA + st.T_b @ dB
        s = np.asarray(st.next_state, dtype=float)
        if st.done:
            break
    return ret, dret, gsum, dg


def det_pg_grad(game, leader, follower, batch, rng, horizon=None, project_constraint=True):
    """Pathwise (deterministic policy) gradient of the follower's return and of
    the projected constraint for both players, averaged over ``batch`` rollouts.
    """
    if not game.differentiable:
        raise UnsupportedEstimatorError(f"{type(game).__name__} is not differentiable")
    if leader.head == "softmax" or follower.head == "softmax":
        raise UnsupportedEstimatorError("pathwise gradients need deterministic policies")
    fast = getattr(game, "pathwise_batch", None)
    if fast is not None:
        res = fast(leader, follower, rng, batch, horizon, project_constraint)
        if res is not None:
            return res
    nx = leader.n
    K = game.num_constraints
    H = game.horizon if horizon is None else int(horizon)
    rets, viols = np.zeros(batch), np.zeros(batch)
    dret = np.zeros(nx + follower.n)
    gs, dg = np.zeros(K), np.zeros((K, nx + follower.n))
    explore = leader.exploration_std > 0 or follower.exploration_std > 0
    for i, r in enumerate(rollout_streams(rng, batch)):
        s0 = game.initial_state(r)
        noise = None
        if explore:
            r.random((H, 2))
            noise = r.standard_normal((H, 2))
        ret, d, g, jg = pathwise_rollout(game, leader, follower, s0, H, noise, project_constraint)
        rets[i] = ret
        viols[i] = -np.minimum(g, 0.0).sum() if K else 0.0
        dret += d
        gs += g
        dg += jg
    return PathwiseEstimate(
        value=float(rets.mean()), grad_x=dret[:nx] / batch, grad_y=dret[nx:] / batch,
        constraint=gs / batch, jac_x=dg[:, :nx] / batch, jac_y=dg[:, nx:] / batch,
        returns=rets, violations=viols)


def constraint_expectation(game, leader, follower, batch, rng, horizon=None):
    """Monte-Carlo mean of the negative-part-projected constraint and its
    parameter Jacobians ``(g_bar, jac_x, jac_y)``."""
    if game.differentiable and leader.head != "softmax" and follower.head != "softmax":
        est = det_pg_grad(game, leader, follower, batch, rng, horizon)
        return est.constraint, est.jac_x, est.jac_y
    # values only for non-differentiable games
    K = game.num_constraints
    H = game.horizon if horizon is None else int(horizon)
    cw = _constraint_weights(game, H)
    total = np.zeros(K)
    for traj in sample_batch(game, leader, follower, rng, batch, mask=False, horizon=H):
        T = len(traj)
        if T:
            total += cw[:T] @ np.minimum(traj.constraints, 0.0)
    return total / batch, None, None


# ---------------------------------------------------------------------------
# game as a min-max problem


class GameProblem(CoupledMinMaxProblem):
    """Parameters of the two policies as the leader/follower decision vectors.

    One oracle call draws a batch of pathwise rollouts and returns the
    follower's mean discounted return with its gradients; a constraint draw
    takes its own batch.  ``sample_joint`` returns both from a single batch and
    is what the solvers use.
    """

    def __init__(self, game, leader, follower, batch=32, horizon=None, x_box=None, y_box=None,
                 project_constraint=True):
        x_box = x_box or leader.box
        y_box = y_box or follower.box
        super().__init__(x_box, y_box, game.num_constraints)
        self.game = game
        self.leader = leader.copy()
        self.follower = follower.copy()
        self.batch = int(batch)
        self.horizon = horizon
        self.project_constraint = project_constraint
        self.lipschitz_smooth = None

    def _policies(self, x, y):
        return self.leader.copy(np.asarray(x, float)), self.follower.copy(np.asarray(y, float))

    def _estimate(self, x, y, rng, batch=None):
        lp, fp = self._policies(x, y)
        return det_pg_grad(self.game, lp, fp, batch or self.batch, rng, self.horizon,
                           project_constraint=self.project_constraint)

    def sample_joint(self, x, y, rng):
        e = self._estimate(x, y, rng)
        return (e.value, e.grad_x, e.grad_y), (e.constraint, e.jac_x, e.jac_y), e

    def sample_objective(self, x, y, rng):
        e = self._estimate(x, y, rng)
        return e.value, e.grad_x, e.grad_y

    def sample_constraints(self, x, y, rng):
        e = self._estimate(x, y, rng)
        return e.constraint, e.jac_x, e.jac_y

    def objective_grads(self, x, y):
        e = self._estimate(x, y, np.random.default_rng(0), batch=self.batch)
        return e.value, e.grad_x, e.grad_y

    def constraint_grads(self, x, y):
        e = self._estimate(x, y, np.random.default_rng(0), batch=self.batch)
        return e.constraint, e.jac_x, e.jac_y


def as_minmax_problem(game, leader, follower, batch=32, horizon=None, x_box=None, y_box=None,
                      project_constraint=True):
    """Wrap a differentiable game as a coupled min-max problem over policy parameters."""
    if not game.differentiable:
        raise UnsupportedEstimatorError("as_minmax_problem needs a differentiable game")
    return GameProblem(game, leader, follower, batch, horizon, x_box, y_box, project_constraint)
