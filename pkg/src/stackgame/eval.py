"""Evaluation harness: empirical Bellman error, Stackelberg verification by
linear programming, tournaments between trained policies and matches
against the scripted pursuer."""
from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import simplex
from .errors import ArgumentError, UnsupportedEstimatorError
from .mdpgame import PolicyParams, load_policy, rollout
from .reachavoid import ReachAvoidConfig, ReachAvoidGame

# ---------------------------------------------------------------------------
# Bellman error


@dataclass
class BellmanEstimate:
    error: float
    num_states: int
    num_rollouts: int
    variant: str
    per_state: np.ndarray = field(repr=False)
    std_error: float = 0.0


def _tail_returns(tb):
    """Discounted return from step 1 onward of every episode in ``tb``."""
    R = np.where(tb.valid(), tb.rewards, 0.0)
    if tb.horizon < 2:
        return np.zeros(len(tb))
    w = tb.gamma ** np.arange(tb.horizon - 1)
    return R[:, 1:] @ w


def _episode_returns(tb):
    R = np.where(tb.valid(), tb.rewards, 0.0)
    return R @ (tb.gamma ** np.arange(tb.horizon))


def _sample_states(game, leader, follower, rng, n, how):
    if how == "initial":
        return np.array([game.initial_state(r) for r in rng.spawn(n)])
    if how != "visited":
        raise ArgumentError(f"states must be 'initial' or 'visited', got {how!r}")
    tb = rollout(game, leader, follower, rng, n)
    picks = rng.random(n)
    S = np.empty((n, tb.states.shape[2]))
    for i in range(n):
        L = int(tb.lengths[i])
        S[i] = tb.states[i, min(int(picks[i] * L), L - 1) if L > 0 else 0]
    return S


def bellman_error(game, leader: PolicyParams, follower: PolicyParams, num_states=32, num_rollouts=32,
                  variant="stackelberg", rng=None, *, next_state="realized", states="initial",
                  start_states=None, horizon=None) -> BellmanEstimate:
    """Mean over sampled states of ``|Q(s) - V(s)|``.

    ``V(s)`` is the Monte-Carlo return of the profile from ``s``.  ``Q(s)`` is
    the one-step backup ``min_a max_b r(s, a, b) + gamma * V(next)`` over the
    players' discrete action values; in the ``stackelberg`` variant the
    follower only ranges over moves that keep every constraint nonnegative
    (a leader move leaving none ends the episode with value 0).

    ``next_state="realized"`` continues every deviation from the next state
    the profile actually reached (the tail of the same rollouts);
    ``"deviation"`` rolls the profile out from each deviation's own next state.
    States come from the initial distribution (default) or, with
    ``states="visited"``, uniformly from the steps of on-policy episodes.
    """
    if variant not in ("nash", "stackelberg"):
        raise ArgumentError(f"variant must be 'nash' or 'stackelberg', got {variant!r}")
    if next_state not in ("realized", "deviation"):
        raise ArgumentError(f"next_state must be 'realized' or 'deviation', got {next_state!r}")
    A_vals, B_vals = game.leader_space.values, game.follower_space.values
    if A_vals is None or B_vals is None:
        raise UnsupportedEstimatorError("Bellman error needs discrete action sets to enumerate")
    rng = rng if rng is not None else np.random.default_rng(0)
    H = game.horizon if horizon is None else int(horizon)
    r_states, r_value, r_step, r_next = rng.spawn(4)
    S = (np.asarray(start_states, dtype=float) if start_states is not None
         else _sample_states(game, leader, follower, r_states, num_states, states))
    n, R = len(S), int(num_rollouts)
    if n == 0 or R < 1:
        raise ArgumentError("need at least one state and one rollout")
    # work in lexicographic order so the estimate depends on the set of states only
    order = np.lexsort(S.T[::-1])
    S = S[order]

    tb = rollout(game, leader, follower, r_value, n * R, horizon=H, start_states=np.repeat(S, R, axis=0))
    V = _episode_returns(tb).reshape(n, R)
    tails = _tail_returns(tb).reshape(n, R)

    na, nb = len(A_vals), len(B_vals)
    step_rngs = r_step.spawn(n)
    rew = np.empty((n, na, nb))
    ok = np.ones((n, na, nb), dtype=bool)
    done = np.zeros((n, na, nb), dtype=bool)
    nxt = {}
    for i in range(n):
        for (ia, a), (ib, b) in itertools.product(enumerate(A_vals), enumerate(B_vals)):
            s2, r, g, d = game.step(S[i], np.asarray(a, float), np.asarray(b, float), step_rngs[i])
            rew[i, ia, ib] = r
            done[i, ia, ib] = d is not None
            if variant == "stackelberg" and np.size(g):
                ok[i, ia, ib] = bool(np.all(np.asarray(g) >= 0.0))
            nxt[i, ia, ib] = s2

    if next_state == "realized":
        cont = np.broadcast_to(np.array([math.fsum(t) / R for t in tails])[:, None, None], rew.shape)
    else:
        keys = [k for k in nxt if not done[k]]
        cont = np.zeros(rew.shape)
        if keys and H > 1:
            starts = np.repeat(np.array([nxt[k] for k in keys]), R, axis=0)
            tb2 = rollout(game, leader, follower, r_next, len(starts), horizon=H - 1, start_states=starts)
            vals = _episode_returns(tb2).reshape(len(keys), R)
            for k, v in zip(keys, vals):
                cont[k] = math.fsum(v) / R
    Q = rew + game.gamma * cont

    per_state = np.empty(n)
    for i in range(n):
        best = []
        for ia in range(na):
            feas = ok[i, ia]
            best.append(Q[i, ia][feas].max() if feas.any() else 0.0)
        per_state[i] = abs(min(best) - math.fsum(V[i]) / R)
    err = math.fsum(per_state) / n
    se = float(per_state.std(ddof=1) / math.sqrt(n)) if n > 1 else 0.0
    per_state[order] = per_state.copy()
    return BellmanEstimate(err, n, R, variant, per_state, se)


# ---------------------------------------------------------------------------
# Stackelberg verification


def stackelberg_verify_lp(q_row):
    """Optimal committed mixture of a row player who receives ``q_row[a, b]``
    against a zero-sum follower that best-responds to the mixture.

    One LP per candidate response ``b*``: maximise ``sum_a q(a, b*) p(a)``
    subject to ``b*`` being a best response of the follower (whose payoff is
    ``-q``) and ``p`` in the simplex.  Returns ``(p, value)`` of the best LP.
    """
    q = np.atleast_2d(np.asarray(q_row, dtype=float))
    if q.ndim != 2 or q.size == 0:
        raise ArgumentError("payoff must be a non-empty matrix")
    if not np.all(np.isfinite(q)):
        raise ArgumentError("payoff must be finite")
    na, nb = q.shape
    best_p, best_v = None, -math.inf
    for bs in range(nb):
        others = [b for b in range(nb) if b != bs]
        m = len(others)
        # variables p (na) then one slack per competing response
        A = np.zeros((m + 1, na + m))
        for k, b in enumerate(others):
            A[k, :na] = q[:, bs] - q[:, b]
            A[k, na + k] = 1.0
        A[m, :na] = 1.0
        rhs = np.zeros(m + 1)
        rhs[m] = 1.0
        c = np.concatenate([q[:, bs], np.zeros(m)])
        res = simplex.solve(c, A, rhs)
        if res.status == "optimal" and res.value > best_v + 1e-12:
            best_p, best_v = res.x[:na], res.value
    if best_p is None:
        raise FloatingPointError("every verification LP failed")
    p = np.clip(best_p, 0.0, None)
    return p / p.sum(), float(best_v)


def commitment_value(q_row, p):
    """Row player's value of mixture ``p`` against the follower's best response."""
    return float(np.min(np.asarray(p, dtype=float) @ np.atleast_2d(q_row)))


def brute_force_commitment(q_row, step=0.01):
    """Grid search over the leader's mixtures; the oracle for the LP."""
    q = np.atleast_2d(np.asarray(q_row, dtype=float))
    na = q.shape[0]
    k = int(round(1 / step))
    grid = np.array([c for c in itertools.product(range(k + 1), repeat=na - 1) if sum(c) <= k],
                    dtype=float).reshape(-1, na - 1)
    P = np.hstack([grid, k - grid.sum(axis=1, keepdims=True)]) / k
    vals = (P @ q).min(axis=1)
    i = int(np.argmax(vals))
    return P[i], float(vals[i])


# ---------------------------------------------------------------------------
# matches

OUTCOMES = ("attacker_win", "defender_win", "draw")
_OUTCOME_OF = {"target": "attacker_win", "capture": "defender_win", "infeasible": "defender_win",
               "horizon": "draw"}
PURSUIT = "pursuit"
PURSUIT_STREAM = (1,)


@dataclass(frozen=True)
class MatchResult:
    outcome: str
    length: int
    seed: int
    termination: str = ""


def as_policy(p):
    if isinstance(p, PolicyParams):
        return p
    return load_policy(Path(p))


def attacker_masked(policy, masking="auto"):
    """Hard-mode attackers play with their unsafe moves masked out."""
    if masking != "auto":
        return bool(masking)
    return getattr(policy, "metadata", {}).get("reward_mode") == "stackelberg_hard"


def match_game(cfg: ReachAvoidConfig | None = None):
    """The environment matches are played in: capture ends the game."""
    return ReachAvoidGame(cfg or ReachAvoidConfig(), capture_terminal=True)


def _match_batch(attacker, defender, n, seed, cfg, masking, stream_key):
    game = match_game(cfg)
    att = as_policy(attacker)
    override = None
    if isinstance(defender, str) and defender == PURSUIT:
        defn = PolicyParams("bilinear", game.obs_dim, game.leader_space)
        override = game.pursuit_batch
    else:
        defn = as_policy(defender)
    rng = np.random.default_rng(np.random.SeedSequence(int(seed), spawn_key=tuple(stream_key)))
    return game.rollout_batch(defn, att, rng, n, mask=attacker_masked(att, masking), leader_override=override)


def play_matches(attacker, defender, n, seed, cfg=None, masking="auto", stream_key=(0,)):
    """``n`` matches of one attacker against a defender policy or ``"pursuit"``,
    each on its own child stream of ``(seed, stream_key)``."""
    tb = _match_batch(attacker, defender, n, seed, cfg, masking, stream_key)
    ends = [tb.reasons[i] if tb.termination[i] == "absorbed" else tb.termination[i] for i in range(n)]
    return [MatchResult(_OUTCOME_OF[ends[i]], int(tb.lengths[i]), int(seed), ends[i]) for i in range(n)]


def match_states(attacker, defender, n, seed, cfg=None, masking="auto", stream_key=(0,)):
    """Visited joint states of the same ``n`` matches ``play_matches`` plays."""
    tb = _match_batch(attacker, defender, n, seed, cfg, masking, stream_key)
    return [tb.states[i, :int(tb.lengths[i]) + 1].copy() for i in range(n)]


TABLE_COLUMNS = ("scenario", "attacker_wins_mean", "attacker_wins_std", "defender_wins_mean",
                 "defender_wins_std", "draws_mean", "draws_std", "win_length_mean", "win_length_std",
                 "loss_length_mean", "loss_length_std")


@dataclass
class TableRow:
    scenario: str
    attacker: str
    defender: str
    counts: np.ndarray                  # seeds x 3 (attacker wins, defender wins, draws)
    win_lengths: list
    loss_lengths: list
    matches: list = field(repr=False, default_factory=list)

    def values(self):
        def ms(v):
            v = np.asarray(v, dtype=float)
            return (float(v.mean()), float(v.std())) if v.size else (math.nan, math.nan)
        c = self.counts
        return [*ms(c[:, 0]), *ms(c[:, 1]), *ms(c[:, 2]), *ms(self.win_lengths), *ms(self.loss_lengths)]


def _row(name_a, name_d, results_by_seed):
    counts = np.array([[sum(r.outcome == o for r in rs) for o in OUTCOMES] for rs in results_by_seed])
    flat = [r for rs in results_by_seed for r in rs]
    return TableRow(f"{name_a} vs {name_d}", name_a, name_d, counts,
                    [r.length for r in flat if r.outcome == "attacker_win"],
                    [r.length for r in flat if r.outcome == "defender_win"], flat)


def tournament(attackers, defenders, matches_per_pair=50, seeds=5, cfg=None, masking="auto"):
    """Every attacker against every defender, ``matches_per_pair`` matches per
    seed.  ``attackers``/``defenders`` map names to policies or checkpoint
    paths; a defender may be ``"pursuit"``."""
    seeds = list(range(seeds)) if isinstance(seeds, int) else list(seeds)
    att = {k: as_policy(v) for k, v in attackers.items()}
    dfn = {k: (v if isinstance(v, str) and v == PURSUIT else as_policy(v)) for k, v in defenders.items()}
    rows = []
    for ia, (na, pa) in enumerate(att.items()):
        for jd, (nd, pd) in enumerate(dfn.items()):
            per_seed = [play_matches(pa, pd, matches_per_pair, s, cfg, masking, stream_key=(ia, jd))
                        for s in seeds]
            rows.append(_row(na, nd, per_seed))
    return rows


def eval_vs_pursuit(attacker, n=100, cfg=None, seed=0, masking="auto"):
    """Counts of ``reached`` / ``collision`` / ``neither`` against the pursuer."""
    res = play_matches(attacker, PURSUIT, n, seed, cfg, masking, stream_key=PURSUIT_STREAM)
    return {"reached": sum(r.outcome == "attacker_win" for r in res),
            "collision": sum(r.outcome == "defender_win" for r in res),
            "neither": sum(r.outcome == "draw" for r in res),
            "results": res}


def _fmt(v):
    return "nan" if isinstance(v, float) and math.isnan(v) else f"{v:.4f}"


def write_table_csv(rows, path):
    with open(path, "w") as fh:
        fh.write(",".join(TABLE_COLUMNS) + "\n")
        for r in rows:
            fh.write(",".join([r.scenario, *(_fmt(v) for v in r.values())]) + "\n")


def format_table(rows):
    """Aligned plain text, ``mean ± std`` per cell."""
    head = ["scenario", "attacker wins", "defender wins", "draws", "win length", "loss length"]
    body = []
    for r in rows:
        v = r.values()
        cells = [f"{v[i]:.2f} ± {v[i + 1]:.2f}" if not math.isnan(v[i]) else "-" for i in range(0, 10, 2)]
        body.append([r.scenario, *cells])
    widths = [max(len(x[i]) for x in [head] + body) for i in range(len(head))]
    lines = ["  ".join(c.ljust(w) for c, w in zip(line, widths)).rstrip() for line in [head] + body]
    return "\n".join(lines) + "\n"
