"""End-to-end acceptance checks, one test per numbered criterion.

Each test records a PASS/FAIL line (shown in the terminal summary) before
asserting, so a failing criterion still reports its measured numbers.
"""
import time

import numpy as np
import pytest

from stackgame.algos import TrainConfig, nested_policy_gda, train
from stackgame.cli import main
from stackgame.eval import PURSUIT, bellman_error, brute_force_commitment, stackelberg_verify_lp, tournament
from stackgame.games import AffineConcaveGame, two_arm_bandit
from stackgame.mdpgame import PolicyParams, det_pg_grad, masked_softmax, reinforce_grad, rollout, sample_batch
from stackgame.minmax import SolverConfig, benchmark_quadratic, gradient_error_terms, nested_sgda, se_residual
from stackgame.reachavoid import ReachAvoidGame

SEEDS = range(5)


@pytest.fixture(scope="module")
def benchmark_runs():
    """Criterion 1's runs, shared with criterion 5."""
    start = time.perf_counter()
    runs = []
    for seed in SEEDS:
        p = benchmark_quadratic(noise_std=0.05)
        runs.append((p, nested_sgda(p, SolverConfig(outer_iters=4000, inner_iters=200, seed=seed))))
    return runs, time.perf_counter() - start


def test_criterion_1_benchmark_convergence(benchmark_runs, criterion):
    runs, secs = benchmark_runs
    dist = np.mean([abs(log.x_bar[0] - 0.5) for _, log in runs])
    delta = np.mean([se_residual(p, log.x_bar, log.y_bar).delta for p, log in runs])
    ok = criterion(1, dist <= 0.05 and delta <= 0.02 and secs < 30,
                   f"mean |x_bar-0.5| {dist:.4f}, mean delta {delta:.2e}, {secs:.1f}s")
    assert ok


def test_criterion_2_rate_ordering(criterion):
    start = time.perf_counter()
    eps = {}
    for schedule in ("strongly_convex:2", "inv_sqrt"):
        vals = []
        for seed in SEEDS:
            p = benchmark_quadratic(noise_std=0.05, mu_x=2.0)
            log = nested_sgda(p, SolverConfig(outer_iters=1000, inner_iters=200, lr_outer=schedule, seed=seed))
            vals.append(se_residual(p, log.x_bar, log.y_bar).epsilon)
        eps[schedule] = np.mean(vals)
    secs = time.perf_counter() - start
    sc, slow = eps["strongly_convex:2"], eps["inv_sqrt"]
    ok = criterion(2, sc <= slow and secs < 30,
                   f"epsilon strongly_convex {sc:.2e} vs inv_sqrt {slow:.2e}, {secs:.1f}s")
    assert ok


def test_criterion_3_gradient_correctness(criterion):
    game = ReachAvoidGame()
    th = np.random.default_rng(0).normal(scale=0.1, size=26)

    def value(v):
        return det_pg_grad(game, PolicyParams("bilinear", 13, game.leader_space, theta=v[:13]),
                           PolicyParams("bilinear", 13, game.follower_space, theta=v[13:]),
                           8, np.random.default_rng(100), horizon=3, project_constraint=False)

    est = value(th)
    analytic = np.concatenate([est.grad_x, est.grad_y])
    h = 1e-5
    fd = np.array([(value(th + h * u).value - value(th - h * u).value) / (2 * h) for u in np.eye(26)])
    path_err = np.max(np.abs(analytic - fd) / np.abs(fd))

    payoff = [1.0, 0.3]
    bandit = two_arm_bandit(payoff)
    lead = PolicyParams("tabular_softmax", bandit.obs_dim, bandit.leader_space)
    foll = PolicyParams("tabular_softmax", bandit.obs_dim, bandit.follower_space, theta=[0.4, -0.2])
    trs = sample_batch(bandit, lead, foll, np.random.default_rng(1), 100_000)
    mc = np.mean([reinforce_grad(t, foll) for t in trs], axis=0)

    def expected(theta):
        return masked_softmax(theta) @ np.asarray(payoff)

    fd_bandit = np.array([(expected(foll.theta + 1e-4 * e) - expected(foll.theta - 1e-4 * e)) / 2e-4
                          for e in np.eye(2)])
    mc_err = np.max(np.abs(mc - fd_bandit) / np.abs(fd_bandit))
    ok = criterion(3, path_err <= 1e-3 and mc_err <= 0.02,
                   f"pathwise max rel err {path_err:.1e}, REINFORCE rel err {mc_err:.4f}")
    assert ok


def affine_value_and_best_response(game):
    """Closed-form follower objective pieces of the affine game (no rollouts)."""
    z = [game.z0]
    for _ in range(game.horizon - 1):
        z.append(game.M @ z[-1])
    z = np.array(z)
    S = np.cumsum(z, axis=0)
    w = game.gamma ** np.arange(game.horizon)
    c = sum(w[t] * (game.beta * z[t] - 2 * game.rho_w * game.w0 * S[t]) for t in range(game.horizon))
    Hm = sum(w[t] * (2 * game.rho * np.outer(z[t], z[t]) + 2 * game.rho_w * np.outer(S[t], S[t]))
             for t in range(game.horizon))
    y_free = np.linalg.solve(Hm, c)
    Hz = np.linalg.solve(Hm, game.z0)

    def best_response(X):
        excess = y_free @ game.z0 - (1.0 - X @ game.z0)
        return y_free if excess <= 0 else y_free - Hz * excess / (game.z0 @ Hz)

    def value(X, Y):
        lead = PolicyParams("bilinear", game.obs_dim, game.leader_space, theta=X)
        foll = PolicyParams("bilinear", game.obs_dim, game.follower_space, theta=Y)
        return det_pg_grad(game, lead, foll, 1, np.random.default_rng(0)).value

    return value, best_response


def test_criterion_4_convexity_properties(criterion):
    game = AffineConcaveGame()
    value, best_response = affine_value_and_best_response(game)
    rng = np.random.default_rng(0)
    concave_bad = convex_bad = 0
    for _ in range(200):
        X = rng.uniform(-1, 1, 2)
        Y1, Y2 = rng.uniform(-2, 2, (2, 2))
        m = rng.uniform(0.01, 0.99)
        concave_bad += value(X, m * Y1 + (1 - m) * Y2) < m * value(X, Y1) + (1 - m) * value(X, Y2) - 1e-6
    for _ in range(200):
        X1, X2 = rng.uniform(0, 1.5, (2, 2))
        m = rng.uniform(0.01, 0.99)
        Xm = m * X1 + (1 - m) * X2
        lhs = value(Xm, best_response(Xm))
        convex_bad += lhs > m * value(X1, best_response(X1)) + (1 - m) * value(X2, best_response(X2)) + 1e-6
    ok = criterion(4, concave_bad == 0 and convex_bad == 0,
                   f"{concave_bad} concavity and {convex_bad} convexity violations of 200 each")
    assert ok


def test_criterion_5_gradient_error_inequality(benchmark_runs, criterion):
    runs, _ = benchmark_runs
    checked = violated = 0
    for p, log in runs:
        _, lhs, rhs = gradient_error_terms(p, log, [0.5], every=100)
        checked += len(lhs)
        violated += int(np.sum(lhs > rhs + 1e-12))
    ok = criterion(5, violated == 0 and checked == 200, f"{violated} violations in {checked} checked iterates")
    assert ok


def test_criterion_6_safety_invariant(criterion):
    game = ReachAvoidGame()
    rng = np.random.default_rng(0)
    entries = episodes = 0
    for _ in range(10):
        lead = PolicyParams.init("mlp", game.obs_dim, game.leader_space, rng, 1.0)
        foll = PolicyParams.init("mlp", game.obs_dim, game.follower_space, rng, 1.0)
        tb = rollout(game, lead, foll, rng, 1000)
        steps = np.arange(game.horizon + 1)
        live = (steps[None, :] <= tb.lengths[:, None]) & (steps[None, :] > 0)
        gap = np.hypot(tb.states[..., 0] - tb.states[..., 3], tb.states[..., 1] - tb.states[..., 4])
        entries += int(np.sum(live & (gap < game.cfg.capture_radius)))
        entries += sum(t == "capture" for t in tb.termination)
        episodes += len(tb.lengths)
    ok = criterion(6, entries == 0 and episodes == 10_000, f"{entries} capture-ball entries in {episodes} episodes")
    assert ok


@pytest.mark.slow
def test_criterion_7_bellman_error_trend(criterion):
    game = ReachAvoidGame()
    start = time.perf_counter()
    early = late = 0.0
    for seed in range(3):
        snap = {}

        def monitor(event, t, x, y, lam):
            if event == "leader" and t == 9:
                snap["x"], snap["y"] = np.copy(x), np.copy(y)

        cfg = TrainConfig(algo="nested_pgda", outer_iters=500, inner_iters=3, lr_leader="inv_sqrt:0.0003",
                          lr_follower="inv_sqrt:0.0003", init_scale=0.01, seed=seed)
        res = nested_policy_gda(game, cfg, monitor=monitor)
        at10 = (PolicyParams("bilinear", 13, game.leader_space, theta=snap["x"]),
                PolicyParams("bilinear", 13, game.follower_space, theta=snap["y"]))
        early += bellman_error(game, *at10, 32, 32, "stackelberg", np.random.default_rng(1000 + seed)).error
        late += bellman_error(game, res.leader, res.follower, 32, 32, "stackelberg",
                              np.random.default_rng(1000 + seed)).error
    secs = time.perf_counter() - start
    ratio = late / early
    ok = criterion(7, ratio <= 0.5 and secs < 300,
                   f"mean error {early / 3:.4f} at iteration 10, {late / 3:.4f} at 500 (ratio {ratio:.2f}), {secs:.0f}s")
    assert ok


@pytest.mark.slow
def test_criterion_8_ordinal_tournament(criterion):
    start = time.perf_counter()
    common = dict(outer_iters=500, lr_leader="fixed:0.01", lr_follower="fixed:0.01", lr_baseline="fixed:0.001",
                  policy="mlp", hidden=(), batch_size=32, init_scale=0.1, max_grad_norm=50.0, seed=0)
    se = train(ReachAvoidGame(reward_mode="stackelberg_hard"),
               TrainConfig(algo="nested_reinforce", inner_iters=3, **common))
    gne = train(ReachAvoidGame(reward_mode="gne_soft"), TrainConfig(algo="sim_reinforce", **common))
    se.follower.metadata = {"reward_mode": "stackelberg_hard"}
    gne.follower.metadata = {"reward_mode": "gne_soft"}
    rows = tournament({"SE": se.follower, "GNE": gne.follower}, {"GNE": gne.leader, "pursuit": PURSUIT}, 50, 3)
    wins = {r.scenario: r.counts[:, 0].mean() for r in rows}
    secs = time.perf_counter() - start
    beats_gne = wins["SE vs GNE"] > wins["GNE vs GNE"]
    beats_pursuit = wins["SE vs pursuit"] > wins["GNE vs pursuit"]
    ok = criterion(8, beats_gne and beats_pursuit and secs < 600,
                   f"mean wins of 50 vs GNE defender {wins['SE vs GNE']:.2f} (SE) / {wins['GNE vs GNE']:.2f} (GNE), "
                   f"vs pursuit {wins['SE vs pursuit']:.2f} / {wins['GNE vs pursuit']:.2f}, {secs:.0f}s")
    assert ok


def test_criterion_9_lp_matches_grid(criterion):
    rng = np.random.default_rng(9)
    worst = 0.0
    for _ in range(100):
        q = rng.uniform(-1, 1, (3, 3))
        worst = max(worst, abs(stackelberg_verify_lp(q)[1] - brute_force_commitment(q, 0.01)[1]))
    ok = criterion(9, worst <= 0.01, f"max |LP - grid| {worst:.2e} over 100 matrices")
    assert ok


def snapshot(root):
    return {p.relative_to(root).as_posix(): p.read_bytes() for p in sorted(root.rglob("*")) if p.is_file()}


def test_criterion_10_cli_determinism(tmp_path, criterion):
    small = ["--set", "train.batch_size=4", "--set", "train.init_scale=0.1"]
    ckpt = tmp_path / "seed_run"
    assert main(["train", "--algo", "sim-reinforce", "--outer", "3", "--out", str(ckpt), "--set", "train.policy=mlp",
                 "--set", "env.reward_mode=gne_soft", *small]) == 0
    att, dfn = ckpt / "checkpoints" / "follower.json", ckpt / "checkpoints" / "leader.json"
    commands = {
        "minmax": ["minmax", "quadratic-noisy:0.05", "--seed", "3", "--set", "minmax.outer_iters=300"],
        "train": ["train", "--algo", "nested-pgda", "--outer", "5", "--seed", "3", *small],
        "eval tournament": ["eval", "tournament", "--attacker", f"a={att}", "--defender", f"d={dfn}",
                            "--matches", "4", "--seeds", "2", "--render", "1", "--seed", "3"],
        "eval pursuit": ["eval", "pursuit", "--attacker", str(att), "--episodes", "10", "--seed", "3"],
        "eval bellman": ["eval", "bellman", "--seed", "3", "--set", "eval.num_states=8",
                         "--set", "eval.num_rollouts=4"],
        "eval verify": ["eval", "verify", "--seed", "3"],
    }
    differing = []
    for name, args in commands.items():
        outs = []
        for k in range(2):
            out = tmp_path / f"{name.replace(' ', '_')}_{k}"
            assert main([*args, "--out", str(out)]) == 0, name
            outs.append(snapshot(out))
        if outs[0] != outs[1] or not outs[0]:
            differing.append(name)
    ok = criterion(10, not differing,
                   f"{len(commands) - len(differing)} of {len(commands)} subcommands byte-identical"
                   + (f"; differing: {', '.join(differing)}" if differing else ""))
    assert ok
