import json

import numpy as np
import pytest

from stackgame.algos import (RECORD_COLUMNS, TrainConfig, TrainingAborted, initial_policies, load_state,
                             nested_policy_gda, nested_reinforce_baseline, read_records, save_state,
                             simultaneous_policy_gda, simultaneous_reinforce_baseline, train,
                             write_records)
from stackgame.errors import CheckpointError, ConfigError
from stackgame.games import MatrixBandit, MatrixChain, OneStepBenchmark, two_arm_bandit
from stackgame.mdpgame import (PolicyParams, as_minmax_problem, masked_softmax, reinforce_batch_grad,
                               rollout)
from stackgame.minmax import benchmark_quadratic, iteration_rng, nested_sgda, se_residual
from stackgame.reachavoid import ReachAvoidGame


def one_step_pair(x0=0.2, y0=0.3):
    g = OneStepBenchmark()
    return (g, PolicyParams("bilinear", 1, g.leader_space, theta=[x0]),
            PolicyParams("bilinear", 1, g.follower_space, theta=[y0]))


def softmax_pair(game):
    return (PolicyParams("tabular_softmax", game.obs_dim, game.leader_space),
            PolicyParams("tabular_softmax", game.obs_dim, game.follower_space))


# --- configuration -----------------------------------------------------------

@pytest.mark.parametrize("bad", [dict(algo="nested"), dict(outer_iters=0), dict(inner_iters=-1),
                                 dict(batch_size=0), dict(lambda_cap=0.0), dict(inner_output="best"),
                                 dict(algo="nested_pgda", policy="tabular_softmax"),
                                 dict(algo="sim_reinforce", policy="bilinear")])
def test_config_rejects(bad):
    with pytest.raises(ConfigError):
        TrainConfig(**bad)


def test_config_roundtrip_and_unknown_keys():
    cfg = TrainConfig(algo="sim_reinforce", hidden=[8], seed=3)
    assert TrainConfig.from_dict(json.loads(json.dumps(cfg.to_dict()))) == cfg
    with pytest.raises(ConfigError):
        TrainConfig.from_dict({"algo": "sim_pgda", "learning_rate": 1})


# --- nested policy GDA -------------------------------------------------------

def test_nested_pgda_replays_nested_sgda():
    g, lead, foll = one_step_pair()
    cfg = TrainConfig(algo="nested_pgda", outer_iters=50, inner_iters=5, lr_leader="fixed:0.05",
                      lr_follower="fixed:0.1", batch_size=2, lambda_cap=4)
    res = nested_policy_gda(g, cfg, lead, foll)
    prob = as_minmax_problem(g, lead, foll, batch=2, x_box=g.leader_param_box, y_box=g.follower_param_box)
    log = nested_sgda(prob, cfg.solver_config(), x0=[0.2], y0=[0.3])
    assert np.array_equal(res.leader.theta, log.final.x)
    assert np.array_equal(res.follower.theta, log.final.y)
    assert np.array_equal(res.lam, log.final.lam)
    assert len(res.records) == 50


def test_zero_inner_iterations_freeze_follower():
    g, lead, foll = one_step_pair()
    cfg = TrainConfig(algo="nested_pgda", outer_iters=20, inner_iters=0, lr_leader="fixed:0.05", batch_size=1)
    res = nested_policy_gda(g, cfg, lead, foll)
    assert np.array_equal(res.follower.theta, foll.theta)
    assert res.follower_updates == 0 and res.leader_updates == 20
    assert not np.array_equal(res.leader.theta, lead.theta)


@pytest.mark.parametrize("algo", ["nested_pgda", "sim_pgda"])
def test_zero_rates_keep_parameters(algo):
    g, lead, foll = one_step_pair()
    cfg = TrainConfig(algo=algo, outer_iters=10, lr_leader="fixed:0", lr_follower="fixed:0", batch_size=2)
    res = train(g, cfg, lead, foll)
    assert np.array_equal(res.leader.theta, lead.theta)
    assert np.array_equal(res.follower.theta, foll.theta)


@pytest.mark.parametrize("algo", ["nested_reinforce", "sim_reinforce"])
def test_zero_rates_keep_softmax_parameters(algo):
    game = MatrixBandit([[1.0, 0.0], [0.2, 0.5]])
    cfg = TrainConfig(algo=algo, outer_iters=10, lr_leader="fixed:0", lr_follower="0", batch_size=4,
                      init_scale=0.3)
    lead, foll = initial_policies(game, cfg)
    res = train(game, cfg)
    assert np.array_equal(res.leader.theta, lead.theta)
    assert np.array_equal(res.follower.theta, foll.theta)


@pytest.mark.parametrize("algo,Tx,Ty,expected", [("nested_pgda", 7, 4, 28), ("sim_pgda", 7, 4, 7),
                                                 ("nested_reinforce", 5, 3, 15), ("sim_reinforce", 5, 3, 5)])
def test_update_counts(algo, Tx, Ty, expected):
    if algo.endswith("pgda"):
        game, lead, foll = one_step_pair()
    else:
        game = two_arm_bandit()
        lead, foll = softmax_pair(game)
    cfg = TrainConfig(algo=algo, outer_iters=Tx, inner_iters=Ty, batch_size=1,
                      lr_leader="fixed:0.01", lr_follower="fixed:0.01")
    res = train(game, cfg, lead, foll)
    assert res.follower_updates == expected
    assert res.leader_updates == Tx
    assert len(res.records) == Tx
    assert [r.iter for r in res.records] == list(range(Tx))


@pytest.mark.parametrize("algo", ["nested_pgda", "nested_reinforce"])
def test_leader_frozen_during_inner_loop(algo):
    if algo == "nested_pgda":
        game, lead, foll = one_step_pair()
    else:
        game = MatrixBandit([[1.0, 0.0], [0.2, 0.5]])
        lead, foll = softmax_pair(game)
    events = []
    cfg = TrainConfig(algo=algo, outer_iters=6, inner_iters=3, batch_size=2,
                      lr_leader="fixed:0.1", lr_follower="fixed:0.1")
    train(game, cfg, lead, foll, monitor=lambda e, t, x, y, lam: events.append((e, t, x)))
    current = lead.theta
    for event, t, x in events:
        if event == "follower":
            assert np.array_equal(x, current)
        else:
            current = x
    assert [e for e, _, _ in events[:4]] == ["follower"] * 3 + ["leader"]


@pytest.mark.parametrize("algo", ["nested_pgda", "sim_pgda", "nested_reinforce", "sim_reinforce"])
def test_parameters_projected_after_every_update(algo):
    if algo.endswith("pgda"):
        game = ReachAvoidGame()
        kw = dict(batch_size=2, outer_iters=4, inner_iters=2)
    else:
        game = MatrixBandit([[1.0, 0.0], [0.2, 0.5]])
        kw = dict(batch_size=4, outer_iters=20, inner_iters=2)
    bound = 0.05
    seen = []

    def check(event, t, x, y, lam):
        seen.append(event)
        assert np.all(np.abs(x) <= bound) and np.all(np.abs(y) <= bound)
        assert np.all(lam >= 0) and np.all(lam <= 10.0)

    cfg = TrainConfig(algo=algo, lr_leader="fixed:5", lr_follower="fixed:5", param_bound=bound,
                      init_scale=0.01, **kw)
    train(game, cfg, monitor=check)
    assert len(seen) > 0


def test_simultaneous_steps_from_the_same_point():
    g, lead, foll = one_step_pair(0.4, 0.4)
    cfg = TrainConfig(algo="sim_pgda", outer_iters=1, lr_leader="fixed:0.1", lr_follower="fixed:0.1",
                      batch_size=1, lambda_cap=4)
    res = simultaneous_policy_gda(g, cfg, lead, foll)
    # f = x^2 + y, g = 1 - x - y at (0.4, 0.4) with lambda 0: grad_x = 0.8, grad_y = 1
    assert res.leader.theta[0] == pytest.approx(0.4 - 0.1 * 0.8)
    assert res.follower.theta[0] == pytest.approx(0.4 + 0.1 * 1.0)
    assert res.lam[0] == pytest.approx(0.0)


def test_simultaneous_gda_misses_the_stackelberg_point():
    game, quad = OneStepBenchmark(), benchmark_quadratic()
    eps = {"nested_pgda": [], "sim_pgda": []}
    for seed in range(5):
        init = np.random.default_rng(seed).random(2)
        for algo, kw in (("nested_pgda", dict(outer_iters=200, inner_iters=50, lr_leader="strongly_convex:2",
                                              lr_follower="inv_sqrt:0.5", inner_output="average")),
                         ("sim_pgda", dict(outer_iters=1000, lr_leader="fixed:0.02", lr_follower="fixed:0.05"))):
            cfg = TrainConfig(algo=algo, batch_size=1, lambda_cap=4, seed=seed, project_constraint=False, **kw)
            res = train(game, cfg, PolicyParams("bilinear", 1, game.leader_space, theta=init[:1]),
                        PolicyParams("bilinear", 1, game.follower_space, theta=init[1:]))
            x, y = np.clip(res.leader_avg.theta, 0, 1), np.clip(res.follower.theta, 0, 1)
            eps[algo].append(se_residual(quad, x, y).epsilon)
    assert np.mean(eps["sim_pgda"]) - np.mean(eps["nested_pgda"]) >= 0.05


@pytest.mark.slow
def test_reachavoid_violation_small_after_training():
    game = ReachAvoidGame()
    final = []
    for seed in range(3):
        cfg = TrainConfig(algo="nested_pgda", outer_iters=500, lr_leader="inv_sqrt:0.0003",
                          lr_follower="inv_sqrt:0.0003", init_scale=0.01, seed=seed)
        final.append(nested_policy_gda(game, cfg).records[-1].violation)
    assert np.mean(final) <= 0.05


# --- REINFORCE ---------------------------------------------------------------

def test_bandit_follower_finds_better_arm():
    game = two_arm_bandit((1.0, 0.3))
    cfg = TrainConfig(algo="nested_reinforce", outer_iters=2000, inner_iters=1, lr_leader="fixed:0.1",
                      lr_follower="fixed:0.1", lr_baseline="fixed:0", batch_size=1)
    res = nested_reinforce_baseline(game, cfg, *softmax_pair(game))
    assert masked_softmax(res.follower.theta)[0] >= 0.95


def test_zero_baseline_rate_is_plain_reinforce():
    game = MatrixChain([[[1.0, 0.0], [0.5, 2.0]], [[0.0, 3.0], [1.0, -1.0]]], gamma=0.9, horizon=4)
    cfg = TrainConfig(algo="nested_reinforce", outer_iters=15, inner_iters=2, batch_size=3, seed=4,
                      lr_leader="fixed:0.2", lr_follower="fixed:0.3", lr_baseline="fixed:0", init_scale=0.2)
    res = nested_reinforce_baseline(game, cfg)
    lead, foll = initial_policies(game, cfg)
    for t in range(cfg.outer_iters):
        rng = iteration_rng(cfg.seed, t)
        for _ in range(cfg.inner_iters):
            tb = rollout(game, lead, foll, rng, cfg.batch_size)
            foll.theta = foll.theta + 0.3 * reinforce_batch_grad(tb, foll, "follower")
            foll.project()
        tb = rollout(game, lead, foll, rng, cfg.batch_size)
        lead.theta = lead.theta - 0.2 * reinforce_batch_grad(tb, lead, "leader")
        lead.project()
    assert np.array_equal(res.follower.theta, foll.theta)
    assert np.array_equal(res.leader.theta, lead.theta)


def test_zero_discount_uses_only_the_first_reward():
    # step 0 pays nothing, step 1 depends on the follower: with gamma 0 nothing moves
    game = MatrixChain([[[0.0, 0.0]], [[1.0, 0.0]]], gamma=0.0, horizon=2)
    cfg = TrainConfig(algo="nested_reinforce", outer_iters=50, inner_iters=1, batch_size=4,
                      lr_follower="fixed:0.5", lr_leader="fixed:0.5", lr_baseline="fixed:0")
    lead, foll = softmax_pair(game)
    assert np.array_equal(nested_reinforce_baseline(game, cfg, lead, foll).follower.theta, foll.theta)
    moved = nested_reinforce_baseline(MatrixChain(game.payoffs, gamma=0.9, horizon=2), cfg, lead, foll)
    assert not np.array_equal(moved.follower.theta, foll.theta)
    # an immediate payoff still drives the first state's row only
    game2 = MatrixChain([[[1.0, 0.0]], [[0.0, 5.0]]], gamma=0.0, horizon=2)
    res = nested_reinforce_baseline(game2, cfg, lead, foll)
    theta = res.follower.theta.reshape(2, 2)
    assert theta[0, 0] > theta[1, 0]
    assert np.array_equal(theta[:, 1], [0.0, 0.0])


def test_zero_payoff_bandit_drift_small():
    game = MatrixBandit(np.zeros((2, 2)))
    cfg = TrainConfig(algo="sim_reinforce", outer_iters=1000, batch_size=8, lr_leader="fixed:0.01",
                      lr_follower="fixed:0.01", init_scale=0.0)
    lead, foll = softmax_pair(game)
    res = simultaneous_reinforce_baseline(game, cfg, lead, foll)
    assert np.linalg.norm(res.leader.theta - lead.theta) <= 0.1
    assert np.linalg.norm(res.follower.theta - foll.theta) <= 0.1


@pytest.mark.parametrize("algo", ["nested_pgda", "sim_pgda", "nested_reinforce", "sim_reinforce"])
def test_same_seed_same_run(algo):
    game = ReachAvoidGame() if algo.endswith("pgda") else ReachAvoidGame(reward_mode="gne_soft")
    cfg = TrainConfig(algo=algo, outer_iters=3, inner_iters=2, batch_size=4, seed=11,
                      lr_leader="fixed:0.001", lr_follower="fixed:0.001", init_scale=0.01,
                      policy="" if algo.endswith("pgda") else "mlp")
    a, b = train(game, cfg), train(game, cfg)
    assert np.array_equal(a.leader.theta, b.leader.theta)
    assert np.array_equal(a.follower.theta, b.follower.theta)
    assert [r.row(False) for r in a.records] == [r.row(False) for r in b.records]


def test_divergence_keeps_partial_records():
    game = MatrixBandit([[np.nan, 0.0]])
    cfg = TrainConfig(algo="sim_reinforce", outer_iters=10, batch_size=1, lr_follower="fixed:0.1")
    with pytest.raises(TrainingAborted) as err:
        with np.errstate(all="ignore"):
            train(game, cfg, *softmax_pair(game))
    assert err.value.partial is not None
    assert len(err.value.partial) < 10


# --- records and resume -------------------------------------------------------

def test_records_csv_roundtrip(tmp_path):
    g, lead, foll = one_step_pair()
    res = train(g, TrainConfig(algo="sim_pgda", outer_iters=5, batch_size=1), lead, foll)
    path = tmp_path / "metrics.csv"
    write_records(res.records, path)
    assert path.read_text().splitlines()[0] == ",".join(RECORD_COLUMNS)
    back = read_records(path)
    assert [r.iter for r in back] == list(range(5))
    assert all(r.sec == 0.0 for r in back)
    assert back[2].ret == pytest.approx(res.records[2].ret)


@pytest.mark.parametrize("algo", ["nested_pgda", "sim_reinforce"])
def test_resume_matches_uninterrupted(tmp_path, algo):
    game = ReachAvoidGame() if algo == "nested_pgda" else ReachAvoidGame(reward_mode="gne_soft")
    kw = dict(algo=algo, inner_iters=2, batch_size=4, seed=2, lr_leader="fixed:0.001",
              lr_follower="fixed:0.001", init_scale=0.01, policy="" if algo == "nested_pgda" else "mlp")
    full = train(game, TrainConfig(outer_iters=6, **kw))
    saved = []
    train(game, TrainConfig(outer_iters=6, checkpoint_every=3, **kw),
          checkpoint=lambda s: saved.append(s.iteration) or save_state(tmp_path / f"s{s.iteration}.json", s))
    assert saved == [3, 6]
    state, _ = load_state(tmp_path / "s3.json")
    assert state.iteration == 3
    resumed = train(game, TrainConfig(outer_iters=6, **kw), resume=state)
    assert np.array_equal(resumed.leader.theta, full.leader.theta)
    assert np.array_equal(resumed.follower.theta, full.follower.theta)
    assert [r.iter for r in resumed.records] == list(range(6))
    assert [r.row(False) for r in resumed.records] == [r.row(False) for r in full.records]
    assert resumed.follower_updates == full.follower_updates


def test_state_file_metadata_and_garbage(tmp_path):
    g, lead, foll = one_step_pair()
    seen = []
    train(g, TrainConfig(algo="sim_pgda", outer_iters=2, batch_size=1, checkpoint_every=1), lead, foll,
          checkpoint=seen.append)
    save_state(tmp_path / "s.json", seen[-1], {"note": "x"})
    state, meta = load_state(tmp_path / "s.json")
    assert meta == {"note": "x"} and state.iteration == 2
    (tmp_path / "bad.json").write_text("{not json")
    with pytest.raises(CheckpointError):
        load_state(tmp_path / "bad.json")
    with pytest.raises(CheckpointError):
        load_state(tmp_path / "missing.json")
