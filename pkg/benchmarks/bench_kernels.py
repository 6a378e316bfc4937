"""Time the compiled kernels against their pure-Python twins.

    python benchmarks/bench_kernels.py [--repeat 3] [--scale 1.0]

Each workload runs once per backend with identical seeds; the script checks
the two backends agree before reporting timings.
"""
import argparse
import time

import numpy as np

from stackgame import _backend, minmax, reachavoid
from stackgame.mdpgame import PolicyParams, det_pg_grad, rollout
from stackgame.minmax import SolverConfig, benchmark_quadratic, nested_sgda
from stackgame.reachavoid import ReachAvoidGame


def use(backend):
    minmax.kernels = backend
    reachavoid.kernels = backend


def quadratic_run(scale):
    log = nested_sgda(benchmark_quadratic(noise_std=0.05),
                      SolverConfig(outer_iters=int(1000 * scale), inner_iters=200, seed=0))
    return np.concatenate([log.x.ravel(), log.y.ravel()])


def pathwise_batch(scale):
    game = ReachAvoidGame()
    th = np.random.default_rng(0).normal(scale=0.1, size=26)
    est = det_pg_grad(game, PolicyParams("bilinear", 13, game.leader_space, theta=th[:13]),
                      PolicyParams("bilinear", 13, game.follower_space, theta=th[13:]),
                      int(256 * scale), np.random.default_rng(1))
    return np.concatenate([est.grad_x, est.grad_y])


def softmax_rollouts(scale):
    game = ReachAvoidGame()
    rng = np.random.default_rng(0)
    lead = PolicyParams.init("mlp", game.obs_dim, game.leader_space, rng, 0.5)
    foll = PolicyParams.init("mlp", game.obs_dim, game.follower_space, rng, 0.5)
    tb = rollout(game, lead, foll, np.random.default_rng(1), int(2000 * scale))
    return tb.rewards.ravel()


WORKLOADS = {"quadratic nested SGDA": quadratic_run,
             "reach-avoid pathwise batch": pathwise_batch,
             "reach-avoid softmax rollouts": softmax_rollouts}


def best_time(fn, scale, repeat):
    best, out = float("inf"), None
    for _ in range(repeat):
        t = time.perf_counter()
        out = fn(scale)
        best = min(best, time.perf_counter() - t)
    return best, out


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=3)
    ap.add_argument("--scale", type=float, default=1.0, help="multiplies every workload size")
    args = ap.parse_args()
    if _backend.compiled_kernels is None:
        raise SystemExit("compiled kernels unavailable (build with pip install -e . or unset STACKGAME_PURE)")
    print(f"{'workload':30s} {'compiled s':>11s} {'python s':>10s} {'speedup':>8s}")
    for name, fn in WORKLOADS.items():
        use(_backend.compiled_kernels)
        fast, a = best_time(fn, args.scale, args.repeat)
        use(_backend.python_kernels)
        slow, b = best_time(fn, args.scale, args.repeat)
        if not np.allclose(a, b, rtol=0, atol=1e-9):
            raise SystemExit(f"{name}: backends disagree")
        print(f"{name:30s} {fast:11.3f} {slow:10.3f} {slow / fast:7.1f}x")
    use(_backend.kernels)


if __name__ == "__main__":
    main()
