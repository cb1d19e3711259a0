"""Compare the compiled and numpy simulator kernels on batched 30 Hz control steps.

    python3 benchmarks/bench_sim.py [--envs 8 64] [--steps 200]
"""

import argparse
import time

import numpy as np

from vqloco import motion as mo
from vqloco import sim


def bench(kernel, n_env, steps, clip):
    cfg = sim.SimConfig(kernel=kernel)
    rand = sim.EnvRandomization.nominal(n_env)
    state = sim.RobotState.stack([clip.states[0]] * n_env)
    targets = clip.states.joint_q
    t0 = time.perf_counter()
    for k in range(steps):
        action = np.broadcast_to(targets[(k + 1) % len(clip)], (n_env, targets.shape[1]))
        state = sim.step(state, action, rand, cfg)
    dt = time.perf_counter() - t0
    return dt, state


def main():
    p = argparse.ArgumentParser(description=__doc__)
    p.add_argument("--envs", type=int, nargs="+", default=[1, 8, 64])
    p.add_argument("--steps", type=int, default=200)
    args = p.parse_args()
    clip = mo.loop_clip(mo.synth_clip(), 4)
    kernels = [k for k in ("numpy", "compiled") if k in sim.KERNELS]
    if "compiled" not in kernels:
        print("compiled kernel not built; only the numpy kernel is timed")
    print(f"{'envs':>5} {'kernel':>9} {'steps/s':>10} {'env-steps/s':>12} {'speedup':>8}")
    for n in args.envs:
        base = None
        finals = {}
        for k in kernels:
            dt, final = bench(k, n, args.steps, clip)
            finals[k] = final
            rate = args.steps / dt
            base = base or rate
            print(f"{n:>5} {k:>9} {rate:>10.1f} {rate * n:>12.1f} {rate / base:>7.2f}x")
        if len(finals) == 2:
            gap = np.max(np.abs(finals["numpy"].joint_q - finals["compiled"].joint_q))
            print(f"{'':>5} max |q_numpy - q_compiled| after {args.steps} steps: {gap:.2e}")


if __name__ == "__main__":
    main()
