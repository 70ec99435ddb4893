"""Time the numba and numpy variants of the simulator kernels.

    python3 benchmarks/bench_kernels.py [--vehicles 24] [--repeat 2000]

Also times whole episodes with each backend selected through the env flag
(each in a fresh interpreter, since the flag is read at import).
"""

import argparse
import os
import subprocess
import sys
import timeit

import numpy as np

from lanerec import _kernels as K
from lanerec._accel import HAVE_NUMBA


def random_world(n, rng):
    s = rng.uniform(0, 300, n)
    v = rng.uniform(0, 15, n)
    occ = rng.integers(1, 5, n).astype(np.int64)
    v_des = np.full(n, 55 / 3.6)
    active = np.ones(n, dtype=np.bool_)
    turn = (occ >= 3)
    return s, v, occ, v_des, active, turn


def bench_kernels(n, repeat):
    rng = np.random.default_rng(0)
    s, v, occ, v_des, active, turn = random_world(n, rng)
    idm = (2.0, 3.0, 2.0, 1.5, 9.0, 4.5, 0.1)
    cases = {
        "leaders": lambda f: f(s, occ, active),
        "neighbors": lambda f: f(s, occ, active, 0, 4),
        "first_overlap": lambda f: f(s, occ, active, 4.5),
        "step": lambda f: f(s.copy(), v.copy(), occ, v_des, active, turn, 220.0, 3.0, *idm),
    }
    print(f"{'kernel':<15}{'numba us':>12}{'numpy us':>12}{'ratio':>8}")
    for name, call in cases.items():
        loop, vec = getattr(K, f"{name}_loop"), getattr(K, f"{name}_numpy")
        call(loop)  # compile
        t_loop = timeit.timeit(lambda: call(loop), number=repeat) / repeat * 1e6
        t_vec = timeit.timeit(lambda: call(vec), number=repeat) / repeat * 1e6
        print(f"{name:<15}{t_loop:>12.2f}{t_vec:>12.2f}{t_vec / t_loop:>8.2f}")


EPISODES = """
import time
from lanerec import LaneChangeEnv, EnvConfig, Action, USE_NUMBA
env = LaneChangeEnv(EnvConfig())
env.reset(0); env.step(Action.K)
t0 = time.perf_counter()
for seed in range({n}):
    env.reset(seed)
    while not env.step(Action.K).done:
        pass
print(USE_NUMBA, (time.perf_counter() - t0) / {n} * 1e3)
"""


def bench_episodes(n):
    for flag in ("0", "1"):
        env = dict(os.environ, LANEREC_DISABLE_NUMBA=flag)
        out = subprocess.run([sys.executable, "-c", EPISODES.format(n=n)], env=env,
                             capture_output=True, text=True, check=True).stdout.split()
        label = "numba" if out[0] == "True" else "numpy"
        print(f"episode ({label}): {float(out[1]):.1f} ms")


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--vehicles", type=int, default=24)
    ap.add_argument("--repeat", type=int, default=2000)
    ap.add_argument("--episodes", type=int, default=20)
    args = ap.parse_args()
    if not HAVE_NUMBA:
        print("numba not installed; loop variants run as plain python")
    bench_kernels(args.vehicles, args.repeat)
    bench_episodes(args.episodes)


if __name__ == "__main__":
    main()
