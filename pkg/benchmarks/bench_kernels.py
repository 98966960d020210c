"""Compare the numba kernels against the pure-numpy fallback.

Times the three convolution kernels and the dark-channel min filter on
training-sized inputs, plus one full train iteration per backend. Run:

    python3 benchmarks/bench_kernels.py [--repeats N]

The backend is chosen at import time, so each backend runs in a fresh
subprocess with FOGDA_KERNELS set.
"""

import argparse
import json
import os
import subprocess
import sys
import time

WORKLOADS = """
import json
import time

import numpy as np

from fogda.kernels import (KERNEL_BACKEND, conv2d_bwd_input,
                           conv2d_bwd_weight, conv2d_forward, min_filter)


def timeit(fn, repeats):
    fn()
    best = float("inf")
    for _ in range(repeats):
        t0 = time.perf_counter()
        fn()
        best = min(best, time.perf_counter() - t0)
    return best


def main(repeats):
    rng = np.random.default_rng(0)
    x_pad = rng.standard_normal((1, 32, 34, 34))
    weight = rng.standard_normal((64, 32, 3, 3))
    bias = rng.standard_normal(64)
    grad_y = rng.standard_normal((1, 64, 16, 16))
    dark = rng.random((64, 64))

    results = {"backend": KERNEL_BACKEND}
    results["conv2d_forward"] = timeit(
        lambda: conv2d_forward(x_pad, weight, bias, 2), repeats)
    results["conv2d_bwd_weight"] = timeit(
        lambda: conv2d_bwd_weight(x_pad, grad_y, 2, 3, 3), repeats)
    results["conv2d_bwd_input"] = timeit(
        lambda: conv2d_bwd_input(grad_y, weight, 2, 34, 34), repeats)
    results["min_filter"] = timeit(
        lambda: min_filter(dark, 15), repeats)

    from fogda.scenes import SceneSpec, render_scene
    from fogda.training import (TrainConfig, TrainState, prepare_target,
                                train_iteration)
    from fogda.models import ModelParams

    spec = SceneSpec()
    source = render_scene(spec, seed=0)
    config = TrainConfig(iterations=10, pl_warmup=0)
    target = prepare_target(render_scene(spec, seed=1), config)
    state = TrainState(
        params=ModelParams.init(seed=0, num_classes=spec.num_classes),
        ema=None)
    results["train_iteration"] = timeit(
        lambda: train_iteration(state, [source], [target], config), repeats)

    print(json.dumps(results))


main(__REPEATS__)
"""


def run_backend(backend: str, repeats: int) -> dict:
    env = dict(os.environ, FOGDA_KERNELS=backend)
    proc = subprocess.run(
        [sys.executable, "-c", WORKLOADS.replace("__REPEATS__", str(repeats))],
        env=env, capture_output=True, text=True, check=True)
    return json.loads(proc.stdout.strip().splitlines()[-1])


def main() -> int:
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--repeats", type=int, default=5,
                        help="timed repeats per workload (best-of)")
    args = parser.parse_args()

    print(f"timing {args.repeats} repeats per workload (best-of) ...")
    numpy_times = run_backend("numpy", args.repeats)
    try:
        numba_times = run_backend("numba", args.repeats)
    except subprocess.CalledProcessError as e:
        print("numba backend unavailable:")
        print(e.stderr)
        numba_times = None

    names = [k for k in numpy_times if k != "backend"]
    header = f"{'workload':22s} {'numpy':>12s} {'numba':>12s} {'speedup':>9s}"
    print(header)
    print("-" * len(header))
    for name in names:
        np_t = numpy_times[name]
        if numba_times is None:
            print(f"{name:22s} {np_t * 1e3:10.3f}ms {'n/a':>12s} {'n/a':>9s}")
            continue
        nb_t = numba_times[name]
        print(f"{name:22s} {np_t * 1e3:10.3f}ms {nb_t * 1e3:10.3f}ms "
              f"{np_t / nb_t:8.2f}x")
    return 0


if __name__ == "__main__":
    sys.exit(main())
