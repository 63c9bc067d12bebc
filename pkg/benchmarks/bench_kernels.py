"""Time the compiled kernels against the numpy fallback.

    python benchmarks/bench_kernels.py [--repeat N]

Also times a full ACGAN client step with each backend, since the kernels are
only part of the step cost.
"""
from __future__ import annotations

import argparse
import os
import subprocess
import sys
import timeit

import numpy as np

from fedcil.autodiff import _kernels_py

try:
    from fedcil.autodiff import _kernels as _compiled
except ImportError:  # extension not built
    _compiled = None


def kernel_cases(rng):
    x = rng.standard_normal((256, 64))
    g = rng.standard_normal((256, 64))
    logits = rng.standard_normal((256, 10))
    p = rng.standard_normal(64 * 64)
    grad = rng.standard_normal(64 * 64)
    state = (np.zeros_like(p), np.zeros_like(p))
    return {
        "leaky_relu_forward": lambda k: k.leaky_relu_forward(x, 0.2),
        "leaky_relu_backward": lambda k: k.leaky_relu_backward(x, g, 0.2),
        "softmax_rows": lambda k: k.softmax_rows(logits),
        "adam_update": lambda k: k.adam_update(p, grad, state[0], state[1], 1e-4, 0.5, 0.999,
                                               1e-8, 0.5, 0.001),
    }


STEP_SNIPPET = """
import time
import numpy as np
from fedcil.data import ClientData, build_task_streams, make_synthetic_mixture
from fedcil.models import Arch
from fedcil.trainers import AcganClient, LocalConfig
from fedcil.autodiff import BACKEND
ds = make_synthetic_mixture(10, 200, 4, 0)
s = build_task_streams(ds, 1, 2, 5, 0)[0]
c = AcganClient(ClientData(s), Arch(4), LocalConfig(lr=1e-4), 0)
from fedcil.models import AcganModel
c.receive(AcganModel(Arch(4), (), 0).snapshot(), False)
c.train(20)
t = time.perf_counter(); c.train({n}); dt = time.perf_counter() - t
print(BACKEND, dt / {n})
"""


def step_time(pure: bool, n: int) -> tuple[str, float]:
    env = dict(os.environ)
    if pure:
        env["FEDCIL_PURE_PYTHON"] = "1"
    else:
        env.pop("FEDCIL_PURE_PYTHON", None)
    out = subprocess.run([sys.executable, "-c", STEP_SNIPPET.format(n=n)], env=env,
                         capture_output=True, text=True, check=True).stdout.split()
    return out[0], float(out[1])


def main() -> None:
    ap = argparse.ArgumentParser()
    ap.add_argument("--repeat", type=int, default=2000)
    ap.add_argument("--steps", type=int, default=200)
    args = ap.parse_args()
    rng = np.random.default_rng(0)
    cases = kernel_cases(rng)
    print(f"{'kernel':<22}{'numpy us':>12}{'cython us':>12}{'speedup':>10}")
    for name, fn in cases.items():
        t_py = min(timeit.repeat(lambda: fn(_kernels_py), number=args.repeat, repeat=3))
        t_py = t_py / args.repeat * 1e6
        if _compiled is None:
            print(f"{name:<22}{t_py:>12.2f}{'n/a':>12}{'':>10}")
            continue
        t_c = min(timeit.repeat(lambda: fn(_compiled), number=args.repeat, repeat=3))
        t_c = t_c / args.repeat * 1e6
        print(f"{name:<22}{t_py:>12.2f}{t_c:>12.2f}{t_py / t_c:>10.2f}")
    for pure in (True, False):
        backend, dt = step_time(pure, args.steps)
        print(f"ACGAN client step [{backend}]: {dt * 1e3:.3f} ms")


if __name__ == "__main__":
    main()
