"""Compare the numba and numpy code paths on the hot kernels and one CDL run.

Each backend runs in its own subprocess so that ``CROWDPSF_NO_NUMBA`` is
read at import time, exactly as it would be for a user. numba timings
exclude the first (compiling) call.

    python3 benchmarks/bench_backends.py [--size 128] [--repeat 3]
"""

import argparse
import json
import os
import subprocess
import sys

WORKER = r"""
import json, sys, time
import numpy as np
from crowdpsf import _accel, cdl, kernels, metric, starfield

size, repeat = int(sys.argv[1]), int(sys.argv[2])

def best(fn):
    fn()  # warm-up (numba compilation)
    times = []
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t0)
    return min(times)

spec = starfield.SceneSpec(width=size, height=size, density=10, seed=0)
img, truth = starfield.render_scene(spec, "narrow")
rng = np.random.default_rng(0)
nk, n = 25, size * size
x, v, u = rng.normal(size=(3, nk, n))
Df = np.fft.rfft2(rng.normal(size=(nk, size, size)))
Sf = np.fft.rfft2(rng.normal(size=(size, size)))
Uf = np.fft.rfft2(rng.normal(size=(nk, size, size)))
params = cdl.params_for("narrow", 10, n_iter0=2, n_iter=10)
h = truth.psf.sampled(11)

res = {
    "backend": _accel.backend(),
    "render_scene": best(lambda: starfield.render_scene(spec, "narrow")),
    "admm_xstep": best(lambda: kernels.admm_xstep(Df, Sf, 1.0, Uf, Uf)),
    "admm_prox_dual": best(lambda: kernels.admm_prox_dual(x, v, u, 0.01)),
    "metric_evaluate": best(lambda: metric.evaluate(truth.psf, h, n_r=20)),
    "run_cdl_10_iter": best(lambda: cdl.run_cdl(img, params)),
}
print(json.dumps(res))
"""


def run_backend(no_numba, size, repeat):
    env = dict(os.environ)
    if no_numba:
        env["CROWDPSF_NO_NUMBA"] = "1"
    else:
        env.pop("CROWDPSF_NO_NUMBA", None)
    out = subprocess.run([sys.executable, "-c", WORKER, str(size), str(repeat)],
                         env=env, capture_output=True, text=True, check=True)
    return json.loads(out.stdout.strip().splitlines()[-1])


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--size", type=int, default=128, help="tile side length (px)")
    ap.add_argument("--repeat", type=int, default=3, help="timed repetitions (best is reported)")
    args = ap.parse_args(argv)

    nb = run_backend(False, args.size, args.repeat)
    npy = run_backend(True, args.size, args.repeat)
    if nb["backend"] != "numba":
        print("numba is not available; both columns use numpy")
    print(f"{'kernel':<18}{'numba (s)':>12}{'numpy (s)':>12}{'speed-up':>10}")
    for key in nb:
        if key == "backend":
            continue
        print(f"{key:<18}{nb[key]:>12.4f}{npy[key]:>12.4f}{npy[key] / nb[key]:>9.1f}x")


if __name__ == "__main__":
    main()
