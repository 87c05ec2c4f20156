"""Time the compiled and numpy im2col/col2im kernels, plus one desk forward/backward.

    python3 benchmarks/bench_kernels.py [--repeat 20]
"""
import argparse
import os
import subprocess
import sys
import timeit

import numpy as np

from hspace import kernels

SHAPES = [  # (N, C, H, W, k, stride, pad): the desk denoiser's conv geometries
    (32, 1, 32, 32, 3, 1, 1),
    (32, 32, 32, 32, 3, 1, 1),
    (32, 32, 32, 32, 3, 2, 1),
    (32, 64, 16, 16, 3, 1, 1),
    (32, 64, 8, 8, 3, 1, 1),
]


def bench_kernel(backend, shape, repeat):
    n, c, h, w, k, s, p = shape
    x = np.random.default_rng(0).standard_normal((n, c, h, w)).astype(np.float32)
    cols = kernels.im2col(x, k, k, s, p, backend=backend)
    t_fwd = min(timeit.repeat(lambda: kernels.im2col(x, k, k, s, p, backend=backend), number=1, repeat=repeat))
    t_bwd = min(timeit.repeat(lambda: kernels.col2im(cols, x.shape, k, k, s, p, backend=backend),
                              number=1, repeat=repeat))
    return t_fwd, t_bwd


def bench_step(repeat):
    """One training-loss gradient on a desk batch, timed in a child so the backend is fixed at import."""
    code = (
        "import timeit, numpy as np\n"
        "from hspace import autodiff as ad, denoiser as dn, diffusion as df, kernels\n"
        "p = dn.init_params(dn.DESK, seed=0)\n"
        "x = np.random.default_rng(0).uniform(-1, 1, (32, 1, 32, 32)).astype(np.float32)\n"
        "sch = df.linear_schedule(200)\n"
        "x_t, t, n = df.training_batch(x, sch, np.random.default_rng(1), 32)\n"
        "f = lambda: ad.grad_params(dn.loss_fn(p.config, x_t, t, n), p.arrays)\n"
        f"print(kernels.BACKEND, min(timeit.repeat(f, number=1, repeat={repeat})))\n"
    )
    out = {}
    for pure in ("0", "1"):
        env = dict(os.environ, HSPACE_PURE_PYTHON=pure)
        res = subprocess.run([sys.executable, "-c", code], env=env, capture_output=True, text=True, check=True)
        name, t = res.stdout.split()
        out[name] = float(t)
    return out


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=20)
    ap.add_argument("--no-step", action="store_true", help="skip the full training-step timing")
    args = ap.parse_args(argv)
    backends = ["python"] + (["cython"] if kernels.BACKEND == "cython" else [])
    print("shape,op," + ",".join(f"{b}_ms" for b in backends) + ",speedup")
    for shape in SHAPES:
        res = {b: bench_kernel(b, shape, args.repeat) for b in backends}
        for i, op in enumerate(("im2col", "col2im")):
            ms = [res[b][i] * 1e3 for b in backends]
            speed = f"{ms[0] / ms[-1]:.2f}" if len(ms) > 1 else "n/a"
            print("x".join(map(str, shape)) + f",{op}," + ",".join(f"{m:.3f}" for m in ms) + f",{speed}")
    if not args.no_step:
        step = bench_step(max(3, args.repeat // 5))
        print("desk loss+grad (s): " + ", ".join(f"{k}={v:.3f}" for k, v in sorted(step.items())))
    return 0


if __name__ == "__main__":
    sys.exit(main())
