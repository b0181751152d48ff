"""Compare the numba kernels with their numpy fallbacks.

    python benchmarks/bench_kernels.py [--repeat 20]

Kernel timings run in-process (both paths are importable). The end-to-end
SFT step is timed in two subprocesses, one with FLOWSR_DISABLE_NUMBA=1,
because the model binds its kernels at import.
"""

import argparse
import os
import subprocess
import sys
import timeit

import numpy as np

from flowsr import _kernels as K

STEP_SNIPPET = """
import time, numpy as np
from flowsr.data import build_dataset
from flowsr.flow import sft_step
from flowsr.model import Architecture, VelocityModel
from flowsr.optim import Adam
from flowsr._kernels import backend
ds = build_dataset(16)
m = VelocityModel.init(Architecture(), np.random.default_rng(0))
opt, up = Adam(1e-3), ds.lr_up()
sft_step(m, ds.hr, up, ds.prompt_ids, np.random.default_rng(0), opt)
t = time.perf_counter()
for i in range({n}):
    sft_step(m, ds.hr, up, ds.prompt_ids, np.random.default_rng(i), opt)
print(backend(), (time.perf_counter() - t) / {n} * 1e3)
"""


def bench(fn, *args, repeat):
    fn(*args)  # compile / warm caches
    return min(timeit.repeat(lambda: fn(*args), number=1, repeat=repeat)) * 1e3


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--repeat", type=int, default=20)
    ap.add_argument("--steps", type=int, default=10)
    a = ap.parse_args()
    if not K.HAVE_NUMBA:
        sys.exit("numba unavailable (or disabled); nothing to compare")
    rng = np.random.default_rng(0)
    h = rng.standard_normal((16, 16, 16, 64)).astype(np.float32)
    cols = rng.standard_normal((16, 16, 16, 9 * 64)).astype(np.float32)
    img = rng.random((64, 64))
    rows = [
        ("im2col3x3 16x16x16x64", K.im2col3x3_numpy, K.im2col3x3_numba, (h,)),
        ("col2im3x3 16x16x16x576", K.col2im3x3_numpy, K.col2im3x3_numba, (cols, 64)),
        ("box_mean_valid 64x64 w7", K.box_mean_valid_numpy, K.box_mean_valid_numba, (img, 7)),
    ]
    print(f"{'kernel':28s} {'numpy ms':>10s} {'numba ms':>10s} {'speedup':>8s}")
    for name, f_np, f_nb, args in rows:
        t_np, t_nb = bench(f_np, *args, repeat=a.repeat), bench(f_nb, *args, repeat=a.repeat)
        print(f"{name:28s} {t_np:10.3f} {t_nb:10.3f} {t_np / t_nb:8.2f}")
    for flag in ("0", "1"):
        env = dict(os.environ, FLOWSR_DISABLE_NUMBA=flag)
        out = subprocess.run([sys.executable, "-c", STEP_SNIPPET.format(n=a.steps)], env=env,
                             capture_output=True, text=True, check=True).stdout.split()
        print(f"{'sft_step batch16 (' + out[0] + ')':28s} {float(out[1]):10.1f} ms/step")


if __name__ == "__main__":
    main()
