"""Time the compiled kernels against the numpy fallback, plus one training step.

    python benchmarks/bench_kernels.py [--repeat 20]

Prints one line per kernel with the median time of each backend and the ratio.
The end-to-end step is timed in subprocesses so each picks its backend at import.
"""
import argparse
import os
import statistics
import subprocess
import sys
import time

import numpy as np

from trajmoe.core import kernels


def median_time(fn, repeat):
    fn()
    times = []
    for _ in range(repeat):
        t = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t)
    return statistics.median(times)


def cases(rng):
    x = rng.normal(size=64 * 24 * 128)
    cdf = kernels.load_backend("python").gelu_fwd(x)[1]
    ln_x = rng.normal(size=(4, 64 * 24, 64))
    gain, bias = rng.normal(size=(4, 64)), rng.normal(size=(4, 64))
    sm = rng.normal(size=(64 * 2 * 24, 24))
    sm[:, 12:] = -np.inf
    scores = rng.normal(size=(2000, 200))
    return {
        "gelu_fwd": lambda k: k.gelu_fwd(x),
        "gelu_bwd": lambda k: k.gelu_bwd(x, cdf, x),
        "layer_norm_fwd": lambda k: k.layer_norm_fwd(ln_x, gain, bias, 1e-5),
        "softmax_fwd": lambda k: k.softmax_fwd(sm),
        "topk_rows(k=5)": lambda k: k.topk_rows(scores, 5),
    }


STEP = """
import time, numpy as np
from trajmoe import synth, training, model
from trajmoe.config import TrainConfig
from trajmoe.features import pad_batch
ds = synth.generate(synth.GeneratorConfig(seed=0, cities=1, users=64), T=16)[0]
cfg = TrainConfig(T=16)
p = model.init_params(cfg.model, 0)
batch = pad_batch(ds.train[:64], ds.city, 16)
training.loss_and_grads(p, batch, ds.city, cfg)
t = time.perf_counter()
for _ in range({n}):
    training.loss_and_grads(p, batch, ds.city, cfg)
print((time.perf_counter() - t) / {n})
"""


def step_time(backend, n):
    env = dict(os.environ, TRAJMOE_BACKEND=backend)
    out = subprocess.run([sys.executable, "-c", STEP.format(n=n)], env=env, check=True,
                         capture_output=True, text=True)
    return float(out.stdout.strip())


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=20)
    args = ap.parse_args(argv)
    names = kernels.available_backends()
    if "ext" not in names:
        sys.exit("compiled extension not built; reinstall without TRAJMOE_NO_EXT")
    ext, py = kernels.load_backend("ext"), kernels.load_backend("python")
    print(f"{'kernel':<18}{'ext ms':>10}{'python ms':>12}{'python/ext':>12}")
    for name, fn in cases(np.random.default_rng(0)).items():
        te = median_time(lambda: fn(ext), args.repeat)
        tp = median_time(lambda: fn(py), args.repeat)
        print(f"{name:<18}{te * 1e3:>10.3f}{tp * 1e3:>12.3f}{tp / te:>12.2f}")
    te, tp = step_time("ext", 5), step_time("python", 5)
    print(f"{'train step (B=64)':<18}{te * 1e3:>10.1f}{tp * 1e3:>12.1f}{tp / te:>12.2f}")


if __name__ == "__main__":
    main()
