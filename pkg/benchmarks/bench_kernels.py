"""Compare the compiled and numpy loss kernels.

    python3 benchmarks/bench_kernels.py [--repeat 200]

Times each kernel at the reference training shapes (b = 16, so 32 views of
dimension P = 32 and 64 triplets of dimension F = 64), checks both backends
agree, then times one full training epoch with each backend.
"""

import argparse
import os
import subprocess
import sys
import timeit

import numpy as np

from osvda.kernels import _numpy_kernels

try:
    from osvda.kernels import _ckernels
except ImportError:
    _ckernels = None


def cases(rng):
    n, P, F = 32, 32, 64
    z = rng.standard_normal((n, P))
    y = np.tile(rng.integers(0, 6, size=n // 2), 2)
    pos = (y[:, None] == y[None, :]) * (1 - np.eye(n))
    den = 1 - np.eye(n)
    h, hp, hn = rng.standard_normal((3, 64, F))
    logits = rng.standard_normal((64, 7))
    labels = rng.integers(0, 7, size=64)
    return {
        "masked_contrastive": lambda k: k.masked_contrastive(z, z, pos, den, 0.1),
        "triplet": lambda k: k.triplet(h, hp, hn, 1.0),
        "softmax_xent": lambda k: k.softmax_xent(logits, labels),
    }


EPOCH_SNIPPET = """
import time
from osvda.data import SynthConfig, strip_labels, synth_dataset
from osvda.network import ModelDims
from osvda.trainer import TrainConfig, TrainState, train_stage1
import osvda.kernels as k
s, t = synth_dataset(SynthConfig())
cfg = TrainConfig(stage1_epochs=3, stage2_epochs=0)
st = TrainState.fresh(ModelDims(), 0)
t0 = time.perf_counter()
train_stage1(s, strip_labels(t), cfg, st)
print(k.BACKEND, (time.perf_counter() - t0) / 3)
"""


def epoch_time(pure):
    env = dict(os.environ, OSVDA_PURE_PYTHON="1" if pure else "0")
    out = subprocess.run([sys.executable, "-c", EPOCH_SNIPPET], env=env, capture_output=True, text=True, check=True)
    backend, seconds = out.stdout.split()
    return backend, float(seconds)


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--repeat", type=int, default=200)
    args = ap.parse_args()
    if _ckernels is None:
        print("compiled kernels not built; only the numpy backend is available")
    rng = np.random.default_rng(0)
    print(f"{'kernel':<20}{'numpy us':>12}{'cython us':>12}{'speedup':>10}{'max diff':>12}")
    for name, fn in cases(rng).items():
        t_np = min(timeit.repeat(lambda: fn(_numpy_kernels), number=args.repeat, repeat=3)) / args.repeat
        if _ckernels is None:
            print(f"{name:<20}{t_np * 1e6:>12.1f}")
            continue
        t_c = min(timeit.repeat(lambda: fn(_ckernels), number=args.repeat, repeat=3)) / args.repeat
        diff = max(float(np.max(np.abs(np.asarray(a) - np.asarray(b)))) for a, b in zip(fn(_numpy_kernels), fn(_ckernels)))
        print(f"{name:<20}{t_np * 1e6:>12.1f}{t_c * 1e6:>12.1f}{t_np / t_c:>10.2f}{diff:>12.1e}")
    print()
    for pure in (True, False):
        backend, seconds = epoch_time(pure)
        print(f"stage-1 epoch, {backend:<7} backend: {seconds * 1e3:.0f} ms")


if __name__ == "__main__":
    main()
