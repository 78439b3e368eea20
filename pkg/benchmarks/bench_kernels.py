"""Compare the numba and numpy kernel backends.

Times each kernel in isolation, then one full training step (batch of 100
generated molecules) under each backend in a fresh subprocess, since the
backend is fixed at import.

    python3 benchmarks/bench_kernels.py [--repeat 20]
"""

import argparse
import json
import os
import subprocess
import sys
import timeit

import numpy as np

from molgraph_uq import kernels as K

STEP_SCRIPT = r"""
import json, time
import numpy as np
from molgraph_uq import datagen as D, kernels, model as M, tensor as T, train as TR, uq

rng = np.random.default_rng(0)
smiles = D.generate_molecules(100, rng, 24)
labels = [r.label for r in D.make_records(smiles)]
batch = M.GraphBatch.from_compact(TR.compact_graphs(smiles))
params = M.init_params("regression", np.random.default_rng(1))
tensors = params.tensors()
state = TR.AdamState.zeros_like(tensors)
drop = np.random.default_rng(2)

def step():
    with T.Tape() as tape:
        out = M.forward(batch, params, "stochastic", drop)
        loss = T.add(uq.data_loss(params, out, labels), uq.variational_regularizer(params, 1800))
    grads = T.backward(loss, tape, params=tensors)
    TR.adam_step(tensors, [grads[t] for t in tensors], state, 1e-4)

step()  # warm-up (numba compilation / cache load)
times = []
for _ in range({repeat}):
    t0 = time.perf_counter()
    step()
    times.append(time.perf_counter() - t0)
print(json.dumps({{"backend": kernels.BACKEND, "median_s": float(np.median(times))}}))
"""


def kernel_times(repeat):
    rng = np.random.default_rng(0)
    scores = rng.normal(size=(100, 24, 24))
    adj = (rng.random((100, 24, 24)) < 0.15).astype(float)
    alpha = K.masked_tanh_numpy(scores, adj)
    grad = rng.normal(size=scores.shape)
    p, g = rng.normal(size=(256, 256)), rng.normal(size=(256, 256))

    cases = {
        "masked_tanh": (lambda: K.masked_tanh_numpy(scores, adj), lambda: K.masked_tanh_numba(scores, adj)),
        "masked_tanh_backward": (
            lambda: K.masked_tanh_backward_numpy(grad, alpha, adj),
            lambda: K.masked_tanh_backward_numba(grad, alpha, adj),
        ),
        "adam_update": (
            lambda: K.adam_update_numpy(p, g, np.zeros_like(p), np.zeros_like(p), 1e-3, 0.9, 0.999, 1e-8, 1),
            lambda: K.adam_update_numba(p, g, np.zeros_like(p), np.zeros_like(p), 1e-3, 0.9, 0.999, 1e-8, 1),
        ),
    }
    rows = []
    for name, (np_fn, nb_fn) in cases.items():
        nb_fn()  # compile
        t_np = min(timeit.repeat(np_fn, number=10, repeat=repeat)) / 10
        t_nb = min(timeit.repeat(nb_fn, number=10, repeat=repeat)) / 10
        rows.append((name, t_np, t_nb))
    return rows


def step_time(backend, repeat):
    env = dict(os.environ, MOLGRAPH_UQ_NUMBA="1" if backend == "numba" else "0")
    out = subprocess.run(
        [sys.executable, "-c", STEP_SCRIPT.format(repeat=repeat)], env=env, capture_output=True, text=True, check=True
    )
    return json.loads(out.stdout.strip().splitlines()[-1])["median_s"]


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=20)
    args = ap.parse_args()
    if not K.HAVE_NUMBA:
        sys.exit("numba is not installed; nothing to compare")

    print(f"{'kernel':<24}{'numpy (us)':>12}{'numba (us)':>12}{'speedup':>9}")
    for name, t_np, t_nb in kernel_times(args.repeat):
        print(f"{name:<24}{t_np * 1e6:>12.1f}{t_nb * 1e6:>12.1f}{t_np / t_nb:>9.2f}")

    steps = {b: step_time(b, max(3, args.repeat // 4)) for b in ("numpy", "numba")}
    print(f"\nfull training step, batch 100 (median of runs)")
    for b, t in steps.items():
        print(f"  {b:<6} {t * 1e3:8.1f} ms")
    print(f"  speedup {steps['numpy'] / steps['numba']:.2f}x")


if __name__ == "__main__":
    main()
