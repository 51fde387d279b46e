"""Compare the compiled and numpy kernel backends.

    python3 benchmarks/bench_kernels.py [--repeat N] [--csv PATH]

Times each hot kernel plus one model forward/backward at desk scale under
both backends and checks that the outputs agree.
"""

import argparse
import csv
import sys
import timeit

import numpy as np

from defxattn.core import Tape, Tensor, backward, kernels, tsum
from defxattn.network import ModelConfig, init_params, model_forward


def _cases(rng):
    x = rng.normal(size=(2, 16, 16, 16, 8))
    coords = rng.uniform(-1, 16, size=(2, 4096, 3))
    g = rng.normal(size=(2, 4096, 8))
    vol = rng.normal(size=(8, 18, 18, 18))
    cols = kernels.im2col3d(vol, 3, 1)
    cfg = ModelConfig()
    store = init_params(cfg, 0)
    for t in store.values():
        t.requires_grad = True
    m = Tensor(rng.normal(size=(1,) + cfg.image_size))
    f = Tensor(rng.normal(size=(1,) + cfg.image_size))

    def model_step():
        with Tape() as tape:
            u = model_forward(m, f, store, cfg)
            loss = tsum(u * u)
        backward(loss, tape)
        return u.data

    return {
        "trilinear_forward": lambda: kernels.trilinear_forward(x, coords),
        "trilinear_backward": lambda: kernels.trilinear_backward(x, coords, g)[0],
        "im2col3d": lambda: kernels.im2col3d(vol, 3, 1),
        "col2im3d": lambda: kernels.col2im3d(cols, vol.shape, 3, 1),
        "model_fwd_bwd_16^3": model_step,
    }


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=5)
    ap.add_argument("--csv", help="also write the results here")
    args = ap.parse_args(argv)

    backends = kernels.available_backends()
    if "cython" not in backends:
        print("compiled extension not built; only the numpy backend is available", file=sys.stderr)
    timings, outputs = {}, {}
    for name in backends:
        with kernels.use_backend(name):
            for case, fn in _cases(np.random.default_rng(0)).items():
                outputs[name, case] = fn()
                timings[name, case] = min(timeit.repeat(fn, number=1, repeat=args.repeat))

    rows = []
    for case in _cases(np.random.default_rng(0)):
        row = {"kernel": case}
        for name in backends:
            row[f"{name}_ms"] = 1e3 * timings[name, case]
        if len(backends) == 2:
            row["speedup"] = timings["python", case] / timings["cython", case]
            row["max_abs_diff"] = float(np.max(np.abs(outputs["python", case] - outputs["cython", case])))
        rows.append(row)

    cols = list(rows[0])
    print("  ".join(f"{c:>20}" for c in cols))
    for row in rows:
        print("  ".join(f"{row[c]:>20.4g}" if isinstance(row[c], float) else f"{row[c]:>20}" for c in cols))
    if args.csv:
        with open(args.csv, "w", newline="") as fh:
            w = csv.DictWriter(fh, cols, lineterminator="\n")
            w.writeheader()
            w.writerows(rows)


if __name__ == "__main__":
    main()
