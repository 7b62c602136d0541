"""Compare the numba and numpy kernel backends on architecture-shaped work.

Run from a checkout:

    python3 benchmarks/bench_kernels.py [--repeats 5] [--batch 8]

Times the three convolution kernels and the pooling pair on real layer
geometry, then a full forward+backward training step.  The first numba
call per kernel compiles (cached under ~/.numba or the package dir), so
a warmup pass runs before timing.
"""

import argparse
import time

import numpy as np

from lanedetect import backend
from lanedetect import losses
from lanedetect import model as model_mod
from lanedetect import optim
from lanedetect.rng import derive_rng
from lanedetect.tensor import Tensor

# (name, in_ch, out_ch, h, w): encoder stages of the 118x328 net
CONV_SHAPES = [
    ("conv1  3->32  120x328", 3, 32, 120, 328),
    ("conv3 64->64   60x164", 64, 64, 60, 164),
    ("conv5 128->128 30x82", 128, 128, 30, 82),
    ("conv7 256->256 15x41", 256, 256, 15, 41),
]


def _time(fn, repeats):
    best = float("inf")
    for _ in range(repeats):
        t0 = time.perf_counter()
        fn()
        best = min(best, time.perf_counter() - t0)
    return best


def bench_kernels(batch, repeats):
    rng = np.random.default_rng(0)
    rows = []
    for label, cin, cout, h, w in CONV_SHAPES:
        x = rng.random((batch, cin, h, w), np.float32)
        wgt = rng.random((cout, cin, 3, 3), np.float32) - 0.5
        b = np.zeros(cout, np.float32)
        g = rng.random((batch, cout, h, w), np.float32)
        for name in ("numba", "numpy"):
            backend.select(name)
            impl = backend.impl()
            fwd = _time(lambda: impl.conv2d_forward(x, wgt, b, 1, 1, 1), repeats)
            dx = _time(lambda: impl.conv2d_input_grad(g, wgt, 1, 1, 1, h, w), repeats)
            dw = _time(lambda: impl.conv2d_weight_grad(x, g, 1, 1, 1, 3, 3), repeats)
            rows.append((label, name, fwd, dx, dw))
    px = rng.random((batch, 64, 60, 164), np.float32)
    for name in ("numba", "numpy"):
        backend.select(name)
        impl = backend.impl()
        _, codes = impl.maxpool2x2_forward(px)
        pg = rng.random((batch, 64, 30, 82), np.float32)
        pf = _time(lambda: impl.maxpool2x2_forward(px), repeats)
        pb = _time(lambda: impl.maxpool2x2_backward(codes, pg), repeats)
        rows.append(("pool  64  60x164", name, pf, pb, float("nan")))
    return rows


def bench_step(batch, repeats):
    """One full training step (forward, dice, backward, adam) per backend."""
    rng = np.random.default_rng(1)
    x = Tensor(rng.random((batch, 3, 118, 328)).astype(np.float32), copy=False, check=False)
    y = Tensor((rng.random((batch, 1, 118, 328)) < 0.1).astype(np.float32), copy=False, check=False)
    out = []
    for name in ("numba", "numpy"):
        backend.select(name)
        graph, params = model_mod.build_model(0)
        state = optim.AdamState.init(params, lr=1e-3)

        def step():
            yh, tape = model_mod.forward(graph, params, x, training=True,
                                         rng=derive_rng(0, 3, 0))
            lv = losses.dice_loss(y, yh)
            grads, _ = model_mod.backward(graph, tape, lv.d_pred)
            optim.adam_step(params, grads, state)

        step()   # warmup / compile
        out.append((name, _time(step, repeats)))
    return out


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--repeats", type=int, default=5)
    ap.add_argument("--batch", type=int, default=8)
    ap.add_argument("--skip-step", action="store_true",
                    help="only kernel microbenchmarks")
    args = ap.parse_args()

    print(f"batch={args.batch} repeats={args.repeats} (best-of)")
    print(f"{'shape':24s} {'backend':7s} {'fwd':>9s} {'d_input':>9s} {'d_weight':>9s}")
    for label, name, a, b, c in bench_kernels(args.batch, args.repeats):
        cs = f"{c*1e3:8.1f}ms" if c == c else "        -"
        print(f"{label:24s} {name:7s} {a*1e3:8.1f}ms {b*1e3:8.1f}ms {cs}")

    if not args.skip_step:
        print()
        for name, t in bench_step(args.batch, args.repeats):
            print(f"full train step ({name}): {t:.2f}s")
    backend.select("auto")


if __name__ == "__main__":
    main()
