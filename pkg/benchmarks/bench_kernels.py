"""Time the compiled and numpy loss/gradient kernels on one training batch.

    python3 benchmarks/bench_kernels.py [--batch 64] [--horizon 100] [--repeat 5]

Also checks that both backends agree on the batch loss and gradient.
"""
from __future__ import annotations

import argparse
import time

import numpy as np

from ncgmm import kernels, plant, policy, scenarios
from ncgmm.closedloop import LossWeights, fast_batch_loss


def _time(fn, repeat):
    fn()  # warm up
    best = float("inf")
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn()
        best = min(best, time.perf_counter() - t0)
    return best


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--batch", type=int, default=64)
    ap.add_argument("--horizon", type=int, default=100)
    ap.add_argument("--repeat", type=int, default=5)
    ap.add_argument("--threads", type=int, default=1)
    args = ap.parse_args(argv)

    model = plant.default_model()
    cfg = scenarios.ScenarioConfig(n_train=args.batch, n_dev=1, horizon=args.horizon)
    train_set, _ = scenarios.generate(cfg, seed=0)
    pol = policy.init_policy(0, 4)
    w = LossWeights()

    results = {}
    print(f"batch={args.batch} horizon={args.horizon} params={pol.n_params} threads={args.threads}")
    print(f"{'backend':<10} {'loss+grad ms':>13} {'loss only ms':>13}")
    for name in kernels.available_backends():
        def with_grad(name=name):
            return fast_batch_loss(model, pol, train_set.arrays, w, threads=args.threads, backend=name)

        def no_grad(name=name):
            return fast_batch_loss(model, pol, train_set.arrays, w, want_grad=False,
                                   threads=args.threads, backend=name)

        tg = _time(with_grad, args.repeat)
        tn = _time(no_grad, args.repeat)
        results[name] = (tg, with_grad())
        print(f"{name:<10} {1e3 * tg:13.2f} {1e3 * tn:13.2f}")

    if len(results) == 2:
        (tc, rc), (tp, rp) = results["compiled"], results["python"]
        dl = abs(rc.loss - rp.loss)
        dg = float(np.max(np.abs(rc.grad - rp.grad)))
        print(f"speedup compiled/python: {tp / tc:.1f}x")
        print(f"max |loss diff| = {dl:.3g}, max |grad diff| = {dg:.3g}")
    else:
        print("compiled backend not built; only the numpy fallback was timed")


if __name__ == "__main__":
    main()
