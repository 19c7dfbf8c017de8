#!/usr/bin/env python3
"""Benchmark the numba and numpy pair-volume kernels against each other.

Usage: python benchmarks/bench_volume_kernels.py [--repeats N]

Times the forward volume matrix and the backward coefficient stack for the
batch sizes a training run actually sees, prints a table plus the numba
speedup, and verifies both backends agree to 1e-12 on every measured input.
"""

import argparse
import time

import numpy as np

from gramalign import kernels


def make_inputs(rng, batch, dim, n_others):
    anchor = rng.standard_normal((batch, dim))
    anchor /= np.linalg.norm(anchor, axis=1, keepdims=True)
    others = [rng.standard_normal((batch, dim)) for _ in range(n_others)]
    others = [o / np.linalg.norm(o, axis=1, keepdims=True) for o in others]
    anchor_sq = np.einsum("bd,bd->b", anchor, anchor)
    cross = np.stack([o @ anchor.T for o in others])
    stack = np.stack(others)
    self_gram = np.einsum("ubd,vbd->buv", stack, stack)
    return anchor_sq, cross, self_gram


def best_of(fn, repeats):
    best = float("inf")
    for _ in range(repeats):
        t0 = time.perf_counter()
        fn()
        best = min(best, time.perf_counter() - t0)
    return best


def main():
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--repeats", type=int, default=5)
    args = parser.parse_args()

    if not kernels.HAS_NUMBA:
        print("numba not importable; nothing to compare")
        return

    rng = np.random.default_rng(0)
    eps = 1e-10
    print(f"{'case':>18} {'numpy fwd':>11} {'numba fwd':>11} {'x':>6}"
          f" {'numpy bwd':>11} {'numba bwd':>11} {'x':>6}")
    for batch in (32, 64, 128, 256):
        for n_others in (2, 3):
            anchor_sq, cross, self_gram = make_inputs(rng, batch, 512, n_others)
            w = rng.standard_normal((batch, batch))

            v_np = kernels.pair_volumes_numpy(anchor_sq, cross, self_gram, eps)
            v_nb = kernels.pair_volumes_numba(anchor_sq, cross, self_gram, eps)
            c_np = kernels.pair_volume_coeffs_numpy(anchor_sq, cross, self_gram, eps, w)
            c_nb = kernels.pair_volume_coeffs_numba(anchor_sq, cross, self_gram, eps, w)
            assert np.abs(v_np - v_nb).max() < 1e-12, "forward backends disagree"
            assert np.abs(c_np - c_nb).max() < 1e-12, "backward backends disagree"

            f_np = best_of(
                lambda: kernels.pair_volumes_numpy(anchor_sq, cross, self_gram, eps),
                args.repeats,
            )
            f_nb = best_of(
                lambda: kernels.pair_volumes_numba(anchor_sq, cross, self_gram, eps),
                args.repeats,
            )
            b_np = best_of(
                lambda: kernels.pair_volume_coeffs_numpy(anchor_sq, cross, self_gram, eps, w),
                args.repeats,
            )
            b_nb = best_of(
                lambda: kernels.pair_volume_coeffs_numba(anchor_sq, cross, self_gram, eps, w),
                args.repeats,
            )
            case = f"B={batch} k={n_others + 1}"
            print(
                f"{case:>18} {1e3 * f_np:>9.2f}ms {1e3 * f_nb:>9.2f}ms {f_np / f_nb:>5.1f}x"
                f" {1e3 * b_np:>9.2f}ms {1e3 * b_nb:>9.2f}ms {b_np / b_nb:>5.1f}x"
            )
    print("\nbackends agree to 1e-12 on every case above")


if __name__ == "__main__":
    main()
