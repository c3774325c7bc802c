"""Compare the compiled kernels with the pure-Python fallback.

    python benchmarks/bench_kernels.py [--repeats 20]

Every kernel pair is checked for agreement before it is timed.
"""
from __future__ import annotations

import argparse
import time

import numpy as np

from laqlab import _fallback
from laqlab.kernels import backends


def timeit(fn, repeats):
    ts = []
    for _ in range(repeats):
        t0 = time.perf_counter()
        fn()
        ts.append(time.perf_counter() - t0)
    return float(np.median(ts))


def cases(rng):
    out_f, in_f, g = 256, 512, 32
    codes3 = rng.integers(0, 8, size=out_f * in_f).astype(np.uint8)
    words3 = _fallback.pack_codes(codes3, 3)
    scales = rng.uniform(0.01, 0.1, size=(out_f, in_f // g))
    zeros = rng.uniform(0, 7, size=(out_f, in_f // g))
    x = rng.standard_normal(in_f)
    A = rng.standard_normal((64, 64))
    A = (A + A.T) / 2
    return {
        "pack b=3 (131k codes)": lambda k: k.pack_codes(codes3, 3),
        "unpack b=3 (131k codes)": lambda k: k.unpack_codes(words3, 3, codes3.size),
        "packed_gemv 256x512 tile=128": lambda k: k.packed_gemv(words3, scales, zeros, x, out_f, in_f, g, 3, 128),
        "jacobi_eigh 64x64": lambda k: k.jacobi_eigh(A)[0],
    }


def main(argv=None):
    ap = argparse.ArgumentParser()
    ap.add_argument("--repeats", type=int, default=20)
    args = ap.parse_args(argv)
    mods = backends()
    if "compiled" not in mods:
        print("compiled extension not built; only the python backend is available")
    rng = np.random.default_rng(0)
    print(f"{'kernel':32s} " + " ".join(f"{name:>12s}" for name in mods) + "   speedup")
    for label, fn in cases(rng).items():
        results = {name: fn(mod) for name, mod in mods.items()}
        ref = results["python"]
        for name, got in results.items():
            if not np.allclose(np.asarray(got, dtype=np.float64), np.asarray(ref, dtype=np.float64), rtol=1e-10, atol=1e-10):
                raise SystemExit(f"{label}: {name} backend disagrees with python")
        times = {name: timeit(lambda m=mod: fn(m), args.repeats) for name, mod in mods.items()}
        speed = times["python"] / times["compiled"] if "compiled" in times else float("nan")
        print(f"{label:32s} " + " ".join(f"{1e3 * t:10.3f}ms" for t in times.values()) + f"   {speed:7.1f}x")


if __name__ == "__main__":
    main()
