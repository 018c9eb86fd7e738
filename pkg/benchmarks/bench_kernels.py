"""Time the hot kernels on the compiled backend and the numpy fallback.

Run from the repo root:

    python benchmarks/bench_kernels.py

When the compiled extension is active, the script re-runs itself in a
subprocess with HELIXCT_FORCE_FALLBACK=1 and prints a side-by-side table.
"""

import argparse
import json
import os
import subprocess
import sys
import time

import numpy as np

from helixct import operators as ops
from helixct._backend import backend_name
from helixct.phantom import Volume
from helixct.presets import get_preset


def build_workloads():
    geo, vspec = get_preset("desk32")
    rng = np.random.default_rng(0)
    vol = Volume(np.abs(rng.standard_normal(vspec.dims[::-1])) * 0.01,
                 vspec.voxel_pitch_mm, vspec.origin_mm)
    sino = ops.forward_project(vol, geo)
    taper = ops.taper_weights(geo.detector_rows, 0.8)

    def fwd_midpoint():
        ops.forward_project(vol, geo)

    def fwd_stratified():
        ops.forward_project(vol, geo, rng_seed=7, sampling=ops.Sampling.STRATIFIED)

    def bp_bilinear():
        ops.backproject(sino, geo, vspec, taper=taper, use_mip=False)

    def bp_mip():
        ops.backproject(sino, geo, vspec, taper=taper, use_mip=True)

    return [("forward midpoint", fwd_midpoint),
            ("forward stratified", fwd_stratified),
            ("backproject bilinear", bp_bilinear),
            ("backproject mip", bp_mip)]


def run_suite(repeat):
    results = {}
    for name, fn in build_workloads():
        fn()  # warm up caches and lazy allocations
        best = float("inf")
        for _ in range(repeat):
            t0 = time.perf_counter()
            fn()
            best = min(best, time.perf_counter() - t0)
        results[name] = best
    return results


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=3,
                    help="runs per workload; best time is reported")
    ap.add_argument("--json", action="store_true",
                    help="print machine-readable results and exit")
    args = ap.parse_args(argv)

    results = run_suite(args.repeat)
    if args.json:
        print(json.dumps({"backend": backend_name, "results": results}))
        return 0

    print(f"backend: {backend_name}")
    other = None
    if backend_name != "fallback":
        env = dict(os.environ, HELIXCT_FORCE_FALLBACK="1")
        out = subprocess.run(
            [sys.executable, os.path.abspath(__file__),
             "--json", "--repeat", str(args.repeat)],
            capture_output=True, text=True, env=env)
        if out.returncode == 0:
            other = json.loads(out.stdout)
        else:
            print("fallback run failed:", out.stderr.strip(), file=sys.stderr)

    width = max(len(n) for n in results)
    if other is None:
        for name, sec in results.items():
            print(f"  {name:<{width}}  {sec * 1e3:9.2f} ms")
    else:
        print(f"  {'workload':<{width}}  {'compiled':>10}  {'fallback':>10}  speedup")
        for name, sec in results.items():
            fb = other["results"][name]
            print(f"  {name:<{width}}  {sec * 1e3:8.2f}ms  {fb * 1e3:8.2f}ms  "
                  f"{fb / sec:6.1f}x")
    return 0


if __name__ == "__main__":
    sys.exit(main())
