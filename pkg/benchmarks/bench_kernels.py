"""Compare the compiled kernels with the numpy fallback.

Kernel timings use desk-scale shapes (batch 64, tiny preset). With
``--train-steps`` the script also times whole training steps in two
subprocesses, one per backend, since the backend is fixed at import.

    python benchmarks/bench_kernels.py [--repeat 50] [--train-steps 5] [--json out.json]
"""

from __future__ import annotations

import argparse
import json
import os
import subprocess
import sys
import timeit

import numpy as np

from lilt_lab import _pykernels

try:
    from lilt_lab import _ckernels
except ImportError:
    _ckernels = None


def cases(rng):
    b, n, d, heads = 64, 17, 128, 4
    x = rng.standard_normal((b * n, d)).astype(np.float32)
    gamma = rng.standard_normal(d).astype(np.float32)
    beta = rng.standard_normal(d).astype(np.float32)
    _, xhat, rstd = _pykernels.layer_norm_fwd(x, gamma, beta, 1e-12)
    h = rng.standard_normal(b * n * 4 * d).astype(np.float32)
    att = rng.standard_normal((b * heads * n, n)).astype(np.float32)
    p = _pykernels.softmax_fwd(att)
    sim = rng.standard_normal((512, 512))
    target = np.arange(512, dtype=np.int64)
    return {
        "layer_norm_fwd": lambda k: k.layer_norm_fwd(x, gamma, beta, 1e-12),
        "layer_norm_bwd": lambda k: k.layer_norm_bwd(x, xhat, rstd, gamma),
        "gelu_fwd": lambda k: k.gelu_fwd(h),
        "gelu_bwd": lambda k: k.gelu_bwd(h, h),
        "softmax_fwd": lambda k: k.softmax_fwd(att),
        "softmax_bwd": lambda k: k.softmax_bwd(p, att),
        "match_ranks": lambda k: k.match_ranks(sim, target),
    }


def bench_kernels(repeat: int) -> list[dict]:
    rng = np.random.default_rng(0)
    impls = {"numpy": _pykernels}
    if _ckernels is not None:
        impls["cython"] = _ckernels
    rows = []
    for name, fn in cases(rng).items():
        row = {"kernel": name}
        for label, impl in impls.items():
            fn(impl)  # warm up
            t = min(timeit.repeat(lambda: fn(impl), number=1, repeat=repeat))
            row[label + "_ms"] = 1e3 * t
        if "cython_ms" in row:
            row["speedup"] = row["numpy_ms"] / row["cython_ms"]
        rows.append(row)
    return rows


_STEP_SCRIPT = """
import time
from lilt_lab import kernels, trainer
cfg = trainer.TrainConfig(preset="clip", epochs=1, warmup_epochs=0, max_steps={steps})
t = time.perf_counter()
trainer.train(cfg, write=False, evaluate=False)
print(kernels.BACKEND, (time.perf_counter() - t) / {steps})
"""


def bench_train_steps(steps: int) -> dict:
    out = {}
    for pure in (False, True):
        env = dict(os.environ)
        env.pop("LILT_LAB_PURE_PYTHON", None)
        if pure:
            env["LILT_LAB_PURE_PYTHON"] = "1"
        res = subprocess.run(
            [sys.executable, "-c", _STEP_SCRIPT.format(steps=steps)], env=env, capture_output=True, text=True, check=True
        )
        backend, sec = res.stdout.split()
        out[backend + "_s_per_step"] = float(sec)
    return out


def main(argv=None) -> int:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=30)
    ap.add_argument("--train-steps", type=int, default=0)
    ap.add_argument("--json")
    args = ap.parse_args(argv)
    rows = bench_kernels(args.repeat)
    print(f"{'kernel':<16}{'numpy ms':>10}{'cython ms':>11}{'speedup':>9}")
    for r in rows:
        c = r.get("cython_ms")
        print(
            f"{r['kernel']:<16}{r['numpy_ms']:>10.3f}"
            + (f"{c:>11.3f}{r['speedup']:>8.1f}x" if c is not None else f"{'n/a':>11}{'':>9}")
        )
    result = {"kernels": rows}
    if args.train_steps:
        result["train_step"] = bench_train_steps(args.train_steps)
        for k, v in result["train_step"].items():
            print(f"{k}: {v:.3f}")
    if args.json:
        with open(args.json, "w") as fh:
            json.dump(result, fh, indent=2)
    return 0


if __name__ == "__main__":
    sys.exit(main())
