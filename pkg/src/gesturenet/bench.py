"""Float vs. binarized convolution timing on the canonical layer shapes."""
from __future__ import annotations

import time

import numpy as np

from .binary import AddSubPlan, binarize_kernel, direct_conv, storage_report
from .nn import LayerSpec, canonical_layers, conv2d_forward, xavier_bound

# (name, input shape, kernel count, kernel shape); dense layers run as whole-input kernels
CANONICAL_SHAPES = (
    ("conv1", (50, 50, 1), 50, (5, 5, 1)),
    ("conv2", (23, 23, 50), 20, (3, 3, 50)),
    ("fc1", (7, 7, 20), 50, (7, 7, 20)),
    ("fc2", (1, 1, 50), 10, (1, 1, 50)),
)
TOLERANCE = 1e-5


class BenchError(RuntimeError):
    pass


def _median_time(fn, reps):
    times = []
    for _ in range(reps):
        t0 = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t0)
    return float(np.median(times))


def _setup(in_shape, k, kshape, rng):
    x = rng.random((1,) + in_shape).astype(np.float32)
    bound = xavier_bound(LayerSpec.conv(k, *kshape))
    w = rng.uniform(-bound, bound, (k,) + kshape).astype(np.float32)
    b = rng.uniform(-0.1, 0.1, k).astype(np.float32)
    kernels = [binarize_kernel(row) for row in w.reshape(k, -1)]
    wb = np.stack([kern.materialize() for kern in kernels]).reshape(w.shape)
    return x, w, wb, b, AddSubPlan(kernels, kshape)


def precheck(name, x, wb, b, plan):
    err = float(np.abs(plan(x, b) - conv2d_forward(x, wb, b)).max())
    if not err < TOLERANCE:
        raise BenchError(f"{name}: binarized conv deviates from reference by {err:.3g}")
    return err


def time_layer(name, in_shape, k, kshape, x, w, b, plan, reps):
    x64, w64, b64 = x.astype(np.float64), w.astype(np.float64), b.astype(np.float64)
    direct_conv(x64, w64, b64)  # compile outside the timed region
    t_float = _median_time(lambda: direct_conv(x64, w64, b64), reps)
    t_addsub = _median_time(lambda: plan(x, b), reps)
    t_blas = _median_time(lambda: conv2d_forward(x, w, b), reps)
    oh, ow = in_shape[0] - kshape[0] + 1, in_shape[1] - kshape[1] + 1
    macs = oh * ow * k * int(np.prod(kshape))
    return {
        "layer": name,
        "input_shape": list(in_shape),
        "kernels": k,
        "kernel_shape": list(kshape),
        "macs": macs,
        "float_direct_s": t_float,
        "binarized_addsub_s": t_addsub,
        "float_blas_s": t_blas,
        "float_direct_ops_per_s": macs / t_float,
        "binarized_addsub_ops_per_s": macs / t_addsub,
        "speedup_addsub_vs_direct": t_float / t_addsub,
    }


def run_bench(seed, reps=100, shapes=CANONICAL_SHAPES):
    """Check every layer against the float reference, then time them."""
    if reps < 1:
        raise ValueError("reps must be positive")
    rng = np.random.default_rng(seed)
    setups = [_setup(in_shape, k, kshape, rng) for _, in_shape, k, kshape in shapes]
    errors = [precheck(shape[0], x, wb, b, plan)
              for shape, (x, _, wb, b, plan) in zip(shapes, setups)]
    layers = []
    for (name, in_shape, k, kshape), (x, w, _, b, plan), err in zip(shapes, setups, errors):
        row = time_layer(name, in_shape, k, kshape, x, w, b, plan, reps)
        row["max_abs_error"] = err
        layers.append(row)
    storage = storage_report(canonical_layers())
    return {
        "seed": seed,
        "repetitions": reps,
        "timing": "median of repetitions, seconds per single-image layer call",
        "precheck_tolerance": TOLERANCE,
        "precheck_passed": True,
        "layers": layers,
        "storage": storage,
        "memory_ratio": storage["weight_ratio"],
    }


def format_bench(report):
    lines = [f"{'layer':<6} {'MACs':>10} {'float us':>10} {'add/sub us':>11} {'BLAS us':>9} {'speedup':>8}"]
    for r in report["layers"]:
        lines.append(f"{r['layer']:<6} {r['macs']:>10d} {r['float_direct_s'] * 1e6:>10.1f} "
                     f"{r['binarized_addsub_s'] * 1e6:>11.1f} {r['float_blas_s'] * 1e6:>9.1f} "
                     f"{r['speedup_addsub_vs_direct']:>8.2f}")
    s = report["storage"]
    lines.append(f"weights: {s['float_weight_bytes']} B float -> {s['packed_bit_bytes']} B bits "
                 f"+ {s['scale_bytes']} B scales (memory ratio {report['memory_ratio']:.2f}x, "
                 f"bit ratio {s['bit_ratio']:.0f}x)")
    return "\n".join(lines)
