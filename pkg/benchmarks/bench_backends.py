#!/usr/bin/env python3
"""Timing comparison of the compiled kernel core vs the numpy fallback.

Runs each hot kernel at desk-scale shapes, then a full training batch,
on both backends (skipping the compiled half when the extension is not
built). Numbers are wall-clock medians over repeats; run on an idle
machine for stable output.

    python3 benchmarks/bench_backends.py
"""

import statistics
import time

import numpy as np

from driverintent.kernel import _kernels_py

try:
    from driverintent.kernel import _kernels_c
except ImportError:
    _kernels_c = None


def best_of(fn, repeats=30, inner=10):
    times = []
    for _ in range(repeats):
        t0 = time.perf_counter()
        for _ in range(inner):
            fn()
        times.append((time.perf_counter() - t0) / inner)
    return statistics.median(times)


def kernel_cases():
    rng = np.random.default_rng(0)
    x = rng.normal(size=(360, 128))          # batched MLP hidden activations
    gout = rng.normal(size=(360, 128))
    sm = rng.normal(size=(1440, 36))         # batched attention scores
    sm_g = rng.normal(size=(1440, 36))
    ln = rng.normal(size=(360, 64))
    gamma, beta = np.ones(64), np.zeros(64)
    ln_g = rng.normal(size=(360, 64))
    param = rng.normal(size=120_000)
    grad = rng.normal(size=120_000)

    def cases_for(mod):
        probs = mod.softmax_fwd(sm)
        _, xhat, rstd = mod.layernorm_fwd(ln, gamma, beta, 1e-6)
        m, v = np.zeros_like(param), np.zeros_like(param)
        p = param.copy()
        return {
            "gelu_fwd (360x128)": lambda: mod.gelu_fwd(x),
            "gelu_bwd (360x128)": lambda: mod.gelu_bwd(x, gout),
            "softmax_fwd (1440x36)": lambda: mod.softmax_fwd(sm),
            "softmax_bwd (1440x36)": lambda: mod.softmax_bwd(probs, sm_g),
            "layernorm_fwd (360x64)": lambda: mod.layernorm_fwd(
                ln, gamma, beta, 1e-6),
            "layernorm_bwd (360x64)": lambda: mod.layernorm_bwd(
                xhat, rstd, gamma, ln_g),
            "adamw (120k params)": lambda: mod.adamw_update(
                p, grad, m, v, 1, 1e-3, 0.05, 0.9, 0.999, 1e-8),
        }

    return cases_for


def bench_kernels():
    make = kernel_cases()
    py = make(_kernels_py)
    c = make(_kernels_c) if _kernels_c is not None else None
    print(f"{'kernel':<26} {'numpy':>10} {'compiled':>10} {'speedup':>8}")
    for name, fn in py.items():
        t_py = best_of(fn)
        if c is None:
            print(f"{name:<26} {t_py * 1e6:>8.1f}us {'-':>10} {'-':>8}")
            continue
        t_c = best_of(c[name])
        print(f"{name:<26} {t_py * 1e6:>8.1f}us {t_c * 1e6:>8.1f}us "
              f"{t_py / t_c:>7.2f}x")


def bench_training():
    import os

    from driverintent.episodes import GenConfig, generate_dataset
    from driverintent.model import IntentModel
    from driverintent.rules import load_default_rules
    from driverintent.train import TrainConfig, model_config_for, train_model

    rules = load_default_rules()
    gen = GenConfig()
    episodes = generate_dataset(50, gen, rules, base_seed=0)
    cfg = TrainConfig(epochs=2, seed=0)

    def run():
        model = IntentModel.create(
            model_config_for(cfg, gen.views, gen.class_names), seed=0
        )
        t0 = time.perf_counter()
        train_model(model, episodes, cfg, rules)
        return time.perf_counter() - t0

    print(f"\ntraining batch benchmark (50 episodes x 2 epochs, backend="
          f"{os.environ.get('DRIVERINTENT_KERNEL', 'auto')}):")
    print(f"  {run():.2f}s")


if __name__ == "__main__":
    bench_kernels()
    bench_training()
