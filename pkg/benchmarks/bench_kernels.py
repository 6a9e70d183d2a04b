"""Time the numba kernels against the pure-numpy fallback.

Shapes follow one training step of the default network (batch 32, 32x32
input, 8 or 16 channels per stage). Each kernel is warmed up once (so JIT
compilation is excluded), then timed as the best of ``--repeat`` runs.
Outputs of the two backends are compared before timing.

    python3 benchmarks/bench_kernels.py [--batch 32] [--channels 16] [--repeat 7]
"""
import argparse
import time

import numpy as np

from did2lab import _backend, _kernels
from did2lab import model as mdl
from did2lab import numerics as nm
from did2lab.supervision import VerifConfig, combined_objective


def best_time(fn, repeat):
    fn()
    best = np.inf
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn()
        best = min(best, time.perf_counter() - t0)
    return best


def kernel_cases(batch, channels, rng):
    cases = []
    c_in, hw = 1, 32
    for stage in range(4):
        xp = rng.random((batch, c_in, hw + 2, hw + 2)).astype(np.float32)
        w = rng.standard_normal((channels, c_in, 3, 3)).astype(np.float32)
        b = np.zeros(channels, np.float32)
        dout = rng.standard_normal((batch, channels, hw, hw)).astype(np.float32)
        act = rng.random((batch, channels, hw, hw)).astype(np.float32)
        _, arg = _kernels.maxpool2_fwd_np(act)
        dpool = rng.standard_normal((batch, channels, hw // 2, hw // 2)).astype(np.float32)
        tag = f"s{stage + 1} {c_in}->{channels} {hw}x{hw}"
        cases += [
            (f"conv fwd  {tag}", lambda xp=xp, w=w, b=b, hw=hw: (xp, w, b, 1, hw, hw), "conv2d_fwd"),
            (f"conv bwd  {tag}", lambda dout=dout, xp=xp, w=w: (dout, xp, w, 1), "conv2d_bwd"),
            (f"pool fwd  {tag}", lambda act=act: (act,), "maxpool2_fwd"),
            (f"pool bwd  {tag}", lambda dpool=dpool, arg=arg, hw=hw: (dpool, arg, hw, hw), "maxpool2_bwd"),
        ]
        c_in, hw = channels, hw // 2
    return cases


def check_agreement(name, a, b):
    a = a if isinstance(a, tuple) else (a,)
    b = b if isinstance(b, tuple) else (b,)
    err = max(float(np.max(np.abs(np.asarray(x, np.float64) - np.asarray(y, np.float64))))
              / max(1.0, float(np.max(np.abs(x)))) for x, y in zip(a, b))
    if err > 1e-5:
        raise SystemExit(f"{name}: backends disagree by {err:g}")
    return err


def train_step_time(batch, channels, repeat, use_numba):
    arch = mdl.ArchConfig(conv_channels=(channels,) * 4, num_identities=40, seed=0)
    params = mdl.init_params(arch, nm.make_rng(0))
    rng = nm.make_rng(1)
    x = rng.random((batch, 1, 32, 32)).astype(np.float32)
    labels = rng.integers(0, 40, size=batch)
    vc = VerifConfig(lambda_ve=0.0)
    saved = _backend.USE_NUMBA
    _backend.USE_NUMBA = use_numba
    try:
        def step():
            outs = mdl.forward(params, arch, x)
            _, d_fc, d_logits, _ = combined_objective(outs, labels, None, vc)
            mdl.backward(params, outs, d_fc, d_logits)
        return best_time(step, repeat)
    finally:
        _backend.USE_NUMBA = saved


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--batch", type=int, default=32)
    ap.add_argument("--channels", type=int, default=16)
    ap.add_argument("--repeat", type=int, default=7)
    args = ap.parse_args()
    if not _backend.HAVE_NUMBA:
        raise SystemExit("numba is not importable (or DID2_NO_NUMBA is set); nothing to compare")

    rng = nm.make_rng(0)
    print(f"batch {args.batch}, {args.channels} channels, best of {args.repeat}")
    print(f"{'kernel':34s} {'numpy ms':>9s} {'numba ms':>9s} {'speedup':>8s} {'rel diff':>9s}")
    for name, make_args, base in kernel_cases(args.batch, args.channels, rng):
        f_np, f_nb = getattr(_kernels, base + "_np"), getattr(_kernels, base + "_nb")
        kargs = make_args()
        err = check_agreement(name, f_np(*kargs), f_nb(*kargs))
        t_np = best_time(lambda: f_np(*kargs), args.repeat)
        t_nb = best_time(lambda: f_nb(*kargs), args.repeat)
        print(f"{name:34s} {1e3 * t_np:9.2f} {1e3 * t_nb:9.2f} {t_np / t_nb:8.2f} {err:9.1e}")

    t_np = train_step_time(args.batch, args.channels, args.repeat, False)
    t_nb = train_step_time(args.batch, args.channels, args.repeat, True)
    print(f"{'forward+backward step':34s} {1e3 * t_np:9.2f} {1e3 * t_nb:9.2f} {t_np / t_nb:8.2f}")


if __name__ == "__main__":
    main()
