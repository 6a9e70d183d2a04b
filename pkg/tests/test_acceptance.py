"""Acceptance criteria, each at its stated tolerance.

Every test records one ``PASS/FAIL criterion N: ...`` line; conftest prints
them together in the terminal summary. Criteria 4-9 and 11 share one run of
the default configuration through the CLI (seed 0, one thread).
"""
import csv
import time

import numpy as np
import pytest

from did2lab import _backend, cli, trainer
from did2lab import numerics as nm
from did2lab.config import RunConfig
from did2lab.supervision import PairBatch, verif_loss_batch

import test_joint_bayes as tjb
import test_model as tm
import test_numerics as tn
import test_verify as tv
from conftest import ACCEPTANCE, BACKENDS, smooth_fd_check

RUN_COMMANDS = {
    "train": (["train"], ["train_log.csv"]),
    "eval-verify": (["eval-verify"], ["verify.csv", "roc.csv", "pairs.csv"]),
    "eval-ident": (["eval-ident"], ["ident.csv"]),
    "sparsity": (["analyze", "sparsity"], ["sparsity_images.csv", "sparsity_neurons.csv", "sparsity_summary.csv"]),
    "binarize": (["analyze", "binarize"], ["binarize.csv"]),
    "selectivity": (["analyze", "selectivity"], ["selectivity.csv", "selectivity_profile.csv", "activation_hist.csv"]),
    "robustness": (["analyze", "robustness"], ["robustness.csv"]),
    "activation-map": (["analyze", "activation-map"], ["activation_map.csv"]),
}


def verdict(num, ok, detail):
    line = f"{'PASS' if ok else 'FAIL'} criterion {num}: {detail}"
    ACCEPTANCE.append(line)
    print(line)
    assert ok, line


def _passes(fn, *args):
    try:
        fn(*args)
    except AssertionError:
        return False
    return True


def _each_backend(fn, *args):
    saved = _backend.USE_NUMBA
    try:
        ok = True
        for name in BACKENDS:
            _backend.USE_NUMBA = name == "numba"
            ok &= _passes(fn, *args)
        return ok
    finally:
        _backend.USE_NUMBA = saved


def _read(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def _cli(argv):
    code = cli.main([str(a) for a in argv])
    assert code == 0, f"did2 {' '.join(map(str, argv))} exited {code}"


@pytest.fixture(scope="session")
def default_run(tmp_path_factory):
    root = tmp_path_factory.mktemp("acceptance")
    out = {name: root / name for name in RUN_COMMANDS}
    t0 = time.perf_counter()
    _cli(["train", "--threads", 1, "--out", out["train"]])
    seconds = time.perf_counter() - t0
    ckpt = out["train"] / "best.ckpt"
    for name, (cmd, _) in RUN_COMMANDS.items():
        if name != "train":
            _cli(cmd + ["--threads", 1, "--checkpoint", ckpt, "--out", out[name]])
    return {"root": root, "out": out, "ckpt": ckpt, "train_seconds": seconds}


# ---------------------------------------------------------------------------
# 1-3, 10: oracle suites
# ---------------------------------------------------------------------------

def _random_op_checks(rng):
    """Max relative error over every op on randomized small float64 shapes."""
    worst = 0.0
    for _ in range(3):
        n, c, k = (int(v) for v in rng.integers(1, 4, size=3))
        h, w = (int(v) for v in rng.integers(4, 8, size=2))
        stride, pad = int(rng.integers(1, 3)), int(rng.integers(0, 2))
        x, wt, b = rng.standard_normal((n, c, h, w)), rng.standard_normal((k, c, 3, 3)), rng.standard_normal(k)
        ctx = nm.conv2d(x, wt, b, stride, pad)[1]
        worst = max(worst, tn._check_op(lambda x, wt, b: nm.conv2d(x, wt, b, stride, pad)[0],
                                        lambda d: nm.conv2d_backward(d, ctx), (x, wt, b), rng))
        xp = rng.permutation(n * c * h * w).reshape(n, c, h, w) * 0.01
        pctx = nm.maxpool2(xp)[1]
        worst = max(worst, tn._check_op(lambda x: nm.maxpool2(x)[0],
                                        lambda d: [nm.maxpool2_backward(d, pctx)], (xp,), rng))
        xr = rng.standard_normal((n * 3, h))
        xr[np.abs(xr) < 0.01] = 0.5
        mask = nm.relu(xr)[1]
        worst = max(worst, tn._check_op(lambda x: nm.relu(x)[0], lambda d: [nm.relu_backward(d, mask)], (xr,), rng))
        d_in, d_out = int(rng.integers(2, 8)), int(rng.integers(2, 6))
        xa, wa, ba = rng.standard_normal((n + 2, d_in)), rng.standard_normal((d_in, d_out)), rng.standard_normal(d_out)
        actx = nm.affine(xa, wa, ba)[1]
        worst = max(worst, tn._check_op(lambda *a: nm.affine(*a)[0], lambda d: nm.affine_backward(d, actx),
                                        (xa, wa, ba), rng))
        logits, labels = rng.standard_normal((n + 3, k + 1)), rng.integers(0, k + 1, n + 3)
        g = nm.softmax_xent(logits, labels)[1]
        worst = max(worst, nm.finite_diff_check(lambda ps: nm.softmax_xent(ps[0], labels)[0], [logits], [g],
                                                samples=64, rng=rng))
        feats = rng.standard_normal((6, d_in))
        pairs = PairBatch(np.array([0, 1, 2, 3, 0]), np.array([1, 2, 3, 4, 5]),
                          np.array([True, False, True, False, False]))
        margin = 3.0 * np.sqrt(d_in)  # every negative pair inside the margin, away from the kink
        g = verif_loss_batch(feats, pairs, margin)[1]
        worst = max(worst, nm.finite_diff_check(lambda ps: verif_loss_batch(ps[0], pairs, margin)[0], [feats], [g],
                                                samples=64, rng=rng))
    return worst


def test_criterion_01_gradient_integrity():
    t0 = time.perf_counter()
    op_err = _random_op_checks(nm.make_rng(11))
    full_err, counts = 0.0, []
    saved = _backend.USE_NUMBA
    try:
        for name in BACKENDS:
            _backend.USE_NUMBA = name == "numba"
            objective, pattern, ts, grads = tm._setup_objective(0)
            err, n = smooth_fd_check(objective, pattern, ts, grads, 96, nm.make_rng(9))
            full_err, counts = max(full_err, err), counts + [n]
    finally:
        _backend.USE_NUMBA = saved
    seconds = time.perf_counter() - t0
    ok = op_err <= 1e-3 and full_err <= 1e-3 and min(counts) >= 64 and seconds < 120
    verdict(1, ok, f"ops max rel err {op_err:.2e}, full objective {full_err:.2e} over {min(counts)} coords, "
                   f"{seconds:.1f}s")


def test_criterion_02_kernel_oracles():
    results = {
        "conv2d": _each_backend(tn.test_conv_matches_naive_oracle, None, nm.make_rng(21)),
        "maxpool2": _each_backend(tn.test_maxpool_matches_naive_oracle, None, nm.make_rng(22)),
        "affine": _passes(tn.test_affine_matches_naive_oracle, nm.make_rng(23)),
    }
    verdict(2, all(results.values()), "100 instances each, abs err <= 1e-5 on " + ", ".join(
        f"{k} {'ok' if v else 'MISMATCH'}" for k, v in results.items()) + f" (backends: {', '.join(BACKENDS)})")


def test_criterion_03_protocol_oracles():
    results = {
        "verification_accuracy": _passes(tv.test_verification_accuracy_matches_brute_force),
        "roc": _passes(tv.test_roc_matches_brute_force),
        "rank1_closed": _passes(tv.test_rank1_matches_brute_force),
        "dir_at_far": _passes(tv.test_dir_at_far_matches_brute_force),
    }
    verdict(3, all(results.values()) and tv.N_CASES >= 200, f"{tv.N_CASES} exhaustive cases each, exact: " + ", ".join(
        f"{k} {'ok' if v else 'MISMATCH'}" for k, v in results.items()))


def test_criterion_10_joint_bayes():
    hand = all(_passes(tjb.test_one_dimensional_log_ratio, *case)
               for case in [(0.3, -1.2, 2.0, 0.5), (1.0, 1.0, 1.0, 1.0), (-2.0, 0.5, 0.3, 3.0)])
    em = _passes(tjb.test_em_log_likelihood_monotone)
    rec = _passes(tjb.test_covariance_recovery)
    verdict(10, hand and em and rec,
            f"EM monotone (tol 1e-6) {em}, recovery <= 20% (d=4, 200x10) {rec}, 1-D fixture to 1e-6 {hand}")


# ---------------------------------------------------------------------------
# 4-9, 11: the default run
# ---------------------------------------------------------------------------

def test_criterion_04_training_sanity(default_run):
    rows = _read(default_run["out"]["train"] / "train_log.csv")
    loss = np.array([float(r["train_loss"]) for r in rows])
    smooth = np.convolve(loss, np.ones(5) / 5, mode="valid")
    mono = bool(np.all(np.diff(smooth) <= 0))
    acc = float(rows[-1]["id_acc_4"])
    secs = default_run["train_seconds"]
    verdict(4, mono and acc >= 0.95 and secs <= 600,
            f"5-epoch smoothed loss non-increasing {mono}, final branch-4 train id acc {acc:.4f} (>= 0.95), "
            f"{secs:.0f}s (<= 600) over {len(rows)} epochs")


def _verify_acc(run):
    rows = _read(run["out"]["eval-verify"] / "verify.csv")
    return {(r["layer"], r["metric"]): float(r["accuracy"]) for r in rows}


def test_criterion_05_verification_ordering(default_run):
    acc = _verify_acc(default_run)
    jb, l2 = acc[("fc4", "jb")], acc[("fc4", "l2")]
    n_pairs = len(_read(default_run["out"]["eval-verify"] / "pairs.csv"))
    verdict(5, jb >= l2 >= 0.85 and n_pairs == 600,
            f"FC-4+JB {jb:.4f} >= FC-4+L2 {l2:.4f} >= 0.85 on {n_pairs} pairs, 10 folds")


def test_criterion_06_binarization_gap(default_run):
    cells = {r["cell"]: float(r["accuracy"]) for r in _read(default_run["out"]["binarize"] / "binarize.csv")}
    real, bjb, ham = cells["real+JB"], cells["binary+JB"], cells["binary+Hamming"]
    ok = abs(real - bjb) <= 0.02 and abs(real - ham) <= 0.05
    verdict(6, ok, f"real+JB {real:.4f}, binary+JB {bjb:.4f} (gap {100 * (real - bjb):+.2f} pt, <= 2), "
                   f"binary+Hamming {ham:.4f} (gap {100 * (real - ham):+.2f} pt, <= 5)")


def test_criterion_07_moderate_sparsity(default_run):
    summary = {r["statistic"]: float(r["value"])
               for r in _read(default_run["out"]["sparsity"] / "sparsity_summary.csv")}
    img, neu = summary["image_rate"], summary["neuron_rate"]
    verdict(7, 0.3 <= img <= 0.7 and 0.3 <= neu <= 0.7,
            f"FC-4 per-image rate {img:.4f}, per-neuron rate {neu:.4f} (both in [0.3, 0.7])")


def test_criterion_08_selectivity(default_run):
    rows = [r for r in _read(default_run["out"]["selectivity"] / "selectivity.csv") if r["target"].startswith("attr:")]
    ok = bool(rows)
    parts = []
    for r in rows:
        best, lbp = float(r["best_accuracy"]), float(r["best_lbp_accuracy"])
        ok &= best >= 0.9 and best > lbp
        parts.append(f"{r['target'][5:]} {best:.3f} vs lbp {lbp:.3f}")
    verdict(8, ok, "best neuron >= 0.90 and > best LBP: " + ", ".join(parts))


def test_criterion_09_robustness(default_run):
    rows = _read(default_run["out"]["robustness"] / "robustness.csv")
    hw = RunConfig()["data.hw"]
    curves = {}
    for r in rows:
        curves.setdefault(r["kind"], {}).setdefault(r["source"], []).append((float(r["level"]), float(r["accuracy"])))
    ok, parts = True, []
    for kind, at in (("partial", 0.4), ("block", hw / 2)):
        c = {s: dict(v) for s, v in curves[kind].items()}
        a1, a2, a4 = c["fc1"][at], c["fc2"][at], c["fc4"][at]
        order = a4 >= a2 - 0.01 and a2 >= a1 - 0.01
        drop4, drop_lbp = c["fc4"][0.0] - a4, c["lbp"][0.0] - c["lbp"][at]
        mono = []
        for s, pts in curves[kind].items():
            accs = [a for _, a in sorted(pts)]
            rises = [b - a for a, b in zip(accs, accs[1:]) if b > a + 0.01]
            if rises:
                mono.append(f"{s} +{100 * max(rises):.1f}pt")
        ok &= order and drop4 < drop_lbp and not mono
        parts.append(f"{kind}@{at:g}: fc4 {a4:.3f} fc2 {a2:.3f} fc1 {a1:.3f} order {order}, "
                     f"drop fc4 {100 * drop4:.1f} < lbp {100 * drop_lbp:.1f} {drop4 < drop_lbp}, "
                     f"non-increasing {'yes' if not mono else 'no (' + ', '.join(mono) + ')'}")
    verdict(9, ok, "; ".join(parts))


def test_criterion_11_reproducibility(default_run):
    root, out = default_run["root"], default_run["out"]
    diffs = []
    for name, (cmd, files) in RUN_COMMANDS.items():
        again = root / f"rerun_{name}"
        argv = cmd + ["--config", out[name] / "resolved_config.txt", "--seed-file", out[name] / "seed.txt",
                      "--out", again]
        if name != "train":
            argv += ["--checkpoint", default_run["ckpt"]]
        _cli(argv)
        diffs += [f"{name}/{f}" for f in files if (again / f).read_bytes() != (out[name] / f).read_bytes()]
    same_ckpt = (root / "rerun_train" / "best.ckpt").read_bytes() == default_run["ckpt"].read_bytes()
    params, arch = trainer.load_checkpoint(str(default_run["ckpt"]))
    round_trip = trainer.checkpoint_bytes(params, arch) == default_run["ckpt"].read_bytes()
    n_csv = sum(len(f) for _, f in RUN_COMMANDS.values())
    verdict(11, not diffs and same_ckpt and round_trip,
            f"{n_csv - len(diffs)}/{n_csv} CSVs byte-identical on rerun"
            + (f" (differ: {', '.join(diffs)})" if diffs else "")
            + f", retrained checkpoint identical {same_ckpt}, checkpoint round-trip bit-exact {round_trip}")
