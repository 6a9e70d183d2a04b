"""Empirical studies of learned activations.

Sparsity statistics, binarized-code verification, single-neuron
selectivity, excitation profiles, activation histograms, occlusion sweeps,
mean activation maps, and a uniform-LBP handcrafted baseline.
"""
import csv
import logging
from dataclasses import dataclass, field

import numpy as np

from . import verify as V
from .errors import ArgumentError, ProtocolError
from .facegen import occlude_block, occlude_partial
from .numerics import make_rng

log = logging.getLogger(__name__)


# ---------------------------------------------------------------------------
# sparsity
# ---------------------------------------------------------------------------

def _histogram(counts, upper):
    """Integer histogram over [0, upper] with bin width ceil((upper)/64)."""
    width = max(1, -(-upper // 64))
    edges = np.arange(0, upper + width + 1, width)
    hist, _ = np.histogram(counts, bins=edges)
    return edges, hist


@dataclass
class SparsityReport:
    per_image: np.ndarray
    per_neuron: np.ndarray
    image_hist: tuple
    neuron_hist: tuple
    num_images: int
    num_neurons: int

    @property
    def image_mean(self):
        return float(self.per_image.mean())

    @property
    def image_std(self):
        return float(self.per_image.std())

    @property
    def neuron_mean(self):
        return float(self.per_neuron.mean())

    @property
    def neuron_std(self):
        return float(self.per_neuron.std())

    @property
    def image_rate(self):
        """Mean fraction of neurons active per image."""
        return self.image_mean / self.num_neurons

    @property
    def neuron_rate(self):
        """Mean fraction of images on which a neuron is active."""
        return self.neuron_mean / self.num_images


def sparsity_report(features):
    """Activated (> 0) counts per image and per neuron, with histograms."""
    f = np.asarray(features)
    if f.ndim != 2 or min(f.shape) < 1:
        raise ArgumentError(f"features must be a non-empty [N, D] matrix, got {f.shape}")
    active = f > 0
    n, d = f.shape
    per_image = active.sum(axis=1)
    per_neuron = active.sum(axis=0)
    return SparsityReport(per_image, per_neuron, _histogram(per_image, d), _histogram(per_neuron, n), n, d)


# ---------------------------------------------------------------------------
# binarization
# ---------------------------------------------------------------------------

def binarization_experiment(features, identities, pairs, fit_features, fit_identities,
                            folds=10, shrinkage=0.01, em_iters=0, seed=0):
    """Verification accuracy of real vs. binarized codes under JB / L2 / Hamming.

    Joint Bayesian models are fit on ``fit_features``, whose identities must
    not occur among the evaluated pairs. Returns ``{cell: (mean, std)}``.
    """
    identities = np.asarray(identities)
    used = np.unique(np.concatenate([identities[pairs.a], identities[pairs.b]]))
    if np.isin(np.asarray(fit_identities), used).any():
        raise ProtocolError("Joint Bayesian fit identities overlap the evaluated pairs")
    features = np.asarray(features, dtype=np.float64)
    bits = V.binarize(features).astype(np.float64)
    fit_bits = V.binarize(fit_features).astype(np.float64)
    jb_real = V.fit_joint_bayes(fit_features, fit_identities, shrinkage, em_iters)
    jb_bin = V.fit_joint_bayes(fit_bits, fit_identities, shrinkage, em_iters)

    def acc(metric, f):
        return V.verification_accuracy(V.pair_scores(metric, f[pairs.a], f[pairs.b]), pairs.same, folds, seed)

    return {
        "real+JB": acc(jb_real, features),
        "real+L2": acc("l2", features),
        "binary+JB": acc(jb_bin, bits),
        "binary+Hamming": acc("hamming", features),
    }


# ---------------------------------------------------------------------------
# selectivity
# ---------------------------------------------------------------------------

def _fit_thresholds(values, target):
    """Best single-threshold rule per column, by balanced accuracy.

    ``values`` is ``[N, D]``; returns ``(threshold, excitatory, balanced_acc)``
    arrays. Excitatory rules predict the target iff value > t, inhibitory
    iff value < t. Candidates are midpoints between adjacent distinct values
    plus one below the minimum and one above the maximum; the lowest
    maximizing threshold wins, excitatory before inhibitory.
    """
    n, d = values.shape
    n_pos = target.sum()
    n_neg = n - n_pos
    order = np.argsort(values, axis=0, kind="stable")
    v = np.take_along_axis(values, order, axis=0)
    t = target[order]
    # cut k: the k smallest values fall below the threshold
    below_pos = np.vstack([np.zeros((1, d)), np.cumsum(t, axis=0)])
    below_neg = np.arange(n + 1)[:, None] - below_pos
    bal = 0.5 * ((n_pos - below_pos) / n_pos + below_neg / n_neg)
    valid = np.ones((n + 1, d), dtype=bool)
    valid[1:n] = v[1:] > v[:-1]
    best_exc = np.where(valid, bal, -np.inf)
    best_inh = np.where(valid, 1.0 - bal, -np.inf)
    k_exc, k_inh = best_exc.argmax(axis=0), best_inh.argmax(axis=0)
    cols = np.arange(d)
    a_exc, a_inh = best_exc[k_exc, cols], best_inh[k_inh, cols]
    excitatory = a_exc >= a_inh
    k = np.where(excitatory, k_exc, k_inh)
    lo = np.where(k > 0, v[np.maximum(k - 1, 0), cols], v[0] - 1.0)
    hi = np.where(k < n, v[np.minimum(k, n - 1), cols], v[-1] + 1.0)
    thr = np.where((k > 0) & (k < n), 0.5 * (lo + hi), np.where(k == 0, v[0] - 1.0, v[-1] + 1.0))
    return thr, excitatory, np.maximum(a_exc, a_inh)


def _apply_thresholds(values, thr, excitatory, target):
    pred = np.where(excitatory, values > thr, values < thr)
    pos, neg = target, ~target
    tpr = (pred & pos[:, None]).sum(axis=0) / pos.sum()
    tnr = (~pred & neg[:, None]).sum(axis=0) / neg.sum()
    return 0.5 * (tpr + tnr)


@dataclass
class SelectivityReport:
    target_mean: np.ndarray
    target_std: np.ndarray
    other_mean: np.ndarray
    other_std: np.ndarray
    threshold: np.ndarray
    excitatory: np.ndarray
    train_accuracy: np.ndarray
    heldout_accuracy: np.ndarray
    split_seed: int

    @property
    def best_neuron(self):
        return int(np.argmax(self.heldout_accuracy))

    @property
    def best_accuracy(self):
        return float(self.heldout_accuracy.max())


def _split_halves(target, seed):
    n = len(target)
    for attempt in range(2):
        perm = make_rng(seed + attempt).permutation(n)
        a = np.zeros(n, dtype=bool)
        a[perm[: n // 2]] = True
        if all(target[m].any() and (~target[m]).any() for m in (a, ~a)):
            return a, seed + attempt
    raise ProtocolError("a class is empty in one half after resampling")


def per_neuron_accuracy(features, target_mask, split_seed=0):
    """Two-fold cross-validated balanced accuracy of every single neuron."""
    x = np.asarray(features, dtype=np.float64)
    target = np.asarray(target_mask, dtype=bool)
    if x.ndim != 2 or len(target) != len(x):
        raise ArgumentError("features must be [N, D] with one mask entry per row")
    half, used_seed = _split_halves(target, split_seed)
    train_acc, test_acc = [], []
    for fit, ev in ((half, ~half), (~half, half)):
        thr, exc, acc = _fit_thresholds(x[fit], target[fit])
        train_acc.append(acc)
        test_acc.append(_apply_thresholds(x[ev], thr, exc, target[ev]))
    thr, _, _ = _fit_thresholds(x[half], target[half])
    tm, om = x[target].mean(axis=0), x[~target].mean(axis=0)
    return SelectivityReport(
        target_mean=tm, target_std=x[target].std(axis=0),
        other_mean=om, other_std=x[~target].std(axis=0),
        threshold=thr, excitatory=tm > om,
        train_accuracy=np.mean(train_acc, axis=0),
        heldout_accuracy=np.mean(test_acc, axis=0),
        split_seed=used_seed,
    )


def excitation_profile(features, target_mask, split_seed=0):
    """Per-neuron statistics sorted by descending mean on the target subset.

    Returns a dict of equal-length arrays keyed ``neuron``, ``target_mean``,
    ``target_std``, ``other_mean``, ``other_std``, ``accuracy``,
    ``excitatory``.
    """
    target = np.asarray(target_mask, dtype=bool)
    if not target.any():
        raise ArgumentError("target subset is empty")
    rep = per_neuron_accuracy(features, target, split_seed)
    order = np.argsort(-rep.target_mean, kind="stable")
    return {
        "neuron": order,
        "target_mean": rep.target_mean[order],
        "target_std": rep.target_std[order],
        "other_mean": rep.other_mean[order],
        "other_std": rep.other_std[order],
        "accuracy": rep.heldout_accuracy[order],
        "excitatory": rep.excitatory[order],
    }


def activation_histograms(features, subsets, neuron_ids, bins=20):
    """Histograms per (neuron, subset) on bin edges shared across subsets.

    Returns ``(hists, warnings)`` where ``hists[(neuron, name)] = (edges, counts)``.
    """
    x = np.asarray(features, dtype=np.float64)
    d = x.shape[1]
    bad = [i for i in neuron_ids if not 0 <= i < d]
    if bad:
        raise ArgumentError(f"neuron ids out of range: {bad}")
    hists, warnings = {}, []
    for i in neuron_ids:
        lo, hi = x[:, i].min(), x[:, i].max()
        if hi <= lo:
            hi = lo + 1.0
        edges = np.linspace(lo, hi, bins + 1)
        for name, mask in subsets.items():
            mask = np.asarray(mask, dtype=bool)
            if not mask.any():
                warnings.append(f"subset {name!r} is empty; skipped")
                continue
            counts, _ = np.histogram(x[mask, i], bins=edges)
            hists[(i, name)] = (edges, counts)
    return hists, sorted(set(warnings))


# ---------------------------------------------------------------------------
# LBP baseline
# ---------------------------------------------------------------------------

# clockwise from the top-left neighbour; bit k has weight 2**k
LBP_OFFSETS = ((-1, -1), (-1, 0), (-1, 1), (0, 1), (1, 1), (1, 0), (1, -1), (0, -1))
LBP_GRID = 4


def _uniform_table():
    table = np.empty(256, dtype=np.intp)
    nxt = 0
    for code in range(256):
        bits = [(code >> k) & 1 for k in range(8)]
        transitions = sum(bits[k] != bits[(k + 1) % 8] for k in range(8))
        if transitions <= 2:
            table[code] = nxt
            nxt += 1
        else:
            table[code] = -1
    table[table < 0] = nxt  # shared non-uniform bin
    return table


UNIFORM_BIN = _uniform_table()
LBP_BINS = int(UNIFORM_BIN.max()) + 1  # 59


def lbp_codes(images):
    """8-neighbour codes of interior pixels; ties (neighbour == centre) set the bit."""
    x = np.asarray(images, dtype=np.float64)
    if x.ndim == 4:
        x = x[:, 0]
    h, w = x.shape[-2:]
    centre = x[..., 1:h - 1, 1:w - 1]
    codes = np.zeros(centre.shape, dtype=np.int64)
    for k, (dy, dx) in enumerate(LBP_OFFSETS):
        nb = x[..., 1 + dy:h - 1 + dy, 1 + dx:w - 1 + dx]
        codes |= (nb >= centre).astype(np.int64) << k
    return codes


def lbp_baseline(images):
    """Concatenated 59-bin uniform-LBP histograms over a 4x4 block grid (944 dims)."""
    x = np.asarray(images)
    if x.ndim == 2:
        x = x[None]
    if x.ndim == 4:
        if x.shape[1] != 1:
            raise ArgumentError("lbp_baseline expects grayscale images")
        x = x[:, 0]
    n, h, w = x.shape
    if h < 16 or w < 16:
        raise ArgumentError(f"images must be at least 16x16, got {h}x{w}")
    codes = UNIFORM_BIN[lbp_codes(x)]
    by = (np.arange(1, h - 1) * LBP_GRID) // h
    bx = (np.arange(1, w - 1) * LBP_GRID) // w
    block = (by[:, None] * LBP_GRID + bx[None, :])
    dim = LBP_GRID * LBP_GRID * LBP_BINS
    flat = (np.arange(n)[:, None, None] * dim + block[None] * LBP_BINS + codes).ravel()
    return np.bincount(flat, minlength=n * dim).reshape(n, dim).astype(np.float32)


# ---------------------------------------------------------------------------
# occlusion robustness
# ---------------------------------------------------------------------------

@dataclass
class FeatureSource:
    """A feature extractor plus the pair metric used to score its output."""

    extract: object
    metric: object = "l2"


def occlude_images(images, kind, level, rng, fill=0.0, from_bottom=True):
    """Occlude every image independently; ``level`` is a fraction (partial) or block side (block)."""
    if kind == "partial":
        return occlude_partial(images, level, fill, from_bottom)
    if kind == "block":
        out = np.array(images, copy=True)
        for k in range(len(out)):
            out[k] = occlude_block(out[k], int(level), fill, rng)
        return out
    raise ArgumentError(f"unknown occlusion kind {kind!r}")


@dataclass
class RobustnessCurve:
    kind: str
    levels: list
    sources: list
    accuracy: np.ndarray
    std: np.ndarray = field(default=None)

    def at(self, level, source):
        return float(self.accuracy[self.levels.index(level), self.sources.index(source)])

    def rows(self):
        for li, level in enumerate(self.levels):
            for si, src in enumerate(self.sources):
                yield self.kind, level, src, self.accuracy[li, si], self.std[li, si]

    def to_csv(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["kind", "level", "source", "accuracy", "std"])
            for kind, level, src, acc, sd in self.rows():
                w.writerow([kind, f"{level:g}", src, f"{acc:.6f}", f"{sd:.6f}"])


def robustness_sweep(sources, images, pairs, kind, levels, folds=10, rng=None, fill=0.0, seed=0,
                     from_bottom=True):
    """Verification accuracy per (occlusion level, feature source).

    Both members of every pair are occluded; block positions are drawn
    independently per image. All sources see the same occluded images, and
    every level replays the same random stream so block positions stay
    comparable across sizes.
    """
    if not sources:
        raise ArgumentError("no feature sources given")
    for name, src in sources.items():
        if not isinstance(src, FeatureSource) or not callable(src.extract):
            raise ArgumentError(f"unknown or malformed feature source {name!r}")
    rng = make_rng(seed) if rng is None else rng
    level_seed = int(rng.integers(2**63))
    used = np.unique(np.concatenate([pairs.a, pairs.b]))
    remap = np.full(len(images), -1)
    remap[used] = np.arange(len(used))
    a, b = remap[pairs.a], remap[pairs.b]
    base = np.asarray(images)[used]
    names = list(sources)
    acc = np.zeros((len(levels), len(names)))
    std = np.zeros_like(acc)
    for li, level in enumerate(levels):
        occ = occlude_images(base, kind, level, make_rng(level_seed), fill, from_bottom) if level else base
        for si, name in enumerate(names):
            src = sources[name]
            f = src.extract(occ)
            s = V.pair_scores(src.metric, f[a], f[b])
            acc[li, si], std[li, si] = V.verification_accuracy(s, pairs.same, folds, seed)
        log.info("%s level %s: %s", kind, level, dict(zip(names, np.round(acc[li], 3))))
    return RobustnessCurve(kind, list(levels), names, acc, std)


def mean_activation_map(extract, images, kind, levels, rng=None, fill=0.0, reference_order=None,
                        from_bottom=True):
    """Mean FC activation per occlusion level, columns sorted by unoccluded mean.

    Returns ``(matrix[levels, D], column_order)``.
    """
    images = np.asarray(images)
    if len(images) == 0:
        raise ArgumentError("identity image set is empty")
    rng = make_rng(0) if rng is None else rng
    level_seed = int(rng.integers(2**63))
    clean = np.asarray(extract(images), dtype=np.float64).mean(axis=0)
    order = np.argsort(-clean, kind="stable") if reference_order is None else np.asarray(reference_order)
    rows = []
    for level in levels:
        occ = occlude_images(images, kind, level, make_rng(level_seed), fill, from_bottom) if level else images
        rows.append(np.asarray(extract(occ), dtype=np.float64).mean(axis=0)[order])
    return np.vstack(rows), order
