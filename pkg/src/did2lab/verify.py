"""Similarity scores, the Joint Bayesian model and recognition protocols.

Every score is oriented so that higher means "more likely the same
identity"; distances are negated at the boundary.
"""
from dataclasses import dataclass

import numpy as np
from scipy import linalg

from .errors import ArgumentError, NumericError, ProtocolError
from .numerics import make_rng

LOG_2PI = np.log(2 * np.pi)


# ---------------------------------------------------------------------------
# pair lists
# ---------------------------------------------------------------------------

@dataclass
class PairList:
    """Index pairs into an image array plus the same-identity flag."""

    a: np.ndarray
    b: np.ndarray
    same: np.ndarray

    def __len__(self):
        return len(self.a)


def make_pairs(identities, n_pairs, seed=0):
    """Balanced random pairs: ``n_pairs // 2`` same-identity, the rest different.

    Pairs are distinct and unordered; deterministic given ``seed``.
    """
    identities = np.asarray(identities)
    rng = make_rng(seed)
    n_same = n_pairs // 2
    n_diff = n_pairs - n_same
    by_id = {}
    for k, ident in enumerate(identities):
        by_id.setdefault(int(ident), []).append(k)
    multi = [v for v in by_id.values() if len(v) >= 2]
    if n_same and not multi:
        raise ProtocolError("no identity has two images; cannot form same pairs")
    if n_diff and len(by_id) < 2:
        raise ProtocolError("need at least two identities for different pairs")
    seen = set()
    out = []
    max_same = sum(len(v) * (len(v) - 1) // 2 for v in multi)
    if n_same > max_same:
        raise ProtocolError(f"only {max_same} distinct same pairs exist, {n_same} requested")
    while len(out) < n_same:
        members = multi[int(rng.integers(len(multi)))]
        i, j = rng.choice(len(members), size=2, replace=False)
        key = (min(members[i], members[j]), max(members[i], members[j]))
        if key not in seen:
            seen.add(key)
            out.append((*key, True))
    n = len(identities)
    while len(out) < n_pairs:
        i, j = (int(v) for v in rng.integers(n, size=2))
        if identities[i] == identities[j]:
            continue
        key = (min(i, j), max(i, j))
        if key not in seen:
            seen.add(key)
            out.append((*key, False))
    arr = np.array([(i, j) for i, j, _ in out], dtype=np.intp).reshape(-1, 2)
    return PairList(arr[:, 0], arr[:, 1], np.array([s for *_, s in out], dtype=bool))


def write_pairs_csv(path, pairs, names=None):
    with open(path, "w") as fh:
        fh.write("img_a,img_b,same\n")
        for a, b, s in zip(pairs.a, pairs.b, pairs.same):
            na = names[a] if names is not None else a
            nb = names[b] if names is not None else b
            fh.write(f"{na},{nb},{int(s)}\n")


def read_pairs_csv(path):
    a, b, same = [], [], []
    with open(path) as fh:
        header = fh.readline().strip().split(",")
        if header != ["img_a", "img_b", "same"]:
            raise ProtocolError(f"{path}: bad header {header}")
        for line in fh:
            if line.strip():
                x, y, s = line.strip().split(",")
                a.append(int(x))
                b.append(int(y))
                same.append(s.strip() == "1")
    return PairList(np.array(a, dtype=np.intp), np.array(b, dtype=np.intp), np.array(same, dtype=bool))


# ---------------------------------------------------------------------------
# elementary metrics
# ---------------------------------------------------------------------------

def binarize(features, threshold=0.0):
    """Bit is 1 iff the activation exceeds ``threshold``."""
    return np.asarray(features) > threshold


def hamming_score(a, b):
    a, b = np.asarray(a, dtype=bool), np.asarray(b, dtype=bool)
    if a.shape[-1] != b.shape[-1]:
        raise ArgumentError(f"code lengths differ: {a.shape[-1]} vs {b.shape[-1]}")
    return -np.count_nonzero(a != b, axis=-1).astype(np.float64)


def l2_score(x, y):
    x, y = np.asarray(x, dtype=np.float64), np.asarray(y, dtype=np.float64)
    if x.shape[-1] != y.shape[-1]:
        raise ArgumentError("vector lengths differ")
    return -np.sqrt(np.sum((x - y) ** 2, axis=-1))


def cosine_score(x, y):
    """Cosine similarity; 0 when either vector is zero."""
    x, y = np.asarray(x, dtype=np.float64), np.asarray(y, dtype=np.float64)
    if x.shape[-1] != y.shape[-1]:
        raise ArgumentError("vector lengths differ")
    den = np.linalg.norm(x, axis=-1) * np.linalg.norm(y, axis=-1)
    num = np.sum(x * y, axis=-1)
    return np.where(den > 0, num / np.where(den > 0, den, 1.0), 0.0)


# ---------------------------------------------------------------------------
# Joint Bayesian
# ---------------------------------------------------------------------------

class JointBayesModel:
    """``x = mu + eps`` with ``mu ~ N(0, S_mu)``, ``eps ~ N(0, S_eps)``.

    Features are centred by the training mean before scoring. The inverse
    blocks of the same-identity joint covariance and of the marginal are
    cached, so scoring a pair is three quadratic forms.
    """

    def __init__(self, s_mu, s_eps, mean=None):
        s_mu = np.asarray(s_mu, dtype=np.float64)
        s_eps = np.asarray(s_eps, dtype=np.float64)
        d = s_mu.shape[0]
        if s_mu.shape != (d, d) or s_eps.shape != (d, d):
            raise ArgumentError("covariances must be square and equal-sized")
        self.s_mu = 0.5 * (s_mu + s_mu.T)
        self.s_eps = 0.5 * (s_eps + s_eps.T)
        self.mean = np.zeros(d) if mean is None else np.asarray(mean, dtype=np.float64)
        self.log_likelihood = []
        self._cache()

    @property
    def dim(self):
        return self.s_mu.shape[0]

    def _cache(self):
        d = self.dim
        for name, s in (("S_mu", self.s_mu), ("S_eps", self.s_eps)):
            if np.linalg.eigvalsh(s).min() < -1e-9 * max(1.0, np.abs(s).max()):
                raise NumericError(f"{name} is not positive semi-definite")
        marg = self.s_mu + self.s_eps
        joint = np.block([[marg, self.s_mu], [self.s_mu, marg]])
        try:
            c_marg = linalg.cho_factor(marg, lower=True)
            c_joint = linalg.cho_factor(joint, lower=True)
        except linalg.LinAlgError as exc:
            raise NumericError("joint covariance is singular; increase shrinkage") from exc
        inv_joint = linalg.cho_solve(c_joint, np.eye(2 * d))
        self._m11 = inv_joint[:d, :d]
        self._m12 = inv_joint[:d, d:]
        self._inv_marg = linalg.cho_solve(c_marg, np.eye(d))
        logdet_joint = 2 * np.log(np.diag(c_joint[0])).sum()
        logdet_marg = 2 * np.log(np.diag(c_marg[0])).sum()
        self._const = -0.5 * (logdet_joint - 2 * logdet_marg)

    def log_ratio(self, x1, x2):
        """log N([x1;x2] | same) - log N([x1;x2] | different), row-wise."""
        x1 = np.atleast_2d(np.asarray(x1, dtype=np.float64)) - self.mean
        x2 = np.atleast_2d(np.asarray(x2, dtype=np.float64)) - self.mean
        if x1.shape[-1] != self.dim or x2.shape[-1] != self.dim:
            raise ArgumentError(f"feature dim must be {self.dim}")
        a = self._inv_marg - self._m11
        q = (np.einsum("nd,de,ne->n", x1, a, x1) + np.einsum("nd,de,ne->n", x2, a, x2)
             - 2 * np.einsum("nd,de,ne->n", x1, self._m12, x2))
        return 0.5 * q + self._const

    def pair_scores(self, x1, x2):
        return self.log_ratio(x1, x2)

    def score_matrix(self, probes, gallery):
        p = np.atleast_2d(np.asarray(probes, dtype=np.float64)) - self.mean
        g = np.atleast_2d(np.asarray(gallery, dtype=np.float64)) - self.mean
        a = self._inv_marg - self._m11
        qp = np.einsum("nd,de,ne->n", p, a, p)
        qg = np.einsum("nd,de,ne->n", g, a, g)
        cross = p @ self._m12 @ g.T
        return 0.5 * (qp[:, None] + qg[None, :] - 2 * cross) + self._const


def jb_log_ratio(model, x1, x2):
    r = model.log_ratio(x1, x2)
    return float(r[0]) if np.ndim(x1) == 1 else r


def _group(features, labels):
    labels = np.asarray(labels)
    uniq = np.unique(labels)
    return [features[labels == u] for u in uniq]


def _shrink(s, amount):
    d = s.shape[0]
    return (1 - amount) * s + amount * np.trace(s) / d * np.eye(d)


def jb_log_likelihood(groups, s_mu, s_eps):
    """Exact marginal log-likelihood of centred grouped data under the model."""
    d = s_mu.shape[0]
    c_eps = linalg.cho_factor(s_eps, lower=True)
    logdet_eps = 2 * np.log(np.diag(c_eps[0])).sum()
    total = 0.0
    for g in groups:
        m = len(g)
        xbar = g.mean(axis=0)
        dev = g - xbar
        cov_bar = s_mu + s_eps / m
        c_bar = linalg.cho_factor(cov_bar, lower=True)
        total += (-0.5 * d * LOG_2PI - np.log(np.diag(c_bar[0])).sum()
                  - 0.5 * xbar @ linalg.cho_solve(c_bar, xbar))
        if m > 1:
            quad = np.sum(dev * linalg.cho_solve(c_eps, dev.T).T)
            total += -0.5 * (m - 1) * (d * LOG_2PI + logdet_eps) - 0.5 * quad
        total -= 0.5 * d * np.log(m)
    return float(total)


def fit_joint_bayes(features, labels, shrinkage=0.01, em_iters=0):
    """Method-of-moments start, shrinkage toward a scaled identity, then EM.

    ``model.log_likelihood`` records the training log-likelihood before the
    first and after every EM iteration.
    """
    x = np.asarray(features, dtype=np.float64)
    labels = np.asarray(labels)
    if not 0 <= shrinkage <= 1:
        raise ArgumentError("shrinkage must be in [0, 1]")
    groups_raw = _group(x, labels)
    if len(groups_raw) < 2:
        raise ArgumentError("Joint Bayesian needs at least two identities")
    if max(len(g) for g in groups_raw) < 2:
        raise ArgumentError("Joint Bayesian needs an identity with at least two samples")
    mean = x.mean(axis=0)
    groups = [g - mean for g in groups_raw]
    d = x.shape[1]
    means = np.stack([g.mean(axis=0) for g in groups])
    s_mu = np.cov(means, rowvar=False, bias=True).reshape(d, d)
    within = np.concatenate([g - g.mean(axis=0) for g in groups])
    n_within = sum(len(g) - 1 for g in groups)
    s_eps = within.T @ within / max(n_within, 1)
    s_mu, s_eps = _shrink(s_mu, shrinkage), _shrink(s_eps, shrinkage)
    if np.linalg.eigvalsh(s_eps).min() <= 0:
        raise NumericError("within-identity covariance is singular after shrinkage; increase shrinkage")
    lls = [jb_log_likelihood(groups, s_mu, s_eps)]
    n_total = sum(len(g) for g in groups)
    for _ in range(em_iters):
        acc_mu = np.zeros((d, d))
        acc_eps = np.zeros((d, d))
        for g in groups:
            m = len(g)
            cov_bar = s_mu + s_eps / m
            gain = linalg.solve(cov_bar, s_mu, assume_a="pos").T  # S_mu (S_mu + S_eps/m)^-1
            post_mean = gain @ g.mean(axis=0)
            post_cov = s_mu - gain @ s_mu
            post_cov = 0.5 * (post_cov + post_cov.T)
            acc_mu += np.outer(post_mean, post_mean) + post_cov
            r = g - post_mean
            acc_eps += r.T @ r + m * post_cov
        s_mu = acc_mu / len(groups)
        s_eps = acc_eps / n_total
        s_mu, s_eps = 0.5 * (s_mu + s_mu.T), 0.5 * (s_eps + s_eps.T)
        lls.append(jb_log_likelihood(groups, s_mu, s_eps))
    model = JointBayesModel(s_mu, s_eps, mean)
    model.log_likelihood = lls
    return model


# ---------------------------------------------------------------------------
# generic scoring
# ---------------------------------------------------------------------------

def pair_scores(metric, fa, fb):
    """Scores for aligned rows of ``fa`` and ``fb`` under ``metric``.

    ``metric`` is "l2", "cosine", "hamming" (features binarized at 0) or a
    fitted :class:`JointBayesModel`.
    """
    if isinstance(metric, JointBayesModel):
        return metric.log_ratio(fa, fb)
    if metric == "l2":
        return l2_score(fa, fb)
    if metric == "cosine":
        return cosine_score(fa, fb)
    if metric == "hamming":
        return hamming_score(binarize(fa), binarize(fb))
    raise ArgumentError(f"unknown metric {metric!r}")


def score_matrix(metric, probes, gallery):
    """``[n_probe, n_gallery]`` similarity matrix."""
    probes, gallery = np.atleast_2d(probes), np.atleast_2d(gallery)
    if isinstance(metric, JointBayesModel):
        return metric.score_matrix(probes, gallery)
    if metric == "l2":
        p, g = probes.astype(np.float64), gallery.astype(np.float64)
        sq = (p ** 2).sum(1)[:, None] + (g ** 2).sum(1)[None, :] - 2 * p @ g.T
        return -np.sqrt(np.maximum(sq, 0.0))
    if metric == "cosine":
        p, g = probes.astype(np.float64), gallery.astype(np.float64)
        pn, gn = np.linalg.norm(p, axis=1), np.linalg.norm(g, axis=1)
        den = pn[:, None] * gn[None, :]
        return np.where(den > 0, (p @ g.T) / np.where(den > 0, den, 1.0), 0.0)
    if metric == "hamming":
        p, g = binarize(probes).astype(np.int64), binarize(gallery).astype(np.int64)
        agree = p @ g.T + (1 - p) @ (1 - g).T
        return (agree - p.shape[1]).astype(np.float64)
    raise ArgumentError(f"unknown metric {metric!r}")


# ---------------------------------------------------------------------------
# protocols
# ---------------------------------------------------------------------------

def best_threshold(scores, same):
    """Threshold maximizing accuracy of ``score >= t`` on one labelled set.

    Candidates are the midpoints between adjacent distinct scores plus one
    below the minimum and one above the maximum; the lowest maximizer wins.
    Returns ``(threshold, accuracy)``.
    """
    scores = np.asarray(scores, dtype=np.float64)
    same = np.asarray(same, dtype=bool)
    u = np.unique(scores)
    cands = np.concatenate([[u[0] - 1.0], (u[:-1] + u[1:]) / 2, [u[-1] + 1.0]])
    order = np.argsort(scores, kind="stable")
    s_sorted, y_sorted = scores[order], same[order]
    # accuracy(t) = #(neg with s < t) + #(pos with s >= t)
    below = np.searchsorted(s_sorted, cands, side="left")
    neg_cum = np.concatenate([[0], np.cumsum(~y_sorted)])
    pos_cum = np.concatenate([[0], np.cumsum(y_sorted)])
    correct = neg_cum[below] + (pos_cum[-1] - pos_cum[below])
    k = int(np.argmax(correct))
    return float(cands[k]), correct[k] / len(scores)


def fold_assignment(n, folds, seed=0):
    perm = make_rng(seed).permutation(n)
    assign = np.empty(n, dtype=np.intp)
    assign[perm] = np.arange(n) % folds
    return assign


def verification_accuracy(scores, same, folds=10, seed=0):
    """k-fold accuracy: threshold fit on k-1 folds, applied to the held-out one.

    Returns ``(mean, std)`` over folds.
    """
    scores = np.asarray(scores, dtype=np.float64)
    same = np.asarray(same, dtype=bool)
    if folds < 2:
        raise ArgumentError("folds must be >= 2")
    if len(scores) < folds:
        raise ArgumentError(f"{len(scores)} pairs cannot fill {folds} folds")
    if not np.all(np.isfinite(scores)):
        raise NumericError("non-finite scores")
    assign = fold_assignment(len(scores), folds, seed)
    accs = []
    for f in range(folds):
        test = assign == f
        t, _ = best_threshold(scores[~test], same[~test])
        accs.append(np.mean((scores[test] >= t) == same[test]))
    accs = np.asarray(accs)
    return float(accs.mean()), float(accs.std())


def roc(scores, same):
    """``[(fpr, tpr), ...]`` from ``(0, 0)`` to ``(1, 1)``, one point per distinct score."""
    scores = np.asarray(scores, dtype=np.float64)
    same = np.asarray(same, dtype=bool)
    n_pos, n_neg = same.sum(), (~same).sum()
    if n_pos == 0 or n_neg == 0:
        raise ArgumentError("ROC needs both positive and negative pairs")
    order = np.argsort(-scores, kind="stable")
    s, y = scores[order], same[order]
    tp, fp = np.cumsum(y), np.cumsum(~y)
    last = np.r_[s[1:] != s[:-1], True]
    fpr = np.r_[0.0, fp[last] / n_neg]
    tpr = np.r_[0.0, tp[last] / n_pos]
    return np.column_stack([fpr, tpr])


def auc(curve):
    curve = np.asarray(curve)
    return float(np.sum(np.diff(curve[:, 0]) * (curve[1:, 1] + curve[:-1, 1]) / 2))


def _top_match(metric, probe_feats, gallery_feats):
    s = score_matrix(metric, probe_feats, gallery_feats)
    best = np.argmax(s, axis=1)  # first index wins ties
    return best, s[np.arange(len(best)), best]


def rank1_closed(gallery_feats, gallery_ids, probe_feats, probe_ids, metric="l2"):
    gallery_ids, probe_ids = np.asarray(gallery_ids), np.asarray(probe_ids)
    if len(gallery_ids) == 0:
        raise ProtocolError("empty gallery")
    missing = np.setdiff1d(probe_ids, gallery_ids)
    if len(missing):
        raise ProtocolError(f"probe identities absent from gallery: {missing[:5].tolist()}")
    best, _ = _top_match(metric, probe_feats, gallery_feats)
    return float(np.mean(gallery_ids[best] == probe_ids))


def dir_threshold(unknown_top, far_target):
    """Smallest ``tau`` with ``mean(unknown_top >= tau) <= far_target``."""
    u = np.sort(np.asarray(unknown_top, dtype=np.float64))[::-1]
    allowed = int(np.floor(far_target * len(u) + 1e-12))
    if allowed >= len(u):
        return -np.inf
    return float(np.nextafter(u[allowed], np.inf))


def dir_at_far(gallery_feats, gallery_ids, known_feats, known_ids, unknown_feats, unknown_ids,
               far_target=0.01, metric="l2"):
    """Rank-1 detection-and-identification rate at a false-alarm rate.

    Returns ``(dir, tau)``.
    """
    gallery_ids = np.asarray(gallery_ids)
    if not 0 < far_target < 1:
        raise ArgumentError("far_target must be in (0, 1)")
    if len(unknown_ids) == 0:
        raise ProtocolError("FAR undefined without unknown probes")
    if np.isin(unknown_ids, gallery_ids).any():
        raise ProtocolError("unknown probes must not have gallery identities")
    _, u_top = _top_match(metric, unknown_feats, gallery_feats)
    tau = dir_threshold(u_top, far_target)
    best, k_top = _top_match(metric, known_feats, gallery_feats)
    hit = (k_top >= tau) & (gallery_ids[best] == np.asarray(known_ids))
    return float(hit.mean()), tau
