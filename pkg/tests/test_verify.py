import numpy as np
import pytest

from did2lab import verify as V
from did2lab.errors import ArgumentError, NumericError, ProtocolError
from did2lab.numerics import make_rng

N_CASES = 200


# ---------------------------------------------------------------------------
# brute-force references
# ---------------------------------------------------------------------------

def brute_threshold(scores, same):
    """Try every candidate threshold with a plain loop; lowest maximizer wins."""
    u = sorted(set(float(s) for s in scores))
    cands = [u[0] - 1.0] + [(a + b) / 2 for a, b in zip(u[:-1], u[1:])] + [u[-1] + 1.0]
    best_t, best_c = None, -1
    for t in cands:
        c = sum(1 for s, y in zip(scores, same) if (s >= t) == y)
        if c > best_c:
            best_t, best_c = t, c
    return best_t


def brute_verification(scores, same, folds, seed):
    perm = make_rng(seed).permutation(len(scores))
    fold_of = [0] * len(scores)
    for rank, idx in enumerate(perm):
        fold_of[idx] = rank % folds
    accs = []
    for f in range(folds):
        tr = [k for k in range(len(scores)) if fold_of[k] != f]
        te = [k for k in range(len(scores)) if fold_of[k] == f]
        t = brute_threshold([scores[k] for k in tr], [same[k] for k in tr])
        accs.append(sum((scores[k] >= t) == same[k] for k in te) / len(te))
    return float(np.mean(accs)), float(np.std(accs))


def brute_roc(scores, same):
    pos = [s for s, y in zip(scores, same) if y]
    neg = [s for s, y in zip(scores, same) if not y]
    pts = [(0.0, 0.0)]
    for t in sorted(set(scores), reverse=True):
        pts.append((sum(s >= t for s in neg) / len(neg), sum(s >= t for s in pos) / len(pos)))
    return np.array(pts)


def brute_top(probe, gallery):
    best, best_s = None, None
    for k, g in enumerate(gallery):
        s = -float(np.sqrt(np.sum((probe - g) ** 2)))
        if best is None or s > best_s:
            best, best_s = k, s
    return best, best_s


def brute_rank1(gallery, gids, probes, pids):
    return float(np.mean([gids[brute_top(p, gallery)[0]] == i for p, i in zip(probes, pids)]))


def brute_dir(gallery, gids, known, kids, unknown, far):
    u_top = [brute_top(p, gallery)[1] for p in unknown]
    cands = [-np.inf] + u_top + [float(np.nextafter(v, np.inf)) for v in u_top]
    tau = min(t for t in cands if np.mean([v >= t for v in u_top]) <= far)
    hits = 0
    for p, i in zip(known, kids):
        k, s = brute_top(p, gallery)
        hits += s >= tau and gids[k] == i
    return hits / len(known), tau


def _scored_pairs(rng, n):
    scores = rng.integers(-4, 5, size=n).astype(np.float64)  # coarse grid forces ties
    if rng.random() < 0.5:
        scores = scores + rng.normal(size=n)
    same = rng.random(n) < 0.5
    same[0], same[1] = True, False
    return scores, same


# ---------------------------------------------------------------------------
# protocols versus references
# ---------------------------------------------------------------------------

def test_verification_accuracy_matches_brute_force():
    rng = make_rng(0)
    for case in range(N_CASES):
        n = int(rng.integers(4, 21))
        folds = int(rng.integers(2, min(n, 10) + 1))
        scores, same = _scored_pairs(rng, n)
        got = V.verification_accuracy(scores, same, folds=folds, seed=case)
        assert got == brute_verification(scores, same, folds, case), case


def test_roc_matches_brute_force():
    rng = make_rng(1)
    for case in range(N_CASES):
        scores, same = _scored_pairs(rng, int(rng.integers(2, 21)))
        np.testing.assert_array_equal(V.roc(scores, same), brute_roc(scores, same), err_msg=str(case))


def test_rank1_matches_brute_force():
    rng = make_rng(2)
    for case in range(N_CASES):
        n_g = int(rng.integers(1, 8))
        gallery = rng.integers(-2, 3, size=(n_g, 3)).astype(np.float64)
        gids = rng.permutation(20)[:n_g]
        n_p = int(rng.integers(1, 14))
        probes = rng.integers(-2, 3, size=(n_p, 3)).astype(np.float64)
        pids = gids[rng.integers(n_g, size=n_p)]
        got = V.rank1_closed(gallery, gids, probes, pids, metric="l2")
        assert got == brute_rank1(gallery, gids, probes, pids), case


def test_dir_at_far_matches_brute_force():
    rng = make_rng(3)
    for case in range(N_CASES):
        n_g = int(rng.integers(1, 6))
        gallery = rng.integers(-2, 3, size=(n_g, 2)).astype(np.float64)
        gids = np.arange(n_g)
        n_k, n_u = int(rng.integers(1, 8)), int(rng.integers(1, 8))
        known = rng.integers(-2, 3, size=(n_k, 2)).astype(np.float64)
        kids = rng.integers(n_g, size=n_k)
        unknown = rng.integers(-2, 3, size=(n_u, 2)).astype(np.float64)
        far = float(rng.choice([0.01, 0.1, 0.25, 0.5]))
        got = V.dir_at_far(gallery, gids, known, kids, unknown, np.full(n_u, 99), far, metric="l2")
        assert got == brute_dir(gallery, gids, known, kids, unknown, far), case


# ---------------------------------------------------------------------------
# handcrafted cases and errors
# ---------------------------------------------------------------------------

def test_threshold_lowest_maximizer():
    t, acc = V.best_threshold([0.0, 1.0, 2.0, 3.0], [False, True, False, True])
    assert acc == 0.75 and t == 0.5  # 2.5 ties


def test_roc_endpoints_and_auc():
    curve = V.roc([3.0, 2.0, 1.0, 0.0], [True, True, False, False])
    np.testing.assert_array_equal(curve[[0, -1]], [[0, 0], [1, 1]])
    assert V.auc(curve) == 1.0
    assert np.all(np.diff(curve[:, 0]) >= 0)


def test_dir_separated_equals_rank1():
    gallery = np.array([[0.0, 0.0], [10.0, 0.0]])
    known = np.array([[0.1, 0.0], [9.8, 0.0], [4.0, 0.0]])
    kids = np.array([0, 1, 1])
    unknown = np.array([[5.0, 30.0], [-20.0, 0.0]])
    d, _ = V.dir_at_far(gallery, [0, 1], known, kids, unknown, [7, 8], 0.01)
    assert d == V.rank1_closed(gallery, [0, 1], known, kids)


def test_protocol_errors():
    with pytest.raises(ArgumentError):
        V.verification_accuracy([1.0, 2.0], [True, False], folds=3)
    with pytest.raises(ArgumentError):
        V.verification_accuracy([1.0, 2.0], [True, False], folds=1)
    with pytest.raises(NumericError):
        V.verification_accuracy([np.nan, 1.0], [True, False], folds=2)
    with pytest.raises(ArgumentError):
        V.roc([1.0, 2.0], [True, True])
    with pytest.raises(ProtocolError):
        V.rank1_closed(np.zeros((1, 2)), [0], np.zeros((1, 2)), [5])
    with pytest.raises(ProtocolError):
        V.dir_at_far(np.zeros((1, 2)), [0], np.zeros((1, 2)), [0], np.zeros((0, 2)), [], 0.01)
    with pytest.raises(ProtocolError):
        V.dir_at_far(np.zeros((1, 2)), [0], np.zeros((1, 2)), [0], np.zeros((1, 2)), [0], 0.01)


def test_metrics():
    np.testing.assert_array_equal(V.binarize([0.5, 0.0, -0.1]), [True, False, False])
    assert V.hamming_score([1, 0, 1], [1, 1, 0]) == -2
    assert V.l2_score([0.0, 0.0], [3.0, 4.0]) == -5.0
    assert V.cosine_score([1.0, 0.0], [0.0, 0.0]) == 0.0
    assert V.cosine_score([1.0, 1.0], [2.0, 2.0]) == pytest.approx(1.0)


@pytest.mark.parametrize("metric", ["l2", "cosine", "hamming"])
def test_score_matrix_agrees_with_pair_scores(metric, rng):
    p, g = rng.normal(size=(4, 6)), rng.normal(size=(5, 6))
    m = V.score_matrix(metric, p, g)
    for i in range(4):
        np.testing.assert_allclose(m[i], V.pair_scores(metric, np.repeat(p[i:i + 1], 5, 0), g), atol=1e-9)


def test_make_pairs_balanced_and_deterministic():
    ids = np.repeat(np.arange(6), 4)
    a = V.make_pairs(ids, 40, seed=1)
    b = V.make_pairs(ids, 40, seed=1)
    assert a.same.sum() == 20 and len(a) == 40
    np.testing.assert_array_equal(a.a, b.a)
    np.testing.assert_array_equal(ids[a.a] == ids[a.b], a.same)
    assert len({(i, j) for i, j in zip(a.a, a.b)}) == 40
    with pytest.raises(ProtocolError):
        V.make_pairs(np.arange(5), 4)


def test_pairs_csv_roundtrip(tmp_path):
    p = V.make_pairs(np.repeat(np.arange(4), 3), 10, seed=0)
    V.write_pairs_csv(tmp_path / "p.csv", p)
    q = V.read_pairs_csv(tmp_path / "p.csv")
    np.testing.assert_array_equal(p.a, q.a)
    np.testing.assert_array_equal(p.same, q.same)
