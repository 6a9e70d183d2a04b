"""Joint identification + verification objective over the four FC branches."""
from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

from .errors import ArgumentError, ConfigError, SamplingError
from .model import NUM_STAGES
from .numerics import softmax_xent


@dataclass(frozen=True)
class VerifConfig:
    margin: float = 2.0
    lambda_ve: float = 0.05
    branch_weights: tuple = (1.0, 1.0, 1.0, 1.0)

    def __post_init__(self):
        object.__setattr__(self, "branch_weights", tuple(float(w) for w in self.branch_weights))

    def validate(self):
        if self.margin <= 0:
            raise ConfigError("margin must be > 0")
        if self.lambda_ve < 0:
            raise ConfigError("lambda_ve must be >= 0")
        if len(self.branch_weights) != NUM_STAGES or min(self.branch_weights) < 0:
            raise ConfigError("branch_weights needs 4 non-negative entries")
        if max(self.branch_weights) <= 0:
            raise ConfigError("at least one branch weight must be positive")


@dataclass
class PairBatch:
    i: np.ndarray
    j: np.ndarray
    same: np.ndarray

    def __len__(self):
        return len(self.i)


class VerifResult(NamedTuple):
    loss: float
    grad_i: np.ndarray
    grad_j: np.ndarray
    degenerate: bool


def ident_loss(logits, labels):
    return softmax_xent(logits, labels)


def verif_loss(f_i, f_j, same, margin):
    """Contrastive loss for one pair.

    Same identity: ``0.5*||fi-fj||^2``. Different: ``0.5*max(0, m-d)^2``.
    A different pair at exactly zero distance has no gradient direction; it
    gets loss ``0.5*m^2``, zero gradients and ``degenerate=True``.
    """
    f_i, f_j = np.asarray(f_i, dtype=np.float64), np.asarray(f_j, dtype=np.float64)
    if f_i.shape != f_j.shape:
        raise ArgumentError(f"feature shapes differ: {f_i.shape} vs {f_j.shape}")
    if margin <= 0:
        raise ArgumentError("margin must be > 0")
    diff = f_i - f_j
    if same:
        return VerifResult(0.5 * float(diff @ diff), diff, -diff, False)
    d = float(np.sqrt(diff @ diff))
    if d == 0.0:
        return VerifResult(0.5 * margin ** 2, np.zeros_like(diff), np.zeros_like(diff), True)
    if d >= margin:
        return VerifResult(0.0, np.zeros_like(diff), np.zeros_like(diff), False)
    g = -(margin - d) / d * diff
    return VerifResult(0.5 * (margin - d) ** 2, g, -g, False)


def verif_loss_batch(feats, pairs, margin):
    """Mean contrastive loss over ``pairs`` and its gradient w.r.t. ``feats``.

    Gradients are scattered in pair order, so the result is reproducible.
    Returns ``(loss, grad, n_degenerate)``.
    """
    diff = feats[pairs.i].astype(np.float64) - feats[pairs.j]
    sq = np.einsum("pd,pd->p", diff, diff)
    d = np.sqrt(sq)
    same = np.asarray(pairs.same, dtype=bool)
    losses = np.where(same, 0.5 * sq, 0.5 * np.maximum(0.0, margin - d) ** 2)
    active = ~same & (d < margin) & (d > 0)
    coef = np.where(same, 1.0, 0.0)
    coef[active] = -(margin - d[active]) / d[active]
    g = coef[:, None] * diff / len(pairs)
    grad = np.zeros(feats.shape, dtype=np.float64)
    np.add.at(grad, pairs.i, g)
    np.add.at(grad, pairs.j, -g)
    n_degenerate = int(np.sum(~same & (d == 0)))
    return float(losses.mean()), grad.astype(feats.dtype), n_degenerate


def combined_objective(outs, labels, pairs, vc):
    """Weighted sum over branches of identification + lambda_ve * verification.

    Returns ``(loss, d_fc, d_logits, terms)`` where ``terms`` holds the
    per-branch (ident, verif) losses.
    """
    if vc.lambda_ve > 0 and (pairs is None or len(pairs) == 0):
        raise ArgumentError("verification term requested but the pair set is empty")
    total = 0.0
    d_fc, d_logits, terms = [], [], []
    for n in range(NUM_STAGES):
        w = vc.branch_weights[n]
        if w == 0:
            d_fc.append(None)
            d_logits.append(None)
            terms.append((0.0, 0.0))
            continue
        li, gi = ident_loss(outs.logits[n], labels)
        lv, gv = 0.0, None
        if vc.lambda_ve > 0:
            lv, gv, _ = verif_loss_batch(outs.fc[n], pairs, vc.margin)
            gv = gv * (w * vc.lambda_ve)
        total += w * (li + vc.lambda_ve * lv)
        d_logits.append(gi * w)
        d_fc.append(gv)
        terms.append((li, lv))
    return total, d_fc, d_logits, terms


def sample_pairs(labels, positives, negatives, rng):
    """Draw pairs uniformly (with replacement) from the same-/different-identity pairs in a batch."""
    labels = np.asarray(labels)
    n = len(labels)
    if n < 2:
        raise SamplingError("need at least 2 images to form a pair")
    ii, jj = np.triu_indices(n, k=1)
    same = labels[ii] == labels[jj]
    pos_idx, neg_idx = np.flatnonzero(same), np.flatnonzero(~same)
    if positives > 0 and len(pos_idx) == 0:
        raise SamplingError("no identity has two images in this batch")
    if negatives > 0 and len(neg_idx) == 0:
        raise SamplingError("all images in this batch share one identity")
    chosen = []
    if positives > 0:
        chosen.append(rng.choice(pos_idx, size=positives))
    if negatives > 0:
        chosen.append(rng.choice(neg_idx, size=negatives))
    sel = np.concatenate(chosen) if chosen else np.zeros(0, dtype=np.intp)
    return PairBatch(ii[sel], jj[sel], same[sel])
