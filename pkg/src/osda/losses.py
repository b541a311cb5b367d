"""Loss functions for the phased training objective.

All functions take probabilities (not logits), reduce by arithmetic mean
over the batch, and clamp probabilities to [EPS, 1-EPS] before any log so
confident models cannot produce infinities.
"""

from dataclasses import dataclass

import torch

EPS = 1e-7


def _safe_log(p):
    return torch.log(p.clamp(EPS, 1.0 - EPS))


def _check_probs(p, name):
    if p.ndim != 2:
        raise ValueError("%s expects a (B, K) matrix, got shape %s"
                         % (name, tuple(p.shape)))
    if p.numel() and not torch.isfinite(p).all():
        raise ValueError("%s received non-finite probabilities" % name)


@dataclass
class LossWeights:
    """Scalar weights combining the per-phase loss components."""

    lambda_neg: float = 0.1
    w_entropy_min: float = 0.1
    w_gen_ent: float = 1.0
    w_gen_agree: float = 1.0

    def __post_init__(self):
        for name in ("lambda_neg", "w_entropy_min", "w_gen_ent",
                     "w_gen_agree"):
            v = getattr(self, name)
            if not (v >= 0 and v == v):
                raise ValueError("%s must be finite and >= 0, got %r"
                                 % (name, v))


def closed_ce(closed_probs, labels):
    """Mean cross-entropy of the closed-set head on labeled samples."""
    _check_probs(closed_probs, "closed_ce")
    labels = torch.as_tensor(labels, dtype=torch.long)
    k = closed_probs.shape[1]
    if labels.numel() and (labels.min() < 0 or labels.max() >= k):
        raise ValueError("labels must be in [0, %d)" % k)
    picked = closed_probs.gather(1, labels.view(-1, 1)).squeeze(1)
    return (-_safe_log(picked)).mean()


def ova_hard_negative(open_known, labels, hardest_only=True):
    """One-vs-all training with hard negative classifier sampling.

    Per sample: positive term -log p at the true class, plus the negative
    term -log(1-p) for the single most confusing wrong class (largest p).
    `hardest_only=False` switches to summing over all wrong classes.
    """
    _check_probs(open_known, "ova_hard_negative")
    k = open_known.shape[1]
    if k < 2:
        raise ValueError("hard negative sampling needs >= 2 classes")
    labels = torch.as_tensor(labels, dtype=torch.long)
    if labels.numel() and (labels.min() < 0 or labels.max() >= k):
        raise ValueError("labels must be in [0, %d)" % k)
    pos = open_known.gather(1, labels.view(-1, 1)).squeeze(1)
    mask = torch.zeros_like(open_known, dtype=torch.bool)
    mask.scatter_(1, labels.view(-1, 1), True)
    if hardest_only:
        neg = open_known.masked_fill(mask, -1.0).max(dim=1).values
        neg_term = -_safe_log(1.0 - neg)
    else:
        neg_term = (-_safe_log(1.0 - open_known) * (~mask)).sum(dim=1)
    return (-_safe_log(pos) + neg_term).mean()


def open_entropy_min(open_known):
    """Binary-entropy minimization term for unlabeled target batches."""
    _check_probs(open_known, "open_entropy_min")
    p = open_known
    ent = -(p * _safe_log(p) + (1.0 - p) * _safe_log(1.0 - p))
    return ent.mean(dim=1).mean()


def gen_agreement(open_known):
    """Generator penalty pushing every binary classifier toward 'known'."""
    _check_probs(open_known, "gen_agreement")
    return (-_safe_log(open_known)).mean(dim=1).mean()


def negative_constraint(open_known):
    """Constraint pushing every binary classifier to reject a negative.

    Exact dual of `gen_agreement`: same expression on 1-p.
    """
    _check_probs(open_known, "negative_constraint")
    return gen_agreement(1.0 - open_known)


def gen_entropy(closed_probs):
    """Generator penalty driving confident closed-set assignments."""
    _check_probs(closed_probs, "gen_entropy")
    k = closed_probs.shape[1]
    return (-(closed_probs * _safe_log(closed_probs)).sum(dim=1) / k).mean()


def check_finite(name, value):
    v = value.detach() if torch.is_tensor(value) else torch.tensor(value)
    if not torch.isfinite(v).all():
        raise FloatingPointError("loss component %r is non-finite (%r)"
                                 % (name, float(v)))
    return value


def total_source_loss(ce, hncs):
    check_finite("closed_ce", ce)
    check_finite("ova_hncs", hncs)
    return ce + hncs


def total_target_loss(ent_min, weights):
    check_finite("ent_min", ent_min)
    return weights.w_entropy_min * ent_min


def total_negative_loss(neg, weights):
    check_finite("neg_constraint", neg)
    return weights.lambda_neg * neg
