"""Open-set domain adaptation harness with unknown-exploitation strategies.

Train a one-vs-all open-set classifier on a labeled source domain and an
unlabeled target domain, extract high-confidence unknowns from the target,
and tighten known/unknown boundaries with them (directly, augmented, or
via adversarially generated negatives).
"""

__version__ = "0.1.0"
