"""Shared fixtures that are plain functions rather than pytest fixtures."""

from fractions import Fraction

import numpy as np

from actionsense.backbone import FeatureVector
from actionsense.dataset import LabelVocabulary
from actionsense.mlp import HeadConfig, HeadModel

OFFSET = 50.0


def passthrough_model(k=3, vocabulary=None, backbone="stub"):
    """A head whose softmax output equals softmax(input - OFFSET).

    All layers are identities with zero bias; inputs are kept positive by
    OFFSET so the ReLUs pass them unchanged.
    """
    eye = np.eye(k)
    cfg = HeadConfig(k, (k, k, k, k), k, 0.0)
    return HeadModel(cfg, [eye] * 5, [np.zeros(k)] * 5, vocabulary or LabelVocabulary(), None, backbone)


def frames_for(probs, video_id="v", backbone="stub"):
    """Feature vectors that make :func:`passthrough_model` emit ``probs`` row by row."""
    logits = np.log(np.asarray(probs, dtype=np.float64)) + OFFSET
    return [FeatureVector(row, video_id, 30 * i, None, "test", backbone) for i, row in enumerate(logits)]


def vote_oracle(probs):
    """Count-then-mean majority vote written from the definition, using exact sums."""
    rows = [list(r) for r in np.asarray(probs, dtype=np.float64)]
    k = len(rows[0])
    counts = [0] * k
    for row in rows:
        best = 0
        for c in range(1, k):
            if row[c] > row[best]:
                best = c
        counts[best] += 1
    top = max(counts)
    tied = [c for c in range(k) if counts[c] == top]
    if len(tied) == 1:
        return tied[0], counts, False
    sums = {c: sum(Fraction(r[c]) for r in rows) for c in tied}
    high = max(sums.values())
    return min(c for c in tied if sums[c] == high), counts, True
