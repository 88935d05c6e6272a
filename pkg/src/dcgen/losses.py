"""Training objectives: full softmax cross-entropy, sampled softmax with
log-proposal correction, the uncorrected contrastive loss, and the clipped
inverse-propensity-weighted loss.

Every softmax-family loss uses log-sum-exp with max subtraction and a fixed
summation order, so values reproduce bit-exactly for identical inputs.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple, Optional

import numpy as np


@dataclass
class CandidateLogits:
    """Similarity scores of one positive and L negatives for one instance.

    ``logq`` holds the natural log of each candidate's proposal probability
    and must be present exactly when the loss requires the correction.
    """

    logits: np.ndarray
    pos_index: int
    logq: Optional[np.ndarray] = None

    def __post_init__(self):
        self.logits = np.asarray(self.logits, dtype=np.float64)
        if self.logits.ndim != 1 or len(self.logits) == 0:
            raise ValueError("logits must be a non-empty vector")
        if not np.all(np.isfinite(self.logits)):
            raise ValueError("non-finite logit")
        if not (0 <= self.pos_index < len(self.logits)):
            raise ValueError("pos_index out of range")
        if self.logq is not None:
            self.logq = np.asarray(self.logq, dtype=np.float64)
            if self.logq.shape != self.logits.shape:
                raise ValueError("logq must match logits length")
            if not np.all(np.isfinite(self.logq)):
                raise ValueError("non-finite logq")


@dataclass
class LossOutput:
    value: float
    dlogits: np.ndarray


class IpwLoss(NamedTuple):
    value: float
    weight: float


def _log_softmax(logits: np.ndarray) -> np.ndarray:
    m = np.max(logits)
    shifted = logits - m
    return shifted - np.log(np.sum(np.exp(shifted)))


def full_softmax_loss(all_logits: np.ndarray, target: int) -> LossOutput:
    """Exact cross-entropy against the full catalog (feasible at desk scale)."""
    all_logits = np.asarray(all_logits, dtype=np.float64)
    if not np.all(np.isfinite(all_logits)):
        raise ValueError("non-finite logit")
    if not (0 <= target < len(all_logits)):
        raise ValueError("target index out of range")
    log_p = _log_softmax(all_logits)
    dlogits = np.exp(log_p)
    dlogits[target] -= 1.0
    return LossOutput(value=float(-log_p[target]), dlogits=dlogits)


def sampled_softmax_loss(c: CandidateLogits) -> LossOutput:
    """Softmax cross-entropy on proposal-corrected logits (logit - log q)."""
    if c.logq is None:
        raise ValueError("sampled softmax requires logq")
    corrected = c.logits - c.logq
    log_p = _log_softmax(corrected)
    dlogits = np.exp(log_p)
    dlogits[c.pos_index] -= 1.0
    return LossOutput(value=float(-log_p[c.pos_index]), dlogits=dlogits)


def contrastive_loss(c: CandidateLogits) -> LossOutput:
    """Softmax cross-entropy on raw logits; the missing correction term is
    what makes this objective converge to the propensity-ratio target rather
    than the data distribution."""
    if c.logq is not None:
        raise ValueError("contrastive loss takes no logq")
    log_p = _log_softmax(c.logits)
    dlogits = np.exp(log_p)
    dlogits[c.pos_index] -= 1.0
    return LossOutput(value=float(-log_p[c.pos_index]), dlogits=dlogits)


def ipw_loss(neg_log_prob: float, q: float, clip_floor: float) -> IpwLoss:
    """Inverse-propensity weight with clipping: w = 1 / max(q, clip_floor).

    clip_floor = 0 disables clipping; small propensities are otherwise lifted
    to the floor to bound the weight.
    """
    if q <= 0 or q > 1:
        raise ValueError("propensity must lie in (0, 1]")
    if not (0 <= clip_floor <= 1):
        raise ValueError("clip_floor must lie in [0, 1]")
    if neg_log_prob < 0:
        raise ValueError("neg_log_prob must be non-negative")
    weight = 1.0 / max(q, clip_floor)
    return IpwLoss(value=weight * neg_log_prob, weight=weight)
