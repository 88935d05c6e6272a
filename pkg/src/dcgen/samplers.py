"""Proposal distributions and the candidate-construction strategies: explicit
i.i.d. sampling, in-batch sharing, a FIFO queue of raw items, and a FIFO queue
of cached representations.

Queues are single-owner by design: in a data-parallel run each worker keeps a
private queue and never shares it.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import List, Optional, Sequence, Tuple

import numpy as np

from .corpus import Item
from .encoder import CandidateRef, CandidateSet

UNIFORM = "uniform"
UNIGRAM = "unigram"
POPULARITY_ALPHA = "popularity_alpha"


def _build_alias(probs: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """Vose alias tables; zero-probability entries are never drawn."""
    n = len(probs)
    prob = np.zeros(n)
    alias = np.zeros(n, dtype=np.int64)
    scaled = probs * n
    small = [i for i in range(n) if scaled[i] < 1.0]
    large = [i for i in range(n) if scaled[i] >= 1.0]
    scaled = scaled.copy()
    while small and large:
        s, l = small.pop(), large.pop()
        prob[s] = scaled[s]
        alias[s] = l
        scaled[l] = (scaled[l] + scaled[s]) - 1.0
        (small if scaled[l] < 1.0 else large).append(l)
    for i in large:
        prob[i] = 1.0
    for i in small:  # numerical leftovers
        prob[i] = 1.0
    return prob, alias


@dataclass
class Proposal:
    """A fixed distribution over the catalog with O(1) alias sampling."""

    kind: str
    probs: np.ndarray
    alpha: Optional[float] = None

    def __post_init__(self):
        self.probs = np.asarray(self.probs, dtype=np.float64)
        if np.any(self.probs < 0):
            raise ValueError("negative proposal probability")
        if abs(self.probs.sum() - 1.0) > 1e-12:
            raise ValueError("proposal probabilities must sum to 1")
        self._alias_prob, self._alias_idx = _build_alias(self.probs)

    @property
    def num_items(self) -> int:
        return len(self.probs)

    def sample(self, n: int, rng: np.random.Generator) -> np.ndarray:
        slots = rng.integers(0, self.num_items, size=n)
        u = rng.random(n)
        return np.where(u < self._alias_prob[slots], slots,
                        self._alias_idx[slots])

    def logq(self, items: Sequence[int]) -> np.ndarray:
        p = self.probs[np.asarray(items, dtype=np.int64)]
        if np.any(p <= 0):
            raise ValueError("log-proposal requested for zero-probability item")
        return np.log(p)


def make_proposal(kind: str, p_data: Optional[np.ndarray] = None,
                  alpha: Optional[float] = None,
                  num_items: Optional[int] = None) -> Proposal:
    if kind == UNIFORM:
        n = num_items if num_items is not None else len(p_data)
        return Proposal(kind=kind, probs=np.full(n, 1.0 / n))
    if p_data is None:
        raise ValueError(f"{kind} proposal needs an empirical distribution")
    p_data = np.asarray(p_data, dtype=np.float64)
    if kind == UNIGRAM:
        return Proposal(kind=kind, probs=p_data / p_data.sum())
    if kind == POPULARITY_ALPHA:
        if alpha is None:
            raise ValueError("popularity_alpha proposal needs alpha")
        powered = np.where(p_data > 0, p_data, 0.0) ** alpha
        total = powered.sum()
        if total <= 0:
            raise ValueError("all-zero distribution cannot be exponentiated")
        return Proposal(kind=kind, probs=powered / total, alpha=alpha)
    raise ValueError(f"unknown proposal kind {kind!r}")


def sample_negatives(proposal: Proposal, L: int,
                     rng: np.random.Generator) -> np.ndarray:
    if L < 1:
        raise ValueError("need at least one negative")
    return proposal.sample(L, rng)


def in_batch_candidates(batch_positives: Sequence[Item]) -> List[CandidateSet]:
    """Every instance scores the full multiset of the batch's positives; its
    own positive sits at its batch position."""
    if len(batch_positives) < 1:
        raise ValueError("batch must contain at least one positive")
    entries = tuple(CandidateRef(item=it) for it in batch_positives)
    return [CandidateSet(entries=entries, pos_index=b)
            for b in range(len(entries))]


class FifoQueue:
    """Fixed-capacity first-in-first-out store of positives, optionally with
    cached representations. Eviction is strictly oldest-first.

    Payloads are catalog Items for the next-click task; the sequence-level
    auxiliary task enqueues ClickSequence payloads instead.
    """

    def __init__(self, capacity: int, cached: bool):
        if capacity < 1:
            raise ValueError("queue capacity must be positive")
        self.capacity = capacity
        self.cached = cached
        self._payloads: List[object] = []
        self._vectors: List[Optional[np.ndarray]] = []
        self._seq: List[int] = []
        self._next_seq = 0
        self._last_batch: Tuple[int, int] = (0, 0)  # seq range of last enqueue

    def __len__(self) -> int:
        return len(self._payloads)

    @property
    def items(self) -> List[object]:
        return list(self._payloads)

    def enqueue_batch(self, batch: Sequence[object],
                      vectors: Optional[Sequence[np.ndarray]] = None) -> None:
        if self.cached:
            if vectors is None or len(vectors) != len(batch):
                raise ValueError(
                    "cached queue requires one representation per enqueued entry"
                )
        start = self._next_seq
        for k, payload in enumerate(batch):
            self._payloads.append(payload)
            self._vectors.append(
                np.asarray(vectors[k], dtype=np.float64) if self.cached else None
            )
            self._seq.append(self._next_seq)
            self._next_seq += 1
        self._last_batch = (start, self._next_seq)
        overflow = len(self._payloads) - self.capacity
        if overflow > 0:
            del self._payloads[:overflow]
            del self._vectors[:overflow]
            del self._seq[:overflow]


def enqueue_batch(queue: FifoQueue, batch: Sequence[object],
                  vectors: Optional[Sequence[np.ndarray]] = None) -> None:
    queue.enqueue_batch(batch, vectors)


def _live_ref(payload: object) -> CandidateRef:
    if isinstance(payload, Item):
        return CandidateRef(item=payload)
    return CandidateRef(sequence=payload)


def queue_candidates(queue: FifoQueue) -> Tuple[Tuple[CandidateRef, ...],
                                                List[int]]:
    """Candidate template from the queue's full content.

    Returns the shared entry tuple (queue order, oldest first) and, for each
    positive enqueued in the most recent batch, its current column position.
    Entries from the most recent batch are live (re-encoded and differentiated
    through); in cached mode, older entries are frozen vectors.
    """
    if len(queue) == 0:
        raise ValueError("queue is empty")
    lo, hi = queue._last_batch
    refs: List[CandidateRef] = []
    positions = {}
    for col, (payload, vec, seq) in enumerate(
            zip(queue._payloads, queue._vectors, queue._seq)):
        current = lo <= seq < hi
        if current:
            positions[seq] = col
        if queue.cached and not current:
            item = payload if isinstance(payload, Item) else None
            refs.append(CandidateRef(item=item, vector=vec))
        else:
            refs.append(_live_ref(payload))
    missing = (hi - lo) - len(positions)
    if missing > 0:
        raise ValueError(
            f"{missing} positives already evicted: queue capacity "
            f"{queue.capacity} is smaller than the enqueued batch"
        )
    ordered = [positions[s] for s in range(lo, hi)]
    return tuple(refs), ordered
