"""Exact top-k retrieval over item vectors plus accuracy and fairness metrics.

Retrieval is brute force (desk scale makes exactness affordable); ties break
toward the lower item id so rankings are deterministic.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from typing import Dict, Iterable, List, Sequence, Tuple

import numpy as np
from scipy.stats import rankdata

from .corpus import ItemCatalog
from .encoder import COSINE, Parameters, encode_item


@dataclass
class ItemIndex:
    """Dense matrix of item vectors, pre-normalized in cosine mode."""

    vectors: np.ndarray  # (num_items, d)
    normalized: bool

    @classmethod
    def from_parameters(cls, params: Parameters,
                        catalog: ItemCatalog) -> "ItemIndex":
        vecs = np.zeros((catalog.num_items, params.d))
        for item in catalog.items:
            vecs[item.id] = encode_item(params, item)[0]
        if params.similarity_mode == COSINE:
            norms = np.linalg.norm(vecs, axis=1)
            if np.any(norms == 0):
                raise ValueError("zero-norm item vector in cosine mode")
            vecs = vecs / norms[:, None]
            return cls(vectors=vecs, normalized=True)
        return cls(vectors=vecs, normalized=False)

    @property
    def num_items(self) -> int:
        return self.vectors.shape[0]


@dataclass
class RecommendationLog:
    """Per-user ranked lists, each free of duplicates."""

    lists: Dict[int, List[int]]

    def __post_init__(self):
        for user, ranked in self.lists.items():
            if len(set(ranked)) != len(ranked):
                raise ValueError(f"duplicate recommendation for user {user}")


def top_k(user_vec: np.ndarray, index: ItemIndex, k: int) -> List[int]:
    """Exact brute-force ranking by similarity, lowest item id first on ties."""
    if k > index.num_items:
        raise ValueError("k exceeds the catalog size")
    u = np.asarray(user_vec, dtype=np.float64)
    if index.normalized:
        norm = np.linalg.norm(u)
        if norm == 0:
            raise ValueError("zero-norm user vector in cosine mode")
        u = u / norm
    scores = index.vectors @ u
    order = np.lexsort((np.arange(index.num_items), -scores))
    return [int(i) for i in order[:k]]


def rank_of(ranked: Sequence[int], target: int) -> int:
    """1-based rank of target in the list, or 0 if absent."""
    for pos, item in enumerate(ranked, start=1):
        if item == target:
            return pos
    return 0


def hit_rate_at_k(ranked: Sequence[int], target: int, k: int) -> int:
    if k < 1:
        raise ValueError("k must be positive")
    r = rank_of(ranked[:k], target)
    return 1 if r else 0


def ndcg_at_k(ranked: Sequence[int], target: int, k: int) -> float:
    r = rank_of(ranked[:k], target)
    return 1.0 / math.log2(r + 1) if r else 0.0


def mrr_at_k(ranked: Sequence[int], target: int, k: int) -> float:
    r = rank_of(ranked[:k], target)
    return 1.0 / r if r else 0.0


def multi_hit_rate_at_k(ranked: Sequence[int], targets: Sequence[int],
                        k: int) -> float:
    """Fraction of the given targets present in the top k."""
    if not targets:
        raise ValueError("need at least one target")
    top = set(ranked[:k])
    return sum(1 for t in targets if t in top) / len(targets)


def aggregate_diversity(rec_log: RecommendationLog) -> int:
    """Number of distinct items recommended across the user population."""
    if not rec_log.lists:
        raise ValueError("empty recommendation log")
    seen = set()
    for ranked in rec_log.lists.values():
        seen.update(ranked)
    return len(seen)


def popularity_index(rec_log: RecommendationLog,
                     popularity_counts: np.ndarray) -> float:
    """Mean popularity percentile over all recommended slots.

    Percentiles are average ranks of the popularity counts scaled to (0, 1],
    so 1.0 is the single most popular item and the value only depends on the
    ordering of the counts.
    """
    counts = np.asarray(popularity_counts, dtype=np.float64)
    n = len(counts)
    percentile = rankdata(counts, method="average") / n
    slots = [percentile[i] for ranked in rec_log.lists.values() for i in ranked]
    if not slots:
        raise ValueError("empty recommendation log")
    return float(np.mean(slots))


def degree_histogram(rec_log: RecommendationLog, degrees: np.ndarray,
                     num_buckets: int) -> List[Tuple[float, float, int, int]]:
    """Bucket items by log(1 + degree) into equal-width bins over
    [0, log(1 + max degree)].

    Returns (bucket_low_degree, bucket_high_degree, item_count, rec_mass) per
    bucket, where item_count is the number of catalog items whose degree falls
    in the bucket and rec_mass is the number of recommendation slots landing
    there.
    """
    degrees = np.asarray(degrees, dtype=np.float64)
    if np.any(degrees < 0):
        raise ValueError("degrees must be non-negative")
    if num_buckets < 1:
        raise ValueError("need at least one bucket")
    z = np.log1p(degrees)
    z_max = float(z.max())
    width = z_max / num_buckets if z_max > 0 else 1.0
    bucket = np.minimum((z / width).astype(np.int64), num_buckets - 1)

    item_counts = np.bincount(bucket, minlength=num_buckets)
    rec_mass = np.zeros(num_buckets, dtype=np.int64)
    for ranked in rec_log.lists.values():
        for i in ranked:
            rec_mass[bucket[i]] += 1

    out = []
    for b in range(num_buckets):
        lo = math.expm1(b * width)
        hi = math.expm1((b + 1) * width)
        out.append((lo, hi, int(item_counts[b]), int(rec_mass[b])))
    return out


def write_histogram_csv(rows: Iterable[Tuple[float, float, int, int]], path,
                        header_comment: str = "") -> None:
    with open(path, "w", newline="", encoding="utf-8") as f:
        if header_comment:
            f.write(f"# {header_comment}\n")
        writer = csv.writer(f)
        writer.writerow(["bucket_low", "bucket_high", "item_count", "rec_mass"])
        for lo, hi, items, mass in rows:
            writer.writerow([f"{lo:.6f}", f"{hi:.6f}", items, mass])
