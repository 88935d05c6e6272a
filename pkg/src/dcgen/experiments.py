"""Reusable experiment drivers: the debiasing comparison on synthetic logged
worlds, the encoder-forward efficiency benchmark, and ground-truth-based
evaluation helpers."""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from .corpus import (ClickSequence, Dataset, GroundTruth, ItemCatalog,
                     WorldConfig, build_instances, make_world_catalog,
                     simulate_biased_logs)
from .encoder import Parameters, encode_user
from .retrieval_eval import (ItemIndex, RecommendationLog,
                             aggregate_diversity, degree_histogram,
                             hit_rate_at_k, popularity_index, top_k)
from .trainer import (CLREC_QUEUE, SAMPLED_SOFTMAX, StepContext, TrainConfig,
                      WorkerState, train, train_step)


def recommend_all_users(params: Parameters, catalog: ItemCatalog,
                        dataset: Dataset, k: int, max_prefix_len: int,
                        max_users: Optional[int] = None) -> RecommendationLog:
    """Top-k lists for each user from their full click history."""
    index = ItemIndex.from_parameters(params, catalog)
    lists: Dict[int, List[int]] = {}
    users = range(dataset.num_users if max_users is None
                  else min(max_users, dataset.num_users))
    for u in users:
        clicks = dataset.user_clicks[u]
        if not clicks:
            continue
        prefix = tuple(clicks[-max_prefix_len:])
        u_vec, _ = encode_user(params, ClickSequence(prefix), catalog)
        lists[u] = top_k(u_vec, index, min(k, catalog.num_items))
    return RecommendationLog(lists=lists)


def unbiased_hit_rate(params: Parameters, catalog: ItemCatalog,
                      dataset: Dataset, truth: GroundTruth, k: int,
                      max_prefix_len: int, draws_per_user: int,
                      seed: int) -> float:
    """HR@k against held-out clicks drawn from true relevance with uniform
    exposure, i.e. what users would click with no logging-policy filter."""
    rel = truth.relevance()
    rng = np.random.default_rng(seed)
    index = ItemIndex.from_parameters(params, catalog)
    k = min(k, catalog.num_items)
    hits, total = 0, 0
    for u in range(dataset.num_users):
        clicks = dataset.user_clicks[u]
        if not clicks:
            continue
        prefix = tuple(clicks[-max_prefix_len:])
        u_vec, _ = encode_user(params, ClickSequence(prefix), catalog)
        ranked = set(top_k(u_vec, index, k))
        targets = rng.choice(catalog.num_items, size=draws_per_user, p=rel[u])
        hits += sum(1 for t in targets if int(t) in ranked)
        total += draws_per_user
    return hits / total


@dataclass
class ArmResult:
    mode: str
    aggregate_diversity: int
    popularity_index: float
    unbiased_hr: float
    final_train_loss: float
    histogram: List[Tuple[float, float, int, int]]


@dataclass
class DebiasOutcome:
    seed: int
    clrec: ArmResult
    mle: ArmResult


def _train_arm(mode: str, base: TrainConfig, catalog: ItemCatalog,
               dataset: Dataset, seed: int) -> Tuple[Parameters, float]:
    cfg = replace(base, mode=mode, seed=seed)
    params, history = train(cfg, catalog, dataset)
    return params, history.epochs[-1].mean_loss


def run_debias_comparison(world: WorldConfig, base: TrainConfig,
                          seeds: Sequence[int], k: int = 50,
                          histogram_buckets: int = 10,
                          ) -> List[DebiasOutcome]:
    """Contrastive-queue training versus corrected sampled softmax on the same
    biased logs, scored with fairness metrics and exposure-free hit rate."""
    outcomes = []
    for seed in seeds:
        w = replace(world, seed=seed)
        dataset, truth = simulate_biased_logs(w)
        catalog = make_world_catalog(w)
        degrees = np.bincount([r.item for r in dataset.records],
                              minlength=catalog.num_items)

        arms = {}
        for mode in (CLREC_QUEUE, SAMPLED_SOFTMAX):
            params, final_loss = _train_arm(mode, base, catalog, dataset, seed)
            rec_log = recommend_all_users(params, catalog, dataset, k,
                                          base.max_prefix_len)
            arms[mode] = ArmResult(
                mode=mode,
                aggregate_diversity=aggregate_diversity(rec_log),
                popularity_index=popularity_index(rec_log, degrees),
                unbiased_hr=unbiased_hit_rate(params, catalog, dataset, truth,
                                              k, base.max_prefix_len,
                                              draws_per_user=1,
                                              seed=seed + 7919),
                final_train_loss=final_loss,
                histogram=degree_histogram(rec_log, degrees,
                                           histogram_buckets),
            )
        outcomes.append(DebiasOutcome(seed=seed, clrec=arms[CLREC_QUEUE],
                                      mle=arms[SAMPLED_SOFTMAX]))
    return outcomes


@dataclass
class BenchRow:
    mode: str
    steps: int
    item_forwards_per_step: float
    user_forwards_per_step: float
    bytes_per_step: float


@dataclass
class BenchReport:
    batch_size: int
    queue_capacity: int
    negatives: int
    rows: List[BenchRow] = field(default_factory=list)

    def per_step(self, mode: str) -> BenchRow:
        for row in self.rows:
            if row.mode == mode:
                return row
        raise KeyError(mode)

    @property
    def saved_fraction(self) -> float:
        cached = self.per_step("clrec_queue_cached").item_forwards_per_step
        explicit = self.per_step("sampled_softmax").item_forwards_per_step
        return 1.0 - cached / explicit


def run_efficiency_bench(modes: Sequence[str], batch_size: int = 256,
                         queue_capacity: int = 2560, negatives: int = 2560,
                         num_items: int = 8192, steps: int = 3, d: int = 16,
                         seed: int = 0) -> BenchReport:
    """Run a few optimizer-free steps of each mode over the same random
    instance stream and report encoder-forward counters per step.

    Counters are measured at steady state: every mode gets enough warm-up
    steps to fill a queue before counting. The explicit-sampling arm uses a
    uniform proposal over a catalog large enough that per-instance draws cover
    well past `negatives` distinct items, so the comparison is not
    support-limited.
    """
    from .corpus import ClickRecord
    from .samplers import FifoQueue, make_proposal
    from .trainer import (CLREC_QUEUE_CACHED, FULL_MLE, IPW, QUEUE_MODES,
                          EncoderSettings, StepCounters)
    from .encoder import CandidateRef

    rng = np.random.default_rng(seed)
    warmup = -(-queue_capacity // batch_size)
    # one long synthetic user stream; items uniform so every mode sees the
    # same positives
    n_pos = batch_size * (warmup + steps + 1)
    stream = rng.integers(0, num_items, size=n_pos + 1)
    records = [ClickRecord(user=0, item=int(it), timestamp=t)
               for t, it in enumerate(stream)]
    dataset = Dataset.from_records(records, num_users=1)
    world = WorldConfig(num_items=num_items, num_users=1, relevance_rank=1,
                        exposure_skew=0.0, slate_size=1,
                        interactions_per_user=1, seed=seed)
    catalog = make_world_catalog(world)
    instances = build_instances(dataset, max_prefix_len=4)

    report = BenchReport(batch_size=batch_size, queue_capacity=queue_capacity,
                         negatives=negatives)
    for mode in modes:
        cfg = TrainConfig(mode=mode, batch_size=batch_size,
                          queue_capacity=queue_capacity, negatives=negatives,
                          epochs=1, seed=seed, sampler_kind="uniform",
                          encoder=EncoderSettings(d=d))
        cfg.validate()
        params = Parameters.init_random(catalog.feature_vocab_sizes, d,
                                        rng=np.random.default_rng(seed))
        worker = WorkerState(rng=np.random.default_rng(seed + 1))
        if mode in QUEUE_MODES:
            worker.queue = FifoQueue(queue_capacity,
                                     cached=mode == CLREC_QUEUE_CACHED)
        ctx = StepContext(config=cfg, catalog=catalog, batch_total=batch_size)
        if mode == SAMPLED_SOFTMAX:
            ctx.proposal = make_proposal("uniform", num_items=num_items)
        if mode in (FULL_MLE, IPW):
            ctx.all_entries = tuple(CandidateRef(item=it)
                                    for it in catalog.items)
            ctx.propensity = np.full(num_items, 1.0 / num_items)
        mode_warmup = warmup if mode in QUEUE_MODES else 0
        for s in range(mode_warmup + steps):
            if s == mode_warmup:
                worker.counters = StepCounters()
            batch = instances[s * batch_size:(s + 1) * batch_size]
            ctx.batch_total = len(batch)
            train_step(params, batch, worker, ctx)
        report.rows.append(BenchRow(
            mode=mode, steps=steps,
            item_forwards_per_step=worker.counters.item_encoder_forwards / steps,
            user_forwards_per_step=worker.counters.user_encoder_forwards / steps,
            bytes_per_step=worker.counters.candidate_bytes_moved / steps))
    return report
