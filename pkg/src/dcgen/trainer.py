"""Optimization loop binding corpus, encoder, losses, and samplers.

Six training modes are supported: exact full-softmax MLE, sampled softmax with
log-proposal correction, contrastive training with in-batch negatives, with a
FIFO queue of raw items, with a FIFO queue of cached representations, and a
clipped inverse-propensity-weighted exact softmax.

Counters stand in for production throughput numbers: item/user encoder
forwards model per-step compute, and candidate_bytes_moved models the feature
bytes a worker must fetch from outside its shard (zero for queue modes, whose
negatives are worker-local by construction).
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, asdict
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from .corpus import (ClickSequence, Dataset, EvalCase, Instance, ItemCatalog,
                     build_instances, empirical_item_distribution,
                     leave_last_split)
from .encoder import (COSINE, INNER_PRODUCT, CandidateRef, CandidateSet,
                      Gradients, Parameters, batch_backward, batch_forward,
                      encode_item, encode_user)
from .losses import (CandidateLogits, contrastive_loss, full_softmax_loss,
                     ipw_loss, sampled_softmax_loss)
from .samplers import (FifoQueue, Proposal, in_batch_candidates, make_proposal,
                       queue_candidates)
from . import retrieval_eval

FULL_MLE = "full_mle"
SAMPLED_SOFTMAX = "sampled_softmax"
CLREC_INBATCH = "clrec_inbatch"
CLREC_QUEUE = "clrec_queue"
CLREC_QUEUE_CACHED = "clrec_queue_cached"
IPW = "ipw"

MODES = (FULL_MLE, SAMPLED_SOFTMAX, CLREC_INBATCH, CLREC_QUEUE,
         CLREC_QUEUE_CACHED, IPW)

QUEUE_MODES = (CLREC_QUEUE, CLREC_QUEUE_CACHED)

FEATURE_ID_BYTES = 8  # cost model: one 64-bit id per categorical feature


class TrainDiverged(RuntimeError):
    pass


@dataclass
class OptimizerConfig:
    kind: str = "adagrad"
    lr: float = 0.1
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


@dataclass
class U2UConfig:
    enabled: bool = False
    weight: float = 0.0
    min_prefix: int = 2
    min_suffix: int = 2
    queue_capacity: int = 0  # 0: reuse the main queue capacity


@dataclass
class EncoderSettings:
    d: int = 32
    similarity: str = COSINE
    tau: float = 0.1
    gamma: float = 1.0
    init_scale: float = 0.1


@dataclass
class TrainConfig:
    mode: str = CLREC_QUEUE_CACHED
    batch_size: int = 256
    queue_capacity: int = 2560  # default geometry: ten batches
    negatives: int = 100
    epochs: int = 5
    optimizer: OptimizerConfig = field(default_factory=OptimizerConfig)
    seed: int = 0
    u2u: U2UConfig = field(default_factory=U2UConfig)
    ipw_clip_floor: float = 0.01
    encoder: EncoderSettings = field(default_factory=EncoderSettings)
    sampler_kind: str = "unigram"
    sampler_alpha: float = 0.75
    max_prefix_len: int = 10
    eval_k: int = 50
    holdout: bool = True
    max_eval_users: int = 200

    def validate(self) -> None:
        if self.mode not in MODES:
            raise ValueError(f"unknown training mode {self.mode!r}")
        if self.batch_size < 1 or self.epochs < 1:
            raise ValueError("batch_size and epochs must be positive")
        if self.mode in QUEUE_MODES and self.batch_size > self.queue_capacity:
            raise ValueError("queue modes require batch_size <= queue_capacity")
        if self.mode == SAMPLED_SOFTMAX and self.negatives < 1:
            raise ValueError("sampled softmax needs at least one negative")
        if not (0 <= self.ipw_clip_floor <= 1):
            raise ValueError("ipw clip floor must lie in [0, 1]")
        if self.u2u.enabled and (self.u2u.min_prefix < 1
                                 or self.u2u.min_suffix < 1):
            raise ValueError("u2u split bounds must be positive")
        if self.optimizer.kind not in ("sgd", "adagrad", "adam"):
            raise ValueError(f"unknown optimizer {self.optimizer.kind!r}")


@dataclass
class StepCounters:
    item_encoder_forwards: int = 0
    user_encoder_forwards: int = 0
    candidate_bytes_moved: int = 0

    def snapshot(self) -> Dict[str, int]:
        return dict(item_encoder_forwards=self.item_encoder_forwards,
                    user_encoder_forwards=self.user_encoder_forwards,
                    candidate_bytes_moved=self.candidate_bytes_moved)

    def add(self, other: "StepCounters") -> None:
        self.item_encoder_forwards += other.item_encoder_forwards
        self.user_encoder_forwards += other.user_encoder_forwards
        self.candidate_bytes_moved += other.candidate_bytes_moved


@dataclass
class EpochStats:
    epoch: int
    mean_loss: float
    counters: Dict[str, int]
    val_hr: Optional[float] = None
    u2u_mean_loss: Optional[float] = None


@dataclass
class TrainHistory:
    epochs: List[EpochStats] = field(default_factory=list)

    def write_jsonl(self, path, meta: Optional[dict] = None) -> None:
        with open(path, "w", encoding="utf-8") as f:
            if meta:
                f.write(json.dumps({"type": "meta", **meta},
                                   sort_keys=True) + "\n")
            for e in self.epochs:
                f.write(json.dumps({"type": "epoch", **asdict(e)},
                                   sort_keys=True) + "\n")


class OptimizerState:
    """Sparse-friendly optimizer over the embedding tables; updates touch only
    rows that carry gradient. Row iteration is sorted, so accumulation order
    is deterministic."""

    def __init__(self, cfg: OptimizerConfig, params: Parameters):
        self.cfg = cfg
        if cfg.kind == "adagrad":
            self.accum = [np.zeros_like(t) for t in params.tables]
        elif cfg.kind == "adam":
            self.m = [np.zeros_like(t) for t in params.tables]
            self.v = [np.zeros_like(t) for t in params.tables]
            self.t = 0

    def apply(self, params: Parameters, grads: Gradients) -> None:
        cfg = self.cfg
        if cfg.kind == "adam":
            self.t += 1
            bc1 = 1.0 - cfg.beta1 ** self.t
            bc2 = 1.0 - cfg.beta2 ** self.t
        for f_idx, row, g in grads.iter_rows():
            table = params.tables[f_idx]
            if cfg.kind == "sgd":
                table[row] -= cfg.lr * g
            elif cfg.kind == "adagrad":
                acc = self.accum[f_idx]
                acc[row] += g * g
                table[row] -= cfg.lr * g / np.sqrt(acc[row] + cfg.eps)
            else:  # lazy adam: moments advance only on touched rows
                m, v = self.m[f_idx], self.v[f_idx]
                m[row] = cfg.beta1 * m[row] + (1 - cfg.beta1) * g
                v[row] = cfg.beta2 * v[row] + (1 - cfg.beta2) * g * g
                table[row] -= cfg.lr * (m[row] / bc1) / (
                    np.sqrt(v[row] / bc2) + cfg.eps)


def apply_gradients(opt_state: OptimizerState, params: Parameters,
                    grads: Gradients) -> None:
    opt_state.apply(params, grads)


@dataclass
class WorkerState:
    """Per-worker private state: queues are never shared across workers."""

    rng: np.random.Generator
    queue: Optional[FifoQueue] = None
    u2u_queue: Optional[FifoQueue] = None
    counters: StepCounters = field(default_factory=StepCounters)


@dataclass
class StepContext:
    config: TrainConfig
    catalog: ItemCatalog
    batch_total: int  # global batch size this step, for mean-loss scaling
    proposal: Optional[Proposal] = None
    propensity: Optional[np.ndarray] = None
    all_entries: Optional[Tuple[CandidateRef, ...]] = None
    catalog_feature_bytes: int = 0


def _item_bytes(catalog: ItemCatalog, item_ids) -> int:
    return FEATURE_ID_BYTES * sum(
        len(catalog.items[i].features) for i in item_ids)


def _contrastive_rows(logits: np.ndarray, pos: Sequence[int], scale: float,
                      ) -> Tuple[float, np.ndarray]:
    loss_sum = 0.0
    dlogits = np.zeros_like(logits)
    for b, p in enumerate(pos):
        out = contrastive_loss(CandidateLogits(logits[b], p))
        loss_sum += out.value
        dlogits[b] = out.dlogits * scale
    return loss_sum, dlogits


def train_step(params: Parameters, batch: Sequence[Instance],
               worker: WorkerState, ctx: StepContext,
               ) -> Tuple[float, Gradients]:
    """One optimization step on one worker's shard. Returns the summed
    (unaveraged) instance loss and gradients of the mean objective."""
    cfg = ctx.config
    catalog = ctx.catalog
    B = len(batch)
    scale = 1.0 / ctx.batch_total
    sequences = [inst.sequence for inst in batch]
    pos_items = [catalog.items[inst.target] for inst in batch]
    pos_ids = {inst.target for inst in batch}

    if cfg.mode in (FULL_MLE, IPW):
        entries = ctx.all_entries
        csets = [CandidateSet(entries=entries, pos_index=inst.target)
                 for inst in batch]
        logits, tape = batch_forward(params, catalog, sequences, csets)
        loss_sum = 0.0
        dlogits = np.zeros_like(logits)
        for b, inst in enumerate(batch):
            out = full_softmax_loss(logits[b], inst.target)
            if cfg.mode == IPW:
                w = ipw_loss(out.value, float(ctx.propensity[inst.target]),
                             cfg.ipw_clip_floor)
                loss_sum += w.value
                dlogits[b] = w.weight * out.dlogits * scale
            else:
                loss_sum += out.value
                dlogits[b] = out.dlogits * scale
        worker.counters.item_encoder_forwards += catalog.num_items
        worker.counters.candidate_bytes_moved += ctx.catalog_feature_bytes

    elif cfg.mode == SAMPLED_SOFTMAX:
        csets = []
        logqs = []
        drawn: set = set()
        for inst in batch:
            negs = ctx.proposal.sample(cfg.negatives, worker.rng)
            drawn.update(int(n) for n in negs)
            entries = tuple(
                [CandidateRef(item=catalog.items[inst.target])]
                + [CandidateRef(item=catalog.items[int(n)]) for n in negs])
            csets.append(CandidateSet(entries=entries, pos_index=0))
            logqs.append(ctx.proposal.logq(
                [inst.target] + [int(n) for n in negs]))
        logits, tape = batch_forward(params, catalog, sequences, csets)
        loss_sum = 0.0
        dlogits = np.zeros_like(logits)
        for b in range(B):
            out = sampled_softmax_loss(
                CandidateLogits(logits[b], 0, logq=logqs[b]))
            loss_sum += out.value
            dlogits[b] = out.dlogits * scale
        fetched = sorted(drawn - pos_ids)
        worker.counters.item_encoder_forwards += B + len(fetched)
        worker.counters.candidate_bytes_moved += _item_bytes(catalog, fetched)

    elif cfg.mode == CLREC_INBATCH:
        csets = in_batch_candidates(pos_items)
        logits, tape = batch_forward(params, catalog, sequences, csets)
        loss_sum, dlogits = _contrastive_rows(
            logits, [cs.pos_index for cs in csets], scale)
        worker.counters.item_encoder_forwards += B

    elif cfg.mode in QUEUE_MODES:
        if cfg.mode == CLREC_QUEUE_CACHED:
            vecs = [encode_item(params, it)[0] for it in pos_items]
            worker.queue.enqueue_batch(pos_items, vectors=vecs)
        else:
            worker.queue.enqueue_batch(pos_items)
        entries, positions = queue_candidates(worker.queue)
        csets = [CandidateSet(entries=entries, pos_index=positions[b])
                 for b in range(B)]
        logits, tape = batch_forward(params, catalog, sequences, csets)
        loss_sum, dlogits = _contrastive_rows(logits, positions, scale)
        if cfg.mode == CLREC_QUEUE:
            current_cols = set(positions)
            stale = {ref.item.id for col, ref in enumerate(entries)
                     if col not in current_cols} - pos_ids
            worker.counters.item_encoder_forwards += B + len(stale)
        else:
            worker.counters.item_encoder_forwards += B
        # queue entries are this worker's own past positives: no traffic

    else:  # pragma: no cover - validate() rejects unknown modes
        raise ValueError(f"unknown mode {cfg.mode!r}")

    worker.counters.user_encoder_forwards += B
    grads = batch_backward(tape, dlogits)
    return loss_sum, grads


def u2u_step(params: Parameters, cases: Sequence[Tuple[ClickSequence,
                                                       ClickSequence]],
             worker: WorkerState, ctx: StepContext, n_total: int,
             ) -> Tuple[float, Gradients]:
    """Sequence-to-sequence auxiliary step: the user encoder embeds both the
    prefix (context) and the suffix (positive target); negatives come from the
    worker's cached queue of previous suffix representations."""
    cfg = ctx.config
    catalog = ctx.catalog
    if worker.u2u_queue is None or not worker.u2u_queue.cached:
        raise ValueError("u2u requires a cached queue")
    prefixes = [c[0] for c in cases]
    suffixes = [c[1] for c in cases]
    suffix_vecs = [encode_user(params, s, catalog)[0] for s in suffixes]
    worker.u2u_queue.enqueue_batch(suffixes, vectors=suffix_vecs)
    entries, positions = queue_candidates(worker.u2u_queue)
    csets = [CandidateSet(entries=entries, pos_index=positions[b])
             for b in range(len(cases))]
    logits, tape = batch_forward(params, catalog, prefixes, csets)
    scale = cfg.u2u.weight / n_total
    loss_sum, dlogits = _contrastive_rows(logits, positions, scale)
    worker.counters.user_encoder_forwards += 2 * len(cases)
    grads = batch_backward(tape, dlogits)
    return loss_sum, grads


def _u2u_split_cases(user_clicks: Sequence[Sequence[int]], users: Sequence[int],
                     splits: Dict[int, int], max_prefix_len: int,
                     ) -> List[Tuple[ClickSequence, ClickSequence]]:
    cases = []
    for u in users:
        t = splits.get(u)
        if t is None:
            continue  # user too short to split
        clicks = user_clicks[u]
        prefix = tuple(clicks[:t])[-max_prefix_len:]
        suffix = tuple(clicks[t:])[:max_prefix_len]
        cases.append((ClickSequence(prefix), ClickSequence(suffix)))
    return cases


def _sample_u2u_splits(user_clicks: Sequence[Sequence[int]], u2u: U2UConfig,
                       rng: np.random.Generator) -> Dict[int, int]:
    splits: Dict[int, int] = {}
    for u, clicks in enumerate(user_clicks):
        lo, hi = u2u.min_prefix, len(clicks) - u2u.min_suffix
        if hi < lo:
            continue
        splits[u] = int(rng.integers(lo, hi + 1))
    return splits


def evaluate_hit_rate(params: Parameters, catalog: ItemCatalog,
                      cases: Sequence[EvalCase], k: int, max_prefix_len: int,
                      max_users: Optional[int] = None) -> float:
    """HR@k over held-out cases using exact full-catalog ranking."""
    if not cases:
        return float("nan")
    if max_users is not None:
        cases = cases[:max_users]
    index = retrieval_eval.ItemIndex.from_parameters(params, catalog)
    k = min(k, catalog.num_items)
    hits = 0
    for case in cases:
        prefix = case.prefix[-max_prefix_len:]
        u_vec, _ = encode_user(params, ClickSequence(prefix), catalog)
        ranked = retrieval_eval.top_k(u_vec, index, k)
        hits += retrieval_eval.hit_rate_at_k(ranked, case.target, k)
    return hits / len(cases)


def _shard(batch: List[Instance], num_workers: int) -> List[List[Instance]]:
    base, extra = divmod(len(batch), num_workers)
    shards = []
    start = 0
    for w in range(num_workers):
        size = base + (1 if w < extra else 0)
        shards.append(batch[start:start + size])
        start += size
    return shards


def run_workers(config: TrainConfig, catalog: ItemCatalog, dataset: Dataset,
                num_workers: int = 1) -> Tuple[Parameters, TrainHistory]:
    """Synchronous data parallelism: each step, workers process disjoint
    shards of the global batch with private queues; gradients are summed in
    worker order and a single update is applied."""
    config.validate()
    if num_workers < 1:
        raise ValueError("num_workers must be positive")

    ss = np.random.SeedSequence(config.seed)
    init_ss, shuffle_ss, u2u_ss, worker_ss = ss.spawn(4)
    enc = config.encoder
    params = Parameters.init_random(
        catalog.feature_vocab_sizes, enc.d, similarity_mode=enc.similarity,
        tau=enc.tau, gamma=enc.gamma, scale=enc.init_scale,
        rng=np.random.default_rng(init_ss))

    if config.holdout:
        split = leave_last_split(dataset)
        train_ds, valid = split.train, split.valid
    else:
        train_ds, valid = dataset, []
    instances = build_instances(train_ds, config.max_prefix_len)
    if not instances:
        raise ValueError("dataset yields no training instances")

    ctx = StepContext(config=config, catalog=catalog, batch_total=1)
    if config.mode in (SAMPLED_SOFTMAX, IPW):
        p_data = empirical_item_distribution(train_ds, catalog.num_items)
        if config.mode == SAMPLED_SOFTMAX:
            ctx.proposal = make_proposal(config.sampler_kind, p_data,
                                         alpha=config.sampler_alpha,
                                         num_items=catalog.num_items)
        else:
            ctx.propensity = p_data
    if config.mode in (FULL_MLE, IPW):
        ctx.all_entries = tuple(CandidateRef(item=it) for it in catalog.items)
        ctx.catalog_feature_bytes = _item_bytes(
            catalog, range(catalog.num_items))

    u2u_active = config.u2u.enabled and config.u2u.weight != 0.0
    workers = []
    for child in worker_ss.spawn(num_workers):
        w = WorkerState(rng=np.random.default_rng(child))
        if config.mode in QUEUE_MODES:
            w.queue = FifoQueue(config.queue_capacity,
                                cached=config.mode == CLREC_QUEUE_CACHED)
        if u2u_active:
            cap = config.u2u.queue_capacity or config.queue_capacity
            w.u2u_queue = FifoQueue(cap, cached=True)
        workers.append(w)

    opt = OptimizerState(config.optimizer, params)
    shuffle_rng = np.random.default_rng(shuffle_ss)
    u2u_rng = np.random.default_rng(u2u_ss)
    history = TrainHistory()
    step = 0

    for epoch in range(config.epochs):
        order = shuffle_rng.permutation(len(instances))
        epoch_splits = (_sample_u2u_splits(train_ds.user_clicks, config.u2u,
                                           u2u_rng) if u2u_active else {})
        loss_total, n_seen = 0.0, 0
        u2u_loss_total, u2u_seen = 0.0, 0

        for start in range(0, len(instances), config.batch_size):
            batch = [instances[i] for i in order[start:start + config.batch_size]]
            ctx.batch_total = len(batch)
            shards = _shard(batch, num_workers)
            grads = Gradients()
            step_loss = 0.0
            for w, shard in zip(workers, shards):
                if not shard:
                    continue
                loss_sum, g = train_step(params, shard, w, ctx)
                step_loss += loss_sum
                grads.merge(g)
            loss_total += step_loss
            n_seen += len(batch)

            if u2u_active:
                worker_cases = []
                for w, shard in zip(workers, shards):
                    users = list(dict.fromkeys(i.user for i in shard))
                    worker_cases.append(_u2u_split_cases(
                        train_ds.user_clicks, users, epoch_splits,
                        config.max_prefix_len))
                n_total = sum(len(c) for c in worker_cases)
                if n_total > 0:
                    for w, cases in zip(workers, worker_cases):
                        if not cases:
                            continue
                        aux_sum, aux_g = u2u_step(params, cases, w, ctx,
                                                  n_total)
                        u2u_loss_total += aux_sum
                        grads.merge(aux_g)
                    u2u_seen += n_total

            if not np.isfinite(step_loss):
                raise TrainDiverged(
                    f"non-finite loss at step {step} in mode {config.mode}")
            opt.apply(params, grads)
            step += 1

        counters = StepCounters()
        for w in workers:
            counters.add(w.counters)
        val_hr = None
        if valid:
            val_hr = evaluate_hit_rate(params, catalog, valid, config.eval_k,
                                       config.max_prefix_len,
                                       config.max_eval_users)
        history.epochs.append(EpochStats(
            epoch=epoch, mean_loss=loss_total / n_seen,
            counters=counters.snapshot(), val_hr=val_hr,
            u2u_mean_loss=(u2u_loss_total / u2u_seen) if u2u_seen else None))
    return params, history


def train(config: TrainConfig, catalog: ItemCatalog,
          dataset: Dataset) -> Tuple[Parameters, TrainHistory]:
    """Single-worker training; identical to run_workers with one worker."""
    return run_workers(config, catalog, dataset, num_workers=1)
