"""Finite-difference verification of every shipped loss-through-encoder
composition, across similarity modes and user-decay settings."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, List, Sequence, Tuple

import numpy as np

from .corpus import ClickSequence, Item, ItemCatalog
from .encoder import (COSINE, INNER_PRODUCT, CandidateRef, CandidateSet,
                      Gradients, Parameters, batch_backward, batch_forward,
                      encode_item)
from .losses import (CandidateLogits, contrastive_loss, full_softmax_loss,
                     ipw_loss, sampled_softmax_loss)
from .oracle import finite_difference_check

LOSS_NAMES = ("contrastive", "contrastive_cached", "sampled_softmax",
              "full_mle", "ipw")


@dataclass
class GradCase:
    loss: str
    similarity: str
    gamma: float
    max_rel_err: float


def _toy_catalog(num_items: int, num_cats: int) -> ItemCatalog:
    items = []
    for i in range(num_items):
        items.append(Item(id=i, features=((0, i), (1, i % num_cats))))
    return ItemCatalog(items=items,
                       feature_vocab_sizes=[num_items, num_cats],
                       token_to_id={f"i{i}": i for i in range(num_items)},
                       field_names=["cat"])


def _grads_to_flat(params: Parameters, grads: Gradients) -> np.ndarray:
    flat = np.zeros(sum(t.size for t in params.tables))
    offsets = np.cumsum([0] + [t.size for t in params.tables])
    for f_idx, row, g in grads.iter_rows():
        d = params.tables[f_idx].shape[1]
        start = offsets[f_idx] + row * d
        flat[start:start + d] += g
    return flat


def _mean_loss_and_dlogits(loss_name: str, logits: np.ndarray,
                           csets: Sequence[CandidateSet],
                           logqs, weights) -> Tuple[float, np.ndarray]:
    B = logits.shape[0]
    dlogits = np.zeros_like(logits)
    total = 0.0
    for b in range(B):
        pos = csets[b].pos_index
        if loss_name in ("contrastive", "contrastive_cached"):
            out = contrastive_loss(CandidateLogits(logits[b], pos))
            total += out.value
            dlogits[b] = out.dlogits / B
        elif loss_name == "sampled_softmax":
            out = sampled_softmax_loss(
                CandidateLogits(logits[b], pos, logq=logqs[b]))
            total += out.value
            dlogits[b] = out.dlogits / B
        elif loss_name == "full_mle":
            out = full_softmax_loss(logits[b], pos)
            total += out.value
            dlogits[b] = out.dlogits / B
        else:  # ipw
            out = full_softmax_loss(logits[b], pos)
            w = weights[b]
            total += w * out.value
            dlogits[b] = w * out.dlogits / B
    return total / B, dlogits


def run_gradient_suite(seed: int = 0, coords_per_case: int = 100,
                       eps: float = 1e-5, batch_size: int = 3,
                       num_items: int = 30, d: int = 4) -> List[GradCase]:
    """Check every (loss, similarity, gamma) combination against central
    finite differences on randomly chosen parameter coordinates."""
    master = np.random.default_rng(seed)
    catalog = _toy_catalog(num_items, num_cats=5)

    rows: List[GradCase] = []
    for similarity in (INNER_PRODUCT, COSINE):
        for gamma in (1.0, 0.7):
            for loss_name in LOSS_NAMES:
                rng = np.random.default_rng(master.integers(2 ** 31))
                # tau=0.25 keeps cosine logit spread under ~8 nats so no
                # softmax coordinate saturates below finite-difference noise
                params = Parameters.init_random(
                    catalog.feature_vocab_sizes, d, similarity_mode=similarity,
                    tau=0.25, gamma=gamma, scale=0.3, rng=rng)

                sequences = []
                targets = []
                for _ in range(batch_size):
                    n = int(rng.integers(2, 5))
                    prefix = tuple(int(i) for i in
                                   rng.integers(0, num_items, size=n))
                    sequences.append(ClickSequence(prefix))
                    targets.append(int(rng.integers(0, num_items)))

                csets, logqs, weights = _build_candidates(
                    loss_name, catalog, params, targets, rng)

                def value_fn(flat: np.ndarray, _p=params, _cs=csets,
                             _lq=logqs, _w=weights, _ln=loss_name) -> float:
                    probe = _p.copy()
                    probe.set_flat(flat)
                    logits, _ = batch_forward(probe, catalog, sequences, _cs)
                    value, _ = _mean_loss_and_dlogits(_ln, logits, _cs,
                                                      _lq, _w)
                    return value

                logits, tape = batch_forward(params, catalog, sequences, csets)
                _, dlogits = _mean_loss_and_dlogits(loss_name, logits, csets,
                                                    logqs, weights)
                grads = batch_backward(tape, dlogits)
                flat_grad = _grads_to_flat(params, grads)
                x0 = params.flat()
                coords = rng.choice(len(x0),
                                    size=min(coords_per_case, len(x0)),
                                    replace=False)
                err = finite_difference_check(value_fn, flat_grad, x0,
                                              [int(c) for c in coords],
                                              eps=eps)
                rows.append(GradCase(loss=loss_name, similarity=similarity,
                                     gamma=gamma, max_rel_err=err))
    return rows


def _build_candidates(loss_name: str, catalog: ItemCatalog,
                      params: Parameters, targets: Sequence[int],
                      rng: np.random.Generator):
    num_items = catalog.num_items
    B = len(targets)
    logqs = None
    weights = None

    if loss_name in ("full_mle", "ipw"):
        entries = tuple(CandidateRef(item=it) for it in catalog.items)
        csets = [CandidateSet(entries=entries, pos_index=t) for t in targets]
        if loss_name == "ipw":
            q = rng.uniform(0.02, 1.0, size=B)
            weights = [ipw_loss(1.0, float(qb), 0.01).weight for qb in q]
    elif loss_name == "sampled_softmax":
        csets, logqs = [], []
        base = np.full(num_items, 1.0 / num_items)
        for t in targets:
            negs = [int(n) for n in rng.integers(0, num_items, size=6)]
            entries = tuple(CandidateRef(item=catalog.items[i])
                            for i in [t] + negs)
            csets.append(CandidateSet(entries=entries, pos_index=0))
            logqs.append(np.log(base[[t] + negs]))
    else:
        # shared queue-style multiset: the batch positives, two live extras,
        # and (in the cached variant) three stop-gradient columns
        extra_live = [int(n) for n in rng.integers(0, num_items, size=2)]
        entries = [CandidateRef(item=catalog.items[t]) for t in targets]
        entries += [CandidateRef(item=catalog.items[i]) for i in extra_live]
        if loss_name == "contrastive_cached":
            for i in rng.integers(0, num_items, size=3):
                vec, _ = encode_item(params, catalog.items[int(i)])
                entries.append(CandidateRef(item=catalog.items[int(i)],
                                            vector=vec))
        entries = tuple(entries)
        csets = [CandidateSet(entries=entries, pos_index=b) for b in range(B)]
    return csets, logqs, weights
