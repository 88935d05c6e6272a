"""Two-tower embedding model with explicit forward tapes and exact manual
backward passes.

The item tower pools an item's feature-field embedding rows by mean; the user
tower is an exponentially-decayed weighted mean of the prefix's item vectors.
Similarity is either a raw inner product or temperature-scaled cosine. All
arithmetic is float64 and all gradients are computed analytically from the
tape, never by autodiff.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from .corpus import ClickSequence, Item, ItemCatalog

INNER_PRODUCT = "inner_product"
COSINE = "cosine"

_CKPT_MAGIC = b"DCGPARM1"

_COL_ITEM = 0
_COL_SEQ = 1
_COL_CACHED = 2


@dataclass
class Parameters:
    """One float64 embedding table per feature field, plus similarity config."""

    tables: List[np.ndarray]
    d: int
    similarity_mode: str = COSINE
    tau: float = 0.1
    gamma: float = 1.0

    def __post_init__(self):
        if self.similarity_mode not in (INNER_PRODUCT, COSINE):
            raise ValueError(f"unknown similarity mode {self.similarity_mode!r}")
        if self.tau <= 0:
            raise ValueError("tau must be positive")
        if not (0 < self.gamma <= 1.0):
            raise ValueError("gamma must be in (0, 1]")
        for t in self.tables:
            if t.shape[1] != self.d:
                raise ValueError("all tables must have d columns")

    @classmethod
    def init_random(cls, vocab_sizes: Sequence[int], d: int,
                    similarity_mode: str = COSINE, tau: float = 0.1,
                    gamma: float = 1.0, scale: float = 0.1,
                    rng: Optional[np.random.Generator] = None) -> "Parameters":
        rng = rng or np.random.default_rng(0)
        tables = [rng.normal(0.0, scale, size=(v, d)) for v in vocab_sizes]
        return cls(tables=tables, d=d, similarity_mode=similarity_mode,
                   tau=tau, gamma=gamma)

    @property
    def vocab_sizes(self) -> List[int]:
        return [t.shape[0] for t in self.tables]

    def copy(self) -> "Parameters":
        return Parameters(tables=[t.copy() for t in self.tables], d=self.d,
                          similarity_mode=self.similarity_mode, tau=self.tau,
                          gamma=self.gamma)

    # -- flat views used by the finite-difference checker ------------------

    def flat(self) -> np.ndarray:
        return np.concatenate([t.ravel() for t in self.tables])

    def set_flat(self, vec: np.ndarray) -> None:
        off = 0
        for t in self.tables:
            n = t.size
            t[...] = vec[off:off + n].reshape(t.shape)
            off += n

    # -- checkpoint i/o ------------------------------------------------------

    def save(self, path) -> None:
        """Versioned binary checkpoint: header then row-major little-endian
        float64 tables."""
        mode_code = 0 if self.similarity_mode == INNER_PRODUCT else 1
        with open(path, "wb") as f:
            f.write(_CKPT_MAGIC)
            f.write(struct.pack("<IIB", 1, self.d, mode_code))
            f.write(struct.pack("<dd", self.tau, self.gamma))
            f.write(struct.pack("<I", len(self.tables)))
            for t in self.tables:
                f.write(struct.pack("<I", t.shape[0]))
            for t in self.tables:
                f.write(np.ascontiguousarray(t, dtype="<f8").tobytes())

    @classmethod
    def load(cls, path) -> "Parameters":
        with open(path, "rb") as f:
            magic = f.read(8)
            if magic != _CKPT_MAGIC:
                raise ValueError("not a parameter checkpoint (bad magic)")
            version, d, mode_code = struct.unpack("<IIB", f.read(9))
            if version != 1:
                raise ValueError(f"unsupported checkpoint version {version}")
            tau, gamma = struct.unpack("<dd", f.read(16))
            (num_fields,) = struct.unpack("<I", f.read(4))
            vocab = [struct.unpack("<I", f.read(4))[0] for _ in range(num_fields)]
            tables = []
            for v in vocab:
                buf = f.read(v * d * 8)
                tables.append(np.frombuffer(buf, dtype="<f8").reshape(v, d).copy())
        mode = INNER_PRODUCT if mode_code == 0 else COSINE
        return cls(tables=tables, d=d, similarity_mode=mode, tau=tau, gamma=gamma)


class Gradients:
    """Sparse per-row gradient accumulators matching Parameters' shape.

    Rows never touched in a forward pass have no entry; rows whose accumulated
    gradient is exactly zero are dropped as well.
    """

    def __init__(self):
        self.fields: Dict[int, Dict[int, np.ndarray]] = {}

    def add_row(self, field_idx: int, row: int, vec: np.ndarray) -> None:
        rows = self.fields.setdefault(field_idx, {})
        if row in rows:
            rows[row] = rows[row] + vec
        else:
            rows[row] = vec.copy()

    def merge(self, other: "Gradients") -> None:
        for f_idx, rows in other.fields.items():
            for row, vec in rows.items():
                self.add_row(f_idx, row, vec)

    def scale(self, c: float) -> "Gradients":
        for rows in self.fields.values():
            for row in rows:
                rows[row] = rows[row] * c
        return self

    def is_empty(self) -> bool:
        return all(not rows for rows in self.fields.values())

    def row(self, field_idx: int, row: int) -> Optional[np.ndarray]:
        return self.fields.get(field_idx, {}).get(row)

    def iter_rows(self):
        """Deterministic (field, row, grad) iteration in sorted order."""
        for f_idx in sorted(self.fields):
            rows = self.fields[f_idx]
            for row in sorted(rows):
                yield f_idx, row, rows[row]

    def max_abs(self) -> float:
        m = 0.0
        for _, _, g in self.iter_rows():
            m = max(m, float(np.max(np.abs(g))))
        return m


@dataclass(frozen=True)
class CandidateRef:
    """One candidate column: a live item, a live sequence, or a cached vector.

    Cached vectors take part in the forward pass but receive no gradient.
    """

    item: Optional[Item] = None
    sequence: Optional[ClickSequence] = None
    vector: Optional[np.ndarray] = None

    @property
    def cached(self) -> bool:
        return self.vector is not None

    def __post_init__(self):
        live = (self.item is not None) + (self.sequence is not None)
        if self.vector is None and live != 1:
            raise ValueError("live candidate needs exactly one of item/sequence")
        if self.vector is not None and self.sequence is not None:
            raise ValueError("cached candidate cannot also be a live sequence")


@dataclass
class CandidateSet:
    """A multiset of candidates with exactly one position marked positive."""

    entries: Tuple[CandidateRef, ...]
    pos_index: int

    def __post_init__(self):
        if not (0 <= self.pos_index < len(self.entries)):
            raise ValueError("pos_index out of range")

    def __len__(self) -> int:
        return len(self.entries)


@dataclass
class Tape:
    """Activation record of one batch_forward, sufficient for exact backward."""

    similarity_mode: str
    tau: float
    # distinct live items encoded this pass
    item_slot: Dict[int, int]
    item_feats: List[Tuple[Tuple[int, int], ...]]
    item_vecs: np.ndarray  # (n_items_encoded, d) raw pooled vectors
    # all encoded sequences: batch rows first, then live candidate sequences
    seq_prefix_slots: List[np.ndarray]
    seq_weights: List[np.ndarray]
    seq_vecs: np.ndarray  # (n_seqs, d) raw decayed means
    batch_size: int
    # candidate layout: shared single set or one per instance
    shared: bool
    col_kinds: List[np.ndarray]  # per set: (C,) in {ITEM, SEQ, CACHED}
    col_idx: List[np.ndarray]  # per set: (C,) slot index, -1 for cached
    cached_vecs: List[np.ndarray]  # per set: (n_cached, d)
    cached_pos: List[np.ndarray]  # per set: column positions of cached entries
    logits: np.ndarray  # (B, C)

    @property
    def num_item_encodings(self) -> int:
        return self.item_vecs.shape[0]

    @property
    def num_sequence_encodings(self) -> int:
        return self.seq_vecs.shape[0]


def encode_item(params: Parameters, item: Item) -> Tuple[np.ndarray, Tuple]:
    """Mean of the item's feature-field embedding rows (raw, unnormalized)."""
    acc = np.zeros(params.d)
    for f_idx, feat_id in item.features:
        table = params.tables[f_idx]
        if not (0 <= feat_id < table.shape[0]):
            raise ValueError(
                f"feature id {feat_id} out of range for field {f_idx}"
            )
        acc += table[feat_id]
    return acc / len(item.features), item.features


def encode_user(params: Parameters, sequence: ClickSequence,
                catalog: ItemCatalog) -> Tuple[np.ndarray, Tuple]:
    """Exponentially-decayed weighted mean of the prefix's item vectors,
    weight proportional to gamma**age (most recent item has age 0)."""
    n = len(sequence.prefix)
    ages = np.arange(n - 1, -1, -1, dtype=np.float64)
    w = params.gamma ** ages
    w = w / w.sum()
    acc = np.zeros(params.d)
    for weight, item_id in zip(w, sequence.prefix):
        vec, _ = encode_item(params, catalog.items[item_id])
        acc += weight * vec
    return acc, (tuple(sequence.prefix), w)


def _decay_weights(gamma: float, n: int) -> np.ndarray:
    ages = np.arange(n - 1, -1, -1, dtype=np.float64)
    w = gamma ** ages
    return w / w.sum()


def similarity(u_vec: np.ndarray, i_vec: np.ndarray, mode: str,
               tau: float = 0.1) -> float:
    if u_vec.shape != i_vec.shape:
        raise ValueError("similarity requires equal dimensions")
    if mode == INNER_PRODUCT:
        return float(u_vec @ i_vec)
    if mode == COSINE:
        nu, ni = np.linalg.norm(u_vec), np.linalg.norm(i_vec)
        if nu == 0.0 or ni == 0.0:
            raise ValueError("cosine similarity undefined for zero vector")
        return float((u_vec @ i_vec) / (nu * ni * tau))
    raise ValueError(f"unknown similarity mode {mode!r}")


def _normalize_rows(mat: np.ndarray, what: str) -> Tuple[np.ndarray, np.ndarray]:
    norms = np.linalg.norm(mat, axis=1)
    if np.any(norms == 0.0):
        raise ValueError(f"zero-norm {what} vector in cosine mode")
    return mat / norms[:, None], norms


def batch_forward(params: Parameters, catalog: ItemCatalog,
                  sequences: Sequence[ClickSequence],
                  candidate_sets: Sequence[CandidateSet],
                  ) -> Tuple[np.ndarray, Tape]:
    """Compute logits[b][j] = phi(x_b, y_{b,j}) for every instance and
    candidate. Each distinct live item across prefixes and candidate sets is
    encoded exactly once and shared."""
    if len(sequences) != len(candidate_sets):
        raise ValueError("one candidate set per instance required")
    B = len(sequences)
    if B == 0:
        raise ValueError("empty batch")
    widths = {len(cs) for cs in candidate_sets}
    if len(widths) != 1:
        raise ValueError("all candidate sets must have equal size")

    shared = all(cs.entries is candidate_sets[0].entries for cs in candidate_sets)
    sets = [candidate_sets[0]] if shared else list(candidate_sets)

    # Collect distinct live items: prefix items plus live item candidates.
    needed = set()
    for seq in sequences:
        needed.update(seq.prefix)
    live_seq_cands: List[ClickSequence] = []
    for cs in sets:
        for ref in cs.entries:
            if ref.cached:
                continue
            if ref.item is not None:
                needed.add(ref.item.id)
            else:
                needed.update(ref.sequence.prefix)
                live_seq_cands.append(ref.sequence)

    item_ids = sorted(needed)
    item_slot = {iid: k for k, iid in enumerate(item_ids)}
    item_vecs = np.zeros((len(item_ids), params.d))
    item_feats: List[Tuple[Tuple[int, int], ...]] = []
    for k, iid in enumerate(item_ids):
        vec, feats = encode_item(params, catalog.items[iid])
        item_vecs[k] = vec
        item_feats.append(feats)

    # Encode all sequences: the batch rows first, then live candidate columns.
    all_seqs = list(sequences) + live_seq_cands
    seq_prefix_slots: List[np.ndarray] = []
    seq_weights: List[np.ndarray] = []
    seq_vecs = np.zeros((len(all_seqs), params.d))
    for s, seq in enumerate(all_seqs):
        slots = np.asarray([item_slot[i] for i in seq.prefix], dtype=np.int64)
        w = _decay_weights(params.gamma, len(seq.prefix))
        seq_prefix_slots.append(slots)
        seq_weights.append(w)
        seq_vecs[s] = w @ item_vecs[slots]

    # Candidate column layout per set.
    col_kinds: List[np.ndarray] = []
    col_idx: List[np.ndarray] = []
    cached_vecs: List[np.ndarray] = []
    cached_pos: List[np.ndarray] = []
    seq_cursor = B
    for cs in sets:
        kinds = np.zeros(len(cs), dtype=np.int64)
        idx = np.full(len(cs), -1, dtype=np.int64)
        c_vecs, c_pos = [], []
        for j, ref in enumerate(cs.entries):
            if ref.cached:
                kinds[j] = _COL_CACHED
                if ref.vector.shape != (params.d,):
                    raise ValueError("cached vector has wrong dimension")
                c_pos.append(j)
                c_vecs.append(ref.vector)
            elif ref.item is not None:
                kinds[j] = _COL_ITEM
                idx[j] = item_slot[ref.item.id]
            else:
                kinds[j] = _COL_SEQ
                idx[j] = seq_cursor
                seq_cursor += 1
        col_kinds.append(kinds)
        col_idx.append(idx)
        cached_vecs.append(np.asarray(c_vecs) if c_vecs
                           else np.zeros((0, params.d)))
        cached_pos.append(np.asarray(c_pos, dtype=np.int64))

    def column_matrix(set_i: int) -> np.ndarray:
        kinds, idx = col_kinds[set_i], col_idx[set_i]
        V = np.zeros((len(kinds), params.d))
        m_item = kinds == _COL_ITEM
        m_seq = kinds == _COL_SEQ
        V[m_item] = item_vecs[idx[m_item]]
        V[m_seq] = seq_vecs[idx[m_seq]]
        if len(cached_pos[set_i]):
            V[cached_pos[set_i]] = cached_vecs[set_i]
        return V

    U = seq_vecs[:B]
    if params.similarity_mode == COSINE:
        U_eff, _ = _normalize_rows(U, "user")
        U_eff = U_eff / params.tau
    else:
        U_eff = U

    if shared:
        V = column_matrix(0)
        V_eff = _normalize_rows(V, "candidate")[0] \
            if params.similarity_mode == COSINE else V
        logits = U_eff @ V_eff.T
    else:
        C = len(sets[0])
        logits = np.zeros((B, C))
        for b in range(B):
            V = column_matrix(b)
            V_eff = _normalize_rows(V, "candidate")[0] \
                if params.similarity_mode == COSINE else V
            logits[b] = U_eff[b] @ V_eff.T

    tape = Tape(similarity_mode=params.similarity_mode, tau=params.tau,
                item_slot=item_slot, item_feats=item_feats, item_vecs=item_vecs,
                seq_prefix_slots=seq_prefix_slots, seq_weights=seq_weights,
                seq_vecs=seq_vecs, batch_size=B, shared=shared,
                col_kinds=col_kinds, col_idx=col_idx, cached_vecs=cached_vecs,
                cached_pos=cached_pos, logits=logits)
    return logits, tape


def batch_backward(tape: Tape, dlogits: np.ndarray) -> Gradients:
    """Exact gradient of sum_{b,j} dlogits[b][j] * logits[b][j] with respect
    to Parameters. Cached candidate columns contribute nothing."""
    if dlogits.shape != tape.logits.shape:
        raise ValueError(
            f"dlogits shape {dlogits.shape} does not match logits "
            f"{tape.logits.shape}"
        )
    B = tape.batch_size
    d = tape.item_vecs.shape[1] if tape.item_vecs.size else tape.seq_vecs.shape[1]
    cosine = tape.similarity_mode == COSINE

    n_seqs = tape.seq_vecs.shape[0]
    g_seq_raw = np.zeros((n_seqs, d))
    g_item_raw = np.zeros_like(tape.item_vecs) if tape.item_vecs.size \
        else np.zeros((0, d))

    if cosine:
        u_norms = np.linalg.norm(tape.seq_vecs[:B], axis=1)
        u_hat = tape.seq_vecs[:B] / u_norms[:, None]
        s = tape.logits * tape.tau  # raw cosine values

    def col_matrix_and_norms(set_i: int):
        kinds, idx = tape.col_kinds[set_i], tape.col_idx[set_i]
        V = np.zeros((len(kinds), d))
        m_item = kinds == _COL_ITEM
        m_seq = kinds == _COL_SEQ
        V[m_item] = tape.item_vecs[idx[m_item]]
        V[m_seq] = tape.seq_vecs[idx[m_seq]]
        if len(tape.cached_pos[set_i]):
            V[tape.cached_pos[set_i]] = tape.cached_vecs[set_i]
        if cosine:
            norms = np.linalg.norm(V, axis=1)
            return V / norms[:, None], norms
        return V, None

    def scatter_columns(set_i: int, g_cols: np.ndarray) -> None:
        kinds, idx = tape.col_kinds[set_i], tape.col_idx[set_i]
        m_item = kinds == _COL_ITEM
        m_seq = kinds == _COL_SEQ
        if m_item.any():
            np.add.at(g_item_raw, idx[m_item], g_cols[m_item])
        if m_seq.any():
            np.add.at(g_seq_raw, idx[m_seq], g_cols[m_seq])

    if tape.shared:
        V_hat, v_norms = col_matrix_and_norms(0)
        if cosine:
            # d logit / d u = (v_hat - s * u_hat) / (tau * |u|)
            g_u = (dlogits @ V_hat
                   - ((dlogits * s).sum(axis=1, keepdims=True) * u_hat))
            g_u /= (tape.tau * u_norms)[:, None]
            g_cols = (dlogits.T @ u_hat
                      - ((dlogits * s).sum(axis=0)[:, None] * V_hat))
            g_cols /= (tape.tau * v_norms)[:, None]
        else:
            g_u = dlogits @ V_hat
            g_cols = dlogits.T @ tape.seq_vecs[:B]
        g_seq_raw[:B] += g_u
        scatter_columns(0, g_cols)
    else:
        for b in range(B):
            V_hat, v_norms = col_matrix_and_norms(b)
            db = dlogits[b]
            if cosine:
                sb = s[b]
                g_u = (db @ V_hat - (db @ sb) * u_hat[b]) / (tape.tau * u_norms[b])
                g_cols = (np.outer(db, u_hat[b]) - (db * sb)[:, None] * V_hat)
                g_cols /= (tape.tau * v_norms)[:, None]
            else:
                g_u = db @ V_hat
                g_cols = np.outer(db, tape.seq_vecs[b])
            g_seq_raw[b] += g_u
            scatter_columns(b, g_cols)

    # Sequences distribute their raw-vector gradient onto prefix item vectors.
    for slots, w, g in zip(tape.seq_prefix_slots, tape.seq_weights, g_seq_raw):
        if not np.any(g):
            continue
        np.add.at(g_item_raw, slots, w[:, None] * g)

    grads = Gradients()
    for k, feats in enumerate(tape.item_feats):
        g = g_item_raw[k]
        if not np.any(g):
            continue
        share = g / len(feats)
        for f_idx, feat_id in feats:
            grads.add_row(f_idx, feat_id, share)
    return grads
