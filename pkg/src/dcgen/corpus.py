"""Click-log corpus: catalog/interaction loading, training-instance
construction, empirical statistics, and a synthetic exposure-biased world
generator with known ground truth.

All operations here are pure functions of their inputs (plus an explicit
seed where randomness is involved), so values are safe to share across
threads once constructed.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Iterable, List, Optional, Tuple

import numpy as np


class DataFormatError(ValueError):
    """An input file violates the catalog or interaction format."""


# Sharpness of the synthetic ground-truth preferences: latent inner products
# are unit-variance, so this controls how peaked per-user relevance is.
RELEVANCE_SCALE = 3.0

ID_FIELD = 0  # feature field 0 is always the item's own identifier


@dataclass(frozen=True)
class Item:
    """A catalog item with categorical features as (field_index, feature_id)."""

    id: int
    features: Tuple[Tuple[int, int], ...]

    def __post_init__(self):
        if not self.features:
            raise ValueError("item must carry at least its id feature")
        if list(self.features) != sorted(self.features):
            raise ValueError("item features must be sorted by field index")


@dataclass
class ItemCatalog:
    items: List[Item]
    feature_vocab_sizes: List[int]  # index 0 is the id field (= num_items)
    token_to_id: dict
    field_names: List[str]  # names of fields 1.. as seen in the source file

    @property
    def num_items(self) -> int:
        return len(self.items)

    def __len__(self) -> int:
        return len(self.items)


@dataclass(frozen=True)
class ClickRecord:
    user: int
    item: int
    timestamp: int


@dataclass(frozen=True)
class ClickSequence:
    """An ordered click prefix, most recent item last."""

    prefix: Tuple[int, ...]

    def __post_init__(self):
        if len(self.prefix) == 0:
            raise ValueError("click sequence must be non-empty")

    def __len__(self) -> int:
        return len(self.prefix)


@dataclass(frozen=True)
class Instance:
    """One next-click training example: predict `target` after `sequence`."""

    user: int
    sequence: ClickSequence
    target: int


@dataclass
class Dataset:
    records: List[ClickRecord]
    num_users: int
    user_clicks: List[List[int]] = field(default_factory=list)

    @classmethod
    def from_records(cls, records: List[ClickRecord], num_users: int) -> "Dataset":
        if num_users < 1:
            raise ValueError("dataset needs at least one user")
        clicks: List[List[int]] = [[] for _ in range(num_users)]
        last_ts = [None] * num_users
        ordered = sorted(records, key=lambda r: (r.user, r.timestamp))
        for r in ordered:
            if r.user < 0 or r.user >= num_users:
                raise ValueError(f"user id {r.user} out of range")
            if last_ts[r.user] is not None and r.timestamp <= last_ts[r.user]:
                raise DataFormatError(
                    f"non-monotone timestamps within user {r.user}"
                )
            last_ts[r.user] = r.timestamp
            clicks[r.user].append(r.item)
        return cls(records=ordered, num_users=num_users, user_clicks=clicks)

    @property
    def user_lengths(self) -> List[int]:
        return [len(c) for c in self.user_clicks]

    def __len__(self) -> int:
        return len(self.records)


@dataclass(frozen=True)
class EvalCase:
    """A held-out click: full preceding history plus the target item."""

    user: int
    prefix: Tuple[int, ...]
    target: int


@dataclass
class Split:
    train: Dataset
    valid: List[EvalCase]
    test: List[EvalCase]
    num_dropped_users: int

    def __iter__(self):
        return iter((self.train, self.valid, self.test))


@dataclass(frozen=True)
class WorldConfig:
    """Configuration of the synthetic logged world.

    The logging policy exposes slates proportional to popularity**exposure_skew,
    where popularity starts Zipf-shaped and is incremented by realized clicks,
    which manufactures a rich-get-richer feedback loop.
    """

    num_items: int
    num_users: int
    relevance_rank: int
    exposure_skew: float
    slate_size: int
    interactions_per_user: int
    seed: int
    num_categories: int = 0  # extra categorical feature field; 0 = id-only items

    def __post_init__(self):
        if self.num_items < 1 or self.num_users < 1:
            raise ValueError("num_items and num_users must be positive")
        if self.relevance_rank < 1:
            raise ValueError("relevance_rank must be positive")
        if self.exposure_skew < 0:
            raise ValueError("exposure_skew must be >= 0")
        if not (1 <= self.slate_size <= self.num_items):
            raise ValueError("slate_size must be in [1, num_items]")
        if self.interactions_per_user < 1:
            raise ValueError("interactions_per_user must be positive")
        if self.num_categories < 0:
            raise ValueError("num_categories must be >= 0")


@dataclass
class GroundTruth:
    """Latent factors and exposure counts of a simulated world (eval-only)."""

    user_factors: np.ndarray  # (num_users, rank)
    item_factors: np.ndarray  # (num_items, rank)
    relevance_scale: float
    exposure_counts: np.ndarray  # (num_items,)
    click_counts: np.ndarray  # (num_items,)

    def relevance(self) -> np.ndarray:
        """Per-user true click probabilities over the full catalog."""
        scores = self.relevance_scale * (self.user_factors @ self.item_factors.T)
        scores -= scores.max(axis=1, keepdims=True)
        p = np.exp(scores)
        p /= p.sum(axis=1, keepdims=True)
        return p

    def write_jsonl(self, path, meta: Optional[dict] = None) -> None:
        with open(path, "w", encoding="utf-8") as f:
            head = {"type": "meta", "relevance_scale": self.relevance_scale}
            if meta:
                head.update(meta)
            f.write(json.dumps(head, sort_keys=True) + "\n")
            f.write(json.dumps({"type": "exposure_counts",
                                "counts": self.exposure_counts.tolist()}) + "\n")
            f.write(json.dumps({"type": "click_counts",
                                "counts": self.click_counts.tolist()}) + "\n")
            for u, vec in enumerate(self.user_factors):
                f.write(json.dumps({"type": "user", "id": u,
                                    "factors": vec.tolist()}) + "\n")
            for i, vec in enumerate(self.item_factors):
                f.write(json.dumps({"type": "item", "id": i,
                                    "factors": vec.tolist()}) + "\n")

    @classmethod
    def read_jsonl(cls, path) -> "GroundTruth":
        users, items = {}, {}
        scale, exposure, clicks = None, None, None
        with open(path, encoding="utf-8") as f:
            for line in f:
                rec = json.loads(line)
                kind = rec["type"]
                if kind == "meta":
                    scale = rec["relevance_scale"]
                elif kind == "exposure_counts":
                    exposure = np.asarray(rec["counts"], dtype=np.float64)
                elif kind == "click_counts":
                    clicks = np.asarray(rec["counts"], dtype=np.float64)
                elif kind == "user":
                    users[rec["id"]] = rec["factors"]
                elif kind == "item":
                    items[rec["id"]] = rec["factors"]
        if scale is None or exposure is None or not users or not items:
            raise DataFormatError("incomplete ground-truth sidecar")
        uf = np.asarray([users[u] for u in sorted(users)], dtype=np.float64)
        itf = np.asarray([items[i] for i in sorted(items)], dtype=np.float64)
        return cls(uf, itf, float(scale), exposure,
                   clicks if clicks is not None else np.zeros(len(itf)))


# ---------------------------------------------------------------------------
# loading


def _parse_feature_pairs(chunk: str, line_no: int) -> List[Tuple[str, str]]:
    pairs = []
    if chunk == "":
        return pairs
    for part in chunk.split(";"):
        if "=" not in part:
            raise DataFormatError(
                f"line {line_no}: malformed feature '{part}' (expected field=value)"
            )
        name, value = part.split("=", 1)
        if not name or not value:
            raise DataFormatError(
                f"line {line_no}: malformed feature '{part}' (empty field or value)"
            )
        pairs.append((name, value))
    return pairs


def load_catalog(path) -> ItemCatalog:
    """Load a catalog TSV: ``item_id<TAB>field=value(;field=value)*`` per line.

    Dense ItemIds are assigned in file order. Lines starting with '#' are
    skipped. The feature-pair column may be absent for id-only items.
    """
    raw: List[Tuple[str, List[Tuple[str, str]]]] = []
    token_to_id: dict = {}
    with open(path, encoding="utf-8") as f:
        for line_no, line in enumerate(f, start=1):
            line = line.rstrip("\n")
            if not line.strip() or line.lstrip().startswith("#"):
                continue
            cols = line.split("\t")
            if len(cols) > 2 or not cols[0]:
                raise DataFormatError(f"line {line_no}: malformed catalog line")
            token = cols[0]
            if token in token_to_id:
                raise DataFormatError(
                    f"line {line_no}: duplicate item id '{token}'"
                )
            token_to_id[token] = len(raw)
            pairs = _parse_feature_pairs(cols[1], line_no) if len(cols) == 2 else []
            raw.append((token, pairs))
    if not raw:
        raise DataFormatError("empty catalog")

    field_names: List[str] = []
    field_index: dict = {}
    value_ids: List[dict] = []
    for _, pairs in raw:
        for name, _ in pairs:
            if name not in field_index:
                field_index[name] = len(field_names) + 1  # 0 is the id field
                field_names.append(name)
                value_ids.append({})

    items: List[Item] = []
    for item_id, (_, pairs) in enumerate(raw):
        feats = [(ID_FIELD, item_id)]
        for name, value in pairs:
            f_idx = field_index[name]
            vocab = value_ids[f_idx - 1]
            if value not in vocab:
                vocab[value] = len(vocab)
            feats.append((f_idx, vocab[value]))
        items.append(Item(id=item_id, features=tuple(sorted(feats))))

    vocab_sizes = [len(items)] + [len(v) for v in value_ids]
    return ItemCatalog(items=items, feature_vocab_sizes=vocab_sizes,
                       token_to_id=token_to_id, field_names=field_names)


def write_catalog(catalog: ItemCatalog, path, header: Optional[str] = None) -> None:
    id_to_token = {v: k for k, v in catalog.token_to_id.items()}
    with open(path, "w", encoding="utf-8") as f:
        if header:
            f.write(f"# {header}\n")
        for item in catalog.items:
            extras = []
            for f_idx, feat_id in item.features:
                if f_idx == ID_FIELD:
                    continue
                name = catalog.field_names[f_idx - 1]
                extras.append(f"{name}=v{feat_id}")
            token = id_to_token.get(item.id, f"i{item.id}")
            if extras:
                f.write(f"{token}\t{';'.join(extras)}\n")
            else:
                f.write(f"{token}\n")


def load_interactions(path, catalog: ItemCatalog) -> Dataset:
    """Load an interactions TSV: ``user_id<TAB>item_id<TAB>timestamp``.

    Rows may be in any order on disk; the loader groups by user and sorts by
    timestamp. Ties within a user are rejected.
    """
    user_ids: dict = {}
    per_user: List[List[Tuple[int, int]]] = []
    with open(path, encoding="utf-8") as f:
        for line_no, line in enumerate(f, start=1):
            line = line.rstrip("\n")
            if not line.strip() or line.lstrip().startswith("#"):
                continue
            cols = line.split("\t")
            if len(cols) != 3:
                raise DataFormatError(f"line {line_no}: expected 3 columns")
            u_tok, i_tok, ts_tok = cols
            if i_tok not in catalog.token_to_id:
                raise DataFormatError(
                    f"line {line_no}: unknown item id '{i_tok}'"
                )
            try:
                ts = int(ts_tok)
            except ValueError:
                raise DataFormatError(
                    f"line {line_no}: timestamp '{ts_tok}' is not an integer"
                ) from None
            if u_tok not in user_ids:
                user_ids[u_tok] = len(per_user)
                per_user.append([])
            per_user[user_ids[u_tok]].append((ts, catalog.token_to_id[i_tok]))
    if not per_user:
        raise DataFormatError("empty interactions file")

    token_of = {v: k for k, v in user_ids.items()}
    records: List[ClickRecord] = []
    for u, rows in enumerate(per_user):
        rows.sort(key=lambda r: r[0])
        for (ts_a, _), (ts_b, _) in zip(rows, rows[1:]):
            if ts_b == ts_a:
                raise DataFormatError(
                    f"tied timestamps within user '{token_of[u]}'"
                )
        records.extend(ClickRecord(user=u, item=i, timestamp=ts) for ts, i in rows)
    return Dataset.from_records(records, num_users=len(per_user))


def write_interactions(dataset: Dataset, path, header: Optional[str] = None) -> None:
    with open(path, "w", encoding="utf-8") as f:
        if header:
            f.write(f"# {header}\n")
        for r in dataset.records:
            f.write(f"u{r.user}\ti{r.item}\t{r.timestamp}\n")


# ---------------------------------------------------------------------------
# instances and statistics


def build_instances(dataset: Dataset, max_prefix_len: int) -> List[Instance]:
    """One instance per click with at least one preceding click; the prefix is
    truncated to the most recent `max_prefix_len` items."""
    if max_prefix_len < 1:
        raise ValueError("max_prefix_len must be >= 1")
    out: List[Instance] = []
    for user, clicks in enumerate(dataset.user_clicks):
        for t in range(1, len(clicks)):
            prefix = tuple(clicks[max(0, t - max_prefix_len):t])
            out.append(Instance(user=user, sequence=ClickSequence(prefix),
                                target=clicks[t]))
    return out


def empirical_item_distribution(dataset: Dataset, num_items: int) -> np.ndarray:
    """Click frequencies over the catalog; unseen items get probability 0."""
    if len(dataset.records) == 0:
        raise ValueError("empty dataset has no empirical distribution")
    counts = np.bincount([r.item for r in dataset.records], minlength=num_items)
    if len(counts) > num_items:
        raise ValueError("dataset references items beyond the catalog")
    return counts.astype(np.float64) / len(dataset.records)


def leave_last_split(dataset: Dataset) -> Split:
    """Per-user leave-last-out split. Users with fewer than 3 clicks are
    dropped; the drop count is reported on the result."""
    kept_users = [u for u, c in enumerate(dataset.user_clicks) if len(c) >= 3]
    dropped = dataset.num_users - len(kept_users)
    remap = {u: i for i, u in enumerate(kept_users)}

    records: List[ClickRecord] = []
    by_user = {u: [] for u in kept_users}
    for r in dataset.records:
        if r.user in remap:
            by_user[r.user].append(r)
    valid: List[EvalCase] = []
    test: List[EvalCase] = []
    for u in kept_users:
        rows = by_user[u]
        clicks = [r.item for r in rows]
        new_u = remap[u]
        records.extend(
            ClickRecord(user=new_u, item=r.item, timestamp=r.timestamp)
            for r in rows[:-2]
        )
        valid.append(EvalCase(user=new_u, prefix=tuple(clicks[:-2]),
                              target=clicks[-2]))
        test.append(EvalCase(user=new_u, prefix=tuple(clicks[:-1]),
                             target=clicks[-1]))
    if not kept_users:
        raise ValueError("no users with at least 3 clicks")
    train = Dataset.from_records(records, num_users=len(kept_users))
    return Split(train=train, valid=valid, test=test, num_dropped_users=dropped)


# ---------------------------------------------------------------------------
# synthetic world


def _zipf_popularity(num_items: int, rng: np.random.Generator) -> np.ndarray:
    ranks = rng.permutation(num_items)
    mass = 1.0 / (ranks + 1.0)
    return mass * (num_items / mass.sum())


def simulate_biased_logs(world: WorldConfig) -> Tuple[Dataset, GroundTruth]:
    """Generate click logs under a popularity-skewed logging policy.

    Users take turns; each step the policy exposes a slate sampled without
    replacement proportional to popularity**exposure_skew, the user clicks one
    exposed item proportional to true relevance, and the clicked item's
    popularity is incremented. Deterministic given the seed.
    """
    ss = np.random.SeedSequence(world.seed)
    log_ss, _cat_ss = ss.spawn(2)
    rng = np.random.default_rng(log_ss)

    r = world.relevance_rank
    scale = r ** -0.25
    user_f = rng.normal(0.0, scale, size=(world.num_users, r))
    item_f = rng.normal(0.0, scale, size=(world.num_items, r))
    scores = RELEVANCE_SCALE * (user_f @ item_f.T)
    scores -= scores.max(axis=1, keepdims=True)
    rel = np.exp(scores)
    rel /= rel.sum(axis=1, keepdims=True)

    pop = _zipf_popularity(world.num_items, rng)
    exposure = np.zeros(world.num_items, dtype=np.int64)
    clicks = np.zeros(world.num_items, dtype=np.int64)
    records: List[ClickRecord] = []

    full_slate = world.slate_size >= world.num_items
    t = 0
    for _ in range(world.interactions_per_user):
        for u in range(world.num_users):
            t += 1
            if full_slate:
                slate = np.arange(world.num_items)
            else:
                # Gumbel top-k draws the slate without replacement ∝ pop**skew
                keys = world.exposure_skew * np.log(pop) + rng.gumbel(
                    size=world.num_items)
                slate = np.argpartition(-keys, world.slate_size - 1)
                slate = slate[: world.slate_size]
            p = rel[u, slate]
            p = p / p.sum()
            click = int(slate[rng.choice(len(slate), p=p)])
            records.append(ClickRecord(user=u, item=click, timestamp=t))
            exposure[slate] += 1
            clicks[click] += 1
            pop[click] += 1.0

    dataset = Dataset.from_records(records, num_users=world.num_users)
    truth = GroundTruth(user_factors=user_f, item_factors=item_f,
                        relevance_scale=RELEVANCE_SCALE,
                        exposure_counts=exposure.astype(np.float64),
                        click_counts=clicks.astype(np.float64))
    return dataset, truth


def make_world_catalog(world: WorldConfig) -> ItemCatalog:
    """Catalog matching a simulated world: id-only items, plus one categorical
    field when num_categories > 0. Deterministic given the world seed."""
    ss = np.random.SeedSequence(world.seed)
    _log_ss, cat_ss = ss.spawn(2)
    rng = np.random.default_rng(cat_ss)

    items: List[Item] = []
    token_to_id = {}
    field_names: List[str] = []
    vocab_sizes = [world.num_items]
    if world.num_categories > 0:
        cats = rng.integers(0, world.num_categories, size=world.num_items)
        field_names.append("cat")
        vocab_sizes.append(int(cats.max()) + 1)
    for i in range(world.num_items):
        feats = [(ID_FIELD, i)]
        if world.num_categories > 0:
            feats.append((1, int(cats[i])))
        token_to_id[f"i{i}"] = i
        items.append(Item(id=i, features=tuple(feats)))
    return ItemCatalog(items=items, feature_vocab_sizes=vocab_sizes,
                       token_to_id=token_to_id, field_names=field_names)
