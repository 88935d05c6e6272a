"""Flat key-value config files, typed extraction, and config hashing.

Format: one ``key = value`` pair per line, '#' comments, blank lines ignored.
Dotted keys group related settings (queue.capacity, sampler.kind, ...).
"""

from __future__ import annotations

import hashlib
from typing import Dict, Optional

from .corpus import WorldConfig
from .trainer import (CLREC_QUEUE, CLREC_QUEUE_CACHED, EncoderSettings,
                      OptimizerConfig, TrainConfig, U2UConfig)


class ConfigError(ValueError):
    pass


def parse_flat_config(text: str) -> Dict[str, str]:
    out: Dict[str, str] = {}
    for line_no, line in enumerate(text.splitlines(), start=1):
        stripped = line.strip()
        if not stripped or stripped.startswith("#"):
            continue
        if "=" not in stripped:
            raise ConfigError(f"line {line_no}: expected key = value")
        key, value = stripped.split("=", 1)
        key, value = key.strip(), value.strip()
        if not key:
            raise ConfigError(f"line {line_no}: empty key")
        out[key] = value
    return out


def load_config_file(path) -> Dict[str, str]:
    try:
        with open(path, encoding="utf-8") as f:
            return parse_flat_config(f.read())
    except OSError as e:
        raise ConfigError(f"cannot read config {path}: {e}") from None


def config_hash(cfg: Dict[str, str]) -> str:
    canon = "\n".join(f"{k}={cfg[k]}" for k in sorted(cfg))
    return hashlib.sha256(canon.encode("utf-8")).hexdigest()[:16]


def _get(cfg: Dict[str, str], key: str, default, cast):
    if key not in cfg:
        return default
    raw = cfg[key]
    try:
        if cast is bool:
            low = raw.lower()
            if low in ("true", "1", "yes", "on"):
                return True
            if low in ("false", "0", "no", "off"):
                return False
            raise ValueError(raw)
        return cast(raw)
    except (TypeError, ValueError):
        raise ConfigError(f"bad value for {key}: {raw!r}") from None


def to_world_config(cfg: Dict[str, str], seed_override: Optional[int] = None,
                    ) -> WorldConfig:
    try:
        return WorldConfig(
            num_items=_get(cfg, "world.num_items", 500, int),
            num_users=_get(cfg, "world.num_users", 300, int),
            relevance_rank=_get(cfg, "world.relevance_rank", 8, int),
            exposure_skew=_get(cfg, "world.exposure_skew", 1.5, float),
            slate_size=_get(cfg, "world.slate_size", 10, int),
            interactions_per_user=_get(cfg, "world.interactions_per_user",
                                       40, int),
            seed=(seed_override if seed_override is not None
                  else _get(cfg, "world.seed", 0, int)),
            num_categories=_get(cfg, "world.num_categories", 0, int),
        )
    except ValueError as e:
        raise ConfigError(str(e)) from None


def to_train_config(cfg: Dict[str, str], seed_override: Optional[int] = None,
                    mode_override: Optional[str] = None) -> TrainConfig:
    mode = mode_override or _get(cfg, "mode", "clrec_queue_cached", str)
    if mode == CLREC_QUEUE and _get(cfg, "queue.cached", False, bool):
        mode = CLREC_QUEUE_CACHED
    tc = TrainConfig(
        mode=mode,
        batch_size=_get(cfg, "batch_size", 256, int),
        queue_capacity=_get(cfg, "queue.capacity", 2560, int),
        negatives=_get(cfg, "negatives", 100, int),
        epochs=_get(cfg, "epochs", 5, int),
        optimizer=OptimizerConfig(
            kind=_get(cfg, "optimizer", "adagrad", str),
            lr=_get(cfg, "optimizer.lr", 0.1, float),
            beta1=_get(cfg, "optimizer.beta1", 0.9, float),
            beta2=_get(cfg, "optimizer.beta2", 0.999, float),
            eps=_get(cfg, "optimizer.eps", 1e-8, float),
        ),
        seed=(seed_override if seed_override is not None
              else _get(cfg, "seed", 0, int)),
        u2u=U2UConfig(
            enabled=_get(cfg, "u2u.enabled", False, bool),
            weight=_get(cfg, "u2u.weight", 0.0, float),
            min_prefix=_get(cfg, "u2u.min_prefix", 2, int),
            min_suffix=_get(cfg, "u2u.min_suffix", 2, int),
            queue_capacity=_get(cfg, "u2u.queue_capacity", 0, int),
        ),
        ipw_clip_floor=_get(cfg, "ipw.clip_floor", 0.01, float),
        encoder=EncoderSettings(
            d=_get(cfg, "encoder.d", 32, int),
            similarity=_get(cfg, "encoder.similarity", "cosine", str),
            tau=_get(cfg, "encoder.tau", 0.1, float),
            gamma=_get(cfg, "encoder.gamma", 1.0, float),
            init_scale=_get(cfg, "encoder.init_scale", 0.1, float),
        ),
        sampler_kind=_get(cfg, "sampler.kind", "unigram", str),
        sampler_alpha=_get(cfg, "sampler.alpha", 0.75, float),
        max_prefix_len=_get(cfg, "max_prefix_len", 10, int),
        eval_k=_get(cfg, "eval.k", 50, int),
        holdout=_get(cfg, "eval.holdout", True, bool),
        max_eval_users=_get(cfg, "eval.max_users", 200, int),
    )
    try:
        tc.validate()
    except ValueError as e:
        raise ConfigError(str(e)) from None
    return tc


def effective_config(cfg: Dict[str, str], seed_override: Optional[int] = None,
                     mode_override: Optional[str] = None,
                     workers: Optional[int] = None) -> Dict[str, str]:
    eff = dict(cfg)
    if seed_override is not None:
        eff["seed"] = str(seed_override)
        if "world.seed" in eff or any(k.startswith("world.") for k in eff):
            eff["world.seed"] = str(seed_override)
    if mode_override is not None:
        eff["mode"] = mode_override
    if workers is not None:
        eff["workers"] = str(workers)
    return eff
