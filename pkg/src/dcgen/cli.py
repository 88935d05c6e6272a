"""Command-line surface: simulate -> train -> eval, plus the tabular-oracle
verification, the gradient-check suite, and the counters benchmark.

Exit codes: 0 success, 1 runtime failure, 2 config error, 3 acceptance
threshold failure (verify-theorem / gradcheck / bench).
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from dataclasses import asdict
from pathlib import Path
from typing import Dict, List, Optional

import numpy as np

log = logging.getLogger("dcgen")

EXIT_OK = 0
EXIT_RUNTIME = 1
EXIT_CONFIG = 2
EXIT_ACCEPTANCE = 3


def _setup_logging() -> None:
    level = os.environ.get("DCG_LOG", "WARNING").upper()
    logging.basicConfig(level=getattr(logging, level, logging.WARNING),
                        format="%(levelname)s %(name)s: %(message)s")


def _load_cfg(args) -> Dict[str, str]:
    from .configio import load_config_file
    return load_config_file(args.config)


def _resolve(path_str: str, config_path: str) -> Path:
    p = Path(path_str)
    return p if p.is_absolute() else Path(config_path).parent / p


def cmd_simulate(args) -> int:
    from .configio import config_hash, effective_config, to_world_config
    from .corpus import (make_world_catalog, simulate_biased_logs,
                         write_catalog, write_interactions)
    cfg = _load_cfg(args)
    world = to_world_config(cfg, seed_override=args.seed)
    eff = effective_config(cfg, seed_override=args.seed)
    h = config_hash(eff)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)

    dataset, truth = simulate_biased_logs(world)
    catalog = make_world_catalog(world)
    write_catalog(catalog, out / "catalog.tsv", header=f"config_hash={h}")
    write_interactions(dataset, out / "interactions.tsv",
                       header=f"config_hash={h}")
    truth.write_jsonl(out / "truth.jsonl", meta={"config_hash": h,
                                                 "seed": world.seed})
    print(f"simulated {len(dataset)} clicks for {world.num_users} users over "
          f"{world.num_items} items -> {out}")
    return EXIT_OK


def cmd_train(args) -> int:
    from .configio import config_hash, effective_config, to_train_config
    from .corpus import load_catalog, load_interactions
    from .trainer import run_workers
    cfg = _load_cfg(args)
    tc = to_train_config(cfg, seed_override=args.seed,
                         mode_override=args.mode)
    eff = effective_config(cfg, seed_override=args.seed,
                           mode_override=args.mode, workers=args.workers)
    h = config_hash(eff)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)

    catalog = load_catalog(_resolve(cfg.get("data.catalog", "catalog.tsv"),
                                    args.config))
    dataset = load_interactions(
        _resolve(cfg.get("data.interactions", "interactions.tsv"),
                 args.config), catalog)
    params, history = run_workers(tc, catalog, dataset,
                                  num_workers=args.workers)
    params.save(out / "checkpoint.bin")
    history.write_jsonl(out / "history.jsonl",
                        meta={"config_hash": h, "mode": tc.mode,
                              "workers": args.workers})
    last = history.epochs[-1]
    print(f"trained mode={tc.mode} epochs={tc.epochs} "
          f"final_loss={last.mean_loss:.6f} val_hr={last.val_hr}")
    return EXIT_OK


def cmd_eval(args) -> int:
    from .configio import config_hash, effective_config
    from .corpus import GroundTruth, leave_last_split, load_catalog, \
        load_interactions
    from .encoder import Parameters
    from .experiments import recommend_all_users, unbiased_hit_rate
    from .retrieval_eval import (aggregate_diversity, degree_histogram,
                                 popularity_index, write_histogram_csv)
    from .trainer import evaluate_hit_rate
    cfg = _load_cfg(args)
    eff = effective_config(cfg, seed_override=args.seed)
    h = config_hash(eff)
    seed = args.seed if args.seed is not None else int(cfg.get("seed", "0"))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)

    catalog = load_catalog(_resolve(cfg.get("data.catalog", "catalog.tsv"),
                                    args.config))
    dataset = load_interactions(
        _resolve(cfg.get("data.interactions", "interactions.tsv"),
                 args.config), catalog)
    params = Parameters.load(_resolve(cfg.get("data.checkpoint",
                                              "checkpoint.bin"), args.config))
    k = int(cfg.get("eval.k", "50"))
    max_prefix = int(cfg.get("max_prefix_len", "10"))
    protocol = cfg.get("eval.protocol", "holdout_test")

    degrees = np.bincount([r.item for r in dataset.records],
                          minlength=catalog.num_items)
    rec_log = recommend_all_users(params, catalog, dataset, k, max_prefix)
    metrics = {
        "protocol": protocol,
        "k": k,
        "seed": seed,
        "config_hash": h,
        "aggregate_diversity": aggregate_diversity(rec_log),
        "popularity_index": popularity_index(rec_log, degrees),
    }
    if protocol in ("holdout_test", "holdout_valid"):
        split = leave_last_split(dataset)
        cases = split.test if protocol == "holdout_test" else split.valid
        metrics["hit_rate"] = evaluate_hit_rate(params, catalog, cases, k,
                                                max_prefix)
    elif protocol == "unbiased_truth":
        truth = GroundTruth.read_jsonl(
            _resolve(cfg.get("eval.truth", "truth.jsonl"), args.config))
        metrics["hit_rate"] = unbiased_hit_rate(
            params, catalog, dataset, truth, k, max_prefix,
            draws_per_user=int(cfg.get("eval.truth_clicks", "1")), seed=seed)
    else:
        from .configio import ConfigError
        raise ConfigError(f"unknown eval protocol {protocol!r}")

    hist = degree_histogram(rec_log, degrees,
                            num_buckets=int(cfg.get("eval.buckets", "10")))
    with open(out / "metrics.json", "w", encoding="utf-8") as f:
        json.dump(metrics, f, sort_keys=True, indent=2)
        f.write("\n")
    write_histogram_csv(hist, out / "histogram.csv",
                        header_comment=f"config_hash={h}")
    print(json.dumps(metrics, sort_keys=True))
    return EXIT_OK


def cmd_verify_theorem(args) -> int:
    from .configio import config_hash, effective_config
    from .oracle import (fit_tabular_contrastive, fit_tabular_ipw,
                         kl_divergence, random_tabular_instance,
                         total_variation)
    cfg = _load_cfg(args) if args.config else {}
    eff = effective_config(cfg, seed_override=args.seed)
    h = config_hash(eff)
    seed = args.seed if args.seed is not None \
        else int(cfg.get("theorem.seed", "0"))
    n_instances = int(cfg.get("theorem.instances", "10"))
    num_items = int(cfg.get("theorem.num_items", "8"))
    max_contexts = int(cfg.get("theorem.max_contexts", "4"))
    min_prob = float(cfg.get("theorem.min_prob", "0.02"))
    L = int(cfg.get("theorem.negatives", str(num_items - 1)))
    steps = int(cfg.get("theorem.steps", "200000"))
    lr0 = float(cfg.get("theorem.lr_start", "0.5"))
    lr1 = float(cfg.get("theorem.lr_end", "0.01"))
    tv_tol = float(cfg.get("theorem.tv_tol", "0.02"))
    cross_tol = float(cfg.get("theorem.cross_tol", "0.03"))
    kl_tol = float(cfg.get("theorem.ipw_kl_tol", "1e-8"))

    rng = np.random.default_rng(seed)
    results = []
    all_pass = True
    for i in range(n_instances):
        n_ctx = int(rng.integers(1, max_contexts + 1))
        p_data, q = random_tabular_instance(n_ctx, num_items, min_prob, rng)
        fit_c = fit_tabular_contrastive(p_data, q, L=L, steps=steps,
                                        lr_schedule=(lr0, lr1),
                                        seed=int(rng.integers(2 ** 31)),
                                        tolerance=tv_tol)
        fit_i = fit_tabular_ipw(p_data, q)
        cross_tv = max(
            total_variation(fit_c.table.rows[x], fit_i.descent.rows[x])
            for x in range(n_ctx))
        ok = (fit_c.converged and fit_i.kl_to_target <= kl_tol
              and cross_tv <= cross_tol)
        all_pass &= ok
        results.append({
            "instance": i,
            "contexts": n_ctx,
            "tv_contrastive_to_target": [float(t) for t in fit_c.tv_to_target],
            "ipw_descent_kl": fit_i.kl_to_target,
            "tv_contrastive_vs_ipw": cross_tv,
            "pass": bool(ok),
        })
        status = "pass" if ok else "FAIL"
        print(f"instance {i}: contexts={n_ctx} "
              f"max_tv={max(fit_c.tv_to_target):.4f} "
              f"cross_tv={cross_tv:.4f} ipw_kl={fit_i.kl_to_target:.2e} "
              f"[{status}]")

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    report = {"config_hash": h, "seed": seed, "tolerances": {
        "tv": tv_tol, "cross_tv": cross_tol, "ipw_kl": kl_tol},
        "instances": results, "all_pass": bool(all_pass)}
    with open(out / "report.json", "w", encoding="utf-8") as f:
        json.dump(report, f, sort_keys=True, indent=2)
        f.write("\n")
    return EXIT_OK if all_pass else EXIT_ACCEPTANCE


def cmd_gradcheck(args) -> int:
    from .configio import config_hash, effective_config
    from .gradcheck import run_gradient_suite
    cfg = _load_cfg(args) if args.config else {}
    h = config_hash(effective_config(cfg, seed_override=args.seed))
    seed = args.seed if args.seed is not None else int(cfg.get("seed", "0"))
    tol = float(cfg.get("gradcheck.tolerance", "1e-4"))
    coords = int(cfg.get("gradcheck.coords", "100"))
    rows = run_gradient_suite(seed=seed, coords_per_case=coords)
    all_pass = True
    print(f"{'loss':<18}{'similarity':<15}{'gamma':<8}{'max_rel_err':<14}ok")
    for row in rows:
        ok = row.max_rel_err <= tol
        all_pass &= ok
        print(f"{row.loss:<18}{row.similarity:<15}{row.gamma:<8}"
              f"{row.max_rel_err:<14.3e}{'pass' if ok else 'FAIL'}")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "gradcheck.json", "w", encoding="utf-8") as f:
        json.dump({"config_hash": h, "tolerance": tol,
                   "cases": [asdict(r) for r in rows],
                   "all_pass": bool(all_pass)}, f, sort_keys=True, indent=2)
        f.write("\n")
    return EXIT_OK if all_pass else EXIT_ACCEPTANCE


def cmd_bench(args) -> int:
    from .configio import config_hash, effective_config
    from .experiments import run_efficiency_bench
    cfg = _load_cfg(args) if args.config else {}
    h = config_hash(effective_config(cfg, seed_override=args.seed))
    seed = args.seed if args.seed is not None else int(cfg.get("seed", "0"))
    B = int(cfg.get("bench.batch_size", "256"))
    Q = int(cfg.get("bench.queue_capacity", "2560"))
    L = int(cfg.get("bench.negatives", str(Q)))
    num_items = int(cfg.get("bench.num_items", "8192"))
    steps = int(cfg.get("bench.steps", "3"))
    modes = cfg.get("bench.modes",
                    "clrec_queue_cached,clrec_queue,clrec_inbatch,"
                    "sampled_softmax").split(",")
    report = run_efficiency_bench([m.strip() for m in modes], batch_size=B,
                                  queue_capacity=Q, negatives=L,
                                  num_items=num_items, steps=steps, seed=seed)
    print(f"{'mode':<22}{'item_fw/step':<16}{'user_fw/step':<16}bytes/step")
    for row in report.rows:
        print(f"{row.mode:<22}{row.item_forwards_per_step:<16.1f}"
              f"{row.user_forwards_per_step:<16.1f}{row.bytes_per_step:.0f}")

    cached = report.per_step("clrec_queue_cached").item_forwards_per_step
    explicit = report.per_step("sampled_softmax").item_forwards_per_step
    ratio = cached / explicit
    bound = B / (B + Q)
    identity_ok = ratio <= bound + 1e-9
    print(f"cached/explicit forward ratio: {ratio:.4f} "
          f"(bound {bound:.4f}) -> {'pass' if identity_ok else 'FAIL'}")
    print(f"saved fraction: {report.saved_fraction:.1%}")

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "bench.json", "w", encoding="utf-8") as f:
        json.dump({"config_hash": h, "batch_size": B, "queue_capacity": Q,
                   "negatives": L, "ratio": ratio, "bound": bound,
                   "saved_fraction": report.saved_fraction,
                   "rows": [asdict(r) for r in report.rows],
                   "identity_ok": bool(identity_ok)},
                  f, sort_keys=True, indent=2)
        f.write("\n")
    return EXIT_OK if identity_ok else EXIT_ACCEPTANCE


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="dcgen",
        description="two-tower candidate-generation training engine")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, config_required=True):
        p.add_argument("-c", "--config", required=config_required,
                       help="flat key=value config file")
        p.add_argument("-o", "--out", default="out",
                       help="output directory (created if missing)")
        p.add_argument("--seed", type=int, default=None,
                       help="override the config seed")
        p.add_argument("--workers", type=int, default=1,
                       help="data-parallel workers")
        p.add_argument("--mode", default=None, help="override training mode")

    for name, fn, needs_cfg in [
        ("simulate", cmd_simulate, True),
        ("train", cmd_train, True),
        ("eval", cmd_eval, True),
        ("verify-theorem", cmd_verify_theorem, False),
        ("gradcheck", cmd_gradcheck, False),
        ("bench", cmd_bench, False),
    ]:
        p = sub.add_parser(name)
        common(p, config_required=needs_cfg)
        p.set_defaults(fn=fn)
    return parser


def main(argv: Optional[List[str]] = None) -> int:
    _setup_logging()
    parser = build_parser()
    args = parser.parse_args(argv)
    from .configio import ConfigError
    from .corpus import DataFormatError
    try:
        return args.fn(args)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except (DataFormatError, ValueError, OSError, RuntimeError) as e:
        log.debug("runtime failure", exc_info=True)
        print(f"error: {e}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
