"""End-to-end runs: data, LAM, policy, evaluation; and the ablation sweep."""
import dataclasses
import logging
import os
import time

import numpy as np
import torch

from .config import RunConfig
from .data import gen_data, manifest_hash
from .evaluate import evaluate, save_report
from .training import load_lam, prepare_stores, train_lam, train_vla
from .viz import save_trace, trace_from_anchor, write_grid

logger = logging.getLogger(__name__)

VARIANTS = {
    "lam3": {"lam_frames": 3, "attention": "synergistic"},
    "lam1": {"lam_frames": 1, "attention": "synergistic"},
    "no_lam": {"lam_frames": 0, "attention": "synergistic"},
    "causal": {"lam_frames": 3, "attention": "causal"},
}
# (better, worse) pairs whose mean chain length is expected to be ordered
ORDERINGS = (("lam3", "lam1"), ("lam1", "no_lam"), ("lam3", "causal"))


def with_ablation(cfg, **changes):
    d = cfg.to_dict()
    d["ablation"].update(changes)
    return RunConfig.from_dict(d)


def with_seed(cfg, seed):
    d = cfg.to_dict()
    d["seed"] = int(seed)
    return RunConfig.from_dict(d)


def ensure_data(cfg, data_dir, force=False):
    d = cfg.data
    return gen_data(data_dir, d.episodes, d.seed, d.horizon, d.no_depth_fraction, force=force, config_hash=cfg.hash())


def run_pipeline(cfg, out_dir, force=False, trace=True):
    """Generate data, train both stages, evaluate; writes ``out_dir/report.json``."""
    torch.set_num_threads(cfg.threads)
    t0 = time.time()
    data_dir = os.path.join(out_dir, "data")
    ensure_data(cfg, data_dir, force)
    stores = prepare_stores(cfg, data_dir)
    lam_dir, vla_dir = os.path.join(out_dir, "lam"), os.path.join(out_dir, "vla")
    timings = {"data": time.time() - t0}
    if cfg.ablation.lam_frames:
        train_lam(cfg, data_dir, lam_dir, force=True, stores=stores)
        timings["lam"] = time.time() - t0 - sum(timings.values())
    policy, velocity = train_vla(cfg, data_dir, lam_dir, vla_dir, force=True, stores=stores)
    timings["vla"] = time.time() - t0 - sum(timings.values())
    lam = load_lam(lam_dir)[0] if cfg.ablation.lam_frames else None
    report = evaluate(cfg, policy.eval(), velocity.eval(), stores[2], lam, stores[1])
    timings["eval"] = time.time() - t0 - sum(timings.values())
    report["data_manifest_hash"] = manifest_hash(data_dir)
    report["timings"] = timings
    save_report(report, os.path.join(out_dir, "report.json"))
    if trace and lam is not None and len(stores[1]):
        tr = trace_from_anchor(lam, policy, stores[1], 0, 0)
        save_trace(tr, os.path.join(out_dir, "trace"), cfg.hash())
        write_grid(tr, os.path.join(out_dir, "latent_grid.png"))
    return report


def run_ablation(cfg, out_dir, seeds=(0, 1, 2), variants=tuple(VARIANTS), force=False):
    """Train and evaluate each variant for each seed; writes ``ablation_report.json``.

    LAMs are shared between variants that need the same frame count.
    """
    torch.set_num_threads(cfg.threads)
    data_dir = os.path.join(out_dir, "data")
    ensure_data(cfg, data_dir, force)
    stores = prepare_stores(cfg, data_dir)
    results = {v: {} for v in variants}
    for seed in seeds:
        scfg = with_seed(cfg, seed)
        lam_dirs = {}
        for v in variants:
            frames = VARIANTS[v]["lam_frames"]
            vcfg = with_ablation(scfg, **VARIANTS[v])
            if frames and frames not in lam_dirs:
                lam_dirs[frames] = os.path.join(out_dir, f"seed{seed}", "lam_models", f"frames{frames}")
                train_lam(vcfg, data_dir, lam_dirs[frames], force=True, stores=stores)
            vla_dir = os.path.join(out_dir, f"seed{seed}", v)
            policy, velocity = train_vla(vcfg, data_dir, lam_dirs.get(frames), vla_dir, force=True, stores=stores)
            rep = evaluate(vcfg, policy.eval(), velocity.eval(), stores[2], include_random=False)
            save_report(rep, os.path.join(vla_dir, "report.json"))
            results[v][str(seed)] = rep["chains"]["avg_len"]
            logger.info("seed %d %s avg chain length %.3f", seed, v, rep["chains"]["avg_len"])
    summary = {v: {"per_seed": results[v], "mean": float(np.mean(list(results[v].values())))} for v in variants}
    checks = []
    for better, worse in ORDERINGS:
        if better in summary and worse in summary:
            ok = summary[better]["mean"] >= summary[worse]["mean"]
            checks.append({"better": better, "worse": worse, "holds": bool(ok)})
    report = {
        "schema_version": 1,
        "config_hash": cfg.hash(),
        "seeds": list(seeds),
        "variants": summary,
        "orderings": checks,
        "all_orderings_hold": all(c["holds"] for c in checks),
        "completed": all(len(results[v]) == len(seeds) for v in variants),
    }
    save_report(report, os.path.join(out_dir, "ablation_report.json"))
    return report
