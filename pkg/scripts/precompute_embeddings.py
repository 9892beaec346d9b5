"""Fill the embedding cache for every view the default experiments use.

Usage: python3 scripts/precompute_embeddings.py [--config cfg.json] [--cache-dir DIR]

All views of a partition are computed in one pass so each image is rendered and
augmented once.
"""
import argparse
import time
from dataclasses import replace

from d3det.harness import (DISRUPTION_ORDER, PATCH_SIZES, Experiment, ExperimentConfig, branch_variants,
                           view_name)
from d3det.imagekit import DisruptionSpec


def all_views(cfg: ExperimentConfig) -> dict:
    base = cfg.disruption
    views = {}
    for kind in DISRUPTION_ORDER:
        spec = DisruptionSpec(kind, base.patch_size, base.rotation_range_deg)
        views[view_name(spec)] = spec
    for p in PATCH_SIZES:
        spec = DisruptionSpec("patch_shuffle", p)
        views[view_name(spec)] = spec
    for _, _, br in branch_variants(base):
        views.update(br.view_dict())
    return views


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--config")
    ap.add_argument("--cache-dir", default=".cache/embeddings")
    args = ap.parse_args()
    cfg = ExperimentConfig.load(args.config) if args.config else ExperimentConfig()
    cfg = replace(cfg, cache_dir=args.cache_dir)
    exp = Experiment(cfg, verbose=True)
    views = all_views(cfg)
    parts = [f"train@{e}" for e in range(min(cfg.augment_epochs, cfg.train.epochs))] + ["val", "test"]
    for part in parts:
        t0 = time.time()
        exp.store.get(part, views)
        print(f"{part}: {len(views) + 1} views in {time.time() - t0:.0f}s", flush=True)


if __name__ == "__main__":
    main()
