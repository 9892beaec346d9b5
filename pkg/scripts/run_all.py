"""Run every desk experiment and print a one-line summary per experiment.

Usage: python3 scripts/run_all.py [--config configs/desk.json] [--out results] [--only KIND ...]

Artifacts land in <out>/<kind>/ (report.json, tables/*.csv, maps/*.png).
Fill the embedding cache first with scripts/precompute_embeddings.py to
avoid recomputing views per experiment.
"""
import argparse
import time
from dataclasses import replace
from pathlib import Path

from d3det.harness import EXPERIMENT_KINDS, ExperimentConfig, run_experiment


def summarize(kind: str, res: dict) -> str:
    if kind == "train_eval":
        d, s = res["detector"]["mean"], res["single_branch"]["mean"]
        return (f"dual ID {d['id_mean_acc']:.3f} OOD {d['ood_mean_acc']:.3f} | "
                f"single ID {s['id_mean_acc']:.3f} OOD {s['ood_mean_acc']:.3f}")
    if kind == "scale_sweep":
        c = res["curves"]
        return "ID " + " ".join(f"{v:.3f}" for v in c["id_mean_acc"]) + \
            " | OOD " + " ".join(f"{v:.3f}" for v in c["ood_mean_acc"])
    if kind == "robustness":
        return f"clean {res['clean_total_mean_acc']:.3f} | " + " ".join(
            f"{r['perturbation']}{r['value']:g}={r['total_mean_acc']:.3f}" for r in res["rows"])
    if kind == "occlusion":
        return " ".join(f"{m['sample_id']} p={m['baseline']:.3f}" for m in res["maps"])
    return " | ".join(f"{r['name']} {r['total_mean_acc']:.3f}" for r in res["rows"])


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--config", default="configs/desk.json")
    ap.add_argument("--out", default="results")
    ap.add_argument("--cache-dir", default=".cache/embeddings")
    ap.add_argument("--only", nargs="*", choices=EXPERIMENT_KINDS)
    args = ap.parse_args()
    base = ExperimentConfig.load(args.config)
    for kind in args.only or EXPERIMENT_KINDS:
        cfg = replace(base, kind=kind, cache_dir=args.cache_dir, output_dir=str(Path(args.out) / kind))
        t0 = time.time()
        rep = run_experiment(cfg, verbose=True)
        print(f"== {kind} ({time.time() - t0:.0f}s): {summarize(kind, rep['results'])}", flush=True)


if __name__ == "__main__":
    main()
