"""Command-line entry point.

Exit codes: 0 success, 1 invalid arguments or configuration, 2 runtime failure.
"""
from __future__ import annotations

import argparse
import json
import sys
import traceback
from dataclasses import replace
from pathlib import Path

from . import __version__, harness
from .harness import ConfigError, ExperimentConfig

EXIT_OK, EXIT_INVALID, EXIT_RUNTIME = 0, 1, 2

ABLATIONS = {"disruption": "disruption_ablation", "patch-size": "patch_size_ablation",
             "head": "head_ablation", "branch": "branch_ablation"}


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.format_usage()}{self.prog}: error: {message}")


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="d3det", description="Synthetic-benchmark detector experiments.")
    p.add_argument("--version", action="version", version=f"d3det {__version__}")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def add(name, help_):
        sp = sub.add_parser(name, help=help_)
        sp.add_argument("--config", type=Path, help="experiment config JSON (defaults used if omitted)")
        sp.add_argument("--seed", type=int, help="override the master seed")
        sp.add_argument("--out", type=Path, help="output directory (overrides output_dir)")
        sp.add_argument("--cache-dir", type=Path, help="embedding cache directory")
        sp.add_argument("-v", "--verbose", action="store_true")
        return sp

    s = add("synth", "build the benchmark manifest")
    s.add_argument("--materialize", action="store_true", help="also write every image as PNG")
    add("train", "train the configured detector and save a checkpoint")
    e = add("eval", "evaluate a saved checkpoint on the test split")
    e.add_argument("--checkpoint", type=Path, help="checkpoint path (default <out>/checkpoints/head.d3ck)")
    add("run", "run the experiment named by the config's kind")
    add("scale-sweep", "train-generator count sweep")
    add("robust", "blur and JPEG robustness grid")
    a = add("ablate", "ablation tables")
    a.add_argument("which", choices=sorted(ABLATIONS))
    add("occlude", "occlusion sensitivity maps")
    r = add("report", "print the summary of an existing output directory")
    r.add_argument("--csv", action="store_true", help="print CSV tables instead of JSON results")
    return p


def load_config(args) -> ExperimentConfig:
    if args.config is not None and not args.config.exists():
        raise ConfigError(f"config {args.config} does not exist")
    cfg = ExperimentConfig.load(args.config) if args.config else ExperimentConfig()
    changes = {}
    if args.seed is not None:
        changes["seed"] = args.seed
    if args.out is not None:
        changes["output_dir"] = str(args.out)
    if args.cache_dir is not None:
        changes["cache_dir"] = str(args.cache_dir)
    return replace(cfg, **changes) if changes else cfg


def _synth(cfg: ExperimentConfig, out: Path, materialize: bool) -> dict:
    from .synthbench import materialize as write_images
    from .synthbench import save_manifest

    manifest = harness.load_manifest_for(cfg)
    out.mkdir(parents=True, exist_ok=True)
    save_manifest(manifest, out / "manifest.jsonl")
    n_images = len(write_images(manifest, out / "images")) if materialize else 0
    counts = {}
    for r in manifest.records:
        counts[r.split] = counts.get(r.split, 0) + 1
    return {"manifest": "manifest.jsonl", "records": len(manifest.records), "split_counts": counts,
            "images_written": n_images}


def _report(out: Path, as_csv: bool) -> None:
    path = out / "report.json"
    if not path.exists():
        raise ConfigError(f"{path} does not exist")
    if as_csv:
        for t in sorted((out / "tables").glob("*.csv")):
            print(f"# {t.name}")
            print(t.read_text(encoding="utf-8"), end="")
        return
    rep = json.loads(path.read_text(encoding="utf-8"))
    print(json.dumps({k: rep[k] for k in ("command", "config_hash", "master_seed", "code_version")},
                     sort_keys=True))
    print(json.dumps(rep["results"], sort_keys=True, indent=2))


def _execute(args, cfg: ExperimentConfig) -> None:
    out = Path(cfg.output_dir)
    if args.command == "report":
        _report(out, args.csv)
        return
    if args.command == "synth":
        harness.write_report(out, cfg, "synth", _synth(cfg, out, args.materialize))
        return
    # validation happens while loading, runtime failures afterwards
    exp = harness.Experiment(cfg, args.verbose)
    try:
        if args.command == "train":
            res, kind = harness.run_train(exp, out), "train"
        elif args.command == "eval":
            res, kind = harness.run_eval(exp, out, args.checkpoint), "eval"
        else:
            kind = {"run": cfg.kind, "scale-sweep": "scale_sweep", "robust": "robustness",
                    "occlude": "occlusion"}.get(args.command) or ABLATIONS[args.which]
            res = harness.RUNNERS[kind](exp, out)
    except ConfigError:
        raise
    except Exception as exc:
        raise RuntimeFailure(exc) from exc
    harness.write_report(out, exp, kind, res)
    if args.verbose:
        print(f"wrote {out / 'report.json'}")


class RuntimeFailure(Exception):
    pass


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        cfg = load_config(args)
        _execute(args, cfg)
    except SystemExit as exc:  # --help / --version
        return int(exc.code or 0)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_INVALID
    except RuntimeFailure as exc:
        traceback.print_exception(exc.__cause__, file=sys.stderr)
        return EXIT_RUNTIME
    except (ValueError, OSError) as exc:  # config, manifest, image and checkpoint validation
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except Exception:
        traceback.print_exc()
        return EXIT_RUNTIME
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
