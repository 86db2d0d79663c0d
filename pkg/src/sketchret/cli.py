"""Command-line entry point and run-directory plumbing.

Each invocation owns one run directory (lock-file enforced) and leaves behind
a config snapshot, logs, and result files sufficient to reproduce the run
bit-exactly in deterministic mode.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import os
import sys
import time
from dataclasses import replace
from pathlib import Path

from . import __version__
from . import ablation as abl
from . import attrsel
from .config import RunConfig, load_config, save_snapshot
from .errors import ConfigurationError, UsageError, exit_code_for
from .model import load_checkpoint, save_checkpoint
from .retrieval import evaluate_bidirectional, export_embeddings, extract_embeddings, save_cmc
from .synthdata import generate_corpus, load_corpus, poison_with_color_attributes, save_manifest
from .training import (RunPlan, TrainSet, run_pipeline, run_step1, run_step2,
                       source_trainset, target_trainsets, transfer_weights, write_jsonl)

ENV_OUT_ROOT = "SKETCHRET_RUNS"

SUBCOMMANDS = ("gen-data", "train-step1", "train-step2", "evaluate", "select-attrs",
               "subset-study", "ablate", "sweep")


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="sketchret",
        description="Sketch-to-photo retrieval training with attribute-guided "
                    "adversarial domain adaptation")
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, corpus=True):
        p.add_argument("--config", default=None, help="dotted-key config file")
        p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                       help="override a config key (repeatable)")
        p.add_argument("--out", default=None, help="run directory")
        p.add_argument("--run-name", default=None, help="run directory name under the output root")
        p.add_argument("--seed", type=int, default=None, help="training seed override")
        if corpus:
            p.add_argument("--corpus", required=True, help="corpus directory or manifest path")

    p = sub.add_parser("gen-data", help="generate the synthetic corpus")
    common(p, corpus=False)
    p.add_argument("--corpus-out", required=True, help="directory to write the corpus into")
    p.add_argument("--poison-colors", action="store_true",
                   help="also write a color-poisoned manifest variant")

    p = sub.add_parser("train-step1", help="source pre-training")
    common(p)

    p = sub.add_parser("train-step2", help="tri-domain co-training from a step-1 checkpoint")
    common(p)
    p.add_argument("--checkpoint", default=None, help="step-1 checkpoint file")

    p = sub.add_parser("evaluate", help="bidirectional CMC for a trained checkpoint")
    common(p)
    p.add_argument("--checkpoint", required=True)

    p = sub.add_parser("select-attrs", help="attribute transferability report")
    common(p)
    p.add_argument("--checkpoint", required=True, help="full-setting trained checkpoint")

    p = sub.add_parser("subset-study", help="rank-1 versus attribute-subset size")
    common(p)

    p = sub.add_parser("ablate", help="run ablation rows")
    common(p)
    p.add_argument("--rows", default=None, help="comma-separated row ids (default: all)")
    p.add_argument("--seeds", default=None, help="N (seeds 0..N-1) or comma-separated list")

    p = sub.add_parser("sweep", help="trade-off parameter sweep")
    common(p)
    p.add_argument("--seeds", default=None, help="N (seeds 0..N-1) or comma-separated list")
    return parser


def _parse_seeds(raw: str | None, default) -> list[int]:
    if raw is None:
        return list(default)
    parts = [p for p in raw.split(",") if p.strip()]
    if len(parts) == 1 and "," not in raw:
        return list(range(int(parts[0])))
    return [int(p) for p in parts]


def _resolve_run_dir(args) -> Path:
    if args.out:
        return Path(args.out)
    root = Path(os.environ.get(ENV_OUT_ROOT, "runs"))
    name = args.run_name or f"{args.command}-{time.strftime('%Y%m%d-%H%M%S')}"
    return root / name


class RunDir:
    """Exclusive run directory; the lock file rejects concurrent owners."""

    def __init__(self, path: Path):
        self.path = Path(path)
        self.lock = self.path / ".lock"

    def __enter__(self):
        self.path.mkdir(parents=True, exist_ok=True)
        try:
            fd = os.open(self.lock, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
        except FileExistsError:
            raise UsageError(f"run directory {self.path} is locked by another invocation")
        os.write(fd, str(os.getpid()).encode())
        os.close(fd)
        return self.path

    def __exit__(self, *exc):
        try:
            self.lock.unlink()
        except FileNotFoundError:
            pass
        return False


def _load_run_config(args) -> RunConfig:
    cfg = load_config(args.config, args.set)
    if args.seed is not None:
        cfg.train = replace(cfg.train, seed=args.seed)
    return cfg


def _corpus_fingerprint(manifest_path: Path) -> str:
    return hashlib.sha256(Path(manifest_path).read_bytes()).hexdigest()


def _write_provenance(run_dir: Path, cfg: RunConfig, corpus_path: str | None) -> None:
    save_snapshot(cfg, run_dir / "config.snapshot")
    prov = {"version": __version__, "seed": cfg.train.seed}
    if corpus_path:
        p = Path(corpus_path)
        manifest = p / "manifest.json" if p.is_dir() else p
        prov["corpus_manifest_sha256"] = _corpus_fingerprint(manifest)
        prov["corpus"] = str(corpus_path)
    (run_dir / "provenance.json").write_text(
        json.dumps(prov, sort_keys=True, indent=1) + "\n", encoding="utf-8")


def _load_corpus_arg(args):
    return load_corpus(args.corpus)


def cli_dispatch(argv) -> int:
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:  # argparse handles --help and usage errors
        return int(exc.code or 0)
    try:
        return _run_command(args)
    except Exception as exc:  # noqa: BLE001 - single categorized exit point
        kind = type(exc).__name__
        print(f"error ({kind}): {exc}", file=sys.stderr)
        return exit_code_for(exc)


def _run_command(args) -> int:
    cfg = _load_run_config(args)
    run_dir_cm = RunDir(_resolve_run_dir(args))

    if args.command == "gen-data":
        with run_dir_cm as run_dir:
            _write_provenance(run_dir, cfg, None)
            c = cfg.corpus
            manifest_path = generate_corpus(
                args.corpus_out, seed=c.seed, n_source_ids=c.n_source_ids,
                n_target_train_ids=c.n_target_train_ids,
                n_target_test_ids=c.n_target_test_ids,
                photos_per_source_id=c.photos_per_source_id,
                photos_per_target_id=c.photos_per_target_id,
                sketches_per_target_id=c.sketches_per_target_id,
                image_size=c.image_size)
            print(f"corpus manifest: {manifest_path}")
            if args.poison_colors:
                from .synthdata import load_manifest
                poisoned = poison_with_color_attributes(load_manifest(manifest_path))
                ppath = Path(args.corpus_out) / "manifest_poisoned.json"
                save_manifest(poisoned, ppath)
                print(f"poisoned manifest: {ppath}")
        return 0

    if args.command == "train-step1":
        with run_dir_cm as run_dir:
            corpus = _load_corpus_arg(args)
            _write_provenance(run_dir, cfg, args.corpus)
            tc = replace(cfg.train, image_size=corpus.image_size)
            source = source_trainset(corpus, tc.attribute_subset)
            result = run_step1(tc, source, out_dir=run_dir)
            write_jsonl(run_dir / "train_log.jsonl", result.log)
            print(f"step-1 checkpoint: {run_dir / 'step1.ckpt'}")
        return 0

    if args.command == "train-step2":
        if not args.checkpoint:
            raise ConfigurationError("train-step2 requires --checkpoint (step-1 checkpoint)")
        if not Path(args.checkpoint).exists():
            raise ConfigurationError(f"step-1 checkpoint not found: {args.checkpoint}")
        with run_dir_cm as run_dir:
            corpus = _load_corpus_arg(args)
            _write_provenance(run_dir, cfg, args.corpus)
            tc = replace(cfg.train, image_size=corpus.image_size)
            source = source_trainset(corpus, tc.attribute_subset)
            photos, sketches = target_trainsets(corpus.splits["target_train"])
            n_ids = len(set(photos.identities) | set(sketches.identities))
            model = transfer_weights(args.checkpoint, tc, n_ids,
                                     corpus.splits["target_train"].label_space)
            result = run_step2(tc, model, source, photos, sketches, out_dir=run_dir)
            write_jsonl(run_dir / "train_log.jsonl", result.log)
            cmc_results = evaluate_bidirectional(result.model, corpus.splits["target_test"])
            for name, res in cmc_results.items():
                save_cmc(res, run_dir / f"cmc_{name}.json", seed=tc.seed)
                print(f"{name}: rank-1 {res.rank(1):.4f}")
            print(f"final checkpoint: {run_dir / 'step2.ckpt'}")
        return 0

    if args.command == "evaluate":
        with run_dir_cm as run_dir:
            corpus = _load_corpus_arg(args)
            model, _ = load_checkpoint(args.checkpoint)
            _write_provenance(run_dir, cfg, args.corpus)
            cmc_results = evaluate_bidirectional(model, corpus.splits["target_test"])
            for name, res in cmc_results.items():
                save_cmc(res, run_dir / f"cmc_{name}.json", seed=cfg.train.seed)
                print(f"{name}: rank-1 {res.rank(1):.4f}")
            split = corpus.splits["target_test"]
            sets = extract_embeddings(model, split)
            for domain, es in sets.items():
                atts = None
                if model.c_att is not None:
                    # attribute bits come from the raw (unnormalized) embeddings
                    enc = model.e1 if domain == "t1" else (model.e2 or model.e1)
                    emb, _ = enc.forward(split.images(split.indices_for(domain=domain)),
                                         train=False)
                    phi, _ = model.c_att.forward(emb, train=False)
                    atts = (phi >= 0.5).astype(int)
                export_embeddings(es, run_dir / f"embeddings_{domain}.tsv", attributes=atts)
        return 0

    if args.command == "select-attrs":
        with run_dir_cm as run_dir:
            corpus = _load_corpus_arg(args)
            model, _ = load_checkpoint(args.checkpoint)
            _write_provenance(run_dir, cfg, args.corpus)
            tc = replace(cfg.train, image_size=corpus.image_size)
            report = attrsel.select_attributes(corpus, model, tc)
            attrsel.save_report(report, run_dir / "attribute_report.json")
            for i in report.ranking:
                print(f"{report.names[i]}: {report.accuracies[i]:.4f}")
        return 0

    if args.command == "subset-study":
        with run_dir_cm as run_dir:
            corpus = _load_corpus_arg(args)
            _write_provenance(run_dir, cfg, args.corpus)
            tc = replace(cfg.train, image_size=corpus.image_size)
            result = attrsel.subset_study(corpus, cfg.k_values, cfg.repeats, tc,
                                          base_seed=tc.seed)
            attrsel.save_subset_study(result, run_dir / "subset_study.json")
            for k in sorted(result.per_k):
                row = result.per_k[k]
                print(f"k={k}: rank-1 {row['mean']:.4f} +- {row['std']:.4f}")
        return 0

    if args.command == "ablate":
        rows = [int(r) for r in args.rows.split(",")] if args.rows else list(cfg.rows)
        seeds = _parse_seeds(args.seeds, cfg.seeds)
        with run_dir_cm as run_dir:
            corpus = _load_corpus_arg(args)
            _write_provenance(run_dir, cfg, args.corpus)
            tc = replace(cfg.train, image_size=corpus.image_size)
            results = abl.run_ablation(corpus, rows, seeds, tc)
            abl.save_results(results, run_dir / "ablation.json")
            table = abl.format_table(results)
            (run_dir / "ablation.txt").write_text(table, encoding="utf-8")
            print(table, end="")
        return 0

    if args.command == "sweep":
        seeds = _parse_seeds(args.seeds, cfg.seeds)
        with run_dir_cm as run_dir:
            corpus = _load_corpus_arg(args)
            _write_provenance(run_dir, cfg, args.corpus)
            tc = replace(cfg.train, image_size=corpus.image_size)
            results = abl.sweep_tradeoffs(corpus, cfg.grid, seeds, tc)
            abl.save_results(results, run_dir / "sweep.json")
            for name, curve in results.curves.items():
                for value, stats in curve.items():
                    print(f"{name}={value}: rank-1 {stats['mean_r1']:.4f}")
        return 0

    raise UsageError(f"unknown subcommand {args.command!r}")


def main() -> None:
    sys.exit(cli_dispatch(sys.argv[1:]))


if __name__ == "__main__":
    main()
