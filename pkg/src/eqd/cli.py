"""Command-line entry point: ``eqd pretrain|prepare|finetune|discover|bench``.

Exit codes: 0 success, 2 configuration or usage error, 3 pipeline failure,
4 no valid candidate found.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from . import bench
from .config import RunConfig, load_config
from .errors import ConfigError, NoValidCandidate
from .expr import evaluate_batch, render_infix, serialize_prefix, to_text
from .finetune import build_quadruples, load_quadruples, run_finetune, sample_subsets, save_quadruples
from .nn import EquationModel
from .search import discover, save_candidate_log
from .seeding import rng_stream
from .surrogate import build_corpus, load_checkpoint, load_corpus, pretrain, save_checkpoint, save_corpus

log = logging.getLogger("eqd")

EXIT_OK, EXIT_CONFIG, EXIT_PIPELINE, EXIT_NO_CANDIDATE = 0, 2, 3, 4
BUNDLED_SURROGATE = Path(__file__).parent / "data" / "surrogate.eqck"


class UsageError(Exception):
    pass


def _check_out(path: str | Path, force: bool) -> Path:
    p = Path(path)
    if p.exists() and not force:
        raise UsageError(f"{p} already exists; pass --force to overwrite")
    if p.parent and not p.parent.exists():
        p.parent.mkdir(parents=True, exist_ok=True)
    return p


def _split_data(cfg: RunConfig, data_path: str):
    X, y = bench.read_table(data_path)
    (Xtr, ytr), (Xte, yte) = bench.split(X, y, cfg.bench.split_ratio, rng_stream(cfg.master_seed, "split"))
    ytr = bench.inject_noise(ytr, cfg.bench.noise, rng_stream(cfg.master_seed, "noise"))
    return Xtr, ytr, Xte, yte


def cmd_pretrain(args, cfg: RunConfig) -> int:
    out = _check_out(args.out, args.force)
    pc = cfg.pretrain
    corpus_path = args.corpus or cfg.paths.corpus
    if corpus_path and Path(corpus_path).exists():
        corpus = load_corpus(corpus_path)
        print(f"loaded corpus of {len(corpus)} examples from {corpus_path}")
    else:
        corpus = build_corpus(rng_stream(cfg.master_seed, "corpus"), pc.corpus_size, pc.num_vars_range,
                              pc.depth_range, pc.rows_per_example)
        if corpus_path:
            save_corpus(corpus_path, corpus)
    model = EquationModel.initialize(cfg.model, rng_stream(cfg.master_seed, "surrogate-init"))
    model, curve = pretrain(model, corpus, pc.epochs, pc.lr, pc.batch_size, rng_stream(cfg.master_seed, "pretrain"))
    model.metadata["seed"] = cfg.master_seed
    digest = save_checkpoint(out, model, seed=cfg.master_seed, kind="surrogate")
    if curve:
        print(f"loss: first epoch {curve[0]:.4f}, last epoch {curve[-1]:.4f} over {len(curve)} epochs")
    print(f"wrote {out} (sha256 {digest})")
    return EXIT_OK


def cmd_prepare(args, cfg: RunConfig) -> int:
    out = _check_out(args.out, args.force)
    Xtr, ytr, _, _ = _split_data(cfg, args.data)
    model = load_checkpoint(args.model, rng_stream(cfg.master_seed, "init"))
    fc = cfg.finetune
    subsets = sample_subsets(Xtr, ytr, fc.num_subsets, fc.subset_rows, rng_stream(cfg.master_seed, "subsets"))
    quads = build_quadruples(subsets, model, cfg.fitness, rng_stream(cfg.master_seed, "prepare"),
                             fc.random_mix_ratio, fc.suggest_mode, fc.suggest_temperature)
    save_quadruples(out, quads)
    best = max(q.r for q in quads)
    print(f"wrote {len(quads)} quadruples to {out} (best fitness {best:.4f})")
    return EXIT_OK


def cmd_finetune(args, cfg: RunConfig) -> int:
    out = _check_out(args.out, args.force)
    quads = load_quadruples(args.quadruples)
    model = load_checkpoint(args.model, rng_stream(cfg.master_seed, "init"))
    fc = cfg.finetune
    if args.unfreeze_all:
        fc = type(fc)(**{**fc.__dict__, "unfreeze_all": True})
    result = run_finetune(model, quads, fc, rng_stream(cfg.master_seed, "finetune"))
    for row in result.metrics:
        print(f"epoch {row['epoch']}: L {row['loss']:.6f}  L_est {row['loss_est']:.6f}  L_rec {row['loss_rec']:.6f}")
    digest = save_checkpoint(out, model, seed=cfg.master_seed, kind="finetuned")
    print(f"wrote {out} (sha256 {digest}); {len(result.frozen)} tensors frozen")
    return EXIT_OK


def cmd_discover(args, cfg: RunConfig) -> int:
    out = _check_out(args.out, args.force)
    Xtr, ytr, Xte, yte = _split_data(cfg, args.data)
    model = load_checkpoint(args.model, rng_stream(cfg.master_seed, "init"))
    quads = load_quadruples(args.quadruples)
    res = discover(model, Xtr, ytr, quads, cfg.search, rng_stream(cfg.master_seed, "search"))
    save_candidate_log(out, res)
    best = res.best
    pred, flagged = evaluate_batch(best.tree, Xte)
    r2_test = None if flagged.any() else bench.r2_score(yte, pred)
    print(f"infix:    {render_infix(best.tree)}")
    print(f"prefix:   {to_text(serialize_prefix(best.tree))}")
    print(f"r2_train: {best.r2_train:.6f}")
    print(f"r2_test:  {r2_test if not isinstance(r2_test, float) else f'{r2_test:.6f}'}")
    print(f"candidates: {len(res.log)} (early stop: {res.stopped_early})")
    return EXIT_OK


def cmd_bench(args, cfg: RunConfig) -> int:
    out = Path(args.out)
    if out.exists() and any(out.iterdir()) and not args.force:
        raise UsageError(f"{out} is not empty; pass --force to overwrite")
    if args.suite == "toy":
        tasks = bench.toy_suite()
    else:
        suite_dir = Path(args.suite)
        files = sorted(suite_dir.glob("*.jsonl"))
        if not files:
            raise UsageError(f"no *.jsonl task files in {suite_dir}")
        tasks = []
        for f in files:
            X, _ = bench.read_table(f)
            tasks.append(bench.TaskSpec(f.stem, num_vars=X.shape[1], rows=len(X), data_path=str(f)))
    ablations = [a for chunk in args.ablation for a in chunk.split(",")] or ["full"]
    for a in ablations:
        if a not in bench.ABLATIONS:
            raise UsageError(f"unknown ablation {a!r}; choose from {', '.join(bench.ABLATIONS)}")
    model_path = args.model or BUNDLED_SURROGATE
    surrogate = load_checkpoint(model_path, rng_stream(cfg.master_seed, "init"))
    reports = bench.run_suite(tasks, cfg, ablations, bench.pretrained_arrays(surrogate), out)
    for rep in reports.values():
        print(rep.to_text())
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="eqd", description="Fine-tune a pretrained equation model on one dataset "
                                "and search its embedding space for a closed-form fit.")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, out_help):
        sp.add_argument("--config", help="run-config JSON (defaults when omitted)")
        sp.add_argument("--out", required=True, help=out_help)
        sp.add_argument("--force", action="store_true", help="overwrite existing output")

    sp = sub.add_parser("pretrain", help="build a synthetic corpus and train the surrogate")
    common(sp, "checkpoint file to write")
    sp.add_argument("--corpus", help="corpus JSONL to read (if present) or write")
    sp.set_defaults(func=cmd_pretrain)

    sp = sub.add_parser("prepare", help="build the quadruple training set for one dataset")
    common(sp, "quadruple JSONL to write")
    sp.add_argument("--data", required=True, help="data table JSONL ({\"x\": [...], \"y\": v} per line)")
    sp.add_argument("--model", required=True, help="surrogate checkpoint")
    sp.set_defaults(func=cmd_prepare)

    sp = sub.add_parser("finetune", help="fine-tune on a quadruple file")
    common(sp, "fine-tuned checkpoint to write")
    sp.add_argument("--quadruples", required=True, help="quadruple JSONL from 'prepare'")
    sp.add_argument("--model", required=True, help="surrogate checkpoint")
    sp.add_argument("--unfreeze-all", action="store_true", help="train every tensor (ablation)")
    sp.set_defaults(func=cmd_finetune)

    sp = sub.add_parser("discover", help="search for the best equation")
    common(sp, "candidate log JSONL to write")
    sp.add_argument("--data", required=True, help="data table JSONL")
    sp.add_argument("--model", required=True, help="fine-tuned checkpoint")
    sp.add_argument("--quadruples", required=True, help="quadruple JSONL used for initial points")
    sp.set_defaults(func=cmd_discover)

    sp = sub.add_parser("bench", help="run a task suite under one or more ablations")
    common(sp, "report directory")
    sp.add_argument("--suite", default="toy", help="'toy' for the bundled suite or a directory of task JSONL files")
    sp.add_argument("--ablation", action="append", default=[],
                    help=f"one of {', '.join(bench.ABLATIONS)}; repeat or comma-separate for several")
    sp.add_argument("--model", help="surrogate checkpoint (defaults to the bundled one)")
    sp.set_defaults(func=cmd_bench)
    return p


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = load_config(args.config)
        return args.func(args, cfg)
    except (ConfigError, UsageError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except NoValidCandidate as exc:
        print(f"error: {exc} {json.dumps(exc.diagnostics)}", file=sys.stderr)
        return EXIT_NO_CANDIDATE
    except Exception as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_PIPELINE


if __name__ == "__main__":
    sys.exit(main())
