"""Command-line entry point: ``okgit <command> ...``."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from . import checkpoint as ckpt
from .dataset import DatasetError, convert_care_release, filter_single_token, load_openkg, save_openkg
from .evaluation import (
    EvaluationError,
    TypedKG,
    TyperResults,
    evaluate_link_prediction,
    freebase_type_probe,
    link_prediction_ranks,
    paired_f1_samples,
    significance_tests,
    type_compat_f1_from_predictions,
    typer_requests,
)
from .lm_context import (
    LIVE_PROVIDERS,
    ContextError,
    ContextVectorCache,
    LMScorer,
    TypingDistributions,
    load_provider,
    queries_for,
    warm_cache,
    write_typing_cache,
)
from .reports import (
    ExperimentManifest,
    ReportError,
    dump_topk_predictions,
    export_tsne,
    format_prediction_table,
    read_annotations,
    read_queries,
    run_manifest,
    sample_annotations,
    silhouette,
    stamp,
    tsne_csv,
)
from .training import Grid, TrainConfig, TrainingError, fit, grid_search, load_checkpoint, load_training_kg

logger = logging.getLogger("okgit")


def _write_report(path: str | None, report: dict) -> None:
    text = json.dumps(report, indent=2, sort_keys=True) + "\n"
    if path:
        Path(path).parent.mkdir(parents=True, exist_ok=True)
        Path(path).write_text(text, encoding="utf-8")
    else:
        sys.stdout.write(text)


def _parse_set(items: list[str]) -> dict:
    """``key=value`` overrides; values are parsed as JSON when possible."""
    out = {}
    for item in items:
        key, sep, value = item.partition("=")
        if not sep:
            raise ValueError(f"--set expects key=value, got {item!r}")
        try:
            out[key] = json.loads(value)
        except json.JSONDecodeError:
            out[key] = value
    return out


def _pairs(items: list[str]) -> dict[str, str]:
    out = {}
    for item in items:
        key, sep, value = item.partition("=")
        if not sep:
            raise ValueError(f"expected provider=path, got {item!r}")
        out[key] = value
    return out


# ---------------------------------------------------------------- commands


def cmd_prepare(args) -> int:
    """Validate a dataset. Optionally convert a release into --data first and filter it into --out."""
    if args.from_care_release:
        convert_care_release(args.from_care_release, args.data)
    kg = load_openkg(args.data)
    if args.filter_single_token:
        from .pipeline import lm_tokenizer

        vocab, tokenize = lm_tokenizer(args.lm_vocab, args.model_path)
        kg = filter_single_token(kg, vocab, tokenize)
        out = args.out or str(Path(args.data).resolve()) + "F"
        save_openkg(kg, out)
        print(f"filtered dataset written to {out}")
    print(json.dumps(kg.stats(), sort_keys=True))
    return 0


def cmd_extract(args) -> int:
    kg = load_training_kg(args.data)
    queries = queries_for(kg)
    if args.provider in LIVE_PROVIDERS:
        print(f"provider {args.provider} is computed during training; nothing to extract")
        return 0
    if args.provider == "typing":
        if not args.typer_dist:
            raise ContextError("typing provider needs --typer-dist")
        cache = write_typing_cache(args.out, TypingDistributions.read(args.typer_dist), queries)
        print(f"wrote {cache.count} typing vectors to {args.out}")
        return 0
    provider = load_provider(args.provider, args.model_path)
    path = Path(args.out)
    cache = ContextVectorCache.open(path) if path.exists() else ContextVectorCache.create(path, provider.header_id, provider.dim)
    added = warm_cache(cache, provider, kg, queries, batch_size=args.batch_size)
    print(f"added {added} vectors; cache holds {cache.count}")
    return 0


TRAIN_FLAGS = (("d_type", "type_dim"), ("gamma", "gamma"), ("lambda_", "lambda"), ("type_score", "type_score_variant"),
               ("seed", "seed"), ("provider", "provider"), ("model", "model"), ("epochs", "epochs"), ("train_fraction", "train_fraction"))


def cmd_train(args) -> int:
    d = ckpt.read_json(args.config) if args.config else {}
    for attr, key in TRAIN_FLAGS:
        if getattr(args, attr) is not None:
            d[key] = getattr(args, attr)
    d.update(_parse_set(args.set))
    d["data"] = str(Path(args.data).resolve())
    if args.cache:
        d["cache"] = str(Path(args.cache).resolve())
    config = TrainConfig.from_json(d)
    kg = load_training_kg(config.data)
    result = fit(kg, config, args.out)
    print(json.dumps({"best": result["best"], "checkpoint": args.out}, sort_keys=True))
    return 0


def cmd_grid(args) -> int:
    """grid.json: {"data": DIR, "caches": {provider: FILE}, "base": {config}, "grid": {key: [values]}}."""
    grid_file = ckpt.read_json(args.config)
    root = Path(args.config).resolve().parent
    rel = lambda p: str((root / p).resolve())  # noqa: E731
    data = str(Path(args.data).resolve()) if args.data else rel(grid_file["data"])
    base = TrainConfig.from_json({**grid_file.get("base", {}), "data": data})
    grid = Grid.from_json(grid_file.get("grid", {}))
    caches = {k: rel(v) for k, v in grid_file.get("caches", {}).items()}
    caches.update({k: str(Path(v).resolve()) for k, v in _pairs(args.provider_cache).items()})
    kg = load_training_kg(base.data)
    result = grid_search(kg, caches, grid, base, args.out)
    print(json.dumps({"best": result["best"]["id"], "metrics": result["best"]["metrics"], "checkpoint": str(result["checkpoint"])}, sort_keys=True))
    return 0


def cmd_eval(args) -> int:
    filtered = not args.unfiltered
    if args.lm_baseline:
        if not args.data:
            raise EvaluationError("--lm-baseline needs --data")
        kg = load_training_kg(args.data)
        model, config = LMScorer(load_provider(args.lm_baseline, args.model_path), kg), {"model": f"lm:{args.lm_baseline}"}
    else:
        model, cfg, kg = load_checkpoint(args.checkpoint)
        config = cfg.to_json()
    report = evaluate_link_prediction(model, kg, args.split, filtered)
    _write_report(args.report, stamp(report, None, config.get("seed", 0), config))
    if args.report:
        print(json.dumps(report["metrics"], sort_keys=True))
    return 0


def cmd_type_eval(args) -> int:
    models = {"okgit": load_checkpoint(args.checkpoint)}
    if args.baseline:
        models["care"] = load_checkpoint(args.baseline)
    top1 = {}
    for tag, (model, _, kg) in models.items():
        top1[tag] = link_prediction_ranks(model, kg, args.split, not args.unfiltered)[1]
    if args.emit_requests:
        reqs = sorted({r for tag, (_, _, kg) in models.items() for r in typer_requests(kg, top1[tag], args.split)})
        Path(args.emit_requests).write_text("".join(f"{s}\t{m}\n" for s, m in reqs), encoding="utf-8")
        print(f"wrote {len(reqs)} typer requests to {args.emit_requests}")
        return 0
    if not args.typer:
        raise EvaluationError("type-eval needs --typer (or --emit-requests)")
    typer = TyperResults.read(args.typer)
    results = {tag: type_compat_f1_from_predictions(kg, args.split, top1[tag], typer) for tag, (_, _, kg) in models.items()}
    metrics = {"f1": {t: r["f1"] for t, r in results.items()}, "skipped": {t: r["skipped"] for t, r in results.items()}}
    if "care" in results:
        a, b = paired_f1_samples(results["care"], results["okgit"])
        metrics["significance"] = significance_tests(a, b, alpha=args.alpha, seed=args.seed)
    report = {"split": args.split, "metrics": metrics}
    report["per_triple"] = {t: r["per_triple"] for t, r in results.items()}
    _write_report(args.report, stamp(report, None, args.seed, models["okgit"][1].to_json()))
    return 0


def cmd_probe_types(args) -> int:
    typed = TypedKG.read(args.triples, args.types, args.human)
    provider = load_provider(args.provider, args.model_path)
    if args.single_token:
        typed = typed.single_token_subset(provider.is_single_token)
    probe = freebase_type_probe(typed, lambda h, r: provider.top_tokens_for_text(h, r, 1)[0][0], seed=args.seed)
    report = {"metrics": probe["table"], "skipped": probe["skipped"], "n_triples": probe["n_triples"], "provider": args.provider}
    _write_report(args.report, stamp(report, None, args.seed))
    return 0


def cmd_run(args) -> int:
    out = run_manifest(ExperimentManifest.read(args.manifest))
    print(f"pipeline complete: {out}")
    return 0


def cmd_dump(args) -> int:
    queries = read_queries(args.queries)
    cols = {}
    for item in args.ckpt:
        name, sep, path = item.partition("=")
        name, path = (name, path) if sep else (Path(item).name, item)
        model, _, kg = load_checkpoint(path)
        cols[name] = dump_topk_predictions(model, kg, queries, args.k)
    text = format_prediction_table(cols)
    if args.out:
        Path(args.out).write_text(text, encoding="utf-8")
    else:
        sys.stdout.write(text)
    return 0


def cmd_tsne(args) -> int:
    model, _, kg = load_checkpoint(args.ckpt)
    ann = read_annotations(args.annotations, kg)
    if args.per_label:
        ann = sample_annotations(ann, args.per_label, args.seed)
    rows = export_tsne(model, ann, args.space, args.perplexity, seed=args.seed)
    Path(args.out).write_text(tsne_csv(rows), encoding="utf-8")
    print(json.dumps({"points": len(rows), "silhouette": silhouette(rows) if len({r["label"] for r in rows}) > 1 else None}))
    return 0


# ---------------------------------------------------------------- parser


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="okgit", description="Type-aware OpenKG link prediction.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("prepare", help="validate a dataset, with optional conversion and filtering")
    s.add_argument("--data", required=True, help="dataset directory (the conversion target with --from-care-release)")
    s.add_argument("--from-care-release", metavar="DIR", help="convert a CaRE-format release into --data first")
    s.add_argument("--out", help="where the filtered dataset goes (default: DATA with an F suffix)")
    s.add_argument("--filter-single-token", action="store_true")
    s.add_argument("--lm-vocab", help="WordPiece vocab.txt used for the single-token filter")
    s.add_argument("--model-path", help="tokenizer location when --lm-vocab is not given")
    s.set_defaults(func=cmd_prepare)

    s = sub.add_parser("extract", help="build or extend a context-vector cache")
    s.add_argument("--data", required=True)
    s.add_argument("--provider", required=True)
    s.add_argument("--model-path")
    s.add_argument("--typer-dist", help="typer distributions for the typing provider")
    s.add_argument("--batch-size", type=int, default=64)
    s.add_argument("--out", required=True, help="cache file (.okgc)")
    s.set_defaults(func=cmd_extract)

    s = sub.add_parser("train", help="train one configuration")
    s.add_argument("--data", required=True)
    s.add_argument("--cache", help="context cache for the configured provider")
    s.add_argument("--config", help="JSON training configuration; flags override it")
    s.add_argument("--d-type", type=int)
    s.add_argument("--gamma", type=float)
    s.add_argument("--lambda", dest="lambda_", type=float)
    s.add_argument("--type-score", choices=("euclid", "dot"))
    s.add_argument("--provider")
    s.add_argument("--model", choices=("okgit", "care"))
    s.add_argument("--epochs", type=int)
    s.add_argument("--train-fraction", type=float)
    s.add_argument("--seed", type=int)
    s.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="any other config key")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("grid", help="hyperparameter grid search")
    s.add_argument("--config", required=True, help="grid.json with data, caches, base and grid sections")
    s.add_argument("--data", help="override the dataset directory")
    s.add_argument("--provider-cache", action="append", default=[], metavar="PROVIDER=PATH")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_grid)

    s = sub.add_parser("eval", help="filtered link-prediction metrics")
    s.add_argument("--checkpoint")
    s.add_argument("--split", default="test")
    s.add_argument("--unfiltered", action="store_true")
    s.add_argument("--lm-baseline", metavar="PROVIDER", help="rank with the masked LM alone")
    s.add_argument("--data", help="dataset for --lm-baseline")
    s.add_argument("--model-path")
    s.add_argument("--report")
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("type-eval", help="typer-based type-compatibility F1")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--baseline", help="CaRE checkpoint for the paired comparison")
    s.add_argument("--typer", help="typer results: sentence<TAB>mention<TAB>types")
    s.add_argument("--emit-requests", help="write the sentence/mention pairs the typer must label, then stop")
    s.add_argument("--split", default="test")
    s.add_argument("--unfiltered", action="store_true")
    s.add_argument("--alpha", type=float, default=0.05)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--report")
    s.set_defaults(func=cmd_type_eval)

    s = sub.add_parser("probe-types", help="entity-type probe of the masked LM")
    s.add_argument("--triples", required=True)
    s.add_argument("--types", required=True)
    s.add_argument("--human")
    s.add_argument("--provider", default="mlm-base")
    s.add_argument("--model-path")
    s.add_argument("--single-token", action="store_true", help="keep triples whose tail is one LM token")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--report")
    s.set_defaults(func=cmd_probe_types)

    s = sub.add_parser("run", help="run an experiment manifest end to end")
    s.add_argument("--manifest", required=True)
    s.set_defaults(func=cmd_run)

    s = sub.add_parser("dump", help="top-k cluster predictions for chosen queries")
    s.add_argument("--ckpt", action="append", required=True, metavar="[NAME=]DIR", help="repeat for side-by-side columns")
    s.add_argument("--queries", required=True, help="head<TAB>relation lines")
    s.add_argument("-k", type=int, default=5)
    s.add_argument("--out")
    s.set_defaults(func=cmd_dump)

    s = sub.add_parser("tsne", help="2-d t-SNE coordinates of annotated NPs")
    s.add_argument("--ckpt", required=True)
    s.add_argument("--annotations", required=True)
    s.add_argument("--space", choices=("np", "type"), default="type")
    s.add_argument("--perplexity", type=float, default=15.0)
    s.add_argument("--per-label", type=int, help="sample this many NPs per category first")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_tsne)
    return p


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    if args.command == "eval" and not (args.checkpoint or args.lm_baseline):
        print("okgit: error: eval needs --checkpoint or --lm-baseline", file=sys.stderr)
        return 2
    try:
        return args.func(args)
    except (DatasetError, ContextError, TrainingError, EvaluationError, ReportError, ValueError, FileNotFoundError) as exc:
        print(f"okgit: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
