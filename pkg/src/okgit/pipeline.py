"""Stages executed by ``run_manifest``. Each takes (manifest, state, manifest-hash) and returns
the entries it adds to the shared state; the result is stored in the stage marker."""

from __future__ import annotations

import json
from pathlib import Path

from . import checkpoint as ckpt
from .dataset import convert_care_release, filter_single_token, load_openkg, save_openkg
from .evaluation import (
    TyperResults,
    evaluate_link_prediction,
    link_prediction_ranks,
    paired_f1_samples,
    significance_tests,
    type_compat_f1_from_predictions,
)
from .lm_context import LIVE_PROVIDERS, ContextVectorCache, MLMProvider, TypingDistributions, queries_for, warm_cache, write_typing_cache
from .reports import (
    dump_topk_predictions,
    export_tsne,
    format_prediction_table,
    read_annotations,
    read_queries,
    stamp,
    tsne_csv,
)
from .training import Grid, TrainConfig, fit, grid_search, load_checkpoint, load_training_kg


def lm_tokenizer(vocab_file: str | None = None, model_path: str | None = None):
    """(token set, tokenize) from a WordPiece vocab file or a provider's own tokenizer."""
    if vocab_file:
        from transformers import BertTokenizer

        words = Path(vocab_file).read_text(encoding="utf-8").splitlines()
        tok = BertTokenizer(vocab={w: i for i, w in enumerate(words)}, do_lower_case=True)
    else:
        from transformers import AutoTokenizer

        tok = AutoTokenizer.from_pretrained(model_path)
    return set(tok.get_vocab()), lambda s: tok.tokenize(s.lower())


def stage_prepare(m, state, digest):
    out = Path(m.out)
    src = m.data
    if m.care_release:
        convert_care_release(m.care_release, out / "data_raw")
        src = str(out / "data_raw")
    if m.prepare.get("filter_single_token"):
        vocab, tokenize = lm_tokenizer(m.prepare.get("lm_vocab"), m.prepare.get("model_path"))
        kg = filter_single_token(load_openkg(src), vocab, tokenize)
        save_openkg(kg, out / "data")
        src = str(out / "data")
    kg = load_openkg(src)
    ckpt.write_json(out / "dataset_stats.json", kg.stats())
    return {"data_dir": src}


def stage_extract(m, state, digest):
    out = Path(m.out)
    providers = m.extract.get("providers") or [m.extract.get("provider", "mlm-base")]
    model_paths = m.extract.get("model_paths", {})
    kg = load_training_kg(state["data_dir"])
    caches = {}
    for pid in providers:
        if pid in LIVE_PROVIDERS:
            continue
        path = out / f"context-{pid}.okgc"
        queries = queries_for(kg)
        if pid == "typing":
            if path.exists():
                path.unlink()
                path.with_name(path.name + ".idx").unlink(missing_ok=True)
            write_typing_cache(path, TypingDistributions.read(m.extract["typer_dist"]), queries)
        else:
            provider = MLMProvider(pid, model_paths.get(pid))
            cache = ContextVectorCache.open(path) if path.exists() else ContextVectorCache.create(path, provider.header_id, provider.dim)
            warm_cache(cache, provider, kg, queries)
        caches[pid] = str(path)
    return {"caches": caches}


def _config(m, state, overrides: dict) -> TrainConfig:
    d = {"seed": m.seed, **overrides, "data": state["data_dir"]}
    cfg = TrainConfig.from_json(d)
    if cfg.model == "okgit" and cfg.provider not in LIVE_PROVIDERS:
        cfg.cache = state["caches"][cfg.provider]
    return cfg


def stage_train(m, state, digest):
    out = Path(m.out)
    kg = load_training_kg(state["data_dir"])
    result = {}
    if m.grid:
        base = _config(m, state, {**m.grid.get("base", {}), "model": "okgit", "provider": m.grid["grid"].get("provider", ["mlm-base"])[0]})
        g = grid_search(kg, state["caches"], Grid.from_json(m.grid["grid"]), base, out / "grid")
        result["checkpoint"] = str(g["checkpoint"])
    elif m.train:
        train = dict(m.train)
        baseline = train.pop("baseline_care", False)
        cfg = _config(m, state, train)
        fit(kg, cfg, out / "checkpoint")
        result["checkpoint"] = str(out / "checkpoint")
        if baseline:
            care = _config(m, state, {**train, "model": "care", "gamma": 0.0, "lambda": 0.0})
            fit(kg, care, out / "checkpoint-care")
            result["baseline_checkpoint"] = str(out / "checkpoint-care")
    else:
        raise ValueError("manifest needs a 'train' or 'grid' section")
    return result


def _write_report(path: Path, report: dict) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(report, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def stage_eval(m, state, digest):
    out = Path(m.out) / "reports"
    filtered = m.eval.get("filtered", True)
    written = []
    for tag, key in (("okgit", "checkpoint"), ("care", "baseline_checkpoint")):
        if key not in state:
            continue
        model, cfg, kg = load_checkpoint(state[key])
        for split in m.eval.get("splits", ["test"]):
            rep = stamp(evaluate_link_prediction(model, kg, split, filtered), digest, m.seed, cfg.to_json())
            path = out / f"eval-{tag}-{split}.json"
            _write_report(path, rep)
            written.append(str(path))
    return {"eval_reports": written}


def stage_reports(m, state, digest):
    out = Path(m.out) / "reports"
    opts = m.reports
    written = []
    models = {"okgit": load_checkpoint(state["checkpoint"])}
    if "baseline_checkpoint" in state:
        models["care"] = load_checkpoint(state["baseline_checkpoint"])
    if "dump" in opts:
        queries = read_queries(opts["dump"]["queries"])
        k = opts["dump"].get("k", 5)
        cols = {tag: dump_topk_predictions(model, kg, queries, k) for tag, (model, _, kg) in models.items()}
        path = out / "predictions.tsv"
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(format_prediction_table(cols), encoding="utf-8")
        written.append(str(path))
    if "tsne" in opts:
        t = opts["tsne"]
        for tag, (model, _, kg) in models.items():
            space = "type" if tag == "okgit" else "np"
            rows = export_tsne(model, read_annotations(t["annotations"], kg), space, t.get("perplexity", 15.0), seed=m.seed)
            path = out / f"tsne-{tag}-{space}.csv"
            path.write_text(tsne_csv(rows), encoding="utf-8")
            written.append(str(path))
    if "type_eval" in opts:
        typer = TyperResults.read(opts["type_eval"]["typer"])
        split = opts["type_eval"].get("split", "test")
        results = {}
        for tag, (model, _, kg) in models.items():
            _, top1 = link_prediction_ranks(model, kg, split, m.eval.get("filtered", True))
            results[tag] = type_compat_f1_from_predictions(kg, split, top1, typer)
        metrics = {"f1": {tag: r["f1"] for tag, r in results.items()}, "skipped": {tag: r["skipped"] for tag, r in results.items()}}
        if "care" in results:
            a, b = paired_f1_samples(results["care"], results["okgit"])
            metrics["significance"] = significance_tests(a, b, seed=m.seed)
        rep = {"split": split, "metrics": metrics}
        rep["per_triple"] = {tag: r["per_triple"] for tag, r in results.items()}
        path = out / "type_eval.json"
        _write_report(path, stamp(rep, digest, m.seed))
        written.append(str(path))
    return {"report_files": written}


STAGES = [
    ("prepare", stage_prepare),
    ("extract", stage_extract),
    ("train", stage_train),
    ("eval", stage_eval),
    ("reports", stage_reports),
]
