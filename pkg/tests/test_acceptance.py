"""Acceptance suite: one PASS/FAIL/BLOCKED line per criterion.

Criteria 3-6 and 10 run on synthetic data. The others need external inputs, located through
environment variables, and report BLOCKED when they are absent:

    OKGIT_DATA_ROOT        directory with ReVerb20K, ReVerb45K, ReVerb20KF, ReVerb45KF subdirectories
                           (canonical TSV layout or a CaRE-style release, converted on the fly)
    OKGIT_MODEL_MLM_BASE   local weights of the base masked LM
    OKGIT_TYPER            typer results (sentence<TAB>mention<TAB>types) covering ReVerb20KF test predictions
    OKGIT_FREEBASE         directory with triples.tsv, types.tsv and optionally human.tsv
    OKGIT_TRAIN_FRACTION   training-triple fraction for reproduction runs (0.5 on CPU-only machines)
    OKGIT_WORKDIR          where caches and checkpoints of reproduction runs are kept (default: a temp dir)

Run with ``pytest tests/test_acceptance.py -v`` or ``python tests/test_acceptance.py``.
"""

from __future__ import annotations

import json
import math
import os
import shutil
import sys
import tempfile
import time
from pathlib import Path

import numpy as np
import pytest
import torch

sys.path.insert(0, str(Path(__file__).parent))

from conftest import build_tiny_mlm, toy_lm_vocab, write_random_cache  # noqa: E402
from gradutil import fd_relative_errors  # noqa: E402
from manifests import snapshot, write_manifest  # noqa: E402
from toykg import make_toy_kg  # noqa: E402

from okgit.dataset import ClusterMap, OpenKG, Triple, augment_inverse_relations, convert_care_release, filter_single_token, load_openkg, save_openkg  # noqa: E402
from okgit.evaluation import (  # noqa: E402
    TypedKG,
    TyperResults,
    cluster_rank,
    compute_metrics,
    evaluate_link_prediction,
    freebase_type_probe,
    link_prediction_ranks,
    paired_f1_samples,
    significance_tests,
    type_compat_f1_from_predictions,
)
from okgit.lm_context import ContextVectorCache, MLMProvider, queries_for, warm_cache  # noqa: E402
from okgit.reports import ExperimentManifest, run_manifest  # noqa: E402
from okgit.training import TrainConfig, build_model, fit, load_checkpoint, total_loss  # noqa: E402
from okgit.typecomp import combined_score, type_score  # noqa: E402

# Reference values and tolerances.
REVERB20KF_OKGIT = {"MRR": 34.6, "Hits@10": 50.2}
REVERB20KF_CARE_MRR = 29.3
MRR_TOL, H10_TOL = 2.0, 2.5
GAP_FULL, GAP_DOWNSAMPLED = 3.0, 2.0
FULL_MRR = {"ReVerb20K": 35.9, "ReVerb45K": 33.2}
OPTIMAL = {"type_dim": 300, "lambda": 0.001, "gamma": 5.0, "provider": "mlm-base"}
DATASET_STATS = {
    "ReVerb20K": {"nps": 11064, "rps": 11057, "clusters": 10897, "train": 15498, "valid": 1549, "test": 2324},
    "ReVerb45K": {"nps": 27007, "rps": 21622, "clusters": 18626, "train": 35969, "valid": 3597, "test": 5394},
    "ReVerb20KF": {"nps": 3524, "rps": 6076, "clusters": 3406, "train": 6685, "valid": 1015, "test": 1517},
    "ReVerb45KF": {"nps": 9400, "rps": 11249, "clusters": 6749, "train": 14775, "valid": 1781, "test": 2650},
}
TYPE_F1 = {"okgit": 0.30, "care": 0.23}
TYPE_F1_TOL = 0.05
PROBE = {"lm_f1": 0.36, "random_f1": 0.10, "lm_recall": 0.40, "mft_recall": 0.30}
PROBE_TOL = 0.05
ORACLE_INSTANCES, ORACLE_MAX_NPS = 1000, 30
GRAD_TOL = 1e-4
ABLATION_TRIPLES, ABLATION_TOL = 1000, 1e-6
TYPE_PAIRS, ARITH_TOL = 10_000, 1e-5
TIME_LIMIT_S = 60.0

RESULTS: dict[int, tuple[str, str]] = {}
_STATE: dict = {}


class Blocked(Exception):
    pass


def record(n: int, name: str, fn) -> tuple[str, str]:
    try:
        ok, detail = fn()
        status = "PASS" if ok else "FAIL"
    except Blocked as exc:
        status, detail = "BLOCKED", str(exc)
    line = f"{status:7s} criterion {n:2d} {name}: {detail}"
    RESULTS[n] = (status, line)
    print(line)
    return status, detail


def check(n: int, name: str, fn) -> None:
    status, detail = record(n, name, fn)
    if status == "BLOCKED":
        pytest.skip(detail)
    assert status == "PASS", detail


@pytest.fixture(scope="module", autouse=True)
def summary(request):
    yield
    reporter = request.config.pluginmanager.getplugin("terminalreporter")
    if reporter is None:
        return
    reporter.write_sep("=", "acceptance criteria")
    for n in sorted(RESULTS):
        reporter.write_line(RESULTS[n][1])


# ---------------------------------------------------------------- external inputs


def _env_path(var: str) -> Path:
    value = os.environ.get(var)
    if not value or not Path(value).exists():
        raise Blocked(f"{var} not set or missing")
    return Path(value)


def _workdir() -> Path:
    if "workdir" not in _STATE:
        base = os.environ.get("OKGIT_WORKDIR")
        _STATE["workdir"] = Path(base) if base else Path(tempfile.mkdtemp(prefix="okgit-acceptance-"))
    return _STATE["workdir"]


def dataset_dir(name: str) -> Path:
    """Canonical-layout directory for ``name``; CaRE-style releases are converted once."""
    src = _env_path("OKGIT_DATA_ROOT") / name
    if (src / "npvocab.txt").exists():
        return src
    conv = _workdir() / "data" / name
    if (conv / "npvocab.txt").exists():
        return conv
    if src.is_dir():
        convert_care_release(src, conv)
        return conv
    if name.endswith("F"):
        # Filtered variants can be derived from the full dataset with the base LM vocabulary.
        full = dataset_dir(name[:-1])
        provider = MLMProvider("mlm-base", _env_path("OKGIT_MODEL_MLM_BASE"))
        tok = provider.tokenizer
        save_openkg(filter_single_token(load_openkg(full), set(tok.get_vocab()), lambda s: tok.tokenize(s.lower())), conv)
        return conv
    raise Blocked(f"dataset {name} not found under OKGIT_DATA_ROOT")


def train_fraction() -> float:
    return float(os.environ.get("OKGIT_TRAIN_FRACTION", "1.0"))


def mlm_cache(name: str) -> Path:
    model_dir = _env_path("OKGIT_MODEL_MLM_BASE")
    data = dataset_dir(name)
    kg = augment_inverse_relations(load_openkg(data))
    path = _workdir() / f"{name}-mlm-base.okgc"
    provider = MLMProvider("mlm-base", model_dir)
    cache = ContextVectorCache.open(path) if path.exists() else ContextVectorCache.create(path, provider.header_id, provider.dim)
    warm_cache(cache, provider, kg, queries_for(kg))
    return path


def reproduction_run(name: str, care: bool) -> Path:
    """Train (or reuse) the optimal OKGIT configuration or its gamma=lambda=0 counterpart."""
    out = _workdir() / f"{name}-{'care' if care else 'okgit'}-f{train_fraction()}"
    if (out / "params.bin").exists():
        return out
    data = dataset_dir(name)
    d = {**OPTIMAL, "data": str(data), "cache": str(mlm_cache(name)), "train_fraction": train_fraction(), "seed": 0}
    if care:
        d.update(gamma=0.0, **{"lambda": 0.0})
    fit(augment_inverse_relations(load_openkg(data)), TrainConfig.from_json(d), out)
    return out


def split_metrics(ckpt: Path, split: str = "test") -> dict:
    model, _, kg = load_checkpoint(ckpt)
    return evaluate_link_prediction(model, kg, split)["metrics"]


# ---------------------------------------------------------------- criteria


def criterion_1():
    okgit = split_metrics(reproduction_run("ReVerb20KF", care=False))
    care = split_metrics(reproduction_run("ReVerb20KF", care=True))
    gap = okgit["MRR"] - care["MRR"]
    _STATE["gap_ok"] = gap >= (GAP_FULL if train_fraction() >= 1.0 else GAP_DOWNSAMPLED)
    detail = f"OKGIT MRR {okgit['MRR']:.1f} H@10 {okgit['Hits@10']:.1f}, gamma=lambda=0 MRR {care['MRR']:.1f}, gap {gap:+.1f}"
    if train_fraction() < 1.0:
        return _STATE["gap_ok"], detail + f" (train fraction {train_fraction()}, gap only)"
    bands = (
        abs(okgit["MRR"] - REVERB20KF_OKGIT["MRR"]) <= MRR_TOL
        and abs(okgit["Hits@10"] - REVERB20KF_OKGIT["Hits@10"]) <= H10_TOL
        and abs(care["MRR"] - REVERB20KF_CARE_MRR) <= MRR_TOL
    )
    return bands and _STATE["gap_ok"], detail


def criterion_2():
    parts, ok = [], True
    for name, target in FULL_MRR.items():
        mrr = split_metrics(reproduction_run(name, care=False))["MRR"]
        ok &= abs(mrr - target) <= MRR_TOL
        parts.append(f"{name} MRR {mrr:.1f} (target {target} +/- {MRR_TOL})")
    return ok, "; ".join(parts)


def brute_cluster_rank(ranking, assign, gold):
    seen = []
    for e in ranking:
        if assign[e] == assign[gold]:
            return len(seen) + 1
        if assign[e] not in seen:
            seen.append(assign[e])
    raise AssertionError("gold missing")


def brute_metrics(pairs):
    ranks = [r for p in pairs for r in p]
    n = len(ranks)
    out = {"MRR": 100.0 * math.fsum(1.0 / r for r in ranks) / n, "MR": sum(ranks) / n}
    for k in (1, 3, 10):
        out[f"Hits@{k}"] = 100.0 * sum(1 for r in ranks if r <= k) / n
    return out


def criterion_3():
    t0 = time.perf_counter()
    rng = np.random.default_rng(0)
    mismatches, pairs = 0, []
    for _ in range(ORACLE_INSTANCES):
        n = int(rng.integers(1, ORACLE_MAX_NPS + 1))
        raw = rng.integers(0, int(rng.integers(1, n + 1)), size=n)
        dense: dict[int, int] = {}
        assign = [dense.setdefault(int(x), len(dense)) for x in raw]
        clusters = ClusterMap(assign)
        scores = rng.standard_normal(n).round(1)  # rounding forces score ties
        ranking = sorted(range(n), key=lambda e: (-scores[e], e))
        gh, gt = int(rng.integers(n)), int(rng.integers(n))
        rh, rt = cluster_rank(ranking, clusters, gh), cluster_rank(ranking, clusters, gt)
        mismatches += (rh, rt) != (brute_cluster_rank(ranking, assign, gh), brute_cluster_rank(ranking, assign, gt))
        pairs.append((rh, rt))
    got, want = compute_metrics(pairs), brute_metrics(pairs)
    metric_diff = max(abs(got[k] - want[k]) for k in want)
    elapsed = time.perf_counter() - t0
    ok = mismatches == 0 and metric_diff == 0.0 and elapsed < TIME_LIMIT_S
    return ok, f"{mismatches} rank mismatches over {ORACLE_INSTANCES} instances, max metric diff {metric_diff:.1e}, {elapsed:.1f}s"


def _grad_kg():
    nps = ["bach", "leipzig", "mozart", "vienna", "salzburg"]
    train = [Triple(0, 0, 1), Triple(2, 0, 3), Triple(2, 1, 4), Triple(0, 1, 1)]
    return augment_inverse_relations(OpenKG(nps, ["moved to", "born in"], train, [Triple(2, 0, 4)], [], ClusterMap([0, 1, 2, 3, 3])))


def criterion_4():
    t0 = time.perf_counter()
    kg = _grad_kg()
    with tempfile.TemporaryDirectory() as tmp:
        cache = Path(tmp) / "c.okgc"
        write_random_cache(cache, kg, dim=6)
        cfg = TrainConfig(d_e=8, d_r=8, d_w=8, type_dim=4, gamma=1.0, lambda_=0.5, cache=str(cache), dtype="float64",
                          input_dropout=0.0, feature_dropout=0.0, hidden_dropout=0.0)
        model = build_model(kg, cfg).train()
    heads, rps = torch.tensor([0, 2, 1, 4]), torch.tensor([0, 1, 2, 3])
    labels = torch.zeros(4, 5, dtype=torch.float64)
    labels[0, 1] = labels[1, 4] = labels[2, 0] = labels[3, 2] = 1.0

    def loss():
        return total_loss(model, heads, rps, labels, cfg.lambda_, cfg.label_smoothing)[0].total

    errs = fd_relative_errors(loss, dict(model.named_parameters()))
    worst = max(errs, key=errs.get)
    elapsed = time.perf_counter() - t0
    ok = errs[worst] < GRAD_TOL and elapsed < TIME_LIMIT_S
    return ok, f"{len(errs)} tensors, max relative error {errs[worst]:.1e} ({worst}), {elapsed:.1f}s"


def criterion_5():
    kg = augment_inverse_relations(make_toy_kg())
    base = dict(d_e=8, d_r=8, d_w=8, type_dim=4, batch_size=16, epochs=3, eval_every=0, dtype="float64", seed=7)
    with tempfile.TemporaryDirectory() as tmp:
        cache = Path(tmp) / "c.okgc"
        write_random_cache(cache, kg)
        care = fit(kg, TrainConfig(**base, model="care"))["model"]
        okgit = fit(kg, TrainConfig(**base, model="okgit", gamma=0.0, lambda_=0.0, cache=str(cache)))["model"]
    rng = np.random.default_rng(0)
    h = torch.from_numpy(rng.integers(0, len(kg.nps), ABLATION_TRIPLES))
    r = torch.from_numpy(rng.integers(0, len(kg.rps), ABLATION_TRIPLES))
    t = torch.from_numpy(rng.integers(0, len(kg.nps), ABLATION_TRIPLES))
    with torch.no_grad():
        a = care.score_all(h, r).gather(1, t[:, None])
        b = okgit.score_all(h, r)[2].gather(1, t[:, None])
    diff = (a - b).abs().max().item()
    return diff < ABLATION_TOL, f"max |OKGIT - CaRE| {diff:.1e} over {ABLATION_TRIPLES} triples"


def criterion_6():
    rng = np.random.default_rng(0)
    a = torch.from_numpy(rng.standard_normal((TYPE_PAIRS, 16)))
    b = torch.from_numpy(rng.standard_normal((TYPE_PAIRS, 16)))
    equal = torch.from_numpy(rng.random(TYPE_PAIRS) < 0.5)
    b[equal] = a[equal]
    s = type_score(a, b)
    sign_ok = bool(torch.all(s <= 0))
    iff_ok = bool(torch.equal(s == 0, torch.all(a == b, dim=1)))

    kg = augment_inverse_relations(make_toy_kg())
    with tempfile.TemporaryDirectory() as tmp:
        cache = Path(tmp) / "c.okgc"
        write_random_cache(cache, kg)
        model = build_model(kg, TrainConfig(d_e=8, d_r=8, d_w=8, type_dim=4, gamma=5.0, cache=str(cache))).eval()
    worst = 0.0
    for _ in range(1000):
        h, r, t = int(rng.integers(len(kg.nps))), int(rng.integers(len(kg.rps))), int(rng.integers(len(kg.nps)))
        sb = combined_score(model, h, r, t)
        worst = max(worst, abs(sb.psi_okgit - (sb.psi_pred + model.gamma * sb.psi_type)))
    ok = sign_ok and iff_ok and worst < ARITH_TOL
    return ok, (f"{TYPE_PAIRS} pairs: max psi_type {s.max().item():.2e}, zero iff equal {iff_ok}; "
                f"max arithmetic residual {worst:.1e}")


def criterion_7():
    bad, checked = [], 0
    for name, want in DATASET_STATS.items():
        stats = load_openkg(dataset_dir(name)).stats()
        for key, value in want.items():
            checked += 1
            if stats[key] != value:
                bad.append(f"{name}.{key}={stats[key]} (want {value})")
    return not bad, f"{checked - len(bad)}/{checked} cells match" + (f"; {', '.join(bad)}" if bad else "")


def criterion_8():
    typer = TyperResults.read(_env_path("OKGIT_TYPER"))
    results = {}
    for tag in ("okgit", "care"):
        model, _, kg = load_checkpoint(reproduction_run("ReVerb20KF", care=tag == "care"))
        _, top1 = link_prediction_ranks(model, kg, "test")
        results[tag] = type_compat_f1_from_predictions(kg, "test", top1, typer)
    f1 = {t: r["f1"] for t, r in results.items()}
    sig = significance_tests(*paired_f1_samples(results["care"], results["okgit"]))
    if "gap_ok" not in _STATE:
        criterion_1()
    ok = f1["okgit"] >= f1["care"] and all(abs(f1[t] - TYPE_F1[t]) <= TYPE_F1_TOL for t in f1)
    if _STATE["gap_ok"]:
        ok &= sig["significant"]["permutation"]
    return ok, f"F1 OKGIT {f1['okgit']:.2f} vs CaRE {f1['care']:.2f}, permutation p {sig['permutation_p']:.3g}"


def criterion_9():
    root = _env_path("OKGIT_FREEBASE")
    provider = MLMProvider("mlm-base", _env_path("OKGIT_MODEL_MLM_BASE"))
    human = root / "human.tsv"
    typed = TypedKG.read(root / "triples.tsv", root / "types.tsv", human if human.exists() else None)
    typed = typed.single_token_subset(provider.is_single_token)
    table = freebase_type_probe(typed, lambda h, r: provider.top_tokens_for_text(h, r, 1)[0][0])["table"]
    lm, rnd, mft = table["lm"], table["random"], table["mft"]
    ok = (lm["f1"] - rnd["f1"] >= 0.15 and lm["recall"] - mft["recall"] >= 0.05
          and abs(lm["f1"] - PROBE["lm_f1"]) <= PROBE_TOL and abs(rnd["f1"] - PROBE["random_f1"]) <= PROBE_TOL
          and abs(lm["recall"] - PROBE["lm_recall"]) <= PROBE_TOL and abs(mft["recall"] - PROBE["mft_recall"]) <= PROBE_TOL)
    return ok, f"LM F1 {lm['f1']:.2f} vs Random {rnd['f1']:.2f}; LM recall {lm['recall']:.2f} vs MFT {mft['recall']:.2f}"


def criterion_10():
    with tempfile.TemporaryDirectory() as tmp:
        tmp = Path(tmp)
        kg = make_toy_kg()
        data = tmp / "data"
        save_openkg(kg, data)
        mlm = build_tiny_mlm(tmp / "mlm", toy_lm_vocab(kg))
        manifest = ExperimentManifest.read(write_manifest(tmp / "run", data, mlm, tmp / "run" / "out"))
        run_manifest(manifest)
        first = snapshot(Path(manifest.out))
        shutil.rmtree(manifest.out)
        run_manifest(manifest)
        second = snapshot(Path(manifest.out))
    differing = sorted(k for k in first.keys() | second.keys() if first.get(k) != second.get(k))
    ckpts = sum(1 for k in first if k.endswith("params.bin"))
    return not differing and ckpts == 2, f"{len(first)} files ({ckpts} checkpoints), {len(differing)} differ" + (
        f": {differing[:5]}" if differing else "")


CRITERIA = [
    (1, "ReVerb20KF reproduction band", criterion_1),
    (2, "full-dataset reproduction", criterion_2),
    (3, "metric oracle equivalence", criterion_3),
    (4, "full-loss gradient check", criterion_4),
    (5, "ablation identity", criterion_5),
    (6, "type-score contracts", criterion_6),
    (7, "dataset statistics", criterion_7),
    (8, "type-compatibility F1", criterion_8),
    (9, "entity-type probe", criterion_9),
    (10, "manifest determinism", criterion_10),
]


@pytest.mark.slow
def test_c01_reverb20kf_reproduction():
    check(*CRITERIA[0])


@pytest.mark.slow
def test_c02_full_dataset_reproduction():
    check(*CRITERIA[1])


def test_c03_metric_oracle():
    check(*CRITERIA[2])


def test_c04_gradients():
    check(*CRITERIA[3])


def test_c05_ablation_identity():
    check(*CRITERIA[4])


def test_c06_type_score_contracts():
    check(*CRITERIA[5])


def test_c07_dataset_statistics():
    check(*CRITERIA[6])


@pytest.mark.slow
def test_c08_type_compatibility_f1():
    check(*CRITERIA[7])


@pytest.mark.slow
def test_c09_entity_type_probe():
    check(*CRITERIA[8])


def test_c10_manifest_determinism():
    check(*CRITERIA[9])


if __name__ == "__main__":
    torch.use_deterministic_algorithms(True)
    statuses = [record(n, name, fn)[0] for n, name, fn in CRITERIA]
    print(json.dumps({s: statuses.count(s) for s in ("PASS", "FAIL", "BLOCKED")}))
    sys.exit(1 if "FAIL" in statuses else 0)
