"""Cluster-aware link-prediction ranking and metrics.

Also covers the typer-based F1 with its significance tests, and the Freebase implicit-type probe.
"""

from __future__ import annotations

import logging
import math
import random
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Sequence

import numpy as np
import torch
from scipy import stats

from .dataset import SPLITS, ClusterMap, OpenKG, Triple, query_index

logger = logging.getLogger(__name__)


class EvaluationError(Exception):
    pass


def ranking_from_scores(scores: np.ndarray, exclude: Iterable[int] = ()) -> np.ndarray:
    """NP ids by descending score, ties by ascending id, with ``exclude`` removed."""
    scores = np.asarray(scores, dtype=np.float64)
    ids = np.arange(len(scores))
    order = np.lexsort((ids, -scores))
    excl = list(exclude)
    if excl:
        keep = np.ones(len(scores), dtype=bool)
        keep[excl] = False
        order = order[keep[order]]
    return order


def cluster_rank(np_ranking: Sequence[int], clusters: ClusterMap, gold: int) -> int:
    """Rank of gold's cluster when each cluster is represented by its best-ranked member."""
    ranking = np.asarray(np_ranking)
    if not np.any(ranking == gold):
        raise EvaluationError(f"gold NP {gold} absent from ranking")
    cl = np.asarray(clusters.np_to_cluster)[ranking]
    _, first = np.unique(cl, return_index=True)
    gold_first = int(np.flatnonzero(cl == clusters.np_to_cluster[gold])[0])
    return int(np.sum(first < gold_first)) + 1


@dataclass
class RankResult:
    head: int
    rp: int
    tail: int
    rank_head: int
    rank_tail: int


def compute_metrics(ranks: Sequence[tuple[int, int]] | Sequence[RankResult]) -> dict[str, float]:
    """MRR and Hits@{1,3,10} scaled by 100; MR unscaled. Averaged over both directions."""
    pairs = [(r.rank_head, r.rank_tail) if isinstance(r, RankResult) else tuple(r) for r in ranks]
    if not pairs:
        raise EvaluationError("no ranks to aggregate")
    allr = [int(r) for p in pairs for r in p]
    n = len(allr)
    # Correctly rounded sums make the result independent of summation order.
    out = {"MRR": 100.0 * math.fsum(1.0 / r for r in allr) / n, "MR": math.fsum(allr) / n}
    for k in (1, 3, 10):
        out[f"Hits@{k}"] = 100.0 * sum(r <= k for r in allr) / n
    return out


def known_answers(kg: OpenKG) -> dict[tuple[int, int], set[int]]:
    return query_index(kg, SPLITS)


def original_triples(kg: OpenKG, split: str) -> list[Triple]:
    return [t for t in kg.split(split) if t.rp < kg.n_base_rps]


def _score_batches(model, heads: list[int], rps: list[int], batch_size: int) -> Iterable[tuple[int, np.ndarray]]:
    from .training import score_components

    model.eval()
    with torch.no_grad():
        for start in range(0, len(heads), batch_size):
            h = torch.tensor(heads[start : start + batch_size])
            r = torch.tensor(rps[start : start + batch_size])
            yield start, score_components(model, h, r)[2].double().cpu().numpy()


def rank_all_nps(model, kg: OpenKG, head: int, rp: int, filtered: bool = True, gold: int | None = None) -> np.ndarray:
    """All NP ids by descending psi_okgit for (head, rp).

    In filtered mode other known-true answers (all splits) are removed; ``gold`` stays.
    """
    _, scores = next(_score_batches(model, [head], [rp], 1))
    exclude = set()
    if filtered:
        exclude = known_answers(kg).get((head, rp), set()) - ({gold} if gold is not None else set())
    return ranking_from_scores(scores[0], exclude)


def link_prediction_ranks(
    model, kg: OpenKG, split: str, filtered: bool = True, batch_size: int = 128
) -> tuple[list[RankResult], dict[tuple[int, int, int], int]]:
    """Cluster ranks for every original triple in both directions, plus raw top-1 NPs per query."""
    if not kg.augmented:
        raise EvaluationError("evaluation needs an inverse-augmented KG")
    n = kg.n_base_rps
    triples = original_triples(kg, split)
    known = known_answers(kg) if filtered else {}
    queries = sorted({(t.head, t.rp) for t in triples} | {(t.tail, t.rp + n) for t in triples})
    heads = [q[0] for q in queries]
    rps = [q[1] for q in queries]
    # (query, gold) -> cluster rank; scores for a query are computed once.
    needed: dict[tuple[int, int], list[int]] = {}
    for t in triples:
        needed.setdefault((t.head, t.rp), []).append(t.tail)
        needed.setdefault((t.tail, t.rp + n), []).append(t.head)
    result: dict[tuple[int, int, int], int] = {}
    top1: dict[tuple[int, int, int], int] = {}
    for start, block in _score_batches(model, heads, rps, batch_size):
        for j, scores in enumerate(block):
            q = queries[start + j]
            for gold in needed[q]:
                exclude = known.get(q, set()) - {gold}
                ranking = ranking_from_scores(scores, exclude)
                result[(q[0], q[1], gold)] = cluster_rank(ranking, kg.clusters, gold)
                top1[(q[0], q[1], gold)] = int(ranking[0])
    ranks = [
        RankResult(t.head, t.rp, t.tail, result[(t.tail, t.rp + n, t.head)], result[(t.head, t.rp, t.tail)])
        for t in triples
    ]
    return ranks, top1


def evaluate_link_prediction(model, kg: OpenKG, split: str, filtered: bool = True, batch_size: int = 128) -> dict:
    ranks, _ = link_prediction_ranks(model, kg, split, filtered, batch_size)
    if not ranks:
        raise EvaluationError(f"split {split!r} has no triples")
    return {
        "split": split,
        "mode": "filtered" if filtered else "unfiltered",
        "metrics": compute_metrics(ranks),
        "per_triple": [vars(r) for r in ranks],
    }


# ---------------------------------------------------------------- typer-based F1


class TyperResults:
    """Ingested typer predictions: (sentence, mention) -> top-5 type list."""

    def __init__(self, table: dict[tuple[str, str], list[str]]):
        self.table = {k: v[:5] for k, v in table.items()}

    @classmethod
    def read(cls, path: str | Path) -> "TyperResults":
        table = {}
        with open(path, encoding="utf-8") as f:
            for lineno, line in enumerate(f, start=1):
                line = line.rstrip("\n")
                if not line:
                    continue
                parts = line.split("\t")
                if len(parts) != 3:
                    raise EvaluationError(f"{path}:{lineno}: expected sentence<TAB>mention<TAB>types")
                table[(parts[0], parts[1])] = [t for t in parts[2].split(",") if t]
        return cls(table)

    def get(self, sentence: str, mention: str) -> list[str] | None:
        return self.table.get((sentence, mention))


def typing_sentence(kg: OpenKG, head: int, rp: int, tail: int) -> str:
    return " ".join([kg.nps[head], kg.rps[rp], kg.nps[tail]])


def f1_term(gold: Iterable[str], pred: Iterable[str]) -> float:
    g, p = set(gold), set(pred)
    if not g and not p:
        return 0.0
    return 2.0 * len(g & p) / (len(g) + len(p))


def typer_requests(kg: OpenKG, predictions: dict[tuple[int, int, int], int], split: str) -> list[tuple[str, str]]:
    """(sentence, mention) pairs a typer must cover to score ``predictions`` on ``split``."""
    n = kg.n_base_rps
    out = set()
    for t in original_triples(kg, split):
        out.add((typing_sentence(kg, t.head, t.rp, t.tail), kg.nps[t.tail]))
        out.add((typing_sentence(kg, t.head, t.rp, t.tail), kg.nps[t.head]))
        t_hat = predictions[(t.head, t.rp, t.tail)]
        h_hat = predictions[(t.tail, t.rp + n, t.head)]
        out.add((typing_sentence(kg, t.head, t.rp, t_hat), kg.nps[t_hat]))
        out.add((typing_sentence(kg, h_hat, t.rp, t.tail), kg.nps[h_hat]))
    return sorted(out)


def type_compat_f1_from_predictions(
    kg: OpenKG, split: str, predictions: dict[tuple[int, int, int], int], typer: TyperResults
) -> dict:
    """Mean F1 between typer types of gold and top-1 predicted NPs, over both directions."""
    n = kg.n_base_rps
    per, skipped = [], 0
    for t in original_triples(kg, split):
        sent = typing_sentence(kg, t.head, t.rp, t.tail)
        t_hat = predictions[(t.head, t.rp, t.tail)]
        h_hat = predictions[(t.tail, t.rp + n, t.head)]
        cases = (
            ("tail", typer.get(sent, kg.nps[t.tail]), typer.get(typing_sentence(kg, t.head, t.rp, t_hat), kg.nps[t_hat]), t_hat),
            ("head", typer.get(sent, kg.nps[t.head]), typer.get(typing_sentence(kg, h_hat, t.rp, t.tail), kg.nps[h_hat]), h_hat),
        )
        for direction, gold, pred, np_hat in cases:
            if gold is None or pred is None:
                skipped += 1
                continue
            per.append({"head": t.head, "rp": t.rp, "tail": t.tail, "direction": direction, "predicted": np_hat, "f1": f1_term(gold, pred)})
    if skipped:
        logger.warning("%d predictions skipped for missing typer entries", skipped)
    f1 = float(np.mean([p["f1"] for p in per])) if per else float("nan")
    return {"f1": f1, "skipped": skipped, "per_triple": per}


def type_compat_f1(model, kg: OpenKG, split: str, typer: TyperResults, filtered: bool = True) -> dict:
    _, top1 = link_prediction_ranks(model, kg, split, filtered)
    return type_compat_f1_from_predictions(kg, split, top1, typer)


def paired_f1_samples(a: dict, b: dict) -> tuple[list[float], list[float]]:
    """Align two type_compat_f1 results on the (triple, direction) entries both scored."""
    key = lambda p: (p["head"], p["rp"], p["tail"], p["direction"])  # noqa: E731
    bmap = {key(p): p["f1"] for p in b["per_triple"]}
    xs, ys = [], []
    for p in a["per_triple"]:
        if key(p) in bmap:
            xs.append(p["f1"])
            ys.append(bmap[key(p)])
    return xs, ys


def significance_tests(sample_a: Sequence[float], sample_b: Sequence[float], alpha: float = 0.05, n_resamples: int = 10_000, seed: int = 0) -> dict:
    """Paired tests of sample_b - sample_a: a permutation test, plus Wilcoxon signed-rank and t-tests."""
    a = np.asarray(sample_a, dtype=np.float64)
    b = np.asarray(sample_b, dtype=np.float64)
    if a.shape != b.shape:
        raise EvaluationError("paired samples must have equal length")
    diff = b - a
    if a.size == 0 or np.all(diff == 0):
        p_perm = p_wil = p_t = 1.0
    else:
        perm = stats.permutation_test(
            (a, b),
            lambda x, y, axis: np.mean(y - x, axis=axis),
            permutation_type="samples",
            n_resamples=n_resamples,
            vectorized=True,
            alternative="two-sided",
            random_state=np.random.default_rng(seed),
        )
        p_perm = float(perm.pvalue)
        p_wil = float(stats.wilcoxon(b, a, zero_method="wilcox").pvalue)
        if np.all(diff == diff[0]):
            # Zero variance with a nonzero mean shift: the t statistic is infinite.
            p_t = 0.0
        else:
            p_t = float(stats.ttest_rel(b, a).pvalue)
    return {
        "permutation_p": p_perm,
        "wilcoxon_p": p_wil,
        "ttest_p": p_t,
        "alpha": alpha,
        "significant": {"permutation": p_perm < alpha, "wilcoxon": p_wil < alpha, "ttest": p_t < alpha},
    }


# ---------------------------------------------------------------- Freebase type probe


@dataclass
class TypedKG:
    """Text triples with per-entity gold type sets."""

    triples: list[tuple[str, str, str]]
    entity_types: dict[str, set[str]]
    human: dict[tuple[str, str, str], set[str]] = field(default_factory=dict)

    @property
    def type_vocab(self) -> list[str]:
        return sorted({t for ts in self.entity_types.values() for t in ts})

    @classmethod
    def read(cls, triples_path, types_path, human_path=None) -> "TypedKG":
        def rows(path):
            with open(path, encoding="utf-8") as f:
                for line in f:
                    line = line.rstrip("\n")
                    if line:
                        yield line.split("\t")

        triples = [tuple(r[:3]) for r in rows(triples_path)]
        types: dict[str, set[str]] = {}
        for name, ts in rows(types_path):
            types.setdefault(name.lower(), set()).update(t for t in ts.split(",") if t)
        human = {}
        if human_path:
            for h, r, t, ann in rows(human_path):
                # Annotators separated by '|', types by ','; the union is the predicted set.
                human[(h, r, t)] = {x for a in ann.split("|") for x in a.split(",") if x}
        return cls(triples, types, human)

    def single_token_subset(self, is_single: Callable[[str], bool]) -> "TypedKG":
        keep = [t for t in self.triples if is_single(t[2]) and self.entity_types.get(t[2].lower())]
        return TypedKG(keep, self.entity_types, {k: v for k, v in self.human.items() if k in set(keep)})


def prf(gold_pred: Sequence[tuple[set[str], set[str]]]) -> dict[str, float]:
    if not gold_pred:
        return {"precision": float("nan"), "recall": float("nan"), "f1": float("nan"), "n": 0}
    p = [len(g & q) / len(q) if q else 0.0 for g, q in gold_pred]
    r = [len(g & q) / len(g) if g else 0.0 for g, q in gold_pred]
    f = [f1_term(g, q) for g, q in gold_pred]
    return {"precision": float(np.mean(p)), "recall": float(np.mean(r)), "f1": float(np.mean(f)), "n": len(gold_pred)}


def freebase_type_probe(
    typed_kg: TypedKG,
    predict: Callable[[str, str], str],
    baselines: Sequence[str] = ("random", "mft"),
    seed: int = 0,
) -> dict:
    """Precision/recall/F1 of the types of the LM's top-1 tail prediction against gold tail types.

    ``predict(head, relation)`` returns the top-1 token for the MASK tail slot.
    Random and MFT baselines assign as many types as the LM prediction carries.
    """
    if not typed_kg.triples:
        raise EvaluationError("typed subset is empty")
    vocab = typed_kg.type_vocab
    freq = Counter(t for ts in typed_kg.entity_types.values() for t in ts)
    mft_order = [t for t, _ in sorted(freq.items(), key=lambda kv: (-kv[1], kv[0]))]
    rng = random.Random(seed)
    rows = {"lm": [], "random": [], "mft": []}
    skipped = 0
    for h, r, t in typed_kg.triples:
        gold = typed_kg.entity_types[t.lower()]
        pred_types = typed_kg.entity_types.get(predict(h, r).lower())
        if not pred_types:
            skipped += 1
            continue
        k = len(pred_types)
        rows["lm"].append((gold, set(pred_types)))
        if "random" in baselines:
            rows["random"].append((gold, set(rng.sample(vocab, min(k, len(vocab))))))
        if "mft" in baselines:
            rows["mft"].append((gold, set(mft_order[:k])))
    table = {"lm": prf(rows["lm"])}
    for b in baselines:
        table[b] = prf(rows[b])
    if typed_kg.human:
        pairs = [(typed_kg.entity_types[t.lower()], ann) for (h, r, t), ann in typed_kg.human.items() if t.lower() in typed_kg.entity_types]
        table["human"] = prf(pairs)
    return {"table": table, "skipped": skipped, "n_triples": len(typed_kg.triples)}
