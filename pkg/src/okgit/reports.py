"""Experiment manifests. Also qualitative prediction dumps and t-SNE figure data."""

from __future__ import annotations

import csv
import hashlib
import io
import json
import logging
import random
from dataclasses import dataclass, field
from datetime import datetime, timezone
from pathlib import Path

import numpy as np
import torch

from .dataset import OpenKG
from .evaluation import ranking_from_scores
from .training import score_components
from .typecomp import OKGIT, project_type

logger = logging.getLogger(__name__)

TSNE_ITERATIONS = 2000
TSNE_PERPLEXITY = 15.0


class ReportError(Exception):
    pass


# ---------------------------------------------------------------- prediction dumps


def resolve_query(kg: OpenKG, head: str, relation: str) -> tuple[int, int]:
    np_ids = {s: i for i, s in enumerate(kg.nps)}
    rp_ids = {s: i for i, s in enumerate(kg.rps)}
    if head not in np_ids:
        raise ReportError(f"unknown noun phrase {head!r}")
    if relation not in rp_ids:
        raise ReportError(f"unknown relation phrase {relation!r}")
    return np_ids[head], rp_ids[relation]


@torch.no_grad()
def topk_clusters(model, kg: OpenKG, head: int, rp: int, k: int) -> list[int]:
    """Best-ranked NP of each of the top-k clusters (unfiltered ranking)."""
    model.eval()
    scores = score_components(model, torch.tensor([head]), torch.tensor([rp]))[2][0].double().numpy()
    seen, out = set(), []
    for np_id in ranking_from_scores(scores):
        c = kg.clusters.np_to_cluster[np_id]
        if c in seen:
            continue
        seen.add(c)
        out.append(int(np_id))
        if len(out) == k:
            break
    return out


def dump_topk_predictions(model, kg: OpenKG, queries: list[tuple[str, str]], k: int = 5) -> list[dict]:
    rows = []
    for head, relation in queries:
        h, r = resolve_query(kg, head, relation)
        preds = [kg.nps[i] for i in topk_clusters(model, kg, h, r, k)]
        rows.append({"head": head, "relation": relation, "predictions": preds})
    return rows


def read_queries(path: str | Path) -> list[tuple[str, str]]:
    out = []
    for line in Path(path).read_text(encoding="utf-8").splitlines():
        if line.strip():
            head, relation = line.split("\t")[:2]
            out.append((head, relation))
    return out


def format_prediction_table(columns: dict[str, list[dict]]) -> str:
    """Side-by-side TSV: head, relation, then one column of ' | '-joined predictions per model."""
    names = list(columns)
    buf = io.StringIO()
    w = csv.writer(buf, delimiter="\t", lineterminator="\n")
    w.writerow(["head", "relation", *names])
    for rows in zip(*columns.values()):
        w.writerow([rows[0]["head"], rows[0]["relation"], *(" | ".join(r["predictions"]) for r in rows)])
    return buf.getvalue()


# ---------------------------------------------------------------- t-SNE


def read_annotations(path: str | Path, kg: OpenKG) -> list[tuple[int, str]]:
    """``np<TAB>label`` lines; the NP may be given as its surface string or its id."""
    np_ids = {s: i for i, s in enumerate(kg.nps)}
    out = []
    for lineno, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), start=1):
        if not line.strip():
            continue
        np_str, label = line.split("\t")[:2]
        if np_str in np_ids:
            out.append((np_ids[np_str], label))
        elif np_str.isdigit() and int(np_str) < len(kg.nps):
            out.append((int(np_str), label))
        else:
            raise ReportError(f"{path}:{lineno}: unknown noun phrase {np_str!r}")
    return out


def sample_annotations(annotated: list[tuple[int, str]], per_label: int = 5, seed: int = 0) -> list[tuple[int, str]]:
    """Pick ``per_label`` NPs at random from each category (labels in first-seen order)."""
    rng = random.Random(seed)
    by_label: dict[str, list[int]] = {}
    for np_id, label in annotated:
        by_label.setdefault(label, []).append(np_id)
    out = []
    for label, ids in by_label.items():
        if len(ids) < per_label:
            raise ReportError(f"category {label!r} has {len(ids)} NPs, need {per_label}")
        out.extend((i, label) for i in sorted(rng.sample(ids, per_label)))
    return out


@torch.no_grad()
def space_vectors(model, ids: list[int], space: str) -> np.ndarray:
    model.eval()
    care = model.care if isinstance(model, OKGIT) else model
    vecs = care.np_encoder.all()[torch.tensor(ids)]
    if space == "type":
        if not isinstance(model, OKGIT):
            raise ReportError("type space needs an OKGIT checkpoint")
        vecs = project_type(vecs, model.P)
    elif space != "np":
        raise ReportError(f"unknown space {space!r}")
    return vecs.double().numpy()


def export_tsne(
    model,
    annotations: list[tuple[int, str]],
    space: str = "type",
    perplexity: float = TSNE_PERPLEXITY,
    n_iter: int = TSNE_ITERATIONS,
    seed: int = 0,
) -> list[dict]:
    """2-d t-SNE coordinates for annotated NPs in NP space or type space."""
    from sklearn.manifold import TSNE

    if not annotations:
        raise ReportError("no annotated NPs")
    if perplexity >= len(annotations):
        raise ReportError(
            f"perplexity {perplexity} must be below the number of points ({len(annotations)}); "
            "annotate more NPs or lower --perplexity"
        )
    x = space_vectors(model, [i for i, _ in annotations], space)
    tsne = TSNE(
        n_components=2,
        perplexity=perplexity,
        max_iter=n_iter,
        random_state=seed,
        init="pca",
        method="exact" if len(annotations) <= 500 else "barnes_hut",
    )
    pts = tsne.fit_transform(x)
    return [{"id": i, "label": lab, "x": float(p[0]), "y": float(p[1])} for (i, lab), p in zip(annotations, pts)]


def tsne_csv(rows: list[dict]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["id", "label", "x", "y"])
    for r in rows:
        w.writerow([r["id"], r["label"], f"{r['x']:.6f}", f"{r['y']:.6f}"])
    return buf.getvalue()


def silhouette(rows: list[dict]) -> float:
    from sklearn.metrics import silhouette_score

    pts = np.array([[r["x"], r["y"]] for r in rows])
    return float(silhouette_score(pts, [r["label"] for r in rows]))


# ---------------------------------------------------------------- manifests


@dataclass
class ExperimentManifest:
    data: str
    out: str
    seed: int = 0
    care_release: str | None = None
    prepare: dict = field(default_factory=dict)
    extract: dict = field(default_factory=dict)
    train: dict | None = None
    grid: dict | None = None
    eval: dict = field(default_factory=lambda: {"splits": ["valid", "test"], "filtered": True})
    reports: dict = field(default_factory=dict)

    @classmethod
    def read(cls, path: str | Path) -> "ExperimentManifest":
        d = json.loads(Path(path).read_text(encoding="utf-8"))
        base = Path(path).resolve().parent

        def rel(p):
            return str((base / p).resolve()) if p and not Path(p).is_absolute() else p

        d["data"] = rel(d["data"])
        d["out"] = rel(d["out"])
        if d.get("care_release"):
            d["care_release"] = rel(d["care_release"])
        return cls(**d)

    def to_json(self) -> dict:
        return {k: getattr(self, k) for k in self.__dataclass_fields__}

    def digest(self) -> str:
        return hashlib.sha256(json.dumps(self.to_json(), sort_keys=True).encode()).hexdigest()


def stamp(report: dict, manifest_hash: str | None, seed: int, config: dict | None = None) -> dict:
    out = {"manifest_hash": manifest_hash, "seed": seed, "config": config or {}}
    out.update(report)
    out["created_at"] = datetime.now(timezone.utc).isoformat()
    return out


def strip_timestamps(report: dict) -> dict:
    return {k: v for k, v in report.items() if k != "created_at"}


def run_manifest(manifest: ExperimentManifest) -> Path:
    """prepare -> extract -> train/grid -> eval -> reports, skipping stages already marked done."""
    from .pipeline import STAGES

    out = Path(manifest.out)
    marks = out / ".stages"
    marks.mkdir(parents=True, exist_ok=True)
    digest = manifest.digest()
    recorded = marks / "manifest.sha256"
    if recorded.exists() and recorded.read_text().strip() != digest:
        raise ReportError(f"{out} holds a run of a different manifest; use a fresh output directory")
    recorded.write_text(digest + "\n")
    state: dict = {}
    for name, stage in STAGES:
        marker = marks / f"{name}.done"
        if marker.exists():
            state.update(json.loads(marker.read_text()))
            continue
        logger.info("stage %s", name)
        result = stage(manifest, state, digest) or {}
        state.update(result)
        marker.write_text(json.dumps(result, sort_keys=True, default=str))
    return out
