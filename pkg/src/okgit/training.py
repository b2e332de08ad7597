"""One-vs-all training with the combined triple/type loss. Checkpoints and grid search live here too."""

from __future__ import annotations

import copy
import hashlib
import itertools
import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np
import torch

from . import checkpoint as ckpt
from .dataset import OpenKG, augment_inverse_relations, load_openkg
from .encoder import CaRE, EncoderConfig, build_word_vocab, tokenize_phrases
from .lm_context import LIVE_PROVIDERS, ContextVectorCache
from .typecomp import OKGIT, ContextTable

logger = logging.getLogger(__name__)

LAMBDA_GRID = (0.0, 1e-3, 1e-2, 1e-1, 1.0, 10.0)
GAMMA_GRID = (0.25, 0.5, 1.0, 2.0, 5.0)
TYPE_DIM_GRID = (100, 300, 500)
LOG_EPS = 1e-12


class TrainingError(Exception):
    pass


@dataclass
class TrainConfig:
    d_e: int = 300
    d_r: int = 300
    d_w: int = 300
    type_dim: int = 300
    gamma: float = 5.0
    lambda_: float = 1e-3
    type_score_variant: str = "euclid"
    provider: str = "mlm-base"
    model: str = "okgit"
    lr: float = 1e-3
    batch_size: int = 128
    epochs: int = 500
    patience: int = 20
    eval_every: int = 1
    label_smoothing: float = 0.1
    seed: int = 0
    n_filters: int = 32
    kernel: int = 3
    input_dropout: float = 0.2
    feature_dropout: float = 0.3
    hidden_dropout: float = 0.2
    train_fraction: float = 1.0
    filtered_eval: bool = True
    dtype: str = "float32"
    np_init: str | None = None
    np_init_project: bool = False
    word_init: str | None = None
    projector_init: str = "glorot_uniform"
    data: str | None = None
    cache: str | None = None

    def __post_init__(self):
        if self.d_r != self.d_e:
            raise ValueError("d_r must equal d_e (the predictor stacks NP and RP vectors)")
        if self.gamma < 0 or self.lambda_ < 0:
            raise ValueError("gamma and lambda must be nonnegative")
        if self.model not in ("okgit", "care"):
            raise ValueError(f"unknown model {self.model!r}")

    def to_json(self) -> dict:
        d = asdict(self)
        d["lambda"] = d.pop("lambda_")
        return d

    @classmethod
    def from_json(cls, d: dict) -> "TrainConfig":
        d = dict(d)
        if "lambda" in d:
            d["lambda_"] = d.pop("lambda")
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        return cls(**d)

    def key(self) -> str:
        return json.dumps(self.to_json(), sort_keys=True)


# ---------------------------------------------------------------- losses


def bce(scores: torch.Tensor, labels: torch.Tensor, smoothing: float = 0.0) -> torch.Tensor:
    """Mean over candidates of -[y log s(x) + (1-y) log(1 - s(x))], log clamped at 1e-12.

    Labels are smoothed as ``(1 - eps) * y + 1/N`` over the N candidates first.
    """
    y = labels.to(scores.dtype)
    if smoothing:
        y = (1.0 - smoothing) * y + 1.0 / y.shape[-1]
    p = torch.sigmoid(scores)
    ll = y * torch.log(p.clamp_min(LOG_EPS)) + (1 - y) * torch.log((1 - p).clamp_min(LOG_EPS))
    return -ll.mean()


def triple_loss(psi_okgit: torch.Tensor, labels: torch.Tensor, smoothing: float = 0.0) -> torch.Tensor:
    return bce(psi_okgit, labels, smoothing)


def type_loss(psi_type: torch.Tensor, labels: torch.Tensor, smoothing: float = 0.0) -> torch.Tensor:
    return bce(psi_type, labels, smoothing)


@dataclass
class LossBundle:
    triple_loss: torch.Tensor
    type_loss: torch.Tensor
    total: torch.Tensor


def total_loss(model, heads: torch.Tensor, rps: torch.Tensor, labels: torch.Tensor, lam: float, smoothing: float) -> tuple[LossBundle, tuple]:
    comps = score_components(model, heads, rps)
    psi_pred, psi_type, psi = comps
    tl = triple_loss(psi, labels, smoothing)
    ty = type_loss(psi_type, labels, smoothing) if psi_type is not None else torch.zeros((), dtype=tl.dtype)
    return LossBundle(tl, ty, tl + lam * ty), comps


def score_components(model, heads: torch.Tensor, rps: torch.Tensor):
    """(psi_pred, psi_type or None, psi_okgit) over all candidate NPs."""
    if isinstance(model, OKGIT):
        return model.score_all(heads, rps)
    psi = model.score_all(heads, rps)
    return psi, None, psi


# ---------------------------------------------------------------- model construction


def load_training_kg(data: str | Path) -> OpenKG:
    return augment_inverse_relations(load_openkg(data))


def _load_matrix(path: str) -> torch.Tensor:
    return torch.from_numpy(np.load(path).astype(np.float32))


def build_model(kg: OpenKG, config: TrainConfig, cache: ContextVectorCache | None = None):
    """CaRE or OKGIT for ``kg``; initialization is seeded independently of the global RNG."""
    vocab = build_word_vocab(kg.rps)
    rp_ids, rp_lengths = tokenize_phrases(kg.rps, vocab)
    enc = EncoderConfig(
        n_nps=len(kg.nps),
        n_words=len(vocab),
        d_e=config.d_e,
        d_w=config.d_w,
        n_filters=config.n_filters,
        kernel=config.kernel,
        input_dropout=config.input_dropout,
        feature_dropout=config.feature_dropout,
        hidden_dropout=config.hidden_dropout,
    )
    care = CaRE(
        enc,
        kg.clusters,
        rp_ids,
        rp_lengths,
        generator=torch.Generator().manual_seed(config.seed),
        np_init=_load_matrix(config.np_init) if config.np_init else None,
        np_project=config.np_init_project,
        word_init=_load_matrix(config.word_init) if config.word_init else None,
    )
    if config.model == "care":
        model = care
    else:
        context = None
        if config.provider not in LIVE_PROVIDERS:
            if cache is None:
                if not config.cache:
                    raise TrainingError(f"provider {config.provider!r} needs a context cache")
                cache = ContextVectorCache.open(config.cache)
            if cache.provider_id.split("|")[0] != config.provider:
                raise TrainingError(f"cache holds {cache.provider_id!r} vectors but the config asks for {config.provider!r}")
            context = ContextTable.from_cache(cache)
        model = OKGIT(
            care,
            d_type=config.type_dim,
            n_base_rps=kg.n_base_rps,
            gamma=config.gamma,
            variant=config.type_score_variant,
            provider=config.provider,
            context=context,
            generator=torch.Generator().manual_seed(config.seed + 1),
        )
    return model.to(getattr(torch, config.dtype))


def save_checkpoint(model, config: TrainConfig, out: str | Path, metrics: dict) -> Path:
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    ckpt.write_json(out / "config.json", config.to_json())
    ckpt.save_state(model, out / "params.bin")
    ckpt.write_json(out / "metrics.json", metrics)
    return out


def load_checkpoint(path: str | Path, kg: OpenKG | None = None, cache: ContextVectorCache | None = None):
    """Rebuild the model stored in a checkpoint directory; returns (model, config, kg)."""
    path = Path(path)
    config = TrainConfig.from_json(ckpt.read_json(path / "config.json"))
    if kg is None:
        if not config.data:
            raise TrainingError("checkpoint config has no data path; pass the KG explicitly")
        kg = load_training_kg(config.data)
    model = build_model(kg, config, cache)
    ckpt.load_state(model, path / "params.bin")
    model.eval()
    return model, config, kg


# ---------------------------------------------------------------- training


def _train_queries(kg: OpenKG, fraction: float, seed: int) -> dict[tuple[int, int], set[int]]:
    triples = kg.train
    if fraction < 1.0:
        n = kg.n_base_rps
        originals = [t for t in triples if t.rp < n]
        rng = np.random.default_rng(seed)
        keep = rng.permutation(len(originals))[: int(round(fraction * len(originals)))]
        chosen = {originals[i].key() for i in keep}
        chosen |= {(t, r + n, h) for h, r, t in chosen}
        triples = [t for t in triples if t.key() in chosen]
    index: dict[tuple[int, int], set[int]] = {}
    for t in triples:
        index.setdefault((t.head, t.rp), set()).add(t.tail)
    return index


def _labels(batch: list[tuple[int, int]], index: dict, n_nps: int, dtype) -> torch.Tensor:
    y = torch.zeros((len(batch), n_nps), dtype=dtype)
    for i, q in enumerate(batch):
        y[i, list(index[q])] = 1.0
    return y


def fit(kg: OpenKG, config: TrainConfig, out: str | Path | None = None, cache: ContextVectorCache | None = None, log=None) -> dict:
    """Train with Adam on one-vs-all labels, keeping the best-validation-MRR parameters.

    Returns a dict with the trained ``model``, the ``history`` of per-epoch records and
    the ``best`` validation metrics. Writes a checkpoint when ``out`` is given.
    """
    from .evaluation import evaluate_link_prediction

    if not kg.augmented:
        raise TrainingError("training needs an inverse-augmented KG")
    torch.use_deterministic_algorithms(True)
    model = build_model(kg, config, cache)
    dtype = getattr(torch, config.dtype)
    index = _train_queries(kg, config.train_fraction, config.seed)
    queries = sorted(index)
    if not queries:
        raise TrainingError("no training queries")
    opt = torch.optim.Adam(model.parameters(), lr=config.lr)
    torch.manual_seed(config.seed + 2)
    shuffle = torch.Generator().manual_seed(config.seed + 3)
    lam = config.lambda_ if isinstance(model, OKGIT) else 0.0

    out = Path(out) if out is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        log_file = open(out / "train_log.jsonl", "w", encoding="utf-8")
    else:
        log_file = None

    history, best, best_state, stale = [], None, None, 0
    try:
        for epoch in range(1, config.epochs + 1):
            model.train()
            order = torch.randperm(len(queries), generator=shuffle).tolist()
            sums = {"triple": 0.0, "type": 0.0, "total": 0.0, "p_pos": 0.0, "p_neg": 0.0}
            n_pos = n_neg = 0
            for start in range(0, len(order), config.batch_size):
                batch = [queries[i] for i in order[start : start + config.batch_size]]
                heads = torch.tensor([q[0] for q in batch])
                rps = torch.tensor([q[1] for q in batch])
                labels = _labels(batch, index, len(kg.nps), dtype)
                opt.zero_grad()
                losses, comps = total_loss(model, heads, rps, labels, lam, config.label_smoothing)
                if not torch.isfinite(losses.total):
                    _dump_nan(out, epoch, batch, losses)
                    raise TrainingError(f"non-finite loss at epoch {epoch}; batch dumped")
                losses.total.backward()
                opt.step()
                w = len(batch)
                sums["triple"] += float(losses.triple_loss.detach()) * w
                sums["type"] += float(losses.type_loss.detach()) * w
                sums["total"] += float(losses.total.detach()) * w
                if comps[1] is not None:
                    p_hat = torch.sigmoid(comps[1].detach())
                    pos = labels > 0
                    sums["p_pos"] += float(p_hat[pos].sum())
                    sums["p_neg"] += float(p_hat[~pos].sum())
                    n_pos += int(pos.sum())
                    n_neg += int((~pos).sum())
            rec = {
                "epoch": epoch,
                "triple_loss": sums["triple"] / len(queries),
                "type_loss": sums["type"] / len(queries),
                "loss": sums["total"] / len(queries),
            }
            if n_pos:
                rec["p_hat_pos_mean"] = sums["p_pos"] / n_pos
                rec["p_hat_neg_mean"] = sums["p_neg"] / n_neg
            if config.eval_every and epoch % config.eval_every == 0 and kg.valid:
                report = evaluate_link_prediction(model, kg, "valid", config.filtered_eval)
                rec["valid"] = report["metrics"]
                score = (report["metrics"]["MRR"], report["metrics"]["Hits@10"])
                if best is None or score > (best["MRR"], best["Hits@10"]):
                    best = dict(report["metrics"], epoch=epoch)
                    best_state = copy.deepcopy(model.state_dict())
                    stale = 0
                else:
                    stale += 1
            history.append(rec)
            if log_file:
                log_file.write(json.dumps(rec, sort_keys=True) + "\n")
                log_file.flush()
            if log:
                log(rec)
            if config.patience and stale >= config.patience:
                break
    finally:
        if log_file:
            log_file.close()

    if best_state is not None:
        model.load_state_dict(best_state)
    model.eval()
    metrics = {"best_valid": best, "epochs_run": len(history)}
    if out is not None:
        save_checkpoint(model, config, out, metrics)
    return {"model": model, "history": history, "best": best, "metrics": metrics}


def _dump_nan(out: Path | None, epoch: int, batch, losses: LossBundle) -> None:
    payload = {
        "epoch": epoch,
        "queries": [list(q) for q in batch],
        "triple_loss": float(losses.triple_loss.detach()),
        "type_loss": float(losses.type_loss.detach()),
    }
    target = (out or Path(".")) / "nan_batch.json"
    ckpt.write_json(target, payload)
    logger.error("non-finite loss; offending batch written to %s", target)


# ---------------------------------------------------------------- grid search


@dataclass
class Grid:
    type_dim: list[int] = field(default_factory=lambda: list(TYPE_DIM_GRID))
    lambda_: list[float] = field(default_factory=lambda: list(LAMBDA_GRID))
    gamma: list[float] = field(default_factory=lambda: list(GAMMA_GRID))
    provider: list[str] = field(default_factory=lambda: ["mlm-base", "mlm-large"])

    @classmethod
    def from_json(cls, d: dict) -> "Grid":
        d = dict(d)
        if "lambda" in d:
            d["lambda_"] = d.pop("lambda")
        return cls(**d)

    def points(self, base: TrainConfig) -> list[TrainConfig]:
        out = []
        for td, lam, g, prov in itertools.product(self.type_dim, self.lambda_, self.gamma, self.provider):
            d = base.to_json()
            d.update({"type_dim": td, "lambda": lam, "gamma": g, "provider": prov})
            out.append(TrainConfig.from_json(d))
        return out


def config_id(config: TrainConfig) -> str:
    return hashlib.sha256(config.key().encode()).hexdigest()[:12]


def _selection_key(row: dict):
    m = row["metrics"] or {}
    # Highest MRR, then Hits@10; remaining ties go to the lexicographically smallest config.
    return (-m.get("MRR", -math.inf), -m.get("Hits@10", -math.inf), json.dumps(row["config"], sort_keys=True))


def grid_search(kg: OpenKG, caches: dict[str, str], grid: Grid, base: TrainConfig, out: str | Path) -> dict:
    """Train every grid point (resumable through the leaderboard) and pick the best on validation MRR."""
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    board_path = out / "leaderboard.jsonl"
    done: dict[str, dict] = {}
    if board_path.exists():
        for line in board_path.read_text(encoding="utf-8").splitlines():
            if line.strip():
                row = json.loads(line)
                done[row["id"]] = row
    current = []
    for cfg in grid.points(base):
        if cfg.provider not in LIVE_PROVIDERS:
            if cfg.provider not in caches:
                raise TrainingError(f"no cache given for provider {cfg.provider!r}")
            cfg.cache = str(caches[cfg.provider])
        cid = config_id(cfg)
        current.append(cid)
        if cid in done:
            continue
        t0 = time.time()
        result = fit(kg, cfg, out / "runs" / cid)
        row = {"id": cid, "config": cfg.to_json(), "metrics": result["best"], "seconds": round(time.time() - t0, 3)}
        done[cid] = row
        with open(board_path, "a", encoding="utf-8") as f:
            f.write(json.dumps(row, sort_keys=True) + "\n")
    rows = sorted((done[c] for c in dict.fromkeys(current)), key=_selection_key)
    best = rows[0]
    ckpt.write_json(out / "best.json", {"id": best["id"], "checkpoint": str(out / "runs" / best["id"]), "metrics": best["metrics"]})
    return {"best": best, "leaderboard": rows, "checkpoint": out / "runs" / best["id"]}
