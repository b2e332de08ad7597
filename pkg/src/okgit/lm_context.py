"""Context vectors from a frozen masked LM with their on-disk cache. Also hosts LM-only decoding."""

from __future__ import annotations

import logging
import os
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
import torch

from .dataset import OpenKG, base_query, query_index

logger = logging.getLogger(__name__)

MAGIC = b"OKGC"
FORMAT_VERSION = 1
DIRECTIONS = {"tail": 0, "head": 1}
DIRECTION_NAMES = {v: k for k, v in DIRECTIONS.items()}

# Reference providers; `OKGIT_MODEL_<ID>` (dashes as underscores) overrides the weights location.
MLM_PROVIDERS = {
    "mlm-base": "bert-base-uncased",
    "mlm-large": "bert-large-uncased",
    "mlm-alt": "roberta-base",
}
LIVE_PROVIDERS = ("concat", "add")
PROVIDERS = tuple(MLM_PROVIDERS) + LIVE_PROVIDERS + ("typing",)


class ContextError(Exception):
    pass


@dataclass(frozen=True, order=True)
class ContextQuery:
    direction: str
    head: int
    rp: int

    def __post_init__(self):
        if self.direction not in DIRECTIONS:
            raise ContextError(f"direction must be 'tail' or 'head', got {self.direction!r}")


def queries_for(kg: OpenKG, splits: Iterable[str] = ("train", "valid", "test")) -> list[ContextQuery]:
    """Distinct context queries needed to score every (head, rp) in the given splits."""
    keys = {base_query(kg, h, r) for h, r in query_index(kg, list(splits))}
    return sorted(ContextQuery(*k) for k in keys)


def build_prompt_words(q: ContextQuery, kg: OpenKG, mask: str) -> tuple[list[str], list[str], list[str]]:
    """Split the prompt into (before-RP, RP, after-RP) word groups.

    Tail direction: ``head-NP rp MASK``; head direction: ``MASK rp tail-NP``.
    The original RP string is used in both directions, lowercased.
    """
    np_words = kg.nps[q.head].lower().split()
    rp_words = kg.rps[q.rp].lower().split()
    if q.direction == "tail":
        return np_words, rp_words, [mask]
    return [mask], rp_words, np_words


class MLMProvider:
    """Frozen masked LM returning the final hidden state at the MASK slot."""

    lowercase = True

    def __init__(self, provider_id: str, model_path: str | os.PathLike | None = None, device: str = "cpu"):
        from transformers import AutoModelForMaskedLM, AutoTokenizer

        if model_path is None:
            env = "OKGIT_MODEL_" + provider_id.upper().replace("-", "_")
            model_path = os.environ.get(env) or MLM_PROVIDERS.get(provider_id)
        if model_path is None:
            raise ContextError(f"unknown provider {provider_id!r}")
        self.provider_id = provider_id
        try:
            self.tokenizer = AutoTokenizer.from_pretrained(str(model_path))
            self.model = AutoModelForMaskedLM.from_pretrained(str(model_path))
        except OSError as exc:
            raise ContextError(f"provider {provider_id!r} unavailable from {model_path}: {exc}") from exc
        self.model.eval().to(device)
        self.device = device
        self.dim = int(self.model.config.hidden_size)
        limits = (getattr(self.tokenizer, "model_max_length", 512), getattr(self.model.config, "max_position_embeddings", 512), 512)
        self.max_length = int(min(limits))

    @property
    def header_id(self) -> str:
        return f"{self.provider_id}|lowercase={int(self.lowercase)}"

    @property
    def vocab(self) -> list[str]:
        inv = {i: t for t, i in self.tokenizer.get_vocab().items()}
        return [inv[i] for i in range(len(inv))]

    def _encode(self, before: list[str], rp: list[str], after: list[str]) -> list[int]:
        tok = self.tokenizer
        mask = tok.mask_token

        def ids(words: list[str]) -> list[int]:
            out = []
            for w in words:
                out.extend([tok.mask_token_id] if w == mask else tok.encode(" " + w if out else w, add_special_tokens=False))
            return out

        b, r, a = ids(before), ids(rp), ids(after)
        budget = self.max_length - 2 - len(b) - len(a)
        if len(r) > budget:
            logger.warning("prompt exceeds %d tokens; truncating relation phrase from the right", self.max_length)
            r = r[: max(budget, 0)]
        return [tok.cls_token_id] + b + r + a + [tok.sep_token_id]

    @torch.no_grad()
    def _forward(self, prompts: Sequence[list[int]]):
        width = max(len(p) for p in prompts)
        pad = self.tokenizer.pad_token_id
        ids = torch.full((len(prompts), width), pad, dtype=torch.long)
        att = torch.zeros_like(ids)
        for i, p in enumerate(prompts):
            ids[i, : len(p)] = torch.tensor(p)
            att[i, : len(p)] = 1
        out = self.model(input_ids=ids.to(self.device), attention_mask=att.to(self.device), output_hidden_states=True)
        pos = (ids == self.tokenizer.mask_token_id).float().argmax(dim=1)
        rows = torch.arange(len(prompts))
        return out.hidden_states[-1][rows, pos].cpu(), out.logits[rows, pos].cpu()

    def context_vectors(self, queries: Sequence[ContextQuery], kg: OpenKG, batch_size: int = 64) -> np.ndarray:
        out = np.zeros((len(queries), self.dim), dtype=np.float32)
        for start in range(0, len(queries), batch_size):
            chunk = queries[start : start + batch_size]
            prompts = [self._encode(*build_prompt_words(q, kg, self.tokenizer.mask_token)) for q in chunk]
            hidden, _ = self._forward(prompts)
            out[start : start + len(chunk)] = hidden.numpy()
        return out

    def mask_logits(self, q: ContextQuery, kg: OpenKG) -> torch.Tensor:
        prompt = self._encode(*build_prompt_words(q, kg, self.tokenizer.mask_token))
        return self._forward([prompt])[1][0]

    def top_tokens_for_text(self, head: str, relation: str, k: int = 1) -> list[tuple[str, float]]:
        """Top-k MASK fillers for the free-text prompt ``head relation MASK``."""
        prompt = self._encode(head.lower().split(), relation.lower().split(), [self.tokenizer.mask_token])
        return top_tokens(self._forward([prompt])[1][0], self.vocab, k)

    def is_single_token(self, phrase: str) -> bool:
        return len(self.tokenizer.tokenize(phrase.lower())) == 1

    @torch.no_grad()
    def phrase_vectors(self, phrases: Sequence[str], batch_size: int = 64) -> np.ndarray:
        """[CLS] final-layer vectors for whole phrases (LM-initialization baselines)."""
        tok = self.tokenizer
        out = np.zeros((len(phrases), self.dim), dtype=np.float32)
        for start in range(0, len(phrases), batch_size):
            chunk = [p.lower() if self.lowercase else p for p in phrases[start : start + batch_size]]
            enc = tok(chunk, padding=True, truncation=True, max_length=self.max_length, return_tensors="pt")
            hidden = self.model(**enc.to(self.device), output_hidden_states=True).hidden_states[-1]
            out[start : start + len(chunk)] = hidden[:, 0].cpu().numpy()
        return out


def extract_context_vector(q: ContextQuery, provider: MLMProvider, kg: OpenKG) -> np.ndarray:
    return provider.context_vectors([q], kg)[0]


def load_provider(provider_id: str, model_path: str | None = None) -> MLMProvider:
    if provider_id not in MLM_PROVIDERS and model_path is None:
        raise ContextError(f"{provider_id!r} is not an MLM provider")
    return MLMProvider(provider_id, model_path)


def alternate_context_vector(
    q: ContextQuery,
    mode: str,
    np_vec: torch.Tensor | None = None,
    rp_vec: torch.Tensor | None = None,
    typer: "TypingDistributions | None" = None,
) -> torch.Tensor:
    """Context vector from an ablation provider.

    ``concat`` and ``add`` take the live head-NP and RP encodings; ``typing``
    reads the typer distribution stored for the query.
    """
    if mode == "concat":
        return torch.cat([np_vec, rp_vec], dim=-1)
    if mode == "add":
        return np_vec + rp_vec
    if mode == "typing":
        if typer is None:
            raise ContextError("typing mode needs typer distributions")
        return torch.from_numpy(typer.get(q))
    raise ContextError(f"unknown alternate mode {mode!r}")


class TypingDistributions:
    """Per-query type distributions from an external typer.

    File format: ``direction<TAB>head_id<TAB>rp_id<TAB>p1,p2,...``.
    """

    def __init__(self, table: dict[ContextQuery, np.ndarray]):
        self.table = table
        dims = {v.shape[0] for v in table.values()}
        if len(dims) > 1:
            raise ContextError(f"inconsistent distribution sizes {sorted(dims)}")
        self.dim = dims.pop() if dims else 0

    @classmethod
    def read(cls, path: str | Path) -> "TypingDistributions":
        table = {}
        with open(path, encoding="utf-8") as f:
            for lineno, line in enumerate(f, start=1):
                if not line.strip():
                    continue
                d, h, r, probs = line.rstrip("\n").split("\t")
                table[ContextQuery(d, int(h), int(r))] = np.array([float(x) for x in probs.split(",")], dtype=np.float32)
        return cls(table)

    def get(self, q: ContextQuery) -> np.ndarray:
        try:
            return self.table[q]
        except KeyError:
            raise ContextError(f"typer distribution missing for query {q}") from None


class ContextVectorCache:
    """Append-only binary store of context vectors keyed by (direction, head, rp).

    Layout (little-endian): ``OKGC``, version u32, provider-id (u32 length +
    UTF-8), d_B u32, count u64, then records of direction u8, head u32, rp u32
    and d_B float32 values. A sidecar ``.idx`` TSV maps keys to record ordinals.
    """

    def __init__(self, path: str | Path, provider_id: str, dim: int, index: dict[tuple[int, int, int], int], data_offset: int):
        self.path = Path(path)
        self.provider_id = provider_id
        self.dim = dim
        self.index = index
        self.data_offset = data_offset
        self._dtype = np.dtype([("direction", "u1"), ("head", "<u4"), ("rp", "<u4"), ("values", "<f4", (dim,))])
        self._matrix: np.ndarray | None = None

    @property
    def count(self) -> int:
        return len(self.index)

    @property
    def idx_path(self) -> Path:
        return self.path.with_name(self.path.name + ".idx")

    @staticmethod
    def _header(provider_id: str, dim: int, count: int) -> bytes:
        pid = provider_id.encode("utf-8")
        return MAGIC + struct.pack("<I", FORMAT_VERSION) + struct.pack("<I", len(pid)) + pid + struct.pack("<IQ", dim, count)

    @classmethod
    def create(cls, path: str | Path, provider_id: str, dim: int) -> "ContextVectorCache":
        path = Path(path)
        if path.exists():
            raise ContextError(f"cache already exists: {path}")
        header = cls._header(provider_id, dim, 0)
        with open(path, "wb") as f:
            f.write(header)
        cache = cls(path, provider_id, dim, {}, len(header))
        cache.idx_path.write_text("", encoding="ascii")
        return cache

    @classmethod
    def open(cls, path: str | Path) -> "ContextVectorCache":
        path = Path(path)
        with open(path, "rb") as f:
            if f.read(4) != MAGIC:
                raise ContextError(f"{path}: not a context cache")
            (version,) = struct.unpack("<I", f.read(4))
            if version != FORMAT_VERSION:
                raise ContextError(f"{path}: unsupported format version {version}")
            (n,) = struct.unpack("<I", f.read(4))
            provider_id = f.read(n).decode("utf-8")
            dim, count = struct.unpack("<IQ", f.read(12))
            offset = f.tell()
        cache = cls(path, provider_id, dim, {}, offset)
        size = path.stat().st_size - offset
        if size < count * cache._dtype.itemsize:
            raise ContextError(f"{path}: truncated, header says {count} records")
        recs = cache._records()[:count]
        cache.index = {(int(d), int(h), int(r)): i for i, (d, h, r) in enumerate(zip(recs["direction"], recs["head"], recs["rp"]))}
        if len(cache.index) != count:
            raise ContextError(f"{path}: duplicate keys")
        return cache

    def _records(self) -> np.ndarray:
        return np.fromfile(self.path, dtype=self._dtype, offset=self.data_offset)

    def check_provider(self, provider_id: str) -> None:
        if provider_id != self.provider_id:
            raise ContextError(f"cache built with provider {self.provider_id!r}, requested {provider_id!r}")

    @staticmethod
    def _key(q: ContextQuery) -> tuple[int, int, int]:
        return (DIRECTIONS[q.direction], q.head, q.rp)

    def __contains__(self, q: ContextQuery) -> bool:
        return self._key(q) in self.index

    def get(self, q: ContextQuery) -> np.ndarray:
        try:
            i = self.index[self._key(q)]
        except KeyError:
            raise ContextError(f"cache miss for {q}") from None
        return self.matrix()[i]

    def matrix(self) -> np.ndarray:
        if self._matrix is None or self._matrix.shape[0] != self.count:
            recs = self._records()[: self.count]
            self._matrix = np.ascontiguousarray(recs["values"], dtype=np.float32).reshape(self.count, self.dim)
        return self._matrix

    def append(self, queries: Sequence[ContextQuery], vectors: np.ndarray) -> None:
        vectors = np.asarray(vectors, dtype=np.float32)
        if vectors.shape != (len(queries), self.dim):
            raise ContextError(f"expected vectors of shape {(len(queries), self.dim)}, got {vectors.shape}")
        if not np.all(np.isfinite(vectors)):
            raise ContextError("non-finite context vector")
        recs = np.zeros(len(queries), dtype=self._dtype)
        new_keys, seen = [], set()
        for i, q in enumerate(queries):
            key = self._key(q)
            if key in self.index or key in seen:
                raise ContextError(f"cache is append-only; key {q} already stored")
            new_keys.append(key)
            seen.add(key)
            recs[i] = (key[0], key[1], key[2], vectors[i])
        start = self.count
        with open(self.path, "r+b") as f:
            f.seek(self.data_offset + start * self._dtype.itemsize)
            f.write(recs.tobytes())
            f.flush()
            f.seek(self.data_offset - 8)
            f.write(struct.pack("<Q", start + len(queries)))
        with open(self.idx_path, "a", encoding="ascii") as f:
            for j, (d, h, r) in enumerate(new_keys):
                f.write(f"{DIRECTION_NAMES[d]}\t{h}\t{r}\t{start + j}\n")
        for j, key in enumerate(new_keys):
            self.index[key] = start + j
        self._matrix = None


def cache_get_or_compute(cache: ContextVectorCache, q: ContextQuery, provider: MLMProvider, kg: OpenKG) -> np.ndarray:
    cache.check_provider(provider.header_id)
    if q in cache:
        return cache.get(q)
    vec = provider.context_vectors([q], kg)
    cache.append([q], vec)
    return cache.get(q)


def warm_cache(cache: ContextVectorCache, provider: MLMProvider, kg: OpenKG, queries: Sequence[ContextQuery], batch_size: int = 64) -> int:
    """Compute and append every missing query; returns the number added."""
    cache.check_provider(provider.header_id)
    missing = [q for q in queries if q not in cache]
    for start in range(0, len(missing), batch_size):
        chunk = missing[start : start + batch_size]
        cache.append(chunk, provider.context_vectors(chunk, kg, batch_size=batch_size))
    return len(missing)


def write_typing_cache(path: str | Path, typer: TypingDistributions, queries: Sequence[ContextQuery]) -> ContextVectorCache:
    cache = ContextVectorCache.create(path, "typing", typer.dim)
    cache.append(list(queries), np.stack([typer.get(q) for q in queries]) if queries else np.zeros((0, typer.dim)))
    return cache


def nearest_vocab_predictions(q: ContextQuery, provider: MLMProvider, kg: OpenKG, k: int) -> list[tuple[str, float]]:
    """Top-k vocabulary tokens for the MASK slot by MLM-head score, ties by vocabulary index."""
    return top_tokens(provider.mask_logits(q, kg), provider.vocab, k)


def top_tokens(logits: torch.Tensor, vocab: Sequence[str], k: int) -> list[tuple[str, float]]:
    scores = logits.detach().cpu().double().numpy()
    k = max(1, min(k, len(scores)))
    # Stable sort on negated scores keeps ascending vocabulary index among ties.
    order = np.argsort(-scores, kind="stable")[:k]
    return [(vocab[i], float(scores[i])) for i in order]


def lm_link_prediction_scores(
    queries: Sequence[ContextQuery], provider: MLMProvider, kg: OpenKG
) -> np.ndarray:
    """Score every NP for each query with the LM alone.

    Single-token NPs get the MLM-head score of their token; NPs that are not
    one vocabulary token get ``-inf`` (the LM cannot produce them).
    """
    tok_index = provider.tokenizer.get_vocab()
    np_tok = np.full(len(kg.nps), -1, dtype=np.int64)
    for i, s in enumerate(kg.nps):
        pieces = provider.tokenizer.tokenize(s.lower())
        if len(pieces) == 1 and pieces[0] in tok_index:
            np_tok[i] = tok_index[pieces[0]]
    valid = np_tok >= 0
    out = np.full((len(queries), len(kg.nps)), -np.inf)
    for i, q in enumerate(queries):
        logits = provider.mask_logits(q, kg).double().numpy()
        out[i, valid] = logits[np_tok[valid]]
    return out


class LMScorer:
    """Link-prediction scorer backed by the LM alone (MLM-head score of each single-token NP)."""

    def __init__(self, provider: MLMProvider, kg: OpenKG):
        self.provider = provider
        self.kg = kg

    def eval(self):
        return self

    def score_all(self, heads: torch.Tensor, rps: torch.Tensor) -> torch.Tensor:
        queries = [ContextQuery(*base_query(self.kg, h, r)) for h, r in zip(heads.tolist(), rps.tolist())]
        return torch.from_numpy(lm_link_prediction_scores(queries, self.provider, self.kg))
