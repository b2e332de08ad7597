"""Shared fixtures: toy OpenKGs on disk and a tiny randomly initialised masked LM."""

from __future__ import annotations

import sys
from pathlib import Path

import pytest
import torch

sys.path.insert(0, str(Path(__file__).parent))

from toykg import make_toy_kg  # noqa: E402

from okgit.dataset import augment_inverse_relations, save_openkg  # noqa: E402

torch.use_deterministic_algorithms(True)

SPECIAL = ["[PAD]", "[UNK]", "[CLS]", "[SEP]", "[MASK]"]


def toy_lm_vocab(kg) -> list[str]:
    """Every whitespace word of the toy KG except the alias forms, which stay multi-piece."""
    words = set()
    for s in kg.nps + kg.rps:
        words.update(s.lower().split())
    words -= {"j.s.", "w.a."}
    pieces = ["j", ".", "s", "w", "a", "##s", "the", "of"]
    return SPECIAL + sorted(words | set(pieces))


def build_tiny_mlm(directory: Path, vocab: list[str], seed: int = 0, hidden: int = 16) -> Path:
    from transformers import BertConfig, BertForMaskedLM, BertTokenizer

    directory.mkdir(parents=True, exist_ok=True)
    vocab_file = directory / "vocab.txt"
    vocab_file.write_text("\n".join(vocab) + "\n", encoding="utf-8")
    cfg = BertConfig(
        vocab_size=len(vocab),
        hidden_size=hidden,
        num_hidden_layers=2,
        num_attention_heads=2,
        intermediate_size=2 * hidden,
        max_position_embeddings=32,
        hidden_dropout_prob=0.0,
        attention_probs_dropout_prob=0.0,
    )
    torch.manual_seed(seed)
    BertForMaskedLM(cfg).save_pretrained(directory)
    BertTokenizer(vocab={w: i for i, w in enumerate(vocab)}, do_lower_case=True).save_pretrained(directory)
    return directory


@pytest.fixture(scope="session")
def toy_kg():
    return make_toy_kg()


@pytest.fixture(scope="session")
def toy_kg_aug(toy_kg):
    return augment_inverse_relations(toy_kg)


@pytest.fixture(scope="session")
def toy_dir(tmp_path_factory, toy_kg):
    d = tmp_path_factory.mktemp("toykg")
    save_openkg(toy_kg, d)
    return d


@pytest.fixture(scope="session")
def tiny_mlm_dir(tmp_path_factory, toy_kg):
    return build_tiny_mlm(tmp_path_factory.mktemp("tiny_mlm"), toy_lm_vocab(toy_kg))


@pytest.fixture(scope="session")
def tiny_provider(tiny_mlm_dir):
    from okgit.lm_context import MLMProvider

    return MLMProvider("mlm-base", tiny_mlm_dir)


def write_random_cache(path, kg, provider_id: str = "mlm-base|lowercase=1", dim: int = 12, seed: int = 0):
    """Context cache with seeded Gaussian vectors for every (direction, head, base rp) of an augmented KG."""
    import numpy as np

    from okgit.lm_context import ContextQuery, ContextVectorCache

    qs = [ContextQuery(d, h, r) for d in ("tail", "head") for h in range(len(kg.nps)) for r in range(kg.n_base_rps)]
    cache = ContextVectorCache.create(path, provider_id, dim)
    cache.append(qs, np.random.default_rng(seed).standard_normal((len(qs), dim)).astype(np.float32))
    return cache


@pytest.fixture(scope="session")
def toy_cache_path(tmp_path_factory, toy_kg_aug):
    path = tmp_path_factory.mktemp("cache") / "toy.okgc"
    write_random_cache(path, toy_kg_aug)
    return path
