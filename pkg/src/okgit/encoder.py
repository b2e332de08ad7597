"""CaRE-style scorer.

NP embeddings are averaged over gold clusters and RPs go through a bi-GRU phrase encoder.
A ConvE-style convolutional predictor maps the pair to a tail vector.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import torch
import torch.nn.functional as F
from torch import nn
from torch.nn.utils.rnn import pack_padded_sequence

from .dataset import ClusterMap

PAD, UNK = "<pad>", "<unk>"


def reshape_dims(d: int) -> tuple[int, int]:
    """Largest divisor of d not above sqrt(d), paired with its cofactor (300 -> 15 x 20)."""
    h = int(math.isqrt(d))
    while d % h:
        h -= 1
    return h, d // h


def build_word_vocab(phrases: list[str]) -> list[str]:
    words = [PAD, UNK]
    seen = set(words)
    for p in phrases:
        for w in p.lower().split():
            if w not in seen:
                seen.add(w)
                words.append(w)
    return words


def tokenize_phrases(phrases: list[str], vocab: list[str]) -> tuple[torch.Tensor, torch.Tensor]:
    """Padded word-id matrix and lengths; unknown words map to the UNK row."""
    index = {w: i for i, w in enumerate(vocab)}
    toks = [[index.get(w, 1) for w in p.lower().split()] or [1] for p in phrases]
    width = max((len(t) for t in toks), default=1)
    ids = torch.zeros((len(toks), width), dtype=torch.long)
    for i, t in enumerate(toks):
        ids[i, : len(t)] = torch.tensor(t)
    return ids, torch.tensor([len(t) for t in toks], dtype=torch.long)


@dataclass
class EncoderConfig:
    n_nps: int
    n_words: int
    d_e: int = 300
    d_w: int = 300
    n_filters: int = 32
    kernel: int = 3
    input_dropout: float = 0.2
    feature_dropout: float = 0.3
    hidden_dropout: float = 0.2


class ClusterEncoder(nn.Module):
    """NP embedding = unweighted mean of the raw embeddings of its cluster members."""

    def __init__(self, n_nps: int, d_e: int, clusters: ClusterMap, init: torch.Tensor | None = None, project: bool = False):
        super().__init__()
        d_in = init.shape[1] if init is not None else d_e
        self.embeddings = nn.Embedding(n_nps, d_in)
        nn.init.xavier_normal_(self.embeddings.weight)
        if init is not None:
            with torch.no_grad():
                self.embeddings.weight.copy_(init)
        if d_in != d_e and not project:
            raise ValueError(f"NP init vectors have dimension {d_in}; set d_e={d_in} or enable the projection")
        self.proj = nn.Linear(d_in, d_e, bias=False) if project else None
        rows, cols = [], []
        for i in range(n_nps):
            for m in clusters.members(i):
                rows.append(i)
                cols.append(m)
        sizes = [len(clusters.members(i)) for i in range(n_nps)]
        self.register_buffer("_agg_idx", torch.tensor([rows, cols], dtype=torch.long), persistent=False)
        self.register_buffer("_agg_size", torch.tensor(sizes, dtype=torch.float64), persistent=False)
        self.n_nps = n_nps

    def all(self) -> torch.Tensor:
        w = self.embeddings.weight
        rows, cols = self._agg_idx
        out = torch.zeros_like(w).index_add_(0, rows, w[cols]) / self._agg_size.to(w.dtype).unsqueeze(1)
        return self.proj(out) if self.proj is not None else out

    def forward(self, ids: torch.Tensor) -> torch.Tensor:
        return self.all()[ids]


class PhraseEncoder(nn.Module):
    """Bidirectional GRU over word embeddings; final states concatenated and projected to d_r."""

    def __init__(self, n_words: int, d_w: int, d_r: int, init: torch.Tensor | None = None):
        super().__init__()
        self.words = nn.Embedding(n_words, d_w, padding_idx=0)
        nn.init.xavier_normal_(self.words.weight)
        with torch.no_grad():
            if init is not None:
                self.words.weight.copy_(init)
            self.words.weight[0].zero_()
        self.gru = nn.GRU(d_w, d_r, batch_first=True, bidirectional=True)
        self.proj = nn.Linear(2 * d_r, d_r)

    def forward(self, ids: torch.Tensor, lengths: torch.Tensor) -> torch.Tensor:
        packed = pack_padded_sequence(self.words(ids), lengths.cpu(), batch_first=True, enforce_sorted=False)
        _, h = self.gru(packed)
        return self.proj(torch.cat([h[0], h[1]], dim=-1))


class ConvPredictor(nn.Module):
    """Stack the reshaped (NP, RP) vectors and convolve them; a linear layer projects back to d_e."""

    def __init__(self, cfg: EncoderConfig):
        super().__init__()
        self.h, self.w = reshape_dims(cfg.d_e)
        out_h, out_w = 2 * self.h - cfg.kernel + 1, self.w - cfg.kernel + 1
        if out_h < 1 or out_w < 1:
            raise ValueError(f"d_e={cfg.d_e} reshapes to {self.h}x{self.w}, too small for a {cfg.kernel}x{cfg.kernel} kernel")
        self.inp_drop = nn.Dropout(cfg.input_dropout)
        self.feature_drop = nn.Dropout2d(cfg.feature_dropout)
        self.hidden_drop = nn.Dropout(cfg.hidden_dropout)
        self.bn0 = nn.BatchNorm2d(1)
        self.conv = nn.Conv2d(1, cfg.n_filters, cfg.kernel)
        self.bn1 = nn.BatchNorm2d(cfg.n_filters)
        self.fc = nn.Linear(cfg.n_filters * out_h * out_w, cfg.d_e)
        self.bn2 = nn.BatchNorm1d(cfg.d_e)

    def forward(self, e: torch.Tensor, r: torch.Tensor) -> torch.Tensor:
        x = torch.cat([e.view(-1, 1, self.h, self.w), r.view(-1, 1, self.h, self.w)], dim=2)
        x = self.inp_drop(self.bn0(x))
        x = self.feature_drop(F.relu(self.bn1(self.conv(x))))
        x = self.fc(x.flatten(1))
        return F.relu(self.bn2(self.hidden_drop(x)))


class CaRE(nn.Module):
    """Canonicalization-aware scorer; ``score_all`` gives t_C . e for every NP e."""

    def __init__(
        self,
        cfg: EncoderConfig,
        clusters: ClusterMap,
        rp_ids: torch.Tensor,
        rp_lengths: torch.Tensor,
        generator: torch.Generator | None = None,
        np_init: torch.Tensor | None = None,
        np_project: bool = False,
        word_init: torch.Tensor | None = None,
    ):
        super().__init__()
        self.cfg = cfg
        with _seeded(generator):
            self.np_encoder = ClusterEncoder(cfg.n_nps, cfg.d_e, clusters, np_init, np_project)
            self.rp_encoder = PhraseEncoder(cfg.n_words, cfg.d_w, cfg.d_e, word_init)
            self.predictor = ConvPredictor(cfg)
        self.register_buffer("rp_ids", rp_ids, persistent=False)
        self.register_buffer("rp_lengths", rp_lengths, persistent=False)

    def encode_np(self, ids: torch.Tensor) -> torch.Tensor:
        return self.np_encoder(ids)

    def encode_rp(self, rps: torch.Tensor) -> torch.Tensor:
        return self.rp_encoder(self.rp_ids[rps], self.rp_lengths[rps])

    def predict_tail_vector(self, heads: torch.Tensor, rps: torch.Tensor) -> torch.Tensor:
        return self.predictor(self.encode_np(heads), self.encode_rp(rps))

    def score_all(self, heads: torch.Tensor, rps: torch.Tensor) -> torch.Tensor:
        """psi_pred for every candidate NP: (batch, n_nps)."""
        all_np = self.np_encoder.all()
        t_c = self.predictor(all_np[heads], self.encode_rp(rps))
        return t_c @ all_np.t()


def score_pred(t_c: torch.Tensor, t: torch.Tensor) -> torch.Tensor:
    """Dot product between predicted and candidate tail vectors (last axis)."""
    return (t_c * t).sum(-1)


class _seeded:
    """Run module construction under a private generator so init is isolated from the global RNG."""

    def __init__(self, generator: torch.Generator | None):
        self.generator = generator

    def __enter__(self):
        if self.generator is not None:
            self._state = torch.random.get_rng_state()
            torch.random.set_rng_state(self.generator.get_state())

    def __exit__(self, *exc):
        if self.generator is not None:
            self.generator.set_state(torch.random.get_rng_state())
            torch.random.set_rng_state(self._state)
        return False
