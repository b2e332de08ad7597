"""Type projectors with the type-compatibility score. The combined OKGIT scorer builds on them."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch
from torch import nn

from .encoder import CaRE, _seeded
from .lm_context import DIRECTIONS, LIVE_PROVIDERS, ContextError, ContextVectorCache

VARIANTS = ("euclid", "dot")


@dataclass
class ScoreBundle:
    psi_pred: float
    psi_type: float
    psi_okgit: float


def project_type(v: torch.Tensor, projector: torch.Tensor) -> torch.Tensor:
    """tau = projector @ v; ``v`` may carry leading batch dimensions."""
    if projector.dim() != 2 or projector.shape[1] != v.shape[-1]:
        raise ValueError(f"projector {tuple(projector.shape)} cannot act on vectors of dimension {v.shape[-1]}")
    return v @ projector.t()


def type_score(tau: torch.Tensor, tau_b: torch.Tensor, variant: str = "euclid") -> torch.Tensor:
    """Type compatibility of matching rows: ``-||tau_b - tau||^2`` or ``tau_b . tau``."""
    if tau.shape[-1] != tau_b.shape[-1]:
        raise ValueError(f"type vectors differ in dimension: {tau.shape[-1]} vs {tau_b.shape[-1]}")
    if variant == "euclid":
        return -((tau_b - tau) ** 2).sum(-1)
    if variant == "dot":
        return (tau_b * tau).sum(-1)
    raise ValueError(f"unknown type score variant {variant!r}")


def type_score_all(tau_all: torch.Tensor, tau_b: torch.Tensor, variant: str = "euclid") -> torch.Tensor:
    """Pairwise type scores between each query (rows of tau_b) and every candidate: (B, N)."""
    dots = tau_b @ tau_all.t()
    if variant == "dot":
        return dots
    if variant != "euclid":
        raise ValueError(f"unknown type score variant {variant!r}")
    sq = (tau_b**2).sum(-1, keepdim=True) - 2 * dots + (tau_all**2).sum(-1).unsqueeze(0)
    # Rounding in the expansion can dip below zero; the score itself is never positive.
    return -sq.clamp_min(0)


def glorot_uniform_(w: torch.Tensor) -> torch.Tensor:
    fan_out, fan_in = w.shape
    bound = math.sqrt(6.0 / (fan_in + fan_out))
    with torch.no_grad():
        return w.uniform_(-bound, bound)


class ContextTable(nn.Module):
    """Context vectors t_B as a frozen tensor, addressed by (direction, head, original rp)."""

    def __init__(self, keys: dict[tuple[int, int, int], int], matrix: torch.Tensor):
        super().__init__()
        self.keys = keys
        self.register_buffer("matrix", matrix, persistent=False)

    @classmethod
    def from_cache(cls, cache: ContextVectorCache) -> "ContextTable":
        return cls(dict(cache.index), torch.from_numpy(np.array(cache.matrix())))

    @property
    def dim(self) -> int:
        return self.matrix.shape[1]

    def rows(self, keys: list[tuple[int, int, int]]) -> torch.Tensor:
        missing = [k for k in keys if k not in self.keys]
        if missing:
            shown = ", ".join(f"({'tail' if d == 0 else 'head'}, {h}, {r})" for d, h, r in missing[:10])
            raise ContextError(f"{len(missing)} context queries missing from cache: {shown}")
        return torch.tensor([self.keys[k] for k in keys], dtype=torch.long)


class OKGIT(nn.Module):
    """psi_okgit = psi_pred + gamma * psi_type, with t_B from a frozen context table or live
    (``concat``/``add``) from the head-NP and RP encodings."""

    def __init__(
        self,
        care: CaRE,
        d_type: int,
        n_base_rps: int,
        gamma: float = 1.0,
        variant: str = "euclid",
        provider: str = "mlm-base",
        context: ContextTable | None = None,
        generator: torch.Generator | None = None,
    ):
        super().__init__()
        if variant not in VARIANTS:
            raise ValueError(f"unknown type score variant {variant!r}")
        if gamma < 0:
            raise ValueError("gamma must be nonnegative")
        self.care = care
        self.gamma = float(gamma)
        self.variant = variant
        self.provider = provider
        self.n_base_rps = n_base_rps
        self.context = context
        d_e = care.cfg.d_e
        if provider == "concat":
            d_b = 2 * d_e
        elif provider == "add":
            d_b = d_e
        else:
            if context is None:
                raise ContextError(f"provider {provider!r} needs a context cache")
            d_b = context.dim
        self.d_b = d_b
        with _seeded(generator):
            self.P = nn.Parameter(glorot_uniform_(torch.empty(d_type, d_e)))
            self.P_B = nn.Parameter(glorot_uniform_(torch.empty(d_type, d_b)))

    def context_keys(self, heads: torch.Tensor, rps: torch.Tensor) -> list[tuple[int, int, int]]:
        n = self.n_base_rps
        return [
            (DIRECTIONS["head"], h, r - n) if r >= n else (DIRECTIONS["tail"], h, r)
            for h, r in zip(heads.tolist(), rps.tolist())
        ]

    def context_vectors(self, heads: torch.Tensor, rps: torch.Tensor, all_np: torch.Tensor | None = None) -> torch.Tensor:
        if self.provider in LIVE_PROVIDERS:
            h = (all_np if all_np is not None else self.care.np_encoder.all())[heads]
            r = self.care.encode_rp(rps)
            return torch.cat([h, r], -1) if self.provider == "concat" else h + r
        rows = self.context.rows(self.context_keys(heads, rps))
        return self.context.matrix[rows].to(self.P_B.dtype)

    def score_all(self, heads: torch.Tensor, rps: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
        """(psi_pred, psi_type, psi_okgit), each (batch, n_nps)."""
        all_np = self.care.np_encoder.all()
        t_c = self.care.predictor(all_np[heads], self.care.encode_rp(rps))
        psi_pred = t_c @ all_np.t()
        tau_b = project_type(self.context_vectors(heads, rps, all_np), self.P_B)
        psi_type = type_score_all(project_type(all_np, self.P), tau_b, self.variant)
        return psi_pred, psi_type, psi_pred + self.gamma * psi_type

    def forward(self, heads: torch.Tensor, rps: torch.Tensor) -> torch.Tensor:
        return self.score_all(heads, rps)[2]


@torch.no_grad()
def combined_score(model: OKGIT, h: int, r: int, t: int) -> ScoreBundle:
    """Score one triple with all three components (eval mode)."""
    was_training = model.training
    model.eval()
    try:
        heads, rps = torch.tensor([h]), torch.tensor([r])
        care = model.care
        t_c = care.predict_tail_vector(heads, rps)
        t_vec = care.encode_np(torch.tensor([t]))
        psi_pred = (t_c * t_vec).sum(-1)
        tau = project_type(t_vec, model.P)
        tau_b = project_type(model.context_vectors(heads, rps), model.P_B)
        psi_type = type_score(tau, tau_b, model.variant)
    finally:
        model.train(was_training)
    p, ty = float(psi_pred), float(psi_type)
    return ScoreBundle(p, ty, p + model.gamma * ty)
