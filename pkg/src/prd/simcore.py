"""Similarity kernels and sample-wise softmax distributions.

All functions accept torch tensors (gradients flow through them) or anything
``torch.as_tensor`` understands. Plain sequences are promoted to float64.
"""
from __future__ import annotations

import math

import torch

from .errors import DomainError, NumericError

# Norms at or below this are treated as zero.
ZERO_NORM = 1e-12


def _as_tensor(x, name="input"):
    if isinstance(x, torch.Tensor):
        t = x
    else:
        t = torch.as_tensor(x, dtype=torch.float64)
    if not torch.is_floating_point(t):
        t = t.to(torch.float64)
    if t.numel() == 0:
        raise DomainError(f"{name} is empty")
    if not torch.isfinite(t).all():
        raise NumericError(f"{name} has non-finite entries")
    return t


def _check_temperature(tau):
    if not (isinstance(tau, (int, float)) and math.isfinite(tau) and tau > 0):
        raise DomainError(f"temperature must be a positive finite real, got {tau!r}")


def normalize_rows(x, name="input"):
    """L2-normalize the last axis, raising on zero-norm rows."""
    norms = x.norm(dim=-1, keepdim=True)
    if (norms <= ZERO_NORM).any():
        raise NumericError(f"{name} contains a zero-norm row")
    return x / norms


def cosine_sim(a, b) -> float:
    a = _as_tensor(a, "a")
    b = _as_tensor(b, "b")
    if a.dim() != 1 or b.dim() != 1:
        raise DomainError("cosine_sim expects two vectors")
    if a.shape != b.shape:
        raise DomainError(f"dimension mismatch: a has {a.shape[0]}, b has {b.shape[0]}")
    na, nb = a.norm(), b.norm()
    if na <= ZERO_NORM:
        raise DomainError("a has zero norm")
    if nb <= ZERO_NORM:
        raise DomainError("b has zero norm")
    out = torch.dot(a / na, b / nb)
    # rounding can push |cos| a hair past 1
    return float(out.clamp(-1.0, 1.0))


def temp_kernel(a, b, tau: float) -> float:
    """exp(cos(a, b) / tau)."""
    _check_temperature(tau)
    return math.exp(cosine_sim(a, b) / tau)


def cosine_matrix(x, y):
    """Pairwise cosine similarities between rows of ``x`` (n, d) and ``y`` (m, d)."""
    if x.shape[-1] != y.shape[-1]:
        raise DomainError(f"dimension mismatch: {x.shape[-1]} vs {y.shape[-1]}")
    return normalize_rows(x, "x") @ normalize_rows(y, "y").T


def cosine_rows(a, b):
    """Row-wise cosine similarity of two (N, d) tensors."""
    return (normalize_rows(a, "a") * normalize_rows(b, "b")).sum(dim=1)


def prototype_softmax(p, feats, tau: float):
    """Softmax over a set of features of their temperature-scaled cosine to ``p``.

    ``feats`` is an (N, d) tensor or a list of vectors. Returns a length-N
    tensor; differentiable with respect to both ``p`` and ``feats``.
    """
    _check_temperature(tau)
    if isinstance(feats, (list, tuple)):
        if len(feats) == 0:
            raise DomainError("feats is empty")
        feats = torch.stack([_as_tensor(f, "feature") for f in feats])
    else:
        feats = _as_tensor(feats, "feats")
    p = _as_tensor(p, "p")
    if feats.dim() != 2 or feats.shape[0] == 0:
        raise DomainError("feats must be a nonempty (N, d) collection")
    if p.dim() != 1 or p.shape[0] != feats.shape[1]:
        raise DomainError(f"prototype dim {tuple(p.shape)} does not match feature dim {feats.shape[1]}")
    if p.norm() <= ZERO_NORM:
        raise DomainError("p has zero norm")
    logits = cosine_matrix(p.unsqueeze(0), feats).squeeze(0) / tau
    return softmax_stable(logits)


def softmax_stable(logits, dim=-1):
    if not torch.isfinite(logits).all():
        raise NumericError("non-finite similarity logits")
    shifted = logits - logits.max(dim=dim, keepdim=True).values.detach()
    e = shifted.exp()
    return e / e.sum(dim=dim, keepdim=True)


def log_softmax_stable(logits, dim=-1):
    if not torch.isfinite(logits).all():
        raise NumericError("non-finite similarity logits")
    return logits - torch.logsumexp(logits, dim=dim, keepdim=True)
