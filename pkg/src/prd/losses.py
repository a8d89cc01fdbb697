"""Supervised contrastive, prototype and relation-distillation losses.

Gradient-flow contracts:

* ``supcon_loss`` differentiates through the projections only.
* ``prototype_loss`` stops the gradient at the encoder features, so only the
  prototypes of classes present in the batch receive gradient.
* ``relation_distill_loss`` differentiates through the current encoder
  features and the current old-class prototypes; the teacher is evaluated
  under ``no_grad``.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import torch

from .errors import ConfigError, DomainError, ProtocolError, StateError
from .protomem import PrototypeSet, TeacherSnapshot
from .simcore import cosine_matrix, cosine_rows, log_softmax_stable


@dataclass
class EmbeddingBatch:
    projections: torch.Tensor  # (N, k), unit rows
    features: torch.Tensor  # (N, d)
    labels: torch.Tensor  # (N,)
    view_of: torch.Tensor | None = None  # (N,) source-sample ids
    inputs: torch.Tensor | None = None  # raw inputs, fed to the teacher
    teacher_features: torch.Tensor | None = None

    def __post_init__(self):
        self.labels = torch.as_tensor(self.labels).long()
        if self.view_of is not None:
            self.view_of = torch.as_tensor(self.view_of).long()
        n = self.labels.shape[0]
        for name in ("projections", "features"):
            t = getattr(self, name)
            if t is not None and t.shape[0] != n:
                raise DomainError(f"{name} has {t.shape[0]} rows but there are {n} labels")

    def __len__(self):
        return int(self.labels.shape[0])


@dataclass
class LossConfig:
    tau_sc: float = 0.1
    tau_d: float | None = None  # None -> same as tau_sc
    alpha: float = 2.0
    beta: float = 4.0
    proto_loss: str = "tightness"  # "tightness" | "contrast" (ablation)
    sc_weight: float = 1.0

    def __post_init__(self):
        if self.tau_d is None:
            self.tau_d = self.tau_sc
        for name in ("tau_sc", "tau_d"):
            v = getattr(self, name)
            if not (math.isfinite(v) and v > 0):
                raise ConfigError(f"{name} must be > 0, got {v}")
        for name in ("alpha", "beta", "sc_weight"):
            v = getattr(self, name)
            if not (math.isfinite(v) and v >= 0):
                raise ConfigError(f"{name} must be >= 0, got {v}")
        if self.proto_loss not in ("tightness", "contrast"):
            raise ConfigError(f"proto_loss must be 'tightness' or 'contrast', got {self.proto_loss!r}")


@dataclass
class LossBreakdown:
    sc: torch.Tensor
    proto: torch.Tensor
    distill: torch.Tensor
    total: torch.Tensor

    def as_floats(self):
        return {k: float(getattr(self, k).detach()) for k in ("sc", "proto", "distill", "total")}


def positive_mask(labels, view_of=None):
    """Boolean (N, N) mask of A(i): same label or same source sample, excluding i."""
    labels = torch.as_tensor(labels)
    same = labels.unsqueeze(0) == labels.unsqueeze(1)
    if view_of is not None:
        view_of = torch.as_tensor(view_of)
        same = same | (view_of.unsqueeze(0) == view_of.unsqueeze(1))
    eye = torch.eye(len(labels), dtype=torch.bool, device=same.device)
    return same & ~eye


def supcon_per_anchor(projections, labels, tau: float, view_of=None):
    """Per-anchor supervised contrastive terms, shape (N,)."""
    n = projections.shape[0]
    if n < 2:
        raise ProtocolError("supervised contrastive loss needs at least two samples")
    pos = positive_mask(labels, view_of)
    n_pos = pos.sum(dim=1)
    if (n_pos == 0).any():
        bad = torch.nonzero(n_pos == 0).flatten().tolist()
        raise ProtocolError(f"anchors {bad} have no positive in the batch")
    logits = cosine_matrix(projections, projections) / tau
    eye = torch.eye(n, dtype=torch.bool)
    # drop the anchor itself from the denominator
    logits = logits.masked_fill(eye, float("-inf"))
    log_prob = logits - torch.logsumexp(logits, dim=1, keepdim=True)
    pos_sum = torch.where(pos, log_prob, torch.zeros_like(log_prob)).sum(dim=1)
    return -pos_sum / n_pos.to(projections.dtype)


def supcon_loss(batch: EmbeddingBatch, tau: float):
    """Mean over anchors of the supervised contrastive term."""
    return supcon_per_anchor(batch.projections, batch.labels, tau, batch.view_of).mean()


def _label_prototypes(batch, protos):
    labels = batch.labels.tolist()
    missing = sorted({c for c in labels if c not in protos})
    if missing:
        raise StateError(f"no prototype for batch labels {missing}")
    return protos.stack(labels)


def prototype_loss(batch: EmbeddingBatch, protos: PrototypeSet):
    """Tightness term: -mean_i cos(p_{y_i}, stopgrad(f_i))."""
    p = _label_prototypes(batch, protos)
    f = batch.features.detach()
    sims = cosine_rows(p, f)
    return -sims.mean()


def prototype_loss_with_contrasts(batch: EmbeddingBatch, protos: PrototypeSet, tau: float = 1.0):
    """Softmax cross-entropy style prototype loss over every known prototype.

    Per sample: -cos(p_y, f) + log sum_k exp(cos(p_k, f) / tau). Kept for the
    interference ablation; gradient reaches all prototypes and the encoder.
    """
    _label_prototypes(batch, protos)
    classes = protos.classes
    P = protos.stack(classes)
    sims = cosine_matrix(batch.features, P)  # (N, C)
    col = torch.as_tensor([classes.index(int(c)) for c in batch.labels.tolist()])
    own = sims.gather(1, col.unsqueeze(1)).squeeze(1)
    return (-own + torch.logsumexp(sims / tau, dim=1)).mean()


def teacher_features_for(batch: EmbeddingBatch, teacher: TeacherSnapshot):
    if batch.teacher_features is not None:
        return batch.teacher_features.detach()
    if batch.inputs is None:
        raise StateError("batch carries neither inputs nor precomputed teacher features")
    return teacher.features(batch.inputs)


def relation_distill_loss(batch: EmbeddingBatch, protos: PrototypeSet, teacher: TeacherSnapshot | None, tau: float):
    """Sum over old prototypes of KL(student || teacher) over the batch softmax."""
    old = protos.old_classes
    if not old:
        return batch.features.new_zeros(())
    if teacher is None:
        raise StateError("old classes exist but no teacher snapshot was provided")
    if teacher.classes != old:
        raise StateError(f"teacher covers classes {teacher.classes} but old classes are {old}")
    t_feats = teacher_features_for(batch, teacher)
    if t_feats.shape != batch.features.shape:
        raise StateError(f"teacher features {tuple(t_feats.shape)} vs student {tuple(batch.features.shape)}")
    with torch.no_grad():
        t_logp = log_softmax_stable(cosine_matrix(teacher.prototype_matrix(old), t_feats) / tau, dim=1)
    s_logp = log_softmax_stable(cosine_matrix(protos.stack(old), batch.features) / tau, dim=1)
    return (s_logp.exp() * (s_logp - t_logp)).sum()


def total_loss(batch, protos, teacher, cfg: LossConfig, skip_zero_weight: bool = False) -> LossBreakdown:
    """sc_weight * sc + alpha * proto + beta * distill.

    With ``skip_zero_weight`` a term whose coefficient is 0 is not evaluated and
    reported as 0.
    """
    zero = batch.projections.new_zeros(())
    if skip_zero_weight and cfg.sc_weight == 0:
        sc = zero
    else:
        sc = supcon_loss(batch, cfg.tau_sc)
    if skip_zero_weight and cfg.alpha == 0:
        proto = zero
    elif cfg.proto_loss == "contrast":
        proto = prototype_loss_with_contrasts(batch, protos, cfg.tau_sc)
    else:
        proto = prototype_loss(batch, protos)
    if skip_zero_weight and cfg.beta == 0:
        distill = zero
    else:
        distill = relation_distill_loss(batch, protos, teacher, cfg.tau_d)
    total = cfg.sc_weight * sc + cfg.alpha * proto + cfg.beta * distill
    return LossBreakdown(sc=sc, proto=proto, distill=distill, total=total)
