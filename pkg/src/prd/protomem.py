"""Class prototypes: creation, old/current partition, teacher snapshots, prediction."""
from __future__ import annotations

import hashlib
from dataclasses import dataclass
from types import MappingProxyType

import numpy as np
import torch
from torch import nn

from .encoder import clone_frozen, parameter_state
from .errors import DomainError, StateError
from .simcore import ZERO_NORM, cosine_matrix


class PrototypeSet:
    """Trainable per-class vectors in encoder-feature space.

    A class is *old* when it was introduced before ``current_session`` and
    *current* otherwise.
    """

    def __init__(self, dim: int, current_session: int = 1, dtype=torch.float64):
        if dim < 1:
            raise DomainError("prototype dimension must be >= 1")
        self.dim = int(dim)
        self.dtype = dtype
        self.current_session = int(current_session)
        self.vectors: dict[int, nn.Parameter] = {}
        self.introduced_in: dict[int, int] = {}

    # bookkeeping

    @property
    def classes(self):
        return sorted(self.vectors)

    @property
    def old_classes(self):
        return sorted(c for c, s in self.introduced_in.items() if s < self.current_session)

    @property
    def current_classes(self):
        return sorted(c for c, s in self.introduced_in.items() if s >= self.current_session)

    def __contains__(self, c):
        return int(c) in self.vectors

    def __len__(self):
        return len(self.vectors)

    def add_classes(self, classes, seed: int):
        classes = [int(c) for c in classes]
        if len(set(classes)) != len(classes):
            raise StateError(f"duplicate class ids in {classes}")
        clash = sorted(set(classes) & set(self.vectors))
        if clash:
            raise StateError(f"classes {clash} already have prototypes")
        gen = torch.Generator().manual_seed(int(seed))
        draws = torch.randn(len(classes), self.dim, generator=gen, dtype=torch.float64)
        draws = draws / draws.norm(dim=1, keepdim=True)
        for c, v in zip(classes, draws):
            self.vectors[c] = nn.Parameter(v.to(self.dtype).clone())
            self.introduced_in[c] = self.current_session
        return self

    def advance_session(self):
        self.current_session += 1
        return self

    # tensor access

    def parameters(self, classes=None):
        ids = self.classes if classes is None else [int(c) for c in classes]
        return [self.vectors[c] for c in ids]

    def stack(self, classes):
        """(len(classes), d) tensor, differentiable w.r.t. the listed prototypes."""
        missing = [int(c) for c in classes if int(c) not in self.vectors]
        if missing:
            raise StateError(f"no prototype for classes {sorted(set(missing))}")
        return torch.stack([self.vectors[int(c)] for c in classes])

    def set_vector(self, c, value):
        with torch.no_grad():
            self.vectors[int(c)].copy_(torch.as_tensor(value, dtype=self.dtype))

    def zero_grad(self):
        for p in self.vectors.values():
            p.grad = None

    def to_record(self):
        return {
            "dim": self.dim,
            "current_session": self.current_session,
            "classes": [
                {"id": c, "introduced_in": self.introduced_in[c], "vector": self.vectors[c].detach().tolist()}
                for c in self.classes
            ],
        }

    @classmethod
    def from_record(cls, rec, dtype=torch.float64):
        ps = cls(rec["dim"], rec["current_session"], dtype=dtype)
        for e in rec["classes"]:
            ps.vectors[int(e["id"])] = nn.Parameter(torch.tensor(e["vector"], dtype=dtype))
            ps.introduced_in[int(e["id"])] = int(e["introduced_in"])
        return ps


def add_classes(protos: PrototypeSet, classes, d: int, seed: int) -> PrototypeSet:
    if d != protos.dim:
        raise DomainError(f"requested dim {d} but the set holds {protos.dim}-dim prototypes")
    return protos.add_classes(classes, seed)


@dataclass(frozen=True)
class TeacherSnapshot:
    """Frozen encoder and prototypes from the end of a session."""

    encoder: nn.Module
    prototypes: MappingProxyType
    session: int

    @property
    def classes(self):
        return sorted(self.prototypes)

    def prototype_matrix(self, classes):
        missing = [c for c in classes if c not in self.prototypes]
        if missing:
            raise StateError(f"teacher has no prototype for classes {missing}")
        return torch.stack([self.prototypes[c] for c in classes])

    @torch.no_grad()
    def features(self, inputs):
        return self.encoder.features(inputs)

    def digest(self) -> str:
        return state_digest(self.encoder, self.prototypes)


def snapshot(protos: PrototypeSet, encoder: nn.Module, session: int | None = None) -> TeacherSnapshot:
    frozen_protos = {c: v.detach().clone().requires_grad_(False) for c, v in protos.vectors.items()}
    return TeacherSnapshot(
        encoder=clone_frozen(encoder),
        prototypes=MappingProxyType(frozen_protos),
        session=protos.current_session if session is None else session,
    )


def state_digest(encoder: nn.Module, prototypes) -> str:
    """SHA-256 over encoder parameters and prototype vectors (in class order)."""
    h = hashlib.sha256()
    for name, t in parameter_state(encoder).items():
        h.update(name.encode())
        h.update(np.ascontiguousarray(t.cpu().numpy()).tobytes())
    items = prototypes.vectors if isinstance(prototypes, PrototypeSet) else prototypes
    for c in sorted(items):
        h.update(str(c).encode())
        h.update(np.ascontiguousarray(items[c].detach().cpu().numpy()).tobytes())
    return h.hexdigest()


def _candidate_classes(protos, allowed):
    known = protos.classes if isinstance(protos, PrototypeSet) else sorted(protos)
    if allowed is None:
        if not known:
            raise StateError("no prototypes to predict with")
        return known
    allowed = sorted({int(c) for c in allowed})
    if not allowed:
        raise DomainError("allowed class set is empty")
    unknown = sorted(set(allowed) - set(known))
    if unknown:
        raise DomainError(f"allowed classes {unknown} have no prototype")
    return allowed


@torch.no_grad()
def predict_batch(features, protos, allowed=None):
    """Nearest-prototype (cosine) class ids for each row of ``features``.

    ``protos`` is a PrototypeSet or a mapping class id -> vector. Ties resolve
    to the smallest class id.
    """
    cands = _candidate_classes(protos, allowed)
    vecs = protos.stack(cands) if isinstance(protos, PrototypeSet) else torch.stack([protos[c] for c in cands])
    feats = torch.as_tensor(features, dtype=vecs.dtype)
    if feats.dim() == 1:
        feats = feats.unsqueeze(0)
    if feats.shape[1] != vecs.shape[1]:
        raise DomainError(f"feature dim {feats.shape[1]} does not match prototype dim {vecs.shape[1]}")
    if (feats.norm(dim=1) <= ZERO_NORM).any():
        raise DomainError("zero-norm feature cannot be classified by cosine similarity")
    sims = cosine_matrix(feats, vecs)
    idx = sims.argmax(dim=1)  # first maximum -> smallest id
    return torch.as_tensor(cands)[idx]


def predict(feature, protos, allowed=None) -> int:
    return int(predict_batch(feature, protos, allowed)[0])
