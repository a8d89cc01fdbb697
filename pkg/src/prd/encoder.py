"""Backbone f (inputs -> R^d) and projection head g (R^d -> unit sphere in R^k)."""
from __future__ import annotations

import copy
import json
import math
from collections import OrderedDict
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
import torch
from torch import nn

from .errors import ConfigError, DomainError, NumericError
from .simcore import ZERO_NORM

CHECKPOINT_VERSION = 1

# name -> tensor, in registration order
ParameterState = OrderedDict


@dataclass
class BackboneSpec:
    input_shape: tuple = (32,)
    feature_dim: int = 32
    projection_dim: int = 16
    arch: str = "mlp"  # "mlp" | "convnet" | "linear"
    hidden_dim: int = 64
    depth: int = 3
    seed: int = 0
    dtype: str = "float64"

    def __post_init__(self):
        self.input_shape = tuple(int(s) for s in self.input_shape)
        if self.arch not in ("mlp", "convnet", "linear"):
            raise ConfigError(f"unknown architecture id {self.arch!r}")
        if self.feature_dim < 2 or self.projection_dim < 2:
            raise ConfigError("feature_dim and projection_dim must be >= 2")
        if self.projection_dim >= self.feature_dim:
            raise ConfigError(
                f"projection_dim ({self.projection_dim}) must be smaller than feature_dim ({self.feature_dim})"
            )
        if self.arch == "convnet" and len(self.input_shape) != 3:
            raise ConfigError("convnet expects input_shape (channels, height, width)")
        if self.arch in ("mlp", "linear") and len(self.input_shape) != 1:
            raise ConfigError("mlp/linear expect a flat input_shape (dim,)")
        if self.depth < 1:
            raise ConfigError("depth must be >= 1")

    @property
    def torch_dtype(self):
        return getattr(torch, self.dtype)


def _mlp(in_dim, hidden, out_dim, depth):
    dims = [in_dim] + [hidden] * (depth - 1) + [out_dim]
    layers = []
    for i in range(depth):
        layers.append(nn.Linear(dims[i], dims[i + 1]))
        if i < depth - 1:
            layers.append(nn.ReLU())
    return nn.Sequential(*layers)


def _convnet(in_ch, width, out_dim):
    chans = [in_ch, width, width, 2 * width, 2 * width]
    layers = []
    for i in range(4):
        layers += [nn.Conv2d(chans[i], chans[i + 1], 3, stride=2 if i else 1, padding=1), nn.ReLU()]
    layers += [nn.AdaptiveAvgPool2d(1), nn.Flatten(), nn.Linear(chans[-1], out_dim)]
    return nn.Sequential(*layers)


class Backbone(nn.Module):
    """Encoder plus a two-layer projection head whose output is L2-normalized."""

    def __init__(self, spec: BackboneSpec):
        super().__init__()
        self.spec = spec
        d, k = spec.feature_dim, spec.projection_dim
        with torch.random.fork_rng(devices=[]):
            torch.manual_seed(spec.seed)
            if spec.arch == "mlp":
                self.encoder = _mlp(spec.input_shape[0], spec.hidden_dim, d, spec.depth)
            elif spec.arch == "linear":
                self.encoder = nn.Sequential(nn.Linear(spec.input_shape[0], d))
            else:
                self.encoder = _convnet(spec.input_shape[0], spec.hidden_dim // 4 or 8, d)
            self.head = nn.Sequential(nn.Linear(d, d), nn.ReLU(), nn.Linear(d, k))
        self.to(spec.torch_dtype)

    def _check_inputs(self, x):
        if tuple(x.shape[1:]) != self.spec.input_shape:
            raise DomainError(
                f"input shape {tuple(x.shape[1:])} does not match backbone input_shape {self.spec.input_shape}"
            )

    def features(self, x):
        self._check_inputs(x)
        return self.encoder(x.to(self.spec.torch_dtype))

    def project(self, feats):
        if feats.dim() != 2 or feats.shape[1] != self.spec.feature_dim:
            raise DomainError(f"expected (N, {self.spec.feature_dim}) features, got {tuple(feats.shape)}")
        if (feats.norm(dim=1) <= ZERO_NORM).any():
            raise NumericError("zero feature row fed to the projection head")
        # the head sees directions only, so rescaling a feature row leaves z unchanged
        z = self.head(feats / feats.norm(dim=1, keepdim=True))
        norms = z.norm(dim=1, keepdim=True)
        if (norms <= ZERO_NORM).any():
            raise NumericError("projection head produced a zero row")
        return z / norms

    def forward(self, x):
        f = self.features(x)
        return f, self.project(f)


def build_backbone(spec: BackboneSpec) -> Backbone:
    return Backbone(spec)


def forward_features(model: Backbone, inputs):
    return model.features(inputs)


def forward_projection(model: Backbone, features):
    return model.project(features)


def parameter_state(model: nn.Module):
    return OrderedDict((name, p.detach()) for name, p in model.named_parameters())


def clone_frozen(params):
    """Deep, mutation-isolated copy of a module or a name->tensor mapping.

    Modules come back in eval mode with ``requires_grad`` switched off.
    """
    if isinstance(params, nn.Module):
        frozen = copy.deepcopy(params)
        for p in frozen.parameters():
            p.requires_grad_(False)
        return frozen.eval()
    return OrderedDict((k, v.detach().clone()) for k, v in params.items())


def states_equal(a, b) -> bool:
    if list(a.keys()) != list(b.keys()):
        return False
    return all(torch.equal(a[k], b[k]) for k in a)


def save_checkpoint(path, state, spec: BackboneSpec | None = None, extra: dict | None = None):
    """Write ``state`` as ``<path>/params.bin`` plus ``<path>/manifest.json``.

    The blob is the little-endian concatenation of every tensor in manifest order.
    """
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    entries, offset, chunks = [], 0, []
    for name, t in state.items():
        arr = np.ascontiguousarray(t.detach().cpu().numpy())
        dt = arr.dtype.newbyteorder("<")
        raw = arr.astype(dt, copy=False).tobytes()
        entries.append({"name": name, "shape": list(arr.shape), "dtype": dt.str, "offset": offset, "nbytes": len(raw)})
        chunks.append(raw)
        offset += len(raw)
    manifest = {
        "version": CHECKPOINT_VERSION,
        "tensors": entries,
        "spec": None if spec is None else _spec_dict(spec),
        "extra": extra or {},
    }
    tmp = path / "params.bin.tmp"
    tmp.write_bytes(b"".join(chunks))
    tmp.replace(path / "params.bin")
    tmp = path / "manifest.json.tmp"
    tmp.write_text(json.dumps(manifest, indent=2, sort_keys=True))
    tmp.replace(path / "manifest.json")
    return path


def load_checkpoint(path):
    """Inverse of :func:`save_checkpoint`; returns ``(state, spec_or_None, manifest)``."""
    path = Path(path)
    manifest = json.loads((path / "manifest.json").read_text())
    if manifest.get("version") != CHECKPOINT_VERSION:
        raise ConfigError(f"unsupported checkpoint version {manifest.get('version')!r}")
    blob = (path / "params.bin").read_bytes()
    state = OrderedDict()
    for e in manifest["tensors"]:
        raw = blob[e["offset"]: e["offset"] + e["nbytes"]]
        arr = np.frombuffer(raw, dtype=np.dtype(e["dtype"])).reshape(e["shape"]).copy()
        state[e["name"]] = torch.from_numpy(arr)
    spec = BackboneSpec(**manifest["spec"]) if manifest.get("spec") else None
    return state, spec, manifest


def _spec_dict(spec):
    d = asdict(spec)
    d["input_shape"] = list(spec.input_shape)
    return d


def count_parameters(model: nn.Module) -> int:
    return sum(p.numel() for p in model.parameters())


def grad_norm(params) -> float:
    total = 0.0
    for p in params:
        if p.grad is not None:
            total += float(p.grad.detach().pow(2).sum())
    return math.sqrt(total)
