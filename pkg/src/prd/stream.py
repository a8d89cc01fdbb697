"""Continual data streams: datasets, class-partitioned sessions, two-view batches, replay."""
from __future__ import annotations

import math
from collections import deque
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .errors import ConfigError, DomainError, StateError


# ---------------------------------------------------------------- datasets


@dataclass
class Dataset:
    x_train: torch.Tensor
    y_train: torch.Tensor
    x_test: torch.Tensor
    y_test: torch.Tensor
    name: str = "dataset"

    @property
    def num_classes(self):
        return int(torch.unique(self.y_train).numel())

    @property
    def classes(self):
        return sorted(int(c) for c in torch.unique(self.y_train))

    @property
    def input_shape(self):
        return tuple(self.x_train.shape[1:])


@dataclass
class GaussianClustersSpec:
    """Gaussian-cluster classification problem.

    Class means are ``margin`` times random unit vectors; samples add isotropic
    noise with standard deviation ``spread``. ``subclusters`` > 1 makes each
    class a mixture, which needs a nonlinear encoder to separate. With
    ``latent_dim`` set, all means lie in one random ``latent_dim``-dimensional
    subspace, so every task competes for the same input directions.
    """

    num_classes: int = 10
    dim: int = 32
    train_per_class: int = 100
    test_per_class: int = 100
    margin: float = 3.0
    spread: float = 1.0
    subclusters: int = 1
    latent_dim: int | None = None
    seed: int = 0


def make_gaussian_clusters(spec: GaussianClustersSpec) -> Dataset:
    if spec.num_classes < 2 or spec.dim < 1:
        raise ConfigError("need at least 2 classes and dim >= 1")
    rng = np.random.default_rng(spec.seed)
    if spec.latent_dim is None:
        centers = rng.standard_normal((spec.num_classes, spec.subclusters, spec.dim))
    else:
        if not 1 <= spec.latent_dim <= spec.dim:
            raise ConfigError("latent_dim must lie in [1, dim]")
        basis = np.linalg.qr(rng.standard_normal((spec.dim, spec.latent_dim)))[0]
        centers = rng.standard_normal((spec.num_classes, spec.subclusters, spec.latent_dim)) @ basis.T
    centers *= spec.margin / np.linalg.norm(centers, axis=-1, keepdims=True)

    def draw(per_class):
        xs, ys = [], []
        for c in range(spec.num_classes):
            which = rng.integers(0, spec.subclusters, size=per_class)
            xs.append(centers[c, which] + spec.spread * rng.standard_normal((per_class, spec.dim)))
            ys.append(np.full(per_class, c))
        return torch.from_numpy(np.concatenate(xs)), torch.from_numpy(np.concatenate(ys)).long()

    xtr, ytr = draw(spec.train_per_class)
    xte, yte = draw(spec.test_per_class)
    return Dataset(xtr, ytr, xte, yte, name="gaussian")


@dataclass
class TinyImageSpec:
    """32x32 RGB images: per-class colour and oriented stripe pattern plus noise."""

    num_classes: int = 10
    size: int = 32
    train_per_class: int = 50
    test_per_class: int = 50
    noise: float = 0.15
    seed: int = 0


def make_tiny_images(spec: TinyImageSpec) -> Dataset:
    rng = np.random.default_rng(spec.seed)
    colors = rng.uniform(0.2, 0.8, size=(spec.num_classes, 3))
    angles = rng.uniform(0, math.pi, size=spec.num_classes)
    freqs = rng.uniform(2, 6, size=spec.num_classes)
    yy, xx = np.meshgrid(np.linspace(0, 1, spec.size), np.linspace(0, 1, spec.size), indexing="ij")

    def draw(per_class):
        xs, ys = [], []
        for c in range(spec.num_classes):
            phase = rng.uniform(0, 2 * math.pi, size=(per_class, 1, 1))
            u = np.cos(angles[c]) * xx + np.sin(angles[c]) * yy
            stripes = 0.5 + 0.5 * np.sin(2 * math.pi * freqs[c] * u[None] + phase)
            img = colors[c][None, :, None, None] * stripes[:, None]
            img = img + spec.noise * rng.standard_normal(img.shape)
            xs.append(np.clip(img, 0, 1))
            ys.append(np.full(per_class, c))
        return torch.from_numpy(np.concatenate(xs)), torch.from_numpy(np.concatenate(ys)).long()

    xtr, ytr = draw(spec.train_per_class)
    xte, yte = draw(spec.test_per_class)
    return Dataset(xtr, ytr, xte, yte, name="tiny_images")


def load_directory(path) -> Dataset:
    """Load ``train.npz`` and ``test.npz`` (arrays ``x`` and ``y``) from a directory.

    This is the hook for real benchmarks (Split-CIFAR100 etc.), which are not shipped.
    """
    path = Path(path)
    try:
        tr = np.load(path / "train.npz")
        te = np.load(path / "test.npz")
    except FileNotFoundError as e:
        raise ConfigError(f"dataset directory {path} must contain train.npz and test.npz") from e
    return Dataset(
        torch.from_numpy(tr["x"]).double(), torch.from_numpy(tr["y"]).long(),
        torch.from_numpy(te["x"]).double(), torch.from_numpy(te["y"]).long(),
        name=path.name,
    )


def load_dataset(ref: dict) -> Dataset:
    """Resolve a dataset reference from a run config.

    ``{"generator": "gaussian", ...GaussianClustersSpec fields}``,
    ``{"generator": "tiny_images", ...}`` or ``{"path": "<dir>"}``.
    """
    ref = dict(ref)
    if "path" in ref:
        return load_directory(ref["path"])
    gen = ref.pop("generator", "gaussian")
    try:
        if gen == "gaussian":
            return make_gaussian_clusters(GaussianClustersSpec(**ref))
        if gen == "tiny_images":
            return make_tiny_images(TinyImageSpec(**ref))
    except TypeError as e:
        raise ConfigError(f"bad dataset parameters: {e}") from e
    raise ConfigError(f"unknown dataset generator {gen!r}")


# ---------------------------------------------------------------- sessions


@dataclass
class SessionSpec:
    index: int  # 1-based
    classes: tuple
    train_idx: torch.Tensor
    test_idx: torch.Tensor
    shift: torch.Tensor | None = None  # additive input shift (domain-incremental)

    def __len__(self):
        return int(self.train_idx.numel())


def build_stream(dataset: Dataset, num_tasks: int, classes_per_task: int, seed: int,
                 mode: str = "class", domain_shift: float = 0.0):
    """Partition a dataset into ``num_tasks`` sessions.

    ``mode`` "class"/"task" draws disjoint class sets from a seeded permutation.
    ``mode`` "domain" gives every session the same classes, a disjoint slice of
    the training data and its own seeded additive input shift of norm
    ``domain_shift``.
    """
    if num_tasks < 1 or classes_per_task < 1:
        raise ConfigError("num_tasks and classes_per_task must be >= 1")
    classes = dataset.classes
    rng = np.random.default_rng(seed)
    if mode in ("class", "task"):
        if num_tasks * classes_per_task > len(classes):
            raise ConfigError(
                f"{num_tasks} tasks x {classes_per_task} classes exceeds the {len(classes)} available classes"
            )
        order = [classes[i] for i in rng.permutation(len(classes))]
        sessions = []
        for t in range(num_tasks):
            cls = tuple(sorted(order[t * classes_per_task:(t + 1) * classes_per_task]))
            sel = torch.as_tensor(cls)
            sessions.append(SessionSpec(
                index=t + 1, classes=cls,
                train_idx=torch.nonzero(torch.isin(dataset.y_train, sel)).flatten(),
                test_idx=torch.nonzero(torch.isin(dataset.y_test, sel)).flatten(),
            ))
        return sessions
    if mode == "domain":
        if classes_per_task > len(classes):
            raise ConfigError("classes_per_task exceeds available classes")
        cls = tuple(sorted(classes[:classes_per_task]))
        sel = torch.as_tensor(cls)
        tr = torch.nonzero(torch.isin(dataset.y_train, sel)).flatten()
        tr = tr[torch.from_numpy(rng.permutation(len(tr)))]
        te = torch.nonzero(torch.isin(dataset.y_test, sel)).flatten()
        chunks = torch.tensor_split(tr, num_tasks)
        shape = dataset.input_shape
        sessions = []
        for t in range(num_tasks):
            shift = torch.from_numpy(rng.standard_normal(shape))
            shift = shift * (domain_shift / max(float(shift.norm()), 1e-12)) if t else torch.zeros(shape, dtype=torch.float64)
            sessions.append(SessionSpec(t + 1, cls, torch.sort(chunks[t]).values, te, shift=shift))
        return sessions
    raise ConfigError(f"unknown stream mode {mode!r}")


def check_disjoint(sessions) -> bool:
    seen = set()
    for s in sessions:
        if seen & set(s.classes):
            return False
        seen |= set(s.classes)
    return True


class AccessLog:
    """Records which session's training data was read while which session was active."""

    def __init__(self):
        self.active_session = None
        self.reads: list[tuple[int, int, int]] = []  # (active session, data session, count)

    def record(self, data_session: int, count: int):
        self.reads.append((self.active_session, data_session, int(count)))

    def prior_session_reads(self):
        return [r for r in self.reads if r[0] is not None and r[1] < r[0]]


class SessionData:
    """Access-logged view of one session's data."""

    def __init__(self, dataset: Dataset, session: SessionSpec, log: AccessLog | None = None):
        self.dataset = dataset
        self.session = session
        self.log = log

    def __len__(self):
        return len(self.session)

    def _shifted(self, x):
        s = self.session.shift
        return x if s is None else x + s.to(x.dtype)

    def train(self, positions):
        """Training samples at ``positions`` (indices into this session's slice)."""
        positions = torch.as_tensor(positions).long()
        idx = self.session.train_idx[positions]
        if self.log is not None:
            self.log.record(self.session.index, len(idx))
        return self._shifted(self.dataset.x_train[idx]), self.dataset.y_train[idx]

    def test(self):
        idx = self.session.test_idx
        return self._shifted(self.dataset.x_test[idx]), self.dataset.y_test[idx]


# ---------------------------------------------------------------- augmentation


@dataclass
class AugmentConfig:
    enabled: bool = True
    # vector inputs
    noise_std: float = 0.1
    scale_jitter: float = 0.1
    dropout: float = 0.0
    # image inputs
    crop_padding: int = 4
    flip: bool = True
    color_jitter: float = 0.4
    grayscale_p: float = 0.2


def augment(x, cfg: AugmentConfig, gen: torch.Generator):
    if not cfg.enabled:
        return x.clone()
    if x.dim() == 2:
        return _augment_vectors(x, cfg, gen)
    if x.dim() == 4:
        return _augment_images(x, cfg, gen)
    raise DomainError(f"cannot augment inputs of shape {tuple(x.shape)}")


def _augment_vectors(x, cfg, gen):
    n = x.shape[0]
    out = x
    if cfg.scale_jitter:
        scale = 1 + cfg.scale_jitter * (2 * torch.rand(n, 1, generator=gen, dtype=x.dtype) - 1)
        out = out * scale
    if cfg.dropout:
        keep = (torch.rand(out.shape, generator=gen) >= cfg.dropout).to(x.dtype)
        out = out * keep / (1 - cfg.dropout)
    if cfg.noise_std:
        out = out + cfg.noise_std * torch.randn(out.shape, generator=gen, dtype=x.dtype)
    return out


def _augment_images(x, cfg, gen):
    n, c, h, w = x.shape
    out = x
    if cfg.crop_padding:
        p = cfg.crop_padding
        padded = torch.nn.functional.pad(out, (p, p, p, p), mode="reflect")
        ox = torch.randint(0, 2 * p + 1, (n,), generator=gen)
        oy = torch.randint(0, 2 * p + 1, (n,), generator=gen)
        out = torch.stack([padded[i, :, oy[i]:oy[i] + h, ox[i]:ox[i] + w] for i in range(n)])
    if cfg.flip:
        flip = torch.rand(n, generator=gen) < 0.5
        out = torch.where(flip[:, None, None, None], out.flip(-1), out)
    if cfg.color_jitter:
        s = cfg.color_jitter

        def factor():
            return (1 + s * (2 * torch.rand(n, 1, 1, 1, generator=gen, dtype=x.dtype) - 1))

        out = out * factor()  # brightness
        mean = out.mean(dim=(1, 2, 3), keepdim=True)
        out = (out - mean) * factor() + mean  # contrast
        gray = out.mean(dim=1, keepdim=True)
        out = (out - gray) * factor() + gray  # saturation
    if cfg.grayscale_p and c == 3:
        g = torch.rand(n, generator=gen) < cfg.grayscale_p
        gray = out.mean(dim=1, keepdim=True).expand_as(out)
        out = torch.where(g[:, None, None, None], gray, out)
    return out.clamp(0, 1)


# ---------------------------------------------------------------- batching


@dataclass
class TwoViewBatch:
    inputs: torch.Tensor  # (2N, ...): first N are view 1, last N view 2
    labels: torch.Tensor  # (2N,)
    view_of: torch.Tensor  # (2N,) source ids 0..N-1

    @property
    def num_sources(self):
        return int(self.labels.shape[0]) // 2


def two_view(x, y, aug: AugmentConfig, gen: torch.Generator) -> TwoViewBatch:
    n = x.shape[0]
    v1 = augment(x, aug, gen)
    v2 = augment(x, aug, gen)
    src = torch.arange(n)
    return TwoViewBatch(torch.cat([v1, v2]), torch.cat([y, y]), torch.cat([src, src]))


def concat_batches(a: TwoViewBatch, b: TwoViewBatch) -> TwoViewBatch:
    """Merge two two-view batches keeping the [view1 | view2] layout and unique source ids."""
    na, nb = a.num_sources, b.num_sources
    inputs = torch.cat([a.inputs[:na], b.inputs[:nb], a.inputs[na:], b.inputs[nb:]])
    labels = torch.cat([a.labels[:na], b.labels[:nb], a.labels[na:], b.labels[nb:]])
    src = torch.arange(na + nb)
    return TwoViewBatch(inputs, labels, torch.cat([src, src]))


class BatchIterator:
    """Epoch-wise two-view batches over one session.

    Each epoch has ``ceil(n / batch_size)`` steps. Source order is a seeded
    permutation; when the final batch would be short it is filled from a
    fresh permutation (so a batch size larger than the session wraps with
    reshuffling rather than failing).
    """

    def __init__(self, data: SessionData, batch_size: int, seed: int, aug: AugmentConfig | None = None):
        if len(data) == 0:
            raise DomainError(f"session {data.session.index} has no training data")
        if batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        self.data = data
        self.batch_size = batch_size
        self.aug = aug or AugmentConfig()
        self.order_gen = torch.Generator().manual_seed(int(seed))
        self.aug_gen = torch.Generator().manual_seed(int(seed) + 7919)
        self._pending = torch.empty(0, dtype=torch.long)

    def steps_per_epoch(self):
        return math.ceil(len(self.data) / self.batch_size)

    def _positions(self):
        while self._pending.numel() < self.batch_size:
            perm = torch.randperm(len(self.data), generator=self.order_gen)
            self._pending = torch.cat([self._pending, perm])
        out, self._pending = self._pending[: self.batch_size], self._pending[self.batch_size:]
        return out

    def next_sources(self):
        return self.data.train(self._positions())

    def __next__(self) -> TwoViewBatch:
        x, y = self.next_sources()
        return two_view(x, y, self.aug, self.aug_gen)

    def __iter__(self):
        return self

    def epoch_sources(self):
        """One epoch of raw ``(x, y)`` source batches (no augmentation)."""
        self._pending = torch.empty(0, dtype=torch.long)
        for _ in range(self.steps_per_epoch()):
            yield self.next_sources()

    def epoch(self):
        for x, y in self.epoch_sources():
            yield two_view(x, y, self.aug, self.aug_gen)


def next_batch(data: SessionData, batch_size: int, seed: int, aug: AugmentConfig | None = None) -> TwoViewBatch:
    return next(BatchIterator(data, batch_size, seed, aug))


# ---------------------------------------------------------------- replay


@dataclass
class ReplayBuffer:
    """Per-class ring buffers of capacity ``capacity`` (M samples per class)."""

    capacity: int
    store: dict = field(default_factory=dict)  # class -> deque of tensors
    inserted: dict = field(default_factory=dict)  # class -> total insertions

    def __post_init__(self):
        if self.capacity < 0:
            raise ConfigError("replay capacity must be >= 0")

    def __len__(self):
        return sum(len(q) for q in self.store.values())

    def counts(self):
        return {c: len(q) for c, q in sorted(self.store.items())}

    def insert(self, samples, labels, seen_classes=None):
        if self.capacity == 0:
            return self
        labels = torch.as_tensor(labels).tolist()
        if seen_classes is not None:
            unseen = sorted(set(labels) - {int(c) for c in seen_classes})
            if unseen:
                raise StateError(f"refusing to store samples of unseen classes {unseen}")
        for x, c in zip(samples, labels):
            q = self.store.setdefault(int(c), deque(maxlen=self.capacity))
            q.append(x.detach().clone())
            self.inserted[int(c)] = self.inserted.get(int(c), 0) + 1
        return self

    def sample(self, n: int, gen: torch.Generator):
        """``n`` uniform draws; with replacement only when fewer than ``n`` are stored."""
        items = [(x, c) for c, q in sorted(self.store.items()) for x in q]
        if n <= 0 or not items:
            return None, None
        if len(items) >= n:
            idx = torch.randperm(len(items), generator=gen)[:n]
        else:
            idx = torch.randint(0, len(items), (n,), generator=gen)
        xs = torch.stack([items[i][0] for i in idx.tolist()])
        ys = torch.as_tensor([items[i][1] for i in idx.tolist()], dtype=torch.long)
        return xs, ys


def replay_insert(buffer: ReplayBuffer, samples, labels, seen_classes=None) -> ReplayBuffer:
    return buffer.insert(samples, labels, seen_classes)


def replay_sample(buffer: ReplayBuffer, n: int, seed: int):
    return buffer.sample(n, torch.Generator().manual_seed(int(seed)))
