"""Per-session optimization loop for PRD and the fine-tuning / ER baselines."""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field, replace

import numpy as np
import torch

from .encoder import Backbone, BackboneSpec, grad_norm
from .errors import ConfigError, StateError, TrainingAborted
from .evalkit import (
    AccuracyMatrix,
    current_old_decomposition,
    linear_probe,
    per_class_accuracy,
)
from .losses import EmbeddingBatch, LossConfig, total_loss
from .protomem import PrototypeSet, TeacherSnapshot, predict_batch, snapshot
from .stream import (
    AccessLog,
    AugmentConfig,
    BatchIterator,
    Dataset,
    ReplayBuffer,
    SessionData,
    SessionSpec,
    two_view,
)

log = logging.getLogger(__name__)

METHODS = ("prd", "finetune", "er")


@dataclass
class TrainConfig:
    epochs: int = 100
    batch_size: int = 64  # source samples per step; two views each -> 128 inputs
    lr: float = 0.01
    momentum: float = 0.9
    weight_decay: float = 0.0
    loss: LossConfig = field(default_factory=LossConfig)
    replay_capacity: int = 0  # M samples per class; 0 = replay-free
    seed: int = 0
    method: str = "prd"
    augment: AugmentConfig = field(default_factory=AugmentConfig)
    skip_zero_weight_terms: bool = True

    def __post_init__(self):
        if isinstance(self.loss, dict):
            self.loss = LossConfig(**self.loss)
        if isinstance(self.augment, dict):
            self.augment = AugmentConfig(**self.augment)
        if self.epochs < 1:
            raise ConfigError("epochs must be >= 1")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if not (self.lr > 0 and math.isfinite(self.lr)):
            raise ConfigError("lr must be > 0")
        if self.replay_capacity < 0:
            raise ConfigError("replay_capacity must be >= 0")
        if self.method not in METHODS:
            raise ConfigError(f"method must be one of {METHODS}, got {self.method!r}")
        if self.method == "er" and self.replay_capacity == 0:
            raise ConfigError("the ER baseline needs replay_capacity > 0")

    def effective_loss(self) -> LossConfig:
        """Fine-tuning and ER train with the contrastive term alone."""
        if self.method == "prd":
            return self.loss
        return replace(self.loss, alpha=0.0, beta=0.0)

    @property
    def refit_prototypes(self):
        return self.method != "prd"


def replay_split(batch_size: int):
    """(current, replayed) source counts when half the batch comes from the buffer."""
    return batch_size - batch_size // 2, batch_size // 2


@dataclass
class RunState:
    model: Backbone
    protos: PrototypeSet
    teacher: TeacherSnapshot | None = None
    buffer: ReplayBuffer | None = None
    session: int = 0  # number of completed sessions
    access_log: AccessLog = field(default_factory=AccessLog)
    progress: list = field(default_factory=list)
    step_count: int = 0
    teacher_digests: list = field(default_factory=list)  # (session, step, digest) audit trail
    audit_teacher: bool = False

    @classmethod
    def fresh(cls, spec: BackboneSpec, replay_capacity: int = 0):
        model = Backbone(spec)
        protos = PrototypeSet(spec.feature_dim, current_session=1, dtype=spec.torch_dtype)
        buffer = ReplayBuffer(replay_capacity) if replay_capacity > 0 else None
        return cls(model=model, protos=protos, buffer=buffer)


def _session_seed(seed: int, index: int, salt: int) -> int:
    return int(np.random.SeedSequence([seed, index, salt]).generate_state(1)[0])


def run_session(state: RunState, dataset: Dataset, session: SessionSpec, cfg: TrainConfig,
                domain_incremental: bool = False) -> RunState:
    """Train one session in place and return ``state``."""
    if session.index != state.session + 1:
        raise StateError(f"expected session {state.session + 1}, got {session.index}")
    if (state.teacher is None) != (state.session == 0):
        raise StateError("a teacher snapshot must exist exactly from the second session on")
    protos = state.protos
    protos.current_session = session.index
    new = [c for c in session.classes if c not in protos]
    if not domain_incremental and len(new) != len(session.classes):
        raise StateError(f"session {session.index} repeats already-trained classes")
    if new:
        protos.add_classes(new, seed=_session_seed(cfg.seed, session.index, 1))

    loss_cfg = cfg.effective_loss()
    model = state.model
    model.train()
    params = list(model.parameters()) + protos.parameters()
    opt = torch.optim.SGD(params, lr=cfg.lr, momentum=cfg.momentum, weight_decay=cfg.weight_decay)
    # fresh optimizer per session: momentum is reset at every boundary

    state.access_log.active_session = session.index
    data = SessionData(dataset, session, state.access_log)
    replaying = state.buffer is not None and len(state.buffer) > 0
    n_cur, n_rep = replay_split(cfg.batch_size) if replaying else (cfg.batch_size, 0)
    it = BatchIterator(data, n_cur, seed=_session_seed(cfg.seed, session.index, 2), aug=cfg.augment)
    aug_gen = torch.Generator().manual_seed(_session_seed(cfg.seed, session.index, 3))
    rep_gen = torch.Generator().manual_seed(_session_seed(cfg.seed, session.index, 4))

    for epoch in range(cfg.epochs):
        sums = {"sc": 0.0, "proto": 0.0, "distill": 0.0, "total": 0.0, "grad_norm": 0.0}
        steps = it.steps_per_epoch()
        for step, (x, y) in enumerate(it.epoch_sources()):
            if n_rep:
                rx, ry = state.buffer.sample(n_rep, rep_gen)
                x, y = torch.cat([x, rx.to(x.dtype)]), torch.cat([y, ry])
            batch = two_view(x, y, cfg.augment, aug_gen)
            parts = train_step(state, batch, loss_cfg, opt, cfg.skip_zero_weight_terms, epoch, step)
            for k in sums:
                sums[k] += parts[k]
        rec = {"session": session.index, "epoch": epoch + 1}
        rec.update({k: v / steps for k, v in sums.items()})
        state.progress.append(rec)
        log.debug("session %d epoch %d: %s", session.index, epoch + 1, rec)

    if cfg.refit_prototypes:
        refit_prototypes(state, data, session.classes)
    if state.buffer is not None:
        order = torch.randperm(len(data), generator=torch.Generator().manual_seed(_session_seed(cfg.seed, session.index, 5)))
        xs, ys = data.train(order)
        state.buffer.insert(xs, ys, seen_classes=protos.classes)
    state.access_log.active_session = None

    state.teacher = snapshot(protos, model, session=session.index)
    protos.advance_session()
    state.session = session.index
    model.eval()
    return state


def train_step(state: RunState, batch, loss_cfg: LossConfig, opt, skip_zero: bool, epoch=0, step=0):
    model, protos = state.model, state.protos
    if state.audit_teacher and state.teacher is not None:
        state.teacher_digests.append((protos.current_session, state.step_count, state.teacher.digest()))
    feats, proj = model(batch.inputs)
    eb = EmbeddingBatch(proj, feats, batch.labels, batch.view_of, inputs=batch.inputs)
    parts = total_loss(eb, protos, state.teacher, loss_cfg, skip_zero_weight=skip_zero)
    opt.zero_grad(set_to_none=True)
    if not torch.isfinite(parts.total):
        raise TrainingAborted(
            f"non-finite loss at session {protos.current_session}, epoch {epoch + 1}, step {step}",
            {"session": protos.current_session, "epoch": epoch + 1, "step": step,
             **parts.as_floats(), "grad_norm": None},
        )
    if parts.total.requires_grad:  # every term skipped -> constant 0, nothing to propagate
        parts.total.backward()
    gn = grad_norm(opt.param_groups[0]["params"])
    if not math.isfinite(gn):
        raise TrainingAborted(
            f"non-finite gradient at session {protos.current_session}, epoch {epoch + 1}, step {step}",
            {"session": protos.current_session, "epoch": epoch + 1, "step": step,
             **parts.as_floats(), "grad_norm": gn},
        )
    opt.step()
    state.step_count += 1
    out = parts.as_floats()
    out["grad_norm"] = gn
    return out


@torch.no_grad()
def refit_prototypes(state: RunState, data: SessionData, classes):
    """Set each class prototype to the mean normalized feature of its training data."""
    x, y = data.train(torch.arange(len(data)))
    f = state.model.features(x)
    f = f / f.norm(dim=1, keepdim=True)
    for c in classes:
        state.protos.set_vector(c, f[y == c].mean(0))


# ---------------------------------------------------------------- evaluation


@torch.no_grad()
def features_of(model, x, chunk=2048):
    model.eval()
    return torch.cat([model.features(x[i:i + chunk]) for i in range(0, len(x), chunk)])


@dataclass
class StreamResult:
    matrix: AccuracyMatrix
    phase_accuracy: list  # accuracy over all seen classes after each session
    class_accuracy: dict  # session -> {class: acc} on the final model, per task
    diagnostics: list
    probe: list  # task-1 linear probe accuracy after each session
    proto_task1: list  # task-1 nearest-prototype accuracy (task-masked) after each session
    state: RunState


def evaluate(state: RunState, dataset: Dataset, sessions, upto: int, mode: str):
    """Row ``upto`` of the accuracy matrix plus the all-seen-classes accuracy."""
    model, protos = state.model, state.protos
    row, all_pred, all_true, class_acc = [], [], [], {}
    for s in sessions[: upto + 1]:
        x, y = SessionData(dataset, s).test()
        f = features_of(model, x)
        allowed = s.classes if mode == "task" else None
        pred = predict_batch(f, protos, allowed).numpy()
        yt = y.numpy()
        row.append(float((pred == yt).mean()))
        class_acc[s.index] = per_class_accuracy(pred, yt)
        all_pred.append(predict_batch(f, protos).numpy())
        all_true.append(yt)
    phase = float((np.concatenate(all_pred) == np.concatenate(all_true)).mean())
    return row, phase, class_acc


def end_of_session_hook(matrix: AccuracyMatrix, i: int):
    cur, old = current_old_decomposition(matrix, i)
    return {"session": i + 1, "current_accuracy": cur, "old_accuracy": old}


def probe_task(state: RunState, dataset: Dataset, session: SessionSpec):
    """Linear-probe accuracy of the frozen encoder on one task's own train/test split."""
    data = SessionData(dataset, session)
    xtr, ytr = data.train(torch.arange(len(data)))
    xte, yte = data.test()
    return linear_probe(features_of(state.model, xtr), ytr, features_of(state.model, xte), yte)


def run_stream(dataset: Dataset, sessions, spec: BackboneSpec, cfg: TrainConfig, mode: str = "class",
               probe: bool = False, hooks=(), state: RunState | None = None) -> StreamResult:
    """Train over every session, evaluating A[i][j] after each one.

    ``mode`` is "task" (predictions masked to the task's classes), "class"
    (global argmax) or "domain" (global argmax, sessions share classes).
    ``hooks`` are callables ``hook(state, i, row)`` run after each evaluation.
    """
    if mode not in ("task", "class", "domain"):
        raise ConfigError(f"unknown evaluation mode {mode!r}")
    if state is None:
        state = RunState.fresh(spec, cfg.replay_capacity)
    T = len(sessions)
    matrix = AccuracyMatrix(T)
    phases, diags, probes, proto1 = [], [], [], []
    class_acc = {}
    for i, s in enumerate(sessions):
        run_session(state, dataset, s, cfg, domain_incremental=(mode == "domain"))
        row, phase, class_acc = evaluate(state, dataset, sessions, i, mode)
        for j, v in enumerate(row):
            matrix.set(i, j, v)
        phases.append(phase)
        diags.append(end_of_session_hook(matrix, i))
        if probe:
            probes.append(probe_task(state, dataset, sessions[0]))
            proto1.append(row[0] if mode == "task" else _task_masked_accuracy(state, dataset, sessions[0]))
        for h in hooks:
            h(state, i, row)
    return StreamResult(matrix, phases, class_acc, diags, probes, proto1, state)


def _task_masked_accuracy(state, dataset, session):
    x, y = SessionData(dataset, session).test()
    pred = predict_batch(features_of(state.model, x), state.protos, session.classes).numpy()
    return float((pred == y.numpy()).mean())
