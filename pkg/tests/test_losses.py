import math
from types import MappingProxyType

import numpy as np
import pytest
import torch
from hypothesis import given
from hypothesis import strategies as st

import oracles
from conftest import central_diff, rel_err
from prd.encoder import Backbone, BackboneSpec
from prd.errors import ConfigError, ProtocolError, StateError
from prd.losses import (
    EmbeddingBatch,
    LossConfig,
    prototype_loss,
    prototype_loss_with_contrasts,
    relation_distill_loss,
    supcon_loss,
    supcon_per_anchor,
    total_loss,
)
from prd.protomem import PrototypeSet, TeacherSnapshot, snapshot

T = torch.float64


def unit(x):
    return x / x.norm(dim=-1, keepdim=True)


def random_case(seed, n_max=8, d_max=8, k_max=4):
    """Two-view batch with N <= 16 rows, features in R^d, projections in R^k."""
    rng = np.random.default_rng(seed)
    n = int(rng.integers(1, n_max + 1))
    d = int(rng.integers(2, d_max + 1))
    k = int(rng.integers(2, min(k_max, d) + 1))
    n_cls = int(rng.integers(1, 4))
    src_labels = rng.integers(0, n_cls, size=n)
    labels = np.concatenate([src_labels, src_labels])
    view_of = np.concatenate([np.arange(n), np.arange(n)])
    proj = unit(torch.from_numpy(rng.standard_normal((2 * n, k))))
    feats = torch.from_numpy(rng.standard_normal((2 * n, d)))
    t_feats = feats + 0.3 * torch.from_numpy(rng.standard_normal((2 * n, d)))
    tau = float(rng.choice([0.1, 0.5, 1.0]))
    return dict(rng=rng, n=n, d=d, k=k, labels=labels, view_of=view_of, proj=proj, feats=feats,
                t_feats=t_feats, tau=tau, classes=sorted(set(labels.tolist())))


def make_protos(rng, d, old, current):
    ps = PrototypeSet(d, current_session=1)
    if old:
        ps.add_classes(old, seed=int(rng.integers(1 << 30)))
        ps.advance_session()
    ps.add_classes(current, seed=int(rng.integers(1 << 30)))
    return ps


def teacher_for(ps, rng, old):
    vecs = {c: (ps.vectors[c].detach() + 0.2 * torch.from_numpy(rng.standard_normal(ps.dim))) for c in old}
    return TeacherSnapshot(encoder=None, prototypes=MappingProxyType(vecs), session=ps.current_session - 1)


def as_lists(t):
    return t.detach().tolist()


# ---------------------------------------------------------------- closed forms


def test_supcon_identical_single_class():
    z = unit(torch.ones(4, 3, dtype=T))
    per = supcon_per_anchor(z, [0, 0, 0, 0], tau=0.1)
    assert torch.allclose(per, torch.full((4,), math.log(3), dtype=T), atol=1e-9, rtol=0)


def test_supcon_orthogonal_two_by_two():
    e1, e2 = torch.eye(2, dtype=T)
    z = torch.stack([e1, e2, e1, e2])
    per = supcon_per_anchor(z, [0, 1, 0, 1], tau=1.0, view_of=[0, 1, 0, 1])
    expected = -(1 - math.log(math.e + 2))
    assert torch.allclose(per, torch.full((4,), expected, dtype=T), atol=1e-6, rtol=0)


def test_supcon_requires_positives():
    z = unit(torch.randn(3, 2, dtype=T))
    with pytest.raises(ProtocolError):
        supcon_per_anchor(z, [0, 1, 1], tau=0.1)


def test_prototype_loss_examples():
    ps = PrototypeSet(2)
    ps.add_classes([0], seed=0)
    ps.set_vector(0, [1.0, 0.0])
    one = EmbeddingBatch(torch.zeros(1, 2, dtype=T), torch.tensor([[1.0, 0.0]], dtype=T), [0])
    assert float(prototype_loss(one, ps)) == pytest.approx(-1.0, abs=1e-15)
    orth = EmbeddingBatch(torch.zeros(1, 2, dtype=T), torch.tensor([[0.0, 1.0]], dtype=T), [0])
    assert float(prototype_loss(orth, ps)) == pytest.approx(0.0, abs=1e-15)
    two = EmbeddingBatch(torch.zeros(2, 2, dtype=T), torch.tensor([[3.0, 0.0], [0.0, 2.0]], dtype=T), [0, 0])
    assert float(prototype_loss(two, ps)) == pytest.approx(-0.5, abs=1e-15)


def test_prototype_loss_missing_prototype():
    ps = PrototypeSet(2)
    ps.add_classes([0], seed=0)
    b = EmbeddingBatch(torch.zeros(1, 2, dtype=T), torch.ones(1, 2, dtype=T), [5])
    with pytest.raises(StateError):
        prototype_loss(b, ps)


def test_prototype_contrast_examples():
    ps = PrototypeSet(2)
    ps.add_classes([0], seed=0)
    ps.set_vector(0, [1.0, 0.0])
    b = EmbeddingBatch(torch.zeros(1, 2, dtype=T), torch.tensor([[2.0, 0.0]], dtype=T), [0])
    assert float(prototype_loss_with_contrasts(b, ps, tau=1.0)) == pytest.approx(0.0, abs=1e-15)
    ps.add_classes([1], seed=1)
    ps.set_vector(1, [0.0, 1.0])
    val = float(prototype_loss_with_contrasts(b, ps, tau=1.0))
    assert val == pytest.approx(-1 + math.log(math.e + 1), abs=1e-12)
    assert val == pytest.approx(0.3133, abs=1e-4)


def _distill_setup(student_probs, teacher_probs, tau=1.0):
    """Construct features whose prototype softmax equals the requested distributions."""
    # one old prototype along e1; feature i has cosine c_i to it with logits log(prob) * tau
    def feats_for(probs):
        logits = [math.log(p) * tau for p in probs]
        shift = max(logits)
        cosines = [1 + l - shift for l in logits]  # must stay within [-1, 1]
        return torch.tensor([[c, math.sqrt(1 - c * c)] for c in cosines], dtype=T)

    ps = PrototypeSet(2)
    ps.add_classes([0], seed=0)
    ps.set_vector(0, [1.0, 0.0])
    ps.advance_session()
    teacher = TeacherSnapshot(None, MappingProxyType({0: torch.tensor([1.0, 0.0], dtype=T)}), 1)
    b = EmbeddingBatch(torch.zeros(len(student_probs), 2, dtype=T), feats_for(student_probs),
                       [0] * len(student_probs), teacher_features=feats_for(teacher_probs))
    return b, ps, teacher


def test_distill_hand_evaluated_kl():
    # at tau = 0.5 the logit gap log(9) / 2 fits inside the cosine range
    b, ps, teacher = _distill_setup([0.9, 0.1], [0.5, 0.5], tau=0.5)
    val = float(relation_distill_loss(b, ps, teacher, tau=0.5))
    expected = 0.9 * math.log(1.8) + 0.1 * math.log(0.2)
    assert val == pytest.approx(expected, abs=1e-12)
    assert expected == pytest.approx(0.36807, abs=1e-5)


def test_distill_batch_of_one_is_zero():
    b, ps, teacher = _distill_setup([1.0], [1.0])
    assert float(relation_distill_loss(b, ps, teacher, tau=0.1)) == 0.0


def test_distill_no_old_classes_is_zero():
    ps = PrototypeSet(3)
    ps.add_classes([0, 1], seed=0)
    b = EmbeddingBatch(torch.zeros(2, 3, dtype=T), torch.randn(2, 3, dtype=T), [0, 1])
    assert float(relation_distill_loss(b, ps, None, tau=0.1)) == 0.0


def test_distill_teacher_mismatch():
    b, ps, teacher = _distill_setup([0.5, 0.5], [0.5, 0.5])
    ps.add_classes([7], seed=3)
    ps.advance_session()  # class 7 becomes old but the teacher lacks it
    with pytest.raises(StateError):
        relation_distill_loss(b, ps, teacher, tau=0.1)
    bad = EmbeddingBatch(b.projections, b.features, b.labels, teacher_features=torch.ones(2, 3, dtype=T))
    _, ps2, teacher2 = _distill_setup([0.5, 0.5], [0.5, 0.5])
    with pytest.raises(StateError):
        relation_distill_loss(bad, ps2, teacher2, tau=0.1)


def test_total_loss_arithmetic_and_first_session():
    cfg = LossConfig(alpha=2.0, beta=4.0)
    rng = np.random.default_rng(0)
    c = random_case(3)
    ps = make_protos(rng, c["d"], [], c["classes"])
    b = EmbeddingBatch(c["proj"], c["feats"], c["labels"], c["view_of"])
    out = total_loss(b, ps, None, cfg)
    assert float(out.distill) == 0.0
    assert float(out.total) == pytest.approx(float(out.sc) + 2 * float(out.proto) + 4 * float(out.distill), abs=1e-9)


def test_total_loss_combination():
    from prd.losses import LossBreakdown

    sc, proto, distill = torch.tensor(1.0), torch.tensor(-1.0), torch.tensor(0.0)
    cfg = LossConfig(alpha=2, beta=4)
    total = sc + cfg.alpha * proto + cfg.beta * distill
    assert float(LossBreakdown(sc, proto, distill, total).total) == -1.0


def test_loss_config_defaults_and_validation():
    cfg = LossConfig()
    assert (cfg.tau_sc, cfg.tau_d, cfg.alpha) == (0.1, 0.1, 2.0)
    with pytest.raises(ConfigError):
        LossConfig(tau_sc=0)
    with pytest.raises(ConfigError):
        LossConfig(alpha=-1)
    with pytest.raises(ConfigError):
        LossConfig(proto_loss="ce")


# ---------------------------------------------------------------- oracle equivalence


@pytest.mark.parametrize("seed", range(50))
def test_losses_match_loop_oracles(seed):
    c = random_case(seed)
    rng = c["rng"]
    labels, view_of, tau = c["labels"].tolist(), c["view_of"].tolist(), c["tau"]
    b = EmbeddingBatch(c["proj"], c["feats"], labels, view_of, teacher_features=c["t_feats"])

    per = supcon_per_anchor(c["proj"], labels, tau, view_of)
    for i in range(len(labels)):
        assert abs(float(per[i]) - oracles.supcon_anchor(i, as_lists(c["proj"]), labels, tau, view_of)) < 1e-10
    assert abs(float(supcon_loss(b, tau)) - oracles.supcon(as_lists(c["proj"]), labels, tau, view_of)) < 1e-10

    old = [100, 101][: int(rng.integers(1, 3))]
    ps = make_protos(rng, c["d"], old, c["classes"])
    P = {cl: as_lists(ps.vectors[cl]) for cl in ps.classes}
    assert abs(float(prototype_loss(b, ps)) - oracles.proto_tightness(as_lists(c["feats"]), labels, P)) < 1e-10
    assert abs(float(prototype_loss_with_contrasts(b, ps, tau))
               - oracles.proto_contrast(as_lists(c["feats"]), labels, P, tau)) < 1e-10

    teacher = teacher_for(ps, rng, old)
    Pt = {cl: as_lists(teacher.prototypes[cl]) for cl in old}
    Ps = {cl: P[cl] for cl in old}
    ref = oracles.relation_distill(as_lists(c["feats"]), Ps, as_lists(c["t_feats"]), Pt, tau)
    assert abs(float(relation_distill_loss(b, ps, teacher, tau)) - ref) < 1e-10


# ---------------------------------------------------------------- gradients


def _leaf(t):
    return t.detach().clone().requires_grad_(True)


@pytest.mark.parametrize("seed", range(6))
def test_supcon_gradient_matches_finite_differences(seed):
    c = random_case(seed)
    z = _leaf(c["proj"])
    labels, view_of, tau = c["labels"], c["view_of"], c["tau"]

    def f():
        return supcon_loss(EmbeddingBatch(z, c["feats"], labels, view_of), tau)

    f().backward()
    assert rel_err(z.grad, central_diff(f, z)) < 1e-4


@pytest.mark.parametrize("seed", range(6))
def test_prototype_loss_gradient_matches_finite_differences(seed):
    c = random_case(seed)
    ps = make_protos(c["rng"], c["d"], [], c["classes"])
    b = EmbeddingBatch(c["proj"], c["feats"], c["labels"], c["view_of"])

    def f():
        return prototype_loss(b, ps)

    f().backward()
    for cl in c["classes"]:
        p = ps.vectors[cl]
        assert rel_err(p.grad, central_diff(f, p)) < 1e-4


@pytest.mark.parametrize("seed", range(6))
def test_contrast_loss_gradient_matches_finite_differences(seed):
    c = random_case(seed)
    ps = make_protos(c["rng"], c["d"], [50, 51], c["classes"])
    feats = _leaf(c["feats"])

    def f():
        return prototype_loss_with_contrasts(EmbeddingBatch(c["proj"], feats, c["labels"]), ps, c["tau"])

    f().backward()
    assert rel_err(feats.grad, central_diff(f, feats)) < 1e-4
    for cl in ps.classes:
        p = ps.vectors[cl]
        fd = central_diff(f, p)
        assert rel_err(p.grad, fd) < 1e-4
    # the non-label prototypes are pushed too, which is the interference the tightness term avoids
    assert float(ps.vectors[50].grad.abs().sum()) > 0


@pytest.mark.parametrize("seed", range(6))
def test_distill_gradient_matches_finite_differences(seed):
    c = random_case(seed)
    rng = c["rng"]
    old = [100, 101]
    ps = make_protos(rng, c["d"], old, c["classes"])
    teacher = teacher_for(ps, rng, old)
    feats = _leaf(c["feats"])

    def f():
        b = EmbeddingBatch(c["proj"], feats, c["labels"], teacher_features=c["t_feats"])
        return relation_distill_loss(b, ps, teacher, c["tau"])

    f().backward()
    assert rel_err(feats.grad, central_diff(f, feats)) < 1e-4
    for cl in old:
        p = ps.vectors[cl]
        assert rel_err(p.grad, central_diff(f, p)) < 1e-4


def _tiny_model(seed=0):
    return Backbone(BackboneSpec(input_shape=(3,), feature_dim=4, projection_dim=2, hidden_dim=5, depth=2, seed=seed))


def test_distill_gradient_wrt_encoder_parameters():
    torch.manual_seed(0)
    model = _tiny_model()
    ps = PrototypeSet(4)
    ps.add_classes([0, 1], seed=2)
    teacher = snapshot(ps, model, session=1)
    ps.advance_session()
    ps.add_classes([2], seed=3)
    with torch.no_grad():
        for p in model.parameters():
            p.add_(0.3 * torch.randn_like(p))
        for c in (0, 1):
            ps.vectors[c].add_(0.2 * torch.randn(4, dtype=T))
    x = torch.randn(6, 3, dtype=T)
    labels = [2, 2, 2, 2, 2, 2]

    def f():
        feats, proj = model(x)
        return relation_distill_loss(EmbeddingBatch(proj, feats, labels, inputs=x), ps, teacher, 0.5)

    f().backward()
    assert float(f()) > 0
    for name, p in model.encoder.named_parameters():
        assert rel_err(p.grad, central_diff(f, p)) < 1e-4, name


def test_supcon_gradient_through_encoder_and_head():
    model = _tiny_model(1)
    x = torch.randn(6, 3, dtype=T, generator=torch.Generator().manual_seed(5))
    labels, view_of = [0, 1, 1, 0, 1, 1], [0, 1, 2, 0, 1, 2]

    def f():
        feats, proj = model(x)
        return supcon_loss(EmbeddingBatch(proj, feats, labels, view_of), 0.5)

    f().backward()
    for name, p in model.named_parameters():
        assert rel_err(p.grad, central_diff(f, p)) < 1e-4, name


# ---------------------------------------------------------------- exact gradient flow


def _zero_or_none(g):
    return g is None or bool((g == 0).all())


def test_prototype_loss_stops_gradient_at_encoder():
    model = _tiny_model(2)
    ps = PrototypeSet(4)
    ps.add_classes([0, 1, 2], seed=0)
    x = torch.randn(4, 3, dtype=T)
    feats, proj = model(x)
    prototype_loss(EmbeddingBatch(proj, feats, [0, 0, 1, 1]), ps).backward()
    for p in model.parameters():
        assert _zero_or_none(p.grad)
    assert _zero_or_none(ps.vectors[2].grad)  # class 2 absent
    assert not _zero_or_none(ps.vectors[0].grad)
    assert not _zero_or_none(ps.vectors[1].grad)


def test_distill_gradient_partition_and_frozen_teacher():
    model = _tiny_model(3)
    ps = PrototypeSet(4)
    ps.add_classes([0, 1], seed=0)
    teacher = snapshot(ps, model, session=1)
    ps.advance_session()
    ps.add_classes([5, 6], seed=1)
    with torch.no_grad():
        for p in model.parameters():
            p.mul_(1.1)
    x = torch.randn(6, 3, dtype=T)
    feats, proj = model(x)
    b = EmbeddingBatch(proj, feats, [5, 6, 5, 6, 5, 6], inputs=x)
    relation_distill_loss(b, ps, teacher, 0.1).backward()
    assert _zero_or_none(ps.vectors[5].grad) and _zero_or_none(ps.vectors[6].grad)
    assert not _zero_or_none(ps.vectors[0].grad)
    assert any(not _zero_or_none(p.grad) for p in model.encoder.parameters())
    for p in teacher.encoder.parameters():
        assert p.grad is None and not p.requires_grad
    for v in teacher.prototypes.values():
        assert v.grad is None and not v.requires_grad


# ---------------------------------------------------------------- distillation identities


def test_distill_zero_when_student_equals_teacher():
    model = _tiny_model(4)
    ps = PrototypeSet(4)
    ps.add_classes([0, 1, 2], seed=9)
    teacher = snapshot(ps, model, session=1)
    ps.advance_session()
    ps.add_classes([3], seed=10)
    x = torch.randn(8, 3, dtype=T)
    feats, proj = model(x)
    val = float(relation_distill_loss(EmbeddingBatch(proj, feats, [3] * 8, inputs=x), ps, teacher, 0.1))
    assert abs(val) <= 1e-12


@given(st.integers(0, 10_000), st.sampled_from([0.05, 0.1, 1.0]))
def test_distill_nonnegative(seed, tau):
    c = random_case(seed)
    old = [100, 101]
    ps = make_protos(c["rng"], c["d"], old, c["classes"])
    teacher = teacher_for(ps, c["rng"], old)
    b = EmbeddingBatch(c["proj"], c["feats"], c["labels"], teacher_features=c["t_feats"])
    assert float(relation_distill_loss(b, ps, teacher, tau)) >= -1e-12


@given(st.integers(0, 10_000), st.floats(0.01, 100))
def test_feature_scaling_leaves_distributions_unchanged(seed, scale):
    from prd.protomem import predict_batch
    from prd.simcore import prototype_softmax

    c = random_case(seed)
    ps = make_protos(c["rng"], c["d"], [], c["classes"])
    for cl in ps.classes:
        a = prototype_softmax(ps.vectors[cl].detach(), c["feats"], c["tau"])
        b = prototype_softmax(ps.vectors[cl].detach(), scale * c["feats"], c["tau"])
        assert torch.allclose(a, b, atol=1e-12, rtol=0)
    assert torch.equal(predict_batch(c["feats"], ps), predict_batch(scale * c["feats"], ps)) or \
        _near_tie(c["feats"], ps)


def _near_tie(feats, ps):
    from prd.simcore import cosine_matrix

    s = cosine_matrix(feats, ps.stack(ps.classes).detach()).sort(dim=1, descending=True).values
    return bool(((s[:, 0] - s[:, 1]) < 1e-12).any()) if s.shape[1] > 1 else False
