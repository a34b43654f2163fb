import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from fedrcl.errors import ConfigError, NumericalError, ShapeError
from fedrcl.gradcheck import check_gradient
from fedrcl.losses import LossConfig
from fedrcl.model import (
    ArchConfig, ModelParams, forward, grad, group_norm, init_model, load_params, loss_value,
    preactivations, save_params,
)

DENSE = ArchConfig((6,), (16, 16), 3)
CONV = ArchConfig((3, 8, 8), (8, 16), 4)


def _random_segments(params):
    return np.concatenate([v.ravel() for k, v in params.segments().items() if not k.endswith(("gn_weight", "gn_bias"))])


# -- architecture and init ---------------------------------------------------

def test_arch_validation():
    with pytest.raises(ConfigError):
        ArchConfig((4,), (12,), 3, groups=8)
    with pytest.raises(ConfigError):
        ArchConfig((4,), (), 3)
    with pytest.raises(ConfigError):
        ArchConfig((4,), (8,), 1)
    with pytest.raises(ConfigError):
        ArchConfig((4,), (8,), 3)  # one unit per group on a dense stage


def test_init_deterministic():
    assert np.array_equal(init_model(DENSE, 3).vector, init_model(DENSE, 3).vector)


def test_init_seeds_differ():
    a, b = _random_segments(init_model(DENSE, 0)), _random_segments(init_model(DENSE, 1))
    assert np.mean(a != b) >= 0.99


def test_init_single_stage_layout():
    arch = ArchConfig((5,), (16,), 3)
    names = [n for n, _ in arch.layout()]
    assert {n.split(".")[0] for n in names} == {"stage1", "classifier"}
    p = init_model(arch, 0)
    assert p.segment("classifier").shape == (3, 16)
    assert sum(v.size for v in p.segments().values()) == p.size


def test_init_classifier_zero_mean():
    arch = ArchConfig((4,), (64,), 50)
    psi = init_model(arch, 0).segment("classifier")
    assert abs(psi.mean()) < 4 / math.sqrt(psi.size) * psi.std()


def test_params_reject_bad_vectors():
    with pytest.raises(ShapeError):
        ModelParams(DENSE, np.zeros(3))
    v = init_model(DENSE, 0).vector.copy()
    v[0] = np.nan
    with pytest.raises(NumericalError):
        ModelParams(DENSE, v)


# -- forward -----------------------------------------------------------------

def test_zero_input_zero_params():
    p = ModelParams(DENSE, np.zeros(init_model(DENSE, 0).size))
    out = forward(p, np.zeros((4, 6)))
    for e in out.embeddings:
        assert torch.count_nonzero(e) == 0
    assert torch.count_nonzero(out.logits) == 0
    np.testing.assert_allclose(out.probs.numpy(), 1 / 3)


@pytest.mark.parametrize("arch", [DENSE, CONV])
def test_forward_shapes_and_ranges(arch):
    x = np.random.default_rng(0).random((5, *arch.input_shape))
    out = forward(init_model(arch, 0), x)
    assert [tuple(e.shape) for e in out.embeddings] == [(5, w) for w in arch.widths]
    assert all(bool((e >= 0).all()) for e in out.embeddings)
    np.testing.assert_allclose(out.probs.sum(dim=1).numpy(), 1.0, atol=1e-6)
    assert out.logits.shape == (5, arch.num_classes)


@pytest.mark.parametrize("arch", [DENSE, CONV])
def test_forward_permutation_equivariant(arch):
    rng = np.random.default_rng(1)
    x = rng.random((6, *arch.input_shape))
    perm = rng.permutation(6)
    p = init_model(arch, 2)
    a, b = forward(p, x), forward(p, x[perm])
    for ea, eb in zip(a.embeddings + [a.logits], b.embeddings + [b.logits]):
        np.testing.assert_allclose(ea.numpy()[perm], eb.numpy(), rtol=0, atol=1e-12)


def test_forward_bit_identical():
    x = np.random.default_rng(2).random((7, *CONV.input_shape))
    p = init_model(CONV, 0)
    assert forward(p, x).logits.numpy().tobytes() == forward(p, x).logits.numpy().tobytes()


def test_forward_shape_mismatch():
    with pytest.raises(ShapeError):
        forward(init_model(DENSE, 0), np.zeros((2, 5)))


def test_level_is_one_based():
    out = forward(init_model(DENSE, 0), np.ones((2, 6)))
    assert out.level(1) is out.embeddings[0]
    with pytest.raises(ShapeError):
        out.level(3)


@settings(max_examples=40, deadline=None)
@given(x=arrays(np.float64, (5, 16), elements=st.floats(-3, 3)), groups=st.sampled_from([1, 2, 4]))
def test_group_norm_statistics(x, groups):
    # unit-scale variance inside every group, so eps stays negligible
    x = x + np.tile(np.array([-1.0, 1.0]), 8)
    y = group_norm(torch.as_tensor(x), groups).numpy().reshape(5, groups, -1)
    assert np.abs(y.mean(axis=2)).max() <= 1e-5
    g = x.reshape(5, groups, -1)
    if g.var(axis=2).min() >= 0.5:
        assert np.abs(y.var(axis=2) - 1).max() <= 1e-4


def test_preactivations_match_embeddings():
    x = np.random.default_rng(3).random((4, 6))
    p = init_model(DENSE, 0)
    pre = preactivations(p, x)
    for a, e in zip(pre, forward(p, x).embeddings):
        np.testing.assert_array_equal(np.maximum(a, 0), e.numpy())


# -- gradient ----------------------------------------------------------------

def test_ce_single_sample_classifier_gradient():
    rng = np.random.default_rng(4)
    p = init_model(DENSE, 5)
    x, y = rng.random((1, 6)), np.array([2])
    g = p.with_vector(grad(p, x, y, LossConfig(mode="ce"))).segment("classifier")
    out = forward(p, x)
    phi, prob = out.embeddings[-1].numpy()[0], out.probs.numpy()[0]
    # closed-form softmax-CE: d/dpsi_z = (p_z - [z == y]) * phi
    for z in range(3):
        np.testing.assert_allclose(g[z], (prob[z] - (z == 2)) * phi, rtol=1e-12, atol=1e-15)


def test_zero_weights_give_zero_gradient():
    rng = np.random.default_rng(5)
    cfg = LossConfig(mode="ce+rcl", ce_weight=0.0, contrastive_weight=0.0)
    g = grad(init_model(DENSE, 0), rng.random((6, 6)), rng.integers(0, 3, 6), cfg)
    assert np.count_nonzero(g) == 0


def test_gradient_layout_matches_params():
    p = init_model(CONV, 0)
    g = grad(p, np.random.default_rng(6).random((4, *CONV.input_shape)), np.array([0, 1, 1, 3]), LossConfig())
    assert g.shape == p.vector.shape


@pytest.mark.parametrize("mode", ["ce", "ce+scl", "ce+rcl", "ce+prox"])
def test_finite_differences(mode):
    rng = np.random.default_rng(7)
    arch = ArchConfig((8,), (16, 16), 3, groups=1)
    p, glob = init_model(arch, 1), init_model(arch, 2)
    x, y = rng.standard_normal((8, 8)), np.array([0, 0, 1, 1, 2, 2, 0, 1])
    res = check_gradient(p, x, y, LossConfig(mode=mode, lam=0.3), glob, num_coords=16, rng=rng)
    assert len(res.coords) == 16
    assert res.max_error <= 1e-4


def test_non_finite_loss_raises_with_payload():
    x = np.full((2, 6), np.inf)
    with pytest.raises(NumericalError) as info:
        grad(init_model(DENSE, 0), x, np.array([0, 1]), LossConfig(mode="ce"))
    assert "ce" in info.value.payload


# -- checkpoints -------------------------------------------------------------

def test_checkpoint_round_trip(tmp_path):
    p = init_model(CONV, 3)
    save_params(p, tmp_path / "m.ckpt", meta={"round": 7})
    q, meta = load_params(tmp_path / "m.ckpt")
    assert q.arch == p.arch and meta == {"round": 7}
    assert q.vector.tobytes() == p.vector.tobytes()
    raw = (tmp_path / "m.ckpt").read_bytes()
    assert raw[:8] == b"FRCLCKP1"
    # payload is the little-endian float64 parameter vector, segment by segment
    assert raw.endswith(p.vector.astype("<f8").tobytes())


def test_loss_value_matches_gradient_path():
    rng = np.random.default_rng(8)
    p = init_model(DENSE, 0)
    x, y = rng.random((4, 6)), np.array([0, 1, 0, 1])
    v = loss_value(p, x, y, LossConfig(mode="ce+scl"))
    assert math.isfinite(v) and v > 0
