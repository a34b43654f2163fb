import math

import numpy as np
import pytest

from fedrcl.datasets import PartitionConfig, generate_synthetic, partition, split_per_class
from fedrcl.engine import (
    ServerOptState, TrainConfig, TrainingAborted, aggregate, derived_seed, evaluate_features, local_train,
    load_training_checkpoint, run_training, sample_clients, server_step, substream,
)
from fedrcl.errors import ConfigError, ShapeError
from fedrcl.losses import LossConfig
from fedrcl.model import ArchConfig, ModelParams, accuracy, grad, init_model

ARCH = ArchConfig((4,), (16, 16), 3)


@pytest.fixture(scope="module")
def blobs():
    full = generate_synthetic(3, 40, 4, 0.2, seed=0)
    return split_per_class(full, 10)


def small_cfg(**kw):
    base = dict(rounds=3, local_epochs=1, participation=1.0, eval_every=1, diag_every=1, seed=0)
    base.update(kw)
    return TrainConfig(**base)


# -- config and schedule -----------------------------------------------------

def test_train_config_defaults():
    c = TrainConfig()
    assert (c.lr, c.lr_decay, c.weight_decay, c.momentum, c.iters_per_epoch) == (0.1, 0.998, 0.001, 0.0, 10)
    with pytest.raises(ConfigError):
        TrainConfig(participation=0.0)
    with pytest.raises(ConfigError):
        TrainConfig(rounds=0)


@pytest.mark.parametrize("t", [1, 2, 17, 500])
def test_lr_schedule(t):
    assert TrainConfig(lr=0.1).lr_at(t) == pytest.approx(0.1 * 0.998 ** t, abs=1e-12)


# -- client sampling ---------------------------------------------------------

def test_sample_all_clients():
    assert sample_clients(7, 1.0, np.random.default_rng(0)) == list(range(7))


def test_sample_five_percent_of_hundred():
    ids = sample_clients(100, 0.05, np.random.default_rng(0))
    assert len(ids) == len(set(ids)) == 5


def test_sample_at_least_one():
    assert len(sample_clients(10, 0.01, np.random.default_rng(0))) == 1


def test_sample_deterministic_per_round():
    a = sample_clients(50, 0.2, substream(3, "sampling", 7))
    b = sample_clients(50, 0.2, substream(3, "sampling", 7))
    c = sample_clients(50, 0.2, substream(3, "sampling", 8))
    assert a == b and a != c


def test_substreams_independent():
    assert derived_seed(0, "init") != derived_seed(0, "partition")
    assert derived_seed(0, "init") == derived_seed(0, "init")


# -- aggregation -------------------------------------------------------------

def test_aggregate_identity_and_cancellation():
    p = init_model(ARCH, 0)
    assert np.array_equal(aggregate([p]).vector, p.vector)
    assert np.count_nonzero(aggregate([p, p.with_vector(-p.vector)]).vector) == 0


def test_aggregate_naive_mean():
    ps = [init_model(ARCH, s) for s in range(3)]
    naive = [(ps[0].vector[i] + ps[1].vector[i] + ps[2].vector[i]) / 3 for i in range(ps[0].size)]
    np.testing.assert_allclose(aggregate(ps).vector, naive, rtol=0, atol=1e-12)


def test_aggregate_layout_mismatch():
    with pytest.raises(ShapeError):
        aggregate([init_model(ARCH, 0), init_model(ArchConfig((4,), (16,), 3), 0)])
    with pytest.raises(ShapeError):
        aggregate([])


# -- server optimizers -------------------------------------------------------

def _pair(delta):
    g = ModelParams(ARCH, np.zeros(init_model(ARCH, 0).size))
    return g, g.with_vector(g.vector + delta)


def test_fedavg_takes_aggregate():
    g, a = _pair(0.3)
    new, _ = server_step(ServerOptState("fedavg"), g, a)
    assert np.array_equal(new.vector, a.vector)


def test_fedavgm_zero_beta_is_fedavg():
    rng = np.random.default_rng(0)
    g = init_model(ARCH, 0)
    state = ServerOptState("fedavgm", beta_m=0.0)
    for _ in range(3):
        a = g.with_vector(g.vector + rng.standard_normal(g.size))
        new, state = server_step(state, g, a)
        assert np.array_equal(new.vector, a.vector)
        g = new


def test_fedavgm_momentum_trace():
    g, a = _pair(1.0)
    state = ServerOptState("fedavgm", beta_m=0.4)
    g1, state = server_step(state, g, a)              # m = 1
    g2, state = server_step(state, g1, g1.with_vector(g1.vector + 1.0))  # m = 0.4 + 1
    np.testing.assert_allclose(g2.vector, 1.0 + 1.4)


@pytest.mark.parametrize("kind", ["fedavg", "fedavgm", "fedadam"])
def test_zero_delta_keeps_global(kind):
    g = init_model(ARCH, 0)
    state = ServerOptState(kind)
    for _ in range(3):
        new, state = server_step(state, g, g)
        assert np.array_equal(new.vector, g.vector)


def test_fedadam_single_step_scalar_oracle():
    delta, lr, eps, b1, b2 = 0.1, 1.0, 0.001, 0.9, 0.99
    m = (1 - b1) * delta
    v = (1 - b2) * delta * delta
    expected = lr * m / (math.sqrt(v) + eps)
    g, a = _pair(delta)
    new, state = server_step(ServerOptState("fedadam", server_lr=lr, eps=eps), g, a)
    np.testing.assert_allclose(new.vector, expected, rtol=0, atol=1e-12)
    np.testing.assert_allclose(state.m, m, atol=1e-15)
    assert expected == pytest.approx(0.01 / 0.011)


def test_server_rejects_unknown_kind():
    with pytest.raises(ConfigError):
        ServerOptState("fedprox")


# -- local training ----------------------------------------------------------

def test_zero_lr_leaves_snapshot(blobs):
    train, _ = blobs
    p = init_model(ARCH, 0)
    out = local_train(p, train, small_cfg(lr=0.0), LossConfig(mode="ce+rcl"))
    assert np.array_equal(out.params.vector, p.vector)
    assert len(out.losses) == 10


def test_local_train_deterministic(blobs):
    train, _ = blobs
    p = init_model(ARCH, 0)
    a = local_train(p, train, small_cfg(), LossConfig(), round_index=3, client_id=2)
    b = local_train(p, train, small_cfg(), LossConfig(), round_index=3, client_id=2)
    assert a.params.vector.tobytes() == b.params.vector.tobytes()


def test_local_train_matches_hand_sgd(blobs):
    train, _ = blobs
    cfg = small_cfg(local_epochs=2, lr=0.05, weight_decay=0.01)
    loss = LossConfig(mode="ce+scl")
    p = init_model(ARCH, 1)
    out = local_train(p, train, cfg, loss, round_index=4, client_id=1)
    # independent loop: ceil(n/10) batches, short tail kept, decay added to the gradient
    rng = substream(cfg.seed, "shuffle", 4, 1)
    theta, n = p.vector.copy(), len(train)
    bs, lr = math.ceil(n / 10), 0.05 * 0.998 ** 4
    for _ in range(2):
        perm = rng.permutation(n)
        for s in range(0, n, bs):
            idx = perm[s:s + bs]
            g = grad(p.with_vector(theta), train.samples[idx], train.labels[idx], loss)
            theta = theta - lr * (g + 0.01 * theta)
    np.testing.assert_allclose(out.params.vector, theta, rtol=0, atol=1e-12)


def test_single_client_fits_separable_blobs():
    full = generate_synthetic(3, 30, 4, 0.05, seed=1)
    plan = partition(full, PartitionConfig("iid", 1))
    hist = run_training(full, plan, ARCH, small_cfg(rounds=50, eval_every=50, diag_every=50), LossConfig(mode="ce"),
                        eval_data=full)
    assert accuracy(hist.final_params, full.samples, full.labels) >= 0.95


# -- full loop ---------------------------------------------------------------

def test_zero_lr_round_reports_init_accuracy(blobs):
    train, test = blobs
    plan = partition(train, PartitionConfig("iid", 1))
    init = init_model(ARCH, derived_seed(0, "init"))
    hist = run_training(train, plan, ARCH, small_cfg(rounds=1, lr=0.0), LossConfig(mode="ce"), eval_data=test)
    assert hist[0].accuracy == accuracy(init, test.samples, test.labels)


def test_single_client_equals_centralized_sgd(blobs):
    train, _ = blobs
    plan = partition(train, PartitionConfig("iid", 1))
    cfg = small_cfg(rounds=1, eval_every=100, diag_every=100)
    loss = LossConfig(mode="ce+rcl")
    theta = init_model(ARCH, derived_seed(0, "init"))
    data = train.subset(plan.assignments[0])
    for t in (1, 2, 3):
        step = local_train(theta, data, cfg, loss, round_index=t, client_id=0).params
        hist = run_training(train, plan, ARCH, TrainConfig(**{**cfg.__dict__, "rounds": t}), loss)
        assert hist.final_params.vector.tobytes() == step.vector.tobytes()
        theta = step


def test_round_records(blobs):
    train, test = blobs
    plan = partition(train, PartitionConfig("dirichlet", 4, alpha=0.5, seed=1))
    cfg = small_cfg(rounds=4, participation=0.5, eval_every=2, diag_every=2)
    hist = run_training(train, plan, ARCH, cfg, LossConfig(), eval_data=test)
    assert [r.round for r in hist] == [1, 2, 3, 4]
    assert all(len(r.clients) == 2 for r in hist)
    assert [r.accuracy is not None for r in hist] == [False, True, False, True]
    row = hist[-1].metrics_row()
    assert list(row) == ["round", "accuracy", "trace_within", "trace_between", "effective_rank", "vci",
                         "mean_deviation_bound", "mean_local_loss"]


def test_serial_and_parallel_identical(blobs):
    train, test = blobs
    plan = partition(train, PartitionConfig("dirichlet", 4, alpha=0.3, seed=2))
    rows = []
    for workers in (1, 3):
        hist = run_training(train, plan, ARCH, small_cfg(participation=0.75, workers=workers), LossConfig(),
                            eval_data=test)
        rows.append(([r.metrics_row() for r in hist], hist.final_params.vector.tobytes()))
    assert rows[0] == rows[1]


def test_checkpoint_resume_matches_uninterrupted(blobs, tmp_path):
    train, test = blobs
    plan = partition(train, PartitionConfig("iid", 2))
    full = run_training(train, plan, ARCH, small_cfg(rounds=4), LossConfig(), server="fedadam")
    run_training(train, plan, ARCH, small_cfg(rounds=2, checkpoint_every=2), LossConfig(), server="fedadam",
                 checkpoint_dir=tmp_path)
    params, state, t = load_training_checkpoint(tmp_path / "checkpoint.bin")
    assert t == 2 and state.kind == "fedadam"
    resumed = run_training(train, plan, ARCH, small_cfg(rounds=4), LossConfig(), server="fedadam",
                           resume_from=tmp_path / "checkpoint.bin")
    assert [r.round for r in resumed] == [3, 4]
    assert resumed.final_params.vector.tobytes() == full.final_params.vector.tobytes()


def test_non_finite_loss_aborts_with_partial_records(blobs):
    train, _ = blobs
    plan = partition(train, PartitionConfig("iid", 1))
    with pytest.raises(TrainingAborted) as info:
        run_training(train, plan, ARCH, small_cfg(), LossConfig(mode="ce+scl", tau=1e-320))
    assert info.value.records == []
    assert "round" in info.value.cause.payload


def test_class_count_mismatch(blobs):
    train, _ = blobs
    plan = partition(train, PartitionConfig("iid", 1))
    with pytest.raises(ConfigError):
        run_training(train, plan, ArchConfig((4,), (16,), 5), small_cfg(), LossConfig())


def test_evaluate_features(blobs):
    _, test = blobs
    p = init_model(ARCH, 0)
    feats, probs, acc = evaluate_features(p, test, batch_size=7)
    assert feats.shape == (len(test), 16) and probs.shape == (len(test), 3)
    assert acc == accuracy(p, test.samples, test.labels)
    np.testing.assert_allclose(probs.sum(axis=1), 1.0)
