import math

import numpy as np
import pytest

from unite_sampler.experts import MlpExpert
from unite_sampler.schedule import make_linear_schedule
from unite_sampler.trainer import (
    NULL_LABEL,
    TrainConfig,
    TrainingDiverged,
    dsm_loss,
    make_dataset,
    train_expert,
)


@pytest.fixture(scope="module")
def sched():
    return make_linear_schedule(1000)


def zero_expert(n_labels=2, hidden=(4,)):
    ex = MlpExpert.initialize(2, list(hidden), n_labels, np.random.default_rng(0))
    return ex.replace([np.zeros_like(w) for w in ex.weights], [np.zeros_like(b) for b in ex.biases])


def test_zero_predictor_loss_is_mean_square_noise(sched):
    rng = np.random.default_rng(1)
    z0, noise = rng.normal(size=(32, 2)), rng.normal(size=(32, 2))
    t = rng.integers(1, 1001, 32)
    loss, _ = dsm_loss(zero_expert(), (z0, rng.integers(0, 2, 32)), sched, t, noise)
    assert loss == np.mean(noise ** 2)


def test_perfect_predictor_loss_is_zero(sched):
    # with z0 = 0 and one timestep, z_t / sqrt(1 - ab_t) is exactly the injected noise
    t = 400
    dims = [2 + 16 + 2, 2]
    w = np.zeros((dims[0], 2))
    w[:2, :2] = np.eye(2) / math.sqrt(1 - sched.alpha_bars[t])
    ex = MlpExpert(dims, [w], [np.zeros(2)], np.eye(2))
    noise = np.random.default_rng(2).normal(size=(16, 2))
    loss, grads = dsm_loss(ex, (np.zeros((16, 2)), np.zeros(16, dtype=int)), sched, np.full(16, t), noise)
    assert 0.0 <= loss <= 1e-28
    assert np.max(np.abs(grads.flat())) <= 1e-13


def _fd_gradient(expert, args, h=1e-5):
    params = [*(w.copy() for w in expert.weights), *(b.copy() for b in expert.biases), expert.label_embeddings.copy()]
    n = len(expert.weights)
    out = []
    for k, p in enumerate(params):
        for idx in np.ndindex(p.shape):
            vals = []
            for sign in (1.0, -1.0):
                q = [x.copy() for x in params]
                q[k][idx] += sign * h
                vals.append(dsm_loss(expert.replace(q[:n], q[n:2 * n], q[2 * n]), *args)[0])
            out.append((vals[0] - vals[1]) / (2 * h))
    return np.array(out)


@pytest.mark.parametrize("hidden", [[8], [5, 3]])
def test_gradients_match_finite_differences(sched, hidden):
    rng = np.random.default_rng(11)
    ex = MlpExpert.initialize(2, hidden, 3, rng)
    b = 12
    args = ((rng.normal(size=(b, 2)), rng.integers(0, 3, b)), sched, rng.integers(1, 1001, b), rng.normal(size=(b, 2)), rng.random(b) < 0.3)
    analytic = dsm_loss(ex, *args)[1].flat()
    fd = _fd_gradient(ex, args)
    rel = np.abs(analytic - fd) / np.maximum(np.maximum(np.abs(analytic), np.abs(fd)), 1e-6)
    assert np.max(rel) <= 1e-4


def test_null_rows_get_no_embedding_gradient(sched):
    rng = np.random.default_rng(4)
    ex = MlpExpert.initialize(2, [6], 2, rng)
    labels = np.array([0, 0, NULL_LABEL, 0])
    _, g = dsm_loss(ex, (rng.normal(size=(4, 2)), labels), sched, np.array([5, 50, 500, 900]), rng.normal(size=(4, 2)))
    assert np.all(g.label_embeddings[1] == 0.0)
    assert np.any(g.label_embeddings[0] != 0.0)


def test_batch_permutation_invariance(sched):
    rng = np.random.default_rng(8)
    ex = MlpExpert.initialize(2, [8], 2, rng)
    z0, labels = rng.normal(size=(20, 2)), rng.integers(0, 2, 20)
    t, noise, drop = rng.integers(1, 1001, 20), rng.normal(size=(20, 2)), rng.random(20) < 0.2
    p = rng.permutation(20)
    l1, g1 = dsm_loss(ex, (z0, labels), sched, t, noise, drop)
    l2, g2 = dsm_loss(ex, (z0[p], labels[p]), sched, t[p], noise[p], drop[p])
    assert l1 == pytest.approx(l2, rel=1e-13)
    np.testing.assert_allclose(g1.flat(), g2.flat(), rtol=1e-12, atol=1e-15)


def test_loss_is_non_negative(sched):
    rng = np.random.default_rng(9)
    ex = MlpExpert.initialize(2, [8], 2, rng)
    for _ in range(5):
        loss, _ = dsm_loss(ex, (rng.normal(size=(8, 2)), rng.integers(0, 2, 8)), sched, rng.integers(1, 1001, 8), rng.normal(size=(8, 2)))
        assert loss > 0


def test_dsm_loss_validation(sched):
    ex = zero_expert()
    with pytest.raises(ValueError):
        dsm_loss(ex, (np.zeros((0, 2)), np.zeros(0, dtype=int)), sched, np.zeros(0, dtype=int), np.zeros((0, 2)))
    with pytest.raises(ValueError):
        dsm_loss(ex, (np.zeros((3, 2)), np.zeros(3, dtype=int)), sched, np.ones(3, dtype=int), np.zeros((3, 3)))
    with pytest.raises(ValueError):
        dsm_loss(ex, (np.zeros((3, 2)), np.zeros(3, dtype=int)), sched, np.zeros(3, dtype=int), np.zeros((3, 2)))


def test_zero_epochs_returns_initialization(sched):
    ds = make_dataset("two_moons", 100, 0)
    ex, curve = train_expert(ds, [8], sched, TrainConfig(epochs=0, seed=5))
    init = MlpExpert.initialize(2, [8], 2, np.random.default_rng(np.random.SeedSequence(5).spawn(2)[0]))
    assert curve == []
    for a, b in zip(ex.parameters(), init.parameters()):
        assert a.tobytes() == b.tobytes()


def test_training_is_bitwise_reproducible(sched):
    ds = make_dataset("checkerboard", 300, 1)
    cfg = TrainConfig(epochs=2, batch_size=32, learning_rate=0.05, seed=3)
    a, ca = train_expert(ds, [16], sched, cfg)
    b, cb = train_expert(ds, [16], sched, cfg)
    assert ca == cb
    for x, y in zip([*a.parameters(), a.label_embeddings], [*b.parameters(), b.label_embeddings]):
        assert x.tobytes() == y.tobytes()


def test_divergence_is_reported(sched):
    ds = make_dataset("gaussian_blobs", 200, 0)
    with pytest.raises(TrainingDiverged):
        train_expert(ds, [32], sched, TrainConfig(epochs=20, batch_size=50, learning_rate=1e8, seed=0))


def test_train_config_validation():
    with pytest.raises(ValueError):
        TrainConfig(learning_rate=0.0)
    with pytest.raises(ValueError):
        TrainConfig(p_uncond=1.0)


@pytest.mark.parametrize("gen,params", [("gaussian_blobs", {"std": 0.3}), ("two_moons", {"noise": 0.05}), ("checkerboard", {"extent": 2.0})])
def test_datasets(gen, params):
    a = make_dataset(gen, 500, 7, **params)
    b = make_dataset(gen, 500, 7, **params)
    assert a.points.tobytes() == b.points.tobytes()
    assert a.points.shape == (500, 2) and a.labels.shape == (500,)
    assert set(np.unique(a.labels)) == {0, 1}
    with pytest.raises(ValueError):
        make_dataset("spirals", 10, 0)


def test_blob_labels_follow_centers():
    ds = make_dataset("gaussian_blobs", 400, 0, centers=[(-2.0, 0.0), (2.0, 0.0)], std=0.3)
    assert np.all(ds.points[ds.labels == 0, 0] < 0)
    assert np.all(ds.points[ds.labels == 1, 0] > 0)


def test_checkerboard_occupies_dark_squares():
    ds = make_dataset("checkerboard", 2000, 0, extent=2.0)
    cells = np.floor((ds.points + 2.0) / 1.0).astype(int)
    assert np.all((cells[:, 0] + cells[:, 1]) % 2 == 0)
    assert np.all(np.abs(ds.points) <= 2.0)
