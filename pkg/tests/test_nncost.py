import json

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from embshard import nncost
from embshard.errors import ConfigurationError, InvalidArgument, TrainingDiverged
from embshard.nncost import (CommCostModel, ComputeCostModel, MLPRegressor, SetDataset, TrainConfig,
                             VectorDataset, featurize, gradient_check, predict_comm, predict_compute)
from embshard.tables import AUG_DIMS

from conftest import make_table, random_tables


def _count(params):
    return sum(p.size for p in params)


def test_parameter_counts():
    # 5*128+128 + 128*32+32 encoder, 32*64+64 + 64+1 head
    assert _count(ComputeCostModel().params) == 768 + 4128 + 2112 + 65 == 7073
    # 8->128->64->32->16->4
    assert _count(CommCostModel(4).params) == 1152 + 8256 + 2080 + 528 + 68


def test_featurize():
    assert featurize(make_table(dim=128))[0] == 1.0
    assert featurize(make_table(hash_size=10**8))[1] == pytest.approx(1.0)
    v = featurize(make_table(dim=64, hash_size=10**4, pooling_factor=25, skew=1.0))
    assert v == pytest.approx([0.5, 0.5, 0.5, 0.5, 64 * 10**4 * 4 / 1e9])
    assert np.array_equal(featurize(make_table("a")), featurize(make_table("b")))
    assert len(v) == 5


@pytest.fixture(scope="module")
def trained_small(small_pool):
    from embshard import datagen
    _, s = datagen.generate_dataset(small_pool, "compute", 1500, seed=2)
    m = ComputeCostModel(seed=1)
    m, _ = nncost.train(m, datagen.to_set_dataset(s), TrainConfig(epochs=15, seed=1))
    return m


@settings(max_examples=30, deadline=None)
@given(st.randoms(use_true_random=False))
def test_predict_compute_permutation_invariant(trained_small, r):
    ts = random_tables(np.random.default_rng(r.randint(0, 10**6)), 12)
    a = predict_compute(trained_small, ts)
    r.shuffle(ts)
    assert predict_compute(trained_small, ts) == a


def test_predict_compute_zero_weights():
    m = ComputeCostModel(zero=True)
    assert predict_compute(m, [make_table()]) == 0.0
    assert predict_compute(m, random_tables(np.random.default_rng(0), 7)) == 0.0


def test_predict_compute_matches_float_path(trained_small):
    ts = random_tables(np.random.default_rng(5), 9)
    feats = np.stack([featurize(t) for t in ts])
    exact = trained_small.predict_batch(feats, np.array([0]))[0]
    assert predict_compute(trained_small, ts) == pytest.approx(max(exact, 0.0), rel=1e-7, abs=1e-9)


def test_predict_compute_empty():
    with pytest.raises(InvalidArgument):
        predict_compute(ComputeCostModel(), [])


def test_predict_comm_zero_and_deterministic():
    m = CommCostModel(3, zero=True)
    assert predict_comm(m, [1, 2, 3], [10, 20, 30]).tolist() == [0.0, 0.0, 0.0]
    m = CommCostModel(3, seed=4)
    assert np.array_equal(predict_comm(m, [1, 2, 3], [8, 4, 12]), predict_comm(m, [1, 2, 3], [8, 4, 12]))
    assert (predict_comm(m, [1, 2, 3], [8, 4, 12]) >= 0).all()


def test_predict_comm_length_mismatch():
    with pytest.raises(InvalidArgument):
        predict_comm(CommCostModel(4), [0, 0], [1, 1])


def test_comm_encoding_order():
    x = CommCostModel.encode([20, 10], [1024, 512])
    assert x.tolist() == [1.0, 0.5, 1.0, 0.5]


# --- gradients ----------------------------------------------------------------

def _scalar_fd(model, sample, step=1e-4):
    """Naive per-coordinate central differences, the reference for the batched checker."""
    out = []
    for p in model.params:
        flat = p.reshape(-1)
        g = np.empty(flat.size)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + step
            up = model.loss_and_grads(*sample)[0]
            flat[i] = orig - step
            down = model.loss_and_grads(*sample)[0]
            flat[i] = orig
            g[i] = (up - down) / (2 * step)
        out.append(g)
    return out


def _set_sample(rng, n=3):
    sizes = rng.integers(1, 5, n)
    feats = rng.uniform(0, 1, (int(sizes.sum()), 5))
    starts = np.r_[0, np.cumsum(sizes)[:-1]]
    return feats, starts, rng.uniform(1, 20, n)


def test_batched_fd_matches_scalar_fd_regressor(rng):
    m = MLPRegressor([3, 6, 5, 2], seed=3)
    X, Y = rng.normal(size=(4, 3)), rng.normal(size=(4, 2))
    ref = _scalar_fd(m, (X, Y))
    seen = 0
    for p, idx, up, down, kink in m.perturbed_losses(X, Y, step=1e-4):
        np.testing.assert_allclose((up - down) / 2e-4, ref[p][idx], rtol=1e-6, atol=1e-9)
        seen += len(idx)
    assert seen == _count(m.params)


def test_batched_fd_matches_scalar_fd_compute(rng):
    m = ComputeCostModel(seed=2)
    m.y_scale = 5.0
    sample = _set_sample(rng, 2)
    ref = _scalar_fd(m, sample)
    for p, idx, up, down, kink in m.perturbed_losses(*sample, step=1e-4):
        np.testing.assert_allclose((up - down) / 2e-4, ref[p][idx], rtol=1e-6, atol=1e-9)


@pytest.mark.parametrize("seed", range(4))
def test_gradient_check_compute(rng, seed):
    m = ComputeCostModel(seed=seed)
    m.y_scale = 6.0
    assert gradient_check(m, _set_sample(np.random.default_rng(seed))) <= 1e-4


@pytest.mark.parametrize("D", [1, 2, 4])
def test_gradient_check_comm(D):
    r = np.random.default_rng(D)
    m = CommCostModel(D, seed=D)
    m.y_scale = 3.0
    assert gradient_check(m, (r.uniform(0, 1, (5, 2 * D)), r.uniform(0, 10, (5, D)))) <= 1e-4


def test_gradient_check_linear_exact(rng):
    m = MLPRegressor([4, 1], seed=0)
    X, Y = rng.normal(size=(6, 4)), rng.normal(size=(6, 1))
    err, skipped = gradient_check(m, (X, Y), return_skipped=True)
    assert skipped == 0
    _, g = m.loss_and_grads(X, Y)
    fd = _scalar_fd(m, (X, Y))
    for a, n in zip(g, fd):
        np.testing.assert_allclose(a.reshape(-1), n, atol=1e-7)


def test_zero_input_zero_first_layer_grad():
    m = MLPRegressor([3, 8, 1], seed=1)
    _, g = m.loss_and_grads(np.zeros((4, 3)), np.ones((4, 1)))
    assert not g[0].any()


def test_kink_crossings_are_skipped():
    # place a hidden pre-activation exactly on the ReLU hinge
    m = MLPRegressor([1, 1, 1], seed=0)
    m.params = [np.array([[1.0]]), np.array([0.0]), np.array([[2.0]]), np.array([0.0])]
    err, skipped = gradient_check(m, (np.array([[0.0]]), np.array([[1.0]])), return_skipped=True)
    assert skipped >= 1


# --- training -----------------------------------------------------------------

def test_train_constant_label():
    rng = np.random.default_rng(0)
    X = rng.uniform(0, 1, (40_000, 6))
    data = VectorDataset(X, np.full((40_000, 2), 3.5))
    _, early = nncost.train(MLPRegressor([6, 16, 2], seed=0), data, TrainConfig(epochs=10))
    _, late = nncost.train(MLPRegressor([6, 16, 2], seed=0), data, TrainConfig(epochs=50))
    assert late["test_mse"] < early["test_mse"]
    assert late["test_mse"] < 1e-3 * 3.5**2


def test_train_deterministic():
    rng = np.random.default_rng(1)
    X = rng.uniform(0, 1, (300, 4))
    data = VectorDataset(X, (X @ np.array([[1.0], [2.0], [-1.0], [0.5]])) ** 2)
    runs = [nncost.train(MLPRegressor([4, 16, 1], seed=2), data, TrainConfig(epochs=5, seed=3))
            for _ in range(2)]
    assert runs[0][1] == runs[1][1]
    assert all(np.array_equal(a, b) for a, b in zip(runs[0][0].params, runs[1][0].params))


def test_train_keeps_best_validation_snapshot():
    rng = np.random.default_rng(4)
    X = rng.uniform(0, 1, (200, 3))
    data = VectorDataset(X, X.sum(axis=1, keepdims=True))
    m, metrics = nncost.train(MLPRegressor([3, 8, 1], seed=0), data, TrainConfig(epochs=30, seed=0))
    tr, va, te = nncost.split_indices(200, TrainConfig(seed=0))
    assert m.mse(data, va) == metrics["valid_mse"]
    assert (metrics["n_train"], metrics["n_valid"], metrics["n_test"]) == (160, 20, 20)


def test_train_too_small():
    with pytest.raises(InvalidArgument):
        nncost.train(MLPRegressor([2, 1]), VectorDataset(np.zeros((5, 2)), np.zeros((5, 1))))


def test_train_diverged():
    X = np.ones((50, 2))
    data = VectorDataset(X, np.full((50, 1), np.nan))
    with pytest.raises(TrainingDiverged) as e:
        nncost.train(MLPRegressor([2, 1]), data, TrainConfig(epochs=3))
    assert e.value.epoch == 1


def test_set_dataset_batch():
    sets = [np.ones((2, 5)), 2 * np.ones((1, 5)), 3 * np.ones((3, 5))]
    ds = SetDataset.from_sets(sets, [1.0, 2.0, 3.0])
    feats, starts, y = ds.batch(np.array([2, 0]))
    assert feats.shape == (5, 5) and starts.tolist() == [0, 3] and y.tolist() == [3.0, 1.0]
    assert feats[:3].max() == 3 and feats[3:].max() == 1


def test_split_fractions_validated():
    with pytest.raises(InvalidArgument):
        TrainConfig(split=(0.5, 0.2, 0.2))


# --- persistence --------------------------------------------------------------

@pytest.mark.parametrize("model", [ComputeCostModel(seed=3), CommCostModel(4, "bwd", seed=3),
                                   MLPRegressor([3, 4, 2], seed=3)])
def test_model_roundtrip(tmp_path, model):
    model.y_scale = 2.5
    path = tmp_path / "m.json"
    nncost.save_model(model, path, TrainConfig(epochs=7), {"test_mse": 0.1})
    back = nncost.load_model(path)
    assert type(back) is type(model) and back.y_scale == 2.5
    assert all(np.array_equal(a, b) for a, b in zip(model.params, back.params))
    d = json.loads(path.read_text())
    assert d["train_config"]["epochs"] == 7 and len(d["train_config_fingerprint"]) == 16
    nncost.save_model(back, tmp_path / "again.json", TrainConfig(epochs=7), {"test_mse": 0.1})
    assert (tmp_path / "again.json").read_bytes() == path.read_bytes()


def test_comm_weight_file_records_encoding(tmp_path):
    nncost.save_model(CommCostModel(2), tmp_path / "c.json")
    norm = json.loads((tmp_path / "c.json").read_text())["normalization"]
    assert norm == {"starts_ms": 20.0, "device_dims": 1024.0, "input_order": "starts,device_dims"}


def test_load_missing_model(tmp_path):
    with pytest.raises(ConfigurationError):
        nncost.load_model(tmp_path / "nope.json")
    with pytest.raises(ConfigurationError):
        nncost.CostModelBundle.load(tmp_path)


def test_bundle_roundtrip(tmp_path):
    b = nncost.CostModelBundle(ComputeCostModel(seed=1), CommCostModel(2, "fwd", seed=1),
                               CommCostModel(2, "bwd", seed=2))
    b.save(tmp_path)
    back = nncost.CostModelBundle.load(tmp_path)
    assert back.num_devices == 2 and set(back.fingerprints) == {"compute", "comm-fwd", "comm-bwd"}


def test_bundle_device_mismatch(tmp_path):
    nncost.CostModelBundle(ComputeCostModel(), CommCostModel(2), CommCostModel(4, "bwd")).save(tmp_path)
    with pytest.raises(ConfigurationError):
        nncost.CostModelBundle.load(tmp_path)


@pytest.mark.slow
@pytest.mark.parametrize("direction", ["fwd", "bwd"])
def test_trained_comm_monotone_in_max_dim(trained, direction):
    # raising the max device dim should raise the predicted max comm cost on most probes
    models = trained[0]
    m = models.comm_fwd if direction == "fwd" else models.comm_bwd
    rng = np.random.default_rng(0)
    ok = 0
    for _ in range(500):
        starts = rng.uniform(0, 20, 4) if direction == "fwd" else np.zeros(4)
        dims = rng.integers(50, 800, 4).astype(float)
        hi = dims.copy()
        hi[np.argmax(hi)] += 200
        ok += predict_comm(m, starts, hi).max() > predict_comm(m, starts, dims).max()
    assert ok / 500 >= 0.95


def test_featurize_dims_in_unit_range():
    for d in AUG_DIMS:
        assert 0 < featurize(make_table(dim=d))[0] <= 1
