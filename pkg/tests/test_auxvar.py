import warnings

import numpy as np
import pytest

from bamlab.auxvar import AuxBank, dump_aux_csv, run_stage1, separation_stats, stage1_batch
from bamlab.config import RunConfig
from bamlab.data import DatasetSpec, TrainView, gen_blobs
from bamlab.model import init_model, predict_logits
from bamlab.numkit import InvalidInputError, OptimizerState, forward_backward, softmax
from bamlab.training import train_erm

from .oracles import fd_check_stage1, random_instance


def _view(n=40, d=3, seed=0):
    rng = np.random.default_rng(seed)
    return TrainView(rng.normal(size=(n, d)), rng.integers(2, size=n))


def test_bank_gradient_single_example():
    # zero network output, lam=50, batch of one, label 0: grad = 50 * (0.5 - 1, 0.5)
    model = init_model((2, 2), 0)
    model.weights[0][:] = 0
    view = TrainView(np.ones((1, 2)), np.array([0]))
    _, _, ograd = forward_backward(model, view.features, view.labels, np.zeros((1, 2)))
    np.testing.assert_allclose(50 * ograd, [[-25.0, 25.0]])
    aux = AuxBank.zeros(1, 2, 50.0)
    stage1_batch(model, aux, [0], view, OptimizerState.for_arrays(model.arrays(), 0.1))
    np.testing.assert_allclose(aux.values, [[2.5, -2.5]])


def test_bank_update_matches_per_row_loop():
    # batches are unsorted on purpose: each row must receive its own gradient
    rng = np.random.default_rng(4)
    view = _view(30)
    model = init_model((3, 5, 2), 1)
    aux = AuxBank(rng.normal(size=(30, 2)), 3.0)
    aux.velocity = rng.normal(size=(30, 2))
    lr, m = 0.05, 0.9
    idx = np.array([17, 3, 25, 0, 9])
    expect_v, expect_b = aux.velocity.copy(), aux.values.copy()
    z = predict_logits(model, view.features[idx]) + 3.0 * aux.values[idx]
    for k, i in enumerate(idx):
        g = softmax(z[k])
        g[view.labels[i]] -= 1
        g = 3.0 * g / len(idx)
        expect_v[i] = m * expect_v[i] + g
        expect_b[i] = expect_b[i] - lr * expect_v[i]
    stage1_batch(model, aux, idx, view, OptimizerState.for_arrays(model.arrays(), lr, m))
    np.testing.assert_allclose(aux.values, expect_b, rtol=1e-12, atol=1e-15)
    np.testing.assert_allclose(aux.velocity, expect_v, rtol=1e-12, atol=1e-15)


def test_duplicate_rows_get_summed_gradient():
    view = _view(10)
    model = init_model((3, 2), 2)
    a, b = AuxBank.zeros(10, 2, 2.0), AuxBank.zeros(10, 2, 2.0)
    opt = lambda m: OptimizerState.for_arrays(m.arrays(), 0.1)  # noqa: E731
    stage1_batch(model.copy(), a, [4, 4], view, opt(model))
    _, _, og = forward_backward(model, view.features[[4]], view.labels[[4]], np.zeros((1, 2)))
    # two copies in a batch of two: each contributes half, together one full gradient
    np.testing.assert_allclose(a.values[4], -0.1 * 2.0 * og[0], rtol=1e-12)
    stage1_batch(model.copy(), b, [4], view, opt(model))
    np.testing.assert_allclose(a.values, b.values, rtol=1e-12)


def test_untouched_rows_keep_value_and_velocity():
    rng = np.random.default_rng(0)
    view = _view(20)
    model = init_model((3, 4, 2), 0)
    aux = AuxBank(rng.normal(size=(20, 2)), 5.0)
    aux.velocity = rng.normal(size=(20, 2))
    before_v, before_b = aux.velocity.copy(), aux.values.copy()
    opt = OptimizerState.for_arrays(model.arrays(), 0.1, 0.9)
    stage1_batch(model, aux, [2, 7, 11], view, opt)
    rest = np.setdiff1d(np.arange(20), [2, 7, 11])
    assert np.array_equal(aux.values[rest], before_b[rest])
    assert np.array_equal(aux.velocity[rest], before_v[rest])
    assert not np.array_equal(aux.values[[2, 7, 11]], before_b[[2, 7, 11]])


def test_stage1_gradients_match_finite_differences():
    rng = np.random.default_rng(21)
    for _ in range(10):
        dims = (int(rng.integers(1, 5)), int(rng.integers(1, 5)), int(rng.integers(2, 4)))
        n = int(rng.integers(1, 5))
        model, x = random_instance(rng, dims, n)
        y = rng.integers(dims[-1], size=n)
        bank = rng.normal(size=(n, dims[-1]))
        lam = float(rng.choice([0.5, 1.0, 5.0]))
        assert fd_check_stage1(model, bank, lam, x, y) == []


def test_lambda_zero_is_plain_erm():
    view = _view(50, seed=3)
    model = init_model((3, 6, 2), 5)
    cfg = RunConfig(lam=0.0, T=3, batch_size=8, lr=0.05, hidden_dims=(6,), seed=2)
    biased, aux, logs = run_stage1(model, view, cfg)
    assert not aux.values.any()
    ref = model.copy()
    losses = train_erm(ref, view, 3, seed=2, phase="stage1", lr=0.05, momentum=0.9,
                       weight_decay=0.0, batch_size=8)
    assert [lg.train_loss for lg in logs] == losses
    assert biased.equals(ref)


def test_run_stage1_leaves_input_model_alone_and_rejects_t0():
    view = _view(20)
    model = init_model((3, 2), 0)
    before = model.copy()
    run_stage1(model, view, RunConfig(T=1, batch_size=4))
    assert model.equals(before)
    with pytest.raises(InvalidInputError):
        run_stage1(model, view, RunConfig(T=0))


def test_separation_stats_hand_example():
    aux = AuxBank(np.array([[1.0, -1.0], [3.0, -3.0], [-2.0, 2.0], [0.0, 0.0]]), 1.0)
    labels = np.array([0, 0, 1, 1])
    groups = np.array([0, 1, 2, 2])
    st = separation_stats(aux, labels, groups).groups
    assert st[0].true_class_logit == 1.0 and st[0].other_class_logit == -1.0
    assert st[1].mean_norm == pytest.approx(np.sqrt(18))
    assert st[2].true_class_logit == pytest.approx(1.0)  # (2 + 0) / 2
    assert st[2].mean_norm == pytest.approx(np.sqrt(8) / 2)


def test_separation_stats_zero_bank_and_missing_group():
    aux = AuxBank.zeros(4, 2, 1.0)
    with pytest.warns(UserWarning):
        res = separation_stats(aux, [0, 0, 1, 1], [0, 0, 3, 3], expected_groups=[0, 1, 2, 3])
    assert res.missing_groups == [1, 2]
    assert all(s.mean_norm == 0.0 and s.true_class_logit == 0.0 for s in res.groups.values())


def test_separation_stats_permutation_invariant():
    rng = np.random.default_rng(1)
    aux = AuxBank(rng.normal(size=(30, 3)), 1.0)
    y = rng.integers(3, size=30)
    g = y * 2 + rng.integers(2, size=30)
    perm = rng.permutation(30)
    a = separation_stats(aux, y, g).groups
    b = separation_stats(AuxBank(aux.values[perm], 1.0), y[perm], g[perm]).groups
    for k in a:
        assert a[k].true_class_logit == pytest.approx(b[k].true_class_logit, abs=1e-14)
        assert a[k].mean_norm == pytest.approx(b[k].mean_norm, abs=1e-14)


def test_minority_rows_get_larger_offsets():
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        ex = gen_blobs(DatasetSpec(n_total=800, seed=1))
    cfg = RunConfig(lam=20.0, T=3, batch_size=32, hidden_dims=(16,), seed=1)
    model = init_model(cfg.layer_dims(ex.features.shape[1], 2), 0)
    _, aux, _ = run_stage1(model, ex.training_view(), cfg)
    st = separation_stats(aux, ex.labels, ex.groups).groups
    minority = np.mean([st[1].true_class_logit, st[2].true_class_logit])
    majority = np.mean([st[0].true_class_logit, st[3].true_class_logit])
    assert minority > majority


def test_dump_aux_csv(tmp_path):
    ex = gen_blobs(DatasetSpec(n_total=20))
    aux = AuxBank(np.arange(40, dtype=float).reshape(20, 2) / 4, 1.0)
    dump_aux_csv(aux, ex, tmp_path / "aux.csv")
    lines = (tmp_path / "aux.csv").read_text().splitlines()
    assert lines[0] == "example_index,group_id,b_0,b_1"
    assert lines[1] == f"{ex.index[0]},{ex.groups[0]},0.0,0.25"
    assert len(lines) == 21
