import math
import zlib

import numpy as np
import pytest
from hypothesis import given, strategies as st

from localnet import autodiff as ad
from localnet.autodiff import LayerParams, Tensor
from gradcheck import check_op
from oracles import argmax_scan

N_INSTANCES = 20
TOL = 1e-4


def away_from_zero(rng, shape):
    return rng.choice([-1, 1], size=shape) * (0.1 + rng.random(shape))


# one builder per differentiable op; each returns (build, arrays)
def case_add(rng):
    return (lambda t: ad.add(t[0], t[1])), [rng.normal(size=(4, 3)), rng.normal(size=(3,))]


def case_sub(rng):
    return (lambda t: ad.sub(t[0], t[1])), [rng.normal(size=(2, 4, 3)), rng.normal(size=(4, 1))]


def case_mul(rng):
    return (lambda t: ad.mul(t[0], t[1])), [rng.normal(size=(4, 3)), rng.normal(size=(1, 3))]


def case_relu(rng):
    return (lambda t: ad.relu(t[0])), [away_from_zero(rng, (5, 4))]


def case_linear(rng):
    return (lambda t: ad.linear(t[0], t[1], t[2])), [rng.normal(size=(2, 4, 3)),
                                                     rng.normal(size=(5, 3)), rng.normal(size=5)]


def case_batch_norm_train(rng):
    rm, rv = np.zeros(3), np.ones(3)
    return (lambda t: ad.batch_norm(t[0], t[1], t[2], rm.copy(), rv.copy(), 0.1, ad.TRAIN)), \
        [rng.normal(size=(6, 3)) * 2 + 1, rng.normal(size=3), rng.normal(size=3)]


def case_batch_norm_eval(rng):
    rm, rv = rng.normal(size=3), rng.random(3) + 0.5
    return (lambda t: ad.batch_norm(t[0], t[1], t[2], rm, rv, 0.1, ad.EVAL)), \
        [rng.normal(size=(6, 3)), rng.normal(size=3), rng.normal(size=3)]


def case_shared_mlp_layer(rng):
    rm, rv = np.zeros(5), np.ones(5)

    def build(t):
        p = LayerParams(t[1], t[2], t[3], t[4], rm.copy(), rv.copy())
        return ad.shared_mlp_layer(t[0], p, ad.TRAIN)
    return build, [rng.normal(size=(4, 3)), rng.normal(size=(5, 3)), rng.normal(size=5),
                   1 + rng.random(5), rng.normal(size=5)]


def case_max_reduce(rng):
    return (lambda t: ad.max_reduce(t[0], axis=1)[0]), [rng.normal(size=(2, 6, 4))]


def case_take(rng):
    idx = rng.integers(0, 5, size=(2, 7))
    return (lambda t: ad.take(t[0], idx, axis=1)), [rng.normal(size=(2, 5, 3))]


def case_concat(rng):
    return (lambda t: ad.concat([t[0], t[1], t[2]])), [rng.normal(size=(3, 2)), rng.normal(size=(3, 4)),
                                                       np.zeros((3, 0))]


def case_reshape_broadcast(rng):
    return (lambda t: ad.broadcast_to(ad.reshape(t[0], (2, 1, 3)), (2, 5, 3))), [rng.normal(size=(2, 3))]


def case_dropout(rng):
    seed = int(rng.integers(1 << 30))
    return (lambda t: ad.dropout(t[0], 0.5, ad.TRAIN, np.random.default_rng(seed))), [rng.normal(size=(4, 6))]


def case_cross_entropy(rng):
    labels = rng.integers(0, 4, size=5)
    return (lambda t: ad.softmax_cross_entropy(t[0], labels)), [rng.normal(size=(5, 4)) * 3]


def case_total(rng):
    return (lambda t: ad.total(t[0])), [rng.normal(size=(3, 3))]


OP_CASES = [case_add, case_sub, case_mul, case_relu, case_linear, case_batch_norm_train,
            case_batch_norm_eval, case_shared_mlp_layer, case_max_reduce, case_take, case_concat,
            case_reshape_broadcast, case_dropout, case_cross_entropy, case_total]


@pytest.mark.parametrize("case", OP_CASES, ids=lambda c: c.__name__[5:])
def test_op_gradients(case):
    rng = np.random.default_rng(zlib.crc32(case.__name__.encode()))
    worst = max(check_op(*case(rng), rng) for _ in range(N_INSTANCES))
    assert worst < TOL


def test_shared_mlp_identity_configuration():
    rng = np.random.default_rng(0)
    p = LayerParams.init(3, 3, rng, dtype=np.float64)
    p.weight.data = np.eye(3)
    p.bias.data = np.zeros(3)
    x = rng.random((4, 3)) + 0.1
    out = ad.shared_mlp_layer(Tensor(x), p, ad.EVAL)
    np.testing.assert_allclose(out.data, x / math.sqrt(1 + ad.BN_EPS), rtol=1e-12)
    # with eps absorbed into the running variance the map is exactly the identity
    p.bn_running_var[:] = 1 - ad.BN_EPS
    np.testing.assert_allclose(ad.shared_mlp_layer(Tensor(x), p, ad.EVAL).data, x, rtol=1e-15)


def test_shared_mlp_relu_zeroes_negative():
    rng = np.random.default_rng(1)
    p = LayerParams.init(3, 4, rng, dtype=np.float64)
    x = rng.normal(size=(6, 3))
    pre = ad.shared_mlp_layer(Tensor(x), p, ad.EVAL, activation=False).data
    out = ad.shared_mlp_layer(Tensor(x), p, ad.EVAL).data
    assert np.all(out[pre < 0] == 0)
    np.testing.assert_array_equal(out[pre > 0], pre[pre > 0])


def test_shared_mlp_shape_error():
    p = LayerParams.init(3, 4, np.random.default_rng(0))
    with pytest.raises(ad.ShapeError):
        ad.shared_mlp_layer(Tensor(np.zeros((2, 5), np.float32)), p, ad.EVAL)


def test_batch_norm_train_statistics():
    rng = np.random.default_rng(2)
    x = rng.normal(size=(32, 5)) * 3 + 7
    rm, rv = np.zeros(5), np.ones(5)
    out = ad.batch_norm(Tensor(x), Tensor(np.ones(5)), Tensor(np.zeros(5)), rm, rv, 0.1, ad.TRAIN).data
    np.testing.assert_allclose(out.mean(axis=0), 0, atol=1e-4)
    np.testing.assert_allclose(out.var(axis=0), 1, atol=1e-4)
    np.testing.assert_allclose(rm, 0.1 * x.mean(axis=0))
    np.testing.assert_allclose(rv, 0.9 + 0.1 * x.var(axis=0))
    assert np.all(rv >= 0)


def test_max_reduce_examples():
    vals, idx = ad.max_reduce_with_argmax(Tensor(np.array([[1.0, 5.0], [3.0, 2.0]])))
    assert list(vals.data) == [3, 5] and list(idx) == [1, 0]
    vals, idx = ad.max_reduce_with_argmax(Tensor(np.array([[4.0, -1.0]])))
    assert list(vals.data) == [4, -1] and list(idx) == [0, 0]
    vals, idx = ad.max_reduce_with_argmax(Tensor(np.array([[2.0, 2.0], [2.0, 2.0]])))
    assert list(idx) == [0, 0]


@given(st.integers(0, 2**32 - 1))
def test_max_reduce_matches_scan_and_permutes(seed):
    rng = np.random.default_rng(seed)
    x = rng.normal(size=(int(rng.integers(1, 20)), int(rng.integers(1, 20))))
    vals, idx = ad.max_reduce_with_argmax(Tensor(x))
    ovals, oidx = argmax_scan(x.tolist())
    assert list(vals.data) == ovals and list(idx) == oidx
    assert np.array_equal(vals.data, x[idx, np.arange(x.shape[1])])
    perm = rng.permutation(x.shape[0])
    pvals, pidx = ad.max_reduce_with_argmax(Tensor(x[perm]))
    assert np.array_equal(pvals.data, vals.data)
    np.testing.assert_array_equal(perm[pidx], idx)


def test_max_reduce_gradient_routes_to_argmax():
    x = Tensor(np.array([[1.0, 5.0], [3.0, 2.0]]), requires_grad=True)
    vals, _ = ad.max_reduce_with_argmax(x)
    ad.total(vals).backward()
    np.testing.assert_array_equal(x.grad, [[0, 1], [1, 0]])


def test_dropout_modes():
    x = Tensor(np.ones((100, 10)))
    assert ad.dropout(x, 0.5, ad.EVAL, None) is x
    assert ad.dropout(x, 0.0, ad.TRAIN, np.random.default_rng(0)) is x
    a = ad.dropout(x, 0.5, ad.TRAIN, np.random.default_rng(4)).data
    b = ad.dropout(x, 0.5, ad.TRAIN, np.random.default_rng(4)).data
    np.testing.assert_array_equal(a, b)
    assert set(np.unique(a)) <= {0.0, 2.0}
    assert 0.4 < (a == 0).mean() < 0.6
    with pytest.raises(ValueError):
        ad.dropout(x, 1.0, ad.TRAIN, np.random.default_rng(0))


def test_cross_entropy_values():
    for c in (2, 4, 40):
        loss = ad.softmax_cross_entropy(Tensor(np.zeros((3, c))), [0, 1, c - 1])
        assert abs(float(loss.data) - math.log(c)) < 1e-9
    loss = ad.softmax_cross_entropy(Tensor(np.array([[10.0, -10.0]])), [0])
    assert abs(float(loss.data) - math.log1p(math.exp(-20))) < 1e-15
    assert float(loss.data) == pytest.approx(2.06e-9, rel=1e-2)
    with pytest.raises(ValueError):
        ad.softmax_cross_entropy(Tensor(np.zeros((1, 2))), [2])


@given(st.integers(0, 2**32 - 1))
def test_softmax_rows_sum_to_one(seed):
    rng = np.random.default_rng(seed)
    logits = rng.normal(size=(5, 7)) * rng.uniform(0.1, 100)
    np.testing.assert_allclose(ad.softmax(logits).sum(axis=1), 1, atol=1e-6)


def test_adam_zero_gradient_keeps_params():
    p = {"w": ad.parameter(np.arange(4.0), np.float64)}
    state = ad.AdamState()
    ad.adam_step(p, state, {"w": np.zeros(4)})
    np.testing.assert_array_equal(p["w"].data, np.arange(4.0))
    assert state.step_count == 1


def test_adam_single_step_oracle():
    g = np.array([0.5, -2.0, 1e-3])
    p = {"w": ad.parameter(np.zeros(3), np.float64)}
    state = ad.AdamState(lr=1e-3)
    ad.adam_step(p, state, {"w": g})
    # m_hat = g, v_hat = g^2 after bias correction
    expected = -1e-3 * g / (np.abs(g) + 1e-8)
    np.testing.assert_allclose(p["w"].data, expected, rtol=1e-9)


def test_adam_constant_gradient_step_size_tends_to_lr():
    p = {"w": ad.parameter(np.zeros(2), np.float64)}
    state = ad.AdamState(lr=1e-3)
    g = np.array([0.3, -7.0])
    prev = p["w"].data.copy()
    for _ in range(200):
        ad.adam_step(p, state, {"w": g})
        step, prev = p["w"].data - prev, p["w"].data.copy()
    np.testing.assert_allclose(np.abs(step), 1e-3, rtol=1e-6)


def test_lr_schedule():
    assert ad.lr_schedule(0) == 0.001
    assert ad.lr_schedule(22) == 0.001
    assert ad.lr_schedule(23) == pytest.approx(0.0007, abs=1e-15)
    assert abs(ad.lr_schedule(46) - 0.00049) < 1e-12
    with pytest.raises(ValueError):
        ad.lr_schedule(-1)


def test_concat_empty_and_shapes():
    x = Tensor(np.ones((2, 3)))
    assert ad.concat([x, Tensor(np.zeros((2, 0)))]) is x
    assert ad.concat([x, Tensor(np.ones((2, 4)))]).shape == (2, 7)


def test_linear_rows_independent_of_position():
    rng = np.random.default_rng(5)
    w, b = Tensor(rng.normal(size=(64, 37)).astype(np.float32)), Tensor(np.zeros(64, np.float32))
    x = rng.normal(size=(301, 37)).astype(np.float32)
    perm = rng.permutation(301)
    out = ad.linear(Tensor(x), w, b).data
    np.testing.assert_array_equal(out[perm], ad.linear(Tensor(x[perm]), w, b).data)
