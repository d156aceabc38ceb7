import numpy as np
import pytest

from gradsuite import CASES, INSTANCES, TOLERANCE, run_case
from maect import autodiff as ad
from maect.autodiff import AutodiffError, Tape, Tensor


@pytest.mark.parametrize("name", sorted(CASES))
def test_gradient_matches_finite_differences(name):
    assert run_case(name, INSTANCES) < TOLERANCE


def test_square_gradient():
    x = Tensor(np.array(3.0), requires_grad=True)
    with Tape() as tape:
        y = ad.mul(x, x)
    ad.backward(tape, np.array(1.0), output=y)
    assert x.grad == pytest.approx(6.0)


def test_sum_gradient_is_ones():
    (g,) = ad.grad_of(lambda t: ad.sum_(t), np.arange(4.0))
    np.testing.assert_array_equal(g, np.ones(4))


def test_matmul_gradient_is_seed_times_b_transpose():
    rng = np.random.default_rng(1)
    a, b, seed = rng.normal(size=(3, 4)), rng.normal(size=(4, 2)), rng.normal(size=(3, 2))
    ta = Tensor(a, requires_grad=True)
    with Tape() as tape:
        out = ad.matmul(ta, b)
    ad.backward(tape, seed, output=out)
    np.testing.assert_allclose(ta.grad, seed @ b.T, rtol=1e-12)
    fd = ad.finite_difference_grad(lambda x: float((x @ b * seed).sum()), a)
    np.testing.assert_allclose(ta.grad, fd, atol=1e-8)


def test_finite_difference_of_square():
    g = ad.finite_difference_grad(lambda x: float(x**2), np.array(3.0), 1e-6)
    assert abs(g - 6.0) < 1e-6


def test_finite_difference_rejects_non_finite():
    with pytest.raises(AutodiffError):
        ad.finite_difference_grad(lambda x: float("nan"), np.array([1.0]))
    with pytest.raises(AutodiffError):
        ad.finite_difference_grad(lambda x: 0.0, np.array([1.0]), eps=0)


def test_trivial_forward_values():
    np.testing.assert_array_equal(ad.matmul([[1.0, 2.0], [3.0, 4.0]], np.eye(2)).data, [[1, 2], [3, 4]])
    np.testing.assert_array_equal(ad.softmax(np.zeros(2)).data, [0.5, 0.5])
    np.testing.assert_array_equal(ad.layer_norm(np.full((1, 5), 3.0)).data, np.zeros((1, 5)))


def test_unused_leaf_gets_zero_gradient():
    a = Tensor(np.ones(3), requires_grad=True)
    b = Tensor(np.ones(2), requires_grad=True)
    with Tape() as tape:
        out = ad.sum_(ad.mul(a, 2.0))
    ga, gb = ad.backward(tape, output=out, inputs=[a, b])
    np.testing.assert_array_equal(ga, [2, 2, 2])
    np.testing.assert_array_equal(gb, [0, 0])


def test_gradients_accumulate_over_reuse():
    x = Tensor(np.array([1.0, 2.0]), requires_grad=True)
    with Tape() as tape:
        out = ad.sum_(ad.add(ad.mul(x, x), x))
    ad.backward(tape, output=out)
    np.testing.assert_array_equal(x.grad, 2 * x.data + 1)


def test_backward_errors():
    with pytest.raises(AutodiffError, match="empty tape"):
        ad.backward(Tape())
    x = Tensor(np.ones(3), requires_grad=True)
    with Tape() as tape:
        y = ad.mul(x, 2.0)
    with pytest.raises(AutodiffError, match="seed shape"):
        ad.backward(tape, np.ones(2), output=y)


def test_shape_mismatch_names_primitive():
    with pytest.raises(AutodiffError, match="matmul"):
        ad.matmul(np.ones((2, 3)), np.ones((2, 3)))
    with pytest.raises(AutodiffError, match="linear"):
        ad.linear(np.ones((2, 3)), np.ones((4, 3)))
    with pytest.raises(AutodiffError, match="add"):
        ad.add(np.ones(3), np.ones(4))


def test_non_finite_input_rejected():
    with pytest.raises(AutodiffError):
        Tensor(np.array([1.0, np.nan]))
    with pytest.raises(AutodiffError):
        ad.exp(np.array([1e400]))


def test_tape_records_only_with_grad_inputs():
    with Tape() as tape:
        ad.add(np.ones(2), np.ones(2))
    assert not tape.records
    x = Tensor(np.ones(2), requires_grad=True)
    with Tape() as tape:
        a = ad.mul(x, 2.0)
        b = ad.exp(a)
    assert [r.op for r in tape.records] == ["mul", "exp"]
    # topological: every produced input precedes its consumer
    assert tape.records[1].inputs[0] is tape.records[0].output
    assert b.requires_grad


def test_no_record_suppresses_tape():
    x = Tensor(np.ones(2), requires_grad=True)
    with Tape() as tape:
        with ad.no_record():
            ad.mul(x, 2.0)
    assert not tape.records


def test_forward_is_deterministic():
    rng = np.random.default_rng(0)
    q = rng.normal(size=(2, 5, 8))
    a = ad.attention(q, q, q, 2).data
    b = ad.attention(q, q, q, 2).data
    assert a.tobytes() == b.tobytes()


def test_batch_norm_modes_and_running_stats():
    rng = np.random.default_rng(0)
    x = rng.normal(2.0, 3.0, size=(64, 3))
    state = ad.BatchNormState.create(3)
    out = ad.batch_norm(x, state=state, training=True).data
    np.testing.assert_allclose(out.mean(0), 0, atol=1e-12)
    np.testing.assert_allclose(out.var(0), x.var(0) / (x.var(0) + ad.NORM_EPS), rtol=1e-12)
    np.testing.assert_allclose(state.mean, 0.1 * x.mean(0), rtol=1e-12)
    np.testing.assert_allclose(state.var, 0.9 + 0.1 * x.var(0, ddof=1), rtol=1e-12)
    ev = ad.batch_norm(x, state=state, training=False).data
    np.testing.assert_allclose(ev, (x - state.mean) / np.sqrt(state.var + ad.NORM_EPS), rtol=1e-12)


def test_cross_entropy_matches_direct_formula():
    rng = np.random.default_rng(0)
    z = rng.normal(size=(5, 4))
    t = rng.integers(0, 4, size=5)
    direct = np.mean(-np.log(np.exp(z[np.arange(5), t]) / np.exp(z).sum(1)))
    assert ad.cross_entropy(z, t).item() == pytest.approx(direct, abs=1e-12)


def test_l2_normalize_unit_rows():
    x = np.random.default_rng(0).normal(size=(6, 5))
    np.testing.assert_allclose(np.linalg.norm(ad.l2_normalize(x).data, axis=1), 1, atol=1e-12)
