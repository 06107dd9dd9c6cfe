import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from loop_pe import autodiff as ad
from loop_pe.autodiff import Tape, Tensor
from loop_pe.errors import ContractError, DomainError, NonFiniteError, ShapeError

from gradcheck import check_op

SEEDS = range(100)


def triple_loop(a, b):
    m, k = len(a), len(a[0])
    n = len(b[0])
    out = [[0.0] * n for _ in range(m)]
    for i in range(m):
        for j in range(n):
            s = 0.0
            for p in range(k):
                s += a[i][p] * b[p][j]
            out[i][j] = s
    return np.array(out)


# ---------------------------------------------------------------------------
# matmul


def test_matmul_identity():
    a = Tensor([[1.0, 2.0], [3.0, 4.0]])
    assert np.array_equal(ad.matmul(a, Tensor(np.eye(2))).data, a.data)


def test_matmul_hand_arithmetic():
    assert ad.matmul(Tensor([[1.0, 2.0]]), Tensor([[3.0], [4.0]])).data.tolist() == [[11.0]]


def test_matmul_matches_triple_loop_exactly():
    rng = np.random.default_rng(0)
    a = rng.normal(size=(3, 4))
    b = rng.normal(size=(4, 2))
    got = ad.matmul(Tensor(a), Tensor(b)).data
    assert np.array_equal(got, triple_loop(a.tolist(), b.tolist()))


@pytest.mark.parametrize("seed", range(20))
def test_matmul_triple_loop_random_shapes(seed):
    rng = np.random.default_rng(seed)
    m, k, n = rng.integers(1, 12, size=3)
    a = rng.normal(size=(m, k)) * 10.0 ** rng.uniform(-3, 3)
    b = rng.normal(size=(k, n))
    assert np.array_equal(ad.matmul(Tensor(a), Tensor(b)).data, triple_loop(a.tolist(), b.tolist()))


def test_matmul_row_result_independent_of_position():
    rng = np.random.default_rng(1)
    a = rng.normal(size=(6, 5))
    b = rng.normal(size=(5, 3))
    full = ad.matmul(Tensor(a), Tensor(b)).data
    for i in range(6):
        assert np.array_equal(ad.matmul(Tensor(a[i:i + 1]), Tensor(b)).data[0], full[i])


def test_matmul_shape_error_names_both_shapes():
    with pytest.raises(ShapeError) as info:
        ad.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((4, 2))))
    assert "(2, 3)" in str(info.value) and "(4, 2)" in str(info.value)


def test_matmul_non_contiguous_inputs():
    rng = np.random.default_rng(2)
    a = rng.normal(size=(4, 3))
    b = rng.normal(size=(4, 5))
    got = ad.matmul(ad.transpose(Tensor(a)), Tensor(b)).data
    assert np.array_equal(got, triple_loop(a.T.tolist(), b.tolist()))


# ---------------------------------------------------------------------------
# softmax


def test_softmax_symmetric():
    assert np.array_equal(ad.softmax_rows(Tensor([[0.0, 0.0]])).data, [[0.5, 0.5]])


@pytest.mark.parametrize("c", [-1e300, -7.5, 0.0, 3.0, 1e300])
def test_softmax_constant_row(c):
    out = ad.softmax_rows(Tensor([[c, c, c]])).data
    assert np.allclose(out, 1.0 / 3.0, rtol=0, atol=1e-15)


def test_softmax_ln3():
    out = ad.softmax_rows(Tensor([[0.0, math.log(3.0)]])).data
    assert np.allclose(out, [[0.25, 0.75]], rtol=0, atol=1e-15)


def test_softmax_large_values_stable():
    out = ad.softmax_rows(Tensor([[1000.0, 1000.0 + math.log(3.0)]])).data
    assert np.allclose(out, [[0.25, 0.75]], atol=1e-12)


finite_rows = arrays(
    np.float64,
    st.tuples(st.integers(1, 6), st.integers(1, 8)),
    elements=st.floats(-700, 700, allow_nan=False, allow_infinity=False),
)


@settings(max_examples=200, deadline=None)
@given(finite_rows)
def test_softmax_rows_sum_to_one(z):
    out = ad.softmax_rows(Tensor(z)).data
    assert np.all(np.abs(out.sum(axis=1) - 1.0) <= 1e-12)
    assert np.all((out >= 0.0) & (out <= 1.0))


@settings(max_examples=100, deadline=None)
@given(finite_rows, st.randoms(use_true_random=False))
def test_softmax_row_permutation(z, r):
    perm = list(range(z.shape[0]))
    r.shuffle(perm)
    out = ad.softmax_rows(Tensor(z)).data
    assert np.array_equal(ad.softmax_rows(Tensor(z[perm])).data, out[perm])


# ---------------------------------------------------------------------------
# elementwise


def test_relu_definition():
    assert ad.relu(Tensor([-1.0, 0.0, 2.0])).data.tolist() == [0.0, 0.0, 2.0]


def test_max_with_scalar():
    assert ad.elementwise("max", Tensor([0.5, 2.0]), 1.0).data.tolist() == [1.0, 2.0]


def test_div_hand_arithmetic():
    assert ad.elementwise("div", Tensor([6.0, 9.0]), Tensor([2.0, 3.0])).data.tolist() == [3.0, 3.0]


def test_div_by_zero_is_domain_error():
    with pytest.raises(DomainError):
        ad.div(Tensor([1.0, 2.0]), Tensor([1.0, 0.0]))
    with pytest.raises(DomainError):
        ad.reciprocal(Tensor([0.0]))


def test_elementwise_shape_mismatch():
    with pytest.raises(ShapeError):
        ad.add(Tensor([1.0, 2.0]), Tensor([1.0, 2.0, 3.0]))
    with pytest.raises(ShapeError):
        ad.mul(Tensor(np.ones((2, 2))), Tensor(np.ones((2, 1))))


def test_elementwise_unknown_kind():
    with pytest.raises(ContractError):
        ad.elementwise("pow", Tensor([1.0]), 2.0)
    with pytest.raises(ContractError):
        ad.elementwise("add", Tensor([1.0]))


def test_elementwise_unary_dispatch():
    x = Tensor([-2.0, 0.5])
    assert ad.elementwise("square", x).data.tolist() == [4.0, 0.25]
    assert ad.elementwise("neg", x).data.tolist() == [2.0, -0.5]


def test_non_finite_inputs_rejected():
    with pytest.raises(NonFiniteError):
        Tensor([1.0, np.nan])
    with pytest.raises(NonFiniteError):
        Tensor([np.inf])


@pytest.mark.filterwarnings("ignore:overflow:RuntimeWarning")
def test_overflow_raises_non_finite():
    with pytest.raises(NonFiniteError):
        ad.mul(Tensor([1e200]), Tensor([1e200]))


def test_tensors_are_immutable():
    t = Tensor([1.0, 2.0])
    with pytest.raises(ValueError):
        t.data[0] = 5.0
    src = np.array([1.0, 2.0])
    t = Tensor(src)
    src[0] = 9.0
    assert t.data[0] == 1.0


def test_operator_overloads():
    a = Tensor([2.0, 4.0])
    b = Tensor([1.0, 2.0])
    assert (a + b).data.tolist() == [3.0, 6.0]
    assert (a - b).data.tolist() == [1.0, 2.0]
    assert (a * b).data.tolist() == [2.0, 8.0]
    assert (a / b).data.tolist() == [2.0, 2.0]
    assert (-a).data.tolist() == [-2.0, -4.0]
    assert (1.0 - b).data.tolist() == [0.0, -1.0]
    assert (8.0 / a).data.tolist() == [4.0, 2.0]
    assert (2.0 * a).data.tolist() == [4.0, 8.0]


# ---------------------------------------------------------------------------
# structure ops


def test_concat_and_reshape():
    a = Tensor([[1.0, 2.0]])
    b = Tensor([[3.0, 4.0]])
    assert ad.concat([a, b], axis=0).data.tolist() == [[1.0, 2.0], [3.0, 4.0]]
    assert ad.concat([a, b], axis=1).data.tolist() == [[1.0, 2.0, 3.0, 4.0]]
    assert ad.reshape(a, (2,)).data.tolist() == [1.0, 2.0]
    with pytest.raises(ShapeError):
        ad.reshape(a, (3,))
    with pytest.raises(ShapeError):
        ad.concat([a, Tensor([[1.0, 2.0, 3.0]])], axis=0)


def test_max_all_and_sum_all():
    t = Tensor([[1.0, 5.0], [5.0, -2.0]])
    assert ad.max_all(t).item() == 5.0
    assert ad.sum_all(t).item() == 9.0


# ---------------------------------------------------------------------------
# backward: examples and contracts


def test_backward_identity():
    p = Tensor(3.0, requires_grad=True)
    with Tape() as tape:
        loss = p
    assert ad.backward(tape, loss, wrt=[p])[p] == 1.0


def test_backward_sum_of_squares():
    p = Tensor([1.0, -2.0], requires_grad=True)
    with Tape() as tape:
        loss = ad.sum_all(ad.square(p))
    assert ad.backward(tape, loss, wrt=[p])[p].tolist() == [2.0, -4.0]


def test_backward_non_scalar_loss():
    p = Tensor([1.0, 2.0], requires_grad=True)
    with Tape() as tape:
        y = ad.square(p)
    with pytest.raises(ContractError):
        ad.backward(tape, y)


def test_backward_unreached_parameter_gets_zeros():
    p = Tensor([1.0, 2.0], requires_grad=True)
    q = Tensor([[1.0, 2.0, 3.0]], requires_grad=True)
    with Tape() as tape:
        loss = ad.sum_all(p)
    g = ad.backward(tape, loss, wrt=[p, q])
    assert g[q].shape == q.shape and not g[q].any()


def test_backward_default_targets_are_leaves():
    p = Tensor([1.0, 2.0], requires_grad=True, name="p")
    c = Tensor([3.0, 4.0])
    with Tape() as tape:
        loss = ad.sum_all(p * c)
    g = ad.backward(tape, loss)
    assert list(g.by_name()) == ["p"]
    assert g[p].tolist() == [3.0, 4.0]


def test_backward_accumulates_reused_tensor():
    p = Tensor([3.0], requires_grad=True)
    with Tape() as tape:
        loss = ad.sum_all(p * p + p)
    assert ad.backward(tape, loss, wrt=[p])[p].tolist() == [7.0]


def test_gradient_set_enforces_shapes():
    gs = ad.GradientSet()
    p = Tensor(np.ones((2, 2)))
    with pytest.raises(ShapeError):
        gs[p] = np.ones(3)


def test_no_recording_without_tape_or_grad():
    p = Tensor([1.0], requires_grad=True)
    y = ad.square(p)
    assert y.node is None
    with Tape() as tape:
        ad.square(Tensor([1.0]))
    assert len(tape) == 0


def test_tie_goes_to_first_operand():
    a = Tensor([1.0, 2.0], requires_grad=True)
    b = Tensor([1.0, 2.0], requires_grad=True)
    with Tape() as tape:
        loss = ad.sum_all(ad.maximum(a, b))
    g = ad.backward(tape, loss, wrt=[a, b])
    assert g[a].tolist() == [1.0, 1.0] and g[b].tolist() == [0.0, 0.0]


def test_relu_derivative_at_zero_is_one():
    a = Tensor([0.0, -1.0, 2.0], requires_grad=True)
    with Tape() as tape:
        loss = ad.sum_all(ad.relu(a))
    assert ad.backward(tape, loss, wrt=[a])[a].tolist() == [1.0, 0.0, 1.0]


def test_max_all_gradient_to_first_maximum():
    a = Tensor([[1.0, 5.0], [5.0, 0.0]], requires_grad=True)
    with Tape() as tape:
        loss = ad.max_all(a)
    assert ad.backward(tape, loss, wrt=[a])[a].tolist() == [[0.0, 1.0], [0.0, 0.0]]


def test_zero_gradient_when_loss_constant_in_param():
    a = Tensor([[1.0, 2.0]], requires_grad=True)
    with Tape() as tape:
        loss = ad.sum_all(ad.mul(a, 0.0))
    assert not ad.backward(tape, loss, wrt=[a])[a].any()


# ---------------------------------------------------------------------------
# determinism and replay


def _graph(rng):
    x = Tensor(rng.normal(size=(5, 3)), requires_grad=True)
    w = Tensor(rng.normal(size=(3, 4)), requires_grad=True)
    with Tape() as tape:
        h = ad.relu(ad.matmul(x, w))
        a = ad.softmax_rows(ad.matmul(h, ad.transpose(h)))
        loss = ad.sum_all(ad.square(ad.tanh(ad.matmul(a, h))))
    return tape, loss, (x, w)


def test_replay_reproduces_forward_bitwise():
    tape, _, _ = _graph(np.random.default_rng(3))
    replayed = tape.replay()
    assert len(replayed) == len(tape.nodes)
    for node, value in zip(tape.nodes, replayed):
        assert np.array_equal(node.output.data, value)


def test_tape_is_topologically_ordered():
    tape, _, _ = _graph(np.random.default_rng(4))
    seen = set()
    for node in tape.nodes:
        for t in node.inputs:
            if t.node is not None:
                assert id(t.node.output) in seen
        seen.add(id(node.output))


def test_forward_and_backward_bitwise_deterministic():
    t1, l1, p1 = _graph(np.random.default_rng(5))
    t2, l2, p2 = _graph(np.random.default_rng(5))
    assert l1.item() == l2.item()
    g1 = ad.backward(t1, l1, wrt=p1)
    g2 = ad.backward(t2, l2, wrt=p2)
    for a, b in zip(p1, p2):
        assert np.array_equal(g1[a], g2[b])


# ---------------------------------------------------------------------------
# finite-difference checks, 100 seeds per primitive


def _away_from_zero(rng, shape, margin=0.1):
    x = rng.normal(size=shape)
    return np.sign(x) * (margin + np.abs(x)) + (x == 0) * margin


def _shape(rng):
    return tuple(int(s) for s in rng.integers(1, 5, size=2))


def _binary(op, positive_b=False):
    def cases(seed):
        rng = np.random.default_rng(seed)
        s = _shape(rng)
        a = rng.normal(size=s)
        b = _away_from_zero(rng, s) if positive_b else rng.normal(size=s)
        return [(lambda x, y: op(x, y), a, b), (lambda x, y: op(x, y), a, b[:1, :1].copy())]
    return cases


def _max_cases(seed):
    rng = np.random.default_rng(seed)
    s = _shape(rng)
    a = rng.normal(size=s)
    b = a + _away_from_zero(rng, s)
    return [(ad.maximum, a, b), (lambda x, y: ad.maximum(x, y), a, np.array([[0.3]]))]


def _unary(op, domain=None):
    def cases(seed):
        rng = np.random.default_rng(seed)
        a = _away_from_zero(rng, _shape(rng)) if domain == "nonzero" else rng.normal(size=_shape(rng))
        return [(op, a)]
    return cases


def _matmul_cases(seed):
    rng = np.random.default_rng(seed)
    m, k, n = rng.integers(1, 5, size=3)
    return [(ad.matmul, rng.normal(size=(m, k)), rng.normal(size=(k, n)))]


def _softmax_cases(seed):
    rng = np.random.default_rng(seed)
    return [(ad.softmax_rows, rng.normal(size=_shape(rng)) * 3.0)]


def _structure_cases(seed):
    rng = np.random.default_rng(seed)
    a = rng.normal(size=_shape(rng))
    b = rng.normal(size=(a.shape[0], int(rng.integers(1, 4))))
    return [
        (ad.transpose, a),
        (lambda x: ad.reshape(x, (x.size,)), a),
        (lambda x, y: ad.concat([x, y], axis=1), a, b),
        (lambda x, y: ad.concat([ad.transpose(x), ad.transpose(y)], axis=0), a, b),
        (ad.sum_all, a),
    ]


def _max_all_cases(seed):
    rng = np.random.default_rng(seed)
    a = rng.normal(size=_shape(rng))
    flat = np.sort(a.reshape(-1))
    if flat.size > 1 and flat[-1] - flat[-2] < 1e-3:
        a.reshape(-1)[np.argmax(a)] += 1e-2
    return [(ad.max_all, a)]


PRIMITIVES = {
    "add": _binary(ad.add),
    "sub": _binary(ad.sub),
    "mul": _binary(ad.mul),
    "div": _binary(ad.div, positive_b=True),
    "maximum": _max_cases,
    "neg": _unary(ad.neg),
    "relu": _unary(ad.relu, domain="nonzero"),
    "tanh": _unary(ad.tanh),
    "square": _unary(ad.square),
    "reciprocal": _unary(ad.reciprocal, domain="nonzero"),
    "matmul": _matmul_cases,
    "softmax_rows": _softmax_cases,
    "structure": _structure_cases,
    "max_all": _max_all_cases,
}


@pytest.mark.parametrize("name", sorted(PRIMITIVES))
def test_primitive_gradients_match_finite_differences(name):
    failures = []
    for seed in SEEDS:
        for build, *arrays in PRIMITIVES[name](seed):
            bad = check_op(build, *arrays)
            if bad:
                failures.append((seed, bad))
    assert not failures, f"{name}: gradient mismatches at (seed, entries) {failures[:5]}"
