import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from contrastive_fairness import autodiff as ad
from contrastive_fairness.autodiff import OptimizerState, Tape, Tensor, adam_step, grad, grad_penalty
from contrastive_fairness.errors import ContractViolation, NumericalFailure

from .helpers import central_diff, rel_err


def _scalar(fn):
    """Wrap a tensor function so the finite-difference oracle sees plain floats."""
    def f(*arrays):
        return float(fn(*[Tensor(a) for a in arrays]).value)
    return f


def check(fn, *arrays, tol=1e-4, eps=1e-4):
    analytic = grad(fn, *arrays)
    numeric = central_diff(_scalar(fn), arrays, eps)
    for a, n in zip(analytic, numeric):
        assert rel_err(a, n) < tol


def test_square_derivative():
    (g,) = grad(lambda x: (x * x).sum(), np.array([3.0]))
    assert g[0] == 6.0


def test_sum_gives_ones():
    x = np.random.default_rng(0).normal(size=(4, 3))
    (g,) = grad(lambda t: t.sum(), x)
    assert np.array_equal(g, np.ones_like(x))


def _mlp(x, w1, b1, w2, b2, w3, b3):
    h = ad.tanh(x @ w1 + b1)
    h = ad.leaky_relu(h @ w2 + b2, 0.2)
    return (ad.sigmoid(h @ w3 + b3)).sum()


def test_three_layer_mlp_matches_finite_differences():
    rng = np.random.default_rng(1)
    arrays = [rng.normal(size=(5, 4)), rng.normal(size=(4, 6)), rng.normal(size=6),
              rng.normal(size=(6, 5)), rng.normal(size=5), rng.normal(size=(5, 1)), rng.normal(size=1)]
    check(_mlp, *arrays)


rng = np.random.default_rng(7)
A = rng.normal(size=(3, 4))
B = rng.normal(size=(3, 4))
POS = rng.uniform(0.5, 2.0, size=(3, 4))
PAD_PROJ = rng.normal(size=(3, 7))
AWAY = np.where(np.abs(A) < 0.1, A + 0.3, A)  # keep relu/abs inputs off the kink

PRIMITIVES = {
    "add_broadcast": (lambda a, b: (a + b).sum(), [A, B[0]]),
    "sub": (lambda a, b: ((a - b) * a).sum(), [A, B]),
    "mul": (lambda a, b: (a * b).sum(), [A, B]),
    "div": (lambda a, b: (a / b).sum(), [A, POS]),
    "pow3": (lambda a: (a ** 3).sum(), [A]),
    "exp": (lambda a: ad.exp(a).sum(), [A]),
    "log": (lambda a: ad.log(a).sum(), [POS]),
    "sqrt": (lambda a: ad.sqrt(a).sum(), [POS]),
    "tanh": (lambda a: ad.tanh(a).sum(), [A]),
    "sigmoid": (lambda a: ad.sigmoid(a).sum(), [A]),
    "softplus": (lambda a: ad.softplus(a).sum(), [A]),
    "relu": (lambda a: (ad.relu(a) * B).sum(), [AWAY]),
    "leaky_relu": (lambda a: (ad.leaky_relu(a, 0.1) * B).sum(), [AWAY]),
    "abs": (lambda a: (ad.absolute(a) * B).sum(), [AWAY]),
    "matmul": (lambda a, b: ((a @ b) ** 2).sum(), [A, B.T]),
    "batched_matmul": (lambda w, x: ((w @ x) ** 2).sum(), [A[:2], rng.normal(size=(3, 4, 5))]),
    "sum_axis": (lambda a: (a.sum(axis=0) ** 2).sum(), [A]),
    "mean_keepdims": (lambda a: ((a - a.mean(axis=1, keepdims=True)) ** 2).sum(), [A]),
    "reshape_transpose": (lambda a: (a.reshape(2, 6).T @ Tensor(B.reshape(2, 6))).sum(), [A]),
    "slice": (lambda a: (a[1:, ::2] ** 2).sum(), [A]),
    "concat": (lambda a, b: (ad.concat([a, b * 2.0], axis=1) ** 2).sum(), [A, B]),
    "pad": (lambda a: (ad.pad_last(a, 2, 1) * Tensor(PAD_PROJ)).sum(), [A]),
    "l2_norm": (lambda a: ad.l2_norm(a, axis=1).sum(), [A]),
    "l1_norm": (lambda a: ad.l1_norm(a), [AWAY]),
    "logsumexp": (lambda a: ad.logsumexp(a, axis=1).sum(), [A]),
    "safe_reciprocal": (lambda a: ad.safe_reciprocal(a).sum(), [POS]),
}


@pytest.mark.parametrize("name", sorted(PRIMITIVES))
def test_primitive_matches_finite_differences(name):
    fn, arrays = PRIMITIVES[name]
    check(fn, *arrays)


def test_conv_family_matches_finite_differences():
    r = np.random.default_rng(3)
    x = r.normal(size=(2, 3, 8))
    w = r.normal(size=(4, 3, 4))
    b = r.normal(size=4)
    proj = Tensor(r.normal(size=(2, 4, 4)))
    check(lambda x, w, b: (ad.conv1d(x, w, b, stride=2, padding=1) * proj).sum(), x, w, b)

    wt = r.normal(size=(3, 5, 4))
    proj_t = Tensor(r.normal(size=(2, 5, 16)))
    check(lambda x, w: (ad.conv_transpose1d(x, w, stride=2, padding=1) * proj_t).sum(), x, wt)

    g = r.normal(size=3)
    be = r.normal(size=3)
    proj_n = Tensor(r.normal(size=(2, 3, 8)))
    check(lambda x, g, be: (ad.instance_norm(x, g, be) * proj_n).sum(), x, g, be)


def test_unfold_and_fold_are_adjoint():
    r = np.random.default_rng(4)
    x = r.normal(size=(2, 3, 9))
    cols = ad.unfold1d(Tensor(x), 3, 2).value
    y = r.normal(size=cols.shape)
    back = ad.fold1d(Tensor(y), 3, 9, 3, 2).value
    assert np.isclose(np.sum(cols * y), np.sum(x * back), rtol=1e-12)


def test_conv1d_matches_direct_loop():
    r = np.random.default_rng(5)
    x = r.normal(size=(1, 2, 6))
    w = r.normal(size=(3, 2, 3))
    y = ad.conv1d(x, w, stride=1, padding=1).value
    xp = np.pad(x, ((0, 0), (0, 0), (1, 1)))
    ref = np.zeros((1, 3, 6))
    for o in range(3):
        for t in range(6):
            ref[0, o, t] = np.sum(w[o] * xp[0, :, t:t + 3])
    assert np.allclose(y, ref, atol=1e-12)


def test_second_order_through_recorded_backward():
    # f(x) = sum(x^3); grad = 3x^2; d/dx sum(grad) = 6x
    x0 = np.array([[0.5, -1.5, 2.0]])
    with Tape() as tape:
        x = Tensor(x0, requires_grad=True)
        (gx,) = tape.gradient((x ** 3).sum(), [x], create_graph=True)
        (ggx,) = tape.gradient(gx.sum(), [x])
    assert np.allclose(gx.value, 3 * x0 ** 2)
    assert np.allclose(ggx.value, 6 * x0)


def _linear_critic(params, x):
    return (x @ params["w"]).reshape(-1)


def test_penalty_zero_for_unit_norm_linear_critic():
    w = np.array([[0.6], [0.8]])
    pen, _ = grad_penalty(_linear_critic, {"w": w}, np.array([[1.0, 2.0]]))
    assert abs(pen) < 1e-15


def test_penalty_closed_form_for_norm_three():
    w = np.array([[1.0], [2.0], [2.0]])  # norm 3
    pen, g = grad_penalty(_linear_critic, {"w": w}, np.array([[0.3, -1.0, 4.0]]))
    assert pen == pytest.approx(4.0, abs=1e-12)
    assert np.allclose(g["w"], 4 * w / 3.0, atol=1e-12)


def test_penalty_zero_gradient_uses_zero_subgradient():
    w = np.zeros((3, 1))
    pen, g = grad_penalty(_linear_critic, {"w": w}, np.ones((2, 3)))
    assert pen == 1.0
    assert np.array_equal(g["w"], np.zeros_like(w))


def _two_layer_critic(params, x):
    h = ad.leaky_relu(x @ params["w1"] + params["b1"], 0.2)
    return (ad.tanh(h) @ params["w2"]).reshape(-1)


def test_penalty_gradient_matches_finite_differences():
    r = np.random.default_rng(11)
    params = {"w1": r.normal(size=(4, 6)), "b1": r.normal(size=6), "w2": r.normal(size=(6, 1))}
    x_hat = r.normal(size=(5, 4))
    _, analytic = grad_penalty(_two_layer_critic, params, x_hat)
    names = list(params)

    def pen(*arrays):
        return grad_penalty(_two_layer_critic, dict(zip(names, arrays)), x_hat)[0]

    numeric = central_diff(pen, [params[k] for k in names], eps=1e-5)
    for k, n in zip(names, numeric):
        assert rel_err(analytic[k], n) < 1e-3


def test_replay_is_bit_identical():
    r = np.random.default_rng(2)
    arrays = [r.normal(size=(5, 4)), r.normal(size=(4, 6)), r.normal(size=6),
              r.normal(size=(6, 5)), r.normal(size=5), r.normal(size=(5, 1)), r.normal(size=1)]
    g1 = grad(_mlp, *arrays)
    g2 = grad(_mlp, *arrays)
    assert all(np.array_equal(a, b) for a, b in zip(g1, g2))


def test_backward_does_not_mutate_forward_values():
    x0 = np.random.default_rng(0).normal(size=(3, 3))
    with Tape() as tape:
        x = Tensor(x0, requires_grad=True)
        y = ad.tanh(x @ x)
        before = [n.output.value.copy() for n in tape.nodes]
        tape.gradient(y.sum(), [x])
        after = [n.output.value for n in tape.nodes[: len(before)]]
    assert all(np.array_equal(a, b) for a, b in zip(before, after))


def test_nodes_only_point_backwards():
    with Tape() as tape:
        x = Tensor(np.ones((2, 2)), requires_grad=True)
        ad.penalty_term(tape, lambda p, z: (z @ p["w"]).reshape(-1), {"w": x}, np.ones((3, 2)))
    position = {id(n.output): n.index for n in tape.nodes}
    for node in tape.nodes:
        for t in node.inputs:
            assert position.get(id(t), -1) < node.index


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 10_000))
def test_gradient_is_linear(seed):
    r = np.random.default_rng(seed)
    x = r.normal(size=(3, 2))
    f = lambda t: (ad.tanh(t) * 2.0).sum()
    g = lambda t: ((t * t) @ Tensor(np.ones((2, 1)))).sum()
    (gf,) = grad(f, x)
    (gg,) = grad(g, x)
    (gsum,) = grad(lambda t: f(t) + g(t), x)
    assert np.allclose(gsum, gf + gg, atol=1e-12)


def test_non_finite_forward_names_the_node():
    with pytest.raises(NumericalFailure, match="log"):
        grad(lambda x: ad.log(x).sum(), np.array([[1.0, -1.0]]))


def test_non_scalar_output_rejected():
    with Tape() as tape:
        x = Tensor(np.ones((2, 2)), requires_grad=True)
        with pytest.raises(ContractViolation):
            tape.gradient(x * 2.0, [x])


def test_unrelated_input_gets_zero_gradient():
    with Tape() as tape:
        x = Tensor(np.ones(3), requires_grad=True)
        z = Tensor(np.ones(2), requires_grad=True)
        gz, = tape.gradient((x * x).sum(), [z])
    assert np.array_equal(gz.value, np.zeros(2))


# -- Adam ---------------------------------------------------------------------


def test_adam_zero_gradient_leaves_params():
    p = {"w": np.array([1.0, -2.0])}
    state = OptimizerState.fresh(p, lr=0.1)
    new, state = adam_step(state, p, {"w": np.zeros(2)})
    assert np.array_equal(new["w"], p["w"])
    assert state.step == 1


def test_adam_moves_against_constant_gradient():
    p = {"w": np.array([0.0])}
    state = OptimizerState.fresh(p, lr=0.01)
    for step in range(1, 51):
        p, state = adam_step(state, p, {"w": np.array([2.5])})
        assert state.step == step
    assert p["w"][0] < 0


def test_adam_first_step_has_learning_rate_magnitude():
    # m_hat = g, v_hat = g^2, so the step is lr * g / (|g| + eps).
    p = {"w": np.array([1.0, 1.0])}
    g = np.array([0.3, -4.0])
    state = OptimizerState.fresh(p, lr=1e-3)
    new, _ = adam_step(state, p, {"w": g})
    expected = p["w"] - 1e-3 * g / (np.abs(g) + 1e-8)
    assert np.allclose(new["w"], expected, rtol=0, atol=1e-15)
    assert np.allclose(np.abs(new["w"] - p["w"]), 1e-3, rtol=1e-6)


def test_adam_does_not_modify_inputs():
    p = {"w": np.array([1.0])}
    state = OptimizerState.fresh(p)
    adam_step(state, p, {"w": np.array([1.0])})
    assert p["w"][0] == 1.0 and state.step == 0 and state.m["w"][0] == 0.0


def test_adam_shape_mismatch():
    p = {"w": np.zeros(3)}
    with pytest.raises(ContractViolation):
        adam_step(OptimizerState.fresh(p), p, {"w": np.zeros(2)})
