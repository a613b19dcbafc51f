import numpy as np
import pytest
import sympy as sp
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from ddfield.jets import (
    Jet2,
    NonFiniteLoss,
    ParamTape,
    UnsupportedPrimitive,
    eval_with_jets,
    gradient_check,
    param_gradient,
    stop_gradient,
)

F64 = torch.float64


def e(k):
    v = torch.zeros(4, dtype=F64)
    v[k] = 1.0
    return v


def coord(jet, k):
    return jet.select(slice(k, k + 1))


# -- symbolic oracle ---------------------------------------------------------
# expected first/mixed derivatives for a nontrivial composite computed with sympy

X, Y, Z, W = sp.symbols("x y z w")
SYM_EXPR = sp.sin(X) * W + sp.exp(0.3 * Y) * sp.tanh(Z) + sp.sqrt(X**2 + W**2 + 2)


def sym_field(q):
    x, y, z, w = (coord(q, k) for k in range(4))
    return x.sin() * w + (y * 0.3).exp() * z.tanh() + (x.square() + w.square() + 2.0).sqrt()


@pytest.mark.parametrize("p", [(0.0, 0.0, 0.0, 0.0), (0.7, -0.4, 1.1, 0.5), (-1.2, 0.8, -0.3, 2.0)])
def test_jets_match_symbolic_oracle(p):
    subs = dict(zip((X, Y, Z, W), p))
    pairs = [(e(0), e(3)), (e(2), e(2))]
    jet = eval_with_jets(sym_field, torch.tensor(p, dtype=F64), second_dirs=pairs)
    for k, s in enumerate((X, Y, Z, W)):
        want = float(sp.diff(SYM_EXPR, s).evalf(subs=subs))
        assert jet.grad[k, 0].item() == pytest.approx(want, abs=1e-10)
    assert jet.mixed[0].item() == pytest.approx(float(sp.diff(SYM_EXPR, X, W).evalf(subs=subs)), abs=1e-10)
    assert jet.mixed[1].item() == pytest.approx(float(sp.diff(SYM_EXPR, Z, Z).evalf(subs=subs)), abs=1e-10)


def test_polynomial_rule():
    jet = eval_with_jets(lambda q: coord(q, 0).square(), torch.tensor([3.0, 0, 0, 0], dtype=F64))
    assert jet.value.item() == 9.0
    assert torch.equal(jet.grad.squeeze(-1), torch.tensor([6.0, 0, 0, 0], dtype=F64))


def test_constant_has_zero_jet():
    p = torch.tensor([1.0, 2.0, 3.0, 4.0], dtype=F64)
    jet = eval_with_jets(lambda q: Jet2.const(torch.tensor([5.0], dtype=F64), q), p,
                         second_dirs=[(e(0), e(3))])
    assert torch.all(jet.grad == 0)
    assert torch.all(jet.mixed[0] == 0)


def test_mixed_sin_times_w_axis():
    jet = eval_with_jets(
        lambda q: coord(q, 0).sin() * coord(q, 3),
        torch.zeros(4, dtype=F64),
        second_dirs=[(e(0), e(3))],
    )
    assert jet.mixed[0].item() == pytest.approx(1.0, abs=1e-12)


@settings(max_examples=40, deadline=None)
@given(st.lists(st.floats(-1.5, 1.5), min_size=4, max_size=4))
def test_product_and_chain_rule_against_fd(vals):
    p = torch.tensor(vals, dtype=F64)

    def f(q):
        return (coord(q, 0) * coord(q, 1)).sin() + (coord(q, 2) * 0.5).exp() * coord(q, 3).cos()

    rep = gradient_check(f, p, h=1e-5)
    assert rep["max_rel_err"] < 1e-6


@settings(max_examples=30, deadline=None)
@given(st.lists(st.floats(-1.2, 1.2), min_size=4, max_size=4),
       st.integers(0, 3), st.integers(0, 3))
def test_mixed_second_derivative_matches_fd(vals, i, k):
    p = torch.tensor(vals, dtype=F64)
    pair = (e(i), e(k))

    def f(q):
        return (coord(q, 0) + coord(q, 1) * coord(q, 2)).tanh_exp() + coord(q, 3).sigmoid() * coord(q, 0)

    jet = eval_with_jets(f, p, second_dirs=[pair])
    h = 1e-4

    def val(q):
        return f(Jet2.seed(q)).value.item()

    fd = (
        val(p + h * (e(i) + e(k))) - val(p + h * (e(i) - e(k)))
        - val(p - h * (e(i) - e(k))) + val(p - h * (e(i) + e(k)))
    ) / (4 * h * h)
    assert jet.mixed[0].item() == pytest.approx(fd, rel=1e-3, abs=1e-5)


def test_batched_jets_match_loop():
    torch.manual_seed(0)
    P = torch.randn(16, 4, dtype=F64)

    def f(q):
        return (coord(q, 0).square() + coord(q, 1).sin() * coord(q, 3)).softplus()

    batched = eval_with_jets(f, P, second_dirs=[(e(1), e(3))])
    for r in range(P.shape[0]):
        single = eval_with_jets(f, P[r], second_dirs=[(e(1), e(3))])
        assert torch.allclose(batched.value[r], single.value)
        assert torch.allclose(batched.grad[r], single.grad)
        assert torch.allclose(batched.mixed[0][r], single.mixed[0])


def test_norm_and_affine():
    p = torch.tensor([0.3, -0.4, 1.2, 0.0], dtype=F64)
    rep = gradient_check(lambda q: q.select(slice(0, 3)).norm(), p, h=1e-6)
    assert rep["max_rel_err"] < 1e-7
    W = torch.randn(4, 5, dtype=F64)
    b = torch.randn(5, dtype=F64)
    rep = gradient_check(lambda q: q.affine(W, b).tanh().sum_features(), p, h=1e-6)
    assert rep["max_rel_err"] < 1e-7


def test_unsupported_primitive_is_named():
    p = torch.zeros(4, dtype=F64)
    with pytest.raises(UnsupportedPrimitive, match="relu"):
        eval_with_jets(lambda q: torch.relu(q), p)


def test_gradient_check_linear_is_exact():
    rep = gradient_check(
        lambda q: q.affine(torch.tensor([[1.0], [2.0], [3.0], [4.0]], dtype=F64)),
        torch.tensor([0.1, 0.2, 0.3, 0.4], dtype=F64),
        h=1e-4,
    )
    assert rep["max_rel_err"] < 1e-10


def test_gradient_check_flags_kink():
    # |x| at 0: central differences see slope 0, the jet reports the branch slope
    def f(q):
        return (coord(q, 0).square() + 1e-30).sqrt()

    rep = gradient_check(f, torch.tensor([1e-9, 0, 0, 0], dtype=F64), h=1e-4)
    assert rep["max_rel_err"] > 0.5  # diagnostic, not a failure


def test_gradient_check_rejects_bad_step():
    with pytest.raises(ValueError):
        gradient_check(lambda q: q, torch.zeros(4, dtype=F64), h=0.0)


# -- parameter tape ----------------------------------------------------------


def test_param_gradient_quadratic_and_unused():
    tape = ParamTape(dtype=F64)
    th0 = tape.parameter("th0", np.array(2.0))
    tape.parameter("th1", np.array(7.0))
    g = param_gradient(th0 * th0, tape)
    assert g[0] == pytest.approx(4.0)
    assert g[1] == 0.0


def test_param_gradient_rejects_nonfinite():
    tape = ParamTape(dtype=F64)
    th = tape.parameter("th", np.array(0.0))
    with pytest.raises(NonFiniteLoss):
        param_gradient(1.0 / th, tape)


def test_param_gradient_matches_finite_differences():
    rng = np.random.default_rng(3)
    tape = ParamTape(dtype=F64)
    w1 = tape.parameter("w1", rng.standard_normal((4, 8)) * 0.5)
    b1 = tape.parameter("b1", rng.standard_normal(8) * 0.1)
    w2 = tape.parameter("w2", rng.standard_normal((8, 1)) * 0.5)
    x = torch.tensor(rng.standard_normal((6, 4)), dtype=F64)

    def loss_from(tape_):
        h = (x @ tape_["w1"] + tape_["b1"]).tanh()
        return (h @ tape_["w2"]).square().mean()

    g = param_gradient(loss_from(tape), tape)
    theta = tape.flat()
    h = 1e-4
    for i in rng.choice(theta.size, size=12, replace=False):
        up, dn = theta.copy(), theta.copy()
        up[i] += h
        dn[i] -= h
        tape.load_flat(up)
        lp = loss_from(tape).item()
        tape.load_flat(dn)
        lm = loss_from(tape).item()
        tape.load_flat(theta)
        fd = (lp - lm) / (2 * h)
        assert g[i] == pytest.approx(fd, rel=1e-4, abs=1e-8)


def test_tape_replay_bit_identical():
    tape = ParamTape(dtype=F64)
    w = tape.parameter("w", np.linspace(-1, 1, 12).reshape(3, 4))
    x = torch.arange(12, dtype=F64).reshape(4, 3) / 7.0

    def fwd():
        return ((x @ w).tanh().sum()).detach().clone()

    first = tape.record(fwd)
    second = tape.replay()[0]
    assert torch.equal(first, second)


def test_tape_flat_roundtrip_and_manifest():
    tape = ParamTape()
    tape.parameter("a", np.ones((2, 3)))
    tape.parameter("b", np.zeros(5))
    assert tape.manifest() == [("a", (2, 3)), ("b", (5,))]
    v = tape.flat()
    v2 = v.copy()
    v2[0] = 9.0
    tape.load_flat(v2)
    assert tape.flat()[0] == 9.0
    with pytest.raises(ValueError):
        tape.load_flat(np.zeros(3))


# -- stop_gradient -----------------------------------------------------------


def test_stop_gradient_detached_factor():
    tape = ParamTape(dtype=F64)
    th = tape.parameter("th", np.array(3.0))
    g = param_gradient(stop_gradient(th) * th, tape)
    assert g[0] == pytest.approx(3.0)
    g2 = param_gradient(stop_gradient(th * th) + 0.0 * th, tape)
    assert g2[0] == 0.0


def test_stop_gradient_is_value_identity():
    tape = ParamTape(dtype=F64)
    th = tape.parameter("th", np.array([0.2, -0.7]))
    jet = Jet2.seed(torch.zeros(4, dtype=F64), pairs=((e(0), e(3)),))
    jet = jet.affine(th.expand(4, 2) * torch.ones(4, 2, dtype=F64))
    frozen = stop_gradient(jet)
    assert torch.equal(frozen.value, jet.value)
    assert torch.equal(frozen.grad, jet.grad)
    assert not frozen.value.requires_grad


def test_stop_gradient_beta_weight_pattern():
    # beta-style detached weight: d/dθ [sg(β(θ)) · r(θ)²] == β̄ · d/dθ r(θ)²
    tape = ParamTape(dtype=F64)
    th = tape.parameter("th", np.array(0.8))
    beta = th * th * 3.0
    r = (th - 2.0)
    g = param_gradient(stop_gradient(beta) * r * r, tape)
    want = float(beta.detach()) * 2.0 * float(r.detach())
    assert g[0] == pytest.approx(want, rel=1e-12)
