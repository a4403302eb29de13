import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from flowseg.autodiff import Tensor
from flowseg.flows import (
    FlowChain,
    PlanarParams,
    RadialParams,
    SingularJacobianError,
    chain_forward,
    constrain_planar,
    constrain_radial,
    numeric_invert,
    planar_forward,
    radial_forward,
    softplus_inverse,
    step_forward,
)
from conftest import check_gradients


def numeric_jacobian(f, z, eps=1e-5):
    """Central-difference Jacobian of a map R^L -> R^L."""
    z = np.asarray(z, dtype=np.float64)
    cols = []
    for i in range(z.size):
        e = np.zeros_like(z)
        e[i] = eps
        cols.append((f(z + e) - f(z - e)) / (2 * eps))
    return np.stack(cols, axis=1)


def numeric_logdet(step_or_chain, z):
    if isinstance(step_or_chain, FlowChain):
        f = lambda v: chain_forward(step_or_chain, v)[0].data
    else:
        f = lambda v: step_forward(step_or_chain, v)[0].data
    return math.log(abs(np.linalg.det(numeric_jacobian(f, z))))


def random_planar(rng, L, scale=1.5):
    return PlanarParams(rng.normal(0, scale, L), rng.normal(0, 1, L), rng.normal(0, 1, 1))


def random_radial(rng, L):
    return RadialParams(rng.normal(0, 1, L), rng.normal(0, 1, 1), rng.normal(0, 2, 1))


def planar_with_uhat(u_hat, w, b=0.0):
    """Raw planar params whose constrained u equals ``u_hat`` (w.u_hat > -1)."""
    u_hat, w = np.asarray(u_hat, float), np.asarray(w, float)
    target = float(w @ u_hat)
    raw_dot = softplus_inverse(target + 1.0)
    u_raw = u_hat + (raw_dot - target) * w / (w @ w)
    return PlanarParams(u_raw, w, np.array([b]))


# -- constraints -----------------------------------------------------------------


def test_constrain_planar_fixed_point():
    # t = -1 + softplus(t) solves to t = -log(e - 1)
    w = np.array([0.6, -0.8])
    t = -math.log(math.e - 1)
    u_raw = t * w / (w @ w) + np.array([0.8, 0.6])  # component orthogonal to w is free
    u_hat = constrain_planar(PlanarParams(u_raw, w, np.zeros(1)))[0].data
    np.testing.assert_allclose(u_hat, u_raw, atol=1e-12)


def test_constrain_planar_scalar_value():
    u_hat = constrain_planar(PlanarParams([1.0], [1.0], [0.0]))[0].item()
    assert u_hat == pytest.approx(-1 + math.log1p(math.e), abs=1e-12)
    assert u_hat == pytest.approx(0.31326, abs=1e-5)


def test_constrain_planar_extreme_raw():
    w = np.array([0.3, -1.2, 2.0])
    u_hat, w_t, _ = constrain_planar(PlanarParams(-10 * w / (w @ w), w, np.zeros(1)))
    wu = float(w @ u_hat.data)
    assert wu == pytest.approx(-1 + math.log1p(math.exp(-10)), rel=1e-10)
    assert wu == pytest.approx(-0.99995, abs=1e-5)
    assert wu > -1


def test_planar_rejects_zero_w():
    with pytest.raises(ValueError, match="non-zero"):
        PlanarParams(np.ones(2), np.zeros(2), np.zeros(1))


@settings(max_examples=300, deadline=None)
@given(
    st.lists(st.floats(-1e3, 1e3), min_size=3, max_size=3),
    st.lists(st.floats(-50, 50), min_size=3, max_size=3).filter(
        lambda w: sum(v * v for v in w) > 1e-6),
)
def test_planar_constraint_holds_for_any_raw(u, w):
    u_hat, w_t, _ = constrain_planar(PlanarParams(u, w, [0.0]))
    assert float(w_t.data @ u_hat.data) >= -1 - 1e-9


@settings(max_examples=300, deadline=None)
@given(st.floats(-700, 700), st.floats(-700, 700))
def test_radial_constraint_holds_for_any_raw(a, b):
    alpha, beta, _ = constrain_radial(RadialParams([0.0], [a], [b]))
    assert alpha.data[0] > 0
    assert beta.data[0] >= -alpha.data[0]


def test_constrain_radial_values():
    alpha, beta, _ = constrain_radial(RadialParams([0.0], [0.0], [0.0]))
    assert alpha.item() == pytest.approx(math.log(2), abs=1e-12)
    assert beta.item() == pytest.approx(0.0, abs=1e-15)
    alpha, beta, _ = constrain_radial(RadialParams([0.0], [0.0], [-800.0]))
    assert beta.item() == pytest.approx(-alpha.item())


# -- forward maps and log-dets -----------------------------------------------------


def test_planar_identity():
    step = PlanarParams.identity(3)
    z = np.array([0.3, -1.0, 2.0])
    z_out, ld = planar_forward(step, z)
    np.testing.assert_allclose(z_out.data, z, atol=1e-15)
    assert ld.item() == pytest.approx(0.0, abs=1e-15)


def test_planar_scalar_example():
    step = planar_with_uhat([1.0], [1.0])
    z_out, ld = planar_forward(step, [0.0])
    assert z_out.item() == pytest.approx(0.0, abs=1e-15)
    assert ld.item() == pytest.approx(math.log(2), abs=1e-12)
    assert numeric_logdet(step, np.array([0.0])) == pytest.approx(math.log(2), abs=1e-9)


def test_planar_singular_guard(monkeypatch):
    # unconstrained use: w.u_hat = -1 at tanh(0) = 0 makes the Jacobian singular
    from flowseg import flows

    monkeypatch.setattr(flows, "constrain_planar", lambda p: (Tensor([-1.0]), p.w, p.b))
    with pytest.raises(SingularJacobianError):
        flows.planar_forward(PlanarParams([1.0], [1.0], [0.0]), [0.0])


def test_radial_identity():
    step = RadialParams([0.5, 0.5], [0.3], [0.3])  # beta_raw == alpha_raw -> beta = 0
    z = np.array([1.0, -2.0])
    z_out, ld = radial_forward(step, z)
    np.testing.assert_allclose(z_out.data, z, atol=1e-15)
    assert ld.item() == pytest.approx(0.0, abs=1e-15)


def test_radial_scalar_example():
    step = RadialParams([0.0], [softplus_inverse(1.0)], [softplus_inverse(2.0)])
    z_out, ld = radial_forward(step, [1.0])
    assert z_out.item() == pytest.approx(1.5, abs=1e-12)
    assert ld.item() == pytest.approx(math.log(1.25), abs=1e-12)
    assert numeric_logdet(step, np.array([1.0])) == pytest.approx(math.log(1.25), abs=1e-9)


@pytest.mark.parametrize("L", [1, 2, 6])
def test_radial_at_reference_point(L):
    rng = np.random.default_rng(L)
    step = RadialParams(rng.normal(size=L), rng.normal(size=1), rng.uniform(-1, 2, 1))
    alpha, beta, x0 = (t.data for t in constrain_radial(step))
    z_out, ld = radial_forward(step, x0.copy())
    np.testing.assert_array_equal(z_out.data, x0)
    expected = L * math.log(1 + beta[0] / alpha[0])
    assert ld.item() == pytest.approx(expected, abs=1e-12)
    # the limit agrees with the numerical Jacobian just off the reference point;
    # the log-det is Lipschitz in r, so the gap shrinks with the offset
    direction = rng.normal(size=L)
    direction /= np.linalg.norm(direction)
    f = lambda v: radial_forward(step, v)[0].data
    gaps = []
    for r in (1e-2, 1e-3, 1e-4):
        jac = numeric_jacobian(f, x0 + r * direction, eps=r * 1e-3)
        gaps.append(abs(math.log(abs(np.linalg.det(jac))) - expected))
    assert gaps[-1] < 1e-3
    assert gaps[0] > gaps[1] > gaps[2]


@pytest.mark.parametrize("kind", ["planar", "radial"])
@pytest.mark.parametrize("L", [1, 2, 6])
def test_logdet_matches_numeric_jacobian(kind, L):
    rng = np.random.default_rng(100 * L + len(kind))
    make = random_planar if kind == "planar" else random_radial
    for _ in range(30):
        step = make(rng, L)
        z = rng.normal(0, 1.5, L)
        ld = step_forward(step, z)[1].item()
        assert abs(math.expm1(ld - numeric_logdet(step, z))) <= 1e-6


def test_chain_empty_and_identity():
    z0 = np.array([0.1, 0.2])
    zk, ld = chain_forward(FlowChain([]), z0)
    np.testing.assert_array_equal(zk.data, z0)
    assert ld.item() == 0.0
    zk, ld = chain_forward(FlowChain([PlanarParams.identity(2), PlanarParams.identity(2)]), z0)
    np.testing.assert_allclose(zk.data, z0, atol=1e-15)
    assert ld.item() == pytest.approx(0.0, abs=1e-15)


@pytest.mark.parametrize("kind", ["planar", "radial"])
def test_chain_logdet_matches_composed_jacobian(kind):
    rng = np.random.default_rng(5)
    make = random_planar if kind == "planar" else random_radial
    for K in (2, 4):
        for _ in range(10):
            chain = FlowChain([make(rng, 3) for _ in range(K)])
            z = rng.normal(size=3)
            ld = chain_forward(chain, z)[1].item()
            assert abs(math.expm1(ld - numeric_logdet(chain, z))) <= 1e-6


def test_chain_logdet_additive():
    rng = np.random.default_rng(9)
    steps = [random_planar(rng, 4) for _ in range(4)]
    z0 = rng.normal(size=4)
    zk, total = chain_forward(FlowChain(steps), z0)
    for cut in range(5):
        zmid, first = chain_forward(FlowChain(steps[:cut]), z0)
        zend, second = chain_forward(FlowChain(steps[cut:]), zmid)
        np.testing.assert_allclose(zend.data, zk.data, atol=1e-14)
        assert first.item() + second.item() == pytest.approx(total.item(), abs=1e-12)


def test_chain_must_be_homogeneous():
    with pytest.raises(ValueError, match="homogeneous"):
        FlowChain([PlanarParams.identity(2), RadialParams.identity(2)])


def test_batched_params_match_per_example():
    rng = np.random.default_rng(21)
    B, L = 5, 3
    u, w, b, z = rng.normal(size=(B, L)), rng.normal(size=(B, L)), rng.normal(size=(B, 1)), rng.normal(size=(B, L))
    zb, ldb = planar_forward(PlanarParams(u, w, b), z)
    for i in range(B):
        zi, ldi = planar_forward(PlanarParams(u[i], w[i], b[i]), z[i])
        np.testing.assert_allclose(zb.data[i], zi.data, atol=1e-14)
        assert ldb.data[i] == pytest.approx(ldi.item(), abs=1e-14)


# -- gradients -------------------------------------------------------------------------


@pytest.mark.parametrize("kind", ["planar", "radial"])
def test_flow_gradients_match_finite_differences(kind):
    rng = np.random.default_rng(33 + len(kind))
    worst = -np.inf
    for _ in range(100):
        L = int(rng.integers(1, 5))
        z = Tensor(rng.normal(size=L), requires_grad=True)
        if kind == "planar":
            p = PlanarParams(Tensor(rng.normal(0, 1.5, L), requires_grad=True),
                             Tensor(rng.normal(size=L), requires_grad=True),
                             Tensor(rng.normal(size=1), requires_grad=True))
            leaves = [p.u_raw, p.w, p.b, z]
            fwd = planar_forward
        else:
            p = RadialParams(Tensor(rng.normal(size=L), requires_grad=True),
                             Tensor(rng.normal(size=1), requires_grad=True),
                             Tensor(rng.normal(0, 2, 1), requires_grad=True))
            leaves = [p.z0_ref, p.alpha_raw, p.beta_raw, z]
            fwd = radial_forward
        c = Tensor(rng.normal(size=L))

        def f():
            z_out, ld = fwd(p, z)
            return (z_out * c).sum() + ld

        worst = max(worst, check_gradients(f, leaves))
    assert worst <= 0


# -- inversion -------------------------------------------------------------------------


def test_invert_identity():
    z = np.array([0.4, -0.2])
    np.testing.assert_allclose(numeric_invert(PlanarParams.identity(2), z), z, atol=1e-15)
    np.testing.assert_allclose(numeric_invert(RadialParams.identity(2), z), z, atol=1e-15)


@pytest.mark.parametrize("kind", ["planar", "radial"])
def test_round_trip(kind):
    rng = np.random.default_rng(77)
    make = random_planar if kind == "planar" else random_radial
    for _ in range(100):
        step = make(rng, 3)
        z = rng.normal(0, 2, 3)
        back = numeric_invert(step, step_forward(step, z)[0])
        assert np.linalg.norm(back - z) <= 1e-6


def test_round_trip_near_planar_boundary():
    rng = np.random.default_rng(78)
    for _ in range(100):
        w = rng.normal(size=3)
        # w.u_hat = -1 + softplus(-12): almost non-invertible
        step = PlanarParams(-12 * w / (w @ w), w, rng.normal(size=1) * 0.1)
        z = rng.normal(0, 1, 3)
        back = numeric_invert(step, step_forward(step, z)[0])
        assert np.linalg.norm(back - z) <= 1e-6


def test_round_trip_near_radial_boundary():
    rng = np.random.default_rng(79)
    for _ in range(100):
        step = RadialParams(rng.normal(size=2), rng.normal(size=1), [-12.0])
        z = rng.normal(0, 1, 2)
        back = numeric_invert(step, step_forward(step, z)[0])
        assert np.linalg.norm(back - z) <= 1e-6
