import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from chroma import tensor as T
from chroma.losses import (
    LOG_FLOOR,
    adversarial_loss,
    discriminator_loss,
    generator_loss,
    l2_loss,
    minibatch_loss,
)
from chroma.optim import SGDMomentum, sgd_momentum_step
from chroma.tensor import DimensionError, PreconditionError, Tensor


@pytest.fixture(autouse=True)
def f64():
    with T.precision("float64"):
        yield


def scores(*p):
    return Tensor(np.array(p, dtype=float).reshape(-1, 1))


def test_l2_hand_value():
    pred = Tensor(np.zeros((1, 1, 2, 2)))
    target = Tensor(np.array([[[[0.5, 0.0], [0.0, 0.0]]]]))
    # one pixel off by 0.5 out of four: 0.25 / 4
    assert l2_loss(pred, target).data.tolist() == [0.0625]
    target = Tensor(np.full((1, 1, 2, 2), 0.5))
    assert l2_loss(pred, target).item() == pytest.approx(0.25)


def test_l2_is_per_example():
    pred = Tensor(np.zeros((2, 1, 2, 2)))
    target = Tensor(np.stack([np.zeros((1, 2, 2)), np.ones((1, 2, 2))]))
    assert l2_loss(pred, target).data.tolist() == [0.0, 1.0]


def test_l2_shape_mismatch():
    with pytest.raises(DimensionError):
        l2_loss(Tensor(np.zeros((1, 1, 2, 2))), Tensor(np.zeros((1, 1, 2, 3))))


def test_minibatch_mean():
    assert minibatch_loss(Tensor([0.1, 0.2, 0.3, 0.4])).item() == pytest.approx(0.25)
    assert minibatch_loss(Tensor([0.0, 0.25])).item() == 0.125
    with pytest.raises(PreconditionError):
        minibatch_loss(Tensor(np.zeros(0)))


@given(st.lists(st.floats(0, 10), min_size=1, max_size=20))
def test_minibatch_mean_property(xs):
    assert minibatch_loss(Tensor(xs)).item() == pytest.approx(sum(xs) / len(xs), rel=1e-12, abs=1e-12)


def test_discriminator_loss_at_half():
    assert discriminator_loss(scores(0.5), scores(0.5)).item() == pytest.approx(2 * math.log(2), abs=1e-6)


def test_discriminator_loss_saturation_is_finite():
    v = discriminator_loss(scores(0.0), scores(0.0)).item()
    assert v == pytest.approx(-math.log(LOG_FLOOR), rel=1e-9)
    assert v == pytest.approx(27.631, abs=1e-3)


def test_discriminator_loss_batch_average():
    v = discriminator_loss(scores(0.5, 0.9), scores(0.5, 0.1)).item()
    expect = (2 * math.log(2) + -2 * math.log(0.9)) / 2
    assert v == pytest.approx(expect, abs=1e-12)


def test_adversarial_term():
    assert adversarial_loss(scores(0.5)).item() == pytest.approx(math.log(2), abs=1e-12)


def test_generator_loss_reduces_to_regression():
    rng = np.random.default_rng(0)
    pred, target = Tensor(rng.normal(size=(3, 1, 4, 4))), Tensor(rng.normal(size=(3, 1, 4, 4)))
    regression = minibatch_loss(l2_loss(pred, target)).item()
    assert generator_loss(pred, target, None, 0.0).item() == regression
    assert generator_loss(pred, target, scores(0.1, 0.2, 0.3), 0.0).item() == regression


def test_generator_loss_combines_terms():
    pred, target = Tensor(np.zeros((1, 1, 2, 2))), Tensor(np.full((1, 1, 2, 2), 0.5))
    v = generator_loss(pred, target, scores(0.5), 0.1).item()
    assert v == pytest.approx(0.25 + 0.1 * math.log(2), abs=1e-12)
    with pytest.raises(PreconditionError):
        generator_loss(pred, target, None, 0.1)


def test_gradient_of_discriminator_loss():
    d_real = Tensor(np.array([[0.7]]), requires_grad=True)
    d_fake = Tensor(np.array([[0.2]]), requires_grad=True)
    T.backward(discriminator_loss(d_real, d_fake))
    assert d_real.grad.item() == pytest.approx(-1 / 0.7)
    assert d_fake.grad.item() == pytest.approx(1 / 0.8)


# ---------------------------------------------------------------- optimizer


def _param(x, g):
    p = Tensor(np.array(x, dtype=float), requires_grad=True, name="p")
    p.grad = np.array(g, dtype=float)
    return p


def test_sgd_without_momentum():
    p = _param([1.0], [0.5])
    vel = {"p": np.zeros(1)}
    sgd_momentum_step({"p": p}, vel, 0.1, 0.0)
    assert p.data.tolist() == [pytest.approx(0.95)]


def test_momentum_accumulates():
    p = _param([0.0], [1.0])
    vel = {"p": np.zeros(1)}
    for _ in range(3):
        sgd_momentum_step({"p": p}, vel, 1.0, 0.5)
    # velocities 1, 1.5, 1.75
    assert vel["p"].tolist() == [1.75]
    assert p.data.tolist() == [-4.25]


def test_velocity_decays_geometrically_without_gradient():
    p = _param([0.0], [1.0])
    vel = {"p": np.zeros(1)}
    sgd_momentum_step({"p": p}, vel, 0.1, 0.9)
    p.grad = None
    seen = []
    for _ in range(5):
        sgd_momentum_step({"p": p}, vel, 0.1, 0.9)
        seen.append(vel["p"][0])
    np.testing.assert_allclose(seen, [0.9 ** k for k in range(1, 6)])


def test_zero_learning_rate_freezes_parameters():
    p = _param([2.0, -1.0], [3.0, 4.0])
    vel = {"p": np.zeros(2)}
    sgd_momentum_step({"p": p}, vel, 0.0, 0.9)
    assert p.data.tolist() == [2.0, -1.0]


def test_quadratic_descent_monotone():
    p = Tensor(np.array([5.0, -3.0]), requires_grad=True, name="p")
    # overdamped: x_{k+1} = 1.1 x_k - 0.2 x_{k-1} has real roots 0.87 and 0.23
    opt = SGDMomentum({"p": p}, lr=0.05, momentum=0.2)
    values = []
    for _ in range(30):
        opt.zero_grad()
        loss = T.sum_all(T.square(p))
        values.append(loss.item())
        T.backward(loss)
        opt.step()
    assert all(b < a for a, b in zip(values, values[1:]))
    assert values[-1] < 1e-3 * values[0]


def test_optimizer_velocity_shapes():
    a = Tensor(np.zeros((2, 3)), requires_grad=True)
    opt = SGDMomentum({"a": a})
    assert opt.velocity["a"].shape == (2, 3) and not opt.velocity["a"].any()
