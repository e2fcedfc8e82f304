import numpy as np
import pytest

from gptqlab.optim import DEFAULTS, KINDS, OptimizerError, new_optimizer


def test_adam_initial_state():
    opt = new_optimizer("adam", (3,))
    assert opt.t == 0
    assert not opt.state["m"].any() and not opt.state["v"].any()


def test_unknown_kind_rejected():
    with pytest.raises(OptimizerError, match="lion"):
        new_optimizer("lion", (1,))


def test_unknown_hyperparameter_rejected():
    with pytest.raises(OptimizerError):
        new_optimizer("sgd", (1,), {"beta1": 0.5})


def test_adamax_layout():
    opt = new_optimizer("adamax", (2,))
    assert "u" in opt.state and "v" not in opt.state


@pytest.mark.parametrize("kind", KINDS)
def test_accumulators_shaped_like_params(kind):
    opt = new_optimizer(kind, (2, 3))
    assert all(a.shape == (2, 3) for a in opt.state.values())


def test_sgd_step():
    opt = new_optimizer("sgd", (1,), {"lr": 0.1})
    assert opt.step(np.array([1.0]), np.array([1.0]))[0] == pytest.approx(0.9)


def test_adam_first_step_is_lr():
    opt = new_optimizer("adam", (1,))
    out = opt.step(np.array([0.0]), np.array([0.5]))
    assert out[0] == pytest.approx(-DEFAULTS["adam"]["lr"], rel=1e-7)


def test_adamax_first_step_is_sign():
    opt = new_optimizer("adamax", (1,))
    out = opt.step(np.array([1.0]), np.array([-0.5]))
    assert out[0] == pytest.approx(1.0 + DEFAULTS["adamax"]["lr"], rel=1e-9)


def test_adamax_infinity_norm():
    opt = new_optimizer("adamax", (1,))
    opt.step(np.array([0.0]), np.array([2.0]))
    opt.step(np.array([0.0]), np.array([0.1]))
    assert opt.state["u"][0] == pytest.approx(2.0 * 0.999)


@pytest.mark.parametrize("kind", KINDS)
def test_nonfinite_gradient_skips_step(kind):
    opt = new_optimizer(kind, (2,))
    p = np.array([1.0, 2.0])
    out = opt.step(p, np.array([np.nan, 1.0]))
    np.testing.assert_array_equal(out, p)
    assert opt.skipped == 1 and opt.t == 0


@pytest.mark.parametrize("kind", [k for k in KINDS if k != "adamw"])
def test_zero_gradients_never_move(kind):
    opt = new_optimizer(kind, (3,))
    p = np.array([1.0, -2.0, 0.5])
    for _ in range(50):
        out = opt.step(p, np.zeros(3))
        assert out.tobytes() == p.tobytes()


def test_adamw_zero_gradient_is_pure_decay():
    opt = new_optimizer("adamw", (2,))
    p = np.array([1.0, -3.0])
    lr, wd = DEFAULTS["adamw"]["lr"], DEFAULTS["adamw"]["weight_decay"]
    expected = p.copy()
    for _ in range(10):
        p = opt.step(p, np.zeros(2))
        expected = expected - lr * wd * expected
    assert p.tobytes() == expected.tobytes()


@pytest.mark.parametrize("kind", KINDS)
def test_quadratic_smoke(kind):
    opt = new_optimizer(kind, (1,))
    theta = np.array([1.0])
    for _ in range(2000):
        theta = opt.step(theta, 2 * theta)
    assert theta[0] ** 2 < 1e-2


@pytest.mark.parametrize("kind", KINDS)
def test_step_is_elementwise_and_order_free(kind, rng):
    # stepping a permuted tensor gives the permuted result
    p = rng.standard_normal(6)
    perm = rng.permutation(6)
    a, b = new_optimizer(kind, (6,)), new_optimizer(kind, (6,))
    pa, pb = p.copy(), p[perm].copy()
    for _ in range(5):
        g = rng.standard_normal(6)
        pa = a.step(pa, g)
        pb = b.step(pb, g[perm])
    assert pa[perm].tobytes() == pb.tobytes()


@pytest.mark.parametrize("kind", KINDS)
def test_against_reference_framework(kind, rng):
    torch = pytest.importorskip("torch")
    h = DEFAULTS[kind]
    p0 = rng.standard_normal(5)
    grads = rng.standard_normal((30, 5))
    param = torch.nn.Parameter(torch.tensor(p0, dtype=torch.float64))
    make = {
        "sgd": lambda: torch.optim.SGD([param], lr=h["lr"], momentum=h["momentum"]),
        "nesterov": lambda: torch.optim.SGD([param], lr=h["lr"], momentum=h["momentum"], nesterov=True),
        "adam": lambda: torch.optim.Adam([param], lr=h["lr"], betas=(h["beta1"], h["beta2"]), eps=h["eps"]),
        "adamw": lambda: torch.optim.AdamW(
            [param], lr=h["lr"], betas=(h["beta1"], h["beta2"]), eps=h["eps"], weight_decay=h["weight_decay"]
        ),
        "adamax": lambda: torch.optim.Adamax([param], lr=h["lr"], betas=(h["beta1"], h["beta2"]), eps=h["eps"]),
        "adagrad": lambda: torch.optim.Adagrad([param], lr=h["lr"], eps=h["eps"]),
        "adadelta": lambda: torch.optim.Adadelta([param], lr=h["lr"], rho=h["rho"], eps=h["eps"]),
        "rmsprop": lambda: torch.optim.RMSprop([param], lr=h["lr"], alpha=h["alpha"], eps=h["eps"]),
    }
    ref = make[kind]()
    opt = new_optimizer(kind, (5,))
    p = p0.copy()
    for g in grads:
        ref.zero_grad()
        param.grad = torch.tensor(g, dtype=torch.float64)
        ref.step()
        p = opt.step(p, g)
    np.testing.assert_allclose(p, param.detach().numpy(), rtol=1e-7, atol=1e-9)
