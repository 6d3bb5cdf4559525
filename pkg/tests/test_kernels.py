"""Kernel catalog: evaluation, domain errors, square integrability."""

import math

import pytest

from vlift.kernels import (
    KernelDomainError,
    KernelSingularityError,
    Kernel,
    eval_kernel,
    exp_kernel,
    laplace_kernel,
    parse_kernel_spec,
    sqrt_kernel,
)


def test_sqrt_values():
    k = sqrt_kernel()
    assert eval_kernel(k, 0.25) == 0.5
    assert eval_kernel(k, 0.0) == 0.0


def test_laplace_value_at_zero():
    k = laplace_kernel(eps=0.5)
    assert eval_kernel(k, 0.0) == 2.0


def test_exp_values():
    k = exp_kernel(lam=2.0)
    assert eval_kernel(k, 0.5) == pytest.approx(math.exp(-1.0), rel=1e-15)


def test_domain_errors():
    k = sqrt_kernel(horizon=1.0)
    with pytest.raises(KernelDomainError):
        eval_kernel(k, -0.1)
    with pytest.raises(KernelDomainError):
        eval_kernel(k, 1.5)


def test_singularity_error():
    frac = Kernel(
        name="frac",
        evaluator=lambda t: t ** -0.25,
        horizon=1.0,
        singular_at_zero=True,
    )
    with pytest.raises(KernelSingularityError):
        eval_kernel(frac, 0.0)
    assert eval_kernel(frac, 0.5) == pytest.approx(0.5 ** -0.25)


@pytest.mark.parametrize(
    "kernel, exact",
    [
        (sqrt_kernel(), 0.5),                      # int_0^1 s ds
        (laplace_kernel(0.5), 1.0 / 0.5 - 1.0 / 1.5),  # int 1/(s+eps)^2
        (exp_kernel(1.0), 0.5 * (1.0 - math.exp(-2.0))),
    ],
)
def test_square_integrable(kernel, exact):
    assert kernel.square_integral() == pytest.approx(exact, rel=1e-9)


def test_antiderivatives_match_quadrature():
    from scipy.integrate import quad

    for k in (sqrt_kernel(), laplace_kernel(0.5), exp_kernel(2.0)):
        val, _ = quad(k.evaluator, 0.0, 0.8)
        assert k.antiderivative(0.8) == pytest.approx(val, rel=1e-9)


def test_parse_kernel_spec():
    assert parse_kernel_spec("sqrt").name == "sqrt"
    k = parse_kernel_spec("laplace(eps=0.25)")
    assert k.params["eps"] == 0.25
    k = parse_kernel_spec("exp(lambda=3.0)")
    assert k.params["lambda"] == 3.0
    with pytest.raises(ValueError):
        parse_kernel_spec("weibull(k=2)")
    with pytest.raises(ValueError):
        parse_kernel_spec("laplace(eps)")
