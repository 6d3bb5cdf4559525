"""Convolution kernel catalog.

A kernel K drives the memory of the Volterra dynamics through the
convolution X(t) = x0(t) + int_0^t K(t-s) dV(s).  Every catalog kernel is
square integrable on (0, T] and carries, when available, a closed-form
antiderivative int_0^t K(s) ds used by test oracles and cost bounds.

Catalog entries are addressable by name in config files:

* ``sqrt``             K(t) = sqrt(t)
* ``laplace(eps=...)`` K(t) = 1 / (t + eps)
* ``exp(lambda=...)``  K(t) = exp(-lambda * t)
"""

from __future__ import annotations

import math
import re
from dataclasses import dataclass, field
from typing import Callable, Optional

from scipy.integrate import quad


class KernelDomainError(ValueError):
    """Evaluation time outside [0, horizon]."""


class KernelSingularityError(ValueError):
    """Evaluation at t = 0 for a kernel singular there."""


@dataclass(frozen=True)
class Kernel:
    """A scalar convolution kernel on [0, horizon].

    Parameters
    ----------
    name : str
        Catalog name, echoed in lift dumps and manifests.
    evaluator : callable
        t -> K(t), finite on (0, horizon].
    horizon : float
        Right end of the validity window.
    singular_at_zero : bool
        If True, K(0) is not finite and evaluation at 0 raises.
    antiderivative : callable, optional
        t -> int_0^t K(s) ds in closed form, when known.
    laplace_density : callable, optional
        Density m with K(t) = int_0^inf exp(-x t) m(x) dx, when K is a
        Laplace transform (enables the exponential-sum lift).
    laplace_atoms : tuple of (rate, mass), optional
        Atomic Laplace representation K(t) = sum_j mass_j exp(-rate_j t),
        for quasi-exponential kernels.
    shift_density : callable, optional
        Density g with int_0^t g(x) dx = K(t), when known in closed form
        (used to cross-check the shift lift by quadrature).
    """

    name: str
    evaluator: Callable[[float], float]
    horizon: float
    singular_at_zero: bool = False
    antiderivative: Optional[Callable[[float], float]] = None
    laplace_density: Optional[Callable[[float], float]] = None
    laplace_atoms: Optional[tuple] = None
    shift_density: Optional[Callable[[float], float]] = None
    params: dict = field(default_factory=dict)

    def __call__(self, t):
        return eval_kernel(self, t)

    def square_integral(self, upper: Optional[float] = None) -> float:
        """int_0^upper K(s)^2 ds by adaptive quadrature (finiteness probe)."""
        upper = self.horizon if upper is None else upper
        lo = 1e-12 if self.singular_at_zero else 0.0
        val, _ = quad(lambda s: self.evaluator(s) ** 2, lo, upper, limit=200)
        return val


def eval_kernel(kernel: Kernel, t: float) -> float:
    """Evaluate K(t) with domain and singularity checks."""
    if t < 0.0 or t > kernel.horizon * (1.0 + 1e-12):
        raise KernelDomainError(
            f"t={t} outside [0, {kernel.horizon}] for kernel '{kernel.name}'"
        )
    if t == 0.0 and kernel.singular_at_zero:
        raise KernelSingularityError(f"kernel '{kernel.name}' is singular at t=0")
    return kernel.evaluator(t)


def sqrt_kernel(horizon: float = 1.0) -> Kernel:
    """K(t) = sqrt(t); antiderivative (2/3) t^(3/2)."""
    return Kernel(
        name="sqrt",
        evaluator=math.sqrt,
        horizon=horizon,
        singular_at_zero=False,
        antiderivative=lambda t: (2.0 / 3.0) * t ** 1.5,
        shift_density=lambda x: 0.5 / math.sqrt(x) if x > 0.0 else 0.0,
    )


def laplace_kernel(eps: float = 0.5, horizon: float = 1.0) -> Kernel:
    """K(t) = 1/(t + eps), the Laplace transform of m(x) = exp(-eps x)."""
    if eps <= 0.0:
        raise ValueError("laplace kernel requires eps > 0")
    return Kernel(
        name=f"laplace(eps={eps:g})",
        evaluator=lambda t: 1.0 / (t + eps),
        horizon=horizon,
        singular_at_zero=False,
        antiderivative=lambda t: math.log((t + eps) / eps),
        laplace_density=lambda x: math.exp(-eps * x),
        params={"eps": eps},
    )


def exp_kernel(lam: float = 1.0, horizon: float = 1.0) -> Kernel:
    """K(t) = exp(-lambda t), a one-atom Laplace transform."""
    if lam <= 0.0:
        raise ValueError("exp kernel requires lambda > 0")
    return Kernel(
        name=f"exp(lambda={lam:g})",
        evaluator=lambda t: math.exp(-lam * t),
        horizon=horizon,
        singular_at_zero=False,
        antiderivative=lambda t: (1.0 - math.exp(-lam * t)) / lam,
        laplace_atoms=((lam, 1.0),),
        params={"lambda": lam},
    )


_SPEC_RE = re.compile(r"^\s*([a-zA-Z_]+)\s*(?:\(\s*([^)]*)\s*\))?\s*$")


def parse_kernel_spec(spec: str, horizon: float = 1.0) -> Kernel:
    """Build a catalog kernel from a name string.

    Accepts ``sqrt``, ``laplace(eps=0.5)``, ``exp(lambda=2.0)``.
    """
    m = _SPEC_RE.match(spec)
    if m is None:
        raise ValueError(f"unparseable kernel spec: {spec!r}")
    name, argstr = m.group(1), m.group(2)
    kwargs = {}
    if argstr:
        for part in argstr.split(","):
            key, _, value = part.partition("=")
            if not value:
                raise ValueError(f"malformed kernel argument {part!r} in {spec!r}")
            kwargs[key.strip()] = float(value)
    if name == "sqrt":
        return sqrt_kernel(horizon=horizon)
    if name == "laplace":
        return laplace_kernel(eps=kwargs.get("eps", 0.5), horizon=horizon)
    if name == "exp":
        return exp_kernel(lam=kwargs.get("lambda", kwargs.get("lam", 1.0)), horizon=horizon)
    raise ValueError(f"unknown kernel name {name!r} (catalog: sqrt, laplace, exp)")
