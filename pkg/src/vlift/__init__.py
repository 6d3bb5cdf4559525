"""vlift: stochastic optimal control for Volterra SDEs via Markovian lifts."""

from .kernels import (
    Kernel,
    KernelDomainError,
    KernelSingularityError,
    eval_kernel,
    exp_kernel,
    laplace_kernel,
    parse_kernel_spec,
    sqrt_kernel,
)
from .lift import (
    DiscreteLift,
    LiftBuildError,
    LiftSpec,
    OffGridError,
    build_laplace_lift,
    build_shift_lift,
    reconstruct_kernel,
    semigroup_step,
)

__version__ = "0.1.0"

__all__ = [
    "Kernel",
    "KernelDomainError",
    "KernelSingularityError",
    "eval_kernel",
    "exp_kernel",
    "laplace_kernel",
    "parse_kernel_spec",
    "sqrt_kernel",
    "DiscreteLift",
    "LiftBuildError",
    "LiftSpec",
    "OffGridError",
    "build_laplace_lift",
    "build_shift_lift",
    "reconstruct_kernel",
    "semigroup_step",
    "__version__",
]
