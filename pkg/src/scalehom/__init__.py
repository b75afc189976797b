"""Numerical laboratory for scale-by-scale homogenization of the critical
2D drift-diffusion problem: exact quadratic-variation algebra, per-shell
driver covariances, proxy-corrector SDE Monte Carlo, moment ODEs with
analytic asymptotics and envelopes, a backward-Kolmogorov tail solver, and
desk-scale field/corrector/particle simulations cross-validating each other.
"""

__version__ = "0.1.0"

from . import (acceptance, cli, corrector, fieldsim, kolmogorov, momentodes,
               particle, proxysde, rng, shellcov, tensor2d)

__all__ = [
    "acceptance", "cli", "corrector", "fieldsim", "kolmogorov", "momentodes",
    "particle", "proxysde", "rng", "shellcov", "tensor2d", "__version__",
]
