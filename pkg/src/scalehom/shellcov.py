"""Joint single-point law of the driver triple (dphi, grad dphi, hess dphi).

A shell of the stream-function decomposition carries an independent Gaussian
increment whose spectrum is ``eps^2 / |k|^2`` on the annulus it occupies.  The
driver is obtained from that increment by the Helmholtz multiplier
``i (Jk)* / (lam |k|^2)``, so every component of the triple evaluated at one
point is a Gaussian whose covariance per unit scale time ``dlam2`` is a circle
average of a monomial in the wave direction, divided by ``lam2``:

* ``cov(dphi/L)``                entries  <(Jt)^c (Jt)^d> / lam2
* ``cov(grad)``                  entries  <t_a t_b (Jt)^c (Jt)^d> / lam2
* ``cov(L * hess)``              entries  <t_a t_b t_e t_f (Jt)^c (Jt)^d> / lam2
* ``cov(dphi/L, L * hess)``      entries  -<t_a t_b (Jt)^c (Jt)^d> / lam2

with mixed zeroth/first and first/second covariances vanishing by parity.
``L`` factors are kept in log form; the rescaled 12x12 matrix is free of
``L`` entirely, which is what makes exponentially large scale separations
representable.  Covariance construction is pure; sampling takes a caller
owned generator.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np

from . import tensor2d

#: monomial table of the multiplier vector for the rescaled driver triple
#: (dphi/L, grad, L*hess): sign, power of t1, power of t2.
_MONOMIALS = (
    # dphi components (Jt)^c
    (-1, 0, 1), (+1, 1, 0),
    # grad components -t_a (Jt)^c, flat (c, a) row major
    (+1, 1, 1), (+1, 0, 2), (-1, 2, 0), (-1, 1, 1),
    # hessian components -t_a t_b (Jt)^c, flat (c, ab) with ab in {00, 01, 11}
    (+1, 2, 1), (+1, 1, 2), (+1, 0, 3), (-1, 3, 0), (-1, 2, 1), (-1, 1, 2),
)

_GL_NODES, _GL_WEIGHTS = np.polynomial.legendre.leggauss(48)


def angular_moment(p: int, q: int) -> float:
    """Average of ``t1^p t2^q`` over the unit circle, total degree <= 6.

    Zero for odd powers; for even powers ``(p-1)!! (q-1)!! / (p+q)!!``.
    """
    if p < 0 or q < 0 or p + q > 6:
        raise ValueError(f"angular moment degree {p}+{q} out of supported range")
    if p % 2 or q % 2:
        return 0.0

    def dfact(n: int) -> int:
        out = 1
        while n > 1:
            out *= n
            n -= 2
        return out

    return dfact(p - 1) * dfact(q - 1) / dfact(p + q)


@lru_cache(maxsize=1)
def unit_matrix() -> np.ndarray:
    """Per-unit-scale-time covariance of the rescaled triple at lam2 = 1."""
    n = len(_MONOMIALS)
    c = np.empty((n, n))
    for i, (si, pi, qi) in enumerate(_MONOMIALS):
        for j, (sj, pj, qj) in enumerate(_MONOMIALS):
            c[i, j] = si * sj * angular_moment(pi + pj, qi + qj)
    c.setflags(write=False)
    return c


@dataclass(frozen=True)
class ScaleGrid:
    """Grid in the scale variable ``lam2 = 1 + eps^2 ln L``.

    ``lam2_values`` starts at 1 and increases; the cutoff scale obeys
    ``ln L = (lam2 - 1) / eps^2`` so ``d lam2 = eps^2 d ln L``.
    """

    eps: float
    lambda2_values: np.ndarray

    def __post_init__(self):
        v = np.asarray(self.lambda2_values, dtype=float)
        if self.eps < 0:
            raise ValueError("eps must be nonnegative")
        if v[0] != 1.0 or np.any(np.diff(v) <= 0):
            raise ValueError("lambda2 grid must start at 1 and increase strictly")
        object.__setattr__(self, "lambda2_values", v)

    @classmethod
    def uniform(cls, eps: float, lambda2_max: float, n_steps: int) -> "ScaleGrid":
        return cls(eps, np.linspace(1.0, lambda2_max, n_steps + 1))

    @classmethod
    def refined(cls, eps: float, lambda2_max: float, n_steps: int,
                ratio: float = 1.02) -> "ScaleGrid":
        """Geometric step refinement near lam2 = 1, where moments change fastest."""
        w = ratio ** np.arange(n_steps)
        steps = (lambda2_max - 1.0) * w / w.sum()
        return cls(eps, np.concatenate([[1.0], 1.0 + np.cumsum(steps)]))

    @property
    def ln_l(self) -> np.ndarray:
        if self.eps == 0.0:
            return np.zeros_like(self.lambda2_values)
        return (self.lambda2_values - 1.0) / self.eps ** 2

    @property
    def l_values(self) -> np.ndarray:
        """Cutoff scales exp(ln L); overflows to inf at deep separation, where
        callers should work with ``ln_l`` instead."""
        with np.errstate(over="ignore"):
            return np.exp(self.ln_l)


@dataclass(frozen=True)
class DriverCovariance:
    """Covariance of the driver triple at one scale, per unit ``dlam2``.

    The stored 12x12 ``matrix`` refers to the rescaled components
    ``(dphi/L, grad, L*hess)`` and is free of ``L``; raw blocks are exposed
    for moderate ``ln L`` where the powers of ``L`` are representable.
    """

    lambda2: float
    eps: float
    matrix: np.ndarray
    _eig: tuple = field(repr=False, default=None)

    @property
    def ln_l(self) -> float:
        return (self.lambda2 - 1.0) / self.eps ** 2

    @property
    def c00(self) -> np.ndarray:
        """Raw dphi block, equal to ``(L^2 / 2 lam2) id``."""
        return np.exp(2.0 * self.ln_l) * self.matrix[:2, :2]

    @property
    def c11(self) -> np.ndarray:
        """Gradient block (scale free)."""
        return self.matrix[2:6, 2:6]

    @property
    def c22(self) -> np.ndarray:
        """Raw Hessian block, carrying ``L^-2``."""
        return np.exp(-2.0 * self.ln_l) * self.matrix[6:12, 6:12]

    @property
    def c02(self) -> np.ndarray:
        """Cross dphi/Hessian block (scale free: the L factors cancel)."""
        return self.matrix[:2, 6:12]

    def eigensystem(self) -> tuple[np.ndarray, np.ndarray]:
        if self._eig is None:
            w, v = np.linalg.eigh(self.matrix)
            scale = float(w[-1])
            if w[0] < -1e-12 * scale:
                raise FloatingPointError(
                    f"driver covariance not PSD: offending eigenvalue {w[0]:.3e} "
                    f"(largest {scale:.3e}) at lam2 = {self.lambda2}")
            object.__setattr__(self, "_eig", (np.clip(w, 0.0, None), v))
        return self._eig

    def factor(self) -> np.ndarray:
        """Matrix square root used for sampling (eigenvalue clamped at 0)."""
        w, v = self.eigensystem()
        return v * np.sqrt(w)


@dataclass(frozen=True)
class DriverIncrement:
    """One Gaussian increment of the driver triple over a scale step.

    ``dphi`` stores ``dphi/L`` and ``hess`` stores ``L * hess`` (the scale
    free normalizations); ``grad`` is the raw Jacobian increment with
    ``grad[c, a] = d_a dphi^c`` and exactly vanishing trace.
    """

    dphi: np.ndarray
    grad: np.ndarray
    hess: np.ndarray
    dlambda2: float
    lambda2: float
    ln_l: float

    @property
    def raw_dphi(self) -> np.ndarray:
        return self.dphi * np.exp(self.ln_l)

    @property
    def raw_hess(self) -> np.ndarray:
        return self.hess * np.exp(-self.ln_l)


def build_cov(lambda2: float, eps: float) -> DriverCovariance:
    """Per-unit-``dlam2`` covariance of the rescaled driver triple."""
    if lambda2 < 1.0:
        raise ValueError("lambda2 must be >= 1")
    if eps <= 0.0:
        raise ValueError("eps must be positive")
    cov = DriverCovariance(lambda2, eps, unit_matrix() / lambda2)
    cov.eigensystem()
    return cov


def gaussian_from_factor(fac: np.ndarray, scale: float, rng: np.random.Generator,
                         size: int | None = None) -> np.ndarray:
    n = 1 if size is None else size
    z = rng.standard_normal((n, fac.shape[0]))
    out = np.sqrt(scale) * (z @ fac.T)
    return out[0] if size is None else out


def components_to_fields(vec: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Split sampled 12-vectors into (dphi, grad, hess) arrays.

    The gradient trace is zeroed exactly (the isotropic direction is a null
    direction of the law; sampling leaves only rounding there), and the
    Hessian is unpacked to a (2, 2, 2) array symmetric in the derivative
    slots.
    """
    dphi = vec[..., 0:2]
    grad = np.empty(vec.shape[:-1] + (2, 2))
    half_diff = 0.5 * (vec[..., 2] - vec[..., 5])
    grad[..., 0, 0] = half_diff
    grad[..., 1, 1] = -half_diff
    grad[..., 0, 1] = vec[..., 3]
    grad[..., 1, 0] = vec[..., 4]
    hess = np.empty(vec.shape[:-1] + (2, 2, 2))
    for c in range(2):
        base = 6 + 3 * c
        hess[..., c, 0, 0] = vec[..., base]
        hess[..., c, 0, 1] = vec[..., base + 1]
        hess[..., c, 1, 0] = vec[..., base + 1]
        hess[..., c, 1, 1] = vec[..., base + 2]
    return dphi, grad, hess


def sample_increment(cov: DriverCovariance, dlambda2: float,
                     rng: np.random.Generator,
                     size: int | None = None) -> DriverIncrement:
    """Draw a centered Gaussian increment with covariance ``dlambda2 * cov``."""
    if dlambda2 <= 0.0:
        raise ValueError("dlambda2 must be positive")
    vec = gaussian_from_factor(cov.factor(), dlambda2, rng, size)
    dphi, grad, hess = components_to_fields(vec)
    return DriverIncrement(dphi, grad, hess, dlambda2, cov.lambda2, cov.ln_l)


def _edge_integral(x_edge: float, span: float, eps: float, sign: float) -> float:
    """``int e^{-2 d(s)/eps^2} / s ds`` with distance taken from one step edge.

    ``sign = +1`` measures the decay from the right edge ``x_edge`` backwards
    (weight of the dphi reference), ``sign = -1`` from the left edge forwards
    (weight of the Hessian reference).  Substituting ``v = 2 d(s)/eps^2``
    keeps the integrand bounded for arbitrarily large ``span/eps^2``.
    """
    vmax = min(2.0 * span / eps ** 2, 60.0)
    v = 0.5 * vmax * (_GL_NODES + 1.0)
    w = 0.5 * vmax * _GL_WEIGHTS
    s = x_edge - sign * 0.5 * eps ** 2 * v
    return float(np.sum(w * np.exp(-v) / s)) * eps ** 2 / 2.0


def step_covariance(x_lo: float, x_hi: float, eps: float,
                    frozen_lambda2: float | None = None) -> DriverCovariance:
    """Exact covariance of the driver triple integrated over ``[x_lo, x_hi]``.

    Within a step the spectrum sweeps an annulus whose radial weight differs
    per block; freezing it at the left endpoint would bias the dphi variance
    by ``exp(2 dlam2/eps^2)``-type factors.  Here the radial integrals are
    done exactly, with the dphi block referenced to the scale at ``x_hi``
    (where the consumer reads it) and the Hessian block to ``x_lo`` (where it
    multiplies the state).  The result is the covariance of one whole-step
    increment, not a per-unit rate.

    With ``frozen_lambda2`` set, the 1/lam2 weight is frozen at that value
    across the step while the cutoff-scale weights stay exact; this
    reproduces the one-step law of the spectral field mode, whose shells
    apply a single multiplier scale (see :mod:`scalehom.fieldsim`).
    """
    if not 1.0 <= x_lo < x_hi:
        raise ValueError("need 1 <= x_lo < x_hi")
    if eps <= 0.0:
        raise ValueError("eps must be positive")
    span = x_hi - x_lo
    if frozen_lambda2 is not None:
        h = span / eps ** 2
        edge = 0.5 * eps ** 2 * -np.expm1(-2.0 * h) / frozen_lambda2
        i_dphi = i_hess = edge
        i_grad = span / frozen_lambda2
        i_cross = np.exp(-h) * i_grad
    else:
        i_dphi = _edge_integral(x_hi, span, eps, +1.0)
        i_grad = float(np.log(x_hi / x_lo))
        i_hess = _edge_integral(x_lo, span, eps, -1.0)
        i_cross = np.exp(-span / eps ** 2) * i_grad

    radial = np.empty((3, 3))
    radial[0, 0] = i_dphi
    radial[1, 1] = i_grad
    radial[2, 2] = i_hess
    radial[0, 1] = radial[1, 0] = i_grad   # entries vanish by parity
    radial[1, 2] = radial[2, 1] = i_grad   # entries vanish by parity
    radial[0, 2] = radial[2, 0] = i_cross

    block = np.repeat([0, 1, 2], [2, 4, 6])
    mat = unit_matrix() * radial[np.ix_(block, block)]
    cov = DriverCovariance(x_lo, eps, mat)
    cov.eigensystem()
    return cov


def cprime_spectrum(k: np.ndarray, eps: float, l_max: float) -> np.ndarray:
    """Spectral density four-tensor of the integrated gradient driver.

    ``eps^2 / (1 - eps^2 ln|k|)`` inside the annulus ``1/l_max < |k| <= 1``
    times ``|k|^-6 ((Jk)* x k) x ((Jk)* x k)``; identically zero outside.
    """
    k = np.asarray(k, dtype=float)
    norm2 = float(k @ k)
    if norm2 == 0.0:
        raise ValueError("spectrum undefined at k = 0")
    norm = np.sqrt(norm2)
    if norm > 1.0 or norm <= 1.0 / l_max:
        return np.zeros((2, 2, 2, 2))
    jk = tensor2d.J @ k
    pref = eps ** 2 / (1.0 - eps ** 2 * np.log(norm)) / norm2 ** 3
    m = np.einsum('a,b->ab', jk, k)
    return pref * np.einsum('ab,cd->abcd', m, m)
