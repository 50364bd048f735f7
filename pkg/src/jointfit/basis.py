"""Orthogonal basis for smooth log-hazard scaling functions.

The scaling function is represented by its values at K equidistant knots,
with a second-order random-walk penalty on the knot vector: the penalty
matrix Q = D'D (D the second-difference operator) leaves constants and
linear trends unpenalized. Eigendecomposing Q splits the knot vector into
an exact parametric pair (all-ones column, standardized linear trend) and
K-2 curvature directions; dividing each curvature eigenvector by the
square root of its eigenvalue standardizes the penalty to a plain sum of
squares of the curvature coefficients. Values between knots come from
natural cubic spline interpolation, continued linearly beyond the
boundary knots.
"""

from __future__ import annotations

from dataclasses import dataclass
from enum import IntEnum

import numpy as np
from scipy.linalg import solve_banded

_ZERO_EIG_TOL = 1e-9


class BasisError(ValueError):
    """Invalid construction or evaluation input for the scaling basis."""


class Level(IntEnum):
    """Flexibility level of the association scaling function."""

    LINEAR = 1
    QUADRATIC = 2
    SPLINE = 3

    @classmethod
    def parse(cls, value) -> "Level":
        if isinstance(value, Level):
            return value
        if isinstance(value, (int, np.integer)):
            return cls(int(value))
        name = str(value).strip().upper()
        if name in cls.__members__:
            return cls[name]
        raise BasisError(f"unknown association level: {value!r}")


@dataclass(frozen=True)
class CenterScale:
    """Affine map sending the scaling-function domain onto [-0.5, 0.5]."""

    center: float
    scale: float

    def __call__(self, nu):
        return (np.asarray(nu, dtype=float) - self.center) / self.scale


@dataclass(frozen=True)
class RW2Precision:
    """Second-difference penalty matrix on K equidistant knots."""

    K: int
    Q: np.ndarray


@dataclass(frozen=True)
class AssociationBasis:
    """Standardized eigenbasis of an RW2 penalty on equidistant knots.

    Columns of ``phi``: all-ones, the rescaled knot positions (equidistant
    from -0.5 to 0.5), then curvature vectors scaled so that the penalty
    quadratic form reduces to the sum of squared curvature coefficients.
    """

    K: int
    knots: np.ndarray
    phi: np.ndarray
    eigenvalues: np.ndarray
    domain: tuple[float, float]
    center_scale: CenterScale


@dataclass(frozen=True)
class AssociationCoefficients:
    """Coefficient vector for one scaling function at a given level."""

    gamma: np.ndarray
    level: Level

    def __post_init__(self):
        gamma = np.atleast_1d(np.asarray(self.gamma, dtype=float))
        object.__setattr__(self, "gamma", gamma)
        object.__setattr__(self, "level", Level.parse(self.level))
        expected = {Level.LINEAR: 1, Level.QUADRATIC: 2}
        if self.level in expected and gamma.size != expected[self.level]:
            raise BasisError(
                f"level {self.level.name} needs {expected[self.level]} "
                f"coefficients, got {gamma.size}"
            )
        if self.level is Level.SPLINE and gamma.size < 3:
            raise BasisError("level SPLINE needs at least 3 coefficients")


def second_difference_operator(K: int) -> np.ndarray:
    """Return the (K-2) x K matrix of second differences."""
    if K < 3:
        raise BasisError(f"need at least 3 knots, got K={K}")
    D = np.zeros((K - 2, K))
    for i in range(K - 2):
        D[i, i : i + 3] = (1.0, -2.0, 1.0)
    return D


def rw2_precision(K: int) -> RW2Precision:
    """Penalty matrix Q = D'D on K knots.

    Q is symmetric positive semi-definite with rank K-2; constant and
    linear knot sequences span its null space.
    """
    D = second_difference_operator(K)
    return RW2Precision(K=K, Q=D.T @ D)


def _natural_spline_coeffs(knots: np.ndarray, values: np.ndarray) -> np.ndarray:
    """Second derivatives of the natural cubic spline at the knots.

    ``values`` may be (K,) or (K, m); boundary second derivatives are zero.
    """
    n = knots.size
    h = np.diff(knots)
    vals = values if values.ndim == 2 else values[:, None]
    m = np.zeros((n, vals.shape[1]))
    if n > 2:
        rhs = 6.0 * (
            (vals[2:] - vals[1:-1]) / h[1:, None]
            - (vals[1:-1] - vals[:-2]) / h[:-1, None]
        )
        # Tridiagonal system in the n-2 interior second derivatives.
        ab = np.zeros((3, n - 2))
        ab[0, 1:] = h[1:-1]
        ab[1, :] = 2.0 * (h[:-1] + h[1:])
        ab[2, :-1] = h[1:-1]
        m[1:-1] = solve_banded((1, 1), ab, rhs)
    return m if values.ndim == 2 else m[:, 0]


def natural_cubic_interp(knots, values, x):
    """Natural cubic spline through (knots, values), evaluated at x.

    The second derivative vanishes at the boundary knots; outside the knot
    range the spline is continued linearly with the boundary slope. ``x``
    may be a scalar or an array; the result matches its shape.
    """
    knots = np.asarray(knots, dtype=float)
    values = np.asarray(values, dtype=float)
    if knots.ndim != 1 or knots.size < 3:
        raise BasisError("need at least 3 knots")
    if np.any(np.diff(knots) <= 0):
        raise BasisError("knots must be strictly ascending")
    if values.shape[0] != knots.size:
        raise BasisError("values length must match knots")
    m = _natural_spline_coeffs(knots, values)
    scalar = np.isscalar(x) or np.ndim(x) == 0
    xs = np.atleast_1d(np.asarray(x, dtype=float))
    out = _evaluate_natural_spline(knots, values, m, xs)
    return float(out[0]) if (scalar and values.ndim == 1) else (out[0] if scalar else out)


def _evaluate_natural_spline(knots, values, m, xs):
    n = knots.size
    vals = values if values.ndim == 2 else values[:, None]
    mm = m if m.ndim == 2 else m[:, None]
    h = np.diff(knots)
    seg = np.clip(np.searchsorted(knots, xs, side="right") - 1, 0, n - 2)
    hk = h[seg]
    a = (knots[seg + 1] - xs) / hk
    bb = (xs - knots[seg]) / hk
    out = (
        a[:, None] * vals[seg]
        + bb[:, None] * vals[seg + 1]
        + ((a**3 - a)[:, None] * mm[seg] + (bb**3 - bb)[:, None] * mm[seg + 1])
        * (hk**2)[:, None]
        / 6.0
    )
    # Linear continuation beyond the boundary knots.
    left = xs < knots[0]
    right = xs > knots[-1]
    if np.any(left):
        slope0 = (vals[1] - vals[0]) / h[0] - h[0] * mm[1] / 6.0
        out[left] = vals[0] + (xs[left] - knots[0])[:, None] * slope0
    if np.any(right):
        slope1 = (vals[-1] - vals[-2]) / h[-1] + h[-1] * mm[-2] / 6.0
        out[right] = vals[-1] + (xs[right] - knots[-1])[:, None] * slope1
    return out if values.ndim == 2 else out[:, 0]


def natural_cubic_design(knots, x) -> np.ndarray:
    """Cardinal-weight matrix W with W @ values = spline(x) for any values."""
    knots = np.asarray(knots, dtype=float)
    return np.asarray(
        natural_cubic_interp(knots, np.eye(knots.size), np.atleast_1d(x))
    )


def build_basis(Q: RW2Precision, domain: tuple[float, float]) -> AssociationBasis:
    """Standardized orthogonal basis of the RW2 penalty over ``domain``.

    The two null-space eigenvectors are replaced by the exact parametric
    pair (ones; rescaled knot positions); each curvature eigenvector is
    divided by the square root of its eigenvalue, re-orthogonalized
    against the parametric pair, and given a deterministic sign (first
    entry larger than 1e-12 in magnitude made positive).
    """
    lo, hi = float(domain[0]), float(domain[1])
    if not hi > lo:
        raise BasisError(f"degenerate domain ({lo}, {hi})")
    K = Q.K
    w, E = np.linalg.eigh(Q.Q)
    n_zero = int(np.sum(np.abs(w) < _ZERO_EIG_TOL))
    if n_zero != 2:
        raise BasisError(f"expected a rank-2 null space, found {n_zero} zero eigenvalues")
    omega = w.copy()
    omega[:2] = 0.0

    nu_s = np.linspace(-0.5, 0.5, K)
    phi = np.empty((K, K))
    phi[:, 0] = 1.0
    phi[:, 1] = nu_s
    q1 = np.full(K, 1.0 / np.sqrt(K))
    q2 = nu_s / np.linalg.norm(nu_s)
    for k in range(2, K):
        v = E[:, k] / np.sqrt(omega[k])
        v = v - (v @ q1) * q1 - (v @ q2) * q2
        lead = np.flatnonzero(np.abs(v) > 1e-12)
        if lead.size and v[lead[0]] < 0:
            v = -v
        phi[:, k] = v

    return AssociationBasis(
        K=K,
        knots=np.linspace(lo, hi, K),
        phi=phi,
        eigenvalues=omega,
        domain=(lo, hi),
        center_scale=CenterScale(center=0.5 * (lo + hi), scale=hi - lo),
    )


def scaling_function(coef: AssociationCoefficients, nu, basis: AssociationBasis | None = None,
                     center_scale: CenterScale | None = None):
    """Evaluate the scaling function g at ``nu`` for the given level.

    LINEAR returns the constant coefficient; QUADRATIC adds a linear trend
    in the rescaled coordinate (requires a center/scale map); SPLINE
    interpolates the nodal values ``phi @ gamma`` (requires the basis).
    """
    level = coef.level
    gamma = coef.gamma
    nu_arr = np.asarray(nu, dtype=float)
    if level is Level.LINEAR:
        out = np.full_like(nu_arr, gamma[0], dtype=float)
    elif level is Level.QUADRATIC:
        cs = center_scale if center_scale is not None else (basis.center_scale if basis else None)
        if cs is None:
            raise BasisError("QUADRATIC scaling needs a center/scale map")
        out = gamma[0] + gamma[1] * cs(nu_arr)
    else:
        if basis is None:
            raise BasisError("SPLINE scaling needs an AssociationBasis")
        if gamma.size != basis.K:
            raise BasisError(f"expected {basis.K} coefficients, got {gamma.size}")
        nodal = basis.phi @ gamma
        out = natural_cubic_interp(basis.knots, nodal, nu_arr)
    if np.isscalar(nu) or np.ndim(nu) == 0:
        return float(out)
    return out


def association_value(coef: AssociationCoefficients, nu, basis: AssociationBasis | None = None,
                      center_scale: CenterScale | None = None):
    """Association effect f(nu) = g(nu) * nu; exactly zero at nu = 0."""
    g = scaling_function(coef, nu, basis=basis, center_scale=center_scale)
    return g * np.asarray(nu, dtype=float) if np.ndim(nu) else g * float(nu)
