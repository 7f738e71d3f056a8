"""Deformation regularizers: diffusion and linear-elastic potentials.

Both act on displacement fields (not transforms), are quadratic with
symmetric positive semidefinite Hessians, and vanish on rigid shifts; the
elastic potential additionally ignores linearized rotations because it is
built from the symmetrized displacement gradient.

The groupwise regularizer is the plain sum over the per-image fields.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .accum import sorted_sum
from .errors import RegularizerError
from .grids import DisplacementField, GridSpec, gradient_central_adjoint


@dataclass(frozen=True)
class Diffusion:
    """Dirichlet energy of the displacement, weight ``alpha``."""

    alpha: float = 1e-2

    def __post_init__(self):
        if not np.isfinite(self.alpha) or self.alpha <= 0:
            raise RegularizerError(f"alpha must be positive, got {self.alpha}")


@dataclass(frozen=True)
class Elastic:
    """Linear-elastic potential of the symmetrized displacement gradient."""

    mu: float = 1.0
    lam: float = 0.0
    alpha: float = 1e-2

    def __post_init__(self):
        if not np.isfinite(self.mu) or self.mu <= 0:
            raise RegularizerError(f"mu must be positive, got {self.mu}")
        if not np.isfinite(self.lam) or self.lam < 0:
            raise RegularizerError(f"lam must be nonnegative, got {self.lam}")
        if not np.isfinite(self.alpha) or self.alpha <= 0:
            raise RegularizerError(f"alpha must be positive, got {self.alpha}")


RegKind = Diffusion | Elastic


def _forward_diff(u: np.ndarray, h: float, axis: int) -> np.ndarray:
    f = np.moveaxis(u, axis, 0)
    return np.moveaxis((f[1:] - f[:-1]) / h, 0, axis)


def _forward_diff_adjoint(e: np.ndarray, h: float, axis: int, m: int) -> np.ndarray:
    e = np.moveaxis(e, axis, 0)
    out = np.zeros((m, *e.shape[1:]))
    out[:-1] -= e / h
    out[1:] += e / h
    return np.moveaxis(out, 0, axis)


def _diffusion_value_grad(grid: GridSpec, u: np.ndarray, alpha: float):
    w = grid.cell_area
    value = 0.0
    grad = np.zeros_like(u)
    for axis in range(2):
        h = grid.spacing[axis]
        d = _forward_diff(u, h, axis)
        value += float(np.sum(d**2))
        grad += _forward_diff_adjoint(d, h, axis, grid.dims[axis])
    return 0.5 * alpha * w * value, alpha * w * grad


def _strain_fields(grid: GridSpec, u: np.ndarray):
    """Displacement gradient G[..., c, a] = d u_c / d x_a at cell centers."""
    g = np.empty((*grid.dims, 2, 2))
    for c in range(2):
        g1, g2 = np.gradient(u[..., c], grid.spacing[0], grid.spacing[1])
        g[..., c, 0] = g1
        g[..., c, 1] = g2
    return g


def _elastic_value_grad(grid: GridSpec, u: np.ndarray, mu: float, lam: float, alpha: float):
    w = grid.cell_area
    g = _strain_fields(grid, u)
    strain = 0.5 * (g + np.swapaxes(g, -1, -2))
    tr = np.trace(strain, axis1=-2, axis2=-1)
    density = mu * np.sum(strain**2, axis=(-2, -1)) + 0.5 * lam * tr**2
    value = alpha * w * float(np.sum(density))
    sens = 2.0 * mu * strain
    sens[..., 0, 0] += lam * tr
    sens[..., 1, 1] += lam * tr
    sens *= alpha * w
    grad = np.empty_like(u)
    for c in range(2):
        grad[..., c] = gradient_central_adjoint(sens[..., c, :], grid)
    return value, grad


def reg_eval(kind: RegKind, field: DisplacementField):
    """Value and gradient of a regularizer on one displacement field."""
    if isinstance(kind, Diffusion):
        return _diffusion_value_grad(field.grid, field.u, kind.alpha)
    if isinstance(kind, Elastic):
        return _elastic_value_grad(field.grid, field.u, kind.mu, kind.lam, kind.alpha)
    raise RegularizerError(f"unknown regularizer kind {kind!r}")


def diffusion(field: DisplacementField, alpha: float):
    return reg_eval(Diffusion(alpha=alpha), field)


def elastic(field: DisplacementField, mu: float, lam: float, alpha: float):
    return reg_eval(Elastic(mu=mu, lam=lam, alpha=alpha), field)


def reg_glo(fields, kind: RegKind):
    """Sum of the regularizer over all fields of a stack.

    Returns ``(value, grads)`` with ``grads`` stacked along axis 0.  The
    value is accumulated order-canonically, so it is exactly invariant under
    permutations of the stack.
    """
    fields = list(fields)
    values = []
    grads = []
    for field in fields:
        v, g = reg_eval(kind, field)
        values.append(v)
        grads.append(g)
    return sorted_sum(values), np.stack(grads)


def reg_hessian_apply(kind: RegKind, grid: GridSpec, u: np.ndarray) -> np.ndarray:
    """Apply the (constant) regularizer Hessian to a raw displacement array.

    Both regularizers are quadratic, so the Hessian action equals the
    gradient evaluated at ``u``.
    """
    if isinstance(kind, Diffusion):
        return _diffusion_value_grad(grid, u, kind.alpha)[1]
    if isinstance(kind, Elastic):
        return _elastic_value_grad(grid, u, kind.mu, kind.lam, kind.alpha)[1]
    raise RegularizerError(f"unknown regularizer kind {kind!r}")
