"""Distance measures on image stacks with analytic displacement gradients.

Pairwise measures (for the sequential baseline):

* ``SsdPair``: sum of squared intensity differences.
* ``NgfPair``: normalized-gradient-field distance with a pointwise
  stabilizer ``eta_pt``.

Groupwise measures (functions of the feature-matrix spectrum):

* ``SchattenQ(q)``: ``K - sum sigma_k^q`` for finite q, ``-sigma_1`` for
  q = inf.  Smaller is better; aligned stacks drive the spectrum towards
  rank one.
* ``CorrDev(2)``: squared Schatten-2 deviation of the correlation matrix
  from the identity.  This one is maximized by alignment, so it enters the
  minimization objective negated.
* ``LogDet``: ``sum log(lambda_k + jitter)``, the log-determinant of the
  jittered correlation matrix.  Minimized by alignment, but degenerates when
  any image loses overlap; kept as a documented competitor.

All gradients are taken through the actual discrete computation: bilinear
warp, central-difference image gradients, global or pointwise
normalizations, and the Gram-based SVD.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np

from .errors import MeasureError
from .features import (
    FeatureMap,
    NgfFeature,
    assemble_with_chain,
    feature_adjoint,
    resolve_feature,
)
from .grids import (
    DisplacementField,
    Image,
    ImageStack,
    gradient_central,
    gradient_central_adjoint,
    warp_with_jacobian,
)
from .spectral import ThinSvd, thin_svd


@dataclass(frozen=True)
class SsdPair:
    """Sum-of-squared-differences pairwise measure."""


@dataclass(frozen=True)
class NgfPair:
    """Pointwise normalized-gradient-field pairwise measure."""

    eta_pt: float = 1e-2

    def __post_init__(self):
        if not np.isfinite(self.eta_pt) or self.eta_pt <= 0:
            raise MeasureError(f"eta_pt must be positive, got {self.eta_pt}")


@dataclass(frozen=True)
class SchattenQ:
    """Groupwise measure K - sum sigma^q (q finite) or -sigma_1 (q = inf)."""

    q: float = 4.0
    feature: FeatureMap = NgfFeature()

    def __post_init__(self):
        if not (self.q == math.inf or (np.isfinite(self.q) and self.q >= 1.0)):
            raise MeasureError(f"Schatten exponent must be >= 1 or inf, got {self.q}")


@dataclass(frozen=True)
class CorrDev:
    """Deviation of the correlation matrix from the identity (maximized)."""

    q: float = 2.0
    feature: FeatureMap = NgfFeature()

    def __post_init__(self):
        if not (self.q == math.inf or (np.isfinite(self.q) and self.q >= 1.0)):
            raise MeasureError(f"Schatten exponent must be >= 1 or inf, got {self.q}")


@dataclass(frozen=True)
class LogDet:
    """Log-determinant of the jittered correlation matrix (minimized)."""

    jitter: float = 0.0
    auto_jitter: bool = False
    feature: FeatureMap = NgfFeature()

    def __post_init__(self):
        if not np.isfinite(self.jitter) or self.jitter < 0:
            raise MeasureError(f"jitter must be nonnegative, got {self.jitter}")


MeasureKind = SsdPair | NgfPair | SchattenQ | CorrDev | LogDet

PAIRWISE_KINDS = (SsdPair, NgfPair)
GROUPWISE_KINDS = (SchattenQ, CorrDev, LogDet)


@dataclass(frozen=True)
class MeasureEval:
    """Value and per-field displacement gradients of a measure on a stack."""

    value: float
    grads: np.ndarray  # (K, m1, m2, 2)
    subgradient: bool = False
    svd: ThinSvd | None = None


# ---------------------------------------------------------------------------
# feature-matrix level measures


def _sigma_combination(svd: ThinSvd, coeffs: np.ndarray) -> np.ndarray:
    """Assemble ``sqrt(w) * sum_k coeffs[k] * u_k v_k^T`` over stable modes."""
    mask = svd.u_valid & (coeffs != 0.0)
    n = svd.u.shape[0]
    if not mask.any():
        return np.zeros((n, svd.k))
    cols = np.flatnonzero(mask)
    scaled = svd.u[:, cols] * coeffs[cols]
    return np.sqrt(svd.quad_weight) * (scaled @ svd.v[:, cols].T)


def sqn(fm, q):
    """Schatten-q alignment measure of a feature matrix.

    Returns ``(value, grad_entries, subgradient_flag)``.  For finite q the
    value is ``K - sum sigma^q``; for q = inf it is ``-sigma_1`` and the flag
    reports a near-degenerate top gap.
    """
    svd = thin_svd(fm)
    return _sqn_from_svd(svd, q)


def _sqn_from_svd(svd: ThinSvd, q):
    k = svd.k
    sigma = svd.sigma
    if q == math.inf:
        value = -float(sigma[0])
        coeffs = np.zeros(k)
        coeffs[0] = -1.0
        # at sigma_1 = 0 (all columns vanish, e.g. everything warped into a
        # constant region) the value 0 is the measure's supremum and the zero
        # matrix is a valid subgradient; flag it so solvers can reject the
        # point instead of crashing
        grad = _sigma_combination(svd, coeffs)
        flagged = bool(svd.gap_flags[0]) or not bool(svd.u_valid[0])
        return value, grad, flagged
    value = float(k) - float(np.sum(sigma**q))
    coeffs = -q * sigma ** (q - 1.0)
    flagged = False
    if q == 1.0:
        # sigma -> sigma^0 keeps unit weight at vanishing singular values,
        # where the derivative is only a subgradient; drop those modes
        dropped = ~svd.u_valid
        flagged = bool(dropped.any())
    grad = _sigma_combination(svd, coeffs)
    return value, grad, flagged


def corr_dev(fm, q) -> float:
    """Schatten-q deviation of the correlation matrix from the identity.

    q = 2 returns the squared Schatten-2 norm; q = inf the largest absolute
    eigenvalue of C - I; other finite q the plain Schatten-q norm.
    """
    svd = thin_svd(fm)
    dev = svd.eigenvalues - 1.0
    if q == math.inf:
        return float(np.max(np.abs(dev)))
    if q == 2.0:
        return float(np.sum(dev**2))
    return float(np.sum(np.abs(dev) ** q) ** (1.0 / q))


def _corr_dev2_from_svd(svd: ThinSvd):
    dev = svd.eigenvalues - 1.0
    value = float(np.sum(dev**2))
    coeffs = 4.0 * svd.sigma * dev
    grad = _sigma_combination(svd, coeffs)
    return value, grad


def logdet_total_correlation(fm, jitter: float = 0.0):
    """Log-determinant measure with analytic feature-matrix gradient.

    Returns ``(value, grad_entries)``; raises when the jittered correlation
    matrix is numerically rank deficient.
    """
    svd = thin_svd(fm)
    return _logdet_from_svd(svd, jitter)


def _logdet_from_svd(svd: ThinSvd, jitter: float):
    if not np.isfinite(jitter) or jitter < 0:
        raise MeasureError(f"jitter must be nonnegative, got {jitter}")
    lam = svd.eigenvalues
    rank_tol = svd.k * np.finfo(float).eps * max(float(lam[0]), 0.0)
    shifted = lam + jitter
    if np.any(shifted <= rank_tol):
        raise MeasureError("rank-deficient correlation: log-det undefined")
    value = float(np.sum(np.log(shifted)))
    coeffs = 2.0 * svd.sigma / shifted
    grad = _sigma_combination(svd, coeffs)
    return value, grad


# ---------------------------------------------------------------------------
# pairwise cores (cotangents with respect to warped intensities)


def _ssd_core(a: Image, b: Image):
    w = a.grid.cell_area
    diff = b.data - a.data
    value = 0.5 * w * float(np.sum(diff**2))
    return value, -w * diff, w * diff


def _ngf_core(a: Image, b: Image, eta_pt: float):
    w = a.grid.cell_area
    ga = gradient_central(a)
    gb = gradient_central(b)
    na = np.sqrt(np.sum(ga**2, axis=-1) + eta_pt)
    nb = np.sqrt(np.sum(gb**2, axis=-1) + eta_pt)
    s = np.sum(ga * gb, axis=-1)
    r = s / (na * nb)
    value = 0.5 * w * float(np.sum(1.0 - r**2))
    shared = w * r[..., None]
    dga = -shared * (gb / (na * nb)[..., None] - (r / na**2)[..., None] * ga)
    dgb = -shared * (ga / (na * nb)[..., None] - (r / nb**2)[..., None] * gb)
    da = gradient_central_adjoint(dga, a.grid)
    db = gradient_central_adjoint(dgb, b.grid)
    return value, da, db


def _pair_core(kind, a: Image, b: Image):
    if isinstance(kind, SsdPair):
        return _ssd_core(a, b)
    return _ngf_core(a, b, kind.eta_pt)


def ssd_pair(ref: Image, moving: Image, field: DisplacementField):
    """SSD between ``ref`` and ``moving`` warped by ``field``.

    Returns ``(value, grad)`` with the gradient taken with respect to the
    displacement of the moving image; ``ref`` is used as-is.
    """
    return _one_sided_pair(SsdPair(), ref, moving, field)


def ngf_pair(ref: Image, moving: Image, field: DisplacementField, eta_pt: float = 1e-2):
    """NGF distance between ``ref`` and warped ``moving``; gradient as in ``ssd_pair``."""
    return _one_sided_pair(NgfPair(eta_pt=eta_pt), ref, moving, field)


def _one_sided_pair(kind, ref: Image, moving: Image, field: DisplacementField):
    if ref.grid != moving.grid:
        raise MeasureError("pair images must share one grid")
    warped, jac = warp_with_jacobian(moving, field)
    value, _, db = _pair_core(kind, ref, warped)
    grad = db[..., None] * jac
    return value, grad


# ---------------------------------------------------------------------------
# stack-level evaluation


def resolve_measure(kind: MeasureKind, stack: ImageStack) -> MeasureKind:
    """Materialize stack-dependent parameters (relative eta, auto jitter).

    The solver calls this once per resolution level so that the objective
    stays fixed during the level's iterations.
    """
    if isinstance(kind, GROUPWISE_KINDS):
        feature = resolve_feature(kind.feature, stack)
        kind = replace(kind, feature=feature)
    if isinstance(kind, LogDet) and kind.auto_jitter:
        from .features import assemble
        from .grids import zero_field

        fields = [zero_field(stack.grid) for _ in range(stack.k)]
        fm = assemble(stack, fields, kind.feature)
        trace = float(np.sum(thin_svd(fm).eigenvalues))
        kind = replace(kind, jitter=1e-8 * trace / stack.k, auto_jitter=False)
    return kind


def measure_eval(stack: ImageStack, fields, kind: MeasureKind) -> MeasureEval:
    """Evaluate a measure on a warped stack with gradients for every field.

    Pairwise kinds accumulate over consecutive pairs ``(k-1, k)`` (the
    sequential data term); groupwise kinds go through the feature matrix.
    ``CorrDev`` is negated here so that smaller is always better.
    """
    fields = list(fields)
    if len(fields) != stack.k:
        raise MeasureError(f"stack has {stack.k} images but {len(fields)} fields")
    if isinstance(kind, PAIRWISE_KINDS):
        return _eval_pairwise(stack, fields, kind)
    if isinstance(kind, GROUPWISE_KINDS):
        return _eval_groupwise(stack, fields, kind)
    raise MeasureError(f"unknown measure kind {kind!r}")


def _eval_pairwise(stack: ImageStack, fields, kind) -> MeasureEval:
    warped = []
    jacs = []
    for img, field in zip(stack, fields):
        wimg, jac = warp_with_jacobian(img, field)
        warped.append(wimg)
        jacs.append(jac)
    k = stack.k
    grid = stack.grid
    value = 0.0
    cots = [np.zeros(grid.dims) for _ in range(k)]
    for idx in range(1, k):
        v, da, db = _pair_core(kind, warped[idx - 1], warped[idx])
        value += v
        cots[idx - 1] += da
        cots[idx] += db
    grads = np.stack([cots[i][..., None] * jacs[i] for i in range(k)])
    return MeasureEval(value=float(value), grads=grads, subgradient=False, svd=None)


def _eval_groupwise(stack: ImageStack, fields, kind) -> MeasureEval:
    kind = resolve_measure(kind, stack)
    fm, warped, jacs = assemble_with_chain(stack, fields, kind.feature)
    svd = thin_svd(fm)
    if isinstance(kind, SchattenQ):
        value, grad_f, flagged = _sqn_from_svd(svd, kind.q)
    elif isinstance(kind, CorrDev):
        if kind.q != 2.0:
            raise MeasureError(
                "only the squared Schatten-2 correlation deviation has an"
                " analytic gradient; use corr_dev for values at other q"
            )
        value, grad_f = _corr_dev2_from_svd(svd)
        value, grad_f = -value, -grad_f
        flagged = False
    else:
        value, grad_f = _logdet_from_svd(svd, kind.jitter)
        flagged = False
    grads = np.empty((stack.k, *stack.grid.dims, 2))
    for idx in range(stack.k):
        sens = feature_adjoint(kind.feature, warped[idx], grad_f[:, idx])
        grads[idx] = sens[..., None] * jacs[idx]
    return MeasureEval(value=float(value), grads=grads, subgradient=flagged, svd=svd)
