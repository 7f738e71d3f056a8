"""Cell-centered 2-d grids, images, displacement fields, and resampling.

Conventions used throughout the package:

* A grid with ``dims = (m1, m2)``, ``origin = (x0, y0)`` and
  ``spacing = (h1, h2)`` has cell centers at ``x0 + (i + 1/2) * h1`` along
  axis 0 and ``y0 + (j + 1/2) * h2`` along axis 1.
* ``Image.data`` has shape ``(m1, m2)``; axis 0 is the first physical axis.
* ``DisplacementField.u`` has shape ``(m1, m2, 2)`` and stores displacements
  in physical units; a transform acts as ``y(x) = x + u(x)``.
* Bilinear interpolation extends images outside the hull of cell centers by
  clamping the sample coordinate (nearest boundary value).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import GridError


@dataclass(frozen=True)
class GridSpec:
    """Geometry of a cell-centered rectangular grid."""

    dims: tuple[int, int]
    origin: tuple[float, float] = (0.0, 0.0)
    spacing: tuple[float, float] = (1.0, 1.0)

    def __post_init__(self):
        dims = tuple(int(d) for d in self.dims)
        origin = tuple(float(v) for v in self.origin)
        spacing = tuple(float(v) for v in self.spacing)
        if len(dims) != 2 or len(origin) != 2 or len(spacing) != 2:
            raise GridError("grids are two-dimensional")
        if any(d < 2 for d in dims):
            raise GridError(f"grid dims must be >= 2 per axis, got {dims}")
        if any(not np.isfinite(h) or h <= 0 for h in spacing):
            raise GridError(f"grid spacing must be positive and finite, got {spacing}")
        if any(not np.isfinite(v) for v in origin):
            raise GridError(f"grid origin must be finite, got {origin}")
        object.__setattr__(self, "dims", dims)
        object.__setattr__(self, "origin", origin)
        object.__setattr__(self, "spacing", spacing)

    @property
    def n_cells(self) -> int:
        return self.dims[0] * self.dims[1]

    @property
    def cell_area(self) -> float:
        return self.spacing[0] * self.spacing[1]

    @property
    def domain_area(self) -> float:
        return self.n_cells * self.cell_area

    def axis_centers(self, axis: int) -> np.ndarray:
        m = self.dims[axis]
        return self.origin[axis] + (np.arange(m) + 0.5) * self.spacing[axis]

    def cell_centers(self) -> np.ndarray:
        """Physical cell-center coordinates, shape (m1, m2, 2)."""
        c1, c2 = np.meshgrid(self.axis_centers(0), self.axis_centers(1), indexing="ij")
        return np.stack([c1, c2], axis=-1)

    def coarsened(self) -> "GridSpec":
        """Grid produced by one 2x2 restriction step (dims halved, floor)."""
        if self.dims[0] < 4 or self.dims[1] < 4:
            raise GridError("coarsest level reached")
        return GridSpec(
            dims=(self.dims[0] // 2, self.dims[1] // 2),
            origin=self.origin,
            spacing=(2.0 * self.spacing[0], 2.0 * self.spacing[1]),
        )


def _check_finite(arr: np.ndarray, what: str):
    if not np.all(np.isfinite(arr)):
        raise GridError(f"{what} contains non-finite values")


@dataclass(frozen=True)
class Image:
    """Scalar intensities at the cell centers of a grid."""

    grid: GridSpec
    data: np.ndarray

    def __post_init__(self):
        data = np.asarray(self.data, dtype=float)
        if data.shape != self.grid.dims:
            raise GridError(
                f"image data shape {data.shape} does not match grid dims {self.grid.dims}"
            )
        _check_finite(data, "image data")
        object.__setattr__(self, "data", data)


@dataclass(frozen=True)
class DisplacementField:
    """Per-cell displacement vectors in physical units, shape (m1, m2, 2)."""

    grid: GridSpec
    u: np.ndarray

    def __post_init__(self):
        u = np.asarray(self.u, dtype=float)
        if u.shape != (*self.grid.dims, 2):
            raise GridError(
                f"field shape {u.shape} does not match grid dims {self.grid.dims}"
            )
        _check_finite(u, "displacement field")
        object.__setattr__(self, "u", u)


def zero_field(grid: GridSpec) -> DisplacementField:
    return DisplacementField(grid, np.zeros((*grid.dims, 2)))


@dataclass(frozen=True)
class ImageStack:
    """An ordered stack of K >= 2 images sharing one grid."""

    images: tuple[Image, ...]

    def __post_init__(self):
        images = tuple(self.images)
        if len(images) < 2:
            raise GridError(f"a stack needs at least two images, got {len(images)}")
        grid = images[0].grid
        for idx, img in enumerate(images):
            if img.grid != grid:
                raise GridError(f"image {idx} is on a different grid than image 0")
        object.__setattr__(self, "images", images)

    @property
    def k(self) -> int:
        return len(self.images)

    @property
    def grid(self) -> GridSpec:
        return self.images[0].grid

    def __iter__(self):
        return iter(self.images)

    def __getitem__(self, idx) -> Image:
        return self.images[idx]

    def permuted(self, order) -> "ImageStack":
        return ImageStack(tuple(self.images[i] for i in order))


# ---------------------------------------------------------------------------
# sampling


def _sample_core(data: np.ndarray, q1: np.ndarray, q2: np.ndarray, want_jac: bool):
    """Bilinear sample at fractional index coordinates with clamp extension.

    Returns the sampled values and, if requested, the derivatives of the
    sample with respect to (q1, q2).  The derivative is set to zero wherever
    the unclamped coordinate lies outside the open interval (0, m-1); at the
    clamp boundary this picks one valid subgradient.
    """
    m1, m2 = data.shape
    qc1 = np.clip(q1, 0.0, m1 - 1.0)
    qc2 = np.clip(q2, 0.0, m2 - 1.0)
    i0 = np.minimum(np.floor(qc1).astype(np.intp), m1 - 2)
    j0 = np.minimum(np.floor(qc2).astype(np.intp), m2 - 2)
    t1 = qc1 - i0
    t2 = qc2 - j0
    f00 = data[i0, j0]
    f10 = data[i0 + 1, j0]
    f01 = data[i0, j0 + 1]
    f11 = data[i0 + 1, j0 + 1]
    w00 = (1.0 - t1) * (1.0 - t2)
    w10 = t1 * (1.0 - t2)
    w01 = (1.0 - t1) * t2
    w11 = t1 * t2
    val = w00 * f00 + w10 * f10 + w01 * f01 + w11 * f11
    if not want_jac:
        return val, None, None
    in1 = (q1 > 0.0) & (q1 < m1 - 1.0)
    in2 = (q2 > 0.0) & (q2 < m2 - 1.0)
    d1 = ((1.0 - t2) * (f10 - f00) + t2 * (f11 - f01)) * in1
    d2 = ((1.0 - t1) * (f01 - f00) + t1 * (f11 - f10)) * in2
    return val, d1, d2


def interp_bilinear(img: Image, points: np.ndarray) -> np.ndarray:
    """Evaluate the bilinear interpolant of ``img`` at physical points.

    ``points`` has shape (..., 2); the result has shape (...).  Outside the
    hull of cell centers the nearest boundary value is used.
    """
    points = np.asarray(points, dtype=float)
    if points.shape[-1] != 2:
        raise GridError(f"points must have a trailing axis of size 2, got {points.shape}")
    if not np.all(np.isfinite(points)):
        raise GridError("invalid sample point")
    (x0, y0) = img.grid.origin
    (h1, h2) = img.grid.spacing
    q1 = (points[..., 0] - x0) / h1 - 0.5
    q2 = (points[..., 1] - y0) / h2 - 0.5
    val, _, _ = _sample_core(img.data, q1, q2, want_jac=False)
    return val


def warp(img: Image, field: DisplacementField) -> Image:
    warped, _ = warp_with_jacobian(img, field, want_jac=False)
    return warped


def warp_with_jacobian(img: Image, field: DisplacementField, want_jac: bool = True):
    """Resample ``img`` at ``x + u(x)`` for every cell center x.

    Returns ``(warped_image, jac)`` where ``jac[i, j, a]`` is the derivative
    of the warped intensity at cell (i, j) with respect to ``u[i, j, a]``
    (``None`` when ``want_jac`` is false).  The index-space formulation
    ``q = index + u / h`` keeps the zero-displacement warp bit-exact.
    """
    if img.grid != field.grid:
        raise GridError("image and field grids differ")
    u = field.u
    if not np.all(np.isfinite(u)):
        raise GridError("invalid sample point")
    m1, m2 = img.grid.dims
    h1, h2 = img.grid.spacing
    idx1 = np.arange(m1, dtype=float)[:, None]
    idx2 = np.arange(m2, dtype=float)[None, :]
    q1 = idx1 + u[..., 0] / h1
    q2 = idx2 + u[..., 1] / h2
    val, d1, d2 = _sample_core(img.data, q1, q2, want_jac=want_jac)
    warped = Image(img.grid, val)
    if not want_jac:
        return warped, None
    jac = np.stack([d1 / h1, d2 / h2], axis=-1)
    return warped, jac


# ---------------------------------------------------------------------------
# derivatives


def gradient_central(img: Image) -> np.ndarray:
    """Per-axis derivative estimates, shape (m1, m2, 2).

    Central differences in the interior, one-sided at the boundary, scaled
    by the grid spacing.
    """
    g1, g2 = np.gradient(img.data, img.grid.spacing[0], img.grid.spacing[1])
    return np.stack([g1, g2], axis=-1)


def _grad_axis_adjoint(v: np.ndarray, h: float, axis: int) -> np.ndarray:
    v = np.moveaxis(v, axis, 0)
    m = v.shape[0]
    out = np.zeros_like(v)
    if m > 2:
        out[2:] += v[1:-1] / (2.0 * h)
        out[:-2] -= v[1:-1] / (2.0 * h)
    out[0] -= v[0] / h
    out[1] += v[0] / h
    out[-1] += v[-1] / h
    out[-2] -= v[-1] / h
    return np.moveaxis(out, 0, axis)


def gradient_central_adjoint(v: np.ndarray, grid: GridSpec) -> np.ndarray:
    """Adjoint of ``gradient_central`` as a map intensities -> (m1, m2, 2).

    Satisfies ``<gradient_central(T), v> = <T, gradient_central_adjoint(v)>``
    in the plain Euclidean inner products.
    """
    v = np.asarray(v, dtype=float)
    if v.shape != (*grid.dims, 2):
        raise GridError(f"expected shape {(*grid.dims, 2)}, got {v.shape}")
    out = _grad_axis_adjoint(v[..., 0], grid.spacing[0], axis=0)
    out += _grad_axis_adjoint(v[..., 1], grid.spacing[1], axis=1)
    return out


# ---------------------------------------------------------------------------
# multilevel transfer


def _smooth_axis_121(data: np.ndarray, axis: int) -> np.ndarray:
    """Binomial [1 2 1]/4 smoothing along one axis.

    Boundary cells are padded by linear extrapolation, which makes the
    boundary stencil the identity and keeps affine data exactly affine.
    """
    f = np.moveaxis(data, axis, 0)
    s = f.copy()
    if f.shape[0] > 2:
        s[1:-1] = 0.25 * (f[:-2] + 2.0 * f[1:-1] + f[2:])
    return np.moveaxis(s, 0, axis)


def smooth_binomial(img: Image) -> Image:
    data = _smooth_axis_121(img.data, 0)
    data = _smooth_axis_121(data, 1)
    return Image(img.grid, data)


def restrict(img: Image) -> Image:
    """One coarsening step: binomial smoothing, then 2x2 cell averaging.

    Dimensions are halved (floor); an odd trailing row/column is dropped.
    Raises when either dimension is already below 4.
    """
    coarse = img.grid.coarsened()
    s = smooth_binomial(img).data
    n1, n2 = coarse.dims
    s = s[: 2 * n1, : 2 * n2]
    c = 0.25 * (s[0::2, 0::2] + s[1::2, 0::2] + s[0::2, 1::2] + s[1::2, 1::2])
    return Image(coarse, c)


def restrict_stack(stack: ImageStack) -> ImageStack:
    return ImageStack(tuple(restrict(img) for img in stack))


def prolong(field: DisplacementField, fine: GridSpec) -> DisplacementField:
    """Bilinearly resample a coarse field at the cell centers of ``fine``.

    Displacement values are physical and carried over unchanged; only the
    sampling locations change.
    """
    coarse = field.grid
    pts = fine.cell_centers()
    q1 = (pts[..., 0] - coarse.origin[0]) / coarse.spacing[0] - 0.5
    q2 = (pts[..., 1] - coarse.origin[1]) / coarse.spacing[1] - 0.5
    u0, _, _ = _sample_core(field.u[..., 0], q1, q2, want_jac=False)
    u1, _, _ = _sample_core(field.u[..., 1], q1, q2, want_jac=False)
    return DisplacementField(fine, np.stack([u0, u1], axis=-1))
