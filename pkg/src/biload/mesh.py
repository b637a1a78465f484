"""Uniform space-time grid, quadrature weights, and difference stencils.

The grid covers the cylinder Q = (x_a, x_b) x (0, T_final) with Nt uniform
steps in time and Nx uniform cells in space.  The boundary consists of the
two endpoints, indexed 0 (left, outward normal -1) and 1 (right, normal +1).
All integrals are trapezoidal; the boundary "integral" is the plain sum of
the two endpoint values (counting measure).

Stencils are second order everywhere: centered three-point formulas at
interior nodes and one-sided three/four-point formulas at the four grid
edges.  The mixed stencils Dtx and Dtxx are defined as exact compositions,
Dt applied after Dx (resp. Dxx), so composed and direct application agree
bitwise.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass
from functools import cached_property

import numpy as np

from .errors import ConfigError, ShapeError

LEFT, RIGHT = 0, 1
NORMALS = (-1.0, 1.0)


class StencilKind(enum.Enum):
    Dt = "Dt"
    Dx = "Dx"
    Dxx = "Dxx"
    Dtx = "Dtx"
    Dtxx = "Dtxx"


def _diff1_matrix(m: int, h: float) -> np.ndarray:
    """Dense first-derivative matrix on m uniform nodes with spacing h.

    Centered (f[k+1]-f[k-1])/2h inside, second-order one-sided rows at
    both ends.
    """
    D = np.zeros((m, m))
    for k in range(1, m - 1):
        D[k, k - 1] = -0.5 / h
        D[k, k + 1] = 0.5 / h
    D[0, 0:3] = np.array([-1.5, 2.0, -0.5]) / h
    D[m - 1, m - 3 : m] = np.array([0.5, -2.0, 1.5]) / h
    return D


def _diff2_matrix(m: int, h: float) -> np.ndarray:
    """Dense second-derivative matrix, second order including one-sided rows."""
    D = np.zeros((m, m))
    h2 = h * h
    for k in range(1, m - 1):
        D[k, k - 1 : k + 2] = np.array([1.0, -2.0, 1.0]) / h2
    D[0, 0:4] = np.array([2.0, -5.0, 4.0, -1.0]) / h2
    D[m - 1, m - 4 : m] = np.array([-1.0, 4.0, -5.0, 2.0]) / h2
    return D


def _trapezoid_weights(count: int, h: float) -> np.ndarray:
    w = np.full(count + 1, h)
    w[0] = 0.5 * h
    w[-1] = 0.5 * h
    return w


@dataclass(frozen=True)
class Mesh:
    """Immutable uniform grid over (x_a, x_b) x (0, T_final)."""

    T_final: float
    Nt: int
    x_a: float
    x_b: float
    Nx: int
    dt: float
    dx: float

    @cached_property
    def t(self) -> np.ndarray:
        return self.dt * np.arange(self.Nt + 1)

    @cached_property
    def x(self) -> np.ndarray:
        return self.x_a + self.dx * np.arange(self.Nx + 1)

    @cached_property
    def bd_x(self) -> np.ndarray:
        """Coordinates of the two boundary points (left, right)."""
        return np.array([self.x_a, self.x_b])

    @cached_property
    def normals(self) -> np.ndarray:
        return np.array(NORMALS)

    @cached_property
    def wt(self) -> np.ndarray:
        """Trapezoid weights over [0, T_final]; sum equals T_final."""
        return _trapezoid_weights(self.Nt, self.dt)

    @cached_property
    def wx(self) -> np.ndarray:
        """Trapezoid weights over [x_a, x_b]; sum equals x_b - x_a."""
        return _trapezoid_weights(self.Nx, self.dx)

    @cached_property
    def volterra_lower(self) -> np.ndarray:
        """V[i, k]: weight of node k in the trapezoid rule on [0, t_i].

        Row 0 is identically zero (empty range), so running integrals
        vanish at the initial row.
        """
        nt = self.Nt + 1
        V = np.zeros((nt, nt))
        for i in range(1, nt):
            V[i, : i + 1] = self.dt
            V[i, 0] = 0.5 * self.dt
            V[i, i] = 0.5 * self.dt
        return V

    @cached_property
    def volterra_upper(self) -> np.ndarray:
        """U[i, k]: costate-side weight of consumer node i against
        producer node k, the exact transpose of the running-integral
        weights under the time-quadrature inner product:
        U = wt V / wt (elementwise rows/columns).

        Away from the two diagonal corners this is precisely the
        trapezoid rule on [t_k, T]; at the corners it inherits the
        forward convention (the empty initial row transposes to an empty
        (0, 0) weight), which keeps discrete costates aligned with the
        dense-oracle multipliers to solver tolerance.
        """
        return self.wt[:, None] * self.volterra_lower / self.wt[None, :]

    @cached_property
    def d1_t(self) -> np.ndarray:
        return _diff1_matrix(self.Nt + 1, self.dt)

    @cached_property
    def d1_x(self) -> np.ndarray:
        return _diff1_matrix(self.Nx + 1, self.dx)

    @cached_property
    def d2_x(self) -> np.ndarray:
        return _diff2_matrix(self.Nx + 1, self.dx)


def build_mesh(T_final: float, Nt: int, x_a: float, x_b: float, Nx: int) -> Mesh:
    """Construct a mesh, rejecting out-of-range or non-finite parameters."""
    for name, value in (("T_final", T_final), ("x_a", x_a), ("x_b", x_b)):
        if not math.isfinite(value):
            raise ConfigError(f"{name} must be finite, got {value!r}")
    if T_final <= 0:
        raise ConfigError(f"T_final must be positive, got {T_final}")
    if not x_a < x_b:
        raise ConfigError(f"need x_a < x_b, got x_a={x_a}, x_b={x_b}")
    if Nt < 4:
        raise ConfigError(f"Nt must be at least 4, got {Nt}")
    if Nx < 4:
        raise ConfigError(f"Nx must be at least 4, got {Nx}")
    return Mesh(
        T_final=float(T_final),
        Nt=int(Nt),
        x_a=float(x_a),
        x_b=float(x_b),
        Nx=int(Nx),
        dt=float(T_final) / int(Nt),
        dx=(float(x_b) - float(x_a)) / int(Nx),
    )


def quad_time(mesh: Mesh, samples: np.ndarray, i_lo: int, i_hi: int):
    """Trapezoid integral of time-node samples over [t_{i_lo}, t_{i_hi}].

    samples has the time axis first; trailing axes pass through.  Returns
    zero for an empty range (i_lo == i_hi).
    """
    samples = np.asarray(samples, dtype=float)
    if samples.shape[0] != mesh.Nt + 1:
        raise ShapeError(
            f"expected {mesh.Nt + 1} time samples, got {samples.shape[0]}"
        )
    if not (0 <= i_lo <= i_hi <= mesh.Nt):
        raise IndexError(f"bad time index range [{i_lo}, {i_hi}] for Nt={mesh.Nt}")
    if i_lo == i_hi:
        return np.zeros(samples.shape[1:]) if samples.ndim > 1 else 0.0
    w = np.full(i_hi - i_lo + 1, mesh.dt)
    w[0] = w[-1] = 0.5 * mesh.dt
    block = samples[i_lo : i_hi + 1]
    out = np.tensordot(w, block, axes=(0, 0))
    return out if samples.ndim > 1 else float(out)


def quad_space(mesh: Mesh, samples: np.ndarray):
    """Trapezoid integral of space-node samples over (x_a, x_b)."""
    samples = np.asarray(samples, dtype=float)
    if samples.shape[0] != mesh.Nx + 1:
        raise ShapeError(
            f"expected {mesh.Nx + 1} space samples, got {samples.shape[0]}"
        )
    out = np.tensordot(mesh.wx, samples, axes=(0, 0))
    return out if samples.ndim > 1 else float(out)


def quad_boundary(mesh: Mesh, left, right):
    """Boundary integral under the counting measure: left + right."""
    return left + right


def _apply_axis(matrix: np.ndarray, field: np.ndarray, axis: int) -> np.ndarray:
    """Apply a dense 1-D operator matrix along one axis of field."""
    moved = np.moveaxis(field, axis, 0)
    out = np.tensordot(matrix, moved, axes=(1, 0))
    return np.moveaxis(out, 0, axis)


def apply_stencil(mesh: Mesh, kind: StencilKind, field: np.ndarray) -> np.ndarray:
    """Apply one of the difference operators to a (t, x, ...) node field.

    Dtx and Dtxx are computed by composition, Dt pass after the Dx/Dxx
    pass, so they agree bitwise with the explicit two-step application.
    """
    field = np.asarray(field, dtype=float)
    if field.ndim < 2 or field.shape[0] != mesh.Nt + 1 or field.shape[1] != mesh.Nx + 1:
        raise ShapeError(
            f"field shape {field.shape} does not match grid "
            f"({mesh.Nt + 1}, {mesh.Nx + 1}, ...)"
        )
    if kind == StencilKind.Dt:
        return _apply_axis(mesh.d1_t, field, 0)
    if kind == StencilKind.Dx:
        return _apply_axis(mesh.d1_x, field, 1)
    if kind == StencilKind.Dxx:
        return _apply_axis(mesh.d2_x, field, 1)
    if kind == StencilKind.Dtx:
        return _apply_axis(mesh.d1_t, _apply_axis(mesh.d1_x, field, 1), 0)
    if kind == StencilKind.Dtxx:
        return _apply_axis(mesh.d1_t, _apply_axis(mesh.d2_x, field, 1), 0)
    raise ConfigError(f"unknown stencil kind {kind!r}")


@dataclass(frozen=True)
class CurveMesh:
    """Uniform periodic mesh on a closed curve of circumference L_c."""

    M: int
    L_c: float
    ds: float

    @cached_property
    def s(self) -> np.ndarray:
        return self.ds * np.arange(self.M)


def build_curve_mesh(M: int, L_c: float) -> CurveMesh:
    if M < 8:
        raise ConfigError(f"curve mesh needs M >= 8 nodes, got {M}")
    if not (math.isfinite(L_c) and L_c > 0):
        raise ConfigError(f"circumference must be positive and finite, got {L_c!r}")
    return CurveMesh(M=int(M), L_c=float(L_c), ds=float(L_c) / int(M))


def curve_diff(curve: CurveMesh, field: np.ndarray) -> np.ndarray:
    """Periodic centered arclength derivative (f[k+1] - f[k-1]) / (2 ds)."""
    field = np.asarray(field, dtype=float)
    if field.shape[0] != curve.M:
        raise ShapeError(f"expected {curve.M} curve samples, got {field.shape[0]}")
    return (np.roll(field, -1, axis=0) - np.roll(field, 1, axis=0)) / (2.0 * curve.ds)
