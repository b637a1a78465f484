"""State, control, and costate containers plus derived-slot computation.

The unknown has six blocks: the trajectory phi on the full grid, its
boundary trace trajectory phi_bd (a separate unknown, reconciled with the
boundary columns of phi by the forward solver), and the four initial/final
slices phi0, phiT, phi0_bd, phiT_bd.  Initial and final slices are
deliberately independent of the first/last rows of phi: the system is
allowed to jump at t = 0 and t = T.

derive_slots produces every derived field the kernels may read: spatial
derivatives p = Dx phi and q = Dxx phi, time derivatives of phi/p/q, the
boundary traces of p (one-sided stencils reading interior values plus the
governing boundary unknown at the wall), and the slice derivatives.
"""

from __future__ import annotations

from dataclasses import dataclass, fields as dc_fields

import numpy as np

from .errors import ShapeError
from .mesh import LEFT, RIGHT, Mesh, StencilKind, apply_stencil

_STATE_BLOCKS = ("phi", "phi_bd", "phi0", "phiT", "phi0_bd", "phiT_bd")
_CONTROL_BLOCKS = ("u", "w", "u0", "uT", "w0", "wT")


@dataclass
class StateBundle:
    phi: np.ndarray  # (Nt+1, Nx+1, n)
    phi_bd: np.ndarray  # (Nt+1, 2, n)
    phi0: np.ndarray  # (Nx+1, n)
    phiT: np.ndarray  # (Nx+1, n)
    phi0_bd: np.ndarray  # (2, n)
    phiT_bd: np.ndarray  # (2, n)

    @property
    def n(self) -> int:
        return self.phi.shape[2]

    def blocks(self):
        return tuple(getattr(self, name) for name in _STATE_BLOCKS)

    def copy(self) -> "StateBundle":
        return StateBundle(*(b.copy() for b in self.blocks()))


def zero_state(mesh: Mesh, n: int) -> StateBundle:
    return StateBundle(
        phi=np.zeros((mesh.Nt + 1, mesh.Nx + 1, n)),
        phi_bd=np.zeros((mesh.Nt + 1, 2, n)),
        phi0=np.zeros((mesh.Nx + 1, n)),
        phiT=np.zeros((mesh.Nx + 1, n)),
        phi0_bd=np.zeros((2, n)),
        phiT_bd=np.zeros((2, n)),
    )


def check_state_shapes(mesh: Mesh, state: StateBundle) -> int:
    """Validate all six blocks against the mesh; returns the state dimension."""
    n = state.phi.shape[-1] if state.phi.ndim == 3 else -1
    expected = {
        "phi": (mesh.Nt + 1, mesh.Nx + 1, n),
        "phi_bd": (mesh.Nt + 1, 2, n),
        "phi0": (mesh.Nx + 1, n),
        "phiT": (mesh.Nx + 1, n),
        "phi0_bd": (2, n),
        "phiT_bd": (2, n),
    }
    for name, shape in expected.items():
        got = getattr(state, name).shape
        if got != shape:
            raise ShapeError(f"state block {name}: expected shape {shape}, got {got}")
    return n


@dataclass
class ControlBundle:
    u: np.ndarray  # (Nt+1, Nx+1, m_u)
    w: np.ndarray  # (Nt+1, 2, m_w)
    u0: np.ndarray  # (Nx+1, m_u)
    uT: np.ndarray  # (Nx+1, m_u)
    w0: np.ndarray  # (2, m_w)
    wT: np.ndarray  # (2, m_w)

    @property
    def m_u(self) -> int:
        return self.u.shape[2]

    @property
    def m_w(self) -> int:
        return self.w.shape[2]

    def blocks(self):
        return tuple(getattr(self, name) for name in _CONTROL_BLOCKS)

    def copy(self) -> "ControlBundle":
        return ControlBundle(*(b.copy() for b in self.blocks()))


def zero_controls(mesh: Mesh, m_u: int, m_w: int) -> ControlBundle:
    return ControlBundle(
        u=np.zeros((mesh.Nt + 1, mesh.Nx + 1, m_u)),
        w=np.zeros((mesh.Nt + 1, 2, m_w)),
        u0=np.zeros((mesh.Nx + 1, m_u)),
        uT=np.zeros((mesh.Nx + 1, m_u)),
        w0=np.zeros((2, m_w)),
        wT=np.zeros((2, m_w)),
    )


@dataclass
class CoStateBundle:
    psi: np.ndarray  # (Nt+1, Nx+1, n)
    omega: np.ndarray  # (Nt+1, 2, n)
    psi0: np.ndarray  # (Nx+1, n)
    psiT: np.ndarray  # (Nx+1, n)
    omega0: np.ndarray  # (2, n)
    omegaT: np.ndarray  # (2, n)

    def blocks(self):
        return tuple(
            getattr(self, f.name) for f in dc_fields(self)
        )

    def copy(self) -> "CoStateBundle":
        return CoStateBundle(*(b.copy() for b in self.blocks()))


def zero_costate(mesh: Mesh, n: int) -> CoStateBundle:
    return CoStateBundle(
        psi=np.zeros((mesh.Nt + 1, mesh.Nx + 1, n)),
        omega=np.zeros((mesh.Nt + 1, 2, n)),
        psi0=np.zeros((mesh.Nx + 1, n)),
        psiT=np.zeros((mesh.Nx + 1, n)),
        omega0=np.zeros((2, n)),
        omegaT=np.zeros((2, n)),
    )


@dataclass
class DerivedSlots:
    """All derived fields the kernels and cost integrands may read.

    phi_bd_dot is the time derivative of the governed boundary unknown
    phi_bd, not of the trace of phi.
    """

    p: np.ndarray
    q: np.ndarray
    phi_dot: np.ndarray
    p_dot: np.ndarray
    q_dot: np.ndarray
    phi_bd_dot: np.ndarray
    p_bd: np.ndarray
    p_dot_bd: np.ndarray
    p0: np.ndarray
    q0: np.ndarray
    pT: np.ndarray
    qT: np.ndarray
    p0_bd: np.ndarray
    pT_bd: np.ndarray


def _edge_gradient(mesh: Mesh, interior: np.ndarray, wall: np.ndarray) -> np.ndarray:
    """One-sided d/dx at the two walls, reading the wall unknown plus the
    two nearest interior columns.

    interior: (..., Nx+1, n) slice or field rows; wall: (..., 2, n).
    """
    dx = mesh.dx
    left = (-1.5 * wall[..., LEFT, :] + 2.0 * interior[..., 1, :] - 0.5 * interior[..., 2, :]) / dx
    right = (1.5 * wall[..., RIGHT, :] - 2.0 * interior[..., -2, :] + 0.5 * interior[..., -3, :]) / dx
    return np.stack([left, right], axis=-2)


def derive_slots(mesh: Mesh, state: StateBundle) -> DerivedSlots:
    check_state_shapes(mesh, state)
    p = apply_stencil(mesh, StencilKind.Dx, state.phi)
    q = apply_stencil(mesh, StencilKind.Dxx, state.phi)
    phi_dot = apply_stencil(mesh, StencilKind.Dt, state.phi)
    p_dot = np.tensordot(mesh.d1_t, p, axes=(1, 0))
    q_dot = np.tensordot(mesh.d1_t, q, axes=(1, 0))
    phi_bd_dot = np.tensordot(mesh.d1_t, state.phi_bd, axes=(1, 0))
    p_bd = _edge_gradient(mesh, state.phi, state.phi_bd)
    p_dot_bd = np.tensordot(mesh.d1_t, p_bd, axes=(1, 0))
    return DerivedSlots(
        p=p,
        q=q,
        phi_dot=phi_dot,
        p_dot=p_dot,
        q_dot=q_dot,
        phi_bd_dot=phi_bd_dot,
        p_bd=p_bd,
        p_dot_bd=p_dot_bd,
        p0=np.tensordot(mesh.d1_x, state.phi0, axes=(1, 0)),
        q0=np.tensordot(mesh.d2_x, state.phi0, axes=(1, 0)),
        pT=np.tensordot(mesh.d1_x, state.phiT, axes=(1, 0)),
        qT=np.tensordot(mesh.d2_x, state.phiT, axes=(1, 0)),
        p0_bd=_edge_gradient(mesh, state.phi0, state.phi0_bd),
        pT_bd=_edge_gradient(mesh, state.phiT, state.phiT_bd),
    )


@dataclass(frozen=True)
class FlatIndex:
    """Deterministic bijection between the six state blocks and a flat
    coordinate range.

    Block order: phi (t-major, then x, then component), phi_bd, phi0,
    phiT, phi0_bd, phiT_bd.
    """

    Nt: int
    Nx: int
    n: int

    @property
    def shapes(self):
        nt, nx, n = self.Nt + 1, self.Nx + 1, self.n
        return (
            (nt, nx, n),
            (nt, 2, n),
            (nx, n),
            (nx, n),
            (2, n),
            (2, n),
        )

    @property
    def sizes(self):
        return tuple(int(np.prod(s)) for s in self.shapes)

    @property
    def offsets(self):
        out, acc = [], 0
        for s in self.sizes:
            out.append(acc)
            acc += s
        return tuple(out)

    @property
    def total(self) -> int:
        return sum(self.sizes)


def flat_index(mesh: Mesh, n: int) -> FlatIndex:
    return FlatIndex(Nt=mesh.Nt, Nx=mesh.Nx, n=n)


def pack(state: StateBundle) -> np.ndarray:
    return np.concatenate([b.ravel() for b in state.blocks()])


def unpack(idx: FlatIndex, flat: np.ndarray) -> StateBundle:
    flat = np.asarray(flat, dtype=float)
    if flat.shape != (idx.total,):
        raise ShapeError(f"expected flat length {idx.total}, got {flat.shape}")
    parts = []
    for off, size, shape in zip(idx.offsets, idx.sizes, idx.shapes):
        parts.append(flat[off : off + size].reshape(shape))
    return StateBundle(*parts)


def sup_distance(a: StateBundle, b: StateBundle) -> float:
    """Maximum absolute componentwise difference over all six blocks."""
    worst = 0.0
    for ba, bb in zip(a.blocks(), b.blocks()):
        if ba.shape != bb.shape:
            raise ShapeError(f"mismatched block shapes {ba.shape} vs {bb.shape}")
        if ba.size:
            worst = max(worst, float(np.max(np.abs(ba - bb))))
    return worst
