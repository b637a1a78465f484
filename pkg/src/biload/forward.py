"""Forward solution of the coupled six-block integral system and the cost.

The discrete system is a fixed point of one global sweep: every block is
re-evaluated from the previous iterate (Jacobi style), after which the
boundary columns of the trajectory are overwritten with the boundary-trace
block so the two unknowns agree at the walls.  Successive sweeps are
under-relaxed by the factor `relax`; the reported residual is the sup
distance between a state and its sweep image, measured before relaxation.

Starting from the zero bundle, the iteration is deterministic: identical
inputs give bitwise-identical results.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, DivergenceError
from .kernels import (
    KERNEL_SHAPES,
    Problem,
    SlotTables,
    check_finite,
    eval_cost_density,
    eval_kernel,
    forward_contract,
    slot_tables,
)
from .mesh import LEFT, RIGHT, Mesh
from .state import (
    ControlBundle,
    DerivedSlots,
    StateBundle,
    check_state_shapes,
    derive_slots,
    pack,
    sup_distance,
    zero_state,
)

_EQ_TO_BLOCK = {
    "interior": "phi",
    "boundary": "phi_bd",
    "initial": "phi0",
    "final": "phiT",
    "initial_bd": "phi0_bd",
    "final_bd": "phiT_bd",
}


@dataclass(frozen=True)
class SolverConfig:
    tol: float = 1e-10
    relax: float = 1.0
    max_iter: int = 500
    divergence_guard: float = 1e8

    def __post_init__(self):
        if not (0.0 < self.relax <= 1.0):
            raise ConfigError(f"relax must lie in (0, 1], got {self.relax}")
        if self.tol <= 0:
            raise ConfigError(f"tol must be positive, got {self.tol}")
        if self.max_iter < 1:
            raise ConfigError(f"max_iter must be at least 1, got {self.max_iter}")


@dataclass
class SolveReport:
    iterations: int
    final_residual: float
    converged: bool
    residual_history: list = field(default_factory=list)


def _rhs_accumulate(problem: Problem, mesh: Mesh, tables: SlotTables) -> dict:
    """Evaluate all registered kernels and contract onto consumer nodes."""
    n = problem.n
    acc = {
        "interior": np.zeros((mesh.Nt + 1, mesh.Nx + 1, n)),
        "boundary": np.zeros((mesh.Nt + 1, 2, n)),
        "initial": np.zeros((mesh.Nx + 1, n)),
        "final": np.zeros((mesh.Nx + 1, n)),
        "initial_bd": np.zeros((2, n)),
        "final_bd": np.zeros((2, n)),
    }
    for kid in problem.kernels:
        F = eval_kernel(problem, kid, mesh, tables)
        check_finite(f"kernel {kid}", F)
        acc[KERNEL_SHAPES[kid].eq] += forward_contract(mesh, kid, F)
    return acc


def sweep_map(
    problem: Problem,
    mesh: Mesh,
    state: StateBundle,
    controls: ControlBundle,
    slots: DerivedSlots = None,
) -> StateBundle:
    """One full evaluation of the right-hand sides from a state snapshot,
    with the trajectory's wall columns overwritten by the trace block."""
    if slots is None:
        slots = derive_slots(mesh, state)
    tables = slot_tables(state, slots, controls)
    acc = _rhs_accumulate(problem, mesh, tables)
    phi = acc["interior"]
    phi_bd = acc["boundary"]
    phi[:, 0, :] = phi_bd[:, LEFT, :]
    phi[:, -1, :] = phi_bd[:, RIGHT, :]
    return StateBundle(
        phi=phi,
        phi_bd=phi_bd,
        phi0=acc["initial"],
        phiT=acc["final"],
        phi0_bd=acc["initial_bd"],
        phiT_bd=acc["final_bd"],
    )


def rhs_interior(problem, mesh, state, slots, controls, i: int, j: int) -> np.ndarray:
    """Right-hand side of the trajectory equation at node (t_i, x_j).

    Running-integral terms vanish exactly at row i = 0 because their
    quadrature range is empty there.
    """
    tables = slot_tables(state, slots, controls)
    out = np.zeros(problem.n)
    for kid in problem.kernels:
        if KERNEL_SHAPES[kid].eq != "interior":
            continue
        F = eval_kernel(problem, kid, mesh, tables)
        check_finite(f"kernel {kid}", F)
        out += forward_contract(mesh, kid, F)[i, j]
    return out


def rhs_boundary(problem, mesh, state, slots, controls, i: int, side: int) -> np.ndarray:
    """Right-hand side of the boundary-trace equation at (t_i, side)."""
    tables = slot_tables(state, slots, controls)
    out = np.zeros(problem.n)
    for kid in problem.kernels:
        if KERNEL_SHAPES[kid].eq != "boundary":
            continue
        F = eval_kernel(problem, kid, mesh, tables)
        check_finite(f"kernel {kid}", F)
        out += forward_contract(mesh, kid, F)[i, side]
    return out


def rhs_slice(problem, mesh, state, slots, controls, which: str, location: int) -> np.ndarray:
    """Right-hand side of one slice equation at an x node (interior
    slices) or side (boundary slices)."""
    if which not in ("initial", "final", "initial_bd", "final_bd"):
        raise ConfigError(f"unknown slice {which!r}")
    tables = slot_tables(state, slots, controls)
    out = np.zeros(problem.n)
    for kid in problem.kernels:
        if KERNEL_SHAPES[kid].eq != which:
            continue
        F = eval_kernel(problem, kid, mesh, tables)
        check_finite(f"kernel {kid}", F)
        out += forward_contract(mesh, kid, F)[location]
    return out


def _guard(state: StateBundle, guard: float) -> None:
    for name in ("phi", "phi_bd", "phi0", "phiT", "phi0_bd", "phiT_bd"):
        block = getattr(state, name)
        if block.size and not np.all(np.abs(block) <= guard):
            raise DivergenceError(
                f"iteration diverged: block {name} exceeded guard {guard:g}"
            )


def picard_step(
    problem: Problem,
    mesh: Mesh,
    state: StateBundle,
    controls: ControlBundle,
    cfg: SolverConfig,
):
    """One relaxed sweep.  Returns (new_state, residual) with the residual
    measured between the unrelaxed sweep image and the incoming state."""
    check_state_shapes(mesh, state)
    target = sweep_map(problem, mesh, state, controls)
    residual = sup_distance(target, state)
    theta = cfg.relax
    if theta == 1.0:
        return target, residual
    new = StateBundle(
        *(
            (1.0 - theta) * old + theta * tgt
            for old, tgt in zip(state.blocks(), target.blocks())
        )
    )
    return new, residual


def solve_forward(
    problem: Problem,
    mesh: Mesh,
    controls: ControlBundle,
    cfg: SolverConfig = None,
):
    """Picard iteration from the zero bundle.

    Non-convergence within max_iter is reported, not raised; leaving the
    divergence guard envelope raises.
    """
    if cfg is None:
        cfg = SolverConfig()
    state = zero_state(mesh, problem.n)
    history = []
    converged = False
    residual = float("inf")
    iterations = 0
    for _ in range(cfg.max_iter):
        state, residual = picard_step(problem, mesh, state, controls, cfg)
        iterations += 1
        history.append(residual)
        _guard(state, cfg.divergence_guard)
        if residual <= cfg.tol:
            converged = True
            break
    report = SolveReport(
        iterations=iterations,
        final_residual=residual,
        converged=converged,
        residual_history=history,
    )
    return state, report


def eval_cost(
    problem: Problem,
    mesh: Mesh,
    state: StateBundle,
    slots: DerivedSlots,
    controls: ControlBundle,
) -> float:
    """Quadrature evaluation of the cost functional at a state snapshot."""
    tables = slot_tables(state, slots, controls)
    J = 0.0
    for name, _term in problem.cost_terms():
        dens = eval_cost_density(problem, name, mesh, tables)
        check_finite(f"cost {name}", dens)
        if name == "F1":
            J += float(np.einsum("i,j,ij->", mesh.wt, mesh.wx, dens))
        elif name == "G1":
            J += float(np.einsum("i,ib->", mesh.wt, dens))
        elif name == "F0":
            J += float(np.einsum("j,j->", mesh.wx, dens))
        else:  # G0
            J += float(np.sum(dens))
    return J


def residual_flat(
    problem: Problem,
    mesh: Mesh,
    state: StateBundle,
    controls: ControlBundle,
) -> np.ndarray:
    """Flattened fixed-point defect: sweep image minus state.  Zero exactly
    at a solution of the discrete system."""
    target = sweep_map(problem, mesh, state, controls)
    return pack(target) - pack(state)
