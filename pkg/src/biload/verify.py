"""Independent gradient oracles and discrete identity checks.

Two oracles cross-validate the adjoint machinery.  The finite-difference
oracle differentiates the whole pipeline (forward solve plus cost) with
central differences.  The dense discrete oracle linearizes the actual
discrete sweep map around the converged state, solves the transposed
linear system for the multipliers, and returns the exact gradient of the
discrete cost, up to linear-solve roundoff.  The two must agree tightly;
the costate-based gradient converges to them under mesh refinement.

Also here: the two integration-by-parts residuals for running-derivative
cost terms, the closed-curve pairing that certifies the discrete
tangential derivative is exactly skew on a periodic mesh, and refinement
studies.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .adjoint import (
    ControlGradient,
    block_pairing,
    control_gradient,
    partial_cache,
    solve_costate,
)
from .errors import ConfigError, DivergenceError, SingularSystemError
from .forward import SolverConfig, eval_cost, solve_forward
from .kernels import (
    COST_SHAPES,
    KERNEL_SHAPES,
    Problem,
    SlotTables,
    forward_contract,
    slot_tables,
    _arrange,
    _full_letters,
    _slot_letters,
)
from .mesh import CurveMesh, Mesh, StencilKind, apply_stencil, curve_diff
from .state import (
    ControlBundle,
    CoStateBundle,
    StateBundle,
    derive_slots,
    flat_index,
    pack,
    unpack,
    zero_controls,
    zero_state,
)

CONTROL_BLOCKS = ("u", "w", "u0", "uT", "w0", "wT")

_TIGHT = SolverConfig(tol=1e-12, max_iter=2000)


# ---------------------------------------------------------------------------
# Finite-difference oracle
# ---------------------------------------------------------------------------


def _perturbed(controls: ControlBundle, block: str, direction, scale: float):
    new = controls.copy()
    arr = getattr(new, block)
    arr += scale * direction
    return new


def _solve_and_cost(problem, mesh, controls, cfg) -> float:
    state, report = solve_forward(problem, mesh, controls, cfg)
    if not report.converged:
        raise DivergenceError(
            f"forward solve did not converge (residual {report.final_residual:g})"
        )
    slots = derive_slots(mesh, state)
    return eval_cost(problem, mesh, state, slots, controls)


def fd_directional(
    problem: Problem,
    mesh: Mesh,
    controls: ControlBundle,
    block: str,
    direction: np.ndarray,
    eps: float = 1e-5,
    cfg: SolverConfig = None,
) -> float:
    """Central-difference directional derivative of the reduced cost.

    Each evaluation re-solves the forward system at tight tolerance.  The
    step trades truncation against solver-noise amplification; the default
    pairs eps = 1e-5 with tol = 1e-12.
    """
    if eps <= 0:
        raise ConfigError("eps must be positive")
    if getattr(controls, block).shape != np.asarray(direction).shape:
        raise ConfigError(f"direction shape mismatch for block {block!r}")
    cfg = cfg or _TIGHT
    j_up = _solve_and_cost(problem, mesh, _perturbed(controls, block, direction, eps), cfg)
    j_dn = _solve_and_cost(problem, mesh, _perturbed(controls, block, direction, -eps), cfg)
    return (j_up - j_dn) / (2.0 * eps)


# ---------------------------------------------------------------------------
# Dense discrete oracle
# ---------------------------------------------------------------------------


def _control_shapes(mesh: Mesh, m_u: int, m_w: int):
    return (
        ("u", (mesh.Nt + 1, mesh.Nx + 1, m_u)),
        ("w", (mesh.Nt + 1, 2, m_w)),
        ("u0", (mesh.Nx + 1, m_u)),
        ("uT", (mesh.Nx + 1, m_u)),
        ("w0", (2, m_w)),
        ("wT", (2, m_w)),
    )


def _unpack_controls(mesh: Mesh, m_u: int, m_w: int, flat: np.ndarray) -> ControlBundle:
    parts, off = {}, 0
    for name, shape in _control_shapes(mesh, m_u, m_w):
        size = int(np.prod(shape))
        parts[name] = flat[off : off + size].reshape(shape)
        off += size
    return ControlBundle(**parts)


def _pack_controls(controls: ControlBundle) -> np.ndarray:
    return np.concatenate([b.ravel() for b in controls.blocks()])


def _linearized_rhs(problem, mesh, cache, dtables: SlotTables) -> dict:
    """Differential of the right-hand-side accumulation: kernel partials
    at the base state contracted with perturbed slot fields."""
    n = problem.n
    acc = {
        "interior": np.zeros((mesh.Nt + 1, mesh.Nx + 1, n)),
        "boundary": np.zeros((mesh.Nt + 1, 2, n)),
        "initial": np.zeros((mesh.Nx + 1, n)),
        "final": np.zeros((mesh.Nx + 1, n)),
        "initial_bd": np.zeros((2, n)),
        "final_bd": np.zeros((2, n)),
    }
    for kid, kernel in problem.kernels.items():
        shape = KERNEL_SHAPES[kid]
        full = _full_letters(shape)
        letters = _slot_letters(shape)
        dF = None
        for slot in kernel.partials:
            darr = _arrange(dtables.family(shape.family)[slot], letters, full)
            term = np.einsum("...nd,...d->...n", cache[(kid, slot)], darr)
            dF = term if dF is None else dF + term
        if dF is not None:
            acc[shape.eq] += forward_contract(mesh, kid, dF)
    return acc


def _linearized_sweep(problem, mesh, cache, dstate, dcontrols):
    dslots = derive_slots(mesh, dstate)
    dtables = slot_tables(dstate, dslots, dcontrols)
    acc = _linearized_rhs(problem, mesh, cache, dtables)
    phi = acc["interior"]
    phi[:, 0, :] = acc["boundary"][:, 0, :]
    phi[:, -1, :] = acc["boundary"][:, -1, :]
    return StateBundle(
        phi=phi,
        phi_bd=acc["boundary"],
        phi0=acc["initial"],
        phiT=acc["final"],
        phi0_bd=acc["initial_bd"],
        phiT_bd=acc["final_bd"],
    ), dtables


def _linearized_cost(problem, mesh, cache, dtables: SlotTables) -> float:
    dJ = 0.0
    for name, term in problem.cost_terms():
        _shape, families = COST_SHAPES[name]
        for slot in term.partials:
            CF = cache[("cost", name, slot)]
            fam = next(f for f in families if slot in dtables.family(f))
            darr = dtables.family(fam)[slot]
            if name == "F1":
                dJ += float(np.einsum("i,j,ijd,ijd->", mesh.wt, mesh.wx, CF, darr))
            elif name == "G1":
                dJ += float(np.einsum("i,ibd,ibd->", mesh.wt, CF, darr))
            elif name == "F0":
                dJ += float(np.einsum("j,jd,jd->", mesh.wx, CF, darr))
            else:
                dJ += float(np.sum(CF * darr))
    return dJ


@dataclass
class DtoResult:
    grad: ControlGradient
    multipliers: CoStateBundle
    state: StateBundle


def dto_solve(
    problem: Problem,
    mesh: Mesh,
    controls: ControlBundle,
    cfg: SolverConfig = None,
    size_cap: int = 1500,
) -> DtoResult:
    """Exact gradient of the discrete reduced cost via dense linearization.

    Builds the Jacobian of the fixed-point defect column by column with
    the linearized sweep, solves the transposed system for the
    multipliers, and maps the result back to control-block shape (nodal
    convention: entries are plain partials with respect to nodal control
    values, quadrature weights included).
    """
    idx = flat_index(mesh, problem.n)
    if idx.total > size_cap:
        raise ConfigError(
            f"dense oracle limited to {size_cap} unknowns, grid has {idx.total}"
        )
    cfg = cfg or _TIGHT
    state, report = solve_forward(problem, mesh, controls, cfg)
    if not report.converged:
        raise DivergenceError("forward solve did not converge for the dense oracle")
    slots = derive_slots(mesh, state)
    tables = slot_tables(state, slots, controls)
    cache = partial_cache(problem, mesh, tables)

    N = idx.total
    A = np.empty((N, N))
    dJdPhi = np.empty(N)
    zctrl = zero_controls(mesh, problem.m_u, problem.m_w)
    basis = np.zeros(N)
    for col in range(N):
        basis[col] = 1.0
        dstate = unpack(idx, basis)
        dsw, dtables = _linearized_sweep(problem, mesh, cache, dstate, zctrl)
        A[:, col] = pack(dsw) - basis
        dJdPhi[col] = _linearized_cost(problem, mesh, cache, dtables)
        basis[col] = 0.0

    M = sum(int(np.prod(s)) for _, s in _control_shapes(mesh, problem.m_u, problem.m_w))
    B = np.empty((N, M))
    dJdU = np.empty(M)
    zst = zero_state(mesh, problem.n)
    cbasis = np.zeros(M)
    for col in range(M):
        cbasis[col] = 1.0
        dctrl = _unpack_controls(mesh, problem.m_u, problem.m_w, cbasis)
        dsw, dtables = _linearized_sweep(problem, mesh, cache, zst, dctrl)
        B[:, col] = pack(dsw)
        dJdU[col] = _linearized_cost(problem, mesh, cache, dtables)
        cbasis[col] = 0.0

    try:
        lam = np.linalg.solve(A.T, -dJdPhi)
    except np.linalg.LinAlgError as exc:
        raise SingularSystemError(
            "discrete fixed point has a singular linearization"
        ) from exc
    grad_flat = dJdU + B.T @ lam
    gb = _unpack_controls(mesh, problem.m_u, problem.m_w, grad_flat)
    mult = unpack(idx, lam)
    return DtoResult(
        grad=ControlGradient(
            g_u=gb.u, g_w=gb.w, g_u0=gb.u0, g_uT=gb.uT, g_w0=gb.w0, g_wT=gb.wT
        ),
        multipliers=CoStateBundle(
            psi=mult.phi,
            omega=mult.phi_bd,
            psi0=mult.phi0,
            psiT=mult.phiT,
            omega0=mult.phi0_bd,
            omegaT=mult.phiT_bd,
        ),
        state=state,
    )


def dto_gradient(
    problem: Problem,
    mesh: Mesh,
    controls: ControlBundle,
    cfg: SolverConfig = None,
    size_cap: int = 1500,
) -> ControlGradient:
    return dto_solve(problem, mesh, controls, cfg, size_cap).grad


# ---------------------------------------------------------------------------
# Integration-by-parts and skew-adjoint identities
# ---------------------------------------------------------------------------


def _as_field(mesh: Mesh, arr: np.ndarray) -> np.ndarray:
    arr = np.asarray(arr, dtype=float)
    if arr.ndim == 2:
        arr = arr[:, :, None]
    if arr.shape[:2] != (mesh.Nt + 1, mesh.Nx + 1):
        raise ConfigError(f"field shape {arr.shape} does not match the grid")
    return arr


def _quad_q(mesh: Mesh, dens: np.ndarray) -> float:
    return float(np.einsum("i,j,ijn->", mesh.wt, mesh.wx, dens))


def _bd_normal_sum(mesh: Mesh, field: np.ndarray) -> float:
    """Time-quadrature of the normal-weighted wall values of a field."""
    vals = field[:, -1, :].sum(axis=-1) - field[:, 0, :].sum(axis=-1)
    return float(np.dot(mesh.wt, vals))


def ibp_residual(mesh: Mesh, grad_p, grad_p_dot, delta_phi):
    """Discrete defects of the two summation-by-parts identities moving a
    spatial (r1) and a mixed space-time (r2) derivative off a smooth test
    field.

    r1:  <A, Dx dphi>_Q  =  sum_walls n A dphi dt  -  <Dx A, dphi>_Q
    r2:  <A', Dt Dx dphi>_Q  =  endpoint wall terms  -  endpoint interior
         terms with Dx A'  -  <n Dt A', dphi>_walls  +  <Dtx A', dphi>_Q

    Both vanish exactly when the corresponding field is absent and decay
    with refinement for smooth data.
    """
    A = _as_field(mesh, grad_p)
    A2 = _as_field(mesh, grad_p_dot)
    dphi = _as_field(mesh, delta_phi)

    dp = apply_stencil(mesh, StencilKind.Dx, dphi)
    lhs1 = _quad_q(mesh, A * dp)
    bterm1 = _bd_normal_sum(mesh, A * dphi)
    body1 = _quad_q(mesh, apply_stencil(mesh, StencilKind.Dx, A) * dphi)
    r1 = lhs1 - (bterm1 - body1)

    dpdot = apply_stencil(mesh, StencilKind.Dtx, dphi)
    lhs2 = _quad_q(mesh, A2 * dpdot)
    prod = A2 * dphi
    end_walls = float(
        (prod[-1, -1, :].sum() - prod[-1, 0, :].sum())
        - (prod[0, -1, :].sum() - prod[0, 0, :].sum())
    )
    dxA2 = apply_stencil(mesh, StencilKind.Dx, A2)
    end_body = -float(
        np.einsum("j,jn->", mesh.wx, dxA2[-1] * dphi[-1] - dxA2[0] * dphi[0])
    )
    dtA2 = apply_stencil(mesh, StencilKind.Dt, A2)
    walls = -_bd_normal_sum(mesh, dtA2 * dphi)
    body2 = _quad_q(mesh, apply_stencil(mesh, StencilKind.Dtx, A2) * dphi)
    r2 = lhs2 - (end_walls + end_body + walls + body2)
    return float(r1), float(r2)


def skew_adjoint_residual(curve: CurveMesh, psi: np.ndarray, phi: np.ndarray) -> float:
    """Closed-curve pairing sum_k [psi (D phi) + (D psi) phi] ds.

    Exactly zero (to roundoff) for periodic centered differences: the
    telescoping discrete counterpart of an integral over a manifold with
    empty boundary.
    """
    psi = np.asarray(psi, dtype=float)
    phi = np.asarray(phi, dtype=float)
    if psi.shape != phi.shape or psi.shape[0] != curve.M:
        raise ConfigError("field shapes must match the curve mesh")
    total = psi * curve_diff(curve, phi) + curve_diff(curve, psi) * phi
    return float(np.sum(total) * curve.ds)


# ---------------------------------------------------------------------------
# Smooth test directions
# ---------------------------------------------------------------------------

_N_BASIS = 3


def _basis(z: np.ndarray) -> np.ndarray:
    return np.stack([np.ones_like(z), np.sin(np.pi * z), z * (1.0 - z)])


def smooth_direction(mesh: Mesh, block: str, m: int, rng) -> np.ndarray:
    """A mesh-independent smooth random field shaped like a control block.

    Coefficients are drawn from rng in a fixed order, so the same seed
    produces samples of the same underlying function on any mesh.
    """
    tau = mesh.t / mesh.T_final
    zeta = (mesh.x - mesh.x_a) / (mesh.x_b - mesh.x_a)
    if block == "u":
        C = rng.standard_normal((_N_BASIS, _N_BASIS, m))
        return np.einsum("at,bx,abm->txm", _basis(tau), _basis(zeta), C)
    if block == "w":
        C = rng.standard_normal((_N_BASIS, 2, m))
        return np.einsum("at,abm->tbm", _basis(tau), C)
    if block in ("u0", "uT"):
        C = rng.standard_normal((_N_BASIS, m))
        return np.einsum("bx,bm->xm", _basis(zeta), C)
    if block in ("w0", "wT"):
        return rng.standard_normal((2, m))
    raise ConfigError(f"unknown control block {block!r}")


def _block_dim(problem: Problem, block: str) -> int:
    return problem.m_u if block in ("u", "u0", "uT") else problem.m_w


# ---------------------------------------------------------------------------
# Gradient triangle check
# ---------------------------------------------------------------------------


def _rel_gap(a: float, b: float) -> float:
    return abs(a - b) / max(abs(a), abs(b), 1e-9)


@dataclass
class GradCheckEntry:
    block: str
    direction: int
    fd: float
    adjoint: float
    dto: float | None
    err_adjoint: float
    err_dto: float | None


@dataclass
class GradCheckReport:
    entries: list = field(default_factory=list)
    seed: int = 0
    fd_eps: float = 1e-5
    tol_dto: float = 1e-5
    tol_adjoint: float = 1e-2
    mesh_level: tuple = (0, 0)  # (Nt, Nx)

    @property
    def passed(self) -> bool:
        for e in self.entries:
            if e.err_dto is not None and e.err_dto > self.tol_dto:
                return False
            if e.err_adjoint > self.tol_adjoint:
                return False
        return True

    def failing_blocks(self) -> list:
        bad = []
        for e in self.entries:
            dto_bad = e.err_dto is not None and e.err_dto > self.tol_dto
            if (dto_bad or e.err_adjoint > self.tol_adjoint) and e.block not in bad:
                bad.append(e.block)
        return bad


def gradient_check(
    problem: Problem,
    mesh: Mesh,
    controls: ControlBundle,
    n_dirs: int = 5,
    seed: int = 0,
    cfg: SolverConfig = None,
    costate_cfg: SolverConfig = None,
    fd_eps: float = 1e-5,
    tol_dto: float = 1e-5,
    tol_adjoint: float = 1e-2,
    use_dto: bool = None,
    blocks=None,
) -> GradCheckReport:
    """Cross-validate adjoint and dense-oracle directional derivatives
    against central differences over random smooth directions.

    The dense oracle participates automatically when the grid is inside
    its size cap.  Deterministic for fixed (seed, inputs).
    """
    if n_dirs < 1:
        raise ConfigError("n_dirs must be at least 1")
    cfg = cfg or _TIGHT
    costate_cfg = costate_cfg or cfg
    idx = flat_index(mesh, problem.n)
    if use_dto is None:
        use_dto = idx.total <= 1500
    state, rep = solve_forward(problem, mesh, controls, cfg)
    if not rep.converged:
        raise DivergenceError("forward solve did not converge for gradient check")
    slots = derive_slots(mesh, state)
    costate, crep = solve_costate(problem, mesh, state, slots, controls, costate_cfg)
    if not crep.converged:
        raise DivergenceError("costate solve did not converge for gradient check")
    grad = control_gradient(problem, mesh, state, slots, controls, costate)
    dto = dto_solve(problem, mesh, controls, cfg).grad if use_dto else None

    if blocks is None:
        blocks = [b for b in CONTROL_BLOCKS if _block_dim(problem, b) > 0]
    report = GradCheckReport(
        seed=seed,
        fd_eps=fd_eps,
        tol_dto=tol_dto,
        tol_adjoint=tol_adjoint,
        mesh_level=(mesh.Nt, mesh.Nx),
    )
    rng = np.random.default_rng(seed)
    for block in blocks:
        m = _block_dim(problem, block)
        for k in range(n_dirs):
            direction = smooth_direction(mesh, block, m, rng)
            fd = fd_directional(problem, mesh, controls, block, direction, fd_eps, cfg)
            adj = block_pairing(mesh, block, grad.block(block), direction)
            dto_val = None
            err_dto = None
            if dto is not None:
                dto_val = float(np.sum(dto.block(block) * direction))
                err_dto = _rel_gap(dto_val, fd)
            report.entries.append(
                GradCheckEntry(
                    block=block,
                    direction=k,
                    fd=fd,
                    adjoint=adj,
                    dto=dto_val,
                    err_adjoint=_rel_gap(adj, fd),
                    err_dto=err_dto,
                )
            )
    return report


# ---------------------------------------------------------------------------
# Refinement studies
# ---------------------------------------------------------------------------


@dataclass
class RefinementRow:
    level: int
    Nt: int
    Nx: int
    value: float
    order: float | None


@dataclass
class RefinementTable:
    metric: str
    rows: list = field(default_factory=list)

    def orders(self) -> list:
        return [r.order for r in self.rows if r.order is not None]

    def values(self) -> list:
        return [r.value for r in self.rows]


def _refined(mesh: Mesh, factor: int) -> Mesh:
    from .mesh import build_mesh

    return build_mesh(
        mesh.T_final, mesh.Nt * factor, mesh.x_a, mesh.x_b, mesh.Nx * factor
    )


def forward_sup_error(problem, mesh, controls, reference, cfg) -> float:
    """Sup-norm trajectory error against an analytic reference, measured
    on interior columns (wall columns belong to the trace unknown)."""
    state, rep = solve_forward(problem, mesh, controls, cfg)
    if not rep.converged:
        raise DivergenceError("forward solve did not converge in refinement study")
    ref = np.asarray(reference(mesh.t, mesh.x), dtype=float)
    if ref.ndim == 2:
        ref = ref[:, :, None]
    diff = np.abs(state.phi - ref)[:, 1:-1, :]
    return float(np.max(diff))


def gradient_gap(
    problem, mesh, controls, block="u", seed=0, fd_eps=1e-5, cfg=None, costate_cfg=None
) -> float:
    """Relative gap between the costate-gradient pairing and the central
    difference, for one seeded smooth direction."""
    cfg = cfg or _TIGHT
    costate_cfg = costate_cfg or cfg
    state, rep = solve_forward(problem, mesh, controls, cfg)
    if not rep.converged:
        raise DivergenceError("forward solve did not converge in gradient gap")
    slots = derive_slots(mesh, state)
    costate, crep = solve_costate(problem, mesh, state, slots, controls, costate_cfg)
    if not crep.converged:
        raise DivergenceError("costate solve did not converge in gradient gap")
    grad = control_gradient(problem, mesh, state, slots, controls, costate)
    rng = np.random.default_rng(seed)
    direction = smooth_direction(mesh, block, _block_dim(problem, block), rng)
    fd = fd_directional(problem, mesh, controls, block, direction, fd_eps, cfg)
    adj = block_pairing(mesh, block, grad.block(block), direction)
    return _rel_gap(adj, fd)


def _ibp_test_fields(mesh: Mesh):
    tau = (mesh.t / mesh.T_final)[:, None]
    zeta = ((mesh.x - mesh.x_a) / (mesh.x_b - mesh.x_a))[None, :]
    A = np.cos(tau) * np.sin(np.pi * zeta) + 0.3 * tau * zeta
    A2 = np.sin(1.0 + tau) * np.cos(np.pi * zeta)
    dphi = np.exp(zeta - tau) * np.sin(np.pi * zeta * 0.7 + 0.2 * tau)
    return A, A2, dphi


def refinement_study(
    problem: Problem,
    mesh: Mesh,
    levels: int,
    metric: str,
    controls: ControlBundle = None,
    reference=None,
    block: str = "u",
    seed: int = 0,
    fd_eps: float = 1e-5,
    cfg: SolverConfig = None,
    costate_cfg: SolverConfig = None,
) -> RefinementTable:
    """Halve dt and dx `levels` times and report the chosen metric with
    observed orders log2(e_k / e_{k+1})."""
    if levels < 3:
        raise ConfigError("refinement study needs at least 3 levels")
    if metric not in ("forward_error", "gradient_gap", "ibp_residual"):
        raise ConfigError(f"unknown metric {metric!r}")
    if metric == "forward_error" and reference is None:
        raise ConfigError("forward_error metric needs an analytic reference")
    table = RefinementTable(metric=metric)
    prev = None
    for level in range(levels):
        m = _refined(mesh, 2**level)
        lvl_cfg = cfg(m) if callable(cfg) else cfg
        lvl_costate_cfg = costate_cfg(m) if callable(costate_cfg) else costate_cfg
        if metric == "ibp_residual":
            A, A2, dphi = _ibp_test_fields(m)
            r1, r2 = ibp_residual(m, A, A2, dphi)
            value = abs(r1) + abs(r2)
        else:
            if controls is None:
                ctrl = zero_controls(m, problem.m_u, problem.m_w)
            elif callable(controls):
                ctrl = controls(m)
            else:
                raise ConfigError(
                    "controls must be None or a mesh -> ControlBundle builder "
                    "(control arrays are mesh-shaped and cannot cross levels)"
                )
            if metric == "forward_error":
                value = forward_sup_error(
                    problem, m, ctrl, reference, lvl_cfg or _TIGHT
                )
            else:
                value = gradient_gap(
                    problem, m, ctrl, block, seed, fd_eps, lvl_cfg, lvl_costate_cfg
                )
        order = None if prev is None else math.log2(max(prev, 1e-300) / max(value, 1e-300))
        table.rows.append(
            RefinementRow(level=level, Nt=m.Nt, Nx=m.Nx, value=value, order=order)
        )
        prev = value
    return table
