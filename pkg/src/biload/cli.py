"""Command-line entry point.

Reads a line-oriented config with bracketed sections ([mesh], [model],
[solver], [optimize], [controls], [output]), `key = value` pairs, and
`#` comments.  Unknown sections or keys abort before any computation.
Subcommands: solve, cost, grad-check, optimize, ibp-demo, curve-demo,
refine.  All outputs are CSV files, byte-identical across runs for a
fixed config and seed.

Exit status: 0 on success (and a passing grad-check), 1 for a failing
grad-check, 2 for config errors, 3 for solver failures.
"""

from __future__ import annotations

import argparse
import sys
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .adjoint import control_gradient, solve_costate
from .errors import ConfigError, DivergenceError, KernelEvalError, SingularSystemError
from .forward import SolverConfig, eval_cost, solve_forward
from .mesh import Mesh, build_curve_mesh, build_mesh
from .models import (
    MODEL_SCHEMAS,
    ModelParams,
    make_model,
    make_params,
    model_reference,
    picard_relax_hint,
)
from .optimize import OptimizeOptions, run_gd
from .state import ControlBundle, derive_slots, zero_controls
from .verify import (
    gradient_check,
    ibp_residual,
    refinement_study,
    skew_adjoint_residual,
    _ibp_test_fields,
)

_CONTROL_BLOCKS = ("u", "w", "u0", "uT", "w0", "wT")

#: profile name -> (allowed block kinds, builder)
_TX_BLOCKS = ("u", "w")
_X_BLOCKS = ("u0", "uT")


@dataclass
class RunSpec:
    mesh: dict
    model: ModelParams
    solver: dict  # tol, relax ("auto" or float), max_iter, divergence_guard
    optimize: OptimizeOptions
    controls: dict  # block -> ("const", value) or ("profile", name)
    outdir: str


_MESH_KEYS = {"T_final": float, "Nt": int, "x_a": float, "x_b": float, "Nx": int}
_SOLVER_KEYS = {
    "tol": float,
    "relax": str,
    "max_iter": int,
    "divergence_guard": float,
}
_SOLVER_DEFAULTS = {"tol": 1e-10, "relax": "auto", "max_iter": 500, "divergence_guard": 1e8}
_OPT_KEYS = {
    "max_outer": int,
    "armijo_c": float,
    "backtrack": float,
    "step0": float,
    "gtol": float,
}
_PROFILES = ("zero", "one", "sin_x", "sin_t", "bump_x")


def _strip(line: str) -> str:
    if "#" in line:
        line = line[: line.index("#")]
    return line.strip()


def parse_config(text: str) -> RunSpec:
    """Parse and validate a config document; fail closed on anything
    unrecognized, reporting the offending line."""
    sections: dict = {}
    current = None
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = _strip(raw)
        if not line:
            continue
        if line.startswith("[") and line.endswith("]"):
            name = line[1:-1].strip()
            if name not in ("mesh", "model", "solver", "optimize", "controls", "output"):
                raise ConfigError(f"line {lineno}: unknown section [{name}]")
            if name in sections:
                raise ConfigError(f"line {lineno}: duplicate section [{name}]")
            sections[name] = {}
            current = name
            continue
        if "=" not in line or current is None:
            raise ConfigError(f"line {lineno}: expected 'key = value' inside a section")
        key, _, value = line.partition("=")
        key, value = key.strip(), value.strip()
        if not key or not value:
            raise ConfigError(f"line {lineno}: malformed entry {line!r}")
        if key in sections[current]:
            raise ConfigError(f"line {lineno}: duplicate key {key!r}")
        sections[current][key] = (value, lineno)

    if "mesh" not in sections:
        raise ConfigError("missing required section [mesh]")
    if "model" not in sections or "name" not in sections["model"]:
        raise ConfigError("missing required section [model] with a name key")

    mesh = {}
    for key, conv in _MESH_KEYS.items():
        if key not in sections["mesh"]:
            raise ConfigError(f"[mesh] is missing key {key!r}")
        value, lineno = sections["mesh"].pop(key)
        try:
            mesh[key] = conv(value)
        except ValueError:
            raise ConfigError(f"line {lineno}: bad value for {key}: {value!r}") from None
    for key, (_, lineno) in sections["mesh"].items():
        raise ConfigError(f"line {lineno}: unknown key {key!r} in [mesh]")
    if mesh["Nt"] < 4:
        raise ConfigError("Nt must be at least 4")
    if mesh["Nx"] < 4:
        raise ConfigError("Nx must be at least 4")
    if not mesh["T_final"] > 0:
        raise ConfigError("T_final must be positive")
    if not mesh["x_a"] < mesh["x_b"]:
        raise ConfigError("need x_a < x_b")

    model_items = dict(sections["model"])
    name, _ = model_items.pop("name")
    if name not in MODEL_SCHEMAS:
        raise ConfigError(f"unknown model {name!r}")
    overrides = {}
    for key, (value, lineno) in model_items.items():
        if key not in MODEL_SCHEMAS[name]:
            raise ConfigError(f"line {lineno}: model {name} has no parameter {key!r}")
        try:
            overrides[key] = float(value)
        except ValueError:
            raise ConfigError(f"line {lineno}: bad value for {key}: {value!r}") from None
    params = make_params(name, **overrides)

    solver = dict(_SOLVER_DEFAULTS)
    for key, (value, lineno) in sections.get("solver", {}).items():
        if key not in _SOLVER_KEYS:
            raise ConfigError(f"line {lineno}: unknown key {key!r} in [solver]")
        if key == "relax":
            if value != "auto":
                try:
                    rv = float(value)
                except ValueError:
                    raise ConfigError(
                        f"line {lineno}: relax must be 'auto' or a number"
                    ) from None
                if not (0.0 < rv <= 1.0):
                    raise ConfigError(f"line {lineno}: relax must lie in (0, 1]")
                solver[key] = rv
        else:
            try:
                solver[key] = _SOLVER_KEYS[key](value)
            except ValueError:
                raise ConfigError(
                    f"line {lineno}: bad value for {key}: {value!r}"
                ) from None
    if solver["tol"] <= 0:
        raise ConfigError("tol must be positive")
    if solver["max_iter"] < 1:
        raise ConfigError("max_iter must be at least 1")

    opt_kwargs = {}
    for key, (value, lineno) in sections.get("optimize", {}).items():
        if key not in _OPT_KEYS:
            raise ConfigError(f"line {lineno}: unknown key {key!r} in [optimize]")
        try:
            opt_kwargs[key] = _OPT_KEYS[key](value)
        except ValueError:
            raise ConfigError(f"line {lineno}: bad value for {key}: {value!r}") from None
    try:
        options = OptimizeOptions(**opt_kwargs)
    except ConfigError as exc:
        raise ConfigError(f"[optimize]: {exc}") from None

    controls = {block: ("const", 0.0) for block in _CONTROL_BLOCKS}
    for key, (value, lineno) in sections.get("controls", {}).items():
        if key not in _CONTROL_BLOCKS:
            raise ConfigError(f"line {lineno}: unknown key {key!r} in [controls]")
        try:
            controls[key] = ("const", float(value))
            continue
        except ValueError:
            pass
        if value not in _PROFILES:
            raise ConfigError(
                f"line {lineno}: control init must be a number or one of "
                f"{', '.join(_PROFILES)}"
            )
        controls[key] = ("profile", value)

    outdir = "out"
    for key, (value, lineno) in sections.get("output", {}).items():
        if key != "dir":
            raise ConfigError(f"line {lineno}: unknown key {key!r} in [output]")
        outdir = value

    return RunSpec(
        mesh=mesh,
        model=params,
        solver=solver,
        optimize=options,
        controls=controls,
        outdir=outdir,
    )


def _profile_field(mesh: Mesh, block: str, name: str) -> np.ndarray:
    tau = mesh.t / mesh.T_final
    zeta = (mesh.x - mesh.x_a) / (mesh.x_b - mesh.x_a)
    if name == "zero":
        return 0.0
    if name == "one":
        return 1.0
    if name == "sin_x":
        if block in _TX_BLOCKS and block != "u":
            raise ConfigError(f"profile sin_x is not defined for block {block!r}")
        if block == "u":
            return np.sin(np.pi * zeta)[None, :, None]
        if block in _X_BLOCKS:
            return np.sin(np.pi * zeta)[:, None]
        raise ConfigError(f"profile sin_x is not defined for block {block!r}")
    if name == "sin_t":
        if block == "u":
            return np.sin(np.pi * tau)[:, None, None]
        if block == "w":
            return np.sin(np.pi * tau)[:, None, None]
        raise ConfigError(f"profile sin_t is not defined for block {block!r}")
    if name == "bump_x":
        if block == "u":
            return (4.0 * zeta * (1.0 - zeta))[None, :, None]
        if block in _X_BLOCKS:
            return (4.0 * zeta * (1.0 - zeta))[:, None]
        raise ConfigError(f"profile bump_x is not defined for block {block!r}")
    raise ConfigError(f"unknown profile {name!r}")


def build_controls(spec: RunSpec, mesh: Mesh, problem) -> ControlBundle:
    ctrl = zero_controls(mesh, problem.m_u, problem.m_w)
    for block, (kind, value) in spec.controls.items():
        arr = getattr(ctrl, block)
        if arr.size == 0:
            continue
        if kind == "const":
            arr += value
        else:
            arr += _profile_field(mesh, block, value)
    return ctrl


def _solver_cfg(spec: RunSpec, mesh: Mesh) -> SolverConfig:
    relax = spec.solver["relax"]
    if relax == "auto":
        relax = picard_relax_hint(spec.model, mesh)
    return SolverConfig(
        tol=spec.solver["tol"],
        relax=relax,
        max_iter=spec.solver["max_iter"],
        divergence_guard=spec.solver["divergence_guard"],
    )


# ---------------------------------------------------------------------------
# CSV output
# ---------------------------------------------------------------------------


def _fmt(value) -> str:
    return repr(float(value))


def _write_csv(path: Path, header, rows) -> None:
    lines = [",".join(header)]
    for row in rows:
        lines.append(",".join(str(c) if isinstance(c, (str, int)) else _fmt(c) for c in row))
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")


_SIDES = ("left", "right")


def write_state_csvs(outdir: Path, mesh: Mesh, state) -> None:
    """Field blocks in the shared CSV schema: grid fields as
    (t, x, k, value), boundary strips as (t, side, k, value), slices as
    (x, k, value) / (side, k, value)."""
    n = state.phi.shape[-1]
    rows = [
        (_fmt(mesh.t[i]), _fmt(mesh.x[j]), k, state.phi[i, j, k])
        for i in range(mesh.Nt + 1)
        for j in range(mesh.Nx + 1)
        for k in range(n)
    ]
    _write_csv(outdir / "phi.csv", ("t", "x", "k", "value"), rows)
    rows = [
        (_fmt(mesh.t[i]), _SIDES[b], k, state.phi_bd[i, b, k])
        for i in range(mesh.Nt + 1)
        for b in range(2)
        for k in range(n)
    ]
    _write_csv(outdir / "phi_bd.csv", ("t", "side", "k", "value"), rows)
    for name, block in (("phi0", state.phi0), ("phiT", state.phiT)):
        rows = [
            (_fmt(mesh.x[j]), k, block[j, k])
            for j in range(mesh.Nx + 1)
            for k in range(n)
        ]
        _write_csv(outdir / f"{name}.csv", ("x", "k", "value"), rows)
    for name, block in (("phi0_bd", state.phi0_bd), ("phiT_bd", state.phiT_bd)):
        rows = [(_SIDES[b], k, block[b, k]) for b in range(2) for k in range(n)]
        _write_csv(outdir / f"{name}.csv", ("side", "k", "value"), rows)


def write_control_csvs(outdir: Path, mesh: Mesh, controls: ControlBundle) -> None:
    for block in _CONTROL_BLOCKS:
        arr = getattr(controls, block)
        if arr.size == 0:
            continue
        if block == "u":
            rows = [
                (_fmt(mesh.t[i]), _fmt(mesh.x[j]), k, arr[i, j, k])
                for i in range(mesh.Nt + 1)
                for j in range(mesh.Nx + 1)
                for k in range(arr.shape[-1])
            ]
            header = ("t", "x", "k", "value")
        elif block == "w":
            rows = [
                (_fmt(mesh.t[i]), _SIDES[b], k, arr[i, b, k])
                for i in range(mesh.Nt + 1)
                for b in range(2)
                for k in range(arr.shape[-1])
            ]
            header = ("t", "side", "k", "value")
        elif block in _X_BLOCKS:
            rows = [
                (_fmt(mesh.x[j]), k, arr[j, k])
                for j in range(mesh.Nx + 1)
                for k in range(arr.shape[-1])
            ]
            header = ("x", "k", "value")
        else:
            rows = [(_SIDES[b], k, arr[b, k]) for b in range(2) for k in range(arr.shape[-1])]
            header = ("side", "k", "value")
        _write_csv(outdir / f"{block}.csv", header, rows)


# ---------------------------------------------------------------------------
# Subcommands
# ---------------------------------------------------------------------------


def _cmd_solve(spec: RunSpec, outdir: Path, seed: int) -> int:
    mesh = build_mesh(**spec.mesh)
    problem = make_model(spec.model)
    controls = build_controls(spec, mesh, problem)
    cfg = _solver_cfg(spec, mesh)
    state, report = solve_forward(problem, mesh, controls, cfg)
    write_state_csvs(outdir, mesh, state)
    _write_csv(
        outdir / "solve_report.csv",
        ("iteration", "residual"),
        [(i + 1, r) for i, r in enumerate(report.residual_history)],
    )
    print(
        f"solve: converged={report.converged} iterations={report.iterations} "
        f"residual={report.final_residual:.3e}"
    )
    return 0 if report.converged else 3


def _cmd_cost(spec: RunSpec, outdir: Path, seed: int) -> int:
    mesh = build_mesh(**spec.mesh)
    problem = make_model(spec.model)
    controls = build_controls(spec, mesh, problem)
    cfg = _solver_cfg(spec, mesh)
    state, report = solve_forward(problem, mesh, controls, cfg)
    slots = derive_slots(mesh, state)
    J = eval_cost(problem, mesh, state, slots, controls)
    _write_csv(
        outdir / "cost.csv",
        ("J", "converged", "iterations", "residual"),
        [(J, str(report.converged), report.iterations, report.final_residual)],
    )
    print(f"J = {J!r}")
    return 0 if report.converged else 3


def _write_costate_csvs(outdir: Path, mesh: Mesh, costate, grad) -> None:
    n = costate.psi.shape[-1]
    rows = [
        (_fmt(mesh.t[i]), _fmt(mesh.x[j]), k, costate.psi[i, j, k])
        for i in range(mesh.Nt + 1)
        for j in range(mesh.Nx + 1)
        for k in range(n)
    ]
    _write_csv(outdir / "psi.csv", ("t", "x", "k", "value"), rows)
    rows = [
        (_fmt(mesh.t[i]), _SIDES[b], k, costate.omega[i, b, k])
        for i in range(mesh.Nt + 1)
        for b in range(2)
        for k in range(n)
    ]
    _write_csv(outdir / "omega.csv", ("t", "side", "k", "value"), rows)
    for name, block in (("psi0", costate.psi0), ("psiT", costate.psiT)):
        rows = [
            (_fmt(mesh.x[j]), k, block[j, k])
            for j in range(mesh.Nx + 1)
            for k in range(n)
        ]
        _write_csv(outdir / f"{name}.csv", ("x", "k", "value"), rows)
    for name, block in (("omega0", costate.omega0), ("omegaT", costate.omegaT)):
        rows = [(_SIDES[b], k, block[b, k]) for b in range(2) for k in range(n)]
        _write_csv(outdir / f"{name}.csv", ("side", "k", "value"), rows)
    if grad.g_u.size:
        rows = [
            (_fmt(mesh.t[i]), _fmt(mesh.x[j]), k, grad.g_u[i, j, k])
            for i in range(mesh.Nt + 1)
            for j in range(mesh.Nx + 1)
            for k in range(grad.g_u.shape[-1])
        ]
        _write_csv(outdir / "grad_u.csv", ("t", "x", "k", "value"), rows)
    if grad.g_w.size:
        rows = [
            (_fmt(mesh.t[i]), _SIDES[b], k, grad.g_w[i, b, k])
            for i in range(mesh.Nt + 1)
            for b in range(2)
            for k in range(grad.g_w.shape[-1])
        ]
        _write_csv(outdir / "grad_w.csv", ("t", "side", "k", "value"), rows)


def _cmd_grad_check(spec: RunSpec, outdir: Path, seed: int) -> int:
    mesh = build_mesh(**spec.mesh)
    problem = make_model(spec.model)
    controls = build_controls(spec, mesh, problem)
    relax = spec.solver["relax"]
    if relax == "auto":
        relax = picard_relax_hint(spec.model, mesh)
    cfg = SolverConfig(
        tol=min(spec.solver["tol"], 1e-12),
        relax=relax,
        max_iter=max(spec.solver["max_iter"], 2000),
        divergence_guard=spec.solver["divergence_guard"],
    )
    state, srep = solve_forward(problem, mesh, controls, cfg)
    if srep.converged:
        slots = derive_slots(mesh, state)
        costate, crep = solve_costate(problem, mesh, state, slots, controls, cfg)
        if crep.converged:
            grad = control_gradient(problem, mesh, state, slots, controls, costate)
            _write_costate_csvs(outdir, mesh, costate, grad)
    report = gradient_check(problem, mesh, controls, n_dirs=5, seed=seed, cfg=cfg)
    rows = []
    for e in report.entries:
        rows.append(
            (
                e.block,
                e.direction,
                e.fd,
                e.adjoint,
                "" if e.dto is None else _fmt(e.dto),
                e.err_adjoint,
                "" if e.err_dto is None else _fmt(e.err_dto),
            )
        )
    _write_csv(
        outdir / "grad_check.csv",
        ("block", "direction", "fd", "adjoint", "dto", "err_adjoint", "err_dto"),
        rows,
    )
    print(f"grad-check: passed={report.passed} entries={len(report.entries)}")
    if not report.passed:
        print(f"grad-check: failing blocks: {', '.join(report.failing_blocks())}")
    return 0 if report.passed else 1


def _cmd_optimize(spec: RunSpec, outdir: Path, seed: int) -> int:
    mesh = build_mesh(**spec.mesh)
    problem = make_model(spec.model)
    controls = build_controls(spec, mesh, problem)
    cfg = _solver_cfg(spec, mesh)
    best, history = run_gd(problem, mesh, controls, spec.optimize, cfg)
    _write_csv(
        outdir / "history.csv",
        ("iteration", "J", "gnorm", "step", "forward_iterations"),
        history.rows,
    )
    write_control_csvs(outdir, mesh, best)
    print(f"optimize: status={history.status} J_final={history.rows[-1][1]!r}")
    return 0


def _cmd_ibp_demo(spec: RunSpec, outdir: Path, seed: int) -> int:
    rows = []
    for level in range(3):
        mesh = build_mesh(
            spec.mesh["T_final"],
            spec.mesh["Nt"] * 2**level,
            spec.mesh["x_a"],
            spec.mesh["x_b"],
            spec.mesh["Nx"] * 2**level,
        )
        A, A2, dphi = _ibp_test_fields(mesh)
        r1, r2 = ibp_residual(mesh, A, A2, dphi)
        rows.append((level, mesh.Nt, mesh.Nx, r1, r2))
    _write_csv(outdir / "ibp.csv", ("level", "Nt", "Nx", "r1", "r2"), rows)
    print("ibp-demo: " + "; ".join(f"level {r[0]}: r1={r[3]:.3e} r2={r[4]:.3e}" for r in rows))
    return 0


def _cmd_curve_demo(spec: RunSpec, outdir: Path, seed: int) -> int:
    rng = np.random.default_rng(seed)
    rows = []
    worst = 0.0
    M = 8
    while M <= 256:
        curve = build_curve_mesh(M, 2.0 * np.pi)
        psi = rng.standard_normal(M)
        phi = rng.standard_normal(M)
        res = abs(skew_adjoint_residual(curve, psi, phi))
        worst = max(worst, res)
        rows.append((M, res))
        M *= 2
    _write_csv(outdir / "curve.csv", ("M", "residual"), rows)
    print(f"curve-demo: worst residual {worst:.3e}")
    return 0


def _cmd_refine(spec: RunSpec, outdir: Path, seed: int) -> int:
    mesh = build_mesh(**spec.mesh)
    problem = make_model(spec.model)
    reference = model_reference(spec.model)

    def cfg(m):
        relax = spec.solver["relax"]
        if relax == "auto":
            relax = picard_relax_hint(spec.model, m)
        return SolverConfig(
            tol=min(spec.solver["tol"], 1e-12),
            relax=relax,
            max_iter=max(spec.solver["max_iter"], 2000),
            divergence_guard=spec.solver["divergence_guard"],
        )

    if reference is not None:
        metric = "forward_error"
        table = refinement_study(
            problem, mesh, 3, metric, reference=reference, cfg=cfg
        )
    else:
        metric = "gradient_gap"
        table = refinement_study(
            problem, mesh, 3, metric, block="u", seed=seed, cfg=cfg, costate_cfg=cfg
        )
    rows = [
        (r.level, r.Nt, r.Nx, r.value, "" if r.order is None else _fmt(r.order))
        for r in table.rows
    ]
    _write_csv(outdir / "refine.csv", ("level", "Nt", "Nx", metric, "order"), rows)
    print(
        "refine: "
        + "; ".join(f"{r.Nt}x{r.Nx}: {r.value:.3e}" for r in table.rows)
    )
    return 0


_COMMANDS = {
    "solve": _cmd_solve,
    "cost": _cmd_cost,
    "grad-check": _cmd_grad_check,
    "optimize": _cmd_optimize,
    "ibp-demo": _cmd_ibp_demo,
    "curve-demo": _cmd_curve_demo,
    "refine": _cmd_refine,
}


def run(spec: RunSpec, subcommand: str, out_dir: str = None, seed: int = 0) -> int:
    """Execute one subcommand; returns the process exit status."""
    if subcommand not in _COMMANDS:
        raise ConfigError(f"unknown subcommand {subcommand!r}")
    outdir = Path(out_dir if out_dir is not None else spec.outdir)
    outdir.mkdir(parents=True, exist_ok=True)
    return _COMMANDS[subcommand](spec, outdir, seed)


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(
        prog="biload",
        description="Solve, verify, and optimize biloaded integral state systems.",
    )
    parser.add_argument("subcommand", choices=sorted(_COMMANDS))
    parser.add_argument("--config", required=True, help="path to the config file")
    parser.add_argument("--out", default=None, help="output directory (overrides [output])")
    parser.add_argument("--seed", type=int, default=0, help="seed for sampled directions")
    args = parser.parse_args(argv)
    try:
        text = Path(args.config).read_text(encoding="utf-8")
    except OSError as exc:
        print(f"error: cannot read config: {exc}", file=sys.stderr)
        return 2
    try:
        spec = parse_config(text)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    try:
        return run(spec, args.subcommand, args.out, args.seed)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (DivergenceError, KernelEvalError, SingularSystemError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
