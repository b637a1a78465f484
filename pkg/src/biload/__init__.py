"""Optimal control of biloaded Volterra-Fredholm integral state systems.

Forward fixed-point solution of a six-block integral system (trajectory,
boundary trace, and four initial/final slices, each loading the others
through running and nonlocal integrals), costate solution of the paired
stationarity system, adjoint control gradients, and independent
finite-difference and dense discrete-oracle verification.
"""

from .adjoint import (
    ControlGradient,
    HPartials,
    ThetaKind,
    apply_theta,
    assemble_h_partials,
    block_pairing,
    control_gradient,
    gradient_norm2,
    hamiltonian_report,
    solve_costate,
)
from .errors import (
    ConfigError,
    DivergenceError,
    KernelEvalError,
    ShapeError,
    SingularSystemError,
)
from .forward import (
    SolveReport,
    SolverConfig,
    eval_cost,
    picard_step,
    residual_flat,
    rhs_boundary,
    rhs_interior,
    rhs_slice,
    solve_forward,
    sweep_map,
)
from .kernels import (
    CostTerm,
    Kernel,
    KernelShape,
    KERNEL_IDS,
    KERNEL_SHAPES,
    Problem,
    SLOT_FAMILIES,
    validate_partials,
)
from .mesh import (
    CurveMesh,
    Mesh,
    StencilKind,
    apply_stencil,
    build_curve_mesh,
    build_mesh,
    curve_diff,
    quad_boundary,
    quad_space,
    quad_time,
)
from .models import (
    MODEL_NAMES,
    ModelParams,
    make_model,
    make_params,
    model_reference,
    picard_relax_hint,
)
from .optimize import OptimizeHistory, OptimizeOptions, project, run_gd
from .state import (
    ControlBundle,
    CoStateBundle,
    DerivedSlots,
    FlatIndex,
    StateBundle,
    derive_slots,
    flat_index,
    pack,
    sup_distance,
    unpack,
    zero_controls,
    zero_costate,
    zero_state,
)
from .verify import (
    GradCheckReport,
    RefinementTable,
    dto_gradient,
    dto_solve,
    fd_directional,
    gradient_check,
    ibp_residual,
    refinement_study,
    skew_adjoint_residual,
    smooth_direction,
)

__version__ = "0.1.0"
