"""meshgrad: per-element forward-mode differentiation of triangle-mesh energies.

Define local energy terms over mesh elements; the library evaluates them in
parallel over mesh patches and assembles the global energy, exact gradient,
block-sparse Hessian, and matrix-free Hessian-vector products. Newton-type
and first-order solvers and four reference applications sit on top.
"""

from .active import (
    ActiveScalar,
    ActiveVec,
    SmallMatrix,
    abs_,
    cos,
    exp,
    lift,
    log,
    positive_guard,
    project_psd,
    sin,
    sqrt,
)
from .mesh import (
    AdjacencyTable,
    Element,
    ElementHandle,
    Mesh,
    MeshError,
    Op,
    generate_grid,
    generate_icosphere,
    load_obj,
    partition_patches,
    query,
    save_obj,
)
from .problem import BlockSparseMatrix, Problem, read_matrix_market
from .solvers import (
    CGResult,
    IterationRecord,
    LbfgsHistory,
    SolverConfig,
    SolverReport,
    Termination,
    backtracking_line_search,
    cg_linear_solve,
    gradient_descent_solve,
    lbfgs_solve,
    newton_cg_solve,
    newton_solve,
)

__version__ = "0.1.0"

__all__ = [
    "ActiveScalar",
    "ActiveVec",
    "AdjacencyTable",
    "BlockSparseMatrix",
    "CGResult",
    "Element",
    "ElementHandle",
    "IterationRecord",
    "LbfgsHistory",
    "Mesh",
    "MeshError",
    "Op",
    "Problem",
    "SmallMatrix",
    "SolverConfig",
    "SolverReport",
    "Termination",
    "abs_",
    "backtracking_line_search",
    "cg_linear_solve",
    "cos",
    "exp",
    "generate_grid",
    "generate_icosphere",
    "gradient_descent_solve",
    "lbfgs_solve",
    "lift",
    "load_obj",
    "log",
    "newton_cg_solve",
    "newton_solve",
    "partition_patches",
    "positive_guard",
    "project_psd",
    "query",
    "read_matrix_market",
    "save_obj",
    "sin",
    "sqrt",
]
