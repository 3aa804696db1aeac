"""Total FETI solver with interchangeable dual-operator strategies."""

from .bench import ExperimentConfig, amortization_point, autotune, full_grid, run_experiment
from .decomposition import (
    ClusterLayout,
    ConstraintSet,
    Partition,
    build_clusters,
    build_constraints,
    partition,
)
from .dualop import (
    DualOpConfig,
    DualOperator,
    apply_implicit_local,
    assemble_explicit_local,
    prepare,
    schur_complement_oracle,
)
from .mesh import (
    GlobalSystem,
    Mesh,
    assemble_system,
    dirichlet_dofs,
    generate_mesh,
    solve_direct_reference,
)
from .pool import Pool, PoolCapacityError, PoolError, PoolStateError, Region
from .solver import (
    DualSystem,
    PcpgResult,
    Problem,
    StepReport,
    assemble_dual_system,
    build_kernel,
    build_problem,
    pcpg,
    recover_solution,
    run_steps,
)
from .sparse import (
    CholFactor,
    CholSymbolic,
    DenseMat,
    SparseCsr,
    dense_cholesky,
    dense_matvec,
    factor_to_dense,
    numeric_factorize,
    regularize,
    sparse_apply,
    sparse_dense_multiply,
    symbolic_factorize,
    syrk,
    triangular_solve_multi,
)

__version__ = "0.1.0"

__all__ = [name for name in dir() if not name.startswith("_")]
