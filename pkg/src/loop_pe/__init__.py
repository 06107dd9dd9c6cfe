"""Permutation-equivariant neural dispatch with a closed-form feasibility layer.

A shared per-agent embedding and self-attention produce one virtual
prediction per agent; a gauge map around an interior point pulls it into the
linear constraint set, so every output is feasible by construction.
"""

from .errors import (
    CheckpointError,
    ContractError,
    DomainError,
    LoopPEError,
    MarginError,
    NonFiniteError,
    ShapeError,
    SingularityError,
    TrainingDivergence,
)
from .evaluation import EvalReport, bench, evaluate, export_spectrum, optimality_gap, scenario_suite
from .gauge import apply, gauge_context, gauge_map, interior_point, scaling_factor
from .net import Model, ModelConfig, attend, embed, forward, init_model
from .oracle import OracleSolution, brute_force_solve, kkt_residual, solve_exact
from .problem import (
    AgentRecord,
    ConstraintSystem,
    Instance,
    Permutation,
    build_vpp_constraints,
    check_feasibility,
    eliminate_equalities,
    objective,
)
from .training import (
    DatasetSpec,
    Sample,
    TrainConfig,
    generate_dataset,
    load_checkpoint,
    loss,
    read_dataset,
    save_checkpoint,
    train,
    train_step,
    write_dataset,
)

__version__ = "0.1.0"
