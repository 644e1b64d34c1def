"""Desk-scale expert-pruning workbench for sparse mixture-of-experts models."""

from .allocation import (
    Allocation,
    BudgetSpec,
    Parity,
    count_feasible,
    enumerate_feasible,
    is_feasible,
    patterned_allocations,
    random_allocation,
    uniform_allocation,
)
from .criteria import CalibrationSet, Criterion, ImportanceScores, PruningOrder, calibrate, make_order
from .errors import (
    CoverageError,
    DataError,
    FeasibilityError,
    SizeLimitError,
    StalenessError,
    ValidationError,
    WorkbenchError,
)
from .fitness import (
    FitnessKind,
    FitnessValue,
    LogitCache,
    SearchSample,
    acceptance_prob,
    answer_contexts,
    build_cache,
    dataset_fitness,
    esap_at_context,
    load_cache,
    sap_at_context,
    save_cache,
    tv_distance,
)
from .model import (
    ModelSpec,
    MoEModel,
    apply_allocation,
    build_model,
    expert_forward,
    forward_trace,
    moe_forward,
    parameter_checksum,
    route,
    spec_hash,
    teacher_forced_distributions,
)
from .search import (
    SearchConfig,
    SearchRun,
    brute_force_best,
    brute_force_table,
    init_population,
    level_switch,
    run_search,
)
from .specdec import AcceptanceReport, SpecDecConfig, spec_decode, specdec_fitness, speculative_step

__all__ = [name for name in dir() if not name.startswith("_")]
