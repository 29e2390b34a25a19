"""Energy-constrained status sampling/updating schedulers minimizing AoI.

Single-device: exact constrained solution via multiplier search and a
two-policy mixture, with structural certification of the solved policies.
Multi-device: semi-distributed control from per-device Q-factors, learned
online on two timescales, with a zero-wait baseline and a tiny-scale joint
oracle.
"""

__version__ = "0.1.0"

from .cmdp import (
    CmdpSolution,
    MixturePolicy,
    PolicyMetrics,
    bisect_lambda,
    build_mixture,
    exact_policy_metrics,
    mixture_metrics,
    robbins_monro_lambda,
    solve_cmdp,
)
from .dominance import compare_optimal_aoi, first_order_dominates, second_order_dominates
from .fleet import (
    FleetInstance,
    LearningSchedule,
    PerDeviceQTable,
    centralized_oracle,
    evaluate_semi_distributed,
    lambda_update,
    per_device_fixed_point,
    q_learning_update,
    sampling_control,
    updating_control,
    zero_wait_policy,
)
from .model import (
    ACTIONS,
    AoiState,
    ChannelModel,
    CostModel,
    ProblemInstance,
    ValidationError,
    energy_cost,
    lagrange_cost,
    step_destination_age,
    step_device_age,
    transition,
)
from .sim import Metrics, SimConfig, run_fleet, run_single, substream
from .solver import (
    DeterministicPolicy,
    NotUnichainError,
    SolverError,
    StateActionCost,
    ValueTable,
    extract_greedy_policy,
    policy_evaluation,
    relative_value_iteration,
    state_action_costs,
    structure_aware_policy_iteration,
)
from .structure import (
    ThresholdReport,
    certify_dominance_monotonicity,
    certify_threshold_structure,
    certify_value_monotonicity,
    compute_thresholds,
    dominance_delta,
    threshold_monotonicity_sweep,
)

__all__ = [name for name in dir() if not name.startswith("_")]
