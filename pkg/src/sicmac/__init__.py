"""sicmac - power allocation, SIC decoding order and time sharing for multi-carrier uplinks."""

from sicmac.baselines import mc_noma_allocate, noma_allocate, oma_allocate
from sicmac.channel import ChannelSet, ScenarioConfig, generate_channels
from sicmac.errors import ConfigError, DomainError, Infeasible, NotConverged, SimulationError, TooManyOrders
from sicmac.harness import ExperimentSpec, ResultsTable, run_experiment
from sicmac.ordering import DualCertificate, derive_order, enumerate_orders
from sicmac.rate import DecodingOrder, PowerAllocation, RateMatrix, sic_rates, throughput_mbps
from sicmac.solver import (
    AllocationResult,
    EnergyBudget,
    RateRequirement,
    SolverOptions,
    inner_weighted_max,
    max_rate_allocate,
    min_energy_allocate,
)
from sicmac.timeshare import TimeShareSchedule, solve_timeshare

__all__ = [
    "ScenarioConfig",
    "ChannelSet",
    "generate_channels",
    "DecodingOrder",
    "PowerAllocation",
    "RateMatrix",
    "sic_rates",
    "throughput_mbps",
    "DualCertificate",
    "derive_order",
    "enumerate_orders",
    "TimeShareSchedule",
    "solve_timeshare",
    "RateRequirement",
    "EnergyBudget",
    "SolverOptions",
    "AllocationResult",
    "inner_weighted_max",
    "min_energy_allocate",
    "max_rate_allocate",
    "oma_allocate",
    "noma_allocate",
    "mc_noma_allocate",
    "ExperimentSpec",
    "ResultsTable",
    "run_experiment",
    "SimulationError",
    "DomainError",
    "ConfigError",
    "Infeasible",
    "NotConverged",
    "TooManyOrders",
]
