"""
Experiment runner.

An ExperimentSpec expands into cells, one per (sweep value, trial). Each cell
draws one channel realization and runs every requested method on it, so all
methods of a cell see the same channel. Cells are independent and may run on a
thread pool; rows come back in (sweep value, trial, method) order regardless.
"""

import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any

import numpy as np
import pandas as pd

from sicmac.baselines import mc_noma_allocate, noma_allocate, oma_allocate
from sicmac.channel import ChannelSet, ScenarioConfig, generate_channels
from sicmac.errors import DomainError, Infeasible, SimulationError, TooManyOrders
from sicmac.ordering import derive_order, enumerate_orders
from sicmac.rate import DecodingOrder, bits_to_mbps, mbps_to_bits
from sicmac.solver import (
    AllocationResult,
    EnergyBudget,
    RateRequirement,
    SolverOptions,
    TraceRow,
    max_rate_allocate,
    min_energy_allocate,
)
from sicmac.timeshare import (
    RATE_TOL,
    CandidateRates,
    TimeShareSchedule,
    balanced_target,
    rates_per_order,
    solve_timeshare,
)

logger = logging.getLogger(__name__)

__all__ = [
    "ExperimentSpec",
    "ResultRow",
    "ResultsTable",
    "run_experiment",
    "emit_csv",
    "read_results_csv",
    "write_trace_csv",
    "dump_allocations",
    "reference_candidates",
    "reference_schedule",
    "dbm_to_watts",
    "watts_to_dbm",
]

MODES = ("max_rate", "min_energy", "power_parity")
METHODS = ("proposed", "oma", "noma", "mc_noma")
TARGET_METHODS = ("proposed", "oma")
SWEEP_VARIABLES = ("snr", "ap_antennas", "num_users", "num_subcarriers")

COLUMNS = [
    "method",
    "sweep_variable",
    "sweep_value",
    "seed",
    "rates_mbps",
    "powers_dbm",
    "sum_rate_mbps",
    "total_power_dbm",
    "schedule",
    "status",
    "min_rate_mbps",
    "spectral_efficiency",
    "power_vs_ref_db",
    "power_vs_ref_ratio",
    "error",
]

SNR_NORMALIZATION = "E_max[u] = SNR * noise_variance * N / mean|H_u|^2 (mean per-antenna receive SNR per subcarrier)"

# Three-user time-sharing example with a known schedule (Mbps)
REFERENCE_TIMESHARE_ORDERS = ("3-2-1", "1-3-2", "2-1-3")
REFERENCE_TIMESHARE_RATES = (
    (398.01, 470.48, 632.23),
    (691.78, 242.32, 565.91),
    (565.91, 691.78, 242.32),
)
REFERENCE_TIMESHARE_TARGET = (500.0, 500.0, 500.0)


def reference_candidates() -> CandidateRates:
    return CandidateRates(tuple(DecodingOrder.parse(label) for label in REFERENCE_TIMESHARE_ORDERS), np.array(REFERENCE_TIMESHARE_RATES))


def reference_schedule(tol: float = RATE_TOL) -> TimeShareSchedule:
    return solve_timeshare(reference_candidates(), REFERENCE_TIMESHARE_TARGET, tol=tol)


def dbm_to_watts(dbm: float) -> float:
    return 10 ** ((dbm - 30) / 10)


def watts_to_dbm(watts: Any) -> np.ndarray | float:
    with np.errstate(divide="ignore"):
        dbm = 10 * np.log10(np.asarray(watts, dtype=float)) + 30
    return float(dbm) if np.ndim(dbm) == 0 else dbm


# =============================================================================
# Experiments and results
# =============================================================================


@dataclass(frozen=True)
class ExperimentSpec:
    """
    What to run.

    Modes:
      max_rate      per-user budgets from ``snr_db`` (receive SNR) or ``power_dbm``
      min_energy    per-user targets ``target_mbps``
      power_parity  OMA at ``reference_power_dbm``, then the proposed allocator at OMA's rates
    """

    scenario: ScenarioConfig = field(default_factory=ScenarioConfig)
    mode: str = "max_rate"
    methods: tuple[str, ...] = METHODS
    snr_db: float | None = None
    power_dbm: float = 15.0
    target_mbps: float | tuple[float, ...] = 500.0
    reference_power_dbm: float = 15.0
    theta_w: tuple[float, ...] | None = None
    weights: tuple[float, ...] | None = None
    sweep_variable: str | None = None
    sweep_values: tuple[float, ...] = ()
    trials: int = 1
    balance_ties: bool = True
    solver: SolverOptions = field(default_factory=SolverOptions)

    def __post_init__(self):
        if self.mode not in MODES:
            raise DomainError(f"unknown mode {self.mode!r}; expected one of {MODES}")
        allowed = METHODS if self.mode == "max_rate" else TARGET_METHODS
        if not self.methods or any(m not in allowed for m in self.methods):
            raise DomainError(f"methods {self.methods} not available in {self.mode} mode (choose from {allowed})")
        if len(set(self.methods)) != len(self.methods):
            raise DomainError("methods must not repeat")
        if self.trials < 1:
            raise DomainError(f"trials must be >= 1, got {self.trials}")
        if self.sweep_variable is not None:
            if self.sweep_variable not in SWEEP_VARIABLES:
                raise DomainError(f"unknown sweep variable {self.sweep_variable!r}; expected one of {SWEEP_VARIABLES}")
            if not self.sweep_values:
                raise DomainError("a sweep needs at least one value")
            if self.sweep_variable == "snr":
                if self.mode != "max_rate":
                    raise DomainError("SNR sweeps only apply to max_rate mode")
            elif any(v <= 0 for v in self.sweep_values):
                raise DomainError(f"{self.sweep_variable} sweep values must be positive")
        if np.any(np.asarray(self.target_mbps, dtype=float) < 0):
            raise DomainError("target_mbps must be non-negative")

    def points(self) -> list[float | None]:
        return list(self.sweep_values) if self.sweep_variable else [None]


@dataclass(frozen=True)
class ResultRow:
    method: str
    sweep_variable: str
    sweep_value: float | None
    seed: int
    rates_mbps: tuple[float, ...] = ()
    powers_dbm: tuple[float, ...] = ()
    sum_rate_mbps: float = math.nan
    total_power_dbm: float = math.nan
    schedule: str = ""
    status: str = "ok"
    min_rate_mbps: float = math.nan
    spectral_efficiency: float = math.nan
    power_vs_ref_db: float = math.nan
    power_vs_ref_ratio: float = math.nan
    error: str = ""

    @property
    def key(self) -> str:
        return f"{self.method}|{self.sweep_value}|{self.seed}"

    @property
    def failed(self) -> bool:
        return self.status != "ok"


@dataclass(frozen=True, eq=False)
class _Output:
    energy: np.ndarray
    rates_bits: np.ndarray
    schedule: TimeShareSchedule | None
    trace: tuple[TraceRow, ...] = ()


@dataclass
class ResultsTable:
    rows: list[ResultRow] = field(default_factory=list)
    metadata: dict[str, str] = field(default_factory=dict)
    allocations: dict[str, tuple[np.ndarray, TimeShareSchedule | None]] = field(default_factory=dict)
    traces: list[dict[str, Any]] = field(default_factory=list)

    def failed(self) -> list[ResultRow]:
        return [row for row in self.rows if row.failed]

    def to_frame(self) -> pd.DataFrame:
        records = []
        for row in self.rows:
            record = asdict(row)
            record["rates_mbps"] = _join(row.rates_mbps)
            record["powers_dbm"] = _join(row.powers_dbm)
            record["sweep_variable"] = row.sweep_variable or ""
            records.append(record)
        return pd.DataFrame(records, columns=COLUMNS)

    def summary(self) -> pd.DataFrame:
        """Mean sum rate, minimum user rate and total power per method and sweep point."""
        frame = self.to_frame()
        ok = frame[frame["status"] == "ok"].copy()
        if ok.empty:
            return pd.DataFrame(columns=["method", "sweep_value", "sum_rate_mbps", "min_rate_mbps", "total_power_dbm"])
        ok["sweep_value"] = ok["sweep_value"].fillna("-")
        ok["total_power_w"] = [dbm_to_watts(v) for v in ok["total_power_dbm"]]
        grouped = ok.groupby(["method", "sweep_value"], sort=False).agg(
            sum_rate_mbps=("sum_rate_mbps", "mean"),
            min_rate_mbps=("min_rate_mbps", "mean"),
            total_power_w=("total_power_w", "mean"),
        )
        grouped["total_power_dbm"] = watts_to_dbm(grouped["total_power_w"].to_numpy())
        return grouped.drop(columns="total_power_w").reset_index()


def _join(values: tuple[float, ...]) -> str:
    return ";".join(f"{v:.6g}" for v in values)


# =============================================================================
# Running
# =============================================================================


def _per_user(value: float | tuple[float, ...] | None, users: int, default: float, name: str) -> np.ndarray:
    if value is None:
        return np.full(users, default)
    if np.ndim(value) == 0:
        return np.full(users, float(value))
    values = np.asarray(value, dtype=float)
    if values.size < users:
        raise DomainError(f"{name} has {values.size} entries for {users} users")
    return values[:users]


def _scenario_at(spec: ExperimentSpec, value: float | None, seed: int) -> ScenarioConfig:
    base = spec.scenario
    changes: dict[str, Any] = {"seed": seed}
    if spec.sweep_variable == "ap_antennas":
        changes["ap_antennas"] = int(value)
    elif spec.sweep_variable == "num_subcarriers":
        changes["num_subcarriers"] = int(value)
    elif spec.sweep_variable == "num_users":
        users = int(value)
        changes["num_users"] = users
        if base.distances_m is not None:
            if len(base.distances_m) < users:
                raise DomainError(f"distances_m lists {len(base.distances_m)} users, sweep needs {users}")
            changes["distances_m"] = tuple(base.distances_m[:users])
        if isinstance(base.antennas_per_user, tuple):
            changes["antennas_per_user"] = tuple(base.antennas_per_user[:users])
    return base.replace(**changes)


def _budgets(spec: ExperimentSpec, ch: ChannelSet, snr_db: float | None) -> np.ndarray:
    if snr_db is None:
        return np.full(ch.num_users, dbm_to_watts(spec.power_dbm))
    gains = ch.gains()
    snr = 10 ** (snr_db / 10)
    with np.errstate(divide="ignore"):
        return np.where(gains > 0, snr * ch.noise_variance * ch.num_subcarriers / gains, 0.0)


def _balanced(ch: ChannelSet, result: AllocationResult, budget: EnergyBudget, opt: SolverOptions) -> TimeShareSchedule:
    """Time-share tied users' orders toward the max-min fair point of the allocation's face."""
    clusters = derive_order(budget.theta_w, opt.eps_theta)
    if not clusters.has_ties():
        return result.schedule
    try:
        cand = rates_per_order(ch, result.alloc, enumerate_orders(clusters, opt.max_orders))
        return solve_timeshare(cand, balanced_target(cand))
    except (TooManyOrders, Infeasible) as exc:
        logger.warning("keeping a single decoding order for tied users: %s", exc)
        return result.schedule


def _run_max_rate(method: str, spec: ExperimentSpec, ch: ChannelSet, snr_db: float | None) -> _Output:
    users = ch.num_users
    budget = EnergyBudget(_budgets(spec, ch, snr_db), _per_user(spec.theta_w, users, 1.0, "theta_w"))
    opt = spec.solver
    if method == "proposed":
        result = max_rate_allocate(ch, budget, opt)
        schedule = _balanced(ch, result, budget, opt) if spec.balance_ties else result.schedule
        return _Output(result.alloc.energy, schedule.average_rates(), schedule, result.trace)
    if method == "mc_noma":
        result = mc_noma_allocate(ch, budget, opt)
        return _Output(result.alloc.energy, result.rates.per_user(), result.schedule, result.trace)
    baseline = oma_allocate(ch, budget) if method == "oma" else noma_allocate(ch, budget)
    return _Output(baseline.alloc.energy, baseline.rates.per_user(), None)


def _run_targets(method: str, spec: ExperimentSpec, ch: ChannelSet, b_min: np.ndarray) -> _Output:
    if method == "oma":
        baseline = oma_allocate(ch, RateRequirement(b_min))
        return _Output(baseline.alloc.energy, baseline.rates.per_user(), None)
    req = RateRequirement(b_min, _per_user(spec.weights, ch.num_users, 1.0, "weights"))
    result = min_energy_allocate(ch, req, spec.solver)
    return _Output(result.alloc.energy, result.achieved_rates(), result.schedule, result.trace)


def _row(spec: ExperimentSpec, method: str, value: float | None, cfg: ScenarioConfig, out: _Output) -> ResultRow:
    rates = bits_to_mbps(out.rates_bits, cfg.bandwidth_hz, cfg.num_subcarriers)
    powers = out.energy.sum(axis=1)
    total = float(powers.sum())
    ratio = total / (cfg.num_users * dbm_to_watts(spec.reference_power_dbm))
    sum_rate = float(rates.sum())
    return ResultRow(
        method=method,
        sweep_variable=spec.sweep_variable or "",
        sweep_value=value,
        seed=cfg.seed,
        rates_mbps=tuple(float(r) for r in rates),
        powers_dbm=tuple(float(p) for p in np.atleast_1d(watts_to_dbm(powers))),
        sum_rate_mbps=sum_rate,
        total_power_dbm=watts_to_dbm(total),
        schedule=out.schedule.summary() if out.schedule is not None else "",
        min_rate_mbps=float(rates.min()),
        spectral_efficiency=sum_rate * 1e6 / cfg.bandwidth_hz,
        power_vs_ref_db=watts_to_dbm(ratio) - 30,
        power_vs_ref_ratio=ratio,
    )


def _failed_row(spec: ExperimentSpec, method: str, value: float | None, seed: int, exc: Exception) -> ResultRow:
    logger.warning("%s failed at %s=%s seed %d: %s", method, spec.sweep_variable or "point", value, seed, exc)
    return ResultRow(
        method=method,
        sweep_variable=spec.sweep_variable or "",
        sweep_value=value,
        seed=seed,
        status="failed",
        error=f"{type(exc).__name__}: {exc}",
    )


def _run_cell(spec: ExperimentSpec, value: float | None, seed: int) -> list[tuple[ResultRow, _Output | None]]:
    try:
        cfg = _scenario_at(spec, value, seed)
        ch = generate_channels(cfg)
    except SimulationError as exc:
        return [(_failed_row(spec, m, value, seed, exc), None) for m in spec.methods]

    outputs: dict[str, _Output | SimulationError] = {}
    if spec.mode == "max_rate":
        snr_db = value if spec.sweep_variable == "snr" else spec.snr_db
        for method in spec.methods:
            try:
                outputs[method] = _run_max_rate(method, spec, ch, snr_db)
            except SimulationError as exc:
                outputs[method] = exc
    elif spec.mode == "min_energy":
        try:
            mbps = _per_user(spec.target_mbps, cfg.num_users, 0.0, "target_mbps")
        except DomainError as exc:
            return [(_failed_row(spec, m, value, seed, exc), None) for m in spec.methods]
        target = mbps_to_bits(mbps, cfg.bandwidth_hz, cfg.num_subcarriers)
        for method in spec.methods:
            try:
                outputs[method] = _run_targets(method, spec, ch, target)
            except SimulationError as exc:
                outputs[method] = exc
    else:
        # power parity: OMA sets the rates, the proposed allocator matches them
        reference = EnergyBudget(np.full(cfg.num_users, dbm_to_watts(spec.reference_power_dbm)))
        try:
            oma = oma_allocate(ch, reference)
            outputs["oma"] = _Output(oma.alloc.energy, oma.rates.per_user(), None)
            if "proposed" in spec.methods:
                try:
                    outputs["proposed"] = _run_targets("proposed", spec, ch, oma.rates.per_user())
                except SimulationError as exc:
                    outputs["proposed"] = exc
        except SimulationError as exc:
            outputs = dict.fromkeys(spec.methods, exc)

    cell = []
    for method in spec.methods:
        out = outputs[method]
        if isinstance(out, SimulationError):
            cell.append((_failed_row(spec, method, value, seed, out), None))
        else:
            cell.append((_row(spec, method, value, cfg, out), out))
    return cell


def run_experiment(spec: ExperimentSpec, *, jobs: int = 1) -> ResultsTable:
    """Run every (sweep value, trial, method) cell; failures become rows marked ``failed``."""
    if jobs < 1:
        raise DomainError(f"jobs must be >= 1, got {jobs}")
    cells = [(value, spec.scenario.seed + trial) for value in spec.points() for trial in range(spec.trials)]
    logger.info(
        "Running %s experiment: %d sweep point(s) x %d trial(s) x %d method(s)",
        spec.mode,
        len(spec.points()),
        spec.trials,
        len(spec.methods),
    )

    with ThreadPoolExecutor(max_workers=jobs) as pool:
        results = list(pool.map(lambda cell: _run_cell(spec, *cell), cells))

    table = ResultsTable(metadata=_metadata(spec))
    for (value, seed), cell in zip(cells, results, strict=True):
        for row, out in cell:
            table.rows.append(row)
            if out is None:
                continue
            table.allocations[row.key] = (out.energy, out.schedule)
            table.traces.extend(
                {"method": row.method, "sweep_value": value, "seed": seed, **asdict(trace_row)} for trace_row in out.trace
            )
    done = len(table.rows) - len(table.failed())
    logger.info("Finished: %d row(s) ok, %d failed", done, len(table.failed()))
    return table


def _metadata(spec: ExperimentSpec) -> dict[str, str]:
    cfg = spec.scenario
    meta = {
        "mode": spec.mode,
        "methods": ",".join(spec.methods),
        "trials": str(spec.trials),
        "base_seed": str(cfg.seed),
        "scenario": (
            f"U={cfg.num_users} L_y={cfg.ap_antennas} N={cfg.num_subcarriers} "
            f"W={cfg.bandwidth_hz:g}Hz f={cfg.center_freq_hz:g}Hz psd={cfg.noise_psd_dbm_per_hz:g}dBm/Hz"
        ),
        "reference_power_dbm": f"{spec.reference_power_dbm:g}",
    }
    if spec.mode == "max_rate":
        meta["snr_normalization"] = SNR_NORMALIZATION
    if spec.sweep_variable:
        meta["sweep"] = f"{spec.sweep_variable}=" + ",".join(f"{v:g}" for v in spec.sweep_values)
    return meta


# =============================================================================
# Output
# =============================================================================


def emit_csv(table: ResultsTable, path: str | Path) -> Path:
    """Metadata as ``#`` lines, then the header and one line per row; floats to 6 significant digits."""
    path = Path(path)
    with path.open("w", encoding="utf-8", newline="") as f:
        for key, value in table.metadata.items():
            f.write(f"# {key}: {value}\n")
        table.to_frame().to_csv(f, index=False, float_format="%.6g")
    return path


def read_results_csv(path: str | Path) -> pd.DataFrame:
    frame = pd.read_csv(path, comment="#", keep_default_na=False, na_values=["", "nan"])
    for column in ("rates_mbps", "powers_dbm"):
        frame[column] = [
            tuple(float(v) for v in str(cell).split(";")) if str(cell) not in ("", "nan") else ()
            for cell in frame[column]
        ]
    return frame


def write_trace_csv(table: ResultsTable, path: str | Path) -> Path:
    path = Path(path)
    columns = ["method", "sweep_value", "seed", "iteration", "value", "best_value", "max_residual"]
    pd.DataFrame(table.traces, columns=columns).to_csv(path, index=False, float_format="%.10g")
    return path


def dump_allocations(table: ResultsTable, path: str | Path) -> Path:
    """Store every row's energy matrix and schedule as ``<key>|energy``, ``<key>|orders``, ``<key>|weights``."""
    path = Path(path)
    arrays: dict[str, np.ndarray] = {}
    for key, (energy, schedule) in table.allocations.items():
        arrays[f"{key}|energy"] = energy
        if schedule is not None:
            arrays[f"{key}|orders"] = np.array([e.order.label() for e in schedule.entries])
            arrays[f"{key}|weights"] = schedule.weights()
    with path.open("wb") as f:
        np.savez_compressed(f, **arrays)
    return path
