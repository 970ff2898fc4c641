"""
Power and subcarrier allocation for the low-rank multi-carrier MAC.

Two problems are solved here:

* ``min_energy_allocate`` minimizes the weighted energy sum subject to per-user
  rate targets by ascent on the concave dual. Every dual evaluation solves a
  per-subcarrier concave program (``inner_weighted_max``) with users decoded in
  ascending theta order. Users whose multipliers meet are handled as one
  compound user until their targets require them apart; inside such a cluster
  per-user targets are met by time sharing between decoding orders.
* ``max_rate_allocate`` maximizes the theta-weighted rate sum subject to
  per-user energy budgets by block-coordinate ascent: each user in turn
  water-fills its budget against the others' current powers.

Rates returned to callers are always recomputed through ``sicmac.rate``.
"""

import itertools
import logging
from dataclasses import dataclass, field

import numpy as np
from numpy.typing import ArrayLike
from scipy.optimize import brentq

from sicmac.channel import ChannelSet
from sicmac.errors import DomainError, Infeasible, NotConverged
from sicmac.ordering import EPS_THETA, THETA_FLOOR, DualCertificate, OrderClusters, derive_order, enumerate_orders
from sicmac.rate import DecodingOrder, PowerAllocation, RateMatrix, log_det, sic_rates, subset_capacity
from sicmac.timeshare import ScheduleEntry, TimeShareSchedule, rates_per_order, solve_timeshare
from sicmac.waterfill import water_fill_target, water_level_for_target

logger = logging.getLogger(__name__)

__all__ = [
    "RateRequirement",
    "EnergyBudget",
    "SolverOptions",
    "TraceRow",
    "InnerSolution",
    "AllocationResult",
    "inner_weighted_max",
    "min_energy_allocate",
    "max_rate_allocate",
]

LN2 = np.log(2.0)
ARMIJO = 1e-4
MAX_HALVINGS = 60
WEIGHT_FLOOR = 1e-9
MAX_LOG_STEP = 4.0
# cluster sum rates are driven tighter than rate_tol so time sharing can split them
CONVERGED_FRACTION = 0.1
SPLIT_FRACTION = 0.1
MERGE_GAP = 1e-12
INNER_RESTARTS = 5


# =============================================================================
# Problem data
# =============================================================================


def _vector(values: ArrayLike, name: str) -> np.ndarray:
    arr = np.array(values, dtype=float).reshape(-1)
    if np.any(~np.isfinite(arr)) or np.any(arr < 0):
        raise DomainError(f"{name} must be finite and non-negative")
    arr.flags.writeable = False
    return arr


@dataclass(frozen=True, eq=False)
class RateRequirement:
    """Per-user rate targets in bits per OFDM symbol and energy weights (default 1)."""

    b_min: np.ndarray
    weights: np.ndarray | None = None

    def __post_init__(self):
        b_min = _vector(self.b_min, "b_min")
        weights = np.ones_like(b_min) if self.weights is None else _vector(self.weights, "weights")
        if weights.shape != b_min.shape:
            raise DomainError("weights need one entry per user")
        if not weights.max() > 0:
            raise DomainError("at least one energy weight must be positive")
        weights.flags.writeable = False
        object.__setattr__(self, "b_min", b_min)
        object.__setattr__(self, "weights", weights)


@dataclass(frozen=True, eq=False)
class EnergyBudget:
    """Per-user energy budgets in watts and rate weights theta_w (default 1)."""

    e_max: np.ndarray
    theta_w: np.ndarray | None = None

    def __post_init__(self):
        e_max = _vector(self.e_max, "e_max")
        theta_w = np.ones_like(e_max) if self.theta_w is None else _vector(self.theta_w, "theta_w")
        if theta_w.shape != e_max.shape:
            raise DomainError("theta_w needs one entry per user")
        theta_w.flags.writeable = False
        object.__setattr__(self, "e_max", e_max)
        object.__setattr__(self, "theta_w", theta_w)


@dataclass(frozen=True)
class SolverOptions:
    """
    Tolerances and limits.

    ``energy_cap`` multiplies each user's interference-free water-filling
    energy; a user above it while targets are still unmet is declared
    infeasible.
    """

    rate_tol: float = 1e-4
    inner_tol: float = 1e-8
    max_outer_iters: int = 5000
    step_scale: float = 1.0
    energy_cap: float = 1e6
    eps_theta: float = 1e-6
    tie_tol: float = 1e-3
    max_orders: int = 720
    max_inner_iters: int = 100
    trace: bool = False

    def __post_init__(self):
        for name in (
            "rate_tol",
            "inner_tol",
            "max_outer_iters",
            "step_scale",
            "energy_cap",
            "eps_theta",
            "tie_tol",
            "max_orders",
            "max_inner_iters",
        ):
            if not getattr(self, name) > 0:
                raise DomainError(f"solver option {name} must be positive, got {getattr(self, name)}")


@dataclass(frozen=True)
class TraceRow:
    iteration: int
    value: float
    best_value: float
    max_residual: float


@dataclass(frozen=True, eq=False)
class AllocationResult:
    """
    Solver output.

    ``rates`` are the SIC rates of ``alloc`` under ``order``. When users tie,
    the per-user targets are met by ``schedule`` instead; ``achieved_rates()``
    returns its time average.
    """

    alloc: PowerAllocation
    rates: RateMatrix
    cert: DualCertificate
    order: DecodingOrder
    schedule: TimeShareSchedule
    iterations: int = 0
    trace: tuple[TraceRow, ...] = field(default_factory=tuple)

    def achieved_rates(self) -> np.ndarray:
        return self.schedule.average_rates()


# =============================================================================
# Per-subcarrier concave program
# =============================================================================


@dataclass(frozen=True, eq=False)
class InnerSolution:
    """Maximizer of sum_u theta_u b_u - price_u p_u on every subcarrier."""

    powers: np.ndarray
    rates: np.ndarray
    sensitivity: np.ndarray
    value: float
    residual: float
    iterations: int
    order: DecodingOrder


@dataclass(frozen=True, eq=False)
class _Local:
    value: np.ndarray
    logdets: np.ndarray
    grad: np.ndarray
    hess: np.ndarray
    rate_jac: np.ndarray


def _normalized_vectors(ch: ChannelSet) -> np.ndarray:
    return ch.vectors() / np.sqrt(ch.noise_variance)


def _tails(g: np.ndarray, x: np.ndarray) -> np.ndarray:
    """I + sum_{j >= k} x_j g_j g_j^H for every position k; g is (N, L_y, U), x is (N, U)."""
    terms = np.einsum("naj,nbj,nj->njab", g, g.conj(), x)
    tails = np.cumsum(terms[:, ::-1], axis=1)[:, ::-1]
    return np.eye(g.shape[1]) + tails


def _objective(g: np.ndarray, x: np.ndarray, c: np.ndarray, mu: np.ndarray) -> np.ndarray:
    return log_det(_tails(g, x)) @ c / LN2 - x @ mu


def _local(g: np.ndarray, x: np.ndarray, c: np.ndarray, mu: np.ndarray) -> _Local:
    """Value, gradient, Hessian and rate Jacobian at x, all per subcarrier."""
    n_sub, ly, users = g.shape
    a = _tails(g, x)
    logdets = log_det(a)
    # m[n, k, i, j] = g_i^H A_k^{-1} g_j
    solved = np.linalg.solve(a, np.broadcast_to(g[:, None], (n_sub, users, ly, users)))
    m = np.einsum("nai,nkaj->nkij", g.conj(), solved)
    # position k's log-det contains user i only when i >= k
    mask = np.triu(np.ones((users, users)))
    q = np.real(np.diagonal(m, axis1=2, axis2=3)) * mask
    grad = np.einsum("k,nki->ni", c, q) / LN2 - mu
    pair = c[:, None, None] * mask[:, :, None] * mask[:, None, :]
    hess = -np.einsum("kij,nkij->nij", pair, np.abs(m) ** 2) / LN2
    q_next = np.concatenate([q[:, 1:], np.zeros((n_sub, 1, users))], axis=1)
    rate_jac = (q - q_next) / LN2
    value = logdets @ c / LN2 - np.einsum("ni,i->n", x, mu)
    return _Local(value=value, logdets=logdets, grad=grad, hess=hess, rate_jac=rate_jac)


def _kkt_residual(x: np.ndarray, grad: np.ndarray, mu: np.ndarray) -> float:
    if x.size == 0:
        return 0.0
    violation = np.where(x > 0, np.abs(grad), np.maximum(grad, 0.0))
    return float(np.max(violation / mu[None, :]))


def _free_system(neg_hess: np.ndarray, free: np.ndarray) -> np.ndarray:
    """-H restricted to free coordinates, identity on the bound ones, lightly regularized."""
    users = neg_hess.shape[1]
    diag = np.diagonal(neg_hess, axis1=1, axis2=2)
    delta = 1e-12 * np.maximum(diag.max(axis=1), np.finfo(float).tiny)
    system = np.where(free[:, :, None] & free[:, None, :], neg_hess, 0.0)
    system = system + delta[:, None, None] * np.eye(users)
    idx = np.arange(users)
    system[:, idx, idx] = np.where(free, system[:, idx, idx], 1.0)
    return system


def _newton_direction(x: np.ndarray, local: _Local) -> np.ndarray:
    neg_hess = -local.hess
    diag = np.diagonal(neg_hess, axis1=1, axis2=2)
    # coordinates that a Newton step would push through zero are sent to zero
    bound = (local.grad <= 0) & (x * diag <= -local.grad)
    free = ~bound
    rhs = np.where(free, local.grad, 0.0)
    step = np.linalg.solve(_free_system(neg_hess, free), rhs[..., None])[..., 0]
    return np.where(bound, -x, step)


def _line_search(
    g: np.ndarray, x: np.ndarray, step: np.ndarray, local: _Local, c: np.ndarray, mu: np.ndarray
) -> tuple[np.ndarray, np.ndarray]:
    """Projected backtracking Armijo search, independently per subcarrier."""
    n_sub = x.shape[0]
    scale = np.ones(n_sub)
    pending = np.ones(n_sub, dtype=bool)
    x_new = x.copy()
    magnitude = np.abs(local.value) + x @ mu
    for _ in range(MAX_HALVINGS):
        idx = np.flatnonzero(pending)
        trial = np.maximum(x[idx] + scale[idx, None] * step[idx], 0.0)
        gain = np.einsum("ni,ni->n", local.grad[idx], trial - x[idx])
        value = _objective(g[idx], trial, c, mu)
        ok = value >= local.value[idx] + ARMIJO * gain
        # full Newton steps whose predicted gain is below rounding are taken as is
        ok |= (scale[idx] == 1.0) & (gain <= 1e-13 * np.maximum(magnitude[idx], 1.0))
        x_new[idx[ok]] = trial[ok]
        pending[idx[ok]] = False
        scale[idx[~ok]] *= 0.5
        if not pending.any():
            break
    moved = np.any(x_new != x, axis=1)
    return x_new, moved


def _sensitivity(x: np.ndarray, local: _Local) -> np.ndarray:
    """d(sum_n b)/d theta in position space: sum_n D_F (-H_FF)^{-1} D_F^T."""
    free = x > 0
    system = _free_system(-local.hess, free)
    jac = local.rate_jac * free[:, None, :]
    solved = np.linalg.solve(system, np.transpose(jac, (0, 2, 1)))
    return np.einsum("nji,nik->jk", jac, solved)


def _position_coefficients(theta: np.ndarray, order: DecodingOrder, eps_theta: float = EPS_THETA) -> np.ndarray:
    """theta increments along the order; near-ties inside a cluster may dip by eps_theta and are clamped."""
    along = theta[list(order.order)]
    coeffs = np.diff(along, prepend=0.0)
    if np.any(coeffs < -eps_theta * max(float(along.max()), THETA_FLOOR)):
        raise DomainError(f"decoding order {order.label()} does not sort theta ascending")
    return np.maximum(coeffs, 0.0)


def inner_weighted_max(
    ch: ChannelSet,
    theta: ArrayLike,
    prices: ArrayLike,
    *,
    order: DecodingOrder | None = None,
    p0: np.ndarray | None = None,
    tol: float = 1e-8,
    eps_theta: float = EPS_THETA,
    max_iters: int = 100,
) -> InnerSolution:
    """
    Maximize sum_u theta_u b_u(p) - sum_u price_u p_u on every subcarrier.

    ``b_u`` are SIC rates with users decoded in ascending theta order, which
    makes the objective a non-negative combination of concave log-dets.
    Projected Newton with backtracking; ``tol`` bounds the projected gradient
    relative to the prices.
    """
    theta = _vector(theta, "theta")
    prices = _vector(prices, "prices")
    users = ch.num_users
    if theta.shape != (users,) or prices.shape != (users,):
        raise DomainError("theta and prices need one entry per user")
    if np.any(prices <= 0):
        raise DomainError("energy prices must be positive")
    order = order or derive_order(theta, eps_theta).canonical_order
    perm = list(order.order)

    g = np.transpose(_normalized_vectors(ch)[perm], (1, 2, 0))
    c = _position_coefficients(theta, order, eps_theta)
    mu = prices[perm]
    x = np.zeros((ch.num_subcarriers, users)) if p0 is None else np.maximum(np.asarray(p0, float)[perm].T, 0.0)

    iterations = 0
    local = _local(g, x, c, mu)
    residual = _kkt_residual(x, local.grad, mu)
    while residual > tol and iterations < max_iters:
        step = _newton_direction(x, local)
        x_next, moved = _line_search(g, x, step, local, c, mu)
        if not moved.any():
            break
        x = x_next
        iterations += 1
        local = _local(g, x, c, mu)
        residual = _kkt_residual(x, local.grad, mu)

    logdets = np.concatenate([local.logdets, np.zeros((ch.num_subcarriers, 1))], axis=1)
    pos_rates = np.maximum((logdets[:, :-1] - logdets[:, 1:]) / LN2, 0.0)
    powers = np.empty((users, ch.num_subcarriers))
    rates = np.empty_like(powers)
    powers[perm] = x.T
    rates[perm] = pos_rates.T
    sens = np.empty((users, users))
    sens[np.ix_(perm, perm)] = _sensitivity(x, local)
    return InnerSolution(
        powers=powers,
        rates=rates,
        sensitivity=sens,
        value=float(local.value.sum()),
        residual=residual,
        iterations=iterations,
        order=order,
    )


# =============================================================================
# Weighted energy minimization
# =============================================================================


def _single_user_gains(ch: ChannelSet) -> np.ndarray:
    """||h_{u,n}||^2 / sigma^2, the gains seen by a user alone (maximal-ratio combining)."""
    return np.sum(np.abs(ch.vectors()) ** 2, axis=2) / ch.noise_variance


@dataclass(frozen=True, eq=False)
class _DualPoint:
    """
    One evaluation of the dual function.

    Users are grouped into clusters, earliest decoded first, that share one
    multiplier exp(z[k]). Only cluster sum rates are determined by theta, so
    ``shortfall`` is kept per cluster.
    """

    z: np.ndarray
    clusters: tuple[tuple[int, ...], ...]
    theta: np.ndarray
    order: DecodingOrder
    sol: InnerSolution
    value: float
    shortfall: np.ndarray
    residual: float


def _membership(clusters: tuple[tuple[int, ...], ...], users: int) -> np.ndarray:
    m = np.zeros((users, len(clusters)))
    for k, cluster in enumerate(clusters):
        m[list(cluster), k] = 1.0
    return m


def _evaluate(
    ch: ChannelSet,
    z: np.ndarray,
    clusters: tuple[tuple[int, ...], ...],
    prices: np.ndarray,
    b_min: np.ndarray,
    warm: np.ndarray | None,
    opt: SolverOptions,
) -> _DualPoint:
    m = _membership(clusters, b_min.size)
    theta = m @ np.exp(z)
    order = DecodingOrder(tuple(u for cluster in clusters for u in cluster))
    for _ in range(INNER_RESTARTS):
        sol = inner_weighted_max(
            ch,
            theta,
            prices,
            order=order,
            p0=warm,
            tol=opt.inner_tol,
            eps_theta=opt.eps_theta,
            max_iters=opt.max_inner_iters,
        )
        if sol.residual <= opt.inner_tol or sol.iterations < opt.max_inner_iters:
            break
        logger.debug("inner solve hit %d iterations at KKT residual %.2e; restarting", sol.iterations, sol.residual)
        warm = sol.powers
    if sol.residual > opt.inner_tol:
        logger.debug("inner solve stopped at KKT residual %.2e", sol.residual)
    shortfall = m.T @ (b_min - sol.rates.sum(axis=1))
    smallest = np.array([b_min[list(c)].min() for c in clusters])
    return _DualPoint(
        z=z,
        clusters=clusters,
        theta=theta,
        order=order,
        sol=sol,
        value=float(theta @ b_min - sol.value),
        shortfall=shortfall,
        residual=float(np.max(np.abs(shortfall) / smallest)),
    )


def _newton_log_step(sens: np.ndarray, theta: np.ndarray, shortfall: np.ndarray) -> np.ndarray:
    """Solve (J Theta) dz = shortfall with J floored at the single-subcarrier sensitivity."""
    size = theta.size
    floor = 1.0 / (theta * LN2)
    reg = sens + np.diag(np.maximum(0.0, floor - np.diag(sens)))
    reg = reg + 1e-12 * max(np.trace(reg), np.finfo(float).tiny) * np.eye(size)
    return np.linalg.solve(reg * theta[None, :], shortfall)


def _diagonal_log_step(sens: np.ndarray, theta: np.ndarray, shortfall: np.ndarray) -> np.ndarray:
    """Per-cluster scaled step; keeps the sign of every shortfall."""
    diag = np.maximum(np.diag(sens), 1.0 / (theta * LN2))
    return shortfall / (theta * diag)


def _blocking(z: np.ndarray, dz: np.ndarray) -> tuple[float, int | None]:
    """Largest step in [0, 1] before two adjacent clusters meet, and the first pair to meet."""
    limit, pair = 1.0, None
    for k in range(z.size - 1):
        closing = dz[k] - dz[k + 1]
        if closing > 0:
            reach = max(z[k + 1] - z[k], 0.0) / closing
            if reach < limit:
                limit, pair = reach, k
    return limit, pair


def _merged(
    z: np.ndarray, clusters: tuple[tuple[int, ...], ...], pair: int
) -> tuple[np.ndarray, tuple[tuple[int, ...], ...]]:
    joined = tuple(sorted(clusters[pair] + clusters[pair + 1]))
    level = 0.5 * (z[pair] + z[pair + 1])
    z = np.delete(z, pair + 1)
    z[pair] = level
    return z, clusters[:pair] + (joined,) + clusters[pair + 2 :]


def _split(
    ch: ChannelSet, point: _DualPoint, b_min: np.ndarray, opt: SolverOptions
) -> tuple[np.ndarray, tuple[tuple[int, ...], ...]] | None:
    """
    Separate the user subset whose target its cluster cannot serve.

    With the cluster's sum rate matched, per-user targets are reachable by
    time sharing only if no subset T asks for more than it gets when decoded
    last inside the cluster. The worst offender moves to a new cluster decoded
    right after the rest.
    """
    alloc = PowerAllocation(point.sol.powers)
    worst = None
    for k, cluster in enumerate(point.clusters):
        if len(cluster) < 2:
            continue
        later = [u for c in point.clusters[k + 1 :] for u in c]
        base = subset_capacity(ch, alloc, later) if later else 0.0
        floor = SPLIT_FRACTION * opt.rate_tol * b_min[list(cluster)].min()
        for size in range(1, len(cluster)):
            for subset in itertools.combinations(cluster, size):
                served = subset_capacity(ch, alloc, list(subset) + later) - base
                excess = b_min[list(subset)].sum() - served
                if excess > floor and (worst is None or excess > worst[0]):
                    worst = (excess, k, subset)
    if worst is None:
        return None
    _, k, subset = worst
    rest = tuple(u for u in point.clusters[k] if u not in subset)
    logger.debug("splitting users %s off cluster %s", [u + 1 for u in subset], [u + 1 for u in point.clusters[k]])
    z = np.insert(point.z, k + 1, point.z[k])
    return z, point.clusters[:k] + (rest, subset) + point.clusters[k + 1 :]


def _line_search_dual(
    ch: ChannelSet,
    point: _DualPoint,
    dz: np.ndarray,
    limit: float,
    pair: int | None,
    prices: np.ndarray,
    b_min: np.ndarray,
    opt: SolverOptions,
) -> _DualPoint | None:
    """Backtracking Armijo search on the dual value; a step that reaches ``limit`` joins ``pair``."""
    slope = float((np.exp(point.z) * point.shortfall) @ dz)
    magnitude = max(abs(point.value), 1.0)
    t = limit
    for _ in range(MAX_HALVINGS):
        z, clusters = point.z + t * dz, point.clusters
        if pair is not None and t == limit:
            z, clusters = _merged(z, clusters, pair)
        trial = _evaluate(ch, z, clusters, prices, b_min, point.sol.powers, opt)
        if trial.value >= point.value + ARMIJO * t * slope:
            return trial
        # full steps whose predicted gain is below rounding are taken as is
        if t == 1.0 and slope <= 1e-13 * magnitude:
            return trial
        t *= 0.5
    return None


def _embed_order(order: DecodingOrder, active: np.ndarray) -> DecodingOrder:
    """Lift an order over active users to all users, inactive (theta = 0) users first."""
    active_idx = np.flatnonzero(active)
    inactive_idx = np.flatnonzero(~active)
    return DecodingOrder(tuple(int(u) for u in inactive_idx) + tuple(int(active_idx[u]) for u in order.order))


def _embed_schedule(schedule: TimeShareSchedule, active: np.ndarray) -> TimeShareSchedule:
    entries = []
    for entry in schedule.entries:
        rates = np.zeros(active.size)
        rates[active] = entry.rates
        entries.append(ScheduleEntry(_embed_order(entry.order, active), entry.weight, rates))
    return TimeShareSchedule(tuple(entries))


def _cluster_schedule(ch: ChannelSet, point: _DualPoint, b_min: np.ndarray, opt: SolverOptions) -> TimeShareSchedule:
    alloc = PowerAllocation(point.sol.powers)
    if all(len(c) == 1 for c in point.clusters):
        return TimeShareSchedule.single(point.order, sic_rates(ch, alloc, point.order).per_user())
    oc = OrderClusters(clusters=point.clusters, canonical_order=point.order)
    cand = rates_per_order(ch, alloc, enumerate_orders(oc, opt.max_orders))
    return solve_timeshare(cand, b_min, tol=opt.rate_tol)


def _finish(
    ch: ChannelSet,
    energy: np.ndarray,
    theta: np.ndarray,
    schedule: TimeShareSchedule | None,
    opt: SolverOptions,
    iterations: int,
    trace: list[TraceRow],
    lam: np.ndarray | None = None,
) -> AllocationResult:
    alloc = PowerAllocation(np.maximum(energy, 0.0))
    cert = DualCertificate(theta, lam)
    order = derive_order(cert, opt.eps_theta).canonical_order
    rates = sic_rates(ch, alloc, order)
    if schedule is None:
        schedule = TimeShareSchedule.single(order, rates.per_user())
    return AllocationResult(
        alloc=alloc,
        rates=rates,
        cert=cert,
        order=order,
        schedule=schedule,
        iterations=iterations,
        trace=tuple(trace),
    )


def min_energy_allocate(
    ch: ChannelSet, req: RateRequirement, opt: SolverOptions | None = None
) -> AllocationResult:
    """
    Minimize sum_u w_u sum_n e[u][n] subject to sum_n b[u][n] >= b_min[u].

    Dual ascent over clusters of tied users: Newton steps in log theta drive
    each cluster's sum rate to its target, clusters that meet are joined, and
    a cluster whose per-user targets fall outside its time-sharing face is
    split. Per-user targets inside a cluster are met by time sharing.

    Users with a zero target get no energy and theta = 0. Raises Infeasible
    when a user with a positive target has no usable subcarrier or its energy
    runs past ``energy_cap`` times its interference-free requirement, and
    NotConverged after ``max_outer_iters`` dual steps.
    """
    opt = opt or SolverOptions()
    users, n_sub = ch.num_users, ch.num_subcarriers
    if req.b_min.shape != (users,):
        raise DomainError(f"b_min has {req.b_min.size} entries for {users} users")
    gains = _single_user_gains(ch)

    active = req.b_min > 0
    energy = np.zeros((users, n_sub))
    theta_full = np.zeros(users)
    if not active.any():
        return _finish(ch, energy, theta_full, None, opt, 0, [])

    dead = active & ~np.any(gains > 0, axis=1)
    if dead.any():
        raise Infeasible(f"user(s) {(np.flatnonzero(dead) + 1).tolist()} have no usable subcarrier")

    sub = ch.select(np.flatnonzero(active))
    b_min = req.b_min[active]
    prices = np.maximum(req.weights, WEIGHT_FLOOR * req.weights.max())[active]
    reference = np.array([water_fill_target(gains[u], req.b_min[u]).sum() for u in np.flatnonzero(active)])
    levels = np.array([water_level_for_target(gains[u], req.b_min[u]) for u in np.flatnonzero(active)])
    log_theta = np.log(prices * LN2 * levels)
    start = derive_order(np.exp(log_theta), opt.eps_theta).clusters
    z0 = np.array([log_theta[list(c)].mean() for c in start])
    point = _evaluate(sub, z0, start, prices, b_min, None, opt)

    trace: list[TraceRow] = []
    best = -np.inf
    for it in range(1, opt.max_outer_iters + 1):
        best = max(best, point.value)
        if opt.trace:
            trace.append(TraceRow(it, point.value, best, point.residual))

        if point.residual <= CONVERGED_FRACTION * opt.rate_tol and point.sol.residual <= 10 * opt.inner_tol:
            split = _split(sub, point, b_min, opt)
            if split is None:
                schedule = _cluster_schedule(sub, point, b_min, opt)
                energy[active] = point.sol.powers
                theta_full[active] = point.theta
                logger.debug(
                    "min-energy converged after %d steps, %d cluster(s), %d-order schedule",
                    it,
                    len(point.clusters),
                    len(schedule),
                )
                return _finish(ch, energy, theta_full, _embed_schedule(schedule, active), opt, it, trace)
            z, clusters = split
            point = _evaluate(sub, z, clusters, prices, b_min, point.sol.powers, opt)
            continue

        if np.any(point.sol.powers.sum(axis=1) > opt.energy_cap * reference):
            raise Infeasible(f"energy diverged with rate residual {point.residual:.3e} after {it} steps")

        m = _membership(point.clusters, b_min.size)
        sens = m.T @ point.sol.sensitivity @ m
        tau = np.exp(point.z)
        dz = opt.step_scale * _newton_log_step(sens, tau, point.shortfall)
        limit, pair = _blocking(point.z, dz)
        if pair is not None and limit * np.abs(dz).max() < MERGE_GAP:
            # freshly split clusters start level; fall back to a step that separates them
            dz = opt.step_scale * _diagonal_log_step(sens, tau, point.shortfall)
            limit_d, pair_d = _blocking(point.z, dz)
            if pair_d is not None and limit_d * np.abs(dz).max() < MERGE_GAP:
                z, clusters = _merged(point.z, point.clusters, pair)
                point = _evaluate(sub, z, clusters, prices, b_min, point.sol.powers, opt)
                continue
            limit, pair = limit_d, pair_d

        reach = np.abs(dz).max()
        if reach > MAX_LOG_STEP:
            dz = dz * (MAX_LOG_STEP / reach)
            limit, pair = _blocking(point.z, dz)
        moved = _line_search_dual(sub, point, dz, limit, pair, prices, b_min, opt)
        if moved is None:
            raise NotConverged(
                f"min-energy dual line search stalled at residual {point.residual:.3e} after {it} steps",
                iterations=it,
                residual=point.residual,
            )
        point = moved

    raise NotConverged(
        f"min-energy allocation stopped at residual {point.residual:.3e} after {opt.max_outer_iters} steps",
        iterations=opt.max_outer_iters,
        residual=point.residual,
    )


# =============================================================================
# Weighted rate maximization
# =============================================================================


def _block_gains(g: np.ndarray, x: np.ndarray, pos: int) -> np.ndarray:
    """a[n, k] = g_pos^H B_k^{-1} g_pos for k <= pos, B_k leaving out the user at pos."""
    others = x.copy()
    others[:, pos] = 0.0
    tails = _tails(g, others)[:, : pos + 1]
    vec = g[:, :, pos]
    solved = np.linalg.solve(tails, np.broadcast_to(vec[:, None, :, None], (*tails.shape[:3], 1)))[..., 0]
    return np.real(np.einsum("na,nka->nk", vec.conj(), solved))


def _powers_at_price(a: np.ndarray, c: np.ndarray, price: float) -> np.ndarray:
    """Per-subcarrier p solving sum_k c_k a_k / ((1 + p a_k) ln 2) = price, or 0 below it."""
    slope0 = a @ c / LN2
    powers = np.zeros(a.shape[0])
    on = slope0 > price
    if not on.any():
        return powers
    a_on = a[on]
    lo = np.zeros(a_on.shape[0])
    hi = np.full(a_on.shape[0], c.sum() / (price * LN2))
    x = 0.5 * hi
    target = 1.0 / price
    for _ in range(200):
        denom = 1.0 + x[:, None] * a_on
        slope = (c * a_on / denom).sum(axis=1) / LN2
        curve = (c * a_on**2 / denom**2).sum(axis=1) / LN2
        # 1 / slope is increasing in p; Newton on it with bisection fallback
        h = 1.0 / slope - target
        lo = np.where(h < 0, x, lo)
        hi = np.where(h > 0, x, hi)
        done = np.abs(h) <= 1e-12 * target
        if done.all():
            break
        nxt = x - h * slope**2 / curve
        outside = ~((nxt > lo) & (nxt < hi))
        x = np.where(done, x, np.where(outside, 0.5 * (lo + hi), nxt))
    powers[on] = x
    return powers


def _fill_block(a: np.ndarray, c: np.ndarray, budget: float) -> tuple[np.ndarray, float]:
    """Spend ``budget`` across subcarriers maximizing sum_n sum_k c_k log2(1 + p_n a_nk)."""
    slope0 = a @ c / LN2
    if budget <= 0 or not slope0.max() > 0:
        return np.zeros(a.shape[0]), 0.0

    def excess(level: float) -> float:
        return _powers_at_price(a, c, 1.0 / level).sum() - budget

    lo = 1.0 / slope0.max()
    hi = 2.0 * lo
    for _ in range(200):
        if excess(hi) >= 0:
            break
        hi *= 2.0
    level = brentq(excess, lo, hi, xtol=1e-15 * hi, rtol=1e-13)
    powers = _powers_at_price(a, c, 1.0 / level)
    total = powers.sum()
    if total > 0:
        powers *= budget / total
    return powers, 1.0 / level


def max_rate_allocate(
    ch: ChannelSet,
    budget: EnergyBudget,
    opt: SolverOptions | None = None,
    *,
    order: DecodingOrder | None = None,
) -> AllocationResult:
    """
    Maximize sum_u theta_w[u] sum_n b[u][n] subject to sum_n e[u][n] <= E_max[u].

    The decoding order defaults to ascending theta_w; a fixed ``order`` may be
    passed as long as it keeps theta_w non-decreasing along it. Users with no
    budget, no weight or no usable subcarrier stay silent. Iterates until the
    KKT residual at the budget prices is below ``rate_tol``.
    """
    opt = opt or SolverOptions()
    users, n_sub = ch.num_users, ch.num_subcarriers
    if budget.e_max.shape != (users,):
        raise DomainError(f"e_max has {budget.e_max.size} entries for {users} users")
    theta = budget.theta_w
    order = order or derive_order(theta, opt.eps_theta).canonical_order
    if len(order) != users:
        raise DomainError("decoding order must cover every user")
    perm = list(order.order)
    c = _position_coefficients(theta, order, opt.eps_theta)

    gains = _single_user_gains(ch)
    active = (budget.e_max > 0) & (theta > 0) & np.any(gains > 0, axis=1)
    lam = np.zeros(users)
    if not active.any():
        alloc = PowerAllocation.zeros(users, n_sub)
        rates = sic_rates(ch, alloc, order)
        return AllocationResult(
            alloc=alloc,
            rates=rates,
            cert=DualCertificate(theta, lam),
            order=order,
            schedule=TimeShareSchedule.single(order, rates.per_user()),
        )

    g = np.transpose(_normalized_vectors(ch)[perm], (1, 2, 0))
    e_max = budget.e_max[perm]
    live = active[perm]
    x = np.zeros((n_sub, users))
    prices = np.zeros(users)

    trace: list[TraceRow] = []
    best = -np.inf
    residual = np.inf
    for it in range(1, opt.max_outer_iters + 1):
        for pos in np.flatnonzero(live):
            x[:, pos], prices[pos] = _fill_block(_block_gains(g, x, pos), c[: pos + 1], e_max[pos])
        local = _local(g, x, c, np.where(live, prices, 1.0))
        value = float(local.logdets.sum(axis=0) @ c / LN2)
        best = max(best, value)
        residual = _kkt_residual(x[:, live], local.grad[:, live], prices[live])
        if opt.trace:
            trace.append(TraceRow(it, value, best, residual))
        if residual <= opt.rate_tol:
            break
    else:
        raise NotConverged(
            f"max-rate allocation stopped at KKT residual {residual:.3e} after {opt.max_outer_iters} sweeps",
            iterations=opt.max_outer_iters,
            residual=residual,
        )

    energy = np.empty((users, n_sub))
    energy[perm] = x.T
    spent = energy.sum(axis=1)
    with np.errstate(divide="ignore", invalid="ignore"):
        shrink = np.where(spent > 0, np.minimum(1.0, budget.e_max / spent), 1.0)
    energy *= shrink[:, None]
    lam[perm] = prices
    alloc = PowerAllocation(energy)
    rates = sic_rates(ch, alloc, order)
    logger.debug("max-rate converged after %d sweeps, KKT residual %.2e", it, residual)
    return AllocationResult(
        alloc=alloc,
        rates=rates,
        cert=DualCertificate(theta, lam),
        order=order,
        schedule=TimeShareSchedule.single(order, rates.per_user()),
        iterations=it,
        trace=tuple(trace),
    )
