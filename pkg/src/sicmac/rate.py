"""
SIC rate engine.

All rates are Shannon rates in bits per subcarrier-symbol. Log-determinants of
the L_y x L_y receive covariances come from batched Cholesky factors of
I + sum_u H_u R_xx H_u^H / sigma^2.
"""

import itertools
import logging
from dataclasses import dataclass

import numpy as np
from numpy.typing import ArrayLike

from sicmac.channel import ChannelSet
from sicmac.errors import DomainError

logger = logging.getLogger(__name__)

__all__ = [
    "DecodingOrder",
    "PowerAllocation",
    "RateMatrix",
    "sic_rates",
    "subset_capacity",
    "throughput_mbps",
    "polymatroid_violation",
    "bits_to_mbps",
    "mbps_to_bits",
    "log_det",
]

MAX_VERIFY_USERS = 10


@dataclass(frozen=True)
class DecodingOrder:
    """
    SIC decoding order. ``order[k]`` is the (0-based) user decoded k-th.

    Labels are 1-based and dash-joined, e.g. ``"3-2-1"``.
    """

    order: tuple[int, ...]

    def __post_init__(self):
        order = tuple(int(u) for u in self.order)
        if sorted(order) != list(range(len(order))) or not order:
            raise DomainError(f"not a permutation of users: {self.order}")
        object.__setattr__(self, "order", order)

    @classmethod
    def identity(cls, num_users: int) -> "DecodingOrder":
        return cls(tuple(range(num_users)))

    @classmethod
    def parse(cls, label: str) -> "DecodingOrder":
        try:
            return cls(tuple(int(part) - 1 for part in label.strip().split("-")))
        except ValueError as exc:
            raise DomainError(f"invalid decoding order label {label!r}") from exc

    def label(self) -> str:
        return "-".join(str(u + 1) for u in self.order)

    def positions(self) -> np.ndarray:
        """Inverse permutation: the decode position of each user."""
        pos = np.empty(len(self.order), dtype=int)
        pos[list(self.order)] = np.arange(len(self.order))
        return pos

    def __len__(self) -> int:
        return len(self.order)

    def __iter__(self):
        return iter(self.order)

    def __str__(self) -> str:
        return self.label()


def _frozen_matrix(values: ArrayLike, name: str) -> np.ndarray:
    arr = np.array(values, dtype=float)
    if arr.ndim != 2:
        raise DomainError(f"{name} must be a (users, subcarriers) matrix, got shape {arr.shape}")
    if np.any(~np.isfinite(arr)) or np.any(arr < 0):
        raise DomainError(f"{name} entries must be finite and non-negative")
    arr.flags.writeable = False
    return arr


@dataclass(frozen=True, eq=False)
class PowerAllocation:
    """Energy e[u][n] in watts per user and subcarrier."""

    energy: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "energy", _frozen_matrix(self.energy, "energy"))

    @classmethod
    def zeros(cls, num_users: int, num_subcarriers: int) -> "PowerAllocation":
        return cls(np.zeros((num_users, num_subcarriers)))

    def per_user(self) -> np.ndarray:
        return self.energy.sum(axis=1)

    def total(self) -> float:
        return float(self.energy.sum())


@dataclass(frozen=True, eq=False)
class RateMatrix:
    """Bits per subcarrier-symbol b[u][n]."""

    bits: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "bits", _frozen_matrix(self.bits, "bits"))

    def per_user(self) -> np.ndarray:
        return self.bits.sum(axis=1)

    def total(self) -> float:
        return float(self.bits.sum())


def log_det(a: np.ndarray) -> np.ndarray:
    """Natural log-determinant of a stack of Hermitian positive-definite matrices."""
    try:
        chol = np.linalg.cholesky(a)
    except np.linalg.LinAlgError as exc:
        raise DomainError("receive covariance is not positive definite") from exc
    return 2.0 * np.sum(np.log(np.real(np.diagonal(chol, axis1=-2, axis2=-1))), axis=-1)


def _check_inputs(ch: ChannelSet, alloc: PowerAllocation) -> None:
    if not ch.noise_variance > 0:
        raise DomainError("noise covariance is singular")
    if alloc.energy.shape != (ch.num_users, ch.num_subcarriers):
        raise DomainError(
            f"allocation shape {alloc.energy.shape} does not match {ch.num_users} users x {ch.num_subcarriers} subcarriers"
        )


def _normalized_covariances(ch: ChannelSet, alloc: PowerAllocation) -> np.ndarray:
    """H_u (e_u / L_xu) H_u^H / sigma^2 for every user, shaped (U, N, L_y, L_y)."""
    covs = []
    for u, h in enumerate(ch.h):
        scale = alloc.energy[u] / (h.shape[2] * ch.noise_variance)
        covs.append(np.einsum("nab,ncb->nac", h, h.conj()) * scale[:, None, None])
    return np.stack(covs)


def sic_rates(ch: ChannelSet, alloc: PowerAllocation, order: DecodingOrder) -> RateMatrix:
    """Per-user, per-subcarrier SIC rates under a decoding order."""
    _check_inputs(ch, alloc)
    if len(order) != ch.num_users:
        raise DomainError(f"decoding order covers {len(order)} users, channel has {ch.num_users}")

    ordered = _normalized_covariances(ch, alloc)[list(order.order)]
    # tail[k] = sum of covariances of users decoded at position k or later
    tail = np.cumsum(ordered[::-1], axis=0)[::-1]
    eye = np.eye(ch.ap_antennas)
    logdets = log_det(eye + tail)
    logdets = np.concatenate([logdets, np.zeros((1, ch.num_subcarriers))])

    ordered_bits = np.maximum((logdets[:-1] - logdets[1:]) / np.log(2), 0.0)
    bits = np.empty_like(ordered_bits)
    bits[list(order.order)] = ordered_bits
    return RateMatrix(bits)


def _capacity_of(covs: np.ndarray, users: list[int], ap_antennas: int) -> float:
    total = covs[users].sum(axis=0)
    return float(log_det(np.eye(ap_antennas) + total).sum() / np.log(2))


def subset_capacity(ch: ChannelSet, alloc: PowerAllocation, users: ArrayLike) -> float:
    """Sum over subcarriers of log2 det(I + sum_{u in T} H_u R_xx H_u^H / sigma^2)."""
    _check_inputs(ch, alloc)
    members = sorted({int(u) for u in np.atleast_1d(users)})
    if not members:
        raise DomainError("user subset must be non-empty")
    if members[0] < 0 or members[-1] >= ch.num_users:
        raise DomainError(f"user subset {members} out of range for {ch.num_users} users")
    return _capacity_of(_normalized_covariances(ch, alloc), members, ch.ap_antennas)


def polymatroid_violation(ch: ChannelSet, alloc: PowerAllocation, order: DecodingOrder) -> float:
    """
    Largest excess of a subset's SIC rate sum over its capacity bound.

    Non-positive (up to rounding) for any allocation and order; every
    non-empty subset is checked, so this is limited to small user counts.
    """
    if ch.num_users > MAX_VERIFY_USERS:
        raise DomainError(f"subset verification is limited to {MAX_VERIFY_USERS} users")
    per_user = sic_rates(ch, alloc, order).per_user()
    covs = _normalized_covariances(ch, alloc)
    worst = -np.inf
    for size in range(1, ch.num_users + 1):
        for subset in itertools.combinations(range(ch.num_users), size):
            members = list(subset)
            excess = per_user[members].sum() - _capacity_of(covs, members, ch.ap_antennas)
            worst = max(worst, float(excess))
    return worst


def throughput_mbps(b: RateMatrix | ArrayLike, bandwidth_hz: float, num_subcarriers: int) -> np.ndarray:
    """Per-user throughput in Mbps: (W / N) * sum_n b[u][n] / 1e6."""
    if bandwidth_hz <= 0:
        raise DomainError("bandwidth must be positive")
    bits = b.bits if isinstance(b, RateMatrix) else np.asarray(b, dtype=float)
    return bits_to_mbps(np.atleast_2d(bits).sum(axis=1), bandwidth_hz, num_subcarriers)


def bits_to_mbps(bits: ArrayLike, bandwidth_hz: float, num_subcarriers: int) -> np.ndarray:
    """Convert aggregate bits per OFDM symbol to Mbps."""
    return np.asarray(bits, dtype=float) * (bandwidth_hz / num_subcarriers) / 1e6


def mbps_to_bits(mbps: ArrayLike, bandwidth_hz: float, num_subcarriers: int) -> np.ndarray:
    return np.asarray(mbps, dtype=float) * 1e6 * num_subcarriers / bandwidth_hz
