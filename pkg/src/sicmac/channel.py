"""
Synthetic multi-carrier channel generation.

Every user gets a distance, a log-normal shadowing draw and, for each
(AP antenna, user antenna) pair, an 8-tap complex Gaussian impulse response
with an exponential power-delay profile. The N-point DFT of the taps gives
the per-subcarrier coefficients, scaled by the large-scale amplitude gain.

Randomness is split into named streams keyed by (seed, stream, user, ...),
so any single link can be regenerated without drawing the others.
"""

import dataclasses
import logging
from dataclasses import dataclass, field

import numpy as np
from numpy.typing import ArrayLike

from sicmac.errors import DomainError

logger = logging.getLogger(__name__)

__all__ = [
    "ScenarioConfig",
    "PathLossModel",
    "ChannelSet",
    "path_loss_db",
    "sample_shadow_db",
    "generate_channels",
    "noise_variance",
]

NUM_TAPS = 8
DECAY_S = 30e-9

STREAM_DISTANCE = 0
STREAM_SHADOW = 1
STREAM_TAPS = 2


def _stream(seed: int, *key: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence(seed, spawn_key=key))


@dataclass(frozen=True)
class PathLossModel:
    """Breakpoint path loss with distance-dependent shadowing spread."""

    d_break_m: float = 5.0
    slope_after_break_db: float = 35.0
    sigma_shadow_before_db: float = 3.0
    sigma_shadow_after_db: float = 4.0

    def __post_init__(self):
        if self.d_break_m <= 0:
            raise DomainError(f"d_break_m must be positive, got {self.d_break_m}")
        if self.sigma_shadow_before_db < 0 or self.sigma_shadow_after_db < 0:
            raise DomainError("shadowing standard deviations must be non-negative")

    def shadow_sigma_db(self, d_m: float) -> float:
        return self.sigma_shadow_before_db if d_m <= self.d_break_m else self.sigma_shadow_after_db


@dataclass(frozen=True)
class ScenarioConfig:
    """
    One uplink scenario. Defaults follow the reference Wi-Fi setup:
    64 subcarriers over 80 MHz at 5 GHz, -174 dBm/Hz noise, users between 1 and 10 m.

    ``distances_m`` left as None means every user's distance is drawn
    uniformly from [d_min_m, d_max_m] out of its own random stream.
    """

    num_users: int = 3
    antennas_per_user: int | tuple[int, ...] = 1
    ap_antennas: int = 2
    num_subcarriers: int = 64
    bandwidth_hz: float = 80e6
    center_freq_hz: float = 5e9
    distances_m: tuple[float, ...] | None = None
    d_min_m: float = 1.0
    d_max_m: float = 10.0
    noise_psd_dbm_per_hz: float = -174.0
    seed: int = 0

    def __post_init__(self):
        if self.num_users < 1:
            raise DomainError(f"num_users must be >= 1, got {self.num_users}")
        if self.ap_antennas < 1:
            raise DomainError(f"ap_antennas must be >= 1, got {self.ap_antennas}")
        if self.num_subcarriers < 1:
            raise DomainError(f"num_subcarriers must be >= 1, got {self.num_subcarriers}")
        if self.bandwidth_hz <= 0 or self.center_freq_hz <= 0:
            raise DomainError("bandwidth_hz and center_freq_hz must be positive")
        if not 0 < self.d_min_m <= self.d_max_m:
            raise DomainError(f"need 0 < d_min_m <= d_max_m, got [{self.d_min_m}, {self.d_max_m}]")
        if self.seed < 0:
            raise DomainError(f"seed must be non-negative, got {self.seed}")
        if isinstance(self.antennas_per_user, tuple):
            if len(self.antennas_per_user) != self.num_users:
                raise DomainError("antennas_per_user needs one entry per user")
            if min(self.antennas_per_user) < 1:
                raise DomainError("every user needs at least one antenna")
        elif self.antennas_per_user < 1:
            raise DomainError("antennas_per_user must be >= 1")
        if self.distances_m is not None:
            if len(self.distances_m) != self.num_users:
                raise DomainError(
                    f"distances_m has {len(self.distances_m)} entries for {self.num_users} users"
                )
            if min(self.distances_m) <= 0:
                raise DomainError("all distances must be positive")

    def user_antennas(self) -> tuple[int, ...]:
        if isinstance(self.antennas_per_user, tuple):
            return self.antennas_per_user
        return (self.antennas_per_user,) * self.num_users

    def resolved_distances(self) -> np.ndarray:
        if self.distances_m is not None:
            return np.asarray(self.distances_m, dtype=float)
        return np.array(
            [_stream(self.seed, STREAM_DISTANCE, u).uniform(self.d_min_m, self.d_max_m) for u in range(self.num_users)]
        )

    def replace(self, **changes) -> "ScenarioConfig":
        return dataclasses.replace(self, **changes)


@dataclass(frozen=True, eq=False)
class ChannelSet:
    """
    Per-user channel tensors plus the white noise variance.

    ``h[u]`` has shape (N, L_y, L_xu). Arrays are made read-only on construction.
    """

    h: tuple[np.ndarray, ...]
    noise_variance: float
    distances_m: np.ndarray = field(default_factory=lambda: np.zeros(0))

    def __post_init__(self):
        if not self.h:
            raise DomainError("a channel set needs at least one user")
        if not self.noise_variance > 0:
            raise DomainError(f"noise variance must be positive, got {self.noise_variance}")
        shapes = {(arr.shape[0], arr.shape[1]) for arr in self.h}
        if any(arr.ndim != 3 for arr in self.h) or len(shapes) != 1:
            raise DomainError("every user needs an (N, L_y, L_x) channel with common N and L_y")
        frozen = []
        for arr in self.h:
            arr = np.array(arr, dtype=np.complex128)
            arr.flags.writeable = False
            frozen.append(arr)
        object.__setattr__(self, "h", tuple(frozen))

    @classmethod
    def from_vectors(cls, h: ArrayLike, noise_variance: float) -> "ChannelSet":
        """Build a single-antenna-per-user set from an array shaped (U, N) or (U, N, L_y)."""
        arr = np.asarray(h, dtype=np.complex128)
        if arr.ndim == 2:
            arr = arr[:, :, None]
        if arr.ndim != 3:
            raise DomainError(f"expected (U, N) or (U, N, L_y) channel vectors, got shape {arr.shape}")
        return cls(h=tuple(arr[u][:, :, None] for u in range(arr.shape[0])), noise_variance=float(noise_variance))

    @property
    def num_users(self) -> int:
        return len(self.h)

    @property
    def num_subcarriers(self) -> int:
        return self.h[0].shape[0]

    @property
    def ap_antennas(self) -> int:
        return self.h[0].shape[1]

    def user_antennas(self) -> tuple[int, ...]:
        return tuple(arr.shape[2] for arr in self.h)

    def vectors(self) -> np.ndarray:
        """Channel vectors shaped (U, N, L_y); only defined with one antenna per user."""
        if any(lx != 1 for lx in self.user_antennas()):
            raise DomainError("power allocation supports one transmit antenna per user")
        return np.stack([arr[:, :, 0] for arr in self.h])

    def strengths(self) -> np.ndarray:
        """Aggregate channel energy sum_n ||H[u][n]||_F^2 per user."""
        return np.array([float(np.sum(np.abs(arr) ** 2)) for arr in self.h])

    def gains(self) -> np.ndarray:
        """Mean |H|^2 over subcarriers and antenna pairs, per user."""
        return np.array([float(np.mean(np.abs(arr) ** 2)) for arr in self.h])

    def select(self, users: ArrayLike) -> "ChannelSet":
        idx = [int(u) for u in np.atleast_1d(users)]
        return ChannelSet(h=tuple(self.h[u] for u in idx), noise_variance=self.noise_variance)

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, ChannelSet):
            return NotImplemented
        return (
            self.noise_variance == other.noise_variance
            and len(self.h) == len(other.h)
            and all(np.array_equal(a, b) for a, b in zip(self.h, other.h, strict=True))
        )

    __hash__ = None


def _positive(value: ArrayLike, name: str) -> np.ndarray:
    arr = np.asarray(value, dtype=float)
    if np.any(~(arr > 0)):
        raise DomainError(f"{name} must be positive")
    return arr


def path_loss_db(d_m: ArrayLike, f_hz: ArrayLike, model: PathLossModel | None = None) -> np.ndarray | float:
    """
    Deterministic path loss in dB, shadowing excluded.

    20 log10 f + 20 log10 d - 147.5, plus slope*log10(d / d_break) past the breakpoint.
    """
    model = model or PathLossModel()
    d = _positive(d_m, "distance")
    f = _positive(f_hz, "frequency")
    loss = 20 * np.log10(f) + 20 * np.log10(d) - 147.5
    beyond = np.maximum(d / model.d_break_m, 1.0)
    loss = loss + model.slope_after_break_db * np.log10(beyond)
    return float(loss) if np.ndim(loss) == 0 else loss


def sample_shadow_db(
    d_m: float,
    rng: np.random.Generator,
    model: PathLossModel | None = None,
    size: int | None = None,
) -> np.ndarray | float:
    """Zero-mean Gaussian shadowing in dB with the spread of the distance's side of the breakpoint."""
    model = model or PathLossModel()
    if not d_m > 0:
        raise DomainError(f"distance must be positive, got {d_m}")
    draw = rng.normal(0.0, model.shadow_sigma_db(d_m), size=size)
    return float(draw) if size is None else draw


def noise_variance(noise_psd_dbm_per_hz: float, bandwidth_hz: float, num_subcarriers: int) -> float:
    """Per-subcarrier noise power in watts."""
    if bandwidth_hz <= 0 or num_subcarriers < 1:
        raise DomainError("bandwidth must be positive and num_subcarriers >= 1")
    return 10 ** ((noise_psd_dbm_per_hz + 10 * np.log10(bandwidth_hz / num_subcarriers) - 30) / 10)


def _power_delay_profile(bandwidth_hz: float) -> np.ndarray:
    delays = np.arange(NUM_TAPS) / bandwidth_hz
    pdp = np.exp(-delays / DECAY_S)
    return pdp / pdp.sum()


def _dft_matrix(num_subcarriers: int) -> np.ndarray:
    # explicit matrix so that fewer subcarriers than taps alias the taps
    n = np.arange(num_subcarriers)[:, None]
    taps = np.arange(NUM_TAPS)[None, :]
    return np.exp(-2j * np.pi * n * taps / num_subcarriers)


def _link_taps(seed: int, user: int, ap_antenna: int, user_antenna: int, pdp: np.ndarray) -> np.ndarray:
    rng = _stream(seed, STREAM_TAPS, user, ap_antenna, user_antenna)
    gaussian = rng.standard_normal(NUM_TAPS) + 1j * rng.standard_normal(NUM_TAPS)
    return gaussian * np.sqrt(pdp / 2)


def generate_channels(cfg: ScenarioConfig, model: PathLossModel | None = None) -> ChannelSet:
    """Draw one reproducible channel realization for the scenario."""
    model = model or PathLossModel()
    pdp = _power_delay_profile(cfg.bandwidth_hz)
    dft = _dft_matrix(cfg.num_subcarriers)
    distances = cfg.resolved_distances()

    h = []
    for u, lx in enumerate(cfg.user_antennas()):
        d = float(distances[u])
        shadow = sample_shadow_db(d, _stream(cfg.seed, STREAM_SHADOW, u), model)
        amplitude = 10 ** (-(path_loss_db(d, cfg.center_freq_hz, model) + shadow) / 20)
        user_h = np.empty((cfg.num_subcarriers, cfg.ap_antennas, lx), dtype=np.complex128)
        for a in range(cfg.ap_antennas):
            for b in range(lx):
                user_h[:, a, b] = amplitude * (dft @ _link_taps(cfg.seed, u, a, b, pdp))
        h.append(user_h)
        logger.debug("user %d: d=%.2f m, shadow=%.2f dB, amplitude=%.3e", u + 1, d, shadow, amplitude)

    sigma2 = noise_variance(cfg.noise_psd_dbm_per_hz, cfg.bandwidth_hz, cfg.num_subcarriers)
    return ChannelSet(h=tuple(h), noise_variance=sigma2, distances_m=distances)
