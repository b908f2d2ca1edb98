"""Variance-preserving noise schedules and the forward noising map.

A schedule assigns each discrete timestep t = 1..T a signal coefficient
alpha_t and a noise coefficient sigma_t with alpha_t^2 + sigma_t^2 = 1,
so the noised image is z_t = alpha_t * x + sigma_t * eps.
"""

from dataclasses import dataclass
import math

import numpy as np

from .errors import InvalidArgument

# Linear kind: noise variance sigma_t^2 ramps linearly between these two
# endpoints, so alpha_1 = sqrt(1 - LINEAR_VAR_START).
LINEAR_VAR_START = 1e-4
LINEAR_VAR_END = 0.9999

_VP_TOL = 1e-9


@dataclass(frozen=True)
class NoiseSchedule:
    """Per-timestep (alpha_t, sigma_t) pairs, 1-indexed via :meth:`alpha`.

    Invariants: alpha_t in (0, 1] non-increasing, sigma_t in [0, 1)
    non-decreasing, alpha_t^2 + sigma_t^2 = 1 within 1e-9.
    """

    alphas: np.ndarray
    sigmas: np.ndarray

    def __post_init__(self):
        alphas = np.asarray(self.alphas, dtype=np.float64)
        sigmas = np.asarray(self.sigmas, dtype=np.float64)
        object.__setattr__(self, "alphas", alphas)
        object.__setattr__(self, "sigmas", sigmas)
        if alphas.ndim != 1 or sigmas.ndim != 1 or len(alphas) != len(sigmas):
            raise InvalidArgument("alphas and sigmas must be 1-d and equally long")
        if len(alphas) == 0:
            raise InvalidArgument("schedule needs at least one timestep")
        if np.any(alphas <= 0.0) or np.any(alphas > 1.0):
            raise InvalidArgument("alphas must lie in (0, 1]")
        if np.any(sigmas < 0.0) or np.any(sigmas >= 1.0):
            raise InvalidArgument("sigmas must lie in [0, 1)")
        if np.max(np.abs(alphas**2 + sigmas**2 - 1.0)) > _VP_TOL:
            raise InvalidArgument("schedule is not variance-preserving")
        if np.any(np.diff(alphas) > 0.0):
            raise InvalidArgument("alphas must be non-increasing")
        if np.any(np.diff(sigmas) < 0.0):
            raise InvalidArgument("sigmas must be non-decreasing")

    @property
    def T(self) -> int:
        return len(self.alphas)

    def _check_t(self, t: int):
        if not 1 <= t <= self.T:
            raise InvalidArgument(f"timestep {t} outside 1..{self.T}")

    def alpha(self, t: int) -> float:
        """Signal coefficient at timestep t (1-indexed)."""
        self._check_t(t)
        return float(self.alphas[t - 1])

    def sigma(self, t: int) -> float:
        """Noise coefficient at timestep t (1-indexed)."""
        self._check_t(t)
        return float(self.sigmas[t - 1])


def make_schedule(T: int, kind: str = "cosine") -> NoiseSchedule:
    """Build a variance-preserving schedule with T timesteps.

    kind="linear": sigma_t^2 ramps linearly from LINEAR_VAR_START to
    LINEAR_VAR_END over t = 1..T (for T = 1 only the ramp start is used),
    alpha_t = sqrt(1 - sigma_t^2).

    kind="cosine": squared-cosine signal decay over shifted fractions,
    alpha_t = cos(pi/2 * t / (T+1)), sigma_t = sin(pi/2 * t / (T+1)).
    The shift keeps both endpoints interior so alpha_T > 0 and sigma_T < 1.
    """
    if not isinstance(T, int) or isinstance(T, bool) or T < 1:
        raise InvalidArgument(f"T must be a positive integer, got {T!r}")
    if kind == "linear":
        if T == 1:
            var = np.array([LINEAR_VAR_START])
        else:
            var = np.linspace(LINEAR_VAR_START, LINEAR_VAR_END, T)
        sigmas = np.sqrt(var)
        alphas = np.sqrt(1.0 - var)
    elif kind == "cosine":
        frac = np.arange(1, T + 1, dtype=np.float64) / (T + 1)
        alphas = np.cos(math.pi / 2.0 * frac)
        sigmas = np.sin(math.pi / 2.0 * frac)
    else:
        raise InvalidArgument(f"unknown schedule kind {kind!r}")
    return NoiseSchedule(alphas=alphas, sigmas=sigmas)


def add_noise(x: np.ndarray, eps: np.ndarray, t: int, s: NoiseSchedule) -> np.ndarray:
    """Forward noising z_t = alpha_t * x + sigma_t * eps, elementwise."""
    x = np.asarray(x, dtype=np.float64)
    eps = np.asarray(eps, dtype=np.float64)
    if x.shape != eps.shape:
        raise InvalidArgument(f"shape mismatch: x {x.shape} vs eps {eps.shape}")
    return s.alpha(t) * x + s.sigma(t) * eps
