"""Noise schedules and timestep subsequences.

Timesteps are 1-based: ``alpha_bar(t)`` for ``t`` in ``[1, T]`` reads
``alpha_bars[t - 1]``. Timestep 0 (clean data, alpha_bar = 1) is never
queried by the inversion.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ._validation import ParameterError

UNIFORM = "uniform"
LOGARITHMIC = "logarithmic"
MODES = (UNIFORM, LOGARITHMIC)

DEFAULT_T = 1000
DEFAULT_BETA_START = 1e-4
DEFAULT_BETA_END = 0.02


@dataclass(frozen=True, eq=False)
class NoiseSchedule:
    """Per-step betas and their cumulative products.

    ``sigma`` is fixed at zero for every step: sampling and inversion are
    deterministic.
    """

    betas: np.ndarray
    alpha_bars: np.ndarray
    beta_start: float | None = None
    beta_end: float | None = None
    sigmas: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        betas = np.asarray(self.betas, dtype=np.float64)
        alpha_bars = np.asarray(self.alpha_bars, dtype=np.float64)
        if betas.ndim != 1 or betas.shape != alpha_bars.shape or betas.size == 0:
            raise ParameterError("betas and alpha_bars must be equal-length 1-D arrays")
        betas.setflags(write=False)
        alpha_bars.setflags(write=False)
        sigmas = np.zeros_like(betas)
        sigmas.setflags(write=False)
        object.__setattr__(self, "betas", betas)
        object.__setattr__(self, "alpha_bars", alpha_bars)
        object.__setattr__(self, "sigmas", sigmas)

    @property
    def total_steps(self) -> int:
        return int(self.betas.size)

    T = total_steps

    def alpha_bar(self, t: int) -> float:
        """Cumulative signal fraction at 1-based timestep ``t`` (``t = 0`` gives 1)."""
        t = int(t)
        if t < 0 or t > self.total_steps:
            raise ParameterError(f"timestep {t} outside [0, {self.total_steps}]")
        if t == 0:
            return 1.0
        return float(self.alpha_bars[t - 1])

    def check_timestep(self, t: int) -> int:
        t = int(t)
        if t < 1 or t > self.total_steps:
            raise ParameterError(f"timestep {t} outside [1, {self.total_steps}]")
        return t

    @classmethod
    def from_alpha_bars(cls, alpha_bars) -> "NoiseSchedule":
        """Build a schedule from explicit cumulative products (handy for hand-checked cases)."""
        ab = np.asarray(alpha_bars, dtype=np.float64)
        if ab.ndim != 1 or ab.size == 0:
            raise ParameterError("alpha_bars must be a non-empty 1-D array")
        if np.any(ab <= 0) or np.any(ab > 1) or np.any(np.diff(ab) >= 0):
            raise ParameterError("alpha_bars must be strictly decreasing within (0, 1]")
        prev = np.concatenate([[1.0], ab[:-1]])
        return cls(betas=1.0 - ab / prev, alpha_bars=ab)

    def to_dict(self) -> dict:
        if self.beta_start is None:
            raise ParameterError("only linear schedules are serializable")
        return {"T": self.total_steps, "beta_start": self.beta_start, "beta_end": self.beta_end}


def make_linear_schedule(
    T: int = DEFAULT_T,
    beta_start: float = DEFAULT_BETA_START,
    beta_end: float = DEFAULT_BETA_END,
) -> NoiseSchedule:
    """Linearly spaced betas from ``beta_start`` to ``beta_end`` inclusive."""
    if int(T) != T or T < 1:
        raise ParameterError(f"T must be a positive integer, got {T!r}")
    if not (0.0 < beta_start <= beta_end < 1.0):
        raise ParameterError(f"need 0 < beta_start <= beta_end < 1, got {beta_start}, {beta_end}")
    T = int(T)
    betas = np.linspace(beta_start, beta_end, T, dtype=np.float64)
    alpha_bars = np.cumprod(1.0 - betas)
    return NoiseSchedule(betas, alpha_bars, float(beta_start), float(beta_end))


@dataclass(frozen=True, eq=False)
class TimestepSequence:
    taus: np.ndarray
    mode: str

    def __post_init__(self):
        taus = np.asarray(self.taus, dtype=np.int64)
        taus.setflags(write=False)
        object.__setattr__(self, "taus", taus)

    def __len__(self):
        return int(self.taus.size)

    def __iter__(self):
        return iter(int(t) for t in self.taus)

    def __getitem__(self, i):
        return int(self.taus[i])

    @property
    def n_steps(self) -> int:
        return len(self) - 1

    def tolist(self) -> list[int]:
        return [int(t) for t in self.taus]


def _round_half_up(values: np.ndarray) -> np.ndarray:
    return np.floor(values + 0.5).astype(np.int64)


def sample_timesteps(T: int, S: int, mode: str = UNIFORM) -> TimestepSequence:
    """Pick ``S + 1`` timesteps in ``[1, T]`` (fewer if rounding collides).

    Uniform spacing hits both endpoints; logarithmic spacing is dense near
    ``t = 1`` and sparse near ``T``.
    """
    if mode not in MODES:
        raise ParameterError(f"unknown timestep mode {mode!r}")
    if int(T) != T or int(S) != S or T < 1 or S < 1:
        raise ParameterError(f"T and S must be positive integers, got T={T!r}, S={S!r}")
    if S > T:
        raise ParameterError(f"S={S} exceeds T={T}")
    T, S = int(T), int(S)
    i = np.arange(S + 1, dtype=np.float64)
    if mode == UNIFORM:
        raw = 1.0 + i * (T - 1) / S
    else:
        raw = np.power(float(T), i / S)
    taus = np.unique(np.clip(_round_half_up(raw), 1, T))
    return TimestepSequence(taus, mode)
