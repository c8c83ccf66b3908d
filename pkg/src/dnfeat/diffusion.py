"""Deterministic DDIM sampling and inversion over a timestep subsequence.

Inversion moves from a clean image towards noise, one subsequence pair
``(tau_a, tau_b)`` with ``tau_a < tau_b`` at a time::

    x_b = sqrt(ab_b) * (x_a / sqrt(ab_a) + eta * eps(x_a, tau_a))
    eta = sqrt((1 - ab_b) / ab_b) - sqrt((1 - ab_a) / ab_a)

Generation applies the exact algebraic inverse of that map when the
predictor returns the same noise at both ends of a step.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ._validation import ParameterError
from .schedule import NoiseSchedule


@dataclass(frozen=True)
class StepCoeffs:
    ratio: float
    eta: float


def step_coeffs(tau_a: int, tau_b: int, schedule: NoiseSchedule) -> StepCoeffs:
    if not tau_a < tau_b:
        raise ParameterError(f"need tau_a < tau_b, got {tau_a}, {tau_b}")
    ab_a = schedule.alpha_bar(schedule.check_timestep(tau_a))
    ab_b = schedule.alpha_bar(schedule.check_timestep(tau_b))
    ratio = np.sqrt(ab_b / ab_a)
    eta = np.sqrt((1.0 - ab_b) / ab_b) - np.sqrt((1.0 - ab_a) / ab_a)
    return StepCoeffs(float(ratio), float(eta))


def invert_step(x_a, tau_a: int, tau_b: int, predictor, schedule: NoiseSchedule):
    """One inversion step; returns ``(x_b, eps)`` where ``eps`` was predicted at ``x_a``."""
    c = step_coeffs(tau_a, tau_b, schedule)
    x_a = np.asarray(x_a, dtype=np.float64)
    eps = np.asarray(predictor.predict_noise(x_a, tau_a, schedule), dtype=np.float64)
    sab = np.sqrt(schedule.alpha_bar(tau_b))
    x_b = sab * (x_a / np.sqrt(schedule.alpha_bar(tau_a)) + c.eta * eps)
    return x_b, eps


def generate_step(x_b, tau_b: int, tau_a: int, predictor, schedule: NoiseSchedule) -> np.ndarray:
    """One deterministic sampling step from ``tau_b`` down to ``tau_a``."""
    if not tau_a < tau_b:
        raise ParameterError(f"need tau_a < tau_b, got {tau_a}, {tau_b}")
    ab_a = schedule.alpha_bar(schedule.check_timestep(tau_a))
    ab_b = schedule.alpha_bar(schedule.check_timestep(tau_b))
    x_b = np.asarray(x_b, dtype=np.float64)
    eps = np.asarray(predictor.predict_noise(x_b, tau_b, schedule), dtype=np.float64)
    x0_hat = (x_b - np.sqrt(1.0 - ab_b) * eps) / np.sqrt(ab_b)
    return np.sqrt(ab_a) * x0_hat + np.sqrt(1.0 - ab_a) * eps


@dataclass
class InversionTrace:
    """Latents ``x_{tau_0..tau_k}`` and the noises predicted along the way.

    ``noises[i]`` is the prediction at ``latents[i]``; there is always one
    fewer noise than latents. Stored as float32; ``final`` keeps the last
    latent at full precision.
    """

    latents: list = field(default_factory=list)
    noises: list = field(default_factory=list)
    taus: list = field(default_factory=list)
    final: np.ndarray | None = None


def _check_taus(taus) -> list[int]:
    taus = [int(t) for t in taus]
    if len(taus) < 2:
        raise ParameterError("need at least two timesteps (one step)")
    if any(b <= a for a, b in zip(taus, taus[1:])):
        raise ParameterError("timesteps must be strictly increasing")
    return taus


def invert(x0, taus, predictor, schedule: NoiseSchedule, max_steps: int | None = None) -> InversionTrace:
    """Run inversion from the clean image, treating it as the latent at ``taus[0]``.

    ``max_steps`` truncates the walk (``1`` is all the ``first`` fusion needs).
    """
    taus = _check_taus(taus)
    n_steps = len(taus) - 1 if max_steps is None else min(int(max_steps), len(taus) - 1)
    x = np.asarray(x0, dtype=np.float64)
    trace = InversionTrace(latents=[x.astype(np.float32)], taus=taus[: n_steps + 1])
    for a, b in zip(taus[:n_steps], taus[1:n_steps + 1]):
        x, eps = invert_step(x, a, b, predictor, schedule)
        trace.latents.append(x.astype(np.float32))
        trace.noises.append(eps.astype(np.float32))
    trace.final = x
    return trace


def invert_latent(x0, taus, predictor, schedule: NoiseSchedule) -> np.ndarray:
    """Float64 final latent of a full inversion (no float32 trace storage)."""
    taus = _check_taus(taus)
    x = np.asarray(x0, dtype=np.float64)
    for a, b in zip(taus, taus[1:]):
        x, _ = invert_step(x, a, b, predictor, schedule)
    return x


def generate(xT, taus, predictor, schedule: NoiseSchedule) -> np.ndarray:
    """Deterministic sampling from the latent at ``taus[-1]`` down to ``taus[0]``."""
    taus = _check_taus(taus)
    x = np.asarray(xT, dtype=np.float64)
    for b, a in zip(taus[::-1], taus[-2::-1]):
        x = generate_step(x, b, a, predictor, schedule)
    return x
