"""Noise schedules, the denoising objective, and the deterministic sampler.

The sampler has no stochastic term, so each update admits an exact
algebraic inverse; that is what makes image-to-noise inversion possible.
All state math is dtype-agnostic and works on anything supporting
elementwise arithmetic (torch tensors, numpy arrays, plain floats).
"""

from __future__ import annotations

import math
from abc import ABC, abstractmethod
from dataclasses import dataclass

import numpy as np

__all__ = [
    "NoiseSchedule",
    "Backbone",
    "make_noise_schedule",
    "add_noise",
    "diffusion_loss",
    "ddim_step",
    "ddim_sample",
]


@dataclass(frozen=True)
class NoiseSchedule:
    """Variance schedule plus the sampler's timestep subsequence.

    alpha_bar has length t_train + 1 with alpha_bar[0] == 1 and strictly
    decreasing positive entries; ddim_steps is a strictly increasing
    subsequence of 1..t_train whose last element is the starting noise level
    for generation.
    """

    t_train: int
    alpha_bar: np.ndarray
    ddim_steps: tuple[int, ...]
    beta_start: float = float("nan")  # provenance for checkpoints
    beta_end: float = float("nan")
    kind: str = "linear"

    def __post_init__(self):
        ab = np.asarray(self.alpha_bar, dtype=np.float64)
        object.__setattr__(self, "alpha_bar", ab)
        object.__setattr__(self, "ddim_steps", tuple(int(s) for s in self.ddim_steps))
        if self.t_train < 1:
            raise ValueError(f"t_train must be >= 1, got {self.t_train}")
        if ab.shape != (self.t_train + 1,):
            raise ValueError(f"alpha_bar must have length t_train + 1, got {ab.shape}")
        if ab[0] != 1.0:
            raise ValueError(f"alpha_bar[0] must be 1, got {ab[0]}")
        if not (np.diff(ab) < 0).all():
            raise ValueError("alpha_bar must be strictly decreasing")
        if ab[-1] <= 0.0:
            raise ValueError("alpha_bar must stay positive")
        steps = self.ddim_steps
        if len(steps) < 1:
            raise ValueError("ddim_steps must be non-empty")
        if any(b <= a for a, b in zip(steps, steps[1:])):
            raise ValueError("ddim_steps must be strictly increasing")
        if steps[0] < 1 or steps[-1] > self.t_train:
            raise ValueError(f"ddim_steps must lie within 1..{self.t_train}")

    @property
    def n_ddim_steps(self) -> int:
        return len(self.ddim_steps)

    @property
    def final_timestep(self) -> int:
        return self.ddim_steps[-1]

    def alpha_bar_at(self, t: int) -> float:
        if not 0 <= t <= self.t_train:
            raise ValueError(f"timestep {t} outside 0..{self.t_train}")
        return float(self.alpha_bar[t])


def make_noise_schedule(
    t_train: int,
    beta_start: float = 1e-4,
    beta_end: float = 0.02,
    kind: str = "linear",
    s: int = 50,
) -> NoiseSchedule:
    """Build a linear-beta schedule with s evenly spaced sampler timesteps.

    alpha_bar[t] is the running product of (1 - beta_i) for i <= t, with
    alpha_bar[0] = 1. The sampler steps are ceil(i * t_train / s) for
    i = 1..s, so s == t_train yields every timestep.
    """
    if kind != "linear":
        raise ValueError(f"unknown schedule kind {kind!r}")
    if t_train < 1:
        raise ValueError(f"t_train must be >= 1, got {t_train}")
    if not (0.0 < beta_start <= beta_end < 1.0):
        raise ValueError(f"need 0 < beta_start <= beta_end < 1, got {beta_start}, {beta_end}")
    if not 1 <= s <= t_train:
        raise ValueError(f"s must lie in 1..{t_train}, got {s}")
    betas = np.linspace(beta_start, beta_end, t_train, dtype=np.float64)
    alpha_bar = np.concatenate([[1.0], np.cumprod(1.0 - betas)])
    steps = tuple(-((-i * t_train) // s) for i in range(1, s + 1))
    return NoiseSchedule(
        t_train=t_train,
        alpha_bar=alpha_bar,
        ddim_steps=steps,
        beta_start=beta_start,
        beta_end=beta_end,
        kind=kind,
    )


def _check_shapes_match(a, b) -> None:
    sa, sb = getattr(a, "shape", None), getattr(b, "shape", None)
    if sa != sb:
        raise ValueError(f"shape mismatch: {sa} vs {sb}")


def add_noise(x0, eps, t: int, sched: NoiseSchedule):
    """Forward noising: sqrt(ab_t) * x0 + sqrt(1 - ab_t) * eps."""
    _check_shapes_match(x0, eps)
    ab = sched.alpha_bar_at(t)
    return math.sqrt(ab) * x0 + math.sqrt(1.0 - ab) * eps


def diffusion_loss(backbone, x0, eps, t: int, sched: NoiseSchedule):
    """Mean squared error between eps and the backbone's prediction of it.

    Returned as whatever scalar the state type produces (a 0-dim tensor for
    torch states), so gradients flow when the backbone tracks them.
    """
    x_t = add_noise(x0, eps, t, sched)
    pred = backbone.predict_noise(x_t, t)
    return ((eps - pred) ** 2).mean()


def ddim_step(x_t, eps_hat, t: int, t_prev: int, sched: NoiseSchedule):
    """One deterministic denoising update from timestep t down to t_prev."""
    if t_prev >= t:
        raise ValueError(f"timesteps out of order: t_prev={t_prev} must be < t={t}")
    ab_t = sched.alpha_bar_at(t)
    ab_p = sched.alpha_bar_at(t_prev)
    x0_hat = (x_t - math.sqrt(1.0 - ab_t) * eps_hat) / math.sqrt(ab_t)
    return math.sqrt(ab_p) * x0_hat + math.sqrt(1.0 - ab_p) * eps_hat


def ddim_sample(backbone, x_final, sched: NoiseSchedule, control=None):
    """Run the sampler from the schedule's last timestep down to a clean state.

    Deterministic given its inputs. If a control is supplied it is notified
    of each timestep before the model evaluation and may observe or replace
    attention computations inside the backbone.
    """
    steps = sched.ddim_steps
    prevs = (0,) + steps[:-1]
    x = x_final
    for t, t_prev in zip(reversed(steps), reversed(prevs)):
        if control is not None:
            control.begin_step(t)
        eps_hat = backbone.predict_noise(x, t, control)
        x = ddim_step(x, eps_hat, t, t_prev, sched)
    return x


class Backbone(ABC):
    """Denoising model interface the pipeline runs on.

    Implementations must make predict_noise deterministic given
    (x_t, t, control state, parameters), and decode(encode(x)) must
    reproduce x within the implementation's stated tolerance. The
    attention_layers property enumerates the injectable self-attention
    sub-layers (the decoder half) in forward-pass order.
    """

    @abstractmethod
    def predict_noise(self, x_t, t: int, control=None):
        """Predict the noise component of state x_t at timestep t."""

    @abstractmethod
    def encode(self, image):
        """Map an Image to the state tensor the denoiser operates on."""

    @abstractmethod
    def decode(self, state):
        """Map a state tensor back to an Image."""

    @property
    @abstractmethod
    def attention_layers(self) -> list[str]:
        """Injectable self-attention layer ids, forward order."""

    @property
    @abstractmethod
    def schedule(self) -> NoiseSchedule:
        """The noise schedule this backbone was built or trained with."""
