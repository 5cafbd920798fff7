"""Deterministic mapping from clean states to their generative noise states.

Runs the exact algebraic inverse of the sampler update from t=0 up the
schedule. Each update evaluates the model at the current state with the
timestep it is moving to, the standard single-evaluation approximation (no
fixed-point iteration).

When recording is requested, a second evaluation happens after each update,
at the state the update just produced. A cached entry at timestep t
therefore comes from a state at noise level t, which is exactly the
situation a generation pass is in when it consumes the entry at its own
step t.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import torch

from .attention_control import (
    ROLE_KEY,
    ROLE_QUERY,
    ROLE_VALUE,
    AttentionCache,
    RecordingControl,
)
from .diffusion import NoiseSchedule
from .errors import CytostyleError
from .imaging import Image

__all__ = ["InversionResult", "ddim_invert_step", "invert", "RECORD_MODES"]

RECORD_MODES = ("none", "queries", "keys_values", "all")

_RECORD_ROLES = {
    "none": (),
    "queries": (ROLE_QUERY,),
    "keys_values": (ROLE_KEY, ROLE_VALUE),
    "all": (ROLE_QUERY, ROLE_KEY, ROLE_VALUE),
}


@dataclass
class InversionResult:
    """Final noise state plus whatever was recorded along the way."""

    z_final: torch.Tensor
    final_timestep: int
    trajectory: list[torch.Tensor] | None = None
    cache: AttentionCache | None = None


def ddim_invert_step(x_t, eps_hat, t: int, t_next: int, sched: NoiseSchedule):
    """Exact inverse of the sampler update: move from timestep t up to t_next.

    Composing with the forward update using the same eps_hat is the
    identity. t_next == t returns the state unchanged.
    """
    if t_next == t:
        return x_t
    if t_next < t:
        raise ValueError(f"timesteps out of order: t_next={t_next} must be >= t={t}")
    ab_t = sched.alpha_bar_at(t)
    ab_n = sched.alpha_bar_at(t_next)
    x0_hat = (x_t - math.sqrt(1.0 - ab_t) * eps_hat) / math.sqrt(ab_t)
    return math.sqrt(ab_n) * x0_hat + math.sqrt(1.0 - ab_n) * eps_hat


def invert(
    backbone,
    x0: Image,
    sched: NoiseSchedule,
    record: str = "none",
    layers=None,
    keep_trajectory: bool = False,
) -> InversionResult:
    """Encode an image and walk it up the schedule to its noise state.

    record selects which attention roles to capture ("none", "queries",
    "keys_values", or "all"); layers restricts capture to the given layer
    ids, defaulting to every layer the backbone reports. Two inversions of
    the same inputs produce bit-identical results.
    """
    if record not in RECORD_MODES:
        raise ValueError(f"record must be one of {RECORD_MODES}, got {record!r}")
    roles = _RECORD_ROLES[record]
    cache = AttentionCache() if roles else None

    state = backbone.encode(x0)
    steps = sched.ddim_steps
    trajectory: list[torch.Tensor] | None = [] if keep_trajectory else None
    with torch.no_grad():
        for t_cur, t_next in zip((0,) + steps[:-1], steps):
            eps_hat = backbone.predict_noise(state, t_next)
            state = ddim_invert_step(state, eps_hat, t_cur, t_next, sched)
            if not torch.isfinite(state).all():
                raise CytostyleError(f"inversion produced non-finite state at timestep {t_next}")
            if cache is not None:
                recorder = RecordingControl(cache, roles, layers)
                recorder.begin_step(t_next)
                backbone.predict_noise(state, t_next, recorder)
            if trajectory is not None:
                trajectory.append(state.detach().clone())
    return InversionResult(
        z_final=state, final_timestep=steps[-1], trajectory=trajectory, cache=cache
    )
