"""Recording and substitution of self-attention tensors inside a backbone.

Queries carry the spatial layout of the image being generated; keys and
values carry its appearance. Caching K/V from one image's inversion and
substituting them while generating from another image's noise state
transfers appearance while the layout survives. Substituted scores are
multiplied by a positive ratio before the softmax to compensate for the
weaker correspondence between queries and foreign keys.

Controls are per-job objects threaded through the backbone's forward pass;
nothing here keeps global state, so concurrent jobs cannot leak into each
other. The default control path computes exactly the same arithmetic as an
unhooked layer, bit for bit.
"""

from __future__ import annotations

import json
import math
import re
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .diffusion import NoiseSchedule, ddim_sample
from .errors import CacheMissError, CytostyleError

__all__ = [
    "ROLE_QUERY",
    "ROLE_KEY",
    "ROLE_VALUE",
    "AttentionCache",
    "AttentionControl",
    "RecordingControl",
    "InjectionControl",
    "InjectionPlan",
    "attention_weights",
    "injected_attention",
    "select_injection_layers",
    "run_with_injection",
]

ROLE_QUERY = "Q"
ROLE_KEY = "K"
ROLE_VALUE = "V"

_SPILL_INDEX = "index.json"
_SPILL_VERSION = 1


class AttentionCache:
    """Tensors keyed by (timestep, layer id, role), role in {Q, K, V}.

    Entries are (heads, tokens, head_dim) tensors captured from
    single-image jobs. A lookup miss is always a hard CacheMissError.
    """

    def __init__(self):
        self._entries: dict[tuple[int, str, str], torch.Tensor] = {}

    def put(self, timestep: int, layer: str, role: str, tensor: torch.Tensor) -> None:
        if role not in (ROLE_QUERY, ROLE_KEY, ROLE_VALUE):
            raise ValueError(f"unknown attention role {role!r}")
        if tensor.ndim != 3:
            raise ValueError(f"cache entries must be (heads, tokens, head_dim), got {tuple(tensor.shape)}")
        if not torch.isfinite(tensor).all():
            raise CytostyleError(
                f"non-finite attention tensor at timestep={timestep} layer={layer!r} role={role}"
            )
        # K and V at the same site must agree on (heads, tokens).
        partner = {ROLE_KEY: ROLE_VALUE, ROLE_VALUE: ROLE_KEY}.get(role)
        if partner is not None and (timestep, layer, partner) in self._entries:
            other = self._entries[(timestep, layer, partner)]
            if other.shape[:2] != tensor.shape[:2]:
                raise ValueError(
                    f"K/V shape mismatch at timestep={timestep} layer={layer!r}: "
                    f"{tuple(tensor.shape)} vs {tuple(other.shape)}"
                )
        self._entries[(timestep, layer, role)] = tensor.detach().clone()

    def get(self, timestep: int, layer: str, role: str) -> torch.Tensor:
        try:
            return self._entries[(timestep, layer, role)]
        except KeyError:
            raise CacheMissError(timestep, layer, role) from None

    def has(self, timestep: int, layer: str, role: str) -> bool:
        return (timestep, layer, role) in self._entries

    def __len__(self) -> int:
        return len(self._entries)

    def timesteps(self) -> list[int]:
        return sorted({t for t, _, _ in self._entries})

    def layers(self) -> list[str]:
        return sorted({l for _, l, _ in self._entries})

    def spill(self, directory) -> None:
        """Write one shape-tagged array file per (timestep, layer, role) entry.

        The index file maps entry keys to file names, so layer ids may
        contain characters that are not filesystem-safe.
        """
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        index = {"format_version": _SPILL_VERSION, "entries": []}
        for n, ((t, layer, role), tensor) in enumerate(sorted(self._entries.items())):
            safe = re.sub(r"[^A-Za-z0-9_-]", "_", layer)
            name = f"{n:06d}_t{t}_{safe}_{role}.npy"
            np.save(directory / name, tensor.numpy())
            index["entries"].append({"timestep": t, "layer": layer, "role": role, "file": name})
        (directory / _SPILL_INDEX).write_text(json.dumps(index, indent=1))

    @classmethod
    def load(cls, directory) -> "AttentionCache":
        directory = Path(directory)
        index_path = directory / _SPILL_INDEX
        if not index_path.exists():
            raise FileNotFoundError(f"no cache index at {index_path}")
        index = json.loads(index_path.read_text())
        if index.get("format_version") != _SPILL_VERSION:
            raise CytostyleError(
                f"unsupported cache spill version {index.get('format_version')!r}"
            )
        cache = cls()
        for entry in index["entries"]:
            arr = np.load(directory / entry["file"])
            cache.put(entry["timestep"], entry["layer"], entry["role"], torch.from_numpy(arr))
        return cache


def attention_weights(q: torch.Tensor, k: torch.Tensor, alpha: float = 1.0) -> torch.Tensor:
    """Softmax-over-keys weights of (alpha * Q K^T / sqrt(d))."""
    if not (alpha > 0 and math.isfinite(alpha)):
        raise ValueError(f"alpha must be positive and finite, got {alpha}")
    if q.shape[-1] != k.shape[-1]:
        raise ValueError(f"head dim mismatch: {q.shape[-1]} vs {k.shape[-1]}")
    if q.shape[:-2] != k.shape[:-2]:
        raise ValueError(f"head count mismatch: {tuple(q.shape)} vs {tuple(k.shape)}")
    scale = alpha / math.sqrt(q.shape[-1])
    scores = torch.matmul(q, k.transpose(-2, -1)) * scale
    return torch.softmax(scores, dim=-1)


def injected_attention(
    q: torch.Tensor, k: torch.Tensor, v: torch.Tensor, alpha: float = 1.0
) -> torch.Tensor:
    """Attention output softmax(alpha * Q K^T / sqrt(d)) V.

    Shapes are (heads, n_q, d) for Q and (heads, n_k, d) for K and V, with
    an optional leading batch dimension on all three.
    """
    if k.shape[-2] != v.shape[-2] or k.shape[:-2] != v.shape[:-2]:
        raise ValueError(f"K/V shape mismatch: {tuple(k.shape)} vs {tuple(v.shape)}")
    return torch.matmul(attention_weights(q, k, alpha), v)


class AttentionControl:
    """Base control: observes timesteps, computes plain attention."""

    def __init__(self):
        self.current_timestep: int | None = None

    def begin_step(self, t: int) -> None:
        self.current_timestep = t

    def attend(
        self, layer: str, q: torch.Tensor, k: torch.Tensor, v: torch.Tensor
    ) -> torch.Tensor:
        return injected_attention(q, k, v, 1.0)

    def _require_timestep(self) -> int:
        if self.current_timestep is None:
            raise CytostyleError("control used before begin_step set a timestep")
        return self.current_timestep


class RecordingControl(AttentionControl):
    """Captures the requested roles into a cache, then computes plain attention.

    Recording is a single-image affair; the batch dimension must be 1.
    A layer filter of None records every layer that reports in.
    """

    def __init__(self, cache: AttentionCache, roles, layers=None):
        super().__init__()
        roles = tuple(roles)
        for role in roles:
            if role not in (ROLE_QUERY, ROLE_KEY, ROLE_VALUE):
                raise ValueError(f"unknown attention role {role!r}")
        self.cache = cache
        self.roles = roles
        self.layers = None if layers is None else frozenset(layers)

    def attend(self, layer, q, k, v):
        if self.layers is None or layer in self.layers:
            t = self._require_timestep()
            if q.ndim == 4 and q.shape[0] != 1:
                raise CytostyleError("recording requires a single-image batch")
            for role, tensor in ((ROLE_QUERY, q), (ROLE_KEY, k), (ROLE_VALUE, v)):
                if role in self.roles:
                    self.cache.put(t, layer, role, tensor[0] if tensor.ndim == 4 else tensor)
        return super().attend(layer, q, k, v)


@dataclass
class InjectionPlan:
    """Which layers get substituted K/V, with what score scaling.

    The source cache holds queries from the structure image's inversion;
    the target cache holds keys/values from the appearance image's. By
    default the queries actually used are the live ones computed from the
    evolving state (they track the source because generation starts from
    the source's noise state); replay_source_queries=True substitutes the
    cached queries verbatim instead.
    """

    layers: tuple[str, ...]
    alpha: float
    source_cache: AttentionCache
    target_cache: AttentionCache
    replay_source_queries: bool = False

    def __post_init__(self):
        self.layers = tuple(self.layers)
        if not (self.alpha > 0 and math.isfinite(self.alpha)):
            raise ValueError(f"alpha must be positive and finite, got {self.alpha}")

    def validate_against(self, sched: NoiseSchedule) -> None:
        """Require every planned (timestep, layer) in both caches up front."""
        for t in sched.ddim_steps:
            for layer in self.layers:
                if not self.source_cache.has(t, layer, ROLE_QUERY):
                    raise CacheMissError(t, layer, ROLE_QUERY)
                for role in (ROLE_KEY, ROLE_VALUE):
                    if not self.target_cache.has(t, layer, role):
                        raise CacheMissError(t, layer, role)


class InjectionControl(AttentionControl):
    """Substitutes cached K/V (and optionally Q) at planned layers."""

    def __init__(self, plan: InjectionPlan):
        super().__init__()
        self.plan = plan
        self._planned = frozenset(plan.layers)

    def attend(self, layer, q, k, v):
        if layer not in self._planned:
            return super().attend(layer, q, k, v)
        t = self._require_timestep()
        batched = q.ndim == 4
        k_inj = self.plan.target_cache.get(t, layer, ROLE_KEY)
        v_inj = self.plan.target_cache.get(t, layer, ROLE_VALUE)
        if self.plan.replay_source_queries:
            q = self.plan.source_cache.get(t, layer, ROLE_QUERY)
            if batched:
                q = q.unsqueeze(0)
        if batched:
            k_inj = k_inj.unsqueeze(0)
            v_inj = v_inj.unsqueeze(0)
        return injected_attention(q, k_inj, v_inj, self.plan.alpha)


def select_injection_layers(backbone, n_last: int) -> list[str]:
    """The final n_last injectable self-attention layer ids, forward order."""
    layers = list(backbone.attention_layers)
    if not 1 <= n_last <= len(layers):
        raise ValueError(f"n_last must lie in 1..{len(layers)}, got {n_last}")
    return layers[-n_last:]


def run_with_injection(backbone, x_final, plan: InjectionPlan, sched: NoiseSchedule):
    """Generate from a noise state with the plan's attention substitutions.

    x_final should be the structure image's inverted noise state. Missing
    cache entries abort before any model evaluation, naming the entry.
    """
    plan.validate_against(sched)
    with torch.no_grad():
        return ddim_sample(backbone, x_final, sched, control=InjectionControl(plan))
