"""Per-dataset-pair scaling ratio for substituted attention scores.

Scores computed between one image's queries and another image's keys are
flatter than same-image scores, because cross-image patches correspond
less. The compensation ratio is estimated, per dataset pair, as the mean
over sampled image pairs, schedule timesteps, and injection layers of

    std(Q_src K_src^T / sqrt(d)) / std(Q_src K_tgt^T / sqrt(d))

and is applied multiplicatively to pre-softmax scores during styled
generation. One scalar per dataset pair; per-timestep and per-layer means
are kept as diagnostics.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .attention_control import ROLE_KEY, ROLE_QUERY
from .diffusion import NoiseSchedule
from .errors import AlphaUndefinedError
from .imaging import Image
from .inversion import invert

__all__ = ["AlphaEstimate", "attention_score_std", "compute_alpha"]


@dataclass
class AlphaEstimate:
    """A computed score-scaling ratio plus how it was obtained.

    alpha is the mean of per_timestep_ratios, each of which averages the
    valid ratios at one schedule timestep over sampled pairs and layers.
    Degenerate ratios (zero std on either side) are excluded and counted.
    """

    alpha: float
    n_pairs_sampled: int
    per_timestep_ratios: list[float]
    layers_used: list[str]
    n_excluded: int = 0
    per_layer_ratios: dict[str, float] = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "alpha": self.alpha,
            "n_pairs_sampled": self.n_pairs_sampled,
            "per_timestep_ratios": list(self.per_timestep_ratios),
            "layers_used": list(self.layers_used),
            "n_excluded": self.n_excluded,
            "per_layer_ratios": dict(self.per_layer_ratios),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "AlphaEstimate":
        return cls(
            alpha=float(d["alpha"]),
            n_pairs_sampled=int(d["n_pairs_sampled"]),
            per_timestep_ratios=[float(x) for x in d["per_timestep_ratios"]],
            layers_used=list(d["layers_used"]),
            n_excluded=int(d.get("n_excluded", 0)),
            per_layer_ratios={k: float(v) for k, v in d.get("per_layer_ratios", {}).items()},
        )


def _as_float64(x) -> np.ndarray:
    if hasattr(x, "detach"):
        x = x.detach().cpu().numpy()
    return np.asarray(x, dtype=np.float64)


def attention_score_std(q, k) -> float:
    """Population standard deviation over all entries of Q K^T / sqrt(d).

    Q is (heads, n_q, d) and K is (heads, n_k, d); torch tensors and numpy
    arrays are both accepted.
    """
    qa, ka = _as_float64(q), _as_float64(k)
    if qa.ndim != 3 or ka.ndim != 3:
        raise ValueError(f"expected (heads, tokens, d) tensors, got {qa.shape} and {ka.shape}")
    if qa.shape[0] != ka.shape[0]:
        raise ValueError(f"head count mismatch: {qa.shape[0]} vs {ka.shape[0]}")
    if qa.shape[2] != ka.shape[2]:
        raise ValueError(f"head dim mismatch: {qa.shape[2]} vs {ka.shape[2]}")
    scores = qa @ ka.transpose(0, 2, 1) / math.sqrt(qa.shape[2])
    return float(scores.std())


def compute_alpha(
    backbone,
    src_samples: list[Image],
    tgt_samples: list[Image],
    sched: NoiseSchedule,
    layers: list[str],
    n_pairs: int = 8,
    seed: int = 0,
) -> AlphaEstimate:
    """Estimate the scaling ratio from a seeded sample of image pairs.

    Source and target subsets are drawn with identically seeded generators
    and paired positionally, so passing the same list on both sides pairs
    every image with itself and the estimate is exactly 1. Target samples
    must already be size-matched to the source scale.

    Raises AlphaUndefinedError when every ratio is degenerate.
    """
    if not src_samples or not tgt_samples:
        raise ValueError("need at least one sample on each side")
    if not layers:
        raise ValueError("need at least one layer to compare")
    if n_pairs < 1:
        raise ValueError(f"n_pairs must be positive, got {n_pairs}")

    src_idx = np.random.default_rng(seed).integers(0, len(src_samples), size=n_pairs)
    tgt_idx = np.random.default_rng(seed).integers(0, len(tgt_samples), size=n_pairs)

    # Inversions are deterministic, so repeated indices reuse one inversion.
    src_caches: dict[int, object] = {}
    tgt_caches: dict[int, object] = {}

    def src_cache(i: int):
        if i not in src_caches:
            src_caches[i] = invert(backbone, src_samples[i], sched, record="all", layers=layers).cache
        return src_caches[i]

    def tgt_cache(j: int):
        if j not in tgt_caches:
            tgt_caches[j] = invert(
                backbone, tgt_samples[j], sched, record="keys_values", layers=layers
            ).cache
        return tgt_caches[j]

    per_timestep: dict[int, list[float]] = {t: [] for t in sched.ddim_steps}
    per_layer: dict[str, list[float]] = {layer: [] for layer in layers}
    n_excluded = 0
    for i, j in zip(src_idx, tgt_idx):
        sc, tc = src_cache(int(i)), tgt_cache(int(j))
        for t in sched.ddim_steps:
            for layer in layers:
                q = sc.get(t, layer, ROLE_QUERY)
                self_std = attention_score_std(q, sc.get(t, layer, ROLE_KEY))
                cross_std = attention_score_std(q, tc.get(t, layer, ROLE_KEY))
                if self_std == 0.0 or cross_std == 0.0:
                    n_excluded += 1
                    continue
                ratio = self_std / cross_std
                per_timestep[t].append(ratio)
                per_layer[layer].append(ratio)

    per_timestep_ratios = [
        float(np.mean(per_timestep[t])) for t in sched.ddim_steps if per_timestep[t]
    ]
    if not per_timestep_ratios:
        raise AlphaUndefinedError(
            f"alpha undefined for pair: all {n_excluded} score ratios were degenerate"
        )
    alpha = float(np.mean(per_timestep_ratios))
    return AlphaEstimate(
        alpha=alpha,
        n_pairs_sampled=n_pairs,
        per_timestep_ratios=per_timestep_ratios,
        layers_used=list(layers),
        n_excluded=n_excluded,
        per_layer_ratios={
            layer: float(np.mean(vals)) for layer, vals in per_layer.items() if vals
        },
    )
