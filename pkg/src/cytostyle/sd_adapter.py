"""Optional backbone adapter over a pretrained latent-diffusion checkpoint.

Wraps a locally available Stable-Diffusion-style checkpoint (diffusers
layout) behind the same Backbone interface the toy model implements:
encode/decode go through the checkpoint's autoencoder, predict_noise runs
the UNet unconditionally (empty prompt), and the decoder's self-attention
sub-layers are enumerated in forward order for recording and injection.

The `diffusers` dependency is imported lazily so the rest of the package,
and the whole test suite, works without it. Nothing here fetches from the
network: the checkpoint must already be on disk.
"""

from __future__ import annotations

import math
import threading
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch

from .attention_control import injected_attention
from .diffusion import Backbone, NoiseSchedule
from .errors import CheckpointError, ConfigError
from .imaging import Image

__all__ = ["AdapterConfig", "PretrainedAdapter", "load_pretrained"]

_MIN_DECODER_ATTENTION = 6


@dataclass
class AdapterConfig:
    """Where the checkpoint lives and how to run it."""

    checkpoint: str
    device: str = "cpu"
    ddim_steps: int = 50
    torch_dtype: str = "float32"

    def __post_init__(self):
        if self.ddim_steps < 1:
            raise ConfigError(f"ddim_steps must be positive, got {self.ddim_steps}")


class _ControlledSelfAttnProcessor:
    """diffusers attention processor that defers to the adapter's active control.

    Reproduces plain attention bit-for-bit when no control is active, using
    the same arithmetic as the rest of this package.
    """

    def __init__(self, adapter: "PretrainedAdapter", layer_id: str):
        self.adapter = adapter
        self.layer_id = layer_id

    def __call__(self, attn, hidden_states, encoder_hidden_states=None, attention_mask=None, **kwargs):
        residual = hidden_states
        if attn.group_norm is not None:
            hidden_states = attn.group_norm(hidden_states.transpose(1, 2)).transpose(1, 2)
        context = hidden_states if encoder_hidden_states is None else encoder_hidden_states
        query = attn.to_q(hidden_states)
        key = attn.to_k(context)
        value = attn.to_v(context)

        batch, q_tokens, inner = query.shape
        heads = attn.heads
        head_dim = inner // heads

        def split_heads(t: torch.Tensor) -> torch.Tensor:
            return t.reshape(batch, -1, heads, head_dim).transpose(1, 2)

        q, k, v = split_heads(query), split_heads(key), split_heads(value)
        control = self.adapter._active_control
        if control is not None and encoder_hidden_states is None:
            out = control.attend(self.layer_id, q, k, v)
        else:
            out = injected_attention(q, k, v, 1.0)
        out = out.transpose(1, 2).reshape(batch, q_tokens, inner)
        out = attn.to_out[0](out)
        out = attn.to_out[1](out)
        if attn.residual_connection:
            out = out + residual
        return out / attn.rescale_output_factor


class PretrainedAdapter(Backbone):
    """Backbone over a diffusers StableDiffusionPipeline's parts."""

    def __init__(self, vae, unet, text_embedding, schedule: NoiseSchedule, layer_ids, device):
        self.vae = vae
        self.unet = unet
        self.text_embedding = text_embedding  # empty-prompt embedding, (1, tokens, dim)
        self._schedule = schedule
        self._layer_ids = list(layer_ids)
        self.device = device
        self._active_control = None
        self._control_lock = threading.Lock()
        self.vae_scale = 2 ** (len(vae.config.block_out_channels) - 1)

    @property
    def attention_layers(self) -> list[str]:
        return list(self._layer_ids)

    @property
    def schedule(self) -> NoiseSchedule:
        return self._schedule

    def predict_noise(self, x_t: torch.Tensor, t: int, control=None) -> torch.Tensor:
        embedding = self.text_embedding.expand(x_t.shape[0], -1, -1)
        # One adapter per process; jobs serialize on the control slot.
        with self._control_lock:
            self._active_control = control
            try:
                with torch.no_grad():
                    return self.unet(x_t, t, encoder_hidden_states=embedding).sample
            finally:
                self._active_control = None

    def encode(self, image: Image) -> torch.Tensor:
        px = image.pixels
        if px.shape[2] == 1:
            px = np.repeat(px, 3, axis=2)
        if image.height % self.vae_scale or image.width % self.vae_scale:
            raise ConfigError(
                f"image dims must be divisible by {self.vae_scale}, "
                f"got {image.height}x{image.width}"
            )
        x = torch.from_numpy(np.ascontiguousarray(px.transpose(2, 0, 1), dtype=np.float32))
        x = (x * 2.0 - 1.0)[None].to(self.device)
        with torch.no_grad():
            # Deterministic encoding: take the posterior mode, never a sample.
            latents = self.vae.encode(x).latent_dist.mode()
        return latents * self.vae.config.scaling_factor

    def decode(self, state: torch.Tensor) -> Image:
        with torch.no_grad():
            x = self.vae.decode(state / self.vae.config.scaling_factor).sample
        x = ((x + 1.0) / 2.0).clamp(0.0, 1.0)[0].cpu().numpy()
        return Image(np.ascontiguousarray(x.transpose(1, 2, 0)))


def _enumerate_decoder_self_attention(unet) -> list[tuple[str, object]]:
    """Decoder (up-block) self-attention sub-layers in forward-pass order."""
    found = []
    for bi, block in enumerate(unet.up_blocks):
        attentions = getattr(block, "attentions", None)
        if not attentions:
            continue
        for ai, transformer in enumerate(attentions):
            for ti, tblock in enumerate(transformer.transformer_blocks):
                layer_id = f"up.{bi}.{ai}.{ti}.attn1"
                found.append((layer_id, tblock.attn1))
    return found


def load_pretrained(cfg: AdapterConfig) -> PretrainedAdapter:
    """Build the adapter from a local diffusers checkpoint directory.

    Raises FileNotFoundError when the checkpoint path is absent,
    CheckpointError when it loads but does not look like a usable
    latent-diffusion model (e.g. too few decoder attention layers).
    """
    path = Path(cfg.checkpoint)
    if not path.exists():
        raise FileNotFoundError(f"no checkpoint at {path}")
    try:
        from diffusers import StableDiffusionPipeline
    except ImportError as exc:
        raise CheckpointError(
            "the pretrained adapter needs the 'diffusers' extra: "
            "pip install 'cytostyle[pretrained]'"
        ) from exc

    dtype = getattr(torch, cfg.torch_dtype)
    try:
        pipe = StableDiffusionPipeline.from_pretrained(
            str(path), torch_dtype=dtype, safety_checker=None, local_files_only=True
        )
    except Exception as exc:
        raise CheckpointError(f"cannot load checkpoint {path}: {exc}") from exc
    pipe.to(cfg.device)

    alphas = pipe.scheduler.alphas_cumprod.cpu().numpy().astype(np.float64)
    t_train = alphas.shape[0]
    steps = tuple(-((-i * t_train) // cfg.ddim_steps) for i in range(1, cfg.ddim_steps + 1))
    schedule = NoiseSchedule(
        t_train=t_train,
        alpha_bar=np.concatenate([[1.0], alphas]),
        ddim_steps=steps,
        kind="from-checkpoint",
    )

    with torch.no_grad():
        tokens = pipe.tokenizer(
            "", padding="max_length", max_length=pipe.tokenizer.model_max_length,
            return_tensors="pt",
        )
        embedding = pipe.text_encoder(tokens.input_ids.to(cfg.device))[0]

    layers = _enumerate_decoder_self_attention(pipe.unet)
    if len(layers) < _MIN_DECODER_ATTENTION:
        raise CheckpointError(
            f"checkpoint exposes {len(layers)} decoder self-attention layers, "
            f"need at least {_MIN_DECODER_ATTENTION}"
        )
    adapter = PretrainedAdapter(
        vae=pipe.vae,
        unet=pipe.unet,
        text_embedding=embedding,
        schedule=schedule,
        layer_ids=[lid for lid, _ in layers],
        device=cfg.device,
    )
    for layer_id, attn in layers:
        attn.set_processor(_ControlledSelfAttnProcessor(adapter, layer_id))
    return adapter
