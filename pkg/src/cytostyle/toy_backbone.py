"""A small pixel-space denoising UNet usable as a desk-scale backbone.

Two resolutions (full and half), residual blocks, and multi-head
self-attention at the half resolution. The mid and upsampling-half
attention sub-layers are exposed by id for recording and injection.
encode/decode are identity up to array layout: the model works directly on
[0, 1] pixel tensors. Checkpoints are single files embedding the noise
schedule, so a saved backbone is self-contained.

Training on a fixed seed is bit-for-bit reproducible on CPU; that is the
determinism contract this backbone declares and tests pin.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .attention_control import injected_attention
from .diffusion import Backbone, NoiseSchedule, make_noise_schedule
from .errors import CheckpointError, ConfigError, CytostyleError
from .imaging import Image

__all__ = ["ToyTrainConfig", "ToyUNet", "ToyBackbone", "train_toy_backbone"]

_CHECKPOINT_VERSION = 1

# Rec. 601 luma weights, used when collapsing color input to one channel.
_LUMA = np.array([0.299, 0.587, 0.114], dtype=np.float32)


@dataclass
class ToyTrainConfig:
    image_size: int = 32
    epochs: int = 200
    batch_size: int = 16
    lr: float = 2e-3
    seed: int = 0
    in_channels: int = 1
    base_channels: int = 24
    heads: int = 3
    t_train: int = 1000
    beta_start: float = 1e-4
    beta_end: float = 0.02
    ddim_steps: int = 50
    ema_decay: float = 0.995  # 0 disables the weight average

    def __post_init__(self):
        for name in ("image_size", "epochs", "batch_size", "base_channels", "heads", "t_train", "ddim_steps"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive, got {getattr(self, name)}")
        if self.lr <= 0:
            raise ValueError(f"lr must be positive, got {self.lr}")
        if not 0.0 <= self.ema_decay < 1.0:
            raise ValueError(f"ema_decay must lie in [0, 1), got {self.ema_decay}")
        if self.in_channels not in (1, 3):
            raise ValueError(f"in_channels must be 1 or 3, got {self.in_channels}")
        if self.image_size % 2 != 0:
            raise ValueError("image_size must be even (one downsampling stage)")


class _TimestepEmbedding(nn.Module):
    def __init__(self, dim: int):
        super().__init__()
        self.dim = dim
        self.mlp = nn.Sequential(nn.Linear(dim, dim), nn.SiLU(), nn.Linear(dim, dim))

    def forward(self, t: torch.Tensor) -> torch.Tensor:
        half = self.dim // 2
        freqs = torch.exp(-math.log(10000.0) * torch.arange(half, dtype=torch.float32) / half)
        angles = t.float()[:, None] * freqs[None, :]
        emb = torch.cat([torch.sin(angles), torch.cos(angles)], dim=1)
        return self.mlp(emb)


class _ResBlock(nn.Module):
    def __init__(self, in_ch: int, out_ch: int, t_dim: int):
        super().__init__()
        groups = min(8, in_ch)
        self.norm1 = nn.GroupNorm(groups, in_ch)
        self.conv1 = nn.Conv2d(in_ch, out_ch, 3, padding=1)
        self.temb_proj = nn.Linear(t_dim, out_ch)
        self.norm2 = nn.GroupNorm(min(8, out_ch), out_ch)
        self.conv2 = nn.Conv2d(out_ch, out_ch, 3, padding=1)
        self.skip = nn.Conv2d(in_ch, out_ch, 1) if in_ch != out_ch else nn.Identity()

    def forward(self, x: torch.Tensor, temb: torch.Tensor) -> torch.Tensor:
        h = self.conv1(F.silu(self.norm1(x)))
        h = h + self.temb_proj(temb)[:, :, None, None]
        h = self.conv2(F.silu(self.norm2(h)))
        return self.skip(x) + h


class _SelfAttention2d(nn.Module):
    """Multi-head self-attention over the spatial grid, control-aware.

    With no control attached this computes the same arithmetic as the
    control's default path, so hooking a layer with an empty plan is a
    bit-exact no-op.
    """

    def __init__(self, ch: int, heads: int, layer_id: str):
        super().__init__()
        if ch % heads != 0:
            raise ValueError(f"channels {ch} not divisible by heads {heads}")
        self.layer_id = layer_id
        self.heads = heads
        self.norm = nn.GroupNorm(min(8, ch), ch)
        self.qkv = nn.Conv2d(ch, 3 * ch, 1)
        self.proj = nn.Conv2d(ch, ch, 1)

    def forward(self, x: torch.Tensor, control=None) -> torch.Tensor:
        b, c, h, w = x.shape
        q, k, v = self.qkv(self.norm(x)).chunk(3, dim=1)

        def heads_first(t: torch.Tensor) -> torch.Tensor:
            return t.reshape(b, self.heads, c // self.heads, h * w).transpose(-2, -1)

        q, k, v = heads_first(q), heads_first(k), heads_first(v)
        if control is None:
            out = injected_attention(q, k, v, 1.0)
        else:
            out = control.attend(self.layer_id, q, k, v)
        out = out.transpose(-2, -1).reshape(b, c, h, w)
        return x + self.proj(out)


class ToyUNet(nn.Module):
    """Noise predictor: full-res conv stages around an attentive half-res core."""

    def __init__(self, in_channels: int = 1, base_channels: int = 24, heads: int = 3):
        super().__init__()
        cb, ch = base_channels, 2 * base_channels
        t_dim = 4 * base_channels
        self.time_embed = _TimestepEmbedding(t_dim)
        self.conv_in = nn.Conv2d(in_channels, cb, 3, padding=1)
        self.enc_full_1 = _ResBlock(cb, cb, t_dim)
        self.enc_full_2 = _ResBlock(cb, cb, t_dim)
        self.down = nn.Conv2d(cb, cb, 3, stride=2, padding=1)
        self.enc_half_1 = _ResBlock(cb, ch, t_dim)
        self.enc_half_2 = _ResBlock(ch, ch, t_dim)
        self.mid_1 = _ResBlock(ch, ch, t_dim)
        self.mid_attn = _SelfAttention2d(ch, heads, "mid.attn")
        self.mid_2 = _ResBlock(ch, ch, t_dim)
        self.dec_half_1 = _ResBlock(2 * ch, ch, t_dim)
        self.dec_half_attn_1 = _SelfAttention2d(ch, heads, "up.0.attn")
        self.dec_half_2 = _ResBlock(2 * ch, ch, t_dim)
        self.dec_half_attn_2 = _SelfAttention2d(ch, heads, "up.1.attn")
        self.up = nn.Conv2d(ch, cb, 3, padding=1)
        self.dec_full_1 = _ResBlock(2 * cb, cb, t_dim)
        self.dec_full_2 = _ResBlock(2 * cb, cb, t_dim)
        self.norm_out = nn.GroupNorm(min(8, cb), cb)
        self.conv_out = nn.Conv2d(cb, in_channels, 3, padding=1)
        # Decoder-half self-attention sub-layers, forward order.
        self.attention_layers = ["mid.attn", "up.0.attn", "up.1.attn"]

    def forward(self, x: torch.Tensor, t: torch.Tensor, control=None) -> torch.Tensor:
        temb = self.time_embed(t)
        h1 = self.enc_full_1(self.conv_in(x), temb)
        h2 = self.enc_full_2(h1, temb)
        d = self.down(h2)
        h3 = self.enc_half_1(d, temb)
        h4 = self.enc_half_2(h3, temb)
        m = self.mid_1(h4, temb)
        m = self.mid_attn(m, control)
        m = self.mid_2(m, temb)
        u = self.dec_half_1(torch.cat([m, h4], dim=1), temb)
        u = self.dec_half_attn_1(u, control)
        u = self.dec_half_2(torch.cat([u, h3], dim=1), temb)
        u = self.dec_half_attn_2(u, control)
        u = self.up(F.interpolate(u, scale_factor=2, mode="nearest"))
        u = self.dec_full_1(torch.cat([u, h2], dim=1), temb)
        u = self.dec_full_2(torch.cat([u, h1], dim=1), temb)
        return self.conv_out(F.silu(self.norm_out(u)))


class ToyBackbone(Backbone):
    """Backbone wrapper around a trained ToyUNet.

    predict_noise runs inference (no autograd); the raw module stays
    reachable as .unet for anyone who wants gradients.
    """

    def __init__(self, unet: ToyUNet, schedule: NoiseSchedule, config: ToyTrainConfig, train_log=None):
        self.unet = unet
        self._schedule = schedule
        self.config = config
        self.train_log = list(train_log) if train_log is not None else []
        self.unet.eval()

    def predict_noise(self, x_t: torch.Tensor, t: int, control=None) -> torch.Tensor:
        tt = torch.full((x_t.shape[0],), int(t), dtype=torch.long)
        with torch.no_grad():
            return self.unet(x_t, tt, control)

    def encode(self, image: Image) -> torch.Tensor:
        px = image.pixels
        if px.shape[2] != self.config.in_channels:
            if self.config.in_channels == 1:
                px = (px @ _LUMA)[:, :, None]
            else:
                px = np.repeat(px, 3, axis=2)
        chw = np.ascontiguousarray(px.transpose(2, 0, 1), dtype=np.float32)
        return torch.from_numpy(chw)[None]

    def decode(self, state: torch.Tensor) -> Image:
        arr = state.detach().clamp(0.0, 1.0)[0].cpu().numpy()
        return Image(np.ascontiguousarray(arr.transpose(1, 2, 0)))

    @property
    def attention_layers(self) -> list[str]:
        return list(self.unet.attention_layers)

    @property
    def schedule(self) -> NoiseSchedule:
        return self._schedule

    def save(self, path) -> None:
        payload = {
            "format_version": _CHECKPOINT_VERSION,
            "kind": "toy",
            "config": asdict(self.config),
            "state_dict": self.unet.state_dict(),
            "schedule": {
                "t_train": self._schedule.t_train,
                "beta_start": self._schedule.beta_start,
                "beta_end": self._schedule.beta_end,
                "kind": self._schedule.kind,
                "s": self._schedule.n_ddim_steps,
            },
            "train_log": self.train_log,
        }
        torch.save(payload, path)

    @classmethod
    def load(cls, path) -> "ToyBackbone":
        try:
            payload = torch.load(path, map_location="cpu", weights_only=False)
        except FileNotFoundError:
            raise
        except Exception as exc:
            raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from exc
        if not isinstance(payload, dict) or payload.get("kind") != "toy":
            raise CheckpointError(f"{path} is not a toy backbone checkpoint")
        if payload.get("format_version") != _CHECKPOINT_VERSION:
            raise CheckpointError(
                f"checkpoint version {payload.get('format_version')!r} unsupported "
                f"(expected {_CHECKPOINT_VERSION})"
            )
        config = ToyTrainConfig(**payload["config"])
        sched_meta = payload["schedule"]
        schedule = make_noise_schedule(
            sched_meta["t_train"],
            sched_meta["beta_start"],
            sched_meta["beta_end"],
            sched_meta["kind"],
            sched_meta["s"],
        )
        unet = ToyUNet(config.in_channels, config.base_channels, config.heads)
        unet.load_state_dict(payload["state_dict"])
        return cls(unet, schedule, config, payload.get("train_log"))


def _to_training_tensor(image: Image, cfg: ToyTrainConfig) -> torch.Tensor:
    if (image.height, image.width) != (cfg.image_size, cfg.image_size):
        raise ConfigError(
            f"training image is {image.height}x{image.width}, expected "
            f"{cfg.image_size}x{cfg.image_size}"
        )
    px = image.pixels
    if px.shape[2] != cfg.in_channels:
        if cfg.in_channels == 1:
            px = (px @ _LUMA)[:, :, None]
        else:
            px = np.repeat(px, 3, axis=2)
    return torch.from_numpy(np.ascontiguousarray(px.transpose(2, 0, 1), dtype=np.float32))


def train_toy_backbone(dataset: list[Image], cfg: ToyTrainConfig) -> ToyBackbone:
    """Train the denoiser on the standard noise-prediction objective.

    Per step: draw per-sample timesteps and Gaussian noise, form the noisy
    states, and regress the predicted noise onto the drawn noise with MSE.
    The per-epoch mean loss is recorded in the returned backbone's
    train_log. A non-finite loss aborts immediately with diagnostics.
    """
    if len(dataset) == 0:
        raise ConfigError("empty dataset: nothing to train on")
    if len(dataset) < 16:
        raise ConfigError(f"need at least 16 training images, got {len(dataset)}")
    torch.manual_seed(cfg.seed)
    rng = np.random.default_rng(cfg.seed)

    data = torch.stack([_to_training_tensor(im, cfg) for im in dataset])
    schedule = make_noise_schedule(
        cfg.t_train, cfg.beta_start, cfg.beta_end, "linear", cfg.ddim_steps
    )
    alpha_bar = torch.from_numpy(schedule.alpha_bar).float()

    unet = ToyUNet(cfg.in_channels, cfg.base_channels, cfg.heads)
    unet.train()
    optimizer = torch.optim.Adam(unet.parameters(), lr=cfg.lr)
    lr_schedule = torch.optim.lr_scheduler.CosineAnnealingLR(
        optimizer, T_max=cfg.epochs, eta_min=cfg.lr * 0.05
    )
    ema = {k: v.detach().clone() for k, v in unet.state_dict().items()} if cfg.ema_decay else None

    train_log: list[float] = []
    n = data.shape[0]
    for epoch in range(cfg.epochs):
        order = rng.permutation(n)
        epoch_losses = []
        for start in range(0, n, cfg.batch_size):
            idx = order[start : start + cfg.batch_size]
            x0 = data[idx]
            t = torch.randint(1, cfg.t_train + 1, (x0.shape[0],))
            eps = torch.randn_like(x0)
            ab = alpha_bar[t].view(-1, 1, 1, 1)
            x_t = ab.sqrt() * x0 + (1.0 - ab).sqrt() * eps
            pred = unet(x_t, t)
            loss = F.mse_loss(pred, eps)
            if not torch.isfinite(loss):
                raise CytostyleError(
                    f"non-finite training loss at epoch {epoch}, step {start // cfg.batch_size} "
                    f"(lr={cfg.lr}, batch={cfg.batch_size}); aborting"
                )
            optimizer.zero_grad()
            loss.backward()
            optimizer.step()
            if ema is not None:
                with torch.no_grad():
                    for k, v in unet.state_dict().items():
                        if v.dtype.is_floating_point:
                            ema[k].mul_(cfg.ema_decay).add_(v, alpha=1.0 - cfg.ema_decay)
                        else:
                            ema[k].copy_(v)
            epoch_losses.append(float(loss.detach()))
        lr_schedule.step()
        train_log.append(float(np.mean(epoch_losses)))

    if ema is not None:
        unet.load_state_dict(ema)
    unet.eval()
    return ToyBackbone(unet, schedule, cfg, train_log)
