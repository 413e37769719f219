"""Preconditioned convolutional score network.

The network is parameterized as

    s(x; sigma_a) = c_out * F(c_in * x; sigma_a) + c_skip * x

where F is a small U-Net backbone conditioned on the noise level through a
broadcast channel. With the coefficients below, F sees a unit-variance input
and learns only the residual between the marginal score and the analytic
skip term; the final layer is zero-initialized so an untrained model already
equals the skip term.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, asdict

import numpy as np
import torch
import torch.nn as nn

from .errors import ParameterError

# fixed conditioning level for feature extraction, so features are a
# deterministic function of the weights alone
ENCODE_NOISE_LEVEL = 1e-6


@dataclass
class ScoreModelConfig:
    base_width: int = 32
    channel_multipliers: tuple[int, ...] = (1, 2)
    in_channels: int = 1
    patch_size: int = 64
    feature_dim: int | None = None  # derived from the deepest width when None

    def __post_init__(self):
        if self.base_width < 4:
            raise ParameterError(f"base_width must be >= 4, got {self.base_width}")
        if not self.channel_multipliers:
            raise ParameterError("channel_multipliers must be nonempty")
        self.channel_multipliers = tuple(int(m) for m in self.channel_multipliers)

    @property
    def widths(self) -> tuple[int, ...]:
        return tuple(self.base_width * m for m in self.channel_multipliers)

    @property
    def encoder_dim(self) -> int:
        return self.feature_dim if self.feature_dim is not None else self.widths[-1]

    @classmethod
    def paper_scale(cls) -> "ScoreModelConfig":
        return cls(base_width=128, channel_multipliers=(1, 2, 2, 4), patch_size=256)


@dataclass
class PrecondCoeffs:
    c_in: object
    c_skip: object
    c_out: object
    loss_weight: object


def precondition_coeffs(sigma, sigma_a) -> PrecondCoeffs:
    """Closed-form preconditioning coefficients for data scale ``sigma`` and
    corruption level ``sigma_a``.

    Works on floats and on torch tensors (for per-sample noise levels).
    """
    if float(np.min(np.asarray(sigma))) <= 0:
        raise ParameterError(f"sigma must be > 0, got {sigma}")
    var = sigma**2 + sigma_a**2
    c_in = 1.0 / var**0.5
    c_skip = -1.0 / var
    c_out = -sigma_a / (sigma * var**0.5)
    loss_weight = (sigma**2 * sigma_a**2 + sigma**4) / sigma**2
    return PrecondCoeffs(c_in=c_in, c_skip=c_skip, c_out=c_out, loss_weight=loss_weight)


def _groups(channels: int) -> int:
    for g in (8, 4, 2, 1):
        if channels % g == 0:
            return g
    return 1


class _ResBlock(nn.Module):
    def __init__(self, channels: int):
        super().__init__()
        self.norm1 = nn.GroupNorm(_groups(channels), channels)
        self.conv1 = nn.Conv2d(channels, channels, 3, padding=1)
        self.norm2 = nn.GroupNorm(_groups(channels), channels)
        self.conv2 = nn.Conv2d(channels, channels, 3, padding=1)
        self.act = nn.SiLU()

    def forward(self, x):
        h = self.conv1(self.act(self.norm1(x)))
        h = self.conv2(self.act(self.norm2(h)))
        return x + h


class _Backbone(nn.Module):
    """U-Net residual backbone; input channels are [image, noise-level]."""

    def __init__(self, config: ScoreModelConfig):
        super().__init__()
        widths = config.widths
        self.stem = nn.Conv2d(config.in_channels + 1, widths[0], 3, padding=1)
        self.down_blocks = nn.ModuleList(_ResBlock(w) for w in widths)
        self.downsamplers = nn.ModuleList(
            nn.Conv2d(widths[i], widths[i + 1], 3, stride=2, padding=1)
            for i in range(len(widths) - 1)
        )
        self.mid = _ResBlock(widths[-1])
        self.upsamplers = nn.ModuleList(
            nn.ConvTranspose2d(widths[i + 1], widths[i], 4, stride=2, padding=1)
            for i in reversed(range(len(widths) - 1))
        )
        self.up_blocks = nn.ModuleList(
            nn.Sequential(
                nn.Conv2d(2 * widths[i], widths[i], 1),
                _ResBlock(widths[i]),
            )
            for i in reversed(range(len(widths) - 1))
        )
        self.head_norm = nn.GroupNorm(_groups(widths[0]), widths[0])
        self.head = nn.Conv2d(widths[0], config.in_channels, 3, padding=1)
        nn.init.zeros_(self.head.weight)
        nn.init.zeros_(self.head.bias)
        self.act = nn.SiLU()

    def _conditioned(self, z, c_noise):
        return torch.cat([z, c_noise.expand(z.shape[0], 1, *z.shape[2:])], dim=1)

    def encoder_features(self, z, c_noise):
        h = self.stem(self._conditioned(z, c_noise))
        h = self.down_blocks[0](h)
        for down, block in zip(self.downsamplers, self.down_blocks[1:]):
            h = block(down(h))
        return h

    def forward(self, z, c_noise):
        h = self.stem(self._conditioned(z, c_noise))
        skips = []
        h = self.down_blocks[0](h)
        for down, block in zip(self.downsamplers, self.down_blocks[1:]):
            skips.append(h)
            h = block(down(h))
        h = self.mid(h)
        for up, block in zip(self.upsamplers, self.up_blocks):
            h = up(h)
            h = block(torch.cat([h, skips.pop()], dim=1))
        return self.head(self.act(self.head_norm(h)))


class ScoreModel(nn.Module):
    """Score network with analytic preconditioning around a backbone."""

    def __init__(self, config: ScoreModelConfig | None = None, sigma_data: float = 1.0):
        super().__init__()
        self.config = config or ScoreModelConfig()
        if sigma_data <= 0:
            raise ParameterError(f"sigma_data must be > 0, got {sigma_data}")
        self.sigma_data = float(sigma_data)
        self.net = _Backbone(self.config)

    def _sigma_tensor(self, sigma_a, like: torch.Tensor) -> torch.Tensor:
        t = torch.as_tensor(sigma_a, device=like.device, dtype=like.dtype)
        if t.ndim == 0:
            t = t.expand(like.shape[0])
        return t.reshape(like.shape[0], 1, 1, 1)

    def _c_noise(self, sigma_a: torch.Tensor) -> torch.Tensor:
        return torch.log(sigma_a.clamp_min(1e-12)) / 4.0

    def residual(self, z: torch.Tensor, sigma_a) -> torch.Tensor:
        """Backbone output F(z; sigma_a); ``z`` is the already-scaled input."""
        sa = self._sigma_tensor(sigma_a, z)
        return self.net(z, self._c_noise(sa))

    def forward(self, x: torch.Tensor, sigma_a) -> torch.Tensor:
        if x.ndim != 4 or x.shape[1] != self.config.in_channels:
            raise ParameterError(f"expected input of shape (B, 1, H, W), got {tuple(x.shape)}")
        sa = self._sigma_tensor(sigma_a, x)
        c = precondition_coeffs(self.sigma_data, sa)
        return c.c_out * self.net(c.c_in * x, self._c_noise(sa)) + c.c_skip * x

    @torch.no_grad()
    def encode(self, x: torch.Tensor) -> torch.Tensor:
        """Pooled, L2-normalized deepest encoder activation of each patch.

        The encoder's response to an all-zero input is subtracted before
        normalization; otherwise the input-independent bias component
        dominates every feature and cosine similarities saturate.
        """
        if x.ndim == 2:
            x = x[np.newaxis, np.newaxis]
        elif x.ndim == 3:
            x = x[:, np.newaxis]
        sa = self._sigma_tensor(ENCODE_NOISE_LEVEL, x)
        c_noise = self._c_noise(sa)
        h = self.net.encoder_features(x, c_noise).mean(dim=(-2, -1))
        h0 = self.net.encoder_features(torch.zeros_like(x[:1]), c_noise[:1]).mean(dim=(-2, -1))
        feat = h - h0
        return feat / feat.norm(dim=-1, keepdim=True).clamp_min(1e-12)

    def feature_map(self):
        """Adapter exposing :meth:`encode` as a numpy patch -> vector callable."""

        def psi(patch: np.ndarray) -> np.ndarray:
            t = torch.as_tensor(np.asarray(patch, dtype=np.float32))
            p = next(self.parameters())
            return self.encode(t.to(p.device, p.dtype))[0].cpu().double().numpy()

        return psi


CHECKPOINT_VERSION = 1


def save_checkpoint(model: ScoreModel, step: int, path) -> None:
    """Persist architecture, flattened parameters, and the step counter."""
    flat = np.concatenate(
        [p.detach().cpu().double().numpy().ravel() for p in model.parameters()]
    )
    meta = {"config": asdict(model.config), "sigma_data": model.sigma_data}
    np.savez(
        path,
        version=np.int64(CHECKPOINT_VERSION),
        meta=json.dumps(meta, sort_keys=True),
        params=flat,
        step=np.int64(step),
    )


def load_checkpoint(path) -> tuple[ScoreModel, int]:
    with np.load(path, allow_pickle=False) as zf:
        version = int(zf["version"])
        if version != CHECKPOINT_VERSION:
            raise ParameterError(f"unsupported checkpoint version {version}")
        meta = json.loads(str(zf["meta"]))
        flat = zf["params"]
        step = int(zf["step"])
    cfg_kwargs = dict(meta["config"])
    cfg_kwargs["channel_multipliers"] = tuple(cfg_kwargs["channel_multipliers"])
    model = ScoreModel(ScoreModelConfig(**cfg_kwargs), sigma_data=meta["sigma_data"])
    offset = 0
    with torch.no_grad():
        for p in model.parameters():
            n = p.numel()
            p.copy_(torch.as_tensor(flat[offset : offset + n]).reshape(p.shape).to(p.dtype))
            offset += n
    if offset != flat.size:
        raise ParameterError("checkpoint parameter count does not match architecture")
    return model, step
