"""The five classifier architectures.

* EHRLogisticNet         — logistic regression over the EHR feature vector
* SingleViewNet          — conv encoder + bi-LSTM with additive attention +
                           feed-forward head, for one echo view
* DoubleViewNet          — concatenated PLAX/A4C clip features + head
* LateFusionNet          — clip features from both views + EHR vector + head
* IntermediateFusionNet  — per-modality 512-d token embeddings fused by a
                           post-norm transformer encoder; the classifier
                           reads the CLS token and per-layer attention
                           matrices are returned for importance analysis

All modules are plain ``nn.Module``s whose forward passes are deterministic
functions of (parameters, inputs) in eval mode. Dropout draws from an
explicit per-network generator so training stays reproducible even when
folds run concurrently.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch
from torch import nn

from .errors import ValidationError

FUSION_TOKEN_ORDER = ("CLS", "EHR", "PLAX", "A4C")


@dataclass(frozen=True)
class EncoderConfig:
    """Dimensions of the single-view spatiotemporal encoder."""

    frame_size: int = 32
    sampled_frames: int = 30
    conv_channels: tuple[int, ...] = (16, 32, 64, 128)
    frame_feature_dim: int = 128
    lstm_hidden: int = 64
    clip_feature_dim: int = 128
    attention_dim: int = 64
    head_hidden: int = 64

    def validate(self) -> None:
        dims = (
            self.frame_size,
            self.sampled_frames,
            self.frame_feature_dim,
            self.lstm_hidden,
            self.clip_feature_dim,
            self.attention_dim,
            self.head_hidden,
            *self.conv_channels,
        )
        if not self.conv_channels or any(d < 1 for d in dims):
            raise ValidationError(f"encoder dimensions must all be >= 1: {self}")
        if self.clip_feature_dim != 2 * self.lstm_hidden:
            raise ValidationError(
                f"clip_feature_dim ({self.clip_feature_dim}) must equal "
                f"2 * lstm_hidden ({2 * self.lstm_hidden}): the clip feature is the "
                "attention-pooled bidirectional state"
            )


@dataclass(frozen=True)
class FusionConfig:
    """Dimensions of the transformer intermediate-fusion model."""

    d_model: int = 512
    n_heads: int = 4
    n_layers: int = 2
    ff_dim: int = 1024
    dropout: float = 0.1
    head_hidden: int = 64
    encoder_freeze: bool = True

    def validate(self) -> None:
        dims = (self.d_model, self.n_heads, self.n_layers, self.ff_dim, self.head_hidden)
        if any(d < 1 for d in dims):
            raise ValidationError(f"fusion dimensions must all be >= 1: {self}")
        if self.d_model % self.n_heads != 0:
            raise ValidationError(
                f"d_model ({self.d_model}) must be divisible by n_heads ({self.n_heads})"
            )
        if not 0.0 <= self.dropout < 1.0:
            raise ValidationError(f"dropout must be in [0, 1), got {self.dropout!r}")


def init_parameters(module: nn.Module, seed: int) -> None:
    """Seeded init: fan-in-scaled uniform for weight matrices, zeros for
    biases, ones for normalization scales.

    Fan-in is the product of all non-leading dimensions, so the same rule
    covers linear, convolutional and recurrent weight matrices.
    """
    gen = torch.Generator().manual_seed(int(seed) & 0x7FFFFFFFFFFFFFFF)
    norm_scales = set()
    with torch.no_grad():
        for name, sub in module.named_modules():
            if isinstance(sub, nn.LayerNorm):
                sub.weight.fill_(1.0)
                sub.bias.zero_()
                prefix = f"{name}." if name else ""
                norm_scales.update({f"{prefix}weight", f"{prefix}bias"})
        for name, param in module.named_parameters():
            if name in norm_scales:
                continue
            if param.dim() >= 2:
                fan_in = int(np.prod(param.shape[1:]))
                bound = 1.0 / math.sqrt(fan_in)
                param.uniform_(-bound, bound, generator=gen)
            else:
                param.zero_()


def subsample_frame_indices(total_frames: int, count: int) -> np.ndarray:
    """Uniformly spaced, strictly increasing frame indices (half-up rounding)."""
    if total_frames < count:
        raise ValidationError(f"cannot sample {count} frames from a {total_frames}-frame clip")
    if count == 1:
        return np.zeros(1, dtype=int)
    return np.floor(np.linspace(0.0, total_frames - 1, count) + 0.5).astype(int)


class SeededDropout(nn.Module):
    """Dropout whose mask comes from a generator owned by the parent network."""

    def __init__(self, p: float, generator_holder: list[torch.Generator]):
        super().__init__()
        self.p = p
        self._holder = generator_holder

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        if not self.training or self.p == 0.0:
            return x
        keep = 1.0 - self.p
        mask = (
            torch.rand(x.shape, generator=self._holder[0], dtype=x.dtype) < keep
        ).to(x.dtype) / keep
        return x * mask


class ClipEncoder(nn.Module):
    """Spatiotemporal encoder: per-frame CNN, bi-LSTM, additive attention pool.

    Input is a clip tensor [B, T, C, H, W]; output is the attention-weighted
    sum of bidirectional states (dim 2 * lstm_hidden) plus the attention
    weights over time, which sum to one per clip.
    """

    def __init__(self, config: EncoderConfig):
        super().__init__()
        config.validate()
        self.config = config
        layers: list[nn.Module] = []
        prev = 1
        for ch in config.conv_channels:
            layers += [nn.Conv2d(prev, ch, kernel_size=3, stride=2, padding=1), nn.ReLU()]
            prev = ch
        self.conv = nn.Sequential(*layers)
        self.pool = nn.AdaptiveAvgPool2d(1)
        self.frame_proj = nn.Linear(prev, config.frame_feature_dim)
        self.lstm = nn.LSTM(
            config.frame_feature_dim,
            config.lstm_hidden,
            batch_first=True,
            bidirectional=True,
        )
        self.attn_w = nn.Linear(2 * config.lstm_hidden, config.attention_dim)
        self.attn_v = nn.Linear(config.attention_dim, 1, bias=False)

    def forward(self, clips: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        if clips.dim() != 5:
            raise ValidationError(f"expected clips shaped [B,T,C,H,W], got {tuple(clips.shape)}")
        b, t = clips.shape[:2]
        frames = clips.reshape(b * t, *clips.shape[2:])
        spatial = self.pool(self.conv(frames)).flatten(1)
        per_frame = torch.relu(self.frame_proj(spatial)).reshape(b, t, -1)
        states, _ = self.lstm(per_frame)
        scores = self.attn_v(torch.tanh(self.attn_w(states))).squeeze(-1)
        alpha = torch.softmax(scores, dim=1)
        feature = (alpha.unsqueeze(-1) * states).sum(dim=1)
        return feature, alpha


def _head(in_dim: int, hidden: int) -> nn.Sequential:
    return nn.Sequential(nn.Linear(in_dim, hidden), nn.ReLU(), nn.Linear(hidden, 1))


class EHRLogisticNet(nn.Module):
    """sigmoid(w . x + b) over the standardized EHR feature vector."""

    def __init__(self, n_features: int):
        super().__init__()
        self.linear = nn.Linear(n_features, 1)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        if x.shape[-1] != self.linear.in_features:
            raise ValidationError(
                f"feature dimension {x.shape[-1]} does not match model ({self.linear.in_features})"
            )
        return torch.sigmoid(self.linear(x)).squeeze(-1)


class SingleViewNet(nn.Module):
    """One-view classifier: clip encoder followed by a feed-forward head."""

    def __init__(self, config: EncoderConfig):
        super().__init__()
        self.encoder = ClipEncoder(config)
        self.head = _head(config.clip_feature_dim, config.head_hidden)

    def forward(self, clips: torch.Tensor) -> torch.Tensor:
        feature, _ = self.encoder(clips)
        return torch.sigmoid(self.head(feature)).squeeze(-1)


class DoubleViewNet(nn.Module):
    """Two single-view encoders (separate parameters per view) + joint head."""

    def __init__(self, plax_encoder: ClipEncoder, a4c_encoder: ClipEncoder, head_hidden: int = 64):
        super().__init__()
        self.plax_encoder = plax_encoder
        self.a4c_encoder = a4c_encoder
        joint = plax_encoder.config.clip_feature_dim + a4c_encoder.config.clip_feature_dim
        self.head = _head(joint, head_hidden)

    def fuse(self, plax_feat: torch.Tensor, a4c_feat: torch.Tensor) -> torch.Tensor:
        joint = torch.cat([plax_feat, a4c_feat], dim=-1)
        return torch.sigmoid(self.head(joint)).squeeze(-1)

    def forward(self, plax_clips: torch.Tensor, a4c_clips: torch.Tensor) -> torch.Tensor:
        return self.fuse(self.plax_encoder(plax_clips)[0], self.a4c_encoder(a4c_clips)[0])


class LateFusionNet(nn.Module):
    """Clip features from both views concatenated with the EHR vector + head."""

    def __init__(
        self,
        plax_encoder: ClipEncoder,
        a4c_encoder: ClipEncoder,
        ehr_dim: int,
        head_hidden: int = 64,
    ):
        super().__init__()
        self.plax_encoder = plax_encoder
        self.a4c_encoder = a4c_encoder
        self.ehr_dim = ehr_dim
        joint = (
            plax_encoder.config.clip_feature_dim
            + a4c_encoder.config.clip_feature_dim
            + ehr_dim
        )
        self.head = _head(joint, head_hidden)

    def fuse(
        self, plax_feat: torch.Tensor, a4c_feat: torch.Tensor, ehr: torch.Tensor
    ) -> torch.Tensor:
        joint = torch.cat([plax_feat, a4c_feat, ehr], dim=-1)
        return torch.sigmoid(self.head(joint)).squeeze(-1)

    def forward(
        self, plax_clips: torch.Tensor, a4c_clips: torch.Tensor, ehr: torch.Tensor
    ) -> torch.Tensor:
        return self.fuse(self.plax_encoder(plax_clips)[0], self.a4c_encoder(a4c_clips)[0], ehr)


class MultiHeadSelfAttention(nn.Module):
    """Standard scaled dot-product self-attention returning per-head weights."""

    def __init__(self, d_model: int, n_heads: int, dropout: SeededDropout):
        super().__init__()
        self.n_heads = n_heads
        self.d_head = d_model // n_heads
        self.qkv = nn.Linear(d_model, 3 * d_model)
        self.out = nn.Linear(d_model, d_model)
        self.attn_dropout = dropout

    def forward(self, x: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        b, t, d = x.shape
        qkv = self.qkv(x).reshape(b, t, 3, self.n_heads, self.d_head)
        q, k, v = (qkv[:, :, i].transpose(1, 2) for i in range(3))  # [B, h, T, d_head]
        scores = q @ k.transpose(-2, -1) / math.sqrt(self.d_head)
        attn = torch.softmax(scores, dim=-1)
        mixed = self.attn_dropout(attn) @ v
        merged = mixed.transpose(1, 2).reshape(b, t, d)
        return self.out(merged), attn


class TransformerLayer(nn.Module):
    """Post-norm transformer encoder layer."""

    def __init__(self, d_model: int, n_heads: int, ff_dim: int, dropout: SeededDropout):
        super().__init__()
        self.mha = MultiHeadSelfAttention(d_model, n_heads, dropout)
        self.ff = nn.Sequential(nn.Linear(d_model, ff_dim), nn.ReLU(), nn.Linear(ff_dim, d_model))
        self.norm1 = nn.LayerNorm(d_model)
        self.norm2 = nn.LayerNorm(d_model)
        self.dropout = dropout

    def forward(self, x: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        mixed, attn = self.mha(x)
        x = self.norm1(x + self.dropout(mixed))
        x = self.norm2(x + self.dropout(self.ff(x)))
        return x, attn


class IntermediateFusionNet(nn.Module):
    """Transformer fusion over [CLS, EHR, PLAX, A4C] modality tokens.

    Feed-forward layers embed the EHR vector; linear projections lift the
    (pre-trained) clip features; learned modality-type embeddings mark each
    token. The head reads the CLS output; ``fuse``/``forward`` also return
    the per-layer, per-head attention matrices.
    """

    def __init__(
        self,
        config: FusionConfig,
        ehr_dim: int,
        plax_encoder: ClipEncoder,
        a4c_encoder: ClipEncoder,
    ):
        super().__init__()
        config.validate()
        self.config = config
        self.ehr_dim = ehr_dim
        self.plax_encoder = plax_encoder
        self.a4c_encoder = a4c_encoder

        d = config.d_model
        self._dropout_gen = [torch.Generator().manual_seed(0)]
        dropout = SeededDropout(config.dropout, self._dropout_gen)
        self.ehr_embed = nn.Sequential(nn.Linear(ehr_dim, d), nn.ReLU(), nn.Linear(d, d))
        self.proj_plax = nn.Linear(plax_encoder.config.clip_feature_dim, d)
        self.proj_a4c = nn.Linear(a4c_encoder.config.clip_feature_dim, d)
        self.cls_token = nn.Parameter(torch.zeros(1, d))
        self.type_embed = nn.Parameter(torch.zeros(len(FUSION_TOKEN_ORDER), d))
        self.layers = nn.ModuleList(
            TransformerLayer(d, config.n_heads, config.ff_dim, dropout)
            for _ in range(config.n_layers)
        )
        self.head = _head(d, config.head_hidden)

    def reseed_dropout(self, seed: int) -> None:
        self._dropout_gen[0] = torch.Generator().manual_seed(int(seed) & 0x7FFFFFFFFFFFFFFF)

    @property
    def ehr_mapping_weight(self) -> torch.Tensor:
        """First EHR embedding layer's weight matrix, shaped [d_model, ehr_dim]."""
        return self.ehr_embed[0].weight

    def fuse(
        self, ehr: torch.Tensor, plax_feat: torch.Tensor, a4c_feat: torch.Tensor
    ) -> tuple[torch.Tensor, list[torch.Tensor]]:
        b = ehr.shape[0]
        tokens = torch.stack(
            [
                self.cls_token.expand(b, -1),
                self.ehr_embed(ehr),
                self.proj_plax(plax_feat),
                self.proj_a4c(a4c_feat),
            ],
            dim=1,
        )
        x = tokens + self.type_embed.unsqueeze(0)
        attention_maps: list[torch.Tensor] = []
        for layer in self.layers:
            x, attn = layer(x)
            attention_maps.append(attn)
        prob = torch.sigmoid(self.head(x[:, 0])).squeeze(-1)
        return prob, attention_maps

    def forward(
        self, ehr: torch.Tensor, plax_clips: torch.Tensor, a4c_clips: torch.Tensor
    ) -> tuple[torch.Tensor, list[torch.Tensor]]:
        plax_feat, _ = self.plax_encoder(plax_clips)
        a4c_feat, _ = self.a4c_encoder(a4c_clips)
        return self.fuse(ehr, plax_feat, a4c_feat)
