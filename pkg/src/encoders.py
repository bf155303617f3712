"""Miniature image/text encoders, joint-space projections and camera embedding."""

import logging
import math
from dataclasses import dataclass

import torch
import torch.nn.functional as F
from einops import rearrange, repeat
from torch import nn

from src.errors import ConfigError, ContractError, NumericalError

logger = logging.getLogger(__name__)

DEFAULT_TEMPERATURE = 1.0 / 0.07


class CameraRangeError(ContractError):
    """Raised when a camera id is outside the SIE table."""
    pass


@dataclass(frozen=True)
class ImageEncoderConfig:
    variant: str = "vit"
    image_size: tuple[int, int] = (32, 32)
    in_channels: int = 3
    patch_size: int = 8
    stride: int = 8
    depth: int = 2
    width: int = 64
    heads: int = 4
    mlp_ratio: int = 4
    cnn_channels: tuple[int, ...] = (16, 32, 64, 64)
    proj_dim: int = 32
    dropout: float = 0.0

    def __post_init__(self):
        if self.variant not in ("vit", "cnn"):
            raise ConfigError(f"Unknown image encoder variant {self.variant!r}")
        if self.variant == "vit":
            h, w = self.image_size
            p, s = self.patch_size, self.stride
            if p <= 0 or s <= 0 or p > min(h, w):
                raise ConfigError(f"Invalid patch {p} / stride {s} for image {h}x{w}")
            if (h - p) % s or (w - p) % s:
                raise ConfigError(f"Stride {s} with patch {p} does not tile image {h}x{w}")
            if self.width % self.heads:
                raise ConfigError(f"heads ({self.heads}) must divide width ({self.width})")
            if self.depth < 1:
                raise ConfigError("ViT depth must be at least 1")
        elif len(self.cnn_channels) < 2:
            raise ConfigError("CNN channel plan needs at least two residual stages")

    @property
    def backbone_dim(self) -> int:
        return self.width if self.variant == "vit" else self.cnn_channels[-1]

    @property
    def pre_dim(self) -> int:
        return self.width if self.variant == "vit" else self.cnn_channels[-2]


@dataclass(frozen=True)
class TextEncoderConfig:
    context_length: int = 77
    vocab_size: int = 64
    width: int = 64
    depth: int = 2
    heads: int = 4
    proj_dim: int = 32
    causal: bool = True

    def __post_init__(self):
        if self.width % self.heads:
            raise ConfigError(f"heads ({self.heads}) must divide width ({self.width})")
        if not self.causal:
            raise ConfigError("The text encoder is always causally masked")
        if self.depth < 0:
            raise ConfigError("Text encoder depth must be non-negative")


@dataclass(frozen=True)
class SIEConfig:
    enabled: bool = False
    num_cameras: int = 1
    lambda_sie: float = 1.0
    apply_to: str = "cls_only"

    def __post_init__(self):
        if self.apply_to not in ("cls_only", "all_tokens"):
            raise ConfigError(f"Unknown SIE placement {self.apply_to!r}")
        if self.num_cameras < 1:
            raise ConfigError("SIE needs at least one camera")
        if not math.isfinite(self.lambda_sie) or self.lambda_sie < 0:
            raise ConfigError(f"lambda_sie must be finite and non-negative, got {self.lambda_sie}")


@dataclass
class FeatureBundle:
    pre_img_feature: torch.Tensor
    img_feature: torch.Tensor
    post_img_feature: torch.Tensor


def num_patch_tokens(height: int, width: int, patch: int, stride: int) -> int:
    """Token count of a strided patch grid (no CLS)."""
    if (height - patch) % stride or (width - patch) % stride:
        raise ConfigError(f"Stride {stride} with patch {patch} does not tile {height}x{width}")
    return ((height - patch) // stride + 1) * ((width - patch) // stride + 1)


def check_finite(x: torch.Tensor, layer: int | str) -> torch.Tensor:
    if not torch.isfinite(x).all():
        raise NumericalError(f"Non-finite activations at layer {layer}")
    return x


def _init_module(module: nn.Module) -> None:
    if isinstance(module, nn.Linear):
        nn.init.trunc_normal_(module.weight, mean=0.0, std=0.02)
        if module.bias is not None:
            nn.init.zeros_(module.bias)
    elif isinstance(module, nn.LayerNorm):
        nn.init.ones_(module.weight)
        nn.init.zeros_(module.bias)


class Attention(nn.Module):
    def __init__(self, width: int, heads: int, dropout: float = 0.0):
        super().__init__()
        self.heads = heads
        self.scale = (width // heads) ** -0.5
        self.to_qkv = nn.Linear(width, width * 3)
        self.to_out = nn.Linear(width, width)
        self.dropout = nn.Dropout(dropout)

    def forward(self, x: torch.Tensor, mask: torch.Tensor | None = None) -> torch.Tensor:
        q, k, v = (
            rearrange(t, "b n (h d) -> b h n d", h=self.heads)
            for t in self.to_qkv(x).chunk(3, dim=-1)
        )
        dots = torch.matmul(q, k.transpose(-1, -2)) * self.scale
        if mask is not None:
            dots = dots.masked_fill(mask, float("-inf"))
        attn = self.dropout(dots.softmax(dim=-1))
        out = rearrange(torch.matmul(attn, v), "b h n d -> b n (h d)")
        return self.to_out(out)


class ResidualAttentionBlock(nn.Module):
    def __init__(self, width: int, heads: int, mlp_ratio: int = 4, dropout: float = 0.0):
        super().__init__()
        self.ln_1 = nn.LayerNorm(width)
        self.attn = Attention(width, heads, dropout)
        self.ln_2 = nn.LayerNorm(width)
        self.mlp = nn.Sequential(
            nn.Linear(width, width * mlp_ratio),
            nn.GELU(),
            nn.Dropout(dropout),
            nn.Linear(width * mlp_ratio, width),
        )

    def forward(self, x: torch.Tensor, mask: torch.Tensor | None = None) -> torch.Tensor:
        x = x + self.attn(self.ln_1(x), mask)
        return x + self.mlp(self.ln_2(x))


class PatchEmbedding(nn.Module):
    """Strided patch projection with a prepended CLS token and learned positions.

    A stride smaller than the patch gives overlapping patches; the positional
    table length follows the resulting token count.
    """

    def __init__(self, config: ImageEncoderConfig):
        super().__init__()
        h, w = config.image_size
        self.num_patches = num_patch_tokens(h, w, config.patch_size, config.stride)
        self.proj = nn.Conv2d(
            config.in_channels, config.width,
            kernel_size=config.patch_size, stride=config.stride, bias=False,
        )
        self.cls_token = nn.Parameter(torch.zeros(1, 1, config.width))
        self.pos_embedding = nn.Parameter(torch.zeros(1, self.num_patches + 1, config.width))
        nn.init.trunc_normal_(self.cls_token, std=0.02)
        nn.init.trunc_normal_(self.pos_embedding, std=0.02)

    def forward(self, images: torch.Tensor) -> torch.Tensor:
        x = rearrange(self.proj(images), "b c h w -> b (h w) c")
        cls = repeat(self.cls_token, "1 1 d -> b 1 d", b=x.shape[0])
        return torch.cat([cls, x], dim=1) + self.pos_embedding


def add_sie(tokens: torch.Tensor, camera_ids: torch.Tensor, table: torch.Tensor,
            sie: SIEConfig) -> torch.Tensor:
    """Add lambda_sie × E_cam[camera] to the CLS row (or every row)."""
    camera_ids = torch.as_tensor(camera_ids, dtype=torch.long, device=tokens.device).reshape(-1)
    if camera_ids.numel() and (camera_ids.min() < 0 or camera_ids.max() >= table.shape[0]):
        raise CameraRangeError(f"Camera ids must lie in [0, {table.shape[0]})")
    if sie.lambda_sie == 0:
        return tokens
    offset = sie.lambda_sie * table[camera_ids].unsqueeze(1)
    if sie.apply_to == "cls_only":
        return torch.cat([tokens[:, :1] + offset, tokens[:, 1:]], dim=1)
    return tokens + offset


class VisionTransformerEncoder(nn.Module):
    def __init__(self, config: ImageEncoderConfig, sie: SIEConfig | None = None):
        super().__init__()
        self.config = config
        self.sie = sie or SIEConfig()
        self.patch_embed = PatchEmbedding(config)
        if self.sie.enabled:
            self.sie_embedding = nn.Parameter(torch.zeros(self.sie.num_cameras, config.width))
            nn.init.trunc_normal_(self.sie_embedding, std=0.02)
        self.ln_pre = nn.LayerNorm(config.width)
        self.blocks = nn.ModuleList(
            ResidualAttentionBlock(config.width, config.heads, config.mlp_ratio, config.dropout)
            for _ in range(config.depth)
        )
        self.ln_post = nn.LayerNorm(config.width)
        self.proj = nn.Linear(config.width, config.proj_dim)  # g_V
        self.blocks.apply(_init_module)
        self.proj.apply(_init_module)

    def forward(self, images: torch.Tensor, camera_ids: torch.Tensor | None = None) -> FeatureBundle:
        x = self.patch_embed(images)
        if self.sie.enabled:
            if camera_ids is None:
                raise ContractError("Camera ids are required when SIE is enabled")
            x = add_sie(x, camera_ids, self.sie_embedding, self.sie)
        elif camera_ids is not None:
            raise ContractError("Camera ids given but SIE is disabled")

        x = self.ln_pre(x)
        cls_states = [x[:, 0]]
        for i, block in enumerate(self.blocks):
            x = check_finite(block(x), i)
            cls_states.append(x[:, 0])

        img = self.ln_post(cls_states[-1])
        return FeatureBundle(
            pre_img_feature=cls_states[-2],
            img_feature=img,
            post_img_feature=check_finite(self.proj(img), "proj"),
        )


class BasicBlock(nn.Module):
    def __init__(self, in_channels: int, out_channels: int, stride: int):
        super().__init__()
        self.conv1 = nn.Conv2d(in_channels, out_channels, 3, stride=stride, padding=1, bias=False)
        self.bn1 = nn.BatchNorm2d(out_channels)
        self.conv2 = nn.Conv2d(out_channels, out_channels, 3, padding=1, bias=False)
        self.bn2 = nn.BatchNorm2d(out_channels)
        self.downsample = None
        if stride != 1 or in_channels != out_channels:
            self.downsample = nn.Sequential(
                nn.Conv2d(in_channels, out_channels, 1, stride=stride, bias=False),
                nn.BatchNorm2d(out_channels),
            )

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        identity = x if self.downsample is None else self.downsample(x)
        out = F.relu(self.bn1(self.conv1(x)))
        out = self.bn2(self.conv2(out))
        return F.relu(out + identity)


class AttentionPool2d(nn.Module):
    """Single-head attention pooling: the mean token queries the spatial tokens."""

    def __init__(self, channels: int, out_dim: int):
        super().__init__()
        self.q_proj = nn.Linear(channels, channels)
        self.k_proj = nn.Linear(channels, channels)
        self.v_proj = nn.Linear(channels, channels)
        self.c_proj = nn.Linear(channels, out_dim)
        self.scale = channels ** -0.5

    def forward(self, feature_map: torch.Tensor) -> torch.Tensor:
        tokens = rearrange(feature_map, "b c h w -> b (h w) c")
        query = self.q_proj(tokens.mean(dim=1, keepdim=True))
        keys, values = self.k_proj(tokens), self.v_proj(tokens)
        attn = (torch.matmul(query, keys.transpose(-1, -2)) * self.scale).softmax(dim=-1)
        return self.c_proj(torch.matmul(attn, values).squeeze(1))


class ResNetEncoder(nn.Module):
    """Residual stages whose last stage keeps stride 1, followed by attention pooling."""

    def __init__(self, config: ImageEncoderConfig):
        super().__init__()
        self.config = config
        channels = config.cnn_channels
        self.stem = nn.Sequential(
            nn.Conv2d(config.in_channels, channels[0], 3, padding=1, bias=False),
            nn.BatchNorm2d(channels[0]),
            nn.ReLU(inplace=True),
        )
        strides = [1] + [2] * (len(channels) - 2) + [1]
        in_channels = [channels[0], *channels[:-1]]
        self.stages = nn.ModuleList(
            BasicBlock(c_in, c_out, s) for c_in, c_out, s in zip(in_channels, channels, strides, strict=True)
        )
        self.attnpool = AttentionPool2d(channels[-1], config.proj_dim)
        self.attnpool.apply(_init_module)

    def forward(self, images: torch.Tensor, camera_ids: torch.Tensor | None = None) -> FeatureBundle:
        if camera_ids is not None:
            raise ContractError("The CNN encoder does not take camera ids")
        x = self.stem(images)
        maps = []
        for i, stage in enumerate(self.stages):
            x = check_finite(stage(x), i)
            maps.append(x)
        return FeatureBundle(
            pre_img_feature=maps[-2].mean(dim=(2, 3)),
            img_feature=maps[-1].mean(dim=(2, 3)),
            post_img_feature=check_finite(self.attnpool(maps[-1]), "attnpool"),
        )


def build_image_encoder(config: ImageEncoderConfig, sie: SIEConfig | None = None) -> nn.Module:
    if config.variant == "cnn":
        if sie is not None and sie.enabled:
            raise ConfigError("SIE is only defined for the ViT encoder")
        return ResNetEncoder(config)
    return VisionTransformerEncoder(config, sie)


class TextEncoder(nn.Module):
    """Causal transformer over prompt embeddings; the EOS row is the text feature."""

    def __init__(self, config: TextEncoderConfig):
        super().__init__()
        self.config = config
        self.token_embedding = nn.Embedding(config.vocab_size, config.width)
        self.positional_embedding = nn.Parameter(torch.zeros(config.context_length, config.width))
        self.blocks = nn.ModuleList(
            ResidualAttentionBlock(config.width, config.heads) for _ in range(config.depth)
        )
        self.ln_final = nn.LayerNorm(config.width)
        self.text_projection = nn.Linear(config.width, config.proj_dim, bias=False)  # g_T
        nn.init.normal_(self.token_embedding.weight, std=0.02)
        nn.init.normal_(self.positional_embedding, std=0.01)
        self.blocks.apply(_init_module)
        self.text_projection.apply(_init_module)
        self.register_buffer(
            "causal_mask",
            torch.triu(torch.ones(config.context_length, config.context_length, dtype=torch.bool), 1),
            persistent=False,
        )

    def forward(self, prompts: torch.Tensor, eos_positions: torch.Tensor) -> torch.Tensor:
        """
        Args:
            prompts: (B, L, D) prompt embeddings
            eos_positions: (B,) index of EOS per prompt

        Returns:
            (B, proj_dim) projected text features
        """
        length = self.config.context_length
        if prompts.shape[1] != length:
            raise ContractError(f"Prompt has {prompts.shape[1]} rows, expected {length}")
        eos_positions = torch.as_tensor(eos_positions, dtype=torch.long, device=prompts.device).reshape(-1)
        if eos_positions.numel() != prompts.shape[0]:
            raise ContractError("One EOS position is required per prompt")
        if eos_positions.numel() and (eos_positions.min() < 0 or eos_positions.max() >= length):
            raise ContractError(f"EOS position outside [0, {length})")

        x = prompts + self.positional_embedding
        for i, block in enumerate(self.blocks):
            x = check_finite(block(x, self.causal_mask), i)
        eos_rows = x[torch.arange(x.shape[0], device=x.device), eos_positions]
        return self.text_projection(self.ln_final(eos_rows))

    def encode_tokens(self, token_ids: torch.Tensor, eos_positions: torch.Tensor) -> torch.Tensor:
        return self(self.token_embedding(token_ids), eos_positions)


def _check_norms(x: torch.Tensor, name: str) -> torch.Tensor:
    norms = x.norm(dim=-1, keepdim=True)
    if (norms == 0).any():
        raise NumericalError(f"Zero-norm {name} embedding")
    return x / norms


def similarity_matrix(image_features: torch.Tensor, text_features: torch.Tensor,
                      temperature: float = DEFAULT_TEMPERATURE) -> torch.Tensor:
    """τ-scaled cosine similarities, rows = images, columns = text anchors."""
    if image_features.shape[-1] != text_features.shape[-1]:
        raise ContractError(
            f"Feature dims differ: {image_features.shape[-1]} vs {text_features.shape[-1]}"
        )
    v = _check_norms(image_features, "image")
    t = _check_norms(text_features, "text")
    return temperature * v @ t.transpose(-1, -2)


def similarity(v: torch.Tensor, t: torch.Tensor, temperature: float = DEFAULT_TEMPERATURE) -> torch.Tensor:
    """Scalar s(V, T) = τ · V̂ · T̂."""
    return similarity_matrix(v.reshape(1, -1), t.reshape(1, -1), temperature)[0, 0]
