"""Miniature CLIP-style dual encoder.

Image side: a ViT with a CLS token, configurable patch stride (overlapping
patches when ``stride < patch``) and an optional camera embedding, or a small
residual CNN closed by attention pooling. Text side: a causal transformer whose
EOS row is layer-normalized and projected into the joint space.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import NamedTuple, Optional

import torch
import torch.nn.functional as F
from torch import nn

from .errors import CameraRangeError, ConfigError, ContractError, NumericalError

DEFAULT_TAU = 1.0 / 0.07


@dataclass(frozen=True)
class ImageEncoderConfig:
    variant: str = "vit"
    image_hw: tuple = (32, 32)
    in_chans: int = 3
    patch: int = 8
    stride: int = 8
    depth: int = 2
    width: int = 64
    heads: int = 4
    cnn_channels: tuple = (16, 32, 64, 128)
    proj_dim: int = 32
    dropout: float = 0.0

    def __post_init__(self):
        if self.variant not in ("vit", "cnn"):
            raise ConfigError(f"unknown image encoder variant {self.variant!r}")
        H, W = self.image_hw
        if self.variant == "vit":
            check_patch_config(H, W, self.patch, self.stride)
            if self.width % self.heads:
                raise ConfigError("heads must divide width")
            if self.depth < 1:
                raise ConfigError("vit depth must be >= 1")
        else:
            if len(self.cnn_channels) != 4:
                raise ConfigError("cnn channel plan needs 4 stages")
            if H % 4 or W % 4:
                raise ConfigError("cnn input sides must be divisible by 4")
        if self.proj_dim < 1:
            raise ConfigError("proj_dim must be positive")

    @property
    def backbone_dim(self) -> int:
        return self.width if self.variant == "vit" else self.cnn_channels[3]

    @property
    def pre_dim(self) -> int:
        return self.width if self.variant == "vit" else self.cnn_channels[2]


@dataclass(frozen=True)
class TextEncoderConfig:
    ctx_len: int = 16
    vocab_size: int = 64
    width: int = 64
    depth: int = 2
    heads: int = 4
    proj_dim: int = 32
    causal: bool = field(default=True, init=False)

    def __post_init__(self):
        if self.width % self.heads:
            raise ConfigError("heads must divide width")
        if self.depth < 0 or self.ctx_len < 2 or self.vocab_size < 3:
            raise ConfigError("invalid text encoder dims")


@dataclass(frozen=True)
class SIEConfig:
    enabled: bool = False
    num_cameras: int = 1
    lambda_sie: float = 1.0
    apply_to: str = "cls_only"

    def __post_init__(self):
        if self.apply_to not in ("cls_only", "all_tokens"):
            raise ConfigError(f"unknown SIE placement {self.apply_to!r}")
        if not math.isfinite(self.lambda_sie) or self.lambda_sie < 0:
            raise ConfigError("lambda_sie must be finite and non-negative")
        if self.num_cameras < 1:
            raise ConfigError("num_cameras must be positive")


class FeatureBundle(NamedTuple):
    pre: torch.Tensor
    img: torch.Tensor
    post: torch.Tensor


def check_patch_config(H: int, W: int, patch: int, stride: int) -> None:
    if patch < 1 or stride < 1 or stride > patch:
        raise ConfigError(f"need 1 <= stride <= patch, got patch={patch} stride={stride}")
    if H < patch or W < patch or (H - patch) % stride or (W - patch) % stride:
        raise ConfigError(f"image {H}x{W} cannot be tiled by patch {patch} stride {stride}")


def num_patch_tokens(H: int, W: int, patch: int, stride: int) -> int:
    check_patch_config(H, W, patch, stride)
    return ((H - patch) // stride + 1) * ((W - patch) // stride + 1)


def _check_finite(x, layer):
    if not torch.isfinite(x).all():
        raise NumericalError(f"non-finite activation after layer {layer}", layer=layer)


class ResidualAttentionBlock(nn.Module):
    def __init__(self, width: int, heads: int, dropout: float = 0.0):
        super().__init__()
        self.ln_1 = nn.LayerNorm(width)
        self.attn = nn.MultiheadAttention(width, heads, dropout=dropout, batch_first=True)
        self.ln_2 = nn.LayerNorm(width)
        self.mlp = nn.Sequential(nn.Linear(width, 4 * width), nn.GELU(), nn.Linear(4 * width, width))

    def forward(self, x, attn_mask=None):
        h = self.ln_1(x)
        x = x + self.attn(h, h, h, need_weights=False, attn_mask=attn_mask)[0]
        return x + self.mlp(self.ln_2(x))


def add_sie(tokens: torch.Tensor, camera_ids: torch.Tensor, table: torch.Tensor,
            sie: SIEConfig) -> torch.Tensor:
    """Add ``lambda_sie * table[cam]`` to the CLS row, or to every row."""
    cams = torch.as_tensor(camera_ids, dtype=torch.long).reshape(-1)
    if cams.numel() and (int(cams.min()) < 0 or int(cams.max()) >= sie.num_cameras):
        raise CameraRangeError(f"camera id outside [0, {sie.num_cameras})")
    if sie.lambda_sie == 0:
        return tokens
    offset = sie.lambda_sie * table[cams].to(tokens.dtype)
    if sie.apply_to == "all_tokens":
        return tokens + offset[:, None, :]
    return torch.cat([tokens[:, :1] + offset[:, None, :], tokens[:, 1:]], dim=1)


class VisionTransformer(nn.Module):
    def __init__(self, cfg: ImageEncoderConfig, sie: Optional[SIEConfig] = None):
        super().__init__()
        self.cfg = cfg
        self.sie = sie or SIEConfig()
        H, W = cfg.image_hw
        n_tok = num_patch_tokens(H, W, cfg.patch, cfg.stride)
        w = cfg.width
        self.conv1 = nn.Conv2d(cfg.in_chans, w, kernel_size=cfg.patch, stride=cfg.stride, bias=False)
        self.class_embedding = nn.Parameter(torch.randn(w) * w ** -0.5)
        # re-initialised for every (patch, stride): no pretrained grid to interpolate
        self.positional_embedding = nn.Parameter(torch.randn(n_tok + 1, w) * w ** -0.5)
        if self.sie.enabled:
            self.sie_embed = nn.Parameter(torch.zeros(self.sie.num_cameras, w))
            nn.init.trunc_normal_(self.sie_embed, std=0.02)
        self.ln_pre = nn.LayerNorm(w)
        self.blocks = nn.ModuleList(ResidualAttentionBlock(w, cfg.heads, cfg.dropout)
                                    for _ in range(cfg.depth))
        self.ln_post = nn.LayerNorm(w)
        self.proj = nn.Linear(w, cfg.proj_dim)  # g_V

    def patch_embed(self, x: torch.Tensor) -> torch.Tensor:
        """``B x C x H x W`` -> ``B x (T_tok + 1) x width`` with CLS first and positions added."""
        if tuple(x.shape[-2:]) != tuple(self.cfg.image_hw):
            raise ConfigError(f"image size {tuple(x.shape[-2:])} != {self.cfg.image_hw}")
        t = self.conv1(x).flatten(2).transpose(1, 2)
        cls = self.class_embedding.to(t.dtype).expand(t.shape[0], 1, -1)
        return torch.cat([cls, t], dim=1) + self.positional_embedding.to(t.dtype)

    def forward(self, x: torch.Tensor, camera_ids=None) -> FeatureBundle:
        tokens = self.patch_embed(x)
        if self.sie.enabled:
            if camera_ids is None:
                raise ContractError("camera ids are required when SIE is enabled")
            tokens = add_sie(tokens, camera_ids, self.sie_embed, self.sie)
        h = self.ln_pre(tokens)
        pre = h[:, 0]
        for i, blk in enumerate(self.blocks):
            h = blk(h)
            _check_finite(h, i)
            if i == len(self.blocks) - 2:
                pre = h[:, 0]
        img = self.ln_post(h[:, 0])
        return FeatureBundle(pre, img, self.proj(img))


class _BasicBlock(nn.Module):
    def __init__(self, cin, cout, stride):
        super().__init__()
        self.conv1 = nn.Conv2d(cin, cout, 3, stride, 1, bias=False)
        self.bn1 = nn.BatchNorm2d(cout)
        self.conv2 = nn.Conv2d(cout, cout, 3, 1, 1, bias=False)
        self.bn2 = nn.BatchNorm2d(cout)
        self.down = None
        if stride != 1 or cin != cout:
            self.down = nn.Sequential(nn.Conv2d(cin, cout, 1, stride, bias=False), nn.BatchNorm2d(cout))

    def forward(self, x):
        out = F.relu(self.bn1(self.conv1(x)))
        out = self.bn2(self.conv2(out))
        return F.relu(out + (x if self.down is None else self.down(x)))


class AttentionPool(nn.Module):
    """Single-head attention pooling: the mean token queries the spatial tokens."""

    def __init__(self, n_spatial: int, dim: int, out_dim: int):
        super().__init__()
        self.positional_embedding = nn.Parameter(torch.randn(n_spatial + 1, dim) / dim ** 0.5)
        self.q_proj = nn.Linear(dim, dim)
        self.k_proj = nn.Linear(dim, dim)
        self.v_proj = nn.Linear(dim, dim)
        self.c_proj = nn.Linear(dim, out_dim)

    def forward(self, fmap: torch.Tensor) -> torch.Tensor:
        tokens = fmap.flatten(2).transpose(1, 2)
        pos = self.positional_embedding.to(tokens.dtype)
        query = tokens.mean(dim=1, keepdim=True) + pos[:1]
        keys = tokens + pos[1:]
        q, k, v = self.q_proj(query), self.k_proj(keys), self.v_proj(keys)
        attn = torch.softmax(q @ k.transpose(1, 2) / math.sqrt(q.shape[-1]), dim=-1)
        return self.c_proj((attn @ v)[:, 0])


class ResNetLite(nn.Module):
    """Four residual stages with strides (1, 2, 2, 1); the last stride stays 1."""

    def __init__(self, cfg: ImageEncoderConfig):
        super().__init__()
        self.cfg = cfg
        c1, c2, c3, c4 = cfg.cnn_channels
        self.stem = nn.Sequential(nn.Conv2d(cfg.in_chans, c1, 3, 1, 1, bias=False),
                                  nn.BatchNorm2d(c1), nn.ReLU())
        self.layers = nn.ModuleList([_BasicBlock(c1, c1, 1), _BasicBlock(c1, c2, 2),
                                     _BasicBlock(c2, c3, 2), _BasicBlock(c3, c4, 1)])
        H, W = cfg.image_hw
        self.attnpool = AttentionPool((H // 4) * (W // 4), c4, cfg.proj_dim)

    def forward(self, x: torch.Tensor, camera_ids=None) -> FeatureBundle:
        if tuple(x.shape[-2:]) != tuple(self.cfg.image_hw):
            raise ConfigError(f"image size {tuple(x.shape[-2:])} != {self.cfg.image_hw}")
        h = self.stem(x)
        pre = None
        for i, layer in enumerate(self.layers):
            h = layer(h)
            _check_finite(h, i)
            if i == 2:
                pre = h.mean(dim=(2, 3))
        img = h.mean(dim=(2, 3))
        return FeatureBundle(pre, img, self.attnpool(h))


def build_image_encoder(cfg: ImageEncoderConfig, sie: Optional[SIEConfig] = None) -> nn.Module:
    if cfg.variant == "vit":
        return VisionTransformer(cfg, sie)
    if sie is not None and sie.enabled:
        raise ConfigError("SIE is only defined for the vit encoder")
    return ResNetLite(cfg)


class TextTransformer(nn.Module):
    def __init__(self, cfg: TextEncoderConfig):
        super().__init__()
        self.cfg = cfg
        self.token_embedding = nn.Embedding(cfg.vocab_size, cfg.width)
        nn.init.normal_(self.token_embedding.weight, std=0.02)
        self.positional_embedding = nn.Parameter(torch.randn(cfg.ctx_len, cfg.width) * 0.01)
        self.blocks = nn.ModuleList(ResidualAttentionBlock(cfg.width, cfg.heads)
                                    for _ in range(cfg.depth))
        self.ln_final = nn.LayerNorm(cfg.width)
        self.proj = nn.Linear(cfg.width, cfg.proj_dim)  # g_T
        mask = torch.full((cfg.ctx_len, cfg.ctx_len), float("-inf")).triu(1)
        self.register_buffer("causal_mask", mask, persistent=False)

    def forward(self, prompts: torch.Tensor, eos_position) -> torch.Tensor:
        """Encode ``B x L x D`` prompt embeddings, reading the row at ``eos_position``."""
        single = prompts.dim() == 2
        if single:
            prompts = prompts.unsqueeze(0)
        B, L, _ = prompts.shape
        if L != self.cfg.ctx_len:
            raise ContractError(f"prompt has {L} rows, expected {self.cfg.ctx_len}")
        eos = torch.as_tensor(eos_position, dtype=torch.long).reshape(-1).expand(B)
        if int(eos.min()) < 0 or int(eos.max()) >= L:
            raise ContractError("eos_position out of range")
        x = prompts + self.positional_embedding.to(prompts.dtype)
        mask = self.causal_mask.to(prompts.dtype)
        for i, blk in enumerate(self.blocks):
            x = blk(x, attn_mask=mask)
            _check_finite(x, i)
        out = self.proj(self.ln_final(x[torch.arange(B), eos]))
        return out[0] if single else out


class DualEncoder(nn.Module):
    """Image encoder + text encoder sharing a joint space of ``proj_dim``."""

    def __init__(self, image_cfg: ImageEncoderConfig, text_cfg: TextEncoderConfig,
                 sie: Optional[SIEConfig] = None, eos_id: int = 2):
        super().__init__()
        if image_cfg.proj_dim != text_cfg.proj_dim:
            raise ConfigError("image and text proj_dim differ")
        self.image = build_image_encoder(image_cfg, sie)
        self.text = TextTransformer(text_cfg)
        self.eos_id = eos_id

    def encode_image(self, images, camera_ids=None) -> FeatureBundle:
        return self.image(images, camera_ids)

    def encode_text(self, prompts, eos_position) -> torch.Tensor:
        return self.text(prompts, eos_position)

    def encode_token_ids(self, token_ids: torch.Tensor) -> torch.Tensor:
        eos = (token_ids == self.eos_id).int().argmax(dim=-1)
        return self.text(self.text.token_embedding(token_ids), eos)


def l2_normalize(x: torch.Tensor, dim: int = -1) -> torch.Tensor:
    norm = x.norm(dim=dim, keepdim=True)
    if (norm == 0).any():
        raise NumericalError("cannot normalize a zero-norm vector")
    return x / norm


def similarity(V: torch.Tensor, T: torch.Tensor, tau: float = DEFAULT_TAU) -> torch.Tensor:
    """``tau * cos(V, T)`` for two vectors of equal dimension."""
    if V.shape[-1] != T.shape[-1]:
        raise ContractError("similarity needs vectors of equal dimension")
    return tau * (l2_normalize(V) * l2_normalize(T)).sum(-1)


def similarity_matrix(V: torch.Tensor, T: torch.Tensor, tau: float = DEFAULT_TAU) -> torch.Tensor:
    """Rows index images, columns index text anchors."""
    if V.shape[-1] != T.shape[-1]:
        raise ContractError("similarity needs vectors of equal dimension")
    return tau * l2_normalize(V) @ l2_normalize(T).transpose(-1, -2)
