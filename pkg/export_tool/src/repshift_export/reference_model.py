"""Tiny reference ViT in torch, matching the engine's compute contract.

Pre-norm blocks (x += attn(LN(x)); x += mlp(LN(x))), fused qkv projection
with timm-style head slicing, tanh-approximated GELU, LayerNorm eps 1e-6,
classification from the class token or the mean-pooled final tokens.
"""

from __future__ import annotations

from dataclasses import dataclass, asdict

import torch
import torch.nn as nn


@dataclass(frozen=True)
class RefVitConfig:
    image_size: tuple[int, int] = (16, 16)
    patch_size: int = 4
    depth: int = 2
    width: int = 32
    heads: int = 4
    num_classes: int = 2
    use_class_token: bool = True
    qkv_bias: bool = True
    ln_eps: float = 1e-6

    def __post_init__(self):
        object.__setattr__(self, "image_size", tuple(self.image_size))
        h, w = self.image_size
        if h % self.patch_size or w % self.patch_size:
            raise ValueError("image size must be divisible by patch size")
        if self.width % self.heads:
            raise ValueError("width must be divisible by heads")
        if not (1 <= self.depth <= 4):
            raise ValueError("reference model depth must be in [1, 4]")
        if self.num_classes < 1:
            raise ValueError("num_classes must be >= 1")

    @property
    def num_patches(self) -> int:
        h, w = self.image_size
        return (h // self.patch_size) * (w // self.patch_size)

    @property
    def seq_len(self) -> int:
        return self.num_patches + (1 if self.use_class_token else 0)

    def engine_config(self) -> dict:
        d = asdict(self)
        d.pop("qkv_bias")
        d["kind"] = "vit"
        d["image_size"] = list(self.image_size)
        return d


class Attention(nn.Module):
    def __init__(self, cfg: RefVitConfig):
        super().__init__()
        c = cfg.width
        self.heads = cfg.heads
        self.head_dim = c // cfg.heads
        self.qkv = nn.Linear(c, 3 * c, bias=cfg.qkv_bias)
        self.proj = nn.Linear(c, c, bias=True)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        b, n, c = x.shape
        qkv = self.qkv(x).reshape(b, n, 3, self.heads, self.head_dim)
        qkv = qkv.permute(2, 0, 3, 1, 4)  # (3, B, H, N, d)
        q, k, v = qkv[0], qkv[1], qkv[2]
        attn = (q @ k.transpose(-2, -1)) * self.head_dim ** -0.5
        attn = attn.softmax(dim=-1)
        out = (attn @ v).transpose(1, 2).reshape(b, n, c)
        return self.proj(out)


class Block(nn.Module):
    def __init__(self, cfg: RefVitConfig):
        super().__init__()
        c = cfg.width
        self.norm1 = nn.LayerNorm(c, eps=cfg.ln_eps)
        self.attn = Attention(cfg)
        self.norm2 = nn.LayerNorm(c, eps=cfg.ln_eps)
        self.mlp = nn.Sequential(
            nn.Linear(c, 4 * c),
            nn.GELU(approximate="tanh"),
            nn.Linear(4 * c, c),
        )

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        x = x + self.attn(self.norm1(x))
        x = x + self.mlp(self.norm2(x))
        return x


class ReferenceVit(nn.Module):
    def __init__(self, cfg: RefVitConfig):
        super().__init__()
        self.cfg = cfg
        c = cfg.width
        self.patch_embed = nn.Conv2d(3, c, kernel_size=cfg.patch_size,
                                     stride=cfg.patch_size)
        if cfg.use_class_token:
            self.cls_token = nn.Parameter(torch.zeros(1, 1, c))
        self.pos_embed = nn.Parameter(torch.zeros(1, cfg.seq_len, c))
        self.blocks = nn.ModuleList(Block(cfg) for _ in range(cfg.depth))
        self.norm = nn.LayerNorm(c, eps=cfg.ln_eps)
        self.head = nn.Linear(c, cfg.num_classes)
        self._init_weights()

    def _init_weights(self):
        nn.init.trunc_normal_(self.pos_embed, std=0.02)
        if self.cfg.use_class_token:
            nn.init.trunc_normal_(self.cls_token, std=0.02)
        for module in self.modules():
            if isinstance(module, nn.Linear):
                nn.init.trunc_normal_(module.weight, std=0.02)
                if module.bias is not None:
                    nn.init.zeros_(module.bias)

    def forward(self, images: torch.Tensor) -> torch.Tensor:
        """images: (B, H, W, 3) float32 in the engine's channel-last layout."""
        x = images.permute(0, 3, 1, 2)
        x = self.patch_embed(x)               # (B, C, gh, gw)
        x = x.flatten(2).transpose(1, 2)      # (B, N, C), row-major patches
        if self.cfg.use_class_token:
            cls = self.cls_token.expand(x.shape[0], -1, -1)
            x = torch.cat([cls, x], dim=1)
        x = x + self.pos_embed
        for block in self.blocks:
            x = block(x)
        x = self.norm(x)
        pooled = x[:, 0] if self.cfg.use_class_token else x.mean(dim=1)
        return self.head(pooled)


def save_checkpoint(model: ReferenceVit, path) -> None:
    torch.save({"config": asdict(model.cfg),
                "state_dict": model.state_dict()}, path)


def load_checkpoint(path) -> tuple[RefVitConfig, dict]:
    blob = torch.load(path, map_location="cpu", weights_only=True)
    cfg = RefVitConfig(**blob["config"])
    return cfg, blob["state_dict"]
