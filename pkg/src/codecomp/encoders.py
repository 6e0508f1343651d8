"""Pluggable feature extractors: dense image backbone, text backbone with a
two-layer attention segmenter head, and the segment-level encoders applied
to highlighted inputs.

Desk-scale defaults are small randomly-initialized transformers so the
whole pipeline runs on CPU; a pretrained vision-language backbone can be
swapped in behind the same bundle interface.
"""

from dataclasses import dataclass, field

import torch
import torch.nn as nn
import torch.nn.functional as F

from . import tokenizer


@dataclass
class EncoderConfig:
    embed_dim: int = 32
    patch_size: int = 4
    image_size: int = 32
    depth: int = 4
    heads: int = 4
    mlp_ratio: float = 2.0
    max_text_len: int = 32
    segment_depth: int = 2
    vocab_size: int = field(default_factory=tokenizer.vocab_size)

    def to_dict(self):
        return dict(self.__dict__)


class TransformerBlock(nn.Module):
    def __init__(self, dim, heads, mlp_ratio):
        super().__init__()
        self.norm1 = nn.LayerNorm(dim)
        self.attn = nn.MultiheadAttention(dim, heads, batch_first=True)
        self.norm2 = nn.LayerNorm(dim)
        hidden = int(dim * mlp_ratio)
        self.mlp = nn.Sequential(nn.Linear(dim, hidden), nn.GELU(), nn.Linear(hidden, dim))

    def forward(self, x, key_padding_mask=None):
        h = self.norm1(x)
        attn_out, _ = self.attn(h, h, h, key_padding_mask=key_padding_mask,
                                need_weights=False)
        x = x + attn_out
        x = x + self.mlp(self.norm2(x))
        return x


class VisionBackbone(nn.Module):
    """Patch-embedding transformer producing a dense H' x W' x C feature map."""

    def __init__(self, cfg):
        super().__init__()
        self.patch_size = cfg.patch_size
        self.embed_dim = cfg.embed_dim
        self.patch_embed = nn.Conv2d(3, cfg.embed_dim, kernel_size=cfg.patch_size,
                                     stride=cfg.patch_size)
        n_patches = (cfg.image_size // cfg.patch_size) ** 2
        self.pos_embed = nn.Parameter(torch.zeros(1, n_patches, cfg.embed_dim))
        nn.init.trunc_normal_(self.pos_embed, std=0.02)
        self.blocks = nn.ModuleList(
            TransformerBlock(cfg.embed_dim, cfg.heads, cfg.mlp_ratio)
            for _ in range(cfg.depth)
        )
        self.norm = nn.LayerNorm(cfg.embed_dim)

    def _interp_pos(self, n_h, n_w):
        n = self.pos_embed.shape[1]
        side = int(round(n ** 0.5))
        if side * side == n and (n_h, n_w) == (side, side):
            return self.pos_embed
        pos = self.pos_embed.reshape(1, side, side, -1).permute(0, 3, 1, 2)
        pos = F.interpolate(pos, size=(n_h, n_w), mode="bilinear", align_corners=False)
        return pos.permute(0, 2, 3, 1).reshape(1, n_h * n_w, -1)

    def forward(self, images):
        """images: B x H x W x 3 in [0,1]-ish. Returns B x H' x W' x C."""
        H, W = images.shape[1], images.shape[2]
        if H % self.patch_size or W % self.patch_size:
            raise ValueError("image dims (%d, %d) not divisible by patch %d"
                             % (H, W, self.patch_size))
        x = images.permute(0, 3, 1, 2)
        x = self.patch_embed(x)  # B x C x H' x W'
        n_h, n_w = x.shape[2], x.shape[3]
        x = x.flatten(2).transpose(1, 2)  # B x N x C
        x = x + self._interp_pos(n_h, n_w)
        for blk in self.blocks:
            x = blk(x)
        x = self.norm(x)
        return x.reshape(x.shape[0], n_h, n_w, self.embed_dim)


class TextBackbone(nn.Module):
    """Token transformer over padded id sequences; pad positions are inert."""

    def __init__(self, cfg):
        super().__init__()
        self.embed_dim = cfg.embed_dim
        self.max_text_len = cfg.max_text_len
        self.token_embed = nn.Embedding(cfg.vocab_size, cfg.embed_dim,
                                        padding_idx=tokenizer.PAD_ID)
        self.pos_embed = nn.Parameter(torch.zeros(1, cfg.max_text_len, cfg.embed_dim))
        nn.init.trunc_normal_(self.pos_embed, std=0.02)
        self.blocks = nn.ModuleList(
            TransformerBlock(cfg.embed_dim, cfg.heads, cfg.mlp_ratio)
            for _ in range(cfg.depth)
        )
        self.norm = nn.LayerNorm(cfg.embed_dim)

    def forward_embeddings(self, emb, pad_mask):
        """emb: B x L x C, pad_mask: B x L bool (True at pads)."""
        L = emb.shape[1]
        if L > self.max_text_len:
            raise ValueError("sequence length %d exceeds max %d" % (L, self.max_text_len))
        x = emb + self.pos_embed[:, :L]
        for blk in self.blocks:
            x = blk(x, key_padding_mask=pad_mask)
        x = self.norm(x)
        return x.masked_fill(pad_mask.unsqueeze(-1), 0.0)

    def forward(self, token_ids, pad_mask):
        return self.forward_embeddings(self.token_embed(token_ids), pad_mask)

    def pool(self, features, pad_mask):
        """Mean over unpadded positions; B x L x C -> B x C."""
        keep = (~pad_mask).unsqueeze(-1).to(features.dtype)
        counts = keep.sum(dim=1).clamp(min=1.0)
        return (features * keep).sum(dim=1) / counts


class TextSegmenterHead(nn.Module):
    """Two learnable multi-head attention layers appended to the text backbone."""

    def __init__(self, cfg):
        super().__init__()
        self.blocks = nn.ModuleList(
            TransformerBlock(cfg.embed_dim, cfg.heads, cfg.mlp_ratio)
            for _ in range(2)
        )
        self.norm = nn.LayerNorm(cfg.embed_dim)

    def forward(self, features, pad_mask):
        x = features
        for blk in self.blocks:
            x = blk(x, key_padding_mask=pad_mask)
        x = self.norm(x)
        return x.masked_fill(pad_mask.unsqueeze(-1), 0.0)


class SegmentImageEncoder(nn.Module):
    """Re-encodes a highlighted image into a unit-norm segment embedding."""

    def __init__(self, cfg):
        super().__init__()
        self.backbone = VisionBackbone(cfg)
        self.proj = nn.Linear(cfg.embed_dim, cfg.embed_dim)

    def forward(self, images):
        if not torch.isfinite(images).all():
            raise ValueError("non-finite highlighted image")
        feats = self.backbone(images)  # B x H' x W' x C
        pooled = feats.mean(dim=(1, 2))
        return F.normalize(self.proj(pooled), dim=-1)


class SegmentTextEncoder(nn.Module):
    """Encodes a highlighted token-embedding sequence into a unit-norm vector."""

    def __init__(self, cfg):
        super().__init__()
        self.pos_embed = nn.Parameter(torch.zeros(1, cfg.max_text_len, cfg.embed_dim))
        nn.init.trunc_normal_(self.pos_embed, std=0.02)
        self.blocks = nn.ModuleList(
            TransformerBlock(cfg.embed_dim, cfg.heads, cfg.mlp_ratio)
            for _ in range(cfg.segment_depth)
        )
        self.norm = nn.LayerNorm(cfg.embed_dim)
        self.proj = nn.Linear(cfg.embed_dim, cfg.embed_dim)

    def forward(self, highlighted, pad_mask):
        """highlighted: B x L x C, pad_mask: B x L bool."""
        if not torch.isfinite(highlighted).all():
            raise ValueError("non-finite highlighted text")
        x = highlighted + self.pos_embed[:, : highlighted.shape[1]]
        for blk in self.blocks:
            x = blk(x, key_padding_mask=pad_mask)
        x = self.norm(x)
        keep = (~pad_mask).unsqueeze(-1).to(x.dtype)
        counts = keep.sum(dim=1).clamp(min=1.0)
        pooled = (x * keep).sum(dim=1) / counts
        return F.normalize(self.proj(pooled), dim=-1)


class EncoderBundle(nn.Module):
    """All feature extractors plus their frozen/trainable bookkeeping."""

    def __init__(self, cfg):
        super().__init__()
        self.cfg = cfg
        self.image_backbone = VisionBackbone(cfg)
        self.text_backbone = TextBackbone(cfg)
        self.text_segmenter_head = TextSegmenterHead(cfg)
        self.segment_image_encoder = SegmentImageEncoder(cfg)
        self.segment_text_encoder = SegmentTextEncoder(cfg)

    def set_frozen(self, image_backbone=False, text_backbone=False):
        for p in self.image_backbone.parameters():
            p.requires_grad_(not image_backbone)
        for p in self.text_backbone.parameters():
            p.requires_grad_(not text_backbone)

    def trainable_parameter_names(self):
        return sorted(n for n, p in self.named_parameters() if p.requires_grad)

    def parameter_count(self):
        return sum(p.numel() for p in self.parameters())


def build_bundle(cfg, seed=0, dtype=torch.float32):
    """Deterministically initialized bundle for a given seed."""
    torch.manual_seed(seed)
    bundle = EncoderBundle(cfg)
    return bundle.to(dtype)


def embed_pixels(bundle, image_tensor):
    """Dense pixel-wise embedding of one image (H x W x 3 -> H' x W' x C)."""
    out = bundle.image_backbone(image_tensor.unsqueeze(0))[0]
    return out


def embed_words(bundle, token_ids, pad_mask):
    """Word-wise features: backbone plus the two-layer segmenter head (L x C)."""
    feats = bundle.text_backbone(token_ids.unsqueeze(0), pad_mask.unsqueeze(0))
    feats = bundle.text_segmenter_head(feats, pad_mask.unsqueeze(0))
    return feats[0]


def encode_segment_image(bundle, highlighted):
    return bundle.segment_image_encoder(highlighted.unsqueeze(0))[0]


def encode_segment_text(bundle, highlighted, pad_mask):
    return bundle.segment_text_encoder(highlighted.unsqueeze(0), pad_mask.unsqueeze(0))[0]
