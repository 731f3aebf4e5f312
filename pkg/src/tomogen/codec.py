"""Causal spatiotemporal transformer autoencoder with vector quantization.

Volumes are patched slice-wise (the first axial slice on its own, the
remaining slices in groups of ``p_t``), embedded, passed through an
all-to-all spatial transformer within each axial token layer and a
strictly causal transformer along the axial axis, then snapped to the
nearest codebook entry. The decoder mirrors the encoder. The causal
mask gives the defining property: encoding an axial prefix equals the
prefix of the full encoding.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn.functional as F
from einops import rearrange
from torch import nn

from .phantoms import Volume
from .util import hu_to_model, model_to_hu


@dataclass(frozen=True)
class PatchConfig:
    """Patch sizes and latent width; owns the token-grid shape arithmetic."""

    p1: int = 8
    p2: int = 8
    p_t: int = 2
    latent_dim: int = 64

    def __post_init__(self):
        for name in ("p1", "p2", "p_t", "latent_dim"):
            v = getattr(self, name)
            if int(v) != v or v < 1:
                raise ValueError(f"PatchConfig.{name} must be a positive integer, got {v}")

    def validate_shape(self, shape) -> tuple[int, int, int]:
        z, h, w = (int(d) for d in shape)
        if h % self.p1 != 0:
            raise ValueError(f"H={h} is not divisible by p1={self.p1}")
        if w % self.p2 != 0:
            raise ValueError(f"W={w} is not divisible by p2={self.p2}")
        if (z - 1) % self.p_t != 0:
            raise ValueError(f"Z-1={z - 1} is not divisible by p_t={self.p_t}")
        return z, h, w

    def token_shape(self, shape) -> tuple[int, int, int]:
        z, h, w = self.validate_shape(shape)
        return 1 + (z - 1) // self.p_t, h // self.p1, w // self.p2

    def volume_shape(self, token_shape) -> tuple[int, int, int]:
        t, r, c = (int(d) for d in token_shape)
        return 1 + (t - 1) * self.p_t, r * self.p1, c * self.p2


@dataclass
class TokenGrid:
    """Discrete latent: codebook ids plus the pre-quantization embeddings."""

    ids: torch.Tensor  # (T, R, C) long
    embeddings: torch.Tensor  # (T, R, C, D)

    @property
    def shape(self) -> tuple[int, int, int]:
        return tuple(self.ids.shape)


@dataclass(frozen=True)
class CodecConfig:
    patch: PatchConfig = field(default_factory=PatchConfig)
    codebook_size: int = 1024
    beta: float = 0.25
    spatial_layers: int = 2
    causal_layers: int = 2
    heads: int = 4
    mlp_ratio: int = 4
    max_axial_tokens: int = 128
    max_rows: int = 32
    max_cols: int = 32
    reseed_after: int = 256

    def to_dict(self) -> dict:
        d = dict(vars(self))
        d["patch"] = dict(vars(self.patch))
        return d

    @staticmethod
    def from_dict(d: dict) -> "CodecConfig":
        d = dict(d)
        d["patch"] = PatchConfig(**d["patch"])
        return CodecConfig(**d)


def nearest_codebook_ids(embeddings: torch.Tensor, entries: torch.Tensor) -> torch.Tensor:
    """L2-nearest entry per row, ties broken by lowest index.

    Distances use the explicit (e - c)^2 expansion per entry so exact ties
    stay exact; computed in chunks to bound memory.
    """
    if entries.shape[0] < 1:
        raise ValueError("codebook is empty")
    out = torch.empty(embeddings.shape[0], dtype=torch.long)
    for start in range(0, embeddings.shape[0], 4096):
        chunk = embeddings[start : start + 4096]
        d2 = (chunk[:, None, :] - entries[None, :, :]).pow(2).sum(-1)
        out[start : start + 4096] = torch.argmin(d2, dim=1)
    return out


def quantize(embeddings: torch.Tensor, entries: torch.Tensor, beta: float = 0.25):
    """Snap embeddings to nearest codebook entries with straight-through gradients.

    Returns (ids, quantized, terms) where quantized carries the pass-through
    gradient and terms holds the codebook / commitment losses.
    """
    if not torch.isfinite(embeddings).all():
        raise ValueError("embeddings contain non-finite values")
    flat = embeddings.reshape(-1, embeddings.shape[-1])
    ids = nearest_codebook_ids(flat.detach(), entries.detach())
    selected = entries[ids].reshape(embeddings.shape)
    terms = {
        "codebook": F.mse_loss(selected, embeddings.detach()),
        "commitment": F.mse_loss(embeddings, selected.detach()),
        "beta": beta,
    }
    quantized = embeddings + (selected - embeddings).detach()
    return ids.reshape(embeddings.shape[:-1]), quantized, terms


class VectorQuantizer(nn.Module):
    def __init__(self, codebook_size: int, dim: int, beta: float = 0.25, reseed_after: int = 256):
        super().__init__()
        if codebook_size < 2:
            raise ValueError(f"codebook needs K >= 2, got {codebook_size}")
        self.beta = beta
        self.reseed_after = reseed_after
        self.entries = nn.Parameter(torch.randn(codebook_size, dim) / dim**0.5)
        self.register_buffer("usage_counts", torch.zeros(codebook_size, dtype=torch.long))
        self.register_buffer("steps_since_use", torch.zeros(codebook_size, dtype=torch.long))

    def forward(self, embeddings: torch.Tensor):
        ids, quantized, terms = quantize(embeddings, self.entries, self.beta)
        return ids, quantized, terms

    def record_usage(self, ids: torch.Tensor) -> None:
        used = torch.bincount(ids.reshape(-1), minlength=self.entries.shape[0])
        self.usage_counts += used
        self.steps_since_use += 1
        self.steps_since_use[used > 0] = 0

    @torch.no_grad()
    def reseed_dead(self, batch_embeddings: torch.Tensor, generator: torch.Generator) -> int:
        """Re-seed entries unused for `reseed_after` consecutive steps from the batch."""
        dead = torch.nonzero(self.steps_since_use >= self.reseed_after).flatten()
        if dead.numel() == 0:
            return 0
        flat = batch_embeddings.reshape(-1, batch_embeddings.shape[-1])
        pick = torch.randint(0, flat.shape[0], (dead.numel(),), generator=generator)
        self.entries[dead] = flat[pick]
        self.steps_since_use[dead] = 0
        return int(dead.numel())


class TransformerBlock(nn.Module):
    """Pre-LN block: self-attention (optionally masked) + MLP."""

    def __init__(self, dim: int, heads: int, mlp_ratio: int = 4):
        super().__init__()
        self.norm1 = nn.LayerNorm(dim)
        self.attn = nn.MultiheadAttention(dim, heads, batch_first=True)
        self.norm2 = nn.LayerNorm(dim)
        self.mlp = nn.Sequential(
            nn.Linear(dim, mlp_ratio * dim), nn.GELU(), nn.Linear(mlp_ratio * dim, dim)
        )

    def forward(self, x, attn_mask=None):
        h = self.norm1(x)
        h, _ = self.attn(h, h, h, attn_mask=attn_mask, need_weights=False)
        x = x + h
        return x + self.mlp(self.norm2(x))


def causal_mask(n: int) -> torch.Tensor:
    # True marks disallowed (strictly future) positions
    return torch.triu(torch.ones(n, n, dtype=torch.bool), diagonal=1)


class VolumeCodec(nn.Module):
    def __init__(self, cfg: CodecConfig):
        super().__init__()
        self.cfg = cfg
        p = cfg.patch
        d = p.latent_dim
        self.first_patch = nn.Linear(p.p1 * p.p2, d)
        self.rest_patch = nn.Linear(p.p_t * p.p1 * p.p2, d)
        self.enc_axial_pos = nn.Parameter(torch.zeros(cfg.max_axial_tokens, d))
        self.enc_row_pos = nn.Parameter(torch.zeros(cfg.max_rows, d))
        self.enc_col_pos = nn.Parameter(torch.zeros(cfg.max_cols, d))
        self.enc_spatial = nn.ModuleList(
            TransformerBlock(d, cfg.heads, cfg.mlp_ratio) for _ in range(cfg.spatial_layers)
        )
        self.enc_causal = nn.ModuleList(
            TransformerBlock(d, cfg.heads, cfg.mlp_ratio) for _ in range(cfg.causal_layers)
        )
        self.enc_norm = nn.LayerNorm(d)
        self.quantizer = VectorQuantizer(cfg.codebook_size, d, cfg.beta, cfg.reseed_after)
        self.dec_axial_pos = nn.Parameter(torch.zeros(cfg.max_axial_tokens, d))
        self.dec_row_pos = nn.Parameter(torch.zeros(cfg.max_rows, d))
        self.dec_col_pos = nn.Parameter(torch.zeros(cfg.max_cols, d))
        self.dec_causal = nn.ModuleList(
            TransformerBlock(d, cfg.heads, cfg.mlp_ratio) for _ in range(cfg.causal_layers)
        )
        self.dec_spatial = nn.ModuleList(
            TransformerBlock(d, cfg.heads, cfg.mlp_ratio) for _ in range(cfg.spatial_layers)
        )
        self.dec_norm = nn.LayerNorm(d)
        self.first_unpatch = nn.Linear(d, p.p1 * p.p2)
        self.rest_unpatch = nn.Linear(d, p.p_t * p.p1 * p.p2)
        for pos in (self.enc_axial_pos, self.enc_row_pos, self.enc_col_pos,
                    self.dec_axial_pos, self.dec_row_pos, self.dec_col_pos):
            nn.init.normal_(pos, std=0.02)
        self.register_buffer("train_steps", torch.zeros((), dtype=torch.long))

    # -- patching -----------------------------------------------------------

    def patchify(self, x: torch.Tensor) -> torch.Tensor:
        """(B, Z, H, W) -> (B, T, R, C, D); first-slice tokens come first."""
        p = self.cfg.patch
        z, h, w = self.cfg.patch.validate_shape(x.shape[1:])
        t_ax, rows, cols = p.token_shape((z, h, w))
        if t_ax > self.cfg.max_axial_tokens or rows > self.cfg.max_rows or cols > self.cfg.max_cols:
            raise ValueError(
                f"token grid {(t_ax, rows, cols)} exceeds positional table "
                f"({self.cfg.max_axial_tokens}, {self.cfg.max_rows}, {self.cfg.max_cols})"
            )
        first = rearrange(
            x[:, :1], "b z (r p1) (c p2) -> b z r c (p1 p2)", p1=p.p1, p2=p.p2
        )
        out = [self.first_patch(first)]
        if z > 1:
            rest = rearrange(
                x[:, 1:],
                "b (t pt) (r p1) (c p2) -> b t r c (pt p1 p2)",
                pt=p.p_t, p1=p.p1, p2=p.p2,
            )
            out.append(self.rest_patch(rest))
        return torch.cat(out, dim=1)

    def _unpatchify(self, h: torch.Tensor) -> torch.Tensor:
        p = self.cfg.patch
        first = rearrange(
            self.first_unpatch(h[:, :1]),
            "b z r c (p1 p2) -> b z (r p1) (c p2)", p1=p.p1, p2=p.p2,
        )
        if h.shape[1] == 1:
            return first
        rest = rearrange(
            self.rest_unpatch(h[:, 1:]),
            "b t r c (pt p1 p2) -> b (t pt) (r p1) (c p2)",
            pt=p.p_t, p1=p.p1, p2=p.p2,
        )
        return torch.cat([first, rest], dim=1)

    def _add_pos(self, h, axial, row, col):
        t, r, c = h.shape[1:4]
        return (
            h
            + axial[:t][None, :, None, None, :]
            + row[:r][None, None, :, None, :]
            + col[:c][None, None, None, :, :]
        )

    # -- encoder / decoder ----------------------------------------------------

    def encode_batch(self, x: torch.Tensor):
        """(B, Z, H, W) model-space volumes -> (ids, pre-quant embeddings, quantized)."""
        h = self.patchify(x)
        b, t, r, c, d = h.shape
        h = self._add_pos(h, self.enc_axial_pos, self.enc_row_pos, self.enc_col_pos)
        h = rearrange(h, "b t r c d -> (b t) (r c) d")
        for blk in self.enc_spatial:
            h = blk(h)
        h = rearrange(h, "(b t) (r c) d -> (b r c) t d", b=b, t=t, r=r, c=c)
        mask = causal_mask(t)
        for blk in self.enc_causal:
            h = blk(h, attn_mask=mask)
        h = rearrange(h, "(b r c) t d -> b t r c d", b=b, r=r, c=c)
        e = self.enc_norm(h)
        ids, quantized, terms = self.quantizer(e)
        return ids, e, quantized, terms

    def encode(self, volume: Volume | np.ndarray) -> TokenGrid:
        data = volume.data if isinstance(volume, Volume) else np.asarray(volume)
        x = torch.from_numpy(hu_to_model(data))[None]
        with torch.no_grad():
            ids, e, _, _ = self.encode_batch(x)
        return TokenGrid(ids=ids[0], embeddings=e[0])

    def decode_embeddings(self, q: torch.Tensor) -> torch.Tensor:
        """(B, T, R, C, D) quantized embeddings -> (B, Z, H, W) model-space volumes."""
        b, t, r, c, d = q.shape
        if t > self.cfg.max_axial_tokens or r > self.cfg.max_rows or c > self.cfg.max_cols:
            raise ValueError(
                f"token grid {(t, r, c)} exceeds positional table "
                f"({self.cfg.max_axial_tokens}, {self.cfg.max_rows}, {self.cfg.max_cols})"
            )
        if d != self.cfg.patch.latent_dim:
            raise ValueError(f"latent dim {d} != configured {self.cfg.patch.latent_dim}")
        h = self._add_pos(q, self.dec_axial_pos, self.dec_row_pos, self.dec_col_pos)
        h = rearrange(h, "b t r c d -> (b r c) t d")
        mask = causal_mask(t)
        for blk in self.dec_causal:
            h = blk(h, attn_mask=mask)
        h = rearrange(h, "(b r c) t d -> (b t) (r c) d", b=b, r=r, c=c)
        for blk in self.dec_spatial:
            h = blk(h)
        h = rearrange(h, "(b t) (r c) d -> b t r c d", b=b, t=t, r=r, c=c)
        return self._unpatchify(self.dec_norm(h))

    def decode_ids(self, ids: torch.Tensor) -> torch.Tensor:
        if ids.dim() == 3:
            ids = ids[None]
        if ids.max() >= self.cfg.codebook_size or ids.min() < 0:
            raise ValueError(
                f"token ids out of range [0, {self.cfg.codebook_size}): "
                f"[{int(ids.min())}, {int(ids.max())}]"
            )
        q = self.quantizer.entries[ids]
        return self.decode_embeddings(q)

    def decode(self, grid: TokenGrid) -> Volume:
        with torch.no_grad():
            x = self.decode_ids(grid.ids)
        return Volume(model_to_hu(x[0].numpy()), id="decoded")

    def forward(self, x: torch.Tensor):
        """Training pass: volumes -> (reconstruction, ids, vq terms)."""
        ids, _, quantized, terms = self.encode_batch(x)
        recon = self.decode_embeddings(quantized)
        return recon, ids, terms


def codec_loss(
    original: torch.Tensor,
    reconstruction: torch.Tensor,
    vq_terms: dict,
    perceptual_weight: float = 0.0,
    adversarial_weight: float = 0.0,
    perceptual_fn=None,
    adversarial_fn=None,
) -> dict:
    """Total codec loss with separately reported components.

    mse + codebook + beta*commitment; perceptual / adversarial terms are
    pluggable and only enter the total when their weight is nonzero.
    """
    if original.shape != reconstruction.shape:
        raise ValueError(
            f"shape mismatch: original {tuple(original.shape)} vs "
            f"reconstruction {tuple(reconstruction.shape)}"
        )
    mse = F.mse_loss(reconstruction, original)
    components = {
        "mse": mse,
        "vq_codebook": vq_terms["codebook"],
        "vq_commitment": vq_terms["commitment"],
    }
    total = mse + vq_terms["codebook"] + vq_terms["beta"] * vq_terms["commitment"]
    if perceptual_weight != 0.0:
        components["perceptual"] = perceptual_fn(original, reconstruction)
        total = total + perceptual_weight * components["perceptual"]
    if adversarial_weight != 0.0:
        components["adversarial"] = adversarial_fn(reconstruction)
        total = total + adversarial_weight * components["adversarial"]
    components["total"] = total
    return components
