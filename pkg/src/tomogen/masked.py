"""Masked token modeling over codebook ids with text cross-attention.

A bidirectional transformer predicts codebook ids at masked grid
positions, conditioned on prompt embeddings through cross-attention
(invalid text positions receive exactly zero weight). A second head
scores each position as original-vs-resampled (token critic). Inference
fills a fully masked grid over a fixed number of confidence-ranked
steps; kept ids are never revisited.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable

import numpy as np
import torch
import torch.nn.functional as F
from einops import rearrange
from torch import nn

from .codec import PatchConfig
from .text import TextEmbedding, TextEncoder, Vocabulary

GUMBEL_CONFIDENCE_SCALE = 0.1


@dataclass(frozen=True)
class MaskSchedule:
    """Mask fraction gamma(u) over progress u in [0,1], plus inference step count."""

    fn: Callable[[float], float]
    steps: int = 12

    def __post_init__(self):
        if self.steps < 1:
            raise ValueError(f"schedule needs steps >= 1, got {self.steps}")

    @staticmethod
    def cosine(steps: int = 12) -> "MaskSchedule":
        # gamma(1) forced to exact 0 so ceil-based keep counts reach zero
        return MaskSchedule(
            fn=lambda u: 0.0 if u >= 1.0 else math.cos(math.pi * u / 2.0), steps=steps
        )

    def masked_count(self, u: float, n: int) -> int:
        return math.ceil(self.fn(u) * n)


@dataclass
class MaskedBatch:
    """Token grid with a random subset replaced by the reserved MASK id."""

    ids: torch.Tensor  # grid with MASK at masked positions
    mask: torch.Tensor  # bool grid, True = masked
    targets: torch.Tensor  # original ids; meaningful exactly on masked positions


def mask_tokens(token_ids: torch.Tensor, fraction: float, seed: int, mask_id: int) -> MaskedBatch:
    """Mask ceil(fraction * N) positions chosen uniformly without replacement."""
    if not 0.0 < fraction <= 1.0:
        raise ValueError(f"mask fraction must be in (0, 1], got {fraction}")
    n = token_ids.numel()
    count = math.ceil(fraction * n)
    g = torch.Generator().manual_seed(seed)
    chosen = torch.randperm(n, generator=g)[:count]
    mask = torch.zeros(n, dtype=torch.bool)
    mask[chosen] = True
    mask = mask.reshape(token_ids.shape)
    ids = token_ids.masked_fill(mask, mask_id)
    return MaskedBatch(ids=ids, mask=mask, targets=token_ids.clone())


class TextCrossAttention(nn.Module):
    """Cross-attention from grid tokens to valid text positions; weights exposable."""

    def __init__(self, dim: int, d_text: int, heads: int):
        super().__init__()
        self.heads = heads
        self.q = nn.Linear(dim, dim)
        self.k = nn.Linear(d_text, dim)
        self.v = nn.Linear(d_text, dim)
        self.out = nn.Linear(dim, dim)

    def forward(self, x, text, validity, capture=None):
        b, n, _ = x.shape
        q = rearrange(self.q(x), "b n (h d) -> b h n d", h=self.heads)
        k = rearrange(self.k(text), "b l (h d) -> b h l d", h=self.heads)
        v = rearrange(self.v(text), "b l (h d) -> b h l d", h=self.heads)
        scores = torch.einsum("bhnd,bhld->bhnl", q, k) / math.sqrt(q.shape[-1])
        scores = scores.masked_fill(~validity[:, None, None, :], float("-inf"))
        attn = scores.softmax(dim=-1)
        if capture is not None:
            capture.append(attn.detach())
        out = torch.einsum("bhnl,bhld->bhnd", attn, v)
        return self.out(rearrange(out, "b h n d -> b n (h d)"))


class MaskedLayer(nn.Module):
    def __init__(self, dim: int, d_text: int, heads: int, mlp_ratio: int):
        super().__init__()
        self.norm1 = nn.LayerNorm(dim)
        self.self_attn = nn.MultiheadAttention(dim, heads, batch_first=True)
        self.norm2 = nn.LayerNorm(dim)
        self.cross = TextCrossAttention(dim, d_text, heads)
        self.norm3 = nn.LayerNorm(dim)
        self.mlp = nn.Sequential(
            nn.Linear(dim, mlp_ratio * dim), nn.GELU(), nn.Linear(mlp_ratio * dim, dim)
        )

    def forward(self, x, text, validity, capture=None):
        h = self.norm1(x)
        h, _ = self.self_attn(h, h, h, need_weights=False)
        x = x + h
        x = x + self.cross(self.norm2(x), text, validity, capture)
        return x + self.mlp(self.norm3(x))


@dataclass(frozen=True)
class MaskedConfig:
    codebook_size: int = 1024
    width: int = 128
    layers: int = 4
    heads: int = 4
    d_text: int = 128
    text_max_len: int = 32
    mlp_ratio: int = 4
    max_axial_tokens: int = 128
    max_rows: int = 32
    max_cols: int = 32
    critic_weight: float = 0.1
    temperature: tuple[float, float] = (1.0, 0.1)

    def to_dict(self) -> dict:
        d = dict(vars(self))
        d["temperature"] = list(self.temperature)
        return d

    @staticmethod
    def from_dict(d: dict) -> "MaskedConfig":
        d = dict(d)
        d["temperature"] = tuple(d["temperature"])
        return MaskedConfig(**d)


class MaskedTokenModel(nn.Module):
    """Bidirectional transformer over token grids with codebook-id and critic heads."""

    def __init__(self, cfg: MaskedConfig, vocab: Vocabulary):
        super().__init__()
        self.cfg = cfg
        self.mask_id = cfg.codebook_size  # one past the codebook range
        self.tok_emb = nn.Embedding(cfg.codebook_size + 1, cfg.width)
        self.axial_pos = nn.Parameter(torch.zeros(cfg.max_axial_tokens, cfg.width))
        self.row_pos = nn.Parameter(torch.zeros(cfg.max_rows, cfg.width))
        self.col_pos = nn.Parameter(torch.zeros(cfg.max_cols, cfg.width))
        for pos in (self.axial_pos, self.row_pos, self.col_pos):
            nn.init.normal_(pos, std=0.02)
        self.text_encoder = TextEncoder(vocab, cfg.d_text)
        self.layers = nn.ModuleList(
            MaskedLayer(cfg.width, cfg.d_text, cfg.heads, cfg.mlp_ratio)
            for _ in range(cfg.layers)
        )
        self.norm = nn.LayerNorm(cfg.width)
        self.logit_head = nn.Linear(cfg.width, cfg.codebook_size)
        self.critic_head = nn.Linear(cfg.width, 1)
        self.register_buffer("train_steps", torch.zeros((), dtype=torch.long))

    def forward(self, ids: torch.Tensor, text: TextEmbedding, capture_attention: bool = False):
        """ids (B, T, R, C) -> logits (B, N, K), critic logits (B, N)[, attn maps]."""
        if ids.dim() == 3:
            ids = ids[None]
        validity = text.validity
        tokens = text.tokens
        if validity.dim() == 1:
            validity, tokens = validity[None], tokens[None]
        if validity.shape[0] == 1 and ids.shape[0] > 1:
            validity = validity.expand(ids.shape[0], -1)
            tokens = tokens.expand(ids.shape[0], -1, -1)
        if not validity.any(dim=-1).all():
            raise ValueError("text embedding has no valid positions")
        b, t, r, c = ids.shape
        h = self.tok_emb(ids)
        h = (
            h
            + self.axial_pos[:t][None, :, None, None, :]
            + self.row_pos[:r][None, None, :, None, :]
            + self.col_pos[:c][None, None, None, :, :]
        )
        h = rearrange(h, "b t r c d -> b (t r c) d")
        capture: list | None = [] if capture_attention else None
        for layer in self.layers:
            h = layer(h, tokens, validity, capture)
        h = self.norm(h)
        logits = self.logit_head(h)
        critic = self.critic_head(h).squeeze(-1)
        if capture_attention:
            return logits, critic, capture
        return logits, critic


def masked_cross_entropy(logits: torch.Tensor, targets: torch.Tensor, mask: torch.Tensor):
    """Cross-entropy over masked positions only (flattened across the batch)."""
    flat_mask = mask.reshape(-1)
    flat_logits = logits.reshape(-1, logits.shape[-1])[flat_mask]
    flat_targets = targets.reshape(-1)[flat_mask]
    return F.cross_entropy(flat_logits, flat_targets)


def train_step(
    model: MaskedTokenModel,
    optimizer: torch.optim.Optimizer,
    token_ids: torch.Tensor,
    prompts: list[str],
    schedule: MaskSchedule,
    seed: int,
    grad_clip: float = 1.0,
) -> dict:
    """One masked-token-modeling step: recon CE + token-critic BCE.

    Mask fractions are sampled per example as gamma(u), u ~ U(0,1).
    Deterministic given ``seed``.
    """
    b = token_ids.shape[0]
    g = torch.Generator().manual_seed(seed)
    text = model.text_encoder.encode_batch(prompts, model.cfg.text_max_len)

    masks, masked_ids = [], []
    u = torch.rand(b, generator=g)
    for i in range(b):
        frac = max(schedule.fn(float(u[i])), 1.0 / token_ids[i].numel())
        mb = mask_tokens(token_ids[i], min(frac, 1.0), int(torch.randint(2**31, (1,), generator=g)), model.mask_id)
        masks.append(mb.mask)
        masked_ids.append(mb.ids)
    mask = torch.stack(masks)
    masked = torch.stack(masked_ids)

    logits, _ = model(masked, text)
    recon = masked_cross_entropy(logits, token_ids, mask)

    # critic pass: refill masked slots with model samples, classify authenticity
    with torch.no_grad():
        probs = logits.detach().softmax(dim=-1)
        sampled = torch.multinomial(
            probs.reshape(-1, probs.shape[-1]), 1, generator=g
        ).reshape(token_ids.shape)
        filled = torch.where(mask, sampled, token_ids)
        critic_targets = (filled == token_ids).float()
    _, critic_logits = model(filled, text)
    critic = F.binary_cross_entropy_with_logits(
        critic_logits, critic_targets.reshape(b, -1)
    )

    total = recon + model.cfg.critic_weight * critic
    for name, value in (("recon", recon), ("critic", critic), ("total", total)):
        if not torch.isfinite(value):
            raise FloatingPointError(
                f"non-finite {name} loss at step {int(model.train_steps)}"
            )
    optimizer.zero_grad()
    total.backward()
    if grad_clip:
        torch.nn.utils.clip_grad_norm_(model.parameters(), grad_clip)
    optimizer.step()
    model.train_steps += 1

    with torch.no_grad():
        acc = (logits.argmax(-1).reshape(token_ids.shape)[mask] == token_ids[mask]).float().mean()
    return {
        "recon": float(recon.detach()),
        "critic": float(critic.detach()),
        "total": float(total.detach()),
        "masked_accuracy": float(acc),
        "masked_count": int(mask.sum()),
    }


def generate_tokens(
    model: MaskedTokenModel,
    text: TextEmbedding,
    schedule: MaskSchedule,
    seed: int,
    grid_shape: tuple[int, int, int],
    guidance_scale: float = 0.0,
    history: list | None = None,
) -> torch.Tensor:
    """Iterative masked decoding: fully masked start, confidence-ranked commits.

    After step s, exactly ceil(gamma(s/S) * N) positions remain masked; kept
    ids are frozen. Deterministic given ``seed``.
    """
    if int(model.train_steps) == 0:
        raise RuntimeError("masked token model is untrained; train or load a checkpoint")
    if guidance_scale < 0:
        raise ValueError(f"guidance_scale must be >= 0, got {guidance_scale}")
    model.eval()
    t, r, c = grid_shape
    n = t * r * c
    g = torch.Generator().manual_seed(seed)
    ids = torch.full((t, r, c), model.mask_id, dtype=torch.long)
    still_masked = torch.ones(n, dtype=torch.bool)
    t0, t1 = model.cfg.temperature
    steps = schedule.steps
    null_text = model.text_encoder.null_conditioning(model.cfg.text_max_len)

    with torch.no_grad():
        for s in range(1, steps + 1):
            temp = t0 if steps == 1 else t0 + (t1 - t0) * (s - 1) / (steps - 1)
            logits, _ = model(ids[None], text)
            if guidance_scale > 0.0:
                null_logits, _ = model(ids[None], null_text)
                logits = logits + guidance_scale * (logits - null_logits)
            logits = logits[0]
            probs = (logits / max(temp, 1e-4)).softmax(dim=-1)
            sampled = torch.multinomial(probs, 1, generator=g).squeeze(-1)
            base_prob = logits.softmax(dim=-1).gather(-1, sampled[:, None]).squeeze(-1)
            u = torch.rand(n, generator=g).clamp(1e-20, 1.0 - 1e-7)
            gumbel = -torch.log(-torch.log(u))
            confidence = base_prob + GUMBEL_CONFIDENCE_SCALE * temp * gumbel
            confidence = confidence.masked_fill(~still_masked, float("inf"))

            target_masked = schedule.masked_count(s / steps, n)
            keep_total = n - target_masked
            keep = torch.zeros(n, dtype=torch.bool)
            keep[confidence.topk(keep_total).indices] = True
            newly = keep & still_masked
            flat = ids.reshape(-1)
            flat[newly] = sampled[newly]
            still_masked &= ~keep
            if history is not None:
                history.append(int(still_masked.sum()))

    assert not still_masked.any(), "inference ended with masked positions"
    return ids


def extract_attention_maps(
    model: MaskedTokenModel,
    prompt: str,
    ids: torch.Tensor,
    phrase: str,
    patch: PatchConfig,
) -> np.ndarray:
    """Cross-attention map for a prompt phrase, upsampled to voxel coordinates.

    Averages attention over layers, heads, and the phrase's text positions,
    min-max normalizes, and trilinearly interpolates the (T, R, C) token grid
    to the decoded (Z, H, W) shape. Values span [0, 1].
    """
    from .text import tokenize

    prompt_toks = tokenize(prompt)
    phrase_toks = tokenize(phrase)
    hits = [
        i
        for i in range(len(prompt_toks) - len(phrase_toks) + 1)
        if prompt_toks[i : i + len(phrase_toks)] == phrase_toks
    ]
    if not hits:
        raise ValueError(f"phrase {phrase!r} does not occur in prompt {prompt!r}")
    positions = sorted({i + k for i in hits for k in range(len(phrase_toks))})
    positions = [p for p in positions if p < model.cfg.text_max_len]

    text = model.text_encoder.encode(prompt, model.cfg.text_max_len)
    model.eval()
    with torch.no_grad():
        _, _, attn = model(ids[None], text, capture_attention=True)
    # each entry: (1, heads, N, L) -> average over layers, heads, phrase positions
    stacked = torch.stack([a[0] for a in attn]).mean(dim=(0, 1))  # (N, L)
    grid = stacked[:, positions].mean(dim=-1).reshape(ids.shape)

    lo, hi = grid.min(), grid.max()
    grid = (grid - lo) / (hi - lo) if hi > lo else torch.zeros_like(grid)
    out_shape = patch.volume_shape(ids.shape)
    up = F.interpolate(
        grid[None, None], size=out_shape, mode="trilinear", align_corners=True
    )[0, 0]
    lo, hi = up.min(), up.max()
    if hi > lo:
        up = (up - lo) / (hi - lo)
    return up.numpy()
