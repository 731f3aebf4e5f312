"""Text-conditional denoising diffusion super-resolution, applied per axial slice.

Each cascade stage is a small U-shaped epsilon-predictor conditioned on
the bilinearly upsampled (and noise-corrupted) low-resolution slice via
channel concatenation, and on the prompt via cross-attention at the
bottleneck only. Stages chain 2x/4x in-plane upsamplings; the axial
slice count never changes.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn.functional as F
from einops import rearrange
from torch import nn

from .phantoms import Volume
from .text import TextEmbedding, TextEncoder, Vocabulary
from .util import derive_seed, hu_to_model, model_to_hu


@dataclass
class DiffusionSchedule:
    """Forward-process coefficients; alphabar[0] = 1 by definition."""

    betas: np.ndarray  # (T,)
    alphas: np.ndarray = field(init=False)
    alphabar: np.ndarray = field(init=False)  # (T+1,), index by timestep

    def __post_init__(self):
        self.betas = np.asarray(self.betas, dtype=np.float64)
        if self.betas.ndim != 1 or len(self.betas) < 1:
            raise ValueError("betas must be a non-empty 1-D array")
        if not (self.betas > 0).all() or not (self.betas < 1).all():
            raise ValueError("betas must lie strictly in (0, 1)")
        if not (np.diff(self.betas) > 0).all():
            raise ValueError("betas must be strictly increasing")
        self.alphas = 1.0 - self.betas
        self.alphabar = np.concatenate([[1.0], np.cumprod(self.alphas)])
        if not (np.diff(self.alphabar) < 0).all():
            raise ValueError("alphabar must be strictly decreasing")

    @property
    def timesteps(self) -> int:
        return len(self.betas)

    @staticmethod
    def cosine(timesteps: int = 1000, s: float = 0.008, max_beta: float = 0.999) -> "DiffusionSchedule":
        t = np.arange(timesteps + 1, dtype=np.float64)
        f = np.cos((t / timesteps + s) / (1 + s) * math.pi / 2.0) ** 2
        betas = np.clip(1.0 - f[1:] / f[:-1], 1e-8, max_beta)
        return DiffusionSchedule(betas)


def forward_noise(x0: torch.Tensor, t, noise: torch.Tensor, schedule: DiffusionSchedule) -> torch.Tensor:
    """x_t = sqrt(alphabar_t) * x0 + sqrt(1 - alphabar_t) * noise, t in [1, T]."""
    t_arr = torch.as_tensor(t, dtype=torch.long).reshape(-1)
    if (t_arr < 1).any() or (t_arr > schedule.timesteps).any():
        raise ValueError(f"timestep out of range [1, {schedule.timesteps}]: {t}")
    ab = torch.from_numpy(schedule.alphabar).to(x0.dtype)[t_arr]
    ab = ab.reshape(-1, *([1] * (x0.dim() - 1)))
    return ab.sqrt() * x0 + (1 - ab).sqrt() * noise


def noise_weighting(name: str):
    """Named per-timestep loss weightings; 'uniform' is the default w(t) = 1."""

    def uniform(t, schedule):
        return torch.ones(len(torch.as_tensor(t).reshape(-1)))

    def min_snr_5(t, schedule):
        t_arr = torch.as_tensor(t, dtype=torch.long).reshape(-1)
        ab = torch.from_numpy(schedule.alphabar)[t_arr]
        snr = ab / (1 - ab)
        return torch.clamp(snr, max=5.0).float() / 5.0

    table = {"uniform": uniform, "min_snr_5": min_snr_5}
    if name not in table:
        raise ValueError(f"unknown weighting {name!r}; known: {sorted(table)}")
    return table[name]


def timestep_embedding(t: torch.Tensor, dim: int) -> torch.Tensor:
    half = dim // 2
    freqs = torch.exp(-math.log(10000.0) * torch.arange(half, dtype=torch.float32) / half)
    args = t.float()[:, None] * freqs[None]
    return torch.cat([args.sin(), args.cos()], dim=-1)


class ResBlock(nn.Module):
    def __init__(self, c_in: int, c_out: int, time_dim: int):
        super().__init__()
        self.conv1 = nn.Conv2d(c_in, c_out, 3, padding=1)
        self.conv2 = nn.Conv2d(c_out, c_out, 3, padding=1)
        self.norm1 = nn.GroupNorm(8, c_out)
        self.norm2 = nn.GroupNorm(8, c_out)
        self.time = nn.Linear(time_dim, c_out)
        self.skip = nn.Conv2d(c_in, c_out, 1) if c_in != c_out else nn.Identity()

    def forward(self, x, temb):
        h = F.silu(self.norm1(self.conv1(x)))
        h = h + self.time(temb)[:, :, None, None]
        h = F.silu(self.norm2(self.conv2(h)))
        return h + self.skip(x)


class BottleneckCrossAttention(nn.Module):
    """Cross-attention from bottleneck pixels to valid text positions."""

    def __init__(self, channels: int, d_text: int, heads: int):
        super().__init__()
        self.heads = heads
        self.norm = nn.GroupNorm(8, channels)
        self.q = nn.Conv2d(channels, channels, 1)
        self.k = nn.Linear(d_text, channels)
        self.v = nn.Linear(d_text, channels)
        self.out = nn.Conv2d(channels, channels, 1)

    def forward(self, x, text, validity):
        b, ch, hh, ww = x.shape
        q = rearrange(self.q(self.norm(x)), "b (h d) y x -> b h (y x) d", h=self.heads)
        k = rearrange(self.k(text), "b l (h d) -> b h l d", h=self.heads)
        v = rearrange(self.v(text), "b l (h d) -> b h l d", h=self.heads)
        scores = torch.einsum("bhnd,bhld->bhnl", q, k) / math.sqrt(q.shape[-1])
        scores = scores.masked_fill(~validity[:, None, None, :], float("-inf"))
        attn = scores.softmax(dim=-1)
        out = torch.einsum("bhnl,bhld->bhnd", attn, v)
        out = rearrange(out, "b h (y x) d -> b (h d) y x", y=hh, x=ww)
        return x + self.out(out)


class UNetDenoiser(nn.Module):
    """Small U-shaped epsilon predictor; text enters only at the bottleneck."""

    def __init__(self, base_width: int = 32, channel_mults=(1, 2, 4), d_text: int = 128, heads: int = 4):
        super().__init__()
        widths = [base_width * m for m in channel_mults]
        time_dim = base_width * 4
        self.time_mlp = nn.Sequential(
            nn.Linear(base_width, time_dim), nn.SiLU(), nn.Linear(time_dim, time_dim)
        )
        self.base_width = base_width
        self.stem = nn.Conv2d(2, widths[0], 3, padding=1)
        self.down_blocks = nn.ModuleList()
        self.downsamples = nn.ModuleList()
        for i in range(len(widths) - 1):
            self.down_blocks.append(ResBlock(widths[i], widths[i], time_dim))
            self.downsamples.append(nn.Conv2d(widths[i], widths[i + 1], 3, stride=2, padding=1))
        self.mid1 = ResBlock(widths[-1], widths[-1], time_dim)
        self.cross = BottleneckCrossAttention(widths[-1], d_text, heads)
        self.mid2 = ResBlock(widths[-1], widths[-1], time_dim)
        self.up_blocks = nn.ModuleList()
        self.upsamples = nn.ModuleList()
        for i in reversed(range(len(widths) - 1)):
            self.upsamples.append(nn.ConvTranspose2d(widths[i + 1], widths[i], 2, stride=2))
            self.up_blocks.append(ResBlock(2 * widths[i], widths[i], time_dim))
        self.head = nn.Conv2d(widths[0], 1, 3, padding=1)

    def forward(self, x, t, text, validity):
        temb = self.time_mlp(timestep_embedding(t, self.base_width).to(x.dtype))
        h = self.stem(x)
        skips = []
        for block, down in zip(self.down_blocks, self.downsamples):
            h = block(h, temb)
            skips.append(h)
            h = down(h)
        h = self.mid1(h, temb)
        h = self.cross(h, text, validity)
        h = self.mid2(h, temb)
        for up, block, skip in zip(self.upsamples, self.up_blocks, reversed(skips)):
            h = up(h)
            h = block(torch.cat([h, skip], dim=1), temb)
        return self.head(h)


@dataclass(frozen=True)
class SRStageConfig:
    input_size: int
    output_size: int
    base_width: int = 32
    channel_mults: tuple[int, ...] = (1, 2, 4)
    d_text: int = 128
    text_max_len: int = 32
    heads: int = 4
    train_timesteps: int = 1000
    sample_steps: int = 50
    aug_max: float = 0.3
    aug_sample: float = 0.1
    weighting: str = "uniform"

    def __post_init__(self):
        if self.output_size not in (2 * self.input_size, 4 * self.input_size):
            raise ValueError(
                f"stage must upsample 2x or 4x, got {self.input_size} -> {self.output_size}"
            )

    def to_dict(self) -> dict:
        d = dict(vars(self))
        d["channel_mults"] = list(self.channel_mults)
        return d

    @staticmethod
    def from_dict(d: dict) -> "SRStageConfig":
        d = dict(d)
        d["channel_mults"] = tuple(d["channel_mults"])
        return SRStageConfig(**d)


class SRStage(nn.Module):
    """One cascade stage: denoiser + schedule + its own text encoder."""

    def __init__(self, cfg: SRStageConfig, vocab: Vocabulary):
        super().__init__()
        self.cfg = cfg
        self.unet = UNetDenoiser(cfg.base_width, cfg.channel_mults, cfg.d_text, cfg.heads)
        self.text_encoder = TextEncoder(vocab, cfg.d_text)
        self.schedule = DiffusionSchedule.cosine(cfg.train_timesteps)
        self.register_buffer("train_steps", torch.zeros((), dtype=torch.long))

    def encode_prompts(self, prompts: list[str]) -> TextEmbedding:
        return self.text_encoder.encode_batch(prompts, self.cfg.text_max_len)


def corrupt_conditioning(
    lr: torch.Tensor, level, schedule: DiffusionSchedule, generator: torch.Generator
) -> torch.Tensor:
    """Forward-noise the conditioning input at a fractional process level."""
    level = torch.as_tensor(level, dtype=torch.float64).reshape(-1)
    t = (level * schedule.timesteps).long()
    out = lr.clone()
    for i in range(lr.shape[0]):
        ti = int(t[min(i, len(t) - 1)])
        if ti >= 1:
            noise = torch.randn(lr.shape[1:], generator=generator)
            out[i] = forward_noise(lr[i], ti, noise, schedule)
    return out


def denoise_train_step(
    stage: SRStage,
    optimizer: torch.optim.Optimizer,
    hr: torch.Tensor,
    lr: torch.Tensor,
    prompts: list[str],
    seed: int,
    grad_clip: float = 1.0,
) -> dict:
    """One epsilon-prediction step with noise-level-weighted MSE.

    hr: (B, 1, s, s) in [-1, 1]; lr: (B, 1, s/f, s/f) spatially aligned.
    The conditioning lr is corrupted by the forward process at a level drawn
    from U(0, aug_max) per example.
    """
    if hr.shape[-1] != stage.cfg.output_size or lr.shape[-1] != stage.cfg.input_size:
        raise ValueError(
            f"stage expects lr {stage.cfg.input_size}, hr {stage.cfg.output_size}; "
            f"got lr {tuple(lr.shape)}, hr {tuple(hr.shape)}"
        )
    if hr.shape[0] != lr.shape[0]:
        raise ValueError(f"batch mismatch: hr {hr.shape[0]} vs lr {lr.shape[0]}")
    g = torch.Generator().manual_seed(seed)
    b = hr.shape[0]
    sched = stage.schedule
    t = torch.randint(1, sched.timesteps + 1, (b,), generator=g)
    noise = torch.randn(hr.shape, generator=g)
    x_t = forward_noise(hr, t, noise, sched)

    aug = torch.rand(b, generator=g) * stage.cfg.aug_max
    lr_corrupt = corrupt_conditioning(lr, aug, sched, g)
    lr_up = F.interpolate(lr_corrupt, size=hr.shape[-2:], mode="bilinear", align_corners=False)

    text = stage.encode_prompts(prompts)
    eps_hat = stage.unet(torch.cat([x_t, lr_up], dim=1), t, text.tokens, text.validity)
    w = noise_weighting(stage.cfg.weighting)(t, sched).to(hr.dtype)
    per_example = ((eps_hat - noise) ** 2).mean(dim=(1, 2, 3))
    loss = (w * per_example).mean()
    if not torch.isfinite(loss):
        raise FloatingPointError(f"non-finite sr loss at step {int(stage.train_steps)}")

    optimizer.zero_grad()
    loss.backward()
    if grad_clip:
        torch.nn.utils.clip_grad_norm_(stage.parameters(), grad_clip)
    optimizer.step()
    stage.train_steps += 1
    return {"total": float(loss.detach()), "mse": float(per_example.detach().mean())}


def sample(
    stage: SRStage,
    lr: torch.Tensor,
    prompt_text: TextEmbedding,
    n_sample_steps: int | None = None,
    seed: int = 0,
) -> torch.Tensor:
    """Reverse process from pure noise, conditioned on lr and text.

    Deterministic given ``seed`` (seeded initial noise + deterministic strided
    reverse updates). Output is clipped to [-1, 1].
    """
    if int(stage.train_steps) == 0:
        raise RuntimeError("sr stage is untrained; train or load a checkpoint")
    steps = n_sample_steps or stage.cfg.sample_steps
    sched = stage.schedule
    if steps > sched.timesteps:
        raise ValueError(f"n_sample_steps {steps} exceeds train timesteps {sched.timesteps}")
    if lr.dim() == 3:
        lr = lr[:, None]
    g = torch.Generator().manual_seed(seed)
    size = stage.cfg.output_size
    b = lr.shape[0]
    tokens, validity = prompt_text.tokens, prompt_text.validity
    if tokens.dim() == 2:
        tokens, validity = tokens[None], validity[None]
    if tokens.shape[0] == 1 and b > 1:
        tokens = tokens.expand(b, -1, -1)
        validity = validity.expand(b, -1)

    lr_corrupt = corrupt_conditioning(lr, [stage.cfg.aug_sample] * b, sched, g)
    lr_up = F.interpolate(lr_corrupt, size=(size, size), mode="bilinear", align_corners=False)

    times = np.unique(np.linspace(0, sched.timesteps, steps + 1).round().astype(int))[::-1]
    x = torch.randn((b, 1, size, size), generator=g)
    ab = torch.from_numpy(sched.alphabar).float()
    stage.eval()
    with torch.no_grad():
        for t_cur, t_prev in zip(times[:-1], times[1:]):
            t_batch = torch.full((b,), int(t_cur), dtype=torch.long)
            eps = stage.unet(torch.cat([x, lr_up], dim=1), t_batch, tokens, validity)
            a_cur, a_prev = ab[t_cur], ab[t_prev]
            x0 = ((x - (1 - a_cur).sqrt() * eps) / a_cur.sqrt()).clamp(-1, 1)
            if t_prev == 0:
                x = x0
                break
            # strided ancestral update: fresh noise each step keeps early
            # low-SNR prediction errors from locking in
            sigma = ((1 - a_prev) / (1 - a_cur)).sqrt() * (1 - a_cur / a_prev).sqrt()
            direction = (1 - a_prev - sigma**2).clamp_min(0).sqrt()
            x = (
                a_prev.sqrt() * x0
                + direction * eps
                + sigma * torch.randn(x.shape, generator=g)
            )
    return x.clamp(-1, 1)


@dataclass(frozen=True)
class CascadeConfig:
    """Ordered slice-resolution chain; X counts the base generator too."""

    stages: tuple[tuple[int, int], ...]

    def __post_init__(self):
        if not self.stages:
            raise ValueError("cascade needs at least one stage")
        for i, (a, b) in enumerate(self.stages):
            if b not in (2 * a, 4 * a):
                raise ValueError(f"stage {i} must be 2x or 4x, got {a} -> {b}")
            if i and a != self.stages[i - 1][1]:
                raise ValueError(
                    f"stage chain broken at {i}: {self.stages[i - 1][1]} -> {a}; "
                    f"chain {list(self.stages)}"
                )

    @property
    def x_count(self) -> int:
        return len(self.stages) + 1

    @property
    def base_size(self) -> int:
        return self.stages[0][0]

    @property
    def target_size(self) -> int:
        return self.stages[-1][1]

    @staticmethod
    def preset(name: str, base: int = 64) -> "CascadeConfig":
        """2SCM: base -> 4x. 3SCM (default): base -> 2x -> 2x. 4SCM: half base, three 2x."""
        if name == "2SCM":
            return CascadeConfig(((base, base * 4),))
        if name == "3SCM":
            return CascadeConfig(((base, base * 2), (base * 2, base * 4)))
        if name == "4SCM":
            half = base // 2
            return CascadeConfig(((half, base), (base, base * 2), (base * 2, base * 4)))
        raise ValueError(f"unknown cascade preset {name!r}")


def run_cascade(
    volume_lr: Volume,
    prompt: str,
    stages: list[SRStage],
    seed: int,
    n_sample_steps: int | None = None,
) -> Volume:
    """Super-resolve every axial slice through the stage chain.

    All slices share the volume-level prompt. Slices are processed
    independently with per-slice seeds derived from (seed, slice index,
    stage index), so results do not depend on processing order.
    """
    sizes = [s.cfg.input_size for s in stages] + [stages[-1].cfg.output_size]
    for i in range(1, len(stages)):
        if stages[i].cfg.input_size != stages[i - 1].cfg.output_size:
            raise ValueError(f"stage size chain mismatch: {sizes}")
    z, h, w = volume_lr.shape
    if h != sizes[0] or w != sizes[0]:
        raise ValueError(
            f"volume slices are {h}x{w} but the cascade chain starts at {sizes[0]} "
            f"(chain {sizes})"
        )
    current = torch.from_numpy(hu_to_model(volume_lr.data))
    for si, stage in enumerate(stages):
        text = stage.text_encoder.encode(prompt, stage.cfg.text_max_len)
        out = torch.empty(z, stage.cfg.output_size, stage.cfg.output_size)
        for zi in range(z):
            out[zi] = sample(
                stage,
                current[zi][None, None],
                text,
                n_sample_steps,
                seed=derive_seed(seed, "slice", zi, "stage", si),
            )[0, 0]
        current = out
    return Volume(model_to_hu(current.numpy()), volume_lr.spacing, volume_lr.id)
