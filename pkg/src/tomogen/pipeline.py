"""End-to-end orchestration: config, staged training, checkpoints, inference.

A run directory holds one subdirectory per trained stage (``codec``,
``maskgen``, ``sr0``, ``sr1``, ...), each a manifest + parameter-blob
checkpoint stamped with the run config hash. Downstream stages record
the upstream hashes they were trained against and generation refuses
mismatched chains.
"""

from __future__ import annotations

import copy
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F

from . import checkpoint as ckpt
from .codec import CodecConfig, PatchConfig, VolumeCodec, codec_loss
from .diffusion import CascadeConfig, SRStage, SRStageConfig, denoise_train_step, run_cascade
from .masked import MaskedConfig, MaskedTokenModel, MaskSchedule, generate_tokens
from .masked import train_step as masked_train_step
from .phantoms import PhantomDataset, Volume, build_dataset, save_volume
from .text import Vocabulary, default_vocabulary
from .util import array_hash, config_hash, derive_seed, hu_to_model, model_to_hu


class ConfigError(ValueError):
    pass


class TrainingDiverged(RuntimeError):
    pass


DEFAULT_CONFIG: dict = {
    "seed": 0,
    "out_dir": "runs/desk",
    "data": {
        "n_train": 64,
        "n_test": 16,
        "hr_shape": [17, 256, 256],
        "labels": ["nodule", "effusion", "central_mass"],
        "prevalence": 0.35,
        "exclude_label_sets": [],
    },
    "text": {"d_text": 128, "max_len": 32},
    "codec": {
        "p1": 8, "p2": 8, "p_t": 2, "latent_dim": 64,
        "codebook_size": 1024, "beta": 0.25,
        "spatial_layers": 2, "causal_layers": 2, "heads": 4, "mlp_ratio": 4,
        "max_axial_tokens": 128, "max_rows": 32, "max_cols": 32, "reseed_after": 256,
        "lr": 3e-4, "batch_size": 4, "steps": 2000,
        "grad_clip": 1.0, "checkpoint_every": 500, "log_every": 50,
    },
    "maskgen": {
        "width": 128, "layers": 4, "heads": 4, "mlp_ratio": 4,
        "critic_weight": 0.1, "inference_steps": 12,
        "temperature": [1.0, 0.1], "guidance_scale": 0.0,
        "lr": 3e-4, "warmup_steps": 500, "batch_size": 8, "steps": 3000,
        "grad_clip": 1.0, "checkpoint_every": 500, "log_every": 50,
    },
    "sr": {
        "stages": [[64, 128], [128, 256]],
        "base_width": 32, "channel_mults": [1, 2, 4], "heads": 4,
        "train_timesteps": 1000, "sample_steps": 50,
        "aug_max": 0.3, "aug_sample": 0.1, "weighting": "uniform",
        "lr": 5e-4, "batch_size": 8, "steps": 2000,
        "grad_clip": 1.0, "checkpoint_every": 500, "log_every": 50,
    },
    "optimizer": {"beta1": 0.9, "beta2": 0.99},
}


def _deep_merge(base: dict, override: dict, path: str = "") -> dict:
    out = copy.deepcopy(base)
    for key, val in override.items():
        here = f"{path}.{key}" if path else key
        if key not in base:
            raise ConfigError(f"{here}: unknown config key")
        if isinstance(base[key], dict):
            if not isinstance(val, dict):
                raise ConfigError(f"{here}: expected a mapping")
            out[key] = _deep_merge(base[key], val, here)
        else:
            out[key] = copy.deepcopy(val)
    return out


def _require(cond: bool, path: str, msg: str) -> None:
    if not cond:
        raise ConfigError(f"{path}: {msg}")


def validate_config(cfg: dict) -> None:
    def pos_int(path, v):
        _require(
            isinstance(v, int) and not isinstance(v, bool) and v >= 1,
            path, f"expected a positive integer, got {v!r}",
        )

    def pos_num(path, v):
        _require(
            isinstance(v, (int, float)) and v > 0,
            path, f"expected a positive number, got {v!r}",
        )

    _require(isinstance(cfg["seed"], int) and cfg["seed"] >= 0, "seed", "expected an integer >= 0")
    d = cfg["data"]
    pos_int("data.n_train", d["n_train"])
    pos_int("data.n_test", d["n_test"])
    _require(
        isinstance(d["hr_shape"], list) and len(d["hr_shape"]) == 3,
        "data.hr_shape", f"expected [Z, H, W], got {d['hr_shape']!r}",
    )
    for i, dim in enumerate(d["hr_shape"]):
        pos_int(f"data.hr_shape[{i}]", dim)
    _require(
        0.0 < d["prevalence"] < 1.0,
        "data.prevalence", f"expected a fraction in (0, 1), got {d['prevalence']!r}",
    )
    for key in ("d_text", "max_len"):
        pos_int(f"text.{key}", cfg["text"][key])
    c = cfg["codec"]
    for key in ("p1", "p2", "p_t", "latent_dim", "codebook_size", "spatial_layers",
                "causal_layers", "heads", "batch_size", "steps", "checkpoint_every"):
        pos_int(f"codec.{key}", c[key])
    _require(c["codebook_size"] >= 2, "codec.codebook_size", "codebook needs K >= 2")
    pos_num("codec.lr", c["lr"])
    m = cfg["maskgen"]
    for key in ("width", "layers", "heads", "inference_steps", "batch_size", "steps", "checkpoint_every"):
        pos_int(f"maskgen.{key}", m[key])
    pos_num("maskgen.lr", m["lr"])
    _require(m["guidance_scale"] >= 0, "maskgen.guidance_scale", "must be >= 0")
    s = cfg["sr"]
    _require(isinstance(s["stages"], list) and s["stages"], "sr.stages", "expected a non-empty stage list")
    for i, pair in enumerate(s["stages"]):
        _require(
            isinstance(pair, list) and len(pair) == 2,
            f"sr.stages[{i}]", f"expected [input, output], got {pair!r}",
        )
        pos_int(f"sr.stages[{i}][0]", pair[0])
        pos_int(f"sr.stages[{i}][1]", pair[1])
    for key in ("train_timesteps", "sample_steps", "batch_size", "steps", "checkpoint_every"):
        pos_int(f"sr.{key}", s[key])
    pos_num("sr.lr", s["lr"])
    o = cfg["optimizer"]
    _require(0 < o["beta1"] < 1, "optimizer.beta1", f"expected (0, 1), got {o['beta1']!r}")
    _require(0 < o["beta2"] < 1, "optimizer.beta2", f"expected (0, 1), got {o['beta2']!r}")


@dataclass
class RunConfig:
    raw: dict

    @staticmethod
    def from_dict(overrides: dict | None = None) -> "RunConfig":
        raw = _deep_merge(DEFAULT_CONFIG, overrides or {})
        validate_config(raw)
        cfg = RunConfig(raw)
        cfg.validate_chain()
        return cfg

    @staticmethod
    def from_file(path: Path) -> "RunConfig":
        try:
            overrides = json.loads(Path(path).read_text())
        except json.JSONDecodeError as e:
            raise ConfigError(f"{path}: invalid JSON ({e})") from e
        return RunConfig.from_dict(overrides)

    # -- shape chain ---------------------------------------------------------

    @property
    def seed(self) -> int:
        return self.raw["seed"]

    @property
    def hr_shape(self) -> tuple[int, int, int]:
        return tuple(self.raw["data"]["hr_shape"])

    @property
    def sr_factor(self) -> int:
        chain = self.raw["sr"]["stages"]
        return chain[-1][1] // chain[0][0]

    @property
    def lr_shape(self) -> tuple[int, int, int]:
        z, h, w = self.hr_shape
        f = self.sr_factor
        return (z, h // f, w // f)

    def token_grid_shape(self) -> tuple[int, int, int]:
        return self.patch_config().token_shape(self.lr_shape)

    def validate_chain(self) -> None:
        """Cross-stage shape validation; runs before any training starts."""
        z, h, w = self.hr_shape
        _require(h == w, "data.hr_shape", f"in-plane dims must be square for the SR cascade, got {h}x{w}")
        cascade = self.cascade()  # raises on a broken 2x/4x chain
        _require(
            cascade.target_size == h,
            "sr.stages", f"cascade target {cascade.target_size} != volume in-plane size {h}",
        )
        _require(
            h % cascade.base_size == 0,
            "sr.stages", f"in-plane size {h} is not a multiple of cascade base {cascade.base_size}",
        )
        patch = self.patch_config()
        try:
            t, r, c = patch.token_shape(self.lr_shape)
        except ValueError as e:
            raise ConfigError(
                f"codec: low-res shape {self.lr_shape} incompatible with patches ({e})"
            ) from e
        cc = self.raw["codec"]
        _require(
            t <= cc["max_axial_tokens"] and r <= cc["max_rows"] and c <= cc["max_cols"],
            "codec", f"token grid {(t, r, c)} exceeds positional tables",
        )

    # -- stage configs ---------------------------------------------------------

    def patch_config(self) -> PatchConfig:
        c = self.raw["codec"]
        return PatchConfig(p1=c["p1"], p2=c["p2"], p_t=c["p_t"], latent_dim=c["latent_dim"])

    def codec_config(self) -> CodecConfig:
        c = self.raw["codec"]
        return CodecConfig(
            patch=self.patch_config(),
            codebook_size=c["codebook_size"],
            beta=c["beta"],
            spatial_layers=c["spatial_layers"],
            causal_layers=c["causal_layers"],
            heads=c["heads"],
            mlp_ratio=c["mlp_ratio"],
            max_axial_tokens=c["max_axial_tokens"],
            max_rows=c["max_rows"],
            max_cols=c["max_cols"],
            reseed_after=c["reseed_after"],
        )

    def masked_config(self) -> MaskedConfig:
        m, c, t = self.raw["maskgen"], self.raw["codec"], self.raw["text"]
        return MaskedConfig(
            codebook_size=c["codebook_size"],
            width=m["width"],
            layers=m["layers"],
            heads=m["heads"],
            d_text=t["d_text"],
            text_max_len=t["max_len"],
            mlp_ratio=m["mlp_ratio"],
            max_axial_tokens=c["max_axial_tokens"],
            max_rows=c["max_rows"],
            max_cols=c["max_cols"],
            critic_weight=m["critic_weight"],
            temperature=tuple(m["temperature"]),
        )

    def sr_stage_config(self, index: int) -> SRStageConfig:
        s, t = self.raw["sr"], self.raw["text"]
        if not 0 <= index < len(s["stages"]):
            raise ConfigError(f"sr.stages: no stage {index}; chain has {len(s['stages'])}")
        pair = s["stages"][index]
        return SRStageConfig(
            input_size=pair[0],
            output_size=pair[1],
            base_width=s["base_width"],
            channel_mults=tuple(s["channel_mults"]),
            d_text=t["d_text"],
            text_max_len=t["max_len"],
            heads=s["heads"],
            train_timesteps=s["train_timesteps"],
            sample_steps=s["sample_steps"],
            aug_max=s["aug_max"],
            aug_sample=s["aug_sample"],
            weighting=s["weighting"],
        )

    def cascade(self) -> CascadeConfig:
        try:
            return CascadeConfig(tuple(tuple(p) for p in self.raw["sr"]["stages"]))
        except ValueError as e:
            raise ConfigError(f"sr.stages: {e}") from e

    @property
    def n_sr_stages(self) -> int:
        return len(self.raw["sr"]["stages"])

    @property
    def betas(self) -> tuple[float, float]:
        return (self.raw["optimizer"]["beta1"], self.raw["optimizer"]["beta2"])

    def hash(self) -> str:
        return config_hash(self.raw)

    def section_hash(self, name: str) -> str:
        return config_hash(self.raw[name])


# ---------------------------------------------------------------------------
# Data plumbing
# ---------------------------------------------------------------------------


def build_run_dataset(config: RunConfig, data_dir: Path) -> PhantomDataset:
    d = config.raw["data"]
    return build_dataset(
        data_dir,
        n_train=d["n_train"],
        n_test=d["n_test"],
        shape=config.hr_shape,
        label_vocab=d["labels"],
        seed=derive_seed(config.seed, "data"),
        prevalence=d["prevalence"],
        exclude_label_sets=d["exclude_label_sets"],
    )


def pool_inplane(volumes: torch.Tensor, factor: int) -> torch.Tensor:
    """Average-pool (N, Z, H, W) in-plane by an integer factor."""
    if factor == 1:
        return volumes
    n, z, h, w = volumes.shape
    flat = volumes.reshape(n * z, 1, h, w)
    return F.avg_pool2d(flat, factor).reshape(n, z, h // factor, w // factor)


def load_split_tensors(dataset: PhantomDataset, split: str):
    """HR volumes (model space), prompts, and the label matrix for a split."""
    recs = dataset.split(split)
    vols = torch.from_numpy(np.stack([hu_to_model(dataset.volume(r).data) for r in recs]))
    prompts = [r.prompt for r in recs]
    return vols, prompts, dataset.label_matrix(recs)


# ---------------------------------------------------------------------------
# Stage training
# ---------------------------------------------------------------------------


def _stage_dir(out_dir: Path, stage: str) -> Path:
    return Path(out_dir) / stage


def _params_digest(module: torch.nn.Module) -> str:
    return config_hash({k: array_hash(v) for k, v in ckpt.state_dict_arrays(module).items()})


def _save_stage(out_dir, stage, config: RunConfig, model, optimizer, step, metrics, upstream=None):
    params = ckpt.state_dict_arrays(model)
    params.update(ckpt.optimizer_arrays(optimizer))
    return ckpt.save_checkpoint(
        _stage_dir(out_dir, stage), stage, config.raw, step, params, metrics, upstream
    )


def _append_log(out_dir: Path, stage: str, entry: dict) -> None:
    path = _stage_dir(out_dir, stage) / "metrics.jsonl"
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("a") as f:
        f.write(json.dumps(entry) + "\n")


def ensure_vocab(out_dir: Path) -> Vocabulary:
    path = Path(out_dir) / "vocab.json"
    if path.exists():
        return Vocabulary.load(path)
    vocab = default_vocabulary()
    path.parent.mkdir(parents=True, exist_ok=True)
    vocab.save(path)
    return vocab


def _maybe_resume(model, optimizer, out_dir, stage, resume: bool) -> int:
    if not resume:
        return 0
    loaded = ckpt.load_checkpoint(_stage_dir(out_dir, stage))
    ckpt.load_state_arrays(
        model, {k: v for k, v in loaded.params.items() if not k.startswith("opt.")}
    )
    ckpt.load_optimizer_arrays(optimizer, loaded.params)
    return loaded.step


def train_stage(
    stage: str,
    config: RunConfig,
    data_dir: Path,
    out_dir: Path,
    resume: bool = False,
    steps_override: int | None = None,
) -> Path:
    """Train one stage ("codec", "maskgen", "sr<i>") and checkpoint it.

    Raises TrainingDiverged on a non-finite loss, leaving the last periodic
    checkpoint in place. Maskgen training freezes the codec and verifies its
    parameter digest is unchanged.
    """
    config.validate_chain()
    out_dir = Path(out_dir)
    dataset = PhantomDataset.open(data_dir)
    if tuple(dataset.shape) != config.hr_shape:
        raise ValueError(
            f"dataset shape {tuple(dataset.shape)} != configured hr_shape {config.hr_shape}"
        )
    if stage == "codec":
        return _train_codec(config, dataset, out_dir, resume, steps_override)
    if stage == "maskgen":
        return _train_maskgen(config, dataset, out_dir, resume, steps_override)
    if stage.startswith("sr") and stage[2:].isdigit():
        return _train_sr(int(stage[2:]), config, dataset, out_dir, resume, steps_override)
    raise ValueError(f"unknown stage {stage!r}; expected codec, maskgen, or sr<i>")


def _train_codec(config, dataset, out_dir, resume, steps_override):
    c = config.raw["codec"]
    seed = derive_seed(config.seed, "codec")
    torch.manual_seed(seed)
    model = VolumeCodec(config.codec_config())
    optimizer = torch.optim.Adam(model.parameters(), lr=c["lr"], betas=config.betas)
    start = _maybe_resume(model, optimizer, out_dir, "codec", resume)
    model.train_steps.fill_(start)

    hr, _, _ = load_split_tensors(dataset, "train")
    lr_vols = pool_inplane(hr, config.sr_factor)
    total = steps_override if steps_override is not None else c["steps"]
    model.train()
    last = {}
    if start == 0:
        _save_stage(out_dir, "codec", config, model, optimizer, 0, last)
    for step in range(start, total):
        rng = np.random.default_rng(derive_seed(seed, "batch", step))
        idx = rng.choice(lr_vols.shape[0], size=min(c["batch_size"], lr_vols.shape[0]), replace=False)
        batch = lr_vols[torch.from_numpy(idx)]
        try:
            ids, embeddings, quantized, terms = model.encode_batch(batch)
            recon = model.decode_embeddings(quantized)
            components = codec_loss(batch, recon, terms)
            loss = components["total"]
            if not torch.isfinite(loss):
                raise FloatingPointError(f"non-finite total loss at step {step}")
        except (FloatingPointError, ValueError) as e:
            if "finite" not in str(e):
                raise
            raise TrainingDiverged(
                f"codec: {e} (step {step}); "
                f"last-good checkpoint retained in {_stage_dir(out_dir, 'codec')}"
            ) from e
        optimizer.zero_grad()
        loss.backward()
        torch.nn.utils.clip_grad_norm_(model.parameters(), c["grad_clip"])
        optimizer.step()
        with torch.no_grad():
            model.quantizer.record_usage(ids)
            g = torch.Generator().manual_seed(derive_seed(seed, "reseed", step))
            model.quantizer.reseed_dead(embeddings.detach(), g)
        model.train_steps += 1
        last = {k: float(v.detach()) if torch.is_tensor(v) else float(v) for k, v in components.items()}
        if step % c["log_every"] == 0 or step == total - 1:
            _append_log(out_dir, "codec", {"step": step, **last})
        if (step + 1) % c["checkpoint_every"] == 0 and step + 1 < total:
            _save_stage(out_dir, "codec", config, model, optimizer, step + 1, last)
    return _save_stage(out_dir, "codec", config, model, optimizer, total, last)


def load_codec(out_dir: Path) -> tuple[VolumeCodec, ckpt.Checkpoint]:
    path = _stage_dir(out_dir, "codec")
    if not (path / "manifest.json").exists():
        raise FileNotFoundError(f"missing upstream checkpoint: codec at {path}")
    loaded = ckpt.load_checkpoint(path)
    run = RunConfig.from_dict(loaded.config)
    model = VolumeCodec(run.codec_config())
    ckpt.load_state_arrays(
        model, {k: v for k, v in loaded.params.items() if not k.startswith("opt.")}
    )
    model.eval()
    return model, loaded


def encode_dataset_ids(codec: VolumeCodec, lr_vols: torch.Tensor, batch: int = 8) -> torch.Tensor:
    with torch.no_grad():
        return torch.cat(
            [codec.encode_batch(lr_vols[i : i + batch])[0] for i in range(0, lr_vols.shape[0], batch)]
        )


def _train_maskgen(config, dataset, out_dir, resume, steps_override):
    m = config.raw["maskgen"]
    codec, codec_ckpt = load_codec(out_dir)
    if codec_ckpt.config_hash != config.hash():
        raise ValueError(
            "codec checkpoint was trained with a different config: "
            f"expected {config.hash()[:12]}, found {codec_ckpt.config_hash[:12]}"
        )
    codec.requires_grad_(False)
    digest_before = _params_digest(codec)

    vocab = ensure_vocab(out_dir)
    seed = derive_seed(config.seed, "maskgen")
    torch.manual_seed(seed)
    model = MaskedTokenModel(config.masked_config(), vocab)
    optimizer = torch.optim.Adam(model.parameters(), lr=m["lr"], betas=config.betas)
    scheduler = torch.optim.lr_scheduler.LambdaLR(
        optimizer,
        lambda step: _warmup_cosine(step, m["warmup_steps"], steps_override or m["steps"]),
    )
    start = _maybe_resume(model, optimizer, out_dir, "maskgen", resume)
    for _ in range(start):
        scheduler.step()
    model.train_steps.fill_(start)

    hr, prompts, _ = load_split_tensors(dataset, "train")
    lr_vols = pool_inplane(hr, config.sr_factor)
    all_ids = encode_dataset_ids(codec, lr_vols)
    schedule = MaskSchedule.cosine(m["inference_steps"])
    total = steps_override if steps_override is not None else m["steps"]
    upstream = {"codec_config": config.section_hash("codec"), "codec_params": digest_before}
    model.train()
    last = {}
    if start == 0:
        _save_stage(out_dir, "maskgen", config, model, optimizer, 0, last, upstream)
    for step in range(start, total):
        rng = np.random.default_rng(derive_seed(seed, "batch", step))
        idx = rng.choice(all_ids.shape[0], size=min(m["batch_size"], all_ids.shape[0]), replace=False)
        try:
            last = masked_train_step(
                model,
                optimizer,
                all_ids[torch.from_numpy(idx)],
                [prompts[i] for i in idx],
                schedule,
                seed=derive_seed(seed, "step", step),
                grad_clip=m["grad_clip"],
            )
        except FloatingPointError as e:
            raise TrainingDiverged(
                f"maskgen: {e}; last-good checkpoint retained in {_stage_dir(out_dir, 'maskgen')}"
            ) from e
        scheduler.step()
        if step % m["log_every"] == 0 or step == total - 1:
            _append_log(out_dir, "maskgen", {"step": step, "lr": scheduler.get_last_lr()[0], **last})
        if (step + 1) % m["checkpoint_every"] == 0 and step + 1 < total:
            _save_stage(out_dir, "maskgen", config, model, optimizer, step + 1, last, upstream)

    digest_after = _params_digest(codec)
    if digest_after != digest_before:
        raise RuntimeError("frozen codec parameters changed during maskgen training")
    return _save_stage(out_dir, "maskgen", config, model, optimizer, total, last, upstream)


def _warmup_cosine(step: int, warmup: int, total: int) -> float:
    if warmup and step < warmup:
        return (step + 1) / warmup
    if total <= warmup:
        return 1.0
    progress = (step - warmup) / max(1, total - warmup)
    return 0.5 * (1.0 + float(np.cos(np.pi * min(progress, 1.0))))


def load_maskgen(out_dir: Path) -> tuple[MaskedTokenModel, ckpt.Checkpoint]:
    path = _stage_dir(out_dir, "maskgen")
    if not (path / "manifest.json").exists():
        raise FileNotFoundError(f"missing upstream checkpoint: maskgen at {path}")
    loaded = ckpt.load_checkpoint(path)
    run = RunConfig.from_dict(loaded.config)
    vocab = Vocabulary.load(Path(out_dir) / "vocab.json")
    model = MaskedTokenModel(run.masked_config(), vocab)
    ckpt.load_state_arrays(
        model, {k: v for k, v in loaded.params.items() if not k.startswith("opt.")}
    )
    model.eval()
    return model, loaded


def _train_sr(index, config, dataset, out_dir, resume, steps_override):
    s = config.raw["sr"]
    stage_cfg = config.sr_stage_config(index)
    vocab = ensure_vocab(out_dir)
    seed = derive_seed(config.seed, "sr", index)
    torch.manual_seed(seed)
    stage = SRStage(stage_cfg, vocab)
    optimizer = torch.optim.Adam(stage.parameters(), lr=s["lr"], betas=config.betas)
    name = f"sr{index}"
    start = _maybe_resume(stage, optimizer, out_dir, name, resume)
    stage.train_steps.fill_(start)

    hr_vols, prompts, _ = load_split_tensors(dataset, "train")
    z = hr_vols.shape[1]
    hr_factor = config.hr_shape[1] // stage_cfg.output_size
    lr_factor = config.hr_shape[1] // stage_cfg.input_size
    hr_stage = pool_inplane(hr_vols, hr_factor)
    lr_stage = pool_inplane(hr_vols, lr_factor)
    n = hr_vols.shape[0]

    total = steps_override if steps_override is not None else s["steps"]
    stage.train()
    last = {}
    if start == 0:
        _save_stage(out_dir, name, config, stage, optimizer, 0, last)
    for step in range(start, total):
        rng = np.random.default_rng(derive_seed(seed, "batch", step))
        vol_idx = rng.integers(0, n, size=s["batch_size"])
        slice_idx = rng.integers(0, z, size=s["batch_size"])
        hr_batch = hr_stage[vol_idx, slice_idx][:, None]
        lr_batch = lr_stage[vol_idx, slice_idx][:, None]
        try:
            last = denoise_train_step(
                stage, optimizer, hr_batch, lr_batch,
                [prompts[i] for i in vol_idx],
                seed=derive_seed(seed, "step", step),
                grad_clip=s["grad_clip"],
            )
        except FloatingPointError as e:
            raise TrainingDiverged(
                f"{name}: {e}; last-good checkpoint retained in {_stage_dir(out_dir, name)}"
            ) from e
        if step % s["log_every"] == 0 or step == total - 1:
            _append_log(out_dir, name, {"step": step, **last})
        if (step + 1) % s["checkpoint_every"] == 0 and step + 1 < total:
            _save_stage(out_dir, name, config, stage, optimizer, step + 1, last)
    return _save_stage(out_dir, name, config, stage, optimizer, total, last)


def load_sr_stage(out_dir: Path, index: int) -> tuple[SRStage, ckpt.Checkpoint]:
    path = _stage_dir(out_dir, f"sr{index}")
    if not (path / "manifest.json").exists():
        raise FileNotFoundError(f"missing upstream checkpoint: sr{index} at {path}")
    loaded = ckpt.load_checkpoint(path)
    run = RunConfig.from_dict(loaded.config)
    vocab = Vocabulary.load(Path(out_dir) / "vocab.json")
    stage = SRStage(run.sr_stage_config(index), vocab)
    ckpt.load_state_arrays(
        stage, {k: v for k, v in loaded.params.items() if not k.startswith("opt.")}
    )
    stage.eval()
    return stage, loaded


# ---------------------------------------------------------------------------
# Inference
# ---------------------------------------------------------------------------


@dataclass
class LoadedPipeline:
    config: RunConfig
    codec: VolumeCodec
    maskgen: MaskedTokenModel
    sr_stages: list[SRStage]

    def grid_shape(self) -> tuple[int, int, int]:
        return self.config.token_grid_shape()


def load_pipeline(out_dir: Path) -> LoadedPipeline:
    """Load all stage checkpoints, refusing mismatched config/upstream chains."""
    codec, codec_ckpt = load_codec(out_dir)
    maskgen, mask_ckpt = load_maskgen(out_dir)
    run = RunConfig.from_dict(codec_ckpt.config)
    if mask_ckpt.config_hash != codec_ckpt.config_hash:
        raise ValueError(
            "checkpoint chain mismatch: maskgen config hash "
            f"{mask_ckpt.config_hash[:12]} != codec {codec_ckpt.config_hash[:12]}"
        )
    expected = mask_ckpt.upstream.get("codec_params")
    found = _params_digest(codec)
    if expected != found:
        raise ValueError(
            f"checkpoint chain mismatch: maskgen was trained against codec params "
            f"{str(expected)[:12]}, found {found[:12]}"
        )
    stages = []
    for i in range(run.n_sr_stages):
        stage, sr_ckpt = load_sr_stage(out_dir, i)
        if sr_ckpt.config_hash != codec_ckpt.config_hash:
            raise ValueError(
                f"checkpoint chain mismatch: sr{i} config hash "
                f"{sr_ckpt.config_hash[:12]} != codec {codec_ckpt.config_hash[:12]}"
            )
        stages.append(stage)
    return LoadedPipeline(config=run, codec=codec, maskgen=maskgen, sr_stages=stages)


def generate_volume(
    pipeline: LoadedPipeline,
    prompt: str,
    seed: int,
    n_sr_steps: int | None = None,
    skip_sr: bool = False,
) -> Volume:
    """prompt -> tokens -> low-res decode -> SR cascade -> HU volume."""
    run = pipeline.config
    m = run.raw["maskgen"]
    text = pipeline.maskgen.text_encoder.encode(prompt, run.raw["text"]["max_len"])
    ids = generate_tokens(
        pipeline.maskgen,
        text,
        MaskSchedule.cosine(m["inference_steps"]),
        seed=derive_seed(seed, "tokens"),
        grid_shape=pipeline.grid_shape(),
        guidance_scale=m["guidance_scale"],
    )
    with torch.no_grad():
        lr_model = pipeline.codec.decode_ids(ids)[0]
    lr_vol = Volume(model_to_hu(lr_model.numpy()), id=f"gen-{seed}")
    if skip_sr:
        return lr_vol
    return run_cascade(lr_vol, prompt, pipeline.sr_stages, seed=seed, n_sample_steps=n_sr_steps)


def batch_generate(
    pipeline: LoadedPipeline,
    prompts: list[str] | Path,
    n_per_prompt: int,
    base_seed: int,
    out_dir: Path,
    n_sr_steps: int | None = None,
    skip_sr: bool = False,
) -> dict:
    """Generate n_per_prompt volumes per prompt under derived distinct seeds.

    Accepts a prompt list or a newline-delimited prompt file. Writes volumes
    plus a manifest mapping each volume to its prompt and seed.
    """
    if isinstance(prompts, (str, Path)):
        text = Path(prompts).read_text()
        prompts = [line.strip() for line in text.splitlines() if line.strip()]
    if not prompts:
        raise ValueError("prompt list is empty")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    records = []
    for pi, prompt in enumerate(prompts):
        for rep in range(n_per_prompt):
            seed = derive_seed(base_seed, "gen", prompt, rep)
            vol = generate_volume(pipeline, prompt, seed, n_sr_steps, skip_sr)
            rec_id = f"gen-{pi:04d}-{rep:02d}"
            vol.id = rec_id
            save_volume(vol, out_dir / f"{rec_id}.raw", out_dir / f"{rec_id}.json")
            records.append(
                {
                    "id": rec_id,
                    "prompt": prompt,
                    "seed": seed,
                    "volume_file": f"{rec_id}.raw",
                    "meta_file": f"{rec_id}.json",
                }
            )
    manifest = {"records": records, "n_per_prompt": n_per_prompt, "base_seed": base_seed}
    (out_dir / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True))
    return manifest
