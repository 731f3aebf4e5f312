import json

import numpy as np
import pytest
import torch

from tomogen import checkpoint as ckpt
from tomogen.cli import main as cli_main
from tomogen.phantoms import PhantomDataset
from tomogen.pipeline import (
    ConfigError,
    RunConfig,
    TrainingDiverged,
    batch_generate,
    build_run_dataset,
    generate_volume,
    load_codec,
    load_pipeline,
    pool_inplane,
    train_stage,
)

TINY = {
    "seed": 11,
    "data": {"n_train": 6, "n_test": 3, "hr_shape": [9, 64, 64]},
    "codec": {
        "p1": 4, "p2": 4, "latent_dim": 32, "codebook_size": 32,
        "spatial_layers": 1, "causal_layers": 1,
        "steps": 8, "checkpoint_every": 4, "batch_size": 2, "log_every": 4,
    },
    "maskgen": {
        "width": 32, "layers": 1, "steps": 6, "batch_size": 2,
        "warmup_steps": 2, "checkpoint_every": 3, "inference_steps": 4, "log_every": 3,
    },
    "sr": {
        "stages": [[32, 64]], "base_width": 8, "channel_mults": [1, 2],
        "train_timesteps": 50, "sample_steps": 6, "steps": 6,
        "batch_size": 2, "checkpoint_every": 3, "log_every": 3,
    },
    "text": {"d_text": 16, "max_len": 12},
}


@pytest.fixture(scope="module")
def tiny_run(tmp_path_factory):
    root = tmp_path_factory.mktemp("tiny_run")
    cfg = RunConfig.from_dict(TINY)
    data_dir = root / "data"
    build_run_dataset(cfg, data_dir)
    out = root / "run"
    train_stage("codec", cfg, data_dir, out)
    train_stage("maskgen", cfg, data_dir, out)
    train_stage("sr0", cfg, data_dir, out)
    return cfg, data_dir, out


# -- config -------------------------------------------------------------------


def test_default_config_is_valid():
    cfg = RunConfig.from_dict({})
    assert cfg.hr_shape == (17, 256, 256)
    assert cfg.lr_shape == (17, 64, 64)
    assert cfg.sr_factor == 4
    assert cfg.token_grid_shape() == (9, 8, 8)
    assert cfg.betas == (0.9, 0.99)


def test_config_error_paths():
    with pytest.raises(ConfigError, match="codec.p1"):
        RunConfig.from_dict({"codec": {"p1": -1}})
    with pytest.raises(ConfigError, match="data.prevalence"):
        RunConfig.from_dict({"data": {"prevalence": 2.0}})
    with pytest.raises(ConfigError, match="unknown config key"):
        RunConfig.from_dict({"cdec": {}})
    with pytest.raises(ConfigError, match="sr.stages"):
        RunConfig.from_dict({"sr": {"stages": [[64, 96]]}})


def test_config_chain_validation():
    with pytest.raises(ConfigError, match="square"):
        RunConfig.from_dict({"data": {"hr_shape": [9, 64, 32]}})
    with pytest.raises(ConfigError, match="cascade target"):
        RunConfig.from_dict({"data": {"hr_shape": [9, 128, 128]}})
    with pytest.raises(ConfigError, match="incompatible with patches"):
        RunConfig.from_dict(
            {"data": {"hr_shape": [10, 256, 256]}}  # Z-1 = 9 not divisible by p_t = 2
        )


def test_config_from_file(tmp_path):
    path = tmp_path / "cfg.json"
    path.write_text(json.dumps({"seed": 5}))
    assert RunConfig.from_file(path).seed == 5
    path.write_text("{bad json")
    with pytest.raises(ConfigError, match="invalid JSON"):
        RunConfig.from_file(path)


def test_pool_inplane():
    x = torch.arange(16.0).reshape(1, 1, 4, 4)
    out = pool_inplane(x, 2)
    assert out.shape == (1, 1, 2, 2)
    assert float(out[0, 0, 0, 0]) == pytest.approx((0 + 1 + 4 + 5) / 4)


# -- training / checkpointing --------------------------------------------------


def test_stage_checkpoints_and_provenance(tiny_run):
    cfg, data_dir, out = tiny_run
    codec_ck = ckpt.load_checkpoint(out / "codec")
    mask_ck = ckpt.load_checkpoint(out / "maskgen")
    assert codec_ck.step == 8 and mask_ck.step == 6
    # provenance chaining: maskgen records the codec hashes it trained against
    assert mask_ck.upstream["codec_config"] == cfg.section_hash("codec")
    assert "codec_params" in mask_ck.upstream
    assert mask_ck.config_hash == codec_ck.config_hash


def test_codec_params_unchanged_by_maskgen_training(tiny_run):
    cfg, data_dir, out = tiny_run
    from tomogen.pipeline import _params_digest

    codec, _ = load_codec(out)
    mask_ck = ckpt.load_checkpoint(out / "maskgen")
    assert _params_digest(codec) == mask_ck.upstream["codec_params"]


def test_missing_upstream_checkpoint_named(tmp_path):
    cfg = RunConfig.from_dict(TINY)
    data_dir = tmp_path / "data"
    build_run_dataset(cfg, data_dir)
    with pytest.raises(FileNotFoundError, match="codec"):
        train_stage("maskgen", cfg, data_dir, tmp_path / "empty_run")


def test_unknown_stage_rejected(tiny_run):
    cfg, data_dir, out = tiny_run
    with pytest.raises(ValueError, match="unknown stage"):
        train_stage("warp", cfg, data_dir, out)


def test_resume_continues_step_counter(tmp_path):
    cfg = RunConfig.from_dict(TINY)
    data_dir = tmp_path / "data"
    build_run_dataset(cfg, data_dir)
    out = tmp_path / "run"
    train_stage("codec", cfg, data_dir, out, steps_override=4)
    first = ckpt.load_checkpoint(out / "codec")
    assert first.step == 4
    train_stage("codec", cfg, data_dir, out, resume=True, steps_override=8)
    second = ckpt.load_checkpoint(out / "codec")
    assert second.step == 8
    # resumed run equals an uninterrupted one exactly (stateless batch seeds)
    out2 = tmp_path / "run2"
    train_stage("codec", cfg, data_dir, out2, steps_override=8)
    full = ckpt.load_checkpoint(out2 / "codec")
    for name in full.params:
        assert np.array_equal(full.params[name], second.params[name]), name


def test_nan_divergence_aborts_retaining_checkpoint(tmp_path):
    bad = dict(TINY)
    bad["codec"] = {**TINY["codec"], "lr": 1e12, "steps": 8, "checkpoint_every": 2, "grad_clip": 1e18}
    cfg = RunConfig.from_dict(bad)
    data_dir = tmp_path / "data"
    build_run_dataset(cfg, data_dir)
    out = tmp_path / "run"
    with pytest.raises(TrainingDiverged, match="codec"):
        train_stage("codec", cfg, data_dir, out)
    retained = ckpt.load_checkpoint(out / "codec")
    assert retained.step < 8
    assert all(np.isfinite(v).all() for v in retained.params.values())


def test_dataset_shape_mismatch_rejected(tmp_path):
    cfg = RunConfig.from_dict(TINY)
    other = RunConfig.from_dict({**TINY, "data": {**TINY["data"], "hr_shape": [17, 64, 64]}})
    data_dir = tmp_path / "data"
    build_run_dataset(other, data_dir)
    with pytest.raises(ValueError, match="hr_shape"):
        train_stage("codec", cfg, data_dir, tmp_path / "run")


# -- inference ----------------------------------------------------------------


def test_generate_volume_deterministic(tiny_run):
    cfg, data_dir, out = tiny_run
    pipe = load_pipeline(out)
    a = generate_volume(pipe, "40 years old male: nodule", seed=5)
    b = generate_volume(pipe, "40 years old male: nodule", seed=5)
    assert a.shape == (9, 64, 64)
    assert np.array_equal(a.data, b.data)
    assert a.data.min() >= -1000.0 and a.data.max() <= 1000.0


def test_generate_volume_skip_sr_is_lr(tiny_run):
    cfg, data_dir, out = tiny_run
    pipe = load_pipeline(out)
    lr = generate_volume(pipe, "40 years old male: effusion", seed=3, skip_sr=True)
    assert lr.shape == (9, 32, 32)


def test_checkpoint_chain_mismatch_rejected(tiny_run, tmp_path):
    cfg, data_dir, out = tiny_run
    import shutil

    clone = tmp_path / "clone"
    shutil.copytree(out, clone)
    # swap in a codec trained under a different seed: params digest changes
    other = RunConfig.from_dict({**TINY, "seed": 99})
    build_run_dataset(other, tmp_path / "data99")
    train_stage("codec", other, tmp_path / "data99", tmp_path / "run99")
    shutil.rmtree(clone / "codec")
    shutil.copytree(tmp_path / "run99" / "codec", clone / "codec")
    with pytest.raises(ValueError, match="chain mismatch"):
        load_pipeline(clone)


def test_batch_generate_counts_and_manifest(tiny_run, tmp_path):
    cfg, data_dir, out = tiny_run
    pipe = load_pipeline(out)
    prompts = [
        "40 years old male: nodule",
        "60 years old female: effusion",
        "30 years old male: no abnormality",
    ]
    manifest = batch_generate(pipe, prompts, 2, base_seed=0, out_dir=tmp_path / "gen", skip_sr=True)
    assert len(manifest["records"]) == 6
    seeds = {r["seed"] for r in manifest["records"]}
    assert len(seeds) == 6
    listed = json.loads((tmp_path / "gen" / "manifest.json").read_text())
    assert len(listed["records"]) == 6


def test_batch_generate_from_file_and_empty_rejection(tiny_run, tmp_path):
    cfg, data_dir, out = tiny_run
    pipe = load_pipeline(out)
    pfile = tmp_path / "prompts.txt"
    pfile.write_text("40 years old male: nodule\n\n60 years old female: effusion\n")
    manifest = batch_generate(pipe, pfile, 1, base_seed=1, out_dir=tmp_path / "gen2", skip_sr=True)
    assert len(manifest["records"]) == 2
    empty = tmp_path / "empty.txt"
    empty.write_text("\n\n")
    with pytest.raises(ValueError, match="empty"):
        batch_generate(pipe, empty, 1, base_seed=0, out_dir=tmp_path / "gen3")


# -- dataset plumbing ----------------------------------------------------------


def test_build_run_dataset_matches_config(tiny_run):
    cfg, data_dir, out = tiny_run
    ds = PhantomDataset.open(data_dir)
    assert tuple(ds.shape) == cfg.hr_shape
    assert len(ds.split("train")) == 6
    assert len(ds.split("test")) == 3


# -- CLI ------------------------------------------------------------------------


def test_cli_data_and_train(tmp_path, capsys):
    cfg_path = tmp_path / "cfg.json"
    cfg_path.write_text(json.dumps({**TINY, "out_dir": str(tmp_path / "run")}))
    assert cli_main(["data", "--config", str(cfg_path)]) == 0
    assert cli_main(["train-codec", "--config", str(cfg_path), "--steps", "2"]) == 0
    out = capsys.readouterr().out
    assert "codec checkpoint" in out
    assert (tmp_path / "run" / "codec" / "manifest.json").exists()


def test_cli_generate_requires_prompt(tmp_path):
    cfg_path = tmp_path / "cfg.json"
    cfg_path.write_text(json.dumps({**TINY, "out_dir": str(tmp_path / "nope")}))
    with pytest.raises(FileNotFoundError):
        cli_main(["generate", "--config", str(cfg_path), "--prompt", "x: nodule"])
