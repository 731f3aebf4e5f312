"""Session-scoped trained pipeline shared by acceptance and trained-behavior tests.

Training runs once per session (roughly half an hour on two CPU cores).
Set TOMOGEN_TEST_CACHE to a directory to reuse trained artifacts across
local runs; the cache is keyed by the config hash.
"""

import json
import os
import sys
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import pytest
import torch

sys.path.insert(0, str(Path(__file__).parent))

from tomogen.evaluation import ClassifierConfig, VolumeClassifier, alignment_score, train_classifier
from tomogen.phantoms import PhantomDataset, load_volume
from tomogen.pipeline import (
    LoadedPipeline,
    RunConfig,
    batch_generate,
    build_run_dataset,
    load_pipeline,
    train_stage,
)
from tomogen.util import derive_seed

# Desk-scale acceptance configuration, sized for a 2-CPU container.
ACCEPT_CONFIG = {
    "seed": 7,
    "data": {
        "n_train": 96, "n_test": 24, "hr_shape": [9, 64, 64], "prevalence": 0.4,
        "exclude_label_sets": [["central_mass", "nodule"]],
    },
    "text": {"d_text": 64, "max_len": 16},
    "codec": {
        "p1": 4, "p2": 4, "latent_dim": 64, "codebook_size": 64,
        "spatial_layers": 2, "causal_layers": 2, "heads": 4,
        "lr": 6e-4, "batch_size": 4, "steps": 1500,
        "checkpoint_every": 500, "log_every": 100,
    },
    "maskgen": {
        "width": 96, "layers": 3, "heads": 4, "critic_weight": 0.1,
        "inference_steps": 12, "lr": 1e-3, "warmup_steps": 150,
        "batch_size": 8, "steps": 2200, "checkpoint_every": 500, "log_every": 100,
    },
    "sr": {
        "stages": [[32, 64]], "base_width": 24, "channel_mults": [1, 2, 4],
        "train_timesteps": 250, "sample_steps": 24, "lr": 1e-3,
        "batch_size": 4, "steps": 1800, "checkpoint_every": 500, "log_every": 100,
    },
}

POOL_SIZE = 160  # 5x the 32-volume real arm; criterion 7 uses the first 100


@dataclass
class TrainedPipeline:
    config: RunConfig
    data_dir: Path
    run_dir: Path
    dataset: PhantomDataset
    pipeline: LoadedPipeline
    classifier: VolumeClassifier
    classifier_report: dict
    ceiling: dict
    pool_volumes: list
    pool_prompts: list
    pool_labels: np.ndarray

    @property
    def label_names(self) -> list:
        return self.dataset.label_vocab


def _train_all(root: Path) -> None:
    cfg = RunConfig.from_dict(ACCEPT_CONFIG)
    data_dir, run_dir = root / "data", root / "run"
    build_run_dataset(cfg, data_dir)
    train_stage("codec", cfg, data_dir, run_dir)
    train_stage("maskgen", cfg, data_dir, run_dir)
    train_stage("sr0", cfg, data_dir, run_dir)

    pipeline = load_pipeline(run_dir)
    ds = PhantomDataset.open(data_dir)
    train_recs = ds.split("train")
    rng = np.random.default_rng(derive_seed(cfg.seed, "pool-prompts"))
    prompts = [train_recs[i].prompt for i in rng.integers(0, len(train_recs), POOL_SIZE)]
    batch_generate(
        pipeline, prompts, 1, base_seed=derive_seed(cfg.seed, "pool"),
        out_dir=root / "pool",
    )
    (root / "done.json").write_text(json.dumps({"config_hash": cfg.hash()}))


@pytest.fixture(scope="session")
def trained(tmp_path_factory) -> TrainedPipeline:
    cfg = RunConfig.from_dict(ACCEPT_CONFIG)
    cache = os.environ.get("TOMOGEN_TEST_CACHE")
    if cache:
        root = Path(cache)
        root.mkdir(parents=True, exist_ok=True)
        marker = root / "done.json"
        stale = (
            not marker.exists()
            or json.loads(marker.read_text()).get("config_hash") != cfg.hash()
        )
        if stale:
            for sub in ("data", "run", "pool", "done.json"):
                path = root / sub
                if path.is_dir():
                    import shutil

                    shutil.rmtree(path)
                elif path.exists():
                    path.unlink()
            _train_all(root)
    else:
        root = tmp_path_factory.mktemp("trained_pipeline")
        _train_all(root)

    ds = PhantomDataset.open(root / "data")
    pipeline = load_pipeline(root / "run")
    train_recs, test_recs = ds.split("train"), ds.split("test")
    labels = ds.label_vocab
    classifier, report = train_classifier(
        [ds.volume(r).data for r in train_recs], ds.label_matrix(train_recs),
        [ds.volume(r).data for r in test_recs], ds.label_matrix(test_recs),
        labels, ClassifierConfig(epochs=15, seed=derive_seed(cfg.seed, "oracle")),
    )
    ceiling = alignment_score(
        [ds.volume(r).data for r in test_recs], [r.prompt for r in test_recs],
        classifier, labels,
    )
    pool_manifest = json.loads((root / "pool" / "manifest.json").read_text())
    pool_volumes, pool_prompts = [], []
    from tomogen.evaluation import parse_prompt_labels

    pool_labels = []
    for rec in pool_manifest["records"]:
        vol = load_volume(root / "pool" / rec["volume_file"], root / "pool" / rec["meta_file"])
        pool_volumes.append(vol.data)
        pool_prompts.append(rec["prompt"])
        present = parse_prompt_labels(rec["prompt"])
        pool_labels.append([1.0 if k in present else 0.0 for k in labels])
    return TrainedPipeline(
        config=cfg,
        data_dir=root / "data",
        run_dir=root / "run",
        dataset=ds,
        pipeline=pipeline,
        classifier=classifier,
        classifier_report=report,
        ceiling=ceiling,
        pool_volumes=pool_volumes,
        pool_prompts=pool_prompts,
        pool_labels=np.asarray(pool_labels, np.float32),
    )
