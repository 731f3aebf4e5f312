"""Generation-quality metrics and the multi-label volume classifier.

Fréchet feature distances (volume- and slice-level), rank-based AP/AUROC,
a small 3-D conv classifier whose penultimate activations double as the
domain feature extractor, and the prompt-alignment score.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .phantoms import (
    IMPRESSION_PHRASES,
    KINDS,
    NO_FINDING_PHRASE,
    Volume,
)
from .util import config_hash, derive_seed, hu_to_model


# ---------------------------------------------------------------------------
# Frechet distance
# ---------------------------------------------------------------------------

EIG_FLOOR = -1e-6


def _check_covariance(name: str, s: np.ndarray, dim: int) -> None:
    if s.shape != (dim, dim):
        raise ValueError(f"{name} must be ({dim}, {dim}), got {s.shape}")
    if not np.allclose(s, s.T, atol=1e-8):
        raise ValueError(f"{name} is not symmetric")
    w_min = float(np.linalg.eigvalsh(s).min())
    if w_min < EIG_FLOOR:
        raise ValueError(f"{name} is indefinite: min eigenvalue {w_min:.3e}")


def _psd_sqrt(s: np.ndarray) -> np.ndarray:
    w, v = np.linalg.eigh(s)
    w = np.where((w < 0) & (w > EIG_FLOOR), 0.0, w)
    return (v * np.sqrt(np.maximum(w, 0.0))) @ v.T


def frechet_distance(mu1, s1, mu2, s2) -> float:
    """||mu1 - mu2||^2 + Tr(S1 + S2 - 2 (S1 S2)^{1/2}).

    The product square root is taken on the symmetrized form
    S2^{1/2} S1 S2^{1/2}; eigenvalues above -1e-6 are clamped to zero.
    """
    mu1, mu2 = np.asarray(mu1, np.float64), np.asarray(mu2, np.float64)
    s1, s2 = np.asarray(s1, np.float64), np.asarray(s2, np.float64)
    if mu1.shape != mu2.shape:
        raise ValueError(f"mean dimensions differ: {mu1.shape} vs {mu2.shape}")
    dim = mu1.shape[0]
    _check_covariance("S1", s1, dim)
    _check_covariance("S2", s2, dim)
    root2 = _psd_sqrt(s2)
    inner = root2 @ s1 @ root2
    inner = (inner + inner.T) / 2.0
    w = np.linalg.eigvalsh(inner)
    w = np.where((w < 0) & (w > EIG_FLOOR), 0.0, w)
    if w.min() < EIG_FLOOR:
        raise ValueError(f"product matrix indefinite: min eigenvalue {w.min():.3e}")
    tr_sqrt = float(np.sqrt(np.maximum(w, 0.0)).sum())
    diff = float(((mu1 - mu2) ** 2).sum())
    return diff + float(np.trace(s1) + np.trace(s2)) - 2.0 * tr_sqrt


def fit_gaussian(features: np.ndarray) -> tuple[np.ndarray, np.ndarray, bool]:
    """Mean/covariance of row features; shrinks (and flags) when n <= dim."""
    features = np.asarray(features, np.float64)
    n, dim = features.shape
    mu = features.mean(axis=0)
    if n < 2:
        return mu, np.eye(dim) * 1e-6, True
    cov = np.cov(features, rowvar=False)
    shrunk = n <= dim
    if shrunk:
        cov = cov + np.eye(dim) * max(1e-6, 1e-3 * float(np.trace(cov)) / dim)
    return mu, cov, shrunk


# ---------------------------------------------------------------------------
# Ranking metrics
# ---------------------------------------------------------------------------


def average_precision(scores, labels) -> float | None:
    """Interpolation-free AP: precision summed at each positive recall step.

    Thresholds sweep the distinct score values (ties grouped). Returns None
    when only one class is present.
    """
    scores = np.asarray(scores, np.float64)
    labels = np.asarray(labels)
    n_pos = int(labels.sum())
    if n_pos == 0 or n_pos == len(labels):
        return None
    order = np.argsort(-scores, kind="stable")
    s, y = scores[order], labels[order]
    boundaries = np.nonzero(np.diff(s))[0]
    cut = np.concatenate([boundaries, [len(s) - 1]])
    tp = np.cumsum(y)[cut]
    fp = np.cumsum(1 - y)[cut]
    precision = tp / (tp + fp)
    recall = tp / n_pos
    prev = np.concatenate([[0.0], recall[:-1]])
    return float(((recall - prev) * precision).sum())


def auroc(scores, labels) -> float | None:
    """Rank-statistic AUROC with midranks for ties; None if single-class."""
    scores = np.asarray(scores, np.float64)
    labels = np.asarray(labels)
    n_pos = int(labels.sum())
    n_neg = len(labels) - n_pos
    if n_pos == 0 or n_neg == 0:
        return None
    order = np.argsort(scores, kind="stable")
    ranks = np.empty(len(scores), np.float64)
    sorted_scores = scores[order]
    i = 0
    while i < len(scores):
        j = i
        while j + 1 < len(scores) and sorted_scores[j + 1] == sorted_scores[i]:
            j += 1
        ranks[order[i : j + 1]] = (i + j) / 2.0 + 1.0
        i = j + 1
    u = float(ranks[labels.astype(bool)].sum()) - n_pos * (n_pos + 1) / 2.0
    return u / (n_pos * n_neg)


# ---------------------------------------------------------------------------
# Multi-label 3-D classifier / feature extractor
# ---------------------------------------------------------------------------


@dataclass
class FeatureExtractor:
    """Deterministic Volume/slice -> feature-vector map with provenance."""

    fn: Callable[[np.ndarray], np.ndarray]
    dim: int
    provenance: str


class VolumeClassifier(nn.Module):
    """4-block 3-D conv net, global pooling, per-label sigmoid heads."""

    def __init__(self, n_labels: int, widths=(16, 32, 64, 64)):
        super().__init__()
        chans = [1, *widths]
        blocks = []
        for i in range(4):
            stride = (1, 2, 2) if i == 0 else 2
            blocks += [
                nn.Conv3d(chans[i], chans[i + 1], 3, stride=stride, padding=1),
                nn.GroupNorm(4, chans[i + 1]),
                nn.SiLU(),
            ]
        self.tower = nn.Sequential(*blocks)
        self.head = nn.Linear(widths[-1], n_labels)
        self.n_labels = n_labels
        self.feature_dim = widths[-1]

    def features(self, x: torch.Tensor) -> torch.Tensor:
        h = self.tower(x[:, None] if x.dim() == 4 else x)
        return h.mean(dim=(2, 3, 4))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.head(self.features(x))


@dataclass
class ClassifierConfig:
    epochs: int = 15
    batch_size: int = 8
    lr: float = 1e-3
    weight_decay: float = 1e-7
    momentum: float = 0.9
    max_steps: int | None = None  # overrides epochs when set (fixed-budget arms)
    seed: int = 0


def _to_model_space(volumes) -> np.ndarray:
    arr = np.stack(
        [hu_to_model(v.data if isinstance(v, Volume) else v) for v in volumes]
    )
    return arr


def train_classifier(
    train_volumes,
    train_labels: np.ndarray,
    val_volumes,
    val_labels: np.ndarray,
    label_names: Sequence[str],
    cfg: ClassifierConfig | None = None,
) -> tuple[VolumeClassifier, dict]:
    """Train the multi-label classifier; report per-label AP/AUROC on the val split.

    Labels whose val column is single-class get None metrics and are excluded
    from the means. The trained model's penultimate layer is exposed through
    :func:`classifier_extractor`.
    """
    cfg = cfg or ClassifierConfig()
    x = torch.from_numpy(_to_model_space(train_volumes))
    y = torch.from_numpy(np.asarray(train_labels, np.float32))
    if y.ndim != 2 or y.shape[1] < 2:
        raise ValueError(f"need a multi-label matrix with >= 2 labels, got {tuple(y.shape)}")
    torch.manual_seed(derive_seed(cfg.seed, "classifier-init"))
    model = VolumeClassifier(y.shape[1])
    opt = torch.optim.SGD(
        model.parameters(), lr=cfg.lr, momentum=cfg.momentum, weight_decay=cfg.weight_decay
    )
    n = x.shape[0]
    steps_per_epoch = max(1, (n + cfg.batch_size - 1) // cfg.batch_size)
    total_steps = cfg.max_steps if cfg.max_steps else cfg.epochs * steps_per_epoch
    model.train()
    for step in range(total_steps):
        rng = np.random.default_rng(derive_seed(cfg.seed, "classifier", step))
        idx = torch.from_numpy(rng.choice(n, size=min(cfg.batch_size, n), replace=False))
        logits = model(x[idx])
        loss = F.binary_cross_entropy_with_logits(logits, y[idx])
        if not torch.isfinite(loss):
            raise FloatingPointError(f"classifier diverged at step {step}")
        opt.zero_grad()
        loss.backward()
        opt.step()
    report = evaluate_classifier(model, val_volumes, val_labels, label_names)
    report["train_steps"] = total_steps
    return model, report


def predict_scores(model: VolumeClassifier, volumes, batch: int = 16) -> np.ndarray:
    x = torch.from_numpy(_to_model_space(volumes))
    model.eval()
    outs = []
    with torch.no_grad():
        for start in range(0, x.shape[0], batch):
            outs.append(torch.sigmoid(model(x[start : start + batch])))
    return torch.cat(outs).numpy()


def evaluate_classifier(model, volumes, labels: np.ndarray, label_names) -> dict:
    scores = predict_scores(model, volumes)
    labels = np.asarray(labels)
    per_label = {}
    for i, name in enumerate(label_names):
        per_label[name] = {
            "ap": average_precision(scores[:, i], labels[:, i]),
            "auroc": auroc(scores[:, i], labels[:, i]),
            "frequency": float(labels[:, i].mean()),
        }
    defined_ap = [m["ap"] for m in per_label.values() if m["ap"] is not None]
    defined_roc = [m["auroc"] for m in per_label.values() if m["auroc"] is not None]
    return {
        "per_label": per_label,
        "mean_ap": float(np.mean(defined_ap)) if defined_ap else None,
        "mean_auroc": float(np.mean(defined_roc)) if defined_roc else None,
        "n_val": int(labels.shape[0]),
    }


def classifier_extractor(model: VolumeClassifier, granularity: str = "volume") -> FeatureExtractor:
    """Penultimate-layer features over whole volumes or single slices."""

    def volume_features(vol: np.ndarray) -> np.ndarray:
        x = torch.from_numpy(hu_to_model(vol))[None]
        model.eval()
        with torch.no_grad():
            return model.features(x)[0].numpy()

    def slice_features(sl: np.ndarray) -> np.ndarray:
        return volume_features(sl[None])

    fn = volume_features if granularity == "volume" else slice_features
    return FeatureExtractor(
        fn=fn,
        dim=model.feature_dim,
        provenance=f"classifier.penultimate/{granularity}",
    )


# ---------------------------------------------------------------------------
# Generation metrics and alignment
# ---------------------------------------------------------------------------


@dataclass
class MetricReport:
    scalars: dict
    sample_counts: dict
    seeds: list = field(default_factory=list)
    config_digest: str = ""
    provenance: dict = field(default_factory=dict)
    flags: dict = field(default_factory=dict)

    def __post_init__(self):
        for k, v in self.scalars.items():
            if v is not None and not np.isfinite(v):
                raise ValueError(f"metric {k} is not finite: {v}")

    def to_dict(self) -> dict:
        return {
            "scalars": self.scalars,
            "sample_counts": self.sample_counts,
            "seeds": self.seeds,
            "config_digest": self.config_digest,
            "provenance": self.provenance,
            "flags": self.flags,
        }


def compute_generation_metrics(
    real_volumes,
    generated_volumes,
    volume_extractor: FeatureExtractor,
    slice_extractor: FeatureExtractor | None = None,
    config: dict | None = None,
) -> MetricReport:
    """Volume- and slice-level Fréchet distances between Gaussian feature fits."""
    if not len(real_volumes) or not len(generated_volumes):
        raise ValueError("both real and generated sets must be non-empty")
    real = [v.data if isinstance(v, Volume) else v for v in real_volumes]
    gen = [v.data if isinstance(v, Volume) else v for v in generated_volumes]

    flags = {}
    feats_real = np.stack([volume_extractor.fn(v) for v in real])
    feats_gen = np.stack([volume_extractor.fn(v) for v in gen])
    if not (np.isfinite(feats_real).all() and np.isfinite(feats_gen).all()):
        raise ValueError("feature extractor produced non-finite values")
    mu_r, s_r, f1 = fit_gaussian(feats_real)
    mu_g, s_g, f2 = fit_gaussian(feats_gen)
    flags["volume_covariance_shrunk"] = bool(f1 or f2)
    scalars = {"frechet_volume": frechet_distance(mu_r, s_r, mu_g, s_g)}

    if slice_extractor is not None:
        sl_real = np.stack([slice_extractor.fn(s) for v in real for s in v])
        sl_gen = np.stack([slice_extractor.fn(s) for v in gen for s in v])
        mu_r, s_r, f1 = fit_gaussian(sl_real)
        mu_g, s_g, f2 = fit_gaussian(sl_gen)
        flags["slice_covariance_shrunk"] = bool(f1 or f2)
        scalars["frechet_slice"] = frechet_distance(mu_r, s_r, mu_g, s_g)

    return MetricReport(
        scalars=scalars,
        sample_counts={"n_real": len(real), "n_generated": len(gen)},
        config_digest=config_hash(config or {}),
        provenance={
            "volume_extractor": volume_extractor.provenance,
            "slice_extractor": slice_extractor.provenance if slice_extractor else None,
        },
        flags=flags,
    )


def parse_prompt_labels(prompt: str) -> tuple[str, ...]:
    """Invert the closed prompt template into its declared label set."""
    if ": " not in prompt:
        raise ValueError(f"unparseable prompt (no ': ' separator): {prompt!r}")
    impression = prompt.split(": ", 1)[1]
    phrase_to_kind = {v: k for k, v in IMPRESSION_PHRASES.items()}
    labels = []
    for phrase in impression.split(". "):
        phrase = phrase.strip().rstrip(".")
        if phrase == NO_FINDING_PHRASE:
            continue
        if phrase not in phrase_to_kind:
            raise ValueError(f"unparseable prompt: unknown phrase {phrase!r} in {prompt!r}")
        labels.append(phrase_to_kind[phrase])
    return tuple(sorted(labels))


def alignment_score(
    generated_volumes,
    prompts: Sequence[str],
    classifier: VolumeClassifier,
    label_names: Sequence[str] = KINDS,
    threshold: float = 0.5,
) -> dict:
    """Per-attribute agreement between classifier predictions and prompt labels.

    For each volume the classifier's thresholded label set is compared to the
    prompt-declared set; reports per-attribute accuracy and their unweighted
    mean.
    """
    if len(generated_volumes) != len(prompts):
        raise ValueError("volumes and prompts must pair up")
    names = list(label_names)
    declared = np.zeros((len(prompts), len(names)), np.float32)
    for i, p in enumerate(prompts):
        for k in parse_prompt_labels(p):
            declared[i, names.index(k)] = 1.0
    scores = predict_scores(classifier, generated_volumes)
    predicted = (scores >= threshold).astype(np.float32)
    per_attribute = {
        name: float((predicted[:, i] == declared[:, i]).mean())
        for i, name in enumerate(names)
    }
    return {
        "per_attribute": per_attribute,
        "mean": float(np.mean(list(per_attribute.values()))),
        "n": len(prompts),
    }
