"""Data-augmentation and unseen-prompt classification experiments.

Each experiment trains classifier arms on identical step budgets and
evaluates every arm on the same held-out real test split, reporting
per-arm mean AP/AUROC with seed variance plus a per-label table.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .evaluation import ClassifierConfig, evaluate_classifier, train_classifier
from .util import derive_seed


@dataclass
class ArmResult:
    name: str
    seed: int
    mean_ap: float | None
    mean_auroc: float | None
    per_label: dict
    failed: bool = False


@dataclass
class ExperimentReport:
    arms: list[ArmResult]
    test_manifest_hash: str
    budget_steps: int
    seeds: list[int]
    label_names: list[str]
    extras: dict = field(default_factory=dict)

    def arm_names(self) -> list[str]:
        return sorted({a.name for a in self.arms})

    def median_mean_ap(self, arm: str) -> float:
        vals = [a.mean_ap for a in self.arms if a.name == arm and not a.failed and a.mean_ap is not None]
        if not vals:
            raise ValueError(f"no successful runs for arm {arm!r}")
        return float(np.median(vals))

    def median_mean_auroc(self, arm: str) -> float:
        vals = [a.mean_auroc for a in self.arms if a.name == arm and not a.failed and a.mean_auroc is not None]
        return float(np.median(vals))

    def table(self) -> str:
        """Per-label table: label, then AUROC / AP per arm, then test frequency."""
        arms = self.arm_names()
        freq = {}
        med = {arm: {} for arm in arms}
        for arm in arms:
            runs = [a for a in self.arms if a.name == arm and not a.failed]
            for label in self.label_names:
                aps = [r.per_label[label]["ap"] for r in runs if r.per_label[label]["ap"] is not None]
                rocs = [r.per_label[label]["auroc"] for r in runs if r.per_label[label]["auroc"] is not None]
                med[arm][label] = (
                    float(np.median(rocs)) if rocs else float("nan"),
                    float(np.median(aps)) if aps else float("nan"),
                )
                if runs:
                    freq[label] = runs[0].per_label[label]["frequency"]
        header = ["label"] + [f"{a} AUROC|AP" for a in arms] + ["test freq"]
        lines = ["  ".join(f"{h:>24}" for h in header)]
        for label in self.label_names:
            cells = [f"{label:>24}"]
            for arm in arms:
                roc, ap = med[arm][label]
                cells.append(f"{roc:>12.3f}|{ap:<11.3f}")
            cells.append(f"{freq.get(label, float('nan')):>24.3f}")
            lines.append("  ".join(cells))
        return "\n".join(lines)

    def to_dict(self) -> dict:
        return {
            "arms": [vars(a) for a in self.arms],
            "test_manifest_hash": self.test_manifest_hash,
            "budget_steps": self.budget_steps,
            "seeds": self.seeds,
            "label_names": self.label_names,
            "extras": self.extras,
        }


def _make_arm(name, volumes, labels):
    return {"name": name, "volumes": volumes, "labels": np.asarray(labels, np.float32)}


def _run_arms(
    arms: list[dict],
    test_volumes,
    test_labels: np.ndarray,
    label_names: Sequence[str],
    seeds: Sequence[int],
    budget_steps: int,
    batch_size: int,
    test_manifest_hash: str,
    extras: dict | None = None,
) -> ExperimentReport:
    results = []
    for seed in seeds:
        for arm in arms:
            cfg = ClassifierConfig(
                max_steps=budget_steps,
                batch_size=batch_size,
                seed=derive_seed(seed, "arm", arm["name"]),
            )
            try:
                model, _ = train_classifier(
                    arm["volumes"], arm["labels"], test_volumes, test_labels, label_names, cfg
                )
                report = evaluate_classifier(model, test_volumes, test_labels, label_names)
                results.append(
                    ArmResult(
                        name=arm["name"],
                        seed=seed,
                        mean_ap=report["mean_ap"],
                        mean_auroc=report["mean_auroc"],
                        per_label=report["per_label"],
                    )
                )
            except FloatingPointError:
                results.append(
                    ArmResult(arm["name"], seed, None, None, per_label={}, failed=True)
                )
    return ExperimentReport(
        arms=results,
        test_manifest_hash=test_manifest_hash,
        budget_steps=budget_steps,
        seeds=list(seeds),
        label_names=list(label_names),
        extras=extras or {},
    )


def run_augmentation_experiment(
    real_volumes,
    real_labels: np.ndarray,
    synth_volumes,
    synth_labels: np.ndarray,
    test_volumes,
    test_labels: np.ndarray,
    label_names: Sequence[str],
    real_n: int,
    synth_multipliers: Sequence[int] = (1, 5),
    seeds: Sequence[int] = (0, 1, 2, 3, 4),
    budget_steps: int = 240,
    batch_size: int = 8,
    test_manifest_hash: str = "",
) -> ExperimentReport:
    """Arms: real-only, real + 1x synthetic, and kx synthetic-only per multiplier.

    All arms share the test split and the training step budget. A diverged
    arm is marked failed and the experiment continues.
    """
    if real_n > len(real_volumes):
        raise ValueError(f"real_n={real_n} exceeds available real volumes {len(real_volumes)}")
    need = max(synth_multipliers) * real_n
    if need > len(synth_volumes):
        raise ValueError(f"need {need} synthetic volumes, pool has {len(synth_volumes)}")
    real_v = list(real_volumes[:real_n])
    real_y = np.asarray(real_labels[:real_n], np.float32)

    arms = [_make_arm("real", real_v, real_y)]
    arms.append(
        _make_arm(
            "real+synth",
            real_v + list(synth_volumes[:real_n]),
            np.concatenate([real_y, synth_labels[:real_n]]),
        )
    )
    for k in synth_multipliers:
        arms.append(
            _make_arm(
                f"synth_{k}x",
                list(synth_volumes[: k * real_n]),
                np.asarray(synth_labels[: k * real_n], np.float32),
            )
        )
    return _run_arms(
        arms, test_volumes, test_labels, label_names, seeds, budget_steps,
        batch_size, test_manifest_hash,
        extras={"real_n": real_n, "synth_multipliers": list(synth_multipliers)},
    )


def check_prompt_leakage(
    training_label_sets: Sequence[Sequence[str]],
    held_out_sets: Sequence[Sequence[str]],
) -> None:
    held = {tuple(sorted(s)) for s in held_out_sets}
    leaked = sorted({tuple(sorted(s)) for s in training_label_sets} & held)
    if leaked:
        raise ValueError(f"held-out label combinations leaked into training prompts: {leaked}")


def run_unseen_prompt_experiment(
    held_out_sets: Sequence[Sequence[str]],
    training_label_sets: Sequence[Sequence[str]],
    real_volumes,
    real_labels: np.ndarray,
    synth_volumes,
    synth_labels: np.ndarray,
    test_volumes,
    test_labels: np.ndarray,
    label_names: Sequence[str],
    seeds: Sequence[int] = (0, 1, 2),
    budget_steps: int = 240,
    batch_size: int = 8,
    test_manifest_hash: str = "",
) -> ExperimentReport:
    """Three-way real / synthetic-only / combined comparison on unseen prompts.

    Rejects when any held-out label combination occurs among the generator's
    training prompts.
    """
    check_prompt_leakage(training_label_sets, held_out_sets)
    arms = [
        _make_arm("real", list(real_volumes), real_labels),
        _make_arm("synthetic", list(synth_volumes), synth_labels),
        _make_arm(
            "combined",
            list(real_volumes) + list(synth_volumes),
            np.concatenate([np.asarray(real_labels, np.float32), np.asarray(synth_labels, np.float32)]),
        ),
    ]
    return _run_arms(
        arms, test_volumes, test_labels, label_names, seeds, budget_steps,
        batch_size, test_manifest_hash,
        extras={"held_out_sets": [sorted(s) for s in held_out_sets]},
    )
