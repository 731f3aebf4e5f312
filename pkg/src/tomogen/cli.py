"""Command-line interface: data, train-codec, train-maskgen, train-sr,
generate, evaluate, experiment."""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from . import experiments as exp
from . import pipeline as pl
from .evaluation import (
    ClassifierConfig,
    alignment_score,
    classifier_extractor,
    compute_generation_metrics,
    train_classifier,
)
from .phantoms import PhantomDataset, load_volume
from .util import derive_seed


def _add_common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", type=Path, default=None, help="JSON run config (sparse overrides)")
    p.add_argument("--seed", type=int, default=None, help="override the config seed")
    p.add_argument("--out", type=Path, default=None, help="run/output directory")


def _load_config(args) -> pl.RunConfig:
    cfg = pl.RunConfig.from_file(args.config) if args.config else pl.RunConfig.from_dict({})
    if args.seed is not None:
        cfg = pl.RunConfig.from_dict({**cfg.raw, "seed": args.seed})
    if args.out is not None:
        cfg = pl.RunConfig.from_dict({**cfg.raw, "out_dir": str(args.out)})
    return cfg


def _out_dir(cfg: pl.RunConfig) -> Path:
    return Path(cfg.raw["out_dir"])


def _data_dir(cfg: pl.RunConfig) -> Path:
    return _out_dir(cfg) / "data"


def cmd_data(args) -> int:
    cfg = _load_config(args)
    dataset = pl.build_run_dataset(cfg, _data_dir(cfg))
    freqs = dataset.manifest["label_frequencies"]
    print(f"built {len(dataset.records)} records at {dataset.root}")
    print("label frequencies: " + ", ".join(f"{k}={v:.3f}" for k, v in freqs.items()))
    return 0


def _train(args, stage: str) -> int:
    cfg = _load_config(args)
    path = pl.train_stage(
        stage, cfg, _data_dir(cfg), _out_dir(cfg),
        resume=args.resume, steps_override=args.steps,
    )
    print(f"{stage} checkpoint written to {path}")
    return 0


def cmd_generate(args) -> int:
    cfg = _load_config(args)
    pipeline = pl.load_pipeline(_out_dir(cfg))
    gen_dir = args.gen_out or (_out_dir(cfg) / "generated")
    if args.prompt_file:
        prompts = args.prompt_file
    elif args.prompt:
        prompts = [args.prompt]
    else:
        print("error: provide --prompt or --prompt-file", file=sys.stderr)
        return 2
    manifest = pl.batch_generate(
        pipeline, prompts, args.n_per_prompt,
        base_seed=cfg.seed if args.seed is None else args.seed,
        out_dir=gen_dir, n_sr_steps=args.sr_steps,
    )
    print(f"wrote {len(manifest['records'])} volumes to {gen_dir}")
    return 0


def cmd_evaluate(args) -> int:
    cfg = _load_config(args)
    dataset = PhantomDataset.open(_data_dir(cfg))
    gen_dir = args.gen_out or (_out_dir(cfg) / "generated")
    gen_manifest = json.loads((Path(gen_dir) / "manifest.json").read_text())
    gen_volumes = [
        load_volume(Path(gen_dir) / r["volume_file"], Path(gen_dir) / r["meta_file"])
        for r in gen_manifest["records"]
    ]
    gen_prompts = [r["prompt"] for r in gen_manifest["records"]]

    train_recs, test_recs = dataset.split("train"), dataset.split("test")
    train_vols = [dataset.volume(r) for r in train_recs]
    test_vols = [dataset.volume(r) for r in test_recs]
    labels = dataset.label_vocab
    model, report = train_classifier(
        train_vols, dataset.label_matrix(train_recs),
        test_vols, dataset.label_matrix(test_recs),
        labels, ClassifierConfig(seed=derive_seed(cfg.seed, "oracle")),
    )
    metrics = compute_generation_metrics(
        test_vols, gen_volumes,
        classifier_extractor(model, "volume"), classifier_extractor(model, "slice"),
        config=cfg.raw,
    )
    align = alignment_score(gen_volumes, gen_prompts, model, labels)
    ceiling = alignment_score(test_vols, [r.prompt for r in test_recs], model, labels)
    out = {
        "generation": metrics.to_dict(),
        "alignment": align,
        "real_ceiling": ceiling,
        "classifier_val": report,
    }
    path = _out_dir(cfg) / "evaluation.json"
    path.write_text(json.dumps(out, indent=2, sort_keys=True))
    print(json.dumps(out["generation"]["scalars"], indent=2))
    print(f"alignment mean {align['mean']:.3f} vs real ceiling {ceiling['mean']:.3f}")
    print(f"report written to {path}")
    return 0


def cmd_experiment(args) -> int:
    cfg = _load_config(args)
    dataset = PhantomDataset.open(_data_dir(cfg))
    pipeline = pl.load_pipeline(_out_dir(cfg))
    labels = dataset.label_vocab
    test_recs = dataset.split("test")
    test_vols = [dataset.volume(r).data for r in test_recs]
    test_y = dataset.label_matrix(test_recs)
    train_recs = dataset.split("train")

    if args.kind == "augmentation":
        real_n = args.real_n or min(32, len(train_recs))
        rng = np.random.default_rng(derive_seed(cfg.seed, "exp-prompts"))
        need = max(args.multipliers) * real_n
        prompt_pool = [train_recs[i].prompt for i in rng.integers(0, len(train_recs), need)]
        gen_dir = _out_dir(cfg) / "experiment_pool"
        manifest = pl.batch_generate(
            pipeline, prompt_pool, 1, base_seed=derive_seed(cfg.seed, "exp-gen"),
            out_dir=gen_dir, n_sr_steps=args.sr_steps,
        )
        synth_vols, synth_y = _manifest_volumes(gen_dir, manifest, labels)
        report = exp.run_augmentation_experiment(
            [dataset.volume(r).data for r in train_recs], dataset.label_matrix(train_recs),
            synth_vols, synth_y, test_vols, test_y, labels,
            real_n=real_n, synth_multipliers=args.multipliers,
            seeds=list(range(args.seeds)), budget_steps=args.budget,
            test_manifest_hash=dataset.manifest_hash(),
        )
    else:
        held_out = [list(s) for s in dataset.manifest["excluded_label_sets"]]
        if not held_out:
            print("error: dataset has no excluded label sets to hold out", file=sys.stderr)
            return 2
        ext_dir = _out_dir(cfg) / "external_data"
        ext_cfg = pl.RunConfig.from_dict(
            {**cfg.raw, "seed": cfg.seed + 1,
             "data": {**cfg.raw["data"], "exclude_label_sets": []}}
        )
        ext = pl.build_run_dataset(ext_cfg, ext_dir) if not (ext_dir / "manifest.json").exists() else PhantomDataset.open(ext_dir)
        ext_train, ext_test = ext.split("train"), ext.split("test")
        gen_dir = _out_dir(cfg) / "unseen_pool"
        manifest = pl.batch_generate(
            pipeline, [r.prompt for r in ext_train], 1,
            base_seed=derive_seed(cfg.seed, "unseen-gen"), out_dir=gen_dir,
            n_sr_steps=args.sr_steps,
        )
        synth_vols, synth_y = _manifest_volumes(gen_dir, manifest, labels)
        report = exp.run_unseen_prompt_experiment(
            held_out, [list(r.labels) for r in train_recs],
            [ext.volume(r).data for r in ext_train], ext.label_matrix(ext_train),
            synth_vols, synth_y,
            [ext.volume(r).data for r in ext_test], ext.label_matrix(ext_test),
            labels, seeds=list(range(args.seeds)), budget_steps=args.budget,
            test_manifest_hash=ext.manifest_hash(),
        )

    out_path = _out_dir(cfg) / f"experiment_{args.kind}.json"
    out_path.write_text(json.dumps(report.to_dict(), indent=2, sort_keys=True, default=str))
    print(report.table())
    for arm in report.arm_names():
        print(f"{arm}: median mean AP {report.median_mean_ap(arm):.3f}")
    print(f"report written to {out_path}")
    return 0


def _manifest_volumes(gen_dir: Path, manifest: dict, labels):
    from .evaluation import parse_prompt_labels

    vols, ys = [], []
    for r in manifest["records"]:
        vols.append(load_volume(Path(gen_dir) / r["volume_file"], Path(gen_dir) / r["meta_file"]).data)
        present = parse_prompt_labels(r["prompt"])
        ys.append([1.0 if k in present else 0.0 for k in labels])
    return vols, np.asarray(ys, np.float32)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="tomogen", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("data", help="build the phantom dataset")
    _add_common(p)
    p.set_defaults(fn=cmd_data)

    for stage, name in (("codec", "train-codec"), ("maskgen", "train-maskgen")):
        p = sub.add_parser(name, help=f"train the {stage} stage")
        _add_common(p)
        p.add_argument("--resume", action="store_true")
        p.add_argument("--steps", type=int, default=None, help="override the step budget")
        p.set_defaults(fn=lambda a, s=stage: _train(a, s))

    p = sub.add_parser("train-sr", help="train one SR cascade stage")
    _add_common(p)
    p.add_argument("--stage", type=int, default=0, help="cascade stage index")
    p.add_argument("--resume", action="store_true")
    p.add_argument("--steps", type=int, default=None)
    p.set_defaults(fn=lambda a: _train(a, f"sr{a.stage}"))

    p = sub.add_parser("generate", help="generate volumes from prompts")
    _add_common(p)
    p.add_argument("--prompt", type=str, default=None)
    p.add_argument("--prompt-file", type=Path, default=None, help="newline-delimited prompts")
    p.add_argument("--n-per-prompt", type=int, default=1)
    p.add_argument("--sr-steps", type=int, default=None, help="override SR sampling steps")
    p.add_argument("--gen-out", type=Path, default=None)
    p.set_defaults(fn=cmd_generate)

    p = sub.add_parser("evaluate", help="generation metrics + prompt alignment")
    _add_common(p)
    p.add_argument("--gen-out", type=Path, default=None, help="generated-volume directory")
    p.set_defaults(fn=cmd_evaluate)

    p = sub.add_parser("experiment", help="augmentation / unseen-prompt study")
    _add_common(p)
    p.add_argument("--kind", choices=["augmentation", "unseen"], default="augmentation")
    p.add_argument("--real-n", type=int, default=None)
    p.add_argument("--multipliers", type=int, nargs="+", default=[1, 5])
    p.add_argument("--seeds", type=int, default=5, help="number of classifier seeds")
    p.add_argument("--budget", type=int, default=240, help="classifier steps per arm")
    p.add_argument("--sr-steps", type=int, default=None)
    p.set_defaults(fn=cmd_experiment)
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    return args.fn(args)


if __name__ == "__main__":
    raise SystemExit(main())
