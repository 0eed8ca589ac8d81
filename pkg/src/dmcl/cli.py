"""Command line entry point: ``dmcl <subcommand> ...``."""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import sys
from pathlib import Path

import numpy as np
from PIL import Image

from . import domain_synth as ds_mod
from .datasets import Task, load_manifest, write_manifest
from .errors import ConfigError, DataError
from .evaluation import (VARIANTS, ablation_table, disentanglement_score, evaluate, export_features,
                         render_summary, run_ablation_matrix, write_feature_dump)
from .presets import PRESETS, preset
from .trainer import AblationFlags, TrainConfig, eval_isolation_report, load_checkpoint, train
from .xnist import DEFAULT_BASE_PATH, build_desk_dataset, load_base_corpus

_TRAIN_FIELDS = [f for f in dataclasses.fields(TrainConfig) if f.name != "ablation_flags"]


def _add_data_args(p):
    g = p.add_argument_group("data")
    g.add_argument("--data", help="dataset root with the four split manifests and label_spaces.json")
    g.add_argument("--desk", action="store_true", help="build the desk-scale X-NIST task in memory instead")
    g.add_argument("--base", default=str(DEFAULT_BASE_PATH), help="base corpus .npz for --desk")
    g.add_argument("--toi", default="digits")
    g.add_argument("--irt", default="fashion")
    g.add_argument("--source-domain", default="GRAY")
    g.add_argument("--target-domain", default="NEGATIVE")
    g.add_argument("--n-train", type=int, default=2000)
    g.add_argument("--n-eval", type=int, default=2000)
    g.add_argument("--data-seed", type=int, default=0)


def _load_data(args):
    if args.data and args.desk:
        raise ConfigError("use either --data or --desk, not both")
    if args.data:
        return load_manifest(args.data)
    if args.desk:
        return build_desk_dataset(load_base_corpus(args.base), args.toi, args.irt, args.source_domain,
                                  args.target_domain, args.n_train, args.n_eval, args.data_seed)
    raise ConfigError("no dataset given: pass --data ROOT or --desk")


def _add_train_args(p):
    p.add_argument("--preset", default="desk", choices=sorted(PRESETS))
    g = p.add_argument_group("training configuration (defaults come from the preset)")
    for f in _TRAIN_FIELDS:
        flag = "--" + f.name.replace("_", "-")
        if f.type in ("bool", bool):
            g.add_argument(flag, action="store_true", default=None)
        else:
            conv = {"int": int, "float": float, "str": str}.get(f.type, str)
            g.add_argument(flag, type=conv, default=None)
    g.add_argument("--disable-dual-mixup", action="store_true")
    g.add_argument("--disable-contrastive", action="store_true")


def _configs(args, label_spaces=None):
    overrides = {f.name: getattr(args, f.name) for f in _TRAIN_FIELDS if getattr(args, f.name) is not None}
    overrides["ablation_flags"] = AblationFlags(args.disable_dual_mixup, args.disable_contrastive)
    arch, cfg = preset(args.preset, **overrides)
    if label_spaces is not None:
        arch = dataclasses.replace(arch, head_class_counts=(len(label_spaces.toi_classes),
                                                            len(label_spaces.irt_classes)))
    return arch, cfg


def cmd_synthesize(args):
    inp = Path(args.input)
    if inp.suffix == ".npz":
        base = load_base_corpus(inp)
        if args.corpus_task not in base:
            raise ConfigError(f"{inp} has no task {args.corpus_task!r}; available: {sorted(base)}")
        images, labels, _ = base[args.corpus_task]
        corpus = [ds_mod.RawImage(ds_mod.from_bytes(im).astype(np.float64), f"{args.corpus_task}/{i}")
                  for i, im in enumerate(images)]
    else:
        files = sorted(p for p in inp.rglob("*") if p.suffix.lower() in ds_mod.IMAGE_SUFFIXES)
        if not files:
            raise DataError(f"no images under {inp}")
        corpus, labels = [], []
        for p in files:
            with Image.open(p) as im:
                corpus.append(ds_mod.RawImage(ds_mod.from_bytes(np.asarray(im.convert("L"))).astype(np.float64),
                                              str(p.relative_to(inp))))
            # class index = name of the parent directory when numeric, else 0
            labels.append(int(p.parent.name) if p.parent.name.isdigit() else 0)
    if args.limit:
        corpus, labels = corpus[: args.limit], labels[: args.limit]
    patches = ds_mod.TexturePatchSource(args.patch_mode, args.patch_dir, args.seed)
    tag = ds_mod.DomainTag.parse(args.domain)
    out_imgs = ds_mod.synthesize_domain(corpus, tag, args.seed, patches, args.canny_low, args.canny_high, args.blend)
    sub = f"{args.task.lower()}_{tag.value.lower()}"
    out_dir = Path(args.output) / sub
    out_dir.mkdir(parents=True, exist_ok=True)
    lines = []
    for i, (img, label) in enumerate(zip(out_imgs, labels)):
        rel = f"{i:06d}.png"
        Image.fromarray(ds_mod.to_bytes(img.pixels)).save(out_dir / rel)
        lines.append(f"{sub}/{rel}\t{int(label)}\t{args.task}\t{tag.value}")
    (out_dir / "manifest.tsv").write_text("\n".join(lines) + "\n")
    print(f"wrote {len(lines)} {tag.value} images to {out_dir}")


def cmd_prepare_xnist(args):
    dataset = _load_data(argparse.Namespace(**(vars(args) | {"desk": True, "data": None})))
    root = write_manifest(dataset, args.output)
    print(f"wrote dataset to {root}")


def cmd_validate(args):
    try:
        dataset = _load_data(args)
        checks = dataset.validate()
    except DataError as exc:
        print(f"INVALID: {exc}")
        return 1
    for name, split in dataset.splits().items():
        print(f"{name:16s} {len(split):6d} samples  classes={len(np.unique(split.labels))}")
    for line in checks:
        print(f"ok  {line}")
    return 0


def cmd_train(args):
    dataset = _load_data(args)
    arch, cfg = _configs(args, dataset.label_spaces)
    state = train(dataset.training_view(), arch, cfg, checkpoint_dir=args.checkpoint_dir,
                  metrics_path=args.metrics, resume_from=args.resume)
    result = evaluate(state.model, dataset.target_toi_eval)
    iso = eval_isolation_report(state, dataset.target_toi_eval)
    print(json.dumps({"iterations": state.iteration, "target_toi_accuracy": result.target_toi_accuracy,
                      "checkpoint": str(state.checkpoint_path) if state.checkpoint_path else None,
                      "eval_samples_touched": iso["eval_samples_touched"],
                      "saturation_events": state.saturation.count}, indent=2))


def cmd_eval(args):
    dataset = _load_data(args)
    state, arch, cfg = load_checkpoint(args.checkpoint)
    result = evaluate(state.model, dataset.target_toi_eval,
                      {"seed": cfg.seed, "checkpoint": str(args.checkpoint), "iteration": state.iteration})
    print(json.dumps(dataclasses.asdict(result), indent=2))


def cmd_ablate(args):
    dataset = _load_data(args)
    arch, cfg = _configs(args, dataset.label_spaces)
    variants = args.variants.split(",") if args.variants else VARIANTS
    rows = run_ablation_matrix(dataset, arch, cfg, args.seeds, variants=variants)
    table = ablation_table(rows)
    if args.output:
        Path(args.output).parent.mkdir(parents=True, exist_ok=True)
        Path(args.output).write_text(table)
    print(table)
    print(render_summary(rows))


def cmd_export(args):
    dataset = _load_data(args)
    state, _, _ = load_checkpoint(args.checkpoint)
    dump = export_features(state.model, dataset, args.source, args.samples_per_split, args.seed)
    write_feature_dump(dump, args.output)
    score = disentanglement_score(dump)
    print(json.dumps({"rows": len(dump), "dim": int(dump.embeddings.shape[1]), "output": args.output,
                      "domain_alignment": score.domain_alignment, "task_separation": score.task_separation,
                      "degenerate": score.degenerate, "definitions": list(score.definitions)}, indent=2))


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="dmcl", description=__doc__)
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synthesize", help="apply a domain transform to a gray-scale corpus")
    p.add_argument("--input", required=True, help="base corpus .npz or a directory of gray images")
    p.add_argument("--corpus-task", default="digits", help="task key inside an .npz corpus")
    p.add_argument("--output", required=True)
    p.add_argument("--domain", required=True, choices=[t.value for t in ds_mod.DomainTag])
    p.add_argument("--task", default="TOI", choices=[t.value for t in Task])
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--patch-mode", default="PROCEDURAL", choices=[m.value for m in ds_mod.PatchMode])
    p.add_argument("--patch-dir")
    p.add_argument("--canny-low", type=float, default=0.1)
    p.add_argument("--canny-high", type=float, default=0.3)
    p.add_argument("--blend", default="absdiff", choices=["absdiff", "convex"])
    p.add_argument("--limit", type=int, default=0)
    p.set_defaults(func=cmd_synthesize)

    p = sub.add_parser("prepare-xnist", help="write a four-split X-NIST task to disk")
    _add_data_args(p)
    p.add_argument("--output", required=True)
    p.set_defaults(func=cmd_prepare_xnist)

    p = sub.add_parser("validate-data", help="print split sizes and invariant checks")
    _add_data_args(p)
    p.set_defaults(func=cmd_validate)

    p = sub.add_parser("train", help="train one model")
    _add_data_args(p)
    _add_train_args(p)
    p.add_argument("--checkpoint-dir")
    p.add_argument("--metrics", help="metrics log path (TSV)")
    p.add_argument("--resume", help="checkpoint to resume from")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="target-ToI accuracy of a checkpoint")
    _add_data_args(p)
    p.add_argument("--checkpoint", required=True)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("ablate", help="run the ablation matrix")
    _add_data_args(p)
    _add_train_args(p)
    p.add_argument("--seeds", type=int, default=3)
    p.add_argument("--variants", help=f"comma-separated subset of {', '.join(VARIANTS)}")
    p.add_argument("--output", help="write the variant/seed/accuracy table here")
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("export-features", help="dump G_F or G_D embeddings for plotting")
    _add_data_args(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--source", default="G_F", choices=["G_F", "G_D"])
    p.add_argument("--samples-per-split", type=int, default=200)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--output", required=True)
    p.set_defaults(func=cmd_export)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(message)s")
    try:
        return args.func(args) or 0
    except (ConfigError, DataError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
