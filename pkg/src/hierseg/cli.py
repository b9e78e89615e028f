"""``hierseg`` command line: data generation, training, evaluation, inference, experiments."""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import os
import platform
import sys
from importlib import metadata
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .checkpoint import load_model, save_model
from .hierarchy import (DatasetSpec, FlatSpace, HierarchyError, bind_dataset, flatten_union, format_tree,
                        same_tree, validate)
from .inference import compose, decide, default_palette, export, flat_segmentation
from .metrics import mpa_miou
from .network import NetworkConfig, build_flat_network, build_network
from .presets import CONFIGS, load_config, presets_for
from .synth import generate_corpus, load_corpus, load_image, pixel_shares, save_corpus
from .training import TrainConfig, TrainingDiverged, evaluate, flat_space_for, train
from .validation import check_images, pad_to_multiple

log = logging.getLogger("hierseg")


class UsageError(Exception):
    pass


# ---------------------------------------------------------------------------
# helpers
# ---------------------------------------------------------------------------

def code_version() -> str:
    """Installed version plus a digest of the package sources."""
    try:
        version = metadata.version("artifact")
    except metadata.PackageNotFoundError:
        version = "unknown"
    digest = hashlib.sha256()
    root = Path(__file__).parent
    for p in sorted(root.rglob("*")):
        if p.suffix in (".py", ".hier") and p.is_file():
            digest.update(p.relative_to(root).as_posix().encode())
            digest.update(p.read_bytes())
    return f"{version}+{digest.hexdigest()[:12]}"


def write_manifest(out_dir, command: str, argv: Sequence[str], config: dict, seed: Optional[int]) -> str:
    os.makedirs(out_dir, exist_ok=True)
    manifest = {
        "command": command,
        "argv": list(argv),
        "config": config,
        "seed": seed,
        "code_version": code_version(),
        "python": platform.python_version(),
        "numpy": np.__version__,
    }
    path = os.path.join(out_dir, "manifest.json")
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return path


def _existing(path: str) -> str:
    if path not in CONFIGS and not os.path.exists(path):
        raise UsageError(f"no such file or directory: {path}")
    return path


def _int_tuple(text: str):
    return tuple(int(p) for p in text.replace(":", ",").split(",") if p.strip())


def _float_tuple(text: str):
    return tuple(float(p) for p in text.replace(":", ",").split(",") if p.strip())


def _load_datasets(dirs: Sequence[str]):
    return [load_corpus(_existing(d)) for d in dirs]


def _bind_all(h, corpora):
    for c in corpora:
        h = bind_dataset(h, c.spec)
    return h


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------

def cmd_gen_data(args, argv) -> int:
    h = load_config(_existing(args.hierarchy))
    if args.spec:
        with open(_existing(args.spec), encoding="utf-8") as fh:
            spec = DatasetSpec.from_dict(json.load(fh))
    else:
        presets = presets_for(h)
        if args.preset not in presets:
            raise UsageError(f"unknown preset {args.preset!r} for this hierarchy; choose from {sorted(presets)}")
        spec = presets[args.preset]
    h = bind_dataset(h, spec)
    corpus = generate_corpus(spec, h, seed=args.seed, n_images=args.n_images)
    save_corpus(corpus, args.out)
    shares = pixel_shares(corpus)
    print(f"wrote {len(corpus)} {spec.annotation_type} images of {spec.name!r} to {args.out}")
    for label_id in sorted(shares):
        print(f"  label {label_id:3d} {h.bindings[spec.name][label_id]:<28s} {shares[label_id]:.6f}")
    write_manifest(args.out, "gen-data", argv, {"spec": corpus.spec.to_dict(), "hierarchy": args.hierarchy},
                   args.seed)
    return 0


def cmd_inspect(args, argv) -> int:
    h = load_config(_existing(args.hierarchy))
    corpora = _load_datasets(args.data or [])
    h = _bind_all(h, corpora)
    print(format_tree(h))
    specs = [c.spec for c in corpora]
    if not specs:
        specs = [s for name, s in presets_for(h).items() if name in h.bindings]
    if specs:
        report = validate(h, specs)
        print()
        print("supervision per classifier:")
        print(report.format())
        if not report.ok:
            return 1
    return 0


def _train_config(args) -> TrainConfig:
    text = ""
    if args.config:
        with open(_existing(args.config), encoding="utf-8") as fh:
            text = fh.read()
    overrides = dict(steps=args.steps, learning_rate=args.lr, level_weights=args.level_weights,
                     ratios=args.ratios, crop=args.crop, warmup=args.warmup, eval_every=args.eval_every,
                     patience=args.patience, seed=args.seed, mode=args.mode)
    return TrainConfig.from_text(text, **overrides)


def _network_config(args, seed: int) -> NetworkConfig:
    kwargs = {"seed": seed}
    for key in ("widths", "output_stride", "rep_depth", "bottleneck", "dilation"):
        v = getattr(args, key, None)
        if v is not None:
            kwargs[key] = v
    return NetworkConfig(**kwargs)


def cmd_train(args, argv) -> int:
    h = load_config(_existing(args.hierarchy))
    datasets = _load_datasets(args.data)
    val = _load_datasets(args.val or [])
    if args.ratios is None:
        args.ratios = (1,) * len(datasets)
    cfg = _train_config(args)
    h = _bind_all(h, datasets + val)
    validate(h, [c.spec for c in datasets]).raise_if_invalid()
    net_cfg = _network_config(args, cfg.seed)
    space = None
    if cfg.mode == "flat":
        space = flat_space_for(h, datasets, cfg.unlabeled_class)
        net = build_flat_network(space, net_cfg)
    else:
        net = build_network(h, net_cfg)
    os.makedirs(args.out, exist_ok=True)
    write_manifest(args.out, "train", argv, {"train": cfg.to_text(), "network": net_cfg.to_dict(),
                                            "hierarchy": args.hierarchy, "data": list(args.data),
                                            "val": list(args.val or [])}, cfg.seed)
    with open(os.path.join(args.out, "train.cfg"), "w", encoding="utf-8") as fh:
        fh.write(cfg.to_text())
    result = train(net, h, datasets, cfg, val, space=space)
    with open(os.path.join(args.out, "metrics.log"), "w", encoding="utf-8") as fh:
        fh.write(result.log_text())
    save_model(os.path.join(args.out, "model.ckpt"), net, h, cfg.mode, space,
               extra={"train": cfg.to_text()}, state=result.state)
    print(f"trained {cfg.mode} model for {result.steps_run} steps -> {args.out}")
    for k in sorted(result.final):
        if k.startswith("L"):
            print(f"  {k:<10s} {result.final[k]:.6f}")
    return 0


def cmd_eval(args, argv) -> int:
    m = load_model(_existing(args.model))
    corpora = _load_datasets(args.data)
    h = _bind_all(m.hierarchy, corpora)
    ev = evaluate(m.net, h, corpora, m.mode, m.space)
    lines = []
    for clf in h.classifiers:
        acc = ev.accumulators[clf.name]
        s = mpa_miou(acc, range(clf.n_classes))
        width = max(len(n) for n in clf.classes + ["class"])
        lines.append(f"classifier {clf.id} {clf.name} (L{clf.level})")
        lines.append(f"  {'class':<{width}s}  {'PA':>8s}  {'IoU':>8s}")
        for c, pa in s.pa.items():
            lines.append(f"  {clf.classes[c]:<{width}s}  {pa:8.4f}  {s.iou[c]:8.4f}")
        lines.append(f"  {'mean':<{width}s}  {s.mpa:8.4f}  {s.miou:8.4f}")
    metrics = ev.metrics()
    lines.append("")
    for k in sorted(k for k in metrics if k.startswith("L")):
        lines.append(f"{k:<10s} {metrics[k]:.4f}")
    lines.append("")
    for clf in h.classifiers:
        s = mpa_miou(ev.accumulators[clf.name], range(clf.n_classes))
        lines.extend(f"{clf.classes[c]}, {pa:.6f}, {s.iou[c]:.6f}" for c, pa in s.pa.items())
    text = "\n".join(lines) + "\n"
    sys.stdout.write(text)
    if args.out:
        os.makedirs(args.out, exist_ok=True)
        with open(os.path.join(args.out, "eval.txt"), "w", encoding="utf-8") as fh:
            fh.write(text)
        write_manifest(args.out, "eval", argv, {"model": args.model, "data": list(args.data)}, None)
    return 0


def cmd_infer(args, argv) -> int:
    m = load_model(_existing(args.model))
    h = m.hierarchy
    if args.hierarchy:
        given = load_config(_existing(args.hierarchy))
        if not same_tree(given.root, h.root):
            raise UsageError("the hierarchy config does not match the tree stored in the checkpoint")
    detail = "finest" if args.level is None else args.level
    if detail != "finest" and not 1 <= detail <= h.depth:
        raise UsageError(f"--level {detail} is outside the hierarchy (depth {h.depth})")
    palette = default_palette(h)
    os.makedirs(args.out, exist_ok=True)
    for path in args.images:
        image = check_images(load_image(_existing(path)))
        padded, (ih, iw) = pad_to_multiple(image, m.net.cfg.output_stride)
        sig = [s.data[..., :ih, :iw] for s in m.net.forward(padded)]
        if m.mode == "hier":
            seg = compose(decide([s[0] for s in sig], h), h, detail)
        else:
            seg = flat_segmentation(sig[0][0], m.space, h, detail)
        stem = Path(path).stem
        hist = export(seg, h, palette, args.out, stem)
        top = sorted(hist.items(), key=lambda kv: -kv[1])[:5]
        print(f"{path}: " + ", ".join(f"{k} {v}" for k, v in top))
    write_manifest(args.out, "infer", argv, {"model": args.model, "images": list(args.images),
                                            "detail": detail}, None)
    return 0


def cmd_describe(args, argv) -> int:
    if args.model:
        m = load_model(_existing(args.model))
        print(m.net.describe())
        return 0
    h = load_config(_existing(args.hierarchy))
    cfg = _network_config(args, 0)
    if args.mode == "flat":
        space = flatten_union(h) if h.bindings else FlatSpace(tuple(n.name for n in h.leaves))
        net = build_flat_network(space, cfg)
    else:
        net = build_network(h, cfg)
    print(net.describe())
    return 0


def cmd_experiment(args, argv) -> int:
    from .experiments import DESK, EXPERIMENTS, QUICK

    scale = QUICK if args.quick else DESK
    seeds = list(range(args.first_seed, args.first_seed + args.seeds))
    report = EXPERIMENTS[args.name](seeds, scale)
    sys.stdout.write(report.table())
    if args.out:
        report.write_logs(args.out)
        write_manifest(args.out, f"experiment {args.name}", argv,
                       {"seeds": seeds, "scale": vars(scale)}, seeds[0])
    return 0


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------

def _add_network_flags(p: argparse.ArgumentParser) -> None:
    g = p.add_argument_group("network")
    g.add_argument("--widths", type=_int_tuple, help="extractor block widths, e.g. 16,24,32,32")
    g.add_argument("--output-stride", type=int, choices=(4, 8))
    g.add_argument("--rep-depth", type=int)
    g.add_argument("--bottleneck", type=int)
    g.add_argument("--dilation", type=int)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="hierseg", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, metavar="COMMAND")

    p = sub.add_parser("gen-data", help="render a synthetic corpus to disk")
    p.add_argument("--hierarchy", default="street", help=f".hier file or one of {CONFIGS}")
    src = p.add_mutually_exclusive_group(required=True)
    src.add_argument("--preset", help="dataset preset bound by the hierarchy")
    src.add_argument("--spec", help="dataset spec JSON document")
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--n-images", type=int)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("inspect-hierarchy", help="print the tree, classifiers and bindings")
    p.add_argument("hierarchy")
    p.add_argument("--data", nargs="*", help="corpus directories to validate against")
    p.set_defaults(func=cmd_inspect)

    p = sub.add_parser("train", help="train a hierarchical or flat model")
    p.add_argument("--hierarchy", default="street")
    p.add_argument("--data", nargs="+", required=True, help="training corpus directories")
    p.add_argument("--val", nargs="*", help="validation corpus directories")
    p.add_argument("--mode", choices=("hier", "flat"))
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--config", help="key = value training config; flags override it")
    p.add_argument("--steps", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--level-weights", type=_float_tuple)
    p.add_argument("--ratios", type=_int_tuple, help="images per batch from each dataset, e.g. 2,1,1")
    p.add_argument("--crop", type=_int_tuple)
    p.add_argument("--warmup", type=int)
    p.add_argument("--eval-every", type=int)
    p.add_argument("--patience", type=int)
    p.add_argument("--out", required=True)
    _add_network_flags(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="per-class PA/IoU and level summaries")
    p.add_argument("--model", required=True)
    p.add_argument("--data", nargs="+", required=True)
    p.add_argument("--out")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("infer", help="segment images and export color maps")
    p.add_argument("images", nargs="+")
    p.add_argument("--model", required=True)
    p.add_argument("--hierarchy", help="optional config to check against the checkpoint")
    detail = p.add_mutually_exclusive_group()
    detail.add_argument("--level", type=int)
    detail.add_argument("--finest", action="store_true")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_infer)

    p = sub.add_parser("describe", help="network topology summary")
    p.add_argument("--model")
    p.add_argument("--hierarchy", default="street")
    p.add_argument("--mode", choices=("hier", "flat"), default="hier")
    _add_network_flags(p)
    p.set_defaults(func=cmd_describe)

    p = sub.add_parser("experiment", help="scripted flat-vs-hierarchical comparisons")
    p.add_argument("name", choices=("ab-compare", "bbox-vs-dense"))
    p.add_argument("--seeds", type=int, default=3)
    p.add_argument("--first-seed", type=int, default=0)
    p.add_argument("--quick", action="store_true", help="tiny corpora and schedule, for smoke tests")
    p.add_argument("--out")
    p.set_defaults(func=cmd_experiment)
    return parser


def run(argv: Optional[Sequence[str]] = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args, argv)
    except UsageError as exc:
        parser.print_usage(sys.stderr)
        print(f"hierseg: error: {exc}", file=sys.stderr)
        return 2
    except (HierarchyError, ValueError, KeyError, OSError, TrainingDiverged) as exc:
        print(f"hierseg: error: {exc}", file=sys.stderr)
        return 1


def main() -> None:
    sys.exit(run())
