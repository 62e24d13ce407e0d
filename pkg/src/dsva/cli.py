"""``dsva`` command line.

Exit status: 0 success, 1 validation or usage error, 2 runtime failure.
Progress goes to stderr as JSON lines; data products go to files only.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path
from typing import Sequence

import numpy as np

from dsva.core import (
    AttributeVocabulary,
    ClassAttributeMatrix,
    DSVAError,
    ValidationError,
    atomic_write,
    dump_config,
    load_config,
    resolve_seed,
    seeded_rng,
)

COMMANDS = ("annotate", "train", "eval", "synth", "sweep", "export-attn", "export-crop", "export-embeddings")


class UsageError(DSVAError):
    pass


class Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.format_usage()}{self.prog}: error: {message}")


def progress(**record) -> None:
    print(json.dumps(record, sort_keys=True, default=str), file=sys.stderr, flush=True)


def _config(args, **overrides):
    seed = resolve_seed(args.seed)
    return load_config(args.config, preset=args.preset, seed=seed, **overrides)


# --------------------------------------------------------------------------
# subcommands
# --------------------------------------------------------------------------


def cmd_synth(args) -> int:
    from dsva.data import default_synthetic_spec, generate_synthetic, parse_synthetic_spec

    config = _config(args)
    spec = parse_synthetic_spec(Path(args.spec).read_text(encoding="utf-8")) if args.spec else default_synthetic_spec()
    truth = generate_synthetic(spec, args.out, seed=config.seed)
    progress(event="synth", classes=len(truth.class_names), attributes=truth.num_attributes,
             images=len(truth.class_names) * spec.images_per_class, out=str(args.out))
    return 0


def _make_embedder(kind: str, seed: int, dim: int):
    from dsva.annotator import BridgeEmbedder, MockEmbedder

    if kind == "mock":
        return MockEmbedder(seed=seed, dim=dim)
    if kind.startswith("bridge:"):
        return BridgeEmbedder(kind[len("bridge:"):])
    raise UsageError(f"unknown embedder {kind!r}; use 'mock' or 'bridge:DIR'")


def cmd_annotate(args) -> int:
    from dsva.annotator import PromptTemplate, build_class_matrix, select_probes, write_bridge_request
    from dsva.data import load_dataset, read_split

    config = _config(args, probe_count=args.m)
    vocab = AttributeVocabulary.read(args.vocab)
    index = load_dataset(args.images, config.image_size)
    template = PromptTemplate(args.template)
    pools = {c: [str(index.path(i)) for i in ids] for c, ids in index.by_class().items()}
    if args.split:
        split = read_split(args.split)
        pools = {}
        for c in split.seen:
            pools[c] = [str(index.path(i)) for i in split.train.get(c, ())]
        for c in split.unseen:
            pools[c] = [str(index.path(i)) for i in split.test.get(c, ())]
        progress(event="annotate", note="seen-class probes from training images, unseen-class probes from held-out test images")
    probes = select_probes(pools, config.probe_count, seeded_rng(config.seed))
    if args.embedder.startswith("bridge:"):
        bridge = Path(args.embedder[len("bridge:"):])
        if not (bridge / "embeddings.csv").exists():
            paths = sorted({p for ps in probes.values() for p in ps})
            write_bridge_request(bridge, {f"img-{i}": p for i, p in enumerate(paths)}, [template(a) for a in vocab.names])
            raise ValidationError(f"bridge request written to {bridge}; produce {bridge / 'embeddings.csv'} and rerun")
    embedder = _make_embedder(args.embedder, config.seed, config.embed_dim)
    matrix = build_class_matrix(vocab, probes, embedder, template, classes=list(pools))
    atomic_write(args.out, matrix.to_csv())
    progress(event="annotate", classes=len(matrix.class_names), attributes=matrix.num_attributes, m=config.probe_count, out=str(args.out))
    return 0


def _split_for(args, index, config):
    from dsva.data import make_splits, read_split

    if args.split and getattr(args, "ratio", None):
        raise UsageError("--split and --ratio are mutually exclusive")
    if args.split:
        return read_split(args.split)
    if getattr(args, "ratio", None):
        return make_splits(index.classes, args.ratio, seed=config.seed, index=index, train_fraction=config.train_fraction)
    raise UsageError("give --split FILE or --ratio SEEN/UNSEEN")


def cmd_train(args) -> int:
    from dsva.data import import_pretrained, load_dataset, split_to_json
    from dsva.plotting import plot_training
    from dsva.training import train

    overrides = {}
    if args.freeze_backbone:
        overrides["freeze_backbone"] = True
    if args.class_norm:
        overrides["class_norm"] = args.class_norm
    for key in ("warmup_epochs", "main_epochs", "batch_size", "grad_accum"):
        if getattr(args, key) is not None:
            overrides[key] = getattr(args, key)
    config = _config(args, **overrides)
    if args.split and args.ratio:
        raise UsageError("--split and --ratio are mutually exclusive")
    index = load_dataset(args.data, config.image_size)
    split = _split_for(args, index, config)
    classes = ClassAttributeMatrix.read(args.class_matrix)
    out = Path(args.out)
    atomic_write(out / "config.txt", dump_config(config))
    if not args.split:
        atomic_write(out / "split.json", split_to_json(split))
    init = None
    if args.init:
        init = import_pretrained(args.init, config, report=None)
        progress(event="import", source=str(args.init), tensors=len(init.state_dict()))
    state = train(index, split, classes, config, out_dir=out,
                  emit=lambda r: progress(event="epoch", **r), init_encoder=init)
    if state.history:
        plot_training(state.history, out / "training.png")
    progress(event="train", epochs=state.epoch, checkpoint=str(out / "model.dsva"))
    return 0


def _load_eval_inputs(args):
    from dsva.data import load_dataset, read_split
    from dsva.model import DSVAModel

    model, config, meta = DSVAModel.load(args.checkpoint)
    model.eval()
    if getattr(args, "class_norm", None):
        config = config.replace(class_norm=args.class_norm)
    index = load_dataset(args.data, model.image_size)
    split = read_split(args.split)
    classes = ClassAttributeMatrix.read(args.class_matrix).normalized(config.class_norm)
    ids = [i for c in split.classes for i in split.test.get(c, ())]
    return model, config, index, split, classes, ids


def _predict(model, index, ids):
    from dsva.training import predict_values

    return predict_values(model, index.load_many(ids).astype(np.float32))


def cmd_eval(args) -> int:
    from dsva.inference import ScoreMatrix, evaluate_scores

    model, config, index, split, classes, ids = _load_eval_inputs(args)
    gamma = config.gamma_calibration if args.gamma is None else args.gamma
    values = _predict(model, index, ids)
    matrix = ScoreMatrix.from_predictions(values, [index.label(i) for i in ids], split, classes)
    report = evaluate_scores(matrix, gamma, args.zsl_accuracy or config.zsl_accuracy, config.gzsl_accuracy)
    doc = json.loads(report.to_json())
    if not args.gzsl:
        for key in ("gzsl_seen", "gzsl_unseen", "harmonic", "per_class_gzsl", "predicted_seen", "gamma"):
            doc.pop(key)
    atomic_write(args.report, json.dumps(doc, indent=2, sort_keys=True) + "\n")
    progress(event="eval", **{k: v for k, v in doc.items() if not k.startswith("per_class")})
    return 0


def _gamma_grid(args) -> list[float]:
    if args.gammas:
        try:
            return [float(g) for g in args.gammas.split(",")]
        except ValueError:
            raise UsageError(f"--gammas must be comma-separated numbers, got {args.gammas!r}") from None
    if not 0 < args.gamma_min < args.gamma_max or args.gamma_num < 2:
        raise UsageError("need 0 < --gamma-min < --gamma-max and --gamma-num >= 2")
    return [0.0] + list(np.geomspace(args.gamma_min, args.gamma_max, args.gamma_num - 1))


def cmd_sweep(args) -> int:
    from dsva.inference import ScoreMatrix, calibration_sweep
    from dsva.plotting import plot_calibration

    model, config, index, split, classes, ids = _load_eval_inputs(args)
    values = _predict(model, index, ids)
    matrix = ScoreMatrix.from_predictions(values, [index.label(i) for i in ids], split, classes)
    gammas = _gamma_grid(args)
    reports, best = calibration_sweep(matrix, gammas, config.zsl_accuracy, config.gzsl_accuracy)
    out = Path(args.out)
    rows = ["gamma,seen,unseen,harmonic,predicted_seen"]
    rows += [f"{g!r},{r.gzsl_seen!r},{r.gzsl_unseen!r},{r.harmonic!r},{r.predicted_seen}" for g, r in zip(gammas, reports)]
    atomic_write(out / "sweep.csv", "\n".join(rows) + "\n")
    atomic_write(out / "sweep.json", json.dumps({"best_gamma": best, "reports": [json.loads(r.to_json()) for r in reports]}, indent=2, sort_keys=True) + "\n")
    plot_calibration(gammas, reports, out / "sweep.png", best=best)
    progress(event="sweep", best_gamma=best, points=len(gammas))
    return 0


def _images_for_export(args, model):
    from dsva.data import load_dataset, load_image

    if args.image:
        return [(Path(p).stem, load_image(p, model.image_size)) for p in args.image]
    if args.data:
        index = load_dataset(args.data, model.image_size)
        ids = list(index.entries)[: args.limit] if args.limit else list(index.entries)
        return [(i.replace("/", "__").rsplit(".", 1)[0], index.load(i)) for i in ids]
    raise UsageError("give --image PATH or --data DIR")


def cmd_export_attn(args) -> int:
    import torch

    from dsva.model import DSVAModel
    from dsva.plotting import plot_attention

    model, config, meta = DSVAModel.load(args.checkpoint)
    names = meta.get("attributes") or [f"a{i}" for i in range(model.bank.prototypes.shape[0])]
    out = Path(args.out)
    for stem, img in _images_for_export(args, model):
        with torch.no_grad():
            maps = model(torch.as_tensor(img[None], dtype=torch.float32)).maps[0].double().numpy()
        lines = []
        for name, grid in zip(names, maps):
            lines.append(f"# {name}")
            lines += [",".join(repr(float(v)) for v in row) for row in grid]
        atomic_write(out / f"{stem}_attention.csv", "\n".join(lines) + "\n")
        if not args.no_figures:
            plot_attention(img, maps, names, out / f"{stem}_attention.png")
    progress(event="export-attn", out=str(out))
    return 0


def cmd_export_crop(args) -> int:
    import torch

    from dsva.ac import concentration_mask, crop_and_resize, crop_box, mean_attention
    from dsva.data import load_image, save_image
    from dsva.model import DSVAModel
    from dsva.plotting import plot_crop

    model, config, meta = DSVAModel.load(args.checkpoint)
    img = load_image(args.image, model.image_size)
    with torch.no_grad():
        maps = model(torch.as_tensor(img[None], dtype=torch.float32)).maps[0].double()
    mask = concentration_mask(mean_attention(maps))
    box = crop_box(mask)
    crop = crop_and_resize(img, box, model.grid_side)
    out = Path(args.out)
    stem = Path(args.image).stem
    save_image(out / f"{stem}_crop.png", crop)
    atomic_write(out / f"{stem}_mask.csv", "\n".join(",".join(str(int(v)) for v in row) for row in mask.mask) + "\n")
    plot_crop(img, mask.mean_attention, mask.mask, box, crop, out / f"{stem}_crop_report.png")
    progress(event="export-crop", box=box.as_tuple(), threshold=mask.threshold, out=str(out))
    return 0


def cmd_export_embeddings(args) -> int:
    from dsva.data import load_dataset, read_split
    from dsva.model import DSVAModel

    model, config, meta = DSVAModel.load(args.checkpoint)
    index = load_dataset(args.data, model.image_size)
    if args.split:
        split = read_split(args.split)
        ids = [i for c in split.classes for i in split.test.get(c, ())]
    else:
        ids = list(index.entries)
    values = _predict(model, index, ids)
    names = meta.get("attributes") or [f"a{i}" for i in range(values.shape[1])]
    lines = ["id,label," + ",".join(names)]
    lines += [f"{i},{index.label(i)}," + ",".join(repr(float(v)) for v in row) for i, row in zip(ids, values)]
    atomic_write(Path(args.out) / "embeddings.csv", "\n".join(lines) + "\n")
    progress(event="export-embeddings", rows=len(ids), out=str(args.out))
    return 0


# --------------------------------------------------------------------------
# parser
# --------------------------------------------------------------------------


def build_parser() -> Parser:
    common = Parser(add_help=False)
    common.add_argument("--seed", type=int, default=None, help="random seed (overrides DSVA_SEED)")
    common.add_argument("--config", default=None, help="key=value configuration file")
    common.add_argument("--preset", choices=["tiny"], default=None, help="desk-scale model preset")

    parser = Parser(prog="dsva", description="Zero-shot scene classification by semantic-visual alignment.")
    sub = parser.add_subparsers(dest="command", metavar="COMMAND", parser_class=Parser)

    p = sub.add_parser("synth", parents=[common], help="render the synthetic shapes dataset")
    p.add_argument("--spec", help="synthetic spec file (default: built-in 12-class spec)")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("annotate", parents=[common], help="annotate class attributes with an embedder")
    p.add_argument("--images", required=True, help="class-folder image directory")
    p.add_argument("--vocab", required=True, help="vocabulary file: group<TAB>attribute per line")
    p.add_argument("--embedder", default="mock", help="'mock' or 'bridge:DIR'")
    p.add_argument("--m", type=int, default=None, help="probe images per class")
    p.add_argument("--split", help="split JSON; unseen-class probes then come from held-out images")
    p.add_argument("--template", default="This photo contains {attribute}")
    p.add_argument("--out", required=True, help="output matrix CSV")
    p.set_defaults(func=cmd_annotate)

    p = sub.add_parser("train", parents=[common], help="train the model")
    p.add_argument("--data", required=True)
    p.add_argument("--split")
    p.add_argument("--ratio", help="make a seeded split, e.g. 60/10")
    p.add_argument("--class-matrix", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--init", help="pretrained encoder weights (shape-table container)")
    p.add_argument("--freeze-backbone", action="store_true")
    p.add_argument("--class-norm", choices=["l2", "none", "zscore"])
    p.add_argument("--warmup-epochs", type=int)
    p.add_argument("--main-epochs", type=int)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--grad-accum", type=int)
    p.set_defaults(func=cmd_train)

    def eval_inputs(p):
        p.add_argument("--checkpoint", required=True)
        p.add_argument("--data", required=True)
        p.add_argument("--split", required=True)
        p.add_argument("--class-matrix", required=True)
        p.add_argument("--class-norm", choices=["l2", "none", "zscore"])

    p = sub.add_parser("eval", parents=[common], help="ZSL / GZSL evaluation")
    eval_inputs(p)
    p.add_argument("--gzsl", action="store_true", help="also report seen/unseen/harmonic accuracy")
    p.add_argument("--gamma", type=float, default=None, help="calibrated stacking factor")
    p.add_argument("--zsl-accuracy", choices=["overall", "per-class-mean"])
    p.add_argument("--report", required=True)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("sweep", parents=[common], help="calibration sweep over gamma")
    eval_inputs(p)
    p.add_argument("--gammas", help="comma-separated sorted gamma values")
    p.add_argument("--gamma-min", type=float, default=1e-4, help="grid is 0 then geometric from min to max")
    p.add_argument("--gamma-max", type=float, default=10.0)
    p.add_argument("--gamma-num", type=int, default=20)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_sweep)

    for name, func, helptext in (
        ("export-attn", cmd_export_attn, "write per-attribute attention grids"),
        ("export-embeddings", cmd_export_embeddings, "write predicted attribute vectors"),
    ):
        p = sub.add_parser(name, parents=[common], help=helptext)
        p.add_argument("--checkpoint", required=True)
        p.add_argument("--data")
        p.add_argument("--out", required=True)
        if name == "export-attn":
            p.add_argument("--image", nargs="*")
            p.add_argument("--limit", type=int, default=0)
            p.add_argument("--no-figures", action="store_true")
        else:
            p.add_argument("--split")
        p.set_defaults(func=func)

    p = sub.add_parser("export-crop", parents=[common], help="write the concentrated crop of one image")
    p.add_argument("--image", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_export_crop)
    return parser


def run(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    argv = list(sys.argv[1:] if argv is None else argv)
    try:
        args = parser.parse_args(argv)
        if args.command is None:
            raise UsageError(parser.format_usage() + "dsva: error: a subcommand is required")
        return args.func(args)
    except SystemExit as exc:  # --help
        return int(exc.code or 0)
    except DSVAError as exc:
        print(str(exc), file=sys.stderr)
        return 1
    except Exception as exc:  # runtime failure
        print(f"dsva: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
