"""Command-line surface: data synthesis, training, evaluation, ablations,
gradient checks, multimodal runs, and cost reports.

Exit codes: 0 success, 1 usage error, 2 data error, 3 check failure.
Every run writes a resolved-config snapshot (run_config.json) next to its
outputs; all outputs land under --out.
"""

from __future__ import annotations

import argparse
import json
import os
import sys

import numpy as np

from . import blocks as B
from . import data as D
from . import gradcheck as G
from . import model as M
from . import multimodal as MM
from . import train as T

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_CHECK = 0, 1, 2, 3


class UsageError(Exception):
    pass


class CheckFailure(Exception):
    pass


class Parser(argparse.ArgumentParser):
    def error(self, message):  # argparse default exits with 2; we reserve that for data errors
        raise UsageError(message)


def _write_run_config(out_dir, command: str, args: argparse.Namespace) -> None:
    resolved = {k: v for k, v in sorted(vars(args).items()) if k != "func"}
    resolved["command"] = command
    with open(os.path.join(out_dir, "run_config.json"), "w", encoding="utf-8") as fh:
        json.dump(resolved, fh, indent=2, sort_keys=True)
        fh.write("\n")


def _ensure_out(args) -> str:
    out = args.out
    try:
        os.makedirs(out, exist_ok=True)
    except OSError as exc:
        raise D.DataError(f"cannot create output directory {out!r}: {exc}") from None
    return out


def write_svg_line_chart(path, xs, ys, title: str, xlabel: str, ylabel: str) -> None:
    """Minimal dependency-free SVG line chart (text-based, diffable)."""
    w, h, m = 480, 320, 56
    x0, x1 = float(min(xs)), float(max(xs))
    y0, y1 = float(min(ys)), float(max(ys))
    if x1 == x0:
        x1 = x0 + 1.0
    if y1 == y0:
        y1 = y0 + 1.0

    def sx(x):
        return m + (x - x0) / (x1 - x0) * (w - 2 * m)

    def sy(y):
        return h - m - (y - y0) / (y1 - y0) * (h - 2 * m)

    points = " ".join(f"{sx(x):.2f},{sy(y):.2f}" for x, y in zip(xs, ys))
    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}">',
        f'<rect width="{w}" height="{h}" fill="white"/>',
        f'<text x="{w / 2:.0f}" y="20" text-anchor="middle" font-size="14">{title}</text>',
        f'<line x1="{m}" y1="{h - m}" x2="{w - m}" y2="{h - m}" stroke="black"/>',
        f'<line x1="{m}" y1="{m}" x2="{m}" y2="{h - m}" stroke="black"/>',
        f'<text x="{w / 2:.0f}" y="{h - 12}" text-anchor="middle" font-size="12">{xlabel}</text>',
        f'<text x="16" y="{h / 2:.0f}" font-size="12" transform="rotate(-90 16 {h / 2:.0f})" text-anchor="middle">{ylabel}</text>',
        f'<text x="{m}" y="{h - m + 16}" font-size="10">{x0:g}</text>',
        f'<text x="{w - m}" y="{h - m + 16}" font-size="10" text-anchor="end">{x1:g}</text>',
        f'<text x="{m - 4}" y="{h - m}" font-size="10" text-anchor="end">{y0:.3f}</text>',
        f'<text x="{m - 4}" y="{m + 4}" font-size="10" text-anchor="end">{y1:.3f}</text>',
        f'<polyline points="{points}" fill="none" stroke="steelblue" stroke-width="2"/>',
    ]
    for x, y in zip(xs, ys):
        parts.append(f'<circle cx="{sx(x):.2f}" cy="{sy(y):.2f}" r="3" fill="steelblue"/>')
    parts.append("</svg>")
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("\n".join(parts) + "\n")


# -- command implementations -----------------------------------------------------

def _model_config_from(args, n_classes: int) -> B.ModelConfig:
    return B.ModelConfig(
        d_model=args.d_model,
        n_blocks=args.blocks,
        heads=args.heads,
        n_experts=args.experts,
        top_k=args.top_k,
        d_ff=args.d_ff,
        variant=args.variant,
        jamba_attn_ratio=args.jamba_attn_ratio,
        token_chunk=args.token_chunk,
        n_classes=n_classes,
        load_balance_coeff=args.load_balance_coeff,
        use_positions=args.positions,
    )


def cmd_synth(args) -> int:
    out = _ensure_out(args)
    ds = D.synthesize_dataset(
        n_individuals=args.individuals,
        cells_per_individual=args.cells,
        n_features=args.features,
        n_classes=args.classes,
        difficulty=args.difficulty,
        seed=args.seed,
    )
    split = D.split_by_individual(ds, ratio=args.ratio, seed=args.seed)
    train_ds = D.subset_by_individuals(ds, split.train_individuals)
    test_ds = D.subset_by_individuals(ds, split.test_individuals)
    D.write_csv(train_ds, os.path.join(out, "train.csv"))
    D.write_csv(test_ds, os.path.join(out, "test.csv"))
    manifest = {
        "train_cells": len(train_ds),
        "test_cells": len(test_ds),
        "train_individuals": sorted(split.train_individuals),
        "test_individuals": sorted(split.test_individuals),
        "features": args.features,
        "classes": args.classes,
        "difficulty": args.difficulty,
        "seed": args.seed,
    }
    with open(os.path.join(out, "manifest.json"), "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")
    _write_run_config(out, "synth", args)
    print(f"wrote {len(train_ds)} train / {len(test_ds)} test cells to {out}")
    return EXIT_OK


def _prepare_training_data(args):
    ds = D.load_csv(args.data)
    if len(ds.label_names) < 2:
        raise D.DataError(f"{args.data}: need >= 2 classes, found {ds.label_names}")
    if args.standardize:
        scaler = D.fit_standardizer(ds.features)
        feats = scaler.apply(ds.features)
    else:
        scaler = None
        feats = ds.features
    return ds, scaler, feats


def cmd_train(args) -> int:
    out = _ensure_out(args)
    ds, scaler, feats = _prepare_training_data(args)
    config = _model_config_from(args, n_classes=len(ds.label_names))
    tokens = M.tokenize_features(feats, config.token_chunk)
    net = M.build_model(config, seed=args.seed)
    tc = T.TrainConfig(
        epochs=args.epochs,
        batch_size=args.batch,
        seed=args.seed,
        learning_rate=args.lr,
        weight_decay=args.weight_decay,
    )
    losses, epochs_run = T.train_classifier(net, tokens, ds.labels, tc)
    extra = {
        "labels": ",".join(ds.label_names),
        "standardize": "1" if scaler else "0",
        "n_features": str(ds.n_features),
        "seed": str(args.seed),
    }
    arrays = {"scaler.mean": scaler.mean, "scaler.std": scaler.std} if scaler else {}
    M.save_checkpoint(os.path.join(out, "checkpoint.uam"), net, extra, arrays)
    with open(os.path.join(out, "loss.csv"), "w", encoding="utf-8") as fh:
        fh.write("batch,loss\n")
        for i, loss in enumerate(losses):
            fh.write(f"{i},{loss!r}\n")
    _write_run_config(out, "train", args)
    acc = T.accuracy_of(net, tokens, ds.labels)
    print(f"trained {config.variant} for {epochs_run} epochs; final loss {losses[-1]:.4f}; train accuracy {acc:.4f}")
    return EXIT_OK


def _load_eval_data(path, checkpoint_model, extra, arrays):
    vocab = extra["labels"].split(",")
    ds = D.load_csv(path, label_vocab=vocab)
    expect = int(extra["n_features"])
    if ds.n_features != expect:
        raise D.DataError(f"{path}: {ds.n_features} features but checkpoint expects {expect}")
    feats = ds.features
    if extra.get("standardize") == "1":
        scaler = D.Standardizer(mean=arrays["scaler.mean"], std=arrays["scaler.std"])
        feats = scaler.apply(feats)
    tokens = M.tokenize_features(feats, checkpoint_model.config.token_chunk)
    return ds, tokens


def cmd_eval(args) -> int:
    out = _ensure_out(args)
    net, extra, arrays = M.load_checkpoint(args.checkpoint)
    ds, tokens = _load_eval_data(args.data, net, extra, arrays)
    report = T.evaluate(net, tokens, ds.labels, ds.label_names)
    with open(os.path.join(out, "metrics.txt"), "w", encoding="utf-8") as fh:
        fh.write(report.to_text() + "\n")
    with open(os.path.join(out, "metrics.csv"), "w", encoding="utf-8") as fh:
        fh.write(report.csv_header() + "\n" + report.csv_row() + "\n")
    _write_run_config(out, "eval", args)
    print(report.to_text())
    return EXIT_OK


def cmd_ablate(args) -> int:
    out = _ensure_out(args)
    train_ds = D.load_csv(args.data)
    if args.test:
        test_ds = D.load_csv(args.test, label_vocab=train_ds.label_names)
    else:
        split = D.split_by_individual(train_ds, ratio=0.8, seed=args.seed)
        test_ds = D.subset_by_individuals(train_ds, split.test_individuals)
        train_ds = D.subset_by_individuals(train_ds, split.train_individuals)
    scaler = D.fit_standardizer(train_ds.features)
    train_feats = scaler.apply(train_ds.features)
    test_feats = scaler.apply(test_ds.features)

    if args.sweep == "blocks":
        values = [int(v) for v in args.values.split(",")]
        settings = [("blocks", v) for v in values]
    else:
        settings = [("variant", v) for v in B.VARIANTS]

    rows = []
    for kind, value in settings:
        if kind == "blocks":
            args_blocks, args_variant = value, args.variant
        else:
            args_blocks, args_variant = args.blocks, value
        config = B.ModelConfig(
            d_model=args.d_model,
            n_blocks=args_blocks,
            heads=args.heads,
            n_experts=args.experts,
            top_k=args.top_k,
            d_ff=args.d_ff,
            variant=args_variant,
            jamba_attn_ratio=args.jamba_attn_ratio,
            token_chunk=args.token_chunk,
            n_classes=len(train_ds.label_names),
            load_balance_coeff=args.load_balance_coeff,
            use_positions=args.positions,
        )
        tokens = M.tokenize_features(train_feats, config.token_chunk)
        net = M.build_model(config, seed=args.seed)
        tc = T.TrainConfig(epochs=args.epochs, batch_size=args.batch, seed=args.seed, learning_rate=args.lr)
        T.train_classifier(net, tokens, train_ds.labels, tc)
        test_tokens = M.tokenize_features(test_feats, config.token_chunk)
        report = T.evaluate(net, test_tokens, test_ds.labels, test_ds.label_names)
        rows.append((value, B.count_parameters(config), report))
        print(f"{kind}={value}: params={rows[-1][1]} accuracy={report.accuracy:.4f}")

    with open(os.path.join(out, "ablate.csv"), "w", encoding="utf-8") as fh:
        fh.write(f"{args.sweep},parameters,{T.MetricsReport.csv_header()}\n")
        for value, params, report in rows:
            fh.write(f"{value},{params},{report.csv_row()}\n")
    xs = [row[0] if args.sweep == "blocks" else i for i, row in enumerate(rows)]
    write_svg_line_chart(
        os.path.join(out, "ablate.svg"),
        xs,
        [row[2].accuracy for row in rows],
        title=f"accuracy vs {args.sweep}",
        xlabel=args.sweep,
        ylabel="accuracy",
    )
    _write_run_config(out, "ablate", args)
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    results = G.run_gradient_suite(
        seeds=range(args.seeds), epsilon=args.epsilon, tolerance=args.tolerance
    )
    lines = []
    for r in results:
        lines.append(f"{'PASS' if r.passed else 'FAIL'} {r.name}: max rel err {r.max_rel_error:.3e}")
        print(lines[-1])
    if args.out:
        out = _ensure_out(args)
        with open(os.path.join(out, "gradcheck.txt"), "w", encoding="utf-8") as fh:
            fh.write("\n".join(lines) + "\n")
        _write_run_config(out, "gradcheck", args)
    failures = sum(not r.passed for r in results)
    if failures:
        raise CheckFailure(f"{failures} gradient check(s) failed")
    return EXIT_OK


def cmd_cost(args) -> int:
    rows = []
    for variant in B.VARIANTS:
        config = B.ModelConfig(
            d_model=args.d_model,
            n_blocks=args.blocks,
            heads=args.heads,
            n_experts=args.experts,
            top_k=args.top_k,
            d_ff=args.d_ff,
            variant=variant,
            jamba_attn_ratio=args.jamba_attn_ratio,
            token_chunk=args.token_chunk,
            n_classes=args.classes,
        )
        report = B.cost_report(config, args.seq_len)
        tree = B.count_parameters_tree(M.build_model(config, seed=0))
        if tree != report.parameter_count:
            raise CheckFailure(
                f"{variant}: tree-walk count {tree} != symbolic {report.parameter_count}"
            )
        rows.append((variant, report))
    header = f"{'variant':<9} {'parameters':>12} {'flops/token':>12}"
    print(header)
    for variant, report in rows:
        print(f"{variant:<9} {report.parameter_count:>12} {report.flops_per_token:>12}")
    if args.out:
        out = _ensure_out(args)
        with open(os.path.join(out, "cost.csv"), "w", encoding="utf-8") as fh:
            fh.write("variant,parameters,flops_per_token\n")
            for variant, report in rows:
                fh.write(f"{variant},{report.parameter_count},{report.flops_per_token}\n")
        _write_run_config(out, "cost", args)
    return EXIT_OK


def cmd_mm_synth(args) -> int:
    out = _ensure_out(args)
    samples = MM.synthesize_seg_samples(
        args.samples, seed=args.seed, grid=args.grid, tile=args.tile, n_features=args.features
    )
    for i, sample in enumerate(samples):
        MM.save_seg_sample(os.path.join(out, f"sample_{i:04d}"), sample)
    with open(os.path.join(out, "manifest.json"), "w", encoding="utf-8") as fh:
        json.dump(
            {"n_samples": args.samples, "grid": args.grid, "tile": args.tile,
             "features": args.features, "seed": args.seed},
            fh, indent=2, sort_keys=True,
        )
        fh.write("\n")
    _write_run_config(out, "mm-synth", args)
    print(f"wrote {len(samples)} segmentation samples to {out}")
    return EXIT_OK


def _load_seg_dir(path) -> list:
    if not os.path.isdir(path):
        raise D.DataError(f"{path}: not a directory of segmentation samples")
    dirs = sorted(d for d in os.listdir(path) if d.startswith("sample_"))
    if not dirs:
        raise D.DataError(f"{path}: no sample_* directories found")
    return [MM.load_seg_sample(os.path.join(path, d)) for d in dirs]


def _mm_config_from(args, n_features: int) -> MM.MultimodalConfig:
    backbone = B.ModelConfig(
        d_model=args.d_model,
        n_blocks=args.blocks,
        heads=args.heads,
        n_experts=args.experts,
        top_k=args.top_k,
        d_ff=args.d_ff,
        variant=args.variant,
        token_chunk=args.token_chunk,
        n_classes=2,
        load_balance_coeff=args.load_balance_coeff,
    )
    return MM.MultimodalConfig(
        backbone=backbone,
        d_img=args.d_img,
        grid=args.grid,
        tile=args.tile,
        encoder=args.encoder,
        freeze_backbone=args.freeze_backbone,
    )


def cmd_mm_train(args) -> int:
    out = _ensure_out(args)
    samples = _load_seg_dir(args.data)
    config = _mm_config_from(args, samples[0].cell_features.shape[1])
    net = MM.build_multimodal_model(config, seed=args.seed)
    tc = T.TrainConfig(
        epochs=args.epochs, batch_size=args.batch, seed=args.seed,
        learning_rate=args.lr, weight_decay=args.weight_decay,
    )
    losses = MM.train_multimodal(samples, net, tc, use_radiomics=not args.no_radiomics)
    MM.save_mm_checkpoint(
        os.path.join(out, "mm_checkpoint.uam"), net,
        {"use_radiomics": "0" if args.no_radiomics else "1", "seed": str(args.seed)},
    )
    with open(os.path.join(out, "loss.csv"), "w", encoding="utf-8") as fh:
        fh.write("batch,loss\n")
        for i, loss in enumerate(losses):
            fh.write(f"{i},{loss!r}\n")
    _write_run_config(out, "mm-train", args)
    print(f"trained multimodal model: {len(losses)} batches, final loss {losses[-1]:.4f}")
    return EXIT_OK


def cmd_mm_eval(args) -> int:
    out = _ensure_out(args)
    samples = _load_seg_dir(args.data)
    net, extra = MM.load_mm_checkpoint(args.checkpoint)
    use_radiomics = extra.get("use_radiomics", "1") == "1" and not args.no_radiomics
    metrics, cell_acc = MM.evaluate_multimodal(samples, net, use_radiomics=use_radiomics)
    lines = [
        f"precision: {metrics.precision:.4f}",
        f"cIoU: {metrics.c_iou:.4f}",
        f"mIoU: {metrics.m_iou:.4f}",
        f"cDICE: {metrics.c_dice:.4f}",
        f"mDICE: {metrics.m_dice:.4f}",
        f"cell accuracy: {cell_acc:.4f}" if cell_acc is not None else "cell accuracy: absent (radiomics ablated)",
    ]
    with open(os.path.join(out, "metrics.txt"), "w", encoding="utf-8") as fh:
        fh.write("\n".join(lines) + "\n")
    with open(os.path.join(out, "metrics.csv"), "w", encoding="utf-8") as fh:
        fh.write("precision,c_iou,m_iou,c_dice,m_dice\n")
        fh.write(f"{metrics.precision:.6f},{metrics.c_iou:.6f},{metrics.m_iou:.6f},"
                 f"{metrics.c_dice:.6f},{metrics.m_dice:.6f}\n")
    _write_run_config(out, "mm-eval", args)
    print("\n".join(lines))
    return EXIT_OK


# -- parser ------------------------------------------------------------------------

def _add_model_flags(p: argparse.ArgumentParser, d_model: int = 16, blocks: int = 4):
    p.add_argument("--variant", default="UAM", choices=B.VARIANTS, help="architecture variant")
    p.add_argument("--d-model", type=int, default=d_model, help="model width")
    p.add_argument("--blocks", type=int, default=blocks, help="number of blocks")
    p.add_argument("--heads", type=int, default=4, help="attention heads")
    p.add_argument("--experts", type=int, default=4, help="MoE expert count")
    p.add_argument("--top-k", type=int, default=2, help="experts active per token")
    p.add_argument("--d-ff", type=int, default=None, help="expert hidden width (default 4*d_model)")
    p.add_argument("--jamba-attn-ratio", type=float, default=0.25, help="attention share for the Jamba baseline")
    p.add_argument("--token-chunk", type=int, default=1, help="features per token")
    p.add_argument("--load-balance-coeff", type=float, default=0.01, help="MoE aux loss weight")
    p.add_argument("--positions", action="store_true", help="add sinusoidal positional encodings")


def _add_train_flags(p: argparse.ArgumentParser, epochs: int, batch: int, lr: float = 1e-4):
    p.add_argument("--epochs", type=int, default=epochs)
    p.add_argument("--batch", type=int, default=batch, help="batch size")
    p.add_argument("--lr", type=float, default=lr, help="learning rate")
    p.add_argument("--weight-decay", type=float, default=0.01)
    p.add_argument("--seed", type=int, default=0)


def build_parser() -> Parser:
    parser = Parser(prog="uam", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True, parser_class=Parser)

    p = sub.add_parser("synth", help="generate a synthetic radiomics dataset")
    p.add_argument("--individuals", type=int, default=10)
    p.add_argument("--cells", type=int, default=100, help="cells per individual")
    p.add_argument("--features", type=int, default=106)
    p.add_argument("--classes", type=int, default=2)
    p.add_argument("--difficulty", type=float, default=0.0)
    p.add_argument("--ratio", type=float, default=0.8, help="train cell fraction")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", default=".")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", help="train a classifier on a radiomics CSV")
    p.add_argument("--data", required=True, help="training CSV")
    p.add_argument("--out", default=".")
    p.add_argument("--no-standardize", dest="standardize", action="store_false")
    _add_model_flags(p)
    _add_train_flags(p, epochs=50, batch=64)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint on a radiomics CSV")
    p.add_argument("--data", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--out", default=".")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("ablate", help="sweep block counts or variants")
    p.add_argument("--data", required=True, help="training CSV")
    p.add_argument("--test", default=None, help="held-out CSV (default: split --data)")
    p.add_argument("--sweep", choices=("blocks", "variant"), default="blocks")
    p.add_argument("--values", default="2,4,6,8", help="comma list for --sweep blocks")
    p.add_argument("--out", default=".")
    _add_model_flags(p)
    _add_train_flags(p, epochs=5, batch=64)
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("gradcheck", help="finite-difference checks for every layer")
    p.add_argument("--seeds", type=int, default=10)
    p.add_argument("--epsilon", type=float, default=1e-5)
    p.add_argument("--tolerance", type=float, default=1e-4)
    p.add_argument("--out", default=None)
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("cost", help="parameter and FLOP accounting per variant")
    p.add_argument("--d-model", type=int, default=16)
    p.add_argument("--blocks", type=int, default=4)
    p.add_argument("--heads", type=int, default=4)
    p.add_argument("--experts", type=int, default=4)
    p.add_argument("--top-k", type=int, default=2)
    p.add_argument("--d-ff", type=int, default=None)
    p.add_argument("--jamba-attn-ratio", type=float, default=0.25)
    p.add_argument("--token-chunk", type=int, default=1)
    p.add_argument("--classes", type=int, default=2)
    p.add_argument("--seq-len", type=int, default=106)
    p.add_argument("--out", default=None)
    p.set_defaults(func=cmd_cost)

    p = sub.add_parser("mm-synth", help="generate synthetic segmentation samples")
    p.add_argument("--samples", type=int, default=96)
    p.add_argument("--grid", type=int, default=4)
    p.add_argument("--tile", type=int, default=8)
    p.add_argument("--features", type=int, default=8)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", default=".")
    p.set_defaults(func=cmd_mm_synth)

    p = sub.add_parser("mm-train", help="train the multimodal fusion model")
    p.add_argument("--data", required=True, help="directory of sample_* dirs")
    p.add_argument("--out", default=".")
    p.add_argument("--d-img", type=int, default=32)
    p.add_argument("--grid", type=int, default=4)
    p.add_argument("--tile", type=int, default=8)
    p.add_argument("--encoder", choices=("toy", "frozen"), default="toy")
    p.add_argument("--freeze-backbone", action="store_true")
    p.add_argument("--no-radiomics", action="store_true", help="ablate the radiomics rows")
    _add_model_flags(p, d_model=8, blocks=1)
    _add_train_flags(p, epochs=150, batch=4, lr=1e-3)
    p.set_defaults(func=cmd_mm_train)

    p = sub.add_parser("mm-eval", help="evaluate a multimodal checkpoint")
    p.add_argument("--data", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--no-radiomics", action="store_true")
    p.add_argument("--out", default=".")
    p.set_defaults(func=cmd_mm_eval)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        return args.func(args)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (D.DataError, M.CheckpointError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except CheckFailure as exc:
        print(f"check failure: {exc}", file=sys.stderr)
        return EXIT_CHECK


if __name__ == "__main__":
    sys.exit(main())
