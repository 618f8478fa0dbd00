"""Command-line surface: data generation, gradient checks, training,
evaluation, variant comparison, and heatmap rendering.

Heavy imports happen inside the subcommand handlers so that
USAGE_DETERMINISTIC=1 can pin the BLAS thread count before numpy loads.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from pathlib import Path


def _apply_deterministic_env() -> None:
    if os.environ.get("USAGE_DETERMINISTIC") == "1":
        for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
            os.environ.setdefault(var, "1")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="seedlab",
        description="Desk-scale seed-area generation laboratory",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate a synthetic dataset")
    p.add_argument("--config", type=Path, default=None, help="TOML/JSON with a [data] section")
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--train-count", type=int, default=500)
    p.add_argument("--eval-count", type=int, default=100)
    p.add_argument("--png", type=int, default=0, help="dump the first N samples as PNGs")
    p.add_argument("overrides", nargs="*", help="key=value overrides")
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("gradcheck", help="finite-difference check of every op")
    p.add_argument("--trials", type=int, default=100)
    p.add_argument("--quick", action="store_true", help="10 trials per op")
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("train", help="train a seed-area model")
    p.add_argument("--config", type=Path, default=None)
    p.add_argument("--data", type=Path, required=True, help="training dataset directory")
    p.add_argument("--eval-data", type=Path, default=None)
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("overrides", nargs="*")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint")
    p.add_argument("--checkpoint", type=Path, required=True)
    p.add_argument("--config", type=Path, required=True, help="config file or run manifest")
    p.add_argument("--data", type=Path, required=True)
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("overrides", nargs="*")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("compare", help="train and compare variants")
    p.add_argument("--variants", required=True, help="comma list, e.g. cam,usage")
    p.add_argument("--backbones", default="transformer", help="comma list: conv,transformer")
    p.add_argument("--seeds", default="3", help="count N (seeds 0..N-1) or comma list")
    p.add_argument("--config", type=Path, default=None, help="base run config")
    p.add_argument("--data", type=Path, required=True)
    p.add_argument("--eval-data", type=Path, default=None)
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("overrides", nargs="*")
    p.set_defaults(func=cmd_compare)

    p = sub.add_parser("render", help="render seed-area panels as PNGs")
    p.add_argument("--checkpoint", type=Path, required=True)
    p.add_argument("--config", type=Path, required=True)
    p.add_argument("--data", type=Path, required=True)
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--samples", default="0,1,2,3", help="comma list of sample positions")
    p.add_argument("overrides", nargs="*")
    p.set_defaults(func=cmd_render)

    return parser


def _load_tree(path: Path | None, overrides: list[str]) -> dict:
    from .config import apply_overrides, load_raw

    tree = load_raw(path) if path else {}
    return apply_overrides(tree, overrides)


def _run_config_from_args(args) -> "object":
    from .config import run_config_from_dict

    tree = _load_tree(args.config, args.overrides)
    if "run" in tree:  # accept a previously written manifest
        tree = tree["run"]
    return run_config_from_dict(tree)


def _load_split(directory: Path):
    from .data import load_dataset

    return load_dataset(directory)


def cmd_gen_data(args) -> int:
    from .config import scene_spec_from_dict
    from .data import generate_dataset, save_dataset

    tree = _load_tree(args.config, args.overrides)
    spec = scene_spec_from_dict(tree)
    out = args.out
    out.mkdir(parents=True, exist_ok=True)
    for split, count in (("train", args.train_count), ("eval", args.eval_count)):
        samples, manifest = generate_dataset(args.seed, count, spec, split)
        save_dataset(out / split, samples, manifest)
        print(f"{split}: {count} samples, class frequencies "
              f"{[round(f, 3) for f in manifest['class_frequencies']]}")
    manifest = {
        "seed": args.seed,
        "train_count": args.train_count,
        "eval_count": args.eval_count,
        "spec": json.loads(spec.canonical_json()),
        "spec_digest": spec.digest(),
    }
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True))
    if args.png:
        from .render import label_colors, save_panel, _upsample
        import numpy as np

        preview = out / "preview"
        preview.mkdir(exist_ok=True)
        samples, _ = _load_split(out / "train")
        for s in samples[: args.png]:
            strip = np.concatenate(
                [
                    _upsample(np.transpose(s.image, (1, 2, 0)), 128),
                    _upsample(label_colors(s.gt_mask), 128),
                ],
                axis=1,
            )
            save_panel(preview / f"sample{s.index:05d}.png", strip)
    return 0


def cmd_gradcheck(args) -> int:
    from .gradcheck import run_suite

    results, ok = run_suite(trials=args.trials, backbone_trials=args.trials, quick=args.quick)
    for r in results:
        print(r.line())
    total = sum(r.seconds for r in results)
    print(f"{'PASS' if ok else 'FAIL'}: {len(results)} ops in {total:.1f}s")
    return 0 if ok else 1


def cmd_train(args) -> int:
    from .config import resolved_manifest
    from .train import RunAbort, save_run, train_seed_model

    config = _run_config_from_args(args)
    train_set, train_manifest = _load_split(args.data)
    eval_set, eval_manifest = (None, None)
    if args.eval_data:
        eval_set, eval_manifest = _load_split(args.eval_data)
    args.out.mkdir(parents=True, exist_ok=True)
    manifest = resolved_manifest(
        config,
        {"train_data": train_manifest, "eval_data": eval_manifest},
    )
    (args.out / "manifest.json").write_text(manifest)
    try:
        result = train_seed_model(config, train_set, eval_set)
    except RunAbort as err:
        (args.out / "abort.json").write_text(json.dumps({"error": str(err), "step": err.step}))
        print(f"aborted: {err}", file=sys.stderr)
        return 1
    save_run(args.out, result)
    m = result.metrics
    print(
        f"trained {config.mapping} on {config.backbone.kind}: "
        f"mIoU={m.miou:.4f} FPR={m.mean_fpr:.4f} FNR={m.mean_fnr:.4f} "
        f"({result.wall_seconds:.1f}s)"
    )
    return 0


def cmd_eval(args) -> int:
    from . import container
    from .config import resolved_manifest
    from .train import evaluate_model

    config = _run_config_from_args(args)
    params = container.read_tensors(args.checkpoint)
    dataset, data_manifest = _load_split(args.data)
    args.out.mkdir(parents=True, exist_ok=True)
    (args.out / "manifest.json").write_text(
        resolved_manifest(config, {"data": data_manifest, "checkpoint": str(args.checkpoint)})
    )
    metrics = evaluate_model(params, dataset, config)
    (args.out / "metrics.json").write_text(metrics.to_json())
    header, row = metrics.to_csv_row()
    (args.out / "metrics.csv").write_text(header + "\n" + row + "\n")
    print(f"mIoU={metrics.miou:.4f} FPR={metrics.mean_fpr:.4f} FNR={metrics.mean_fnr:.4f}")
    return 0


def _parse_seeds(text: str) -> list[int]:
    if "," in text:
        return [int(t) for t in text.split(",") if t]
    return list(range(int(text)))


def cmd_compare(args) -> int:
    from .config import resolved_manifest
    from .train import comparison_csv, comparison_text, run_comparison

    base = _run_config_from_args(args) if args.config or args.overrides else None
    variants = [v for v in args.variants.split(",") if v]
    backbones = [b for b in args.backbones.split(",") if b]
    seeds = _parse_seeds(args.seeds)
    train_set, train_manifest = _load_split(args.data)
    eval_set = train_set
    if args.eval_data:
        eval_set, _ = _load_split(args.eval_data)

    def progress(name, seed, metrics):
        print(f"  {name} seed {seed}: mIoU={metrics.miou:.4f}", flush=True)

    rows, detail = run_comparison(
        variants, backbones, train_set, eval_set, seeds, base, progress
    )
    args.out.mkdir(parents=True, exist_ok=True)
    if base is not None:
        (args.out / "manifest.json").write_text(
            resolved_manifest(base, {"train_data": train_manifest})
        )
    (args.out / "comparison.csv").write_text(comparison_csv(rows))
    text = comparison_text(rows)
    (args.out / "comparison.txt").write_text(text)
    (args.out / "detail.json").write_text(json.dumps(detail, indent=2, sort_keys=True))
    print(text)
    return 0


def cmd_render(args) -> int:
    from . import container
    from .autodiff import no_grad
    from .backbones import forward_features_batch
    from .render import sample_panel, save_panel
    from .seeds import compute_seed_area, seed_label_map

    config = _run_config_from_args(args)
    params = container.read_tensors(args.checkpoint)
    dataset, _ = _load_split(args.data)
    positions = [int(t) for t in args.samples.split(",") if t]
    args.out.mkdir(parents=True, exist_ok=True)
    grid = tuple(config.backbone.feature_grid)
    for pos in positions:
        sample = dataset[pos]
        with no_grad():
            features = forward_features_batch(
                config.backbone, params, sample.image[None], mode="eval"
            ).data[0]
        present = [c + 1 for c in range(config.num_classes) if sample.labels[c] == 1]
        areas = [compute_seed_area(features, params["head.w"], cid) for cid in present]
        pred = seed_label_map(areas, config.background_threshold, shape=grid)
        panel = sample_panel(sample, areas, pred, config.num_classes)
        save_panel(args.out / f"panel{sample.index:05d}.png", panel)
    print(f"wrote {len(positions)} panels to {args.out}")
    return 0


def main(argv=None) -> int:
    _apply_deterministic_env()
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except Exception as err:  # config errors exit 2, runtime aborts exit 1
        from .config import ConfigError

        if isinstance(err, ConfigError):
            print(f"config error: {err}", file=sys.stderr)
            return 2
        if isinstance(err, (FileNotFoundError, json.JSONDecodeError)):
            print(f"config error: {err}", file=sys.stderr)
            return 2
        from .train import RunAbort

        if isinstance(err, RunAbort):
            print(f"run aborted: {err}", file=sys.stderr)
            return 1
        raise


if __name__ == "__main__":
    sys.exit(main())
