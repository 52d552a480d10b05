"""Command-line pipeline: synth -> train -> embed -> eval, plus attention
export.

Exit codes: 0 success, 1 validation error (bad config, manifest, file
format, shapes), 2 runtime failure (divergence, numerical errors, broken
contracts). Commands validate all inputs before writing anything; files are
written to a temporary name and renamed on success.
"""

from __future__ import annotations

import argparse
import sys
import time
from pathlib import Path

import numpy as np

from . import figures
from .attention import COUNTER
from .config import RunConfig, load_run_config
from .data import (
    PlaceDataset,
    atomic_write_text,
    generate_synthetic,
    load_image,
    load_manifest,
    read_tensor_file,
    save_pgm,
    write_tensor_file,
)
from .errors import BoqError, DivergenceError, ManifestError, ValidationError
from .model import (
    export_attention,
    load_checkpoint,
    precompute_query_context,
    save_checkpoint,
)
from .retrieval import DescriptorIndex, build_ground_truth, evaluate, format_results
from .tensor import Tensor
from .training import embed_records, train


def _load_config(args) -> RunConfig:
    overrides = {}
    if getattr(args, "seed", None) is not None:
        overrides["seed"] = str(args.seed)
    return load_run_config(args.config, overrides)


def _echo_config(cfg: RunConfig, out_dir: Path) -> None:
    atomic_write_text(out_dir / "config.txt", cfg.to_text())


def cmd_synth(args) -> int:
    cfg = _load_config(args)
    out_dir = Path(args.out)
    manifest = generate_synthetic(cfg.synthetic_config(), out_dir)
    _echo_config(cfg, out_dir)
    print(
        f"wrote {len(manifest.records)} records "
        f"({cfg.num_places} places) to {out_dir}"
    )
    return 0


def cmd_train(args) -> int:
    cfg = _load_config(args)
    manifest = load_manifest(args.manifest)
    dataset = PlaceDataset(manifest)
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    _echo_config(cfg, out_dir)

    threshold = (
        float(cfg.frame_threshold) if manifest.gt_kind == "frame" else cfg.match_threshold_m
    )

    def _report(entry):
        print(f"epoch {entry.epoch}: {entry.format_line()}")

    def _write_outputs(result) -> None:
        lines = [m.format_line() for m in result.metrics]
        atomic_write_text(out_dir / "metrics.log", "\n".join(lines) + "\n" if lines else "")
        save_checkpoint(out_dir / "checkpoint.boqt", result.params)
        if result.metrics:
            figures.save_training_curves(result.metrics, out_dir / "training_curves.png")

    started = time.perf_counter()
    try:
        result = train(
            cfg.model_config(),
            dataset,
            cfg.batch_spec(),
            cfg.loss_params(),
            cfg.schedule(),
            seed=cfg.seed,
            weight_decay=cfg.weight_decay,
            augment=cfg.augment,
            freeze_stem=cfg.freeze_stem,
            steps_per_epoch=cfg.steps_per_epoch,
            match_threshold=threshold,
            on_epoch=_report,
        )
    except DivergenceError as e:
        print(f"error: {e}", file=sys.stderr)
        if e.result is not None:
            _write_outputs(e.result)
            print(f"retained last good checkpoint in {out_dir}", file=sys.stderr)
        return 2
    _write_outputs(result)
    elapsed = time.perf_counter() - started
    print(
        f"best val recall@1 {result.best_recall:.4f} at epoch {result.best_epoch} "
        f"({elapsed:.1f}s); checkpoint in {out_dir}"
    )
    return 0


def cmd_embed(args) -> int:
    cfg = _load_config(args)
    params = load_checkpoint(args.checkpoint)
    manifest = load_manifest(args.manifest)
    records = (
        manifest.records if args.role == "all" else manifest.by_role(args.role)
    )
    if not records:
        raise ManifestError(f"no records with role '{args.role}' in {args.manifest}")
    dataset = PlaceDataset(manifest)
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    _echo_config(cfg, out_dir)

    cache = precompute_query_context(params)
    COUNTER.reset()
    started = time.perf_counter()
    index = embed_records(records, dataset, params, cache=cache)
    elapsed = time.perf_counter() - started
    name = args.name or f"descriptors_{args.role}.boqt"
    write_tensor_file(
        out_dir / name,
        {rid: index.matrix[i].astype(np.float32) for i, rid in enumerate(index.ids)},
        dtype="f32",
    )
    counts = COUNTER.snapshot()
    print(
        f"embedded {len(records)} records in {elapsed:.2f}s "
        f"(self-attention evals: {counts.get('self_attention', 0)}, "
        f"cross-attention evals: {counts.get('cross_attention', 0)}); "
        f"wrote {out_dir / name}"
    )
    return 0


def _index_from_file(path, manifest) -> DescriptorIndex:
    entries, _ = read_tensor_file(path)
    known = {r.id: r for r in manifest.records}
    missing = [rid for rid in entries if rid not in known]
    if missing:
        raise ManifestError(
            f"{path}: {len(missing)} descriptor ids not in manifest "
            f"(first: {missing[0]})"
        )
    ids = list(entries)
    matrix = np.stack([entries[rid].astype(np.float64) for rid in ids])
    positions = {rid: known[rid].gt for rid in ids}
    return DescriptorIndex(matrix=matrix, ids=ids, positions=positions)


def cmd_eval(args) -> int:
    cfg = _load_config(args)
    # Payload paths are not needed to score descriptors, only ids/positions.
    manifest = load_manifest(args.manifest, check_paths=False)
    q_index = _index_from_file(args.queries, manifest)
    r_index = _index_from_file(args.references, manifest)
    if args.ks:
        try:
            ks = tuple(sorted({int(k) for k in args.ks.split(",") if k.strip()}))
        except ValueError as e:
            raise ValidationError(f"bad --ks value: {e}") from e
        if not ks or ks[0] < 1:
            raise ValidationError(f"--ks must be positive integers, got '{args.ks}'")
    else:
        ks = cfg.eval_ks
    if args.threshold is not None:
        threshold = args.threshold
    elif manifest.gt_kind == "frame":
        threshold = float(cfg.frame_threshold)
    else:
        threshold = cfg.match_threshold_m
    gt = build_ground_truth(
        q_index.positions, r_index.positions, manifest.gt_kind, threshold
    )
    result = evaluate(q_index, r_index, gt, ks)

    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    _echo_config(cfg, out_dir)
    atomic_write_text(out_dir / "results.txt", format_results(result, ks))
    figures.save_recall_figure(result.recalls, out_dir / "recall.png")
    for k in ks:
        print(f"recall@{k}={result.recalls[k]:.4f}")
    print(
        f"evaluated {result.evaluated_queries} queries "
        f"({result.empty_gt_queries} with empty ground truth excluded)"
    )
    return 0


def cmd_attn(args) -> int:
    cfg = _load_config(args)
    params = load_checkpoint(args.checkpoint)
    image = Tensor(load_image(args.image))
    query_indices = [int(q) for q in args.queries.split(",") if q.strip()]
    if not query_indices:
        raise ValidationError("no query indices given")
    grids = export_attention(
        image, params, block_index=args.block, query_indices=query_indices
    )
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    _echo_config(cfg, out_dir)
    for qi, grid in zip(query_indices, grids):
        stem = f"attn_block{args.block}_q{qi}"
        rows = "\n".join(",".join(f"{v:.10e}" for v in row) for row in grid)
        atomic_write_text(out_dir / f"{stem}.csv", rows + "\n")
        save_pgm(out_dir / f"{stem}.pgm", grid)
    figures.save_attention_figure(
        grids, query_indices, args.block, out_dir / f"attention_block{args.block}.png"
    )
    print(f"exported {len(grids)} attention grids to {out_dir}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="boq",
        description="Learned-query descriptor aggregation: synthesize data, "
        "train, embed, evaluate, and export attention maps.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", type=Path, default=None, help="key=value config file")
        p.add_argument("--seed", type=int, default=None, help="override the config seed")
        p.add_argument("--out", type=Path, required=True, help="output directory")

    p = sub.add_parser("synth", help="generate a synthetic place dataset")
    common(p)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", help="train a model on a manifest")
    common(p)
    p.add_argument("--manifest", type=Path, required=True)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("embed", help="compute descriptors for manifest records")
    common(p)
    p.add_argument("--checkpoint", type=Path, required=True)
    p.add_argument("--manifest", type=Path, required=True)
    p.add_argument(
        "--role",
        choices=["query", "reference", "train", "all"],
        default="all",
        help="restrict to records with this role",
    )
    p.add_argument("--name", default=None, help="output file name")
    p.set_defaults(func=cmd_embed)

    p = sub.add_parser("eval", help="score query descriptors against references")
    common(p)
    p.add_argument("--queries", type=Path, required=True, help="query descriptor file")
    p.add_argument(
        "--references", type=Path, required=True, help="reference descriptor file"
    )
    p.add_argument("--manifest", type=Path, required=True)
    p.add_argument("--ks", default=None, help="comma-separated k values")
    p.add_argument(
        "--threshold",
        type=float,
        default=None,
        help="match threshold (meters, or frames for frame manifests)",
    )
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("attn", help="export cross-attention weight grids")
    common(p)
    p.add_argument("--checkpoint", type=Path, required=True)
    p.add_argument("--image", type=Path, required=True, help="input pixmap (P6)")
    p.add_argument("--block", type=int, default=0, help="aggregation block index")
    p.add_argument("--queries", default="0", help="comma-separated query indices")
    p.set_defaults(func=cmd_attn)

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (ValidationError, FileNotFoundError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    except BoqError as e:
        print(f"error: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
