"""Command-line entry points.

Subcommands: gen-data, extract-geo, gen-embeddings, train, evaluate, infer,
plot, config-dump. Every command accepts --config FILE plus repeatable
--set section.key=value overrides (flags > file > defaults). Success exits 0;
any failure prints a single line "error: <category>: <message>" on stderr and
exits nonzero.
"""

from __future__ import annotations

import argparse
import importlib.resources
import json
import sys
from pathlib import Path

import numpy as np
import torch
from PIL import Image, UnidentifiedImageError

from .checkpoint import CheckpointError, load_checkpoint
from .config import ConfigError, RunConfig, dump_ini, load_run_config
from .consensus import ConsensusConfig, aggregate_views
from .data import (
    EMBEDDING_EXTENSION,
    IMAGE_EXTENSIONS,
    MissingPairError,
    SyntheticDataset,
    load_folder_dataset,
    save_dataset,
)
from .geometry import extract_geometry, read_mask_image, write_mask_image
from .model import SegmentationModel, build_model
from .semantics import (
    TEXT_EMBED_DIM,
    HttpMllmClient,
    MockTextEncoder,
    ReportSchemaError,
    TransportError,
    encode_report,
    load_prompt_template,
    make_visual_triplet,
    mllm_generate,
    parse_report,
    write_embedding,
)
from .training import (
    INFERENCE_MODES,
    TrainingDivergedError,
    batched_view_predictions,
    evaluate,
    fit,
)

__all__ = ["main"]


class CliError(Exception):
    """Command failure with a machine-readable category."""

    def __init__(self, category: str, message: str):
        super().__init__(message)
        self.category = category
        self.message = message


class _Parser(argparse.ArgumentParser):
    # argparse prints usage + message on two lines; fold into the single-line
    # error protocol instead
    def error(self, message):
        raise CliError("usage", message)


def _fail(category: str, message: str) -> CliError:
    return CliError(category, str(message))


def _load_config(args) -> RunConfig:
    return load_run_config(args.config, args.set or [])


def _read_image_file(path: Path) -> np.ndarray:
    """Grayscale image as float32 in [0, 1]; raises CliError on non-images."""
    try:
        with Image.open(path) as im:
            return np.asarray(im.convert("L"), dtype=np.float32) / 255.0
    except UnidentifiedImageError:
        raise _fail("data", f"'{path}' is not a readable image") from None


def _dataset_root(root: Path):
    root = Path(root)
    if not root.is_dir():
        raise _fail("data", f"dataset root '{root}' does not exist")
    embeddings = root / "embeddings"
    manifest = root / "manifest.jsonl"
    return load_folder_dataset(
        root / "images",
        root / "masks",
        embeddings if embeddings.is_dir() else None,
        manifest if manifest.is_file() else None,
    )


def _dataset_or_synthetic(cfg: RunConfig, split: str):
    """Folder dataset when the dir is configured, otherwise synthetic.

    Synthetic train/val splits use disjoint seed streams (seed, seed + 1) so
    a sample index never repeats across them.
    """
    root = cfg.data.train_dir if split == "train" else cfg.data.val_dir
    if root:
        return _dataset_root(Path(root))
    s = cfg.synth
    n = s.n_train if split == "train" else s.n_val
    seed = s.seed if split == "train" else s.seed + 1
    return SyntheticDataset(n, size=s.size, seed=seed, with_semantics=s.with_semantics)


def _build_from_checkpoint(cfg: RunConfig, checkpoint) -> SegmentationModel:
    path = Path(checkpoint) if checkpoint else cfg.resolved_checkpoint()
    if not path.is_file():
        raise _fail("io", f"checkpoint '{path}' does not exist")
    model = build_model(cfg.model, seed=cfg.train.seed)
    load_checkpoint(model, path)
    model.eval()
    return model


# --------------------------------------------------------------------------
# subcommands


def _cmd_gen_data(args) -> int:
    cfg = _load_config(args)
    out = Path(args.out)
    if out.exists() and any(out.iterdir()) and not args.force:
        raise _fail("io", f"output directory '{out}' is not empty (use --force)")
    n = args.n if args.n is not None else cfg.synth.n_train
    if n < 0:
        raise _fail("config", "--n must be >= 0")
    dataset = SyntheticDataset(
        n,
        size=cfg.synth.size,
        seed=cfg.synth.seed,
        with_semantics=cfg.synth.with_semantics,
    )
    save_dataset(dataset, out)
    print(f"wrote {n} samples to {out}")
    return 0


def _cmd_extract_geo(args) -> int:
    masks_dir = Path(args.masks)
    if not masks_dir.is_dir():
        raise _fail("data", f"masks directory '{masks_dir}' does not exist")
    records = []
    for path in sorted(masks_dir.iterdir()):
        if not path.is_file():
            continue
        if path.suffix.lower() not in IMAGE_EXTENSIONS:
            print(f"warning: skipped {path.name}: not a mask image", file=sys.stderr)
            continue
        try:
            mask = read_mask_image(path)
        except UnidentifiedImageError:
            print(f"warning: skipped {path.name}: unreadable image", file=sys.stderr)
            continue
        desc = extract_geometry(mask)
        records.append({"file": path.name, **desc.to_json_dict()})
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    with open(out, "w", encoding="utf-8") as fh:
        for rec in records:
            fh.write(json.dumps(rec) + "\n")
    print(f"wrote {len(records)} records to {out}")
    return 0


def _slots_for_synthetic() -> dict[str, str]:
    pkg = importlib.resources.files("tokenseg")
    raw = (pkg / "prompts" / "synthetic_shapes.json").read_text(encoding="utf-8")
    return json.loads(raw)


def _cmd_gen_embeddings(args) -> int:
    cfg = _load_config(args)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    encoder = MockTextEncoder(TEXT_EMBED_DIM)

    if args.mllm:
        # config must be complete before we touch the network
        if not cfg.mllm.endpoint:
            raise _fail("config", "--mllm requires [mllm] endpoint to be set")
        if not args.images or not args.masks:
            raise _fail("config", "--mllm requires --images and --masks directories")
        images = Path(args.images)
        masks = Path(args.masks)
        pkg = importlib.resources.files("tokenseg")
        with importlib.resources.as_file(pkg / "prompts" / "report_prompt.txt") as p:
            prompt = load_prompt_template(p, _slots_for_synthetic())
        client = HttpMllmClient(cfg.mllm)
        n = 0
        for path in sorted(images.iterdir()):
            if path.suffix.lower() not in IMAGE_EXTENSIONS:
                continue
            mask_path = masks / path.name
            if not mask_path.is_file():
                raise _fail("data", f"no mask found for image '{path.name}'")
            triplet = make_visual_triplet(
                _read_image_file(path), read_mask_image(mask_path)
            )
            report = mllm_generate(
                triplet, prompt, client, max_retries=cfg.mllm.max_retries
            )
            write_embedding(
                out / f"{path.stem}{EMBEDDING_EXTENSION}",
                encode_report(report, encoder),
            )
            n += 1
        print(f"wrote {n} embeddings to {out}")
        return 0

    reports_dir = Path(args.reports)
    if not reports_dir.is_dir():
        raise _fail("data", f"reports directory '{reports_dir}' does not exist")
    n = 0
    for path in sorted(reports_dir.iterdir()):
        if path.suffix.lower() != ".json":
            continue
        try:
            obj = json.loads(path.read_text(encoding="utf-8"))
        except json.JSONDecodeError as e:
            raise _fail("data", f"malformed report JSON in '{path.name}': {e}") from None
        try:
            report = parse_report(obj)
        except ReportSchemaError as e:
            raise _fail("data", f"invalid report '{path.name}': {e}") from None
        write_embedding(
            out / f"{path.stem}{EMBEDDING_EXTENSION}", encode_report(report, encoder)
        )
        n += 1
    print(f"wrote {n} embeddings to {out}")
    return 0


def _cmd_train(args) -> int:
    cfg = _load_config(args)
    out = Path(args.out) if args.out else Path(cfg.data.out_dir)
    cfg.data.out_dir = str(out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.ini").write_text(dump_ini(cfg), encoding="utf-8")
    train_set = _dataset_or_synthetic(cfg, "train")
    val_set = _dataset_or_synthetic(cfg, "val")
    model = build_model(cfg.model, seed=cfg.train.seed)
    result = fit(model, train_set, val_set, cfg.train, out_dir=out,
                 augment_config=cfg.augment)
    print(
        f"trained steps={result.steps_run} best_val_dice={result.best_val_dice:.4f} "
        f"best_epoch={result.best_epoch} out={out}"
    )
    return 0


def _cmd_evaluate(args) -> int:
    cfg = _load_config(args)
    mode = args.inference or cfg.train.inference
    if mode not in INFERENCE_MODES:
        raise _fail("config", f"inference must be one of {INFERENCE_MODES}, got '{mode}'")
    if args.data:
        dataset = _dataset_root(Path(args.data))
    else:
        dataset = _dataset_or_synthetic(cfg, "val")
    model = _build_from_checkpoint(cfg, args.checkpoint)
    report = evaluate(
        model, dataset, inference=mode, consensus_config=cfg.consensus,
        batch_size=cfg.train.batch_size,
    )
    payload = {
        "inference": mode,
        "n": len(dataset),
        "dice": report.mean_dice,
        "per_modality": {str(k): v for k, v in report.per_modality.items()},
        **report.losses(),
    }
    print(json.dumps(payload))
    return 0


def _consensus_for_mode(cfg: RunConfig, mode: str) -> ConsensusConfig:
    if mode == "tta":
        return ConsensusConfig(
            lam=0.0, fp_area_eps=0.0,
            binarize_threshold=cfg.consensus.binarize_threshold,
        )
    return cfg.consensus


def _cmd_infer(args) -> int:
    cfg = _load_config(args)
    mode = args.inference or cfg.train.inference
    if mode not in INFERENCE_MODES:
        raise _fail("config", f"inference must be one of {INFERENCE_MODES}, got '{mode}'")

    paths: list[Path] = [Path(p) for p in args.image or []]
    if args.images:
        folder = Path(args.images)
        if not folder.is_dir():
            raise _fail("data", f"images directory '{folder}' does not exist")
        paths.extend(
            p for p in sorted(folder.iterdir())
            if p.suffix.lower() in IMAGE_EXTENSIONS
        )
    if not paths:
        raise _fail("config", "nothing to do: pass --image FILE and/or --images DIR")
    for p in paths:
        if not p.is_file():
            raise _fail("io", f"image '{p}' does not exist")

    model = _build_from_checkpoint(cfg, args.checkpoint)
    if mode == "geometry_aware" and not model.config.use_geo_tokens:
        raise _fail("config", "geometry-aware inference requires geometry tokens")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)

    for path in paths:
        image = _read_image_file(path)
        if mode == "none":
            x = torch.from_numpy(image).unsqueeze(0).unsqueeze(0)
            with torch.no_grad():
                mask = model(x).binary_mask()[0].numpy()
        else:
            ccfg = _consensus_for_mode(cfg, mode)
            views = batched_view_predictions(model, image.astype(np.float64))
            final, diag = aggregate_views(views, ccfg)
            mask = (final >= ccfg.binarize_threshold).astype(np.uint8)
            diag_path = out / f"{path.stem}_consensus.json"
            diag_path.write_text(json.dumps(diag, indent=2) + "\n", encoding="utf-8")
        mask_path = out / f"{path.stem}_mask.png"
        write_mask_image(mask_path, mask)
        print(f"wrote {mask_path}")
    return 0


def _cmd_plot(args) -> int:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    log_path = Path(args.log)
    if not log_path.is_file():
        raise _fail("io", f"metrics log '{log_path}' does not exist")
    rows = []
    with open(log_path, encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if line:
                rows.append(json.loads(line))
    if not rows:
        raise _fail("data", f"metrics log '{log_path}' is empty")

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    splits: dict[str, list[dict]] = {}
    for row in rows:
        splits.setdefault(str(row["split"]), []).append(row)

    fig, ax = plt.subplots(figsize=(6, 4))
    for split, entries in sorted(splits.items()):
        xs = [e["epoch"] for e in entries]
        ys = [e["dice"] for e in entries]
        marker = "o" if len(entries) == 1 else None
        ax.plot(xs, ys, label=split, marker=marker)
    ax.set_xlabel("epoch")
    ax.set_ylabel("dice")
    ax.set_ylim(0.0, 1.05)
    ax.legend()
    fig.tight_layout()
    dice_path = out / "dice.png"
    fig.savefig(dice_path)
    plt.close(fig)

    fig, ax = plt.subplots(figsize=(6, 4))
    for split, entries in sorted(splits.items()):
        xs = [e["epoch"] for e in entries]
        for key in ("l_seg", "l_geo", "l_sem"):
            ax.plot(xs, [e[key] for e in entries], label=f"{split}:{key}")
    ax.set_xlabel("epoch")
    ax.set_ylabel("loss")
    ax.legend(fontsize=7)
    fig.tight_layout()
    loss_path = out / "loss.png"
    fig.savefig(loss_path)
    plt.close(fig)

    print(f"wrote {dice_path} and {loss_path}")
    return 0


def _cmd_config_dump(args) -> int:
    cfg = _load_config(args)
    sys.stdout.write(dump_ini(cfg))
    return 0


# --------------------------------------------------------------------------
# parser wiring


def _build_parser() -> _Parser:
    common = _Parser(add_help=False)
    common.add_argument("--config", metavar="FILE", help="INI run configuration")
    common.add_argument(
        "--set",
        action="append",
        metavar="SECTION.KEY=VALUE",
        help="override one config value (repeatable)",
    )

    parser = _Parser(prog="tokenseg", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("gen-data", parents=[common],
                       help="write a synthetic dataset folder")
    p.add_argument("--out", required=True, help="output dataset root")
    p.add_argument("--n", type=int, default=None,
                   help="sample count (default: synth.n_train)")
    p.add_argument("--seed", type=int, default=None, help="alias for synth.seed")
    p.add_argument("--force", action="store_true",
                   help="allow writing into a non-empty directory")
    p.set_defaults(func=_cmd_gen_data)

    p = sub.add_parser("extract-geo", parents=[common],
                       help="geometry descriptors for a folder of masks")
    p.add_argument("--masks", required=True, help="directory of mask images")
    p.add_argument("--out", required=True, help="output JSONL file")
    p.set_defaults(func=_cmd_extract_geo)

    p = sub.add_parser("gen-embeddings", parents=[common],
                       help="encode report JSON files (or query a hosted model)")
    p.add_argument("--reports", help="directory of report JSON files")
    p.add_argument("--mllm", action="store_true",
                   help="generate reports with the configured [mllm] endpoint")
    p.add_argument("--images", help="image directory (with --mllm)")
    p.add_argument("--masks", help="mask directory (with --mllm)")
    p.add_argument("--out", required=True, help="output embedding directory")
    p.set_defaults(func=_cmd_gen_embeddings)

    p = sub.add_parser("train", parents=[common], help="train a model")
    p.add_argument("--out", help="run directory (default: data.out_dir)")
    p.set_defaults(func=_cmd_train)

    p = sub.add_parser("evaluate", parents=[common],
                       help="dice + losses for a checkpoint on a dataset")
    p.add_argument("--checkpoint", help="checkpoint path (default: data.checkpoint)")
    p.add_argument("--data", help="dataset root (default: data.val_dir or synthetic)")
    p.add_argument("--inference", choices=INFERENCE_MODES,
                   help="override train.inference")
    p.set_defaults(func=_cmd_evaluate)

    p = sub.add_parser("infer", parents=[common],
                       help="predict masks (and consensus diagnostics) for images")
    p.add_argument("--checkpoint", help="checkpoint path (default: data.checkpoint)")
    p.add_argument("--image", action="append", metavar="FILE",
                   help="input image (repeatable)")
    p.add_argument("--images", metavar="DIR", help="directory of input images")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--inference", choices=INFERENCE_MODES,
                   help="override train.inference")
    p.set_defaults(func=_cmd_infer)

    p = sub.add_parser("plot", parents=[common],
                       help="render dice/loss curves from a metrics log")
    p.add_argument("--log", required=True, help="metrics JSONL file")
    p.add_argument("--out", required=True, help="output image directory")
    p.set_defaults(func=_cmd_plot)

    p = sub.add_parser("config-dump", parents=[common],
                       help="print the fully-resolved configuration")
    p.set_defaults(func=_cmd_config_dump)
    return parser


_ERROR_CATEGORIES: tuple[tuple[type, str], ...] = (
    (ConfigError, "config"),
    (MissingPairError, "data"),
    (ReportSchemaError, "data"),
    (CheckpointError, "data"),
    (TransportError, "network"),
    (TrainingDivergedError, "runtime"),
    (FileNotFoundError, "io"),
    (NotADirectoryError, "io"),
    (IsADirectoryError, "io"),
    (PermissionError, "io"),
    (OSError, "io"),
    (ValueError, "runtime"),
)


def _one_line(message: str) -> str:
    return " ".join(str(message).split()) or "unknown failure"


def main(argv=None) -> int:
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
        if getattr(args, "seed", None) is not None:
            args.set = (args.set or []) + [f"synth.seed={args.seed}"]
        if getattr(args, "command", "") == "gen-embeddings":
            if not args.mllm and not args.reports:
                raise _fail("usage", "pass either --reports DIR or --mllm")
        return args.func(args)
    except CliError as e:
        print(f"error: {e.category}: {_one_line(e.message)}", file=sys.stderr)
        return 1
    except tuple(t for t, _ in _ERROR_CATEGORIES) as e:
        for etype, category in _ERROR_CATEGORIES:
            if isinstance(e, etype):
                print(f"error: {category}: {_one_line(e)}", file=sys.stderr)
                return 1
        raise AssertionError("unreachable")


if __name__ == "__main__":
    sys.exit(main())
