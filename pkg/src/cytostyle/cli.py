"""Batch-oriented command line for the pipeline.

One manifest file per dataset pair is the single source of truth: `ratio`
and `alpha` enrich it in place, `stylize` reads it (plus explicit ablation
overrides, which land in the output journal, not the manifest). Exit codes:
0 success, 2 configuration problem, 3 compute failure.
"""

from __future__ import annotations

import argparse
import os
import sys
from pathlib import Path

from .errors import ConfigError, CytostyleError
from .imaging import load_image, load_mask, resize_to
from .metrics import PenaltyWeights, evaluate_dataset
from .score_scaling import compute_alpha
from .size_match import compute_size_ratio, detector_from_id, prepare_target
from .stylize import PairManifest, generate_dataset
from .toy_backbone import ToyBackbone, ToyTrainConfig, train_toy_backbone

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_COMPUTE = 3

_OUT_ROOT_ENV = "CYTOSTYLE_OUTPUT_ROOT"


def _summary_line(pair_id: str, r, alpha) -> str:
    r_txt = f"{r:.1f}" if r is not None else "n/a"
    a_txt = f"{alpha:.1f}" if alpha is not None else "n/a"
    return f"pair={pair_id} r={r_txt} alpha={a_txt}"


def _add_manifest_arg(p: argparse.ArgumentParser) -> None:
    p.add_argument("--manifest", required=True, help="pair manifest JSON file")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="cytostyle")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("make-demo-data", help="write a synthetic source/target pair + manifest")
    p.add_argument("--out", required=True)
    p.add_argument("--size", type=int, default=32)
    p.add_argument("--n-src", type=int, default=24)
    p.add_argument("--n-tgt", type=int, default=24)
    p.add_argument("--n-combinations", type=int, default=50)
    p.add_argument("--seed", type=int, default=0)

    p = sub.add_parser("train-toy", help="train the small pixel-space backbone")
    p.add_argument("--data", required=True, help="directory of training images")
    p.add_argument("--backbone", required=True, help="checkpoint output path")
    p.add_argument("--image-size", type=int, default=32)
    p.add_argument("--epochs", type=int, default=200)
    p.add_argument("--batch-size", type=int, default=16)
    p.add_argument("--lr", type=float, default=2e-3)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--base-channels", type=int, default=24)
    p.add_argument("--timesteps", type=int, default=1000)
    p.add_argument("--ddim-steps", type=int, default=50)

    p = sub.add_parser("ratio", help="compute the cell size ratio into the manifest")
    _add_manifest_arg(p)

    p = sub.add_parser("alpha", help="compute the score scaling ratio into the manifest")
    _add_manifest_arg(p)
    p.add_argument("--backbone", required=True)
    p.add_argument("--pairs", type=int, default=None, help="override sampled pair count")
    p.add_argument("--seed", type=int, default=None)

    p = sub.add_parser("stylize", help="generate the styled dataset")
    _add_manifest_arg(p)
    p.add_argument("--backbone", required=True)
    p.add_argument("--out", default=None, help=f"output root (default ${_OUT_ROOT_ENV})")
    p.add_argument("--workers", type=int, default=1)
    p.add_argument("--seed", type=int, default=None, help="override the manifest seed")
    p.add_argument("--alpha-mode", default=None, help="adaptive or fixed:<value>")
    p.add_argument("--no-size-match", action="store_true")
    p.add_argument("--no-style-transfer", action="store_true")
    p.add_argument("--replay-source-queries", action="store_true")

    p = sub.add_parser("evaluate", help="score predicted masks against ground truth")
    p.add_argument("--gt", required=True)
    p.add_argument("--pred", required=True)
    p.add_argument("--weights", default=None, help="w_split,w_fn,w_fp (default 5,10,1)")
    p.add_argument("--out", default=None, help="write report files with this prefix")

    return parser


def cmd_make_demo_data(args) -> int:
    from .synth import write_demo_pair

    paths = write_demo_pair(
        args.out, size=args.size, n_src=args.n_src, n_tgt=args.n_tgt, seed=args.seed
    )
    manifest = PairManifest(
        pair_id="demo",
        src_images=paths["src_images"],
        src_masks=paths["src_masks"],
        tgt_images=paths["tgt_images"],
        working_size=(args.size, args.size),
        n_combinations=args.n_combinations,
        seed=args.seed,
    )
    manifest_path = Path(args.out) / "manifest.json"
    manifest.save(manifest_path)
    print(f"wrote {len(paths['src_images'])} source and {len(paths['tgt_images'])} "
          f"target images; manifest at {manifest_path}")
    return EXIT_OK


def cmd_train_toy(args) -> int:
    data_dir = Path(args.data)
    if not data_dir.is_dir():
        raise ConfigError(f"not a directory: {data_dir}")
    files = sorted(
        p for p in data_dir.iterdir() if p.suffix.lower() in (".png", ".tif", ".tiff")
    )
    if not files:
        raise ConfigError(f"empty dataset: no images in {data_dir}")
    dataset = [load_image(p) for p in files]
    cfg = ToyTrainConfig(
        image_size=args.image_size,
        epochs=args.epochs,
        batch_size=args.batch_size,
        lr=args.lr,
        seed=args.seed,
        base_channels=args.base_channels,
        t_train=args.timesteps,
        ddim_steps=args.ddim_steps,
    )
    backbone = train_toy_backbone(dataset, cfg)
    for epoch, loss in enumerate(backbone.train_log):
        print(f"epoch {epoch}: loss={loss:.5f}")
    backbone.save(args.backbone)
    print(f"checkpoint written to {args.backbone}")
    return EXIT_OK


def cmd_ratio(args) -> int:
    manifest = PairManifest.load(args.manifest)
    manifest.check_paths_exist()
    detector = detector_from_id(manifest.detector_id)
    src_masks = [load_mask(p) for p in manifest.src_masks]
    tgt_masks = [detector(load_image(p)) for p in manifest.tgt_images]
    manifest.size_ratio = compute_size_ratio(src_masks, tgt_masks)
    manifest.save(args.manifest)
    alpha = manifest.alpha_estimate.alpha if manifest.alpha_estimate else None
    print(_summary_line(manifest.pair_id, manifest.size_ratio.r, alpha))
    return EXIT_OK


def cmd_alpha(args) -> int:
    manifest = PairManifest.load(args.manifest)
    manifest.check_paths_exist()
    backbone = ToyBackbone.load(args.backbone)
    if manifest.use_size_match:
        if manifest.size_ratio is None:
            raise ConfigError("run the ratio command first (or set use_size_match=false)")
        r = manifest.size_ratio.r
        if manifest.invert_size_ratio:
            r = 1.0 / r
    else:
        r = 1.0
    ws = manifest.working_size
    src_samples = [resize_to(load_image(p), ws, "bilinear") for p in manifest.src_images]
    tgt_samples = [prepare_target(load_image(p), r, ws) for p in manifest.tgt_images]
    n_layers = min(manifest.n_inject_layers, len(backbone.attention_layers))
    from .attention_control import select_injection_layers

    layers = select_injection_layers(backbone, n_layers)
    manifest.alpha_estimate = compute_alpha(
        backbone,
        src_samples,
        tgt_samples,
        backbone.schedule,
        layers,
        n_pairs=args.pairs if args.pairs is not None else manifest.alpha_sample_pairs,
        seed=args.seed if args.seed is not None else manifest.seed,
    )
    manifest.save(args.manifest)
    r_txt = manifest.size_ratio.r if manifest.size_ratio else (None if manifest.use_size_match else 1.0)
    print(_summary_line(manifest.pair_id, r_txt, manifest.alpha_estimate.alpha))
    return EXIT_OK


def cmd_stylize(args) -> int:
    manifest = PairManifest.load(args.manifest)
    out_root = args.out or os.environ.get(_OUT_ROOT_ENV)
    if not out_root:
        raise ConfigError(f"no output root: pass --out or set ${_OUT_ROOT_ENV}")
    backbone = ToyBackbone.load(args.backbone)
    if args.seed is not None:
        manifest.seed = args.seed
    if args.alpha_mode is not None:
        manifest.alpha_mode = args.alpha_mode
        manifest.fixed_alpha_value()
    if args.no_size_match:
        manifest.use_size_match = False
    if args.no_style_transfer:
        manifest.style_transfer = False
    if args.replay_source_queries:
        manifest.replay_source_queries = True
    records = generate_dataset(manifest, backbone, out_root, workers=args.workers)
    n_failed = manifest.n_combinations - len(records)
    print(
        f"pair={manifest.pair_id} records={len(records)} failed={n_failed} "
        f"out={Path(out_root) / f'pair_{manifest.pair_id}'}"
    )
    if n_failed:
        print(f"warning: {n_failed} record(s) failed; see the journal for stages")
    return EXIT_OK


def cmd_evaluate(args) -> int:
    if args.weights is not None:
        parts = args.weights.split(",")
        if len(parts) != 3:
            raise ConfigError(f"--weights needs w_split,w_fn,w_fp, got {args.weights!r}")
        weights = PenaltyWeights(*(float(x) for x in parts))
    else:
        weights = PenaltyWeights()
    report = evaluate_dataset(args.gt, args.pred, weights)
    if report.excluded_frames:
        print(f"warning: excluded {len(report.excluded_frames)} unmatched frame(s)")
    print(report.summary_line())
    if args.out:
        Path(args.out + ".txt").write_text(report.to_text() + "\n")
        Path(args.out + ".tsv").write_text(report.to_tsv() + "\n")
        print(f"report written to {args.out}.txt and {args.out}.tsv")
    return EXIT_OK


_COMMANDS = {
    "make-demo-data": cmd_make_demo_data,
    "train-toy": cmd_train_toy,
    "ratio": cmd_ratio,
    "alpha": cmd_alpha,
    "stylize": cmd_stylize,
    "evaluate": cmd_evaluate,
}


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return _COMMANDS[args.command](args)
    except (ConfigError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except CytostyleError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_COMPUTE


def entrypoint() -> None:
    sys.exit(main())


if __name__ == "__main__":
    entrypoint()
