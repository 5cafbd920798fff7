"""End-to-end styled-dataset production for one source/target dataset pair.

For each sampled (source, target) combination: bring both images to the
working size (the target through size matching), invert both while
recording attention tensors, then regenerate from the source's noise state
with the target's keys/values substituted and the scores scaled. The
decoded result is resized back to the source image's native dims, so the
untouched source mask stays pixel-aligned and its annotations remain valid.

Batches are journaled: every record appends one JSON line, completed
records are skipped on rerun, and one failed record never kills the batch.
"""

from __future__ import annotations

import json
import threading
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch

from .attention_control import (
    ROLE_KEY,
    ROLE_QUERY,
    ROLE_VALUE,
    AttentionCache,
    InjectionPlan,
    RecordingControl,
    run_with_injection,
    select_injection_layers,
)
from .diffusion import ddim_sample
from .errors import ConfigError, CytostyleError, StageError
from .imaging import Image, InstanceMask, load_image, load_mask, resize_to, save_image, save_mask
from .inversion import invert
from .score_scaling import AlphaEstimate
from .size_match import SizeRatio, prepare_target

__all__ = ["PairManifest", "StyledRecord", "StylizeJob", "stylize_pair", "generate_dataset"]

_MANIFEST_VERSION = 1
_JOURNAL_NAME = "records.jsonl"


@dataclass
class PairManifest:
    """Everything needed to produce one styled dataset, as a JSON file.

    The manifest is the single source of truth for a pair: the ratio and
    scaling-ratio commands enrich it in place, and the batch command reads
    everything from it (modulo explicit ablation overrides, which are
    recorded in the output journal rather than the manifest).
    """

    pair_id: str
    src_images: list[str]
    src_masks: list[str]
    tgt_images: list[str]
    detector_id: str = "naive:otsu"
    working_size: tuple[int, int] = (32, 32)
    n_combinations: int = 4000
    seed: int = 0
    use_size_match: bool = True
    alpha_mode: str = "adaptive"  # "adaptive" or "fixed:<value>"
    style_transfer: bool = True
    replay_source_queries: bool = False
    invert_size_ratio: bool = False
    n_inject_layers: int = 6
    alpha_sample_pairs: int = 8
    size_ratio: SizeRatio | None = None
    alpha_estimate: AlphaEstimate | None = None

    def __post_init__(self):
        self.working_size = (int(self.working_size[0]), int(self.working_size[1]))
        if self.n_combinations < 1:
            raise ConfigError(f"n_combinations must be >= 1, got {self.n_combinations}")
        if not self.src_images:
            raise ConfigError("manifest needs at least one source image")
        if len(self.src_images) != len(self.src_masks):
            raise ConfigError(
                f"src_images and src_masks must be index-aligned "
                f"({len(self.src_images)} vs {len(self.src_masks)})"
            )
        if not self.tgt_images:
            raise ConfigError("manifest needs at least one target image")
        self.fixed_alpha_value()  # validates alpha_mode syntax

    def fixed_alpha_value(self) -> float | None:
        if self.alpha_mode == "adaptive":
            return None
        if self.alpha_mode.startswith("fixed:"):
            try:
                value = float(self.alpha_mode.split(":", 1)[1])
            except ValueError:
                raise ConfigError(f"bad alpha_mode {self.alpha_mode!r}") from None
            if value <= 0:
                raise ConfigError(f"fixed alpha must be positive, got {value}")
            return value
        raise ConfigError(
            f"alpha_mode must be 'adaptive' or 'fixed:<value>', got {self.alpha_mode!r}"
        )

    def check_paths_exist(self) -> None:
        missing = [
            p
            for p in (*self.src_images, *self.src_masks, *self.tgt_images)
            if not Path(p).exists()
        ]
        if missing:
            raise ConfigError(f"{len(missing)} manifest path(s) missing, first: {missing[0]}")

    def to_dict(self) -> dict:
        d = {
            "format_version": _MANIFEST_VERSION,
            "pair_id": self.pair_id,
            "src_images": list(self.src_images),
            "src_masks": list(self.src_masks),
            "tgt_images": list(self.tgt_images),
            "detector_id": self.detector_id,
            "working_size": list(self.working_size),
            "n_combinations": self.n_combinations,
            "seed": self.seed,
            "use_size_match": self.use_size_match,
            "alpha_mode": self.alpha_mode,
            "style_transfer": self.style_transfer,
            "replay_source_queries": self.replay_source_queries,
            "invert_size_ratio": self.invert_size_ratio,
            "n_inject_layers": self.n_inject_layers,
            "alpha_sample_pairs": self.alpha_sample_pairs,
            "size_ratio": self.size_ratio.to_dict() if self.size_ratio else None,
            "alpha_estimate": self.alpha_estimate.to_dict() if self.alpha_estimate else None,
        }
        return d

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2) + "\n")

    @classmethod
    def load(cls, path) -> "PairManifest":
        p = Path(path)
        if not p.exists():
            raise ConfigError(f"no manifest at {p}")
        try:
            d = json.loads(p.read_text())
        except json.JSONDecodeError as exc:
            raise ConfigError(f"manifest {p} is not valid JSON: {exc}") from exc
        version = d.get("format_version")
        if version != _MANIFEST_VERSION:
            raise ConfigError(f"manifest version {version!r} unsupported (expected {_MANIFEST_VERSION})")
        try:
            return cls(
                pair_id=d["pair_id"],
                src_images=list(d["src_images"]),
                src_masks=list(d["src_masks"]),
                tgt_images=list(d["tgt_images"]),
                detector_id=d.get("detector_id", "naive:otsu"),
                working_size=tuple(d.get("working_size", (32, 32))),
                n_combinations=d.get("n_combinations", 4000),
                seed=d.get("seed", 0),
                use_size_match=d.get("use_size_match", True),
                alpha_mode=d.get("alpha_mode", "adaptive"),
                style_transfer=d.get("style_transfer", True),
                replay_source_queries=d.get("replay_source_queries", False),
                invert_size_ratio=d.get("invert_size_ratio", False),
                n_inject_layers=d.get("n_inject_layers", 6),
                alpha_sample_pairs=d.get("alpha_sample_pairs", 8),
                size_ratio=SizeRatio.from_dict(d["size_ratio"]) if d.get("size_ratio") else None,
                alpha_estimate=(
                    AlphaEstimate.from_dict(d["alpha_estimate"]) if d.get("alpha_estimate") else None
                ),
            )
        except KeyError as exc:
            raise ConfigError(f"manifest {p} is missing field {exc}") from exc


@dataclass
class StyledRecord:
    """One completed output: a styled image aligned with its source mask."""

    index: int
    src_index: int
    tgt_index: int
    styled_image_path: str
    source_mask_path: str
    alpha_used: float
    r_used: float
    seed: int


@dataclass
class StylizeJob:
    """Resolved per-run configuration derived from a manifest."""

    alpha: float
    r: float
    working_size: tuple[int, int]
    layers: list[str]
    replay_source_queries: bool = False
    style_transfer: bool = True
    seed: int = 0
    use_size_match: bool = True
    alpha_mode: str = "adaptive"


def resolve_job(manifest: PairManifest, backbone) -> StylizeJob:
    """Resolve alpha, the effective ratio, and the injection layers."""
    fixed = manifest.fixed_alpha_value()
    if fixed is not None:
        alpha = fixed
    else:
        if manifest.alpha_estimate is None:
            raise ConfigError(
                "manifest has no computed scaling ratio; run the alpha command "
                "or set alpha_mode=fixed:<value>"
            )
        alpha = manifest.alpha_estimate.alpha
    if manifest.use_size_match:
        if manifest.size_ratio is None:
            raise ConfigError(
                "manifest has no computed size ratio; run the ratio command "
                "or disable size matching"
            )
        r = manifest.size_ratio.r
        if manifest.invert_size_ratio:
            r = 1.0 / r
    else:
        r = 1.0
    n_layers = min(manifest.n_inject_layers, len(backbone.attention_layers))
    layers = select_injection_layers(backbone, n_layers)
    return StylizeJob(
        alpha=alpha,
        r=r,
        working_size=manifest.working_size,
        layers=layers,
        replay_source_queries=manifest.replay_source_queries,
        style_transfer=manifest.style_transfer,
        seed=manifest.seed,
        use_size_match=manifest.use_size_match,
        alpha_mode=manifest.alpha_mode,
    )


def _stage(name: str, fn):
    try:
        return fn()
    except CytostyleError as exc:
        raise StageError(name, exc) from exc
    except Exception as exc:  # noqa: BLE001 - per-record isolation needs the stage name
        raise StageError(name, exc) from exc


def _invert_and_record(backbone, image: Image, roles, layers):
    """Invert an image, then replay its reconstruction recording attention.

    The recording pass visits exactly the states a generation pass from the
    same noise state visits, so cached tensors at timestep t come from the
    state an injected generation sees at its own step t. With the image as
    its own appearance source this makes injection a bit-exact no-op, which
    is the identity the pipeline's self-transfer contract relies on.
    """
    result = invert(backbone, image, sched=backbone.schedule)
    cache = AttentionCache()
    control = RecordingControl(cache, roles, layers)
    with torch.no_grad():
        ddim_sample(backbone, result.z_final, backbone.schedule, control=control)
    return result.z_final, cache


def stylize_pair(
    backbone, x_src: Image, x_tgt: Image, m_src: InstanceMask, job: StylizeJob
) -> Image:
    """Generate one styled image carrying the target's appearance on the
    source's geometry.

    x_tgt must already be size-matched (prepare_target). The output has the
    source mask's dims. Deterministic given its inputs; every stage failure
    raises StageError with the stage name.
    """
    sched = backbone.schedule
    if m_src.shape != (x_src.height, x_src.width):
        raise StageError("validate", ConfigError(
            f"source mask {m_src.shape} does not match image "
            f"{(x_src.height, x_src.width)}"
        ))
    src_small = _stage("resize-source", lambda: resize_to(x_src, job.working_size, "bilinear"))
    z_src, src_cache = _stage(
        "invert-source",
        lambda: _invert_and_record(backbone, src_small, (ROLE_QUERY,), job.layers),
    )
    _, tgt_cache = _stage(
        "invert-target",
        lambda: _invert_and_record(backbone, x_tgt, (ROLE_KEY, ROLE_VALUE), job.layers),
    )
    plan = InjectionPlan(
        layers=tuple(job.layers),
        alpha=job.alpha,
        source_cache=src_cache,
        target_cache=tgt_cache,
        replay_source_queries=job.replay_source_queries,
    )
    styled_state = _stage(
        "generate", lambda: run_with_injection(backbone, z_src, plan, sched)
    )
    styled = _stage("decode", lambda: backbone.decode(styled_state))
    return _stage(
        "restore-geometry", lambda: resize_to(styled, m_src.shape, "bilinear")
    )


def _read_journal(path: Path) -> dict[int, dict]:
    entries: dict[int, dict] = {}
    if path.exists():
        for line in path.read_text().splitlines():
            line = line.strip()
            if not line:
                continue
            entry = json.loads(line)
            entries[int(entry["index"])] = entry  # last line wins
    return entries


def generate_dataset(
    manifest: PairManifest, backbone, out_root, workers: int = 1
) -> list[StyledRecord]:
    """Produce the manifest's combinations under out_root/pair_<id>/.

    Sampling is seeded by the manifest: source indices cycle so every
    source (and its annotations) appears near-uniformly, target indices are
    drawn uniformly with replacement. Records whose journal entry and files
    already exist are skipped, so reruns only fill gaps. A failing record
    is journaled with its stage and error; the batch continues.
    """
    manifest.check_paths_exist()
    job = resolve_job(manifest, backbone)

    pair_dir = Path(out_root) / f"pair_{manifest.pair_id}"
    images_dir = pair_dir / "images"
    masks_dir = pair_dir / "masks"
    images_dir.mkdir(parents=True, exist_ok=True)
    masks_dir.mkdir(parents=True, exist_ok=True)
    journal_path = pair_dir / _JOURNAL_NAME

    rng = np.random.default_rng(manifest.seed)
    n_src = len(manifest.src_images)
    n_tgt = len(manifest.tgt_images)
    combos = [
        (k, k % n_src, int(rng.integers(0, n_tgt))) for k in range(manifest.n_combinations)
    ]

    done = _read_journal(journal_path)
    src_cache: dict[int, tuple[Image, InstanceMask]] = {}
    tgt_cache: dict[int, Image] = {}
    load_lock = threading.Lock()
    journal_lock = threading.Lock()

    def get_src(i: int) -> tuple[Image, InstanceMask]:
        with load_lock:
            if i not in src_cache:
                src_cache[i] = (
                    load_image(manifest.src_images[i]),
                    load_mask(manifest.src_masks[i]),
                )
            return src_cache[i]

    def get_tgt(j: int) -> Image:
        with load_lock:
            if j not in tgt_cache:
                tgt_cache[j] = prepare_target(
                    load_image(manifest.tgt_images[j]), job.r, job.working_size
                )
            return tgt_cache[j]

    def append_journal(entry: dict) -> None:
        with journal_lock:
            with journal_path.open("a") as fh:
                fh.write(json.dumps(entry) + "\n")
                fh.flush()

    flags = {
        "use_size_match": job.use_size_match,
        "alpha_mode": job.alpha_mode,
        "style_transfer": job.style_transfer,
        "replay_source_queries": job.replay_source_queries,
    }

    def run_record(combo) -> StyledRecord | None:
        k, i, j = combo
        image_path = images_dir / f"{k:05d}.tif"
        mask_path = masks_dir / f"{k:05d}.tif"
        prior = done.get(k)
        if prior and prior.get("status") == "ok" and image_path.exists() and mask_path.exists():
            return StyledRecord(
                index=k,
                src_index=prior["src_index"],
                tgt_index=prior["tgt_index"],
                styled_image_path=str(image_path),
                source_mask_path=str(mask_path),
                alpha_used=prior["alpha_used"],
                r_used=prior["r_used"],
                seed=prior["seed"],
            )
        try:
            x_src, m_src = get_src(i)
            if job.style_transfer:
                x_tgt = get_tgt(j)
                styled = stylize_pair(backbone, x_src, x_tgt, m_src, job)
            else:
                # Size-matching-only baseline: the source image passes through
                # untouched, keeping it trivially aligned with its mask.
                styled = Image(x_src.pixels.copy())
            save_image(styled, image_path, bit_depth=16 if styled.channels == 1 else 8)
            save_mask(m_src, mask_path)
        except StageError as exc:
            append_journal(
                {"index": k, "src_index": i, "tgt_index": j, "status": "failed",
                 "stage": exc.stage, "error": str(exc.cause), **flags}
            )
            return None
        except CytostyleError as exc:
            append_journal(
                {"index": k, "src_index": i, "tgt_index": j, "status": "failed",
                 "stage": "io", "error": str(exc), **flags}
            )
            return None
        record = StyledRecord(
            index=k,
            src_index=i,
            tgt_index=j,
            styled_image_path=str(image_path),
            source_mask_path=str(mask_path),
            alpha_used=job.alpha,
            r_used=job.r,
            seed=manifest.seed,
        )
        append_journal({**asdict(record), "status": "ok", **flags})
        return record

    if workers <= 1:
        results = [run_record(c) for c in combos]
    else:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(run_record, combos))
    return [r for r in results if r is not None]
