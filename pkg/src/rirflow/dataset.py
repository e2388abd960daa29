"""Synthetic RIR dataset construction with JSON-lines manifests.

Rooms are drawn uniformly from configured ranges, rendered with the
image-source simulator, measured with the Schroeder RT60 estimator, bucketed
by decay time, captioned with structured acoustic fields, and paired with
synthesized natural-language prompts. Per-entry seeds are derived from the
dataset seed and the entry index, so parallel and serial builds produce
identical manifests.
"""

from __future__ import annotations

import json
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .acoustics import RoomSpec, estimate_rt60, image_source_rir, sabine_rt60, suggest_max_order
from .audio import AudioBuffer, write_wav
from .prompts import synthesize_prompts
from .text import RT60_BUCKETS, StructuredCaption

BUCKET_THRESHOLDS = (0.4, 1.0)
BUCKET_TARGETS = {"short": 0.2, "medium": 0.7, "long": 1.8}

_SPACE_TYPES = {
    "short": ["vocal booth", "padded studio booth", "small treated bedroom",
              "dry control room", "closet studio"],
    "medium": ["living room", "classroom", "rehearsal room",
               "open-plan office", "small lecture room"],
    "long": ["concert hall", "stone chapel", "tiled stairwell",
             "concrete parking garage", "indoor pool hall"],
}

_MATERIALS_BY_ABSORPTION = [
    (0.15, ["stone", "concrete", "glass", "tile", "plaster"]),
    (0.45, ["wood", "brick", "drywall", "plaster"]),
    (1.01, ["carpet", "acoustic foam", "heavy curtains", "upholstered furniture"]),
]


def bucket_for(rt60: float, thresholds: tuple[float, float] = BUCKET_THRESHOLDS) -> str:
    if rt60 < thresholds[0]:
        return "short"
    if rt60 < thresholds[1]:
        return "medium"
    return "long"


@dataclass
class RoomRanges:
    """Uniform sampling ranges for room geometry and acoustics.

    Exactly one absorption mode drives the draw:

    * ``rt60_strata`` (default): a stratum is picked uniformly, a target
      decay time drawn uniformly inside it, and the uniform absorption
      solved from the Sabine formula (clamped to ``alpha_bounds``). Strata
      align with the RT60 buckets so bucket-conditional statistics are well
      populated at desk scale. Long-decay rooms are drawn from the upper
      half of the size range (reverberant spaces are large, and small
      near-lossless rooms need image counts a desk build cannot afford).
    * ``rt60_range``: one uniform target-decay interval.
    * ``alpha_range``: per-surface absorption drawn directly.
    """

    dims_min: tuple[float, float, float] = (2.5, 2.5, 2.2)
    dims_max: tuple[float, float, float] = (7.0, 7.0, 4.5)
    rt60_strata: tuple[tuple[float, float], ...] | None = ((0.05, 0.35), (0.45, 0.95), (1.55, 2.45))
    rt60_range: tuple[float, float] | None = None
    alpha_range: tuple[float, float] | None = None
    alpha_bounds: tuple[float, float] = (0.02, 0.98)
    wall_margin: float = 0.4
    min_separation: float = 0.5
    large_room_rt60: float = 1.0

    def __post_init__(self):
        modes = sum(m is not None for m in (self.rt60_strata, self.rt60_range, self.alpha_range))
        if modes != 1:
            raise ValueError("specify exactly one of rt60_strata, rt60_range, alpha_range")
        for lo, hi in zip(self.dims_min, self.dims_max):
            if not 0 < lo <= hi:
                raise ValueError("degenerate dims range")


@dataclass
class DatasetConfig:
    n: int = 500
    seed: int = 0
    sample_rate: int = 8000
    duration: float = 1.0
    ranges: RoomRanges = field(default_factory=RoomRanges)
    bucket_thresholds: tuple[float, float] = BUCKET_THRESHOLDS
    max_order_cap: int = 140
    n_prompts: int = 4
    prompt_long_frac: float = 0.6

    def __post_init__(self):
        if self.n < 1:
            raise ValueError("dataset size must be >= 1")


@dataclass
class ManifestEntry:
    id: str
    wav_path: str
    sample_rate: int
    duration: float
    room: RoomSpec
    rt60_sabine: float
    rt60_measured: float
    rt60_bucket: str
    caption_fields: StructuredCaption
    prompts: list[str]

    def to_dict(self) -> dict:
        return {
            "id": self.id,
            "wav_path": self.wav_path,
            "sample_rate": self.sample_rate,
            "duration": self.duration,
            "room": self.room.to_dict(),
            "rt60_sabine": self.rt60_sabine,
            "rt60_measured": self.rt60_measured,
            "rt60_bucket": self.rt60_bucket,
            "caption_fields": self.caption_fields.to_dict(),
            "prompts": list(self.prompts),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ManifestEntry":
        return cls(
            id=d["id"],
            wav_path=d["wav_path"],
            sample_rate=d["sample_rate"],
            duration=d["duration"],
            room=RoomSpec.from_dict(d["room"]),
            rt60_sabine=d["rt60_sabine"],
            rt60_measured=d["rt60_measured"],
            rt60_bucket=d["rt60_bucket"],
            caption_fields=StructuredCaption.from_dict(d["caption_fields"]),
            prompts=list(d["prompts"]),
        )


@dataclass
class DatasetManifest:
    entries: list[ManifestEntry]
    root: Path | None = None

    def __post_init__(self):
        ids = [e.id for e in self.entries]
        if len(set(ids)) != len(ids):
            raise ValueError("manifest entry ids must be unique")
        for e in self.entries:
            if e.rt60_bucket != bucket_for(e.rt60_measured):
                raise ValueError(f"entry {e.id}: bucket {e.rt60_bucket} inconsistent with "
                                 f"rt60 {e.rt60_measured}")

    def wav_file(self, entry: ManifestEntry) -> Path:
        base = self.root if self.root is not None else Path(".")
        return base / entry.wav_path

    def save(self, path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w", encoding="utf-8") as f:
            for entry in self.entries:
                f.write(json.dumps(entry.to_dict()) + "\n")
        return path

    @classmethod
    def load(cls, path) -> "DatasetManifest":
        path = Path(path)
        entries = []
        with open(path, encoding="utf-8") as f:
            for line in f:
                line = line.strip()
                if line:
                    entries.append(ManifestEntry.from_dict(json.loads(line)))
        return cls(entries=entries, root=path.parent)

    def __eq__(self, other):
        return isinstance(other, DatasetManifest) and self.entries == other.entries


def _sample_position(rng: np.random.Generator, dims, margin: float) -> np.ndarray:
    lo = np.full(3, margin)
    hi = np.asarray(dims) - margin
    if np.any(hi <= lo):
        # tiny room: fall back to the middle band
        lo = np.asarray(dims) * 0.25
        hi = np.asarray(dims) * 0.75
    return rng.uniform(lo, hi)


def _solve_uniform_alpha(dims, rt60: float, bounds) -> float:
    lx, ly, lz = dims
    volume = lx * ly * lz
    surface = 2.0 * (lx * ly + lx * lz + ly * lz)
    alpha = 0.161 * volume / (surface * rt60)
    return float(np.clip(alpha, bounds[0], bounds[1]))


def sample_room(rng: np.random.Generator, ranges: RoomRanges) -> RoomSpec:
    """Draw one room uniformly from the configured ranges."""
    target = None
    if ranges.rt60_strata is not None:
        lo, hi = ranges.rt60_strata[rng.integers(len(ranges.rt60_strata))]
        target = rng.uniform(lo, hi)
    elif ranges.rt60_range is not None:
        target = rng.uniform(*ranges.rt60_range)
    lo_dims = np.asarray(ranges.dims_min, dtype=np.float64)
    hi_dims = np.asarray(ranges.dims_max, dtype=np.float64)
    if target is not None and target >= ranges.large_room_rt60:
        lo_dims = 0.5 * (lo_dims + hi_dims)
    dims = tuple(rng.uniform(lo_dims[i], hi_dims[i]) for i in range(3))
    if target is not None:
        alpha = _solve_uniform_alpha(dims, target, ranges.alpha_bounds)
        absorption = (alpha,) * 6
    else:
        absorption = tuple(rng.uniform(*ranges.alpha_range) for _ in range(6))
    for _ in range(64):
        src = _sample_position(rng, dims, ranges.wall_margin)
        mic = _sample_position(rng, dims, ranges.wall_margin)
        if np.linalg.norm(src - mic) >= ranges.min_separation:
            break
    return RoomSpec(dims=dims, absorption=absorption,
                    source=tuple(src), mic=tuple(mic))


def _materials_for(alpha_mean: float, rng: np.random.Generator) -> list[str]:
    for cutoff, names in _MATERIALS_BY_ABSORPTION:
        if alpha_mean < cutoff:
            k = int(rng.integers(2, 4))
            picks = rng.choice(len(names), size=min(k, len(names)), replace=False)
            return [names[i] for i in sorted(picks)]
    return ["mixed materials"]


def caption_for_room(room: RoomSpec, rt60: float, bucket: str,
                     rng: np.random.Generator) -> StructuredCaption:
    """Derive the structured caption fields from room acoustics."""
    volume = room.volume
    size_class = "small" if volume < 40 else ("medium" if volume < 130 else "large")
    alpha_mean = float(np.mean(room.absorption))
    names = _SPACE_TYPES[bucket]
    space_type = names[rng.integers(len(names))]
    soft = float(np.clip(alpha_mean * 100.0 + rng.normal(0, 5), 0.0, 100.0))
    return StructuredCaption(
        space_type=space_type,
        size_class=size_class,
        main_materials=_materials_for(alpha_mean, rng),
        soft_coverage=round(soft, 1),
        rt60_bucket=bucket,
        rt60_seconds=round(rt60, 2),
    )


def _entry_seed(seed: int, index: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence((seed, index)))


def _build_entry(config: DatasetConfig, out_dir: Path, index: int) -> ManifestEntry:
    rng = _entry_seed(config.seed, index)
    room = sample_room(rng, config.ranges)
    sabine = sabine_rt60(room)
    order = min(config.max_order_cap, suggest_max_order(room, sabine))
    rir = image_source_rir(room, order, config.sample_rate, config.duration)
    measured = float(estimate_rt60(rir))
    bucket = bucket_for(measured, config.bucket_thresholds)
    caption = caption_for_room(room, measured, bucket, rng)
    entry_id = f"rir_{index:05d}"
    rel_path = f"wavs/{entry_id}.wav"
    write_wav(out_dir / rel_path, rir, fmt="float32")
    prompt_seed = int(rng.integers(2 ** 31))
    prompts = synthesize_prompts(caption, config.n_prompts, prompt_seed,
                                 long_frac=config.prompt_long_frac)
    return ManifestEntry(
        id=entry_id,
        wav_path=rel_path,
        sample_rate=config.sample_rate,
        duration=config.duration,
        room=room,
        rt60_sabine=round(sabine, 6),
        rt60_measured=round(measured, 6),
        rt60_bucket=bucket,
        caption_fields=caption,
        prompts=prompts,
    )


def build_dataset(config: DatasetConfig, out_dir, jobs: int = 1) -> DatasetManifest:
    """Render the dataset and write WAVs plus ``manifest.jsonl``.

    Per-entry seeds make the result independent of ``jobs``.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    indices = range(config.n)
    if jobs > 1:
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            entries = list(pool.map(lambda i: _build_entry(config, out_dir, i), indices))
    else:
        entries = [_build_entry(config, out_dir, i) for i in indices]
    manifest = DatasetManifest(entries=entries, root=out_dir)
    manifest.save(out_dir / "manifest.jsonl")
    return manifest
