"""Run configuration: profiles, TOML config files, and flag overrides.

Two profiles exist. ``desk`` (the default, what the test suite runs) works
at 8 kHz / 1 s with 64 mel bands; ``paper`` selects the full-scale geometry
(48 kHz / 5 s, 128 mel bands, 23.6 Hz latent rate) without any claim that
training at that scale is attempted here.

Config files are TOML with sections mirroring the module configs
([vae], [flow], [dataset], [dataset.ranges], [eval], [run]); command-line
flags override file values. The effective config is echoed into every
report for auditability.
"""

from __future__ import annotations

import dataclasses
import sys
from dataclasses import dataclass, field
from pathlib import Path

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from .dataset import DatasetConfig, RoomRanges
from .flow import FlowConfig
from .vae import VaeConfig


class ConfigError(Exception):
    """Invalid or inconsistent run configuration."""


@dataclass
class EvalConfig:
    gl_iters: int = 32
    n_per_bucket: int = 16
    recon_items: int = 50
    cfg_scale: float | None = None  # None: use the flow config's scale


@dataclass
class RunConfig:
    profile: str = "desk"
    seed: int = 0
    jobs: int = 1
    out_dir: str = "runs"
    vae: VaeConfig = field(default_factory=VaeConfig)
    flow: FlowConfig = field(default_factory=FlowConfig)
    dataset: DatasetConfig = field(default_factory=DatasetConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


def desk_profile(seed: int = 0) -> RunConfig:
    return RunConfig(profile="desk", seed=seed)


def paper_profile(seed: int = 0) -> RunConfig:
    """Full-scale geometry: 48 kHz, 5 s, 128 mels, 23.6 Hz latent rate."""
    vae = VaeConfig(
        n_mels=128,
        sample_rate=48000,
        duration=5.0,
        fft_size=2048,
        hop=339,
        rate_dropout=((48000, 0.34), (24000, 0.33), (16000, 0.33)),
    )
    flow = FlowConfig(latent_dim=vae.latent_dim, seq_len=vae.latent_frames)
    dataset = DatasetConfig(sample_rate=48000, duration=5.0)
    return RunConfig(profile="paper", seed=seed, vae=vae, flow=flow, dataset=dataset)


def profile_config(name: str, seed: int = 0) -> RunConfig:
    if name == "desk":
        return desk_profile(seed)
    if name == "paper":
        return paper_profile(seed)
    raise ConfigError(f"unknown profile {name!r} (expected 'desk' or 'paper')")


def _coerce(value, target_type):
    if target_type is tuple or str(target_type).startswith(("tuple", "typing.Tuple")):
        if isinstance(value, list):
            return tuple(tuple(v) if isinstance(v, list) else v for v in value)
    return value


def _apply_section(dc, mapping: dict, section: str):
    """Replace dataclass fields from a TOML table, rejecting unknown keys."""
    names = {f.name: f for f in dataclasses.fields(dc)}
    updates = {}
    for key, value in mapping.items():
        if isinstance(value, dict):
            continue  # nested tables handled by the caller
        if key not in names:
            raise ConfigError(f"unknown key {key!r} in [{section}]")
        updates[key] = _coerce(value, names[key].type)
    try:
        return dataclasses.replace(dc, **updates)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"invalid value in [{section}]: {exc}") from exc


def load_config(path, base: RunConfig | None = None) -> RunConfig:
    """Load a TOML config file on top of a base (default: its profile's)."""
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file not found: {path}")
    try:
        with open(path, "rb") as f:
            doc = tomllib.load(f)
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"cannot parse {path}: {exc}") from exc

    run_section = doc.get("run", {})
    if base is None:
        base = profile_config(run_section.get("profile", "desk"))
    cfg = _apply_section(base, run_section, "run")
    if "vae" in doc:
        cfg = dataclasses.replace(cfg, vae=_apply_section(cfg.vae, doc["vae"], "vae"))
    if "flow" in doc:
        cfg = dataclasses.replace(cfg, flow=_apply_section(cfg.flow, doc["flow"], "flow"))
    if "dataset" in doc:
        ds = _apply_section(cfg.dataset, doc["dataset"], "dataset")
        if "ranges" in doc["dataset"]:
            ranges_tbl = doc["dataset"]["ranges"]
            ranges = ds.ranges
            # TOML has no null: choosing one absorption mode clears the other
            if "alpha_range" in ranges_tbl and "rt60_range" not in ranges_tbl:
                ranges = dataclasses.replace(ranges, rt60_range=None)
            elif "rt60_range" in ranges_tbl and "alpha_range" not in ranges_tbl:
                ranges = dataclasses.replace(ranges, alpha_range=None)
            ds = dataclasses.replace(
                ds, ranges=_apply_section(ranges, ranges_tbl, "dataset.ranges"))
        cfg = dataclasses.replace(cfg, dataset=ds)
    if "eval" in doc:
        cfg = dataclasses.replace(cfg, eval=_apply_section(cfg.eval, doc["eval"], "eval"))
    return cfg
