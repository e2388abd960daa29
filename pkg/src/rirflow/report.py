"""Evaluation harness: RT60 error statistics, reconstruction-quality
comparisons against Griffin-Lim baselines, bucket-conditioned generation
reports, and wall-clock timing.

All aggregates are plain means/medians over per-item records, which are kept
in the report so aggregation can be re-verified independently. The
``reference_points`` block in report metadata carries the published
full-scale RT60-error figures that desk runs are compared against
directionally (not numerically).
"""

from __future__ import annotations

import csv
import hashlib
import json
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import dsp
from .audio import AudioBuffer, read_wav
from .acoustics import estimate_rt60
from .dataset import BUCKET_TARGETS, DatasetManifest
from .flow import Conditioning, sample
from .prompts import synthesize_prompts
from .text import StructuredCaption, embed_text, pool
from .vae import RirVae, VaeConfig, load_vae

REFERENCE_POINTS = {
    "external_baseline_mean_rt60_err_pct": -37.0,
    "xl_long_mean_rt60_err_pct": 8.8,
    "xl_short_mean_rt60_err_pct": 4.8,
}

RECON_CSV_COLUMNS = ["method", "snr_db", "mse", "mse_e4",
                     "rt60_err_pct_mean", "rt60_err_pct_median", "time_ms"]


@dataclass
class EvalReport:
    rows: list[dict]
    metadata: dict
    per_item: dict[str, list[dict]] = field(default_factory=dict)

    def to_json(self) -> str:
        return json.dumps({"rows": self.rows, "metadata": self.metadata,
                           "per_item": self.per_item}, indent=2)

    def save_json(self, path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(self.to_json(), encoding="utf-8")
        return path

    def save_csv(self, path, columns=None) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        cols = columns or (list(self.rows[0].keys()) if self.rows else [])
        with open(path, "w", newline="", encoding="utf-8") as f:
            writer = csv.DictWriter(f, fieldnames=cols, extrasaction="ignore")
            writer.writeheader()
            writer.writerows(self.rows)
        return path


def rt60_error_stats(gt, pred) -> dict:
    """Signed percentage deviations 100 * (pred - gt) / gt: mean and median.

    Negative values indicate underestimation.
    """
    gt = list(gt)
    pred = list(pred)
    if len(gt) != len(pred) or not gt:
        raise ValueError("gt and pred must be equal-length, non-empty lists")
    if any(g <= 0 for g in gt):
        raise ValueError("ground-truth RT60 values must be positive")
    errors = [100.0 * (p - g) / g for g, p in zip(gt, pred)]
    return {"mean_pct": float(np.mean(errors)),
            "median_pct": float(np.median(errors))}


@dataclass
class Timing:
    mean_ms: float
    p50_ms: float
    std_ms: float
    n: int


def timing(op, n: int = 10, warmup: int = 2) -> Timing:
    """Wall-clock stats for a no-argument callable, after warmup runs."""
    if n < 3:
        raise ValueError("timing needs n >= 3 runs")
    if warmup < 1:
        raise ValueError("timing needs warmup >= 1")
    for _ in range(warmup):
        op()
    samples = []
    for _ in range(n):
        t0 = time.perf_counter()
        op()
        samples.append((time.perf_counter() - t0) * 1e3)
    return Timing(mean_ms=float(np.mean(samples)),
                  p50_ms=float(np.median(samples)),
                  std_ms=float(np.std(samples)),
                  n=n)


def config_hash(obj) -> str:
    """Stable short hash of a JSON-serializable config mapping."""
    blob = json.dumps(obj, sort_keys=True, default=str).encode("utf-8")
    return hashlib.sha256(blob).hexdigest()[:12]


def _aggregate(records: list[dict], key: str):
    vals = [r[key] for r in records if r.get(key) is not None]
    return (float(np.mean(vals)) if vals else None,
            float(np.median(vals)) if vals else None)


def _method_row(method: str, records: list[dict]) -> dict:
    snr_mean, _ = _aggregate(records, "snr_db")
    mse_mean, _ = _aggregate(records, "mse")
    err_mean, err_median = _aggregate(records, "rt60_err_pct")
    time_mean, _ = _aggregate(records, "time_ms")
    return {
        "method": method,
        "snr_db": snr_mean,
        "mse": mse_mean,
        "mse_e4": mse_mean * 1e4 if mse_mean is not None else None,
        "rt60_err_pct_mean": err_mean,
        "rt60_err_pct_median": err_median,
        "time_ms": time_mean,
        "n_failed_rt60": sum(1 for r in records if r.get("rt60_err_pct") is None),
    }


def reconstruction_report(manifest: DatasetManifest,
                          vae: RirVae | None = None,
                          vae_checkpoint=None,
                          vae_config: VaeConfig | None = None,
                          item_ids: list[str] | None = None,
                          gl_iters: int = 32,
                          seed: int = 0,
                          metadata: dict | None = None) -> EvalReport:
    """Per-method reconstruction quality over manifest items.

    Methods: the VAE round trip (when a model or checkpoint is given), and
    the two Griffin-Lim baselines from mel magnitudes and STFT magnitudes.
    ``time_ms`` measures waveform generation from each method's native
    representation (latents for the VAE, magnitudes for Griffin-Lim).
    """
    if vae is None and vae_checkpoint is not None:
        if vae_config is None:
            raise ValueError("vae_checkpoint requires vae_config")
        vae = load_vae(vae_checkpoint, vae_config)
    cfg = vae.config if vae is not None else (vae_config or VaeConfig())
    fb = dsp.mel_filterbank(cfg.n_mels, cfg.fft_size, cfg.sample_rate)
    entries = manifest.entries
    if item_ids is not None:
        wanted = set(item_ids)
        entries = [e for e in entries if e.id in wanted]
    if not entries:
        raise ValueError("no manifest items selected")

    per_item: dict[str, list[dict]] = {"gl_stft": [], "gl_mel": []}
    if vae is not None:
        per_item["vae"] = []

    t_wall = time.perf_counter()
    for k, entry in enumerate(entries):
        ref = read_wav(manifest.wav_file(entry))
        target_len = len(ref)
        spec = dsp.stft(ref, cfg.fft_size, cfg.hop)
        gt_rt60 = entry.rt60_measured

        def record(method, est, elapsed_ms):
            est = dsp.match_length(ref, est)
            fid = dsp.fidelity(ref, est)
            try:
                err = 100.0 * (float(estimate_rt60(est)) - gt_rt60) / gt_rt60
            except ValueError:
                err = None
            per_item[method].append({"id": entry.id, "snr_db": fid.snr_db,
                                     "mse": fid.mse, "rt60_err_pct": err,
                                     "time_ms": elapsed_ms})

        mag = spec.magnitude()
        t0 = time.perf_counter()
        est = dsp.griffin_lim(mag, "stft_magnitude", iters=gl_iters, rng_seed=seed + k,
                              fft_size=cfg.fft_size, hop=cfg.hop,
                              sample_rate=cfg.sample_rate, length=target_len)
        record("gl_stft", est, (time.perf_counter() - t0) * 1e3)

        mel = fb.weights @ mag
        t0 = time.perf_counter()
        est = dsp.griffin_lim(mel, "mel", fb=fb, iters=gl_iters, rng_seed=seed + k,
                              fft_size=cfg.fft_size, hop=cfg.hop,
                              sample_rate=cfg.sample_rate, length=target_len)
        record("gl_mel", est, (time.perf_counter() - t0) * 1e3)

        if vae is not None:
            latent = vae.encode_buffer(ref)
            t0 = time.perf_counter()
            est = vae.decode_latent(latent)
            record("vae", est, (time.perf_counter() - t0) * 1e3)

    rows = [_method_row(m, recs) for m, recs in per_item.items()]
    meta = {"n_items": len(entries), "seed": seed, "gl_iters": gl_iters,
            "wall_clock_s": time.perf_counter() - t_wall,
            "reference_points": REFERENCE_POINTS}
    if metadata:
        meta.update(metadata)
    return EvalReport(rows=rows, metadata=meta, per_item=per_item)


_GEN_CAPTION_FIELDS = {
    "short": ("vocal booth", "small", ["acoustic foam", "carpet"], 70.0),
    "medium": ("living room", "medium", ["wood", "drywall"], 40.0),
    "long": ("concert hall", "large", ["plaster", "wood"], 15.0),
}


def bucket_prompts(n_per_bucket: int, seed: int) -> list[tuple[str, str]]:
    """(bucket, prompt) pairs synthesized from one caption per bucket."""
    out = []
    for b_idx, bucket in enumerate(("short", "medium", "long")):
        space, size, materials, soft = _GEN_CAPTION_FIELDS[bucket]
        caption = StructuredCaption(space_type=space, size_class=size,
                                    main_materials=materials, soft_coverage=soft,
                                    rt60_bucket=bucket,
                                    rt60_seconds=BUCKET_TARGETS[bucket])
        for prompt in synthesize_prompts(caption, n_per_bucket, seed + 1000 * b_idx):
            out.append((bucket, prompt))
    return out


def generation_report(vae: RirVae, flow_model, n_per_bucket: int = 16,
                      seed: int = 0, cfg_scale: float | None = None,
                      prompts_with_buckets: list[tuple[str, str]] | None = None,
                      metadata: dict | None = None) -> EvalReport:
    """Generate RIRs per bucket prompt and report RT60 statistics.

    Rows carry per-bucket mean/median/max RT60 and signed error against the
    bucket target; the report is flagged when more than half the sampler
    runs hit the evaluation budget.
    """
    if prompts_with_buckets is None:
        prompts_with_buckets = bucket_prompts(n_per_bucket, seed)
    rng = np.random.default_rng(seed)
    cfg = flow_model.config
    per_item: dict[str, list[dict]] = {b: [] for b in ("short", "medium", "long")}
    truncations = 0
    t_wall = time.perf_counter()
    for bucket, prompt in prompts_with_buckets:
        vec = pool(embed_text(prompt, dim=cfg.cond_dim), "mean")
        result = sample(flow_model, Conditioning(vec), rng, cfg_scale=cfg_scale)
        truncations += int(result.truncated)
        wav = vae.decode(result.latents)
        buf = AudioBuffer(wav.data[0], vae.config.sample_rate)
        try:
            rt60 = float(estimate_rt60(buf))
        except ValueError:
            rt60 = None
        per_item[bucket].append({"prompt": prompt, "rt60": rt60,
                                 "nfe": result.nfe, "truncated": result.truncated})

    rows = []
    for bucket in ("short", "medium", "long"):
        records = [r for r in per_item[bucket] if r["rt60"] is not None]
        target = BUCKET_TARGETS[bucket]
        values = [r["rt60"] for r in records]
        rows.append({
            "bucket": bucket,
            "target_rt60_s": target,
            "mean_rt60_s": float(np.mean(values)) if values else None,
            "median_rt60_s": float(np.median(values)) if values else None,
            "max_rt60_s": float(np.max(values)) if values else None,
            "signed_err_pct_mean": (100.0 * (float(np.mean(values)) - target) / target
                                    if values else None),
            "n": len(per_item[bucket]),
            "n_failed": len(per_item[bucket]) - len(records),
        })
    total = len(prompts_with_buckets)
    meta = {"seed": seed, "n_prompts": total,
            "truncation_fraction": truncations / total if total else 0.0,
            "flagged_truncation": total > 0 and truncations / total > 0.5,
            "cfg_scale": cfg_scale if cfg_scale is not None else cfg.cfg_scale,
            "wall_clock_s": time.perf_counter() - t_wall,
            "reference_points": REFERENCE_POINTS}
    if metadata:
        meta.update(metadata)
    return EvalReport(rows=rows, metadata=meta, per_item=per_item)
