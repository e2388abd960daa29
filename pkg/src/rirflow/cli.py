"""Command-line interface exposing the full pipeline.

Every subcommand that takes ``--seed`` is bit-reproducible in its file
outputs. Exit codes: 0 success, 1 runtime failure (with a structured JSON
error line on stderr), 2 usage errors, 3 config errors.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import sys
from pathlib import Path

import numpy as np

from . import report as report_mod
from .audio import read_wav, write_wav
from .acoustics import estimate_rt60
from .config import ConfigError, RunConfig, load_config, profile_config
from .dataset import DatasetManifest, build_dataset
from .dsp import convolve, griffin_lim, mel_filterbank, mel_project, stft
from .flow import Conditioning, load_flow, sample
from .judge import tally_fixtures
from .pipeline import train_flow_on_manifest
from .prompts import synthesize_prompts
from .text import (POOL_STRATEGIES, StructuredCaption, batch_diversity,
                   classify_acoustic_heuristic, embed_text, embedding_richness,
                   pool, semantic_separation)
from .vae import load_vae, train_vae


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="rirflow",
        description="Text-conditioned room impulse response synthesis toolkit.",
    )
    parser.add_argument("--seed", type=int, default=None, help="override the run seed")
    parser.add_argument("--config", type=str, default=None, help="TOML config file")
    parser.add_argument("--out", type=str, default=None, help="output directory")
    parser.add_argument("--jobs", type=int, default=None, help="parallel per-item workers")
    parser.add_argument("--profile", type=str, default=None, choices=["desk", "paper"])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("dataset", help="dataset construction")
    dsub = p.add_subparsers(dest="subcommand", required=True)
    d = dsub.add_parser("build", help="render a synthetic RIR dataset")
    d.add_argument("--n", type=int, default=None, help="number of entries")
    d.set_defaults(func=cmd_dataset_build)

    p = sub.add_parser("rt60", help="estimate RT60 of a WAV file")
    p.add_argument("wav", type=str)
    p.add_argument("--json", action="store_true", dest="as_json")
    p.set_defaults(func=cmd_rt60)

    p = sub.add_parser("convolve", help="render dry audio through an RIR")
    p.add_argument("dry", type=str)
    p.add_argument("rir", type=str)
    p.add_argument("--gain", type=float, default=1.0)
    p.set_defaults(func=cmd_convolve)

    p = sub.add_parser("glim", help="Griffin-Lim reconstruction of a WAV")
    p.add_argument("wav", type=str)
    p.add_argument("--mode", choices=["stft", "mel"], default="stft")
    p.add_argument("--iters", type=int, default=32)
    p.set_defaults(func=cmd_glim)

    p = sub.add_parser("vae", help="latent codec")
    vsub = p.add_subparsers(dest="subcommand", required=True)
    v = vsub.add_parser("train")
    v.add_argument("--manifest", type=str, required=True)
    v.add_argument("--steps", type=int, default=None)
    v.set_defaults(func=cmd_vae_train)
    v = vsub.add_parser("encode")
    v.add_argument("--ckpt", type=str, required=True)
    v.add_argument("wav", type=str)
    v.set_defaults(func=cmd_vae_encode)
    v = vsub.add_parser("decode")
    v.add_argument("--ckpt", type=str, required=True)
    v.add_argument("latent", type=str, help=".npz latent file from 'vae encode'")
    v.set_defaults(func=cmd_vae_decode)
    v = vsub.add_parser("eval")
    v.add_argument("--ckpt", type=str, required=True)
    v.add_argument("--manifest", type=str, required=True)
    v.add_argument("--items", type=int, default=None)
    v.set_defaults(func=cmd_report_recon)

    p = sub.add_parser("flow", help="latent flow matching")
    fsub = p.add_subparsers(dest="subcommand", required=True)
    f = fsub.add_parser("train")
    f.add_argument("--manifest", type=str, required=True)
    f.add_argument("--vae", type=str, required=True, help="VAE checkpoint")
    f.add_argument("--steps", type=int, default=None)
    f.set_defaults(func=cmd_flow_train)
    f = fsub.add_parser("sample")
    f.add_argument("--prompt", type=str, required=True)
    f.add_argument("--ckpt", type=str, required=True, help="flow checkpoint")
    f.add_argument("--vae", type=str, required=True, help="VAE checkpoint")
    f.add_argument("--cfg-scale", type=float, default=None)
    f.set_defaults(func=cmd_flow_sample)

    p = sub.add_parser("prompts", help="prompt synthesis")
    psub = p.add_subparsers(dest="subcommand", required=True)
    q = psub.add_parser("synth")
    q.add_argument("--space-type", type=str, required=True)
    q.add_argument("--size-class", type=str, default="medium")
    q.add_argument("--materials", type=str, default="wood,plaster",
                   help="comma-separated list")
    q.add_argument("--soft-coverage", type=float, default=30.0)
    q.add_argument("--bucket", choices=["short", "medium", "long"], required=True)
    q.add_argument("--rt60", type=float, default=None)
    q.add_argument("--n", type=int, default=55)
    q.add_argument("--long-frac", type=float, default=0.6)
    q.set_defaults(func=cmd_prompts_synth)

    p = sub.add_parser("embed", help="embedding diagnostics")
    esub = p.add_subparsers(dest="subcommand", required=True)
    e = esub.add_parser("eval")
    e.add_argument("--prompts", type=str, required=True,
                   help="text file with one prompt per line")
    e.add_argument("--dim", type=int, default=256)
    e.set_defaults(func=cmd_embed_eval)

    p = sub.add_parser("judge", help="judge verdict aggregation")
    jsub = p.add_subparsers(dest="subcommand", required=True)
    j = jsub.add_parser("tally")
    j.add_argument("--fixtures", type=str, required=True,
                   help="JSON-lines of {raw_response, position_map}")
    j.set_defaults(func=cmd_judge_tally)

    p = sub.add_parser("report", help="evaluation reports")
    rsub = p.add_subparsers(dest="subcommand", required=True)
    r = rsub.add_parser("recon")
    r.add_argument("--manifest", type=str, required=True)
    r.add_argument("--ckpt", type=str, default=None, help="optional VAE checkpoint")
    r.add_argument("--items", type=int, default=None)
    r.set_defaults(func=cmd_report_recon)
    r = rsub.add_parser("gen")
    r.add_argument("--vae", type=str, required=True)
    r.add_argument("--flow", type=str, required=True)
    r.add_argument("--n-per-bucket", type=int, default=None)
    r.add_argument("--cfg-scale", type=float, default=None)
    r.set_defaults(func=cmd_report_gen)

    return parser


def _run_config(args) -> RunConfig:
    if args.config:
        cfg = load_config(args.config)
    else:
        cfg = profile_config(args.profile or "desk")
    if args.profile and not args.config:
        cfg = profile_config(args.profile)
    if args.seed is not None:
        cfg = dataclasses.replace(cfg, seed=args.seed)
    if args.jobs is not None:
        cfg = dataclasses.replace(cfg, jobs=args.jobs)
    if args.out is not None:
        cfg = dataclasses.replace(cfg, out_dir=args.out)
    return cfg


def _out_dir(cfg: RunConfig) -> Path:
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _echo_config(cfg: RunConfig) -> dict:
    d = cfg.to_dict()
    d["config_hash"] = report_mod.config_hash(d)
    return d


# -- subcommand implementations ------------------------------------------------


def cmd_dataset_build(args, cfg: RunConfig) -> int:
    ds_cfg = cfg.dataset
    if args.n is not None:
        ds_cfg = dataclasses.replace(ds_cfg, n=args.n)
    ds_cfg = dataclasses.replace(ds_cfg, seed=cfg.seed)
    out = _out_dir(cfg)
    manifest = build_dataset(ds_cfg, out, jobs=cfg.jobs)
    print(json.dumps({"manifest": str(out / "manifest.jsonl"),
                      "entries": len(manifest.entries)}))
    return 0


def cmd_rt60(args, cfg: RunConfig) -> int:
    est = estimate_rt60(read_wav(args.wav), detailed=True)
    if args.as_json:
        print(json.dumps({"rt60_s": est.seconds, "method": est.method,
                          "fit_rmse_db": est.fit_rmse_db, "fallback": est.fallback}))
    else:
        print(f"{est.seconds:.4f}")
    return 0


def cmd_convolve(args, cfg: RunConfig) -> int:
    dry = read_wav(args.dry)
    rir = read_wav(args.rir)
    wet = convolve(dry, rir)
    if args.gain != 1.0:
        wet.samples *= args.gain
    out = _out_dir(cfg) / (Path(args.dry).stem + "_wet.wav")
    write_wav(out, wet)
    print(json.dumps({"output": str(out), "samples": len(wet)}))
    return 0


def cmd_glim(args, cfg: RunConfig) -> int:
    audio = read_wav(args.wav)
    vae_cfg = cfg.vae
    spec = stft(audio, vae_cfg.fft_size, vae_cfg.hop)
    if args.mode == "mel":
        fb = mel_filterbank(vae_cfg.n_mels, vae_cfg.fft_size, audio.sample_rate)
        target = mel_project(spec, fb)
        rec = griffin_lim(target, "mel", fb=fb, iters=args.iters, rng_seed=cfg.seed,
                          fft_size=vae_cfg.fft_size, hop=vae_cfg.hop,
                          sample_rate=audio.sample_rate, length=len(audio))
    else:
        rec = griffin_lim(spec.magnitude(), "stft_magnitude", iters=args.iters,
                          rng_seed=cfg.seed, fft_size=vae_cfg.fft_size, hop=vae_cfg.hop,
                          sample_rate=audio.sample_rate, length=len(audio))
    out = _out_dir(cfg) / (Path(args.wav).stem + f"_gl_{args.mode}.wav")
    write_wav(out, rec)
    print(json.dumps({"output": str(out), "iters": args.iters, "mode": args.mode}))
    return 0


def cmd_vae_train(args, cfg: RunConfig) -> int:
    vae_cfg = cfg.vae
    if args.steps is not None:
        vae_cfg = dataclasses.replace(vae_cfg, steps=args.steps)
    manifest = DatasetManifest.load(args.manifest)
    result = train_vae(manifest, vae_cfg, cfg.seed, _out_dir(cfg))
    print(json.dumps({"checkpoint": str(result.checkpoint_path),
                      "log": str(result.log_path),
                      "final_loss": result.final_loss,
                      "holdout_ids": result.holdout_ids,
                      "config": _echo_config(cfg)}))
    return 0


def cmd_vae_encode(args, cfg: RunConfig) -> int:
    model = load_vae(args.ckpt, cfg.vae)
    audio = read_wav(args.wav)
    latent = model.encode_buffer(audio)
    out = _out_dir(cfg) / (Path(args.wav).stem + "_latent.npz")
    np.savez(out, values=latent.values, frame_rate=latent.frame_rate)
    print(json.dumps({"output": str(out), "channels": latent.channels,
                      "frames": latent.frames, "frame_rate": latent.frame_rate}))
    return 0


def cmd_vae_decode(args, cfg: RunConfig) -> int:
    from .vae import LatentSequence

    model = load_vae(args.ckpt, cfg.vae)
    data = np.load(args.latent)
    latent = LatentSequence(data["values"], float(data["frame_rate"]))
    audio = model.decode_latent(latent)
    out = _out_dir(cfg) / (Path(args.latent).stem.replace("_latent", "") + "_decoded.wav")
    write_wav(out, audio)
    print(json.dumps({"output": str(out), "samples": len(audio)}))
    return 0


def cmd_flow_train(args, cfg: RunConfig) -> int:
    flow_cfg = cfg.flow
    if args.steps is not None:
        flow_cfg = dataclasses.replace(flow_cfg, steps=args.steps)
    manifest = DatasetManifest.load(args.manifest)
    vae = load_vae(args.vae, cfg.vae)
    result = train_flow_on_manifest(manifest, vae, flow_cfg, cfg.seed, _out_dir(cfg))
    print(json.dumps({"checkpoint": str(result.checkpoint_path),
                      "log": str(result.log_path),
                      "final_loss": result.final_loss,
                      "config": _echo_config(cfg)}))
    return 0


def cmd_flow_sample(args, cfg: RunConfig) -> int:
    vae = load_vae(args.vae, cfg.vae)
    flow_model = load_flow(args.ckpt, cfg.flow)
    vec = pool(embed_text(args.prompt, dim=cfg.flow.cond_dim), "mean")
    rng = np.random.default_rng(cfg.seed)
    cfg_scale = args.cfg_scale if args.cfg_scale is not None else cfg.eval.cfg_scale
    result = sample(flow_model, Conditioning(vec), rng, cfg_scale=cfg_scale)
    wav = vae.decode(result.latents)
    from .audio import AudioBuffer

    buf = AudioBuffer(wav.data[0], vae.config.sample_rate)
    out = _out_dir(cfg)
    wav_path = out / "generated.wav"
    write_wav(wav_path, buf)
    telemetry = {
        "output": str(wav_path),
        "prompt": args.prompt,
        "nfe": result.nfe,
        "truncated": result.truncated,
        "steps_taken": result.steps_taken,
        "step_sizes": result.step_sizes,
        "cfg_scale": cfg_scale if cfg_scale is not None else cfg.flow.cfg_scale,
        "sampler": cfg.flow.sampler,
        "config": _echo_config(cfg),
    }
    (out / "telemetry.json").write_text(json.dumps(telemetry, indent=2), encoding="utf-8")
    print(json.dumps({"output": str(wav_path), "telemetry": str(out / "telemetry.json"),
                      "nfe": result.nfe}))
    return 0


def cmd_prompts_synth(args, cfg: RunConfig) -> int:
    caption = StructuredCaption(
        space_type=args.space_type,
        size_class=args.size_class,
        main_materials=[m.strip() for m in args.materials.split(",") if m.strip()],
        soft_coverage=args.soft_coverage,
        rt60_bucket=args.bucket,
        rt60_seconds=args.rt60,
    )
    prompts = synthesize_prompts(caption, args.n, cfg.seed, long_frac=args.long_frac)
    for p in prompts:
        print(p)
    return 0


def cmd_embed_eval(args, cfg: RunConfig) -> int:
    lines = [ln.strip() for ln in Path(args.prompts).read_text(encoding="utf-8").splitlines()]
    prompts = [ln for ln in lines if ln]
    if len(prompts) < 2:
        raise ValueError("embed eval needs at least 2 prompts")
    sequences = [embed_text(p, dim=args.dim) for p in prompts]
    classes = [classify_acoustic_heuristic(p) for p in prompts]
    rows = []
    for strategy in POOL_STRATEGIES:
        pooled = [pool(s, strategy) for s in sequences]
        try:
            sep = semantic_separation(pooled, classes)
        except ValueError:
            sep = None
        rows.append({
            "pooling": strategy,
            "batch_diversity": batch_diversity(pooled),
            "embedding_richness": embedding_richness(pooled),
            "semantic_separation": sep,
        })
    print(json.dumps({"rows": rows, "n_prompts": len(prompts), "dim": args.dim}, indent=2))
    return 0


def cmd_judge_tally(args, cfg: RunConfig) -> int:
    result = tally_fixtures(args.fixtures)
    print(json.dumps({"winner": result.winner, "tally": result.tally,
                      "parse_errors": result.parse_errors}))
    return 0


def cmd_report_recon(args, cfg: RunConfig) -> int:
    manifest = DatasetManifest.load(args.manifest)
    ckpt = getattr(args, "ckpt", None)
    item_ids = None
    if args.items is not None:
        item_ids = [e.id for e in manifest.entries[: args.items]]
    rep = report_mod.reconstruction_report(
        manifest,
        vae_checkpoint=ckpt,
        vae_config=cfg.vae if ckpt else None,
        item_ids=item_ids,
        gl_iters=cfg.eval.gl_iters,
        seed=cfg.seed,
        metadata={"config": _echo_config(cfg)},
    )
    out = _out_dir(cfg)
    rep.save_json(out / "recon_report.json")
    rep.save_csv(out / "recon_report.csv", report_mod.RECON_CSV_COLUMNS)
    print(json.dumps({"json": str(out / "recon_report.json"),
                      "csv": str(out / "recon_report.csv"),
                      "rows": rep.rows}))
    return 0


def cmd_report_gen(args, cfg: RunConfig) -> int:
    vae = load_vae(args.vae, cfg.vae)
    flow_model = load_flow(args.flow, cfg.flow)
    n = args.n_per_bucket if args.n_per_bucket is not None else cfg.eval.n_per_bucket
    cfg_scale = args.cfg_scale if args.cfg_scale is not None else cfg.eval.cfg_scale
    rep = report_mod.generation_report(vae, flow_model, n_per_bucket=n, seed=cfg.seed,
                                       cfg_scale=cfg_scale,
                                       metadata={"config": _echo_config(cfg)})
    out = _out_dir(cfg)
    rep.save_json(out / "gen_report.json")
    rep.save_csv(out / "gen_report.csv")
    print(json.dumps({"json": str(out / "gen_report.json"),
                      "csv": str(out / "gen_report.csv"),
                      "rows": rep.rows}))
    return 0


def main(argv=None) -> int:
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        # argparse exits 2 on usage errors and 0 on --help
        return int(exc.code or 0)
    try:
        cfg = _run_config(args)
    except ConfigError as exc:
        print(json.dumps({"error": str(exc), "kind": "ConfigError"}), file=sys.stderr)
        return 3
    try:
        return args.func(args, cfg)
    except ConfigError as exc:
        print(json.dumps({"error": str(exc), "kind": "ConfigError"}), file=sys.stderr)
        return 3
    except Exception as exc:  # runtime failures map to exit 1
        print(json.dumps({"error": str(exc), "kind": type(exc).__name__}), file=sys.stderr)
        return 1


if __name__ == "__main__":
    raise SystemExit(main())
