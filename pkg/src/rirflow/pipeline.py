"""Glue between dataset manifests and the two trainable stages."""

from __future__ import annotations

import numpy as np

from .audio import read_wav
from .dataset import DatasetManifest
from .flow import FlowConfig, train_flow
from .text import embed_text, pool
from .vae import RirVae


def encode_manifest_latents(manifest: DatasetManifest, vae: RirVae,
                            item_ids: list[str] | None = None) -> tuple[np.ndarray, list[str]]:
    """Deterministic (mu) latents for manifest items: (N, C, F) plus ids."""
    entries = manifest.entries
    if item_ids is not None:
        wanted = set(item_ids)
        entries = [e for e in entries if e.id in wanted]
    latents = []
    ids = []
    for entry in entries:
        wav = read_wav(manifest.wav_file(entry))
        latents.append(vae.encode_buffer(wav).values)
        ids.append(entry.id)
    return np.stack(latents), ids


def manifest_prompt_embeddings(manifest: DatasetManifest, cond_dim: int,
                               item_ids: list[str] | None = None) -> list[np.ndarray]:
    """Per-item matrices of mean-pooled prompt embeddings, (k_i, cond_dim)."""
    entries = manifest.entries
    if item_ids is not None:
        wanted = set(item_ids)
        entries = [e for e in entries if e.id in wanted]
    out = []
    for entry in entries:
        vecs = [pool(embed_text(p, dim=cond_dim), "mean") for p in entry.prompts]
        out.append(np.stack(vecs))
    return out


def train_flow_on_manifest(manifest: DatasetManifest, vae: RirVae,
                           config: FlowConfig, seed: int, out_dir,
                           item_ids: list[str] | None = None,
                           progress: bool = False):
    """Encode the dataset through the VAE and train the flow on the latents."""
    latents, ids = encode_manifest_latents(manifest, vae, item_ids)
    conds = manifest_prompt_embeddings(manifest, config.cond_dim, item_ids)
    if config.seq_len != latents.shape[2] or config.latent_dim != latents.shape[1]:
        raise ValueError(
            f"flow config geometry ({config.latent_dim}, {config.seq_len}) does not match "
            f"latents {latents.shape[1:]}"
        )
    return train_flow(latents, conds, config, seed, out_dir, progress=progress)
