"""Waveform VAE over log-mel RIR spectrograms.

The encoder is a residual 1-D conv stack whose stride schedule [1, 2, 3]
compresses the mel frame axis by exactly 6x into a compact latent sequence.
The decoder runs a small self-attention pre-stage at the latent rate, then
upsamples back to the mel frame rate through conv blocks and emits one hop
of waveform per frame, always at the configured full-band rate regardless
of the bandwidth of what was encoded. Training randomly band-limits the
encoder input while the reconstruction target stays full-band, which is
what teaches the decoder to upsample natively.

The total loss is mel-domain reconstruction + a decay-slope surrogate for
RT60 error + beta * KL, with optional hinge-GAN adversarial and feature
matching terms from a single small conv discriminator.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from . import dsp
from .audio import AudioBuffer
from .autograd import Tensor, concat, conv1d, gelu, repeat_interleave
from .checkpoint import load_checkpoint, save_checkpoint
from .nn import ChannelNorm, Conv1d, LayerNorm, Linear, Mlp, Module, SelfAttention, positional_encoding
from .optim import Adam

LOGMEL_OFFSET = -8.0
LOGMEL_SCALE = 3.0
STRIDE_PRODUCT = 6


@dataclass
class VaeConfig:
    latent_dim: int = 16
    encoder_strides: tuple[int, ...] = (1, 2, 3)
    n_mels: int = 64
    beta: float = 1e-4
    rt60_loss_weight: float = 0.1
    mel_loss_weight: float = 1.0
    adversarial: bool = False
    adv_weight: float = 0.05
    fm_weight: float = 1.0
    rate_dropout: tuple[tuple[int, float], ...] = ((8000, 0.34), (4000, 0.33), (2000, 0.33))
    hidden: int = 128
    sample_rate: int = 8000
    duration: float = 1.0
    fft_size: int = 512
    hop: int = 128
    # training
    steps: int = 2000
    batch_size: int = 8
    lr: float = 2e-3
    holdout_frac: float = 0.1
    log_every: int = 25

    def __post_init__(self):
        prod = math.prod(self.encoder_strides)
        if prod != STRIDE_PRODUCT:
            raise ValueError(f"encoder strides must multiply to {STRIDE_PRODUCT}, got {self.encoder_strides}")
        if self.beta < 0:
            raise ValueError("beta must be >= 0")
        probs = [p for _, p in self.rate_dropout]
        if abs(sum(probs) - 1.0) > 1e-9:
            raise ValueError("rate_dropout probabilities must sum to 1")

    @property
    def n_out(self) -> int:
        return int(round(self.duration * self.sample_rate))

    @property
    def mel_frames(self) -> int:
        return -(-self.n_out // self.hop)

    @property
    def latent_frames(self) -> int:
        return -(-self.mel_frames // STRIDE_PRODUCT)

    @property
    def latent_frame_rate(self) -> float:
        return self.sample_rate / self.hop / STRIDE_PRODUCT


@dataclass
class LatentSequence:
    """A (channels, frames) latent array at a fixed frame rate."""

    values: np.ndarray
    frame_rate: float

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.ndim != 2:
            raise ValueError("latent sequence must be 2-D (channels, frames)")
        if not np.all(np.isfinite(self.values)):
            raise ValueError("latent values must be finite")

    @property
    def channels(self) -> int:
        return self.values.shape[0]

    @property
    def frames(self) -> int:
        return self.values.shape[1]


def normalize_log_mel(mel: np.ndarray) -> np.ndarray:
    """Map a mel magnitude matrix into roughly unit-scale encoder input."""
    return (dsp.log_mel(mel) - LOGMEL_OFFSET) / LOGMEL_SCALE


def mel_input_for(audio: AudioBuffer, config: VaeConfig) -> np.ndarray:
    """Normalized log-mel encoder input for a waveform."""
    spec = dsp.stft(audio, config.fft_size, config.hop)
    fb = _filterbank_for(config)
    return normalize_log_mel(dsp.mel_project(spec, fb))


_FB_CACHE: dict[tuple, dsp.MelFilterbank] = {}


def _filterbank_for(config: VaeConfig) -> dsp.MelFilterbank:
    key = (config.n_mels, config.fft_size, config.sample_rate)
    if key not in _FB_CACHE:
        _FB_CACHE[key] = dsp.mel_filterbank(*key)
    return _FB_CACHE[key]


class ResBlock(Module):
    def __init__(self, channels: int, stride: int, rng: np.random.Generator):
        self.conv1 = Conv1d(channels, channels, 5, rng, stride=stride)
        self.norm = ChannelNorm(channels)
        self.conv2 = Conv1d(channels, channels, 5, rng)
        self.skip = Conv1d(channels, channels, 1, rng, stride=stride, padding=0) if stride > 1 else None

    def __call__(self, x: Tensor) -> Tensor:
        y = self.conv2(gelu(self.norm(self.conv1(x))))
        s = self.skip(x) if self.skip is not None else x
        return gelu(y + s)


class Encoder(Module):
    def __init__(self, config: VaeConfig, rng: np.random.Generator):
        h = config.hidden
        self.stem = Conv1d(config.n_mels, h, 5, rng)
        strides = list(config.encoder_strides) + [1]
        self.blocks = [ResBlock(h, s, rng) for s in strides]
        self.head = Conv1d(h, 2 * config.latent_dim, 1, rng, padding=0)

    def __call__(self, mel: Tensor) -> tuple[Tensor, Tensor]:
        x = gelu(self.stem(mel))
        for block in self.blocks:
            x = block(x)
        out = self.head(x)
        c = out.shape[1] // 2
        return out[:, :c, :], out[:, c:, :]


class ConvNeXtBlock(Module):
    def __init__(self, channels: int, rng: np.random.Generator):
        self.conv = Conv1d(channels, channels, 7, rng)
        self.norm = ChannelNorm(channels)
        self.pw1 = Conv1d(channels, 2 * channels, 1, rng, padding=0)
        self.pw2 = Conv1d(2 * channels, channels, 1, rng, padding=0)

    def __call__(self, x: Tensor) -> Tensor:
        return x + self.pw2(gelu(self.pw1(self.norm(self.conv(x)))))


class Decoder(Module):
    def __init__(self, config: VaeConfig, rng: np.random.Generator):
        h = config.hidden
        self.config = config
        self.stem = Conv1d(config.latent_dim, h, 1, rng, padding=0)
        self.attn_norms = [LayerNorm(h) for _ in range(2)]
        self.attns = [SelfAttention(h, 4, rng) for _ in range(2)]
        self.mlp_norms = [LayerNorm(h) for _ in range(2)]
        self.mlps = [Mlp(h, 2 * h, rng) for _ in range(2)]
        self.up_blocks = [ConvNeXtBlock(h, rng) for _ in range(4)]
        # epsilon-scale head: an exactly-zero head is a stationary point of
        # the magnitude-domain loss (dead gradient), but must stay near-silent
        self.head = Conv1d(h, config.hop, 1, rng, padding=0, init_scale=1e-3)
        self._posenc = positional_encoding(512, h)

    def __call__(self, z: Tensor, n_out: int) -> Tensor:
        x = self.stem(z)                      # (B, H, F)
        t = x.swapaxes(1, 2)                  # (B, F, H)
        t = t + Tensor(self._posenc[: t.shape[1]])
        for norm_a, attn, norm_m, mlp in zip(self.attn_norms, self.attns,
                                             self.mlp_norms, self.mlps):
            t = t + attn(norm_a(t))
            t = t + mlp(norm_m(t))
        x = t.swapaxes(1, 2)                  # (B, H, F)
        x = repeat_interleave(x, 3, axis=2)
        x = self.up_blocks[0](x)
        x = repeat_interleave(x, 2, axis=2)
        for block in self.up_blocks[1:]:
            x = block(x)
        frames = self.head(x)                 # (B, hop, 6F)
        wav = frames.swapaxes(1, 2).reshape(frames.shape[0], -1)
        if wav.shape[1] < n_out:
            raise ValueError(f"latent too short: decoder produced {wav.shape[1]} < {n_out} samples")
        return wav[:, :n_out]


def kl_divergence(mu, logvar) -> Tensor:
    """KL(N(mu, exp(logvar)) || N(0, I)), summed over latent dims, batch-mean."""
    mu = Tensor._lift(mu)
    logvar = Tensor._lift(logvar)
    if mu.shape != logvar.shape:
        raise ValueError("mu and logvar shapes must match")
    per_item = 0.5 * (mu * mu + logvar.exp() - 1.0 - logvar)
    axes = tuple(range(1, mu.ndim))
    return per_item.sum(axis=axes).mean() if axes else per_item.mean()


def reparameterize(mu, logvar, rng: np.random.Generator) -> Tensor:
    """z = mu + exp(logvar / 2) * eps with eps ~ N(0, I) from the given rng."""
    mu = Tensor._lift(mu)
    logvar = Tensor._lift(logvar)
    if mu.shape != logvar.shape:
        raise ValueError("mu and logvar shapes must match")
    eps = Tensor(rng.standard_normal(mu.shape))
    return mu + (logvar * 0.5).exp() * eps


def hinge_gan_losses(d_real, d_fake) -> dict:
    """Hinge GAN losses: discriminator and generator sides."""
    d_real = Tensor._lift(d_real)
    d_fake = Tensor._lift(d_fake)
    if d_real.size == 0 or d_fake.size == 0:
        raise ValueError("score sets must be non-empty")
    zero_r = Tensor(np.zeros(d_real.shape))
    zero_f = Tensor(np.zeros(d_fake.shape))
    loss_d = zero_r.maximum(1.0 - d_real).mean() + zero_f.maximum(1.0 + d_fake).mean()
    loss_g = -d_fake.mean()
    return {"loss_d": loss_d, "loss_g": loss_g}


def feature_matching_loss(real_feats, fake_feats) -> Tensor:
    """Mean over discriminator levels of mean absolute feature difference."""
    if len(real_feats) != len(fake_feats) or not real_feats:
        raise ValueError("feature lists must be non-empty and level-aligned")
    terms = []
    for r, f in zip(real_feats, fake_feats):
        r = Tensor._lift(r)
        f = Tensor._lift(f)
        if r.shape != f.shape:
            raise ValueError(f"feature shape mismatch: {r.shape} vs {f.shape}")
        terms.append((r - f).abs().mean())
    total = terms[0]
    for t in terms[1:]:
        total = total + t
    return total * (1.0 / len(terms))


class Discriminator(Module):
    """Small 3-layer conv discriminator over raw waveforms."""

    def __init__(self, rng: np.random.Generator):
        self.c1 = Conv1d(1, 16, 15, rng, stride=4)
        self.c2 = Conv1d(16, 32, 15, rng, stride=4)
        self.c3 = Conv1d(32, 1, 3, rng)

    def __call__(self, wav: Tensor) -> tuple[Tensor, list[Tensor]]:
        x = wav.reshape(wav.shape[0], 1, wav.shape[1])
        f1 = gelu(self.c1(x))
        f2 = gelu(self.c2(f1))
        score = self.c3(f2)
        return score, [f1, f2]


class _MelLossTransform:
    """Differentiable log-mel of a waveform (valid framing, Hann + DFT conv)."""

    def __init__(self, config: VaeConfig):
        fft, hop = config.fft_size, config.hop
        n_freq = fft // 2 + 1
        window = 0.5 - 0.5 * np.cos(2.0 * np.pi * np.arange(fft) / fft)
        k = np.arange(n_freq)[:, None]
        n = np.arange(fft)[None, :]
        angle = 2.0 * np.pi * k * n / fft
        basis = np.concatenate([np.cos(angle), -np.sin(angle)], axis=0) * window[None, :]
        self.weight = Tensor(basis[:, None, :])          # (2*n_freq, 1, fft)
        self.mel = Tensor(_filterbank_for(config).weights)
        self.n_freq = n_freq
        self.hop = hop
        self.fft = fft

    def __call__(self, wav: Tensor) -> Tensor:
        x = wav.reshape(wav.shape[0], 1, wav.shape[1])
        spec = conv1d(x, self.weight, stride=self.hop)   # (B, 2F, T)
        re = spec[:, :self.n_freq, :]
        im = spec[:, self.n_freq:, :]
        mag = (re * re + im * im + 1e-12).sqrt()
        mel = self.mel @ mag                             # (B, n_mels, T)
        return (mel + dsp.LOG_MEL_FLOOR).log()


class _DecaySlope:
    """Differentiable log-energy decay slope over a fixed frame window."""

    def __init__(self, config: VaeConfig):
        hop = config.hop
        n_frames = config.n_out // hop
        lo = max(1, int(0.05 * n_frames))
        hi = max(lo + 4, int(0.85 * n_frames))
        t = np.arange(lo, hi) * hop / config.sample_rate
        w = (t - t.mean()) / np.sum((t - t.mean()) ** 2)
        self.lo, self.hi = lo, hi
        self.n_frames = n_frames
        self.hop = hop
        self.weights = Tensor(w)
        self.floor = 1e-6

    def __call__(self, wav: Tensor) -> Tensor:
        frames = wav[:, : self.n_frames * self.hop].reshape(wav.shape[0], self.n_frames, self.hop)
        energy = (frames * frames).sum(axis=2)
        log_e = (energy + self.floor).log()[:, self.lo:self.hi]
        return (log_e * self.weights).sum(axis=1)        # (B,) slope per item


class RirVae(Module):
    """Encoder + decoder pair with its loss machinery."""

    def __init__(self, config: VaeConfig, rng: np.random.Generator | None = None):
        if rng is None:
            rng = np.random.default_rng(0)
        self.config = config
        self.encoder = Encoder(config, rng)
        self.decoder = Decoder(config, rng)
        self._mel_loss = _MelLossTransform(config)
        self._slope = _DecaySlope(config)

    # -- inference -------------------------------------------------------------

    def encode(self, mel: np.ndarray | Tensor) -> tuple[Tensor, Tensor]:
        """Map (B, n_mels, T) normalized log-mel input to (mu, logvar)."""
        mel = Tensor._lift(mel)
        if mel.ndim != 3:
            raise ValueError("encode expects a batched (B, n_mels, T) input")
        if mel.shape[2] < STRIDE_PRODUCT:
            raise ValueError(f"mel input needs at least {STRIDE_PRODUCT} frames, got {mel.shape[2]}")
        return self.encoder(mel)

    def decode(self, z: np.ndarray | Tensor, target_rate: int | None = None) -> Tensor:
        """Decode latents (B, C, F) to waveforms at the full-band rate."""
        cfg = self.config
        if target_rate is None:
            target_rate = cfg.sample_rate
        if target_rate != cfg.sample_rate:
            raise ValueError(
                f"unsupported target_rate {target_rate}; this decoder emits {cfg.sample_rate} Hz"
            )
        return self.decoder(Tensor._lift(z), cfg.n_out)

    def encode_buffer(self, audio: AudioBuffer) -> LatentSequence:
        """Deterministic (mu) latent for one waveform."""
        mel = mel_input_for(audio, self.config)
        mu, _ = self.encode(mel[None])
        return LatentSequence(mu.data[0], self.config.latent_frame_rate)

    def decode_latent(self, latent: LatentSequence) -> AudioBuffer:
        wav = self.decode(latent.values[None])
        return AudioBuffer(wav.data[0], self.config.sample_rate)

    def reconstruct(self, audio: AudioBuffer) -> AudioBuffer:
        return self.decode_latent(self.encode_buffer(audio))

    # -- training loss -----------------------------------------------------------

    def target_transforms(self, target_wav: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Precompute the constant target-side loss features (log-mel, slope)."""
        target = Tensor(target_wav)
        return self._mel_loss(target).data, self._slope(target).data

    def reconstruction_terms(self, pred_wav: Tensor, target_wav: np.ndarray,
                             target_mel: np.ndarray | None = None,
                             target_slope: np.ndarray | None = None) -> tuple[Tensor, Tensor]:
        """Mel-domain L1 and decay-slope L1 between prediction and target."""
        if target_mel is None or target_slope is None:
            target_mel, target_slope = self.target_transforms(target_wav)
        recon = (self._mel_loss(pred_wav) - Tensor(target_mel)).abs().mean()
        rt60 = (self._slope(pred_wav) - Tensor(target_slope)).abs().mean()
        return recon, rt60

    def loss(self, mel_in: np.ndarray, target_wav: np.ndarray,
             rng: np.random.Generator,
             discriminator: "Discriminator | None" = None,
             target_mel: np.ndarray | None = None,
             target_slope: np.ndarray | None = None) -> dict:
        """Full VAE loss on a batch; returns the total Tensor plus components."""
        if mel_in.shape[0] == 0:
            raise ValueError("empty batch")
        cfg = self.config
        mu, logvar = self.encode(mel_in)
        z = reparameterize(mu, logvar, rng)
        pred = self.decode(z)
        recon, rt60 = self.reconstruction_terms(pred, target_wav, target_mel, target_slope)
        kl = kl_divergence(mu, logvar)
        total = cfg.mel_loss_weight * recon + cfg.rt60_loss_weight * rt60 + cfg.beta * kl
        out = {"total": total, "recon_mel": recon, "rt60_mae": rt60, "kl": kl, "pred": pred}
        if discriminator is not None:
            score_fake, feats_fake = discriminator(pred)
            score_real, feats_real = discriminator(Tensor(target_wav))
            gan = hinge_gan_losses(score_real, score_fake)
            fm = feature_matching_loss([f.detach() for f in feats_real], feats_fake)
            out["adv"] = gan["loss_g"]
            out["fm"] = fm
            out["total"] = out["total"] + cfg.adv_weight * gan["loss_g"] + cfg.fm_weight * fm
        return out


def vae_loss(batch: dict, model: RirVae, rng: np.random.Generator,
             config: VaeConfig | None = None,
             discriminator: Discriminator | None = None) -> dict:
    """Loss over a batch dict {"mel_in": (B, M, T), "target_wav": (B, L)}."""
    if config is not None and config is not model.config:
        raise ValueError("config must be the model's own config")
    return model.loss(batch["mel_in"], batch["target_wav"], rng, discriminator)


@dataclass
class VaeTrainResult:
    checkpoint_path: Path
    log_path: Path
    holdout_ids: list[str]
    final_loss: float


def _entry_rate_mels(wav: AudioBuffer, config: VaeConfig) -> dict[int, np.ndarray]:
    out = {}
    for rate, _ in config.rate_dropout:
        limited = dsp.band_limit(wav, rate)
        out[rate] = mel_input_for(limited, config)
    return out


def train_vae(manifest, config: VaeConfig, seed: int, out_dir,
              progress: bool = False) -> VaeTrainResult:
    """Train the VAE on a dataset manifest and write checkpoint + JSONL log.

    Every iteration draws a fresh effective sample rate per item from the
    configured dropout set; the reconstruction target is always full-band.
    Fully deterministic for a fixed seed.
    """
    from .audio import read_wav  # local import to keep module load light
    from .dataset import DatasetManifest

    if isinstance(manifest, (str, Path)):
        manifest = DatasetManifest.load(manifest)
    entries = manifest.entries
    if not entries:
        raise ValueError("manifest has no entries")

    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(seed)

    rates = [r for r, _ in config.rate_dropout]
    probs = np.array([p for _, p in config.rate_dropout])

    targets = np.zeros((len(entries), config.n_out))
    mels = {r: [] for r in rates}
    for i, entry in enumerate(entries):
        wav = read_wav(manifest.wav_file(entry))
        if wav.sample_rate != config.sample_rate:
            raise ValueError(f"entry {entry.id}: rate {wav.sample_rate} != config {config.sample_rate}")
        x = wav.samples[: config.n_out]
        if len(x) < config.n_out:
            x = np.pad(x, (0, config.n_out - len(x)))
        buf = AudioBuffer(x, config.sample_rate)
        targets[i] = buf.samples
        for rate, mel in _entry_rate_mels(buf, config).items():
            mels[rate].append(mel)
    mels = {r: np.stack(v) for r, v in mels.items()}

    model = RirVae(config, np.random.default_rng(seed + 1))
    tgt_mel, tgt_slope = model.target_transforms(targets)

    order = rng.permutation(len(entries))
    n_hold = int(np.ceil(config.holdout_frac * len(entries))) if config.holdout_frac > 0 else 0
    holdout = order[:n_hold]
    train_ids = order[n_hold:] if n_hold else order

    params = model.parameters()
    opt = Adam(params, lr=config.lr)
    disc = None
    disc_opt = None
    if config.adversarial:
        disc = Discriminator(np.random.default_rng(seed + 2))
        disc_opt = Adam(disc.parameters(), lr=config.lr)

    log_path = out_dir / "vae_train_log.jsonl"
    final_loss = float("nan")
    with open(log_path, "w", encoding="utf-8") as log:
        for step in range(config.steps):
            idx = train_ids[rng.integers(len(train_ids), size=config.batch_size)]
            rate_draw = rng.choice(len(rates), size=config.batch_size, p=probs)
            mel_in = np.stack([mels[rates[r]][i] for r, i in zip(rate_draw, idx)])
            target = targets[idx]

            if disc is not None:
                # discriminator update on detached fakes
                mu, logvar = model.encode(mel_in)
                z = reparameterize(mu, logvar, rng)
                fake = model.decode(z).detach()
                s_real, _ = disc(Tensor(target))
                s_fake, _ = disc(fake)
                d_losses = hinge_gan_losses(s_real, s_fake)
                disc.zero_grad()
                d_losses["loss_d"].backward()
                disc_opt.step()

            losses = model.loss(mel_in, target, rng, discriminator=disc,
                                target_mel=tgt_mel[idx], target_slope=tgt_slope[idx])
            model.zero_grad()
            if disc is not None:
                disc.zero_grad()
            losses["total"].backward()
            opt.step()

            final_loss = losses["total"].item()
            if step % config.log_every == 0 or step == config.steps - 1:
                record = {"step": step,
                          "total": losses["total"].item(),
                          "recon_mel": losses["recon_mel"].item(),
                          "rt60_mae": losses["rt60_mae"].item(),
                          "kl": losses["kl"].item()}
                if "adv" in losses:
                    record["adv"] = losses["adv"].item()
                    record["fm"] = losses["fm"].item()
                log.write(json.dumps(record) + "\n")
                if progress:
                    print(f"[vae] step {step}: total={record['total']:.4f}")

    ckpt_path = out_dir / "vae.rvfg"
    save_checkpoint(ckpt_path, model.state_dict())
    return VaeTrainResult(
        checkpoint_path=ckpt_path,
        log_path=log_path,
        holdout_ids=[entries[i].id for i in holdout],
        final_loss=final_loss,
    )


def load_vae(path, config: VaeConfig) -> RirVae:
    model = RirVae(config, np.random.default_rng(0))
    state = load_checkpoint(path)
    model.load_state_dict({k: v.astype(np.float64) for k, v in state.items()})
    return model
