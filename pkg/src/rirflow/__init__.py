"""rirflow: text-conditioned room impulse response synthesis at desk scale.

Two-stage generative pipeline (waveform VAE latent codec + conditional
rectified flow matching) plus the machinery around it: image-source room
simulation, Schroeder RT60 estimation, Griffin-Lim baselines, prompt
synthesis, embedding metrics, and an evaluation harness.
"""

from .audio import AudioBuffer, read_wav, write_wav
from .acoustics import (RoomSpec, Rt60Estimate, estimate_rt60, image_source_rir,
                        sabine_rt60, schroeder_edc, suggest_max_order)
from .dataset import (BUCKET_TARGETS, DatasetConfig, DatasetManifest, ManifestEntry,
                      RoomRanges, bucket_for, build_dataset)
from .dsp import (Fidelity, MelFilterbank, Spectrogram, band_limit, convolve,
                  fidelity, griffin_lim, istft, log_mel, mel_filterbank,
                  mel_project, spectral_convergence, stft)
from .flow import (Conditioning, FlowConfig, SampleResult, VelocityTransformer,
                   cfg_velocity, condition_dropout, cosine_reparam, fm_loss,
                   interpolate_path, load_flow, sample, sample_adaptive_midpoint,
                   sample_euler, train_flow)
from .judge import JudgeVerdict, VoteResult, majority_vote, parse_judge_verdict
from .prompts import synthesize_prompts
from .report import (EvalReport, generation_report, reconstruction_report,
                     rt60_error_stats, timing)
from .text import (EmbeddingSequence, StructuredCaption, batch_diversity,
                   classify_acoustic_heuristic, embed_text, embedding_richness,
                   pool, semantic_separation)
from .vae import (LatentSequence, RirVae, VaeConfig, feature_matching_loss,
                  hinge_gan_losses, kl_divergence, load_vae, reparameterize,
                  train_vae, vae_loss)

__version__ = "0.1.0"
