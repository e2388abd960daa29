"""Conditional rectified flow matching over latent sequences.

A transformer velocity field v(x_t, t, c) is trained so that straight-line
interpolations x_t = (1-t) x0 + t x1 between Gaussian noise and data satisfy
dx/dt = v. The training objective is a coordinate-wise pseudo-Huber penalty
on the velocity residual; conditioning is dropped to a learned unconditional
embedding with fixed probability so classifier-free guidance works at
sampling time. Sampling integrates the ODE with either fixed-step Euler or
an adaptive midpoint (RK2) scheme with step-doubling error control under a
hard budget of velocity-field evaluations.

Time is reparameterized by tau(t) = (1 - cos(pi t)) / 2 during both training
and sampling when the cosine schedule is selected.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .autograd import Tensor, gelu, layer_norm
from .checkpoint import load_checkpoint, save_checkpoint
from .nn import Linear, Mlp, Module, SelfAttention, positional_encoding, sinusoid_features
from .optim import Adam

MODEL_SCALE_TABLE = {
    "S": (12, 512, 8),
    "B": (16, 768, 12),
    "L": (24, 1024, 16),
    "XL": (32, 1536, 24),
}


@dataclass
class FlowConfig:
    depth: int = 4
    hidden_size: int = 128
    num_heads: int = 4
    latent_dim: int = 16
    seq_len: int = 11
    cond_dim: int = 256
    delta: float = 1.0
    cond_dropout_p: float = 0.2
    cfg_scale: float = 6.0
    sampler: str = "adaptive_midpoint"  # or "euler"
    rtol: float = 1e-5
    atol: float = 1e-5
    max_nfe: int = 50
    euler_steps: int = 32
    time_reparam: str = "cosine"  # or "identity"
    time_embed_dim: int = 64
    # training
    steps: int = 4000
    batch_size: int = 32
    lr: float = 2e-3
    log_every: int = 50

    def __post_init__(self):
        if self.hidden_size % self.num_heads:
            raise ValueError(f"hidden_size {self.hidden_size} not divisible by {self.num_heads} heads")
        if not 0.0 <= self.cond_dropout_p < 1.0:
            raise ValueError("cond_dropout_p must lie in [0, 1)")
        if self.max_nfe < 2:
            raise ValueError("max_nfe must be >= 2")
        if self.sampler not in ("euler", "adaptive_midpoint"):
            raise ValueError(f"unknown sampler {self.sampler!r}")
        if self.time_reparam not in ("identity", "cosine"):
            raise ValueError(f"unknown time_reparam {self.time_reparam!r}")


@dataclass
class Conditioning:
    """A pooled text embedding, or the learned unconditional stand-in."""

    text_embedding: np.ndarray
    uncond_flag: bool = False

    def __post_init__(self):
        self.text_embedding = np.asarray(self.text_embedding, dtype=np.float64)
        if self.text_embedding.ndim != 1:
            raise ValueError("conditioning embedding must be a vector")


# -- the four formula-level ops -------------------------------------------------


def interpolate_path(x0, x1, t: float):
    """Straight-line point x_t = (1-t) x0 + t x1 and its constant velocity."""
    x0 = np.asarray(x0, dtype=np.float64)
    x1 = np.asarray(x1, dtype=np.float64)
    if x0.shape != x1.shape:
        raise ValueError(f"endpoint shape mismatch: {x0.shape} vs {x1.shape}")
    if not 0.0 <= t <= 1.0:
        raise ValueError(f"t must lie in [0, 1], got {t}")
    return (1.0 - t) * x0 + t * x1, x1 - x0


def fm_loss(v_pred, x0, x1, delta: float = 1.0):
    """Coordinate-wise pseudo-Huber flow-matching loss, mean over everything.

    L(z) = delta^2 (sqrt(1 + (z / delta)^2) - 1) applied to the velocity
    residual z = v_pred - (x1 - x0). Accepts Tensors (differentiable) or
    arrays (returns a float).
    """
    if delta <= 0:
        raise ValueError("delta must be positive")
    tensor_mode = isinstance(v_pred, Tensor)
    v_pred = Tensor._lift(v_pred)
    x0 = Tensor._lift(x0)
    x1 = Tensor._lift(x1)
    if v_pred.shape != x0.shape or x0.shape != x1.shape:
        raise ValueError("fm_loss operands must share one shape")
    z = v_pred - (x1 - x0)
    scaled = z * (1.0 / delta)
    loss = ((scaled * scaled + 1.0).sqrt() - 1.0).mean() * (delta * delta)
    return loss if tensor_mode else float(loss.data)


def cosine_reparam(t):
    """tau(t) = (1 - cos(pi t)) / 2, a monotone bijection of [0, 1]."""
    arr = np.asarray(t, dtype=np.float64)
    if np.any(arr < 0.0) or np.any(arr > 1.0):
        raise ValueError("t must lie in [0, 1]")
    tau = 0.5 * (1.0 - np.cos(np.pi * arr))
    return float(tau) if np.isscalar(t) or arr.ndim == 0 else tau


def condition_dropout(c: Conditioning, p: float, rng: np.random.Generator,
                      learned_uncond: np.ndarray) -> Conditioning:
    """With probability p, replace c by the learned unconditional embedding."""
    if not 0.0 <= p < 1.0:
        raise ValueError("p must lie in [0, 1)")
    if rng.random() < p:
        return Conditioning(np.asarray(learned_uncond, dtype=np.float64).copy(), uncond_flag=True)
    return c


def cfg_velocity(v_uncond, v_cond, scale: float):
    """Classifier-free guided velocity: v_u + scale * (v_c - v_u)."""
    v_uncond = np.asarray(v_uncond, dtype=np.float64)
    v_cond = np.asarray(v_cond, dtype=np.float64)
    if v_uncond.shape != v_cond.shape:
        raise ValueError("cfg_velocity operands must share one shape")
    return v_uncond + scale * (v_cond - v_uncond)


# -- velocity transformer ---------------------------------------------------------


class AdaLnBlock(Module):
    """Transformer block whose layer norms are modulated by (t, c) embeddings.

    The modulation projection is zero-initialized so every block starts as
    the identity map.
    """

    def __init__(self, hidden: int, heads: int, rng: np.random.Generator):
        self.attn = SelfAttention(hidden, heads, rng)
        self.mlp = Mlp(hidden, 4 * hidden, rng)
        self.mod = Linear(hidden, 6 * hidden, rng, zero_init=True)

    def __call__(self, x: Tensor, emb: Tensor) -> Tensor:
        b, t, h = x.shape
        mod = self.mod(gelu(emb)).reshape(b, 1, 6 * h).expand(b, t, 6 * h)
        shift_a = mod[:, :, 0 * h:1 * h]
        scale_a = mod[:, :, 1 * h:2 * h]
        gate_a = mod[:, :, 2 * h:3 * h]
        shift_m = mod[:, :, 3 * h:4 * h]
        scale_m = mod[:, :, 4 * h:5 * h]
        gate_m = mod[:, :, 5 * h:6 * h]
        a_in = layer_norm(x) * (scale_a + 1.0) + shift_a
        x = x + gate_a * self.attn(a_in)
        m_in = layer_norm(x) * (scale_m + 1.0) + shift_m
        return x + gate_m * self.mlp(m_in)


class VelocityTransformer(Module):
    """Transformer velocity field over (B, C, F) latent sequences.

    Latent frames are the tokens; time enters through sinusoidal features
    and the pooled text embedding through a linear projection, both summed
    into the modulation signal. The final projection is zero-initialized,
    so an untrained model is exactly the zero field.
    """

    def __init__(self, config: FlowConfig, rng: np.random.Generator | None = None):
        if rng is None:
            rng = np.random.default_rng(0)
        self.config = config
        h = config.hidden_size
        self.in_proj = Linear(config.latent_dim, h, rng)
        self.t_proj = Mlp(h, 2 * h, rng)
        self.t_lift = Linear(config.time_embed_dim, h, rng)
        self.c_proj = Linear(config.cond_dim, h, rng)
        self.uncond = Tensor(rng.normal(0.0, 0.02, size=config.cond_dim), requires_grad=True)
        self.blocks = [AdaLnBlock(h, config.num_heads, rng) for _ in range(config.depth)]
        self.final_mod = Linear(h, 2 * h, rng, zero_init=True)
        self.out_proj = Linear(h, config.latent_dim, rng, zero_init=True)
        self._posenc = positional_encoding(4096, h)

    def _embed(self, t: np.ndarray, cond: Tensor) -> Tensor:
        feats = self.t_lift(Tensor(sinusoid_features(t, self.config.time_embed_dim)))
        return feats + self.t_proj(feats) + self.c_proj(cond)

    def __call__(self, x_t, t, cond) -> Tensor:
        """v(x_t, t, c): x_t is (B, C, F), t is (B,), cond is (B, cond_dim)."""
        x_t = Tensor._lift(x_t)
        cond = Tensor._lift(cond)
        if x_t.ndim != 3:
            raise ValueError("x_t must be (batch, channels, frames)")
        if cond.shape[-1] != self.config.cond_dim:
            raise ValueError(
                f"conditioning dim {cond.shape[-1]} != configured {self.config.cond_dim}"
            )
        t = np.atleast_1d(np.asarray(t, dtype=np.float64))
        emb = self._embed(t, cond)
        tokens = x_t.swapaxes(1, 2)                    # (B, F, C)
        tokens = self.in_proj(tokens) + Tensor(self._posenc[: tokens.shape[1]])
        for block in self.blocks:
            tokens = block(tokens, emb)
        b, f, h = tokens.shape
        mod = self.final_mod(gelu(emb)).reshape(b, 1, 2 * h).expand(b, f, 2 * h)
        tokens = layer_norm(tokens) * (mod[:, :, h:] + 1.0) + mod[:, :, :h]
        return self.out_proj(tokens).swapaxes(1, 2)    # (B, C, F)

    def velocity(self, x: np.ndarray, t: float, cond_vec: np.ndarray) -> np.ndarray:
        """Forward pass without graph construction, for sampling."""
        tt = np.full(x.shape[0], t)
        cond = np.broadcast_to(cond_vec, (x.shape[0], len(cond_vec))).copy()
        return self(x, tt, cond).data


# -- samplers ----------------------------------------------------------------------


@dataclass
class SampleResult:
    latents: np.ndarray  # (B, C, F)
    nfe: int
    truncated: bool = False
    steps_taken: int = 0
    step_sizes: list = field(default_factory=list)


def _reparam_fn(name: str):
    if name == "cosine":
        return cosine_reparam
    return lambda t: t


def _guided_field(model, cond_vec: np.ndarray, uncond_vec: np.ndarray,
                  cfg_scale: float):
    """Returns (field(x, t) -> velocity, evals_per_call)."""

    def field(x, t):
        v_c = model.velocity(x, t, cond_vec)
        if cfg_scale == 1.0:
            return v_c
        v_u = model.velocity(x, t, uncond_vec)
        return cfg_velocity(v_u, v_c, cfg_scale)

    return field, (1 if cfg_scale == 1.0 else 2)


def sample_euler(model, cond: Conditioning | np.ndarray, steps: int,
                 rng: np.random.Generator, cfg_scale: float | None = None,
                 batch: int = 1, shape: tuple[int, int] | None = None) -> SampleResult:
    """Fixed-step Euler on reparameterized time, with CFG per step."""
    if steps < 1:
        raise ValueError("steps must be >= 1")
    cfg = model.config
    if cfg_scale is None:
        cfg_scale = cfg.cfg_scale
    shape = shape or (cfg.latent_dim, cfg.seq_len)
    cond_vec = cond.text_embedding if isinstance(cond, Conditioning) else np.asarray(cond)
    reparam = _reparam_fn(cfg.time_reparam)
    field, per_call = _guided_field(model, cond_vec, model.uncond.data, cfg_scale)

    x = rng.standard_normal((batch, *shape))
    nfe = 0
    grid = np.linspace(0.0, 1.0, steps + 1)
    for i in range(steps):
        tau0, tau1 = reparam(grid[i]), reparam(grid[i + 1])
        v = field(x, tau0)
        nfe += per_call
        x = x + (tau1 - tau0) * v
    return SampleResult(latents=x, nfe=nfe, steps_taken=steps)


def sample_adaptive_midpoint(model, cond: Conditioning | np.ndarray,
                             rng: np.random.Generator,
                             rtol: float | None = None, atol: float | None = None,
                             max_nfe: int | None = None,
                             cfg_scale: float | None = None,
                             batch: int = 1,
                             shape: tuple[int, int] | None = None) -> SampleResult:
    """Adaptive midpoint (RK2) integration with step-doubling error control.

    Each trial compares one full midpoint step against two half steps; the
    error estimate ||x_two_half - x_one|| / 3 is tested against
    atol + rtol * ||x||, and the step factor is clipped to [0.2, 5.0].
    The evaluation budget is enforced strictly: when it can no longer cover
    another trial plus the cheapest completion, the remaining span is
    finished with un-adapted midpoint or Euler steps and the result is
    flagged truncated if error control had to be abandoned.
    """
    cfg = model.config
    rtol = cfg.rtol if rtol is None else rtol
    atol = cfg.atol if atol is None else atol
    max_nfe = cfg.max_nfe if max_nfe is None else max_nfe
    if cfg_scale is None:
        cfg_scale = cfg.cfg_scale
    shape = shape or (cfg.latent_dim, cfg.seq_len)
    cond_vec = cond.text_embedding if isinstance(cond, Conditioning) else np.asarray(cond)
    reparam = _reparam_fn(cfg.time_reparam)
    field, per_call = _guided_field(model, cond_vec, model.uncond.data, cfg_scale)

    x = rng.standard_normal((batch, *shape))
    s = 0.0
    h = 0.25
    nfe = 0
    steps = 0
    truncated = False
    sizes: list[float] = []

    def rms(a):
        return float(np.sqrt(np.mean(a * a)))

    def midpoint_step(x0, s0, dt, k1=None):
        """One midpoint step over reparameterized time [s0, s0+dt]; 2 evals."""
        nonlocal nfe
        tau0, tau_mid, tau1 = reparam(s0), reparam(s0 + dt / 2), reparam(s0 + dt)
        if k1 is None:
            k1 = field(x0, tau0)
            nfe += per_call
        x_mid = x0 + (tau_mid - tau0) * k1
        k2 = field(x_mid, tau_mid)
        nfe += per_call
        return x0 + (tau1 - tau0) * k2, k1

    trial_cost = 5 * per_call       # shared k1 + full-step mid + two half steps
    while s < 1.0 - 1e-12:
        h = min(h, 1.0 - s)
        if nfe + trial_cost + 2 * per_call > max_nfe:
            break
        k1 = field(x, reparam(s))
        nfe += per_call
        x_full, _ = midpoint_step(x, s, h, k1=k1)      # +1 eval
        x_half, _ = midpoint_step(x, s, h / 2, k1=k1)  # +1 eval
        x_two, _ = midpoint_step(x_half, s + h / 2, h / 2)  # +2 evals
        err = rms(x_two - x_full) / 3.0
        tol = atol + rtol * rms(x)
        if err <= tol:
            x = x_two
            s += h
            steps += 1
            sizes.append(h)
            factor = 5.0 if err == 0.0 else min(5.0, max(0.2, 0.9 * (tol / err) ** (1.0 / 3.0)))
            h *= factor
        else:
            h *= max(0.2, 0.9 * (tol / err) ** (1.0 / 3.0))

    if s < 1.0 - 1e-12:
        # budget bound: finish without error control
        truncated = True
        while s < 1.0 - 1e-12 and nfe + 2 * per_call <= max_nfe:
            x, _ = midpoint_step(x, s, 1.0 - s)
            sizes.append(1.0 - s)
            s = 1.0
            steps += 1
        if s < 1.0 - 1e-12 and nfe + per_call <= max_nfe:
            tau0, tau1 = reparam(s), reparam(1.0)
            v = field(x, tau0)
            nfe += per_call
            x = x + (tau1 - tau0) * v
            sizes.append(1.0 - s)
            s = 1.0
            steps += 1
    return SampleResult(latents=x, nfe=nfe, truncated=truncated,
                        steps_taken=steps, step_sizes=sizes)


def sample(model, cond, rng, config: FlowConfig | None = None, batch: int = 1,
           cfg_scale: float | None = None) -> SampleResult:
    """Dispatch to the configured sampler."""
    cfg = config or model.config
    if cfg.sampler == "euler":
        return sample_euler(model, cond, cfg.euler_steps, rng, cfg_scale=cfg_scale, batch=batch)
    return sample_adaptive_midpoint(model, cond, rng, cfg_scale=cfg_scale, batch=batch)


# -- training ---------------------------------------------------------------------


@dataclass
class FlowTrainResult:
    checkpoint_path: Path
    log_path: Path
    final_loss: float


def train_flow(latents: np.ndarray, cond_vectors, config: FlowConfig, seed: int,
               out_dir, progress: bool = False) -> FlowTrainResult:
    """Train the velocity field on (latent, conditioning) pairs.

    ``latents`` is (N, C, F); ``cond_vectors`` is (N, cond_dim) or a list of
    per-item candidate matrices (k_i, cond_dim) from which one conditioning
    vector is drawn per step. t is sampled uniformly then cosine-
    reparameterized; conditioning is dropped with the configured
    probability. Deterministic under the seed.
    """
    latents = np.asarray(latents, dtype=np.float64)
    if latents.ndim != 3 or latents.shape[0] == 0:
        raise ValueError("latents must be a non-empty (N, C, F) array")
    n = latents.shape[0]
    per_item_lists = not isinstance(cond_vectors, np.ndarray)
    if not per_item_lists:
        cond_vectors = np.asarray(cond_vectors, dtype=np.float64)
        if cond_vectors.shape[0] != n:
            raise ValueError("need one conditioning row per latent item")

    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(seed)
    model = VelocityTransformer(config, np.random.default_rng(seed + 1))
    opt = Adam(model.parameters(), lr=config.lr)
    reparam = _reparam_fn(config.time_reparam)

    log_path = out_dir / "flow_train_log.jsonl"
    final_loss = float("nan")
    with open(log_path, "w", encoding="utf-8") as log:
        for step in range(config.steps):
            idx = rng.integers(n, size=config.batch_size)
            x1 = latents[idx]
            if per_item_lists:
                cond = np.stack([
                    cond_vectors[i][rng.integers(len(cond_vectors[i]))] for i in idx
                ])
            else:
                cond = cond_vectors[idx].copy()
            drop = rng.random(config.batch_size) < config.cond_dropout_p
            x0 = rng.standard_normal(x1.shape)
            t = reparam(rng.random(config.batch_size))

            cond_t = Tensor(cond)
            if drop.any():
                keep = Tensor((~drop).astype(np.float64)[:, None])
                dropmask = Tensor(drop.astype(np.float64)[:, None])
                uncond_row = model.uncond.reshape(1, config.cond_dim).expand(
                    config.batch_size, config.cond_dim)
                cond_t = cond_t * keep + uncond_row * dropmask

            x_t = (1.0 - t)[:, None, None] * x0 + t[:, None, None] * x1
            v = model(x_t, t, cond_t)
            loss = fm_loss(v, Tensor(x0), Tensor(x1), delta=config.delta)
            model.zero_grad()
            loss.backward()
            opt.step()
            final_loss = loss.item()
            if step % config.log_every == 0 or step == config.steps - 1:
                log.write(json.dumps({"step": step, "fm_loss": final_loss}) + "\n")
                if progress:
                    print(f"[flow] step {step}: fm_loss={final_loss:.5f}")

    ckpt_path = out_dir / "flow.rvfg"
    save_checkpoint(ckpt_path, model.state_dict())
    return FlowTrainResult(checkpoint_path=ckpt_path, log_path=log_path, final_loss=final_loss)


def load_flow(path, config: FlowConfig) -> VelocityTransformer:
    model = VelocityTransformer(config, np.random.default_rng(0))
    state = load_checkpoint(path)
    model.load_state_dict({k: v.astype(np.float64) for k, v in state.items()})
    return model
