"""Latent diffusion: noise schedule, conditional denoiser, DDIM sampling.

The generator works in the autoencoder's unit-scale latent space.  A linear
beta schedule defines the forward corruption process; the denoiser is a small
conv stack with one cross-attention block that reads the caption embedding at
the bottleneck.  Reverse sampling is deterministic (eta = 0) over a short
subsequence of timesteps, and every step is built from differentiable tensor
ops so the whole draft image can be optimised with respect to the condition
and the initial noise.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from . import tensor_io
from .errors import ContractError
from .optim import Adam
from .tensor import Tape, Tensor, backward

DEFAULT_STEPS = 50
DEFAULT_BETA_START = 1e-4
DEFAULT_BETA_END = 0.02
DEFAULT_SAMPLE_STEPS = 10


@dataclass(frozen=True)
class NoiseSchedule:
    """Linear beta schedule with the convention alpha_bar[0] == 1."""

    betas: np.ndarray       # [T], betas[i] applies at timestep i + 1
    alphas: np.ndarray      # [T]
    alpha_bars: np.ndarray  # [T + 1], cumulative product prefixed with 1

    @property
    def n_steps(self) -> int:
        return len(self.betas)


def make_schedule(n_steps: int = DEFAULT_STEPS,
                  beta_start: float = DEFAULT_BETA_START,
                  beta_end: float = DEFAULT_BETA_END) -> NoiseSchedule:
    if n_steps < 1:
        raise ContractError(f"schedule needs at least one step, got {n_steps}")
    if not (0.0 < beta_start <= beta_end < 1.0):
        raise ContractError(
            f"betas must satisfy 0 < start <= end < 1, got ({beta_start}, {beta_end})"
        )
    betas = np.linspace(beta_start, beta_end, n_steps)
    alphas = 1.0 - betas
    alpha_bars = np.concatenate([[1.0], np.cumprod(alphas)])
    return NoiseSchedule(betas=betas, alphas=alphas, alpha_bars=alpha_bars)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def forward_diffuse(z0, t: int, eps, schedule: NoiseSchedule) -> Tensor:
    """Closed-form corruption: sqrt(ab_t) z0 + sqrt(1 - ab_t) eps."""
    if not (0 <= t <= schedule.n_steps):
        raise ContractError(f"timestep {t} outside 0..{schedule.n_steps}")
    z0 = _as_tensor(z0)
    eps = _as_tensor(eps)
    if z0.shape != eps.shape:
        raise ContractError(f"noise shape {eps.shape} != signal shape {z0.shape}")
    ab = float(schedule.alpha_bars[t])
    return T.add(T.scale(z0, math.sqrt(ab)), T.scale(eps, math.sqrt(1.0 - ab)))


def cross_attention(queries: Tensor, context: Tensor, wq: Tensor, wk: Tensor,
                    wv: Tensor) -> Tensor:
    """Scaled dot-product attention of queries [n,dm] over context [s,dc].

    Returns softmax(Q K^T / sqrt(dk)) V with Q = queries wq, K = context wk,
    V = context wv.
    """
    if queries.ndim != 2 or context.ndim != 2:
        raise ContractError("attention expects 2-D queries and context")
    if wq.shape[1] != wk.shape[1]:
        raise ContractError(
            f"query/key widths differ: {wq.shape[1]} vs {wk.shape[1]}"
        )
    q = T.matmul(queries, wq)
    k = T.matmul(context, wk)
    v = T.matmul(context, wv)
    scores = T.scale(T.matmul(q, T.transpose(k)), 1.0 / math.sqrt(wq.shape[1]))
    return T.matmul(T.softmax(scores, axis=-1), v)


class Denoiser:
    """Conditional epsilon predictor on [4,8,8] latents.

    Two strided conv stages with a learned timestep-embedding channel bias,
    a cross-attention read of the caption embedding at the 4x4 bottleneck,
    then an upsampling merge back to latent resolution.
    """

    WIDTH = 32

    def __init__(self, schedule_steps: int = DEFAULT_STEPS, cond_dim: int = 32,
                 latent_channels: int = 4, seed: int = 0):
        self.schedule_steps = int(schedule_steps)
        self.cond_dim = int(cond_dim)
        self.latent_channels = int(latent_channels)
        self.seed = int(seed)
        w = self.WIDTH
        rng = np.random.default_rng(np.random.PCG64(seed))

        def conv(cout, cin):
            data = rng.normal(size=(cout, cin, 3, 3)) * math.sqrt(2.0 / (cin * 9))
            return (Tensor(data, requires_grad=True),
                    Tensor(np.zeros(cout), requires_grad=True))

        def mat(rows, cols):
            data = rng.normal(size=(rows, cols)) / math.sqrt(rows)
            return Tensor(data, requires_grad=True)

        self.in_w, self.in_b = conv(w, latent_channels)
        self.down_w, self.down_b = conv(w, w)
        self.mid_w, self.mid_b = conv(w, w)
        self.up_w, self.up_b = conv(w, 2 * w)
        self.out_w, self.out_b = conv(latent_channels, w)
        self.attn_q = mat(w, w)
        self.attn_k = mat(cond_dim, w)
        self.attn_v = mat(cond_dim, w)
        self.temb = Tensor(rng.normal(size=(schedule_steps + 1, w)) * 0.1,
                           requires_grad=True)

    def parameters(self) -> list[Tensor]:
        return [self.in_w, self.in_b, self.down_w, self.down_b, self.mid_w,
                self.mid_b, self.up_w, self.up_b, self.out_w, self.out_b,
                self.attn_q, self.attn_k, self.attn_v, self.temb]

    def predict(self, z_t, t: int, cond) -> Tensor:
        """Estimate the noise component of ``z_t`` at timestep ``t``."""
        if not (0 <= t <= self.schedule_steps):
            raise ContractError(f"timestep {t} outside 0..{self.schedule_steps}")
        z_t = _as_tensor(z_t)
        cond = _as_tensor(cond)
        if z_t.ndim != 3 or z_t.shape[0] != self.latent_channels:
            raise ContractError(f"latent must be [{self.latent_channels},h,w], got {z_t.shape}")
        if cond.ndim != 2 or cond.shape[1] != self.cond_dim:
            raise ContractError(f"condition must be [s,{self.cond_dim}], got {cond.shape}")
        tvec = T.slice_(self.temb, (t, slice(None)))
        h1 = T.leaky_relu(T.conv2d(z_t, self.in_w, self.in_b, stride=1, padding=1))
        h1 = T.add_channel(h1, tvec)
        h2 = T.leaky_relu(T.conv2d(h1, self.down_w, self.down_b, stride=2, padding=1))
        h2 = T.add_channel(h2, tvec)
        c, hh, ww = h2.shape
        flat = T.transpose(T.reshape(h2, (c, hh * ww)))
        att = cross_attention(flat, cond, self.attn_q, self.attn_k, self.attn_v)
        h2 = T.add(h2, T.reshape(T.transpose(att), (c, hh, ww)))
        h3 = T.leaky_relu(T.conv2d(h2, self.mid_w, self.mid_b, stride=1, padding=1))
        u = T.concat([T.upsample2(h3), h1], axis=0)
        h4 = T.leaky_relu(T.conv2d(u, self.up_w, self.up_b, stride=1, padding=1))
        return T.conv2d(h4, self.out_w, self.out_b, stride=1, padding=1)

    def save(self, path) -> None:
        names = ["in_w", "in_b", "down_w", "down_b", "mid_w", "mid_b", "up_w",
                 "up_b", "out_w", "out_b", "attn_q", "attn_k", "attn_v", "temb"]
        tensor_io.write_checkpoint(
            path,
            {"kind": "denoiser", "seed": self.seed,
             "schedule_steps": self.schedule_steps, "cond_dim": self.cond_dim,
             "latent_channels": self.latent_channels},
            {n: getattr(self, n).data for n in names},
        )

    @classmethod
    def load(cls, path) -> "Denoiser":
        header, tensors = tensor_io.read_checkpoint(path)
        if header.get("kind") != "denoiser":
            raise ContractError(f"not a denoiser checkpoint: {path}")
        model = cls(schedule_steps=int(header["schedule_steps"]),
                    cond_dim=int(header["cond_dim"]),
                    latent_channels=int(header["latent_channels"]),
                    seed=int(header.get("seed", 0)))
        for name, arr in tensors.items():
            getattr(model, name).data[...] = arr
        return model


@dataclass
class TrainingTrace:
    epoch_losses: list[float]

    @property
    def final_loss(self) -> float:
        return self.epoch_losses[-1]


def train_denoiser(model: Denoiser, schedule: NoiseSchedule, latents, conditions,
                   epochs: int = 20, lr: float = 2e-3, seed: int = 0) -> TrainingTrace:
    """Noise-prediction training, one (latent, caption) pair per optimiser step.

    Each step draws a uniform timestep and fresh gaussian noise, corrupts the
    latent with the closed-form forward process, and regresses the predicted
    noise onto the true noise.
    """
    if len(latents) != len(conditions) or not latents:
        raise ContractError("need equally many latents and conditions, at least one")
    if schedule.n_steps != model.schedule_steps:
        raise ContractError(
            f"schedule has {schedule.n_steps} steps, model expects {model.schedule_steps}"
        )
    zs = [np.asarray(z.data if isinstance(z, Tensor) else z, dtype=np.float64)
          for z in latents]
    cs = [_as_tensor(c) for c in conditions]
    rng = np.random.default_rng(np.random.PCG64(seed))
    opt = Adam(model.parameters(), lr=lr)
    epoch_losses = []
    for _ in range(int(epochs)):
        order = rng.permutation(len(zs))
        total = 0.0
        for i in order:
            t = int(rng.integers(1, schedule.n_steps + 1))
            eps = rng.standard_normal(zs[i].shape)
            z_t = forward_diffuse(zs[i], t, eps, schedule)
            tape = Tape()
            with tape:
                loss = T.mse(model.predict(z_t, t, cs[i]), Tensor(eps))
            backward(loss)
            opt.step()
            total += loss.item()
            tape.clear()
        epoch_losses.append(total / len(zs))
    return TrainingTrace(epoch_losses)


def sample_taus(t_start: int, n_steps: int) -> list[int]:
    """Strictly decreasing integer timesteps from t_start down to 0."""
    if t_start < 1:
        raise ContractError(f"t_start must be >= 1, got {t_start}")
    if not (1 <= n_steps <= t_start):
        raise ContractError(f"n_steps must be in 1..{t_start}, got {n_steps}")
    taus = np.unique(np.linspace(0, t_start, n_steps + 1).round().astype(int))
    return [int(t) for t in taus[::-1]]


def reverse_sample(model: Denoiser, schedule: NoiseSchedule, cond, z_init,
                   t_start: int | None = None,
                   n_steps: int = DEFAULT_SAMPLE_STEPS) -> Tensor:
    """Deterministic reverse diffusion from ``z_init`` at ``t_start`` to z0.

    Implements the eta = 0 update: each step predicts the noise, forms the
    implied clean latent, and re-noises it to the next (smaller) timestep,
    which at timestep 0 reduces to the clean estimate itself.
    """
    t_start = schedule.n_steps if t_start is None else int(t_start)
    if t_start > schedule.n_steps:
        raise ContractError(
            f"t_start {t_start} exceeds schedule length {schedule.n_steps}"
        )
    taus = sample_taus(t_start, n_steps)
    z = _as_tensor(z_init)
    cond = _as_tensor(cond)
    for t, s in zip(taus, taus[1:]):
        eps_hat = model.predict(z, t, cond)
        ab_t = float(schedule.alpha_bars[t])
        ab_s = float(schedule.alpha_bars[s])
        z0_hat = T.scale(T.sub(z, T.scale(eps_hat, math.sqrt(1.0 - ab_t))),
                         1.0 / math.sqrt(ab_t))
        z = T.add(T.scale(z0_hat, math.sqrt(ab_s)),
                  T.scale(eps_hat, math.sqrt(1.0 - ab_s)))
    return z


class DiffusionGenerator:
    """Bundles denoiser, schedule and autoencoder into image generation."""

    def __init__(self, model: Denoiser, schedule: NoiseSchedule, autoencoder,
                 n_steps: int = DEFAULT_SAMPLE_STEPS):
        self.model = model
        self.schedule = schedule
        self.autoencoder = autoencoder
        self.n_steps = int(n_steps)

    def generate(self, cond, z_init, t_start: int | None = None) -> Tensor:
        """Decode the denoised latent into a clipped [3,H,W] image."""
        z0 = reverse_sample(self.model, self.schedule, cond, z_init,
                            t_start=t_start, n_steps=self.n_steps)
        return T.clamp01(self.autoencoder.from_latent(z0))
