"""Fixed feature encoders and the trainable latent autoencoder.

``TextEncoder`` maps caption tokens to a zero-padded embedding block.
``VisualEncoder`` is a frozen, seeded conv stack whose early layers act as
structural feature targets and whose pooled head provides the semantic
embedding used by the similarity metrics.  ``LatentAutoencoder`` compresses
images into the small latent grid the diffusion generator operates on.
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

DEFAULT_EMBED_DIM = 32  # text embedding width (E)
DEFAULT_MAX_TOKENS = 8  # caption capacity (S_max)
DEFAULT_FINAL_DIM = 64  # pooled visual embedding width
DEFAULT_LOW_LAYERS = (1, 2, 3)  # structural feature taps, 1-based
LATENT_SHAPE = (4, 8, 8)


def _conv_init(rng, cout: int, cin: int, k: int, trainable: bool):
    w = rng.normal(size=(cout, cin, k, k)) * math.sqrt(2.0 / (cin * k * k))
    b = np.zeros(cout)
    return Tensor(w, requires_grad=trainable), Tensor(b, requires_grad=trainable)


class TextEncoder:
    """Seeded embedding table; captions come out as [max_tokens, embed_dim]."""

    def __init__(self, vocab_size: int, embed_dim: int = DEFAULT_EMBED_DIM,
                 max_tokens: int = DEFAULT_MAX_TOKENS, seed: int = 0):
        self.vocab_size = int(vocab_size)
        self.embed_dim = int(embed_dim)
        self.max_tokens = int(max_tokens)
        self.seed = int(seed)
        rng = np.random.default_rng(np.random.PCG64(seed))
        self.table = rng.normal(size=(vocab_size, embed_dim)) / math.sqrt(embed_dim)

    def encode(self, tokens: list[int]) -> Tensor:
        if len(tokens) > self.max_tokens:
            raise ContractError(
                f"caption has {len(tokens)} tokens, capacity is {self.max_tokens}"
            )
        out = np.zeros((self.max_tokens, self.embed_dim))
        for i, tok in enumerate(tokens):
            if not (0 <= tok < self.vocab_size):
                raise ContractError(f"token id {tok} outside vocabulary of {self.vocab_size}")
            out[i] = self.table[tok]
        return Tensor(out)


# stage layout: (out_channels, stride); all 3x3 kernels with 1px padding
_VISUAL_STAGES = [(4, 2), (8, 2), (16, 2), (16, 1), (32, 2), (32, 1)]

# the embedding head pools moment statistics from these taps (0 = the input
# image itself, 1 = the first conv stage) with this many angular harmonics,
# plus the channel energy ratios of the input as a colour composition block
_EMBED_TAPS = 2
_EMBED_HARMONICS = 6


def _shape_stats(tap: np.ndarray, n_harmonics: int = _EMBED_HARMONICS) -> np.ndarray:
    """Pose-tolerant moment statistics of one activation map.

    The channel-summed energy map is treated as a mass distribution around
    its own centroid, which makes every statistic translation invariant:
    normalized spread, radial kurtosis, the energy fractions inside 0.5 and
    1.2 spread radii, and the magnitudes of the first ``n_harmonics`` angular
    Fourier coefficients (rotation invariant up to the harmonic order).
    """
    e = np.sum(tap * tap, axis=0)
    mass = e.sum()
    if mass <= 1e-12:
        return np.zeros(4 + n_harmonics)
    h, w = e.shape
    ys, xs = np.mgrid[0:h, 0:w].astype(np.float64)
    cy = float((ys * e).sum() / mass)
    cx = float((xs * e).sum() / mass)
    dy = ys - cy
    dx = xs - cx
    r2 = dy * dy + dx * dx
    spread = math.sqrt(float((r2 * e).sum() / mass))
    if spread <= 1e-9:
        return np.zeros(4 + n_harmonics)
    r = np.sqrt(r2)
    kurtosis = float((r2 * r2 * e).sum() / (mass * spread**4))
    core = float(e[r <= 0.5 * spread].sum() / mass)
    body = float(e[r <= 1.2 * spread].sum() / mass)
    theta = np.arctan2(dy, dx)
    harmonics = [
        abs(complex((e * np.exp(-1j * n * theta)).sum())) / mass
        for n in range(1, n_harmonics + 1)
    ]
    return np.array([spread / max(h, w), kurtosis, core, body] + harmonics)


def _color_stats(image: np.ndarray) -> np.ndarray:
    """Unit vector of per-channel RMS energy.

    Captures the colour composition of the image while ignoring overall
    brightness and everything spatial, so it survives blur and translation
    untouched; an all-zero image gives the all-zero vector.
    """
    channel_rms = np.sqrt(np.sum(image * image, axis=(1, 2)))
    total = np.linalg.norm(channel_rms)
    if total <= 1e-12:
        return np.zeros_like(channel_rms)
    return channel_rms / total


class VisualEncoder:
    """Frozen six-stage conv pyramid with a pooled moment embedding head.

    Weights are drawn once from the seed and never trained; the encoder is a
    fixed measurement device, so identical seeds give identical features.
    Early layers keep spatial detail for structural targets.  The embedding
    head pools moment statistics (spread, radial profile, angular harmonics)
    of the input and first-stage energy maps together with the input's
    channel energy ratios, and projects them through a fixed random matrix.
    The two blocks are normalized separately and weighted equally, so the
    final embedding tracks shape identity and colour composition while
    staying tolerant to where the shape sits and how it is rotated.
    """

    def __init__(self, seed: int = 0, in_channels: int = 3,
                 final_dim: int = DEFAULT_FINAL_DIM):
        self.seed = int(seed)
        self.in_channels = int(in_channels)
        self.final_dim = int(final_dim)
        self.n_layers = len(_VISUAL_STAGES)
        rng = np.random.default_rng(np.random.PCG64(seed))
        self.stages = []
        cin = in_channels
        for cout, stride in _VISUAL_STAGES:
            w, b = _conv_init(rng, cout, cin, 3, trainable=False)
            self.stages.append((w, b, stride))
            cin = cout
        stats_dim = _EMBED_TAPS * (4 + _EMBED_HARMONICS) + in_channels
        self.head = Tensor(rng.normal(size=(stats_dim, final_dim)) / math.sqrt(stats_dim))

    def layer_dims(self, image_size: int) -> list[int]:
        """Flattened feature length per layer for a square input."""
        dims = []
        side = image_size
        for cout, stride in _VISUAL_STAGES:
            side = (side + 2 - 3) // stride + 1
            dims.append(cout * side * side)
        return dims

    def _run(self, image, upto: int):
        x = image if isinstance(image, Tensor) else Tensor(image)
        if x.ndim != 3:
            raise ContractError(f"visual encoder expects [C,H,W], got shape {x.shape}")
        taps = []
        for w, b, stride in self.stages[:upto]:
            x = T.leaky_relu(T.conv2d(x, w, b, stride=stride, padding=1))
            taps.append(x)
        return taps

    def features(self, image, layers=DEFAULT_LOW_LAYERS) -> dict[int, Tensor]:
        """Flattened activations of the requested (1-based) layers."""
        layers = sorted(set(int(l) for l in layers))
        if not layers or layers[0] < 1 or layers[-1] > self.n_layers:
            raise ContractError(f"layers must be within 1..{self.n_layers}, got {layers}")
        taps = self._run(image, upto=layers[-1])
        return {l: T.reshape(taps[l - 1], (taps[l - 1].size,)) for l in layers}

    def embed(self, image) -> Tensor:
        """Pooled final embedding of shape [final_dim].

        Concatenates two separately normalized blocks (moment statistics of
        the input and first-stage energy maps; channel energy ratios of the
        input) and applies the fixed random head.  The path is pure
        measurement (the similarity metrics never differentiate through it),
        so it runs on plain arrays; an all-zero image maps to the all-zero
        embedding.
        """
        x = image if isinstance(image, Tensor) else Tensor(image)
        taps = self._run(x, upto=_EMBED_TAPS - 1)
        maps = [x.data] + [tap.data for tap in taps]
        moments = np.concatenate([_shape_stats(m) for m in maps])
        norm = np.linalg.norm(moments)
        if norm > 1e-12:
            moments = moments / norm
        stats = np.concatenate([moments, _color_stats(x.data)]) / math.sqrt(2.0)
        return Tensor(stats @ self.head.data)


class LatentAutoencoder:
    """Small conv autoencoder between [3,32,32] images and a [4,8,8] latent.

    ``latent_scale`` is set after training so the generator can work in a
    unit-variance latent space; encode/decode themselves stay raw.
    """

    def __init__(self, seed: int = 0):
        self.seed = int(seed)
        rng = np.random.default_rng(np.random.PCG64(seed))
        self.enc1_w, self.enc1_b = _conv_init(rng, 16, 3, 3, trainable=True)
        self.enc2_w, self.enc2_b = _conv_init(rng, 32, 16, 3, trainable=True)
        self.enc3_w, self.enc3_b = _conv_init(rng, 4, 32, 3, trainable=True)
        self.dec1_w, self.dec1_b = _conv_init(rng, 32, 4, 3, trainable=True)
        self.dec2_w, self.dec2_b = _conv_init(rng, 16, 32, 3, trainable=True)
        self.dec3_w, self.dec3_b = _conv_init(rng, 3, 16, 3, trainable=True)
        self.latent_scale = 1.0

    def parameters(self) -> list[Tensor]:
        return [
            self.enc1_w, self.enc1_b, self.enc2_w, self.enc2_b, self.enc3_w, self.enc3_b,
            self.dec1_w, self.dec1_b, self.dec2_w, self.dec2_b, self.dec3_w, self.dec3_b,
        ]

    def encode(self, image) -> Tensor:
        x = image if isinstance(image, Tensor) else Tensor(image)
        if x.ndim != 3:
            raise ContractError(f"autoencoder expects [C,H,W], got {x.shape}")
        h = T.gelu(T.conv2d(x, self.enc1_w, self.enc1_b, stride=2, padding=1))
        h = T.gelu(T.conv2d(h, self.enc2_w, self.enc2_b, stride=2, padding=1))
        return T.conv2d(h, self.enc3_w, self.enc3_b, stride=1, padding=1)

    def decode(self, latent) -> Tensor:
        z = latent if isinstance(latent, Tensor) else Tensor(latent)
        if z.ndim != 3:
            raise ContractError(f"decode expects [C,h,w] latent, got {z.shape}")
        h = T.gelu(T.conv2d(z, self.dec1_w, self.dec1_b, stride=1, padding=1))
        h = T.upsample2(h)
        h = T.gelu(T.conv2d(h, self.dec2_w, self.dec2_b, stride=1, padding=1))
        h = T.upsample2(h)
        return T.conv2d(h, self.dec3_w, self.dec3_b, stride=1, padding=1)

    # scaled helpers used by the diffusion stack ---------------------------

    def to_latent(self, image) -> Tensor:
        """Encode into the unit-scale latent space the generator samples in."""
        return T.scale(self.encode(image), 1.0 / self.latent_scale)

    def from_latent(self, z) -> Tensor:
        return self.decode(T.scale(z, self.latent_scale))

    def save(self, path) -> None:
        names = ["enc1_w", "enc1_b", "enc2_w", "enc2_b", "enc3_w", "enc3_b",
                 "dec1_w", "dec1_b", "dec2_w", "dec2_b", "dec3_w", "dec3_b"]
        tensor_io.write_checkpoint(
            path,
            {"kind": "latent-autoencoder", "seed": self.seed,
             "latent_scale": self.latent_scale},
            {n: getattr(self, n).data for n in names},
        )

    @classmethod
    def load(cls, path) -> "LatentAutoencoder":
        header, tensors = tensor_io.read_checkpoint(path)
        if header.get("kind") != "latent-autoencoder":
            raise ContractError(f"not an autoencoder checkpoint: {path}")
        ae = cls(seed=int(header.get("seed", 0)))
        for name, arr in tensors.items():
            getattr(ae, name).data[...] = arr
        ae.latent_scale = float(header.get("latent_scale", 1.0))
        return ae


@dataclass
class TrainingTrace:
    epoch_losses: list[float]

    @property
    def final_loss(self) -> float:
        return self.epoch_losses[-1]


def train_autoencoder(ae: LatentAutoencoder, images: list[np.ndarray],
                      epochs: int = 8, lr: float = 2e-3, seed: int = 0) -> TrainingTrace:
    """Single-image SGD (Adam) on reconstruction MSE.

    Also calibrates ``ae.latent_scale`` to the global latent standard
    deviation over the training images so downstream diffusion sees
    roughly unit-variance latents.
    """
    if not images:
        raise ContractError("train_autoencoder needs at least one image")
    rng = np.random.default_rng(np.random.PCG64(seed))
    opt = Adam(ae.parameters(), lr=lr)
    xs = [img if isinstance(img, Tensor) else Tensor(img) for img in images]
    epoch_losses = []
    for _ in range(int(epochs)):
        order = rng.permutation(len(xs))
        total = 0.0
        for i in order:
            x = xs[i]
            tape = Tape()
            with tape:
                loss = T.mse(ae.decode(ae.encode(x)), x)
            backward(loss)
            opt.step()
            total += loss.item()
            tape.clear()
        epoch_losses.append(total / len(xs))
    flat = [ae.encode(x).data.ravel() for x in xs]
    scale = float(np.concatenate(flat).std())
    ae.latent_scale = scale if scale > 0 else 1.0
    return TrainingTrace(epoch_losses)
