"""Feature alignment: gradient refinement of the generator inputs.

Stage 2 of reconstruction.  The caption embedding and the initial latent are
treated as free parameters and pushed by plain gradient descent so that the
generated image's early conv features match decoded (or true) feature
targets on a masked subset of dimensions.  The best iterate ever seen is
returned, not the last one.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .diffusion import forward_diffuse
from .errors import ContractError
from .optim import GradientDescent
from .tensor import Tape, Tensor, backward

ABLATIONS = ("none", "c", "z", "zclip")

DEFAULT_LR = 0.05
DEFAULT_MAX_STEPS = 100
DEFAULT_TOL = 1e-4
DEFAULT_WINDOW = 5


def structural_loss(features: dict[int, Tensor], targets: dict[int, np.ndarray],
                    masks: dict[int, np.ndarray] | None = None) -> Tensor:
    """Sum over layers of the squared L2 gap on the masked dimensions."""
    if not targets:
        raise ContractError("structural loss needs at least one target layer")
    total = None
    for layer in sorted(targets):
        if layer not in features:
            raise ContractError(f"no features computed for target layer {layer}")
        feat = features[layer]
        target = np.asarray(targets[layer], dtype=np.float64)
        if target.shape != feat.shape:
            raise ContractError(
                f"layer {layer} target shape {target.shape} != feature {feat.shape}"
            )
        if masks is not None and layer in masks:
            idx = np.asarray(masks[layer], dtype=np.int64)
            if idx.size == 0:
                raise ContractError(f"layer {layer} mask selects nothing")
            feat = T.take(feat, idx)
            target = target[idx]
        diff = T.sub(feat, Tensor(target))
        term = T.tsum(T.mul(diff, diff))
        total = term if total is None else T.add(total, term)
    return total


@dataclass
class AlignResult:
    caption: np.ndarray
    latent: np.ndarray
    image: np.ndarray
    losses: list[float] = field(repr=False)
    best_iter: int = 0

    @property
    def best_loss(self) -> float:
        return self.losses[self.best_iter]


def align(generator, encoder, caption0, latent0, targets, masks=None, *,
          layers=(1, 2, 3), t_start: int | None = None, lr: float = DEFAULT_LR,
          max_steps: int = DEFAULT_MAX_STEPS, tol: float = DEFAULT_TOL,
          window: int = DEFAULT_WINDOW,
          optimize_caption: bool = True) -> AlignResult:
    """Descend the structural loss with respect to (caption, latent).

    Stops early once the relative improvement across the last ``window``
    evaluations falls below ``tol``; a ``tol`` of zero runs all steps.
    With ``optimize_caption=False`` the caption stays frozen at its initial
    value and only the latent moves.
    """
    if max_steps < 1:
        raise ContractError(f"max_steps must be positive, got {max_steps}")
    if window < 1:
        raise ContractError(f"window must be positive, got {window}")
    c = Tensor(np.array(caption0.data if isinstance(caption0, Tensor) else caption0,
                        dtype=np.float64, copy=True), requires_grad=optimize_caption)
    z = Tensor(np.array(latent0.data if isinstance(latent0, Tensor) else latent0,
                        dtype=np.float64, copy=True), requires_grad=True)
    opt = GradientDescent([c, z] if optimize_caption else [z], lr=lr)
    losses: list[float] = []
    best = None
    for step in range(int(max_steps)):
        tape = Tape()
        with tape:
            image = generator.generate(c, z, t_start)
            feats = encoder.features(image, layers)
            loss = structural_loss(feats, targets, masks)
        value = loss.item()
        losses.append(value)
        if best is None or value < best[0]:
            best = (value, step, c.data.copy(), z.data.copy(), image.data.copy())
        if len(losses) > window:
            anchor = losses[-window - 1]
            improvement = (anchor - value) / max(abs(anchor), 1e-12)
            if improvement < tol and tol > 0.0:
                tape.clear()
                break
        backward(loss)
        opt.step()
        tape.clear()
    _, best_iter, best_c, best_z, best_img = best
    return AlignResult(caption=best_c, latent=best_z, image=best_img,
                       losses=losses, best_iter=best_iter)


@dataclass
class Reconstruction:
    draft: np.ndarray
    image: np.ndarray
    losses: list[float] = field(repr=False)
    best_iter: int = -1

    @property
    def aligned(self) -> bool:
        return bool(self.losses)


def reconstruct_item(generator, encoder, caption_emb, latent, feature_targets,
                     feature_masks=None, *, ablate: str = "none",
                     t_start: int | None = None, noise_seed: int = 0,
                     layers=(1, 2, 3), lr: float = DEFAULT_LR,
                     max_steps: int = DEFAULT_MAX_STEPS, tol: float = DEFAULT_TOL,
                     window: int = DEFAULT_WINDOW) -> Reconstruction:
    """Two-stage reconstruction of one item from its decoded quantities.

    Stage 1 renoises the decoded latent to ``t_start`` (the full schedule
    length when omitted) and samples a draft conditioned on the decoded
    caption embedding.  Stage 2 refines caption and noised latent against
    the decoded feature targets.  Ablations remove one component: "c"
    zeroes the caption and keeps it frozen through Stage 2 (otherwise the
    refinement would simply re-derive it), "z" zeroes the decoded latent
    before renoising (the noised state is still refined, since it is the
    generator's working variable), and "zclip" skips refinement entirely.
    """
    if ablate not in ABLATIONS:
        raise ContractError(f"unknown ablation {ablate!r}, pick from {ABLATIONS}")
    if t_start is None:
        t_start = generator.schedule.n_steps
    caption_emb = np.asarray(
        caption_emb.data if isinstance(caption_emb, Tensor) else caption_emb, float)
    latent = np.asarray(latent.data if isinstance(latent, Tensor) else latent, float)
    if ablate == "c":
        caption_emb = np.zeros_like(caption_emb)
    if ablate == "z":
        latent = np.zeros_like(latent)
    rng = np.random.default_rng(np.random.PCG64(noise_seed))
    eps = rng.standard_normal(latent.shape)
    z_t = forward_diffuse(latent, t_start, eps, generator.schedule).data
    draft = generator.generate(Tensor(caption_emb), Tensor(z_t), t_start).data
    if ablate == "zclip":
        return Reconstruction(draft=draft, image=draft, losses=[], best_iter=-1)
    result = align(generator, encoder, caption_emb, z_t, feature_targets,
                   feature_masks, layers=layers, t_start=t_start, lr=lr,
                   max_steps=max_steps, tol=tol, window=window,
                   optimize_caption=(ablate != "c"))
    return Reconstruction(draft=draft, image=result.image,
                          losses=result.losses, best_iter=result.best_iter)
