"""Reconstruction quality metrics.

Three per-image scores (embedding cosine, windowed SSIM, pixelwise pearson)
plus a set-level Frechet distance between embedding clouds.  All functions
take [C,H,W] float arrays in [0, 1]; shapes of compared images must match,
``resize_nearest`` is provided for callers that need to align sizes first.
"""

from __future__ import annotations

import numpy as np

from .decoder import pearson
from .errors import ContractError
from .tensor import Tensor

SSIM_WINDOW = 8
SSIM_C1 = 1e-4
SSIM_C2 = 9e-4


def _as_array(img) -> np.ndarray:
    arr = img.data if isinstance(img, Tensor) else np.asarray(img, dtype=np.float64)
    if arr.ndim != 3:
        raise ContractError(f"expected a [C,H,W] image, got shape {arr.shape}")
    return arr


def _check_pair(a, b):
    a, b = _as_array(a), _as_array(b)
    if a.shape != b.shape:
        raise ContractError(f"image shapes differ: {a.shape} vs {b.shape}")
    return a, b


def resize_nearest(img, size: int | tuple[int, int]) -> np.ndarray:
    """Nearest-neighbour resize of a [C,H,W] image to (h, w)."""
    arr = _as_array(img)
    h, w = (size, size) if isinstance(size, int) else (int(size[0]), int(size[1]))
    if h < 1 or w < 1:
        raise ContractError(f"target size must be positive, got {(h, w)}")
    _, src_h, src_w = arr.shape
    rows = (np.arange(h) * src_h) // h
    cols = (np.arange(w) * src_w) // w
    return arr[:, rows[:, None], cols[None, :]]


def clip_similarity(img_a, img_b, encoder) -> float:
    """Cosine similarity of the pooled encoder embeddings of two images.

    A zero-norm embedding makes the cosine undefined; that degenerate case
    scores 0.0 rather than raising, so batch evaluation never aborts.
    """
    a, b = _check_pair(img_a, img_b)
    ea = encoder.embed(a).data
    eb = encoder.embed(b).data
    na, nb = np.linalg.norm(ea), np.linalg.norm(eb)
    if na == 0.0 or nb == 0.0:
        return 0.0
    return float(ea @ eb / (na * nb))


def pixel_pcc(img_a, img_b) -> float:
    """Pearson correlation over all pixels and channels.

    Constant images have no variance to correlate; they score 0.0.
    """
    a, b = _check_pair(img_a, img_b)
    if np.ptp(a) == 0.0 or np.ptp(b) == 0.0:
        return 0.0
    return float(pearson(a.ravel(), b.ravel()))


def ssim(img_a, img_b, window: int = SSIM_WINDOW) -> float:
    """Mean structural similarity over dense square windows.

    Images are reduced to grayscale by channel averaging; per-window
    statistics use population normalisation.
    """
    a, b = _check_pair(img_a, img_b)
    ga, gb = a.mean(axis=0), b.mean(axis=0)
    h, w = ga.shape
    if h < window or w < window:
        raise ContractError(
            f"image {h}x{w} is smaller than the {window}x{window} ssim window"
        )
    wa = np.lib.stride_tricks.sliding_window_view(ga, (window, window))
    wb = np.lib.stride_tricks.sliding_window_view(gb, (window, window))
    mu_a = wa.mean(axis=(2, 3))
    mu_b = wb.mean(axis=(2, 3))
    var_a = (wa ** 2).mean(axis=(2, 3)) - mu_a ** 2
    var_b = (wb ** 2).mean(axis=(2, 3)) - mu_b ** 2
    cov = (wa * wb).mean(axis=(2, 3)) - mu_a * mu_b
    lum = (2 * mu_a * mu_b + SSIM_C1) / (mu_a ** 2 + mu_b ** 2 + SSIM_C1)
    struct = (2 * cov + SSIM_C2) / (var_a + var_b + SSIM_C2)
    return float((lum * struct).mean())


def _sym_sqrt(mat: np.ndarray) -> np.ndarray:
    """Square root of a symmetric PSD matrix, eigenvalues clamped at zero."""
    vals, vecs = np.linalg.eigh((mat + mat.T) / 2.0)
    return (vecs * np.sqrt(np.clip(vals, 0.0, None))) @ vecs.T


def gaussian_frechet(mean_a: np.ndarray, cov_a: np.ndarray,
                     mean_b: np.ndarray, cov_b: np.ndarray) -> float:
    """Frechet distance between two gaussians given their moments."""
    mean_a, mean_b = np.asarray(mean_a, float), np.asarray(mean_b, float)
    cov_a, cov_b = np.asarray(cov_a, float), np.asarray(cov_b, float)
    if mean_a.shape != mean_b.shape or cov_a.shape != cov_b.shape:
        raise ContractError("moment shapes disagree")
    diff = float(((mean_a - mean_b) ** 2).sum())
    root_a = _sym_sqrt(cov_a)
    inner = _sym_sqrt(root_a @ cov_b @ root_a)
    dist = diff + float(np.trace(cov_a) + np.trace(cov_b) - 2.0 * np.trace(inner))
    return max(dist, 0.0)


def fid(images_a, images_b, encoder) -> float:
    """Frechet distance between embedding clouds of two image sets.

    Needs at least emb_dim + 1 images on each side so the sample covariance
    has full support.
    """
    ea = np.stack([encoder.embed(_as_array(img)).data for img in images_a])
    eb = np.stack([encoder.embed(_as_array(img)).data for img in images_b])
    dim = ea.shape[1]
    if len(ea) < dim + 1 or len(eb) < dim + 1:
        raise ContractError(
            f"need at least {dim + 1} images per set for a {dim}-dim embedding, "
            f"got {len(ea)} and {len(eb)}"
        )
    return gaussian_frechet(ea.mean(axis=0), np.cov(ea, rowvar=False, ddof=1),
                            eb.mean(axis=0), np.cov(eb, rowvar=False, ddof=1))
