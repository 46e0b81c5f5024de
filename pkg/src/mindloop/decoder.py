"""Voxel-wise ridge decoding of stimulus features from brain responses.

Each target dimension gets its own small ridge problem: voxels are ranked by
absolute Pearson correlation with that dimension over the training set, the
top ``voxels_per_target`` are kept, and weights solve

    (X_s^T X_s + lam I) w = X_s^T y

on mean-centred data; the bias restores the means at prediction time.
Cross-validated decoding accuracy (per-dimension Pearson over pooled
held-out predictions, contiguous folds) feeds the top-k% feature selection
used for the structural targets.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass

import numpy as np
import scipy.linalg

from .errors import ContractError, DegenerateDataWarning, NumericError
from .tensor import Tensor
from . import tensor_io

DEFAULT_LAMBDA = 1.0
DEFAULT_MAX_VOXELS = 500


def _as_matrix(x, name: str) -> np.ndarray:
    arr = x.data if isinstance(x, Tensor) else np.asarray(x, dtype=np.float64)
    if arr.ndim != 2:
        raise ContractError(f"{name} must be 2-D [samples, dims], got shape {arr.shape}")
    return np.asarray(arr, dtype=np.float64)


def pearson(a, b) -> float:
    """Population Pearson correlation; 0.0 (with a warning) on constant input."""
    a = np.asarray(a, dtype=np.float64).ravel()
    b = np.asarray(b, dtype=np.float64).ravel()
    if a.shape != b.shape:
        raise ContractError(f"pearson needs equal lengths, got {a.size} and {b.size}")
    if a.size < 2:
        raise ContractError("pearson needs at least two samples")
    ac = a - a.mean()
    bc = b - b.mean()
    va = float(ac @ ac)
    vb = float(bc @ bc)
    if va == 0.0 or vb == 0.0:
        warnings.warn("constant input to pearson, returning 0", DegenerateDataWarning)
        return 0.0
    r = float(ac @ bc) / math.sqrt(va * vb)
    return max(-1.0, min(1.0, r))


def _correlation_matrix(Xc: np.ndarray, Yc: np.ndarray) -> np.ndarray:
    """|corr| ranking matrix [D_x, D_t]; zero-variance columns correlate 0."""
    sx = np.sqrt(np.einsum("ij,ij->j", Xc, Xc))
    sy = np.sqrt(np.einsum("ij,ij->j", Yc, Yc))
    sx_safe = np.where(sx == 0.0, 1.0, sx)
    sy_safe = np.where(sy == 0.0, 1.0, sy)
    R = (Xc.T @ Yc) / np.outer(sx_safe, sy_safe)
    R[sx == 0.0, :] = 0.0
    R[:, sy == 0.0] = 0.0
    return R


@dataclass
class RidgeModel:
    """Per-target sparse ridge weights over selected voxels."""

    weights: np.ndarray  # [D_t, m]
    indices: np.ndarray  # [D_t, m] voxel index per weight
    bias: np.ndarray  # [D_t]
    mu_x: np.ndarray  # [D_x]
    sd_x: np.ndarray  # [D_x]
    lam: float
    voxels_per_target: int

    @property
    def n_targets(self) -> int:
        return self.weights.shape[0]

    @property
    def n_voxels(self) -> int:
        return self.mu_x.shape[0]

    def predict(self, X) -> np.ndarray:
        """Predict targets for one response vector [D_x] or a batch [N, D_x].

        Only the selected voxels of each target are ever read.
        """
        arr = X.data if isinstance(X, Tensor) else np.asarray(X, dtype=np.float64)
        single = arr.ndim == 1
        if single:
            arr = arr[None, :]
        if arr.shape[1] != self.n_voxels:
            raise ContractError(
                f"expected {self.n_voxels} voxels, got {arr.shape[1]}"
            )
        out = np.empty((arr.shape[0], self.n_targets))
        for j in range(self.n_targets):
            idx = self.indices[j]
            out[:, j] = arr[:, idx] @ self.weights[j] + self.bias[j]
        return out[0] if single else out

    def save(self, path) -> None:
        tensor_io.write_checkpoint(
            path,
            {
                "kind": "ridge-decoder",
                "lam": self.lam,
                "voxels_per_target": self.voxels_per_target,
            },
            {
                "weights": self.weights,
                "indices": self.indices.astype(np.float64),
                "bias": self.bias,
                "mu_x": self.mu_x,
                "sd_x": self.sd_x,
            },
        )

    @classmethod
    def load(cls, path) -> "RidgeModel":
        header, tensors = tensor_io.read_checkpoint(path)
        if header.get("kind") != "ridge-decoder":
            raise ContractError(f"not a ridge decoder checkpoint: {path}")
        return cls(
            weights=tensors["weights"],
            indices=tensors["indices"].astype(np.intp),
            bias=tensors["bias"],
            mu_x=tensors["mu_x"],
            sd_x=tensors["sd_x"],
            lam=float(header["lam"]),
            voxels_per_target=int(header["voxels_per_target"]),
        )


def fit_ridge(X, Y, lam: float = DEFAULT_LAMBDA, voxels_per_target: int | None = None) -> RidgeModel:
    """Fit one ridge regression per target column of Y.

    lam=0 falls back to a pivoted least-squares solve, which reproduces the
    training data exactly when the selected design is consistent; a singular
    solve raises ``NumericError`` naming the offending target index.
    """
    X = _as_matrix(X, "X")
    Y = _as_matrix(Y, "Y")
    n, d_x = X.shape
    if Y.shape[0] != n:
        raise ContractError(f"X has {n} samples but Y has {Y.shape[0]}")
    if n < 2:
        raise ContractError("fit_ridge needs at least two samples")
    if lam < 0:
        raise ContractError("lam must be non-negative")
    d_t = Y.shape[1]
    m = min(DEFAULT_MAX_VOXELS, d_x) if voxels_per_target is None else int(voxels_per_target)
    if not (1 <= m <= d_x):
        raise ContractError(f"voxels_per_target must be in [1, {d_x}]")

    mu_x = X.mean(axis=0)
    sd_x = X.std(axis=0)
    mu_y = Y.mean(axis=0)
    Xc = X - mu_x
    Yc = Y - mu_y
    R = _correlation_matrix(Xc, Yc)

    # stable argsort on -|r| keeps the lower voxel index on ties
    ranking = np.argsort(-np.abs(R), axis=0, kind="stable")[:m, :]

    G = Xc.T @ Xc
    XtY = Xc.T @ Yc
    weights = np.empty((d_t, m))
    indices = np.empty((d_t, m), dtype=np.intp)
    bias = np.empty(d_t)
    eye = np.eye(m)
    for j in range(d_t):
        idx = np.sort(ranking[:, j])
        indices[j] = idx
        rhs = XtY[idx, j]
        try:
            if lam > 0.0:
                A = G[np.ix_(idx, idx)] + lam * eye
                c, low = scipy.linalg.cho_factor(A, lower=True, check_finite=False)
                w = scipy.linalg.cho_solve((c, low), rhs, check_finite=False)
            else:
                w, *_ = np.linalg.lstsq(Xc[:, idx], Yc[:, j], rcond=None)
        except (np.linalg.LinAlgError, scipy.linalg.LinAlgError) as err:
            raise NumericError(f"ridge solve failed for target {j}: {err}") from err
        weights[j] = w
        bias[j] = mu_y[j] - mu_x[idx] @ w
    return RidgeModel(weights, indices, bias, mu_x, sd_x, float(lam), m)


def _fold_bounds(n: int, folds: int) -> list[tuple[int, int]]:
    """Contiguous, near-equal fold boundaries covering range(n)."""
    return [(i * n // folds, (i + 1) * n // folds) for i in range(folds)]


def cv_accuracy(X, Y, folds: int = 5, lam: float = DEFAULT_LAMBDA,
                voxels_per_target: int | None = None) -> tuple[np.ndarray, np.ndarray]:
    """Per-target decoding accuracy under contiguous k-fold cross-validation.

    Held-out predictions from all folds are pooled and correlated with the
    truth per dimension.  Returns (accuracy, degenerate) where degenerate
    flags zero-variance targets whose accuracy is pinned to 0.
    """
    X = _as_matrix(X, "X")
    Y = _as_matrix(Y, "Y")
    n = X.shape[0]
    if not (2 <= folds <= n):
        raise ContractError(f"folds must be in [2, {n}]")
    preds = np.empty_like(Y)
    for lo, hi in _fold_bounds(n, folds):
        train_idx = np.r_[0:lo, hi:n]
        model = fit_ridge(X[train_idx], Y[train_idx], lam=lam,
                          voxels_per_target=voxels_per_target)
        preds[lo:hi] = model.predict(X[lo:hi])
    d_t = Y.shape[1]
    acc = np.empty(d_t)
    degenerate = np.zeros(d_t, dtype=bool)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", DegenerateDataWarning)
        for j in range(d_t):
            if np.ptp(Y[:, j]) == 0.0:
                degenerate[j] = True
                acc[j] = 0.0
            else:
                acc[j] = pearson(preds[:, j], Y[:, j])
    return acc, degenerate


@dataclass
class FeatureSelector:
    """Boolean retention mask over target dimensions, ranked by accuracy."""

    mask: np.ndarray  # [D_t] bool
    accuracy: np.ndarray  # [D_t]
    k_percent: float

    @property
    def n_retained(self) -> int:
        return int(self.mask.sum())

    def save(self, path) -> None:
        tensor_io.write_checkpoint(
            path,
            {"kind": "feature-selector", "k_percent": self.k_percent},
            {"mask": self.mask.astype(np.float64), "accuracy": self.accuracy},
        )

    @classmethod
    def load(cls, path) -> "FeatureSelector":
        header, tensors = tensor_io.read_checkpoint(path)
        if header.get("kind") != "feature-selector":
            raise ContractError(f"not a feature selector checkpoint: {path}")
        return cls(
            mask=tensors["mask"] != 0.0,
            accuracy=tensors["accuracy"],
            k_percent=float(header["k_percent"]),
        )


def select_top_k(accuracy: np.ndarray, k_percent: float,
                 degenerate: np.ndarray | None = None) -> FeatureSelector:
    """Retain the ceil(D*k/100) best-decoded dimensions.

    Ties break toward the lower index; degenerate (constant) dimensions sort
    behind every live dimension of equal accuracy so they are only retained
    when nothing better remains.
    """
    accuracy = np.asarray(accuracy, dtype=np.float64).ravel()
    d = accuracy.size
    if not (0.0 < k_percent <= 100.0):
        raise ContractError("k_percent must lie in (0, 100]")
    if degenerate is None:
        degenerate = np.zeros(d, dtype=bool)
    keep = math.ceil(d * k_percent / 100.0)
    # lexsort: last key is primary
    order = np.lexsort((np.arange(d), degenerate.astype(np.int64), -accuracy))
    mask = np.zeros(d, dtype=bool)
    mask[order[:keep]] = True
    return FeatureSelector(mask=mask, accuracy=accuracy, k_percent=float(k_percent))
