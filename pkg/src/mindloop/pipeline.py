"""End-to-end experiment pipeline.

Each stage is a plain function over explicit paths (dataset directory, model
directory, output file), so the CLI can drive any stage in isolation.
``run_experiment`` chains them over one run directory with a fixed layout:

    config.json                 frozen experiment configuration
    lock.json                   held while a run is in progress
    manifest.json               per-stage output digests for --resume
    dataset/                    synthesized stimuli and responses
    artifacts/autoencoder.ckpt
    artifacts/denoiser.ckpt
    artifacts/decoders/         ridge decoders, selector, metadata
    recon/                      drafts, final images, per-item records
    report.json                 evaluation summary (byte-stable)

Every stage derives its randomness from the master seed via sha256 so stage
seeds are independent yet reproducible.
"""

from __future__ import annotations

import csv
import hashlib
import json
import logging
import math
import os
import time
from pathlib import Path

import numpy as np
from PIL import Image

from . import dataset as D
from . import metrics, tensor_io
from .align import reconstruct_item
from .config import ExperimentConfig, canonical_json
from .decoder import FeatureSelector, RidgeModel, cv_accuracy, fit_ridge, select_top_k
from .diffusion import Denoiser, DiffusionGenerator, make_schedule, train_denoiser
from .encoders import (
    LATENT_SHAPE,
    LatentAutoencoder,
    TextEncoder,
    VisualEncoder,
    train_autoencoder,
)
from .errors import ContractError, MindloopError, StageError

log = logging.getLogger("mindloop.pipeline")

STAGES = ("synth-data", "train-ae", "train-denoiser", "fit-decoders",
          "reconstruct", "evaluate")

AE_GATE_MSE = 0.01
DECODER_NAMES = ("caption", "latent", "features")


def stage_seed(master: int, stage: str) -> int:
    """Derived seed for a named stage, independent across stage names."""
    digest = hashlib.sha256(f"{master}:{stage}".encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "little")


class RunPaths:
    """Path bookkeeping for one run directory."""

    def __init__(self, run_dir):
        self.run = Path(run_dir)
        self.config = self.run / "config.json"
        self.lock = self.run / "lock.json"
        self.manifest = self.run / "manifest.json"
        self.dataset = self.run / "dataset"
        self.artifacts = self.run / "artifacts"
        self.autoencoder = self.artifacts / "autoencoder.ckpt"
        self.denoiser = self.artifacts / "denoiser.ckpt"
        self.decoders = self.artifacts / "decoders"
        self.recon = self.run / "recon"
        self.report = self.run / "report.json"


def _tree_digest(root: Path) -> str:
    """Content hash of a file or directory tree (names and bytes)."""
    h = hashlib.sha256()
    if root.is_file():
        h.update(root.read_bytes())
        return h.hexdigest()
    for path in sorted(root.rglob("*")):
        if path.is_file():
            h.update(str(path.relative_to(root)).encode("utf-8"))
            h.update(path.read_bytes())
    return h.hexdigest()


def _read_manifest(paths: RunPaths) -> dict:
    if paths.manifest.exists():
        return json.loads(paths.manifest.read_text())
    return {"stages": {}}


def _record_stage(paths: RunPaths, name: str, outputs: list[Path]) -> None:
    manifest = _read_manifest(paths)
    manifest["stages"][name] = {
        "outputs": {
            str(p.relative_to(paths.run)): _tree_digest(p) for p in outputs
        }
    }
    paths.manifest.write_text(canonical_json(manifest))


def _stage_is_current(paths: RunPaths, name: str) -> bool:
    entry = _read_manifest(paths)["stages"].get(name)
    if not entry:
        return False
    for rel, digest in entry["outputs"].items():
        target = paths.run / rel
        if not target.exists() or _tree_digest(target) != digest:
            return False
    return True


# ---------------------------------------------------------------------------
# shared helpers


def _encoders(cfg: ExperimentConfig):
    text_enc = TextEncoder(vocab_size=len(D.VOCABULARY), seed=cfg.text_seed)
    vis_enc = VisualEncoder(seed=cfg.visual_seed)
    return text_enc, vis_enc


def _feature_matrix(cfg: ExperimentConfig, vis_enc: VisualEncoder, items) -> np.ndarray:
    layers = tuple(sorted(cfg.feature_layers))
    rows = []
    for it in items:
        feats = vis_enc.features(it.stimulus.pixels, layers)
        rows.append(np.concatenate([feats[l].data for l in layers]))
    return np.stack(rows)


def _layer_offsets(cfg: ExperimentConfig, vis_enc: VisualEncoder) -> dict[int, slice]:
    dims = vis_enc.layer_dims(cfg.data.image_size)
    offsets = {}
    start = 0
    for layer in tuple(sorted(cfg.feature_layers)):
        width = dims[layer - 1]
        offsets[layer] = slice(start, start + width)
        start += width
    return offsets


def _split_masks(cfg: ExperimentConfig, vis_enc: VisualEncoder,
                 selector: FeatureSelector) -> dict[int, np.ndarray]:
    """Global selector mask -> per-layer local index arrays (may drop layers)."""
    offsets = _layer_offsets(cfg, vis_enc)
    global_idx = np.flatnonzero(selector.mask)
    masks = {}
    for layer, sl in offsets.items():
        local = global_idx[(global_idx >= sl.start) & (global_idx < sl.stop)] - sl.start
        if local.size:
            masks[layer] = local
    if not masks:
        raise ContractError("feature selector retained no dimensions in any layer")
    return masks


def _fit_decoder_set(cfg: ExperimentConfig, items, voxel_idx, text_enc, vis_enc, ae):
    """Fit the three ridge decoders plus the feature selector on ``items``."""
    X = D.response_matrix(items, voxel_idx)
    targets = {
        "caption": np.stack([text_enc.encode(it.stimulus.caption_tokens).data.ravel()
                             for it in items]),
        "latent": np.stack([ae.to_latent(it.stimulus.pixels).data.ravel()
                            for it in items]),
        "features": _feature_matrix(cfg, vis_enc, items),
    }
    models, accuracy = {}, {}
    selector, feature_degenerate = None, None
    for name, Y in targets.items():
        models[name] = fit_ridge(X, Y, lam=cfg.ridge_lambda,
                                 voxels_per_target=cfg.voxels_per_target)
        acc, degenerate = cv_accuracy(X, Y, folds=5, lam=cfg.ridge_lambda,
                                      voxels_per_target=cfg.voxels_per_target)
        accuracy[name] = acc
        if name == "features":
            selector = select_top_k(acc, cfg.k_percent, degenerate)
            feature_degenerate = degenerate
    return models, selector, accuracy, feature_degenerate


def _write_png(path: Path, img: np.ndarray) -> None:
    u8 = (np.clip(img, 0.0, 1.0) * 255.0).round().astype(np.uint8)
    Image.fromarray(u8.transpose(1, 2, 0), "RGB").save(path)


# ---------------------------------------------------------------------------
# stages


def synth_data(cfg: ExperimentConfig, out_dir) -> Path:
    """Synthesize the dataset into ``out_dir``."""
    out_dir = Path(out_dir)
    ds = D.synthesize(cfg.data, seed=stage_seed(cfg.seed, "data"))
    D.save_dataset(ds, out_dir)
    log.info("synth-data: %d train / %d test items, %d voxels",
             len(ds.train), len(ds.test), ds.n_voxels)
    return out_dir


def train_ae_stage(cfg: ExperimentConfig, dataset_dir, out_file) -> Path:
    """Train the latent autoencoder and checkpoint it to ``out_file``."""
    out_file = Path(out_file)
    ds = D.load_dataset(dataset_dir)
    ae = LatentAutoencoder(seed=cfg.ae_seed)
    imgs = [it.stimulus.pixels for it in ds.train]
    trace = train_autoencoder(ae, imgs, epochs=cfg.ae_epochs, lr=cfg.ae_lr,
                              seed=stage_seed(cfg.seed, "autoencoder"))
    held = [it.stimulus.pixels.data for it in ds.test]
    errs = [float(np.mean((ae.decode(ae.encode(img)).data - img) ** 2)) for img in held]
    gate = float(np.mean(errs))
    if gate >= AE_GATE_MSE:
        raise StageError(
            "train-ae",
            f"round-trip mse {gate:.5f} fails the {AE_GATE_MSE} gate; "
            f"raise ae_epochs or lower ae_lr",
        )
    out_file.parent.mkdir(parents=True, exist_ok=True)
    ae.save(out_file)
    log.info("train-ae: final train loss %.5f, held-out mse %.5f",
             trace.final_loss, gate)
    return out_file


def train_denoiser_stage(cfg: ExperimentConfig, dataset_dir, ae_file, out_file) -> Path:
    """Train the conditional denoiser and checkpoint it to ``out_file``."""
    out_file = Path(out_file)
    if not Path(ae_file).exists():
        raise ContractError(f"no trained autoencoder at {ae_file}; run train-ae first")
    ds = D.load_dataset(dataset_dir)
    ae = LatentAutoencoder.load(ae_file)
    text_enc, _ = _encoders(cfg)
    latents = [ae.to_latent(it.stimulus.pixels).data for it in ds.train]
    conds = [text_enc.encode(it.stimulus.caption_tokens) for it in ds.train]
    schedule = make_schedule(cfg.diffusion_steps, cfg.beta_start, cfg.beta_end)
    model = Denoiser(schedule_steps=cfg.diffusion_steps, seed=cfg.denoiser_seed)
    trace = train_denoiser(model, schedule, latents, conds,
                           epochs=cfg.denoiser_epochs, lr=cfg.denoiser_lr,
                           seed=stage_seed(cfg.seed, "denoiser"))
    polish = train_denoiser(model, schedule, latents, conds,
                            epochs=cfg.denoiser_polish_epochs,
                            lr=cfg.denoiser_polish_lr,
                            seed=stage_seed(cfg.seed, "denoiser-polish"))
    out_file.parent.mkdir(parents=True, exist_ok=True)
    model.save(out_file)
    log.info("train-denoiser: loss %.4f -> %.4f", trace.epoch_losses[0],
             polish.final_loss)
    return out_file


def fit_decoders_stage(cfg: ExperimentConfig, dataset_dir, models_dir,
                       ae_file=None) -> Path:
    """Fit voxel decoders into ``models_dir``/decoders.

    The trained autoencoder is read from ``models_dir``/autoencoder.ckpt
    unless ``ae_file`` points elsewhere.
    """
    models_dir = Path(models_dir)
    ae_file = Path(ae_file) if ae_file else models_dir / "autoencoder.ckpt"
    if not ae_file.exists():
        raise ContractError(f"no trained autoencoder at {ae_file}; run train-ae first")
    ds = D.load_dataset(dataset_dir)
    ae = LatentAutoencoder.load(ae_file)
    text_enc, vis_enc = _encoders(cfg)

    voxel_idx = D.roi_indices(ds.voxel_rois, cfg.roi)
    models, selector, accuracy, _ = _fit_decoder_set(
        cfg, ds.train, voxel_idx, text_enc, vis_enc, ae)

    out_dir = models_dir / "decoders"
    out_dir.mkdir(parents=True, exist_ok=True)
    for name, model in models.items():
        model.save(out_dir / f"{name}.ckpt")
        log.info("fit-decoders: %s mean cv accuracy %.3f", name,
                 float(accuracy[name].mean()))
    selector.save(out_dir / "selector.ckpt")
    log.info("fit-decoders: selector keeps %d / %d feature dims",
             selector.n_retained, selector.mask.size)

    meta = {
        "roi": cfg.roi,
        "voxel_ids": [int(v) for v in voxel_idx],
        "ridge_lambda": cfg.ridge_lambda,
        "voxels_per_target": cfg.voxels_per_target,
        "k_percent": cfg.k_percent,
        "cv_accuracy": {name: float(acc.mean()) for name, acc in accuracy.items()},
    }
    (out_dir / "meta.json").write_text(canonical_json(meta))
    return out_dir


def _build_generator(cfg: ExperimentConfig, models_dir: Path) -> DiffusionGenerator:
    for name, stage in (("autoencoder.ckpt", "train-ae"), ("denoiser.ckpt", "train-denoiser")):
        if not (models_dir / name).exists():
            raise ContractError(f"missing {models_dir / name}; run {stage} first")
    ae = LatentAutoencoder.load(models_dir / "autoencoder.ckpt")
    model = Denoiser.load(models_dir / "denoiser.ckpt")
    schedule = make_schedule(cfg.diffusion_steps, cfg.beta_start, cfg.beta_end)
    return DiffusionGenerator(model, schedule, ae, n_steps=cfg.sample_steps)


def reconstruct_stage(cfg: ExperimentConfig, dataset_dir, models_dir, out_dir,
                      mode: str | None = None, ablate: str | None = None,
                      roi: str | None = None, limit: int | None = None,
                      write_images: bool = True) -> Path:
    """Reconstruct the test split into ``out_dir``.

    In decoded mode the caption, latent and feature targets come from the
    fitted voxel decoders; in upper-bound mode the true encodings are used
    instead.  Per-item noise seeds depend only on the master seed and the
    item index, so reruns with different modes or ablations are paired.
    """
    models_dir, out_dir = Path(models_dir), Path(out_dir)
    mode = cfg.mode if mode is None else mode
    ablate = cfg.ablate if ablate is None else ablate
    roi = cfg.roi if roi is None else roi
    if mode not in ("decoded", "upper-bound"):
        raise ContractError(f"unknown reconstruction mode {mode!r}")

    ds = D.load_dataset(dataset_dir)
    gen = _build_generator(cfg, models_dir)
    text_enc, vis_enc = _encoders(cfg)
    items = ds.test if limit is None else ds.test[:limit]
    n = len(items)

    decoders_dir = models_dir / "decoders"
    selector_path = decoders_dir / "selector.ckpt"
    masks = None
    if selector_path.exists():
        masks = _split_masks(cfg, vis_enc, FeatureSelector.load(selector_path))

    meta_path = decoders_dir / "meta.json"
    decoder_accuracy = None
    if meta_path.exists():
        decoder_accuracy = json.loads(meta_path.read_text())["cv_accuracy"]

    offsets = _layer_offsets(cfg, vis_enc)
    if mode == "decoded":
        for name in DECODER_NAMES:
            if not (decoders_dir / f"{name}.ckpt").exists():
                raise ContractError(f"missing decoder {name}; run fit-decoders first")
        meta = json.loads(meta_path.read_text())
        if meta["roi"] != roi:
            raise StageError(
                "reconstruct",
                f"decoders were fit for roi={meta['roi']!r}; refit for roi={roi!r}",
            )
        voxel_idx = np.asarray(meta["voxel_ids"], dtype=np.int64)
        X = D.response_matrix(items, voxel_idx)
        cap_hat = RidgeModel.load(decoders_dir / "caption.ckpt").predict(X)
        lat_hat = RidgeModel.load(decoders_dir / "latent.ckpt").predict(X)
        feat_hat = RidgeModel.load(decoders_dir / "features.ckpt").predict(X)
    else:
        cap_hat = np.stack([text_enc.encode(it.stimulus.caption_tokens).data.ravel()
                            for it in items])
        lat_hat = np.stack([gen.autoencoder.to_latent(it.stimulus.pixels).data.ravel()
                            for it in items])
        feat_hat = _feature_matrix(cfg, vis_enc, items)

    cap_shape = (text_enc.max_tokens, text_enc.embed_dim)
    finals = np.empty((n, 3, cfg.data.image_size, cfg.data.image_size))
    drafts = np.empty_like(finals)
    records = []
    t0 = time.monotonic()
    for i, item in enumerate(items):
        targets = {layer: feat_hat[i, sl] for layer, sl in offsets.items()}
        rec = reconstruct_item(
            gen, vis_enc,
            cap_hat[i].reshape(cap_shape),
            lat_hat[i].reshape(LATENT_SHAPE),
            targets, masks,
            ablate=ablate,
            noise_seed=stage_seed(cfg.seed, f"reconstruct:{i}"),
            layers=tuple(sorted(cfg.feature_layers)),
            lr=cfg.align_lr, max_steps=cfg.align_steps,
            tol=cfg.align_tol, window=cfg.align_window,
        )
        finals[i] = rec.image
        drafts[i] = rec.draft
        records.append({
            "index": i,
            "class_id": item.stimulus.class_id,
            "caption": item.stimulus.caption,
            "steps": len(rec.losses),
            "best_iter": rec.best_iter,
            "best_loss": min(rec.losses) if rec.losses else None,
            "initial_loss": rec.losses[0] if rec.losses else None,
        })
    log.info("reconstruct: %d items (%s/%s) in %.1fs", n, mode, ablate,
             time.monotonic() - t0)

    out_dir.mkdir(parents=True, exist_ok=True)
    tensor_io.write_tensor(out_dir / "images.mdt", finals)
    tensor_io.write_tensor(out_dir / "drafts.mdt", drafts)
    tensor_io.write_tensor(out_dir / "caption_hat.mdt", cap_hat)
    tensor_io.write_tensor(out_dir / "latent_hat.mdt", lat_hat)
    tensor_io.write_tensor(out_dir / "features_hat.mdt", feat_hat)
    if write_images:
        img_dir = out_dir / "images"
        img_dir.mkdir(exist_ok=True)
        for i, item in enumerate(items):
            _write_png(img_dir / f"item_{i:03d}_stimulus.png", item.stimulus.pixels.data)
            _write_png(img_dir / f"item_{i:03d}_draft.png", drafts[i])
            _write_png(img_dir / f"item_{i:03d}_final.png", finals[i])
    (out_dir / "records.json").write_text(canonical_json({
        "mode": mode, "ablate": ablate, "roi": roi, "n_items": n,
        "decoder_accuracy": decoder_accuracy,
        "items": records,
    }))
    return out_dir


def evaluate_stage(cfg: ExperimentConfig, recon_dir, dataset_dir, out_file) -> Path:
    """Score reconstructions against their stimuli and write the report."""
    recon, out_file = Path(recon_dir), Path(out_file)
    if not (recon / "records.json").exists():
        raise ContractError(f"no reconstructions under {recon}; run reconstruct first")
    ds = D.load_dataset(dataset_dir)
    _, vis_enc = _encoders(cfg)
    recon_meta = json.loads((recon / "records.json").read_text())
    finals = tensor_io.read_tensor(recon / "images.mdt")
    n = recon_meta["n_items"]
    items = ds.test[:n]

    rows = []
    for i, item in enumerate(items):
        true_img = item.stimulus.pixels.data
        img = finals[i]
        if img.shape != true_img.shape:
            img = metrics.resize_nearest(img, true_img.shape[1:])
        rows.append({
            "index": i,
            "class_id": item.stimulus.class_id,
            "caption": item.stimulus.caption,
            "clip_sim": metrics.clip_similarity(img, true_img, vis_enc),
            "ssim": metrics.ssim(img, true_img),
            "pcc": metrics.pixel_pcc(img, true_img),
        })

    means = {
        key: float(np.mean([r[key] for r in rows]))
        for key in ("clip_sim", "ssim", "pcc")
    }
    need = vis_enc.final_dim + 1
    if n >= need:
        fid = metrics.fid([finals[i] for i in range(n)],
                          [it.stimulus.pixels.data for it in items], vis_enc)
        fid_note = None
    else:
        fid = None
        fid_note = (f"needs at least {need} test images for a "
                    f"{vis_enc.final_dim}-dim embedding, have {n}")

    report = {
        "config": cfg.to_dict(),
        "reconstruction": {k: recon_meta[k] for k in ("mode", "ablate", "roi", "n_items")},
        "decoder_accuracy": recon_meta.get("decoder_accuracy"),
        "items": rows,
        "means": means,
        "fid": fid,
        "fid_note": fid_note,
    }
    out_file.write_text(canonical_json(report))
    log.info("evaluate: clip %.3f  ssim %.3f  pcc %.3f", means["clip_sim"],
             means["ssim"], means["pcc"])
    return out_file


# ---------------------------------------------------------------------------
# orchestration


def _acquire_lock(paths: RunPaths) -> None:
    if paths.lock.exists():
        stale = False
        try:
            pid = int(json.loads(paths.lock.read_text()).get("pid", -1))
            os.kill(pid, 0)
        except (ValueError, OSError, KeyError):
            stale = True
        if not stale:
            raise StageError(
                "lock", f"run directory {paths.run} is locked by a live process"
            )
        log.warning("replacing stale lock in %s", paths.run)
    paths.run.mkdir(parents=True, exist_ok=True)
    paths.lock.write_text(canonical_json({"pid": os.getpid()}))


def run_experiment(cfg: ExperimentConfig, run_dir, resume: bool = False) -> Path:
    """Execute every stage in order; with ``resume`` finished stages are kept."""
    cfg.validate()
    paths = RunPaths(run_dir)
    paths.run.mkdir(parents=True, exist_ok=True)
    if paths.config.exists():
        existing = ExperimentConfig.from_json(paths.config.read_text())
        if existing.to_json() != cfg.to_json():
            raise StageError(
                "config",
                f"run directory {paths.run} was created with a different config",
            )
    else:
        paths.config.write_text(cfg.to_json())

    _acquire_lock(paths)
    steps = [
        ("synth-data",
         lambda: synth_data(cfg, paths.dataset), [paths.dataset]),
        ("train-ae",
         lambda: train_ae_stage(cfg, paths.dataset, paths.autoencoder),
         [paths.autoencoder]),
        ("train-denoiser",
         lambda: train_denoiser_stage(cfg, paths.dataset, paths.autoencoder,
                                      paths.denoiser),
         [paths.denoiser]),
        ("fit-decoders",
         lambda: fit_decoders_stage(cfg, paths.dataset, paths.artifacts),
         [paths.decoders]),
        ("reconstruct",
         lambda: reconstruct_stage(cfg, paths.dataset, paths.artifacts, paths.recon),
         [paths.recon]),
        ("evaluate",
         lambda: evaluate_stage(cfg, paths.recon, paths.dataset, paths.report),
         [paths.report]),
    ]
    try:
        for name, fn, outputs in steps:
            if resume and _stage_is_current(paths, name):
                log.info("%s: up to date, skipping", name)
                continue
            t0 = time.monotonic()
            try:
                fn()
            except StageError:
                raise
            except MindloopError as exc:
                raise StageError(name, str(exc)) from exc
            _record_stage(paths, name, outputs)
            log.info("%s finished in %.1fs", name, time.monotonic() - t0)
    finally:
        if paths.lock.exists():
            paths.lock.unlink()
    return paths.report


# ---------------------------------------------------------------------------
# analysis utilities


def k_sweep(cfg: ExperimentConfig, run_dir, ks, out_path=None) -> list[dict]:
    """Reconstruction quality as a function of feature retention.

    Decoders are refit on the head of the train split; the last 12.5% of it
    becomes a validation set that is reconstructed once per ``k`` with the
    feature targets masked to the top-k% dimensions.  Each k contributes one
    row per metric, pairing the mean CV accuracy of the retained dimensions
    with the metric's mean over validation items.
    """
    ks = [float(k) for k in ks]
    if not ks:
        raise ContractError("k_sweep needs at least one k value")
    for k in ks:
        if not 0 < k <= 100:
            raise ContractError(f"k values must be in (0, 100], got {k}")
    paths = RunPaths(run_dir)
    ds = D.load_dataset(paths.dataset)
    gen = _build_generator(cfg, paths.artifacts)
    text_enc, vis_enc = _encoders(cfg)

    n = len(ds.train)
    n_hold = max(1, math.ceil(n * 0.125))
    if n - n_hold < 2:
        raise ContractError(f"train split of {n} is too small for a holdout sweep")
    head, val = ds.train[:-n_hold], ds.train[-n_hold:]

    voxel_idx = D.roi_indices(ds.voxel_rois, cfg.roi)
    models, _, accuracy, degenerate = _fit_decoder_set(
        cfg, head, voxel_idx, text_enc, vis_enc, gen.autoencoder)
    acc = accuracy["features"]

    X_val = D.response_matrix(val, voxel_idx)
    cap_hat = models["caption"].predict(X_val)
    lat_hat = models["latent"].predict(X_val)
    feat_hat = models["features"].predict(X_val)
    cap_shape = (text_enc.max_tokens, text_enc.embed_dim)
    offsets = _layer_offsets(cfg, vis_enc)

    rows = []
    for k in ks:
        selector = select_top_k(acc, k, degenerate)
        masks = _split_masks(cfg, vis_enc, selector)
        scores = {"clip_sim": [], "ssim": [], "pcc": []}
        for i, item in enumerate(val):
            targets = {layer: feat_hat[i, sl] for layer, sl in offsets.items()}
            rec = reconstruct_item(
                gen, vis_enc,
                cap_hat[i].reshape(cap_shape),
                lat_hat[i].reshape(LATENT_SHAPE),
                targets, masks,
                noise_seed=stage_seed(cfg.seed, f"k-sweep:{i}"),
                layers=tuple(sorted(cfg.feature_layers)),
                lr=cfg.align_lr, max_steps=cfg.align_steps,
                tol=cfg.align_tol, window=cfg.align_window,
            )
            true_img = item.stimulus.pixels.data
            scores["clip_sim"].append(
                metrics.clip_similarity(rec.image, true_img, vis_enc))
            scores["ssim"].append(metrics.ssim(rec.image, true_img))
            scores["pcc"].append(metrics.pixel_pcc(rec.image, true_img))
        retained_acc = float(acc[selector.mask].mean())
        for metric in ("clip_sim", "ssim", "pcc"):
            rows.append({
                "k_percent": k,
                "n_retained": int(selector.n_retained),
                "decoding_accuracy": retained_acc,
                "metric": metric,
                "value": float(np.mean(scores[metric])),
            })
        log.info("k-sweep: k=%g retained=%d acc=%.3f", k, selector.n_retained,
                 retained_acc)
    if out_path is not None:
        with open(out_path, "w", newline="") as fh:
            writer = csv.DictWriter(fh, fieldnames=[
                "k_percent", "n_retained", "decoding_accuracy", "metric", "value"])
            writer.writeheader()
            writer.writerows(rows)
    return rows


def export_roi_weights(cfg: ExperimentConfig, run_dir, out_path=None) -> list[dict]:
    """Per-voxel mean absolute decoder weight, one row per voxel.

    Every dataset voxel gets a row with its ROI tag and, for each decoder,
    its weight magnitude averaged over that decoder's targets.  Voxels never
    selected by a decoder score 0 for it.
    """
    paths = RunPaths(run_dir)
    meta_path = paths.decoders / "meta.json"
    if not meta_path.exists():
        raise ContractError("no fitted decoders to export; run fit-decoders first")
    meta = json.loads(meta_path.read_text())
    voxel_ids = np.asarray(meta["voxel_ids"], dtype=np.int64)
    ds = D.load_dataset(paths.dataset)
    rois = [r.lower() for r in ds.voxel_rois]

    per_decoder = {}
    for name in DECODER_NAMES:
        model = RidgeModel.load(paths.decoders / f"{name}.ckpt")
        mass = np.zeros(len(rois))
        np.add.at(mass, voxel_ids[model.indices].ravel(),
                  np.abs(model.weights).ravel())
        per_decoder[name] = mass / model.n_targets

    rows = []
    for v in range(len(rois)):
        row = {"voxel": v, "roi": rois[v]}
        for name in DECODER_NAMES:
            row[name] = float(per_decoder[name][v])
        rows.append(row)
    if out_path is not None:
        with open(out_path, "w", newline="") as fh:
            writer = csv.DictWriter(fh, fieldnames=["voxel", "roi", *DECODER_NAMES])
            writer.writeheader()
            writer.writerows(rows)
    return rows
