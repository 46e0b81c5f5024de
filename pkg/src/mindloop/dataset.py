"""Synthetic stimulus/response dataset.

Each stimulus is a single coloured shape on a black background, drawn at a
random pose (row, col, size, orientation).  Shape class and colour are drawn
independently, so category is not readable from the palette alone.  Two
simulated voxel populations respond to every stimulus:

* ``LVC`` voxels: a fixed random linear map of the block-downsampled
  luminance image, i.e. they carry fine achromatic spatial detail (the
  palette is luminance-matched, so colour never reaches LVC);
* ``HVC`` voxels: a fixed random linear map of the class, colour and coarse
  pose one-hots, i.e. they carry identity and rough layout but no detail.

Gaussian noise is added per trial (1..max_trials trials per stimulus) with a
standard deviation proportional to each voxel's signal deviation.  Captions
are templated from the class, colour and coarse pose ("red square upper left
small") over a fixed built-in vocabulary.  Everything is reproducible
bit-for-bit from (config, seed).
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigError, ContractError
from .tensor import Tensor
from . import tensor_io

CLASS_NAMES = ["square", "circle", "triangle", "ring"]

# muted palette with matched luminance: every colour sums to the same channel
# total, so the luminance image (and with it everything LVC sees) carries no
# colour information at all, while hue stays clearly visible and captioned
COLOR_NAMES = ["red", "green", "blue", "yellow"]
COLOR_RGB = {
    "red": (0.80, 0.50, 0.50),
    "green": (0.50, 0.80, 0.50),
    "blue": (0.50, 0.50, 0.80),
    "yellow": (0.70, 0.70, 0.40),
}

VOCABULARY = [
    "red", "green", "blue", "yellow",
    "square", "circle", "triangle", "ring",
    "upper", "middle", "lower",
    "left", "center", "right",
    "small", "large",
]
_WORD_TO_ID = {w: i for i, w in enumerate(VOCABULARY)}

LVC_DOWNSAMPLE = 8  # LVC sees the image block-averaged to this many cells per side

# pose ranges as fractions of a 32px frame; bins cover exactly these ranges
POSE_MARGIN = 9.0 / 32.0
SIZE_RANGE = (6.0 / 32.0, 11.0 / 32.0)
N_ORIENT_BINS = 4


@dataclass
class SynthesisConfig:
    image_size: int = 32
    n_classes: int = 4
    n_lvc: int = 512
    n_hvc: int = 512
    n_train: int = 512
    n_test: int = 64
    noise_level: float = 0.1  # trial noise sigma as a fraction of signal std
    max_trials: int = 3

    def validate(self):
        if not (2 <= self.n_classes <= len(CLASS_NAMES)):
            raise ConfigError(f"n_classes must be in [2, {len(CLASS_NAMES)}]")
        if self.image_size < 16:
            raise ConfigError("image_size below 16 leaves no room for shape poses")
        if self.image_size % LVC_DOWNSAMPLE:
            raise ConfigError(f"image_size must be divisible by {LVC_DOWNSAMPLE}")
        if self.noise_level < 0:
            raise ConfigError("noise_level must be non-negative")
        if self.max_trials < 1:
            raise ConfigError("max_trials must be at least 1")
        if self.n_train < 2 or self.n_test < 1:
            raise ConfigError("dataset needs at least 2 train and 1 test stimuli")


@dataclass
class Pose:
    row: float
    col: float
    size: float
    orientation: float

    def as_list(self):
        return [self.row, self.col, self.size, self.orientation]


@dataclass
class StimulusImage:
    pixels: Tensor  # [3, H, W] in [0, 1]
    class_id: int
    color_id: int
    pose: Pose
    caption_tokens: list[int]
    caption: str


@dataclass
class BrainResponse:
    voxels: Tensor  # [D]
    trial_count: int = 1


@dataclass
class DatasetItem:
    stimulus: StimulusImage
    trials: list[BrainResponse]

    def averaged(self) -> BrainResponse:
        return average_trials(self.trials)


@dataclass
class Dataset:
    config: SynthesisConfig
    seed: int
    train: list[DatasetItem]
    test: list[DatasetItem]
    voxel_rois: list[str]  # "LVC" / "HVC" per voxel, LVC block first
    lvc_map: np.ndarray = field(repr=False)  # [n_lvc, pixels_down]
    hvc_map: np.ndarray = field(repr=False)  # [n_hvc, class+colour+pose code]

    @property
    def n_voxels(self) -> int:
        return len(self.voxel_rois)

    def items(self, split: str) -> list[DatasetItem]:
        if split == "train":
            return self.train
        if split == "test":
            return self.test
        raise ContractError(f"unknown split '{split}'")

    def save(self, out_dir) -> None:
        save_dataset(self, out_dir)


def average_trials(trials: list[BrainResponse]) -> BrainResponse:
    """Mean response over the trials that exist (permutation invariant)."""
    if not trials:
        raise ContractError("average_trials needs at least one trial")
    dims = {t.voxels.shape for t in trials}
    if len(dims) != 1:
        raise ContractError(f"trials disagree on voxel count: {sorted(dims)}")
    stack = np.stack([t.voxels.data for t in trials])
    total = sum(t.trial_count for t in trials)
    return BrainResponse(Tensor(stack.mean(axis=0)), trial_count=total)


def roi_indices(voxel_rois: list[str], roi: str) -> np.ndarray:
    """Voxel indices for 'all', 'lvc' or 'hvc', preserving order."""
    roi = roi.lower()
    if roi == "all":
        return np.arange(len(voxel_rois))
    want = roi.upper()
    if want not in {"LVC", "HVC"}:
        raise ContractError(f"unknown roi '{roi}'")
    idx = np.array([i for i, r in enumerate(voxel_rois) if r == want])
    if idx.size == 0:
        raise ContractError(f"roi '{roi}' selects no voxels")
    return idx


def response_matrix(items: list[DatasetItem], voxel_idx: np.ndarray | None = None) -> np.ndarray:
    """Trial-averaged responses stacked as [N, D] (optionally ROI-restricted)."""
    rows = [it.averaged().voxels.data for it in items]
    mat = np.stack(rows)
    return mat if voxel_idx is None else np.ascontiguousarray(mat[:, voxel_idx])


# -- rendering ---------------------------------------------------------------


def render_stimulus(class_id: int, color_id: int, pose: Pose, image_size: int) -> np.ndarray:
    """Draw one coloured shape as a [3, H, W] float image in [0, 1].

    Shapes are evaluated as signed distance fields on the pixel grid and
    soft-thresholded over ~1.5 px, which keeps edges smooth enough for
    gradient-based work downstream.
    """
    name = CLASS_NAMES[class_id]
    color = COLOR_RGB[COLOR_NAMES[color_id]]
    ys, xs = np.mgrid[0:image_size, 0:image_size].astype(np.float64)
    dy = ys - pose.row
    dx = xs - pose.col
    cos_t, sin_t = math.cos(pose.orientation), math.sin(pose.orientation)
    u = cos_t * dx + sin_t * dy
    v = -sin_t * dx + cos_t * dy
    s = pose.size
    if name == "square":
        d = np.maximum(np.abs(u), np.abs(v)) - s
    elif name == "circle":
        d = np.sqrt(u * u + v * v) - s
    elif name == "triangle":
        # equilateral, apex along -v; adequate SDF approximation for masks
        d = np.maximum(np.abs(u) * (math.sqrt(3) / 2.0) + v * 0.5, -v) - s * 0.6
    elif name == "ring":
        rr = np.sqrt(u * u + v * v)
        d = np.maximum(rr - s, 0.55 * s - rr)
    else:  # pragma: no cover - class list is fixed
        raise ContractError(f"no renderer for class '{name}'")
    mask = np.clip(0.5 - d / 1.5, 0.0, 1.0)
    img = np.empty((3, image_size, image_size), dtype=np.float64)
    for ch in range(3):
        img[ch] = mask * color[ch]
    return img


def downsample_pixels(pixels: np.ndarray, cells: int = LVC_DOWNSAMPLE) -> np.ndarray:
    """Block-mean each channel down to cells x cells; returns a flat vector."""
    c, h, w = pixels.shape
    if h % cells or w % cells:
        raise ContractError(f"image size {h}x{w} not divisible into {cells} blocks")
    bh, bw = h // cells, w // cells
    blocks = pixels.reshape(c, cells, bh, cells, bw).mean(axis=(2, 4))
    return blocks.reshape(-1)


def lvc_signal_input(pixels: np.ndarray) -> np.ndarray:
    """What LVC voxels respond to: the downsampled luminance image.

    Averaging channels first makes LVC exactly colour-blind under the
    luminance-matched palette; only spatial structure gets through.
    """
    luminance = pixels.mean(axis=0, keepdims=True)
    return downsample_pixels(luminance)


# -- captions and coarse pose --------------------------------------------------


def _coarse_bins(pose: Pose, image_size: int):
    """Bin the pose over the ranges poses are actually drawn from."""
    margin = POSE_MARGIN * image_size
    span = (image_size - 2.0 * margin) / 3.0
    row_bin = min(max(int((pose.row - margin) / span), 0), 2)
    col_bin = min(max(int((pose.col - margin) / span), 0), 2)
    size_mid = 0.5 * (SIZE_RANGE[0] + SIZE_RANGE[1]) * image_size
    size_bin = 0 if pose.size < size_mid else 1
    folded = pose.orientation % math.pi
    orient_bin = min(int(folded / (math.pi / N_ORIENT_BINS)), N_ORIENT_BINS - 1)
    return row_bin, col_bin, size_bin, orient_bin


def caption_for(class_id: int, color_id: int, pose: Pose, image_size: int) -> tuple[list[int], str]:
    row_bin, col_bin, size_bin, _ = _coarse_bins(pose, image_size)
    words = [
        COLOR_NAMES[color_id],
        CLASS_NAMES[class_id],
        ["upper", "middle", "lower"][row_bin],
        ["left", "center", "right"][col_bin],
        ["small", "large"][size_bin],
    ]
    return [_WORD_TO_ID[w] for w in words], " ".join(words)


def hvc_code(class_id: int, color_id: int, pose: Pose, n_classes: int,
             image_size: int) -> np.ndarray:
    """Class, colour and coarse pose one-hots; this is all HVC ever sees."""
    row_bin, col_bin, size_bin, orient_bin = _coarse_bins(pose, image_size)
    n_colors = len(COLOR_NAMES)
    code = np.zeros(n_classes + n_colors + 3 + 3 + 2 + N_ORIENT_BINS, dtype=np.float64)
    code[class_id] = 1.0
    base = n_classes
    code[base + color_id] = 1.0
    base += n_colors
    code[base + row_bin] = 1.0
    code[base + 3 + col_bin] = 1.0
    code[base + 6 + size_bin] = 1.0
    code[base + 8 + orient_bin] = 1.0
    return code


# -- synthesis ----------------------------------------------------------------


def synthesize(config: SynthesisConfig, seed: int) -> Dataset:
    """Generate a dataset, bit-identical for identical (config, seed)."""
    config.validate()
    rng = np.random.default_rng(np.random.PCG64(seed))
    n_total = config.n_train + config.n_test
    size = config.image_size

    # stimulus parameters first, so the draw order is stable and documented
    class_ids = rng.integers(0, config.n_classes, size=n_total)
    color_ids = rng.integers(0, len(COLOR_NAMES), size=n_total)
    margin = POSE_MARGIN * size
    rows = rng.uniform(margin, size - margin, size=n_total)
    cols = rng.uniform(margin, size - margin, size=n_total)
    sizes = rng.uniform(SIZE_RANGE[0] * size, SIZE_RANGE[1] * size, size=n_total)
    orientations = rng.uniform(0.0, math.pi, size=n_total)

    down_dim = LVC_DOWNSAMPLE * LVC_DOWNSAMPLE
    code_dim = config.n_classes + len(COLOR_NAMES) + 8 + N_ORIENT_BINS
    lvc_map = rng.normal(size=(config.n_lvc, down_dim)) / math.sqrt(down_dim)
    hvc_map = rng.normal(size=(config.n_hvc, code_dim)) / math.sqrt(code_dim)

    stimuli = []
    lvc_signals = np.empty((n_total, config.n_lvc))
    hvc_signals = np.empty((n_total, config.n_hvc))
    for i in range(n_total):
        pose = Pose(float(rows[i]), float(cols[i]), float(sizes[i]), float(orientations[i]))
        cid = int(class_ids[i])
        kid = int(color_ids[i])
        pixels = render_stimulus(cid, kid, pose, size)
        tokens, caption = caption_for(cid, kid, pose, size)
        stimuli.append(StimulusImage(Tensor(pixels), cid, kid, pose, tokens, caption))
        lvc_signals[i] = lvc_map @ lvc_signal_input(pixels)
        hvc_signals[i] = hvc_map @ hvc_code(cid, kid, pose, config.n_classes, size)

    signals = np.concatenate([lvc_signals, hvc_signals], axis=1)
    sigma = config.noise_level * signals.std(axis=0)

    trial_counts = rng.integers(1, config.max_trials + 1, size=n_total)
    items = []
    for i, stim in enumerate(stimuli):
        trials = []
        for _ in range(int(trial_counts[i])):
            noisy = signals[i] + rng.normal(size=signals.shape[1]) * sigma
            trials.append(BrainResponse(Tensor(noisy), trial_count=1))
        items.append(DatasetItem(stim, trials))

    rois = ["LVC"] * config.n_lvc + ["HVC"] * config.n_hvc
    return Dataset(
        config=config,
        seed=seed,
        train=items[: config.n_train],
        test=items[config.n_train :],
        voxel_rois=rois,
        lvc_map=lvc_map,
        hvc_map=hvc_map,
    )


# -- on-disk layout -------------------------------------------------------------


def save_dataset(ds: Dataset, out_dir) -> None:
    """Write manifest.json plus one pixels/responses tensor file per stimulus."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    entries = []
    counter = 0
    for split in ("train", "test"):
        for item in ds.items(split):
            stim = item.stimulus
            pix_name = f"stim_{counter:04d}.mdt1"
            resp_name = f"resp_{counter:04d}.mdt1"
            tensor_io.write_tensor(out / pix_name, stim.pixels.data)
            tensor_io.write_tensor(
                out / resp_name, np.stack([t.voxels.data for t in item.trials])
            )
            entries.append(
                {
                    "id": counter,
                    "split": split,
                    "class_id": stim.class_id,
                    "color_id": stim.color_id,
                    "pose": stim.pose.as_list(),
                    "caption_tokens": stim.caption_tokens,
                    "caption": stim.caption,
                    "trials": len(item.trials),
                    "pixels_file": pix_name,
                    "responses_file": resp_name,
                }
            )
            counter += 1
    manifest = {
        "format": "mindloop-dataset-v1",
        "seed": ds.seed,
        "config": vars(ds.config),
        "vocabulary": VOCABULARY,
        "voxel_rois": ds.voxel_rois,
        "stimuli": entries,
        "lvc_map_file": "lvc_map.mdt1",
        "hvc_map_file": "hvc_map.mdt1",
    }
    tensor_io.write_tensor(out / "lvc_map.mdt1", ds.lvc_map)
    tensor_io.write_tensor(out / "hvc_map.mdt1", ds.hvc_map)
    (out / "manifest.json").write_text(json.dumps(manifest, sort_keys=True, indent=2) + "\n")


def load_dataset(in_dir) -> Dataset:
    src = Path(in_dir)
    manifest_path = src / "manifest.json"
    if not manifest_path.exists():
        raise ContractError(f"no dataset manifest at {manifest_path}")
    manifest = json.loads(manifest_path.read_text())
    if manifest.get("format") != "mindloop-dataset-v1":
        raise ContractError("unrecognized dataset manifest format")
    config = SynthesisConfig(**manifest["config"])
    splits: dict[str, list[DatasetItem]] = {"train": [], "test": []}
    for entry in manifest["stimuli"]:
        pixels = tensor_io.read_tensor(src / entry["pixels_file"])
        responses = tensor_io.read_tensor(src / entry["responses_file"])
        pose = Pose(*entry["pose"])
        stim = StimulusImage(
            Tensor(pixels), entry["class_id"], entry["color_id"], pose,
            list(entry["caption_tokens"]), entry["caption"]
        )
        trials = [BrainResponse(Tensor(responses[k]), 1) for k in range(responses.shape[0])]
        if len(trials) != entry["trials"]:
            raise ContractError(f"trial count mismatch for stimulus {entry['id']}")
        splits[entry["split"]].append(DatasetItem(stim, trials))
    return Dataset(
        config=config,
        seed=manifest["seed"],
        train=splits["train"],
        test=splits["test"],
        voxel_rois=list(manifest["voxel_rois"]),
        lvc_map=tensor_io.read_tensor(src / manifest["lvc_map_file"]),
        hvc_map=tensor_io.read_tensor(src / manifest["hvc_map_file"]),
    )
