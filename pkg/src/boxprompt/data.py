"""Dataset ingestion, preprocessing, weak-label derivation, and synthesis.

The preprocessing chain mirrors the training contract: percentile
intensity clipping and rescaling, optional spacing resample, center
crop/pad to a working size, then channel replication and resize to the
backbone input.  Boxes ride along through every spatial step so the
constraint losses always see a valid (possibly loosened) tight box.

Manifests are line-oriented JSON: one object per line with the fields of
ManifestEntry.  Raw images are 8/16-bit grayscale PNG, .npy arrays, or
NIfTI volumes (expanded to per-slice entries with per-volume intensity
preprocessing).
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field, asdict
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
import torch
from PIL import Image
from scipy import ndimage
from torch import Tensor
from torch.nn import functional as F

from . import nifti
from .backbone import ImageEmbedding, cache_get, cache_key, cache_put, CacheEntry
from .errors import (
    CacheMiss,
    DataError,
    EmptyInput,
    IOFailure,
    KTooLarge,
    ShapeMismatch,
)
from .geometry import TightBox, map_box_to_grid, shift_box, tight_box_from_mask


@dataclass(frozen=True)
class PreprocessConfig:
    clip_lo_pct: float = 0.5
    clip_hi_pct: float = 99.5
    rescale_max: float = 255.0
    crop_pad_size: tuple[int, int] = (640, 640)
    model_input: tuple[int, int] = (1024, 1024)
    resample_spacing: Optional[float] = None  # mm per pixel, isotropic

    def __post_init__(self):
        if not (0.0 <= self.clip_lo_pct < self.clip_hi_pct <= 100.0):
            raise ValueError("need 0 <= clip_lo_pct < clip_hi_pct <= 100")


@dataclass(frozen=True)
class FewShotSpec:
    k: int = 10
    subset_seed: int = 0
    init_seed: int = 0


@dataclass
class ManifestEntry:
    id: str
    image_path: str
    mask_path: Optional[str] = None
    box: Optional[tuple[int, int, int, int]] = None
    split: str = "train"
    spacing: Optional[tuple[float, float]] = None
    preprocessed: bool = False  # True once intensity+spatial steps are baked in

    def to_json(self) -> str:
        d = {k: v for k, v in asdict(self).items() if v is not None and v is not False}
        return json.dumps(d, sort_keys=True)


def save_manifest(entries: Sequence[ManifestEntry], path):
    with open(path, "w", encoding="utf-8") as fh:
        for e in entries:
            fh.write(e.to_json() + "\n")


def load_manifest(path) -> list[ManifestEntry]:
    entries = []
    try:
        with open(path, encoding="utf-8") as fh:
            for line in fh:
                line = line.strip()
                if not line:
                    continue
                d = json.loads(line)
                if "box" in d and d["box"] is not None:
                    d["box"] = tuple(int(v) for v in d["box"])
                if "spacing" in d and d["spacing"] is not None:
                    d["spacing"] = tuple(float(v) for v in d["spacing"])
                entries.append(ManifestEntry(**d))
    except OSError as exc:
        raise IOFailure(f"cannot read manifest {path}: {exc}") from exc
    validate_manifest(entries)
    return entries


def validate_manifest(entries: Sequence[ManifestEntry]):
    seen = set()
    for e in entries:
        if e.id in seen:
            raise DataError(f"duplicate manifest id {e.id!r}")
        seen.add(e.id)
        if e.split not in ("train", "val", "test"):
            raise DataError(f"unknown split {e.split!r} for id {e.id!r}")
        if e.split == "train" and e.box is None and e.mask_path is None:
            raise DataError(f"train entry {e.id!r} has neither box nor mask")


def split_entries(entries: Sequence[ManifestEntry], split: str) -> list[ManifestEntry]:
    return [e for e in entries if e.split == split]


# ---------------------------------------------------------------------------
# intensity and spatial preprocessing


def nearest_rank_percentile(values: np.ndarray, pct: float) -> float:
    """Nearest-rank percentile: the ceil(p/100 * n)-th smallest value."""
    flat = np.sort(np.asarray(values, dtype=np.float64), axis=None)
    n = flat.size
    rank = int(np.ceil(pct / 100.0 * n))
    return float(flat[min(max(rank, 1), n) - 1])


def preprocess_intensity(values: np.ndarray, cfg: PreprocessConfig) -> np.ndarray:
    """Clip to the configured percentiles, then min-max rescale.

    The percentile scope is whatever array is passed: a 2-D image or a
    whole 3-D volume.  Constant input maps to all zeros.
    """
    v = np.asarray(values, dtype=np.float64)
    if v.size == 0:
        raise EmptyInput("cannot preprocess an empty array")
    if not np.isfinite(v).all():
        raise DataError("intensity values must be finite")
    lo = nearest_rank_percentile(v, cfg.clip_lo_pct)
    hi = nearest_rank_percentile(v, cfg.clip_hi_pct)
    if hi <= lo:
        return np.zeros_like(v, dtype=np.float32)
    out = (np.clip(v, lo, hi) - lo) / (hi - lo) * cfg.rescale_max
    return out.astype(np.float32)


@dataclass
class StandardizedSample:
    image: np.ndarray
    mask: Optional[np.ndarray]
    offset: tuple[int, int]  # content shift (dr, dc) introduced by crop/pad
    resampled_shape: tuple[int, int]
    original_shape: tuple[int, int]


def _center_crop_pad(arr: np.ndarray, out_shape: tuple[int, int]) -> tuple[np.ndarray, tuple[int, int]]:
    in_h, in_w = arr.shape
    out = np.zeros(out_shape, dtype=arr.dtype)
    offs = []
    src = []
    dst = []
    for i, (n_in, n_out) in enumerate(zip((in_h, in_w), out_shape)):
        if n_in >= n_out:
            start = (n_in - n_out) // 2
            src.append(slice(start, start + n_out))
            dst.append(slice(0, n_out))
            offs.append(-start)
        else:
            pad = (n_out - n_in) // 2
            src.append(slice(0, n_in))
            dst.append(slice(pad, pad + n_in))
            offs.append(pad)
    out[tuple(dst)] = arr[tuple(src)]
    return out, (offs[0], offs[1])


def spatial_standardize(
    image: np.ndarray,
    mask: Optional[np.ndarray],
    cfg: PreprocessConfig,
    spacing: Optional[tuple[float, float]] = None,
) -> StandardizedSample:
    """Optional spacing resample, then center crop/pad to the working size.

    The mask receives the identical transform with nearest-neighbor
    resampling.
    """
    img = np.asarray(image, dtype=np.float32)
    if img.ndim != 2:
        raise ShapeMismatch(f"expected a 2-D image, got shape {img.shape}")
    if mask is not None and mask.shape != img.shape:
        raise ShapeMismatch(f"mask {mask.shape} does not match image {img.shape}")
    original_shape = img.shape
    msk = None if mask is None else np.asarray(mask)
    if cfg.resample_spacing and spacing is not None:
        factors = (
            spacing[0] / cfg.resample_spacing,
            spacing[1] / cfg.resample_spacing,
        )
        img = ndimage.zoom(img, factors, order=1)
        if msk is not None:
            msk = ndimage.zoom(msk.astype(np.uint8), factors, order=0)
    resampled_shape = img.shape
    img, offset = _center_crop_pad(img, cfg.crop_pad_size)
    if msk is not None:
        msk, _ = _center_crop_pad(msk.astype(np.uint8), cfg.crop_pad_size)
    return StandardizedSample(
        image=img,
        mask=msk,
        offset=offset,
        resampled_shape=resampled_shape,
        original_shape=original_shape,
    )


def standardize_box(box: TightBox, std: StandardizedSample, cfg: PreprocessConfig) -> TightBox:
    """Carry an original-grid box through resample + crop/pad."""
    b = map_box_to_grid(box, std.original_shape, std.resampled_shape)
    return shift_box(b, std.offset[0], std.offset[1], cfg.crop_pad_size)


def to_model_input(
    image: np.ndarray, model_input: tuple[int, int], rescale_max: float = 255.0
) -> Tensor:
    """Replicate to 3 channels, resize bilinearly, scale into [0, 1]."""
    t = torch.from_numpy(np.asarray(image, dtype=np.float32))[None, None]
    if tuple(t.shape[-2:]) != tuple(model_input):
        t = F.interpolate(t, size=tuple(model_input), mode="bilinear", align_corners=False)
    t = t / float(rescale_max)
    return t[0].expand(3, -1, -1).contiguous()


def project_to_original(prob: Tensor, sample: "PreparedSample") -> np.ndarray:
    """Map a model-input-grid probability map back to original resolution.

    Inverts the resize, the crop/pad (cropped-away content becomes 0),
    and the optional spacing resample.
    """
    p = prob.detach()[None, None]
    if tuple(p.shape[-2:]) != tuple(sample.standardized_shape):
        p = F.interpolate(
            p, size=tuple(sample.standardized_shape), mode="bilinear", align_corners=False
        )
    std = p[0, 0].cpu().numpy()
    rh, rw = sample.resampled_shape
    dr, dc = sample.content_offset
    resampled = np.zeros((rh, rw), dtype=std.dtype)
    rows = np.arange(rh)
    cols = np.arange(rw)
    rsel = (rows + dr >= 0) & (rows + dr < std.shape[0])
    csel = (cols + dc >= 0) & (cols + dc < std.shape[1])
    resampled[np.ix_(rsel, csel)] = std[np.ix_(rows[rsel] + dr, cols[csel] + dc)]
    if sample.resampled_shape != sample.original_shape:
        t = torch.from_numpy(resampled)[None, None]
        t = F.interpolate(t, size=sample.original_shape, mode="bilinear", align_corners=False)
        resampled = t[0, 0].numpy()
    return resampled


# ---------------------------------------------------------------------------
# manifest-level operations


def filter_min_foreground(
    entries: Sequence[ManifestEntry], min_px: int = 100, root=None
) -> list[ManifestEntry]:
    """Drop entries whose foreground (mask count, else box area) < min_px."""
    kept = []
    for e in entries:
        if e.mask_path is not None:
            mask = load_image(_resolve(e.mask_path, root))
            fg = int(np.count_nonzero(mask))
        elif e.box is not None:
            fg = TightBox(*e.box).area
        else:
            fg = 0
        if fg >= min_px:
            kept.append(e)
    return kept


def few_shot_indices(n: int, k: int, seed: int) -> list[int]:
    """k distinct indices in [0, n), uniform without replacement."""
    if k > n:
        raise KTooLarge(f"k={k} exceeds available train size {n}")
    rng = np.random.default_rng(seed)
    idx = rng.choice(n, size=k, replace=False)
    return sorted(int(i) for i in idx)


def sample_few_shot(entries: Sequence[ManifestEntry], spec: FewShotSpec) -> list[ManifestEntry]:
    """Deterministic uniform k-subset of the train split."""
    train = split_entries(entries, "train")
    idx = few_shot_indices(len(train), spec.k, spec.subset_seed)
    return [train[i] for i in idx]


# ---------------------------------------------------------------------------
# image file I/O


def _resolve(path, root) -> Path:
    p = Path(path)
    if root is not None and not p.is_absolute():
        return Path(root) / p
    return p


def load_image(path) -> np.ndarray:
    """Read a grayscale PNG (8/16-bit) or an .npy array as float32."""
    p = Path(path)
    try:
        if p.suffix == ".npy":
            return np.load(p).astype(np.float32)
        with Image.open(p) as im:
            if im.mode not in ("L", "I", "I;16"):
                im = im.convert("I")
            return np.asarray(im, dtype=np.float32)
    except OSError as exc:
        raise IOFailure(f"cannot read image {path}: {exc}") from exc


def save_image_png(path, array: np.ndarray, bit_depth: int = 16):
    """Write a grayscale PNG from floats in [0, 1] or raw integer values."""
    arr = np.asarray(array)
    if arr.dtype.kind == "f":
        arr = np.clip(arr, 0.0, 1.0)
        arr = (arr * (65535 if bit_depth == 16 else 255)).round()
    if bit_depth == 16:
        im = Image.fromarray(arr.astype(np.uint16))
    else:
        im = Image.fromarray(arr.astype(np.uint8), mode="L")
    im.save(path)


def load_mask(path) -> np.ndarray:
    return (load_image(path) > 0).astype(np.uint8)


# ---------------------------------------------------------------------------
# NIfTI volume expansion


def expand_volume(
    vol_path, out_dir, cfg: PreprocessConfig, base_id: str, split: str = "train",
    mask_path=None, min_px: int = 0,
) -> list[ManifestEntry]:
    """Slice a 3-D volume into per-slice .npy images plus manifest entries.

    Intensity preprocessing runs on the whole volume first (volume
    percentile scope); each axial slice is then standardized spatially and
    written out with `preprocessed` set, so downstream steps skip both.
    """
    vol, spacing = nifti.read_nifti(vol_path)
    if vol.ndim == 4:
        vol = vol[..., 0]
    if vol.ndim != 3:
        raise DataError(f"{vol_path}: expected a 3-D volume, got {vol.ndim}-D")
    mask_vol = None
    if mask_path is not None:
        mask_vol, _ = nifti.read_nifti(mask_path)
        if mask_vol.shape != vol.shape:
            raise ShapeMismatch("mask volume shape differs from image volume")
    pre = preprocess_intensity(vol, cfg)
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    entries = []
    in_plane = (float(spacing[0]), float(spacing[1])) if len(spacing) >= 2 else None
    for z in range(pre.shape[2]):
        img2d = pre[:, :, z]
        msk2d = None if mask_vol is None else (mask_vol[:, :, z] > 0).astype(np.uint8)
        if msk2d is not None and int(msk2d.sum()) < max(min_px, 1):
            continue
        std = spatial_standardize(img2d, msk2d, cfg, spacing=in_plane)
        sid = f"{base_id}_z{z:03d}"
        img_file = out_dir / f"{sid}.npy"
        np.save(img_file, std.image.astype(np.float32))
        mask_file = None
        box = None
        if std.mask is not None:
            mask_file = out_dir / f"{sid}_mask.png"
            save_image_png(mask_file, (std.mask > 0).astype(np.uint8) * 255, bit_depth=8)
            box = tight_box_from_mask(std.mask).as_tuple()
        entries.append(
            ManifestEntry(
                id=sid,
                image_path=str(img_file),
                mask_path=None if mask_file is None else str(mask_file),
                box=box,
                split=split,
                preprocessed=True,
            )
        )
    return entries


# ---------------------------------------------------------------------------
# synthetic shape dataset


@dataclass
class SyntheticDataset:
    ids: list[str]
    images: list[np.ndarray]  # float32 in [0, 1]
    masks: list[np.ndarray]  # uint8
    boxes: list[TightBox]

    def __len__(self) -> int:
        return len(self.ids)


def generate_synthetic(
    n: int, seed: int, canvas: tuple[int, int] = (64, 64), rotate: bool = True
) -> SyntheticDataset:
    """Random filled ellipses on a noisy background, deterministic per seed.

    One ellipse per sample with random center, axes, rotation, and
    intensity; the mask is the ellipse indicator and the box its tight
    bounding box.
    """
    if n < 1:
        raise EmptyInput("n must be >= 1")
    rng = np.random.default_rng(seed)
    h, w = canvas
    lo = 0.125 * min(h, w)
    hi = 0.28 * min(h, w)
    ys, xs = np.mgrid[0:h, 0:w]
    ds = SyntheticDataset(ids=[], images=[], masks=[], boxes=[])
    for i in range(n):
        sa = rng.uniform(lo, hi)
        sb = rng.uniform(lo, hi)
        theta = rng.uniform(0.0, np.pi) if rotate else 0.0
        ext_r = float(np.sqrt((sa * np.sin(theta)) ** 2 + (sb * np.cos(theta)) ** 2))
        ext_c = float(np.sqrt((sa * np.cos(theta)) ** 2 + (sb * np.sin(theta)) ** 2))
        cy = rng.uniform(np.ceil(ext_r) + 1, h - 2 - np.ceil(ext_r))
        cx = rng.uniform(np.ceil(ext_c) + 1, w - 2 - np.ceil(ext_c))
        u = (xs - cx) * np.cos(theta) + (ys - cy) * np.sin(theta)
        v = -(xs - cx) * np.sin(theta) + (ys - cy) * np.cos(theta)
        mask = ((u / sa) ** 2 + (v / sb) ** 2 <= 1.0).astype(np.uint8)
        intensity = rng.uniform(0.55, 0.95)
        img = 0.12 + rng.normal(0.0, 0.04, size=canvas)
        img[mask > 0] = intensity + rng.normal(0.0, 0.03, size=int(mask.sum()))
        ds.ids.append(f"synth{i:04d}")
        ds.images.append(np.clip(img, 0.0, 1.0).astype(np.float32))
        ds.masks.append(mask)
        ds.boxes.append(tight_box_from_mask(mask))
    return ds


def write_synthetic_dataset(
    ds: SyntheticDataset, out_dir, splits: tuple[int, int, int]
) -> list[ManifestEntry]:
    """Persist a synthetic dataset as 16-bit PNGs plus a JSONL manifest."""
    n_train, n_val, n_test = splits
    if n_train + n_val + n_test > len(ds):
        raise DataError("split sizes exceed dataset size")
    out_dir = Path(out_dir)
    (out_dir / "images").mkdir(parents=True, exist_ok=True)
    (out_dir / "masks").mkdir(parents=True, exist_ok=True)
    entries = []
    bounds = [(0, n_train, "train"), (n_train, n_train + n_val, "val"),
              (n_train + n_val, n_train + n_val + n_test, "test")]
    for start, stop, split in bounds:
        for i in range(start, stop):
            sid = ds.ids[i]
            img_path = out_dir / "images" / f"{sid}.png"
            mask_path = out_dir / "masks" / f"{sid}.png"
            save_image_png(img_path, ds.images[i], bit_depth=16)
            save_image_png(mask_path, ds.masks[i] * 255, bit_depth=8)
            entries.append(
                ManifestEntry(
                    id=sid,
                    image_path=str(img_path),
                    mask_path=str(mask_path),
                    box=ds.boxes[i].as_tuple(),
                    split=split,
                )
            )
    save_manifest(entries, out_dir / "manifest.jsonl")
    return entries


# ---------------------------------------------------------------------------
# end-to-end sample preparation


@dataclass
class PreparedSample:
    """Everything the trainer and evaluator need for one image."""

    id: str
    embedding: Optional[ImageEmbedding]
    model_input: Optional[Tensor]
    box_loss: TightBox
    box_input: TightBox
    loss_shape: tuple[int, int]
    input_shape: tuple[int, int]
    standardized_shape: tuple[int, int]
    mask: Optional[np.ndarray]
    original_shape: tuple[int, int]
    resampled_shape: tuple[int, int]
    content_offset: tuple[int, int]


def prepare_sample(
    sample_id: str,
    image: np.ndarray,
    mask: Optional[np.ndarray],
    box: Optional[TightBox],
    cfg: PreprocessConfig,
    backbone,
    loss_shape: tuple[int, int],
    spacing=None,
    encode: bool = True,
    cache_dir=None,
    keep_model_input: bool = False,
    preprocessed: bool = False,
) -> PreparedSample:
    """Run one sample through the full input pipeline.

    With encode=True the embedding is computed (through the cache when a
    cache_dir is given); otherwise the model input tensor is kept for
    per-step re-encoding.
    """
    if mask is None and box is None:
        raise DataError(f"sample {sample_id!r} has neither mask nor box")
    if preprocessed:
        std = StandardizedSample(
            image=np.asarray(image, dtype=np.float32),
            mask=None if mask is None else np.asarray(mask),
            offset=(0, 0),
            resampled_shape=image.shape,
            original_shape=image.shape,
        )
    else:
        std = spatial_standardize(preprocess_intensity(image, cfg), mask, cfg, spacing)
    if std.mask is not None:
        box_std = tight_box_from_mask(std.mask)
    else:
        box_std = standardize_box(box, std, cfg)
    model_in = to_model_input(std.image, cfg.model_input, cfg.rescale_max)
    box_input = map_box_to_grid(box_std, cfg.crop_pad_size, cfg.model_input)
    box_loss = map_box_to_grid(box_std, cfg.crop_pad_size, loss_shape)

    embedding = None
    if encode:
        if cache_dir is not None:
            key = cache_key(sample_id, backbone.fingerprint)
            hit = cache_get(cache_dir, key)
            if hit is None:
                embedding = backbone.encode_image(model_in, source_id=sample_id)
                cache_put(cache_dir, CacheEntry(key=key, payload=embedding))
            else:
                embedding = ImageEmbedding(
                    hit.payload.data, sample_id, hit.payload.backbone_fingerprint
                )
        elif backbone is not None:
            embedding = backbone.encode_image(model_in, source_id=sample_id)
        else:
            raise CacheMiss(f"no backbone and no cache for sample {sample_id!r}")

    return PreparedSample(
        id=sample_id,
        embedding=embedding,
        model_input=model_in if (keep_model_input or not encode) else None,
        box_loss=box_loss,
        box_input=box_input,
        loss_shape=tuple(loss_shape),
        input_shape=tuple(cfg.model_input),
        standardized_shape=tuple(cfg.crop_pad_size),
        mask=None if mask is None else np.asarray(mask),
        original_shape=std.original_shape,
        resampled_shape=std.resampled_shape,
        content_offset=std.offset,
    )


def embedding_for(sample: PreparedSample, backbone, use_cache: bool) -> ImageEmbedding:
    """Resolve a sample's embedding: cached once, or re-encoded per call."""
    if use_cache:
        if sample.embedding is not None:
            return sample.embedding
        if backbone is not None and sample.model_input is not None:
            sample.embedding = backbone.encode_image(sample.model_input, sample.id)
            return sample.embedding
        raise CacheMiss(f"sample {sample.id!r}: no cached embedding available")
    if sample.model_input is None or backbone is None:
        raise CacheMiss(f"sample {sample.id!r}: no model input kept for re-encoding")
    return backbone.encode_image(sample.model_input, sample.id)


def prepare_inference(
    sample_id: str,
    image: np.ndarray,
    cfg: PreprocessConfig,
    backbone,
    spacing=None,
    preprocessed: bool = False,
) -> PreparedSample:
    """Prediction-time preparation: no labels required."""
    h, w = np.asarray(image).shape
    full = TightBox(0, 0, h - 1, w - 1)
    return prepare_sample(
        sample_id, image, None, full, cfg, backbone,
        loss_shape=cfg.model_input, spacing=spacing, preprocessed=preprocessed,
    )


def prepare_from_arrays(
    ids: Sequence[str],
    images: Sequence[np.ndarray],
    masks: Optional[Sequence[np.ndarray]],
    boxes: Optional[Sequence[TightBox]],
    cfg: PreprocessConfig,
    backbone,
    loss_shape: tuple[int, int],
    **kw,
) -> list[PreparedSample]:
    out = []
    for i, sid in enumerate(ids):
        out.append(
            prepare_sample(
                sid,
                images[i],
                None if masks is None else masks[i],
                None if boxes is None else boxes[i],
                cfg,
                backbone,
                loss_shape,
                **kw,
            )
        )
    return out


def prepare_from_manifest(
    entries: Sequence[ManifestEntry],
    cfg: PreprocessConfig,
    backbone,
    loss_shape: tuple[int, int],
    root=None,
    **kw,
) -> list[PreparedSample]:
    out = []
    for e in entries:
        image = load_image(_resolve(e.image_path, root))
        mask = None if e.mask_path is None else load_mask(_resolve(e.mask_path, root))
        box = None if e.box is None else TightBox(*e.box)
        out.append(
            prepare_sample(
                e.id, image, mask, box, cfg, backbone, loss_shape,
                spacing=e.spacing, preprocessed=e.preprocessed, **kw,
            )
        )
    return out
