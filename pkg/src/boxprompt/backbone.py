"""Adapter boundary to a frozen promptable segmentation backbone.

Two adapters share one interface: a deterministic toy backbone with fixed
seeded weights (a pure test oracle, always available) and an optional
real-weights adapter that wraps a user-supplied ViT-B checkpoint.  Both
expose image encoding, mask decoding from prompt embeddings, and a native
box-prompt path.  Backbone weights never receive gradients.

The on-disk embedding cache uses the PEMB1 layout: magic b"PEMB1", three
unsigned 32-bit little-endian dims (C, H, W), the row-major float32
little-endian payload, then the producing fingerprint as a uint32
length-prefixed UTF-8 string.
"""
from __future__ import annotations

import hashlib
import os
import struct
import tempfile
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numpy as np
import torch
from torch import Tensor
from torch.nn import functional as F

from .errors import (
    BackboneUnavailable,
    CacheConflict,
    IOFailure,
    ShapeMismatch,
    WrongInputSize,
)
from .geometry import TightBox
from .promptnet import PromptEmbedding

CACHE_MAGIC = b"PEMB1"


@dataclass(frozen=True)
class BackboneShapeSpec:
    embed_channels: int
    embed_grid: tuple[int, int]
    dense_prompt_channels: int
    dense_prompt_grid: tuple[int, int]
    token_dim: int
    input_size: tuple[int, int]
    decoder_output_grid: tuple[int, int]

    def __post_init__(self):
        dims = (
            self.embed_channels,
            *self.embed_grid,
            self.dense_prompt_channels,
            *self.dense_prompt_grid,
            self.token_dim,
            *self.input_size,
            *self.decoder_output_grid,
        )
        if any(d < 1 for d in dims):
            raise ShapeMismatch("all shape-spec dimensions must be positive")
        if tuple(self.dense_prompt_grid) != tuple(self.embed_grid):
            raise ShapeMismatch("dense prompt grid must equal the embedding grid")


@dataclass
class ImageEmbedding:
    """Frozen-encoder output [C, gh, gw] plus provenance."""

    data: Tensor
    source_id: str
    backbone_fingerprint: str


@dataclass
class CacheEntry:
    key: str
    payload: ImageEmbedding


TOY_SPEC = BackboneShapeSpec(
    embed_channels=32,
    embed_grid=(32, 32),
    dense_prompt_channels=8,
    dense_prompt_grid=(32, 32),
    token_dim=16,
    input_size=(64, 64),
    decoder_output_grid=(32, 32),
)

MEDSAM_VITB_SPEC = BackboneShapeSpec(
    embed_channels=256,
    embed_grid=(64, 64),
    dense_prompt_channels=256,
    dense_prompt_grid=(64, 64),
    token_dim=256,
    input_size=(1024, 1024),
    decoder_output_grid=(256, 256),
)


class ToyBackbone:
    """Deterministic stand-in backbone with fixed, non-trainable weights.

    Encoder: strided linear patch projection onto the embedding grid.
    Decoder: the embedding and dense prompt are RMS-normalized per pixel
    (as a transformer decoder would), a fixed linear map of their
    concatenation produces per-pixel queries, and the logit is the
    bilinear attention of queries with the (normalized) sparse tokens
    plus a direct linear read of the dense prompt, then logit upsampling
    and sigmoid.  Normalization bounds the logit range, so the sigmoid
    can never saturate beyond recovery.  With a zero prompt the map is
    uniformly sigmoid(decoder_bias); the default bias starts predictions
    below the size window, which keeps constrained training off the
    all-background attractor.
    """

    def __init__(self, spec: BackboneShapeSpec = TOY_SPEC, seed: int = 0,
                 dtype: torch.dtype = torch.float32, decoder_bias: float = -2.5):
        ph = spec.input_size[0] // spec.embed_grid[0]
        pw = spec.input_size[1] // spec.embed_grid[1]
        if spec.embed_grid[0] * ph != spec.input_size[0] or \
                spec.embed_grid[1] * pw != spec.input_size[1]:
            raise ShapeMismatch("input size must be a multiple of the embed grid")
        self.spec = spec
        self.seed = seed
        self.dtype = dtype
        self._patch = (ph, pw)
        gen = torch.Generator().manual_seed(seed)

        def draw(*shape, fan_in, gain=1.0):
            w = torch.empty(shape, dtype=torch.float32)
            w.uniform_(-1.0, 1.0, generator=gen)
            return (w * gain / fan_in**0.5).to(dtype)

        c, cd, d = spec.embed_channels, spec.dense_prompt_channels, spec.token_dim
        self._weights = {
            "patch_proj": draw(c, 3, ph, pw, fan_in=3 * ph * pw),
            "query": draw(d, c + cd, fan_in=c + cd),
            "query_bias": torch.zeros(d, dtype=dtype),
            "dense_read": draw(cd, fan_in=cd, gain=3.0),
            "box_token": draw(2, d, 4, fan_in=4),
            "box_token_bias": draw(2, d, fan_in=1),
            "no_mask": draw(cd, fan_in=1),
        }
        self._out_bias = float(decoder_bias)

    @property
    def fingerprint(self) -> str:
        g = self.spec.embed_grid
        return f"toy:v1:seed={self.seed}:c{self.spec.embed_channels}g{g[0]}x{g[1]}"

    def parameters(self) -> dict[str, Tensor]:
        return dict(self._weights)

    def checksum(self) -> str:
        h = hashlib.sha256()
        h.update(struct.pack("<d", self._out_bias))
        for name in sorted(self._weights):
            h.update(name.encode())
            h.update(self._weights[name].cpu().numpy().astype("<f8").tobytes())
        return h.hexdigest()

    def encode_image(self, image: Tensor, source_id: str = "") -> ImageEmbedding:
        expect = (3, *self.spec.input_size)
        if tuple(image.shape) != expect:
            raise WrongInputSize(f"image {tuple(image.shape)}, expected {expect}")
        emb = F.conv2d(
            image.to(self.dtype).unsqueeze(0),
            self._weights["patch_proj"],
            stride=self._patch,
        ).squeeze(0)
        return ImageEmbedding(emb, source_id, self.fingerprint)

    @staticmethod
    def _rms_norm(x: Tensor, dim: int, floor: float) -> Tensor:
        # floor=1 keeps zero inputs at zero; a small floor just avoids 0/0
        return x / torch.sqrt(x.pow(2).mean(dim=dim, keepdim=True) + floor)

    def decode_mask(
        self, emb: ImageEmbedding, pr: PromptEmbedding, out_shape: tuple[int, int]
    ) -> Tensor:
        spec = self.spec
        e = emb.data
        if tuple(e.shape) != (spec.embed_channels, *spec.embed_grid):
            raise ShapeMismatch(f"embedding shape {tuple(e.shape)}")
        if tuple(pr.dense.shape) != (spec.dense_prompt_channels, *spec.dense_prompt_grid):
            raise ShapeMismatch(f"dense prompt shape {tuple(pr.dense.shape)}")
        if pr.sparse.ndim != 2 or pr.sparse.shape[1] != spec.token_dim:
            raise ShapeMismatch(f"sparse prompt shape {tuple(pr.sparse.shape)}")
        dtype = pr.dense.dtype
        e_hat = self._rms_norm(e.to(dtype), dim=0, floor=1e-6)
        d_hat = self._rms_norm(pr.dense, dim=0, floor=1.0)
        s_hat = self._rms_norm(pr.sparse, dim=1, floor=1.0)
        u = torch.cat([e_hat, d_hat], dim=0)
        q = torch.einsum("ic,chw->ihw", self._weights["query"].to(dtype), u)
        q = q + self._weights["query_bias"].to(dtype)[:, None, None]
        attn = torch.einsum("ihw,ki->hw", q, s_hat) / spec.token_dim**0.5
        direct = torch.einsum("c,chw->hw", self._weights["dense_read"].to(dtype), d_hat)
        logits = attn + direct + self._out_bias
        logits = logits[None, None]
        if tuple(spec.decoder_output_grid) != tuple(spec.embed_grid):
            logits = F.interpolate(
                logits, size=spec.decoder_output_grid,
                mode="bilinear", align_corners=False,
            )
        if tuple(out_shape) != tuple(logits.shape[-2:]):
            logits = F.interpolate(
                logits, size=tuple(out_shape), mode="bilinear", align_corners=False
            )
        return torch.sigmoid(logits[0, 0])

    def encode_box_prompt(self, box: TightBox) -> PromptEmbedding:
        h, w = self.spec.input_size
        if box.rmax >= h or box.cmax >= w:
            raise ShapeMismatch(f"box {box.as_tuple()} outside input size {(h, w)}")
        corners = torch.tensor(
            [box.rmin / h, box.cmin / w, (box.rmax + 1) / h, (box.cmax + 1) / w],
            dtype=self.dtype,
        )
        sparse = torch.einsum("kdf,f->kd", self._weights["box_token"], corners)
        sparse = sparse + self._weights["box_token_bias"]
        dense = self._weights["no_mask"][:, None, None].expand(
            -1, *self.spec.dense_prompt_grid
        ).clone()
        return PromptEmbedding(dense=dense, sparse=sparse)


class MedSamBackbone:
    """Real-weights adapter around a ViT-B promptable segmenter.

    Optional component: requires the segment-anything package and a
    user-supplied checkpoint.  Every failure to assemble it raises
    BackboneUnavailable; no primary code path depends on it.
    """

    def __init__(self, weights_path, device: str = "cpu"):
        self.spec = MEDSAM_VITB_SPEC
        self.weights_path = Path(weights_path) if weights_path else None
        self.device = device
        if self.weights_path is None or not self.weights_path.is_file():
            raise BackboneUnavailable(
                f"backbone weights file not found: {weights_path}"
            )
        try:
            from segment_anything import sam_model_registry
        except ImportError as exc:
            raise BackboneUnavailable(
                "segment-anything is not installed; install the [medsam] extra"
            ) from exc
        try:
            self._sam = sam_model_registry["vit_b"](checkpoint=str(self.weights_path))
        except Exception as exc:
            raise BackboneUnavailable(f"cannot load weights: {exc}") from exc
        self._sam.to(device).eval()
        for p in self._sam.parameters():
            p.requires_grad_(False)
        self._fingerprint = _weights_fingerprint(self.weights_path)

    @property
    def fingerprint(self) -> str:
        return self._fingerprint

    def checksum(self) -> str:
        h = hashlib.sha256()
        for name, p in sorted(self._sam.named_parameters()):
            h.update(name.encode())
            h.update(p.detach().cpu().numpy().tobytes())
        return h.hexdigest()

    def encode_image(self, image: Tensor, source_id: str = "") -> ImageEmbedding:
        expect = (3, *self.spec.input_size)
        if tuple(image.shape) != expect:
            raise WrongInputSize(f"image {tuple(image.shape)}, expected {expect}")
        with torch.no_grad():
            emb = self._sam.image_encoder(image.unsqueeze(0).to(self.device))
        return ImageEmbedding(emb.squeeze(0).cpu(), source_id, self.fingerprint)

    def decode_mask(
        self, emb: ImageEmbedding, pr: PromptEmbedding, out_shape: tuple[int, int]
    ) -> Tensor:
        logits, _ = self._sam.mask_decoder(
            image_embeddings=emb.data.unsqueeze(0).to(self.device),
            image_pe=self._sam.prompt_encoder.get_dense_pe(),
            sparse_prompt_embeddings=pr.sparse.unsqueeze(0).to(self.device),
            dense_prompt_embeddings=pr.dense.unsqueeze(0).to(self.device),
            multimask_output=False,
        )
        if tuple(out_shape) != tuple(logits.shape[-2:]):
            logits = F.interpolate(
                logits, size=tuple(out_shape), mode="bilinear", align_corners=False
            )
        return torch.sigmoid(logits[0, 0]).cpu()

    def encode_box_prompt(self, box: TightBox) -> PromptEmbedding:
        # XYXY order with the far edge one past the inclusive max index
        xyxy = torch.tensor(
            [[box.cmin, box.rmin, box.cmax + 1, box.rmax + 1]],
            dtype=torch.float32, device=self.device,
        )
        with torch.no_grad():
            sparse, dense = self._sam.prompt_encoder(
                points=None, boxes=xyxy, masks=None
            )
        return PromptEmbedding(dense=dense.squeeze(0).cpu(), sparse=sparse.squeeze(0).cpu())


def _weights_fingerprint(path: Path) -> str:
    h = hashlib.sha256()
    size = path.stat().st_size
    with open(path, "rb") as fh:
        h.update(fh.read(4 * 1024 * 1024))
    h.update(str(size).encode())
    return f"medsam-vitb:v1:{h.hexdigest()[:16]}"


def cache_key(source_id: str, fingerprint: str) -> str:
    h = hashlib.sha256()
    h.update(source_id.encode("utf-8"))
    h.update(b"\x00")
    h.update(fingerprint.encode("utf-8"))
    return h.hexdigest()


def _entry_path(cache_dir, key: str) -> Path:
    return Path(cache_dir) / f"{key}.pemb"


def write_embedding_file(path, array: np.ndarray, fingerprint: str):
    arr = np.ascontiguousarray(array, dtype="<f4")
    if arr.ndim != 3:
        raise ShapeMismatch(f"embedding payload must be 3-D, got {arr.shape}")
    fp = fingerprint.encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(CACHE_MAGIC)
        fh.write(struct.pack("<3I", *arr.shape))
        fh.write(arr.tobytes(order="C"))
        fh.write(struct.pack("<I", len(fp)))
        fh.write(fp)


def read_embedding_file(path) -> tuple[np.ndarray, str]:
    with open(path, "rb") as fh:
        magic = fh.read(5)
        if magic != CACHE_MAGIC:
            raise IOFailure(f"{path}: bad magic {magic!r}")
        c, h, w = struct.unpack("<3I", fh.read(12))
        payload = fh.read(c * h * w * 4)
        if len(payload) != c * h * w * 4:
            raise IOFailure(f"{path}: truncated payload")
        (fp_len,) = struct.unpack("<I", fh.read(4))
        fp = fh.read(fp_len).decode("utf-8")
    arr = np.frombuffer(payload, dtype="<f4").reshape(c, h, w).copy()
    return arr, fp


def cache_put(cache_dir, entry: CacheEntry) -> bool:
    """Atomically store an entry; returns True if a file was written.

    Re-putting an identical payload is a no-op; a key collision with a
    different fingerprint or different bytes raises CacheConflict.
    """
    cache_dir = Path(cache_dir)
    cache_dir.mkdir(parents=True, exist_ok=True)
    path = _entry_path(cache_dir, entry.key)
    new = np.ascontiguousarray(
        entry.payload.data.detach().cpu().numpy(), dtype="<f4"
    )
    if path.exists():
        old, old_fp = read_embedding_file(path)
        if old_fp != entry.payload.backbone_fingerprint:
            raise CacheConflict(
                f"key {entry.key} already stored with fingerprint {old_fp!r}"
            )
        if old.shape != new.shape or old.tobytes() != new.tobytes():
            raise CacheConflict(f"key {entry.key} already stored with other payload")
        return False
    try:
        fd, tmp = tempfile.mkstemp(dir=cache_dir, suffix=".tmp")
        os.close(fd)
        write_embedding_file(tmp, new, entry.payload.backbone_fingerprint)
        os.replace(tmp, path)
    except OSError as exc:
        raise IOFailure(f"cache write failed for {path}: {exc}") from exc
    return True


def cache_get(cache_dir, key: str) -> Optional[CacheEntry]:
    """Fetch an entry by key; None on miss.

    The key is the identity: the stored payload carries the fingerprint
    but not the source id, which the caller already knows.
    """
    path = _entry_path(cache_dir, key)
    if not path.exists():
        return None
    try:
        arr, fp = read_embedding_file(path)
    except OSError as exc:
        raise IOFailure(f"cache read failed for {path}: {exc}") from exc
    emb = ImageEmbedding(torch.from_numpy(arr), "", fp)
    return CacheEntry(key=key, payload=emb)
