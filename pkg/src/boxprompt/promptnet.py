"""Trainable prompt module: image embedding -> (dense, sparse) prompt pair.

Architecture: a shared 1x1 channel-reducing convolution, then a dense
branch (3x3 convolution preserving the grid) and a sparse branch (1x1
convolution, global max pooling, fully-connected to the token block).
Every convolution is followed by ReLU.  Initialization is deterministic
per seed: fan-in-scaled uniform weights, zero biases.
"""
from __future__ import annotations

import io
import json
import zipfile
from dataclasses import asdict, dataclass
from typing import Optional

import numpy as np
import torch
from torch import Tensor, nn

from .errors import IOFailure, ShapeMismatch, ShapeSpecMismatch

CHECKPOINT_FORMAT = "boxprompt-checkpoint-v1"


@dataclass(frozen=True)
class PromptModuleConfig:
    in_channels: int
    reduced_channels: int
    dense_out_channels: int
    sparse_tokens: int
    sparse_dim: int
    grid: tuple[int, int]
    init_seed: int = 0
    # width of the sparse-branch 1x1 convolution; None = reduced_channels
    sparse_channels: Optional[int] = None

    def __post_init__(self):
        dims = (
            self.in_channels,
            self.reduced_channels,
            self.dense_out_channels,
            self.sparse_tokens,
            self.sparse_dim,
            *self.grid,
        )
        if any(d < 1 for d in dims):
            raise ShapeSpecMismatch(f"all dimensions must be >= 1, got {dims}")
        if self.sparse_channels is not None and self.sparse_channels < 1:
            raise ShapeSpecMismatch("sparse_channels must be >= 1")

    @property
    def effective_sparse_channels(self) -> int:
        return self.sparse_channels or self.reduced_channels


@dataclass
class PromptEmbedding:
    """Dense [C, gh, gw] and sparse [K, D] prompt tensors."""

    dense: Tensor
    sparse: Tensor


class PromptModule(nn.Module):
    def __init__(self, cfg: PromptModuleConfig):
        super().__init__()
        self.cfg = cfg
        self.reduce = nn.Conv2d(cfg.in_channels, cfg.reduced_channels, 1)
        self.dense_conv = nn.Conv2d(
            cfg.reduced_channels, cfg.dense_out_channels, 3, padding=1
        )
        self.sparse_conv = nn.Conv2d(
            cfg.reduced_channels, cfg.effective_sparse_channels, 1
        )
        self.sparse_fc = nn.Linear(
            cfg.effective_sparse_channels, cfg.sparse_tokens * cfg.sparse_dim
        )
        self._init_parameters(cfg.init_seed)

    def _init_parameters(self, seed: int):
        gen = torch.Generator().manual_seed(seed)
        with torch.no_grad():
            for layer in (self.reduce, self.dense_conv, self.sparse_conv, self.sparse_fc):
                fan_in = layer.weight[0].numel()
                bound = 1.0 / fan_in**0.5
                layer.weight.uniform_(-bound, bound, generator=gen)
                layer.bias.zero_()

    def forward(self, emb: Tensor) -> PromptEmbedding:
        """Map one image embedding [C, gh, gw] to a prompt pair."""
        expect = (self.cfg.in_channels, *self.cfg.grid)
        if tuple(emb.shape) != expect:
            raise ShapeMismatch(f"embedding {tuple(emb.shape)}, expected {expect}")
        x = torch.relu(self.reduce(emb.unsqueeze(0)))
        dense = torch.relu(self.dense_conv(x)).squeeze(0)
        s = torch.relu(self.sparse_conv(x))
        pooled = torch.amax(s, dim=(2, 3))
        sparse = self.sparse_fc(pooled).view(self.cfg.sparse_tokens, self.cfg.sparse_dim)
        return PromptEmbedding(dense=dense, sparse=sparse)


def init_prompt_module(cfg: PromptModuleConfig, shape_spec=None) -> PromptModule:
    """Build a module, optionally validated against a backbone shape spec."""
    if shape_spec is not None:
        checks = (
            (cfg.in_channels, shape_spec.embed_channels, "in_channels"),
            (cfg.dense_out_channels, shape_spec.dense_prompt_channels, "dense_out_channels"),
            (tuple(cfg.grid), tuple(shape_spec.dense_prompt_grid), "grid"),
            (cfg.sparse_dim, shape_spec.token_dim, "sparse_dim"),
        )
        for got, want, name in checks:
            if got != want:
                raise ShapeSpecMismatch(f"{name}={got} but backbone expects {want}")
    return PromptModule(cfg)


def parameter_set(module: PromptModule) -> dict[str, Tensor]:
    """Named trainable arrays, in a stable order."""
    return {name: p.detach() for name, p in module.named_parameters()}


def parameter_count(module: PromptModule) -> int:
    return sum(p.numel() for p in module.parameters() if p.requires_grad)


def medsam_prompt_config(init_seed: int = 0) -> PromptModuleConfig:
    """Module sized for the ViT-B embedding layout (~2.4M parameters)."""
    return PromptModuleConfig(
        in_channels=256,
        reduced_channels=128,
        dense_out_channels=256,
        sparse_tokens=2,
        sparse_dim=256,
        grid=(64, 64),
        init_seed=init_seed,
        sparse_channels=3200,
    )


def save_prompt_module(path, module: PromptModule, extra_meta: dict | None = None):
    """Write a checkpoint archive: meta.json + one .npy per parameter.

    Arrays are stored float32, little-endian, row-major.  extra_meta rides
    along under the "extra" key (preprocessing config, loss grid, ...).
    """
    meta = {
        "format": CHECKPOINT_FORMAT,
        "config": _config_dict(module.cfg),
        "extra": extra_meta or {},
    }
    try:
        with zipfile.ZipFile(path, "w", zipfile.ZIP_STORED) as zf:
            zf.writestr("meta.json", json.dumps(meta, indent=1, sort_keys=True))
            for name, p in module.named_parameters():
                buf = io.BytesIO()
                np.save(buf, p.detach().cpu().numpy().astype("<f4"))
                zf.writestr(f"params/{name}.npy", buf.getvalue())
    except OSError as exc:
        raise IOFailure(f"cannot write checkpoint {path}: {exc}") from exc


def load_prompt_module(path) -> tuple[PromptModule, dict]:
    """Rebuild a module from a checkpoint archive; returns (module, extra)."""
    try:
        with zipfile.ZipFile(path) as zf:
            meta = json.loads(zf.read("meta.json"))
            if meta.get("format") != CHECKPOINT_FORMAT:
                raise IOFailure(f"unsupported checkpoint format in {path}")
            cfg_d = dict(meta["config"])
            cfg_d["grid"] = tuple(cfg_d["grid"])
            module = PromptModule(PromptModuleConfig(**cfg_d))
            state = {}
            for name, _ in module.named_parameters():
                arr = np.load(io.BytesIO(zf.read(f"params/{name}.npy")))
                state[name] = torch.from_numpy(arr)
            module.load_state_dict(state)
    except (OSError, zipfile.BadZipFile, KeyError) as exc:
        raise IOFailure(f"cannot read checkpoint {path}: {exc}") from exc
    return module, meta.get("extra", {})


def _config_dict(cfg: PromptModuleConfig) -> dict:
    d = asdict(cfg)
    d["grid"] = list(cfg.grid)
    return d
