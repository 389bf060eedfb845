"""Optimization of the prompt module against a frozen backbone.

Each step fetches an image embedding (cached once up front, or re-encoded
per step), runs the prompt module and mask decoder, evaluates the
constraint losses on the configured grid, and applies an AdamW step to
the prompt-module parameters only.  Runs are bit-reproducible for a fixed
(config, seeds, data) triple; the backbone checksum is asserted unchanged
at the end of every run.
"""
from __future__ import annotations

import json
import time
from dataclasses import asdict, dataclass, field, replace
from math import ceil
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
import torch

from .data import PreparedSample, embedding_for, few_shot_indices
from .errors import EmptyTrainSet, EpochOutOfRange, InvariantViolation
from .evaluation import MetricsReport, evaluate
from .geometry import build_segments, partition_regions
from .losses import LossWeights, PenaltyConfig, SizePrior, total_loss
from .promptnet import PromptModule, PromptModuleConfig, save_prompt_module

LOSS_GRIDS = ("model_input", "decoder_output")


@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 4
    lr: float = 0.001
    weight_decay: float = 0.0001
    epochs: int = 100
    lr_drop_factor: float = 0.1
    lr_drop_at: float = 0.5
    weights: LossWeights = field(default_factory=LossWeights)
    prior: SizePrior = field(default_factory=SizePrior)
    penalty: PenaltyConfig = field(default_factory=PenaltyConfig)
    band_width: int = 5
    seed: int = 0
    use_cache: bool = True
    patience: Optional[int] = 20  # early stop on stalled validation Dice
    loss_grid: str = "model_input"

    def __post_init__(self):
        if self.batch_size < 1 or self.epochs < 1:
            raise ValueError("batch_size and epochs must be >= 1")
        if not 0.0 < self.lr_drop_at < 1.0:
            raise ValueError("lr_drop_at must be in (0, 1)")
        if self.loss_grid not in LOSS_GRIDS:
            raise ValueError(f"loss_grid must be one of {LOSS_GRIDS}")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class RunRecord:
    config: dict
    epochs: list[dict]
    best_epoch: int
    best_val_dice: Optional[float]
    selection: str
    wall_clock_s: float
    seed: int
    subset_ids: list[str]
    checkpoint_path: Optional[str] = None
    test_report: Optional[dict] = None

    def to_dict(self) -> dict:
        return asdict(self)


def lr_at(epoch: int, cfg: TrainConfig) -> float:
    """Step schedule: base LR, dropped by lr_drop_factor after the split."""
    if not 0 <= epoch < cfg.epochs:
        raise EpochOutOfRange(f"epoch {epoch} outside [0, {cfg.epochs})")
    drop_epoch = ceil(cfg.epochs * cfg.lr_drop_at)
    return cfg.lr if epoch < drop_epoch else cfg.lr * cfg.lr_drop_factor


def loss_shape_for(cfg: TrainConfig, backbone) -> tuple[int, int]:
    if cfg.loss_grid == "decoder_output":
        return tuple(backbone.spec.decoder_output_grid)
    return tuple(backbone.spec.input_size)


def train(
    cfg: TrainConfig,
    train_samples: Sequence[PreparedSample],
    val_samples: Sequence[PreparedSample],
    backbone,
    module: PromptModule,
    run_dir=None,
    checkpoint_meta: Optional[dict] = None,
) -> RunRecord:
    """Optimize the prompt module; returns the full run record.

    Model selection takes the best validation-Dice epoch when a non-empty
    val set with masks is given, the final epoch otherwise.
    """
    if len(train_samples) == 0:
        raise EmptyTrainSet("training requires at least one sample")
    t0 = time.perf_counter()
    checksum_before = backbone.checksum()

    constraints = {}
    for s in train_samples:
        part = partition_regions(s.box_loss, s.loss_shape)
        segs = build_segments(s.box_loss, cfg.band_width)
        constraints[s.id] = (part, segs)

    if cfg.use_cache:
        for s in train_samples:
            embedding_for(s, backbone, use_cache=True)

    opt = torch.optim.AdamW(
        module.parameters(), lr=cfg.lr, weight_decay=cfg.weight_decay
    )
    gen = torch.Generator().manual_seed(cfg.seed)
    n = len(train_samples)
    validate = len(val_samples) > 0 and all(v.mask is not None for v in val_samples)

    epoch_rows: list[dict] = []
    best_val = -1.0
    best_epoch = -1
    best_state = None
    for epoch in range(cfg.epochs):
        lr = lr_at(epoch, cfg)
        for group in opt.param_groups:
            group["lr"] = lr
        perm = torch.randperm(n, generator=gen).tolist()
        sums = {"empty": 0.0, "tight": 0.0, "size": 0.0, "total": 0.0}
        for start in range(0, n, cfg.batch_size):
            batch = perm[start : start + cfg.batch_size]
            per_sample = []
            for i in batch:
                s = train_samples[i]
                emb = embedding_for(s, backbone, cfg.use_cache)
                pr = module(emb.data)
                f = backbone.decode_mask(emb, pr, s.loss_shape)
                part, segs = constraints[s.id]
                per_sample.append(
                    total_loss(f, part, segs, cfg.weights, cfg.prior, cfg.penalty)
                )
            batch_total = torch.stack([b.total for b in per_sample]).sum() / len(batch)
            opt.zero_grad()
            batch_total.backward()
            opt.step()
            for b in per_sample:
                d = b.floats()
                for key in sums:
                    sums[key] += d[key]
        row = {"epoch": epoch, "lr": lr}
        row.update({k: v / n for k, v in sums.items()})
        if validate:
            val_dice = _validation_dice(module, backbone, val_samples)
            row["val_dice"] = val_dice
            if val_dice > best_val:
                best_val = val_dice
                best_epoch = epoch
                best_state = {
                    k: v.detach().clone() for k, v in module.state_dict().items()
                }
        epoch_rows.append(row)
        if (
            validate
            and cfg.patience is not None
            and epoch - best_epoch >= cfg.patience
        ):
            break

    if best_state is not None:
        module.load_state_dict(best_state)
        selection = "best_val_dice"
    else:
        best_epoch = epoch_rows[-1]["epoch"]
        selection = "final"

    if backbone.checksum() != checksum_before:
        raise InvariantViolation("backbone parameters changed during training")

    record = RunRecord(
        config=cfg.to_dict(),
        epochs=epoch_rows,
        best_epoch=best_epoch,
        best_val_dice=best_val if validate else None,
        selection=selection,
        wall_clock_s=time.perf_counter() - t0,
        seed=cfg.seed,
        subset_ids=[s.id for s in train_samples],
    )
    if run_dir is not None:
        record.checkpoint_path = str(_write_run_dir(
            Path(run_dir), record, module, cfg, checkpoint_meta
        ))
    return record


def _validation_dice(module, backbone, val_samples) -> float:
    report = evaluate(module, backbone, val_samples)
    return report.mean


def _write_run_dir(run_dir: Path, record: RunRecord, module, cfg, meta) -> Path:
    run_dir.mkdir(parents=True, exist_ok=True)
    with open(run_dir / "config.json", "w") as fh:
        json.dump(cfg.to_dict(), fh, indent=1, sort_keys=True)
    with open(run_dir / "metrics.jsonl", "w") as fh:
        for row in record.epochs:
            fh.write(json.dumps(row, sort_keys=True) + "\n")
    ckpt = run_dir / "best.ckpt"
    save_prompt_module(ckpt, module, extra_meta=meta)
    with open(run_dir / "report.json", "w") as fh:
        json.dump(record.to_dict(), fh, indent=1, sort_keys=True)
    return ckpt


def repeated_experiment(
    base_cfg: TrainConfig,
    module_cfg: PromptModuleConfig,
    backbone,
    train_pool: Sequence[PreparedSample],
    val_samples: Sequence[PreparedSample],
    test_samples: Sequence[PreparedSample],
    k: int,
    subset_seeds: Sequence[int] = (0, 1, 2),
    init_seeds: Sequence[int] = (0, 1, 2),
    run_root=None,
) -> dict:
    """Few-shot protocol: one run per (subset seed, init seed) pair.

    Each run trains on a fresh uniform k-subset of the train pool and is
    scored on the held-out test samples; the report aggregates the run
    means (mean and population std).
    """
    runs = []
    for ss in subset_seeds:
        idx = few_shot_indices(len(train_pool), k, ss)
        subset = [train_pool[i] for i in idx]
        for ins in init_seeds:
            cfg = replace(base_cfg, seed=ins)
            mod_cfg = replace(module_cfg, init_seed=ins)
            module = PromptModule(mod_cfg)
            run_dir = (
                None
                if run_root is None
                else Path(run_root) / f"subset{ss}_init{ins}"
            )
            record = train(cfg, subset, val_samples, backbone, module, run_dir=run_dir)
            report = evaluate(module, backbone, test_samples)
            record.test_report = {"mean": report.mean, "std": report.std, "n": report.n}
            runs.append(
                {
                    "subset_seed": ss,
                    "init_seed": ins,
                    "test_dice_mean": report.mean,
                    "test_dice_std": report.std,
                    "record": record.to_dict(),
                }
            )
    means = np.array([r["test_dice_mean"] for r in runs], dtype=np.float64)
    result = {
        "k": k,
        "subset_seeds": list(subset_seeds),
        "init_seeds": list(init_seeds),
        "runs": runs,
        "dice_mean": float(means.mean()),
        "dice_std": float(means.std()),
    }
    if run_root is not None:
        with open(Path(run_root) / "aggregate.json", "w") as fh:
            json.dump(result, fh, indent=1, sort_keys=True)
    return result
