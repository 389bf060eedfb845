"""Binarization, Dice scoring, report aggregation, and evaluation drivers.

Predictions are projected back to the original image resolution before
binarization, so scores are comparable with how ground-truth masks are
stored.  Both-empty masks score Dice 1.0; the binarization threshold is
0.5 with the >= convention.
"""
from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass
from typing import Sequence

import numpy as np
import torch
from torch import Tensor

from .data import PreparedSample, embedding_for, project_to_original
from .errors import EmptyInput, EmptyList, MissingMask, ShapeMismatch


@dataclass
class MetricsReport:
    per_sample: list[dict]
    mean: float
    std: float
    n: int
    config_fingerprint: str = ""

    def to_dict(self) -> dict:
        return asdict(self)

    def save(self, path):
        with open(path, "w") as fh:
            json.dump(self.to_dict(), fh, indent=1, sort_keys=True)

    def save_csv(self, path):
        with open(path, "w") as fh:
            fh.write("id,dice\n")
            for row in self.per_sample:
                fh.write(f"{row['id']},{row['dice']:.6f}\n")


def binarize(f, threshold: float = 0.5) -> np.ndarray:
    """Pixel is foreground iff probability >= threshold."""
    if not 0.0 < threshold < 1.0:
        raise ValueError("threshold must lie in (0, 1)")
    arr = f.detach().cpu().numpy() if isinstance(f, Tensor) else np.asarray(f)
    return (arr >= threshold).astype(np.uint8)


def dice(a: np.ndarray, b: np.ndarray) -> float:
    """2|a&b| / (|a|+|b|); 1.0 when both masks are empty."""
    a = np.asarray(a).astype(bool)
    b = np.asarray(b).astype(bool)
    if a.shape != b.shape:
        raise ShapeMismatch(f"mask shapes differ: {a.shape} vs {b.shape}")
    denom = int(a.sum()) + int(b.sum())
    if denom == 0:
        return 1.0
    return 2.0 * int((a & b).sum()) / denom


def fingerprint_config(config: dict) -> str:
    blob = json.dumps(config, sort_keys=True, default=str).encode()
    return hashlib.sha256(blob).hexdigest()[:12]


def _report_from_scores(scores: list[tuple[str, float]], fingerprint: str) -> MetricsReport:
    values = np.array([s for _, s in scores], dtype=np.float64)
    return MetricsReport(
        per_sample=[{"id": sid, "dice": float(v)} for sid, v in scores],
        mean=float(values.mean()),
        std=float(values.std()),
        n=len(scores),
        config_fingerprint=fingerprint,
    )


def predict_probability(module, backbone, sample: PreparedSample) -> np.ndarray:
    """Probability map for one prepared sample at original resolution."""
    with torch.no_grad():
        emb = embedding_for(sample, backbone, use_cache=True)
        pr = module(emb.data)
        prob = backbone.decode_mask(emb, pr, sample.input_shape)
    return project_to_original(prob, sample)


def evaluate(
    module,
    backbone,
    samples: Sequence[PreparedSample],
    config_fingerprint: str = "",
    threshold: float = 0.5,
) -> MetricsReport:
    """Per-sample Dice at original resolution, plus mean and std."""
    if len(samples) == 0:
        raise EmptyInput("evaluation requires at least one sample")
    scores = []
    for s in samples:
        if s.mask is None:
            raise MissingMask(f"sample {s.id!r} has no ground-truth mask")
        prob = predict_probability(module, backbone, s)
        scores.append((s.id, dice(binarize(prob, threshold), s.mask)))
    return _report_from_scores(scores, config_fingerprint)


def evaluate_prompted_baseline(
    backbone,
    samples: Sequence[PreparedSample],
    config_fingerprint: str = "",
    threshold: float = 0.5,
) -> MetricsReport:
    """Reference path: the backbone prompted with each sample's tight box."""
    if len(samples) == 0:
        raise EmptyInput("evaluation requires at least one sample")
    scores = []
    for s in samples:
        if s.mask is None:
            raise MissingMask(f"sample {s.id!r} has no ground-truth mask")
        with torch.no_grad():
            emb = embedding_for(s, backbone, use_cache=True)
            pr = backbone.encode_box_prompt(s.box_input)
            prob = backbone.decode_mask(emb, pr, s.input_shape)
        prob_orig = project_to_original(prob, s)
        scores.append((s.id, dice(binarize(prob_orig, threshold), s.mask)))
    return _report_from_scores(scores, config_fingerprint)


def aggregate_runs(reports: Sequence[MetricsReport]) -> dict:
    """Mean of run means and the population std across them."""
    if len(reports) == 0:
        raise EmptyList("cannot aggregate zero reports")
    means = np.array([r.mean for r in reports], dtype=np.float64)
    return {"mean": float(means.mean()), "std": float(means.std()), "n_runs": len(reports)}
