"""Command-line pipeline driver.

Subcommands: synth, preprocess, cache-embeddings, train, evaluate,
predict.  Options can come from a flat JSON --config file with flag
overrides; unknown keys are rejected.  Every command writes its outputs
under --out and never mutates inputs.

Exit codes: 0 success, 2 configuration error, 3 data error, 4 backbone
unavailable, 5 internal invariant violation.
"""
from __future__ import annotations

import argparse
import json
import sys
from dataclasses import asdict
from pathlib import Path

import numpy as np

from . import data as data_mod
from .backbone import (
    CacheEntry,
    MedSamBackbone,
    TOY_SPEC,
    ToyBackbone,
    cache_get,
    cache_key,
    cache_put,
)
from .errors import (
    BackboneUnavailable,
    BoxPromptError,
    ConfigError,
    DataError,
    InvariantViolation,
)
from .estimator import PENALTY_NAMES, default_prompt_config
from .evaluation import evaluate, evaluate_prompted_baseline, fingerprint_config
from .losses import LossWeights, PenaltyConfig, SizePrior
from .promptnet import PromptModule, load_prompt_module
from .train import TrainConfig, loss_shape_for, train

CONFIG_KEYS = {
    "backbone", "backbone_seed", "medsam_weights", "cache",
    "penalty", "t", "band_width", "lambda_tight", "lambda_size",
    "eps_lo", "eps_hi", "epochs", "batch_size", "lr", "weight_decay",
    "lr_drop_factor", "lr_drop_at", "patience", "seed", "subset_seed", "k",
    "use_cache", "loss_grid", "threshold", "min_px",
    "clip_lo_pct", "clip_hi_pct", "rescale_max", "crop_pad_size",
    "model_input", "resample_spacing",
}

# flags that override config-file keys when given on the command line
_FLAG_KEYS = [
    ("backbone", "backbone"), ("backbone_seed", "backbone_seed"),
    ("medsam_weights", "medsam_weights"), ("cache", "cache"),
    ("penalty", "penalty"), ("t", "t"), ("band_width", "band_width"),
    ("lambda_tight", "lambda_tight"), ("lambda_size", "lambda_size"),
    ("eps_lo", "eps_lo"), ("eps_hi", "eps_hi"), ("epochs", "epochs"),
    ("batch_size", "batch_size"), ("lr", "lr"),
    ("weight_decay", "weight_decay"), ("patience", "patience"),
    ("seed", "seed"), ("subset_seed", "subset_seed"), ("k", "k"),
    ("loss_grid", "loss_grid"), ("threshold", "threshold"),
    ("min_px", "min_px"), ("crop_pad", "crop_pad_size"),
]


def _load_config(args) -> dict:
    cfg = {}
    if getattr(args, "config", None):
        try:
            with open(args.config) as fh:
                cfg = json.load(fh)
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read config file {args.config}: {exc}")
        unknown = set(cfg) - CONFIG_KEYS
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
    for flag, key in _FLAG_KEYS:
        val = getattr(args, flag, None)
        if val is not None:
            cfg[key] = val
    return cfg


def _build_backbone(cfg: dict):
    name = cfg.get("backbone", "toy")
    if name == "toy":
        return ToyBackbone(TOY_SPEC, seed=int(cfg.get("backbone_seed", 0)))
    if name == "medsam":
        return MedSamBackbone(cfg.get("medsam_weights"))
    raise ConfigError(f"unknown backbone {name!r}")


def _pre_config(cfg: dict, backbone) -> data_mod.PreprocessConfig:
    model_input = tuple(cfg.get("model_input", backbone.spec.input_size))
    crop_pad = tuple(cfg.get("crop_pad_size", model_input))
    return data_mod.PreprocessConfig(
        clip_lo_pct=float(cfg.get("clip_lo_pct", 0.5)),
        clip_hi_pct=float(cfg.get("clip_hi_pct", 99.5)),
        rescale_max=float(cfg.get("rescale_max", 255.0)),
        crop_pad_size=crop_pad,
        model_input=model_input,
        resample_spacing=cfg.get("resample_spacing"),
    )


def _train_config(cfg: dict) -> TrainConfig:
    penalty = cfg.get("penalty", "logbarrier")
    if penalty not in PENALTY_NAMES:
        raise ConfigError(f"penalty must be one of {sorted(PENALTY_NAMES)}")
    try:
        return TrainConfig(
            batch_size=int(cfg.get("batch_size", 4)),
            lr=float(cfg.get("lr", 0.001)),
            weight_decay=float(cfg.get("weight_decay", 0.0001)),
            epochs=int(cfg.get("epochs", 100)),
            lr_drop_factor=float(cfg.get("lr_drop_factor", 0.1)),
            lr_drop_at=float(cfg.get("lr_drop_at", 0.5)),
            weights=LossWeights(
                float(cfg.get("lambda_tight", 0.0001)),
                float(cfg.get("lambda_size", 0.01)),
            ),
            prior=SizePrior(float(cfg.get("eps_lo", 0.5)), float(cfg.get("eps_hi", 0.9))),
            penalty=PenaltyConfig(PENALTY_NAMES[penalty], float(cfg.get("t", 5.0))),
            band_width=int(cfg.get("band_width", 5)),
            seed=int(cfg.get("seed", 0)),
            use_cache=bool(cfg.get("use_cache", True)),
            patience=cfg.get("patience"),
            loss_grid=cfg.get("loss_grid", "model_input"),
        )
    except ValueError as exc:
        raise ConfigError(str(exc))


def _out_dir(args) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def cmd_synth(args) -> int:
    cfg = _load_config(args)
    out = _out_dir(args)
    n_total = args.n + args.n_val + args.n_test
    ds = data_mod.generate_synthetic(
        n_total, seed=int(cfg.get("seed", args.seed or 0)),
        canvas=(args.canvas, args.canvas), rotate=not args.no_rotate,
    )
    entries = data_mod.write_synthetic_dataset(ds, out, (args.n, args.n_val, args.n_test))
    print(f"wrote {len(entries)} samples and manifest to {out / 'manifest.jsonl'}")
    return 0


def cmd_preprocess(args) -> int:
    cfg = _load_config(args)
    backbone = _build_backbone(cfg)
    pre = _pre_config(cfg, backbone)
    out = _out_dir(args)
    entries = data_mod.load_manifest(args.manifest)
    root = Path(args.manifest).parent
    min_px = int(cfg.get("min_px", 100))
    new_entries = []
    for e in entries:
        if e.image_path.endswith((".nii", ".nii.gz")):
            new_entries.extend(
                data_mod.expand_volume(
                    data_mod._resolve(e.image_path, root), out / "slices", pre,
                    base_id=e.id, split=e.split,
                    mask_path=None if e.mask_path is None else data_mod._resolve(e.mask_path, root),
                    min_px=min_px,
                )
            )
            continue
        image = data_mod.load_image(data_mod._resolve(e.image_path, root))
        mask = None if e.mask_path is None else data_mod.load_mask(data_mod._resolve(e.mask_path, root))
        inten = data_mod.preprocess_intensity(image, pre)
        std = data_mod.spatial_standardize(inten, mask, pre, spacing=e.spacing)
        img_file = out / "images" / f"{e.id}.npy"
        img_file.parent.mkdir(parents=True, exist_ok=True)
        np.save(img_file, std.image)
        mask_file = None
        box = None
        if std.mask is not None:
            mask_file = out / "masks" / f"{e.id}.png"
            mask_file.parent.mkdir(parents=True, exist_ok=True)
            data_mod.save_image_png(mask_file, (std.mask > 0) * 255, bit_depth=8)
            from .geometry import tight_box_from_mask

            box = tight_box_from_mask(std.mask).as_tuple()
        elif e.box is not None:
            from .geometry import TightBox

            box = data_mod.standardize_box(TightBox(*e.box), std, pre).as_tuple()
        new_entries.append(
            data_mod.ManifestEntry(
                id=e.id, image_path=str(img_file),
                mask_path=None if mask_file is None else str(mask_file),
                box=box, split=e.split, preprocessed=True,
            )
        )
    new_entries = data_mod.filter_min_foreground(new_entries, min_px=min_px)
    manifest_out = out / "manifest.jsonl"
    data_mod.save_manifest(new_entries, manifest_out)
    print(f"wrote {len(new_entries)} standardized samples to {manifest_out}")
    return 0


def cmd_cache_embeddings(args) -> int:
    cfg = _load_config(args)
    backbone = _build_backbone(cfg)
    pre = _pre_config(cfg, backbone)
    cache_dir = Path(cfg.get("cache") or (Path(args.out) / "cache" if args.out else None))
    entries = data_mod.load_manifest(args.manifest)
    root = Path(args.manifest).parent
    hits = writes = 0
    for e in entries:
        image = data_mod.load_image(data_mod._resolve(e.image_path, root))
        key = cache_key(e.id, backbone.fingerprint)
        if cache_get(cache_dir, key) is not None:
            hits += 1
            continue
        if e.preprocessed:
            std_img = image
        else:
            inten = data_mod.preprocess_intensity(image, pre)
            std_img = data_mod.spatial_standardize(inten, None, pre, spacing=e.spacing).image
        model_in = data_mod.to_model_input(std_img, pre.model_input, pre.rescale_max)
        emb = backbone.encode_image(model_in, source_id=e.id)
        cache_put(cache_dir, CacheEntry(key=key, payload=emb))
        writes += 1
    stats = {"entries": len(entries), "hits": hits, "writes": writes,
             "fingerprint": backbone.fingerprint, "cache_dir": str(cache_dir)}
    print(json.dumps(stats, sort_keys=True))
    if args.out:
        with open(Path(args.out) / "cache_stats.json", "w") as fh:
            json.dump(stats, fh, indent=1, sort_keys=True)
    return 0


def cmd_train(args) -> int:
    cfg = _load_config(args)
    backbone = _build_backbone(cfg)
    pre = _pre_config(cfg, backbone)
    tcfg = _train_config(cfg)
    out = _out_dir(args)
    entries = data_mod.load_manifest(args.manifest)
    root = Path(args.manifest).parent
    train_entries = data_mod.split_entries(entries, "train")
    val_entries = data_mod.split_entries(entries, "val")
    if cfg.get("k") is not None:
        spec = data_mod.FewShotSpec(
            k=int(cfg["k"]), subset_seed=int(cfg.get("subset_seed", 0)),
            init_seed=tcfg.seed,
        )
        train_entries = data_mod.sample_few_shot(entries, spec)
    loss_shape = loss_shape_for(tcfg, backbone)
    cache_dir = cfg.get("cache")
    train_samples = data_mod.prepare_from_manifest(
        train_entries, pre, backbone, loss_shape, root=root, cache_dir=cache_dir
    )
    val_samples = data_mod.prepare_from_manifest(
        val_entries, pre, backbone, loss_shape, root=root, cache_dir=cache_dir
    )
    module = PromptModule(
        default_prompt_config(backbone.spec, init_seed=tcfg.seed)
    )
    meta = {
        "preprocess": _jsonable(asdict(pre)),
        "backbone": {"name": cfg.get("backbone", "toy"),
                     "seed": int(cfg.get("backbone_seed", 0))},
        "loss_grid": tcfg.loss_grid,
        "cli_config": _jsonable(cfg),
    }
    record = train(
        tcfg, train_samples, val_samples, backbone, module,
        run_dir=out, checkpoint_meta=meta,
    )
    last = record.epochs[-1]
    print(
        f"run complete: {len(record.epochs)} epochs, "
        f"final total loss {last['total']:.4f}, "
        f"best val dice {record.best_val_dice if record.best_val_dice is not None else 'n/a'}, "
        f"checkpoint {record.checkpoint_path}"
    )
    return 0


def cmd_evaluate(args) -> int:
    cfg = _load_config(args)
    out = _out_dir(args)
    meta = {}
    module = None
    if args.checkpoint:
        module, meta = load_prompt_module(args.checkpoint)
    elif not args.prompted_baseline:
        raise ConfigError("evaluate needs --checkpoint unless --prompted-baseline")
    for key, value in meta.get("cli_config", {}).items():
        cfg.setdefault(key, value)
    backbone = _build_backbone(cfg)
    if "preprocess" in meta:
        pd = dict(meta["preprocess"])
        pd["crop_pad_size"] = tuple(pd["crop_pad_size"])
        pd["model_input"] = tuple(pd["model_input"])
        pre = data_mod.PreprocessConfig(**pd)
    else:
        pre = _pre_config(cfg, backbone)
    entries = data_mod.split_entries(data_mod.load_manifest(args.manifest), args.split)
    if not entries:
        raise DataError(f"manifest has no {args.split!r} entries")
    root = Path(args.manifest).parent
    samples = data_mod.prepare_from_manifest(
        entries, pre, backbone, tuple(backbone.spec.input_size),
        root=root, cache_dir=cfg.get("cache"),
    )
    fingerprint = fingerprint_config(cfg)
    threshold = float(cfg.get("threshold", 0.5))
    if args.prompted_baseline:
        report = evaluate_prompted_baseline(backbone, samples, fingerprint, threshold)
        name = "baseline_metrics"
    else:
        report = evaluate(module, backbone, samples, fingerprint, threshold)
        name = "metrics"
    report.save(out / f"{name}.json")
    if args.csv:
        report.save_csv(out / f"{name}.csv")
    print(f"dice mean {report.mean:.4f} std {report.std:.4f} over {report.n} samples "
          f"-> {out / (name + '.json')}")
    return 0


def cmd_predict(args) -> int:
    cfg = _load_config(args)
    out = _out_dir(args)
    module, meta = load_prompt_module(args.checkpoint)
    for key, value in meta.get("cli_config", {}).items():
        cfg.setdefault(key, value)
    backbone = _build_backbone(cfg)
    if "preprocess" in meta:
        pd = dict(meta["preprocess"])
        pd["crop_pad_size"] = tuple(pd["crop_pad_size"])
        pd["model_input"] = tuple(pd["model_input"])
        pre = data_mod.PreprocessConfig(**pd)
    else:
        pre = _pre_config(cfg, backbone)
    image = data_mod.load_image(args.image)
    sample = data_mod.prepare_inference(Path(args.image).stem, image, pre, backbone)
    from .evaluation import predict_probability

    prob = predict_probability(module, backbone, sample)
    stem = Path(args.image).stem
    prob_path = out / f"{stem}_prob.npy"
    mask_path = out / f"{stem}_mask.png"
    np.save(prob_path, prob.astype(np.float32))
    threshold = float(cfg.get("threshold", 0.5))
    data_mod.save_image_png(mask_path, (prob >= threshold) * 255, bit_depth=8)
    print(f"wrote {prob_path} and {mask_path}")
    return 0


def _jsonable(obj):
    if isinstance(obj, dict):
        return {k: _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    return obj


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(
        prog="boxprompt",
        description="Box-supervised prompt learning for a frozen segmentation backbone",
    )
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, out_required=True):
        sp.add_argument("--config", help="flat JSON config file")
        sp.add_argument("--out", required=out_required, help="output directory")
        sp.add_argument("--seed", type=int, default=None)
        sp.add_argument("--backbone", choices=["toy", "medsam"], default=None)
        sp.add_argument("--backbone-seed", type=int, default=None, dest="backbone_seed")
        sp.add_argument("--medsam-weights", default=None, dest="medsam_weights")
        sp.add_argument("--cache", default=None, help="embedding cache directory")
        sp.add_argument("--crop-pad", type=int, nargs=2, default=None, dest="crop_pad")
        sp.add_argument("--threshold", type=float, default=None)

    sp = sub.add_parser("synth", help="generate a synthetic ellipse dataset")
    common(sp)
    sp.add_argument("--n", type=int, required=True, help="train split size")
    sp.add_argument("--n-val", type=int, default=8, dest="n_val")
    sp.add_argument("--n-test", type=int, default=50, dest="n_test")
    sp.add_argument("--canvas", type=int, default=64)
    sp.add_argument("--no-rotate", action="store_true", dest="no_rotate")
    sp.set_defaults(func=cmd_synth)

    sp = sub.add_parser("preprocess", help="standardize a raw dataset")
    common(sp)
    sp.add_argument("--manifest", required=True)
    sp.add_argument("--min-px", type=int, default=None, dest="min_px")
    sp.set_defaults(func=cmd_preprocess)

    sp = sub.add_parser("cache-embeddings", help="encode and cache image embeddings")
    common(sp, out_required=False)
    sp.add_argument("--manifest", required=True)
    sp.set_defaults(func=cmd_cache_embeddings)

    sp = sub.add_parser("train", help="train the prompt module")
    common(sp)
    sp.add_argument("--manifest", required=True)
    sp.add_argument("--k", type=int, default=None, help="few-shot subset size")
    sp.add_argument("--subset-seed", type=int, default=None, dest="subset_seed")
    sp.add_argument("--penalty", choices=sorted(PENALTY_NAMES), default=None)
    sp.add_argument("--t", type=float, default=None)
    sp.add_argument("--band-width", type=int, default=None, dest="band_width")
    sp.add_argument("--lambda-tight", type=float, default=None, dest="lambda_tight")
    sp.add_argument("--lambda-size", type=float, default=None, dest="lambda_size")
    sp.add_argument("--eps-lo", type=float, default=None, dest="eps_lo")
    sp.add_argument("--eps-hi", type=float, default=None, dest="eps_hi")
    sp.add_argument("--epochs", type=int, default=None)
    sp.add_argument("--batch-size", type=int, default=None, dest="batch_size")
    sp.add_argument("--lr", type=float, default=None)
    sp.add_argument("--weight-decay", type=float, default=None, dest="weight_decay")
    sp.add_argument("--patience", type=int, default=None)
    sp.add_argument("--loss-grid", choices=["model_input", "decoder_output"],
                    default=None, dest="loss_grid")
    sp.set_defaults(func=cmd_train)

    sp = sub.add_parser("evaluate", help="score a checkpoint on a manifest split")
    common(sp)
    sp.add_argument("--checkpoint", default=None)
    sp.add_argument("--manifest", required=True)
    sp.add_argument("--split", default="test", choices=["train", "val", "test"])
    sp.add_argument("--prompted-baseline", action="store_true", dest="prompted_baseline")
    sp.add_argument("--csv", action="store_true")
    sp.set_defaults(func=cmd_evaluate)

    sp = sub.add_parser("predict", help="segment one image with a checkpoint")
    common(sp)
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--image", required=True)
    sp.set_defaults(func=cmd_predict)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except DataError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3
    except BackboneUnavailable as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 4
    except (InvariantViolation, BoxPromptError, Exception) as exc:  # noqa: BLE001
        print(f"internal error: {exc}", file=sys.stderr)
        return 5


if __name__ == "__main__":
    sys.exit(main())
