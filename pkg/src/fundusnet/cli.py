"""Command-line interface.

Subcommands cover the whole workflow: synthesize a desk-scale dataset,
extract ROIs, train or cross-validate, predict, post-process soft maps,
evaluate against ground truth, and plot the ROC curve.
"""

import dataclasses
import json
from pathlib import Path

import click
import numpy as np
import yaml
from PIL import Image

from . import metrics as metrics_mod
from . import network as net
from . import pipeline
from . import postprocess as post
from . import roi as roi_mod
from .augment import AugmentConfig
from .checkpoint import Checkpoint
from .dataset import (
    LabelEncoding,
    SynthParams,
    decode_mask,
    encode_mask,
    load_dataset,
    make_synthetic_dataset,
    save_dataset,
    stratified_kfold,
)
from .losses import LossWeights


def _from_dict(cls, data, name):
    known = {f.name for f in dataclasses.fields(cls)}
    unknown = set(data) - known
    if unknown:
        raise click.UsageError(f"unknown {name} config keys: {sorted(unknown)}")
    coerced = dict(data)
    for key in ("encoder_widths", "decoder_widths", "structural_widths",
                "disc_radius_range", "cdr_range", "color_mean_prior", "color_std_prior"):
        if key in coerced and coerced[key] is not None:
            coerced[key] = tuple(
                tuple(v) if isinstance(v, (list, tuple)) else v for v in coerced[key]
            )
    return cls(**coerced)


def load_config(path):
    if not path:
        return {}
    with open(path) as fh:
        return yaml.safe_load(fh) or {}


def build_configs(raw, seed=None, deterministic=None):
    """Materialize the dataclass configs from the YAML dict plus overrides."""
    train_kwargs = dict(raw.get("train", {}))
    if "loss_weights" in train_kwargs:
        train_kwargs["loss_weights"] = _from_dict(LossWeights, train_kwargs["loss_weights"], "loss_weights")
    train_kwargs["augment"] = _from_dict(AugmentConfig, raw.get("augment", {}), "augment")
    if seed is not None:
        train_kwargs["seed"] = seed
    if deterministic is not None:
        train_kwargs["deterministic"] = deterministic
    return {
        "train": _from_dict(pipeline.TrainConfig, train_kwargs, "train"),
        "arch": _from_dict(net.ArchitectureConfig, raw.get("arch", {}), "arch"),
        "post": _from_dict(post.PostprocessParams, raw.get("postprocess", {}), "postprocess"),
        "synth": _from_dict(SynthParams, raw.get("synth", {}), "synth"),
    }


@click.group()
@click.option("--config", "config_path", type=click.Path(exists=True), default=None,
              help="YAML config with train/arch/augment/postprocess/synth sections.")
@click.option("--seed", type=int, default=None, help="Override the config seed.")
@click.option("--deterministic/--no-deterministic", default=True)
@click.pass_context
def main(ctx, config_path, seed, deterministic):
    raw = load_config(config_path)
    ctx.obj = build_configs(raw, seed=seed, deterministic=deterministic)


@main.command("synth-data")
@click.option("--out", "out_dir", required=True, type=click.Path())
@click.option("--n", default=40, show_default=True)
@click.option("--glaucoma-fraction", default=0.1, show_default=True)
@click.pass_obj
def synth_data(cfg, out_dir, n, glaucoma_fraction):
    """Write a synthetic dataset in the standard layout."""
    params = cfg["synth"]
    samples = make_synthetic_dataset(params, n, glaucoma_fraction, seed=cfg["train"].seed)
    save_dataset(samples, out_dir)
    click.echo(f"wrote {len(samples)} samples to {out_dir}")


@main.command("extract-roi")
@click.option("--in", "in_dir", required=True, type=click.Path(exists=True))
@click.option("--out", "out_dir", required=True, type=click.Path())
@click.option("--size", default=400, show_default=True)
@click.pass_obj
def extract_roi(cfg, in_dir, out_dir, size):
    """Locate the disc in every image and write crops plus transforms."""
    out_dir = Path(out_dir)
    samples = load_dataset(in_dir)
    cropped = []
    for sample in samples:
        box = roi_mod.locate_disc(sample.image)
        crop_sample, crop = roi_mod.crop_sample(sample, box, out_size=size)
        cropped.append(crop_sample)
        (out_dir / "transforms").mkdir(parents=True, exist_ok=True)
        crop.save_transform(out_dir / "transforms" / f"{sample.id}.json")
    save_dataset(cropped, out_dir)
    click.echo(f"extracted {len(cropped)} ROIs to {out_dir}")


def _prepare_training_samples(samples, input_side):
    """Crop to ROIs when the source images are not already ROI-sized."""
    ready = []
    for sample in samples:
        if sample.image.shape[0] == input_side and sample.image.shape[1] == input_side:
            ready.append(sample)
        else:
            box = roi_mod.locate_disc(sample.image)
            cropped, _ = roi_mod.crop_sample(sample, box, out_size=input_side)
            ready.append(cropped)
    return ready


@main.command()
@click.option("--data", "data_dir", required=True, type=click.Path(exists=True))
@click.option("--out", "out_dir", required=True, type=click.Path())
@click.option("--val-fraction", default=0.2, show_default=True)
@click.pass_obj
def train(cfg, data_dir, out_dir, val_fraction):
    """Train one model with a stratified train/validation split."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    tcfg, arch = cfg["train"], cfg["arch"]
    samples = load_dataset(data_dir, supervised=True)
    samples = _prepare_training_samples(samples, arch.input_side)

    k = max(2, int(round(1.0 / val_fraction)))
    split = stratified_kfold([s.label for s in samples], k, tcfg.seed)[0]
    train_set = [samples[i] for i in split.train_ids]
    val_set = [samples[i] for i in split.val_ids]

    ckpt, log = pipeline.train(train_set, val_set, tcfg, arch)
    ckpt.save(out_dir / "checkpoint.bin")
    log.save(out_dir / "train_log.csv")
    click.echo(
        f"trained {len(log.records)} epochs, best val loss "
        f"{ckpt.best_val_loss:.4f} at epoch {ckpt.best_epoch}"
    )


@main.command("cross-validate")
@click.option("--data", "data_dir", required=True, type=click.Path(exists=True))
@click.option("--out", "out_dir", required=True, type=click.Path())
@click.option("--k", default=4, show_default=True)
@click.pass_obj
def cross_validate_cmd(cfg, data_dir, out_dir, k):
    """K-fold cross-validation; writes one checkpoint and report per fold."""
    out_dir = Path(out_dir)
    tcfg, arch = cfg["train"], cfg["arch"]
    samples = load_dataset(data_dir, supervised=True)
    samples = _prepare_training_samples(samples, arch.input_side)

    results = pipeline.cross_validate(samples, tcfg, arch, k=k, post_params=cfg["post"])
    summary = {"folds": [], "mean_dice_od": 0.0, "mean_dice_oc": 0.0, "mean_auc": 0.0}
    for result in results:
        fold_dir = out_dir / f"fold{result.checkpoint.fold_id}"
        fold_dir.mkdir(parents=True, exist_ok=True)
        result.checkpoint.save(fold_dir / "checkpoint.bin")
        result.report.save(fold_dir / "report.json")
        seg = result.report.seg.summary
        summary["folds"].append(
            {
                "fold_id": result.checkpoint.fold_id,
                "dice_od": seg["dice_od"]["mean"],
                "dice_oc": seg["dice_oc"]["mean"],
                "cdr_error": seg["cdr_error"]["mean"],
                "auc": result.report.roc.auc,
            }
        )
    n = len(results)
    summary["mean_dice_od"] = sum(f["dice_od"] for f in summary["folds"]) / n
    summary["mean_dice_oc"] = sum(f["dice_oc"] for f in summary["folds"]) / n
    summary["mean_auc"] = sum(f["auc"] for f in summary["folds"]) / n
    with open(out_dir / "summary.json", "w") as fh:
        json.dump(summary, fh, indent=2, sort_keys=True)
    click.echo(json.dumps(summary["folds"], indent=2))


def _save_soft_png(path, soft):
    arr = np.clip(np.round(np.asarray(soft, dtype=np.float64) * 65535.0), 0, 65535)
    Image.fromarray(arr.astype(np.uint16)).save(path)


def _load_soft_png(path):
    arr = np.asarray(Image.open(path), dtype=np.float64)
    return arr / 65535.0


@main.command()
@click.option("--data", "data_dir", required=True, type=click.Path(exists=True))
@click.option("--out", "out_dir", required=True, type=click.Path())
@click.option("--checkpoint", "checkpoint_paths", required=True, multiple=True,
              type=click.Path(exists=True))
@click.option("--save-soft", is_flag=True, default=False,
              help="Also write 16-bit soft maps next to the masks.")
@click.pass_obj
def predict(cfg, data_dir, out_dir, checkpoint_paths, save_soft):
    """Ensemble inference: per-image JSON plus encoded mask PNGs."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    checkpoints = [Checkpoint.load(p) for p in checkpoint_paths]
    side = checkpoints[0].arch.input_side
    params = cfg["post"]
    enc = LabelEncoding()

    samples = load_dataset(data_dir)
    for sample in samples:
        if sample.image.shape[0] == side and sample.image.shape[1] == side:
            out = pipeline.ensemble_predict(checkpoints, sample.image[None])
            refined = post.postprocess_pair(out.od_soft[0], out.oc_soft[0], params.scaled(side))
            od, oc = refined.od_mask, refined.oc_mask
            p = float(out.p_glaucoma[0])
            cdr = metrics_mod.vertical_cdr(od, oc) if od.any() else 0.0
            warnings = refined.warnings
            soft = (out.od_soft[0], out.oc_soft[0])
        else:
            result = pipeline.infer_end_to_end(sample.image, checkpoints, params)
            od, oc, p, cdr = result.od_mask, result.oc_mask, result.p_glaucoma, result.cdr
            warnings = result.warnings
            soft = None
        oc = oc & od if (oc & ~od).any() else oc  # encoding requires nesting
        Image.fromarray(encode_mask(od, oc, enc)).save(out_dir / f"{sample.id}.png")
        record = {"id": sample.id, "p_glaucoma": p, "cdr": cdr, "warnings": warnings}
        with open(out_dir / f"{sample.id}.json", "w") as fh:
            json.dump(record, fh, indent=2, sort_keys=True)
        if save_soft and soft is not None:
            _save_soft_png(out_dir / f"{sample.id}.od.png", soft[0])
            _save_soft_png(out_dir / f"{sample.id}.oc.png", soft[1])
    click.echo(f"predicted {len(samples)} images into {out_dir}")


@main.command("postprocess")
@click.option("--in", "in_dir", required=True, type=click.Path(exists=True))
@click.option("--out", "out_dir", required=True, type=click.Path())
@click.pass_obj
def postprocess_cmd(cfg, in_dir, out_dir):
    """Refine stored 16-bit soft maps (<id>.od.png / <id>.oc.png) into
    encoded binary masks."""
    in_dir, out_dir = Path(in_dir), Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    enc = LabelEncoding()
    ids = sorted(p.name[: -len(".od.png")] for p in in_dir.glob("*.od.png"))
    for sample_id in ids:
        od_soft = _load_soft_png(in_dir / f"{sample_id}.od.png")
        oc_soft = _load_soft_png(in_dir / f"{sample_id}.oc.png")
        params = cfg["post"].scaled(od_soft.shape[0])
        refined = post.postprocess_pair(od_soft, oc_soft, params)
        oc = refined.oc_mask & refined.od_mask if (refined.oc_mask & ~refined.od_mask).any() else refined.oc_mask
        Image.fromarray(encode_mask(refined.od_mask, oc, enc)).save(out_dir / f"{sample_id}.png")
    click.echo(f"postprocessed {len(ids)} soft map pairs")


@main.command()
@click.option("--pred", "pred_dir", required=True, type=click.Path(exists=True))
@click.option("--gt", "gt_dir", required=True, type=click.Path(exists=True))
@click.option("--out", "out_path", required=True, type=click.Path())
@click.pass_obj
def evaluate(cfg, pred_dir, gt_dir, out_path):
    """Score predicted masks and probabilities against a ground-truth set."""
    pred_dir = Path(pred_dir)
    enc = LabelEncoding()
    gt_samples = load_dataset(gt_dir, supervised=True)
    masks = {}
    scores = {}
    for sample in gt_samples:
        indexed = np.asarray(Image.open(pred_dir / f"{sample.id}.png").convert("L"))
        masks[sample.id] = decode_mask(indexed, enc)
        with open(pred_dir / f"{sample.id}.json") as fh:
            scores[sample.id] = float(json.load(fh)["p_glaucoma"])
    report = metrics_mod.evaluate_dataset(
        masks, scores, gt_samples, metadata={"seed": cfg["train"].seed}
    )
    report.save(out_path)
    seg = report.seg.summary
    click.echo(
        f"dice_od {seg['dice_od']['mean']:.3f}  dice_oc {seg['dice_oc']['mean']:.3f}  "
        f"cdr_err {seg['cdr_error']['mean']:.3f}  auc {report.roc.auc:.3f}"
    )


@main.command("plot-roc")
@click.option("--report", "report_path", required=True, type=click.Path(exists=True))
@click.option("--out", "out_path", required=True, type=click.Path())
def plot_roc(report_path, out_path):
    """Render the stored ROC curve as an SVG figure."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    report = metrics_mod.EvalReport.load(report_path)
    fig, ax = plt.subplots(figsize=(5, 5))
    ax.plot(report.roc.fpr, report.roc.tpr, label=f"AUC = {report.roc.auc:.3f}")
    ax.plot([0, 1], [0, 1], linestyle="--", color="gray", linewidth=0.8)
    ax.set_xlabel("False positive rate (1 - Specificity)")
    ax.set_ylabel("True positive rate (Sensitivity)")
    ax.set_title("Glaucoma classification ROC")
    ax.legend(loc="lower right")
    fig.savefig(out_path, format="svg", bbox_inches="tight")
    click.echo(f"wrote {out_path}")


if __name__ == "__main__":
    main()
