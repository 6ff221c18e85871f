"""Training and inference orchestration: the epoch loop (oversampling,
augmentation, batched optimizer updates, early stopping), k-fold
cross-validation, model-averaging ensembles, and the full image-in,
diagnosis-out path.
"""

import csv
import hashlib
import io
import json
import time
from dataclasses import dataclass, field, asdict, replace

import numpy as np
import torch

from . import augment as aug
from . import metrics as metrics_mod
from . import network as net
from . import postprocess as post
from . import roi as roi_mod
from .checkpoint import Checkpoint
from .dataset import oversample_plan, sample_rng_seed, stratified_kfold
from .errors import (
    ArchitectureMismatch,
    DivergedLoss,
    MissingGroundTruth,
    ShapeError,
    SingleClass,
)
from .losses import LossWeights, total_loss


@dataclass
class TrainConfig:
    batch_size: int = 32
    learning_rate: float = 1e-3
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    patience_epochs: int = 20
    max_epochs: int = 300
    loss_weights: LossWeights = field(default_factory=LossWeights)
    augment: aug.AugmentConfig = field(default_factory=aug.AugmentConfig)
    oversample_target: float = 0.5
    seed: int = 0
    deterministic: bool = True

    def __post_init__(self):
        if self.batch_size < 1 or self.patience_epochs < 1 or self.learning_rate <= 0:
            raise ValueError("invalid training config")
        if self.max_epochs < 1:
            raise ValueError("max_epochs must be at least 1")


def config_digest(cfg):
    """Stable hash of a config dataclass, recorded in checkpoints/reports."""
    payload = json.dumps(asdict(cfg), sort_keys=True, default=str).encode()
    return hashlib.sha256(payload).hexdigest()[:16]


class EarlyStopper:
    """Stop after `patience` consecutive epochs without improvement."""

    def __init__(self, patience):
        self.patience = patience
        self.best = np.inf
        self.best_epoch = -1
        self.stale = 0
        self.epoch = -1

    def update(self, value):
        """Record one epoch's validation loss; returns (improved, stop)."""
        self.epoch += 1
        if value < self.best:
            self.best = value
            self.best_epoch = self.epoch
            self.stale = 0
            return True, False
        self.stale += 1
        return False, self.stale >= self.patience


@dataclass
class EpochRecord:
    epoch: int
    l_od: float
    l_cp: float
    l_cls: float
    total: float
    val_total: float
    wall_clock: float = 0.0


@dataclass
class TrainLog:
    records: list = field(default_factory=list)

    CSV_FIELDS = ("epoch", "l_od", "l_cp", "l_cls", "total", "val_total")

    def append(self, record):
        self.records.append(record)

    @property
    def val_losses(self):
        return [r.val_total for r in self.records]

    def to_csv(self):
        """Deterministic CSV (wall-clock excluded, shortest-repr floats)."""
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(self.CSV_FIELDS)
        for r in self.records:
            writer.writerow([r.epoch] + [repr(getattr(r, f)) for f in self.CSV_FIELDS[1:]])
        return buf.getvalue()

    def save(self, path):
        with open(path, "w", newline="") as fh:
            fh.write(self.to_csv())


def _batch_bounds(n, batch_size):
    """Contiguous batch ranges; a trailing singleton is merged into the
    previous batch because batch statistics need >= 2 values."""
    bounds = [(s, min(s + batch_size, n)) for s in range(0, n, batch_size)]
    if len(bounds) > 1 and bounds[-1][1] - bounds[-1][0] == 1:
        last_start, last_stop = bounds.pop()
        prev_start, _ = bounds.pop()
        bounds.append((prev_start, last_stop))
    return bounds


def _apply_determinism(deterministic):
    if deterministic:
        torch.use_deterministic_algorithms(True)
        torch.set_num_threads(1)


def _require_ground_truth(samples):
    for s in samples:
        if not s.has_masks or s.label is None:
            raise MissingGroundTruth(f"sample {s.id} lacks masks or label")


def _check_sides(samples, side):
    for s in samples:
        if s.image.shape[0] != side or s.image.shape[1] != side:
            raise ShapeError(
                f"sample {s.id} is {s.image.shape[:2]}, expected {side}x{side};"
                " run ROI extraction first"
            )


def _to_targets(samples):
    y_od = np.stack([s.od_mask for s in samples]).astype(np.float32)
    y_oc = np.stack([s.oc_mask for s in samples]).astype(np.float32)
    y = np.array([s.label for s in samples], dtype=np.float32)
    return y_od, y_oc, y


def _batch_tensors(samples):
    x = net.to_batch_tensor(np.stack([s.image for s in samples]))
    y_od, y_oc, y = _to_targets(samples)
    return x, torch.from_numpy(y_od), torch.from_numpy(y_oc), torch.from_numpy(y)


def _evaluate_loss(model, samples, weights, batch_size):
    """Mean loss terms over samples, without augmentation (eval mode)."""
    model.eval()
    sums = np.zeros(4)
    with torch.no_grad():
        for start in range(0, len(samples), batch_size):
            chunk = samples[start : start + batch_size]
            x, y_od, y_oc, y = _batch_tensors(chunk)
            bd = total_loss(model(x), (y_od, y_oc, y), weights).as_floats()
            sums += np.array([bd.l_od, bd.l_cp, bd.l_cls, bd.total]) * len(chunk)
    return sums / len(samples)


def train(train_samples, val_samples, cfg, arch=None):
    """Fit the model with ADAM, early stopping on the validation loss.

    Every epoch oversamples the minority class, augments each copy with
    its own derived RNG stream, shuffles, and steps on fixed-size batches.
    Returns the checkpoint with the best validation loss and the log.
    """
    if not train_samples or not val_samples:
        raise MissingGroundTruth("need nonempty train and validation sets")
    _require_ground_truth(train_samples)
    _require_ground_truth(val_samples)
    arch = arch or net.ArchitectureConfig()
    _check_sides(train_samples, arch.input_side)
    _check_sides(val_samples, arch.input_side)
    _apply_determinism(cfg.deterministic)

    digest = config_digest(cfg)
    model = net.build_model(arch, seed=cfg.seed)
    optimizer = torch.optim.Adam(
        model.parameters(),
        lr=cfg.learning_rate,
        betas=(cfg.adam_beta1, cfg.adam_beta2),
        eps=cfg.adam_eps,
    )

    labels = [s.label for s in train_samples]
    try:
        plan = oversample_plan(labels, cfg.oversample_target)
    except SingleClass:
        plan = [(i, 1) for i in range(len(train_samples))]
    expanded = [(idx, copy) for idx, count in plan for copy in range(count)]

    acfg = cfg.augment
    basis = None
    if acfg.enable_color_transfer:
        acfg = aug.with_dataset_priors(acfg, [s.image for s in train_samples])
    if acfg.enable_pca:
        basis = aug.fit_pca_basis_from_images([s.image for s in train_samples])

    augment_active = acfg.enable_geometric or acfg.enable_color_transfer or acfg.enable_pca

    log = TrainLog()
    stopper = EarlyStopper(cfg.patience_epochs)
    best_state = None
    best_epoch = -1

    for epoch in range(cfg.max_epochs):
        t0 = time.perf_counter()
        model.train()
        shuffle_rng = np.random.default_rng(sample_rng_seed(cfg.seed, "shuffle", epoch))
        order = shuffle_rng.permutation(len(expanded))

        sums = np.zeros(4)
        for start, stop in _batch_bounds(len(order), cfg.batch_size):
            chunk_ids = order[start:stop]
            chunk = []
            for pos in chunk_ids:
                idx, copy = expanded[pos]
                sample = train_samples[idx]
                if augment_active:
                    rng = np.random.default_rng(
                        sample_rng_seed(cfg.seed, "aug", epoch, sample.id, copy)
                    )
                    sample = aug.augment_sample(sample, acfg, rng, basis)
                chunk.append(sample)
            x, y_od, y_oc, y = _batch_tensors(chunk)
            optimizer.zero_grad()
            bd = total_loss(model(x), (y_od, y_oc, y), cfg.loss_weights)
            if not torch.isfinite(bd.total):
                raise DivergedLoss(f"non-finite loss at epoch {epoch}", train_log=log)
            bd.total.backward()
            optimizer.step()
            floats = bd.as_floats()
            sums += np.array([floats.l_od, floats.l_cp, floats.l_cls, floats.total]) * len(chunk)
        train_means = sums / len(expanded)

        val = _evaluate_loss(model, val_samples, cfg.loss_weights, cfg.batch_size)
        if not np.isfinite(val[3]):
            raise DivergedLoss(f"non-finite validation loss at epoch {epoch}", train_log=log)
        log.append(
            EpochRecord(
                epoch,
                *(float(v) for v in train_means),
                float(val[3]),
                wall_clock=time.perf_counter() - t0,
            )
        )
        improved, stop = stopper.update(float(val[3]))
        if improved:
            best_state = {k: v.detach().cpu().numpy().copy() for k, v in model.state_dict().items()}
            best_epoch = epoch
        if stop:
            break

    ckpt = Checkpoint(
        arch=arch,
        state=best_state,
        best_val_loss=float(stopper.best),
        best_epoch=best_epoch,
        config_digest=digest,
    )
    return ckpt, log


def predict_masks(model_or_ckpt, samples, params=None, batch_size=32):
    """Refined masks and glaucoma scores for ROI-sized samples.

    Post-processing runs on the soft maps; the returned scores are the raw
    network probabilities (the classifier never sees post-processing).
    """
    model = model_or_ckpt.to_model() if isinstance(model_or_ckpt, Checkpoint) else model_or_ckpt
    side = model.cfg.input_side
    params = (params or post.PostprocessParams()).scaled(side)
    masks = {}
    scores = {}
    warnings = {}
    for start in range(0, len(samples), batch_size):
        chunk = samples[start : start + batch_size]
        out = net.forward(model, np.stack([s.image for s in chunk]))
        for i, s in enumerate(chunk):
            result = post.postprocess_pair(out.od_soft[i], out.oc_soft[i], params)
            masks[s.id] = (result.od_mask, result.oc_mask)
            scores[s.id] = float(out.p_glaucoma[i])
            if result.warnings:
                warnings[s.id] = result.warnings
    return masks, scores, warnings


@dataclass
class FoldResult:
    checkpoint: Checkpoint
    report: metrics_mod.EvalReport


def cross_validate(samples, cfg, arch=None, k=4, post_params=None):
    """Stratified k-fold cross-validation.

    Each fold trains a fresh model on the other folds (early stopping on
    the held-out part) and evaluates the held-out part with
    post-processing applied.
    """
    arch = arch or net.ArchitectureConfig()
    _require_ground_truth(samples)
    labels = [s.label for s in samples]
    splits = stratified_kfold(labels, k, cfg.seed)

    results = []
    for split in splits:
        fold_cfg = replace(cfg, seed=cfg.seed + split.fold_id)
        train_set = [samples[i] for i in split.train_ids]
        val_set = [samples[i] for i in split.val_ids]
        ckpt, log = train(train_set, val_set, fold_cfg, arch)
        ckpt.fold_id = split.fold_id
        ckpt.extra["epochs_run"] = len(log.records)

        model = ckpt.to_model()
        masks, scores, _ = predict_masks(model, val_set, post_params, cfg.batch_size)
        report = metrics_mod.evaluate_dataset(
            masks,
            scores,
            val_set,
            metadata={
                "fold_id": split.fold_id,
                "seed": cfg.seed,
                "config_digest": ckpt.config_digest,
                "resolution": f"{arch.input_side}x{arch.input_side}",
            },
        )
        results.append(FoldResult(ckpt, report))
    return results


def _models_from_checkpoints(checkpoints):
    if not checkpoints:
        raise ArchitectureMismatch("need at least one checkpoint")
    archs = [c.arch if isinstance(c, Checkpoint) else c.cfg for c in checkpoints]
    if any(a != archs[0] for a in archs):
        raise ArchitectureMismatch("ensemble members must share one architecture config")
    return [c.to_model() if isinstance(c, Checkpoint) else c for c in checkpoints]


def ensemble_predict(checkpoints, images):
    """Arithmetic mean of per-model soft masks and probabilities,
    computed before any binarization or post-processing."""
    models = _models_from_checkpoints(checkpoints)
    od_sum = oc_sum = p_sum = None
    for model in models:
        out = net.forward(model, images)
        od = out.od_soft.astype(np.float64)
        oc = out.oc_soft.astype(np.float64)
        p = out.p_glaucoma.astype(np.float64)
        if od_sum is None:
            od_sum, oc_sum, p_sum = od, oc, p
        else:
            od_sum += od
            oc_sum += oc
            p_sum += p
    n = len(models)
    return net.ModelOutputs(od_sum / n, oc_sum / n, p_sum / n)


@dataclass
class InferenceResult:
    od_mask: np.ndarray  # source resolution
    oc_mask: np.ndarray
    p_glaucoma: float
    cdr: float
    box: roi_mod.RoiBox
    warnings: list = field(default_factory=list)


def infer_end_to_end(image, checkpoints, post_params=None):
    """Full path: locate disc, crop, ensemble forward, post-process, map
    masks back to source resolution, measure the vertical CDR.

    The glaucoma probability is the ensemble output on the raw soft masks.
    """
    checkpoints = list(checkpoints)
    arch = checkpoints[0].arch if isinstance(checkpoints[0], Checkpoint) else checkpoints[0].cfg
    side = arch.input_side

    box = roi_mod.locate_disc(image)
    crop = roi_mod.crop_roi(image, box, out_size=side)
    out = ensemble_predict(checkpoints, crop.image[None])

    params = (post_params or post.PostprocessParams()).scaled(side)
    refined = post.postprocess_pair(out.od_soft[0], out.oc_soft[0], params)
    warnings = list(refined.warnings)

    h, w = image.shape[:2]
    od_full = roi_mod.map_mask_back(refined.od_mask, crop, h, w)
    oc_full = roi_mod.map_mask_back(refined.oc_mask, crop, h, w)

    if od_full.any():
        cdr = metrics_mod.vertical_cdr(od_full, oc_full)
    else:
        cdr = 0.0
        warnings.append("empty disc prediction, cdr set to 0")
    return InferenceResult(
        od_full, oc_full, float(out.p_glaucoma[0]), float(cdr), box, warnings
    )
