"""Deterministic training loop, evaluation battery, and checkpoint glue.

Two runs with the same config produce byte-identical loss logs and
checkpoints: parameter init, batch shuffling, and every reduction order are
driven by the config seed, and all arithmetic is float64 numpy. The
checkpoint at ``checkpoint_path`` is rewritten at init and after each epoch,
so a NaN abort mid-epoch leaves the last good state on disk.
"""

from __future__ import annotations

import json
import logging

import numpy as np

from . import autodiff as ad
from .autodiff import GradTape
from .config import TrainConfig
from .data import read_dataset
from .errors import CheckpointError, DegenerateInputError, NonFiniteError
from .metrics import (MetricsReport, binary_accuracy, eer, grounding_image,
                      multilabel_metrics, roc_auc, token_prf)
from .model import FMSModel, bbox_cxcywh_to_xyxy_np, make_batch
from .optim import AdamW, load_checkpoint, restore_params, save_checkpoint

log = logging.getLogger(__name__)

LOG_TERMS = ("total", "l_bic_star", "l_fs", "l_ss", "l_ci", "l_mlc_star",
             "l_bbox", "l_tok", "l_bic", "l_mmc", "l_v_uni", "l_t_uni",
             "l_ai_v", "l_ni_v", "l_ai_t", "l_ni_t")


def _scalar_losses(out):
    return {k: float(out[k].data) for k in LOG_TERMS if k in out}


def _batches(n, batch_size, order=None):
    order = np.arange(n) if order is None else order
    for start in range(0, n, batch_size):
        yield order[start:start + batch_size]


def _lr_factor(schedule, epoch, epochs):
    """Per-epoch learning-rate multiplier; cosine anneals 1.0 -> 0.1."""
    if schedule == "constant" or epochs <= 1:
        return 1.0
    t = epoch / (epochs - 1)
    return 0.1 + 0.9 * 0.5 * (1.0 + np.cos(np.pi * t))


def train(cfg: TrainConfig, progress=None):
    """Train from scratch; returns (model, loss_log, data_cfg).

    ``progress``: optional callable(epoch, losses_dict) invoked per epoch.
    """
    cfg.validate()
    data_cfg, samples = read_dataset(cfg.dataset_path)
    rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 11]))
    model = FMSModel(rng, data_cfg, cfg)
    params = list(model.named_parameters())
    opt = AdamW(params, lr=cfg.learning_rate, weight_decay=cfg.weight_decay)
    shuffle_rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 12]))

    meta = {"train_config": cfg.to_dict(), "dataset_config": data_cfg.to_dict()}
    log_path = cfg.log_path or cfg.checkpoint_path + ".log.jsonl"
    save_checkpoint(cfg.checkpoint_path, params, opt.state_dict(),
                    shuffle_rng.bit_generator.state, step=0, meta=meta)

    loss_log = []
    with open(log_path, "w", encoding="utf-8") as log_fh:
        for epoch in range(cfg.epochs):
            opt.lr = cfg.learning_rate * _lr_factor(cfg.lr_schedule, epoch,
                                                    cfg.epochs)
            order = shuffle_rng.permutation(len(samples))
            sums = {}
            n_batches = 0
            for idx in _batches(len(samples), cfg.batch_size, order):
                batch = make_batch([samples[i] for i in idx], data_cfg)
                with GradTape() as tape:
                    for _, p in params:
                        tape.watch(p)
                    out = model.forward(batch)
                    total = out["total"]
                if not np.isfinite(total.data):
                    raise NonFiniteError(
                        f"training aborted at epoch {epoch}: non-finite loss; "
                        f"last good checkpoint kept at {cfg.checkpoint_path}")
                tape.backward(total)
                opt.step()
                for k, v in _scalar_losses(out).items():
                    sums[k] = sums.get(k, 0.0) + v
                n_batches += 1
            means = {k: sums[k] / n_batches for k in LOG_TERMS if k in sums}
            entry = {"epoch": epoch, **means}
            log_fh.write(json.dumps(entry, separators=(",", ":")) + "\n")
            log_fh.flush()
            loss_log.append(entry)
            save_checkpoint(cfg.checkpoint_path, params, opt.state_dict(),
                            shuffle_rng.bit_generator.state,
                            step=(epoch + 1) * ((len(samples) + cfg.batch_size - 1)
                                                // cfg.batch_size),
                            meta=meta)
            if progress is not None:
                progress(epoch, means)
    return model, loss_log, data_cfg


def build_model_from_checkpoint(blob):
    """Reconstruct the model (architecture from meta, weights from blob)."""
    from .data import DatasetConfig
    meta = blob.get("meta") or {}
    try:
        data_cfg = DatasetConfig.from_dict(meta["dataset_config"])
        train_cfg = TrainConfig.from_dict(meta["train_config"])
    except (KeyError, TypeError) as e:
        raise CheckpointError(f"checkpoint meta incomplete: {e}") from e
    rng = np.random.default_rng(0)  # shapes only; weights overwritten below
    model = FMSModel(rng, data_cfg, train_cfg)
    restore_params(model.named_parameters(), blob)
    return model, data_cfg, train_cfg


def evaluate_model(model, data_cfg, samples, batch_size=64,
                   iou_include_genuine=False):
    """Full metrics battery on a labelled dataset.

    Grounding IoU is computed over samples that actually carry a
    ground-truth box; with ``iou_include_genuine`` genuine images are also
    counted, each scoring 0 (no box can be correct there).
    """
    pair_scores, pair_labels = [], []
    multi_probs, multi_labels = [], []
    pred_boxes, gt_boxes = [], []
    n_genuine_img = 0
    token_preds, token_labels = [], []
    for idx in _batches(len(samples), batch_size):
        chunk = [samples[i] for i in idx]
        batch = make_batch(chunk, data_cfg)
        pred = model.predict(batch)
        y_pair = np.maximum(batch["y_v"], batch["y_t"])
        pair_scores.append(pred["pair_prob"])
        pair_labels.append(y_pair)
        multi_probs.append(pred["multi_probs"])
        multi_labels.append(batch["y_multi"])
        fake_img = batch["y_v"] == 1
        n_genuine_img += int((~fake_img).sum())
        if fake_img.any():
            pred_boxes.append(
                bbox_cxcywh_to_xyxy_np(pred["bbox_cxcywh"][fake_img]))
            gt_boxes.append(batch["bbox_xyxy"][fake_img])
        token_preds.append(pred["token_probs"] > 0.5)
        token_labels.append(batch["y_tok"])

    scores = np.concatenate(pair_scores)
    labels = np.concatenate(pair_labels)
    mean_ap, cf1, of1 = multilabel_metrics(np.concatenate(multi_probs),
                                           np.concatenate(multi_labels))
    if not pred_boxes:
        raise DegenerateInputError("evaluation set has no fake images; "
                                   "grounding metrics undefined")
    iou_mean, iou50, iou75 = grounding_image(np.concatenate(pred_boxes),
                                             np.concatenate(gt_boxes))
    if iou_include_genuine and n_genuine_img:
        n_fake = sum(len(b) for b in pred_boxes)
        n_all = n_fake + n_genuine_img
        iou_mean *= n_fake / n_all
        iou50 *= n_fake / n_all
        iou75 *= n_fake / n_all
    precision, recall, f1 = token_prf(np.concatenate(token_preds),
                                      np.concatenate(token_labels))
    return MetricsReport(
        auc=roc_auc(scores, labels), eer=eer(scores, labels),
        acc=binary_accuracy(scores, labels),
        map=mean_ap, cf1=cf1, of1=of1,
        iou_mean=iou_mean, iou50=iou50, iou75=iou75,
        precision=precision, recall=recall, f1=f1)


def interaction_diagnostics(model, data_cfg, samples, batch_size=64):
    """Batch-mean detector losses on post- vs pre-interaction features,
    per modality, over a labelled dataset (no parameter updates)."""
    keys = ("l_ai_v", "l_ni_v", "l_ai_t", "l_ni_t")
    sums = dict.fromkeys(keys, 0.0)
    n = 0
    with ad.pause_tape():
        for idx in _batches(len(samples), batch_size):
            batch = make_batch([samples[i] for i in idx], data_cfg)
            out = model.forward(batch)
            for k in keys:
                sums[k] += float(out[k].data)
            n += 1
    return {k: sums[k] / n for k in keys}


def evaluate_checkpoint(ckpt_path, data_path, batch_size=64,
                        iou_include_genuine=False):
    blob = load_checkpoint(ckpt_path)
    model, ckpt_data_cfg, _ = build_model_from_checkpoint(blob)
    data_cfg, samples = read_dataset(data_path)
    for field in ("grid", "seq_len", "d_raw", "vocab_size"):
        if getattr(data_cfg, field) != getattr(ckpt_data_cfg, field):
            raise CheckpointError(
                f"dataset {field}={getattr(data_cfg, field)} does not match "
                f"checkpoint {field}={getattr(ckpt_data_cfg, field)}")
    return evaluate_model(model, data_cfg, samples, batch_size=batch_size,
                          iou_include_genuine=iou_include_genuine)
