"""Pretraining, fine-tuning, nested cross-validation and ablation sweeps."""

from __future__ import annotations

import copy
import logging
import math
from dataclasses import dataclass, field, replace
from typing import Callable, Iterable, Sequence

import numpy as np
import torch
import torch.nn.functional as F
from sklearn.model_selection import KFold, StratifiedKFold

from .augment import MASK_VALUE, draw_k, random_masks
from .encoder import (
    DTYPE,
    DownstreamModel,
    EncoderConfig,
    RadiomicEncoder,
    attach_downstream_head,
    init_encoder,
    normalize_flat,
)
from .features import Dataset, fit_normalization
from .losses import LossWeights, discrimination_from_tensor, reconstruction_terms
from .metrics import MetricsReport, classification_metrics, evaluate, regression_metrics

log = logging.getLogger(__name__)

TASK_MODES = ("both", "recon_only", "disc_only", "none")


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 500
    batch_size: int = 8
    learning_rate: float = 1e-3
    weight_decay: float = 1e-3
    loss_weights: LossWeights = field(default_factory=LossWeights)
    k_max: int = 30
    K: int = 50
    seed: int = 0
    finetune_epochs: int = 500
    finetune_batch_size: int = 8
    head_hidden: int = 100
    # both | recon_only | disc_only | none (no pretraining)
    task_mode: str = "both"
    k_fixed: int | None = None
    recon_target: str = "full"
    recon_reduction: str = "mean"
    label_fraction: float = 1.0

    def __post_init__(self):
        for name in ("epochs", "batch_size", "K", "k_max", "finetune_epochs", "finetune_batch_size", "head_hidden"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive, got {getattr(self, name)}")
        if self.learning_rate <= 0 or self.weight_decay < 0:
            raise ValueError("learning_rate must be > 0 and weight_decay >= 0")
        if self.task_mode not in TASK_MODES:
            raise ValueError(f"task_mode must be one of {TASK_MODES}")
        if self.recon_target not in ("full", "masked"):
            raise ValueError("recon_target must be 'full' or 'masked'")
        if self.recon_reduction not in ("mean", "sum"):
            raise ValueError("recon_reduction must be 'mean' or 'sum'")
        if not 0 < self.label_fraction <= 1:
            raise ValueError("label_fraction must be in (0, 1]")


class LeakageError(RuntimeError):
    pass


# -- pretext objective ---------------------------------------------------------------


def pretext_losses(enc: RadiomicEncoder, x: torch.Tensor, masks, cfg: TrainConfig):
    """Reconstruction, discrimination and joint loss for one batch.

    ``x`` is ``(B, n_roi, F)``, ``masks`` is boolean ``(B, K, n_roi)``.
    Returns ``(total, recon, disc)``; a term that the task mode switches off
    is returned as ``None``.
    """
    w = cfg.loss_weights
    masks_t = torch.as_tensor(np.asarray(masks))
    views = torch.where(masks_t[..., None], torch.tensor(MASK_VALUE, dtype=DTYPE), x[:, None])
    z = enc(views)
    b, k = masks_t.shape[:2]
    recon = disc = None
    if cfg.task_mode in ("both", "recon_only"):
        x_hat = enc.reconstruct(z)
        terms = reconstruction_terms(
            x[:, None], x_hat, w.beta,
            mask=masks_t if cfg.recon_target == "masked" else None,
            reduction=cfg.recon_reduction,
        )
        recon = terms.sum() if cfg.recon_reduction == "sum" else terms.mean()
    if cfg.task_mode in ("both", "disc_only"):
        flat = normalize_flat(z).reshape(b * k, -1)
        groups = np.repeat(np.arange(b), k)
        disc = discrimination_from_tensor(flat, groups, w.tau)
    if cfg.task_mode == "both":
        total = recon if w.lam == 0 else recon + w.lam * disc
    elif cfg.task_mode == "recon_only":
        total = recon
    else:
        total = disc
    return total, recon, disc


def pretrain(d: Dataset, enc_cfg: EncoderConfig, cfg: TrainConfig,
             on_batch: Callable[[list[str]], None] | None = None) -> tuple[RadiomicEncoder, list[float]]:
    """Self-supervised pretraining; returns the encoder and per-epoch mean loss."""
    if len(d) < 2:
        raise ValueError("pretraining needs at least 2 subjects")
    if cfg.batch_size < 2:
        raise ValueError("batch_size must be >= 2 for the discrimination loss")
    if cfg.task_mode == "none":
        raise ValueError("task_mode 'none' has nothing to pretrain")
    n_roi = d.n_roi
    if cfg.k_fixed is not None and not 1 <= cfg.k_fixed <= n_roi - 1:
        raise ValueError(f"k must be in [1, {n_roi - 1}]")
    torch.manual_seed(cfg.seed)
    rng = np.random.default_rng(cfg.seed)
    enc = init_encoder(enc_cfg, seed=cfg.seed)
    opt = torch.optim.AdamW(enc.parameters(), lr=cfg.learning_rate, weight_decay=cfg.weight_decay)
    x_all = torch.as_tensor(d.tensor())
    ids = d.subject_ids
    m = len(d)
    b = min(cfg.batch_size, m)
    steps = math.ceil(m / cfg.batch_size)
    history = []
    enc.train()
    for epoch in range(cfg.epochs):
        total = 0.0
        for _ in range(steps):
            # b distinct subjects = b/2 disjoint random pairs
            idx = rng.choice(m, size=b, replace=False)
            if on_batch is not None:
                on_batch([ids[i] for i in idx])
            k = cfg.k_fixed if cfg.k_fixed is not None else draw_k(cfg.k_max, n_roi, rng)
            masks = random_masks(n_roi, k, b * cfg.K, rng).reshape(b, cfg.K, n_roi)
            loss, _, _ = pretext_losses(enc, x_all[idx], masks, cfg)
            if not torch.isfinite(loss):
                raise FloatingPointError(f"pretraining loss diverged at epoch {epoch + 1}")
            opt.zero_grad()
            loss.backward()
            opt.step()
            total += loss.item()
        history.append(total / steps)
    enc.eval()
    return enc, history


# -- downstream -----------------------------------------------------------------------


def task_of(d: Dataset) -> str:
    if d.labels is None:
        raise ValueError("dataset has no labels")
    return "classification" if d.is_binary() else "regression"


def class_weights(labels) -> np.ndarray:
    """Inverse class frequencies, scaled so a balanced set gets weight 1."""
    labels = np.asarray(labels).astype(int)
    counts = np.bincount(labels, minlength=2).astype(float)
    if np.any(counts == 0):
        raise ValueError("both classes are needed for a weighted cross-entropy")
    return len(labels) / (2.0 * counts)


def _validation_score(model: DownstreamModel, x, y) -> tuple[float, float]:
    """Higher-is-better score and a tie-breaking loss on held-out data."""
    pred = model.predict(x)
    if model.task == "classification":
        ba = classification_metrics(pred, y)["ba"] if 0 < y.sum() < len(y) else float(((pred >= 0.5) == y).mean())
        p = np.clip(np.where(y == 1, pred, 1 - pred), 1e-12, 1)
        return ba, float(-np.log(p).mean())
    mae = float(np.abs(pred - y).mean())
    return -mae, mae


def finetune(enc: RadiomicEncoder | None, d: Dataset, task: str, cfg: TrainConfig,
             enc_cfg: EncoderConfig | None = None, validation: Dataset | None = None,
             ) -> tuple[DownstreamModel, list[float]]:
    """Supervised training of encoder + head on the unmasked maps.

    The encoder is copied, so a pretrained encoder can be reused. Without an
    encoder (``enc=None``) a fresh one is initialized from ``enc_cfg``. With
    ``validation``, the epoch with the best validation BA (or MAE) is kept.
    """
    if d.labels is None:
        raise ValueError("fine-tuning needs labels")
    if task == "classification" and not d.is_binary():
        raise ValueError("classification needs labels in {0, 1}")
    if task == "regression" and d.is_binary():
        log.warning("regression on binary labels")
    if enc is None:
        if enc_cfg is None:
            raise ValueError("need an encoder or an encoder config")
        enc = init_encoder(enc_cfg, seed=cfg.seed)
    torch.manual_seed(cfg.seed)
    rng = np.random.default_rng(cfg.seed + 1)
    model = attach_downstream_head(copy.deepcopy(enc), task, seed=cfg.seed + 1, hidden=cfg.head_hidden)
    x = torch.as_tensor(d.tensor())
    y_np = d.labels.copy()
    if task == "classification":
        weights = torch.as_tensor(class_weights(y_np))
        y = torch.as_tensor(y_np.astype(np.int64))
    else:
        shift = float(y_np.mean())
        scale = float(y_np.std()) or 1.0
        model.target_shift, model.target_scale = shift, scale
        y = torch.as_tensor((y_np - shift) / scale)
    opt = torch.optim.AdamW(model.parameters(), lr=cfg.learning_rate, weight_decay=cfg.weight_decay)
    n = len(d)
    bs = min(cfg.finetune_batch_size, n)
    best, best_key = None, None
    if validation is not None:
        x_val = validation.tensor()
        y_val = validation.labels
    history = []
    for epoch in range(cfg.finetune_epochs):
        model.train()
        order = rng.permutation(n)
        total = 0.0
        for start in range(0, n, bs):
            idx = order[start:start + bs]
            out = model(x[idx])
            if task == "classification":
                loss = F.cross_entropy(out, y[idx], weight=weights)
            else:
                loss = F.mse_loss(out, y[idx])
            opt.zero_grad()
            loss.backward()
            opt.step()
            total += loss.item() * len(idx)
        if not math.isfinite(total):
            raise FloatingPointError(f"fine-tuning loss diverged at epoch {epoch + 1}")
        history.append(total / n)
        if validation is not None:
            model.eval()
            score, tie = _validation_score(model, x_val, y_val)
            key = (score, -tie)
            if best_key is None or key > best_key:
                best_key, best = key, copy.deepcopy(model.state_dict())
    if best is not None:
        model.load_state_dict(best)
    model.eval()
    return model, history


def predict(model: DownstreamModel, d: Dataset) -> np.ndarray:
    return model.predict(d.tensor())


# -- cross-validation -------------------------------------------------------------------


@dataclass
class FoldAudit:
    """Subject ids each stage touched, per (repetition, fold)."""

    records: dict[tuple[int, int], dict[str, set[str]]] = field(default_factory=dict)

    def touch(self, rep: int, fold: int, stage: str, ids: Iterable[str]) -> None:
        self.records.setdefault((rep, fold), {}).setdefault(stage, set()).update(ids)

    def check(self, rep: int, fold: int) -> None:
        stages = self.records.get((rep, fold), {})
        test = stages.get("test", set())
        for stage, ids in stages.items():
            if stage != "test" and ids & test:
                raise LeakageError(f"repetition {rep}, fold {fold}: {stage} touched test subjects {sorted(ids & test)[:5]}")


def fold_seed(seed: int, rep: int, fold: int) -> int:
    return int(np.random.SeedSequence([seed, rep, fold]).generate_state(1)[0])


def _splitter(task: str, n_splits: int, seed: int):
    if task == "classification":
        return StratifiedKFold(n_splits=n_splits, shuffle=True, random_state=seed % 2**32)
    return KFold(n_splits=n_splits, shuffle=True, random_state=seed % 2**32)


def outer_folds(d: Dataset, folds: int, seed: int) -> list[tuple[np.ndarray, np.ndarray]]:
    task = task_of(d)
    if folds < 2:
        raise ValueError("need at least 2 folds")
    if folds > len(d):
        raise ValueError(f"folds={folds} exceeds the number of subjects {len(d)}")
    y = d.labels
    return [(tr, te) for tr, te in _splitter(task, folds, seed).split(np.zeros(len(d)), y)]


def _subsample(labels: np.ndarray, index: np.ndarray, fraction: float, rng: np.random.Generator, task: str) -> np.ndarray:
    if fraction >= 1.0:
        return index
    if task == "classification":
        keep = []
        for c in (0.0, 1.0):
            members = index[labels[index] == c]
            n = max(1, int(round(fraction * len(members))))
            keep.append(rng.choice(members, size=n, replace=False))
        return np.sort(np.concatenate(keep))
    n = max(2, int(round(fraction * len(index))))
    return np.sort(rng.choice(index, size=n, replace=False))


def run_fold(d: Dataset, trainval: np.ndarray, test: np.ndarray, enc_cfg: EncoderConfig, cfg: TrainConfig,
             rep: int, fold: int, inner_folds: int, audit: FoldAudit, encoder_cache: dict | None = None
             ) -> MetricsReport:
    task = task_of(d)
    seed = fold_seed(cfg.seed, rep, fold)
    ids = np.array(d.subject_ids)
    audit.touch(rep, fold, "test", ids[test])

    # inner split: one of the inner folds is the validation set for epoch selection
    inner = _splitter(task, inner_folds, seed).split(np.zeros(len(trainval)), d.labels[trainval])
    tr_rel, val_rel = next(iter(inner))
    train, val = trainval[tr_rel], trainval[val_rel]

    tags = np.full(len(d), "test", dtype=object)
    tags[train], tags[val] = "train", "val"
    tagged = Dataset(d.maps, labels=d.labels, split_tags=tuple(tags))
    stats = fit_normalization(tagged)
    audit.touch(rep, fold, "normalization", stats.fitted_on)
    dn = stats.transform(d)

    fold_cfg = replace(cfg, seed=seed)
    enc = None
    if cfg.task_mode != "none":
        key = (enc_cfg, replace(fold_cfg, label_fraction=1.0, finetune_epochs=1, finetune_batch_size=1, head_hidden=1),
               tuple(trainval.tolist()))
        if encoder_cache is not None and key in encoder_cache:
            enc = encoder_cache[key]
            audit.touch(rep, fold, "pretraining", ids[trainval])
        else:
            enc, _ = pretrain(dn.subset(trainval), enc_cfg, fold_cfg,
                              on_batch=lambda b: audit.touch(rep, fold, "pretraining", b))
            if encoder_cache is not None:
                encoder_cache[key] = enc
    ft_idx = _subsample(d.labels, train, cfg.label_fraction, np.random.default_rng(seed), task)
    audit.touch(rep, fold, "finetuning", ids[ft_idx])
    audit.touch(rep, fold, "validation", ids[val])
    model, _ = finetune(enc, dn.subset(ft_idx), task, fold_cfg, enc_cfg=enc_cfg, validation=dn.subset(val))
    audit.check(rep, fold)
    return evaluate(predict(model, dn.subset(test)), d.labels[test], task)


def nested_cv(d: Dataset, enc_cfg: EncoderConfig, cfg: TrainConfig, folds: int = 10, repetitions: int = 5,
              audit: FoldAudit | None = None, encoder_cache: dict | None = None) -> MetricsReport:
    """Repeated outer K-fold; inside each outer fold, pretraining and fine-tuning
    see only the non-test subjects and an inner split picks the fine-tuning epoch."""
    task = task_of(d)
    audit = audit if audit is not None else FoldAudit()
    report = MetricsReport(task)
    for rep in range(repetitions):
        for fold, (trainval, test) in enumerate(outer_folds(d, folds, fold_seed(cfg.seed, rep, 2**31))):
            r = run_fold(d, trainval, test, enc_cfg, cfg, rep, fold, max(2, folds - 1), audit, encoder_cache)
            report = report.extend(r)
    return report


SWEEPS = ("beta", "lambda", "k", "label_fraction", "task_mode")


def sweep_config(cfg: TrainConfig, name: str, value) -> TrainConfig:
    w = cfg.loss_weights
    if name == "beta":
        return replace(cfg, loss_weights=replace(w, beta=float(value)))
    if name == "lambda":
        return replace(cfg, loss_weights=replace(w, lam=float(value)))
    if name == "k":
        return replace(cfg, k_fixed=int(value))
    if name == "label_fraction":
        return replace(cfg, label_fraction=float(value))
    if name == "task_mode":
        return replace(cfg, task_mode=str(value))
    raise ValueError(f"unknown sweep {name!r}; expected one of {SWEEPS}")


@dataclass
class AblationRow:
    sweep: str
    value: object
    report: MetricsReport


def ablate(d: Dataset, enc_cfg: EncoderConfig, cfg: TrainConfig, sweep: dict[str, Sequence],
           folds: int = 10, repetitions: int = 5) -> list[AblationRow]:
    if not sweep or not any(len(v) for v in sweep.values()):
        raise ValueError("empty sweep grid")
    cache: dict = {}
    rows = []
    for name, grid in sweep.items():
        for value in grid:
            c = sweep_config(cfg, name, value)
            rows.append(AblationRow(name, value, nested_cv(d, enc_cfg, c, folds, repetitions, encoder_cache=cache)))
    return rows
