"""Composite training objective and the end-to-end training loop.

Per item the loss is  L = L_d + alpha * L_kl  where L_d is the squared error
on ground-truth difficulty (unit-variance Gaussian negative log-likelihood up
to constants) and L_kl is KL(ground-truth selection distribution || predicted
population distribution).  The batch loss is the mean of per-item losses; the
returned weights are the checkpoint with minimum validation total loss.
"""

from __future__ import annotations

import copy
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from mcqdiff.augment import AugmentedMcq
from mcqdiff.corpus import Corpus, Mcq, selection_distribution
from mcqdiff.encoder import DTYPE, pack_input
from mcqdiff.model import DifficultyModel

logger = logging.getLogger(__name__)

PRED_FLOOR = 1e-12


class TrainingDivergedError(RuntimeError):
    pass


class MissingLabelError(ValueError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 10
    epochs: int = 300
    lr_encoder: float = 1e-5
    lr_si: float = 1e-2
    lr_dp: float = 1e-2
    alpha: float = 0.0886
    seed: int = 0
    checkpoint_every: int = 0
    early_stop: bool = False
    early_stop_patience: int = 50
    strict: bool = True

    def __post_init__(self) -> None:
        if min(self.lr_encoder, self.lr_si, self.lr_dp) <= 0:
            raise ValueError("learning rates must be positive")
        if self.alpha < 0:
            raise ValueError("alpha must be >= 0")
        if self.batch_size < 1 or self.epochs < 1:
            raise ValueError("batch_size and epochs must be positive")


@dataclass
class LossBreakdown:
    """Difficulty term, KL term, and their alpha-weighted sum."""

    l_d: float
    l_kl: float
    total: float
    n_items: int = 0

    @classmethod
    def combine(cls, l_d, l_kl, alpha: float, n_items: int = 0) -> "LossBreakdown":
        return cls(l_d=l_d, l_kl=l_kl, total=l_d + alpha * l_kl, n_items=n_items)


@dataclass(frozen=True)
class TrainItem:
    """One question prepared for training: packed texts plus targets."""

    id: str
    texts: tuple[str, str, str, str]
    difficulty: float | None
    gt_dist: np.ndarray | None


def build_train_items(
    corpus: Corpus, augmented: list[AugmentedMcq] | None = None
) -> list[TrainItem]:
    """Pack every usable item; zero-count + unlabeled items are dropped."""
    aux_by_id: dict[str, AugmentedMcq] = {}
    if augmented is not None:
        aux_by_id = {a.base.id: a for a in augmented}
    items: list[TrainItem] = []
    dropped: list[str] = []
    for mcq in corpus:
        if mcq.difficulty is None and mcq.total_count == 0:
            dropped.append(mcq.id)
            continue
        aug = aux_by_id.get(mcq.id)
        auxes = (aug.reasoning, *aug.feedback) if aug is not None else ("", "", "", "")
        texts = tuple(
            pack_input(mcq.stem, opt, aux) for opt, aux in zip(mcq.options, auxes)
        )
        gt = selection_distribution(mcq) if mcq.total_count > 0 else None
        items.append(
            TrainItem(id=mcq.id, texts=texts, difficulty=mcq.difficulty, gt_dist=gt)
        )
    if dropped:
        logger.warning("dropped %d items with no label and no counts: %s", len(dropped), dropped[:10])
    return items


def difficulty_loss(df: float | torch.Tensor, df_hat: float | torch.Tensor) -> torch.Tensor:
    """Squared error; the Gaussian NLL of the target with constants dropped."""
    df_t = torch.as_tensor(df, dtype=DTYPE)
    df_hat_t = torch.as_tensor(df_hat, dtype=DTYPE)
    if not bool(torch.isfinite(df_t)) or not bool(torch.isfinite(df_hat_t)):
        raise ValueError("difficulty_loss requires finite inputs")
    return (df_t - df_hat_t) ** 2


def kl_loss(gt, pred) -> torch.Tensor:
    """KL(gt || pred) with 0*log(0) := 0; pred entries floored at 1e-12."""
    gt_t = torch.as_tensor(np.asarray(gt, dtype=np.float64), dtype=DTYPE)
    pred_t = pred if isinstance(pred, torch.Tensor) else torch.as_tensor(
        np.asarray(pred, dtype=np.float64), dtype=DTYPE
    )
    if bool((pred_t < PRED_FLOOR).any()):
        logger.warning("predicted distribution entry below %g floored", PRED_FLOOR)
        pred_t = pred_t.clamp(min=PRED_FLOOR)
    return torch.special.xlogy(gt_t, gt_t).sum() - torch.special.xlogy(gt_t, pred_t).sum()


def total_loss(
    items: list[TrainItem],
    df_hat: torch.Tensor,
    pred_dists: torch.Tensor,
    alpha: float,
    strict: bool = True,
) -> LossBreakdown:
    """Batch-mean composite loss.

    Items without a ground-truth difficulty are a hard error in strict mode
    and are excluded with a warning otherwise.  Items without a selection
    distribution (zero counts) contribute no KL term.
    """
    keep = [k for k, it in enumerate(items) if it.difficulty is not None]
    missing = [it.id for it in items if it.difficulty is None]
    if missing:
        if strict:
            raise MissingLabelError(f"items missing ground-truth difficulty: {missing}")
        logger.warning("excluding %d unlabeled items from the batch: %s", len(missing), missing)
    if not keep:
        raise MissingLabelError("no labeled items left in batch")

    d_terms = []
    kl_terms = []
    for k in keep:
        it = items[k]
        d_terms.append(difficulty_loss(it.difficulty, df_hat[k]))
        if it.gt_dist is not None:
            kl_terms.append(kl_loss(it.gt_dist, pred_dists[k]))
        else:
            kl_terms.append(torch.zeros((), dtype=DTYPE))
    l_d = torch.stack(d_terms).mean()
    l_kl = torch.stack(kl_terms).mean()
    return LossBreakdown.combine(l_d, l_kl, alpha, n_items=len(keep))


@dataclass
class TrainResult:
    model: DifficultyModel
    history: list[dict] = field(repr=False, default_factory=list)
    best_epoch: int = -1
    best_val_total: float = float("inf")


def _evaluate(model: DifficultyModel, items: list[TrainItem], alpha: float, strict: bool) -> LossBreakdown:
    with torch.no_grad():
        features = model.encode_items([it.texts for it in items])
        df_hat, avg = model(features)
        br = total_loss(items, df_hat, avg, alpha, strict=strict)
    return LossBreakdown(
        l_d=float(br.l_d), l_kl=float(br.l_kl), total=float(br.total), n_items=br.n_items
    )


def make_optimizer(model: DifficultyModel, cfg: TrainConfig) -> torch.optim.Adam:
    """Adaptive-moment optimizer with one parameter group per module."""
    groups = []
    enc_params = [p for p in model.encoder.parameters() if p.requires_grad]
    if enc_params:
        groups.append({"params": enc_params, "lr": cfg.lr_encoder})
    groups.append({"params": list(model.projector.parameters()), "lr": cfg.lr_si})
    groups.append({"params": list(model.head.parameters()), "lr": cfg.lr_dp})
    return torch.optim.Adam(groups)


def train(
    model: DifficultyModel,
    train_items: list[TrainItem],
    val_items: list[TrainItem],
    cfg: TrainConfig,
    log_path: str | Path | None = None,
) -> TrainResult:
    """End-to-end training; returns the minimum-validation-loss weights."""
    if not train_items or not val_items:
        raise ValueError("train and validation sets must be non-empty")
    if cfg.strict:
        missing = [it.id for it in train_items + val_items if it.difficulty is None]
        if missing:
            raise MissingLabelError(f"items missing ground-truth difficulty: {missing}")
    else:
        train_items = [it for it in train_items if it.difficulty is not None]
        val_items = [it for it in val_items if it.difficulty is not None]

    optimizer = make_optimizer(model, cfg)
    gen = torch.Generator().manual_seed(cfg.seed)
    log_fh = Path(log_path).open("w", encoding="utf-8") if log_path else None

    result = TrainResult(model=model)
    best_state: dict | None = None
    stale = 0
    try:
        for epoch in range(cfg.epochs):
            perm = torch.randperm(len(train_items), generator=gen).tolist()
            sum_d = sum_kl = 0.0
            seen = 0
            for lo in range(0, len(perm), cfg.batch_size):
                batch = [train_items[i] for i in perm[lo : lo + cfg.batch_size]]
                features = model.encode_items([it.texts for it in batch])
                df_hat, avg = model(features)
                br = total_loss(batch, df_hat, avg, cfg.alpha, strict=cfg.strict)
                if not bool(torch.isfinite(br.total)):
                    raise TrainingDivergedError(
                        f"non-finite loss at epoch {epoch} "
                        f"(l_d={float(br.l_d)}, l_kl={float(br.l_kl)}, "
                        f"batch ids={[it.id for it in batch]})"
                    )
                optimizer.zero_grad()
                br.total.backward()
                optimizer.step()
                sum_d += float(br.l_d.detach()) * br.n_items
                sum_kl += float(br.l_kl.detach()) * br.n_items
                seen += br.n_items

            val = _evaluate(model, val_items, cfg.alpha, cfg.strict)
            row = {
                "epoch": epoch,
                "train_ld": sum_d / seen,
                "train_lkl": sum_kl / seen,
                "val_ld": val.l_d,
                "val_lkl": val.l_kl,
                "val_total": val.total,
            }
            result.history.append(row)
            if log_fh:
                log_fh.write(json.dumps(row) + "\n")

            if val.total < result.best_val_total:
                result.best_val_total = val.total
                result.best_epoch = epoch
                best_state = copy.deepcopy(model.state_dict())
                stale = 0
            else:
                stale += 1
                if cfg.early_stop and stale >= cfg.early_stop_patience:
                    logger.info("early stop at epoch %d (best %d)", epoch, result.best_epoch)
                    break
    finally:
        if log_fh:
            log_fh.close()

    if best_state is not None:
        model.load_state_dict(best_state)
    return result
