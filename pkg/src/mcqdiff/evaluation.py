"""Metrics, the cross-validated experiment driver, and per-student analysis.

MSE and R^2 are the absolute metrics; MATCH is pairwise ranking accuracy:
over all unordered pairs with strictly different ground-truth difficulty,
the fraction whose predicted order agrees.  Ground-truth ties are excluded
from the denominator; predicted ties count as misses.
"""

from __future__ import annotations

import dataclasses
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from mcqdiff import baselines
from mcqdiff.augment import AugmentedMcq, GenerationConfig, ReasoningFeedbackGenerator
from mcqdiff.corpus import Corpus, FoldPlan, Mcq, selection_distribution
from mcqdiff.encoder import EncoderSpec, build_encoder, pack_input
from mcqdiff.irt import sample_knowledge
from mcqdiff.model import DifficultyModel, build_difficulty_model
from mcqdiff.training import TrainConfig, build_train_items, kl_loss, train

logger = logging.getLogger(__name__)

METHODS = ("ours", "ftwr", "ft", "lr", "mean")


def mse(pred: np.ndarray, gt: np.ndarray) -> float:
    pred = np.asarray(pred, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    if pred.shape != gt.shape or pred.ndim != 1 or len(pred) < 1:
        raise ValueError("pred and gt must be equal-length 1-d vectors")
    return float(np.mean((pred - gt) ** 2))


def r_squared(pred: np.ndarray, gt: np.ndarray) -> float:
    """1 - SS_res/SS_tot (population variance convention)."""
    pred = np.asarray(pred, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    if pred.shape != gt.shape or len(pred) < 2:
        raise ValueError("pred and gt must be equal-length vectors, n >= 2")
    ss_tot = float(np.sum((gt - gt.mean()) ** 2))
    if ss_tot == 0.0:
        raise ValueError("ground truth is constant; R^2 undefined")
    ss_res = float(np.sum((gt - pred) ** 2))
    return 1.0 - ss_res / ss_tot


def match_metric(pred: np.ndarray, gt: np.ndarray) -> float:
    """Pairwise ranking agreement in [0, 1]."""
    pred = np.asarray(pred, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    if pred.shape != gt.shape or len(pred) < 2:
        raise ValueError("pred and gt must be equal-length vectors, n >= 2")
    n = len(gt)
    pairs = 0
    hits = 0
    for i in range(n):
        for j in range(i + 1, n):
            if gt[i] == gt[j]:
                continue
            pairs += 1
            if np.sign(pred[i] - pred[j]) == np.sign(gt[i] - gt[j]):
                hits += 1
    if pairs == 0:
        raise ValueError("all ground-truth difficulties tied; MATCH undefined")
    return hits / pairs


@dataclass
class MetricReport:
    """Per-fold metrics and mean +- sample standard deviation aggregates."""

    method: str
    dataset: str
    fold_metrics: list[dict[str, float]]
    aggregates: dict[str, tuple[float, float]]
    complete: bool = True
    failures: list[str] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "method": self.method,
            "dataset": self.dataset,
            "fold_metrics": self.fold_metrics,
            "aggregates": {k: list(v) for k, v in self.aggregates.items()},
            "complete": self.complete,
            "failures": self.failures,
        }

    @classmethod
    def from_dict(cls, obj: dict) -> "MetricReport":
        return cls(
            method=obj["method"],
            dataset=obj["dataset"],
            fold_metrics=obj["fold_metrics"],
            aggregates={k: (v[0], v[1]) for k, v in obj["aggregates"].items()},
            complete=obj["complete"],
            failures=obj["failures"],
        )


def write_report(report: MetricReport, path: str | Path) -> None:
    Path(path).write_text(
        json.dumps(report.to_dict(), indent=2, sort_keys=True) + "\n", encoding="utf-8"
    )


def read_report(path: str | Path) -> MetricReport:
    return MetricReport.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))


def aggregate_folds(fold_metrics: list[dict[str, float]]) -> dict[str, tuple[float, float]]:
    out: dict[str, tuple[float, float]] = {}
    if not fold_metrics:
        return out
    keys = sorted(set.intersection(*(set(m) for m in fold_metrics)))
    for key in keys:
        vals = np.array([m[key] for m in fold_metrics], dtype=np.float64)
        sd = float(vals.std(ddof=1)) if len(vals) > 1 else 0.0
        out[key] = (float(vals.mean()), sd)
    return out


def render_table(reports: list[MetricReport]) -> str:
    """Aligned comparison table: one method per row, mean +- sd per metric."""
    cols = ("mse", "r2", "match")
    headers = ("Method", "MSE", "R2", "MATCH")
    rows = [headers]
    for rep in reports:
        cells = [rep.method]
        for c in cols:
            if c in rep.aggregates:
                mean, sd = rep.aggregates[c]
                cells.append(f"{mean:.3f} ± {sd:.3f}")
            else:
                cells.append("-")
        rows.append(tuple(cells))
    widths = [max(len(r[k]) for r in rows) for k in range(len(headers))]
    lines = []
    for i, row in enumerate(rows):
        lines.append("  ".join(cell.ljust(widths[k]) for k, cell in enumerate(row)).rstrip())
        if i == 0:
            lines.append("  ".join("-" * w for w in widths))
    return "\n".join(lines) + "\n"


@dataclass
class ExperimentConfig:
    """Everything a cross-validated run needs besides the corpus and folds."""

    dataset: str = "dataset"
    encoder_spec: EncoderSpec = field(default_factory=EncoderSpec)
    encoder_seed: int = 0
    knowledge_m: int = 1000
    knowledge_d: int = 2
    knowledge_seed: int = 0
    model_seed: int = 0
    train: TrainConfig = field(default_factory=TrainConfig)
    ft: baselines.FtConfig = field(default_factory=baselines.FtConfig)
    generation: GenerationConfig = field(default_factory=lambda: GenerationConfig(model_name="fixture-v1"))
    replay: dict[str, str] | None = None
    cache_path: str | None = None


def _require_difficulties(items: list[Mcq]) -> np.ndarray:
    missing = [m.id for m in items if m.difficulty is None]
    if missing:
        raise ValueError(f"items missing ground-truth difficulty: {missing[:10]}")
    return np.array([m.difficulty for m in items], dtype=np.float64)


def _augment_corpus(corpus: Corpus, config: ExperimentConfig) -> list[AugmentedMcq]:
    from mcqdiff.augment import CompletionCache

    cache = CompletionCache(config.cache_path)
    gen = ReasoningFeedbackGenerator(config.generation, cache, replay=config.replay)
    return gen.augment_corpus(corpus)


def _run_ours(
    corpus: Corpus,
    fold,
    config: ExperimentConfig,
    augmented: list[AugmentedMcq],
    fold_idx: int,
) -> dict[str, float]:
    aug_by_id = {a.base.id: a for a in augmented}
    knowledge = sample_knowledge(config.knowledge_m, config.knowledge_d, config.knowledge_seed)

    def subset(ids):
        sub = corpus.with_items([corpus.by_id[i] for i in ids])
        return build_train_items(sub, [aug_by_id[i] for i in ids])

    train_items = subset(fold.train_ids)
    val_items = subset(fold.val_ids)
    test_items = subset(fold.test_ids)

    encoder = build_encoder(config.encoder_spec, seed=config.encoder_seed)
    model = DifficultyModel(
        encoder=encoder, knowledge=knowledge, seed=config.model_seed + 1000 * fold_idx
    )
    cfg = dataclasses.replace(config.train, seed=config.train.seed + 1000 * fold_idx)
    train(model, train_items, val_items, cfg)

    with torch.no_grad():
        features = model.encode_items([it.texts for it in test_items])
        df_hat, avg = model(features)
    gt = np.array([it.difficulty for it in test_items], dtype=np.float64)
    pred = df_hat.numpy()
    kls = [
        float(kl_loss(it.gt_dist, avg[k]))
        for k, it in enumerate(test_items)
        if it.gt_dist is not None
    ]
    out = {
        "mse": mse(pred, gt),
        "r2": r_squared(pred, gt),
        "match": match_metric(pred, gt),
    }
    if kls:
        out["kl"] = float(np.mean(kls))
    return out


def _run_ft_family(
    corpus: Corpus,
    fold,
    config: ExperimentConfig,
    augmented: list[AugmentedMcq] | None,
    fold_idx: int,
    use_aux: bool,
) -> dict[str, float]:
    aug_by_id = {a.base.id: a for a in augmented} if augmented else {}

    def pairs(ids):
        items = [corpus.by_id[i] for i in ids]
        gt = _require_difficulties(items)
        if use_aux:
            texts = [baselines.ftwr_pack(aug_by_id[m.id]) for m in items]
        else:
            texts = [baselines.ft_pack(m) for m in items]
        return list(zip(texts, gt.tolist()))

    train_pairs = pairs(fold.train_ids)
    val_pairs = pairs(fold.val_ids)
    test_pairs = pairs(fold.test_ids)

    encoder = build_encoder(config.encoder_spec, seed=config.encoder_seed)
    regressor = baselines.FtRegressor(encoder, seed=config.model_seed + 1000 * fold_idx)
    cfg = dataclasses.replace(config.ft, seed=config.ft.seed + 1000 * fold_idx)
    baselines.train_ft(regressor, train_pairs, val_pairs, cfg)

    with torch.no_grad():
        pred = regressor([t for t, _ in test_pairs]).numpy()
    gt = np.array([y for _, y in test_pairs])
    return {"mse": mse(pred, gt), "r2": r_squared(pred, gt), "match": match_metric(pred, gt)}


def _run_lr(corpus: Corpus, fold, config: ExperimentConfig, fold_idx: int) -> dict[str, float]:
    fit_items = [corpus.by_id[i] for i in (*fold.train_ids, *fold.val_ids)]
    test_items = [corpus.by_id[i] for i in fold.test_ids]
    model = baselines.fit_linear(
        baselines.feature_matrix(fit_items), _require_difficulties(fit_items)
    )
    pred = model.predict(baselines.feature_matrix(test_items))
    gt = _require_difficulties(test_items)
    return {"mse": mse(pred, gt), "r2": r_squared(pred, gt), "match": match_metric(pred, gt)}


def _run_mean(corpus: Corpus, fold, fold_idx: int) -> dict[str, float]:
    fit_items = [corpus.by_id[i] for i in (*fold.train_ids, *fold.val_ids)]
    test_items = [corpus.by_id[i] for i in fold.test_ids]
    mean_df = float(_require_difficulties(fit_items).mean())
    gt = _require_difficulties(test_items)
    pred = np.full_like(gt, mean_df)
    return {"mse": mse(pred, gt), "r2": r_squared(pred, gt)}


def cross_validate(
    method: str, corpus: Corpus, plan: FoldPlan, config: ExperimentConfig
) -> MetricReport:
    """Train and evaluate one method over every fold of the shared plan."""
    if method not in METHODS:
        raise ValueError(f"unknown method {method!r}; expected one of {METHODS}")
    augmented = None
    if method in ("ours", "ftwr"):
        augmented = _augment_corpus(corpus, config)

    fold_metrics: list[dict[str, float]] = []
    failures: list[str] = []
    for k, fold in enumerate(plan.folds):
        try:
            if method == "ours":
                fold_metrics.append(_run_ours(corpus, fold, config, augmented, k))
            elif method in ("ft", "ftwr"):
                fold_metrics.append(
                    _run_ft_family(corpus, fold, config, augmented, k, use_aux=method == "ftwr")
                )
            elif method == "lr":
                fold_metrics.append(_run_lr(corpus, fold, config, k))
            else:
                fold_metrics.append(_run_mean(corpus, fold, k))
        except Exception as exc:  # noqa: BLE001 - reported per fold
            logger.error("fold %d failed for method %s: %s", k, method, exc)
            failures.append(f"fold {k}: {type(exc).__name__}: {exc}")
    return MetricReport(
        method=method,
        dataset=config.dataset,
        fold_metrics=fold_metrics,
        aggregates=aggregate_folds(fold_metrics),
        complete=not failures,
        failures=failures,
    )


@dataclass
class PerStudentReport:
    """Per-student predicted difficulties for one question."""

    difficulties: np.ndarray
    knowledge: np.ndarray
    hist_counts: np.ndarray
    hist_edges: np.ndarray


def per_student_difficulty(model: DifficultyModel, aug: AugmentedMcq) -> PerStudentReport:
    """Apply the difficulty head to each sampled student's own distribution."""
    mcq = aug.base
    auxes = (aug.reasoning, *aug.feedback)
    texts = [pack_input(mcq.stem, opt, aux) for opt, aux in zip(mcq.options, auxes)]
    with torch.no_grad():
        features = model.encoder.encode(texts)
    diffs, _ = model.per_student_difficulties(features)
    diffs = diffs.numpy()
    knowledge = model.knowledge.numpy()
    if knowledge.shape[1] != 2:
        logger.warning(
            "knowledge dimension is %d; scatter uses the first two coordinates",
            knowledge.shape[1],
        )
    if np.ptp(diffs) == 0.0:
        hist_counts, hist_edges = np.histogram(diffs, bins=1)
    else:
        hist_counts, hist_edges = np.histogram(diffs, bins=20)
    return PerStudentReport(
        difficulties=diffs,
        knowledge=knowledge,
        hist_counts=hist_counts,
        hist_edges=hist_edges,
    )


def write_scatter_csv(report: PerStudentReport, path: str | Path) -> None:
    import csv

    coords = report.knowledge[:, :2]
    with Path(path).open("w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["knowledge_1", "knowledge_2", "difficulty"])
        for j in range(len(report.difficulties)):
            writer.writerow(
                [repr(coords[j, 0]), repr(coords[j, 1]), repr(float(report.difficulties[j]))]
            )


def write_histogram_csv(report: PerStudentReport, path: str | Path) -> None:
    import csv

    with Path(path).open("w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["bin_low", "bin_high", "count"])
        for k in range(len(report.hist_counts)):
            writer.writerow(
                [
                    repr(float(report.hist_edges[k])),
                    repr(float(report.hist_edges[k + 1])),
                    int(report.hist_counts[k]),
                ]
            )


def write_figure(report: PerStudentReport, path: str | Path) -> None:
    """Optional static image: knowledge scatter colored by difficulty + histogram."""
    try:
        import matplotlib

        matplotlib.use("Agg")
        import matplotlib.pyplot as plt
    except ImportError as exc:
        raise RuntimeError("matplotlib is required for figure output") from exc
    fig, (ax1, ax2) = plt.subplots(1, 2, figsize=(10, 4))
    coords = report.knowledge[:, :2]
    sc = ax1.scatter(coords[:, 0], coords[:, 1], c=report.difficulties, s=8, cmap="viridis")
    fig.colorbar(sc, ax=ax1, label="predicted difficulty")
    ax1.set_xlabel("knowledge 1")
    ax1.set_ylabel("knowledge 2")
    ax2.hist(report.difficulties, bins=max(1, len(report.hist_counts)))
    ax2.set_xlabel("predicted difficulty")
    ax2.set_ylabel("students")
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
