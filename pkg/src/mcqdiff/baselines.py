"""Comparison methods: LR (9 syntactic features), FT, and FTWR.

LR extracts five textual features (sentences, nouns, unique nouns,
prepositions, Flesch-Kincaid grade) and four mathematical ones (numeric
values, text-based numeric values, operators, unique operators) from the
stem plus all options, then fits a closed-form linear regression.

FT fine-tunes an encoder over the raw MCQ text in the order
[stem, key, d1, d2, d3]; FTWR interleaves the generated auxiliary text,
[stem, reasoning, key, feedback1, d1, feedback2, d2, feedback3, d3].
Both regress difficulty with a linear head on the pooled embedding.
"""

from __future__ import annotations

import copy
import csv
import logging
import re
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
from torch import nn

from mcqdiff.augment import AugmentedMcq
from mcqdiff.corpus import Corpus, Mcq
from mcqdiff.encoder import DTYPE, TextEncoder

logger = logging.getLogger(__name__)

FEATURE_NAMES = (
    "sentences",
    "nouns",
    "unique_nouns",
    "prepositions",
    "flesch_kincaid",
    "numeric_values",
    "text_numeric_values",
    "operators",
    "unique_operators",
)

_PREPOSITIONS = {
    "about", "above", "across", "after", "against", "along", "among", "around",
    "at", "before", "behind", "below", "beneath", "beside", "between", "beyond",
    "by", "down", "during", "for", "from", "in", "inside", "into", "near", "of",
    "off", "on", "onto", "out", "outside", "over", "past", "through", "to",
    "toward", "towards", "under", "until", "up", "upon", "with", "within",
    "without",
}

_NUMBER_WORDS = {
    "one", "two", "three", "four", "five", "six", "seven", "eight", "nine",
    "ten", "eleven", "twelve", "thirteen", "fourteen", "fifteen", "sixteen",
    "seventeen", "eighteen", "nineteen", "twenty", "thirty", "forty", "fifty",
    "sixty", "seventy", "eighty", "ninety", "hundred", "thousand",
}

# Function words that the fallback tagger never counts as nouns.
_FUNCTION_WORDS = _PREPOSITIONS | _NUMBER_WORDS | {
    "a", "an", "the", "this", "that", "these", "those", "some", "any", "each",
    "every", "no", "all", "both", "either", "neither", "much", "many", "few",
    "i", "you", "he", "she", "it", "we", "they", "me", "him", "her", "us",
    "them", "my", "your", "his", "its", "our", "their", "mine", "yours",
    "and", "or", "but", "nor", "so", "yet", "if", "then", "than", "because",
    "while", "when", "where", "which", "who", "whom", "whose", "what", "how",
    "why", "whether", "is", "are", "was", "were", "be", "been", "being", "am",
    "do", "does", "did", "done", "have", "has", "had", "having", "will",
    "would", "shall", "should", "can", "could", "may", "might", "must",
    "not", "as", "also", "only", "just", "very", "too", "there", "here",
    "solve", "find", "compute", "calculate", "evaluate", "select", "choose",
    "simplify", "write", "give", "show", "report", "following", "correct",
}

# Arithmetic/relational symbols counted as operator tokens.  ASCII '-' is an
# operator only when it is not joining two letters (hyphenated words).
_OPERATOR_CHARS = set("+-−×÷*/=^<>≤≥%")

_NUMBER_RE = re.compile(r"\d+(?:\.\d+)?")
_WORD_RE = re.compile(r"[A-Za-z]+(?:'[A-Za-z]+)?")
_SENTENCE_SPLIT_RE = re.compile(r"[.!?]+")


class RuleLexiconTagger:
    """Dependency-free part-of-speech fallback: lexicon + default-noun rule."""

    def is_noun(self, word: str) -> bool:
        w = word.lower()
        if w in _FUNCTION_WORDS or len(w) < 2:
            return False
        if w.endswith("ly"):
            return False
        return True

    def is_preposition(self, word: str) -> bool:
        return word.lower() in _PREPOSITIONS


_DEFAULT_TAGGER = RuleLexiconTagger()


@dataclass(frozen=True)
class SyntacticFeatures:
    sentences: float
    nouns: float
    unique_nouns: float
    prepositions: float
    flesch_kincaid: float
    numeric_values: float
    text_numeric_values: float
    operators: float
    unique_operators: float

    def as_array(self) -> np.ndarray:
        return np.array([getattr(self, name) for name in FEATURE_NAMES], dtype=np.float64)


def _count_syllables(word: str) -> int:
    groups = re.findall(r"[aeiouy]+", word.lower())
    return max(1, len(groups))


def _sentence_count(text: str) -> int:
    parts = [p for p in _SENTENCE_SPLIT_RE.split(text) if _WORD_RE.search(p)]
    if parts:
        return len(parts)
    return 1 if _WORD_RE.search(text) else 0


def flesch_kincaid_grade(text: str) -> float:
    """Grade-level readability with a vowel-group syllable heuristic."""
    words = _WORD_RE.findall(text)
    sentences = _sentence_count(text)
    if not words or sentences == 0:
        return 0.0
    syllables = sum(_count_syllables(w) for w in words)
    return 0.39 * (len(words) / sentences) + 11.8 * (syllables / len(words)) - 15.59


def _count_operators(text: str) -> tuple[int, int]:
    found: list[str] = []
    for k, ch in enumerate(text):
        if ch not in _OPERATOR_CHARS:
            continue
        if ch == "-":
            prev_alpha = k > 0 and text[k - 1].isalpha()
            next_alpha = k + 1 < len(text) and text[k + 1].isalpha()
            if prev_alpha and next_alpha:
                continue  # hyphenated word, not an arithmetic minus
        found.append(ch)
    return len(found), len(set(found))


def extract_features(mcq: Mcq, tagger: RuleLexiconTagger = _DEFAULT_TAGGER) -> SyntacticFeatures:
    """Deterministic 9-feature vector over the stem and all options."""
    text = "\n".join([mcq.stem, *mcq.options])
    words = _WORD_RE.findall(text)
    nouns = [w.lower() for w in words if tagger.is_noun(w)]
    preps = [w for w in words if tagger.is_preposition(w)]
    n_ops, n_unique_ops = _count_operators(text)
    return SyntacticFeatures(
        sentences=float(_sentence_count(text)),
        nouns=float(len(nouns)),
        unique_nouns=float(len(set(nouns))),
        prepositions=float(len(preps)),
        flesch_kincaid=flesch_kincaid_grade(text),
        numeric_values=float(len(_NUMBER_RE.findall(text))),
        text_numeric_values=float(sum(1 for w in words if w.lower() in _NUMBER_WORDS)),
        operators=float(n_ops),
        unique_operators=float(n_unique_ops),
    )


def feature_matrix(items: list[Mcq]) -> np.ndarray:
    return np.stack([extract_features(m).as_array() for m in items])


def export_features_csv(corpus: Corpus, path: str | Path) -> None:
    with Path(path).open("w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["id", *FEATURE_NAMES])
        for mcq in corpus:
            writer.writerow([mcq.id, *[repr(v) for v in extract_features(mcq).as_array()]])


@dataclass(frozen=True)
class LinearModel:
    coef: np.ndarray
    intercept: float

    def predict(self, features: np.ndarray) -> np.ndarray:
        return np.asarray(features, dtype=np.float64) @ self.coef + self.intercept


def fit_linear(features: np.ndarray, difficulties: np.ndarray) -> LinearModel:
    """Normal-equations least squares with intercept; tiny ridge on singular Gram."""
    x = np.asarray(features, dtype=np.float64)
    y = np.asarray(difficulties, dtype=np.float64)
    n, k = x.shape
    if n <= k:
        raise ValueError(f"need more samples ({n}) than features ({k})")
    xa = np.hstack([x, np.ones((n, 1))])
    gram = xa.T @ xa
    rhs = xa.T @ y
    try:
        beta = np.linalg.solve(gram, rhs)
        if not np.isfinite(beta).all():
            raise np.linalg.LinAlgError("non-finite solution")
    except np.linalg.LinAlgError:
        logger.warning("singular Gram matrix; refitting with 1e-8 ridge")
        beta = np.linalg.solve(gram + 1e-8 * np.eye(k + 1), rhs)
    return LinearModel(coef=beta[:k], intercept=float(beta[k]))


def ft_pack(mcq: Mcq) -> str:
    """FT input: stem then options, key first."""
    return "\n".join([mcq.stem, mcq.key, *mcq.distractors])


def ftwr_pack(aug: AugmentedMcq) -> str:
    """FTWR input: reasoning before the key, each feedback before its distractor."""
    mcq = aug.base
    parts = [mcq.stem, aug.reasoning, mcq.key]
    for fb, d in zip(aug.feedback, mcq.distractors):
        parts += [fb, d]
    return "\n".join(parts)


class FtRegressor(nn.Module):
    """Encoder plus a linear head on the pooled sequence embedding."""

    def __init__(self, encoder: TextEncoder, seed: int = 0):
        super().__init__()
        self.encoder = encoder
        self.head = nn.Linear(encoder.dim, 1, dtype=DTYPE)
        gen = torch.Generator().manual_seed(seed)
        bound = 1.0 / np.sqrt(encoder.dim)
        with torch.no_grad():
            self.head.weight.uniform_(-bound, bound, generator=gen)
            self.head.bias.zero_()

    def forward(self, texts: list[str]) -> torch.Tensor:
        return self.head(self.encoder.encode(texts)).squeeze(-1)


@dataclass(frozen=True)
class FtConfig:
    batch_size: int = 16
    epochs: int = 30
    lr: float = 1e-5
    lr_encoder: float | None = None
    seed: int = 0

    def __post_init__(self) -> None:
        if self.lr <= 0 or self.batch_size < 1 or self.epochs < 1:
            raise ValueError("invalid FT training configuration")


@dataclass
class FtResult:
    model: FtRegressor
    history: list[dict] = field(repr=False, default_factory=list)
    best_epoch: int = -1
    best_val_mse: float = float("inf")


def train_ft(
    model: FtRegressor,
    train_pairs: list[tuple[str, float]],
    val_pairs: list[tuple[str, float]],
    cfg: FtConfig,
) -> FtResult:
    """Squared-error fine-tuning; keeps the minimum-validation-loss weights."""
    if not train_pairs or not val_pairs:
        raise ValueError("train and validation sets must be non-empty")
    groups = [{"params": list(model.head.parameters()), "lr": cfg.lr}]
    enc_params = [p for p in model.encoder.parameters() if p.requires_grad]
    if enc_params:
        groups.append({"params": enc_params, "lr": cfg.lr_encoder or cfg.lr})
    optimizer = torch.optim.Adam(groups)
    gen = torch.Generator().manual_seed(cfg.seed)

    val_texts = [t for t, _ in val_pairs]
    val_y = torch.tensor([y for _, y in val_pairs], dtype=DTYPE)
    result = FtResult(model=model)
    best_state: dict | None = None
    for epoch in range(cfg.epochs):
        perm = torch.randperm(len(train_pairs), generator=gen).tolist()
        train_sum = 0.0
        for lo in range(0, len(perm), cfg.batch_size):
            batch = [train_pairs[i] for i in perm[lo : lo + cfg.batch_size]]
            pred = model([t for t, _ in batch])
            target = torch.tensor([y for _, y in batch], dtype=DTYPE)
            loss = ((pred - target) ** 2).mean()
            optimizer.zero_grad()
            loss.backward()
            optimizer.step()
            train_sum += float(loss.detach()) * len(batch)
        with torch.no_grad():
            val_mse = float(((model(val_texts) - val_y) ** 2).mean())
        result.history.append(
            {"epoch": epoch, "train_mse": train_sum / len(train_pairs), "val_mse": val_mse}
        )
        if val_mse < result.best_val_mse:
            result.best_val_mse = val_mse
            result.best_epoch = epoch
            best_state = copy.deepcopy(model.state_dict())
    if best_state is not None:
        model.load_state_dict(best_state)
    return result
