"""Option feature extraction: text in, fixed-width latent vector out.

Two backends share one interface:

* ``test`` -- deterministic hashed features, no weights to download.  With
  ``pooling="start"`` the whole packed text is hashed to one pseudo-random
  unit vector; with ``pooling="mean"`` per-token hash vectors are averaged
  (compositional, so shared tokens produce correlated features).  In
  trainable mode an identity-initialized linear adapter stands in for
  fine-tuning, so gradients flow exactly like in the pretrained backend.
* any other backend id -- a pretrained encoder-only transformer resolved via
  the model hub or a local directory (requires the ``transformers`` extra).
"""

from __future__ import annotations

import hashlib
import logging
from dataclasses import dataclass

import numpy as np
import torch
from torch import nn

logger = logging.getLogger(__name__)

TEST_BACKEND = "test"
TEST_DIM = 64
DTYPE = torch.float64


class EncoderBackendError(RuntimeError):
    """The requested encoder backend cannot be constructed."""


@dataclass(frozen=True)
class EncoderSpec:
    backend: str = TEST_BACKEND
    max_length: int = 4096
    pooling: str = "start"
    trainable: bool = False

    def __post_init__(self) -> None:
        if self.max_length < 1:
            raise ValueError("max_length must be >= 1")
        if self.pooling not in ("start", "mean"):
            raise ValueError(f"pooling must be 'start' or 'mean', got {self.pooling!r}")


@dataclass(frozen=True)
class LatentFeature:
    """One option's latent vector plus its position (0 = key)."""

    values: np.ndarray
    option_index: int | None = None

    def __post_init__(self) -> None:
        vals = np.asarray(self.values, dtype=np.float64)
        if not np.isfinite(vals).all():
            raise ValueError("latent feature entries must be finite")
        vals.setflags(write=False)
        object.__setattr__(self, "values", vals)


def pack_input(stem: str, option: str, aux: str = "") -> str:
    """Deterministic input template for one option.

    ``aux`` may be empty (ablation mode); the trailing label is kept so the
    layout is positionally stable.
    """
    if not stem:
        raise ValueError("stem must be non-empty")
    if not option:
        raise ValueError("option must be non-empty")
    return f"Question: {stem}\nOption: {option}\nExplanation: {aux}"


class TextEncoder(nn.Module):
    """Common interface: ``encode(texts) -> (len(texts), dim) tensor``."""

    spec: EncoderSpec

    @property
    def dim(self) -> int:
        raise NotImplementedError

    def encode(self, texts: list[str]) -> torch.Tensor:
        raise NotImplementedError


class HashedTextEncoder(TextEncoder):
    """Seeded hash features with an optional trainable linear adapter."""

    def __init__(self, spec: EncoderSpec, seed: int = 0):
        super().__init__()
        if spec.backend != TEST_BACKEND:
            raise EncoderBackendError(f"backend {spec.backend!r} is not the test backend")
        self.spec = spec
        self.seed = seed
        self._token_cache: dict[str, np.ndarray] = {}
        self._text_cache: dict[str, torch.Tensor] = {}
        if spec.trainable:
            adapter = nn.Linear(TEST_DIM, TEST_DIM, dtype=DTYPE)
            with torch.no_grad():
                adapter.weight.copy_(torch.eye(TEST_DIM, dtype=DTYPE))
                adapter.bias.zero_()
            self.adapter = adapter
        else:
            self.adapter = None

    @property
    def dim(self) -> int:
        return TEST_DIM

    def _hash_vector(self, token: str) -> np.ndarray:
        cached = self._token_cache.get(token)
        if cached is None:
            digest = hashlib.sha256(f"{self.seed}|{token}".encode("utf-8")).digest()
            rng = np.random.default_rng(int.from_bytes(digest[:8], "little"))
            cached = rng.standard_normal(TEST_DIM)
            self._token_cache[token] = cached
        return cached

    def _base_vector(self, text: str) -> torch.Tensor:
        cached = self._text_cache.get(text)
        if cached is not None:
            return cached
        tokens = text.split()
        if len(tokens) > self.spec.max_length:
            logger.warning(
                "input of %d tokens truncated to max length %d",
                len(tokens),
                self.spec.max_length,
            )
            tokens = tokens[: self.spec.max_length]
        if self.spec.pooling == "mean" and tokens:
            vec = np.mean([self._hash_vector(t) for t in tokens], axis=0)
        else:
            vec = self._hash_vector(" ".join(tokens) if tokens else "<empty>")
        vec = vec / np.linalg.norm(vec)
        out = torch.from_numpy(vec).to(DTYPE)
        self._text_cache[text] = out
        return out

    def encode(self, texts: list[str]) -> torch.Tensor:
        base = torch.stack([self._base_vector(t) for t in texts])
        if self.adapter is not None:
            return self.adapter(base)
        return base


class PretrainedTextEncoder(TextEncoder):
    """Encoder-only transformer backend resolved from a hub name or path."""

    def __init__(self, spec: EncoderSpec, seed: int = 0):
        super().__init__()
        self.spec = spec
        try:
            from transformers import AutoModel, AutoTokenizer
        except ImportError as exc:
            raise EncoderBackendError(
                f"backend {spec.backend!r} needs the 'transformers' extra"
            ) from exc
        try:
            self.tokenizer = AutoTokenizer.from_pretrained(spec.backend)
            self.model = AutoModel.from_pretrained(spec.backend)
        except Exception as exc:
            raise EncoderBackendError(
                f"backend {spec.backend!r} could not be loaded: {exc}"
            ) from exc
        for p in self.model.parameters():
            p.requires_grad_(spec.trainable)

    @property
    def dim(self) -> int:
        return int(self.model.config.hidden_size)

    def encode(self, texts: list[str]) -> torch.Tensor:
        enc = self.tokenizer(
            texts,
            padding=True,
            truncation=True,
            max_length=self.spec.max_length,
            return_tensors="pt",
            return_overflowing_tokens=False,
        )
        lengths = [len(self.tokenizer(t)["input_ids"]) for t in texts]
        if any(n > self.spec.max_length for n in lengths):
            logger.warning(
                "%d inputs exceeded max length %d and were tail-truncated",
                sum(n > self.spec.max_length for n in lengths),
                self.spec.max_length,
            )
        out = self.model(**enc).last_hidden_state
        if self.spec.pooling == "start":
            pooled = out[:, 0, :]
        else:
            mask = enc["attention_mask"].unsqueeze(-1).to(out.dtype)
            pooled = (out * mask).sum(dim=1) / mask.sum(dim=1).clamp(min=1.0)
        return pooled.to(DTYPE)


def build_encoder(spec: EncoderSpec, seed: int = 0) -> TextEncoder:
    if spec.backend == TEST_BACKEND:
        return HashedTextEncoder(spec, seed=seed)
    return PretrainedTextEncoder(spec, seed=seed)


_SHARED: dict[tuple[EncoderSpec, int], TextEncoder] = {}


def _shared_encoder(spec: EncoderSpec, seed: int = 0) -> TextEncoder:
    key = (spec, seed)
    if key not in _SHARED:
        _SHARED[key] = build_encoder(spec, seed=seed)
    return _SHARED[key]


def encode_option(packed: str, spec: EncoderSpec, seed: int = 0) -> LatentFeature:
    if not packed:
        raise ValueError("packed input must be non-empty")
    enc = _shared_encoder(spec, seed)
    with torch.no_grad():
        vec = enc.encode([packed])[0].numpy()
    return LatentFeature(values=vec)


def encode_mcq(item, spec: EncoderSpec, seed: int = 0) -> list[LatentFeature]:
    """Encode all four options, ordered (key, d1, d2, d3).

    Accepts an ``AugmentedMcq`` (reasoning/feedback as auxiliary text) or a
    bare ``Mcq`` (empty auxiliary text, the ablation mode).
    """
    if hasattr(item, "base"):
        mcq = item.base
        auxes = (item.reasoning, *item.feedback)
    else:
        mcq = item
        auxes = ("", "", "", "")
    packs = [pack_input(mcq.stem, opt, aux) for opt, aux in zip(mcq.options, auxes)]
    enc = _shared_encoder(spec, seed)
    with torch.no_grad():
        vecs = enc.encode(packs).numpy()
    return [LatentFeature(values=vecs[k], option_index=k) for k in range(4)]
