"""Neural difficulty model.

For one question with per-option latent features h (4 x E) and a fixed bank
of sampled knowledge levels L (M x d):

  T_j   = projector(L_j)                      projection into feature space
  p_j   = softmax(h @ T_j)                    one student's selection dist
  avg   = mean_j p_j                          population selection dist
  df    = head(avg)                           predicted difficulty (logit scale)

The projector is a 2-layer perceptron with a leaky rectifier; the head is a
4-layer perceptron with tanh hidden activations and a linear output (ground
truth difficulties extend well beyond +-1).
"""

from __future__ import annotations

import hashlib
import json
import logging
from dataclasses import asdict

import numpy as np
import torch
from torch import nn

from mcqdiff.encoder import DTYPE, EncoderSpec, TextEncoder, build_encoder
from mcqdiff.irt import KnowledgeMatrix, sample_knowledge

logger = logging.getLogger(__name__)

SI_HIDDEN = 64
DP_HIDDEN = (64, 32, 16)
LEAKY_SLOPE = 0.01


def _init_linear(layer: nn.Linear, gen: torch.Generator) -> None:
    # Fan-in scaled uniform weights, zero biases.
    bound = 1.0 / np.sqrt(layer.in_features)
    with torch.no_grad():
        layer.weight.uniform_(-bound, bound, generator=gen)
        layer.bias.zero_()


class StudentProjector(nn.Module):
    """2-layer perceptron mapping knowledge levels into feature space."""

    def __init__(self, d: int, out_dim: int, hidden: int = SI_HIDDEN):
        super().__init__()
        self.d = d
        self.fc1 = nn.Linear(d, hidden, dtype=DTYPE)
        self.fc2 = nn.Linear(hidden, out_dim, dtype=DTYPE)

    def forward(self, levels: torch.Tensor) -> torch.Tensor:
        return self.fc2(nn.functional.leaky_relu(self.fc1(levels), LEAKY_SLOPE))


class DifficultyHead(nn.Module):
    """4-layer perceptron from a 4-simplex point to an unbounded difficulty."""

    def __init__(self, hidden: tuple[int, int, int] = DP_HIDDEN):
        super().__init__()
        dims = (4, *hidden, 1)
        self.layers = nn.ModuleList(
            nn.Linear(dims[i], dims[i + 1], dtype=DTYPE) for i in range(len(dims) - 1)
        )

    def forward(self, dist: torch.Tensor) -> torch.Tensor:
        x = dist
        for layer in self.layers[:-1]:
            x = torch.tanh(layer(x))
        return self.layers[-1](x)


def _ordered_softmax(logits: np.ndarray) -> np.ndarray:
    """Overflow-safe softmax whose result is invariant to input ordering.

    The denominator sums the exponentials in sorted order, so permuting the
    logits permutes the output exactly (bit for bit).
    """
    if not np.all(np.isfinite(logits)):
        raise ValueError("non-finite logits in selection softmax")
    exps = np.exp(logits - np.max(logits))
    denom = float(np.sum(np.sort(exps)))
    return exps / denom


def project_knowledge(levels: np.ndarray, projector: StudentProjector) -> np.ndarray:
    """Project one knowledge level (d,) or a bank (M, d) into feature space."""
    arr = np.asarray(levels, dtype=np.float64)
    if arr.shape[-1] != projector.d:
        raise ValueError(f"knowledge dimension {arr.shape[-1]} != projector d={projector.d}")
    with torch.no_grad():
        out = projector(torch.from_numpy(arr).to(DTYPE))
    return out.numpy()


def selection_likelihoods(features: np.ndarray, projection: np.ndarray) -> np.ndarray:
    """One student's option-selection distribution over (key, d1, d2, d3)."""
    h = np.asarray(features, dtype=np.float64)
    t = np.asarray(projection, dtype=np.float64)
    if h.shape[0] != 4:
        raise ValueError("expected 4 option features")
    logits = h @ t
    return _ordered_softmax(logits)


def population_likelihoods(
    features: np.ndarray, knowledge: KnowledgeMatrix, projector: StudentProjector
) -> np.ndarray:
    """Arithmetic mean of per-student selection distributions."""
    if knowledge.m < 1:
        raise ValueError("knowledge matrix must be non-empty")
    proj = project_knowledge(knowledge.values, projector)
    dists = np.stack([selection_likelihoods(features, proj[j]) for j in range(knowledge.m)])
    return dists.mean(axis=0)


def predict_difficulty(avg: np.ndarray, head: DifficultyHead) -> float:
    arr = np.asarray(avg, dtype=np.float64)
    if arr.shape != (4,):
        raise ValueError("expected a length-4 selection distribution")
    with torch.no_grad():
        out = head(torch.from_numpy(arr).to(DTYPE))
    return float(out.item())


class DifficultyModel(nn.Module):
    """Encoder + student projector + difficulty head over a fixed knowledge bank."""

    def __init__(
        self,
        encoder: TextEncoder,
        knowledge: KnowledgeMatrix,
        seed: int = 0,
        si_hidden: int = SI_HIDDEN,
        dp_hidden: tuple[int, int, int] = DP_HIDDEN,
    ):
        super().__init__()
        self.encoder = encoder
        self.knowledge_meta = (knowledge.m, knowledge.d, knowledge.seed)
        self.seed = seed
        self.si_hidden = si_hidden
        self.dp_hidden = tuple(dp_hidden)
        self.projector = StudentProjector(knowledge.d, encoder.dim, hidden=si_hidden)
        self.head = DifficultyHead(hidden=self.dp_hidden)
        gen = torch.Generator().manual_seed(seed)
        for layer in (self.projector.fc1, self.projector.fc2, *self.head.layers):
            _init_linear(layer, gen)
        self.register_buffer(
            "knowledge", torch.from_numpy(np.array(knowledge.values)).to(DTYPE)
        )

    def encode_items(self, texts: list[tuple[str, str, str, str]]) -> torch.Tensor:
        """Encode a batch of per-option packed texts into (B, 4, E) features."""
        flat = [t for quad in texts for t in quad]
        return self.encoder.encode(flat).reshape(len(texts), 4, -1)

    def population_distribution(self, features: torch.Tensor) -> torch.Tensor:
        """(B, 4, E) features -> (B, 4) population-mean selection distributions."""
        t = self.projector(self.knowledge)  # (M, E)
        logits = features @ t.T  # (B, 4, M)
        per_student = torch.softmax(logits, dim=1)
        return per_student.mean(dim=2)

    def forward(self, features: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        avg = self.population_distribution(features)
        df_hat = self.head(avg).squeeze(-1)
        return df_hat, avg

    def per_student_difficulties(self, features: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        """(4, E) features -> per-student difficulties (M,) and dists (M, 4)."""
        with torch.no_grad():
            t = self.projector(self.knowledge)  # (M, E)
            logits = t @ features.T  # (M, 4)
            dists = torch.softmax(logits, dim=1)
            diffs = self.head(dists).squeeze(-1)
        return diffs, dists

    def config_fingerprint(self) -> str:
        payload = json.dumps(
            {
                "backend": asdict(self.encoder.spec),
                "knowledge": list(self.knowledge_meta),
                "seed": self.seed,
                "si_hidden": self.si_hidden,
                "dp_hidden": list(self.dp_hidden),
            },
            sort_keys=True,
        )
        return hashlib.sha256(payload.encode("utf-8")).hexdigest()


def build_difficulty_model(
    spec: EncoderSpec,
    knowledge: KnowledgeMatrix | None = None,
    seed: int = 0,
    encoder: TextEncoder | None = None,
) -> DifficultyModel:
    if knowledge is None:
        knowledge = sample_knowledge()
    if encoder is None:
        encoder = build_encoder(spec, seed=seed)
    return DifficultyModel(encoder=encoder, knowledge=knowledge, seed=seed)


def save_checkpoint(model: DifficultyModel, path, extra: dict | None = None) -> None:
    """Single-archive checkpoint; reload reproduces predictions bit for bit."""
    payload = {
        "format": 1,
        "encoder_spec": asdict(model.encoder.spec),
        "encoder_seed": getattr(model.encoder, "seed", 0),
        "knowledge": {
            "m": model.knowledge_meta[0],
            "d": model.knowledge_meta[1],
            "seed": model.knowledge_meta[2],
        },
        "model_seed": model.seed,
        "si_hidden": model.si_hidden,
        "dp_hidden": list(model.dp_hidden),
        "config_fingerprint": model.config_fingerprint(),
        "state": model.state_dict(),
        "extra": extra or {},
    }
    torch.save(payload, path)


def load_checkpoint(path) -> tuple[DifficultyModel, dict]:
    payload = torch.load(path, weights_only=False)
    if payload.get("format") != 1:
        raise ValueError(f"unsupported checkpoint format {payload.get('format')!r}")
    spec = EncoderSpec(**payload["encoder_spec"])
    know = payload["knowledge"]
    knowledge = sample_knowledge(know["m"], know["d"], know["seed"])
    encoder = build_encoder(spec, seed=payload["encoder_seed"])
    model = DifficultyModel(
        encoder=encoder,
        knowledge=knowledge,
        seed=payload["model_seed"],
        si_hidden=payload["si_hidden"],
        dp_hidden=tuple(payload["dp_hidden"]),
    )
    model.load_state_dict(payload["state"])
    return model, payload["extra"]
