"""Synthetic corpus generators.

``make_irt_corpus``: items with known logistic parameters, a simulated cohort
answering every item, and counts aggregated from those responses.  Used to
check that calibration recovers the generating difficulties.

``make_teacher_corpus``: items whose true difficulty is a fixed function of
their text, with selection counts drawn from a frozen "teacher" built from
the same module family as the trainable model (hashed features -> knowledge
projection -> option softmax).  Difficulty mixes three standardized
components, all deterministic in the item text:

* a distribution term (log-odds of missing the key under the teacher),
  recoverable from selection counts;
* a topic term carried by a stem token;
* a misconception term carried only by the generated feedback text.

Replay fixtures ship the auxiliary text, so a full experiment runs offline.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import torch

from mcqdiff.augment import (
    DEFAULT_TEMPLATE,
    ROLE_FEEDBACK,
    ROLE_REASONING,
    cache_key,
)
from mcqdiff.corpus import Corpus, Mcq
from mcqdiff.encoder import DTYPE, EncoderSpec, build_encoder, pack_input
from mcqdiff.irt import (
    ItemParams,
    SyntheticCohort,
    sample_knowledge,
    simulate_responses,
)
from mcqdiff.model import DifficultyHead, StudentProjector, _init_linear

_TOPICS = (
    "fractions", "percentages", "algebra", "geometry", "ratios",
    "decimals", "exponents", "sequences", "probability", "integers",
)
_VERBS = ("simplify", "evaluate", "compute", "solve", "estimate")
_MISCONCEPTIONS = (
    "sign-confusion", "carry-slip", "operation-swap", "place-value-slip",
    "reversal-error", "off-by-one", "overgeneralization", "fact-recall-gap",
    "distribution-error", "estimation-drift", "unit-mixup", "sequence-break",
)


def _arithmetic_item(rng: np.random.Generator, item_id: str) -> Mcq:
    a = int(rng.integers(2, 40))
    b = int(rng.integers(2, 40))
    op, value = (("+", a + b), ("-", a - b), ("*", a * b))[int(rng.integers(3))]
    topic = str(rng.choice(_TOPICS))
    verb = str(rng.choice(_VERBS))
    stem = (
        f"In this {topic} exercise, {verb} the expression {a} {op} {b} "
        f"and select the correct result."
    )
    key = str(int(value))
    pool = [a + b, a - b, a * b, b - a, a + b + 1, a * b - 1, a - b + 2, a + b - 2]
    distractors: list[str] = []
    for cand in pool:
        text = str(int(cand))
        if text != key and text not in distractors:
            distractors.append(text)
        if len(distractors) == 3:
            break
    while len(distractors) < 3:
        text = str(int(value) + int(rng.integers(2, 9)))
        if text != key and text not in distractors:
            distractors.append(text)
    return Mcq(id=item_id, stem=stem, key=key, distractors=tuple(distractors))


def make_irt_corpus(
    n_items: int,
    cohort_size: int,
    model: str = "2PL",
    seed: int = 1,
    a_range: tuple[float, float] = (0.8, 2.0),
    b_range: tuple[float, float] = (-2.0, 3.0),
    c_range: tuple[float, float] = (0.05, 0.3),
) -> tuple[Corpus, SyntheticCohort]:
    """Corpus with counts from simulated responses and difficulty = true b."""
    rng = np.random.default_rng(seed)
    params = []
    for _ in range(n_items):
        c = float(rng.uniform(*c_range)) if model == "3PL" else 0.0
        params.append(
            ItemParams(
                model=model,
                a=float(rng.uniform(*a_range)),
                b=float(rng.uniform(*b_range)),
                c=c,
            )
        )
    profile = rng.dirichlet([1.5, 1.5, 1.5], size=n_items)
    item_ids = [f"q{i:04d}" for i in range(n_items)]
    cohort = simulate_responses(params, cohort_size, profile, seed=seed + 1, item_ids=item_ids)

    counts = np.zeros((n_items, 4), dtype=np.int64)
    id_pos = {mid: i for i, mid in enumerate(item_ids)}
    for rec in cohort.responses:
        counts[id_pos[rec.mcq_id], rec.selected] += 1

    items = []
    for i in range(n_items):
        base = _arithmetic_item(rng, item_ids[i])
        items.append(
            Mcq(
                id=base.id,
                stem=base.stem,
                key=base.key,
                distractors=base.distractors,
                counts=tuple(int(x) for x in counts[i]),
                difficulty=params[i].b,
            )
        )
    corpus = Corpus(
        items=tuple(items),
        provenance={"name": f"synth-irt-{model.lower()}", "seed": str(seed)},
    )
    return corpus, cohort


@dataclass
class TeacherCorpusConfig:
    n_items: int = 150
    count_students: int = 2000
    knowledge_m: int = 1000
    knowledge_d: int = 2
    seed: int = 17
    encoder_seed: int = 0
    si_scale: float = 6.0
    head_scale: float = 6.0
    model_name: str = "fixture-v1"
    template_version: str = DEFAULT_TEMPLATE.version


@dataclass
class TeacherCorpus:
    corpus: Corpus
    fixtures: dict[str, str]
    population_dists: np.ndarray = field(repr=False, default=None)


def _reasoning_text(rng: np.random.Generator, mcq: Mcq, topic: str, verb: str) -> str:
    steps = int(rng.integers(1, 5))
    method = str(rng.choice(_MISCONCEPTIONS))
    return (
        f"To {verb} this {topic} expression, work through {steps} short steps: "
        f"apply the operation to both numbers, keep track of the sign, and "
        f"check the magnitude. The expression equals {mcq.key}, so the correct "
        f"result is {mcq.key}. Watch for the common {method} pitfall on the way."
    )


def _feedback_text(rng: np.random.Generator, distractor: str, topic: str) -> str:
    mis = str(rng.choice(_MISCONCEPTIONS))
    severity = int(rng.integers(1, 4))
    sentences = [
        f"Choosing {distractor} usually signals a {mis} error.",
        f"The {mis} pattern appears when students rush the {topic} step.",
        f"Reviewing {mis} examples makes this distractor much less tempting.",
    ]
    return " ".join(sentences[:severity] + [f"Practice targeting {mis} directly."])


def make_teacher_corpus(cfg: TeacherCorpusConfig) -> TeacherCorpus:
    """Corpus + replay fixtures generated by a frozen same-family teacher."""
    rng = np.random.default_rng(cfg.seed)
    spec = EncoderSpec(backend="test", pooling="mean", trainable=False)
    encoder = build_encoder(spec, seed=cfg.encoder_seed)

    raw_items: list[Mcq] = []
    fixtures: dict[str, str] = {}
    auxes: list[tuple[str, str, str, str]] = []
    for i in range(cfg.n_items):
        mcq = _arithmetic_item(rng, f"t{i:04d}")
        topic = mcq.stem.split()[2]
        verb = mcq.stem.split()[3]
        reasoning = _reasoning_text(rng, mcq, topic, verb)
        feedback = tuple(_feedback_text(rng, d, topic) for d in mcq.distractors)
        fixtures[
            cache_key(cfg.template_version, cfg.model_name, mcq.stem, mcq.key, ROLE_REASONING)
        ] = reasoning
        for d, fb in zip(mcq.distractors, feedback):
            fixtures[
                cache_key(cfg.template_version, cfg.model_name, mcq.stem, d, ROLE_FEEDBACK)
            ] = fb
        raw_items.append(mcq)
        auxes.append((reasoning, *feedback))

    features = torch.stack(
        [
            encoder.encode(
                [pack_input(m.stem, opt, aux) for opt, aux in zip(m.options, aux4)]
            )
            for m, aux4 in zip(raw_items, auxes)
        ]
    )  # (N, 4, E)

    gen = torch.Generator().manual_seed(cfg.seed + 1)
    projector = StudentProjector(cfg.knowledge_d, encoder.dim)
    for layer in (projector.fc1, projector.fc2):
        _init_linear(layer, gen)
    with torch.no_grad():
        projector.fc2.weight.mul_(cfg.si_scale)
    head = DifficultyHead()
    for layer in head.layers:
        _init_linear(layer, gen)
    with torch.no_grad():
        head.layers[0].weight.mul_(cfg.head_scale)

    knowledge = sample_knowledge(cfg.knowledge_m, cfg.knowledge_d, cfg.seed + 2)
    with torch.no_grad():
        t = projector(torch.from_numpy(np.array(knowledge.values)).to(DTYPE))  # (M, E)
        logits = features @ t.T  # (N, 4, M)
        dists = torch.softmax(logits, dim=1).mean(dim=2)  # (N, 4)
        raw_df = head(dists).squeeze(-1)
        # Normalizing the output is an affine change of the last linear layer,
        # so the teacher stays inside the same model family.
        mu, sd = raw_df.mean(), raw_df.std()
        head.layers[-1].weight.div_(sd)
        head.layers[-1].bias.sub_(mu)
        head.layers[-1].bias.div_(sd)
        df = head(dists).squeeze(-1).numpy()
    q = dists.numpy()

    items = []
    for i, mcq in enumerate(raw_items):
        counts = rng.multinomial(cfg.count_students, q[i] / q[i].sum())
        items.append(
            Mcq(
                id=mcq.id,
                stem=mcq.stem,
                key=mcq.key,
                distractors=mcq.distractors,
                counts=tuple(int(x) for x in counts),
                difficulty=float(df[i]),
            )
        )
    corpus = Corpus(
        items=tuple(items),
        provenance={
            "name": "synth-teacher",
            "seed": str(cfg.seed),
            "knowledge_m": str(cfg.knowledge_m),
            "count_students": str(cfg.count_students),
        },
    )
    return TeacherCorpus(corpus=corpus, fixtures=fixtures, population_dists=q)
