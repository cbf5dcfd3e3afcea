"""Reasoning and feedback text generation for MCQ options.

For the key we request the worked reasoning that reaches it; for each
distractor we request a feedback message explaining the error that would lead
a student there.  Completions are cached append-only on disk keyed by a
stable prompt hash, so batch augmentation is resumable and repeated runs are
free.  Replay mode serves recorded fixtures and never touches the network.
"""

from __future__ import annotations

import hashlib
import json
import logging
import os
import threading
import time
from dataclasses import dataclass, field
from pathlib import Path

from mcqdiff.corpus import Corpus, Mcq

logger = logging.getLogger(__name__)

ENDPOINT_ENV = "MCQDIFF_ENDPOINT"
API_KEY_ENV = "MCQDIFF_API_KEY"

ROLE_REASONING = "reasoning"
ROLE_FEEDBACK = "feedback"


class ProviderError(RuntimeError):
    """The completion provider failed after all retries."""


class ReplayMissError(KeyError):
    """A replay-mode request has no recorded fixture."""


class AugmentationError(RuntimeError):
    def __init__(self, failed_ids: list[str], causes: dict[str, str]):
        self.failed_ids = failed_ids
        self.causes = causes
        super().__init__(f"augmentation failed for items: {failed_ids}")


@dataclass(frozen=True)
class GenerationConfig:
    model_name: str
    temperature: float = 1.0
    max_tokens: int = 1000
    top_p: float = 0.95
    max_attempts: int = 4
    backoff_seconds: float = 1.0
    requests_per_minute: float | None = None

    def __post_init__(self) -> None:
        if self.temperature < 0:
            raise ValueError("temperature must be >= 0")
        if self.max_tokens <= 0:
            raise ValueError("max_tokens must be positive")
        if not 0 < self.top_p <= 1:
            raise ValueError("top_p must lie in (0, 1]")
        if self.max_attempts < 1:
            raise ValueError("max_attempts must be >= 1")


@dataclass(frozen=True)
class Demonstration:
    role: str
    stem: str
    option: str
    response: str


@dataclass(frozen=True)
class PromptTemplate:
    version: str
    instructions: str
    demonstrations: tuple[Demonstration, ...]

    def __post_init__(self) -> None:
        if len(self.demonstrations) != 4:
            raise ValueError("template must carry exactly 4 demonstrations")


_INSTRUCTIONS = (
    "You assist with analyzing math multiple-choice questions.\n"
    "Given a question and its correct answer, write the step-by-step "
    "reasoning a student needs to reach that answer.\n"
    "Given a question and an incorrect option, write a short feedback "
    "message explaining the specific error or misconception that would "
    "lead a student to choose it.\n"
    "Be concrete: name the operations, show the intermediate values, and "
    "keep the explanation self-contained."
)

_DEMO_REASONING_1 = Demonstration(
    role=ROLE_REASONING,
    stem="The sum of three consecutive even numbers is 48. What is the middle value?",
    option="16",
    response=(
        "Write the three consecutive even numbers as x, x+2, and x+4. "
        "Adding them gives x + (x+2) + (x+4) = 48, so 3x + 6 = 48. "
        "Subtract 6 from both sides: 3x = 42, and divide by 3: x = 14. "
        "The numbers are 14, 16, and 18, so the middle value is 16."
    ),
)

_DEMO_REASONING_2 = Demonstration(
    role=ROLE_REASONING,
    stem="A rectangle is 8 cm long and 5 cm wide. What is its area?",
    option="40",
    response=(
        "The area of a rectangle is length times width. "
        "Multiply 8 by 5 to get 40, so the area is 40 square centimeters."
    ),
)

_DEMO_FEEDBACK_1 = Demonstration(
    role=ROLE_FEEDBACK,
    stem="What is 3/4 + 1/8?",
    option="4/12",
    response=(
        "The student added the numerators (3 + 1 = 4) and the denominators "
        "(4 + 8 = 12) separately instead of rewriting both fractions over a "
        "common denominator. The correct approach converts 3/4 to 6/8 before "
        "adding, giving 7/8."
    ),
)

_DEMO_FEEDBACK_2 = Demonstration(
    role=ROLE_FEEDBACK,
    stem="Solve for x: 2x + 6 = 14.",
    option="8",
    response=(
        "The student subtracted 6 from 14 correctly to get 2x = 8, but then "
        "reported the right-hand side instead of finishing the division by 2. "
        "Dividing both sides by 2 gives x = 4."
    ),
)

DEFAULT_TEMPLATE = PromptTemplate(
    version="demos-v1",
    instructions=_INSTRUCTIONS,
    demonstrations=(
        _DEMO_REASONING_1,
        _DEMO_REASONING_2,
        _DEMO_FEEDBACK_1,
        _DEMO_FEEDBACK_2,
    ),
)

_ROLE_LABEL = {
    ROLE_REASONING: ("Correct Answer", "Reasoning steps for the correct answer"),
    ROLE_FEEDBACK: ("Incorrect Option", "Feedback message for the incorrect option"),
}


def render_prompt(template: PromptTemplate, stem: str, option: str, role: str) -> str:
    """Canonical prompt text; field order and whitespace are fixed."""
    if role not in _ROLE_LABEL:
        raise ValueError(f"unknown role {role!r}")
    parts = [template.instructions, ""]
    for demo in template.demonstrations:
        opt_label, resp_label = _ROLE_LABEL[demo.role]
        parts += [
            f"Question: {demo.stem}",
            f"{opt_label}: {demo.option}",
            f"{resp_label}: {demo.response}",
            "",
        ]
    opt_label, resp_label = _ROLE_LABEL[role]
    parts += [f"Question: {stem}", f"{opt_label}: {option}", f"{resp_label}:"]
    return "\n".join(parts)


def cache_key(template_version: str, model_name: str, stem: str, option: str, role: str) -> str:
    """Stable hash identifying one generation request."""
    payload = json.dumps(
        {
            "template": template_version,
            "model": model_name,
            "stem": stem,
            "option": option,
            "role": role,
        },
        sort_keys=True,
        ensure_ascii=False,
        separators=(",", ":"),
    )
    return hashlib.sha256(payload.encode("utf-8")).hexdigest()


class CompletionCache:
    """Append-only JSONL store of ``{cache_key, text}`` records."""

    def __init__(self, path: str | Path | None):
        self.path = Path(path) if path is not None else None
        self._mem: dict[str, str] = {}
        self._lock = threading.Lock()
        if self.path is not None and self.path.exists():
            with self.path.open("r", encoding="utf-8") as fh:
                for line in fh:
                    line = line.strip()
                    if not line:
                        continue
                    rec = json.loads(line)
                    self._mem[rec["cache_key"]] = rec["text"]

    def __len__(self) -> int:
        return len(self._mem)

    def get(self, key: str) -> str | None:
        return self._mem.get(key)

    def put(self, key: str, text: str) -> None:
        with self._lock:
            if key in self._mem:
                return
            self._mem[key] = text
            if self.path is not None:
                record = json.dumps(
                    {"cache_key": key, "text": text}, ensure_ascii=False
                )
                with self.path.open("a", encoding="utf-8") as fh:
                    fh.write(record + "\n")


def load_fixtures(paths: list[str | Path]) -> dict[str, str]:
    """Load replay fixtures: JSONL of ``{cache_key, text}``."""
    out: dict[str, str] = {}
    for path in paths:
        with Path(path).open("r", encoding="utf-8") as fh:
            for line in fh:
                line = line.strip()
                if not line:
                    continue
                rec = json.loads(line)
                out[rec["cache_key"]] = rec["text"]
    return out


def write_fixtures(entries: dict[str, str], path: str | Path) -> None:
    with Path(path).open("w", encoding="utf-8") as fh:
        for key in entries:
            fh.write(json.dumps({"cache_key": key, "text": entries[key]}, ensure_ascii=False) + "\n")


class _TokenBucket:
    """Simple requests-per-minute limiter."""

    def __init__(self, per_minute: float):
        self.interval = 60.0 / per_minute
        self._next = 0.0
        self._lock = threading.Lock()

    def wait(self) -> None:
        with self._lock:
            now = time.monotonic()
            delay = max(0.0, self._next - now)
            self._next = max(now, self._next) + self.interval
        if delay > 0:
            time.sleep(delay)


class ChatCompletionClient:
    """Minimal chat-completion HTTP adapter (endpoint and token via env)."""

    def __init__(self, cfg: GenerationConfig, endpoint: str | None = None, api_key: str | None = None):
        self.cfg = cfg
        self.endpoint = endpoint or os.environ.get(ENDPOINT_ENV)
        self.api_key = api_key or os.environ.get(API_KEY_ENV)
        if not self.endpoint:
            raise ProviderError(f"no provider endpoint; set {ENDPOINT_ENV}")
        self.calls = 0

    def complete(self, prompt: str) -> str:
        import requests

        headers = {"Content-Type": "application/json"}
        if self.api_key:
            headers["Authorization"] = f"Bearer {self.api_key}"
        body = {
            "model": self.cfg.model_name,
            "messages": [{"role": "user", "content": prompt}],
            "temperature": self.cfg.temperature,
            "max_tokens": self.cfg.max_tokens,
            "top_p": self.cfg.top_p,
        }
        last = "no attempt made"
        for attempt in range(self.cfg.max_attempts):
            self.calls += 1
            try:
                resp = requests.post(self.endpoint, json=body, headers=headers, timeout=120)
            except requests.RequestException as exc:
                last = f"connection error: {exc}"
            else:
                if resp.status_code == 200:
                    data = resp.json()
                    text = data["choices"][0]["message"]["content"]
                    if not text:
                        raise ProviderError("provider returned an empty completion")
                    return text
                last = f"status {resp.status_code}: {resp.text[:200]}"
                if resp.status_code not in (408, 409, 429, 500, 502, 503, 504):
                    break
            if attempt + 1 < self.cfg.max_attempts:
                time.sleep(self.cfg.backoff_seconds * 2**attempt)
        raise ProviderError(f"provider failed after {self.cfg.max_attempts} attempts; last: {last}")


@dataclass(frozen=True)
class AugmentedMcq:
    """An MCQ plus generated reasoning for the key and feedback per distractor."""

    base: Mcq
    reasoning: str
    feedback: tuple[str, str, str]
    model: str
    cache_keys: tuple[str, str, str, str] = ("", "", "", "")
    created: str | None = None

    def __post_init__(self) -> None:
        object.__setattr__(self, "feedback", tuple(self.feedback))
        if not self.reasoning:
            raise ValueError(f"mcq {self.base.id!r}: reasoning must be non-empty")
        if len(self.feedback) != len(self.base.distractors):
            raise ValueError(
                f"mcq {self.base.id!r}: feedback arity {len(self.feedback)} "
                f"!= distractor arity {len(self.base.distractors)}"
            )
        if any(not f for f in self.feedback):
            raise ValueError(f"mcq {self.base.id!r}: feedback texts must be non-empty")


class ReasoningFeedbackGenerator:
    """Cached, replayable front end over the completion provider."""

    def __init__(
        self,
        cfg: GenerationConfig,
        cache: CompletionCache | None = None,
        *,
        template: PromptTemplate = DEFAULT_TEMPLATE,
        client=None,
        replay: dict[str, str] | None = None,
    ):
        self.cfg = cfg
        self.cache = cache if cache is not None else CompletionCache(None)
        self.template = template
        self.replay = replay
        self._client = client
        self._bucket = (
            _TokenBucket(cfg.requests_per_minute) if cfg.requests_per_minute else None
        )

    @property
    def client(self):
        if self._client is None:
            self._client = ChatCompletionClient(self.cfg)
        return self._client

    def _complete(self, stem: str, option: str, role: str) -> str:
        key = cache_key(self.template.version, self.cfg.model_name, stem, option, role)
        cached = self.cache.get(key)
        if cached is not None:
            return cached
        if self.replay is not None:
            text = self.replay.get(key)
            if text is None:
                raise ReplayMissError(f"no replay fixture for cache key {key}")
        else:
            if self._bucket is not None:
                self._bucket.wait()
            text = self.client.complete(render_prompt(self.template, stem, option, role))
            if not text:
                raise ProviderError("provider returned an empty completion")
        self.cache.put(key, text)
        return text

    def generate_reasoning(self, stem: str, key: str) -> str:
        if not stem or not key:
            raise ValueError("stem and key must be non-empty")
        return self._complete(stem, key, ROLE_REASONING)

    def generate_feedback(self, stem: str, distractor: str) -> str:
        if not stem or not distractor:
            raise ValueError("stem and distractor must be non-empty")
        return self._complete(stem, distractor, ROLE_FEEDBACK)

    def keys_for(self, mcq: Mcq) -> tuple[str, str, str, str]:
        return (
            cache_key(self.template.version, self.cfg.model_name, mcq.stem, mcq.key, ROLE_REASONING),
            *(
                cache_key(self.template.version, self.cfg.model_name, mcq.stem, d, ROLE_FEEDBACK)
                for d in mcq.distractors
            ),
        )

    def augment(self, mcq: Mcq) -> AugmentedMcq:
        reasoning = self.generate_reasoning(mcq.stem, mcq.key)
        feedback = tuple(self.generate_feedback(mcq.stem, d) for d in mcq.distractors)
        return AugmentedMcq(
            base=mcq,
            reasoning=reasoning,
            feedback=feedback,
            model=self.cfg.model_name,
            cache_keys=self.keys_for(mcq),
        )

    def augment_corpus(self, corpus: Corpus, max_workers: int = 1) -> list[AugmentedMcq]:
        """Augment every item; cached items cost no provider calls.

        On partial failure the completed items stay persisted in the cache and
        an :class:`AugmentationError` reports the failing ids.
        """
        results: dict[str, AugmentedMcq] = {}
        failures: dict[str, str] = {}

        def run_one(mcq: Mcq) -> None:
            try:
                results[mcq.id] = self.augment(mcq)
            except Exception as exc:  # noqa: BLE001 - reported per item
                failures[mcq.id] = f"{type(exc).__name__}: {exc}"

        if max_workers > 1:
            from concurrent.futures import ThreadPoolExecutor

            with ThreadPoolExecutor(max_workers=max_workers) as pool:
                list(pool.map(run_one, corpus.items))
        else:
            for mcq in corpus:
                run_one(mcq)

        if failures:
            failed = sorted(failures)
            logger.error("augmentation failed for %d items: %s", len(failed), failed[:10])
            raise AugmentationError(failed, failures)
        return [results[mcq.id] for mcq in corpus]


def write_augmented_jsonl(augmented: list[AugmentedMcq], path: str | Path) -> None:
    with Path(path).open("w", encoding="utf-8") as fh:
        for aug in augmented:
            fh.write(
                json.dumps(
                    {
                        "id": aug.base.id,
                        "reasoning": aug.reasoning,
                        "feedback": list(aug.feedback),
                        "model": aug.model,
                    },
                    ensure_ascii=False,
                )
                + "\n"
            )
