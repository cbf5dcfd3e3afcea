"""Logistic response models and ground-truth difficulty calibration.

2PL:  P(correct | theta) = sigmoid(a * (theta - b))
3PL:  P(correct | theta) = c + (1 - c) * sigmoid(a * (theta - b))

Calibration maximizes the joint log-likelihood of item parameters and student
abilities, penalized by a standard-normal term on abilities (which pins the
location/scale of the latent trait).  The recovered ``b`` values are the
ground-truth difficulties used downstream.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from mcqdiff.corpus import ResponseRecord

logger = logging.getLogger(__name__)

MAX_GUESSING = 0.35
B_CLAMP = 4.0


class CalibrationError(RuntimeError):
    """Calibration could not satisfy its preconditions or converge."""


@dataclass(frozen=True)
class ItemParams:
    """Discrimination / difficulty / guessing parameters for one item."""

    model: str
    a: float
    b: float
    c: float = 0.0

    def __post_init__(self) -> None:
        if self.model not in ("2PL", "3PL"):
            raise ValueError(f"unknown model {self.model!r}")
        if not self.a > 0:
            raise ValueError(f"discrimination must be positive, got {self.a}")
        if not np.isfinite(self.b):
            raise ValueError("difficulty must be finite")
        if self.model == "2PL" and self.c != 0.0:
            raise ValueError("2PL items have no guessing parameter")
        if not 0.0 <= self.c <= MAX_GUESSING:
            raise ValueError(f"guessing must lie in [0, {MAX_GUESSING}], got {self.c}")


def _sigmoid(z: np.ndarray | float) -> np.ndarray | float:
    return 1.0 / (1.0 + np.exp(-np.clip(z, -500.0, 500.0)))


def prob_correct(theta: float, params: ItemParams) -> float:
    """Probability of a correct response; strictly increasing in theta."""
    s = _sigmoid(params.a * (theta - params.b))
    return float(params.c + (1.0 - params.c) * s)


@dataclass(frozen=True)
class KnowledgeMatrix:
    """M x d sampled student knowledge levels, fixed for an entire run."""

    values: np.ndarray
    seed: int

    def __post_init__(self) -> None:
        vals = np.asarray(self.values, dtype=np.float64)
        if vals.ndim != 2:
            raise ValueError("knowledge matrix must be 2-dimensional")
        if not np.isfinite(vals).all():
            raise ValueError("knowledge matrix entries must be finite")
        vals.setflags(write=False)
        object.__setattr__(self, "values", vals)

    @property
    def m(self) -> int:
        return self.values.shape[0]

    @property
    def d(self) -> int:
        return self.values.shape[1]


def sample_knowledge(m: int = 1000, d: int = 2, seed: int = 0) -> KnowledgeMatrix:
    """Draw M i.i.d. d-dimensional standard-normal knowledge levels."""
    if m < 1 or d < 1:
        raise ValueError("m and d must be positive")
    values = np.random.default_rng(seed).standard_normal((m, d))
    return KnowledgeMatrix(values=values, seed=seed)


@dataclass
class SyntheticCohort:
    """Simulated students, their true item parameters, and their responses."""

    abilities: np.ndarray
    true_params: list[ItemParams]
    item_ids: list[str]
    responses: list[ResponseRecord] = field(repr=False)


def simulate_responses(
    params: list[ItemParams],
    cohort_size: int,
    distractor_profile: np.ndarray,
    seed: int,
    abilities: np.ndarray | None = None,
    item_ids: list[str] | None = None,
) -> SyntheticCohort:
    """Simulate every student answering every item.

    Correctness is drawn from the response model; an incorrect response picks
    a distractor from that item's row of ``distractor_profile``.
    """
    n_items = len(params)
    profile = np.asarray(distractor_profile, dtype=np.float64)
    if profile.shape != (n_items, 3):
        raise ValueError(f"distractor_profile must have shape ({n_items}, 3)")
    if np.any(profile < 0) or not np.allclose(profile.sum(axis=1), 1.0, atol=1e-9):
        raise ValueError("distractor_profile rows must be non-negative and sum to 1")

    rng = np.random.default_rng(seed)
    if abilities is None:
        abilities = rng.standard_normal(cohort_size)
    else:
        abilities = np.asarray(abilities, dtype=np.float64)
        if abilities.shape != (cohort_size,):
            raise ValueError("abilities must have shape (cohort_size,)")
    if item_ids is None:
        item_ids = [f"q{i:04d}" for i in range(n_items)]

    a = np.array([p.a for p in params])
    b = np.array([p.b for p in params])
    c = np.array([p.c for p in params])
    p_correct = c + (1.0 - c) * _sigmoid(a * (abilities[:, None] - b[None, :]))
    correct = rng.random((cohort_size, n_items)) < p_correct
    # Cumulative-probability inverse draw of the distractor index, per item.
    cum = np.cumsum(profile, axis=1)
    u = rng.random((cohort_size, n_items))
    distractor_idx = (u[:, :, None] > cum[None, :, :-1]).sum(axis=2) + 1

    selected = np.where(correct, 0, distractor_idx)
    records = [
        ResponseRecord(student_id=f"s{j:05d}", mcq_id=item_ids[i], selected=int(selected[j, i]))
        for j in range(cohort_size)
        for i in range(n_items)
    ]
    return SyntheticCohort(
        abilities=abilities, true_params=list(params), item_ids=list(item_ids), responses=records
    )


@dataclass
class CalibrationData:
    """Responses in triplet form over contiguous student/item indices."""

    student_ids: list[str]
    item_ids: list[str]
    s_idx: np.ndarray
    i_idx: np.ndarray
    y: np.ndarray

    @property
    def n_students(self) -> int:
        return len(self.student_ids)

    @property
    def n_items(self) -> int:
        return len(self.item_ids)


def _build_data(records: list[ResponseRecord]) -> CalibrationData:
    student_ids = sorted({r.student_id for r in records})
    item_ids = sorted({r.mcq_id for r in records})
    s_map = {s: k for k, s in enumerate(student_ids)}
    i_map = {i: k for k, i in enumerate(item_ids)}
    s_idx = np.fromiter((s_map[r.student_id] for r in records), dtype=np.int64, count=len(records))
    i_idx = np.fromiter((i_map[r.mcq_id] for r in records), dtype=np.int64, count=len(records))
    y = np.fromiter((1.0 if r.selected == 0 else 0.0 for r in records), dtype=np.float64, count=len(records))
    return CalibrationData(student_ids, item_ids, s_idx, i_idx, y)


class CalibrationProblem:
    """Penalized joint log-likelihood and its analytic gradient.

    Raw parameter vector layout: [theta (S), log_a (I), b (I), gamma (I if 3PL)]
    with a = exp(log_a) and c = MAX_GUESSING * sigmoid(gamma).
    """

    def __init__(self, data: CalibrationData, model: str):
        if model not in ("2PL", "3PL"):
            raise ValueError(f"unknown model {model!r}")
        self.data = data
        self.model = model
        self.n_params = data.n_students + data.n_items * (3 if model == "3PL" else 2)

    def unpack(self, vec: np.ndarray):
        s, i = self.data.n_students, self.data.n_items
        theta = vec[:s]
        log_a = vec[s : s + i]
        b = vec[s + i : s + 2 * i]
        gamma = vec[s + 2 * i :] if self.model == "3PL" else None
        return theta, log_a, b, gamma

    def initial(self) -> np.ndarray:
        vec = np.zeros(self.n_params)
        if self.model == "3PL":
            theta_len = self.data.n_students + 2 * self.data.n_items
            vec[theta_len:] = -2.0  # start guessing near 0.04
        return vec

    def value(self, vec: np.ndarray) -> float:
        return self.value_and_grad(vec)[0]

    def value_and_grad(self, vec: np.ndarray) -> tuple[float, np.ndarray]:
        d = self.data
        theta, log_a, b, gamma = self.unpack(vec)
        a = np.exp(log_a)
        c = MAX_GUESSING * _sigmoid(gamma) if gamma is not None else np.zeros_like(b)

        th = theta[d.s_idx]
        ai = a[d.i_idx]
        bi = b[d.i_idx]
        ci = c[d.i_idx]
        z = ai * (th - bi)
        s = _sigmoid(z)
        p = np.clip(ci + (1.0 - ci) * s, 1e-12, 1.0 - 1e-12)

        value = float(np.sum(d.y * np.log(p) + (1.0 - d.y) * np.log(1.0 - p)))
        value -= 0.5 * float(np.sum(theta**2))

        g_p = (d.y - p) / (p * (1.0 - p))
        dp_dz = (1.0 - ci) * s * (1.0 - s)
        common = g_p * dp_dz

        grad = np.empty_like(vec)
        ns, ni = d.n_students, d.n_items
        grad[:ns] = np.bincount(d.s_idx, weights=common * ai, minlength=ns) - theta
        grad[ns : ns + ni] = np.bincount(d.i_idx, weights=common * z, minlength=ni)
        grad[ns + ni : ns + 2 * ni] = np.bincount(d.i_idx, weights=-common * ai, minlength=ni)
        if gamma is not None:
            dc = np.bincount(d.i_idx, weights=g_p * (1.0 - s), minlength=ni)
            sig_g = _sigmoid(gamma)
            grad[ns + 2 * ni :] = dc * MAX_GUESSING * sig_g * (1.0 - sig_g)
        return value, grad


@dataclass
class CalibrationResult:
    item_params: dict[str, ItemParams]
    abilities: dict[str, float]
    converged: bool
    n_iterations: int
    final_loglik: float
    clamped_ids: list[str] = field(default_factory=list)


def calibrate(
    records: list[ResponseRecord],
    model: str = "2PL",
    *,
    min_item_responses: int = 20,
    max_iter: int = 2000,
    tol: float = 1e-6,
    patience: int = 5,
    learning_rate: float = 0.1,
) -> CalibrationResult:
    """Jointly estimate item parameters and student abilities by penalized ML.

    Gradient ascent (adaptive moments) on the penalized joint log-likelihood;
    converged when the improvement stays below ``tol`` for ``patience``
    consecutive iterations.  Items answered all-correct or all-wrong get
    ``b`` clamped to -+4 with a warning instead of diverging.

    Abilities are standardized (mean 0, sd 1) after every step, with the
    compensating rescale of (a, b) that leaves every response probability
    unchanged.  This closes the scale-flat direction of the joint likelihood;
    on the constraint surface the ability penalty is constant, so the ascent
    maximizes the penalized objective subject to standardization.
    """
    if not records:
        raise CalibrationError("no responses to calibrate on")
    data = _build_data(records)

    counts = np.bincount(data.i_idx, minlength=data.n_items)
    thin = [data.item_ids[i] for i in np.nonzero(counts < min_item_responses)[0]]
    if thin:
        raise CalibrationError(
            f"items below the {min_item_responses}-response floor: {thin[:10]}"
        )

    # Degenerate items cannot be estimated; clamp and drop their responses.
    correct_counts = np.bincount(data.i_idx, weights=data.y, minlength=data.n_items)
    degenerate = (correct_counts == 0) | (correct_counts == counts)
    clamped: dict[str, ItemParams] = {}
    for i in np.nonzero(degenerate)[0]:
        b_val = -B_CLAMP if correct_counts[i] > 0 else B_CLAMP
        clamped[data.item_ids[i]] = ItemParams(model=model, a=1.0, b=b_val, c=0.0)
        logger.warning(
            "item %s answered %s; clamping b to %+.1f",
            data.item_ids[i],
            "all-correct" if correct_counts[i] > 0 else "all-wrong",
            b_val,
        )
    if clamped:
        keep = ~degenerate[data.i_idx]
        kept_positions = np.nonzero(~degenerate)[0]
        old_to_new = np.full(data.n_items, -1, dtype=np.int64)
        old_to_new[kept_positions] = np.arange(len(kept_positions))
        data = CalibrationData(
            student_ids=data.student_ids,
            item_ids=[data.item_ids[i] for i in kept_positions],
            s_idx=data.s_idx[keep],
            i_idx=old_to_new[data.i_idx[keep]],
            y=data.y[keep],
        )
        if data.n_items == 0:
            raise CalibrationError("every item is degenerate; nothing to calibrate")

    problem = CalibrationProblem(data, model)
    vec = problem.initial()
    ns, ni = data.n_students, data.n_items

    def standardize(vec: np.ndarray) -> np.ndarray:
        theta = vec[:ns]
        mu, sd = theta.mean(), theta.std()
        if sd < 1e-8:
            sd = 1.0
        vec = vec.copy()
        vec[:ns] = (theta - mu) / sd
        vec[ns : ns + ni] += np.log(sd)  # log_a
        vec[ns + ni : ns + 2 * ni] = (vec[ns + ni : ns + 2 * ni] - mu) / sd  # b
        return vec

    # Adam ascent with a mild 1/sqrt decay so late iterations settle.
    m = np.zeros_like(vec)
    v = np.zeros_like(vec)
    beta1, beta2, eps = 0.9, 0.999, 1e-8
    prev = -np.inf
    flat = 0
    converged = False
    it = 0
    value = -np.inf
    for it in range(1, max_iter + 1):
        value, grad = problem.value_and_grad(vec)
        m = beta1 * m + (1 - beta1) * grad
        v = beta2 * v + (1 - beta2) * grad**2
        m_hat = m / (1 - beta1**it)
        v_hat = v / (1 - beta2**it)
        lr = learning_rate / np.sqrt(1.0 + it / 100.0)
        vec = standardize(vec + lr * m_hat / (np.sqrt(v_hat) + eps))
        if value - prev < tol:
            flat += 1
            if flat >= patience:
                converged = True
                break
        else:
            flat = 0
        prev = value
    if not converged:
        raise CalibrationError(
            f"no convergence after {max_iter} iterations "
            f"(last loglik {value:.6f}, last improvement {value - prev:.3g})"
        )

    theta, log_a, b, gamma = problem.unpack(vec)
    a = np.exp(log_a)
    c = MAX_GUESSING * _sigmoid(gamma) if gamma is not None else np.zeros_like(b)
    item_params = dict(clamped)
    for k, item_id in enumerate(data.item_ids):
        b_k = float(b[k])
        if abs(b_k) > B_CLAMP:
            logger.warning("item %s: b=%.3f clamped to %+.1f", item_id, b_k, np.sign(b_k) * B_CLAMP)
            b_k = float(np.sign(b_k) * B_CLAMP)
        c_k = float(np.clip(c[k], 0.0, MAX_GUESSING)) if model == "3PL" else 0.0
        item_params[item_id] = ItemParams(model=model, a=float(a[k]), b=b_k, c=c_k)
    item_params = {key: item_params[key] for key in sorted(item_params)}
    abilities = {sid: float(theta[k]) for k, sid in enumerate(data.student_ids)}
    return CalibrationResult(
        item_params=item_params,
        abilities=abilities,
        converged=converged,
        n_iterations=it,
        final_loglik=value,
        clamped_ids=sorted(clamped),
    )


def write_calibration_csv(result: CalibrationResult, path, response_counts: dict[str, int] | None = None) -> None:
    import csv
    from pathlib import Path

    with Path(path).open("w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["item_id", "a", "b", "c", "responses"])
        for item_id, p in result.item_params.items():
            n = response_counts.get(item_id, "") if response_counts else ""
            writer.writerow([item_id, repr(p.a), repr(p.b), repr(p.c), n])


def write_abilities_csv(result: CalibrationResult, path) -> None:
    import csv
    from pathlib import Path

    with Path(path).open("w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["student_id", "theta"])
        for sid, th in sorted(result.abilities.items()):
            writer.writerow([sid, repr(th)])
