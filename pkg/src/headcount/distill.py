"""Uncertainty-gated knowledge distillation.

A batch is scored by how close the student's output distributions sit to
the class prior: per sample, the negative log of the mean squared deviation
between the predicted distribution and the prior; per batch, the mean of
the sample scores. When the batch score exceeds a threshold the teacher is
queried and a tempered-KL distillation loss replaces plain cross-entropy.
Query and wall-clock accounting lives in a ledger so gated runs can be
compared against standard training.
"""

from __future__ import annotations

import threading
import time
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .tensor import Tensor

SCORE_EPS = 1e-12
MAX_SCORE = -float(np.log(SCORE_EPS))  # ~27.631, the exact-prior clamp


def uniform_prior(n: int) -> np.ndarray:
    if n < 2:
        raise ValueError("need at least 2 classes")
    return np.full(n, 1.0 / n)


def _check_probs(arr, who):
    arr = np.asarray(arr, dtype=np.float64)
    if np.any(arr < 0) or np.any(np.abs(arr.sum(axis=-1) - 1.0) > 1e-6):
        raise ValueError(f"{who} is not a probability distribution")
    return arr


def sample_uncertainty(probs, prior=None) -> float:
    """Uncertainty of one prediction: -ln(mean squared deviation from prior).

    Identical-to-prior predictions hit the epsilon clamp at ~27.631; a
    one-hot prediction over 6 classes with a uniform prior scores ~1.9741.
    """
    y = _check_probs(probs, "probs")
    p = uniform_prior(y.shape[-1]) if prior is None else _check_probs(prior, "prior")
    msd = float(np.mean((y - p) ** 2))
    return float(-np.log(max(msd, SCORE_EPS)))


def batch_uncertainty(scores) -> float:
    scores = np.asarray(scores, dtype=np.float64)
    if scores.size == 0:
        raise ValueError("batch uncertainty of an empty batch")
    return float(scores.mean())


@dataclass(frozen=True)
class UncertaintyScore:
    """Per-sample scores plus their batch mean for one gated step."""

    s_sample: tuple[float, ...]
    s_batch: float
    n: int
    prior: tuple[float, ...]


def score_batch(probs: np.ndarray, prior=None) -> UncertaintyScore:
    """Score a [B, n] batch of predicted distributions."""
    y = _check_probs(probs, "probs")
    if y.ndim != 2:
        raise ValueError(f"expected [B, n] probabilities, got shape {y.shape}")
    n = y.shape[1]
    p = uniform_prior(n) if prior is None else _check_probs(prior, "prior")
    msd = np.mean((y - p[None, :]) ** 2, axis=1)
    scores = -np.log(np.maximum(msd, SCORE_EPS))
    return UncertaintyScore(tuple(float(s) for s in scores),
                            batch_uncertainty(scores), n, tuple(float(v) for v in p))


def gate_decision(s_batch: float, tau: float) -> bool:
    """Query the teacher iff the batch is more uncertain than the threshold."""
    return s_batch > tau


@dataclass(frozen=True)
class KdConfig:
    """Gate threshold plus the distillation loss hyperparameters."""

    tau: float
    temperature: float = 4.0
    alpha: float = 0.5
    epsilon: float = SCORE_EPS

    def __post_init__(self):
        if self.temperature <= 0:
            raise ValueError("temperature must be positive")
        if not 0.0 <= self.alpha <= 1.0:
            raise ValueError("alpha must lie in [0, 1]")


def kd_loss(student_logits: Tensor, teacher_logits, labels, cfg: KdConfig) -> Tensor:
    """(1 - alpha) * CE(labels, student) + alpha * T^2 * KL(teacher_T || student_T).

    Teacher logits are treated as constants; both distributions are softened
    by the temperature before the KL term.
    """
    t_arr = teacher_logits.data if isinstance(teacher_logits, Tensor) else np.asarray(
        teacher_logits)
    if t_arr.shape != student_logits.data.shape:
        raise ValueError(f"teacher logits shape {t_arr.shape} does not match "
                         f"student {student_logits.data.shape}")
    temp = cfg.temperature
    ce = T.softmax_cross_entropy(student_logits, labels)
    t_soft = Tensor(T._softmax(t_arr / temp))
    s_soft = T.softmax(T.scale(student_logits, 1.0 / temp))
    kl = T.kl_divergence(t_soft, s_soft)
    return T.add(T.scale(ce, 1.0 - cfg.alpha), T.scale(kl, cfg.alpha * temp * temp))


class TeacherHandle:
    """Serialized query access to a trained teacher, with query accounting."""

    def __init__(self, model, cost_estimate=None):
        self._model = model
        self._lock = threading.Lock()
        self.queries = 0
        self.cost_estimate = cost_estimate
        self.query_seconds = 0.0

    def query(self, x: np.ndarray) -> np.ndarray:
        """Teacher logits for one batch; each call counts as one query."""
        with self._lock:
            t0 = time.perf_counter()
            logits = self._model.forward_array(x)
            self.query_seconds += time.perf_counter() - t0
            self.queries += 1
            return logits


@dataclass
class QueryLedger:
    """Per-batch gate outcomes, scores, and wall-clock, for one training run."""

    s_batch: list[float] = field(default_factory=list)
    queried: list[bool] = field(default_factory=list)
    step_seconds: list[float] = field(default_factory=list)

    def record(self, s_batch: float, queried: bool, seconds: float):
        self.s_batch.append(float(s_batch))
        self.queried.append(bool(queried))
        self.step_seconds.append(float(seconds))

    @property
    def total_batches(self) -> int:
        return len(self.queried)

    @property
    def queried_batches(self) -> int:
        return sum(self.queried)

    @property
    def query_ratio(self) -> float:
        if self.total_batches == 0:
            raise ValueError("ledger is empty")
        return self.queried_batches / self.total_batches

    @property
    def total_seconds(self) -> float:
        return sum(self.step_seconds)

    @property
    def gated_seconds(self) -> float:
        return sum(s for s, q in zip(self.step_seconds, self.queried) if q)

    @property
    def ungated_seconds(self) -> float:
        return sum(s for s, q in zip(self.step_seconds, self.queried) if not q)


def replay_query_ratio(s_batch_values, tau: float) -> float:
    """Query ratio a threshold would have produced on a recorded score run."""
    vals = list(s_batch_values)
    if not vals:
        raise ValueError("no recorded batch scores")
    return sum(1 for s in vals if gate_decision(s, tau)) / len(vals)


@dataclass(frozen=True)
class LedgerReport:
    total_batches: int
    queried_batches: int
    query_ratio: float
    total_seconds: float
    gated_seconds: float
    ungated_seconds: float
    reference_seconds: float | None
    wall_clock_ratio: float | None


def ledger_report(ledger: QueryLedger, reference_seconds: float | None = None) -> LedgerReport:
    """Summarize a run; wall-clock ratio is measured against a standard run.

    If no reference time is supplied, standard-training time is estimated as
    the mean un-queried step time scaled to the full step count.
    """
    if ledger.total_batches < 1:
        raise ValueError("ledger is empty")
    ref = reference_seconds
    if ref is None:
        unqueried = ledger.total_batches - ledger.queried_batches
        if unqueried > 0:
            ref = ledger.ungated_seconds / unqueried * ledger.total_batches
    ratio = (ledger.total_seconds / ref) if ref else None
    return LedgerReport(
        total_batches=ledger.total_batches,
        queried_batches=ledger.queried_batches,
        query_ratio=ledger.query_ratio,
        total_seconds=ledger.total_seconds,
        gated_seconds=ledger.gated_seconds,
        ungated_seconds=ledger.ungated_seconds,
        reference_seconds=ref,
        wall_clock_ratio=ratio,
    )


def format_ledger_report(report: LedgerReport) -> str:
    lines = [
        "teacher query ledger",
        f"  batches total    : {report.total_batches}",
        f"  batches queried  : {report.queried_batches}",
        f"  query ratio      : {report.query_ratio:.4f}",
        f"  wall clock total : {report.total_seconds:.2f} s "
        f"(gated {report.gated_seconds:.2f} s, standard {report.ungated_seconds:.2f} s)",
    ]
    if report.reference_seconds is not None:
        lines.append(f"  standard ref     : {report.reference_seconds:.2f} s")
    if report.wall_clock_ratio is not None:
        lines.append(f"  wall clock ratio : {report.wall_clock_ratio:.2f}x")
    return "\n".join(lines) + "\n"
