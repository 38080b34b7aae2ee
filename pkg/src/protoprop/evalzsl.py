"""Generalized zero-shot evaluation with a calibration bias on unseen classes."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .errors import ContractError

SENTINEL = 1e9
DEFAULT_STEPS = 201


@dataclass
class ScoreMatrix:
    scores: np.ndarray  # (N, |Y|)
    labels: np.ndarray  # (N,) composition indices
    unseen_mask: np.ndarray  # (|Y|,) bool

    def __post_init__(self):
        self.scores = np.asarray(self.scores, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        self.unseen_mask = np.asarray(self.unseen_mask, dtype=bool)
        if self.scores.ndim != 2 or self.scores.shape[1] != self.unseen_mask.size:
            raise ContractError(f"scores {self.scores.shape} do not match mask of {self.unseen_mask.size}")
        if len(self.labels) != len(self.scores):
            raise ContractError("one label per score row required")

    @property
    def seen_rows(self) -> np.ndarray:
        return ~self.unseen_mask[self.labels]


@dataclass
class EvalCurve:
    biases: np.ndarray
    acc_seen: np.ndarray
    acc_unseen: np.ndarray

    @property
    def points(self) -> list[tuple[float, float]]:
        return list(zip(self.acc_seen.tolist(), self.acc_unseen.tolist()))

    def __len__(self):
        return len(self.biases)


@dataclass
class EvalReport:
    auc: float
    best_harmonic: float
    best_seen: float  # components of the best harmonic mean
    best_unseen: float
    best_bias: float
    closed_seen: float
    closed_unseen: float
    curve: Optional[EvalCurve] = field(default=None, repr=False)

    def metrics(self) -> dict:
        d = asdict(self)
        d.pop("curve")
        return d


def biased_scores(sm: ScoreMatrix, b: float) -> np.ndarray:
    return sm.scores + b * sm.unseen_mask


def accuracy_pair(sm: ScoreMatrix, b: float) -> tuple[float, float]:
    """(Acc_s, Acc_u): top-1 accuracy over seen-labeled and unseen-labeled rows."""
    seen_rows = sm.seen_rows
    if not seen_rows.any() or seen_rows.all():
        raise ContractError("need both seen-labeled and unseen-labeled samples")
    correct = np.argmax(biased_scores(sm, b), axis=1) == sm.labels
    return float(correct[seen_rows].mean()), float(correct[~seen_rows].mean())


def default_grid(sm: ScoreMatrix, steps: int = DEFAULT_STEPS) -> np.ndarray:
    lo, hi = float(sm.scores.min()), float(sm.scores.max())
    span = hi - lo
    grid = np.linspace(-span, span, steps) if steps > 1 else np.zeros(1)
    return np.concatenate([[-SENTINEL], grid, [SENTINEL]])


def sweep(sm: ScoreMatrix, grid: Optional[Sequence[float]] = None, steps: int = DEFAULT_STEPS) -> EvalCurve:
    biases = np.sort(np.asarray(default_grid(sm, steps) if grid is None else grid, dtype=np.float64))
    if biases.size == 0:
        raise ContractError("bias grid is empty")
    pairs = np.array([accuracy_pair(sm, b) for b in biases])
    return EvalCurve(biases, pairs[:, 0], pairs[:, 1])


def auc(curve: EvalCurve) -> float:
    """Trapezoidal area under Acc_u as a function of Acc_s."""
    if len(curve) < 2:
        raise ContractError("AUC needs at least two curve points")
    best: dict[float, float] = {}
    for s, u in zip(curve.acc_seen.tolist(), curve.acc_unseen.tolist()):
        best[s] = max(u, best.get(s, -np.inf))
    xs = np.array(sorted(best))
    ys = np.array([best[x] for x in xs])
    if xs.size < 2:
        return 0.0
    return float(np.sum(np.diff(xs) * (ys[1:] + ys[:-1]) / 2.0))


def harmonic_mean(acc_s: float, acc_u: float) -> float:
    total = acc_s + acc_u
    return 0.0 if total == 0 else 2.0 * acc_s * acc_u / total


def report(sm: ScoreMatrix, grid: Optional[Sequence[float]] = None, steps: int = DEFAULT_STEPS) -> EvalReport:
    curve = sweep(sm, grid, steps)
    hms = np.array([harmonic_mean(s, u) for s, u in curve.points])
    i = int(np.argmax(hms))
    closed_seen = accuracy_pair(sm, -SENTINEL)[0]
    closed_unseen = accuracy_pair(sm, SENTINEL)[1]
    return EvalReport(
        auc=auc(curve),
        best_harmonic=float(hms[i]),
        best_seen=float(curve.acc_seen[i]),
        best_unseen=float(curve.acc_unseen[i]),
        best_bias=float(curve.biases[i]),
        closed_seen=closed_seen,
        closed_unseen=closed_unseen,
        curve=curve,
    )


def format_report(rep: EvalReport, prefix: str = "") -> str:
    """One ``name value`` line per metric."""
    return "".join(f"{prefix}{k} {v!r}\n" for k, v in rep.metrics().items())


def write_curve(curve: EvalCurve, path) -> None:
    lines = ["bias acc_seen acc_unseen"]
    lines += [f"{b!r} {s!r} {u!r}" for b, s, u in zip(curve.biases.tolist(), curve.acc_seen.tolist(), curve.acc_unseen.tolist())]
    Path(path).write_text("\n".join(lines) + "\n")


def read_curve(path) -> EvalCurve:
    rows = np.loadtxt(path, skiprows=1, ndmin=2)
    return EvalCurve(rows[:, 0], rows[:, 1], rows[:, 2])


def write_report(rep: EvalReport, path) -> None:
    Path(path).write_text(json.dumps(rep.metrics(), indent=2, sort_keys=True) + "\n")
