"""Detection quality metrics and report assembly.

AUROC is the probability that a random in-distribution score exceeds a
random out-of-distribution score, ties counted half (the rank-sum
formulation, computed by sorting rather than pair enumeration).
TNR@TPR fixes the threshold so a target fraction of in-distribution samples
is kept, then reports the fraction of out samples rejected.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np

from .trajectory import threshold_at_tpr

ORIENTATION = "higher score means more in-distribution"


def _finite_scores(scores, name: str) -> np.ndarray:
    s = np.asarray(scores, dtype=np.float64)
    if s.size == 0:
        raise ValueError(f"{name} must be nonempty")
    if not np.isfinite(s).all():
        raise ValueError(f"{name} must be finite")
    return s


def _average_ranks(values: np.ndarray) -> np.ndarray:
    order = np.argsort(values, kind="stable")
    ranks = np.empty(values.shape[0])
    ranks[order] = np.arange(1, values.shape[0] + 1)
    _, inverse, counts = np.unique(values, return_inverse=True, return_counts=True)
    sums = np.bincount(inverse, weights=ranks)
    return (sums / counts)[inverse]


def auroc(in_scores, out_scores) -> float:
    x = _finite_scores(in_scores, "in_scores")
    y = _finite_scores(out_scores, "out_scores")
    ranks = _average_ranks(np.concatenate([x, y]))
    u = ranks[: x.size].sum() - x.size * (x.size + 1) / 2.0
    return float(u / (x.size * y.size))


def tnr_at_tpr(in_scores, out_scores, tpr: float = 0.95) -> tuple[float, float]:
    """Returns (tnr, gamma).  OOD is detected by score <= gamma, so the
    achieved TPR may slightly exceed the nominal target on discrete data."""
    x = _finite_scores(in_scores, "in_scores")
    y = _finite_scores(out_scores, "out_scores")
    gamma = threshold_at_tpr(x, tpr)
    tnr = float(np.mean(y <= gamma))
    return tnr, gamma


def _sig6(x: float) -> float:
    return float(f"{x:.6g}")


@dataclass(frozen=True)
class DatasetResult:
    dataset: str
    n_in: int
    n_out: int
    auroc: float
    tnr_at_95_tpr: float
    gamma: float

    def record(self, method: str) -> dict:
        # gamma can be -inf (no finite threshold); JSON carries null there.
        return {
            "method": method,
            "dataset": self.dataset,
            "auroc": _sig6(self.auroc),
            "tnr_at_95_tpr": _sig6(self.tnr_at_95_tpr),
            "gamma": _sig6(self.gamma) if math.isfinite(self.gamma) else None,
            "n_in": self.n_in,
            "n_out": self.n_out,
        }


@dataclass
class DetectionReport:
    method: str
    orientation: str = ORIENTATION
    results: list[DatasetResult] = field(default_factory=list)

    def add(self, dataset: str, in_scores, out_scores, tpr: float = 0.95) -> DatasetResult:
        x = _finite_scores(in_scores, "in_scores")
        y = _finite_scores(out_scores, "out_scores")
        tnr, gamma = tnr_at_tpr(x, y, tpr)
        res = DatasetResult(
            dataset=dataset,
            n_in=int(x.size),
            n_out=int(y.size),
            auroc=auroc(x, y),
            tnr_at_95_tpr=tnr,
            gamma=gamma,
        )
        self.results.append(res)
        return res

    def to_json(self) -> str:
        obj = {
            "method": self.method,
            "orientation": self.orientation,
            "results": [r.record(self.method) for r in self.results],
        }
        return json.dumps(obj, indent=2) + "\n"

    def to_text(self) -> str:
        header = ["method", "dataset", "n_in", "n_out", "auroc", "tnr_at_95_tpr", "gamma"]
        rows = [header]
        for r in self.results:
            rec = r.record(self.method)
            rows.append(
                [
                    rec["method"],
                    rec["dataset"],
                    str(rec["n_in"]),
                    str(rec["n_out"]),
                    f"{rec['auroc']:.6g}",
                    f"{rec['tnr_at_95_tpr']:.6g}",
                    "-inf" if rec["gamma"] is None else f"{rec['gamma']:.6g}",
                ]
            )
        widths = [max(len(row[i]) for row in rows) for i in range(len(header))]
        lines = [
            "  ".join(cell.ljust(w) for cell, w in zip(row, widths)).rstrip()
            for row in rows
        ]
        return "\n".join(lines) + "\n"
