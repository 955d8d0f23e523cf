"""Quantitative evaluation of a trained model.

Prediction MSE, oracle-scored control batteries, a histogram estimate of
normalized mutual information between bridge variables and properties, and
pair-level scoring of the learned mask.
"""

from __future__ import annotations

import csv
import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .config import GenConfig
from .datagen import Dataset, truth_pairs
from .maskpool import aggregate, correlation_pairs
from .moo import Constraint, ConstraintSpec, generate_many
from .numcore import Rng

log = logging.getLogger(__name__)


# -- prediction ---------------------------------------------------------------
def prediction_mse(model, test: Dataset) -> np.ndarray:
    """Per-property MSE of f(h(mu_w(x) * M)) against the true properties."""
    if len(test) == 0:
        raise ValueError("empty test set")
    pred = model.predict_from_images(test.flat_images())
    return ((pred - test.properties) ** 2).mean(axis=0)


def bridge_values(model, test: Dataset) -> np.ndarray:
    """w' = h(mu_w(x) * M) under the hard mask."""
    qw, _ = model.encode(test.flat_images())
    return aggregate(qw.mu.data, model.hard_mask(), model.aggregator).data


# -- control batteries --------------------------------------------------------
def value_battery(test: Dataset, n: int, rng: Rng) -> list[ConstraintSpec]:
    """Full-value specs copied from held-out property vectors, hence attainable."""
    if n > len(test):
        raise ValueError(f"battery of {n} needs at least {n} test samples")
    rows = rng.permutation(len(test))[:n]
    return [ConstraintSpec.values(test.property_names, test.properties[i]) for i in rows]


def range_battery(names: Sequence[str], n: int, rng: Rng, width: float = 0.1,
                  lo: float = 0.15, hi: float = 0.75) -> list[ConstraintSpec]:
    """Range constraints of the given width on x and y; other properties free."""
    starts = rng.uniform((n, 2), lo, hi)
    return [ConstraintSpec.build(names, x=Constraint.range(a, a + width),
                                 y=Constraint.range(b, b + width)) for a, b in starts]


@dataclass
class ControlResult:
    mse: np.ndarray                 # per property, blank images included
    unmeasurable: int               # decoded images empty after thresholding
    requested: np.ndarray
    measured: np.ndarray

    @property
    def n(self) -> int:
        return len(self.requested)


def control_mse(model, specs: Sequence[ConstraintSpec], rng: Rng,
                opts: GenConfig | None = None) -> ControlResult:
    """Generate one image per all-value spec and score it with the oracle.

    An image that is empty after the 0.5 threshold holds no object; it is
    scored as size 0 at the canvas centre and counted in ``unmeasurable``.
    """
    if not all(s.all_values for s in specs):
        raise ValueError("control battery must hold full-value specs")
    try:
        _, reports = generate_many(model, specs, rng, opts)
    except Exception as exc:
        raise RuntimeError(f"generation failed for the control battery: {exc}") from exc
    requested = np.array([[c.target for c in s.entries] for s in specs])
    measured = np.array([r.achieved_oracle for r in reports])
    blank = np.isnan(measured).any(axis=1)
    measured[blank] = blank_measurement(list(specs[0].names))
    mse = ((measured - requested) ** 2).mean(axis=0)
    return ControlResult(mse, int(blank.sum()), requested, measured)


def blank_measurement(names: Sequence[str]) -> np.ndarray:
    """Score for an image with no object: zero size, centred, square flag 0."""
    lookup = {"size": 0.0, "x": 0.5, "y": 0.5, "x+y": 0.5, "shape": 0.0}
    return np.array([lookup[n] for n in names])


def oracle_slack(N: int) -> float:
    """Half a pixel in [0, 1] coordinates: the oracle's position resolution."""
    return 0.5 / N


def range_satisfaction(model, specs: Sequence[ConstraintSpec], rng: Rng, N: int,
                       opts: GenConfig | None = None) -> tuple[float, np.ndarray]:
    """Fraction of generated images whose oracle measurement meets every
    range constraint up to ``oracle_slack(N)``; empty images fail."""
    _, reports = generate_many(model, specs, rng, opts)
    slack = oracle_slack(N)
    hits = []
    for spec, rep in zip(specs, reports):
        v = rep.violation_oracle
        ranged = np.array([c.kind == "range" for c in spec.entries])
        hits.append(bool(np.all(np.isfinite(v[ranged])) and np.all(v[ranged] <= slack)))
    hits = np.array(hits)
    return float(hits.mean()), hits


# -- mutual information -------------------------------------------------------
def _entropy(counts: np.ndarray) -> float:
    p = counts[counts > 0] / counts.sum()
    return float(-(p * np.log(p)).sum())


def _bin(v: np.ndarray, bins: int) -> np.ndarray | None:
    lo, hi = v.min(), v.max()
    if hi - lo <= 0:
        return None
    return np.minimum(((v - lo) / (hi - lo) * bins).astype(int), bins - 1)


def normalized_mi(a: np.ndarray, b: np.ndarray, bins: int = 16) -> float:
    """MI of equal-width histograms divided by min(H(a), H(b)); 0 if either is constant."""
    ia, ib = _bin(np.asarray(a, float), bins), _bin(np.asarray(b, float), bins)
    if ia is None or ib is None:
        log.warning("constant variable in mutual information estimate; entry set to 0")
        return 0.0
    joint = np.zeros((bins, bins))
    np.add.at(joint, (ia, ib), 1.0)
    ha, hb = _entropy(joint.sum(axis=1)), _entropy(joint.sum(axis=0))
    mi = ha + hb - _entropy(joint.ravel())
    denom = min(ha, hb)
    return float(np.clip(mi / denom, 0.0, 1.0)) if denom > 0 else 0.0


def mi_matrix(wp: np.ndarray, y: np.ndarray, bins: int = 16) -> np.ndarray:
    """Entry [j, i] = normalized MI between bridge coordinate j and property i."""
    wp, y = np.asarray(wp, float), np.asarray(y, float)
    if len(wp) != len(y):
        raise ValueError("w' and y must be paired")
    if len(wp) < 1000:
        raise ValueError("need at least 1000 paired samples")
    if bins < 8:
        raise ValueError("need at least 8 bins")
    return np.array([[normalized_mi(wp[:, j], y[:, i], bins) for i in range(y.shape[1])]
                     for j in range(wp.shape[1])])


def property_target(y: np.ndarray, names: Sequence[str], bins: int = 16) -> np.ndarray:
    """Identity plus, for every truly correlated property pair, the normalized
    MI the two properties share; the score a perfect bridge (w' = y) attains."""
    m = len(names)
    T = np.eye(m)
    for i, j in truth_pairs(names):
        T[i, j] = T[j, i] = normalized_mi(y[:, i], y[:, j], bins)
    return T


def avg_mi(wp: np.ndarray, y: np.ndarray, target: np.ndarray, bins: int = 16) -> float:
    """Squared Frobenius distance between the normalized MI matrix and ``target``."""
    M = mi_matrix(wp, y, bins)
    if M.shape != np.shape(target):
        raise ValueError(f"target shape {np.shape(target)} does not match {M.shape}")
    return float(((M - target) ** 2).sum())


# -- mask scoring ---------------------------------------------------------------
@dataclass
class MaskScore:
    precision: float
    recall: float
    recovered: list[tuple[str, str]]
    expected: list[tuple[str, str]]


def mask_recovery(mask_hard, names: Sequence[str]) -> MaskScore:
    """Pair-level comparison with the construction's correlated pairs.
    An empty recovered set has precision 1 by convention."""
    got = correlation_pairs(mask_hard)
    truth = truth_pairs(names)
    hit = len(got & truth)
    precision = hit / len(got) if got else 1.0
    recall = hit / len(truth) if truth else 1.0
    label = lambda pairs: sorted((names[i], names[j]) for i, j in pairs)
    return MaskScore(precision, recall, label(got), label(truth))


# -- report -------------------------------------------------------------------
@dataclass
class EvalReport:
    property_names: list[str]
    prediction_mse: list[float]
    control_mse: list[float]
    control_unmeasurable: int
    control_n: int
    range_satisfaction: float
    range_n: int
    avg_mi: float
    mi_matrix: list[list[float]]
    mi_target: list[list[float]]
    mask_precision: float
    mask_recall: float
    recovered_pairs: list[tuple[str, str]]
    expected_pairs: list[tuple[str, str]]
    extra: dict = field(default_factory=dict)

    def to_json(self) -> dict:
        return asdict(self)

    def write(self, out_dir: str | Path) -> dict[str, Path]:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        paths = {"json": out / "eval.json", "csv": out / "eval.csv", "mi": out / "mi_matrix.csv"}
        paths["json"].write_text(json.dumps(self.to_json(), indent=2, sort_keys=True) + "\n")
        with open(paths["csv"], "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["metric", "property", "value"])
            for n, a, b in zip(self.property_names, self.prediction_mse, self.control_mse):
                w.writerow(["prediction_mse", n, repr(a)])
                w.writerow(["control_mse", n, repr(b)])
            for key in ("control_unmeasurable", "range_satisfaction", "avg_mi",
                        "mask_precision", "mask_recall"):
                w.writerow([key, "", repr(getattr(self, key))])
        with open(paths["mi"], "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["bridge", *self.property_names])
            for n, row in zip(self.property_names, self.mi_matrix):
                w.writerow([f"w'_{n}", *(repr(v) for v in row)])
        return paths


def evaluate(model, test: Dataset, rng: Rng, opts: GenConfig | None = None,
             n_control: int = 25, n_range: int = 10, range_batch: int = 8,
             bins: int = 16) -> EvalReport:
    """Full battery on a held-out set; every random choice derives from ``rng``."""
    names = list(model.property_names)
    pred = prediction_mse(model, test)
    ctrl = control_mse(model, value_battery(test, n_control, rng.child(0)), rng.child(1), opts)
    specs = [s for s in range_battery(names, n_range, rng.child(2)) for _ in range(range_batch)]
    frac, _ = range_satisfaction(model, specs, rng.child(3), test.N, opts)
    wp = bridge_values(model, test)
    target = property_target(test.properties, names, bins)
    M = mi_matrix(wp, test.properties, bins)
    score = mask_recovery(model.hard_mask(), names)
    return EvalReport(
        property_names=names,
        prediction_mse=[float(v) for v in pred],
        control_mse=[float(v) for v in ctrl.mse],
        control_unmeasurable=ctrl.unmeasurable, control_n=ctrl.n,
        range_satisfaction=frac, range_n=len(specs),
        avg_mi=float(((M - target) ** 2).sum()),
        mi_matrix=M.tolist(), mi_target=target.tolist(),
        mask_precision=score.precision, mask_recall=score.recall,
        recovered_pairs=score.recovered, expected_pairs=score.expected,
    )
