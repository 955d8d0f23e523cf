"""Property-targeted generation: constraint specs, latent search and decoding.

The latent search minimizes a weighted sum of per-property terms plus a
Gaussian prior on w. Value and Range terms are quadratic penalties whose
weight grows geometrically over a few outer rounds, so their minimizers
approach the constrained optimum. Every restart of every request is one
row of a single batch, optimized by gradient descent with Barzilai-Borwein
step sizes.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .config import GenConfig
from .datagen import EmptyImageError, measure, write_pgm
from .invhead import InvertibleHead, invert, predict
from .maskpool import Aggregator, aggregate
from .numcore import NumericalError, Rng, Tensor, relu, square

KINDS = ("value", "range", "max", "min", "free")


class SpecError(ValueError):
    pass


class GenerationError(RuntimeError):
    pass


def _bound(v) -> float:
    if isinstance(v, str):
        if v.strip().lower() in ("inf", "+inf", "infinity"):
            return math.inf
        if v.strip().lower() in ("-inf", "-infinity"):
            return -math.inf
        raise SpecError(f"cannot read bound {v!r}")
    return float(v)


def _dump_bound(v: float):
    if math.isinf(v):
        return "inf" if v > 0 else "-inf"
    return v


@dataclass(frozen=True)
class Constraint:
    kind: str = "free"
    lo: float = -math.inf
    hi: float = math.inf
    weight: float = 1.0

    def __post_init__(self):
        if self.kind not in KINDS:
            raise SpecError(f"unknown constraint type {self.kind!r}")
        if self.lo > self.hi:
            raise SpecError(f"range lower bound {self.lo} exceeds upper bound {self.hi}")
        if self.weight < 0:
            raise SpecError("constraint weight must be non-negative")
        if self.kind == "value" and not math.isfinite(self.lo):
            raise SpecError("value constraint needs a finite target")
        if self.kind == "range" and not (math.isfinite(self.lo) or math.isfinite(self.hi)):
            raise SpecError("range constraint needs at least one finite bound")

    @classmethod
    def value(cls, c: float, weight: float = 1.0) -> "Constraint":
        return cls("value", float(c), float(c), weight)

    @classmethod
    def range(cls, lo: float, hi: float, weight: float = 1.0) -> "Constraint":
        return cls("range", _bound(lo), _bound(hi), weight)

    @classmethod
    def maximize(cls, weight: float = 1.0) -> "Constraint":
        return cls("max", -math.inf, math.inf, weight)

    @classmethod
    def minimize(cls, weight: float = 1.0) -> "Constraint":
        return cls("min", -math.inf, math.inf, weight)

    @property
    def target(self) -> float:
        return self.lo

    def violation(self, f: float) -> float:
        """Distance from the feasible set; objectives (max/min/free) never violate."""
        if self.kind == "value":
            return abs(f - self.lo)
        if self.kind == "range":
            return max(0.0, f - self.hi, self.lo - f)
        return 0.0

    def to_json(self) -> dict:
        out: dict = {"type": self.kind}
        if self.kind == "value":
            out["c"] = self.lo
        elif self.kind == "range":
            out["lo"], out["hi"] = _dump_bound(self.lo), _dump_bound(self.hi)
        if self.weight != 1.0:
            out["weight"] = self.weight
        return out

    @classmethod
    def from_json(cls, obj: dict) -> "Constraint":
        if not isinstance(obj, dict) or "type" not in obj:
            raise SpecError(f"constraint entry must be an object with a 'type': {obj!r}")
        kind = obj["type"]
        weight = float(obj.get("weight", 1.0))
        try:
            if kind == "value":
                return cls.value(obj["c"], weight)
            if kind == "range":
                return cls.range(obj.get("lo", "-inf"), obj.get("hi", "inf"), weight)
        except KeyError as exc:
            raise SpecError(f"{kind} constraint is missing {exc}") from None
        except (TypeError, ValueError) as exc:
            raise SpecError(f"bad {kind} constraint {obj!r}: {exc}") from None
        if kind == "max":
            return cls.maximize(weight)
        if kind == "min":
            return cls.minimize(weight)
        if kind == "free":
            return cls("free", weight=weight)
        raise SpecError(f"unknown constraint type {kind!r}")


@dataclass(frozen=True)
class ConstraintSpec:
    """One constraint per property, in property order."""

    names: tuple[str, ...]
    entries: tuple[Constraint, ...]
    z_policy: str | None = None

    def __post_init__(self):
        if len(self.names) != len(self.entries):
            raise SpecError("one constraint per property is required")
        if all(c.kind == "free" for c in self.entries):
            raise SpecError("spec has no active constraint")
        if self.z_policy not in (None, "fixed", "sampled"):
            raise SpecError(f"unknown z policy {self.z_policy!r}")

    @classmethod
    def build(cls, names: Sequence[str], z_policy: str | None = None,
              **by_name: Constraint) -> "ConstraintSpec":
        """Keyword form; unnamed properties are free. ``x+y`` may be passed as ``xy``."""
        lookup = {n.replace("+", ""): n for n in names}
        given = {}
        for key, c in by_name.items():
            if key not in lookup:
                raise SpecError(f"unknown property {key!r}")
            given[lookup[key]] = c
        return cls(tuple(names), tuple(given.get(n, Constraint()) for n in names), z_policy)

    @classmethod
    def values(cls, names: Sequence[str], targets: Sequence[float]) -> "ConstraintSpec":
        return cls(tuple(names), tuple(Constraint.value(t) for t in targets))

    def __getitem__(self, name: str) -> Constraint:
        return self.entries[self.names.index(name)]

    @property
    def all_values(self) -> bool:
        return all(c.kind == "value" for c in self.entries)

    def violations(self, f: np.ndarray) -> np.ndarray:
        return np.array([c.violation(float(v)) for c, v in zip(self.entries, f)])

    def satisfied(self, f: np.ndarray, value_tol: float, range_tol: float) -> bool:
        for c, v in zip(self.entries, self.violations(f)):
            tol = value_tol if c.kind == "value" else range_tol
            if v > tol + 1e-12:
                return False
        return True

    def to_json(self) -> dict:
        out: dict = {"constraints": {n: c.to_json() for n, c in zip(self.names, self.entries)}}
        if self.z_policy:
            out["z_policy"] = self.z_policy
        return out

    @classmethod
    def from_json(cls, obj: dict, names: Sequence[str]) -> "ConstraintSpec":
        if not isinstance(obj, dict):
            raise SpecError("spec must be a JSON object")
        body = obj.get("constraints", {k: v for k, v in obj.items() if k != "z_policy"})
        unknown = set(body) - set(names)
        if unknown:
            raise SpecError(f"spec names unknown properties {sorted(unknown)}")
        entries = tuple(Constraint.from_json(body[n]) if n in body else Constraint() for n in names)
        return cls(tuple(names), entries, obj.get("z_policy"))


def read_spec(path: str | Path, names: Sequence[str]) -> ConstraintSpec:
    try:
        obj = json.loads(Path(path).read_text())
    except FileNotFoundError:
        raise SpecError(f"spec file {path} not found") from None
    except json.JSONDecodeError as exc:
        raise SpecError(f"spec file {path} is not valid JSON: {exc}") from None
    return ConstraintSpec.from_json(obj, names)


# -- batched descent ---------------------------------------------------------
RowLoss = Callable[[Tensor, float], Tensor]


@dataclass
class DescentResult:
    w: np.ndarray                  # best iterate per row under the last round's objective
    loss: np.ndarray
    iterations: int
    round_points: list[np.ndarray] = field(default_factory=list)


def _loss_and_grad(loss_fn: RowLoss, w: np.ndarray, penalty: float) -> tuple[np.ndarray, np.ndarray]:
    wt = Tensor(w, requires_grad=True)
    per_row = loss_fn(wt, penalty)
    per_row.sum().backward()
    return per_row.data.copy(), wt.grad


def descend(loss_fn: RowLoss, w0: np.ndarray, opts: GenConfig) -> DescentResult:
    """Minimize independent per-row losses with Barzilai-Borwein gradient steps.

    ``loss_fn(w, penalty)`` returns one loss per row. Each outer round
    multiplies the penalty by ``opts.penalty_growth`` and restarts from the
    best iterate of the previous round.
    """
    w = np.array(w0, dtype=np.float64)
    penalty = 1.0
    rounds = []
    iterations = 0
    best_loss = None
    for r in range(opts.rounds):
        if r:
            penalty *= opts.penalty_growth
        loss, g = _loss_and_grad(loss_fn, w, penalty)
        best_w, best_loss = w.copy(), loss.copy()
        step = np.full(len(w), opts.lr / penalty)
        for _ in range(opts.steps):
            w_new = w - step[:, None] * g
            try:
                loss_new, g_new = _loss_and_grad(loss_fn, w_new, penalty)
            except NumericalError:
                step *= 0.1
                continue
            s, y = w_new - w, g_new - g
            sy = np.einsum("ij,ij->i", s, y)
            ss = np.einsum("ij,ij->i", s, s)
            # BB1 step where curvature is positive, otherwise keep the last step
            step = np.where(sy > 1e-300, ss / np.maximum(sy, 1e-300), step)
            step = np.clip(step, 1e-8, 1e4)
            w, g = w_new, g_new
            better = loss_new < best_loss
            best_w[better], best_loss[better] = w[better], loss_new[better]
            iterations += 1
        w = best_w
        rounds.append(best_w.copy())
    return DescentResult(w, best_loss, iterations, rounds)


# -- spec encoding -------------------------------------------------------------
@dataclass
class _Terms:
    """Row-wise arrays describing a stack of specs."""

    value_w: np.ndarray
    target: np.ndarray
    lo_w: np.ndarray
    lo: np.ndarray
    hi_w: np.ndarray
    hi: np.ndarray
    linear: np.ndarray

    @classmethod
    def from_specs(cls, specs: Sequence[ConstraintSpec]) -> "_Terms":
        n, m = len(specs), len(specs[0].entries)
        arr = {k: np.zeros((n, m)) for k in ("value_w", "target", "lo_w", "lo", "hi_w", "hi", "linear")}
        for r, spec in enumerate(specs):
            for j, c in enumerate(spec.entries):
                if c.kind == "value":
                    arr["value_w"][r, j], arr["target"][r, j] = c.weight, c.lo
                elif c.kind == "range":
                    if math.isfinite(c.lo):
                        arr["lo_w"][r, j], arr["lo"][r, j] = c.weight, c.lo
                    if math.isfinite(c.hi):
                        arr["hi_w"][r, j], arr["hi"][r, j] = c.weight, c.hi
                elif c.kind == "max":
                    arr["linear"][r, j] = -c.weight
                elif c.kind == "min":
                    arr["linear"][r, j] = c.weight
        return cls(**arr)

    def repeat(self, k: int) -> "_Terms":
        return _Terms(*(np.repeat(getattr(self, f), k, axis=0) for f in self.__dataclass_fields__))


def _forward(head: InvertibleHead, agg: Aggregator, mask_hard: np.ndarray, w) -> Tensor:
    return predict(head, aggregate(w, mask_hard, agg))


def _check_mask(mask_hard, agg: Aggregator) -> np.ndarray:
    M = np.asarray(mask_hard, dtype=np.float64)
    if M.shape != (agg.l, agg.m) or not np.all((M == 0) | (M == 1)):
        raise ValueError(f"generation needs a binary ({agg.l}, {agg.m}) mask")
    return M


def _restart_points(rng: Rng, rows: int, l: int) -> np.ndarray:
    return rng.normal((rows, l))


@dataclass
class GenerationReport:
    requested: ConstraintSpec
    w_star: np.ndarray
    w_prime: np.ndarray
    achieved_model: np.ndarray
    violation_model: np.ndarray
    converged: bool
    iterations: int
    achieved_oracle: np.ndarray | None = None
    violation_oracle: np.ndarray | None = None
    objective: float = float("nan")
    round_violation: list[float] = field(default_factory=list)

    @property
    def max_violation(self) -> float:
        parts = [self.violation_model]
        if self.violation_oracle is not None:
            parts.append(np.nan_to_num(self.violation_oracle, nan=np.inf))
        return float(max(np.max(p) for p in parts))

    def to_json(self) -> dict:
        def arr(a):
            return None if a is None else [None if not np.isfinite(v) else float(v) for v in a]
        return {
            "requested": self.requested.to_json(),
            "w_star": arr(self.w_star), "w_prime": arr(self.w_prime),
            "achieved_model": arr(self.achieved_model),
            "achieved_oracle": arr(self.achieved_oracle),
            "violation_model": arr(self.violation_model),
            "violation_oracle": arr(self.violation_oracle),
            "converged": self.converged, "iterations": self.iterations,
            "objective": self.objective,
            "round_violation": [float(v) for v in self.round_violation],
        }


def fit_bridge(agg: Aggregator, M: np.ndarray, wps: np.ndarray, rng: Rng,
               opts: GenConfig) -> np.ndarray:
    """Per row of ``wps``, the best restart of min penalty*||h(w*M) - w'||^2 + mu*||w||^2."""
    R = opts.restarts
    goal = np.repeat(wps, R, axis=0)

    def loss(w: Tensor, penalty: float) -> Tensor:
        fit = square(aggregate(w, M, agg) - goal).sum(axis=1)
        return fit * penalty + square(w).sum(axis=1) * opts.mu

    res = descend(loss, _restart_points(rng, len(goal), agg.l), opts)
    best = res.loss.reshape(-1, R).argmin(axis=1)
    return res.w.reshape(-1, R, agg.l)[np.arange(len(wps)), best]


def solve_exact(head: InvertibleHead, agg: Aggregator, mask_hard, targets, rng: Rng,
                opts: GenConfig | None = None) -> tuple[np.ndarray, np.ndarray]:
    """Invert the head at the full target vector, then fit w to the bridge.

    Returns (w_prime, w_star). w_star minimizes
    penalty * ||h(w * M) - w_prime||^2 + mu * ||w||^2 over ``opts.restarts``
    prior draws; the last round's penalty is ``penalty_growth ** (rounds - 1)``.
    """
    opts = opts or GenConfig()
    M = _check_mask(mask_hard, agg)
    targets = np.asarray(targets, dtype=np.float64).reshape(-1, agg.m)
    wp_star = invert(head, targets)
    w_star = fit_bridge(agg, M, wp_star, rng, opts)
    if targets.shape[0] == 1:
        return wp_star[0], w_star[0]
    return wp_star, w_star


def _spec_loss(head, agg, M, terms: _Terms, mu: float) -> RowLoss:
    def loss(w: Tensor, penalty: float) -> Tensor:
        f = _forward(head, agg, M, w)
        pen = (square(f - terms.target) * terms.value_w
               + square(relu(f - terms.hi)) * terms.hi_w
               + square(relu(f * -1.0 + terms.lo)) * terms.lo_w).sum(axis=1)
        return pen * penalty + (f * terms.linear).sum(axis=1) + square(w).sum(axis=1) * mu
    return loss


def solve_constrained_many(head: InvertibleHead, agg: Aggregator, mask_hard,
                           specs: Sequence[ConstraintSpec], rng: Rng,
                           opts: GenConfig | None = None) -> list[GenerationReport]:
    """Solve several specs in one batch; each gets ``opts.restarts`` rows."""
    opts = opts or GenConfig()
    M = _check_mask(mask_hard, agg)
    if not specs:
        return []
    for spec in specs:
        if len(spec.entries) != agg.m:
            raise SpecError(f"spec has {len(spec.entries)} entries, model has {agg.m} properties")
    R = opts.restarts
    terms = _Terms.from_specs(specs).repeat(R)
    loss = _spec_loss(head, agg, M, terms, opts.mu)
    res = descend(loss, _restart_points(rng, len(specs) * R, agg.l), opts)
    # restart merge: minimum final objective, ties to the lowest restart index
    best = res.loss.reshape(-1, R).argmin(axis=1)
    rows = np.arange(len(specs)) * R + best
    reports = []
    for k, spec in enumerate(specs):
        w_star = res.w[rows[k]]
        wp = aggregate(w_star[None, :], M, agg).data[0]
        f = predict(head, wp[None, :]).data[0]
        viol = spec.violations(f)
        round_viol = []
        for pts in res.round_points:
            f_r = _forward(head, agg, M, pts[rows[k]][None, :]).data[0]
            round_viol.append(float(sum(v for c, v in zip(spec.entries, spec.violations(f_r))
                                        if c.kind == "range")))
        reports.append(GenerationReport(
            requested=spec, w_star=w_star, w_prime=wp, achieved_model=f,
            violation_model=viol,
            converged=spec.satisfied(f, opts.value_tol, opts.range_tol),
            iterations=res.iterations, objective=float(res.loss[rows[k]]),
            round_violation=round_viol))
    return reports


def solve_constrained(head: InvertibleHead, agg: Aggregator, mask_hard, spec: ConstraintSpec,
                      rng: Rng, opts: GenConfig | None = None) -> GenerationReport:
    return solve_constrained_many(head, agg, mask_hard, [spec], rng, opts)[0]


# -- decoding ----------------------------------------------------------------
def _image_side(model) -> int:
    side = int(round(math.sqrt(model.d_x)))
    if side * side != model.d_x:
        raise GenerationError(f"cannot reshape {model.d_x} pixels into a square image")
    return side


def measure_or_nan(binary: np.ndarray, names: Sequence[str]) -> np.ndarray:
    try:
        return measure(binary).vector(names)
    except EmptyImageError:
        return np.full(len(names), np.nan)


def decode_images(model, w: np.ndarray, z: np.ndarray) -> np.ndarray:
    side = _image_side(model)
    probs = model.decode(np.atleast_2d(w), np.atleast_2d(z))
    return probs.reshape(-1, side, side)


def _z_block(policy: str, rng: Rng, rows: int, d_z: int) -> np.ndarray:
    if policy == "fixed":
        return np.zeros((rows, d_z))
    return rng.normal((rows, d_z))


def generate_many(model, specs: Sequence[ConstraintSpec], rng: Rng,
                  opts: GenConfig | None = None) -> tuple[np.ndarray, list[GenerationReport]]:
    """Search w for each spec, decode with z per policy and score with the oracle.

    Returns decoded probability images (n x N x N) and one report per spec.
    A report converges only if both the model's predicted properties and the
    oracle measurement of the 0.5-thresholded image meet the spec.
    """
    opts = opts or GenConfig()
    reports = solve_constrained_many(model.head, model.aggregator, model.hard_mask(), specs,
                                     rng.child(0), opts)
    z_rng = rng.child(1)
    images = []
    for k, (spec, rep) in enumerate(zip(specs, reports)):
        z = _z_block(spec.z_policy or opts.z_policy, z_rng.child(k), 1, model.d_z)
        img = decode_images(model, rep.w_star, z)[0]
        oracle = measure_or_nan(img >= 0.5, model.property_names)
        rep.achieved_oracle = oracle
        rep.violation_oracle = np.array([np.nan if np.isnan(v) else c.violation(float(v))
                                         for c, v in zip(spec.entries, oracle)])
        oracle_ok = bool(np.all(np.isfinite(oracle))) and spec.satisfied(
            oracle, opts.value_tol, opts.range_tol)
        rep.converged = rep.converged and oracle_ok
        images.append(img)
    return np.stack(images), reports


def generate(model, spec: ConstraintSpec, rng: Rng, batch: int = 1,
             opts: GenConfig | None = None, out_dir: str | Path | None = None
             ) -> tuple[np.ndarray, list[GenerationReport]]:
    """``batch`` independent solutions of one spec, optionally written to ``out_dir``."""
    if batch < 1:
        raise ValueError("batch must be at least 1")
    images, reports = generate_many(model, [spec] * batch, rng, opts)
    if out_dir is not None:
        write_generation(out_dir, images, reports, model.property_names)
    return images, reports


def write_generation(out_dir: str | Path, images: np.ndarray, reports: list[GenerationReport],
                     names: Sequence[str]) -> dict[str, Path]:
    """PGM per image plus ``report.json`` and ``report.csv``."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    for i, img in enumerate(images):
        write_pgm(out / f"image_{i:03d}.pgm", img)
    (out / "report.json").write_text(
        json.dumps([r.to_json() for r in reports], indent=2, sort_keys=True) + "\n")
    with open(out / "report.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["image", "converged", "max_violation"]
                        + [f"model_{n}" for n in names] + [f"oracle_{n}" for n in names])
        for i, r in enumerate(reports):
            oracle = r.achieved_oracle if r.achieved_oracle is not None else np.full(len(names), np.nan)
            writer.writerow([i, int(r.converged), repr(r.max_violation)]
                            + [repr(float(v)) for v in r.achieved_model]
                            + [repr(float(v)) for v in oracle])
    return {"json": out / "report.json", "csv": out / "report.csv"}


# -- traversal ---------------------------------------------------------------
@dataclass
class Traversal:
    space: str
    index: int
    values: np.ndarray
    images: np.ndarray          # steps x N x N decoded probabilities
    oracle: np.ndarray          # steps x m, NaN for empty images
    model_props: np.ndarray     # steps x m


def traverse(model, index: int, lo: float = -3.0, hi: float = 3.0, steps: int = 11,
             space: str = "w", base_w: np.ndarray | None = None, z: np.ndarray | None = None,
             rng: Rng | None = None, opts: GenConfig | None = None) -> Traversal:
    """Sweep one coordinate of w or w' with the rest fixed, decoding every step.

    The base point defaults to w = 0 and z = 0 (the prior mode). In w' space
    each swept w' is mapped back to w by the exact solver's bridge fit.
    """
    if space not in ("w", "wprime"):
        raise ValueError("space must be 'w' or 'wprime'")
    width = model.l if space == "w" else model.m
    if not 0 <= index < width:
        raise IndexError(f"{space} index {index} outside [0, {width})")
    if steps < 1:
        raise ValueError("steps must be at least 1")
    values = np.array([lo]) if steps == 1 or lo == hi else np.linspace(lo, hi, steps)
    base_w = np.zeros(model.l) if base_w is None else np.asarray(base_w, dtype=np.float64)
    z = np.zeros(model.d_z) if z is None else np.asarray(z, dtype=np.float64)
    M = model.hard_mask()
    if space == "w":
        ws = np.repeat(base_w[None, :], len(values), axis=0)
        ws[:, index] = values
    else:
        opts = opts or GenConfig()
        base_wp = aggregate(base_w[None, :], M, model.aggregator).data[0]
        wps = np.repeat(base_wp[None, :], len(values), axis=0)
        wps[:, index] = values
        ws = fit_bridge(model.aggregator, M, wps, rng or Rng(0), opts)
    props = _forward(model.head, model.aggregator, M, ws).data
    images = decode_images(model, ws, np.repeat(z[None, :], len(values), axis=0))
    oracle = np.stack([measure_or_nan(img >= 0.5, model.property_names) for img in images])
    return Traversal(space, index, values, images, oracle, props)


def write_traversal(out_dir: str | Path, tr: Traversal, names: Sequence[str]) -> Path:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    for i, img in enumerate(tr.images):
        write_pgm(out / f"step_{i:03d}.pgm", img)
    path = out / "traversal.csv"
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["step", "value"] + [f"model_{n}" for n in names] + [f"oracle_{n}" for n in names])
        for i, v in enumerate(tr.values):
            writer.writerow([i, repr(float(v))] + [repr(float(a)) for a in tr.model_props[i]]
                            + [repr(float(a)) for a in tr.oracle[i]])
    return path
