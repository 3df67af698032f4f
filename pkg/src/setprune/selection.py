"""Iterative subset selection by element removal.

One engine, five scores.  Each iteration scores every remaining element,
removes the argmax (lowest id on ties), and logs exact evaluation costs:

  exact        marginal gain by re-evaluation   |keep|+1 forwards
  sfo-*        first-order gain surrogate        1 forward, 1 backward
  saliency     median-shift heuristic            1 forward, 1 backward
  random       uniform scores                    nothing
  hybrid       inner score picks m candidates,   m+1 forwards, plus the
               exact gain decides among them     inner score's backward

The first-order score for element e is -grad_e . (T(e) - T'), where T'
is an uninformative reference the pool would ignore: the coordinate-wise
lower median, the pointwise feature minimum, or a caller-supplied
vector.  References are recomputed as the set shrinks unless frozen.
"""
from __future__ import annotations

import csv
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .data import PointSet
from .errors import ParameterError
from .objectives import SetObjective

SIMPLE_KINDS = ("exact", "sfo-median", "sfo-feature-min", "saliency", "random")
INNER_KINDS = ("sfo-median", "sfo-feature-min", "saliency", "random")
GRADIENT_KINDS = ("sfo-median", "sfo-feature-min", "saliency")


@dataclass(frozen=True)
class ScoreStrategy:
    """What to rank removals by; see module docstring for the costs."""

    kind: str
    m: int = 8                      # hybrid candidate count
    inner: str = "sfo-median"       # hybrid inner score kind
    seed: int = 0                   # random scores (also inside hybrid)
    freeze_reference: bool = False  # resolve T' once from the full set

    def __post_init__(self):
        if self.kind == "hybrid":
            if self.inner not in INNER_KINDS:
                raise ParameterError(
                    f"hybrid inner score must be one of {INNER_KINDS}, got {self.inner!r}")
            if self.m < 1:
                raise ParameterError(f"hybrid needs m >= 1, got {self.m}")
        elif self.kind not in SIMPLE_KINDS:
            raise ParameterError(
                f"unknown strategy {self.kind!r}; choose from {SIMPLE_KINDS + ('hybrid',)}")

    @property
    def label(self) -> str:
        if self.kind == "hybrid":
            return f"hybrid:{self.inner}:{self.m}"
        return self.kind

    @classmethod
    def parse(cls, text: str, seed: int = 0, freeze_reference: bool = False) -> "ScoreStrategy":
        """"exact", "sfo-median", ..., or "hybrid[:inner[:m]]"."""
        parts = text.split(":")
        if parts[0] != "hybrid":
            if len(parts) != 1:
                raise ParameterError(f"unexpected ':' in strategy {text!r}")
            return cls(parts[0], seed=seed, freeze_reference=freeze_reference)
        inner = parts[1] if len(parts) > 1 and parts[1] else "sfo-median"
        try:
            m = int(parts[2]) if len(parts) > 2 else 8
        except ValueError:
            raise ParameterError(f"bad candidate count in strategy {text!r}") from None
        if len(parts) > 3:
            raise ParameterError(f"too many ':' fields in strategy {text!r}")
        return cls("hybrid", m=m, inner=inner, seed=seed, freeze_reference=freeze_reference)


@dataclass(frozen=True)
class UninformativeEmbedding:
    """Reference vector the score measures displacement against."""

    mode: str  # coordinate-median | feature-min | custom
    vector: np.ndarray | None = None

    def __post_init__(self):
        if self.mode not in ("coordinate-median", "feature-min", "custom"):
            raise ParameterError(f"unknown embedding mode {self.mode!r}")
        if (self.mode == "custom") != (self.vector is not None):
            raise ParameterError("custom mode takes a vector; other modes must not")
        if self.vector is not None:
            object.__setattr__(self, "vector",
                               np.asarray(self.vector, dtype=np.float64).reshape(-1))


def lower_median(x: np.ndarray) -> np.ndarray:
    """Componentwise lower median: sorted values at index (n-1)//2."""
    x = np.asarray(x, dtype=np.float64)
    return np.sort(x, axis=0)[(x.shape[0] - 1) // 2]


def dominance_premise(features: np.ndarray, reference: np.ndarray) -> np.ndarray:
    """Per row i: is reference strictly below max over all other rows?

    This is the condition under which replacing row i by the reference
    is exactly equivalent to removing it.
    """
    features = np.asarray(features, dtype=np.float64)
    n, h = features.shape
    if n < 2:
        raise ParameterError("premise needs at least 2 rows")
    srt = np.sort(features, axis=0)
    top1, top2 = srt[-1], srt[-2]
    witness = np.argmax(features, axis=0)
    pooled_excl = np.tile(top1, (n, 1))
    pooled_excl[witness, np.arange(h)] = top2
    return np.all(np.asarray(reference).reshape(1, -1) < pooled_excl, axis=1)


@dataclass
class TraceStep:
    iteration: int
    removed_id: int
    score: float
    objective: float  # value after this removal; NaN when not evaluated
    d_forwards: int
    d_backwards: int
    forwards_cum: int
    backwards_cum: int
    ms_cum: float
    premise_ok: bool | None = None


@dataclass
class SelectionTrace:
    strategy: str
    n: int
    k: int
    steps: list[TraceStep] = field(default_factory=list)
    final_keep: np.ndarray | None = None
    wall_ms: float = 0.0
    forwards_total: int = 0
    backwards_total: int = 0

    @property
    def removed_ids(self) -> list[int]:
        return [s.removed_id for s in self.steps]


def score_exact(obj: SetObjective, ps: PointSet, keep, e: int, base: float | None = None):
    """Exact marginal gain of removing e; delegates to the objective."""
    return obj.marginal_gain(ps, keep, e, base=base)


def score_random(keep, seed: int, iteration: int = 0) -> np.ndarray:
    """I.i.d. uniform scores, deterministic per (seed, iteration)."""
    rng = np.random.default_rng([seed, iteration])
    return rng.random(np.asarray(keep).shape[0])


def _resolve_reference(emb: UninformativeEmbedding, coords, features):
    if emb.mode == "custom":
        return emb.vector
    if emb.mode == "feature-min":
        return features.min(axis=0)
    return lower_median(coords)


def score_sfo(obj: SetObjective, ps: PointSet, keep,
              embedding: UninformativeEmbedding | None = None, reference=None):
    """First-order removal scores for every kept element at once.

    Returns (scores, value, reference): the objective value comes free
    from the same forward pass.  Cost: 1 forward + 1 backward.  An
    explicit ``reference`` overrides the embedding resolution (frozen
    references pass through here).
    """
    emb = embedding or UninformativeEmbedding("coordinate-median")
    keep = np.unique(np.asarray(keep, dtype=np.int64))
    if keep.size < 2:
        raise ParameterError("scores need at least 2 elements to rank")
    if emb.mode == "feature-min":
        value, features, grad, _ = obj.value_and_feature_state(ps, keep)
        points = features
    else:
        value, grad = obj.value_and_input_gradient(ps, keep)
        points = ps.coords[ps.rows_for(keep)]
        features = None
    if reference is None:
        reference = _resolve_reference(emb, points, features)
    scores = -np.sum(grad * (points - reference), axis=1)
    return scores, value, reference


def score_saliency(obj: SetObjective, ps: PointSet, keep, reference=None):
    """Median-shift saliency: the first-order score times the squared
    distance to the reference.  Cost: 1 forward + 1 backward."""
    keep = np.unique(np.asarray(keep, dtype=np.int64))
    if keep.size < 2:
        raise ParameterError("scores need at least 2 elements to rank")
    value, grad = obj.value_and_input_gradient(ps, keep)
    coords = ps.coords[ps.rows_for(keep)]
    if reference is None:
        reference = lower_median(coords)
    diff = coords - reference
    scores = -np.sum(diff * diff, axis=1) * np.sum(grad * diff, axis=1)
    return scores, value, reference


def _argmax_low_id(ids: np.ndarray, scores: np.ndarray) -> int:
    """Position of the maximum score, lowest id among ties."""
    return int(np.lexsort((ids, -scores))[0])


def select(obj: SetObjective, ps: PointSet, strategy: ScoreStrategy, k: int,
           finalize: bool = True, check_premise: bool = False,
           embedding: UninformativeEmbedding | None = None) -> SelectionTrace:
    """Remove k elements one at a time, best score first.

    The trace records, per iteration: the removed id, its score, the
    objective on the shrunken set, and exact forward/backward deltas.
    Strategies that never evaluate the objective directly leave NaN in
    the objective column; gradient strategies fill iteration t's value
    from iteration t+1's forward pass, and ``finalize`` spends one extra
    forward (after the last iteration, visible in the totals but in no
    step delta) to complete the last row.  ``check_premise`` adds an
    unmetered diagnostic marking whether the removed element's reference
    was strictly dominated (pool-ignorable).
    """
    keep = np.unique(np.asarray(ps.ids, dtype=np.int64))
    n = keep.size
    if not (1 <= k <= n - 1):
        raise ParameterError(f"need 1 <= k <= n-1={n - 1}, got k={k}")
    if strategy.kind == "hybrid" and strategy.m > n:
        raise ParameterError(f"hybrid m={strategy.m} exceeds set size {n}")
    score_kind = strategy.inner if strategy.kind == "hybrid" else strategy.kind
    if embedding is not None and score_kind != "sfo-median":
        raise ParameterError(
            f"an embedding override applies only to sfo-median scoring, not {score_kind!r}")
    emb = embedding
    if emb is None:
        mode = "feature-min" if score_kind == "sfo-feature-min" else "coordinate-median"
        emb = UninformativeEmbedding(mode)

    trace = SelectionTrace(strategy.label, n, k)
    run_snap = obj.counter.snapshot()
    t0 = time.perf_counter()
    frozen_ref = None
    pending: TraceStep | None = None  # waiting for next iteration's objective value
    fwd_cum = bwd_cum = 0

    for iteration in range(k):
        snap = obj.counter.snapshot()
        reference = None
        premise = None

        # score every remaining element
        if score_kind == "exact":
            base = obj.evaluate(ps, keep)
            vals = np.array([obj.evaluate(ps, np.delete(keep, i)) for i in range(keep.size)])
            scores = vals - base
        elif score_kind == "random":
            scores, base, vals = score_random(keep, strategy.seed, iteration), None, None
        else:
            fn = score_saliency if score_kind == "saliency" else score_sfo
            kwargs = {} if score_kind == "saliency" else {"embedding": emb}
            scores, base, reference = fn(obj, ps, keep, reference=frozen_ref, **kwargs)
            vals = None
            if strategy.freeze_reference and frozen_ref is None:
                frozen_ref = reference

        # hybrid: exact gain decides among the top-m inner candidates
        if strategy.kind == "hybrid":
            m_eff = min(strategy.m, keep.size)
            cand = np.sort(np.lexsort((keep, -scores))[:m_eff])
            if base is None:  # random inner brought no objective value
                base = obj.evaluate(ps, keep)
            cand_vals = np.array([obj.evaluate(ps, np.delete(keep, i)) for i in cand])
            cand_scores = cand_vals - base
            pick = _argmax_low_id(keep[cand], cand_scores)
            choice, removed_score = int(cand[pick]), float(cand_scores[pick])
            value_after = float(cand_vals[pick])
        elif score_kind == "exact":
            choice = _argmax_low_id(keep, scores)
            removed_score = float(scores[choice])
            value_after = float(vals[choice])
        else:
            choice = _argmax_low_id(keep, scores)
            removed_score = float(scores[choice])
            value_after = np.nan

        if check_premise:
            premise = bool(_premise_flags(obj, ps, keep, emb, reference)[choice])
        if pending is not None and base is not None:
            pending.objective = float(base)  # this pass saw the set it left behind
            pending = None

        removed_id = int(keep[choice])
        keep = np.delete(keep, choice)
        d_fwd, d_bwd = obj.counter.delta_since(snap)
        fwd_cum += d_fwd
        bwd_cum += d_bwd
        step = TraceStep(iteration, removed_id, removed_score, value_after,
                         d_fwd, d_bwd, fwd_cum, bwd_cum,
                         (time.perf_counter() - t0) * 1000.0, premise)
        trace.steps.append(step)
        if np.isnan(value_after):
            pending = step

    if finalize and pending is not None:
        pending.objective = obj.evaluate(ps, keep)
    trace.final_keep = keep
    trace.wall_ms = (time.perf_counter() - t0) * 1000.0
    trace.forwards_total, trace.backwards_total = obj.counter.delta_since(run_snap)
    return trace


def _premise_flags(obj, ps, keep, emb, reference):
    """Unmetered dominance diagnostic for the current set (neural only)."""
    model = getattr(obj, "model", None)
    if model is None:
        raise ParameterError("premise checking needs an objective with a model")
    coords = ps.coords[ps.rows_for(keep)]
    features = model._point_features(coords)
    if emb.mode == "feature-min":
        ref_features = features.min(axis=0) if reference is None else reference
    else:
        if reference is None:
            reference = _resolve_reference(emb, coords, None)
        ref_features = model._point_features(reference.reshape(1, -1))[0]
    return dominance_premise(features, ref_features)


def select_hybrid(obj: SetObjective, ps: PointSet, inner: str, m: int, k: int,
                  seed: int = 0, **kwargs) -> SelectionTrace:
    """Convenience wrapper building the hybrid strategy."""
    return select(obj, ps, ScoreStrategy("hybrid", m=m, inner=inner, seed=seed),
                  k, **kwargs)


# ---------------------------------------------------------------------------
# trace export
# ---------------------------------------------------------------------------

TRACE_COLUMNS = ("sample", "strategy", "iteration", "removed_id", "score",
                 "objective", "forwards_cum", "backwards_cum", "ms_cum")


def write_trace_csv(path, items) -> None:
    """items: iterable of (sample name, SelectionTrace)."""
    with open(Path(path), "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(TRACE_COLUMNS)
        for sample, trace in items:
            for s in trace.steps:
                writer.writerow([sample, trace.strategy, s.iteration, s.removed_id,
                                 repr(s.score), repr(s.objective),
                                 s.forwards_cum, s.backwards_cum,
                                 f"{s.ms_cum:.3f}"])
