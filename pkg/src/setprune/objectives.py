"""Set functions under one interface.

The selection engine only ever sees ``evaluate(ps, keep)`` and, for
gradient-based scores, ``value_and_input_gradient``.  Besides the neural
adversarial objective (cross-entropy of a fixed label under the set
classifier), this module provides analytic objectives: modular sums,
weighted coverage, facility location, and a linear-in-embeddings
objective whose removal gains a first-order score must reproduce
exactly.  The analytic kinds double as brute-force-checkable oracles.

Metering: every ``evaluate`` is one forward on the objective's counter;
gradient calls are one forward plus one backward.  The neural kind
shares its model's counter so experiment totals stay exact.
"""
from __future__ import annotations

from itertools import combinations
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .counters import EvalCounter
from .data import PointSet
from .errors import (DimensionError, EmptySetError, FormatError, NumericError,
                     ParameterError, UnknownIdError)


class SetObjective:
    """Base: subclasses implement ``_value`` on a sorted unique id array."""

    kind = "abstract"
    analytic = False        # safe for exhaustive/property oracles, empty set allowed
    differentiable = False  # provides value_and_input_gradient

    def __init__(self):
        self.counter = EvalCounter()

    # -- helpers -------------------------------------------------------------

    def _canonical(self, ps: PointSet, keep) -> np.ndarray:
        """Sorted unique id array; validates nonempty and known ids."""
        ids = np.unique(np.asarray(keep, dtype=np.int64))
        if ids.size == 0:
            raise EmptySetError("keep subset must be nonempty")
        ps.rows_for(ids)  # raises UnknownIdError on foreign ids
        return ids

    def _value(self, ps: PointSet, ids: np.ndarray) -> float:
        raise NotImplementedError

    # -- public surface -------------------------------------------------------

    def evaluate(self, ps: PointSet, keep) -> float:
        """φ(keep): order-free in keep. Counts one forward."""
        ids = self._canonical(ps, keep)
        value = self._value(ps, ids)
        self.counter.add_forward()
        return value

    def marginal_gain(self, ps: PointSet, keep, e: int, base: float | None = None) -> float:
        """φ(keep∖{e}) − φ(keep).

        Pass ``base`` = φ(keep) to spend only the one forward for the
        reduced set; results are bitwise identical either way.
        """
        ids = self._canonical(ps, keep)
        if not np.any(ids == int(e)):
            raise UnknownIdError(f"element {e} not in keep subset")
        if ids.size == 1:
            raise EmptySetError("cannot remove the last element")
        if base is None:
            base = self.evaluate(ps, ids)
        reduced = ids[ids != int(e)]
        return self.evaluate(ps, reduced) - base

    def value_and_input_gradient(self, ps: PointSet, keep):
        """(φ(keep), dφ/dcoords over keep rows in sorted-id order).

        Counts one forward and one backward.  Only differentiable kinds
        support this.
        """
        raise NumericError(f"objective kind {self.kind!r} has no embedding gradient")

    def value_and_feature_state(self, ps: PointSet, keep):
        """(φ, features, dφ/dfeatures, witness) for feature-space scores."""
        raise NumericError(f"objective kind {self.kind!r} has no feature gradient")


# ---------------------------------------------------------------------------
# analytic kinds
# ---------------------------------------------------------------------------

class ModularObjective(SetObjective):
    """φ(keep) = Σ_{e∈keep} w_e: additive, the equality case of submodular."""

    kind = "modular"
    analytic = True

    def __init__(self, weights: dict):
        super().__init__()
        self.weights = {int(k): float(v) for k, v in weights.items()}

    def _value(self, ps, ids):
        return float(sum(self.weights[int(e)] for e in ids))


class CoverageObjective(SetObjective):
    """φ(keep) = Σ weights of universe items covered by any kept element."""

    kind = "coverage"
    analytic = True

    def __init__(self, universe_weights: dict, cover: dict):
        super().__init__()
        self.universe_weights = {int(k): float(v) for k, v in universe_weights.items()}
        self.cover = {int(k): frozenset(int(u) for u in v) for k, v in cover.items()}
        for e, items in self.cover.items():
            missing = [u for u in items if u not in self.universe_weights]
            if missing:
                raise ParameterError(f"element {e} covers unknown universe items {missing}")

    def _value(self, ps, ids):
        covered = set()
        for e in ids:
            covered |= self.cover[int(e)]
        return float(sum(self.universe_weights[u] for u in sorted(covered)))


class FacilityLocationObjective(SetObjective):
    """φ(keep) = Σ_clients max_{e∈keep} sim[e, client] (0 with no cover)."""

    kind = "facility"
    analytic = True

    def __init__(self, similarity: dict):
        """similarity: element id -> per-client similarity row."""
        super().__init__()
        self.similarity = {int(k): np.asarray(v, dtype=np.float64) for k, v in similarity.items()}
        lengths = {v.shape for v in self.similarity.values()}
        if len(lengths) != 1:
            raise ParameterError(f"similarity rows differ in client count: {sorted(lengths)}")

    def _value(self, ps, ids):
        rows = np.vstack([self.similarity[int(e)] for e in ids])
        return float(np.sum(rows.max(axis=0)))


class LinearObjective(SetObjective):
    """φ(keep) = Σ_{e∈keep} wᵀT(e): linear in the embeddings.

    The gradient with respect to every kept row is w, so a first-order
    removal score with reference point zero is exact (zero Taylor
    remainder).
    """

    kind = "linear"
    analytic = True
    differentiable = True

    def __init__(self, w):
        super().__init__()
        self.w = np.asarray(w, dtype=np.float64).reshape(-1)

    def _value(self, ps, ids):
        coords = ps.coords[ps.rows_for(ids)]
        if coords.shape[1] != self.w.shape[0]:
            raise NumericError(f"weight dim {self.w.shape[0]} vs coords dim {coords.shape[1]}")
        return float(np.sum(coords @ self.w))

    def value_and_input_gradient(self, ps, keep):
        ids = self._canonical(ps, keep)
        value = self._value(ps, ids)
        grads = np.tile(self.w, (ids.size, 1))
        self.counter.add_forward()
        self.counter.add_backward()
        return value, grads


class NeuralObjective(SetObjective):
    """φ(keep) = cross-entropy of a fixed label on the kept elements.

    Maximizing φ by removal is the untargeted attack.  Shares the
    model's counter: one evaluate = one model forward, exactly.
    """

    kind = "neural"
    differentiable = True

    def __init__(self, model, label: int):
        super().__init__()
        if not (0 <= int(label) < model.c):
            # a label the head cannot express means model and data disagree
            raise DimensionError(f"label {label} outside [0, {model.c})")
        self.model = model
        self.label = int(label)
        self.counter = model.counter

    @classmethod
    def for_sample(cls, model, ps: PointSet) -> "NeuralObjective":
        if ps.label < 0:
            raise ParameterError(f"sample {ps.name!r} carries no label")
        return cls(model, ps.label)

    def _value(self, ps, ids):
        coords = ps.coords[ps.rows_for(ids)]
        f = self.model._point_features(coords)
        pooled, _ = ad.feature_max_value(f)
        logits = self.model._head_logits(pooled)
        loss, _ = ad.softmax_xent_value(logits, self.label)
        return float(loss[0, 0])

    def value_and_input_gradient(self, ps, keep):
        ids = self._canonical(ps, keep)
        coords = ps.coords[ps.rows_for(ids)]
        loss, grad = self.model.loss_and_input_gradient(coords, self.label)
        return loss, grad

    def value_and_feature_state(self, ps, keep):
        ids = self._canonical(ps, keep)
        coords = ps.coords[ps.rows_for(ids)]
        return self.model.loss_and_feature_gradient(coords, self.label)


# ---------------------------------------------------------------------------
# oracles
# ---------------------------------------------------------------------------

def brute_force_opt(obj: SetObjective, ps: PointSet, k: int, mode: str = "remove"):
    """Exhaustive optimum; the oracle greedy answers are checked against.

    mode="remove": maximize φ(keep) over keep with |keep| ≥ n−k (at most
    k removals).  mode="select": maximize φ(keep) over 1 ≤ |keep| ≤ k.
    Ties break toward the earliest set in the fixed enumeration order
    (fewest removals / smallest size first, then lexicographic ids).
    """
    ids = sorted(int(i) for i in ps.ids)
    n = len(ids)
    if n > 20:
        raise ParameterError(f"exhaustive search capped at n=20 elements, got {n}")
    if mode == "remove":
        if not (0 <= k <= n - 1):
            raise ParameterError(f"need 0 <= k <= n-1={n - 1}, got k={k}")
        candidates = ((tuple(e for e in ids if e not in set(drop)))
                      for j in range(k + 1)
                      for drop in combinations(ids, j))
    elif mode == "select":
        if not (1 <= k <= n):
            raise ParameterError(f"need 1 <= k <= n={n}, got k={k}")
        candidates = (keep for j in range(1, k + 1) for keep in combinations(ids, j))
    else:
        raise ParameterError(f"unknown mode {mode!r}; use remove or select")
    best_keep, best_value = None, -np.inf
    for keep in candidates:
        value = obj.evaluate(ps, keep)
        if value > best_value:
            best_keep, best_value = keep, value
    return best_keep, best_value


def verify_submodular(obj: SetObjective, ps: PointSet, trials: int = 1000,
                      seed: int = 0) -> bool:
    """Sampled check of monotonicity and diminishing returns.

    Draws chains A ⊆ B and elements e ∉ B; requires
    gain(e|A) ≥ gain(e|B) − 1e-12 and φ(B∪e) ≥ φ(B) − 1e-12 throughout.
    Analytic kinds only (the neural loss carries no such structure), and
    not metered: this is a property probe, not an experiment cost.
    """
    if not obj.analytic:
        raise ParameterError(f"objective kind {obj.kind!r} is not an analytic set function")
    ids = np.sort(np.asarray(ps.ids, dtype=np.int64))
    n = ids.size
    if n < 2:
        raise ParameterError("need at least 2 elements to test chains")
    rng = np.random.default_rng(seed)

    def value(subset) -> float:
        if len(subset) == 0:
            return 0.0
        return obj._value(ps, np.sort(np.asarray(subset, dtype=np.int64)))

    for _ in range(trials):
        size_b = int(rng.integers(0, n))  # B may be empty, never the full set
        b = rng.choice(ids, size=size_b, replace=False)
        outside = np.setdiff1d(ids, b)
        e = int(rng.choice(outside))
        size_a = int(rng.integers(0, size_b + 1))
        a = rng.choice(b, size=size_a, replace=False) if size_b else np.array([], dtype=np.int64)
        gain_a = value(np.append(a, e)) - value(a)
        gain_b = value(np.append(b, e)) - value(b)
        if gain_a < gain_b - 1e-12:
            return False
        if value(np.append(b, e)) < value(b) - 1e-12:
            return False
    return True


# ---------------------------------------------------------------------------
# instance files (text fixtures for the analytic kinds)
# ---------------------------------------------------------------------------

def instance_point_set(obj: SetObjective) -> PointSet:
    """Dummy ground set carrying the instance's element ids."""
    if isinstance(obj, ModularObjective):
        ids = sorted(obj.weights)
    elif isinstance(obj, CoverageObjective):
        ids = sorted(obj.cover)
    elif isinstance(obj, FacilityLocationObjective):
        ids = sorted(obj.similarity)
    else:
        raise ParameterError(f"no ground set attached to kind {obj.kind!r}")
    return PointSet(np.array(ids), np.zeros((len(ids), 1)))


def save_instance(path, obj: SetObjective) -> None:
    """Text form: one `kind` line then `universe`/`clients`/`element` lines."""
    lines = [f"kind {obj.kind}"]
    if isinstance(obj, ModularObjective):
        for e in sorted(obj.weights):
            lines.append(f"element {e} {obj.weights[e]!r}")
    elif isinstance(obj, CoverageObjective):
        for u in sorted(obj.universe_weights):
            lines.append(f"universe {u} {obj.universe_weights[u]!r}")
        for e in sorted(obj.cover):
            items = " ".join(str(u) for u in sorted(obj.cover[e]))
            lines.append(f"element {e} {items}".rstrip())
    elif isinstance(obj, FacilityLocationObjective):
        any_row = next(iter(obj.similarity.values()))
        lines.append(f"clients {any_row.shape[0]}")
        for e in sorted(obj.similarity):
            vals = " ".join(repr(float(v)) for v in obj.similarity[e])
            lines.append(f"element {e} {vals}")
    else:
        raise ParameterError(f"kind {obj.kind!r} has no file form")
    Path(path).write_text("".join(line + "\n" for line in lines))


def load_instance(path) -> SetObjective:
    lines = Path(path).read_text().splitlines()
    kind = None
    universe: dict = {}
    elements: list[tuple[int, int, list[str]]] = []  # (lineno, id, payload tokens)
    clients = None
    for lineno, raw in enumerate(lines, start=1):
        text = raw.split("#", 1)[0].strip()
        if not text:
            continue
        parts = text.split()
        tag = parts[0]
        try:
            if tag == "kind":
                kind = parts[1]
            elif tag == "universe":
                universe[int(parts[1])] = float(parts[2])
            elif tag == "clients":
                clients = int(parts[1])
            elif tag == "element":
                elements.append((lineno, int(parts[1]), parts[2:]))
            else:
                raise FormatError(f"{path}: line {lineno}: unknown directive {tag!r}")
        except (IndexError, ValueError):
            raise FormatError(f"{path}: line {lineno}: malformed line {text!r}") from None
    if kind is None:
        raise FormatError(f"{path}: missing `kind` line")
    if not elements:
        raise FormatError(f"{path}: no `element` lines")
    try:
        if kind == "modular":
            return ModularObjective({e: float(p[0]) for _, e, p in elements})
        if kind == "coverage":
            return CoverageObjective(universe, {e: [int(u) for u in p] for _, e, p in elements})
        if kind == "facility":
            sim = {e: [float(v) for v in p] for _, e, p in elements}
            for lineno, e, p in elements:
                if clients is not None and len(p) != clients:
                    raise FormatError(
                        f"{path}: line {lineno}: element {e} has {len(p)} values, "
                        f"expected {clients}")
            return FacilityLocationObjective(sim)
    except (IndexError, ValueError):
        raise FormatError(f"{path}: malformed {kind} payload") from None
    raise FormatError(f"{path}: unknown kind {kind!r}")
