"""Reverse-mode differentiation over dense real matrices.

Covers exactly the primitive set the set classifier is built from:
affine maps, ReLU, feature-wise max over set rows (with argmax
witnesses), and numerically stable softmax cross-entropy.  Values are
2-D float arrays throughout; row vectors are shape (1, k) and scalars
shape (1, 1).

The module-level ``*_value`` functions are the single source of truth
for forward arithmetic: the Tape records calls to them, and gradient-free
fast paths (model inference) call them directly, so traced and untraced
forwards are bit-identical by construction.

One Tape per scalar evaluation; tapes are discarded after ``backward``.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Any

import numpy as np

from .errors import DimensionError, EmptySetError

_DEFAULT_DTYPE = np.float64


def set_default_dtype(dtype) -> None:
    """Switch the execution precision (float64 reference, float32 opt-in)."""
    global _DEFAULT_DTYPE
    dtype = np.dtype(dtype)
    if dtype not in (np.dtype(np.float32), np.dtype(np.float64)):
        raise DimensionError(f"unsupported dtype {dtype}; use float32 or float64")
    _DEFAULT_DTYPE = dtype.type


def default_dtype():
    return _DEFAULT_DTYPE


def as_matrix(a, dtype=None) -> np.ndarray:
    """Coerce to a 2-D array of the execution dtype; 1-D becomes a row vector."""
    out = np.asarray(a, dtype=dtype or _DEFAULT_DTYPE)
    if out.ndim == 1:
        out = out.reshape(1, -1)
    if out.ndim != 2:
        raise DimensionError(f"expected a matrix, got ndim={out.ndim}")
    return out


# ---------------------------------------------------------------------------
# forward arithmetic (shared by tape and no-tape paths)
# ---------------------------------------------------------------------------

def affine_value(x: np.ndarray, w: np.ndarray, b: np.ndarray) -> np.ndarray:
    if x.shape[1] != w.shape[0] or w.shape[1] != b.shape[1] or b.shape[0] != 1:
        raise DimensionError(
            f"affine shapes do not conform: x{x.shape} @ w{w.shape} + b{b.shape}"
        )
    return x @ w + b


def relu_value(x: np.ndarray) -> np.ndarray:
    return np.maximum(x, 0.0)


def feature_max_value(f: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Column-wise max over rows.

    Returns (pooled row vector, witness).  witness[j] is the smallest row
    index attaining the max in column j -- the tie rule that makes the
    subgradient choice deterministic.
    """
    if f.shape[0] < 1:
        raise EmptySetError("feature_max over an empty set of rows")
    witness = np.argmax(f, axis=0)  # np.argmax returns the first (lowest) index
    pooled = f[witness, np.arange(f.shape[1])].reshape(1, -1)
    return pooled, witness


def softmax_xent_value(logits: np.ndarray, y: int) -> tuple[np.ndarray, np.ndarray]:
    """Stable −log softmax(logits)[y].  Returns (loss as 1x1, probs row)."""
    if logits.shape[0] != 1 or logits.shape[1] < 2:
        raise DimensionError(f"logits must be 1xC with C >= 2, got {logits.shape}")
    c = logits.shape[1]
    if not (0 <= y < c):
        raise IndexError(f"class index {y} out of range for {c} classes")
    shifted = logits - logits.max()
    expz = np.exp(shifted)
    total = expz.sum()
    probs = expz / total
    loss = np.log(total) - shifted[0, y]
    return np.asarray(loss, dtype=logits.dtype).reshape(1, 1), probs


# ---------------------------------------------------------------------------
# tape
# ---------------------------------------------------------------------------

@dataclass
class _Node:
    op: str                 # "leaf" | "affine" | "relu" | "feature_max" | "softmax_xent"
    inputs: tuple[int, ...]
    value: np.ndarray
    aux: Any = None         # saved values needed by the adjoint


class Tape:
    """Append-only record of primitive ops, topologically ordered by id."""

    def __init__(self) -> None:
        self.nodes: list[_Node] = []

    def _push(self, node: _Node) -> int:
        self.nodes.append(node)
        return len(self.nodes) - 1

    def leaf(self, value) -> int:
        return self._push(_Node("leaf", (), as_matrix(value)))

    def affine(self, x: int, w: int, b: int) -> int:
        out = affine_value(self.nodes[x].value, self.nodes[w].value, self.nodes[b].value)
        return self._push(_Node("affine", (x, w, b), out))

    def relu(self, x: int) -> int:
        out = relu_value(self.nodes[x].value)
        return self._push(_Node("relu", (x,), out))

    def feature_max(self, f: int) -> int:
        pooled, witness = feature_max_value(self.nodes[f].value)
        return self._push(_Node("feature_max", (f,), pooled, aux=witness))

    def softmax_xent(self, logits: int, y: int) -> int:
        loss, probs = softmax_xent_value(self.nodes[logits].value, y)
        return self._push(_Node("softmax_xent", (logits,), loss, aux=(y, probs)))

    def value(self, nid: int) -> np.ndarray:
        return self.nodes[nid].value

    def witness(self, nid: int) -> np.ndarray:
        node = self.nodes[nid]
        if node.op != "feature_max":
            raise DimensionError(f"node {nid} is {node.op!r}, not feature_max")
        return node.aux

    def leaves(self) -> list[int]:
        return [i for i, n in enumerate(self.nodes) if n.op == "leaf"]

    def replay(self) -> bool:
        """Recompute every non-leaf node from recorded inputs.

        True iff the recomputation is bit-identical to the recorded values
        (the tape determinism invariant).
        """
        for node in self.nodes:
            if node.op == "leaf":
                continue
            vals = [self.nodes[i].value for i in node.inputs]
            if node.op == "affine":
                out = affine_value(*vals)
            elif node.op == "relu":
                out = relu_value(vals[0])
            elif node.op == "feature_max":
                out, _ = feature_max_value(vals[0])
            elif node.op == "softmax_xent":
                out, _ = softmax_xent_value(vals[0], node.aux[0])
            else:  # pragma: no cover - unknown ops cannot be recorded
                raise DimensionError(f"unknown op {node.op!r}")
            if not np.array_equal(out, node.value):
                return False
        return True


def backward(tape: Tape, output: int, keep=()) -> dict[int, np.ndarray]:
    """Reverse accumulation of d(output)/d(leaf) for every leaf.

    ``output`` must be a scalar node (size 1).  Returns a map from leaf
    node id to a gradient of the leaf's shape; leaves the output does not
    depend on get zeros.  Interior node ids listed in ``keep`` are also
    returned with their fully accumulated adjoints (propagation through
    them continues unchanged).
    """
    out_node = tape.nodes[output]
    if out_node.value.size != 1:
        raise DimensionError(
            f"backward requires a scalar output node, got shape {out_node.value.shape}"
        )
    keep = set(keep)
    kept: dict[int, np.ndarray] = {}
    adjoint: dict[int, np.ndarray] = {output: np.ones_like(out_node.value)}
    for nid in range(output, -1, -1):
        g = adjoint.pop(nid, None)
        if g is None:
            continue
        if nid in keep:
            kept[nid] = g
        node = tape.nodes[nid]
        if node.op == "leaf":
            adjoint[nid] = g  # keep: leaves collect, never propagate
            continue
        if node.op == "affine":
            xi, wi, bi = node.inputs
            x = tape.nodes[xi].value
            w = tape.nodes[wi].value
            _accumulate(adjoint, xi, g @ w.T)
            _accumulate(adjoint, wi, x.T @ g)
            _accumulate(adjoint, bi, g.sum(axis=0, keepdims=True))
        elif node.op == "relu":
            (xi,) = node.inputs
            x = tape.nodes[xi].value
            _accumulate(adjoint, xi, g * (x > 0))  # subgradient at 0 is 0
        elif node.op == "feature_max":
            (fi,) = node.inputs
            witness = node.aux
            gf = np.zeros_like(tape.nodes[fi].value)
            gf[witness, np.arange(gf.shape[1])] = g[0]
            _accumulate(adjoint, fi, gf)
        elif node.op == "softmax_xent":
            (li,) = node.inputs
            y, probs = node.aux
            glog = probs.copy()
            glog[0, y] -= 1.0
            _accumulate(adjoint, li, float(g[0, 0]) * glog)
    grads = {}
    for leaf in tape.leaves():
        grads[leaf] = adjoint.get(leaf, np.zeros_like(tape.nodes[leaf].value))
    for nid in keep:
        grads[nid] = kept.get(nid, np.zeros_like(tape.nodes[nid].value))
    return grads


def _accumulate(adjoint: dict[int, np.ndarray], nid: int, g: np.ndarray) -> None:
    if nid in adjoint:
        adjoint[nid] = adjoint[nid] + g
    else:
        adjoint[nid] = g
