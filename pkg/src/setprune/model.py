"""Permutation-invariant set classifier.

The network factors as head(max over elements of point_mlp(row)): every
element passes through the same per-row MLP, a feature-wise max pool
collapses the set, and a small head maps the pooled vector to class
logits.  No operation mixes elements before the pool, which is what
makes replace-by-dominated-embedding behave exactly like removal.

Forward passes and gradient calls are metered on ``model.counter`` so
selection-cost claims can be asserted rather than estimated.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .counters import EvalCounter
from .data import PointSet
from .errors import DataError, DimensionError, FormatError

_SFM_MAGIC = b"SFM1"


@dataclass
class AffineLayer:
    w: np.ndarray  # (fan_in, fan_out)
    b: np.ndarray  # (1, fan_out)

    def __post_init__(self):
        self.w = np.asarray(self.w, dtype=np.float64)
        self.b = np.asarray(self.b, dtype=np.float64)
        if self.w.ndim != 2:
            raise DimensionError(f"weight must be 2-D, got {self.w.shape}")
        if self.b.shape != (1, self.w.shape[1]):
            raise DimensionError(f"bias shape {self.b.shape} does not match weight {self.w.shape}")


@dataclass(frozen=True)
class ForwardRecord:
    features: np.ndarray   # (n, h) per-element feature rows
    pooled: np.ndarray     # (1, h)
    witness: np.ndarray    # (h,) row index achieving each pooled max
    logits: np.ndarray     # (1, C)
    loss: float | None     # cross-entropy when a label was given


def glorot_init(fan_in: int, fan_out: int, rng) -> AffineLayer:
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    w = rng.uniform(-limit, limit, size=(fan_in, fan_out))
    return AffineLayer(w, np.zeros((1, fan_out)))


class SetClassifier:
    """head(max_rows(point_mlp(x))) with ReLU between affines of each stack.

    The last affine of each stack has no ReLU: feature rows may go
    negative (needed for strict dominance by a replacement embedding)
    and logits are unsquashed.
    """

    def __init__(self, point_layers: list[AffineLayer], head_layers: list[AffineLayer]):
        if not point_layers or not head_layers:
            raise DimensionError("need at least one point layer and one head layer")
        for stack in (point_layers, head_layers):
            for prev, nxt in zip(stack, stack[1:]):
                if prev.w.shape[1] != nxt.w.shape[0]:
                    raise DimensionError(
                        f"layer widths do not chain: {prev.w.shape} then {nxt.w.shape}")
        if point_layers[-1].w.shape[1] != head_layers[0].w.shape[0]:
            raise DimensionError(
                f"pooled width {point_layers[-1].w.shape[1]} does not feed head "
                f"input {head_layers[0].w.shape[0]}")
        self.point_layers = point_layers
        self.head_layers = head_layers
        self.counter = EvalCounter()

    @classmethod
    def create(cls, d: int = 3, c: int = 5, point_widths=(64, 64, 128),
               head_widths=(64,), seed: int = 0) -> "SetClassifier":
        rng = np.random.default_rng(seed)
        point_layers, fan_in = [], d
        for width in point_widths:
            point_layers.append(glorot_init(fan_in, width, rng))
            fan_in = width
        head_layers = []
        for width in tuple(head_widths) + (c,):
            head_layers.append(glorot_init(fan_in, width, rng))
            fan_in = width
        return cls(point_layers, head_layers)

    @property
    def d(self) -> int:
        return self.point_layers[0].w.shape[0]

    @property
    def h(self) -> int:
        return self.point_layers[-1].w.shape[1]

    @property
    def c(self) -> int:
        return self.head_layers[-1].w.shape[1]

    def parameters(self) -> list[np.ndarray]:
        out = []
        for layer in self.point_layers + self.head_layers:
            out.append(layer.w)
            out.append(layer.b)
        return out

    # -- untraced forward ---------------------------------------------------

    def _coords(self, x) -> np.ndarray:
        coords = x.coords if isinstance(x, PointSet) else x
        coords = np.asarray(coords, dtype=ad.default_dtype())
        if coords.ndim != 2 or coords.shape[1] != self.d:
            raise DimensionError(
                f"input must be (n, {self.d}), got {coords.shape}")
        return coords

    def _point_features(self, x: np.ndarray) -> np.ndarray:
        f = x
        last = len(self.point_layers) - 1
        for i, layer in enumerate(self.point_layers):
            f = ad.affine_value(f, layer.w, layer.b)
            if i != last:
                f = ad.relu_value(f)
        return f

    def _head_logits(self, pooled: np.ndarray) -> np.ndarray:
        z = pooled
        last = len(self.head_layers) - 1
        for i, layer in enumerate(self.head_layers):
            z = ad.affine_value(z, layer.w, layer.b)
            if i != last:
                z = ad.relu_value(z)
        return z

    def forward(self, x, label: int | None = None) -> ForwardRecord:
        """One metered forward pass; x is a PointSet or an (n, d) array."""
        coords = self._coords(x)
        if label is None and isinstance(x, PointSet) and x.label >= 0:
            label = x.label
        features = self._point_features(coords)
        pooled, witness = ad.feature_max_value(features)
        logits = self._head_logits(pooled)
        loss = None
        if label is not None:
            loss_mat, _ = ad.softmax_xent_value(logits, label)
            loss = float(loss_mat[0, 0])
        self.counter.add_forward()
        return ForwardRecord(features, pooled, witness, logits, loss)

    def predict(self, x) -> int:
        """Argmax class, lowest index on ties."""
        return int(np.argmax(self.forward(x).logits[0]))

    def point_features(self, x) -> np.ndarray:
        """Per-element feature rows g1(x); metered as one forward."""
        return self.forward(x).features

    # -- traced forward + backward ------------------------------------------

    def _trace(self, coords: np.ndarray, label: int):
        """Build the tape; returns (tape, node-id table)."""
        tape = ad.Tape()
        ids = {"x": tape.leaf(coords)}
        f = ids["x"]
        last = len(self.point_layers) - 1
        for i, layer in enumerate(self.point_layers):
            ids[f"pw{i}"] = tape.leaf(layer.w)
            ids[f"pb{i}"] = tape.leaf(layer.b)
            f = tape.affine(f, ids[f"pw{i}"], ids[f"pb{i}"])
            if i != last:
                f = tape.relu(f)
        ids["features"] = f
        z = tape.feature_max(f)
        ids["pooled"] = z
        last = len(self.head_layers) - 1
        for i, layer in enumerate(self.head_layers):
            ids[f"hw{i}"] = tape.leaf(layer.w)
            ids[f"hb{i}"] = tape.leaf(layer.b)
            z = tape.affine(z, ids[f"hw{i}"], ids[f"hb{i}"])
            if i != last:
                z = tape.relu(z)
        ids["logits"] = z
        ids["loss"] = tape.softmax_xent(z, label)
        return tape, ids

    def loss_and_input_gradient(self, x, label: int):
        """(loss, dloss/dcoords): one metered forward plus one backward."""
        coords = self._coords(x)
        tape, ids = self._trace(coords, label)
        grads = ad.backward(tape, ids["loss"])
        self.counter.add_forward()
        self.counter.add_backward()
        return float(tape.value(ids["loss"])[0, 0]), grads[ids["x"]]

    def input_gradient(self, x, label: int) -> np.ndarray:
        return self.loss_and_input_gradient(x, label)[1]

    def loss_and_feature_gradient(self, x, label: int):
        """(loss, features, dloss/dfeatures, witness) in one forward+backward.

        The gradient is taken at the per-element feature rows, before the
        max pool; only witness rows can carry mass.
        """
        coords = self._coords(x)
        tape, ids = self._trace(coords, label)
        grads = ad.backward(tape, ids["loss"], keep={ids["features"]})
        self.counter.add_forward()
        self.counter.add_backward()
        return (float(tape.value(ids["loss"])[0, 0]),
                tape.value(ids["features"]),
                grads[ids["features"]],
                tape.witness(ids["pooled"]))

    def feature_gradient(self, x, label: int) -> np.ndarray:
        return self.loss_and_feature_gradient(x, label)[2]

    def _loss_and_param_gradients(self, coords: np.ndarray, label: int):
        tape, ids = self._trace(coords, label)
        grads = ad.backward(tape, ids["loss"])
        names = [f"p{wb}{i}" for i in range(len(self.point_layers)) for wb in ("w", "b")]
        names += [f"h{wb}{i}" for i in range(len(self.head_layers)) for wb in ("w", "b")]
        self.counter.add_forward()
        self.counter.add_backward()
        return float(tape.value(ids["loss"])[0, 0]), [grads[ids[n]] for n in names]


# ---------------------------------------------------------------------------
# training
# ---------------------------------------------------------------------------

def cast_parameters(model: SetClassifier, dtype) -> SetClassifier:
    """In-place parameter cast so the whole pipeline runs in one precision."""
    for layer in model.point_layers + model.head_layers:
        layer.w = layer.w.astype(dtype)
        layer.b = layer.b.astype(dtype)
    return model


def clone_model(model: SetClassifier) -> SetClassifier:
    """Independent copy with a fresh eval counter; shares no arrays.

    Lets per-sample work run concurrently without counter crosstalk.
    """
    point = [AffineLayer(layer.w.copy(), layer.b.copy()) for layer in model.point_layers]
    head = [AffineLayer(layer.w.copy(), layer.b.copy()) for layer in model.head_layers]
    # AffineLayer coerces to float64 on construction; restore the source dtype.
    return cast_parameters(SetClassifier(point, head), model.point_layers[0].w.dtype)


def evaluate_accuracy(model: SetClassifier, samples) -> float:
    correct = sum(1 for ps in samples if model.predict(ps) == ps.label)
    return correct / len(samples)


def mean_loss(model: SetClassifier, samples) -> float:
    return float(np.mean([model.forward(ps).loss for ps in samples]))


def train(model: SetClassifier, samples, epochs: int = 60, batch: int = 32,
          lr: float = 0.01, momentum: float = 0.9, seed: int = 0,
          jitter: float = 0.0, eval_samples=None, verbose: bool = False):
    """SGD with momentum and cosine-decayed learning rate.

    ``samples`` is any sequence of labeled PointSets.  Deterministic
    given the seed: fixed shuffle order, fixed batch partitions, no
    augmentation unless ``jitter`` > 0 (uniform coordinate noise).
    Returns a per-epoch history of losses and accuracies.
    """
    samples = list(samples)
    if not samples:
        raise DataError("cannot train on an empty dataset")
    for ps in samples:
        if ps.d != model.d:
            raise DataError(f"sample {ps.name!r} has d={ps.d}, model expects {model.d}")
        if ps.label < 0 or ps.label >= model.c:
            raise DataError(f"sample {ps.name!r} label {ps.label} outside [0, {model.c})")
    params = model.parameters()
    velocity = [np.zeros_like(p) for p in params]
    history = []
    for epoch in range(epochs):
        rng = np.random.default_rng([seed, epoch])
        order = rng.permutation(len(samples))
        lr_t = lr * 0.5 * (1.0 + np.cos(np.pi * epoch / max(epochs, 1)))
        epoch_losses = []
        for start in range(0, len(order), batch):
            idx = order[start:start + batch]
            grad_sum = [np.zeros_like(p) for p in params]
            batch_loss = 0.0
            for i in idx:
                ps = samples[i]
                coords = ps.coords
                if jitter > 0:
                    coords = coords + rng.uniform(-jitter, jitter, size=coords.shape)
                loss, grads = model._loss_and_param_gradients(coords, ps.label)
                batch_loss += loss
                for gs, g in zip(grad_sum, grads):
                    gs += g
            scale = 1.0 / len(idx)
            for p, v, gs in zip(params, velocity, grad_sum):
                v *= momentum
                v -= lr_t * scale * gs
                p += v
            epoch_losses.append(batch_loss * scale)
        row = {
            "epoch": epoch,
            "lr": float(lr_t),
            "train_loss": float(np.mean(epoch_losses)),
            "train_acc": evaluate_accuracy(model, samples),
        }
        if eval_samples is not None:
            row["test_acc"] = evaluate_accuracy(model, eval_samples)
        history.append(row)
        if verbose:
            msg = (f"epoch {epoch:3d}  lr {row['lr']:.5f}  "
                   f"loss {row['train_loss']:.4f}  train {row['train_acc']:.3f}")
            if "test_acc" in row:
                msg += f"  test {row['test_acc']:.3f}"
            print(msg, flush=True)
    return history


# ---------------------------------------------------------------------------
# checkpoint io
# ---------------------------------------------------------------------------

def save_model(path, model: SetClassifier) -> None:
    """magic "SFM1" | u32 matrix_count | u32 point_matrix_count | u32 d |
    u32 h | u32 C | per matrix: u32 rows, u32 cols, f64 LE row-major.

    Matrices are ordered point stack then head stack, weight before bias.
    ``point_matrix_count`` tells the loader where the head stack starts.
    """
    mats = []
    for layer in model.point_layers + model.head_layers:
        mats.append(layer.w)
        mats.append(layer.b)
    parts = [_SFM_MAGIC, struct.pack("<IIIII", len(mats), 2 * len(model.point_layers),
                                     model.d, model.h, model.c)]
    for m in mats:
        parts.append(struct.pack("<II", m.shape[0], m.shape[1]))
        parts.append(m.astype("<f8").tobytes(order="C"))
    Path(path).write_bytes(b"".join(parts))


def load_model(path) -> SetClassifier:
    raw = Path(path).read_bytes()
    if len(raw) < 24 or raw[:4] != _SFM_MAGIC:
        raise FormatError(f"{path}: not an SFM1 checkpoint")
    matrix_count, point_count, d, h, c = struct.unpack("<IIIII", raw[4:24])
    if matrix_count % 2 or point_count % 2 or not (2 <= point_count <= matrix_count - 2):
        raise FormatError(f"{path}: implausible matrix counts {matrix_count}/{point_count}")
    offset = 24
    mats = []
    for _ in range(matrix_count):
        if offset + 8 > len(raw):
            raise FormatError(f"{path}: truncated checkpoint (matrix header)")
        rows, cols = struct.unpack("<II", raw[offset:offset + 8])
        offset += 8
        nbytes = 8 * rows * cols
        if offset + nbytes > len(raw):
            raise FormatError(f"{path}: truncated checkpoint (matrix data)")
        mats.append(np.frombuffer(raw, dtype="<f8", count=rows * cols,
                                  offset=offset).reshape(rows, cols).copy())
        offset += nbytes
    if offset != len(raw):
        raise FormatError(f"{path}: {len(raw) - offset} trailing bytes")
    point_layers = [AffineLayer(mats[i], mats[i + 1]) for i in range(0, point_count, 2)]
    head_layers = [AffineLayer(mats[i], mats[i + 1])
                   for i in range(point_count, matrix_count, 2)]
    model = SetClassifier(point_layers, head_layers)
    if (model.d, model.h, model.c) != (d, h, c):
        raise FormatError(
            f"{path}: header says (d,h,C)=({d},{h},{c}) but matrices give "
            f"({model.d},{model.h},{model.c})")
    return model
