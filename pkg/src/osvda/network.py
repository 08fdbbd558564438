"""Model parameters, forward passes and a small reverse-mode tape.

Layout (row-vector convention, ``y = x @ W + b``):

    aggregator  concat(c clips) (c*D) -> H -> F      ReLU between layers
    projection  F -> H -> P                          ReLU between layers
    classifier  F -> K                               affine
    open clf    F -> K + 1                           affine

All arithmetic is float64.
"""

from __future__ import annotations

import json
from collections import OrderedDict
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np


@dataclass(frozen=True)
class ModelDims:
    D: int = 16
    c: int = 3
    H: int = 64
    F: int = 64
    P: int = 32
    K: int = 6

    def __post_init__(self):
        for name, v in asdict(self).items():
            if int(v) < 1:
                raise ValueError(f"{name} must be >= 1, got {v}")

    @property
    def input_dim(self) -> int:
        return self.c * self.D

    def shapes(self) -> "OrderedDict[str, tuple]":
        cd, H, F, P, K = self.input_dim, self.H, self.F, self.P, self.K
        return OrderedDict(
            [
                ("agg.w1", (cd, H)),
                ("agg.b1", (H,)),
                ("agg.w2", (H, F)),
                ("agg.b2", (F,)),
                ("proj.w1", (F, H)),
                ("proj.b1", (H,)),
                ("proj.w2", (H, P)),
                ("proj.b2", (P,)),
                ("cls.w", (F, K)),
                ("cls.b", (K,)),
                ("open.w", (F, K + 1)),
                ("open.b", (K + 1,)),
            ]
        )


class ModelParams:
    """Named float64 arrays in a fixed order; also used for gradients
    and optimizer velocity."""

    def __init__(self, dims: ModelDims, arrays: dict):
        self.dims = dims
        self.arrays = OrderedDict()
        for name, shape in dims.shapes().items():
            arr = np.asarray(arrays[name], dtype=np.float64)
            if arr.shape != shape:
                raise ValueError(f"{name}: shape {arr.shape}, expected {shape}")
            self.arrays[name] = arr

    def __getitem__(self, name) -> np.ndarray:
        return self.arrays[name]

    def __setitem__(self, name, value):
        self.arrays[name][...] = value

    def names(self):
        return list(self.arrays)

    @classmethod
    def zeros_like(cls, other: "ModelParams") -> "ModelParams":
        return cls(other.dims, {k: np.zeros_like(v) for k, v in other.arrays.items()})

    def copy(self) -> "ModelParams":
        return ModelParams(self.dims, {k: v.copy() for k, v in self.arrays.items()})

    @property
    def size(self) -> int:
        return sum(v.size for v in self.arrays.values())

    def flatten(self) -> np.ndarray:
        return np.concatenate([v.ravel() for v in self.arrays.values()])

    @classmethod
    def unflatten(cls, dims: ModelDims, flat) -> "ModelParams":
        flat = np.asarray(flat, dtype=np.float64)
        arrays, off = {}, 0
        for name, shape in dims.shapes().items():
            n = int(np.prod(shape))
            arrays[name] = flat[off : off + n].reshape(shape).copy()
            off += n
        if off != flat.size:
            raise ValueError(f"flat vector has {flat.size} entries, expected {off}")
        return cls(dims, arrays)

    def all_finite(self) -> bool:
        return all(np.all(np.isfinite(v)) for v in self.arrays.values())

    def __eq__(self, other):
        if not isinstance(other, ModelParams):
            return NotImplemented
        return self.dims == other.dims and all(
            np.array_equal(self.arrays[k], other.arrays[k]) for k in self.arrays
        )


def init_params(dims: ModelDims, seed: int) -> ModelParams:
    """Gaussian weights with std 1/sqrt(fan_in), zero biases."""
    rng = np.random.default_rng(seed)
    arrays = {}
    for name, shape in dims.shapes().items():
        if len(shape) == 2:
            arrays[name] = rng.standard_normal(shape) / np.sqrt(shape[0])
        else:
            arrays[name] = np.zeros(shape)
    return ModelParams(dims, arrays)


def warm_start_open_classifier(params: ModelParams) -> None:
    """Copy C into the first K outputs of C'; zero the unknown output."""
    K = params.dims.K
    params["open.w"] = 0.0
    params["open.b"] = 0.0
    params.arrays["open.w"][:, :K] = params["cls.w"]
    params.arrays["open.b"][:K] = params["cls.b"]


# ---------------------------------------------------------------------------
# checkpoints: flat float64 array + JSON shape descriptor
# ---------------------------------------------------------------------------

def save_params(params: ModelParams, path) -> tuple[Path, Path]:
    """Write ``<path>.npy`` and ``<path>.json``; returns both paths."""
    base = Path(path)
    npy, meta = base.with_suffix(".npy"), base.with_suffix(".json")
    with npy.open("wb") as fh:
        np.save(fh, params.flatten(), allow_pickle=False)
    descriptor = {
        "dims": asdict(params.dims),
        "layout": [[name, list(shape)] for name, shape in params.dims.shapes().items()],
        "dtype": "float64",
    }
    meta.write_text(json.dumps(descriptor, indent=2) + "\n")
    return npy, meta


def load_params(path) -> ModelParams:
    base = Path(path)
    meta = json.loads(base.with_suffix(".json").read_text())
    dims = ModelDims(**meta["dims"])
    expected = [[n, list(s)] for n, s in dims.shapes().items()]
    if meta.get("layout") != expected:
        raise ValueError(f"{base}: parameter layout does not match dims")
    flat = np.load(base.with_suffix(".npy"), allow_pickle=False)
    return ModelParams.unflatten(dims, flat)


# ---------------------------------------------------------------------------
# forward passes (batched, no recording)
# ---------------------------------------------------------------------------

def _as_input(params: ModelParams, x) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    d = params.dims
    if x.ndim == 2:
        x = x[None]
    if x.shape[1:] != (d.c, d.D):
        raise ValueError(f"clip stack shape {x.shape[1:]} does not match (c, D) = ({d.c}, {d.D})")
    return x.reshape(x.shape[0], d.input_dim)


def _check_feature(params, h, width, what):
    h = np.asarray(h, dtype=np.float64)
    if h.shape[-1] != width:
        raise ValueError(f"{what} expects vectors of dim {width}, got {h.shape[-1]}")
    return h


def aggregate_batch(params: ModelParams, x) -> np.ndarray:
    """Video-level features for clip stacks ``x`` of shape (n, c, D)."""
    flat = _as_input(params, x)
    a = np.maximum(flat @ params["agg.w1"] + params["agg.b1"], 0.0)
    return a @ params["agg.w2"] + params["agg.b2"]


def aggregate(params: ModelParams, sample) -> np.ndarray:
    clips = getattr(sample, "clips", sample)
    return aggregate_batch(params, np.asarray(clips)[None])[0]


def project(params: ModelParams, h) -> np.ndarray:
    h = _check_feature(params, h, params.dims.F, "project")
    a = np.maximum(h @ params["proj.w1"] + params["proj.b1"], 0.0)
    return a @ params["proj.w2"] + params["proj.b2"]


def classify(params: ModelParams, h) -> np.ndarray:
    h = _check_feature(params, h, params.dims.F, "classify")
    return h @ params["cls.w"] + params["cls.b"]


def classify_open(params: ModelParams, h) -> np.ndarray:
    h = _check_feature(params, h, params.dims.F, "classify_open")
    return h @ params["open.w"] + params["open.b"]


def softmax(logits) -> np.ndarray:
    z = np.asarray(logits, dtype=np.float64)
    e = np.exp(z - z.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


# ---------------------------------------------------------------------------
# reverse mode
# ---------------------------------------------------------------------------

class Node:
    """A recorded intermediate. Loss code adds into ``grad``."""

    __slots__ = ("value", "grad", "tape")

    def __init__(self, value, tape):
        self.value = value
        self.grad = np.zeros_like(value)
        self.tape = tape

    @property
    def shape(self):
        return self.value.shape

    def __getitem__(self, rows) -> "Node":
        return self.tape.take(self, rows)


class Tape:
    """Records forward ops over one :class:`ModelParams` and replays them
    backwards.

    Usage::

        tape = Tape(params)
        h = tape.aggregate(x)            # x: (n, c, D) array or Node
        z = tape.project(h[:8])
        loss, dz = some_loss_with_grad(z.value)
        z.grad += dz
        grads = tape.backward()          # ModelParams-shaped gradients

    Inputs passed as a Node (see :meth:`input`) receive gradients too.
    """

    def __init__(self, params: ModelParams):
        self.params = params
        self._ops = []
        # smallest |pre-activation| seen at any ReLU; used by gradient
        # checks to avoid sampling configurations sitting on a kink
        self.min_relu_margin = np.inf

    def input(self, x) -> Node:
        return Node(np.array(x, dtype=np.float64), self)

    def _value(self, x):
        return x.value if isinstance(x, Node) else np.asarray(x, dtype=np.float64)

    def _mlp2(self, prefix, x, flat):
        p = self.params
        pre = flat @ p[prefix + ".w1"] + p[prefix + ".b1"]
        if pre.size:
            self.min_relu_margin = min(self.min_relu_margin, float(np.abs(pre).min()))
        a = np.maximum(pre, 0.0)
        out = Node(a @ p[prefix + ".w2"] + p[prefix + ".b2"], self)
        self._ops.append(("mlp2", prefix, x, flat, pre, a, out))
        return out

    def aggregate(self, x) -> Node:
        flat = _as_input(self.params, self._value(x))
        return self._mlp2("agg", x, flat)

    def project(self, h) -> Node:
        flat = _check_feature(self.params, self._value(h), self.params.dims.F, "project")
        return self._mlp2("proj", h, flat)

    def _affine(self, prefix, h):
        flat = _check_feature(self.params, self._value(h), self.params.dims.F, prefix)
        out = Node(flat @ self.params[prefix + ".w"] + self.params[prefix + ".b"], self)
        self._ops.append(("affine", prefix, h, flat, None, None, out))
        return out

    def classify(self, h) -> Node:
        return self._affine("cls", h)

    def classify_open(self, h) -> Node:
        return self._affine("open", h)

    def take(self, node: Node, rows) -> Node:
        out = Node(node.value[rows], self)
        self._ops.append(("take", rows, node, None, None, None, out))
        return out

    def concat(self, nodes) -> Node:
        out = Node(np.concatenate([n.value for n in nodes]), self)
        self._ops.append(("concat", None, list(nodes), None, None, None, out))
        return out

    def backward(self) -> ModelParams:
        if not self._ops:
            raise RuntimeError("backward called without a recorded forward pass")
        p = self.params
        grads = ModelParams.zeros_like(p)
        g = grads.arrays
        for kind, prefix, x, flat, pre, a, out in reversed(self._ops):
            gout = out.grad
            if kind == "mlp2":
                g[prefix + ".w2"] += a.T @ gout
                g[prefix + ".b2"] += gout.sum(axis=0)
                ga = (gout @ p[prefix + ".w2"].T) * (pre > 0)
                g[prefix + ".w1"] += flat.T @ ga
                g[prefix + ".b1"] += ga.sum(axis=0)
                if isinstance(x, Node):
                    x.grad += (ga @ p[prefix + ".w1"].T).reshape(x.value.shape)
            elif kind == "affine":
                g[prefix + ".w"] += flat.T @ gout
                g[prefix + ".b"] += gout.sum(axis=0)
                if isinstance(x, Node):
                    x.grad += gout @ p[prefix + ".w"].T
            elif kind == "take":
                if isinstance(prefix, slice):
                    x.grad[prefix] += gout
                else:
                    np.add.at(x.grad, prefix, gout)
            elif kind == "concat":
                off = 0
                for n in x:
                    k = n.value.shape[0]
                    n.grad += gout[off : off + k]
                    off += k
        return grads


def backward(params: ModelParams, tape: Tape | None) -> ModelParams:
    """Gradients of the scalar whose upstream gradients were seeded into
    ``tape``'s nodes."""
    if tape is None:
        raise RuntimeError("backward called without a recorded forward pass")
    if tape.params is not params:
        raise ValueError("tape was recorded against different parameters")
    return tape.backward()
