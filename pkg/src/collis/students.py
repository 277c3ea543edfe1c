"""Tiny per-representation classifiers with hand-written gradients.

A student sees each point through its own representation: five raw point
channels plus the six grid channels of the cell the point lands in. The
classifier is affine -> tanh -> affine -> softmax, trained with momentum SGD.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.spatial import cKDTree

from .data import PointCloud
from .losses import softmax
from .representations import ReprConfig, ReprMapping, cell_features, project

N_POINT_CHANNELS = 5
MOMENTUM = 0.9
PARAM_NAMES = ("W1", "b1", "W2", "b2")

_CKPT_MAGIC = b"CKPT"
_CKPT_VERSION = 1


class NonFiniteError(FloatingPointError):
    """Raised when gradients or parameters stop being finite."""


@dataclass(frozen=True)
class FeatureSpec:
    name: str
    representation: ReprConfig
    coord_scale: float = 10.0

    @property
    def dim(self) -> int:
        return N_POINT_CHANNELS + 6


def point_features(cloud: PointCloud, spec: FeatureSpec) -> tuple[np.ndarray, ReprMapping]:
    """(M x 11) feature matrix and the projection it was built from."""
    mapping = project(cloud, spec.representation)
    pts = cloud.points.astype(np.float64)
    rho = np.linalg.norm(pts[:, :3], axis=1, keepdims=True)
    x = np.hstack([
        pts[:, :3] / spec.coord_scale,
        pts[:, 3:4],
        rho / spec.coord_scale,
        cell_features(cloud, mapping, spec.coord_scale),
    ])
    return x, mapping


@dataclass(eq=False)
class StudentOutput:
    logits: np.ndarray
    probabilities: np.ndarray
    predictions: np.ndarray
    confidence: np.ndarray
    features: np.ndarray
    hidden: np.ndarray
    in_bounds: np.ndarray


@dataclass(eq=False)
class StudentModel:
    name: str
    spec: FeatureSpec
    W1: np.ndarray
    b1: np.ndarray
    W2: np.ndarray
    b2: np.ndarray
    momentum: dict[str, np.ndarray] = field(default_factory=dict)

    @classmethod
    def init(cls, spec: FeatureSpec, num_classes: int, hidden: int = 32, seed=None) -> StudentModel:
        rng = np.random.default_rng(seed)
        f = spec.dim
        a1 = np.sqrt(1.0 / f)
        a2 = np.sqrt(1.0 / hidden)
        return cls(
            spec.name,
            spec,
            rng.uniform(-a1, a1, (f, hidden)),
            rng.uniform(-a1, a1, hidden),
            rng.uniform(-a2, a2, (hidden, num_classes)),
            rng.uniform(-a2, a2, num_classes),
        )

    @property
    def num_classes(self) -> int:
        return self.W2.shape[1]

    @property
    def hidden_size(self) -> int:
        return self.W1.shape[1]

    def params(self) -> dict[str, np.ndarray]:
        return {k: getattr(self, k) for k in PARAM_NAMES}

    def copy(self) -> StudentModel:
        return StudentModel(
            self.name, self.spec, *(getattr(self, k).copy() for k in PARAM_NAMES),
            momentum={k: v.copy() for k, v in self.momentum.items()},
        )


def forward_features(student: StudentModel, x: np.ndarray, in_bounds: np.ndarray) -> StudentOutput:
    hidden = np.tanh(x @ student.W1 + student.b1)
    logits = hidden @ student.W2 + student.b2
    probs = softmax(logits)
    return StudentOutput(
        logits, probs, probs.argmax(axis=1), probs.max(axis=1), x, hidden, in_bounds
    )


def forward(student: StudentModel, cloud: PointCloud) -> StudentOutput:
    if cloud.n == 0:
        raise ValueError("forward needs a non-empty cloud")
    x, mapping = point_features(cloud, student.spec)
    return forward_features(student, x, mapping.in_bounds)


def forward_many(student: StudentModel, clouds: list[PointCloud]) -> StudentOutput:
    """Forward several clouds (each projected on its own) as one stacked batch."""
    feats, inb = [], []
    for c in clouds:
        x, mapping = point_features(c, student.spec)
        feats.append(x)
        inb.append(mapping.in_bounds)
    return forward_features(student, np.vstack(feats), np.concatenate(inb))


def backward(student: StudentModel, output: StudentOutput, grad_logits: np.ndarray) -> dict[str, np.ndarray]:
    """Exact parameter gradients given dL/dlogits for the batch in `output`."""
    grad_logits = np.asarray(grad_logits, dtype=np.float64)
    if grad_logits.shape != output.logits.shape:
        raise ValueError(f"gradient shape {grad_logits.shape} != logits shape {output.logits.shape}")
    d_hidden = grad_logits @ student.W2.T
    d_pre = d_hidden * (1.0 - output.hidden**2)
    return {
        "W1": output.features.T @ d_pre,
        "b1": d_pre.sum(axis=0),
        "W2": output.hidden.T @ grad_logits,
        "b2": grad_logits.sum(axis=0),
    }


def step(student: StudentModel, grads: dict[str, np.ndarray], lr: float) -> None:
    """In-place momentum SGD: buf = 0.9 * buf + g; p -= lr * buf."""
    for k in PARAM_NAMES:
        if not np.all(np.isfinite(grads[k])):
            raise NonFiniteError(f"non-finite gradient for {student.name}.{k}")
    for k in PARAM_NAMES:
        buf = student.momentum.get(k)
        buf = grads[k].copy() if buf is None else MOMENTUM * buf + grads[k]
        student.momentum[k] = buf
        setattr(student, k, getattr(student, k) - lr * buf)
        if not np.all(np.isfinite(getattr(student, k))):
            raise NonFiniteError(f"parameter {student.name}.{k} became non-finite")


def predict(student: StudentModel, cloud: PointCloud) -> StudentOutput:
    """Forward pass where out-of-bounds points copy the output of the nearest in-bounds point."""
    out = forward(student, cloud)
    oob = ~out.in_bounds
    if oob.any() and out.in_bounds.any():
        inb = np.flatnonzero(out.in_bounds)
        tree = cKDTree(cloud.xyz[inb])
        _, nn = tree.query(cloud.xyz[oob])
        src = inb[nn]
        for arr in (out.logits, out.probabilities, out.predictions, out.confidence):
            arr[oob] = arr[src]
    return out


def save_checkpoint(student: StudentModel, path: str | Path) -> None:
    name = student.name.encode()
    f, h = student.W1.shape
    k = student.W2.shape[1]
    with open(path, "wb") as fh:
        fh.write(struct.pack("<4sHH", _CKPT_MAGIC, _CKPT_VERSION, len(name)))
        fh.write(name)
        fh.write(struct.pack("<III", f, h, k))
        for p in PARAM_NAMES:
            fh.write(np.ascontiguousarray(getattr(student, p), dtype="<f8").tobytes())


def load_checkpoint(path: str | Path, spec: FeatureSpec) -> StudentModel:
    data = Path(path).read_bytes()
    magic, version, n = struct.unpack_from("<4sHH", data)
    if magic != _CKPT_MAGIC or version != _CKPT_VERSION:
        raise ValueError(f"{path}: not a checkpoint file")
    off = 8
    name = data[off: off + n].decode()
    off += n
    f, h, k = struct.unpack_from("<III", data, off)
    off += 12
    if f != spec.dim:
        raise ValueError(f"{path}: feature dim {f} != {spec.dim}")
    shapes = {"W1": (f, h), "b1": (h,), "W2": (h, k), "b2": (k,)}
    params = {}
    for p in PARAM_NAMES:
        size = int(np.prod(shapes[p]))
        params[p] = np.frombuffer(data, "<f8", size, off).reshape(shapes[p]).astype(np.float64)
        off += 8 * size
    if off != len(data):
        raise ValueError(f"{path}: trailing bytes in checkpoint")
    return StudentModel(name, spec, **params)
