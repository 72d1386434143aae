"""Forward operators, measurement synthesis and toy datasets.

Linear operators other than masks are stored as dense matrices and applied
with one ``matmul``, which keeps them differentiable for free.  A mask may be
a single ``(d,)`` pattern or a ``(B, d)`` stack with one pattern per batch row.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .tensorcore import tensor as T
from .tensorcore.container import read_container, write_container
from .tensorcore.tensor import Tensor

KINDS = ("identity", "mask", "blur", "downsample", "matrix", "composite")
DATASET_KINDS = ("gauss2d", "mixture2d", "moons", "blobs8x8", "sphere_field")


@dataclass
class ForwardOperator:
    kind: str
    in_dim: int
    out_dim: int
    mask: np.ndarray | None = None
    matrix: np.ndarray | None = None
    parts: tuple["ForwardOperator", ...] = ()
    spec: str = ""

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown operator kind {self.kind!r}")

    @property
    def is_linear(self) -> bool:
        if self.kind == "composite":
            return all(p.is_linear for p in self.parts)
        return True

    def apply(self, x):
        """``A(x)`` for ``x`` of shape ``(d,)`` or ``(B, d)``; arrays or tensors."""
        shape = x.shape if isinstance(x, Tensor) else np.shape(x)
        if shape[-1] != self.in_dim:
            raise ValueError(f"operator expects dim {self.in_dim}, got {shape[-1]}")
        if self.kind == "identity":
            return x
        if self.kind == "mask":
            if isinstance(x, Tensor):
                return T.mul(x, self.mask)
            return np.asarray(x) * self.mask
        if self.kind == "composite":
            for p in self.parts:
                x = p.apply(x)
            return x
        if isinstance(x, Tensor):
            return T.matmul(x, self.matrix.T)
        return np.asarray(x) @ self.matrix.T

    def dense(self) -> np.ndarray:
        """Matrix form of a linear operator (single mask pattern only)."""
        if self.kind == "identity":
            return np.eye(self.in_dim)
        if self.kind == "mask":
            if self.mask.ndim != 1:
                raise ValueError("dense() needs a single mask pattern")
            return np.diag(self.mask)
        if self.kind == "composite":
            out = np.eye(self.in_dim)
            for p in self.parts:
                out = p.dense() @ out
            return out
        return self.matrix

    def rows(self, idx) -> "ForwardOperator":
        """Operator restricted to batch rows ``idx`` (only masks vary per row)."""
        if self.kind == "mask" and self.mask.ndim == 2:
            return ForwardOperator("mask", self.in_dim, self.out_dim, mask=self.mask[idx], spec=self.spec)
        return self


# ---------------------------------------------------------------- constructors

def identity(d: int) -> ForwardOperator:
    return ForwardOperator("identity", d, d, spec="id")


def mask_operator(mask) -> ForwardOperator:
    mask = np.asarray(mask, dtype=np.float64)
    if not np.all((mask == 0) | (mask == 1)):
        raise ValueError("mask entries must be 0 or 1")
    d = mask.shape[-1]
    return ForwardOperator("mask", d, d, mask=mask, spec="mask")


def random_mask(d: int, p: float, rng: np.random.Generator) -> np.ndarray:
    """Binary mask hiding a fraction ``p`` of entries; ``ceil((1-p) d)`` stay observed."""
    if not 0.0 <= p <= 1.0:
        raise ValueError("mask fraction must lie in [0, 1]")
    n_obs = int(math.ceil(round((1.0 - p) * d, 9)))
    mask = np.zeros(d)
    mask[rng.permutation(d)[:n_obs]] = 1.0
    return mask


def gaussian_kernel_1d(sigma: float) -> np.ndarray:
    radius = max(int(math.ceil(2.0 * sigma)), 1)
    u = np.arange(-radius, radius + 1, dtype=np.float64)
    k = np.exp(-0.5 * (u / sigma) ** 2)
    return k / k.sum()


def _circulant(n: int, kernel: np.ndarray) -> np.ndarray:
    r = len(kernel) // 2
    m = np.zeros((n, n))
    for i in range(n):
        for j, w in enumerate(kernel):
            m[i, (i + j - r) % n] += w
    return m


def blur_operator(shape: Sequence[int], sigma: float) -> ForwardOperator:
    """Circular convolution with a normalized Gaussian truncated at 2 sigma."""
    if sigma <= 0:
        raise ValueError("blur sigma must be positive")
    k = gaussian_kernel_1d(sigma)
    shape = tuple(shape)
    if len(shape) == 1:
        mat = _circulant(shape[0], k)
    elif len(shape) == 2:
        mat = np.kron(_circulant(shape[0], k), _circulant(shape[1], k))
    else:
        raise ValueError("blur supports 1D or 2D signals")
    d = int(np.prod(shape))
    return ForwardOperator("blur", d, d, matrix=mat, spec=f"blur:sigma={sigma:g}")


def _pool(n: int, f: int) -> np.ndarray:
    if n % f:
        raise ValueError(f"size {n} not divisible by factor {f}")
    m = np.zeros((n // f, n))
    for i in range(n // f):
        m[i, i * f:(i + 1) * f] = 1.0 / f
    return m


def downsample_operator(shape: Sequence[int], factor: int) -> ForwardOperator:
    """Non-overlapping mean pooling by ``factor`` along every axis."""
    shape = tuple(shape)
    if len(shape) == 1:
        mat = _pool(shape[0], factor)
    elif len(shape) == 2:
        mat = np.kron(_pool(shape[0], factor), _pool(shape[1], factor))
    else:
        raise ValueError("downsample supports 1D or 2D signals")
    return ForwardOperator("downsample", mat.shape[1], mat.shape[0], matrix=mat, spec=f"down:f={factor}")


def matrix_operator(a) -> ForwardOperator:
    a = np.atleast_2d(np.asarray(a, dtype=np.float64))
    return ForwardOperator("matrix", a.shape[1], a.shape[0], matrix=a, spec="matrix")


def composite(*ops: ForwardOperator) -> ForwardOperator:
    for a, b in zip(ops[:-1], ops[1:]):
        if a.out_dim != b.in_dim:
            raise ValueError("composite: dims do not chain")
    return ForwardOperator("composite", ops[0].in_dim, ops[-1].out_dim, parts=tuple(ops),
                           spec="+".join(o.spec for o in ops))


@dataclass
class OperatorFactory:
    """Parsed operator spec; :meth:`sample` yields the operator for one measurement.

    Masks are drawn fresh per measurement, with the hidden fraction uniform
    on ``[p_min, p_max]``.
    """

    spec: str
    shape: tuple[int, ...]
    kind: str
    p_min: float = 0.0
    p_max: float = 0.0
    fixed: ForwardOperator | None = None

    @property
    def dim(self) -> int:
        return int(np.prod(self.shape))

    def sample(self, rng: np.random.Generator) -> ForwardOperator:
        if self.kind != "mask":
            return self.fixed
        p = self.p_min if self.p_max == self.p_min else rng.uniform(self.p_min, self.p_max)
        op = mask_operator(random_mask(self.dim, p, rng))
        op.spec = self.spec
        return op


def parse_operator(spec: str, shape: Sequence[int] | int) -> OperatorFactory:
    """Parse ``id``, ``mask:p=0.3``, ``mask:p=0.3-0.6``, ``blur:sigma=1.0`` or ``down:f=2``."""
    shape = (shape,) if isinstance(shape, int) else tuple(shape)
    d = int(np.prod(shape))
    name, _, rest = spec.strip().partition(":")
    args = {}
    for item in filter(None, rest.split(",")):
        k, _, v = item.partition("=")
        args[k.strip()] = v.strip()
    if name == "id":
        return OperatorFactory(spec, shape, "identity", fixed=identity(d))
    if name == "mask":
        p = args.get("p", "0.3")
        lo, _, hi = p.partition("-")
        return OperatorFactory(spec, shape, "mask", float(lo), float(hi or lo))
    if name == "blur":
        return OperatorFactory(spec, shape, "blur", fixed=blur_operator(shape, float(args.get("sigma", 1.0))))
    if name == "down":
        return OperatorFactory(spec, shape, "downsample", fixed=downsample_operator(shape, int(args.get("f", 2))))
    raise ValueError(f"cannot parse operator spec {spec!r}")


# ---------------------------------------------------------------- measurements

@dataclass
class Measurement:
    """One inverse-problem instance.  Never carries the ground-truth signal."""

    y: np.ndarray
    op: ForwardOperator | None
    sigma_y: float
    id: int = 0

    @property
    def blind(self) -> bool:
        return self.op is None


def measure(op: ForwardOperator, x, sigma_y: float, rng: np.random.Generator, id: int = 0) -> Measurement:
    """``y = A(x) + sigma_y * noise``.

    For masks the noise is applied to observed entries only, so hidden entries
    of ``y`` are exactly zero.
    """
    if sigma_y < 0:
        raise ValueError("sigma_y must be non-negative")
    x = np.asarray(x, dtype=np.float64)
    if op.kind == "mask":
        y = op.mask * (x + sigma_y * rng.standard_normal(x.shape))
    else:
        ax = op.apply(x)
        y = ax + sigma_y * rng.standard_normal(np.shape(ax))
    return Measurement(y, op, float(sigma_y), id)


@dataclass
class MeasurementSet:
    """Stacked measurements sharing one operator family and noise level."""

    y: np.ndarray
    sigma_y: float
    op_spec: str
    in_dim: int
    masks: np.ndarray | None = None
    matrix: np.ndarray | None = None
    ids: np.ndarray = field(default_factory=lambda: np.zeros(0))

    def __post_init__(self):
        self.y = np.atleast_2d(np.asarray(self.y, dtype=np.float64))
        if self.ids.size == 0:
            self.ids = np.arange(len(self.y), dtype=np.float64)

    def __len__(self) -> int:
        return self.y.shape[0]

    def operator(self, idx=None) -> ForwardOperator:
        if self.masks is not None:
            m = self.masks if idx is None else self.masks[idx]
            op = mask_operator(m)
            op.spec = self.op_spec
            return op
        if self.matrix is None:
            return identity(self.in_dim)
        op = matrix_operator(self.matrix)
        op.spec = self.op_spec
        return op

    def subset(self, idx) -> "MeasurementSet":
        return MeasurementSet(self.y[idx], self.sigma_y, self.op_spec, self.in_dim,
                              None if self.masks is None else self.masks[idx],
                              self.matrix, self.ids[idx])

    def item(self, i: int) -> Measurement:
        return Measurement(self.y[i], self.operator(i), self.sigma_y, int(self.ids[i]))

    def to_tensors(self) -> dict[str, np.ndarray]:
        out = {
            "y": self.y,
            "sigma_y": np.array([self.sigma_y]),
            "in_dim": np.array([float(self.in_dim)]),
            "id": self.ids,
            f"op={self.op_spec}": np.array([0.0]),
        }
        if self.masks is not None:
            out["mask"] = self.masks
        if self.matrix is not None:
            out["op_matrix"] = self.matrix
        return out

    @classmethod
    def from_tensors(cls, data: dict[str, np.ndarray]) -> "MeasurementSet":
        spec = next((k[3:] for k in data if k.startswith("op=")), "id")
        return cls(data["y"], float(data["sigma_y"][0]), spec, int(data["in_dim"][0]),
                   data.get("mask"), data.get("op_matrix"), data.get("id", np.zeros(0)))


def measure_dataset(factory_or_op, xs, sigma_y: float, rng: np.random.Generator) -> MeasurementSet:
    """Measure every row of ``xs``; masks are redrawn per row."""
    xs = np.atleast_2d(np.asarray(xs, dtype=np.float64))
    ys, masks = [], []
    for i, x in enumerate(xs):
        op = factory_or_op.sample(rng) if isinstance(factory_or_op, OperatorFactory) else factory_or_op
        m = measure(op, x, sigma_y, rng, i)
        ys.append(m.y)
        if op.kind == "mask":
            masks.append(np.broadcast_to(op.mask, x.shape))
    op0 = factory_or_op.fixed if isinstance(factory_or_op, OperatorFactory) else factory_or_op
    spec = factory_or_op.spec
    matrix = None
    if op0 is not None and op0.kind not in ("identity", "mask"):
        matrix = op0.dense()
    return MeasurementSet(np.stack(ys), sigma_y, spec, xs.shape[1],
                          np.stack(masks) if masks else None, matrix)


def save_measurements(path, mset: MeasurementSet, truth: np.ndarray | None = None) -> None:
    """Write a measurement container; ``truth`` only for evaluation splits."""
    tensors = mset.to_tensors()
    if truth is not None:
        tensors["x"] = np.atleast_2d(truth)
    write_container(path, tensors)


def load_measurements(path) -> tuple[MeasurementSet, np.ndarray | None]:
    data = read_container(path)
    return MeasurementSet.from_tensors(data), data.get("x")


# ---------------------------------------------------------------- datasets

@dataclass
class PointCloudSignal:
    values: np.ndarray
    coords: np.ndarray | None = None

    def __post_init__(self):
        self.values = np.atleast_2d(np.asarray(self.values, dtype=np.float64))
        if not np.isfinite(self.values).all():
            raise ValueError("point-cloud values must be finite")

    @property
    def V(self) -> int:
        return self.values.shape[0]

    @property
    def C(self) -> int:
        return self.values.shape[1]

    def flat(self) -> np.ndarray:
        return self.values.reshape(-1)

    @classmethod
    def from_flat(cls, v, channels: int = 1, coords=None) -> "PointCloudSignal":
        v = np.asarray(v, dtype=np.float64).reshape(-1)
        if v.size % channels:
            raise ValueError("length not divisible by channel count")
        return cls(v.reshape(-1, channels), coords)


def _blobs(n: int, rng: np.random.Generator, side: int = 8) -> np.ndarray:
    yy, xx = np.mgrid[0:side, 0:side].astype(np.float64)
    out = np.empty((n, side * side))
    for i in range(n):
        img = np.zeros((side, side))
        for _ in range(rng.integers(1, 3)):
            cy, cx = rng.uniform(1.5, side - 2.5, size=2)
            w = rng.uniform(0.8, 1.6)
            amp = rng.uniform(0.5, 1.0)
            img += amp * np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / (2 * w * w))
        out[i] = (img / max(img.max(), 1.0)).reshape(-1)
    return np.clip(out, 0.0, 1.0)


def sphere_grid(n_lat: int = 8, n_lon: int = 8, wrap: bool = False):
    """Colatitude/longitude grid; ``wrap`` repeats the 0-longitude column at 2 pi."""
    theta = (np.arange(n_lat) + 0.5) * np.pi / n_lat
    phi = 2 * np.pi * np.arange(n_lon + (1 if wrap else 0)) / n_lon
    return np.meshgrid(theta, phi, indexing="ij")


def _harmonics(theta, phi) -> list[np.ndarray]:
    st, ct = np.sin(theta), np.cos(theta)
    return [
        ct, st * np.cos(phi), st * np.sin(phi),
        3 * ct ** 2 - 1, st * ct * np.cos(phi), st * ct * np.sin(phi),
        st ** 2 * np.cos(2 * phi), st ** 2 * np.sin(2 * phi),
    ]


def _sphere_fields(n: int, rng: np.random.Generator, n_lat=8, n_lon=8, wrap=False) -> np.ndarray:
    theta, phi = sphere_grid(n_lat, n_lon, wrap)
    basis = np.stack([b.reshape(-1) for b in _harmonics(theta, phi)])
    coef = rng.standard_normal((n, basis.shape[0])) * np.array([1, 1, 1, .5, .5, .5, .5, .5])
    f = coef @ basis
    lo, hi = f.min(axis=1, keepdims=True), f.max(axis=1, keepdims=True)
    return (f - lo) / np.maximum(hi - lo, 1e-12)


def gen_toy_dataset(kind: str, n: int, rng: np.random.Generator, **kw) -> np.ndarray:
    """Samples from a named toy distribution, one row per sample."""
    if n < 1:
        raise ValueError("need n >= 1")
    if kind == "gauss2d":
        mu = np.asarray(kw.get("mean", [0.0, 0.0]), dtype=np.float64)
        cov = np.asarray(kw.get("cov", np.eye(2)), dtype=np.float64)
        return mu + rng.standard_normal((n, mu.size)) @ np.linalg.cholesky(cov).T
    if kind == "mixture2d":
        k = int(kw.get("k", 4))
        radius = float(kw.get("radius", 2.0))
        std = float(kw.get("std", 0.3))
        ang = 2 * np.pi * np.arange(k) / k
        centers = radius * np.stack([np.cos(ang), np.sin(ang)], axis=1)
        return centers[rng.integers(0, k, size=n)] + std * rng.standard_normal((n, 2))
    if kind == "moons":
        noise = float(kw.get("noise", 0.1))
        upper = rng.random(n) < 0.5
        a = rng.uniform(0, np.pi, size=n)
        pts = np.where(upper[:, None], np.stack([np.cos(a), np.sin(a)], 1),
                       np.stack([1 - np.cos(a), 0.5 - np.sin(a)], 1))
        return pts + noise * rng.standard_normal((n, 2))
    if kind == "blobs8x8":
        return _blobs(n, rng)
    if kind == "sphere_field":
        return _sphere_fields(n, rng, kw.get("n_lat", 8), kw.get("n_lon", 8), kw.get("wrap", False))
    raise ValueError(f"unknown dataset kind {kind!r}")


def dataset_shape(kind: str) -> tuple[int, ...]:
    return {"blobs8x8": (8, 8), "sphere_field": (8, 8)}.get(kind, (2,))


def ingest_dataset(path) -> list[np.ndarray]:
    """Samples stored in a container: rank-1 tensors are single samples,
    higher ranks are stacks along the first axis."""
    out: list[np.ndarray] = []
    for name, arr in read_container(path).items():
        if name.startswith("meta."):
            continue
        if arr.ndim <= 1:
            out.append(arr.reshape(-1))
        else:
            out.extend(a.reshape(-1) for a in arr)
    return out


def save_dataset(path, xs) -> None:
    write_container(path, {"x": np.atleast_2d(np.asarray(xs, dtype=np.float64))})


def load_dataset(path) -> np.ndarray:
    samples = ingest_dataset(path)
    if not samples:
        return np.zeros((0, 0))
    return np.stack(samples)
