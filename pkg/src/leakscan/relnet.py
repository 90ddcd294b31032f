"""Spatial-relation classifier for object pairs, trained from scratch.

The network maps a rasterized pair mask (subject drawn at 1.0, reference at
0.5, on a shared union-box frame) plus a position vector and a class vector
to a distribution over {above, nearby, other}.  Two conv+pool stages reduce
the mask 28x28x1 -> 14x14xF -> 3x3xF; one fully-connected layer embeds the
position/class vectors, a second mixes that embedding with the flattened
mask features, and a linear head feeds softmax.

Everything is plain numpy with hand-written backpropagation; gradients are
verified against central finite differences in the tests.  All computation
is float64 and deterministic: fixed seeds reproduce bit-identical parameters
and training histories.
"""

from __future__ import annotations

import enum
import json
from dataclasses import asdict, dataclass

import numpy as np

from .errors import ConfigError, DataError, NumericError
from .scene import (
    CLASS_DIM,
    POSITION_DIM,
    DetectedObject,
    MaskRaster,
    class_vector,
    pair_frame,
    position_vector,
    rasterize,
)

PAIR_GRID = 28
_WEIGHT_FILE_VERSION = 1


class RelationLabel(enum.Enum):
    """Pairwise spatial relation; above is directional, nearby is not."""

    ABOVE = "above"
    NEARBY = "nearby"
    OTHER = "other"

    @classmethod
    def parse(cls, s: str) -> "RelationLabel":
        for member in cls:
            if member.value == s:
                return member
        raise DataError(f"unknown relation label {s!r}")


# Ties in argmax break toward the first label in this order.
RELATION_ORDER = (RelationLabel.ABOVE, RelationLabel.NEARBY, RelationLabel.OTHER)


@dataclass(frozen=True)
class RelNetConfig:
    """Architecture hyperparameters; defaults give the full-size network.

    Both conv kernels are 3x3.  conv1 is stride 1 with same padding followed
    by a 2x2 max-pool; conv2 is stride 2 valid followed by a 2x2 max-pool,
    which takes the default 28 grid through 14x14 to 3x3 feature maps.
    """

    grid: int = PAIR_GRID
    conv1_filters: int = 256
    conv2_filters: int = 256
    fc1_units: int = 1024
    fc2_units: int = 256
    pos_dim: int = POSITION_DIM
    cls_dim: int = CLASS_DIM
    n_classes: int = len(RELATION_ORDER)

    def __post_init__(self):
        if self.grid < 8 or self.grid % 2:
            raise ConfigError(f"grid must be even and >= 8, got {self.grid}")
        if self.conv2_out < 2 or self.conv2_out % 2:
            raise ConfigError(
                f"grid {self.grid} gives odd conv2 output {self.conv2_out}; "
                "the second pool needs an even size"
            )
        for name in ("conv1_filters", "conv2_filters", "fc1_units", "fc2_units"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1")

    @property
    def pool1_size(self) -> int:
        return self.grid // 2

    @property
    def conv2_out(self) -> int:
        return (self.pool1_size - 3) // 2 + 1

    @property
    def pool2_size(self) -> int:
        return self.conv2_out // 2

    @property
    def flat_dim(self) -> int:
        return self.pool2_size * self.pool2_size * self.conv2_filters

    @property
    def vec_dim(self) -> int:
        return self.pos_dim + self.cls_dim

    @property
    def fc2_in(self) -> int:
        return self.fc1_units + self.flat_dim

    def tensor_shapes(self) -> dict[str, tuple[int, ...]]:
        return {
            "conv1_w": (3, 3, 1, self.conv1_filters),
            "conv1_b": (self.conv1_filters,),
            "conv2_w": (3, 3, self.conv1_filters, self.conv2_filters),
            "conv2_b": (self.conv2_filters,),
            "fc1_w": (self.vec_dim, self.fc1_units),
            "fc1_b": (self.fc1_units,),
            "fc2_w": (self.fc2_in, self.fc2_units),
            "fc2_b": (self.fc2_units,),
            "head_w": (self.fc2_units, self.n_classes),
            "head_b": (self.n_classes,),
        }


@dataclass
class RelNetParams:
    """All learnable tensors of the network, keyed to a config."""

    config: RelNetConfig
    tensors: dict[str, np.ndarray]

    def __post_init__(self):
        expected = self.config.tensor_shapes()
        if set(self.tensors) != set(expected):
            raise DataError(
                f"tensor set mismatch: {sorted(self.tensors)} vs {sorted(expected)}"
            )
        for name, shape in expected.items():
            t = np.asarray(self.tensors[name], dtype=np.float64)
            if t.shape != shape:
                raise DataError(
                    f"tensor {name}: shape mismatch, expected {shape}, got {t.shape}"
                )
            if not np.all(np.isfinite(t)):
                raise DataError(f"tensor {name}: non-finite values")
            self.tensors[name] = t

    def copy(self) -> "RelNetParams":
        return RelNetParams(self.config, {k: v.copy() for k, v in self.tensors.items()})


@dataclass(frozen=True)
class RelNetActivations:
    """Intermediate results of one forward pass."""

    m_ctr1: np.ndarray  # after conv1 + pool
    m_ctr2: np.ndarray  # after conv2 + pool
    v1: np.ndarray
    v2: np.ndarray
    logits: np.ndarray
    y: np.ndarray


@dataclass(frozen=True, eq=False)
class PairSample:
    """One relation-classification unit: pair raster + feature vectors."""

    raster: MaskRaster
    v_poi: np.ndarray
    v_cls: np.ndarray
    label: RelationLabel | None = None

    def __eq__(self, other) -> bool:
        return (
            isinstance(other, PairSample)
            and self.raster == other.raster
            and np.array_equal(self.v_poi, other.v_poi)
            and np.array_equal(self.v_cls, other.v_cls)
            and self.label is other.label
        )

    def __post_init__(self):
        if not np.isin(self.raster.values, (0.0, 0.5, 1.0)).all():
            raise DataError("pair raster values must be in {0, 0.5, 1.0}")
        for name, vec in (("v_poi", self.v_poi), ("v_cls", self.v_cls)):
            v = np.asarray(vec, dtype=np.float64)
            if not np.all(np.isfinite(v)):
                raise DataError(f"{name} contains non-finite values")
            v.setflags(write=False)
            object.__setattr__(self, name, v)

    def feature_vector(self) -> np.ndarray:
        return np.concatenate([self.v_poi, self.v_cls])


@dataclass(frozen=True)
class TrainConfig:
    """SGD settings: linear lr decay, momentum, decoupled weight decay."""

    lr_initial: float = 0.01
    lr_final: float = 0.001
    epochs: int = 30
    batch_size: int = 32
    momentum: float = 0.9
    weight_decay: float = 1e-4
    seed: int = 0

    def __post_init__(self):
        if self.lr_initial < 0 or self.lr_final < 0:
            raise ConfigError("learning rates must be >= 0")
        if self.epochs < 1 or self.batch_size < 1:
            raise ConfigError("epochs and batch_size must be >= 1")
        if not (0.0 <= self.momentum < 1.0):
            raise ConfigError("momentum must be in [0, 1)")
        if self.weight_decay < 0:
            raise ConfigError("weight_decay must be >= 0")

    def lr_at(self, epoch: int) -> float:
        if self.epochs == 1:
            return self.lr_initial
        frac = epoch / (self.epochs - 1)
        return self.lr_initial + (self.lr_final - self.lr_initial) * frac


@dataclass(frozen=True)
class EpochStats:
    epoch: int
    loss: float
    train_acc: float


# ---------------------------------------------------------------------------
# Pair construction
# ---------------------------------------------------------------------------

def make_pair_sample(
    subject: DetectedObject,
    reference: DetectedObject,
    img_w: float,
    img_h: float,
    label: RelationLabel | None = None,
    grid: int = PAIR_GRID,
) -> PairSample:
    """Render an ordered object pair into one channel plus feature vectors.

    Subject cells are 1.0, reference cells 0.5, overlap 1.0, background 0.0;
    both polygons are rasterized in their union bbox grown by a 10% margin.
    """
    frame = pair_frame(subject.bbox, reference.bbox)
    sub = rasterize(subject.polygon, frame, grid, grid)
    ref = rasterize(reference.polygon, frame, grid, grid)
    values = np.maximum(sub.values, 0.5 * ref.values)
    return PairSample(
        raster=MaskRaster(grid, grid, values),
        v_poi=position_vector(subject, reference, img_w, img_h),
        v_cls=class_vector(subject.label, reference.label),
        label=label,
    )


# ---------------------------------------------------------------------------
# Layers (batched, NHWC)
# ---------------------------------------------------------------------------

def _conv_forward(x, w, b, stride, pad):
    batch, h, wd, _ = x.shape
    kh, kw, cin, filters = w.shape
    xp = np.pad(x, ((0, 0), (pad, pad), (pad, pad), (0, 0))) if pad else x
    oh = (h + 2 * pad - kh) // stride + 1
    ow = (wd + 2 * pad - kw) // stride + 1
    s0, s1, s2, s3 = xp.strides
    win = np.lib.stride_tricks.as_strided(
        xp,
        shape=(batch, oh, ow, kh, kw, cin),
        strides=(s0, s1 * stride, s2 * stride, s1, s2, s3),
    )
    cols = win.reshape(batch * oh * ow, kh * kw * cin)
    y = cols @ w.reshape(kh * kw * cin, filters) + b
    return y.reshape(batch, oh, ow, filters), (cols, xp.shape, x.shape, stride, pad)


def _conv_backward(dy, w, cache):
    cols, xp_shape, x_shape, stride, pad = cache
    batch, oh, ow, filters = dy.shape
    kh, kw, cin, _ = w.shape
    dy_mat = dy.reshape(batch * oh * ow, filters)
    dw = (cols.T @ dy_mat).reshape(w.shape)
    db = dy_mat.sum(axis=0)
    dcols = (dy_mat @ w.reshape(-1, filters).T).reshape(batch, oh, ow, kh, kw, cin)
    dxp = np.zeros(xp_shape)
    for i in range(kh):
        for j in range(kw):
            dxp[:, i : i + stride * oh : stride, j : j + stride * ow : stride, :] += (
                dcols[:, :, :, i, j, :]
            )
    dx = dxp[:, pad : xp_shape[1] - pad, pad : xp_shape[2] - pad, :] if pad else dxp
    return dx, dw, db


def _pool_forward(x):
    # 2x2 max-pool, stride 2; argmax routing picks the first maximum in
    # row-major window order so gradient flow is deterministic.
    batch, h, wd, c = x.shape
    oh, ow = h // 2, wd // 2
    xr = (
        x.reshape(batch, oh, 2, ow, 2, c)
        .transpose(0, 1, 3, 2, 4, 5)
        .reshape(batch, oh, ow, 4, c)
    )
    idx = xr.argmax(axis=3)
    y = np.take_along_axis(xr, idx[:, :, :, None, :], axis=3)[:, :, :, 0, :]
    return y, (idx, x.shape)


def _pool_backward(dy, cache):
    idx, x_shape = cache
    batch, h, wd, c = x_shape
    oh, ow = h // 2, wd // 2
    dxr = np.zeros((batch, oh, ow, 4, c))
    np.put_along_axis(dxr, idx[:, :, :, None, :], dy[:, :, :, None, :], axis=3)
    return (
        dxr.reshape(batch, oh, ow, 2, 2, c)
        .transpose(0, 1, 3, 2, 4, 5)
        .reshape(batch, h, wd, c)
    )


def _softmax(logits):
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def _forward_batch(params: RelNetParams, rasters: np.ndarray, vecs: np.ndarray):
    t = params.tensors
    c1, cache1 = _conv_forward(rasters, t["conv1_w"], t["conv1_b"], stride=1, pad=1)
    a1 = np.maximum(c1, 0.0)
    m1, pcache1 = _pool_forward(a1)
    c2, cache2 = _conv_forward(m1, t["conv2_w"], t["conv2_b"], stride=2, pad=0)
    a2 = np.maximum(c2, 0.0)
    m2, pcache2 = _pool_forward(a2)
    flat = m2.reshape(m2.shape[0], -1)
    z1 = vecs @ t["fc1_w"] + t["fc1_b"]
    v1 = np.maximum(z1, 0.0)
    z = np.concatenate([v1, flat], axis=1)
    z2 = z @ t["fc2_w"] + t["fc2_b"]
    v2 = np.maximum(z2, 0.0)
    logits = v2 @ t["head_w"] + t["head_b"]
    y = _softmax(logits)
    cache = {
        "vecs": vecs,
        "c1": c1,
        "cache1": cache1,
        "pcache1": pcache1,
        "c2": c2,
        "cache2": cache2,
        "pcache2": pcache2,
        "m2_shape": m2.shape,
        "z1": z1,
        "z": z,
        "z2": z2,
        "v2": v2,
    }
    return m1, m2, v1, v2, logits, y, cache


def _backward_batch(params: RelNetParams, cache: dict, dlogits: np.ndarray):
    t = params.tensors
    grads: dict[str, np.ndarray] = {}
    grads["head_w"] = cache["v2"].T @ dlogits
    grads["head_b"] = dlogits.sum(axis=0)
    dv2 = dlogits @ t["head_w"].T
    dz2 = dv2 * (cache["z2"] > 0)
    grads["fc2_w"] = cache["z"].T @ dz2
    grads["fc2_b"] = dz2.sum(axis=0)
    dz = dz2 @ t["fc2_w"].T
    n_fc1 = params.config.fc1_units
    dv1 = dz[:, :n_fc1]
    dflat = dz[:, n_fc1:]
    dz1 = dv1 * (cache["z1"] > 0)
    grads["fc1_w"] = cache["vecs"].T @ dz1
    grads["fc1_b"] = dz1.sum(axis=0)
    dm2 = dflat.reshape(cache["m2_shape"])
    da2 = _pool_backward(dm2, cache["pcache2"])
    dc2 = da2 * (cache["c2"] > 0)
    dm1, grads["conv2_w"], grads["conv2_b"] = _conv_backward(
        dc2, t["conv2_w"], cache["cache2"]
    )
    da1 = _pool_backward(dm1, cache["pcache1"])
    dc1 = da1 * (cache["c1"] > 0)
    _, grads["conv1_w"], grads["conv1_b"] = _conv_backward(
        dc1, t["conv1_w"], cache["cache1"]
    )
    return grads


def _stack_batch(config: RelNetConfig, batch: list[PairSample]):
    rasters = np.stack([s.raster.values for s in batch])[..., None]
    if rasters.shape[1:3] != (config.grid, config.grid):
        raise DataError(
            f"raster size {rasters.shape[1:3]} does not match config grid "
            f"{config.grid}"
        )
    vecs = np.stack([s.feature_vector() for s in batch])
    if vecs.shape[1] != config.vec_dim:
        raise DataError(
            f"feature vector length {vecs.shape[1]} does not match config "
            f"{config.vec_dim}"
        )
    return rasters, vecs


# ---------------------------------------------------------------------------
# Public operations
# ---------------------------------------------------------------------------

def init_params(config: RelNetConfig, seed: int) -> RelNetParams:
    """He fan-in scaled normal init for weights, zero biases; seeded."""
    rng = np.random.default_rng(seed)
    tensors: dict[str, np.ndarray] = {}
    for name, shape in config.tensor_shapes().items():
        if name.endswith("_b"):
            tensors[name] = np.zeros(shape)
        else:
            fan_in = int(np.prod(shape[:-1]))
            tensors[name] = rng.standard_normal(shape) * np.sqrt(2.0 / fan_in)
    return RelNetParams(config, tensors)


def forward(params: RelNetParams, sample: PairSample) -> RelNetActivations:
    """Full forward pass for one sample."""
    rasters, vecs = _stack_batch(params.config, [sample])
    m1, m2, v1, v2, logits, y, _ = _forward_batch(params, rasters, vecs)
    return RelNetActivations(
        m_ctr1=m1[0], m_ctr2=m2[0], v1=v1[0], v2=v2[0], logits=logits[0], y=y[0]
    )


def _loss_and_grad_batch(params: RelNetParams, batch: list[PairSample]):
    labels = np.array([RELATION_ORDER.index(s.label) for s in batch])
    rasters, vecs = _stack_batch(params.config, batch)
    *_, logits, y, cache = _forward_batch(params, rasters, vecs)
    n = len(batch)
    loss = float(-np.log(y[np.arange(n), labels]).mean())
    dlogits = y.copy()
    dlogits[np.arange(n), labels] -= 1.0
    dlogits /= n
    grads = _backward_batch(params, cache, dlogits)
    correct = int((y.argmax(axis=1) == labels).sum())
    return loss, grads, correct


def loss_and_grad(
    params: RelNetParams, batch: list[PairSample]
) -> tuple[float, RelNetParams]:
    """Mean cross-entropy over a batch and its exact parameter gradients."""
    if not batch:
        raise DataError("empty batch")
    if any(s.label is None for s in batch):
        raise DataError("loss needs labeled samples")
    loss, grads, _ = _loss_and_grad_batch(params, batch)
    return loss, RelNetParams(params.config, grads)


def train(
    params: RelNetParams,
    dataset: list[PairSample],
    cfg: TrainConfig,
) -> tuple[RelNetParams, list[EpochStats]]:
    """SGD with momentum and decoupled weight decay over a labeled dataset.

    Weight decay shrinks parameters by (1 - weight_decay) every step
    independently of the learning rate.  Shuffling, and therefore the whole
    run, is determined by cfg.seed and the dataset order.
    """
    if not dataset:
        raise DataError("empty training dataset")
    label_set = {s.label for s in dataset}
    if None in label_set:
        raise DataError("training needs labeled samples")
    if len(label_set) < 2:
        raise DataError("training needs at least 2 distinct labels")
    rng = np.random.default_rng(cfg.seed)
    work = params.copy()
    velocity = {k: np.zeros_like(v) for k, v in work.tensors.items()}
    history: list[EpochStats] = []
    n = len(dataset)
    for epoch in range(cfg.epochs):
        lr = cfg.lr_at(epoch)
        order = rng.permutation(n)
        loss_sum = 0.0
        correct_sum = 0
        for start in range(0, n, cfg.batch_size):
            batch = [dataset[i] for i in order[start : start + cfg.batch_size]]
            loss, grads, correct = _loss_and_grad_batch(work, batch)
            if not np.isfinite(loss):
                raise NumericError(
                    f"non-finite loss at epoch {epoch}; learning rate too high?"
                )
            loss_sum += loss * len(batch)
            correct_sum += correct
            for name, p in work.tensors.items():
                p *= 1.0 - cfg.weight_decay
                v = velocity[name]
                v *= cfg.momentum
                v += grads[name]
                p -= lr * v
        history.append(
            EpochStats(epoch=epoch, loss=loss_sum / n, train_acc=correct_sum / n)
        )
    return work, history


def predict(
    params: RelNetParams, sample: PairSample
) -> tuple[RelationLabel, np.ndarray]:
    """Most probable relation (ties break toward above < nearby < other)."""
    y = forward(params, sample).y
    return RELATION_ORDER[int(np.argmax(y))], y


def predict_batch(
    params: RelNetParams, samples: list[PairSample], batch_size: int = 256
) -> tuple[list[RelationLabel], np.ndarray]:
    """Batched predict for evaluation; same results as predict, faster."""
    probs = []
    for start in range(0, len(samples), batch_size):
        rasters, vecs = _stack_batch(params.config, samples[start : start + batch_size])
        *_, y, _cache = _forward_batch(params, rasters, vecs)
        probs.append(y)
    y = np.concatenate(probs) if probs else np.zeros((0, params.config.n_classes))
    labels = [RELATION_ORDER[i] for i in y.argmax(axis=1)]
    return labels, y


# ---------------------------------------------------------------------------
# Weight files
# ---------------------------------------------------------------------------

def save_params(params: RelNetParams, path: str) -> None:
    """Write a versioned JSON weight file; floats round-trip bit-exactly."""
    doc = {
        "version": _WEIGHT_FILE_VERSION,
        "config": asdict(params.config),
        "tensors": {
            name: {"shape": list(t.shape), "data": t.ravel().tolist()}
            for name, t in params.tensors.items()
        },
    }
    with open(path, "w", encoding="utf-8") as f:
        json.dump(doc, f)


def load_params(path: str) -> RelNetParams:
    """Read a weight file written by save_params, validating shapes."""
    try:
        with open(path, "r", encoding="utf-8") as f:
            doc = json.load(f)
    except json.JSONDecodeError as e:
        raise DataError(f"corrupt weight file {path}: {e}") from None
    if not isinstance(doc, dict) or doc.get("version") != _WEIGHT_FILE_VERSION:
        raise DataError(
            f"weight file version mismatch: expected {_WEIGHT_FILE_VERSION}, "
            f"got {doc.get('version') if isinstance(doc, dict) else doc!r}"
        )
    try:
        config = RelNetConfig(**doc["config"])
    except (TypeError, KeyError) as e:
        raise DataError(f"bad config in weight file: {e}") from None
    tensors: dict[str, np.ndarray] = {}
    stored = doc.get("tensors", {})
    for name, shape in config.tensor_shapes().items():
        if name not in stored:
            raise DataError(f"tensor {name}: missing from weight file")
        entry = stored[name]
        if tuple(entry.get("shape", ())) != shape:
            raise DataError(
                f"tensor {name}: shape mismatch, expected {shape}, "
                f"got {tuple(entry.get('shape', ()))}"
            )
        data = np.asarray(entry["data"], dtype=np.float64)
        if data.size != int(np.prod(shape)):
            raise DataError(f"tensor {name}: data length does not match shape")
        tensors[name] = data.reshape(shape)
    return RelNetParams(config, tensors)
