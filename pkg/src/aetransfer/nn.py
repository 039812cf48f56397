"""Residual CNN classifiers with softmax or multiclass-hinge (SVM) heads.

Images are (N, 3, rows, cols) float arrays on the 0-255 pixel scale; the
network rescales them to [-1, 1] internally so attack step sizes stay in pixel
units.  A spec with no stages is a plain linear classifier on the flattened
image.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import logging
from dataclasses import dataclass, field

import numpy as np

from . import ndtensor as nd
from .ndtensor import Tape, Tensor

log = logging.getLogger(__name__)

HEADS = ("softmax", "svm")
REGULARIZERS = ("none", "l1", "l2")


class SpecError(ValueError):
    pass


class DivergenceError(FloatingPointError):
    pass


@dataclass(frozen=True)
class ModelSpec:
    blocks_per_stage: tuple[int, ...] = (1, 1, 1)
    channels: tuple[int, ...] = (4, 8, 16)
    head: str = "softmax"
    regularizer: str = "none"
    reg_lambda: float = 0.0
    # multiplies reg_lambda in the loss; lets full-scale lambdas run on tiny nets
    reg_scale: float = 1.0
    num_classes: int = 10
    input_shape: tuple[int, int, int] = (3, 16, 16)

    def __post_init__(self):
        object.__setattr__(self, "blocks_per_stage", tuple(int(b) for b in self.blocks_per_stage))
        object.__setattr__(self, "channels", tuple(int(c) for c in self.channels))
        object.__setattr__(self, "input_shape", tuple(int(s) for s in self.input_shape))
        object.__setattr__(self, "reg_lambda", float(self.reg_lambda))
        object.__setattr__(self, "reg_scale", float(self.reg_scale))

    def validate(self) -> "ModelSpec":
        if self.head not in HEADS:
            raise SpecError(f"head must be one of {HEADS}, got {self.head!r}")
        if self.regularizer not in REGULARIZERS:
            raise SpecError(f"regularizer must be one of {REGULARIZERS}, got {self.regularizer!r}")
        if self.reg_lambda < 0 or not np.isfinite(self.reg_lambda):
            raise SpecError("reg_lambda must be a finite nonnegative float")
        if (self.reg_lambda == 0) != (self.regularizer == "none"):
            raise SpecError("reg_lambda must be 0 exactly when regularizer is 'none'")
        if self.reg_scale <= 0:
            raise SpecError("reg_scale must be positive")
        if len(self.blocks_per_stage) != len(self.channels):
            raise SpecError("blocks_per_stage and channels must have one entry per stage")
        if any(b < 1 for b in self.blocks_per_stage) or any(c < 1 for c in self.channels):
            raise SpecError("block counts and channel widths must be positive")
        if self.num_classes < 2:
            raise SpecError("num_classes must be at least 2")
        if len(self.input_shape) != 3 or min(self.input_shape) < 1:
            raise SpecError(f"input_shape must be (channels, rows, cols), got {self.input_shape}")
        return self

    @property
    def penalty_coef(self) -> float:
        return self.reg_lambda * self.reg_scale

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        for k in ("blocks_per_stage", "channels", "input_shape"):
            d[k] = list(d[k])
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelSpec":
        return cls(**d).validate()

    def describe(self) -> str:
        base = "ResNet-SVM" if self.head == "svm" else "ResNet"
        if not self.channels:
            base = "Linear-SVM" if self.head == "svm" else "Linear"
        depth = "-".join(str(b) for b in self.blocks_per_stage)
        reg = f"-{self.regularizer.upper()}({self.reg_lambda:g})" if self.regularizer != "none" else ""
        return f"{base}[{depth}]{reg}"


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 24
    batch_size: int = 32
    learning_rate: float = 0.02
    momentum: float = 0.9
    # learning rate is multiplied by lr_decay at each of these epoch fractions
    lr_milestones: tuple[float, ...] = (0.5, 0.75)
    lr_decay: float = 0.1
    # linear warmup length in epochs, then global gradient-norm clipping
    warmup_epochs: float = 1.0
    clip_norm: float | None = 2.0
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "lr_milestones", tuple(float(m) for m in self.lr_milestones))
        if self.epochs < 1 or self.batch_size < 1:
            raise SpecError("epochs and batch_size must be >= 1")
        if not self.learning_rate > 0:
            raise SpecError("learning_rate must be > 0")

    def learning_rate_at(self, epoch: int, frac: float = 0.0) -> float:
        lr = self.learning_rate
        for m in self.lr_milestones:
            if epoch >= int(round(m * self.epochs)):
                lr *= self.lr_decay
        progress = epoch + frac
        if self.warmup_epochs > 0 and progress < self.warmup_epochs:
            lr *= (progress + 1e-3) / self.warmup_epochs
        return lr

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["lr_milestones"] = list(d["lr_milestones"])
        return d


@dataclass
class TrainedModel:
    spec: ModelSpec
    params: dict[str, np.ndarray]
    seed: int = 0
    meta: dict = field(default_factory=dict)

    @property
    def model_id(self) -> str:
        h = hashlib.sha256()
        h.update(json.dumps(self.spec.to_dict(), sort_keys=True).encode())
        for name in sorted(self.params):
            arr = np.ascontiguousarray(self.params[name], dtype="<f8")
            h.update(f"{name}:{arr.shape}".encode())
            h.update(arr.tobytes())
        return h.hexdigest()[:16]

    @property
    def num_classes(self) -> int:
        return self.spec.num_classes

    @property
    def input_shape(self) -> tuple[int, int, int]:
        return self.spec.input_shape

    @property
    def members(self) -> tuple["TrainedModel", ...]:
        return (self,)

    def __repr__(self):
        return f"TrainedModel({self.spec.describe()}, id={self.model_id})"


# ---- architecture ----------------------------------------------------------


def param_shapes(spec: ModelSpec) -> dict[str, tuple[int, ...]]:
    c_in, rows, cols = spec.input_shape
    shapes: dict[str, tuple[int, ...]] = {}
    if not spec.channels:
        shapes["head.w"] = (c_in * rows * cols, spec.num_classes)
        shapes["head.b"] = (spec.num_classes,)
        return shapes
    width = spec.channels[0]
    shapes["stem.w"] = (width, c_in, 3, 3)
    shapes["stem.b"] = (width, 1, 1)
    prev = width
    for s, (nblocks, ch) in enumerate(zip(spec.blocks_per_stage, spec.channels)):
        for b in range(nblocks):
            p = f"s{s}.b{b}"
            shapes[f"{p}.conv1.w"] = (ch, prev, 3, 3)
            shapes[f"{p}.conv1.b"] = (ch, 1, 1)
            shapes[f"{p}.conv2.w"] = (ch, ch, 3, 3)
            shapes[f"{p}.conv2.b"] = (ch, 1, 1)
            if prev != ch or (s > 0 and b == 0):
                shapes[f"{p}.proj.w"] = (ch, prev, 1, 1)
            prev = ch
    shapes["head.w"] = (prev, spec.num_classes)
    shapes["head.b"] = (spec.num_classes,)
    return shapes


def is_penalized(name: str) -> bool:
    return name.endswith(".w")


def _init_param(name: str, shape: tuple[int, ...], rng: np.random.Generator) -> np.ndarray:
    if not is_penalized(name):
        return np.zeros(shape)
    if name.startswith("head"):
        return rng.normal(0.0, 1.0 / np.sqrt(shape[0]), size=shape)
    fan_in = int(np.prod(shape[1:]))
    std = np.sqrt(2.0 / fan_in)
    if name.endswith("conv2.w"):
        # keeps the residual branch small at init (no normalization layers)
        std *= 0.25
    return rng.normal(0.0, std, size=shape)


def build(spec: ModelSpec, seed: int = 0) -> TrainedModel:
    spec.validate()
    rng = np.random.default_rng(seed)
    params = {name: _init_param(name, shape, rng) for name, shape in param_shapes(spec).items()}
    return TrainedModel(spec=spec, params=params, seed=int(seed), meta={"trained": False})


def forward(spec: ModelSpec, params: dict[str, Tensor], x: Tensor) -> Tensor:
    """Raw class scores (N, num_classes)."""
    h = nd.add(nd.scalar_mul(x, 1.0 / 127.5), Tensor(-1.0))
    if not spec.channels:
        h = nd.reshape(h, (x.shape[0], -1))
        return nd.add(nd.matmul(h, params["head.w"]), params["head.b"])
    h = nd.relu(nd.add(nd.conv2d(h, params["stem.w"], 1, 1), params["stem.b"]))
    for s, nblocks in enumerate(spec.blocks_per_stage):
        for b in range(nblocks):
            p = f"s{s}.b{b}"
            stride = 2 if (s > 0 and b == 0) else 1
            r = nd.relu(nd.add(nd.conv2d(h, params[f"{p}.conv1.w"], stride, 1), params[f"{p}.conv1.b"]))
            r = nd.add(nd.conv2d(r, params[f"{p}.conv2.w"], 1, 1), params[f"{p}.conv2.b"])
            short = nd.conv2d(h, params[f"{p}.proj.w"], stride, 0) if f"{p}.proj.w" in params else h
            h = nd.relu(nd.add(r, short))
    h = nd.global_avg_pool(h)
    return nd.add(nd.matmul(h, params["head.w"]), params["head.b"])


def data_loss(spec: ModelSpec, scores: Tensor, labels, reduction: str = "mean") -> Tensor:
    if spec.head == "svm":
        return nd.hinge_loss(scores, labels, margin=1.0, reduction=reduction)
    return nd.softmax_cross_entropy(scores, labels, reduction=reduction)


def penalty(spec: ModelSpec, params: dict[str, Tensor]) -> Tensor | None:
    """Sum |w| (l1) or sum w^2 (l2) over weight matrices and kernels, biases excluded."""
    if spec.regularizer == "none":
        return None
    terms = []
    for name in sorted(params):
        if not is_penalized(name):
            continue
        w = params[name]
        terms.append(nd.reduce_sum(nd.abs_(w) if spec.regularizer == "l1" else nd.mul(w, w)))
    total = terms[0]
    for t in terms[1:]:
        total = nd.add(total, t)
    return total


def training_loss(spec: ModelSpec, params: dict[str, Tensor], images, labels) -> tuple[Tensor, Tensor]:
    """(total loss, data loss) with total = data + lambda * penalty."""
    scores = forward(spec, params, Tensor(images))
    dl = data_loss(spec, scores, labels)
    pen = penalty(spec, params)
    if pen is None or spec.penalty_coef == 0:
        return dl, dl
    return nd.add(dl, nd.scalar_mul(pen, spec.penalty_coef)), dl


def _const_params(model: TrainedModel) -> dict[str, Tensor]:
    return {k: Tensor(v) for k, v in model.params.items()}


def _check_images(model: TrainedModel, images) -> np.ndarray:
    x = np.asarray(images, dtype=np.float64)
    if x.ndim == 3:
        x = x[None]
    if x.ndim != 4 or tuple(x.shape[1:]) != model.spec.input_shape:
        raise nd.ShapeError(f"expected images of shape (N, {model.spec.input_shape}), got {x.shape}")
    return x


def logits(model: TrainedModel, images, chunk: int = 512) -> np.ndarray:
    x = _check_images(model, images)
    params = _const_params(model)
    out = [forward(model.spec, params, Tensor(x[i:i + chunk])).data for i in range(0, len(x), chunk)]
    return np.concatenate(out) if out else np.zeros((0, model.spec.num_classes))


def softmax(z: np.ndarray) -> np.ndarray:
    e = np.exp(z - z.max(axis=1, keepdims=True))
    return e / e.sum(axis=1, keepdims=True)


def scores(model: TrainedModel, images) -> np.ndarray:
    """Class scores as seen by an ensemble: probabilities for softmax heads, raw margins for svm."""
    z = logits(model, images)
    return softmax(z) if model.spec.head == "softmax" else z


def predict(model: TrainedModel, images) -> tuple[np.ndarray, np.ndarray]:
    """(class indices, score vectors); np.argmax picks the lowest index on ties."""
    s = scores(model, images)
    return np.argmax(s, axis=1), s


def accuracy(model, images, labels) -> float:
    pred = model_predict(model, images)
    return float(np.mean(pred == np.asarray(labels)))


def model_predict(model, images) -> np.ndarray:
    """Class indices for a TrainedModel or anything exposing ``predict``."""
    if isinstance(model, TrainedModel):
        return predict(model, images)[0]
    return model.predict(images)[0]


def input_gradient(model: TrainedModel, images, labels) -> np.ndarray:
    """Per-image gradient of the model's own training data-loss w.r.t. the input."""
    x = Tensor(_check_images(model, images), requires_grad=True)
    with Tape() as tape:
        s = forward(model.spec, _const_params(model), x)
        loss = data_loss(model.spec, s, labels, reduction="sum")
    tape.backward(loss)
    return x.grad if x.grad is not None else np.zeros_like(x.data)


def score_jacobian(model: TrainedModel, images) -> tuple[np.ndarray, np.ndarray]:
    """Raw scores (N, K) and their input Jacobian (N, K, *image_shape)."""
    x0 = _check_images(model, images)
    n, k = x0.shape[0], model.spec.num_classes
    # one tape for all classes: the batch is tiled K times, tile j seeds class j
    x = Tensor(np.broadcast_to(x0, (k,) + x0.shape).reshape((k * n,) + x0.shape[1:]).copy(),
               requires_grad=True)
    seed = np.zeros((k * n, k))
    for j in range(k):
        seed[j * n:(j + 1) * n, j] = 1.0
    with Tape() as tape:
        s = forward(model.spec, _const_params(model), x)
        total = nd.reduce_sum(nd.mul(s, Tensor(seed)))
    tape.backward(total)
    z = s.data[:n]
    jac = x.grad.reshape((k, n) + x0.shape[1:]).swapaxes(0, 1)
    return z, np.ascontiguousarray(jac)


# ---- training --------------------------------------------------------------


def train(model: TrainedModel, train_split, cfg: TrainConfig, test_split=None) -> TrainedModel:
    """SGD with momentum and step decay on data-loss + lambda * penalty."""
    spec = model.spec
    x_all = np.asarray(train_split.images, dtype=np.float64)
    y_all = np.asarray(train_split.labels, dtype=np.int64)
    if len(x_all) == 0:
        raise ValueError("train: empty dataset")
    if y_all.min() < 0 or y_all.max() >= spec.num_classes:
        raise ValueError(f"train: labels must lie in [0, {spec.num_classes})")
    _check_images(model, x_all[:1])
    rng = np.random.default_rng(cfg.seed)
    params = {k: v.copy() for k, v in model.params.items()}
    velocity = {k: np.zeros_like(v) for k, v in params.items()}
    last_loss = float("nan")
    for epoch in range(cfg.epochs):
        order = rng.permutation(len(x_all))
        running = 0.0
        for start in range(0, len(order), cfg.batch_size):
            lr = cfg.learning_rate_at(epoch, start / len(order))
            idx = order[start:start + cfg.batch_size]
            ps = {k: Tensor(v, requires_grad=True) for k, v in params.items()}
            try:
                with Tape() as tape:
                    loss, _ = training_loss(spec, ps, x_all[idx], y_all[idx])
                tape.backward(loss)
            except nd.NonFiniteError as exc:
                raise DivergenceError(f"training diverged at epoch {epoch}: {exc}") from exc
            grads = {k: ps[k].grad for k in params if ps[k].grad is not None}
            if cfg.clip_norm is not None:
                norm = np.sqrt(sum(float(np.sum(g * g)) for g in grads.values()))
                if norm > cfg.clip_norm:
                    grads = {k: g * (cfg.clip_norm / norm) for k, g in grads.items()}
            for k, g in grads.items():
                velocity[k] = cfg.momentum * velocity[k] - lr * g
                params[k] = params[k] + velocity[k]
            running += float(loss.data) * len(idx)
        last_loss = running / len(order)
        if not np.isfinite(last_loss):
            raise DivergenceError(f"training diverged at epoch {epoch}")
        log.debug("epoch %d lr %.4g loss %.4f", epoch, lr, last_loss)
    out = TrainedModel(spec=spec, params=params, seed=model.seed, meta={})
    meta = {
        "trained": True,
        "epochs": cfg.epochs,
        "seed": cfg.seed,
        "train_config": cfg.to_dict(),
        "final_loss": last_loss,
        "train_accuracy": accuracy(out, x_all, y_all),
    }
    if test_split is not None:
        meta["test_accuracy"] = accuracy(out, test_split.images, test_split.labels)
    out.meta = meta
    log.info("trained %s: train acc %.3f test acc %s", spec.describe(),
             meta["train_accuracy"], meta.get("test_accuracy"))
    return out


def replace_head_svm(model: TrainedModel, train_split, cfg: TrainConfig, test_split=None,
                     seed: int | None = None) -> TrainedModel:
    """Swap a softmax head for a freshly initialized hinge-loss head and retrain the whole net."""
    if model.spec.head != "softmax":
        raise SpecError("replace_head_svm requires a softmax-head model")
    spec = dataclasses.replace(model.spec, head="svm")
    rng = np.random.default_rng(model.seed + 1 if seed is None else seed)
    params = {k: v.copy() for k, v in model.params.items()}
    for name in ("head.w", "head.b"):
        params[name] = _init_param(name, params[name].shape, rng)
    fresh = TrainedModel(spec=spec, params=params, seed=model.seed, meta={})
    out = train(fresh, train_split, cfg, test_split)
    out.meta["parent_id"] = model.model_id
    return out
