"""Ensembles of trained classifiers.

Prediction averages the sub-models' weighted scores (probabilities for softmax
heads, raw margins for svm heads).  The attack gradient is the plain sum of
each sub-model's own input-gradient, with no weighting.
"""

from __future__ import annotations

import hashlib
import itertools
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import nn
from .nn import TrainedModel


class EnsembleError(ValueError):
    pass


@dataclass(frozen=True)
class EnsembleModel:
    members: tuple[TrainedModel, ...]
    weights: tuple[float, ...] = ()
    # "per-model": sum of each sub-model's loss gradient
    # "averaged-output": gradient of the loss on the averaged output scores
    gradient_mode: str = "per-model"
    _ids: tuple[str, ...] = field(default=(), repr=False, compare=False)

    def __post_init__(self):
        members = tuple(self.members)
        if not members:
            raise EnsembleError("an ensemble needs at least one sub-model")
        weights = tuple(float(w) for w in self.weights) or (1.0,) * len(members)
        if len(weights) != len(members):
            raise EnsembleError(f"{len(members)} sub-models but {len(weights)} weights")
        if any(not w > 0 for w in weights):
            raise EnsembleError("ensemble weights must be positive")
        first = members[0]
        for m in members[1:]:
            if m.num_classes != first.num_classes or m.input_shape != first.input_shape:
                raise EnsembleError("sub-models disagree on num_classes or input_shape")
        if self.gradient_mode not in ("per-model", "averaged-output"):
            raise EnsembleError(f"unknown gradient_mode {self.gradient_mode!r}")
        object.__setattr__(self, "members", members)
        object.__setattr__(self, "weights", weights)
        object.__setattr__(self, "_ids", tuple(m.model_id for m in members))

    @property
    def member_ids(self) -> tuple[str, ...]:
        return self._ids

    @property
    def size(self) -> int:
        return len(self.members)

    @property
    def num_classes(self) -> int:
        return self.members[0].num_classes

    @property
    def input_shape(self):
        return self.members[0].input_shape

    @property
    def mixed_heads(self) -> bool:
        return len({m.spec.head for m in self.members}) > 1

    @property
    def model_id(self) -> str:
        pairs = sorted(zip(self._ids, self.weights))
        h = hashlib.sha256()
        for mid, w in pairs:
            h.update(f"{mid}:{w!r};".encode())
        return "ens-" + h.hexdigest()[:12]

    ensemble_id = model_id

    def _sorted(self):
        order = sorted(range(self.size), key=lambda i: (self._ids[i], self.weights[i]))
        return [(self.members[i], self.weights[i]) for i in order]

    def predict(self, images) -> tuple[np.ndarray, np.ndarray]:
        total = None
        for m, w in self._sorted():
            s = w * nn.scores(m, images)
            total = s if total is None else total + s
        avg = total / self.size
        return np.argmax(avg, axis=1), avg

    def loss_gradient(self, images, labels) -> np.ndarray:
        return loss_gradient_wrt_input(self, images, labels)

    def score_jacobian(self, images) -> tuple[np.ndarray, np.ndarray]:
        """Summed raw scores and their summed input Jacobian."""
        z_tot = jac_tot = None
        for m, _ in self._sorted():
            z, jac = nn.score_jacobian(m, images)
            if z_tot is None:
                z_tot, jac_tot = z, jac
            else:
                z_tot = z_tot + z
                jac_tot = jac_tot + jac
        return z_tot, jac_tot

    def __repr__(self):
        return f"EnsembleModel(size={self.size}, id={self.model_id})"


def as_ensemble(model) -> EnsembleModel:
    return model if isinstance(model, EnsembleModel) else EnsembleModel((model,))


def predict(ens: EnsembleModel, images) -> tuple[np.ndarray, np.ndarray]:
    return ens.predict(images)


def loss_gradient_wrt_input(ens: EnsembleModel, images, labels) -> np.ndarray:
    """Sum over sub-models of each sub-model's own loss gradient at the input.

    Sub-model terms are added in sorted model-id order.
    """
    if ens.gradient_mode == "averaged-output":
        return _averaged_output_gradient(ens, images, labels)
    total = None
    for m, _ in ens._sorted():
        g = nn.input_gradient(m, images, labels)
        total = g if total is None else total + g
    return total


def _averaged_output_gradient(ens: EnsembleModel, images, labels) -> np.ndarray:
    # cross-entropy on the averaged score vector; only meaningful for all-softmax ensembles
    x = np.asarray(images, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    _, avg = ens.predict(x)
    rows = np.arange(len(labels))
    total = np.zeros_like(x)
    for m, w in ens._sorted():
        z, jac = nn.score_jacobian(m, x)
        if m.spec.head == "softmax":
            p = nn.softmax(z)
            dp = -(1.0 / np.maximum(avg[rows, labels], 1e-300)) * (w / ens.size)
            # d p_y / d z = p_y (e_y - p)
            dz = (p[rows, labels] * dp)[:, None] * (np.eye(z.shape[1])[labels] - p)
        else:
            dz = np.zeros_like(z)
            dz[rows, labels] = -w / ens.size
        total += np.einsum("nk,nk...->n...", dz, jac)
    return total


def shared_submodel_count(a, b) -> int:
    return len(set(as_ensemble(a).member_ids) & set(as_ensemble(b).member_ids))


def enumerate_subsets(pool: Sequence, size: int, cap: int | None = None,
                      rng: np.random.Generator | None = None) -> list[tuple]:
    """All size-k combinations of ``pool``, or a seeded uniform sample of ``cap`` of them."""
    combos = list(itertools.combinations(pool, size))
    if cap is None or cap >= len(combos):
        return combos
    rng = rng or np.random.default_rng(0)
    picks = np.sort(rng.choice(len(combos), size=cap, replace=False))
    return [combos[i] for i in picks]
