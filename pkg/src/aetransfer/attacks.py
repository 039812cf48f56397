"""FGSM, FGM and DeepFool-l2 against single models or ensembles.

A source image the target already misclassifies counts as an adversarial
example as-is and is never modified.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field

import numpy as np

from . import ensemble as ens_mod
from . import metrics, nn
from .nn import TrainedModel

METHODS = ("fgsm", "fgm", "deepfool-l2")
PIXEL_MIN, PIXEL_MAX = 0.0, 255.0


class AttackError(RuntimeError):
    pass


class DegenerateBoundaryError(AttackError):
    pass


@dataclass(frozen=True)
class AttackConfig:
    method: str = "deepfool-l2"
    epsilon: float = 2.0
    deepfool_max_iters: int = 50
    deepfool_overshoot: float = 0.02
    clamp_to_domain: bool = False
    chunk: int = 100

    def __post_init__(self):
        if self.method not in METHODS:
            raise AttackError(f"unknown attack method {self.method!r}; choose from {METHODS}")
        if self.method in ("fgsm", "fgm") and not self.epsilon > 0:
            raise AttackError("epsilon must be > 0")
        if self.deepfool_max_iters < 0 or self.deepfool_overshoot < 0:
            raise AttackError("deepfool max_iters and overshoot must be nonnegative")

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "AttackConfig":
        return cls(**d)


@dataclass
class AEBatch:
    source: np.ndarray
    adversarial: np.ndarray
    labels: np.ndarray
    target_id: str
    config: AttackConfig
    pre_misclassified: np.ndarray
    converged: np.ndarray
    iterations: np.ndarray
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        n = len(self.labels)
        for name in ("source", "adversarial", "pre_misclassified", "converged", "iterations"):
            if len(getattr(self, name)) != n:
                raise AttackError(f"AEBatch field {name} has length {len(getattr(self, name))}, expected {n}")

    @property
    def count(self) -> int:
        return len(self.labels)

    @property
    def perturbation(self) -> np.ndarray:
        return self.adversarial - self.source


def _gradient(target, x, y) -> np.ndarray:
    if isinstance(target, TrainedModel):
        g = nn.input_gradient(target, x, y)
    else:
        g = ens_mod.loss_gradient_wrt_input(target, x, y)
    if not np.all(np.isfinite(g)):
        raise AttackError("non-finite input gradient")
    return g


def _jacobian(target, x):
    if isinstance(target, TrainedModel):
        return nn.score_jacobian(target, x)
    return target.score_jacobian(x)


def _clamp(x: np.ndarray, on: bool) -> np.ndarray:
    return np.clip(x, PIXEL_MIN, PIXEL_MAX) if on else x


def fgsm(target, images, labels, epsilon: float, clamp: bool = False) -> np.ndarray:
    """q = p + epsilon * sign(grad), with sign(0) = 0."""
    p = np.asarray(images, dtype=np.float64)
    return _clamp(p + epsilon * np.sign(_gradient(target, p, labels)), clamp)


def fgm(target, images, labels, epsilon: float, clamp: bool = False) -> np.ndarray:
    """q = p + epsilon * g / ||g||_2 per image; images with ||g|| < 1e-12 are left alone."""
    p = np.asarray(images, dtype=np.float64)
    g = _gradient(target, p, labels)
    norms = np.sqrt((g.reshape(len(g), -1) ** 2).sum(axis=1))
    safe = np.where(norms < 1e-12, 1.0, norms)
    step = g / safe.reshape((-1,) + (1,) * (g.ndim - 1))
    step[norms < 1e-12] = 0.0
    return _clamp(p + epsilon * step, clamp)


def deepfool_l2(target, images, labels, max_iters: int = 50, overshoot: float = 0.02,
                clamp: bool = False) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Batched DeepFool with the l2 linearization.

    Linearizes the raw (summed, for ensembles) class scores and takes the
    minimal l2 step to the nearest boundary among the non-true classes.
    Returns (adversarial images, iterations used, converged flags); an image
    converges once the target misclassifies it.
    """
    x0 = np.asarray(images, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    n = len(x0)
    r_tot = np.zeros_like(x0)
    cur = x0.copy()
    iters = np.zeros(n, dtype=np.int64)
    converged = np.zeros(n, dtype=bool)
    active = np.arange(n)
    for _ in range(max_iters):
        if active.size == 0:
            break
        z, jac = _jacobian(target, cur[active])
        lab = labels[active]
        rows = np.arange(active.size)
        f = z - z[rows, lab][:, None]
        w = jac - jac[rows, lab][:, None]
        wn = np.sqrt((w.reshape(active.size, z.shape[1], -1) ** 2).sum(axis=2))
        ratio = np.full_like(f, np.inf)
        ok = wn >= 1e-12
        ratio[ok] = np.abs(f[ok]) / wn[ok]
        ratio[rows, lab] = np.inf
        if np.any(np.all(np.isinf(ratio), axis=1)):
            bad = int(active[np.flatnonzero(np.all(np.isinf(ratio), axis=1))[0]])
            raise DegenerateBoundaryError(f"image {bad}: all class-gradient differences have norm < 1e-12")
        k = np.argmin(ratio, axis=1)
        wk = w[rows, k]
        scale = np.abs(f[rows, k]) / wn[rows, k] ** 2
        r_tot[active] += scale.reshape((-1,) + (1,) * (wk.ndim - 1)) * wk
        cur[active] = _clamp(x0[active] + (1.0 + overshoot) * r_tot[active], clamp)
        iters[active] += 1
        pred = nn.model_predict(target, cur[active])
        fooled = pred != lab
        converged[active[fooled]] = True
        active = active[~fooled]
    return cur, iters, converged


def generate_batch(target, images, labels, cfg: AttackConfig, target_id: str | None = None) -> AEBatch:
    p = np.asarray(images, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    n = len(p)
    q = p.copy()
    iters = np.zeros(n, dtype=np.int64)
    conv = np.zeros(n, dtype=bool)
    pre = nn.model_predict(target, p) != labels
    todo = np.flatnonzero(~pre)
    for start in range(0, len(todo), cfg.chunk):
        idx = todo[start:start + cfg.chunk]
        try:
            if cfg.method == "fgsm":
                q[idx] = fgsm(target, p[idx], labels[idx], cfg.epsilon, cfg.clamp_to_domain)
            elif cfg.method == "fgm":
                q[idx] = fgm(target, p[idx], labels[idx], cfg.epsilon, cfg.clamp_to_domain)
            else:
                q[idx], iters[idx], conv[idx] = deepfool_l2(
                    target, p[idx], labels[idx], cfg.deepfool_max_iters,
                    cfg.deepfool_overshoot, cfg.clamp_to_domain)
        except Exception as exc:
            raise AttackError(f"attack failed on images {int(idx[0])}..{int(idx[-1])}: {exc}") from exc
    if cfg.method != "deepfool-l2" and len(todo):
        conv[todo] = nn.model_predict(target, q[todo]) != labels[todo]
    q[pre] = p[pre]
    return AEBatch(p, q, labels, target_id or target.model_id, cfg, pre, conv, iters)


def amplify_to_magnitude(batch: AEBatch, target_m: float, mode: str = "global",
                         allow_reduce: bool = False, clamp: bool = False) -> AEBatch:
    """Scale perturbations so the batch noise magnitude becomes ``target_m``.

    ``global`` applies one factor to every image; ``per-image`` rescales each
    nonzero perturbation to magnitude ``target_m`` on its own.  Shrinking is
    refused unless ``allow_reduce``.
    """
    current = metrics.noise_magnitude(batch).value
    if current == 0:
        raise AttackError("cannot amplify a batch with zero noise magnitude")
    if target_m < current and not allow_reduce:
        raise AttackError(f"target magnitude {target_m} is below the current magnitude {current}")
    delta = batch.perturbation
    if mode == "global":
        factor = target_m / current
        new_q = batch.source + factor * delta
        factors = np.full(batch.count, factor)
    elif mode == "per-image":
        mags = metrics.per_image_magnitude(batch.source, batch.adversarial)
        factors = np.where(mags > 0, target_m / np.where(mags > 0, mags, 1.0), 1.0)
        new_q = batch.source + factors.reshape((-1,) + (1,) * (delta.ndim - 1)) * delta
    else:
        raise AttackError(f"unknown amplification mode {mode!r}")
    new_q = _clamp(new_q, clamp)
    new_q[batch.pre_misclassified] = batch.source[batch.pre_misclassified]
    meta = dict(batch.meta)
    meta.update({"amplified_from": current, "amplified_to": float(target_m), "amplify_mode": mode})
    if mode == "global":
        meta["amplify_factor"] = float(factors[0])
    return dataclasses.replace(batch, adversarial=new_q, meta=meta)
