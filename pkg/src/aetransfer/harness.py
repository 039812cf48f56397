"""Experiment protocol: target groups, test groups, group-wise AASR matrix, noise.

A run generates one adversarial batch per target (optionally amplified to a
common noise magnitude), predicts every needed (target, test model) pair once,
and reduces those prediction logs into an AASR matrix with per-cell
provenance.  Everything is seeded; identical specs give identical outputs.
"""

from __future__ import annotations

import dataclasses
import hashlib
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import attacks, metrics, nn, store
from .attacks import AEBatch, AttackConfig
from .data import DatasetSplit
from .ensemble import EnsembleModel, as_ensemble, enumerate_subsets
from .metrics import AasrResult, AsrResult, NoiseReport
from .nn import ModelSpec, TrainConfig, TrainedModel

log = logging.getLogger(__name__)

ZOO_GROUPS = ("ResNet-L1", "ResNet-L2", "ResNet-SVM-L1", "ResNet-SVM-L2")


class ExperimentError(RuntimeError):
    pass


class MissingModelError(ExperimentError, KeyError):
    pass


@dataclass
class ModelGroup:
    name: str
    members: list[str]
    prop: str = ""
    # test groups only: target id -> the test ids used for that target
    per_target: dict[str, list[str]] | None = None

    def __post_init__(self):
        self.members = list(self.members)
        if not self.members:
            raise ExperimentError(f"group {self.name!r} has no members")

    def tests_for(self, target_id: str) -> list[str]:
        if self.per_target is None:
            return list(self.members)
        return list(self.per_target.get(target_id, []))

    def to_dict(self) -> dict:
        d = {"name": self.name, "members": list(self.members), "prop": self.prop}
        if self.per_target is not None:
            d["per_target"] = {k: list(v) for k, v in self.per_target.items()}
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelGroup":
        return cls(d["name"], d["members"], d.get("prop", ""), d.get("per_target"))


@dataclass
class ExperimentSpec:
    name: str
    target_groups: list[ModelGroup]
    test_groups: list[ModelGroup]
    attack: AttackConfig
    models: dict[str, TrainedModel | EnsembleModel]
    split: DatasetSplit
    ae_count: int | None = None
    evaluate_noise: bool = False
    # a float, or "largest" for the magnitude of the target with the most sub-models
    amplify_to: float | str | None = None
    amplify_mode: str = "global"
    seed: int = 0
    labels: dict[str, str] = field(default_factory=dict)
    notes: dict = field(default_factory=dict)

    def validate(self) -> "ExperimentSpec":
        for kind, groups in (("target", self.target_groups), ("test", self.test_groups)):
            names = [g.name for g in groups]
            if len(set(names)) != len(names):
                raise ExperimentError(f"duplicate {kind} group names: {names}")
            for g in groups:
                ids = list(g.members) + [i for v in (g.per_target or {}).values() for i in v]
                for mid in ids:
                    if mid not in self.models:
                        raise MissingModelError(f"{kind} group {g.name!r} references unknown model {mid}")
        return self

    def target_ids(self) -> list[str]:
        seen: dict[str, None] = {}
        for g in self.target_groups:
            for mid in g.members:
                seen.setdefault(mid, None)
        return list(seen)

    def config_dict(self) -> dict:
        return {
            "name": self.name,
            "target_groups": [g.to_dict() for g in self.target_groups],
            "test_groups": [g.to_dict() for g in self.test_groups],
            "attack": self.attack.to_dict(),
            "ae_count": self.ae_count,
            "evaluate_noise": self.evaluate_noise,
            "amplify_to": self.amplify_to,
            "amplify_mode": self.amplify_mode,
            "seed": self.seed,
            "labels": dict(self.labels),
            "notes": self.notes,
        }

    def config_hash(self) -> str:
        return hashlib.sha256(store.dumps_json(self.config_dict()).encode()).hexdigest()[:16]


@dataclass
class AasrMatrix:
    rows: list[str]
    cols: list[str]
    cells: list[list[AasrResult | None]]
    provenance: list[list[list[AsrResult]]]

    @property
    def shape(self) -> tuple[int, int]:
        return len(self.rows), len(self.cols)

    def value(self, row: str, col: str) -> float:
        cell = self.cells[self.rows.index(row)][self.cols.index(col)]
        return float("nan") if cell is None else cell.value

    def values(self) -> np.ndarray:
        return np.array([[np.nan if c is None else c.value for c in row] for row in self.cells])

    def to_dict(self) -> dict:
        return {
            "rows": list(self.rows),
            "cols": list(self.cols),
            "cells": [[None if c is None else c.to_dict() for c in row] for row in self.cells],
            "provenance": [[[a.to_dict() for a in cell] for cell in row] for row in self.provenance],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "AasrMatrix":
        def asr(a):
            return AsrResult(a["fool_counts"], a["total"], a["value"], a["test_ids"], a["target_id"])

        def aasr(c):
            return None if c is None else AasrResult(c["asrs"], c["value"], c["target_ids"])

        return cls(d["rows"], d["cols"], [[aasr(c) for c in row] for row in d["cells"]],
                   [[[asr(a) for a in cell] for cell in row] for row in d["provenance"]])

    def to_json(self) -> str:
        return store.dumps_json(self.to_dict()) + "\n"

    def to_csv(self) -> str:
        lines = ["target_group,test_group,aasr,n,target_ids"]
        for i, r in enumerate(self.rows):
            for j, c in enumerate(self.cols):
                cell = self.cells[i][j]
                if cell is None:
                    lines.append(f"{r},{c},,0,")
                else:
                    lines.append(f"{r},{c},{cell.value!r},{cell.n},{' '.join(cell.target_ids)}")
        return "\n".join(lines) + "\n"


@dataclass
class ExperimentResult:
    spec: ExperimentSpec
    matrix: AasrMatrix
    batches: dict[str, AEBatch]
    predictions: dict[tuple[str, str], np.ndarray]
    noise: dict[str, NoiseReport]
    group_noise: dict[str, NoiseReport]
    manifest: dict

    def write(self, out_dir) -> dict[str, Path]:
        """Matrix CSV/JSON, noise CSV, prediction logs, batches and manifest."""
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        paths = {
            "matrix_json": out / "aasr_matrix.json",
            "matrix_csv": out / "aasr_matrix.csv",
            "manifest": out / "manifest.json",
            "predictions": out / "predictions.aetx",
            "config": out / "experiment.json",
        }
        paths["matrix_json"].write_text(self.matrix.to_json())
        paths["matrix_csv"].write_text(self.matrix.to_csv())
        paths["manifest"].write_text(store.dumps_json(self.manifest) + "\n")
        paths["config"].write_text(store.dumps_json(self.spec.config_dict()) + "\n")
        store.write_bytes(paths["predictions"], encode_prediction_log(self.predictions, self.labels_array()))
        if self.noise:
            paths["noise_csv"] = out / "noise.csv"
            paths["noise_csv"].write_text(noise_csv(self.noise, self.group_noise))
        bdir = out / "batches"
        for tid, b in self.batches.items():
            store.save_batch(b, bdir / f"{tid}.aetx")
        return paths

    def labels_array(self) -> np.ndarray:
        first = next(iter(self.batches.values()))
        return first.labels


def encode_prediction_log(predictions: dict[tuple[str, str], np.ndarray], labels: np.ndarray) -> bytes:
    arrays = {f"pred/{t}/{s}": np.asarray(p, dtype=np.int64) for (t, s), p in predictions.items()}
    arrays["labels"] = np.asarray(labels, dtype=np.int64)
    return store.encode_container("predictions", {}, arrays)


def decode_prediction_log(raw: bytes) -> tuple[dict[tuple[str, str], np.ndarray], np.ndarray]:
    _, _, arrays = store.decode_container(raw, "predictions")
    labels = arrays.pop("labels")
    preds = {}
    for k, v in arrays.items():
        _, t, s = k.split("/")
        preds[(t, s)] = v
    return preds, labels


def noise_csv(per_target: dict[str, NoiseReport], per_group: dict[str, NoiseReport]) -> str:
    lines = ["scope,name,count,rows,cols,channels,mode,magnitude"]
    for scope, reports in (("group", per_group), ("target", per_target)):
        for name, r in reports.items():
            lines.append(f"{scope},{name},{r.count},{r.rows},{r.cols},{r.channels},{r.mode},{r.value!r}")
    return "\n".join(lines) + "\n"


def _sha(raw: bytes) -> str:
    return hashlib.sha256(raw).hexdigest()[:16]


def _member_count(model) -> int:
    return as_ensemble(model).size


# ---- running ---------------------------------------------------------------


def batch_cache_key(target_id: str, cfg: AttackConfig, split: DatasetSplit, count: int) -> str:
    return f"{target_id}|{store.dumps_json(cfg.to_dict())}|{split.fingerprint()}|{count}"


def run_experiment(spec: ExperimentSpec, batch_cache: dict | None = None) -> ExperimentResult:
    spec.validate()
    count = len(spec.split) if spec.ae_count is None else min(spec.ae_count, len(spec.split))
    images, labels = spec.split.images[:count], spec.split.labels[:count]
    cache = {} if batch_cache is None else batch_cache

    raw_batches: dict[str, AEBatch] = {}
    for tid in spec.target_ids():
        key = batch_cache_key(tid, spec.attack, spec.split, count)
        if key not in cache:
            log.info("%s: attacking %s", spec.name, spec.labels.get(tid, tid))
            try:
                cache[key] = attacks.generate_batch(spec.models[tid], images, labels, spec.attack, tid)
            except Exception as exc:
                raise ExperimentError(f"attack on target {tid} failed: {exc}") from exc
        raw_batches[tid] = cache[key]

    batches = dict(raw_batches)
    amplify_target = None
    if spec.amplify_to is not None:
        amplify_target = resolve_amplify_target(spec, raw_batches)
        for tid, b in raw_batches.items():
            if metrics.noise_magnitude(b).value == 0:
                continue
            batches[tid] = attacks.amplify_to_magnitude(b, amplify_target, spec.amplify_mode,
                                                        allow_reduce=True)

    predictions: dict[tuple[str, str], np.ndarray] = {}

    def preds(tid: str, sid: str) -> np.ndarray:
        key = (tid, sid)
        if key not in predictions:
            try:
                predictions[key] = nn.model_predict(spec.models[sid], batches[tid].adversarial)
            except Exception as exc:
                raise ExperimentError(f"evaluating target {tid} on test model {sid} failed: {exc}") from exc
        return predictions[key]

    cells, prov = [], []
    for tg in spec.target_groups:
        row_cells, row_prov = [], []
        for sg in spec.test_groups:
            asrs = []
            for tid in tg.members:
                tests = sg.tests_for(tid)
                if not tests:
                    continue
                asrs.append(metrics.asr_from_predictions([preds(tid, s) for s in tests], labels, tests, tid))
            row_cells.append(metrics.compute_aasr(asrs) if asrs else None)
            row_prov.append(asrs)
        cells.append(row_cells)
        prov.append(row_prov)
    matrix = AasrMatrix([g.name for g in spec.target_groups], [g.name for g in spec.test_groups], cells, prov)

    noise, group_noise = {}, {}
    if spec.evaluate_noise:
        for tid, b in batches.items():
            noise[tid] = metrics.noise_magnitude(b)
        for g in spec.target_groups:
            p = np.concatenate([batches[t].source for t in g.members])
            q = np.concatenate([batches[t].adversarial for t in g.members])
            group_noise[g.name] = metrics.noise_magnitude_arrays(p, q, target_id=g.name)

    manifest = build_manifest(spec, count, batches, matrix, amplify_target)
    return ExperimentResult(spec, matrix, batches, predictions, noise, group_noise, manifest)


def resolve_amplify_target(spec: ExperimentSpec, batches: dict[str, AEBatch]) -> float:
    if isinstance(spec.amplify_to, str):
        if spec.amplify_to != "largest":
            raise ExperimentError(f"unknown amplify_to {spec.amplify_to!r}")
        # pooled magnitude over every target with the most sub-models
        most = max(_member_count(spec.models[t]) for t in batches)
        refs = [t for t in batches if _member_count(spec.models[t]) == most]
        p = np.concatenate([batches[t].source for t in refs])
        q = np.concatenate([batches[t].adversarial for t in refs])
        return metrics.noise_magnitude_arrays(p, q).value
    return float(spec.amplify_to)


def build_manifest(spec: ExperimentSpec, count: int, batches: dict[str, AEBatch], matrix: AasrMatrix,
                   amplify_target: float | None) -> dict:
    models = {}
    for mid, m in sorted(spec.models.items()):
        if isinstance(m, EnsembleModel):
            models[mid] = {"kind": "ensemble", "members": list(m.member_ids), "weights": list(m.weights),
                           "mixed_heads": m.mixed_heads, "gradient_mode": m.gradient_mode}
        else:
            models[mid] = {"kind": "model", "describe": m.spec.describe(), "spec": m.spec.to_dict(),
                           "seed": m.seed, "test_accuracy": m.meta.get("test_accuracy")}
    return {
        "experiment": spec.name,
        "seed": spec.seed,
        "config_hash": spec.config_hash(),
        "dataset": {"fingerprint": spec.split.fingerprint(), "name": spec.split.name,
                    "source": spec.split.source, "ae_count": count},
        "attack": spec.attack.to_dict(),
        "amplify_to": amplify_target,
        "models": models,
        "labels": dict(spec.labels),
        "batches": {tid: _sha(store.encode_batch(b)) for tid, b in batches.items()},
        "matrix_sha": _sha(matrix.to_json().encode()),
        "notes": spec.notes,
    }


# ---- model generation ------------------------------------------------------


class ModelStore:
    """Trains models on demand and memoizes them, optionally on disk.

    Keys cover the full recipe (spec, seed, train config, dataset fingerprint,
    parent), so a hit returns exactly what training would produce.
    """

    def __init__(self, root: str | Path | None = None):
        self.root = Path(root) if root is not None else None
        self._mem: dict[str, TrainedModel] = {}

    def _key(self, recipe: dict) -> str:
        return hashlib.sha256(store.dumps_json(recipe).encode()).hexdigest()[:20]

    def _get(self, recipe: dict, make) -> TrainedModel:
        key = self._key(recipe)
        if key in self._mem:
            return self._mem[key]
        path = self.root / "models" / f"{key}.aetx" if self.root is not None else None
        if path is not None and path.exists():
            model = store.load_model(path)
        else:
            model = make()
            if path is not None:
                store.save_model(model, path)
        self._mem[key] = model
        return model

    def train(self, spec: ModelSpec, seed: int, cfg: TrainConfig, splits: dict[str, DatasetSplit]) -> TrainedModel:
        recipe = {"op": "train", "spec": spec.to_dict(), "seed": seed, "cfg": cfg.to_dict(),
                  "data": splits["train"].fingerprint()}

        def make():
            return nn.train(nn.build(spec, seed), splits["train"], cfg, splits.get("test"))

        return self._get(recipe, make)

    def svm_from(self, parent: TrainedModel, cfg: TrainConfig, splits: dict[str, DatasetSplit]) -> TrainedModel:
        recipe = {"op": "svm", "parent": parent.model_id, "cfg": cfg.to_dict(),
                  "data": splits["train"].fingerprint()}

        def make():
            return nn.replace_head_svm(parent, splits["train"], cfg, splits.get("test"))

        return self._get(recipe, make)


def lambda_grid(lam_max: float, count: int, floor: float) -> list[float]:
    """0 followed by count-1 geometrically spaced values from floor to lam_max."""
    if count < 1:
        raise ExperimentError("count must be >= 1")
    if count == 1:
        return [0.0]
    if not 0 < floor <= lam_max:
        raise ExperimentError(f"need 0 < floor <= max, got floor={floor}, max={lam_max}")
    if count == 2:
        return [0.0, float(lam_max)]
    pts = list(np.geomspace(floor, lam_max, count - 1))
    pts[0], pts[-1] = float(floor), float(lam_max)
    return [0.0] + [float(p) for p in pts]


def _seed_for(base: int, *parts) -> int:
    h = hashlib.sha256(store.dumps_json([base, *parts]).encode()).digest()
    return int.from_bytes(h[:4], "little")


def make_regularized_zoo(base_spec: ModelSpec, l1_range: tuple[float, float], l2_range: tuple[float, float],
                         count: int, seed: int, splits: dict[str, DatasetSplit], cfg: TrainConfig,
                         svm_cfg: TrainConfig | None = None, floors: tuple[float, float] = (0.05, 0.35),
                         reg_scale: float = 1.0, model_store: ModelStore | None = None,
                         groups: Sequence[str] = ZOO_GROUPS,
                         ) -> tuple[dict[str, ModelGroup], dict[str, TrainedModel]]:
    """Four groups of regularized models: {softmax, svm} heads x {l1, l2} penalties.

    Each group's lambdas are 0 plus a geometric grid up to the range's upper
    end; the lambda-0 member is unregularized (regularizer "none").
    """
    if count < 1:
        raise ExperimentError("count per type must be >= 1")
    for lo, hi in (l1_range, l2_range):
        if lo < 0 or hi < lo:
            raise ExperimentError(f"invalid lambda range ({lo}, {hi})")
    model_store = model_store or ModelStore()
    svm_cfg = svm_cfg or cfg
    out_groups, models = {}, {}
    for gname in groups:
        head = "svm" if "SVM" in gname else "softmax"
        reg = gname.rsplit("-", 1)[1].lower()
        (lo, hi), floor = (l1_range, floors[0]) if reg == "l1" else (l2_range, floors[1])
        ids = []
        for i, lam in enumerate(lambda_grid(hi, count, max(floor, lo) if lo > 0 else floor)):
            spec = dataclasses.replace(base_spec, head=head, regularizer=reg if lam > 0 else "none",
                                       reg_lambda=lam, reg_scale=reg_scale).validate()
            mseed = _seed_for(seed, gname, i)
            tcfg = dataclasses.replace(svm_cfg if head == "svm" else cfg, seed=mseed)
            try:
                m = model_store.train(spec, mseed, tcfg, splits)
            except Exception as exc:
                raise ExperimentError(f"training {gname}[{i}] (lambda={lam}) failed: {exc}") from exc
            models[m.model_id] = m
            ids.append(m.model_id)
        out_groups[gname] = ModelGroup(gname, ids, prop=f"{head}-head, {reg} regularization")
    return out_groups, models


def enumerate_ensembles(pool: Sequence[str], models: dict, sizes: Sequence[int], cap: int | None = None,
                        seed: int = 0, prefix: str = "size") -> tuple[dict[int, ModelGroup], dict[str, EnsembleModel]]:
    """Ensembles (weights 1) over subsets of ``pool``, grouped by size."""
    pool = list(pool)
    rng = np.random.default_rng(seed)
    groups, ensembles = {}, {}
    for k in sizes:
        if not 1 <= k <= len(pool):
            raise ExperimentError(f"ensemble size {k} outside [1, {len(pool)}]")
        ids = []
        for combo in enumerate_subsets(pool, k, cap, rng):
            e = EnsembleModel(tuple(models[m] for m in combo))
            ensembles[e.model_id] = e
            ids.append(e.model_id)
        groups[k] = ModelGroup(f"{prefix}-{k}", ids, prop=f"ensembles with {k} sub-models")
    return groups, ensembles


# ---- scale profiles and presets --------------------------------------------

PRESETS = tuple(f"experiment-{i}" for i in range(1, 9))


@dataclass(frozen=True)
class ScaleConfig:
    """Everything that differs between a laptop run and a full-size run."""

    name: str = "desk"
    dataset: str = "synthetic"  # or "cifar10"
    cifar_path: str | None = None
    train_size: int = 2000
    test_size: int = 500
    image_size: int = 16
    channels: tuple[int, ...] = (4, 8, 16)
    blocks: tuple[int, ...] = (1, 1, 1)
    depth_variants: tuple[tuple[int, ...], ...] = ((1, 1, 1), (2, 2, 2))
    train: TrainConfig = TrainConfig()
    svm_train: TrainConfig = TrainConfig()
    reg_scale: float = 1e-4
    l1_range: tuple[float, float] = (0.0, 5.0)
    l2_range: tuple[float, float] = (0.0, 35.0)
    lambda_floors: tuple[float, float] = (0.05, 0.35)
    zoo_count: int = 5
    exp3_lambdas: tuple[float, ...] = (5.0, 4.999999, 4.9999999)
    exp4_picks: tuple[int, int] = (3, 3)
    exp6_picks: tuple[int, int] = (4, 4)
    exp8_counts: tuple[int, int] = (5, 5)
    ae_count: int | None = 200
    exp4_cap: int | None = 3
    exp6_cap: int | None = 3
    exp8_cap: int | None = 3
    attack: AttackConfig = AttackConfig()

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["train"], d["svm_train"] = self.train.to_dict(), self.svm_train.to_dict()
        d["attack"] = self.attack.to_dict()
        return d

    def base_spec(self, head: str = "softmax", blocks: tuple[int, ...] | None = None) -> ModelSpec:
        return ModelSpec(blocks_per_stage=tuple(blocks or self.blocks), channels=self.channels, head=head,
                         input_shape=(3, self.image_size, self.image_size)).validate()


SCALES = {
    "desk": ScaleConfig(),
    "full": ScaleConfig(
        name="full", dataset="cifar10", train_size=50000, test_size=10000, image_size=32,
        channels=(16, 32, 64), blocks=(3, 3, 3), depth_variants=((3, 3, 3), (4, 3, 4), (4, 4, 4)),
        train=TrainConfig(epochs=160, batch_size=128, learning_rate=0.1),
        svm_train=TrainConfig(epochs=160, batch_size=128, learning_rate=0.05),
        reg_scale=1.0, exp8_counts=(9, 10), ae_count=None, exp4_cap=None, exp6_cap=None, exp8_cap=3,
    ),
    # seconds-long plumbing check; the models barely train
    "smoke": ScaleConfig(
        name="smoke", train_size=200, test_size=50, image_size=8, channels=(4, 8), blocks=(1, 1),
        depth_variants=((1, 1), (1, 2)), train=TrainConfig(epochs=2), svm_train=TrainConfig(epochs=2),
        zoo_count=3, exp4_picks=(2, 1), exp6_picks=(2, 2), exp8_counts=(2, 3), ae_count=20,
    ),
}


def get_scale(name: str, **overrides) -> ScaleConfig:
    if name not in SCALES:
        raise ExperimentError(f"unknown scale {name!r}; choose from {sorted(SCALES)}")
    return dataclasses.replace(SCALES[name], **overrides) if overrides else SCALES[name]


class Lab:
    """Shared state for preset runs: data, trained models, cached AE batches."""

    def __init__(self, scale: ScaleConfig | str = "desk", seed: int = 0, root: str | Path | None = None):
        self.scale = get_scale(scale) if isinstance(scale, str) else scale
        self.seed = seed
        self.models = ModelStore(root)
        self.batches: dict = {}
        self._splits = None
        self._zoo = None

    @property
    def splits(self) -> dict[str, DatasetSplit]:
        if self._splits is None:
            s = self.scale
            if s.dataset == "cifar10":
                from .data import ingest_cifar10
                if not s.cifar_path:
                    raise ExperimentError("scale uses cifar10 but cifar_path is unset")
                down = s.image_size if s.image_size != 32 else None
                sub = s.train_size if s.train_size < 50000 else None
                tsub = s.test_size if s.test_size < 10000 else None
                self._splits = ingest_cifar10(s.cifar_path, sub, tsub, down, seed=self.seed)
            elif s.dataset == "synthetic":
                from .data import make_synthetic
                self._splits = make_synthetic(10, s.train_size // 10, s.image_size, seed=self.seed,
                                              test_per_class=s.test_size // 10)
            else:
                raise ExperimentError(f"unknown dataset kind {s.dataset!r}")
        return self._splits

    def zoo(self) -> tuple[dict[str, ModelGroup], dict[str, TrainedModel]]:
        if self._zoo is None:
            s = self.scale
            self._zoo = make_regularized_zoo(
                s.base_spec(), s.l1_range, s.l2_range, s.zoo_count, self.seed, self.splits, s.train,
                svm_cfg=s.svm_train, floors=s.lambda_floors, reg_scale=s.reg_scale, model_store=self.models)
        return self._zoo

    def _spec(self, name, targets, tests, models, **kw) -> ExperimentSpec:
        labels = {mid: _label(m) for mid, m in models.items()}
        return ExperimentSpec(name, targets, tests, self.scale.attack, models, self.splits["test"],
                              ae_count=self.scale.ae_count, seed=self.seed, labels=labels,
                              notes={"scale": self.scale.to_dict()}, **kw).validate()

    def _pick(self, ids: list[str], k: int, tag: str) -> tuple[list[str], list[str]]:
        """Seeded choice of k ids; returns (picked, rest), both in input order."""
        if k > len(ids):
            raise ExperimentError(f"cannot pick {k} of {len(ids)} models")
        rng = np.random.default_rng(_seed_for(self.seed, "pick", tag))
        chosen = set(rng.choice(len(ids), size=k, replace=False).tolist())
        return [m for i, m in enumerate(ids) if i in chosen], [m for i, m in enumerate(ids) if i not in chosen]

    def preset(self, name: str) -> ExperimentSpec:
        builders = {
            "experiment-1": self._exp1, "experiment-2": self._exp2, "experiment-3": self._exp3,
            "experiment-4": self._exp4, "experiment-5": self._exp5, "experiment-6": self._exp6,
            "experiment-7": self._exp7, "experiment-8": self._exp8,
        }
        if name not in builders:
            raise ExperimentError(f"unknown preset {name!r}; choose from {list(PRESETS)}")
        return builders[name]()

    def run(self, name: str) -> ExperimentResult:
        return run_experiment(self.preset(name), self.batches)

    # Experiment 1: softmax vs svm heads at several depths; each target tested
    # on itself and on its other-head twin.
    def _exp1(self) -> ExperimentSpec:
        s = self.scale
        models, soft_ids, svm_ids = {}, [], []
        self_map, other_map = {}, {}
        for i, blocks in enumerate(s.depth_variants):
            seed = _seed_for(self.seed, "exp1", i)
            soft = self.models.train(s.base_spec("softmax", blocks), seed,
                                     dataclasses.replace(s.train, seed=seed), self.splits)
            svm = self.models.svm_from(soft, dataclasses.replace(s.svm_train, seed=seed), self.splits)
            models[soft.model_id], models[svm.model_id] = soft, svm
            soft_ids.append(soft.model_id)
            svm_ids.append(svm.model_id)
            for a, b in ((soft, svm), (svm, soft)):
                self_map[a.model_id] = [a.model_id]
                other_map[a.model_id] = [b.model_id]
        everything = soft_ids + svm_ids
        targets = [ModelGroup("ResNet", soft_ids, "softmax head"), ModelGroup("ResNet-SVM", svm_ids, "svm head")]
        tests = [ModelGroup("itself", everything, "the target model", self_map),
                 ModelGroup("other-head", everything, "same depth, other head", other_map)]
        return self._spec("experiment-1", targets, tests, models)

    def _exp2(self) -> ExperimentSpec:
        groups, models = self.zoo()
        g = [groups[n] for n in ZOO_GROUPS]
        return self._spec("experiment-2", g, g, dict(models), evaluate_noise=True)

    # Experiment 3: nearly identical L2 strengths, independent seeds.
    def _exp3(self) -> ExperimentSpec:
        s = self.scale
        models, groups = {}, []
        for i, lam in enumerate(s.exp3_lambdas):
            spec = dataclasses.replace(s.base_spec(), regularizer="l2", reg_lambda=lam,
                                       reg_scale=s.reg_scale).validate()
            seed = _seed_for(self.seed, "exp3", i)
            m = self.models.train(spec, seed, dataclasses.replace(s.train, seed=seed), self.splits)
            models[m.model_id] = m
            groups.append(ModelGroup(f"L2({lam:.7f})", [m.model_id], f"l2 lambda {lam!r}"))
        return self._spec("experiment-3", groups, groups, models)

    def _exp4_parts(self):
        groups, zoo = self.zoo()
        p1, r1 = self._pick(groups["ResNet-L1"].members, self.scale.exp4_picks[0], "exp4-l1")
        p2, r2 = self._pick(groups["ResNet-L2"].members, self.scale.exp4_picks[1], "exp4-l2")
        selected, others = p1 + p2, r1 + r2
        by_size, ens = enumerate_ensembles(selected, zoo, range(1, len(selected) + 1), self.scale.exp4_cap,
                                           _seed_for(self.seed, "exp4-enum"))
        full = EnsembleModel(tuple(zoo[m] for m in selected))
        ens[full.model_id] = full
        # the full ensemble is always a target even when the per-size sample is capped
        by_size[len(selected)] = ModelGroup(f"size-{len(selected)}", [full.model_id])
        return zoo, selected, others, by_size, ens, full

    # Experiment 4: ensembles of the selected models plus the unselected ones,
    # grouped by how many sub-models they share with the full ensemble.
    def _exp4(self) -> ExperimentSpec:
        zoo, selected, others, by_size, ens, full = self._exp4_parts()
        models = {**{m: zoo[m] for m in selected + others}, **ens}
        targets = [ModelGroup("shared-0", others, "no shared sub-models")]
        targets += [ModelGroup(f"shared-{k}", g.members, f"{k} shared sub-models") for k, g in sorted(by_size.items())]
        tests = [ModelGroup(f"ensemble-{len(selected)}", [full.model_id], "all selected models")]
        return self._spec("experiment-4", targets, tests, models)

    # Experiment 5: the same ensembles, each scored on the sub-models it contains.
    def _exp5(self) -> ExperimentSpec:
        zoo, selected, _, by_size, ens, _ = self._exp4_parts()
        models = {**{m: zoo[m] for m in selected}, **ens}
        per_target = {eid: list(e.member_ids) for eid, e in ens.items()}
        targets = [ModelGroup(f"redundant-{k - 1}", g.members, f"{k - 1} redundant sub-models")
                   for k, g in sorted(by_size.items())]
        tests = [ModelGroup("contained", selected, "each contained sub-model", per_target)]
        check_contains(targets, tests[0], models)
        return self._spec("experiment-5", targets, tests, models)

    def _exp6_parts(self):
        groups, zoo = self.zoo()
        p1, r1 = self._pick(groups["ResNet-L1"].members, self.scale.exp6_picks[0], "exp6-l1")
        p2, r2 = self._pick(groups["ResNet-L2"].members, self.scale.exp6_picks[1], "exp6-l2")
        pool, held = p1 + p2, r1 + r2
        by_size, ens = enumerate_ensembles(pool, zoo, range(1, len(pool) + 1), self.scale.exp6_cap,
                                           _seed_for(self.seed, "exp6-enum"))
        models = {**{m: zoo[m] for m in held}, **ens}
        return [g for _, g in sorted(by_size.items())], [ModelGroup("held-out", held, "unselected models")], models

    # Experiment 6: ensemble size vs transfer to held-out regularized models.
    def _exp6(self) -> ExperimentSpec:
        targets, tests, models = self._exp6_parts()
        return self._spec("experiment-6", targets, tests, models, evaluate_noise=True)

    # Experiment 7: as 6, with every batch rescaled to the largest ensemble's magnitude.
    def _exp7(self) -> ExperimentSpec:
        targets, tests, models = self._exp6_parts()
        return self._spec("experiment-7", targets, tests, models, evaluate_noise=True, amplify_to="largest")

    # Experiment 8: many sizes, a few ensembles each, one held-out L2 model with
    # a strength no pool member uses.
    def _exp8(self) -> ExperimentSpec:
        s = self.scale
        n1, n2 = s.exp8_counts
        spec = s.base_spec()
        g1, m1 = make_regularized_zoo(spec, s.l1_range, s.l2_range, n1, self.seed, self.splits, s.train,
                                      floors=s.lambda_floors, reg_scale=s.reg_scale, model_store=self.models,
                                      groups=("ResNet-L1",))
        g2, m2 = make_regularized_zoo(spec, s.l1_range, s.l2_range, n2, self.seed, self.splits, s.train,
                                      floors=s.lambda_floors, reg_scale=s.reg_scale, model_store=self.models,
                                      groups=("ResNet-L2",))
        zoo = {**m1, **m2}
        l2 = g2["ResNet-L2"].members
        test_id = max(l2, key=lambda m: zoo[m].spec.reg_lambda)
        pool = g1["ResNet-L1"].members + [m for m in l2 if m != test_id]
        by_size, ens = enumerate_ensembles(pool, zoo, range(1, len(pool) + 1), s.exp8_cap,
                                           _seed_for(self.seed, "exp8-enum"))
        models = {test_id: zoo[test_id], **ens}
        targets = [g for _, g in sorted(by_size.items())]
        tests = [ModelGroup("held-out-L2", [test_id], "largest l2 strength, not in any ensemble")]
        return self._spec("experiment-8", targets, tests, models)


def check_contains(targets: list[ModelGroup], test: ModelGroup, models: dict) -> None:
    """Every target ensemble must contain each of its test models as a sub-model."""
    for g in targets:
        for tid in g.members:
            have = set(as_ensemble(models[tid]).member_ids)
            missing = [s for s in test.tests_for(tid) if s not in have]
            if missing or not test.tests_for(tid):
                raise ExperimentError(f"target {tid} in {g.name} does not contain test models {missing}")


def _label(model) -> str:
    if isinstance(model, EnsembleModel):
        return "ens{" + ",".join(m.spec.describe() for m, _ in model._sorted()) + "}"
    return model.spec.describe()


# ---- config files ----------------------------------------------------------


def load_config(path) -> dict:
    import yaml

    try:
        cfg = yaml.safe_load(Path(path).read_text())
    except yaml.YAMLError as exc:
        raise ExperimentError(f"invalid config {path}: {exc}") from exc
    if not isinstance(cfg, dict):
        raise ExperimentError(f"config {path} must be a mapping")
    return cfg


def spec_from_config(cfg: dict, base_dir: str | Path = ".") -> ExperimentSpec:
    """Bind a config mapping to stored artifacts.

    Keys: name, models (name -> model/ensemble-manifest path), dataset (path),
    split (default "test"), target_groups / test_groups (lists of
    {name, members, prop}), attack, ae_count, evaluate_noise, amplify_to,
    amplify_mode, seed.  Group members refer to keys of ``models``.
    """
    base = Path(base_dir)
    try:
        models = {}
        for key, p in cfg["models"].items():
            models[key] = store.load_target(base / p)
        splits = store.load_dataset(base / cfg["dataset"])
        split = splits[cfg.get("split", "test")]
        targets = [ModelGroup.from_dict(g) for g in cfg["target_groups"]]
        tests = [ModelGroup.from_dict(g) for g in cfg["test_groups"]]
        attack = AttackConfig.from_dict(cfg.get("attack", {}))
    except KeyError as exc:
        raise ExperimentError(f"config is missing key {exc}") from exc
    return ExperimentSpec(
        cfg.get("name", "custom"), targets, tests, attack, models, split, ae_count=cfg.get("ae_count"),
        evaluate_noise=bool(cfg.get("evaluate_noise", False)), amplify_to=cfg.get("amplify_to"),
        amplify_mode=cfg.get("amplify_mode", "global"), seed=int(cfg.get("seed", 0)),
        labels={k: _label(m) for k, m in models.items()},
    ).validate()
