"""Command-line entry point.

Every command prints one JSON record on stdout.  Failures print
``{"ok": false, "error": <type>, "message": ...}`` on stderr and exit nonzero
(2 for usage/config problems, 1 for everything else).
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from . import attacks, data, harness, metrics, nn, store
from .attacks import AttackConfig
from .ensemble import EnsembleModel, as_ensemble

log = logging.getLogger("aetransfer")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def _ints(text: str) -> tuple[int, ...]:
    return tuple(int(t) for t in text.split(",") if t.strip())


def _sizes(text: str) -> list[int]:
    """'1-4' or '1,3,5'."""
    if "-" in text:
        lo, hi = text.split("-", 1)
        return list(range(int(lo), int(hi) + 1))
    return list(_ints(text))


def _root(args) -> Path:
    return Path(args.root) if args.root else store.artifact_root()


def _out(args, default: Path) -> Path:
    return Path(args.out) if getattr(args, "out", None) else default


def _load_split(path, split: str, count: int | None = None):
    splits = store.load_dataset(path)
    if split not in splits:
        raise UsageError(f"dataset {path} has no split {split!r} (has {sorted(splits)})")
    s = splits[split]
    return s.head(count) if count else s


# ---- commands ----------------------------------------------------------------


def cmd_ingest(args) -> dict:
    if args.source == "cifar10":
        splits = data.ingest_cifar10(args.path, args.subsample, args.test_subsample, args.downscale, args.seed)
    else:
        splits = data.make_synthetic(args.classes, args.per_class, args.size, args.seed,
                                     test_per_class=args.test_per_class)
    path = store.save_dataset(splits, _out(args, _root(args) / "data" / f"{args.source}.aetx"))
    return {"path": str(path), "splits": {k: {"count": len(v), "fingerprint": v.fingerprint()}
                                          for k, v in splits.items()}}


def _train_config(args) -> nn.TrainConfig:
    base = nn.TrainConfig()
    over = {k: getattr(args, k) for k in ("epochs", "batch_size", "learning_rate") if getattr(args, k) is not None}
    return dataclasses.replace(base, seed=args.seed, **over)


def cmd_train(args) -> dict:
    splits = store.load_dataset(args.data)
    cfg = _train_config(args)
    if args.svm_from:
        parent = store.load_model(args.svm_from)
        model = nn.replace_head_svm(parent, splits["train"], cfg, splits.get("test"), seed=args.seed)
    else:
        shape = splits["train"].images.shape[1:]
        spec = nn.ModelSpec(blocks_per_stage=_ints(args.blocks), channels=_ints(args.channels), head=args.head,
                            regularizer=args.regularizer, reg_lambda=args.reg_lambda, reg_scale=args.reg_scale,
                            num_classes=splits["train"].num_classes, input_shape=tuple(shape)).validate()
        model = nn.train(nn.build(spec, args.seed), splits["train"], cfg, splits.get("test"))
    path = store.save_model(model, _out(args, _root(args) / "models" / f"{model.model_id}.aetx"))
    return {"path": str(path), "model_id": model.model_id, "describe": model.spec.describe(),
            "test_accuracy": model.meta.get("test_accuracy")}


def cmd_zoo(args) -> dict:
    splits = store.load_dataset(args.data)
    shape = splits["train"].images.shape[1:]
    base = nn.ModelSpec(blocks_per_stage=_ints(args.blocks), channels=_ints(args.channels),
                        num_classes=splits["train"].num_classes, input_shape=tuple(shape))
    groups, models = harness.make_regularized_zoo(
        base, (0.0, args.l1_max), (0.0, args.l2_max), args.count, args.seed, splits, _train_config(args),
        floors=(args.l1_floor, args.l2_floor), reg_scale=args.reg_scale)
    out = _out(args, _root(args) / "zoo")
    listing = {}
    for g in groups.values():
        listing[g.name] = []
        for mid in g.members:
            p = store.save_model(models[mid], out / g.name / f"{mid}.aetx")
            listing[g.name].append({"model_id": mid, "path": str(p), "describe": models[mid].spec.describe(),
                                    "test_accuracy": models[mid].meta.get("test_accuracy")})
    (out / "zoo.json").write_text(store.dumps_json(listing) + "\n")
    return {"dir": str(out), "groups": listing}


def cmd_ensemble(args) -> dict:
    if args.action == "build":
        members = [store.load_target(p) for p in args.models]
        weights = tuple(args.weights) if args.weights else None
        ens = EnsembleModel(tuple(m for e in members for m in as_ensemble(e).members),
                            weights or (1.0,) * sum(as_ensemble(e).size for e in members), args.gradient_mode)
        path = store.save_ensemble_manifest(_out(args, _root(args) / "ensembles" / f"{ens.model_id}.json"),
                                            [str(Path(p).resolve()) for p in args.models],
                                            weights, args.gradient_mode)
        return {"path": str(path), "model_id": ens.model_id, "size": ens.size}
    models = {}
    paths = {}
    for p in args.models:
        m = store.load_model(p)
        models[m.model_id] = m
        paths[m.model_id] = str(Path(p).resolve())
    groups, ens = harness.enumerate_ensembles(list(models), models, _sizes(args.sizes), args.cap, args.seed)
    out = _out(args, _root(args) / "ensembles")
    listing = {}
    for k, g in groups.items():
        listing[str(k)] = []
        for eid in g.members:
            p = store.save_ensemble_manifest(out / f"size-{k}" / f"{eid}.json",
                                             [paths[m] for m in ens[eid].member_ids])
            listing[str(k)].append({"model_id": eid, "path": str(p)})
    return {"dir": str(out), "ensembles": listing}


def _attack_config(args) -> AttackConfig:
    return AttackConfig(method=args.method, epsilon=args.epsilon, deepfool_max_iters=args.max_iters,
                        deepfool_overshoot=args.overshoot, clamp_to_domain=args.clamp)


def cmd_attack(args) -> dict:
    if args.action == "generate":
        target = store.load_target(args.target)
        split = _load_split(args.data, args.split, args.count)
        tid = getattr(target, "model_id", None)
        batch = attacks.generate_batch(target, split.images, split.labels, _attack_config(args), tid)
        default = _root(args) / "batches" / f"{tid}-{args.method}.aetx"
    else:
        src = store.load_batch(args.batch)
        batch = attacks.amplify_to_magnitude(src, args.to, args.mode, allow_reduce=args.allow_reduce,
                                             clamp=args.clamp)
        default = Path(args.batch).with_suffix(".amplified.aetx")
    path = store.save_batch(batch, _out(args, default))
    return {"path": str(path), "count": batch.count, "target_id": batch.target_id,
            "pre_misclassified": int(batch.pre_misclassified.sum()), "converged": int(batch.converged.sum()),
            "noise_magnitude": metrics.noise_magnitude(batch).value}


def cmd_eval(args) -> dict:
    if args.metric == "noise":
        return metrics.noise_magnitude(store.load_batch(args.batch), args.mode).to_dict()
    tests = [store.load_target(p) for p in args.models]
    test_ids = [getattr(t, "model_id", str(p)) for t, p in zip(tests, args.models)]
    if args.metric == "asr":
        b = store.load_batch(args.batch)
        return metrics.asr_from_predictions([nn.model_predict(t, b.adversarial) for t in tests],
                                            b.labels, test_ids, b.target_id).to_dict()
    asrs = []
    for bp in args.batches:
        b = store.load_batch(bp)
        asrs.append(metrics.asr_from_predictions([nn.model_predict(t, b.adversarial) for t in tests],
                                                 b.labels, test_ids, b.target_id))
    return metrics.compute_aasr(asrs).to_dict()


def _lab(args) -> harness.Lab:
    over = {}
    if args.cifar:
        over.update(dataset="cifar10", cifar_path=args.cifar)
    if args.ae_count is not None:
        over["ae_count"] = args.ae_count or None
    scale = harness.get_scale(args.scale, **over)
    return harness.Lab(scale, args.seed, root=_root(args) / "cache" / scale.name)


def cmd_experiment(args) -> dict:
    if args.action == "preset":
        if not args.name:
            return {"presets": list(harness.PRESETS), "scales": {k: v.to_dict() for k, v in harness.SCALES.items()}}
        spec = _lab(args).preset(args.name)
        out = _out(args, _root(args) / "runs" / f"{args.name}-{args.scale}-seed{args.seed}")
        out.mkdir(parents=True, exist_ok=True)
        path = out / "experiment.json"
        path.write_text(store.dumps_json(spec.config_dict()) + "\n")
        return {"path": str(path), "target_groups": [g.name for g in spec.target_groups],
                "test_groups": [g.name for g in spec.test_groups], "models": len(spec.models)}
    if bool(args.preset) == bool(args.config):
        raise UsageError("experiment run needs exactly one of --preset or --config")
    if args.preset:
        lab = _lab(args)
        result = lab.run(args.preset)
        default = _root(args) / "runs" / f"{args.preset}-{args.scale}-seed{args.seed}"
    else:
        cfg = harness.load_config(args.config)
        result = harness.run_experiment(harness.spec_from_config(cfg, Path(args.config).parent))
        default = _root(args) / "runs" / result.spec.name
    out = _out(args, default)
    paths = result.write(out)
    if not args.no_figures:
        from . import report
        paths.update(report.render_run(out, fmt=args.format))
    return {"dir": str(out), "files": {k: str(v) for k, v in paths.items()},
            "rows": result.matrix.rows, "cols": result.matrix.cols,
            "aasr": [[None if np.isnan(v) else float(v) for v in row] for row in result.matrix.values()]}


def cmd_report(args) -> dict:
    from . import report

    paths = report.render_run(args.run, args.out, args.format)
    return {"files": {k: str(v) for k, v in paths.items()}}


# ---- parser ------------------------------------------------------------------


def _add_train_flags(p):
    p.add_argument("--epochs", type=int)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--learning-rate", type=float)
    p.add_argument("--blocks", default="1,1,1", help="residual blocks per stage, comma separated")
    p.add_argument("--channels", default="4,8,16", help="channel width per stage; empty for a linear model")


def _add_attack_flags(p):
    p.add_argument("--method", choices=attacks.METHODS, default="deepfool-l2")
    p.add_argument("--epsilon", type=float, default=2.0)
    p.add_argument("--max-iters", type=int, default=50)
    p.add_argument("--overshoot", type=float, default=0.02)
    p.add_argument("--clamp", action="store_true", help="clip adversarial pixels to [0, 255]")


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="aetransfer", description="Adversarial example transferability experiments.")
    p.add_argument("--root", help="artifact root (default: $AETRANSFER_ROOT or ./artifacts)")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("ingest", help="build a dataset file")
    s.add_argument("source", choices=("cifar10", "synthetic"))
    s.add_argument("--path", help="directory with the CIFAR-10 binary batches")
    s.add_argument("--subsample", type=int)
    s.add_argument("--test-subsample", type=int)
    s.add_argument("--downscale", type=int)
    s.add_argument("--classes", type=int, default=10)
    s.add_argument("--per-class", type=int, default=200)
    s.add_argument("--test-per-class", type=int, default=50)
    s.add_argument("--size", type=int, default=16)
    s.add_argument("--out")

    s = sub.add_parser("train", help="train one model")
    s.add_argument("--data", required=True)
    s.add_argument("--head", choices=nn.HEADS, default="softmax")
    s.add_argument("--regularizer", choices=nn.REGULARIZERS, default="none")
    s.add_argument("--lambda", dest="reg_lambda", type=float, default=0.0)
    s.add_argument("--reg-scale", type=float, default=1.0)
    s.add_argument("--svm-from", help="retrain this softmax model with an svm head")
    _add_train_flags(s)
    s.add_argument("--out")

    s = sub.add_parser("zoo", help="train the four regularized groups")
    s.add_argument("--data", required=True)
    s.add_argument("--count", type=int, default=5)
    s.add_argument("--l1-max", type=float, default=5.0)
    s.add_argument("--l2-max", type=float, default=35.0)
    s.add_argument("--l1-floor", type=float, default=0.05)
    s.add_argument("--l2-floor", type=float, default=0.35)
    s.add_argument("--reg-scale", type=float, default=1.0)
    _add_train_flags(s)
    s.add_argument("--out")

    s = sub.add_parser("ensemble", help="build or enumerate ensembles")
    s.add_argument("action", choices=("build", "enumerate"))
    s.add_argument("--models", nargs="+", required=True)
    s.add_argument("--weights", nargs="+", type=float)
    s.add_argument("--gradient-mode", choices=("per-model", "averaged-output"), default="per-model")
    s.add_argument("--sizes", default="1-2")
    s.add_argument("--cap", type=int)
    s.add_argument("--out")

    s = sub.add_parser("attack", help="generate or amplify adversarial batches")
    s.add_argument("action", choices=("generate", "amplify"))
    s.add_argument("--target")
    s.add_argument("--data")
    s.add_argument("--split", default="test")
    s.add_argument("--count", type=int)
    s.add_argument("--batch")
    s.add_argument("--to", type=float)
    s.add_argument("--mode", choices=("global", "per-image"), default="global")
    s.add_argument("--allow-reduce", action="store_true")
    _add_attack_flags(s)
    s.add_argument("--out")

    s = sub.add_parser("eval", help="metrics from stored batches")
    s.add_argument("metric", choices=("asr", "aasr", "noise"))
    s.add_argument("--batch")
    s.add_argument("--batches", nargs="+")
    s.add_argument("--models", nargs="+")
    s.add_argument("--mode", choices=metrics.NOISE_MODES, default="literal")

    s = sub.add_parser("experiment", help="run presets or config files")
    s.add_argument("action", choices=("run", "preset"))
    s.add_argument("name", nargs="?", help="preset name (experiment preset)")
    s.add_argument("--preset", choices=harness.PRESETS)
    s.add_argument("--config", help="YAML or JSON experiment config")
    s.add_argument("--scale", choices=sorted(harness.SCALES), default="desk")
    s.add_argument("--cifar", help="use CIFAR-10 binaries from this directory")
    s.add_argument("--ae-count", type=int, help="adversarial examples per target; 0 for the whole split")
    s.add_argument("--format", choices=("svg", "pdf"), default="svg")
    s.add_argument("--no-figures", action="store_true")
    s.add_argument("--out")

    s = sub.add_parser("report", help="figures from a stored run directory")
    s.add_argument("run")
    s.add_argument("--format", choices=("svg", "pdf"), default="svg")
    s.add_argument("--out")

    # global flags are also accepted after the subcommand
    for sp in sub.choices.values():
        sp.add_argument("--root", default=argparse.SUPPRESS, help=argparse.SUPPRESS)
        sp.add_argument("--seed", type=int, default=argparse.SUPPRESS, help=argparse.SUPPRESS)
        sp.add_argument("-v", "--verbose", action="store_true", default=argparse.SUPPRESS, help=argparse.SUPPRESS)
    return p


def _check_required(args):
    need = {
        ("ingest", "cifar10"): ["path"],
        ("attack", "generate"): ["target", "data"],
        ("attack", "amplify"): ["batch", "to"],
        ("eval", "asr"): ["batch", "models"],
        ("eval", "aasr"): ["batches", "models"],
        ("eval", "noise"): ["batch"],
    }
    key = (args.command, getattr(args, "source", None) or getattr(args, "action", None) or getattr(args, "metric", None))
    missing = [f"--{n.replace('_', '-')}" for n in need.get(key, []) if getattr(args, n, None) is None]
    if missing:
        raise UsageError(f"{' '.join(key)} requires {', '.join(missing)}")


COMMANDS = {
    "ingest": cmd_ingest, "train": cmd_train, "zoo": cmd_zoo, "ensemble": cmd_ensemble, "attack": cmd_attack,
    "eval": cmd_eval, "experiment": cmd_experiment, "report": cmd_report,
}

USAGE_ERRORS = (UsageError, harness.ExperimentError, nn.SpecError, FileNotFoundError)


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                            format="%(levelname)s %(name)s: %(message)s")
        _check_required(args)
        result = COMMANDS[args.command](args)
    except Exception as exc:  # noqa: BLE001 - every failure becomes an error record
        code = 2 if isinstance(exc, USAGE_ERRORS) else 1
        record = {"ok": False, "error": type(exc).__name__, "message": str(exc)}
        print(json.dumps(record, sort_keys=True), file=sys.stderr)
        return code
    print(json.dumps({"ok": True, **result}, sort_keys=True, default=str))
    return 0


if __name__ == "__main__":
    sys.exit(main())
